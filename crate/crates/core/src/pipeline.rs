//! Per-image orchestration: detect, stratify, verify the detector's misses
//! with the VLM (one refined retry on ambiguity), query states, fuse.
//!
//! Images are independent and run on a bounded worker pool; results are
//! handed to the caller in input order regardless of completion order.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{best_per_component, stratify, Detector, Stratification, StratifyError, DEFAULT_TAU_HIGH};
use crate::ontology::{ComponentOntology, ComponentSpec, ImageRef, STATE_NA, STATE_UNKNOWN};
use crate::prompt::{optimize_prompt, PromptInstance, PromptTemplates};
use crate::record::{ImageResult, RetrievalRecord, Source};
use crate::transport::BackendError;
use crate::vlm::{ExistenceVerdict, RawReply, ReplyParser, StateVerdict, Vlm, DEFAULT_MAX_SIDE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub tau_high: f64,
    /// Confidence of a VLM verdict reached on the first query.
    pub vlm_conf_direct: f64,
    /// Confidence of a VLM verdict reached after the refined retry.
    pub vlm_conf_after_retry: f64,
    /// Confidence of a verdict that stayed ambiguous after the retry.
    pub vlm_conf_unresolved: f64,
    pub max_side: u32,
    pub worker_count: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tau_high: DEFAULT_TAU_HIGH,
            vlm_conf_direct: 0.90,
            vlm_conf_after_retry: 0.75,
            vlm_conf_unresolved: 0.50,
            max_side: DEFAULT_MAX_SIDE,
            worker_count: 4,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(0.0..=1.0).contains(&self.tau_high) {
            return bad(format!("tau_high {} outside [0,1]", self.tau_high));
        }
        let chain = [
            0.0,
            self.vlm_conf_unresolved,
            self.vlm_conf_after_retry,
            self.vlm_conf_direct,
            1.0,
        ];
        if !chain.windows(2).all(|w| w[0] <= w[1]) {
            return bad(format!(
                "need 0 <= vlm_conf_unresolved ({}) <= vlm_conf_after_retry ({}) <= vlm_conf_direct ({}) <= 1",
                self.vlm_conf_unresolved, self.vlm_conf_after_retry, self.vlm_conf_direct
            ));
        }
        if self.max_side == 0 {
            return bad("max_side must be positive".into());
        }
        if self.worker_count == 0 {
            return bad("worker_count must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Stratify(#[from] StratifyError),
    /// A backend failure that ends the run (quota exhaustion).
    #[error("fatal backend failure on image {image_id}: {source}")]
    Fatal {
        image_id: String,
        #[source]
        source: BackendError,
    },
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Detect,
    /// One detector proposal, logged for audit only.
    Proposal,
    Existence,
    State,
}

/// One backend call, as written to the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallEvent {
    pub image_id: String,
    pub kind: CallKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    pub duration_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CallEvent {
    fn new(image_id: &str, kind: CallKind) -> Self {
        Self {
            image_id: image_id.to_string(),
            kind,
            component: None,
            prompt: None,
            reply: None,
            confidence: None,
            duration_ms: 0,
            error: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationOutcome {
    pub component: String,
    pub verdict: ExistenceVerdict,
    /// 1 when the first reply was ambiguous and a refined prompt was sent.
    pub retries_used: u32,
    pub prompts: Vec<PromptInstance>,
    /// Set when a backend call failed; the component is then recorded as a
    /// zero-confidence absence.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateAnswer {
    pub component: String,
    /// An option label, or `"unknown"` when the reply was ambiguous or the call failed.
    pub state: String,
    pub reply: Option<RawReply>,
}

/// Result of one image plus every backend call made for it.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTrace {
    pub result: ImageResult,
    pub events: Vec<CallEvent>,
}

impl ImageTrace {
    pub fn count(&self, kind: CallKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }
}

pub struct Pipeline {
    ontology: ComponentOntology,
    config: PipelineConfig,
    templates: PromptTemplates,
    parser: ReplyParser,
    detector: Box<dyn Detector>,
    vlm: Box<dyn Vlm>,
}

impl Pipeline {
    pub fn new(
        ontology: ComponentOntology,
        config: PipelineConfig,
        detector: Box<dyn Detector>,
        vlm: Box<dyn Vlm>,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        ontology
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(Self {
            ontology,
            config,
            templates: PromptTemplates::default(),
            parser: ReplyParser::default(),
            detector,
            vlm,
        })
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    pub fn with_parser(mut self, parser: ReplyParser) -> Self {
        self.parser = parser;
        self
    }

    pub fn ontology(&self) -> &ComponentOntology {
        &self.ontology
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn ask(
        &self,
        image: &ImageRef,
        kind: CallKind,
        component: &str,
        prompt: &str,
        events: &mut Vec<CallEvent>,
    ) -> Result<Result<RawReply, BackendError>, PipelineError> {
        let started = Instant::now();
        let reply = self.vlm.ask(image, prompt, self.config.max_side);
        let mut event = CallEvent::new(&image.image_id, kind);
        event.component = Some(component.to_string());
        event.prompt = Some(prompt.to_string());
        event.duration_ms = started.elapsed().as_millis() as u64;
        match &reply {
            Ok(r) => event.reply = Some(r.text.clone()),
            Err(e) => {
                log::warn!("{}: {kind:?} query for {component} failed: {e}", image.image_id);
                event.error = Some(e.to_string());
            }
        }
        events.push(event);
        match reply {
            Err(e) if e.is_fatal() => Err(PipelineError::Fatal {
                image_id: image.image_id.clone(),
                source: e,
            }),
            other => Ok(other),
        }
    }

    /// Existence check for a component the detector did not confirm.
    pub fn verify_component(
        &self,
        image: &ImageRef,
        component: &ComponentSpec,
        events: &mut Vec<CallEvent>,
    ) -> Result<VerificationOutcome, PipelineError> {
        let first = self.templates.existence(component);
        let mut outcome = VerificationOutcome {
            component: component.id.clone(),
            verdict: ExistenceVerdict::Ambiguous,
            retries_used: 0,
            prompts: vec![first.clone()],
            error: None,
        };
        let reply = match self.ask(image, CallKind::Existence, &component.id, &first.text, events)? {
            Ok(r) => r,
            Err(e) => {
                outcome.error = Some(e.to_string());
                return Ok(outcome);
            }
        };
        outcome.verdict = self.parser.existence(&reply);
        if outcome.verdict == ExistenceVerdict::Ambiguous {
            let refined = optimize_prompt(&first, component);
            outcome.retries_used = 1;
            outcome.prompts.push(refined.clone());
            match self.ask(image, CallKind::Existence, &component.id, &refined.text, events)? {
                Ok(r) => outcome.verdict = self.parser.existence(&r),
                Err(e) => outcome.error = Some(e.to_string()),
            }
        }
        Ok(outcome)
    }

    /// State query for a component whose existence is already established.
    /// Components without state options get `"N/A"` without a call.
    pub fn state_of(
        &self,
        image: &ImageRef,
        component: &ComponentSpec,
        events: &mut Vec<CallEvent>,
    ) -> Result<StateAnswer, PipelineError> {
        if !component.has_states() {
            return Ok(StateAnswer {
                component: component.id.clone(),
                state: STATE_NA.to_string(),
                reply: None,
            });
        }
        let prompt = self.templates.state(component);
        let reply = self.ask(image, CallKind::State, &component.id, &prompt.text, events)?;
        let state = match &reply {
            Ok(r) => match self.parser.state(r, &component.state_options) {
                StateVerdict::Label(l) => l,
                StateVerdict::Ambiguous => STATE_UNKNOWN.to_string(),
            },
            Err(_) => STATE_UNKNOWN.to_string(),
        };
        Ok(StateAnswer {
            component: component.id.clone(),
            state,
            reply: reply.ok(),
        })
    }

    pub fn process_image(&self, image: &ImageRef) -> Result<ImageTrace, PipelineError> {
        let mut events = Vec::new();
        let started = Instant::now();
        let detected = self.detector.detect(image);
        let mut event = CallEvent::new(&image.image_id, CallKind::Detect);
        event.duration_ms = started.elapsed().as_millis() as u64;
        let proposals = match detected {
            Ok(p) => {
                events.push(event);
                p
            }
            Err(e) => {
                log::warn!("{}: detector failed: {e}", image.image_id);
                event.error = Some(e.to_string());
                events.push(event);
                if e.is_fatal() {
                    return Err(PipelineError::Fatal {
                        image_id: image.image_id.clone(),
                        source: e,
                    });
                }
                return Ok(ImageTrace {
                    result: ImageResult::failed(&image.image_id, &self.ontology, e.to_string()),
                    events,
                });
            }
        };
        for p in &proposals {
            let mut event = CallEvent::new(&image.image_id, CallKind::Proposal);
            event.component = Some(p.component.clone());
            event.confidence = Some(p.confidence);
            events.push(event);
        }

        let strat = stratify(&best_per_component(&proposals), &self.ontology, self.config.tau_high)?;
        let mut outcomes = Vec::with_capacity(strat.verify.len());
        let mut states = HashMap::new();
        for spec in &self.ontology.components {
            let exists = if strat.is_confirmed(&spec.id) {
                true
            } else {
                let outcome = self.verify_component(image, spec, &mut events)?;
                let yes = outcome.verdict == ExistenceVerdict::Yes && outcome.error.is_none();
                outcomes.push(outcome);
                yes
            };
            if exists && spec.has_states() {
                let answer = self.state_of(image, spec, &mut events)?;
                states.insert(answer.component, answer.state);
            }
        }

        let records = fuse(&self.ontology, &strat, &outcomes, &states, &self.config)?;
        let result = ImageResult::new(&image.image_id, records);
        result.check(&self.ontology).map_err(PipelineError::Invariant)?;
        Ok(ImageTrace { result, events })
    }

    /// Processes `images` on `worker_count` threads and passes each trace to
    /// `sink` in input order. A fatal backend error or a sink error stops
    /// dispatch; traces already emitted stay emitted.
    pub fn run<E, F>(&self, images: &[ImageRef], mut sink: F) -> Result<(), RunError<E>>
    where
        F: FnMut(ImageTrace) -> Result<(), E>,
        E: Send,
    {
        let workers = self.config.worker_count.min(images.len()).max(1);
        let next = AtomicUsize::new(0);
        let stop = AtomicBool::new(false);
        thread::scope(|scope| {
            let (tx, rx) = mpsc::sync_channel::<(usize, Result<ImageTrace, PipelineError>)>(workers * 4);
            for _ in 0..workers {
                let tx = tx.clone();
                let (next, stop) = (&next, &stop);
                scope.spawn(move || loop {
                    if stop.load(Ordering::Relaxed) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= images.len() {
                        break;
                    }
                    if tx.send((i, self.process_image(&images[i]))).is_err() {
                        break;
                    }
                });
            }
            drop(tx);

            let mut pending: BTreeMap<usize, Result<ImageTrace, PipelineError>> = BTreeMap::new();
            let mut emit_at = 0;
            let mut failure: Option<RunError<E>> = None;
            for (i, res) in rx {
                if failure.is_some() {
                    continue;
                }
                pending.insert(i, res);
                while let Some(res) = pending.remove(&emit_at) {
                    emit_at += 1;
                    let outcome = match res {
                        Ok(trace) => sink(trace).map_err(RunError::Sink),
                        Err(e) => Err(RunError::Pipeline(e)),
                    };
                    if let Err(e) = outcome {
                        stop.store(true, Ordering::Relaxed);
                        failure = Some(e);
                        break;
                    }
                }
            }
            failure.map_or(Ok(()), Err)
        })
    }

    /// Runs all images and collects results in input order.
    pub fn run_collect(&self, images: &[ImageRef]) -> Result<Vec<ImageTrace>, PipelineError> {
        let mut out = Vec::with_capacity(images.len());
        self.run(images, |t| {
            out.push(t);
            Ok::<_, std::convert::Infallible>(())
        })
        .map_err(|e| match e {
            RunError::Pipeline(e) => e,
            RunError::Sink(never) => match never {},
        })?;
        Ok(out)
    }
}

#[derive(Debug, Error)]
pub enum RunError<E> {
    #[error(transparent)]
    Pipeline(PipelineError),
    #[error("result sink failed")]
    Sink(E),
}

/// Combines confirmed detector hits with VLM outcomes and state answers into
/// one record per ontology component, in ontology order.
///
/// `outcomes` must cover exactly `strat.verify`, and `states` exactly the
/// existing components that have state options.
pub fn fuse(
    ontology: &ComponentOntology,
    strat: &Stratification,
    outcomes: &[VerificationOutcome],
    states: &HashMap<String, String>,
    config: &PipelineConfig,
) -> Result<Vec<RetrievalRecord>, PipelineError> {
    let by_component: HashMap<&str, &VerificationOutcome> =
        outcomes.iter().map(|o| (o.component.as_str(), o)).collect();
    if by_component.len() != outcomes.len()
        || outcomes.len() != strat.verify.len()
        || !strat.verify.iter().all(|c| by_component.contains_key(c.as_str()))
    {
        return Err(PipelineError::Invariant(
            "verification outcomes do not match the verification set".into(),
        ));
    }
    let mut used_states = 0;
    let mut state_for = |spec: &ComponentSpec| -> Result<String, PipelineError> {
        if !spec.has_states() {
            return Ok(STATE_NA.to_string());
        }
        used_states += 1;
        states
            .get(&spec.id)
            .cloned()
            .ok_or_else(|| PipelineError::Invariant(format!("no state answer for existing {}", spec.id)))
    };

    let mut records = Vec::with_capacity(ontology.len());
    for spec in &ontology.components {
        let id = spec.id.as_str();
        if let Some(&conf) = strat.confirmed.get(id) {
            records.push(RetrievalRecord::present(id, state_for(spec)?, conf, Source::Detector, 0));
            continue;
        }
        let Some(outcome) = by_component.get(id) else {
            return Err(PipelineError::Invariant(format!("{id} neither confirmed nor verified")));
        };
        let retries = outcome.retries_used;
        let settled_conf = if retries == 0 {
            config.vlm_conf_direct
        } else {
            config.vlm_conf_after_retry
        };
        let record = match (outcome.error.is_some(), outcome.verdict) {
            (true, _) => RetrievalRecord::absent(id, 0.0, Source::Vlm, retries),
            (false, ExistenceVerdict::Yes) => {
                RetrievalRecord::present(id, state_for(spec)?, settled_conf, Source::Vlm, retries)
            }
            (false, ExistenceVerdict::No) => RetrievalRecord::absent(id, settled_conf, Source::Vlm, retries),
            (false, ExistenceVerdict::Ambiguous) => {
                RetrievalRecord::absent(id, config.vlm_conf_unresolved, Source::Vlm, retries)
            }
        };
        records.push(record);
    }
    if used_states != states.len() {
        return Err(PipelineError::Invariant(format!(
            "{} state answers supplied for {} existing components with states",
            states.len(),
            used_states
        )));
    }
    Ok(records)
}
