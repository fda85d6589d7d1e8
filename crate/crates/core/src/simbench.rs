//! Monte-Carlo benchmark of the two-stage fusion law.
//!
//! Ground truth, detector proposals and VLM replies are drawn from a
//! verdict-level error model, turned into scripted backends, and run through
//! the real [`Pipeline`] and the real evaluator. Every (image, component)
//! pair consumes the same five uniforms regardless of the model, so sweeps
//! over one parameter with a fixed seed are coupled.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{DetectionProposal, ScriptedDetector};
use crate::eval::{evaluate, report, Coverage, EvalError, GroundTruth, ReportFormat, Target, TargetMetrics, TruthEntry};
use crate::ontology::{ComponentOntology, ComponentSpec, ImageRef};
use crate::pipeline::{CallKind, Pipeline, PipelineConfig, PipelineError};
use crate::prompt::{optimize_prompt, PromptTemplates};
use crate::record::Source;
use crate::vlm::{ScriptedVlm, VlmRule};

const AMBIGUOUS_REPLY: &str = "It is unclear";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErrorModel {
    /// P(present component is proposed above the threshold).
    pub det_recall: f64,
    /// P(absent component is proposed above the threshold).
    pub det_fp_rate: f64,
    /// P(Yes | present) for a settled VLM reply.
    pub vlm_sensitivity: f64,
    /// P(No | absent) for a settled VLM reply.
    pub vlm_specificity: f64,
    /// P(first existence reply is ambiguous). The refined retry always settles.
    pub vlm_ambiguity: f64,
    pub prevalence: f64,
    pub seed: u64,
}

impl Default for ErrorModel {
    fn default() -> Self {
        Self {
            det_recall: 1.0,
            det_fp_rate: 0.0,
            vlm_sensitivity: 1.0,
            vlm_specificity: 1.0,
            vlm_ambiguity: 0.0,
            prevalence: 0.5,
            seed: 0,
        }
    }
}

impl ErrorModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let fields = [
            ("det_recall", self.det_recall),
            ("det_fp_rate", self.det_fp_rate),
            ("vlm_sensitivity", self.vlm_sensitivity),
            ("vlm_specificity", self.vlm_specificity),
            ("vlm_ambiguity", self.vlm_ambiguity),
            ("prevalence", self.prevalence),
        ];
        for (name, p) in fields {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::Model(format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid error model: {0}")]
    Model(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Recall of the fused system when the VLM re-checks every detector miss.
pub fn expected_fused_recall(det_recall: f64, vlm_sensitivity: f64) -> f64 {
    det_recall + (1.0 - det_recall) * vlm_sensitivity
}

const SPATIAL_HINTS: &[&str] = &[
    "top-left corner",
    "top-right corner",
    "center",
    "bottom-left corner",
    "bottom-right corner",
    "left edge",
    "right edge",
    "upper half",
    "lower half",
];

/// `n` detector-known components, each with a spatial hint so the refined
/// prompt differs from the original.
pub fn synthetic_ontology(n: usize) -> ComponentOntology {
    let components = (0..n)
        .map(|i| {
            ComponentSpec::new(format!("part_{i:02}"), format!("synthetic part {i:02}"))
                .with_spatial_hint(SPATIAL_HINTS[i % SPATIAL_HINTS.len()])
        })
        .collect();
    ComponentOntology::new("synthetic", components).expect("synthetic ontology is valid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub model: ErrorModel,
    pub images: usize,
    pub rows: Vec<TargetMetrics>,
    /// Present (image, component) pairs.
    pub present_trials: u64,
    /// All (image, component) pairs.
    pub component_trials: u64,
    pub fused_recall: f64,
    /// Fraction of present pairs recovered by the detector alone.
    pub detector_recall: f64,
    pub existence_calls: u64,
    pub expected_fused_recall: f64,
}

impl SimReport {
    /// Three binomial standard deviations of the fused-recall estimate.
    pub fn tolerance_3sigma(&self) -> f64 {
        let p = self.expected_fused_recall;
        if self.present_trials == 0 {
            return f64::INFINITY;
        }
        3.0 * (p * (1.0 - p) / self.present_trials as f64).sqrt()
    }

    pub fn render(&self, format: ReportFormat) -> String {
        let mut out = report(&self.rows, format);
        let _ = writeln!(
            out,
            "closed form: fused_recall={:.4} expected={:.4} diff={:+.4} tol3sigma={:.4} detector_only_recall={:.4} present_trials={} component_trials={}",
            self.fused_recall,
            self.expected_fused_recall,
            self.fused_recall - self.expected_fused_recall,
            self.tolerance_3sigma(),
            self.detector_recall,
            self.present_trials,
            self.component_trials,
        );
        out
    }
}

struct Draw {
    present: bool,
    confirmed: bool,
    ambiguous: bool,
    yes: bool,
    u_conf: f64,
}

fn draw(rng: &mut ChaCha8Rng, model: &ErrorModel) -> Draw {
    let u: [f64; 5] = rng.random();
    let present = u[0] < model.prevalence;
    let confirmed = if present {
        u[1] < model.det_recall
    } else {
        u[1] < model.det_fp_rate
    };
    let yes = if present {
        u[3] < model.vlm_sensitivity
    } else {
        u[3] >= model.vlm_specificity
    };
    Draw {
        present,
        confirmed,
        ambiguous: u[2] < model.vlm_ambiguity,
        yes,
        u_conf: u[4],
    }
}

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn image_id(index: usize) -> String {
    format!("sim{index:06}")
}

/// Generated inputs for one simulation run.
pub struct Scenario {
    pub images: Vec<ImageRef>,
    pub truth: GroundTruth,
    pub detector: ScriptedDetector,
    pub vlm: ScriptedVlm,
}

/// Draws ground truth and backend scripts. Components whose refined prompt
/// equals the original cannot model ambiguity; they are rejected when
/// `vlm_ambiguity > 0`.
pub fn build_scenario(
    model: &ErrorModel,
    images: usize,
    ontology: &ComponentOntology,
    tau_high: f64,
) -> Result<Scenario, SimError> {
    model.validate()?;
    let templates = PromptTemplates::default();
    let prompts: Vec<(String, String)> = ontology
        .components
        .iter()
        .map(|spec| {
            let original = templates.existence(spec);
            let refined = optimize_prompt(&original, spec);
            (original.text, refined.text)
        })
        .collect();
    if model.vlm_ambiguity > 0.0 {
        if let Some((spec, _)) = ontology.components.iter().zip(&prompts).find(|(_, (o, r))| o == r) {
            return Err(SimError::Model(format!(
                "component {} has no hints, so ambiguity cannot be resolved",
                spec.id
            )));
        }
    }

    let mut scenario = Scenario {
        images: Vec::with_capacity(images),
        truth: GroundTruth::default(),
        detector: ScriptedDetector::new(),
        vlm: ScriptedVlm::new().with_default_reply(AMBIGUOUS_REPLY),
    };
    for i in 0..images {
        let id = image_id(i);
        let mut rng = image_rng(model.seed, i);
        let mut truth = TruthEntry {
            image_id: id.clone(),
            ..TruthEntry::default()
        };
        for (spec, (original, refined)) in ontology.components.iter().zip(&prompts) {
            let d = draw(&mut rng, model);
            truth.present.insert(spec.id.clone(), d.present);
            if d.confirmed && spec.detector_known {
                let conf = tau_high + (1.0 - tau_high) * (0.01 + 0.98 * d.u_conf);
                scenario.detector.push(&id, DetectionProposal::new(&spec.id, conf));
            } else if d.present && d.u_conf < 0.5 {
                // A below-threshold proposal; stratification must discard it.
                scenario
                    .detector
                    .push(&id, DetectionProposal::new(&spec.id, tau_high * d.u_conf));
            }
            let settled = if d.yes { "Yes" } else { "No" };
            scenario.vlm.push(VlmRule {
                image_id: id.clone(),
                prompt_contains: refined.clone(),
                reply: settled.into(),
            });
            scenario.vlm.push(VlmRule {
                image_id: id.clone(),
                prompt_contains: original.clone(),
                reply: if d.ambiguous { AMBIGUOUS_REPLY.into() } else { settled.into() },
            });
        }
        scenario.truth.insert(truth);
        scenario.images.push(ImageRef::new(&id, format!("sim://{id}")));
    }
    Ok(scenario)
}

pub fn run_simulation(
    model: &ErrorModel,
    images: usize,
    ontology: &ComponentOntology,
    config: &PipelineConfig,
) -> Result<SimReport, SimError> {
    if images == 0 {
        return Err(SimError::Model("need at least one image".into()));
    }
    let scenario = build_scenario(model, images, ontology, config.tau_high)?;
    let pipeline = Pipeline::new(
        ontology.clone(),
        config.clone(),
        Box::new(scenario.detector),
        Box::new(scenario.vlm),
    )?;
    let traces = pipeline.run_collect(&scenario.images)?;

    let mut present = 0u64;
    let mut recovered = 0u64;
    let mut by_detector = 0u64;
    let mut existence_calls = 0u64;
    let mut results = Vec::with_capacity(traces.len());
    for trace in traces {
        existence_calls += trace.count(CallKind::Existence) as u64;
        let truth = scenario.truth.get(&trace.result.image_id).expect("truth for every image");
        for rec in &trace.result.records {
            if truth.present[&rec.component] {
                present += 1;
                if rec.exists() {
                    recovered += 1;
                    if rec.source == Source::Detector {
                        by_detector += 1;
                    }
                }
            }
        }
        results.push(trace.result);
    }
    let targets: Vec<_> = ontology.ids().map(|c| Target::Existence(c.to_string())).collect();
    let rows = evaluate(&results, &scenario.truth, &targets, Coverage::Strict)?;
    let ratio = |n: u64| if present == 0 { 0.0 } else { n as f64 / present as f64 };
    Ok(SimReport {
        model: *model,
        images,
        rows,
        present_trials: present,
        component_trials: (images * ontology.len()) as u64,
        fused_recall: ratio(recovered),
        detector_recall: ratio(by_detector),
        existence_calls,
        expected_fused_recall: expected_fused_recall(model.det_recall, model.vlm_sensitivity),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> PipelineConfig {
        PipelineConfig {
            worker_count: 4,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(format!("{:.4}", expected_fused_recall(0.8305, 0.8)), "0.9661");
        for s in [0.0, 0.3, 1.0] {
            assert_eq!(expected_fused_recall(1.0, s), 1.0);
        }
        assert_eq!(expected_fused_recall(0.42, 0.0), 0.42);
    }

    #[test]
    fn model_validation() {
        let bad = ErrorModel {
            vlm_ambiguity: 1.5,
            ..ErrorModel::default()
        };
        assert!(matches!(bad.validate(), Err(SimError::Model(_))));
        let o = synthetic_ontology(2);
        assert!(run_simulation(&ErrorModel::default(), 0, &o, &config()).is_err());
    }

    #[test]
    fn ambiguity_needs_hints() {
        let o = ComponentOntology::new("x", vec![ComponentSpec::new("a", "a")]).unwrap();
        let m = ErrorModel {
            vlm_ambiguity: 0.2,
            ..ErrorModel::default()
        };
        assert!(matches!(run_simulation(&m, 3, &o, &config()), Err(SimError::Model(_))));
    }

    #[test]
    fn converges_within_three_sigma() {
        let m = ErrorModel {
            det_recall: 0.83,
            vlm_sensitivity: 0.8,
            vlm_ambiguity: 0.2,
            seed: 11,
            ..ErrorModel::default()
        };
        let r = run_simulation(&m, 4000, &synthetic_ontology(5), &config()).unwrap();
        assert!(
            (r.fused_recall - r.expected_fused_recall).abs() <= r.tolerance_3sigma(),
            "{} vs {}",
            r.fused_recall,
            r.expected_fused_recall
        );
        assert!(r.fused_recall >= r.detector_recall);
    }

    #[test]
    fn perfect_detector_sends_present_parts_nowhere() {
        let m = ErrorModel {
            det_recall: 1.0,
            prevalence: 1.0,
            seed: 5,
            ..ErrorModel::default()
        };
        let r = run_simulation(&m, 200, &synthetic_ontology(4), &config()).unwrap();
        assert_eq!(r.existence_calls, 0);
        assert_eq!(r.detector_recall, 1.0);
    }

    #[test]
    fn same_seed_same_report() {
        let m = ErrorModel {
            det_recall: 0.7,
            det_fp_rate: 0.1,
            vlm_sensitivity: 0.6,
            vlm_specificity: 0.9,
            vlm_ambiguity: 0.3,
            seed: 99,
            ..ErrorModel::default()
        };
        let o = synthetic_ontology(3);
        let a = run_simulation(&m, 300, &o, &config()).unwrap();
        let b = run_simulation(
            &m,
            300,
            &o,
            &PipelineConfig {
                worker_count: 1,
                ..config()
            },
        )
        .unwrap();
        assert_eq!(a.render(ReportFormat::Csv), b.render(ReportFormat::Csv));
        let c = run_simulation(&ErrorModel { seed: 100, ..m }, 300, &o, &config()).unwrap();
        assert_ne!(a.render(ReportFormat::Csv), c.render(ReportFormat::Csv));
    }

    #[test]
    fn fusion_never_loses_recall() {
        let o = synthetic_ontology(3);
        for seed in 0..10 {
            let m = ErrorModel {
                det_recall: 0.6,
                vlm_sensitivity: 0.3,
                seed,
                ..ErrorModel::default()
            };
            let r = run_simulation(&m, 100, &o, &config()).unwrap();
            assert!(r.fused_recall >= r.detector_recall, "seed {seed}");
        }
    }

    fn mean_precision(r: &SimReport) -> f64 {
        r.rows.iter().map(|row| row.metrics.precision).sum::<f64>() / r.rows.len() as f64
    }

    #[test]
    fn precision_falls_with_false_positives() {
        let o = synthetic_ontology(3);
        let base = ErrorModel {
            det_recall: 0.8,
            vlm_sensitivity: 0.8,
            seed: 3,
            ..ErrorModel::default()
        };
        let sweep = |f: &dyn Fn(f64) -> ErrorModel| -> Vec<f64> {
            [0.0, 0.1, 0.3]
                .iter()
                .map(|&x| mean_precision(&run_simulation(&f(x), 400, &o, &config()).unwrap()))
                .collect()
        };
        let by_det = sweep(&|x| ErrorModel { det_fp_rate: x, ..base });
        let by_vlm = sweep(&|x| ErrorModel {
            vlm_specificity: 1.0 - x,
            ..base
        });
        for p in [by_det, by_vlm] {
            assert!(p[0] > p[1] && p[1] > p[2], "{p:?}");
        }
    }
}
