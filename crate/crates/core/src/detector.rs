//! Stage 1: detection proposals and confidence stratification.
//!
//! Proposals above the high-confidence threshold become confirmed hits.
//! Every other ontology component goes to the VLM verification queue, and
//! low-confidence proposals are discarded without carrying any further
//! signal.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{ComponentOntology, ImageRef};
use crate::transport::{
    classify_http_error, http_agent, read_image_bytes, BackendError, InFlightLimit, RetryPolicy, ScriptError,
};

pub const DEFAULT_TAU_HIGH: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionProposal {
    pub component: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    pub confidence: f64,
}

impl DetectionProposal {
    pub fn new(component: impl Into<String>, confidence: f64) -> Self {
        Self {
            component: component.into(),
            bbox: None,
            confidence,
        }
    }

    pub fn with_bbox(mut self, x: f64, y: f64, width: f64, height: f64) -> Self {
        self.bbox = Some([x, y, width, height]);
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(format!(
                "proposal for {} has confidence {} outside [0,1]",
                self.component, self.confidence
            ));
        }
        if let Some([_, _, w, h]) = self.bbox {
            if !(w > 0.0 && h > 0.0) {
                return Err(format!("proposal for {} has degenerate bbox {w}x{h}", self.component));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Stratification {
    /// Confirmed hits, keyed by component id.
    pub confirmed: BTreeMap<String, f64>,
    /// Components left for VLM verification, in ontology order.
    pub verify: Vec<String>,
    pub discarded: Vec<DetectionProposal>,
}

impl Stratification {
    pub fn is_confirmed(&self, id: &str) -> bool {
        self.confirmed.contains_key(id)
    }

    pub fn needs_verification(&self, id: &str) -> bool {
        self.verify.iter().any(|v| v == id)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StratifyError {
    #[error("detector reported component \"{0}\" which is not in the ontology")]
    UnknownComponent(String),
    #[error("threshold {0} outside [0,1]")]
    InvalidThreshold(f64),
}

/// Highest confidence per component.
pub fn best_per_component(proposals: &[DetectionProposal]) -> BTreeMap<String, f64> {
    let mut best: BTreeMap<String, f64> = BTreeMap::new();
    for p in proposals {
        best.entry(p.component.clone())
            .and_modify(|c| {
                if p.confidence > *c {
                    *c = p.confidence
                }
            })
            .or_insert(p.confidence);
    }
    best
}

/// Partitions the ontology into confirmed hits (`conf > tau_high`) and the
/// verification queue. Components unknown to the detector always land in
/// the queue, whatever the detector reported for them.
pub fn stratify(
    best: &BTreeMap<String, f64>,
    ontology: &ComponentOntology,
    tau_high: f64,
) -> Result<Stratification, StratifyError> {
    if !(0.0..=1.0).contains(&tau_high) {
        return Err(StratifyError::InvalidThreshold(tau_high));
    }
    if let Some(unknown) = best.keys().find(|id| !ontology.contains(id)) {
        return Err(StratifyError::UnknownComponent(unknown.clone()));
    }
    let mut out = Stratification::default();
    for spec in &ontology.components {
        match best.get(&spec.id) {
            Some(&conf) if spec.detector_known && conf > tau_high => {
                out.confirmed.insert(spec.id.clone(), conf);
            }
            Some(&conf) => {
                out.discarded.push(DetectionProposal::new(spec.id.clone(), conf));
                out.verify.push(spec.id.clone());
            }
            None => out.verify.push(spec.id.clone()),
        }
    }
    for p in &out.discarded {
        log::debug!("discarding proposal {} at {:.4}", p.component, p.confidence);
    }
    Ok(out)
}

/// Stage-1 backend. Implementations must tolerate concurrent calls.
pub trait Detector: Send + Sync {
    fn detect(&self, image: &ImageRef) -> Result<Vec<DetectionProposal>, BackendError>;
}

impl<D: Detector + ?Sized> Detector for &D {
    fn detect(&self, image: &ImageRef) -> Result<Vec<DetectionProposal>, BackendError> {
        (**self).detect(image)
    }
}

impl<D: Detector + ?Sized> Detector for Box<D> {
    fn detect(&self, image: &ImageRef) -> Result<Vec<DetectionProposal>, BackendError> {
        (**self).detect(image)
    }
}

#[derive(Debug, Deserialize)]
struct ScriptLine {
    image_id: String,
    component: String,
    confidence: f64,
    #[serde(default)]
    bbox: Option<[f64; 4]>,
}

/// Detector replaying a fixed script of proposals per image.
#[derive(Debug, Clone, Default)]
pub struct ScriptedDetector {
    proposals: HashMap<String, Vec<DetectionProposal>>,
}

impl ScriptedDetector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, image_id: impl Into<String>, proposal: DetectionProposal) {
        self.proposals.entry(image_id.into()).or_default().push(proposal);
    }

    pub fn with(mut self, image_id: &str, component: &str, confidence: f64) -> Self {
        self.push(image_id, DetectionProposal::new(component, confidence));
        self
    }

    /// Loads a JSON Lines script of `{"image_id", "component", "confidence", "bbox"?}`.
    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self, ScriptError> {
        let mut det = Self::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| ScriptError {
                line: n + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptLine = serde_json::from_str(&line).map_err(|e| ScriptError {
                line: n + 1,
                message: e.to_string(),
            })?;
            let proposal = DetectionProposal {
                component: entry.component,
                bbox: entry.bbox,
                confidence: entry.confidence,
            };
            proposal.validate().map_err(|message| ScriptError { line: n + 1, message })?;
            det.push(entry.image_id, proposal);
        }
        Ok(det)
    }
}

impl Detector for ScriptedDetector {
    fn detect(&self, image: &ImageRef) -> Result<Vec<DetectionProposal>, BackendError> {
        Ok(self.proposals.get(&image.image_id).cloned().unwrap_or_default())
    }
}

#[derive(Debug, Clone)]
pub struct HttpDetectorConfig {
    pub base_url: String,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub timeout: Duration,
}

impl HttpDetectorConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Serialize)]
struct DetectRequest<'a> {
    image_id: &'a str,
    image_b64: String,
}

#[derive(Deserialize)]
struct DetectResponse {
    proposals: Vec<DetectionProposal>,
}

/// Client for a remote inference service speaking `POST /detect`.
pub struct HttpDetector {
    url: String,
    agent: ureq::Agent,
    limit: InFlightLimit,
    retry: RetryPolicy,
}

impl HttpDetector {
    pub fn new(config: HttpDetectorConfig) -> Self {
        Self {
            url: format!("{}/detect", config.base_url.trim_end_matches('/')),
            agent: http_agent(config.timeout),
            limit: InFlightLimit::new(config.max_in_flight),
            retry: config.retry,
        }
    }
}

impl Detector for HttpDetector {
    fn detect(&self, image: &ImageRef) -> Result<Vec<DetectionProposal>, BackendError> {
        let bytes = read_image_bytes(&image.uri)?;
        let request = DetectRequest {
            image_id: &image.image_id,
            image_b64: base64::engine::general_purpose::STANDARD.encode(bytes),
        };
        let response: DetectResponse = self.retry.run(|| {
            let _permit = self.limit.acquire();
            let mut resp = self.agent.post(&self.url).send_json(&request).map_err(classify_http_error)?;
            resp.body_mut().read_json().map_err(classify_http_error)
        })?;
        for p in &response.proposals {
            p.validate().map_err(BackendError::Protocol)?;
        }
        Ok(response.proposals)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::ComponentSpec;

    fn ontology() -> ComponentOntology {
        ComponentOntology::new(
            "t",
            vec![
                ComponentSpec::new("chepai", "License plate"),
                ComponentSpec::new("chebiao", "Emblem"),
                ComponentSpec::new("sun_visor", "sun visor").with_states(["raised", "lowered"]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn scripted_detect_returns_script() {
        let det = ScriptedDetector::from_jsonl(
            "{\"image_id\":\"img_001\",\"component\":\"chepai\",\"confidence\":0.92}\n\
             {\"image_id\":\"img_003\",\"component\":\"chebiao\",\"confidence\":0.41}\n\
             {\"image_id\":\"img_003\",\"component\":\"chebiao\",\"confidence\":0.55,\"bbox\":[1,2,3,4]}\n"
                .as_bytes(),
        )
        .unwrap();
        let p = det.detect(&ImageRef::new("img_001", "")).unwrap();
        assert_eq!(p, vec![DetectionProposal::new("chepai", 0.92)]);
        assert!(det.detect(&ImageRef::new("img_002", "")).unwrap().is_empty());
        // Not deduplicated.
        let two = det.detect(&ImageRef::new("img_003", "")).unwrap();
        assert_eq!(two.len(), 2);
        assert_eq!(two[1].bbox, Some([1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn script_rejects_bad_lines() {
        let err = ScriptedDetector::from_jsonl(
            "{\"image_id\":\"a\",\"component\":\"c\",\"confidence\":0.5}\n{\"image_id\":\"a\",\"component\":\"c\",\"confidence\":1.5}\n"
                .as_bytes(),
        )
        .unwrap_err();
        assert_eq!(err.line, 2);
        let err = ScriptedDetector::from_jsonl(
            "{\"image_id\":\"a\",\"component\":\"c\",\"confidence\":0.5,\"bbox\":[0,0,0,3]}".as_bytes(),
        )
        .unwrap_err();
        assert!(err.message.contains("bbox"));
    }

    #[test]
    fn best_takes_max_per_component() {
        let best = best_per_component(&[
            DetectionProposal::new("chebiao", 0.41),
            DetectionProposal::new("chebiao", 0.55),
        ]);
        assert_eq!(best.len(), 1);
        assert_eq!(best["chebiao"], 0.55);
        assert!(best_per_component(&[]).is_empty());
        let best = best_per_component(&[
            DetectionProposal::new("chepai", 0.92),
            DetectionProposal::new("chebiao", 0.41),
        ]);
        assert_eq!(best["chepai"], 0.92);
        assert_eq!(best["chebiao"], 0.41);
    }

    #[test]
    fn stratify_license_plate_example() {
        let best: BTreeMap<_, _> = [("chepai".to_string(), 0.92), ("chebiao".to_string(), 0.41)].into();
        let s = stratify(&best, &ontology(), 0.6).unwrap();
        assert_eq!(s.confirmed, [("chepai".to_string(), 0.92)].into());
        assert_eq!(s.verify, vec!["chebiao", "sun_visor"]);
        assert_eq!(s.discarded, vec![DetectionProposal::new("chebiao", 0.41)]);
    }

    #[test]
    fn stratify_empty_and_boundary() {
        let s = stratify(&BTreeMap::new(), &ontology(), 0.3).unwrap();
        assert!(s.confirmed.is_empty());
        assert_eq!(s.verify.len(), 3);

        let best: BTreeMap<_, _> = [("chepai".to_string(), 0.6)].into();
        let s = stratify(&best, &ontology(), 0.6).unwrap();
        assert!(s.needs_verification("chepai"));
        assert!(!s.is_confirmed("chepai"));
    }

    #[test]
    fn stratify_errors() {
        let best: BTreeMap<_, _> = [("wheel".to_string(), 0.9)].into();
        assert_eq!(
            stratify(&best, &ontology(), 0.6),
            Err(StratifyError::UnknownComponent("wheel".into()))
        );
        assert_eq!(
            stratify(&BTreeMap::new(), &ontology(), 1.2),
            Err(StratifyError::InvalidThreshold(1.2))
        );
    }

    #[test]
    fn zero_shot_component_never_confirmed() {
        let o = ComponentOntology::new("t", vec![ComponentSpec::new("mask", "driver wearing a mask").zero_shot()])
            .unwrap();
        let best: BTreeMap<_, _> = [("mask".to_string(), 0.99)].into();
        let s = stratify(&best, &o, 0.6).unwrap();
        assert!(s.confirmed.is_empty());
        assert_eq!(s.verify, vec!["mask"]);
    }
}
