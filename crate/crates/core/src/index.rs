//! Batch indexing: run the pipeline over a manifest, append each result to
//! the records file and each backend call to an optional run log.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use serde::Deserialize;

use crate::detector::HttpDetectorConfig;
use crate::ontology::ImageRef;
use crate::pipeline::{Pipeline, PipelineConfig, RunError};
use crate::store::RecordWriter;
use crate::vlm::HttpVlmConfig;
use crate::Error;

/// Knobs for a remote backend; unset fields keep the client defaults.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub max_in_flight: Option<usize>,
    pub timeout_secs: Option<f64>,
    pub retry_attempts: Option<u32>,
    pub retry_base_ms: Option<u64>,
    /// VLM only.
    pub rate_per_sec: Option<f64>,
    /// VLM only.
    pub model: Option<String>,
}

/// Contents of an index config file: flat pipeline keys plus optional
/// `[detector]` and `[vlm]` tables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IndexConfig {
    pub pipeline: PipelineConfig,
    pub detector: BackendSection,
    pub vlm: BackendSection,
}

impl IndexConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, Error> {
        let bad = |e: toml::de::Error| Error::Config(format!("config: {e}"));
        let mut table: toml::Table = toml::from_str(text).map_err(bad)?;
        let mut section = |name: &str| -> Result<BackendSection, Error> {
            match table.remove(name) {
                Some(v) => v.try_into().map_err(bad),
                None => Ok(BackendSection::default()),
            }
        };
        let detector = section("detector")?;
        let vlm = section("vlm")?;
        if detector.rate_per_sec.is_some() || detector.model.is_some() {
            return Err(Error::Config("config: [detector] takes no rate_per_sec or model".into()));
        }
        let pipeline: PipelineConfig = toml::Value::Table(table).try_into().map_err(bad)?;
        pipeline.validate()?;
        Ok(Self { pipeline, detector, vlm })
    }

    pub fn detector_config(&self, base_url: &str) -> Result<HttpDetectorConfig, Error> {
        let mut c = HttpDetectorConfig::new(base_url);
        let s = &self.detector;
        apply_common(s, &mut c.max_in_flight, &mut c.timeout, &mut c.retry)?;
        Ok(c)
    }

    pub fn vlm_config(&self, base_url: &str) -> Result<HttpVlmConfig, Error> {
        let mut c = HttpVlmConfig::new(base_url);
        let s = &self.vlm;
        apply_common(s, &mut c.max_in_flight, &mut c.timeout, &mut c.retry)?;
        if let Some(r) = s.rate_per_sec {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("config: rate_per_sec {r} must be >= 0")));
            }
            c.rate_per_sec = r;
        }
        if let Some(m) = &s.model {
            c.model = m.clone();
        }
        Ok(c)
    }
}

fn apply_common(
    s: &BackendSection,
    max_in_flight: &mut usize,
    timeout: &mut Duration,
    retry: &mut crate::transport::RetryPolicy,
) -> Result<(), Error> {
    if let Some(n) = s.max_in_flight {
        if n == 0 {
            return Err(Error::Config("config: max_in_flight must be positive".into()));
        }
        *max_in_flight = n;
    }
    if let Some(t) = s.timeout_secs {
        *timeout = Duration::try_from_secs_f64(t)
            .ok()
            .filter(|d| !d.is_zero())
            .ok_or_else(|| Error::Config(format!("config: timeout_secs {t} must be positive")))?;
    }
    if let Some(a) = s.retry_attempts {
        if a == 0 {
            return Err(Error::Config("config: retry_attempts must be at least 1".into()));
        }
        retry.attempts = a;
    }
    if let Some(ms) = s.retry_base_ms {
        retry.base_delay = Duration::from_millis(ms);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct IndexSummary {
    pub images: usize,
    pub failed: usize,
    pub vlm_calls: usize,
}

/// Indexes `images` in input order. Results already written stay written if
/// the run is cut short by a fatal backend error.
pub fn index_to_file(
    pipeline: &Pipeline,
    images: &[ImageRef],
    records: &Path,
    run_log: Option<&Path>,
) -> Result<IndexSummary, Error> {
    let mut writer = RecordWriter::open(records)?;
    let mut log = match run_log {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut summary = IndexSummary::default();
    let outcome = pipeline.run(images, |trace| -> Result<(), Error> {
        writer.append(&trace.result)?;
        if let Some(log) = log.as_mut() {
            for event in &trace.events {
                serde_json::to_writer(&mut *log, event).map_err(std::io::Error::other)?;
                log.write_all(b"\n")?;
            }
        }
        summary.images += 1;
        summary.failed += usize::from(trace.result.is_failed());
        summary.vlm_calls += trace.count(crate::pipeline::CallKind::Existence) + trace.count(crate::pipeline::CallKind::State);
        Ok(())
    });
    if let Some(mut log) = log {
        log.flush()?;
    }
    writer.sync()?;
    match outcome {
        Ok(()) => Ok(summary),
        Err(RunError::Pipeline(e)) => Err(e.into()),
        Err(RunError::Sink(e)) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::ScriptedDetector;
    use crate::ontology::{ComponentOntology, ComponentSpec};
    use crate::pipeline::PipelineConfig;
    use crate::store::{load_results, LoadMode};
    use crate::vlm::ScriptedVlm;

    #[test]
    fn config_file_sections() {
        let c = IndexConfig::from_toml_str(
            "tau_high = 0.7\nworker_count = 2\n[vlm]\nrate_per_sec = 5.0\nmodel = \"m\"\n[detector]\nretry_attempts = 5\n",
        )
        .unwrap();
        assert_eq!(c.pipeline.tau_high, 0.7);
        assert_eq!(c.vlm_config("http://x").unwrap().rate_per_sec, 5.0);
        assert_eq!(c.vlm_config("http://x").unwrap().model, "m");
        assert_eq!(c.detector_config("http://x").unwrap().retry.attempts, 5);
        assert_eq!(IndexConfig::from_toml_str("").unwrap(), IndexConfig::default());
        for bad in ["tau = 1", "tau_high = 2.0", "[vlm]\nspeed = 1", "[detector]\nmodel = \"m\"", "worker_count = 0"] {
            let err = IndexConfig::from_toml_str(bad).unwrap_err();
            assert_eq!(err.exit_code(), 1, "{bad}");
        }
    }

    #[test]
    fn writes_records_and_log() {
        let o = ComponentOntology::new(
            "t",
            vec![ComponentSpec::new("chepai", "License plate"), ComponentSpec::new("mask", "mask").zero_shot()],
        )
        .unwrap();
        let det = ScriptedDetector::new().with("a", "chepai", 0.9);
        let vlm = ScriptedVlm::new().with_default_reply("No");
        let p = Pipeline::new(o, PipelineConfig::default(), Box::new(det), Box::new(vlm)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("r.jsonl");
        let log = dir.path().join("log.jsonl");
        let images = vec![ImageRef::new("a", "a.jpg"), ImageRef::new("b", "b.jpg")];
        let s = index_to_file(&p, &images, &out, Some(&log)).unwrap();
        assert_eq!(s, IndexSummary { images: 2, failed: 0, vlm_calls: 3 });
        assert_eq!(load_results(&out, LoadMode::Strict).unwrap().results.len(), 2);
        let log = std::fs::read_to_string(&log).unwrap();
        assert!(log.lines().next().unwrap().contains("\"kind\":\"detect\""));
        assert_eq!(log.lines().filter(|l| l.contains("\"kind\":\"existence\"")).count(), 3);
    }
}
