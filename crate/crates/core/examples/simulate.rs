//! Sweep detector recall under a fixed VLM sensitivity and compare the
//! simulated fused recall with the closed form.

use detvlm::simbench::{expected_fused_recall, run_simulation, synthetic_ontology, ErrorModel};
use detvlm::PipelineConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ontology = synthetic_ontology(5);
    let config = PipelineConfig::default();
    println!("det_recall  detector_only  fused   expected  tol3sigma");
    for det_recall in [0.5, 0.7, 0.8305, 0.9, 1.0] {
        let model = ErrorModel {
            det_recall,
            vlm_sensitivity: 0.8,
            vlm_specificity: 0.95,
            det_fp_rate: 0.02,
            seed: 11,
            ..ErrorModel::default()
        };
        let r = run_simulation(&model, 4000, &ontology, &config)?;
        println!(
            "{det_recall:<10.4}  {:<13.4}  {:.4}  {:.4}    {:.4}",
            r.detector_recall,
            r.fused_recall,
            expected_fused_recall(det_recall, 0.8),
            r.tolerance_3sigma()
        );
    }
    Ok(())
}
