//! Split detector proposals into confirmed hits and a VLM verification queue.

use detvlm::detector::best_per_component;
use detvlm::{stratify, ComponentOntology, ComponentSpec, DetectionProposal};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ontology = ComponentOntology::new(
        "demo",
        vec![
            ComponentSpec::new("chepai", "License plate"),
            ComponentSpec::new("chebiao", "Car logo"),
            ComponentSpec::new("cheding", "Roof"),
            ComponentSpec::new("mask", "driver wearing a mask").zero_shot(),
        ],
    )?;
    let proposals = [
        DetectionProposal::new("chepai", 0.41),
        DetectionProposal::new("chepai", 0.93),
        DetectionProposal::new("chebiao", 0.6),
        DetectionProposal::new("mask", 0.99),
    ];
    let best = best_per_component(&proposals);
    for tau in [0.3, 0.6, 0.95] {
        let s = stratify(&best, &ontology, tau)?;
        println!("tau_high={tau:.2}");
        for (c, conf) in &s.confirmed {
            println!("  confirmed {c} ({conf:.2})");
        }
        // Equal to tau is not enough; zero-shot components are always queued.
        println!("  verify    {}", s.verify.join(", "));
    }
    Ok(())
}
