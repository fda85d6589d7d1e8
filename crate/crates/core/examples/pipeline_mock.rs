//! One image through the full pipeline with scripted backends, printing the
//! call log and the fused records.

use detvlm::pipeline::CallKind;
use detvlm::{ComponentOntology, ComponentSpec, ImageRef, Pipeline, PipelineConfig, ScriptedDetector, ScriptedVlm};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ontology = ComponentOntology::new(
        "demo",
        vec![
            ComponentSpec::new("chepai", "License plate"),
            ComponentSpec::new("cheding", "Roof"),
            ComponentSpec::new("sun_visor", "Sun visor")
                .zero_shot()
                .with_states(["raised", "lowered"])
                .with_spatial_hint("top-left corner"),
        ],
    )?;
    let detector = ScriptedDetector::new()
        .with("cam1", "chepai", 0.97)
        .with("cam1", "cheding", 0.35);
    let vlm = ScriptedVlm::new()
        .rule("cam1", "Is there a Roof", "No, the roof is out of frame.")
        .rule("cam1", "Focus on the top-left corner", "Yes")
        .rule("cam1", "Is there a Sun visor", "It is unclear")
        .rule("cam1", "state of the Sun visor", "It is lowered.");
    let pipeline = Pipeline::new(ontology, PipelineConfig::default(), Box::new(detector), Box::new(vlm))?;

    let trace = pipeline.process_image(&ImageRef::new("cam1", "cam1.jpg"))?;
    for e in &trace.events {
        println!(
            "{:?} {} {:?} -> {:?}",
            e.kind,
            e.component.as_deref().unwrap_or("-"),
            e.prompt.as_deref().unwrap_or(""),
            e.reply.as_deref().unwrap_or("")
        );
    }
    println!("existence calls: {}", trace.count(CallKind::Existence));
    println!("{}", serde_json::to_string_pretty(&trace.result)?);
    Ok(())
}
