//! Index the bundled sample manifest into a records file, then query it.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use detvlm::index::{index_to_file, IndexConfig};
use detvlm::ontology::{load_manifest, load_ontology};
use detvlm::query::evaluate_query;
use detvlm::store::{load_results, LoadMode};
use detvlm::{parse_query, Pipeline, ScriptedDetector, ScriptedVlm};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    let open = |name: &str| File::open(data.join(name)).map(BufReader::new);

    let ontology = load_ontology(open("vehicle_ontology.json")?)?;
    let images = load_manifest(open("manifest.jsonl")?)?;
    let config = IndexConfig::from_toml_str(&std::fs::read_to_string(data.join("index.toml"))?)?;
    let pipeline = Pipeline::new(
        ontology.clone(),
        config.pipeline,
        Box::new(ScriptedDetector::from_jsonl(open("detector_mock.jsonl")?)?),
        Box::new(ScriptedVlm::from_jsonl(open("vlm_mock.jsonl")?)?),
    )?;

    let dir = tempfile::tempdir()?;
    let records = dir.path().join("records.jsonl");
    let summary = index_to_file(&pipeline, &images, &records, None)?;
    println!("indexed {} images with {} VLM calls", summary.images, summary.vlm_calls);

    let loaded = load_results(&records, LoadMode::Strict)?;
    for q in [
        "exists(mask)",
        "state(sun_visor)=lowered && !exists(cheqianzawu)",
        "conf(chepai)>=0.95",
    ] {
        let spec = parse_query(q)?;
        let hits = evaluate_query(&spec, &ontology, &loaded.results)?;
        println!("{q:<50} {hits:?}");
    }
    Ok(())
}
