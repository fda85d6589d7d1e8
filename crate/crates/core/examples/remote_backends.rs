//! The HTTP clients against a throwaway in-process server that speaks both
//! the detector and the VLM wire formats.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::thread;

use detvlm::detector::{HttpDetector, HttpDetectorConfig};
use detvlm::vlm::{HttpVlm, HttpVlmConfig};
use detvlm::{ComponentOntology, ComponentSpec, ImageRef, Pipeline, PipelineConfig};

fn serve(listener: TcpListener) {
    for stream in listener.incoming().flatten() {
        let mut reader = BufReader::new(&stream);
        let mut line = String::new();
        let _ = reader.read_line(&mut line);
        let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
        let mut length = 0;
        loop {
            let mut h = String::new();
            if reader.read_line(&mut h).is_err() || h.trim().is_empty() {
                break;
            }
            if let Some(v) = h.to_ascii_lowercase().strip_prefix("content-length:") {
                length = v.trim().parse().unwrap_or(0);
            }
        }
        let mut body = vec![0; length];
        let _ = reader.read_exact(&mut body);
        let body = String::from_utf8_lossy(&body);
        let reply = if path == "/detect" {
            r#"{"proposals": [{"component": "chepai", "confidence": 0.88}]}"#.to_string()
        } else if body.contains("Sun visor") {
            r#"{"text": "Yes, it is lowered."}"#.to_string()
        } else {
            r#"{"text": "No."}"#.to_string()
        };
        let mut out = &stream;
        let _ = write!(
            out,
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
            reply.len()
        );
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let url = format!("http://{}", listener.local_addr()?);
    thread::spawn(move || serve(listener));

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("frame.png");
    image::RgbImage::from_pixel(64, 48, image::Rgb([40, 40, 40])).save(&path)?;

    let ontology = ComponentOntology::new(
        "remote",
        vec![
            ComponentSpec::new("chepai", "License plate"),
            ComponentSpec::new("cheding", "Roof"),
            ComponentSpec::new("sun_visor", "Sun visor").zero_shot().with_states(["raised", "lowered"]),
        ],
    )?;
    let pipeline = Pipeline::new(
        ontology,
        PipelineConfig::default(),
        Box::new(HttpDetector::new(HttpDetectorConfig::new(&url))),
        Box::new(HttpVlm::new(HttpVlmConfig::new(&url))),
    )?;
    let trace = pipeline.process_image(&ImageRef::new("frame", path.to_str().unwrap()))?;
    for r in &trace.result.records {
        println!("{:<10} exists={} state={:<8} conf={:.2} via {:?}", r.component, r.exists, r.state, r.confidence, r.source);
    }
    Ok(())
}
