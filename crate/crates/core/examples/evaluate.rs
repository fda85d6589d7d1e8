//! Per-component metrics and macro averages, on a hand-sized matrix and on
//! the bundled baseline tables.

use detvlm::eval::{read_report_csv, report, ReportFormat};
use detvlm::{binary_metrics, macro_average, ConfusionMatrix};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let m = ConfusionMatrix::new(6, 2, 3, 88);
    let row = binary_metrics(&m)?;
    println!("tp=6 fp=2 fn=3 tn=88 -> {:?}", row.values());

    for (name, csv) in [
        ("YOLOv8n", include_str!("../data/baselines/yolov8n.csv")),
        ("YOLOv11n", include_str!("../data/baselines/yolov11n.csv")),
        ("YOLOv12n", include_str!("../data/baselines/yolov12n.csv")),
        ("detector + VLM", include_str!("../data/baselines/detvlm.csv")),
    ] {
        let parsed = read_report_csv(csv)?;
        let rows: Vec<_> = parsed.rows.iter().map(|r| r.metrics).collect();
        let mean = macro_average(&rows)?;
        println!("\n{name}: recomputed mean {:.4?}", mean.values());
        if let Some(published) = parsed.overall {
            println!("{name}: listed Overall  {:.4?}", published.values());
        }
        print!("{}", report(&parsed.rows, ReportFormat::Table));
    }
    Ok(())
}
