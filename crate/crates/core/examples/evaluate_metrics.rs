//! Uncertainty-aware evaluation: threshold predictions, compute weighted
//! metrics, break them down by season, and apply the unknown-label quality
//! adjustment to a class distribution.

use std::collections::BTreeMap;

use camtrap_core::data::{ClassScheme, Metadata};
use camtrap_core::eval::{evaluate_records, stratified_metrics, unknown_quality_adjustment, PredictionRecord};

fn main() -> camtrap_core::Result<()> {
    let scheme = ClassScheme::new("age", &["adult", "juvenile", "yearling"])?;
    let rows = [
        ("adult", "adult", 0.97, "2021-07-03"),
        ("adult", "adult", 0.88, "2021-01-12"),
        ("adult", "yearling", 0.51, "2021-07-21"),
        ("juvenile", "juvenile", 0.93, "2021-08-02"),
        ("juvenile", "adult", 0.62, "2021-12-30"),
        ("yearling", "yearling", 0.99, "2021-04-11"),
        ("yearling", "yearling", 0.74, "2021-05-19"),
        ("adult", "adult", 0.91, "2021-10-05"),
    ];
    let mut records: Vec<PredictionRecord> = rows
        .iter()
        .enumerate()
        .map(|(i, (t, p, c, date))| {
            let mut metadata = Metadata::new();
            metadata.insert("timestamp".into(), date.to_string());
            PredictionRecord {
                bbox_id: format!("img{i}#0"),
                crop_path: String::new(),
                true_label: t.to_string(),
                predicted_label: p.to_string(),
                confidence: *c,
                certain: true,
                run_id: "run-001".into(),
                metadata,
            }
        })
        .collect();

    for ut in [0.0, 0.7, 0.9] {
        let m = evaluate_records(&mut records, &scheme, ut, true)?;
        println!(
            "ut {ut:.1}: {} certain, {} excluded, accuracy {:.3}, precision {:.3}, recall {:.3}, f1 {:.3}",
            m.n_certain, m.n_uncertain, m.accuracy, m.precision, m.recall, m.f1
        );
    }

    for (season, m) in stratified_metrics(&records, "season", &scheme)? {
        println!("  {season:<7} n={} accuracy {:.3}", m.confusion.iter().flatten().sum::<u64>(), m.accuracy);
    }

    let counts: BTreeMap<String, u64> = [("adult", 2946), ("juvenile", 517), ("yearling", 420), ("unknown", 84)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    let adjusted = unknown_quality_adjustment(&counts, "unknown", 0.82)?;
    println!("removed {} poor-quality unknowns", adjusted.removed);
    for (label, pct) in &adjusted.percentages {
        println!("  {label:<9} {:>5} {pct:>6.2}%", adjusted.counts[label]);
    }
    Ok(())
}
