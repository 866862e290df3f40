//! Stratified train/test split: each camera keeps its share of held-out
//! boxes, and the same seed always gives the same partition.

use std::collections::BTreeMap;

use camtrap_core::data::{ClassScheme, DatasetManifest, ManifestEntry, Metadata, Provenance};
use camtrap_core::split::{held_out_counts, stratified_split};

fn main() -> camtrap_core::Result<()> {
    let cameras = [("cam-a", 37), ("cam-b", 12), ("cam-c", 5), ("cam-d", 1)];
    let mut entries = Vec::new();
    for (camera, n) in cameras {
        for i in 0..n {
            let mut metadata = Metadata::new();
            metadata.insert("camera".into(), camera.into());
            entries.push(ManifestEntry {
                bbox_id: format!("{camera}-{i:03}#0"),
                image_id: format!("{camera}-{i:03}"),
                crop_path: String::new(),
                label: if i % 3 == 0 { "male" } else { "female" }.into(),
                class_index: usize::from(i % 3 != 0),
                confidence: 0.98,
                split: None,
                metadata,
            });
        }
    }
    let manifest = DatasetManifest {
        scheme: ClassScheme::new("sex", &["male", "female"])?,
        entries,
        provenance: Provenance {
            config_fingerprint: String::new(),
            detections_file: String::new(),
            annotations_file: String::new(),
        },
    };

    let sizes: BTreeMap<String, usize> = cameras.iter().map(|(c, n)| (c.to_string(), *n)).collect();
    for fraction in [0.20, 0.15] {
        let (train, test) = stratified_split(&manifest, fraction, "camera", 7)?;
        println!("test fraction {fraction}: {} train / {} test", train.len(), test.len());
        for (camera, want) in held_out_counts(&sizes, fraction) {
            let got = test.iter().filter(|id| id.starts_with(&camera)).count();
            println!("  {camera}: {got} of {} held out (expected {want})", sizes[&camera]);
        }
        let again = stratified_split(&manifest, fraction, "camera", 7)?;
        assert_eq!(again, (train, test));
    }

    // Stratifying on the target class instead.
    let (_, test) = stratified_split(&manifest, 0.2, "sex", 7)?;
    println!("by sex: {} test boxes", test.len());
    Ok(())
}
