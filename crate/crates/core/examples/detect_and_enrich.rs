//! Run a detector over an image folder, write the detections file, then
//! join a metadata table onto the annotations by image id.

use camtrap_core::detect::{enrich, run_detection, JoinKey, MetadataTable, StubDetector};
use camtrap_core::split::metadata_attribute;
use camtrap_core::AnnotationSet;
use image::{Rgb, RgbImage};

fn main() -> camtrap_core::Result<()> {
    let dir = std::env::temp_dir().join("camtrap-detect-example");
    let images = dir.join("images");
    std::fs::create_dir_all(images.join("cam1")).map_err(|e| camtrap_core::Error::io(&images, e))?;
    for i in 0..4u8 {
        let img = RgbImage::from_fn(64, 48, |x, y| Rgb([i * 40, (x * 3) as u8, (y * 5) as u8]));
        let path = images.join("cam1").join(format!("IMG_{i:04}.png"));
        img.save(&path).map_err(|e| camtrap_core::Error::io(&path, std::io::Error::other(e)))?;
    }

    let detections_path = dir.join("detections.json");
    let run = run_detection(&images, &StubDetector::Hashed, 0.1, &detections_path)?;
    println!("{} images scanned, {} detections written", run.report.images_scanned, run.report.detections_written);
    for d in &run.detections {
        println!("  {} conf {:.3} bbox {:?}", d.bbox_id, d.confidence, <[f64; 4]>::from(d.bbox));
    }

    let csv = "image_id,camera,timestamp\n\
               cam1/IMG_0000,north-ridge,2021-01-14 06:12:00\n\
               cam1/IMG_0001,north-ridge,2021-04-02 21:40:00\n\
               cam1/IMG_0002,creek,2021-07-30 05:03:00\n";
    let table = MetadataTable::from_delimited(csv.as_bytes(), JoinKey::ImageId, b',')?;
    let mut annotations = AnnotationSet::default();
    let report = enrich(&run.detections, &table, JoinKey::ImageId, &mut annotations);
    println!("enrich: {report:?}");
    for d in &run.detections {
        if let Some(meta) = annotations.metadata.get(&d.bbox_id) {
            println!(
                "  {} camera {} season {}",
                d.bbox_id,
                meta["camera"],
                metadata_attribute(meta, "season").unwrap_or_default()
            );
        }
    }
    println!("files in {}", dir.display());
    Ok(())
}
