//! Square crops around a detector box: shift, pad, and the shift-to-pad
//! fallback, then bilinear rescaling to the model input size.

use camtrap_core::config::{CropStrategy, ShiftFallback};
use camtrap_core::preprocess::{extract_crop, rescale, square_crop};
use camtrap_core::BBox;
use image::{Rgb, RgbImage};

fn rel(abs: [f64; 4], (w, h): (u32, u32)) -> BBox {
    let (w, h) = (f64::from(w), f64::from(h));
    BBox::new(abs[0] / w, abs[1] / h, abs[2] / w, abs[3] / h)
}

fn main() -> camtrap_core::Result<()> {
    let dims = (1000, 800);
    let cases = [
        ("interior box", [100.0, 100.0, 200.0, 100.0], dims, CropStrategy::Shift),
        ("near the right edge, shift", [900.0, 300.0, 80.0, 200.0], dims, CropStrategy::Shift),
        ("near the right edge, pad", [900.0, 300.0, 80.0, 200.0], dims, CropStrategy::Pad),
        ("square taller than the image", [50.0, 0.0, 400.0, 300.0], (500, 300), CropStrategy::Shift),
    ];
    for (name, abs, dims, strategy) in cases {
        let spec = square_crop(&rel(abs, dims), dims, strategy, ShiftFallback::Pad)?;
        println!(
            "{name:<30} side {:>3} at ({:>4}, {:>4}) {:?} pad {:?}{}",
            spec.side,
            spec.left,
            spec.top,
            spec.strategy,
            spec.pad,
            if spec.fell_back { " (fell back)" } else { "" }
        );
    }

    // Padded pixels come out black; the crop is then resized for the model.
    let img = RgbImage::from_pixel(1000, 800, Rgb([90, 140, 60]));
    let spec = square_crop(&rel([900.0, 300.0, 80.0, 200.0], (1000, 800)), (1000, 800), CropStrategy::Pad, ShiftFallback::Pad)?;
    let crop = extract_crop(&img, &spec);
    let small = rescale(&crop, 224)?;
    println!(
        "crop {}x{}, last column {:?}, rescaled to {}x{}",
        crop.width(),
        crop.height(),
        crop.get_pixel(crop.width() - 1, 0).0,
        small.width(),
        small.height()
    );
    Ok(())
}
