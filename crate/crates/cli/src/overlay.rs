//! Box overlays: ground truth and prediction outlines on each frame.

use std::collections::BTreeMap;

use log::warn;
use tsf_core::data_io::{save_image, write_atomic};
use tsf_core::{BBox, Image};

use crate::commands::{load_records, read_results, RunManifest, MANIFEST};
use crate::{CliError, OverlayArgs};

pub const GT_COLOR: [f32; 3] = [0.0, 255.0, 0.0];
pub const PRED_COLOR: [f32; 3] = [255.0, 0.0, 0.0];

/// Pixel rectangle covered by a box: corners rounded to the nearest pixel,
/// right/bottom edges exclusive.
pub fn pixel_rect(b: &BBox) -> (i64, i64, i64, i64) {
    let [x, y, w, h] = b.to_corner();
    let (x1, y1) = (x.round() as i64, y.round() as i64);
    let (x2, y2) = ((x + w).round() as i64 - 1, (y + h).round() as i64 - 1);
    (x1, y1, x2.max(x1), y2.max(y1))
}

/// One-pixel outline, clipped to the image.
pub fn draw_box(img: &mut Image, b: &BBox, color: [f32; 3]) {
    let (x1, y1, x2, y2) = pixel_rect(b);
    let (w, h) = (img.width as i64, img.height as i64);
    let mut put = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            for (c, v) in color.iter().enumerate() {
                img.set(c, y as usize, x as usize, *v);
            }
        }
    };
    for x in x1..=x2 {
        put(x, y1);
        put(x, y2);
    }
    for y in y1..=y2 {
        put(x1, y);
        put(x2, y);
    }
}

pub fn run(a: &OverlayArgs) -> Result<(), CliError> {
    let records = load_records(&a.data)?;
    let results = read_results(&a.results)?;
    let by_id: BTreeMap<&str, _> = results.iter().map(|r| (r.id.as_str(), r)).collect();
    let todo: Vec<_> = records
        .iter()
        .filter(|r| a.sequence.as_ref().is_none_or(|s| s == &r.id))
        .filter_map(|r| match by_id.get(r.id.as_str()) {
            Some(t) if !t.boxes.is_empty() => Some((r, *t)),
            _ => {
                warn!("no results for sequence {}", r.id);
                None
            }
        })
        .collect();
    if todo.is_empty() {
        warn!("nothing to overlay");
        return Ok(());
    }
    std::fs::create_dir_all(&a.out)?;
    let mut m = RunManifest::new("overlay", BTreeMap::from([("results", a.results.display().to_string())]))?;
    m.outputs = todo.iter().map(|(r, _)| format!("{}/", r.id)).chain(["legend.json".to_string()]).collect();
    m.write(&a.out)?;
    debug_assert!(a.out.join(MANIFEST).is_file());
    let legend = serde_json::json!({ "ground_truth": GT_COLOR, "prediction": PRED_COLOR });
    write_atomic(&a.out.join("legend.json"), legend.to_string().as_bytes())?;
    for (rec, t) in todo {
        let dir = a.out.join(&rec.id);
        std::fs::create_dir_all(&dir)?;
        for (i, frame) in rec.frame_iter().enumerate() {
            let mut img = frame?;
            if img.channels == 1 {
                img = img.to_rgb();
            }
            if let Some(Some(g)) = rec.gt.get(i) {
                draw_box(&mut img, g, GT_COLOR);
            }
            if let Some(p) = t.boxes.get(i) {
                draw_box(&mut img, p, PRED_COLOR);
            }
            save_image(&img, &dir.join(format!("{:08}.png", i + 1)))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outline_lands_on_rounded_corners() {
        let mut img = Image::filled(20, 30, 3, 0.0);
        let b = BBox::from_corner(3.2, 4.6, 10.0, 6.0).unwrap();
        draw_box(&mut img, &b, PRED_COLOR);
        // x 3..=12, y 5..=10
        assert_eq!(img.get(0, 5, 3), 255.0);
        assert_eq!(img.get(0, 10, 12), 255.0);
        assert_eq!(img.get(1, 5, 3), 0.0);
        assert_eq!(img.get(0, 7, 7), 0.0);
        assert_eq!(img.get(0, 4, 3), 0.0);
        assert_eq!(img.get(0, 5, 13), 0.0);
    }

    #[test]
    fn outline_is_clipped() {
        let mut img = Image::filled(10, 10, 3, 0.0);
        draw_box(&mut img, &BBox::from_corner(-5.0, -5.0, 30.0, 30.0).unwrap(), GT_COLOR);
        assert!(img.data.iter().all(|&v| v == 0.0));
    }
}
