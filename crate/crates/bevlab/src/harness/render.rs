//! PPM rendering of ground truth and predictions.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scenegen::{CLASS_COLORS, GROUND_COLOR};
use crate::tensorcore::Tensor;

fn to_byte(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Composite a (d, w, classes) 0/1 mask stack into RGB by fixed priority:
/// crossing over divider over walkway over drivable over background.
pub fn composite(masks: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (d, w, classes) = masks.dims3()?;
    let mut rgb = Vec::with_capacity(d * w * 3);
    for v in 0..d {
        for u in 0..w {
            let mut color = GROUND_COLOR;
            // Ascending priority order; later classes overwrite.
            for c in 0..classes.min(CLASS_COLORS.len()) {
                if masks.at3(v, u, c) > 0.5 {
                    color = CLASS_COLORS[c];
                }
            }
            for ch in color {
                rgb.push(to_byte(ch));
            }
        }
    }
    Ok((d, w, rgb))
}

/// Ground truth and prediction side by side, separated by a black column.
pub fn side_by_side(gt: &Tensor, pred: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    if gt.shape() != pred.shape() {
        return Err(Error::Shape(format!(
            "render: ground truth {:?} vs prediction {:?}",
            gt.shape(),
            pred.shape()
        )));
    }
    let (d, w, left) = composite(gt)?;
    let (_, _, right) = composite(pred)?;
    let out_w = 2 * w + 1;
    let mut rgb = vec![0u8; d * out_w * 3];
    for v in 0..d {
        for u in 0..w {
            for ch in 0..3 {
                rgb[(v * out_w + u) * 3 + ch] = left[(v * w + u) * 3 + ch];
                rgb[(v * out_w + w + 1 + u) * 3 + ch] = right[(v * w + u) * 3 + ch];
            }
        }
    }
    Ok((d, out_w, rgb))
}

pub fn write_ppm(path: &Path, h: usize, w: usize, rgb: &[u8]) -> Result<()> {
    use std::io::Write;
    if rgb.len() != h * w * 3 {
        return Err(Error::Shape(format!(
            "ppm: {} bytes for {}x{} image",
            rgb.len(),
            w,
            h
        )));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{w} {h}\n255\n")?;
    f.write_all(rgb)?;
    Ok(())
}
