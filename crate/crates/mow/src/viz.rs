//! PNG strips of real / reconstructed / imagined frames.

use std::path::Path;

use image::{ImageBuffer, Rgb};
use mow_core::numcore::Tensor;

use crate::error::Result;

/// Write rows of `[3, h, w]` frames as one PNG: frames run horizontally,
/// rows stack vertically, with 1px separators, scaled up `scale`x.
pub fn save_strip(path: &Path, rows: &[Vec<Tensor>], scale: usize) -> Result<()> {
    assert!(!rows.is_empty() && !rows[0].is_empty());
    let h = rows[0][0].dim(1);
    let w = rows[0][0].dim(2);
    let cols = rows.iter().map(Vec::len).max().unwrap();
    let sep = 1;
    let out_w = (cols * (w + sep) + sep) * scale;
    let out_h = (rows.len() * (h + sep) + sep) * scale;
    let mut img = ImageBuffer::from_pixel(out_w as u32, out_h as u32, Rgb([40u8, 40, 40]));
    for (ri, row) in rows.iter().enumerate() {
        for (ci, frame) in row.iter().enumerate() {
            assert_eq!(frame.shape(), &[3, h, w], "frame shape");
            let x0 = (ci * (w + sep) + sep) * scale;
            let y0 = (ri * (h + sep) + sep) * scale;
            for y in 0..h {
                for x in 0..w {
                    let px = Rgb([
                        to_u8(frame.data()[y * w + x]),
                        to_u8(frame.data()[h * w + y * w + x]),
                        to_u8(frame.data()[2 * h * w + y * w + x]),
                    ]);
                    for dy in 0..scale {
                        for dx in 0..scale {
                            img.put_pixel((x0 + x * scale + dx) as u32, (y0 + y * scale + dy) as u32, px);
                        }
                    }
                }
            }
        }
    }
    img.save(path)
        .map_err(|e| crate::error::Error::Invalid(format!("png save: {e}")))?;
    Ok(())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
