//! Binary PGM/PPM writers for side-by-side image grids.

use std::io::Write;
use std::path::Path;

use sae_core::tensor::Tensor;

use crate::CliError;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Stack image batches as rows of a grid (each batch contributes one row
/// of `n` images, no gaps) and write PGM (1 channel) or PPM (3 channels).
/// Returns the chosen file extension.
pub fn write_image_grid(
    path: &Path,
    rows: &[&Tensor<f32>],
) -> std::result::Result<(), CliError> {
    let first = rows
        .first()
        .ok_or_else(|| CliError::Internal("image grid needs at least one row".into()))?;
    let (n, h, w, c) = (
        first.shape()[0],
        first.shape()[1],
        first.shape()[2],
        first.shape()[3],
    );
    for row in rows {
        if row.shape() != first.shape() {
            return Err(CliError::Internal(format!(
                "grid rows disagree on shape: {:?} vs {:?}",
                row.shape(),
                first.shape()
            )));
        }
    }
    if c != 1 && c != 3 {
        return Err(CliError::Internal(format!(
            "grids support 1 or 3 channels, got {c}"
        )));
    }

    let grid_w = n * w;
    let grid_h = rows.len() * h;
    let mut bytes = Vec::with_capacity(grid_w * grid_h * c + 32);
    let magic = if c == 1 { "P5" } else { "P6" };
    write!(&mut bytes, "{magic}\n{grid_w} {grid_h}\n255\n").expect("vec write");
    for row in rows {
        let data = row.data();
        for y in 0..h {
            for col in 0..n {
                for x in 0..w {
                    for ch in 0..c {
                        let idx = ((col * h + y) * w + x) * c + ch;
                        bytes.push(quantize(data[idx]));
                    }
                }
            }
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}
