//! PNG heatmaps of attention dumps.
//!
//! Rows are output steps, columns encoder frames. Weight 0 is white and the
//! largest weight in the matrix is black; the frame each row halted on is
//! outlined in red.

use std::path::{Path, PathBuf};

use dacs_core::matrix::Matrix;
use dacs_core::metrics::load_attention_dump;
use image::{Rgb, RgbImage};

use crate::error::{CliError, CliResult};

const HALT: Rgb<u8> = Rgb([220, 30, 30]);

/// `halts[i]` is the 1-based frame row `i` halted on; 0 draws no marker.
pub fn heatmap(weights: &Matrix, halts: &[usize], cell: u32) -> RgbImage {
    let (rows, cols) = weights.shape();
    let cell = cell.max(1);
    let peak = weights.data().iter().copied().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    let mut img = RgbImage::new((cols as u32 * cell).max(1), (rows as u32 * cell).max(1));
    for r in 0..rows {
        for c in 0..cols {
            let shade = 255 - (weights.get(r, c).clamp(0.0, f64::MAX) * scale * 255.0).round().min(255.0) as u8;
            let halt_cell = halts.get(r).is_some_and(|&h| h >= 1 && h - 1 == c);
            for dy in 0..cell {
                for dx in 0..cell {
                    let edge = dx == 0 || dy == 0 || dx == cell - 1 || dy == cell - 1;
                    let px = if halt_cell && edge && cell > 2 { HALT } else { Rgb([shade, shade, shade]) };
                    img.put_pixel(c as u32 * cell + dx, r as u32 * cell + dy, px);
                }
            }
        }
    }
    img
}

/// A dump directory itself, or the dump directories directly below it.
fn dump_dirs(path: &Path) -> CliResult<Vec<PathBuf>> {
    if path.join("manifest.json").is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = std::fs::read_dir(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let mut dirs: Vec<PathBuf> =
        entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.join("manifest.json").is_file()).collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Runtime(format!("{} holds no attention dump", path.display())));
    }
    Ok(dirs)
}

/// Renders every head of every dump under `inputs` into `out`, returning the
/// written paths.
pub fn render_dumps(inputs: &[PathBuf], out: &Path, cell: u32) -> CliResult<Vec<PathBuf>> {
    let mut written = Vec::new();
    for input in inputs {
        for dir in dump_dirs(input)? {
            let (manifest, matrices) = load_attention_dump(&dir)?;
            let stem = dir.file_name().map_or_else(|| "dump".to_string(), |s| s.to_string_lossy().into_owned());
            for (l, heads) in matrices.iter().enumerate() {
                for (h, m) in heads.iter().enumerate() {
                    let halts: Vec<usize> = manifest.halts.iter().map(|step| step[l][h]).collect();
                    let path = out.join(format!("{stem}_layer{l}_head{h}.png"));
                    heatmap(m, &halts, cell)
                        .save(&path)
                        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
                    written.push(path);
                }
            }
        }
    }
    Ok(written)
}
