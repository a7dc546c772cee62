//! Attention map export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::decoder::DecodeOutput;
use crate::error::{shape_err, Result};
use crate::synth::write_pgm;
use crate::tensor::Tensor;

pub const CENTERS_FILE: &str = "centers.csv";

/// Scale a map so its maximum becomes 1 (all-zero maps stay zero).
pub fn heatmap(map: &[f64], h: usize, w: usize) -> Result<Tensor> {
    let max = map.iter().copied().fold(0.0, f64::max);
    let data = map.iter().map(|&v| if max > 0.0 { v / max } else { 0.0 }).collect();
    Tensor::new(&[1, h, w], data)
}

/// `step,x,y,symbol` for every decoding step; the final EOS step has an empty symbol.
pub fn centers_csv(out: &DecodeOutput) -> String {
    let symbols: Vec<char> = out.text.chars().collect();
    let mut s = String::from("step,x,y,symbol\n");
    for (t, &(x, y)) in out.centers.iter().enumerate() {
        let sym = symbols.get(t).map(char::to_string).unwrap_or_default();
        let _ = writeln!(s, "{t},{x},{y},{sym}");
    }
    s
}

/// Write `step_XX.pgm` for each decoded step plus the centers CSV.
pub fn export_attention(out: &DecodeOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    let [steps, h, w] = out.maps.shape()[..] else {
        return Err(shape_err!("maps must be [steps,h,w], got {:?}", out.maps.shape()));
    };
    fs::create_dir_all(dir)?;
    let mut written = Vec::with_capacity(steps + 1);
    for (t, map) in out.maps.data().chunks(h * w).enumerate() {
        let path = dir.join(format!("step_{t:02}.pgm"));
        write_pgm(&path, &heatmap(map, h, w)?)?;
        written.push(path);
    }
    let csv = dir.join(CENTERS_FILE);
    fs::write(&csv, centers_csv(out))?;
    written.push(csv);
    Ok(written)
}
