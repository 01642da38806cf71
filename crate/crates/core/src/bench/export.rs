//! Artifacts of a trained state for external plotting.
//!
//! Files written to the output directory:
//!
//! - `attention_<i>.pgm`: kernelized attack map `1 - M*M` of test image `i`
//! - `attention.csv`: `image,label,y,x,kernel,foreground`, `h * w` rows per
//!   image
//! - `kernel_stats.csv`: mean kernel over background and foreground pixels
//! - `features.csv`: `label,f_0..f_{D-1}` per test image
//! - `text_features.csv`: `class,f_0..f_{D-1}` per class
//! - `stats.csv`: per-class vision and language stats, skipped without a bank

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::data::SyntheticDataset;
use super::experiment::kernel_mask_means;
use crate::align::write_stats_csv;
use crate::attack::kernelize;
use crate::autodiff::Tensor;
use crate::error::Result;
use crate::pipeline::{class_stats, Predictor, TrainedState};

/// Test images whose attention maps are written.
pub const EXPORT_IMAGES: usize = 16;

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Binary graymap of values in [0, 1].
pub fn write_pgm<W: Write>(out: &mut W, map: &Tensor) -> Result<()> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = map
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)?;
    Ok(())
}

fn feature_header(first: &str, dim: usize) -> String {
    let cols: Vec<String> = (0..dim).map(|i| format!("f_{i}")).collect();
    format!("{first},{}", cols.join(","))
}

fn feature_row(key: usize, f: &Tensor) -> String {
    let vals: Vec<String> = f.data().iter().map(|v| v.to_string()).collect();
    format!("{key},{}", vals.join(","))
}

/// Writes every artifact and returns the paths created.
pub fn export_artifacts(
    state: &TrainedState,
    data: &SyntheticDataset,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let predictor = Predictor::new(state)?;
    let mut written = Vec::new();

    let shown = &data.test[..data.test.len().min(EXPORT_IMAGES)];
    let mut maps = Vec::new();
    for s in shown {
        match predictor.attention(&s.image)? {
            Some(m) => maps.push(kernelize(&m)),
            None => break,
        }
    }
    if !maps.is_empty() {
        let mut csv = create(dir, "attention.csv")?;
        writeln!(csv, "image,label,y,x,kernel,foreground")?;
        for (i, (s, k)) in shown.iter().zip(&maps).enumerate() {
            let name = format!("attention_{i}.pgm");
            let mut pgm = create(dir, &name)?;
            write_pgm(&mut pgm, k)?;
            pgm.flush()?;
            written.push(dir.join(name));
            let (h, w) = (k.shape()[0], k.shape()[1]);
            // masks only line up with maps taken on the raw image
            let mask = s.mask.as_ref().filter(|m| m.len() == h * w);
            for y in 0..h {
                for x in 0..w {
                    let fg = mask
                        .map(|m| (m[y * w + x] as u8).to_string())
                        .unwrap_or_default();
                    writeln!(csv, "{i},{},{y},{x},{},{fg}", s.label, k.data()[y * w + x])?;
                }
            }
        }
        csv.flush()?;
        written.push(dir.join("attention.csv"));
    }

    if let Some((bg, fg)) = kernel_mask_means(state, &data.test)? {
        let mut csv = create(dir, "kernel_stats.csv")?;
        writeln!(csv, "images,background_mean,foreground_mean")?;
        writeln!(csv, "{},{bg},{fg}", data.test.len())?;
        csv.flush()?;
        written.push(dir.join("kernel_stats.csv"));
    }

    let dim = state.config.feature_dim;
    let mut csv = create(dir, "features.csv")?;
    writeln!(csv, "{}", feature_header("label", dim))?;
    for s in &data.test {
        writeln!(
            csv,
            "{}",
            feature_row(s.label, &predictor.image_feature(&s.image)?)
        )?;
    }
    csv.flush()?;
    written.push(dir.join("features.csv"));

    let mut csv = create(dir, "text_features.csv")?;
    writeln!(csv, "{}", feature_header("class", dim))?;
    for (k, w) in predictor.text_features().iter().enumerate() {
        writeln!(csv, "{}", feature_row(k, w))?;
    }
    csv.flush()?;
    written.push(dir.join("text_features.csv"));

    if state.bank.is_initialized() {
        let mut csv = create(dir, "stats.csv")?;
        write_stats_csv(&mut csv, &class_stats(state)?)?;
        csv.flush()?;
        written.push(dir.join("stats.csv"));
    }
    Ok(written)
}
