//! JSON checkpoints.
//!
//! Top-level fields, in order: `version`, `config`, `classes`, `shots`,
//! `prompts`, `adapters`, `bank`, `metrics`, `alignment_init`,
//! `alignment_final`. Encoder weights are not stored; they are rebuilt from
//! `config.encoder_seed`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochMetrics, TrainConfig, TrainedState};
use crate::align::VlpBank;
use crate::attack::AdapterGroup;
use crate::encoders::build_encoders;
use crate::error::{Error, Result};
use crate::prompt::PromptCollection;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: TrainConfig,
    classes: usize,
    shots: usize,
    prompts: PromptCollection,
    adapters: Vec<AdapterGroup>,
    bank: VlpBank,
    metrics: Vec<EpochMetrics>,
    alignment_init: Option<f64>,
    alignment_final: Option<f64>,
}

pub fn save_checkpoint(state: &TrainedState, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: state.config.clone(),
        classes: state.classes,
        shots: state.shots,
        prompts: state.prompts.clone(),
        adapters: state.adapters.clone(),
        bank: state.bank.clone(),
        metrics: state.metrics.clone(),
        alignment_init: state.alignment_init,
        alignment_final: state.alignment_final,
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &ck)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedState> {
    let ck: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Parse(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            ck.version
        )));
    }
    ck.config.validate()?;
    let encoders = build_encoders(ck.config.encoder_seed, &ck.config.encoder_dims(ck.classes))?;
    Ok(TrainedState {
        config: ck.config,
        classes: ck.classes,
        shots: ck.shots,
        prompts: ck.prompts,
        adapters: ck.adapters,
        bank: ck.bank,
        encoders,
        metrics: ck.metrics,
        alignment_init: ck.alignment_init,
        alignment_final: ck.alignment_final,
    })
}
