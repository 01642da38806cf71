//! The N-shot, multi-run protocol.

use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::{generate_synthetic, Alignment, DataSpec, SyntheticDataset};
use crate::error::{config_err, Error, Result};
use crate::pipeline::{
    micro_config, parse_kv, parse_value, train, Predictor, TrainConfig, TrainedState, TRAIN_KEYS,
};
use crate::prompt::prompt_diversity;
use crate::rng;

pub const DEFAULT_RUNS: usize = 10;
const SALT_SHOTS: u64 = 3;
/// Test images scanned by the background/foreground attack statistic.
pub const MASK_STAT_IMAGES: usize = 100;

/// Everything one experiment needs, read from a single key-value file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub data: DataSpec,
    pub runs: usize,
    /// Match class colours to the frozen encoders (see [`Alignment`]).
    pub aligned: bool,
    /// Shot counts swept by `eval` and the ablation suites; empty means
    /// `data.shots` alone.
    pub shot_list: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: DataSpec::default(),
            runs: DEFAULT_RUNS,
            aligned: true,
            shot_list: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    /// Two classes of 8x8 images on the micro training config; a run takes
    /// milliseconds.
    pub fn micro() -> Self {
        let train = micro_config();
        Self {
            data: DataSpec {
                classes: 2,
                n_test_per_class: 6,
                pool_per_class: 10,
                image_size: train.image_size,
                channels: train.channels,
                glyph_size: 4,
                distractors: 1,
                ..DataSpec::default()
            },
            train,
            runs: 2,
            aligned: true,
            shot_list: Vec::new(),
        }
    }
}

/// The shot counts of the few-shot protocol.
pub const SHOT_PROTOCOL: [usize; 5] = [1, 2, 4, 8, 16];

/// Keys read into [`DataSpec`] or the run count; everything else goes to
/// the training config.
pub const EXPERIMENT_KEYS: &[&str] = &[
    "classes",
    "shots",
    "n_test_per_class",
    "pool_per_class",
    "glyph_size",
    "distractors",
    "noise",
    "gain",
    "data_seed",
    "runs",
    "aligned",
    "shot_list",
];

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.data;
        match key.trim() {
            "classes" => d.classes = parse_value(key, value)?,
            "shots" => d.shots = parse_value(key, value)?,
            "n_test_per_class" => d.n_test_per_class = parse_value(key, value)?,
            "pool_per_class" => d.pool_per_class = parse_value(key, value)?,
            "glyph_size" => d.glyph_size = parse_value(key, value)?,
            "distractors" => d.distractors = parse_value(key, value)?,
            "noise" => d.noise = parse_value(key, value)?,
            "gain" => d.gain = parse_value(key, value)?,
            "data_seed" => d.seed = parse_value(key, value)?,
            "runs" => self.runs = parse_value(key, value)?,
            "aligned" => self.aligned = parse_value(key, value)?,
            "shot_list" => {
                self.shot_list = value
                    .split(',')
                    .filter(|v| !v.trim().is_empty())
                    .map(|v| parse_value(key, v))
                    .collect::<Result<_>>()?
            }
            k if TRAIN_KEYS.contains(&k) => self.train.set(k, value)?,
            other => return config_err(format!("unknown configuration key `{other}`")),
        }
        // image geometry is shared by the data and the encoders
        self.data.image_size = self.train.image_size;
        self.data.channels = self.train.channels;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.validate()?;
        if self.runs == 0 {
            return config_err("at least one run is required");
        }
        for &shots in &self.shot_list {
            DataSpec {
                shots,
                ..self.data.clone()
            }
            .validate()?;
        }
        Ok(())
    }

    pub fn shot_settings(&self) -> Vec<usize> {
        if self.shot_list.is_empty() {
            vec![self.data.shots]
        } else {
            self.shot_list.clone()
        }
    }

    /// The data spec with the alignment target filled in when requested.
    pub fn data_spec(&self) -> DataSpec {
        let align_to = self.aligned.then(|| Alignment {
            encoder_seed: self.train.encoder_seed,
            dims: self.train.encoder_dims(self.data.classes),
        });
        DataSpec {
            align_to,
            ..self.data.clone()
        }
    }

    pub fn dataset(&self) -> Result<SyntheticDataset> {
        generate_synthetic(&self.data_spec())
    }

    pub fn to_kv(&self) -> String {
        let d = &self.data;
        let mut out = self.train.to_kv();
        for (k, v) in [
            ("classes", d.classes.to_string()),
            ("shots", d.shots.to_string()),
            ("n_test_per_class", d.n_test_per_class.to_string()),
            ("pool_per_class", d.pool_per_class.to_string()),
            ("glyph_size", d.glyph_size.to_string()),
            ("distractors", d.distractors.to_string()),
            ("noise", d.noise.to_string()),
            ("gain", d.gain.to_string()),
            ("data_seed", d.seed.to_string()),
            ("runs", self.runs.to_string()),
            ("aligned", self.aligned.to_string()),
            (
                "shot_list",
                self.shot_list
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
        ] {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Hex SHA-256 of the canonical key-value text.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv().as_bytes()))
    }
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-run measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub alignment_init: Option<f64>,
    pub alignment_final: Option<f64>,
    /// Per-group prompt feature means and their spread.
    pub diversity_means: Vec<f64>,
    pub diversity_std: f64,
    /// Mean attack kernel over background and foreground pixels.
    pub kernel_background: Option<f64>,
    pub kernel_foreground: Option<f64>,
    /// Mean training loss per epoch.
    pub loss_main: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub digest: String,
    pub runs: Vec<RunRecord>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    pub wall_clock_secs: f64,
}

impl ExperimentResult {
    pub fn accuracies(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.accuracy).collect()
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Seed of run `r`.
pub fn run_seed(seed: u64, run: usize) -> u64 {
    rng::derive(seed, run as u64)
}

/// Mean attack kernel over mask-labelled background and foreground pixels.
pub fn kernel_mask_means(
    state: &TrainedState,
    samples: &[crate::pipeline::Sample],
) -> Result<Option<(f64, f64)>> {
    if !state.config.sa || state.config.sa_position != 0 {
        return Ok(None);
    }
    let predictor = Predictor::new(state)?;
    let (mut bg, mut nb, mut fg, mut nf) = (0.0, 0usize, 0.0, 0usize);
    for s in samples {
        let (Some(mask), Some(m)) = (s.mask.as_ref(), predictor.attention(&s.image)?) else {
            continue;
        };
        for (&on, &a) in mask.iter().zip(m.data()) {
            let k = 1.0 - a * a;
            if on {
                fg += k;
                nf += 1;
            } else {
                bg += k;
                nb += 1;
            }
        }
    }
    if nb == 0 || nf == 0 {
        return Ok(None);
    }
    Ok(Some((bg / nb as f64, fg / nf as f64)))
}

/// Trains run `run` on a freshly drawn shot set and evaluates it.
pub fn run_once(
    cfg: &TrainConfig,
    data: &SyntheticDataset,
    shots: usize,
    run: usize,
) -> Result<(RunRecord, TrainedState)> {
    let seed = run_seed(cfg.seed, run);
    let mut shot_stream = rng::stream(rng::derive(seed, SALT_SHOTS));
    let train_set = data.sample_shots(shots, &mut shot_stream)?;
    let run_cfg = TrainConfig {
        seed,
        ..cfg.clone()
    };
    let state = train(&run_cfg, data.spec.classes, &train_set, &data.val)?;
    let accuracy = Predictor::new(&state)?.accuracy(&data.test)?;
    let diversity = prompt_diversity(&state.prompts, &state.encoders.text, &state.encoders.table)?;
    let n = data.test.len().min(MASK_STAT_IMAGES);
    let kernel = kernel_mask_means(&state, &data.test[..n])?;
    let record = RunRecord {
        run,
        seed,
        accuracy,
        alignment_init: state.alignment_init,
        alignment_final: state.alignment_final,
        diversity_means: diversity.group_means,
        diversity_std: diversity.std,
        kernel_background: kernel.map(|k| k.0),
        kernel_foreground: kernel.map(|k| k.1),
        loss_main: state.metrics.iter().map(|m| m.loss_main).collect(),
    };
    Ok((record, state))
}

/// Runs the protocol of `exp` on an already generated dataset.
pub fn run_experiment_on(
    exp: &ExperimentConfig,
    data: &SyntheticDataset,
) -> Result<ExperimentResult> {
    exp.validate()?;
    let start = Instant::now();
    let records = (0..exp.runs)
        .into_par_iter()
        .map(|r| {
            run_once(&exp.train, data, exp.data.shots, r)
                .map(|(rec, _)| rec)
                .map_err(|e| Error::Run {
                    run: r,
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let accs: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
    let (mean, std) = mean_std(&accs);
    Ok(ExperimentResult {
        digest: exp.digest(),
        runs: records,
        mean,
        std,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Generates the dataset described by `exp` and runs the protocol.
pub fn run_experiment(exp: &ExperimentConfig) -> Result<ExperimentResult> {
    exp.validate()?;
    run_experiment_on(exp, &exp.dataset()?)
}

/// One result per entry of [`ExperimentConfig::shot_settings`], sharing a
/// dataset.
pub fn shot_sweep(exp: &ExperimentConfig) -> Result<Vec<(usize, ExperimentResult)>> {
    exp.validate()?;
    let data = exp.dataset()?;
    exp.shot_settings()
        .into_iter()
        .map(|shots| {
            let cell = ExperimentConfig {
                data: DataSpec {
                    shots,
                    ..exp.data.clone()
                },
                ..exp.clone()
            };
            run_experiment_on(&cell, &data).map(|r| (shots, r))
        })
        .collect()
}
