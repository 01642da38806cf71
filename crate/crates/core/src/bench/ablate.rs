//! Ablation suites. Each suite is a fixed list of named variants of the base
//! training config; every variant runs the full protocol at each shot
//! setting on one shared dataset.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use super::data::DataSpec;
use super::experiment::{mean_std, run_experiment_on, ExperimentConfig, ExperimentResult};
use crate::attack::InferenceMode;
use crate::error::{config_err, Error, Result};
use crate::pipeline::{ranked_plan, LossKind, PrototypeSource, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    SaCmda,
    LossKind,
    AugCount,
    SigmaSweep,
    AlphaSweep,
    SaPosition,
    PrototypeSource,
    PromptDiversity,
    InferenceMode,
}

impl Suite {
    pub const ALL: [Suite; 9] = [
        Suite::SaCmda,
        Suite::LossKind,
        Suite::AugCount,
        Suite::SigmaSweep,
        Suite::AlphaSweep,
        Suite::SaPosition,
        Suite::PrototypeSource,
        Suite::PromptDiversity,
        Suite::InferenceMode,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::SaCmda => "sa_cmda",
            Suite::LossKind => "loss_kind",
            Suite::AugCount => "aug_count",
            Suite::SigmaSweep => "sigma_sweep",
            Suite::AlphaSweep => "alpha_sweep",
            Suite::SaPosition => "sa_position",
            Suite::PrototypeSource => "prototype_source",
            Suite::PromptDiversity => "prompt_diversity",
            Suite::InferenceMode => "inference_mode",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .map_or_else(|| config_err(format!("unknown ablation suite `{s}`")), Ok)
    }
}

pub const SIGMA_GRID: [f64; 10] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
pub const ALPHA_GRID: [f64; 6] = [0.0, 0.05, 0.1, 0.2, 0.3, 0.5];
pub const GROUP_COUNTS: [usize; 4] = [1, 2, 4, 7];

/// A named variant of the base config.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub variant: String,
    pub config: TrainConfig,
}

fn cell(
    variant: impl Into<String>,
    base: &TrainConfig,
    edit: impl FnOnce(&mut TrainConfig),
) -> Cell {
    let mut config = base.clone();
    edit(&mut config);
    Cell {
        variant: variant.into(),
        config,
    }
}

/// The variants of `suite`, in output order.
pub fn suite_cells(suite: Suite, base: &TrainConfig) -> Result<Vec<Cell>> {
    let cells = match suite {
        Suite::SaCmda => [
            ("baseline", false, false),
            ("sa", true, false),
            ("cmda", false, true),
            ("full", true, true),
        ]
        .into_iter()
        .map(|(name, sa, cmda)| {
            cell(name, base, |c| {
                c.sa = sa;
                c.cmda = cmda;
            })
        })
        .collect(),
        Suite::LossKind => [LossKind::Emd, LossKind::Mmd, LossKind::Js]
            .into_iter()
            .map(|k| cell(k.to_string(), base, |c| c.loss_kind = k))
            .collect(),
        Suite::AugCount => GROUP_COUNTS
            .into_iter()
            .map(|j| {
                Ok(cell(format!("groups_{j}"), base, |c| {
                    c.plan = ranked_plan(j).expect("ranked count")
                }))
            })
            .collect::<Result<_>>()?,
        Suite::SigmaSweep => SIGMA_GRID
            .into_iter()
            .map(|s| {
                cell(format!("sigma_{s:.1}"), base, |c| {
                    c.sa = true;
                    c.sigma = s;
                })
            })
            .collect(),
        Suite::AlphaSweep => ALPHA_GRID
            .into_iter()
            .map(|a| cell(format!("alpha_{a:.2}"), base, |c| c.alpha = a))
            .collect(),
        Suite::SaPosition => (0..=base.blocks)
            .map(|p| {
                cell(format!("position_{p}"), base, |c| {
                    c.sa = true;
                    c.sa_position = p;
                })
            })
            .collect(),
        Suite::PrototypeSource => vec![
            cell("baseline", base, |c| {
                c.sa = false;
                c.cmda = false;
            }),
            cell("vlp", base, |c| {
                c.sa = false;
                c.cmda = true;
                c.prototype_source = PrototypeSource::Vlp;
            }),
            cell("lp", base, |c| {
                c.sa = false;
                c.cmda = true;
                c.prototype_source = PrototypeSource::Lp;
            }),
        ],
        Suite::PromptDiversity => vec![
            cell("sada_wo_aug", base, |c| c.use_augment = false),
            cell("sada", base, |c| c.use_augment = true),
        ],
        Suite::InferenceMode => [InferenceMode::Modulate, InferenceMode::Passthrough]
            .into_iter()
            .map(|m| {
                cell(m.to_string(), base, |c| {
                    c.sa = true;
                    c.inference_mode = m;
                })
            })
            .collect(),
    };
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub suite: Suite,
    pub variant: String,
    pub shots: usize,
    pub result: ExperimentResult,
}

/// Runs every cell of `suite` at every shot setting of `exp`.
pub fn ablate(suite: Suite, exp: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    exp.validate()?;
    let data = exp.dataset()?;
    let mut rows = Vec::new();
    for c in suite_cells(suite, &exp.train)? {
        c.config.validate()?;
        for shots in exp.shot_settings() {
            let cell_exp = ExperimentConfig {
                train: c.config.clone(),
                data: DataSpec {
                    shots,
                    ..exp.data.clone()
                },
                ..exp.clone()
            };
            rows.push(AblationRow {
                suite,
                variant: c.variant.clone(),
                shots,
                result: run_experiment_on(&cell_exp, &data)?,
            });
        }
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| mean_std(&v).0)
}

pub const ABLATION_CSV_HEADER: &str =
    "suite,variant,shots,runs,mean_acc,std_acc,mean_alignment_init,\
mean_alignment_final,mean_diversity_std,mean_kernel_background,mean_kernel_foreground,digest";

/// One row per cell; optional measurements are empty when they do not apply.
pub fn write_ablation_csv<W: Write>(out: &mut W, rows: &[AblationRow]) -> Result<()> {
    writeln!(out, "{ABLATION_CSV_HEADER}")?;
    for r in rows {
        let runs = &r.result.runs;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.suite,
            r.variant,
            r.shots,
            runs.len(),
            r.result.mean,
            r.result.std,
            opt(mean_of(runs.iter().map(|x| x.alignment_init))),
            opt(mean_of(runs.iter().map(|x| x.alignment_final))),
            mean_std(&runs.iter().map(|x| x.diversity_std).collect::<Vec<_>>()).0,
            opt(mean_of(runs.iter().map(|x| x.kernel_background))),
            opt(mean_of(runs.iter().map(|x| x.kernel_foreground))),
            r.result.digest,
        )?;
    }
    Ok(())
}

pub const RUNS_CSV_HEADER: &str =
    "suite,variant,shots,run,seed,accuracy,alignment_init,alignment_final,\
diversity_std,kernel_background,kernel_foreground";

/// One row per run of every cell.
pub fn write_runs_csv<W: Write>(out: &mut W, rows: &[AblationRow]) -> Result<()> {
    writeln!(out, "{RUNS_CSV_HEADER}")?;
    for r in rows {
        for x in &r.result.runs {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.suite,
                r.variant,
                r.shots,
                x.run,
                x.seed,
                x.accuracy,
                opt(x.alignment_init),
                opt(x.alignment_final),
                x.diversity_std,
                opt(x.kernel_background),
                opt(x.kernel_foreground),
            )?;
        }
    }
    Ok(())
}

/// Header of the prompt diversity table for `groups` groups.
pub fn diversity_header(groups: usize) -> String {
    let mut h = String::from("model,shots,run");
    for j in 1..=groups {
        h.push_str(&format!(",group_{j}"));
    }
    h.push_str(",std");
    h
}

/// Per-group prompt feature means and their std, one row per model and run.
pub fn write_diversity_csv<W: Write>(out: &mut W, rows: &[AblationRow]) -> Result<()> {
    let groups = rows
        .iter()
        .flat_map(|r| r.result.runs.iter())
        .map(|x| x.diversity_means.len())
        .max()
        .unwrap_or(0);
    writeln!(out, "{}", diversity_header(groups))?;
    for r in rows {
        for x in &r.result.runs {
            let means: Vec<String> = x.diversity_means.iter().map(|m| m.to_string()).collect();
            writeln!(
                out,
                "{},{},{},{},{}",
                r.variant,
                r.shots,
                x.run,
                means.join(","),
                x.diversity_std
            )?;
        }
    }
    Ok(())
}
