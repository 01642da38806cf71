//! Training and inference.
//!
//! One optimization step draws the augmented views and attack noise for an
//! image batch ([`prepare_batch`]), records the classification loss and,
//! once the bank exists, the alignment loss on a fresh tape, then applies
//! plain SGD. Epoch 1 is a warmup without calibration; its features seed the
//! prototype bank.

mod checkpoint;
mod checks;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use checks::{
    end_to_end_grad_check, micro_config, micro_instance, micro_set, routing_check, RoutingReport,
    END_TO_END_EPS, END_TO_END_TOLERANCE,
};
pub(crate) use config::parse_value;
pub use config::{
    parse_kv, ranked_plan, LossKind, PrototypeSource, TrainConfig, AUGMENT_RANKING, TRAIN_KEYS,
};

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{
    self, calibrate_on, class_prototype_on, emd_upper_bound, emd_upper_bound_on, estimate_stats,
    estimate_stats_on, js_divergence_on, median_bandwidth, mmd_on, stack_rows, FeatureSet,
    MmdEstimator, StatsVars, VlpBank,
};
use crate::attack::{self, average_adapters, AdapterGroup};
use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::encoders::{build_encoders, Encoders};
use crate::error::{config_err, Error, Result};
use crate::prompt::{language_prototypes, PromptCollection, PromptGraph};
use crate::rng::{self, Stream};

/// A labelled image, optionally with its foreground mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    /// `h * w` flags, true on foreground pixels.
    pub mask: Option<Vec<bool>>,
}

const SALT_INIT: u64 = 1;
const SALT_STEPS: u64 = 2;

/// `lr0 * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if step >= total_steps {
        return config_err(format!("step {step} outside a schedule of {total_steps}"));
    }
    Ok(lr0 * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_main: f64,
    pub loss_align: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

pub const METRICS_CSV_HEADER: &str = "epoch,loss_main,loss_align,train_acc,val_acc";

pub fn write_metrics_csv<W: Write>(out: &mut W, metrics: &[EpochMetrics]) -> Result<()> {
    writeln!(out, "{METRICS_CSV_HEADER}")?;
    for m in metrics {
        let val = m.val_acc.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{val}",
            m.epoch, m.loss_main, m.loss_align, m.train_acc
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedState {
    pub config: TrainConfig,
    pub classes: usize,
    pub shots: usize,
    pub prompts: PromptCollection,
    pub adapters: Vec<AdapterGroup>,
    pub bank: VlpBank,
    pub encoders: Encoders,
    pub metrics: Vec<EpochMetrics>,
    /// Total alignment bound when the bank was initialized, and after the
    /// last epoch.
    pub alignment_init: Option<f64>,
    pub alignment_final: Option<f64>,
}

/// One augmented view of one training image.
#[derive(Clone, Debug)]
pub struct PreparedView {
    pub label: usize,
    pub shot: usize,
    pub group: usize,
    pub image: Tensor,
    /// Attack noise at the attack position; absent without the attack.
    pub delta: Option<Tensor>,
}

/// Everything random about one step, drawn up front.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub views: Vec<PreparedView>,
    /// Sorted prompt indices used for each group this step.
    pub prompt_subsets: Vec<Vec<usize>>,
}

/// Draws views, noise and prompt subsets for `items` (sample, shot index).
pub fn prepare_batch(
    cfg: &TrainConfig,
    encoders: &Encoders,
    items: &[(&Sample, usize)],
    stream: &mut Stream,
) -> Result<PreparedBatch> {
    let [ah, aw, _] = encoders.image.shape_at(cfg.sa_position);
    let mut views = Vec::with_capacity(items.len() * cfg.groups());
    for &(sample, shot) in items {
        for (j, op) in cfg.plan.ops().iter().enumerate() {
            let image = if cfg.use_augment {
                op.apply(&sample.image, stream)?
            } else {
                sample.image.clone()
            };
            let delta = if cfg.sa {
                Some(attack::draw_noise(ah, aw, cfg.sigma, stream)?)
            } else {
                None
            };
            views.push(PreparedView {
                label: sample.label,
                shot,
                group: j,
                image,
                delta,
            });
        }
    }
    let prompt_subsets = (0..cfg.groups())
        .map(|_| {
            let mut ls = index::sample(stream, cfg.prompts_per_group, cfg.prompt_batch).into_vec();
            ls.sort_unstable();
            ls
        })
        .collect();
    Ok(PreparedBatch {
        views,
        prompt_subsets,
    })
}

/// Tape handles of the trainable parameters.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub prompts: Var,
    pub adapters: Vec<(Var, Var)>,
    pub bank: Option<Var>,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, state: &TrainedState, with_bank: bool) -> Result<Self> {
        let prompts = tape.param(state.prompts.tensor.clone());
        let adapters = state.adapters.iter().map(|a| a.register(tape)).collect();
        let bank = if with_bank {
            Some(state.bank.register(tape)?)
        } else {
            None
        };
        Ok(Self {
            prompts,
            adapters,
            bank,
        })
    }
}

/// Calibration target for the classification loss.
pub enum Calibration<'a> {
    /// Features are used raw.
    Off,
    /// Class prototypes from the registered bank.
    Bank,
    /// Fixed per-class targets.
    Fixed(&'a [Tensor]),
}

pub struct MainTerms {
    pub loss: Var,
    /// Image feature of each view, in batch order.
    pub features: Vec<Var>,
    pub correct: usize,
}

/// Image feature of one view, attacked at the configured position.
fn view_feature(
    tape: &mut Tape,
    state: &TrainedState,
    params: &ParamVars,
    view: &PreparedView,
) -> Result<Var> {
    let enc = &state.encoders.image;
    let pos = state.config.sa_position;
    let x = tape.constant(view.image.clone());
    let Some(delta) = &view.delta else {
        return enc.encode_on(tape, x);
    };
    let h = enc.forward_blocks(tape, x, 0..pos)?;
    let (w7, w3) = params.adapters[view.group];
    let m = attack::spatial_attention_on(tape, w7, w3, h)?;
    let h = attack::attack_with_noise_on(tape, h, m, delta)?;
    enc.encode_from(tape, h, pos)
}

/// Mean cross-entropy over the views of `batch` (or only `only_views`).
pub fn loss_main_on(
    tape: &mut Tape,
    state: &TrainedState,
    params: &ParamVars,
    batch: &PreparedBatch,
    calibration: Calibration<'_>,
    only_views: Option<&[usize]>,
) -> Result<MainTerms> {
    let cfg = &state.config;
    let mut graph =
        PromptGraph::attach(tape, params.prompts, &state.prompts, &state.encoders.table)?;
    let mut text: Vec<Option<Vec<Var>>> = vec![None; cfg.groups()];
    let mut prototypes: Vec<Option<Var>> = vec![None; state.classes];
    let mut losses = Vec::new();
    let mut features = Vec::new();
    let mut correct = 0;
    for (vi, view) in batch.views.iter().enumerate() {
        if only_views.is_some_and(|o| !o.contains(&vi)) {
            continue;
        }
        let z = view_feature(tape, state, params, view)?;
        features.push(z);
        let f = match &calibration {
            Calibration::Off => z,
            Calibration::Bank => {
                let bank = params
                    .bank
                    .ok_or_else(|| Error::State("calibration requested without a bank".into()))?;
                let p = match prototypes[view.label] {
                    Some(p) => p,
                    None => {
                        let p = class_prototype_on(tape, bank, view.label)?;
                        prototypes[view.label] = Some(p);
                        p
                    }
                };
                calibrate_on(tape, z, p, cfg.alpha)?
            }
            Calibration::Fixed(targets) => {
                let t = tape.constant(targets[view.label].clone());
                calibrate_on(tape, z, t, cfg.alpha)?
            }
        };
        let j = view.group;
        if text[j].is_none() {
            let ls = &batch.prompt_subsets[j];
            let feats = (0..state.classes)
                .map(|k| graph.group_feature(tape, &state.encoders.text, j, k, ls))
                .collect::<Result<Vec<_>>>()?;
            text[j] = Some(feats);
        }
        let sims = text[j]
            .as_ref()
            .expect("filled above")
            .iter()
            .map(|&t| tape.cosine_sim(f, t))
            .collect::<Result<Vec<_>>>()?;
        let logits = tape.stack(&sims)?;
        if argmax(tape.value(logits).data()) == view.label {
            correct += 1;
        }
        losses.push(tape.softmax_xent(logits, view.label, cfg.tau)?);
    }
    if losses.is_empty() {
        return Err(Error::EmptyInput("no views in the batch".into()));
    }
    let stacked = tape.stack(&losses)?;
    let loss = tape.reduce_mean(stacked, 0)?;
    Ok(MainTerms {
        loss,
        features,
        correct,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Text features of every prompt, per class: `K` lists of `J * L` rows.
pub fn language_features(state: &TrainedState) -> Result<Vec<Vec<Tensor>>> {
    (0..state.classes)
        .map(|k| {
            state
                .prompts
                .all_features(&state.encoders.text, &state.encoders.table, k)
        })
        .collect()
}

/// Alignment loss summed over classes. Language-side quantities enter as
/// constants, so only the bank receives gradient.
pub fn loss_align_on(
    tape: &mut Tape,
    state: &TrainedState,
    bank: Var,
    language: &[Vec<Tensor>],
    js_eps: Option<&Tensor>,
) -> Result<Var> {
    let cfg = &state.config;
    let per_group = state.prompts.per_group();
    let mut terms = Vec::with_capacity(state.classes);
    for (k, lang) in language.iter().enumerate() {
        let members = tape.row(bank, k)?;
        let term = match cfg.loss_kind {
            LossKind::Emd | LossKind::Js => {
                let vision = estimate_stats_on(tape, members)?;
                let lang_sets: Vec<Tensor> = if cfg.per_group_language_stats {
                    lang.chunks(per_group)
                        .map(stack_rows)
                        .collect::<Result<_>>()?
                } else {
                    vec![stack_rows(lang)?]
                };
                let mut parts = Vec::with_capacity(lang_sets.len());
                for set in &lang_sets {
                    let ls = StatsVars::constant(tape, &estimate_stats(set)?);
                    parts.push(match cfg.loss_kind {
                        LossKind::Emd => emd_upper_bound_on(tape, vision, ls)?,
                        _ => {
                            let eps = js_eps
                                .ok_or_else(|| Error::State("JS loss needs noise draws".into()))?;
                            js_divergence_on(tape, vision, ls, eps)?
                        }
                    });
                }
                let stacked = tape.stack(&parts)?;
                tape.reduce_mean(stacked, 0)?
            }
            LossKind::Mmd => {
                let lang = stack_rows(lang)?;
                let h = median_bandwidth(tape.value(members), &lang);
                let lv = tape.constant(lang);
                mmd_on(tape, members, lv, h, MmdEstimator::Unbiased)?
            }
        };
        terms.push(term);
    }
    let stacked = tape.stack(&terms)?;
    tape.reduce_sum(stacked, 0)
}

/// `sum_k bound(vision_k, language_k)` with pooled language stats.
pub fn alignment_gap(state: &TrainedState) -> Result<f64> {
    let language = language_features(state)?;
    let mut total = 0.0;
    for (k, lang) in language.iter().enumerate() {
        let v = estimate_stats(&state.bank.class_members(k)?)?;
        let l = estimate_stats(&stack_rows(lang)?)?;
        total += emd_upper_bound(&v, &l)?;
    }
    Ok(total)
}

/// Per-class stats rows for export.
pub fn class_stats(state: &TrainedState) -> Result<Vec<align::ClassStatsRow>> {
    let language = language_features(state)?;
    language
        .iter()
        .enumerate()
        .map(|(k, lang)| {
            let vision = estimate_stats(&state.bank.class_members(k)?)?;
            let language = estimate_stats(&stack_rows(lang)?)?;
            let bound = emd_upper_bound(&vision, &language)?;
            Ok(align::ClassStatsRow {
                class: k,
                vision,
                language,
                bound,
            })
        })
        .collect()
}

fn sgd(param: &mut Tensor, grads: &Gradients, v: Var, lr: f64) {
    if let Some(g) = grads.get(v) {
        for (p, d) in param.data_mut().iter_mut().zip(g.data()) {
            *p -= lr * d;
        }
    }
}

/// Shot index of every sample within its class, with a balance check.
fn shot_indices(samples: &[Sample], classes: usize) -> Result<(Vec<usize>, usize)> {
    let mut counts = vec![0usize; classes];
    let mut shots = Vec::with_capacity(samples.len());
    for s in samples {
        if s.label >= classes {
            return Err(Error::Index {
                what: "classes",
                index: s.label,
                len: classes,
            });
        }
        shots.push(counts[s.label]);
        counts[s.label] += 1;
    }
    let n = counts[0];
    if n == 0 || counts.iter().any(|&c| c != n) {
        return Err(Error::Coverage(format!(
            "training set must hold the same positive number of shots per class, got {counts:?}"
        )));
    }
    Ok((shots, n))
}

/// Fresh, untrained parameters for `classes` classes and `shots` shots.
pub fn init_state(cfg: &TrainConfig, classes: usize, shots: usize) -> Result<TrainedState> {
    cfg.validate()?;
    if classes < 2 {
        return config_err("at least two classes are required");
    }
    let dims = cfg.encoder_dims(classes);
    let encoders = build_encoders(cfg.encoder_seed, &dims)?;
    let mut init = rng::stream(rng::derive(cfg.seed, SALT_INIT));
    let prompts = PromptCollection::new(
        cfg.groups(),
        cfg.prompts_per_group,
        cfg.context_len,
        cfg.embed_dim,
        cfg.class_position,
        &mut init,
    )?;
    let c = encoders.image.shape_at(cfg.sa_position)[2];
    let adapters = (0..cfg.groups())
        .map(|j| AdapterGroup::new(j, c, cfg.attention_channels, &mut init))
        .collect();
    Ok(TrainedState {
        config: cfg.clone(),
        classes,
        shots,
        prompts,
        adapters,
        bank: VlpBank::uninitialized(classes, shots, cfg.groups(), cfg.feature_dim),
        encoders,
        metrics: Vec::new(),
        alignment_init: None,
        alignment_final: None,
    })
}

/// Trains on a class-balanced few-shot set and returns the last-epoch state.
pub fn train(
    cfg: &TrainConfig,
    classes: usize,
    train_set: &[Sample],
    val_set: &[Sample],
) -> Result<TrainedState> {
    let (shot_of, shots) = shot_indices(train_set, classes)?;
    let mut state = init_state(cfg, classes, shots)?;
    let mut stream = rng::stream(rng::derive(cfg.seed, SALT_STEPS));
    let steps_per_epoch = train_set.len().div_ceil(cfg.image_batch);
    let total_steps = cfg.epochs * steps_per_epoch;
    let js_eps = (cfg.loss_kind == LossKind::Js).then(|| align::js_noise(cfg.feature_dim));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut stream);
        let warmup = epoch == 1;
        let mut epoch_features = FeatureSet::new(classes, shots, cfg.groups(), cfg.feature_dim);
        let (mut sum_main, mut sum_align, mut correct, mut seen) = (0.0, 0.0, 0usize, 0usize);
        let mut steps = 0;
        for chunk in order.chunks(cfg.image_batch) {
            let lr_main = cosine_lr(step, total_steps, cfg.lr_main)?;
            let lr_emd = cosine_lr(step, total_steps, cfg.lr_emd)?;
            step += 1;
            steps += 1;
            let items: Vec<(&Sample, usize)> =
                chunk.iter().map(|&i| (&train_set[i], shot_of[i])).collect();
            let batch = prepare_batch(&state.config, &state.encoders, &items, &mut stream)?;

            let mut tape = Tape::new();
            let with_bank = !warmup && state.config.uses_bank();
            let params = ParamVars::register(&mut tape, &state, with_bank)?;
            let lp;
            let calibration = if warmup || !cfg.cmda {
                Calibration::Off
            } else if with_bank {
                Calibration::Bank
            } else {
                lp = language_prototypes(
                    &state.prompts,
                    &state.encoders.text,
                    &state.encoders.table,
                )?;
                Calibration::Fixed(&lp)
            };
            let terms = loss_main_on(&mut tape, &state, &params, &batch, calibration, None)?;
            if warmup && state.config.uses_bank() {
                for (view, &z) in batch.views.iter().zip(&terms.features) {
                    epoch_features.insert(view.label, view.shot, view.group, tape.value(z))?;
                }
            }
            let grads_main = tape.backward(terms.loss)?;
            sum_main += tape.value(terms.loss).item();
            correct += terms.correct;
            seen += batch.views.len();

            let mut bank_step = params.bank.map(|b| {
                grads_main
                    .get_or_zeros(b, tape.value(b))
                    .map(|g| g * lr_main)
            });
            if let (Some(b), Some(step_t)) = (params.bank, bank_step.as_mut()) {
                let language = language_features(&state)?;
                let la = loss_align_on(&mut tape, &state, b, &language, js_eps.as_ref())?;
                sum_align += tape.value(la).item();
                let grads_align = tape.backward(la)?;
                if let Some(g) = grads_align.get(b) {
                    for (s, d) in step_t.data_mut().iter_mut().zip(g.data()) {
                        *s += lr_emd * d;
                    }
                }
            }

            sgd(
                &mut state.prompts.tensor,
                &grads_main,
                params.prompts,
                lr_main,
            );
            for (a, &(w7, w3)) in state.adapters.iter_mut().zip(&params.adapters) {
                sgd(&mut a.conv7, &grads_main, w7, lr_main);
                sgd(&mut a.conv3, &grads_main, w3, lr_main);
            }
            if let Some(s) = bank_step {
                state.bank.apply_step(&s)?;
            }
        }
        if warmup && state.config.uses_bank() {
            state.bank.init(&epoch_features)?;
            state.alignment_init = Some(alignment_gap(&state)?);
        }
        let want_val = cfg.val_interval > 0
            && !val_set.is_empty()
            && (epoch % cfg.val_interval == 0 || epoch == cfg.epochs);
        let val_acc = if want_val {
            Some(Predictor::new(&state)?.accuracy(val_set)?)
        } else {
            None
        };
        state.metrics.push(EpochMetrics {
            epoch,
            loss_main: sum_main / steps as f64,
            loss_align: sum_align / steps as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            val_acc,
        });
    }
    if state.bank.is_initialized() {
        state.alignment_final = Some(alignment_gap(&state)?);
    }
    Ok(state)
}

/// Classification loss of `items` under `state`, evaluated once.
pub fn loss_main(
    state: &TrainedState,
    items: &[(&Sample, usize)],
    stream: &mut Stream,
) -> Result<f64> {
    let batch = prepare_batch(&state.config, &state.encoders, items, stream)?;
    let mut tape = Tape::new();
    let with_bank = state.bank.is_initialized() && state.config.uses_bank();
    let params = ParamVars::register(&mut tape, state, with_bank)?;
    let lp;
    let calibration = if !state.config.cmda {
        Calibration::Off
    } else if with_bank {
        Calibration::Bank
    } else if state.config.prototype_source == PrototypeSource::Lp {
        lp = language_prototypes(&state.prompts, &state.encoders.text, &state.encoders.table)?;
        Calibration::Fixed(&lp)
    } else {
        Calibration::Off
    };
    let terms = loss_main_on(&mut tape, state, &params, &batch, calibration, None)?;
    Ok(tape.value(terms.loss).item())
}

/// Read-only inference snapshot of a trained state.
pub struct Predictor<'a> {
    state: &'a TrainedState,
    adapter: Option<AdapterGroup>,
    prototypes: Option<Vec<Tensor>>,
    text: Vec<Tensor>,
}

impl<'a> Predictor<'a> {
    pub fn new(state: &'a TrainedState) -> Result<Self> {
        let cfg = &state.config;
        let adapter = if cfg.sa {
            Some(average_adapters(&state.adapters)?)
        } else {
            None
        };
        let text =
            language_prototypes(&state.prompts, &state.encoders.text, &state.encoders.table)?;
        let prototypes = if !cfg.cmda {
            None
        } else if cfg.prototype_source == PrototypeSource::Lp {
            Some(text.clone())
        } else {
            if !state.bank.is_initialized() {
                return Err(Error::State(
                    "predicting with an untrained prototype bank".into(),
                ));
            }
            Some(state.bank.prototypes()?)
        };
        Ok(Self {
            state,
            adapter,
            prototypes,
            text,
        })
    }

    /// Class text features used at inference.
    pub fn text_features(&self) -> &[Tensor] {
        &self.text
    }

    pub fn averaged_adapter(&self) -> Option<&AdapterGroup> {
        self.adapter.as_ref()
    }

    /// Attention map of the averaged adapter at the attack position.
    pub fn attention(&self, x: &Tensor) -> Result<Option<Tensor>> {
        let Some(adapter) = &self.adapter else {
            return Ok(None);
        };
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let h = self.state.encoders.image.forward_blocks(
            &mut tape,
            xv,
            0..self.state.config.sa_position,
        )?;
        let (w7, w3) = adapter.register(&mut tape);
        let m = attack::spatial_attention_on(&mut tape, w7, w3, h)?;
        Ok(Some(tape.value(m).clone()))
    }

    /// Image feature after the inference transform.
    pub fn image_feature(&self, x: &Tensor) -> Result<Tensor> {
        let enc = &self.state.encoders.image;
        let pos = self.state.config.sa_position;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let z = match &self.adapter {
            Some(adapter) => {
                let h = enc.forward_blocks(&mut tape, xv, 0..pos)?;
                let h = attack::inference_transform_on(
                    &mut tape,
                    adapter,
                    h,
                    self.state.config.inference_mode,
                )?;
                enc.encode_from(&mut tape, h, pos)?
            }
            None => enc.encode_on(&mut tape, xv)?,
        };
        Ok(tape.value(z).clone())
    }

    /// Class probabilities for `x`.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        let z = self.image_feature(x)?;
        let f = match &self.prototypes {
            Some(protos) => {
                let w = align::weighting(&z, protos)?;
                let target = align::weighted_prototype(&w, protos)?;
                align::calibrate(&z, &target, self.state.config.alpha)?
            }
            None => z,
        };
        let tau = self.state.config.tau;
        let logits: Vec<f64> = self.text.iter().map(|t| cosine(&f, t) / tau).collect();
        Ok(softmax(&logits))
    }

    pub fn predict_class(&self, x: &Tensor) -> Result<usize> {
        Ok(argmax(&self.predict(x)?))
    }

    /// Fraction of `samples` classified correctly, evaluated in parallel.
    pub fn accuracy(&self, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("accuracy of an empty set".into()));
        }
        let hits = samples
            .par_iter()
            .map(|s| {
                self.predict_class(&s.image)
                    .map(|c| usize::from(c == s.label))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(hits.iter().sum::<usize>() as f64 / samples.len() as f64)
    }
}

fn cosine(a: &Tensor, b: &Tensor) -> f64 {
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    dot / (a.norm().max(crate::autodiff::NORM_EPS) * b.norm().max(crate::autodiff::NORM_EPS))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Probabilities for one image.
pub fn predict(state: &TrainedState, x: &Tensor) -> Result<Vec<f64>> {
    Predictor::new(state)?.predict(x)
}

#[cfg(test)]
mod tests;
