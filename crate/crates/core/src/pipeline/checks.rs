//! Gradient and routing checks on a micro instance of the full model:
//! two classes, one shot, 8x8 images.

use super::*;
use crate::autodiff::grad_check;

pub const END_TO_END_EPS: f64 = 1e-5;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

pub fn micro_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        image_batch: 3,
        prompt_batch: 2,
        prompts_per_group: 3,
        context_len: 2,
        feature_dim: 8,
        embed_dim: 4,
        image_size: 8,
        blocks: 1,
        hidden: 4,
        attention_channels: 2,
        plan: ranked_plan(2).expect("two ranked groups"),
        val_interval: 1,
        ..TrainConfig::default()
    }
}

/// `shots` noisy 8x8 images per class, class `k` marked by one bright pixel.
pub fn micro_set(classes: usize, shots: usize, seed: u64) -> Vec<Sample> {
    let mut s = rng::stream(seed);
    let mut out = Vec::new();
    for _ in 0..shots {
        for k in 0..classes {
            let mut image = rng::uniform(&[8, 8, 3], 0.5, &mut s).map(|v| v + 0.5);
            image.data_mut()[k * 3] += 1.0;
            out.push(Sample {
                image,
                label: k,
                mask: None,
            });
        }
    }
    out
}

/// A trained micro state and one prepared batch of every group.
pub fn micro_instance(seed: u64) -> Result<(TrainedState, PreparedBatch)> {
    let cfg = TrainConfig {
        seed,
        ..micro_config()
    };
    let data = micro_set(2, 1, rng::derive(seed, 9));
    let state = train(&cfg, 2, &data, &[])?;
    let items: Vec<_> = data.iter().map(|s| (s, 0)).collect();
    let batch = prepare_batch(
        &state.config,
        &state.encoders,
        &items,
        &mut rng::stream(rng::derive(seed, 10)),
    )?;
    Ok((state, batch))
}

/// Relative error of the training loss gradient against central
/// differences, for the prompts and both convolutions of the attacked group.
pub fn end_to_end_grad_check(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let (state, batch) = micro_instance(seed)?;
    let batch = PreparedBatch {
        views: batch.views[..1].to_vec(),
        prompt_subsets: batch.prompt_subsets,
    };
    let g = batch.views[0].group;
    let loss_with = |t: &mut Tape, replace: usize, v: Var| -> Result<Var> {
        let mut params = ParamVars::register(t, &state, true)?;
        match replace {
            0 => params.prompts = v,
            1 => params.adapters[g].0 = v,
            _ => params.adapters[g].1 = v,
        }
        Ok(loss_main_on(t, &state, &params, &batch, Calibration::Bank, None)?.loss)
    };
    let points = [
        ("prompts", &state.prompts.tensor),
        ("conv7", &state.adapters[g].conv7),
        ("conv3", &state.adapters[g].conv3),
    ];
    points
        .iter()
        .enumerate()
        .map(|(i, (name, p))| {
            Ok((
                *name,
                grad_check(|t, v| loss_with(t, i, v), p, END_TO_END_EPS)?,
            ))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingReport {
    /// Largest prompt gradient entry from the alignment loss alone.
    pub align_to_prompts: f64,
    /// Largest prompt gradient entry outside the group that produced a view.
    pub cross_group: f64,
    /// Every view moved its own prompts and its own attack convolution.
    pub own_group_nonzero: bool,
}

impl RoutingReport {
    pub fn passed(&self) -> bool {
        self.align_to_prompts == 0.0 && self.cross_group == 0.0 && self.own_group_nonzero
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn routing_check(seed: u64) -> Result<RoutingReport> {
    let (state, batch) = micro_instance(seed)?;
    let mut tape = Tape::new();
    let params = ParamVars::register(&mut tape, &state, true)?;
    let bank = params
        .bank
        .ok_or_else(|| Error::State("micro instance has no bank".into()))?;
    let language = language_features(&state)?;
    let la = loss_align_on(&mut tape, &state, bank, &language, None)?;
    let g = tape.backward(la)?;
    let align_to_prompts = max_abs(g.get_or_zeros(params.prompts, &state.prompts.tensor).data());

    let per_group = state.prompts.per_group() * state.config.context_len * state.config.embed_dim;
    let (mut cross_group, mut own_group_nonzero) = (0.0_f64, true);
    for (vi, view) in batch.views.iter().enumerate() {
        let mut tape = Tape::new();
        let params = ParamVars::register(&mut tape, &state, true)?;
        let terms = loss_main_on(
            &mut tape,
            &state,
            &params,
            &batch,
            Calibration::Bank,
            Some(&[vi]),
        )?;
        let g = tape.backward(terms.loss)?;
        let gp = g.get_or_zeros(params.prompts, &state.prompts.tensor);
        for (j, chunk) in gp.data().chunks(per_group).enumerate() {
            if j == view.group {
                own_group_nonzero &= max_abs(chunk) > 0.0;
            } else {
                cross_group = cross_group.max(max_abs(chunk));
            }
        }
        let (w7, _) = params.adapters[view.group];
        let gw = g.get_or_zeros(w7, &state.adapters[view.group].conv7);
        own_group_nonzero &= max_abs(gw.data()) > 0.0;
    }
    Ok(RoutingReport {
        align_to_prompts,
        cross_group,
        own_group_nonzero,
    })
}
