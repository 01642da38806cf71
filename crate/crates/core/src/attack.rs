//! Selective Attack: learned spatial attention and the Gaussian perturbation
//! it steers toward class-irrelevant regions.
//!
//! Each augmentation group owns one adapter pair. A 7x7 convolution and a
//! sigmoid give a feature map `F`; channel-wise average and max pooling of
//! `F`, a 3x3 convolution and a second sigmoid give the attention `M`.
//! Training perturbs `x' = x + (1 - M*M) * delta`; inference uses the
//! averaged adapter and never adds noise.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{config_err, dim_err, Error, Result};
use crate::rng::{self, Stream};

/// Output channels of the 7x7 adapter convolution.
pub const DEFAULT_ATTENTION_CHANNELS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterGroup {
    /// `[7, 7, c, c_f]`
    pub conv7: Tensor,
    /// `[3, 3, 2, 1]`
    pub conv3: Tensor,
    pub index: usize,
    pub frozen: bool,
}

impl AdapterGroup {
    /// Fresh trainable adapter with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
    /// weights.
    pub fn new(
        index: usize,
        channels: usize,
        attention_channels: usize,
        stream: &mut Stream,
    ) -> Self {
        let conv7 = rng::uniform(
            &[7, 7, channels, attention_channels],
            1.0 / ((49 * channels) as f64).sqrt(),
            stream,
        );
        let conv3 = rng::uniform(&[3, 3, 2, 1], 1.0 / 18f64.sqrt(), stream);
        Self {
            conv7,
            conv3,
            index,
            frozen: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.conv7.shape()[2]
    }

    /// Registers both kernels on `tape`, as parameters unless frozen.
    pub fn register(&self, tape: &mut Tape) -> (Var, Var) {
        let trainable = !self.frozen;
        (
            tape.leaf(self.conv7.clone(), trainable),
            tape.leaf(self.conv3.clone(), trainable),
        )
    }

    pub fn spatial_attention(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (w7, w3) = self.register(&mut tape);
        let x = tape.constant(x.clone());
        let m = spatial_attention_on(&mut tape, w7, w3, x)?;
        Ok(tape.value(m).clone())
    }
}

/// `M = sigmoid(conv3([avg_c F, max_c F]))` with `F = sigmoid(conv7(x))`,
/// returned as `[h, w]`.
pub fn spatial_attention_on(tape: &mut Tape, conv7: Var, conv3: Var, x: Var) -> Result<Var> {
    let shape = tape.try_value(x)?.shape().to_vec();
    let k7 = tape.try_value(conv7)?.shape().to_vec();
    if shape.len() != 3 || k7.len() != 4 || k7[2] != shape[2] {
        return dim_err(format!(
            "attention adapter {k7:?} cannot read input {shape:?}"
        ));
    }
    let f = tape.conv2d_same(x, conv7)?;
    let f = tape.sigmoid(f)?;
    let avg = tape.channel_avg_pool(f)?;
    let max = tape.channel_max_pool(f)?;
    let pooled = tape.concat(&[avg, max], 2)?;
    let m = tape.conv2d_same(pooled, conv3)?;
    let m = tape.sigmoid(m)?;
    tape.reshape(m, &shape[..2])
}

/// `1 - M * M`.
pub fn kernelize_on(tape: &mut Tape, m: Var) -> Result<Var> {
    let ones = tape.constant(Tensor::ones(tape.try_value(m)?.shape().to_vec()));
    let sq = tape.square(m)?;
    tape.sub(ones, sq)
}

pub fn kernelize(m: &Tensor) -> Tensor {
    m.map(|v| 1.0 - v * v)
}

/// Draws `delta` with i.i.d. N(0, sigma^2) entries over an `[h, w]` grid.
pub fn draw_noise(h: usize, w: usize, sigma: f64, stream: &mut Stream) -> Result<Tensor> {
    if !(sigma >= 0.0) {
        return config_err(format!("attack sigma must be non-negative, got {sigma}"));
    }
    Ok(Tensor::from_fn(vec![h, w], |_| {
        let z: f64 = stream.sample(StandardNormal);
        z * sigma
    }))
}

/// `x + k(M) * delta` on the tape, with the `[h, w]` mask shared by all
/// channels of `x`.
pub fn attack_with_noise_on(tape: &mut Tape, x: Var, m: Var, delta: &Tensor) -> Result<Var> {
    let shape = tape.try_value(x)?.shape().to_vec();
    if shape.len() != 3 || tape.try_value(m)?.shape() != &shape[..2] || delta.shape() != &shape[..2]
    {
        return dim_err(format!(
            "attack on {shape:?} needs [h, w] attention and noise, got {:?} and {:?}",
            tape.try_value(m)?.shape(),
            delta.shape()
        ));
    }
    let k = kernelize_on(tape, m)?;
    let d = tape.constant(delta.clone());
    let kd = tape.hadamard(k, d)?;
    let kd = tape.expand_channels(kd, shape[2])?;
    tape.add(x, kd)
}

pub fn selective_attack_on(
    tape: &mut Tape,
    x: Var,
    m: Var,
    sigma: f64,
    stream: &mut Stream,
) -> Result<Var> {
    let shape = tape.try_value(x)?.shape().to_vec();
    if shape.len() != 3 {
        return dim_err(format!("attack expects [h, w, c], got {shape:?}"));
    }
    let delta = draw_noise(shape[0], shape[1], sigma, stream)?;
    attack_with_noise_on(tape, x, m, &delta)
}

/// Attacked copy of `x` under attention `m`. Noise is drawn even when
/// `sigma` is zero so the stream advances identically.
pub fn selective_attack(x: &Tensor, m: &Tensor, sigma: f64, stream: &mut Stream) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mv = tape.constant(m.clone());
    let out = selective_attack_on(&mut tape, xv, mv, sigma, stream)?;
    Ok(tape.value(out).clone())
}

/// Parameter-wise mean of the groups, frozen.
pub fn average_adapters(groups: &[AdapterGroup]) -> Result<AdapterGroup> {
    let Some(first) = groups.first() else {
        return config_err("cannot average an empty adapter list");
    };
    for g in groups {
        if g.conv7.shape() != first.conv7.shape() || g.conv3.shape() != first.conv3.shape() {
            return dim_err("adapter groups have mismatched kernel shapes");
        }
    }
    let n = groups.len() as f64;
    let mean = |pick: fn(&AdapterGroup) -> &Tensor| {
        let mut acc = Tensor::zeros(pick(first).shape().to_vec());
        for g in groups {
            for (a, v) in acc.data_mut().iter_mut().zip(pick(g).data()) {
                *a += v;
            }
        }
        acc.map(|v| v / n)
    };
    Ok(AdapterGroup {
        conv7: mean(|g| &g.conv7),
        conv3: mean(|g| &g.conv3),
        index: 0,
        frozen: true,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// `x * M`
    #[default]
    Modulate,
    /// `x`
    Passthrough,
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferenceMode::Modulate => "modulate",
            InferenceMode::Passthrough => "passthrough",
        })
    }
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "modulate" => Ok(InferenceMode::Modulate),
            "passthrough" => Ok(InferenceMode::Passthrough),
            other => config_err(format!("unknown inference mode `{other}`")),
        }
    }
}

/// `x * M` (or `x`) on the tape.
pub fn inference_transform_on(
    tape: &mut Tape,
    adapter: &AdapterGroup,
    x: Var,
    mode: InferenceMode,
) -> Result<Var> {
    if mode == InferenceMode::Passthrough {
        return Ok(x);
    }
    let (w7, w3) = adapter.register(tape);
    let m = spatial_attention_on(tape, w7, w3, x)?;
    let c = tape.try_value(x)?.shape()[2];
    let m = tape.expand_channels(m, c)?;
    tape.hadamard(x, m)
}

pub fn inference_transform(
    adapter: &AdapterGroup,
    x: &Tensor,
    mode: InferenceMode,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = inference_transform_on(&mut tape, adapter, xv, mode)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn adapter(seed: u64, c: usize) -> AdapterGroup {
        AdapterGroup::new(0, c, DEFAULT_ATTENTION_CHANNELS, &mut rng::stream(seed))
    }

    fn image(seed: u64) -> Tensor {
        crate::rng::uniform(&[8, 8, 3], 1.0, &mut rng::stream(seed))
    }

    #[test]
    fn attention_is_hw_and_open_unit_interval() {
        let m = adapter(1, 3).spatial_attention(&image(2)).unwrap();
        assert_eq!(m.shape(), &[8, 8]);
        assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn attention_rejects_wrong_channels() {
        assert!(matches!(
            adapter(1, 4).spatial_attention(&image(2)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let a = adapter(3, 3);
        let x = crate::rng::uniform(&[5, 5, 3], 1.0, &mut rng::stream(4));
        let w3 = a.conv3.clone();
        let xs = x.clone();
        let err7 = grad_check(
            |t, w7| {
                let w3 = t.constant(w3.clone());
                let x = t.constant(xs.clone());
                let m = spatial_attention_on(t, w7, w3, x)?;
                t.sum_all(m)
            },
            &a.conv7,
            1e-5,
        )
        .unwrap();
        let w7 = a.conv7.clone();
        let err3 = grad_check(
            |t, w3| {
                let w7 = t.constant(w7.clone());
                let x = t.constant(x.clone());
                let m = spatial_attention_on(t, w7, w3, x)?;
                t.sum_all(m)
            },
            &a.conv3,
            1e-5,
        )
        .unwrap();
        assert!(err7 < 1e-4, "{err7}");
        assert!(err3 < 1e-4, "{err3}");
    }

    #[test]
    fn kernelize_values() {
        let k = kernelize(&Tensor::new(vec![3], vec![1.0, 0.0, 0.5]).unwrap());
        assert_eq!(k.data(), &[0.0, 1.0, 0.75]);
    }

    #[test]
    fn zero_sigma_and_full_attention_are_identities() {
        let x = image(5);
        let m = adapter(6, 3).spatial_attention(&x).unwrap();
        let y = selective_attack(&x, &m, 0.0, &mut rng::stream(7)).unwrap();
        assert_eq!(y, x);
        let y = selective_attack(&x, &Tensor::ones(vec![8, 8]), 0.7, &mut rng::stream(7)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn negative_sigma_is_rejected() {
        let x = image(5);
        let r = selective_attack(&x, &Tensor::ones(vec![8, 8]), -0.1, &mut rng::stream(0));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn attack_broadcasts_one_mask_over_channels() {
        let x = image(8);
        let m = Tensor::full(vec![8, 8], 0.5);
        let y = selective_attack(&x, &m, 0.7, &mut rng::stream(9)).unwrap();
        for (px, py) in x.data().chunks(3).zip(y.data().chunks(3)) {
            let d0 = py[0] - px[0];
            assert!((py[1] - px[1] - d0).abs() < 1e-15);
            assert!((py[2] - px[2] - d0).abs() < 1e-15);
        }
    }

    #[test]
    fn noise_variance_matches_sigma() {
        let sigma = 0.7;
        let d = draw_noise(100, 100, sigma, &mut rng::stream(10)).unwrap();
        let n = d.numel() as f64;
        let mean = d.data().iter().sum::<f64>() / n;
        let var = d.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var - sigma * sigma).abs() < 0.05 * sigma * sigma, "{var}");
    }

    #[test]
    fn averaging_cases() {
        assert!(matches!(average_adapters(&[]), Err(Error::Config(_))));
        let a = adapter(11, 3);
        let avg = average_adapters(&[a.clone(), a.clone(), a.clone()]).unwrap();
        for (x, y) in avg.conv7.data().iter().zip(a.conv7.data()) {
            assert!((x - y).abs() <= 1e-15 * y.abs().max(1.0));
        }
        assert!(avg.frozen);
        let mut neg = a.clone();
        neg.conv7 = a.conv7.map(|v| -v);
        neg.conv3 = a.conv3.map(|v| -v);
        let avg = average_adapters(&[a, neg]).unwrap();
        assert!(avg.conv7.data().iter().all(|&v| v == 0.0));
        assert!(avg.conv3.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn averaging_four_random_groups() {
        let mut s = rng::stream(12);
        let gs: Vec<_> = (0..4)
            .map(|j| AdapterGroup::new(j, 3, DEFAULT_ATTENTION_CHANNELS, &mut s))
            .collect();
        let avg = average_adapters(&gs).unwrap();
        for i in 0..avg.conv7.numel() {
            let direct = gs.iter().map(|g| g.conv7.data()[i]).sum::<f64>() / 4.0;
            assert!((avg.conv7.data()[i] - direct).abs() <= 1e-15);
        }
    }

    #[test]
    fn inference_modes() {
        let x = image(13);
        let mut a = adapter(14, 3);
        a.frozen = true;
        assert_eq!(
            inference_transform(&a, &x, InferenceMode::Passthrough).unwrap(),
            x
        );
        let y = inference_transform(&a, &x, InferenceMode::Modulate).unwrap();
        let m = a.spatial_attention(&x).unwrap();
        for (i, (&xv, &yv)) in x.data().iter().zip(y.data()).enumerate() {
            assert_eq!(yv, xv * m.data()[i / 3]);
        }
        assert_eq!(
            "passthrough".parse::<InferenceMode>().unwrap(),
            InferenceMode::Passthrough
        );
        assert!("bogus".parse::<InferenceMode>().is_err());
    }
}
