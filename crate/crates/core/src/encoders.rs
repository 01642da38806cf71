//! Frozen stand-ins for a pretrained image encoder and text encoder, plus
//! the class-token embedding table.
//!
//! All weights are drawn once from a seeded uniform(-s, s) with
//! s = 1/sqrt(fan_in) and never change afterwards. They enter every tape as
//! constants, so gradients flow *through* them to upstream adapters and
//! prompts but never *into* them.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{config_err, dim_err, Error, Result};
use crate::rng;

/// Architecture sizes shared by the encoders.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Token embedding width `E`.
    pub embed: usize,
    /// Shared feature width `D`.
    pub feature: usize,
    pub blocks: usize,
    /// Channels produced by each image block.
    pub hidden: usize,
    /// Context vectors per prompt `M`.
    pub context_len: usize,
    pub classes: usize,
    /// Use `sigmoid(x) - 1/2` as the activation. The plain sigmoid leaves a
    /// large constant component in every feature.
    pub centered: bool,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            embed: 32,
            feature: 64,
            blocks: 2,
            hidden: 16,
            context_len: 16,
            classes: 5,
            centered: true,
        }
    }
}

impl EncoderDims {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("embed", self.embed),
            ("feature", self.feature),
            ("blocks", self.blocks),
            ("hidden", self.hidden),
            ("context_len", self.context_len),
            ("classes", self.classes),
        ];
        for (name, v) in fields {
            if v == 0 {
                return config_err(format!("encoder dimension `{name}` must be positive"));
            }
        }
        let scale = 1 << self.blocks;
        if !self.height.is_multiple_of(scale) || !self.width.is_multiple_of(scale) {
            return config_err(format!(
                "{}x{} images cannot be halved {} times",
                self.height, self.width, self.blocks
            ));
        }
        Ok(())
    }
}

/// Conv blocks (3x3 conv, sigmoid or centered sigmoid, 2x average downsample), then global
/// average pooling and a linear map to `D`, l2-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenImageEncoder {
    dims: EncoderDims,
    blocks: Vec<Tensor>,
    head: Tensor,
    seed: u64,
}

/// Mean-pooled tokens, a linear map to `D`, activation, a second linear map,
/// l2-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenTextEncoder {
    context_len: usize,
    centered: bool,
    first: Tensor,
    second: Tensor,
    seed: u64,
}

/// One unit-norm embedding row per class token.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    rows: Tensor,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoders {
    pub image: FrozenImageEncoder,
    pub text: FrozenTextEncoder,
    pub table: EmbeddingTable,
}

fn activate(tape: &mut Tape, x: Var, centered: bool) -> Result<Var> {
    let a = tape.sigmoid(x)?;
    if !centered {
        return Ok(a);
    }
    let half = Tensor::from_fn(tape.value(a).shape().to_vec(), |_| 0.5);
    let half = tape.constant(half);
    tape.sub(a, half)
}

pub fn build_encoders(seed: u64, dims: &EncoderDims) -> Result<Encoders> {
    dims.validate()?;
    let mut stream = rng::stream(seed);
    let mut blocks = Vec::with_capacity(dims.blocks);
    let mut c_in = dims.channels;
    for _ in 0..dims.blocks {
        let fan_in = 9 * c_in;
        blocks.push(rng::uniform(
            &[3, 3, c_in, dims.hidden],
            1.0 / (fan_in as f64).sqrt(),
            &mut stream,
        ));
        c_in = dims.hidden;
    }
    let head = rng::uniform(
        &[dims.feature, dims.hidden],
        1.0 / (dims.hidden as f64).sqrt(),
        &mut stream,
    );
    let first = rng::uniform(
        &[dims.feature, dims.embed],
        1.0 / (dims.embed as f64).sqrt(),
        &mut stream,
    );
    let second = rng::uniform(
        &[dims.feature, dims.feature],
        1.0 / (dims.feature as f64).sqrt(),
        &mut stream,
    );
    let mut rows = rng::normal(&[dims.classes, dims.embed], 1.0, &mut stream);
    for row in rows.data_mut().chunks_mut(dims.embed) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(Encoders {
        image: FrozenImageEncoder {
            dims: dims.clone(),
            blocks,
            head,
            seed,
        },
        text: FrozenTextEncoder {
            context_len: dims.context_len,
            centered: dims.centered,
            first,
            second,
            seed,
        },
        table: EmbeddingTable { rows, seed },
    })
}

impl FrozenImageEncoder {
    pub fn dims(&self) -> &EncoderDims {
        &self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn block_kernels(&self) -> &[Tensor] {
        &self.blocks
    }

    pub fn head_weights(&self) -> &Tensor {
        &self.head
    }

    /// `[h, w, c]` of the activation entering block `position` (0 is the
    /// raw image, `blocks` is the pre-pool map).
    pub fn shape_at(&self, position: usize) -> [usize; 3] {
        let s = 1 << position;
        let c = if position == 0 {
            self.dims.channels
        } else {
            self.dims.hidden
        };
        [self.dims.height / s, self.dims.width / s, c]
    }

    pub fn pre_pool_shape(&self) -> [usize; 3] {
        self.shape_at(self.dims.blocks)
    }

    fn check_input(&self, tape: &Tape, x: Var, position: usize) -> Result<()> {
        let expect = self.shape_at(position);
        let got = tape.try_value(x)?.shape();
        if got != expect {
            return dim_err(format!(
                "image encoder expects {expect:?} at position {position}, got {got:?}"
            ));
        }
        Ok(())
    }

    pub fn forward_blocks(&self, tape: &mut Tape, h: Var, range: Range<usize>) -> Result<Var> {
        self.check_input(tape, h, range.start)?;
        let mut h = h;
        for b in range {
            let w = tape.constant(self.blocks[b].clone());
            let c = tape.conv2d_same(h, w)?;
            let a = activate(tape, c, self.dims.centered)?;
            h = tape.avg_pool2(a)?;
        }
        Ok(h)
    }

    /// Global average pool, linear map, l2 normalization.
    pub fn head(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        self.check_input(tape, h, self.dims.blocks)?;
        let [ph, pw, c] = self.pre_pool_shape();
        let flat = tape.reshape(h, &[ph * pw, c])?;
        let pooled = tape.reduce_mean(flat, 0)?;
        let w = tape.constant(self.head.clone());
        let z = tape.matvec(w, pooled)?;
        tape.l2_normalize(z)
    }

    /// Continues the forward pass from the activation entering `position`.
    pub fn encode_from(&self, tape: &mut Tape, h: Var, position: usize) -> Result<Var> {
        if position > self.dims.blocks {
            return Err(Error::Index {
                what: "encoder positions",
                index: position,
                len: self.dims.blocks + 1,
            });
        }
        let h = self.forward_blocks(tape, h, position..self.dims.blocks)?;
        self.head(tape, h)
    }

    pub fn encode_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.encode_from(tape, x, 0)
    }

    pub fn encode_image(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(x.clone());
        let z = self.encode_on(&mut tape, x)?;
        Ok(tape.value(z).clone())
    }
}

impl FrozenTextEncoder {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn weights(&self) -> (&Tensor, &Tensor) {
        (&self.first, &self.second)
    }

    /// Encodes an `(M+1) x E` token sequence.
    pub fn encode_on(&self, tape: &mut Tape, tokens: Var) -> Result<Var> {
        let shape = tape.try_value(tokens)?.shape().to_vec();
        let embed = self.first.shape()[1];
        if shape != [self.context_len + 1, embed] {
            return dim_err(format!(
                "text encoder expects {} x {embed} tokens, got {shape:?}",
                self.context_len + 1
            ));
        }
        let pooled = tape.reduce_mean(tokens, 0)?;
        let w1 = tape.constant(self.first.clone());
        let h = tape.matvec(w1, pooled)?;
        let h = activate(tape, h, self.centered)?;
        let w2 = tape.constant(self.second.clone());
        let w = tape.matvec(w2, h)?;
        tape.l2_normalize(w)
    }

    pub fn encode_text(&self, tokens: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let t = tape.constant(tokens.clone());
        let w = self.encode_on(&mut tape, t)?;
        Ok(tape.value(w).clone())
    }
}

impl EmbeddingTable {
    pub fn classes(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn embed(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn row(&self, k: usize) -> Result<Tensor> {
        if k >= self.classes() {
            return Err(Error::Index {
                what: "class tokens",
                index: k,
                len: self.classes(),
            });
        }
        Tensor::new(vec![1, self.embed()], self.rows.row(k).to_vec())
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn small() -> EncoderDims {
        EncoderDims {
            height: 8,
            width: 8,
            channels: 3,
            embed: 6,
            feature: 5,
            blocks: 2,
            hidden: 4,
            context_len: 3,
            classes: 3,
            centered: true,
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_encoders(9, &EncoderDims::default()).unwrap();
        let b = build_encoders(9, &EncoderDims::default()).unwrap();
        assert_eq!(a, b);
        let c = build_encoders(10, &EncoderDims::default()).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn non_positive_dims_rejected() {
        let d = EncoderDims {
            feature: 0,
            ..EncoderDims::default()
        };
        assert!(matches!(build_encoders(0, &d), Err(Error::Config(_))));
        let d = EncoderDims {
            blocks: 0,
            ..EncoderDims::default()
        };
        assert!(build_encoders(0, &d).is_err());
    }

    #[test]
    fn feature_dims_and_prepool_size() {
        let enc = build_encoders(1, &EncoderDims::default()).unwrap();
        assert_eq!(enc.image.pre_pool_shape()[..2], [8, 8]);
        let x = Tensor::full(vec![32, 32, 3], 0.3);
        let z = enc.image.encode_image(&x).unwrap();
        assert_eq!(z.shape(), &[64]);
        let t = Tensor::full(vec![17, 32], 0.1);
        let w = enc.text.encode_text(&t).unwrap();
        assert_eq!(w.shape(), &[64]);
    }

    #[test]
    fn features_are_unit_norm_and_deterministic() {
        let enc = build_encoders(2, &EncoderDims::default()).unwrap();
        let mut s = rng::stream(3);
        let x = rng::uniform(&[32, 32, 3], 1.0, &mut s);
        let z1 = enc.image.encode_image(&x).unwrap();
        let z2 = enc.image.encode_image(&x).unwrap();
        assert!((z1.norm() - 1.0).abs() < 1e-12);
        assert_eq!(z1, z2);
        let t = rng::normal(&[17, 32], 1.0, &mut s);
        assert!((enc.text.encode_text(&t).unwrap().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wrong_shapes_are_dimension_errors() {
        let enc = build_encoders(2, &EncoderDims::default()).unwrap();
        let bad = Tensor::zeros(vec![16, 16, 3]);
        assert!(matches!(
            enc.image.encode_image(&bad),
            Err(Error::Dimension(_))
        ));
        let bad = Tensor::zeros(vec![16, 32]);
        assert!(matches!(
            enc.text.encode_text(&bad),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn class_row_changes_text_feature() {
        let enc = build_encoders(4, &EncoderDims::default()).unwrap();
        let mut s = rng::stream(5);
        let ctx = rng::normal(&[16, 32], 0.02, &mut s);
        let with = |k: usize| {
            let mut data = ctx.data().to_vec();
            data.extend_from_slice(enc.table.row(k).unwrap().data());
            enc.text
                .encode_text(&Tensor::new(vec![17, 32], data).unwrap())
                .unwrap()
        };
        assert_ne!(with(0), with(1));
    }

    #[test]
    fn table_rows_unit_norm() {
        let enc = build_encoders(6, &EncoderDims::default()).unwrap();
        for k in 0..enc.table.classes() {
            assert!((enc.table.row(k).unwrap().norm() - 1.0).abs() < 1e-12);
        }
        assert!(enc.table.row(5).is_err());
    }

    #[test]
    fn image_gradient_matches_finite_differences() {
        let enc = build_encoders(7, &small()).unwrap();
        let mut s = rng::stream(8);
        let x = rng::uniform(&[8, 8, 3], 1.0, &mut s);
        let c = rng::uniform(&[5], 1.0, &mut s);
        let err = grad_check(
            |tape, x| {
                let z = enc.image.encode_on(tape, x)?;
                let c = tape.constant(c.clone());
                let p = tape.hadamard(z, c)?;
                tape.sum_all(p)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn text_gradient_matches_finite_differences() {
        let enc = build_encoders(7, &small()).unwrap();
        let mut s = rng::stream(9);
        let t = rng::normal(&[4, 6], 0.5, &mut s);
        let c = rng::uniform(&[5], 1.0, &mut s);
        let err = grad_check(
            |tape, t| {
                let w = enc.text.encode_on(tape, t)?;
                let c = tape.constant(c.clone());
                let p = tape.hadamard(w, c)?;
                tape.sum_all(p)
            },
            &t,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gradients_flow_through_frozen_weights() {
        let enc = build_encoders(7, &EncoderDims::default()).unwrap();
        let mut s = rng::stream(10);
        let x = rng::uniform(&[32, 32, 3], 1.0, &mut s);
        let mut tape = Tape::new();
        let xv = tape.param(x);
        let z = enc.image.encode_on(&mut tape, xv).unwrap();
        let first = tape.row(z, 0).unwrap();
        let g = tape.backward(first).unwrap();
        assert!(g.get(xv).unwrap().norm() > 0.0);
    }

    #[test]
    fn centering_removes_the_shared_component() {
        let text_cos = |centered| {
            let dims = EncoderDims {
                centered,
                ..EncoderDims::default()
            };
            let enc = build_encoders(3, &dims).unwrap();
            let feats: Vec<Tensor> = (0..2)
                .map(|k| {
                    let mut t = vec![0.0; dims.context_len * dims.embed];
                    t.extend_from_slice(enc.table.rows().row(k));
                    enc.text
                        .encode_text(
                            &Tensor::new(vec![dims.context_len + 1, dims.embed], t).unwrap(),
                        )
                        .unwrap()
                })
                .collect();
            feats[0]
                .data()
                .iter()
                .zip(feats[1].data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        assert!(text_cos(false) > 0.999);
        assert!(text_cos(true) < 0.9);
    }
}
