//! Cross-modal distribution alignment.
//!
//! Each class keeps `N * J` trainable vision-language prototype members in a
//! [`VlpBank`]. Vision and language features of a class are summarized by a
//! diagonal Gaussian ([`GaussianStats`]); the alignment loss between the two
//! is [`emd_upper_bound`], which costs `O(D)`.
//!
//! ```
//! use sada::align::{emd_upper_bound, GaussianStats};
//!
//! let a = GaussianStats::new(vec![0.0], vec![1.0]).unwrap();
//! let b = GaussianStats::new(vec![3.0], vec![4.0]).unwrap();
//! assert_eq!(emd_upper_bound(&a, &b).unwrap(), 10.0);
//! ```

mod divergence;
mod oracle;

pub use divergence::{
    js_divergence, js_divergence_on, js_noise, median_bandwidth, mmd, mmd_on, MmdEstimator,
    JS_SAMPLES,
};
pub use oracle::{discrete_emd, exact_w2_gaussian, full_cov_upper_bound, hungarian};

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{config_err, dim_err, Error, Result};

/// Lower bound applied to every estimated variance.
pub const VAR_FLOOR: f64 = 1e-8;
/// Added to distances before inversion in [`weighting`].
pub const DISTANCE_GUARD: f64 = 1e-12;

/// Per-class trainable prototype members, stored class-major as
/// `[K, N, J, D]` so one class is a contiguous `[N * J, D]` block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VlpBank {
    members: Tensor,
    initialized: bool,
}

/// Epoch-1 image features keyed by class, shot and augmentation.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    classes: usize,
    shots: usize,
    groups: usize,
    dim: usize,
    slots: Vec<Option<Vec<f64>>>,
}

impl FeatureSet {
    pub fn new(classes: usize, shots: usize, groups: usize, dim: usize) -> Self {
        Self {
            classes,
            shots,
            groups,
            dim,
            slots: vec![None; classes * shots * groups],
        }
    }

    pub fn insert(&mut self, k: usize, n: usize, j: usize, z: &Tensor) -> Result<()> {
        if k >= self.classes || n >= self.shots || j >= self.groups {
            return Err(Error::Index {
                what: "feature slots",
                index: (k * self.shots + n) * self.groups + j,
                len: self.slots.len(),
            });
        }
        if z.numel() != self.dim {
            return dim_err(format!(
                "feature of length {} in a {}-dim set",
                z.numel(),
                self.dim
            ));
        }
        self.slots[(k * self.shots + n) * self.groups + j] = Some(z.data().to_vec());
        Ok(())
    }
}

impl VlpBank {
    pub fn uninitialized(classes: usize, shots: usize, groups: usize, dim: usize) -> Self {
        Self {
            members: Tensor::zeros(vec![classes, shots, groups, dim]),
            initialized: false,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn classes(&self) -> usize {
        self.members.shape()[0]
    }

    pub fn shots(&self) -> usize {
        self.members.shape()[1]
    }

    pub fn groups(&self) -> usize {
        self.members.shape()[2]
    }

    pub fn dim(&self) -> usize {
        self.members.shape()[3]
    }

    /// Copies every epoch-1 feature into its member slot. Allowed once.
    pub fn init(&mut self, features: &FeatureSet) -> Result<()> {
        if self.initialized {
            return Err(Error::State("prototype bank is already initialized".into()));
        }
        let dims = [
            features.classes,
            features.shots,
            features.groups,
            features.dim,
        ];
        if dims.as_slice() != self.members.shape() {
            return dim_err(format!(
                "features {dims:?} do not match bank {:?}",
                self.members.shape()
            ));
        }
        for (i, slot) in features.slots.iter().enumerate() {
            let Some(z) = slot else {
                let per_class = features.shots * features.groups;
                return Err(Error::Coverage(format!(
                    "no epoch-1 feature for class {} shot {} group {}",
                    i / per_class,
                    (i % per_class) / features.groups,
                    i % features.groups
                )));
            };
            self.members.data_mut()[i * features.dim..(i + 1) * features.dim].copy_from_slice(z);
        }
        self.initialized = true;
        Ok(())
    }

    fn check(&self) -> Result<()> {
        if !self.initialized {
            return Err(Error::State(
                "prototype bank used before initialization".into(),
            ));
        }
        Ok(())
    }

    fn check_class(&self, k: usize) -> Result<()> {
        self.check()?;
        if k >= self.classes() {
            return Err(Error::Index {
                what: "bank classes",
                index: k,
                len: self.classes(),
            });
        }
        Ok(())
    }

    /// Member `v_{n,j}^k`.
    pub fn member(&self, n: usize, j: usize, k: usize) -> Result<&[f64]> {
        self.check_class(k)?;
        if n >= self.shots() || j >= self.groups() {
            return Err(Error::Index {
                what: "bank members",
                index: n * self.groups() + j,
                len: self.shots() * self.groups(),
            });
        }
        let d = self.dim();
        let start = ((k * self.shots() + n) * self.groups() + j) * d;
        Ok(&self.members.data()[start..start + d])
    }

    /// The `[N * J, D]` members of class `k`.
    pub fn class_members(&self, k: usize) -> Result<Tensor> {
        self.check_class(k)?;
        let rows = self.shots() * self.groups();
        let d = self.dim();
        Tensor::new(
            vec![rows, d],
            self.members.data()[k * rows * d..(k + 1) * rows * d].to_vec(),
        )
    }

    pub fn class_prototype(&self, k: usize) -> Result<Tensor> {
        let m = self.class_members(k)?;
        Ok(column_mean(&m))
    }

    /// All class prototypes, `K` rows of `D`.
    pub fn prototypes(&self) -> Result<Vec<Tensor>> {
        (0..self.classes())
            .map(|k| self.class_prototype(k))
            .collect()
    }

    /// Registers the members as one `[K, N * J, D]` parameter.
    pub fn register(&self, tape: &mut Tape) -> Result<Var> {
        self.check()?;
        let shape = vec![self.classes(), self.shots() * self.groups(), self.dim()];
        Ok(tape.param(self.members.clone().reshape(shape)?))
    }

    /// Subtracts `step` (shaped like the registered parameter) in place.
    pub fn apply_step(&mut self, step: &Tensor) -> Result<()> {
        self.check()?;
        if step.numel() != self.members.numel() {
            return dim_err("bank update has the wrong size");
        }
        for (m, s) in self.members.data_mut().iter_mut().zip(step.data()) {
            *m -= s;
        }
        Ok(())
    }

    pub fn members(&self) -> &Tensor {
        &self.members
    }
}

fn column_mean(m: &Tensor) -> Tensor {
    let (rows, d) = (m.shape()[0], m.shape()[1]);
    let mut out = vec![0.0; d];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    Tensor::vector(out.into_iter().map(|v| v / rows as f64).collect())
}

/// Mean of the members of class `k` on the tape; `bank` is the registered
/// `[K, N * J, D]` parameter.
pub fn class_prototype_on(tape: &mut Tape, bank: Var, k: usize) -> Result<Var> {
    let members = tape.row(bank, k)?;
    tape.reduce_mean(members, 0)
}

/// Diagonal Gaussian summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianStats {
    pub fn new(mu: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mu.len() != var.len() {
            return dim_err(format!(
                "mean of length {} with {} variances",
                mu.len(),
                var.len()
            ));
        }
        if var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Domain("variances must be non-negative".into()));
        }
        Ok(Self { mu, var })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Stats as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct StatsVars {
    pub mu: Var,
    pub var: Var,
}

impl StatsVars {
    pub fn constant(tape: &mut Tape, s: &GaussianStats) -> Self {
        Self {
            mu: tape.constant(Tensor::vector(s.mu.clone())),
            var: tape.constant(Tensor::vector(s.var.clone())),
        }
    }

    pub fn value(&self, tape: &Tape) -> GaussianStats {
        GaussianStats {
            mu: tape.value(self.mu).data().to_vec(),
            var: tape.value(self.var).data().to_vec(),
        }
    }
}

/// Column mean and floored population variance of an `[S, D]` sample
/// matrix.
pub fn estimate_stats_on(tape: &mut Tape, samples: Var) -> Result<StatsVars> {
    let shape = tape.try_value(samples)?.shape().to_vec();
    if shape.len() != 2 {
        return dim_err(format!("samples must be [S, D], got {shape:?}"));
    }
    if shape[0] == 0 {
        return Err(Error::EmptyInput(
            "cannot estimate stats from zero samples".into(),
        ));
    }
    let mu = tape.reduce_mean(samples, 0)?;
    let var = tape.reduce_var(samples, 0)?;
    let var = tape.clamp_min(var, VAR_FLOOR)?;
    Ok(StatsVars { mu, var })
}

pub fn estimate_stats(samples: &Tensor) -> Result<GaussianStats> {
    if samples.rank() == 2 && samples.shape()[0] == 0 {
        return Err(Error::EmptyInput(
            "cannot estimate stats from zero samples".into(),
        ));
    }
    let mut tape = Tape::new();
    let s = tape.constant(samples.clone());
    let st = estimate_stats_on(&mut tape, s)?;
    Ok(st.value(&tape))
}

/// Stacks `D`-vectors into an `[S, D]` sample matrix.
pub fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
    let Some(first) = rows.first() else {
        return Err(Error::EmptyInput("no rows to stack".into()));
    };
    let d = first.numel();
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.numel() != d {
            return dim_err("rows of unequal length");
        }
        data.extend_from_slice(r.data());
    }
    Tensor::new(vec![rows.len(), d], data)
}

/// `|mu_a - mu_b|^2 + sum_d (sqrt(var_a) - sqrt(var_b))^2` on the tape.
pub fn emd_upper_bound_on(tape: &mut Tape, a: StatsVars, b: StatsVars) -> Result<Var> {
    let dm = tape.sub(a.mu, b.mu)?;
    let dm = tape.square(dm)?;
    let dm = tape.reduce_sum(dm, 0)?;
    let sa = tape.sqrt(a.var)?;
    let sb = tape.sqrt(b.var)?;
    let ds = tape.sub(sa, sb)?;
    let ds = tape.square(ds)?;
    let ds = tape.reduce_sum(ds, 0)?;
    tape.add(dm, ds)
}

pub fn emd_upper_bound(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return dim_err(format!("stats of dimension {} and {}", a.dim(), b.dim()));
    }
    let mut tape = Tape::new();
    let av = StatsVars::constant(&mut tape, a);
    let bv = StatsVars::constant(&mut tape, b);
    let out = emd_upper_bound_on(&mut tape, av, bv)?;
    Ok(tape.value(out).item())
}

/// Normalized inverse distances from `z` to each prototype.
pub fn weighting(z: &Tensor, prototypes: &[Tensor]) -> Result<Vec<f64>> {
    if prototypes.is_empty() {
        return Err(Error::State("no prototypes to weight against".into()));
    }
    let mut d = Vec::with_capacity(prototypes.len());
    for p in prototypes {
        if p.numel() != z.numel() {
            return dim_err(format!("feature {} vs prototype {}", z.numel(), p.numel()));
        }
        let dist = z
            .data()
            .iter()
            .zip(p.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        d.push(1.0 / (dist + DISTANCE_GUARD));
    }
    let total: f64 = d.iter().sum();
    Ok(d.into_iter().map(|v| v / total).collect())
}

/// Weighting against the bank's class prototypes.
pub fn bank_weighting(z: &Tensor, bank: &VlpBank) -> Result<Vec<f64>> {
    weighting(z, &bank.prototypes()?)
}

/// `sum_k w_k p_k`.
pub fn weighted_prototype(weights: &[f64], prototypes: &[Tensor]) -> Result<Tensor> {
    if weights.len() != prototypes.len() || prototypes.is_empty() {
        return dim_err("weights and prototypes differ in count");
    }
    let mut out = vec![0.0; prototypes[0].numel()];
    for (w, p) in weights.iter().zip(prototypes) {
        for (o, v) in out.iter_mut().zip(p.data()) {
            *o += w * v;
        }
    }
    Ok(Tensor::vector(out))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return config_err(format!("calibration ratio must lie in [0, 1], got {alpha}"));
    }
    Ok(())
}

/// `(1 - alpha) z + alpha target`.
pub fn calibrate(z: &Tensor, target: &Tensor, alpha: f64) -> Result<Tensor> {
    check_alpha(alpha)?;
    if z.shape() != target.shape() {
        return dim_err(format!(
            "calibrating {:?} toward {:?}",
            z.shape(),
            target.shape()
        ));
    }
    let data = z
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (1.0 - alpha) * a + alpha * b)
        .collect();
    Tensor::new(z.shape().to_vec(), data)
}

pub fn calibrate_on(tape: &mut Tape, z: Var, target: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    if alpha == 0.0 {
        return Ok(z);
    }
    let a = tape.scale(z, 1.0 - alpha)?;
    let b = tape.scale(target, alpha)?;
    tape.add(a, b)
}

/// One row of the per-class stats export.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStatsRow {
    pub class: usize,
    pub vision: GaussianStats,
    pub language: GaussianStats,
    pub bound: f64,
}

pub const STATS_CSV_HEADER: &str =
    "class,vision_mu_norm,vision_mean_var,language_mu_norm,language_mean_var,bound";

pub fn write_stats_csv<W: Write>(out: &mut W, rows: &[ClassStatsRow]) -> Result<()> {
    writeln!(out, "{STATS_CSV_HEADER}")?;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.class,
            norm(&r.vision.mu),
            mean(&r.vision.var),
            norm(&r.language.mu),
            mean(&r.language.var),
            r.bound
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
