//! Two-layer ReLU networks `f(x; W) = (1/√m) Σ_r b_r σ(W_rᵀ x)` with
//! symmetric initialization.
//!
//! Parameters are flattened block by block: entry `r·d + j` is `[W_r]_j`.
//! Output weights `b` are fixed to `+1` on the first half of the neurons and
//! `−1` on the second half, and `W_init` duplicates its first half into the
//! second, so the output at initialization is exactly zero. The forward pass
//! sums each pair `(r, r + m/2)` before accumulating to keep that exact.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta_sl::SlModel;
use crate::policy::{EnergyModel, FeatureMap};

/// Slack allowed on `‖x‖₂ ≤ 1` for network inputs.
const INPUT_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetDocument", into = "NetDocument")]
pub struct TwoLayerNet {
    m: usize,
    d: usize,
    b: DVector<f64>,
    w: DVector<f64>,
    w_init: DVector<f64>,
}

/// JSON form: either a seed to rebuild from, or explicit weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetDocument {
    Seeded(SeededNet),
    Explicit(ExplicitNet),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeededNet {
    pub m: usize,
    pub d: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitNet {
    pub b: Vec<f64>,
    /// One row per neuron.
    pub w: Vec<Vec<f64>>,
    pub w_init: Vec<Vec<f64>>,
}

impl TryFrom<NetDocument> for TwoLayerNet {
    type Error = Error;

    fn try_from(doc: NetDocument) -> Result<Self> {
        match doc {
            NetDocument::Seeded(s) => init_symmetric(s.m, s.d, s.seed),
            NetDocument::Explicit(e) => TwoLayerNet::from_parts(e),
        }
    }
}

impl From<TwoLayerNet> for NetDocument {
    fn from(net: TwoLayerNet) -> Self {
        let rows = |v: &DVector<f64>| {
            (0..net.m)
                .map(|r| v.rows(r * net.d, net.d).iter().copied().collect())
                .collect()
        };
        NetDocument::Explicit(ExplicitNet {
            b: net.b.iter().copied().collect(),
            w: rows(&net.w),
            w_init: rows(&net.w_init),
        })
    }
}

/// Paired Gaussian initialization `[W_init]_r = [W_init]_{r+m/2} ∼ N(0, I_d/d)`.
pub fn init_symmetric(m: usize, d: usize, seed: u64) -> Result<TwoLayerNet> {
    if m < 2 || m % 2 != 0 {
        return Err(Error::OddWidth(m));
    }
    if d == 0 {
        return Err(Error::InvalidArgument("input dimension must be positive".into()));
    }
    let half = m / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (d as f64).sqrt();
    let mut w_init = DVector::zeros(m * d);
    for r in 0..half {
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            w_init[r * d + j] = z * scale;
            w_init[(r + half) * d + j] = z * scale;
        }
    }
    let b = DVector::from_fn(m, |r, _| if r < half { 1.0 } else { -1.0 });
    Ok(TwoLayerNet {
        m,
        d,
        b,
        w: w_init.clone(),
        w_init,
    })
}

impl TwoLayerNet {
    fn from_parts(e: ExplicitNet) -> Result<Self> {
        let m = e.b.len();
        if m < 2 || m % 2 != 0 {
            return Err(Error::OddWidth(m));
        }
        let half = m / 2;
        if e.b.iter().enumerate().any(|(r, v)| *v != if r < half { 1.0 } else { -1.0 }) {
            return Err(Error::InvalidArgument(
                "output weights must be +1 on the first half and −1 on the second".into(),
            ));
        }
        let d = e.w.first().map_or(0, Vec::len);
        if d == 0
            || e.w.len() != m
            || e.w_init.len() != m
            || e.w.iter().chain(e.w_init.iter()).any(|row| row.len() != d)
        {
            return Err(Error::DimensionMismatch(format!(
                "w and w_init must be {m} rows of equal positive length"
            )));
        }
        for r in 0..half {
            if e.w_init[r] != e.w_init[r + half] {
                return Err(Error::InvalidArgument(format!(
                    "w_init rows {r} and {} must be equal",
                    r + half
                )));
            }
        }
        let flat = |rows: &[Vec<f64>]| DVector::from_iterator(m * d, rows.iter().flatten().copied());
        let w = flat(&e.w);
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network weights".into()));
        }
        Ok(TwoLayerNet {
            m,
            d,
            b: DVector::from_vec(e.b),
            w,
            w_init: flat(&e.w_init),
        })
    }

    pub fn width(&self) -> usize {
        self.m
    }

    pub fn input_dim(&self) -> usize {
        self.d
    }

    pub fn n_params(&self) -> usize {
        self.m * self.d
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    /// Current flattened weights.
    pub fn params(&self) -> &DVector<f64> {
        &self.w
    }

    pub fn w_init(&self) -> &DVector<f64> {
        &self.w_init
    }

    /// Same network with different current weights.
    pub fn with_params(&self, w: DVector<f64>) -> Result<Self> {
        self.check_params(&w)?;
        Ok(Self {
            w,
            ..self.clone()
        })
    }

    fn check_params(&self, w: &DVector<f64>) -> Result<()> {
        if w.len() != self.n_params() {
            return Err(Error::DimensionMismatch(format!(
                "parameter vector has length {}, expected {}",
                w.len(),
                self.n_params()
            )));
        }
        Ok(())
    }

    fn pre_activation(&self, w: &DVector<f64>, r: usize, x: &[f64]) -> f64 {
        let block = &w.as_slice()[r * self.d..(r + 1) * self.d];
        block.iter().zip(x).map(|(a, b)| a * b).sum()
    }

    /// `f(x; W)` at the given weights.
    pub fn forward_with(&self, w: &DVector<f64>, x: &[f64]) -> f64 {
        let half = self.m / 2;
        let mut total = 0.0;
        for r in 0..half {
            let hi = r + half;
            let a = self.b[r] * self.pre_activation(w, r, x).max(0.0);
            let c = self.b[hi] * self.pre_activation(w, hi, x).max(0.0);
            total += a + c;
        }
        total / (self.m as f64).sqrt()
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        self.forward_with(&self.w, x)
    }

    /// `[φ_W(x)]_r = (b_r/√m)·x·1{W_rᵀx > 0}`.
    pub fn feature_with(&self, w: &DVector<f64>, x: &[f64]) -> DVector<f64> {
        let scale = 1.0 / (self.m as f64).sqrt();
        let mut phi = DVector::zeros(self.n_params());
        for r in 0..self.m {
            if self.pre_activation(w, r, x) > 0.0 {
                let coef = self.b[r] * scale;
                for j in 0..self.d {
                    phi[r * self.d + j] = coef * x[j];
                }
            }
        }
        phi
    }

    pub fn feature(&self, x: &[f64]) -> DVector<f64> {
        self.feature_with(&self.w, x)
    }

    /// `f(x_k; W)` for every row `x_k` of `inputs`.
    pub fn forward_on(&self, w: &DVector<f64>, inputs: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_fn(inputs.nrows(), |k, _| {
            let x: Vec<f64> = inputs.row(k).iter().copied().collect();
            self.forward_with(w, &x)
        })
    }

    /// One feature row `φ_W(x_k)ᵀ` per input row.
    pub fn features_on(&self, w: &DVector<f64>, inputs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(inputs.nrows(), self.n_params());
        for k in 0..inputs.nrows() {
            let x: Vec<f64> = inputs.row(k).iter().copied().collect();
            out.set_row(k, &self.feature_with(w, &x).transpose());
        }
        out
    }
}

/// A network evaluated on a fixed finite input set, usable as an energy
/// (inputs are state-action embeddings) or as a hypothesis (inputs are domain points).
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralModel {
    net: TwoLayerNet,
    inputs: DMatrix<f64>,
    n_states: usize,
    n_actions: usize,
}

impl NeuralModel {
    fn new(net: TwoLayerNet, inputs: DMatrix<f64>, n_states: usize, n_actions: usize) -> Result<Self> {
        if inputs.ncols() != net.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "inputs have dimension {}, network expects {}",
                inputs.ncols(),
                net.input_dim()
            )));
        }
        if let Some(k) = inputs.row_iter().position(|x| x.norm() > 1.0 + INPUT_SLACK) {
            return Err(Error::InvalidArgument(format!("input {k} has norm above 1")));
        }
        Ok(Self {
            net,
            inputs,
            n_states,
            n_actions,
        })
    }

    /// Energy `f((s, a); W)` with the state-action embedding taken from `features`.
    pub fn for_pairs(net: TwoLayerNet, features: &FeatureMap) -> Result<Self> {
        Self::new(
            net,
            features.table().clone(),
            features.n_states(),
            features.n_actions(),
        )
    }

    /// Hypothesis `h(x) = f(x; W)` over a finite domain.
    pub fn for_domain(net: TwoLayerNet, domain: &DMatrix<f64>) -> Result<Self> {
        let n = domain.nrows();
        Self::new(net, domain.clone(), n, 1)
    }

    pub fn net(&self) -> &TwoLayerNet {
        &self.net
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    /// Rows `φ_W(x_k)ᵀ`.
    pub fn features_at(&self, w: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.net.check_params(w)?;
        Ok(self.net.features_on(w, &self.inputs))
    }

    pub fn outputs_at(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        self.net.check_params(w)?;
        Ok(self.net.forward_on(w, &self.inputs))
    }
}

impl EnergyModel for NeuralModel {
    fn n_params(&self) -> usize {
        self.net.n_params()
    }

    fn n_states(&self) -> usize {
        self.n_states
    }

    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn energy(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.outputs_at(theta)
    }

    fn jacobian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.features_at(theta)
    }
}

impl SlModel for NeuralModel {
    fn n_params(&self) -> usize {
        self.net.n_params()
    }

    fn predict(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.outputs_at(theta)
    }

    fn jacobian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.features_at(theta)
    }
}

/// Measured deviation between two linearizations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearizationError {
    /// `‖φ_{ω₀}ᵀω₂ − φ_{ω₁}ᵀω₂‖²_{L₂(μ)}`.
    pub value: f64,
    /// `max_j ‖ω_j − W_init‖₂`.
    pub max_displacement: f64,
    /// Whether any parameter lies outside the stated ball around `W_init`.
    pub outside_ball: bool,
}

/// Squared `L₂(measure)` gap between the linearizations at `ω₀` and `ω₁`,
/// both applied to `ω₂`, over the rows of `inputs`.
pub fn linearization_error(
    net: &TwoLayerNet,
    omega0: &DVector<f64>,
    omega1: &DVector<f64>,
    omega2: &DVector<f64>,
    inputs: &DMatrix<f64>,
    measure: &DVector<f64>,
    radius: f64,
) -> Result<LinearizationError> {
    for w in [omega0, omega1, omega2] {
        net.check_params(w)?;
    }
    if inputs.nrows() != measure.len() || inputs.ncols() != net.input_dim() {
        return Err(Error::DimensionMismatch(
            "inputs and measure must agree with each other and the network".into(),
        ));
    }
    let mut value = 0.0;
    for k in 0..inputs.nrows() {
        let x: Vec<f64> = inputs.row(k).iter().copied().collect();
        let gap = net.feature_with(omega0, &x).dot(omega2) - net.feature_with(omega1, &x).dot(omega2);
        value += measure[k] * gap * gap;
    }
    let max_displacement = [omega0, omega1, omega2]
        .iter()
        .map(|w| (*w - &net.w_init).norm())
        .fold(0.0, f64::max);
    Ok(LinearizationError {
        value,
        max_displacement,
        outside_ball: max_displacement > radius * (1.0 + 1e-12),
    })
}

/// Perturbations of norm `radius` around `W_init` that maximize the activation
/// flips at `x_star`: `ω₁ = W_init`, `ω₀` pushes every neuron toward its kink
/// along `x_star`, and `ω₂` loads its whole budget on the flipped neurons with
/// signs matching their change in activation.
pub fn adversarial_perturbations(
    net: &TwoLayerNet,
    x_star: &[f64],
    radius: f64,
) -> Result<[DVector<f64>; 3]> {
    if x_star.len() != net.d {
        return Err(Error::DimensionMismatch(format!(
            "x_star has dimension {}, network expects {}",
            x_star.len(),
            net.d
        )));
    }
    let norm = x_star.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidArgument("x_star must be non-zero".into()));
    }
    let dir: Vec<f64> = x_star.iter().map(|v| v / norm).collect();
    let w1 = net.w_init.clone();
    let step = radius / (net.m as f64).sqrt();
    let mut w0 = w1.clone();
    for r in 0..net.m {
        let sign = if net.pre_activation(&w1, r, x_star) > 0.0 { 1.0 } else { -1.0 };
        for j in 0..net.d {
            w0[r * net.d + j] -= sign * step * dir[j];
        }
    }
    let flips: Vec<(usize, f64)> = (0..net.m)
        .filter_map(|r| {
            let before = (net.pre_activation(&w1, r, x_star) > 0.0) as i32 as f64;
            let after = (net.pre_activation(&w0, r, x_star) > 0.0) as i32 as f64;
            (after != before).then_some((r, after - before))
        })
        .collect();
    let mut w2 = w1.clone();
    if !flips.is_empty() {
        let load = radius / (flips.len() as f64).sqrt();
        for (r, change) in flips {
            for j in 0..net.d {
                w2[r * net.d + j] += load * net.b[r] * change * dir[j];
            }
        }
    }
    Ok([w0, w1, w2])
}
