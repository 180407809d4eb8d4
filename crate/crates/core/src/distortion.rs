//! Distortion checks on small fully-connected ReLU nets.
//!
//! `f(x) = W_d relu(W_{d-1} relu(... relu(W_1 x)))`, no activation after the
//! last layer. Pruning layer `i` to `M ⊙ W_i` moves the output of any `x` in
//! the unit ball by at most
//!
//! ```text
//! ||W_i - M ⊙ W_i||_F / ||W_i||_F * prod_j ||W_j||_F
//! ```
//!
//! because ReLU is 1-Lipschitz with `relu(0) = 0` and every matrix satisfies
//! `||A|| <= ||A||_F`. The functions here measure both sides of that bound,
//! brute-force the Frobenius-optimal mask, and run the one-at-a-time greedy
//! removal procedure that LAMP scores shortcut.

use bitvec::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exact::{ExactSquares, MAX_ENUMERATION};
use crate::model_io::{LayerKind, ModelBundle};
use crate::scoring::{lamp_scores_sorted, sort_indices, ScoreError};

/// Largest matrix the Frobenius oracle will enumerate.
pub const MAX_ORACLE_ENTRIES: usize = 20;
/// Largest bundle the greedy oracle accepts.
pub const MAX_GREEDY_WEIGHTS: usize = 10_000;
pub const SPECTRAL_REL_TOL: f64 = 1e-8;
/// Absolute slack allowed on the peeling bound.
pub const PEELING_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DistortionError {
    #[error("DimMismatch: {0}")]
    DimMismatch(String),
    #[error("NoConvergence: power iteration stopped at estimate {estimate}")]
    NoConvergence { estimate: f64 },
    #[error("TooLarge: {0}")]
    TooLarge(String),
    #[error("InfeasibleBudget: {0}")]
    InfeasibleBudget(String),
    #[error("NotFullyConnected: layer `{0}`")]
    NotFullyConnected(String),
    #[error("layer `{layer}`: {source}")]
    Score {
        layer: String,
        #[source]
        source: ScoreError,
    },
}

impl DistortionError {
    pub fn name(&self) -> &'static str {
        match self {
            DistortionError::DimMismatch(_) => "DimMismatch",
            DistortionError::NoConvergence { .. } => "NoConvergence",
            DistortionError::TooLarge(_) => "TooLarge",
            DistortionError::InfeasibleBudget(_) => "InfeasibleBudget",
            DistortionError::NotFullyConnected(_) => "NotFullyConnected",
            DistortionError::Score { source, .. } => source.name(),
        }
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Self {
        Matrix::new(rows, cols, data.iter().map(|&w| f64::from(w)).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.data
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn transpose_matvec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * yr;
            }
        }
        out
    }

    /// Zeroes the entries whose bit is cleared.
    pub fn masked(&self, mask: &BitSlice<u8, Lsb0>) -> Matrix {
        assert_eq!(mask.len(), self.data.len(), "mask length");
        let data = self
            .data
            .iter()
            .zip(mask.iter().by_vals())
            .map(|(&w, keep)| if keep { w } else { 0.0 })
            .collect();
        Matrix::new(self.rows, self.cols, data)
    }

    fn sub(&self, other: &Matrix) -> Matrix {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix::new(self.rows, self.cols, data)
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn relu(v: &mut [f64]) {
    for x in v {
        *x = x.max(0.0);
    }
}

/// Fully-connected ReLU net.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Matrix>,
}

impl DenseNet {
    pub fn new(layers: Vec<Matrix>) -> Result<Self, DistortionError> {
        if layers.is_empty() {
            return Err(DistortionError::DimMismatch("net has no layers".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].cols != pair[0].rows {
                return Err(DistortionError::DimMismatch(format!(
                    "layer {} outputs {} values, layer {} takes {}",
                    i,
                    pair[0].rows,
                    i + 1,
                    pair[1].cols
                )));
            }
        }
        Ok(DenseNet { layers })
    }

    /// Uses every layer of `bundle`; all must be fully connected.
    pub fn from_bundle(bundle: &ModelBundle) -> Result<Self, DistortionError> {
        let layers = bundle
            .layers()
            .iter()
            .map(|l| match l.spec.kind {
                LayerKind::FullyConnected => Ok(Matrix::from_f32(
                    l.spec.shape[0],
                    l.spec.shape[1],
                    &l.weights,
                )),
                LayerKind::Conv2d => Err(DistortionError::NotFullyConnected(l.spec.name.clone())),
            })
            .collect::<Result<_, _>>()?;
        DenseNet::new(layers)
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].rows
    }

    /// Copy of the net with layer `i` replaced.
    pub fn with_layer(&self, i: usize, m: Matrix) -> Result<Self, DistortionError> {
        let mut layers = self.layers.clone();
        layers[i] = m;
        DenseNet::new(layers)
    }
}

pub fn forward(net: &DenseNet, x: &[f64]) -> Result<Vec<f64>, DistortionError> {
    if x.len() != net.input_dim() {
        return Err(DistortionError::DimMismatch(format!(
            "input has {} values, net takes {}",
            x.len(),
            net.input_dim()
        )));
    }
    let last = net.depth() - 1;
    let mut h = x.to_vec();
    for (i, w) in net.layers.iter().enumerate() {
        h = w.matvec(&h);
        if i < last {
            relu(&mut h);
        }
    }
    Ok(h)
}

/// Frobenius norm with f64 accumulation.
pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn unit_vector(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let len = norm2(&v);
        if len > 0.0 {
            return v.into_iter().map(|x| x / len).collect();
        }
    }
}

/// Power iteration on `AᵀA` from a seed-derived start vector.
pub fn power_iteration(m: &Matrix, seed: u64) -> SpectralEstimate {
    if m.data.iter().all(|&x| x == 0.0) {
        return SpectralEstimate {
            value: 0.0,
            iterations: 0,
            converged: true,
        };
    }
    let max_iter = 10 * m.rows.max(m.cols);
    let mut v = unit_vector(m.cols, seed);
    let mut lambda = 0.0f64;
    let mut best = 0.0f64;
    for it in 1..=max_iter {
        let av = m.matvec(&v);
        let next = av.iter().map(|x| x * x).sum::<f64>();
        best = best.max(next);
        let w = m.transpose_matvec(&av);
        let len = norm2(&w);
        if len == 0.0 {
            // v landed in the null space; the estimate so far stands.
            return SpectralEstimate {
                value: best.sqrt(),
                iterations: it,
                converged: false,
            };
        }
        v = w.into_iter().map(|x| x / len).collect();
        if it > 1 && (next - lambda).abs() <= SPECTRAL_REL_TOL * next {
            return SpectralEstimate {
                value: next.sqrt(),
                iterations: it,
                converged: true,
            };
        }
        lambda = next;
    }
    SpectralEstimate {
        value: best.sqrt(),
        iterations: max_iter,
        converged: false,
    }
}

/// Spectral norm to relative tolerance `1e-8`, restarting once from a second
/// seed before giving up.
pub fn spectral_norm(m: &Matrix) -> Result<f64, DistortionError> {
    let first = power_iteration(m, 0);
    if first.converged {
        return Ok(first.value);
    }
    let second = power_iteration(m, 1);
    if second.converged {
        return Ok(second.value);
    }
    Err(DistortionError::NoConvergence {
        estimate: first.value.max(second.value),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrobeniusCheck {
    pub kappa: usize,
    pub mp_distortion: f64,
    pub oracle_distortion: f64,
    /// MP's pruned squares sum to exactly the brute-force minimum.
    pub optimal: bool,
}

fn frobenius_precheck(weights: &[f32]) -> Result<ExactSquares, DistortionError> {
    if weights.len() > MAX_ORACLE_ENTRIES.min(MAX_ENUMERATION) {
        return Err(DistortionError::TooLarge(format!(
            "{} entries, brute force handles at most {MAX_ORACLE_ENTRIES}",
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
        return Err(DistortionError::DimMismatch(format!("non-finite entry {w}")));
    }
    Ok(ExactSquares::new(weights))
}

/// Compares MP's mask against every mask with `kappa` ones, for all `kappa`.
///
/// Both sides are exact integer sums of the pruned squares, so `optimal` is
/// an exact comparison.
pub fn frobenius_oracle_all(weights: &[f32]) -> Result<Vec<FrobeniusCheck>, DistortionError> {
    let squares = frobenius_precheck(weights)?;
    let n = weights.len();
    let order = sort_indices(weights);
    // Pruning n - kappa entries: the minimum over pruned sets of that size.
    let min_pruned = squares.min_sums_by_size();
    Ok((0..=n)
        .map(|kappa| {
            let pruned = n - kappa;
            let mp = squares.subset_sum(order.order()[..pruned].iter().copied());
            let oracle = &min_pruned[pruned];
            FrobeniusCheck {
                kappa,
                mp_distortion: squares.to_f64(&mp).sqrt(),
                oracle_distortion: squares.to_f64(oracle).sqrt(),
                optimal: &mp == oracle,
            }
        })
        .collect())
}

/// Frobenius distortion of layerwise MP versus the brute-force optimum over
/// all masks keeping exactly `kappa` entries.
pub fn mp_frobenius_optimality_check(
    weights: &[f32],
    kappa: usize,
) -> Result<FrobeniusCheck, DistortionError> {
    if kappa > weights.len() {
        return Err(DistortionError::InfeasibleBudget(format!(
            "kappa {kappa} > {} entries",
            weights.len()
        )));
    }
    let squares = frobenius_precheck(weights)?;
    let n = weights.len();
    let order = sort_indices(weights);
    let mp = squares.subset_sum(order.order()[..n - kappa].iter().copied());
    // Gosper's hack over the pruned sets of size n - kappa.
    let pruned = n - kappa;
    let mut best = None;
    let mut subset: u64 = (1u64 << pruned) - 1;
    let limit = 1u64 << n;
    while subset < limit {
        let sum = squares.subset_sum((0..n).filter(|&i| subset >> i & 1 == 1));
        if best.as_ref().is_none_or(|b| &sum < b) {
            best = Some(sum);
        }
        if subset == 0 {
            break;
        }
        let c = subset & subset.wrapping_neg();
        let r = subset + c;
        subset = (((r ^ subset) >> 2) / c) | r;
    }
    let oracle = best.expect("at least one subset");
    Ok(FrobeniusCheck {
        kappa,
        mp_distortion: squares.to_f64(&mp).sqrt(),
        oracle_distortion: squares.to_f64(&oracle).sqrt(),
        optimal: mp == oracle,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionReport {
    /// Index of the pruned layer.
    pub layer: usize,
    /// Largest output distortion seen over the sampled unit inputs.
    pub empirical_distortion_lower_bound: f64,
    pub bound_rhs: f64,
    /// `bound_rhs - empirical_distortion_lower_bound`.
    pub slack: f64,
    pub samples: usize,
    pub basis_vectors: usize,
    pub seed: u64,
    pub holds: bool,
}

/// Sample `k` of a run seeded with `seed`: its own ChaCha stream, so results
/// do not depend on how samples are split across threads.
pub fn sample_rng(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

fn unit_sphere_sample(dim: usize, seed: u64, k: u64) -> Vec<f64> {
    let mut rng = sample_rng(seed, k);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let len = norm2(&v);
        if len > 0.0 {
            return v.into_iter().map(|x| x / len).collect();
        }
    }
}

/// Prunes `layer` with `mask` and measures output distortion over `samples`
/// uniform unit inputs plus every canonical basis vector.
pub fn peeling_bound_check(
    net: &DenseNet,
    layer: usize,
    mask: &BitSlice<u8, Lsb0>,
    samples: usize,
    seed: u64,
) -> Result<DistortionReport, DistortionError> {
    if layer >= net.depth() {
        return Err(DistortionError::DimMismatch(format!(
            "layer {layer} of a depth-{} net",
            net.depth()
        )));
    }
    let original = &net.layers[layer];
    if mask.len() != original.data.len() {
        return Err(DistortionError::DimMismatch(format!(
            "mask has {} bits, layer has {} weights",
            mask.len(),
            original.data.len()
        )));
    }
    if samples == 0 {
        return Err(DistortionError::DimMismatch("need at least one sample".into()));
    }
    let pruned_layer = original.masked(mask);
    let pruned = net.with_layer(layer, pruned_layer.clone())?;

    let layer_norm = frobenius_norm(original);
    let ratio = if layer_norm == 0.0 {
        0.0
    } else {
        frobenius_norm(&original.sub(&pruned_layer)) / layer_norm
    };
    let product: f64 = net.layers.iter().map(frobenius_norm).product();
    let bound_rhs = ratio * product;

    let dim = net.input_dim();
    let distortion = |x: &[f64]| -> f64 {
        let a = forward(net, x).expect("dims checked");
        let b = forward(&pruned, x).expect("dims checked");
        a.iter()
            .zip(&b)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt()
    };
    let sampled = (0..samples as u64)
        .into_par_iter()
        .map(|k| distortion(&unit_sphere_sample(dim, seed, k)))
        .reduce(|| 0.0, f64::max);
    let basis = (0..dim)
        .map(|j| {
            let mut e = vec![0.0; dim];
            e[j] = 1.0;
            distortion(&e)
        })
        .fold(0.0, f64::max);
    let empirical = sampled.max(basis);
    Ok(DistortionReport {
        layer,
        empirical_distortion_lower_bound: empirical,
        bound_rhs,
        slack: bound_rhs - empirical,
        samples,
        basis_vectors: dim,
        seed,
        holds: empirical <= bound_rhs + PEELING_TOLERANCE,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub layer: usize,
    pub index: usize,
    /// `W[u]^2 / sum of surviving W[v]^2` in the layer at removal time.
    pub damage: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RemovalTrace {
    pub removals: Vec<Removal>,
}

impl RemovalTrace {
    pub fn order(&self) -> Vec<(usize, usize)> {
        self.removals.iter().map(|r| (r.layer, r.index)).collect()
    }
}

fn check_removal_budget(bundle: &ModelBundle, remove: usize) -> Result<(), DistortionError> {
    let total = bundle.prunable_total();
    if remove > total {
        return Err(DistortionError::InfeasibleBudget(format!(
            "cannot remove {remove} of {total} prunable weights"
        )));
    }
    Ok(())
}

/// Removes `remove` connections one at a time, rescoring every surviving
/// connection against the pruned model before each removal.
///
/// The common factor `prod_j ||W_j||_F` is dropped from the damage. Equal
/// damages go to the later layer, then the smaller magnitude, then the smaller
/// flat index: the reverse of the order in which allocation keeps weights.
pub fn greedy_removal_oracle(
    bundle: &ModelBundle,
    remove: usize,
) -> Result<RemovalTrace, DistortionError> {
    check_removal_budget(bundle, remove)?;
    if bundle.prunable_total() > MAX_GREEDY_WEIGHTS {
        return Err(DistortionError::TooLarge(format!(
            "{} prunable weights, the greedy oracle handles at most {MAX_GREEDY_WEIGHTS}",
            bundle.prunable_total()
        )));
    }
    struct State<'a> {
        layer: usize,
        weights: &'a [f32],
        // Survivors are summed from the largest magnitude down, the same
        // accumulation order the suffix-sum scores use, so equal sets give
        // bit-equal sums.
        descending: Vec<usize>,
        alive: Vec<bool>,
    }
    let mut states: Vec<State> = bundle
        .prunable_indices()
        .into_iter()
        .map(|i| {
            let weights = bundle.layer(i).weights.as_slice();
            let mut descending: Vec<usize> = (0..weights.len()).collect();
            descending.sort_by(|&a, &b| {
                weights[b]
                    .abs()
                    .total_cmp(&weights[a].abs())
                    .then(b.cmp(&a))
            });
            State {
                layer: i,
                weights,
                descending,
                alive: vec![true; weights.len()],
            }
        })
        .collect();

    let sq = |w: f32| f64::from(w) * f64::from(w);
    let mut trace = RemovalTrace::default();
    for _ in 0..remove {
        // (damage, layer, magnitude, index, state slot)
        let mut best: Option<(f64, usize, f32, usize, usize)> = None;
        for (slot, st) in states.iter().enumerate() {
            let total: f64 = st
                .descending
                .iter()
                .filter(|&&u| st.alive[u])
                .fold(0.0, |acc, &u| acc + sq(st.weights[u]));
            for (u, &w) in st.weights.iter().enumerate() {
                if !st.alive[u] {
                    continue;
                }
                let num = sq(w);
                let damage = if num == 0.0 { 0.0 } else { num / total };
                let candidate = (damage, st.layer, w.abs(), u, slot);
                let better = match best {
                    None => true,
                    Some((bd, bl, bm, bu, _)) => damage
                        .total_cmp(&bd)
                        .then(bl.cmp(&st.layer))
                        .then(w.abs().total_cmp(&bm))
                        .then(u.cmp(&bu))
                        .is_lt(),
                };
                if better {
                    best = Some(candidate);
                }
            }
        }
        let (damage, layer, _, index, slot) = best.expect("budget checked");
        states[slot].alive[index] = false;
        trace.removals.push(Removal {
            layer,
            index,
            damage,
        });
    }
    Ok(trace)
}

/// First `remove` connections in ascending order of LAMP scores computed once
/// on the unpruned bundle.
pub fn lamp_removal_order(
    bundle: &ModelBundle,
    remove: usize,
) -> Result<Vec<(usize, usize)>, DistortionError> {
    check_removal_budget(bundle, remove)?;
    // (score, layer, rank, flat index)
    let mut entries: Vec<(f64, usize, usize, usize)> = Vec::with_capacity(bundle.prunable_total());
    for i in bundle.prunable_indices() {
        let layer = bundle.layer(i);
        let sorted = sort_indices(&layer.weights);
        let scores = lamp_scores_sorted(&layer.weights, None, &sorted).map_err(|source| {
            DistortionError::Score {
                layer: layer.spec.name.clone(),
                source,
            }
        })?;
        for (rank, &u) in sorted.order().iter().enumerate() {
            entries.push((scores.values[u], i, rank, u));
        }
    }
    entries.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(b.1.cmp(&a.1))
            .then(a.2.cmp(&b.2))
    });
    Ok(entries
        .into_iter()
        .take(remove)
        .map(|(_, layer, _, u)| (layer, u))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: usize,
    pub greedy: (usize, usize),
    pub lamp: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equivalence {
    pub equal: bool,
    pub steps: usize,
    pub first_divergence: Option<Divergence>,
}

/// Runs the greedy oracle and compares its removal order with the LAMP order.
pub fn lamp_greedy_equivalence_check(
    bundle: &ModelBundle,
    remove: usize,
) -> Result<Equivalence, DistortionError> {
    let greedy = greedy_removal_oracle(bundle, remove)?.order();
    let lamp = lamp_removal_order(bundle, remove)?;
    let first_divergence = greedy
        .iter()
        .zip(&lamp)
        .position(|(g, l)| g != l)
        .map(|step| Divergence {
            step,
            greedy: greedy[step],
            lamp: lamp[step],
        });
    Ok(Equivalence {
        equal: first_divergence.is_none(),
        steps: remove,
        first_divergence,
    })
}
