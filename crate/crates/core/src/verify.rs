//! Randomized property suites behind `lamp verify`.
//!
//! Trial `t` of a run draws from its own ChaCha stream derived from the seed,
//! so outcomes are independent of thread count. The first failing trial (in
//! trial order) is reported as the counterexample.

use std::fmt;

use bitvec::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{allocate_erk, erk_factor, SparsityBudget};
use crate::distortion::{
    frobenius_oracle_all, lamp_greedy_equivalence_check, peeling_bound_check, sample_rng,
};
use crate::model_io::ModelBundle;
use crate::random::{self, BundleShape};
use crate::scoring::lamp_scores;

pub const MONOTONICITY_MAX_LAYER: usize = 10_000;
pub const GREEDY_MAX_WEIGHTS: usize = 2_000;
pub const PEELING_SAMPLES: usize = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Monotonicity,
    GreedyEquivalence,
    FrobeniusOracle,
    PeelingBound,
    ErkReduction,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Monotonicity,
        Suite::GreedyEquivalence,
        Suite::FrobeniusOracle,
        Suite::PeelingBound,
        Suite::ErkReduction,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Monotonicity => "monotonicity",
            Suite::GreedyEquivalence => "greedy-equivalence",
            Suite::FrobeniusOracle => "frobenius-oracle",
            Suite::PeelingBound => "peeling-bound",
            Suite::ErkReduction => "erk-reduction",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub suite: Suite,
    pub seed: u64,
    pub trials: usize,
    /// Individual assertions evaluated across all trials.
    pub checks: u64,
    pub passed: bool,
    pub counterexample: Option<String>,
    /// Peeling bound only: smallest and largest `rhs - measured`.
    pub min_slack: Option<f64>,
    pub max_slack: Option<f64>,
}

struct TrialResult {
    checks: u64,
    failure: Option<String>,
    slack: Option<f64>,
}

impl TrialResult {
    fn pass(checks: u64) -> Self {
        TrialResult {
            checks,
            failure: None,
            slack: None,
        }
    }

    fn fail(checks: u64, why: String) -> Self {
        TrialResult {
            checks,
            failure: Some(why),
            slack: None,
        }
    }
}

pub fn run_suite(suite: Suite, seed: u64, trials: usize) -> SuiteOutcome {
    let results: Vec<TrialResult> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = sample_rng(seed, t);
            match suite {
                Suite::Monotonicity => monotonicity_trial(&mut rng),
                Suite::GreedyEquivalence => greedy_trial(&mut rng, t),
                Suite::FrobeniusOracle => frobenius_trial(&mut rng),
                Suite::PeelingBound => peeling_trial(&mut rng, seed ^ t.rotate_left(32)),
                Suite::ErkReduction => erk_trial(&mut rng),
            }
        })
        .collect();
    let checks = results.iter().map(|r| r.checks).sum();
    let counterexample = results
        .iter()
        .enumerate()
        .find_map(|(t, r)| r.failure.as_ref().map(|f| format!("trial {t}: {f}")));
    let slacks: Vec<f64> = results.iter().filter_map(|r| r.slack).collect();
    let min_slack = slacks.iter().copied().reduce(f64::min);
    let max_slack = slacks.iter().copied().reduce(f64::max);
    SuiteOutcome {
        suite,
        seed,
        trials,
        checks,
        passed: counterexample.is_none(),
        counterexample,
        min_slack,
        max_slack,
    }
}

/// Checks `W[u]^2 > W[v]^2 => score(u) > score(v)` over every pair of a
/// layer by grouping equal squares in an independent sort.
pub fn check_monotone(weights: &[f32], scores: &[f64]) -> Result<u64, String> {
    let mut pairs: Vec<(f64, f64, usize)> = weights
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(i, (&w, &s))| (f64::from(w).powi(2), s, i))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Largest score among strictly smaller squares, and who holds it.
    let mut below: Option<(f64, usize)> = None;
    let mut group_max: Option<(f64, usize)> = None;
    for k in 0..pairs.len() {
        let (sq, s, i) = pairs[k];
        if k > 0 && sq != pairs[k - 1].0 {
            below = match (below, group_max) {
                (Some(b), Some(g)) => Some(if g.0 > b.0 { g } else { b }),
                (b, g) => b.or(g),
            };
            group_max = None;
        }
        if let Some((bs, bi)) = below {
            if s <= bs {
                return Err(format!(
                    "|w[{i}]| = {} > |w[{bi}]| = {} but scores {s:e} <= {bs:e}",
                    weights[i].abs(),
                    weights[bi].abs()
                ));
            }
        }
        if group_max.is_none_or(|g| s > g.0) {
            group_max = Some((s, i));
        }
    }
    Ok(pairs.len() as u64)
}

fn monotonicity_trial(rng: &mut ChaCha8Rng) -> TrialResult {
    let n = random::log_uniform_size(rng, MONOTONICITY_MAX_LAYER);
    let w = random::layer_values(rng, n);
    let scores = match lamp_scores(&w, None) {
        Ok(s) => s,
        Err(e) => return TrialResult::fail(0, format!("scoring failed: {e}")),
    };
    match check_monotone(&w, &scores.values) {
        Ok(checks) => TrialResult::pass(checks),
        Err(why) => TrialResult::fail(0, format!("layer of {n}: {why}")),
    }
}

fn greedy_trial(rng: &mut ChaCha8Rng, t: u64) -> TrialResult {
    let bundle = if t.is_multiple_of(3) {
        random::tie_bundle(rng, 6, GREEDY_MAX_WEIGHTS)
    } else {
        random::bundle(
            rng,
            BundleShape {
                min_layers: 1,
                max_layers: 6,
                max_total: GREEDY_MAX_WEIGHTS,
                min_dim: 1,
            },
        )
    };
    let remove = bundle.prunable_total();
    match lamp_greedy_equivalence_check(&bundle, remove) {
        Ok(eq) if eq.equal => TrialResult::pass(remove as u64),
        Ok(eq) => TrialResult::fail(
            remove as u64,
            format!(
                "{} layers, {} weights: {:?}",
                bundle.len(),
                remove,
                eq.first_divergence
            ),
        ),
        Err(e) => TrialResult::fail(0, e.to_string()),
    }
}

fn frobenius_trial(rng: &mut ChaCha8Rng) -> TrialResult {
    let rows = rng.random_range(1..=5);
    let cols = rng.random_range(1..=20 / rows);
    let w = random::layer_values(rng, rows * cols);
    match frobenius_oracle_all(&w) {
        Ok(checks) => match checks.iter().find(|c| !c.optimal) {
            None => TrialResult::pass(checks.len() as u64),
            Some(c) => TrialResult::fail(
                checks.len() as u64,
                format!("{rows}x{cols} {w:?}: {c:?}"),
            ),
        },
        Err(e) => TrialResult::fail(0, e.to_string()),
    }
}

fn peeling_trial(rng: &mut ChaCha8Rng, sample_seed: u64) -> TrialResult {
    let net = random::dense_net(rng, 4, 16);
    let layer = rng.random_range(0..net.depth());
    let n = net.layers()[layer].data().len();
    let keep = rng.random_range(0.0..1.0);
    let mask: BitVec<u8, Lsb0> = (0..n).map(|_| rng.random_bool(keep)).collect();
    match peeling_bound_check(&net, layer, &mask, PEELING_SAMPLES, sample_seed) {
        Ok(r) if r.holds => TrialResult {
            checks: (r.samples + r.basis_vectors) as u64,
            failure: None,
            slack: Some(r.slack),
        },
        Ok(r) => TrialResult::fail(1, format!("{r:?}")),
        Err(e) => TrialResult::fail(0, e.to_string()),
    }
}

/// Plain Erdős–Rényi shares for an all-fc bundle, by floating-point
/// water-filling: density `lambda * (1 - (in + out) / (in * out))`, capped at 1.
pub fn erdos_renyi_shares(bundle: &ModelBundle, kappa: usize) -> Vec<f64> {
    let layers = bundle.layers();
    let factor: Vec<f64> = layers
        .iter()
        .map(|l| {
            let (o, i) = (l.spec.shape[0] as f64, l.spec.shape[1] as f64);
            1.0 - (i + o) / (i * o)
        })
        .collect();
    let count: Vec<f64> = layers.iter().map(|l| l.len() as f64).collect();
    let mut dense = vec![false; layers.len()];
    loop {
        let fixed: f64 = (0..layers.len()).filter(|&l| dense[l]).map(|l| count[l]).sum();
        let pool: f64 = (0..layers.len())
            .filter(|&l| !dense[l])
            .map(|l| factor[l] * count[l])
            .sum();
        let lambda = (kappa as f64 - fixed) / pool;
        let mut changed = false;
        for l in 0..layers.len() {
            if !dense[l] && lambda * factor[l] > 1.0 {
                dense[l] = true;
                changed = true;
            }
        }
        if !changed {
            return (0..layers.len())
                .map(|l| {
                    if dense[l] {
                        count[l]
                    } else {
                        lambda * factor[l] * count[l]
                    }
                })
                .collect();
        }
    }
}

fn erk_trial(rng: &mut ChaCha8Rng) -> TrialResult {
    let bundle = random::bundle(
        rng,
        BundleShape {
            min_layers: 1,
            max_layers: 8,
            max_total: 20_000,
            min_dim: 3,
        },
    );
    let total = bundle.prunable_total();
    let kappa = rng.random_range(1..=total);
    let mut checks = 0u64;
    for l in bundle.layers() {
        let (o, i) = (l.spec.shape[0] as i64, l.spec.shape[1] as i64);
        let expected = num_rational::Ratio::new(o * i - o - i, o * i);
        checks += 1;
        if erk_factor(&l.spec) != expected {
            return TrialResult::fail(checks, format!("factor of {:?}", l.spec.shape));
        }
    }
    let budget = SparsityBudget::from_kappa(kappa, total).expect("kappa in range");
    let (alloc, _) = match allocate_erk(&bundle, None, budget) {
        Ok(a) => a,
        Err(e) => return TrialResult::fail(checks, e.to_string()),
    };
    let ideal = erdos_renyi_shares(&bundle, kappa);
    if alloc.prunable_kept() != kappa {
        return TrialResult::fail(checks, format!("kept {} != kappa {kappa}", alloc.prunable_kept()));
    }
    for (l, (a, want)) in alloc.layers.iter().zip(&ideal).enumerate() {
        checks += 1;
        if (a.kept as f64 - want).abs() >= 1.0 + 1e-9 {
            return TrialResult::fail(
                checks,
                format!("layer {l}: kept {} vs ideal {want} (kappa {kappa})", a.kept),
            );
        }
    }
    TrialResult::pass(checks)
}
