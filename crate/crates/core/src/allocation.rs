//! Layerwise sparsity allocation.
//!
//! Every scheme turns a global budget `kappa` (surviving prunable weights)
//! into per-layer surviving counts and the matching mask. Inside a layer the
//! survivors are always the largest magnitudes, ranked by
//! [`SortedIndexMap`](crate::scoring::SortedIndexMap).
//!
//! Ties are resolved by one total order used everywhere: higher score first,
//! then earlier layer, then higher rank inside the layer.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

use bitvec::prelude::*;
use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model_io::{BundleError, LayerKind, LayerMask, LayerSpec, MaskBundle, ModelBundle};
use crate::scoring::{lamp_scores_sorted, sort_indices, ScoreError, SortedIndexMap};

/// Share of the last fully-connected layer that uniform+ always keeps.
pub const UNIFORM_PLUS_LAST_FC_FLOOR: Ratio<usize> = Ratio::new_raw(1, 5);

#[derive(Debug, Error)]
pub enum AllocError {
    #[error("InfeasibleBudget: {0}")]
    InfeasibleBudget(String),
    #[error("DegenerateLayer: layer `{layer}`: {reason}")]
    DegenerateLayer { layer: String, reason: ScoreError },
    #[error("NonPositiveFactor: layer `{layer}` with shape {shape:?} has no positive Erdős–Rényi factor")]
    NonPositiveFactor { layer: String, shape: Vec<usize> },
    #[error("BadFraction: prune fraction {0} is outside (0, 1)")]
    BadFraction(f64),
    #[error("BadSurvival: survival {0} is outside (0, 1]")]
    BadSurvival(f64),
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

impl AllocError {
    pub fn name(&self) -> &'static str {
        match self {
            AllocError::InfeasibleBudget(_) => "InfeasibleBudget",
            AllocError::DegenerateLayer { .. } => "DegenerateLayer",
            AllocError::NonPositiveFactor { .. } => "NonPositiveFactor",
            AllocError::BadFraction(_) => "BadFraction",
            AllocError::BadSurvival(_) => "BadSurvival",
            AllocError::Bundle(e) => e.name(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Global threshold on LAMP scores.
    Lamp,
    /// Global threshold on weight magnitudes.
    Global,
    Uniform,
    /// Uniform with the first conv layer dense and a 20% floor on the last fc layer.
    UniformPlus,
    /// Erdős–Rényi kernel.
    Erk,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Lamp,
        Scheme::Global,
        Scheme::Uniform,
        Scheme::UniformPlus,
        Scheme::Erk,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Lamp => "lamp",
            Scheme::Global => "global",
            Scheme::Uniform => "uniform",
            Scheme::UniformPlus => "uniform_plus",
            Scheme::Erk => "erk",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Target number of surviving prunable weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityBudget {
    pub kappa: usize,
    /// Prunable weights in the bundle.
    pub total: usize,
}

impl SparsityBudget {
    /// `kappa = round(survival * total)`, halves rounded away from zero.
    pub fn from_survival(survival: f64, total: usize) -> Result<Self, AllocError> {
        if !(survival > 0.0 && survival <= 1.0) {
            return Err(AllocError::BadSurvival(survival));
        }
        let kappa = (survival * total as f64).round() as usize;
        Self::from_kappa(kappa, total)
    }

    pub fn from_kappa(kappa: usize, total: usize) -> Result<Self, AllocError> {
        if kappa == 0 || kappa > total {
            return Err(AllocError::InfeasibleBudget(format!(
                "kappa {kappa} must lie in 1..={total}"
            )));
        }
        Ok(SparsityBudget { kappa, total })
    }

    pub fn survival(&self) -> f64 {
        self.kappa as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerAllocation {
    pub name: String,
    pub count: usize,
    pub kept: usize,
    pub prunable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub scheme: Scheme,
    pub budget: SparsityBudget,
    pub layers: Vec<LayerAllocation>,
}

impl Allocation {
    pub fn kept(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.kept).collect()
    }

    /// Surviving prunable weights; equals `budget.kappa`.
    pub fn prunable_kept(&self) -> usize {
        self.layers.iter().filter(|l| l.prunable).map(|l| l.kept).sum()
    }
}

/// Per-layer ranking and survivor counts shared by every scheme.
struct Prepared<'a> {
    bundle: &'a ModelBundle,
    mask_in: MaskBundle,
    sorted: Vec<SortedIndexMap>,
    survivors: Vec<usize>,
}

impl<'a> Prepared<'a> {
    fn new(
        bundle: &'a ModelBundle,
        mask_in: Option<&MaskBundle>,
        budget: SparsityBudget,
    ) -> Result<Self, AllocError> {
        let mask_in = match mask_in {
            Some(m) => {
                m.check_against(bundle)?;
                m.clone()
            }
            None => MaskBundle::all_ones(bundle),
        };
        if budget.total != bundle.prunable_total() {
            return Err(AllocError::InfeasibleBudget(format!(
                "budget counts {} prunable weights, bundle has {}",
                budget.total,
                bundle.prunable_total()
            )));
        }
        let sorted: Vec<SortedIndexMap> = bundle
            .layers()
            .par_iter()
            .map(|l| sort_indices(&l.weights))
            .collect();
        let survivors: Vec<usize> = mask_in.layers.iter().map(LayerMask::survivors).collect();
        let alive: usize = bundle.prunable_indices().iter().map(|&i| survivors[i]).sum();
        if budget.kappa > alive {
            return Err(AllocError::InfeasibleBudget(format!(
                "kappa {} exceeds the {alive} surviving prunable weights",
                budget.kappa
            )));
        }
        Ok(Prepared {
            bundle,
            mask_in,
            sorted,
            survivors,
        })
    }

    fn survivor_bits(&self, i: usize) -> &BitSlice<u8, Lsb0> {
        &self.mask_in.layers[i].bits
    }

    /// Surviving flat indices of layer `i`, smallest magnitude first.
    fn ascending_survivors(&self, i: usize) -> Vec<usize> {
        let bits = self.survivor_bits(i);
        self.sorted[i]
            .order()
            .iter()
            .copied()
            .filter(|&u| bits[u])
            .collect()
    }

    /// Mask keeping the `kept[i]` largest survivors of every prunable layer.
    fn layerwise_mask(&self, kept: &[usize]) -> MaskBundle {
        let layers = self
            .bundle
            .layers()
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let mut bits = BitVec::repeat(false, layer.len());
                if layer.spec.prunable {
                    let bits_in = self.survivor_bits(i);
                    self.sorted[i]
                        .order()
                        .iter()
                        .rev()
                        .filter(|&&u| bits_in[u])
                        .take(kept[i])
                        .for_each(|&u| bits.set(u, true));
                } else {
                    bits.fill(true);
                }
                LayerMask {
                    name: layer.spec.name.clone(),
                    prunable: layer.spec.prunable,
                    bits,
                }
            })
            .collect();
        MaskBundle { layers }
    }

    fn finish(
        &self,
        scheme: Scheme,
        budget: SparsityBudget,
        kept: Vec<usize>,
    ) -> (Allocation, MaskBundle) {
        let mask = self.layerwise_mask(&kept);
        let layers = self
            .bundle
            .layers()
            .iter()
            .zip(&kept)
            .map(|(l, &k)| LayerAllocation {
                name: l.spec.name.clone(),
                count: l.len(),
                kept: if l.spec.prunable { k } else { l.len() },
                prunable: l.spec.prunable,
            })
            .collect();
        (
            Allocation {
                scheme,
                budget,
                layers,
            },
            mask,
        )
    }
}

/// Candidate in the global merge. Greater means kept first.
#[derive(Debug, Clone, Copy)]
struct Head {
    key: f64,
    layer: usize,
    /// Position in the layer's surviving stream; higher ranks win ties.
    pos: usize,
}

impl Ord for Head {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key
            .total_cmp(&other.key)
            .then_with(|| other.layer.cmp(&self.layer))
            .then_with(|| self.pos.cmp(&other.pos))
    }
}

impl PartialOrd for Head {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Head {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Head {}

/// Takes the `kappa` greatest keys across per-layer streams whose keys are
/// non-decreasing along each stream. Returns how many were taken per stream.
fn merge_top(streams: &[(usize, Vec<f64>)], n_layers: usize, kappa: usize) -> Vec<usize> {
    let mut heap = BinaryHeap::with_capacity(streams.len());
    for (layer, keys) in streams {
        if let Some(&key) = keys.last() {
            heap.push(Head {
                key,
                layer: *layer,
                pos: keys.len() - 1,
            });
        }
    }
    let by_layer: std::collections::HashMap<usize, &Vec<f64>> =
        streams.iter().map(|(l, k)| (*l, k)).collect();
    let mut taken = vec![0usize; n_layers];
    for _ in 0..kappa {
        let head = heap.pop().expect("kappa checked against survivors");
        taken[head.layer] += 1;
        if head.pos > 0 {
            let pos = head.pos - 1;
            heap.push(Head {
                key: by_layer[&head.layer][pos],
                layer: head.layer,
                pos,
            });
        }
    }
    taken
}

/// Global pruning on LAMP scores recomputed over the current survivors.
pub fn allocate_lamp(
    bundle: &ModelBundle,
    mask_in: Option<&MaskBundle>,
    budget: SparsityBudget,
) -> Result<(Allocation, MaskBundle), AllocError> {
    let prep = Prepared::new(bundle, mask_in, budget)?;
    let streams: Vec<(usize, Vec<f64>)> = bundle
        .prunable_indices()
        .into_par_iter()
        .map(|i| {
            let layer = bundle.layer(i);
            let scores = lamp_scores_sorted(&layer.weights, Some(prep.survivor_bits(i)), &prep.sorted[i])
                .map_err(|reason| AllocError::DegenerateLayer {
                    layer: layer.spec.name.clone(),
                    reason,
                })?;
            let keys = prep
                .ascending_survivors(i)
                .into_iter()
                .map(|u| scores.values[u])
                .collect();
            Ok((i, keys))
        })
        .collect::<Result<_, AllocError>>()?;
    let kept = merge_top(&streams, bundle.len(), budget.kappa);
    Ok(prep.finish(Scheme::Lamp, budget, kept))
}

/// Global magnitude threshold; a layer may lose every weight.
pub fn allocate_global_mp(
    bundle: &ModelBundle,
    mask_in: Option<&MaskBundle>,
    budget: SparsityBudget,
) -> Result<(Allocation, MaskBundle), AllocError> {
    let prep = Prepared::new(bundle, mask_in, budget)?;
    let streams: Vec<(usize, Vec<f64>)> = bundle
        .prunable_indices()
        .into_iter()
        .map(|i| {
            let w = &bundle.layer(i).weights;
            let keys = prep
                .ascending_survivors(i)
                .into_iter()
                .map(|u| f64::from(w[u].abs()))
                .collect();
            (i, keys)
        })
        .collect();
    let kept = merge_top(&streams, bundle.len(), budget.kappa);
    Ok(prep.finish(Scheme::Global, budget, kept))
}

/// Splits `total` over `pool` proportionally to `weights`, never exceeding
/// `caps`. Layers whose share exceeds their cap are pinned to it and the rest
/// is re-split until no share exceeds its cap. Fractional shares are settled
/// by largest remainder, earlier layer first on equal remainders.
fn apportion(
    total: usize,
    pool: &[usize],
    weights: &[i128],
    caps: &[usize],
    out: &mut [usize],
) -> Result<(), AllocError> {
    let mut capped = vec![false; pool.len()];
    let (remaining, weight_sum) = loop {
        let pinned: usize = pool
            .iter()
            .zip(&capped)
            .filter(|(_, &c)| c)
            .map(|(&l, _)| caps[l])
            .sum();
        let remaining = total as i128 - pinned as i128;
        let weight_sum: i128 = pool
            .iter()
            .zip(&capped)
            .filter(|(_, &c)| !c)
            .map(|(&l, _)| weights[l])
            .sum();
        if remaining < 0 {
            return Err(AllocError::InfeasibleBudget(
                "capped layers alone exceed the budget".into(),
            ));
        }
        if weight_sum == 0 {
            if remaining == 0 {
                break (0, 1);
            }
            return Err(AllocError::InfeasibleBudget(format!(
                "{remaining} weights left over after every layer is full"
            )));
        }
        let mut newly = false;
        for (k, &l) in pool.iter().enumerate() {
            if !capped[k] && remaining * weights[l] > caps[l] as i128 * weight_sum {
                capped[k] = true;
                newly = true;
            }
        }
        if !newly {
            break (remaining, weight_sum);
        }
    };

    let mut assigned = 0i128;
    let mut remainders = Vec::new();
    for (k, &l) in pool.iter().enumerate() {
        if capped[k] {
            out[l] = caps[l];
            continue;
        }
        let share = remaining * weights[l];
        out[l] = (share / weight_sum) as usize;
        assigned += share / weight_sum;
        remainders.push((share % weight_sum, l));
    }
    let units = (remaining - assigned) as usize;
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, l) in remainders.iter().take(units) {
        out[l] += 1;
    }
    Ok(())
}

/// Every prunable layer keeps the same fraction of its weights.
pub fn allocate_uniform(
    bundle: &ModelBundle,
    mask_in: Option<&MaskBundle>,
    budget: SparsityBudget,
) -> Result<(Allocation, MaskBundle), AllocError> {
    let prep = Prepared::new(bundle, mask_in, budget)?;
    let weights: Vec<i128> = bundle.layers().iter().map(|l| l.len() as i128).collect();
    let mut kept = vec![0; bundle.len()];
    apportion(
        budget.kappa,
        &bundle.prunable_indices(),
        &weights,
        &prep.survivors,
        &mut kept,
    )?;
    Ok(prep.finish(Scheme::Uniform, budget, kept))
}

/// Uniform, but the first conv layer stays dense and the last fc layer keeps
/// at least a fifth of its weights. Each rule applies only if its layer kind
/// exists.
pub fn allocate_uniform_plus(
    bundle: &ModelBundle,
    mask_in: Option<&MaskBundle>,
    budget: SparsityBudget,
) -> Result<(Allocation, MaskBundle), AllocError> {
    let prep = Prepared::new(bundle, mask_in, budget)?;
    let prunable = bundle.prunable_indices();
    let kind = |i: usize| bundle.layer(i).spec.kind;
    let first_conv = prunable.iter().copied().find(|&i| kind(i) == LayerKind::Conv2d);
    let last_fc = prunable
        .iter()
        .copied()
        .rfind(|&i| kind(i) == LayerKind::FullyConnected);

    let weights: Vec<i128> = bundle.layers().iter().map(|l| l.len() as i128).collect();
    let mut kept = vec![0; bundle.len()];
    let mut remaining = budget.kappa;
    if let Some(c) = first_conv {
        kept[c] = prep.survivors[c];
        remaining = remaining.checked_sub(kept[c]).ok_or_else(|| {
            AllocError::InfeasibleBudget(format!(
                "first conv layer alone keeps {} > kappa {}",
                kept[c], budget.kappa
            ))
        })?;
    }
    let pool: Vec<usize> = prunable.iter().copied().filter(|&i| Some(i) != first_conv).collect();
    apportion(remaining, &pool, &weights, &prep.survivors, &mut kept)?;

    if let Some(f) = last_fc {
        let count = bundle.layer(f).len();
        let floor = (UNIFORM_PLUS_LAST_FC_FLOOR * count).ceil().to_integer();
        let floor = floor.min(prep.survivors[f]);
        if kept[f] < floor {
            kept[f] = floor;
            let rest = remaining.checked_sub(floor).ok_or_else(|| {
                AllocError::InfeasibleBudget(format!(
                    "fixed layers need more than kappa {}",
                    budget.kappa
                ))
            })?;
            let pool: Vec<usize> = pool.iter().copied().filter(|&i| i != f).collect();
            apportion(rest, &pool, &weights, &prep.survivors, &mut kept)?;
        }
    }
    Ok(prep.finish(Scheme::UniformPlus, budget, kept))
}

/// Sum of the dimensions in the Erdős–Rényi (kernel) factor: fan-in plus
/// fan-out, plus kernel height and width for conv2d.
fn erk_dim_sum(spec: &LayerSpec) -> usize {
    match spec.kind {
        LayerKind::FullyConnected => spec.shape[0] + spec.shape[1],
        LayerKind::Conv2d => spec.shape.iter().sum(),
    }
}

/// Raw Erdős–Rényi kernel density factor `1 - sum(dims) / prod(dims)`,
/// exactly, before budget scaling.
pub fn erk_factor(spec: &LayerSpec) -> Ratio<i64> {
    let prod = spec.count as i64;
    Ratio::new(prod - erk_dim_sum(spec) as i64, prod)
}

/// Raw density factor times the layer size: `prod(dims) - sum(dims)`.
fn erk_weight(spec: &LayerSpec) -> i128 {
    spec.count as i128 - erk_dim_sum(spec) as i128
}

/// Density proportional to the Erdős–Rényi kernel factor, capped at the
/// layer's surviving weights.
pub fn allocate_erk(
    bundle: &ModelBundle,
    mask_in: Option<&MaskBundle>,
    budget: SparsityBudget,
) -> Result<(Allocation, MaskBundle), AllocError> {
    let prunable = bundle.prunable_indices();
    let mut weights = vec![0i128; bundle.len()];
    for &i in &prunable {
        let spec = &bundle.layer(i).spec;
        weights[i] = erk_weight(spec);
        if weights[i] <= 0 {
            return Err(AllocError::NonPositiveFactor {
                layer: spec.name.clone(),
                shape: spec.shape.clone(),
            });
        }
    }
    let prep = Prepared::new(bundle, mask_in, budget)?;
    let mut kept = vec![0; bundle.len()];
    apportion(budget.kappa, &prunable, &weights, &prep.survivors, &mut kept)?;
    Ok(prep.finish(Scheme::Erk, budget, kept))
}

pub fn allocate(
    scheme: Scheme,
    bundle: &ModelBundle,
    mask_in: Option<&MaskBundle>,
    budget: SparsityBudget,
) -> Result<(Allocation, MaskBundle), AllocError> {
    match scheme {
        Scheme::Lamp => allocate_lamp(bundle, mask_in, budget),
        Scheme::Global => allocate_global_mp(bundle, mask_in, budget),
        Scheme::Uniform => allocate_uniform(bundle, mask_in, budget),
        Scheme::UniformPlus => allocate_uniform_plus(bundle, mask_in, budget),
        Scheme::Erk => allocate_erk(bundle, mask_in, budget),
    }
}

/// Iterative pruning: each round removes `fraction` of the surviving weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub fraction: f64,
    /// Target global survival after rounds `1..=len`.
    pub rounds: Vec<f64>,
}

impl Schedule {
    /// Target survival after round `t`; round 0 is the dense model.
    pub fn survival_at(&self, t: usize) -> f64 {
        (1.0 - self.fraction).powi(t as i32)
    }
}

pub fn make_schedule(rounds: usize, fraction: f64) -> Result<Schedule, AllocError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(AllocError::BadFraction(fraction));
    }
    let mut schedule = Schedule {
        fraction,
        rounds: Vec::with_capacity(rounds),
    };
    for t in 1..=rounds {
        let s = schedule.survival_at(t);
        schedule.rounds.push(s);
    }
    Ok(schedule)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSurvival {
    pub name: String,
    pub count: usize,
    pub kept: usize,
    /// Kept weights that are also nonzero.
    pub nonzero: usize,
    pub rate: f64,
    pub prunable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TotalSurvival {
    pub count: usize,
    pub kept: usize,
    pub nonzero: usize,
    pub rate: f64,
}

/// Per-layer and total survival. Totals cover prunable layers only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalReport {
    pub layers: Vec<LayerSurvival>,
    pub total: TotalSurvival,
}

pub fn survival_report(
    bundle: &ModelBundle,
    mask: &MaskBundle,
) -> Result<SurvivalReport, AllocError> {
    mask.check_against(bundle)?;
    let layers: Vec<LayerSurvival> = bundle
        .layers()
        .iter()
        .zip(&mask.layers)
        .map(|(l, m)| {
            let kept = m.survivors();
            let nonzero = m
                .bits
                .iter_ones()
                .filter(|&u| l.weights[u] != 0.0)
                .count();
            LayerSurvival {
                name: l.spec.name.clone(),
                count: l.len(),
                kept,
                nonzero,
                rate: kept as f64 / l.len() as f64,
                prunable: l.spec.prunable,
            }
        })
        .collect();
    let prunable = layers.iter().filter(|l| l.prunable);
    let (count, kept, nonzero) = prunable.fold((0, 0, 0), |(c, k, n), l| {
        (c + l.count, k + l.kept, n + l.nonzero)
    });
    Ok(SurvivalReport {
        layers,
        total: TotalSurvival {
            count,
            kept,
            nonzero,
            rate: kept as f64 / count as f64,
        },
    })
}

/// Report written by `prune` and `iterate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub scheme: Scheme,
    pub global_survival: f64,
    pub kappa: usize,
    pub layers: Vec<LayerSurvival>,
    pub total: TotalSurvival,
}

impl PruneReport {
    pub fn new(allocation: &Allocation, survival: SurvivalReport) -> Self {
        PruneReport {
            scheme: allocation.scheme,
            global_survival: survival.total.rate,
            kappa: allocation.budget.kappa,
            layers: survival.layers,
            total: survival.total,
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("name\tcount\tkept\tnonzero\trate\n");
        for l in &self.layers {
            out += &format!("{}\t{}\t{}\t{}\t{}\n", l.name, l.count, l.kept, l.nonzero, l.rate);
        }
        out += &format!(
            "total\t{}\t{}\t{}\t{}\n",
            self.total.count, self.total.kept, self.total.nonzero, self.total.rate
        );
        out
    }
}
