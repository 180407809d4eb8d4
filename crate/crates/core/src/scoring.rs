//! Per-connection importance scores.
//!
//! The LAMP score of a surviving weight `u` is its squared magnitude divided by
//! the sum of squared magnitudes of all surviving weights in the same layer
//! that rank at or above `u` in ascending magnitude order. One suffix sum over
//! the sorted layer gives every score.

use bitvec::prelude::*;
use rayon::prelude::*;
use serde::ser::{Serialize, SerializeMap, Serializer};
use thiserror::Error;

use crate::model_io::{MaskBundle, ModelBundle};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScoreError {
    #[error("EmptyLayer: no surviving weights")]
    EmptyLayer,
    #[error("AllZero: every surviving weight is zero")]
    AllZero,
    #[error("layer `{layer}`: {source}")]
    InLayer {
        layer: String,
        #[source]
        source: Box<ScoreError>,
    },
}

impl ScoreError {
    pub fn name(&self) -> &'static str {
        match self {
            ScoreError::EmptyLayer => "EmptyLayer",
            ScoreError::AllZero => "AllZero",
            ScoreError::InLayer { source, .. } => source.name(),
        }
    }

    fn in_layer(self, layer: &str) -> Self {
        ScoreError::InLayer {
            layer: layer.to_string(),
            source: Box::new(self),
        }
    }
}

/// Ascending-magnitude permutation of a layer's flat indices.
///
/// Equal magnitudes keep ascending flat index order, so `rank` is a strict
/// total order on the layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SortedIndexMap {
    order: Vec<usize>,
}

impl SortedIndexMap {
    /// Flat indices, smallest magnitude first.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Inverse permutation: `ranks()[flat] = position in order`.
    pub fn ranks(&self) -> Vec<usize> {
        let mut ranks = vec![0; self.order.len()];
        for (rank, &flat) in self.order.iter().enumerate() {
            ranks[flat] = rank;
        }
        ranks
    }
}

/// Sorts flat indices by `|w|`, ties by ascending index.
pub fn sort_indices(weights: &[f32]) -> SortedIndexMap {
    assert!(weights.len() <= u32::MAX as usize, "layer too large to rank");
    // The bit pattern of a non-negative finite f32 orders like its value.
    let mut keys: Vec<u64> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| ((w.abs().to_bits() as u64) << 32) | i as u64)
        .collect();
    keys.sort_unstable();
    SortedIndexMap {
        order: keys.into_iter().map(|k| (k & 0xffff_ffff) as usize).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Lamp,
    MagnitudeSq,
}

/// Scores aligned with a layer's flat weights. Entries outside `valid` are 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor {
    pub kind: ScoreKind,
    pub values: Vec<f64>,
    pub valid: BitVec<u8, Lsb0>,
}

fn survives(survivors: Option<&BitSlice<u8, Lsb0>>, i: usize) -> bool {
    survivors.is_none_or(|s| s[i])
}

/// LAMP scores over the surviving weights of one layer.
pub fn lamp_scores(
    weights: &[f32],
    survivors: Option<&BitSlice<u8, Lsb0>>,
) -> Result<ScoreTensor, ScoreError> {
    lamp_scores_sorted(weights, survivors, &sort_indices(weights))
}

/// [`lamp_scores`] with a precomputed ranking.
pub fn lamp_scores_sorted(
    weights: &[f32],
    survivors: Option<&BitSlice<u8, Lsb0>>,
    sorted: &SortedIndexMap,
) -> Result<ScoreTensor, ScoreError> {
    debug_assert_eq!(sorted.len(), weights.len());
    if let Some(s) = survivors {
        assert_eq!(s.len(), weights.len(), "survivor mask length");
    }
    let mut values = vec![0.0f64; weights.len()];
    let mut valid = BitVec::repeat(false, weights.len());
    // f64 squares of f32 values are exact; only the running sum rounds.
    let mut suffix = 0.0f64;
    let mut any = false;
    for &u in sorted.order().iter().rev() {
        if !survives(survivors, u) {
            continue;
        }
        any = true;
        let sq = f64::from(weights[u]) * f64::from(weights[u]);
        suffix += sq;
        values[u] = if sq == 0.0 { 0.0 } else { sq / suffix };
        valid.set(u, true);
    }
    if !any {
        return Err(ScoreError::EmptyLayer);
    }
    if suffix == 0.0 {
        return Err(ScoreError::AllZero);
    }
    Ok(ScoreTensor {
        kind: ScoreKind::Lamp,
        values,
        valid,
    })
}

/// Squared magnitudes over the surviving weights of one layer.
pub fn magnitude_scores(
    weights: &[f32],
    survivors: Option<&BitSlice<u8, Lsb0>>,
) -> Result<ScoreTensor, ScoreError> {
    let mut values = vec![0.0f64; weights.len()];
    let mut valid = BitVec::repeat(false, weights.len());
    for (u, &w) in weights.iter().enumerate() {
        if survives(survivors, u) {
            values[u] = f64::from(w) * f64::from(w);
            valid.set(u, true);
        }
    }
    if valid.not_any() {
        return Err(ScoreError::EmptyLayer);
    }
    Ok(ScoreTensor {
        kind: ScoreKind::MagnitudeSq,
        values,
        valid,
    })
}

/// Scores every prunable layer, in network order.
pub fn score_bundle(
    bundle: &ModelBundle,
    mask: Option<&MaskBundle>,
    kind: ScoreKind,
) -> Result<Vec<(String, ScoreTensor)>, ScoreError> {
    bundle
        .prunable_indices()
        .into_par_iter()
        .map(|i| {
            let layer = bundle.layer(i);
            let survivors = mask.map(|m| m.layer(i).bits.as_bitslice());
            let scores = match kind {
                ScoreKind::Lamp => lamp_scores(&layer.weights, survivors),
                ScoreKind::MagnitudeSq => magnitude_scores(&layer.weights, survivors),
            };
            scores
                .map(|s| (layer.spec.name.clone(), s))
                .map_err(|e| e.in_layer(&layer.spec.name))
        })
        .collect()
}

/// `scores.json` body: layer name to score array, in network order.
pub struct ScoreDump<'a>(pub &'a [(String, ScoreTensor)]);

impl Serialize for ScoreDump<'_> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.0.len()))?;
        for (name, scores) in self.0 {
            map.serialize_entry(name, &scores.values)?;
        }
        map.end()
    }
}
