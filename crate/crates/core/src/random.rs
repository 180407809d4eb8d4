//! Random instances for property suites.
//!
//! Layers mix Gaussian values across many scales with exact duplicates,
//! sign-flipped duplicates, zeros and subnormals, so ties and extreme ranges
//! show up often.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::distortion::{DenseNet, Matrix};
use crate::model_io::{Layer, ModelBundle};

/// Layer of `n` values with at least one nonzero entry.
pub fn layer_values<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f32> {
    let scale = 10f32.powf(rng.random_range(-3.0..3.0));
    let dup_p = if rng.random_bool(0.5) { rng.random_range(0.0..0.5) } else { 0.0 };
    let zero_p = if rng.random_bool(0.3) { rng.random_range(0.0..0.3) } else { 0.0 };
    let sub_p = if rng.random_bool(0.2) { rng.random_range(0.0..0.2) } else { 0.0 };
    let mut out: Vec<f32> = Vec::with_capacity(n);
    for i in 0..n {
        let roll: f64 = rng.random();
        let v = if i > 0 && roll < dup_p {
            let src = out[rng.random_range(0..i)];
            if rng.random_bool(0.5) {
                -src
            } else {
                src
            }
        } else if roll < dup_p + zero_p {
            0.0
        } else if roll < dup_p + zero_p + sub_p {
            let bits = rng.random_range(1u32..0x0080_0000);
            let v = f32::from_bits(bits);
            if rng.random_bool(0.5) {
                -v
            } else {
                v
            }
        } else {
            let g: f32 = rng.sample(StandardNormal);
            g * scale
        };
        out.push(v);
    }
    if out.iter().all(|&v| v == 0.0) {
        let i = rng.random_range(0..n);
        out[i] = scale;
    }
    out
}

/// Size between 1 and `max`, log-uniform.
pub fn log_uniform_size<R: Rng + ?Sized>(rng: &mut R, max: usize) -> usize {
    let x: f64 = rng.random_range(0.0..=(max as f64).ln());
    (x.exp().floor() as usize).clamp(1, max)
}

/// `[out, in]` with `out * in <= max_count`.
fn fc_shape<R: Rng + ?Sized>(rng: &mut R, max_count: usize, min_dim: usize) -> (usize, usize) {
    let max_count = max_count.max(min_dim * min_dim);
    let out = rng.random_range(min_dim..=(max_count / min_dim).clamp(min_dim, 64));
    let inp = rng.random_range(min_dim..=(max_count / out).max(min_dim));
    (out, inp)
}

#[derive(Debug, Clone, Copy)]
pub struct BundleShape {
    pub min_layers: usize,
    pub max_layers: usize,
    /// Upper bound on total prunable weights.
    pub max_total: usize,
    /// Smallest fan-in/fan-out.
    pub min_dim: usize,
}

/// Random fully-connected bundle. Shapes need not compose.
pub fn bundle<R: Rng + ?Sized>(rng: &mut R, shape: BundleShape) -> ModelBundle {
    let d = rng.random_range(shape.min_layers..=shape.max_layers);
    let per_layer = (shape.max_total / d).max(shape.min_dim * shape.min_dim);
    let layers = (0..d)
        .map(|i| {
            let (out, inp) = fc_shape(rng, per_layer, shape.min_dim);
            Layer::fc(format!("fc{i}"), out, inp, layer_values(rng, out * inp))
        })
        .collect();
    ModelBundle::new(layers).expect("generated bundle is valid")
}

/// Bundle built to stress tie-breaking: layers that are power-of-two rescaled
/// copies of each other (identical LAMP scores), repeated magnitudes and zeros.
pub fn tie_bundle<R: Rng + ?Sized>(rng: &mut R, max_layers: usize, max_total: usize) -> ModelBundle {
    let d = rng.random_range(2..=max_layers.max(2));
    let per_layer = (max_total / d).max(1);
    let (out, inp) = fc_shape(rng, per_layer, 1);
    let levels: Vec<f32> = (0..rng.random_range(1..=4))
        .map(|_| rng.random_range(1..=8) as f32)
        .collect();
    let mut base: Vec<f32> = (0..out * inp)
        .map(|_| {
            if rng.random_bool(0.15) {
                0.0
            } else {
                let v = *levels.choose(rng).unwrap();
                if rng.random_bool(0.5) {
                    -v
                } else {
                    v
                }
            }
        })
        .collect();
    if base.iter().all(|&v| v == 0.0) {
        base[0] = 1.0;
    }
    let layers = (0..d)
        .map(|i| {
            let weights = if rng.random_bool(0.7) {
                let shift = rng.random_range(-6..=6);
                let c = 2f32.powi(shift);
                let mut w: Vec<f32> = base.iter().map(|&v| v * c).collect();
                if rng.random_bool(0.5) {
                    w.shuffle(rng);
                }
                w
            } else {
                layer_values(rng, out * inp)
            };
            Layer::fc(format!("tie{i}"), out, inp, weights)
        })
        .collect();
    ModelBundle::new(layers).expect("generated bundle is valid")
}

/// Random net with `1..=max_depth` layers and widths in `1..=max_width`.
pub fn dense_net<R: Rng + ?Sized>(rng: &mut R, max_depth: usize, max_width: usize) -> DenseNet {
    let depth = rng.random_range(1..=max_depth);
    let widths: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=max_width)).collect();
    let layers = (0..depth)
        .map(|i| {
            let (rows, cols) = (widths[i + 1], widths[i]);
            let std = 1.0 / (cols as f64).sqrt() * rng.random_range(0.5..2.0);
            let data = (0..rows * cols)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
                .collect();
            Matrix::new(rows, cols, data)
        })
        .collect();
    DenseNet::new(layers).expect("widths compose")
}
