//! Acceptance checks, one line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so every criterion reports even
//! when an earlier one fails. The process exits nonzero if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lamp_core::allocation::{self, erk_factor};
use lamp_core::distortion::{self, DenseNet, Matrix};
use lamp_core::model_io::{self, Layer, LayerKind, LayerMask, MaskBits, MaskBundle, ModelBundle};
use lamp_core::random::{self, BundleShape};
use lamp_core::verify::{self, Suite};
use lamp_core::{Scheme, SparsityBudget};

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }
}

fn criterion(id: u32, title: &str, limit: Option<Duration>, body: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let mut outcome = body();
    let elapsed = start.elapsed();
    if let Some(limit) = limit {
        if elapsed > limit {
            outcome.passed = false;
            outcome.detail += &format!("; exceeded {:.0?} limit", limit);
        }
    }
    println!(
        "{} [{id}] {title}: {} ({:.2?})",
        if outcome.passed { "PASS" } else { "FAIL" },
        outcome.detail,
        elapsed
    );
    outcome.passed
}

fn suite_outcome(suite: Suite, seed: u64, trials: usize) -> Outcome {
    let o = verify::run_suite(suite, seed, trials);
    let mut detail = format!("{} trials, {} checks", o.trials, o.checks);
    if let (Some(lo), Some(hi)) = (o.min_slack, o.max_slack) {
        detail += &format!(", slack in [{lo:.3e}, {hi:.3e}]");
    }
    if let Some(c) = &o.counterexample {
        detail += &format!(", counterexample {c}");
    }
    Outcome::new(o.passed, detail)
}

/// Top `k` of a layer by magnitude, larger index first among equal magnitudes.
fn top_k_mask(weights: &[f32], k: usize) -> MaskBits {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| {
        weights[b]
            .abs()
            .total_cmp(&weights[a].abs())
            .then(b.cmp(&a))
    });
    let mut bits = MaskBits::repeat(false, weights.len());
    for &i in &idx[..k] {
        bits.set(i, true);
    }
    bits
}

/// Criteria 2 and 6 share these bundles and budgets.
fn lamp_vs_layerwise(bundles: usize) -> (Outcome, Outcome) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let shape = BundleShape {
        min_layers: 2,
        max_layers: 8,
        max_total: 4000,
        min_dim: 1,
    };
    let mut masks_checked = 0usize;
    let mut equal_failure = None;
    let mut floor_failure = None;
    for b in 0..bundles {
        let bundle = if b % 4 == 3 {
            random::tie_bundle(&mut rng, 8, 4000)
        } else {
            random::bundle(&mut rng, shape)
        };
        let total = bundle.prunable_total();
        let d = bundle.len();
        let mut budgets = vec![d, total];
        budgets.extend((0..4).map(|_| rng.random_range(d..=total)));
        for kappa in budgets {
            let budget = SparsityBudget::from_kappa(kappa, total).expect("feasible");
            let (alloc, mask) =
                allocation::allocate(Scheme::Lamp, &bundle, None, budget).expect("lamp allocates");
            masks_checked += 1;
            for (i, layer) in bundle.layers().iter().enumerate() {
                let kept = alloc.layers[i].kept;
                let want = top_k_mask(&layer.weights, kept);
                if mask.layer(i).bits != want && equal_failure.is_none() {
                    equal_failure = Some(format!("bundle {b}, kappa {kappa}, layer {i}"));
                }
                if mask.layer(i).survivors() == 0 && floor_failure.is_none() {
                    floor_failure = Some(format!("bundle {b}, kappa {kappa}, layer {i} emptied"));
                }
            }
        }
    }
    let summary = format!("{bundles} bundles, {masks_checked} masks");
    let eq = match equal_failure {
        None => Outcome::new(true, format!("{summary} bit-equal")),
        Some(f) => Outcome::new(false, format!("{summary}, mismatch at {f}")),
    };
    let floor = match floor_failure {
        None => {
            let fixture = global_mp_fixture();
            Outcome::new(fixture.passed, format!("{summary} keep every layer; {}", fixture.detail))
        }
        Some(f) => Outcome::new(false, f),
    };
    (eq, floor)
}

fn two_layer_toy() -> ModelBundle {
    ModelBundle::new(vec![
        Layer::fc("a", 1, 3, vec![1.0, 2.0, 3.0]),
        Layer::fc("b", 1, 3, vec![10.0, 20.0, 30.0]),
    ])
    .unwrap()
}

fn global_mp_fixture() -> Outcome {
    let bundle = two_layer_toy();
    let budget = SparsityBudget::from_survival(0.5, 6).unwrap();
    let (global, _) = allocation::allocate(Scheme::Global, &bundle, None, budget).unwrap();
    let (lamp, _) = allocation::allocate(Scheme::Lamp, &bundle, None, budget).unwrap();
    let ok = global.kept() == vec![0, 3] && lamp.kept() == vec![2, 1];
    Outcome::new(
        ok,
        format!("toy fixture global {:?}, lamp {:?}", global.kept(), lamp.kept()),
    )
}

fn identity_fixture() -> Outcome {
    let net = DenseNet::new(vec![Matrix::identity(4)]).unwrap();
    let mut mask = MaskBits::repeat(true, 16);
    mask.set(5, false);
    match distortion::peeling_bound_check(&net, 0, &mask, 1000, 0) {
        Ok(r) => {
            let gap = (r.bound_rhs - r.empirical_distortion_lower_bound).abs();
            Outcome::new(r.holds && gap <= 1e-9, format!("identity fixture gap {gap:.1e}"))
        }
        Err(e) => Outcome::new(false, format!("identity fixture: {e}")),
    }
}

fn cli(args: &[&str]) -> i32 {
    let mut full = vec!["lamp"];
    full.extend_from_slice(args);
    lamp_cli::run(full)
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn filled(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    random::layer_values(rng, n)
}

fn cnn_bundle(seed: u64) -> ModelBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelBundle::new(vec![
        Layer::conv2d("conv1", [8, 3, 3, 3], filled(&mut rng, 216)),
        Layer::conv2d("conv2", [16, 8, 3, 3], filled(&mut rng, 1152)),
        Layer::fc("fc1", 64, 144, filled(&mut rng, 9216)),
        Layer::fc("fc2", 10, 64, filled(&mut rng, 640)),
    ])
    .unwrap()
}

fn schedule_grid(work: &Path) -> Outcome {
    let bundle = cnn_bundle(7);
    let bundle_dir = work.join("cnn");
    model_io::save_bundle(&bundle, &bundle_dir).unwrap();
    let total = bundle.prunable_total() as f64;
    let grid = [(3, 51.2), (6, 26.2), (9, 13.4), (12, 6.87), (15, 3.52)];
    let mut notes = Vec::new();
    let mut ok = true;
    for scheme in ["lamp", "global", "uniform", "uniform-plus", "erk"] {
        let out = work.join(format!("iterate-{scheme}"));
        let code = cli(&[
            "iterate", p(&bundle_dir), "--scheme", scheme, "--rounds", "15", "--out-dir", p(&out),
        ]);
        if code != 0 {
            return Outcome::new(false, format!("{scheme}: iterate exited {code}"));
        }
        let mut worst = 0.0f64;
        for (round, percent) in grid {
            let path = out.join(format!("round_{round:02}")).join("report.json");
            let report: serde_json::Value =
                serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
            let kept = report["total"]["kept"].as_f64().unwrap();
            let ideal = 0.8f64.powi(round) * total;
            worst = worst.max((kept - ideal).abs());
            // Printed percentages carry three significant digits.
            let shown = 100.0 * 0.8f64.powi(round);
            let digits = 2 - shown.log10().floor() as i32;
            let scale = 10f64.powi(digits);
            if (kept - ideal).abs() > 1.0 || ((shown * scale).round() / scale - percent).abs() > 1e-9
            {
                ok = false;
            }
            if scheme == "lamp" {
                let empty = report["layers"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .any(|l| l["nonzero"].as_u64() == Some(0));
                if empty {
                    ok = false;
                    notes.push(format!("lamp emptied a layer at round {round}"));
                }
            }
        }
        notes.push(format!("{scheme} max off {worst:.2}"));
    }
    Outcome::new(ok, format!("{} weights; {}", total, notes.join(", ")))
}

fn erk_criterion() -> Outcome {
    let fc = Layer::fc("fc", 3, 4, vec![1.0; 12]);
    let conv = Layer::conv2d("conv", [8, 4, 3, 3], vec![1.0; 288]);
    let f_fc = erk_factor(&fc.spec);
    let f_conv = erk_factor(&conv.spec);
    let exact = f_fc == Ratio::new(5, 12) && f_conv == Ratio::new(15, 16);
    let suite = suite_outcome(Suite::ErkReduction, 8, 300);
    Outcome::new(
        exact && suite.passed,
        format!("fc {f_fc}, conv {f_conv}; all-fc reduction {}", suite.detail),
    )
}

fn random_mixed_bundle(rng: &mut ChaCha8Rng) -> ModelBundle {
    let n = rng.random_range(1..=6);
    let layers = (0..n)
        .map(|i| {
            let prunable = i == 0 || rng.random_bool(0.8);
            let (kind, shape) = if rng.random_bool(0.5) {
                let s = vec![
                    rng.random_range(1..=8),
                    rng.random_range(1..=8),
                    rng.random_range(1..=3),
                    rng.random_range(1..=3),
                ];
                (LayerKind::Conv2d, s)
            } else {
                (LayerKind::FullyConnected, vec![rng.random_range(1..=40), rng.random_range(1..=40)])
            };
            let count = shape.iter().product();
            let weights = filled(rng, count);
            Layer::new(format!("layer.{i}"), kind, shape, prunable, weights)
        })
        .collect();
    ModelBundle::new(layers).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, bundle: &ModelBundle) -> MaskBundle {
    let density: f64 = rng.random();
    MaskBundle {
        layers: bundle
            .layers()
            .iter()
            .map(|l| {
                let mut bits = MaskBits::repeat(true, l.weights.len());
                if l.spec.prunable {
                    for i in 0..bits.len() {
                        bits.set(i, rng.random_bool(density));
                    }
                }
                LayerMask {
                    name: l.spec.name.clone(),
                    prunable: l.spec.prunable,
                    bits,
                }
            })
            .collect(),
    }
}

fn round_trip(work: &Path) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for t in 0..100 {
        let bundle = random_mixed_bundle(&mut rng);
        let mask = random_mask(&mut rng, &bundle);
        let dir = work.join(format!("rt{t}"));
        model_io::save_bundle(&bundle, &dir).map_err(|e| e.to_string())?;
        model_io::save_mask(&mask, dir.join("mask")).map_err(|e| e.to_string())?;
        let back = model_io::load_bundle(&dir).map_err(|e| e.to_string())?;
        let mask_back = model_io::load_mask(dir.join("mask")).map_err(|e| e.to_string())?;
        let same_bits = bundle.layers().iter().zip(back.layers()).all(|(a, b)| {
            a.spec == b.spec
                && a.weights.len() == b.weights.len()
                && a.weights.iter().zip(&b.weights).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        if !same_bits || bundle.len() != back.len() {
            return Err(format!("bundle {t} changed on round trip"));
        }
        if mask_back != mask {
            return Err(format!("mask {t} changed on round trip"));
        }
    }
    Ok("100 bundles and masks bit-identical".into())
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    out
}

fn deterministic_runs(work: &Path) -> Result<String, String> {
    let bundle_dir = work.join("det-bundle");
    model_io::save_bundle(&cnn_bundle(11), &bundle_dir).map_err(|e| e.to_string())?;
    let run = |tag: &str| -> Result<PathBuf, String> {
        let out = work.join(tag);
        let steps: Vec<Vec<String>> = vec![
            vec!["score".into(), p(&bundle_dir).into(), "--out".into(), p(&out.join("scores.json")).into()],
            vec![
                "prune".into(), p(&bundle_dir).into(), "--scheme".into(), "erk".into(),
                "--survival".into(), "0.3".into(), "--mask-out".into(), p(&out.join("mask")).into(),
                "--report".into(), p(&out.join("report.json")).into(),
            ],
            vec![
                "iterate".into(), p(&bundle_dir).into(), "--scheme".into(), "lamp".into(),
                "--rounds".into(), "4".into(), "--out-dir".into(), p(&out.join("iter")).into(),
            ],
            vec![
                "verify".into(), "--suite".into(), "peeling-bound".into(), "--seed".into(),
                "5".into(), "--trials".into(), "10".into(), "--out".into(),
                p(&out.join("verify.json")).into(),
            ],
        ];
        for args in steps {
            let mut full = vec!["lamp".to_string()];
            full.extend(args);
            let code = lamp_cli::run(full);
            if code != 0 {
                return Err(format!("{tag}: command exited {code}"));
            }
        }
        Ok(out)
    };
    let a = run("det-a")?;
    let b = run("det-b")?;
    let fa = files_under(&a);
    let fb = files_under(&b);
    if fa.len() != fb.len() {
        return Err("runs wrote different file sets".into());
    }
    for (x, y) in fa.iter().zip(&fb) {
        if x.strip_prefix(&a).unwrap() != y.strip_prefix(&b).unwrap() || fs::read(x).unwrap() != fs::read(y).unwrap()
        {
            return Err(format!("{} differs between runs", x.display()));
        }
    }
    Ok(format!("{} output files byte-identical", fa.len()))
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let secs = Duration::from_secs;
    let mut results = Vec::new();

    results.push(criterion(1, "monotonicity over 1e5 layers", Some(secs(30)), || {
        suite_outcome(Suite::Monotonicity, 1, 100_000)
    }));

    let mut floor = None;
    results.push(criterion(2, "lamp equals induced layerwise MP", Some(secs(60)), || {
        let (eq, fl) = lamp_vs_layerwise(1000);
        floor = Some(fl);
        eq
    }));

    results.push(criterion(3, "greedy oracle equivalence", Some(secs(120)), || {
        suite_outcome(Suite::GreedyEquivalence, 3, 500)
    }));

    results.push(criterion(4, "Frobenius optimality of MP", Some(secs(60)), || {
        suite_outcome(Suite::FrobeniusOracle, 4, 200)
    }));

    results.push(criterion(5, "peeling bound", Some(secs(120)), || {
        let suite = suite_outcome(Suite::PeelingBound, 5, 200);
        let fixture = identity_fixture();
        Outcome::new(
            suite.passed && fixture.passed,
            format!("{}; {}", suite.detail, fixture.detail),
        )
    }));

    results.push(criterion(6, "at least one survivor per layer", None, || {
        floor.take().expect("criterion 2 ran")
    }));

    results.push(criterion(7, "iterative schedule grid", None, || schedule_grid(work.path())));

    results.push(criterion(8, "ERK factors", None, erk_criterion));

    results.push(criterion(9, "I/O round trip and determinism", None, || {
        match (round_trip(work.path()), deterministic_runs(work.path())) {
            (Ok(a), Ok(b)) => Outcome::new(true, format!("{a}; {b}")),
            (Err(e), _) | (_, Err(e)) => Outcome::new(false, e),
        }
    }));

    let failed = results.iter().filter(|&&ok| !ok).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
