//! Layer-adaptive magnitude-based pruning (LAMP).
//!
//! The crate is split along the pipeline a pruning run goes through:
//!
//! * [`model_io`] loads and writes weight bundles (`manifest.json` + `weights.bin`)
//!   and bit-packed masks (`mask.json` + `mask.bin`).
//! * [`scoring`] computes LAMP and squared-magnitude scores per layer.
//! * [`allocation`] turns a global budget into per-layer surviving counts for
//!   LAMP, global MP, uniform, uniform+ and Erdős–Rényi kernel, builds masks,
//!   schedules and survival reports.
//! * [`distortion`] checks the distortion argument behind LAMP on small ReLU
//!   nets: Frobenius optimality of MP, the peeling bound and the greedy
//!   rescoring oracle.
//! * [`verify`] bundles those checks into randomized property suites.

pub mod allocation;
pub mod distortion;
pub mod exact;
pub mod model_io;
pub mod random;
pub mod scoring;
pub mod verify;

pub use allocation::{
    allocate, make_schedule, survival_report, AllocError, Allocation, Schedule, Scheme,
    SparsityBudget, SurvivalReport,
};
pub use model_io::{
    apply_mask, load_bundle, load_mask, save_bundle, save_mask, BundleError, Layer, LayerKind,
    LayerSpec, MaskBundle, ModelBundle,
};
pub use scoring::{lamp_scores, magnitude_scores, sort_indices, ScoreError, ScoreKind, ScoreTensor};
