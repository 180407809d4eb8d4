//! Weight bundles and masks on disk.
//!
//! A bundle is a directory holding `manifest.json` and `weights.bin`. The
//! manifest lists layers in network order; each layer points at a byte range
//! of `weights.bin` holding `count` little-endian f32 values, flattened
//! row-major over `shape`.
//!
//! A mask is a directory holding `mask.json` and `mask.bin`. Every layer gets
//! `ceil(count / 8)` bytes, bit `u` of the layer lives in byte `u / 8` at bit
//! position `u % 8` (least significant bit first), and unused padding bits are
//! zero.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use bitvec::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MASK_META_FILE: &str = "mask.json";
pub const MASK_BITS_FILE: &str = "mask.bin";

/// Bit vector type used for masks: one bit per weight, LSB-first in each byte.
pub type MaskBits = BitVec<u8, Lsb0>;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("ParseError: {0}")]
    Parse(String),
    #[error("ShapeMismatch: layer `{layer}`: {detail}")]
    ShapeMismatch { layer: String, detail: String },
    #[error("NonFiniteWeight: layer `{layer}` index {index} holds {value}")]
    NonFiniteWeight {
        layer: String,
        index: usize,
        value: f32,
    },
    #[error("OverlapError: layer `{layer}` starts at byte {offset}, before the previous layer ends at {previous_end}")]
    Overlap {
        layer: String,
        offset: u64,
        previous_end: u64,
    },
    #[error("BlobOutOfRange: layer `{layer}` needs bytes up to {end}, blob has {len}")]
    BlobOutOfRange { layer: String, end: u64, len: u64 },
    #[error("InvalidBundle: {0}")]
    InvalidBundle(String),
    #[error("InvalidMask: {0}")]
    InvalidMask(String),
    #[error("MetadataMismatch: {0}")]
    MetadataMismatch(String),
    #[error("IoError: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl BundleError {
    /// Stable error name, printed by the CLI.
    pub fn name(&self) -> &'static str {
        match self {
            BundleError::Parse(_) => "ParseError",
            BundleError::ShapeMismatch { .. } => "ShapeMismatch",
            BundleError::NonFiniteWeight { .. } => "NonFiniteWeight",
            BundleError::Overlap { .. } => "OverlapError",
            BundleError::BlobOutOfRange { .. } => "BlobOutOfRange",
            BundleError::InvalidBundle(_) => "InvalidBundle",
            BundleError::InvalidMask(_) => "InvalidMask",
            BundleError::MetadataMismatch(_) => "MetadataMismatch",
            BundleError::Io { .. } => "IoError",
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        BundleError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    FullyConnected,
    Conv2d,
}

/// Metadata for one weight tensor.
///
/// Fully-connected shapes are `[out, in]`; conv2d shapes are
/// `[out_channels, in_channels, kernel_h, kernel_w]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub shape: Vec<usize>,
    pub prunable: bool,
    /// Byte offset into `weights.bin`.
    pub offset: u64,
    pub count: usize,
}

impl LayerSpec {
    /// Fan-in of the layer (`in` for fc, `in_channels` for conv2d).
    pub fn fan_in(&self) -> usize {
        self.shape[1]
    }

    pub fn fan_out(&self) -> usize {
        self.shape[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weights: Vec<f32>,
}

impl Layer {
    pub fn new(
        name: impl Into<String>,
        kind: LayerKind,
        shape: Vec<usize>,
        prunable: bool,
        weights: Vec<f32>,
    ) -> Self {
        let count = weights.len();
        Layer {
            spec: LayerSpec {
                name: name.into(),
                kind,
                shape,
                prunable,
                offset: 0,
                count,
            },
            weights,
        }
    }

    /// Prunable fully-connected layer with shape `[out, in]`.
    pub fn fc(name: impl Into<String>, out: usize, inp: usize, weights: Vec<f32>) -> Self {
        Layer::new(name, LayerKind::FullyConnected, vec![out, inp], true, weights)
    }

    /// Prunable conv2d layer with shape `[out, in, kh, kw]`.
    pub fn conv2d(name: impl Into<String>, shape: [usize; 4], weights: Vec<f32>) -> Self {
        Layer::new(name, LayerKind::Conv2d, shape.to_vec(), true, weights)
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Validated, immutable set of layers in network order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    layers: Vec<Layer>,
}

impl ModelBundle {
    /// Validates the layers and lays them out contiguously in the blob.
    pub fn new(mut layers: Vec<Layer>) -> Result<Self, BundleError> {
        let mut offset = 0u64;
        for layer in &mut layers {
            layer.spec.count = layer.weights.len();
            layer.spec.offset = offset;
            offset += 4 * layer.spec.count as u64;
        }
        validate_layers(&layers)?;
        Ok(ModelBundle { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &Layer {
        &self.layers[i]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Indices of prunable layers, in network order.
    pub fn prunable_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].spec.prunable)
            .collect()
    }

    /// Number of prunable weights; the denominator of every global rate.
    pub fn prunable_total(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.spec.prunable)
            .map(|l| l.weights.len())
            .sum()
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }
}

fn validate_layers(layers: &[Layer]) -> Result<(), BundleError> {
    if layers.is_empty() {
        return Err(BundleError::InvalidBundle("bundle has no layers".into()));
    }
    if !layers.iter().any(|l| l.spec.prunable) {
        return Err(BundleError::InvalidBundle("bundle has no prunable layer".into()));
    }
    let mut names = HashSet::new();
    for layer in layers {
        let spec = &layer.spec;
        if !names.insert(spec.name.as_str()) {
            return Err(BundleError::InvalidBundle(format!(
                "duplicate layer name `{}`",
                spec.name
            )));
        }
        check_shape(spec)?;
        if spec.count != layer.weights.len() {
            return Err(BundleError::ShapeMismatch {
                layer: spec.name.clone(),
                detail: format!(
                    "count {} but {} weights present",
                    spec.count,
                    layer.weights.len()
                ),
            });
        }
        if let Some((index, &value)) = layer.weights.iter().enumerate().find(|(_, w)| !w.is_finite())
        {
            return Err(BundleError::NonFiniteWeight {
                layer: spec.name.clone(),
                index,
                value,
            });
        }
    }
    Ok(())
}

fn check_shape(spec: &LayerSpec) -> Result<(), BundleError> {
    let rank = match spec.kind {
        LayerKind::FullyConnected => 2,
        LayerKind::Conv2d => 4,
    };
    if spec.shape.len() != rank {
        return Err(BundleError::ShapeMismatch {
            layer: spec.name.clone(),
            detail: format!("{:?} layer needs {rank} dims, got {:?}", spec.kind, spec.shape),
        });
    }
    let product = spec
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d));
    if product != Some(spec.count) {
        return Err(BundleError::ShapeMismatch {
            layer: spec.name.clone(),
            detail: format!("count {} != product of shape {:?}", spec.count, spec.shape),
        });
    }
    if spec.count == 0 {
        return Err(BundleError::ShapeMismatch {
            layer: spec.name.clone(),
            detail: "layer has no weights".into(),
        });
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: String,
    endianness: String,
    layers: Vec<LayerSpec>,
}

/// Resolves a bundle or mask location: either the directory itself or the
/// metadata file inside it.
fn resolve_dir(path: &Path, meta_file: &str) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.to_path_buf(), path.join(meta_file))
    } else {
        let dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        (dir, path.to_path_buf())
    }
}

/// Loads and validates a bundle from its directory or its `manifest.json`.
pub fn load_bundle(path: impl AsRef<Path>) -> Result<ModelBundle, BundleError> {
    let (dir, manifest_path) = resolve_dir(path.as_ref(), MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        BundleError::Parse(format!("cannot read {}: {e}", manifest_path.display()))
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| BundleError::Parse(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(BundleError::Parse(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    if manifest.dtype != "f32" || manifest.endianness != "little" {
        return Err(BundleError::Parse(format!(
            "unsupported dtype/endianness {}/{}",
            manifest.dtype, manifest.endianness
        )));
    }

    let blob_path = dir.join(WEIGHTS_FILE);
    let blob = fs::read(&blob_path).map_err(|e| BundleError::io(&blob_path, e))?;
    let blob_len = blob.len() as u64;

    let mut layers = Vec::with_capacity(manifest.layers.len());
    let mut previous_end = 0u64;
    for spec in manifest.layers {
        check_shape(&spec)?;
        if spec.offset < previous_end {
            return Err(BundleError::Overlap {
                layer: spec.name,
                offset: spec.offset,
                previous_end,
            });
        }
        let end = spec.offset + 4 * spec.count as u64;
        if end > blob_len {
            return Err(BundleError::BlobOutOfRange {
                layer: spec.name,
                end,
                len: blob_len,
            });
        }
        let bytes = &blob[spec.offset as usize..end as usize];
        let weights = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        previous_end = end;
        layers.push(Layer { spec, weights });
    }
    validate_layers(&layers)?;
    Ok(ModelBundle { layers })
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), BundleError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| BundleError::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| BundleError::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| BundleError::io(path, e))?;
    tmp.persist(path)
        .map_err(|e| BundleError::io(path, e.error))?;
    Ok(())
}

/// Writes `manifest.json` and `weights.bin` into `dir`.
pub fn save_bundle(bundle: &ModelBundle, dir: impl AsRef<Path>) -> Result<(), BundleError> {
    let dir = dir.as_ref();
    let mut blob = Vec::with_capacity(4 * bundle.layers.iter().map(Layer::len).sum::<usize>());
    let mut specs = Vec::with_capacity(bundle.len());
    for layer in &bundle.layers {
        let mut spec = layer.spec.clone();
        spec.offset = blob.len() as u64;
        spec.count = layer.weights.len();
        for w in &layer.weights {
            blob.extend_from_slice(&w.to_le_bytes());
        }
        specs.push(spec);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: "f32".into(),
        endianness: "little".into(),
        layers: specs,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(WEIGHTS_FILE), &blob)?;
    write_atomic(&dir.join(MANIFEST_FILE), &json)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    pub name: String,
    pub prunable: bool,
    pub bits: MaskBits,
}

impl LayerMask {
    pub fn survivors(&self) -> usize {
        self.bits.count_ones()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// One bit per weight; 1 keeps the connection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskBundle {
    pub layers: Vec<LayerMask>,
}

impl MaskBundle {
    pub fn all_ones(bundle: &ModelBundle) -> Self {
        MaskBundle {
            layers: bundle
                .layers
                .iter()
                .map(|l| LayerMask {
                    name: l.spec.name.clone(),
                    prunable: l.spec.prunable,
                    bits: BitVec::repeat(true, l.len()),
                })
                .collect(),
        }
    }

    pub fn layer(&self, i: usize) -> &LayerMask {
        &self.layers[i]
    }

    /// Checks names, counts and flags against `bundle`.
    pub fn check_against(&self, bundle: &ModelBundle) -> Result<(), BundleError> {
        if self.layers.len() != bundle.len() {
            return Err(BundleError::MetadataMismatch(format!(
                "mask has {} layers, bundle has {}",
                self.layers.len(),
                bundle.len()
            )));
        }
        for (m, l) in self.layers.iter().zip(bundle.layers()) {
            if m.name != l.spec.name {
                return Err(BundleError::MetadataMismatch(format!(
                    "mask layer `{}` vs bundle layer `{}`",
                    m.name, l.spec.name
                )));
            }
            if m.bits.len() != l.len() {
                return Err(BundleError::MetadataMismatch(format!(
                    "layer `{}`: mask has {} bits, layer has {} weights",
                    m.name,
                    m.bits.len(),
                    l.len()
                )));
            }
            if m.prunable != l.spec.prunable {
                return Err(BundleError::MetadataMismatch(format!(
                    "layer `{}`: prunable flag differs",
                    m.name
                )));
            }
        }
        self.check_non_prunable_dense()
    }

    fn check_non_prunable_dense(&self) -> Result<(), BundleError> {
        match self.layers.iter().find(|m| !m.prunable && !m.bits.all()) {
            Some(m) => Err(BundleError::InvalidMask(format!(
                "non-prunable layer `{}` has cleared bits",
                m.name
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskMeta {
    format_version: u32,
    bit_order: String,
    layers: Vec<MaskLayerMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskLayerMeta {
    name: String,
    count: usize,
    prunable: bool,
    /// Byte offset into `mask.bin`.
    offset: u64,
    bytes: u64,
}

/// Writes `mask.json` and `mask.bin` into `dir`.
pub fn save_mask(mask: &MaskBundle, dir: impl AsRef<Path>) -> Result<(), BundleError> {
    mask.check_non_prunable_dense()?;
    let dir = dir.as_ref();
    let mut blob = Vec::new();
    let mut metas = Vec::with_capacity(mask.layers.len());
    for layer in &mask.layers {
        let mut bits = layer.bits.clone();
        bits.set_uninitialized(false);
        let bytes = bits.into_vec();
        debug_assert_eq!(bytes.len(), layer.bits.len().div_ceil(8));
        metas.push(MaskLayerMeta {
            name: layer.name.clone(),
            count: layer.bits.len(),
            prunable: layer.prunable,
            offset: blob.len() as u64,
            bytes: bytes.len() as u64,
        });
        blob.extend_from_slice(&bytes);
    }
    let meta = MaskMeta {
        format_version: FORMAT_VERSION,
        bit_order: "lsb0".into(),
        layers: metas,
    };
    let json = serde_json::to_vec_pretty(&meta).expect("mask metadata serializes");
    write_atomic(&dir.join(MASK_BITS_FILE), &blob)?;
    write_atomic(&dir.join(MASK_META_FILE), &json)
}

/// Loads a mask from its directory or its `mask.json`.
pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskBundle, BundleError> {
    let (dir, meta_path) = resolve_dir(path.as_ref(), MASK_META_FILE);
    let text = fs::read_to_string(&meta_path)
        .map_err(|e| BundleError::Parse(format!("cannot read {}: {e}", meta_path.display())))?;
    let meta: MaskMeta = serde_json::from_str(&text)
        .map_err(|e| BundleError::Parse(format!("{}: {e}", meta_path.display())))?;
    if meta.format_version != FORMAT_VERSION || meta.bit_order != "lsb0" {
        return Err(BundleError::Parse(format!(
            "unsupported mask format {} / {}",
            meta.format_version, meta.bit_order
        )));
    }
    let bits_path = dir.join(MASK_BITS_FILE);
    let blob = fs::read(&bits_path).map_err(|e| BundleError::io(&bits_path, e))?;

    let mut layers = Vec::with_capacity(meta.layers.len());
    for m in meta.layers {
        if m.bytes != m.count.div_ceil(8) as u64 {
            return Err(BundleError::InvalidMask(format!(
                "layer `{}`: {} bytes cannot hold exactly {} bits",
                m.name, m.bytes, m.count
            )));
        }
        let end = m.offset + m.bytes;
        if end > blob.len() as u64 {
            return Err(BundleError::InvalidMask(format!(
                "layer `{}` runs past the end of mask.bin",
                m.name
            )));
        }
        let mut bits = MaskBits::from_slice(&blob[m.offset as usize..end as usize]);
        bits.truncate(m.count);
        layers.push(LayerMask {
            name: m.name,
            prunable: m.prunable,
            bits,
        });
    }
    let mask = MaskBundle { layers };
    mask.check_non_prunable_dense()?;
    Ok(mask)
}

/// Loads a mask and checks it lines up with `bundle`.
pub fn load_mask_for(
    path: impl AsRef<Path>,
    bundle: &ModelBundle,
) -> Result<MaskBundle, BundleError> {
    let mask = load_mask(path)?;
    mask.check_against(bundle)?;
    Ok(mask)
}

/// Zeroes every weight whose mask bit is cleared.
pub fn apply_mask(bundle: &ModelBundle, mask: &MaskBundle) -> Result<ModelBundle, BundleError> {
    mask.check_against(bundle)?;
    let layers = bundle
        .layers
        .iter()
        .zip(&mask.layers)
        .map(|(layer, m)| {
            let weights = layer
                .weights
                .iter()
                .zip(m.bits.iter().by_vals())
                .map(|(&w, keep)| if keep { w } else { 0.0 })
                .collect();
            Layer {
                spec: layer.spec.clone(),
                weights,
            }
        })
        .collect();
    Ok(ModelBundle { layers })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelBundle {
        ModelBundle::new(vec![Layer::fc("a", 2, 3, vec![1., 2., 3., 4., 5., 6.])]).unwrap()
    }

    #[test]
    fn smallest_bundle_loads() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&toy(), dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join(WEIGHTS_FILE)).unwrap().len(), 24);
        let b = load_bundle(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.layer(0).spec.count, 6);
        assert_eq!(b, toy());
    }

    fn write_raw(dir: &Path, manifest: &str, blob: &[u8]) {
        fs::write(dir.join(MANIFEST_FILE), manifest).unwrap();
        fs::write(dir.join(WEIGHTS_FILE), blob).unwrap();
    }

    fn manifest_with(layers: &str) -> String {
        format!(
            r#"{{"format_version":1,"dtype":"f32","endianness":"little","layers":[{layers}]}}"#
        )
    }

    #[test]
    fn count_not_matching_shape_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest_with(
            r#"{"name":"a","kind":"fully_connected","shape":[2,3],"prunable":true,"offset":0,"count":5}"#,
        );
        write_raw(dir.path(), &m, &[0u8; 24]);
        assert!(matches!(
            load_bundle(dir.path()),
            Err(BundleError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn nan_anywhere_is_rejected() {
        for pos in 0..6 {
            let dir = tempfile::tempdir().unwrap();
            let mut w = [1.0f32; 6];
            w[pos] = f32::NAN;
            let blob: Vec<u8> = w.iter().flat_map(|x| x.to_le_bytes()).collect();
            let m = manifest_with(
                r#"{"name":"a","kind":"fully_connected","shape":[2,3],"prunable":true,"offset":0,"count":6}"#,
            );
            write_raw(dir.path(), &m, &blob);
            match load_bundle(dir.path()) {
                Err(BundleError::NonFiniteWeight { index, .. }) => assert_eq!(index, pos),
                other => panic!("expected NonFiniteWeight, got {other:?}"),
            }
        }
    }

    #[test]
    fn infinite_weight_rejected_in_constructor() {
        let err = ModelBundle::new(vec![Layer::fc("a", 1, 2, vec![1.0, f32::INFINITY])]);
        assert!(matches!(err, Err(BundleError::NonFiniteWeight { index: 1, .. })));
    }

    #[test]
    fn overlapping_ranges_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest_with(concat!(
            r#"{"name":"a","kind":"fully_connected","shape":[1,2],"prunable":true,"offset":0,"count":2},"#,
            r#"{"name":"b","kind":"fully_connected","shape":[1,2],"prunable":true,"offset":4,"count":2}"#
        ));
        write_raw(dir.path(), &m, &[0u8; 16]);
        assert!(matches!(load_bundle(dir.path()), Err(BundleError::Overlap { .. })));
    }

    #[test]
    fn short_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest_with(
            r#"{"name":"a","kind":"fully_connected","shape":[2,3],"prunable":true,"offset":0,"count":6}"#,
        );
        write_raw(dir.path(), &m, &[0u8; 20]);
        assert!(matches!(
            load_bundle(dir.path()),
            Err(BundleError::BlobOutOfRange { .. })
        ));
    }

    #[test]
    fn malformed_and_missing_manifests_are_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(load_bundle(dir.path()).unwrap_err().name(), "ParseError");
        write_raw(dir.path(), "{not json", &[]);
        assert_eq!(load_bundle(dir.path()).unwrap_err().name(), "ParseError");
    }

    #[test]
    fn duplicate_names_and_no_prunable_layer_are_rejected() {
        let dup = ModelBundle::new(vec![
            Layer::fc("a", 1, 1, vec![1.0]),
            Layer::fc("a", 1, 1, vec![1.0]),
        ]);
        assert!(matches!(dup, Err(BundleError::InvalidBundle(_))));
        let frozen = ModelBundle::new(vec![Layer::new(
            "a",
            LayerKind::FullyConnected,
            vec![1, 1],
            false,
            vec![1.0],
        )]);
        assert!(matches!(frozen, Err(BundleError::InvalidBundle(_))));
    }

    #[test]
    fn all_ones_mask_packs_into_one_byte() {
        let dir = tempfile::tempdir().unwrap();
        let mask = MaskBundle::all_ones(&toy());
        save_mask(&mask, dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join(MASK_BITS_FILE)).unwrap(), vec![0b0011_1111]);
        assert_eq!(load_mask(dir.path()).unwrap(), mask);
    }

    #[test]
    fn mask_against_renamed_layer_is_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_mask(&MaskBundle::all_ones(&toy()), dir.path()).unwrap();
        let renamed =
            ModelBundle::new(vec![Layer::fc("b", 2, 3, vec![1., 2., 3., 4., 5., 6.])]).unwrap();
        assert!(matches!(
            load_mask_for(dir.path(), &renamed),
            Err(BundleError::MetadataMismatch(_))
        ));
    }

    #[test]
    fn apply_mask_zeroes_cleared_bits() {
        let b = ModelBundle::new(vec![Layer::fc("a", 1, 3, vec![1., 2., 3.])]).unwrap();
        let mut m = MaskBundle::all_ones(&b);
        assert_eq!(apply_mask(&b, &m).unwrap(), b);
        m.layers[0].bits.set(0, false);
        assert_eq!(apply_mask(&b, &m).unwrap().layer(0).weights, vec![0., 2., 3.]);
        m.layers[0].bits.fill(false);
        assert_eq!(apply_mask(&b, &m).unwrap().layer(0).weights, vec![0., 0., 0.]);
    }

    #[test]
    fn apply_mask_leaves_frozen_layer_alone() {
        let b = ModelBundle::new(vec![
            Layer::new("frozen", LayerKind::FullyConnected, vec![1, 2], false, vec![7., 8.]),
            Layer::fc("a", 1, 2, vec![1., 2.]),
        ])
        .unwrap();
        let mut m = MaskBundle::all_ones(&b);
        m.layers[1].bits.fill(false);
        let out = apply_mask(&b, &m).unwrap();
        assert_eq!(out.layer(0).weights, vec![7., 8.]);
        m.layers[0].bits.set(0, false);
        assert!(matches!(apply_mask(&b, &m), Err(BundleError::InvalidMask(_))));
    }
}
