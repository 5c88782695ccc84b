//! On-disk artifacts: a directory holding `bundle.json` (format version, kind,
//! metadata and the list of arrays with their shapes) and `bundle.bin`
//! (every array as little-endian f64, in declaration order, row-major).

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use nalgebra::{DMatrix, DVector};
use pixelhop::{
    ChannelId, ChannelNode, ChannelReducer, ChannelStatus, FeatureBlock, HopConfig, HopModel,
    HopUnit, LabelMatrix, ProbeModelF64, ProbeParams, SaabKernels,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::io::OutputLock;
use crate::pipeline::Encoder;

pub const FORMAT_VERSION: &str = "pixelhop-bundle/1";
pub const HEADER_FILE: &str = "bundle.json";
pub const BLOB_FILE: &str = "bundle.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ArraySpec {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Serialize, Deserialize)]
struct Header<M> {
    format_version: String,
    kind: String,
    meta: M,
    arrays: Vec<ArraySpec>,
}

/// Arrays collected in declaration order.
#[derive(Debug, Default)]
pub struct ArrayWriter {
    specs: Vec<ArraySpec>,
    data: Vec<f64>,
}

impl ArrayWriter {
    pub fn push(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        values: impl IntoIterator<Item = f64>,
    ) {
        let before = self.data.len();
        self.data.extend(values);
        let spec = ArraySpec {
            name: name.into(),
            shape: shape.to_vec(),
        };
        assert_eq!(
            self.data.len() - before,
            spec.len(),
            "array {} has the wrong length",
            spec.name
        );
        self.specs.push(spec);
    }

    /// Row-major copy of a matrix.
    pub fn push_matrix(&mut self, name: impl Into<String>, m: &DMatrix<f64>) {
        let values: Vec<f64> = m
            .row_iter()
            .flat_map(|r| r.iter().copied().collect::<Vec<_>>())
            .collect();
        self.push(name, &[m.nrows(), m.ncols()], values);
    }
}

/// Reads arrays back in declaration order, checking names and shapes.
#[derive(Debug)]
pub struct ArrayReader {
    specs: Vec<ArraySpec>,
    data: Vec<f64>,
    next: usize,
    offset: usize,
}

impl ArrayReader {
    pub fn take(&mut self, name: &str) -> Result<(Vec<usize>, &[f64])> {
        let spec = self
            .specs
            .get(self.next)
            .with_context(|| format!("bundle ends before array {name}"))?;
        ensure!(
            spec.name == name,
            "expected array {name}, found {}",
            spec.name
        );
        let len = spec.len();
        let values = &self.data[self.offset..self.offset + len];
        self.next += 1;
        self.offset += len;
        Ok((spec.shape.clone(), values))
    }

    pub fn take_shaped(&mut self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let (found, values) = self.take(name)?;
        ensure!(
            found == shape,
            "array {name} has shape {found:?}, expected {shape:?}"
        );
        Ok(values)
    }

    pub fn take_matrix(&mut self, name: &str) -> Result<DMatrix<f64>> {
        let (shape, values) = self.take(name)?;
        ensure!(shape.len() == 2, "array {name} is not a matrix");
        Ok(DMatrix::from_row_slice(shape[0], shape[1], values))
    }

    pub fn finish(self) -> Result<()> {
        ensure!(
            self.next == self.specs.len(),
            "bundle holds {} unread arrays",
            self.specs.len() - self.next
        );
        Ok(())
    }
}

/// Writes a bundle directory, holding an exclusive lock on it meanwhile.
pub fn save_bundle<M: Serialize>(
    dir: &Path,
    kind: &str,
    meta: &M,
    arrays: &ArrayWriter,
) -> Result<()> {
    let _lock = OutputLock::acquire(dir)?;
    let header = Header {
        format_version: FORMAT_VERSION.to_string(),
        kind: kind.to_string(),
        meta,
        arrays: arrays.specs.clone(),
    };
    let mut json = serde_json::to_string_pretty(&header)?;
    json.push('\n');
    let mut blob = Vec::with_capacity(arrays.data.len() * 8);
    for v in &arrays.data {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join(HEADER_FILE), json)?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

pub fn load_bundle<M: DeserializeOwned>(dir: &Path, kind: &str) -> Result<(M, ArrayReader)> {
    let header_path = dir.join(HEADER_FILE);
    let text = fs::read_to_string(&header_path)
        .with_context(|| format!("cannot read {}", header_path.display()))?;
    let header: Header<M> = serde_json::from_str(&text)
        .with_context(|| format!("malformed {}", header_path.display()))?;
    ensure!(
        header.format_version == FORMAT_VERSION,
        "unsupported bundle version {:?}",
        header.format_version
    );
    ensure!(
        header.kind == kind,
        "{} holds a {} bundle, expected {kind}",
        dir.display(),
        header.kind
    );
    let blob = fs::read(dir.join(BLOB_FILE))
        .with_context(|| format!("cannot read {}/{BLOB_FILE}", dir.display()))?;
    ensure!(
        blob.len() % 8 == 0,
        "blob length {} is not a multiple of 8",
        blob.len()
    );
    let declared: usize = header.arrays.iter().map(ArraySpec::len).sum();
    ensure!(
        declared == blob.len() / 8,
        "arrays declare {declared} values but the blob holds {}",
        blob.len() / 8
    );
    let data = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((
        header.meta,
        ArrayReader {
            specs: header.arrays,
            data,
            next: 0,
            offset: 0,
        },
    ))
}

// ---------------------------------------------------------------- encoder

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopConfigMeta {
    pub levels: usize,
    pub window: usize,
    pub stride: usize,
    pub pool_size: usize,
    pub energy_threshold: f64,
    pub max_kernels_per_unit: Option<usize>,
    pub max_patches_per_unit: Option<usize>,
}

impl From<&HopConfig> for HopConfigMeta {
    fn from(c: &HopConfig) -> Self {
        Self {
            levels: c.levels,
            window: c.window,
            stride: c.stride,
            pool_size: c.pool_size,
            energy_threshold: c.energy_threshold,
            max_kernels_per_unit: c.max_kernels_per_unit,
            max_patches_per_unit: c.max_patches_per_unit,
        }
    }
}

impl From<&HopConfigMeta> for HopConfig {
    fn from(c: &HopConfigMeta) -> Self {
        Self {
            levels: c.levels,
            window: c.window,
            stride: c.stride,
            pool_size: c.pool_size,
            energy_threshold: c.energy_threshold,
            max_kernels_per_unit: c.max_kernels_per_unit,
            max_patches_per_unit: c.max_patches_per_unit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMeta {
    pub id: String,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitMeta {
    pub level: usize,
    /// Consumed channel; absent for the level-1 unit.
    pub input: Option<String>,
    pub n: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducerMeta {
    pub id: String,
    pub rows: usize,
    pub cols: usize,
    pub components: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderMeta {
    pub config: HopConfigMeta,
    /// Height, width, channels.
    pub input_shape: [usize; 3],
    pub channels: Vec<ChannelMeta>,
    pub units: Vec<UnitMeta>,
    pub target_dim: usize,
    pub vector_count: usize,
    pub reducers: Vec<ReducerMeta>,
}

fn unit_key(input: Option<&ChannelId>) -> String {
    input.map_or_else(|| "root".to_string(), ChannelId::to_string)
}

pub fn encoder_arrays(encoder: &Encoder) -> (EncoderMeta, ArrayWriter) {
    let hop = &encoder.hop;
    let mut arrays = ArrayWriter::default();
    let nodes = hop.nodes();
    arrays.push(
        "channel_energy",
        &[nodes.len()],
        nodes.iter().map(|n| n.energy),
    );
    let mut units = Vec::new();
    for unit in hop.units().iter().flatten() {
        let k = &unit.kernels;
        let key = unit_key(unit.input.as_ref());
        arrays.push(
            format!("unit/{key}/dc"),
            &[k.n()],
            k.dc_kernel().iter().copied(),
        );
        arrays.push_matrix(format!("unit/{key}/ac"), k.ac_kernels());
        arrays.push(
            format!("unit/{key}/energy"),
            &[k.k() + 1],
            k.explained_variance().iter().copied(),
        );
        arrays.push(format!("unit/{key}/bias"), &[1], [k.bias()]);
        units.push(UnitMeta {
            level: unit.level(),
            input: unit.input.as_ref().map(ChannelId::to_string),
            n: k.n(),
            k: k.k(),
        });
    }
    let mut reducers = Vec::new();
    for ch in encoder.block.channels() {
        arrays.push(
            format!("pca/{}/mean", ch.id),
            &[ch.mean.len()],
            ch.mean.iter().copied(),
        );
        arrays.push_matrix(format!("pca/{}/basis", ch.id), &ch.basis);
        reducers.push(ReducerMeta {
            id: ch.id.to_string(),
            rows: ch.shape.0,
            cols: ch.shape.1,
            components: ch.components(),
        });
    }
    let (h, w, c) = hop.input_shape();
    let meta = EncoderMeta {
        config: hop.config().into(),
        input_shape: [h, w, c],
        channels: nodes
            .iter()
            .map(|n| ChannelMeta {
                id: n.id.to_string(),
                status: n.status.as_str().to_string(),
            })
            .collect(),
        units,
        target_dim: encoder.block.target_dim(),
        vector_count: encoder.block.vector_count(),
        reducers,
    };
    (meta, arrays)
}

pub fn encoder_from_arrays(meta: &EncoderMeta, mut arrays: ArrayReader) -> Result<Encoder> {
    let energies = arrays
        .take_shaped("channel_energy", &[meta.channels.len()])?
        .to_vec();
    let nodes = meta
        .channels
        .iter()
        .zip(energies)
        .map(|(c, energy)| {
            Ok(ChannelNode {
                id: c.id.parse::<ChannelId>()?,
                energy,
                status: c.status.parse::<ChannelStatus>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let config = HopConfig::from(&meta.config);
    let mut units: Vec<Vec<HopUnit<f64>>> = vec![Vec::new(); config.levels];
    for u in &meta.units {
        let input = u
            .input
            .as_deref()
            .map(str::parse::<ChannelId>)
            .transpose()?;
        let key = unit_key(input.as_ref());
        let dc = DVector::from_column_slice(arrays.take_shaped(&format!("unit/{key}/dc"), &[u.n])?);
        let ac = DMatrix::from_row_slice(
            u.k,
            u.n,
            arrays.take_shaped(&format!("unit/{key}/ac"), &[u.k, u.n])?,
        );
        let ev = arrays
            .take_shaped(&format!("unit/{key}/energy"), &[u.k + 1])?
            .to_vec();
        let bias = arrays.take_shaped(&format!("unit/{key}/bias"), &[1])?[0];
        ensure!(
            (1..=config.levels).contains(&u.level),
            "unit level {} out of range",
            u.level
        );
        units[u.level - 1].push(HopUnit {
            input,
            kernels: SaabKernels::from_parts(dc, ac, ev, bias)?,
        });
    }
    let [h, w, c] = meta.input_shape;
    let hop = HopModel::from_parts(config, (h, w, c), units, nodes)?;

    let mut channels = Vec::with_capacity(meta.reducers.len());
    for r in &meta.reducers {
        let len = r.rows * r.cols;
        let mean =
            DVector::from_column_slice(arrays.take_shaped(&format!("pca/{}/mean", r.id), &[len])?);
        let basis = DMatrix::from_row_slice(
            r.components,
            len,
            arrays.take_shaped(&format!("pca/{}/basis", r.id), &[r.components, len])?,
        );
        channels.push(ChannelReducer {
            id: r.id.parse()?,
            shape: (r.rows, r.cols),
            mean,
            basis,
        });
    }
    arrays.finish()?;
    let block = FeatureBlock::from_parts(channels, meta.target_dim)?;
    ensure!(
        block.vector_count() == meta.vector_count,
        "stored vector count disagrees with reducers"
    );
    Ok(Encoder { hop, block })
}

pub fn save_encoder(dir: &Path, encoder: &Encoder) -> Result<()> {
    let (meta, arrays) = encoder_arrays(encoder);
    save_bundle(dir, "encoder", &meta, &arrays)
}

pub fn load_encoder(dir: &Path) -> Result<Encoder> {
    let (meta, arrays) = load_bundle::<EncoderMeta>(dir, "encoder")?;
    encoder_from_arrays(&meta, arrays)
}

// ---------------------------------------------------------------- features

/// Column layout of a feature matrix: visual block first, then hashed text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub visual_dim: usize,
    pub text_buckets: usize,
}

impl FeatureLayout {
    pub fn dim(&self) -> usize {
        self.visual_dim + self.text_buckets
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub classes: Vec<String>,
    pub layout: FeatureLayout,
    /// Image paths as written in the source manifest.
    pub images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub meta: FeatureMeta,
    pub features: DMatrix<f64>,
    pub labels: LabelMatrix,
}

pub fn save_features(dir: &Path, set: &FeatureSet) -> Result<()> {
    let mut arrays = ArrayWriter::default();
    arrays.push_matrix("features", &set.features);
    let labels = DMatrix::from_fn(set.labels.rows(), set.labels.classes().len(), |i, c| {
        if set.labels.get(i, c) {
            1.0
        } else {
            0.0
        }
    });
    arrays.push_matrix("labels", &labels);
    save_bundle(dir, "features", &set.meta, &arrays)
}

pub fn load_features(dir: &Path) -> Result<FeatureSet> {
    let (meta, mut arrays) = load_bundle::<FeatureMeta>(dir, "features")?;
    let features = arrays.take_matrix("features")?;
    let labels = arrays.take_matrix("labels")?;
    arrays.finish()?;
    let rows = meta.images.len();
    ensure!(
        features.shape() == (rows, meta.layout.dim()),
        "feature matrix is {:?}, expected {rows}x{}",
        features.shape(),
        meta.layout.dim()
    );
    ensure!(
        labels.shape() == (rows, meta.classes.len()),
        "label matrix shape mismatch"
    );
    let rows = labels
        .row_iter()
        .map(|r| {
            r.iter()
                .map(|&v| match v {
                    0.0 => Ok(false),
                    1.0 => Ok(true),
                    _ => bail!("label entries must be 0 or 1, found {v}"),
                })
                .collect::<Result<Vec<bool>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = LabelMatrix::new(meta.classes.clone(), rows)?;
    Ok(FeatureSet {
        meta,
        features,
        labels,
    })
}

// ---------------------------------------------------------------- probe

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub seed: u64,
    pub test_fraction: f64,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeMeta {
    pub classes: Vec<String>,
    pub layout: FeatureLayout,
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
    pub split: SplitMeta,
    /// Classes left untrained for lack of positives.
    pub skipped: Vec<String>,
}

impl ProbeMeta {
    pub fn params(&self) -> ProbeParams {
        ProbeParams {
            lr: self.lr,
            epochs: self.epochs,
            l2: self.l2,
        }
    }
}

pub fn save_probe(dir: &Path, meta: &ProbeMeta, probe: &ProbeModelF64) -> Result<()> {
    let mut arrays = ArrayWriter::default();
    arrays.push_matrix("weights", &probe.weights);
    arrays.push(
        "biases",
        &[probe.biases.len()],
        probe.biases.iter().copied(),
    );
    save_bundle(dir, "probe", meta, &arrays)
}

pub fn load_probe(dir: &Path) -> Result<(ProbeMeta, ProbeModelF64)> {
    let (meta, mut arrays) = load_bundle::<ProbeMeta>(dir, "probe")?;
    let weights = arrays.take_matrix("weights")?;
    ensure!(
        weights.shape() == (meta.classes.len(), meta.layout.dim()),
        "probe weights are {:?}, expected {}x{}",
        weights.shape(),
        meta.classes.len(),
        meta.layout.dim()
    );
    let biases = DVector::from_column_slice(arrays.take_shaped("biases", &[meta.classes.len()])?);
    arrays.finish()?;
    let probe = ProbeModelF64::new(weights, biases, meta.classes.clone())?;
    Ok((meta, probe))
}
