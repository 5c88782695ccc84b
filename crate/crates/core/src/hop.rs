//! Multi-level PixelHop++ tree.
//!
//! Level 1 holds a single unit fed with every training image. Each channel
//! it produces carries an energy ratio (the parent's energy times the
//! kernel's explained-variance fraction). Channels under the threshold are
//! discarded; survivors are max-pooled and, below the last level, each one
//! feeds its own unit at the next level. Survivors of the last level are
//! the model outputs.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::saab::{
    apply_saab, extract_map_patches, extract_patches, response_map, valid_extent, PatchMatrix,
    PatchMoments, SaabKernels,
};
use crate::scalar::Scalar;
use crate::tensor::{ImageTensor, ResponseMap};

#[derive(Debug, Clone, PartialEq)]
pub struct HopConfig {
    pub levels: usize,
    pub window: usize,
    pub stride: usize,
    /// Max-pool window and stride.
    pub pool_size: usize,
    /// Energy ratio under which a channel is discarded.
    pub energy_threshold: f64,
    /// Upper bound on AC kernels per unit (clamped to `n - 1`).
    pub max_kernels_per_unit: Option<usize>,
    /// Deterministic subsampling cap on patches used to fit a unit.
    pub max_patches_per_unit: Option<usize>,
}

impl Default for HopConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            window: 3,
            stride: 1,
            pool_size: 2,
            energy_threshold: 5e-5,
            max_kernels_per_unit: None,
            max_patches_per_unit: None,
        }
    }
}

impl HopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InvalidConfig("levels must be at least 1".into()));
        }
        if self.window == 0 || self.stride == 0 || self.pool_size == 0 {
            return Err(Error::InvalidConfig(
                "window, stride and pool size must be at least 1".into(),
            ));
        }
        if !(self.energy_threshold >= 0.0) || !self.energy_threshold.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "energy threshold must be finite and non-negative, got {}",
                self.energy_threshold
            )));
        }
        Ok(())
    }
}

/// Spatial sizes seen by one level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelGeometry {
    pub level: usize,
    pub input: (usize, usize),
    pub unit_output: (usize, usize),
    pub pooled: (usize, usize),
}

/// Per-level map sizes for an input of `height × width`.
pub fn level_geometry(
    config: &HopConfig,
    height: usize,
    width: usize,
) -> Result<Vec<LevelGeometry>> {
    config.validate()?;
    let mut dims = (height, width);
    let mut out = Vec::with_capacity(config.levels);
    for level in 1..=config.levels {
        let unit_output = match (
            valid_extent(dims.0, config.window, config.stride),
            valid_extent(dims.1, config.window, config.stride),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::Geometry {
                    level,
                    reason: format!(
                        "input {}x{} smaller than window {}",
                        dims.0, dims.1, config.window
                    ),
                })
            }
        };
        let pooled = (
            unit_output.0 / config.pool_size,
            unit_output.1 / config.pool_size,
        );
        if pooled.0 == 0 || pooled.1 == 0 {
            return Err(Error::Geometry {
                level,
                reason: format!(
                    "unit output {}x{} smaller than pool {}",
                    unit_output.0, unit_output.1, config.pool_size
                ),
            });
        }
        out.push(LevelGeometry {
            level,
            input: dims,
            unit_output,
            pooled,
        });
        dims = pooled;
    }
    Ok(out)
}

/// Non-overlapping `pool × pool` max-pooling; trailing rows/cols are dropped.
pub fn max_pool<T: Scalar>(map: &ResponseMap<T>, pool: usize) -> Result<ResponseMap<T>> {
    if pool == 0 {
        return Err(Error::InvalidConfig("pool size must be at least 1".into()));
    }
    if map.rows() < pool || map.cols() < pool {
        return Err(Error::Dimension(format!(
            "map {}x{} smaller than pool window {pool}x{pool}",
            map.rows(),
            map.cols()
        )));
    }
    let (rows, cols) = (map.rows() / pool, map.cols() / pool);
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut best = map.get(r * pool, c * pool);
            for dr in 0..pool {
                for dc in 0..pool {
                    let v = map.get(r * pool + dr, c * pool + dc);
                    if v > best {
                        best = v;
                    }
                }
            }
            data.push(best);
        }
    }
    ResponseMap::new(rows, cols, data)
}

/// Path of kernel indices from the root, e.g. `3-0-1` is AC kernel 1 of the
/// unit fed by channel `3-0`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChannelId(Vec<usize>);

impl ChannelId {
    pub fn root(kernel_index: usize) -> Self {
        Self(vec![kernel_index])
    }

    pub fn from_path(path: Vec<usize>) -> Result<Self> {
        if path.is_empty() {
            return Err(Error::Schema("channel path must not be empty".into()));
        }
        Ok(Self(path))
    }

    pub fn child(&self, kernel_index: usize) -> Self {
        let mut path = self.0.clone();
        path.push(kernel_index);
        Self(path)
    }

    pub fn parent(&self) -> Option<Self> {
        (self.0.len() > 1).then(|| Self(self.0[..self.0.len() - 1].to_vec()))
    }

    pub fn level(&self) -> usize {
        self.0.len()
    }

    pub fn kernel_index(&self) -> usize {
        *self.0.last().expect("non-empty path")
    }

    pub fn path(&self) -> &[usize] {
        &self.0
    }

    /// True when every kernel on the path is the DC kernel.
    pub fn is_pure_dc(&self) -> bool {
        self.0.iter().all(|&k| k == 0)
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, k) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{k}")?;
        }
        Ok(())
    }
}

impl FromStr for ChannelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let path = s
            .split('-')
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| Error::Schema(format!("bad channel id '{s}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_path(path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelStatus {
    Discarded,
    Forwarded,
    Output,
}

impl ChannelStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelStatus::Discarded => "discarded",
            ChannelStatus::Forwarded => "forwarded",
            ChannelStatus::Output => "output",
        }
    }
}

impl FromStr for ChannelStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discarded" => Ok(Self::Discarded),
            "forwarded" => Ok(Self::Forwarded),
            "output" => Ok(Self::Output),
            other => Err(Error::Schema(format!("unknown channel status '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelNode<T> {
    pub id: ChannelId,
    pub energy: T,
    pub status: ChannelStatus,
}

impl<T> ChannelNode<T> {
    pub fn level(&self) -> usize {
        self.id.level()
    }

    pub fn parent(&self) -> Option<ChannelId> {
        self.id.parent()
    }

    pub fn kernel_index(&self) -> usize {
        self.id.kernel_index()
    }
}

/// One fitted unit and the channel it consumes (`None` for the level-1 unit).
#[derive(Debug, Clone, PartialEq)]
pub struct HopUnit<T: Scalar> {
    pub input: Option<ChannelId>,
    pub kernels: SaabKernels<T>,
}

impl<T: Scalar> HopUnit<T> {
    pub fn level(&self) -> usize {
        self.input.as_ref().map_or(1, |id| id.level() + 1)
    }

    pub fn child_id(&self, kernel_index: usize) -> ChannelId {
        match &self.input {
            None => ChannelId::root(kernel_index),
            Some(parent) => parent.child(kernel_index),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HopModel<T: Scalar> {
    config: HopConfig,
    input_shape: (usize, usize, usize),
    geometry: Vec<LevelGeometry>,
    units: Vec<Vec<HopUnit<T>>>,
    nodes: Vec<ChannelNode<T>>,
    node_index: HashMap<ChannelId, usize>,
}

impl<T: Scalar> HopModel<T> {
    /// Assembles a model from stored parts and checks the tree is well formed.
    pub fn from_parts(
        config: HopConfig,
        input_shape: (usize, usize, usize),
        units: Vec<Vec<HopUnit<T>>>,
        nodes: Vec<ChannelNode<T>>,
    ) -> Result<Self> {
        let geometry = level_geometry(&config, input_shape.0, input_shape.1)?;
        if units.len() != config.levels {
            return Err(Error::Schema(format!(
                "expected {} unit levels, got {}",
                config.levels,
                units.len()
            )));
        }
        let mut node_index = HashMap::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            if node.level() > config.levels {
                return Err(Error::Schema(format!(
                    "channel {} deeper than the model",
                    node.id
                )));
            }
            if node_index.insert(node.id.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate channel {}", node.id)));
            }
        }
        let model = Self {
            config,
            input_shape,
            geometry,
            units,
            nodes,
            node_index,
        };
        model.check_tree()?;
        Ok(model)
    }

    fn check_tree(&self) -> Result<()> {
        let first = &self.units[0];
        if first.len() != 1 || first[0].input.is_some() {
            return Err(Error::Schema(
                "level 1 must hold exactly one root unit".into(),
            ));
        }
        if first[0].kernels.n() != self.config.window * self.config.window * self.input_shape.2 {
            return Err(Error::Schema(
                "level-1 unit dimensionality does not match window".into(),
            ));
        }
        let mut fed: HashMap<&ChannelId, usize> = HashMap::new();
        for (li, level_units) in self.units.iter().enumerate() {
            for unit in level_units {
                if unit.level() != li + 1 {
                    return Err(Error::Schema("unit stored at the wrong level".into()));
                }
                if let Some(input) = &unit.input {
                    *fed.entry(input).or_default() += 1;
                    if unit.kernels.n() != self.config.window * self.config.window {
                        return Err(Error::Schema(format!(
                            "unit fed by {input} has wrong dimensionality"
                        )));
                    }
                }
                for j in 0..=unit.kernels.k() {
                    if !self.node_index.contains_key(&unit.child_id(j)) {
                        return Err(Error::Schema(format!(
                            "missing channel record {}",
                            unit.child_id(j)
                        )));
                    }
                }
            }
        }
        for node in &self.nodes {
            if let Some(parent) = node.parent() {
                match self.node(&parent) {
                    Some(p) if p.status == ChannelStatus::Forwarded => {}
                    _ => {
                        return Err(Error::Schema(format!(
                            "channel {} has no forwarded parent",
                            node.id
                        )))
                    }
                }
            }
            let expected = match node.status {
                ChannelStatus::Forwarded => 1,
                _ => 0,
            };
            if fed.get(&node.id).copied().unwrap_or(0) != expected {
                return Err(Error::Schema(format!(
                    "channel {} ({}) must feed {expected} unit(s)",
                    node.id,
                    node.status.as_str()
                )));
            }
            let is_last = node.level() == self.config.levels;
            let ok = match node.status {
                ChannelStatus::Discarded => true,
                ChannelStatus::Forwarded => !is_last,
                ChannelStatus::Output => is_last,
            };
            if !ok {
                return Err(Error::Schema(format!(
                    "channel {} has status {} at level {}",
                    node.id,
                    node.status.as_str(),
                    node.level()
                )));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &HopConfig {
        &self.config
    }

    /// `(height, width, channels)` of the training images.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn geometry(&self) -> &[LevelGeometry] {
        &self.geometry
    }

    /// Units grouped by level (index 0 is level 1).
    pub fn units(&self) -> &[Vec<HopUnit<T>>] {
        &self.units
    }

    pub fn nodes(&self) -> &[ChannelNode<T>] {
        &self.nodes
    }

    pub fn node(&self, id: &ChannelId) -> Option<&ChannelNode<T>> {
        self.node_index.get(id).map(|&i| &self.nodes[i])
    }

    /// Every channel that was not discarded.
    pub fn surviving_ids(&self) -> Vec<ChannelId> {
        self.nodes
            .iter()
            .filter(|n| n.status != ChannelStatus::Discarded)
            .map(|n| n.id.clone())
            .collect()
    }

    pub fn output_ids(&self) -> Vec<ChannelId> {
        self.nodes
            .iter()
            .filter(|n| n.status == ChannelStatus::Output)
            .map(|n| n.id.clone())
            .collect()
    }

    /// Spatial size of every output map.
    pub fn output_channel_shapes(&self) -> Vec<(ChannelId, (usize, usize))> {
        let shape = self.geometry.last().expect("at least one level").pooled;
        self.output_ids()
            .into_iter()
            .map(|id| (id, shape))
            .collect()
    }

    /// Runs a trained model over one image, returning the output channels in
    /// node order.
    pub fn infer(&self, image: &ImageTensor<T>) -> Result<Vec<(ChannelId, ResponseMap<T>)>> {
        if image.shape() != self.input_shape {
            return Err(Error::Dimension(format!(
                "image is {:?}, model was trained on {:?}",
                image.shape(),
                self.input_shape
            )));
        }
        let root = &self.units[0][0];
        let patches = extract_patches(image, self.config.window, self.config.stride)?;
        let mut outputs: HashMap<ChannelId, ResponseMap<T>> = HashMap::new();
        let mut frontier: HashMap<ChannelId, ResponseMap<T>> = HashMap::new();
        self.route(root, &patches, &mut frontier, &mut outputs)?;
        for level_units in &self.units[1..] {
            let mut next = HashMap::new();
            for unit in level_units {
                let input = unit.input.as_ref().expect("non-root unit has an input");
                let map = frontier
                    .remove(input)
                    .ok_or_else(|| Error::Schema(format!("no map computed for {input}")))?;
                let patches = extract_map_patches(&map, self.config.window, self.config.stride)?;
                self.route(unit, &patches, &mut next, &mut outputs)?;
            }
            frontier = next;
        }
        Ok(self
            .nodes
            .iter()
            .filter(|n| n.status == ChannelStatus::Output)
            .map(|n| {
                let map = outputs.remove(&n.id).expect("output computed");
                (n.id.clone(), map)
            })
            .collect())
    }

    fn route(
        &self,
        unit: &HopUnit<T>,
        patches: &PatchMatrix<T>,
        forwarded: &mut HashMap<ChannelId, ResponseMap<T>>,
        outputs: &mut HashMap<ChannelId, ResponseMap<T>>,
    ) -> Result<()> {
        let wanted: Vec<(usize, ChannelId, ChannelStatus)> = (0..=unit.kernels.k())
            .filter_map(|j| {
                let id = unit.child_id(j);
                let status = self.node(&id)?.status;
                (status != ChannelStatus::Discarded).then_some((j, id, status))
            })
            .collect();
        let maps = forward_unit(
            &unit.kernels,
            patches,
            wanted.iter().map(|w| w.0),
            self.config.pool_size,
        )?;
        for ((_, id, status), map) in wanted.into_iter().zip(maps) {
            match status {
                ChannelStatus::Forwarded => forwarded.insert(id, map),
                _ => outputs.insert(id, map),
            };
        }
        Ok(())
    }
}

/// Applies a unit and returns the pooled maps of the requested kernels.
fn forward_unit<T: Scalar>(
    kernels: &SaabKernels<T>,
    patches: &PatchMatrix<T>,
    columns: impl Iterator<Item = usize>,
    pool: usize,
) -> Result<Vec<ResponseMap<T>>> {
    let responses = apply_saab(kernels, patches)?;
    columns
        .map(|j| max_pool(&response_map(&responses, j, patches.source_grid())?, pool))
        .collect()
}

/// A channel waiting for its unit, with its pooled map for every training image.
struct Pending<T: Scalar> {
    id: ChannelId,
    energy: T,
    maps: Vec<ResponseMap<T>>,
}

struct Grown<T: Scalar> {
    unit: HopUnit<T>,
    nodes: Vec<ChannelNode<T>>,
    next: Vec<Pending<T>>,
}

fn grow<T, F>(
    config: &HopConfig,
    input: Option<ChannelId>,
    parent_energy: T,
    sources: usize,
    patches_of: F,
    is_last: bool,
) -> Result<Grown<T>>
where
    T: Scalar,
    F: Fn(usize) -> Result<PatchMatrix<T>> + Sync,
{
    let moments = PatchMoments::collect(sources, config.max_patches_per_unit, &patches_of)?;
    let n = patches_of(0)?.cols();
    let cap = config.max_kernels_per_unit.map(|c| c.min(n - 1));
    let kernels = moments.fit(cap)?;
    let unit = HopUnit { input, kernels };

    let threshold = T::lit(config.energy_threshold);
    let mut nodes = Vec::with_capacity(unit.kernels.k() + 1);
    let mut forwarded = Vec::new();
    for (j, &fraction) in unit.kernels.explained_variance().iter().enumerate() {
        let energy = parent_energy * fraction;
        let status = if energy < threshold {
            ChannelStatus::Discarded
        } else if is_last {
            ChannelStatus::Output
        } else {
            forwarded.push((j, energy));
            ChannelStatus::Forwarded
        };
        nodes.push(ChannelNode {
            id: unit.child_id(j),
            energy,
            status,
        });
    }

    let mut next: Vec<Pending<T>> = forwarded
        .iter()
        .map(|&(j, energy)| Pending {
            id: unit.child_id(j),
            energy,
            maps: Vec::with_capacity(sources),
        })
        .collect();
    if !next.is_empty() {
        let per_source: Vec<Vec<ResponseMap<T>>> = (0..sources)
            .into_par_iter()
            .map(|i| {
                let patches = patches_of(i)?;
                forward_unit(
                    &unit.kernels,
                    &patches,
                    forwarded.iter().map(|f| f.0),
                    config.pool_size,
                )
            })
            .collect::<Result<_>>()?;
        for maps in per_source {
            for (pending, map) in next.iter_mut().zip(maps) {
                pending.maps.push(map);
            }
        }
    }
    Ok(Grown { unit, nodes, next })
}

/// Fits the whole tree level by level.
pub fn train_tree<T: Scalar>(images: &[ImageTensor<T>], config: &HopConfig) -> Result<HopModel<T>> {
    config.validate()?;
    if images.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 training images, got {}",
            images.len()
        )));
    }
    let shape = images[0].shape();
    if let Some((i, img)) = images
        .iter()
        .enumerate()
        .find(|(_, im)| im.shape() != shape)
    {
        return Err(Error::Dimension(format!(
            "image {i} is {:?}, expected {shape:?}",
            img.shape()
        )));
    }
    level_geometry(config, shape.0, shape.1)?;

    let (window, stride) = (config.window, config.stride);
    let root = grow(
        config,
        None,
        T::one(),
        images.len(),
        |i| extract_patches(&images[i], window, stride),
        config.levels == 1,
    )?;
    let mut units = vec![vec![root.unit]];
    let mut nodes = root.nodes;
    let mut pending = root.next;

    for level in 2..=config.levels {
        let is_last = level == config.levels;
        let grown: Vec<Grown<T>> = pending
            .par_iter()
            .map(|p| {
                grow(
                    config,
                    Some(p.id.clone()),
                    p.energy,
                    p.maps.len(),
                    |i| extract_map_patches(&p.maps[i], window, stride),
                    is_last,
                )
            })
            .collect::<Result<_>>()?;
        let mut level_units = Vec::with_capacity(grown.len());
        let mut next = Vec::new();
        for g in grown {
            level_units.push(g.unit);
            nodes.extend(g.nodes);
            next.extend(g.next);
        }
        units.push(level_units);
        pending = next;
    }

    HopModel::from_parts(config.clone(), shape, units, nodes)
}

/// Free-function form of [`HopModel::infer`].
pub fn infer_tree<T: Scalar>(
    model: &HopModel<T>,
    image: &ImageTensor<T>,
) -> Result<Vec<(ChannelId, ResponseMap<T>)>> {
    model.infer(image)
}
