//! The face-classification layer stack: validated architecture
//! description, shape inference, seeded initialization, tapped forward
//! passes and the matching backward walk.
//!
//! The resolution of the published layer table lives in
//! [`NetConfig::standard`]; every stride/padding choice is in one place so
//! it can be re-pinned.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{
    affine, affine_backward, conv2d, conv2d_backward, dropout, dropout_backward, lrn,
    lrn_backward, pool2d, pool2d_backward, prelu, prelu_backward, ConvParams, DropoutMask,
    LrnParams, Phase, PoolMode, PreluParams, Scalar, Tensor,
};

/// Minimum input side for which every pooling/conv window in the stack fits.
pub const MIN_INPUT_SIDE: usize = 29;

/// Named points where activations are snapshotted during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TapPoint {
    Conv2,
    Conv3,
    Conv4,
    Conv5,
    Conv6,
    Fc1,
    Fc2,
}

impl TapPoint {
    pub const ALL: [TapPoint; 7] = [
        TapPoint::Conv2,
        TapPoint::Conv3,
        TapPoint::Conv4,
        TapPoint::Conv5,
        TapPoint::Conv6,
        TapPoint::Fc1,
        TapPoint::Fc2,
    ];

    pub const CONV: [TapPoint; 5] =
        [TapPoint::Conv2, TapPoint::Conv3, TapPoint::Conv4, TapPoint::Conv5, TapPoint::Conv6];

    pub fn is_fc(self) -> bool {
        matches!(self, TapPoint::Fc1 | TapPoint::Fc2)
    }

    /// Short representation name used downstream ("C2" .. "F2").
    pub fn rep_name(self) -> &'static str {
        match self {
            TapPoint::Conv2 => "C2",
            TapPoint::Conv3 => "C3",
            TapPoint::Conv4 => "C4",
            TapPoint::Conv5 => "C5",
            TapPoint::Conv6 => "C6",
            TapPoint::Fc1 => "F1",
            TapPoint::Fc2 => "F2",
        }
    }

    /// Stable id used by the feature cache file format.
    pub fn rep_id(self) -> u8 {
        match self {
            TapPoint::Conv2 => 0,
            TapPoint::Conv3 => 1,
            TapPoint::Conv4 => 2,
            TapPoint::Conv5 => 3,
            TapPoint::Conv6 => 4,
            TapPoint::Fc1 => 5,
            TapPoint::Fc2 => 6,
        }
    }

    pub fn from_rep_id(id: u8) -> Option<TapPoint> {
        TapPoint::ALL.get(id as usize).copied()
    }

    pub fn from_rep_name(name: &str) -> Option<TapPoint> {
        TapPoint::ALL.iter().copied().find(|t| t.rep_name() == name)
    }
}

/// One named row of the stack. Convolution and affine rows carry their
/// rectifier inline; the tap (when present) is taken after the full row.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerOp {
    Conv { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize, prelu: bool },
    Pool { mode: PoolMode, window: usize, stride: usize },
    Lrn(LrnParams),
    Flatten,
    Affine { in_dim: usize, out_dim: usize, prelu: bool },
    Dropout { rate: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub op: LayerOp,
    pub tap: Option<TapPoint>,
}

impl Layer {
    fn new(name: &str, op: LayerOp) -> Self {
        Layer { name: name.to_owned(), op, tap: None }
    }

    fn tapped(name: &str, op: LayerOp, tap: TapPoint) -> Self {
        Layer { name: name.to_owned(), op, tap: Some(tap) }
    }

    /// Number of parameter slopes the row's rectifier carries, if any.
    fn prelu_channels(&self) -> Option<usize> {
        match self.op {
            LayerOp::Conv { out_ch, prelu: true, .. } => Some(out_ch),
            LayerOp::Affine { out_dim, prelu: true, .. } => Some(out_dim),
            _ => None,
        }
    }
}

/// Build configuration accepted by [`build_network`].
#[derive(Clone, Debug)]
pub enum NetConfig {
    /// The published architecture. `doubled` selects the 224-input
    /// variant; `num_classes` attaches a classification head for
    /// training.
    Standard { doubled: bool, num_classes: Option<usize> },
    /// A fully custom stack, validated by shape inference.
    Custom { layers: Vec<Layer>, input_side: usize, num_classes: Option<usize> },
}

impl NetConfig {
    pub fn standard() -> Self {
        NetConfig::Standard { doubled: false, num_classes: None }
    }
}

/// Validated layer stack plus its build geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub layers: Vec<Layer>,
    pub input_channels: usize,
    /// Input side the FC weights were built for.
    pub input_side: usize,
    pub num_classes: Option<usize>,
}

/// Activation shape at one row, as reported by [`infer_shapes`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ShapeEntry {
    Map { channels: usize, height: usize, width: usize },
    Flat(usize),
    /// FC rows when the queried side differs from the build geometry.
    Unavailable,
}

/// Parameter blobs of one named row.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub slopes: Option<Tensor<T>>,
}

/// Store metadata carried through serialization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightMeta {
    pub format_version: u16,
    pub input_side: u32,
    pub seed: u64,
}

/// Named parameter blobs for every parameterized row of a [`NetworkSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore<T> {
    pub entries: BTreeMap<String, ParamSet<T>>,
    pub meta: WeightMeta,
}

impl<T: Scalar> WeightStore<T> {
    pub fn cast<U: Scalar>(&self) -> WeightStore<U> {
        WeightStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        ParamSet {
                            kernel: p.kernel.cast(),
                            bias: p.bias.cast(),
                            slopes: p.slopes.as_ref().map(Tensor::cast),
                        },
                    )
                })
                .collect(),
            meta: self.meta.clone(),
        }
    }

    /// Checks exact correspondence with the spec: every parameterized
    /// layer present with matching shapes, and nothing else.
    pub fn validate_against(&self, spec: &NetworkSpec) -> Result<()> {
        let mut expected = 0usize;
        for layer in &spec.layers {
            let want = match layer.op {
                LayerOp::Conv { in_ch, out_ch, kernel, .. } => {
                    Some((vec![out_ch, in_ch, kernel, kernel], out_ch))
                }
                LayerOp::Affine { in_dim, out_dim, .. } => Some((vec![out_dim, in_dim], out_dim)),
                _ => None,
            };
            let Some((kernel_shape, out)) = want else { continue };
            expected += 1;
            let entry = self.entries.get(&layer.name).ok_or_else(|| {
                Error::Validation(format!("weight store is missing layer {:?}", layer.name))
            })?;
            if entry.kernel.shape() != kernel_shape.as_slice() {
                return Err(Error::Validation(format!(
                    "layer {:?}: kernel shape {:?}, expected {kernel_shape:?}",
                    layer.name,
                    entry.kernel.shape()
                )));
            }
            if entry.bias.shape() != [out] {
                return Err(Error::Validation(format!(
                    "layer {:?}: bias shape {:?}, expected [{out}]",
                    layer.name,
                    entry.bias.shape()
                )));
            }
            match (layer.prelu_channels(), &entry.slopes) {
                (Some(c), Some(s)) if s.shape() == [c] => {}
                (None, None) => {}
                _ => {
                    return Err(Error::Validation(format!(
                        "layer {:?}: rectifier slopes do not match the spec",
                        layer.name
                    )))
                }
            }
        }
        if self.entries.len() != expected {
            let extra: Vec<&String> = self
                .entries
                .keys()
                .filter(|k| !spec.layers.iter().any(|l| &l.name == *k))
                .collect();
            return Err(Error::Validation(format!(
                "weight store has {} entries, spec needs {expected}; extras: {extra:?}",
                self.entries.len()
            )));
        }
        Ok(())
    }

    /// FNV-1a over the bit patterns of all parameters, for provenance.
    pub fn content_hash(&self) -> u64 {
        fn eat(h: u64, bits: u64) -> u64 {
            let mut h = h;
            for byte in bits.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            h
        }
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, p) in &self.entries {
            for b in name.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            for t in [Some(&p.kernel), Some(&p.bias), p.slopes.as_ref()].into_iter().flatten() {
                for &v in t.data() {
                    h = eat(h, v.as_f64().to_bits());
                }
            }
        }
        h
    }
}

/// The published stack with every internal inconsistency resolved:
/// - Conv4/Conv5 produce 384 channels, Conv6 produces 256 (the Output
///   and Representation columns are authoritative over the kernel column);
/// - Conv6 carries stride 2 (the only mechanism for 14 -> 7);
/// - Conv1 is stride 1 pad 1 and Pool1 halves 112 -> 56;
/// - the halving pools listed after a tap row execute before it, so the
///   tapped activation matches the listed output;
/// - all 3x3 convs use pad 1, all 1x1 convs pad 0 stride 1;
/// - Pool 6 is a global average pool feeding FC1.
fn standard_layers(conv6_side: usize, fc_geometry_valid: bool) -> Vec<Layer> {
    let conv = |name: &str, in_ch, out_ch, kernel, stride, padding| {
        Layer::new(name, LayerOp::Conv { in_ch, out_ch, kernel, stride, padding, prelu: true })
    };
    let max2 = |name: &str| Layer::new(name, LayerOp::Pool { mode: PoolMode::Max, window: 2, stride: 2 });
    let rnorm = |name: &str| Layer::new(name, LayerOp::Lrn(LrnParams::window5()));

    let mut layers = vec![
        conv("Conv1", 3, 64, 3, 1, 1),
        max2("Pool1"),
        rnorm("RNorm1"),
        conv("Conv2a", 64, 64, 1, 1, 0),
        max2("Pool2"),
        conv("Conv2", 64, 192, 3, 1, 1),
    ];
    // RNorm2 belongs to the Conv2 row's tap.
    layers.push(Layer::tapped("RNorm2", LayerOp::Lrn(LrnParams::window5()), TapPoint::Conv2));
    layers.push(conv("Conv3a", 192, 192, 1, 1, 0));
    layers.push(max2("Pool3"));
    layers.push({
        let mut l = conv("Conv3", 192, 384, 3, 1, 1);
        l.tap = Some(TapPoint::Conv3);
        l
    });
    layers.push(conv("Conv4a", 384, 384, 1, 1, 0));
    layers.push({
        let mut l = conv("Conv4", 384, 384, 3, 1, 1);
        l.tap = Some(TapPoint::Conv4);
        l
    });
    layers.push(conv("Conv5a", 384, 256, 1, 1, 0));
    layers.push({
        let mut l = conv("Conv5", 256, 384, 3, 1, 1);
        l.tap = Some(TapPoint::Conv5);
        l
    });
    layers.push(conv("Conv6a", 384, 256, 1, 1, 0));
    layers.push({
        let mut l = conv("Conv6", 256, 256, 3, 2, 1);
        l.tap = Some(TapPoint::Conv6);
        l
    });
    if fc_geometry_valid {
        layers.push(Layer::new(
            "Pool6",
            LayerOp::Pool { mode: PoolMode::Average, window: conv6_side, stride: conv6_side },
        ));
        layers.push(Layer::new("Flatten", LayerOp::Flatten));
        layers.push({
            let mut l = Layer::new("FC1", LayerOp::Affine { in_dim: 256, out_dim: 512, prelu: true });
            l.tap = Some(TapPoint::Fc1);
            l
        });
        layers.push(Layer::new("Drop1", LayerOp::Dropout { rate: 0.5 }));
        layers.push({
            let mut l = Layer::new("FC2", LayerOp::Affine { in_dim: 512, out_dim: 512, prelu: true });
            l.tap = Some(TapPoint::Fc2);
            l
        });
    }
    layers
}

fn conv6_side_for(input_side: usize) -> usize {
    propagate_conv_side(input_side)
}

/// Closed-form spatial side after the conv trunk (through Conv6).
fn propagate_conv_side(s: usize) -> usize {
    let after_pools = s / 2 / 2 / 2; // Pool1..Pool3 each halve with floor
    (after_pools + 2 - 3) / 2 + 1 // Conv6: k3 s2 p1
}

/// Builds and validates a network from a preset or custom configuration.
pub fn build_network(config: &NetConfig) -> Result<NetworkSpec> {
    let spec = match config {
        NetConfig::Standard { doubled, num_classes } => {
            let input_side = if *doubled { 224 } else { 112 };
            let mut layers = standard_layers(conv6_side_for(input_side), true);
            if let Some(k) = num_classes {
                layers.push(Layer::new("Head", LayerOp::Affine { in_dim: 512, out_dim: *k, prelu: false }));
            }
            NetworkSpec { layers, input_channels: 3, input_side, num_classes: *num_classes }
        }
        NetConfig::Custom { layers, input_side, num_classes } => NetworkSpec {
            layers: layers.clone(),
            input_channels: 3,
            input_side: *input_side,
            num_classes: *num_classes,
        },
    };
    // Shape inference at the build geometry doubles as stack validation.
    infer_shapes(&spec, spec.input_side)?;
    Ok(spec)
}

/// Propagates activation shapes through the stack at input side `s`.
///
/// FC rows are reported [`ShapeEntry::Unavailable`] when `s` differs
/// from the geometry the spec was built for.
pub fn infer_shapes(spec: &NetworkSpec, s: usize) -> Result<Vec<(String, ShapeEntry)>> {
    if s < MIN_INPUT_SIDE {
        return Err(Error::Argument(format!(
            "input side {s} below the minimum of {MIN_INPUT_SIDE}"
        )));
    }
    let fc_available = s == spec.input_side;
    // At a foreign geometry the FC head (everything past the last conv
    // tap) is reported unavailable instead of failing propagation.
    let head_start = if fc_available || !spec.layers.iter().any(|l| l.op == LayerOp::Flatten) {
        spec.layers.len()
    } else {
        spec.layers
            .iter()
            .rposition(|l| l.tap.map(|t| !t.is_fc()).unwrap_or(false))
            .map(|i| i + 1)
            .unwrap_or(spec.layers.len())
    };
    let mut out = Vec::with_capacity(spec.layers.len());
    let mut cur = ShapeEntry::Map { channels: spec.input_channels, height: s, width: s };
    for (idx, layer) in spec.layers.iter().enumerate() {
        if idx >= head_start {
            out.push((layer.name.clone(), ShapeEntry::Unavailable));
            cur = ShapeEntry::Unavailable;
            continue;
        }
        let next = match (&layer.op, &cur) {
            (
                &LayerOp::Conv { in_ch, out_ch, kernel, stride, padding, .. },
                &ShapeEntry::Map { channels, height, width },
            ) => {
                if channels != in_ch {
                    return Err(Error::Validation(format!(
                        "layer {:?} expects {in_ch} input channels but receives {channels}",
                        layer.name
                    )));
                }
                let oh = conv_extent(height, kernel, stride, padding, &layer.name)?;
                let ow = conv_extent(width, kernel, stride, padding, &layer.name)?;
                ShapeEntry::Map { channels: out_ch, height: oh, width: ow }
            }
            (&LayerOp::Pool { window, stride, .. }, &ShapeEntry::Map { channels, height, width }) => {
                if window > height || window > width {
                    return Err(Error::Validation(format!(
                        "layer {:?}: pool window {window} exceeds {height}x{width}",
                        layer.name
                    )));
                }
                ShapeEntry::Map {
                    channels,
                    height: (height - window) / stride + 1,
                    width: (width - window) / stride + 1,
                }
            }
            (LayerOp::Lrn(_), ShapeEntry::Map { .. }) => cur.clone(),
            (LayerOp::Flatten, &ShapeEntry::Map { channels, height, width }) => {
                if fc_available {
                    ShapeEntry::Flat(channels * height * width)
                } else {
                    ShapeEntry::Unavailable
                }
            }
            (&LayerOp::Affine { in_dim, out_dim, .. }, &ShapeEntry::Flat(n)) => {
                if n != in_dim {
                    return Err(Error::Validation(format!(
                        "layer {:?} expects input length {in_dim} but receives {n}",
                        layer.name
                    )));
                }
                ShapeEntry::Flat(out_dim)
            }
            (LayerOp::Dropout { .. }, ShapeEntry::Flat(_)) => cur.clone(),
            (_, ShapeEntry::Unavailable) => ShapeEntry::Unavailable,
            _ => {
                return Err(Error::Validation(format!(
                    "layer {:?} cannot consume activation {:?}",
                    layer.name, cur
                )))
            }
        };
        out.push((layer.name.clone(), next.clone()));
        cur = next;
    }
    Ok(out)
}

fn conv_extent(extent: usize, k: usize, stride: usize, padding: usize, name: &str) -> Result<usize> {
    let padded = extent + 2 * padding;
    if padded < k {
        return Err(Error::Validation(format!(
            "layer {name:?}: kernel {k} exceeds padded extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// He-style seeded initialization: kernels from N(0, 2/fan_in), biases
/// zero, rectifier slopes 0.25.
pub fn init_weights<T: Scalar>(spec: &NetworkSpec, seed: u64) -> WeightStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = BTreeMap::new();
    for layer in &spec.layers {
        let (kernel_shape, fan_in, out) = match layer.op {
            LayerOp::Conv { in_ch, out_ch, kernel, .. } => {
                (vec![out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel, out_ch)
            }
            LayerOp::Affine { in_dim, out_dim, .. } => (vec![out_dim, in_dim], in_dim, out_dim),
            _ => continue,
        };
        let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("positive sigma");
        let kernel = Tensor::from_fn(&kernel_shape, |_| T::from_f64(normal.sample(&mut rng)));
        let slopes = layer.prelu_channels().map(|c| Tensor::full(&[c], T::from_f64(0.25)));
        entries.insert(
            layer.name.clone(),
            ParamSet { kernel, bias: Tensor::zeros(&[out]), slopes },
        );
    }
    WeightStore {
        entries,
        meta: WeightMeta { format_version: 1, input_side: spec.input_side as u32, seed },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Infer,
    /// Dropout active; forward state cached for a backward pass.
    TrainCache,
}

/// Snapshots captured during one forward pass.
#[derive(Clone, Debug)]
pub struct Activations<T> {
    pub taps: BTreeMap<TapPoint, Tensor<T>>,
    /// Final logits when the spec carries a classification head.
    pub logits: Option<Tensor<T>>,
}

enum LayerState<T> {
    Conv { input: Tensor<T>, pre_act: Option<Tensor<T>> },
    Pool { input: Tensor<T> },
    Lrn { input: Tensor<T> },
    Flatten { input_shape: Vec<usize> },
    Affine { input: Tensor<T>, pre_act: Option<Tensor<T>> },
    Dropout { mask: Option<DropoutMask> },
}

/// Cached forward state consumed by [`backward`].
pub struct ForwardCache<T> {
    states: Vec<LayerState<T>>,
    executed: usize,
}

/// Per-layer parameter gradients, keyed like the weight store.
pub type ParamGrads<T> = BTreeMap<String, ParamSet<T>>;

fn conv_params<T: Scalar>(layer: &Layer, set: &ParamSet<T>) -> Result<ConvParams<T>> {
    match layer.op {
        LayerOp::Conv { stride, padding, .. } => {
            ConvParams::new(set.kernel.clone(), set.bias.clone(), stride, padding)
        }
        _ => Err(Error::State(format!("layer {:?} is not a convolution", layer.name))),
    }
}

struct ForwardOutcome<T> {
    activations: Activations<T>,
    cache: Option<ForwardCache<T>>,
}

fn run_forward<T: Scalar>(
    spec: &NetworkSpec,
    store: &WeightStore<T>,
    input: &Tensor<T>,
    taps: &[TapPoint],
    mode: ExecMode,
    rng: Option<&mut ChaCha8Rng>,
    want_cache: bool,
) -> Result<ForwardOutcome<T>> {
    let (c, h, w) = input.dims3()?;
    if c != spec.input_channels || h != w {
        return Err(Error::Geometry(format!(
            "input must be square with {} channels, got {c}x{h}x{w}",
            spec.input_channels
        )));
    }
    if h < MIN_INPUT_SIDE {
        return Err(Error::Geometry(format!(
            "input side {h} below the minimum of {MIN_INPUT_SIDE}"
        )));
    }
    store.validate_against(spec)?;
    let geometry_matches = h == spec.input_side;
    let wants_fc = taps.iter().any(|t| t.is_fc()) || spec.num_classes.is_some();
    if wants_fc && !geometry_matches {
        return Err(Error::Geometry(format!(
            "FC execution requires input side {}, got {h}",
            spec.input_side
        )));
    }
    let last_needed = if geometry_matches {
        spec.layers.len()
    } else {
        // Headless run: stop after the last conv tap.
        spec.layers
            .iter()
            .rposition(|l| l.tap.map(|t| !t.is_fc()).unwrap_or(false))
            .map(|i| i + 1)
            .unwrap_or(spec.layers.len())
    };

    let mut fallback_rng;
    let rng = match rng {
        Some(r) => r,
        None => {
            fallback_rng = ChaCha8Rng::seed_from_u64(0);
            &mut fallback_rng
        }
    };
    let phase = match mode {
        ExecMode::Infer => Phase::Infer,
        ExecMode::TrainCache => Phase::Train,
    };

    let mut cur = input.clone();
    let mut acts = Activations { taps: BTreeMap::new(), logits: None };
    let mut states = Vec::new();
    for layer in spec.layers.iter().take(last_needed) {
        let next = match &layer.op {
            LayerOp::Conv { prelu: with_prelu, .. } => {
                let set = &store.entries[&layer.name];
                let params = conv_params(layer, set)?;
                let pre = conv2d(&cur, &params)?;
                let (out, pre_act) = if *with_prelu {
                    let slopes = set.slopes.as_ref().expect("validated");
                    let act = prelu(&pre, &PreluParams { slopes: slopes.clone() })?;
                    (act, Some(pre))
                } else {
                    (pre, None)
                };
                if want_cache {
                    states.push(LayerState::Conv { input: cur.clone(), pre_act });
                }
                out
            }
            &LayerOp::Pool { mode, window, stride } => {
                let out = pool2d(&cur, mode, window, stride)?;
                if want_cache {
                    states.push(LayerState::Pool { input: cur.clone() });
                }
                out
            }
            LayerOp::Lrn(p) => {
                let out = lrn(&cur, p)?;
                if want_cache {
                    states.push(LayerState::Lrn { input: cur.clone() });
                }
                out
            }
            LayerOp::Flatten => {
                let shape = cur.shape().to_vec();
                let n = cur.len();
                let out = cur.clone().reshape(&[n])?;
                if want_cache {
                    states.push(LayerState::Flatten { input_shape: shape });
                }
                out
            }
            LayerOp::Affine { prelu: with_prelu, .. } => {
                let set = &store.entries[&layer.name];
                let pre = affine(&cur, &set.kernel, &set.bias)?;
                let (out, pre_act) = if *with_prelu {
                    let slopes = set.slopes.as_ref().expect("validated");
                    let act = prelu(&pre, &PreluParams { slopes: slopes.clone() })?;
                    (act, Some(pre))
                } else {
                    (pre, None)
                };
                if want_cache {
                    states.push(LayerState::Affine { input: cur.clone(), pre_act });
                }
                out
            }
            &LayerOp::Dropout { rate } => {
                let (out, mask) = dropout(&cur, rate, rng, phase)?;
                if want_cache {
                    states.push(LayerState::Dropout { mask });
                }
                out
            }
        };
        if let Some(tap) = layer.tap {
            if taps.contains(&tap) {
                acts.taps.insert(tap, next.clone());
            }
        }
        cur = next;
    }
    if spec.num_classes.is_some() && geometry_matches {
        acts.logits = Some(cur);
    }
    for t in taps {
        if !acts.taps.contains_key(t) {
            return Err(Error::Geometry(format!("tap {t:?} was not reached by this execution")));
        }
    }
    Ok(ForwardOutcome {
        activations: acts,
        cache: want_cache.then_some(ForwardCache { states, executed: last_needed }),
    })
}

/// Runs the stack, snapshotting the requested taps.
///
/// Any square input of side >= [`MIN_INPUT_SIDE`] is accepted for conv
/// taps; FC taps (and the classifier head) require the build geometry.
pub fn forward<T: Scalar>(
    spec: &NetworkSpec,
    store: &WeightStore<T>,
    input: &Tensor<T>,
    taps: &[TapPoint],
    mode: ExecMode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Activations<T>> {
    run_forward(spec, store, input, taps, mode, rng, false).map(|o| o.activations)
}

/// Like [`forward`] but also returns the cached state the backward walk
/// needs.
pub fn forward_cached<T: Scalar>(
    spec: &NetworkSpec,
    store: &WeightStore<T>,
    input: &Tensor<T>,
    taps: &[TapPoint],
    mode: ExecMode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Activations<T>, ForwardCache<T>)> {
    run_forward(spec, store, input, taps, mode, rng, true)
        .map(|o| (o.activations, o.cache.expect("requested")))
}

/// Walks the stack in reverse from the upstream gradient of the final
/// output, returning parameter gradients and the input gradient.
pub fn backward<T: Scalar>(
    spec: &NetworkSpec,
    store: &WeightStore<T>,
    cache: &ForwardCache<T>,
    upstream: &Tensor<T>,
) -> Result<(ParamGrads<T>, Tensor<T>)> {
    if cache.states.len() != cache.executed || cache.executed != spec.layers.len() {
        return Err(Error::State(format!(
            "forward cache covers {} of {} layers",
            cache.states.len(),
            spec.layers.len()
        )));
    }
    let mut grads: ParamGrads<T> = BTreeMap::new();
    let mut g = upstream.clone();
    for (layer, state) in spec.layers.iter().zip(&cache.states).rev() {
        g = match (&layer.op, state) {
            (LayerOp::Conv { .. }, LayerState::Conv { input, pre_act }) => {
                let set = &store.entries[&layer.name];
                let params = conv_params(layer, set)?;
                let (g_pre, slope_grad) = match pre_act {
                    Some(pre) => {
                        let slopes = set.slopes.as_ref().expect("validated");
                        let (gi, gs) =
                            prelu_backward(pre, &PreluParams { slopes: slopes.clone() }, &g)?;
                        (gi, Some(gs))
                    }
                    None => (g, None),
                };
                let (g_in, g_kernel, g_bias) = conv2d_backward(input, &params, &g_pre)?;
                grads.insert(
                    layer.name.clone(),
                    ParamSet { kernel: g_kernel, bias: g_bias, slopes: slope_grad },
                );
                g_in
            }
            (&LayerOp::Pool { mode, window, stride }, LayerState::Pool { input }) => {
                pool2d_backward(input, mode, window, stride, &g)?
            }
            (LayerOp::Lrn(p), LayerState::Lrn { input }) => lrn_backward(input, p, &g)?,
            (LayerOp::Flatten, LayerState::Flatten { input_shape }) => {
                g.reshape(input_shape)?
            }
            (LayerOp::Affine { .. }, LayerState::Affine { input, pre_act }) => {
                let set = &store.entries[&layer.name];
                let (g_pre, slope_grad) = match pre_act {
                    Some(pre) => {
                        let slopes = set.slopes.as_ref().expect("validated");
                        let (gi, gs) =
                            prelu_backward(pre, &PreluParams { slopes: slopes.clone() }, &g)?;
                        (gi, Some(gs))
                    }
                    None => (g, None),
                };
                let (g_in, g_w, g_b) = affine_backward(input, &set.kernel, &g_pre)?;
                grads.insert(
                    layer.name.clone(),
                    ParamSet { kernel: g_w, bias: g_b, slopes: slope_grad },
                );
                g_in
            }
            (LayerOp::Dropout { .. }, LayerState::Dropout { mask }) => match mask {
                Some(m) => dropout_backward(m, &g)?,
                None => g,
            },
            _ => {
                return Err(Error::State(format!(
                    "cached state for layer {:?} does not match its kind",
                    layer.name
                )))
            }
        };
    }
    Ok((grads, g))
}
