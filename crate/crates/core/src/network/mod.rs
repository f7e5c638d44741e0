//! Sequential networks built from Linear, Conv2d, BatchNorm2d, MaxPool2d,
//! Flatten and ReLU layers, with hand-written backward passes and the
//! per-unit structural views that fusion and pruning operate on.

mod forward;

use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{conv_out_extent, Tensor};

pub use forward::{shape_chain, Gradients, Loss, Mode, Trace};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm2d {
        channels: usize,
    },
    /// Non-overlapping max pooling (stride equals the window).
    MaxPool2d {
        window: usize,
    },
    Flatten,
    Relu,
}

impl LayerSpec {
    pub fn is_parameterized_unit_layer(&self) -> bool {
        matches!(self, LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. })
    }

    /// Shapes of the trainable parameters.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Linear { in_features, out_features } => {
                vec![vec![out_features, in_features], vec![out_features]]
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => vec![
                vec![out_channels, in_channels, kernel_h, kernel_w],
                vec![out_channels],
            ],
            LayerSpec::BatchNorm2d { channels } => vec![vec![channels], vec![channels]],
            _ => Vec::new(),
        }
    }

    /// Shapes of the non-trainable state (BN running statistics).
    pub fn buffer_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::BatchNorm2d { channels } => vec![vec![channels], vec![channels]],
            _ => Vec::new(),
        }
    }
}

/// Per-sample activation shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureShape {
    Flat(usize),
    Image { c: usize, h: usize, w: usize },
}

impl FeatureShape {
    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        match *dims {
            [n] if n > 0 => Ok(FeatureShape::Flat(n)),
            [c, h, w] if c > 0 && h > 0 && w > 0 => Ok(FeatureShape::Image { c, h, w }),
            _ => Err(Error::ShapeMismatch(format!(
                "input shape must be [features] or [channels, height, width], got {dims:?}"
            ))),
        }
    }

    pub fn numel(&self) -> usize {
        match *self {
            FeatureShape::Flat(n) => n,
            FeatureShape::Image { c, h, w } => c * h * w,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            FeatureShape::Flat(n) => vec![n],
            FeatureShape::Image { c, h, w } => vec![c, h, w],
        }
    }
}

/// Output shape of `spec` applied to `input`.
pub fn infer_shape(spec: &LayerSpec, input: FeatureShape) -> Result<FeatureShape> {
    let bad = |msg: String| Err(Error::ShapeMismatch(msg));
    match (*spec, input) {
        (LayerSpec::Linear { in_features, out_features }, FeatureShape::Flat(n)) => {
            if n != in_features {
                return bad(format!("linear expects {in_features} inputs, got {n}"));
            }
            Ok(FeatureShape::Flat(out_features))
        }
        (
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            },
            FeatureShape::Image { c, h, w },
        ) => {
            if c != in_channels {
                return bad(format!("conv expects {in_channels} channels, got {c}"));
            }
            match (
                conv_out_extent(h, kernel_h, stride, padding),
                conv_out_extent(w, kernel_w, stride, padding),
            ) {
                (Some(oh), Some(ow)) => Ok(FeatureShape::Image { c: out_channels, h: oh, w: ow }),
                _ => bad(format!("kernel {kernel_h}x{kernel_w} does not fit {h}x{w}")),
            }
        }
        (LayerSpec::BatchNorm2d { channels }, FeatureShape::Image { c, .. }) => {
            if c != channels {
                return bad(format!("batch norm over {channels} channels, got {c}"));
            }
            Ok(input)
        }
        (LayerSpec::MaxPool2d { window }, FeatureShape::Image { c, h, w }) => {
            if window == 0 || window > h || window > w {
                return bad(format!("pool window {window} does not fit {h}x{w}"));
            }
            Ok(FeatureShape::Image { c, h: h / window, w: w / window })
        }
        (LayerSpec::Flatten, FeatureShape::Image { c, h, w }) => Ok(FeatureShape::Flat(c * h * w)),
        (LayerSpec::Relu, s) => Ok(s),
        (spec, s) => bad(format!("{spec:?} cannot consume activation of shape {s:?}")),
    }
}

/// Channel-major flattening: channel `c` occupies `[c·h·w, (c+1)·h·w)`.
pub fn flatten_index_map(channels: usize, h: usize, w: usize) -> Vec<Range<usize>> {
    let plane = h * w;
    (0..channels).map(|c| c * plane..(c + 1) * plane).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    /// Linear/Conv: `[weight, bias]`; BatchNorm2d: `[weight, bias]`.
    pub params: Vec<Tensor>,
    /// BatchNorm2d: `[running_mean, running_var]`.
    pub buffers: Vec<Tensor>,
}

impl Layer {
    pub fn new(spec: LayerSpec, params: Vec<Tensor>, buffers: Vec<Tensor>) -> Result<Self> {
        let check = |what: &str, want: Vec<Vec<usize>>, got: &[Tensor]| -> Result<()> {
            let got: Vec<Vec<usize>> = got.iter().map(|t| t.shape().to_vec()).collect();
            if got != want {
                return Err(Error::ShapeMismatch(format!(
                    "{spec:?} {what} shapes {got:?}, expected {want:?}"
                )));
            }
            Ok(())
        };
        check("parameter", spec.param_shapes(), &params)?;
        check("buffer", spec.buffer_shapes(), &buffers)?;
        if let LayerSpec::BatchNorm2d { .. } = spec {
            if buffers[1].data().iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidArg("batch norm running_var must be non-negative".into()));
            }
        }
        Ok(Self { spec, params, buffers })
    }

    fn init(spec: LayerSpec, rng: &mut RngStream) -> Self {
        let uniform = |shape: &[usize], bound: f32, rng: &mut RngStream| {
            let n = shape.iter().product();
            Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.uniform(-bound, bound)).collect())
        };
        let (params, buffers) = match spec {
            LayerSpec::Linear { in_features, .. } | LayerSpec::Conv2d { in_channels: in_features, .. } => {
                let shapes = spec.param_shapes();
                let fan_in: usize = shapes[0][1..].iter().product();
                debug_assert!(fan_in >= in_features);
                let bound = 1.0 / (fan_in as f32).sqrt();
                let w = uniform(&shapes[0], bound, rng);
                let b = uniform(&shapes[1], bound, rng);
                (vec![w, b], vec![])
            }
            LayerSpec::BatchNorm2d { channels } => (
                vec![Tensor::full(&[channels], 1.0), Tensor::zeros(&[channels])],
                vec![Tensor::zeros(&[channels]), Tensor::full(&[channels], 1.0)],
            ),
            _ => (vec![], vec![]),
        };
        Self { spec, params, buffers }
    }
}

/// Which ensemble member (of the most recent concatenation) a unit came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UnitOrigin {
    pub member: usize,
    pub index: usize,
}

/// A hidden Linear/Conv layer together with everything structurally coupled to
/// its units.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HiddenLayer {
    /// Index of the Linear/Conv layer in `Network::layers`.
    pub layer: usize,
    pub units: usize,
    /// BatchNorm2d layers acting on this layer's channels.
    pub bn_layers: Vec<usize>,
    /// The next Linear/Conv layer, which consumes these units.
    pub next: usize,
    /// Columns of `next` fed by one unit (h·w across a Flatten, otherwise 1).
    pub cols_per_unit: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IncomingSlice {
    pub layer: usize,
    /// Row of the weight (flattened filter for Conv) and matching bias element.
    pub row: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutgoingSlice {
    pub layer: usize,
    /// For a Linear consumer, columns of its weight; for a Conv consumer,
    /// input channels of its kernel.
    pub columns: Range<usize>,
}

/// One hidden neuron or convolution filter and the parameter regions it owns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnitView {
    pub layer_index: usize,
    pub unit_index: usize,
    pub incoming: IncomingSlice,
    pub outgoing: OutgoingSlice,
    /// `(bn layer index, channel)` pairs.
    pub bn: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    arch_id: String,
    origins: Option<Vec<Vec<UnitOrigin>>>,
}

/// Content hash of an architecture.
pub fn compute_arch_id(input_shape: &[usize], specs: &[LayerSpec]) -> String {
    #[derive(Serialize)]
    struct Canon<'a> {
        input_shape: &'a [usize],
        layers: &'a [LayerSpec],
    }
    let canon = serde_json::to_vec(&Canon { input_shape, layers: specs }).expect("specs serialize");
    let digest = Sha256::digest(&canon);
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let specs: Vec<LayerSpec> = layers.iter().map(|l| l.spec).collect();
        validate_topology(&input_shape, &specs)?;
        for l in &layers {
            Layer::new(l.spec, l.params.clone(), l.buffers.clone())?;
            if l.params.iter().chain(&l.buffers).any(|t| !t.is_finite()) {
                return Err(Error::NonFinite("Network::new"));
            }
        }
        let arch_id = compute_arch_id(&input_shape, &specs);
        Ok(Self { input_shape, layers, arch_id, origins: None })
    }

    /// Randomly initialised network (uniform ±1/√fan_in for weights and biases).
    pub fn init(input_shape: &[usize], specs: &[LayerSpec], rng: &mut RngStream) -> Result<Self> {
        validate_topology(input_shape, specs)?;
        let layers = specs.iter().map(|&s| Layer::init(s, rng)).collect();
        Ok(Self {
            input_shape: input_shape.to_vec(),
            layers,
            arch_id: compute_arch_id(input_shape, specs),
            origins: None,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable parameter access; layer specs stay fixed.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn arch_id(&self) -> &str {
        &self.arch_id
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last().map(|l| l.spec) {
            Some(LayerSpec::Linear { out_features, .. }) => out_features,
            _ => unreachable!("validated: head is Linear"),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params.iter().chain(&l.buffers))
            .map(Tensor::len)
            .sum()
    }

    pub fn nbytes(&self) -> usize {
        self.param_count() * 4
    }

    pub(crate) fn from_parts_unchecked(
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
        origins: Option<Vec<Vec<UnitOrigin>>>,
    ) -> Self {
        let specs: Vec<LayerSpec> = layers.iter().map(|l| l.spec).collect();
        debug_assert!(validate_topology(&input_shape, &specs).is_ok());
        let arch_id = compute_arch_id(&input_shape, &specs);
        Self { input_shape, layers, arch_id, origins }
    }

    /// Per-sample shapes after every layer (index 0 is the input).
    pub fn feature_shapes(&self) -> Vec<FeatureShape> {
        let mut shapes = vec![FeatureShape::from_dims(&self.input_shape).expect("validated")];
        for l in &self.layers {
            let next = infer_shape(&l.spec, *shapes.last().unwrap()).expect("validated");
            shapes.push(next);
        }
        shapes
    }

    /// Indices of Linear/Conv layers in order; the last is the head.
    pub fn unit_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.spec.is_parameterized_unit_layer())
            .map(|(i, _)| i)
            .collect()
    }

    /// Every Linear/Conv layer except the head, with its coupled regions.
    pub fn hidden_layers(&self) -> Vec<HiddenLayer> {
        let unit_layers = self.unit_layers();
        let shapes = self.feature_shapes();
        unit_layers
            .windows(2)
            .map(|pair| {
                let (layer, next) = (pair[0], pair[1]);
                let units = unit_count(&self.layers[layer].spec);
                let bn_layers = (layer + 1..next)
                    .filter(|&i| matches!(self.layers[i].spec, LayerSpec::BatchNorm2d { .. }))
                    .collect();
                let cols_per_unit = match self.layers[next].spec {
                    LayerSpec::Linear { in_features, .. } => {
                        // Channels reach a Linear consumer through a Flatten.
                        match shapes[next] {
                            FeatureShape::Flat(n) => {
                                debug_assert_eq!(n, in_features);
                                in_features / units
                            }
                            _ => unreachable!(),
                        }
                    }
                    _ => 1,
                };
                HiddenLayer { layer, units, bn_layers, next, cols_per_unit }
            })
            .collect()
    }

    /// Hidden-unit views; the classification head's rows are excluded.
    pub fn unit_views(&self) -> Vec<UnitView> {
        let mut views = Vec::new();
        for hl in self.hidden_layers() {
            for u in 0..hl.units {
                views.push(UnitView {
                    layer_index: hl.layer,
                    unit_index: u,
                    incoming: IncomingSlice { layer: hl.layer, row: u },
                    outgoing: OutgoingSlice {
                        layer: hl.next,
                        columns: u * hl.cols_per_unit..(u + 1) * hl.cols_per_unit,
                    },
                    bn: hl.bn_layers.iter().map(|&b| (b, u)).collect(),
                });
            }
        }
        views
    }

    /// Origin of unit `unit` in the `hidden`-th hidden layer.
    pub fn unit_origin(&self, hidden: usize, unit: usize) -> UnitOrigin {
        match &self.origins {
            Some(o) => o[hidden][unit],
            None => UnitOrigin { member: 0, index: unit },
        }
    }

    pub(crate) fn origins(&self) -> Option<&Vec<Vec<UnitOrigin>>> {
        self.origins.as_ref()
    }

    /// Drops concatenation provenance (units are then treated as one member).
    pub fn clear_origins(&mut self) {
        self.origins = None;
    }

    pub fn same_architecture(&self, other: &Network) -> bool {
        self.arch_id == other.arch_id
    }
}

fn unit_count(spec: &LayerSpec) -> usize {
    match *spec {
        LayerSpec::Linear { out_features, .. } => out_features,
        LayerSpec::Conv2d { out_channels, .. } => out_channels,
        _ => 0,
    }
}

/// Checks a layer chain: shapes compose and the final layer is the Linear head.
pub fn validate_topology(input_shape: &[usize], specs: &[LayerSpec]) -> Result<()> {
    let mut shape = FeatureShape::from_dims(input_shape)?;
    for spec in specs {
        if let LayerSpec::Conv2d { stride, .. } = spec {
            if *stride == 0 {
                return Err(Error::InvalidArg("conv stride must be at least 1".into()));
            }
        }
        shape = infer_shape(spec, shape)?;
    }
    match specs.last() {
        Some(LayerSpec::Linear { .. }) => Ok(()),
        Some(_) => Err(Error::UnsupportedTopology(
            "the last layer must be the Linear classification head".into(),
        )),
        None => Err(Error::UnsupportedTopology("empty network".into())),
    }
}

/// Specs for an MLP `input → hidden[0] → … → classes` with ReLU between layers.
pub fn mlp_specs(input: usize, hidden: &[usize], classes: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut prev = input;
    for &h in hidden {
        specs.push(LayerSpec::Linear { in_features: prev, out_features: h });
        specs.push(LayerSpec::Relu);
        prev = h;
    }
    specs.push(LayerSpec::Linear { in_features: prev, out_features: classes });
    specs
}

/// Conv blocks (3×3 conv, BN, ReLU, 2×2 pool) followed by an MLP head.
pub fn convnet_specs(
    input: [usize; 3],
    channels: &[usize],
    fc: &[usize],
    classes: usize,
) -> Result<Vec<LayerSpec>> {
    let [mut c, mut h, mut w] = input;
    let mut specs = Vec::new();
    for &out in channels {
        specs.push(LayerSpec::Conv2d {
            in_channels: c,
            out_channels: out,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 1,
        });
        specs.push(LayerSpec::BatchNorm2d { channels: out });
        specs.push(LayerSpec::Relu);
        if h >= 2 && w >= 2 {
            specs.push(LayerSpec::MaxPool2d { window: 2 });
            h /= 2;
            w /= 2;
        }
        c = out;
    }
    specs.push(LayerSpec::Flatten);
    specs.extend(mlp_specs(c * h * w, fc, classes));
    validate_topology(&input, &specs)?;
    Ok(specs)
}
