//! Encoder and head definitions with hierarchical, BN-tagged parameter
//! naming — the unit of federation.
//!
//! An [`ArchitectureSpec`] lists layer descriptors for the encoder, the
//! projector, and (for SimSiam) the predictor. [`build_model`] turns a spec
//! into a named [`ParamSet`]; the `forward_*` functions stage those
//! parameters on a tape and run the composition.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::ssl::Method;
use crate::tensor::{BnStats, Tape, Tensor, Var};

/// Batch-norm denominator guard.
pub const BN_EPS: f64 = 1e-5;
/// Exponential momentum for BN running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Input images are fixed at 28x28.
pub const INPUT_SIDE: usize = 28;

/// One layer in a sequential section.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerDesc {
    /// 3x3 convolution, stride 1, padding 1, no bias.
    Conv { in_ch: usize, out_ch: usize },
    BatchNorm { features: usize },
    Relu,
    /// 2x2 max-pool, stride 2.
    MaxPool,
    Flatten,
    Dense { inputs: usize, outputs: usize },
}

/// Network description: encoder trunk plus projection head and optional
/// prediction head.
#[derive(Debug, Clone)]
pub struct ArchitectureSpec {
    pub input_channels: usize,
    pub encoder: Vec<LayerDesc>,
    /// Encoder output width.
    pub feature_dim: usize,
    pub projector: Vec<LayerDesc>,
    pub predictor: Option<Vec<LayerDesc>>,
    /// FedBN needs at least one BN layer in the encoder to differ from
    /// plain averaging; construction rejects BN-free encoders unless this
    /// is set.
    pub allow_bn_free: bool,
}

/// Dimensional state threaded through a layer sequence during validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SimShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

fn simulate(section: &str, layers: &[LayerDesc], input: SimShape) -> Result<SimShape> {
    let mut cur = input;
    for (i, layer) in layers.iter().enumerate() {
        let bad = |msg: String| Error::Spec(format!("{section}[{i}]: {msg}"));
        cur = match (layer, cur) {
            (LayerDesc::Conv { in_ch, out_ch }, SimShape::Spatial { c, h, w }) => {
                if *in_ch != c {
                    return Err(bad(format!("conv expects {in_ch} channels, stream has {c}")));
                }
                SimShape::Spatial { c: *out_ch, h, w }
            }
            (LayerDesc::BatchNorm { features }, SimShape::Spatial { c, h, w }) => {
                if *features != c {
                    return Err(bad(format!("bn expects {features} features, stream has {c}")));
                }
                SimShape::Spatial { c, h, w }
            }
            (LayerDesc::BatchNorm { features }, SimShape::Flat(d)) => {
                if *features != d {
                    return Err(bad(format!("bn expects {features} features, stream has {d}")));
                }
                SimShape::Flat(d)
            }
            (LayerDesc::Relu, any) => any,
            (LayerDesc::MaxPool, SimShape::Spatial { c, h, w }) => {
                if h < 2 || w < 2 {
                    return Err(bad(format!("cannot pool {h}x{w}")));
                }
                SimShape::Spatial { c, h: h / 2, w: w / 2 }
            }
            (LayerDesc::Flatten, SimShape::Spatial { c, h, w }) => SimShape::Flat(c * h * w),
            (LayerDesc::Dense { inputs, outputs }, SimShape::Flat(d)) => {
                if *inputs != d {
                    return Err(bad(format!("dense expects {inputs} inputs, stream has {d}")));
                }
                SimShape::Flat(*outputs)
            }
            (layer, cur) => {
                return Err(bad(format!("{layer:?} cannot follow a {cur:?} stream")));
            }
        };
    }
    Ok(cur)
}

impl ArchitectureSpec {
    /// Default small convolutional encoder for 28x28 inputs, with the
    /// projector sized for `method` and a predictor iff the method uses one.
    pub fn desk(input_channels: usize, method: Method) -> Self {
        let proj_dim = method.proj_dim();
        let predictor = method.uses_predictor().then(|| {
            vec![
                LayerDesc::Dense { inputs: proj_dim, outputs: 128 },
                LayerDesc::Relu,
                LayerDesc::Dense { inputs: 128, outputs: proj_dim },
            ]
        });
        ArchitectureSpec {
            input_channels,
            encoder: vec![
                LayerDesc::Conv { in_ch: input_channels, out_ch: 8 },
                LayerDesc::BatchNorm { features: 8 },
                LayerDesc::Relu,
                LayerDesc::MaxPool,
                LayerDesc::Conv { in_ch: 8, out_ch: 16 },
                LayerDesc::BatchNorm { features: 16 },
                LayerDesc::Relu,
                LayerDesc::MaxPool,
                LayerDesc::Flatten,
                LayerDesc::Dense { inputs: 16 * 7 * 7, outputs: 64 },
            ],
            feature_dim: 64,
            projector: vec![
                LayerDesc::Dense { inputs: 64, outputs: 512 },
                LayerDesc::Relu,
                LayerDesc::Dense { inputs: 512, outputs: proj_dim },
            ],
            predictor,
            allow_bn_free: false,
        }
    }

    /// Structural checks: shapes thread through every section, the encoder
    /// ends at `feature_dim`, and BN is present unless overridden.
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::Spec("input_channels must be positive".into()));
        }
        let input = SimShape::Spatial {
            c: self.input_channels,
            h: INPUT_SIDE,
            w: INPUT_SIDE,
        };
        match simulate("encoder", &self.encoder, input)? {
            SimShape::Flat(d) if d == self.feature_dim => {}
            other => {
                return Err(Error::Spec(format!(
                    "encoder ends at {other:?}, expected Flat({})",
                    self.feature_dim
                )));
            }
        }
        let has_bn = self
            .encoder
            .iter()
            .any(|l| matches!(l, LayerDesc::BatchNorm { .. }));
        if !has_bn && !self.allow_bn_free {
            return Err(Error::Spec(
                "encoder has no batch-norm layer; aggregation schemes would coincide \
                 (set allow_bn_free to override)"
                    .into(),
            ));
        }
        simulate("projector", &self.projector, SimShape::Flat(self.feature_dim))?;
        if let Some(pred) = &self.predictor {
            let proj_out = self.proj_dim()?;
            match simulate("predictor", pred, SimShape::Flat(proj_out))? {
                SimShape::Flat(d) if d == proj_out => {}
                other => {
                    return Err(Error::Spec(format!(
                        "predictor ends at {other:?}, expected Flat({proj_out})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Validate plus the per-method head contract: projector width matches
    /// the method and a predictor exists exactly when the method needs one.
    pub fn validate_for(&self, method: Method) -> Result<()> {
        self.validate()?;
        let proj = self.proj_dim()?;
        if proj != method.proj_dim() {
            return Err(Error::Spec(format!(
                "projector outputs {proj} dims, {method} requires {}",
                method.proj_dim()
            )));
        }
        if method.uses_predictor() != self.predictor.is_some() {
            return Err(Error::Spec(format!(
                "predictor presence ({}) does not match {method}",
                self.predictor.is_some()
            )));
        }
        Ok(())
    }

    /// Projector output width.
    pub fn proj_dim(&self) -> Result<usize> {
        match simulate("projector", &self.projector, SimShape::Flat(self.feature_dim))? {
            SimShape::Flat(d) => Ok(d),
            other => Err(Error::Spec(format!("projector ends at {other:?}, expected flat"))),
        }
    }

    /// Stable hash of the canonical layer listing; equal hashes mean two
    /// ParamSets are structurally interchangeable.
    pub fn hash(&self) -> u64 {
        let mut text = format!("in={};feat={};", self.input_channels, self.feature_dim);
        let mut push_section = |name: &str, layers: &[LayerDesc]| {
            text.push_str(name);
            text.push(':');
            for l in layers {
                let piece = match l {
                    LayerDesc::Conv { in_ch, out_ch } => format!("conv({in_ch},{out_ch})"),
                    LayerDesc::BatchNorm { features } => format!("bn({features})"),
                    LayerDesc::Relu => "relu".into(),
                    LayerDesc::MaxPool => "maxpool".into(),
                    LayerDesc::Flatten => "flatten".into(),
                    LayerDesc::Dense { inputs, outputs } => format!("dense({inputs},{outputs})"),
                };
                text.push_str(&piece);
                text.push(';');
            }
        };
        push_section("encoder", &self.encoder);
        push_section("projector", &self.projector);
        if let Some(pred) = &self.predictor {
            push_section("predictor", pred);
        }
        let digest = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

/// Sections a layer sequence can live in; fixes name prefixes.
const SECTIONS: [&str; 3] = ["encoder", "projector", "predictor"];

/// Initialize a [`ParamSet`] for `spec`: He-uniform conv/dense weights,
/// zero biases and beta, unit gamma, fresh running stats. Deterministic in
/// `rng`.
pub fn build_model(spec: &ArchitectureSpec, rng: &mut ChaCha8Rng) -> Result<ParamSet> {
    spec.validate()?;
    let mut params = ParamSet::new(spec.hash());
    let sections: [(&str, &[LayerDesc]); 3] = [
        (SECTIONS[0], &spec.encoder),
        (SECTIONS[1], &spec.projector),
        (SECTIONS[2], spec.predictor.as_deref().unwrap_or(&[])),
    ];
    for (section, layers) in sections {
        for (i, layer) in layers.iter().enumerate() {
            match layer {
                LayerDesc::Conv { in_ch, out_ch } => {
                    let fan_in = in_ch * 9;
                    let w = he_uniform(vec![*out_ch, *in_ch, 3, 3], fan_in, rng)?;
                    params.insert(&format!("{section}.{i}.conv.weight"), w, false)?;
                }
                LayerDesc::Dense { inputs, outputs } => {
                    let w = he_uniform(vec![*inputs, *outputs], *inputs, rng)?;
                    params.insert(&format!("{section}.{i}.dense.weight"), w, false)?;
                    params.insert(
                        &format!("{section}.{i}.dense.bias"),
                        Tensor::zeros(vec![*outputs]),
                        false,
                    )?;
                }
                LayerDesc::BatchNorm { features } => {
                    let prefix = format!("{section}.{i}.bn");
                    params.insert(&format!("{prefix}.gamma"), Tensor::ones(vec![*features]), true)?;
                    params.insert(&format!("{prefix}.beta"), Tensor::zeros(vec![*features]), true)?;
                    params.insert(
                        &format!("{prefix}.running_mean"),
                        Tensor::zeros(vec![*features]),
                        true,
                    )?;
                    params.insert(
                        &format!("{prefix}.running_var"),
                        Tensor::ones(vec![*features]),
                        true,
                    )?;
                }
                LayerDesc::Relu | LayerDesc::MaxPool | LayerDesc::Flatten => {}
            }
        }
    }
    Ok(params)
}

fn he_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data)
}

/// He-uniform bound for a given fan-in, exposed for distribution tests.
pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Trainable parameters copied onto a tape as leaves, addressed by name.
pub struct Staged {
    vars: IndexMap<String, Var>,
}

impl Staged {
    /// Assemble a staging map from externally created leaves, e.g. when a
    /// gradient checker owns the leaf tensors.
    pub fn from_vars(pairs: impl IntoIterator<Item = (String, Var)>) -> Result<Self> {
        let mut vars = IndexMap::new();
        for (name, var) in pairs {
            if vars.insert(name.clone(), var).is_some() {
                return Err(Error::contract("staged", format!("duplicate entry {name}")));
            }
        }
        Ok(Staged { vars })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract("staged", format!("no staged entry {name}")))
    }

    /// Staged entries in parameter order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

/// Copy every trainable entry of `params` onto `tape` as a leaf.
pub fn stage(tape: &mut Tape, params: &ParamSet) -> Staged {
    let mut vars = IndexMap::new();
    for (name, entry) in params.iter() {
        if entry.trainable {
            vars.insert(name.to_string(), tape.leaf(entry.tensor.clone()));
        }
    }
    Staged { vars }
}

/// Whether a forward pass trains BN (updating running stats held in the
/// referenced ParamSet) or freezes it (reading them).
pub enum Phase<'a> {
    Train(&'a mut ParamSet),
    Eval(&'a ParamSet),
}

fn forward_section(
    spec_layers: &[LayerDesc],
    section: &str,
    tape: &mut Tape,
    staged: &Staged,
    input: Var,
    phase: &mut Phase<'_>,
) -> Result<Var> {
    let mut cur = input;
    for (i, layer) in spec_layers.iter().enumerate() {
        cur = match layer {
            LayerDesc::Conv { .. } => {
                let w = staged.var(&format!("{section}.{i}.conv.weight"))?;
                tape.conv2d(cur, w)?
            }
            LayerDesc::BatchNorm { .. } => {
                let prefix = format!("{section}.{i}.bn");
                let gamma = staged.var(&format!("{prefix}.gamma"))?;
                let beta = staged.var(&format!("{prefix}.beta"))?;
                match phase {
                    Phase::Train(params) => {
                        let (running_mean, running_var) = params.bn_stats_mut(&prefix)?;
                        tape.batchnorm(
                            cur,
                            gamma,
                            beta,
                            BnStats::Train {
                                running_mean,
                                running_var,
                                momentum: BN_MOMENTUM,
                            },
                            BN_EPS,
                        )?
                    }
                    Phase::Eval(params) => {
                        let running_mean = params.get(&format!("{prefix}.running_mean"))?;
                        let running_var = params.get(&format!("{prefix}.running_var"))?;
                        tape.batchnorm(
                            cur,
                            gamma,
                            beta,
                            BnStats::Eval {
                                running_mean: running_mean.tensor.data(),
                                running_var: running_var.tensor.data(),
                            },
                            BN_EPS,
                        )?
                    }
                }
            }
            LayerDesc::Relu => tape.relu(cur)?,
            LayerDesc::MaxPool => tape.maxpool2d(cur)?,
            LayerDesc::Flatten => {
                let shape = tape.value(cur).shape();
                let batch = shape[0];
                let rest: usize = shape[1..].iter().product();
                tape.reshape(cur, vec![batch, rest])?
            }
            LayerDesc::Dense { .. } => {
                let w = staged.var(&format!("{section}.{i}.dense.weight"))?;
                let b = staged.var(&format!("{section}.{i}.dense.bias"))?;
                let prod = tape.matmul(cur, w)?;
                tape.add_row_vec(prod, b)?
            }
        };
    }
    Ok(cur)
}

/// Encoder output `[B, feature_dim]` for images `[B, C, 28, 28]`.
pub fn forward_features(
    spec: &ArchitectureSpec,
    tape: &mut Tape,
    staged: &Staged,
    images: Var,
    phase: &mut Phase<'_>,
) -> Result<Var> {
    let (_, c, h, w) = tape.value(images).rank4("forward_features")?;
    if c != spec.input_channels || h != INPUT_SIDE || w != INPUT_SIDE {
        return Err(Error::ShapeMismatch {
            op: "forward_features",
            lhs: tape.value(images).shape().to_vec(),
            rhs: vec![0, spec.input_channels, INPUT_SIDE, INPUT_SIDE],
        });
    }
    forward_section(&spec.encoder, "encoder", tape, staged, images, phase)
}

/// Projector output `[B, proj_dim]`.
pub fn forward_projected(
    spec: &ArchitectureSpec,
    tape: &mut Tape,
    staged: &Staged,
    images: Var,
    phase: &mut Phase<'_>,
) -> Result<Var> {
    let features = forward_features(spec, tape, staged, images, phase)?;
    forward_section(&spec.projector, "projector", tape, staged, features, phase)
}

/// Prediction head on top of a projected batch; errors when the spec has
/// no predictor.
pub fn forward_predictor(
    spec: &ArchitectureSpec,
    tape: &mut Tape,
    staged: &Staged,
    z: Var,
    phase: &mut Phase<'_>,
) -> Result<Var> {
    let layers = spec
        .predictor
        .as_deref()
        .ok_or_else(|| Error::Spec("architecture has no predictor".into()))?;
    forward_section(layers, "predictor", tape, staged, z, phase)
}
