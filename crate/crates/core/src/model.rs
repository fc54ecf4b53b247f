//! Parameter storage, layer building blocks and the assembled model.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::{Backbone, BackboneConfig, DensityHead};
use crate::guidance::{AttentionParams, GuidanceBranch};
use crate::math;
use crate::mldl::EmConfig;
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Record every parameter on `tape`, as gradient-tracked leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Gradients for every parameter after `tape.backward`, zero where the
    /// loss does not depend on the parameter.
    pub fn gradients(&self, tape: &Tape, bound: &Bound) -> Vec<Tensor> {
        self.values
            .iter()
            .zip(&bound.vars)
            .map(|(v, var)| match tape.grad(*var) {
                Some(g) => g.clone(),
                None => Tensor::zeros(v.shape()),
            })
            .collect()
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Square-kernel convolution with bias and "same" padding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub dilation: usize,
}

impl Conv {
    /// Kaiming-normal weights (`std = sqrt(2 / fan_in)`), zero bias. The
    /// weights are drawn from a stream derived from `seed` and `name`, so a
    /// layer's initialization does not depend on which other layers exist.
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Self> {
        if kernel % 2 == 0 || kernel == 0 {
            return Err(Error::InvalidHyperparameter(format!(
                "kernel size must be odd, got {kernel}"
            )));
        }
        if dilation < 1 {
            return Err(Error::InvalidHyperparameter(format!(
                "dilation must be >= 1, got {dilation}"
            )));
        }
        let weight_name = format!("{name}.weight");
        let mut r = rng::derived(seed, &weight_name);
        let std = math::sqrt(2.0 / (c_in * kernel * kernel) as f64);
        let weight = store.add(
            weight_name,
            Tensor::randn(&[c_out, c_in, kernel, kernel], std, &mut r),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Ok(Conv {
            weight,
            bias,
            kernel,
            dilation,
        })
    }

    pub fn pad(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(
            x,
            bound.var(self.weight),
            Some(bound.var(self.bias)),
            1,
            self.pad(),
            self.dilation,
        )
    }
}

/// `x[N×in] · W[in×out] (+ b[1×out])`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Uniform `±1/sqrt(in)` weights; zero bias.
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let weight_name = format!("{name}.weight");
        let mut r = rng::derived(seed, &weight_name);
        let bound = 1.0 / math::sqrt(d_in as f64);
        let weight = store.add(weight_name, Tensor::uniform(&[d_in, d_out], -bound, bound, &mut r));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[1, d_out])));
        Linear { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.var(self.weight))?;
        match self.bias {
            Some(b) => tape.add(y, bound.var(b)),
            None => Ok(y),
        }
    }
}

/// Architecture and conditioning hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head_hidden: usize,
    pub num_prototypes: usize,
    pub concentration: f64,
    pub em_max_iter: usize,
    pub em_tol: f64,
    pub weighted_em: bool,
    /// Dilation of the third guidance convolution.
    pub dilation_rate: usize,
    /// Attention dimension; 0 means "same as the feature dimension".
    pub attention_dim: usize,
    pub use_ldg: bool,
    pub use_gdg: bool,
    /// Tile the global token over every cell (N×C queries) instead of
    /// attending with a single token.
    pub tile_q: bool,
    /// One conv stack shared by all prototype branches.
    pub shared_branch_convs: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            head_hidden: 16,
            num_prototypes: 3,
            concentration: 10.0,
            em_max_iter: 50,
            em_tol: 1e-6,
            weighted_em: false,
            dilation_rate: 2,
            attention_dim: 0,
            use_ldg: true,
            use_gdg: true,
            tile_q: false,
            shared_branch_convs: false,
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    pub fn attention_dim(&self) -> usize {
        if self.attention_dim == 0 {
            self.feature_dim()
        } else {
            self.attention_dim
        }
    }

    pub fn em(&self) -> EmConfig {
        EmConfig {
            num_prototypes: self.num_prototypes,
            concentration: self.concentration,
            max_iter: self.em_max_iter,
            tol: self.em_tol,
            weighted: self.weighted_em,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let bad = |msg: String| Err(Error::InvalidHyperparameter(msg));
        if self.num_prototypes < 1 {
            return bad("num_prototypes must be >= 1".to_string());
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return bad(format!("concentration must be positive, got {}", self.concentration));
        }
        if self.em_max_iter < 1 {
            return bad("em_max_iter must be >= 1".to_string());
        }
        if self.dilation_rate < 1 {
            return bad(format!("dilation_rate must be >= 1, got {}", self.dilation_rate));
        }
        if self.head_hidden < 1 {
            return bad("head_hidden must be >= 1".to_string());
        }
        Ok(())
    }

    /// Flat numeric encoding stored alongside the weights in a checkpoint.
    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        let b = |v: bool| if v { 1.0 } else { 0.0 };
        let chans: Vec<f64> = self.backbone.channels_per_stage.iter().map(|c| *c as f64).collect();
        let mut out = vec![(
            "config.channels_per_stage".to_string(),
            Tensor::new(vec![chans.len()], chans).expect("vector"),
        )];
        let scalars = [
            ("config.in_channels", self.backbone.in_channels as f64),
            ("config.kernel_size", self.backbone.kernel_size as f64),
            ("config.head_hidden", self.head_hidden as f64),
            ("config.num_prototypes", self.num_prototypes as f64),
            ("config.em_max_iter", self.em_max_iter as f64),
            ("config.em_tol", self.em_tol),
            ("config.weighted_em", b(self.weighted_em)),
            ("config.dilation_rate", self.dilation_rate as f64),
            ("config.attention_dim", self.attention_dim as f64),
            ("config.use_ldg", b(self.use_ldg)),
            ("config.use_gdg", b(self.use_gdg)),
            ("config.tile_q", b(self.tile_q)),
            ("config.shared_branch_convs", b(self.shared_branch_convs)),
            ("mldl.r", self.concentration),
        ];
        out.extend(scalars.iter().map(|(k, v)| (k.to_string(), Tensor::scalar(*v))));
        out
    }

    pub fn from_entries(entries: &[(String, Tensor)]) -> Result<Self> {
        let get = |key: &str| -> Result<&Tensor> {
            entries
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v)
                .ok_or_else(|| Error::Data(format!("checkpoint is missing `{key}`")))
        };
        let scalar = |key: &str| -> Result<f64> {
            let t = get(key)?;
            if t.len() != 1 {
                return Err(Error::Data(format!("`{key}` must hold one value")));
            }
            Ok(t.data()[0])
        };
        let count = |key: &str| -> Result<usize> {
            let v = scalar(key)?;
            if v < 0.0 || math::floor(v) != v {
                return Err(Error::Data(format!("`{key}` must be a non-negative integer")));
            }
            Ok(v as usize)
        };
        let flag = |key: &str| -> Result<bool> { Ok(scalar(key)? != 0.0) };
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                in_channels: count("config.in_channels")?,
                channels_per_stage: get("config.channels_per_stage")?
                    .data()
                    .iter()
                    .map(|c| *c as usize)
                    .collect(),
                kernel_size: count("config.kernel_size")?,
            },
            head_hidden: count("config.head_hidden")?,
            num_prototypes: count("config.num_prototypes")?,
            concentration: scalar("mldl.r")?,
            em_max_iter: count("config.em_max_iter")?,
            em_tol: scalar("config.em_tol")?,
            weighted_em: flag("config.weighted_em")?,
            dilation_rate: count("config.dilation_rate")?,
            attention_dim: count("config.attention_dim")?,
            use_ldg: flag("config.use_ldg")?,
            use_gdg: flag("config.use_gdg")?,
            tile_q: flag("config.tile_q")?,
            shared_branch_convs: flag("config.shared_branch_convs")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Backbone, guidance and head parameters for one configuration. Components
/// disabled by the configuration own no parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    backbone: Backbone,
    branches: Vec<GuidanceBranch>,
    attention: Option<AttentionParams>,
    head: DensityHead,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let backbone = Backbone::new(&config.backbone, &mut params, seed)?;
        let c = config.feature_dim();
        let branches = if config.use_ldg {
            let stacks = if config.shared_branch_convs {
                1
            } else {
                config.num_prototypes
            };
            (0..stacks)
                .map(|v| {
                    GuidanceBranch::new(
                        &mut params,
                        seed,
                        &format!("guidance.branch{v}"),
                        c,
                        config.backbone.kernel_size,
                        config.dilation_rate,
                    )
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let attention = config
            .use_gdg
            .then(|| AttentionParams::new(&mut params, seed, c, config.attention_dim()));
        let head = DensityHead::new(&mut params, seed, c, config.head_hidden, config.backbone.kernel_size)?;
        Ok(Model {
            config,
            params,
            backbone,
            branches,
            attention,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn branches(&self) -> &[GuidanceBranch] {
        &self.branches
    }

    /// Conv stack used for prototype `v`.
    pub fn branch(&self, v: usize) -> &GuidanceBranch {
        if self.config.shared_branch_convs {
            &self.branches[0]
        } else {
            &self.branches[v]
        }
    }

    pub fn attention(&self) -> Option<&AttentionParams> {
        self.attention.as_ref()
    }

    pub fn head(&self) -> &DensityHead {
        &self.head
    }

    /// Configuration entries followed by every parameter.
    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        let mut out = self.config.to_entries();
        out.extend(self.params.iter().map(|(k, v)| (k.to_string(), v.clone())));
        out
    }

    /// Rebuild from checkpoint entries; every parameter must be present
    /// with the shape the stored configuration implies.
    pub fn from_entries(entries: &[(String, Tensor)]) -> Result<Self> {
        let config = ModelConfig::from_entries(entries)?;
        let mut model = Model::new(config, 0)?;
        for id in model.params.ids() {
            let name = model.params.name(id).to_string();
            let stored = entries
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| v)
                .ok_or_else(|| Error::Data(format!("checkpoint is missing `{name}`")))?;
            if stored.shape() != model.params.get(id).shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint parameter",
                    lhs: stored.shape().to_vec(),
                    rhs: model.params.get(id).shape().to_vec(),
                });
            }
            *model.params.get_mut(id) = stored.clone();
        }
        for (k, _) in entries {
            if !k.starts_with("config.") && k != "mldl.r" && k != "mldl.mu" && model.params.find(k).is_none() {
                return Err(Error::UnknownKey(k.clone()));
            }
        }
        Ok(model)
    }
}
