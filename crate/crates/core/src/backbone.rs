//! Shared-weight convolutional feature extractor and density head.
//!
//! Each stage is one "same"-padded convolution followed by ReLU; every stage
//! except the last ends with a 2×2 max-pool. Support and query images run
//! through the same [`Backbone`] parameters.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::density::DensityMap;
use crate::model::{Bound, Conv, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub channels_per_stage: Vec<usize>,
    pub kernel_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            channels_per_stage: vec![16, 32, 32],
            kernel_size: 3,
        }
    }
}

impl BackboneConfig {
    /// Image-to-feature spatial ratio.
    pub fn downsample_factor(&self) -> usize {
        1 << self.channels_per_stage.len().saturating_sub(1)
    }

    pub fn feature_dim(&self) -> usize {
        self.channels_per_stage.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels_per_stage.is_empty() || self.channels_per_stage.contains(&0) {
            return Err(Error::InvalidHyperparameter(
                "channels_per_stage must list positive channel counts".into(),
            ));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::InvalidHyperparameter(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::InvalidHyperparameter("in_channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Support,
    Query,
}

/// Backbone output `[C×h×w]`, tagged with the branch that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    data: Tensor,
    source: Branch,
    downsample_factor: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor, source: Branch, downsample_factor: usize) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::ShapeMismatch {
                op: "feature map",
                lhs: data.shape().to_vec(),
                rhs: vec![0, 0, 0],
            });
        }
        data.ensure_finite("feature map")?;
        Ok(FeatureMap {
            data,
            source,
            downsample_factor,
        })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn source(&self) -> Branch {
        self.source
    }

    pub fn downsample_factor(&self) -> usize {
        self.downsample_factor
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    stages: Vec<Conv>,
    downsample_factor: usize,
}

impl Backbone {
    pub fn new(config: &BackboneConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut c_in = config.in_channels;
        let mut stages = Vec::new();
        for (i, &c_out) in config.channels_per_stage.iter().enumerate() {
            stages.push(Conv::new(
                store,
                seed,
                &format!("backbone.stage{i}"),
                c_in,
                c_out,
                config.kernel_size,
                1,
            )?);
            c_in = c_out;
        }
        Ok(Backbone {
            stages,
            downsample_factor: config.downsample_factor(),
        })
    }

    pub fn downsample_factor(&self) -> usize {
        self.downsample_factor
    }

    pub fn stages(&self) -> &[Conv] {
        &self.stages
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, image: Var) -> Result<Var> {
        let s = tape.shape(image);
        let f = self.downsample_factor;
        if s.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "extract_features",
                lhs: s.to_vec(),
                rhs: vec![0, 0, 0],
            });
        }
        if s[1] % f != 0 || s[2] % f != 0 || s[1] == 0 || s[2] == 0 {
            return Err(Error::IndivisibleShape {
                height: s[1],
                width: s[2],
                factor: f,
            });
        }
        let mut x = image;
        let last = self.stages.len() - 1;
        for (i, conv) in self.stages.iter().enumerate() {
            x = conv.forward(tape, bound, x)?;
            x = tape.relu(x)?;
            if i < last {
                x = tape.max_pool2(x)?;
            }
        }
        Ok(x)
    }
}

/// Two convolutions, ReLU between them, softplus on the single output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityHead {
    hidden: Conv,
    out: Conv,
    channels: usize,
}

impl DensityHead {
    pub fn new(store: &mut ParamStore, seed: u64, channels: usize, hidden: usize, kernel: usize) -> Result<Self> {
        Ok(DensityHead {
            hidden: Conv::new(store, seed, "head.conv1", channels, hidden, kernel, 1)?,
            out: Conv::new(store, seed, "head.conv2", hidden, 1, kernel, 1)?,
            channels,
        })
    }

    pub fn hidden(&self) -> &Conv {
        &self.hidden
    }

    pub fn output(&self) -> &Conv {
        &self.out
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var> {
        let s = tape.shape(features);
        if s.len() != 3 || s[0] != self.channels {
            return Err(Error::ShapeMismatch {
                op: "decode_density",
                lhs: s.to_vec(),
                rhs: vec![self.channels],
            });
        }
        let h = self.hidden.forward(tape, bound, features)?;
        let h = tape.relu(h)?;
        let y = self.out.forward(tape, bound, h)?;
        tape.softplus(y)
    }
}

/// Run `image` (`[3×H×W]`) through the backbone with frozen parameters.
pub fn extract_features(
    backbone: &Backbone,
    params: &ParamStore,
    image: &Tensor,
    source: Branch,
) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(image.clone());
    let y = backbone.forward(&mut tape, &bound, x)?;
    FeatureMap::new(tape.value(y).clone(), source, backbone.downsample_factor())
}

/// Decode guided features into a feature-resolution density map.
pub fn decode_density(head: &DensityHead, params: &ParamStore, guided: &FeatureMap) -> Result<DensityMap> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(guided.data().clone());
    let y = head.forward(&mut tape, &bound, x)?;
    DensityMap::new(tape.value(y).clone(), None)
}
