//! Local and global density guidance, and the full one-shot forward pass.
//!
//! Local guidance concatenates each prototype's similarity plane onto the
//! query features and runs it through a small conv stack (the last conv is
//! dilated); the per-prototype outputs are summed. Global guidance pools the
//! locally activated map with single-token cross-attention whose query is the
//! density-weighted support token, and adds the attended token back onto
//! every cell.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::{Branch, FeatureMap};
use crate::density::{downsample_preserving_count, DensityMap};
use crate::math;
use crate::mldl::{
    fit_prototypes, EmFit, LocalDensitySimilarityMatrix, PrototypeSet, SupportDensityFeature,
};
use crate::model::{Bound, Conv, Linear, Model, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Channel-wise spatial sum of the support density feature, `[1×C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDensityToken {
    q: Tensor,
}

impl GlobalDensityToken {
    pub fn new(q: Tensor) -> Result<Self> {
        if q.rank() != 2 || q.shape()[0] != 1 {
            return Err(Error::ShapeMismatch {
                op: "global token",
                lhs: q.shape().to_vec(),
                rhs: vec![1, 0],
            });
        }
        q.ensure_finite("global token")?;
        Ok(GlobalDensityToken { q })
    }

    pub fn q(&self) -> &Tensor {
        &self.q
    }
}

pub fn encode_global_token(sdf: &SupportDensityFeature) -> GlobalDensityToken {
    let (c, n) = (sdf.channels(), sdf.cells());
    let q: Vec<f64> = sdf
        .data()
        .data()
        .chunks_exact(n)
        .map(|row| row.iter().sum())
        .collect();
    GlobalDensityToken {
        q: Tensor::new(vec![1, c], q).expect("one row of C"),
    }
}

/// Everything the support image contributes to a query prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceBundle {
    pub ldsm: LocalDensitySimilarityMatrix,
    pub global_token: GlobalDensityToken,
}

/// Per-prototype conv stack: 3×3 conv (C+1→C), ReLU, 3×3 conv, ReLU, dilated
/// 3×3 conv, ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceBranch {
    convs: [Conv; 3],
}

impl GuidanceBranch {
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        channels: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Self> {
        Ok(GuidanceBranch {
            convs: [
                Conv::new(store, seed, &format!("{name}.conv1"), channels + 1, channels, kernel, 1)?,
                Conv::new(store, seed, &format!("{name}.conv2"), channels, channels, kernel, 1)?,
                Conv::new(store, seed, &format!("{name}.conv3"), channels, channels, kernel, dilation)?,
            ],
        })
    }

    pub fn convs(&self) -> &[Conv; 3] {
        &self.convs
    }

    /// `plane` is `[1×h×w]`, `u` is `[C×h×w]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, plane: Var, u: Var) -> Result<Var> {
        let (ps, us) = (tape.shape(plane), tape.shape(u));
        if ps.len() != 3 || us.len() != 3 || ps[0] != 1 || ps[1..] != us[1..] {
            return Err(Error::ShapeMismatch {
                op: "local_guide",
                lhs: ps.to_vec(),
                rhs: us.to_vec(),
            });
        }
        let mut x = tape.concat(&[plane, u])?;
        for conv in &self.convs {
            x = conv.forward(tape, bound, x)?;
            x = tape.relu(x)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub psi: Linear,
    pub dim: usize,
    pub channels: usize,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, seed: u64, channels: usize, dim: usize) -> Self {
        AttentionParams {
            wq: Linear::new(store, seed, "attention.wq", channels, dim, false),
            wk: Linear::new(store, seed, "attention.wk", channels, dim, false),
            wv: Linear::new(store, seed, "attention.wv", channels, dim, false),
            psi: Linear::new(store, seed, "attention.psi", dim, channels, true),
            dim,
            channels,
        }
    }
}

/// Tape handles produced by [`global_guide_on_tape`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    /// Guided map `[C×h×w]`.
    pub output: Var,
    /// `[1×N]`, or `[N×N]` with tiled queries.
    pub weights: Var,
    /// Attended token(s) `[1×C]` or `[N×C]`.
    pub o: Var,
}

/// Cross-attention of the token `q` (`[1×C]`) over the cells of
/// `local` (`[C×h×w]`), with the result added back onto every cell.
pub fn global_guide_on_tape(
    tape: &mut Tape,
    bound: &Bound,
    params: &AttentionParams,
    q: Var,
    local: Var,
    tile_q: bool,
) -> Result<AttentionVars> {
    let (qs, ls) = (tape.shape(q).to_vec(), tape.shape(local).to_vec());
    if qs != [1, params.channels] || ls.len() != 3 || ls[0] != params.channels {
        return Err(Error::ShapeMismatch {
            op: "global_guide",
            lhs: qs,
            rhs: ls,
        });
    }
    let (c, h, w) = (ls[0], ls[1], ls[2]);
    let n = h * w;
    let flat = tape.reshape(local, &[c, n])?;
    let kv = tape.transpose(flat)?; // [N×C]
    let query = if tile_q { tape.add(kv, q)? } else { q };
    let qa = params.wq.forward(tape, bound, query)?;
    let ka = params.wk.forward(tape, bound, kv)?;
    let va = params.wv.forward(tape, bound, kv)?;
    let kt = tape.transpose(ka)?;
    let scores = tape.matmul(qa, kt)?;
    let scores = tape.scale(scores, 1.0 / math::sqrt(params.dim as f64))?;
    let weights = tape.softmax(scores, 1)?;
    let pooled = tape.matmul(weights, va)?;
    let projected = params.psi.forward(tape, bound, pooled)?;
    let o = tape.add(query, projected)?;
    let output = if tile_q {
        let t = tape.transpose(o)?;
        tape.reshape(t, &[c, h, w])?
    } else {
        let col = tape.reshape(o, &[c, 1, 1])?;
        tape.add(local, col)?
    };
    Ok(AttentionVars { output, weights, o })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalGuideOutput {
    pub output: FeatureMap,
    pub weights: Tensor,
    pub o: Tensor,
}

pub fn global_guide(
    token: &GlobalDensityToken,
    local_activated: &FeatureMap,
    params: &AttentionParams,
    store: &ParamStore,
    tile_q: bool,
) -> Result<GlobalGuideOutput> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let q = tape.constant(token.q.clone());
    let l = tape.constant(local_activated.data().clone());
    let vars = global_guide_on_tape(&mut tape, &bound, params, q, l, tile_q)?;
    Ok(GlobalGuideOutput {
        output: FeatureMap::new(
            tape.value(vars.output).clone(),
            local_activated.source(),
            local_activated.downsample_factor(),
        )?,
        weights: tape.value(vars.weights).clone(),
        o: tape.value(vars.o).clone(),
    })
}

/// Sum of every prototype branch applied to the query features.
pub fn local_guide_on_tape(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    prototypes: &PrototypeSet,
    u: Var,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for v in 0..prototypes.len() {
        let plane = tape.cosine(u, prototypes.direction(v))?;
        let y = model.branch(v).forward(tape, bound, plane, u)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, y)?,
            None => y,
        });
    }
    acc.ok_or(Error::EmptyInput)
}

/// Value-level local guidance from precomputed similarity planes `[V×h×w]`.
pub fn local_guide(model: &Model, ldsm: &LocalDensitySimilarityMatrix, u: &FeatureMap) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, false);
    let uv = tape.constant(u.data().clone());
    let s = ldsm.delta().shape();
    let (h, w) = (s[1], s[2]);
    let mut acc: Option<Var> = None;
    for v in 0..s[0] {
        let plane = tape.constant(Tensor::new(vec![1, h, w], ldsm.plane(v).to_vec())?);
        let y = model.branch(v).forward(&mut tape, &bound, plane, uv)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, y)?,
            None => y,
        });
    }
    let out = acc.ok_or(Error::EmptyInput)?;
    FeatureMap::new(tape.value(out).clone(), Branch::Query, u.downsample_factor())
}

/// Support-side state recorded on a tape and reused for every query.
#[derive(Clone, Debug)]
pub struct SupportEncoding {
    pub sdf: SupportDensityFeature,
    pub fit: Option<EmFit>,
    pub prototypes: PrototypeSet,
    /// `[1×C]` token on the tape; differentiable w.r.t. the support branch.
    pub token: Var,
}

/// Support branch: features, density-weighted features, EM prototypes and
/// the global token. With `fixed_prototypes` the EM fit is skipped and the
/// given prototypes are used instead.
pub fn encode_support(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    support: &Tensor,
    support_gt: &DensityMap,
    fixed_prototypes: Option<&PrototypeSet>,
) -> Result<SupportEncoding> {
    let factor = model.backbone().downsample_factor();
    let x = tape.constant(support.clone());
    let feats = model.backbone().forward(tape, bound, x)?;
    let down = downsample_preserving_count(support_gt, factor)?;
    let fs = tape.shape(feats).to_vec();
    if down.height() != fs[1] || down.width() != fs[2] {
        return Err(Error::ShapeMismatch {
            op: "build_support_density_feature",
            lhs: fs,
            rhs: down.grid().shape().to_vec(),
        });
    }
    let density = down.values().to_vec();
    let d = tape.constant(down.into_grid());
    let sdf_var = tape.mul(feats, d)?;
    let sdf = SupportDensityFeature::new(tape.value(sdf_var).clone(), density)?;
    let (fit, prototypes) = match fixed_prototypes {
        Some(p) => (None, p.clone()),
        None => {
            let fit = fit_prototypes(&sdf, &model.config().em())?;
            let p = fit.prototypes.clone();
            (Some(fit), p)
        }
    };
    let c = fs[0];
    let flat = tape.reshape(sdf_var, &[c, fs[1] * fs[2]])?;
    let summed = tape.sum_axis(flat, 1)?;
    let token = tape.reshape(summed, &[1, c])?;
    Ok(SupportEncoding {
        sdf,
        fit,
        prototypes,
        token,
    })
}

/// Query branch for one support encoding; returns the `[1×h×w]` density.
pub fn decode_query(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    support: &SupportEncoding,
    query: &Tensor,
) -> Result<Var> {
    let x = tape.constant(query.clone());
    let u = model.backbone().forward(tape, bound, x)?;
    let local = if model.config().use_ldg {
        local_guide_on_tape(model, tape, bound, &support.prototypes, u)?
    } else {
        u
    };
    let guided = match model.attention() {
        Some(att) => global_guide_on_tape(tape, bound, att, support.token, local, model.config().tile_q)?.output,
        None => local,
    };
    model.head().forward(tape, bound, guided)
}

/// Frozen-parameter prediction for one query, feature resolution.
pub fn forward_query(
    model: &Model,
    query: &Tensor,
    support: &Tensor,
    support_gt: &DensityMap,
) -> Result<DensityMap> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, false);
    let enc = encode_support(model, &mut tape, &bound, support, support_gt, None)?;
    let y = decode_query(model, &mut tape, &bound, &enc, query)?;
    DensityMap::new(tape.value(y).clone(), None)
}
