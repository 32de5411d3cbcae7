//! The two-stage network: layer widths, ablation switches, parameter
//! initialization and the batched forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionError, AttentionSpec};
use crate::channel::{ChannelBatch, ChannelError, ChannelRealization, PowerBudget};
use crate::hetgraph::{build_stage1_batch, build_stage2, GraphError, InputScaling};
use crate::metrics::{rate_terms, wrap_phase, DesignBatch, MetricsError, RateTerms, TransmitDesign};
use crate::numerics::{ModelParams, NumericsError, ParamBinder, Tensor};
use crate::{stage1, stage2};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub(crate) type Result<T> = std::result::Result<T, ModelError>;

/// Heads and per-head width of one attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerWidth {
    pub heads: usize,
    pub head_dim: usize,
}

impl LayerWidth {
    pub const fn new(heads: usize, head_dim: usize) -> Self {
        LayerWidth { heads, head_dim }
    }

    pub fn out(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Every width of the network. None of them depends on `L`, `K` or `M`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Shared per-node lift of the first graph's raw features.
    pub lift: usize,
    /// Each of the four augmentation attention operators.
    pub augment: LayerWidth,
    pub stage1_layers: Vec<LayerWidth>,
    /// Hidden widths of the phase output MLP.
    pub phase_hidden: [usize; 2],
    pub stage2_layers: Vec<LayerWidth>,
    /// Hidden width of the output heads.
    pub head_hidden: usize,
}

impl ModelDims {
    /// Full-size network.
    pub fn full() -> Self {
        ModelDims {
            lift: 640,
            augment: LayerWidth::new(5, 32),
            stage1_layers: vec![LayerWidth::new(10, 64), LayerWidth::new(10, 64)],
            phase_hidden: [320, 128],
            stage2_layers: vec![LayerWidth::new(10, 128), LayerWidth::new(10, 256)],
            head_hidden: 640,
        }
    }

    /// Reduced widths that train in minutes on a single core.
    pub fn desk() -> Self {
        ModelDims {
            lift: 64,
            augment: LayerWidth::new(2, 8),
            stage1_layers: vec![LayerWidth::new(4, 16), LayerWidth::new(4, 16)],
            phase_hidden: [32, 16],
            stage2_layers: vec![LayerWidth::new(4, 32), LayerWidth::new(4, 64)],
            head_hidden: 64,
        }
    }

    /// Width of the augmentation output (three concatenated operators).
    pub fn augment_out(&self) -> usize {
        3 * self.augment.out()
    }

    pub fn stage1_out(&self) -> usize {
        self.stage1_layers.last().map(|l| l.out()).unwrap_or(self.augment_out())
    }

    pub fn stage2_out(&self) -> usize {
        self.stage2_layers.last().map(|l| l.out()).unwrap_or(self.stage1_out())
    }

    /// Checks that every residual can be zero-padded into its layer.
    pub fn validate(&self, n_t: usize) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        let raw = 2 * n_t;
        if n_t == 0 {
            return err("n_t must be positive".into());
        }
        let all = std::iter::once(&self.augment)
            .chain(&self.stage1_layers)
            .chain(&self.stage2_layers);
        if self.lift == 0 || self.head_hidden == 0 || self.phase_hidden.contains(&0) || all.clone().any(|l| l.out() == 0) {
            return err("all widths must be positive".into());
        }
        if self.stage1_layers.is_empty() || self.stage2_layers.is_empty() {
            return err("each stage needs at least one attention layer".into());
        }
        let mut prev = self.augment_out();
        for (i, l) in self.stage1_layers.iter().enumerate() {
            if l.out() < prev || l.out() < raw {
                return err(format!(
                    "first-stage layer {} width {} cannot hold residual widths {prev} and {raw}",
                    i + 1,
                    l.out()
                ));
            }
            prev = l.out();
        }
        for (i, l) in self.stage2_layers.iter().enumerate() {
            if l.out() < prev || l.out() < raw {
                return err(format!(
                    "second-stage layer {} width {} cannot hold residual widths {prev} and {raw}",
                    i + 1,
                    l.out()
                ));
            }
            prev = l.out();
        }
        Ok(())
    }
}

/// Output head of the second stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    /// Direct regression of beamforming and AN vectors.
    BeamDirect,
    /// Hybrid ZF/MRT directions with learned mixing and power.
    ModelBased,
}

impl HeadKind {
    pub fn code(self) -> u8 {
        match self {
            HeadKind::BeamDirect => 0,
            HeadKind::ModelBased => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(HeadKind::BeamDirect),
            1 => Some(HeadKind::ModelBased),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::BeamDirect => "beam-direct",
            HeadKind::ModelBased => "model-based",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "beam-direct" | "beam_direct" => Ok(HeadKind::BeamDirect),
            "model-based" | "model_based" => Ok(HeadKind::ModelBased),
            other => Err(format!("unknown head `{other}` (expected beam-direct or model-based)")),
        }
    }
}

/// Ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFlags {
    /// Residual connections in every attention layer.
    pub residual: bool,
    /// Run the phase-shift stage; when off, all phases are zero and the
    /// augmentation rows handed to the second stage are zero.
    pub two_stage: bool,
}

impl Default for ModelFlags {
    fn default() -> Self {
        ModelFlags {
            residual: true,
            two_stage: true,
        }
    }
}

/// A network instance: architecture plus weights.
#[derive(Clone, Debug)]
pub struct HgnnModel {
    pub n_t: usize,
    pub dims: ModelDims,
    pub head: HeadKind,
    pub flags: ModelFlags,
    pub scaling: InputScaling,
    pub params: ModelParams,
}

/// Differentiable result of a forward pass over a batch.
pub struct ForwardOutput {
    pub design: DesignBatch,
    pub terms: RateTerms,
}

impl HgnnModel {
    pub fn new(
        n_t: usize,
        dims: ModelDims,
        head: HeadKind,
        flags: ModelFlags,
        scaling: InputScaling,
        seed: u64,
    ) -> Result<Self> {
        dims.validate(n_t)?;
        let mut params = ModelParams::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        stage1::init_params(&mut params, n_t, &dims, &mut rng)?;
        stage2::init_params(&mut params, n_t, &dims, head, &mut rng)?;
        Ok(HgnnModel {
            n_t,
            dims,
            head,
            flags,
            scaling,
            params,
        })
    }

    /// Rejects channel dimensions the chosen head cannot serve.
    pub fn check_channel_dims(&self, n_t: usize, l: usize, k: usize, m: usize) -> Result<()> {
        if n_t != self.n_t {
            return Err(ModelError::Config(format!("model built for n_t = {}, got {n_t}", self.n_t)));
        }
        if l == 0 || k == 0 {
            return Err(ModelError::Config("the network needs l >= 1 and k >= 1".into()));
        }
        if self.head == HeadKind::ModelBased {
            if k > n_t {
                return Err(ModelError::Config(format!("zero forcing needs k <= n_t, got k = {k}, n_t = {n_t}")));
            }
            if m > 0 && k + 1 > n_t {
                return Err(ModelError::Config(format!(
                    "AN nulling needs k + 1 <= n_t, got k = {k}, n_t = {n_t}"
                )));
            }
        }
        Ok(())
    }

    /// Batched forward pass. Parameters come from `binder`, which decides
    /// whether gradients are tracked.
    pub fn forward(&self, binder: &ParamBinder, chs: &[&ChannelRealization], budget: &PowerBudget) -> Result<ForwardOutput> {
        let first = chs.first().ok_or_else(|| ModelError::Config("empty batch".into()))?;
        let (n_t, l, k, m) = first.dims();
        self.check_channel_dims(n_t, l, k, m)?;
        let b = chs.len();
        let cb = ChannelBatch::new(chs)?;
        let width = self.dims.stage1_out();

        let (phi, aug_lu, aug_eve) = if self.flags.two_stage {
            let g1 = build_stage1_batch(chs, &self.scaling)?;
            let out = stage1::forward(&g1, binder, &self.dims, self.flags.residual)?;
            (out.phi, out.x_bu, out.x_be)
        } else {
            (Tensor::zeros(&[b, l]), Tensor::zeros(&[b * k, width]), Tensor::zeros(&[b * m, width]))
        };
        let g2 = build_stage2(&cb, &phi, &aug_lu, &aug_eve, &self.scaling)?;
        let emb = stage2::embed(&g2, binder, &self.dims, self.flags.residual)?;
        let (w, z) = match self.head {
            HeadKind::BeamDirect => stage2::beam_direct(&emb, binder, &g2, budget)?,
            HeadKind::ModelBased => stage2::model_based(&emb, binder, &g2, budget)?,
        };
        let terms = rate_terms(&g2.h_eff, &g2.f_eff, &w, &z, &cb.sigma2, &cb.sigma2_e)?;
        Ok(ForwardOutput {
            design: DesignBatch { phi, w, z },
            terms,
        })
    }

    /// Inference without gradient tracking. A phase whose sigmoid saturates
    /// to exactly `2 pi` is reported as the equivalent 0.
    pub fn infer(&self, chs: &[&ChannelRealization], budget: &PowerBudget) -> Result<Vec<TransmitDesign>> {
        let binder = ParamBinder::frozen(&self.params);
        let out = self.forward(&binder, chs, budget)?;
        let mut designs = out.design.to_designs();
        for d in &mut designs {
            d.phi.iter_mut().for_each(|p| *p = wrap_phase(*p));
        }
        Ok(designs)
    }
}

/// Attention spec helper shared by both stages.
pub(crate) fn spec(in_dim: usize, edge_dim: Option<usize>, w: LayerWidth) -> AttentionSpec {
    AttentionSpec {
        in_dim,
        edge_dim,
        heads: w.heads,
        head_dim: w.head_dim,
    }
}

/// Uniform variance-preserving bound for a dense `[fan_in, fan_out]` weight.
pub(crate) fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `x [rows, n] + bias [n]` with the bias broadcast over rows.
pub(crate) fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let rows = x.shape()[0];
    Ok(x.add(&bias.expand(0, rows)?)?)
}
