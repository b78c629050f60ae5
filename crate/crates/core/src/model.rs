//! Full network assembly: lift, stacked blocks (pre-norm residual axial
//! attention + local stencil, then a residual MLP), final normalization and
//! the scalar/flux readouts.

use crate::attention::AxialAttentionLayer;
use crate::chart::{ChartCoords, ChartNet};
use crate::error::{Error, Result};
use crate::local::LocalStencil;
use crate::params::{Binding, ParamId, ParamSet};
use crate::rng::{normal_vec, rng_substream, CatoRng};
use crate::rope;
use crate::scalar::Scalar;
use crate::tape::{FlopClass, Tape, VarId};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Gelu,
    Tanh,
}

impl Activation {
    pub fn apply<F: Scalar>(self, tape: &mut Tape<F>, x: VarId) -> Result<VarId> {
        match self {
            Activation::Silu => tape.silu(x),
            Activation::Gelu => tape.gelu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Gelu => {
                let c0 = (2.0 / std::f64::consts::PI).sqrt();
                0.5 * x * (1.0 + (c0 * (x + 0.044715 * x * x * x)).tanh())
            }
            Activation::Tanh => x.tanh(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CatoConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Overrides `mlp_ratio * embed_dim` when set.
    pub mlp_hidden: Option<usize>,
    pub kernel_size: usize,
    pub rope_theta: f64,
    pub rope_scale: f64,
    pub chart_hidden: usize,
    pub feat_dim: usize,
    /// Hidden width of the lift MLP; defaults to the embed dim.
    pub lift_hidden: Option<usize>,
    pub lift_activation: Activation,
    pub mlp_activation: Activation,
    pub dropout: f64,
    /// Theory setting: LayerNorm replaced by identity, local branch off,
    /// dropout zero.
    pub core_mode: bool,
}

impl Default for CatoConfig {
    fn default() -> Self {
        CatoConfig {
            layers: 2,
            embed_dim: 32,
            heads: 4,
            mlp_ratio: 4,
            mlp_hidden: None,
            kernel_size: 3,
            rope_theta: rope::DEFAULT_THETA,
            rope_scale: rope::DEFAULT_SCALE,
            chart_hidden: 64,
            feat_dim: 1,
            lift_hidden: None,
            lift_activation: Activation::Silu,
            mlp_activation: Activation::Gelu,
            dropout: 0.0,
            core_mode: false,
        }
    }
}

impl CatoConfig {
    /// Desk-scale preset used by the synthetic Darcy experiment. The MLP
    /// expansion ratio is halved relative to the paper-scale default to fit
    /// a single-core CPU budget.
    pub fn desk() -> Self {
        CatoConfig { mlp_ratio: 2, ..CatoConfig::default() }
    }

    /// Architecture row used by the paper-scale Darcy configuration.
    pub fn darcy_paper() -> Self {
        CatoConfig { layers: 8, embed_dim: 96, heads: 8, ..CatoConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        self.validate_except_depth()
    }

    fn validate_except_depth(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if (self.embed_dim / self.heads) % 2 != 0 {
            return Err(Error::Config("head dim must be even for rotary pairs".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config("kernel_size must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if self.mlp_hidden == Some(0) || self.lift_hidden == Some(0) || self.chart_hidden == 0 {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn mlp_hidden_dim(&self) -> usize {
        self.mlp_hidden.unwrap_or(self.mlp_ratio * self.embed_dim)
    }

    pub fn lift_hidden_dim(&self) -> usize {
        self.lift_hidden.unwrap_or(self.embed_dim)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub attn: AxialAttentionLayer,
    pub local: LocalStencil,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Full,
    /// Lift and readouts only; the comparison baseline.
    LiftReadout,
}

#[derive(Clone, Debug)]
pub struct ModelState<F: Scalar> {
    pub cfg: CatoConfig,
    pub kind: ModelKind,
    pub params: ParamSet<F>,
    pub chart: ChartNet,
    pub lift_w1: ParamId,
    pub lift_b1: ParamId,
    pub lift_w2: ParamId,
    pub lift_b2: ParamId,
    pub blocks: Vec<Block>,
    pub final_ln_g: ParamId,
    pub final_ln_b: ParamId,
    pub w_u: ParamId,
    pub b_u: ParamId,
    pub w_q: ParamId,
    pub b_q: ParamId,
}

pub struct ForwardOut {
    pub u_hat: VarId,
    pub q_hat: VarId,
    pub zeta: VarId,
}

fn linear_init<F: Scalar>(
    ps: &mut ParamSet<F>,
    name: String,
    fan_in: usize,
    fan_out: usize,
    rng: &mut CatoRng,
) -> Result<ParamId> {
    let std = 1.0 / (fan_in as f64).sqrt();
    let mut d = normal_vec::<F>(rng, fan_in * fan_out);
    d.iter_mut().for_each(|v| *v = *v * F::c(std));
    ps.add(name, Tensor::new(vec![fan_in, fan_out], d)?)
}

impl<F: Scalar> ModelState<F> {
    pub fn new(cfg: CatoConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Self::build(cfg, ModelKind::Full, seed)
    }

    /// Lift + readouts with no blocks: the linear-readout-only baseline.
    pub fn baseline(mut cfg: CatoConfig, seed: u64) -> Result<Self> {
        cfg.validate_except_depth()?;
        cfg.layers = 0;
        Self::build(cfg, ModelKind::LiftReadout, seed)
    }

    fn build(cfg: CatoConfig, kind: ModelKind, seed: u64) -> Result<Self> {
        let mut ps = ParamSet::new();
        let rng = &mut rng_substream(seed, "model-init", 0);
        let c = cfg.embed_dim;
        let chart = ChartNet::new(&mut ps, "chart", cfg.chart_hidden, rng)?;
        let in_dim = 2 + cfg.feat_dim;
        let lh = cfg.lift_hidden_dim();
        let lift_w1 = linear_init(&mut ps, "lift.w1".into(), in_dim, lh, rng)?;
        let lift_b1 = ps.add("lift.b1", Tensor::zeros(vec![lh]))?;
        let lift_w2 = linear_init(&mut ps, "lift.w2".into(), lh, c, rng)?;
        let lift_b2 = ps.add("lift.b2", Tensor::zeros(vec![c]))?;

        let mut blocks = Vec::with_capacity(cfg.layers);
        let mh = cfg.mlp_hidden_dim();
        for l in 0..cfg.layers {
            let p = format!("block{l}");
            let ln1_g = ps.add(format!("{p}.ln1.g"), Tensor::full(vec![c], F::one()))?;
            let ln1_b = ps.add(format!("{p}.ln1.b"), Tensor::zeros(vec![c]))?;
            let attn = AxialAttentionLayer::new(
                &mut ps,
                &format!("{p}.attn"),
                c,
                cfg.heads,
                cfg.rope_theta,
                cfg.rope_scale,
                rng,
            )?;
            let local = LocalStencil::new(&mut ps, &format!("{p}.local"), c, cfg.kernel_size, rng)?;
            let ln2_g = ps.add(format!("{p}.ln2.g"), Tensor::full(vec![c], F::one()))?;
            let ln2_b = ps.add(format!("{p}.ln2.b"), Tensor::zeros(vec![c]))?;
            let mlp_w1 = linear_init(&mut ps, format!("{p}.mlp.w1"), c, mh, rng)?;
            let mlp_b1 = ps.add(format!("{p}.mlp.b1"), Tensor::zeros(vec![mh]))?;
            let mlp_w2 = linear_init(&mut ps, format!("{p}.mlp.w2"), mh, c, rng)?;
            let mlp_b2 = ps.add(format!("{p}.mlp.b2"), Tensor::zeros(vec![c]))?;
            blocks.push(Block {
                ln1_g,
                ln1_b,
                attn,
                local,
                ln2_g,
                ln2_b,
                mlp_w1,
                mlp_b1,
                mlp_w2,
                mlp_b2,
            });
        }

        let final_ln_g = ps.add("final_ln.g", Tensor::full(vec![c], F::one()))?;
        let final_ln_b = ps.add("final_ln.b", Tensor::zeros(vec![c]))?;
        // Readouts start at zero so the initial prediction is the bias.
        let w_u = ps.add("readout.w_u", Tensor::zeros(vec![c, 1]))?;
        let b_u = ps.add("readout.b_u", Tensor::zeros(vec![1]))?;
        let w_q = ps.add("readout.w_q", Tensor::zeros(vec![c, 2]))?;
        let b_q = ps.add("readout.b_q", Tensor::zeros(vec![2]))?;

        Ok(ModelState {
            cfg,
            kind,
            params: ps,
            chart,
            lift_w1,
            lift_b1,
            lift_w2,
            lift_b2,
            blocks,
            final_ln_g,
            final_ln_b,
            w_u,
            b_u,
            w_q,
            b_q,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.total_values()
    }

    fn affine_norm(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        x: VarId,
        g: ParamId,
        b: ParamId,
    ) -> Result<VarId> {
        if self.cfg.core_mode {
            return Ok(x);
        }
        let n = tape.layer_norm_last(x)?;
        let s = tape.channel_scale(n, binding.var(g))?;
        tape.add_bias(s, binding.var(b))
    }

    /// Concatenate coordinates and features, then apply the two-layer lift.
    pub fn lift(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        coords: VarId,
        feats: Option<VarId>,
    ) -> Result<VarId> {
        let prev = tape.set_class(FlopClass::Lift);
        let result = (|| {
            let zin = match feats {
                Some(f) => {
                    let df = tape.shape(f).get(1).copied().unwrap_or(0);
                    if df != self.cfg.feat_dim {
                        return Err(Error::Shape {
                            op: "lift",
                            detail: format!("feature dim {} vs configured {}", df, self.cfg.feat_dim),
                        });
                    }
                    tape.concat(&[coords, f], 1)?
                }
                None => {
                    if self.cfg.feat_dim != 0 {
                        return Err(Error::Shape {
                            op: "lift",
                            detail: format!("model expects {} feature channels", self.cfg.feat_dim),
                        });
                    }
                    coords
                }
            };
            let a = tape.matmul(zin, binding.var(self.lift_w1))?;
            let a = tape.add_bias(a, binding.var(self.lift_b1))?;
            let a = self.cfg.lift_activation.apply(tape, a)?;
            let b = tape.matmul(a, binding.var(self.lift_w2))?;
            tape.add_bias(b, binding.var(self.lift_b2))
        })();
        tape.set_class(prev);
        result
    }

    fn maybe_dropout(
        &self,
        tape: &mut Tape<F>,
        x: VarId,
        rng: &mut Option<&mut CatoRng>,
    ) -> Result<VarId> {
        let p = self.cfg.dropout;
        if p <= 0.0 || self.cfg.core_mode {
            return Ok(x);
        }
        let rng = match rng.as_deref_mut() {
            Some(r) => r,
            None => return Ok(x),
        };
        let keep = F::c(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..tape.value(x).numel())
            .map(|_| if rng.gen_range(0.0..1.0) < p { F::zero() } else { keep })
            .collect();
        tape.mul_mask(x, mask)
    }

    /// One block: `ht = h + A(LN(h), zeta) + L(LN(h))`, then
    /// `h' = ht + MLP(LN(ht))`.
    pub fn block_forward(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        block: &Block,
        h: VarId,
        zeta: VarId,
        grid: (usize, usize),
        dropout_rng: &mut Option<&mut CatoRng>,
    ) -> Result<VarId> {
        let n1 = self.affine_norm(tape, binding, h, block.ln1_g, block.ln1_b)?;
        let att = block.attn.forward(tape, binding, n1, zeta, grid)?;
        let att = self.maybe_dropout(tape, att, dropout_rng)?;
        let mut ht = tape.add(h, att)?;
        if !self.cfg.core_mode {
            let loc = block.local.forward(tape, binding, n1, grid)?;
            ht = tape.add(ht, loc)?;
        }
        let n2 = self.affine_norm(tape, binding, ht, block.ln2_g, block.ln2_b)?;
        let prev = tape.set_class(FlopClass::Mlp);
        let m = (|| {
            let a = tape.matmul(n2, binding.var(block.mlp_w1))?;
            let a = tape.add_bias(a, binding.var(block.mlp_b1))?;
            let a = self.cfg.mlp_activation.apply(tape, a)?;
            let b = tape.matmul(a, binding.var(block.mlp_w2))?;
            tape.add_bias(b, binding.var(block.mlp_b2))
        })();
        tape.set_class(prev);
        let m = self.maybe_dropout(tape, m?, dropout_rng)?;
        tape.add(ht, m)
    }

    /// Full forward pass for one sample on an `h x w` grid.
    ///
    /// `coords` is `[N, 2]`, `feats` is `[N, d_f]`; outputs are `[N, 1]` and
    /// `[N, 2]`.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        coords: VarId,
        feats: Option<VarId>,
        grid: (usize, usize),
        mut dropout_rng: Option<&mut CatoRng>,
    ) -> Result<ForwardOut> {
        let (h, w) = grid;
        let n = h * w;
        if tape.shape(coords) != [n, 2] {
            return Err(Error::Shape {
                op: "model_forward",
                detail: format!("coords {:?} vs grid {h}x{w}", tape.shape(coords)),
            });
        }
        let zeta = self.chart.forward_tape(tape, binding, coords)?;
        let mut hstate = self.lift(tape, binding, coords, feats)?;
        for block in &self.blocks {
            hstate =
                self.block_forward(tape, binding, block, hstate, zeta, grid, &mut dropout_rng)?;
        }
        if self.kind == ModelKind::Full {
            hstate = self.affine_norm(tape, binding, hstate, self.final_ln_g, self.final_ln_b)?;
        }
        let prev = tape.set_class(FlopClass::Readout);
        let u = tape.matmul(hstate, binding.var(self.w_u))?;
        let u_hat = tape.add_bias(u, binding.var(self.b_u))?;
        let q = tape.matmul(hstate, binding.var(self.w_q))?;
        let q_hat = tape.add_bias(q, binding.var(self.b_q))?;
        tape.set_class(prev);
        Ok(ForwardOut { u_hat, q_hat, zeta })
    }

    /// Inference convenience: run one sample and return plain tensors.
    pub fn predict(
        &self,
        coords: &Tensor<F>,
        feats: Option<&Tensor<F>>,
        grid: (usize, usize),
    ) -> Result<(Tensor<F>, Tensor<F>, ChartCoords<F>)> {
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape)?;
        let cv = tape.constant(coords.clone())?;
        let fv = match feats {
            Some(f) => Some(tape.constant(f.clone())?),
            None => None,
        };
        let out = self.forward(&mut tape, &binding, cv, fv, grid, None)?;
        let zeta = ChartCoords::new(grid.0, grid.1, tape.value(out.zeta).clone())?;
        Ok((tape.value(out.u_hat).clone(), tape.value(out.q_hat).clone(), zeta))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::checkpoint::save_params(path, self.params.all())
    }

    /// Rebuild a model of this configuration from a checkpoint.
    pub fn load(cfg: CatoConfig, kind: ModelKind, path: &std::path::Path) -> Result<Self> {
        let mut model = match kind {
            ModelKind::Full => Self::new(cfg, 0)?,
            ModelKind::LiftReadout => Self::baseline(cfg, 0)?,
        };
        let records = crate::checkpoint::load_records::<F>(path)?;
        if records.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} records, model has {} parameters",
                records.len(),
                model.params.len()
            )));
        }
        for (name, tensor) in records {
            let id = model
                .params
                .id_of(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            let slot = model.params.get_mut(id);
            if slot.tensor.shape != tensor.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}`: shape {:?} vs expected {:?}",
                    tensor.shape, slot.tensor.shape
                )));
            }
            slot.tensor = tensor;
        }
        Ok(model)
    }
}
