//! Point-cloud variant: the learned chart is kept, axial attention is
//! replaced by dense attention with a chart-conditioned additive position
//! bias, and local structure comes from KNN message passing with
//! soft-attention and max aggregation. Blocks use gated residual updates.
//!
//! The forward pass first reorders points into a canonical coordinate order
//! (lexicographic by position), runs every reduction in that layout, and
//! scatters the outputs back. Permuting the input points therefore permutes
//! the outputs bit for bit.

use crate::chart::ChartNet;
use crate::error::{Error, Result};
use crate::loss::loss_val_tape;
use crate::optim::{OneCycle, OptimizerState};
use crate::params::{Binding, ParamId, ParamSet};
use crate::rng::{normal_vec, rng_substream, CatoRng};
use crate::scalar::Scalar;
use crate::tape::{FlopClass, Tape, VarId};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct PointCloud<F: Scalar> {
    /// `[N, 2]`.
    pub coords: Tensor<F>,
    /// `[N, d_f]`; zero columns allowed.
    pub feats: Tensor<F>,
}

impl<F: Scalar> PointCloud<F> {
    pub fn new(coords: Tensor<F>, feats: Tensor<F>) -> Result<Self> {
        if coords.rank() != 2 || coords.shape[1] != 2 {
            return Err(Error::Shape {
                op: "PointCloud::new",
                detail: format!("coords must be [N, 2], got {:?}", coords.shape),
            });
        }
        let n = coords.shape[0];
        if feats.rank() != 2 || feats.shape[0] != n {
            return Err(Error::Shape {
                op: "PointCloud::new",
                detail: format!("feats {:?} vs {n} points", feats.shape),
            });
        }
        Ok(PointCloud { coords, feats })
    }

    pub fn len(&self) -> usize {
        self.coords.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feat_dim(&self) -> usize {
        self.feats.shape[1]
    }

    pub fn point(&self, i: usize) -> (F, F) {
        (self.coords.data[2 * i], self.coords.data[2 * i + 1])
    }

    /// Select points by index (gathers coordinates and features).
    pub fn gather(&self, order: &[usize]) -> PointCloud<F> {
        let d_f = self.feat_dim();
        let mut coords = Vec::with_capacity(order.len() * 2);
        let mut feats = Vec::with_capacity(order.len() * d_f);
        for &i in order {
            coords.push(self.coords.data[2 * i]);
            coords.push(self.coords.data[2 * i + 1]);
            feats.extend_from_slice(&self.feats.data[i * d_f..(i + 1) * d_f]);
        }
        PointCloud {
            coords: Tensor { shape: vec![order.len(), 2], data: coords, grad: None },
            feats: Tensor { shape: vec![order.len(), d_f], data: feats, grad: None },
        }
    }
}

/// K-nearest-neighbor table with per-edge static geometry.
#[derive(Clone, Debug)]
pub struct KnnGraph<F: Scalar> {
    pub k: usize,
    /// `N x K`, row-major; each row lists distinct neighbors of the node,
    /// nearest first, self excluded, distance ties broken by lower index.
    pub neighbors: Vec<usize>,
    /// `[N*K, 3]`: `(x_j - x_i, y_j - y_i, ||x_j - x_i||)`.
    pub edge_static: Tensor<F>,
}

/// Exact KNN by full pairwise distances.
pub fn build_knn<F: Scalar>(pc: &PointCloud<F>, k: usize) -> Result<KnnGraph<F>> {
    let n = pc.len();
    if k == 0 || k >= n {
        return Err(Error::Config(format!("need 0 < K < N, got K={k}, N={n}")));
    }
    let mut neighbors = Vec::with_capacity(n * k);
    let mut edge_static = Vec::with_capacity(n * k * 3);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        let (xi, yi) = pc.point(i);
        cand.clear();
        for j in 0..n {
            if j == i {
                continue;
            }
            let (xj, yj) = pc.point(j);
            let dx = (xj - xi).to_f64_c();
            let dy = (yj - yi).to_f64_c();
            cand.push((dx * dx + dy * dy, j));
        }
        cand.sort_unstable_by(|a, b| {
            a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1))
        });
        for &(_, j) in cand.iter().take(k) {
            neighbors.push(j);
            let (xj, yj) = pc.point(j);
            let dx = xj - xi;
            let dy = yj - yi;
            edge_static.push(dx);
            edge_static.push(dy);
            edge_static.push((dx * dx + dy * dy).sqrt());
        }
    }
    Ok(KnnGraph {
        k,
        neighbors,
        edge_static: Tensor::new(vec![n * k, 3], edge_static)?,
    })
}

/// Indices sorted lexicographically by `(x, y)`; permutation-invariant for
/// clouds with distinct coordinates.
pub fn canonical_order<F: Scalar>(coords: &Tensor<F>) -> Vec<usize> {
    let n = coords.shape[0];
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_unstable_by(|&a, &b| {
        let (xa, ya) = (coords.data[2 * a].to_f64_c(), coords.data[2 * a + 1].to_f64_c());
        let (xb, yb) = (coords.data[2 * b].to_f64_c(), coords.data[2 * b + 1].to_f64_c());
        xa.partial_cmp(&xb).expect("finite").then(ya.partial_cmp(&yb).expect("finite"))
    });
    idx
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PcConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub k_neighbors: usize,
    pub mlp_ratio: usize,
    pub chart_hidden: usize,
    pub feat_dim: usize,
    /// Initial value of the residual gates.
    pub gamma_init: f64,
    /// Emit the auxiliary flux head.
    pub flux_head: bool,
}

impl Default for PcConfig {
    fn default() -> Self {
        PcConfig {
            layers: 2,
            embed_dim: 32,
            heads: 4,
            k_neighbors: 16,
            mlp_ratio: 4,
            chart_hidden: 64,
            feat_dim: 1,
            gamma_init: 0.1,
            flux_head: true,
        }
    }
}

impl PcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.k_neighbors == 0 {
            return Err(Error::Config("k_neighbors must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PcBlock {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    /// Per-head scale of the chart-distance attention bias.
    pub beta: ParamId,
    pub gamma_attn: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w_c: ParamId,
    pub w_delta: ParamId,
    pub geo_w1: ParamId,
    pub geo_b1: ParamId,
    pub geo_w2: ParamId,
    pub geo_b2: ParamId,
    pub w_s: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub gamma_loc: ParamId,
    pub ln3_g: ParamId,
    pub ln3_b: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub gamma_mlp: ParamId,
}

#[derive(Clone, Debug)]
pub struct PcModelState<F: Scalar> {
    pub cfg: PcConfig,
    pub params: ParamSet<F>,
    pub chart: ChartNet,
    pub lift_w1: ParamId,
    pub lift_b1: ParamId,
    pub lift_w2: ParamId,
    pub lift_b2: ParamId,
    pub cb_w1: ParamId,
    pub cb_b1: ParamId,
    pub cb_w2: ParamId,
    pub cb_b2: ParamId,
    pub blocks: Vec<PcBlock>,
    pub final_ln_g: ParamId,
    pub final_ln_b: ParamId,
    pub w_u: ParamId,
    pub b_u: ParamId,
    pub w_q_out: ParamId,
    pub b_q_out: ParamId,
}

fn linear<F: Scalar>(
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

impl<F: Scalar> PcModelState<F> {
    pub fn new(cfg: PcConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let rng = &mut rng_substream(seed, "pc-model-init", 0);
        let c = cfg.embed_dim;
        let chart = ChartNet::new(&mut ps, "chart", cfg.chart_hidden, rng)?;
        let in_dim = 2 + cfg.feat_dim + 2;
        let lift_w1 = linear(&mut ps, "lift.w1".into(), in_dim, c, rng)?;
        let lift_b1 = ps.add("lift.b1", Tensor::zeros(vec![c]))?;
        let lift_w2 = linear(&mut ps, "lift.w2".into(), c, c, rng)?;
        let lift_b2 = ps.add("lift.b2", Tensor::zeros(vec![c]))?;
        let cb_w1 = linear(&mut ps, "cb.w1".into(), 2, c, rng)?;
        let cb_b1 = ps.add("cb.b1", Tensor::zeros(vec![c]))?;
        let cb_w2 = linear(&mut ps, "cb.w2".into(), c, c, rng)?;
        let cb_b2 = ps.add("cb.b2", Tensor::zeros(vec![c]))?;

        let mut blocks = Vec::with_capacity(cfg.layers);
        let mh = cfg.mlp_ratio * c;
        let gamma = F::c(cfg.gamma_init);
        for l in 0..cfg.layers {
            let p = format!("pc{l}");
            blocks.push(PcBlock {
                ln1_g: ps.add(format!("{p}.ln1.g"), Tensor::full(vec![c], F::one()))?,
                ln1_b: ps.add(format!("{p}.ln1.b"), Tensor::zeros(vec![c]))?,
                w_q: linear(&mut ps, format!("{p}.attn.w_q"), c, c, rng)?,
                w_k: linear(&mut ps, format!("{p}.attn.w_k"), c, c, rng)?,
                w_v: linear(&mut ps, format!("{p}.attn.w_v"), c, c, rng)?,
                w_o: linear(&mut ps, format!("{p}.attn.w_o"), c, c, rng)?,
                beta: ps.add(format!("{p}.attn.beta"), Tensor::full(vec![cfg.heads], F::one()))?,
                gamma_attn: ps.add(format!("{p}.gamma_attn"), Tensor::full(vec![c], gamma))?,
                ln2_g: ps.add(format!("{p}.ln2.g"), Tensor::full(vec![c], F::one()))?,
                ln2_b: ps.add(format!("{p}.ln2.b"), Tensor::zeros(vec![c]))?,
                w_c: linear(&mut ps, format!("{p}.local.w_c"), c, c, rng)?,
                w_delta: linear(&mut ps, format!("{p}.local.w_delta"), c, c, rng)?,
                geo_w1: linear(&mut ps, format!("{p}.local.geo_w1"), 5, c, rng)?,
                geo_b1: ps.add(format!("{p}.local.geo_b1"), Tensor::zeros(vec![c]))?,
                geo_w2: linear(&mut ps, format!("{p}.local.geo_w2"), c, c, rng)?,
                geo_b2: ps.add(format!("{p}.local.geo_b2"), Tensor::zeros(vec![c]))?,
                w_s: linear(&mut ps, format!("{p}.local.w_s"), c, 1, rng)?,
                out_w: linear(&mut ps, format!("{p}.local.out_w"), 2 * c, c, rng)?,
                out_b: ps.add(format!("{p}.local.out_b"), Tensor::zeros(vec![c]))?,
                gamma_loc: ps.add(format!("{p}.gamma_loc"), Tensor::full(vec![c], gamma))?,
                ln3_g: ps.add(format!("{p}.ln3.g"), Tensor::full(vec![c], F::one()))?,
                ln3_b: ps.add(format!("{p}.ln3.b"), Tensor::zeros(vec![c]))?,
                mlp_w1: linear(&mut ps, format!("{p}.mlp.w1"), c, mh, rng)?,
                mlp_b1: ps.add(format!("{p}.mlp.b1"), Tensor::zeros(vec![mh]))?,
                mlp_w2: linear(&mut ps, format!("{p}.mlp.w2"), mh, c, rng)?,
                mlp_b2: ps.add(format!("{p}.mlp.b2"), Tensor::zeros(vec![c]))?,
                gamma_mlp: ps.add(format!("{p}.gamma_mlp"), Tensor::full(vec![c], gamma))?,
            });
        }
        let final_ln_g = ps.add("final_ln.g", Tensor::full(vec![c], F::one()))?;
        let final_ln_b = ps.add("final_ln.b", Tensor::zeros(vec![c]))?;
        let w_u = ps.add("readout.w_u", Tensor::zeros(vec![c, 1]))?;
        let b_u = ps.add("readout.b_u", Tensor::zeros(vec![1]))?;
        let w_q_out = ps.add("readout.w_q", Tensor::zeros(vec![c, 2]))?;
        let b_q_out = ps.add("readout.b_q", Tensor::zeros(vec![2]))?;
        Ok(PcModelState {
            cfg,
            params: ps,
            chart,
            lift_w1,
            lift_b1,
            lift_w2,
            lift_b2,
            cb_w1,
            cb_b1,
            cb_w2,
            cb_b2,
            blocks,
            final_ln_g,
            final_ln_b,
            w_u,
            b_u,
            w_q_out,
            b_q_out,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.total_values()
    }

    fn norm_affine(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        x: VarId,
        g: ParamId,
        b: ParamId,
    ) -> Result<VarId> {
        let n = tape.layer_norm_last(x)?;
        let s = tape.channel_scale(n, binding.var(g))?;
        tape.add_bias(s, binding.var(b))
    }

    /// Dense multi-head attention over all points with the additive
    /// chart-distance bias `-beta_m * ||zeta_i - zeta_j||^2` per head.
    fn global_attention(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        block: &PcBlock,
        hbar: VarId,
        zeta: VarId,
    ) -> Result<VarId> {
        let n = tape.shape(hbar)[0];
        let c = tape.shape(hbar)[1];
        let heads = self.cfg.heads;
        let dh = c / heads;
        let prev = tape.set_class(FlopClass::Attention);
        let result = (|| {
            let q = tape.matmul(hbar, binding.var(block.w_q))?;
            let k = tape.matmul(hbar, binding.var(block.w_k))?;
            let v = tape.matmul(hbar, binding.var(block.w_v))?;

            // Negated squared chart distances, built once per block.
            let zz = {
                let z3 = tape.reshape(zeta, vec![1, n, 2])?;
                let g = tape.bmm_nt(z3, z3)?;
                tape.reshape(g, vec![n, n])?
            };
            let sq = {
                let s = tape.square(zeta)?;
                let xi2 = tape.narrow(s, 1, 0, 1)?;
                let eta2 = tape.narrow(s, 1, 1, 1)?;
                let sum = tape.add(xi2, eta2)?;
                tape.reshape(sum, vec![n])?
            };
            let minus2g = tape.scale(zz, F::c(-2.0))?;
            let plus_rows = tape.add_col(minus2g, sq)?;
            let d2 = tape.add_bias(plus_rows, sq)?;
            let neg_d2 = tape.scale(d2, -F::one())?;

            let inv_sqrt = F::c(1.0 / (dh as f64).sqrt());
            let mut head_outs = Vec::with_capacity(heads);
            for m in 0..heads {
                let qm = tape.narrow(q, 1, m * dh, dh)?;
                let km = tape.narrow(k, 1, m * dh, dh)?;
                let vm = tape.narrow(v, 1, m * dh, dh)?;
                let qm = tape.scale(qm, inv_sqrt)?;
                let qb = tape.reshape(qm, vec![1, n, dh])?;
                let kb = tape.reshape(km, vec![1, n, dh])?;
                let scores = tape.bmm_nt(qb, kb)?;
                let scores = tape.reshape(scores, vec![n, n])?;
                let beta_m = tape.narrow(binding.var(block.beta), 0, m, 1)?;
                let bias = tape.mul_scalar_var(neg_d2, beta_m)?;
                let scores = tape.add(scores, bias)?;
                let att = tape.softmax_last(scores)?;
                head_outs.push(tape.matmul(att, vm)?);
            }
            let merged = tape.concat(&head_outs, 1)?;
            tape.matmul(merged, binding.var(block.w_o))
        })();
        tape.set_class(prev);
        result
    }

    /// KNN message passing: soft-attention plus max aggregation of edge
    /// messages, projected back to the embed dim.
    fn local_messages(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        block: &PcBlock,
        hbar: VarId,
        zeta: VarId,
        graph: &KnnGraph<F>,
    ) -> Result<VarId> {
        let n = tape.shape(hbar)[0];
        let c = tape.shape(hbar)[1];
        let k = graph.k;
        let prev = tape.set_class(FlopClass::Local);
        let result = (|| {
            let self_rep: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(k)).collect();
            let center = tape.matmul(hbar, binding.var(block.w_c))?;
            let center_e = tape.index_select(center, 0, self_rep.clone())?;
            let h_nbr = tape.index_select(hbar, 0, graph.neighbors.clone())?;
            let h_self = tape.index_select(hbar, 0, self_rep.clone())?;
            let diff = tape.sub(h_nbr, h_self)?;
            let diff_p = tape.matmul(diff, binding.var(block.w_delta))?;

            let z_nbr = tape.index_select(zeta, 0, graph.neighbors.clone())?;
            let z_self = tape.index_select(zeta, 0, self_rep)?;
            let z_diff = tape.sub(z_nbr, z_self)?;
            let geo_static = tape.constant(graph.edge_static.clone())?;
            let g = tape.concat(&[geo_static, z_diff], 1)?;
            let g1 = tape.matmul(g, binding.var(block.geo_w1))?;
            let g1 = tape.add_bias(g1, binding.var(block.geo_b1))?;
            let g1 = tape.gelu(g1)?;
            let g2 = tape.matmul(g1, binding.var(block.geo_w2))?;
            let geo = tape.add_bias(g2, binding.var(block.geo_b2))?;

            let pre = tape.add(center_e, diff_p)?;
            let pre = tape.add(pre, geo)?;
            let msg = tape.gelu(pre)?; // [N*K, C]

            let scores = tape.matmul(msg, binding.var(block.w_s))?;
            let scores = tape.reshape(scores, vec![n, k])?;
            let scores = tape.scale(scores, F::c(1.0 / (c as f64).sqrt()))?;
            let alpha = tape.softmax_last(scores)?;
            let alpha3 = tape.reshape(alpha, vec![n, 1, k])?;
            let msg3 = tape.reshape(msg, vec![n, k, c])?;
            let pooled = tape.bmm(alpha3, msg3)?;
            let pooled = tape.reshape(pooled, vec![n, c])?;
            let msg_t = tape.permute(msg3, &[0, 2, 1])?;
            let maxed = tape.max_last(msg_t)?; // [N, C]
            let cat = tape.concat(&[pooled, maxed], 1)?;
            let out = tape.matmul(cat, binding.var(block.out_w))?;
            tape.add_bias(out, binding.var(block.out_b))
        })();
        tape.set_class(prev);
        result
    }

    /// One gated block: attention, local messages, MLP, each as
    /// `h + gamma .* f(LN(h))`.
    pub fn block_forward(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        block: &PcBlock,
        h: VarId,
        zeta: VarId,
        graph: &KnnGraph<F>,
    ) -> Result<VarId> {
        let n1 = self.norm_affine(tape, binding, h, block.ln1_g, block.ln1_b)?;
        let att = self.global_attention(tape, binding, block, n1, zeta)?;
        let att = tape.channel_scale(att, binding.var(block.gamma_attn))?;
        let u1 = tape.add(h, att)?;

        let n2 = self.norm_affine(tape, binding, u1, block.ln2_g, block.ln2_b)?;
        let loc = self.local_messages(tape, binding, block, n2, zeta, graph)?;
        let loc = tape.channel_scale(loc, binding.var(block.gamma_loc))?;
        let u2 = tape.add(u1, loc)?;

        let n3 = self.norm_affine(tape, binding, u2, block.ln3_g, block.ln3_b)?;
        let prev = tape.set_class(FlopClass::Mlp);
        let mlp = (|| {
            let a = tape.matmul(n3, binding.var(block.mlp_w1))?;
            let a = tape.add_bias(a, binding.var(block.mlp_b1))?;
            let a = tape.gelu(a)?;
            let b = tape.matmul(a, binding.var(block.mlp_w2))?;
            tape.add_bias(b, binding.var(block.mlp_b2))
        })();
        tape.set_class(prev);
        let mlp = tape.channel_scale(mlp?, binding.var(block.gamma_mlp))?;
        tape.add(u2, mlp)
    }

    /// Forward pass on a taped, already canonically ordered cloud.
    fn forward_canonical(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        coords_norm: VarId,
        feats: VarId,
        graph: &KnnGraph<F>,
    ) -> Result<(VarId, VarId)> {
        let zeta = self.chart.forward_tape(tape, binding, coords_norm)?;
        let prev = tape.set_class(FlopClass::Lift);
        let mut h = (|| {
            let zin = if self.cfg.feat_dim > 0 {
                tape.concat(&[coords_norm, feats, zeta], 1)?
            } else {
                tape.concat(&[coords_norm, zeta], 1)?
            };
            let a = tape.matmul(zin, binding.var(self.lift_w1))?;
            let a = tape.add_bias(a, binding.var(self.lift_b1))?;
            let a = tape.silu(a)?;
            let b = tape.matmul(a, binding.var(self.lift_w2))?;
            let lift = tape.add_bias(b, binding.var(self.lift_b2))?;
            let c1 = tape.matmul(zeta, binding.var(self.cb_w1))?;
            let c1 = tape.add_bias(c1, binding.var(self.cb_b1))?;
            let c1 = tape.silu(c1)?;
            let c2 = tape.matmul(c1, binding.var(self.cb_w2))?;
            let cb = tape.add_bias(c2, binding.var(self.cb_b2))?;
            tape.add(lift, cb)
        })();
        tape.set_class(prev);
        for block in &self.blocks {
            h = Ok(self.block_forward(tape, binding, block, h?, zeta, graph)?);
        }
        let h = self.norm_affine(tape, binding, h?, self.final_ln_g, self.final_ln_b)?;
        let prev = tape.set_class(FlopClass::Readout);
        let u = tape.matmul(h, binding.var(self.w_u))?;
        let u = tape.add_bias(u, binding.var(self.b_u))?;
        let q = tape.matmul(h, binding.var(self.w_q_out))?;
        let q = tape.add_bias(q, binding.var(self.b_q_out))?;
        tape.set_class(prev);
        Ok((u, q))
    }

    /// Full forward: canonicalize, build the KNN graph in physical space,
    /// run the network, scatter predictions back to input order.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        pc: &PointCloud<F>,
    ) -> Result<(VarId, Option<VarId>)> {
        let n = pc.len();
        if n < self.cfg.k_neighbors + 1 {
            return Err(Error::Config(format!(
                "need at least K+1 = {} points, got {n}",
                self.cfg.k_neighbors + 1
            )));
        }
        if pc.feat_dim() != self.cfg.feat_dim {
            return Err(Error::Shape {
                op: "pc_forward",
                detail: format!("feature dim {} vs configured {}", pc.feat_dim(), self.cfg.feat_dim),
            });
        }
        let order = canonical_order(&pc.coords);
        let canon = pc.gather(&order);
        let graph = build_knn(&canon, self.cfg.k_neighbors)?;
        let coords_norm = isotropic_normalize(&canon.coords);
        let cv = tape.constant(coords_norm)?;
        let fv = tape.constant(canon.feats.clone())?;
        let (u_c, q_c) = self.forward_canonical(tape, binding, cv, fv, &graph)?;
        // order[rank] = original index; output row `rank` belongs to it.
        let mut rank_of = vec![0usize; n];
        for (rank, &orig) in order.iter().enumerate() {
            rank_of[orig] = rank;
        }
        let u = tape.index_select(u_c, 0, rank_of.clone())?;
        let q = tape.index_select(q_c, 0, rank_of)?;
        Ok((u, if self.cfg.flux_head { Some(q) } else { None }))
    }

    /// Inference convenience.
    pub fn predict(&self, pc: &PointCloud<F>) -> Result<(Tensor<F>, Option<Tensor<F>>)> {
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape)?;
        let (u, q) = self.forward(&mut tape, &binding, pc)?;
        Ok((tape.value(u).clone(), q.map(|q| tape.value(q).clone())))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::checkpoint::save_params(path, self.params.all())
    }

    pub fn load(cfg: PcConfig, path: &std::path::Path) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
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

/// Center and scale coordinates isotropically into `[-1, 1]^2` (preserves
/// nearest-neighbor order).
pub fn isotropic_normalize<F: Scalar>(coords: &Tensor<F>) -> Tensor<F> {
    let xs: Vec<f64> = coords.data.iter().step_by(2).map(|v| v.to_f64_c()).collect();
    let ys: Vec<f64> = coords.data.iter().skip(1).step_by(2).map(|v| v.to_f64_c()).collect();
    let min_max = |v: &[f64]| {
        v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &x| (a.0.min(x), a.1.max(x)))
    };
    let (x0, x1) = min_max(&xs);
    let (y0, y1) = min_max(&ys);
    let cx = 0.5 * (x0 + x1);
    let cy = 0.5 * (y0 + y1);
    let half = (0.5 * (x1 - x0)).max(0.5 * (y1 - y0)).max(1e-300);
    let data = coords
        .data
        .chunks(2)
        .flat_map(|p| {
            [F::c((p[0].to_f64_c() - cx) / half), F::c((p[1].to_f64_c() - cy) / half)]
        })
        .collect();
    Tensor { shape: coords.shape.clone(), data, grad: None }
}

// ---------------------------------------------------------------------------
// Point-cloud training (value loss only)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct PcSample<F: Scalar> {
    pub cloud: PointCloud<F>,
    /// `[N, 1]`.
    pub target: Tensor<F>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PcTrainStats {
    pub steps: usize,
    pub final_train_loss: f64,
    pub final_test_rel_l2: f64,
}

/// Train with the relative-L2 value loss (the derivative terms are not
/// defined on unordered clouds).
pub fn train_pc_model<F: Scalar>(
    model: &mut PcModelState<F>,
    train: &[PcSample<F>],
    test: &[PcSample<F>],
    epochs: usize,
    batch: usize,
    max_lr: f64,
    seed: u64,
) -> Result<PcTrainStats> {
    use rayon::prelude::*;
    if train.is_empty() {
        return Err(Error::Dataset("empty training split".into()));
    }
    let batch = batch.max(1);
    let steps_per_epoch = train.len().div_ceil(batch);
    let schedule =
        OneCycle { max_lr, total_steps: (epochs * steps_per_epoch).max(1), warmup_frac: 0.3 };
    let mut opt = OptimizerState::new(model.params.all(), schedule, 1e-4);
    let mut step = 0;
    let mut last = f64::NAN;
    for epoch in 0..epochs {
        let order = {
            let mut rng = rng_substream(seed, "pc-shuffle", epoch as u64);
            crate::rng::shuffled_indices(&mut rng, train.len())
        };
        for chunk in order.chunks(batch) {
            let results: Vec<Result<(f64, Vec<Option<Vec<F>>>)>> = chunk
                .par_iter()
                .map(|&i| {
                    let s = &train[i];
                    let mut tape = Tape::new();
                    tape.check_finite = false;
                    let binding = model.params.bind(&mut tape)?;
                    let (u, _) = model.forward(&mut tape, &binding, &s.cloud)?;
                    let loss = loss_val_tape(&mut tape, u, &s.target, 1e-8)?;
                    let value = tape.value(loss).item().to_f64_c();
                    if !value.is_finite() {
                        return Err(Error::Numeric("non-finite point-cloud loss".into()));
                    }
                    let grads = tape.backward(loss)?;
                    let by_param =
                        binding.vars().iter().map(|v| grads.get(*v).map(|s| s.to_vec())).collect();
                    Ok((value, by_param))
                })
                .collect();
            model.params.zero_grads();
            let scale = F::c(1.0 / chunk.len() as f64);
            let mut mean = 0.0;
            for r in results {
                let (value, by_param) = r?;
                mean += value / chunk.len() as f64;
                for (p, g) in model.params.all_mut().iter_mut().zip(&by_param) {
                    p.tensor.alloc_grad();
                    if let Some(g) = g {
                        let buf = p.tensor.grad.as_mut().unwrap();
                        for (a, b) in buf.iter_mut().zip(g) {
                            *a += *b * scale;
                        }
                    }
                }
            }
            opt.adamw_step(model.params.all_mut())?;
            last = mean;
            step += 1;
        }
    }
    let test_err = eval_pc_model(model, test)?;
    Ok(PcTrainStats { steps: step, final_train_loss: last, final_test_rel_l2: test_err })
}

/// Mean relative L2 error over point-cloud samples.
pub fn eval_pc_model<F: Scalar>(model: &PcModelState<F>, samples: &[PcSample<F>]) -> Result<f64> {
    let mut acc = 0.0;
    for s in samples {
        let (u, _) = model.predict(&s.cloud)?;
        acc += crate::loss::rel_l2(&u.data, &s.target.data).to_f64_c();
    }
    Ok(acc / samples.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn random_cloud(n: usize, d_f: usize, seed: u64) -> PointCloud<f64> {
        let mut rng = rng_from_seed(seed);
        let coords = Tensor::new(vec![n, 2], crate::rng::uniform_vec(&mut rng, 2 * n, 0.0, 1.0)).unwrap();
        let feats = Tensor::new(vec![n, d_f], normal_vec(&mut rng, n * d_f)).unwrap();
        PointCloud::new(coords, feats).unwrap()
    }

    #[test]
    fn knn_rejects_k_not_less_than_n() {
        let pc = random_cloud(5, 1, 0);
        assert!(build_knn(&pc, 5).is_err());
        assert!(build_knn(&pc, 4).is_ok());
    }

    #[test]
    fn collinear_tie_breaks_to_lower_index() {
        // Three equally spaced points on a line; the middle one is
        // equidistant from both ends.
        let coords = Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.0]).unwrap();
        let feats = Tensor::zeros(vec![3, 0]);
        let pc = PointCloud::new(coords, feats).unwrap();
        let g = build_knn(&pc, 1).unwrap();
        assert_eq!(g.neighbors[1], 0);
    }

    #[test]
    fn unit_square_corners_have_edge_adjacent_neighbors() {
        let coords =
            Tensor::new(vec![4, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let feats = Tensor::zeros(vec![4, 0]);
        let pc = PointCloud::new(coords, feats).unwrap();
        let g = build_knn(&pc, 2).unwrap();
        // Corner 0 at (0,0): neighbors 1 (1,0) and 2 (0,1), not 3.
        let n0: Vec<usize> = g.neighbors[0..2].to_vec();
        assert!(n0.contains(&1) && n0.contains(&2));
        // Corner 3 at (1,1): neighbors 1 and 2.
        let n3: Vec<usize> = g.neighbors[6..8].to_vec();
        assert!(n3.contains(&1) && n3.contains(&2));
    }

    #[test]
    fn knn_matches_brute_force_sort() {
        let pc = random_cloud(50, 1, 3);
        let g = build_knn(&pc, 8).unwrap();
        for i in 0..50 {
            let (xi, yi) = pc.point(i);
            let mut all: Vec<(f64, usize)> = (0..50)
                .filter(|&j| j != i)
                .map(|j| {
                    let (xj, yj) = pc.point(j);
                    ((xj - xi).powi(2) + (yj - yi).powi(2), j)
                })
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let expect: Vec<usize> = all[..8].iter().map(|p| p.1).collect();
            assert_eq!(&g.neighbors[i * 8..(i + 1) * 8], &expect[..]);
        }
    }

    #[test]
    fn minimal_cloud_runs() {
        let cfg = PcConfig {
            layers: 1,
            embed_dim: 8,
            heads: 2,
            k_neighbors: 4,
            chart_hidden: 8,
            feat_dim: 1,
            ..PcConfig::default()
        };
        let model = PcModelState::<f64>::new(cfg, 0).unwrap();
        let pc = random_cloud(5, 1, 9); // N = K + 1
        let (u, q) = model.predict(&pc).unwrap();
        assert_eq!(u.shape, vec![5, 1]);
        assert_eq!(q.unwrap().shape, vec![5, 2]);
        let too_small = random_cloud(4, 1, 9);
        assert!(model.predict(&too_small).is_err());
    }

    #[test]
    fn zero_gates_make_blocks_identity() {
        let cfg = PcConfig {
            layers: 2,
            embed_dim: 8,
            heads: 2,
            k_neighbors: 3,
            chart_hidden: 8,
            feat_dim: 1,
            gamma_init: 0.0,
            ..PcConfig::default()
        };
        let model = PcModelState::<f64>::new(cfg, 1).unwrap();
        let pc = random_cloud(12, 1, 4);

        // With all gates zero the blocks are identity, so the prediction
        // equals readout(LN(lift)).
        let mut tape = Tape::new();
        let binding = model.params.bind(&mut tape).unwrap();
        let order = canonical_order(&pc.coords);
        let canon = pc.gather(&order);
        let coords_norm = isotropic_normalize(&canon.coords);
        let cv = tape.constant(coords_norm).unwrap();
        let fv = tape.constant(canon.feats.clone()).unwrap();
        let zeta = model.chart.forward_tape(&mut tape, &binding, cv).unwrap();
        let zin = tape.concat(&[cv, fv, zeta], 1).unwrap();
        let a = tape.matmul(zin, binding.var(model.lift_w1)).unwrap();
        let a = tape.add_bias(a, binding.var(model.lift_b1)).unwrap();
        let a = tape.silu(a).unwrap();
        let b = tape.matmul(a, binding.var(model.lift_w2)).unwrap();
        let lift = tape.add_bias(b, binding.var(model.lift_b2)).unwrap();
        let c1 = tape.matmul(zeta, binding.var(model.cb_w1)).unwrap();
        let c1 = tape.add_bias(c1, binding.var(model.cb_b1)).unwrap();
        let c1 = tape.silu(c1).unwrap();
        let c2 = tape.matmul(c1, binding.var(model.cb_w2)).unwrap();
        let cb = tape.add_bias(c2, binding.var(model.cb_b2)).unwrap();
        let h0 = tape.add(lift, cb).unwrap();
        let hn = tape.layer_norm_last(h0).unwrap();
        let hn = tape.channel_scale(hn, binding.var(model.final_ln_g)).unwrap();
        let hn = tape.add_bias(hn, binding.var(model.final_ln_b)).unwrap();
        let u = tape.matmul(hn, binding.var(model.w_u)).unwrap();
        let u = tape.add_bias(u, binding.var(model.b_u)).unwrap();
        // Scatter back.
        let mut rank_of = vec![0usize; pc.len()];
        for (rank, &orig) in order.iter().enumerate() {
            rank_of[orig] = rank;
        }
        let u = tape.index_select(u, 0, rank_of).unwrap();
        let expect = tape.value(u).data.clone();

        let (got, _) = model.predict(&pc).unwrap();
        assert_eq!(got.data, expect);
    }

    #[test]
    fn local_branch_is_local() {
        // Perturbing a point outside N_K(i) and not i itself leaves node i's
        // local-branch output unchanged.
        let cfg = PcConfig {
            layers: 1,
            embed_dim: 8,
            heads: 2,
            k_neighbors: 3,
            chart_hidden: 8,
            feat_dim: 1,
            ..PcConfig::default()
        };
        let model = PcModelState::<f64>::new(cfg, 5).unwrap();
        let pc = random_cloud(16, 1, 6);
        let order = canonical_order(&pc.coords);
        let canon = pc.gather(&order);
        let graph = build_knn(&canon, 3).unwrap();

        let run_local = |feats: &Tensor<f64>| -> Vec<f64> {
            let mut tape = Tape::new();
            let binding = model.params.bind(&mut tape).unwrap();
            let h = tape.constant(feats.clone()).unwrap();
            // Use the features directly as an [N, C] state with C = 8 by
            // tiling columns.
            let mut wide = Vec::new();
            for row in tape.value(h).data.chunks(1) {
                for _ in 0..8 {
                    wide.push(row[0]);
                }
            }
            let hb = tape.constant(Tensor::new(vec![16, 8], wide).unwrap()).unwrap();
            let mut zd = Vec::new();
            for p in canon.coords.data.chunks(2) {
                zd.push(p[0]);
                zd.push(p[1]);
            }
            let zeta = tape.constant(Tensor::new(vec![16, 2], zd).unwrap()).unwrap();
            let out = model
                .local_messages(&mut tape, &binding, &model.blocks[0], hb, zeta, &graph)
                .unwrap();
            tape.value(out).data.clone()
        };

        let base = run_local(&canon.feats);
        // Find a node j that is not node 0 and not one of its neighbors.
        let nbrs = &graph.neighbors[0..3];
        let far = (1..16).find(|j| !nbrs.contains(j)).unwrap();
        let mut perturbed = canon.feats.clone();
        perturbed.data[far] += 10.0;
        let moved = run_local(&perturbed);
        for c in 0..8 {
            assert_eq!(base[c], moved[c], "node 0 must not see node {far}");
        }
        // A genuine neighbor does change it.
        let mut perturbed2 = canon.feats.clone();
        perturbed2.data[nbrs[0]] += 10.0;
        let moved2 = run_local(&perturbed2);
        assert!(base.iter().zip(&moved2).take(8).any(|(a, b)| a != b));
    }

    #[test]
    fn permutation_equivariance_is_bitwise() {
        let cfg = PcConfig {
            layers: 2,
            embed_dim: 8,
            heads: 2,
            k_neighbors: 4,
            chart_hidden: 8,
            feat_dim: 1,
            ..PcConfig::default()
        };
        let model = PcModelState::<f64>::new(cfg, 2).unwrap();
        let pc = random_cloud(24, 1, 7);
        let (u, _) = model.predict(&pc).unwrap();
        let mut rng = rng_from_seed(8);
        for _ in 0..5 {
            let perm = crate::rng::shuffled_indices(&mut rng, pc.len());
            let permuted = pc.gather(&perm);
            let (u2, _) = model.predict(&permuted).unwrap();
            for (rank, &orig) in perm.iter().enumerate() {
                assert_eq!(u2.data[rank], u.data[orig]);
            }
        }
    }
}
