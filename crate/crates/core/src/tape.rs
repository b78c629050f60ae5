//! Tape-based reverse-mode differentiation over a fixed primitive catalogue.
//!
//! Every forward primitive records one node; `backward` replays the tape in
//! reverse and accumulates gradients into per-variable buffers. The catalogue
//! is intentionally closed: it is the smallest set of operations that covers
//! the lift, the chart, axial attention with continuous rotary encoding, the
//! local stencil, the point-cloud blocks and the physics loss.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a tape variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(pub usize);

/// Coarse category a primitive's work is attributed to, for the analytic
/// operation counter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlopClass {
    Chart,
    Lift,
    /// Sequence-length-dependent attention work: rotations, scores,
    /// softmax, weighted sums.
    Attention,
    /// Per-token attention projections (query/key/value/output maps).
    AttentionProj,
    Local,
    Mlp,
    Readout,
    Loss,
    Other,
}

const FLOP_CLASSES: usize = 9;

fn class_index(c: FlopClass) -> usize {
    match c {
        FlopClass::Chart => 0,
        FlopClass::Lift => 1,
        FlopClass::Attention => 2,
        FlopClass::AttentionProj => 3,
        FlopClass::Local => 4,
        FlopClass::Mlp => 5,
        FlopClass::Readout => 6,
        FlopClass::Loss => 7,
        FlopClass::Other => 8,
    }
}

/// Multiply-add counts of the forward pass, by category.
#[derive(Clone, Debug, Default)]
pub struct FlopCounter {
    by_class: [u64; FLOP_CLASSES],
}

impl FlopCounter {
    pub fn add(&mut self, class: FlopClass, flops: u64) {
        self.by_class[class_index(class)] += flops;
    }

    pub fn class(&self, class: FlopClass) -> u64 {
        self.by_class[class_index(class)]
    }

    pub fn total(&self) -> u64 {
        self.by_class.iter().sum()
    }
}

enum Node<F: Scalar> {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: F },
    MulScalarVar { x: usize, s: usize },
    MulMask { x: usize, mask: Vec<F> },
    AddBias { x: usize, b: usize },
    AddCol { x: usize, v: usize },
    ChannelScale { x: usize, s: usize },
    Tanh { x: usize },
    Silu { x: usize, sig: Vec<F> },
    Gelu { x: usize, inner: Vec<F> },
    Square { x: usize },
    Sqrt { x: usize },
    Sin { x: usize },
    Cos { x: usize },
    SoftmaxLast { x: usize },
    LayerNormLast { x: usize, rstd: Vec<F> },
    RopeRotate { x: usize, cos: usize, sin: usize },
    Reshape { x: usize },
    Permute { x: usize, perm: Vec<usize> },
    Narrow { x: usize, axis: usize, start: usize },
    IndexSelect { x: usize, axis: usize, indices: Vec<usize> },
    Concat { xs: Vec<usize>, axis: usize },
    SumAll { x: usize },
    MeanAll { x: usize },
    MaxLast { x: usize, argmax: Vec<usize> },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Bmm { a: usize, b: usize, bsz: usize, m: usize, k: usize, n: usize },
    BmmNt { a: usize, b: usize, bsz: usize, m: usize, k: usize, n: usize },
    DepthwiseConv { x: usize, kern: usize, bias: usize, h: usize, w: usize, c: usize, kh: usize, kw: usize },
    Shift2d { x: usize, di: isize, dj: isize, h: usize, w: usize },
}

/// Gradients produced by a completed backward pass, indexed by variable.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient buffer of a variable; `None` means the variable does not
    /// influence the loss (its gradient is identically zero).
    pub fn get(&self, id: VarId) -> Option<&[F]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

/// Cumulative per-op timing, enabled by [`Tape::enable_profile`].
#[derive(Default)]
pub struct TapeProfile {
    last: Option<std::time::Instant>,
    pub per_op: std::collections::HashMap<&'static str, (u64, std::time::Duration)>,
}

impl TapeProfile {
    pub fn dump(&self) -> Vec<(&'static str, u64, f64)> {
        let mut rows: Vec<_> = self
            .per_op
            .iter()
            .map(|(k, (n, d))| (*k, *n, d.as_secs_f64() * 1e3))
            .collect();
        rows.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
        rows
    }
}

/// Recording tape.
pub struct Tape<F: Scalar> {
    vals: Vec<Tensor<F>>,
    nodes: Vec<Node<F>>,
    needs_grad: Vec<bool>,
    /// When set, every primitive output is scanned for NaN/Inf.
    pub check_finite: bool,
    flops: FlopCounter,
    class: FlopClass,
    pub profile: Option<Box<TapeProfile>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            nodes: Vec::new(),
            needs_grad: Vec::new(),
            check_finite: true,
            flops: FlopCounter::default(),
            class: FlopClass::Other,
            profile: None,
        }
    }

    pub fn enable_profile(&mut self) {
        self.profile = Some(Box::default());
    }

    /// Set the flop attribution class; returns the previous one.
    pub fn set_class(&mut self, class: FlopClass) -> FlopClass {
        std::mem::replace(&mut self.class, class)
    }

    pub fn flops(&self) -> &FlopCounter {
        &self.flops
    }

    pub fn value(&self, id: VarId) -> &Tensor<F> {
        &self.vals[id.0]
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.vals[id.0].shape
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    fn push(&mut self, node: Node<F>, out: Tensor<F>, needs: bool, op: &'static str) -> Result<VarId> {
        if let Some(prof) = self.profile.as_mut() {
            let now = std::time::Instant::now();
            if let Some(last) = prof.last {
                let e = prof.per_op.entry(op).or_default();
                e.0 += 1;
                e.1 += now - last;
            }
            prof.last = Some(now);
        }
        if self.check_finite {
            out.ensure_finite(op)?;
        }
        self.vals.push(out);
        self.nodes.push(node);
        self.needs_grad.push(needs);
        Ok(VarId(self.vals.len() - 1))
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.needs_grad[i])
    }

    /// Leaf variable that participates in differentiation.
    pub fn leaf(&mut self, t: Tensor<F>) -> Result<VarId> {
        self.push(Node::Leaf, t, true, "leaf")
    }

    /// Leaf variable excluded from differentiation (data, masks, geometry).
    pub fn constant(&mut self, t: Tensor<F>) -> Result<VarId> {
        self.push(Node::Leaf, t, false, "constant")
    }

    fn binary_same_shape(&self, op: &'static str, a: VarId, b: VarId) -> Result<()> {
        if self.vals[a.0].shape != self.vals[b.0].shape {
            return Err(Error::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.vals[a.0].shape, self.vals[b.0].shape),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape("add", a, b)?;
        let out: Vec<F> = self.vals[a.0]
            .data
            .iter()
            .zip(&self.vals[b.0].data)
            .map(|(x, y)| *x + *y)
            .collect();
        let t = Tensor { shape: self.vals[a.0].shape.clone(), data: out, grad: None };
        self.flops.add(self.class, t.numel() as u64);
        let needs = self.needs(&[a.0, b.0]);
        self.push(Node::Add { a: a.0, b: b.0 }, t, needs, "add")
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape("sub", a, b)?;
        let out: Vec<F> = self.vals[a.0]
            .data
            .iter()
            .zip(&self.vals[b.0].data)
            .map(|(x, y)| *x - *y)
            .collect();
        let t = Tensor { shape: self.vals[a.0].shape.clone(), data: out, grad: None };
        self.flops.add(self.class, t.numel() as u64);
        let needs = self.needs(&[a.0, b.0]);
        self.push(Node::Sub { a: a.0, b: b.0 }, t, needs, "sub")
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape("mul", a, b)?;
        let out: Vec<F> = self.vals[a.0]
            .data
            .iter()
            .zip(&self.vals[b.0].data)
            .map(|(x, y)| *x * *y)
            .collect();
        let t = Tensor { shape: self.vals[a.0].shape.clone(), data: out, grad: None };
        self.flops.add(self.class, t.numel() as u64);
        let needs = self.needs(&[a.0, b.0]);
        self.push(Node::Mul { a: a.0, b: b.0 }, t, needs, "mul")
    }

    pub fn scale(&mut self, x: VarId, c: F) -> Result<VarId> {
        let out: Vec<F> = self.vals[x.0].data.iter().map(|v| *v * c).collect();
        let t = Tensor { shape: self.vals[x.0].shape.clone(), data: out, grad: None };
        self.flops.add(self.class, t.numel() as u64);
        let needs = self.needs(&[x.0]);
        self.push(Node::Scale { x: x.0, c }, t, needs, "scale")
    }

    /// Multiply every element of `x` by a one-element variable `s`.
    pub fn mul_scalar_var(&mut self, x: VarId, s: VarId) -> Result<VarId> {
        if self.vals[s.0].numel() != 1 {
            return Err(Error::Shape { op: "mul_scalar_var", detail: "scale is not a scalar".into() });
        }
        let sv = self.vals[s.0].data[0];
        let out: Vec<F> = self.vals[x.0].data.iter().map(|v| *v * sv).collect();
        let t = Tensor { shape: self.vals[x.0].shape.clone(), data: out, grad: None };
        self.flops.add(self.class, t.numel() as u64);
        let needs = self.needs(&[x.0, s.0]);
        self.push(Node::MulScalarVar { x: x.0, s: s.0 }, t, needs, "mul_scalar_var")
    }

    /// Elementwise multiply by a fixed mask (dropout support).
    pub fn mul_mask(&mut self, x: VarId, mask: Vec<F>) -> Result<VarId> {
        if mask.len() != self.vals[x.0].numel() {
            return Err(Error::Shape { op: "mul_mask", detail: "mask length".into() });
        }
        let out: Vec<F> = self.vals[x.0].data.iter().zip(&mask).map(|(v, m)| *v * *m).collect();
        let t = Tensor { shape: self.vals[x.0].shape.clone(), data: out, grad: None };
        let needs = self.needs(&[x.0]);
        self.push(Node::MulMask { x: x.0, mask }, t, needs, "mul_mask")
    }

    fn last_dim(&self, id: VarId) -> usize {
        *self.vals[id.0].shape.last().unwrap_or(&1)
    }

    /// `x[..., c] + b[c]`
    pub fn add_bias(&mut self, x: VarId, b: VarId) -> Result<VarId> {
        let c = self.last_dim(x);
        if self.vals[b.0].shape != [c] {
            return Err(Error::Shape {
                op: "add_bias",
                detail: format!("bias {:?} vs last dim {}", self.vals[b.0].shape, c),
            });
        }
        let bias = &self.vals[b.0].data;
        let src = &self.vals[x.0].data;
        let mut out = vec![F::zero(); src.len()];
        for (orow, irow) in out.chunks_mut(c).zip(src.chunks(c)) {
            for i in 0..c {
                orow[i] = irow[i] + bias[i];
            }
        }
        let t = Tensor { shape: self.vals[x.0].shape.clone(), data: out, grad: None };
        self.flops.add(self.class, t.numel() as u64);
        let needs = self.needs(&[x.0, b.0]);
        self.push(Node::AddBias { x: x.0, b: b.0 }, t, needs, "add_bias")
    }

    /// `x[r, c] + v[r]` (broadcast a column vector over the columns).
    pub fn add_col(&mut self, x: VarId, v: VarId) -> Result<VarId> {
        let shape = self.vals[x.0].shape.clone();
        if shape.len() != 2 || self.vals[v.0].shape != [shape[0]] {
            return Err(Error::Shape { op: "add_col", detail: "expected [r,c] and [r]".into() });
        }
        let (r, cdim) = (shape[0], shape[1]);
        let vv = &self.vals[v.0].data;
        let mut out = Vec::with_capacity(r * cdim);
        for i in 0..r {
            let vi = vv[i];
            out.extend(self.vals[x.0].data[i * cdim..(i + 1) * cdim].iter().map(|x| *x + vi));
        }
        let t = Tensor { shape, data: out, grad: None };
        self.flops.add(self.class, t.numel() as u64);
        let needs = self.needs(&[x.0, v.0]);
        self.push(Node::AddCol { x: x.0, v: v.0 }, t, needs, "add_col")
    }

    /// `x[..., c] * s[c]`
    pub fn channel_scale(&mut self, x: VarId, s: VarId) -> Result<VarId> {
        let c = self.last_dim(x);
        if self.vals[s.0].shape != [c] {
            return Err(Error::Shape {
                op: "channel_scale",
                detail: format!("scale {:?} vs last dim {}", self.vals[s.0].shape, c),
            });
        }
        let sv = &self.vals[s.0].data;
        let src = &self.vals[x.0].data;
        let mut out = vec![F::zero(); src.len()];
        for (orow, irow) in out.chunks_mut(c).zip(src.chunks(c)) {
            for i in 0..c {
                orow[i] = irow[i] * sv[i];
            }
        }
        let t = Tensor { shape: self.vals[x.0].shape.clone(), data: out, grad: None };
        self.flops.add(self.class, t.numel() as u64);
        let needs = self.needs(&[x.0, s.0]);
        self.push(Node::ChannelScale { x: x.0, s: s.0 }, t, needs, "channel_scale")
    }

    pub fn tanh(&mut self, x: VarId) -> Result<VarId> {
        let out: Vec<F> =
            self.vals[x.0].data.iter().map(|v| F::c(crate::fastmath::fast_tanh(v.to_f64_c()))).collect();
        let t = Tensor { shape: self.vals[x.0].shape.clone(), data: out, grad: None };
        self.flops.add(self.class, 4 * t.numel() as u64);
        let needs = self.needs(&[x.0]);
        self.push(Node::Tanh { x: x.0 }, t, needs, "tanh")
    }

    pub fn silu(&mut self, x: VarId) -> Result<VarId> {
        let xv = &self.vals[x.0].data;
        let n = xv.len();
        let mut sig = vec![F::zero(); n];
        let mut out = vec![F::zero(); n];
        for i in 0..n {
            let s = F::c(crate::fastmath::fast_sigmoid(xv[i].to_f64_c()));
            sig[i] = s;
            out[i] = xv[i] * s;
        }
        let t = Tensor { shape: self.vals[x.0].shape.clone(), data: out, grad: None };
        self.flops.add(self.class, 4 * t.numel() as u64);
        let needs = self.needs(&[x.0]);
        self.push(Node::Silu { x: x.0, sig }, t, needs, "silu")
    }

    pub fn gelu(&mut self, x: VarId) -> Result<VarId> {
        let half = F::c(0.5);
        let c0 = F::c(gelu_c0());
        let c1 = F::c(GELU_C1);
        let xv = &self.vals[x.0].data;
        let n = xv.len();
        let mut inner = vec![F::zero(); n];
        let mut out = vec![F::zero(); n];
        for i in 0..n {
            let v = xv[i];
            let u = c0 * (v + c1 * v * v * v);
            let tv = F::c(crate::fastmath::fast_tanh(u.to_f64_c()));
            inner[i] = tv;
            out[i] = half * v * (F::one() + tv);
        }
        let t = Tensor { shape: self.vals[x.0].shape.clone(), data: out, grad: None };
        self.flops.add(self.class, 6 * t.numel() as u64);
        let needs = self.needs(&[x.0]);
        self.push(Node::Gelu { x: x.0, inner }, t, needs, "gelu")
    }

    pub fn square(&mut self, x: VarId) -> Result<VarId> {
        let out: Vec<F> = self.vals[x.0].data.iter().map(|v| *v * *v).collect();
        let t = Tensor { shape: self.vals[x.0].shape.clone(), data: out, grad: None };
        self.flops.add(self.class, t.numel() as u64);
        let needs = self.needs(&[x.0]);
        self.push(Node::Square { x: x.0 }, t, needs, "square")
    }

    pub fn sqrt(&mut self, x: VarId) -> Result<VarId> {
        let out: Vec<F> = self.vals[x.0].data.iter().map(|v| v.sqrt()).collect();
        let t = Tensor { shape: self.vals[x.0].shape.clone(), data: out, grad: None };
        self.flops.add(self.class, t.numel() as u64);
        let needs = self.needs(&[x.0]);
        self.push(Node::Sqrt { x: x.0 }, t, needs, "sqrt")
    }

    pub fn sin(&mut self, x: VarId) -> Result<VarId> {
        let out: Vec<F> = self.vals[x.0].data.iter().map(|v| v.sin()).collect();
        let t = Tensor { shape: self.vals[x.0].shape.clone(), data: out, grad: None };
        self.flops.add(self.class, 4 * t.numel() as u64);
        let needs = self.needs(&[x.0]);
        self.push(Node::Sin { x: x.0 }, t, needs, "sin")
    }

    pub fn cos(&mut self, x: VarId) -> Result<VarId> {
        let out: Vec<F> = self.vals[x.0].data.iter().map(|v| v.cos()).collect();
        let t = Tensor { shape: self.vals[x.0].shape.clone(), data: out, grad: None };
        self.flops.add(self.class, 4 * t.numel() as u64);
        let needs = self.needs(&[x.0]);
        self.push(Node::Cos { x: x.0 }, t, needs, "cos")
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, x: VarId) -> Result<VarId> {
        let c = self.last_dim(x);
        if c == 0 {
            return Err(Error::Shape { op: "softmax_last", detail: "empty last axis".into() });
        }
        let src = &self.vals[x.0].data;
        let mut out = vec![F::zero(); src.len()];
        for (orow, row) in out.chunks_mut(c).zip(src.chunks(c)) {
            let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
            for i in 0..c {
                orow[i] = F::c(crate::fastmath::fast_exp((row[i] - mx).to_f64_c()));
            }
            let denom: F = orow.iter().cloned().sum();
            let inv = F::one() / denom;
            for v in orow.iter_mut() {
                *v = *v * inv;
            }
        }
        let t = Tensor { shape: self.vals[x.0].shape.clone(), data: out, grad: None };
        self.flops.add(self.class, 5 * t.numel() as u64);
        let needs = self.needs(&[x.0]);
        self.push(Node::SoftmaxLast { x: x.0 }, t, needs, "softmax_last")
    }

    /// Rotate channel pairs `(2r, 2r+1)` of `x: [n, d]` by per-row angles
    /// given as `cos, sin: [n, d/2]` (continuous rotary encoding).
    pub fn rope_rotate(&mut self, x: VarId, cos: VarId, sin: VarId) -> Result<VarId> {
        let shape = self.vals[x.0].shape.clone();
        if shape.len() != 2 || shape[1] % 2 != 0 {
            return Err(Error::Shape {
                op: "rope_rotate",
                detail: format!("expected [n, even], got {:?}", shape),
            });
        }
        let (n, d) = (shape[0], shape[1]);
        let half = d / 2;
        if self.vals[cos.0].shape != [n, half] || self.vals[sin.0].shape != [n, half] {
            return Err(Error::Shape {
                op: "rope_rotate",
                detail: format!("angles must be [{n}, {half}]"),
            });
        }
        let xv = &self.vals[x.0].data;
        let cv = &self.vals[cos.0].data;
        let sv = &self.vals[sin.0].data;
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            for p in 0..half {
                let a = xv[r * d + 2 * p];
                let b = xv[r * d + 2 * p + 1];
                let c = cv[r * half + p];
                let s = sv[r * half + p];
                out.push(a * c - b * s);
                out.push(a * s + b * c);
            }
        }
        let t = Tensor { shape, data: out, grad: None };
        self.flops.add(self.class, 4 * t.numel() as u64);
        let needs = self.needs(&[x.0, cos.0, sin.0]);
        self.push(Node::RopeRotate { x: x.0, cos: cos.0, sin: sin.0 }, t, needs, "rope_rotate")
    }

    /// Normalize the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm_last(&mut self, x: VarId) -> Result<VarId> {
        let c = self.last_dim(x);
        if c == 0 {
            return Err(Error::Shape { op: "layer_norm_last", detail: "empty last axis".into() });
        }
        let eps = F::c(1e-20);
        let cn = F::from_count(c);
        let rows = self.vals[x.0].numel() / c;
        let mut out = Vec::with_capacity(rows * c);
        let mut rstd = Vec::with_capacity(rows);
        for row in self.vals[x.0].data.chunks(c) {
            let mean = row.iter().cloned().sum::<F>() / cn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() / cn;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            out.extend(row.iter().map(|v| (*v - mean) * r));
        }
        let t = Tensor { shape: self.vals[x.0].shape.clone(), data: out, grad: None };
        self.flops.add(self.class, 4 * t.numel() as u64);
        let needs = self.needs(&[x.0]);
        self.push(Node::LayerNormLast { x: x.0, rstd }, t, needs, "layer_norm_last")
    }

    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId> {
        let n: usize = shape.iter().product();
        if n != self.vals[x.0].numel() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.vals[x.0].shape, shape),
            });
        }
        let t = Tensor { shape, data: self.vals[x.0].data.clone(), grad: None };
        let needs = self.needs(&[x.0]);
        self.push(Node::Reshape { x: x.0 }, t, needs, "reshape")
    }

    /// Materialized axis permutation (generalized transpose).
    pub fn permute(&mut self, x: VarId, perm: &[usize]) -> Result<VarId> {
        let shape = self.vals[x.0].shape.clone();
        if perm.len() != shape.len() {
            return Err(Error::Shape { op: "permute", detail: "rank mismatch".into() });
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::Shape { op: "permute", detail: "invalid permutation".into() });
            }
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(&self.vals[x.0].data, &shape, perm);
        let t = Tensor { shape: out_shape, data, grad: None };
        let needs = self.needs(&[x.0]);
        self.push(Node::Permute { x: x.0, perm: perm.to_vec() }, t, needs, "permute")
    }

    /// Contiguous slice along one axis.
    pub fn narrow(&mut self, x: VarId, axis: usize, start: usize, len: usize) -> Result<VarId> {
        let shape = self.vals[x.0].shape.clone();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape {
                op: "narrow",
                detail: format!("axis {axis} [{start}, {start}+{len}) of {:?}", shape),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        let src = &self.vals[x.0].data;
        for o in 0..outer {
            let base = o * shape[axis] * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor { shape: out_shape, data: out, grad: None };
        let needs = self.needs(&[x.0]);
        self.push(Node::Narrow { x: x.0, axis, start }, t, needs, "narrow")
    }

    /// Gather slices along `axis` by (possibly repeated) indices.
    pub fn index_select(&mut self, x: VarId, axis: usize, indices: Vec<usize>) -> Result<VarId> {
        let shape = self.vals[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::Shape { op: "index_select", detail: "axis out of range".into() });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            return Err(Error::Shape {
                op: "index_select",
                detail: format!("index {bad} out of range {}", shape[axis]),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.vals[x.0].data;
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner;
            for &i in &indices {
                out.extend_from_slice(&src[base + i * inner..base + (i + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let t = Tensor { shape: out_shape, data: out, grad: None };
        let needs = self.needs(&[x.0]);
        self.push(Node::IndexSelect { x: x.0, axis, indices }, t, needs, "index_select")
    }

    pub fn concat(&mut self, xs: &[VarId], axis: usize) -> Result<VarId> {
        if xs.is_empty() {
            return Err(Error::Shape { op: "concat", detail: "no inputs".into() });
        }
        let first = self.vals[xs[0].0].shape.clone();
        if axis >= first.len() {
            return Err(Error::Shape { op: "concat", detail: "axis out of range".into() });
        }
        let mut axis_total = 0;
        for id in xs {
            let s = &self.vals[id.0].shape;
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::Shape {
                    op: "concat",
                    detail: format!("{:?} vs {:?} on axis {axis}", s, first),
                });
            }
            axis_total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for id in xs {
                let d = self.vals[id.0].shape[axis];
                let src = &self.vals[id.0].data;
                out.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = axis_total;
        let t = Tensor { shape: out_shape, data: out, grad: None };
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let needs = self.needs(&ids);
        self.push(Node::Concat { xs: ids, axis }, t, needs, "concat")
    }

    pub fn sum_all(&mut self, x: VarId) -> Result<VarId> {
        let s: F = self.vals[x.0].data.iter().cloned().sum();
        let t = Tensor::scalar(s);
        self.flops.add(self.class, self.vals[x.0].numel() as u64);
        let needs = self.needs(&[x.0]);
        self.push(Node::SumAll { x: x.0 }, t, needs, "sum_all")
    }

    pub fn mean_all(&mut self, x: VarId) -> Result<VarId> {
        let n = self.vals[x.0].numel();
        let s: F = self.vals[x.0].data.iter().cloned().sum::<F>() / F::from_count(n);
        let t = Tensor::scalar(s);
        self.flops.add(self.class, n as u64);
        let needs = self.needs(&[x.0]);
        self.push(Node::MeanAll { x: x.0 }, t, needs, "mean_all")
    }

    /// Max over the last axis; ties resolve to the first occurrence.
    pub fn max_last(&mut self, x: VarId) -> Result<VarId> {
        let c = self.last_dim(x);
        if c == 0 {
            return Err(Error::Shape { op: "max_last", detail: "empty last axis".into() });
        }
        let rows = self.vals[x.0].numel() / c;
        let mut out = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        for row in self.vals[x.0].data.chunks(c) {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            argmax.push(best);
            out.push(row[best]);
        }
        let mut shape = self.vals[x.0].shape.clone();
        shape.pop();
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor { shape, data: out, grad: None };
        let needs = self.needs(&[x.0]);
        self.push(Node::MaxLast { x: x.0, argmax }, t, needs, "max_last")
    }

    /// `a[m,k] @ b[k,n]`
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (&self.vals[a.0].shape, &self.vals[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{:?} @ {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        matmul_acc(&self.vals[a.0].data, &self.vals[b.0].data, &mut out, m, k, n);
        let t = Tensor { shape: vec![m, n], data: out, grad: None };
        self.flops.add(self.class, 2 * (m * k * n) as u64);
        let needs = self.needs(&[a.0, b.0]);
        self.push(Node::Matmul { a: a.0, b: b.0, m, k, n }, t, needs, "matmul")
    }

    /// Batched `a[b,m,k] @ b[b,k,n]`.
    pub fn bmm(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (&self.vals[a.0].shape, &self.vals[b.0].shape);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape {
                op: "bmm",
                detail: format!("{:?} @ {:?}", sa, sb),
            });
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![F::zero(); bsz * m * n];
        for bi in 0..bsz {
            matmul_acc(
                &self.vals[a.0].data[bi * m * k..(bi + 1) * m * k],
                &self.vals[b.0].data[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let t = Tensor { shape: vec![bsz, m, n], data: out, grad: None };
        self.flops.add(self.class, 2 * (bsz * m * k * n) as u64);
        let needs = self.needs(&[a.0, b.0]);
        self.push(Node::Bmm { a: a.0, b: b.0, bsz, m, k, n }, t, needs, "bmm")
    }

    /// Batched `a[b,m,k] @ b[b,n,k]^T` (attention scores).
    pub fn bmm_nt(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (&self.vals[a.0].shape, &self.vals[b.0].shape);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::Shape {
                op: "bmm_nt",
                detail: format!("{:?} @ {:?}^T", sa, sb),
            });
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![F::zero(); bsz * m * n];
        for bi in 0..bsz {
            matmul_nt_acc(
                &self.vals[a.0].data[bi * m * k..(bi + 1) * m * k],
                &self.vals[b.0].data[bi * n * k..(bi + 1) * n * k],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let t = Tensor { shape: vec![bsz, m, n], data: out, grad: None };
        self.flops.add(self.class, 2 * (bsz * m * k * n) as u64);
        let needs = self.needs(&[a.0, b.0]);
        self.push(Node::BmmNt { a: a.0, b: b.0, bsz, m, k, n }, t, needs, "bmm_nt")
    }

    /// Depthwise k x k convolution over `[h, w, c]` with zero padding.
    pub fn depthwise_conv2d(&mut self, x: VarId, kern: VarId, bias: VarId) -> Result<VarId> {
        let sx = self.vals[x.0].shape.clone();
        let sk = self.vals[kern.0].shape.clone();
        if sx.len() != 3 || sk.len() != 3 || sk[0] != sx[2] {
            return Err(Error::Shape {
                op: "depthwise_conv2d",
                detail: format!("input {:?}, kernel {:?}", sx, sk),
            });
        }
        let (h, w, c) = (sx[0], sx[1], sx[2]);
        let (kh, kw) = (sk[1], sk[2]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape { op: "depthwise_conv2d", detail: "kernel size must be odd".into() });
        }
        if self.vals[bias.0].shape != [c] {
            return Err(Error::Shape { op: "depthwise_conv2d", detail: "bias shape".into() });
        }
        let (ph, pw) = (kh / 2, kw / 2);
        let src = &self.vals[x.0].data;
        let kdat = &self.vals[kern.0].data;
        let bdat = &self.vals[bias.0].data;
        // Tap-major kernel layout keeps the channel loop contiguous.
        let mut ktr = vec![F::zero(); kh * kw * c];
        for ch in 0..c {
            for t in 0..kh * kw {
                ktr[t * c + ch] = kdat[ch * kh * kw + t];
            }
        }
        let mut out = vec![F::zero(); h * w * c];
        for i in 0..h {
            for u in 0..kh {
                let ii = i as isize + u as isize - ph as isize;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                let ii = ii as usize;
                for j in 0..w {
                    let obase = (i * w + j) * c;
                    for v in 0..kw {
                        let jj = j as isize + v as isize - pw as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let ibase = (ii * w + jj as usize) * c;
                        let krow = &ktr[(u * kw + v) * c..(u * kw + v + 1) * c];
                        for ch in 0..c {
                            out[obase + ch] = out[obase + ch] + src[ibase + ch] * krow[ch];
                        }
                    }
                }
            }
        }
        for row in out.chunks_mut(c) {
            for (vv, bb) in row.iter_mut().zip(bdat) {
                *vv += *bb;
            }
        }
        let t = Tensor { shape: vec![h, w, c], data: out, grad: None };
        self.flops.add(self.class, 2 * (h * w * c * kh * kw) as u64);
        let needs = self.needs(&[x.0, kern.0, bias.0]);
        self.push(
            Node::DepthwiseConv { x: x.0, kern: kern.0, bias: bias.0, h, w, c, kh, kw },
            t,
            needs,
            "depthwise_conv2d",
        )
    }

    /// Index-space shift of an `[h, w]` field with zero fill:
    /// `out[i, j] = x[i + di, j + dj]`.
    pub fn shift2d(&mut self, x: VarId, di: isize, dj: isize) -> Result<VarId> {
        let s = self.vals[x.0].shape.clone();
        if s.len() != 2 {
            return Err(Error::Shape { op: "shift2d", detail: format!("expected [h,w], got {:?}", s) });
        }
        let (h, w) = (s[0], s[1]);
        let src = &self.vals[x.0].data;
        let mut out = vec![F::zero(); h * w];
        for i in 0..h {
            let ii = i as isize + di;
            if ii < 0 || ii >= h as isize {
                continue;
            }
            for j in 0..w {
                let jj = j as isize + dj;
                if jj < 0 || jj >= w as isize {
                    continue;
                }
                out[i * w + j] = src[(ii as usize) * w + jj as usize];
            }
        }
        let t = Tensor { shape: vec![h, w], data: out, grad: None };
        let needs = self.needs(&[x.0]);
        self.push(Node::Shift2d { x: x.0, di, dj, h, w }, t, needs, "shift2d")
    }

    // -----------------------------------------------------------------------
    // Backward
    // -----------------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Consumes the tape; gradients of every
    /// reachable variable are returned (unreachable ones are zero/absent).
    pub fn backward(mut self, loss: VarId) -> Result<Gradients<F>> {
        if loss.0 >= self.vals.len() {
            return Err(Error::Config("backward: loss is not on the tape".into()));
        }
        if self.vals[loss.0].numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.vals[loss.0].shape),
            });
        }
        let n = self.vals.len();
        let mut grads: Vec<Option<Vec<F>>> = vec![None; n];
        grads[loss.0] = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.needs_grad[idx] || matches!(self.nodes[idx], Node::Leaf) {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = std::mem::replace(&mut self.nodes[idx], Node::Leaf);
            if self.profile.is_some() {
                let name = node_name(&node);
                let t0 = std::time::Instant::now();
                self.backward_node(idx, node, &g, &mut grads);
                let e = self.profile.as_mut().unwrap().per_op.entry(name).or_default();
                e.0 += 1;
                e.1 += t0.elapsed();
            } else {
                self.backward_node(idx, node, &g, &mut grads);
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<F>>], target: usize, contrib: impl FnOnce(&mut [F])) {
        if !self.needs_grad[target] {
            return;
        }
        if grads[target].is_none() {
            grads[target] = Some(vec![F::zero(); self.vals[target].numel()]);
        }
        contrib(grads[target].as_mut().unwrap());
    }

    #[allow(clippy::too_many_lines)]
    fn backward_node(&self, idx: usize, node: Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match node {
            Node::Leaf => {}
            Node::Add { a, b } => {
                self.acc(grads, a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += *y;
                    }
                });
                self.acc(grads, b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x += *y;
                    }
                });
            }
            Node::Sub { a, b } => {
                self.acc(grads, a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += *y;
                    }
                });
                self.acc(grads, b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x = *x - *y;
                    }
                });
            }
            Node::Mul { a, b } => {
                let (av, bv) = (&self.vals[a].data, &self.vals[b].data);
                self.acc(grads, a, |ga| {
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(bv) {
                        *x += *y * *z;
                    }
                });
                self.acc(grads, b, |gb| {
                    for ((x, y), z) in gb.iter_mut().zip(g).zip(av) {
                        *x += *y * *z;
                    }
                });
            }
            Node::Scale { x, c } => {
                self.acc(grads, x, |gx| {
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += *b * c;
                    }
                });
            }
            Node::MulScalarVar { x, s } => {
                let sv = self.vals[s].data[0];
                let xv = &self.vals[x].data;
                self.acc(grads, x, |gx| {
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += *b * sv;
                    }
                });
                self.acc(grads, s, |gs| {
                    let mut acc = F::zero();
                    for (b, xd) in g.iter().zip(xv) {
                        acc += *b * *xd;
                    }
                    gs[0] += acc;
                });
            }
            Node::MulMask { x, mask } => {
                self.acc(grads, x, |gx| {
                    for ((a, b), m) in gx.iter_mut().zip(g).zip(&mask) {
                        *a += *b * *m;
                    }
                });
            }
            Node::AddBias { x, b } => {
                let c = self.vals[b].numel();
                self.acc(grads, x, |gx| {
                    for (a, gg) in gx.iter_mut().zip(g) {
                        *a += *gg;
                    }
                });
                self.acc(grads, b, |gb| {
                    for row in g.chunks(c) {
                        for (a, gg) in gb.iter_mut().zip(row) {
                            *a += *gg;
                        }
                    }
                });
            }
            Node::AddCol { x, v } => {
                let r = self.vals[v].numel();
                let c = self.vals[x].numel() / r;
                self.acc(grads, x, |gx| {
                    for (a, gg) in gx.iter_mut().zip(g) {
                        *a += *gg;
                    }
                });
                self.acc(grads, v, |gv| {
                    for i in 0..r {
                        let mut acc = F::zero();
                        for gg in &g[i * c..(i + 1) * c] {
                            acc += *gg;
                        }
                        gv[i] += acc;
                    }
                });
            }
            Node::ChannelScale { x, s } => {
                let c = self.vals[s].numel();
                let sv = &self.vals[s].data;
                let xv = &self.vals[x].data;
                self.acc(grads, x, |gx| {
                    for (row, grow) in gx.chunks_mut(c).zip(g.chunks(c)) {
                        for ((a, gg), ss) in row.iter_mut().zip(grow).zip(sv) {
                            *a += *gg * *ss;
                        }
                    }
                });
                self.acc(grads, s, |gs| {
                    for (xrow, grow) in xv.chunks(c).zip(g.chunks(c)) {
                        for ((a, gg), xx) in gs.iter_mut().zip(grow).zip(xrow) {
                            *a += *gg * *xx;
                        }
                    }
                });
            }
            Node::Tanh { x } => {
                let yv = &self.vals[idx].data;
                self.acc(grads, x, |gx| {
                    for ((a, gg), y) in gx.iter_mut().zip(g).zip(yv) {
                        *a += *gg * (F::one() - *y * *y);
                    }
                });
            }
            Node::Silu { x, sig } => {
                let xv = &self.vals[x].data;
                self.acc(grads, x, |gx| {
                    for (((a, gg), s), xd) in gx.iter_mut().zip(g).zip(&sig).zip(xv) {
                        *a += *gg * *s * (F::one() + *xd * (F::one() - *s));
                    }
                });
            }
            Node::Gelu { x, inner } => {
                let xv = &self.vals[x].data;
                let half = F::c(0.5);
                let c0 = F::c(gelu_c0());
                let c1 = F::c(GELU_C1);
                let three = F::c(3.0);
                self.acc(grads, x, |gx| {
                    for (((a, gg), t), xd) in gx.iter_mut().zip(g).zip(&inner).zip(xv) {
                        let du = c0 * (F::one() + three * c1 * *xd * *xd);
                        let d = half * (F::one() + *t) + half * *xd * (F::one() - *t * *t) * du;
                        *a += *gg * d;
                    }
                });
            }
            Node::Square { x } => {
                let xv = &self.vals[x].data;
                let two = F::c(2.0);
                self.acc(grads, x, |gx| {
                    for ((a, gg), xd) in gx.iter_mut().zip(g).zip(xv) {
                        *a += *gg * two * *xd;
                    }
                });
            }
            Node::Sqrt { x } => {
                let yv = &self.vals[idx].data;
                let half = F::c(0.5);
                self.acc(grads, x, |gx| {
                    for ((a, gg), y) in gx.iter_mut().zip(g).zip(yv) {
                        *a += *gg * half / *y;
                    }
                });
            }
            Node::Sin { x } => {
                let xv = &self.vals[x].data;
                self.acc(grads, x, |gx| {
                    for ((a, gg), xd) in gx.iter_mut().zip(g).zip(xv) {
                        *a += *gg * xd.cos();
                    }
                });
            }
            Node::Cos { x } => {
                let xv = &self.vals[x].data;
                self.acc(grads, x, |gx| {
                    for ((a, gg), xd) in gx.iter_mut().zip(g).zip(xv) {
                        *a = *a - *gg * xd.sin();
                    }
                });
            }
            Node::SoftmaxLast { x } => {
                let c = *self.vals[idx].shape.last().unwrap();
                let yv = &self.vals[idx].data;
                self.acc(grads, x, |gx| {
                    for ((grow, yrow), gxrow) in
                        g.chunks(c).zip(yv.chunks(c)).zip(gx.chunks_mut(c))
                    {
                        let mut dot = F::zero();
                        for (gg, y) in grow.iter().zip(yrow) {
                            dot += *gg * *y;
                        }
                        for ((a, gg), y) in gxrow.iter_mut().zip(grow).zip(yrow) {
                            *a += *y * (*gg - dot);
                        }
                    }
                });
            }
            Node::RopeRotate { x, cos, sin } => {
                let d = self.vals[x].shape[1];
                let half = d / 2;
                let rows = self.vals[x].numel() / d;
                let xv = &self.vals[x].data;
                let cv = &self.vals[cos].data;
                let sv = &self.vals[sin].data;
                self.acc(grads, x, |gx| {
                    for r in 0..rows {
                        for p in 0..half {
                            let ge = g[r * d + 2 * p];
                            let go = g[r * d + 2 * p + 1];
                            let c = cv[r * half + p];
                            let s = sv[r * half + p];
                            gx[r * d + 2 * p] += ge * c + go * s;
                            gx[r * d + 2 * p + 1] += go * c - ge * s;
                        }
                    }
                });
                self.acc(grads, cos, |gc| {
                    for r in 0..rows {
                        for p in 0..half {
                            let ge = g[r * d + 2 * p];
                            let go = g[r * d + 2 * p + 1];
                            gc[r * half + p] +=
                                ge * xv[r * d + 2 * p] + go * xv[r * d + 2 * p + 1];
                        }
                    }
                });
                self.acc(grads, sin, |gs| {
                    for r in 0..rows {
                        for p in 0..half {
                            let ge = g[r * d + 2 * p];
                            let go = g[r * d + 2 * p + 1];
                            gs[r * half + p] +=
                                go * xv[r * d + 2 * p] - ge * xv[r * d + 2 * p + 1];
                        }
                    }
                });
            }
            Node::LayerNormLast { x, rstd } => {
                let c = *self.vals[idx].shape.last().unwrap();
                let cn = F::from_count(c);
                let yv = &self.vals[idx].data;
                self.acc(grads, x, |gx| {
                    for (((grow, yrow), gxrow), r) in g
                        .chunks(c)
                        .zip(yv.chunks(c))
                        .zip(gx.chunks_mut(c))
                        .zip(&rstd)
                    {
                        let mut gmean = F::zero();
                        let mut gymean = F::zero();
                        for (gg, y) in grow.iter().zip(yrow) {
                            gmean += *gg;
                            gymean += *gg * *y;
                        }
                        gmean = gmean / cn;
                        gymean = gymean / cn;
                        for ((a, gg), y) in gxrow.iter_mut().zip(grow).zip(yrow) {
                            *a += *r * (*gg - gmean - *y * gymean);
                        }
                    }
                });
            }
            Node::Reshape { x } => {
                self.acc(grads, x, |gx| {
                    for (a, gg) in gx.iter_mut().zip(g) {
                        *a += *gg;
                    }
                });
            }
            Node::Permute { x, perm } => {
                let out_shape = self.vals[idx].shape.clone();
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gperm = permute_data(g, &out_shape, &inv);
                self.acc(grads, x, |gx| {
                    for (a, gg) in gx.iter_mut().zip(&gperm) {
                        *a += *gg;
                    }
                });
            }
            Node::Narrow { x, axis, start } => {
                let in_shape = self.vals[x].shape.clone();
                let len = self.vals[idx].shape[axis];
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                self.acc(grads, x, |gx| {
                    for o in 0..outer {
                        let dst = o * in_shape[axis] * inner + start * inner;
                        let src = o * len * inner;
                        for t in 0..len * inner {
                            gx[dst + t] += g[src + t];
                        }
                    }
                });
            }
            Node::IndexSelect { x, axis, indices } => {
                let in_shape = self.vals[x].shape.clone();
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                self.acc(grads, x, |gx| {
                    for o in 0..outer {
                        let in_base = o * in_shape[axis] * inner;
                        let out_base = o * indices.len() * inner;
                        for (ii, &src_idx) in indices.iter().enumerate() {
                            let dst = in_base + src_idx * inner;
                            let src = out_base + ii * inner;
                            for t in 0..inner {
                                gx[dst + t] += g[src + t];
                            }
                        }
                    }
                });
            }
            Node::Concat { xs, axis } => {
                let out_shape = self.vals[idx].shape.clone();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total_axis = out_shape[axis];
                let mut offset = 0;
                for xid in xs {
                    let d = self.vals[xid].shape[axis];
                    self.acc(grads, xid, |gx| {
                        for o in 0..outer {
                            let src = (o * total_axis + offset) * inner;
                            let dst = o * d * inner;
                            for t in 0..d * inner {
                                gx[dst + t] += g[src + t];
                            }
                        }
                    });
                    offset += d;
                }
            }
            Node::SumAll { x } => {
                let gs = g[0];
                self.acc(grads, x, |gx| {
                    for a in gx.iter_mut() {
                        *a += gs;
                    }
                });
            }
            Node::MeanAll { x } => {
                let n = self.vals[x].numel();
                let gs = g[0] / F::from_count(n);
                self.acc(grads, x, |gx| {
                    for a in gx.iter_mut() {
                        *a += gs;
                    }
                });
            }
            Node::MaxLast { x, argmax } => {
                let c = *self.vals[x].shape.last().unwrap();
                self.acc(grads, x, |gx| {
                    for (row, (&am, gg)) in argmax.iter().zip(g).enumerate() {
                        gx[row * c + am] += *gg;
                    }
                });
            }
            Node::Matmul { a, b, m, k, n } => {
                let av = &self.vals[a].data;
                let bv = &self.vals[b].data;
                self.acc(grads, a, |ga| {
                    matmul_nt_acc(g, bv, ga, m, n, k);
                });
                self.acc(grads, b, |gb| {
                    matmul_tn_acc(av, g, gb, m, k, n);
                });
            }
            Node::Bmm { a, b, bsz, m, k, n } => {
                let av = &self.vals[a].data;
                let bv = &self.vals[b].data;
                self.acc(grads, a, |ga| {
                    for bi in 0..bsz {
                        matmul_nt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv[bi * k * n..(bi + 1) * k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                self.acc(grads, b, |gb| {
                    for bi in 0..bsz {
                        matmul_tn_acc(
                            &av[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Node::BmmNt { a, b, bsz, m, k, n } => {
                let av = &self.vals[a].data;
                let bv = &self.vals[b].data;
                self.acc(grads, a, |ga| {
                    for bi in 0..bsz {
                        matmul_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv[bi * n * k..(bi + 1) * n * k],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                self.acc(grads, b, |gb| {
                    for bi in 0..bsz {
                        matmul_tn_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &av[bi * m * k..(bi + 1) * m * k],
                            &mut gb[bi * n * k..(bi + 1) * n * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
            }
            Node::DepthwiseConv { x, kern, bias, h, w, c, kh, kw } => {
                let (ph, pw) = (kh / 2, kw / 2);
                let xv = &self.vals[x].data;
                let kv = &self.vals[kern].data;
                let mut ktr = vec![F::zero(); kh * kw * c];
                for ch in 0..c {
                    for t in 0..kh * kw {
                        ktr[t * c + ch] = kv[ch * kh * kw + t];
                    }
                }
                self.acc(grads, x, |gx| {
                    for i in 0..h {
                        for u in 0..kh {
                            let ii = i as isize + u as isize - ph as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            let ii = ii as usize;
                            for j in 0..w {
                                let obase = (i * w + j) * c;
                                for v in 0..kw {
                                    let jj = j as isize + v as isize - pw as isize;
                                    if jj < 0 || jj >= w as isize {
                                        continue;
                                    }
                                    let ibase = (ii * w + jj as usize) * c;
                                    let krow = &ktr[(u * kw + v) * c..(u * kw + v + 1) * c];
                                    for ch in 0..c {
                                        gx[ibase + ch] += g[obase + ch] * krow[ch];
                                    }
                                }
                            }
                        }
                    }
                });
                self.acc(grads, kern, |gk| {
                    let mut gtr = vec![F::zero(); kh * kw * c];
                    for i in 0..h {
                        for u in 0..kh {
                            let ii = i as isize + u as isize - ph as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            let ii = ii as usize;
                            for j in 0..w {
                                let obase = (i * w + j) * c;
                                for v in 0..kw {
                                    let jj = j as isize + v as isize - pw as isize;
                                    if jj < 0 || jj >= w as isize {
                                        continue;
                                    }
                                    let ibase = (ii * w + jj as usize) * c;
                                    let grow = &mut gtr[(u * kw + v) * c..(u * kw + v + 1) * c];
                                    for ch in 0..c {
                                        grow[ch] += g[obase + ch] * xv[ibase + ch];
                                    }
                                }
                            }
                        }
                    }
                    for ch in 0..c {
                        for t in 0..kh * kw {
                            gk[ch * kh * kw + t] += gtr[t * c + ch];
                        }
                    }
                });
                self.acc(grads, bias, |gb| {
                    for row in g.chunks(c) {
                        for (a, gg) in gb.iter_mut().zip(row) {
                            *a += *gg;
                        }
                    }
                });
            }
            Node::Shift2d { x, di, dj, h, w } => {
                self.acc(grads, x, |gx| {
                    for i in 0..h {
                        let ii = i as isize + di;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for j in 0..w {
                            let jj = j as isize + dj;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            gx[(ii as usize) * w + jj as usize] += g[i * w + j];
                        }
                    }
                });
            }
        }
    }
}

fn node_name<F: Scalar>(n: &Node<F>) -> &'static str {
    match n {
        Node::Leaf => "bw:leaf",
        Node::Add { .. } => "bw:add",
        Node::Sub { .. } => "bw:sub",
        Node::Mul { .. } => "bw:mul",
        Node::Scale { .. } => "bw:scale",
        Node::MulScalarVar { .. } => "bw:mul_scalar_var",
        Node::MulMask { .. } => "bw:mul_mask",
        Node::AddBias { .. } => "bw:add_bias",
        Node::AddCol { .. } => "bw:add_col",
        Node::ChannelScale { .. } => "bw:channel_scale",
        Node::Tanh { .. } => "bw:tanh",
        Node::Silu { .. } => "bw:silu",
        Node::Gelu { .. } => "bw:gelu",
        Node::Square { .. } => "bw:square",
        Node::Sqrt { .. } => "bw:sqrt",
        Node::Sin { .. } => "bw:sin",
        Node::Cos { .. } => "bw:cos",
        Node::SoftmaxLast { .. } => "bw:softmax",
        Node::LayerNormLast { .. } => "bw:layernorm",
        Node::RopeRotate { .. } => "bw:rope",
        Node::Reshape { .. } => "bw:reshape",
        Node::Permute { .. } => "bw:permute",
        Node::Narrow { .. } => "bw:narrow",
        Node::IndexSelect { .. } => "bw:index_select",
        Node::Concat { .. } => "bw:concat",
        Node::SumAll { .. } => "bw:sum",
        Node::MeanAll { .. } => "bw:mean",
        Node::MaxLast { .. } => "bw:max",
        Node::Matmul { .. } => "bw:matmul",
        Node::Bmm { .. } => "bw:bmm",
        Node::BmmNt { .. } => "bw:bmm_nt",
        Node::DepthwiseConv { .. } => "bw:conv",
        Node::Shift2d { .. } => "bw:shift2d",
    }
}

const GELU_C1: f64 = 0.044715;

fn gelu_c0() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

fn permute_data<F: Scalar>(data: &[F], shape: &[usize], perm: &[usize]) -> Vec<F> {
    // Fast path: the last axis stays in place, so the innermost move is a
    // contiguous block copy.
    let rank = shape.len();
    if rank >= 2 && perm[rank - 1] == rank - 1 {
        let inner = shape[rank - 1];
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank - 1).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let outer: usize = out_shape[..rank - 1].iter().product();
        let mut out = Vec::with_capacity(data.len());
        let mut idx = vec![0usize; rank - 1];
        for _ in 0..outer {
            let mut src = 0;
            for d in 0..rank - 1 {
                src += idx[d] * in_strides[perm[d]];
            }
            out.extend_from_slice(&data[src..src + inner]);
            for d in (0..rank - 1).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        return out;
    }
    if perm == [0, 2, 1] {
        let (a, b, c) = (shape[0], shape[1], shape[2]);
        let mut out = Vec::with_capacity(data.len());
        for i in 0..a {
            let block = &data[i * b * c..(i + 1) * b * c];
            for k in 0..c {
                for j in 0..b {
                    out.push(block[j * c + k]);
                }
            }
        }
        return out;
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        let mut src = 0;
        for d in 0..rank {
            src += idx[d] * in_strides[perm[d]];
        }
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Uniform primitive dispatch: lets tests sweep the catalogue generically.
// ---------------------------------------------------------------------------

/// Identifier + attributes for a catalogue primitive with tensor-only inputs.
#[derive(Clone, Debug)]
pub enum PrimitiveId {
    Matmul,
    Add,
    Sub,
    Mul,
    Tanh,
    Silu,
    Gelu,
    SoftmaxLast,
    LayerNormLast,
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    IndexSelect(usize, Vec<usize>),
    SumAll,
    MeanAll,
    Square,
    Sqrt,
    Sin,
    Cos,
    Scale(f64),
    Concat(usize),
    Bmm,
    BmmNt,
    MaxLast,
    Shift2d(isize, isize),
    DepthwiseConv,
    AddBias,
    ChannelScale,
}

impl<F: Scalar> Tape<F> {
    /// Apply a catalogue primitive by id. The recorded node is identical to
    /// calling the named method directly.
    pub fn forward_primitive(&mut self, op: &PrimitiveId, inputs: &[VarId]) -> Result<VarId> {
        let need = |n: usize| -> Result<()> {
            if inputs.len() != n {
                Err(Error::Shape { op: "forward_primitive", detail: format!("expected {n} inputs") })
            } else {
                Ok(())
            }
        };
        match op {
            PrimitiveId::Matmul => {
                need(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            PrimitiveId::Add => {
                need(2)?;
                self.add(inputs[0], inputs[1])
            }
            PrimitiveId::Sub => {
                need(2)?;
                self.sub(inputs[0], inputs[1])
            }
            PrimitiveId::Mul => {
                need(2)?;
                self.mul(inputs[0], inputs[1])
            }
            PrimitiveId::Tanh => {
                need(1)?;
                self.tanh(inputs[0])
            }
            PrimitiveId::Silu => {
                need(1)?;
                self.silu(inputs[0])
            }
            PrimitiveId::Gelu => {
                need(1)?;
                self.gelu(inputs[0])
            }
            PrimitiveId::SoftmaxLast => {
                need(1)?;
                self.softmax_last(inputs[0])
            }
            PrimitiveId::LayerNormLast => {
                need(1)?;
                self.layer_norm_last(inputs[0])
            }
            PrimitiveId::Reshape(shape) => {
                need(1)?;
                self.reshape(inputs[0], shape.clone())
            }
            PrimitiveId::Permute(perm) => {
                need(1)?;
                self.permute(inputs[0], perm)
            }
            PrimitiveId::IndexSelect(axis, idx) => {
                need(1)?;
                self.index_select(inputs[0], *axis, idx.clone())
            }
            PrimitiveId::SumAll => {
                need(1)?;
                self.sum_all(inputs[0])
            }
            PrimitiveId::MeanAll => {
                need(1)?;
                self.mean_all(inputs[0])
            }
            PrimitiveId::Square => {
                need(1)?;
                self.square(inputs[0])
            }
            PrimitiveId::Sqrt => {
                need(1)?;
                self.sqrt(inputs[0])
            }
            PrimitiveId::Sin => {
                need(1)?;
                self.sin(inputs[0])
            }
            PrimitiveId::Cos => {
                need(1)?;
                self.cos(inputs[0])
            }
            PrimitiveId::Scale(c) => {
                need(1)?;
                self.scale(inputs[0], F::c(*c))
            }
            PrimitiveId::Concat(axis) => self.concat(inputs, *axis),
            PrimitiveId::Bmm => {
                need(2)?;
                self.bmm(inputs[0], inputs[1])
            }
            PrimitiveId::BmmNt => {
                need(2)?;
                self.bmm_nt(inputs[0], inputs[1])
            }
            PrimitiveId::MaxLast => {
                need(1)?;
                self.max_last(inputs[0])
            }
            PrimitiveId::Shift2d(di, dj) => {
                need(1)?;
                self.shift2d(inputs[0], *di, *dj)
            }
            PrimitiveId::DepthwiseConv => {
                need(3)?;
                self.depthwise_conv2d(inputs[0], inputs[1], inputs[2])
            }
            PrimitiveId::AddBias => {
                need(2)?;
                self.add_bias(inputs[0], inputs[1])
            }
            PrimitiveId::ChannelScale => {
                need(2)?;
                self.channel_scale(inputs[0], inputs[1])
            }
        }
    }
}
