//! Define-by-run reverse-mode differentiation.
//!
//! Every value on a [`Tape`] is a row-major matrix. Operations append a node
//! holding their output and whatever they need for the adjoint; [`Tape::backward`]
//! replays the nodes in reverse. A fresh tape is built for every forward pass.

use std::cell::RefCell;
use std::ops::Range;
use std::rc::Rc;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Pointwise operation kinds accepted by [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Scale(f64),
}

/// How the Gaussian position selector differentiates with respect to the
/// predicted position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WindowGradient {
    /// Exact derivative of the windowed sum; window membership contributes nothing.
    Exact,
    /// Surrogate derivative of the untruncated Gaussian over every valid slot,
    /// so that scale-invariant objectives still see a signal.
    #[default]
    Smooth,
}

/// Segment layout for packed multi-head attention: query segment `i`
/// attends only to key segment `i`.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub heads: usize,
    pub queries: Vec<Range<usize>>,
    pub keys: Vec<Range<usize>>,
    pub causal: bool,
}

/// Geometry for the Gaussian position selector.
#[derive(Debug, Clone)]
pub struct GaussianWindow {
    /// Row-major `[max_len × d_model]` sinusoid table.
    pub table: Arc<Vec<f64>>,
    pub d_model: usize,
    pub half_width: f64,
    pub sigma: f64,
    pub gradient: WindowGradient,
}

impl GaussianWindow {
    /// Integer slots and weights for a predicted position `b` in a sentence of length `len`.
    pub fn weights(&self, b: f64, len: usize) -> Vec<(usize, f64)> {
        let last = len as f64 - 1.0;
        let lo = (b - self.half_width).ceil().clamp(0.0, last) as usize;
        let hi = (b + self.half_width).floor().clamp(0.0, last) as usize;
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        (lo..=hi).map(|s| (s, self.weight(s, b))).collect()
    }

    fn weight(&self, s: usize, b: f64) -> f64 {
        let dist = s as f64 - b;
        (-dist * dist / (2.0 * self.sigma)).exp()
    }

    fn row(&self, s: usize) -> &[f64] {
        &self.table[s * self.d_model..(s + 1) * self.d_model]
    }
}

struct AttentionSaved {
    q: usize,
    k: usize,
    v: usize,
    layout: Rc<AttentionLayout>,
    probs: Vec<f64>,
    mask: Option<Vec<f64>>,
}

struct GaussianSaved {
    b: usize,
    window: Rc<GaussianWindow>,
    row_lens: Vec<usize>,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Softmax(usize, Axis),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    SumAll(usize),
    SmoothedXent {
        logits: usize,
        targets: Vec<usize>,
        smoothing: f64,
        probs: Vec<f64>,
    },
    CosineSum {
        x: usize,
        target: Vec<f64>,
    },
    Attention(Box<AttentionSaved>),
    Gaussian(Box<GaussianSaved>),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// Recording of one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    rng: RefCell<ChaCha8Rng>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}[{}x{}]", self.id, r, c)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new(0)
    }
}

impl Tape {
    /// `seed` drives dropout masks only.
    pub fn new(seed: u64) -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(256)),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var<'_> {
        debug_assert_eq!(rows * cols, value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { rows, cols, value, op });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn constant(&self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var<'_>> {
        if rows * cols != value.len() || rows == 0 || cols == 0 {
            return Err(Error::shape(
                "constant",
                format!("{rows}x{cols} with {} values", value.len()),
            ));
        }
        Ok(self.push(rows, cols, value, Op::Leaf))
    }

    /// Records a parameter; its gradient is routed back by [`Gradients::accumulate_into`].
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let t = store.get(id);
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Param(id))
    }

    /// Records every parameter of `store`, indexed by [`ParamId`].
    pub fn bind_all(&self, store: &ParamStore) -> Vec<Var<'_>> {
        store.ids().map(|id| self.param(store, id)).collect()
    }

    fn shape_of(&self, id: usize) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        (nodes[id].rows, nodes[id].cols)
    }

    fn unary(&self, x: usize, f: impl Fn(f64) -> f64, op: Op) -> Var<'_> {
        let (rows, cols, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x];
            (n.rows, n.cols, n.value.iter().map(|&v| f(v)).collect())
        };
        self.push(rows, cols, value, op)
    }

    fn binary(
        &self,
        name: &'static str,
        a: usize,
        b: usize,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'_>> {
        let (rows, cols, value) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a], &nodes[b]);
            if (na.rows, na.cols) != (nb.rows, nb.cols) {
                return Err(Error::shape(
                    name,
                    format!("{}x{} vs {}x{}", na.rows, na.cols, nb.rows, nb.cols),
                ));
            }
            let v = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
            (na.rows, na.cols, v)
        };
        Ok(self.push(rows, cols, value, op))
    }

    fn bernoulli_mask(&self, n: usize, p: f64) -> Vec<f64> {
        let keep = 1.0 - p;
        let mut rng = self.rng.borrow_mut();
        (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {}x{}", root.rows, root.cols),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        let mut visited = 0;
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            visited += 1;
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(pid) => grads[i].as_ref().map(|g| (pid, g.clone())),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params, visited })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Vec<f64>)>,
    visited: usize,
}

impl Gradients {
    /// Adjoint of `var`, or `None` when it did not influence the loss.
    pub fn wrt(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Number of nodes replayed during the reverse sweep.
    pub fn visited(&self) -> usize {
        self.visited
    }

    /// Adds parameter adjoints into each tensor's gradient buffer.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (pid, g) in &self.params {
            let dst = store.get_mut(*pid).grad_mut();
            for (d, s) in dst.iter_mut().zip(g) {
                *d += s;
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(grads: &mut [Option<Vec<f64>>], id: usize, g: impl Iterator<Item = f64>, len: usize) {
    let dst = slot(grads, id, len);
    for (d, s) in dst.iter_mut().zip(g) {
        *d += s;
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
) {
    // a is m×k (or stored k×m when a_t), b is k×n (or stored n×k when b_t)
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: slice lengths match the declared strides and extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = &node.value;
    let len = |i: usize| nodes[i].value.len();
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::MatMul(a, b) => {
            let (m, k, n) = (nodes[*a].rows, nodes[*a].cols, nodes[*b].cols);
            gemm(m, n, k, g, false, &nodes[*b].value, true, slot(grads, *a, m * k));
            gemm(k, m, n, &nodes[*a].value, true, g, false, slot(grads, *b, k * n));
        }
        Op::Add(a, b) => {
            add_into(grads, *a, g.iter().copied(), len(*a));
            add_into(grads, *b, g.iter().copied(), len(*b));
        }
        Op::Sub(a, b) => {
            add_into(grads, *a, g.iter().copied(), len(*a));
            add_into(grads, *b, g.iter().map(|x| -x), len(*b));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            add_into(grads, *a, g.iter().zip(vb).map(|(g, y)| g * y), va.len());
            add_into(grads, *b, g.iter().zip(va).map(|(g, x)| g * x), vb.len());
        }
        Op::Scale(a, c) => add_into(grads, *a, g.iter().map(|x| x * c), len(*a)),
        Op::AddScalar(a) => add_into(grads, *a, g.iter().copied(), len(*a)),
        Op::Sigmoid(a) => add_into(grads, *a, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)), len(*a)),
        Op::Tanh(a) => add_into(grads, *a, g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)), len(*a)),
        Op::Relu(a) => {
            let x = &nodes[*a].value;
            add_into(grads, *a, g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }), x.len())
        }
        Op::Exp(a) => add_into(grads, *a, g.iter().zip(out).map(|(g, y)| g * y), len(*a)),
        Op::AddRow(x, row) => {
            add_into(grads, *x, g.iter().copied(), len(*x));
            let cols = node.cols;
            let dst = slot(grads, *row, cols);
            for r in g.chunks_exact(cols) {
                for (d, s) in dst.iter_mut().zip(r) {
                    *d += s;
                }
            }
        }
        Op::MulCol(x, col) => {
            let cols = node.cols;
            let (vx, vc) = (&nodes[*x].value, &nodes[*col].value);
            {
                let dst = slot(grads, *x, vx.len());
                for (r, (dr, gr)) in dst.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).enumerate() {
                    for (d, s) in dr.iter_mut().zip(gr) {
                        *d += s * vc[r];
                    }
                }
            }
            let dst = slot(grads, *col, vc.len());
            for (r, (xr, gr)) in vx.chunks_exact(cols).zip(g.chunks_exact(cols)).enumerate() {
                dst[r] += xr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Op::Softmax(x, axis) => {
            let (rows, cols) = (node.rows, node.cols);
            let dst = slot(grads, *x, rows * cols);
            match axis {
                Axis::Cols => {
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let (y, gr) = (&out[span.clone()], &g[span.clone()]);
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, d) in dst[span].iter_mut().enumerate() {
                            *d += y[c] * (gr[c] - dot);
                        }
                    }
                }
                Axis::Rows => {
                    for c in 0..cols {
                        let dot: f64 = (0..rows).map(|r| out[r * cols + c] * g[r * cols + c]).sum();
                        for r in 0..rows {
                            let i = r * cols + c;
                            dst[i] += out[i] * (g[i] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let (rows, cols) = (node.rows, node.cols);
            let gamma = &nodes[*gain].value;
            {
                let dg = slot(grads, *gain, cols);
                for (gr, hr) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                    for c in 0..cols {
                        dg[c] += gr[c] * hr[c];
                    }
                }
            }
            {
                let db = slot(grads, *bias, cols);
                for gr in g.chunks_exact(cols) {
                    for c in 0..cols {
                        db[c] += gr[c];
                    }
                }
            }
            let dx = slot(grads, *x, rows * cols);
            let inv = 1.0 / cols as f64;
            for r in 0..rows {
                let span = r * cols..(r + 1) * cols;
                let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                let mut mean_d = 0.0;
                let mut mean_dh = 0.0;
                for c in 0..cols {
                    let d = gr[c] * gamma[c];
                    mean_d += d;
                    mean_dh += d * hr[c];
                }
                mean_d *= inv;
                mean_dh *= inv;
                for (c, d) in dx[span].iter_mut().enumerate() {
                    *d += rstd[r] * (gr[c] * gamma[c] - mean_d - hr[c] * mean_dh);
                }
            }
        }
        Op::Gather { table, ids } => {
            let cols = node.cols;
            let dst = slot(grads, *table, len(*table));
            for (gr, &row) in g.chunks_exact(cols).zip(ids) {
                for (d, s) in dst[row * cols..(row + 1) * cols].iter_mut().zip(gr) {
                    *d += s;
                }
            }
        }
        Op::Dropout { x, mask } => add_into(grads, *x, g.iter().zip(mask).map(|(g, m)| g * m), mask.len()),
        Op::SumAll(a) => {
            let s = g[0];
            add_into(grads, *a, std::iter::repeat(s), len(*a))
        }
        Op::SmoothedXent { logits, targets, smoothing, probs } => {
            let cols = nodes[*logits].cols;
            let scale = g[0] / targets.len() as f64;
            let uniform = smoothing / cols as f64;
            let dst = slot(grads, *logits, probs.len());
            for (r, &t) in targets.iter().enumerate() {
                let span = r * cols..(r + 1) * cols;
                for (c, d) in dst[span.clone()].iter_mut().enumerate() {
                    let target = if c == t { 1.0 - smoothing } else { 0.0 };
                    *d += scale * (probs[span.start + c] - target - uniform);
                }
            }
        }
        Op::CosineSum { x, target } => {
            let cols = nodes[*x].cols;
            let vx = &nodes[*x].value;
            let dst = slot(grads, *x, vx.len());
            for ((xr, tr), dr) in vx.chunks_exact(cols).zip(target.chunks_exact(cols)).zip(dst.chunks_exact_mut(cols)) {
                let nx = norm(xr);
                let nt = norm(tr);
                if nx == 0.0 || nt == 0.0 {
                    continue;
                }
                let cos = dot(xr, tr) / (nx * nt);
                for c in 0..cols {
                    dr[c] += g[0] * (tr[c] / (nx * nt) - cos * xr[c] / (nx * nx));
                }
            }
        }
        Op::Attention(saved) => attention_backward(nodes, node, saved, g, grads),
        Op::Gaussian(saved) => {
            let w = &saved.window;
            let d = w.d_model;
            let vb = &nodes[saved.b].value;
            let dst = slot(grads, saved.b, vb.len());
            for (r, (&b, &n)) in vb.iter().zip(&saved.row_lens).enumerate() {
                let gr = &g[r * d..(r + 1) * d];
                let slots: Vec<(usize, f64)> = match w.gradient {
                    WindowGradient::Exact => w.weights(b, n),
                    WindowGradient::Smooth => (0..n).map(|s| (s, w.weight(s, b))).collect(),
                };
                dst[r] += slots
                    .into_iter()
                    .map(|(s, wt)| wt * (s as f64 - b) / w.sigma * dot(gr, w.row(s)))
                    .sum::<f64>();
            }
        }
    }
}

fn attention_backward(
    nodes: &[Node],
    node: &Node,
    saved: &AttentionSaved,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let d = node.cols;
    let layout = &saved.layout;
    let dh = d / layout.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (vq, vk, vv) = (&nodes[saved.q].value, &nodes[saved.k].value, &nodes[saved.v].value);
    let mut dq = vec![0.0; vq.len()];
    let mut dk = vec![0.0; vk.len()];
    let mut dv = vec![0.0; vv.len()];
    let mut pos = 0;
    let mut dp = Vec::new();
    for (qs, ks) in layout.queries.iter().zip(&layout.keys) {
        let (ql, kl) = (qs.len(), ks.len());
        for h in 0..layout.heads {
            let off = h * dh;
            for i in 0..ql {
                let qi = (qs.start + i) * d + off;
                let lim = if layout.causal { i + 1 } else { kl };
                let prow = &saved.probs[pos + i * kl..pos + i * kl + kl];
                let grow = &g[qi..qi + dh];
                dp.clear();
                for j in 0..lim {
                    let vj = (ks.start + j) * d + off;
                    let m = saved.mask.as_ref().map_or(1.0, |m| m[pos + i * kl + j]);
                    dp.push(dot(grow, &vv[vj..vj + dh]) * m);
                    let w = prow[j] * m;
                    for c in 0..dh {
                        dv[vj + c] += w * grow[c];
                    }
                }
                let inner: f64 = (0..lim).map(|j| prow[j] * dp[j]).sum();
                for j in 0..lim {
                    let ds = prow[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = (ks.start + j) * d + off;
                    for c in 0..dh {
                        dq[qi + c] += ds * vk[kj + c];
                        dk[kj + c] += ds * vq[qi + c];
                    }
                }
            }
            pos += ql * kl;
        }
    }
    add_into(grads, saved.q, dq.into_iter(), vq.len());
    add_into(grads, saved.k, dk.into_iter(), vk.len());
    add_into(grads, saved.v, dv.into_iter(), vv.len());
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.shape_of(self.id)
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Runs `f` on the stored value without copying it.
    pub fn with_value<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn scalar(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (m, k) = self.shape();
        let (k2, n) = rhs.shape();
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}: inner dimensions differ")));
        }
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.tape.nodes.borrow();
            gemm(m, k, n, &nodes[self.id].value, false, &nodes[rhs.id].value, false, &mut out);
        }
        Ok(self.tape.push(m, n, out, Op::MatMul(self.id, rhs.id)))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary("add", self.id, rhs.id, |a, b| a + b, Op::Add(self.id, rhs.id))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary("sub", self.id, rhs.id, |a, b| a - b, Op::Sub(self.id, rhs.id))
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary("mul", self.id, rhs.id, |a, b| a * b, Op::Mul(self.id, rhs.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, |x| x * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, |x| x + c, Op::AddScalar(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(self.id, sigmoid, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self.id, f64::tanh, Op::Tanh(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.unary(self.id, |x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, f64::exp, Op::Exp(self.id))
    }

    /// Adds a `1×cols` row to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (rows, cols) = self.shape();
        if row.shape() != (1, cols) {
            return Err(Error::shape("add_row", format!("{rows}x{cols} + {:?}", row.shape())));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let r = &nodes[row.id].value;
            nodes[self.id]
                .value
                .chunks_exact(cols)
                .flat_map(|x| x.iter().zip(r).map(|(a, b)| a + b))
                .collect()
        };
        Ok(self.tape.push(rows, cols, value, Op::AddRow(self.id, row.id)))
    }

    /// Multiplies row `r` by `col[r]`.
    pub fn mul_col(self, col: Var<'t>) -> Result<Var<'t>> {
        let (rows, cols) = self.shape();
        if col.shape() != (rows, 1) {
            return Err(Error::shape("mul_col", format!("{rows}x{cols} * {:?}", col.shape())));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let c = &nodes[col.id].value;
            nodes[self.id]
                .value
                .chunks_exact(cols)
                .zip(c)
                .flat_map(|(x, s)| x.iter().map(move |a| a * s))
                .collect()
        };
        Ok(self.tape.push(rows, cols, value, Op::MulCol(self.id, col.id)))
    }

    /// Softmax normalising along `axis` (`Cols` normalises each row).
    pub fn softmax(self, axis: Axis) -> Var<'t> {
        let (rows, cols) = self.shape();
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let mut out = x.clone();
            match axis {
                Axis::Cols => out.chunks_exact_mut(cols).for_each(softmax_in_place),
                Axis::Rows => {
                    let mut buf = vec![0.0; rows];
                    for c in 0..cols {
                        (0..rows).for_each(|r| buf[r] = x[r * cols + c]);
                        softmax_in_place(&mut buf);
                        (0..rows).for_each(|r| out[r * cols + c] = buf[r]);
                    }
                }
            }
            out
        };
        self.tape.push(rows, cols, value, Op::Softmax(self.id, axis))
    }

    /// Per-row normalisation followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (rows, cols) = self.shape();
        if gain.shape() != (1, cols) || bias.shape() != (1, cols) {
            return Err(Error::shape(
                "layer_norm",
                format!("last dimension {cols}, gain {:?}, bias {:?}", gain.shape(), bias.shape()),
            ));
        }
        let (value, xhat, rstd) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let (gv, bv) = (&nodes[gain.id].value, &nodes[bias.id].value);
            let mut xhat = vec![0.0; rows * cols];
            let mut rstd = vec![0.0; rows];
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                let row = &x[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let denom = var + eps;
                let s = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
                rstd[r] = s;
                for c in 0..cols {
                    let h = (row[c] - mean) * s;
                    xhat[r * cols + c] = h;
                    out[r * cols + c] = gv[c] * h + bv[c];
                }
            }
            (out, xhat, rstd)
        };
        Ok(self.tape.push(
            rows,
            cols,
            value,
            Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, xhat, rstd },
        ))
    }

    /// Row lookup: output row `i` is `self[ids[i]]`.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t>> {
        let (rows, cols) = self.shape();
        if ids.is_empty() {
            return Err(Error::shape("gather_rows", "no indices"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("index {bad} out of {rows} rows")));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id].value;
            ids.iter().flat_map(|&i| t[i * cols..(i + 1) * cols].iter().copied()).collect()
        };
        Ok(self.tape.push(ids.len(), cols, value, Op::Gather { table: self.id, ids: ids.to_vec() }))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(self, p: f64) -> Var<'t> {
        if p <= 0.0 {
            return self;
        }
        let (rows, cols) = self.shape();
        let mask = self.tape.bernoulli_mask(rows * cols, p);
        let value = self.with_value(|x| x.iter().zip(&mask).map(|(a, m)| a * m).collect());
        self.tape.push(rows, cols, value, Op::Dropout { x: self.id, mask })
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.with_value(|x| x.iter().sum());
        self.tape.push(1, 1, vec![s], Op::SumAll(self.id))
    }

    /// Mean over rows of `(1-ε)·(-log p[target]) + ε·mean_v(-log p[v])`.
    pub fn smoothed_cross_entropy(self, targets: &[usize], smoothing: f64) -> Result<Var<'t>> {
        let (rows, cols) = self.shape();
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", format!("{rows} rows vs {} targets", targets.len())));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Invalid(format!("smoothing {smoothing} outside [0,1)")));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Invalid(format!("target id {bad} outside vocabulary of {cols}")));
        }
        let (loss, probs) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let mut probs = x.clone();
            let mut total = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                let row = &x[r * cols..(r + 1) * cols];
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                let nll_t = lse - row[t];
                let mean_nll = lse - row.iter().sum::<f64>() / cols as f64;
                total += (1.0 - smoothing) * nll_t + smoothing * mean_nll;
                for (p, v) in probs[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                    *p = (v - lse).exp();
                }
            }
            (total / rows as f64, probs)
        };
        Ok(self.tape.push(
            1,
            1,
            vec![loss],
            Op::SmoothedXent { logits: self.id, targets: targets.to_vec(), smoothing, probs },
        ))
    }

    /// `Σ_r cos(self[r], target[r])`; rows where either norm is zero contribute 0.
    pub fn cosine_row_sum(self, target: &[f64]) -> Result<Var<'t>> {
        let (rows, cols) = self.shape();
        if target.len() != rows * cols {
            return Err(Error::shape("cosine", format!("{rows}x{cols} vs {} target values", target.len())));
        }
        let s = self.with_value(|x| {
            x.chunks_exact(cols)
                .zip(target.chunks_exact(cols))
                .map(|(a, b)| cosine(a, b))
                .sum::<f64>()
        });
        Ok(self.tape.push(1, 1, vec![s], Op::CosineSum { x: self.id, target: target.to_vec() }))
    }

    /// Packed multi-head scaled dot-product attention. `self` holds the queries.
    pub fn attention(
        self,
        keys: Var<'t>,
        values: Var<'t>,
        layout: &Rc<AttentionLayout>,
        dropout: f64,
    ) -> Result<Var<'t>> {
        let tape = self.tape;
        let (nq, d) = self.shape();
        let (nk, dk) = keys.shape();
        if values.shape() != (nk, dk) || dk != d {
            return Err(Error::shape(
                "attention",
                format!("q {nq}x{d}, k {nk}x{dk}, v {:?}", values.shape()),
            ));
        }
        if layout.heads == 0 || d % layout.heads != 0 {
            return Err(Error::shape("attention", format!("{} heads do not divide {d}", layout.heads)));
        }
        if layout.queries.len() != layout.keys.len() {
            return Err(Error::shape("attention", "query/key segment counts differ"));
        }
        for (qs, ks) in layout.queries.iter().zip(&layout.keys) {
            if qs.end > nq || ks.end > nk || qs.is_empty() || ks.is_empty() {
                return Err(Error::shape("attention", format!("segment {qs:?}/{ks:?} out of range")));
            }
            if layout.causal && qs.len() != ks.len() {
                return Err(Error::shape("attention", "causal mask needs equal query/key segments"));
            }
        }
        let dh = d / layout.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let total: usize = layout
            .queries
            .iter()
            .zip(&layout.keys)
            .map(|(q, k)| q.len() * k.len() * layout.heads)
            .sum();
        let mask = (dropout > 0.0).then(|| tape.bernoulli_mask(total, dropout));
        let mut probs = vec![0.0; total];
        let mut out = vec![0.0; nq * d];
        {
            let nodes = tape.nodes.borrow();
            let (vq, vk, vv) = (&nodes[self.id].value, &nodes[keys.id].value, &nodes[values.id].value);
            let mut pos = 0;
            for (qs, ks) in layout.queries.iter().zip(&layout.keys) {
                let (ql, kl) = (qs.len(), ks.len());
                for h in 0..layout.heads {
                    let off = h * dh;
                    for i in 0..ql {
                        let qi = (qs.start + i) * d + off;
                        let lim = if layout.causal { i + 1 } else { kl };
                        let prow = &mut probs[pos + i * kl..pos + i * kl + kl];
                        let qrow = &vq[qi..qi + dh];
                        for j in 0..lim {
                            let kj = (ks.start + j) * d + off;
                            prow[j] = dot(qrow, &vk[kj..kj + dh]) * scale;
                        }
                        softmax_in_place(&mut prow[..lim]);
                        for j in 0..lim {
                            let m = mask.as_ref().map_or(1.0, |m| m[pos + i * kl + j]);
                            let w = prow[j] * m;
                            if w == 0.0 {
                                continue;
                            }
                            let vj = (ks.start + j) * d + off;
                            for c in 0..dh {
                                out[qi + c] += w * vv[vj + c];
                            }
                        }
                    }
                    pos += ql * kl;
                }
            }
        }
        let saved = AttentionSaved {
            q: self.id,
            k: keys.id,
            v: values.id,
            layout: Rc::clone(layout),
            probs,
            mask,
        };
        Ok(tape.push(nq, d, out, Op::Attention(Box::new(saved))))
    }

    /// Gaussian-weighted selection of sinusoid rows around each predicted
    /// position in `self` (`n×1`); `row_lens[r]` is the sentence length of row `r`.
    pub fn gaussian_select(self, window: &Rc<GaussianWindow>, row_lens: &[usize]) -> Result<Var<'t>> {
        let (rows, cols) = self.shape();
        if cols != 1 || row_lens.len() != rows {
            return Err(Error::shape(
                "gaussian_select",
                format!("positions {rows}x{cols} with {} lengths", row_lens.len()),
            ));
        }
        let d = window.d_model;
        let max_len = window.table.len() / d;
        if let Some(&bad) = row_lens.iter().find(|&&n| n == 0 || n > max_len) {
            return Err(Error::shape("gaussian_select", format!("length {bad} outside table of {max_len}")));
        }
        let value = self.with_value(|b| {
            let mut out = vec![0.0; rows * d];
            for (r, (&bj, &n)) in b.iter().zip(row_lens).enumerate() {
                let dst = &mut out[r * d..(r + 1) * d];
                for (s, w) in window.weights(bj, n) {
                    for (o, p) in dst.iter_mut().zip(window.row(s)) {
                        *o += w * p;
                    }
                }
            }
            out
        });
        let saved = GaussianSaved { b: self.id, window: Rc::clone(window), row_lens: row_lens.to_vec() };
        Ok(self.tape.push(rows, d, value, Op::Gaussian(Box::new(saved))))
    }
}

/// Dispatches a pointwise operation by kind.
pub fn elementwise<'t>(kind: Elementwise, operands: &[Var<'t>]) -> Result<Var<'t>> {
    let arity = match kind {
        Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
        _ => 1,
    };
    if operands.len() != arity {
        return Err(Error::Invalid(format!("{kind:?} takes {arity} operand(s), got {}", operands.len())));
    }
    let a = operands[0];
    Ok(match kind {
        Elementwise::Add => a.add(operands[1])?,
        Elementwise::Sub => a.sub(operands[1])?,
        Elementwise::Mul => a.mul(operands[1])?,
        Elementwise::Sigmoid => a.sigmoid(),
        Elementwise::Tanh => a.tanh(),
        Elementwise::Relu => a.relu(),
        Elementwise::Exp => a.exp(),
        Elementwise::Scale(c) => a.scale(c),
    })
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - mx).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Cosine similarity, defined as 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}
