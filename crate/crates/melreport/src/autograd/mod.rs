//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Graph`] is a tape of nodes; operations append nodes that reference
//! earlier ones, so creation order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep. The graph is generic over
//! the element type: training runs in `f32`, gradient verification casts
//! parameters to `f64` and replays the same code path.
//!
//! Shapes are `(rows, cols)`; scalars are `(1, 1)`. Softmax, layer norm and
//! attention operate over the last axis.

mod gradcheck;
mod kernels;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};

use crate::error::{Error, Result};
use kernels::{mm_nn, mm_nt, mm_tn};

/// Element type of a graph. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(u32);

impl TensorId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum OpKind {
    Leaf,
    Add(TensorId, TensorId),
    AddBias(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    ConcatRows(Vec<TensorId>),
    SliceRows(TensorId, usize, usize),
    Embedding {
        table: TensorId,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    },
    Gelu(TensorId),
    Softmax(TensorId),
    Attention {
        q: TensorId,
        k: TensorId,
        v: TensorId,
        n_heads: usize,
        causal: bool,
        key_mask: Option<Vec<bool>>,
    },
    SumAll(TensorId),
    MeanAll(TensorId),
    CrossEntropyRowMean {
        logits: TensorId,
        targets: Vec<usize>,
        valid: Vec<bool>,
    },
    ClipLoss {
        x: TensorId,
        y: TensorId,
        log_inv_tau: TensorId,
    },
}

struct Node<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: OpKind,
    /// Op-specific forward intermediates needed by backward.
    saved: Vec<Vec<F>>,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(
        &mut self,
        rows: usize,
        cols: usize,
        data: Vec<F>,
        requires_grad: bool,
        op: OpKind,
        saved: Vec<Vec<F>>,
    ) -> TensorId {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            data,
            grad: None,
            requires_grad,
            op,
            saved,
        });
        TensorId(self.nodes.len() as u32 - 1)
    }

    fn node(&self, id: TensorId) -> &Node<F> {
        &self.nodes[id.idx()]
    }

    fn requires(&self, id: TensorId) -> bool {
        self.node(id).requires_grad
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let n = self.node(id);
        (n.rows, n.cols)
    }

    pub fn data(&self, id: TensorId) -> &[F] {
        &self.node(id).data
    }

    /// Gradient of a node, if backward reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[F]> {
        self.node(id).grad.as_deref()
    }

    pub fn scalar_value(&self, id: TensorId) -> F {
        debug_assert_eq!(self.node(id).data.len(), 1);
        self.node(id).data[0]
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<F>, requires_grad: bool) -> Result<TensorId> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "leaf",
                format!("data length {} != {}x{}", data.len(), rows, cols),
            ));
        }
        Ok(self.push(rows, cols, data, requires_grad, OpKind::Leaf, Vec::new()))
    }

    pub fn leaf_from_f32(
        &mut self,
        rows: usize,
        cols: usize,
        data: &[f32],
        requires_grad: bool,
    ) -> Result<TensorId> {
        let cast = data.iter().map(|&v| F::from_f64(v as f64)).collect();
        self.leaf(rows, cols, cast, requires_grad)
    }

    pub fn scalar_leaf(&mut self, value: F, requires_grad: bool) -> TensorId {
        self.push(1, 1, vec![value], requires_grad, OpKind::Leaf, Vec::new())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if (ar, ac) != (br, bc) {
            return Err(Error::shape("add", format!("{ar}x{ac} vs {br}x{bc}")));
        }
        let data = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(ar, ac, data, rg, OpKind::Add(a, b), Vec::new()))
    }

    /// `(r, c) + (1, c)` with the bias broadcast over rows.
    pub fn add_bias(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if br != 1 || bc != ac {
            return Err(Error::shape(
                "add_bias",
                format!("bias {br}x{bc} does not broadcast over {ar}x{ac}"),
            ));
        }
        let bias = &self.node(b).data;
        let mut data = Vec::with_capacity(ar * ac);
        for row in self.node(a).data.chunks(ac) {
            for (x, y) in row.iter().zip(bias.iter()) {
                data.push(*x + *y);
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(ar, ac, data, rg, OpKind::AddBias(a, b), Vec::new()))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if (ar, ac) != (br, bc) {
            return Err(Error::shape("mul", format!("{ar}x{ac} vs {br}x{bc}")));
        }
        let data = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(ar, ac, data, rg, OpKind::Mul(a, b), Vec::new()))
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> Result<TensorId> {
        let (ar, ac) = self.shape(a);
        let f = F::from_f64(factor);
        let data = self.node(a).data.iter().map(|&x| x * f).collect();
        let rg = self.requires(a);
        Ok(self.push(ar, ac, data, rg, OpKind::Scale(a, factor), Vec::new()))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {m}x{ka} vs {kb}x{n}"),
            ));
        }
        let data = mm_nn(&self.node(a).data, &self.node(b).data, m, ka, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(m, n, data, rg, OpKind::Matmul(a, b), Vec::new()))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        let src = &self.node(a).data;
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.requires(a);
        Ok(self.push(c, r, data, rg, OpKind::Transpose(a), Vec::new()))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs".to_string()));
        }
        let (_, cols) = self.shape(parts[0]);
        let mut rows = 0;
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column mismatch: {pc} vs {cols}"),
                ));
            }
            rows += pr;
            data.extend_from_slice(&self.node(p).data);
            rg |= self.requires(p);
        }
        Ok(self.push(rows, cols, data, rg, OpKind::ConcatRows(parts.to_vec()), Vec::new()))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} out of 0..{r}", start + len),
            ));
        }
        let data = self.node(a).data[start * c..(start + len) * c].to_vec();
        let rg = self.requires(a);
        Ok(self.push(len, c, data, rg, OpKind::SliceRows(a, start, len), Vec::new()))
    }

    /// Row lookup: `out[t] = table[ids[t]]`.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (v, d) = self.shape(table);
        for &id in ids {
            if id >= v {
                return Err(Error::Contract(format!(
                    "embedding id {id} out of range for table with {v} rows"
                )));
            }
        }
        let src = &self.node(table).data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.requires(table);
        Ok(self.push(
            ids.len(),
            d,
            data,
            rg,
            OpKind::Embedding {
                table,
                ids: ids.to_vec(),
            },
            Vec::new(),
        ))
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (r, c) = self.shape(x);
        let (gr, gc) = self.shape(gamma);
        let (br, bc) = self.shape(beta);
        if gr != 1 || gc != c || br != 1 || bc != c {
            return Err(Error::shape(
                "layer_norm",
                format!("affine params must be 1x{c}, got {gr}x{gc} and {br}x{bc}"),
            ));
        }
        let epsf = F::from_f64(eps);
        let nc = F::from_f64(c as f64);
        let xd = &self.node(x).data;
        let g = &self.node(gamma).data;
        let b = &self.node(beta).data;
        let mut data = Vec::with_capacity(r * c);
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        for row in xd.chunks(c) {
            let mean = row.iter().fold(F::zero(), |s, &v| s + v) / nc;
            let var = row
                .iter()
                .fold(F::zero(), |s, &v| s + (v - mean) * (v - mean))
                / nc;
            let inv = (var + epsf).sqrt().recip();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * inv;
                xhat.push(xh);
                data.push(g[j] * xh + b[j]);
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            r,
            c,
            data,
            rg,
            OpKind::LayerNorm { x, gamma, beta, eps },
            vec![xhat, inv_std],
        ))
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        let data = self.node(a).data.iter().map(|&x| gelu_val(x)).collect();
        let rg = self.requires(a);
        Ok(self.push(r, c, data, rg, OpKind::Gelu(a), Vec::new()))
    }

    /// Numerically stable row-wise softmax.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if c == 0 {
            return Err(Error::shape("softmax", "empty rows".to_string()));
        }
        let src = &self.node(a).data;
        let mut data = Vec::with_capacity(r * c);
        for row in src.chunks(c) {
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            let base = data.len();
            for &v in row {
                let e = (v - max).exp();
                data.push(e);
                sum = sum + e;
            }
            for v in &mut data[base..] {
                *v = *v / sum;
            }
        }
        let rg = self.requires(a);
        Ok(self.push(r, c, data, rg, OpKind::Softmax(a), Vec::new()))
    }

    /// Multi-head scaled dot-product attention on already-projected inputs.
    ///
    /// `q` is `(Tq, H*hd)`, `k` and `v` are `(Tk, H*hd)`; heads are column
    /// blocks. With `causal`, query `i` attends to keys `0..=i` only (the
    /// masked scores are never computed, so causality is bit-exact).
    /// `key_mask[j] == false` removes key `j` for every query.
    pub fn attention(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        n_heads: usize,
        causal: bool,
        key_mask: Option<&[bool]>,
    ) -> Result<TensorId> {
        let (tq, dq) = self.shape(q);
        let (tk, dk) = self.shape(k);
        let (tv, dv) = self.shape(v);
        if dq != dk || dq != dv {
            return Err(Error::shape(
                "attention",
                format!("q/k/v widths differ: {dq}/{dk}/{dv}"),
            ));
        }
        if tk != tv {
            return Err(Error::shape(
                "attention",
                format!("k has {tk} rows but v has {tv}"),
            ));
        }
        if n_heads == 0 || dq % n_heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("width {dq} not divisible into {n_heads} heads"),
            ));
        }
        if causal && tq != tk {
            return Err(Error::Contract(format!(
                "causal attention requires square scores, got Tq={tq} Tk={tk}"
            )));
        }
        if let Some(m) = key_mask {
            if m.len() != tk {
                return Err(Error::shape(
                    "attention",
                    format!("key mask length {} != Tk {tk}", m.len()),
                ));
            }
        }
        let hd = dq / n_heads;
        let scale = F::from_f64(1.0 / (hd as f64).sqrt());

        let qd = &self.node(q).data;
        let kd = &self.node(k).data;
        let vd = &self.node(v).data;

        let mut out = vec![F::zero(); tq * dq];
        // Attention probabilities per head, flattened (n_heads * tq * tk);
        // masked entries stay zero.
        let mut probs = vec![F::zero(); n_heads * tq * tk];

        let mut qh = vec![F::zero(); tq * hd];
        let mut kh = vec![F::zero(); tk * hd];
        let mut vh = vec![F::zero(); tk * hd];
        for h in 0..n_heads {
            let off = h * hd;
            copy_head(qd, &mut qh, tq, dq, off, hd);
            copy_head(kd, &mut kh, tk, dk, off, hd);
            copy_head(vd, &mut vh, tk, dv, off, hd);
            for i in 0..tq {
                let limit = if causal { i + 1 } else { tk };
                let p_row = &mut probs[h * tq * tk + i * tk..h * tq * tk + i * tk + tk];
                // Scores over allowed keys, stabilized by max subtraction.
                let mut max = F::neg_infinity();
                let mut any = false;
                for j in 0..limit {
                    if key_mask.map_or(true, |m| m[j]) {
                        let mut s = F::zero();
                        for e in 0..hd {
                            s = s + qh[i * hd + e] * kh[j * hd + e];
                        }
                        s = s * scale;
                        p_row[j] = s;
                        if s > max {
                            max = s;
                        }
                        any = true;
                    }
                }
                if !any {
                    return Err(Error::Contract(format!(
                        "attention query {i} has no attendable keys"
                    )));
                }
                let mut sum = F::zero();
                for j in 0..limit {
                    if key_mask.map_or(true, |m| m[j]) {
                        let e = (p_row[j] - max).exp();
                        p_row[j] = e;
                        sum = sum + e;
                    } else {
                        p_row[j] = F::zero();
                    }
                }
                for j in 0..limit {
                    p_row[j] = p_row[j] / sum;
                }
                // Weighted value sum into the head's output columns.
                let orow = &mut out[i * dq + off..i * dq + off + hd];
                for j in 0..limit {
                    let p = p_row[j];
                    if p != F::zero() {
                        for e in 0..hd {
                            orow[e] = orow[e] + p * vh[j * hd + e];
                        }
                    }
                }
            }
        }
        let rg = self.requires(q) || self.requires(k) || self.requires(v);
        Ok(self.push(
            tq,
            dq,
            out,
            rg,
            OpKind::Attention {
                q,
                k,
                v,
                n_heads,
                causal,
                key_mask: key_mask.map(|m| m.to_vec()),
            },
            vec![probs],
        ))
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.node(a).data.iter().fold(F::zero(), |acc, &v| acc + v);
        let rg = self.requires(a);
        Ok(self.push(1, 1, vec![s], rg, OpKind::SumAll(a), Vec::new()))
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.node(a).data.len();
        if n == 0 {
            return Err(Error::shape("mean_all", "empty tensor".to_string()));
        }
        let s = self.node(a).data.iter().fold(F::zero(), |acc, &v| acc + v)
            / F::from_f64(n as f64);
        let rg = self.requires(a);
        Ok(self.push(1, 1, vec![s], rg, OpKind::MeanAll(a), Vec::new()))
    }

    /// Mean token negative log-likelihood over valid positions of one
    /// sequence: `(1/T_valid) * sum_t -log softmax(logits[t])[targets[t]]`.
    pub fn cross_entropy_row_mean(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        valid: &[bool],
    ) -> Result<TensorId> {
        let (t, vsz) = self.shape(logits);
        if targets.len() != t || valid.len() != t {
            return Err(Error::shape(
                "cross_entropy_row_mean",
                format!("targets/mask length {} vs {t} rows", targets.len()),
            ));
        }
        let n_valid = valid.iter().filter(|&&b| b).count();
        if n_valid == 0 {
            return Err(Error::Contract(
                "cross_entropy_row_mean: all positions masked".to_string(),
            ));
        }
        for (i, &tg) in targets.iter().enumerate() {
            if valid[i] && tg >= vsz {
                return Err(Error::Contract(format!(
                    "target id {tg} out of range for vocab {vsz}"
                )));
            }
        }
        let src = &self.node(logits).data;
        let mut probs = vec![F::zero(); t * vsz];
        let mut loss = F::zero();
        for i in 0..t {
            if !valid[i] {
                continue;
            }
            let row = &src[i * vsz..(i + 1) * vsz];
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[i * vsz + j] = e;
                sum = sum + e;
            }
            for j in 0..vsz {
                probs[i * vsz + j] = probs[i * vsz + j] / sum;
            }
            loss = loss - probs[i * vsz + targets[i]].ln();
        }
        loss = loss / F::from_f64(n_valid as f64);
        let rg = self.requires(logits);
        Ok(self.push(
            1,
            1,
            vec![loss],
            rg,
            OpKind::CrossEntropyRowMean {
                logits,
                targets: targets.to_vec(),
                valid: valid.to_vec(),
            },
            vec![probs],
        ))
    }

    /// Symmetric InfoNCE over matched rows of `x` and `y`.
    ///
    /// Rows are L2-normalized inside the op; similarities are scaled by
    /// `exp(log_inv_tau) = 1/tau`. Returns the mean of the image-to-text and
    /// text-to-image cross-entropies of the diagonal.
    pub fn clip_loss(
        &mut self,
        x: TensorId,
        y: TensorId,
        log_inv_tau: TensorId,
    ) -> Result<TensorId> {
        let (n, d) = self.shape(x);
        let (ny, dy) = self.shape(y);
        if (n, d) != (ny, dy) {
            return Err(Error::shape("clip_loss", format!("{n}x{d} vs {ny}x{dy}")));
        }
        if n < 2 {
            return Err(Error::Contract(format!(
                "clip_loss requires at least 2 pairs, got {n}"
            )));
        }
        let (sr, sc) = self.shape(log_inv_tau);
        if (sr, sc) != (1, 1) {
            return Err(Error::shape("clip_loss", "temperature must be scalar".to_string()));
        }

        let normalize = |src: &[F]| -> Result<(Vec<F>, Vec<F>)> {
            let mut out = vec![F::zero(); n * d];
            let mut inv = vec![F::zero(); n];
            for i in 0..n {
                let row = &src[i * d..(i + 1) * d];
                let norm = row.iter().fold(F::zero(), |s, &v| s + v * v).sqrt();
                if norm.to_f64() < 1e-12 {
                    return Err(Error::Contract(format!(
                        "clip_loss: cannot L2-normalize zero-norm row {i}"
                    )));
                }
                let r = norm.recip();
                inv[i] = r;
                for j in 0..d {
                    out[i * d + j] = row[j] * r;
                }
            }
            Ok((out, inv))
        };
        let (xn, x_inv) = normalize(&self.node(x).data)?;
        let (yn, y_inv) = normalize(&self.node(y).data)?;
        let a = self.node(log_inv_tau).data[0].exp();

        // S = (1/tau) * Xn Yn^T
        let mut s = mm_nt(&xn, &yn, n, d, n);
        for v in &mut s {
            *v = *v * a;
        }
        let p_rows = row_softmax(&s, n, n);
        let st = transpose_vec(&s, n, n);
        let p_cols = row_softmax(&st, n, n);

        let mut loss = F::zero();
        for i in 0..n {
            loss = loss - p_rows[i * n + i].ln() - p_cols[i * n + i].ln();
        }
        loss = loss / F::from_f64(n as f64);

        let rg = self.requires(x) || self.requires(y) || self.requires(log_inv_tau);
        Ok(self.push(
            1,
            1,
            vec![loss],
            rg,
            OpKind::ClipLoss { x, y, log_inv_tau },
            vec![xn, yn, x_inv, y_inv, s, p_rows, p_cols],
        ))
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let n = self.node(loss);
        if n.rows * n.cols != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got {}x{}",
                n.rows, n.cols
            )));
        }
        self.backward_seeded(&[(loss, vec![F::one()])])
    }

    /// Reverse sweep seeding several nodes with explicit output gradients.
    /// Used to chain gradients across graphs (e.g. a contrastive coupling
    /// graph feeding per-case graphs).
    pub fn backward_seeded(&mut self, seeds: &[(TensorId, Vec<F>)]) -> Result<()> {
        for node in &mut self.nodes {
            node.grad = None;
        }
        for (id, seed) in seeds {
            let node = &mut self.nodes[id.idx()];
            if seed.len() != node.data.len() {
                return Err(Error::shape(
                    "backward_seeded",
                    format!("seed length {} vs tensor {}", seed.len(), node.data.len()),
                ));
            }
            match &mut node.grad {
                Some(g) => {
                    for (gv, sv) in g.iter_mut().zip(seed) {
                        *gv = *gv + *sv;
                    }
                }
                None => node.grad = Some(seed.clone()),
            }
        }
        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() || matches!(self.nodes[i].op, OpKind::Leaf) {
                continue;
            }
            let g = self.nodes[i].grad.take().expect("checked above");
            let contributions = self.input_grads(i, &g)?;
            for (id, contrib) in contributions {
                self.accumulate(id, contrib);
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, contrib: Vec<F>) {
        let node = &mut self.nodes[id.idx()];
        match &mut node.grad {
            Some(g) => {
                for (gv, cv) in g.iter_mut().zip(&contrib) {
                    *gv = *gv + *cv;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    /// Gradient contributions of node `i` (with upstream gradient `g`) to
    /// each of its inputs that requires grad.
    fn input_grads(&self, i: usize, g: &[F]) -> Result<Vec<(TensorId, Vec<F>)>> {
        let node = &self.nodes[i];
        let mut out: Vec<(TensorId, Vec<F>)> = Vec::new();
        match &node.op {
            OpKind::Leaf => {}
            OpKind::Add(a, b) => {
                if self.requires(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.requires(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            OpKind::AddBias(a, b) => {
                if self.requires(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.requires(*b) {
                    let c = node.cols;
                    let mut db = vec![F::zero(); c];
                    for row in g.chunks(c) {
                        for (j, &v) in row.iter().enumerate() {
                            db[j] = db[j] + v;
                        }
                    }
                    out.push((*b, db));
                }
            }
            OpKind::Mul(a, b) => {
                if self.requires(*a) {
                    let bd = &self.node(*b).data;
                    out.push((*a, g.iter().zip(bd).map(|(&gv, &bv)| gv * bv).collect()));
                }
                if self.requires(*b) {
                    let ad = &self.node(*a).data;
                    out.push((*b, g.iter().zip(ad).map(|(&gv, &av)| gv * av).collect()));
                }
            }
            OpKind::Scale(a, f) => {
                if self.requires(*a) {
                    let fv = F::from_f64(*f);
                    out.push((*a, g.iter().map(|&v| v * fv).collect()));
                }
            }
            OpKind::Matmul(a, b) => {
                let (m, k) = self.shape(*a);
                let (_, n) = self.shape(*b);
                if self.requires(*a) {
                    out.push((*a, mm_nt(g, &self.node(*b).data, m, n, k)));
                }
                if self.requires(*b) {
                    out.push((*b, mm_tn(&self.node(*a).data, g, m, k, n)));
                }
            }
            OpKind::Transpose(a) => {
                if self.requires(*a) {
                    let (r, c) = (node.rows, node.cols); // transposed shape
                    let mut da = vec![F::zero(); r * c];
                    for i2 in 0..r {
                        for j in 0..c {
                            da[j * r + i2] = g[i2 * c + j];
                        }
                    }
                    out.push((*a, da));
                }
            }
            OpKind::ConcatRows(parts) => {
                let c = node.cols;
                let mut offset = 0;
                for &p in parts {
                    let (pr, _) = self.shape(p);
                    if self.requires(p) {
                        out.push((p, g[offset * c..(offset + pr) * c].to_vec()));
                    }
                    offset += pr;
                }
            }
            OpKind::SliceRows(a, start, len) => {
                if self.requires(*a) {
                    let (r, c) = self.shape(*a);
                    let mut da = vec![F::zero(); r * c];
                    da[start * c..(start + len) * c].copy_from_slice(g);
                    out.push((*a, da));
                }
            }
            OpKind::Embedding { table, ids } => {
                if self.requires(*table) {
                    let (v, d) = self.shape(*table);
                    let mut dt = vec![F::zero(); v * d];
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] = dt[id * d + j] + g[t * d + j];
                        }
                    }
                    out.push((*table, dt));
                }
            }
            OpKind::LayerNorm { x, gamma, beta, .. } => {
                let (r, c) = self.shape(*x);
                let xhat = &node.saved[0];
                let inv_std = &node.saved[1];
                let gd = &self.node(*gamma).data;
                if self.requires(*gamma) {
                    let mut dg = vec![F::zero(); c];
                    for i2 in 0..r {
                        for j in 0..c {
                            dg[j] = dg[j] + g[i2 * c + j] * xhat[i2 * c + j];
                        }
                    }
                    out.push((*gamma, dg));
                }
                if self.requires(*beta) {
                    let mut db = vec![F::zero(); c];
                    for row in g.chunks(c) {
                        for (j, &v) in row.iter().enumerate() {
                            db[j] = db[j] + v;
                        }
                    }
                    out.push((*beta, db));
                }
                if self.requires(*x) {
                    let nc = F::from_f64(c as f64);
                    let mut dx = vec![F::zero(); r * c];
                    for i2 in 0..r {
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..c {
                            let dxh = g[i2 * c + j] * gd[j];
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xhat[i2 * c + j];
                        }
                        m1 = m1 / nc;
                        m2 = m2 / nc;
                        for j in 0..c {
                            let dxh = g[i2 * c + j] * gd[j];
                            dx[i2 * c + j] =
                                inv_std[i2] * (dxh - m1 - xhat[i2 * c + j] * m2);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            OpKind::Gelu(a) => {
                if self.requires(*a) {
                    let ad = &self.node(*a).data;
                    out.push((
                        *a,
                        g.iter()
                            .zip(ad)
                            .map(|(&gv, &x)| gv * gelu_grad(x))
                            .collect(),
                    ));
                }
            }
            OpKind::Softmax(a) => {
                if self.requires(*a) {
                    let (r, c) = self.shape(*a);
                    let y = &node.data;
                    let mut dx = vec![F::zero(); r * c];
                    for i2 in 0..r {
                        let mut dot = F::zero();
                        for j in 0..c {
                            dot = dot + g[i2 * c + j] * y[i2 * c + j];
                        }
                        for j in 0..c {
                            dx[i2 * c + j] = y[i2 * c + j] * (g[i2 * c + j] - dot);
                        }
                    }
                    out.push((*a, dx));
                }
            }
            OpKind::Attention {
                q,
                k,
                v,
                n_heads,
                causal,
                ..
            } => {
                let (tq, dq) = self.shape(*q);
                let (tk, _) = self.shape(*k);
                let hd = dq / n_heads;
                let scale = F::from_f64(1.0 / (hd as f64).sqrt());
                let probs = &node.saved[0];
                let qd = &self.node(*q).data;
                let kd = &self.node(*k).data;
                let vd = &self.node(*v).data;
                let need_q = self.requires(*q);
                let need_k = self.requires(*k);
                let need_v = self.requires(*v);
                let mut dq_full = vec![F::zero(); tq * dq];
                let mut dk_full = vec![F::zero(); tk * dq];
                let mut dv_full = vec![F::zero(); tk * dq];
                let mut qh = vec![F::zero(); tq * hd];
                let mut kh = vec![F::zero(); tk * hd];
                let mut vh = vec![F::zero(); tk * hd];
                let mut goh = vec![F::zero(); tq * hd];
                for h in 0..*n_heads {
                    let off = h * hd;
                    copy_head(qd, &mut qh, tq, dq, off, hd);
                    copy_head(kd, &mut kh, tk, dq, off, hd);
                    copy_head(vd, &mut vh, tk, dq, off, hd);
                    copy_head(g, &mut goh, tq, dq, off, hd);
                    let p = &probs[h * tq * tk..(h + 1) * tq * tk];
                    if need_v {
                        let dvh = mm_tn(p, &goh, tq, tk, hd);
                        add_head(&mut dv_full, &dvh, tk, dq, off, hd);
                    }
                    if need_q || need_k {
                        // dP = dO V^T, then dS = P .* (dP - rowsum(dP .* P))
                        let dp = mm_nt(&goh, &vh, tq, hd, tk);
                        let mut ds = vec![F::zero(); tq * tk];
                        for i2 in 0..tq {
                            let limit = if *causal { i2 + 1 } else { tk };
                            let mut dot = F::zero();
                            for j in 0..limit {
                                dot = dot + dp[i2 * tk + j] * p[i2 * tk + j];
                            }
                            for j in 0..limit {
                                ds[i2 * tk + j] =
                                    p[i2 * tk + j] * (dp[i2 * tk + j] - dot) * scale;
                            }
                        }
                        if need_q {
                            let dqh = mm_nn(&ds, &kh, tq, tk, hd);
                            add_head(&mut dq_full, &dqh, tq, dq, off, hd);
                        }
                        if need_k {
                            let dkh = mm_tn(&ds, &qh, tq, tk, hd);
                            add_head(&mut dk_full, &dkh, tk, dq, off, hd);
                        }
                    }
                }
                if need_q {
                    out.push((*q, dq_full));
                }
                if need_k {
                    out.push((*k, dk_full));
                }
                if need_v {
                    out.push((*v, dv_full));
                }
            }
            OpKind::SumAll(a) => {
                if self.requires(*a) {
                    let n = self.node(*a).data.len();
                    out.push((*a, vec![g[0]; n]));
                }
            }
            OpKind::MeanAll(a) => {
                if self.requires(*a) {
                    let n = self.node(*a).data.len();
                    let v = g[0] / F::from_f64(n as f64);
                    out.push((*a, vec![v; n]));
                }
            }
            OpKind::CrossEntropyRowMean {
                logits,
                targets,
                valid,
            } => {
                if self.requires(*logits) {
                    let (t, vsz) = self.shape(*logits);
                    let probs = &node.saved[0];
                    let n_valid = valid.iter().filter(|&&b| b).count();
                    let w = g[0] / F::from_f64(n_valid as f64);
                    let mut dl = vec![F::zero(); t * vsz];
                    for i2 in 0..t {
                        if !valid[i2] {
                            continue;
                        }
                        for j in 0..vsz {
                            let mut p = probs[i2 * vsz + j];
                            if j == targets[i2] {
                                p = p - F::one();
                            }
                            dl[i2 * vsz + j] = w * p;
                        }
                    }
                    out.push((*logits, dl));
                }
            }
            OpKind::ClipLoss { x, y, log_inv_tau } => {
                let (n, d) = self.shape(*x);
                let xn = &node.saved[0];
                let yn = &node.saved[1];
                let x_inv = &node.saved[2];
                let y_inv = &node.saved[3];
                let s = &node.saved[4];
                let p_rows = &node.saved[5];
                let p_cols = &node.saved[6];
                let a = self.node(*log_inv_tau).data[0].exp();
                let w = g[0] / F::from_f64(n as f64);
                // G = (g/N) * (P_rows + P_cols^T - 2 I)
                let mut gs = vec![F::zero(); n * n];
                for i2 in 0..n {
                    for j in 0..n {
                        let mut v = p_rows[i2 * n + j] + p_cols[j * n + i2];
                        if i2 == j {
                            v = v - F::from_f64(2.0);
                        }
                        gs[i2 * n + j] = w * v;
                    }
                }
                if self.requires(*log_inv_tau) {
                    let mut ds = F::zero();
                    for i2 in 0..n * n {
                        ds = ds + gs[i2] * s[i2];
                    }
                    out.push((*log_inv_tau, vec![ds]));
                }
                let unnormalize = |dn: &[F], nrm: &[F], inv: &[F]| -> Vec<F> {
                    let mut dx = vec![F::zero(); n * d];
                    for i2 in 0..n {
                        let mut dot = F::zero();
                        for j in 0..d {
                            dot = dot + dn[i2 * d + j] * nrm[i2 * d + j];
                        }
                        for j in 0..d {
                            dx[i2 * d + j] =
                                (dn[i2 * d + j] - dot * nrm[i2 * d + j]) * inv[i2];
                        }
                    }
                    dx
                };
                if self.requires(*x) {
                    let mut dxn = mm_nn(&gs, yn, n, n, d);
                    for v in &mut dxn {
                        *v = *v * a;
                    }
                    out.push((*x, unnormalize(&dxn, xn, x_inv)));
                }
                if self.requires(*y) {
                    let mut dyn_ = mm_tn(&gs, xn, n, n, d);
                    for v in &mut dyn_ {
                        *v = *v * a;
                    }
                    out.push((*y, unnormalize(&dyn_, yn, y_inv)));
                }
            }
        }
        Ok(out)
    }
}

fn copy_head<F: Scalar>(src: &[F], dst: &mut [F], rows: usize, width: usize, off: usize, hd: usize) {
    for i in 0..rows {
        dst[i * hd..(i + 1) * hd].copy_from_slice(&src[i * width + off..i * width + off + hd]);
    }
}

fn add_head<F: Scalar>(dst: &mut [F], src: &[F], rows: usize, width: usize, off: usize, hd: usize) {
    for i in 0..rows {
        for e in 0..hd {
            dst[i * width + off + e] = dst[i * width + off + e] + src[i * hd + e];
        }
    }
}

fn row_softmax<F: Scalar>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out[i * cols + j] = e;
            sum = sum + e;
        }
        for j in 0..cols {
            out[i * cols + j] = out[i * cols + j] / sum;
        }
    }
    out
}

fn transpose_vec<F: Scalar>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

// tanh approximation of GELU (GPT-2 / BioGPT convention)
fn gelu_val<F: Scalar>(x: F) -> F {
    let c = F::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::from_f64(0.7978845608028654);
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

#[cfg(test)]
mod tests;
