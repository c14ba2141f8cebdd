//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! A [`Graph`] borrows a [`ParamStore`] immutably, records every operation
//! in creation order, and [`Graph::backward`] walks the tape in reverse.
//! Operations are coarse (linear layer, layer norm, segmented causal
//! attention, segment pooling) with hand-derived backward passes, which keeps
//! the tape short enough for CPU training.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, Mat, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Named trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Mat<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Mat::cast).collect(),
        }
    }
}

/// Per-parameter gradient accumulators; `None` means "no gradient reached".
#[derive(Clone, Debug)]
pub struct Grads<T> {
    slots: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn new(n_params: usize) -> Self {
        Self {
            slots: vec![None; n_params],
        }
    }

    pub fn from_slots(slots: Vec<Option<Mat<T>>>) -> Self {
        Self { slots }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat<T>> {
        self.slots[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn slot(&mut self, id: ParamId, shape: (usize, usize)) -> &mut Mat<T> {
        self.slots[id.0].get_or_insert_with(|| Mat::zeros(shape.0, shape.1))
    }

    pub fn merge(&mut self, other: Grads<T>) {
        for (mine, theirs) in self.slots.iter_mut().zip(other.slots) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_assign(&t),
                (None, Some(t)) => *mine = Some(t),
                _ => {}
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(Mat::sum_sq)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for m in self.slots.iter_mut().flatten() {
            m.scale(s);
        }
    }
}

/// Reduction used by [`Graph::segment_pool`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Max,
    Last,
}

/// A contiguous block of rows `[start, start + len)` forming one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }
}

enum Op<T> {
    Leaf,
    Gather {
        table: ParamId,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    SelectRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    AddPositions {
        x: NodeId,
        table: ParamId,
        positions: Vec<usize>,
    },
    Add(NodeId, NodeId),
    LayerNorm {
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        xhat: Mat<T>,
        rstd: Vec<T>,
    },
    Linear {
        x: NodeId,
        w: ParamId,
        b: ParamId,
    },
    Gelu(NodeId),
    Attention {
        qkv: NodeId,
        heads: usize,
        segments: Vec<Segment>,
        probs: Vec<Vec<T>>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<T>,
    },
    SegmentPool {
        x: NodeId,
        segments: Vec<Segment>,
        mode: Reduce,
        argmax: Vec<usize>,
    },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
}

/// Result of [`Graph::backward`].
pub struct Backward<T> {
    pub params: Grads<T>,
    nodes: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Backward<T> {
    /// Gradient w.r.t. an input leaf; intermediate gradients are not retained.
    pub fn node(&self, id: NodeId) -> Option<&Mat<T>> {
        self.nodes[id.0].as_ref()
    }
}

pub struct Graph<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

const LN_EPS: f64 = 1e-5;

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Mat<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; gradients reaching it are still reported.
    pub fn input(&mut self, value: Mat<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Rows of a parameter table, `out[r] = table[ids[r]]`.
    pub fn gather(&mut self, table: ParamId, ids: &[usize]) -> Result<NodeId> {
        let t = self.params.get(table);
        let mut out = Mat::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: t.rows(),
                });
            }
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = parts
            .first()
            .map(|p| self.value(*p).cols())
            .ok_or(Error::Empty("concat_rows"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return Err(Error::Shape(format!(
                    "concat of widths {cols} and {}",
                    v.cols()
                )));
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let out = Mat::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        let mut out = Mat::zeros(rows.len(), xv.cols());
        for (i, &r) in rows.iter().enumerate() {
            if r >= xv.rows() {
                return Err(Error::Shape(format!(
                    "row {r} of a {}-row matrix",
                    xv.rows()
                )));
            }
            out.row_mut(i).copy_from_slice(xv.row(r));
        }
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// `out[r] = x[r] + table[positions[r]]`.
    pub fn add_positions(
        &mut self,
        x: NodeId,
        table: ParamId,
        positions: &[usize],
    ) -> Result<NodeId> {
        let t = self.params.get(table);
        let xv = self.value(x);
        if positions.len() != xv.rows() || t.cols() != xv.cols() {
            return Err(Error::Shape("position table does not match input".into()));
        }
        let mut out = xv.clone();
        for (r, &p) in positions.iter().enumerate() {
            if p >= t.rows() {
                return Err(Error::LengthOverflow {
                    len: p + 1,
                    max: t.rows(),
                });
            }
            for (o, v) in out.row_mut(r).iter_mut().zip(t.row(p)) {
                *o += *v;
            }
        }
        Ok(self.push(
            out,
            Op::AddPositions {
                x,
                table,
                positions: positions.to_vec(),
            },
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "add of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Row-wise layer normalisation with learned gain (`1 x d`) and bias.
    pub fn layer_norm(&mut self, x: NodeId, gamma: ParamId, beta: ParamId) -> NodeId {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let g = self.params.get(gamma).data();
        let b = self.params.get(beta).data();
        let mut xhat = Mat::zeros(n, d);
        let mut out = Mat::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        let dn = T::from_f64(d as f64);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().fold(T::zero(), |a, v| a + *v) / dn;
            let var = row.iter().fold(T::zero(), |a, v| a + (*v - mean) * (*v - mean)) / dn;
            let rs = T::one() / (var + T::from_f64(LN_EPS)).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for c in 0..d {
                xh[c] = (row[c] - mean) * rs;
            }
            let o = out.row_mut(r);
            for c in 0..d {
                o[c] = xhat.get(r, c) * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// `x W + b` with `W: d_in x d_out`, `b: 1 x d_out`.
    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let xv = self.value(x);
        let wv = self.params.get(w);
        let bv = self.params.get(b);
        if xv.cols() != wv.rows() || bv.cols() != wv.cols() {
            return Err(Error::Shape(format!(
                "linear {:?} x {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let mut out = Mat::zeros(xv.rows(), wv.cols());
        for r in 0..out.rows() {
            out.row_mut(r).copy_from_slice(bv.data());
        }
        gemm_acc(xv, false, wv, false, &mut out, T::one());
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = gelu(*v);
        }
        self.push(out, Op::Gelu(x))
    }

    /// Inverted dropout. Identity (and no tape entry) when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, p: f64, rng: &mut R) -> NodeId {
        if p <= 0.0 {
            return x;
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.data().len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut out = xv.clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= *m;
        }
        self.push(out, Op::Dropout { x, mask })
    }

    /// Multi-head causal self-attention over a packed `[q | k | v]` matrix
    /// (`N x 3d`). Each segment attends only within itself; within a
    /// segment, row `i` attends to rows `j <= i` with `key_mask[j]` set. A
    /// row with no admissible key gets a zero output.
    pub fn causal_attention(
        &mut self,
        qkv: NodeId,
        heads: usize,
        segments: &[Segment],
        key_mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        let xv = self.value(qkv);
        let (n, three_d) = xv.shape();
        if three_d % 3 != 0 || (three_d / 3) % heads != 0 {
            return Err(Error::Shape(format!(
                "qkv width {three_d} with {heads} heads"
            )));
        }
        if let Some(m) = key_mask {
            if m.len() != n {
                return Err(Error::Shape("attention mask length".into()));
            }
        }
        let d = three_d / 3;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = Mat::zeros(n, d);
        let mut probs = Vec::with_capacity(segments.len() * heads);
        let x = xv.data();
        for seg in segments {
            let l = seg.len;
            if seg.start + l > n {
                return Err(Error::Shape("segment out of bounds".into()));
            }
            for h in 0..heads {
                let mut p = vec![T::zero(); l * l];
                if l > 0 {
                    let q = x[seg.start * three_d + h * dh..].as_ptr();
                    let k = x[seg.start * three_d + d + h * dh..].as_ptr();
                    // SAFETY: views stay within rows [start, start + l) of `x`.
                    unsafe {
                        T::gemm(
                            l,
                            dh,
                            l,
                            scale,
                            q,
                            three_d as isize,
                            1,
                            k,
                            1,
                            three_d as isize,
                            T::zero(),
                            p.as_mut_ptr(),
                            l as isize,
                            1,
                        );
                    }
                }
                for i in 0..l {
                    let row = &mut p[i * l..(i + 1) * l];
                    let allowed =
                        |j: usize| j <= i && key_mask.is_none_or(|m| m[seg.start + j]);
                    let mut max = T::neg_infinity();
                    for (j, v) in row.iter().enumerate() {
                        if allowed(j) && *v > max {
                            max = *v;
                        }
                    }
                    if max == T::neg_infinity() {
                        row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let mut sum = T::zero();
                    for (j, v) in row.iter_mut().enumerate() {
                        if allowed(j) {
                            *v = (*v - max).exp();
                            sum += *v;
                        } else {
                            *v = T::zero();
                        }
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
                if l > 0 {
                    let v = x[seg.start * three_d + 2 * d + h * dh..].as_ptr();
                    let o = out.data_mut()[seg.start * d + h * dh..].as_mut_ptr();
                    // SAFETY: output view is rows [start, start+l), columns of head h.
                    unsafe {
                        T::gemm(
                            l,
                            l,
                            dh,
                            T::one(),
                            p.as_ptr(),
                            l as isize,
                            1,
                            v,
                            three_d as isize,
                            1,
                            T::zero(),
                            o,
                            d as isize,
                            1,
                        );
                    }
                }
                probs.push(p);
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                qkv,
                heads,
                segments: segments.to_vec(),
                probs,
            },
        ))
    }

    /// One pooled row per segment.
    pub fn segment_pool(
        &mut self,
        x: NodeId,
        segments: &[Segment],
        mode: Reduce,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = Mat::zeros(segments.len(), d);
        let mut argmax = Vec::new();
        for (s, seg) in segments.iter().enumerate() {
            if seg.len == 0 {
                return Err(Error::Empty("pooling segment"));
            }
            if seg.start + seg.len > xv.rows() {
                return Err(Error::Shape("segment out of bounds".into()));
            }
            let o = out.row_mut(s);
            match mode {
                Reduce::Mean => {
                    for r in seg.start..seg.start + seg.len {
                        for (a, v) in o.iter_mut().zip(xv.row(r)) {
                            *a += *v;
                        }
                    }
                    let inv = T::one() / T::from_f64(seg.len as f64);
                    o.iter_mut().for_each(|a| *a *= inv);
                }
                Reduce::Max => {
                    for c in 0..d {
                        let mut best = seg.start;
                        for r in seg.start + 1..seg.start + seg.len {
                            if xv.get(r, c) > xv.get(best, c) {
                                best = r;
                            }
                        }
                        o[c] = xv.get(best, c);
                        argmax.push(best);
                    }
                }
                Reduce::Last => o.copy_from_slice(xv.row(seg.start + seg.len - 1)),
            }
        }
        Ok(self.push(
            out,
            Op::SegmentPool {
                x,
                segments: segments.to_vec(),
                mode,
                argmax,
            },
        ))
    }

    /// Reverse pass seeded with `d(objective)/d(node)` for each seed.
    pub fn backward(&self, seeds: Vec<(NodeId, Mat<T>)>) -> Result<Backward<T>> {
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            if g.shape() != self.value(id).shape() {
                return Err(Error::Shape("seed gradient shape".into()));
            }
            accumulate(&mut grads[id.0], g);
        }
        let mut pg = Grads::new(self.params.len());
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            // Leaf gradients stay in place for inspection.
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Gather { table, ids } => {
                    let slot = pg.slot(*table, self.params.get(*table).shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (a, v) in slot.row_mut(id).iter_mut().zip(g.row(r)) {
                            *a += *v;
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.value(*p).rows();
                        let cols = g.cols();
                        let part = Mat::from_vec(
                            rows,
                            cols,
                            g.data()[offset * cols..(offset + rows) * cols].to_vec(),
                        )?;
                        accumulate(&mut grads[p.0], part);
                        offset += rows;
                    }
                }
                Op::SelectRows { x, rows } => {
                    let (xr, xc) = self.value(*x).shape();
                    let mut gx = Mat::zeros(xr, xc);
                    for (i, &r) in rows.iter().enumerate() {
                        for (a, v) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *a += *v;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::AddPositions {
                    x,
                    table,
                    positions,
                } => {
                    let slot = pg.slot(*table, self.params.get(*table).shape());
                    for (r, &p) in positions.iter().enumerate() {
                        for (a, v) in slot.row_mut(p).iter_mut().zip(g.row(r)) {
                            *a += *v;
                        }
                    }
                    accumulate(&mut grads[x.0], g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gam = self.params.get(*gamma).data();
                    let (n, d) = g.shape();
                    {
                        let gg = pg.slot(*gamma, (1, d));
                        for r in 0..n {
                            for c in 0..d {
                                gg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                            }
                        }
                    }
                    {
                        let gb = pg.slot(*beta, (1, d));
                        for r in 0..n {
                            for (a, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *a += *v;
                            }
                        }
                    }
                    let dn = T::from_f64(d as f64);
                    let mut gx = Mat::zeros(n, d);
                    for r in 0..n {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mut mean_g = T::zero();
                        let mut mean_gx = T::zero();
                        for c in 0..d {
                            let gh = gr[c] * gam[c];
                            mean_g += gh;
                            mean_gx += gh * xr[c];
                        }
                        mean_g /= dn;
                        mean_gx /= dn;
                        let o = gx.row_mut(r);
                        for c in 0..d {
                            o[c] = rstd[r] * (gr[c] * gam[c] - mean_g - xr[c] * mean_gx);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.params.get(*w);
                    {
                        let gw = pg.slot(*w, wv.shape());
                        gemm_acc(xv, true, &g, false, gw, T::one());
                    }
                    {
                        let gb = pg.slot(*b, (1, wv.cols()));
                        for r in 0..g.rows() {
                            for (a, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *a += *v;
                            }
                        }
                    }
                    let mut gx = Mat::zeros(xv.rows(), xv.cols());
                    gemm_acc(&g, false, wv, true, &mut gx, T::zero());
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (a, v) in gx.data_mut().iter_mut().zip(xv.data()) {
                        *a *= gelu_grad(*v);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Dropout { x, mask } => {
                    let mut gx = g;
                    for (a, m) in gx.data_mut().iter_mut().zip(mask) {
                        *a *= *m;
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Attention {
                    qkv,
                    heads,
                    segments,
                    probs,
                } => {
                    let gx = attention_backward(self.value(*qkv), &g, *heads, segments, probs);
                    accumulate(&mut grads[qkv.0], gx);
                }
                Op::SegmentPool {
                    x,
                    segments,
                    mode,
                    argmax,
                } => {
                    let (xr, d) = self.value(*x).shape();
                    let mut gx = Mat::zeros(xr, d);
                    for (s, seg) in segments.iter().enumerate() {
                        let gs = g.row(s);
                        match mode {
                            Reduce::Mean => {
                                let inv = T::one() / T::from_f64(seg.len as f64);
                                for r in seg.start..seg.start + seg.len {
                                    for (a, v) in gx.row_mut(r).iter_mut().zip(gs) {
                                        *a += *v * inv;
                                    }
                                }
                            }
                            Reduce::Max => {
                                for c in 0..d {
                                    let r = argmax[s * d + c];
                                    let cur = gx.get(r, c);
                                    gx.set(r, c, cur + gs[c]);
                                }
                            }
                            Reduce::Last => {
                                let r = seg.start + seg.len - 1;
                                for (a, v) in gx.row_mut(r).iter_mut().zip(gs) {
                                    *a += *v;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
        }
        Ok(Backward { params: pg, nodes: grads })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Mat<T>>, g: Mat<T>) {
    match slot {
        Some(s) => s.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn attention_backward<T: Scalar>(
    qkv: &Mat<T>,
    g: &Mat<T>,
    heads: usize,
    segments: &[Segment],
    probs: &[Vec<T>],
) -> Mat<T> {
    let (n, three_d) = qkv.shape();
    let d = three_d / 3;
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut gx = Mat::zeros(n, three_d);
    let x = qkv.data();
    for (si, seg) in segments.iter().enumerate() {
        let l = seg.len;
        if l == 0 {
            continue;
        }
        for h in 0..heads {
            let p = &probs[si * heads + h];
            let q_off = seg.start * three_d + h * dh;
            let k_off = q_off + d;
            let v_off = q_off + 2 * d;
            let go_off = seg.start * d + h * dh;
            let mut dp = vec![T::zero(); l * l];
            // SAFETY (all gemm calls below): every view addresses rows
            // [start, start + l) and the columns of head `h` in its buffer;
            // writes go to `dp`/`gx`, which are never read through the same call.
            unsafe {
                // dP = dO V^T
                T::gemm(
                    l,
                    dh,
                    l,
                    T::one(),
                    g.data()[go_off..].as_ptr(),
                    d as isize,
                    1,
                    x[v_off..].as_ptr(),
                    1,
                    three_d as isize,
                    T::zero(),
                    dp.as_mut_ptr(),
                    l as isize,
                    1,
                );
                // dV = P^T dO
                T::gemm(
                    l,
                    l,
                    dh,
                    T::one(),
                    p.as_ptr(),
                    1,
                    l as isize,
                    g.data()[go_off..].as_ptr(),
                    d as isize,
                    1,
                    T::zero(),
                    gx.data_mut()[v_off..].as_mut_ptr(),
                    three_d as isize,
                    1,
                );
            }
            // dS = P * (dP - rowsum(P * dP)), zero where P is zero.
            for i in 0..l {
                let pr = &p[i * l..(i + 1) * l];
                let dr = &mut dp[i * l..(i + 1) * l];
                let s = pr.iter().zip(dr.iter()).fold(T::zero(), |a, (x, y)| a + *x * *y);
                for (dv, pv) in dr.iter_mut().zip(pr) {
                    *dv = *pv * (*dv - s);
                }
            }
            unsafe {
                // dQ = scale dS K
                T::gemm(
                    l,
                    l,
                    dh,
                    scale,
                    dp.as_ptr(),
                    l as isize,
                    1,
                    x[k_off..].as_ptr(),
                    three_d as isize,
                    1,
                    T::zero(),
                    gx.data_mut()[q_off..].as_mut_ptr(),
                    three_d as isize,
                    1,
                );
                // dK = scale dS^T Q
                T::gemm(
                    l,
                    l,
                    dh,
                    scale,
                    dp.as_ptr(),
                    1,
                    l as isize,
                    x[q_off..].as_ptr(),
                    three_d as isize,
                    1,
                    T::zero(),
                    gx.data_mut()[k_off..].as_mut_ptr(),
                    three_d as isize,
                    1,
                );
            }
        }
    }
    gx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::from_f64(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}
