//! Reverse-mode automatic differentiation over a flat op tape.
//!
//! Ops execute eagerly and record just enough to replay the chain rule
//! backwards. Values are `Rc<Tensor>` so parameter leaves alias the model's
//! storage instead of copying it for every forward pass. One tape is built
//! per forward computation and discarded after `backward`.

use std::rc::Rc;

use super::tensor::Tensor;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

/// Dropout keep-mask stored as a bitset (bit set = element kept).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropoutMask {
    bits: Vec<u64>,
    len: usize,
}

impl DropoutMask {
    /// Samples a mask of `len` elements with keep probability `1 - rate`.
    pub fn sample(len: usize, rate: f64, rng: &mut impl rand::Rng) -> Self {
        let mut bits = vec![0u64; len.div_ceil(64)];
        for i in 0..len {
            if rng.random::<f64>() >= rate {
                bits[i / 64] |= 1 << (i % 64);
            }
        }
        Self { bits, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn keep(&self, i: usize) -> bool {
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn words(&self) -> &[u64] {
        &self.bits
    }

    pub fn from_words(len: usize, bits: Vec<u64>) -> Self {
        assert_eq!(bits.len(), len.div_ceil(64));
        Self { bits, len }
    }
}

enum Op {
    Leaf,
    /// `a [n,k] * b [k,m]`.
    Matmul(VarId, VarId),
    /// `x [n,m] + bias [1,m]` broadcast over rows.
    AddBias(VarId, VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Relu(VarId),
    /// Row-wise layer norm with learned gain/bias `[1,m]`.
    LayerNorm { x: VarId, gain: VarId, bias: VarId },
    /// Inverted dropout; one mask per stacked graph section of `x`.
    Dropout { x: VarId, masks: Rc<Vec<DropoutMask>>, scale: f64 },
    /// `out[i] = x[idx[i]]` (whole rows).
    GatherRows { x: VarId, idx: Rc<Vec<usize>> },
    /// `out[j] = sum over i with idx[i] = j of x[i]`.
    ScatterAddRows { x: VarId, idx: Rc<Vec<usize>> },
    ConcatRows(VarId, VarId),
    ConcatCols(VarId, VarId),
    /// Per-row, per-head chunk dot product: `[r, h*d] x [r, h*d] -> [r, h]`.
    RowDotHeads { a: VarId, b: VarId, heads: usize },
    /// Per-arc attention scores without materializing gathered rows:
    /// `out[e, h] = sum_j q[dst_e, h*d+j] * k[src_e, h*d+j]`.
    EdgeScores {
        q: VarId,
        k: VarId,
        src: Rc<Vec<usize>>,
        dst: Rc<Vec<usize>>,
        heads: usize,
    },
    /// Fused gather-scale-scatter:
    /// `out[dst_e, h*d+j] += alpha[e, h] * v[src_e, h*d+j]`.
    AttentionAggregate {
        v: VarId,
        alpha: VarId,
        src: Rc<Vec<usize>>,
        dst: Rc<Vec<usize>>,
    },
    /// `out[dst_e] += x[src_e]` (whole rows).
    NeighborSum {
        x: VarId,
        src: Rc<Vec<usize>>,
        dst: Rc<Vec<usize>>,
    },
    /// Contiguous row range view.
    SliceRows { x: VarId, start: usize },
    /// Softmax over rows sharing a segment id, independently per column.
    SegmentSoftmax { x: VarId, seg: Rc<Vec<usize>>, n_seg: usize },
    /// Scale row `i`, head-chunk `h` of `v [r, h*d]` by `w[i, h]`.
    ScaleRowsPerHead { v: VarId, w: VarId },
    /// Log-softmax over the valid entries of each segment of a column
    /// vector; invalid entries come out as -inf and carry no gradient.
    MaskedLogSoftmax {
        x: VarId,
        mask: Rc<Vec<bool>>,
        seg: Rc<Vec<usize>>,
        n_seg: usize,
    },
    /// Per-segment entropy `-sum p*log p` over valid entries of a log-prob
    /// column vector.
    Entropy {
        logp: VarId,
        mask: Rc<Vec<bool>>,
        seg: Rc<Vec<usize>>,
    },
    /// `out[i] = x[idx[i]]` on a column vector.
    GatherElems { x: VarId, idx: Rc<Vec<usize>> },
    Exp(VarId),
    Clamp { x: VarId, lo: f64, hi: f64 },
    Min(VarId, VarId),
    Max(VarId, VarId),
    Square(VarId),
    Scale { x: VarId, k: f64 },
    MeanAll(VarId),
    SumAll(VarId),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if it received one.
    pub fn grad(&self, v: VarId) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        self.push_shared(Rc::new(value), op)
    }

    fn push_shared(&mut self, value: Rc<Tensor>, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf)
    }

    /// Leaf aliasing existing storage (no copy); used for model parameters.
    pub fn leaf_shared(&mut self, value: Rc<Tensor>) -> VarId {
        self.push_shared(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let value = self.value(a).matmul_nn(self.value(b));
        self.push(value, Op::Matmul(a, b))
    }

    pub fn add_bias(&mut self, x: VarId, bias: VarId) -> VarId {
        let (xv, bv) = (self.value(x), self.value(bias));
        assert_eq!(bv.rows(), 1);
        assert_eq!(bv.cols(), xv.cols());
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let row = &mut out.data_mut()[r * bv.cols()..(r + 1) * bv.cols()];
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddBias(x, bias))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId) -> VarId {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        assert_eq!(self.value(gain).shape(), (1, cols));
        assert_eq!(self.value(bias).shape(), (1, cols));
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let (mean, rstd) = row_norm_stats(row);
            let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
            for c in 0..cols {
                let xhat = (row[c] - mean) * rstd;
                dst[c] = xhat * self.nodes[gain.0].value.data()[c]
                    + self.nodes[bias.0].value.data()[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias })
    }

    pub fn dropout(&mut self, x: VarId, masks: Rc<Vec<DropoutMask>>, rate: f64) -> VarId {
        let xv = self.value(x);
        let per: usize = masks.iter().map(DropoutMask::len).sum();
        assert_eq!(per, xv.len(), "dropout masks must cover the tensor");
        let scale = 1.0 / (1.0 - rate);
        let mut out = xv.clone();
        apply_masks(out.data_mut(), &masks, scale);
        self.push(out, Op::Dropout { x, masks, scale })
    }

    pub fn gather_rows(&mut self, x: VarId, idx: Rc<Vec<usize>>) -> VarId {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = Tensor::zeros(idx.len(), cols);
        for (r, &src) in idx.iter().enumerate() {
            out.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(xv.row(src));
        }
        self.push(out, Op::GatherRows { x, idx })
    }

    pub fn scatter_add_rows(&mut self, x: VarId, idx: Rc<Vec<usize>>, n_out: usize) -> VarId {
        let xv = self.value(x);
        assert_eq!(xv.rows(), idx.len());
        let cols = xv.cols();
        let mut out = Tensor::zeros(n_out, cols);
        for (r, &dst) in idx.iter().enumerate() {
            let src = xv.row(r);
            let d = &mut out.data_mut()[dst * cols..(dst + 1) * cols];
            for (o, v) in d.iter_mut().zip(src) {
                *o += v;
            }
        }
        self.push(out, Op::ScatterAddRows { x, idx })
    }

    pub fn concat_rows(&mut self, a: VarId, b: VarId) -> VarId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let value = Tensor::from_vec(av.rows() + bv.rows(), av.cols(), data);
        self.push(value, Op::ConcatRows(a, b))
    }

    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> VarId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows());
        let cols = av.cols() + bv.cols();
        let mut out = Tensor::zeros(av.rows(), cols);
        for r in 0..av.rows() {
            let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
            dst[..av.cols()].copy_from_slice(av.row(r));
            dst[av.cols()..].copy_from_slice(bv.row(r));
        }
        self.push(out, Op::ConcatCols(a, b))
    }

    pub fn row_dot_heads(&mut self, a: VarId, b: VarId, heads: usize) -> VarId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        assert_eq!(av.cols() % heads, 0);
        let d = av.cols() / heads;
        let mut out = Tensor::zeros(av.rows(), heads);
        for r in 0..av.rows() {
            let (ra, rb) = (av.row(r), bv.row(r));
            for h in 0..heads {
                let dot: f64 = (h * d..(h + 1) * d).map(|c| ra[c] * rb[c]).sum();
                out.data_mut()[r * heads + h] = dot;
            }
        }
        self.push(out, Op::RowDotHeads { a, b, heads })
    }

    pub fn edge_scores(
        &mut self,
        q: VarId,
        k: VarId,
        src: Rc<Vec<usize>>,
        dst: Rc<Vec<usize>>,
        heads: usize,
    ) -> VarId {
        let (qv, kv) = (self.value(q), self.value(k));
        assert_eq!(qv.cols(), kv.cols());
        assert_eq!(qv.cols() % heads, 0);
        assert_eq!(src.len(), dst.len());
        let d = qv.cols() / heads;
        let mut out = Tensor::zeros(src.len(), heads);
        for (e, (&s, &t)) in src.iter().zip(dst.iter()).enumerate() {
            let (qrow, krow) = (qv.row(t), kv.row(s));
            for h in 0..heads {
                let dot: f64 = (h * d..(h + 1) * d).map(|c| qrow[c] * krow[c]).sum();
                out.data_mut()[e * heads + h] = dot;
            }
        }
        self.push(out, Op::EdgeScores { q, k, src, dst, heads })
    }

    pub fn attention_aggregate(
        &mut self,
        v: VarId,
        alpha: VarId,
        src: Rc<Vec<usize>>,
        dst: Rc<Vec<usize>>,
        n_out: usize,
    ) -> VarId {
        let (vv, av) = (self.value(v), self.value(alpha));
        assert_eq!(av.rows(), src.len());
        let heads = av.cols();
        assert_eq!(vv.cols() % heads, 0);
        let d = vv.cols() / heads;
        let cols = vv.cols();
        let mut out = Tensor::zeros(n_out, cols);
        for (e, (&s, &t)) in src.iter().zip(dst.iter()).enumerate() {
            let vrow = vv.row(s);
            let orow = &mut out.data_mut()[t * cols..(t + 1) * cols];
            for h in 0..heads {
                let a = av.at(e, h);
                for c in h * d..(h + 1) * d {
                    orow[c] += a * vrow[c];
                }
            }
        }
        self.push(out, Op::AttentionAggregate { v, alpha, src, dst })
    }

    pub fn neighbor_sum(
        &mut self,
        x: VarId,
        src: Rc<Vec<usize>>,
        dst: Rc<Vec<usize>>,
        n_out: usize,
    ) -> VarId {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = Tensor::zeros(n_out, cols);
        for (&s, &t) in src.iter().zip(dst.iter()) {
            let xrow = xv.row(s);
            let orow = &mut out.data_mut()[t * cols..(t + 1) * cols];
            for (o, v) in orow.iter_mut().zip(xrow) {
                *o += v;
            }
        }
        self.push(out, Op::NeighborSum { x, src, dst })
    }

    pub fn slice_rows(&mut self, x: VarId, start: usize, len: usize) -> VarId {
        let xv = self.value(x);
        assert!(start + len <= xv.rows());
        let cols = xv.cols();
        let value = Tensor::from_slice(len, cols, &xv.data()[start * cols..(start + len) * cols]);
        self.push(value, Op::SliceRows { x, start })
    }

    pub fn segment_softmax(&mut self, x: VarId, seg: Rc<Vec<usize>>, n_seg: usize) -> VarId {
        let xv = self.value(x);
        assert_eq!(xv.rows(), seg.len());
        let cols = xv.cols();
        let value = segment_softmax_value(xv, &seg, n_seg, cols);
        self.push(value, Op::SegmentSoftmax { x, seg, n_seg })
    }

    pub fn scale_rows_per_head(&mut self, v: VarId, w: VarId) -> VarId {
        let (vv, wv) = (self.value(v), self.value(w));
        assert_eq!(vv.rows(), wv.rows());
        let heads = wv.cols();
        assert_eq!(vv.cols() % heads.max(1), 0);
        let d = if heads == 0 { 0 } else { vv.cols() / heads };
        let mut out = vv.clone();
        for r in 0..vv.rows() {
            for h in 0..heads {
                let scale = wv.at(r, h);
                for c in h * d..(h + 1) * d {
                    out.data_mut()[r * vv.cols() + c] *= scale;
                }
            }
        }
        self.push(out, Op::ScaleRowsPerHead { v, w })
    }

    pub fn masked_log_softmax(
        &mut self,
        x: VarId,
        mask: Rc<Vec<bool>>,
        seg: Rc<Vec<usize>>,
        n_seg: usize,
    ) -> VarId {
        let xv = self.value(x);
        assert_eq!(xv.cols(), 1);
        assert_eq!(xv.rows(), mask.len());
        assert_eq!(xv.rows(), seg.len());
        let mut seg_max = vec![f64::NEG_INFINITY; n_seg];
        for i in 0..xv.rows() {
            if mask[i] {
                seg_max[seg[i]] = seg_max[seg[i]].max(xv.data()[i]);
            }
        }
        assert!(
            seg_max.iter().all(|m| m.is_finite()),
            "log-softmax over a fully masked segment"
        );
        let mut seg_sum = vec![0.0; n_seg];
        for i in 0..xv.rows() {
            if mask[i] {
                seg_sum[seg[i]] += (xv.data()[i] - seg_max[seg[i]]).exp();
            }
        }
        let mut out = Tensor::zeros(xv.rows(), 1);
        for i in 0..xv.rows() {
            out.data_mut()[i] = if mask[i] {
                xv.data()[i] - seg_max[seg[i]] - seg_sum[seg[i]].ln()
            } else {
                f64::NEG_INFINITY
            };
        }
        self.push(out, Op::MaskedLogSoftmax { x, mask, seg, n_seg })
    }

    pub fn entropy_from_log_probs(
        &mut self,
        logp: VarId,
        mask: Rc<Vec<bool>>,
        seg: Rc<Vec<usize>>,
        n_seg: usize,
    ) -> VarId {
        let lv = self.value(logp);
        assert_eq!(lv.cols(), 1);
        let mut out = Tensor::zeros(n_seg, 1);
        for i in 0..lv.rows() {
            if mask[i] {
                let lp = lv.data()[i];
                out.data_mut()[seg[i]] -= lp.exp() * lp;
            }
        }
        self.push(out, Op::Entropy { logp, mask, seg })
    }

    pub fn gather_elems(&mut self, x: VarId, idx: Rc<Vec<usize>>) -> VarId {
        let xv = self.value(x);
        assert_eq!(xv.cols(), 1);
        let data: Vec<f64> = idx.iter().map(|&i| xv.data()[i]).collect();
        let value = Tensor::from_vec(idx.len(), 1, data);
        self.push(value, Op::GatherElems { x, idx })
    }

    pub fn exp(&mut self, x: VarId) -> VarId {
        let value = self.value(x).map(f64::exp);
        self.push(value, Op::Exp(x))
    }

    pub fn clamp(&mut self, x: VarId, lo: f64, hi: f64) -> VarId {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp { x, lo, hi })
    }

    pub fn min(&mut self, a: VarId, b: VarId) -> VarId {
        let value = self.value(a).zip_map(self.value(b), f64::min);
        self.push(value, Op::Min(a, b))
    }

    pub fn max(&mut self, a: VarId, b: VarId) -> VarId {
        let value = self.value(a).zip_map(self.value(b), f64::max);
        self.push(value, Op::Max(a, b))
    }

    pub fn square(&mut self, x: VarId) -> VarId {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square(x))
    }

    pub fn scale(&mut self, x: VarId, k: f64) -> VarId {
        let value = self.value(x).map(|v| v * k);
        self.push(value, Op::Scale { x, k })
    }

    pub fn mean_all(&mut self, x: VarId) -> VarId {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.data().iter().sum::<f64>() / xv.len() as f64);
        self.push(value, Op::MeanAll(x))
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::SumAll(x))
    }

    /// Runs the chain rule from `target`, seeding its gradient with `seed`
    /// in every element (a scalar loss uses 1.0, or 1/batch for averaging
    /// across accumulation steps).
    pub fn backward_seeded(&mut self, target: VarId, seed: f64) {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let (r, c) = self.value(target).shape();
        grads[target.0] = Some(Tensor::from_vec(r, c, vec![seed; r * c]));

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        self.grads = grads;
    }

    pub fn backward(&mut self, target: VarId) {
        self.backward_seeded(target, 1.0);
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let value = Rc::clone(&self.nodes[id].value);
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(grads, a.0, g.matmul_nt(bv));
                acc(grads, b.0, av.matmul_tn(g));
            }
            Op::AddBias(x, bias) => {
                let cols = g.cols();
                let mut db = Tensor::zeros(1, cols);
                for r in 0..g.rows() {
                    for (o, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(grads, x.0, g.clone());
                acc(grads, bias.0, db);
            }
            Op::Add(a, b) => {
                acc(grads, a.0, g.clone());
                acc(grads, b.0, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, a.0, g.clone());
                acc(grads, b.0, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(grads, a.0, g.zip_map(bv, |gv, y| gv * y));
                acc(grads, b.0, g.zip_map(av, |gv, x| gv * x));
            }
            Op::Relu(x) => {
                let xv = &self.nodes[x.0].value;
                acc(grads, x.0, g.zip_map(xv, |gv, v| if v > 0.0 { gv } else { 0.0 }));
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gain.0].value;
                let (rows, cols) = xv.shape();
                let mut dx = Tensor::zeros(rows, cols);
                let mut dgain = Tensor::zeros(1, cols);
                let mut dbias = Tensor::zeros(1, cols);
                let mut xhat = vec![0.0; cols];
                for r in 0..rows {
                    let row = xv.row(r);
                    let (mean, rstd) = row_norm_stats(row);
                    let grow = g.row(r);
                    // d/dxhat, then the standard layer-norm backward.
                    let mut sum_gh = 0.0;
                    let mut sum_gh_xhat = 0.0;
                    for c in 0..cols {
                        xhat[c] = (row[c] - mean) * rstd;
                        let gh = grow[c] * gv.data()[c];
                        sum_gh += gh;
                        sum_gh_xhat += gh * xhat[c];
                        dgain.data_mut()[c] += grow[c] * xhat[c];
                        dbias.data_mut()[c] += grow[c];
                    }
                    let inv_n = 1.0 / cols as f64;
                    let dst = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        let gh = grow[c] * gv.data()[c];
                        dst[c] = rstd * (gh - inv_n * sum_gh - xhat[c] * inv_n * sum_gh_xhat);
                    }
                }
                acc(grads, x.0, dx);
                acc(grads, gain.0, dgain);
                acc(grads, bias.0, dbias);
            }
            Op::Dropout { x, masks, scale } => {
                let mut dx = g.clone();
                apply_masks(dx.data_mut(), masks, *scale);
                acc(grads, x.0, dx);
            }
            Op::GatherRows { x, idx } => {
                let xv = &self.nodes[x.0].value;
                let cols = xv.cols();
                let mut dx = Tensor::zeros(xv.rows(), cols);
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut dx.data_mut()[src * cols..(src + 1) * cols];
                    for (o, v) in dst.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(grads, x.0, dx);
            }
            Op::ScatterAddRows { x, idx } => {
                let xv = &self.nodes[x.0].value;
                let cols = xv.cols();
                let mut dx = Tensor::zeros(xv.rows(), cols);
                for (r, &dst_row) in idx.iter().enumerate() {
                    dx.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(g.row(dst_row));
                }
                acc(grads, x.0, dx);
            }
            Op::ConcatRows(a, b) => {
                let a_rows = self.nodes[a.0].value.rows();
                let cols = g.cols();
                let (top, bottom) = g.data().split_at(a_rows * cols);
                acc(grads, a.0, Tensor::from_slice(a_rows, cols, top));
                acc(grads, b.0, Tensor::from_slice(g.rows() - a_rows, cols, bottom));
            }
            Op::ConcatCols(a, b) => {
                let a_cols = self.nodes[a.0].value.cols();
                let b_cols = self.nodes[b.0].value.cols();
                let rows = g.rows();
                let mut da = Tensor::zeros(rows, a_cols);
                let mut db = Tensor::zeros(rows, b_cols);
                for r in 0..rows {
                    let grow = g.row(r);
                    da.data_mut()[r * a_cols..(r + 1) * a_cols]
                        .copy_from_slice(&grow[..a_cols]);
                    db.data_mut()[r * b_cols..(r + 1) * b_cols]
                        .copy_from_slice(&grow[a_cols..]);
                }
                acc(grads, a.0, da);
                acc(grads, b.0, db);
            }
            Op::RowDotHeads { a, b, heads } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let d = av.cols() / heads;
                let mut da = Tensor::zeros(av.rows(), av.cols());
                let mut db = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    for h in 0..*heads {
                        let gv = g.at(r, h);
                        for c in h * d..(h + 1) * d {
                            da.data_mut()[r * av.cols() + c] += gv * bv.at(r, c);
                            db.data_mut()[r * av.cols() + c] += gv * av.at(r, c);
                        }
                    }
                }
                acc(grads, a.0, da);
                acc(grads, b.0, db);
            }
            Op::EdgeScores { q, k, src, dst, heads } => {
                let (qv, kv) = (&self.nodes[q.0].value, &self.nodes[k.0].value);
                let cols = qv.cols();
                let d = cols / heads;
                let mut dq = Tensor::zeros(qv.rows(), cols);
                let mut dk = Tensor::zeros(kv.rows(), cols);
                for (e, (&s, &t)) in src.iter().zip(dst.iter()).enumerate() {
                    let (qrow, krow) = (qv.row(t), kv.row(s));
                    for h in 0..*heads {
                        let gv = g.at(e, h);
                        if gv == 0.0 {
                            continue;
                        }
                        for c in h * d..(h + 1) * d {
                            dq.data_mut()[t * cols + c] += gv * krow[c];
                            dk.data_mut()[s * cols + c] += gv * qrow[c];
                        }
                    }
                }
                acc(grads, q.0, dq);
                acc(grads, k.0, dk);
            }
            Op::AttentionAggregate { v, alpha, src, dst } => {
                let (vv, av) = (&self.nodes[v.0].value, &self.nodes[alpha.0].value);
                let cols = vv.cols();
                let heads = av.cols();
                let d = cols / heads;
                let mut dv = Tensor::zeros(vv.rows(), cols);
                let mut da = Tensor::zeros(av.rows(), heads);
                for (e, (&s, &t)) in src.iter().zip(dst.iter()).enumerate() {
                    let grow = g.row(t);
                    let vrow = vv.row(s);
                    let dvrow = &mut dv.data_mut()[s * cols..(s + 1) * cols];
                    for h in 0..heads {
                        let a = av.at(e, h);
                        let mut dot = 0.0;
                        for c in h * d..(h + 1) * d {
                            dvrow[c] += a * grow[c];
                            dot += grow[c] * vrow[c];
                        }
                        da.data_mut()[e * heads + h] = dot;
                    }
                }
                acc(grads, v.0, dv);
                acc(grads, alpha.0, da);
            }
            Op::NeighborSum { x, src, dst } => {
                let xv = &self.nodes[x.0].value;
                let cols = xv.cols();
                let mut dx = Tensor::zeros(xv.rows(), cols);
                for (&s, &t) in src.iter().zip(dst.iter()) {
                    let grow = g.row(t);
                    let drow = &mut dx.data_mut()[s * cols..(s + 1) * cols];
                    for (o, v) in drow.iter_mut().zip(grow) {
                        *o += v;
                    }
                }
                acc(grads, x.0, dx);
            }
            Op::SliceRows { x, start } => {
                let xv = &self.nodes[x.0].value;
                let cols = xv.cols();
                let mut dx = Tensor::zeros(xv.rows(), cols);
                dx.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                acc(grads, x.0, dx);
            }
            Op::SegmentSoftmax { x, seg, n_seg } => {
                let alpha = &value;
                let cols = alpha.cols();
                let mut seg_dot = vec![0.0; n_seg * cols];
                for r in 0..alpha.rows() {
                    for c in 0..cols {
                        seg_dot[seg[r] * cols + c] += alpha.at(r, c) * g.at(r, c);
                    }
                }
                let mut dx = Tensor::zeros(alpha.rows(), cols);
                for r in 0..alpha.rows() {
                    for c in 0..cols {
                        let a = alpha.at(r, c);
                        dx.data_mut()[r * cols + c] =
                            a * (g.at(r, c) - seg_dot[seg[r] * cols + c]);
                    }
                }
                acc(grads, x.0, dx);
            }
            Op::ScaleRowsPerHead { v, w } => {
                let (vv, wv) = (&self.nodes[v.0].value, &self.nodes[w.0].value);
                let heads = wv.cols();
                let d = vv.cols() / heads;
                let mut dv = Tensor::zeros(vv.rows(), vv.cols());
                let mut dw = Tensor::zeros(wv.rows(), heads);
                for r in 0..vv.rows() {
                    for h in 0..heads {
                        let scale = wv.at(r, h);
                        let mut dot = 0.0;
                        for c in h * d..(h + 1) * d {
                            dv.data_mut()[r * vv.cols() + c] = g.at(r, c) * scale;
                            dot += g.at(r, c) * vv.at(r, c);
                        }
                        dw.data_mut()[r * heads + h] = dot;
                    }
                }
                acc(grads, v.0, dv);
                acc(grads, w.0, dw);
            }
            Op::MaskedLogSoftmax { x, mask, seg, n_seg } => {
                // dL/dx_i = g_i - p_i * sum_{j in seg, valid} g_j.
                let logp = &value;
                let mut seg_gsum = vec![0.0; *n_seg];
                for i in 0..logp.rows() {
                    if mask[i] {
                        seg_gsum[seg[i]] += g.data()[i];
                    }
                }
                let mut dx = Tensor::zeros(logp.rows(), 1);
                for i in 0..logp.rows() {
                    if mask[i] {
                        let p = logp.data()[i].exp();
                        dx.data_mut()[i] = g.data()[i] - p * seg_gsum[seg[i]];
                    }
                }
                acc(grads, x.0, dx);
            }
            Op::Entropy { logp, mask, seg } => {
                // e_s = -sum p*lp  =>  de/dlp_i = -p_i (1 + lp_i).
                let lv = &self.nodes[logp.0].value;
                let mut dlp = Tensor::zeros(lv.rows(), 1);
                for i in 0..lv.rows() {
                    if mask[i] {
                        let lp = lv.data()[i];
                        dlp.data_mut()[i] = -g.data()[seg[i]] * lp.exp() * (1.0 + lp);
                    }
                }
                acc(grads, logp.0, dlp);
            }
            Op::GatherElems { x, idx } => {
                let xv = &self.nodes[x.0].value;
                let mut dx = Tensor::zeros(xv.rows(), 1);
                for (r, &src) in idx.iter().enumerate() {
                    dx.data_mut()[src] += g.data()[r];
                }
                acc(grads, x.0, dx);
            }
            Op::Exp(x) => {
                acc(grads, x.0, g.zip_map(&value, |gv, y| gv * y));
            }
            Op::Clamp { x, lo, hi } => {
                let xv = &self.nodes[x.0].value;
                acc(
                    grads,
                    x.0,
                    g.zip_map(xv, |gv, v| if v >= *lo && v <= *hi { gv } else { 0.0 }),
                );
            }
            Op::Min(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let da = g.zip_map(&av.zip_map(bv, |x, y| if x <= y { 1.0 } else { 0.0 }), |gv, m| gv * m);
                let db = g.zip_map(&av.zip_map(bv, |x, y| if x > y { 1.0 } else { 0.0 }), |gv, m| gv * m);
                acc(grads, a.0, da);
                acc(grads, b.0, db);
            }
            Op::Max(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let da = g.zip_map(&av.zip_map(bv, |x, y| if x >= y { 1.0 } else { 0.0 }), |gv, m| gv * m);
                let db = g.zip_map(&av.zip_map(bv, |x, y| if x < y { 1.0 } else { 0.0 }), |gv, m| gv * m);
                acc(grads, a.0, da);
                acc(grads, b.0, db);
            }
            Op::Square(x) => {
                let xv = &self.nodes[x.0].value;
                acc(grads, x.0, g.zip_map(xv, |gv, v| 2.0 * v * gv));
            }
            Op::Scale { x, k } => {
                acc(grads, x.0, g.map(|v| v * k));
            }
            Op::MeanAll(x) => {
                let xv = &self.nodes[x.0].value;
                let gv = g.item() / xv.len() as f64;
                acc(grads, x.0, xv.map(|_| gv));
            }
            Op::SumAll(x) => {
                let xv = &self.nodes[x.0].value;
                let gv = g.item();
                acc(grads, x.0, xv.map(|_| gv));
            }
        }
    }
}

fn apply_masks(data: &mut [f64], masks: &[DropoutMask], scale: f64) {
    let mut offset = 0;
    for mask in masks {
        for (i, v) in data[offset..offset + mask.len()].iter_mut().enumerate() {
            *v = if mask.keep(i) { *v * scale } else { 0.0 };
        }
        offset += mask.len();
    }
}

fn acc(grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
    match &mut grads[id] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn row_norm_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn segment_softmax_value(x: &Tensor, seg: &[usize], n_seg: usize, cols: usize) -> Tensor {
    let mut seg_max = vec![f64::NEG_INFINITY; n_seg * cols];
    for r in 0..x.rows() {
        for c in 0..cols {
            let slot = &mut seg_max[seg[r] * cols + c];
            *slot = slot.max(x.at(r, c));
        }
    }
    let mut seg_sum = vec![0.0; n_seg * cols];
    let mut out = Tensor::zeros(x.rows(), cols);
    for r in 0..x.rows() {
        for c in 0..cols {
            let e = (x.at(r, c) - seg_max[seg[r] * cols + c]).exp();
            out.data_mut()[r * cols + c] = e;
            seg_sum[seg[r] * cols + c] += e;
        }
    }
    for r in 0..x.rows() {
        for c in 0..cols {
            out.data_mut()[r * cols + c] /= seg_sum[seg[r] * cols + c];
        }
    }
    out
}
