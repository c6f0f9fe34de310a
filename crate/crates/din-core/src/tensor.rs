//! Dense tensors and a replayable operation tape for reverse-mode
//! differentiation.
//!
//! The tape owns every intermediate value. Ops are recorded as enum entries
//! and replayed in reverse for the backward pass. All accumulation runs in
//! ascending index order so repeated runs are bit-identical.

use std::collections::BTreeMap;

use crate::error::{DinError, Result};
use crate::scalar::Scalar;

/// A dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    values: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, values: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) || numel != values.len() {
            return Err(DinError::BadShape {
                op: "tensor",
                expected: format!("positive extents with product {}", values.len()),
                found: format!("{shape:?}"),
            });
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![S::ZERO; numel],
        }
    }

    pub fn filled(shape: Vec<usize>, value: S) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![value; numel],
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Convert element type (used when moving f64 generators into f32 runs).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// out = A[m,k] @ B[k,n]
    Matmul { a: TensorId, b: TensorId },
    /// out = A[m,k] @ B[n,k]^T
    MatmulTransposeB { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    /// rows of A[r,c] plus bias[c]
    BiasAdd { a: TensorId, bias: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, factor: f64 },
    Relu { a: TensorId },
    SoftmaxAxis { a: TensorId, axis: usize },
    ReduceMaxAxis {
        a: TensorId,
        /// flat input index feeding each output element (first max wins)
        argmax: Vec<usize>,
    },
    ReduceMeanAxis { a: TensorId, axis: usize },
    Sum { a: TensorId },
    Reshape { a: TensorId },
    CrossEntropy { logits: TensorId, label: usize },
    /// grid [T,N,Cin] (*) kernel [Cout,kt,kn,Cin] + bias [Cout] -> [T,N,Cout]
    GridConv {
        grid: TensorId,
        kernel: TensorId,
        bias: TensorId,
        kt: usize,
        kn: usize,
    },
    /// grid [T,N,D] -> [T,N,K,D], zero-filled outside the grid
    FieldGather { grid: TensorId, kt: usize, kn: usize },
    /// feats [T,N,K,D] weighted by w [T,N,K] -> [T,N,D]
    WeightedSumK { feats: TensorId, weights: TensorId },
    /// grid [T,N,D] sampled at clamp(center + member + offsets) -> [T,N,K,D]
    BilinearGather {
        grid: TensorId,
        offsets: TensorId,
        kt: usize,
        kn: usize,
    },
    /// scaled dot products of query/key [T,N,Dr] over field members -> [T,N,K]
    EdpLogitsField {
        query: TensorId,
        key: TensorId,
        kt: usize,
        kn: usize,
        scale: f64,
    },
    /// scaled dot products over all pairs: [P,Dr] x [P,Dr] -> [P,P]
    PairLogits {
        query: TensorId,
        key: TensorId,
        scale: f64,
    },
    /// rel [P,P] @ feats [P,D] -> [P,D] (relation-weighted aggregation)
    RelationAggregate { rel: TensorId, feats: TensorId },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op,
    /// true when some requires_grad leaf feeds this node
    needs: bool,
}

/// Replayable operation record plus value/gradient storage.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    scope: String,
    macs: BTreeMap<String, u64>,
    kink_margin: f64,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// `out[i,j] += sum_p a[i,p] * b[p,j]`, ascending `p` (fixed accumulation order).
pub(crate) fn matmul_acc<S: Scalar>(
    a: &[S],
    b: &[S],
    out: &mut [S],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += ap * bv;
            }
        }
    }
}

fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `out[p, j] += sum_i a[i, p] * b[i, j]` (i.e. out += A^T @ B), ascending `i`.
fn matmul_t_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            axpy(ap, brow, &mut out[p * n..(p + 1) * n]);
        }
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// (outer, len, inner) decomposition of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(DinError::AxisOutOfRange {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn check_odd_field(kt: usize, kn: usize) -> Result<()> {
    if kt == 0 || kn == 0 || kt % 2 == 0 || kn % 2 == 0 {
        return Err(DinError::InvalidField { kt, kn });
    }
    Ok(())
}

/// Distance of a raw (pre-clamp) sampling coordinate from the nearest
/// non-smooth point: clamp boundaries, or interior integer lattice points.
fn coord_margin(raw: f64, hi: f64) -> f64 {
    let bound = raw.abs().min((raw - hi).abs());
    if raw <= 0.0 || raw >= hi {
        bound
    } else {
        bound.min((raw - raw.round()).abs())
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            scope: String::from("unscoped"),
            macs: BTreeMap::new(),
            kink_margin: f64::INFINITY,
        }
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> TensorId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient accumulated by `backward`, if any reached this node.
    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }

    /// Smallest observed distance to a non-smooth point (ReLU kink, max-pool
    /// tie, sampler integer/boundary) across the recorded forward pass.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    /// Label attributed to subsequent dense-map MACs (matmul / grid_conv).
    pub fn set_mac_scope(&mut self, scope: &str) {
        self.scope = scope.to_string();
    }

    pub fn mac_tally(&self) -> &BTreeMap<String, u64> {
        &self.macs
    }

    fn push(&mut self, value: Tensor<S>, op: Op, needs: bool) -> TensorId {
        self.nodes.push(Node { value, op, needs });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs
    }

    fn count_macs(&mut self, count: u64) {
        *self.macs.entry(self.scope.clone()).or_insert(0) += count;
    }

    fn note_margin(&mut self, margin: f64) {
        if margin < self.kink_margin {
            self.kink_margin = margin;
        }
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DinError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::ZERO; m * n];
        matmul_acc(
            self.nodes[a.0].value.values(),
            self.nodes[b.0].value.values(),
            &mut out,
            m,
            k,
            n,
        );
        self.count_macs((m * k * n) as u64);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out).expect("matmul shape"),
            Op::Matmul { a, b },
            needs,
        ))
    }

    /// `A[m,k] @ B[n,k]^T -> [m,n]`.
    pub fn matmul_transpose_b(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(DinError::ShapeMismatch {
                op: "matmul_transpose_b",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let av = self.nodes[a.0].value.values();
        let bv = self.nodes[b.0].value.values();
        let mut out = vec![S::ZERO; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(arow, &bv[j * k..(j + 1) * k]);
            }
        }
        self.count_macs((m * k * n) as u64);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out).expect("matmul_t shape"),
            Op::MatmulTransposeB { a, b },
            needs,
        ))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(DinError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<S> = self.nodes[a.0]
            .value
            .values()
            .iter()
            .zip(self.nodes[b.0].value.values())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(shape, out).expect("add shape"),
            Op::Add { a, b },
            needs,
        ))
    }

    pub fn bias_add(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        if sa.len() != 2 || sb.len() != 1 || sb[0] != sa[1] {
            return Err(DinError::ShapeMismatch {
                op: "bias_add",
                lhs: sa,
                rhs: sb,
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let av = self.nodes[a.0].value.values();
        let bv = self.nodes[bias.0].value.values();
        let mut out = vec![S::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = av[i * c + j] + bv[j];
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(
            Tensor::new(vec![r, c], out).expect("bias_add shape"),
            Op::BiasAdd { a, bias },
            needs,
        ))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(DinError::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<S> = self.nodes[a.0]
            .value
            .values()
            .iter()
            .zip(self.nodes[b.0].value.values())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(shape, out).expect("mul shape"),
            Op::Mul { a, b },
            needs,
        ))
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> TensorId {
        let f = S::from_f64(factor);
        let out: Vec<S> = self.nodes[a.0].value.values().iter().map(|&x| x * f).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(
            Tensor::new(shape, out).expect("scale shape"),
            Op::Scale { a, factor },
            needs,
        )
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let mut margin = f64::INFINITY;
        let out: Vec<S> = self.nodes[a.0]
            .value
            .values()
            .iter()
            .map(|&x| {
                margin = margin.min(x.to_f64().abs());
                if x > S::ZERO {
                    x
                } else {
                    S::ZERO
                }
            })
            .collect();
        self.note_margin(margin);
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(
            Tensor::new(shape, out).expect("relu shape"),
            Op::Relu { a },
            needs,
        )
    }

    pub fn softmax_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let av = self.nodes[a.0].value.values();
        let mut out = vec![S::ZERO; av.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut max = av[idx(0)];
                for j in 1..len {
                    max = max.max(av[idx(j)]);
                }
                let mut denom = S::ZERO;
                for j in 0..len {
                    let e = (av[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    denom += e;
                }
                for j in 0..len {
                    let v = out[idx(j)] / denom;
                    out[idx(j)] = v;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(shape, out).expect("softmax shape"),
            Op::SoftmaxAxis { a, axis },
            needs,
        ))
    }

    /// Max over `axis`; ties and gradient routing go to the lowest index.
    /// `mask`, when present, has one entry per (outer, axis) pair and
    /// excludes masked slots from the reduction.
    pub fn reduce_max_axis(
        &mut self,
        a: TensorId,
        axis: usize,
        mask: Option<&[bool]>,
    ) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        if let Some(m) = mask {
            if m.len() != outer * len {
                return Err(DinError::BadShape {
                    op: "reduce_max_axis",
                    expected: format!("mask of length {}", outer * len),
                    found: format!("{}", m.len()),
                });
            }
        }
        let av = self.nodes[a.0].value.values();
        let mut out = vec![S::ZERO; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        let mut margin = f64::INFINITY;
        for o in 0..outer {
            for i in 0..inner {
                let mut best: Option<(S, usize)> = None;
                let mut second: Option<S> = None;
                for j in 0..len {
                    if let Some(m) = mask {
                        if !m[o * len + j] {
                            continue;
                        }
                    }
                    let flat = (o * len + j) * inner + i;
                    let v = av[flat];
                    match best {
                        None => best = Some((v, flat)),
                        Some((bv, _)) if v > bv => {
                            second = Some(bv);
                            best = Some((v, flat));
                        }
                        Some((bv, _)) => {
                            second = Some(match second {
                                None => v,
                                Some(s) => s.max(v),
                            });
                            let _ = bv;
                        }
                    }
                }
                let (bv, bidx) = best.ok_or_else(|| DinError::BadShape {
                    op: "reduce_max_axis",
                    expected: "at least one unmasked slot per group".into(),
                    found: "fully masked group".into(),
                })?;
                if let Some(s) = second {
                    margin = margin.min((bv.to_f64() - s.to_f64()).abs());
                }
                out[o * inner + i] = bv;
                argmax[o * inner + i] = bidx;
            }
        }
        self.note_margin(margin);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(out_shape, out).expect("reduce_max shape"),
            Op::ReduceMaxAxis { a, argmax },
            needs,
        ))
    }

    pub fn reduce_mean_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let av = self.nodes[a.0].value.values();
        let inv = S::from_f64(1.0 / len as f64);
        let mut out = vec![S::ZERO; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += av[(o * len + j) * inner + i];
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(out_shape, out).expect("reduce_mean shape"),
            Op::ReduceMeanAxis { a, axis },
            needs,
        ))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let mut acc = S::ZERO;
        for &v in self.nodes[a.0].value.values() {
            acc += v;
        }
        let needs = self.needs(a);
        self.push(Tensor::scalar(acc), Op::Sum { a }, needs)
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.numel() {
            return Err(DinError::BadShape {
                op: "reshape",
                expected: format!("product {}", self.nodes[a.0].value.numel()),
                found: format!("{shape:?}"),
            });
        }
        let values = self.nodes[a.0].value.values().to_vec();
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(shape, values).expect("reshape"),
            Op::Reshape { a },
            needs,
        ))
    }

    /// `-log softmax(logits)[label]`, numerically stabilized. Scalar output.
    pub fn cross_entropy(&mut self, logits: TensorId, label: usize) -> Result<TensorId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 1 {
            return Err(DinError::BadShape {
                op: "cross_entropy",
                expected: "rank-1 logits".into(),
                found: format!("{shape:?}"),
            });
        }
        let classes = shape[0];
        if label >= classes {
            return Err(DinError::LabelOutOfRange { label, classes });
        }
        let lv = self.nodes[logits.0].value.values();
        let mut max = lv[0];
        for &v in &lv[1..] {
            max = max.max(v);
        }
        let mut denom = S::ZERO;
        for &v in lv {
            denom += (v - max).exp();
        }
        let loss = denom.ln() + max - lv[label];
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, label },
            needs,
        ))
    }

    /// Cross-correlation over the (T, N) axes with zero padding, keeping the
    /// spatial extents. Kernel extents must be odd so the window has a center.
    pub fn grid_conv(
        &mut self,
        grid: TensorId,
        kernel: TensorId,
        bias: TensorId,
    ) -> Result<TensorId> {
        let gs = self.shape(grid).to_vec();
        let ks = self.shape(kernel).to_vec();
        let bs = self.shape(bias).to_vec();
        if gs.len() != 3 || ks.len() != 4 || ks[3] != gs[2] {
            return Err(DinError::ShapeMismatch {
                op: "grid_conv",
                lhs: gs,
                rhs: ks,
            });
        }
        let (t, n, cin) = (gs[0], gs[1], gs[2]);
        let (cout, kt, kn) = (ks[0], ks[1], ks[2]);
        check_odd_field(kt, kn)?;
        if bs != [cout] {
            return Err(DinError::ShapeMismatch {
                op: "grid_conv",
                lhs: vec![cout],
                rhs: bs,
            });
        }
        let positions = t * n;
        let gv = self.nodes[grid.0].value.values();
        let kv = self.nodes[kernel.0].value.values();
        let bv = self.nodes[bias.0].value.values();

        let mut out = vec![S::ZERO; positions * cout];
        for pos in 0..positions {
            out[pos * cout..(pos + 1) * cout].copy_from_slice(bv);
        }
        let mut shifted = vec![S::ZERO; positions * cin];
        let mut member_w = vec![S::ZERO; cin * cout];
        for km in 0..kt * kn {
            let dt = (km / kn) as isize - (kt / 2) as isize;
            let dn = (km % kn) as isize - (kn / 2) as isize;
            gather_shifted(gv, &mut shifted, t, n, cin, dt, dn);
            // kernel[co, km, ci] transposed to [ci, co]
            for co in 0..cout {
                let row = &kv[(co * kt * kn + km) * cin..(co * kt * kn + km + 1) * cin];
                for (ci, &w) in row.iter().enumerate() {
                    member_w[ci * cout + co] = w;
                }
            }
            matmul_acc(&shifted, &member_w, &mut out, positions, cin, cout);
        }
        self.count_macs((positions * kt * kn * cin * cout) as u64);
        let needs = self.needs(grid) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            Tensor::new(vec![t, n, cout], out).expect("grid_conv shape"),
            Op::GridConv {
                grid,
                kernel,
                bias,
                kt,
                kn,
            },
            needs,
        ))
    }

    /// Stack each position's interaction-field members; out-of-grid members
    /// are zero vectors.
    pub fn field_gather(&mut self, grid: TensorId, kt: usize, kn: usize) -> Result<TensorId> {
        check_odd_field(kt, kn)?;
        let gs = self.shape(grid).to_vec();
        if gs.len() != 3 {
            return Err(DinError::BadShape {
                op: "field_gather",
                expected: "rank-3 grid".into(),
                found: format!("{gs:?}"),
            });
        }
        let (t, n, d) = (gs[0], gs[1], gs[2]);
        let k = kt * kn;
        let gv = self.nodes[grid.0].value.values();
        let mut out = vec![S::ZERO; t * n * k * d];
        for ti in 0..t {
            for ni in 0..n {
                for km in 0..k {
                    let st = ti as isize + (km / kn) as isize - (kt / 2) as isize;
                    let sn = ni as isize + (km % kn) as isize - (kn / 2) as isize;
                    if st >= 0 && (st as usize) < t && sn >= 0 && (sn as usize) < n {
                        let src = (st as usize * n + sn as usize) * d;
                        let dst = ((ti * n + ni) * k + km) * d;
                        out[dst..dst + d].copy_from_slice(&gv[src..src + d]);
                    }
                }
            }
        }
        let needs = self.needs(grid);
        Ok(self.push(
            Tensor::new(vec![t, n, k, d], out).expect("field_gather shape"),
            Op::FieldGather { grid, kt, kn },
            needs,
        ))
    }

    /// `out[t,n,:] = sum_k w[t,n,k] * feats[t,n,k,:]`.
    pub fn weighted_sum_k(&mut self, feats: TensorId, weights: TensorId) -> Result<TensorId> {
        let fs = self.shape(feats).to_vec();
        let ws = self.shape(weights).to_vec();
        if fs.len() != 4 || ws.len() != 3 || fs[..3] != ws[..] {
            return Err(DinError::ShapeMismatch {
                op: "weighted_sum_k",
                lhs: fs,
                rhs: ws,
            });
        }
        let (t, n, k, d) = (fs[0], fs[1], fs[2], fs[3]);
        let fv = self.nodes[feats.0].value.values();
        let wv = self.nodes[weights.0].value.values();
        let mut out = vec![S::ZERO; t * n * d];
        for pos in 0..t * n {
            let orow = &mut out[pos * d..(pos + 1) * d];
            for km in 0..k {
                let frow = &fv[(pos * k + km) * d..(pos * k + km + 1) * d];
                axpy(wv[pos * k + km], frow, orow);
            }
        }
        let needs = self.needs(feats) || self.needs(weights);
        Ok(self.push(
            Tensor::new(vec![t, n, d], out).expect("weighted_sum_k shape"),
            Op::WeightedSumK { feats, weights },
            needs,
        ))
    }

    /// Dynamic-walk sampling: member k of position (t, n) reads the grid at
    /// `clamp((t, n) + member_offset(k) + offsets[t,n,k])` through the
    /// four-neighbor bilinear kernel.
    pub fn bilinear_gather(
        &mut self,
        grid: TensorId,
        offsets: TensorId,
        kt: usize,
        kn: usize,
    ) -> Result<TensorId> {
        check_odd_field(kt, kn)?;
        let gs = self.shape(grid).to_vec();
        let os = self.shape(offsets).to_vec();
        let k = kt * kn;
        if gs.len() != 3 || os != [gs[0], gs[1], k, 2] {
            return Err(DinError::ShapeMismatch {
                op: "bilinear_gather",
                lhs: gs,
                rhs: os,
            });
        }
        let (t, n, d) = (gs[0], gs[1], gs[2]);
        let gv = self.nodes[grid.0].value.values();
        let ov = self.nodes[offsets.0].value.values();
        let mut out = vec![S::ZERO; t * n * k * d];
        let mut margin = f64::INFINITY;
        for ti in 0..t {
            for ni in 0..n {
                for km in 0..k {
                    let (raw_t, raw_n) = walk_coord(ov, ti, ni, km, kt, kn, n, k);
                    margin = margin.min(coord_margin(raw_t.to_f64(), (t - 1) as f64));
                    margin = margin.min(coord_margin(raw_n.to_f64(), (n - 1) as f64));
                    let dst = ((ti * n + ni) * k + km) * d;
                    let (t0, t1, ft) = split_coord(raw_t, t);
                    let (n0, n1, fn_) = split_coord(raw_n, n);
                    let w00 = (S::ONE - ft) * (S::ONE - fn_);
                    let w01 = (S::ONE - ft) * fn_;
                    let w10 = ft * (S::ONE - fn_);
                    let w11 = ft * fn_;
                    let orow = &mut out[dst..dst + d];
                    axpy(w00, &gv[(t0 * n + n0) * d..(t0 * n + n0) * d + d], orow);
                    axpy(w01, &gv[(t0 * n + n1) * d..(t0 * n + n1) * d + d], orow);
                    axpy(w10, &gv[(t1 * n + n0) * d..(t1 * n + n0) * d + d], orow);
                    axpy(w11, &gv[(t1 * n + n1) * d..(t1 * n + n1) * d + d], orow);
                }
            }
        }
        self.note_margin(margin);
        let needs = self.needs(grid) || self.needs(offsets);
        Ok(self.push(
            Tensor::new(vec![t, n, k, d], out).expect("bilinear_gather shape"),
            Op::BilinearGather {
                grid,
                offsets,
                kt,
                kn,
            },
            needs,
        ))
    }

    /// Embedded-dot-product logits restricted to the interaction field;
    /// out-of-grid members contribute a zero logit (their key is the zero
    /// padding vector).
    pub fn edp_logits_field(
        &mut self,
        query: TensorId,
        key: TensorId,
        kt: usize,
        kn: usize,
        scale: f64,
    ) -> Result<TensorId> {
        check_odd_field(kt, kn)?;
        let qs = self.shape(query).to_vec();
        let ks = self.shape(key).to_vec();
        if qs.len() != 3 || qs != ks {
            return Err(DinError::ShapeMismatch {
                op: "edp_logits_field",
                lhs: qs,
                rhs: ks,
            });
        }
        let (t, n, dr) = (qs[0], qs[1], qs[2]);
        let k = kt * kn;
        let qv = self.nodes[query.0].value.values();
        let kv = self.nodes[key.0].value.values();
        let s = S::from_f64(scale);
        let mut out = vec![S::ZERO; t * n * k];
        for ti in 0..t {
            for ni in 0..n {
                let qrow = &qv[(ti * n + ni) * dr..(ti * n + ni) * dr + dr];
                for km in 0..k {
                    let st = ti as isize + (km / kn) as isize - (kt / 2) as isize;
                    let sn = ni as isize + (km % kn) as isize - (kn / 2) as isize;
                    if st >= 0 && (st as usize) < t && sn >= 0 && (sn as usize) < n {
                        let j = (st as usize * n + sn as usize) * dr;
                        out[(ti * n + ni) * k + km] = dot(qrow, &kv[j..j + dr]) * s;
                    }
                }
            }
        }
        let needs = self.needs(query) || self.needs(key);
        Ok(self.push(
            Tensor::new(vec![t, n, k], out).expect("edp_logits shape"),
            Op::EdpLogitsField {
                query,
                key,
                kt,
                kn,
                scale,
            },
            needs,
        ))
    }

    /// All-pairs embedded-dot-product logits: `out[i,j] = scale * <q_i, k_j>`.
    pub fn pair_logits(&mut self, query: TensorId, key: TensorId, scale: f64) -> Result<TensorId> {
        let qs = self.shape(query).to_vec();
        let ks = self.shape(key).to_vec();
        if qs.len() != 2 || qs != ks {
            return Err(DinError::ShapeMismatch {
                op: "pair_logits",
                lhs: qs,
                rhs: ks,
            });
        }
        let (p, dr) = (qs[0], qs[1]);
        let qv = self.nodes[query.0].value.values();
        let kv = self.nodes[key.0].value.values();
        let s = S::from_f64(scale);
        let mut out = vec![S::ZERO; p * p];
        for i in 0..p {
            let qrow = &qv[i * dr..(i + 1) * dr];
            for j in 0..p {
                out[i * p + j] = dot(qrow, &kv[j * dr..(j + 1) * dr]) * s;
            }
        }
        let needs = self.needs(query) || self.needs(key);
        Ok(self.push(
            Tensor::new(vec![p, p], out).expect("pair_logits shape"),
            Op::PairLogits { query, key, scale },
            needs,
        ))
    }

    /// `out[i,:] = sum_j rel[i,j] * feats[j,:]` (not a parameter map, so it
    /// does not enter the dense-MAC tally).
    pub fn relation_aggregate(&mut self, rel: TensorId, feats: TensorId) -> Result<TensorId> {
        let rs = self.shape(rel).to_vec();
        let fs = self.shape(feats).to_vec();
        if rs.len() != 2 || fs.len() != 2 || rs[0] != rs[1] || rs[1] != fs[0] {
            return Err(DinError::ShapeMismatch {
                op: "relation_aggregate",
                lhs: rs,
                rhs: fs,
            });
        }
        let (p, d) = (fs[0], fs[1]);
        let rv = self.nodes[rel.0].value.values();
        let fv = self.nodes[feats.0].value.values();
        let mut out = vec![S::ZERO; p * d];
        matmul_acc(rv, fv, &mut out, p, p, d);
        let needs = self.needs(rel) || self.needs(feats);
        Ok(self.push(
            Tensor::new(vec![p, d], out).expect("relation_aggregate shape"),
            Op::RelationAggregate { rel, feats },
            needs,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Replay the tape in reverse from a scalar loss. Every `requires_grad`
    /// leaf ends up with a gradient (zeros when disconnected).
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(DinError::NonScalarLoss {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        self.grads[loss.0] = Some(vec![S::ONE]);
        for idx in (0..=loss.0).rev() {
            if self.grads[idx].is_none() || !self.nodes[idx].needs {
                continue;
            }
            self.backward_node(idx);
        }
        for idx in 0..self.nodes.len() {
            if matches!(self.nodes[idx].op, Op::Leaf) && self.nodes[idx].needs
                && self.grads[idx].is_none()
            {
                self.grads[idx] = Some(vec![S::ZERO; self.nodes[idx].value.numel()]);
            }
        }
        Ok(())
    }

    fn take_grad(&mut self, idx: usize) -> Vec<S> {
        self.grads[idx].clone().expect("grad present")
    }

    fn accumulate(&mut self, id: TensorId, grad: &[S]) {
        if !self.nodes[id.0].needs {
            return;
        }
        match &mut self.grads[id.0] {
            Some(existing) => {
                for (e, &g) in existing.iter_mut().zip(grad) {
                    *e += g;
                }
            }
            None => self.grads[id.0] = Some(grad.to_vec()),
        }
    }

    fn backward_node(&mut self, idx: usize) {
        let g = self.take_grad(idx);
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(a) {
                    let bv = self.nodes[b.0].value.values();
                    let mut da = vec![S::ZERO; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let darow = &mut da[i * k..(i + 1) * k];
                        for (p, dv) in darow.iter_mut().enumerate() {
                            *dv = dot(grow, &bv[p * n..(p + 1) * n]);
                        }
                    }
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    let av = self.nodes[a.0].value.values();
                    let mut db = vec![S::ZERO; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let arow = &av[i * k..(i + 1) * k];
                        for (p, &ap) in arow.iter().enumerate() {
                            axpy(ap, grow, &mut db[p * n..(p + 1) * n]);
                        }
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::MatmulTransposeB { a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                if self.needs(a) {
                    // dA = g @ B
                    let bv = self.nodes[b.0].value.values();
                    let mut da = vec![S::ZERO; m * k];
                    matmul_acc(&g, bv, &mut da, m, n, k);
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    // dB[j,:] = sum_i g[i,j] * A[i,:]
                    let av = self.nodes[a.0].value.values();
                    let mut db = vec![S::ZERO; n * k];
                    for i in 0..m {
                        let arow = &av[i * k..(i + 1) * k];
                        for j in 0..n {
                            axpy(g[i * n + j], arow, &mut db[j * k..(j + 1) * k]);
                        }
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, &g);
                self.accumulate(b, &g);
            }
            Op::BiasAdd { a, bias } => {
                let (a, bias) = (*a, *bias);
                let c = self.shape(bias)[0];
                self.accumulate(a, &g);
                if self.needs(bias) {
                    let mut db = vec![S::ZERO; c];
                    for row in g.chunks_exact(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(bias, &db);
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let bv = self.nodes[b.0].value.values();
                    let da: Vec<S> = g.iter().zip(bv).map(|(&gv, &x)| gv * x).collect();
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    let av = self.nodes[a.0].value.values();
                    let db: Vec<S> = g.iter().zip(av).map(|(&gv, &x)| gv * x).collect();
                    self.accumulate(b, &db);
                }
            }
            Op::Scale { a, factor } => {
                let (a, f) = (*a, S::from_f64(*factor));
                let da: Vec<S> = g.iter().map(|&gv| gv * f).collect();
                self.accumulate(a, &da);
            }
            Op::Relu { a } => {
                let a = *a;
                let av = self.nodes[a.0].value.values();
                let da: Vec<S> = g
                    .iter()
                    .zip(av)
                    .map(|(&gv, &x)| if x > S::ZERO { gv } else { S::ZERO })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::SoftmaxAxis { a, axis } => {
                let (a, axis) = (*a, *axis);
                let shape = self.shape(idx_id(idx)).to_vec();
                let (outer, len, inner) = axis_split(&shape, axis).expect("softmax axis");
                let sv = self.nodes[idx].value.values();
                let mut da = vec![S::ZERO; sv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idxf = |j: usize| (o * len + j) * inner + i;
                        let mut dotgs = S::ZERO;
                        for j in 0..len {
                            dotgs += g[idxf(j)] * sv[idxf(j)];
                        }
                        for j in 0..len {
                            da[idxf(j)] = sv[idxf(j)] * (g[idxf(j)] - dotgs);
                        }
                    }
                }
                self.accumulate(a, &da);
            }
            Op::ReduceMaxAxis { a, argmax, .. } => {
                let a = *a;
                let argmax = argmax.clone();
                let mut da = vec![S::ZERO; self.nodes[a.0].value.numel()];
                for (out_i, &src) in argmax.iter().enumerate() {
                    da[src] += g[out_i];
                }
                self.accumulate(a, &da);
            }
            Op::ReduceMeanAxis { a, axis } => {
                let (a, axis) = (*a, *axis);
                let shape = self.shape(a).to_vec();
                let (outer, len, inner) = axis_split(&shape, axis).expect("mean axis");
                let inv = S::from_f64(1.0 / len as f64);
                let mut da = vec![S::ZERO; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            da[(o * len + j) * inner + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                self.accumulate(a, &da);
            }
            Op::Sum { a } => {
                let a = *a;
                let da = vec![g[0]; self.nodes[a.0].value.numel()];
                self.accumulate(a, &da);
            }
            Op::Reshape { a } => {
                let a = *a;
                self.accumulate(a, &g);
            }
            Op::CrossEntropy { logits, label } => {
                let (logits, label) = (*logits, *label);
                let lv = self.nodes[logits.0].value.values();
                let mut max = lv[0];
                for &v in &lv[1..] {
                    max = max.max(v);
                }
                let mut denom = S::ZERO;
                for &v in lv {
                    denom += (v - max).exp();
                }
                let mut da: Vec<S> = lv.iter().map(|&v| (v - max).exp() / denom * g[0]).collect();
                da[label] -= g[0];
                self.accumulate(logits, &da);
            }
            Op::GridConv {
                grid,
                kernel,
                bias,
                kt,
                kn,
            } => {
                let (grid, kernel, bias, kt, kn) = (*grid, *kernel, *bias, *kt, *kn);
                self.backward_grid_conv(idx, grid, kernel, bias, kt, kn, &g);
            }
            Op::FieldGather { grid, kt, kn } => {
                let (grid, kt, kn) = (*grid, *kt, *kn);
                let gs = self.shape(grid).to_vec();
                let (t, n, d) = (gs[0], gs[1], gs[2]);
                let k = kt * kn;
                let mut da = vec![S::ZERO; t * n * d];
                for ti in 0..t {
                    for ni in 0..n {
                        for km in 0..k {
                            let st = ti as isize + (km / kn) as isize - (kt / 2) as isize;
                            let sn = ni as isize + (km % kn) as isize - (kn / 2) as isize;
                            if st >= 0 && (st as usize) < t && sn >= 0 && (sn as usize) < n {
                                let dst = (st as usize * n + sn as usize) * d;
                                let src = ((ti * n + ni) * k + km) * d;
                                for off in 0..d {
                                    da[dst + off] += g[src + off];
                                }
                            }
                        }
                    }
                }
                self.accumulate(grid, &da);
            }
            Op::WeightedSumK { feats, weights } => {
                let (feats, weights) = (*feats, *weights);
                let fs = self.shape(feats).to_vec();
                let (t, n, k, d) = (fs[0], fs[1], fs[2], fs[3]);
                if self.needs(weights) {
                    let fv = self.nodes[feats.0].value.values();
                    let mut dw = vec![S::ZERO; t * n * k];
                    for pos in 0..t * n {
                        let grow = &g[pos * d..(pos + 1) * d];
                        for km in 0..k {
                            dw[pos * k + km] =
                                dot(grow, &fv[(pos * k + km) * d..(pos * k + km + 1) * d]);
                        }
                    }
                    self.accumulate(weights, &dw);
                }
                if self.needs(feats) {
                    let wv = self.nodes[weights.0].value.values();
                    let mut df = vec![S::ZERO; t * n * k * d];
                    for pos in 0..t * n {
                        let grow = &g[pos * d..(pos + 1) * d];
                        for km in 0..k {
                            axpy(
                                wv[pos * k + km],
                                grow,
                                &mut df[(pos * k + km) * d..(pos * k + km + 1) * d],
                            );
                        }
                    }
                    self.accumulate(feats, &df);
                }
            }
            Op::BilinearGather {
                grid,
                offsets,
                kt,
                kn,
            } => {
                let (grid, offsets, kt, kn) = (*grid, *offsets, *kt, *kn);
                self.backward_bilinear(grid, offsets, kt, kn, &g);
            }
            Op::EdpLogitsField {
                query,
                key,
                kt,
                kn,
                scale,
            } => {
                let (query, key, kt, kn) = (*query, *key, *kt, *kn);
                let s = S::from_f64(*scale);
                let qs = self.shape(query).to_vec();
                let (t, n, dr) = (qs[0], qs[1], qs[2]);
                let k = kt * kn;
                let qv = self.nodes[query.0].value.values().to_vec();
                let kv = self.nodes[key.0].value.values().to_vec();
                let mut dq = vec![S::ZERO; t * n * dr];
                let mut dk = vec![S::ZERO; t * n * dr];
                for ti in 0..t {
                    for ni in 0..n {
                        for km in 0..k {
                            let st = ti as isize + (km / kn) as isize - (kt / 2) as isize;
                            let sn = ni as isize + (km % kn) as isize - (kn / 2) as isize;
                            if st < 0 || st as usize >= t || sn < 0 || sn as usize >= n {
                                continue;
                            }
                            let gval = g[(ti * n + ni) * k + km] * s;
                            let i0 = (ti * n + ni) * dr;
                            let j0 = (st as usize * n + sn as usize) * dr;
                            axpy(gval, &kv[j0..j0 + dr], &mut dq[i0..i0 + dr]);
                            axpy(gval, &qv[i0..i0 + dr], &mut dk[j0..j0 + dr]);
                        }
                    }
                }
                self.accumulate(query, &dq);
                self.accumulate(key, &dk);
            }
            Op::PairLogits { query, key, scale } => {
                let (query, key) = (*query, *key);
                let s = S::from_f64(*scale);
                let qs = self.shape(query).to_vec();
                let (p, dr) = (qs[0], qs[1]);
                let qv = self.nodes[query.0].value.values().to_vec();
                let kv = self.nodes[key.0].value.values().to_vec();
                let mut dq = vec![S::ZERO; p * dr];
                let mut dk = vec![S::ZERO; p * dr];
                for i in 0..p {
                    for j in 0..p {
                        let gval = g[i * p + j] * s;
                        axpy(gval, &kv[j * dr..(j + 1) * dr], &mut dq[i * dr..(i + 1) * dr]);
                        axpy(gval, &qv[i * dr..(i + 1) * dr], &mut dk[j * dr..(j + 1) * dr]);
                    }
                }
                self.accumulate(query, &dq);
                self.accumulate(key, &dk);
            }
            Op::RelationAggregate { rel, feats } => {
                let (rel, feats) = (*rel, *feats);
                let fs = self.shape(feats).to_vec();
                let (p, d) = (fs[0], fs[1]);
                if self.needs(rel) {
                    let fv = self.nodes[feats.0].value.values();
                    let mut dr = vec![S::ZERO; p * p];
                    for i in 0..p {
                        let grow = &g[i * d..(i + 1) * d];
                        for j in 0..p {
                            dr[i * p + j] = dot(grow, &fv[j * d..(j + 1) * d]);
                        }
                    }
                    self.accumulate(rel, &dr);
                }
                if self.needs(feats) {
                    let rv = self.nodes[rel.0].value.values();
                    let mut df = vec![S::ZERO; p * d];
                    for i in 0..p {
                        let grow = &g[i * d..(i + 1) * d];
                        for j in 0..p {
                            axpy(rv[i * p + j], grow, &mut df[j * d..(j + 1) * d]);
                        }
                    }
                    self.accumulate(feats, &df);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_grid_conv(
        &mut self,
        _out_idx: usize,
        grid: TensorId,
        kernel: TensorId,
        bias: TensorId,
        kt: usize,
        kn: usize,
        g: &[S],
    ) {
        let gs = self.shape(grid).to_vec();
        let ks = self.shape(kernel).to_vec();
        let (t, n, cin) = (gs[0], gs[1], gs[2]);
        let cout = ks[0];
        let positions = t * n;

        if self.needs(bias) {
            let mut db = vec![S::ZERO; cout];
            for row in g.chunks_exact(cout) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            self.accumulate(bias, &db);
        }

        let gv = self.nodes[grid.0].value.values().to_vec();
        let kv = self.nodes[kernel.0].value.values().to_vec();
        let mut dk = vec![S::ZERO; kv.len()];
        let mut dg = vec![S::ZERO; gv.len()];
        let mut shifted = vec![S::ZERO; positions * cin];
        let mut d_shifted = vec![S::ZERO; positions * cin];
        let mut member_scratch = vec![S::ZERO; cin * cout];
        let need_kernel = self.needs(kernel);
        let need_grid = self.needs(grid);
        for km in 0..kt * kn {
            let dt = (km / kn) as isize - (kt / 2) as isize;
            let dn = (km % kn) as isize - (kn / 2) as isize;
            if need_kernel {
                gather_shifted(&gv, &mut shifted, t, n, cin, dt, dn);
                // member gradient in contiguous [ci, co] scratch:
                // scratch[ci, co] += sum_pos shifted[pos, ci] * g[pos, co]
                member_scratch.iter_mut().for_each(|v| *v = S::ZERO);
                matmul_t_acc(&shifted, g, &mut member_scratch, positions, cin, cout);
                for co in 0..cout {
                    let dst = (co * kt * kn + km) * cin;
                    for ci in 0..cin {
                        dk[dst + ci] += member_scratch[ci * cout + co];
                    }
                }
            }
            if need_grid {
                // d_shifted = g @ member_kernel[cout, cin]
                d_shifted.iter_mut().for_each(|v| *v = S::ZERO);
                for pos in 0..positions {
                    let grow = &g[pos * cout..(pos + 1) * cout];
                    let drow = &mut d_shifted[pos * cin..(pos + 1) * cin];
                    for (co, &gc) in grow.iter().enumerate() {
                        let krow = &kv[(co * kt * kn + km) * cin..(co * kt * kn + km + 1) * cin];
                        axpy(gc, krow, drow);
                    }
                }
                scatter_shifted(&d_shifted, &mut dg, t, n, cin, dt, dn);
            }
        }
        if need_kernel {
            self.accumulate(kernel, &dk);
        }
        if need_grid {
            self.accumulate(grid, &dg);
        }
    }

    fn backward_bilinear(
        &mut self,
        grid: TensorId,
        offsets: TensorId,
        kt: usize,
        kn: usize,
        g: &[S],
    ) {
        let gs = self.shape(grid).to_vec();
        let (t, n, d) = (gs[0], gs[1], gs[2]);
        let k = kt * kn;
        let gv = self.nodes[grid.0].value.values().to_vec();
        let ov = self.nodes[offsets.0].value.values().to_vec();
        let need_grid = self.needs(grid);
        let need_off = self.needs(offsets);
        let mut dg = vec![S::ZERO; gv.len()];
        let mut doff = vec![S::ZERO; ov.len()];
        for ti in 0..t {
            for ni in 0..n {
                for km in 0..k {
                    let (raw_t, raw_n) = walk_coord(&ov, ti, ni, km, kt, kn, n, k);
                    let (t0, t1, ft) = split_coord(raw_t, t);
                    let (n0, n1, fn_) = split_coord(raw_n, n);
                    let src = ((ti * n + ni) * k + km) * d;
                    let grow = &g[src..src + d];
                    let w00 = (S::ONE - ft) * (S::ONE - fn_);
                    let w01 = (S::ONE - ft) * fn_;
                    let w10 = ft * (S::ONE - fn_);
                    let w11 = ft * fn_;
                    if need_grid {
                        axpy(w00, grow, &mut dg[(t0 * n + n0) * d..(t0 * n + n0) * d + d]);
                        axpy(w01, grow, &mut dg[(t0 * n + n1) * d..(t0 * n + n1) * d + d]);
                        axpy(w10, grow, &mut dg[(t1 * n + n0) * d..(t1 * n + n0) * d + d]);
                        axpy(w11, grow, &mut dg[(t1 * n + n1) * d..(t1 * n + n1) * d + d]);
                    }
                    if need_off {
                        // clamp saturates: zero derivative outside [0, hi);
                        // at integer coordinates the right-derivative applies.
                        let t_active = raw_t.to_f64() >= 0.0 && raw_t.to_f64() < (t - 1) as f64;
                        let n_active = raw_n.to_f64() >= 0.0 && raw_n.to_f64() < (n - 1) as f64;
                        let mut dt_acc = S::ZERO;
                        let mut dn_acc = S::ZERO;
                        if t_active || n_active {
                            let x00 = &gv[(t0 * n + n0) * d..(t0 * n + n0) * d + d];
                            let x01 = &gv[(t0 * n + n1) * d..(t0 * n + n1) * d + d];
                            let x10 = &gv[(t1 * n + n0) * d..(t1 * n + n0) * d + d];
                            let x11 = &gv[(t1 * n + n1) * d..(t1 * n + n1) * d + d];
                            for i in 0..d {
                                let gi = grow[i];
                                if t_active {
                                    dt_acc += gi
                                        * ((S::ONE - fn_) * (x10[i] - x00[i])
                                            + fn_ * (x11[i] - x01[i]));
                                }
                                if n_active {
                                    dn_acc += gi
                                        * ((S::ONE - ft) * (x01[i] - x00[i])
                                            + ft * (x11[i] - x10[i]));
                                }
                            }
                        }
                        doff[((ti * n + ni) * k + km) * 2] += dt_acc;
                        doff[((ti * n + ni) * k + km) * 2 + 1] += dn_acc;
                    }
                }
            }
        }
        if need_grid {
            self.accumulate(grid, &dg);
        }
        if need_off {
            self.accumulate(offsets, &doff);
        }
    }
}

fn idx_id(idx: usize) -> TensorId {
    TensorId(idx)
}

/// Copy `grid` shifted by (dt, dn) into `dst` (rows are positions), zeroing
/// out-of-grid rows.
fn gather_shifted<S: Scalar>(
    grid: &[S],
    dst: &mut [S],
    t: usize,
    n: usize,
    d: usize,
    dt: isize,
    dn: isize,
) {
    dst.iter_mut().for_each(|v| *v = S::ZERO);
    for ti in 0..t {
        let st = ti as isize + dt;
        if st < 0 || st as usize >= t {
            continue;
        }
        for ni in 0..n {
            let sn = ni as isize + dn;
            if sn < 0 || sn as usize >= n {
                continue;
            }
            let srow = (st as usize * n + sn as usize) * d;
            let drow = (ti * n + ni) * d;
            dst[drow..drow + d].copy_from_slice(&grid[srow..srow + d]);
        }
    }
}

/// Adjoint of `gather_shifted`: accumulate shifted rows back onto the grid.
fn scatter_shifted<S: Scalar>(
    src: &[S],
    grid_grad: &mut [S],
    t: usize,
    n: usize,
    d: usize,
    dt: isize,
    dn: isize,
) {
    for ti in 0..t {
        let st = ti as isize + dt;
        if st < 0 || st as usize >= t {
            continue;
        }
        for ni in 0..n {
            let sn = ni as isize + dn;
            if sn < 0 || sn as usize >= n {
                continue;
            }
            let drow = (st as usize * n + sn as usize) * d;
            let srow = (ti * n + ni) * d;
            for i in 0..d {
                grid_grad[drow + i] += src[srow + i];
            }
        }
    }
}

/// Raw (pre-clamp) walk coordinate of member `km` at position (ti, ni).
fn walk_coord<S: Scalar>(
    offsets: &[S],
    ti: usize,
    ni: usize,
    km: usize,
    kt: usize,
    kn: usize,
    n: usize,
    k: usize,
) -> (S, S) {
    let base = ((ti * n + ni) * k + km) * 2;
    let dt = (km / kn) as isize - (kt / 2) as isize;
    let dn = (km % kn) as isize - (kn / 2) as isize;
    let raw_t = S::from_f64((ti as isize + dt) as f64) + offsets[base];
    let raw_n = S::from_f64((ni as isize + dn) as f64) + offsets[base + 1];
    (raw_t, raw_n)
}

/// Clamp a raw coordinate to [0, len-1] and split into (lo, hi, frac) so that
/// the sampled value is `(1-frac)*x[lo] + frac*x[hi]`.
fn split_coord<S: Scalar>(raw: S, len: usize) -> (usize, usize, S) {
    let hi = S::from_f64((len - 1) as f64);
    let c = raw.max(S::ZERO).min(hi);
    if len == 1 {
        return (0, 0, S::ZERO);
    }
    let mut lo = c.floor().to_f64() as usize;
    if lo >= len - 1 {
        lo = len - 2;
    }
    let frac = c - S::from_f64(lo as f64);
    (lo, lo + 1, frac)
}
