//! Dynamically recorded operation tape with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for each forward pass. Operations validate
//! shapes, compute values eagerly, and record enough context to run the
//! backward sweep. [`Graph::backward`] walks the tape in reverse, filling the
//! gradient slot of every node it reaches and accumulating (+=) into the
//! gradient accumulators of the parameters that contributed.

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::ParamSet;
use crate::pyramid::RoiBox;
use crate::roi_align::{roi_align_backward, roi_align_forward, RoiAlignSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Conv2d { stride: usize, pad: usize },
    Linear,
    Softmax { axis: usize },
    Relu,
    Sigmoid,
    Add,
    Mul,
    Scale(f64),
    ConcatChannels { channels: Vec<usize> },
    ConcatRows { rows: Vec<usize> },
    Reshape,
    Transpose12,
    Bmm,
    RelPosEnergy { side: usize },
    RoiAlign { boxes: Vec<RoiBox>, spec: RoiAlignSpec },
    Upsample2x,
    SumAll,
    CrossEntropy { labels: Vec<usize>, probs: Vec<f64> },
    SmoothL1 { target: Vec<f64>, beta: f64 },
    Bce { target: Vec<f64> },
}

struct Node {
    op: Op,
    inputs: Vec<VarId>,
    value: Tensor,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<VarId>, value: Tensor) -> VarId {
        let id = VarId(self.nodes.len());
        self.nodes.push(Node { op, inputs, value });
        id
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass w.r.t. this node, if it was reached.
    pub fn grad(&self, id: VarId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    pub fn input(&mut self, value: Tensor) -> VarId {
        self.push(Op::Input, vec![], value)
    }

    /// Leaf tied to a parameter; backward accumulates into its accumulator.
    pub fn param(&mut self, params: &ParamSet, idx: usize) -> VarId {
        let value = params.get(idx).value.clone();
        self.push(Op::Param(idx), vec![], value)
    }

    pub fn param_by_name(&mut self, params: &ParamSet, name: &str) -> Result<VarId> {
        Ok(self.param(params, params.index_of(name)?))
    }

    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId, stride: usize, pad: usize) -> Result<VarId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Dim(format!("conv2d wants rank-4 input/weight, got {xs:?} / {ws:?}")));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
        if k != k2 {
            return Err(Error::Config(format!("conv2d kernel must be square, got {k}x{k2}")));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel size {k} must be odd")));
        }
        if wcin != cin {
            return Err(Error::Dim(format!("conv2d weight Cin {wcin} != input Cin {cin}")));
        }
        if bs != [cout] {
            return Err(Error::Dim(format!("conv2d bias shape {bs:?} != [{cout}]")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Dim(format!(
                "conv2d spatial {h}x{wd} (pad {pad}) smaller than kernel {k}"
            )));
        }
        let ho = kernels::conv_out_extent(h, k, stride, pad);
        let wo = kernels::conv_out_extent(wd, k, stride, pad);
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            n, cin, h, wd, cout, k, stride, pad,
        );
        let value = Tensor::new(vec![n, cout, ho, wo], out)?;
        Ok(self.push(Op::Conv2d { stride, pad }, vec![x, w, b], value))
    }

    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::Dim(format!("linear wants rank-2 input/weight, got {xs:?} / {ws:?}")));
        }
        let (r, d) = (xs[0], xs[1]);
        let (wd, e) = (ws[0], ws[1]);
        if d != wd {
            return Err(Error::Dim(format!("linear inner dims {d} != {wd}")));
        }
        if bs != [e] {
            return Err(Error::Dim(format!("linear bias shape {bs:?} != [{e}]")));
        }
        let mut out = vec![0.0; r * e];
        kernels::matmul(self.value(x).data(), self.value(w).data(), &mut out, r, d, e);
        let bias = self.value(b).data();
        for row in 0..r {
            for col in 0..e {
                out[row * e + col] += bias[col];
            }
        }
        let value = Tensor::new(vec![r, e], out)?;
        Ok(self.push(Op::Linear, vec![x, w, b], value))
    }

    pub fn softmax(&mut self, x: VarId, axis: usize) -> Result<VarId> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Config(format!(
                "softmax axis {axis} invalid for rank {}",
                shape.len()
            )));
        }
        let out = kernels::softmax_forward(self.value(x).data(), &shape, axis);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::Softmax { axis }, vec![x], value))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), out).unwrap();
        self.push(Op::Relu, vec![x], value)
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let value = Tensor::new(t.shape().to_vec(), out).unwrap();
        self.push(Op::Sigmoid, vec![x], value)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dim(format!(
                "add shape mismatch {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dim(format!(
                "mul shape mismatch {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(Op::Mul, vec![a, b], value))
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(t.shape().to_vec(), out).unwrap();
        self.push(Op::Scale(c), vec![x], value)
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[VarId]) -> Result<VarId> {
        if inputs.is_empty() {
            return Err(Error::Usage("concat_channels of nothing".into()));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if first.len() != 4 {
            return Err(Error::Dim("concat_channels wants rank-4".into()));
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut channels = Vec::with_capacity(inputs.len());
        for &i in inputs {
            let s = self.value(i).shape();
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::Dim(format!(
                    "concat_channels N/H/W mismatch: {s:?} vs {first:?}"
                )));
            }
            channels.push(s[1]);
        }
        let ctot: usize = channels.iter().sum();
        let mut out = vec![0.0; n * ctot * h * w];
        let hw = h * w;
        for ni in 0..n {
            let mut coff = 0;
            for (&inp, &ci) in inputs.iter().zip(&channels) {
                let src = self.value(inp).data();
                out[(ni * ctot + coff) * hw..(ni * ctot + coff + ci) * hw]
                    .copy_from_slice(&src[ni * ci * hw..(ni + 1) * ci * hw]);
                coff += ci;
            }
        }
        let value = Tensor::new(vec![n, ctot, h, w], out)?;
        Ok(self.push(Op::ConcatChannels { channels }, inputs.to_vec(), value))
    }

    /// Concatenate along the leading (row / batch) axis.
    pub fn concat_rows(&mut self, inputs: &[VarId]) -> Result<VarId> {
        if inputs.is_empty() {
            return Err(Error::Usage("concat_rows of nothing".into()));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        let tail = &first[1..];
        let mut rows = Vec::with_capacity(inputs.len());
        let mut out = Vec::new();
        for &i in inputs {
            let s = self.value(i).shape();
            if &s[1..] != tail {
                return Err(Error::Dim(format!(
                    "concat_rows trailing-shape mismatch: {s:?} vs {first:?}"
                )));
            }
            rows.push(s[0]);
            out.extend_from_slice(self.value(i).data());
        }
        let mut shape = vec![rows.iter().sum()];
        shape.extend_from_slice(tail);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::ConcatRows { rows }, inputs.to_vec(), value))
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> Result<VarId> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(Op::Reshape, vec![x], value))
    }

    /// Swap the last two axes of a rank-3 tensor.
    pub fn transpose12(&mut self, x: VarId) -> Result<VarId> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 {
            return Err(Error::Dim(format!("transpose12 wants rank-3, got {s:?}")));
        }
        let (b, m, n) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for i in 0..m {
                for j in 0..n {
                    out[(bi * n + j) * m + i] = src[(bi * m + i) * n + j];
                }
            }
        }
        let value = Tensor::new(vec![b, n, m], out)?;
        Ok(self.push(Op::Transpose12, vec![x], value))
    }

    /// Batched matmul: [B,M,K] x [B,K,N] -> [B,M,N].
    pub fn bmm(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Dim(format!("bmm shape mismatch {sa:?} x {sb:?}")));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bt * m * n];
        for bi in 0..bt {
            kernels::matmul(
                &self.value(a).data()[bi * m * k..(bi + 1) * m * k],
                &self.value(b).data()[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m, k, n,
            );
        }
        let value = Tensor::new(vec![bt, m, n], out)?;
        Ok(self.push(Op::Bmm, vec![a, b], value))
    }

    /// Relative-position attention energies on an S x S grid.
    ///
    /// q: [R, M, D, P] per-head query projections (P = S*S);
    /// table: [M, (2S-1)^2, D] learned embedding per (head, offset).
    /// Output [R, M, P, P]: energy(q_pos, k_pos) = <q[.,q_pos], table[offset(k_pos - q_pos)]>.
    pub fn rel_pos_energy(&mut self, q: VarId, table: VarId, side: usize) -> Result<VarId> {
        let sq = self.value(q).shape().to_vec();
        let st = self.value(table).shape().to_vec();
        let p = side * side;
        let t = (2 * side - 1) * (2 * side - 1);
        if sq.len() != 4 || sq[3] != p {
            return Err(Error::Dim(format!("rel_pos_energy q shape {sq:?}, want [R,M,D,{p}]")));
        }
        let (r, m, d) = (sq[0], sq[1], sq[2]);
        if st != [m, t, d] {
            return Err(Error::Dim(format!(
                "rel_pos_energy table shape {st:?}, want [{m},{t},{d}]"
            )));
        }
        let qd = self.value(q).data();
        let td = self.value(table).data();
        let mut out = vec![0.0; r * m * p * p];
        for ri in 0..r {
            for mi in 0..m {
                for qp in 0..p {
                    let (qy, qx) = (qp / side, qp % side);
                    for kp in 0..p {
                        let (ky, kx) = (kp / side, kp % side);
                        let off = (ky + side - 1 - qy) * (2 * side - 1) + (kx + side - 1 - qx);
                        let mut acc = 0.0;
                        for di in 0..d {
                            acc += qd[((ri * m + mi) * d + di) * p + qp]
                                * td[(mi * t + off) * d + di];
                        }
                        out[((ri * m + mi) * p + qp) * p + kp] = acc;
                    }
                }
            }
        }
        let value = Tensor::new(vec![r, m, p, p], out)?;
        Ok(self.push(Op::RelPosEnergy { side }, vec![q, table], value))
    }

    /// RoI Align over a [N,C,H,W] level; boxes are treated as constants.
    pub fn roi_align(&mut self, level: VarId, boxes: &[RoiBox], spec: RoiAlignSpec) -> Result<VarId> {
        let s = self.value(level).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::Dim(format!("roi_align wants rank-4 level, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let out = roi_align_forward(self.value(level).data(), n, c, h, w, boxes, &spec)?;
        let value = Tensor::new(vec![boxes.len(), c, spec.out_size, spec.out_size], out)?;
        Ok(self.push(
            Op::RoiAlign { boxes: boxes.to_vec(), spec },
            vec![level],
            value,
        ))
    }

    /// 2x nearest-neighbor upsampling of a rank-4 tensor.
    pub fn upsample2x(&mut self, x: VarId) -> Result<VarId> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::Dim(format!("upsample2x wants rank-4, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * 4 * h * w];
        let (ho, wo) = (2 * h, 2 * w);
        for nc in 0..n * c {
            let sp = &src[nc * h * w..(nc + 1) * h * w];
            let op = &mut out[nc * ho * wo..(nc + 1) * ho * wo];
            for y in 0..ho {
                for x2 in 0..wo {
                    op[y * wo + x2] = sp[(y / 2) * w + x2 / 2];
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(Op::Upsample2x, vec![x], value))
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let mut acc = 0.0;
        for v in self.value(x).data() {
            acc += v;
        }
        self.push(Op::SumAll, vec![x], Tensor::scalar(acc))
    }

    /// Mean-reduced cross entropy over rows of [R,K] logits.
    pub fn cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::Dim(format!("cross_entropy wants [R,K] logits, got {s:?}")));
        }
        let (r, k) = (s[0], s[1]);
        if labels.len() != r {
            return Err(Error::Dim(format!("{} labels for {r} rows", labels.len())));
        }
        if r == 0 {
            return Err(Error::Input("cross_entropy over zero rows".into()));
        }
        for &l in labels {
            if l >= k {
                return Err(Error::Input(format!("label {l} out of range [0,{k})")));
            }
        }
        let probs = kernels::softmax_forward(self.value(logits).data(), &s, 1);
        let mut loss = 0.0;
        for (row, &l) in labels.iter().enumerate() {
            loss -= probs[row * k + l].max(1e-300).ln();
        }
        loss /= r as f64;
        let value = Tensor::scalar(loss);
        Ok(self.push(
            Op::CrossEntropy { labels: labels.to_vec(), probs },
            vec![logits],
            value,
        ))
    }

    /// Mean-reduced smooth-L1 (Huber) loss against a constant target.
    pub fn smooth_l1(&mut self, pred: VarId, target: &Tensor, beta: f64) -> Result<VarId> {
        if self.value(pred).shape() != target.shape() {
            return Err(Error::Dim(format!(
                "smooth_l1 shape mismatch {:?} vs {:?}",
                self.value(pred).shape(),
                target.shape()
            )));
        }
        if beta <= 0.0 {
            return Err(Error::Config("smooth_l1 beta must be positive".into()));
        }
        let n = target.len();
        if n == 0 {
            return Err(Error::Input("smooth_l1 over zero elements".into()));
        }
        let mut loss = 0.0;
        for (&p, &t) in self.value(pred).data().iter().zip(target.data()) {
            let d = (p - t).abs();
            loss += if d < beta { 0.5 * d * d / beta } else { d - 0.5 * beta };
        }
        loss /= n as f64;
        let value = Tensor::scalar(loss);
        Ok(self.push(
            Op::SmoothL1 { target: target.data().to_vec(), beta },
            vec![pred],
            value,
        ))
    }

    /// Mean-reduced binary cross entropy; probabilities are clamped to
    /// [1e-7, 1 - 1e-7] inside the op.
    pub fn bce(&mut self, prob: VarId, target: &Tensor) -> Result<VarId> {
        if self.value(prob).shape() != target.shape() {
            return Err(Error::Dim(format!(
                "bce shape mismatch {:?} vs {:?}",
                self.value(prob).shape(),
                target.shape()
            )));
        }
        let n = target.len();
        if n == 0 {
            return Err(Error::Input("bce over zero elements".into()));
        }
        let mut loss = 0.0;
        for (&p, &t) in self.value(prob).data().iter().zip(target.data()) {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        }
        loss /= n as f64;
        let value = Tensor::scalar(loss);
        Ok(self.push(Op::Bce { target: target.data().to_vec() }, vec![prob], value))
    }

    /// Reverse sweep from a scalar output. Gradients are accumulated into each
    /// reached node's gradient slot and into the accumulators of `params`.
    pub fn backward(&mut self, output: VarId, params: &mut ParamSet) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let input_grads = self.input_grads(id, &g)?;
            let node = &mut self.nodes[id];
            node.value.accumulate_grad(&g);
            if let Op::Param(pidx) = node.op {
                params.accumulate(pidx, &g);
            }
            let inputs = node.inputs.clone();
            for (inp, ig) in inputs.into_iter().zip(input_grads) {
                match &mut grads[inp.0] {
                    Some(existing) => {
                        for (dst, src) in existing.iter_mut().zip(&ig) {
                            *dst += src;
                        }
                    }
                    slot => *slot = Some(ig),
                }
            }
        }
        Ok(())
    }

    /// Per-op vector-Jacobian products: gradient w.r.t. each input of node `id`
    /// given the gradient `g` w.r.t. its output.
    fn input_grads(&self, id: usize, g: &[f64]) -> Result<Vec<Vec<f64>>> {
        let node = &self.nodes[id];
        let iv = |i: usize| &self.nodes[node.inputs[i].0].value;
        Ok(match &node.op {
            Op::Input | Op::Param(_) => vec![],
            Op::Conv2d { stride, pad } => {
                let xs = iv(0).shape();
                let ws = iv(1).shape();
                let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, k) = (ws[0], ws[2]);
                let mut dx = vec![0.0; iv(0).len()];
                let mut dw = vec![0.0; iv(1).len()];
                let mut db = vec![0.0; iv(2).len()];
                kernels::conv2d_backward(
                    iv(0).data(), iv(1).data(), g,
                    n, cin, h, w, cout, k, *stride, *pad,
                    &mut dx, &mut dw, &mut db,
                );
                vec![dx, dw, db]
            }
            Op::Linear => {
                let (r, d) = (iv(0).shape()[0], iv(0).shape()[1]);
                let e = iv(1).shape()[1];
                let mut dx = vec![0.0; r * d];
                kernels::matmul_nt_acc(g, iv(1).data(), &mut dx, r, e, d);
                let mut dw = vec![0.0; d * e];
                kernels::matmul_tn(iv(0).data(), g, &mut dw, r, d, e);
                let mut db = vec![0.0; e];
                for row in 0..r {
                    for col in 0..e {
                        db[col] += g[row * e + col];
                    }
                }
                vec![dx, dw, db]
            }
            Op::Softmax { axis } => {
                let mut dx = vec![0.0; g.len()];
                kernels::softmax_backward(node.value.data(), g, node.value.shape(), *axis, &mut dx);
                vec![dx]
            }
            Op::Relu => {
                let dx = iv(0)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| if x > 0.0 { gy } else { 0.0 })
                    .collect();
                vec![dx]
            }
            Op::Sigmoid => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gy)| gy * y * (1.0 - y))
                    .collect();
                vec![dx]
            }
            Op::Add => vec![g.to_vec(), g.to_vec()],
            Op::Mul => {
                let da = iv(1).data().iter().zip(g).map(|(&b, &gy)| b * gy).collect();
                let db = iv(0).data().iter().zip(g).map(|(&a, &gy)| a * gy).collect();
                vec![da, db]
            }
            Op::Scale(c) => vec![g.iter().map(|&gy| gy * c).collect()],
            Op::ConcatChannels { channels } => {
                let s = node.value.shape();
                let (n, ctot, hw) = (s[0], s[1], s[2] * s[3]);
                let mut outs: Vec<Vec<f64>> = channels.iter().map(|&c| vec![0.0; n * c * hw]).collect();
                for ni in 0..n {
                    let mut coff = 0;
                    for (out, &ci) in outs.iter_mut().zip(channels) {
                        out[ni * ci * hw..(ni + 1) * ci * hw]
                            .copy_from_slice(&g[(ni * ctot + coff) * hw..(ni * ctot + coff + ci) * hw]);
                        coff += ci;
                    }
                }
                outs
            }
            Op::ConcatRows { rows } => {
                let tail: usize = node.value.shape()[1..].iter().product();
                let mut outs = Vec::with_capacity(rows.len());
                let mut off = 0;
                for &r in rows {
                    outs.push(g[off * tail..(off + r) * tail].to_vec());
                    off += r;
                }
                outs
            }
            Op::Reshape => vec![g.to_vec()],
            Op::Transpose12 => {
                let s = node.value.shape();
                let (b, n, m) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; g.len()];
                for bi in 0..b {
                    for j in 0..n {
                        for i in 0..m {
                            dx[(bi * m + i) * n + j] = g[(bi * n + j) * m + i];
                        }
                    }
                }
                vec![dx]
            }
            Op::Bmm => {
                let sa = iv(0).shape();
                let sb = iv(1).shape();
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let mut da = vec![0.0; iv(0).len()];
                let mut db = vec![0.0; iv(1).len()];
                for bi in 0..bt {
                    let gb = &g[bi * m * n..(bi + 1) * m * n];
                    kernels::matmul_nt_acc(
                        gb,
                        &iv(1).data()[bi * k * n..(bi + 1) * k * n],
                        &mut da[bi * m * k..(bi + 1) * m * k],
                        m, n, k,
                    );
                    kernels::matmul_tn(
                        &iv(0).data()[bi * m * k..(bi + 1) * m * k],
                        gb,
                        &mut db[bi * k * n..(bi + 1) * k * n],
                        m, k, n,
                    );
                }
                vec![da, db]
            }
            Op::RelPosEnergy { side } => {
                let side = *side;
                let sq = iv(0).shape();
                let (r, m, d, p) = (sq[0], sq[1], sq[2], sq[3]);
                let t = (2 * side - 1) * (2 * side - 1);
                let qd = iv(0).data();
                let td = iv(1).data();
                let mut dq = vec![0.0; qd.len()];
                let mut dt = vec![0.0; td.len()];
                for ri in 0..r {
                    for mi in 0..m {
                        for qp in 0..p {
                            let (qy, qx) = (qp / side, qp % side);
                            for kp in 0..p {
                                let (ky, kx) = (kp / side, kp % side);
                                let off = (ky + side - 1 - qy) * (2 * side - 1) + (kx + side - 1 - qx);
                                let gy = g[((ri * m + mi) * p + qp) * p + kp];
                                if gy == 0.0 {
                                    continue;
                                }
                                for di in 0..d {
                                    dq[((ri * m + mi) * d + di) * p + qp] +=
                                        gy * td[(mi * t + off) * d + di];
                                    dt[(mi * t + off) * d + di] +=
                                        gy * qd[((ri * m + mi) * d + di) * p + qp];
                                }
                            }
                        }
                    }
                }
                vec![dq, dt]
            }
            Op::RoiAlign { boxes, spec } => {
                let s = iv(0).shape();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let mut dx = vec![0.0; iv(0).len()];
                roi_align_backward(g, n, c, h, w, boxes, spec, &mut dx);
                vec![dx]
            }
            Op::Upsample2x => {
                let s = iv(0).shape();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (2 * h, 2 * w);
                let mut dx = vec![0.0; iv(0).len()];
                for nc in 0..n * c {
                    let gp = &g[nc * ho * wo..(nc + 1) * ho * wo];
                    let dp = &mut dx[nc * h * w..(nc + 1) * h * w];
                    for y in 0..ho {
                        for x2 in 0..wo {
                            dp[(y / 2) * w + x2 / 2] += gp[y * wo + x2];
                        }
                    }
                }
                vec![dx]
            }
            Op::SumAll => vec![vec![g[0]; iv(0).len()]],
            Op::CrossEntropy { labels, probs } => {
                let k = iv(0).shape()[1];
                let r = labels.len();
                let scale = g[0] / r as f64;
                let mut dx = probs.iter().map(|&p| p * scale).collect::<Vec<_>>();
                for (row, &l) in labels.iter().enumerate() {
                    dx[row * k + l] -= scale;
                }
                vec![dx]
            }
            Op::SmoothL1 { target, beta } => {
                let n = target.len() as f64;
                let dx = iv(0)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        let d = p - t;
                        let dd = if d.abs() < *beta { d / beta } else { d.signum() };
                        dd * g[0] / n
                    })
                    .collect();
                vec![dx]
            }
            Op::Bce { target } => {
                let n = target.len() as f64;
                let dx = iv(0)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        if !(1e-7..=1.0 - 1e-7).contains(&p) {
                            // Clamped region: flat in p.
                            0.0
                        } else {
                            ((1.0 - t) / (1.0 - p) - t / p) * g[0] / n
                        }
                    })
                    .collect();
                vec![dx]
            }
        })
    }
}
