use super::kernels::{gemm, MatRef};
use super::param::{GradSet, ParamId, ParamSet};
use super::{shape_err, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Debug)]
enum Op {
    Input,
    Leaf,
    Param(ParamId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        act: Activation,
    },
    Relu(NodeId),
    SegmentMax {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Reshape(NodeId),
    ConvTranspose {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    ChannelsLast(NodeId),
    Affine {
        x: NodeId,
        scale: Vec<f64>,
    },
    Add(NodeId, NodeId),
    BroadcastAdd {
        x: NodeId,
        b: NodeId,
    },
    Scale(NodeId, f64),
    Sum(NodeId),
    WeightedSum {
        x: NodeId,
        weights: Vec<f64>,
    },
    External {
        x: NodeId,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    frozen: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose parameters are treated as constants.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            frozen: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Differentiable leaf, e.g. an input whose gradient is inspected.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        let frozen = self.frozen;
        self.push(params.value(id).clone(), Op::Param(id), !frozen)
    }

    /// `act(x·w + b)` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, act: Activation) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(shape_err("linear", format!("x {xs:?} · w {ws:?}")));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err(
                    "linear",
                    format!("bias {:?} for {dout} outputs", self.shape(b)),
                ));
            }
        }
        let mut out = vec![0.0; n * dout];
        gemm(
            MatRef::row_major(self.data(x), n, din),
            MatRef::row_major(self.data(w), din, dout),
            0.0,
            &mut out,
        );
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_exact_mut(dout) {
                row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
            }
        }
        if act == Activation::Relu {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(vec![n, dout], out)?, Op::Linear { x, w, b, act }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a.max(0.0)).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Max over consecutive row blocks: `[segments·m, c] → [segments, c]`.
    /// Ties go to the lowest row.
    pub fn segment_max(&mut self, x: NodeId, segments: usize) -> Result<NodeId> {
        let xs = self.shape(x);
        if xs.len() != 2 || segments == 0 || xs[0] % segments != 0 || xs[0] == 0 {
            return Err(shape_err("segment_max", format!("{xs:?} into {segments} segments")));
        }
        let (rows, c) = (xs[0], xs[1]);
        let m = rows / segments;
        let data = self.data(x);
        let mut out = vec![f64::NEG_INFINITY; segments * c];
        let mut argmax = vec![0usize; segments * c];
        for s in 0..segments {
            let best = &mut out[s * c..(s + 1) * c];
            let arg = &mut argmax[s * c..(s + 1) * c];
            for r in s * m..(s + 1) * m {
                let row = &data[r * c..(r + 1) * c];
                for ch in 0..c {
                    if row[ch] > best[ch] || r == s * m {
                        best[ch] = row[ch];
                        arg[ch] = r;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![segments, c], out)?, Op::SegmentMax { x, argmax }, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != v.len() {
            return Err(shape_err("reshape", format!("{:?} to {shape:?}", v.shape())));
        }
        let out = Tensor::new(shape.to_vec(), v.data().to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Transposed 2D convolution. `x: [B, Cin, H, W]`, `w: [Cin, Cout, k, k]`,
    /// output `[B, Cout, (H−1)·stride − 2·padding + k, …]`.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] || ws[2] != ws[3] || stride == 0 {
            return Err(shape_err(
                "conv_transpose2d",
                format!("x {xs:?}, w {ws:?}, stride {stride}"),
            ));
        }
        let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[1], ws[2]);
        let ho = ((h - 1) * stride + k).checked_sub(2 * padding).filter(|&v| v > 0);
        let wo = ((wd - 1) * stride + k).checked_sub(2 * padding).filter(|&v| v > 0);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(shape_err("conv_transpose2d", "padding removes the whole output"));
        };
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err(
                    "conv_transpose2d",
                    format!("bias {:?} for {cout} channels", self.shape(b)),
                ));
            }
        }
        let geo = ConvGeom {
            cin,
            cout,
            h,
            w: wd,
            ho,
            wo,
            k,
            stride,
            padding,
        };
        let ckk = cout * k * k;
        let hw = h * wd;
        let mut out = vec![0.0; batch * cout * ho * wo];
        let mut cols = vec![0.0; ckk * hw];
        let xdata = self.data(x);
        let wdata = self.data(w);
        for bi in 0..batch {
            let xb = &xdata[bi * cin * hw..(bi + 1) * cin * hw];
            gemm(
                MatRef::transposed(wdata, ckk, cin),
                MatRef::row_major(xb, cin, hw),
                0.0,
                &mut cols,
            );
            geo.col2im(&cols, &mut out[bi * cout * ho * wo..(bi + 1) * cout * ho * wo]);
        }
        if let Some(b) = b {
            let bias = self.data(b);
            for plane in out.chunks_exact_mut(ho * wo).enumerate() {
                let co = plane.0 % cout;
                plane.1.iter_mut().for_each(|v| *v += bias[co]);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(vec![batch, cout, ho, wo], out)?,
            Op::ConvTranspose {
                x,
                w,
                b,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// `[B, C, H, W] → [B, H·W, C]`.
    pub fn channels_last(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("channels_last", format!("{xs:?}")));
        }
        let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for ch in 0..c {
                for p in 0..hw {
                    out[(bi * hw + p) * c + ch] = src[(bi * c + ch) * hw + p];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![b, hw, c], out)?, Op::ChannelsLast(x), rg))
    }

    /// Per-channel `x·scale + shift` over the last axis.
    pub fn affine(&mut self, x: NodeId, scale: &[f64], shift: &[f64]) -> Result<NodeId> {
        let xs = self.shape(x);
        let c = *xs.last().unwrap_or(&0);
        if c == 0 || scale.len() != c || shift.len() != c {
            return Err(shape_err("affine", format!("{xs:?} with {} scales", scale.len())));
        }
        let v = &self.nodes[x.0].value;
        let data = v
            .data()
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(scale).zip(shift).map(|((x, s), t)| x * s + t))
            .collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::Affine {
                x,
                scale: scale.to_vec(),
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `x + b` where `b`'s shape equals the trailing axes of `x`.
    pub fn broadcast_add(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs.is_empty() || bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(shape_err("broadcast_add", format!("{xs:?} + {bs:?}")));
        }
        let bias = self.data(b);
        let data = self
            .data(x)
            .chunks_exact(bias.len())
            .flat_map(|row| row.iter().zip(bias).map(|(a, c)| a + c))
            .collect();
        let out = Tensor::new(xs.to_vec(), data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::BroadcastAdd { x, b }, rg))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let v = &self.nodes[x.0].value;
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * factor).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `Σ weights ⊙ x` as a scalar.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<f64>) -> Result<NodeId> {
        if weights.len() != self.value(x).len() {
            return Err(shape_err(
                "weighted_sum",
                format!("{} weights for {:?}", weights.len(), self.shape(x)),
            ));
        }
        let s = self.data(x).iter().zip(&weights).map(|(a, w)| a * w).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    /// Scalar loss computed outside the graph, given its value and its
    /// gradient with respect to `x`.
    pub fn external_loss(&mut self, x: NodeId, value: f64, grad: Vec<f64>) -> Result<NodeId> {
        if grad.len() != self.value(x).len() {
            return Err(shape_err(
                "external_loss",
                format!("gradient of length {} for {:?}", grad.len(), self.shape(x)),
            ));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(value), Op::External { x, grad }, rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        let mut kept: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Leaf | Op::Param(_) => kept[i] = Some(g),
                Op::Linear { x, w, b, act } => {
                    let (xs, ws) = (self.shape(*x), self.shape(*w));
                    let (rows, din, dout) = (xs[0], xs[1], ws[1]);
                    let mut gp = g;
                    if *act == Activation::Relu {
                        for (gv, &o) in gp.iter_mut().zip(node.value.data()) {
                            if o <= 0.0 {
                                *gv = 0.0;
                            }
                        }
                    }
                    if self.rg(*x) {
                        let dx = slot(&mut grads, *x, rows * din);
                        gemm(
                            MatRef::row_major(&gp, rows, dout),
                            MatRef::transposed(self.data(*w), dout, din),
                            1.0,
                            dx,
                        );
                    }
                    if self.rg(*w) {
                        let dw = slot(&mut grads, *w, din * dout);
                        gemm(
                            MatRef::transposed(self.data(*x), din, rows),
                            MatRef::row_major(&gp, rows, dout),
                            1.0,
                            dw,
                        );
                    }
                    if let Some(b) = b.filter(|b| self.rg(*b)) {
                        let db = slot(&mut grads, b, dout);
                        for row in gp.chunks_exact(dout) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                    }
                }
                Op::Relu(x) => {
                    if self.rg(*x) {
                        let dx = slot(&mut grads, *x, g.len());
                        for ((d, gv), &o) in dx.iter_mut().zip(&g).zip(node.value.data()) {
                            if o > 0.0 {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::SegmentMax { x, argmax } => {
                    if self.rg(*x) {
                        let c = node.value.shape()[1];
                        let len = self.value(*x).len();
                        let dx = slot(&mut grads, *x, len);
                        for (k, (&row, gv)) in argmax.iter().zip(&g).enumerate() {
                            dx[row * c + k % c] += gv;
                        }
                    }
                }
                Op::Reshape(x) | Op::Scale(x, _) | Op::Sum(x) => {
                    if self.rg(*x) {
                        let len = self.value(*x).len();
                        let dx = slot(&mut grads, *x, len);
                        match &node.op {
                            Op::Reshape(_) => dx.iter_mut().zip(&g).for_each(|(d, v)| *d += v),
                            Op::Scale(_, f) => dx.iter_mut().zip(&g).for_each(|(d, v)| *d += f * v),
                            _ => dx.iter_mut().for_each(|d| *d += g[0]),
                        }
                    }
                }
                Op::ConvTranspose {
                    x,
                    w,
                    b,
                    stride,
                    padding,
                } => self.conv_transpose_backward(&mut grads, node, &g, *x, *w, *b, *stride, *padding),
                Op::ChannelsLast(x) => {
                    if self.rg(*x) {
                        let xs = self.shape(*x);
                        let (bsz, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                        let dx = slot(&mut grads, *x, bsz * c * hw);
                        for bi in 0..bsz {
                            for ch in 0..c {
                                for p in 0..hw {
                                    dx[(bi * c + ch) * hw + p] += g[(bi * hw + p) * c + ch];
                                }
                            }
                        }
                    }
                }
                Op::Affine { x, scale } => {
                    if self.rg(*x) {
                        let c = scale.len();
                        let dx = slot(&mut grads, *x, g.len());
                        for (k, (d, gv)) in dx.iter_mut().zip(&g).enumerate() {
                            *d += gv * scale[k % c];
                        }
                    }
                }
                Op::Add(a, b) => {
                    for id in [*a, *b] {
                        if self.rg(id) {
                            let d = slot(&mut grads, id, g.len());
                            d.iter_mut().zip(&g).for_each(|(d, v)| *d += v);
                        }
                    }
                }
                Op::BroadcastAdd { x, b } => {
                    if self.rg(*x) {
                        let dx = slot(&mut grads, *x, g.len());
                        dx.iter_mut().zip(&g).for_each(|(d, v)| *d += v);
                    }
                    if self.rg(*b) {
                        let n = self.value(*b).len();
                        let db = slot(&mut grads, *b, n);
                        for row in g.chunks_exact(n) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                    }
                }
                Op::WeightedSum { x, weights } => {
                    if self.rg(*x) {
                        let dx = slot(&mut grads, *x, weights.len());
                        dx.iter_mut().zip(weights).for_each(|(d, w)| *d += g[0] * w);
                    }
                }
                Op::External { x, grad } => {
                    if self.rg(*x) {
                        let dx = slot(&mut grads, *x, grad.len());
                        dx.iter_mut().zip(grad).for_each(|(d, v)| *d += g[0] * v);
                    }
                }
            }
        }

        let params = self.nodes[..n]
            .iter()
            .enumerate()
            .filter_map(|(i, node)| match node.op {
                Op::Param(id) if node.requires_grad => Some((NodeId(i), id)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: kept, params })
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_transpose_backward(
        &self,
        grads: &mut [Option<Vec<f64>>],
        node: &Node,
        g: &[f64],
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) {
        let (xs, ws, os) = (self.shape(x), self.shape(w), node.value.shape());
        let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[1], ws[2]);
        let (ho, wo) = (os[2], os[3]);
        let geo = ConvGeom {
            cin,
            cout,
            h,
            w: wd,
            ho,
            wo,
            k,
            stride,
            padding,
        };
        let ckk = cout * k * k;
        let hw = h * wd;
        if let Some(b) = b.filter(|b| self.rg(*b)) {
            let db = slot(grads, b, cout);
            for (p, plane) in g.chunks_exact(ho * wo).enumerate() {
                db[p % cout] += plane.iter().sum::<f64>();
            }
        }
        let (need_x, need_w) = (self.rg(x), self.rg(w));
        if !(need_x || need_w) {
            return;
        }
        let mut dcols = vec![0.0; ckk * hw];
        let xdata = self.data(x);
        let wdata = self.data(w);
        for bi in 0..batch {
            geo.im2col(&g[bi * cout * ho * wo..(bi + 1) * cout * ho * wo], &mut dcols);
            if need_x {
                let dx = slot(grads, x, batch * cin * hw);
                gemm(
                    MatRef::row_major(wdata, cin, ckk),
                    MatRef::row_major(&dcols, ckk, hw),
                    1.0,
                    &mut dx[bi * cin * hw..(bi + 1) * cin * hw],
                );
            }
            if need_w {
                let dw = slot(grads, w, cin * ckk);
                let xb = &xdata[bi * cin * hw..(bi + 1) * cin * hw];
                gemm(
                    MatRef::row_major(xb, cin, hw),
                    MatRef::transposed(&dcols, hw, ckk),
                    1.0,
                    dw,
                );
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

struct ConvGeom {
    #[allow(dead_code)]
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    k: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    /// Output coordinate for input index `i` and kernel tap `t`, if in range.
    fn out_index(&self, i: usize, t: usize, limit: usize) -> Option<usize> {
        (i * self.stride + t).checked_sub(self.padding).filter(|&o| o < limit)
    }

    /// Scatter-adds `cols: [Cout·k·k, H·W]` into one output image.
    fn col2im(&self, cols: &[f64], out: &mut [f64]) {
        let hw = self.h * self.w;
        for co in 0..self.cout {
            let plane = &mut out[co * self.ho * self.wo..(co + 1) * self.ho * self.wo];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = &cols[((co * self.k + ky) * self.k + kx) * hw..][..hw];
                    for iy in 0..self.h {
                        let Some(oy) = self.out_index(iy, ky, self.ho) else {
                            continue;
                        };
                        for ix in 0..self.w {
                            if let Some(ox) = self.out_index(ix, kx, self.wo) {
                                plane[oy * self.wo + ox] += row[iy * self.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Gathers an output-shaped gradient back into column layout.
    fn im2col(&self, grad: &[f64], cols: &mut [f64]) {
        let hw = self.h * self.w;
        for co in 0..self.cout {
            let plane = &grad[co * self.ho * self.wo..(co + 1) * self.ho * self.wo];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = &mut cols[((co * self.k + ky) * self.k + kx) * hw..][..hw];
                    for iy in 0..self.h {
                        let oy = self.out_index(iy, ky, self.ho);
                        for ix in 0..self.w {
                            row[iy * self.w + ix] = match (oy, self.out_index(ix, kx, self.wo)) {
                                (Some(oy), Some(ox)) => plane[oy * self.wo + ox],
                                _ => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of leaves and parameters from one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(NodeId, ParamId)>,
}

impl Gradients {
    /// Gradient of a leaf or parameter node; `None` when nothing reached it.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into `out`.
    pub fn accumulate(&self, out: &mut GradSet) {
        for &(node, pid) in &self.params {
            if let Some(g) = self.get(node) {
                out.get_mut(pid).iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
        }
    }
}
