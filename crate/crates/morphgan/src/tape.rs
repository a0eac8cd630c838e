//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every primitive's backward rule is expressed by emitting further tape
//! nodes, so a gradient is itself a differentiable value and second-order
//! quantities (the R1 penalty) come from running `backward` on the output of
//! a previous `backward`. Ops whose second derivative is never needed return
//! an error instead of silently producing wrong values.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a value recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Val(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Val, Val),
    Sub(Val, Val),
    Mul(Val, Val),
    Scale(Val, f32),
    AddScalar(Val, f32),
    Sum(Val),
    Broadcast(Val, Vec<usize>),
    Matmul { a: Val, b: Val, ta: bool, tb: bool },
    AddBiasC(Val, Val),
    ReduceNhw(Val),
    BroadcastC(Val, [usize; 3]),
    AddBiasRow(Val, Val),
    ReduceRows(Val),
    BroadcastRow(Val, usize),
    RepeatN(Val, usize),
    ReduceN(Val),
    MulChannels(Val, Val),
    ReduceHw(Val),
    BroadcastHw(Val, [usize; 2]),
    LeakyRelu(Val, f32),
    MulMask(Val, Val, f32),
    Tanh(Val),
    Sigmoid(Val),
    Softplus(Val),
    Square(Val),
    Sqrt(Val),
    Recip(Val),
    Conv2d { x: Val, w: Val, stride: usize, pad: usize },
    ConvGradInput { gy: Val, w: Val, stride: usize, pad: usize, h: usize, wdim: usize },
    ConvGradWeight { x: Val, gy: Val, stride: usize, pad: usize, k: usize },
    ResizeBilinear(Val, usize, usize),
    ResizeAdjoint(Val, usize, usize),
    UpsampleNearest(Val, usize),
    NearestAdjoint(Val, usize),
    BilinearSample { src: Val, grid: Val },
    BilinearGradSrc { gout: Val, grid: Val, h: usize, w: usize },
    BilinearGradGrid { src: Val, grid: Val, gout: Val },
    ConcatC(Vec<Val>),
    SliceC(Val, usize, usize),
    Reshape(Val),
}

impl Op {
    fn parents(&self) -> Vec<Val> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddBiasC(a, b) | AddBiasRow(a, b)
            | MulChannels(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a, _) | Sum(a) | Broadcast(a, _) | ReduceNhw(a)
            | BroadcastC(a, _) | ReduceRows(a) | BroadcastRow(a, _) | RepeatN(a, _)
            | ReduceN(a) | ReduceHw(a) | BroadcastHw(a, _) | LeakyRelu(a, _) | Tanh(a)
            | Sigmoid(a) | Softplus(a) | Square(a) | Sqrt(a) | Recip(a)
            | ResizeBilinear(a, _, _) | ResizeAdjoint(a, _, _) | UpsampleNearest(a, _)
            | NearestAdjoint(a, _) | SliceC(a, _, _) | Reshape(a) => vec![*a],
            MulMask(a, b, _) => vec![*a, *b],
            Matmul { a, b, .. } => vec![*a, *b],
            Conv2d { x, w, .. } => vec![*x, *w],
            ConvGradInput { gy, w, .. } => vec![*gy, *w],
            ConvGradWeight { x, gy, .. } => vec![*x, *gy],
            BilinearSample { src, grid } => vec![*src, *grid],
            BilinearGradSrc { gout, grid, .. } => vec![*gout, *grid],
            BilinearGradGrid { src, grid, gout } => vec![*src, *grid, *gout],
            ConcatC(vs) => vs.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradient handles produced by one `backward` call.
pub struct Grads {
    map: Vec<Option<Val>>,
}

impl Grads {
    pub fn get(&self, v: Val) -> Option<Val> {
        self.map.get(v.0).copied().flatten()
    }

    /// Gradient tensor, or zeros for a value the output does not depend on.
    pub fn tensor(&self, tape: &Tape, v: Val) -> Tensor {
        match self.get(v) {
            Some(g) => tape.value(g).clone(),
            None => Tensor::zeros(tape.value(v).shape()),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    /// Drops all recorded nodes but keeps the allocation.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Val) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Val {
        self.nodes.push(Node { op, value });
        Val(self.nodes.len() - 1)
    }

    /// Records an input value.
    pub fn leaf(&mut self, t: Tensor) -> Val {
        self.push(Op::Leaf, t)
    }

    fn shape_of(&self, v: Val) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, a: Val, b: Val, what: &str) -> Result<()> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape_of(a),
                self.shape_of(b)
            )));
        }
        Ok(())
    }

    // -- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip(self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip(self.value(b), |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: Val, c: f32) -> Val {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: Val, c: f32) -> Val {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a, c), v)
    }

    pub fn sum(&mut self, a: Val) -> Val {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: Val) -> Val {
        let n = self.value(a).numel() as f32;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn broadcast(&mut self, a: Val, shape: &[usize]) -> Result<Val> {
        if !self.value(a).is_scalar() {
            return Err(Error::shape("broadcast source must be scalar"));
        }
        let v = Tensor::full(shape, self.value(a).item());
        Ok(self.push(Op::Broadcast(a, shape.to_vec()), v))
    }

    pub fn leaky_relu(&mut self, a: Val, slope: f32) -> Val {
        let v = self.value(a).map(|x| kernels::leaky_relu(x, slope));
        self.push(Op::LeakyRelu(a, slope), v)
    }

    fn mul_mask(&mut self, upstream: Val, src: Val, slope: f32) -> Val {
        let v = self
            .value(upstream)
            .zip(self.value(src), |u, s| if s >= 0.0 { u } else { slope * u })
            .expect("mask shape");
        self.push(Op::MulMask(upstream, src, slope), v)
    }

    pub fn tanh(&mut self, a: Val) -> Val {
        let v = self.value(a).map(kernels::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: Val) -> Val {
        let v = self.value(a).map(kernels::sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn softplus(&mut self, a: Val) -> Val {
        let v = self.value(a).map(kernels::softplus);
        self.push(Op::Softplus(a), v)
    }

    pub fn square(&mut self, a: Val) -> Val {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn sqrt(&mut self, a: Val) -> Val {
        let v = self.value(a).map(|x| libm::sqrtf(x));
        self.push(Op::Sqrt(a), v)
    }

    pub fn recip(&mut self, a: Val) -> Val {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(Op::Recip(a), v)
    }

    // -- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Val, b: Val, ta: bool, tb: bool) -> Result<Val> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(Error::shape("matmul needs rank-2 operands"));
        }
        let ka = if ta { av.shape()[0] } else { av.shape()[1] };
        let kb = if tb { bv.shape()[1] } else { bv.shape()[0] };
        if ka != kb {
            return Err(Error::shape(format!("matmul inner dims {ka} vs {kb}")));
        }
        let v = kernels::matmul(av, bv, ta, tb);
        Ok(self.push(Op::Matmul { a, b, ta, tb }, v))
    }

    // -- broadcast helpers over NCHW ---------------------------------------

    pub fn add_bias_c(&mut self, x: Val, b: Val) -> Result<Val> {
        let xs = self.shape_of(x).to_vec();
        let bs = self.shape_of(b).to_vec();
        if xs.len() != 4 || bs != [xs[1]] {
            return Err(Error::shape(format!("add_bias_c {xs:?} + {bs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let bd = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        let vd = v.data_mut();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let bias = bd[ci];
                for e in &mut vd[base..base + h * w] {
                    *e += bias;
                }
            }
        }
        Ok(self.push(Op::AddBiasC(x, b), v))
    }

    fn reduce_nhw(&mut self, x: Val) -> Val {
        let s = self.shape_of(x).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                out[ci] += xd[base..base + h * w].iter().sum::<f32>();
            }
        }
        let v = Tensor::raw(&[c], out);
        self.push(Op::ReduceNhw(x), v)
    }

    fn broadcast_c(&mut self, b: Val, nhw: [usize; 3]) -> Val {
        let c = self.shape_of(b)[0];
        let [n, h, w] = nhw;
        let bd = self.value(b).data();
        let mut out = vec![0.0f32; n * c * h * w];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                out[base..base + h * w].fill(bd[ci]);
            }
        }
        let v = Tensor::raw(&[n, c, h, w], out);
        self.push(Op::BroadcastC(b, nhw), v)
    }

    pub fn add_bias_row(&mut self, x: Val, b: Val) -> Result<Val> {
        let xs = self.shape_of(x).to_vec();
        let bs = self.shape_of(b).to_vec();
        if xs.len() != 2 || bs != [xs[1]] {
            return Err(Error::shape(format!("add_bias_row {xs:?} + {bs:?}")));
        }
        let f = xs[1];
        let bd = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e += bd[i % f];
        }
        Ok(self.push(Op::AddBiasRow(x, b), v))
    }

    fn reduce_rows(&mut self, x: Val) -> Val {
        let s = self.shape_of(x).to_vec();
        let (n, f) = (s[0], s[1]);
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; f];
        for i in 0..n {
            for j in 0..f {
                out[j] += xd[i * f + j];
            }
        }
        let v = Tensor::raw(&[f], out);
        self.push(Op::ReduceRows(x), v)
    }

    fn broadcast_row(&mut self, b: Val, n: usize) -> Val {
        let f = self.shape_of(b)[0];
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(n * f);
        for _ in 0..n {
            out.extend_from_slice(bd);
        }
        let v = Tensor::raw(&[n, f], out);
        self.push(Op::BroadcastRow(b, n), v)
    }

    /// (1,C,H,W) -> (N,C,H,W).
    pub fn repeat_n(&mut self, x: Val, n: usize) -> Result<Val> {
        let s = self.shape_of(x).to_vec();
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::shape(format!("repeat_n wants (1,C,H,W), got {s:?}")));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * xd.len());
        for _ in 0..n {
            out.extend_from_slice(xd);
        }
        let v = Tensor::raw(&[n, s[1], s[2], s[3]], out);
        Ok(self.push(Op::RepeatN(x, n), v))
    }

    fn reduce_n(&mut self, x: Val) -> Val {
        let s = self.shape_of(x).to_vec();
        let (n, rest) = (s[0], s[1] * s[2] * s[3]);
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; rest];
        for ni in 0..n {
            for (o, v) in out.iter_mut().zip(&xd[ni * rest..(ni + 1) * rest]) {
                *o += v;
            }
        }
        let v = Tensor::raw(&[1, s[1], s[2], s[3]], out);
        self.push(Op::ReduceN(x), v)
    }

    /// x (N,C,H,W) scaled per sample and channel by s (N,C).
    pub fn mul_channels(&mut self, x: Val, s: Val) -> Result<Val> {
        let xs = self.shape_of(x).to_vec();
        let ss = self.shape_of(s).to_vec();
        if xs.len() != 4 || ss != [xs[0], xs[1]] {
            return Err(Error::shape(format!("mul_channels {xs:?} by {ss:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let sd = self.value(s).data().to_vec();
        let mut v = self.value(x).clone();
        let vd = v.data_mut();
        for ni in 0..n {
            for ci in 0..c {
                let k = sd[ni * c + ci];
                let base = (ni * c + ci) * h * w;
                for e in &mut vd[base..base + h * w] {
                    *e *= k;
                }
            }
        }
        Ok(self.push(Op::MulChannels(x, s), v))
    }

    fn reduce_hw(&mut self, x: Val) -> Val {
        let s = self.shape_of(x).to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; n * c];
        for i in 0..n * c {
            out[i] = xd[i * hw..(i + 1) * hw].iter().sum::<f32>();
        }
        let v = Tensor::raw(&[n, c], out);
        self.push(Op::ReduceHw(x), v)
    }

    fn broadcast_hw(&mut self, s: Val, hw: [usize; 2]) -> Val {
        let ss = self.shape_of(s).to_vec();
        let (n, c) = (ss[0], ss[1]);
        let [h, w] = hw;
        let sd = self.value(s).data();
        let mut out = vec![0.0f32; n * c * h * w];
        for i in 0..n * c {
            out[i * h * w..(i + 1) * h * w].fill(sd[i]);
        }
        let v = Tensor::raw(&[n, c, h, w], out);
        self.push(Op::BroadcastHw(s, hw), v)
    }

    // -- structured ops -----------------------------------------------------

    pub fn conv2d(&mut self, x: Val, w: Val, stride: usize, pad: usize) -> Result<Val> {
        let xs = self.shape_of(x).to_vec();
        let ws = self.shape_of(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape("conv2d wants rank-4 x and w"));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(format!(
                "conv2d channels: input {} vs kernel {}",
                xs[1], ws[1]
            )));
        }
        let v = kernels::conv2d(self.value(x), self.value(w), stride, pad);
        Ok(self.push(Op::Conv2d { x, w, stride, pad }, v))
    }

    pub fn resize_bilinear(&mut self, x: Val, h: usize, w: usize) -> Result<Val> {
        if h < 1 || w < 1 {
            return Err(Error::invalid("resize target must be >= 1"));
        }
        let v = kernels::resize_bilinear(self.value(x), h, w);
        Ok(self.push(Op::ResizeBilinear(x, h, w), v))
    }

    pub fn upsample_nearest(&mut self, x: Val, f: usize) -> Val {
        let v = kernels::upsample_nearest(self.value(x), f);
        self.push(Op::UpsampleNearest(x, f), v)
    }

    pub fn bilinear_sample(&mut self, src: Val, grid: Val) -> Result<Val> {
        let ss = self.shape_of(src).to_vec();
        let gs = self.shape_of(grid).to_vec();
        if ss.len() != 4 || gs.len() != 4 || gs[1] != 2 || gs[0] != ss[0] {
            return Err(Error::shape(format!("bilinear_sample src {ss:?} grid {gs:?}")));
        }
        let v = kernels::bilinear_sample(self.value(src), self.value(grid));
        Ok(self.push(Op::BilinearSample { src, grid }, v))
    }

    pub fn concat_c(&mut self, parts: &[Val]) -> Result<Val> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let s0 = self.shape_of(parts[0]).to_vec();
        let (n, h, w) = (s0[0], s0[2], s0[3]);
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape_of(p);
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::shape("concat_c spatial/batch mismatch"));
            }
            c_total += s[1];
        }
        let mut out = vec![0.0f32; n * c_total * h * w];
        let hw = h * w;
        for ni in 0..n {
            let mut coff = 0;
            for &p in parts {
                let c = self.shape_of(p)[1];
                let pd = self.value(p).data();
                let src = &pd[ni * c * hw..(ni + 1) * c * hw];
                out[(ni * c_total + coff) * hw..(ni * c_total + coff + c) * hw]
                    .copy_from_slice(src);
                coff += c;
            }
        }
        let v = Tensor::raw(&[n, c_total, h, w], out);
        Ok(self.push(Op::ConcatC(parts.to_vec()), v))
    }

    fn slice_c(&mut self, x: Val, from: usize, to: usize) -> Val {
        let s = self.shape_of(x).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let xd = self.value(x).data();
        let cs = to - from;
        let mut out = vec![0.0f32; n * cs * hw];
        for ni in 0..n {
            out[ni * cs * hw..(ni + 1) * cs * hw]
                .copy_from_slice(&xd[(ni * c + from) * hw..(ni * c + to) * hw]);
        }
        let v = Tensor::raw(&[n, cs, h, w], out);
        self.push(Op::SliceC(x, from, to), v)
    }

    pub fn reshape(&mut self, x: Val, shape: &[usize]) -> Result<Val> {
        let v = self.value(x).reshaped(shape)?;
        Ok(self.push(Op::Reshape(x), v))
    }

    // -- backward ------------------------------------------------------------

    /// Reverse pass from a scalar output. Gradients are emitted as new tape
    /// nodes, restricted to values that `wanted` values can influence.
    pub fn backward(&mut self, out: Val, wanted: &[Val]) -> Result<Grads> {
        if out.0 >= self.nodes.len() {
            return Err(Error::invalid("output value not on tape"));
        }
        if !self.value(out).is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got {:?}",
                self.value(out).shape()
            )));
        }
        for w in wanted {
            if w.0 >= self.nodes.len() {
                return Err(Error::invalid("wanted value not on tape"));
            }
        }
        let limit = out.0;
        // useful[i]: i is wanted or depends on a wanted value.
        let mut useful = vec![false; limit + 1];
        for w in wanted {
            if w.0 <= limit {
                useful[w.0] = true;
            }
        }
        for i in 0..=limit {
            if !useful[i] {
                useful[i] = self.nodes[i].op.parents().iter().any(|p| useful[p.0]);
            }
        }
        let mut grads: Vec<Option<Val>> = vec![None; limit + 1];
        let seed = self.leaf(Tensor::scalar(1.0));
        grads[out.0] = Some(seed);
        for id in (0..=limit).rev() {
            let g = match grads[id] {
                Some(g) if useful[id] => g,
                _ => continue,
            };
            let op = self.nodes[id].op.clone();
            self.vjp(Val(id), &op, g, &useful, &mut grads)?;
        }
        Ok(Grads { map: grads })
    }

    fn accum(&mut self, grads: &mut [Option<Val>], p: Val, contrib: Val) -> Result<()> {
        grads[p.0] = Some(match grads[p.0] {
            None => contrib,
            Some(g) => self.add(g, contrib)?,
        });
        Ok(())
    }

    fn vjp(
        &mut self,
        node: Val,
        op: &Op,
        g: Val,
        useful: &[bool],
        grads: &mut Vec<Option<Val>>,
    ) -> Result<()> {
        let want = |v: Val| useful[v.0];
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(a) {
                    self.accum(grads, a, g)?;
                }
                if want(b) {
                    self.accum(grads, b, g)?;
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    self.accum(grads, a, g)?;
                }
                if want(b) {
                    let n = self.scale(g, -1.0);
                    self.accum(grads, b, n)?;
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    let c = self.mul(g, b)?;
                    self.accum(grads, a, c)?;
                }
                if want(b) {
                    let c = self.mul(g, a)?;
                    self.accum(grads, b, c)?;
                }
            }
            Op::Scale(a, c) => {
                if want(a) {
                    let v = self.scale(g, c);
                    self.accum(grads, a, v)?;
                }
            }
            Op::AddScalar(a, _) => {
                if want(a) {
                    self.accum(grads, a, g)?;
                }
            }
            Op::Sum(a) => {
                if want(a) {
                    let shape = self.shape_of(a).to_vec();
                    let v = self.broadcast(g, &shape)?;
                    self.accum(grads, a, v)?;
                }
            }
            Op::Broadcast(a, _) => {
                if want(a) {
                    let v = self.sum(g);
                    self.accum(grads, a, v)?;
                }
            }
            Op::Matmul { a, b, ta, tb } => {
                if want(a) {
                    let ga = if !ta {
                        self.matmul(g, b, false, !tb)?
                    } else {
                        self.matmul(b, g, tb, true)?
                    };
                    self.accum(grads, a, ga)?;
                }
                if want(b) {
                    let gb = if !tb {
                        self.matmul(a, g, !ta, false)?
                    } else {
                        self.matmul(g, a, true, ta)?
                    };
                    self.accum(grads, b, gb)?;
                }
            }
            Op::AddBiasC(x, b) => {
                if want(x) {
                    self.accum(grads, x, g)?;
                }
                if want(b) {
                    let v = self.reduce_nhw(g);
                    self.accum(grads, b, v)?;
                }
            }
            Op::ReduceNhw(x) => {
                if want(x) {
                    let s = self.shape_of(x).to_vec();
                    let v = self.broadcast_c(g, [s[0], s[2], s[3]]);
                    self.accum(grads, x, v)?;
                }
            }
            Op::BroadcastC(b, _) => {
                if want(b) {
                    let v = self.reduce_nhw(g);
                    self.accum(grads, b, v)?;
                }
            }
            Op::AddBiasRow(x, b) => {
                if want(x) {
                    self.accum(grads, x, g)?;
                }
                if want(b) {
                    let v = self.reduce_rows(g);
                    self.accum(grads, b, v)?;
                }
            }
            Op::ReduceRows(x) => {
                if want(x) {
                    let n = self.shape_of(x)[0];
                    let v = self.broadcast_row(g, n);
                    self.accum(grads, x, v)?;
                }
            }
            Op::BroadcastRow(b, _) => {
                if want(b) {
                    let v = self.reduce_rows(g);
                    self.accum(grads, b, v)?;
                }
            }
            Op::RepeatN(x, _) => {
                if want(x) {
                    let v = self.reduce_n(g);
                    self.accum(grads, x, v)?;
                }
            }
            Op::ReduceN(x) => {
                if want(x) {
                    let n = self.shape_of(x)[0];
                    let v = self.repeat_n(g, n)?;
                    self.accum(grads, x, v)?;
                }
            }
            Op::MulChannels(x, s) => {
                if want(x) {
                    let v = self.mul_channels(g, s)?;
                    self.accum(grads, x, v)?;
                }
                if want(s) {
                    let xg = self.mul(x, g)?;
                    let v = self.reduce_hw(xg);
                    self.accum(grads, s, v)?;
                }
            }
            Op::ReduceHw(x) => {
                if want(x) {
                    let s = self.shape_of(x).to_vec();
                    let v = self.broadcast_hw(g, [s[2], s[3]]);
                    self.accum(grads, x, v)?;
                }
            }
            Op::BroadcastHw(s, _) => {
                if want(s) {
                    let v = self.reduce_hw(g);
                    self.accum(grads, s, v)?;
                }
            }
            Op::LeakyRelu(x, slope) => {
                if want(x) {
                    let v = self.mul_mask(g, x, slope);
                    self.accum(grads, x, v)?;
                }
            }
            Op::MulMask(u, src, slope) => {
                if want(u) {
                    let v = self.mul_mask(g, src, slope);
                    self.accum(grads, u, v)?;
                }
                // d/d src is zero almost everywhere.
            }
            Op::Tanh(x) => {
                if want(x) {
                    let y2 = self.square(node);
                    let neg = self.scale(y2, -1.0);
                    let one_minus = self.add_scalar(neg, 1.0);
                    let v = self.mul(g, one_minus)?;
                    self.accum(grads, x, v)?;
                }
            }
            Op::Sigmoid(x) => {
                if want(x) {
                    let neg = self.scale(node, -1.0);
                    let om = self.add_scalar(neg, 1.0);
                    let so = self.mul(node, om)?;
                    let v = self.mul(g, so)?;
                    self.accum(grads, x, v)?;
                }
            }
            Op::Softplus(x) => {
                if want(x) {
                    let s = self.sigmoid(x);
                    let v = self.mul(g, s)?;
                    self.accum(grads, x, v)?;
                }
            }
            Op::Square(x) => {
                if want(x) {
                    let gx = self.mul(g, x)?;
                    let v = self.scale(gx, 2.0);
                    self.accum(grads, x, v)?;
                }
            }
            Op::Sqrt(x) => {
                if want(x) {
                    let r = self.recip(node);
                    let gr = self.mul(g, r)?;
                    let v = self.scale(gr, 0.5);
                    self.accum(grads, x, v)?;
                }
            }
            Op::Recip(x) => {
                if want(x) {
                    let y2 = self.square(node);
                    let gy = self.mul(g, y2)?;
                    let v = self.scale(gy, -1.0);
                    self.accum(grads, x, v)?;
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                if want(x) {
                    let s = self.shape_of(x).to_vec();
                    let v = kernels::conv2d_grad_input(
                        self.value(g),
                        self.value(w),
                        stride,
                        pad,
                        s[2],
                        s[3],
                    );
                    let gi = self.push(
                        Op::ConvGradInput { gy: g, w, stride, pad, h: s[2], wdim: s[3] },
                        v,
                    );
                    self.accum(grads, x, gi)?;
                }
                if want(w) {
                    let k = self.shape_of(w)[2];
                    let v = kernels::conv2d_grad_weight(self.value(x), self.value(g), stride, pad, k);
                    let gw = self.push(Op::ConvGradWeight { x, gy: g, stride, pad, k }, v);
                    self.accum(grads, w, gw)?;
                }
            }
            Op::ConvGradInput { gy, w, stride, pad, .. } => {
                if want(gy) {
                    let v = self.conv2d(g, w, stride, pad)?;
                    self.accum(grads, gy, v)?;
                }
                if want(w) {
                    let k = self.shape_of(w)[2];
                    let v = kernels::conv2d_grad_weight(self.value(g), self.value(gy), stride, pad, k);
                    let gw = self.push(Op::ConvGradWeight { x: g, gy, stride, pad, k }, v);
                    self.accum(grads, w, gw)?;
                }
            }
            Op::ConvGradWeight { .. } => {
                return Err(Error::numeric(
                    "second-order backward through conv weight gradient is unsupported",
                ));
            }
            Op::ResizeBilinear(x, _, _) => {
                if want(x) {
                    let s = self.shape_of(x).to_vec();
                    let v = kernels::resize_bilinear_adjoint(self.value(g), s[2], s[3]);
                    let n = self.push(Op::ResizeAdjoint(g, s[2], s[3]), v);
                    self.accum(grads, x, n)?;
                }
            }
            Op::ResizeAdjoint(x, _, _) => {
                if want(x) {
                    let s = self.shape_of(x).to_vec();
                    let v = self.resize_bilinear(g, s[2], s[3])?;
                    self.accum(grads, x, v)?;
                }
            }
            Op::UpsampleNearest(x, f) => {
                if want(x) {
                    let v = kernels::upsample_nearest_adjoint(self.value(g), f);
                    let n = self.push(Op::NearestAdjoint(g, f), v);
                    self.accum(grads, x, n)?;
                }
            }
            Op::NearestAdjoint(x, f) => {
                if want(x) {
                    let v = self.upsample_nearest(g, f);
                    self.accum(grads, x, v)?;
                }
            }
            Op::BilinearSample { src, grid } => {
                if want(src) {
                    let s = self.shape_of(src).to_vec();
                    let v = kernels::bilinear_grad_src(self.value(g), self.value(grid), s[2], s[3]);
                    let n = self.push(
                        Op::BilinearGradSrc { gout: g, grid, h: s[2], w: s[3] },
                        v,
                    );
                    self.accum(grads, src, n)?;
                }
                if want(grid) {
                    let v =
                        kernels::bilinear_grad_grid(self.value(src), self.value(grid), self.value(g));
                    let n = self.push(Op::BilinearGradGrid { src, grid, gout: g }, v);
                    self.accum(grads, grid, n)?;
                }
            }
            Op::BilinearGradSrc { .. } | Op::BilinearGradGrid { .. } => {
                return Err(Error::numeric(
                    "second-order backward through bilinear sampling is unsupported",
                ));
            }
            Op::ConcatC(ref parts) => {
                let mut from = 0;
                for &p in parts {
                    let c = self.shape_of(p)[1];
                    if want(p) {
                        let v = self.slice_c(g, from, from + c);
                        self.accum(grads, p, v)?;
                    }
                    from += c;
                }
            }
            Op::SliceC(..) => {
                return Err(Error::numeric(
                    "second-order backward through channel slice is unsupported",
                ));
            }
            Op::Reshape(x) => {
                if want(x) {
                    let s = self.shape_of(x).to_vec();
                    let v = self.reshape(g, &s)?;
                    self.accum(grads, x, v)?;
                }
            }
        }
        Ok(())
    }
}

/// Central finite differences of a scalar function, the repo-wide gradient
/// oracle. Independent of the tape: callers pass any evaluation closure.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&Tensor) -> Result<f32>,
    x: &Tensor,
    step: f32,
) -> Result<Tensor> {
    if step <= 0.0 {
        return Err(Error::invalid("finite difference step must be positive"));
    }
    let mut out = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite-diff probe at element {i}: f+ = {fp}, f- = {fm}"
            )));
        }
        out.data_mut()[i] = (fp - fm) / (2.0 * step);
    }
    Ok(out)
}

/// Relative error with an absolute floor for near-zero gradients.
pub fn rel_err(a: f32, b: f32) -> f32 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f32::max)
}
