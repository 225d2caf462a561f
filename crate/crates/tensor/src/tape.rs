use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeRef {
    tape: u64,
    index: usize,
}

impl NodeRef {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv { x: usize, k: usize, pad: usize },
    ConvInputGrad { g: usize, k: usize, pad: usize },
    ConvKernelGrad { x: usize, g: usize, pad: usize },
    ChannelBias { y: usize, b: usize },
    ChannelSum { y: usize },
    ChannelBroadcast { b: usize },
    Relu { x: usize },
    /// `g * [x > 0]`; not differentiable in `x`.
    ReluMask { g: usize, x: usize },
    MatVec { w: usize, x: usize },
    MatTVec { w: usize, g: usize },
    Outer { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Neg { a: usize },
    Scale { a: usize, c: f64 },
    AddConst { a: usize },
    Sqrt { a: usize },
    Dot { a: usize, b: usize },
    Sum { a: usize },
    Fill { s: usize },
    MulScalar { a: usize, s: usize },
    Reshape { a: usize },
    Softmax { z: usize },
    SoftmaxXent { z: usize, label: usize },
}

impl Op {
    /// Inputs through which gradient flows.
    fn inputs(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Conv { x, k, .. } => [Some(x), Some(k)],
            ConvInputGrad { g, k, .. } => [Some(g), Some(k)],
            ConvKernelGrad { x, g, .. } => [Some(x), Some(g)],
            ChannelBias { y, b } => [Some(y), Some(b)],
            ChannelSum { y } => [Some(y), None],
            ChannelBroadcast { b } => [Some(b), None],
            Relu { x } => [Some(x), None],
            ReluMask { g, .. } => [Some(g), None],
            MatVec { w, x } => [Some(w), Some(x)],
            MatTVec { w, g } => [Some(w), Some(g)],
            Outer { a, b } => [Some(a), Some(b)],
            Add { a, b } | Sub { a, b } | Mul { a, b } | Div { a, b } | Dot { a, b } => {
                [Some(a), Some(b)]
            }
            Neg { a } | Scale { a, .. } | AddConst { a } | Sqrt { a } | Sum { a } => {
                [Some(a), None]
            }
            Reshape { a } => [Some(a), None],
            Fill { s } => [Some(s), None],
            MulScalar { a, s } => [Some(a), Some(s)],
            Softmax { z } => [Some(z), None],
            SoftmaxXent { z, .. } => [Some(z), None],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of primitive applications.
///
/// A tape is meant to live for one forward pass. Nodes only reference
/// earlier nodes, so the record is acyclic by construction.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn conv_geom(x: &[usize], k: &[usize], pad: usize) -> ConvGeom {
    ConvGeom {
        cin: x[0],
        h: x[1],
        w: x[2],
        cout: k[0],
        ks: k[2],
        pad,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, r: NodeRef) -> Result<usize> {
        if r.tape != self.id || r.index >= self.nodes.len() {
            return Err(TensorError::ForeignTape {
                index: r.index,
                node_tape: r.tape,
                tape: self.id,
            });
        }
        Ok(r.index)
    }

    fn push(&mut self, value: Tensor, op: Op) -> usize {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    fn handle(&self, index: usize) -> NodeRef {
        NodeRef {
            tape: self.id,
            index,
        }
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn shape(&self, i: usize) -> &[usize] {
        self.nodes[i].value.shape()
    }

    /// Value recorded at `node`.
    pub fn value(&self, node: NodeRef) -> Result<&Tensor> {
        let i = self.check(node)?;
        Ok(self.val(i))
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> NodeRef {
        let i = self.push(value, Op::Leaf);
        self.handle(i)
    }

    // ---- unchecked index-level constructors shared by forward and backward ----

    fn conv_raw(&mut self, x: usize, k: usize, pad: usize) -> usize {
        let g = conv_geom(self.shape(x), self.shape(k), pad);
        let out = kernels::conv2d(self.val(x).data(), self.val(k).data(), g);
        let v = Tensor::raw(&[g.cout, g.out_h(), g.out_w()], out);
        self.push(v, Op::Conv { x, k, pad })
    }

    fn conv_input_grad_raw(&mut self, gy: usize, k: usize, pad: usize, x_shape: &[usize]) -> usize {
        let g = conv_geom(x_shape, self.shape(k), pad);
        let out = kernels::conv2d_input_grad(self.val(gy).data(), self.val(k).data(), g);
        let v = Tensor::raw(x_shape, out);
        self.push(v, Op::ConvInputGrad { g: gy, k, pad })
    }

    fn conv_kernel_grad_raw(&mut self, x: usize, gy: usize, pad: usize, k_shape: &[usize]) -> usize {
        let g = conv_geom(self.shape(x), k_shape, pad);
        let out = kernels::conv2d_kernel_grad(self.val(x).data(), self.val(gy).data(), g);
        let v = Tensor::raw(k_shape, out);
        self.push(v, Op::ConvKernelGrad { x, g: gy, pad })
    }

    fn channel_bias_raw(&mut self, y: usize, b: usize) -> usize {
        let shape = self.shape(y).to_vec();
        let plane = shape[1..].iter().product();
        let bias = kernels::channel_broadcast(self.val(b).data(), plane);
        let out: Vec<f64> = self.val(y).data().iter().zip(&bias).map(|(p, q)| p + q).collect();
        self.push(Tensor::raw(&shape, out), Op::ChannelBias { y, b })
    }

    fn channel_sum_raw(&mut self, y: usize) -> usize {
        let shape = self.shape(y);
        let (c, plane) = (shape[0], shape[1..].iter().product());
        let out = kernels::channel_sum(self.val(y).data(), c, plane);
        self.push(Tensor::raw(&[c], out), Op::ChannelSum { y })
    }

    fn channel_broadcast_raw(&mut self, b: usize, shape: &[usize]) -> usize {
        let plane = shape[1..].iter().product();
        let out = kernels::channel_broadcast(self.val(b).data(), plane);
        self.push(Tensor::raw(shape, out), Op::ChannelBroadcast { b })
    }

    fn relu_mask_raw(&mut self, g: usize, x: usize) -> usize {
        let v = self.val(g).zip_map(self.val(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
        self.push(v, Op::ReluMask { g, x })
    }

    fn matvec_raw(&mut self, w: usize, x: usize) -> usize {
        let (m, n) = (self.shape(w)[0], self.shape(w)[1]);
        let out = kernels::matvec(self.val(w).data(), self.val(x).data(), m, n);
        self.push(Tensor::raw(&[m], out), Op::MatVec { w, x })
    }

    fn mat_t_vec_raw(&mut self, w: usize, g: usize) -> usize {
        let (m, n) = (self.shape(w)[0], self.shape(w)[1]);
        let out = kernels::mat_t_vec(self.val(w).data(), self.val(g).data(), m, n);
        self.push(Tensor::raw(&[n], out), Op::MatTVec { w, g })
    }

    fn outer_raw(&mut self, a: usize, b: usize) -> usize {
        let shape = [self.val(a).len(), self.val(b).len()];
        let out = kernels::outer(self.val(a).data(), self.val(b).data());
        self.push(Tensor::raw(&shape, out), Op::Outer { a, b })
    }

    fn binary_raw(&mut self, a: usize, b: usize, op: Op, f: impl Fn(f64, f64) -> f64) -> usize {
        let v = self.val(a).zip_map(self.val(b), f);
        self.push(v, op)
    }

    fn add_raw(&mut self, a: usize, b: usize) -> usize {
        self.binary_raw(a, b, Op::Add { a, b }, |p, q| p + q)
    }

    fn sub_raw(&mut self, a: usize, b: usize) -> usize {
        self.binary_raw(a, b, Op::Sub { a, b }, |p, q| p - q)
    }

    fn mul_raw(&mut self, a: usize, b: usize) -> usize {
        self.binary_raw(a, b, Op::Mul { a, b }, |p, q| p * q)
    }

    fn div_raw(&mut self, a: usize, b: usize) -> usize {
        self.binary_raw(a, b, Op::Div { a, b }, |p, q| p / q)
    }

    fn neg_raw(&mut self, a: usize) -> usize {
        let v = self.val(a).map(|p| -p);
        self.push(v, Op::Neg { a })
    }

    fn scale_raw(&mut self, a: usize, c: f64) -> usize {
        let v = self.val(a).scale(c);
        self.push(v, Op::Scale { a, c })
    }

    fn sqrt_raw(&mut self, a: usize) -> usize {
        let v = self.val(a).map(f64::sqrt);
        self.push(v, Op::Sqrt { a })
    }

    fn dot_raw(&mut self, a: usize, b: usize) -> usize {
        let v = Tensor::scalar(self.val(a).dot(self.val(b)));
        self.push(v, Op::Dot { a, b })
    }

    fn sum_raw(&mut self, a: usize) -> usize {
        let v = Tensor::scalar(self.val(a).sum());
        self.push(v, Op::Sum { a })
    }

    fn fill_raw(&mut self, s: usize, shape: &[usize]) -> usize {
        let v = Tensor::full(shape, self.val(s).item());
        self.push(v, Op::Fill { s })
    }

    fn mul_scalar_raw(&mut self, a: usize, s: usize) -> usize {
        let c = self.val(s).item();
        let v = self.val(a).scale(c);
        self.push(v, Op::MulScalar { a, s })
    }

    fn reshape_raw(&mut self, a: usize, shape: &[usize]) -> usize {
        let v = Tensor::raw(shape, self.val(a).data().to_vec());
        self.push(v, Op::Reshape { a })
    }

    fn softmax_raw(&mut self, z: usize) -> usize {
        let v = Tensor::raw(self.shape(z), kernels::softmax(self.val(z).data()));
        self.push(v, Op::Softmax { z })
    }

    fn constant_raw(&mut self, t: Tensor) -> usize {
        self.push(t, Op::Leaf)
    }

    // ---- public checked operations ----

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Stride-1 cross-correlation with zero padding plus per-channel bias.
    ///
    /// `input` is `[c_in, h, w]`, `kernel` is `[c_out, c_in, k, k]` with odd
    /// `k`, `bias` is `[c_out]`.
    pub fn conv2d(&mut self, input: NodeRef, kernel: NodeRef, bias: NodeRef, padding: usize) -> Result<NodeRef> {
        let x = self.check(input)?;
        let k = self.check(kernel)?;
        let b = self.check(bias)?;
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 3 {
            return Err(TensorError::dim("conv2d", &[0, 0, 0], &xs));
        }
        if ks.len() != 4 || ks[1] != xs[0] || ks[2] != ks[3] {
            return Err(TensorError::dim("conv2d", &[ks.first().copied().unwrap_or(0), xs[0], 3, 3], &ks));
        }
        if ks[2] % 2 == 0 {
            return Err(TensorError::domain("conv2d", format!("kernel extent {} is not odd", ks[2])));
        }
        if xs[1] == 0 || xs[2] == 0 || xs[0] == 0 || ks[0] == 0 {
            return Err(TensorError::domain("conv2d", "zero-extent input or kernel"));
        }
        if xs[1] + 2 * padding < ks[2] || xs[2] + 2 * padding < ks[2] {
            return Err(TensorError::domain("conv2d", "kernel larger than padded input"));
        }
        if self.shape(b) != [ks[0]] {
            return Err(TensorError::dim("conv2d", &[ks[0]], self.shape(b)));
        }
        let y = self.conv_raw(x, k, padding);
        let out = self.channel_bias_raw(y, b);
        Ok(self.handle(out))
    }

    pub fn relu(&mut self, x: NodeRef) -> Result<NodeRef> {
        let x = self.check(x)?;
        let v = self.val(x).map(|p| if p > 0.0 { p } else { 0.0 });
        let i = self.push(v, Op::Relu { x });
        Ok(self.handle(i))
    }

    /// `w x + b` with `w: [m, n]`, `x: [n]`, `b: [m]`.
    pub fn dense(&mut self, x: NodeRef, w: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let xi = self.check(x)?;
        let wi = self.check(w)?;
        let bi = self.check(b)?;
        let ws = self.shape(wi).to_vec();
        if ws.len() != 2 || self.shape(xi) != [ws[1]] {
            return Err(TensorError::dim("dense", &[ws.get(1).copied().unwrap_or(0)], self.shape(xi)));
        }
        if self.shape(bi) != [ws[0]] {
            return Err(TensorError::dim("dense", &[ws[0]], self.shape(bi)));
        }
        let y = self.matvec_raw(wi, xi);
        let out = self.add_raw(y, bi);
        Ok(self.handle(out))
    }

    /// `-log softmax(logits)[label]` as a rank-0 node.
    pub fn softmax_cross_entropy(&mut self, logits: NodeRef, label: usize) -> Result<NodeRef> {
        let z = self.check(logits)?;
        if self.nodes[z].value.rank() != 1 {
            return Err(TensorError::dim("softmax_cross_entropy", &[0], self.shape(z)));
        }
        let k = self.shape(z)[0];
        if label >= k {
            return Err(TensorError::domain(
                "softmax_cross_entropy",
                format!("label {label} out of range for {k} classes"),
            ));
        }
        let v = Tensor::scalar(kernels::cross_entropy(self.val(z).data(), label));
        let i = self.push(v, Op::SoftmaxXent { z, label });
        Ok(self.handle(i))
    }

    pub fn softmax(&mut self, logits: NodeRef) -> Result<NodeRef> {
        let z = self.check(logits)?;
        let i = self.softmax_raw(z);
        Ok(self.handle(i))
    }

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.same_shape("add", a, b)?;
        let i = self.add_raw(a, b);
        Ok(self.handle(i))
    }

    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.same_shape("sub", a, b)?;
        let i = self.sub_raw(a, b);
        Ok(self.handle(i))
    }

    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.same_shape("mul", a, b)?;
        let i = self.mul_raw(a, b);
        Ok(self.handle(i))
    }

    pub fn div(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.same_shape("div", a, b)?;
        let i = self.div_raw(a, b);
        Ok(self.handle(i))
    }

    pub fn neg(&mut self, a: NodeRef) -> Result<NodeRef> {
        let a = self.check(a)?;
        let i = self.neg_raw(a);
        Ok(self.handle(i))
    }

    pub fn scale(&mut self, a: NodeRef, c: f64) -> Result<NodeRef> {
        let a = self.check(a)?;
        let i = self.scale_raw(a, c);
        Ok(self.handle(i))
    }

    /// `a + c` elementwise.
    pub fn add_const(&mut self, a: NodeRef, c: f64) -> Result<NodeRef> {
        let a = self.check(a)?;
        let v = self.val(a).map(|p| p + c);
        let i = self.push(v, Op::AddConst { a });
        Ok(self.handle(i))
    }

    pub fn sqrt(&mut self, a: NodeRef) -> Result<NodeRef> {
        let a = self.check(a)?;
        let i = self.sqrt_raw(a);
        Ok(self.handle(i))
    }

    /// Inner product of two equally shaped nodes, as a rank-0 node.
    pub fn dot(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.same_shape("dot", a, b)?;
        let i = self.dot_raw(a, b);
        Ok(self.handle(i))
    }

    pub fn sum(&mut self, a: NodeRef) -> Result<NodeRef> {
        let a = self.check(a)?;
        let i = self.sum_raw(a);
        Ok(self.handle(i))
    }

    /// Multiplies a tensor by a single-element node.
    pub fn mul_scalar(&mut self, a: NodeRef, s: NodeRef) -> Result<NodeRef> {
        let (a, s) = (self.check(a)?, self.check(s)?);
        if self.val(s).len() != 1 {
            return Err(TensorError::dim("mul_scalar", &[], self.shape(s)));
        }
        let i = self.mul_scalar_raw(a, s);
        Ok(self.handle(i))
    }

    pub fn reshape(&mut self, a: NodeRef, shape: &[usize]) -> Result<NodeRef> {
        let a = self.check(a)?;
        if shape.iter().product::<usize>() != self.val(a).len() {
            return Err(TensorError::dim("reshape", self.shape(a), shape));
        }
        let i = self.reshape_raw(a, shape);
        Ok(self.handle(i))
    }

    // ---- reverse mode ----

    /// Marks nodes `<= output` that are ancestors of `output` and depend on
    /// some node in `wrt`.
    fn active_set(&self, output: usize, wrt: &[usize]) -> Vec<bool> {
        let mut needs = vec![false; output + 1];
        for &w in wrt {
            if w <= output {
                needs[w] = true;
            }
        }
        for i in 0..=output {
            if !needs[i] {
                needs[i] = self.nodes[i]
                    .op
                    .inputs()
                    .iter()
                    .flatten()
                    .any(|&j| needs[j]);
            }
        }
        let mut reach = vec![false; output + 1];
        reach[output] = true;
        for i in (0..=output).rev() {
            if reach[i] {
                for &j in self.nodes[i].op.inputs().iter().flatten() {
                    reach[j] = true;
                }
            }
        }
        needs.iter().zip(&reach).map(|(a, b)| *a && *b).collect()
    }

    /// Vector-Jacobian products `J^T cotangent` of `output` with respect to
    /// each node in `wrt`, evaluated numerically.
    ///
    /// Does not modify the tape; repeated calls are independent.
    pub fn vjp(&self, output: NodeRef, cotangent: &Tensor, wrt: &[NodeRef]) -> Result<Vec<Tensor>> {
        let out = self.check(output)?;
        if cotangent.shape() != self.shape(out) {
            return Err(TensorError::dim("vjp", self.shape(out), cotangent.shape()));
        }
        let wrt: Vec<usize> = wrt.iter().map(|&r| self.check(r)).collect::<Result<_>>()?;
        let active = self.active_set(out, &wrt);
        let mut keep = vec![false; out + 1];
        for &w in &wrt {
            if w <= out {
                keep[w] = true;
            }
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out + 1];
        grads[out] = Some(cotangent.clone());
        for i in (0..=out).rev() {
            if !active[i] {
                continue;
            }
            let g = if keep[i] {
                match &grads[i] {
                    Some(g) => g.clone(),
                    None => continue,
                }
            } else {
                match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            for (j, gj) in self.backward_numeric(i, &g, &active) {
                match &mut grads[j] {
                    Some(acc) => acc.axpy(1.0, &gj),
                    slot @ None => *slot = Some(gj),
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|&w| {
                if w <= out {
                    grads[w].clone()
                } else {
                    None
                }
                .unwrap_or_else(|| Tensor::zeros(self.shape(w)))
            })
            .collect())
    }

    /// Gradient of a single-element output.
    pub fn grad(&self, output: NodeRef, wrt: &[NodeRef]) -> Result<Vec<Tensor>> {
        let out = self.check(output)?;
        let seed = Tensor::full(self.shape(out), 1.0);
        self.vjp(output, &seed, wrt)
    }

    /// Records the vector-Jacobian product on the tape so that it can be
    /// differentiated again. `cotangent` is itself a node.
    pub fn vjp_graph(&mut self, output: NodeRef, cotangent: NodeRef, wrt: &[NodeRef]) -> Result<Vec<NodeRef>> {
        let out = self.check(output)?;
        let ct = self.check(cotangent)?;
        if self.shape(ct) != self.shape(out) {
            return Err(TensorError::dim("vjp_graph", self.shape(out), self.shape(ct)));
        }
        let wrt: Vec<usize> = wrt.iter().map(|&r| self.check(r)).collect::<Result<_>>()?;
        let active = self.active_set(out, &wrt);
        let mut grads: Vec<Option<usize>> = vec![None; out + 1];
        grads[out] = Some(ct);
        for i in (0..=out).rev() {
            if !active[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            for (j, gj) in self.backward_graph(i, g, &active) {
                grads[j] = Some(match grads[j] {
                    Some(acc) => self.add_raw(acc, gj),
                    None => gj,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|&w| {
                let idx = match if w <= out { grads[w] } else { None } {
                    Some(g) => g,
                    None => {
                        let z = Tensor::zeros(self.shape(w));
                        self.constant_raw(z)
                    }
                };
                self.handle(idx)
            })
            .collect())
    }

    fn backward_numeric(&self, i: usize, g: &Tensor, active: &[bool]) -> Vec<(usize, Tensor)> {
        use Op::*;
        let mut out = Vec::with_capacity(2);
        let want = |j: usize| active[j];
        let gd = g.data();
        match self.nodes[i].op {
            Leaf => {}
            Conv { x, k, pad } => {
                let geom = conv_geom(self.shape(x), self.shape(k), pad);
                if want(x) {
                    let v = kernels::conv2d_input_grad(gd, self.val(k).data(), geom);
                    out.push((x, Tensor::raw(self.shape(x), v)));
                }
                if want(k) {
                    let v = kernels::conv2d_kernel_grad(self.val(x).data(), gd, geom);
                    out.push((k, Tensor::raw(self.shape(k), v)));
                }
            }
            ConvInputGrad { g: gy, k, pad } => {
                // value has the input-side shape; g has it too
                let geom = conv_geom(self.shape(i), self.shape(k), pad);
                if want(gy) {
                    let v = kernels::conv2d(gd, self.val(k).data(), geom);
                    out.push((gy, Tensor::raw(self.shape(gy), v)));
                }
                if want(k) {
                    let v = kernels::conv2d_kernel_grad(gd, self.val(gy).data(), geom);
                    out.push((k, Tensor::raw(self.shape(k), v)));
                }
            }
            ConvKernelGrad { x, g: gy, pad } => {
                let geom = conv_geom(self.shape(x), self.shape(i), pad);
                if want(x) {
                    let v = kernels::conv2d_input_grad(self.val(gy).data(), gd, geom);
                    out.push((x, Tensor::raw(self.shape(x), v)));
                }
                if want(gy) {
                    let v = kernels::conv2d(self.val(x).data(), gd, geom);
                    out.push((gy, Tensor::raw(self.shape(gy), v)));
                }
            }
            ChannelBias { y, b } => {
                if want(y) {
                    out.push((y, g.clone()));
                }
                if want(b) {
                    let s = self.shape(y);
                    let v = kernels::channel_sum(gd, s[0], s[1..].iter().product());
                    out.push((b, Tensor::raw(self.shape(b), v)));
                }
            }
            ChannelSum { y } => {
                if want(y) {
                    let plane = self.shape(y)[1..].iter().product();
                    out.push((y, Tensor::raw(self.shape(y), kernels::channel_broadcast(gd, plane))));
                }
            }
            ChannelBroadcast { b } => {
                if want(b) {
                    let s = self.shape(i);
                    let v = kernels::channel_sum(gd, s[0], s[1..].iter().product());
                    out.push((b, Tensor::raw(self.shape(b), v)));
                }
            }
            Relu { x } | ReluMask { x, .. } => {
                let src = match self.nodes[i].op {
                    ReluMask { g: gg, .. } => gg,
                    _ => x,
                };
                if want(src) {
                    out.push((src, g.zip_map(self.val(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })));
                }
            }
            MatVec { w, x } => {
                let (m, n) = (self.shape(w)[0], self.shape(w)[1]);
                if want(w) {
                    out.push((w, Tensor::raw(&[m, n], kernels::outer(gd, self.val(x).data()))));
                }
                if want(x) {
                    out.push((x, Tensor::raw(&[n], kernels::mat_t_vec(self.val(w).data(), gd, m, n))));
                }
            }
            MatTVec { w, g: gg } => {
                let (m, n) = (self.shape(w)[0], self.shape(w)[1]);
                if want(w) {
                    out.push((w, Tensor::raw(&[m, n], kernels::outer(self.val(gg).data(), gd))));
                }
                if want(gg) {
                    out.push((gg, Tensor::raw(&[m], kernels::matvec(self.val(w).data(), gd, m, n))));
                }
            }
            Outer { a, b } => {
                let (m, n) = (self.val(a).len(), self.val(b).len());
                if want(a) {
                    let v = kernels::matvec(gd, self.val(b).data(), m, n);
                    out.push((a, Tensor::raw(self.shape(a), v)));
                }
                if want(b) {
                    let v = kernels::mat_t_vec(gd, self.val(a).data(), m, n);
                    out.push((b, Tensor::raw(self.shape(b), v)));
                }
            }
            Add { a, b } => {
                if want(a) {
                    out.push((a, g.clone()));
                }
                if want(b) {
                    out.push((b, g.clone()));
                }
            }
            Sub { a, b } => {
                if want(a) {
                    out.push((a, g.clone()));
                }
                if want(b) {
                    out.push((b, g.scale(-1.0)));
                }
            }
            Mul { a, b } => {
                if want(a) {
                    out.push((a, g.zip_map(self.val(b), |p, q| p * q)));
                }
                if want(b) {
                    out.push((b, g.zip_map(self.val(a), |p, q| p * q)));
                }
            }
            Div { a, b } => {
                if want(a) {
                    out.push((a, g.zip_map(self.val(b), |p, q| p / q)));
                }
                if want(b) {
                    let y = self.val(i);
                    let t = g.zip_map(y, |p, q| p * q);
                    out.push((b, t.zip_map(self.val(b), |p, q| -(p / q))));
                }
            }
            Neg { a } => {
                if want(a) {
                    out.push((a, g.map(|p| -p)));
                }
            }
            Scale { a, c } => {
                if want(a) {
                    out.push((a, g.scale(c)));
                }
            }
            AddConst { a } => {
                if want(a) {
                    out.push((a, g.clone()));
                }
            }
            Sqrt { a } => {
                if want(a) {
                    let y2 = self.val(i).scale(2.0);
                    out.push((a, g.zip_map(&y2, |p, q| p / q)));
                }
            }
            Dot { a, b } => {
                let s = g.item();
                if want(a) {
                    out.push((a, self.val(b).scale(s)));
                }
                if want(b) {
                    out.push((b, self.val(a).scale(s)));
                }
            }
            Sum { a } => {
                if want(a) {
                    out.push((a, Tensor::full(self.shape(a), g.item())));
                }
            }
            Fill { s } => {
                if want(s) {
                    out.push((s, Tensor::scalar(g.sum()).reshape(self.shape(s)).expect("scalar")));
                }
            }
            MulScalar { a, s } => {
                let c = self.val(s).item();
                if want(a) {
                    out.push((a, g.scale(c)));
                }
                if want(s) {
                    let v = Tensor::scalar(g.dot(self.val(a)));
                    out.push((s, v.reshape(self.shape(s)).expect("scalar")));
                }
            }
            Reshape { a } => {
                if want(a) {
                    out.push((a, Tensor::raw(self.shape(a), gd.to_vec())));
                }
            }
            Softmax { z } => {
                if want(z) {
                    let s = self.val(i);
                    let sh = s.dot(g);
                    out.push((z, s.zip_map(g, |p, q| p * q - p * sh)));
                }
            }
            SoftmaxXent { z, label } => {
                if want(z) {
                    let c = g.item();
                    let mut p = kernels::softmax(self.val(z).data());
                    p[label] -= 1.0;
                    for v in &mut p {
                        *v *= c;
                    }
                    out.push((z, Tensor::raw(self.shape(z), p)));
                }
            }
        }
        out
    }

    fn backward_graph(&mut self, i: usize, g: usize, active: &[bool]) -> Vec<(usize, usize)> {
        use Op::*;
        let mut out = Vec::with_capacity(2);
        let want = |j: usize| active[j];
        let op = self.nodes[i].op.clone();
        match op {
            Leaf => {}
            Conv { x, k, pad } => {
                if want(x) {
                    let xs = self.shape(x).to_vec();
                    out.push((x, self.conv_input_grad_raw(g, k, pad, &xs)));
                }
                if want(k) {
                    let ks = self.shape(k).to_vec();
                    out.push((k, self.conv_kernel_grad_raw(x, g, pad, &ks)));
                }
            }
            ConvInputGrad { g: gy, k, pad } => {
                if want(gy) {
                    out.push((gy, self.conv_raw(g, k, pad)));
                }
                if want(k) {
                    let ks = self.shape(k).to_vec();
                    out.push((k, self.conv_kernel_grad_raw(g, gy, pad, &ks)));
                }
            }
            ConvKernelGrad { x, g: gy, pad } => {
                if want(x) {
                    let xs = self.shape(x).to_vec();
                    out.push((x, self.conv_input_grad_raw(gy, g, pad, &xs)));
                }
                if want(gy) {
                    out.push((gy, self.conv_raw(x, g, pad)));
                }
            }
            ChannelBias { y, b } => {
                if want(y) {
                    out.push((y, g));
                }
                if want(b) {
                    out.push((b, self.channel_sum_raw(g)));
                }
            }
            ChannelSum { y } => {
                if want(y) {
                    let ys = self.shape(y).to_vec();
                    out.push((y, self.channel_broadcast_raw(g, &ys)));
                }
            }
            ChannelBroadcast { b } => {
                if want(b) {
                    out.push((b, self.channel_sum_raw(g)));
                }
            }
            Relu { x } => {
                if want(x) {
                    out.push((x, self.relu_mask_raw(g, x)));
                }
            }
            ReluMask { g: gg, x } => {
                if want(gg) {
                    out.push((gg, self.relu_mask_raw(g, x)));
                }
            }
            MatVec { w, x } => {
                if want(w) {
                    out.push((w, self.outer_raw(g, x)));
                }
                if want(x) {
                    out.push((x, self.mat_t_vec_raw(w, g)));
                }
            }
            MatTVec { w, g: gg } => {
                if want(w) {
                    out.push((w, self.outer_raw(gg, g)));
                }
                if want(gg) {
                    out.push((gg, self.matvec_raw(w, g)));
                }
            }
            Outer { a, b } => {
                // a, b are vectors; g is [m, n]
                if want(a) {
                    let v = self.matvec_raw(g, b);
                    out.push((a, self.reshape_to(v, a)));
                }
                if want(b) {
                    let v = self.mat_t_vec_raw(g, a);
                    out.push((b, self.reshape_to(v, b)));
                }
            }
            Add { a, b } => {
                if want(a) {
                    out.push((a, g));
                }
                if want(b) {
                    out.push((b, g));
                }
            }
            Sub { a, b } => {
                if want(a) {
                    out.push((a, g));
                }
                if want(b) {
                    out.push((b, self.neg_raw(g)));
                }
            }
            Mul { a, b } => {
                if want(a) {
                    out.push((a, self.mul_raw(g, b)));
                }
                if want(b) {
                    out.push((b, self.mul_raw(g, a)));
                }
            }
            Div { a, b } => {
                if want(a) {
                    out.push((a, self.div_raw(g, b)));
                }
                if want(b) {
                    let t = self.mul_raw(g, i);
                    let t = self.div_raw(t, b);
                    out.push((b, self.neg_raw(t)));
                }
            }
            Neg { a } => {
                if want(a) {
                    out.push((a, self.neg_raw(g)));
                }
            }
            Scale { a, c } => {
                if want(a) {
                    out.push((a, self.scale_raw(g, c)));
                }
            }
            AddConst { a } => {
                if want(a) {
                    out.push((a, g));
                }
            }
            Sqrt { a } => {
                if want(a) {
                    let y2 = self.scale_raw(i, 2.0);
                    out.push((a, self.div_raw(g, y2)));
                }
            }
            Dot { a, b } => {
                if want(a) {
                    out.push((a, self.mul_scalar_raw(b, g)));
                }
                if want(b) {
                    out.push((b, self.mul_scalar_raw(a, g)));
                }
            }
            Sum { a } => {
                if want(a) {
                    let s = self.shape(a).to_vec();
                    out.push((a, self.fill_raw(g, &s)));
                }
            }
            Fill { s } => {
                if want(s) {
                    let t = self.sum_raw(g);
                    out.push((s, self.reshape_to(t, s)));
                }
            }
            MulScalar { a, s } => {
                if want(a) {
                    out.push((a, self.mul_scalar_raw(g, s)));
                }
                if want(s) {
                    let t = self.dot_raw(g, a);
                    out.push((s, self.reshape_to(t, s)));
                }
            }
            Reshape { a } => {
                if want(a) {
                    out.push((a, self.reshape_to(g, a)));
                }
            }
            Softmax { z } => {
                if want(z) {
                    let sg = self.mul_raw(i, g);
                    let d = self.dot_raw(i, g);
                    let sd = self.mul_scalar_raw(i, d);
                    out.push((z, self.sub_raw(sg, sd)));
                }
            }
            SoftmaxXent { z, label } => {
                if want(z) {
                    let s = self.softmax_raw(z);
                    let n = self.shape(z)[0];
                    let onehot = Tensor::from_fn(&[n], |j| if j == label { 1.0 } else { 0.0 });
                    let oh = self.constant_raw(onehot);
                    let d = self.sub_raw(s, oh);
                    out.push((z, self.mul_scalar_raw(d, g)));
                }
            }
        }
        out
    }

    /// Reshapes node `v` to the shape of node `like` if they differ.
    fn reshape_to(&mut self, v: usize, like: usize) -> usize {
        if self.shape(v) == self.shape(like) {
            v
        } else {
            let s = self.shape(like).to_vec();
            self.reshape_raw(v, &s)
        }
    }
}
