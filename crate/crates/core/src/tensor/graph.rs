//! Tape-style reverse-mode autodiff. Operations execute eagerly and append
//! one node per result, so the tape order is already topological; `backward`
//! walks it once in reverse, accumulating gradients into every node that
//! requires them.

use super::kernels;
use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    OneMinus { x: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    LogSoftmaxRows { x: NodeId },
    Conv2d { x: NodeId, k: NodeId, stride: usize, padding: usize, patches: Tensor },
    AddChannelBias { x: NodeId, b: NodeId },
    MaxPool2d { x: NodeId, argmax: Vec<usize> },
    MapToSequence { x: NodeId },
    AddRowBias { x: NodeId, b: NodeId },
    SliceRow { x: NodeId, row: usize },
    SliceCols { x: NodeId, start: usize },
    ConcatRows { xs: Vec<NodeId> },
    ConcatCols { a: NodeId, b: NodeId },
    Sum { x: NodeId },
    ScalarWithGrad { x: NodeId, local_grad: Tensor },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients keyed by node id, produced by `Graph::backward`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn add_prod_into(dst: &mut [f64], a: &[f64], b: &[f64]) {
    for ((d, x), y) in dst.iter_mut().zip(a).zip(b) {
        *d += x * y;
    }
}

fn acc_grad<'g>(grads: &'g mut [Option<Tensor>], id: NodeId, shape: &[usize]) -> &'g mut Tensor {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn req(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// A constant leaf; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// A trainable leaf; `backward` reports its gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(Op::Matmul { a, b }, value, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut value = av.clone();
        add_into(value.data_mut(), bv.data());
        let rg = self.req(a) || self.req(b);
        Ok(self.push(Op::Add { a, b }, value, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(av.shape().to_vec(), data)?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(Op::Mul { a, b }, value, rg))
    }

    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| 1.0 - v);
        let rg = self.req(x);
        self.push(Op::OneMinus { x }, value, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = kernels::relu(self.value(x));
        let rg = self.req(x);
        self.push(Op::Relu { x }, value, rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = kernels::sigmoid(self.value(x));
        let rg = self.req(x);
        self.push(Op::Sigmoid { x }, value, rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = kernels::tanh(self.value(x));
        let rg = self.req(x);
        self.push(Op::Tanh { x }, value, rg)
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let value = kernels::log_softmax_rows(self.value(x))?;
        let rg = self.req(x);
        Ok(self.push(Op::LogSoftmaxRows { x }, value, rg))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, TensorError> {
        let (value, patches) =
            kernels::conv2d_with_patches(self.value(x), self.value(k), stride, padding)?;
        let rg = self.req(x) || self.req(k);
        Ok(self.push(Op::Conv2d { x, k, stride, padding, patches }, value, rg))
    }

    /// x[C×H×W] + bias[C], broadcast over each channel plane.
    pub fn add_channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (c, h, w) = self.value(x).dims3()?;
        let bv = self.value(b);
        if bv.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel_bias",
                lhs: self.value(x).shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut value = self.value(x).clone();
        let plane = h * w;
        for ci in 0..c {
            let bias = bv.data()[ci];
            for v in &mut value.data_mut()[ci * plane..(ci + 1) * plane] {
                *v += bias;
            }
        }
        let rg = self.req(x) || self.req(b);
        Ok(self.push(Op::AddChannelBias { x, b }, value, rg))
    }

    pub fn max_pool2d(
        &mut self,
        x: NodeId,
        window: usize,
        stride: usize,
    ) -> Result<NodeId, TensorError> {
        let (value, argmax) = kernels::max_pool2d_with_argmax(self.value(x), window, stride)?;
        let rg = self.req(x);
        Ok(self.push(Op::MaxPool2d { x, argmax }, value, rg))
    }

    /// Reshape a [C×H×W] feature map to [W×(C·H)]: column w becomes
    /// time-step w, features ordered channel-major then height.
    pub fn map_to_sequence(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (c, h, w) = self.value(x).dims3()?;
        let xd = self.value(x).data();
        let mut data = vec![0.0; c * h * w];
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    data[wi * (c * h) + ci * h + hi] = xd[(ci * h + hi) * w + wi];
                }
            }
        }
        let value = Tensor::from_vec(vec![w, c * h], data)?;
        let rg = self.req(x);
        Ok(self.push(Op::MapToSequence { x }, value, rg))
    }

    /// x[T×N] + bias[N], broadcast over rows.
    pub fn add_row_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (t, n) = self.value(x).dims2()?;
        let bv = self.value(b);
        if bv.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                lhs: self.value(x).shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut value = self.value(x).clone();
        for r in 0..t {
            add_into(&mut value.data_mut()[r * n..(r + 1) * n], bv.data());
        }
        let rg = self.req(x) || self.req(b);
        Ok(self.push(Op::AddRowBias { x, b }, value, rg))
    }

    pub fn slice_row(&mut self, x: NodeId, row: usize) -> Result<NodeId, TensorError> {
        let (t, n) = self.value(x).dims2()?;
        if row >= t {
            return Err(TensorError::InvalidArgument {
                op: "slice_row",
                msg: format!("row {row} out of range for {t} rows"),
            });
        }
        let data = self.value(x).data()[row * n..(row + 1) * n].to_vec();
        let value = Tensor::from_vec(vec![1, n], data)?;
        let rg = self.req(x);
        Ok(self.push(Op::SliceRow { x, row }, value, rg))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let (t, n) = self.value(x).dims2()?;
        if len == 0 || start + len > n {
            return Err(TensorError::InvalidArgument {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of range for {n} columns", start + len),
            });
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(t * len);
        for r in 0..t {
            data.extend_from_slice(&xd[r * n + start..r * n + start + len]);
        }
        let value = Tensor::from_vec(vec![t, len], data)?;
        let rg = self.req(x);
        Ok(self.push(Op::SliceCols { x, start }, value, rg))
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId, TensorError> {
        let first = *xs.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let (_, n) = self.value(first).dims2()?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &id in xs {
            let (t, ni) = self.value(id).dims2()?;
            if ni != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(id).shape().to_vec(),
                });
            }
            rows += t;
            data.extend_from_slice(self.value(id).data());
        }
        let value = Tensor::from_vec(vec![rows, n], data)?;
        let rg = xs.iter().any(|&id| self.req(id));
        Ok(self.push(Op::ConcatRows { xs: xs.to_vec() }, value, rg))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ta, na) = self.value(a).dims2()?;
        let (tb, nb) = self.value(b).dims2()?;
        if ta != tb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ta * (na + nb));
        for r in 0..ta {
            data.extend_from_slice(&ad[r * na..(r + 1) * na]);
            data.extend_from_slice(&bd[r * nb..(r + 1) * nb]);
        }
        let value = Tensor::from_vec(vec![ta, na + nb], data)?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(Op::ConcatCols { a, b }, value, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).data().iter().sum();
        let rg = self.req(x);
        self.push(Op::Sum { x }, Tensor::scalar(total), rg)
    }

    /// A scalar node with an externally supplied value and local gradient
    /// d(value)/d(input); used to splice losses whose forward pass happens
    /// outside the graph.
    pub fn scalar_with_grad(
        &mut self,
        x: NodeId,
        value: f64,
        local_grad: Tensor,
    ) -> Result<NodeId, TensorError> {
        if local_grad.shape() != self.value(x).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "scalar_with_grad",
                lhs: self.value(x).shape().to_vec(),
                rhs: local_grad.shape().to_vec(),
            });
        }
        let rg = self.req(x);
        Ok(self.push(Op::ScalarWithGrad { x, local_grad }, Tensor::scalar(value), rg))
    }

    /// Reverse pass from a scalar root. Returns gradients for every node on
    /// a differentiable path to the root (leaves included); each node is
    /// visited exactly once because tape order is topological.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, TensorError> {
        let root_val = &self.nodes[root.0].value;
        if root_val.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.backprop_node(idx, &dy, &mut grads);
            }
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.value(*a).dims2().expect("checked at construction");
                let n = self.value(*b).shape()[1];
                if self.req(*a) {
                    let bv = &self.nodes[b.0].value;
                    let ga = acc_grad(grads, *a, self.nodes[a.0].value.shape());
                    kernels::gemm_a_bt(dy.data(), bv.data(), ga.data_mut(), m, n, k, 1.0);
                }
                if self.req(*b) {
                    let av = &self.nodes[a.0].value;
                    let gb = acc_grad(grads, *b, self.nodes[b.0].value.shape());
                    kernels::gemm_at_b(av.data(), dy.data(), gb.data_mut(), k, m, n, 1.0);
                }
            }
            Op::Add { a, b } => {
                for &id in [a, b].into_iter() {
                    if self.req(id) {
                        add_into(acc_grad(grads, id, self.nodes[id.0].value.shape()).data_mut(), dy.data());
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.req(*a) {
                    let bv = &self.nodes[b.0].value;
                    add_prod_into(acc_grad(grads, *a, self.nodes[a.0].value.shape()).data_mut(), dy.data(), bv.data());
                }
                if self.req(*b) {
                    let av = &self.nodes[a.0].value;
                    add_prod_into(acc_grad(grads, *b, self.nodes[b.0].value.shape()).data_mut(), dy.data(), av.data());
                }
            }
            Op::OneMinus { x } => {
                if self.req(*x) {
                    let gx = acc_grad(grads, *x, self.nodes[x.0].value.shape());
                    for (g, d) in gx.data_mut().iter_mut().zip(dy.data()) {
                        *g -= d;
                    }
                }
            }
            Op::Relu { x } => {
                if self.req(*x) {
                    let y = &node.value;
                    let gx = acc_grad(grads, *x, self.nodes[x.0].value.shape());
                    for ((g, d), &v) in gx.data_mut().iter_mut().zip(dy.data()).zip(y.data()) {
                        if v > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                if self.req(*x) {
                    let y = &node.value;
                    let gx = acc_grad(grads, *x, self.nodes[x.0].value.shape());
                    for ((g, d), &v) in gx.data_mut().iter_mut().zip(dy.data()).zip(y.data()) {
                        *g += d * v * (1.0 - v);
                    }
                }
            }
            Op::Tanh { x } => {
                if self.req(*x) {
                    let y = &node.value;
                    let gx = acc_grad(grads, *x, self.nodes[x.0].value.shape());
                    for ((g, d), &v) in gx.data_mut().iter_mut().zip(dy.data()).zip(y.data()) {
                        *g += d * (1.0 - v * v);
                    }
                }
            }
            Op::LogSoftmaxRows { x } => {
                if self.req(*x) {
                    let y = &node.value;
                    let (t, n) = y.dims2().expect("checked at construction");
                    let gx = acc_grad(grads, *x, self.nodes[x.0].value.shape());
                    for r in 0..t {
                        let dyr = &dy.data()[r * n..(r + 1) * n];
                        let row_sum: f64 = dyr.iter().sum();
                        let yr = &y.data()[r * n..(r + 1) * n];
                        let gr = &mut gx.data_mut()[r * n..(r + 1) * n];
                        for ((g, d), &lv) in gr.iter_mut().zip(dyr).zip(yr) {
                            *g += d - lv.exp() * row_sum;
                        }
                    }
                }
            }
            Op::Conv2d { x, k, stride, padding, patches } => {
                let d = kernels::conv_dims(self.value(*x), self.value(*k), *stride, *padding)
                    .expect("checked at construction");
                let n_pos = d.h_out * d.w_out;
                let k_elems = d.c_in * d.kh * d.kw;
                if self.req(*k) {
                    let gk = acc_grad(grads, *k, self.nodes[k.0].value.shape());
                    kernels::gemm_a_bt(
                        dy.data(),
                        patches.data(),
                        gk.data_mut(),
                        d.c_out,
                        n_pos,
                        k_elems,
                        1.0,
                    );
                }
                if self.req(*x) {
                    let kv = &self.nodes[k.0].value;
                    let mut dpatches = vec![0.0; k_elems * n_pos];
                    kernels::gemm_at_b(
                        kv.data(),
                        dy.data(),
                        &mut dpatches,
                        k_elems,
                        d.c_out,
                        n_pos,
                        0.0,
                    );
                    let gx = acc_grad(grads, *x, self.nodes[x.0].value.shape());
                    kernels::col2im_acc(&dpatches, &d, *stride, *padding, gx.data_mut());
                }
            }
            Op::AddChannelBias { x, b } => {
                if self.req(*x) {
                    add_into(acc_grad(grads, *x, self.nodes[x.0].value.shape()).data_mut(), dy.data());
                }
                if self.req(*b) {
                    let (c, h, w) = self.value(*x).dims3().expect("checked at construction");
                    let gb = acc_grad(grads, *b, self.nodes[b.0].value.shape());
                    for ci in 0..c {
                        gb.data_mut()[ci] += dy.data()[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>();
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if self.req(*x) {
                    let gx = acc_grad(grads, *x, self.nodes[x.0].value.shape());
                    for (&src, &d) in argmax.iter().zip(dy.data()) {
                        gx.data_mut()[src] += d;
                    }
                }
            }
            Op::MapToSequence { x } => {
                if self.req(*x) {
                    let (c, h, w) = self.value(*x).dims3().expect("checked at construction");
                    let gx = acc_grad(grads, *x, self.nodes[x.0].value.shape());
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                gx.data_mut()[(ci * h + hi) * w + wi] +=
                                    dy.data()[wi * (c * h) + ci * h + hi];
                            }
                        }
                    }
                }
            }
            Op::AddRowBias { x, b } => {
                if self.req(*x) {
                    add_into(acc_grad(grads, *x, self.nodes[x.0].value.shape()).data_mut(), dy.data());
                }
                if self.req(*b) {
                    let (t, n) = self.value(*x).dims2().expect("checked at construction");
                    let gb = acc_grad(grads, *b, self.nodes[b.0].value.shape());
                    for r in 0..t {
                        add_into(gb.data_mut(), &dy.data()[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::SliceRow { x, row } => {
                if self.req(*x) {
                    let n = self.value(*x).shape()[1];
                    let gx = acc_grad(grads, *x, self.nodes[x.0].value.shape());
                    add_into(&mut gx.data_mut()[row * n..(row + 1) * n], dy.data());
                }
            }
            Op::SliceCols { x, start } => {
                if self.req(*x) {
                    let (t, len) = node.value.dims2().expect("checked at construction");
                    let n = self.value(*x).shape()[1];
                    let gx = acc_grad(grads, *x, self.nodes[x.0].value.shape());
                    for r in 0..t {
                        add_into(
                            &mut gx.data_mut()[r * n + start..r * n + start + len],
                            &dy.data()[r * len..(r + 1) * len],
                        );
                    }
                }
            }
            Op::ConcatRows { xs } => {
                let mut offset = 0;
                for &id in xs {
                    let len = self.value(id).numel();
                    if self.req(id) {
                        add_into(acc_grad(grads, id, self.nodes[id.0].value.shape()).data_mut(), &dy.data()[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols { a, b } => {
                let (t, na) = self.value(*a).dims2().expect("checked at construction");
                let nb = self.value(*b).shape()[1];
                let n = na + nb;
                if self.req(*a) {
                    let ga = acc_grad(grads, *a, self.nodes[a.0].value.shape());
                    for r in 0..t {
                        add_into(
                            &mut ga.data_mut()[r * na..(r + 1) * na],
                            &dy.data()[r * n..r * n + na],
                        );
                    }
                }
                if self.req(*b) {
                    let gb = acc_grad(grads, *b, self.nodes[b.0].value.shape());
                    for r in 0..t {
                        add_into(
                            &mut gb.data_mut()[r * nb..(r + 1) * nb],
                            &dy.data()[r * n + na..(r + 1) * n],
                        );
                    }
                }
            }
            Op::Sum { x } => {
                if self.req(*x) {
                    let d = dy.data()[0];
                    for g in acc_grad(grads, *x, self.nodes[x.0].value.shape()).data_mut() {
                        *g += d;
                    }
                }
            }
            Op::ScalarWithGrad { x, local_grad } => {
                if self.req(*x) {
                    let d = dy.data()[0];
                    let gx = acc_grad(grads, *x, self.nodes[x.0].value.shape());
                    for (g, &l) in gx.data_mut().iter_mut().zip(local_grad.data()) {
                        *g += d * l;
                    }
                }
            }
        }
    }
}
