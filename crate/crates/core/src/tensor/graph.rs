//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order and [`Graph::backward`] simply walks it in reverse.
//! Leaves may borrow their tensors (model weights) instead of copying them.

use super::kernels::{self, ConvGeometry, PoolGeometry, PoolKind, ResizePad};
use super::{softmax, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Coarse classification of graph nodes, used for structural queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Dense,
    Relu,
    Pool2d,
    Add,
    Concat,
    Normalize,
    ResizePad,
    Reshape,
    Mean,
    Softmax,
    Sum,
    Head,
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn tensor(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeometry,
        batch: usize,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        rows: usize,
    },
    Relu(NodeId),
    Pool2d {
        input: NodeId,
        kind: PoolKind,
        geom: PoolGeometry,
        batch: usize,
        argmax: Vec<u32>,
    },
    Add(NodeId, NodeId),
    Concat {
        a: NodeId,
        b: NodeId,
        outer: usize,
        inner_a: usize,
        inner_b: usize,
    },
    Normalize {
        input: NodeId,
        inv_std: Vec<f32>,
        plane: usize,
    },
    ResizePad {
        input: NodeId,
        spec: ResizePad,
        batch: usize,
    },
    Reshape(NodeId),
    Mean(Vec<NodeId>),
    Softmax {
        input: NodeId,
        width: usize,
    },
    Sum(NodeId),
    /// Scalar head whose local gradient w.r.t. its input was computed during
    /// the forward pass (loss functions).
    Head {
        input: NodeId,
        local_grad: Vec<f32>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Dense { .. } => OpKind::Dense,
            Op::Relu(_) => OpKind::Relu,
            Op::Pool2d { .. } => OpKind::Pool2d,
            Op::Add(..) => OpKind::Add,
            Op::Concat { .. } => OpKind::Concat,
            Op::Normalize { .. } => OpKind::Normalize,
            Op::ResizePad { .. } => OpKind::ResizePad,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Mean(_) => OpKind::Mean,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Sum(_) => OpKind::Sum,
            Op::Head { .. } => OpKind::Head,
        }
    }
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
}

/// Computation graph. `'a` is the lifetime of borrowed leaf tensors.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, node: NodeId) -> Option<&[f32]> {
        self.grads.get(node.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, node: NodeId) -> Option<Tensor> {
        let g = self.get(node)?.to_vec();
        Tensor::new(&self.shapes[node.0], g).ok()
    }

    pub fn take(&mut self, node: NodeId) -> Option<Vec<f32>> {
        self.grads.get_mut(node.0).and_then(Option::take)
    }

    /// Write the gradient of `node` into the tensor's grad slot.
    pub fn fill(&self, node: NodeId, leaf: &mut Tensor) -> Result<()> {
        let g = self.get(node).ok_or_else(|| Error::usage("node has no gradient"))?;
        leaf.set_grad(g.to_vec())
    }
}

fn batch_and_image(shape: &[usize], what: &str) -> Result<(usize, [usize; 3])> {
    match *shape {
        [c, h, w] => Ok((1, [c, h, w])),
        [b, c, h, w] => Ok((b, [c, h, w])),
        _ => Err(Error::shape(format!(
            "{what} expects [C,H,W] or [B,C,H,W], got {shape:?}"
        ))),
    }
}

fn with_batch(batched: bool, b: usize, rest: [usize; 3]) -> Vec<usize> {
    if batched {
        vec![b, rest[0], rest[1], rest[2]]
    } else {
        rest.to_vec()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0].value.tensor()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn count(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    fn data(&self, id: NodeId) -> &[f32] {
        self.value(id).data()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|&i| self.needs(i));
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Owned leaf. `requires_grad` decides whether backward reaches it.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Borrowed leaf, typically a model weight.
    pub fn param(&mut self, value: &'a Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Value::Borrowed(value),
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        self.conv2d_with_bias(input, kernel, None, stride, padding)
    }

    pub fn conv2d_with_bias(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let in_shape = self.shape(input).to_vec();
        let (batch, [c_in, h, w]) = batch_and_image(&in_shape, "conv2d")?;
        let &[c_out, kc, kh, kw] = self.shape(kernel) else {
            return Err(Error::shape(format!(
                "conv2d kernel must be [C_out,C_in,kH,kW], got {:?}",
                self.shape(kernel)
            )));
        };
        if kc != c_in {
            return Err(Error::shape(format!(
                "conv2d kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if stride == 0 {
            return Err(Error::usage("conv2d stride must be >= 1"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::shape(format!(
                    "conv2d bias must be [{c_out}], got {:?}",
                    self.shape(b)
                )));
            }
        }
        let geom = ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let in_len = c_in * h * w;
        let out_len = c_out * oh * ow;
        let mut out = vec![0.0f32; batch * out_len];
        {
            let x = self.data(input);
            let k = self.data(kernel);
            let bvals = bias.map(|b| self.data(b));
            for (img, dst) in x.chunks(in_len).zip(out.chunks_mut(out_len)) {
                kernels::conv2d_forward(img, k, bvals, &geom, dst);
            }
        }
        let shape = with_batch(in_shape.len() == 4, batch, [c_out, oh, ow]);
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                batch,
            },
            &inputs,
        ))
    }

    /// `out = weight · input + bias` for `[n]` or `[B, n]` input.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let in_shape = self.shape(input).to_vec();
        let (rows, n) = match *in_shape.as_slice() {
            [n] => (1, n),
            [b, n] => (b, n),
            _ => return Err(Error::shape(format!("dense expects [n] or [B,n], got {in_shape:?}"))),
        };
        let &[m, wn] = self.shape(weight) else {
            return Err(Error::shape("dense weight must be rank 2"));
        };
        if wn != n {
            return Err(Error::shape(format!("dense weight has {wn} columns, input has {n}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [m] {
                return Err(Error::shape(format!(
                    "dense bias must be [{m}], got {:?}",
                    self.shape(b)
                )));
            }
        }
        let mut out = vec![0.0f32; rows * m];
        {
            let x = self.data(input);
            let wt = self.data(weight);
            let bv = bias.map(|b| self.data(b));
            for (xr, orow) in x.chunks(n).zip(out.chunks_mut(m)) {
                for (i, o) in orow.iter_mut().enumerate() {
                    let dot: f32 = wt[i * n..(i + 1) * n].iter().zip(xr).map(|(a, b)| a * b).sum();
                    *o = dot + bv.map_or(0.0, |b| b[i]);
                }
            }
        }
        let shape = if in_shape.len() == 2 { vec![rows, m] } else { vec![m] };
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Dense {
                input,
                weight,
                bias,
                rows,
            },
            &inputs,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let out = Tensor::new(x.shape(), x.data().iter().map(|&v| v.max(0.0)).collect()).expect("same shape");
        self.push(out, Op::Relu(input), &[input])
    }

    pub fn pool2d(&mut self, input: NodeId, kind: PoolKind, window: usize, stride: usize) -> Result<NodeId> {
        let in_shape = self.shape(input).to_vec();
        let (batch, [c, h, w]) = batch_and_image(&in_shape, "pool2d")?;
        if window == 0 || stride == 0 {
            return Err(Error::usage("pool2d window and stride must be >= 1"));
        }
        if window > h || window > w {
            return Err(Error::shape(format!(
                "pool2d window {window} exceeds spatial extent {h}x{w}"
            )));
        }
        let geom = PoolGeometry {
            channels: c,
            h,
            w,
            window,
            stride,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let (in_len, out_len) = (c * h * w, c * oh * ow);
        let mut out = vec![0.0f32; batch * out_len];
        let mut argmax = vec![0u32; if kind == PoolKind::Max { batch * out_len } else { 0 }];
        {
            let x = self.data(input);
            for b in 0..batch {
                let am: &mut [u32] = if kind == PoolKind::Max {
                    &mut argmax[b * out_len..(b + 1) * out_len]
                } else {
                    &mut []
                };
                kernels::pool2d_forward(
                    &x[b * in_len..(b + 1) * in_len],
                    kind,
                    &geom,
                    &mut out[b * out_len..(b + 1) * out_len],
                    am,
                );
            }
        }
        let shape = with_batch(in_shape.len() == 4, batch, [c, oh, ow]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Pool2d {
                input,
                kind,
                geom,
                batch,
                argmax,
            },
            &[input],
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f32> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b), &[a, b]))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || axis >= sa.len() {
            return Err(Error::shape(format!("concat of {sa:?} and {sb:?} on axis {axis}")));
        }
        for (d, (x, y)) in sa.iter().zip(&sb).enumerate() {
            if d != axis && x != y {
                return Err(Error::shape(format!(
                    "concat of {sa:?} and {sb:?}: mismatch on axis {d}"
                )));
            }
        }
        let outer: usize = sa[..axis].iter().product();
        let inner_a: usize = sa[axis..].iter().product();
        let inner_b: usize = sb[axis..].iter().product();
        let mut out = Vec::with_capacity(outer * (inner_a + inner_b));
        {
            let (da, db) = (self.data(a), self.data(b));
            for o in 0..outer {
                out.extend_from_slice(&da[o * inner_a..(o + 1) * inner_a]);
                out.extend_from_slice(&db[o * inner_b..(o + 1) * inner_b]);
            }
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                a,
                b,
                outer,
                inner_a,
                inner_b,
            },
            &[a, b],
        ))
    }

    /// Per-channel `(x - mean) / std` on `[C,H,W]` or `[B,C,H,W]`.
    pub fn normalize(&mut self, input: NodeId, mean: &[f32], std: &[f32]) -> Result<NodeId> {
        let in_shape = self.shape(input).to_vec();
        let (_, [c, h, w]) = batch_and_image(&in_shape, "normalize")?;
        if mean.len() != c || std.len() != c {
            return Err(Error::shape(format!(
                "normalization has {} channels, input has {c}",
                mean.len()
            )));
        }
        if std.iter().any(|&s| s <= 0.0) {
            return Err(Error::usage("normalization std must be positive"));
        }
        let plane = h * w;
        let inv_std: Vec<f32> = std.iter().map(|s| 1.0 / s).collect();
        let out: Vec<f32> = self
            .data(input)
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / plane) % c;
                (v - mean[ch]) * inv_std[ch]
            })
            .collect();
        Ok(self.push(
            Tensor::new(&in_shape, out)?,
            Op::Normalize { input, inv_std, plane },
            &[input],
        ))
    }

    /// Bilinear shrink to `size` and zero-pad back at (`top`, `left`).
    pub fn resize_pad(&mut self, input: NodeId, size: usize, top: usize, left: usize) -> Result<NodeId> {
        let in_shape = self.shape(input).to_vec();
        let (batch, [c, h, w]) = batch_and_image(&in_shape, "resize_pad")?;
        if size == 0 || size + top > h || size + left > w {
            return Err(Error::shape(format!(
                "resize to {size} at ({top},{left}) does not fit {h}x{w}"
            )));
        }
        let spec = ResizePad {
            channels: c,
            h,
            w,
            size,
            top,
            left,
        };
        let len = c * h * w;
        let mut out = vec![0.0f32; batch * len];
        {
            let x = self.data(input);
            for (img, dst) in x.chunks(len).zip(out.chunks_mut(len)) {
                spec.forward(img, dst);
            }
        }
        Ok(self.push(
            Tensor::new(&in_shape, out)?,
            Op::ResizePad { input, spec, batch },
            &[input],
        ))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(input).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(input), &[input]))
    }

    /// Arithmetic mean of equally-shaped nodes.
    pub fn mean(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = *inputs.first().ok_or_else(|| Error::usage("mean of zero nodes"))?;
        let shape = self.shape(first).to_vec();
        if let Some(bad) = inputs.iter().find(|&&i| self.shape(i) != shape.as_slice()) {
            return Err(Error::shape(format!("mean of {shape:?} and {:?}", self.shape(*bad))));
        }
        let mut acc = self.data(first).to_vec();
        for &i in &inputs[1..] {
            acc.iter_mut().zip(self.data(i)).for_each(|(a, b)| *a += b);
        }
        let scale = inputs.len() as f32;
        if inputs.len() > 1 {
            acc.iter_mut().for_each(|a| *a /= scale);
        }
        Ok(self.push(Tensor::new(&shape, acc)?, Op::Mean(inputs.to_vec()), inputs))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        let width = *shape.last().expect("rank >= 1");
        if width < 2 {
            return Err(Error::shape("softmax needs at least two classes"));
        }
        let out: Vec<f32> = self.data(input).chunks(width).flat_map(softmax).collect();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { input, width }, &[input]))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s: f32 = self.data(input).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(input), &[input])
    }

    /// Scalar node with a caller-supplied local gradient w.r.t. `input`.
    pub fn head(&mut self, input: NodeId, value: f32, local_grad: Vec<f32>) -> Result<NodeId> {
        if local_grad.len() != self.value(input).len() {
            return Err(Error::shape("head gradient length differs from its input"));
        }
        Ok(self.push(Tensor::scalar(value), Op::Head { input, local_grad }, &[input]))
    }

    /// Reverse pass from a scalar `output`. Only nodes whose leaves were
    /// created with `requires_grad` receive gradients.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(NodeId(idx), &node.op, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.tensor().shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, this: NodeId, op: &Op, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let slot = |id: NodeId, grads: &mut [Option<Vec<f32>>]| -> Option<usize> {
            if !self.needs(id) {
                return None;
            }
            if grads[id.0].is_none() {
                grads[id.0] = Some(vec![0.0; self.value(id).len()]);
            }
            Some(id.0)
        };
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                batch,
            } => {
                let x = self.data(*input);
                let k = self.data(*kernel);
                let in_len = geom.c_in * geom.h * geom.w;
                let out_len = geom.c_out * geom.out_h() * geom.out_w();
                let gi_slot = slot(*input, grads);
                let gk_slot = slot(*kernel, grads);
                let gb_slot = bias.and_then(|b| slot(b, grads));
                let mut gi = gi_slot.map(|i| grads[i].take().unwrap());
                let mut gk = gk_slot.map(|i| grads[i].take().unwrap());
                let mut gb = gb_slot.map(|i| grads[i].take().unwrap());
                for b in 0..*batch {
                    kernels::conv2d_backward(
                        &x[b * in_len..(b + 1) * in_len],
                        k,
                        &g[b * out_len..(b + 1) * out_len],
                        geom,
                        gi.as_mut().map(|v| &mut v[b * in_len..(b + 1) * in_len]),
                        gk.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                }
                for (s, v) in [(gi_slot, gi), (gk_slot, gk), (gb_slot, gb)] {
                    if let (Some(i), Some(v)) = (s, v) {
                        grads[i] = Some(v);
                    }
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
                rows,
            } => {
                let x = self.data(*input);
                let w = self.data(*weight);
                let n = x.len() / rows;
                let m = w.len() / n;
                if let Some(i) = slot(*input, grads) {
                    let gi = grads[i].as_mut().unwrap();
                    for r in 0..*rows {
                        let gr = &g[r * m..(r + 1) * m];
                        let dst = &mut gi[r * n..(r + 1) * n];
                        for (o, &go) in gr.iter().enumerate() {
                            if go != 0.0 {
                                let wrow = &w[o * n..(o + 1) * n];
                                dst.iter_mut().zip(wrow).for_each(|(d, &wv)| *d += go * wv);
                            }
                        }
                    }
                }
                if let Some(i) = slot(*weight, grads) {
                    let gw = grads[i].as_mut().unwrap();
                    for r in 0..*rows {
                        let xr = &x[r * n..(r + 1) * n];
                        for o in 0..m {
                            let go = g[r * m + o];
                            gw[o * n..(o + 1) * n]
                                .iter_mut()
                                .zip(xr)
                                .for_each(|(d, &xv)| *d += go * xv);
                        }
                    }
                }
                if let Some(i) = bias.and_then(|b| slot(b, grads)) {
                    let gb = grads[i].as_mut().unwrap();
                    for r in 0..*rows {
                        gb.iter_mut().zip(&g[r * m..(r + 1) * m]).for_each(|(d, &go)| *d += go);
                    }
                }
            }
            Op::Relu(input) => {
                if let Some(i) = slot(*input, grads) {
                    let x = self.data(*input);
                    let gi = grads[i].as_mut().unwrap();
                    for ((d, &xv), &go) in gi.iter_mut().zip(x).zip(g) {
                        if xv > 0.0 {
                            *d += go;
                        }
                    }
                }
            }
            Op::Pool2d {
                input,
                kind,
                geom,
                batch,
                argmax,
            } => {
                if let Some(i) = slot(*input, grads) {
                    let gi = grads[i].as_mut().unwrap();
                    let in_len = geom.channels * geom.h * geom.w;
                    let out_len = geom.channels * geom.out_h() * geom.out_w();
                    for b in 0..*batch {
                        let am: &[u32] = if *kind == PoolKind::Max {
                            &argmax[b * out_len..(b + 1) * out_len]
                        } else {
                            &[]
                        };
                        kernels::pool2d_backward(
                            *kind,
                            geom,
                            &g[b * out_len..(b + 1) * out_len],
                            am,
                            &mut gi[b * in_len..(b + 1) * in_len],
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if let Some(i) = slot(*id, grads) {
                        let gi = grads[i].as_mut().unwrap();
                        gi.iter_mut().zip(g).for_each(|(d, &go)| *d += go);
                    }
                }
            }
            Op::Concat {
                a,
                b,
                outer,
                inner_a,
                inner_b,
            } => {
                let stride = inner_a + inner_b;
                if let Some(i) = slot(*a, grads) {
                    let gi = grads[i].as_mut().unwrap();
                    for o in 0..*outer {
                        gi[o * inner_a..(o + 1) * inner_a]
                            .iter_mut()
                            .zip(&g[o * stride..o * stride + inner_a])
                            .for_each(|(d, &go)| *d += go);
                    }
                }
                if let Some(i) = slot(*b, grads) {
                    let gi = grads[i].as_mut().unwrap();
                    for o in 0..*outer {
                        gi[o * inner_b..(o + 1) * inner_b]
                            .iter_mut()
                            .zip(&g[o * stride + inner_a..(o + 1) * stride])
                            .for_each(|(d, &go)| *d += go);
                    }
                }
            }
            Op::Normalize { input, inv_std, plane } => {
                if let Some(i) = slot(*input, grads) {
                    let c = inv_std.len();
                    let gi = grads[i].as_mut().unwrap();
                    for (j, (d, &go)) in gi.iter_mut().zip(g).enumerate() {
                        *d += go * inv_std[(j / plane) % c];
                    }
                }
            }
            Op::ResizePad { input, spec, batch } => {
                if let Some(i) = slot(*input, grads) {
                    let gi = grads[i].as_mut().unwrap();
                    let len = spec.channels * spec.h * spec.w;
                    for b in 0..*batch {
                        spec.backward(&g[b * len..(b + 1) * len], &mut gi[b * len..(b + 1) * len]);
                    }
                }
            }
            Op::Reshape(input) => {
                if let Some(i) = slot(*input, grads) {
                    let gi = grads[i].as_mut().unwrap();
                    gi.iter_mut().zip(g).for_each(|(d, &go)| *d += go);
                }
            }
            Op::Mean(inputs) => {
                let scale = 1.0 / inputs.len() as f32;
                for id in inputs {
                    if let Some(i) = slot(*id, grads) {
                        let gi = grads[i].as_mut().unwrap();
                        gi.iter_mut().zip(g).for_each(|(d, &go)| *d += go * scale);
                    }
                }
            }
            Op::Softmax { input, width } => {
                if let Some(i) = slot(*input, grads) {
                    let p = self.data(this);
                    let gi = grads[i].as_mut().unwrap();
                    for ((prow, grow), drow) in p.chunks(*width).zip(g.chunks(*width)).zip(gi.chunks_mut(*width)) {
                        let dot: f32 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for ((d, &pj), &gj) in drow.iter_mut().zip(prow).zip(grow) {
                            *d += pj * (gj - dot);
                        }
                    }
                }
            }
            Op::Sum(input) => {
                if let Some(i) = slot(*input, grads) {
                    let gi = grads[i].as_mut().unwrap();
                    gi.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Head { input, local_grad } => {
                if let Some(i) = slot(*input, grads) {
                    let gi = grads[i].as_mut().unwrap();
                    gi.iter_mut().zip(local_grad).for_each(|(d, &lg)| *d += g[0] * lg);
                }
            }
        }
    }
}
