//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Tape`] is an append-only list of nodes. Each node holds its forward
//! value and the operation that produced it; operands always precede the
//! node, so walking the list backwards from the loss is a reverse
//! topological order and every node is visited once.
//!
//! ```
//! use wagf::{tape::Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
//! ```

use crate::nn::{self, LstmCache, LstmWeights};
use crate::wavelet::{self, Band};
use crate::{Error, Real, Result, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[H, W, C] ⊙ [H, W, 1]`
    MulChannel {
        x: Var,
        gate: Var,
    },
    ScaleConst(Var, T),
    /// Multiplication by a single-element tensor.
    ScaleBy {
        x: Var,
        s: Var,
    },
    MatMul(Var, Var),
    /// Adds `b: [n]` to every row of `x: [.., n]`.
    AddBias {
        x: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    Sum(Var),
    Gap(Var),
    Reshape(Var),
    Transpose2(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        cols: Vec<T>,
    },
    SeparableConv {
        x: Var,
        depthwise: Var,
        pointwise: Var,
        bias: Var,
        mid: Tensor<T>,
    },
    Lstm {
        seq: Var,
        input: Var,
        recurrent: Var,
        bias: Var,
        cache: LstmCache<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: nn::NormCache<T>,
    },
    HaarDwt(Var),
    HaarIdwt(Var),
    ZeroBand(Var, Band),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulChannel { .. } => "mul_channel",
            Op::ScaleConst(..) => "scale",
            Op::ScaleBy { .. } => "scale_by",
            Op::MatMul(..) => "matmul",
            Op::AddBias { .. } => "add_bias",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softmax(_) => "softmax",
            Op::Sum(_) => "sum",
            Op::Gap(_) => "global_average_pool",
            Op::Reshape(_) => "reshape",
            Op::Transpose2(_) => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::SeparableConv { .. } => "separable_conv2d",
            Op::Lstm { .. } => "lstm",
            Op::LayerNorm { .. } => "layer_norm",
            Op::HaarDwt(_) => "haar_dwt2",
            Op::HaarIdwt(_) => "haar_idwt2",
            Op::ZeroBand(..) => "zero_band",
            Op::CrossEntropy { .. } => "cross_entropy_loss",
        }
    }

    fn operands(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::MulChannel { x, gate } => vec![x, gate],
            Op::ScaleBy { x, s } => vec![x, s],
            Op::AddBias { x, b } => vec![x, b],
            Op::ScaleConst(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Softmax(x)
            | Op::Sum(x)
            | Op::Gap(x)
            | Op::Reshape(x)
            | Op::Transpose2(x)
            | Op::HaarDwt(x)
            | Op::HaarIdwt(x)
            | Op::ZeroBand(x, _) => vec![x],
            Op::Conv2d { x, w, b, .. } => vec![x, w, b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::SeparableConv {
                x,
                depthwise,
                pointwise,
                bias,
                ..
            } => vec![x, depthwise, pointwise, bias],
            Op::Lstm {
                seq,
                input,
                recurrent,
                bias,
                ..
            } => vec![seq, input, recurrent, bias],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    capture: bool,
}

/// Recording of one forward pass. Confined to a single thread; build one
/// tape per sample (or per replica) for parallel work.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    checked: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: false,
        }
    }

    /// A tape that rejects any operation producing NaN or infinity.
    pub fn checked() -> Self {
        Self {
            nodes: Vec::new(),
            checked: true,
        }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            capture: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            capture: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Keeps the gradient of an intermediate node after [`Tape::backward`].
    pub fn capture(&mut self, v: Var) {
        self.nodes[v.0].capture = true;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.operands().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            capture: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(v.0))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(y, Op::Sub(a, b))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(y, Op::Mul(a, b))
    }

    /// `x: [H, W, C]` times `gate: [H, W, 1]`, broadcast over channels.
    pub fn mul_channel(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gate));
        xv.expect_rank(3, "mul_channel")?;
        let s = xv.shape();
        if gv.shape() != [s[0], s[1], 1] {
            return Err(Error::shape(
                "mul_channel",
                format!("{:?} against gate {:?}", s, gv.shape()),
            ));
        }
        let c = s[2];
        let mut y = xv.clone();
        for (px, &g) in y.data_mut().chunks_exact_mut(c).zip(gv.data()) {
            px.iter_mut().for_each(|v| *v *= g);
        }
        self.push(y, Op::MulChannel { x, gate })
    }

    /// See [`nn::layer_norm_forward`].
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (y, cache) = nn::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta))?;
        self.push(y, Op::LayerNorm { x, gamma, beta, cache })
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let y = self.value(x).scale(s);
        self.push(y, Op::ScaleConst(x, s))
    }

    /// Multiplies by a single-element node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::shape("scale_by", format!("scale {:?}", sv.shape())));
        }
        let y = self.value(x).scale(sv.item());
        self.push(y, Op::ScaleBy { x, s })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = nn::matmul(self.value(a), self.value(b))?;
        self.push(y, Op::MatMul(a, b))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = *xv.shape().last().expect("rank >= 1");
        if bv.shape() != [n] {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let mut y = xv.clone();
        for row in y.data_mut().chunks_exact_mut(n) {
            for (v, &bb) in row.iter_mut().zip(bv.data()) {
                *v += bb;
            }
        }
        self.push(y, Op::AddBias { x, b })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = nn::relu(self.value(x));
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = nn::sigmoid_map(self.value(x));
        self.push(y, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let y = nn::tanh(self.value(x));
        self.push(y, Op::Tanh(x))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let y = nn::softmax(self.value(x));
        self.push(y, Op::Softmax(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x))
    }

    pub fn global_average_pool(&mut self, x: Var) -> Result<Var> {
        let y = nn::global_average_pool(self.value(x))?;
        self.push(y, Op::Gap(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        self.push(y, Op::Reshape(x))
    }

    /// Swaps the two leading axes.
    pub fn transpose2(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).transpose2()?;
        self.push(y, Op::Transpose2(x))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (y, cols) = nn::conv2d_forward(self.value(x), self.value(w), self.value(b), stride)?;
        self.push(y, Op::Conv2d { x, w, b, stride, cols })
    }

    pub fn separable_conv2d(&mut self, x: Var, depthwise: Var, pointwise: Var, bias: Var) -> Result<Var> {
        let (y, mid) = nn::separable_conv2d_forward(
            self.value(x),
            self.value(depthwise),
            self.value(pointwise),
            self.value(bias),
        )?;
        self.push(
            y,
            Op::SeparableConv {
                x,
                depthwise,
                pointwise,
                bias,
                mid,
            },
        )
    }

    /// Hidden state at every timestep, `[T, u]`.
    pub fn lstm(&mut self, seq: Var, input: Var, recurrent: Var, bias: Var) -> Result<Var> {
        let weights = LstmWeights {
            input: self.value(input).clone(),
            recurrent: self.value(recurrent).clone(),
            bias: self.value(bias).clone(),
        };
        let (y, cache) = nn::lstm_forward_cached(self.value(seq), &weights)?;
        self.push(
            y,
            Op::Lstm {
                seq,
                input,
                recurrent,
                bias,
                cache,
            },
        )
    }

    /// `[H, W, C]` to packed subbands `[4, H/2, W/2, C]`.
    pub fn haar_dwt2(&mut self, x: Var) -> Result<Var> {
        let y = wavelet::dwt_packed(self.value(x))?;
        self.push(y, Op::HaarDwt(x))
    }

    /// Packed subbands `[4, H/2, W/2, C]` back to `[H, W, C]`.
    pub fn haar_idwt2(&mut self, x: Var) -> Result<Var> {
        let y = wavelet::idwt_packed(self.value(x))?;
        self.push(y, Op::HaarIdwt(x))
    }

    /// Zeroes one band of a packed subband tensor.
    pub fn zero_band(&mut self, x: Var, band: Band) -> Result<Var> {
        let mut y = self.value(x).clone();
        wavelet::zero_band_in_place(&mut y, band)?;
        self.push(y, Op::ZeroBand(x, band))
    }

    /// Mean softmax cross-entropy of `logits: [B, K]`; returns a scalar node.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = nn::cross_entropy_forward(self.value(logits), labels)?;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Accumulates gradients of the scalar `loss` into every leaf that
    /// requires them and every captured intermediate.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = (if node.capture {
                grads[i].clone()
            } else {
                grads[i].take()
            }) else {
                continue;
            };
            for (parent, pg) in self.local_grads(node, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            let keep = node.capture || (node.requires_grad && matches!(node.op, Op::Leaf));
            if !keep {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            &Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            &Op::Sub(a, b) => vec![(a, g.clone()), (b, g.map(|v| -v))],
            &Op::Mul(a, b) => vec![
                (a, g.zip_map(val(b), |x, y| x * y).expect("mul grad")),
                (b, g.zip_map(val(a), |x, y| x * y).expect("mul grad")),
            ],
            &Op::MulChannel { x, gate } => {
                let c = val(x).shape()[2];
                let mut dx = g.clone();
                for (px, &gt) in dx.data_mut().chunks_exact_mut(c).zip(val(gate).data()) {
                    px.iter_mut().for_each(|v| *v *= gt);
                }
                let dg: Vec<T> = g
                    .data()
                    .chunks_exact(c)
                    .zip(val(x).data().chunks_exact(c))
                    .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                    .collect();
                vec![(x, dx), (gate, Tensor::new(val(gate).shape(), dg).expect("gate grad"))]
            }
            &Op::ScaleConst(x, s) => vec![(x, g.scale(s))],
            &Op::ScaleBy { x, s } => {
                let ds: T = g.data().iter().zip(val(x).data()).map(|(&a, &b)| a * b).sum();
                vec![
                    (x, g.scale(val(s).item())),
                    (s, Tensor::new(val(s).shape(), vec![ds]).expect("scale grad")),
                ]
            }
            &Op::MatMul(a, b) => {
                let (da, db) = nn::matmul_backward(val(a), val(b), g);
                vec![(a, da), (b, db)]
            }
            &Op::AddBias { x, b } => {
                let n = val(b).len();
                let mut db = vec![T::zero(); n];
                for row in g.data().chunks_exact(n) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                vec![(x, g.clone()), (b, Tensor::new(&[n], db).expect("bias grad"))]
            }
            &Op::Relu(x) => vec![(
                x,
                g.zip_map(val(x), |gv, xv| if xv > T::zero() { gv } else { T::zero() })
                    .expect("relu grad"),
            )],
            &Op::Sigmoid(x) => vec![(
                x,
                g.zip_map(&node.value, |gv, y| gv * y * (T::one() - y))
                    .expect("sigmoid grad"),
            )],
            &Op::Tanh(x) => vec![(
                x,
                g.zip_map(&node.value, |gv, y| gv * (T::one() - y * y))
                    .expect("tanh grad"),
            )],
            &Op::Softmax(x) => vec![(x, nn::softmax_backward(&node.value, g))],
            &Op::Sum(x) => vec![(x, Tensor::full(val(x).shape(), g.item()))],
            &Op::Gap(x) => {
                let s = val(x).shape();
                let inv = T::one() / T::of_usize(s[0] * s[1]);
                let c = s[2];
                let dx = Tensor::from_fn(s, |i| g.data()[i % c] * inv);
                vec![(x, dx)]
            }
            &Op::Reshape(x) => vec![(x, g.clone().reshape(val(x).shape()).expect("reshape grad"))],
            &Op::Transpose2(x) => vec![(x, g.transpose2().expect("transpose grad"))],
            Op::Conv2d { x, w, b, stride, cols } => {
                let gr = nn::conv2d_backward(val(*x).shape(), val(*w), cols, *stride, g);
                vec![(*x, gr.x), (*w, gr.w), (*b, gr.b)]
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let (dx, dg, db) = nn::layer_norm_backward(cache, val(*gamma), g);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::SeparableConv {
                x,
                depthwise,
                pointwise,
                bias,
                mid,
            } => {
                let gr = nn::separable_conv2d_backward(val(*x), val(*depthwise), val(*pointwise), mid, g);
                vec![
                    (*x, gr.x),
                    (*depthwise, gr.depthwise),
                    (*pointwise, gr.pointwise),
                    (*bias, gr.bias),
                ]
            }
            Op::Lstm {
                seq,
                input,
                recurrent,
                bias,
                cache,
            } => {
                let weights = LstmWeights {
                    input: val(*input).clone(),
                    recurrent: val(*recurrent).clone(),
                    bias: val(*bias).clone(),
                };
                let gr = nn::lstm_backward(val(*seq), &weights, &node.value, cache, g);
                vec![
                    (*seq, gr.seq),
                    (*input, gr.weights.input),
                    (*recurrent, gr.weights.recurrent),
                    (*bias, gr.weights.bias),
                ]
            }
            // Orthonormal: the adjoint of each transform is its inverse.
            &Op::HaarDwt(x) => vec![(x, wavelet::idwt_packed(g).expect("dwt grad"))],
            &Op::HaarIdwt(x) => vec![(x, wavelet::dwt_packed(g).expect("idwt grad"))],
            &Op::ZeroBand(x, band) => {
                let mut dx = g.clone();
                wavelet::zero_band_in_place(&mut dx, band).expect("band grad");
                vec![(x, dx)]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if !needs(*logits) {
                    return vec![];
                }
                vec![(*logits, nn::cross_entropy_backward(probs, labels, g.item()))]
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf or captured node; `None` if it does not influence
    /// the loss or was not retained.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let l = tape.sum(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let mut tape = Tape::<f64>::new();
        let xv = Tensor::from_fn(&[4], |i| i as f64 - 1.5);
        let x = tape.leaf(xv.clone());
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &xv.scale(2.0));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x + 3x)
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.scale(x, 3.0).unwrap();
        let z = tape.add(x, y).unwrap();
        let l = tape.sum(z).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn constants_and_uncaptured_nodes_have_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        let c = tape.constant(Tensor::full(&[2], 2.0));
        let y = tape.mul(x, c).unwrap();
        let z = tape.relu(y).unwrap();
        tape.capture(z);
        let l = tape.sum(z).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(y).is_none());
        assert_eq!(g.get(z).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar_on_tape() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
        assert!(matches!(tape.backward(Var(99)), Err(Error::UnknownNode(99))));
    }

    #[test]
    fn checked_mode_rejects_non_finite() {
        let mut tape = Tape::<f64>::checked();
        let x = tape.leaf(Tensor::full(&[1], f64::MAX));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { op: "scale" })));
        let mut loose = Tape::<f64>::new();
        let x = loose.leaf(Tensor::full(&[1], f64::MAX));
        assert!(loose.scale(x, 10.0).is_ok());
    }

    #[test]
    fn mul_channel_rejects_wrong_gate() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2, 3]));
        let g = tape.leaf(Tensor::zeros(&[2, 2, 3]));
        assert!(tape.mul_channel(x, g).is_err());
        let y = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(tape.add(x, y).is_err());
    }
}
