//! Minimal reverse-mode autodiff over dense f64 tensors.
//!
//! A [`Tape`] owns every tensor created during a forward pass and records,
//! for each operation whose output needs a gradient, a backward closure.
//! Calling [`Tape::backward`] replays those closures in reverse execution
//! order and returns a [`GradStore`] with the accumulated gradients.
//!
//! The op set is deliberately small: convolution, a handful of elementwise
//! ops, `depth_to_space`, and [`Tape::custom_unit`] / [`Tape::push_node`]
//! as extension points for operations with surrogate (straight-through)
//! gradients.

mod conv;

use std::sync::Arc;

use thiserror::Error;

pub use conv::ConvSpec;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Dense tensor with row-major layout `(batch, channel, height, width)`
/// for rank-4 data; scalars are stored as shape `[1]`.
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Per-node gradient buffers produced by [`Tape::backward`].
pub struct GradStore {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradStore {
    fn new(len: usize) -> Self {
        GradStore {
            grads: (0..len).map(|_| None).collect(),
        }
    }

    /// Gradient of the loss w.r.t. the given node, if any flowed to it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Add a contribution into a node's gradient buffer.
    pub fn accumulate(&mut self, id: TensorId, delta: &[f64]) {
        match &mut self.grads[id.0] {
            Some(g) => {
                assert_eq!(g.len(), delta.len(), "gradient length mismatch");
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => self.grads[id.0] = Some(delta.to_vec()),
        }
    }
}

pub type BackwardFn = Box<dyn Fn(&Tape, &mut GradStore)>;

struct OpRecord {
    backward: BackwardFn,
}

/// Records a forward computation and replays it backwards for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<OpRecord>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Create a leaf tensor from owned data.
    pub fn input(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> TensorId {
        self.input_shared(shape, Arc::new(data), requires_grad)
    }

    /// Create a leaf tensor that shares its buffer with the caller.
    ///
    /// Model parameters are uploaded this way once per step without copying.
    pub fn input_shared(
        &mut self,
        shape: &[usize],
        data: Arc<Vec<f64>>,
        requires_grad: bool,
    ) -> TensorId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match buffer of {} elements",
            shape,
            data.len()
        );
        let id = TensorId(self.nodes.len());
        self.nodes.push(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad,
        });
        id
    }

    /// Scalar constant (never receives a gradient).
    pub fn constant(&mut self, value: f64) -> TensorId {
        self.input(&[1], vec![value], false)
    }

    /// Id the next created node will get; lets callers capture their own
    /// output id inside a backward closure before pushing it.
    pub fn next_id(&self) -> TensorId {
        TensorId(self.nodes.len())
    }

    /// Generic extension point: append a node with an explicit backward
    /// closure. The closure receives the node arena and the grad store and
    /// is responsible for pulling its own upstream gradient.
    ///
    /// Pass `None` when no parent needs a gradient; the node then acts as
    /// a constant for backpropagation.
    pub fn push_node(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        backward: Option<BackwardFn>,
    ) -> TensorId {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = TensorId(self.nodes.len());
        self.nodes.push(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: backward.is_some(),
        });
        if let Some(backward) = backward {
            self.ops.push(OpRecord { backward });
        }
        id
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        needs_grad: bool,
        backward: impl Fn(&Tape, &mut GradStore) + 'static,
    ) -> TensorId {
        self.push_node(
            shape,
            data,
            if needs_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        )
    }

    /// Elementwise max(x, 0). Gradient is 1 strictly above zero, else 0.
    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let xv = &self.nodes[x.0];
        let out: Vec<f64> = xv
            .data
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let shape = xv.shape.clone();
        let rg = xv.requires_grad;
        let out_id = TensorId(self.nodes.len());
        self.push(shape, out, rg, move |tape, store| {
            let Some(g) = store.grad(out_id).map(<[f64]>::to_vec) else {
                return;
            };
            let dx: Vec<f64> = tape
                .data(x)
                .iter()
                .zip(&g)
                .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                .collect();
            store.accumulate(x, &dx);
        })
    }

    /// Elementwise logistic sigmoid.
    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let xv = &self.nodes[x.0];
        let out: Vec<f64> = xv.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let shape = xv.shape.clone();
        let rg = xv.requires_grad;
        let out_id = TensorId(self.nodes.len());
        self.push(shape, out, rg, move |tape, store| {
            let Some(g) = store.grad(out_id).map(<[f64]>::to_vec) else {
                return;
            };
            let dx: Vec<f64> = tape
                .data(out_id)
                .iter()
                .zip(&g)
                .map(|(&y, &gi)| gi * y * (1.0 - y))
                .collect();
            store.accumulate(x, &dx);
        })
    }

    pub fn add(&mut self, x: TensorId, y: TensorId) -> Result<TensorId> {
        self.check_same_shape("add", x, y)?;
        let out: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .zip(self.nodes[y.0].data.iter())
            .map(|(a, b)| a + b)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad || self.nodes[y.0].requires_grad;
        let out_id = TensorId(self.nodes.len());
        Ok(self.push(shape, out, rg, move |tape, store| {
            let Some(g) = store.grad(out_id).map(<[f64]>::to_vec) else {
                return;
            };
            if tape.value(x).requires_grad() {
                store.accumulate(x, &g);
            }
            if tape.value(y).requires_grad() {
                store.accumulate(y, &g);
            }
        }))
    }

    pub fn mul(&mut self, x: TensorId, y: TensorId) -> Result<TensorId> {
        self.check_same_shape("mul", x, y)?;
        let out: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .zip(self.nodes[y.0].data.iter())
            .map(|(a, b)| a * b)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad || self.nodes[y.0].requires_grad;
        let out_id = TensorId(self.nodes.len());
        Ok(self.push(shape, out, rg, move |tape, store| {
            let Some(g) = store.grad(out_id).map(<[f64]>::to_vec) else {
                return;
            };
            if tape.value(x).requires_grad() {
                let dx: Vec<f64> = tape
                    .data(y)
                    .iter()
                    .zip(&g)
                    .map(|(&b, &gi)| gi * b)
                    .collect();
                store.accumulate(x, &dx);
            }
            if tape.value(y).requires_grad() {
                let dy: Vec<f64> = tape
                    .data(x)
                    .iter()
                    .zip(&g)
                    .map(|(&a, &gi)| gi * a)
                    .collect();
                store.accumulate(y, &dy);
            }
        }))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let total: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        let out_id = TensorId(self.nodes.len());
        self.push(vec![1], vec![total], rg, move |tape, store| {
            let Some(g) = store.grad(out_id).map(<[f64]>::to_vec) else {
                return;
            };
            let dx = vec![g[0]; tape.data(x).len()];
            store.accumulate(x, &dx);
        })
    }

    /// Squared l2 error `sum((x - y)^2)` as a scalar tensor.
    pub fn sq_error(&mut self, x: TensorId, y: TensorId) -> Result<TensorId> {
        self.check_same_shape("sq_error", x, y)?;
        let total: f64 = self.nodes[x.0]
            .data
            .iter()
            .zip(self.nodes[y.0].data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let rg = self.nodes[x.0].requires_grad || self.nodes[y.0].requires_grad;
        let out_id = TensorId(self.nodes.len());
        Ok(self.push(vec![1], vec![total], rg, move |tape, store| {
            let Some(g) = store.grad(out_id).map(<[f64]>::to_vec) else {
                return;
            };
            let diff: Vec<f64> = tape
                .data(x)
                .iter()
                .zip(tape.data(y).iter())
                .map(|(a, b)| 2.0 * (a - b) * g[0])
                .collect();
            if tape.value(x).requires_grad() {
                store.accumulate(x, &diff);
            }
            if tape.value(y).requires_grad() {
                let neg: Vec<f64> = diff.iter().map(|d| -d).collect();
                store.accumulate(y, &neg);
            }
        }))
    }

    /// Rearranges channel blocks into space: `[N, C, H, W]` becomes
    /// `[N, C/s^2, sH, sW]`, where output channel `c` at `(sy+dy, sx+dx)`
    /// reads input channel `c*s^2 + dy*s + dx` at `(y, x)`.
    pub fn depth_to_space(&mut self, x: TensorId, s: usize) -> Result<TensorId> {
        let xv = &self.nodes[x.0];
        let [n, c, h, w] = rank4("depth_to_space", &xv.shape)?;
        if s == 0 || c % (s * s) != 0 {
            return Err(TensorError::Shape(format!(
                "depth_to_space: {c} channels not divisible by {s}^2"
            )));
        }
        let co = c / (s * s);
        let (oh, ow) = (h * s, w * s);
        let mut out = vec![0.0; n * co * oh * ow];
        let src = &xv.data;
        for b in 0..n {
            for oc in 0..co {
                for y2 in 0..oh {
                    let (y, dy) = (y2 / s, y2 % s);
                    for x2 in 0..ow {
                        let (xx, dx) = (x2 / s, x2 % s);
                        let ci = oc * s * s + dy * s + dx;
                        out[((b * co + oc) * oh + y2) * ow + x2] =
                            src[((b * c + ci) * h + y) * w + xx];
                    }
                }
            }
        }
        let rg = xv.requires_grad;
        let out_id = TensorId(self.nodes.len());
        Ok(self.push(vec![n, co, oh, ow], out, rg, move |tape, store| {
            let Some(g) = store.grad(out_id).map(<[f64]>::to_vec) else {
                return;
            };
            let mut dx = vec![0.0; tape.data(x).len()];
            for b in 0..n {
                for oc in 0..co {
                    for y2 in 0..oh {
                        let (y, dy) = (y2 / s, y2 % s);
                        for x2 in 0..ow {
                            let (xx, dx_) = (x2 / s, x2 % s);
                            let ci = oc * s * s + dy * s + dx_;
                            dx[((b * c + ci) * h + y) * w + xx] +=
                                g[((b * co + oc) * oh + y2) * ow + x2];
                        }
                    }
                }
            }
            store.accumulate(x, &dx);
        }))
    }

    /// Node with a custom forward and a surrogate elementwise gradient:
    /// backprop multiplies the upstream gradient by `backward_fn(x)`.
    ///
    /// Both functions must be pure and shape-preserving; this is where the
    /// straight-through estimators live.
    pub fn custom_unit(
        &mut self,
        forward_fn: impl Fn(&[f64]) -> Vec<f64>,
        backward_fn: impl Fn(&[f64]) -> Vec<f64> + 'static,
        x: TensorId,
    ) -> TensorId {
        let xv = &self.nodes[x.0];
        let out = forward_fn(&xv.data);
        assert_eq!(
            out.len(),
            xv.data.len(),
            "custom_unit forward must preserve shape"
        );
        let shape = xv.shape.clone();
        let rg = xv.requires_grad;
        let out_id = TensorId(self.nodes.len());
        self.push(shape, out, rg, move |tape, store| {
            let Some(g) = store.grad(out_id).map(<[f64]>::to_vec) else {
                return;
            };
            let proxy = backward_fn(tape.data(x));
            assert_eq!(
                proxy.len(),
                g.len(),
                "custom_unit backward must preserve shape"
            );
            let dx: Vec<f64> = proxy.iter().zip(&g).map(|(p, gi)| p * gi).collect();
            store.accumulate(x, &dx);
        })
    }

    /// 2D convolution with zero padding and square kernels.
    ///
    /// `input` is `[N, Cin, H, W]`, `weight` is `[Cout, Cin, k, k]`,
    /// `bias` is `[Cout]`; output spatial size is
    /// `floor((H + 2*pad - k) / stride) + 1`.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let spec = ConvSpec::resolve(
            &self.nodes[input.0].shape,
            &self.nodes[weight.0].shape,
            &self.nodes[bias.0].shape,
            stride,
            pad,
        )?;
        let x_rg = self.nodes[input.0].requires_grad;
        let w_rg = self.nodes[weight.0].requires_grad;
        let b_rg = self.nodes[bias.0].requires_grad;
        let needs_grad = x_rg || w_rg || b_rg;

        let (out, cols) = conv::forward(
            &self.nodes[input.0].data,
            &self.nodes[weight.0].data,
            &self.nodes[bias.0].data,
            &spec,
            // im2col buffers are only kept when the weight gradient will
            // need them; otherwise backward recomputes nothing.
            w_rg,
        );
        let cols = Arc::new(cols);
        let out_id = TensorId(self.nodes.len());
        Ok(
            self.push(spec.out_shape(), out, needs_grad, move |tape, store| {
                let Some(g) = store.grad(out_id).map(<[f64]>::to_vec) else {
                    return;
                };
                if b_rg {
                    let db = conv::bias_grad(&g, &spec);
                    store.accumulate(bias, &db);
                }
                if w_rg {
                    let dw = conv::weight_grad(&g, &cols, &spec);
                    store.accumulate(weight, &dw);
                }
                if x_rg {
                    let dx = conv::input_grad(&g, tape.data(weight), &spec);
                    store.accumulate(input, &dx);
                }
            }),
        )
    }

    /// Reverse-mode sweep from a scalar loss. The tape itself is immutable;
    /// gradients land in the returned [`GradStore`].
    pub fn backward(&self, loss: TensorId) -> Result<GradStore> {
        let lv = &self.nodes[loss.0];
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape.clone()));
        }
        let mut store = GradStore::new(self.nodes.len());
        store.accumulate(loss, &[1.0]);
        for op in self.ops.iter().rev() {
            (op.backward)(self, &mut store);
        }
        Ok(store)
    }

    fn check_same_shape(&self, what: &str, x: TensorId, y: TensorId) -> Result<()> {
        let (a, b) = (&self.nodes[x.0].shape, &self.nodes[y.0].shape);
        if a != b {
            return Err(TensorError::Shape(format!(
                "{what}: shapes {a:?} and {b:?} differ"
            )));
        }
        Ok(())
    }
}

fn rank4(what: &str, shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        other => Err(TensorError::Shape(format!(
            "{what}: expected rank-4 tensor, got {other:?}"
        ))),
    }
}

#[cfg(test)]
mod tests;
