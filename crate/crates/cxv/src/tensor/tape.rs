//! Wengert tape. Operations append nodes in execution order; replaying the
//! list in reverse visits every consumer before its producer, so a single
//! reverse sweep computes all vector-Jacobian products.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{CxvError, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels as k;
use crate::tensor::shape::{broadcast_strides, reduce_to_shape, zip_broadcast};
use crate::tensor::Tensor;

static TAPE_GEN: AtomicU64 = AtomicU64::new(1);

pub(crate) enum OpKind<E: Scalar> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(E),
    Relu,
    Gelu,
    EluPlusOne,
    Exp,
    Log,
    Abs,
    Matmul {
        trans_a: bool,
        trans_b: bool,
    },
    Conv2d {
        stride: usize,
        pad: usize,
    },
    LayerNorm {
        saved: k::LayerNormSaved<E>,
    },
    SoftmaxLastDim,
    Dropout {
        scaled_mask: Vec<E>,
    },
    GlobalAvgPool,
    CrossEntropy {
        labels: Vec<usize>,
        probs: Vec<E>,
    },
    Reshape,
    Permute {
        axes: Vec<usize>,
    },
    SumAxis {
        axis: usize,
    },
    MaxAxis {
        argmax: Vec<usize>,
    },
    SumAll,
    SegmentMeanLandmarks {
        m: usize,
    },
}

pub(crate) struct Node<E: Scalar> {
    pub kind: OpKind<E>,
    pub inputs: Vec<u32>,
    pub output: Tensor<E>,
    /// True when some leaf below this node requires a gradient; dead
    /// branches (constants) are pruned during the reverse sweep.
    pub needs_grad: bool,
}

/// Append-only operation record for one forward pass.
pub struct Tape<E: Scalar> {
    pub(crate) nodes: RefCell<Vec<Node<E>>>,
    pub(crate) gen: u64,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            gen: TAPE_GEN.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Node id of `t` on this tape, registering a leaf on first sight.
    pub(crate) fn ensure_node(&self, t: &Tensor<E>) -> u32 {
        if let Some((gen, id)) = t.tape_link() {
            if gen == self.gen {
                return id;
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len() as u32;
        nodes.push(Node {
            kind: OpKind::Leaf,
            inputs: Vec::new(),
            output: t.clone(),
            needs_grad: t.requires_grad(),
        });
        t.set_tape_link(self.gen, id);
        id
    }

    pub(crate) fn push(&self, kind: OpKind<E>, inputs: Vec<u32>, output: Tensor<E>) {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = inputs.iter().any(|&i| nodes[i as usize].needs_grad);
        let id = nodes.len() as u32;
        output.set_tape_link(self.gen, id);
        nodes.push(Node {
            kind,
            inputs,
            output,
            needs_grad,
        });
    }

    /// Reverse sweep from `loss`. Gradients accumulate additively into every
    /// requires-grad tensor still held outside the tape; callers zero
    /// parameter grads between steps.
    pub fn backward(&self, loss: &Tensor<E>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(CxvError::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let loss_id = match loss.tape_link() {
            Some((gen, id)) if gen == self.gen => id as usize,
            _ => {
                return Err(CxvError::Usage(
                    "backward: loss tensor is not a product of this tape".into(),
                ))
            }
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<E>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss_id] = Some(vec![E::one()]);

        for id in (0..=loss_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if node.output.requires_grad()
                && (matches!(node.kind, OpKind::Leaf) || node.output.is_externally_held())
            {
                node.output.accumulate_grad(&g);
            }
            backprop_node(node, &g, &nodes, &mut grads)?;
        }
        Ok(())
    }
}

fn add_into<E: Scalar>(slot: &mut Option<Vec<E>>, delta: Vec<E>) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

/// Dispatch one node's VJP, accumulating into the transient grads table.
fn backprop_node<E: Scalar>(
    node: &Node<E>,
    g: &[E],
    nodes: &[Node<E>],
    grads: &mut [Option<Vec<E>>],
) -> Result<()> {
    let input = |i: usize| -> &Tensor<E> { &nodes[node.inputs[i] as usize].output };
    let wants = |i: usize| -> bool { nodes[node.inputs[i] as usize].needs_grad };
    let out_shape = node.output.shape();

    match &node.kind {
        OpKind::Leaf => {}

        OpKind::Add | OpKind::Sub => {
            let (a, b) = (input(0), input(1));
            if wants(0) {
                let da = reduce_to_shape(g, out_shape, a.shape());
                add_into(&mut grads[node.inputs[0] as usize], da);
            }
            if wants(1) {
                let mut db = reduce_to_shape(g, out_shape, b.shape());
                if matches!(node.kind, OpKind::Sub) {
                    for v in &mut db {
                        *v = -*v;
                    }
                }
                add_into(&mut grads[node.inputs[1] as usize], db);
            }
        }

        OpKind::Mul | OpKind::Div => {
            let (a, b) = (input(0), input(1));
            let av = a.data();
            let bv = b.data();
            let a_str = broadcast_strides(a.shape(), out_shape);
            let b_str = broadcast_strides(b.shape(), out_shape);
            let div = matches!(node.kind, OpKind::Div);
            let mut da = wants(0).then(|| vec![E::zero(); av.len()]);
            let mut db = wants(1).then(|| vec![E::zero(); bv.len()]);
            zip_broadcast(out_shape, &a_str, &b_str, |flat, ao, bo| {
                let gi = g[flat];
                if div {
                    let inv = bv[bo].recip();
                    if let Some(da) = da.as_mut() {
                        da[ao] += gi * inv;
                    }
                    if let Some(db) = db.as_mut() {
                        db[bo] -= gi * av[ao] * inv * inv;
                    }
                } else {
                    if let Some(da) = da.as_mut() {
                        da[ao] += gi * bv[bo];
                    }
                    if let Some(db) = db.as_mut() {
                        db[bo] += gi * av[ao];
                    }
                }
            });
            if let Some(da) = da {
                add_into(&mut grads[node.inputs[0] as usize], da);
            }
            if let Some(db) = db {
                add_into(&mut grads[node.inputs[1] as usize], db);
            }
        }

        OpKind::Scale(c) => {
            if wants(0) {
                let dx = g.iter().map(|&v| v * *c).collect();
                add_into(&mut grads[node.inputs[0] as usize], dx);
            }
        }

        OpKind::Relu => {
            if wants(0) {
                let x = input(0).data();
                let dx = g
                    .iter()
                    .zip(x.iter())
                    .map(|(&gi, &xi)| if xi > E::zero() { gi } else { E::zero() })
                    .collect();
                add_into(&mut grads[node.inputs[0] as usize], dx);
            }
        }

        OpKind::Gelu => {
            if wants(0) {
                let x = input(0).data();
                let c = E::from_f64((2.0 / std::f64::consts::PI).sqrt());
                let a3 = E::from_f64(0.044715);
                let half = E::from_f64(0.5);
                let three = E::from_f64(3.0);
                let dx = g
                    .iter()
                    .zip(x.iter())
                    .map(|(&gi, &xi)| {
                        let u = c * (xi + a3 * xi * xi * xi);
                        let t = u.tanh();
                        let du = c * (E::one() + three * a3 * xi * xi);
                        gi * (half * (E::one() + t) + half * xi * (E::one() - t * t) * du)
                    })
                    .collect();
                add_into(&mut grads[node.inputs[0] as usize], dx);
            }
        }

        OpKind::EluPlusOne => {
            if wants(0) {
                let x = input(0).data();
                let y = node.output.data();
                let dx = g
                    .iter()
                    .zip(x.iter().zip(y.iter()))
                    .map(|(&gi, (&xi, &yi))| if xi >= E::zero() { gi } else { gi * yi })
                    .collect();
                add_into(&mut grads[node.inputs[0] as usize], dx);
            }
        }

        OpKind::Exp => {
            if wants(0) {
                let y = node.output.data();
                let dx = g.iter().zip(y.iter()).map(|(&gi, &yi)| gi * yi).collect();
                add_into(&mut grads[node.inputs[0] as usize], dx);
            }
        }

        OpKind::Log => {
            if wants(0) {
                let x = input(0).data();
                let dx = g.iter().zip(x.iter()).map(|(&gi, &xi)| gi / xi).collect();
                add_into(&mut grads[node.inputs[0] as usize], dx);
            }
        }

        OpKind::Abs => {
            if wants(0) {
                let x = input(0).data();
                let dx = g
                    .iter()
                    .zip(x.iter())
                    .map(|(&gi, &xi)| {
                        if xi > E::zero() {
                            gi
                        } else if xi < E::zero() {
                            -gi
                        } else {
                            E::zero()
                        }
                    })
                    .collect();
                add_into(&mut grads[node.inputs[0] as usize], dx);
            }
        }

        OpKind::Matmul { trans_a, trans_b } => {
            let (a, b) = (input(0), input(1));
            let (da, db) = k::matmul_backward(
                g,
                &a.data(),
                a.shape(),
                *trans_a,
                &b.data(),
                b.shape(),
                *trans_b,
                wants(0),
                wants(1),
            );
            if let Some(da) = da {
                add_into(&mut grads[node.inputs[0] as usize], da);
            }
            if let Some(db) = db {
                add_into(&mut grads[node.inputs[1] as usize], db);
            }
        }

        OpKind::Conv2d { stride, pad } => {
            let (x, w) = (input(0), input(1));
            let dims = k::conv2d_dims(x.shape(), w.shape(), *stride, *pad)
                .expect("validated in forward");
            let got = k::conv2d_backward(
                g,
                &x.data(),
                &w.data(),
                &dims,
                wants(0),
                wants(1),
                wants(2),
            );
            if let Some(dx) = got.dx {
                add_into(&mut grads[node.inputs[0] as usize], dx);
            }
            if let Some(dw) = got.dw {
                add_into(&mut grads[node.inputs[1] as usize], dw);
            }
            if let Some(db) = got.db {
                add_into(&mut grads[node.inputs[2] as usize], db);
            }
        }

        OpKind::LayerNorm { saved } => {
            let gamma = input(1);
            let channels = gamma.numel();
            let got = k::layer_norm_backward(g, channels, &gamma.data(), saved);
            if wants(0) {
                add_into(&mut grads[node.inputs[0] as usize], got.dx);
            }
            if wants(1) {
                add_into(&mut grads[node.inputs[1] as usize], got.dgamma);
            }
            if wants(2) {
                add_into(&mut grads[node.inputs[2] as usize], got.dbeta);
            }
        }

        OpKind::SoftmaxLastDim => {
            if wants(0) {
                let y = node.output.data();
                let cols = out_shape[out_shape.len() - 1];
                let dx = k::softmax_backward(g, &y, cols);
                add_into(&mut grads[node.inputs[0] as usize], dx);
            }
        }

        OpKind::Dropout { scaled_mask } => {
            if wants(0) {
                let dx = g
                    .iter()
                    .zip(scaled_mask.iter())
                    .map(|(&gi, &mi)| gi * mi)
                    .collect();
                add_into(&mut grads[node.inputs[0] as usize], dx);
            }
        }

        OpKind::GlobalAvgPool => {
            if wants(0) {
                let x_shape = input(0).shape();
                let (h, w) = (x_shape[2], x_shape[3]);
                let inv = E::from_f64(1.0 / (h * w) as f64);
                let mut dx = vec![E::zero(); input(0).numel()];
                for (bc, &gv) in g.iter().enumerate() {
                    let spread = gv * inv;
                    for v in &mut dx[bc * h * w..(bc + 1) * h * w] {
                        *v = spread;
                    }
                }
                add_into(&mut grads[node.inputs[0] as usize], dx);
            }
        }

        OpKind::CrossEntropy { labels, probs } => {
            if wants(0) {
                let classes = input(0).shape()[1];
                let dl = k::cross_entropy_backward(g[0], probs, classes, labels);
                add_into(&mut grads[node.inputs[0] as usize], dl);
            }
        }

        OpKind::Reshape => {
            if wants(0) {
                add_into(&mut grads[node.inputs[0] as usize], g.to_vec());
            }
        }

        OpKind::Permute { axes } => {
            if wants(0) {
                let inv = k::invert_axes(axes);
                let (dx, _) = k::permute_forward(g, out_shape, &inv);
                add_into(&mut grads[node.inputs[0] as usize], dx);
            }
        }

        OpKind::SumAxis { axis } => {
            if wants(0) {
                let dx = k::sum_axis_backward(g, input(0).shape(), *axis);
                add_into(&mut grads[node.inputs[0] as usize], dx);
            }
        }

        OpKind::MaxAxis { argmax } => {
            if wants(0) {
                let mut dx = vec![E::zero(); input(0).numel()];
                for (slot, &src) in argmax.iter().enumerate() {
                    dx[src] += g[slot];
                }
                add_into(&mut grads[node.inputs[0] as usize], dx);
            }
        }

        OpKind::SumAll => {
            if wants(0) {
                let dx = vec![g[0]; input(0).numel()];
                add_into(&mut grads[node.inputs[0] as usize], dx);
            }
        }

        OpKind::SegmentMeanLandmarks { m } => {
            if wants(0) {
                let dx = k::segment_mean_backward(g, input(0).shape(), *m);
                add_into(&mut grads[node.inputs[0] as usize], dx);
            }
        }
    }
    Ok(())
}
