//! Differentiable operations. A [`Ctx`] bundles the optional recording tape,
//! the train/eval switch, and the dropout RNG; model code threads one `Ctx`
//! through a forward pass.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CxvError, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels as k;
use crate::tensor::shape::{broadcast_shapes, broadcast_strides, numel, zip_broadcast};
use crate::tensor::tape::{OpKind, Tape};
use crate::tensor::Tensor;

pub struct Ctx<E: Scalar> {
    tape: Option<Tape<E>>,
    pub train: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl<E: Scalar> Ctx<E> {
    /// Inference context: no tape, dropout is the identity.
    pub fn eval() -> Self {
        Ctx {
            tape: None,
            train: false,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    /// Training context: records a tape, dropout active, RNG seeded.
    pub fn train(seed: u64) -> Self {
        Ctx {
            tape: Some(Tape::new()),
            train: true,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Records a tape with dropout disabled; used by gradient checks.
    pub fn with_tape() -> Self {
        Ctx {
            tape: Some(Tape::new()),
            train: false,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    pub fn tape(&self) -> Option<&Tape<E>> {
        self.tape.as_ref()
    }

    pub fn backward(&self, loss: &Tensor<E>) -> Result<()> {
        match &self.tape {
            Some(tape) => tape.backward(loss),
            None => Err(CxvError::Usage(
                "backward called on a context without a tape".into(),
            )),
        }
    }

    fn record(&self, kind: OpKind<E>, inputs: &[&Tensor<E>], out: Tensor<E>) -> Tensor<E> {
        if let Some(tape) = &self.tape {
            let ids = inputs.iter().map(|t| tape.ensure_node(t)).collect();
            tape.push(kind, ids, out.clone());
        }
        out
    }

    fn out_tensor(&self, data: Vec<E>, shape: &[usize], inputs: &[&Tensor<E>]) -> Tensor<E> {
        let requires = self.tape.is_some() && inputs.iter().any(|t| t.requires_grad());
        if requires {
            Tensor::param(data, shape).expect("kernel produced consistent shape")
        } else {
            Tensor::from_vec(data, shape).expect("kernel produced consistent shape")
        }
    }

    // ---- broadcasted elementwise binaries --------------------------------

    fn binary(
        &self,
        a: &Tensor<E>,
        b: &Tensor<E>,
        kind: OpKind<E>,
        f: impl Fn(E, E) -> E,
    ) -> Result<Tensor<E>> {
        let out_shape = broadcast_shapes(a.shape(), b.shape())?;
        let a_str = broadcast_strides(a.shape(), &out_shape);
        let b_str = broadcast_strides(b.shape(), &out_shape);
        let av = a.data();
        let bv = b.data();
        let mut out = vec![E::zero(); numel(&out_shape)];
        zip_broadcast(&out_shape, &a_str, &b_str, |flat, ao, bo| {
            out[flat] = f(av[ao], bv[bo]);
        });
        drop(av);
        drop(bv);
        let t = self.out_tensor(out, &out_shape, &[a, b]);
        Ok(self.record(kind, &[a, b], t))
    }

    pub fn add(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(a, b, OpKind::Add, |x, y| x + y)
    }

    pub fn sub(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(a, b, OpKind::Sub, |x, y| x - y)
    }

    pub fn mul(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(a, b, OpKind::Mul, |x, y| x * y)
    }

    pub fn div(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(a, b, OpKind::Div, |x, y| x / y)
    }

    // ---- unaries -----------------------------------------------------------

    fn unary(&self, x: &Tensor<E>, kind: OpKind<E>, f: impl Fn(E) -> E) -> Tensor<E> {
        let out: Vec<E> = x.data().iter().map(|&v| f(v)).collect();
        let t = self.out_tensor(out, x.shape(), &[x]);
        self.record(kind, &[x], t)
    }

    pub fn scale(&self, x: &Tensor<E>, c: f64) -> Tensor<E> {
        let c = E::from_f64(c);
        self.unary(x, OpKind::Scale(c), |v| v * c)
    }

    pub fn relu(&self, x: &Tensor<E>) -> Tensor<E> {
        self.unary(x, OpKind::Relu, |v| v.max(E::zero()))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: &Tensor<E>) -> Tensor<E> {
        let c = E::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let a3 = E::from_f64(0.044715);
        let half = E::from_f64(0.5);
        self.unary(x, OpKind::Gelu, |v| {
            half * v * (E::one() + (c * (v + a3 * v * v * v)).tanh())
        })
    }

    /// elu(x) + 1: the positive kernel feature map, `x+1` for `x >= 0`,
    /// `exp(x)` below.
    pub fn elu_plus_one(&self, x: &Tensor<E>) -> Tensor<E> {
        self.unary(x, OpKind::EluPlusOne, |v| {
            if v >= E::zero() {
                v + E::one()
            } else {
                v.exp()
            }
        })
    }

    pub fn exp(&self, x: &Tensor<E>) -> Tensor<E> {
        self.unary(x, OpKind::Exp, |v| v.exp())
    }

    pub fn log(&self, x: &Tensor<E>) -> Tensor<E> {
        self.unary(x, OpKind::Log, |v| v.ln())
    }

    pub fn abs(&self, x: &Tensor<E>) -> Tensor<E> {
        self.unary(x, OpKind::Abs, |v| v.abs())
    }

    // ---- matmul family -------------------------------------------------------

    pub fn matmul(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a @ b^T` without materializing the transpose.
    pub fn matmul_nt(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.matmul_ex(a, b, false, true)
    }

    /// `a^T @ b` without materializing the transpose.
    pub fn matmul_tn(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.matmul_ex(a, b, true, false)
    }

    pub fn matmul_ex(
        &self,
        a: &Tensor<E>,
        b: &Tensor<E>,
        trans_a: bool,
        trans_b: bool,
    ) -> Result<Tensor<E>> {
        let (out, shape) =
            k::matmul_forward(&a.data(), a.shape(), trans_a, &b.data(), b.shape(), trans_b)?;
        let t = self.out_tensor(out, &shape, &[a, b]);
        Ok(self.record(OpKind::Matmul { trans_a, trans_b }, &[a, b], t))
    }

    /// `x @ w^T + bias` with `w: [out, in]`, applied position-wise.
    pub fn linear(&self, x: &Tensor<E>, w: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
        let y = self.matmul_nt(x, w)?;
        self.add(&y, bias)
    }

    // ---- convolution -----------------------------------------------------------

    pub fn conv2d(
        &self,
        x: &Tensor<E>,
        w: &Tensor<E>,
        bias: &Tensor<E>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<E>> {
        let dims = k::conv2d_dims(x.shape(), w.shape(), stride, pad)?;
        if bias.numel() != dims.c_out {
            return Err(CxvError::Dim(format!(
                "conv2d bias shape {:?} does not match {} output channels",
                bias.shape(),
                dims.c_out
            )));
        }
        let (out, shape) = k::conv2d_forward(&x.data(), &w.data(), &bias.data(), &dims);
        let t = self.out_tensor(out, &shape, &[x, w, bias]);
        Ok(self.record(OpKind::Conv2d { stride, pad }, &[x, w, bias], t))
    }

    /// 1x1 convolution with a `[out, in]` weight matrix (reshaped on the tape
    /// so gradients land back on the 2D parameter).
    pub fn conv1x1(&self, x: &Tensor<E>, w: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
        let (o, i) = (w.shape()[0], w.shape()[1]);
        let w4 = self.reshape(w, &[o, i, 1, 1])?;
        self.conv2d(x, &w4, bias, 1, 0)
    }

    // ---- normalization / softmax -------------------------------------------------

    /// Layer norm over the last (channel) dimension with biased variance.
    pub fn layer_norm(
        &self,
        x: &Tensor<E>,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        eps: f64,
    ) -> Result<Tensor<E>> {
        let rank = x.rank();
        if rank == 0 {
            return Err(CxvError::Dim("layer_norm needs rank >= 1".into()));
        }
        let channels = x.shape()[rank - 1];
        if channels == 0 {
            return Err(CxvError::Dim("layer_norm over an empty channel dim".into()));
        }
        if gamma.numel() != channels || beta.numel() != channels {
            return Err(CxvError::Dim(format!(
                "layer_norm affine shapes {:?}/{:?} do not match {} channels",
                gamma.shape(),
                beta.shape(),
                channels
            )));
        }
        let (out, saved) = k::layer_norm_forward(
            &x.data(),
            channels,
            &gamma.data(),
            &beta.data(),
            E::from_f64(eps),
        );
        let t = self.out_tensor(out, x.shape(), &[x, gamma, beta]);
        Ok(self.record(OpKind::LayerNorm { saved }, &[x, gamma, beta], t))
    }

    pub fn softmax_lastdim(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let rank = x.rank();
        if rank == 0 || x.shape()[rank - 1] == 0 {
            return Err(CxvError::Dim(format!(
                "softmax_lastdim needs a nonempty last dimension, got {:?}",
                x.shape()
            )));
        }
        let cols = x.shape()[rank - 1];
        let out = k::softmax_rows(&x.data(), cols);
        let t = self.out_tensor(out, x.shape(), &[x]);
        Ok(self.record(OpKind::SoftmaxLastDim, &[x], t))
    }

    // ---- dropout ---------------------------------------------------------------------

    /// Inverted dropout: in train mode zeroes elements with probability `p`
    /// and scales survivors by `1/(1-p)`; identity in eval mode.
    pub fn dropout(&self, x: &Tensor<E>, p: f64) -> Result<Tensor<E>> {
        if !(0.0..1.0).contains(&p) {
            return Err(CxvError::Param(format!(
                "dropout probability must satisfy 0 <= p < 1, got {p}"
            )));
        }
        if !self.train || p == 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - p;
        let scale = E::from_f64(1.0 / keep);
        let mut rng = self.rng.borrow_mut();
        let mask: Vec<E> = (0..x.numel())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    scale
                } else {
                    E::zero()
                }
            })
            .collect();
        drop(rng);
        let out: Vec<E> = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = self.out_tensor(out, x.shape(), &[x]);
        Ok(self.record(OpKind::Dropout { scaled_mask: mask }, &[x], t))
    }

    // ---- pooling / loss -------------------------------------------------------------

    /// `[B,C,H,W] -> [B,C]`, mean over spatial positions.
    pub fn global_avg_pool(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.rank() != 4 {
            return Err(CxvError::Dim(format!(
                "global_avg_pool expects [B,C,H,W], got {:?}",
                x.shape()
            )));
        }
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let inv = E::from_f64(1.0 / (h * w) as f64);
        let xd = x.data();
        let out: Vec<E> = (0..b * c)
            .map(|bc| xd[bc * h * w..(bc + 1) * h * w].iter().copied().sum::<E>() * inv)
            .collect();
        drop(xd);
        let t = self.out_tensor(out, &[b, c], &[x]);
        Ok(self.record(OpKind::GlobalAvgPool, &[x], t))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`; scalar output.
    pub fn cross_entropy(&self, logits: &Tensor<E>, labels: &[usize]) -> Result<Tensor<E>> {
        if logits.rank() != 2 {
            return Err(CxvError::Dim(format!(
                "cross_entropy expects [B,K] logits, got {:?}",
                logits.shape()
            )));
        }
        let (b, classes) = (logits.shape()[0], logits.shape()[1]);
        if labels.len() != b {
            return Err(CxvError::Dim(format!(
                "cross_entropy got {} labels for batch {b}",
                labels.len()
            )));
        }
        for (i, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(CxvError::Data(format!(
                    "label {label} out of range [0,{classes}) at record {i}"
                )));
            }
        }
        let (loss, probs) = k::cross_entropy_forward(&logits.data(), classes, labels);
        let t = self.out_tensor(vec![loss], &[], &[logits]);
        Ok(self.record(
            OpKind::CrossEntropy {
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
            t,
        ))
    }

    // ---- movement -----------------------------------------------------------------------

    pub fn reshape(&self, x: &Tensor<E>, shape: &[usize]) -> Result<Tensor<E>> {
        if numel(shape) != x.numel() {
            return Err(CxvError::Dim(format!(
                "reshape {:?} -> {:?} changes element count",
                x.shape(),
                shape
            )));
        }
        let t = self.out_tensor(x.to_vec(), shape, &[x]);
        Ok(self.record(OpKind::Reshape, &[x], t))
    }

    pub fn permute(&self, x: &Tensor<E>, axes: &[usize]) -> Result<Tensor<E>> {
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(CxvError::Param(format!(
                "permute axes {axes:?} are not a permutation of 0..{rank}"
            )));
        }
        let (out, shape) = k::permute_forward(&x.data(), x.shape(), axes);
        let t = self.out_tensor(out, &shape, &[x]);
        Ok(self.record(OpKind::Permute { axes: axes.to_vec() }, &[x], t))
    }

    /// Swap the last two dims (copying; gradients transpose back).
    pub fn transpose_last2(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let rank = x.rank();
        if rank < 2 {
            return Err(CxvError::Dim("transpose_last2 needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    // ---- reductions ----------------------------------------------------------------------

    pub fn sum_axis(&self, x: &Tensor<E>, axis: usize, keepdim: bool) -> Result<Tensor<E>> {
        if axis >= x.rank() {
            return Err(CxvError::Param(format!(
                "sum_axis {axis} out of range for shape {:?}",
                x.shape()
            )));
        }
        let out = k::sum_axis_forward(&x.data(), x.shape(), axis);
        let shape = k::reduced_shape(x.shape(), axis, keepdim);
        let t = self.out_tensor(out, &shape, &[x]);
        Ok(self.record(OpKind::SumAxis { axis }, &[x], t))
    }

    pub fn max_axis(&self, x: &Tensor<E>, axis: usize, keepdim: bool) -> Result<Tensor<E>> {
        if axis >= x.rank() || x.shape()[axis] == 0 {
            return Err(CxvError::Param(format!(
                "max_axis {axis} invalid for shape {:?}",
                x.shape()
            )));
        }
        let (out, argmax) = k::max_axis_forward(&x.data(), x.shape(), axis);
        let shape = k::reduced_shape(x.shape(), axis, keepdim);
        let t = self.out_tensor(out, &shape, &[x]);
        Ok(self.record(OpKind::MaxAxis { argmax }, &[x], t))
    }

    pub fn sum_all(&self, x: &Tensor<E>) -> Tensor<E> {
        let total: E = x.data().iter().copied().sum();
        let t = self.out_tensor(vec![total], &[], &[x]);
        self.record(OpKind::SumAll, &[x], t)
    }

    // ---- landmark pooling -------------------------------------------------------------------

    /// Mean-pool `[.., n, dh]` tokens into `m` contiguous segments
    /// (first `n mod m` segments one longer); when `n <= m` the tokens pass
    /// through and the last token pads the remainder.
    pub fn segment_mean_landmarks(&self, x: &Tensor<E>, m: usize) -> Result<Tensor<E>> {
        if m == 0 {
            return Err(CxvError::Param(
                "segment_mean_landmarks needs m >= 1".into(),
            ));
        }
        if x.rank() < 2 {
            return Err(CxvError::Dim(format!(
                "segment_mean_landmarks expects [.., n, dh], got {:?}",
                x.shape()
            )));
        }
        let (out, shape) = k::segment_mean_forward(&x.data(), x.shape(), m);
        let t = self.out_tensor(out, &shape, &[x]);
        Ok(self.record(OpKind::SegmentMeanLandmarks { m }, &[x], t))
    }

    // ---- 2D <-> sequence layout --------------------------------------------------------------

    /// `[B,C,H,W] -> [B, H*W, C]`, row-major over H then W.
    pub fn unroll_map(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.rank() != 4 {
            return Err(CxvError::Dim(format!(
                "unroll_map expects [B,C,H,W], got {:?}",
                x.shape()
            )));
        }
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let nhwc = self.permute(x, &[0, 2, 3, 1])?;
        self.reshape(&nhwc, &[b, h * w, c])
    }

    /// Inverse of [`unroll_map`](Self::unroll_map).
    pub fn reroll_map(&self, x: &Tensor<E>, h: usize, w: usize) -> Result<Tensor<E>> {
        if x.rank() != 3 || x.shape()[1] != h * w {
            return Err(CxvError::Dim(format!(
                "reroll_map expects [B,{}...,C] for {h}x{w}, got {:?}",
                h * w,
                x.shape()
            )));
        }
        let (b, c) = (x.shape()[0], x.shape()[2]);
        let nhwc = self.reshape(x, &[b, h, w, c])?;
        self.permute(&nhwc, &[0, 3, 1, 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let ctx = Ctx::<f64>::eval();
        let eye = t64(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let m = t64(&[3.0, -1.0, 2.0, 5.0], &[2, 2]);
        let y = ctx.matmul(&eye, &m).unwrap();
        assert_eq!(y.to_vec(), m.to_vec());

        // [[1,2]] x [[3],[4]] = [[11]]
        let a = t64(&[1.0, 2.0], &[1, 2]);
        let b = t64(&[3.0, 4.0], &[2, 1]);
        let c = ctx.matmul(&a, &b).unwrap();
        assert_eq!(c.to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let ctx = Ctx::<f64>::eval();
        let a = t64(&[0.0; 6], &[2, 3]);
        let b = t64(&[0.0; 8], &[4, 2]);
        let err = ctx.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn conv2d_identity_kernel() {
        let ctx = Ctx::<f64>::eval();
        let x = t64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0], &[1, 1, 3, 3]);
        let w = t64(&[1.0], &[1, 1, 1, 1]);
        let b = Tensor::zeros(&[1]);
        let y = ctx.conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn conv2d_all_ones_center_overlap() {
        let ctx = Ctx::<f64>::eval();
        let x = Tensor::full(&[1, 1, 3, 3], 1.0f64);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0f64);
        let b = Tensor::zeros(&[1]);
        let y = ctx.conv2d(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        // center element sees the full 3x3 overlap
        assert_eq!(y.to_vec()[4], 9.0);
        // corners see a 2x2 overlap
        assert_eq!(y.to_vec()[0], 4.0);
    }

    #[test]
    fn conv2d_kernel_larger_than_padded_input_errors() {
        let ctx = Ctx::<f64>::eval();
        let x = Tensor::full(&[1, 1, 2, 2], 1.0f64);
        let w = Tensor::full(&[1, 1, 5, 5], 1.0f64);
        let b = Tensor::zeros(&[1]);
        assert!(matches!(
            ctx.conv2d(&x, &w, &b, 1, 1),
            Err(CxvError::Dim(_))
        ));
    }

    #[test]
    fn layer_norm_trivial_cases() {
        let ctx = Ctx::<f64>::eval();
        let gamma = Tensor::full(&[4], 1.0f64);
        let beta = Tensor::zeros(&[4]);
        // constant input -> all-zero output
        let x = Tensor::full(&[4], 3.0f64);
        let y = ctx.layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        assert!(y.to_vec().iter().all(|v| v.abs() < 1e-9));

        // already zero-mean unit-variance, eps = 0
        let g2 = Tensor::full(&[2], 1.0f64);
        let b2 = Tensor::zeros(&[2]);
        let x2 = t64(&[1.0, -1.0], &[2]);
        let y2 = ctx.layer_norm(&x2, &g2, &b2, 0.0).unwrap();
        assert!((y2.to_vec()[0] - 1.0).abs() < 1e-12);
        assert!((y2.to_vec()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let ctx = Ctx::<f64>::eval();
        let y = ctx.softmax_lastdim(&t64(&[0.0, 0.0], &[2])).unwrap();
        assert_eq!(y.to_vec(), vec![0.5, 0.5]);

        let y = ctx.softmax_lastdim(&t64(&[1000.0, 0.0], &[2])).unwrap();
        let v = y.to_vec();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!(v[0] > 0.999 && v[1] < 1e-6);
    }

    #[test]
    fn elementwise_trivial_cases() {
        let ctx = Ctx::<f64>::eval();
        assert_eq!(
            ctx.elu_plus_one(&Tensor::scalar(0.0)).item().unwrap(),
            1.0
        );
        assert_eq!(
            ctx.relu(&t64(&[-2.0, 3.0], &[2])).to_vec(),
            vec![0.0, 3.0]
        );
        // eval-mode dropout is the identity
        let x = t64(&[1.0, 2.0, 3.0], &[3]);
        let y = ctx.dropout(&x, 0.5).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        // p >= 1 rejected
        assert!(matches!(ctx.dropout(&x, 1.0), Err(CxvError::Param(_))));
    }

    #[test]
    fn global_avg_pool_means() {
        let ctx = Ctx::<f64>::eval();
        let x = t64(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        assert_eq!(ctx.global_avg_pool(&x).unwrap().to_vec(), vec![2.5]);
        let c = Tensor::full(&[2, 3, 4, 4], 7.0f64);
        assert!(ctx
            .global_avg_pool(&c)
            .unwrap()
            .to_vec()
            .iter()
            .all(|&v| (v - 7.0f64).abs() < 1e-12));
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let ctx = Ctx::<f64>::eval();
        let logits = t64(&[0.0, 0.0], &[1, 2]);
        let loss = ctx.cross_entropy(&logits, &[0]).unwrap().item().unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);

        let confident = t64(&[50.0, 0.0], &[1, 2]);
        let loss = ctx.cross_entropy(&confident, &[0]).unwrap().item().unwrap();
        assert!(loss < 1e-9);

        assert!(matches!(
            ctx.cross_entropy(&logits, &[5]),
            Err(CxvError::Data(_))
        ));
    }

    #[test]
    fn unroll_reroll_round_trip() {
        let ctx = Ctx::<f64>::eval();
        let x = Tensor::from_vec((0..24).map(|v| v as f64).collect(), &[1, 2, 3, 4]).unwrap();
        let seq = ctx.unroll_map(&x).unwrap();
        assert_eq!(seq.shape(), &[1, 12, 2]);
        // token t = h*W + w holds channel-major values of that position
        assert_eq!(seq.to_vec()[0], 0.0); // (h0,w0,c0)
        assert_eq!(seq.to_vec()[1], 12.0); // (h0,w0,c1)
        let back = ctx.reroll_map(&seq, 3, 4).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn segment_means() {
        let ctx = Ctx::<f64>::eval();
        // n = 4, m = 2, dh = 1: [(t1+t2)/2, (t3+t4)/2]
        let x = t64(&[1.0, 2.0, 3.0, 4.0], &[4, 1]);
        let y = ctx.segment_mean_landmarks(&x, 2).unwrap();
        assert_eq!(y.to_vec(), vec![1.5, 3.5]);
        // n == m passes tokens through
        let y = ctx.segment_mean_landmarks(&x, 4).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        // n < m repeats the last token
        let y = ctx.segment_mean_landmarks(&x, 6).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 4.0, 4.0]);
        assert!(matches!(
            ctx.segment_mean_landmarks(&x, 0),
            Err(CxvError::Param(_))
        ));
    }

    #[test]
    fn backward_linear_and_quadratic() {
        // loss = sum(x): grad = ones
        let ctx = Ctx::<f64>::with_tape();
        let x = Tensor::param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let loss = ctx.sum_all(&x);
        ctx.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);

        // loss = sum(x*x): grad = 2x
        let ctx = Ctx::<f64>::with_tape();
        let x = Tensor::param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let sq = ctx.mul(&x, &x).unwrap();
        let loss = ctx.sum_all(&sq);
        ctx.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_non_scalar_loss_is_usage_error() {
        let ctx = Ctx::<f64>::with_tape();
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = ctx.scale(&x, 2.0);
        assert!(matches!(ctx.backward(&y), Err(CxvError::Usage(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let ctx = Ctx::<f64>::with_tape();
        let x = Tensor::param(vec![2.0], &[1]).unwrap();
        let loss = ctx.sum_all(&x);
        ctx.backward(&loss).unwrap();
        ctx.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn dropout_train_mode_deterministic_under_seed() {
        let run = |seed: u64| {
            let ctx = Ctx::<f64>::train(seed);
            let x = Tensor::full(&[64], 1.0f64);
            ctx.dropout(&x, 0.5).unwrap().to_vec()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn dropout_expected_value_matches_input() {
        // inverted scaling keeps E[dropout(x)] == x; empirical over 10^4 draws
        let ctx = Ctx::<f64>::train(123);
        let n = 10_000;
        let x = Tensor::full(&[n], 1.0f64);
        let y = ctx.dropout(&x, 0.5).unwrap();
        let mean = y.to_vec().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }
}
