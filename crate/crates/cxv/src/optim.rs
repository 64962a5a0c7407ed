//! Optimizers and the dual-optimizer training controller: AdamW runs until
//! the top-1 accuracy plateaus for `patience` epochs, then a fresh
//! SGD-with-momentum phase finishes the run under the same plateau rule.

use crate::error::{CxvError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply decay to norm scales and biases too (default true; flag kept
    /// so runs can exclude them).
    pub decay_norms_and_biases: bool,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            alpha: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            decay_norms_and_biases: true,
        }
    }
}

/// Per-parameter first/second moment buffers plus the shared step counter.
pub struct AdamWState<E: Scalar> {
    pub cfg: AdamWConfig,
    pub t: u64,
    pub m: Vec<Vec<E>>,
    pub v: Vec<Vec<E>>,
}

impl<E: Scalar> AdamWState<E> {
    pub fn new(params: &[(String, Tensor<E>)], cfg: AdamWConfig) -> Self {
        AdamWState {
            cfg,
            t: 0,
            m: params.iter().map(|(_, p)| vec![E::zero(); p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![E::zero(); p.numel()]).collect(),
        }
    }

    /// One decoupled-weight-decay Adam step over all parameters.
    /// Aborts (without mutating anything) on a non-finite gradient.
    pub fn step(&mut self, params: &[(String, Tensor<E>)]) -> Result<()> {
        check_finite_grads(params)?;
        self.t += 1;
        let b1 = E::from_f64(self.cfg.beta1);
        let b2 = E::from_f64(self.cfg.beta2);
        let one = E::one();
        let alpha = E::from_f64(self.cfg.alpha);
        let eps = E::from_f64(self.cfg.eps);
        let bc1 = E::from_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bc2 = E::from_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        for (i, (name, p)) in params.iter().enumerate() {
            let decay = if self.cfg.weight_decay != 0.0
                && (self.cfg.decay_norms_and_biases || is_matrix_weight(name, p))
            {
                E::from_f64(self.cfg.weight_decay)
            } else {
                E::zero()
            };
            let grad = p.grad();
            let g_zero;
            let g: &[E] = match &grad {
                Some(g) => g,
                None => {
                    g_zero = vec![E::zero(); p.numel()];
                    &g_zero
                }
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut data = p.data_mut();
            for j in 0..data.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] = data[j] - alpha * (m_hat / (v_hat.sqrt() + eps) + decay * data[j]);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.001,
            momentum: 0.9,
        }
    }
}

/// Velocity buffers for SGD with momentum; created zeroed at the optimizer
/// switch, so the first post-switch step is plain gradient descent.
pub struct SgdState<E: Scalar> {
    pub cfg: SgdConfig,
    pub vel: Vec<Vec<E>>,
}

impl<E: Scalar> SgdState<E> {
    pub fn new(params: &[(String, Tensor<E>)], cfg: SgdConfig) -> Self {
        SgdState {
            cfg,
            vel: params.iter().map(|(_, p)| vec![E::zero(); p.numel()]).collect(),
        }
    }

    /// `vel <- mu*vel + g; theta <- theta - lr*vel`
    pub fn step(&mut self, params: &[(String, Tensor<E>)]) -> Result<()> {
        check_finite_grads(params)?;
        let mu = E::from_f64(self.cfg.momentum);
        let lr = E::from_f64(self.cfg.lr);
        for (i, (_, p)) in params.iter().enumerate() {
            let grad = p.grad();
            let g_zero;
            let g: &[E] = match &grad {
                Some(g) => g,
                None => {
                    g_zero = vec![E::zero(); p.numel()];
                    &g_zero
                }
            };
            let vel = &mut self.vel[i];
            let mut data = p.data_mut();
            for j in 0..data.len() {
                vel[j] = mu * vel[j] + g[j];
                data[j] = data[j] - lr * vel[j];
            }
        }
        Ok(())
    }
}

fn check_finite_grads<E: Scalar>(params: &[(String, Tensor<E>)]) -> Result<()> {
    for (name, p) in params {
        if let Some(g) = p.grad_ref().as_ref() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(CxvError::NonFiniteGrad(name.clone()));
            }
        }
    }
    Ok(())
}

/// Rank-2+ weights (not biases, not norm scales) by registry convention.
fn is_matrix_weight<E: Scalar>(name: &str, p: &Tensor<E>) -> bool {
    p.rank() >= 2 && !name.contains("norm")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerPhase {
    Adam,
    Sgd,
}

impl OptimizerPhase {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerPhase::Adam => "adamw",
            OptimizerPhase::Sgd => "sgd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    SwitchToSgd,
    Stop,
}

/// Plateau detector driving the AdamW -> SGD switch and the final stop.
///
/// An epoch "improves" when its top-1 exceeds the best seen so far by more
/// than `min_delta`; `patience` consecutive non-improving epochs fire the
/// phase transition. Pure state machine: replaying an (epoch, accuracy)
/// stream reproduces the decisions bit for bit.
#[derive(Debug, Clone)]
pub struct DualOptController {
    pub phase: OptimizerPhase,
    pub best_acc: Option<f64>,
    pub epochs_since_improvement: u32,
    pub patience: u32,
    pub min_delta: f64,
    /// Manual override: switch at exactly this epoch while still in the
    /// AdamW phase, regardless of plateau state.
    pub switch_epoch: Option<u64>,
    stopped: bool,
}

impl DualOptController {
    pub fn new(patience: u32, min_delta: f64, switch_epoch: Option<u64>) -> Self {
        DualOptController {
            phase: OptimizerPhase::Adam,
            best_acc: None,
            epochs_since_improvement: 0,
            patience,
            min_delta,
            switch_epoch,
            stopped: false,
        }
    }

    pub fn stopped(&self) -> bool {
        self.stopped
    }

    fn transition(&mut self) -> Decision {
        match self.phase {
            OptimizerPhase::Adam => {
                self.phase = OptimizerPhase::Sgd;
                self.best_acc = None;
                self.epochs_since_improvement = 0;
                Decision::SwitchToSgd
            }
            OptimizerPhase::Sgd => {
                self.stopped = true;
                Decision::Stop
            }
        }
    }

    /// Record one epoch's validation top-1 (a fraction in [0,1]) and decide.
    pub fn update(&mut self, epoch: u64, val_top1: f64) -> Result<Decision> {
        if !(0.0..=1.0).contains(&val_top1) || !val_top1.is_finite() {
            return Err(CxvError::Data(format!(
                "top-1 accuracy must lie in [0,1], got {val_top1} at epoch {epoch}"
            )));
        }
        if self.stopped {
            return Err(CxvError::Usage(
                "controller already stopped; create a fresh one per phase".into(),
            ));
        }
        if self.phase == OptimizerPhase::Adam && self.switch_epoch == Some(epoch) {
            return Ok(self.transition());
        }
        let improved = match self.best_acc {
            None => true,
            Some(best) => val_top1 > best + self.min_delta,
        };
        if improved {
            self.best_acc = Some(val_top1);
            self.epochs_since_improvement = 0;
            return Ok(Decision::Continue);
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement >= self.patience {
            return Ok(self.transition());
        }
        Ok(Decision::Continue)
    }
}

impl Default for DualOptController {
    fn default() -> Self {
        // "unchanged for 20 epochs"; 0.1pp resolves "unchanged" numerically
        DualOptController::new(20, 0.001, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Vec<(String, Tensor<f64>)> {
        vec![("theta".into(), Tensor::param(vec![v], &[1]).unwrap())]
    }

    #[test]
    fn adamw_first_step_is_bias_corrected() {
        // theta=0, g=1, lambda*theta=0: step is ~ -alpha
        let params = scalar_param(0.0);
        params[0].1.accumulate_grad(&[1.0]);
        let mut st = AdamWState::new(&params, AdamWConfig::default());
        st.step(&params).unwrap();
        let theta = params[0].1.to_vec()[0];
        assert!((theta + 0.001).abs() < 1e-9, "theta {theta}");
    }

    #[test]
    fn adamw_pure_decay_shrinks_weights() {
        let cfg = AdamWConfig::default();
        let params = scalar_param(2.0);
        params[0].1.accumulate_grad(&[0.0]);
        let mut st = AdamWState::new(&params, cfg);
        st.step(&params).unwrap();
        // g = 0 everywhere: theta shrinks by exactly alpha*lambda*theta
        let want = 2.0 - cfg.alpha * cfg.weight_decay * 2.0;
        assert!((params[0].1.to_vec()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn adamw_descends_a_parabola() {
        let params = scalar_param(1.0);
        let mut st = AdamWState::new(
            &params,
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
        );
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let theta = params[0].1.to_vec()[0];
            params[0].1.zero_grad();
            params[0].1.accumulate_grad(&[2.0 * theta]);
            st.step(&params).unwrap();
            let f = params[0].1.to_vec()[0].powi(2);
            assert!(f < prev, "f(theta) must strictly decrease: {f} vs {prev}");
            prev = f;
        }
    }

    #[test]
    fn sgd_first_step_and_geometric_accumulation() {
        let params = scalar_param(0.0);
        params[0].1.accumulate_grad(&[1.0]);
        let mut st = SgdState::new(&params, SgdConfig::default());
        st.step(&params).unwrap();
        // zero initial velocity: first step is exactly lr*g
        assert!((params[0].1.to_vec()[0] + 0.001).abs() < 1e-12);

        // constant gradient: per-step displacement approaches lr*g/(1-mu)
        let mut disp = 0.0;
        let mut theta_prev = params[0].1.to_vec()[0];
        for _ in 0..200 {
            params[0].1.zero_grad();
            params[0].1.accumulate_grad(&[1.0]);
            st.step(&params).unwrap();
            let theta = params[0].1.to_vec()[0];
            disp = theta_prev - theta;
            theta_prev = theta;
        }
        let limit = 0.001 / (1.0 - 0.9);
        assert!((disp - limit).abs() < 1e-6, "disp {disp} limit {limit}");
    }

    #[test]
    fn sgd_converges_on_parabola() {
        let params = scalar_param(1.0);
        let mut st = SgdState::new(
            &params,
            SgdConfig {
                lr: 0.01,
                momentum: 0.9,
            },
        );
        for _ in 0..100 {
            let theta = params[0].1.to_vec()[0];
            params[0].1.zero_grad();
            params[0].1.accumulate_grad(&[2.0 * theta]);
            st.step(&params).unwrap();
        }
        assert!(params[0].1.to_vec()[0].abs() < 0.05);
    }

    #[test]
    fn non_finite_gradient_aborts_naming_parameter() {
        let params = scalar_param(1.0);
        params[0].1.accumulate_grad(&[f64::NAN]);
        let mut st = AdamWState::new(&params, AdamWConfig::default());
        let err = st.step(&params).unwrap_err();
        assert!(err.to_string().contains("theta"), "{err}");
        // parameter untouched
        assert_eq!(params[0].1.to_vec(), vec![1.0]);
    }

    #[test]
    fn plateau_fires_after_exactly_patience_epochs() {
        // constant stream: epoch 1 sets best, the 20th non-improving epoch
        // (epoch 21) fires the switch
        let mut c = DualOptController::default();
        for epoch in 1..=20 {
            assert_eq!(c.update(epoch, 0.5).unwrap(), Decision::Continue, "epoch {epoch}");
        }
        assert_eq!(c.update(21, 0.5).unwrap(), Decision::SwitchToSgd);
        assert_eq!(c.phase, OptimizerPhase::Sgd);
        // same rule in the SGD phase yields Stop
        for epoch in 22..=42 {
            let d = c.update(epoch, 0.5).unwrap();
            if epoch == 42 {
                assert_eq!(d, Decision::Stop);
            } else {
                assert_eq!(d, Decision::Continue);
            }
        }
        assert!(c.stopped());
    }

    #[test]
    fn strictly_improving_stream_never_switches() {
        let mut c = DualOptController::default();
        for epoch in 1..=200 {
            let acc = 0.001 * epoch as f64 * 4.0;
            assert_eq!(c.update(epoch, acc.min(1.0)).unwrap(), Decision::Continue);
        }
        assert_eq!(c.phase, OptimizerPhase::Adam);
    }

    #[test]
    fn late_improvement_resets_the_counter() {
        let mut c = DualOptController::default();
        c.update(1, 0.5).unwrap();
        for epoch in 2..=19 {
            c.update(epoch, 0.5).unwrap();
        }
        // improvement at epoch 20 by more than min_delta resets the clock
        assert_eq!(c.update(20, 0.51).unwrap(), Decision::Continue);
        assert_eq!(c.epochs_since_improvement, 0);
        for epoch in 21..=39 {
            assert_eq!(c.update(epoch, 0.51).unwrap(), Decision::Continue);
        }
        assert_eq!(c.update(40, 0.51).unwrap(), Decision::SwitchToSgd);
    }

    #[test]
    fn manual_switch_epoch_override() {
        let mut c = DualOptController::new(20, 0.001, Some(3));
        c.update(1, 0.1).unwrap();
        c.update(2, 0.2).unwrap();
        assert_eq!(c.update(3, 0.3).unwrap(), Decision::SwitchToSgd);
    }

    #[test]
    fn decisions_replay_identically() {
        let stream: Vec<f64> = (1..=60)
            .map(|e| if e < 25 { 0.01 * e as f64 } else { 0.25 })
            .collect();
        let run = || {
            let mut c = DualOptController::default();
            stream
                .iter()
                .enumerate()
                .map(|(i, &acc)| c.update(i as u64 + 1, acc).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
        let decisions = run();
        let switches = decisions.iter().filter(|d| **d == Decision::SwitchToSgd).count();
        let stops = decisions.iter().filter(|d| **d == Decision::Stop).count();
        assert_eq!(switches, 1);
        assert!(stops <= 1);
    }

    #[test]
    fn out_of_range_accuracy_is_a_data_error() {
        let mut c = DualOptController::default();
        assert!(matches!(c.update(1, 1.5), Err(CxvError::Data(_))));
        assert!(matches!(c.update(1, -0.1), Err(CxvError::Data(_))));
    }

    #[test]
    fn fresh_sgd_state_first_step_equals_plain_gradient_descent() {
        // after a switch the velocity is zero, so vel = g on the first step
        let params = scalar_param(0.5);
        params[0].1.accumulate_grad(&[0.3]);
        let mut st = SgdState::new(&params, SgdConfig::default());
        st.step(&params).unwrap();
        assert!((st.vel[0][0] - 0.3).abs() < 1e-15);
        assert!((params[0].1.to_vec()[0] - (0.5 - 0.001 * 0.3)).abs() < 1e-12);
    }
}
