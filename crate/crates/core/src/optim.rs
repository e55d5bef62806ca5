//! Inner optimizers (learner side), the Nesterov outer optimizer (syncer side)
//! and the interpolation applied when a global fragment arrives.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterOptState {
    pub momentum: Vec<f64>,
    pub lr: f64,
    pub mu: f64,
    pub nesterov: bool,
}

impl OuterOptState {
    pub fn new(len: usize, lr: f64, mu: f64, nesterov: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&mu) {
            return Err(Error::InvalidArgument(format!("momentum {mu} outside [0, 1)")));
        }
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::InvalidArgument(format!("outer lr {lr} must be positive")));
        }
        Ok(OuterOptState { momentum: vec![0.0; len], lr, mu, nesterov })
    }

    /// `v <- mu*v + delta`; `update = nesterov ? mu*v + delta : v`;
    /// returns `theta_prev - lr*update`.
    pub fn step(&mut self, theta_prev: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
        check_len(self.momentum.len(), theta_prev.len())?;
        check_len(self.momentum.len(), delta.len())?;
        let (mu, lr, nesterov) = (self.mu, self.lr, self.nesterov);
        let mut out = Vec::with_capacity(delta.len());
        for ((v, &p), &d) in self.momentum.iter_mut().zip(theta_prev).zip(delta) {
            *v = if mu == 0.0 { d } else { mu * *v + d };
            let u = if nesterov && mu != 0.0 { mu * *v + d } else { *v };
            out.push(p - lr * u);
        }
        Ok(out)
    }

    /// Same update, evaluated around `anchor = theta_prev - delta` (the weighted
    /// mean of the learner fragments when the merge was a plain average).
    /// Algebraically `theta_prev - lr*update` equals
    /// `anchor + (1-lr)*delta - lr*mu*m` with `m` the momentum term of the
    /// update; terms with zero coefficients are skipped, so `lr = 1, mu = 0`
    /// reproduces the anchor bit for bit.
    pub fn step_anchored(&mut self, delta: &[f64], anchor: &[f64]) -> Result<Vec<f64>> {
        check_len(self.momentum.len(), delta.len())?;
        check_len(self.momentum.len(), anchor.len())?;
        let (mu, lr, nesterov) = (self.mu, self.lr, self.nesterov);
        let mut out = Vec::with_capacity(delta.len());
        for ((v, &a), &d) in self.momentum.iter_mut().zip(anchor).zip(delta) {
            let old = *v;
            *v = if mu == 0.0 { d } else { mu * old + d };
            let mut x = a;
            if lr != 1.0 {
                x += (1.0 - lr) * d;
            }
            if mu != 0.0 {
                let m = if nesterov { *v } else { old };
                x -= lr * mu * m;
            }
            out.push(x);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerKind {
    Sgd,
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerOptConfig {
    pub kind: InnerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for InnerOptConfig {
    fn default() -> Self {
        InnerOptConfig { kind: InnerKind::Adamw, lr: 3e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerOptState {
    pub config: InnerOptConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl InnerOptState {
    pub fn new(config: InnerOptConfig, len: usize) -> Self {
        let n = if config.kind == InnerKind::Adamw { len } else { 0 };
        InnerOptState { config, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        check_len(theta.len(), grad.len())?;
        let c = self.config;
        self.t += 1;
        match c.kind {
            InnerKind::Sgd => {
                for (p, g) in theta.iter_mut().zip(grad) {
                    if c.weight_decay != 0.0 {
                        *p -= c.lr * c.weight_decay * *p;
                    }
                    *p -= c.lr * g;
                }
            }
            InnerKind::Adamw => {
                check_len(self.m.len(), theta.len())?;
                let bc1 = 1.0 - c.beta1.powi(self.t as i32);
                let bc2 = 1.0 - c.beta2.powi(self.t as i32);
                for (((p, g), m), v) in theta.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    if c.weight_decay != 0.0 {
                        *p -= c.lr * c.weight_decay * *p;
                    }
                    *p -= c.lr * mhat / (vhat.sqrt() + c.eps);
                }
            }
        }
        Ok(())
    }
}

/// `alpha*local + (1-alpha)*global`; `alpha = 0` copies the global fragment.
pub fn apply_received_fragment(theta_local: &[f64], theta_global: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_len(theta_local.len(), theta_global.len())?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(if alpha == 0.0 {
        theta_global.to_vec()
    } else if alpha == 1.0 {
        theta_local.to_vec()
    } else {
        theta_local.iter().zip(theta_global).map(|(l, g)| alpha * l + (1.0 - alpha) * g).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outer_plain_step_replaces_weights() {
        let mut s = OuterOptState::new(2, 1.0, 0.0, true).unwrap();
        let prev = [1.0, 2.0];
        let theta = [0.3, 2.7];
        let delta = [prev[0] - theta[0], prev[1] - theta[1]];
        let out = s.step(&prev, &delta).unwrap();
        assert_eq!(out, vec![prev[0] - delta[0], prev[1] - delta[1]]);
        let mut s = OuterOptState::new(2, 1.0, 0.0, true).unwrap();
        assert_eq!(s.step_anchored(&delta, &theta).unwrap(), theta.to_vec());
    }

    #[test]
    fn outer_nesterov_hand_trace() {
        let mut s = OuterOptState::new(2, 0.7, 0.9, true).unwrap();
        let out = s.step(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((out[0] + 1.33).abs() < 1e-15);
        assert_eq!(out[1], 0.0);
        assert_eq!(s.momentum, vec![1.0, 0.0]);
    }

    #[test]
    fn outer_momentum_decays_with_zero_delta() {
        let mut s = OuterOptState::new(1, 0.7, 0.9, true).unwrap();
        let mut theta = s.step(&[0.0], &[1.0]).unwrap();
        let mut moves = Vec::new();
        for _ in 0..200 {
            let next = s.step(&theta, &[0.0]).unwrap();
            moves.push((next[0] - theta[0]).abs());
            theta = next;
        }
        // Each move is lr * mu^(k+1) * v0 with v0 = 1.
        for (k, m) in moves.iter().enumerate() {
            let expected = 0.7 * 0.9f64.powi(k as i32 + 2);
            assert!((m - expected).abs() < 1e-14);
        }
        assert!(moves.last().unwrap() < &1e-8);
    }

    #[test]
    fn anchored_matches_standard_form() {
        for &(lr, mu, nest) in &[(0.7, 0.9, true), (0.7, 0.9, false), (1.0, 0.5, true), (0.3, 0.0, false)] {
            let mut a = OuterOptState::new(3, lr, mu, nest).unwrap();
            let mut b = a.clone();
            let mut prev = vec![0.5, -1.0, 2.0];
            for k in 0..5 {
                let theta: Vec<f64> = prev.iter().map(|p| p - 0.1 * (k as f64 + 1.0)).collect();
                let delta: Vec<f64> = prev.iter().zip(&theta).map(|(p, t)| p - t).collect();
                let x = a.step(&prev, &delta).unwrap();
                let y = b.step_anchored(&delta, &theta).unwrap();
                for (u, v) in x.iter().zip(&y) {
                    assert!((u - v).abs() < 1e-12);
                }
                prev = x;
            }
        }
    }

    #[test]
    fn outer_rejects_bad_momentum() {
        assert!(OuterOptState::new(1, 0.7, 1.0, true).is_err());
        assert!(OuterOptState::new(1, 0.7, -0.1, true).is_err());
    }

    #[test]
    fn sgd_examples() {
        let cfg = InnerOptConfig { kind: InnerKind::Sgd, lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut s = InnerOptState::new(cfg, 2);
        let mut theta = [0.0, 0.0];
        s.step(&mut theta, &[1.0, 1.0]).unwrap();
        assert_eq!(theta, [-0.1, -0.1]);
        let mut theta = [0.4, -2.0];
        s.step(&mut theta, &[0.0, 0.0]).unwrap();
        assert_eq!(theta, [0.4, -2.0]);
    }

    #[test]
    fn adamw_examples() {
        let cfg = InnerOptConfig { lr: 0.01, weight_decay: 0.1, ..Default::default() };
        let mut s = InnerOptState::new(cfg, 2);
        let mut theta = [2.0, -4.0];
        s.step(&mut theta, &[0.0, 0.0]).unwrap();
        assert_eq!(theta, [2.0 - 0.01 * 0.1 * 2.0, -4.0 + 0.01 * 0.1 * 4.0]);

        let cfg = InnerOptConfig { lr: 0.01, ..Default::default() };
        let mut s = InnerOptState::new(cfg, 3);
        let mut theta = [0.0, 0.0, 0.0];
        s.step(&mut theta, &[3.0, -0.2, 1e-3]).unwrap();
        // Bias-corrected first step: lr * g / (|g| + eps).
        let expect = |g: f64| -0.01 * g / (g.abs() + 1e-8);
        for (t, g) in theta.iter().zip([3.0, -0.2, 1e-3]) {
            assert!((t - expect(g)).abs() < 1e-15);
            assert!((t.abs() - 0.01).abs() < 1e-7);
        }
    }

    #[test]
    fn interpolation_examples() {
        assert_eq!(apply_received_fragment(&[5.0, 6.0], &[1.0, 2.0], 0.0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(apply_received_fragment(&[5.0, 6.0], &[1.0, 2.0], 1.0).unwrap(), vec![5.0, 6.0]);
        assert_eq!(apply_received_fragment(&[2.0, 0.0], &[0.0, 2.0], 0.5).unwrap(), vec![1.0, 1.0]);
        assert!(apply_received_fragment(&[0.0], &[0.0], 1.5).is_err());
    }
}
