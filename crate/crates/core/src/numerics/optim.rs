//! SGD with momentum and Adam over lists of flat parameter blocks.

use crate::error::{DvrError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum {
        momentum: f64,
        weight_decay: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerKind {
    pub const SGD_DEFAULT: OptimizerKind = OptimizerKind::SgdMomentum {
        momentum: 0.9,
        weight_decay: 5e-4,
    };
    pub const ADAM_DEFAULT: OptimizerKind = OptimizerKind::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

/// Moment buffers, step counter and hyperparameters for one parameter group.
///
/// `first` holds the SGD velocity or the Adam first moment; `second` is the
/// Adam second moment and stays empty for SGD.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, block_lens: &[usize]) -> Self {
        let zeros = || block_lens.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros(),
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
        };
        OptimizerState {
            kind,
            lr,
            step: 0,
            first: zeros(),
            second,
        }
    }

    pub fn sgd(lr: f64, block_lens: &[usize]) -> Self {
        Self::new(OptimizerKind::SGD_DEFAULT, lr, block_lens)
    }

    pub fn adam(lr: f64, block_lens: &[usize]) -> Self {
        Self::new(OptimizerKind::ADAM_DEFAULT, lr, block_lens)
    }

    fn check_shapes(&self, params: &[&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(DvrError::invalid(format!(
                "optimizer got {} parameter blocks and {} gradient blocks for {} buffers",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (i, ((p, g), m)) in params.iter().zip(grads).zip(&self.first).enumerate() {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(DvrError::invalid(format!(
                    "block {i}: param {} grad {} buffer {}",
                    p.len(),
                    g.len(),
                    m.len()
                )));
            }
        }
        Ok(())
    }

    /// Dispatches on `kind`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        match self.kind {
            OptimizerKind::SgdMomentum { .. } => sgd_step(params, grads, self),
            OptimizerKind::Adam { .. } => adam_step(params, grads, self),
        }
    }
}

/// `v ← μ·v + g + wd·p`, then `p ← p − lr·v`.
pub fn sgd_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut OptimizerState) -> Result<()> {
    let OptimizerKind::SgdMomentum {
        momentum,
        weight_decay,
    } = state.kind
    else {
        return Err(DvrError::invalid("sgd_step on a non-SGD optimizer state"));
    };
    state.check_shapes(params, grads)?;
    let lr = state.lr;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.first.iter_mut()) {
        for ((pi, &gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *vi = momentum * *vi + gi + weight_decay * *pi;
            *pi -= lr * *vi;
        }
    }
    state.step += 1;
    Ok(())
}

/// Adam with bias-corrected moments.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut OptimizerState) -> Result<()> {
    let OptimizerKind::Adam { beta1, beta2, eps } = state.kind else {
        return Err(DvrError::invalid("adam_step on a non-Adam optimizer state"));
    };
    state.check_shapes(params, grads)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let lr = state.lr;
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        for (((pi, &gi), mi), vi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sgd_plain(lr: f64) -> OptimizerState {
        OptimizerState::new(
            OptimizerKind::SgdMomentum {
                momentum: 0.0,
                weight_decay: 0.0,
            },
            lr,
            &[1],
        )
    }

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let mut st = OptimizerState::new(
            OptimizerKind::SgdMomentum {
                momentum: 0.9,
                weight_decay: 0.0,
            },
            0.1,
            &[3],
        );
        let mut p = vec![1.0, -2.0, 3.0];
        sgd_step(&mut [&mut p], &[&[0.0; 3]], &mut st).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn sgd_scalar_hand_value() {
        let mut st = sgd_plain(0.1);
        let mut p = vec![1.0];
        sgd_step(&mut [&mut p], &[&[1.0]], &mut st).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_and_decay_recurrence() {
        let mut st = OptimizerState::sgd(0.1, &[1]);
        let mut p = vec![1.0];
        sgd_step(&mut [&mut p], &[&[1.0]], &mut st).unwrap();
        // v = 1 + 5e-4, p = 1 - 0.1 v
        let v1 = 1.0 + 5e-4;
        assert!((p[0] - (1.0 - 0.1 * v1)).abs() < 1e-15);
        let p1 = p[0];
        sgd_step(&mut [&mut p], &[&[1.0]], &mut st).unwrap();
        let v2 = 0.9 * v1 + 1.0 + 5e-4 * p1;
        assert!((p[0] - (p1 - 0.1 * v2)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_hand_value() {
        let mut st = OptimizerState::adam(1e-3, &[1]);
        let mut p = vec![0.0];
        adam_step(&mut [&mut p], &[&[1.0]], &mut st).unwrap();
        assert!((p[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut st = OptimizerState::adam(1e-3, &[2]);
        let mut p = vec![0.5, -0.5];
        adam_step(&mut [&mut p], &[&[0.0, 0.0]], &mut st).unwrap();
        assert_eq!(p, vec![0.5, -0.5]);
    }

    #[test]
    fn repeated_identical_calls_agree() {
        for kind in [OptimizerKind::SGD_DEFAULT, OptimizerKind::ADAM_DEFAULT] {
            let run = || {
                let mut st = OptimizerState::new(kind, 0.01, &[2, 1]);
                let mut a = vec![0.3, -0.7];
                let mut b = vec![1.1];
                for _ in 0..5 {
                    st.step(&mut [&mut a, &mut b], &[&[0.2, -0.1], &[0.4]]).unwrap();
                }
                (a, b, st)
            };
            assert_eq!(run(), run());
        }
    }

    #[test]
    fn shape_mismatch_and_wrong_kind() {
        let mut st = OptimizerState::sgd(0.1, &[2]);
        let mut p = vec![0.0; 3];
        assert!(sgd_step(&mut [&mut p], &[&[0.0; 3]], &mut st).is_err());
        let mut q = vec![0.0; 2];
        assert!(adam_step(&mut [&mut q], &[&[0.0; 2]], &mut st).is_err());
    }
}
