use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BETAS: (f64, f64) = (0.9, 0.98);
pub const DEFAULT_EPS: f64 = 1e-8;

/// Adam moment estimates; zeros with `t = 0` before the first step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: if grads.len() != n {
                grads.len()
            } else {
                state.m.len()
            },
        });
    }
    let (b1, b2) = betas;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.5, -1.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1, DEFAULT_BETAS, DEFAULT_EPS).unwrap();
        assert_eq!(p, vec![0.5, -1.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(3);
        adam_step(
            &mut p,
            &[3.0, -0.01, 200.0],
            &mut s,
            0.05,
            DEFAULT_BETAS,
            DEFAULT_EPS,
        )
        .unwrap();
        for (x, sign) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - 0.05 * sign).abs() < 1e-6);
        }
    }

    #[test]
    fn three_unit_gradient_steps() {
        // hand iteration of the recurrence
        let (b1, b2, lr, eps) = (0.9f64, 0.98f64, 0.1, 1e-8);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        for _ in 0..3 {
            adam_step(&mut p, &[1.0], &mut s, lr, (b1, b2), eps).unwrap();
        }
        assert!((p[0] - x).abs() < 1e-12);
        assert!((p[0] + 0.3).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![0.0; 2];
        let mut s = AdamState::new(2);
        assert!(adam_step(&mut p, &[1.0], &mut s, 0.1, DEFAULT_BETAS, DEFAULT_EPS).is_err());
    }
}
