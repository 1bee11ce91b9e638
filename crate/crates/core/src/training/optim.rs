use super::TrainPlan;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zeroed moments for parameters with the given element counts.
    pub fn new(numels: &[usize]) -> Self {
        Self {
            m: numels.iter().map(|&n| vec![0.0; n]).collect(),
            v: numels.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One AdamW update at step `t ≥ 1` with learning rate `lr`.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    plan: &TrainPlan,
    lr: f64,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Contract("adamw step index starts at 1".into()));
    }
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::dim("adamw_step", &[params.len()], &[grads.len(), state.m.len()]));
    }
    let (b1, b2) = (plan.beta1, plan.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if g.len() != p.numel() || state.m[i].len() != p.numel() || state.v[i].len() != p.numel() {
            return Err(Error::dim("adamw_step", p.shape(), &[g.len()]));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *x -= lr * (m_hat / (v_hat.sqrt() + plan.eps) + plan.weight_decay * *x);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Linear warmup over `warmup_frac` of `total_steps`, then constant.
pub fn lr_at(plan: &TrainPlan, step: u64) -> f64 {
    let warmup = ((plan.warmup_frac * plan.steps as f64).ceil() as u64).max(1);
    plan.lr * ((step + 1) as f64 / warmup as f64).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan() -> TrainPlan {
        TrainPlan {
            lr: 0.1,
            ..TrainPlan::default()
        }
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut p = Tensor::from_rows(&[&[1.0, -2.0]]);
        let before = p.clone();
        let mut st = AdamState::new(&[p.numel()]);
        adamw_step(&mut [&mut p], &[vec![0.0, 0.0]], &mut st, &plan(), 0.1, 1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = Tensor::from_rows(&[&[1.0, -2.0, 0.5]]);
        let g = vec![0.3, -4.0, 1e-3];
        let mut st = AdamState::new(&[p.numel()]);
        let pl = plan();
        adamw_step(&mut [&mut p], std::slice::from_ref(&g), &mut st, &pl, 0.1, 1).unwrap();
        for (j, (&x, x0)) in p.data().iter().zip([1.0, -2.0, 0.5]).enumerate() {
            let expect = x0 - 0.1 * g[j] / (g[j].abs() + pl.eps);
            assert!((x - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn decay_only_scales() {
        let mut p = Tensor::from_rows(&[&[1.0, -2.0]]);
        let pl = TrainPlan {
            weight_decay: 0.01,
            ..plan()
        };
        let mut st = AdamState::new(&[p.numel()]);
        adamw_step(&mut [&mut p], &[vec![0.0, 0.0]], &mut st, &pl, 0.1, 1).unwrap();
        assert_eq!(p.data(), &[1.0 * (1.0 - 0.1 * 0.01), -2.0 * (1.0 - 0.1 * 0.01)]);
    }

    #[test]
    fn clipping_and_warmup() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let pl = TrainPlan {
            steps: 100,
            lr: 1.0,
            ..TrainPlan::default()
        };
        assert_eq!(lr_at(&pl, 0), 0.2);
        assert_eq!(lr_at(&pl, 4), 1.0);
        assert_eq!(lr_at(&pl, 99), 1.0);
    }
}
