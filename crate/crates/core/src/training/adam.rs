use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moments for an ordered list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.first[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.second[i]
    }
}

/// One parameter's view for an update.
pub struct ParamSlot<'a> {
    pub name: &'a str,
    pub value: &'a mut Tensor,
    /// `None` means a zero gradient.
    pub grad: Option<&'a Tensor>,
    pub lr: f64,
}

/// Bias-corrected Adam update of every slot, in order. All gradients are
/// checked before anything is modified.
pub fn adam_step(state: &mut AdamState, slots: &mut [ParamSlot<'_>]) -> Result<()> {
    if slots.len() != state.first.len() {
        return Err(Error::Invalid(format!(
            "optimizer tracks {} parameters, got {}",
            state.first.len(),
            slots.len()
        )));
    }
    for (i, s) in slots.iter().enumerate() {
        if s.value.len() != state.first[i].len() {
            return Err(Error::shape("adam_step", format!("`{}` changed size", s.name)));
        }
        if let Some(g) = s.grad {
            if g.shape() != s.value.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("`{}` is {:?} but its gradient is {:?}", s.name, s.value.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(s.name.to_string()));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (i, s) in slots.iter_mut().enumerate() {
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        let grad = s.grad.map(Tensor::data);
        for (j, p) in s.value.data_mut().iter_mut().enumerate() {
            let g = grad.map_or(0.0, |g| g[j]);
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *p -= s.lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::row(vec![1.0, -2.0]).unwrap();
        let g = Tensor::zeros(1, 2);
        let mut st = AdamState::new(&[2]);
        adam_step(
            &mut st,
            &mut [ParamSlot {
                name: "p",
                value: &mut p,
                grad: Some(&g),
                lr: 0.1,
            }],
        )
        .unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        // m̂ = g, v̂ = g², so the update is −lr·g/(|g| + ε)
        let grads = [0.3, -4.0, 1e-9, 2.5e-3];
        let start = [0.5, 0.5, -1.0, 0.0];
        let lr = 0.01;
        let mut p = Tensor::row(start.to_vec()).unwrap();
        let g = Tensor::row(grads.to_vec()).unwrap();
        let mut st = AdamState::new(&[4]);
        adam_step(
            &mut st,
            &mut [ParamSlot {
                name: "p",
                value: &mut p,
                grad: Some(&g),
                lr,
            }],
        )
        .unwrap();
        for i in 0..4 {
            let expected = start[i] - lr * grads[i] / (grads[i].abs() + EPSILON);
            assert!((p.data()[i] - expected).abs() < 1e-15, "{i}");
        }
    }

    #[test]
    fn groups_use_their_own_rates() {
        let mut a = Tensor::scalar(0.0);
        let mut b = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        let mut st = AdamState::new(&[1, 1]);
        adam_step(
            &mut st,
            &mut [
                ParamSlot {
                    name: "a",
                    value: &mut a,
                    grad: Some(&g),
                    lr: 1e-3,
                },
                ParamSlot {
                    name: "b",
                    value: &mut b,
                    grad: Some(&g),
                    lr: 5e-2,
                },
            ],
        )
        .unwrap();
        assert!((a.item() + 1e-3).abs() < 1e-10);
        assert!((b.item() + 5e-2).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = Tensor::row(vec![1.0, 2.0]).unwrap();
        let g = Tensor::row(vec![0.1, f64::NAN]).unwrap();
        let mut st = AdamState::new(&[2]);
        let err = adam_step(
            &mut st,
            &mut [ParamSlot {
                name: "encoder.w_q",
                value: &mut p,
                grad: Some(&g),
                lr: 0.1,
            }],
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "encoder.w_q"));
        assert_eq!(p.data(), &[1.0, 2.0]);
        assert_eq!(st.step, 0);
    }
}
