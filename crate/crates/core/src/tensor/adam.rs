use serde::{Deserialize, Serialize};

use super::{shape_err, Tensor, TensorError};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        let ok = self.lr > 0.0
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2);
        if ok {
            Ok(())
        } else {
            Err(TensorError::Invalid {
                op: "adam",
                detail: format!("invalid hyperparameters {self:?}"),
            })
        }
    }
}

/// Moment estimates and step counter for one parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub hyper: AdamConfig,
}

impl AdamState {
    pub fn new(params: &[Tensor], hyper: AdamConfig) -> Result<Self, TensorError> {
        hyper.validate()?;
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(Self {
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            hyper,
        })
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(shape_err(
            "adam",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.first_moment.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first_moment[i].shape() {
            return Err(shape_err(
                "adam",
                format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.hyper;
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = beta1 * *mv + (1.0 - beta1) * gv;
            *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::from_vec(vec![1.0, -2.0])];
        let grads = vec![Tensor::zeros(&[2])];
        let mut st = AdamState::new(&params, AdamConfig::default()).unwrap();
        adam_step(&mut params, &grads, &mut st).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = vec![Tensor::from_vec(vec![0.0])];
        let grads = vec![Tensor::from_vec(vec![1.0])];
        let hyper = AdamConfig {
            lr: 0.1,
            eps: 1e-300,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&params, hyper).unwrap();
        adam_step(&mut params, &grads, &mut st).unwrap();
        assert!((params[0].data()[0] + 0.1).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::zeros(&[2])];
        let mut st = AdamState::new(&params, AdamConfig::default()).unwrap();
        let grads = vec![Tensor::zeros(&[3])];
        assert!(adam_step(&mut params, &grads, &mut st).is_err());
        assert_eq!(st.step_count, 0);
    }

    #[test]
    fn bad_hyperparameters_are_rejected() {
        let bad = AdamConfig {
            beta1: 1.0,
            ..AdamConfig::default()
        };
        assert!(AdamState::new(&[], bad).is_err());
    }
}
