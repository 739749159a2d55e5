use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update over every parameter.
///
/// All gradients are checked before anything is modified, so a non-finite
/// gradient leaves both the parameters and the state untouched.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Dimension(
            "adam: parameter, gradient and state counts differ".into(),
        ));
    }
    for id in params.ids() {
        let t = params.tensor(id);
        if state.m[id.index()].shape() != t.shape() || grads.get(id).len() != t.numel() {
            return Err(Error::Dimension(format!(
                "adam: state for {} does not match shape {:?}",
                params.name(id),
                t.shape()
            )));
        }
        if let Some(pos) = grads.get(id).iter().position(|g| !g.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient in parameter {} at element {pos}",
                params.name(id)
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for id in params.ids() {
        let g = grads.get(id);
        let m = state.m[id.index()].data_mut();
        let v = state.v[id.index()].data_mut();
        let p = params.tensor_mut(id).data_mut();
        for i in 0..p.len() {
            let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * g[i];
            let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * g[i] * g[i];
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = cfg.lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
            p[i] = (p[i] as f64 - update) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f32) -> ParamStore {
        let mut p = ParamStore::new();
        p.add("p", Tensor::new(vec![1], vec![x]).unwrap()).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_store(0.7);
        let g = Gradients::zeros(&p);
        let mut s = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p.tensor(p.id("p").unwrap()).data(), &[0.7]);
        assert_eq!(s.step, 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_store(1.0);
        let id = p.id("p").unwrap();
        let mut g = Gradients::zeros(&p);
        g.get_mut(id)[0] = 1.0;
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
        // m_hat = v_hat = 1 at t = 1
        let got = p.tensor(id).data()[0] as f64;
        assert!((got - (1.0 - 1e-3)).abs() < 1e-7, "{got}");
        assert_eq!(s.step, 1);
    }

    #[test]
    fn descends_quadratic() {
        let mut p = scalar_store(1.0);
        let id = p.id("p").unwrap();
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        };
        for _ in 0..200 {
            let x = p.tensor(id).data()[0] as f64;
            let mut g = Gradients::zeros(&p);
            g.get_mut(id)[0] = 2.0 * x;
            adam_step(&mut p, &g, &mut s, &cfg).unwrap();
        }
        assert!(p.tensor(id).data()[0].abs() < 0.5);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar_store(1.0);
        let id = p.id("p").unwrap();
        let mut g = Gradients::zeros(&p);
        g.get_mut(id)[0] = f64::NAN;
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap_err();
        assert!(matches!(&err, Error::Training(m) if m.contains("parameter p")));
        assert_eq!(s.step, 0);
        assert_eq!(p.tensor(id).data(), &[1.0]);
    }
}
