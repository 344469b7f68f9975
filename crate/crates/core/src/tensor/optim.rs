use super::{ParamStore, Scalar};
use crate::error::{Error, Result};

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescales the joint gradient of all trainable parameters to at most
    /// this L2 norm before the update.
    pub max_grad_norm: Option<f64>,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            max_grad_norm: None,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradient buffers in `store`, then clears
    /// them. Parameters without a gradient buffer are skipped.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.m.is_empty() {
            self.m = store.iter().map(|(_, _, p)| vec![0.0; p.tensor.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != store.len() {
            return Err(Error::Config("optimizer state does not match parameter store".into()));
        }
        for (id, name, p) in store.iter() {
            if let Some(g) = p.tensor.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient for `{name}`")));
                }
                if self.m[id.0].len() != g.len() {
                    return Err(Error::Config(format!("moment buffer shape mismatch for `{name}`")));
                }
            }
        }
        let clip = match self.max_grad_norm {
            Some(max) => {
                let sq: f64 = store
                    .iter()
                    .filter(|(_, _, p)| p.trainable)
                    .filter_map(|(_, _, p)| p.tensor.grad())
                    .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()))
                    .sum();
                let norm = sq.sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, _, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(grad) = p.tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i].as_f64() * clip;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let mut x = w.as_f64();
                x -= self.lr * self.weight_decay * x;
                x -= self.lr * mhat / (vhat.sqrt() + self.eps);
                *w = T::from_f64(x);
            }
            if let Some(g) = p.tensor.grad_mut() {
                g.iter_mut().for_each(|v| *v = T::zero());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(w: f64) -> (ParamStore<f64>, crate::tensor::ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::scalar(w), true).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, id) = scalar_store(0.7);
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..5 {
            s.get_mut(id).enable_grad();
            opt.step(&mut s).unwrap();
        }
        assert_eq!(s.get(id).data()[0], 0.7);
        assert_eq!(opt.steps(), 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = AdamW::new(0.01, 0.0);
        s.get_mut(id).accumulate_grad(&[1.0]);
        opt.step(&mut s).unwrap();
        assert!((s.get(id).data()[0] - (1.0 - 0.01)).abs() < 1e-9);
    }

    #[test]
    fn decoupled_decay_with_zero_grad() {
        let (mut s, id) = scalar_store(2.0);
        let mut opt = AdamW::new(0.1, 0.5);
        s.get_mut(id).enable_grad();
        opt.step(&mut s).unwrap();
        assert!((s.get(id).data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = AdamW::new(0.05, 0.0);
        let mut reached = None;
        for step in 1..=2000 {
            let w = s.get(id).data()[0];
            s.get_mut(id).accumulate_grad(&[2.0 * w]);
            opt.step(&mut s).unwrap();
            if s.get(id).data()[0].abs() < 0.01 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some());
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut s, id) = scalar_store(1.0);
        s.get_mut(id).accumulate_grad(&[f64::NAN]);
        let err = AdamW::new(0.1, 0.0).step(&mut s).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
    }

    #[test]
    fn clipping_scales_the_joint_gradient() {
        let mut s = ParamStore::<f64>::new();
        let a = s.insert("a", Tensor::scalar(0.0), true).unwrap();
        let b = s.insert("b", Tensor::scalar(0.0), true).unwrap();
        s.get_mut(a).accumulate_grad(&[3.0]);
        s.get_mut(b).accumulate_grad(&[4.0]);
        let mut opt = AdamW::new(0.1, 0.0);
        opt.max_grad_norm = Some(1.0);
        opt.step(&mut s).unwrap();
        assert!((opt.m[0][0] - 0.1 * 0.6).abs() < 1e-12);
        assert!((opt.m[1][0] - 0.1 * 0.8).abs() < 1e-12);
        // Below the threshold nothing changes.
        s.get_mut(a).accumulate_grad(&[0.3]);
        opt.step(&mut s).unwrap();
        assert!((opt.m[0][0] - (0.9 * 0.06 + 0.1 * 0.3)).abs() < 1e-12);
    }
}
