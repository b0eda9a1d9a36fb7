use crate::error::{Error, Result};
use crate::param::ParamStore;

/// Adam with bias correction. One `m`/`v` buffer pair per parameter, in store order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Applies one update to every parameter that has a gradient.
    ///
    /// Gradients are validated before anything is mutated, so a non-finite
    /// gradient leaves both the parameters and the optimizer state untouched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for p in store.iter() {
            if let Some(g) = p.tensor.grad() {
                if let Some((index, &value)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        name: p.name.clone(),
                        index,
                        value,
                    });
                }
            }
        }
        if self.m.is_empty() {
            self.m = store.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let data = p.tensor.data_mut();
            for j in 0..data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Tape, Tensor};

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(v)).unwrap();
        s
    }

    fn quadratic_grad(store: &mut ParamStore, target: f64) {
        let id = store.lookup("p").unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, id);
        let t = tape.constant(Tensor::scalar(target));
        let loss = tape.mse(p, t).unwrap();
        tape.backward(loss).unwrap();
        store.zero_grad();
        store.accumulate_grads(&tape).unwrap();
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        let mut store = scalar_store(0.0);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            quadratic_grad(&mut store, 3.0);
            opt.step(&mut store).unwrap();
        }
        let p = store.iter().next().unwrap().tensor.data()[0];
        assert!((p - 3.0).abs() < 1e-2, "p = {p}");
        assert_eq!(opt.step_count(), 500);
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let mut store = scalar_store(1.0);
        let mut opt = Adam::new(1e-2);
        let mut prev = 1.0;
        for _ in 0..100 {
            store.zero_grad();
            store.iter_mut().next().unwrap().tensor.accumulate_grad(&[2.5]).unwrap();
            opt.step(&mut store).unwrap();
            let now = store.iter().next().unwrap().tensor.data()[0];
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = scalar_store(0.7);
        store.iter_mut().next().unwrap().tensor.accumulate_grad(&[0.0]).unwrap();
        let mut opt = Adam::default();
        for _ in 0..10 {
            opt.step(&mut store).unwrap();
        }
        assert_eq!(store.iter().next().unwrap().tensor.data()[0], 0.7);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut store = ParamStore::new();
        store.add("net.enc.stage1.conv1.w", Tensor::zeros(&[2])).unwrap();
        store
            .iter_mut()
            .next()
            .unwrap()
            .tensor
            .accumulate_grad(&[0.0, f64::NAN])
            .unwrap();
        let err = Adam::default().step(&mut store).unwrap_err();
        match err {
            Error::NonFiniteGradient { name, index, .. } => {
                assert_eq!(name, "net.enc.stage1.conv1.w");
                assert_eq!(index, 1);
            }
            other => panic!("unexpected error {other}"),
        }
        assert_eq!(store.iter().next().unwrap().tensor.data(), &[0.0, 0.0]);
    }
}
