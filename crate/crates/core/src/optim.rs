//! Adam with decoupled weight decay and a warmup-cosine learning rate.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Constant,
    /// Linear ramp from 0 over `warmup` steps, then half a cosine down to
    /// `floor` at step `total`, held there afterwards.
    WarmupCosine { warmup: u64, total: u64, floor: f64 },
}

impl Schedule {
    /// Warmup over the first 5% of `total` steps, cosine to 1e-6.
    pub fn desk_default(total: u64) -> Self {
        Schedule::WarmupCosine {
            warmup: (total / 20).max(1),
            total,
            floor: 1e-6,
        }
    }

    pub fn lr_at(&self, base: f64, step: u64) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::WarmupCosine { warmup, total, floor } => {
                if step < warmup {
                    return base * step as f64 / warmup as f64;
                }
                let span = total.saturating_sub(warmup);
                if span == 0 {
                    return floor;
                }
                let p = ((step - warmup) as f64 / span as f64).min(1.0);
                floor + (base - floor) * 0.5 * (1.0 + (PI * p).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    /// Rescale all gradients together when their joint l2 norm exceeds this.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            schedule: Schedule::Constant,
            max_grad_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "invalid Adam settings lr={} beta1={} beta2={}",
                self.lr, self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid eps {} or weight decay {}", self.eps, self.weight_decay)));
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                return Err(Error::Config(format!("max grad norm {n} must be positive")));
            }
        }
        Ok(())
    }
}

/// First and second moment buffers of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Learning rate the next update will use.
    pub fn next_lr(&self) -> f64 {
        self.config.schedule.lr_at(self.config.lr, self.step + 1)
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments<T>> {
        &self.moments
    }

    /// Restore state saved from [`AdamW::steps`] and [`AdamW::moments`].
    pub fn restore(&mut self, step: u64, moments: BTreeMap<String, Moments<T>>) {
        self.step = step;
        self.moments = moments;
    }

    /// Apply one update to every parameter holding a gradient, then clear
    /// all gradients. Parameters without a gradient (for instance the head
    /// of a disabled task) are left untouched. Update number `t` (counting
    /// from 1) uses `schedule.lr_at(t)`. Returns that learning rate.
    pub fn step(&mut self, stores: &mut [&mut ParamStore<T>]) -> Result<f64> {
        if !stores.iter().any(|s| s.iter().any(|p| p.grad.is_some())) {
            return Err(Error::Contract("optimizer step with no gradients populated".into()));
        }
        let clip = match self.config.max_grad_norm {
            Some(max) => {
                let sq: f64 = stores
                    .iter()
                    .flat_map(|s| s.iter())
                    .filter_map(|p| p.grad.as_ref())
                    .flat_map(|g| g.data().iter())
                    .map(|v| v.as_f64().powi(2))
                    .sum();
                let norm = sq.sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let lr = c.schedule.lr_at(c.lr, self.step);
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one, eps) = (T::one(), T::from_f64_lossy(c.eps));
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let decay_factor = T::from_f64_lossy(1.0 - lr * c.weight_decay);
        let clip = T::from_f64_lossy(clip);

        for store in stores.iter_mut() {
            for p in store.iter_mut() {
                let Some(grad) = p.grad.take() else { continue };
                if grad.shape() != p.value.shape() {
                    return Err(Error::ParameterShape {
                        name: p.name.clone(),
                        expected: p.value.shape().to_vec(),
                        found: grad.shape().to_vec(),
                    });
                }
                let n = p.value.len();
                let mom = self.moments.entry(p.name.clone()).or_insert_with(|| Moments {
                    m: vec![T::zero(); n],
                    v: vec![T::zero(); n],
                });
                if mom.m.len() != n {
                    return Err(Error::ParameterShape {
                        name: p.name.clone(),
                        expected: vec![mom.m.len()],
                        found: vec![n],
                    });
                }
                let values = p.value.data_mut();
                for (i, (&g, w)) in grad.data().iter().zip(values.iter_mut()).enumerate() {
                    let g = g * clip;
                    let m = b1 * mom.m[i] + (one - b1) * g;
                    let v = b2 * mom.v[i] + (one - b2) * g * g;
                    mom.m[i] = m;
                    mom.v[i] = v;
                    if p.decay {
                        *w = *w * decay_factor;
                    }
                    *w = *w - step_size * m / ((v * inv_bc2).sqrt() + eps);
                }
            }
            store.zero_grad();
        }
        Ok(lr)
    }
}

/// Zero gradients of the right shape for every parameter, so a step can be
/// taken without a backward pass.
pub fn fill_zero_grads<T: Real>(store: &mut ParamStore<T>) {
    for p in store.iter_mut() {
        p.grad = Some(Tensor::zeros(p.value.shape()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(name: &str, w: f32, g: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let id = s.add(name, Tensor::scalar(w)).unwrap();
        s.get_mut(id).grad = Some(Tensor::scalar(g));
        s
    }

    #[test]
    fn schedule_points() {
        let s = Schedule::WarmupCosine {
            warmup: 10,
            total: 110,
            floor: 1e-6,
        };
        assert_eq!(s.lr_at(5e-4, 0), 0.0);
        assert_eq!(s.lr_at(5e-4, 10), 5e-4);
        assert!((s.lr_at(5e-4, 60) - (5e-4 + 1e-6) / 2.0).abs() <= 1e-9);
        assert!((s.lr_at(5e-4, 110) - 1e-6).abs() <= 1e-15);
        assert!((s.lr_at(5e-4, 500) - 1e-6).abs() <= 1e-15);
        assert_eq!(Schedule::Constant.lr_at(0.3, 12345), 0.3);
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut store = ParamStore::<f32>::new();
        store.add("a.weight", Tensor::full(&[2, 3], 0.7)).unwrap();
        store.add("a.bias", Tensor::full(&[3], -0.2)).unwrap();
        let before = store.clone();
        fill_zero_grads(&mut store);
        let mut opt = AdamW::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        })
        .unwrap();
        opt.step(&mut [&mut store]).unwrap();
        assert_eq!(opt.steps(), 1);
        for (a, b) in store.iter().zip(before.iter()) {
            assert_eq!(a.value, b.value);
            assert!(a.grad.is_none());
        }
    }

    #[test]
    fn first_step_matches_hand_value() {
        // m = 0.1, v = 0.001, m_hat = 1, v_hat = 1, so the step is
        // -lr * 1 / (1 + 1e-8).
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::scalar(1.0)).unwrap();
        store.get_mut(id).grad = Some(Tensor::scalar(1.0));
        let mut opt = AdamW::new(AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        })
        .unwrap();
        opt.step(&mut [&mut store]).unwrap();
        let w = store.iter().next().unwrap().value.item();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((w - expected).abs() <= 1e-12, "{w}");
    }

    #[test]
    fn decay_only_on_weight_matrices() {
        let mut store = ParamStore::<f32>::new();
        for name in ["l.weight", "l.bias", "pos_embed", "rot_token", "norm.gamma", "uncertainty.s1"] {
            store.add(name, Tensor::scalar(1.0)).unwrap();
        }
        fill_zero_grads(&mut store);
        let mut opt = AdamW::new(AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        })
        .unwrap();
        opt.step(&mut [&mut store]).unwrap();
        for p in store.iter() {
            let want = if p.name.ends_with(".weight") { 0.95 } else { 1.0 };
            assert_eq!(p.value.item(), want, "{}", p.name);
        }
    }

    #[test]
    fn missing_grads_are_a_contract_error() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::scalar(1.0)).unwrap();
        let mut opt = AdamW::new(AdamConfig::default()).unwrap();
        assert!(matches!(opt.step(&mut [&mut store]), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let s = Schedule::WarmupCosine {
            warmup: 3,
            total: 100,
            floor: 0.0,
        };
        let mut opt = AdamW::new(AdamConfig {
            lr: 0.01,
            weight_decay: 0.0,
            schedule: s,
            ..AdamConfig::default()
        })
        .unwrap();
        let mut store = scalar_store("w", 0.0, -2.0);
        let mut last = 0.0f32;
        for step in 0..10 {
            if step > 0 {
                store.iter_mut().next().unwrap().grad = Some(Tensor::scalar(-2.0));
            }
            opt.step(&mut [&mut store]).unwrap();
            let w = store.iter().next().unwrap().value.item();
            if step >= 3 {
                assert!(w > last);
            }
            last = w;
        }
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut store = ParamStore::<f32>::new();
            store.add("a.weight", Tensor::from_f64(&[3], &[0.1, -0.4, 0.9]).unwrap()).unwrap();
            let mut opt = AdamW::new(AdamConfig::default()).unwrap();
            for k in 0..10 {
                let g: Vec<f32> = (0..3).map(|i| ((k * 3 + i) as f32 * 0.37).sin()).collect();
                store.iter_mut().next().unwrap().grad = Some(Tensor::from_vec(&[3], g).unwrap());
                opt.step(&mut [&mut store]).unwrap();
            }
            let value = store.iter().next().unwrap().value.clone();
            (value, opt)
        };
        let (a, oa) = run();
        let (b, ob) = run();
        assert_eq!(a, b);
        assert_eq!(oa, ob);
    }

    #[test]
    fn clipping_bounds_the_effective_gradient() {
        let mut store = scalar_store("w", 0.0, 100.0);
        let mut opt = AdamW::new(AdamConfig {
            lr: 1.0,
            weight_decay: 0.0,
            max_grad_norm: Some(1.0),
            ..AdamConfig::default()
        })
        .unwrap();
        opt.step(&mut [&mut store]).unwrap();
        let m = opt.moments()["w"].m[0];
        assert!((m - 0.1).abs() < 1e-6);
    }
}
