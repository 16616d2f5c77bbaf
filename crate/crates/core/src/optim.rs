//! Bias-corrected Adam over a [`ParamRegistry`].

use crate::error::{Error, Result};
use crate::nn::ParamRegistry;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-3,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers are indexed like the registry they were created for.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, reg: &ParamRegistry<f32>) -> Self {
        let zeros = || reg.iter().map(|(_, t)| vec![0.0; t.numel()]).collect::<Vec<_>>();
        Adam {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    /// Restores saved state; buffer sizes must match the registry.
    pub fn restore(&mut self, step: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> Result<()> {
        let ok = |b: &[Vec<f32>]| b.len() == self.m.len() && b.iter().zip(&self.m).all(|(x, y)| x.len() == y.len());
        if !ok(&m) || !ok(&v) {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update in registry order. Consumes (clears) the gradients.
    pub fn step(&mut self, reg: &mut ParamRegistry<f32>) -> Result<()> {
        if reg.len() != self.m.len() {
            return Err(Error::invalid("adam_step", "registry changed since optimizer creation"));
        }
        if let Some((name, _)) = reg.iter().find(|(_, t)| t.grad.is_none()) {
            return Err(Error::MissingGradient(name.to_string()));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        for (i, (_, p)) in reg.iter_mut().enumerate() {
            let g = p.grad.take().expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi as f64 / c1;
                let vhat = *vi as f64 / c2;
                *w -= (lr * mhat / (vhat.sqrt() + eps)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    fn scalar_registry(v: f32) -> ParamRegistry<f32> {
        let mut r = ParamRegistry::new();
        let id = r.register("p", &[], Init::Constant(v as f64)).unwrap();
        r.param_mut(id).data_mut()[0] = v;
        r
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut r = scalar_registry(1.0);
        let mut opt = Adam::new(AdamConfig::default(), &r);
        r.iter_mut().next().unwrap().1.grad = Some(vec![1.0]);
        opt.step(&mut r).unwrap();
        let p = r.get("p").unwrap().data()[0] as f64;
        assert!((p - (1.0 - 5e-3 / (1.0 + 1e-8))).abs() < 1e-7, "{p}");
    }

    #[test]
    fn zero_grad_is_no_op() {
        let mut r = scalar_registry(0.3);
        let mut opt = Adam::new(AdamConfig::default(), &r);
        for _ in 0..3 {
            r.iter_mut().next().unwrap().1.grad = Some(vec![0.0]);
            opt.step(&mut r).unwrap();
        }
        assert_eq!(r.get("p").unwrap().data()[0], 0.3);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut r = scalar_registry(1.0);
        let mut opt = Adam::new(AdamConfig::default(), &r);
        match opt.step(&mut r) {
            Err(Error::MissingGradient(n)) => assert_eq!(n, "p"),
            other => panic!("{other:?}"),
        }
    }
}
