use super::{Binding, BufferId, Init, Mode, ParamId, Scope};
use crate::error::Result;
use crate::tensor::{BnStats, ConvGeometry, Element, Graph, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
}

impl Conv2d {
    pub fn new<T: Element>(
        s: &mut Scope<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        (kh, kw): (usize, usize),
        geom: ConvGeometry,
        bias: bool,
    ) -> Result<Self> {
        let mut s = s.child(name);
        let fan_in = cin * kh * kw;
        let weight = s.param("weight", &[cout, cin, kh, kw], Init::KaimingUniform { fan_in })?;
        let bias = if bias { Some(s.param("bias", &[cout], Init::Zeros)?) } else { None };
        Ok(Conv2d { weight, bias, geom })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, b: &mut Binding<'_, T>, x: Var) -> Result<Var> {
        let w = b.var(g, self.weight);
        let bias = self.bias.map(|id| b.var(g, id));
        g.conv2d(x, w, bias, self.geom)
    }
}

/// Transposed convolution; weight layout `[Cin, Cout, kh, kw]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
}

impl ConvTranspose2d {
    pub fn new<T: Element>(
        s: &mut Scope<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        (kh, kw): (usize, usize),
        geom: ConvGeometry,
        bias: bool,
    ) -> Result<Self> {
        let mut s = s.child(name);
        // each output pixel sees roughly kh*kw/(sh*sw) taps per input channel
        let fan_in = (cin * kh * kw / (geom.stride.0 * geom.stride.1)).max(1);
        let weight = s.param("weight", &[cin, cout, kh, kw], Init::KaimingUniform { fan_in })?;
        let bias = if bias { Some(s.param("bias", &[cout], Init::Zeros)?) } else { None };
        Ok(ConvTranspose2d { weight, bias, geom })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, b: &mut Binding<'_, T>, x: Var) -> Result<Var> {
        let w = b.var(g, self.weight);
        let bias = self.bias.map(|id| b.var(g, id));
        g.conv_transpose2d(x, w, bias, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<T: Element>(s: &mut Scope<'_, T>, name: &str, channels: usize) -> Result<Self> {
        let mut s = s.child(name);
        Ok(BatchNorm2d {
            gamma: s.param("gamma", &[channels], Init::Ones)?,
            beta: s.param("beta", &[channels], Init::Zeros)?,
            running_mean: s.buffer("running_mean", &[channels], Init::Zeros)?,
            running_var: s.buffer("running_var", &[channels], Init::Ones)?,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, b: &mut Binding<'_, T>, x: Var) -> Result<Var> {
        let gamma = b.var(g, self.gamma);
        let beta = b.var(g, self.beta);
        match b.mode() {
            Mode::Eval => {
                let mean = b.buffer(self.running_mean).data().to_vec();
                let var = b.buffer(self.running_var).data().to_vec();
                let (y, _) = g.batch_norm(x, gamma, beta, BnStats::Fixed { mean: &mean, var: &var }, self.eps)?;
                Ok(y)
            }
            Mode::BatchStats => Ok(g.batch_norm(x, gamma, beta, BnStats::Batch, self.eps)?.0),
            Mode::Train => {
                let (y, stats) = g.batch_norm(x, gamma, beta, BnStats::Batch, self.eps)?;
                let m = T::lit(self.momentum);
                let keep = T::one() - m;
                let unbias = T::lit(stats.count as f64 / (stats.count as f64 - 1.0));
                let rm = b.buffer_mut(self.running_mean).data_mut();
                for (r, &v) in rm.iter_mut().zip(&stats.mean) {
                    *r = keep * *r + m * v;
                }
                let rv = b.buffer_mut(self.running_var).data_mut();
                for (r, &v) in rv.iter_mut().zip(&stats.var) {
                    *r = keep * *r + m * v * unbias;
                }
                Ok(y)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamRegistry;
    use crate::tensor::Tensor;

    #[test]
    fn eval_mode_uses_running_stats() {
        let mut reg = ParamRegistry::<f64>::new();
        let bn = BatchNorm2d::new(&mut Scope::new(&mut reg, ""), "bn", 2).unwrap();
        reg.param_mut(bn.gamma).data_mut().fill(2.0);
        reg.param_mut(bn.beta).data_mut().fill(1.0);
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn([1, 2, 2, 2], |i| i as f64 - 3.0));
        let mut b = Binding::new(&mut reg, Mode::Eval);
        let y = bn.forward(&mut g, &mut b, x).unwrap();
        for (&xi, &yi) in g.value(x).data().iter().zip(g.value(y).data()) {
            assert!((yi - (2.0 * xi + 1.0)).abs() < 1e-4 * (1.0 + xi.abs()));
        }
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let mut reg = ParamRegistry::<f64>::new();
        let bn = BatchNorm2d::new(&mut Scope::new(&mut reg, ""), "bn", 1).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::new([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        {
            let mut b = Binding::new(&mut reg, Mode::BatchStats);
            bn.forward(&mut g, &mut b, x).unwrap();
        }
        assert_eq!(reg.buffer(bn.running_mean).data(), &[0.0]);
        let mut b = Binding::new(&mut reg, Mode::Train);
        bn.forward(&mut g, &mut b, x).unwrap();
        assert!((reg.buffer(bn.running_mean).data()[0] - 0.25).abs() < 1e-12);
        // unbiased variance 5/3
        let expected = 0.9 + 0.1 * 5.0 / 3.0;
        assert!((reg.buffer(bn.running_var).data()[0] - expected).abs() < 1e-12);
    }
}
