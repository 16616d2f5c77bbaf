//! Segmentation losses, class weighting and uncertainty-weighted joint loss.

use crate::error::{Error, Result};
use crate::nn::{Binding, Init, ParamId, ParamRegistry};
use crate::tensor::{Element, Graph, Reduction, Tensor, Var};

pub const IGNORE_LABEL: u8 = 255;

/// Per-pixel softmax over the class axis of `[N, K, H, W]` logits.
pub fn pixel_softmax<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, k, h, w] = logits.dims4("pixel_softmax")?;
    let plane = h * w;
    let x = logits.data();
    let mut out = vec![T::zero(); x.len()];
    for s in 0..n {
        for p in 0..plane {
            let idx = |c: usize| (s * k + c) * plane + p;
            let m = (0..k).map(|c| x[idx(c)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..k {
                let e = (x[idx(c)] - m).exp();
                out[idx(c)] = e;
                z = z + e;
            }
            for c in 0..k {
                out[idx(c)] = out[idx(c)] / z;
            }
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub c: f64,
}

impl ClassWeights {
    pub fn uniform(k: usize) -> Self {
        ClassWeights {
            weights: vec![1.0; k],
            c: f64::NAN,
        }
    }

    pub fn as_elements<T: Element>(&self) -> Vec<T> {
        self.weights.iter().map(|&w| T::lit(w)).collect()
    }
}

/// `w = 1 / ln(c + p)` with `p` the class's pixel frequency.
pub fn class_weights(pixel_counts: &[u64], c: f64) -> Result<ClassWeights> {
    let total: u64 = pixel_counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("class_weights", "no labelled pixels"));
    }
    let weights: Vec<f64> = pixel_counts
        .iter()
        .map(|&n| 1.0 / (c + n as f64 / total as f64).ln())
        .collect();
    if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w <= 0.0) {
        return Err(Error::invalid(
            "class_weights",
            format!("c = {c} gives a non-positive log for class {i}"),
        ));
    }
    Ok(ClassWeights { weights, c })
}

/// Class-weighted cross-entropy; see [`Graph::softmax_cross_entropy`].
pub fn seg_loss<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[u8],
    weights: &ClassWeights,
    reduction: Reduction,
) -> Result<Var> {
    g.softmax_cross_entropy(logits, labels, &weights.as_elements(), IGNORE_LABEL, reduction)
}

/// Learnable log-variances balancing the adversarial and segmentation terms.
#[derive(Clone, Debug)]
pub struct UncertaintyWeights {
    pub s_adv: ParamId,
    pub s_seg: ParamId,
}

pub const UNCERTAINTY_PREFIX: &str = "uncertainty";

impl UncertaintyWeights {
    pub fn new<T: Element>(reg: &mut ParamRegistry<T>) -> Result<Self> {
        Ok(UncertaintyWeights {
            s_adv: reg.register(format!("{UNCERTAINTY_PREFIX}.s_adv"), &[], Init::Zeros)?,
            s_seg: reg.register(format!("{UNCERTAINTY_PREFIX}.s_seg"), &[], Init::Zeros)?,
        })
    }

    /// `exp(-s_adv) l_adv + s_adv / 2 + exp(-s_seg) l_seg + s_seg / 2`; the
    /// adversarial part is dropped when `l_adv` is `None`, though `s_adv` is
    /// still bound so it receives a zero gradient.
    pub fn joint_loss<T: Element>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binding<'_, T>,
        l_adv: Option<Var>,
        l_seg: Var,
    ) -> Result<Var> {
        let s_seg = b.var(g, self.s_seg);
        let s_adv = b.var(g, self.s_adv);
        let mut total = weighted_term(g, l_seg, s_seg)?;
        if let Some(l) = l_adv {
            let t = weighted_term(g, l, s_adv)?;
            total = g.add(total, t)?;
        }
        Ok(total)
    }
}

fn weighted_term<T: Element>(g: &mut Graph<T>, l: Var, s: Var) -> Result<Var> {
    let neg = g.affine(s, -1.0, 0.0);
    let w = g.exp(neg);
    let weighted = g.mul(w, l)?;
    let reg = g.affine(s, 0.5, 0.0);
    g.add(weighted, reg)
}

/// Unweighted joint loss on raw values, for reporting.
pub fn joint_loss(l_adv: f64, l_seg: f64, s_adv: f64, s_seg: f64) -> f64 {
    (-s_adv).exp() * l_adv + s_adv / 2.0 + (-s_seg).exp() * l_seg + s_seg / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;

    #[test]
    fn softmax_spot_values() {
        let t = Tensor::new([1, 2, 1, 2], vec![0.0f64, 3f64.ln(), 0.0, 0.0]).unwrap();
        let p = pixel_softmax(&t).unwrap();
        let d = p.data();
        assert!((d[0] - 0.5).abs() < 1e-12 && (d[2] - 0.5).abs() < 1e-12);
        assert!((d[1] - 0.75).abs() < 1e-12 && (d[3] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn class_weight_values() {
        let w = class_weights(&[0, 9, 1], 1.10).unwrap();
        assert!((w.weights[0] - 10.49206).abs() < 1e-4);
        assert!((w.weights[1] - 1.44270).abs() < 1e-4);
        assert!(w.weights[2] > w.weights[1]);
        assert!(class_weights(&[0, 5], 1.0).is_err());
        assert!(class_weights(&[0, 0], 1.1).is_err());
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros([1, 19, 1, 1]));
        let l = seg_loss(&mut g, x, &[4], &ClassWeights::uniform(19), Reduction::Mean).unwrap();
        assert!((g.value(l).item() - 19f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fully_ignored_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn([1, 3, 2, 2], |i| i as f64));
        let l = seg_loss(&mut g, x, &[255; 4], &ClassWeights::uniform(3), Reduction::Mean).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn label_out_of_range() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros([1, 3, 1, 1]));
        assert!(matches!(
            seg_loss(&mut g, x, &[3], &ClassWeights::uniform(3), Reduction::Mean),
            Err(Error::LabelOutOfRange { label: 3, .. })
        ));
    }

    #[test]
    fn joint_reduces_to_sum_at_zero() {
        let mut reg = ParamRegistry::<f64>::new();
        let u = UncertaintyWeights::new(&mut reg).unwrap();
        let mut g = Graph::new();
        let la = g.input(Tensor::scalar(0.7));
        let ls = g.input(Tensor::scalar(1.9));
        let mut b = Binding::new(&mut reg, Mode::Train);
        let j = u.joint_loss(&mut g, &mut b, Some(la), ls).unwrap();
        assert!((g.value(j).item() - 2.6).abs() < 1e-12);
        let only = u.joint_loss(&mut g, &mut b, None, ls).unwrap();
        assert!((g.value(only).item() - 1.9).abs() < 1e-12);
    }
}
