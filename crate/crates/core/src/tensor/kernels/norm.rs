use crate::parallel;
use crate::tensor::Element;

/// Per-channel statistics a batch-norm forward used.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    /// Elements per channel, `N * H * W`.
    pub count: usize,
}

#[derive(Debug)]
pub struct NormGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

fn channel_iter<T: Copy>(x: &[T], n: usize, c: usize, plane: usize, ch: usize) -> impl Iterator<Item = T> + '_ {
    (0..n).flat_map(move |s| x[(s * c + ch) * plane..(s * c + ch + 1) * plane].iter().copied())
}

/// Normalises `[N, C, plane]` with either the batch's own statistics
/// (`fixed == None`) or the given `(mean, var)`, then applies `gamma`/`beta`.
pub fn batch_norm_forward<T: Element>(
    x: &[T],
    dims: [usize; 3],
    gamma: &[T],
    beta: &[T],
    fixed: Option<(&[T], &[T])>,
    eps: f64,
) -> (Vec<T>, NormStats<T>) {
    let [n, c, plane] = dims;
    let count = n * plane;
    let (mean, var): (Vec<T>, Vec<T>) = match fixed {
        Some((m, v)) => (m.to_vec(), v.to_vec()),
        None => parallel::map_range(c, |ch| {
            let mu = channel_iter(x, n, c, plane, ch).map(|v| v.as_f64()).sum::<f64>() / count as f64;
            let var = channel_iter(x, n, c, plane, ch)
                .map(|v| {
                    let d = v.as_f64() - mu;
                    d * d
                })
                .sum::<f64>()
                / count as f64;
            (T::lit(mu), T::lit(var))
        })
        .into_iter()
        .unzip(),
    };
    let inv_std: Vec<T> = var
        .iter()
        .map(|v| T::lit(1.0 / (v.as_f64() + eps).sqrt()))
        .collect();
    let mut y = vec![T::zero(); x.len()];
    parallel::for_each_chunk(&mut y, plane, |p, out| {
        let ch = p % c;
        let scale = gamma[ch] * inv_std[ch];
        let shift = beta[ch] - mean[ch] * scale;
        let src = &x[p * plane..(p + 1) * plane];
        out.iter_mut().zip(src).for_each(|(o, &v)| *o = v * scale + shift);
    });
    (
        y,
        NormStats {
            mean,
            var,
            inv_std,
            count,
        },
    )
}

/// Backward of [`batch_norm_forward`]. `batch_stats` selects whether the
/// statistics depended on the input (training) or were constants.
pub fn batch_norm_backward<T: Element>(
    grad_out: &[T],
    x: &[T],
    dims: [usize; 3],
    gamma: &[T],
    stats: &NormStats<T>,
    batch_stats: bool,
) -> NormGrads<T> {
    let [n, c, plane] = dims;
    let sums: Vec<(f64, f64)> = parallel::map_range(c, |ch| {
        let mu = stats.mean[ch].as_f64();
        let is = stats.inv_std[ch].as_f64();
        channel_iter(grad_out, n, c, plane, ch)
            .zip(channel_iter(x, n, c, plane, ch))
            .fold((0.0, 0.0), |(sd, sdx), (g, v)| {
                let g = g.as_f64();
                (sd + g, sdx + g * (v.as_f64() - mu) * is)
            })
    });
    let m = stats.count as f64;
    let mut dx = vec![T::zero(); x.len()];
    parallel::for_each_chunk(&mut dx, plane, |p, out| {
        let ch = p % c;
        let (sd, sdx) = sums[ch];
        let g = gamma[ch].as_f64() * stats.inv_std[ch].as_f64();
        let mu = stats.mean[ch].as_f64();
        let is = stats.inv_std[ch].as_f64();
        let dys = &grad_out[p * plane..(p + 1) * plane];
        let xs = &x[p * plane..(p + 1) * plane];
        for ((o, &dy), &v) in out.iter_mut().zip(dys).zip(xs) {
            let dy = dy.as_f64();
            *o = T::lit(if batch_stats {
                let xhat = (v.as_f64() - mu) * is;
                g * (dy - sd / m - xhat * sdx / m)
            } else {
                g * dy
            });
        }
    });
    NormGrads {
        input: dx,
        gamma: sums.iter().map(|&(_, sdx)| T::lit(sdx)).collect(),
        beta: sums.iter().map(|&(sd, _)| T::lit(sd)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_stats_normalise_each_channel() {
        let x: Vec<f64> = (0..2 * 3 * 4).map(|i| ((i * 7) % 11) as f64 * 0.3 - 1.0).collect();
        let (y, _) = batch_norm_forward(&x, [2, 3, 4], &[1.0; 3], &[0.0; 3], None, 1e-5);
        for ch in 0..3 {
            let vals: Vec<f64> = channel_iter(&y, 2, 3, 4, ch).collect();
            let mean = vals.iter().sum::<f64>() / 8.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn constant_channel_collapses_to_beta() {
        let x = vec![3.0f32; 8];
        let (y, _) = batch_norm_forward(&x, [2, 1, 4], &[1.0], &[5.0], None, 1e-5);
        assert!(y.iter().all(|&v| v == 5.0));
    }

    #[test]
    fn fixed_stats_are_affine() {
        let x = vec![-1.0f64, 0.0, 2.0, 3.5];
        let (y, _) = batch_norm_forward(&x, [1, 1, 4], &[2.0], &[1.0], Some((&[0.0], &[1.0])), 0.0);
        assert_eq!(y, vec![-1.0, 1.0, 5.0, 8.0]);
    }
}
