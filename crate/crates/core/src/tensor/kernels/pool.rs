use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{Element, Tensor};

fn halved_dims<T: Element>(op: &'static str, x: &Tensor<T>) -> Result<[usize; 4]> {
    let [n, c, h, w] = x.dims4(op)?;
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::shape(
            op,
            format!("2x2/2 pooling needs even spatial dims, got {h}x{w}"),
        ));
    }
    Ok([n, c, h, w])
}

/// 2x2 stride-2 max pool. Returns the output and, per output element, the
/// flat input index of the winner (first in scan order on ties).
pub fn max_pool2x2_forward<T: Element>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let [n, c, h, w] = halved_dims("max_pool2d", x)?;
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut arg = vec![0u32; out.len()];
    parallel::for_each_chunk2(&mut out, oh * ow, &mut arg, oh * ow, |plane, y, a| {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                y[oy * ow + ox] = src[best];
                a[oy * ow + ox] = best as u32;
            }
        }
    });
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

pub fn max_pool2x2_backward<T: Element>(grad_out: &[T], argmax: &[u32], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (g, &i) in grad_out.iter().zip(argmax) {
        dx[i as usize] = dx[i as usize] + *g;
    }
    dx
}

pub fn avg_pool2x2_forward<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = halved_dims("avg_pool2d", x)?;
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); n * c * oh * ow];
    parallel::for_each_chunk(&mut out, oh * ow, |plane, y| {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i = base + 2 * oy * w + 2 * ox;
                y[oy * ow + ox] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
            }
        }
    });
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn avg_pool2x2_backward<T: Element>(grad_out: &[T], input_shape: [usize; 4]) -> Vec<T> {
    let [n, c, h, w] = input_shape;
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut dx = vec![T::zero(); n * c * h * w];
    parallel::for_each_chunk(&mut dx, h * w, |plane, d| {
        let g = &grad_out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..h {
            for x in 0..w {
                d[y * w + x] = g[(y / 2) * ow + x / 2] * quarter;
            }
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_example() {
        let x = Tensor::<f32>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (m, arg) = max_pool2x2_forward(&x).unwrap();
        assert_eq!(m.data(), &[4.0]);
        assert_eq!(avg_pool2x2_forward(&x).unwrap().data(), &[2.5]);
        assert_eq!(max_pool2x2_backward(&[1.0f32], &arg, 4), vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(avg_pool2x2_backward(&[1.0f32], [1, 1, 2, 2]), vec![0.25; 4]);
    }

    #[test]
    fn constant_input_is_fixed_point() {
        let x = Tensor::<f32>::full([2, 3, 4, 6], 1.5);
        assert!(max_pool2x2_forward(&x).unwrap().0.data().iter().all(|&v| v == 1.5));
        assert!(avg_pool2x2_forward(&x).unwrap().data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn ties_route_to_first_index() {
        let x = Tensor::<f32>::full([1, 1, 2, 2], 7.0);
        let (_, arg) = max_pool2x2_forward(&x).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn odd_dims_rejected() {
        assert!(max_pool2x2_forward(&Tensor::<f32>::zeros([1, 1, 3, 4])).is_err());
        assert!(avg_pool2x2_forward(&Tensor::<f32>::zeros([1, 1, 4, 5])).is_err());
    }
}
