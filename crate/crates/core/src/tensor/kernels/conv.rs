use super::ConvGeometry;
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::gemm::{gemm, MatRef};
use crate::tensor::{Element, Tensor};

/// Gradients of a (transposed) convolution; `None` where not requested.
#[derive(Debug, Default)]
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[derive(Clone, Copy)]
struct Plane {
    channels: usize,
    height: usize,
    width: usize,
}

#[derive(Clone, Copy)]
struct Window {
    kh: usize,
    kw: usize,
    geom: ConvGeometry,
    out_h: usize,
    out_w: usize,
}

/// Valid output-column range `[lo, hi)` for which `ox * stride + offset`
/// lands inside `[0, len)`.
fn valid_range(offset: isize, stride: usize, len: usize, out: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let last = len as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = (lo as usize).min(out);
    let hi = (hi.max(0) as usize).min(out);
    (lo, hi.max(lo))
}

/// Unfolds one `[C, H, W]` image into `[C*kh*kw, out_h*out_w]` columns.
fn im2col<T: Element>(x: &[T], p: Plane, win: Window, cols: &mut [T]) {
    let (sh, sw) = win.geom.stride;
    let (ph, pw) = win.geom.padding;
    let (dh, dw) = win.geom.dilation;
    let npix = win.out_h * win.out_w;
    for c in 0..p.channels {
        let src = &x[c * p.height * p.width..(c + 1) * p.height * p.width];
        for ki in 0..win.kh {
            for kj in 0..win.kw {
                let row = (c * win.kh + ki) * win.kw + kj;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                let xoff = (kj * dw) as isize - pw as isize;
                let (lo, hi) = valid_range(xoff, sw, p.width, win.out_w);
                for oy in 0..win.out_h {
                    let iy = (oy * sh + ki * dh) as isize - ph as isize;
                    let drow = &mut dst[oy * win.out_w..(oy + 1) * win.out_w];
                    if iy < 0 || iy >= p.height as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * p.width..(iy as usize + 1) * p.width];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    if sw == 1 {
                        let start = (lo as isize + xoff) as usize;
                        drow[lo..hi].copy_from_slice(&srow[start..start + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            drow[ox] = srow[(ox as isize * sw as isize + xoff) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Folds columns back, accumulating into a zero-initialised `[C, H, W]`.
fn col2im<T: Element>(cols: &[T], p: Plane, win: Window, x: &mut [T]) {
    let (sh, sw) = win.geom.stride;
    let (ph, pw) = win.geom.padding;
    let (dh, dw) = win.geom.dilation;
    let npix = win.out_h * win.out_w;
    for c in 0..p.channels {
        let dst = &mut x[c * p.height * p.width..(c + 1) * p.height * p.width];
        for ki in 0..win.kh {
            for kj in 0..win.kw {
                let row = (c * win.kh + ki) * win.kw + kj;
                let src = &cols[row * npix..(row + 1) * npix];
                let xoff = (kj * dw) as isize - pw as isize;
                let (lo, hi) = valid_range(xoff, sw, p.width, win.out_w);
                for oy in 0..win.out_h {
                    let iy = (oy * sh + ki * dh) as isize - ph as isize;
                    if iy < 0 || iy >= p.height as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * p.width..(iy as usize + 1) * p.width];
                    let srow = &src[oy * win.out_w..(oy + 1) * win.out_w];
                    for ox in lo..hi {
                        let ix = (ox as isize * sw as isize + xoff) as usize;
                        drow[ix] = drow[ix] + srow[ox];
                    }
                }
            }
        }
    }
}

fn is_pointwise(win: &Window) -> bool {
    win.kh == 1
        && win.kw == 1
        && win.geom.stride == (1, 1)
        && win.geom.padding == (0, 0)
}

fn check_positive(op: &'static str, dims: &[usize]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::shape(op, format!("zero-sized dimension in {dims:?}")));
    }
    Ok(())
}

fn check_bias<T: Element>(op: &'static str, bias: Option<&Tensor<T>>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(
                op,
                format!("bias shape {:?} does not match {cout} output channels", b.shape()),
            ));
        }
    }
    Ok(())
}

fn add_bias<T: Element>(out: &mut [T], bias: &[T], npix: usize) {
    for (c, plane) in out.chunks_mut(npix).enumerate() {
        let b = bias[c % bias.len()];
        plane.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn bias_grad<T: Element>(dy: &[T], n: usize, cout: usize, npix: usize) -> Vec<T> {
    let mut db = vec![T::zero(); cout];
    for s in 0..n {
        for (c, acc) in db.iter_mut().enumerate() {
            let off = (s * cout + c) * npix;
            *acc = *acc + dy[off..off + npix].iter().copied().sum::<T>();
        }
    }
    db
}

/// Sums per-sample partials in sample order so the result never depends on
/// how the partials were scheduled.
fn ordered_sum<T: Element>(parts: Vec<Vec<T>>) -> Vec<T> {
    let mut it = parts.into_iter();
    let mut acc = it.next().unwrap_or_default();
    for p in it {
        acc.iter_mut().zip(&p).for_each(|(a, b)| *a = *a + *b);
    }
    acc
}

/// Direct 2-D cross-correlation with zero padding.
///
/// `input` is `[N, Cin, H, W]`, `weight` is `[Cout, Cin, kh, kw]`.
pub fn conv2d_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d";
    let [n, cin, h, w] = input.dims4(OP)?;
    let [cout, wcin, kh, kw] = weight.dims4(OP)?;
    check_positive(OP, &[n, cin, h, w, cout, kh, kw])?;
    if wcin != cin {
        return Err(Error::shape(
            OP,
            format!("input channels: input has {cin}, weight expects {wcin}"),
        ));
    }
    check_bias(OP, bias, cout)?;
    let (oh, ow) = geom.conv_output(OP, (h, w), (kh, kw))?;
    let plane = Plane { channels: cin, height: h, width: w };
    let win = Window { kh, kw, geom, out_h: oh, out_w: ow };
    let k = cin * kh * kw;
    let npix = oh * ow;
    let wmat = MatRef::rows(weight.data(), cout, k);
    let x = input.data();
    let mut out = vec![T::zero(); n * cout * npix];
    parallel::for_each_chunk(&mut out, cout * npix, |s, y| {
        let xs = &x[s * cin * h * w..(s + 1) * cin * h * w];
        if is_pointwise(&win) {
            gemm(wmat, MatRef::rows(xs, k, npix), T::zero(), y);
        } else {
            let mut cols = vec![T::zero(); k * npix];
            im2col(xs, plane, win, &mut cols);
            gemm(wmat, MatRef::rows(&cols, k, npix), T::zero(), y);
        }
        if let Some(b) = bias {
            add_bias(y, b.data(), npix);
        }
    });
    Tensor::new(vec![n, cout, oh, ow], out)
}

pub fn conv2d_backward<T: Element>(
    grad_out: &[T],
    input: &Tensor<T>,
    weight: &Tensor<T>,
    geom: ConvGeometry,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    const OP: &str = "conv2d_backward";
    let [n, cin, h, w] = input.dims4(OP)?;
    let [cout, _, kh, kw] = weight.dims4(OP)?;
    let (oh, ow) = geom.conv_output(OP, (h, w), (kh, kw))?;
    let plane = Plane { channels: cin, height: h, width: w };
    let win = Window { kh, kw, geom, out_h: oh, out_w: ow };
    let k = cin * kh * kw;
    let npix = oh * ow;
    let in_len = cin * h * w;
    let x = input.data();
    let mut grads = ConvGrads::default();

    if need.0 {
        let wt = MatRef::transposed(weight.data(), k, cout);
        let mut dx = vec![T::zero(); n * in_len];
        parallel::for_each_chunk(&mut dx, in_len, |s, dxs| {
            let dys = MatRef::rows(&grad_out[s * cout * npix..(s + 1) * cout * npix], cout, npix);
            if is_pointwise(&win) {
                gemm(wt, dys, T::zero(), dxs);
            } else {
                let mut dcols = vec![T::zero(); k * npix];
                gemm(wt, dys, T::zero(), &mut dcols);
                col2im(&dcols, plane, win, dxs);
            }
        });
        grads.input = Some(dx);
    }
    if need.1 {
        let parts = parallel::map_range(n, |s| {
            let xs = &x[s * in_len..(s + 1) * in_len];
            let dys = MatRef::rows(&grad_out[s * cout * npix..(s + 1) * cout * npix], cout, npix);
            let mut dw = vec![T::zero(); cout * k];
            if is_pointwise(&win) {
                gemm(dys, MatRef::transposed(xs, npix, k), T::zero(), &mut dw);
            } else {
                let mut cols = vec![T::zero(); k * npix];
                im2col(xs, plane, win, &mut cols);
                gemm(dys, MatRef::transposed(&cols, npix, k), T::zero(), &mut dw);
            }
            dw
        });
        grads.weight = Some(ordered_sum(parts));
    }
    if need.2 {
        grads.bias = Some(bias_grad(grad_out, n, cout, npix));
    }
    Ok(grads)
}

/// Transposed convolution (the adjoint of [`conv2d_forward`] w.r.t. its
/// input). `weight` is `[Cin, Cout, kh, kw]`.
pub fn conv_transpose2d_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    const OP: &str = "conv_transpose2d";
    let [n, cin, h, w] = input.dims4(OP)?;
    let [wcin, cout, kh, kw] = weight.dims4(OP)?;
    check_positive(OP, &[n, cin, h, w, cout, kh, kw])?;
    if wcin != cin {
        return Err(Error::shape(
            OP,
            format!("input channels: input has {cin}, weight expects {wcin}"),
        ));
    }
    check_bias(OP, bias, cout)?;
    let (oh, ow) = geom.transposed_output(OP, (h, w), (kh, kw))?;
    // Geometry seen from the output side: a forward conv from (oh, ow) lands on (h, w).
    let plane = Plane { channels: cout, height: oh, width: ow };
    let win = Window { kh, kw, geom, out_h: h, out_w: w };
    let k = cout * kh * kw;
    let npix = h * w;
    let out_len = cout * oh * ow;
    let wt = MatRef::transposed(weight.data(), k, cin);
    let x = input.data();
    let mut out = vec![T::zero(); n * out_len];
    parallel::for_each_chunk(&mut out, out_len, |s, y| {
        let xs = MatRef::rows(&x[s * cin * npix..(s + 1) * cin * npix], cin, npix);
        if is_pointwise(&win) {
            gemm(wt, xs, T::zero(), y);
        } else {
            let mut cols = vec![T::zero(); k * npix];
            gemm(wt, xs, T::zero(), &mut cols);
            col2im(&cols, plane, win, y);
        }
        if let Some(b) = bias {
            add_bias(y, b.data(), oh * ow);
        }
    });
    Tensor::new(vec![n, cout, oh, ow], out)
}

pub fn conv_transpose2d_backward<T: Element>(
    grad_out: &[T],
    input: &Tensor<T>,
    weight: &Tensor<T>,
    geom: ConvGeometry,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    const OP: &str = "conv_transpose2d_backward";
    let [n, cin, h, w] = input.dims4(OP)?;
    let [_, cout, kh, kw] = weight.dims4(OP)?;
    let (oh, ow) = geom.transposed_output(OP, (h, w), (kh, kw))?;
    let plane = Plane { channels: cout, height: oh, width: ow };
    let win = Window { kh, kw, geom, out_h: h, out_w: w };
    let k = cout * kh * kw;
    let npix = h * w;
    let out_len = cout * oh * ow;
    let x = input.data();
    let mut grads = ConvGrads::default();

    let unfold = |s: usize| -> Vec<T> {
        let dys = &grad_out[s * out_len..(s + 1) * out_len];
        if is_pointwise(&win) {
            dys.to_vec()
        } else {
            let mut cols = vec![T::zero(); k * npix];
            im2col(dys, plane, win, &mut cols);
            cols
        }
    };

    if need.0 {
        let wmat = MatRef::rows(weight.data(), cin, k);
        let mut dx = vec![T::zero(); n * cin * npix];
        parallel::for_each_chunk(&mut dx, cin * npix, |s, dxs| {
            let cols = unfold(s);
            gemm(wmat, MatRef::rows(&cols, k, npix), T::zero(), dxs);
        });
        grads.input = Some(dx);
    }
    if need.1 {
        let parts = parallel::map_range(n, |s| {
            let cols = unfold(s);
            let xs = MatRef::rows(&x[s * cin * npix..(s + 1) * cin * npix], cin, npix);
            let mut dw = vec![T::zero(); cin * k];
            gemm(xs, MatRef::transposed(&cols, npix, k), T::zero(), &mut dw);
            dw
        });
        grads.weight = Some(ordered_sum(parts));
    }
    if need.2 {
        grads.bias = Some(bias_grad(grad_out, n, cout, oh * ow));
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Nested-loop direct convolution, the reference the GEMM path is checked
    /// against.
    fn direct_conv(
        x: &Tensor<f64>,
        wt: &Tensor<f64>,
        g: ConvGeometry,
    ) -> (Vec<f64>, usize, usize) {
        let [n, cin, h, w] = x.dims4("t").unwrap();
        let [cout, _, kh, kw] = wt.dims4("t").unwrap();
        let oh = (h + 2 * g.padding.0 - g.dilation.0 * (kh - 1) - 1) / g.stride.0 + 1;
        let ow = (w + 2 * g.padding.1 - g.dilation.1 * (kw - 1) - 1) / g.stride.1 + 1;
        let mut out = vec![0.0; n * cout * oh * ow];
        for s in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * g.stride.0 + i * g.dilation.0) as isize
                                        - g.padding.0 as isize;
                                    let ix = (ox * g.stride.1 + j * g.dilation.1) as isize
                                        - g.padding.1 as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()[((s * cin + ci) * h + iy as usize) * w
                                        + ix as usize]
                                        * wt.data()[((co * cin + ci) * kh + i) * kw + j];
                                }
                            }
                        }
                        out[((s * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        (out, oh, ow)
    }

    /// Scatter-accumulate transposed convolution.
    fn scatter_conv_t(x: &Tensor<f64>, wt: &Tensor<f64>, g: ConvGeometry) -> Vec<f64> {
        let [n, cin, h, w] = x.dims4("t").unwrap();
        let [_, cout, kh, kw] = wt.dims4("t").unwrap();
        let (oh, ow) = g.transposed_output("t", (h, w), (kh, kw)).unwrap();
        let mut out = vec![0.0; n * cout * oh * ow];
        for s in 0..n {
            for ci in 0..cin {
                for iy in 0..h {
                    for ix in 0..w {
                        let v = x.data()[((s * cin + ci) * h + iy) * w + ix];
                        for co in 0..cout {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let oy = (iy * g.stride.0 + i * g.dilation.0) as isize
                                        - g.padding.0 as isize;
                                    let ox = (ix * g.stride.1 + j * g.dilation.1) as isize
                                        - g.padding.1 as isize;
                                    if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                        continue;
                                    }
                                    out[((s * cout + co) * oh + oy as usize) * ow + ox as usize] +=
                                        v * wt.data()[((ci * cout + co) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape.to_vec(), |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn all_ones_3x3_gives_nine() {
        let x = Tensor::<f32>::full([1, 1, 3, 3], 1.0);
        let w = Tensor::<f32>::full([1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &w, None, ConvGeometry::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = pseudo(&[2, 1, 4, 5], 3);
        let w = Tensor::full([1, 1, 1, 1], 1.0);
        let y = conv2d_forward(&x, &w, None, ConvGeometry::default()).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dilation_two_on_5x5_collapses_to_one_pixel() {
        let x = pseudo(&[1, 1, 5, 5], 4);
        let w = pseudo(&[1, 1, 3, 3], 5);
        let g = ConvGeometry::default().with_dilation(2, 2);
        let y = conv2d_forward(&x, &w, None, g).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        let (want, _, _) = direct_conv(&x, &w, g);
        assert!((y.data()[0] - want[0]).abs() < 1e-12);
    }

    #[test]
    fn gemm_path_matches_direct_loops() {
        let cases = [
            (ConvGeometry::new(1, 1), (3, 3)),
            (ConvGeometry::new(2, 1), (3, 3)),
            (ConvGeometry::default().with_padding(1, 0), (3, 1)),
            (ConvGeometry::default().with_padding(0, 2).with_dilation(1, 2), (1, 3)),
            (ConvGeometry::new(2, 1), (4, 4)),
            (ConvGeometry::default(), (1, 1)),
        ];
        for (i, (g, (kh, kw))) in cases.into_iter().enumerate() {
            let x = pseudo(&[2, 3, 7, 8], 10 + i as u64);
            let w = pseudo(&[4, 3, kh, kw], 20 + i as u64);
            let y = conv2d_forward(&x, &w, None, g).unwrap();
            let (want, oh, ow) = direct_conv(&x, &w, g);
            assert_eq!(y.shape(), &[2, 4, oh, ow]);
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "case {i}");
            }
        }
    }

    #[test]
    fn dilation_wider_than_a_tiny_map() {
        for (h, w) in [(1, 1), (1, 3), (2, 1)] {
            let g = ConvGeometry::default().with_padding(0, 4).with_dilation(1, 4);
            let x = pseudo(&[1, 2, h, w], 3);
            let wt = pseudo(&[2, 2, 1, 3], 4);
            let y = conv2d_forward(&x, &wt, None, g).unwrap();
            let (want, _, _) = direct_conv(&x, &wt, g);
            assert_eq!(y.numel(), want.len());
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{h}x{w}");
            }
        }
    }

    #[test]
    fn transposed_single_pixel_scatters_kernel() {
        let x = Tensor::<f32>::full([1, 1, 1, 1], 1.0);
        let w = Tensor::<f32>::full([1, 1, 2, 2], 1.0);
        let y = conv_transpose2d_forward(&x, &w, None, ConvGeometry::new(2, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0; 4]);
    }

    #[test]
    fn transposed_matches_scatter_oracle() {
        let cases = [
            ConvGeometry::new(2, 1).with_output_padding(1, 1),
            ConvGeometry::new(1, 1),
            ConvGeometry::new(2, 0),
        ];
        for (i, g) in cases.into_iter().enumerate() {
            let x = pseudo(&[2, 3, 4, 5], 30 + i as u64);
            let w = pseudo(&[3, 2, 3, 3], 40 + i as u64);
            let y = conv_transpose2d_forward(&x, &w, None, g).unwrap();
            let want = scatter_conv_t(&x, &w, g);
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "case {i}");
            }
        }
    }

    #[test]
    fn transposed_output_size_formula() {
        let g = ConvGeometry::new(2, 1).with_output_padding(1, 1);
        assert_eq!(g.transposed_output("t", (8, 16), (3, 3)).unwrap(), (16, 32));
        let g = ConvGeometry::new(2, 0);
        assert_eq!(g.transposed_output("t", (32, 64), (2, 2)).unwrap(), (64, 128));
    }

    #[test]
    fn adjointness_of_conv_and_transpose() {
        for (i, g) in [ConvGeometry::new(1, 1), ConvGeometry::new(2, 1), ConvGeometry::new(2, 0)]
            .into_iter()
            .enumerate()
        {
            let x = pseudo(&[2, 3, 6, 6], 50 + i as u64);
            let w = pseudo(&[4, 3, 3, 3], 60 + i as u64);
            let cx = conv2d_forward(&x, &w, None, g).unwrap();
            let y = pseudo(cx.shape(), 70 + i as u64);
            // Pick the output padding that recovers the original size.
            let [_, _, oh, ow] = cx.dims4("t").unwrap();
            let full_h = (oh - 1) * g.stride.0 + 3 - 2 * g.padding.0;
            let full_w = (ow - 1) * g.stride.1 + 3 - 2 * g.padding.1;
            let gt = g.with_output_padding(6 - full_h, 6 - full_w);
            let ty = conv_transpose2d_forward(&y, &w, None, gt).unwrap();
            assert_eq!(ty.shape(), x.shape());
            let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(rhs.abs()), "case {i}");
        }
    }

    #[test]
    fn channel_mismatch_names_dimension() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros([1, 3, 3, 3]);
        let err = conv2d_forward(&x, &w, None, ConvGeometry::default()).unwrap_err();
        assert!(err.to_string().contains("input channels"));
        let big = Tensor::<f32>::zeros([1, 2, 5, 5]);
        let err = conv2d_forward(&Tensor::zeros([1, 2, 2, 2]), &big, None, ConvGeometry::default())
            .unwrap_err();
        assert!(err.to_string().contains("height"));
    }
}
