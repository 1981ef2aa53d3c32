//! 2-d convolution: an im2col/GEMM fast path and a naive direct path.
//!
//! The two paths share nothing but their signature; the direct path is the
//! reference the fast path is checked against across the stride/dilation/
//! padding grid.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rayon::prelude::*;

/// Spatial padding policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial size = ceil(input / stride); asymmetric padding puts
    /// the extra pixel at bottom/right.
    Same,
    /// No padding; errors when the kernel does not fit.
    Valid,
}

/// Convolution hyperparameters (kernel size comes from the weight tensor).
#[derive(Clone, Copy, Debug)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            dilation: 1,
            padding: Padding::Same,
        }
    }
}

impl Conv2dSpec {
    pub fn new(stride: usize, dilation: usize, padding: Padding) -> Self {
        Conv2dSpec {
            stride,
            dilation,
            padding,
        }
    }
}

/// Output spatial size plus top/left padding for the given input and kernel.
pub fn conv_output_hw(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: &Conv2dSpec,
) -> Result<(usize, usize, usize, usize)> {
    if spec.stride < 1 || spec.dilation < 1 || kh < 1 || kw < 1 {
        return Err(Error::InvalidConfig {
            field: "conv2d".into(),
            reason: format!(
                "stride {}, dilation {}, kernel {}x{} must all be >= 1",
                spec.stride, spec.dilation, kh, kw
            ),
        });
    }
    let eff_kh = (kh - 1) * spec.dilation + 1;
    let eff_kw = (kw - 1) * spec.dilation + 1;
    match spec.padding {
        Padding::Same => {
            let oh = h.div_ceil(spec.stride);
            let ow = w.div_ceil(spec.stride);
            let pad_h = ((oh - 1) * spec.stride + eff_kh).saturating_sub(h);
            let pad_w = ((ow - 1) * spec.stride + eff_kw).saturating_sub(w);
            Ok((oh, ow, pad_h / 2, pad_w / 2))
        }
        Padding::Valid => {
            if h < eff_kh || w < eff_kw {
                return Err(Error::EmptySpatialOutput { h, w, eff_kh, eff_kw });
            }
            let oh = (h - eff_kh) / spec.stride + 1;
            let ow = (w - eff_kw) / spec.stride + 1;
            Ok((oh, ow, 0, 0))
        }
    }
}

fn check_channels<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<()> {
    let [_, cin, _, _] = input.dims4()?;
    let [_, wcin, _, _] = weight.dims4()?;
    if cin != wcin {
        return Err(Error::ChannelMismatch {
            input: cin,
            expected: wcin,
        });
    }
    Ok(())
}

fn check_bias<T: Scalar>(bias: Option<&Tensor<T>>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::ShapeMismatch(format!(
                "bias shape {:?}, expected [{cout}]",
                b.shape()
            )));
        }
    }
    Ok(())
}

/// Column-tile size: cap the im2col buffer at ~4M elements.
fn tile_rows(ckk: usize, ow: usize, oh: usize) -> usize {
    let cap = 4_000_000usize;
    (cap / ckk.max(1) / ow.max(1)).clamp(1, oh)
}

/// Fill one im2col tile for output rows `[r0, r1)` of batch element `n`.
#[allow(clippy::too_many_arguments)]
fn fill_col<T: Scalar>(
    col: &mut [T],
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: &Conv2dSpec,
    pad_top: usize,
    pad_left: usize,
    ow: usize,
    r0: usize,
    r1: usize,
) {
    let tcols = (r1 - r0) * ow;
    for ci in 0..cin {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut col[row * tcols..(row + 1) * tcols];
                let mut idx = 0;
                for oy in r0..r1 {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - pad_top as isize;
                    if iy < 0 || iy >= h as isize {
                        for _ in 0..ow {
                            dst[idx] = T::ZERO;
                            idx += 1;
                        }
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize
                            - pad_left as isize;
                        dst[idx] = if ix >= 0 && (ix as usize) < w {
                            src_row[ix as usize]
                        } else {
                            T::ZERO
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

const PAR_FLOPS: usize = 1 << 20;

/// out[i, 0..n] = a[i, 0..k] . b[0..k, :] with an output row stride, so a
/// column tile can be written straight into the full output plane.
fn matmul_strided<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    out_stride: usize,
) {
    let body = |i: usize, row: &mut [T]| {
        row[..n].fill(T::ZERO);
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == T::ZERO {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row[..n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOPS {
        out.par_chunks_mut(out_stride)
            .take(m)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(out_stride).take(m).enumerate() {
            body(i, row);
        }
    }
}

/// out[m, n] += a[m, k] . b[n, k]^T (dot products over rows of both).
fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let body = |i: usize, row: &mut [T]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (av, bv) in arow.iter().zip(brow) {
                acc += *av * *bv;
            }
            *o += acc;
        }
    };
    if m * k * n >= PAR_FLOPS {
        out.par_chunks_mut(n)
            .take(m)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).take(m).enumerate() {
            body(i, row);
        }
    }
}

/// out[m, n] = a[k, m]^T . b[k, n].
fn matmul_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
    let body = |i: usize, row: &mut [T]| {
        row.fill(T::ZERO);
        for kk in 0..k {
            let av = a[kk * m + i];
            if av == T::ZERO {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOPS {
        out.par_chunks_mut(n)
            .take(m)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).take(m).enumerate() {
            body(i, row);
        }
    }
}

/// Fast conv2d: lowered patch-matrix multiplication, tiled over output rows.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &Conv2dSpec,
) -> Result<Tensor<T>> {
    check_channels(input, weight)?;
    let [n, cin, h, w] = input.dims4()?;
    let [cout, _, kh, kw] = weight.dims4()?;
    check_bias(bias, cout)?;
    let (oh, ow, pad_top, pad_left) = conv_output_hw(h, w, kh, kw, spec)?;

    let ckk = cin * kh * kw;
    let tile = tile_rows(ckk, ow, oh);
    let mut out = Tensor::zeros(vec![n, cout, oh, ow]);
    let mut col = vec![T::ZERO; ckk * tile * ow];

    for ni in 0..n {
        let in_plane = &input.data()[ni * cin * h * w..(ni + 1) * cin * h * w];
        let mut r0 = 0;
        while r0 < oh {
            let r1 = (r0 + tile).min(oh);
            let tcols = (r1 - r0) * ow;
            fill_col(
                &mut col[..ckk * tcols],
                in_plane,
                cin,
                h,
                w,
                kh,
                kw,
                spec,
                pad_top,
                pad_left,
                ow,
                r0,
                r1,
            );
            // Each output-channel row is contiguous inside the [Cout, OH*OW]
            // plane; the tile lands at column offset r0*ow with stride oh*ow.
            let out_off = ni * cout * oh * ow + r0 * ow;
            matmul_strided(
                weight.data(),
                &col[..ckk * tcols],
                &mut out.data_mut()[out_off..],
                cout,
                ckk,
                tcols,
                oh * ow,
            );
            r0 = r1;
        }
        if let Some(b) = bias {
            let out_data = out.data_mut();
            for co in 0..cout {
                let bv = b.data()[co];
                let base = (ni * cout + co) * oh * ow;
                for v in &mut out_data[base..base + oh * ow] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] w.r.t. input, weight, and bias.
pub(crate) fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    spec: &Conv2dSpec,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let [n, cin, h, w] = input.dims4()?;
    let [cout, _, kh, kw] = weight.dims4()?;
    let (oh, ow, pad_top, pad_left) = conv_output_hw(h, w, kh, kw, spec)?;
    debug_assert_eq!(dy.shape(), [n, cout, oh, ow]);

    let ckk = cin * kh * kw;
    let tile = tile_rows(ckk, ow, oh);
    let mut dx = Tensor::zeros(vec![n, cin, h, w]);
    let mut dw = Tensor::zeros(weight.shape().to_vec());
    let mut db = has_bias.then(|| Tensor::zeros(vec![cout]));

    let mut col = vec![T::ZERO; ckk * tile * ow];
    let mut dy_tile = vec![T::ZERO; cout * tile * ow];
    let mut dcol = vec![T::ZERO; ckk * tile * ow];

    for ni in 0..n {
        let in_plane = &input.data()[ni * cin * h * w..(ni + 1) * cin * h * w];
        let mut r0 = 0;
        while r0 < oh {
            let r1 = (r0 + tile).min(oh);
            let tcols = (r1 - r0) * ow;
            fill_col(
                &mut col[..ckk * tcols],
                in_plane,
                cin,
                h,
                w,
                kh,
                kw,
                spec,
                pad_top,
                pad_left,
                ow,
                r0,
                r1,
            );
            for co in 0..cout {
                let src = &dy.data()[((ni * cout + co) * oh + r0) * ow..][..tcols];
                dy_tile[co * tcols..(co + 1) * tcols].copy_from_slice(src);
            }
            matmul_nt_acc(
                &dy_tile[..cout * tcols],
                &col[..ckk * tcols],
                dw.data_mut(),
                cout,
                tcols,
                ckk,
            );
            matmul_tn(
                weight.data(),
                &dy_tile[..cout * tcols],
                &mut dcol[..ckk * tcols],
                cout,
                ckk,
                tcols,
            );
            // col2im: scatter the tile back into dx, skipping padding.
            let dx_plane = &mut dx.data_mut()[ni * cin * h * w..(ni + 1) * cin * h * w];
            for ci in 0..cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let row = (ci * kh + ky) * kw + kx;
                        let src = &dcol[row * tcols..(row + 1) * tcols];
                        let mut idx = 0;
                        for oy in r0..r1 {
                            let iy = (oy * spec.stride + ky * spec.dilation) as isize
                                - pad_top as isize;
                            if iy < 0 || iy >= h as isize {
                                idx += ow;
                                continue;
                            }
                            let base = ci * h * w + iy as usize * w;
                            for ox in 0..ow {
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                    - pad_left as isize;
                                if ix >= 0 && (ix as usize) < w {
                                    dx_plane[base + ix as usize] += src[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                }
            }
            r0 = r1;
        }
        if let Some(db) = db.as_mut() {
            for co in 0..cout {
                let mut acc = T::ZERO;
                for v in &dy.data()[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow] {
                    acc += *v;
                }
                db.data_mut()[co] += acc;
            }
        }
    }
    Ok((dx, dw, db))
}

/// Naive direct convolution: seven nested loops, no lowering. Reference
/// path; shares nothing with [`conv2d`].
pub fn conv2d_direct<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &Conv2dSpec,
) -> Result<Tensor<T>> {
    check_channels(input, weight)?;
    let [n, cin, h, w] = input.dims4()?;
    let [cout, _, kh, kw] = weight.dims4()?;
    check_bias(bias, cout)?;
    let (oh, ow, pad_top, pad_left) = conv_output_hw(h, w, kh, kw, spec)?;

    let mut out = Tensor::zeros(vec![n, cout, oh, ow]);
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(T::ZERO, |b| b.data()[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride + ky * spec.dilation) as isize
                                    - pad_top as isize;
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                    - pad_left as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += input.at4(ni, ci, iy as usize, ix as usize)
                                    * weight.at4(co, ci, ky, kx);
                            }
                        }
                    }
                    out.set4(ni, co, oy, ox, acc);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_kernel_scales() {
        // 1x1x3x3 ones through a 1x1 kernel of [2] -> all twos.
        let x = Tensor::<f64>::ones(vec![1, 1, 3, 3]);
        let w = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d(&x, &w, None, &Conv2dSpec::default()).unwrap();
        assert_eq!(y.shape(), [1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn stride_two_subsamples_constant() {
        let x = Tensor::<f64>::ones(vec![1, 1, 4, 4]);
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let spec = Conv2dSpec::new(2, 1, Padding::Same);
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dilated_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::rand_uniform(vec![1, 1, 5, 5], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::rand_uniform(vec![1, 1, 3, 3], -1.0, 1.0, &mut rng);
        let spec = Conv2dSpec::new(1, 2, Padding::Same);
        let fast = conv2d(&x, &w, None, &spec).unwrap();
        let direct = conv2d_direct(&x, &w, None, &spec).unwrap();
        for (a, b) in fast.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fast_matches_direct_over_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for &stride in &[1usize, 2] {
            for &dilation in &[1usize, 2] {
                for &padding in &[Padding::Same, Padding::Valid] {
                    for &hw in &[5usize, 7, 9] {
                        let x =
                            Tensor::<f64>::rand_uniform(vec![2, 3, hw, hw], -1.0, 1.0, &mut rng);
                        let w =
                            Tensor::<f64>::rand_uniform(vec![4, 3, 3, 3], -1.0, 1.0, &mut rng);
                        let b = Tensor::<f64>::rand_uniform(vec![4], -1.0, 1.0, &mut rng);
                        let spec = Conv2dSpec::new(stride, dilation, padding);
                        let fast = conv2d(&x, &w, Some(&b), &spec).unwrap();
                        let direct = conv2d_direct(&x, &w, Some(&b), &spec).unwrap();
                        assert_eq!(fast.shape(), direct.shape());
                        for (a, bb) in fast.data().iter().zip(direct.data()) {
                            assert!((a - bb).abs() < 1e-10, "{a} vs {bb} at s{stride} d{dilation}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn linearity_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::rand_uniform(vec![1, 2, 6, 6], -1.0, 1.0, &mut rng);
        let y = Tensor::<f64>::rand_uniform(vec![1, 2, 6, 6], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::rand_uniform(vec![3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let (a, b) = (0.7, -1.3);
        let spec = Conv2dSpec::default();
        let mixed = {
            let mut m = x.scale(a);
            m.add_assign(&y.scale(b)).unwrap();
            conv2d(&m, &w, None, &spec).unwrap()
        };
        let separate = {
            let mut m = conv2d(&x, &w, None, &spec).unwrap().scale(a);
            m.add_assign(&conv2d(&y, &w, None, &spec).unwrap().scale(b))
                .unwrap();
            m
        };
        for (p, q) in mixed.data().iter().zip(separate.data()) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn valid_padding_rejects_undersized_input() {
        let x = Tensor::<f64>::ones(vec![1, 1, 2, 2]);
        let w = Tensor::<f64>::ones(vec![1, 1, 3, 3]);
        let spec = Conv2dSpec::new(1, 1, Padding::Valid);
        assert!(matches!(
            conv2d(&x, &w, None, &spec),
            Err(Error::EmptySpatialOutput { .. })
        ));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::<f64>::ones(vec![1, 2, 4, 4]);
        let w = Tensor::<f64>::ones(vec![1, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w, None, &Conv2dSpec::default()),
            Err(Error::ChannelMismatch { .. })
        ));
    }
}
