//! Forward and backward kernels for the non-convolution ops.
//!
//! Pure functions over [`Tensor`] values; the tape wraps these and wires up
//! gradient flow.

use super::{broadcast_shape, broadcast_strides, strides_of, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};

/// Per-channel running statistics for batch normalization (not trainable).
#[derive(Clone, Debug)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::ZERO; channels],
            var: vec![T::ONE; channels],
            initialized: false,
        }
    }
}

/// Batch statistics saved by the train-mode forward for the backward pass.
#[derive(Clone, Debug)]
pub struct BnSaved<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

fn bn_apply<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4()?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "batch_norm gamma/beta length {}/{} vs {c} channels",
            gamma.len(),
            beta.len()
        )));
    }
    let mut out = Tensor::zeros(input.shape().to_vec());
    let plane = h * w;
    for ni in 0..n {
        for ci in 0..c {
            let g = gamma.data()[ci] * inv_std[ci];
            let b = beta.data()[ci];
            let m = mean[ci];
            let base = (ni * c + ci) * plane;
            let src = &input.data()[base..base + plane];
            let dst = &mut out.data_mut()[base..base + plane];
            for (o, &x) in dst.iter_mut().zip(src) {
                *o = (x - m) * g + b;
            }
        }
    }
    Ok(out)
}

/// Train-mode batch norm: normalize with batch moments and update running
/// statistics in place.
pub(crate) fn bn_forward_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut RunningStats<T>,
    momentum: T,
    eps: T,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let [n, c, h, w] = input.dims4()?;
    let m = n * h * w;
    if m == 0 {
        return Err(Error::EmptyBatch);
    }
    let count = s::<T>(m as f64);
    let mut mean = vec![T::ZERO; c];
    let mut var = vec![T::ZERO; c];
    let plane = h * w;
    for ci in 0..c {
        let mut sum = T::ZERO;
        let mut sq = T::ZERO;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for &x in &input.data()[base..base + plane] {
                sum += x;
                sq += x * x;
            }
        }
        let mu = sum / count;
        mean[ci] = mu;
        var[ci] = (sq / count - mu * mu).maxs(T::ZERO);
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();

    if stats.initialized {
        for ci in 0..c {
            stats.mean[ci] = momentum * stats.mean[ci] + (T::ONE - momentum) * mean[ci];
            stats.var[ci] = momentum * stats.var[ci] + (T::ONE - momentum) * var[ci];
        }
    } else {
        stats.mean.copy_from_slice(&mean);
        stats.var.copy_from_slice(&var);
        stats.initialized = true;
    }

    let out = bn_apply(input, gamma, beta, &mean, &inv_std)?;
    Ok((
        out,
        BnSaved {
            mean,
            inv_std,
            train: true,
        },
    ))
}

/// Eval-mode batch norm: normalize with running statistics.
pub(crate) fn bn_forward_eval<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &RunningStats<T>,
    eps: T,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    if !stats.initialized {
        return Err(Error::UninitializedStats);
    }
    let inv_std: Vec<T> = stats.var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
    let out = bn_apply(input, gamma, beta, &stats.mean, &inv_std)?;
    Ok((
        out,
        BnSaved {
            mean: stats.mean.clone(),
            inv_std,
            train: false,
        },
    ))
}

/// Batch-norm backward. Train mode differentiates through the batch
/// moments; eval mode treats them as constants.
pub(crate) fn bn_backward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &BnSaved<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = input.dims4()?;
    let plane = h * w;
    let m = s::<T>((n * plane) as f64);
    let mut dx = Tensor::zeros(input.shape().to_vec());
    let mut dgamma = Tensor::zeros(vec![c]);
    let mut dbeta = Tensor::zeros(vec![c]);

    for ci in 0..c {
        let mu = saved.mean[ci];
        let istd = saved.inv_std[ci];
        let g = gamma.data()[ci];
        let mut sum_dy = T::ZERO;
        let mut sum_dy_xhat = T::ZERO;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in 0..plane {
                let d = dy.data()[base + i];
                let xhat = (input.data()[base + i] - mu) * istd;
                sum_dy += d;
                sum_dy_xhat += d * xhat;
            }
        }
        dgamma.data_mut()[ci] = sum_dy_xhat;
        dbeta.data_mut()[ci] = sum_dy;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in 0..plane {
                let d = dy.data()[base + i];
                let xhat = (input.data()[base + i] - mu) * istd;
                dx.data_mut()[base + i] = if saved.train {
                    g * istd * (d - sum_dy / m - xhat * sum_dy_xhat / m)
                } else {
                    g * istd * d
                };
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

pub(crate) fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.maxs(T::ZERO))
}

/// Subgradient at 0 is 0.
pub(crate) fn relu_backward<T: Scalar>(input: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&x, &d)| if x > T::ZERO { d } else { T::ZERO })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

/// Overflow-safe logistic; output clamped to the open interval (0, 1).
pub(crate) fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let lo = T::eps();
    let hi = T::ONE - T::eps();
    input.map(|x| {
        let y = if x >= T::ZERO {
            T::ONE / (T::ONE + (-x).exp())
        } else {
            let e = x.exp();
            e / (T::ONE + e)
        };
        y.maxs(lo).mins(hi)
    })
}

pub(crate) fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = output
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&y, &d)| d * y * (T::ONE - y))
        .collect();
    Tensor::new(output.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4()?;
    let plane = h * w;
    let inv = T::ONE / s::<T>(plane as f64);
    let mut out = Tensor::zeros(vec![n, c, 1, 1]);
    for i in 0..n * c {
        let mut acc = T::ZERO;
        for &v in &input.data()[i * plane..(i + 1) * plane] {
            acc += v;
        }
        out.data_mut()[i] = acc * inv;
    }
    Ok(out)
}

pub(crate) fn global_avg_pool_backward<T: Scalar>(
    input_shape: &[usize],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let plane = h * w;
    let inv = T::ONE / s::<T>(plane as f64);
    let mut dx = Tensor::zeros(input_shape.to_vec());
    for i in 0..input_shape[0] * input_shape[1] {
        let g = dy.data()[i] * inv;
        for v in &mut dx.data_mut()[i * plane..(i + 1) * plane] {
            *v = g;
        }
    }
    dx
}

pub(crate) fn nearest_upsample<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor < 1 {
        return Err(Error::InvalidConfig {
            field: "nearest_upsample.factor".into(),
            reason: "must be >= 1".into(),
        });
    }
    let [n, c, h, w] = input.dims4()?;
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros(vec![n, c, oh, ow]);
    for plane in 0..n * c {
        let src = &input.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data_mut()[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let iy = oy / factor;
            for ox in 0..ow {
                dst[oy * ow + ox] = src[iy * w + ox / factor];
            }
        }
    }
    Ok(out)
}

/// Gradient of nearest upsampling: sum over each factor x factor block.
pub(crate) fn nearest_upsample_backward<T: Scalar>(
    input_shape: &[usize],
    factor: usize,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (n, c, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = Tensor::zeros(input_shape.to_vec());
    for plane in 0..n * c {
        let src = &dy.data()[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dx.data_mut()[plane * h * w..(plane + 1) * w * h];
        for oy in 0..oh {
            let iy = oy / factor;
            for ox in 0..ow {
                dst[iy * w + ox / factor] += src[oy * ow + ox];
            }
        }
    }
    dx
}

/// Average-pool by an integer factor; inverse of [`nearest_upsample`] on its
/// own output.
pub fn avg_pool_factor<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4()?;
    if factor < 1 || h % factor != 0 || w % factor != 0 {
        return Err(Error::ShapeMismatch(format!(
            "avg_pool_factor {factor} does not divide {h}x{w}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = T::ONE / s::<T>((factor * factor) as f64);
    let mut out = Tensor::zeros(vec![n, c, oh, ow]);
    for plane in 0..n * c {
        let src = &input.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data_mut()[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::ZERO;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += src[(oy * factor + dy) * w + ox * factor + dx];
                    }
                }
                dst[oy * ow + ox] = acc * inv;
            }
        }
    }
    Ok(out)
}

pub(crate) fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, h, w] = a.dims4()?;
    let [nb, cb, hb, wb] = b.dims4()?;
    if n != nb || h != hb || w != wb {
        return Err(Error::ShapeMismatch(format!(
            "concat non-channel dims differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let plane = h * w;
    let mut out = Tensor::zeros(vec![n, ca + cb, h, w]);
    for ni in 0..n {
        let dst = out.data_mut();
        let base = ni * (ca + cb) * plane;
        dst[base..base + ca * plane]
            .copy_from_slice(&a.data()[ni * ca * plane..(ni + 1) * ca * plane]);
        dst[base + ca * plane..base + (ca + cb) * plane]
            .copy_from_slice(&b.data()[ni * cb * plane..(ni + 1) * cb * plane]);
    }
    Ok(out)
}

pub(crate) fn concat_channels_backward<T: Scalar>(
    a_shape: &[usize],
    b_shape: &[usize],
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (n, ca, h, w) = (a_shape[0], a_shape[1], a_shape[2], a_shape[3]);
    let cb = b_shape[1];
    let plane = h * w;
    let mut da = Tensor::zeros(a_shape.to_vec());
    let mut db = Tensor::zeros(b_shape.to_vec());
    for ni in 0..n {
        let base = ni * (ca + cb) * plane;
        da.data_mut()[ni * ca * plane..(ni + 1) * ca * plane]
            .copy_from_slice(&dy.data()[base..base + ca * plane]);
        db.data_mut()[ni * cb * plane..(ni + 1) * cb * plane]
            .copy_from_slice(&dy.data()[base + ca * plane..base + (ca + cb) * plane]);
    }
    (da, db)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinKind {
    Add,
    Mul,
}

/// Elementwise add/mul with numpy-style broadcasting over singleton dims.
pub(crate) fn broadcast_bin<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    kind: BinKind,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| match kind {
                BinKind::Add => x + y,
                BinKind::Mul => x * y,
            })
            .collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let rank = out_shape.len();
    let sa = broadcast_strides(a.shape(), rank);
    let sb = broadcast_strides(b.shape(), rank);
    let so = strides_of(&out_shape);
    let total: usize = out_shape.iter().product();
    let mut out = Tensor::zeros(out_shape.clone());
    let mut idx = vec![0usize; rank];
    for flat in 0..total {
        let mut rem = flat;
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..rank {
            idx[d] = rem / so[d];
            rem %= so[d];
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        let (x, y) = (a.data()[ia], b.data()[ib]);
        out.data_mut()[flat] = match kind {
            BinKind::Add => x + y,
            BinKind::Mul => x * y,
        };
    }
    Ok(out)
}

/// Sum `grad` down to `shape` over broadcast dimensions.
pub(crate) fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let rank = grad.shape().len();
    let s_target = broadcast_strides(shape, rank);
    let so = strides_of(grad.shape());
    let mut out = Tensor::zeros(shape.to_vec());
    for flat in 0..grad.len() {
        let mut rem = flat;
        let mut it = 0;
        for d in 0..rank {
            let i = rem / so[d];
            rem %= so[d];
            it += i * s_target[d];
        }
        out.data_mut()[it] += grad.data()[flat];
    }
    out
}

const BCE_CLAMP: f64 = 1e-7;

/// Binary cross-entropy, mean over elements, with predictions clamped to
/// `[1e-7, 1 - 1e-7]`.
pub(crate) fn bce_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "bce_loss shapes {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let lo = s::<T>(BCE_CLAMP);
    let hi = T::ONE - lo;
    let n = s::<T>(pred.len() as f64);
    let mut acc = T::ZERO;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let p = p.maxs(lo).mins(hi);
        acc += t * p.ln() + (T::ONE - t) * (T::ONE - p).ln();
    }
    Ok(-acc / n)
}

pub(crate) fn bce_loss_backward<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    dy: T,
) -> Tensor<T> {
    let lo = s::<T>(BCE_CLAMP);
    let hi = T::ONE - lo;
    let n = s::<T>(pred.len() as f64);
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            if p <= lo || p >= hi {
                T::ZERO
            } else {
                dy * (p - t) / (p * (T::ONE - p)) / n
            }
        })
        .collect();
    Tensor::new(pred.shape().to_vec(), data).expect("same shape")
}

/// Soft dice loss: 1 - (2 sum(p t) + smooth) / (sum(p) + sum(t) + smooth).
pub(crate) fn dice_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, smooth: T) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "dice_loss shapes {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mut inter = T::ZERO;
    let mut psum = T::ZERO;
    let mut tsum = T::ZERO;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        inter += p * t;
        psum += p;
        tsum += t;
    }
    let num = s::<T>(2.0) * inter + smooth;
    let den = psum + tsum + smooth;
    Ok(T::ONE - num / den)
}

pub(crate) fn dice_loss_backward<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    smooth: T,
    dy: T,
) -> Tensor<T> {
    let mut inter = T::ZERO;
    let mut psum = T::ZERO;
    let mut tsum = T::ZERO;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        inter += p * t;
        psum += p;
        tsum += t;
    }
    let num = s::<T>(2.0) * inter + smooth;
    let den = psum + tsum + smooth;
    let den2 = den * den;
    let data = target
        .data()
        .iter()
        .map(|&t| dy * -(s::<T>(2.0) * t * den - num) / den2)
        .collect();
    Tensor::new(pred.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_and_sigmoid_pointwise() {
        let x = Tensor::new(vec![3], vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let y = sigmoid(&Tensor::scalar(0.0f64));
        assert_eq!(y.data()[0], 0.5);
    }

    #[test]
    fn sigmoid_stays_inside_open_interval() {
        let x = Tensor::new(vec![2], vec![1e4f32, -1e4]).unwrap();
        let y = sigmoid(&x);
        assert!(y.data()[0] < 1.0 && y.data()[0] > 0.0);
        assert!(y.data()[1] > 0.0 && y.data()[1] < 1.0);
    }

    #[test]
    fn gap_means_plane() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.data(), &[2.5]);
        // Random plane agrees with a plain summation to 1e-12.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::rand_uniform(vec![1, 1, 7, 5], -2.0, 2.0, &mut rng);
        let naive: f64 = x.data().iter().sum::<f64>() / 35.0;
        assert!((global_avg_pool(&x).unwrap().data()[0] - naive).abs() < 1e-12);
    }

    #[test]
    fn upsample_replicates_and_backward_sums() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let y = nearest_upsample(&x, 2).unwrap();
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        assert_eq!(nearest_upsample(&x, 1).unwrap().data(), x.data());
        let dy = Tensor::<f64>::ones(vec![1, 1, 4, 4]);
        let dx = nearest_upsample_backward(&[1, 1, 2, 2], 2, &dy);
        assert!(dx.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn upsample_then_avg_pool_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::rand_uniform(vec![2, 3, 4, 5], -1.0, 1.0, &mut rng);
        for factor in 1..=3 {
            let y = avg_pool_factor(&nearest_upsample(&x, factor).unwrap(), factor).unwrap();
            for (a, b) in y.data().iter().zip(x.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_shape_law() {
        let a = Tensor::<f64>::ones(vec![1, 2, 2, 2]);
        let b = Tensor::<f64>::full(vec![1, 3, 2, 2], 2.0);
        let y = concat_channels(&a, &b).unwrap();
        assert_eq!(y.shape(), [1, 5, 2, 2]);
        let (da, db) = concat_channels_backward(a.shape(), b.shape(), &y);
        assert!(da.data().iter().all(|&v| v == 1.0));
        assert!(db.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn broadcast_add_and_mul() {
        let x = Tensor::new(vec![1, 2, 2, 2], (1..=8).map(|v| v as f64).collect()).unwrap();
        let gate = Tensor::new(vec![1, 2, 1, 1], vec![2.0, 0.5]).unwrap();
        let y = broadcast_bin(&x, &gate, BinKind::Mul).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0, 2.5, 3.0, 3.5, 4.0]);
        let z = broadcast_bin(&x, &Tensor::zeros(vec![1, 2, 2, 2]), BinKind::Add).unwrap();
        assert_eq!(z.data(), x.data());
        // Gradient reduction mirrors the broadcast.
        let red = reduce_to_shape(&Tensor::<f64>::ones(vec![1, 2, 2, 2]), &[1, 2, 1, 1]);
        assert_eq!(red.data(), &[4.0, 4.0]);
    }

    #[test]
    fn bce_known_values() {
        let half = Tensor::<f64>::full(vec![8], 0.5);
        let t = Tensor::new(vec![8], vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let l = bce_loss(&half, &t).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        // Perfect prediction: loss at the clamp scale, dice ~ 0.
        let perfect = bce_loss(&t, &t).unwrap();
        assert!(perfect < 1e-6);
        let d = dice_loss(&t, &t, 1e-6).unwrap();
        assert!(d.abs() < 1e-6);
    }

    #[test]
    fn losses_match_termwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = Tensor::<f64>::rand_uniform(vec![8], 0.05, 0.95, &mut rng);
        let t = Tensor::new(
            vec![8],
            (0..8).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let mut acc = 0.0;
        for (&pi, &ti) in p.data().iter().zip(t.data()) {
            acc -= ti * pi.ln() + (1.0 - ti) * (1.0 - pi).ln();
        }
        assert!((bce_loss(&p, &t).unwrap() - acc / 8.0).abs() < 1e-12);

        let smooth = 1e-6;
        let inter: f64 = p.data().iter().zip(t.data()).map(|(a, b)| a * b).sum();
        let expect = 1.0
            - (2.0 * inter + smooth)
                / (p.data().iter().sum::<f64>() + t.data().iter().sum::<f64>() + smooth);
        assert!((dice_loss(&p, &t, smooth).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn bn_normalizes_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::rand_uniform(vec![2, 3, 4, 4], -3.0, 3.0, &mut rng);
        let gamma = Tensor::ones(vec![3]);
        let beta = Tensor::zeros(vec![3]);
        let mut stats = RunningStats::new(3);
        let (y, _) = bn_forward_train(&x, &gamma, &beta, &mut stats, 0.99, 1e-5).unwrap();
        for ci in 0..3 {
            let mut vals = Vec::new();
            for ni in 0..2 {
                for i in 0..16 {
                    vals.push(y.data()[(ni * 3 + ci) * 16 + i]);
                }
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6, "channel mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel var {var}");
        }
    }

    #[test]
    fn bn_constant_input_and_zero_gamma() {
        let x = Tensor::<f64>::full(vec![2, 2, 2, 2], 3.7);
        let gamma = Tensor::ones(vec![2]);
        let beta = Tensor::zeros(vec![2]);
        let mut stats = RunningStats::new(2);
        let (y, _) = bn_forward_train(&x, &gamma, &beta, &mut stats, 0.99, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-9));

        let g0 = Tensor::zeros(vec![2]);
        let b = Tensor::full(vec![2], 0.25);
        let mut stats = RunningStats::new(2);
        let (y, _) = bn_forward_train(&x, &g0, &b, &mut stats, 0.99, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn bn_eval_requires_stats() {
        let x = Tensor::<f64>::ones(vec![1, 2, 2, 2]);
        let gamma = Tensor::ones(vec![2]);
        let beta = Tensor::zeros(vec![2]);
        let stats = RunningStats::new(2);
        assert!(matches!(
            bn_forward_eval(&x, &gamma, &beta, &stats, 1e-5),
            Err(Error::UninitializedStats)
        ));
    }
}
