//! Forward kernels shared by the differentiable graph and the plain
//! functional API.

use super::Tensor;
use crate::error::{shape_err, Result};

/// `a (n x k) * b (k x m)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.rows_cols()?;
    let (k2, m) = b.rows_cols()?;
    if k != k2 {
        return Err(shape_err!("matmul {:?} x {:?}", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; n * m];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// `a (n x k) * b^T` where `b` is `m x k`.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.rows_cols()?;
    let (m, k2) = b.rows_cols()?;
    if k != k2 {
        return Err(shape_err!("matmul_bt {:?} x {:?}^T", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let ar = a.row(i);
        for j in 0..m {
            out[i * m + j] = dot(ar, b.row(j));
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// `a^T * b` where `a` is `k x n` and `b` is `k x m`.
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, n) = a.rows_cols()?;
    let (k2, m) = b.rows_cols()?;
    if k != k2 {
        return Err(shape_err!("matmul_at {:?}^T x {:?}", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let ar = a.row(p);
        let br = b.row(p);
        for (i, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, bv) in orow.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (n, m) = a.rows_cols()?;
    let d = a.data();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = d[i * m + j];
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    let (r, c) = m.rows_cols()?;
    let mut out = m.data().to_vec();
    for i in 0..r {
        softmax_in_place(&mut out[i * c..(i + 1) * c]);
    }
    Ok(Tensor::from_parts(vec![r, c], out))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Zero-padded "same" correlation of an `H x W x C` input with a
/// `kh x kw x C x C'` kernel. Output is `ceil(H/stride) x ceil(W/stride) x C'`.
pub fn conv2d_same(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    let (h, w, c) = input.hwc()?;
    let (kh, kw, kc, co) = conv_kernel_dims(kernel)?;
    if kc != c {
        return Err(shape_err!(
            "conv2d: input has {c} channels, kernel expects {kc}"
        ));
    }
    if stride == 0 {
        return Err(shape_err!("conv2d: stride must be positive"));
    }
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let (rh, rw) = (kh / 2, kw / 2);
    let (x, k) = (input.data(), kernel.data());
    let mut out = vec![0.0; oh * ow * co];
    for oi in 0..oh {
        for oj in 0..ow {
            let orow = &mut out[(oi * ow + oj) * co..(oi * ow + oj + 1) * co];
            for a in 0..kh {
                let ii = (oi * stride + a) as isize - rh as isize;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for b in 0..kw {
                    let jj = (oj * stride + b) as isize - rw as isize;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let xp = &x[(ii as usize * w + jj as usize) * c..][..c];
                    let kbase = (a * kw + b) * c * co;
                    for (ci, &xv) in xp.iter().enumerate() {
                        let krow = &k[kbase + ci * co..kbase + (ci + 1) * co];
                        for (o, kv) in orow.iter_mut().zip(krow) {
                            *o += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![oh, ow, co], out))
}

/// Gradients of [`conv2d_same`] with respect to input and kernel.
pub(crate) fn conv2d_same_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    grad_out: &Tensor,
) -> (Tensor, Tensor) {
    let (h, w, c) = input.hwc().expect("checked in forward");
    let (kh, kw, _, co) = conv_kernel_dims(kernel).expect("checked in forward");
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let (rh, rw) = (kh / 2, kw / 2);
    let (x, k, g) = (input.data(), kernel.data(), grad_out.data());
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    for oi in 0..oh {
        for oj in 0..ow {
            let grow = &g[(oi * ow + oj) * co..][..co];
            for a in 0..kh {
                let ii = (oi * stride + a) as isize - rh as isize;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for b in 0..kw {
                    let jj = (oj * stride + b) as isize - rw as isize;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let xoff = (ii as usize * w + jj as usize) * c;
                    let kbase = (a * kw + b) * c * co;
                    for ci in 0..c {
                        let krow = &k[kbase + ci * co..][..co];
                        dx[xoff + ci] += dot(krow, grow);
                        let xv = x[xoff + ci];
                        let dkrow = &mut dk[kbase + ci * co..][..co];
                        for (d, gv) in dkrow.iter_mut().zip(grow) {
                            *d += xv * gv;
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(input.shape().to_vec(), dx),
        Tensor::from_parts(kernel.shape().to_vec(), dk),
    )
}

fn conv_kernel_dims(kernel: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match kernel.shape()[..] {
        [kh, kw, c, co] => {
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(shape_err!("conv2d: kernel extents must be odd, got {kh}x{kw}"));
            }
            Ok((kh, kw, c, co))
        }
        _ => Err(shape_err!("conv2d: kernel must be kh x kw x C x C', got {:?}", kernel.shape())),
    }
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + carry
}

pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.range(-1.0, 1.0))
    }

    #[test]
    fn softmax_uniform_row() {
        let s = softmax_rows(&Tensor::zeros(&[1, 3])).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_log_weights() {
        let m = Tensor::new(vec![1, 3], vec![1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        let s = softmax_rows(&m).unwrap();
        for (v, e) in s.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_logits() {
        // exp(-1) / (2 + exp(-1)) evaluated with 50-digit arithmetic:
        // 0.15536240349696362..., and (1 - that)/2 = 0.42231879825151819...
        let m = Tensor::new(vec![1, 3], vec![1000.0, 1000.0, 999.0]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert!(s.is_finite());
        assert!((s.sum() - 1.0).abs() < 1e-12);
        assert!((s.data()[0] - 0.422_318_798_251_518_19).abs() < 1e-15);
        assert!((s.data()[2] - 0.155_362_403_496_963_61).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_rank3() {
        assert!(softmax_rows(&Tensor::zeros(&[1, 2, 3])).is_err());
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = Rng::new(1);
        let x = random(&[5, 6, 3], &mut rng);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        for c in 0..3 {
            k.data_mut()[c * 3 + c] = 1.0;
        }
        assert_eq!(conv2d_same(&x, &k, 1).unwrap(), x);
    }

    #[test]
    fn conv_box_on_constant() {
        let x = Tensor::filled(&[6, 6, 1], 2.5);
        let k = Tensor::filled(&[3, 3, 1, 1], 1.0);
        let y = conv2d_same(&x, &k, 1).unwrap();
        for i in 1..5 {
            for j in 1..5 {
                assert!((y.data()[i * 6 + j] - 22.5).abs() < 1e-12);
            }
        }
        assert!((y.data()[0] - 10.0).abs() < 1e-12);
    }

    /// Direct quadruple loop over output pixel, kernel tap and channels.
    fn conv_naive(x: &Tensor, k: &Tensor, stride: usize) -> Tensor {
        let (h, w, c) = x.hwc().unwrap();
        let [kh, kw, _, co] = k.shape()[..] else { panic!() };
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        Tensor::from_fn(&[oh, ow, co], |idx| {
            let (oi, oj, o) = (idx / (ow * co), (idx / co) % ow, idx % co);
            let mut s = 0.0;
            for a in 0..kh {
                for b in 0..kw {
                    let ii = (oi * stride + a) as isize - (kh / 2) as isize;
                    let jj = (oj * stride + b) as isize - (kw / 2) as isize;
                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                        continue;
                    }
                    for ci in 0..c {
                        s += x.data()[(ii as usize * w + jj as usize) * c + ci]
                            * k.data()[((a * kw + b) * c + ci) * co + o];
                    }
                }
            }
            s
        })
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut rng = Rng::new(2);
        for stride in 1..=2 {
            let x = random(&[5, 5, 2], &mut rng);
            let k = random(&[3, 3, 2, 3], &mut rng);
            let y = conv2d_same(&x, &k, stride).unwrap();
            let r = conv_naive(&x, &k, stride);
            assert_eq!(y.shape(), r.shape());
            assert!(y.max_abs_diff(&r).unwrap() < 1e-14);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_even_kernels() {
        let x = Tensor::zeros(&[4, 4, 2]);
        assert!(conv2d_same(&x, &Tensor::zeros(&[3, 3, 3, 1]), 1).is_err());
        assert!(conv2d_same(&x, &Tensor::zeros(&[2, 2, 2, 1]), 1).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = Rng::new(3);
        let a = random(&[4, 3], &mut rng);
        let b = random(&[3, 5], &mut rng);
        let ab = matmul(&a, &b).unwrap();
        let bt = transpose(&b).unwrap();
        assert!(ab.max_abs_diff(&matmul_bt(&a, &bt).unwrap()).unwrap() < 1e-14);
        let at = transpose(&a).unwrap();
        assert!(ab.max_abs_diff(&matmul_at(&at, &b).unwrap()).unwrap() < 1e-14);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.0] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
