//! Dense kernels shared by the training tape and the inference path.
//! All kernels are deterministic: parallel splits write disjoint output
//! regions and reductions run in a fixed order.

use rayon::prelude::*;

use crate::numcore::tensor::Tensor;

/// `C = alpha * A @ B + beta * C`, row-major. `ta`/`tb` flag that the
/// operand is stored transposed (`A` as `[k,m]`, `B` as `[n,k]`).
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k, "gemm A size");
    debug_assert_eq!(b.len(), k * n, "gemm B size");
    debug_assert_eq!(c.len(), m * n, "gemm C size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1isize, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1isize, k as isize) } else { (n as isize, 1) };
    let threads = rayon::current_num_threads();
    let work = m * k * n;
    if work < (1 << 19) || threads < 2 || m < 2 {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return;
    }
    let chunk_rows = m.div_ceil(threads);
    c.par_chunks_mut(chunk_rows * n)
        .enumerate()
        .for_each(|(ci, c_chunk)| {
            let row0 = ci * chunk_rows;
            let rows = c_chunk.len() / n;
            unsafe {
                matrixmultiply::dgemm(
                    rows,
                    k,
                    n,
                    alpha,
                    a.as_ptr().offset(row0 as isize * rsa),
                    rsa,
                    csa,
                    b.as_ptr(),
                    rsb,
                    csb,
                    beta,
                    c_chunk.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
}

/// `A[m,k] @ B[k,n]` into a fresh tensor.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rank(), 2);
    assert_eq!(b.rank(), 2);
    let (m, k) = (a.dim(0), a.dim(1));
    assert_eq!(b.dim(0), k, "matmul inner dim");
    let n = b.dim(1);
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a.data(), false, b.data(), false, 0.0, &mut c);
    Tensor::new(&[m, n], c)
}

/// Add a bias row of length `f` to every row of `y` (flattened `[..., f]`).
pub fn add_bias_rows(y: &mut [f64], b: &[f64]) {
    let f = b.len();
    debug_assert_eq!(y.len() % f, 0);
    for row in y.chunks_mut(f) {
        for (yi, bi) in row.iter_mut().zip(b) {
            *yi += bi;
        }
    }
}

/// Output spatial size of a convolution.
pub fn conv_out(h: usize, k: usize, s: usize, p: usize) -> usize {
    (h + 2 * p - k) / s + 1
}

/// Output spatial size of a transposed convolution.
pub fn conv_transpose_out(h: usize, k: usize, s: usize, p: usize) -> usize {
    (h - 1) * s + k - 2 * p
}

/// Unfold one image `[c,h,w]` into columns `[c*k*k, oh*ow]`.
#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    cols: &mut [f64],
) {
    let oh = conv_out(h, k, s, p);
    let ow = conv_out(w, k, s, p);
    debug_assert_eq!(cols.len(), c * k * k * oh * ow);
    let osp = oh * ow;
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for di in 0..k {
            for dj in 0..k {
                let dst = &mut cols[((ci * k + di) * k + dj) * osp..][..osp];
                for oi in 0..oh {
                    let ii = (oi * s + di) as isize - p as isize;
                    if ii < 0 || ii >= h as isize {
                        dst[oi * ow..(oi + 1) * ow].fill(0.0);
                        continue;
                    }
                    let row = &plane[ii as usize * w..(ii as usize + 1) * w];
                    for oj in 0..ow {
                        let jj = (oj * s + dj) as isize - p as isize;
                        dst[oi * ow + oj] = if jj < 0 || jj >= w as isize {
                            0.0
                        } else {
                            row[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add columns `[c*k*k, oh*ow]` back into an image `[c,h,w]`.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    dst: &mut [f64],
) {
    let oh = conv_out(h, k, s, p);
    let ow = conv_out(w, k, s, p);
    debug_assert_eq!(cols.len(), c * k * k * oh * ow);
    debug_assert_eq!(dst.len(), c * h * w);
    let osp = oh * ow;
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for di in 0..k {
            for dj in 0..k {
                let src = &cols[((ci * k + di) * k + dj) * osp..][..osp];
                for oi in 0..oh {
                    let ii = (oi * s + di) as isize - p as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let row = &mut plane[ii as usize * w..(ii as usize + 1) * w];
                    for oj in 0..ow {
                        let jj = (oj * s + dj) as isize - p as isize;
                        if jj >= 0 && jj < w as isize {
                            row[jj as usize] += src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward: `x[n,c,h,w] * w[o,c,k,k] + b[o] -> [n,o,oh,ow]`.
pub fn conv2d_fwd(x: &Tensor, wt: &Tensor, b: &Tensor, s: usize, p: usize) -> Tensor {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (o, k) = (wt.dim(0), wt.dim(2));
    assert_eq!(wt.dim(1), c, "conv in-channels");
    let (oh, ow) = (conv_out(h, k, s, p), conv_out(w, k, s, p));
    let mut out = vec![0.0; n * o * oh * ow];
    let frame_in = c * h * w;
    let frame_out = o * oh * ow;
    out.par_chunks_mut(frame_out).enumerate().for_each(|(fi, dst)| {
        let mut cols = vec![0.0; c * k * k * oh * ow];
        im2col(&x.data()[fi * frame_in..][..frame_in], c, h, w, k, s, p, &mut cols);
        gemm(o, c * k * k, oh * ow, 1.0, wt.data(), false, &cols, false, 0.0, dst);
        for (oc, plane) in dst.chunks_mut(oh * ow).enumerate() {
            let bias = b.data()[oc];
            for v in plane.iter_mut() {
                *v += bias;
            }
        }
    });
    Tensor::new(&[n, o, oh, ow], out)
}

/// Convolution backward; returns `(dx, dw, db)`.
pub fn conv2d_bwd(
    dy: &Tensor,
    x: &Tensor,
    wt: &Tensor,
    s: usize,
    p: usize,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (o, k) = (wt.dim(0), wt.dim(2));
    let (oh, ow) = (dy.dim(2), dy.dim(3));
    let ckk = c * k * k;
    let frame_in = c * h * w;
    let frame_out = o * oh * ow;

    let mut dx = vec![0.0; n * frame_in];
    dx.par_chunks_mut(frame_in).enumerate().for_each(|(fi, dst)| {
        let mut cols = vec![0.0; ckk * oh * ow];
        gemm(
            ckk,
            o,
            oh * ow,
            1.0,
            wt.data(),
            true,
            &dy.data()[fi * frame_out..][..frame_out],
            false,
            0.0,
            &mut cols,
        );
        col2im(&cols, c, h, w, k, s, p, dst);
    });

    // dw: per-thread partials summed in fixed chunk order.
    let threads = rayon::current_num_threads().max(1);
    let chunk = n.div_ceil(threads);
    let partials: Vec<Vec<f64>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(chunk)
        .map(|frames| {
            let mut dw = vec![0.0; o * ckk];
            let mut cols = vec![0.0; ckk * oh * ow];
            for &fi in frames {
                im2col(&x.data()[fi * frame_in..][..frame_in], c, h, w, k, s, p, &mut cols);
                gemm(
                    o,
                    oh * ow,
                    ckk,
                    1.0,
                    &dy.data()[fi * frame_out..][..frame_out],
                    false,
                    &cols,
                    true,
                    1.0,
                    &mut dw,
                );
            }
            dw
        })
        .collect();
    let mut dw = vec![0.0; o * ckk];
    for part in &partials {
        for (d, s_) in dw.iter_mut().zip(part) {
            *d += s_;
        }
    }

    let mut db = vec![0.0; o];
    for fi in 0..n {
        for oc in 0..o {
            db[oc] += dy.data()[fi * frame_out + oc * oh * ow..][..oh * ow]
                .iter()
                .sum::<f64>();
        }
    }

    (
        Tensor::new(&[n, c, h, w], dx),
        Tensor::new(wt.shape(), dw),
        Tensor::new(&[o], db),
    )
}

/// Transposed convolution forward: `x[n,c,h,w] * w[c,o,k,k] + b[o]`.
pub fn conv_transpose2d_fwd(x: &Tensor, wt: &Tensor, b: &Tensor, s: usize, p: usize) -> Tensor {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (o, k) = (wt.dim(1), wt.dim(2));
    assert_eq!(wt.dim(0), c, "conv-transpose in-channels");
    let (ho, wo) = (conv_transpose_out(h, k, s, p), conv_transpose_out(w, k, s, p));
    let okk = o * k * k;
    let frame_in = c * h * w;
    let frame_out = o * ho * wo;
    let mut out = vec![0.0; n * frame_out];
    out.par_chunks_mut(frame_out).enumerate().for_each(|(fi, dst)| {
        let mut cols = vec![0.0; okk * h * w];
        gemm(
            okk,
            c,
            h * w,
            1.0,
            wt.data(),
            true,
            &x.data()[fi * frame_in..][..frame_in],
            false,
            0.0,
            &mut cols,
        );
        col2im(&cols, o, ho, wo, k, s, p, dst);
        for (oc, plane) in dst.chunks_mut(ho * wo).enumerate() {
            let bias = b.data()[oc];
            for v in plane.iter_mut() {
                *v += bias;
            }
        }
    });
    Tensor::new(&[n, o, ho, wo], out)
}

/// Transposed convolution backward; returns `(dx, dw, db)`.
pub fn conv_transpose2d_bwd(
    dy: &Tensor,
    x: &Tensor,
    wt: &Tensor,
    s: usize,
    p: usize,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (o, k) = (wt.dim(1), wt.dim(2));
    let (ho, wo) = (dy.dim(2), dy.dim(3));
    let okk = o * k * k;
    let frame_in = c * h * w;
    let frame_out = o * ho * wo;

    let mut dx = vec![0.0; n * frame_in];
    dx.par_chunks_mut(frame_in).enumerate().for_each(|(fi, dst)| {
        let mut cols = vec![0.0; okk * h * w];
        im2col(&dy.data()[fi * frame_out..][..frame_out], o, ho, wo, k, s, p, &mut cols);
        gemm(c, okk, h * w, 1.0, wt.data(), false, &cols, false, 0.0, dst);
    });

    let threads = rayon::current_num_threads().max(1);
    let chunk = n.div_ceil(threads);
    let partials: Vec<Vec<f64>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(chunk)
        .map(|frames| {
            let mut dw = vec![0.0; c * okk];
            let mut cols = vec![0.0; okk * h * w];
            for &fi in frames {
                im2col(&dy.data()[fi * frame_out..][..frame_out], o, ho, wo, k, s, p, &mut cols);
                gemm(
                    c,
                    h * w,
                    okk,
                    1.0,
                    &x.data()[fi * frame_in..][..frame_in],
                    false,
                    &cols,
                    true,
                    1.0,
                    &mut dw,
                );
            }
            dw
        })
        .collect();
    let mut dw = vec![0.0; c * okk];
    for part in &partials {
        for (d, s_) in dw.iter_mut().zip(part) {
            *d += s_;
        }
    }

    let mut db = vec![0.0; o];
    for fi in 0..n {
        for oc in 0..o {
            db[oc] += dy.data()[fi * frame_out + oc * ho * wo..][..ho * wo]
                .iter()
                .sum::<f64>();
        }
    }

    (
        Tensor::new(&[n, c, h, w], dx),
        Tensor::new(wt.shape(), dw),
        Tensor::new(&[o], db),
    )
}

/// Batch-norm statistics and normalized output over a `[n, c, sp]` view
/// (`sp = 1` for feature norm, `h*w` for spatial norm). Biased variance.
pub struct BnForward {
    pub y: Tensor,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn batchnorm_fwd(x: &Tensor, n: usize, c: usize, sp: usize, gamma: &[f64], beta: &[f64], eps: f64) -> BnForward {
    debug_assert_eq!(x.numel(), n * c * sp);
    let m = (n * sp) as f64;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * sp;
            mean[ci] += xd[base..base + sp].iter().sum::<f64>();
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * sp;
            let mu = mean[ci];
            var[ci] += xd[base..base + sp].iter().map(|x| (x - mu) * (x - mu)).sum::<f64>();
        }
    }
    for v in var.iter_mut() {
        *v /= m;
    }
    let mut y = vec![0.0; xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * sp;
            let rstd = 1.0 / (var[ci] + eps).sqrt();
            let (mu, g, b) = (mean[ci], gamma[ci], beta[ci]);
            for i in 0..sp {
                y[base + i] = g * (xd[base + i] - mu) * rstd + b;
            }
        }
    }
    BnForward {
        y: Tensor::new(x.shape(), y),
        mean,
        var,
    }
}

/// Batch-norm backward; returns `(dx, dgamma, dbeta)`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_bwd(
    dy: &Tensor,
    x: &Tensor,
    n: usize,
    c: usize,
    sp: usize,
    gamma: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> (Tensor, Tensor, Tensor) {
    let m = (n * sp) as f64;
    let xd = x.data();
    let dyd = dy.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * sp;
            let mu = mean[ci];
            let rstd = 1.0 / (var[ci] + eps).sqrt();
            for i in 0..sp {
                let xhat = (xd[base + i] - mu) * rstd;
                dgamma[ci] += dyd[base + i] * xhat;
                dbeta[ci] += dyd[base + i];
            }
        }
    }
    let mut dx = vec![0.0; xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * sp;
            let mu = mean[ci];
            let rstd = 1.0 / (var[ci] + eps).sqrt();
            let g = gamma[ci];
            for i in 0..sp {
                let xhat = (xd[base + i] - mu) * rstd;
                dx[base + i] =
                    g * rstd * (dyd[base + i] - dbeta[ci] / m - xhat * dgamma[ci] / m);
            }
        }
    }
    (
        Tensor::new(x.shape(), dx),
        Tensor::new(&[c], dgamma),
        Tensor::new(&[c], dbeta),
    )
}

/// Batch-norm inference using running statistics.
pub fn batchnorm_eval(
    x: &Tensor,
    n: usize,
    c: usize,
    sp: usize,
    gamma: &[f64],
    beta: &[f64],
    run_mean: &[f64],
    run_var: &[f64],
    eps: f64,
) -> Tensor {
    debug_assert_eq!(x.numel(), n * c * sp);
    let xd = x.data();
    let mut y = vec![0.0; xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * sp;
            let rstd = 1.0 / (run_var[ci] + eps).sqrt();
            let (mu, g, b) = (run_mean[ci], gamma[ci], beta[ci]);
            for i in 0..sp {
                y[base + i] = g * (xd[base + i] - mu) * rstd + b;
            }
        }
    }
    Tensor::new(x.shape(), y)
}

/// Layer norm over the last axis; returns `(y, mean, rstd)` per row.
pub fn layernorm_fwd(x: &Tensor, f: usize, gamma: &[f64], beta: &[f64], eps: f64) -> (Tensor, Vec<f64>, Vec<f64>) {
    let rows = x.numel() / f;
    let xd = x.data();
    let mut y = vec![0.0; xd.len()];
    let mut means = vec![0.0; rows];
    let mut rstds = vec![0.0; rows];
    for r in 0..rows {
        let row = &xd[r * f..(r + 1) * f];
        let mu = row.iter().sum::<f64>() / f as f64;
        let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / f as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        means[r] = mu;
        rstds[r] = rstd;
        let out = &mut y[r * f..(r + 1) * f];
        for i in 0..f {
            out[i] = gamma[i] * (row[i] - mu) * rstd + beta[i];
        }
    }
    (Tensor::new(x.shape(), y), means, rstds)
}

/// Layer-norm backward; returns `(dx, dgamma, dbeta)`.
pub fn layernorm_bwd(
    dy: &Tensor,
    x: &Tensor,
    f: usize,
    gamma: &[f64],
    means: &[f64],
    rstds: &[f64],
) -> (Tensor, Tensor, Tensor) {
    let rows = x.numel() / f;
    let xd = x.data();
    let dyd = dy.data();
    let mut dx = vec![0.0; xd.len()];
    let mut dgamma = vec![0.0; f];
    let mut dbeta = vec![0.0; f];
    for r in 0..rows {
        let row = &xd[r * f..(r + 1) * f];
        let dyr = &dyd[r * f..(r + 1) * f];
        let (mu, rstd) = (means[r], rstds[r]);
        let mut sum_dyg = 0.0;
        let mut sum_dyg_xhat = 0.0;
        for i in 0..f {
            let xhat = (row[i] - mu) * rstd;
            let dyg = dyr[i] * gamma[i];
            sum_dyg += dyg;
            sum_dyg_xhat += dyg * xhat;
            dgamma[i] += dyr[i] * xhat;
            dbeta[i] += dyr[i];
        }
        let inv_f = 1.0 / f as f64;
        let out = &mut dx[r * f..(r + 1) * f];
        for i in 0..f {
            let xhat = (row[i] - mu) * rstd;
            out[i] = rstd * (dyr[i] * gamma[i] - sum_dyg * inv_f - xhat * sum_dyg_xhat * inv_f);
        }
    }
    (
        Tensor::new(x.shape(), dx),
        Tensor::new(&[f], dgamma),
        Tensor::new(&[f], dbeta),
    )
}

/// Row-wise softmax over the last axis, numerically stable.
pub fn softmax_rows(x: &Tensor, f: usize) -> Tensor {
    let mut y = x.data().to_vec();
    for row in y.chunks_mut(f) {
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
    Tensor::new(x.shape(), y)
}

/// Row-wise log-softmax over the last axis.
pub fn log_softmax_rows(x: &Tensor, f: usize) -> Tensor {
    let mut y = x.data().to_vec();
    for row in y.chunks_mut(f) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::new(x.shape(), y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a.data()[i * k + l] * b.data()[l * n + j];
                }
                c[i * n + j] = s;
            }
        }
        Tensor::new(&[m, n], c)
    }

    #[test]
    fn gemm_matches_naive() {
        let mut rng = crate::rng::seeded(1, "gemm");
        let a = Tensor::uniform(&[7, 5], 1.0, &mut rng);
        let b = Tensor::uniform(&[5, 9], 1.0, &mut rng);
        let c = matmul(&a, &b);
        let r = naive_matmul(&a, &b);
        for (x, y) in c.data().iter().zip(r.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_transposed_operands() {
        let mut rng = crate::rng::seeded(2, "gemmt");
        let a = Tensor::uniform(&[5, 7], 1.0, &mut rng); // logical A^T is [7,5]
        let b = Tensor::uniform(&[9, 5], 1.0, &mut rng); // logical B^T is [5,9]
        let mut c = vec![0.0; 7 * 9];
        gemm(7, 5, 9, 1.0, a.data(), true, b.data(), true, 0.0, &mut c);
        for i in 0..7 {
            for j in 0..9 {
                let mut s = 0.0;
                for l in 0..5 {
                    s += a.data()[l * 7 + i] * b.data()[j * 5 + l];
                }
                assert!((c[i * 9 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_shapes_match_table_arithmetic() {
        // kernel 4, stride 2, pad 1 halves and doubles spatial dims.
        assert_eq!(conv_out(64, 4, 2, 1), 32);
        assert_eq!(conv_out(16, 4, 2, 1), 8);
        assert_eq!(conv_transpose_out(4, 4, 2, 1), 8);
        assert_eq!(conv_transpose_out(32, 4, 2, 1), 64);
    }

    #[test]
    fn conv_fwd_matches_direct() {
        let mut rng = crate::rng::seeded(3, "conv");
        let x = Tensor::uniform(&[2, 3, 6, 6], 1.0, &mut rng);
        let w = Tensor::uniform(&[4, 3, 4, 4], 0.5, &mut rng);
        let b = Tensor::uniform(&[4], 0.5, &mut rng);
        let y = conv2d_fwd(&x, &w, &b, 2, 1);
        assert_eq!(y.shape(), &[2, 4, 3, 3]);
        // direct evaluation of one output element
        let (ni, oc, oi, oj) = (1, 2, 1, 2);
        let mut s = b.data()[oc];
        for c in 0..3 {
            for di in 0..4 {
                for dj in 0..4 {
                    let ii = (oi * 2 + di) as isize - 1;
                    let jj = (oj * 2 + dj) as isize - 1;
                    if ii >= 0 && ii < 6 && jj >= 0 && jj < 6 {
                        s += x.data()[((ni * 3 + c) * 6 + ii as usize) * 6 + jj as usize]
                            * w.data()[((oc * 3 + c) * 4 + di) * 4 + dj];
                    }
                }
            }
        }
        let got = y.data()[((ni * 4 + oc) * 3 + oi) * 3 + oj];
        assert!((got - s).abs() < 1e-12, "{got} vs {s}");
    }

    #[test]
    fn conv_transpose_inverts_shape() {
        let mut rng = crate::rng::seeded(4, "deconv");
        let x = Tensor::uniform(&[2, 5, 4, 4], 1.0, &mut rng);
        let w = Tensor::uniform(&[5, 3, 4, 4], 0.5, &mut rng);
        let b = Tensor::zeros(&[3]);
        let y = conv_transpose2d_fwd(&x, &w, &b, 2, 1);
        assert_eq!(y.shape(), &[2, 3, 8, 8]);
    }

    #[test]
    fn layernorm_rows_are_normalized() {
        let mut rng = crate::rng::seeded(5, "ln");
        let x = Tensor::uniform(&[4, 8], 3.0, &mut rng);
        let gamma = vec![1.0; 8];
        let beta = vec![0.0; 8];
        let (y, _, _) = layernorm_fwd(&x, 8, &gamma, &beta, 1e-5);
        for row in y.data().chunks(8) {
            let mu = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 8.0;
            assert!(mu.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[2, 3], vec![2.0, 1.0, 0.0, -5.0, 300.0, 299.0]);
        let y = softmax_rows(&x, 3);
        for row in y.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
        // softmax([2,1,0]) reference values
        assert!((y.data()[0] - 0.6652409557748219).abs() < 1e-12);
        assert!((y.data()[1] - 0.24472847105479767).abs() < 1e-12);
    }
}
