//! Flat-slice numeric kernels behind the differentiable ops.
//!
//! Accumulation order is fixed everywhere (ascending reduction index) so
//! results are bitwise reproducible and match the naive-loop oracles used in
//! tests element for element.

/// out[m][n] = sum_k a[m][k] * b[k][n]; `out` is overwritten.
pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[m][n] += sum_k a[m][k] * b[n][k]  (b used transposed).
pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[k][n] = sum_m a[m][k] * b[m][n]  (a used transposed); `out` overwritten.
pub fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = arow[p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

pub fn conv_out_extent(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Unpack one image [C,H,W] into columns [C*k*k, H'*W'] for a k x k kernel.
/// Row index runs (c, ky, kx)-major so a matmul over it reduces in the same
/// order as the direct six-loop convolution.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f64],
) {
    let ho = conv_out_extent(h, k, stride, pad);
    let wo = conv_out_extent(w, k, stride, pad);
    debug_assert_eq!(cols.len(), c * k * k * ho * wo);
    let p = ho * wo;
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * p..((ci * k + ky) * k + kx + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        row[oy * wo + ox] = if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w
                        {
                            plane[iy as usize * w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add columns back into an image; inverse layout of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    img: &mut [f64],
) {
    let ho = conv_out_extent(h, k, stride, pad);
    let wo = conv_out_extent(w, k, stride, pad);
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * p..((ci * k + ky) * k + kx + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        plane[iy as usize * w + ix as usize] += row[oy * wo + ox];
                    }
                }
            }
        }
    }
}

/// Forward convolution: x [N,Cin,H,W] * w [Cout,Cin,k,k] + b [Cout].
/// Returns output [N,Cout,H',W'].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = conv_out_extent(h, k, stride, pad);
    let wo = conv_out_extent(w, k, stride, pad);
    let p = ho * wo;
    let kk = cin * k * k;
    let mut out = vec![0.0; n * cout * p];
    let mut cols = vec![0.0; kk * p];
    for ni in 0..n {
        im2col(&x[ni * cin * h * w..(ni + 1) * cin * h * w], cin, h, w, k, stride, pad, &mut cols);
        let y = &mut out[ni * cout * p..(ni + 1) * cout * p];
        matmul(weight, &cols, y, cout, kk, p);
        for co in 0..cout {
            let bv = bias[co];
            for v in &mut y[co * p..(co + 1) * p] {
                *v += bv;
            }
        }
    }
    out
}

/// Backward convolution. Accumulates into dx, dw, db.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    let ho = conv_out_extent(h, k, stride, pad);
    let wo = conv_out_extent(w, k, stride, pad);
    let p = ho * wo;
    let kk = cin * k * k;
    let mut cols = vec![0.0; kk * p];
    let mut dcols = vec![0.0; kk * p];
    for ni in 0..n {
        let dyn_ = &dy[ni * cout * p..(ni + 1) * cout * p];
        im2col(&x[ni * cin * h * w..(ni + 1) * cin * h * w], cin, h, w, k, stride, pad, &mut cols);
        matmul_nt_acc(dyn_, &cols, dw, cout, p, kk);
        matmul_tn(weight, dyn_, &mut dcols, cout, kk, p);
        col2im_acc(&dcols, cin, h, w, k, stride, pad, &mut dx[ni * cin * h * w..(ni + 1) * cin * h * w]);
        for co in 0..cout {
            let mut acc = 0.0;
            for v in &dyn_[co * p..(co + 1) * p] {
                acc += v;
            }
            db[co] += acc;
        }
    }
}

/// Softmax along `axis` with max-subtraction. Works on any rank via strides.
pub fn softmax_forward(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for a in 0..axis_len {
                mx = mx.max(x[base + a * inner]);
            }
            let mut denom = 0.0;
            for a in 0..axis_len {
                let e = (x[base + a * inner] - mx).exp();
                out[base + a * inner] = e;
                denom += e;
            }
            for a in 0..axis_len {
                out[base + a * inner] /= denom;
            }
        }
    }
    out
}

/// dx = y * (dy - sum_axis(dy * y)) where y is the softmax output.
pub fn softmax_backward(y: &[f64], dy: &[f64], shape: &[usize], axis: usize, dx: &mut [f64]) {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut dot = 0.0;
            for a in 0..axis_len {
                dot += dy[base + a * inner] * y[base + a * inner];
            }
            for a in 0..axis_len {
                let idx = base + a * inner;
                dx[idx] += y[idx] * (dy[idx] - dot);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_case() {
        // [[1,2],[3,4]] x [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul(&a, &b, &mut out, 2, 2, 2);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c.
        let mut rng = crate::rng::SeededRng::new(5);
        let (c, h, w, k, stride, pad) = (2, 5, 6, 3, 2, 1);
        let ho = conv_out_extent(h, k, stride, pad);
        let wo = conv_out_extent(w, k, stride, pad);
        let x: Vec<f64> = (0..c * h * w).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let cvec: Vec<f64> = (0..c * k * k * ho * wo).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let mut cols = vec![0.0; cvec.len()];
        im2col(&x, c, h, w, k, stride, pad, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im_acc(&cvec, c, h, w, k, stride, pad, &mut back);
        let lhs: f64 = cols.iter().zip(&cvec).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x: Vec<f64> = (0..12).map(|v| v as f64 * 0.3 - 2.0).collect();
        let y = softmax_forward(&x, &[3, 4], 1);
        for r in 0..3 {
            let s: f64 = y[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
