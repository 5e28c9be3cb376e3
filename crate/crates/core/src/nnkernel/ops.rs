//! Dense f64 kernels for the layers the engine supports. Layouts are NCHW
//! for feature maps, `[C_out, C_in, k, k]` for conv weights and
//! `[out, in]` for linear weights.

/// `c = alpha · a·b + beta · c` with explicit strides.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= if k == 0 { 0 } else { 1 });
    // SAFETY: callers pass slices covering the strided extents; checked in debug builds by the
    // index arithmetic below.
    debug_assert!(max_index(m, k, rsa, csa) < a.len().max(1));
    debug_assert!(max_index(k, n, rsb, csb) < b.len().max(1));
    debug_assert!(max_index(m, n, rsc, csc) < c.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn max_index(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad: usize,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn cols_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

/// One sample `[C_in, H, W]` → columns `[C_in·k·k, Ho·Wo]`.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy as usize >= g.h {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix >= 0 && (ix as usize) < g.w { src[ix as usize] } else { 0.0 };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `[C_in, H, W]`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        let xc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(x: &[f64], n: usize, w: &[f64], bias: &[f64], g: &ConvGeom, y: &mut [f64]) {
    let in_sz = g.c_in * g.h * g.w;
    let plane = g.out_plane();
    let out_sz = g.c_out * plane;
    let kk = g.cols_rows();
    let mut cols = vec![0.0; kk * plane];
    for s in 0..n {
        im2col(&x[s * in_sz..(s + 1) * in_sz], g, &mut cols);
        let ys = &mut y[s * out_sz..(s + 1) * out_sz];
        for (co, row) in ys.chunks_mut(plane).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[co]);
        }
        gemm(g.c_out, kk, plane, w, kk as isize, 1, &cols, plane as isize, 1, 1.0, ys, plane as isize, 1);
    }
}

/// `dx = Wᵀ ⊛ dy` (the backward stage).
pub(crate) fn conv_backward_data(dy: &[f64], n: usize, w: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let in_sz = g.c_in * g.h * g.w;
    let plane = g.out_plane();
    let out_sz = g.c_out * plane;
    let kk = g.cols_rows();
    let mut cols = vec![0.0; kk * plane];
    dx.iter_mut().for_each(|v| *v = 0.0);
    for s in 0..n {
        // cols (kk × plane) = Wᵀ (kk × c_out) · dy_s (c_out × plane)
        gemm(
            kk,
            g.c_out,
            plane,
            w,
            1,
            kk as isize,
            &dy[s * out_sz..(s + 1) * out_sz],
            plane as isize,
            1,
            0.0,
            &mut cols,
            plane as isize,
            1,
        );
        col2im(&cols, g, &mut dx[s * in_sz..(s + 1) * in_sz]);
    }
}

/// `dW = dy ⊛ x` (the weight-update stage); `dw` is overwritten.
pub(crate) fn conv_backward_weight(x: &[f64], dy: &[f64], n: usize, g: &ConvGeom, dw: &mut [f64], db: &mut [f64]) {
    let in_sz = g.c_in * g.h * g.w;
    let plane = g.out_plane();
    let out_sz = g.c_out * plane;
    let kk = g.cols_rows();
    let mut cols = vec![0.0; kk * plane];
    dw.iter_mut().for_each(|v| *v = 0.0);
    for s in 0..n {
        im2col(&x[s * in_sz..(s + 1) * in_sz], g, &mut cols);
        // dw (c_out × kk) += dy_s (c_out × plane) · colsᵀ (plane × kk)
        gemm(
            g.c_out,
            plane,
            kk,
            &dy[s * out_sz..(s + 1) * out_sz],
            plane as isize,
            1,
            &cols,
            1,
            plane as isize,
            1.0,
            dw,
            kk as isize,
            1,
        );
    }
    bias_grad_planes(dy, n, g.c_out, plane, db);
}

pub(crate) fn bias_grad_planes(dy: &[f64], n: usize, c: usize, plane: usize, db: &mut [f64]) {
    db.iter_mut().for_each(|v| *v = 0.0);
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            db[ch] += dy[off..off + plane].iter().sum::<f64>();
        }
    }
}

/// `y[n, out] = x[n, in] · Wᵀ + b`.
pub(crate) fn linear_forward(x: &[f64], n: usize, w: &[f64], bias: &[f64], fin: usize, fout: usize, y: &mut [f64]) {
    for row in y.chunks_mut(fout).take(n) {
        row.copy_from_slice(bias);
    }
    gemm(n, fin, fout, x, fin as isize, 1, w, 1, fin as isize, 1.0, y, fout as isize, 1);
}

pub(crate) fn linear_backward_data(dy: &[f64], n: usize, w: &[f64], fin: usize, fout: usize, dx: &mut [f64]) {
    gemm(n, fout, fin, dy, fout as isize, 1, w, fin as isize, 1, 0.0, dx, fin as isize, 1);
}

pub(crate) fn linear_backward_weight(
    x: &[f64],
    dy: &[f64],
    n: usize,
    fin: usize,
    fout: usize,
    dw: &mut [f64],
    db: &mut [f64],
) {
    // dw (fout × fin) = dyᵀ (fout × n) · x (n × fin)
    gemm(fout, n, fin, dy, 1, fout as isize, x, fin as isize, 1, 0.0, dw, fin as isize, 1);
    db.iter_mut().for_each(|v| *v = 0.0);
    for row in dy.chunks(fout).take(n) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
}

pub(crate) fn relu_forward(x: &[f64], y: &mut [f64]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o = v.max(0.0);
    }
}

pub(crate) fn relu_backward(x: &[f64], dy: &[f64], dx: &mut [f64]) {
    for ((d, &g), &v) in dx.iter_mut().zip(dy).zip(x) {
        *d = if v > 0.0 { g } else { 0.0 };
    }
}

/// Non-overlapping `size×size` max pooling; returns flat argmax indices.
pub(crate) fn maxpool_forward(x: &[f64], nc: usize, h: usize, w: usize, size: usize, y: &mut [f64], arg: &mut [usize]) {
    let (ho, wo) = (h / size, w / size);
    for p in 0..nc {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut bi = base;
                for ky in 0..size {
                    for kx in 0..size {
                        let i = base + (oy * size + ky) * w + ox * size + kx;
                        if x[i] > best {
                            best = x[i];
                            bi = i;
                        }
                    }
                }
                let o = (p * ho + oy) * wo + ox;
                y[o] = best;
                arg[o] = bi;
            }
        }
    }
}

pub(crate) fn maxpool_backward(dy: &[f64], arg: &[usize], dx: &mut [f64]) {
    dx.iter_mut().for_each(|v| *v = 0.0);
    for (&g, &i) in dy.iter().zip(arg) {
        dx[i] += g;
    }
}

pub(crate) fn avgpool_forward(x: &[f64], nc: usize, h: usize, w: usize, size: usize, y: &mut [f64]) {
    let (ho, wo) = (h / size, w / size);
    let inv = 1.0 / (size * size) as f64;
    for p in 0..nc {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ky in 0..size {
                    for kx in 0..size {
                        acc += x[base + (oy * size + ky) * w + ox * size + kx];
                    }
                }
                y[(p * ho + oy) * wo + ox] = acc * inv;
            }
        }
    }
}

pub(crate) fn avgpool_backward(dy: &[f64], nc: usize, h: usize, w: usize, size: usize, dx: &mut [f64]) {
    let (ho, wo) = (h / size, w / size);
    let inv = 1.0 / (size * size) as f64;
    dx.iter_mut().for_each(|v| *v = 0.0);
    for p in 0..nc {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dy[(p * ho + oy) * wo + ox] * inv;
                for ky in 0..size {
                    for kx in 0..size {
                        dx[base + (oy * size + ky) * w + ox * size + kx] += g;
                    }
                }
            }
        }
    }
}

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

/// Batch-statistics normalization over `(N, spatial)` per channel.
/// Returns `(x̂, 1/σ, batch mean, batch variance)`.
pub(crate) fn batchnorm_train(
    x: &[f64],
    n: usize,
    c: usize,
    plane: usize,
    gamma: &[f64],
    beta: &[f64],
    y: &mut [f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let count = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            mean[ch] += x[off..off + plane].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            var[ch] += x[off..off + plane].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            for i in off..off + plane {
                xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                y[i] = gamma[ch] * xhat[i] + beta[ch];
            }
        }
    }
    (xhat, inv_std, mean, var)
}

pub(crate) fn batchnorm_eval(
    x: &[f64],
    n: usize,
    c: usize,
    plane: usize,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    y: &mut [f64],
) {
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            let inv = 1.0 / (var[ch] + BN_EPS).sqrt();
            for i in off..off + plane {
                y[i] = gamma[ch] * (x[i] - mean[ch]) * inv + beta[ch];
            }
        }
    }
}

pub(crate) struct BnGrads {
    pub dx: Vec<f64>,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
}

pub(crate) fn batchnorm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    n: usize,
    c: usize,
    plane: usize,
) -> BnGrads {
    let count = (n * plane) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            for i in off..off + plane {
                dgamma[ch] += dy[i] * xhat[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            let k = gamma[ch] * inv_std[ch] / count;
            for i in off..off + plane {
                dx[i] = k * (count * dy[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
            }
        }
    }
    BnGrads { dx, dgamma, dbeta }
}

/// Mean cross-entropy of softmax(logits); returns `(loss, dlogits, correct)`.
pub(crate) fn softmax_xent(logits: &[f64], labels: &[u8], classes: usize) -> (f64, Vec<f64>, usize) {
    let n = labels.len();
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    let mut correct = 0;
    for (s, &label) in labels.iter().enumerate() {
        let row = &logits[s * classes..(s + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label as usize];
        if argmax(row) == label as usize {
            correct += 1;
        }
        let g = &mut grad[s * classes..(s + 1) * classes];
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - log_z).exp() / n as f64;
        }
        g[label as usize] -= 1.0 / n as f64;
    }
    (loss / n as f64, grad, correct)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
