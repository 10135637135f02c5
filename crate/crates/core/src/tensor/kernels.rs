//! Raw `f64` kernels behind the graph operations.
//!
//! Every kernel works on flat row-major slices. The graph converts its
//! storage type to `f64` at the boundary, so accumulation is always 64-bit.

/// Variance floor inside layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-6;

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    c
}

/// `c[m×k] = a[m×n] · b[k×n]ᵀ`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] = dot(arow, brow);
        }
    }
    c
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &mut c[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    c
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Geometry of a stride-1, zero-padded ("same") 2D convolution over HWC data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub height: usize,
    pub width: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl ConvDims {
    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }

    /// Iterates the in-bounds taps of output pixel `(y, x)` as
    /// `(input pixel index, kernel tap index)`.
    fn taps(&self, y: usize, x: usize, mut f: impl FnMut(usize, usize)) {
        let pad = self.pad();
        for ky in 0..self.kernel {
            let iy = y as isize + ky as isize - pad;
            if iy < 0 || iy >= self.height as isize {
                continue;
            }
            for kx in 0..self.kernel {
                let ix = x as isize + kx as isize - pad;
                if ix < 0 || ix >= self.width as isize {
                    continue;
                }
                f(iy as usize * self.width + ix as usize, ky * self.kernel + kx);
            }
        }
    }
}

/// Cross-correlation of `x[H×W×Cin]` with `w[k×k×Cin×Cout]`.
pub fn conv2d(x: &[f64], w: &[f64], d: ConvDims) -> Vec<f64> {
    let (cin, cout) = (d.cin, d.cout);
    let mut out = vec![0.0; d.height * d.width * cout];
    for y in 0..d.height {
        for xx in 0..d.width {
            let o = (y * d.width + xx) * cout;
            let acc = &mut out[o..o + cout];
            d.taps(y, xx, |pix, tap| {
                let xin = &x[pix * cin..(pix + 1) * cin];
                let wt = &w[tap * cin * cout..(tap + 1) * cin * cout];
                for (ci, &xv) in xin.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &wt[ci * cout..(ci + 1) * cout];
                    for (a, &wv) in acc.iter_mut().zip(wrow) {
                        *a += xv * wv;
                    }
                }
            });
        }
    }
    out
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward(x: &[f64], w: &[f64], dout: &[f64], d: ConvDims) -> (Vec<f64>, Vec<f64>) {
    let (cin, cout) = (d.cin, d.cout);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    for y in 0..d.height {
        for xx in 0..d.width {
            let o = (y * d.width + xx) * cout;
            let g = &dout[o..o + cout];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            d.taps(y, xx, |pix, tap| {
                let xin = &x[pix * cin..(pix + 1) * cin];
                let wt = &w[tap * cin * cout..(tap + 1) * cin * cout];
                let dwt = &mut dw[tap * cin * cout..(tap + 1) * cin * cout];
                let dxin = &mut dx[pix * cin..(pix + 1) * cin];
                for ci in 0..cin {
                    let wrow = &wt[ci * cout..(ci + 1) * cout];
                    dxin[ci] += wrow.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    let xv = xin[ci];
                    if xv != 0.0 {
                        let dwrow = &mut dwt[ci * cout..(ci + 1) * cout];
                        for (a, &gv) in dwrow.iter_mut().zip(g) {
                            *a += xv * gv;
                        }
                    }
                }
            });
        }
    }
    (dx, dw)
}

/// Output index of input element `(i, j, ch)` under sub-pixel shuffling.
///
/// Channels are split into `r²` contiguous groups; group `g` of pixel
/// `(i, j)` lands on output pixel `(r·i + g / r, r·j + g % r)`.
#[inline]
fn shuffle_index(i: usize, j: usize, ch: usize, w: usize, c: usize, r: usize) -> usize {
    let group_len = c / (r * r);
    let g = ch / group_len;
    let k = ch % group_len;
    let oi = r * i + g / r;
    let oj = r * j + g % r;
    (oi * (r * w) + oj) * group_len + k
}

/// `[H×W×C] → [rH×rW×C/r²]`. Pure rearrangement.
pub fn pixel_shuffle<V: Copy + Default>(x: &[V], h: usize, w: usize, c: usize, r: usize) -> Vec<V> {
    let mut out = vec![V::default(); x.len()];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                out[shuffle_index(i, j, ch, w, c, r)] = x[(i * w + j) * c + ch];
            }
        }
    }
    out
}

/// Inverse of [`pixel_shuffle`]; `h, w, c` describe the *low-resolution* side.
pub fn pixel_unshuffle<V: Copy + Default>(y: &[V], h: usize, w: usize, c: usize, r: usize) -> Vec<V> {
    let mut out = vec![V::default(); y.len()];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                out[(i * w + j) * c + ch] = y[shuffle_index(i, j, ch, w, c, r)];
            }
        }
    }
    out
}

/// Row-wise normalization to zero mean, unit variance. Returns the output
/// and the per-row inverse standard deviations.
pub fn layernorm_rows(x: &[f64], cols: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut y = vec![0.0; x.len()];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
        inv[r] = is;
        for (o, v) in y[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    (y, inv)
}

/// Backward of [`layernorm_rows`] given its normalized output.
pub fn layernorm_rows_backward(yhat: &[f64], inv_std: &[f64], dy: &[f64], cols: usize) -> Vec<f64> {
    let n = cols as f64;
    let mut dx = vec![0.0; dy.len()];
    for (r, &is) in inv_std.iter().enumerate() {
        let s = r * cols..(r + 1) * cols;
        let (yr, gr) = (&yhat[s.clone()], &dy[s.clone()]);
        let mean_g = gr.iter().sum::<f64>() / n;
        let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n;
        for ((o, &g), &y) in dx[s].iter_mut().zip(gr).zip(yr) {
            *o = is * (g - mean_g - y * mean_gy);
        }
    }
    dx
}

pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (yr, xr) in y.chunks_mut(cols).zip(x.chunks(cols)) {
        let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (o, &v) in yr.iter_mut().zip(xr) {
            *o = (v - m).exp();
            s += *o;
        }
        for o in yr.iter_mut() {
            *o /= s;
        }
    }
    y
}

pub fn softmax_rows_backward(y: &[f64], dy: &[f64], cols: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((dr, yr), gr) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(dy.chunks(cols)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    dx
}

fn head_cols(x: &[f64], rows: usize, width: usize, start: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * d);
    for r in 0..rows {
        out.extend_from_slice(&x[r * width + start..r * width + start + d]);
    }
    out
}

fn put_head_cols(dst: &mut [f64], src: &[f64], rows: usize, width: usize, start: usize, d: usize) {
    for r in 0..rows {
        dst[r * width + start..r * width + start + d].copy_from_slice(&src[r * d..(r + 1) * d]);
    }
}

/// Multi-head scaled dot-product attention. `q` is `[nq×c]`, `k` and `v`
/// are `[nk×c]`; head `h` uses columns `h·c/heads ..`. Returns the merged
/// output `[nq×c]` and the per-head probabilities `[heads×nq×nk]`.
pub fn attention(q: &[f64], k: &[f64], v: &[f64], nq: usize, nk: usize, c: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; nq * c];
    let mut probs = Vec::with_capacity(heads * nq * nk);
    for h in 0..heads {
        let (qh, kh, vh) = (head_cols(q, nq, c, h * d, d), head_cols(k, nk, c, h * d, d), head_cols(v, nk, c, h * d, d));
        let mut s = matmul_nt(&qh, &kh, nq, d, nk);
        s.iter_mut().for_each(|x| *x *= scale);
        let a = softmax_rows(&s, nk);
        put_head_cols(&mut out, &matmul(&a, &vh, nq, nk, d), nq, c, h * d, d);
        probs.extend_from_slice(&a);
    }
    (out, probs)
}

/// Gradients of [`attention`] with respect to `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dy: &[f64],
    nq: usize,
    nk: usize,
    c: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let (mut dq, mut dk, mut dv) = (vec![0.0; nq * c], vec![0.0; nk * c], vec![0.0; nk * c]);
    for h in 0..heads {
        let (qh, kh, vh) = (head_cols(q, nq, c, h * d, d), head_cols(k, nk, c, h * d, d), head_cols(v, nk, c, h * d, d));
        let gh = head_cols(dy, nq, c, h * d, d);
        let a = &probs[h * nq * nk..(h + 1) * nq * nk];
        put_head_cols(&mut dv, &matmul_tn(a, &gh, nq, nk, d), nk, c, h * d, d);
        let da = matmul_nt(&gh, &vh, nq, d, nk);
        let mut ds = softmax_rows_backward(a, &da, nk);
        ds.iter_mut().for_each(|x| *x *= scale);
        put_head_cols(&mut dq, &matmul(&ds, &kh, nq, nk, d), nq, c, h * d, d);
        put_head_cols(&mut dk, &matmul_tn(&ds, &qh, nq, nk, d), nk, c, h * d, d);
    }
    (dq, dk, dv)
}
