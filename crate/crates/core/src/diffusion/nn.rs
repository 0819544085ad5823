//! Layer primitives with explicit backward passes.
//!
//! Feature maps are `(pixels, channels)` matrices in row-major pixel order,
//! so 1×1 convolutions, linear maps and attention are plain GEMMs.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_map(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(silu)
}

/// `dy * silu'(pre)`
pub fn silu_back(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    out.zip_mut_with(pre, |d, &p| *d *= silu_grad(p));
    out
}

/// Sinusoidal code of a scalar position, `dim` entries (sin half, cos half).
pub fn sinusoid(pos: f64, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half.max(1) as f64).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
    out
}

/// Gathers 3×3 neighbourhoods (zero padded) into rows of `9·C` values.
pub fn im2col3(x: ArrayView2<f64>, h: usize, w: usize) -> Array2<f64> {
    let c = x.ncols();
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut cols = Array2::<f64>::zeros((h * w, 9 * c));
    let dst = cols.as_slice_mut().expect("fresh array");
    for y in 0..h {
        for xx in 0..w {
            let row = (y * w + xx) * 9 * c;
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let from = (sy as usize * w + sx as usize) * c;
                    let to = row + (ky * 3 + kx) * c;
                    dst[to..to + c].copy_from_slice(&src[from..from + c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`].
pub fn col2im3(cols: &Array2<f64>, h: usize, w: usize, c: usize) -> Array2<f64> {
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let mut out = Array2::<f64>::zeros((h * w, c));
    let dst = out.as_slice_mut().expect("fresh array");
    for y in 0..h {
        for xx in 0..w {
            let row = (y * w + xx) * 9 * c;
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let to = (sy as usize * w + sx as usize) * c;
                    let from = row + (ky * 3 + kx) * c;
                    for i in 0..c {
                        dst[to + i] += src[from + i];
                    }
                }
            }
        }
    }
    out
}

/// `x·W + b` with `b` broadcast over rows.
pub fn affine(x: ArrayView2<f64>, weight: ArrayView2<f64>, bias: ArrayView1<f64>) -> Array2<f64> {
    let mut out = x.dot(&weight);
    out += &bias;
    out
}

/// Gradients of `y = x·W + b`.
pub struct AffineGrads {
    pub dx: Array2<f64>,
    pub dw: Option<Array2<f64>>,
    pub db: Option<Array1<f64>>,
}

pub fn affine_back(x: ArrayView2<f64>, weight: ArrayView2<f64>, dy: &Array2<f64>, want_params: bool) -> AffineGrads {
    AffineGrads {
        dx: dy.dot(&weight.t()),
        dw: want_params.then(|| x.t().dot(dy)),
        db: want_params.then(|| dy.sum_axis(Axis(0))),
    }
}

pub fn avgpool2(x: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (oh, ow, c) = (h / 2, w / 2, x.ncols());
    let mut out = Array2::zeros((oh * ow, c));
    for y in 0..oh {
        for xx in 0..ow {
            let mut row = out.row_mut(y * ow + xx);
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                row += &x.row((2 * y + dy) * w + 2 * xx + dx);
            }
            row *= 0.25;
        }
    }
    out
}

pub fn avgpool2_back(dy: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (ow, c) = (w / 2, dy.ncols());
    let mut out = Array2::zeros((h * w, c));
    for y in 0..h {
        for xx in 0..w {
            let mut row = out.row_mut(y * w + xx);
            row.assign(&dy.row((y / 2) * ow + xx / 2));
            row *= 0.25;
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling from `(h, w)` to `(2h, 2w)`.
pub fn upsample2(x: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (uh, uw, c) = (2 * h, 2 * w, x.ncols());
    let mut out = Array2::zeros((uh * uw, c));
    for y in 0..uh {
        for xx in 0..uw {
            out.row_mut(y * uw + xx).assign(&x.row((y / 2) * w + xx / 2));
        }
    }
    out
}

pub fn upsample2_back(dy: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (uw, c) = (2 * w, dy.ncols());
    let mut out = Array2::zeros((h * w, c));
    for y in 0..2 * h {
        for xx in 0..uw {
            let mut row = out.row_mut((y / 2) * w + xx / 2);
            row += &dy.row(y * uw + xx);
        }
    }
    out
}

/// Row-wise softmax in place.
pub fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Cached state of multi-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// One `(queries, keys)` probability matrix per head.
    pub probs: Vec<Array2<f64>>,
}

/// `softmax(q_h k_hᵀ / √d_h) v_h` per head, concatenated along channels.
pub fn attention(q: Array2<f64>, k: Array2<f64>, v: Array2<f64>, heads: usize) -> (Array2<f64>, AttentionCache) {
    let da = q.ncols();
    let dh = da / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((q.nrows(), v.ncols()));
    let mut probs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let cols = s![.., hd * dh..(hd + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores *= scale;
        softmax_rows(&mut scores);
        out.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    (out, AttentionCache { q, k, v, probs })
}

/// Returns `(dq, dk, dv)`.
pub fn attention_back(d_out: &Array2<f64>, cache: &AttentionCache) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let heads = cache.probs.len();
    let dh = cache.q.ncols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for (hd, p) in cache.probs.iter().enumerate() {
        let cols = s![.., hd * dh..(hd + 1) * dh];
        let d_o = d_out.slice(cols);
        dv.slice_mut(cols).assign(&p.t().dot(&d_o));
        let dp = d_o.dot(&cache.v.slice(cols).t());
        // softmax Jacobian: ds = p ⊙ (dp − Σ_j dp·p)
        let mut ds = &dp * p;
        let row_sums = ds.sum_axis(Axis(1));
        ds -= &(p * &row_sums.insert_axis(Axis(1)));
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (h, w, c) = (3, 4, 2);
        let x = Array2::from_shape_fn((h * w, c), |(i, j)| (i * 3 + j) as f64 * 0.1 - 0.7);
        let g = Array2::from_shape_fn((h * w, 9 * c), |(i, j)| ((i * 7 + j * 5) % 11) as f64 - 5.0);
        let lhs = (&im2col3(x.view(), h, w) * &g).sum();
        let rhs = (&x * &col2im3(&g, h, w, c)).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn pool_and_upsample_are_adjoint_pairs() {
        let x = Array2::from_shape_fn((16, 3), |(i, j)| (i as f64).sin() + j as f64);
        let g = Array2::from_shape_fn((4, 3), |(i, j)| (i * j) as f64 + 0.5);
        let lhs = (&avgpool2(&x, 4, 4) * &g).sum();
        let rhs = (&x * &avgpool2_back(&g, 4, 4)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let lhs = (&upsample2(&g, 2, 2) * &x).sum();
        let rhs = (&g * &upsample2_back(&x, 2, 2)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut m = array![[1.0, 2.0, 3.0], [1000.0, 1000.0, -1000.0]];
        softmax_rows(&mut m);
        for row in m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        let q = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 4 + j) as f64 * 0.37).sin());
        let k = Array2::from_shape_fn((3, 4), |(i, j)| ((i * 4 + j) as f64 * 0.71).cos());
        let v = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 - j as f64) * 0.3);
        let g = Array2::from_shape_fn((5, 4), |(i, j)| ((i + 2 * j) as f64 * 0.13).sin());
        let f = |q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>| (&attention(q.clone(), k.clone(), v.clone(), 2).0 * &g).sum();
        let (_, cache) = attention(q.clone(), k.clone(), v.clone(), 2);
        let (dq, dk, dv) = attention_back(&g, &cache);
        let h = 1e-6;
        for (which, analytic) in [(0, &dq), (1, &dk), (2, &dv)] {
            for idx in [(0, 0), (1, 3), (2, 1)] {
                let mut mats = [q.clone(), k.clone(), v.clone()];
                mats[which][idx] += h;
                let up = f(&mats[0], &mats[1], &mats[2]);
                mats[which][idx] -= 2.0 * h;
                let down = f(&mats[0], &mats[1], &mats[2]);
                let numeric = (up - down) / (2.0 * h);
                assert!((numeric - analytic[idx]).abs() < 1e-8, "{which} {idx:?}");
            }
        }
    }
}
