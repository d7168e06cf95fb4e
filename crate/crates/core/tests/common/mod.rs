//! Brute-force reference implementations shared by the integration suites.
//! Everything here is written as direct loops over the defining sums and
//! shares no code with the library beyond its data types.
#![allow(dead_code, clippy::needless_range_loop)]

use cst_core::optics::{CodedAperture, HsiCube};
use cst_core::rng::{streams, Stream};
use cst_core::sah_msa::{AttentionWeights, HashParams};
use cst_core::Tensor;

pub fn rng(seed: u64) -> Stream {
    Stream::new(seed, streams::TEST)
}

pub fn random_cube(r: &mut Stream, h: usize, w: usize, nb: usize) -> HsiCube {
    HsiCube::new(h, w, nb, (0..h * w * nb).map(|_| r.uniform()).collect()).unwrap()
}

pub fn random_aperture(r: &mut Stream, h: usize, w: usize) -> CodedAperture {
    CodedAperture::new(
        h,
        w,
        (0..h * w).map(|_| if r.bernoulli(0.5) { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap()
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `f[y][x][n] * m[y][x]`.
pub fn modulate(f: &[f64], m: &[f64], h: usize, w: usize, nb: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w * nb];
    for y in 0..h {
        for x in 0..w {
            for n in 0..nb {
                out[(y * w + x) * nb + n] = f[(y * w + x) * nb + n] * m[y * w + x];
            }
        }
    }
    out
}

/// `out[y][j][n] = f[y][j - d n][n]` when in range, else 0.
pub fn disperse(f: &[f64], h: usize, w: usize, nb: usize, d: usize) -> Vec<f64> {
    let wide = w + d * (nb - 1);
    let mut out = vec![0.0; h * wide * nb];
    for y in 0..h {
        for j in 0..wide {
            for n in 0..nb {
                if j >= d * n && j - d * n < w {
                    out[(y * wide + j) * nb + n] = f[(y * w + j - d * n) * nb + n];
                }
            }
        }
    }
    out
}

/// `Y[y][j] = sum_n fpp[y][j][n] + g[y][j]`.
pub fn integrate(fpp: &[f64], h: usize, wide: usize, nb: usize, g: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; h * wide];
    for y in 0..h {
        for j in 0..wide {
            let mut s = 0.0;
            for n in 0..nb {
                s += fpp[(y * wide + j) * nb + n];
            }
            out[y * wide + j] = s + g.map_or(0.0, |g| g[y * wide + j]);
        }
    }
    out
}

/// `H[y][x][n] = Y[y][x + d n]`.
pub fn shift_back(yv: &[f64], h: usize, wide: usize, nb: usize, d: usize) -> Vec<f64> {
    let w = wide - d * (nb - 1);
    let mut out = vec![0.0; h * w * nb];
    for y in 0..h {
        for x in 0..w {
            for n in 0..nb {
                out[(y * w + x) * nb + n] = yv[y * wide + x + d * n];
            }
        }
    }
    out
}

/// Mean over bands of `|a - b|` per pixel.
pub fn reference_mask(a: &[f64], b: &[f64], h: usize, w: usize, nb: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for p in 0..h * w {
        let mut s = 0.0;
        for n in 0..nb {
            s += (a[p * nb + n] - b[p * nb + n]).abs();
        }
        out[p] = s / nb as f64;
    }
    out
}

pub fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s / a.len() as f64
}

/// Pooled patch means, then `k` repeated arg-max picks (first index wins ties).
pub fn select(m: &[f64], h: usize, w: usize, patch: usize, k: usize) -> Vec<u8> {
    let (rows, cols) = (h / patch, w / patch);
    let mut pooled = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let mut s = 0.0;
            for y in 0..patch {
                for x in 0..patch {
                    s += m[(r * patch + y) * w + c * patch + x];
                }
            }
            pooled[r * cols + c] = s / (patch * patch) as f64;
        }
    }
    let mut grid = vec![0u8; rows * cols];
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..pooled.len() {
            if grid[i] == 0 && best.is_none_or(|b| pooled[i] > pooled[b]) {
                best = Some(i);
            }
        }
        grid[best.unwrap()] = 1;
    }
    grid
}

/// Average pool by `f` and keep cells whose mean is at least one half.
pub fn pool(grid: &[u8], rows: usize, cols: usize, f: usize) -> Vec<u8> {
    let (or, oc) = (rows / f, cols / f);
    let mut out = vec![0u8; or * oc];
    for r in 0..or {
        for c in 0..oc {
            let mut s = 0.0;
            for y in 0..f {
                for x in 0..f {
                    s += grid[(r * f + y) * cols + c * f + x] as f64;
                }
            }
            out[r * oc + c] = (s / (f * f) as f64 >= 0.5) as u8;
        }
    }
    out
}

pub fn hash(x: &[f64], hp: &HashParams) -> i64 {
    let mut s = 0.0;
    for i in 0..x.len() {
        s += hp.a[i] * x[i];
    }
    ((s + hp.b) / hp.r).floor() as i64
}

/// Selection sort on `(code, index)`.
pub fn sorted_order(codes: &[i64]) -> Vec<usize> {
    let mut used = vec![false; codes.len()];
    let mut order = Vec::with_capacity(codes.len());
    for _ in 0..codes.len() {
        let mut best = usize::MAX;
        for i in 0..codes.len() {
            if !used[i] && (best == usize::MAX || codes[i] < codes[best]) {
                best = i;
            }
        }
        used[best] = true;
        order.push(best);
    }
    order
}

#[derive(Clone)]
pub struct RoundOracle {
    /// `[N][heads * d]`.
    pub heads: Vec<Vec<f64>>,
    /// `[N][heads]` sum of normalized attention.
    pub mass: Vec<Vec<f64>>,
    /// `[N][heads]` sum of `exp(logit)`.
    pub raw_mass: Vec<Vec<f64>>,
}

fn row(t: &Tensor, i: usize) -> &[f64] {
    let c = t.shape()[1];
    &t.data()[i * c..(i + 1) * c]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Dense attention where query `q` only sees keys with the same bucket label.
pub fn masked_attention(x: &[Vec<f64>], bucket: &[usize], w: &AttentionWeights) -> RoundOracle {
    let n = x.len();
    let d = w.head_dim;
    let proj = |m: &Tensor, v: &[f64]| -> Vec<f64> { (0..m.shape()[0]).map(|r| dot(row(m, r), v)).collect() };
    let q: Vec<Vec<f64>> = x.iter().map(|v| proj(&w.u, v)).collect();
    let k: Vec<Vec<f64>> = x.iter().map(|v| proj(&w.v, v)).collect();
    let val: Vec<Vec<f64>> = x.iter().map(|v| proj(&w.w_val, v)).collect();
    let mut heads = vec![vec![0.0; w.heads * d]; n];
    let mut mass = vec![vec![0.0; w.heads]; n];
    let mut raw_mass = vec![vec![0.0; w.heads]; n];
    for h in 0..w.heads {
        let s = h * d..(h + 1) * d;
        for qi in 0..n {
            let keys: Vec<usize> = (0..n).filter(|&j| bucket[j] == bucket[qi]).collect();
            let logits: Vec<f64> = keys
                .iter()
                .map(|&j| dot(&q[qi][s.clone()], &k[j][s.clone()]) / (d as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            raw_mass[qi][h] = z * mx.exp();
            for (ki, &j) in keys.iter().enumerate() {
                let a = e[ki] / z;
                mass[qi][h] += a;
                for c in 0..d {
                    heads[qi][h * d + c] += a * val[j][h * d + c];
                }
            }
        }
    }
    RoundOracle { heads, mass, raw_mass }
}

/// Per-(query, head) weighted round sum followed by the output projection.
pub fn merge_rounds(rounds: &[RoundOracle], w: &AttentionWeights, logit_mass: bool) -> Vec<Vec<f64>> {
    let n = rounds[0].heads.len();
    let d = w.head_dim;
    let c = w.w_out.shape()[0];
    let mut out = vec![vec![0.0; c]; n];
    for qi in 0..n {
        let mut merged = vec![0.0; w.heads * d];
        for h in 0..w.heads {
            let score = |r: &RoundOracle| if logit_mass { r.raw_mass[qi][h] } else { r.mass[qi][h] };
            let denom: f64 = rounds.iter().map(score).sum();
            for r in rounds {
                let wt = score(r) / denom;
                for e in 0..d {
                    merged[h * d + e] += wt * r.heads[qi][h * d + e];
                }
            }
        }
        for o in 0..c {
            out[qi][o] = dot(row(&w.w_out, o), &merged);
        }
    }
    out
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| row(t, i).to_vec()).collect()
}

/// Direct 2-D convolution, channels-last, `[Cout, Cin/g, k, k]` weights.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    wt: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    groups: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let wo = (w + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let (cig, cog) = (cin / groups, cout / groups);
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let gi = co / cog;
                let mut s = 0.0;
                for ci in 0..cig {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky * dil) as isize - pad as isize;
                            let ix = (ox * stride + kx * dil) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xin = x[(iy as usize * w + ix as usize) * cin + gi * cig + ci];
                            s += xin * wt[((co * cig + ci) * k + ky) * k + kx];
                        }
                    }
                }
                out[(oy * wo + ox) * cout + co] = s;
            }
        }
    }
    (out, ho, wo)
}

/// Direct transposed convolution (scatter form), `[Cin, Cout, k, k]` weights, no groups.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d(
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    wt: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h - 1) * stride + k - 2 * pad;
    let wo = (w - 1) * stride + k - 2 * pad;
    let mut out = vec![0.0; ho * wo * cout];
    for iy in 0..h {
        for ix in 0..w {
            for ci in 0..cin {
                let v = x[(iy * w + ix) * cin + ci];
                for ky in 0..k {
                    for kx in 0..k {
                        let oy = (iy * stride + ky) as isize - pad as isize;
                        let ox = (ix * stride + kx) as isize - pad as isize;
                        if oy < 0 || ox < 0 || oy >= ho as isize || ox >= wo as isize {
                            continue;
                        }
                        for co in 0..cout {
                            out[(oy as usize * wo + ox as usize) * cout + co] +=
                                v * wt[((ci * cout + co) * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
    (out, ho, wo)
}

/// Windowed statistics computed separately per window, Gaussian weights
/// from the closed form.
pub fn ssim(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, r) in win.iter_mut().enumerate() {
        for (j, v) in r.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for oy in 0..=h - 11 {
        for ox in 0..=w - 11 {
            let at = |img: &[f64], i: usize, j: usize| img[(oy + i) * w + ox + j];
            let wt = |i: usize, j: usize| win[i][j] / total;
            let mut mx = 0.0;
            let mut my = 0.0;
            for i in 0..11 {
                for j in 0..11 {
                    mx += wt(i, j) * at(x, i, j);
                    my += wt(i, j) * at(y, i, j);
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let (a, b) = (at(x, i, j) - mx, at(y, i, j) - my);
                    vx += wt(i, j) * a * a;
                    vy += wt(i, j) * b * b;
                    cxy += wt(i, j) * a * b;
                }
            }
            acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}
