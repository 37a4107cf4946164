//! Independent scalar-loop references and small helpers shared by the
//! integration tests. Nothing here calls into the tensor code paths it checks.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use dae_core::losses::Reduction;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn t64(data: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_slice(data, shape, &Device::Cpu).unwrap()
}

pub fn flat64(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()
}

pub fn scalar64(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Corner-aligned identity coordinates, `(H, W, 2)` flattened.
pub fn identity_grid(h: usize, w: usize) -> Vec<f64> {
    let mut g = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            g.push(-1.0 + 2.0 * j as f64 / (w - 1) as f64);
            g.push(-1.0 + 2.0 * i as f64 / (h - 1) as f64);
        }
    }
    g
}

/// Four-neighbour interpolation with border replication.
/// `src` is `(N, C, HS, WS)`, `grid` is `(N, H, W, 2)`; returns `(N, C, H, W)`.
pub fn bilinear_oracle(
    src: &[f64],
    n: usize,
    c: usize,
    hs: usize,
    ws: usize,
    grid: &[f64],
    h: usize,
    w: usize,
) -> Vec<f64> {
    let locate = |v: f64, size: usize| -> (usize, usize, f64) {
        let p = (v.clamp(-1.0, 1.0) + 1.0) * 0.5 * (size - 1) as f64;
        let lo = (p.floor() as usize).min(size - 2);
        (lo, lo + 1, p - lo as f64)
    };
    let mut out = vec![0.0; n * c * h * w];
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let g = ((b * h + i) * w + j) * 2;
                let (x0, x1, fx) = locate(grid[g], ws);
                let (y0, y1, fy) = locate(grid[g + 1], hs);
                for ch in 0..c {
                    let at = |y: usize, x: usize| src[((b * c + ch) * hs + y) * ws + x];
                    let v = (1.0 - fx) * (1.0 - fy) * at(y0, x0)
                        + fx * (1.0 - fy) * at(y0, x1)
                        + (1.0 - fx) * fy * at(y1, x0)
                        + fx * fy * at(y1, x1);
                    out[((b * c + ch) * h + i) * w + j] = v;
                }
            }
        }
    }
    out
}

/// Exclusive prefix sums from `(-1, -1)`; `dx`, `dy` are `(N, H, W)`.
pub fn integrate_oracle(dx: &[f64], dy: &[f64], n: usize, h: usize, w: usize) -> Vec<f64> {
    let mut g = vec![0.0; n * h * w * 2];
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let mut x = -1.0;
                for k in 1..=j {
                    x += dx[(b * h + i) * w + k];
                }
                let mut y = -1.0;
                for k in 1..=i {
                    y += dy[(b * h + k) * w + j];
                }
                let o = ((b * h + i) * w + j) * 2;
                g[o] = x;
                g[o + 1] = y;
            }
        }
    }
    g
}

/// Applies `theta[b]` (row-major 2x3) to every point of `grid[b]`.
pub fn compose_oracle(theta: &[f64], grid: &[f64], n: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    for b in 0..n {
        let t = &theta[b * 6..b * 6 + 6];
        for p in 0..hw {
            let o = (b * hw + p) * 2;
            let (x, y) = (grid[o], grid[o + 1]);
            out[o] = t[0] * x + t[1] * y + t[2];
            out[o + 1] = t[3] * x + t[4] * y + t[5];
        }
    }
    out
}

pub fn mean_oracle(data: &[f64], n: usize) -> Vec<f64> {
    let len = data.len() / n;
    (0..len)
        .map(|k| (0..n).map(|b| data[b * len + k]).sum::<f64>() / n as f64)
        .collect()
}

fn reduce(sum: f64, count: usize, r: Reduction) -> f64 {
    match r {
        Reduction::Mean => sum / count as f64,
        Reduction::Sum => sum,
    }
}

/// Per-axis L1 total variation of `(N, K, H, W)` maps, axes reduced separately.
pub fn tv_oracle(m: &[f64], nk: usize, h: usize, w: usize, r: Reduction) -> f64 {
    let (mut sx, mut sy) = (0.0, 0.0);
    for b in 0..nk {
        for i in 0..h {
            for j in 0..w {
                let v = m[(b * h + i) * w + j];
                if j + 1 < w {
                    sx += (m[(b * h + i) * w + j + 1] - v).abs();
                }
                if i + 1 < h {
                    sy += (m[(b * h + i + 1) * w + j] - v).abs();
                }
            }
        }
    }
    reduce(sx, nk * h * (w - 1), r) + reduce(sy, nk * (h - 1) * w, r)
}

/// Squared forward differences of `(N, K, H, W)` maps, axes reduced separately.
pub fn grad_sq_oracle(m: &[f64], nk: usize, h: usize, w: usize, r: Reduction) -> f64 {
    let (mut sx, mut sy) = (0.0, 0.0);
    for b in 0..nk {
        for i in 0..h {
            for j in 0..w {
                let v = m[(b * h + i) * w + j];
                if j + 1 < w {
                    sx += (m[(b * h + i) * w + j + 1] - v).powi(2);
                }
                if i + 1 < h {
                    sy += (m[(b * h + i + 1) * w + j] - v).powi(2);
                }
            }
        }
    }
    reduce(sx, nk * h * (w - 1), r) + reduce(sy, nk * (h - 1) * w, r)
}

pub fn mse_oracle(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// `l_a |mean theta - S_0|^2 + l_w |mean W - W_0|^2`.
pub fn bias_oracle(
    theta: &[f64],
    grid: &[f64],
    n: usize,
    h: usize,
    w: usize,
    la: f64,
    lw: f64,
    r: Reduction,
) -> f64 {
    let s0 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    let mt = mean_oracle(theta, n);
    let a: f64 = mt.iter().zip(s0).map(|(m, s)| (m - s).powi(2)).sum();
    let mg = mean_oracle(grid, n);
    let w0 = identity_grid(h, w);
    let f: f64 = mg.iter().zip(&w0).map(|(m, s)| (m - s).powi(2)).sum();
    la * reduce(a, 6, r) + lw * reduce(f, h * w * 2, r)
}

pub fn lsgan_g_oracle(fake: &[f64]) -> f64 {
    0.5 * fake.iter().map(|f| (f - 1.0).powi(2)).sum::<f64>() / fake.len() as f64
}

pub fn lsgan_d_oracle(real: &[f64], fake: &[f64]) -> f64 {
    let r = real.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / real.len() as f64;
    let f = fake.iter().map(|v| v * v).sum::<f64>() / fake.len() as f64;
    0.5 * (r + f)
}

pub fn cross_entropy_oracle(logits: &[f64], labels: &[u32], k: usize) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for (b, &l) in labels.iter().enumerate() {
        let row = &logits[b * k..(b + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[l as usize];
    }
    total / n as f64
}

/// Worst relative disagreement between the autodiff gradient of `f` at `x0`
/// and central differences with step `h`. Entries where both are below
/// `floor` are skipped.
pub fn gradient_check(
    x0: &[f64],
    shape: &[usize],
    h: f64,
    floor: f64,
    f: impl Fn(&Tensor) -> Tensor,
) -> f64 {
    let var = Var::from_tensor(&t64(x0, shape)).unwrap();
    let loss = f(var.as_tensor());
    let grads = loss.backward().unwrap();
    let analytic = flat64(
        grads
            .get(var.as_tensor())
            .expect("no gradient reached the input"),
    );
    let mut worst: f64 = 0.0;
    let mut x = x0.to_vec();
    for k in 0..x0.len() {
        x[k] = x0[k] + h;
        let up = scalar64(&f(&t64(&x, shape)));
        x[k] = x0[k] - h;
        let down = scalar64(&f(&t64(&x, shape)));
        x[k] = x0[k];
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic[k].abs().max(numeric.abs());
        if scale > floor {
            worst = worst.max((analytic[k] - numeric).abs() / scale);
        }
    }
    worst
}

/// Random sampling coordinates that stay inside `[-1, 1]` and at least
/// `margin` pixels from any grid line, so the interpolant is smooth there.
pub fn interior_grid(
    rng: &mut ChaCha8Rng,
    n: usize,
    h: usize,
    w: usize,
    hs: usize,
    ws: usize,
    margin: f64,
) -> Vec<f64> {
    let mut g = Vec::with_capacity(n * h * w * 2);
    for _ in 0..n * h * w {
        for size in [ws, hs] {
            let cell = rng.random_range(0..size - 1) as f64;
            let frac = rng.random_range(margin..1.0 - margin);
            g.push(-1.0 + 2.0 * (cell + frac) / (size - 1) as f64);
        }
    }
    g
}
