//! Bilinear grid sampling with analytic gradients for both the source image
//! and the sampling coordinates.

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor, WithDType};

use super::{ensure_finite, WarpField};
use crate::error::{DaeError, Result};

/// Looks up `source` (`(N, C, Hs, Ws)`) at every coordinate of `field`,
/// producing `(N, C, H, W)` where `(H, W)` is the field resolution.
///
/// Coordinates outside `[-1, 1]` are clamped to the border, so edge pixels
/// are replicated. Source and field batch sizes must agree.
pub fn bilinear_sample(source: &Tensor, field: &WarpField) -> Result<Tensor> {
    let (n, _, _, _) = source.dims4()?;
    let fdims = field.grid.dims();
    if fdims[0] != n {
        return Err(DaeError::invalid(format!(
            "source batch {n} does not match field batch {}",
            fdims[0]
        )));
    }
    if source.dtype() != field.grid.dtype() {
        return Err(DaeError::invalid(format!(
            "source dtype {:?} differs from field dtype {:?}",
            source.dtype(),
            field.grid.dtype()
        )));
    }
    ensure_finite(&field.grid, "sampling field")?;
    let source = source.contiguous()?;
    let grid = field.grid.contiguous()?;
    Ok(source.apply_op2(&grid, GridSample)?)
}

struct GridSample;

/// Precomputed neighbourhood for one output location along one axis.
#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
    /// d(pixel coordinate) / d(normalized coordinate), zero when clamped.
    slope: f64,
}

fn tap(coord: f64, size: usize) -> Tap {
    if size == 1 {
        return Tap {
            lo: 0,
            hi: 0,
            frac: 0.0,
            slope: 0.0,
        };
    }
    let scale = (size - 1) as f64 / 2.0;
    let inside = (-1.0..=1.0).contains(&coord);
    let c = coord.clamp(-1.0, 1.0);
    let pos = (c + 1.0) * scale;
    // The last cell is closed on the right so the border keeps a one-sided slope.
    let lo = (pos.floor() as usize).min(size - 2);
    Tap {
        lo,
        hi: lo + 1,
        frac: pos - lo as f64,
        slope: if inside { scale } else { 0.0 },
    }
}

struct Dims {
    n: usize,
    c: usize,
    hs: usize,
    ws: usize,
    h: usize,
    w: usize,
}

fn dims(source: &Layout, grid: &Layout) -> candle_core::Result<Dims> {
    let (n, c, hs, ws) = source.shape().dims4()?;
    let (gn, h, w, two) = grid.shape().dims4()?;
    if gn != n || two != 2 {
        candle_core::bail!(
            "grid {:?} incompatible with source {:?}",
            grid.shape(),
            source.shape()
        );
    }
    Ok(Dims { n, c, hs, ws, h, w })
}

fn forward<T: WithDType>(src: &[T], grid: &[T], d: &Dims) -> Vec<T> {
    let mut out = vec![T::zero(); d.n * d.c * d.h * d.w];
    for b in 0..d.n {
        for i in 0..d.h {
            for j in 0..d.w {
                let g = ((b * d.h + i) * d.w + j) * 2;
                let tx = tap(grid[g].to_f64(), d.ws);
                let ty = tap(grid[g + 1].to_f64(), d.hs);
                for ch in 0..d.c {
                    let plane = &src[(b * d.c + ch) * d.hs * d.ws..];
                    let v = |y: usize, x: usize| plane[y * d.ws + x].to_f64();
                    let top = (1.0 - tx.frac) * v(ty.lo, tx.lo) + tx.frac * v(ty.lo, tx.hi);
                    let bottom = (1.0 - tx.frac) * v(ty.hi, tx.lo) + tx.frac * v(ty.hi, tx.hi);
                    out[((b * d.c + ch) * d.h + i) * d.w + j] =
                        T::from_f64((1.0 - ty.frac) * top + ty.frac * bottom);
                }
            }
        }
    }
    out
}

fn backward<T: WithDType>(src: &[T], grid: &[T], grad: &[T], d: &Dims) -> (Vec<T>, Vec<T>) {
    let mut g_src = vec![0f64; src.len()];
    let mut g_grid = vec![0f64; grid.len()];
    for b in 0..d.n {
        for i in 0..d.h {
            for j in 0..d.w {
                let g = ((b * d.h + i) * d.w + j) * 2;
                let tx = tap(grid[g].to_f64(), d.ws);
                let ty = tap(grid[g + 1].to_f64(), d.hs);
                let (mut dgx, mut dgy) = (0.0, 0.0);
                for ch in 0..d.c {
                    let go = grad[((b * d.c + ch) * d.h + i) * d.w + j].to_f64();
                    if go == 0.0 {
                        continue;
                    }
                    let base = (b * d.c + ch) * d.hs * d.ws;
                    let idx = |y: usize, x: usize| base + y * d.ws + x;
                    let (v00, v01) = (
                        src[idx(ty.lo, tx.lo)].to_f64(),
                        src[idx(ty.lo, tx.hi)].to_f64(),
                    );
                    let (v10, v11) = (
                        src[idx(ty.hi, tx.lo)].to_f64(),
                        src[idx(ty.hi, tx.hi)].to_f64(),
                    );
                    let (wx, wy) = (tx.frac, ty.frac);
                    g_src[idx(ty.lo, tx.lo)] += go * (1.0 - wx) * (1.0 - wy);
                    g_src[idx(ty.lo, tx.hi)] += go * wx * (1.0 - wy);
                    g_src[idx(ty.hi, tx.lo)] += go * (1.0 - wx) * wy;
                    g_src[idx(ty.hi, tx.hi)] += go * wx * wy;
                    dgx += go * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10));
                    dgy += go * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01));
                }
                g_grid[g] = dgx * tx.slope;
                g_grid[g + 1] = dgy * ty.slope;
            }
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect();
    (cast(g_src), cast(g_grid))
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("grid sample expects contiguous inputs"),
    }
}

impl CustomOp2 for GridSample {
    fn name(&self) -> &'static str {
        "bilinear-grid-sample"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = dims(l1, l2)?;
        let shape = Shape::from((d.n, d.c, d.h, d.w));
        let out = match (s1, s2) {
            (CpuStorage::F32(s), CpuStorage::F32(g)) => {
                CpuStorage::F32(forward(contiguous(s, l1)?, contiguous(g, l2)?, &d))
            }
            (CpuStorage::F64(s), CpuStorage::F64(g)) => {
                CpuStorage::F64(forward(contiguous(s, l1)?, contiguous(g, l2)?, &d))
            }
            _ => candle_core::bail!("grid sample supports matching f32 or f64 inputs"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        source: &Tensor,
        grid: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let d = dims(source.layout(), grid.layout())?;
        let grad_res = grad_res.contiguous()?;
        let (gs, gg) = match source.dtype() {
            DType::F32 => {
                let (a, b) = backward::<f32>(
                    &source.flatten_all()?.to_vec1()?,
                    &grid.flatten_all()?.to_vec1()?,
                    &grad_res.flatten_all()?.to_vec1()?,
                    &d,
                );
                (
                    Tensor::from_vec(a, source.shape(), source.device())?,
                    Tensor::from_vec(b, grid.shape(), grid.device())?,
                )
            }
            DType::F64 => {
                let (a, b) = backward::<f64>(
                    &source.flatten_all()?.to_vec1()?,
                    &grid.flatten_all()?.to_vec1()?,
                    &grad_res.flatten_all()?.to_vec1()?,
                    &d,
                );
                (
                    Tensor::from_vec(a, source.shape(), source.device())?,
                    Tensor::from_vec(b, grid.shape(), grid.device())?,
                )
            }
            dt => candle_core::bail!("grid sample backward does not support {dt:?}"),
        };
        Ok((Some(gs), Some(gg)))
    }
}
