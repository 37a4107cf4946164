//! Convolutions as patch unfolding plus matrix products.
//!
//! `im2col` and its adjoint `col2im` are custom ops whose backward passes are
//! each other, so both `conv2d` and `conv_transpose2d` differentiate through
//! a dense matmul instead of direct convolution loops.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use crate::error::{DaeError, Result};

/// A `k x k`, stride `s`, padding `p` sliding window from an `(h, w)` image
/// onto an `(ho, wo)` grid of patch positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Calls `f(col_index, image_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (k, s, p) = (self.k, self.s as isize, self.p as isize);
        let (rows, cols) = (self.rows(), self.cols());
        for b in 0..self.n {
            for c in 0..self.c {
                let img = (b * self.c + c) * self.h * self.w;
                for ki in 0..k {
                    for kj in 0..k {
                        let r = (c * k + ki) * k + kj;
                        let col = (b * rows + r) * cols;
                        for oi in 0..self.ho {
                            let y = oi as isize * s - p + ki as isize;
                            if y < 0 || y >= self.h as isize {
                                continue;
                            }
                            let row_base = img + y as usize * self.w;
                            for oj in 0..self.wo {
                                let x = oj as isize * s - p + kj as isize;
                                if x >= 0 && x < self.w as isize {
                                    f(col + oi * self.wo + oj, row_base + x as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("unfold ops expect contiguous inputs"),
    }
}

fn unfold<T: WithDType>(x: &[T], g: &Geom) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.rows() * g.cols()];
    g.for_each_tap(|o, i| out[o] = x[i]);
    out
}

fn fold<T: WithDType>(cols: &[T], g: &Geom) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.c * g.h * g.w];
    g.for_each_tap(|o, i| out[i] += cols[o]);
    out
}

struct Im2Col(Geom);
struct Col2Im(Geom);

macro_rules! dispatch {
    ($storage:expr, $layout:expr, $f:ident, $g:expr) => {
        match $storage {
            CpuStorage::F32(v) => CpuStorage::F32($f(contiguous(v, $layout)?, $g)),
            CpuStorage::F64(v) => CpuStorage::F64($f(contiguous(v, $layout)?, $g)),
            _ => candle_core::bail!("unfold ops support f32 and f64 only"),
        }
    };
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        Ok((
            dispatch!(s, l, unfold, g),
            Shape::from((g.n, g.rows(), g.cols())),
        ))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        Ok((dispatch!(s, l, fold, g), Shape::from((g.n, g.c, g.h, g.w))))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Im2Col(self.0))?))
    }
}

fn add_bias(y: Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    match bias {
        Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?),
        None => Ok(y),
    }
}

/// `x (N, C, H, W)` with `weight (O, C, k, k)`.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, wc, k, k2) = weight.dims4()?;
    if wc != c || k != k2 || h + 2 * padding < k || w + 2 * padding < k || stride == 0 {
        return Err(DaeError::invalid(format!(
            "conv2d: input {:?} incompatible with kernel {:?}",
            x.dims(),
            weight.dims()
        )));
    }
    let g = Geom {
        n,
        c,
        h,
        w,
        k,
        s: stride,
        p: padding,
        ho: (h + 2 * padding - k) / stride + 1,
        wo: (w + 2 * padding - k) / stride + 1,
    };
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let wm = weight.reshape((o, g.rows()))?;
    let y = wm
        .broadcast_left(n)?
        .contiguous()?
        .matmul(&cols)?
        .reshape((n, o, g.ho, g.wo))?;
    add_bias(y, bias)
}

/// `x (N, C, H, W)` with `weight (C, O, k, k)`; output side `(H - 1) s - 2p + k`.
pub fn conv_transpose2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (wc, o, k, k2) = weight.dims4()?;
    let (ho, wo) = ((h - 1) * stride + k, (w - 1) * stride + k);
    if wc != c || k != k2 || stride == 0 || ho <= 2 * padding || wo <= 2 * padding {
        return Err(DaeError::invalid(format!(
            "conv_transpose2d: input {:?} incompatible with kernel {:?}",
            x.dims(),
            weight.dims()
        )));
    }
    let g = Geom {
        n,
        c: o,
        h: ho - 2 * padding,
        w: wo - 2 * padding,
        k,
        s: stride,
        p: padding,
        ho: h,
        wo: w,
    };
    let wm = weight.reshape((c, o * k * k))?.t()?;
    let cols = wm
        .broadcast_left(n)?
        .contiguous()?
        .matmul(&x.reshape((n, c, h * w))?)?;
    let y = cols.contiguous()?.apply_op1(Col2Im(g))?;
    add_bias(y, bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn rand(shape: &[usize]) -> Tensor {
        Tensor::randn(0f64, 1.0, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn matches_direct_convolution() {
        for (k, s, p, side) in [(4, 2, 1, 8), (3, 1, 1, 5), (4, 1, 0, 4), (1, 1, 0, 3)] {
            let x = rand(&[2, 3, side, side]);
            let w = rand(&[5, 3, k, k]);
            let b = rand(&[5]);
            let ours = conv2d(&x, &w, Some(&b), s, p).unwrap();
            let theirs = x
                .conv2d(&w, p, s, 1, 1)
                .unwrap()
                .broadcast_add(&b.reshape((1, 5, 1, 1)).unwrap())
                .unwrap();
            assert!(
                max_diff(&ours, &theirs) < 1e-10,
                "conv k{k} s{s} p{p} {}",
                max_diff(&ours, &theirs)
            );

            let wt = rand(&[3, 5, k, k]);
            let ours = conv_transpose2d(&x, &wt, None, s, p).unwrap();
            let theirs = x.conv_transpose2d(&wt, p, 0, s, 1).unwrap();
            assert_eq!(ours.dims(), theirs.dims());
            assert!(max_diff(&ours, &theirs) < 1e-10, "convT k{k} s{s} p{p}");
        }
    }

    #[test]
    fn gradients_match_direct_convolution() {
        let x = candle_core::Var::from_tensor(&rand(&[2, 2, 6, 6])).unwrap();
        let w = candle_core::Var::from_tensor(&rand(&[3, 2, 4, 4])).unwrap();
        let up = rand(&[2, 3, 3, 3]);
        let ours = (conv2d(&x, &w, None, 2, 1).unwrap() * &up)
            .unwrap()
            .sum_all()
            .unwrap();
        let theirs = (x.conv2d(&w, 1, 2, 1, 1).unwrap() * &up)
            .unwrap()
            .sum_all()
            .unwrap();
        let (ga, gb) = (ours.backward().unwrap(), theirs.backward().unwrap());
        for v in [&x, &w] {
            assert!(max_diff(ga.get(v).unwrap(), gb.get(v).unwrap()) < 1e-10);
        }
        assert_eq!(ours.dtype(), DType::F64);
    }
}
