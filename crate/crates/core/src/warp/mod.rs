//! Deformation fields: construction, constraints, composition and sampling.
//!
//! All coordinates live in the normalized `[-1, 1]` frame with corner
//! alignment, so pixel column `j` of a `W`-wide image sits at
//! `-1 + 2j/(W-1)`. Every operation is batch-first and built from
//! differentiable tensor ops, so gradients flow back into whatever decoder
//! produced the inputs.

mod sampler;
pub mod wire;

use candle_core::{DType, Device, Tensor};

use crate::error::{DaeError, Result};

pub use sampler::bilinear_sample;

/// Upper bound on a single increment, `5 / side` in normalized units.
pub fn max_increment(side: usize) -> f64 {
    5.0 / side as f64
}

/// Increment that reproduces the identity grid along an axis of `side` pixels.
pub fn identity_increment(side: usize) -> f64 {
    2.0 / (side as f64 - 1.0)
}

/// Rejects tensors containing NaN or infinities.
pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let total = t.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    if total.is_finite() {
        Ok(())
    } else {
        Err(DaeError::invalid(format!(
            "{what} contains non-finite values"
        )))
    }
}

/// Per-pixel horizontal and vertical increments of a warp, each `(N, H, W)`.
///
/// `dx[.., i, j]` is the step in x-coordinate between pixel `j - 1` and `j`
/// of row `i`; the first column of `dx` (and first row of `dy`) has no
/// predecessor and therefore does not move the grid.
#[derive(Debug, Clone)]
pub struct DifferentialWarp {
    pub dx: Tensor,
    pub dy: Tensor,
}

impl DifferentialWarp {
    pub fn new(dx: Tensor, dy: Tensor) -> Result<Self> {
        let (n, h, w) = dx.dims3()?;
        if dy.dims3()? != (n, h, w) {
            return Err(DaeError::invalid(format!(
                "increment maps disagree: dx {:?} vs dy {:?}",
                dx.dims(),
                dy.dims()
            )));
        }
        if h < 2 || w < 2 {
            return Err(DaeError::invalid("warp maps need at least 2x2 pixels"));
        }
        Ok(Self { dx, dy })
    }

    /// Uniform increments that integrate to the identity grid.
    pub fn identity(n: usize, h: usize, w: usize, dtype: DType, dev: &Device) -> Result<Self> {
        let dx = Tensor::full(identity_increment(w), (n, h, w), dev)?.to_dtype(dtype)?;
        let dy = Tensor::full(identity_increment(h), (n, h, w), dev)?.to_dtype(dtype)?;
        Self::new(dx, dy)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        // Shape is validated on construction.
        self.dx.dims3().unwrap_or_default()
    }

    /// Stacks the maps back into `(N, 2, H, W)`.
    pub fn to_channels(&self) -> Result<Tensor> {
        Ok(Tensor::stack(&[&self.dx, &self.dy], 1)?)
    }
}

/// Absolute sampling grid, `(N, H, W, 2)` with `(x, y)` in the last axis.
#[derive(Debug, Clone)]
pub struct WarpField {
    pub grid: Tensor,
}

impl WarpField {
    pub fn new(grid: Tensor) -> Result<Self> {
        let dims = grid.dims();
        if dims.len() != 4 || dims[3] != 2 {
            return Err(DaeError::invalid(format!(
                "warp field must be (N, H, W, 2), got {dims:?}"
            )));
        }
        Ok(Self { grid })
    }

    /// The identity field `W_0`, repeated `n` times.
    pub fn identity(n: usize, h: usize, w: usize, dtype: DType, dev: &Device) -> Result<Self> {
        if h < 2 || w < 2 {
            return Err(DaeError::invalid("identity grid needs at least 2x2 pixels"));
        }
        let mut data = Vec::with_capacity(h * w * 2);
        for i in 0..h {
            for j in 0..w {
                data.push(-1.0 + 2.0 * j as f64 / (w - 1) as f64);
                data.push(-1.0 + 2.0 * i as f64 / (h - 1) as f64);
            }
        }
        let grid = Tensor::from_vec(data, (1, h, w, 2), dev)?
            .to_dtype(dtype)?
            .repeat((n, 1, 1, 1))?;
        Self::new(grid)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.grid.dims();
        (d[0], d[1], d[2])
    }

    pub fn batch_size(&self) -> usize {
        self.grid.dims()[0]
    }

    /// The x- and y-coordinate planes, each `(N, H, W)`.
    pub fn channels(&self) -> Result<(Tensor, Tensor)> {
        let x = self.grid.narrow(3, 0, 1)?.squeeze(3)?;
        let y = self.grid.narrow(3, 1, 1)?.squeeze(3)?;
        Ok((x, y))
    }

    /// Fields `[start, start + len)` of the batch.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Self::new(self.grid.narrow(0, start, len)?)
    }

    pub fn detach(&self) -> Self {
        Self {
            grid: self.grid.detach(),
        }
    }
}

/// Batch of 2x3 affine matrices `[a b tx; c d ty]`, shaped `(N, 2, 3)`.
#[derive(Debug, Clone)]
pub struct AffineParams {
    pub theta: Tensor,
}

const IDENTITY_AFFINE: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

impl AffineParams {
    pub fn new(theta: Tensor) -> Result<Self> {
        let dims = theta.dims();
        if dims.len() != 3 || dims[1] != 2 || dims[2] != 3 {
            return Err(DaeError::invalid(format!(
                "affine parameters must be (N, 2, 3), got {dims:?}"
            )));
        }
        Ok(Self { theta })
    }

    /// Builds from a flat `(N, 6)` tensor in row-major matrix order.
    pub fn from_flat(flat: &Tensor) -> Result<Self> {
        let (n, six) = flat.dims2()?;
        if six != 6 {
            return Err(DaeError::invalid(format!(
                "expected (N, 6) affine rows, got {:?}",
                flat.dims()
            )));
        }
        Self::new(flat.reshape((n, 2, 3))?)
    }

    /// `S_0`, repeated `n` times.
    pub fn identity(n: usize, dtype: DType, dev: &Device) -> Result<Self> {
        let theta = Tensor::from_slice(&IDENTITY_AFFINE, (1, 2, 3), dev)?
            .to_dtype(dtype)?
            .repeat((n, 1, 1))?;
        Self::new(theta)
    }

    pub fn batch_size(&self) -> usize {
        self.theta.dims()[0]
    }

    /// Minibatch average, `(1, 2, 3)`.
    pub fn mean(&self) -> Result<Self> {
        if self.batch_size() == 0 {
            return Err(DaeError::invalid("mean of an empty affine batch"));
        }
        Self::new(self.theta.mean_keepdim(0)?)
    }
}

/// Clamps raw decoder output `(N, 2, H, W)` into `[0, 5/side]` per axis.
pub fn clamp_increments(raw: &Tensor) -> Result<DifferentialWarp> {
    let (_, c, h, w) = raw.dims4()?;
    if c != 2 {
        return Err(DaeError::invalid(format!(
            "differential warp needs 2 channels, got {c}"
        )));
    }
    ensure_finite(raw, "raw increments")?;
    let dx = raw.narrow(1, 0, 1)?.squeeze(1)?;
    let dy = raw.narrow(1, 1, 1)?.squeeze(1)?;
    let dx = snap(&dx.clamp(0.0, max_increment(w))?)?;
    let dy = snap(&dy.clamp(0.0, max_increment(h))?)?;
    DifferentialWarp::new(dx, dy)
}

/// Increments live on a 2^-21 lattice. Row sums of clamped increments never
/// exceed 5, so every partial sum is exact in f32 and the integrated field
/// keeps the `[0, 5/side]` step bound without rounding slack.
const LATTICE: f64 = (1u32 << 21) as f64;

/// Rounds onto the lattice; the gradient passes straight through.
fn snap(t: &Tensor) -> Result<Tensor> {
    let q = ((t * LATTICE)?.round()? / LATTICE)?;
    Ok((t + (q - t)?.detach())?)
}

/// Exclusive prefix sum along `dim`, starting from `origin`.
fn integrate_axis(inc: &Tensor, dim: usize, origin: f64) -> Result<Tensor> {
    let len = inc.dim(dim)?;
    let first = inc.narrow(dim, 0, 1)?.zeros_like()?;
    let steps = Tensor::cat(&[&first, &inc.narrow(dim, 1, len - 1)?], dim)?;
    Ok((steps.cumsum(dim)? + origin)?)
}

/// Spatial integration of clamped increments into an absolute grid.
///
/// The integration constant is `(-1, -1)`; global placement is left to the
/// affine branch.
pub fn integrate(d: &DifferentialWarp) -> Result<WarpField> {
    let gx = integrate_axis(&d.dx, 2, -1.0)?;
    let gy = integrate_axis(&d.dy, 1, -1.0)?;
    WarpField::new(Tensor::stack(&[&gx, &gy], 3)?)
}

/// Applies each affine matrix to the coordinates of the matching local field.
///
/// A single affine matrix is broadcast over every field in the batch.
pub fn compose(affine: &AffineParams, local: &WarpField) -> Result<WarpField> {
    let (n, h, w) = local.dims();
    let m = affine.batch_size();
    if m != n && m != 1 {
        return Err(DaeError::invalid(format!(
            "affine batch {m} does not match field batch {n}"
        )));
    }
    let points = local.grid.reshape((n, h * w, 2))?;
    let ones = Tensor::ones((n, h * w, 1), points.dtype(), points.device())?;
    let homog = Tensor::cat(&[&points, &ones], 2)?;
    let theta_t = affine.theta.transpose(1, 2)?;
    // materialise the broadcast; matmul mishandles zero-stride batch dims
    let theta_t = if m == n {
        theta_t.contiguous()?
    } else {
        theta_t.repeat((n, 1, 1))?
    };
    let mapped = homog.matmul(&theta_t)?;
    WarpField::new(mapped.reshape((n, h, w, 2))?)
}

/// Field produced by an affine transform alone.
pub fn affine_grid(affine: &AffineParams, h: usize, w: usize) -> Result<WarpField> {
    let theta = &affine.theta;
    let identity = WarpField::identity(affine.batch_size(), h, w, theta.dtype(), theta.device())?;
    compose(affine, &identity)
}

/// Elementwise mean over the batch, returned as a batch of one.
pub fn mean_field(fields: &WarpField) -> Result<WarpField> {
    if fields.batch_size() == 0 {
        return Err(DaeError::invalid("mean of an empty field batch"));
    }
    WarpField::new(fields.grid.mean_keepdim(0)?)
}

/// Adds a per-pixel offset `(N, 2, H, W)` to the identity grid.
///
/// This is the unconstrained "residual grid" parameterisation kept for
/// ablations; it carries no fold-freedom guarantee.
pub fn residual_field(offset: &Tensor) -> Result<WarpField> {
    let (n, c, h, w) = offset.dims4()?;
    if c != 2 {
        return Err(DaeError::invalid(format!(
            "residual offset needs 2 channels, got {c}"
        )));
    }
    let base = WarpField::identity(n, h, w, offset.dtype(), offset.device())?;
    let offset = offset.permute((0, 2, 3, 1))?;
    WarpField::new((base.grid + offset)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn clamp_bounds_match_expected_values() -> Result<()> {
        let raw = Tensor::full(-0.3f32, (1, 2, 64, 64), &dev())?;
        let d = clamp_increments(&raw)?;
        assert_eq!(d.dx.max_all()?.to_scalar::<f32>()?, 0.0);
        let raw = Tensor::full(10.0f32, (1, 2, 64, 64), &dev())?;
        let d = clamp_increments(&raw)?;
        assert_eq!(d.dx.min_all()?.to_scalar::<f32>()?, 0.078125);
        assert_eq!(d.dy.max_all()?.to_scalar::<f32>()?, 0.078125);
        Ok(())
    }

    #[test]
    fn clamp_rejects_non_finite() -> Result<()> {
        let raw = Tensor::from_vec(
            vec![0.0f32, f32::NAN, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            (1, 2, 2, 2),
            &dev(),
        )?;
        assert!(matches!(
            clamp_increments(&raw),
            Err(DaeError::InvalidInput(_))
        ));
        Ok(())
    }

    #[test]
    fn uniform_increments_integrate_to_identity() -> Result<()> {
        let d = DifferentialWarp::identity(2, 5, 7, DType::F64, &dev())?;
        let f = integrate(&d)?;
        let id = WarpField::identity(2, 5, 7, DType::F64, &dev())?;
        let err = (f.grid - id.grid)?.abs()?.max_all()?.to_scalar::<f64>()?;
        assert!(err < 1e-12, "{err}");
        Ok(())
    }

    #[test]
    fn zero_increments_collapse_columns() -> Result<()> {
        let z = Tensor::zeros((1, 4, 4), DType::F32, &dev())?;
        let f = integrate(&DifferentialWarp::new(z.clone(), z)?)?;
        let (x, _) = f.channels()?;
        assert!(x
            .flatten_all()?
            .to_vec1::<f32>()?
            .iter()
            .all(|&v| v == -1.0));
        Ok(())
    }

    #[test]
    fn pure_scaling_affine_spans_half_range() -> Result<()> {
        let theta = Tensor::from_vec(vec![0.5f64, 0., 0., 0., 0.5, 0.], (1, 2, 3), &dev())?;
        let f = affine_grid(&AffineParams::new(theta)?, 6, 6)?;
        let v = f.grid.flatten_all()?.to_vec1::<f64>()?;
        let lo = v.iter().cloned().fold(f64::MAX, f64::min);
        let hi = v.iter().cloned().fold(f64::MIN, f64::max);
        assert!((lo + 0.5).abs() < 1e-12 && (hi - 0.5).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn identity_affine_leaves_field_unchanged() -> Result<()> {
        let grid = Tensor::rand(-1f64, 1., (3, 4, 5, 2), &dev())?;
        let local = WarpField::new(grid.clone())?;
        let out = compose(&AffineParams::identity(3, DType::F64, &dev())?, &local)?;
        let err = (out.grid - grid)?.abs()?.max_all()?.to_scalar::<f64>()?;
        assert!(err < 1e-12);
        Ok(())
    }

    #[test]
    fn mean_field_rejects_empty_batch() -> Result<()> {
        let f = WarpField::new(Tensor::zeros((0, 4, 4, 2), DType::F32, &dev())?)?;
        assert!(mean_field(&f).is_err());
        Ok(())
    }

    #[test]
    fn mean_of_identical_identities_is_identity() -> Result<()> {
        let f = WarpField::identity(2, 4, 4, DType::F32, &dev())?;
        let m = mean_field(&f)?;
        let id = WarpField::identity(1, 4, 4, DType::F32, &dev())?;
        assert_eq!(
            m.grid.flatten_all()?.to_vec1::<f32>()?,
            id.grid.flatten_all()?.to_vec1::<f32>()?
        );
        Ok(())
    }

    #[test]
    fn residual_zero_offset_is_identity() -> Result<()> {
        let f = residual_field(&Tensor::zeros((1, 2, 4, 6), DType::F32, &dev())?)?;
        let id = WarpField::identity(1, 4, 6, DType::F32, &dev())?;
        assert_eq!(
            f.grid.flatten_all()?.to_vec1::<f32>()?,
            id.grid.flatten_all()?.to_vec1::<f32>()?
        );
        Ok(())
    }
}
