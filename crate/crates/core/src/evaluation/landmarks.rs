use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LandmarkSet;
use crate::error::{DaeError, Result};
use crate::warp::WarpField;

/// Mean Euclidean point error as a percentage of the true inter-ocular distance.
pub fn interocular_error(pred: &LandmarkSet, truth: &LandmarkSet) -> Result<f64> {
    Ok(per_point_errors(pred, truth)?.iter().sum::<f64>() / pred.points.len() as f64)
}

fn per_point_errors(pred: &LandmarkSet, truth: &LandmarkSet) -> Result<[f64; 5]> {
    let iod = truth.interocular();
    if !(iod > 1e-12) {
        return Err(DaeError::invalid(
            "eyes coincide, inter-ocular distance is zero",
        ));
    }
    let mut out = [0.0; 5];
    for (k, (p, t)) in pred.points.iter().zip(&truth.points).enumerate() {
        out[k] = ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)).sqrt() / iod * 100.0;
    }
    Ok(out)
}

/// How predictions were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Landmarks annotated once on the average texture and mapped through each field.
    TemplateAnnotation,
    /// Post-hoc regressor on flattened fields.
    Regressor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub n: usize,
    /// Mean inter-ocular-normalised error, percent.
    pub mean_error: f64,
    pub per_landmark: [f64; 5],
}

impl EvalReport {
    pub fn evaluate(
        protocol: Protocol,
        preds: &[LandmarkSet],
        truths: &[LandmarkSet],
    ) -> Result<Self> {
        if preds.len() != truths.len() || preds.is_empty() {
            return Err(DaeError::invalid(format!(
                "{} predictions for {} truths",
                preds.len(),
                truths.len()
            )));
        }
        let mut per = [0.0; 5];
        for (p, t) in preds.iter().zip(truths) {
            for (acc, e) in per.iter_mut().zip(per_point_errors(p, t)?) {
                *acc += e;
            }
        }
        let n = preds.len();
        per.iter_mut().for_each(|v| *v /= n as f64);
        Ok(Self {
            protocol,
            n,
            mean_error: per.iter().sum::<f64>() / 5.0,
            per_landmark: per,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["protocol", "n", "landmark", "error_percent"])?;
        let protocol = serde_json::to_value(self.protocol)?
            .as_str()
            .unwrap_or_default()
            .to_string();
        for (name, e) in LandmarkSet::NAMES.iter().zip(self.per_landmark) {
            w.write_record([
                protocol.clone(),
                self.n.to_string(),
                name.to_string(),
                e.to_string(),
            ])?;
        }
        w.write_record([
            protocol,
            self.n.to_string(),
            "mean".to_string(),
            self.mean_error.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

fn lerp_grid(g: &[f32], side: usize, x: f64, y: f64) -> [f64; 2] {
    let hi = side - 2;
    let (j, i) = (
        (x.floor().max(0.0) as usize).min(hi),
        (y.floor().max(0.0) as usize).min(hi),
    );
    let (fx, fy) = (x - j as f64, y - i as f64);
    let at = |i: usize, j: usize, c: usize| g[(i * side + j) * 2 + c] as f64;
    let mut out = [0.0; 2];
    for (c, o) in out.iter_mut().enumerate() {
        let top = at(i, j, c) * (1.0 - fx) + at(i, j + 1, c) * fx;
        let bottom = at(i + 1, j, c) * (1.0 - fx) + at(i + 1, j + 1, c) * fx;
        *o = top * (1.0 - fy) + bottom * fy;
    }
    out
}

/// Image pixel whose field value equals the normalised template point `q`:
/// nearest grid node first, then Newton steps on the bilinear interpolant.
fn invert_point(g: &[f32], side: usize, q: [f64; 2]) -> [f64; 2] {
    let mut best = (f64::INFINITY, 0usize);
    for p in 0..side * side {
        let d = (g[2 * p] as f64 - q[0]).powi(2) + (g[2 * p + 1] as f64 - q[1]).powi(2);
        if d < best.0 {
            best = (d, p);
        }
    }
    let hi = (side - 1) as f64;
    let mut p = [(best.1 % side) as f64, (best.1 / side) as f64];
    let h = 0.5;
    for _ in 0..30 {
        let f = lerp_grid(g, side, p[0], p[1]);
        let r = [f[0] - q[0], f[1] - q[1]];
        if r[0].abs() + r[1].abs() < 1e-12 {
            break;
        }
        // Jacobian by central differences; exact for a bilinear patch
        let (x0, x1) = ((p[0] - h).max(0.0), (p[0] + h).min(hi));
        let (y0, y1) = ((p[1] - h).max(0.0), (p[1] + h).min(hi));
        let (fx0, fx1) = (lerp_grid(g, side, x0, p[1]), lerp_grid(g, side, x1, p[1]));
        let (fy0, fy1) = (lerp_grid(g, side, p[0], y0), lerp_grid(g, side, p[0], y1));
        let a = (fx1[0] - fx0[0]) / (x1 - x0);
        let c = (fx1[1] - fx0[1]) / (x1 - x0);
        let b = (fy1[0] - fy0[0]) / (y1 - y0);
        let d = (fy1[1] - fy0[1]) / (y1 - y0);
        let det = a * d - b * c;
        if det.abs() < 1e-15 {
            break;
        }
        let step = [(d * r[0] - b * r[1]) / det, (a * r[1] - c * r[0]) / det];
        p = [
            (p[0] - step[0]).clamp(0.0, hi),
            (p[1] - step[1]).clamp(0.0, hi),
        ];
    }
    p
}

/// Maps landmarks annotated in the template frame through every field into
/// image pixel coordinates.
pub fn annotate_average_texture(
    template: &LandmarkSet,
    fields: &WarpField,
) -> Result<Vec<LandmarkSet>> {
    let (n, h, w) = fields.dims();
    if h != w {
        return Err(DaeError::invalid("fields must be square"));
    }
    let hi = (w - 1) as f64;
    if template
        .points
        .iter()
        .any(|p| !(0.0..=hi).contains(&p[0]) || !(0.0..=hi).contains(&p[1]))
    {
        return Err(DaeError::invalid(format!(
            "template landmark outside [0, {hi}]"
        )));
    }
    let g = fields
        .grid
        .to_dtype(candle_core::DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let len = h * w * 2;
    let to_norm = |v: f64| -1.0 + 2.0 * v / hi;
    (0..n)
        .map(|k| {
            let slice = &g[k * len..(k + 1) * len];
            let mut out = *template;
            for p in out.points.iter_mut() {
                *p = invert_point(slice, w, [to_norm(p[0]), to_norm(p[1])]);
            }
            Ok(out)
        })
        .collect()
}
