use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DaeError, Result};

pub const NUM_LANDMARKS: usize = 5;

/// Five facial points in pixel coordinates: left eye, right eye, nose tip,
/// left and right mouth corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: [[f64; 2]; NUM_LANDMARKS],
}

impl LandmarkSet {
    pub const NAMES: [&'static str; NUM_LANDMARKS] =
        ["left_eye", "right_eye", "nose", "left_mouth", "right_mouth"];
    pub const LEFT_EYE: usize = 0;
    pub const RIGHT_EYE: usize = 1;

    pub fn interocular(&self) -> f64 {
        let [a, b] = [self.points[Self::LEFT_EYE], self.points[Self::RIGHT_EYE]];
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }

    pub fn flat(&self) -> [f64; 2 * NUM_LANDMARKS] {
        let mut out = [0.0; 2 * NUM_LANDMARKS];
        for (k, p) in self.points.iter().enumerate() {
            out[2 * k] = p[0];
            out[2 * k + 1] = p[1];
        }
        out
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != 2 * NUM_LANDMARKS {
            return Err(DaeError::invalid(format!(
                "expected {} coordinates, got {}",
                2 * NUM_LANDMARKS,
                v.len()
            )));
        }
        let mut points = [[0.0; 2]; NUM_LANDMARKS];
        for (k, p) in points.iter_mut().enumerate() {
            *p = [v[2 * k], v[2 * k + 1]];
        }
        Ok(Self { points })
    }
}

/// Column order of the ten coordinates on each line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkOrder {
    /// `x1 y1 x2 y2 ...`
    #[default]
    Interleaved,
    /// `x1 .. x5 y1 .. y5`
    Grouped,
}

/// Maps original-image pixels into the centre-cropped, resized frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropFrame {
    pub width: f64,
    pub height: f64,
    pub side: usize,
}

impl CropFrame {
    pub fn map(&self, p: [f64; 2]) -> [f64; 2] {
        let s = self.width.min(self.height);
        let scale = self.side as f64 / s;
        [
            (p[0] - (self.width - s) / 2.0) * scale,
            (p[1] - (self.height - s) / 2.0) * scale,
        ]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LandmarkFile {
    pub sets: BTreeMap<String, LandmarkSet>,
    /// Ids whose points fell outside the frame and were clamped.
    pub clamped: Vec<String>,
}

/// Parses `<id> <10 numbers>` lines. A leading count line and a column-name
/// header line are tolerated, as are blank lines and `#` comments.
pub fn parse_landmarks(
    text: &str,
    path: &Path,
    order: LandmarkOrder,
    frame: Option<CropFrame>,
) -> Result<LandmarkFile> {
    let mut out = LandmarkFile::default();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let err = |message: String| DaeError::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            message,
        };
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if k == 0 && tokens.len() == 1 && tokens[0].parse::<usize>().is_ok() {
            continue;
        }
        if tokens.iter().all(|t| t.parse::<f64>().is_err()) && tokens.len() == 2 * NUM_LANDMARKS {
            continue;
        }
        if tokens.len() != 1 + 2 * NUM_LANDMARKS {
            return Err(err(format!(
                "expected an id and {} numbers, found {} fields",
                2 * NUM_LANDMARKS,
                tokens.len()
            )));
        }
        let mut v = [0f64; 2 * NUM_LANDMARKS];
        for (slot, tok) in v.iter_mut().zip(&tokens[1..]) {
            *slot = tok
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(format!("`{tok}` is not a finite number")))?;
        }
        let mut points = [[0.0; 2]; NUM_LANDMARKS];
        for (i, p) in points.iter_mut().enumerate() {
            *p = match order {
                LandmarkOrder::Interleaved => [v[2 * i], v[2 * i + 1]],
                LandmarkOrder::Grouped => [v[i], v[NUM_LANDMARKS + i]],
            };
        }
        let id = tokens[0].to_string();
        if let Some(frame) = frame {
            let hi = frame.side as f64 - 1.0;
            let mut clamped = false;
            for p in points.iter_mut() {
                let q = frame.map(*p);
                let c = [q[0].clamp(0.0, hi), q[1].clamp(0.0, hi)];
                clamped |= c != q;
                *p = c;
            }
            if clamped {
                log::warn!("landmarks for {id} fall outside the frame and were clamped");
                out.clamped.push(id.clone());
            }
        }
        if out
            .sets
            .insert(id.clone(), LandmarkSet { points })
            .is_some()
        {
            return Err(err(format!("duplicate id {id}")));
        }
    }
    Ok(out)
}

pub fn load_landmarks(
    path: &Path,
    order: LandmarkOrder,
    frame: Option<CropFrame>,
) -> Result<LandmarkFile> {
    parse_landmarks(&std::fs::read_to_string(path)?, path, order, frame)
}
