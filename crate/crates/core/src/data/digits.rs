//! Procedurally rendered handwriting-like digits.
//!
//! Each digit is a set of strokes in a unit box; a sample perturbs the
//! control points, slant, scale, rotation and pen width before rendering an
//! anti-aliased 28x28 image with the glyph inside a centred 20x20 box.

use rand::Rng;

pub const GLYPH_SIDE: usize = 28;
const BOX: f64 = 20.0;

type Stroke = Vec<(f64, f64)>;

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from_deg: f64, to_deg: f64) -> Stroke {
    let steps = (((to_deg - from_deg).abs() / 12.0).ceil() as usize).max(2);
    (0..=steps)
        .map(|k| {
            let t = (from_deg + (to_deg - from_deg) * k as f64 / steps as f64).to_radians();
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

fn line(points: &[(f64, f64)]) -> Stroke {
    points.to_vec()
}

/// Strokes for `digit` in a unit box, y pointing down.
pub fn strokes(digit: u8) -> Vec<Stroke> {
    match digit % 10 {
        0 => vec![arc(0.5, 0.5, 0.3, 0.44, 0.0, 360.0)],
        1 => vec![line(&[(0.32, 0.22), (0.55, 0.05), (0.55, 0.95)])],
        2 => vec![
            arc(0.5, 0.3, 0.28, 0.24, 190.0, 380.0),
            line(&[(0.76, 0.38), (0.2, 0.95), (0.84, 0.95)]),
        ],
        3 => vec![
            arc(0.47, 0.28, 0.27, 0.22, 200.0, 450.0),
            arc(0.47, 0.72, 0.3, 0.23, 270.0, 520.0),
        ],
        4 => vec![line(&[
            (0.68, 0.95),
            (0.68, 0.05),
            (0.16, 0.66),
            (0.86, 0.66),
        ])],
        5 => vec![
            line(&[(0.8, 0.06), (0.3, 0.06), (0.26, 0.45)]),
            arc(0.5, 0.66, 0.3, 0.28, 225.0, 500.0),
        ],
        6 => vec![
            line(&[(0.72, 0.06), (0.42, 0.3), (0.24, 0.62)]),
            arc(0.5, 0.7, 0.26, 0.24, 0.0, 360.0),
        ],
        7 => vec![line(&[(0.16, 0.06), (0.84, 0.06), (0.4, 0.95)])],
        8 => vec![
            arc(0.5, 0.27, 0.22, 0.21, 0.0, 360.0),
            arc(0.5, 0.71, 0.27, 0.24, 0.0, 360.0),
        ],
        _ => vec![
            arc(0.48, 0.3, 0.26, 0.24, 0.0, 360.0),
            line(&[(0.74, 0.3), (0.7, 0.6), (0.58, 0.95)]),
        ],
    }
}

fn distance_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (p.0 - a.0 - t * vx, p.1 - a.1 - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Renders one randomly perturbed `digit` as 28x28 intensities in `[0, 1]`.
pub fn render_digit<R: Rng>(digit: u8, rng: &mut R) -> Vec<f32> {
    let jitter = 0.025;
    let slant = rng.random_range(-0.25..0.25);
    let sx = rng.random_range(0.8..1.1);
    let sy = rng.random_range(0.88..1.05);
    let rot = rng.random_range(-8.0f64..8.0).to_radians();
    let width = rng.random_range(1.7..2.8);
    let (c, s) = (rot.cos(), rot.sin());
    let centre = GLYPH_SIDE as f64 / 2.0 - 0.5;

    let place = |(x, y): (f64, f64)| {
        let (u, v) = ((x - 0.5) * sx + slant * (0.5 - y), (y - 0.5) * sy);
        let (u, v) = (c * u - s * v, s * u + c * v);
        (centre + u * BOX, centre + v * BOX)
    };
    let segments: Vec<Stroke> = strokes(digit)
        .into_iter()
        .map(|stroke| {
            stroke
                .into_iter()
                .map(|(x, y)| {
                    let jx = rng.random_range(-jitter..jitter);
                    let jy = rng.random_range(-jitter..jitter);
                    place((x + jx, y + jy))
                })
                .collect()
        })
        .collect();

    let mut img = vec![0f32; GLYPH_SIDE * GLYPH_SIDE];
    for i in 0..GLYPH_SIDE {
        for j in 0..GLYPH_SIDE {
            let p = (j as f64, i as f64);
            let d = segments
                .iter()
                .flat_map(|st| {
                    st.windows(2)
                        .map(move |w| distance_to_segment(p, w[0], w[1]))
                })
                .fold(f64::MAX, f64::min);
            img[i * GLYPH_SIDE + j] = (0.5 + width / 2.0 - d).clamp(0.0, 1.0) as f32;
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glyphs_have_ink_inside_the_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in 0..10 {
            let img = render_digit(d, &mut rng);
            let ink: f32 = img.iter().sum();
            assert!(ink > 20.0, "digit {d} has too little ink: {ink}");
            // MNIST-style margin: outer two rows stay blank
            assert!(
                img[..2 * GLYPH_SIDE].iter().all(|&v| v == 0.0),
                "digit {d} touches the top"
            );
            assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn rendering_is_seed_deterministic() {
        let a = render_digit(3, &mut ChaCha8Rng::seed_from_u64(9));
        let b = render_digit(3, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }
}
