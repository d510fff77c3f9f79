//! Orthographic top-down renderer with 2x2 supersampling.

use super::HALF_WIDTH;

pub const IMAGE_SIZE: usize = 32;
pub const IMAGE_PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;
pub const PIXEL: f64 = 2.0 * HALF_WIDTH / IMAGE_SIZE as f64;
/// Dot radius giving an area of two pixels.
pub const PUSHER_RADIUS: f64 = PIXEL * 0.797_884_560_802_865_4;
pub const PUSHER_INTENSITY: f64 = 0.5;
pub const DOOR_HALF_THICKNESS: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Disc {
        center: [f64; 2],
        radius: f64,
    },
    Segment {
        a: [f64; 2],
        b: [f64; 2],
        half_width: f64,
    },
}

impl Shape {
    fn contains(&self, p: [f64; 2]) -> bool {
        match *self {
            Shape::Disc { center, radius } => {
                let dx = p[0] - center[0];
                let dy = p[1] - center[1];
                dx * dx + dy * dy <= radius * radius
            }
            Shape::Segment { a, b, half_width } => {
                let (ux, uy) = (b[0] - a[0], b[1] - a[1]);
                let len2 = ux * ux + uy * uy;
                let (px, py) = (p[0] - a[0], p[1] - a[1]);
                let s = (px * ux + py * uy) / len2;
                if !(0.0..=1.0).contains(&s) {
                    return false;
                }
                let cross = (px * uy - py * ux).abs() / len2.sqrt();
                cross <= half_width
            }
        }
    }
}

/// World coordinates of pixel `(row, col)` sample `(si, sj)`; row 0 is the top (+y) edge.
fn sample_point(row: usize, col: usize, si: usize, sj: usize) -> [f64; 2] {
    let x = -HALF_WIDTH + (col as f64 + 0.25 + 0.5 * sj as f64) * PIXEL;
    let y = HALF_WIDTH - (row as f64 + 0.25 + 0.5 * si as f64) * PIXEL;
    [x, y]
}

fn coverage(shape: &Shape, row: usize, col: usize) -> f64 {
    let mut hits = 0;
    for si in 0..2 {
        for sj in 0..2 {
            if shape.contains(sample_point(row, col, si, sj)) {
                hits += 1;
            }
        }
    }
    hits as f64 / 4.0
}

/// Renders solid shapes at intensity 1 and an optional pusher dot at intensity 0.5.
pub fn render(shapes: &[Shape], pusher: Option<[f64; 2]>) -> Vec<f32> {
    let dot = pusher.map(|c| Shape::Disc {
        center: c,
        radius: PUSHER_RADIUS,
    });
    let mut img = vec![0f32; IMAGE_PIXELS];
    for row in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            let mut v: f64 = shapes
                .iter()
                .map(|s| coverage(s, row, col))
                .fold(0.0, f64::max);
            if let Some(d) = &dot {
                v = v.max(PUSHER_INTENSITY * coverage(d, row, col));
            }
            img[row * IMAGE_SIZE + col] = v as f32;
        }
    }
    img
}

/// Intensity-weighted centroid in world coordinates, or `None` for an empty image.
pub fn centroid(img: &[f32], min_intensity: f32) -> Option<[f64; 2]> {
    let (mut m, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for row in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            let v = img[row * IMAGE_SIZE + col];
            if v < min_intensity {
                continue;
            }
            let v = v as f64;
            m += v;
            sx += v * (-HALF_WIDTH + (col as f64 + 0.5) * PIXEL);
            sy += v * (HALF_WIDTH - (row as f64 + 0.5) * PIXEL);
        }
    }
    (m > 0.0).then(|| [sx / m, sy / m])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_is_black() {
        assert!(render(&[], None).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centered_disc_has_quarter_turn_symmetry() {
        let img = render(
            &[Shape::Disc {
                center: [0.0, 0.0],
                radius: 0.06,
            }],
            None,
        );
        let n = IMAGE_SIZE;
        for r in 0..n {
            for c in 0..n {
                // (r, c) -> (c, n-1-r)
                let a = img[r * n + c];
                let b = img[c * n + (n - 1 - r)];
                assert!((a - b).abs() <= 1.0 / 255.0);
            }
        }
    }

    #[test]
    fn pusher_dot_is_half_intensity() {
        let img = render(&[], Some([PIXEL / 2.0, PIXEL / 2.0]));
        let max = img.iter().cloned().fold(0.0, f32::max);
        assert_eq!(max, 0.5);
        let mass: f32 = img.iter().sum();
        assert!(mass > 0.5 && mass <= 2.0, "{mass}");
    }
}
