//! Stroke-drawn digit glyphs, so the colored-digit data needs no downloads.

use rand::Rng;

pub const GLYPH_SIZE: usize = 28;

// Seven-segment strokes in a unit box, y pointing down:
// a top, b upper right, c lower right, d bottom, e lower left, f upper left, g middle.
const SEGMENTS: [((f64, f64), (f64, f64)); 7] = [
    ((0.0, 0.0), (1.0, 0.0)),
    ((1.0, 0.0), (1.0, 0.5)),
    ((1.0, 0.5), (1.0, 1.0)),
    ((0.0, 1.0), (1.0, 1.0)),
    ((0.0, 0.5), (0.0, 1.0)),
    ((0.0, 0.0), (0.0, 0.5)),
    ((0.0, 0.5), (1.0, 0.5)),
];

const DIGIT_SEGMENTS: [&[usize]; 10] = [
    &[0, 1, 2, 3, 4, 5],
    &[1, 2],
    &[0, 1, 6, 4, 3],
    &[0, 1, 6, 2, 3],
    &[5, 6, 1, 2],
    &[0, 5, 6, 2, 3],
    &[0, 5, 6, 4, 2, 3],
    &[0, 1, 2],
    &[0, 1, 2, 3, 4, 5, 6],
    &[0, 1, 2, 3, 5, 6],
];

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Renders digit `digit` (0–9) as a 28×28 grayscale image in [0, 1], row-major,
/// with random placement, size, slant, stroke width and per-stroke wobble.
pub fn render_digit<R: Rng + ?Sized>(digit: u8, rng: &mut R) -> Vec<f32> {
    assert!(digit < 10, "digit out of range");
    let size = GLYPH_SIZE as f64;
    let scale = rng.random_range(0.85..1.1);
    let width = 11.0 * scale;
    let height = 17.0 * scale;
    let cx = size / 2.0 + rng.random_range(-2.0..2.0);
    let cy = size / 2.0 + rng.random_range(-2.0..2.0);
    let slant = rng.random_range(-0.2..0.2);
    let thickness = rng.random_range(1.6..2.6);

    let to_pixels = |(u, v): (f64, f64)| {
        let y = cy + (v - 0.5) * height;
        let x = cx + (u - 0.5) * width - slant * (v - 0.5) * height;
        (x, y)
    };
    let strokes: Vec<((f64, f64), (f64, f64))> = DIGIT_SEGMENTS[digit as usize]
        .iter()
        .map(|&s| {
            let (a, b) = SEGMENTS[s];
            let mut wobble = || rng.random_range(-0.06..0.06);
            let a = (a.0 + wobble(), a.1 + wobble());
            let b = (b.0 + wobble(), b.1 + wobble());
            (to_pixels(a), to_pixels(b))
        })
        .collect();

    let mut img = vec![0.0f32; GLYPH_SIZE * GLYPH_SIZE];
    for r in 0..GLYPH_SIZE {
        for c in 0..GLYPH_SIZE {
            let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
            let d = strokes
                .iter()
                .map(|(a, b)| segment_distance(px, py, *a, *b))
                .fold(f64::INFINITY, f64::min);
            img[r * GLYPH_SIZE + c] = (thickness / 2.0 + 0.5 - d).clamp(0.0, 1.0) as f32;
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
    fn glyphs_are_in_range_and_non_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for d in 0..10 {
            let g = render_digit(d, &mut rng);
            assert!(g.iter().all(|v| (0.0..=1.0).contains(v)));
            let ink: f32 = g.iter().sum();
            assert!(ink > 20.0, "digit {d} has too little ink: {ink}");
        }
    }

    #[test]
    fn eight_has_more_ink_than_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one: f32 = (0..20)
            .map(|_| render_digit(1, &mut rng).iter().sum::<f32>())
            .sum();
        let eight: f32 = (0..20)
            .map(|_| render_digit(8, &mut rng).iter().sum::<f32>())
            .sum();
        assert!(eight > 2.0 * one);
    }
}
