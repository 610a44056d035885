//! Hand-picked geometric features per box.

use crate::corpus::BoundingBox;

pub const SPATIAL_DIM: usize = 6;

/// Density guard in pixels².
const AREA_EPS: f64 = 1.0;

pub const SPATIAL_COLUMNS: [&str; SPATIAL_DIM] =
    ["cx", "cy", "bw", "bh", "area_ratio", "char_density"];

/// `[cx/W, cy/H, bw/W, bh/H, area/(W*H), chars/area]`
pub type SpatialVector = [f64; SPATIAL_DIM];

/// Width times height of the axis-aligned hull. Equals
/// `|x1 - x2| * |y1 - y3|` for axis-aligned quads.
pub fn box_area(b: &BoundingBox) -> f64 {
    let h = b.hull();
    (h.width() * h.height()).max(0.0)
}

pub fn visible_chars(b: &BoundingBox) -> usize {
    b.text.chars().filter(|c| !c.is_whitespace()).count()
}

pub fn char_density(b: &BoundingBox) -> f64 {
    visible_chars(b) as f64 / box_area(b).max(AREA_EPS)
}

pub fn spatial_vector(b: &BoundingBox, page_width: f64, page_height: f64) -> SpatialVector {
    let h = b.hull();
    let (cx, cy) = h.center();
    let area_ratio = (box_area(b) / (page_width * page_height)).clamp(0.0, 1.0);
    [
        cx / page_width,
        cy / page_height,
        h.width() / page_width,
        h.height() / page_height,
        area_ratio,
        char_density(b),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Point;
    use proptest::prelude::*;

    fn quad(c: [(f64, f64); 4], text: &str) -> BoundingBox {
        BoundingBox::new(c.map(|(x, y)| Point::new(x, y)), text)
    }

    #[test]
    fn area_examples() {
        let r = quad([(0.0, 0.0), (10.0, 0.0), (10.0, 5.0), (0.0, 5.0)], "x");
        assert_eq!(box_area(&r), 50.0);
        assert_eq!(box_area(&quad([(3.0, 3.0); 4], "x")), 0.0);
        let r = quad([(2.0, 1.0), (8.0, 1.0), (8.0, 4.0), (2.0, 4.0)], "x");
        assert_eq!(box_area(&r), 18.0);
    }

    #[test]
    fn density_examples() {
        let text25 = "a".repeat(25);
        let r = quad([(0.0, 0.0), (10.0, 0.0), (10.0, 5.0), (0.0, 5.0)], &text25);
        assert_eq!(char_density(&r), 0.5);
        let r = quad([(0.0, 0.0), (10.0, 0.0), (10.0, 5.0), (0.0, 5.0)], "a");
        assert_eq!(char_density(&r), 0.02);
        assert_eq!(char_density(&quad([(3.0, 3.0); 4], "abcd")), 4.0);
        // whitespace does not count
        assert_eq!(visible_chars(&quad([(3.0, 3.0); 4], " a b ")), 2);
    }

    #[test]
    fn vector_examples() {
        let full = BoundingBox::rect(0.0, 0.0, 100.0, 200.0, "a".repeat(20));
        assert_eq!(
            spatial_vector(&full, 100.0, 200.0),
            [0.5, 0.5, 1.0, 1.0, 1.0, 0.001]
        );

        let r = BoundingBox::rect(0.0, 0.0, 10.0, 5.0, "a".repeat(25));
        assert_eq!(
            spatial_vector(&r, 100.0, 100.0),
            [0.05, 0.025, 0.1, 0.05, 0.005, 0.5]
        );

        let d = quad([(3.0, 3.0); 4], "a");
        assert_eq!(
            spatial_vector(&d, 100.0, 100.0),
            [0.03, 0.03, 0.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn rotated_quad_uses_hull() {
        let diamond = quad([(5.0, 0.0), (10.0, 5.0), (5.0, 10.0), (0.0, 5.0)], "x");
        assert_eq!(box_area(&diamond), 100.0);
    }

    fn arb_rect() -> impl Strategy<Value = (f64, f64, f64, f64, usize)> {
        (
            0.0f64..400.0,
            0.0f64..400.0,
            0.0f64..200.0,
            0.0f64..200.0,
            1usize..40,
        )
    }

    proptest! {
        #[test]
        fn scale_invariance((x, y, w, h, n) in arb_rect(), s in 0.1f64..10.0) {
            let (pw, ph) = (600.0, 600.0);
            let text = "x".repeat(n);
            let base = spatial_vector(&BoundingBox::rect(x, y, w, h, text.clone()), pw, ph);
            let scaled = spatial_vector(
                &BoundingBox::rect(x * s, y * s, w * s, h * s, text), pw * s, ph * s);
            for k in 0..5 {
                prop_assert!((base[k] - scaled[k]).abs() < 1e-12);
            }
            // density scales by 1/s^2 while both areas clear the guard
            if w * h >= 1.0 && w * h * s * s >= 1.0 {
                prop_assert!((scaled[5] * s * s - base[5]).abs() <= 1e-12 * base[5].max(1.0));
            }
        }

        #[test]
        fn translation_only_moves_center((x, y, w, h, n) in arb_rect(), dx in 0.0f64..100.0, dy in 0.0f64..100.0) {
            let text = "x".repeat(n);
            let a = spatial_vector(&BoundingBox::rect(x, y, w, h, text.clone()), 800.0, 800.0);
            let b = spatial_vector(&BoundingBox::rect(x + dx, y + dy, w, h, text), 800.0, 800.0);
            for k in 2..6 {
                prop_assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }

        #[test]
        fn components_in_range((x, y, w, h, n) in arb_rect()) {
            let v = spatial_vector(&BoundingBox::rect(x, y, w, h, "x".repeat(n)), 600.0, 600.0);
            for c in &v[..5] {
                prop_assert!((0.0..=1.0).contains(c));
            }
            prop_assert!(v[5] >= 0.0 && v.iter().all(|c| c.is_finite()));
        }
    }
}
