use super::Tensor;
use crate::graph_ir::Precision;

/// Rounds to the nearest value of the signed fixed-point grid (ties away from
/// zero) and saturates at the range edges.
pub fn fake_quantize_value(x: f64, precision: Precision) -> f64 {
    let step = precision.step();
    let q = (x / step).round() * step;
    q.clamp(precision.min_value(), precision.max_value())
}

/// Elementwise [`fake_quantize_value`]. Inside a tape use
/// [`Tape::fake_quantize`](super::Tape::fake_quantize), whose backward pass is
/// the straight-through identity.
pub fn fake_quantize(t: &Tensor, precision: Precision) -> Tensor {
    t.map(|v| fake_quantize_value(v, precision))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Every value of the <8,3> grid, enumerated independently.
    fn grid_8_3() -> Vec<f64> {
        (-128i32..=127).map(|k| k as f64 / 32.0).collect()
    }

    fn nearest_on_grid(x: f64) -> f64 {
        grid_8_3()
            .into_iter()
            .min_by(|a, b| (a - x).abs().total_cmp(&(b - x).abs()))
            .unwrap()
    }

    #[test]
    fn rounds_to_nearest_grid_point() {
        let p = Precision::FIXED_8_3;
        assert_eq!(fake_quantize_value(0.1, p), 0.09375);
        assert_eq!(nearest_on_grid(0.1), 0.09375);
        assert_eq!(fake_quantize_value(10.0, p), 3.96875);
        assert_eq!(fake_quantize_value(-10.0, p), -4.0);
        assert_eq!(fake_quantize_value(-0.1, p), -0.09375);
    }

    #[test]
    fn grid_points_are_fixed() {
        let p = Precision::FIXED_8_3;
        for v in grid_8_3() {
            assert_eq!(fake_quantize_value(v, p), v);
        }
    }

    proptest! {
        #[test]
        fn matches_grid_enumeration(x in -6.0f64..6.0) {
            let q = fake_quantize_value(x, Precision::FIXED_8_3);
            let expected = nearest_on_grid(x);
            // Exact ties may resolve either way; both are nearest.
            prop_assert!((q - x).abs() <= (expected - x).abs() + 1e-12);
        }

        #[test]
        fn idempotent_and_bounded(x in -1e3f64..1e3, total in 2u32..=32, int_frac in 0.0f64..1.0) {
            let integer = 1 + ((total - 1) as f64 * int_frac) as u32;
            let integer = integer.min(total - 1);
            let p = Precision::new(total, integer).unwrap();
            let q = fake_quantize_value(x, p);
            prop_assert_eq!(fake_quantize_value(q, p), q);
            prop_assert!(q.abs() <= p.max_value().abs().max(p.min_value().abs()));
            prop_assert!(q <= p.max_value() && q >= p.min_value());
        }
    }
}
