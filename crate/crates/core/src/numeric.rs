//! Scalar root bracketing shared by the price solvers.

/// Hard cap on bisection steps; 200 halvings exhaust any finite f64 bracket.
pub(crate) const MAX_BISECTION_STEPS: usize = 200;

/// Bisection for a nondecreasing function `g` with `g(lower) <= 0 <= g(upper)`.
///
/// Stops once the bracket is no wider than `tol` or cannot be split further in
/// floating point. Returns the final bracket and the number of halvings.
pub(crate) fn bisect_increasing<F>(mut g: F, lower: f64, upper: f64, tol: f64) -> (f64, f64, usize)
where
    F: FnMut(f64) -> f64,
{
    let (mut lo, mut hi) = (lower, upper);
    let mut steps = 0;
    while hi - lo > tol && steps < MAX_BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        steps += 1;
        let value = g(mid);
        if value == 0.0 {
            return (mid, mid, steps);
        }
        if value < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo, hi, steps)
}

pub(crate) fn clip(x: f64, lower: f64, upper: f64) -> f64 {
    x.max(lower).min(upper)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_linear_root() {
        let (lo, hi, steps) = bisect_increasing(|x| 2.0 * x - 1.0, -10.0, 10.0, 1e-12);
        assert!(lo <= 0.5 && 0.5 <= hi);
        assert!(hi - lo <= 1e-12);
        assert!(steps > 30);
    }

    #[test]
    fn exact_hit_collapses_bracket() {
        let (lo, hi, _) = bisect_increasing(|x| x, -1.0, 1.0, 1e-12);
        assert_eq!((lo, hi), (0.0, 0.0));
    }

    #[test]
    fn stops_at_float_resolution() {
        let (lo, hi, steps) = bisect_increasing(|x| x - 0.3, 0.0, 1.0, 0.0);
        assert!(steps < MAX_BISECTION_STEPS);
        assert!(hi - lo <= 2.0 * f64::EPSILON);
    }
}
