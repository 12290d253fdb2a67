//! Derivative-free bounded maximization of a scalar function.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarMax {
    pub x: f64,
    pub fx: f64,
    pub iterations: usize,
    pub converged: bool,
}

const GOLDEN: f64 = 0.381_966_011_250_105_1; // (3 - sqrt(5)) / 2

/// Brent's method (golden section with parabolic steps) on `[lo, hi]`.
///
/// Stops when the bracket around the incumbent is narrower than
/// `2 * (xtol_abs + rel * |x|)`.
pub fn brent_max<F: FnMut(f64) -> f64>(
    mut f: F,
    lo: f64,
    hi: f64,
    xtol_abs: f64,
    max_iter: usize,
) -> ScalarMax {
    assert!(lo <= hi, "empty bracket [{lo}, {hi}]");
    let rel = 1e-10;
    let (mut a, mut b) = (lo, hi);
    let mut x = a + GOLDEN * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = -f(x);
    let (mut fw, mut fv) = (fx, fx);
    let (mut d, mut e) = (0.0f64, 0.0f64);

    for iter in 0..max_iter {
        let m = 0.5 * (a + b);
        let tol = rel * x.abs() + xtol_abs;
        let t2 = 2.0 * tol;
        if (x - m).abs() <= t2 - 0.5 * (b - a) {
            return ScalarMax {
                x,
                fx: -fx,
                iterations: iter,
                converged: true,
            };
        }
        let mut golden = true;
        if e.abs() > tol {
            // parabola through (x, fx), (w, fw), (v, fv)
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            } else {
                q = -q;
            }
            let e_prev = e;
            if p.abs() < (0.5 * q * e_prev).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < t2 || b - u < t2 {
                    d = if x < m { tol } else { -tol };
                }
                golden = false;
            }
        }
        if golden {
            e = if x < m { b - x } else { a - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol {
            x + d
        } else if d > 0.0 {
            x + tol
        } else {
            x - tol
        };
        let fu = -f(u);
        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    ScalarMax {
        x,
        fx: -fx,
        iterations: max_iter,
        converged: false,
    }
}

/// Coarse grid search over `grid` (ascending), then Brent between the
/// neighbours of the best grid point. The grid endpoints are candidates too,
/// so boundary maxima are returned exactly.
pub fn grid_then_brent<F: FnMut(f64) -> f64>(
    mut f: F,
    grid: &[f64],
    xtol_abs: f64,
    max_iter: usize,
) -> ScalarMax {
    assert!(grid.len() >= 2);
    let values: Vec<f64> = grid.iter().map(|&x| f(x)).collect();
    let best = values
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(grid.len() - 1)];
    let refined = brent_max(&mut f, lo, hi, xtol_abs, max_iter);
    let iterations = grid.len() + refined.iterations;
    if refined.fx.is_finite() && refined.fx >= values[best] {
        ScalarMax {
            iterations,
            ..refined
        }
    } else {
        ScalarMax {
            x: grid[best],
            fx: values[best],
            iterations,
            converged: refined.converged,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_interior_maximum() {
        let r = brent_max(|x| -(x - 1.234).powi(2), 0.0, 10.0, 1e-10, 200);
        assert!(r.converged);
        assert!((r.x - 1.234).abs() < 1e-8);
    }

    #[test]
    fn finds_boundary_maximum() {
        let r = brent_max(|x| -x, 0.0, 5.0, 1e-10, 200);
        assert!(r.x < 1e-8);
    }

    #[test]
    fn grid_handles_boundary_and_skewed_functions() {
        let grid: Vec<f64> = std::iter::once(0.0)
            .chain((0..=96).map(|k| 10f64.powf(-6.0 + k as f64 / 8.0)))
            .collect();
        let r = grid_then_brent(|x| -x, &grid, 1e-8, 200);
        assert_eq!(r.x, 0.0);
        let r = grid_then_brent(|x: f64| -(x.ln() - 3.0f64.ln()).powi(2), &grid, 1e-8, 200);
        assert!((r.x - 3.0).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn reports_non_convergence() {
        let r = brent_max(|x| -(x - 0.3).powi(2), 0.0, 1.0, 1e-14, 3);
        assert!(!r.converged);
    }
}
