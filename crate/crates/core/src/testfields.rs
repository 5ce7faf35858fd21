//! Deterministic random test fields.
//!
//! Everything here is a small trigonometric polynomial with integer
//! wavevectors.  On periodic axes this makes the field exactly periodic;
//! on bounded axes periodicity is irrelevant and the integer frequencies
//! just keep derivatives O(1).  Draws are seeded, so a suite run with a
//! fixed seed produces byte-identical reports.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::grid::{ChartGrid, MetricField, ScalarField, SymField};

/// Sum of `amp * sin(2 pi k.x + phase)` terms with integer wavevectors.
#[derive(Debug, Clone)]
pub struct TrigPoly {
    pub terms: Vec<(f64, Vec<i32>, f64)>,
}

const TAU: f64 = std::f64::consts::TAU;

impl TrigPoly {
    /// Draw `nterms` random terms in `dim` variables with amplitudes of
    /// size `eps` and |k_i| <= kmax (k = 0 allowed per component, never
    /// the zero vector).
    pub fn random<R: Rng>(rng: &mut R, dim: usize, nterms: usize, eps: f64, kmax: i32) -> Self {
        let mut terms = Vec::with_capacity(nterms);
        for _ in 0..nterms {
            let mut k = vec![0i32; dim];
            while k.iter().all(|&c| c == 0) {
                for c in k.iter_mut() {
                    *c = rng.random_range(-kmax..=kmax);
                }
            }
            let amp = eps * (0.5 + 0.5 * rng.random::<f64>());
            let phase = TAU * rng.random::<f64>();
            terms.push((amp, k, phase));
        }
        TrigPoly { terms }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for (amp, k, phase) in &self.terms {
            let arg: f64 = k
                .iter()
                .zip(x)
                .map(|(&ki, &xi)| ki as f64 * xi)
                .sum::<f64>();
            s += amp * (TAU * arg + phase).sin();
        }
        s
    }

    pub fn field(&self, grid: &std::sync::Arc<ChartGrid>) -> ScalarField {
        ScalarField::from_fn(grid, |x| self.eval(x))
    }
}

/// Seeded RNG for a named check; the id keeps draws independent across
/// suites without coupling their iteration order.
pub fn rng_for(seed: u64, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ id.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Conformal factor draw: small smooth sigma, |sigma| ~ 0.05.
pub fn conformal_factor_draw<R: Rng>(rng: &mut R, grid: &std::sync::Arc<ChartGrid>) -> ScalarField {
    TrigPoly::random(rng, grid.dim(), 3, 0.05, 2).field(grid)
}

/// Test function draw: O(1) amplitude, a few low modes.
pub fn test_function_draw<R: Rng>(rng: &mut R, grid: &std::sync::Arc<ChartGrid>) -> ScalarField {
    let p = TrigPoly::random(rng, grid.dim(), 4, 1.0, 2);
    ScalarField::from_fn(grid, |x| 0.3 + p.eval(x))
}

/// Metric draw: identity plus a small symmetric trig perturbation.
/// Positive definiteness follows from smallness (checked on assembly).
pub fn metric_draw<R: Rng>(
    rng: &mut R,
    grid: &std::sync::Arc<ChartGrid>,
    eps: f64,
) -> MetricField {
    let d = grid.dim();
    let mut comps = Vec::new();
    for mu in 0..d {
        for nu in mu..d {
            comps.push((mu, nu, TrigPoly::random(rng, d, 2, eps, 2)));
        }
    }
    let g = SymField::from_fn(grid, d, |x, mu, nu| {
        let base = if mu == nu { 1.0 } else { 0.0 };
        let poly = comps
            .iter()
            .find(|(a, b, _)| *a == mu.min(nu) && *b == mu.max(nu))
            .map(|(_, _, p)| p.eval(x))
            .unwrap_or(0.0);
        base + poly
    });
    MetricField::new(g).expect("perturbation small enough to stay positive definite")
}

/// Conformally flat metric draw: e^{2 rho} delta with rho a small trig
/// polynomial.  Faces of such a slab are umbilic, which keeps every
/// operator well defined on two-dimensional boundaries.
pub fn conformally_flat_draw<R: Rng>(
    rng: &mut R,
    grid: &std::sync::Arc<ChartGrid>,
    eps: f64,
) -> MetricField {
    let rho = TrigPoly::random(rng, grid.dim(), 3, eps, 2);
    let factor = ScalarField::from_fn(grid, |x| (2.0 * rho.eval(x)).exp());
    let mut g = SymField::zeros(grid, grid.dim());
    for mu in 0..grid.dim() {
        let ci = crate::grid::sym_index(grid.dim(), mu, mu);
        g.comps[ci].copy_from_slice(&factor.values);
    }
    MetricField::new(g).expect("conformal factor is positive")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ChartGrid;

    #[test]
    fn draws_are_deterministic() {
        let grid = ChartGrid::slab(3, 9).unwrap();
        let mut r1 = rng_for(42, 7);
        let mut r2 = rng_for(42, 7);
        let f1 = test_function_draw(&mut r1, &grid);
        let f2 = test_function_draw(&mut r2, &grid);
        assert_eq!(f1.values, f2.values);
        let mut r3 = rng_for(42, 8);
        let f3 = test_function_draw(&mut r3, &grid);
        assert_ne!(f1.values, f3.values);
    }

    #[test]
    fn periodic_axes_see_exactly_periodic_fields() {
        let mut rng = rng_for(1, 1);
        let p = TrigPoly::random(&mut rng, 3, 5, 1.0, 2);
        // Axis 0 is bounded, axes 1 and 2 periodic with period 1.
        let x = [0.3, 0.2, 0.7];
        let mut y = x;
        y[1] += 1.0;
        assert!((p.eval(&x) - p.eval(&y)).abs() < 1e-12);
    }

    #[test]
    fn metric_draw_is_positive_definite() {
        let grid = ChartGrid::slab(3, 9).unwrap();
        let mut rng = rng_for(5, 2);
        let m = metric_draw(&mut rng, &grid, 0.03);
        // MetricField::new already Cholesky-validates every node; spot
        // check the determinant is near one.
        for fi in (0..grid.len()).step_by(97) {
            let lsd = m.log_sqrt_det.values[fi];
            assert!(lsd.abs() < 0.2, "log sqrt det {lsd}");
        }
    }
}
