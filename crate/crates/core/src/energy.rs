//! The fourth-order energy pairing evaluated by its two independent routes,
//! the second-order analogue, Reilly's Hessian-energy identity, and the
//! Euler-Lagrange residuals of the constrained trace quotients.
//!
//! Route A pairs the interior operator against the boundary hierarchy:
//!
//!   Q4(u, v) = int u L4 v + oint (B0 u B3 v + B1 u B2 v).
//!
//! Route B is the manifestly symmetric expansion of the same form:
//!
//!   Q4(u, v) = int ((Lap u)(Lap v) - (4P - (n-1) J g)(grad u, grad v)
//!                   + ((n-3)/2) Q4 u v)
//!     + oint (2<gb f1, gb p2> + 2<gb f2, gb p1> - (2/n) H p1 p2
//!             + ((n-3)/2) T2~ (f1 p2 + f2 p1)
//!             - ((4/(n-1)) A0 - (2/n) H h)(gb f1, gb f2)
//!             + ((n-3)/2) ((2/n) LapBar H + T3 - ((n-3)/2n) H T2~) f1 f2),
//!
//! with f_i the trace, p_i the first-order boundary value, gb the intrinsic
//! gradient, and T2~ = T2 + (2/n^2) H^2. Neither route is obtained from the
//! other by discrete integration by parts, so their agreement is a genuine
//! numerical check of the identity rather than a tautology.

use crate::conformal::rescale;
use crate::geometry::{Geometry, GeometryError};
use crate::grid::{sym_index, GridError, MetricField, ScalarField};
use crate::operators::{
    first_derivatives, hessian, l2, l4, laplacian, q4, FaceOps, OperatorError,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("nonlinear boundary term needs a positive trace; minimum over face nodes is {0}")]
    NonPositiveTrace(f64),
    #[error("trace-quotient Euler-Lagrange system needs boundary dimension >= 4, got n = {0}")]
    LowDimension(usize),
}

/// Both route values with their additive breakdown; the totals are the sums
/// of their parts by construction.
#[derive(Debug, Clone, Default)]
pub struct EnergyReport {
    pub route_a: f64,
    pub route_b: f64,
    /// Route A: interior pairing int u L v.
    pub a_interior: f64,
    /// Route A: boundary pairing, summed over faces.
    pub a_boundary: f64,
    /// Route B: interior integrand.
    pub b_interior: f64,
    /// Route B boundary terms: mixed trace/normal gradients.
    pub b_cross: f64,
    /// Route B boundary terms: mean-curvature times normal values.
    pub b_h: f64,
    /// Route B boundary terms: second-order curvature scalar.
    pub b_t2: f64,
    /// Route B boundary terms: trace-gradient quadratic form.
    pub b_grad: f64,
    /// Route B boundary terms: zeroth-order curvature coefficient.
    pub b_zero: f64,
}

impl EnergyReport {
    fn totaled(mut self) -> EnergyReport {
        self.route_a = self.a_interior + self.a_boundary;
        self.route_b = self.b_interior
            + self.b_cross
            + self.b_h
            + self.b_t2
            + self.b_grad
            + self.b_zero;
        self
    }

    pub fn discrepancy(&self) -> f64 {
        (self.route_a - self.route_b).abs()
    }

    /// Scale of the two routes, for relative comparisons.
    pub fn magnitude(&self) -> f64 {
        self.route_a.abs().max(self.route_b.abs())
    }
}

/// <grad u, grad v> with the inverse metric.
fn grad_pair(geom: &Geometry, du: &[Vec<f64>], dv: &[Vec<f64>]) -> ScalarField {
    let d = geom.dim();
    let mut out = ScalarField::zeros(&geom.grid);
    for flat in 0..geom.grid.len() {
        let mut s = 0.0;
        for a in 0..d {
            for b in 0..d {
                s += geom.metric.ginv.comps[sym_index(d, a, b)][flat]
                    * du[a][flat]
                    * dv[b][flat];
            }
        }
        out.values[flat] = s;
    }
    out
}

/// P(grad u, grad v) with both indices raised.
fn schouten_pair(
    geom: &Geometry,
    du: &[Vec<f64>],
    dv: &[Vec<f64>],
) -> Result<ScalarField, EnergyError> {
    let d = geom.dim();
    let p = geom
        .curv
        .p
        .as_ref()
        .ok_or(GeometryError::DimensionTooLow(d))?;
    let mut out = ScalarField::zeros(&geom.grid);
    let mut up = vec![0.0; d];
    let mut vp = vec![0.0; d];
    for flat in 0..geom.grid.len() {
        for a in 0..d {
            let mut su = 0.0;
            let mut sv = 0.0;
            for b in 0..d {
                let gi = geom.metric.ginv.comps[sym_index(d, a, b)][flat];
                su += gi * du[b][flat];
                sv += gi * dv[b][flat];
            }
            up[a] = su;
            vp[a] = sv;
        }
        let mut s = 0.0;
        for a in 0..d {
            for b in 0..d {
                s += p.comps[sym_index(d, a, b)][flat] * up[a] * vp[b];
            }
        }
        out.values[flat] = s;
    }
    Ok(out)
}

/// |hess u|^2 with both indices raised.
fn hessian_norm2(geom: &Geometry, u: &ScalarField, du: &[Vec<f64>]) -> ScalarField {
    let d = geom.dim();
    let hess = hessian(geom, u, du);
    let mut out = ScalarField::zeros(&geom.grid);
    let mut giv = vec![0.0; d * d];
    let mut hv = vec![0.0; d * d];
    let mut m = vec![0.0; d * d];
    for flat in 0..geom.grid.len() {
        for a in 0..d {
            for b in a..d {
                let ci = sym_index(d, a, b);
                giv[a * d + b] = geom.metric.ginv.comps[ci][flat];
                giv[b * d + a] = giv[a * d + b];
                hv[a * d + b] = hess.comps[ci][flat];
                hv[b * d + a] = hv[a * d + b];
            }
        }
        for a in 0..d {
            for b in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += giv[a * d + k] * hv[k * d + b];
                }
                m[a * d + b] = s;
            }
        }
        let mut s = 0.0;
        for a in 0..d {
            for b in 0..d {
                s += m[a * d + b] * m[b * d + a];
            }
        }
        out.values[flat] = s;
    }
    out
}

fn volume_integral(geom: &Geometry, f: &ScalarField) -> Result<f64, EnergyError> {
    Ok(f.integrate(Some(&geom.metric.sqrt_det))?)
}

fn face_integral(
    bd: &crate::geometry::BoundaryData,
    f: &ScalarField,
) -> Result<f64, EnergyError> {
    Ok(f.integrate(Some(bd.area_density()))?)
}

/// The fourth-order pairing by both routes.
pub fn q4_pairing(
    geom: &Geometry,
    u: &ScalarField,
    v: &ScalarField,
) -> Result<EnergyReport, EnergyError> {
    let n = (geom.dim() - 1) as f64;
    let mut rep = EnergyReport::default();

    // Route A interior.
    let l4v = l4(geom, v)?;
    rep.a_interior = volume_integral(geom, &u.zip(&l4v, |a, b| a * b))?;

    // Route B interior.
    let du = first_derivatives(u);
    let dv = first_derivatives(v);
    let lap_u = laplacian(geom, u);
    let lap_v = laplacian(geom, v);
    let pg = schouten_pair(geom, &du, &dv)?;
    let gg = grad_pair(geom, &du, &dv);
    let q = q4(geom)?;
    let mut integrand = ScalarField::zeros(&geom.grid);
    for flat in 0..geom.grid.len() {
        integrand.values[flat] = lap_u.values[flat] * lap_v.values[flat]
            - 4.0 * pg.values[flat]
            + (n - 1.0) * geom.curv.j.values[flat] * gg.values[flat]
            + 0.5 * (n - 3.0) * q.values[flat] * u.values[flat] * v.values[flat];
    }
    rep.b_interior = volume_integral(geom, &integrand)?;

    // Boundary terms, face by face.
    for bd in &geom.boundary {
        let ops = FaceOps::new(geom, bd);
        let f1 = ops.b_third(0, u)?;
        let f2 = ops.b_third(0, v)?;
        let p1 = ops.b_third(1, u)?;
        let p2 = ops.b_third(1, v)?;
        let b2v = ops.b_third(2, v)?;
        let b3v = ops.b_third(3, v)?;

        rep.a_boundary += face_integral(bd, &f1.zip(&b3v, |a, b| a * b))?;
        rep.a_boundary += face_integral(bd, &p1.zip(&b2v, |a, b| a * b))?;

        let cross = ops
            .gradbar_pair(&f1, &p2)
            .zip(&ops.gradbar_pair(&f2, &p1), |a, b| 2.0 * (a + b));
        rep.b_cross += face_integral(bd, &cross)?;

        let mut hterm = ScalarField::zeros(&bd.grid);
        for fi in 0..bd.grid.len() {
            hterm.values[fi] =
                -2.0 / n * bd.h_mean.values[fi] * p1.values[fi] * p2.values[fi];
        }
        rep.b_h += face_integral(bd, &hterm)?;

        let t2t = ops.t2_tilde();
        let mut t2term = ScalarField::zeros(&bd.grid);
        for fi in 0..bd.grid.len() {
            t2term.values[fi] = 0.5
                * (n - 3.0)
                * t2t.values[fi]
                * (f1.values[fi] * p2.values[fi] + f2.values[fi] * p1.values[fi]);
        }
        rep.b_t2 += face_integral(bd, &t2term)?;

        let a0ff = ops.tensor_grad_grad(&bd.a0, &f1, &f2);
        let gbff = ops.gradbar_pair(&f1, &f2);
        let mut gradterm = ScalarField::zeros(&bd.grid);
        for fi in 0..bd.grid.len() {
            gradterm.values[fi] = -4.0 / (n - 1.0) * a0ff.values[fi]
                + 2.0 / n * bd.h_mean.values[fi] * gbff.values[fi];
        }
        rep.b_grad += face_integral(bd, &gradterm)?;

        let lapbar_h = ops.lapbar(&bd.h_mean);
        let t3 = ops.t3()?;
        let mut zeroterm = ScalarField::zeros(&bd.grid);
        for fi in 0..bd.grid.len() {
            let coeff = 2.0 / n * lapbar_h.values[fi] + t3.values[fi]
                - 0.5 * (n - 3.0) / n * bd.h_mean.values[fi] * t2t.values[fi];
            zeroterm.values[fi] =
                0.5 * (n - 3.0) * coeff * f1.values[fi] * f2.values[fi];
        }
        rep.b_zero += face_integral(bd, &zeroterm)?;
    }
    Ok(rep.totaled())
}

/// The second-order pairing by both routes:
///
///   Q2(u, v) = int u L2 v + oint f1 B1 v
///            = int (<grad u, grad v> + ((n-1)/2) J u v)
///              + ((n-1)/2n) oint H f1 f2.
pub fn q2_pairing(
    geom: &Geometry,
    u: &ScalarField,
    v: &ScalarField,
) -> Result<EnergyReport, EnergyError> {
    let n = (geom.dim() - 1) as f64;
    let mut rep = EnergyReport::default();

    let l2v = l2(geom, v);
    rep.a_interior = volume_integral(geom, &u.zip(&l2v, |a, b| a * b))?;

    let du = first_derivatives(u);
    let dv = first_derivatives(v);
    let gg = grad_pair(geom, &du, &dv);
    let mut integrand = ScalarField::zeros(&geom.grid);
    for flat in 0..geom.grid.len() {
        integrand.values[flat] = gg.values[flat]
            + 0.5 * (n - 1.0)
                * geom.curv.j.values[flat]
                * u.values[flat]
                * v.values[flat];
    }
    rep.b_interior = volume_integral(geom, &integrand)?;

    for bd in &geom.boundary {
        let ops = FaceOps::new(geom, bd);
        let f1 = ops.trace(u);
        let f2 = ops.trace(v);
        let b1v = ops.b_first(1, v)?;
        rep.a_boundary += face_integral(bd, &f1.zip(&b1v, |a, b| a * b))?;
        let mut hterm = ScalarField::zeros(&bd.grid);
        for fi in 0..bd.grid.len() {
            hterm.values[fi] = 0.5 * (n - 1.0) / n
                * bd.h_mean.values[fi]
                * f1.values[fi]
                * f2.values[fi];
        }
        rep.b_h += face_integral(bd, &hterm)?;
    }
    Ok(rep.totaled())
}

/// The quadratic energy E4(u) = Q4(u, u), route A value.
pub fn e4(geom: &Geometry, u: &ScalarField) -> Result<f64, EnergyError> {
    Ok(q4_pairing(geom, u, u)?.route_a)
}

/// Pieces of Reilly's identity. The classical statement is
///
///   int (|hess u|^2 - (Lap u)^2 + (n-1) P(grad u, grad u) + J |grad u|^2)
///     = oint (2 <gb eta u, gb u> - A(gb u, gb u) - H (eta u)^2),
///
/// and `boundary_traced` is the same right-hand side rewritten in the trace
/// f and the first-order boundary value p = eta u + ((n-3)/2n) H f:
///
///   oint (2 <gb p, gb f> - H p^2 + ((n-3)/n) H^2 f p
///         - (A + ((n-3)/n) H h)(gb f, gb f)
///         + ((n-3)/2n) (LapBar H - ((n-3)/2n) H^3) f^2).
#[derive(Debug, Clone)]
pub struct ReillyParts {
    /// int |hess u|^2 dV.
    pub hessian_sq: f64,
    /// int ((Lap u)^2 - (n-1) P(grad u, grad u) - J |grad u|^2) dV.
    pub interior: f64,
    /// Right-hand side in normal-derivative variables.
    pub boundary_direct: f64,
    /// Right-hand side in boundary-hierarchy variables.
    pub boundary_traced: f64,
}

impl ReillyParts {
    /// |lhs - rhs| of the classical identity.
    pub fn direct_residual(&self) -> f64 {
        (self.hessian_sq - self.interior - self.boundary_direct).abs()
    }

    /// |lhs - rhs| of the trace-variable form.
    pub fn traced_residual(&self) -> f64 {
        (self.hessian_sq - self.interior - self.boundary_traced).abs()
    }

    pub fn magnitude(&self) -> f64 {
        self.hessian_sq.abs().max(self.interior.abs()).max(1.0)
    }
}

pub fn reilly_parts(geom: &Geometry, u: &ScalarField) -> Result<ReillyParts, EnergyError> {
    let n = (geom.dim() - 1) as f64;
    let du = first_derivatives(u);
    let lap = laplacian(geom, u);
    let h2 = hessian_norm2(geom, u, &du);
    let pg = schouten_pair(geom, &du, &du)?;
    let gg = grad_pair(geom, &du, &du);

    let hessian_sq = volume_integral(geom, &h2)?;
    let mut interior = ScalarField::zeros(&geom.grid);
    for flat in 0..geom.grid.len() {
        interior.values[flat] = lap.values[flat].powi(2)
            - (n - 1.0) * pg.values[flat]
            - geom.curv.j.values[flat] * gg.values[flat];
    }
    let interior = volume_integral(geom, &interior)?;

    let mut boundary_direct = 0.0;
    let mut boundary_traced = 0.0;
    let c = 0.5 * (n - 3.0) / n;
    for bd in &geom.boundary {
        let ops = FaceOps::new(geom, bd);
        let f = ops.trace(u);
        let eta_u = ops.eta(u);
        let p = ops.b_third(1, u)?;

        let cross = ops.gradbar_pair(&eta_u, &f);
        let aff = ops.tensor_grad_grad(&bd.a, &f, &f);
        let mut direct = ScalarField::zeros(&bd.grid);
        for fi in 0..bd.grid.len() {
            direct.values[fi] = 2.0 * cross.values[fi] - aff.values[fi]
                - bd.h_mean.values[fi] * eta_u.values[fi].powi(2);
        }
        boundary_direct += face_integral(bd, &direct)?;

        let cross_t = ops.gradbar_pair(&p, &f);
        let gbff = ops.gradbar_pair(&f, &f);
        let lapbar_h = ops.lapbar(&bd.h_mean);
        let mut traced = ScalarField::zeros(&bd.grid);
        for fi in 0..bd.grid.len() {
            let h = bd.h_mean.values[fi];
            traced.values[fi] = 2.0 * cross_t.values[fi]
                - h * p.values[fi].powi(2)
                + 2.0 * c * h * h * f.values[fi] * p.values[fi]
                - (aff.values[fi] + 2.0 * c * h * gbff.values[fi])
                + c * (lapbar_h.values[fi] - c * h * h * h) * f.values[fi].powi(2);
        }
        boundary_traced += face_integral(bd, &traced)?;
    }
    Ok(ReillyParts {
        hessian_sq,
        interior,
        boundary_direct,
        boundary_traced,
    })
}

/// Relative defect of the energy transformation law
/// E4(u; e^{2 sigma} g) = E4(e^{(n-3) sigma / 2} u; g).
pub fn energy_invariance_residual(
    g: &MetricField,
    sigma: &ScalarField,
    u: &ScalarField,
) -> Result<f64, EnergyError> {
    let n = (g.dim() - 1) as f64;
    let geom_hat = Geometry::new(rescale(g, sigma))?;
    let lhs = e4(&geom_hat, u)?;
    let geom = Geometry::new(g.clone())?;
    let shifted = u.zip(sigma, |uv, sv| (0.5 * (n - 3.0) * sv).exp() * uv);
    let rhs = e4(&geom, &shifted)?;
    Ok((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0))
}

/// Which constrained trace quotient the Euler-Lagrange system belongs to:
/// the first constrains the first-order boundary value, the second the
/// second-order one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceQuotient {
    FirstKind,
    SecondKind,
}

/// Sup-norms of the three Euler-Lagrange residuals
///   L4 u = 0,   B u = 0,   B3 u = lambda u^{(n+3)/(n-3)},
/// with B the first- or second-order boundary operator per the quotient
/// kind. Requires n >= 4 and a positive boundary trace.
#[derive(Debug, Clone)]
pub struct EulerResiduals {
    pub interior: f64,
    pub constraint: f64,
    pub nonlinear: f64,
}

pub fn euler_residual(
    geom: &Geometry,
    u: &ScalarField,
    lambda: f64,
    quotient: TraceQuotient,
) -> Result<EulerResiduals, EnergyError> {
    let n = geom.dim() - 1;
    if n < 4 {
        return Err(EnergyError::LowDimension(n));
    }
    let exponent = (n as f64 + 3.0) / (n as f64 - 3.0);

    // Validate the positivity precondition on every face before any
    // derivative work, so a bad input is reported cheaply.
    let mut traces = Vec::with_capacity(geom.boundary.len());
    for bd in &geom.boundary {
        let f = FaceOps::new(geom, bd).trace(u);
        let min_trace = f.values.iter().cloned().fold(f64::INFINITY, f64::min);
        if min_trace <= 0.0 {
            return Err(EnergyError::NonPositiveTrace(min_trace));
        }
        traces.push(f);
    }

    let l4u = l4(geom, u)?;
    let interior = l4u.max_abs();

    let mut constraint: f64 = 0.0;
    let mut nonlinear: f64 = 0.0;
    for (bd, f) in geom.boundary.iter().zip(&traces) {
        let ops = FaceOps::new(geom, bd);
        let b = match quotient {
            TraceQuotient::FirstKind => ops.b_third(1, u)?,
            TraceQuotient::SecondKind => ops.b_third(2, u)?,
        };
        constraint = constraint.max(b.max_abs());
        let b3 = ops.b_third(3, u)?;
        for fi in 0..bd.grid.len() {
            let r = b3.values[fi] - lambda * f.values[fi].powf(exponent);
            nonlinear = nonlinear.max(r.abs());
        }
    }
    Ok(EulerResiduals {
        interior,
        constraint,
        nonlinear,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ChartGrid;
    use crate::testfields::{
        conformal_factor_draw, conformally_flat_draw, rng_for, test_function_draw,
    };
    use std::sync::Arc;

    /// Smooth bump vanishing identically near both ends of [0, 1].
    fn bump(x: f64) -> f64 {
        let (lo, hi) = (0.2, 0.8);
        if x <= lo || x >= hi {
            0.0
        } else {
            (-1.0 / ((x - lo) * (hi - x))).exp() * 1e3
        }
    }

    /// Compactly supported pair sharing a tangential mode, so the pairing
    /// does not integrate to zero by orthogonality.
    fn compact_fields(grid: &Arc<ChartGrid>) -> (ScalarField, ScalarField) {
        let pi2 = 2.0 * std::f64::consts::PI;
        let u = ScalarField::from_fn(grid, |x| bump(x[0]) * (pi2 * x[1]).cos());
        let v = ScalarField::from_fn(grid, |x| {
            bump(x[0]) * (0.6 + x[0]) * ((pi2 * x[1]).cos() + 0.5 * (pi2 * x[2]).sin())
        });
        (u, v)
    }

    #[test]
    fn constants_have_zero_energy_on_flat_slabs() {
        let grid = ChartGrid::slab(4, 9).unwrap();
        let geom = Geometry::flat(&grid).unwrap();
        let one = ScalarField::constant(&grid, 1.0);
        let rep = q4_pairing(&geom, &one, &one).unwrap();
        assert!(rep.route_a.abs() < 1e-12, "route A {}", rep.route_a);
        assert!(rep.route_b.abs() < 1e-12, "route B {}", rep.route_b);
        let rep2 = q2_pairing(&geom, &one, &one).unwrap();
        assert!(rep2.route_a.abs() < 1e-12);
        assert!(rep2.route_b.abs() < 1e-12);
    }

    #[test]
    fn compact_support_reduces_to_biharmonic_energy() {
        let grid = ChartGrid::slab(3, 49).unwrap();
        let geom = Geometry::flat(&grid).unwrap();
        let (u, v) = compact_fields(&grid);
        let rep = q4_pairing(&geom, &u, &v).unwrap();
        // Boundary contributions vanish with the support.
        assert!(rep.a_boundary.abs() < 1e-10, "boundary {}", rep.a_boundary);
        assert!((rep.b_cross + rep.b_h + rep.b_t2 + rep.b_grad + rep.b_zero).abs() < 1e-10);
        // Route B is literally int Lap u Lap v here; route A differs by
        // stencil error only.
        let lu = laplacian(&geom, &u);
        let lv = laplacian(&geom, &v);
        let direct = volume_integral(&geom, &lu.zip(&lv, |a, b| a * b)).unwrap();
        assert!((rep.route_b - direct).abs() < 1e-12 * direct.abs().max(1.0));
        let scale = rep.magnitude();
        assert!(
            rep.discrepancy() < 2e-4 * scale,
            "routes {} vs {}",
            rep.route_a,
            rep.route_b
        );
    }

    #[test]
    fn q2_compact_support_reduces_to_dirichlet_energy() {
        let grid = ChartGrid::slab(3, 49).unwrap();
        let geom = Geometry::flat(&grid).unwrap();
        let (u, v) = compact_fields(&grid);
        let rep = q2_pairing(&geom, &u, &v).unwrap();
        let du = first_derivatives(&u);
        let dv = first_derivatives(&v);
        let direct = volume_integral(&geom, &grad_pair(&geom, &du, &dv)).unwrap();
        assert!((rep.route_b - direct).abs() < 1e-12 * direct.abs().max(1.0));
        assert!(rep.discrepancy() < 1e-2 * rep.magnitude());
    }

    #[test]
    fn breakdown_sums_to_totals() {
        let grid = ChartGrid::slab(3, 9).unwrap();
        let mut rng = rng_for(31, 0);
        let g = conformally_flat_draw(&mut rng, &grid, 0.05);
        let geom = Geometry::new(g).unwrap();
        let u = test_function_draw(&mut rng, &grid);
        let v = test_function_draw(&mut rng, &grid);
        let rep = q4_pairing(&geom, &u, &v).unwrap();
        let total_b = rep.b_interior + rep.b_cross + rep.b_h + rep.b_t2 + rep.b_grad + rep.b_zero;
        assert_eq!(rep.route_a, rep.a_interior + rep.a_boundary);
        assert_eq!(rep.route_b, total_b);
    }

    #[test]
    fn routes_agree_and_symmetrize_on_curved_draws() {
        // One-sided third-derivative stencils keep coarse grids
        // pre-asymptotic, so check refinement across a doubling rather
        // than absolute smallness at one size.
        let mut disc = Vec::new();
        let mut asym = Vec::new();
        let mut scale: f64 = 1.0;
        for &nodes in &[25usize, 49] {
            let grid = ChartGrid::slab(3, nodes).unwrap();
            let mut rng = rng_for(37, 0);
            let g = conformally_flat_draw(&mut rng, &grid, 0.05);
            let geom = Geometry::new(g).unwrap();
            let u = test_function_draw(&mut rng, &grid);
            let v = test_function_draw(&mut rng, &grid);
            let uv = q4_pairing(&geom, &u, &v).unwrap();
            let vu = q4_pairing(&geom, &v, &u).unwrap();
            disc.push(uv.discrepancy());
            asym.push((uv.route_a - vu.route_a).abs());
            scale = uv.magnitude().max(1.0);
        }
        assert!(
            disc[1] * 8.0 < disc[0],
            "route discrepancy refines too slowly: {disc:?}"
        );
        assert!(
            asym[1] * 8.0 < asym[0],
            "asymmetry refines too slowly: {asym:?}"
        );
        assert!(disc[1] < 1e-2 * scale, "discrepancy {} at {}", disc[1], scale);
    }

    #[test]
    fn reilly_identity_flat_quadratic() {
        // u = (x0)^2: hessian energy 4 Vol, boundary terms vanish.
        let grid = ChartGrid::slab(3, 17).unwrap();
        let geom = Geometry::flat(&grid).unwrap();
        let u = ScalarField::from_fn(&grid, |x| x[0] * x[0]);
        let parts = reilly_parts(&geom, &u).unwrap();
        assert!((parts.hessian_sq - 4.0).abs() < 1e-10, "{}", parts.hessian_sq);
        assert!(parts.direct_residual() < 1e-9);
        assert!(parts.traced_residual() < 1e-9);
    }

    #[test]
    fn reilly_identity_compact_support() {
        let grid = ChartGrid::slab(3, 33).unwrap();
        let geom = Geometry::flat(&grid).unwrap();
        let (u, _) = compact_fields(&grid);
        let parts = reilly_parts(&geom, &u).unwrap();
        assert!(parts.boundary_direct.abs() < 1e-10);
        assert!(parts.boundary_traced.abs() < 1e-10);
        // int |hess u|^2 = int (Lap u)^2 for compactly supported u.
        let rel = parts.direct_residual() / parts.magnitude();
        assert!(rel < 2e-2, "relative defect {rel}");
    }

    #[test]
    fn reilly_identity_curved_draw() {
        let grid = ChartGrid::slab(3, 33).unwrap();
        let mut rng = rng_for(41, 0);
        let g = conformally_flat_draw(&mut rng, &grid, 0.05);
        let geom = Geometry::new(g).unwrap();
        let u = test_function_draw(&mut rng, &grid);
        let parts = reilly_parts(&geom, &u).unwrap();
        let scale = parts.magnitude();
        assert!(
            parts.direct_residual() < 5e-3 * scale,
            "direct {} at {}",
            parts.direct_residual(),
            scale
        );
        assert!(
            parts.traced_residual() < 5e-3 * scale,
            "traced {} at {}",
            parts.traced_residual(),
            scale
        );
    }

    #[test]
    fn energy_is_conformally_invariant() {
        let grid = ChartGrid::slab(3, 33).unwrap();
        let mut rng = rng_for(43, 0);
        let g = conformally_flat_draw(&mut rng, &grid, 0.05);
        let sigma = conformal_factor_draw(&mut rng, &grid);
        let u = test_function_draw(&mut rng, &grid);
        let res = energy_invariance_residual(&g, &sigma, &u).unwrap();
        assert!(res < 5e-3, "invariance defect {res}");
    }

    #[test]
    fn euler_flat_constant_is_exact() {
        let grid = ChartGrid::slab(5, 9).unwrap();
        let geom = Geometry::flat(&grid).unwrap();
        let one = ScalarField::constant(&grid, 1.0);
        // Fourth-derivative stencil weights scale like 1/h^4, so "exact"
        // zeros on constants sit at 1e-11 in double precision.
        let res = euler_residual(&geom, &one, 0.0, TraceQuotient::SecondKind).unwrap();
        assert!(res.interior < 1e-9);
        assert!(res.constraint < 1e-9);
        assert!(res.nonlinear < 1e-9);
        // Nonzero lambda shifts only the nonlinear residual, by lambda itself.
        let res = euler_residual(&geom, &one, 2.0, TraceQuotient::FirstKind).unwrap();
        assert!((res.nonlinear - 2.0).abs() < 1e-9);
    }

    #[test]
    fn euler_rejects_low_dimension_and_bad_trace() {
        let grid = ChartGrid::slab(3, 9).unwrap();
        let geom = Geometry::flat(&grid).unwrap();
        let one = ScalarField::constant(&grid, 1.0);
        assert!(matches!(
            euler_residual(&geom, &one, 0.0, TraceQuotient::SecondKind),
            Err(EnergyError::LowDimension(2))
        ));
        let grid = ChartGrid::slab(5, 9).unwrap();
        let geom = Geometry::flat(&grid).unwrap();
        let signed = ScalarField::from_fn(&grid, |x| x[0] - 0.5);
        assert!(matches!(
            euler_residual(&geom, &signed, 0.0, TraceQuotient::SecondKind),
            Err(EnergyError::NonPositiveTrace(_))
        ));
        // A nonzero interior residual is reported, not raised.
        let u = ScalarField::from_fn(&grid, |x| {
            1.5 + 0.1 * (2.0 * std::f64::consts::PI * x[1]).sin() * x[0] * x[0]
        });
        let res = euler_residual(&geom, &u, 0.0, TraceQuotient::SecondKind).unwrap();
        assert!(res.interior > 1e-3);
    }
}
