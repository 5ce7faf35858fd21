//! Conformal rescaling and covariance verification.
//!
//! Every operator in this crate obeys a law of the form
//!   D_{e^{2s} g}(u) = e^{(w-k) s} D_g(e^{-w s} u)
//! for its order k and a weight w.  This module rescales metrics,
//! verifies those laws on seeded draws under grid refinement, and checks
//! the closed-form first variations of the boundary building blocks by
//! differentiating through the family t -> e^{2 t s} g.

use crate::geometry::{BoundaryData, Geometry, GeometryError};
use crate::grid::{ChartGrid, MetricField, ScalarField, SymField};
use crate::operators::{l2, l4, FaceOps, OperatorError};
use crate::report::CheckReport;
use crate::testfields::{conformal_factor_draw, conformally_flat_draw, rng_for, test_function_draw};

/// ghat_ij = e^{2 sigma} g_ij, node by node.
pub fn rescale(g: &MetricField, sigma: &ScalarField) -> MetricField {
    let d = g.dim();
    let grid = g.grid().clone();
    let mut sym = SymField::zeros(&grid, d);
    for mu in 0..d {
        for nu in mu..d {
            for fi in 0..grid.len() {
                let s = (2.0 * sigma.values[fi]).exp();
                sym.set(fi, mu, nu, s * g.g.at(fi, mu, nu));
            }
        }
    }
    MetricField::new(sym).expect("conformal factor preserves positivity")
}

/// The operators whose transformation laws the suite verifies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovOp {
    /// Second-order interior operator -Lap + ((n-1)/2) J.
    ConformalLaplacian,
    /// Fourth-order interior operator.
    Paneitz,
    /// First-order boundary pair, k in {0,1}.
    FirstOrder(usize),
    /// Third-order boundary family, k in {0,..,3}.
    ThirdOrder(usize),
    /// General-weight boundary family, k in {0,..,3}.
    Weighted(usize, f64),
}

impl CovOp {
    pub fn order(&self) -> usize {
        match *self {
            CovOp::ConformalLaplacian => 2,
            CovOp::Paneitz => 4,
            CovOp::FirstOrder(k) | CovOp::ThirdOrder(k) | CovOp::Weighted(k, _) => k,
        }
    }

    /// The weight w in D_ghat(u) = e^{(w-k) sigma} D_g(e^{-w sigma} u);
    /// n is the boundary dimension.
    pub fn weight(&self, n: usize) -> f64 {
        let n = n as f64;
        match *self {
            CovOp::ConformalLaplacian | CovOp::FirstOrder(_) => -0.5 * (n - 1.0),
            CovOp::Paneitz | CovOp::ThirdOrder(_) => -0.5 * (n - 3.0),
            CovOp::Weighted(_, w) => w,
        }
    }

    pub fn is_boundary(&self) -> bool {
        matches!(
            *self,
            CovOp::FirstOrder(_) | CovOp::ThirdOrder(_) | CovOp::Weighted(_, _)
        )
    }

    pub fn id(&self) -> String {
        match *self {
            CovOp::ConformalLaplacian => "l2".to_string(),
            CovOp::Paneitz => "l4".to_string(),
            CovOp::FirstOrder(k) => format!("b{k}_first"),
            CovOp::ThirdOrder(k) => format!("b{k}_third"),
            CovOp::Weighted(k, w) => format!("b{k}_w{w}"),
        }
    }

    /// The default roster for the covariance suite at boundary dimension n:
    /// both interior operators, both hierarchies, and the general-weight
    /// family at w in {0, 1.7, -(n-3)/2}.
    pub fn roster(n: usize) -> Vec<CovOp> {
        let mut ops = vec![
            CovOp::ConformalLaplacian,
            CovOp::FirstOrder(0),
            CovOp::FirstOrder(1),
            CovOp::Paneitz,
            CovOp::ThirdOrder(0),
            CovOp::ThirdOrder(1),
            CovOp::ThirdOrder(2),
            CovOp::ThirdOrder(3),
        ];
        for w in [0.0, 1.7, -0.5 * (n as f64 - 3.0)] {
            for k in 0..=3 {
                ops.push(CovOp::Weighted(k, w));
            }
        }
        ops
    }
}

/// Operator output: a field on the whole chart or one field per face.
pub enum OpField {
    Interior(ScalarField),
    Boundary(Vec<ScalarField>),
}

pub fn apply(geom: &Geometry, op: CovOp, u: &ScalarField) -> Result<OpField, OperatorError> {
    match op {
        CovOp::ConformalLaplacian => Ok(OpField::Interior(l2(geom, u))),
        CovOp::Paneitz => Ok(OpField::Interior(l4(geom, u)?)),
        _ => {
            let mut per_face = Vec::with_capacity(geom.boundary.len());
            for bd in &geom.boundary {
                let fo = FaceOps::new(geom, bd);
                per_face.push(match op {
                    CovOp::FirstOrder(k) => fo.b_first(k, u)?,
                    CovOp::ThirdOrder(k) => fo.b_third(k, u)?,
                    CovOp::Weighted(k, w) => fo.b_weight(k, w, u)?,
                    _ => unreachable!(),
                });
            }
            Ok(OpField::Boundary(per_face))
        }
    }
}

fn rel_max_diff(lhs: &ScalarField, rhs: &ScalarField) -> f64 {
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 1.0;
    for (a, b) in lhs.values.iter().zip(&rhs.values) {
        diff = diff.max((a - b).abs());
        scale = scale.max(a.abs());
    }
    diff / scale
}

/// Residual of each operator's transformation law for one draw:
/// max |D_ghat(u) - e^{(w-k) sigma} D_g(e^{-w sigma} u)|, normalized by
/// max(1, |lhs|).  Geometries for g and ghat are built one at a time.
pub fn covariance_residuals(
    g: &MetricField,
    sigma: &ScalarField,
    u: &ScalarField,
    ops: &[CovOp],
) -> Result<Vec<f64>, OperatorError> {
    let n = g.dim() - 1;
    // Pass 1: background metric, conformally shifted inputs.
    let mut rhs: Vec<OpField> = Vec::with_capacity(ops.len());
    {
        let geom = Geometry::new(g.clone())?;
        for &op in ops {
            let w = op.weight(n);
            let u_in = u.zip(sigma, |uv, sv| (-w * sv).exp() * uv);
            let raw = apply(&geom, op, &u_in)?;
            // Fold in the prefactor while the face layout is at hand.
            let scaled = match raw {
                OpField::Interior(mut fld) => {
                    let c = w - op.order() as f64;
                    for (v, sv) in fld.values.iter_mut().zip(&sigma.values) {
                        *v *= (c * sv).exp();
                    }
                    OpField::Interior(fld)
                }
                OpField::Boundary(fields) => {
                    let c = w - op.order() as f64;
                    let mut out = Vec::with_capacity(fields.len());
                    for (bd, mut fld) in geom.boundary.iter().zip(fields) {
                        let s_face = sigma.restrict(bd.face, &bd.grid);
                        for (v, sv) in fld.values.iter_mut().zip(&s_face.values) {
                            *v *= (c * sv).exp();
                        }
                        out.push(fld);
                    }
                    OpField::Boundary(out)
                }
            };
            rhs.push(scaled);
        }
    }
    // Pass 2: rescaled metric, untouched input.
    let ghat = rescale(g, sigma);
    let geom = Geometry::new(ghat)?;
    let mut residuals = Vec::with_capacity(ops.len());
    for (&op, r) in ops.iter().zip(&rhs) {
        let lhs = apply(&geom, op, u)?;
        let res = match (&lhs, r) {
            (OpField::Interior(a), OpField::Interior(b)) => rel_max_diff(a, b),
            (OpField::Boundary(av), OpField::Boundary(bv)) => av
                .iter()
                .zip(bv)
                .map(|(a, b)| rel_max_diff(a, b))
                .fold(0.0, f64::max),
            _ => unreachable!(),
        };
        residuals.push(res);
    }
    Ok(residuals)
}

/// Refinement study of every transformation law on seeded conformally
/// flat draws.  Residuals are the max over draws at each size; each
/// operator gets one report.
pub fn covariance_suite(
    n: usize,
    sizes: &[usize],
    draws: usize,
    seed: u64,
    ops: &[CovOp],
) -> Result<Vec<CheckReport>, OperatorError> {
    let mut res = vec![vec![0.0f64; sizes.len()]; ops.len()];
    for (si, &nodes) in sizes.iter().enumerate() {
        let grid = ChartGrid::slab(n + 1, nodes).map_err(GeometryError::from)?;
        for draw in 0..draws {
            let mut rng = rng_for(seed, draw as u64);
            let g = conformally_flat_draw(&mut rng, &grid, 0.05);
            let sigma = conformal_factor_draw(&mut rng, &grid);
            let u = test_function_draw(&mut rng, &grid);
            let r = covariance_residuals(&g, &sigma, &u, ops)?;
            for (oi, v) in r.iter().enumerate() {
                res[oi][si] = res[oi][si].max(*v);
            }
        }
    }
    Ok(ops
        .iter()
        .zip(res)
        .map(|(op, rs)| {
            CheckReport::from_residuals(
                format!("covariance/n{n}/{}", op.id()),
                format!(
                    "transformation law of {} under e^{{2s}}g, n={n}, {draws} draws",
                    op.id()
                ),
                sizes,
                &rs,
                2.0,
            )
        })
        .collect())
}

/// Boundary building blocks whose first variations have closed forms.
/// Order-two blocks carry weight-w inputs through two derivatives;
/// order-three blocks through three.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarBlock {
    LapBar,
    HessEtaEta,
    HEtaU,
    H2U,
    PEtaEtaU,
    JBarU,
    EtaLap,
    LapBarEta,
    A0HessBar,
    HLapBar,
    HHessEtaEta,
    GradHGradU,
    JBarEtaU,
    PEtaEtaEtaU,
    H2EtaU,
    EtaJU,
    LapBarHU,
    HJBarU,
    HPEtaEtaU,
    A0PBarU,
    H3U,
    HA0NormU,
}

pub const ALL_BLOCKS: [VarBlock; 22] = [
    VarBlock::LapBar,
    VarBlock::HessEtaEta,
    VarBlock::HEtaU,
    VarBlock::H2U,
    VarBlock::PEtaEtaU,
    VarBlock::JBarU,
    VarBlock::EtaLap,
    VarBlock::LapBarEta,
    VarBlock::A0HessBar,
    VarBlock::HLapBar,
    VarBlock::HHessEtaEta,
    VarBlock::GradHGradU,
    VarBlock::JBarEtaU,
    VarBlock::PEtaEtaEtaU,
    VarBlock::H2EtaU,
    VarBlock::EtaJU,
    VarBlock::LapBarHU,
    VarBlock::HJBarU,
    VarBlock::HPEtaEtaU,
    VarBlock::A0PBarU,
    VarBlock::H3U,
    VarBlock::HA0NormU,
];

impl VarBlock {
    pub fn order(&self) -> usize {
        match *self {
            VarBlock::LapBar
            | VarBlock::HessEtaEta
            | VarBlock::HEtaU
            | VarBlock::H2U
            | VarBlock::PEtaEtaU
            | VarBlock::JBarU => 2,
            _ => 3,
        }
    }

    pub fn id(&self) -> &'static str {
        match *self {
            VarBlock::LapBar => "lapbar_u",
            VarBlock::HessEtaEta => "hess_eta_eta",
            VarBlock::HEtaU => "h_eta_u",
            VarBlock::H2U => "h2_u",
            VarBlock::PEtaEtaU => "p_eta_eta_u",
            VarBlock::JBarU => "jbar_u",
            VarBlock::EtaLap => "eta_lap_u",
            VarBlock::LapBarEta => "lapbar_eta_u",
            VarBlock::A0HessBar => "a0_dot_hessbar_u",
            VarBlock::HLapBar => "h_lapbar_u",
            VarBlock::HHessEtaEta => "h_hess_eta_eta",
            VarBlock::GradHGradU => "gradh_gradu",
            VarBlock::JBarEtaU => "jbar_eta_u",
            VarBlock::PEtaEtaEtaU => "p_eta_eta_eta_u",
            VarBlock::H2EtaU => "h2_eta_u",
            VarBlock::EtaJU => "eta_j_u",
            VarBlock::LapBarHU => "lapbar_h_u",
            VarBlock::HJBarU => "h_jbar_u",
            VarBlock::HPEtaEtaU => "h_p_eta_eta_u",
            VarBlock::A0PBarU => "a0_dot_pbar_u",
            VarBlock::H3U => "h3_u",
            VarBlock::HA0NormU => "h_a0norm_u",
        }
    }

    /// Blocks involving the intrinsic trace-adjusted Ricci tensor of the
    /// face are undefined on two-dimensional boundaries.
    pub fn needs_face_schouten(&self) -> bool {
        matches!(*self, VarBlock::A0PBarU)
    }
}

/// Evaluate one building block at a face.
fn eval_block(
    fo: &FaceOps,
    bd: &BoundaryData,
    u: &ScalarField,
    block: VarBlock,
) -> Result<ScalarField, OperatorError> {
    let f = fo.trace(u);
    let h = &bd.h_mean;
    Ok(match block {
        VarBlock::LapBar => fo.lapbar(&f),
        VarBlock::HessEtaEta => fo.hess_eta_eta(u),
        VarBlock::HEtaU => fo.eta(u).zip(h, |e, hv| hv * e),
        VarBlock::H2U => f.zip(h, |fv, hv| hv * hv * fv),
        VarBlock::PEtaEtaU => f.zip(&bd.p_eta_eta, |fv, p| p * fv),
        VarBlock::JBarU => f.zip(bd.jbar(), |fv, j| j * fv),
        VarBlock::EtaLap => fo.eta_lap(u),
        VarBlock::LapBarEta => fo.lapbar(&fo.eta(u)),
        VarBlock::A0HessBar => fo.tensor_dot_hessbar(&bd.a0, &f),
        VarBlock::HLapBar => fo.lapbar(&f).zip(h, |l, hv| hv * l),
        VarBlock::HHessEtaEta => fo.hess_eta_eta(u).zip(h, |x, hv| hv * x),
        VarBlock::GradHGradU => fo.gradbar_pair(h, &f),
        VarBlock::JBarEtaU => fo.eta(u).zip(bd.jbar(), |e, j| j * e),
        VarBlock::PEtaEtaEtaU => fo.eta(u).zip(&bd.p_eta_eta, |e, p| p * e),
        VarBlock::H2EtaU => fo.eta(u).zip(h, |e, hv| hv * hv * e),
        VarBlock::EtaJU => f.zip(&bd.eta_j, |fv, ej| ej * fv),
        VarBlock::LapBarHU => f.zip(&fo.lapbar(h), |fv, lh| lh * fv),
        VarBlock::HJBarU => {
            let hj = h.zip(bd.jbar(), |hv, j| hv * j);
            f.zip(&hj, |fv, x| x * fv)
        }
        VarBlock::HPEtaEtaU => {
            let hp = h.zip(&bd.p_eta_eta, |hv, p| hv * p);
            f.zip(&hp, |fv, x| x * fv)
        }
        VarBlock::A0PBarU => f.zip(&fo.a0_dot_pbar()?, |fv, ap| ap * fv),
        VarBlock::H3U => f.zip(h, |fv, hv| hv.powi(3) * fv),
        VarBlock::HA0NormU => {
            let ha = h.zip(&bd.a0_norm2, |hv, a| hv * a);
            f.zip(&ha, |fv, x| x * fv)
        }
    })
}

/// Closed-form first variation of one block, from the base geometry.
fn closed_form(
    fo: &FaceOps,
    bd: &BoundaryData,
    u: &ScalarField,
    sigma: &ScalarField,
    w: f64,
    block: VarBlock,
) -> Result<ScalarField, OperatorError> {
    let n = (fo.geom.dim() - 1) as f64;
    let f = fo.trace(u);
    let s = fo.trace(sigma);
    let eu = fo.eta(u);
    let es = fo.eta(sigma);
    let h = &bd.h_mean;
    let m = bd.grid.len();
    let mut out = ScalarField::zeros(&bd.grid);
    match block {
        VarBlock::LapBar => {
            let gus = fo.gradbar_pair(&f, &s);
            let ls = fo.lapbar(&s);
            for i in 0..m {
                out.values[i] = (n + 2.0 * w - 2.0) * gus.values[i] + w * f.values[i] * ls.values[i];
            }
        }
        VarBlock::HessEtaEta => {
            let gus = fo.gradbar_pair(&f, &s);
            let hss = fo.hess_eta_eta(sigma);
            for i in 0..m {
                out.values[i] = gus.values[i]
                    + (2.0 * w - 1.0) * eu.values[i] * es.values[i]
                    + w * f.values[i] * hss.values[i];
            }
        }
        VarBlock::HEtaU => {
            for i in 0..m {
                out.values[i] = n * eu.values[i] * es.values[i]
                    + w * h.values[i] * f.values[i] * es.values[i];
            }
        }
        VarBlock::H2U => {
            for i in 0..m {
                out.values[i] = 2.0 * n * h.values[i] * f.values[i] * es.values[i];
            }
        }
        VarBlock::PEtaEtaU => {
            let hss = fo.hess_eta_eta(sigma);
            for i in 0..m {
                out.values[i] = -f.values[i] * hss.values[i];
            }
        }
        VarBlock::JBarU => {
            let ls = fo.lapbar(&s);
            for i in 0..m {
                out.values[i] = -f.values[i] * ls.values[i];
            }
        }
        VarBlock::EtaLap => {
            let lu = fo.lapbar(&f);
            let huu = fo.hess_eta_eta(u);
            let geus = fo.gradbar_pair(&eu, &s);
            let gues = fo.gradbar_pair(&f, &es);
            let aus = fo.tensor_grad_grad(&bd.a, &f, &s);
            let hss = fo.hess_eta_eta(sigma);
            let ls = fo.lapbar(&s);
            let els = fo.eta_lap(sigma);
            let c = n + 2.0 * w - 1.0;
            for i in 0..m {
                out.values[i] = (w - 2.0) * es.values[i] * lu.values[i]
                    + (n + 3.0 * w - 3.0) * es.values[i] * huu.values[i]
                    + c * geus.values[i]
                    + 2.0 * (w - 1.0) * h.values[i] * eu.values[i] * es.values[i]
                    + c * gues.values[i]
                    - 2.0 * c * aus.values[i]
                    + (n + 3.0 * w - 1.0) * eu.values[i] * hss.values[i]
                    + w * eu.values[i] * ls.values[i]
                    + w * f.values[i] * els.values[i];
            }
        }
        VarBlock::LapBarEta => {
            let lu = fo.lapbar(&f);
            let geus = fo.gradbar_pair(&eu, &s);
            let gues = fo.gradbar_pair(&f, &es);
            let ls = fo.lapbar(&s);
            let les = fo.lapbar(&es);
            for i in 0..m {
                out.values[i] = w * es.values[i] * lu.values[i]
                    + (n + 2.0 * w - 4.0) * geus.values[i]
                    + 2.0 * w * gues.values[i]
                    + (w - 1.0) * eu.values[i] * ls.values[i]
                    + w * f.values[i] * les.values[i];
            }
        }
        VarBlock::A0HessBar => {
            let a0us = fo.tensor_grad_grad(&bd.a0, &f, &s);
            let a0ss = fo.tensor_dot_hessbar(&bd.a0, &s);
            for i in 0..m {
                out.values[i] =
                    2.0 * (w - 1.0) * a0us.values[i] + w * f.values[i] * a0ss.values[i];
            }
        }
        VarBlock::HLapBar => {
            let lu = fo.lapbar(&f);
            let gus = fo.gradbar_pair(&f, &s);
            let ls = fo.lapbar(&s);
            for i in 0..m {
                out.values[i] = n * es.values[i] * lu.values[i]
                    + (n + 2.0 * w - 2.0) * h.values[i] * gus.values[i]
                    + w * h.values[i] * f.values[i] * ls.values[i];
            }
        }
        VarBlock::HHessEtaEta => {
            let huu = fo.hess_eta_eta(u);
            let gus = fo.gradbar_pair(&f, &s);
            let hss = fo.hess_eta_eta(sigma);
            for i in 0..m {
                out.values[i] = n * es.values[i] * huu.values[i]
                    + h.values[i] * gus.values[i]
                    + (2.0 * w - 1.0) * h.values[i] * eu.values[i] * es.values[i]
                    + w * h.values[i] * f.values[i] * hss.values[i];
            }
        }
        VarBlock::GradHGradU => {
            let gues = fo.gradbar_pair(&f, &es);
            let gus = fo.gradbar_pair(&f, &s);
            let ghs = fo.gradbar_pair(h, &s);
            for i in 0..m {
                out.values[i] = n * gues.values[i] - h.values[i] * gus.values[i]
                    + w * f.values[i] * ghs.values[i];
            }
        }
        VarBlock::JBarEtaU => {
            let ls = fo.lapbar(&s);
            let jb = bd.jbar();
            for i in 0..m {
                out.values[i] =
                    -eu.values[i] * ls.values[i] + w * jb.values[i] * f.values[i] * es.values[i];
            }
        }
        VarBlock::PEtaEtaEtaU => {
            let hss = fo.hess_eta_eta(sigma);
            for i in 0..m {
                out.values[i] = -eu.values[i] * hss.values[i]
                    + w * f.values[i] * bd.p_eta_eta.values[i] * es.values[i];
            }
        }
        VarBlock::H2EtaU => {
            for i in 0..m {
                out.values[i] = 2.0 * n * h.values[i] * eu.values[i] * es.values[i]
                    + w * h.values[i] * h.values[i] * f.values[i] * es.values[i];
            }
        }
        VarBlock::EtaJU => {
            let els = fo.eta_lap(sigma);
            let jb = bd.jbar();
            for i in 0..m {
                let curvy = jb.values[i] + bd.p_eta_eta.values[i]
                    + bd.a0_norm2.values[i] / (2.0 * (n - 1.0))
                    - h.values[i] * h.values[i] / (2.0 * n);
                out.values[i] =
                    -f.values[i] * els.values[i] - 2.0 * curvy * f.values[i] * es.values[i];
            }
        }
        VarBlock::LapBarHU => {
            let les = fo.lapbar(&es);
            let ls = fo.lapbar(&s);
            let ghs = fo.gradbar_pair(h, &s);
            for i in 0..m {
                out.values[i] = n * f.values[i] * les.values[i]
                    - h.values[i] * f.values[i] * ls.values[i]
                    + (n - 4.0) * f.values[i] * ghs.values[i];
            }
        }
        VarBlock::HJBarU => {
            let ls = fo.lapbar(&s);
            let jb = bd.jbar();
            for i in 0..m {
                out.values[i] = n * jb.values[i] * f.values[i] * es.values[i]
                    - h.values[i] * f.values[i] * ls.values[i];
            }
        }
        VarBlock::HPEtaEtaU => {
            let hss = fo.hess_eta_eta(sigma);
            for i in 0..m {
                out.values[i] = n * f.values[i] * bd.p_eta_eta.values[i] * es.values[i]
                    - h.values[i] * f.values[i] * hss.values[i];
            }
        }
        VarBlock::A0PBarU => {
            let a0ss = fo.tensor_dot_hessbar(&bd.a0, &s);
            for i in 0..m {
                out.values[i] = -f.values[i] * a0ss.values[i];
            }
        }
        VarBlock::H3U => {
            for i in 0..m {
                out.values[i] =
                    3.0 * n * h.values[i] * h.values[i] * f.values[i] * es.values[i];
            }
        }
        VarBlock::HA0NormU => {
            for i in 0..m {
                out.values[i] = n * bd.a0_norm2.values[i] * f.values[i] * es.values[i];
            }
        }
    }
    Ok(out)
}

/// First variation of every requested block by differencing through the
/// rescaling family, compared against the closed forms; one residual per
/// block, max over both faces.  The four shifted geometries (t = ±tau,
/// ±2tau) are built one at a time and shared across all blocks.
pub fn linearization_residuals(
    g: &MetricField,
    sigma: &ScalarField,
    u: &ScalarField,
    w: f64,
    tau: f64,
    blocks: &[VarBlock],
) -> Result<Vec<f64>, OperatorError> {
    let n_faces = 2;
    // numeric[t][face][block]
    let ts = [-2.0 * tau, -tau, tau, 2.0 * tau];
    let mut samples: Vec<Vec<Vec<ScalarField>>> = Vec::with_capacity(4);
    for &t in &ts {
        let st = sigma.map(|v| t * v);
        let gt = rescale(g, &st);
        let geom = Geometry::new(gt)?;
        let u_t = u.zip(sigma, |uv, sv| (w * t * sv).exp() * uv);
        let mut per_face = Vec::with_capacity(n_faces);
        for bd in &geom.boundary {
            let fo = FaceOps::new(&geom, bd);
            let s_face = sigma.restrict(bd.face, &bd.grid);
            let mut vals = Vec::with_capacity(blocks.len());
            for &b in blocks {
                let k = b.order() as f64;
                let raw = eval_block(&fo, bd, &u_t, b)?;
                // e^{-(w-k) t sigma} D_{g_t}(e^{w t sigma} u)
                let scaled = raw.zip(&s_face, |rv, sv| (-(w - k) * t * sv).exp() * rv);
                vals.push(scaled);
            }
            per_face.push(vals);
        }
        samples.push(per_face);
    }
    // Base geometry for the closed forms.
    let geom = Geometry::new(g.clone())?;
    let mut residuals = vec![0.0f64; blocks.len()];
    for (fi, bd) in geom.boundary.iter().enumerate() {
        let fo = FaceOps::new(&geom, bd);
        for (bi, &b) in blocks.iter().enumerate() {
            // Fourth-order central difference in t.
            let m2 = &samples[0][fi][bi];
            let m1 = &samples[1][fi][bi];
            let p1 = &samples[2][fi][bi];
            let p2 = &samples[3][fi][bi];
            let mut numeric = ScalarField::zeros(&bd.grid);
            for i in 0..bd.grid.len() {
                numeric.values[i] = (8.0 * (p1.values[i] - m1.values[i])
                    - (p2.values[i] - m2.values[i]))
                    / (12.0 * tau);
            }
            let closed = closed_form(&fo, bd, u, sigma, w, b)?;
            residuals[bi] = residuals[bi].max(rel_max_diff(&numeric, &closed));
        }
    }
    Ok(residuals)
}

/// Single-block variant returning the (numeric, closed-form) field pair
/// per face.
pub fn linearize(
    g: &MetricField,
    block: VarBlock,
    w: f64,
    sigma: &ScalarField,
    u: &ScalarField,
    tau: f64,
) -> Result<Vec<(ScalarField, ScalarField)>, OperatorError> {
    let ts = [-2.0 * tau, -tau, tau, 2.0 * tau];
    let mut samples: Vec<Vec<ScalarField>> = Vec::with_capacity(4);
    for &t in &ts {
        let st = sigma.map(|v| t * v);
        let gt = rescale(g, &st);
        let geom = Geometry::new(gt)?;
        let mut per_face = Vec::new();
        for bd in &geom.boundary {
            let fo = FaceOps::new(&geom, bd);
            let s_face = sigma.restrict(bd.face, &bd.grid);
            let k = block.order() as f64;
            let u_t = u.zip(sigma, |uv, sv| (w * t * sv).exp() * uv);
            let raw = eval_block(&fo, bd, &u_t, block)?;
            per_face.push(raw.zip(&s_face, |rv, sv| (-(w - k) * t * sv).exp() * rv));
        }
        samples.push(per_face);
    }
    let geom = Geometry::new(g.clone())?;
    let mut out = Vec::new();
    for (fi, bd) in geom.boundary.iter().enumerate() {
        let fo = FaceOps::new(&geom, bd);
        let mut numeric = ScalarField::zeros(&bd.grid);
        for i in 0..bd.grid.len() {
            numeric.values[i] = (8.0 * (samples[2][fi].values[i] - samples[1][fi].values[i])
                - (samples[3][fi].values[i] - samples[0][fi].values[i]))
                / (12.0 * tau);
        }
        let closed = closed_form(&fo, bd, u, sigma, w, block)?;
        out.push((numeric, closed));
    }
    Ok(out)
}

/// Refinement study of the closed-form first variations.  Uses general
/// perturbed metrics when the boundary dimension admits them (n >= 3)
/// and conformally flat metrics at n = 2, where intrinsic face curvature
/// blocks degenerate and are skipped.
pub fn linearization_suite(
    n: usize,
    sizes: &[usize],
    draws: usize,
    seed: u64,
    w: f64,
    tau: f64,
) -> Result<Vec<CheckReport>, OperatorError> {
    let blocks: Vec<VarBlock> = ALL_BLOCKS
        .iter()
        .copied()
        .filter(|b| n >= 3 || !b.needs_face_schouten())
        .collect();
    let mut res = vec![vec![0.0f64; sizes.len()]; blocks.len()];
    for (si, &nodes) in sizes.iter().enumerate() {
        let grid = ChartGrid::slab(n + 1, nodes).map_err(GeometryError::from)?;
        for draw in 0..draws {
            let mut rng = rng_for(seed, 1000 + draw as u64);
            let g = if n >= 3 {
                crate::testfields::metric_draw(&mut rng, &grid, 0.03)
            } else {
                conformally_flat_draw(&mut rng, &grid, 0.05)
            };
            let sigma = conformal_factor_draw(&mut rng, &grid);
            let u = test_function_draw(&mut rng, &grid);
            let r = linearization_residuals(&g, &sigma, &u, w, tau, &blocks)?;
            for (bi, v) in r.iter().enumerate() {
                res[bi][si] = res[bi][si].max(*v);
            }
        }
    }
    Ok(blocks
        .iter()
        .zip(res)
        .map(|(b, rs)| {
            CheckReport::from_residuals(
                format!("linearize/n{n}/{}", b.id()),
                format!(
                    "first variation of {} matches closed form, n={n}, w={w}, {draws} draws",
                    b.id()
                ),
                sizes,
                &rs,
                2.0,
            )
        })
        .collect())
}
