//! Curvature and boundary data of a metric on a chart grid.
//!
//! Conventions. The curvature tensor of the unit sphere satisfies
//! R_ijkl = g_ik g_jl - g_il g_jk, and Ric_jl = g^ik R_ijkl, so spheres have
//! positive scalar curvature. On a d-dimensional manifold the trace
//! adjustments are J = R / (2(d-1)) and P = (Ric - J g) / (d-2); the same
//! formulas apply intrinsically on a boundary face with d replaced by the
//! face dimension. The boundary normal eta is the outward unit normal, and
//! the second fundamental form is A(X, Y) = g(nabla_X eta, Y), so the unit
//! ball in flat space has A = h and mean curvature H = tr_h A = n > 0.
//!
//! Derivative work at grid scale runs as whole-plane sweeps (contiguous
//! inner loops, one stencil resolution per axis index); node-local stencil
//! gathers are reserved for face-only quantities, where latency is
//! irrelevant.

use crate::grid::{
    sym_index, sym_len, ChartGrid, Face, GridError, MetricField, ScalarField, Side, SymField,
    VecField,
};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("curvature trace adjustment needs dimension >= 3, got {0}")]
    DimensionTooLow(usize),
    #[error("face {0} is not umbilic (|A0| = {1:.3e}): the requested contraction is undefined on two-dimensional faces")]
    NonUmbilicSurfaceFace(usize, f64),
}

/// Christoffel symbols, upper index major, packed symmetric lower pair.
#[derive(Debug, Clone)]
pub struct GammaField {
    pub dim: usize,
    planes: Vec<Vec<f64>>,
}

impl GammaField {
    #[inline]
    pub fn at(&self, flat: usize, lam: usize, mu: usize, nu: usize) -> f64 {
        self.planes[lam * sym_len(self.dim) + sym_index(self.dim, mu, nu)][flat]
    }

    #[inline]
    pub fn plane(&self, lam: usize, mu: usize, nu: usize) -> &[f64] {
        &self.planes[lam * sym_len(self.dim) + sym_index(self.dim, mu, nu)]
    }

    /// Raw planes, upper index major then packed symmetric pair.
    #[inline]
    pub fn planes(&self) -> &[Vec<f64>] {
        &self.planes
    }
}

/// Ricci tensor with its trace adjustments.
#[derive(Debug, Clone)]
pub struct CurvaturePackage {
    pub ricci: SymField,
    pub scalar: ScalarField,
    /// J = R / (2(d-1)).
    pub j: ScalarField,
    /// P = (Ric - J g) / (d-2); absent in dimension two, where the trace
    /// adjustment degenerates.
    pub p: Option<SymField>,
}

/// Everything an operator evaluation needs on one boundary face.
#[derive(Debug)]
pub struct BoundaryData {
    pub face: Face,
    pub grid: Arc<ChartGrid>,
    /// Parent flat index of each face node, in face-grid order.
    pub parent_nodes: Vec<usize>,
    /// Intrinsic geometry of the face (induced metric, its curvature).
    pub geometry: Box<Geometry>,
    /// Outward unit normal, parent components, at face nodes.
    pub eta_up: VecField,
    /// Second fundamental form in face coordinates.
    pub a: SymField,
    /// Trace-free part of A.
    pub a0: SymField,
    /// Mean curvature H = h^ij A_ij.
    pub h_mean: ScalarField,
    /// |A0|^2 contracted with the induced metric.
    pub a0_norm2: ScalarField,
    /// Ambient Schouten contracted twice with the normal.
    pub p_eta_eta: ScalarField,
    /// Ambient Schouten contracted once with the normal, tangential part,
    /// face covector components P(eta, partial_i).
    pub p_eta_tan: VecField,
    /// Ambient J restricted to the face.
    pub j_ambient: ScalarField,
    /// Normal derivative of ambient J.
    pub eta_j: ScalarField,
}

impl BoundaryData {
    /// Outward normal derivative of a scalar on the parent grid, as a face
    /// field: eta(u) = eta^mu partial_mu u.
    pub fn eta_deriv(&self, u: &ScalarField) -> ScalarField {
        let d = u.grid.dim();
        let mut out = ScalarField::zeros(&self.grid);
        for (fi, &p) in self.parent_nodes.iter().enumerate() {
            let mut s = 0.0;
            for mu in 0..d {
                s += self.eta_up.comps[mu][fi] * u.derivative_at(p, mu, 1);
            }
            out.values[fi] = s;
        }
        out
    }

    /// Area density sqrt(det h) of the induced metric.
    pub fn area_density(&self) -> &ScalarField {
        &self.geometry.metric.sqrt_det
    }

    /// Map a face axis to the parent axis it came from.
    #[inline]
    pub fn parent_axis(&self, face_axis: usize) -> usize {
        if face_axis < self.face.axis {
            face_axis
        } else {
            face_axis + 1
        }
    }

    /// Intrinsic Schouten trace J of the face, if defined (face dim >= 3).
    pub fn jbar(&self) -> &ScalarField {
        &self.geometry.curv.j
    }
}

/// Reusable per-node buffers for curvature assembly; allocating these
/// once per geometry instead of once per node matters at interior scale.
struct DerivScratch {
    dgv: Vec<f64>,
    ddgv: Vec<f64>,
    dginv: Vec<f64>,
    taps: Vec<usize>,
    taps2: Vec<usize>,
}

impl DerivScratch {
    fn new(d: usize) -> DerivScratch {
        let sl = sym_len(d);
        DerivScratch {
            dgv: vec![0.0; d * sl],
            ddgv: vec![0.0; sl * sl],
            dginv: vec![0.0; d * d * d],
            taps: Vec::with_capacity(16),
            taps2: Vec::with_capacity(16),
        }
    }
}

#[derive(Debug)]
pub struct Geometry {
    pub grid: Arc<ChartGrid>,
    pub metric: MetricField,
    pub gamma: GammaField,
    /// First metric derivatives, plane index lam * sym_len + pair index.
    /// Kept so curvature derivatives can be rebuilt node-locally without
    /// differentiating the Christoffel field itself (a second stencil pass
    /// over a once-differenced field drops an order at bounded edges).
    dg: Vec<Vec<f64>>,
    /// Contracted Christoffel drift C^lam = g^{mu nu} Gamma^lam_{mu nu};
    /// the Laplace-Beltrami operator is g^{mu nu} dd_{mu nu} - C^lam d_lam.
    pub drift: VecField,
    pub curv: CurvaturePackage,
    pub boundary: Vec<BoundaryData>,
}

impl Geometry {
    pub fn flat(grid: &Arc<ChartGrid>) -> Result<Geometry, GeometryError> {
        Geometry::new(MetricField::flat(grid)?)
    }

    pub fn new(metric: MetricField) -> Result<Geometry, GeometryError> {
        let grid = metric.grid().clone();
        let d = metric.dim();
        let nn = grid.len();
        let sl = sym_len(d);
        // Square lookup into packed symmetric storage.
        let sym: Vec<usize> = {
            let mut t = vec![0usize; d * d];
            for a in 0..d {
                for b in 0..d {
                    t[a * d + b] = sym_index(d, a, b);
                }
            }
            t
        };

        // First metric derivatives as whole-plane sweeps, then node-local
        // Christoffels and drift in one aligned pass over the planes.
        let mut dg: Vec<Vec<f64>> = vec![vec![0.0; nn]; d * sl];
        for lam in 0..d {
            for ci in 0..sl {
                grid.derivative_plane(&metric.g.comps[ci], lam, 1, &mut dg[lam * sl + ci]);
            }
        }
        let mut planes: Vec<Vec<f64>> = vec![vec![0.0; nn]; d * sl];
        let mut drift = VecField::zeros(&grid, d);
        // mtab[pair * d + lam] points at the three dg planes entering
        // M_{lam,(mu nu)} = d_mu g_{lam nu} + d_nu g_{lam mu} - d_lam g_{mu nu};
        // M is independent of the raised index, so it is hoisted per node.
        // The same triple serves the second-derivative planes, whose layout
        // matches dg.
        let mut mtab = vec![[0usize; 3]; sl * d];
        let mut pairs = vec![(0usize, 0usize); sl];
        for mu in 0..d {
            for nu in mu..d {
                let pair = sym[mu * d + nu];
                pairs[pair] = (mu, nu);
                for lam in 0..d {
                    mtab[pair * d + lam] = [
                        mu * sl + sym[lam * d + nu],
                        nu * sl + sym[lam * d + mu],
                        lam * sl + sym[mu * d + nu],
                    ];
                }
            }
        }
        // Off-diagonal pairs count twice in full double-index sums.
        let mult: Vec<f64> = pairs.iter().map(|&(a, b)| if a == b { 1.0 } else { 2.0 }).collect();
        {
            let mut dgv = vec![0.0; d * sl];
            let mut giv = vec![0.0; d * d];
            let mut gv = vec![0.0; d * sl];
            let mut m = vec![0.0; sl * d];
            for flat in 0..nn {
                for (slot, p) in dgv.iter_mut().zip(&dg) {
                    *slot = p[flat];
                }
                for a in 0..d {
                    for b in a..d {
                        let v = metric.ginv.comps[sym[a * d + b]][flat];
                        giv[a * d + b] = v;
                        giv[b * d + a] = v;
                    }
                }
                for (slot, idx) in m.iter_mut().zip(&mtab) {
                    *slot = dgv[idx[0]] + dgv[idx[1]] - dgv[idx[2]];
                }
                for rho in 0..d {
                    for pair in 0..sl {
                        let mut s = 0.0;
                        for lam in 0..d {
                            s += giv[rho * d + lam] * m[pair * d + lam];
                        }
                        gv[rho * sl + pair] = 0.5 * s;
                    }
                }
                for (p, v) in planes.iter_mut().zip(&gv) {
                    p[flat] = *v;
                }
                for lam in 0..d {
                    let mut c = 0.0;
                    for pair in 0..sl {
                        c += mult[pair] * giv[pairs[pair].0 * d + pairs[pair].1] * gv[lam * sl + pair];
                    }
                    drift.comps[lam][flat] = c;
                }
            }
        }
        let gamma = GammaField { dim: d, planes };

        let mut geom = Geometry {
            grid: grid.clone(),
            metric,
            gamma,
            dg,
            drift,
            curv: CurvaturePackage {
                ricci: SymField::zeros(&grid, d),
                scalar: ScalarField::zeros(&grid),
                j: ScalarField::zeros(&grid),
                p: None,
            },
            boundary: Vec::new(),
        };

        // Ricci_{nu sig} = sum_mu d_mu Gamma^mu_{nu sig} - d_nu Gamma^mu_{mu sig}
        //                  + Gamma^mu_{mu lam} Gamma^lam_{nu sig}
        //                  - Gamma^mu_{nu lam} Gamma^lam_{mu sig},
        // organized as plane sweeps so each pass streams a handful of buffers
        // instead of gathering strided taps at every node.
        //
        // Both derivative parts are expanded by the product rule and assembled
        // from one shared table of second metric derivatives, so the
        // second-derivative content they have in common carries identical
        // truncation error and cancels in the difference just as it does in
        // the continuum. Repeated axes use a direct second stencil; mixed
        // pairs average both composition orders. Either order keeps uniform
        // accuracy: the inner derivative's truncation error varies smoothly
        // along every axis other than its own, which is the one the outer
        // stencil differences.
        let mut ddg: Vec<Vec<f64>> = vec![vec![0.0; nn]; sl * sl];
        for a in 0..d {
            for ci in 0..sl {
                let dst = sym[a * d + a] * sl + ci;
                grid.derivative_plane(&geom.metric.g.comps[ci], a, 2, &mut ddg[dst]);
            }
            for b in (a + 1)..d {
                let base = sym[a * d + b] * sl;
                for ci in 0..sl {
                    let dst = &mut ddg[base + ci];
                    grid.derivative_plane_acc(&geom.dg[b * sl + ci], a, 1, 0.5, dst);
                    grid.derivative_plane_acc(&geom.dg[a * sl + ci], b, 1, 0.5, dst);
                }
            }
        }

        // Second-derivative half of both parts:
        //   sum_mu g^{mu lam} (dd_{mu nu} g_{lam sig} + dd_{mu sig} g_{lam nu}
        //                      - dd_{mu lam} g_{nu sig}) / 2
        //   - g^{mu lam} dd_{nu sig} g_{mu lam} / 2,
        // the second line using that Gamma^mu_{mu sig} contracts to
        // g^{mu lam} d_sig g_{mu lam} / 2.
        let mut rpart: Vec<Vec<f64>> = vec![vec![0.0; nn]; sl];
        {
            let mut e2tab = vec![[0usize; 3]; sl * d * d];
            for pair in 0..sl {
                let (nu, sig) = pairs[pair];
                for mu in 0..d {
                    for lam in 0..d {
                        e2tab[(pair * d + mu) * d + lam] = [
                            sym[mu * d + nu] * sl + sym[lam * d + sig],
                            sym[mu * d + sig] * sl + sym[lam * d + nu],
                            sym[mu * d + lam] * sl + sym[nu * d + sig],
                        ];
                    }
                }
            }
            let mut ddv = vec![0.0; sl * sl];
            let mut giv = vec![0.0; d * d];
            for flat in 0..nn {
                for (slot, p) in ddv.iter_mut().zip(&ddg) {
                    *slot = p[flat];
                }
                for a in 0..d {
                    for b in a..d {
                        let v = geom.metric.ginv.comps[sym[a * d + b]][flat];
                        giv[a * d + b] = v;
                        giv[b * d + a] = v;
                    }
                }
                for (pair, dst) in rpart.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for mu in 0..d {
                        for lam in 0..d {
                            let idx = &e2tab[(pair * d + mu) * d + lam];
                            acc += giv[mu * d + lam] * (ddv[idx[0]] + ddv[idx[1]] - ddv[idx[2]]);
                        }
                    }
                    for (ci, &(a, b)) in pairs.iter().enumerate() {
                        acc -= mult[ci] * giv[a * d + b] * ddv[pair * sl + ci];
                    }
                    dst[flat] = 0.5 * acc;
                }
            }
        }
        drop(ddg);

        // First-derivative half plus the quadratic terms. With
        // B_a = g^{-1} (d_a g) the remaining product-rule pieces are
        //   sum_mu (d_mu g^{mu lam}) M_{lam nu sig} / 2
        //     = -sum_lam cs_lam M_{lam nu sig} / 2,
        //       cs_lam = sum_mu (B_mu g^{-1})^{mu lam},
        //   -(d_nu g^{mu lam}) (d_sig g_{mu lam}) / 2 = tr(B_nu B_sig) / 2,
        // both symmetric in (nu, sig), the latter by cyclicity of the trace,
        // so the assembled Ricci tensor is symmetric by construction.
        let mut ricci = SymField::zeros(&grid, d);
        {
            // Index tables for the Christoffel trace and the quadratic
            // contraction Gamma^mu_{nu lam} Gamma^lam_{mu sig}.
            let mut ttab = vec![0usize; d * d];
            for lam in 0..d {
                for mu in 0..d {
                    ttab[lam * d + mu] = mu * sl + sym[mu * d + lam];
                }
            }
            let mut qtab = vec![[0usize; 2]; sl * d * d];
            for pair in 0..sl {
                let (nu, sig) = pairs[pair];
                for lam in 0..d {
                    for mu in 0..d {
                        qtab[(pair * d + lam) * d + mu] =
                            [mu * sl + sym[nu * d + lam], lam * sl + sym[mu * d + sig]];
                    }
                }
            }
            let mut dgv = vec![0.0; d * sl];
            let mut giv = vec![0.0; d * d];
            let mut gv = vec![0.0; d * sl];
            let mut m = vec![0.0; sl * d];
            let mut bmat = vec![0.0; d * d * d];
            let mut cs = vec![0.0; d];
            let mut trace = vec![0.0; d];
            for flat in 0..nn {
                for (slot, p) in dgv.iter_mut().zip(&geom.dg) {
                    *slot = p[flat];
                }
                for (slot, p) in gv.iter_mut().zip(&geom.gamma.planes) {
                    *slot = p[flat];
                }
                for a in 0..d {
                    for b in a..d {
                        let v = geom.metric.ginv.comps[sym[a * d + b]][flat];
                        giv[a * d + b] = v;
                        giv[b * d + a] = v;
                    }
                }
                for (slot, idx) in m.iter_mut().zip(&mtab) {
                    *slot = dgv[idx[0]] + dgv[idx[1]] - dgv[idx[2]];
                }
                for a in 0..d {
                    for i in 0..d {
                        for j in 0..d {
                            let mut s = 0.0;
                            for k in 0..d {
                                s += giv[i * d + k] * dgv[a * sl + sym[k * d + j]];
                            }
                            bmat[(a * d + i) * d + j] = s;
                        }
                    }
                }
                for (lam, slot) in cs.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for mu in 0..d {
                        for a in 0..d {
                            s += bmat[(mu * d + mu) * d + a] * giv[a * d + lam];
                        }
                    }
                    *slot = s;
                }
                for (lam, slot) in trace.iter_mut().enumerate() {
                    *slot = 0.0;
                    for mu in 0..d {
                        *slot += gv[ttab[lam * d + mu]];
                    }
                }
                for (pair, dst) in ricci.comps.iter_mut().enumerate() {
                    let (nu, sig) = pairs[pair];
                    let mut e1 = 0.0;
                    for (lam, &c) in cs.iter().enumerate() {
                        e1 += c * m[pair * d + lam];
                    }
                    let mut d1 = 0.0;
                    for a in 0..d {
                        for b in 0..d {
                            d1 += bmat[(nu * d + a) * d + b] * bmat[(sig * d + b) * d + a];
                        }
                    }
                    let mut v = rpart[pair][flat] + 0.5 * (d1 - e1);
                    for lam in 0..d {
                        v += trace[lam] * gv[lam * sl + pair];
                        for mu in 0..d {
                            let idx = &qtab[(pair * d + lam) * d + mu];
                            v -= gv[idx[0]] * gv[idx[1]];
                        }
                    }
                    dst[flat] = v;
                }
            }
        }
        geom.curv = trace_adjust(&geom.metric, ricci)?;

        if grid.normal_axis.is_some() {
            for face in grid.faces()? {
                let bd = build_boundary(&geom, face)?;
                geom.boundary.push(bd);
            }
        }
        Ok(geom)
    }

    pub fn dim(&self) -> usize {
        self.metric.dim()
    }

    /// The boundary face on the given side of the normal axis.
    pub fn face(&self, side: Side) -> &BoundaryData {
        self.boundary
            .iter()
            .find(|b| b.face.side == side)
            .expect("geometry has no boundary")
    }

    /// Second metric derivatives at a node, ddgv[pair(mu nu) sl + ci].
    /// Repeated axes use a direct second-derivative stencil; mixed axes
    /// differentiate the stored first derivative along the other axis
    /// (averaged over both orders), which keeps the error expansion
    /// smooth and the accuracy uniform.  Tap indices are resolved once
    /// per axis pair and shared across all metric components.
    fn fill_ddg(&self, flat: usize, ddgv: &mut [f64], taps: &mut Vec<usize>, taps2: &mut Vec<usize>) {
        let d = self.dim();
        let sl = sym_len(d);
        for mu in 0..d {
            for nu in mu..d {
                let row = sym_index(d, mu, nu) * sl;
                if mu == nu {
                    let st = self.grid.stencil_taps(flat, mu, 2, taps);
                    for ci in 0..sl {
                        let src = &self.metric.g.comps[ci];
                        let mut acc = 0.0;
                        for (t, w) in taps.iter().zip(&st.weights) {
                            acc += w * src[*t];
                        }
                        ddgv[row + ci] = acc;
                    }
                } else {
                    let sa = self.grid.stencil_taps(flat, mu, 1, taps);
                    let sb = self.grid.stencil_taps(flat, nu, 1, taps2);
                    for ci in 0..sl {
                        let pa = &self.dg[nu * sl + ci];
                        let pb = &self.dg[mu * sl + ci];
                        let mut a = 0.0;
                        for (t, w) in taps.iter().zip(&sa.weights) {
                            a += w * pa[*t];
                        }
                        let mut b = 0.0;
                        for (t, w) in taps2.iter().zip(&sb.weights) {
                            b += w * pb[*t];
                        }
                        ddgv[row + ci] = 0.5 * (a + b);
                    }
                }
            }
        }
    }

    /// Node-local table of Christoffel derivatives,
    /// out[(mu d + rho) sl + pair(nu sig)] = d_mu Gamma^rho_{nu sig},
    /// assembled from first and second metric derivatives.
    fn dgamma_table_with(&self, flat: usize, out: &mut [f64], s: &mut DerivScratch) {
        let d = self.dim();
        let sl = sym_len(d);
        for (k, p) in self.dg.iter().enumerate() {
            s.dgv[k] = p[flat];
        }
        self.fill_ddg(flat, &mut s.ddgv, &mut s.taps, &mut s.taps2);
        // d_mu g^{rho lam} = -g^{rho a} (d_mu g_{ab}) g^{b lam}.
        for mu in 0..d {
            for rho in 0..d {
                for lam in 0..d {
                    let mut acc = 0.0;
                    for a in 0..d {
                        for b in 0..d {
                            acc -= self.metric.ginv.at(flat, rho, a)
                                * s.dgv[mu * sl + sym_index(d, a, b)]
                                * self.metric.ginv.at(flat, b, lam);
                        }
                    }
                    s.dginv[(mu * d + rho) * d + lam] = acc;
                }
            }
        }
        for mu in 0..d {
            for rho in 0..d {
                for nu in 0..d {
                    for sig in nu..d {
                        let mut acc = 0.0;
                        for lam in 0..d {
                            let m = s.dgv[nu * sl + sym_index(d, lam, sig)]
                                + s.dgv[sig * sl + sym_index(d, lam, nu)]
                                - s.dgv[lam * sl + sym_index(d, nu, sig)];
                            let dm = s.ddgv[sym_index(d, mu, nu) * sl + sym_index(d, lam, sig)]
                                + s.ddgv[sym_index(d, mu, sig) * sl + sym_index(d, lam, nu)]
                                - s.ddgv[sym_index(d, mu, lam) * sl + sym_index(d, nu, sig)];
                            acc += s.dginv[(mu * d + rho) * d + lam] * m
                                + self.metric.ginv.at(flat, rho, lam) * dm;
                        }
                        out[(mu * d + rho) * sl + sym_index(d, nu, sig)] = 0.5 * acc;
                    }
                }
            }
        }
    }

    fn dgamma_table(&self, flat: usize, out: &mut [f64]) {
        let mut scratch = DerivScratch::new(self.dim());
        self.dgamma_table_with(flat, out, &mut scratch);
    }

    /// Full lowered curvature tensor at one node, as a d^4 row-major buffer
    /// indexed [i][j][k][l]. Assembled on demand; used only at face nodes.
    pub fn riemann_at(&self, flat: usize, out: &mut [f64]) {
        let d = self.dim();
        let sl = sym_len(d);
        let g = &self.gamma;
        let mut dgam = vec![0.0; d * d * sl];
        self.dgamma_table(flat, &mut dgam);
        // Upper-first-index tensor R^rho_{sig mu nu}.
        let mut up = vec![0.0; d * d * d * d];
        for rho in 0..d {
            for sig in 0..d {
                for mu in 0..d {
                    for nu in 0..d {
                        let mut v = dgam[(mu * d + rho) * sl + sym_index(d, nu, sig)]
                            - dgam[(nu * d + rho) * sl + sym_index(d, mu, sig)];
                        for lam in 0..d {
                            v += g.at(flat, rho, mu, lam) * g.at(flat, lam, nu, sig)
                                - g.at(flat, rho, nu, lam) * g.at(flat, lam, mu, sig);
                        }
                        up[((rho * d + sig) * d + mu) * d + nu] = v;
                    }
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    for l in 0..d {
                        let mut v = 0.0;
                        for rho in 0..d {
                            v += self.metric.g.at(flat, i, rho) * up[((rho * d + j) * d + k) * d + l];
                        }
                        out[((i * d + j) * d + k) * d + l] = v;
                    }
                }
            }
        }
    }

    /// Weyl tensor at one node: W = Riem - P (kn) g with the Kulkarni-Nomizu
    /// product (P kn g)_ijkl = P_ik g_jl + P_jl g_ik - P_il g_jk - P_jk g_il.
    pub fn weyl_at(&self, flat: usize, out: &mut [f64]) -> Result<(), GeometryError> {
        let d = self.dim();
        let p = self.curv.p.as_ref().ok_or(GeometryError::DimensionTooLow(d))?;
        self.riemann_at(flat, out);
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    for l in 0..d {
                        let kn = p.at(flat, i, k) * self.metric.g.at(flat, j, l)
                            + p.at(flat, j, l) * self.metric.g.at(flat, i, k)
                            - p.at(flat, i, l) * self.metric.g.at(flat, j, k)
                            - p.at(flat, j, k) * self.metric.g.at(flat, i, l);
                        out[((i * d + j) * d + k) * d + l] -= kn;
                    }
                }
            }
        }
        Ok(())
    }

    /// W(eta, ., eta, .) in face coordinates on one boundary face.
    pub fn weyl_eta_face(&self, bd: &BoundaryData) -> Result<SymField, GeometryError> {
        let d = self.dim();
        let n = d - 1;
        let mut out = SymField::zeros(&bd.grid, n);
        let mut w = vec![0.0; d * d * d * d];
        for (fi, &p) in bd.parent_nodes.iter().enumerate() {
            self.weyl_at(p, &mut w)?;
            for i in 0..n {
                for j in i..n {
                    let (pi, pj) = (bd.parent_axis(i), bd.parent_axis(j));
                    let mut v = 0.0;
                    for mu in 0..d {
                        for nu in 0..d {
                            v += bd.eta_up.comps[mu][fi]
                                * bd.eta_up.comps[nu][fi]
                                * w[((mu * d + pi) * d + nu) * d + pj];
                        }
                    }
                    out.set(fi, i, j, v);
                }
            }
        }
        Ok(out)
    }
}

fn trace_adjust(metric: &MetricField, ricci: SymField) -> Result<CurvaturePackage, GeometryError> {
    let grid = metric.grid().clone();
    let d = metric.dim();
    if d < 2 {
        return Err(GeometryError::DimensionTooLow(d));
    }
    let mut scalar = ScalarField::zeros(&grid);
    for flat in 0..grid.len() {
        let mut r = 0.0;
        for mu in 0..d {
            for nu in 0..d {
                r += metric.ginv.at(flat, mu, nu) * ricci.at(flat, mu, nu);
            }
        }
        scalar.values[flat] = r;
    }
    let j = scalar.map(|r| r / (2.0 * (d - 1) as f64));
    let p = if d >= 3 {
        let mut p = SymField::zeros(&grid, d);
        for flat in 0..grid.len() {
            for mu in 0..d {
                for nu in mu..d {
                    p.set(
                        flat,
                        mu,
                        nu,
                        (ricci.at(flat, mu, nu) - j.values[flat] * metric.g.at(flat, mu, nu))
                            / (d - 2) as f64,
                    );
                }
            }
        }
        Some(p)
    } else {
        None
    };
    Ok(CurvaturePackage { ricci, scalar, j, p })
}

fn build_boundary(geom: &Geometry, face: Face) -> Result<BoundaryData, GeometryError> {
    let grid = &geom.grid;
    let d = geom.dim();
    let n = d - 1;
    let na = face.axis;
    let s = face.outward_sign();
    let fgrid = grid.face_grid(face)?;
    let parent_nodes: Vec<usize> =
        (0..fgrid.len()).map(|fi| grid.embed_face_node(face, &fgrid, fi)).collect();
    let pax = |i: usize| if i < na { i } else { i + 1 };

    // Induced metric: the face is a coordinate slice, so h_ij is the
    // tangential block of g.
    let mut h = SymField::zeros(&fgrid, n);
    for (fi, &p) in parent_nodes.iter().enumerate() {
        for i in 0..n {
            for j in i..n {
                h.set(fi, i, j, geom.metric.g.at(p, pax(i), pax(j)));
            }
        }
    }
    let face_metric = MetricField::new(h)?;

    // Outward unit normal: eta_mu = s delta_mu^na / sqrt(g^{na na}), raised.
    let mut eta_up = VecField::zeros(&fgrid, d);
    for (fi, &p) in parent_nodes.iter().enumerate() {
        let root = geom.metric.ginv.at(p, na, na).sqrt();
        for mu in 0..d {
            eta_up.comps[mu][fi] = s * geom.metric.ginv.at(p, mu, na) / root;
        }
    }

    // A_ij = g(nabla_i eta, j) = -<eta, nabla_i j> = -s Gamma^na_ij / sqrt(g^{na na}).
    let mut a = SymField::zeros(&fgrid, n);
    for (fi, &p) in parent_nodes.iter().enumerate() {
        let root = geom.metric.ginv.at(p, na, na).sqrt();
        for i in 0..n {
            for j in i..n {
                a.set(fi, i, j, -s * geom.gamma.at(p, na, pax(i), pax(j)) / root);
            }
        }
    }

    let mut h_mean = ScalarField::zeros(&fgrid);
    for fi in 0..fgrid.len() {
        let mut tr = 0.0;
        for i in 0..n {
            for j in 0..n {
                tr += face_metric.ginv.at(fi, i, j) * a.at(fi, i, j);
            }
        }
        h_mean.values[fi] = tr;
    }

    let mut a0 = a.clone();
    for fi in 0..fgrid.len() {
        for i in 0..n {
            for j in i..n {
                let v = a.at(fi, i, j) - h_mean.values[fi] / n as f64 * face_metric.g.at(fi, i, j);
                a0.set(fi, i, j, v);
            }
        }
    }
    let mut a0_norm2 = ScalarField::zeros(&fgrid);
    for fi in 0..fgrid.len() {
        let mut v = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        v += face_metric.ginv.at(fi, i, k)
                            * face_metric.ginv.at(fi, j, l)
                            * a0.at(fi, i, j)
                            * a0.at(fi, k, l);
                    }
                }
            }
        }
        a0_norm2.values[fi] = v;
    }

    // Ambient Schouten contractions with the normal.
    let p_amb = geom.curv.p.as_ref().ok_or(GeometryError::DimensionTooLow(d))?;
    let mut p_eta_eta = ScalarField::zeros(&fgrid);
    let mut p_eta_tan = VecField::zeros(&fgrid, n);
    for (fi, &pn) in parent_nodes.iter().enumerate() {
        let mut pee = 0.0;
        for mu in 0..d {
            for nu in 0..d {
                pee += p_amb.at(pn, mu, nu) * eta_up.comps[mu][fi] * eta_up.comps[nu][fi];
            }
        }
        p_eta_eta.values[fi] = pee;
        for i in 0..n {
            let mut v = 0.0;
            for mu in 0..d {
                v += p_amb.at(pn, mu, pax(i)) * eta_up.comps[mu][fi];
            }
            p_eta_tan.comps[i][fi] = v;
        }
    }

    let mut j_ambient = ScalarField::zeros(&fgrid);
    let mut eta_j = ScalarField::zeros(&fgrid);
    for (fi, &pn) in parent_nodes.iter().enumerate() {
        j_ambient.values[fi] = geom.curv.j.values[pn];
        let mut v = 0.0;
        for mu in 0..d {
            v += eta_up.comps[mu][fi] * grid.derivative_at(&geom.curv.j.values, pn, mu, 1);
        }
        eta_j.values[fi] = v;
    }

    let geometry = Box::new(Geometry::new(face_metric)?);

    Ok(BoundaryData {
        face,
        grid: fgrid,
        parent_nodes,
        geometry,
        eta_up,
        a,
        a0,
        h_mean,
        a0_norm2,
        p_eta_eta,
        p_eta_tan,
        j_ambient,
        eta_j,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ChartGrid;

    fn conformal_metric(
        grid: &Arc<ChartGrid>,
        phi: impl Fn(&[f64]) -> f64,
    ) -> MetricField {
        MetricField::from_fn(grid, |x, mu, nu| {
            if mu == nu {
                (2.0 * phi(x)).exp()
            } else {
                0.0
            }
        })
        .unwrap()
    }

    #[test]
    fn flat_slab_is_flat() {
        let grid = ChartGrid::slab(3, 17).unwrap();
        let geom = Geometry::flat(&grid).unwrap();
        // Zero up to stencil-weight rounding (weights scale like 1/h^2).
        assert!(geom.curv.scalar.max_abs() < 1e-10);
        assert!(geom.drift.comps[0].iter().all(|v| v.abs() < 1e-11));
        for bd in &geom.boundary {
            assert!(bd.h_mean.max_abs() < 1e-11);
            assert!(bd.a0_norm2.max_abs() < 1e-20);
            assert!(bd.geometry.curv.scalar.max_abs() < 1e-10);
            // eta points out of [0,1] along axis 0.
            let want = bd.face.outward_sign();
            assert!((bd.eta_up.comps[0][0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn exponential_slab_mean_curvature() {
        // g = e^{2 x0} delta on the slab in dimension 3 (boundary dim 2):
        // at x0 = 0 the outward normal points down and H = -2, at x0 = 1
        // H = +2 e^{-1}. A is pure trace, so A0 = 0.
        let grid = ChartGrid::slab(3, 17).unwrap();
        let geom = Geometry::new(conformal_metric(&grid, |x| x[0])).unwrap();
        for bd in &geom.boundary {
            let want = match bd.face.side {
                Side::Min => -2.0,
                Side::Max => 2.0 * (-1.0_f64).exp(),
            };
            let err = bd.h_mean.map(|h| h - want).max_abs();
            assert!(err < 1e-4, "H error {err} on {:?}", bd.face.side);
            assert!(bd.a0_norm2.max_abs() < 1e-18);
        }
    }

    #[test]
    fn round_chart_curvature() {
        // Stereographic-type chart of the unit sphere: g = e^{2 phi} delta,
        // phi = log(2 / (1 + |x|^2)); then Ric = (d-1) g, J = d/2, P = g/2.
        for (d, nodes) in [(3usize, 17usize), (4, 13)] {
            let grid =
                ChartGrid::box_chart(vec![-0.35; d], vec![0.7; d], nodes, false).unwrap();
            let geom = Geometry::new(conformal_metric(&grid, |x| {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                (2.0 / (1.0 + r2)).ln()
            }))
            .unwrap();
            let jerr = geom.curv.j.map(|j| j - d as f64 / 2.0).max_abs();
            assert!(jerr < 1e-2, "d={d}: J error {jerr}");
            let p = geom.curv.p.as_ref().unwrap();
            let mut perr = 0.0_f64;
            for flat in 0..grid.len() {
                for mu in 0..d {
                    for nu in mu..d {
                        perr = perr
                            .max((p.at(flat, mu, nu) - 0.5 * geom.metric.g.at(flat, mu, nu)).abs());
                    }
                }
            }
            assert!(perr < 1e-2, "d={d}: P error {perr}");
        }
    }

    #[test]
    fn hyperbolic_chart_curvature_converges() {
        // Ball-model chart: g = 4 delta / (1-|x|^2)^2, J = -d/2. The error
        // should shrink at fourth order when the spacing halves.
        let mut errs = Vec::new();
        for nodes in [17usize, 33] {
            let grid = ChartGrid::box_chart(vec![-0.3; 3], vec![0.6; 3], nodes, false).unwrap();
            let geom = Geometry::new(conformal_metric(&grid, |x| {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                (2.0 / (1.0 - r2)).ln()
            }))
            .unwrap();
            errs.push(geom.curv.j.map(|j| j + 1.5).max_abs());
        }
        let order = (errs[0] / errs[1]).log2();
        assert!(order > 3.5, "order {order}, errs {errs:?}");
    }

    #[test]
    fn conformal_slab_boundary_data() {
        // g = e^{2 sigma} delta with sigma smooth and slab-periodic. The
        // boundary of the flat slab is totally geodesic, so the conformal
        // mean curvature law gives H = n e^{-sigma} eta_flat(sigma) with
        // eta_flat = -partial_0 at x0 = 0, and the faces stay umbilic.
        let tp = 2.0 * std::f64::consts::PI;
        let sigma = move |x: &[f64]| 0.1 * (tp * x[1]).cos() * (1.0 + 0.5 * x[0]);
        let grid = ChartGrid::slab(3, 33).unwrap();
        let geom = Geometry::new(conformal_metric(&grid, sigma)).unwrap();
        let bd = geom.face(Side::Min);
        let mut err = 0.0_f64;
        for fi in 0..bd.grid.len() {
            let y = bd.grid.coord(fi, 0);
            let sig = 0.1 * (tp * y).cos();
            let dsig0 = 0.1 * (tp * y).cos() * 0.5;
            let want = 2.0 * (-sig).exp() * -dsig0;
            err = err.max((bd.h_mean.values[fi] - want).abs());
        }
        assert!(err < 1e-6, "H law error {err}");
        assert!(bd.a0_norm2.max_abs() < 1e-12, "faces should be umbilic");
    }

    #[test]
    fn schouten_trace_identity_on_boundary() {
        // J = Jbar + P(eta,eta) - H^2/(2n) + |A0|^2/(2(n-1)) ties together
        // every piece of boundary data; checked on a curved slab, n = 2 so
        // Jbar = Rbar/2.
        let grid = ChartGrid::slab(3, 33).unwrap();
        let tp = 2.0 * std::f64::consts::PI;
        let geom = Geometry::new(conformal_metric(&grid, move |x| {
            0.08 * ((tp * x[1]).sin() + (tp * x[2]).cos() * (tp * x[1]).cos()) * (1.0 + x[0])
        }))
        .unwrap();
        let n = 2.0;
        for bd in &geom.boundary {
            let mut err = 0.0_f64;
            for fi in 0..bd.grid.len() {
                let lhs = bd.j_ambient.values[fi];
                let rhs = bd.geometry.curv.j.values[fi] + bd.p_eta_eta.values[fi]
                    - bd.h_mean.values[fi].powi(2) / (2.0 * n)
                    + bd.a0_norm2.values[fi] / (2.0 * (n - 1.0));
                err = err.max((lhs - rhs).abs());
            }
            assert!(err < 2e-5, "trace identity error {err} on {:?}", bd.face.side);
        }
    }

    #[test]
    fn weyl_vanishes_for_conformally_flat_metrics() {
        let grid = ChartGrid::slab(4, 9).unwrap();
        let tp = 2.0 * std::f64::consts::PI;
        let geom = Geometry::new(conformal_metric(&grid, move |x| {
            0.1 * (tp * x[1]).sin() * (1.0 + 0.3 * x[0])
        }))
        .unwrap();
        let bd = geom.face(Side::Min);
        let w = geom.weyl_eta_face(bd).unwrap();
        let mut m = 0.0_f64;
        for c in &w.comps {
            for v in c {
                m = m.max(v.abs());
            }
        }
        assert!(m < 2e-2, "Weyl residual {m}");
    }
}
