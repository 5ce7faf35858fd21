//! One-dimensional finite-difference stencils on uniform grids.
//!
//! Weights come from Fornberg's recurrence, so any derivative order and
//! approximation order can be requested from the same code path. The grid
//! layer asks for fourth-order stencils; the one-dimensional collocation
//! solvers ask for sixth-order ones. On a periodic axis a single centered
//! stencil applies everywhere. On a bounded axis, nodes close to an edge
//! get a shifted window that is widened by one point, which keeps the
//! asymmetric stencil at (or above) the requested order.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StencilError {
    #[error("axis with {size} nodes is too coarse for derivative order {deriv} at accuracy {acc}; needs at least {needed}")]
    TooCoarse {
        size: usize,
        deriv: usize,
        acc: usize,
        needed: usize,
    },
    #[error("derivative order must be between 1 and {max}, got {got}")]
    BadDerivative { got: usize, max: usize },
}

/// Maximum derivative order the tables are built for.
pub const MAX_DERIV: usize = 4;

/// Fornberg weights: given sample abscissae `x` and an evaluation point `z`,
/// returns `w[m][j]` with `sum_j w[m][j] f(x[j]) ≈ f^{(m)}(z)` for every
/// `m = 0..=max_deriv`. Exact (to rounding) for polynomials of degree
/// `< x.len()`.
pub fn fd_weights(z: f64, x: &[f64], max_deriv: usize) -> Vec<Vec<f64>> {
    let nd = x.len();
    let m = max_deriv;
    let mut c = vec![vec![0.0_f64; nd]; m + 1];
    let mut c1 = 1.0;
    let mut c4 = x[0] - z;
    c[0][0] = 1.0;
    for i in 1..nd {
        let mn = i.min(m);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = x[i] - z;
        for j in 0..i {
            let c3 = x[i] - x[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c
}

/// A single differentiation rule: `f^{(k)}(node) ≈ Σ weights[i]·f(node + offsets[i])`.
/// Weights already include the `1/h^k` factor.
#[derive(Debug, Clone)]
pub struct Stencil {
    pub offsets: Vec<isize>,
    pub weights: Vec<f64>,
}

impl Stencil {
    fn from_window(eval_at: isize, window: std::ops::RangeInclusive<isize>, k: usize, h: f64) -> Stencil {
        let nodes: Vec<isize> = window.collect();
        let xs: Vec<f64> = nodes.iter().map(|&j| j as f64 * h).collect();
        let w = fd_weights(eval_at as f64 * h, &xs, k);
        Stencil {
            offsets: nodes.iter().map(|&j| j - eval_at).collect(),
            weights: w[k].clone(),
        }
    }
}

/// Differentiation rules for one axis: a centered interior stencil per
/// derivative order, plus per-node edge stencils when the axis is bounded.
#[derive(Debug, Clone)]
pub struct AxisStencils {
    pub size: usize,
    pub spacing: f64,
    pub periodic: bool,
    /// `centered[k-1]` applies at nodes at least `margin(k)` from an edge.
    centered: Vec<Stencil>,
    /// `edge[k-1][i]` is the rule at node `i` (low side); the high side is
    /// obtained by mirroring. Empty for periodic axes.
    edge: Vec<Vec<Stencil>>,
    margins: Vec<usize>,
}

/// Radius of the centered window for derivative `k` at accuracy `acc`.
fn centered_radius(k: usize, acc: usize) -> usize {
    (k + acc - 1) / 2
}

impl AxisStencils {
    /// Build tables for derivatives `1..=MAX_DERIV` at approximation order `acc`.
    pub fn build(size: usize, spacing: f64, periodic: bool, acc: usize) -> Result<AxisStencils, StencilError> {
        let mut centered = Vec::new();
        let mut edge = Vec::new();
        let mut margins = Vec::new();
        for k in 1..=MAX_DERIV {
            let r = centered_radius(k, acc);
            let needed = if periodic { 2 * r + 1 } else { k + acc + 1 };
            if size < needed {
                return Err(StencilError::TooCoarse { size, deriv: k, acc, needed });
            }
            centered.push(Stencil::from_window(0, -(r as isize)..=r as isize, k, spacing));
            margins.push(r);
            if periodic {
                edge.push(Vec::new());
            } else {
                // Shifted windows, one point wider than the centered one.
                // Indices 0..r hold the rules for nodes 0..r from the low
                // edge, indices r..2r the rules for nodes size-1, size-2, ...
                let w = (k + acc + 1).max(2 * r + 2) as isize;
                let mut rules = Vec::new();
                for i in 0..r as isize {
                    rules.push(Stencil::from_window(i, 0..=(w - 1), k, spacing));
                }
                for i in ((size - r)..size).rev() {
                    rules.push(Stencil::from_window(
                        i as isize,
                        (size as isize - w)..=(size as isize - 1),
                        k,
                        spacing,
                    ));
                }
                edge.push(rules);
            }
        }
        Ok(AxisStencils { size, spacing, periodic, centered, edge, margins })
    }

    /// The rule for derivative `k` at node `i`, plus whether offsets wrap.
    pub fn at(&self, i: usize, k: usize) -> &Stencil {
        debug_assert!((1..=MAX_DERIV).contains(&k));
        let r = self.margins[k - 1];
        if self.periodic || (i >= r && i + r < self.size) {
            &self.centered[k - 1]
        } else if i < r {
            &self.edge[k - 1][i]
        } else {
            &self.edge[k - 1][self.size - 1 - i + r]
        }
    }

    /// Margin within which edge rules apply for derivative `k`.
    pub fn margin(&self, k: usize) -> usize {
        self.margins[k - 1]
    }
}

/// Convenience constructor.
pub fn build_axis(size: usize, spacing: f64, periodic: bool, acc: usize) -> Result<AxisStencils, StencilError> {
    AxisStencils::build(size, spacing, periodic, acc)
}
