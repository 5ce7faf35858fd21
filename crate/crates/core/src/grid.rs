//! Structured chart grids and nodal fields.
//!
//! The standard domain is a slab: coordinate x^0 runs over [0,1] with two
//! boundary faces, the remaining axes are unit-circumference tori. Periodic
//! axes carry one node fewer than bounded ones so that every axis shares the
//! same spacing and refinement halves it exactly. Box charts (all axes
//! bounded) serve model geometries whose natural coordinates are not
//! periodic, such as conformal charts of spheres and hyperbolic space.
//!
//! Derivatives are fourth-order accurate; differentiation of polynomials of
//! degree <= 4 along an axis is exact to rounding. Quadrature is the
//! periodic trapezoid rule on periodic axes and composite Simpson (odd node
//! counts) on bounded ones, both at least fourth-order accurate for smooth
//! integrands respecting the axis topology.

use crate::stencil::{build_axis, AxisStencils, StencilError};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error(transparent)]
    Stencil(#[from] StencilError),
    #[error("grid axes need at least 7 nodes, axis {axis} has {size}")]
    TooCoarse { axis: usize, size: usize },
    #[error("Simpson quadrature on bounded axis {axis} needs an odd node count, got {size}")]
    EvenNodeCount { axis: usize, size: usize },
    #[error("grid has no boundary (no normal axis)")]
    NoBoundary,
    #[error("metric is not positive definite at node {node}")]
    NotPositiveDefinite { node: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Face {
    pub axis: usize,
    pub side: Side,
}

impl Face {
    /// +1 on the max face, -1 on the min face: the sign that makes the
    /// coordinate conormal point out of the domain.
    pub fn outward_sign(&self) -> f64 {
        match self.side {
            Side::Min => -1.0,
            Side::Max => 1.0,
        }
    }
}

#[derive(Debug)]
pub struct ChartGrid {
    pub sizes: Vec<usize>,
    pub spacing: Vec<f64>,
    pub origin: Vec<f64>,
    pub periodic: Vec<bool>,
    pub normal_axis: Option<usize>,
    strides: Vec<usize>,
    stencils: Vec<AxisStencils>,
    len: usize,
}

impl ChartGrid {
    fn assemble(
        sizes: Vec<usize>,
        spacing: Vec<f64>,
        origin: Vec<f64>,
        periodic: Vec<bool>,
        normal_axis: Option<usize>,
    ) -> Result<Arc<ChartGrid>, GridError> {
        for (axis, &s) in sizes.iter().enumerate() {
            if s < 7 {
                return Err(GridError::TooCoarse { axis, size: s });
            }
        }
        let dim = sizes.len();
        let mut strides = vec![0usize; dim];
        let mut acc = 1usize;
        for a in (0..dim).rev() {
            strides[a] = acc;
            acc *= sizes[a];
        }
        let mut stencils = Vec::with_capacity(dim);
        for a in 0..dim {
            stencils.push(build_axis(sizes[a], spacing[a], periodic[a], 4)?);
        }
        Ok(Arc::new(ChartGrid {
            sizes,
            spacing,
            origin,
            periodic,
            normal_axis,
            strides,
            stencils,
            len: acc,
        }))
    }

    /// The standard domain: axis 0 bounded over [0,1] with `nodes` nodes,
    /// the other `dim-1` axes unit tori with `nodes-1` nodes, so every axis
    /// has spacing 1/(nodes-1).
    pub fn slab(dim: usize, nodes: usize) -> Result<Arc<ChartGrid>, GridError> {
        let h = 1.0 / (nodes - 1) as f64;
        let mut sizes = vec![nodes - 1; dim];
        sizes[0] = nodes;
        let mut periodic = vec![true; dim];
        periodic[0] = false;
        ChartGrid::assemble(sizes, vec![h; dim], vec![0.0; dim], periodic, Some(0))
    }

    /// A fully bounded box chart. `extent[a]` is the coordinate length of
    /// axis `a`; every axis has `nodes` nodes. Axis 0 carries the boundary
    /// faces when `with_boundary` is set.
    pub fn box_chart(
        origin: Vec<f64>,
        extent: Vec<f64>,
        nodes: usize,
        with_boundary: bool,
    ) -> Result<Arc<ChartGrid>, GridError> {
        let dim = origin.len();
        let spacing = extent.iter().map(|e| e / (nodes - 1) as f64).collect();
        ChartGrid::assemble(
            vec![nodes; dim],
            spacing,
            origin,
            vec![false; dim],
            if with_boundary { Some(0) } else { None },
        )
    }

    pub fn dim(&self) -> usize {
        self.sizes.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn faces(&self) -> Result<[Face; 2], GridError> {
        let axis = self.normal_axis.ok_or(GridError::NoBoundary)?;
        Ok([Face { axis, side: Side::Min }, Face { axis, side: Side::Max }])
    }

    #[inline]
    pub fn axis_index(&self, flat: usize, axis: usize) -> usize {
        (flat / self.strides[axis]) % self.sizes[axis]
    }

    pub fn multi_index(&self, flat: usize) -> Vec<usize> {
        (0..self.dim()).map(|a| self.axis_index(flat, a)).collect()
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn coord(&self, flat: usize, axis: usize) -> f64 {
        self.origin[axis] + self.axis_index(flat, axis) as f64 * self.spacing[axis]
    }

    pub fn coords(&self, flat: usize) -> Vec<f64> {
        (0..self.dim()).map(|a| self.coord(flat, a)).collect()
    }

    /// Flat index of the node shifted by `off` along `axis` (wrapping on
    /// periodic axes; the caller guarantees range on bounded ones).
    #[inline]
    fn shifted(&self, flat: usize, axis: usize, off: isize) -> usize {
        let i = self.axis_index(flat, axis) as isize;
        let s = self.sizes[axis] as isize;
        let j = if self.periodic[axis] { (i + off).rem_euclid(s) } else { i + off };
        (flat as isize + (j - i) * self.strides[axis] as isize) as usize
    }

    /// Apply the k-th derivative stencil along `axis` at one node.
    #[inline]
    pub fn derivative_at(&self, values: &[f64], flat: usize, axis: usize, k: usize) -> f64 {
        let i = self.axis_index(flat, axis);
        let st = self.stencils[axis].at(i, k);
        let mut acc = 0.0;
        for (o, w) in st.offsets.iter().zip(&st.weights) {
            acc += w * values[self.shifted(flat, axis, *o)];
        }
        acc
    }

    /// Resolve the k-th derivative stencil at one node and fill `taps`
    /// with the flat indices its offsets reach, so one index computation
    /// serves many fields at the same node.
    #[inline]
    pub fn stencil_taps<'a>(
        &'a self,
        flat: usize,
        axis: usize,
        k: usize,
        taps: &mut Vec<usize>,
    ) -> &'a crate::stencil::Stencil {
        let i = self.axis_index(flat, axis);
        let st = self.stencils[axis].at(i, k);
        taps.clear();
        for &o in &st.offsets {
            taps.push(self.shifted(flat, axis, o));
        }
        st
    }

    /// Whole-grid k-th derivative of `src` along `axis` into `dst`.
    /// The loop structure keeps every stencil tap a contiguous stream:
    /// stencils are resolved once per axis index and applied across the
    /// contiguous sub-block, which is what makes interior-scale passes
    /// memory-bound rather than latency-bound.
    pub fn derivative_plane(&self, src: &[f64], axis: usize, k: usize, dst: &mut [f64]) {
        self.derivative_plane_impl::<false>(src, axis, k, 1.0, dst);
    }

    /// Like [`derivative_plane`](Self::derivative_plane) but accumulates
    /// `dst += scale * derivative`, fusing the add into the sweep.
    pub fn derivative_plane_acc(
        &self,
        src: &[f64],
        axis: usize,
        k: usize,
        scale: f64,
        dst: &mut [f64],
    ) {
        self.derivative_plane_impl::<true>(src, axis, k, scale, dst);
    }

    fn derivative_plane_impl<const ACC: bool>(
        &self,
        src: &[f64],
        axis: usize,
        k: usize,
        scale: f64,
        dst: &mut [f64],
    ) {
        // Fixed-count row kernel so the tap loop unrolls.
        fn row<const N: usize, const ACC: bool>(
            src: &[f64],
            dst: &mut [f64],
            row0: usize,
            stride: usize,
            doffs: &[isize],
            weights: &[f64],
            scale: f64,
        ) {
            let mut offs = [0isize; N];
            let mut w = [0.0f64; N];
            offs.copy_from_slice(&doffs[..N]);
            w.copy_from_slice(&weights[..N]);
            for inner in 0..stride {
                let flat = row0 + inner;
                let mut acc = 0.0;
                for t in 0..N {
                    acc += w[t] * src[(flat as isize + offs[t]) as usize];
                }
                if ACC {
                    dst[flat] += scale * acc;
                } else {
                    dst[flat] = acc;
                }
            }
        }

        debug_assert_eq!(src.len(), self.len);
        debug_assert_eq!(dst.len(), self.len);
        let stride = self.strides[axis];
        let size = self.sizes[axis];
        let block = stride * size;
        let nblocks = self.len / block;
        // Tap tables per axis index, resolved once per sweep.
        let mut starts = Vec::with_capacity(size + 1);
        let mut doffs: Vec<isize> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        starts.push(0usize);
        for i in 0..size {
            let st = self.stencils[axis].at(i, k);
            for &o in &st.offsets {
                let j = if self.periodic[axis] {
                    (i as isize + o).rem_euclid(size as isize)
                } else {
                    i as isize + o
                };
                doffs.push((j - i as isize) * stride as isize);
            }
            weights.extend_from_slice(&st.weights);
            starts.push(doffs.len());
        }
        if stride == 1 {
            // Contiguous axis: each block is one row, taps stay in cache.
            for b in 0..nblocks {
                let base = b * block;
                for i in 0..size {
                    let flat = base + i;
                    let mut acc = 0.0;
                    for t in starts[i]..starts[i + 1] {
                        acc += weights[t] * src[(flat as isize + doffs[t]) as usize];
                    }
                    if ACC {
                        dst[flat] += scale * acc;
                    } else {
                        dst[flat] = acc;
                    }
                }
            }
            return;
        }
        for b in 0..nblocks {
            let base_b = b * block;
            for i in 0..size {
                let row0 = base_b + i * stride;
                let s0 = starts[i];
                let s1 = starts[i + 1];
                let (dof, w) = (&doffs[s0..s1], &weights[s0..s1]);
                match s1 - s0 {
                    5 => row::<5, ACC>(src, dst, row0, stride, dof, w, scale),
                    6 => row::<6, ACC>(src, dst, row0, stride, dof, w, scale),
                    7 => row::<7, ACC>(src, dst, row0, stride, dof, w, scale),
                    8 => row::<8, ACC>(src, dst, row0, stride, dof, w, scale),
                    9 => row::<9, ACC>(src, dst, row0, stride, dof, w, scale),
                    _ => {
                        for inner in 0..stride {
                            let flat = row0 + inner;
                            let mut acc = 0.0;
                            for (off, wt) in dof.iter().zip(w) {
                                acc += wt * src[(flat as isize + off) as usize];
                            }
                            if ACC {
                                dst[flat] += scale * acc;
                            } else {
                                dst[flat] = acc;
                            }
                        }
                    }
                }
            }
        }
    }

    /// The grid of one boundary face: the normal axis removed, everything
    /// else unchanged. The face grid has no boundary of its own here; the
    /// slab's tangential axes are closed.
    pub fn face_grid(&self, face: Face) -> Result<Arc<ChartGrid>, GridError> {
        let mut sizes = self.sizes.clone();
        let mut spacing = self.spacing.clone();
        let mut origin = self.origin.clone();
        let mut periodic = self.periodic.clone();
        sizes.remove(face.axis);
        spacing.remove(face.axis);
        origin.remove(face.axis);
        periodic.remove(face.axis);
        ChartGrid::assemble(sizes, spacing, origin, periodic, None)
    }

    /// Parent flat index of face node `fi` (face-grid flat order).
    pub fn embed_face_node(&self, face: Face, face_grid: &ChartGrid, fi: usize) -> usize {
        let mut multi = Vec::with_capacity(self.dim());
        let fm = face_grid.multi_index(fi);
        let wall = match face.side {
            Side::Min => 0,
            Side::Max => self.sizes[face.axis] - 1,
        };
        for a in 0..self.dim() {
            use std::cmp::Ordering::*;
            match a.cmp(&face.axis) {
                Less => multi.push(fm[a]),
                Equal => multi.push(wall),
                Greater => multi.push(fm[a - 1]),
            }
        }
        self.flat_index(&multi)
    }

    /// Quadrature weight of a node (product of per-axis weights).
    fn quad_weights(&self) -> Result<Vec<Vec<f64>>, GridError> {
        let mut per_axis = Vec::with_capacity(self.dim());
        for a in 0..self.dim() {
            let s = self.sizes[a];
            let h = self.spacing[a];
            if self.periodic[a] {
                per_axis.push(vec![h; s]);
            } else {
                if s % 2 == 0 {
                    return Err(GridError::EvenNodeCount { axis: a, size: s });
                }
                let mut w = vec![0.0; s];
                for (i, slot) in w.iter_mut().enumerate() {
                    *slot = if i == 0 || i == s - 1 {
                        h / 3.0
                    } else if i % 2 == 1 {
                        4.0 * h / 3.0
                    } else {
                        2.0 * h / 3.0
                    };
                }
                per_axis.push(w);
            }
        }
        Ok(per_axis)
    }

    /// Integrate nodal values against an optional density. Sequential Kahan
    /// summation: deterministic order and rounding error independent of the
    /// node count.
    pub fn integrate(&self, values: &[f64], density: Option<&[f64]>) -> Result<f64, GridError> {
        let per_axis = self.quad_weights()?;
        let mut acc = 0.0;
        let mut comp = 0.0;
        for flat in 0..self.len {
            let mut w = 1.0;
            for a in 0..self.dim() {
                w *= per_axis[a][self.axis_index(flat, a)];
            }
            let d = density.map_or(1.0, |d| d[flat]);
            let term = w * d * values[flat] - comp;
            let next = acc + term;
            comp = (next - acc) - term;
            acc = next;
        }
        Ok(acc)
    }
}

/// Symmetric-pair storage index for (mu, nu) with mu <= nu in dimension d.
#[inline]
pub fn sym_index(d: usize, mu: usize, nu: usize) -> usize {
    let (a, b) = if mu <= nu { (mu, nu) } else { (nu, mu) };
    a * d - a * (a + 1) / 2 + b
}

pub fn sym_len(d: usize) -> usize {
    d * (d + 1) / 2
}

#[derive(Debug, Clone)]
pub struct ScalarField {
    pub grid: Arc<ChartGrid>,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &Arc<ChartGrid>) -> ScalarField {
        ScalarField { grid: grid.clone(), values: vec![0.0; grid.len()] }
    }

    pub fn from_fn(grid: &Arc<ChartGrid>, f: impl Fn(&[f64]) -> f64) -> ScalarField {
        let values = (0..grid.len()).map(|i| f(&grid.coords(i))).collect();
        ScalarField { grid: grid.clone(), values }
    }

    pub fn constant(grid: &Arc<ChartGrid>, c: f64) -> ScalarField {
        ScalarField { grid: grid.clone(), values: vec![c; grid.len()] }
    }

    pub fn derivative(&self, axis: usize, k: usize) -> ScalarField {
        let mut out = ScalarField::zeros(&self.grid);
        self.grid.derivative_plane(&self.values, axis, k, &mut out.values);
        out
    }

    pub fn derivative_at(&self, flat: usize, axis: usize, k: usize) -> f64 {
        self.grid.derivative_at(&self.values, flat, axis, k)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> ScalarField {
        ScalarField {
            grid: self.grid.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn axpy(&mut self, s: f64, other: &ScalarField) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Max-norm over nodes at least `margin` nodes from every bounded edge.
    pub fn max_abs_interior(&self, margin: usize) -> f64 {
        let g = &self.grid;
        let mut m = 0.0_f64;
        'node: for flat in 0..g.len() {
            for a in 0..g.dim() {
                if !g.periodic[a] {
                    let i = g.axis_index(flat, a);
                    if i < margin || i + margin >= g.sizes[a] {
                        continue 'node;
                    }
                }
            }
            m = m.max(self.values[flat].abs());
        }
        m
    }

    pub fn integrate(&self, density: Option<&ScalarField>) -> Result<f64, GridError> {
        self.grid.integrate(&self.values, density.map(|d| d.values.as_slice()))
    }

    /// Restriction to a face, as a field on the face grid.
    pub fn restrict(&self, face: Face, face_grid: &Arc<ChartGrid>) -> ScalarField {
        let mut out = ScalarField::zeros(face_grid);
        for fi in 0..face_grid.len() {
            out.values[fi] = self.values[self.grid.embed_face_node(face, face_grid, fi)];
        }
        out
    }

    /// k-th coordinate derivative along `axis`, evaluated at face nodes only.
    pub fn face_axis_derivative(
        &self,
        face: Face,
        face_grid: &Arc<ChartGrid>,
        axis: usize,
        k: usize,
    ) -> ScalarField {
        let mut out = ScalarField::zeros(face_grid);
        for fi in 0..face_grid.len() {
            let p = self.grid.embed_face_node(face, face_grid, fi);
            out.values[fi] = self.grid.derivative_at(&self.values, p, axis, k);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct VecField {
    pub grid: Arc<ChartGrid>,
    pub comps: Vec<Vec<f64>>,
}

impl VecField {
    pub fn zeros(grid: &Arc<ChartGrid>, d: usize) -> VecField {
        VecField { grid: grid.clone(), comps: vec![vec![0.0; grid.len()]; d] }
    }
}

/// Symmetric rank-two field stored by packed pair index.
#[derive(Debug, Clone)]
pub struct SymField {
    pub grid: Arc<ChartGrid>,
    pub dim: usize,
    pub comps: Vec<Vec<f64>>,
}

impl SymField {
    pub fn zeros(grid: &Arc<ChartGrid>, dim: usize) -> SymField {
        SymField {
            grid: grid.clone(),
            dim,
            comps: vec![vec![0.0; grid.len()]; sym_len(dim)],
        }
    }

    pub fn from_fn(grid: &Arc<ChartGrid>, dim: usize, f: impl Fn(&[f64], usize, usize) -> f64) -> SymField {
        let mut out = SymField::zeros(grid, dim);
        for mu in 0..dim {
            for nu in mu..dim {
                let ci = sym_index(dim, mu, nu);
                for flat in 0..grid.len() {
                    out.comps[ci][flat] = f(&grid.coords(flat), mu, nu);
                }
            }
        }
        out
    }

    #[inline]
    pub fn at(&self, flat: usize, mu: usize, nu: usize) -> f64 {
        self.comps[sym_index(self.dim, mu, nu)][flat]
    }

    #[inline]
    pub fn set(&mut self, flat: usize, mu: usize, nu: usize, v: f64) {
        self.comps[sym_index(self.dim, mu, nu)][flat] = v;
    }

    /// Load the full matrix at a node into a dim x dim row-major buffer.
    pub fn load(&self, flat: usize, buf: &mut [f64]) {
        let d = self.dim;
        for mu in 0..d {
            for nu in 0..d {
                buf[mu * d + nu] = self.at(flat, mu, nu);
            }
        }
    }
}

/// Cholesky factorization of a small SPD matrix (row-major, d x d).
/// Returns false if the matrix is not positive definite.
pub fn cholesky_in_place(a: &mut [f64], d: usize) -> bool {
    for j in 0..d {
        let mut s = a[j * d + j];
        for k in 0..j {
            s -= a[j * d + k] * a[j * d + k];
        }
        if s <= 0.0 {
            return false;
        }
        let l = s.sqrt();
        a[j * d + j] = l;
        for i in (j + 1)..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = s / l;
        }
    }
    true
}

/// Invert a small SPD matrix given its in-place Cholesky factor.
pub fn spd_invert(a: &[f64], d: usize, out: &mut [f64]) {
    // Solve L L^T X = I column by column.
    let mut col = vec![0.0; d];
    for c in 0..d {
        for i in 0..d {
            let mut s = if i == c { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= a[i * d + k] * col[k];
            }
            col[i] = s / a[i * d + i];
        }
        for i in (0..d).rev() {
            let mut s = col[i];
            for k in (i + 1)..d {
                s -= a[k * d + i] * out[k * d + c];
            }
            out[i * d + c] = s / a[i * d + i];
        }
    }
}

/// A positive definite symmetric field with cached inverse and volume factor.
#[derive(Debug, Clone)]
pub struct MetricField {
    pub g: SymField,
    pub ginv: SymField,
    /// log sqrt(det g); its gradient is the drift of the divergence operator.
    pub log_sqrt_det: ScalarField,
    pub sqrt_det: ScalarField,
}

impl MetricField {
    /// Validates positive definiteness at every node.
    pub fn new(g: SymField) -> Result<MetricField, GridError> {
        let d = g.dim;
        let grid = g.grid.clone();
        let mut ginv = SymField::zeros(&grid, d);
        let mut lsd = ScalarField::zeros(&grid);
        let mut sd = ScalarField::zeros(&grid);
        let mut buf = vec![0.0; d * d];
        let mut inv = vec![0.0; d * d];
        for flat in 0..grid.len() {
            g.load(flat, &mut buf);
            if !cholesky_in_place(&mut buf, d) {
                return Err(GridError::NotPositiveDefinite { node: flat });
            }
            let mut logdet_half = 0.0;
            for i in 0..d {
                logdet_half += buf[i * d + i].ln();
            }
            spd_invert(&buf, d, &mut inv);
            for mu in 0..d {
                for nu in mu..d {
                    ginv.set(flat, mu, nu, inv[mu * d + nu]);
                }
            }
            lsd.values[flat] = logdet_half;
            sd.values[flat] = logdet_half.exp();
        }
        Ok(MetricField { g, ginv, log_sqrt_det: lsd, sqrt_det: sd })
    }

    pub fn grid(&self) -> &Arc<ChartGrid> {
        &self.g.grid
    }

    pub fn dim(&self) -> usize {
        self.g.dim
    }

    pub fn from_fn(
        grid: &Arc<ChartGrid>,
        f: impl Fn(&[f64], usize, usize) -> f64,
    ) -> Result<MetricField, GridError> {
        MetricField::new(SymField::from_fn(grid, grid.dim(), f))
    }

    pub fn flat(grid: &Arc<ChartGrid>) -> Result<MetricField, GridError> {
        MetricField::from_fn(grid, |_, mu, nu| if mu == nu { 1.0 } else { 0.0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slab_layout_and_coords() {
        let g = ChartGrid::slab(3, 17).unwrap();
        assert_eq!(g.sizes, vec![17, 16, 16]);
        assert_eq!(g.len(), 17 * 16 * 16);
        assert!((g.spacing[0] - 1.0 / 16.0).abs() < 1e-15);
        assert!((g.spacing[1] - 1.0 / 16.0).abs() < 1e-15);
        let flat = g.flat_index(&[3, 5, 7]);
        assert_eq!(g.multi_index(flat), vec![3, 5, 7]);
        assert!((g.coord(flat, 0) - 3.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn derivative_order_on_smooth_field() {
        // Fourth-order convergence for mixed smooth data on the slab.
        let tp = 2.0 * std::f64::consts::PI;
        let f = move |x: &[f64]| (tp * x[1]).sin() * (x[0] * x[0] + 0.5 * x[0]);
        let dfdx1 = move |x: &[f64]| tp * (tp * x[1]).cos() * (x[0] * x[0] + 0.5 * x[0]);
        let mut errs = Vec::new();
        for nodes in [17usize, 33] {
            let g = ChartGrid::slab(2, nodes).unwrap();
            let u = ScalarField::from_fn(&g, f);
            let du = u.derivative(1, 1);
            let want = ScalarField::from_fn(&g, dfdx1);
            errs.push(du.zip(&want, |a, b| a - b).max_abs());
        }
        let order = (errs[0] / errs[1]).log2();
        assert!(order > 3.5, "order {order}, errs {errs:?}");
    }

    #[test]
    fn polynomial_normal_derivatives_exact_at_faces() {
        let g = ChartGrid::slab(2, 17).unwrap();
        let u = ScalarField::from_fn(&g, |x| x[0].powi(4));
        let fg = g.face_grid(Face { axis: 0, side: Side::Min }).unwrap();
        for (k, want) in [(1, 0.0), (2, 0.0), (3, 0.0)] {
            let d = u.face_axis_derivative(Face { axis: 0, side: Side::Min }, &fg, 0, k);
            assert!((d.values[0] - want).abs() < 1e-8, "k={k}");
        }
        let d4 = u.face_axis_derivative(Face { axis: 0, side: Side::Min }, &fg, 0, 4);
        assert!((d4.values[0] - 24.0).abs() < 1e-6);
    }

    #[test]
    fn quadrature_flat_volume_and_face_weighting() {
        // Volume of the slab is exactly 1.
        let g = ChartGrid::slab(3, 17).unwrap();
        let one = ScalarField::constant(&g, 1.0);
        assert!((one.integrate(None).unwrap() - 1.0).abs() < 1e-14);

        // Simpson along the bounded axis: integral of (x^0)^4 is 1/5 with
        // Simpson's classical error, far below 1e-4 at h=1/16.
        let u = ScalarField::from_fn(&g, |x| x[0].powi(4));
        assert!((u.integrate(None).unwrap() - 0.2).abs() < 1e-5);

        // Periodic trapezoid is spectrally accurate.
        let v = ScalarField::from_fn(&g, |x| (2.0 * std::f64::consts::PI * x[1]).sin().exp());
        let want = 1.2660658777520083559; // I_0(1), Bessel
        assert!((v.integrate(None).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn face_restriction_round_trip() {
        let g = ChartGrid::slab(3, 17).unwrap();
        let u = ScalarField::from_fn(&g, |x| x[0] + 10.0 * x[1] + 100.0 * x[2]);
        let face = Face { axis: 0, side: Side::Max };
        let fg = g.face_grid(face).unwrap();
        let r = u.restrict(face, &fg);
        for fi in 0..fg.len() {
            let c = fg.coords(fi);
            assert!((r.values[fi] - (1.0 + 10.0 * c[0] + 100.0 * c[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn metric_inverse_and_volume_factor() {
        let g = ChartGrid::slab(2, 17).unwrap();
        let m = MetricField::from_fn(&g, |x, mu, nu| {
            let base = if mu == nu { 1.0 } else { 0.1 };
            base + if mu == nu { 0.2 * x[0] } else { 0.0 }
        })
        .unwrap();
        // g * ginv = identity at a sample node.
        let flat = g.flat_index(&[5, 3]);
        for a in 0..2 {
            for b in 0..2 {
                let mut s = 0.0;
                for c in 0..2 {
                    s += m.g.at(flat, a, c) * m.ginv.at(flat, c, b);
                }
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((s - want).abs() < 1e-12);
            }
        }
        // det(g) = (1+0.2x)^2 - 0.01 checked through sqrt_det.
        let x = g.coord(flat, 0);
        let det = (1.0 + 0.2 * x) * (1.0 + 0.2 * x) - 0.01;
        assert!((m.sqrt_det.values[flat] - det.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn not_spd_is_reported() {
        let g = ChartGrid::slab(2, 17).unwrap();
        let r = MetricField::from_fn(&g, |_, mu, nu| if mu == nu { -1.0 } else { 0.0 });
        assert!(matches!(r, Err(GridError::NotPositiveDefinite { .. })));
    }
}
