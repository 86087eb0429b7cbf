//! Sparse system assembly for the staggered-grid scheme.
//!
//! Three matrices share the same boundary treatment and differ in their
//! interior rows:
//!
//! * forward:  row of -div(D grad u) + sigma_a u, five-point with edge D;
//! * internal: row of psi div(D grad u) + (2 gamma - 1) D grad(psi) . grad(u)
//!   + 2 gamma sigma_a psi u, the operator whose solution is the unmodulated
//!   photon density given the internal functional;
//! * mixed adjoint: forward interior rows with Dirichlet rows on a selected
//!   open boundary part and zero-data Robin rows elsewhere.
//!
//! Boundary rows discretize u + ell nu . D grad(u) with the one-sided flux
//! at the adjacent half-point; corners use the diagonal outward normal
//! nu = (-sqrt2/2, -sqrt2/2) (and reflections), which puts the factor
//! sqrt2 ell / 2 on both one-sided fluxes.

use std::path::Path;

use crate::coefficients::{SampledDiffusion, SampledFields, SampledTensor};
use crate::error::{Error, Result};
use crate::mesh::{EdgeField, Grid2D, NodeClass, NodeField};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SystemKind {
    Forward,
    Internal,
    MixedAdjoint,
}

/// Assembled linear system in coordinate form. Entries are sorted by
/// (row, col) with no duplicates; every row keeps its diagonal entry.
#[derive(Clone, Debug)]
pub struct SparseSystem {
    pub n: usize,
    pub entries: Vec<(usize, usize, f64)>,
    pub rhs: Vec<f64>,
    pub kind: SystemKind,
}

impl SparseSystem {
    pub fn with_rhs(mut self, rhs: Vec<f64>) -> Self {
        assert_eq!(rhs.len(), self.n, "rhs length must match dimension");
        self.rhs = rhs;
        self
    }

    pub fn csr(&self) -> CsrMatrix {
        CsrMatrix::from_sorted_entries(self.n, &self.entries)
    }

    /// Matrix Market coordinate format, 1-based indices.
    pub fn write_matrix_market(&self, path: &Path) -> Result<()> {
        use std::fmt::Write as _;
        let mut out = String::new();
        let _ = writeln!(out, "%%MatrixMarket matrix coordinate real general");
        let _ = writeln!(out, "{} {} {}", self.n, self.n, self.entries.len());
        for &(r, c, v) in &self.entries {
            let _ = writeln!(out, "{} {} {:.17e}", r + 1, c + 1, v);
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Compressed-row matrix used for matvecs, solves, and row scans.
#[derive(Clone, Debug)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_sorted_entries(n: usize, entries: &[(usize, usize, f64)]) -> Self {
        let mut row_ptr = vec![0usize; n + 1];
        for &(r, _, _) in entries {
            row_ptr[r + 1] += 1;
        }
        for k in 0..n {
            row_ptr[k + 1] += row_ptr[k];
        }
        let cols = entries.iter().map(|e| e.1).collect();
        let vals = entries.iter().map(|e| e.2).collect();
        Self { n, row_ptr, cols, vals }
    }

    #[inline]
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.cols[span.clone()], &self.vals[span])
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        for r in 0..self.n {
            let (cols, vals) = self.row(r);
            y[r] = cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum();
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec(x, &mut y);
        y
    }

    pub fn transpose(&self) -> CsrMatrix {
        let nnz = self.vals.len();
        let mut row_ptr = vec![0usize; self.n + 1];
        for &c in &self.cols {
            row_ptr[c + 1] += 1;
        }
        for k in 0..self.n {
            row_ptr[k + 1] += row_ptr[k];
        }
        let mut cols = vec![0usize; nnz];
        let mut vals = vec![0.0; nnz];
        let mut next = row_ptr.clone();
        for r in 0..self.n {
            let (rc, rv) = self.row(r);
            for (&c, &v) in rc.iter().zip(rv) {
                let slot = next[c];
                cols[slot] = r;
                vals[slot] = v;
                next[c] += 1;
            }
        }
        Self { n: self.n, row_ptr, cols, vals }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|r| {
                let (cols, vals) = self.row(r);
                cols.iter()
                    .zip(vals)
                    .find_map(|(&c, &v)| (c == r).then_some(v))
                    .unwrap_or(0.0)
            })
            .collect()
    }

    /// Entrywise difference self - other as a CSR matrix (union sparsity).
    pub fn sub(&self, other: &CsrMatrix) -> CsrMatrix {
        assert_eq!(self.n, other.n);
        let mut entries = Vec::new();
        for r in 0..self.n {
            let (ac, av) = self.row(r);
            let (bc, bv) = other.row(r);
            let (mut ia, mut ib) = (0, 0);
            while ia < ac.len() || ib < bc.len() {
                let ca = ac.get(ia).copied().unwrap_or(usize::MAX);
                let cb = bc.get(ib).copied().unwrap_or(usize::MAX);
                if ca < cb {
                    entries.push((r, ca, av[ia]));
                    ia += 1;
                } else if cb < ca {
                    entries.push((r, cb, -bv[ib]));
                    ib += 1;
                } else {
                    entries.push((r, ca, av[ia] - bv[ib]));
                    ia += 1;
                    ib += 1;
                }
            }
        }
        CsrMatrix::from_sorted_entries(self.n, &entries)
    }

    pub fn max_bandwidth(&self) -> usize {
        let (kl, ku) = self.bandwidths();
        kl.max(ku)
    }

    /// (kl, ku): widest sub- and super-diagonal offsets with a stored entry.
    pub fn bandwidths(&self) -> (usize, usize) {
        let (mut kl, mut ku) = (0usize, 0usize);
        for r in 0..self.n {
            let (cols, _) = self.row(r);
            for &c in cols {
                if c < r {
                    kl = kl.max(r - c);
                } else {
                    ku = ku.max(c - r);
                }
            }
        }
        (kl, ku)
    }

    /// y[j] += sum_i a_ij x[i], the transpose action without materializing
    /// the transpose.
    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for r in 0..self.n {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                y[c] += v * x[r];
            }
        }
        y
    }
}

/// Open part of the boundary where Dirichlet data is imposed. Span values
/// restrict the side to an open parameter interval along its axis; side
/// endpoints (the corners) always stay on the Robin part.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Side {
    Left,
    Right,
    Bottom,
    Top,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Left, Side::Right, Side::Bottom, Side::Top];
}

#[derive(Clone, Copy, Debug)]
pub struct SideSpan {
    pub side: Side,
    /// Open interval in x (bottom/top) or y (left/right); `None` selects the
    /// whole open side.
    pub span: Option<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct BoundarySelection {
    pub sides: Vec<SideSpan>,
}

impl BoundarySelection {
    pub fn whole_boundary() -> Self {
        Self::of_sides(&Side::ALL)
    }

    pub fn of_sides(sides: &[Side]) -> Self {
        Self {
            sides: sides.iter().map(|&side| SideSpan { side, span: None }).collect(),
        }
    }

    /// Whether boundary node (i, j) carries Dirichlet data. Corners never do.
    pub fn contains_node(&self, grid: &Grid2D, i: usize, j: usize) -> bool {
        if grid.classify(i, j) != NodeClass::Boundary {
            return false;
        }
        self.sides.iter().any(|ss| {
            let (on_side, t) = match ss.side {
                Side::Left => (i == 1, grid.y(j)),
                Side::Right => (i == grid.nx, grid.y(j)),
                Side::Bottom => (j == 1, grid.x(i)),
                Side::Top => (j == grid.ny, grid.x(i)),
            };
            on_side && ss.span.is_none_or(|(a, b)| t > a && t < b)
        })
    }

    pub fn is_empty_on(&self, grid: &Grid2D) -> bool {
        for i in 1..=grid.nx {
            if self.contains_node(grid, i, 1) || self.contains_node(grid, i, grid.ny) {
                return false;
            }
        }
        for j in 1..=grid.ny {
            if self.contains_node(grid, 1, j) || self.contains_node(grid, grid.nx, j) {
                return false;
            }
        }
        true
    }
}

/// Per-row accumulator; rows have at most nine entries so a small vector
/// with a merge pass beats a map.
struct RowAcc {
    row: usize,
    parts: Vec<(usize, f64)>,
}

impl RowAcc {
    fn new(row: usize) -> Self {
        Self { row, parts: Vec::with_capacity(9) }
    }

    #[inline]
    fn add(&mut self, col: usize, v: f64) {
        self.parts.push((col, v));
    }

    /// Merge duplicate columns, drop exact-zero off-diagonals, keep the
    /// diagonal unconditionally.
    fn flush(mut self, entries: &mut Vec<(usize, usize, f64)>) {
        self.parts.sort_unstable_by_key(|p| p.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(self.parts.len());
        for (c, v) in self.parts {
            match merged.last_mut() {
                Some(last) if last.0 == c => last.1 += v,
                _ => merged.push((c, v)),
            }
        }
        let mut has_diag = false;
        for (c, v) in merged {
            if c == self.row {
                has_diag = true;
                entries.push((self.row, c, v));
            } else if v != 0.0 {
                entries.push((self.row, c, v));
            }
        }
        if !has_diag {
            // Keep structural diagonals so factorization and WDD scans can
            // assume one per row.
            let pos = entries
                .iter()
                .rposition(|&(r, c, _)| r == self.row && c < self.row)
                .map(|p| p + 1)
                .unwrap_or_else(|| {
                    entries
                        .iter()
                        .position(|&(r, _, _)| r == self.row)
                        .unwrap_or(entries.len())
                });
            entries.insert(pos, (self.row, self.row, 0.0));
        }
    }
}

#[inline]
fn axis_dist(grid: &Grid2D, a: (usize, usize), b: (usize, usize)) -> (f64, f64) {
    let di = a.0.abs_diff(b.0) as f64;
    let dj = a.1.abs_diff(b.1) as f64;
    (
        di * grid.dx * grid.dx + dj * grid.dy * grid.dy,
        di * grid.dx + dj * grid.dy,
    )
}

/// Robin row shared by every isotropic system: u + ell nu . D grad(u) with
/// one-sided fluxes. Non-corner rows couple only to the inward (interior)
/// neighbor; corner rows weight both one-sided fluxes by sqrt2 ell / 2.
fn robin_row_isotropic(
    grid: &Grid2D,
    d: &EdgeField,
    ell: f64,
    i: usize,
    j: usize,
    acc: &mut RowAcc,
) {
    let here = grid.index(i, j);
    let mut diag = 1.0;
    match grid.classify(i, j) {
        NodeClass::Boundary => {
            for (i2, j2) in grid.neighbors(i, j) {
                if grid.classify(i2, j2) != NodeClass::Interior {
                    continue;
                }
                let (_, dist1) = axis_dist(grid, (i, j), (i2, j2));
                let w = ell * d.between((i, j), (i2, j2)) / dist1;
                diag += w;
                acc.add(grid.index(i2, j2), -w);
            }
        }
        NodeClass::Corner => {
            let half_sqrt2 = std::f64::consts::SQRT_2 / 2.0;
            for (i2, j2) in grid.neighbors(i, j) {
                let (_, dist1) = axis_dist(grid, (i, j), (i2, j2));
                let w = half_sqrt2 * ell * d.between((i, j), (i2, j2)) / dist1;
                diag += w;
                acc.add(grid.index(i2, j2), -w);
            }
        }
        NodeClass::Interior => unreachable!("robin row requested for interior node"),
    }
    acc.add(here, diag);
}

fn isotropic_samples(sampled: &SampledFields) -> Result<&EdgeField> {
    match &sampled.diffusion {
        SampledDiffusion::Isotropic(d) => Ok(d),
        SampledDiffusion::Anisotropic(_) => Err(Error::Assembly(
            "tensor diffusion passed to the scalar assembly; use the anisotropic path".into(),
        )),
    }
}

/// Matrix of the forward problem: interior rows carry the five-point
/// -div(D grad) + sigma_a stencil, boundary rows the Robin condition.
pub fn assemble_forward_matrix(
    grid: Grid2D,
    sampled: &SampledFields,
    ell: f64,
) -> Result<SparseSystem> {
    let d = isotropic_samples(sampled)?;
    let n = grid.n();
    let mut entries = Vec::with_capacity(5 * n);
    for k in 0..n {
        let (i, j) = grid.inverse_index(k);
        let mut acc = RowAcc::new(k);
        match grid.classify(i, j) {
            NodeClass::Interior => {
                let mut diag = sampled.sigma.get(i, j);
                for (i2, j2) in grid.neighbors(i, j) {
                    let (dist2, _) = axis_dist(&grid, (i, j), (i2, j2));
                    let w = d.between((i, j), (i2, j2)) / dist2;
                    diag += w;
                    acc.add(grid.index(i2, j2), -w);
                }
                acc.add(k, diag);
            }
            _ => robin_row_isotropic(&grid, d, ell, i, j, &mut acc),
        }
        acc.flush(&mut entries);
    }
    Ok(SparseSystem { n, entries, rhs: vec![0.0; n], kind: SystemKind::Forward })
}

/// Matrix of the internal-data problem, weighted by a positive adjoint
/// field psi. Interior off-diagonal for neighbor (i', j'):
/// D_half (psi_ij + (2 gamma - 1)/2 (psi_i'j' - psi_ij)) / dist^2,
/// diagonal minus the sum of those plus 2 gamma sigma_ij psi_ij.
/// Boundary rows equal the forward Robin rows.
pub fn assemble_internal_matrix(
    grid: Grid2D,
    sampled: &SampledFields,
    psi: &NodeField,
    gamma: f64,
    ell: f64,
) -> Result<SparseSystem> {
    let d = isotropic_samples(sampled)?;
    for k in 0..grid.n() {
        if psi.values[k] <= 0.0 {
            let (i, j) = grid.inverse_index(k);
            return Err(Error::NonPositiveAdjoint { i, j, value: psi.values[k] });
        }
    }
    let n = grid.n();
    let mut entries = Vec::with_capacity(5 * n);
    let half_shift = 0.5 * (2.0 * gamma - 1.0);
    for k in 0..n {
        let (i, j) = grid.inverse_index(k);
        let mut acc = RowAcc::new(k);
        match grid.classify(i, j) {
            NodeClass::Interior => {
                let p = psi.get(i, j);
                let mut neighbor_sum = 0.0;
                for (i2, j2) in grid.neighbors(i, j) {
                    let (dist2, _) = axis_dist(&grid, (i, j), (i2, j2));
                    let w = d.between((i, j), (i2, j2)) * (p + half_shift * (psi.get(i2, j2) - p))
                        / dist2;
                    neighbor_sum += w;
                    acc.add(grid.index(i2, j2), w);
                }
                acc.add(k, -neighbor_sum + 2.0 * gamma * sampled.sigma.get(i, j) * p);
            }
            _ => robin_row_isotropic(&grid, d, ell, i, j, &mut acc),
        }
        acc.flush(&mut entries);
    }
    Ok(SparseSystem { n, entries, rhs: vec![0.0; n], kind: SystemKind::Internal })
}

/// Mixed-boundary adjoint system: Dirichlet rows (value f) on the selected
/// open boundary part, zero-data Robin rows on the rest of the boundary,
/// forward interior rows with no source.
pub fn assemble_mixed_adjoint(
    grid: Grid2D,
    sampled: &SampledFields,
    gamma_set: &BoundarySelection,
    f: &NodeField,
    ell: f64,
) -> Result<SparseSystem> {
    let d = isotropic_samples(sampled)?;
    if gamma_set.is_empty_on(&grid) {
        return Err(Error::Assembly(
            "Dirichlet boundary selection contains no nodes".into(),
        ));
    }
    let n = grid.n();
    let mut entries = Vec::with_capacity(5 * n);
    let mut rhs = vec![0.0; n];
    for k in 0..n {
        let (i, j) = grid.inverse_index(k);
        let mut acc = RowAcc::new(k);
        match grid.classify(i, j) {
            NodeClass::Interior => {
                let mut diag = sampled.sigma.get(i, j);
                for (i2, j2) in grid.neighbors(i, j) {
                    let (dist2, _) = axis_dist(&grid, (i, j), (i2, j2));
                    let w = d.between((i, j), (i2, j2)) / dist2;
                    diag += w;
                    acc.add(grid.index(i2, j2), -w);
                }
                acc.add(k, diag);
            }
            _ if gamma_set.contains_node(&grid, i, j) => {
                let fv = f.get(i, j);
                if fv <= 0.0 {
                    return Err(Error::Assembly(format!(
                        "Dirichlet data must be positive, got {fv} at ({i}, {j})"
                    )));
                }
                acc.add(k, 1.0);
                rhs[k] = fv;
            }
            _ => robin_row_isotropic(&grid, d, ell, i, j, &mut acc),
        }
        acc.flush(&mut entries);
    }
    Ok(SparseSystem { n, entries, rhs, kind: SystemKind::MixedAdjoint })
}

/// Right-hand-side layouts. Source and internal data live on interior rows,
/// boundary data on boundary rows; the complementary rows are zero.
pub enum RhsKind<'a> {
    Source(&'a NodeField),
    Boundary(&'a NodeField),
    Internal(&'a NodeField),
}

pub fn assemble_rhs(grid: Grid2D, kind: RhsKind<'_>) -> Vec<f64> {
    let mut rhs = vec![0.0; grid.n()];
    for k in 0..grid.n() {
        let (i, j) = grid.inverse_index(k);
        let interior = grid.classify(i, j) == NodeClass::Interior;
        rhs[k] = match &kind {
            RhsKind::Source(s) if interior => s.values[k],
            RhsKind::Internal(h) if interior => h.values[k],
            RhsKind::Boundary(g) if !interior => g.values[k],
            _ => 0.0,
        };
    }
    rhs
}

fn tensor_samples(sampled: &SampledFields) -> Result<&SampledTensor> {
    match &sampled.diffusion {
        SampledDiffusion::Anisotropic(t) => Ok(t),
        SampledDiffusion::Isotropic(_) => Err(Error::Assembly(
            "scalar diffusion passed to the anisotropic assembly; use the scalar path".into(),
        )),
    }
}

/// Nine-point assembly for tensor diffusion. The normal-direction fluxes
/// live at half-points as in the scalar scheme; the tangential derivative
/// at a half-point is the average of the two adjacent node-centered
/// differences, which interior rows can always form without ghosts. With
/// `internal` given, the interior rows become the psi-weighted
/// internal-data operator instead of the forward operator.
///
/// Boundary rows discretize u + ell nu . (D grad u) with the full tensor
/// flux, one-sided in the normal direction; the tangential part is centered
/// except at corners, where it is one-sided toward the domain.
pub fn assemble_anisotropic(
    grid: Grid2D,
    sampled: &SampledFields,
    ell: f64,
    internal: Option<(&NodeField, f64)>,
) -> Result<SparseSystem> {
    let t = tensor_samples(sampled)?;
    for v in &t.at_nodes {
        if v.eig_min() <= 0.0 {
            return Err(Error::Assembly(
                "tensor diffusion is not positive definite at a node".into(),
            ));
        }
    }
    if let Some((psi, _)) = internal {
        for k in 0..grid.n() {
            if psi.values[k] <= 0.0 {
                let (i, j) = grid.inverse_index(k);
                return Err(Error::NonPositiveAdjoint { i, j, value: psi.values[k] });
            }
        }
    }
    let n = grid.n();
    let (dx, dy) = (grid.dx, grid.dy);
    let mut entries = Vec::with_capacity(9 * n);
    for k in 0..n {
        let (i, j) = grid.inverse_index(k);
        let mut acc = RowAcc::new(k);
        match grid.classify(i, j) {
            NodeClass::Interior => {
                let idx = |ii: usize, jj: usize| grid.index(ii, jj);
                let (d11p, d12p) = (t.d11_x.x_edge(i, j), t.d12_x.x_edge(i, j));
                let (d11m, d12m) = (t.d11_x.x_edge(i - 1, j), t.d12_x.x_edge(i - 1, j));
                let (d21p, d22p) = (t.d12_y.y_edge(i, j), t.d22_y.y_edge(i, j));
                let (d21m, d22m) = (t.d12_y.y_edge(i, j - 1), t.d22_y.y_edge(i, j - 1));

                // f * div(D grad u): x-fluxes at (i +- 1/2, j), y-fluxes at
                // (i, j +- 1/2), each with the averaged tangential term.
                let add_div = |acc: &mut RowAcc, f: f64| {
                    let cx = f / dx;
                    acc.add(idx(i + 1, j), cx * d11p / dx);
                    acc.add(k, -cx * d11p / dx);
                    let t4 = cx * d12p / (4.0 * dy);
                    acc.add(idx(i + 1, j + 1), t4);
                    acc.add(idx(i, j + 1), t4);
                    acc.add(idx(i, j - 1), -t4);
                    acc.add(idx(i + 1, j - 1), -t4);

                    acc.add(k, -cx * d11m / dx);
                    acc.add(idx(i - 1, j), cx * d11m / dx);
                    let t4 = cx * d12m / (4.0 * dy);
                    acc.add(idx(i, j + 1), -t4);
                    acc.add(idx(i - 1, j + 1), -t4);
                    acc.add(idx(i - 1, j - 1), t4);
                    acc.add(idx(i, j - 1), t4);

                    let cy = f / dy;
                    acc.add(idx(i, j + 1), cy * d22p / dy);
                    acc.add(k, -cy * d22p / dy);
                    let t4 = cy * d21p / (4.0 * dx);
                    acc.add(idx(i + 1, j + 1), t4);
                    acc.add(idx(i + 1, j), t4);
                    acc.add(idx(i - 1, j), -t4);
                    acc.add(idx(i - 1, j + 1), -t4);

                    acc.add(k, -cy * d22m / dy);
                    acc.add(idx(i, j - 1), cy * d22m / dy);
                    let t4 = cy * d21m / (4.0 * dx);
                    acc.add(idx(i + 1, j), -t4);
                    acc.add(idx(i + 1, j - 1), -t4);
                    acc.add(idx(i - 1, j - 1), t4);
                    acc.add(idx(i - 1, j), t4);
                };

                match internal {
                    None => {
                        add_div(&mut acc, -1.0);
                        acc.add(k, sampled.sigma.get(i, j));
                    }
                    Some((psi, gamma)) => {
                        let p = psi.get(i, j);
                        add_div(&mut acc, p);
                        // (2 gamma - 1) D grad(psi) . grad(u): flux of psi at
                        // the four half-points times one-sided u-differences,
                        // averaged in opposing pairs.
                        let gx_p = d11p * (psi.get(i + 1, j) - p) / dx
                            + d12p
                                * (psi.get(i + 1, j + 1) + psi.get(i, j + 1)
                                    - psi.get(i, j - 1)
                                    - psi.get(i + 1, j - 1))
                                / (4.0 * dy);
                        let gx_m = d11m * (p - psi.get(i - 1, j)) / dx
                            + d12m
                                * (psi.get(i, j + 1) + psi.get(i - 1, j + 1)
                                    - psi.get(i - 1, j - 1)
                                    - psi.get(i, j - 1))
                                / (4.0 * dy);
                        let gy_p = d21p
                            * (psi.get(i + 1, j + 1) + psi.get(i + 1, j)
                                - psi.get(i - 1, j)
                                - psi.get(i - 1, j + 1))
                            / (4.0 * dx)
                            + d22p * (psi.get(i, j + 1) - p) / dy;
                        let gy_m = d21m
                            * (psi.get(i + 1, j) + psi.get(i + 1, j - 1)
                                - psi.get(i - 1, j - 1)
                                - psi.get(i - 1, j))
                            / (4.0 * dx)
                            + d22m * (p - psi.get(i, j - 1)) / dy;
                        let w = 2.0 * gamma - 1.0;
                        acc.add(idx(i + 1, j), w * gx_p / (2.0 * dx));
                        acc.add(k, -w * gx_p / (2.0 * dx));
                        acc.add(k, w * gx_m / (2.0 * dx));
                        acc.add(idx(i - 1, j), -w * gx_m / (2.0 * dx));
                        acc.add(idx(i, j + 1), w * gy_p / (2.0 * dy));
                        acc.add(k, -w * gy_p / (2.0 * dy));
                        acc.add(k, w * gy_m / (2.0 * dy));
                        acc.add(idx(i, j - 1), -w * gy_m / (2.0 * dy));
                        acc.add(k, 2.0 * gamma * sampled.sigma.get(i, j) * p);
                    }
                }
            }
            _ => robin_row_anisotropic(&grid, t, ell, i, j, &mut acc),
        }
        acc.flush(&mut entries);
    }
    let kind = if internal.is_some() { SystemKind::Internal } else { SystemKind::Forward };
    Ok(SparseSystem { n, entries, rhs: vec![0.0; n], kind })
}

/// Tensor Robin row u + ell nu . (D grad u): one-sided normal derivative at
/// the adjacent half-point, tangential derivative centered on sides and
/// one-sided toward the domain at corners. For a diagonal tensor this
/// reduces exactly to the scalar Robin rows.
fn robin_row_anisotropic(
    grid: &Grid2D,
    t: &SampledTensor,
    ell: f64,
    i: usize,
    j: usize,
    acc: &mut RowAcc,
) {
    let (nx, ny) = (grid.nx, grid.ny);
    let (dx, dy) = (grid.dx, grid.dy);
    let idx = |ii: usize, jj: usize| grid.index(ii, jj);
    let mut nu_x = if i == 1 {
        -1.0
    } else if i == nx {
        1.0
    } else {
        0.0
    };
    let mut nu_y = if j == 1 {
        -1.0
    } else if j == ny {
        1.0
    } else {
        0.0
    };
    if nu_x != 0.0 && nu_y != 0.0 {
        let s = std::f64::consts::SQRT_2 / 2.0;
        nu_x *= s;
        nu_y *= s;
    }
    acc.add(idx(i, j), 1.0);

    if nu_x != 0.0 {
        // x-flux (D grad u)_1 at the inward x half-point.
        let ei = if i == 1 { 1 } else { nx - 1 };
        let (d11, d12) = (t.d11_x.x_edge(ei, j), t.d12_x.x_edge(ei, j));
        let f = ell * nu_x;
        acc.add(idx(ei + 1, j), f * d11 / dx);
        acc.add(idx(ei, j), -f * d11 / dx);
        if j > 1 && j < ny {
            let t4 = f * d12 / (4.0 * dy);
            acc.add(idx(ei, j + 1), t4);
            acc.add(idx(ei + 1, j + 1), t4);
            acc.add(idx(ei, j - 1), -t4);
            acc.add(idx(ei + 1, j - 1), -t4);
        } else {
            let (jl, jh) = if j == 1 { (1, 2) } else { (ny - 1, ny) };
            let t2 = f * d12 / (2.0 * dy);
            acc.add(idx(ei, jh), t2);
            acc.add(idx(ei + 1, jh), t2);
            acc.add(idx(ei, jl), -t2);
            acc.add(idx(ei + 1, jl), -t2);
        }
    }
    if nu_y != 0.0 {
        // y-flux (D grad u)_2 at the inward y half-point.
        let ej = if j == 1 { 1 } else { ny - 1 };
        let (d21, d22) = (t.d12_y.y_edge(i, ej), t.d22_y.y_edge(i, ej));
        let f = ell * nu_y;
        acc.add(idx(i, ej + 1), f * d22 / dy);
        acc.add(idx(i, ej), -f * d22 / dy);
        if i > 1 && i < nx {
            let t4 = f * d21 / (4.0 * dx);
            acc.add(idx(i + 1, ej), t4);
            acc.add(idx(i + 1, ej + 1), t4);
            acc.add(idx(i - 1, ej), -t4);
            acc.add(idx(i - 1, ej + 1), -t4);
        } else {
            let (il, ih) = if i == 1 { (1, 2) } else { (nx - 1, nx) };
            let t2 = f * d21 / (2.0 * dx);
            acc.add(idx(ih, ej), t2);
            acc.add(idx(ih, ej + 1), t2);
            acc.add(idx(il, ej), -t2);
            acc.add(idx(il, ej + 1), -t2);
        }
    }
}
