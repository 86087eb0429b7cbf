// Dense reference operators for the staggered scheme, written straight from
// the closed-form row tables with one branch per node class. Nothing here is
// shared with the sparse assembly path: indices, coordinates, half-point
// evaluation, and every entry formula are spelled out again so the two
// constructions can disagree.

// Each integration-test target compiles this module separately and uses a
// different subset of it.
#![allow(dead_code)]

use umblt_core::assembly::SparseSystem;
use umblt_core::mesh::Grid2D;

/// Vectorization used by the reference rows: 0-based k = (i-1)*ny + (j-1)
/// for 1-based node coordinates (i, j).
pub fn node_index(grid: &Grid2D, i: usize, j: usize) -> usize {
    (i - 1) * grid.ny + (j - 1)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Interior,
    Boundary,
    Corner,
}

fn class(grid: &Grid2D, i: usize, j: usize) -> Class {
    let edge_i = i == 1 || i == grid.nx;
    let edge_j = j == 1 || j == grid.ny;
    match (edge_i, edge_j) {
        (true, true) => Class::Corner,
        (false, false) => Class::Interior,
        _ => Class::Boundary,
    }
}

fn axis_neighbors(grid: &Grid2D, i: usize, j: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(4);
    if i > 1 {
        out.push((i - 1, j));
    }
    if i < grid.nx {
        out.push((i + 1, j));
    }
    if j > 1 {
        out.push((i, j - 1));
    }
    if j < grid.ny {
        out.push((i, j + 1));
    }
    out
}

/// Diffusion at the half-point between the axis neighbors (i, j), (ii, jj).
fn d_half(grid: &Grid2D, d: &dyn Fn(f64, f64) -> f64, i: usize, j: usize, ii: usize, jj: usize) -> f64 {
    if j == jj {
        let left = i.min(ii);
        let x = grid.x_min + (left - 1) as f64 * grid.dx + 0.5 * grid.dx;
        let y = grid.y_min + (j - 1) as f64 * grid.dy;
        d(x, y)
    } else {
        let low = j.min(jj);
        let x = grid.x_min + (i - 1) as f64 * grid.dx;
        let y = grid.y_min + (low - 1) as f64 * grid.dy + 0.5 * grid.dy;
        d(x, y)
    }
}

/// Robin boundary row shared by every operator: diagonal 1 plus the scaled
/// one-sided flux couplings. Non-corner rows couple only to the interior
/// neighbor with weight ell; corner rows couple to both boundary neighbors
/// with weight sqrt(2) * ell / 2.
fn robin_row(
    grid: &Grid2D,
    d: &dyn Fn(f64, f64) -> f64,
    ell: f64,
    i: usize,
    j: usize,
    row: &mut [f64],
) {
    let r = node_index(grid, i, j);
    let corner = class(grid, i, j) == Class::Corner;
    let weight = if corner { std::f64::consts::SQRT_2 * ell / 2.0 } else { ell };
    let mut diag = 1.0;
    for (ii, jj) in axis_neighbors(grid, i, j) {
        if !corner && class(grid, ii, jj) != Class::Interior {
            continue;
        }
        let dh = d_half(grid, d, i, j, ii, jj);
        let denom = (i.abs_diff(ii)) as f64 * grid.dx + (j.abs_diff(jj)) as f64 * grid.dy;
        row[node_index(grid, ii, jj)] = -weight * dh / denom;
        diag += weight * dh / denom;
    }
    row[r] = diag;
}

/// Dense forward operator: sigma - div(D grad) in the interior, Robin rows
/// on the boundary. Row-major n x n.
pub fn dense_forward(
    grid: &Grid2D,
    d: &dyn Fn(f64, f64) -> f64,
    sigma: &dyn Fn(f64, f64) -> f64,
    ell: f64,
) -> Vec<f64> {
    let n = grid.nx * grid.ny;
    let mut a = vec![0.0; n * n];
    for i in 1..=grid.nx {
        for j in 1..=grid.ny {
            let r = node_index(grid, i, j);
            let row = &mut a[r * n..(r + 1) * n];
            if class(grid, i, j) != Class::Interior {
                robin_row(grid, d, ell, i, j, row);
                continue;
            }
            let x = grid.x_min + (i - 1) as f64 * grid.dx;
            let y = grid.y_min + (j - 1) as f64 * grid.dy;
            let mut diag = sigma(x, y);
            for (ii, jj) in axis_neighbors(grid, i, j) {
                let dh = d_half(grid, d, i, j, ii, jj);
                let denom = (i.abs_diff(ii)) as f64 * grid.dx * grid.dx
                    + (j.abs_diff(jj)) as f64 * grid.dy * grid.dy;
                row[node_index(grid, ii, jj)] = -dh / denom;
                diag += dh / denom;
            }
            row[r] = diag;
        }
    }
    a
}

/// Dense internal-data operator: the psi-weighted product-rule rows in the
/// interior (positive off-diagonals, diagonal 2 gamma sigma psi minus the
/// neighbor sum), Robin rows on the boundary identical to the forward ones.
/// `psi` is indexed by [`node_index`].
pub fn dense_internal(
    grid: &Grid2D,
    d: &dyn Fn(f64, f64) -> f64,
    sigma: &dyn Fn(f64, f64) -> f64,
    psi: &[f64],
    gamma: f64,
    ell: f64,
) -> Vec<f64> {
    let n = grid.nx * grid.ny;
    let mut a = vec![0.0; n * n];
    for i in 1..=grid.nx {
        for j in 1..=grid.ny {
            let r = node_index(grid, i, j);
            let row = &mut a[r * n..(r + 1) * n];
            if class(grid, i, j) != Class::Interior {
                robin_row(grid, d, ell, i, j, row);
                continue;
            }
            let x = grid.x_min + (i - 1) as f64 * grid.dx;
            let y = grid.y_min + (j - 1) as f64 * grid.dy;
            let psi_ij = psi[r];
            let mut diag = 2.0 * gamma * sigma(x, y) * psi_ij;
            for (ii, jj) in axis_neighbors(grid, i, j) {
                let c = node_index(grid, ii, jj);
                let dh = d_half(grid, d, i, j, ii, jj);
                let denom = (i.abs_diff(ii)) as f64 * grid.dx * grid.dx
                    + (j.abs_diff(jj)) as f64 * grid.dy * grid.dy;
                let coupling = dh * (psi_ij + 0.5 * (2.0 * gamma - 1.0) * (psi[c] - psi_ij)) / denom;
                row[c] = coupling;
                diag -= coupling;
            }
            row[r] = diag;
        }
    }
    a
}

/// Densify an assembled system for entrywise comparison.
pub fn sparse_to_dense(sys: &SparseSystem) -> Vec<f64> {
    let n = sys.n;
    let mut a = vec![0.0; n * n];
    for &(r, c, v) in &sys.entries {
        a[r * n + c] += v;
    }
    a
}

/// Largest entrywise deviation relative to max(1, |a|, |b|).
pub fn max_rel_gap(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / 1.0_f64.max(x.abs()).max(y.abs()))
        .fold(0.0, f64::max)
}
