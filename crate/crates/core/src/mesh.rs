//! Staggered-grid geometry on a rectangle.
//!
//! Solution unknowns and zeroth-order coefficients live at the grid nodes;
//! the diffusion coefficient and first-order fluxes live at edge midpoints
//! (half-points), which is what makes the scheme staggered. Nodes use
//! 1-based indices (i, j) with i along x and j along y, vectorized by
//! I(i, j) = (i - 1) * Ny + j. Storage is 0-based; every conversion goes
//! through [`Grid2D::index`] / [`Grid2D::inverse_index`].

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Partition of the nodes: interior, non-corner boundary, and the four
/// corners, which carry a diagonal outward normal in the Robin rows.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum NodeClass {
    Interior,
    Boundary,
    Corner,
}

/// Uniform tensor-product grid on [x_min, x_max] x [y_min, y_max].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid2D {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Node counts per axis, both >= 3 so at least one interior node exists.
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
}

impl Grid2D {
    pub fn new(
        x_min: f64,
        x_max: f64,
        y_min: f64,
        y_max: f64,
        nx: usize,
        ny: usize,
    ) -> Result<Self> {
        if !(x_max > x_min) || !(y_max > y_min) {
            return Err(Error::InvalidGrid(format!(
                "degenerate bounds [{x_min}, {x_max}] x [{y_min}, {y_max}]"
            )));
        }
        if nx < 3 || ny < 3 {
            return Err(Error::InvalidGrid(format!(
                "need at least 3 nodes per axis for an interior node, got {nx} x {ny}"
            )));
        }
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
            nx,
            ny,
            dx: (x_max - x_min) / (nx - 1) as f64,
            dy: (y_max - y_min) / (ny - 1) as f64,
        })
    }

    /// Square grid on [-1, 1]^2, the domain of all experiments.
    pub fn unit_square(n: usize) -> Result<Self> {
        Self::new(-1.0, 1.0, -1.0, 1.0, n, n)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.nx * self.ny
    }

    /// 0-based storage index of node (i, j); equals I(i, j) - 1 for the
    /// 1-based vectorization I(i, j) = (i - 1) * Ny + j.
    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(self.contains(i, j), "node ({i}, {j}) out of range");
        (i - 1) * self.ny + (j - 1)
    }

    /// Inverse of [`Self::index`], returning 1-based (i, j).
    #[inline]
    pub fn inverse_index(&self, k: usize) -> (usize, usize) {
        debug_assert!(k < self.n());
        (k / self.ny + 1, k % self.ny + 1)
    }

    #[inline]
    pub fn contains(&self, i: usize, j: usize) -> bool {
        (1..=self.nx).contains(&i) && (1..=self.ny).contains(&j)
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        self.x_min + (i - 1) as f64 * self.dx
    }

    #[inline]
    pub fn y(&self, j: usize) -> f64 {
        self.y_min + (j - 1) as f64 * self.dy
    }

    pub fn classify(&self, i: usize, j: usize) -> NodeClass {
        assert!(self.contains(i, j), "node ({i}, {j}) out of range");
        let on_x = i == 1 || i == self.nx;
        let on_y = j == 1 || j == self.ny;
        match (on_x, on_y) {
            (true, true) => NodeClass::Corner,
            (false, false) => NodeClass::Interior,
            _ => NodeClass::Boundary,
        }
    }

    /// Axis neighbors of (i, j) in the order x-, x+, y-, y+ (those that exist).
    pub fn neighbors(&self, i: usize, j: usize) -> impl Iterator<Item = (usize, usize)> {
        let candidates = [
            (i > 1).then(|| (i - 1, j)),
            (i < self.nx).then(|| (i + 1, j)),
            (j > 1).then(|| (i, j - 1)),
            (j < self.ny).then(|| (i, j + 1)),
        ];
        candidates.into_iter().flatten()
    }

    /// Integer refinement factors (fx, fy) if `self` is a nested refinement of
    /// `coarse` (same bounds, coarse nodes a subset of fine nodes).
    pub fn nesting_factors(&self, coarse: &Grid2D) -> Result<(usize, usize)> {
        let bounds_match = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs() + b.abs());
        if !(bounds_match(self.x_min, coarse.x_min)
            && bounds_match(self.x_max, coarse.x_max)
            && bounds_match(self.y_min, coarse.y_min)
            && bounds_match(self.y_max, coarse.y_max))
        {
            return Err(Error::NotNested("bounds differ".into()));
        }
        let (fi, ri) = ((self.nx - 1) / (coarse.nx - 1), (self.nx - 1) % (coarse.nx - 1));
        let (fj, rj) = ((self.ny - 1) / (coarse.ny - 1), (self.ny - 1) % (coarse.ny - 1));
        if ri != 0 || rj != 0 {
            return Err(Error::NotNested(format!(
                "{}x{} does not refine {}x{} by an integer factor",
                self.nx, self.ny, coarse.nx, coarse.ny
            )));
        }
        Ok((fi, fj))
    }
}

/// Scalar values at every grid node, vectorized through [`Grid2D::index`].
#[derive(Clone, Debug)]
pub struct NodeField {
    pub grid: Grid2D,
    pub values: Vec<f64>,
}

/// Norms used throughout: L2 and H1 are uniform-weight discrete norms
/// (weight dx*dy at every node, no boundary half-weights); the H1 gradient
/// part lives on the staggered edges as forward differences.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum NormKind {
    L2,
    H1,
    LInf,
}

impl NodeField {
    pub fn zeros(grid: Grid2D) -> Self {
        Self { grid, values: vec![0.0; grid.n()] }
    }

    pub fn from_values(grid: Grid2D, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.n(), "value count must match the grid");
        Self { grid, values }
    }

    /// Sample `f(x, y)` at every node. Errors on non-finite samples.
    pub fn from_fn(grid: Grid2D, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let mut values = vec![0.0; grid.n()];
        for i in 1..=grid.nx {
            for j in 1..=grid.ny {
                let (x, y) = (grid.x(i), grid.y(j));
                let v = f(x, y);
                if !v.is_finite() {
                    return Err(Error::NonFiniteSample { x, y });
                }
                values[grid.index(i, j)] = v;
            }
        }
        Ok(Self { grid, values })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.grid.index(i, j);
        self.values[k] = v;
    }

    pub fn norm(&self, kind: NormKind) -> f64 {
        let g = self.grid;
        let w = g.dx * g.dy;
        match kind {
            NormKind::L2 => (w * self.values.iter().map(|v| v * v).sum::<f64>()).sqrt(),
            NormKind::LInf => self.values.iter().fold(0.0, |m, v| m.max(v.abs())),
            NormKind::H1 => {
                let mut grad = 0.0;
                for j in 1..=g.ny {
                    for i in 1..g.nx {
                        let d = (self.get(i + 1, j) - self.get(i, j)) / g.dx;
                        grad += d * d;
                    }
                }
                for i in 1..=g.nx {
                    for j in 1..g.ny {
                        let d = (self.get(i, j + 1) - self.get(i, j)) / g.dy;
                        grad += d * d;
                    }
                }
                let l2 = self.values.iter().map(|v| v * v).sum::<f64>();
                (w * (l2 + grad)).sqrt()
            }
        }
    }

    /// Plain-text matrix dump: header `Nx Ny x_min x_max y_min y_max`, then
    /// Ny rows of Nx values (row j fixed, i varying).
    pub fn to_text(&self) -> String {
        let g = self.grid;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} {} {} {} {} {}",
            g.nx, g.ny, g.x_min, g.x_max, g.y_min, g.y_max
        );
        for j in 1..=g.ny {
            let mut row = String::new();
            for i in 1..=g.nx {
                if i > 1 {
                    row.push(' ');
                }
                let _ = write!(row, "{:.17e}", self.get(i, j));
            }
            out.push_str(&row);
            out.push('\n');
        }
        out
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Values at the staggered half-points: `x_edges[(i-1)*ny + (j-1)]` sits at
/// (x_{i+1/2}, y_j) between nodes (i, j) and (i+1, j); `y_edges` analogously
/// at (x_i, y_{j+1/2}).
#[derive(Clone, Debug)]
pub struct EdgeField {
    pub grid: Grid2D,
    pub x_edges: Vec<f64>,
    pub y_edges: Vec<f64>,
}

impl EdgeField {
    /// Sample `f` directly at every half-point (no averaging from nodes).
    pub fn from_fn(grid: Grid2D, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let mut x_edges = vec![0.0; (grid.nx - 1) * grid.ny];
        let mut y_edges = vec![0.0; grid.nx * (grid.ny - 1)];
        for i in 1..grid.nx {
            for j in 1..=grid.ny {
                let (x, y) = (grid.x(i) + 0.5 * grid.dx, grid.y(j));
                let v = f(x, y);
                if !v.is_finite() {
                    return Err(Error::NonFiniteSample { x, y });
                }
                x_edges[(i - 1) * grid.ny + (j - 1)] = v;
            }
        }
        for i in 1..=grid.nx {
            for j in 1..grid.ny {
                let (x, y) = (grid.x(i), grid.y(j) + 0.5 * grid.dy);
                let v = f(x, y);
                if !v.is_finite() {
                    return Err(Error::NonFiniteSample { x, y });
                }
                y_edges[(i - 1) * (grid.ny - 1) + (j - 1)] = v;
            }
        }
        Ok(Self { grid, x_edges, y_edges })
    }

    /// Value at the half-point (x_{i+1/2}, y_j); `i` is the left node index.
    #[inline]
    pub fn x_edge(&self, i: usize, j: usize) -> f64 {
        debug_assert!((1..self.grid.nx).contains(&i) && (1..=self.grid.ny).contains(&j));
        self.x_edges[(i - 1) * self.grid.ny + (j - 1)]
    }

    /// Value at the half-point (x_i, y_{j+1/2}); `j` is the lower node index.
    #[inline]
    pub fn y_edge(&self, i: usize, j: usize) -> f64 {
        debug_assert!((1..=self.grid.nx).contains(&i) && (1..self.grid.ny).contains(&j));
        self.y_edges[(i - 1) * (self.grid.ny - 1) + (j - 1)]
    }

    /// Half-point value between two axis-neighboring nodes, either order.
    #[inline]
    pub fn between(&self, a: (usize, usize), b: (usize, usize)) -> f64 {
        let ((i1, j1), (i2, j2)) = (a, b);
        if j1 == j2 {
            self.x_edge(i1.min(i2), j1)
        } else {
            debug_assert_eq!(i1, i2, "nodes must be axis neighbors");
            self.y_edge(i1, j1.min(j2))
        }
    }
}

/// Injection onto a nested coarse grid: the coarse value at each node is the
/// fine value at the coinciding node.
pub fn restrict_to_coarse(fine: &NodeField, coarse: Grid2D) -> Result<NodeField> {
    let (fi, fj) = fine.grid.nesting_factors(&coarse)?;
    let mut out = NodeField::zeros(coarse);
    for i in 1..=coarse.nx {
        for j in 1..=coarse.ny {
            out.set(i, j, fine.get((i - 1) * fi + 1, (j - 1) * fj + 1));
        }
    }
    Ok(out)
}
