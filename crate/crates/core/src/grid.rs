//! Periodic grids on the unit flat torus and the scalar fields that live on them.
//!
//! The torus side length is fixed to 1. A grid of `n` nodes per axis has
//! spacing `1/n` and node `i` sits at coordinate `i / n`. Fields are stored
//! row-major with axis 0 fastest.

use std::f64::consts::PI;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A point (or covector, or velocity) on the torus. Unused axes of a 1-D
/// problem stay at zero.
pub type Point = [f64; 2];

#[derive(Debug, Error)]
pub enum GridError {
    #[error("unsupported dimension {0}: only 1 and 2 are supported")]
    Dimension(usize),
    #[error("grid needs at least 4 nodes per axis, got {0}")]
    TooFewNodes(usize),
    #[error("value table has {got} entries, grid expects {expected}")]
    Length { expected: usize, got: usize },
    #[error("non-finite value {value} at node {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("grid mismatch: {left:?} vs {right:?}")]
    Mismatch {
        left: PeriodicGrid,
        right: PeriodicGrid,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed csv: {0}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PeriodicGrid {
    dim: usize,
    nodes_per_axis: usize,
}

impl PeriodicGrid {
    pub fn new(dim: usize, nodes_per_axis: usize) -> Result<Self, GridError> {
        if !(1..=2).contains(&dim) {
            return Err(GridError::Dimension(dim));
        }
        if nodes_per_axis < 4 {
            return Err(GridError::TooFewNodes(nodes_per_axis));
        }
        Ok(Self {
            dim,
            nodes_per_axis,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.nodes_per_axis
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.nodes_per_axis as f64
    }

    /// Total number of nodes, `nodes_per_axis^dim`.
    pub fn len(&self) -> usize {
        self.nodes_per_axis.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn coords(&self, index: usize) -> [usize; 2] {
        let n = self.nodes_per_axis;
        match self.dim {
            1 => [index, 0],
            _ => [index % n, index / n],
        }
    }

    pub fn index(&self, coords: [usize; 2]) -> usize {
        match self.dim {
            1 => coords[0],
            _ => coords[0] + self.nodes_per_axis * coords[1],
        }
    }

    /// Physical coordinates of a node.
    pub fn point(&self, index: usize) -> Point {
        let c = self.coords(index);
        let h = self.spacing();
        match self.dim {
            1 => [c[0] as f64 * h, 0.0],
            _ => [c[0] as f64 * h, c[1] as f64 * h],
        }
    }

    /// Neighbouring node along `axis`, wrapping periodically.
    pub fn neighbor(&self, index: usize, axis: usize, offset: isize) -> usize {
        let mut c = self.coords(index);
        let n = self.nodes_per_axis as isize;
        c[axis] = (c[axis] as isize + offset).rem_euclid(n) as usize;
        self.index(c)
    }

    /// Node closest to a physical point.
    pub fn nearest_node(&self, x: &Point) -> usize {
        let n = self.nodes_per_axis as f64;
        let mut c = [0usize; 2];
        for axis in 0..self.dim {
            let k = (x[axis] * n).round().rem_euclid(n);
            c[axis] = (k as usize) % self.nodes_per_axis;
        }
        self.index(c)
    }

    /// Multilinear interpolation stencil at a position given in cell units
    /// (node `i` at position `i`). Positions wrap periodically.
    pub fn stencil(&self, cells: &Point) -> Stencil {
        let n = self.nodes_per_axis;
        let mut lower = [0usize; 2];
        let mut frac = [0.0f64; 2];
        for axis in 0..self.dim {
            let wrapped = cells[axis].rem_euclid(n as f64);
            let base = wrapped.floor();
            let mut i0 = base as usize;
            let mut t = wrapped - base;
            if i0 >= n {
                // rem_euclid may round up to exactly n for tiny negative input
                i0 = 0;
                t = 0.0;
            }
            lower[axis] = i0;
            frac[axis] = t;
        }
        match self.dim {
            1 => {
                let i1 = (lower[0] + 1) % n;
                Stencil {
                    nodes: [lower[0], i1, 0, 0],
                    weights: [1.0 - frac[0], frac[0], 0.0, 0.0],
                    len: 2,
                }
            }
            _ => {
                let i1 = (lower[0] + 1) % n;
                let j1 = (lower[1] + 1) % n;
                let (tx, ty) = (frac[0], frac[1]);
                Stencil {
                    nodes: [
                        self.index([lower[0], lower[1]]),
                        self.index([i1, lower[1]]),
                        self.index([lower[0], j1]),
                        self.index([i1, j1]),
                    ],
                    weights: [
                        (1.0 - tx) * (1.0 - ty),
                        tx * (1.0 - ty),
                        (1.0 - tx) * ty,
                        tx * ty,
                    ],
                    len: 4,
                }
            }
        }
    }

    /// Signed shortest displacement from `a` to `b` along one periodic axis.
    pub fn axis_delta(a: f64, b: f64) -> f64 {
        let d = b - a;
        d - d.round()
    }

    /// Euclidean distance on the unit torus.
    pub fn torus_distance(&self, a: &Point, b: &Point) -> f64 {
        (0..self.dim)
            .map(|k| Self::axis_delta(a[k], b[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Max-metric distance on the unit torus.
    pub fn torus_distance_max(&self, a: &Point, b: &Point) -> f64 {
        (0..self.dim)
            .map(|k| Self::axis_delta(a[k], b[k]).abs())
            .fold(0.0, f64::max)
    }
}

/// Interpolation weights for one query point. Weights are nonnegative and
/// sum to one; a query exactly on a node has a single unit weight.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    pub nodes: [usize; 4],
    pub weights: [f64; 4],
    pub len: usize,
}

impl Stencil {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.nodes[..self.len]
            .iter()
            .copied()
            .zip(self.weights[..self.len].iter().copied())
    }

    /// Weighted sum of node values. Each product and partial sum is a
    /// nondecreasing function of the node values, so the result is exactly
    /// monotone in floating point.
    pub fn apply(&self, mut value: impl FnMut(usize) -> f64) -> f64 {
        let mut acc = self.weights[0] * value(self.nodes[0]);
        for k in 1..self.len {
            if self.weights[k] != 0.0 {
                acc += self.weights[k] * value(self.nodes[k]);
            }
        }
        acc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    grid: PeriodicGrid,
    values: Vec<f64>,
    barrier: Option<f64>,
}

impl GridFunction {
    pub fn new(grid: PeriodicGrid, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::Length {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(GridError::NonFinite { index, value });
        }
        Ok(Self {
            grid,
            values,
            barrier: None,
        })
    }

    /// A barrier-initialized field: values are finite, and `barrier` is the
    /// declared constant used for unreachable nodes.
    pub fn with_barrier(
        grid: PeriodicGrid,
        values: Vec<f64>,
        barrier: f64,
    ) -> Result<Self, GridError> {
        if !barrier.is_finite() {
            return Err(GridError::NonFinite {
                index: usize::MAX,
                value: barrier,
            });
        }
        let mut f = Self::new(grid, values)?;
        f.barrier = Some(barrier);
        Ok(f)
    }

    pub fn constant(grid: PeriodicGrid, value: f64) -> Result<Self, GridError> {
        Self::new(grid, vec![value; grid.len()])
    }

    pub fn from_fn(grid: PeriodicGrid, f: impl Fn(&Point) -> f64) -> Result<Self, GridError> {
        let values = (0..grid.len()).map(|i| f(&grid.point(i))).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn value(&self, index: usize) -> f64 {
        self.values[index]
    }

    pub fn barrier(&self) -> Option<f64> {
        self.barrier
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Builds a new field on the same grid, keeping the barrier flag.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self, GridError> {
        let mut f = Self::new(self.grid, values)?;
        f.barrier = self.barrier;
        Ok(f)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self, GridError> {
        self.with_values(self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_with(
        &self,
        other: &GridFunction,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self, GridError> {
        self.check_same_grid(other)?;
        self.with_values(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn check_same_grid(&self, other: &GridFunction) -> Result<(), GridError> {
        if self.grid != other.grid {
            return Err(GridError::Mismatch {
                left: self.grid,
                right: other.grid,
            });
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Value at a position given in cell units.
    pub fn interpolate_cells(&self, cells: &Point) -> f64 {
        self.grid.stencil(cells).apply(|i| self.values[i])
    }

    /// Multilinear periodic interpolation at a physical point.
    /// Positions within a few ulps of a node snap to it, so the value at
    /// `grid.point(i)` is exactly `value(i)`.
    pub fn interpolate(&self, x: &Point) -> f64 {
        let n = self.grid.nodes_per_axis as f64;
        let snap = |c: f64| {
            let r = c.round();
            if (c - r).abs() <= 8.0 * f64::EPSILON * n {
                r
            } else {
                c
            }
        };
        self.interpolate_cells(&[snap(x[0] * n), snap(x[1] * n)])
    }

    /// `max |f - g|` over nodes.
    pub fn sup_distance(&self, other: &GridFunction) -> Result<f64, GridError> {
        self.check_same_grid(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// `max (f - g)` over nodes; negative when `f < g` everywhere.
    pub fn max_excess(&self, other: &GridFunction) -> Result<f64, GridError> {
        self.check_same_grid(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(f64::NEG_INFINITY, |m, (a, b)| m.max(a - b)))
    }

    pub fn central_gradient(&self, index: usize) -> Point {
        let h = self.grid.spacing();
        let mut g = [0.0; 2];
        for (axis, slot) in g.iter_mut().enumerate().take(self.grid.dim) {
            let fwd = self.values[self.grid.neighbor(index, axis, 1)];
            let bwd = self.values[self.grid.neighbor(index, axis, -1)];
            *slot = (fwd - bwd) / (2.0 * h);
        }
        g
    }

    pub fn second_difference(&self, index: usize, axis: usize) -> f64 {
        let h = self.grid.spacing();
        let fwd = self.values[self.grid.neighbor(index, axis, 1)];
        let bwd = self.values[self.grid.neighbor(index, axis, -1)];
        (fwd - 2.0 * self.values[index] + bwd) / (h * h)
    }

    /// Marks nodes whose second differences are all `>= -kink_threshold`.
    /// Semiconcave fields have second differences bounded above, so a kink
    /// shows up as a large negative second difference.
    pub fn differentiability_screen(&self, kink_threshold: f64) -> Vec<bool> {
        (0..self.len())
            .map(|i| (0..self.grid.dim).all(|a| self.second_difference(i, a) >= -kink_threshold))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), GridError> {
        let mut w = csv::Writer::from_writer(writer);
        match self.grid.dim {
            1 => w.write_record(["index", "x", "value"])?,
            _ => w.write_record(["index", "x", "y", "value"])?,
        }
        for i in 0..self.len() {
            let x = self.grid.point(i);
            let mut row = vec![i.to_string(), fmt_real(x[0])];
            if self.grid.dim == 2 {
                row.push(fmt_real(x[1]));
            }
            row.push(fmt_real(self.values[i]));
            w.write_record(&row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads a field written by [`GridFunction::write_csv`]. The grid is
    /// inferred from the header and row count.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, GridError> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        let dim = match headers.iter().collect::<Vec<_>>().as_slice() {
            ["index", "x", "value"] => 1,
            ["index", "x", "y", "value"] => 2,
            other => return Err(GridError::Format(format!("unexpected header {other:?}"))),
        };
        let mut rows: Vec<(usize, f64)> = Vec::new();
        for record in r.records() {
            let record = record?;
            let index: usize = record[0]
                .parse()
                .map_err(|e| GridError::Format(format!("index: {e}")))?;
            let value: f64 = record[dim + 1]
                .parse()
                .map_err(|e| GridError::Format(format!("value: {e}")))?;
            rows.push((index, value));
        }
        let n = match dim {
            1 => rows.len(),
            _ => (rows.len() as f64).sqrt().round() as usize,
        };
        let grid = PeriodicGrid::new(dim, n)?;
        if grid.len() != rows.len() {
            return Err(GridError::Length {
                expected: grid.len(),
                got: rows.len(),
            });
        }
        let mut values = vec![f64::NAN; grid.len()];
        for (index, value) in rows {
            if index >= values.len() {
                return Err(GridError::Format(format!("index {index} out of range")));
            }
            values[index] = value;
        }
        Self::new(grid, values)
    }
}

/// Formats a real with 17 significant digits, locale independent.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

/// Default kink threshold: ten times the largest second difference of the
/// smooth reference field `sin(2*pi*x)` sampled on `grid`.
pub fn default_kink_threshold(grid: &PeriodicGrid) -> f64 {
    let h = grid.spacing();
    // exact second difference of sin(2 pi x): -(2 - 2 cos(2 pi h)) / h^2 * sin
    10.0 * (2.0 - 2.0 * (2.0 * PI * h).cos()) / (h * h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid1(n: usize) -> PeriodicGrid {
        PeriodicGrid::new(1, n).unwrap()
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(PeriodicGrid::new(3, 8).is_err());
        assert!(PeriodicGrid::new(1, 3).is_err());
        assert!(GridFunction::new(grid1(4), vec![0.0; 3]).is_err());
        assert!(GridFunction::new(grid1(4), vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn interpolation_examples() {
        let f = GridFunction::new(grid1(4), vec![0.0, 1.0, 0.0, -1.0]).unwrap();
        assert_eq!(f.interpolate(&[0.25, 0.0]), 1.0);
        assert_eq!(f.interpolate(&[0.125, 0.0]), 0.5);
        assert_eq!(f.interpolate(&[0.875, 0.0]), -0.5);
        for i in 0..4 {
            assert_eq!(f.interpolate_cells(&[i as f64, 0.0]), f.value(i));
        }
        // wrap from negative positions
        assert_eq!(f.interpolate_cells(&[-1.0, 0.0]), -1.0);
        assert_eq!(f.interpolate_cells(&[-0.5, 0.0]), -0.5);
    }

    #[test]
    fn bilinear_interpolation_is_exact_on_nodes() {
        let g = PeriodicGrid::new(2, 5).unwrap();
        let f = GridFunction::from_fn(g, |x| x[0] * 3.0 + (x[1] * 7.0).sin()).unwrap();
        for i in 0..g.len() {
            let c = g.coords(i);
            assert_eq!(f.interpolate_cells(&[c[0] as f64, c[1] as f64]), f.value(i));
        }
        // midpoint of a cell is the mean of its corners
        let mid = f.interpolate_cells(&[1.5, 2.5]);
        let corners = [[1, 2], [2, 2], [1, 3], [2, 3]].map(|c| f.value(g.index(c)));
        let mean = corners.iter().sum::<f64>() / 4.0;
        assert!((mid - mean).abs() < 1e-14);
    }

    #[test]
    fn sup_distance_examples() {
        let g = grid1(4);
        let f = GridFunction::new(g, vec![0.0, 2.0, 0.0, 0.0]).unwrap();
        let h = GridFunction::new(g, vec![0.0, 0.0, 0.0, -1.0]).unwrap();
        assert_eq!(f.sup_distance(&f).unwrap(), 0.0);
        assert_eq!(f.sup_distance(&h).unwrap(), 2.0);
        let one = GridFunction::constant(g, 1.0).unwrap();
        let zero = GridFunction::constant(g, 0.0).unwrap();
        assert_eq!(one.sup_distance(&zero).unwrap(), 1.0);
        let other = GridFunction::constant(grid1(8), 0.0).unwrap();
        assert!(matches!(
            one.sup_distance(&other),
            Err(GridError::Mismatch { .. })
        ));
    }

    #[test]
    fn central_gradient_of_sine() {
        let g = grid1(64);
        let f = GridFunction::from_fn(g, |x| (2.0 * PI * x[0]).sin()).unwrap();
        let d = f.central_gradient(0)[0];
        let h = g.spacing();
        // truncation error 2 pi (2 pi h)^2 / 6
        assert!((d - 2.0 * PI).abs() <= 2.0 * PI * (2.0 * PI * h).powi(2) / 6.0 * 1.01);
        let c = GridFunction::constant(g, 3.0).unwrap();
        assert_eq!(c.central_gradient(5), [0.0, 0.0]);
    }

    #[test]
    fn central_gradient_converges_at_second_order() {
        let err = |n: usize| {
            let g = grid1(n);
            let f = GridFunction::from_fn(g, |x| (2.0 * PI * x[0]).sin() + 0.5 * (4.0 * PI * x[0]).cos())
                .unwrap();
            (0..n)
                .map(|i| {
                    let x = g.point(i)[0];
                    let exact = 2.0 * PI * (2.0 * PI * x).cos() - 2.0 * PI * (4.0 * PI * x).sin();
                    (f.central_gradient(i)[0] - exact).abs()
                })
                .fold(0.0, f64::max)
        };
        let ratio = err(32) / err(64);
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn screen_examples() {
        let g = grid1(64);
        let smooth = GridFunction::from_fn(g, |x| (2.0 * PI * x[0]).sin()).unwrap();
        assert!(smooth.differentiability_screen(100.0).iter().all(|&ok| ok));
        let c = GridFunction::constant(g, 1.0).unwrap();
        assert!(c.differentiability_screen(1e-9).iter().all(|&ok| ok));
        // tent peaked at 0.5: the torus distance to the origin
        let tent = GridFunction::from_fn(g, |x| g.torus_distance(x, &[0.0, 0.0])).unwrap();
        let mask = tent.differentiability_screen(10.0);
        // second difference at the kink is -2/h
        assert!((tent.second_difference(32, 0) + 2.0 / g.spacing()).abs() < 1e-9);
        assert!(!mask[32]);
        assert_eq!(mask.iter().filter(|&&ok| !ok).count(), 1);
    }

    #[test]
    fn default_kink_threshold_matches_reference_field() {
        let g = grid1(64);
        let s = GridFunction::from_fn(g, |x| (2.0 * PI * x[0]).sin()).unwrap();
        let max_dd = (0..64).map(|i| s.second_difference(i, 0).abs()).fold(0.0, f64::max);
        assert!((default_kink_threshold(&g) - 10.0 * max_dd).abs() < 1e-6 * max_dd);
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        for g in [grid1(7), PeriodicGrid::new(2, 5).unwrap()] {
            let f = GridFunction::from_fn(g, |x| (x[0] * 13.1).sin() / 3.0 + x[1].exp()).unwrap();
            let mut buf = Vec::new();
            f.write_csv(&mut buf).unwrap();
            let text = String::from_utf8(buf.clone()).unwrap();
            assert!(text.starts_with(if g.dim() == 1 { "index,x,value" } else { "index,x,y,value" }));
            let back = GridFunction::read_csv(buf.as_slice()).unwrap();
            assert_eq!(back.grid(), f.grid());
            for (a, b) in back.values().iter().zip(f.values()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn torus_distance_wraps() {
        let g = PeriodicGrid::new(2, 8).unwrap();
        assert!((g.torus_distance(&[0.05, 0.0], &[0.95, 0.0]) - 0.1).abs() < 1e-12);
        assert!(g.torus_distance_max(&[0.0, 0.0], &[0.5, 0.5]) <= 0.5);
    }
}
