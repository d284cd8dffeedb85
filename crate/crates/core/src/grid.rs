//! Structured 1D/2D grids, nodal fields, interpolation and error norms.
//!
//! 2D fields are stored row-major with the y index varying fastest, so the
//! node `(i, j)` lives at `values[i * (n_y + 1) + j]`.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Uniform tensor-product grid on an axis-aligned box.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    lo: [f64; 2],
    hi: [f64; 2],
    n: [usize; 2],
}

impl Grid {
    pub fn new_1d(lo: f64, hi: f64, n: usize) -> Result<Self> {
        Self::new(&[lo], &[hi], &[n])
    }

    pub fn new_2d(lo: [f64; 2], hi: [f64; 2], n: [usize; 2]) -> Result<Self> {
        Self::new(&lo, &hi, &n)
    }

    /// The unit square (or interval) with `n` cells per axis.
    pub fn unit(dim: usize, n: usize) -> Result<Self> {
        match dim {
            1 => Self::new_1d(0.0, 1.0, n),
            2 => Self::new_2d([0.0; 2], [1.0; 2], [n; 2]),
            _ => Err(Error::invalid(format!("unsupported dimension {dim}"))),
        }
    }

    pub fn new(lo: &[f64], hi: &[f64], n: &[usize]) -> Result<Self> {
        let dim = lo.len();
        if !(1..=2).contains(&dim) || hi.len() != dim || n.len() != dim {
            return Err(Error::invalid("grid needs matching 1D or 2D bounds and counts"));
        }
        let mut grid = Grid {
            dim,
            lo: [0.0; 2],
            hi: [1.0; 2],
            n: [1; 2],
        };
        for axis in 0..dim {
            if !(hi[axis] > lo[axis]) || !lo[axis].is_finite() || !hi[axis].is_finite() {
                return Err(Error::invalid(format!(
                    "axis {axis}: need finite hi > lo, got [{}, {}]",
                    lo[axis], hi[axis]
                )));
            }
            // n = 1 is admitted for single-cell interpolation tables; solvers ask for n >= 2.
            if n[axis] < 1 {
                return Err(Error::invalid(format!("axis {axis}: cell count must be positive")));
            }
            grid.lo[axis] = lo[axis];
            grid.hi[axis] = hi[axis];
            grid.n[axis] = n[axis];
        }
        Ok(grid)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lo(&self, axis: usize) -> f64 {
        self.lo[axis]
    }

    pub fn hi(&self, axis: usize) -> f64 {
        self.hi[axis]
    }

    /// Cell count along `axis`.
    pub fn cells(&self, axis: usize) -> usize {
        self.n[axis]
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / self.n[axis] as f64
    }

    /// Number of nodes along `axis`.
    pub fn nodes(&self, axis: usize) -> usize {
        self.n[axis] + 1
    }

    pub fn node_count(&self) -> usize {
        (0..self.dim).map(|a| self.nodes(a)).product()
    }

    pub fn coord(&self, axis: usize, k: usize) -> f64 {
        self.lo[axis] + k as f64 * self.spacing(axis)
    }

    /// Flat storage index of a node.
    pub fn index(&self, i: usize, j: usize) -> usize {
        if self.dim == 1 {
            i
        } else {
            i * self.nodes(1) + j
        }
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        if self.dim == 1 {
            vec![self.coord(0, flat)]
        } else {
            let ny = self.nodes(1);
            vec![self.coord(0, flat / ny), self.coord(1, flat % ny)]
        }
    }

    /// All node coordinates in storage order.
    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.node_count()).map(|k| self.node(k)).collect()
    }

    pub fn same_bounds(&self, other: &Grid) -> bool {
        self.dim == other.dim
            && (0..self.dim).all(|a| {
                let tol = 1e-12 * (self.hi[a] - self.lo[a]);
                (self.lo[a] - other.lo[a]).abs() <= tol && (self.hi[a] - other.hi[a]).abs() <= tol
            })
    }

    /// Checks that `x` lies in the box up to `1e-12 h` and returns the clamped point.
    pub fn check_point(&self, x: &[f64]) -> Result<[f64; 2]> {
        if x.len() != self.dim {
            return Err(Error::shape(format!(
                "point has {} coordinates, grid is {}D",
                x.len(),
                self.dim
            )));
        }
        let mut out = [0.0; 2];
        for axis in 0..self.dim {
            let tol = 1e-12 * self.spacing(axis);
            let v = x[axis];
            if !(v >= self.lo[axis] - tol && v <= self.hi[axis] + tol) {
                return Err(Error::Domain {
                    axis,
                    value: v,
                    lo: self.lo[axis],
                    hi: self.hi[axis],
                });
            }
            out[axis] = v.clamp(self.lo[axis], self.hi[axis]);
        }
        Ok(out)
    }

    /// Cell index and local coordinate of `v` on `axis`; `t` is exactly 0 or 1 on nodes.
    fn locate(&self, axis: usize, v: f64) -> (usize, f64) {
        let n = self.n[axis];
        let h = self.spacing(axis);
        let s = (v - self.lo[axis]) / h;
        let k = s.round();
        if k >= 0.0 && k <= n as f64 && (self.coord(axis, k as usize) == v || (k as usize == n && v == self.hi[axis])) {
            let k = k as usize;
            return if k == n { (n - 1, 1.0) } else { (k, 0.0) };
        }
        let i = (s.floor().max(0.0) as usize).min(n - 1);
        let t = (v - self.coord(axis, i)) / h;
        (i, t)
    }

    pub(crate) fn header(&self) -> String {
        let mut s = format!("# grid: {}", self.dim);
        for a in 0..self.dim {
            write!(s, ",{}", self.n[a]).unwrap();
        }
        for a in 0..self.dim {
            write!(s, ",{}", fmt_f64(self.lo[a])).unwrap();
        }
        for a in 0..self.dim {
            write!(s, ",{}", fmt_f64(self.hi[a])).unwrap();
        }
        s
    }

    pub(crate) fn parse_header(line: &str) -> Result<Grid> {
        let body = line
            .trim()
            .strip_prefix("# grid:")
            .ok_or_else(|| Error::Parse(format!("expected `# grid:` header, got `{line}`")))?;
        let parts: Vec<&str> = body.split(',').map(str::trim).collect();
        let dim: usize = parts
            .first()
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| Error::Parse("bad grid dimension".into()))?;
        if parts.len() != 1 + 3 * dim {
            return Err(Error::Parse(format!("grid header has {} fields", parts.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("{s}: {e}")));
        let mut n = Vec::new();
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for a in 0..dim {
            n.push(
                parts[1 + a]
                    .parse::<usize>()
                    .map_err(|e| Error::Parse(format!("{}: {e}", parts[1 + a])))?,
            );
            lo.push(num(parts[1 + dim + a])?);
            hi.push(num(parts[1 + 2 * dim + a])?);
        }
        Grid::new(&lo, &hi, &n)
    }
}

/// Scalar values at every node of a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    grid: Grid,
    values: Vec<f64>,
}

impl GridField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::shape(format!(
                "field has {} values, grid has {} nodes",
                values.len(),
                grid.node_count()
            )));
        }
        Ok(GridField { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.node_count();
        GridField {
            grid,
            values: vec![0.0; n],
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.node_count()).map(|k| f(&grid.node(k))).collect();
        GridField { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    pub fn scaled(&self, factor: f64) -> GridField {
        GridField {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Linear (1D) or bilinear (2D) interpolation; bitwise exact on nodes.
    pub fn interpolate(&self, x: &[f64]) -> Result<f64> {
        let p = self.grid.check_point(x)?;
        Ok(self.interpolate_unchecked(&p))
    }

    pub(crate) fn interpolate_unchecked(&self, p: &[f64; 2]) -> f64 {
        let (i, tx) = self.grid.locate(0, p[0]);
        if self.grid.dim == 1 {
            return (1.0 - tx) * self.values[i] + tx * self.values[i + 1];
        }
        let (j, ty) = self.grid.locate(1, p[1]);
        let v00 = self.at(i, j);
        let v01 = self.at(i, j + 1);
        let v10 = self.at(i + 1, j);
        let v11 = self.at(i + 1, j + 1);
        (1.0 - tx) * ((1.0 - ty) * v00 + ty * v01) + tx * ((1.0 - ty) * v10 + ty * v11)
    }

    /// Samples this field at every node of `coarse`, which must span the same box.
    pub fn restrict(&self, coarse: &Grid) -> Result<GridField> {
        if !self.grid.same_bounds(coarse) {
            return Err(Error::Domain {
                axis: 0,
                value: coarse.lo(0),
                lo: self.grid.lo(0),
                hi: self.grid.hi(0),
            });
        }
        let mut values = Vec::with_capacity(coarse.node_count());
        for k in 0..coarse.node_count() {
            let node = coarse.node(k);
            let mut p = [0.0; 2];
            for a in 0..coarse.dim() {
                p[a] = node[a].clamp(self.grid.lo(a), self.grid.hi(a));
            }
            values.push(self.interpolate_unchecked(&p));
        }
        GridField::new(coarse.clone(), values)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv_string(&[]))?;
        Ok(())
    }

    pub(crate) fn to_csv_string(&self, extra_headers: &[&str]) -> String {
        let mut s = String::with_capacity(self.values.len() * 24 + 64);
        for h in extra_headers {
            s.push_str(h);
            s.push('\n');
        }
        s.push_str(&self.grid.header());
        s.push('\n');
        for v in &self.values {
            s.push_str(&fmt_f64(*v));
            s.push('\n');
        }
        s
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<GridField> {
        let file = fs::File::open(path)?;
        Self::read_from(BufReader::new(file))
    }

    pub(crate) fn read_from(reader: impl BufRead) -> Result<GridField> {
        let mut grid = None;
        let mut values = Vec::new();
        for line in reader.lines() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            if t.starts_with("# grid:") {
                grid = Some(Grid::parse_header(t)?);
            } else if t.starts_with('#') {
                continue;
            } else {
                values.push(
                    t.parse::<f64>()
                        .map_err(|e| Error::Parse(format!("value `{t}`: {e}")))?,
                );
            }
        }
        let grid = grid.ok_or_else(|| Error::Parse("missing `# grid:` header".into()))?;
        GridField::new(grid, values)
    }
}

/// Free-function form of [`GridField::interpolate`].
pub fn interpolate(field: &GridField, x: &[f64]) -> Result<f64> {
    field.interpolate(x)
}

/// Free-function form of [`GridField::restrict`].
pub fn restrict(field: &GridField, coarse: &Grid) -> Result<GridField> {
    field.restrict(coarse)
}

/// `‖approx − reference‖₂ / ‖reference‖₂` over all nodes.
pub fn relative_l2_error(approx: &GridField, reference: &GridField) -> Result<f64> {
    if approx.grid != reference.grid {
        return Err(Error::shape("relative error needs identical grids"));
    }
    let den = reference.l2_norm();
    if den == 0.0 {
        return Err(Error::DegenerateReference);
    }
    let num = approx
        .values
        .iter()
        .zip(&reference.values)
        .map(|(a, r)| (a - r) * (a - r))
        .sum::<f64>()
        .sqrt();
    Ok(num / den)
}

/// Largest nodal absolute difference.
pub fn max_abs_error(approx: &GridField, reference: &GridField) -> Result<f64> {
    if approx.grid != reference.grid {
        return Err(Error::shape("max error needs identical grids"));
    }
    Ok(approx
        .values
        .iter()
        .zip(&reference.values)
        .map(|(a, r)| (a - r).abs())
        .fold(0.0, f64::max))
}

/// 17 significant digits, which round-trips every finite f64.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn write_lines(path: impl AsRef<Path>, body: &str) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(body.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_1d(n: usize) -> Grid {
        Grid::new_1d(0.0, 1.0, n).unwrap()
    }

    #[test]
    fn constant_field_interpolates_to_constant() {
        let f = GridField::from_fn(Grid::unit(2, 8).unwrap(), |_| 3.0);
        assert_eq!(f.interpolate(&[0.37, 0.81]).unwrap(), 3.0);
    }

    #[test]
    fn single_cell_linear() {
        let f = GridField::new(unit_1d(1), vec![0.0, 1.0]).unwrap();
        assert_eq!(f.interpolate(&[0.25]).unwrap(), 0.25);
    }

    #[test]
    fn bilinear_reproduces_xy() {
        let f = GridField::from_fn(Grid::unit(2, 64).unwrap(), |p| p[0] * p[1]);
        let v = f.interpolate(&[0.3, 0.7]).unwrap();
        assert!((v - 0.21).abs() < 1e-3, "{v}");
    }

    #[test]
    fn out_of_bounds_names_axis() {
        let f = GridField::zeros(Grid::unit(2, 4).unwrap());
        match f.interpolate(&[0.5, 1.1]) {
            Err(Error::Domain { axis, value, .. }) => {
                assert_eq!(axis, 1);
                assert_eq!(value, 1.1);
            }
            other => panic!("unexpected {other:?}"),
        }
        // tolerance of 1e-12 h is accepted
        assert!(f.interpolate(&[1.0 + 1e-14, 0.0]).is_ok());
    }

    #[test]
    fn relative_error_cases() {
        let g = Grid::unit(2, 6).unwrap();
        let r = GridField::from_fn(g.clone(), |p| 1.0 + p[0] - 2.0 * p[1]);
        assert_eq!(relative_l2_error(&r, &r).unwrap(), 0.0);
        let e = relative_l2_error(&r.scaled(1.01), &r).unwrap();
        assert!((e - 0.01).abs() < 1e-12);

        let mut p = r.clone();
        let delta = 0.125;
        p.values_mut()[17] += delta;
        let e = relative_l2_error(&p, &r).unwrap();
        assert!((e - delta / r.l2_norm()).abs() < 1e-15);

        let z = GridField::zeros(g);
        assert!(matches!(relative_l2_error(&r, &z), Err(Error::DegenerateReference)));
        let other = GridField::zeros(Grid::unit(2, 5).unwrap());
        assert!(matches!(relative_l2_error(&other, &r), Err(Error::Shape(_))));
    }

    #[test]
    fn restrict_cases() {
        let g = Grid::unit(2, 10).unwrap();
        let f = GridField::from_fn(g.clone(), |p| p[0].sin() + p[1]);
        assert_eq!(f.restrict(&g).unwrap(), f);

        let c = GridField::from_fn(g, |_| -2.5);
        let r = c.restrict(&Grid::unit(2, 3).unwrap()).unwrap();
        assert!(r.values().iter().all(|&v| v == -2.5));

        let fine = GridField::from_fn(unit_1d(256), |p| (std::f64::consts::PI * p[0]).sin());
        let coarse = fine.restrict(&unit_1d(16)).unwrap();
        for k in 0..=16 {
            let x = k as f64 / 16.0;
            assert!((coarse.values()[k] - (std::f64::consts::PI * x).sin()).abs() < 1e-4);
        }

        let shifted = Grid::new_1d(0.0, 2.0, 4).unwrap();
        assert!(matches!(fine.restrict(&shifted), Err(Error::Domain { .. })));
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let g = Grid::new_2d([-0.5, 0.1], [1.0 / 3.0, 2.0], [5, 3]).unwrap();
        let f = GridField::from_fn(g, |p| (p[0] * 1e3).exp() / 7.0 + p[1].sqrt());
        let text = f.to_csv_string(&[]);
        let back = GridField::read_from(text.as_bytes()).unwrap();
        assert_eq!(back.grid(), f.grid());
        for (a, b) in back.values().iter().zip(f.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    proptest! {
        #[test]
        fn exact_on_nodes(n in 1usize..20, m in 1usize..20, seed in 0u64..1000) {
            let g = Grid::new_2d([-1.3, 0.2], [0.7, 2.9], [n, m]).unwrap();
            let f = GridField::from_fn(g.clone(), |p| (p[0] * 13.1 + p[1] * 7.7 + seed as f64).sin());
            for k in 0..g.node_count() {
                let v = f.interpolate(&g.node(k)).unwrap();
                prop_assert_eq!(v.to_bits(), f.values()[k].to_bits());
            }
        }

        #[test]
        fn reproduces_affine(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0,
                             x in 0.0f64..1.0, y in 0.0f64..1.0) {
            let g = Grid::unit(2, 7).unwrap();
            let f = GridField::from_fn(g, |p| a + b * p[0] + c * p[1]);
            let exact = a + b * x + c * y;
            let v = f.interpolate(&[x, y]).unwrap();
            prop_assert!((v - exact).abs() <= 1e-12 * (1.0 + exact.abs() + a.abs() + b.abs() + c.abs()));
        }

        #[test]
        fn relative_error_scale_invariant(s in prop_oneof![-1e3f64..-1e-3, 1e-3f64..1e3], seed in 0u64..100) {
            let g = Grid::unit(1, 12).unwrap();
            let r = GridField::from_fn(g.clone(), |p| (p[0] * 5.0 + seed as f64).cos() + 2.0);
            let a = GridField::from_fn(g, |p| (p[0] * 5.1 + seed as f64).cos() + 2.0);
            let e1 = relative_l2_error(&a, &r).unwrap();
            let e2 = relative_l2_error(&a.scaled(s), &r.scaled(s)).unwrap();
            prop_assert!((e1 - e2).abs() <= 1e-12 * e1.max(1e-300) + 1e-15);
        }
    }
}
