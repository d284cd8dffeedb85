//! Periodic homogenization: cell problems, effective coefficients, the
//! homogenized solution `u₀` and the first-order corrector
//! `u_{ε,1} = u₀ + ε χ_j(x/ε) ∂u₀/∂x_j`.

use std::fmt::Write as _;

use crate::coefficient::{Forcing, PermeabilityField};
use crate::elliptic::{pcg, remove_mean, Boundary, FluxOperator2d, LinearOperator};
use crate::error::{Error, Result};
use crate::grid::{fmt_f64, write_lines, Grid, GridField};

/// Homogenized coefficient tensor (only the leading `dim × dim` block is meaningful).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveCoefficient {
    pub dim: usize,
    pub a_star: [[f64; 2]; 2],
}

impl EffectiveCoefficient {
    pub fn scalar(value: f64) -> Self {
        EffectiveCoefficient {
            dim: 1,
            a_star: [[value, 0.0], [0.0, 0.0]],
        }
    }

    pub fn isotropic_2d(value: f64) -> Self {
        EffectiveCoefficient {
            dim: 2,
            a_star: [[value, 0.0], [0.0, value]],
        }
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        if self.dim == 1 {
            return vec![self.a_star[0][0]];
        }
        let [[a, b], [_, d]] = self.a_star;
        let mean = 0.5 * (a + d);
        let disc = (0.25 * (a - d) * (a - d) + b * b).sqrt();
        vec![mean - disc, mean + disc]
    }

    pub fn is_spd(&self) -> bool {
        let sym = self.dim == 1 || (self.a_star[0][1] - self.a_star[1][0]).abs() <= 1e-12 * self.a_star[0][0].abs();
        sym && self.eigenvalues().iter().all(|&l| l > 0.0)
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut s = format!("# cell\n# a_star: {}\n", self.dim);
        for i in 0..self.dim {
            let row: Vec<String> = (0..self.dim).map(|j| fmt_f64(self.a_star[i][j])).collect();
            writeln!(s, "{}", row.join(",")).unwrap();
        }
        write_lines(path, &s)
    }
}

/// Zero-mean periodic cell correctors, one per direction.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSolution {
    pub chi: Vec<GridField>,
    pub mean: Vec<f64>,
}

impl CellSolution {
    pub fn dim(&self) -> usize {
        self.chi.len()
    }

    /// Periodic interpolation of `χ_k` at fast variable `y` (any real coordinates).
    pub fn evaluate(&self, k: usize, y: &[f64]) -> f64 {
        let mut p = [0.0; 2];
        for (a, v) in y.iter().enumerate() {
            p[a] = v - v.floor();
        }
        self.chi[k].interpolate_unchecked(&p)
    }

    /// Asserts face periodicity and zero cell average for every direction.
    pub fn check_invariants(&self) -> Result<()> {
        for (k, chi) in self.chi.iter().enumerate() {
            let g = chi.grid();
            let n = g.cells(0);
            let unique = unique_values(chi);
            let rms = (unique.iter().map(|v| v * v).sum::<f64>() / unique.len() as f64).sqrt();
            let mean = unique.iter().sum::<f64>() / unique.len() as f64;
            if mean.abs() > 1e-8 * rms {
                return Err(Error::invalid(format!("χ_{k} has cell average {mean:e}")));
            }
            let faces_match = if g.dim() == 1 {
                (chi.at(0, 0) - chi.at(n, 0)).abs() <= 1e-10
            } else {
                let m = g.cells(1);
                (0..=m).all(|j| (chi.at(0, j) - chi.at(n, j)).abs() <= 1e-10)
                    && (0..=n).all(|i| (chi.at(i, 0) - chi.at(i, m)).abs() <= 1e-10)
            };
            if !faces_match {
                return Err(Error::invalid(format!("χ_{k} is not periodic")));
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        for (k, chi) in self.chi.iter().enumerate() {
            let path = dir.as_ref().join(format!("cell_chi_{}.csv", k + 1));
            write_lines(path, &chi.to_csv_string(&["# cell"]))?;
        }
        Ok(())
    }
}

fn unique_values(chi: &GridField) -> Vec<f64> {
    let g = chi.grid();
    let n = g.cells(0);
    if g.dim() == 1 {
        chi.values()[..n].to_vec()
    } else {
        let m = g.cells(1);
        (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).map(|(i, j)| chi.at(i, j)).collect()
    }
}

fn periodic_cell_form(a: &PermeabilityField) -> Result<PermeabilityField> {
    a.cell_form()
        .ok_or_else(|| Error::invalid("coefficient has no single period; homogenization is undefined"))
}

/// `a* = (∫₀¹ 1/a(y) dy)⁻¹` by the composite trapezoid rule with `quad_n` panels.
pub fn effective_coefficient_1d(a: &PermeabilityField, quad_n: usize) -> Result<EffectiveCoefficient> {
    if quad_n < 16 {
        return Err(Error::invalid("quad_n must be at least 16"));
    }
    let cell = periodic_cell_form(a)?;
    let h = 1.0 / quad_n as f64;
    let mut sum = 0.0;
    for k in 0..=quad_n {
        let y = [k as f64 * h];
        let v = cell.evaluate(&y);
        if !(v > 0.0) {
            return Err(Error::Ellipticity {
                position: y.to_vec(),
                value: v,
            });
        }
        let w = if k == 0 || k == quad_n { 0.5 } else { 1.0 };
        sum += w / v;
    }
    Ok(EffectiveCoefficient::scalar(1.0 / (sum * h)))
}

/// Exact solution of the discrete 1D cell problem: the flux `a_{i+½}(χ' + 1)` is the
/// midpoint-rule harmonic mean, and `χ` is shifted to zero mean.
pub fn solve_cell_problem_1d(a: &PermeabilityField, cell_n: usize) -> Result<CellSolution> {
    if cell_n < 8 {
        return Err(Error::invalid("cell_n must be at least 8"));
    }
    let cell = periodic_cell_form(a)?;
    let h = 1.0 / cell_n as f64;
    let kmid: Vec<f64> = (0..cell_n).map(|i| cell.evaluate(&[(i as f64 + 0.5) * h])).collect();
    if let Some((i, v)) = kmid.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::Ellipticity {
            position: vec![(i as f64 + 0.5) * h],
            value: *v,
        });
    }
    let flux = cell_n as f64 / kmid.iter().map(|k| 1.0 / k).sum::<f64>();
    let mut chi = vec![0.0; cell_n + 1];
    for i in 0..cell_n {
        chi[i + 1] = chi[i] + h * (flux / kmid[i] - 1.0);
    }
    let mut unique = chi[..cell_n].to_vec();
    remove_mean(&mut unique);
    unique.push(unique[0]);
    let field = GridField::new(Grid::unit(1, cell_n)?, unique)?;
    let sol = CellSolution {
        mean: vec![field.values()[..cell_n].iter().sum::<f64>() / cell_n as f64],
        chi: vec![field],
    };
    sol.check_invariants()?;
    Ok(sol)
}

/// Solves the periodic cell problems `−∇·(a∇χ_k) = ∂a/∂y_k` on `[0,1]²`.
pub fn solve_cell_problem_2d(a: &PermeabilityField, cell_n: usize, tol: f64) -> Result<CellSolution> {
    if cell_n < 8 {
        return Err(Error::invalid("cell_n must be at least 8"));
    }
    let cell = periodic_cell_form(a)?;
    let grid = Grid::unit(2, cell_n)?;
    let op = FluxOperator2d::midpoint(&grid, &cell, Boundary::Periodic)?;
    let (chi1, chi2) = rayon::join(|| solve_direction(&op, &grid, 0, tol), || solve_direction(&op, &grid, 1, tol));
    let chi = vec![chi1?, chi2?];
    let mean = chi
        .iter()
        .map(|c| {
            let u = unique_values(c);
            u.iter().sum::<f64>() / u.len() as f64
        })
        .collect();
    let sol = CellSolution { chi, mean };
    sol.check_invariants()?;
    Ok(sol)
}

fn solve_direction(op: &FluxOperator2d, grid: &Grid, k: usize, tol: f64) -> Result<GridField> {
    let n = grid.cells(0);
    let h = grid.spacing(k);
    let mut rhs = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (ip, jp) = if k == 0 { ((i + n - 1) % n, j) } else { (i, (j + n - 1) % n) };
            rhs[i * n + j] = (op.periodic_edge(k, i, j) - op.periodic_edge(k, ip, jp)) / h;
        }
    }
    let mean = rhs.iter().sum::<f64>() / rhs.len() as f64;
    if mean.abs() > 1e-8 {
        return Err(Error::Compatibility { mean });
    }
    let max_iter = 50 * n * n;
    let out = pcg(op, &rhs, tol, max_iter, true)?;
    debug_assert_eq!(out.solution.len(), op.len());
    let values = (0..=n)
        .flat_map(|i| (0..=n).map(move |j| (i % n, j % n)))
        .map(|(i, j)| out.solution[i * n + j])
        .collect();
    GridField::new(grid.clone(), values)
}

/// `a*_ik = ∫_Y a (δ_ik + ∂χ_k/∂y_i) dy`, midpoint quadrature on the cell edges, symmetrized.
pub fn effective_coefficient_2d(a: &PermeabilityField, chi: &CellSolution) -> Result<EffectiveCoefficient> {
    if chi.dim() != 2 {
        return Err(Error::shape("2D effective coefficient needs two cell correctors"));
    }
    let grid = chi.chi[0].grid().clone();
    if chi.chi[1].grid() != &grid {
        return Err(Error::shape("cell correctors live on different grids"));
    }
    let cell = periodic_cell_form(a)?;
    let op = FluxOperator2d::midpoint(&grid, &cell, Boundary::Periodic)?;
    let n = grid.cells(0);
    let mut m = [[0.0; 2]; 2];
    for (i_dir, row) in m.iter_mut().enumerate() {
        let h = grid.spacing(i_dir);
        for (k, entry) in row.iter_mut().enumerate() {
            let c = &chi.chi[k];
            let mut sum = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let (ni, nj) = if i_dir == 0 { (i + 1, j) } else { (i, j + 1) };
                    let grad = (c.at(ni, nj) - c.at(i, j)) / h;
                    let delta = if i_dir == k { 1.0 } else { 0.0 };
                    sum += op.periodic_edge(i_dir, i, j) * (delta + grad);
                }
            }
            *entry = sum / (n * n) as f64;
        }
    }
    let off = 0.5 * (m[0][1] + m[1][0]);
    Ok(EffectiveCoefficient {
        dim: 2,
        a_star: [[m[0][0], off], [off, m[1][1]]],
    })
}

/// The constant-coefficient problem `−∇·(a*∇u₀) = f` on `grid`.
pub fn solve_homogenized(a_star: &EffectiveCoefficient, forcing: &Forcing, grid: &Grid) -> Result<GridField> {
    if a_star.dim != grid.dim() {
        return Err(Error::shape("effective coefficient and grid dimensions differ"));
    }
    if !a_star.is_spd() {
        return Err(Error::Ellipticity {
            position: vec![],
            value: a_star.eigenvalues()[0],
        });
    }
    crate::elliptic::solve_constant_tensor(&a_star.a_star, forcing, grid)
}

/// `u₀`, the cell correctors and ε, with `∇u₀` cached on `u₀`'s grid.
#[derive(Debug, Clone)]
pub struct CorrectorExpansion {
    u0: GridField,
    chi: CellSolution,
    epsilon: f64,
    grad: Vec<GridField>,
}

impl CorrectorExpansion {
    pub fn new(u0: GridField, chi: CellSolution, epsilon: f64) -> Result<Self> {
        if chi.dim() != u0.grid().dim() {
            return Err(Error::shape("cell solution dimension differs from u0"));
        }
        if !(epsilon >= 0.0) {
            return Err(Error::invalid("epsilon must be non-negative"));
        }
        let grad = (0..u0.grid().dim()).map(|a| nodal_gradient(&u0, a)).collect();
        Ok(CorrectorExpansion { u0, chi, epsilon, grad })
    }

    pub fn u0(&self) -> &GridField {
        &self.u0
    }

    pub fn chi(&self) -> &CellSolution {
        &self.chi
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `u₀(x) + ε Σ_j χ_j(frac(x/ε)) ∂u₀/∂x_j(x)`.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        let base = self.u0.interpolate(x)?;
        if self.epsilon == 0.0 {
            return Ok(base);
        }
        let y: Vec<f64> = x.iter().map(|v| v / self.epsilon).collect();
        let mut corr = 0.0;
        for j in 0..self.grad.len() {
            corr += self.chi.evaluate(j, &y) * self.grad[j].interpolate(x)?;
        }
        Ok(base + self.epsilon * corr)
    }

    /// The corrector sampled at every node of `grid`.
    pub fn field(&self, grid: &Grid) -> Result<GridField> {
        let values = (0..grid.node_count())
            .map(|k| self.evaluate(&grid.node(k)))
            .collect::<Result<Vec<_>>>()?;
        GridField::new(grid.clone(), values)
    }
}

/// Free-function form of [`CorrectorExpansion::evaluate`].
pub fn corrector_solution(exp: &CorrectorExpansion, x: &[f64]) -> Result<f64> {
    exp.evaluate(x)
}

/// Centred differences inside, one-sided at the boundary.
fn nodal_gradient(u: &GridField, axis: usize) -> GridField {
    let g = u.grid().clone();
    let n = g.cells(axis);
    let h = g.spacing(axis);
    let (ni, nj) = (g.nodes(0), if g.dim() == 2 { g.nodes(1) } else { 1 });
    let mut out = vec![0.0; g.node_count()];
    for i in 0..ni {
        for j in 0..nj {
            let k = if axis == 0 { i } else { j };
            let at = |kk: usize| if axis == 0 { u.at(kk, j) } else { u.at(i, kk) };
            let d = if k == 0 {
                (at(1) - at(0)) / h
            } else if k == n {
                (at(n) - at(n - 1)) / h
            } else {
                (at(k + 1) - at(k - 1)) / (2.0 * h)
            };
            out[g.index(i, j)] = d;
        }
    }
    GridField::new(g, out).expect("gradient has the grid's shape")
}

/// Arithmetic and harmonic cell means of a coefficient (Voigt and Reuss bounds).
pub fn cell_means(a: &PermeabilityField, samples: usize) -> Result<(f64, f64)> {
    let cell = periodic_cell_form(a)?;
    let dim = cell.dim().max(1);
    let h = 1.0 / samples as f64;
    let (mut sum, mut inv, mut count) = (0.0, 0.0, 0usize);
    let mut visit = |p: &[f64]| {
        let v = cell.evaluate(p);
        sum += v;
        inv += 1.0 / v;
        count += 1;
    };
    for i in 0..samples {
        let x = (i as f64 + 0.5) * h;
        if dim == 1 {
            visit(&[x]);
        } else {
            for j in 0..samples {
                visit(&[x, (j as f64 + 0.5) * h]);
            }
        }
    }
    Ok((sum / count as f64, count as f64 / inv))
}
