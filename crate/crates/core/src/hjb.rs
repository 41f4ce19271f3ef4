//! Finite-difference reference solution of the optimal control problem.
//!
//! The linear boundary value problem
//!
//! ```text
//! beta^-1 psi'' - V'(x) psi' - f psi = 0   on [lb, target_lb)
//! psi = exp(-g)                            on [target_lb, ub]
//! psi'(lb) = 0
//! ```
//!
//! is discretized with second-order central differences and solved as a
//! single tridiagonal system. The value function is `phi = -log psi` and the
//! optimal feedback control is `u* = -sigma phi' = sigma (log psi)'`.

use crate::env::{grad_potential, EnvConfig, Policy};
use crate::error::{Error, Result};

/// Uniform grid `lb + i h`, `i = 0..n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub lb: f64,
    pub ub: f64,
    pub n: usize,
}

impl Grid {
    pub fn new(lb: f64, ub: f64, n: usize) -> Result<Self> {
        if n < 3 || !(ub > lb) || !lb.is_finite() || !ub.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "grid needs n >= 3 and lb < ub, got n = {n}, [{lb}, {ub}]"
            )));
        }
        Ok(Self { lb, ub, n })
    }

    /// Default reference grid over the state domain, spacing 1e-3 on [-2, 2].
    pub fn for_env(config: &EnvConfig, n: usize) -> Result<Self> {
        Self::new(config.state_lb, config.state_ub, n)
    }

    #[inline]
    pub fn h(&self) -> f64 {
        (self.ub - self.lb) / (self.n - 1) as f64
    }

    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        self.lb + i as f64 * self.h()
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(|i| self.node(i))
    }

    /// Index of the node nearest to `x`, clamped to the grid.
    pub fn nearest(&self, x: f64) -> usize {
        let i = ((x - self.lb) / self.h()).round();
        i.clamp(0.0, (self.n - 1) as f64) as usize
    }
}

/// Tridiagonal system `lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1] = rhs[i]`.
/// `lower[0]` and `upper[n-1]` are ignored.
#[derive(Debug, Clone)]
pub struct Tridiagonal {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl Tridiagonal {
    /// Thomas elimination without pivoting.
    pub fn solve(&self) -> Result<Vec<f64>> {
        let n = self.diag.len();
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        let mut pivot = self.diag[0];
        if pivot == 0.0 || !pivot.is_finite() {
            return Err(Error::SingularSystem { row: 0 });
        }
        c[0] = self.upper[0] / pivot;
        d[0] = self.rhs[0] / pivot;
        for i in 1..n {
            pivot = self.diag[i] - self.lower[i] * c[i - 1];
            if pivot == 0.0 || !pivot.is_finite() {
                return Err(Error::SingularSystem { row: i });
            }
            c[i] = if i + 1 < n { self.upper[i] / pivot } else { 0.0 };
            d[i] = (self.rhs[i] - self.lower[i] * d[i - 1]) / pivot;
        }
        let mut x = d;
        for i in (0..n - 1).rev() {
            x[i] -= c[i] * x[i + 1];
        }
        Ok(x)
    }

    /// Largest row residual, each scaled by the row's absolute coefficient sum
    /// times the solution magnitude.
    pub fn relative_residual(&self, x: &[f64]) -> f64 {
        let n = self.diag.len();
        let xmax = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        (0..n)
            .map(|i| {
                let mut lhs = self.diag[i] * x[i];
                let mut norm = self.diag[i].abs();
                if i > 0 {
                    lhs += self.lower[i] * x[i - 1];
                    norm += self.lower[i].abs();
                }
                if i + 1 < n {
                    lhs += self.upper[i] * x[i + 1];
                    norm += self.upper[i].abs();
                }
                (lhs - self.rhs[i]).abs() / (norm * xmax + self.rhs[i].abs())
            })
            .fold(0.0, f64::max)
    }
}

/// Assembles the discretized boundary value problem.
pub fn assemble_bvp(config: &EnvConfig, grid: &Grid) -> Result<Tridiagonal> {
    config.validate()?;
    if !(config.target_lb > grid.lb && config.target_lb <= grid.ub) {
        return Err(Error::InvalidConfig(format!(
            "target_lb = {} must lie inside the grid ({}, {}]",
            config.target_lb, grid.lb, grid.ub
        )));
    }
    let n = grid.n;
    let h = grid.h();
    let diffusion = 1.0 / config.beta;
    let boundary_value = (-config.g_const).exp();
    // Nodes within rounding of target_lb belong to the target set.
    let in_target = |x: f64| x >= config.target_lb - 1e-9 * h;

    let mut sys = Tridiagonal {
        lower: vec![0.0; n],
        diag: vec![0.0; n],
        upper: vec![0.0; n],
        rhs: vec![0.0; n],
    };
    for i in 0..n {
        let x = grid.node(i);
        if in_target(x) {
            sys.diag[i] = 1.0;
            sys.rhs[i] = boundary_value;
            continue;
        }
        if i == 0 {
            continue;
        }
        let drift = grad_potential(x, config.alpha);
        sys.lower[i] = diffusion / (h * h) + drift / (2.0 * h);
        sys.diag[i] = -2.0 * diffusion / (h * h) - config.f_const;
        sys.upper[i] = diffusion / (h * h) - drift / (2.0 * h);
    }
    if in_target(grid.node(0)) {
        return Ok(sys);
    }
    // Neumann edge: (-3 psi_0 + 4 psi_1 - psi_2) / 2h = 0, with psi_2
    // eliminated through the row-1 equation to keep the system tridiagonal.
    let (a1, b1, c1, r1) = (sys.lower[1], sys.diag[1], sys.upper[1], sys.rhs[1]);
    if c1 == 0.0 {
        // row 1 is already a boundary row
        sys.diag[0] = -1.0;
        sys.upper[0] = 1.0;
    } else {
        sys.diag[0] = a1 - 3.0 * c1;
        sys.upper[0] = b1 + 4.0 * c1;
        sys.rhs[0] = r1;
    }
    Ok(sys)
}

/// Grid functions of the reference solution.
#[derive(Debug, Clone, PartialEq)]
pub struct HjbSolution {
    pub grid: Grid,
    pub psi: Vec<f64>,
    pub phi: Vec<f64>,
    pub u_opt: Vec<f64>,
}

pub fn solve_bvp(config: &EnvConfig, grid: &Grid) -> Result<HjbSolution> {
    let sys = assemble_bvp(config, grid)?;
    let psi = sys.solve()?;
    if let Some((node, &value)) = psi.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
        return Err(Error::NonPositiveSolution { node, value });
    }
    let phi: Vec<f64> = psi.iter().map(|p| -p.ln()).collect();
    let u_opt = optimal_control(&phi, grid, config.sigma());
    Ok(HjbSolution {
        grid: *grid,
        psi,
        phi,
        u_opt,
    })
}

/// `-sigma phi'` by central differences, second-order one-sided at the edges.
fn optimal_control(phi: &[f64], grid: &Grid, sigma: f64) -> Vec<f64> {
    let n = phi.len();
    let h = grid.h();
    (0..n)
        .map(|i| {
            let dphi = if i == 0 {
                (-3.0 * phi[0] + 4.0 * phi[1] - phi[2]) / (2.0 * h)
            } else if i == n - 1 {
                (3.0 * phi[n - 1] - 4.0 * phi[n - 2] + phi[n - 3]) / (2.0 * h)
            } else {
                (phi[i + 1] - phi[i - 1]) / (2.0 * h)
            };
            -sigma * dphi
        })
        .collect()
}

impl HjbSolution {
    /// Rebuilds a solution from stored node values (as written by the CLI).
    pub fn from_columns(s: Vec<f64>, psi: Vec<f64>, phi: Vec<f64>, u_opt: Vec<f64>) -> Result<Self> {
        let n = s.len();
        if psi.len() != n || phi.len() != n || u_opt.len() != n {
            return Err(Error::InvalidConfig("solution columns differ in length".into()));
        }
        let grid = Grid::new(s[0], s[n - 1], n)?;
        Ok(Self {
            grid,
            psi,
            phi,
            u_opt,
        })
    }

    pub fn policy(&self) -> HjbPolicy {
        policy_from_solution(self)
    }

    /// Linear interpolation of psi.
    pub fn psi_at(&self, x: f64) -> f64 {
        interpolate(&self.grid, &self.psi, x)
    }
}

/// The optimal feedback control, linearly interpolated between grid nodes
/// and held constant outside the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HjbPolicy {
    grid: Grid,
    u_opt: Vec<f64>,
}

pub fn policy_from_solution(sol: &HjbSolution) -> HjbPolicy {
    HjbPolicy {
        grid: sol.grid,
        u_opt: sol.u_opt.clone(),
    }
}

impl HjbPolicy {
    pub fn nodal_values(&self) -> &[f64] {
        &self.u_opt
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
}

impl Policy for HjbPolicy {
    #[inline]
    fn action(&self, s: f64) -> f64 {
        interpolate(&self.grid, &self.u_opt, s)
    }
}

#[inline]
fn interpolate(grid: &Grid, values: &[f64], x: f64) -> f64 {
    let n = values.len();
    if !(x > grid.lb) {
        return values[0];
    }
    if x >= grid.ub {
        return values[n - 1];
    }
    let pos = (x - grid.lb) / grid.h();
    // Node coordinates carry rounding error; snap to exact nodal values.
    let nearest = pos.round();
    if (pos - nearest).abs() < 1e-9 {
        return values[(nearest as usize).min(n - 1)];
    }
    let i = (pos.floor() as usize).min(n - 2);
    let w = pos - i as f64;
    (1.0 - w) * values[i] + w * values[i + 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_solution(beta: f64) -> HjbSolution {
        let c = EnvConfig::with_beta(beta);
        solve_bvp(&c, &Grid::for_env(&c, 4001).unwrap()).unwrap()
    }

    #[test]
    fn thomas_solves_small_system() {
        let sys = Tridiagonal {
            lower: vec![0.0, 1.0, 1.0],
            diag: vec![4.0, 4.0, 4.0],
            upper: vec![1.0, 1.0, 0.0],
            rhs: vec![5.0, 6.0, 5.0],
        };
        let x = sys.solve().unwrap();
        for v in &x {
            assert!((v - 1.0).abs() < 1e-14);
        }
        assert!(sys.relative_residual(&x) < 1e-15);
    }

    #[test]
    fn singular_system_is_reported() {
        let sys = Tridiagonal {
            lower: vec![0.0, 1.0],
            diag: vec![1.0, 1.0],
            upper: vec![1.0, 0.0],
            rhs: vec![1.0, 1.0],
        };
        assert!(matches!(sys.solve(), Err(Error::SingularSystem { row: 1 })));
    }

    #[test]
    fn no_running_cost_gives_constant_solution() {
        let c = EnvConfig {
            f_const: 0.0,
            ..EnvConfig::default()
        };
        let sol = solve_bvp(&c, &Grid::for_env(&c, 4001).unwrap()).unwrap();
        for ((p, f), u) in sol.psi.iter().zip(&sol.phi).zip(&sol.u_opt) {
            assert!((p - 1.0).abs() < 1e-9, "psi {p}");
            assert!(f.abs() < 1e-9);
            assert!(u.abs() < 1e-5);
        }
        let policy = sol.policy();
        assert!(policy.action(-0.3).abs() < 1e-5);
    }

    #[test]
    fn boundary_values_and_cole_hopf() {
        let sol = default_solution(1.0);
        let c = EnvConfig::default();
        for (i, x) in sol.grid.nodes().enumerate() {
            if x >= c.target_lb {
                assert_eq!(sol.psi[i], 1.0);
            }
            assert_eq!(sol.phi[i], -sol.psi[i].ln());
            assert!(sol.psi[i] > 0.0);
        }
    }

    #[test]
    fn discrete_residual_is_tiny() {
        for beta in [1.0, 4.0] {
            let c = EnvConfig::with_beta(beta);
            let grid = Grid::for_env(&c, 4001).unwrap();
            let sys = assemble_bvp(&c, &grid).unwrap();
            let psi = sys.solve().unwrap();
            assert!(sys.relative_residual(&psi) < 1e-10);
        }
    }

    #[test]
    fn psi_increases_toward_target() {
        for beta in [1.0, 4.0] {
            let sol = default_solution(beta);
            let lo = sol.grid.nearest(-1.0);
            let hi = sol.grid.nearest(1.0);
            for i in lo..hi {
                assert!(sol.psi[i + 1] > sol.psi[i], "beta {beta} node {i}");
            }
        }
    }

    #[test]
    fn control_pushes_over_the_barrier() {
        let sol = default_solution(4.0);
        let policy = sol.policy();
        let mut s = -0.999;
        while s < 0.999 {
            assert!(policy.action(s) > 0.0, "u*({s}) <= 0");
            s += 0.01;
        }
    }

    #[test]
    fn interpolation_hits_nodes_and_clamps() {
        let sol = default_solution(1.0);
        let policy = sol.policy();
        for i in [0usize, 17, 1000, 2345, 4000] {
            assert_eq!(policy.action(sol.grid.node(i)), sol.u_opt[i]);
        }
        assert_eq!(policy.action(-7.0), sol.u_opt[0]);
        assert_eq!(policy.action(9.0), sol.u_opt[4000]);
    }

    #[test]
    fn richardson_second_order() {
        let c = EnvConfig::default();
        let psi_at = |n: usize| {
            let sol = solve_bvp(&c, &Grid::for_env(&c, n).unwrap()).unwrap();
            let i = sol.grid.nearest(-1.0);
            assert!((sol.grid.node(i) + 1.0).abs() < 1e-12);
            sol.psi[i]
        };
        let coarse = psi_at(1001);
        let mid = psi_at(2001);
        let fine = psi_at(4001);
        let order = ((coarse - mid) / (mid - fine)).abs().log2();
        assert!(order >= 1.8, "observed order {order}");
    }

    #[test]
    fn remote_neumann_edge_barely_matters() {
        let c = EnvConfig::default();
        let base = solve_bvp(&c, &Grid::new(-2.0, 2.0, 4001).unwrap()).unwrap();
        let wide = solve_bvp(&c, &Grid::new(-3.0, 2.0, 5001).unwrap()).unwrap();
        let a = base.psi[base.grid.nearest(-1.0)];
        let b = wide.psi[wide.grid.nearest(-1.0)];
        assert!(((a - b) / a).abs() < 1e-3, "{a} vs {b}");
    }

    #[test]
    fn columns_round_trip() {
        let sol = default_solution(1.0);
        let s: Vec<f64> = sol.grid.nodes().collect();
        let back =
            HjbSolution::from_columns(s, sol.psi.clone(), sol.phi.clone(), sol.u_opt.clone())
                .unwrap();
        assert_eq!(back.grid.h(), sol.grid.h());
        assert_eq!(back.policy(), sol.policy());
    }
}
