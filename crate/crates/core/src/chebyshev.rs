//! Chebyshev collocation of spherical diffusion in a single particle.
//!
//! The particle radius is mirrored onto `[-R, R]` so that the concentration is an
//! even function and `u = r·c` an odd one. On the Gauss–Lobatto grid
//! `x_k = cos(kπ / 2(n+1))`, `k = 0..=2(n+1)`, the nodes strictly inside `(0, R)`
//! carry the state; `u(0) = 0` holds by symmetry and the surface value follows from
//! the flux boundary row
//!
//! ```text
//! u'(R) − u(R)/R = R·j / D
//! ```
//!
//! where `j` is the molar flux density into the particle. The Laplacian reduces to
//! `∂c/∂t = D·u''/r` at every interior node.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Differentiation matrix on `cos(kπ/N)`, `k = 0..=N`, for the interval `[-1, 1]`.
pub fn cheb_matrix(n_intervals: usize) -> (DMatrix<f64>, Vec<f64>) {
    let n = n_intervals;
    let x: Vec<f64> = (0..=n)
        .map(|k| (std::f64::consts::PI * k as f64 / n as f64).cos())
        .collect();
    let c: Vec<f64> = (0..=n)
        .map(|k| {
            let w = if k == 0 || k == n { 2.0 } else { 1.0 };
            if k % 2 == 0 {
                w
            } else {
                -w
            }
        })
        .collect();
    let mut d = DMatrix::<f64>::zeros(n + 1, n + 1);
    for i in 0..=n {
        for j in 0..=n {
            if i != j {
                d[(i, j)] = c[i] / c[j] / (x[i] - x[j]);
            }
        }
    }
    // negative-sum trick keeps row sums at zero to rounding
    for i in 0..=n {
        let s: f64 = (0..=n).filter(|&j| j != i).map(|j| d[(i, j)]).sum();
        d[(i, i)] = -s;
    }
    (d, x)
}

/// Collocation operators for one particle.
#[derive(Debug, Clone)]
pub struct ChebDisc {
    n: usize,
    radius: f64,
    /// Full mirrored grid, `r_0 = R` down to `r_{2(n+1)} = -R`.
    grid: Vec<f64>,
    d1: DMatrix<f64>,
    d2: DMatrix<f64>,
    /// `∂c/∂t = D·(a·c) + b·j`.
    a: DMatrix<f64>,
    b: DVector<f64>,
    /// `c_surf = e·c + f·j/D`.
    e: DVector<f64>,
    f: f64,
    /// Volume-average weights: `c̄ = w·c`, `w·a = 0`, `w·b = 3/R`.
    w: DVector<f64>,
    /// Row-major copy of `a` for the allocation-free path.
    a_flat: Vec<f64>,
}

impl ChebDisc {
    /// Builds operators for `n_nodes` interior nodes on a particle of `radius` metres.
    pub fn new(n_nodes: usize, radius: f64) -> Result<Self> {
        if n_nodes < 3 {
            return Err(Error::Config(format!(
                "Chebyshev discretisation needs at least 3 nodes, got {n_nodes}"
            )));
        }
        if !(radius > 0.0) {
            return Err(Error::Config(format!("particle radius {radius} must be positive")));
        }
        let n = n_nodes;
        let m = 2 * (n + 1);
        let (d_ref, x) = cheb_matrix(m);
        let d1 = d_ref / radius;
        let d2 = &d1 * &d1;
        let grid: Vec<f64> = x.iter().map(|v| v * radius).collect();

        // Boundary row solved for u_0, using u_m = -u_0 and u_{m-k} = -u_k.
        let a0 = d1[(0, 0)] - d1[(0, m)] - 1.0 / radius;
        // u_0 = (R·j/D − Σ_k s_k·u_k) / a0, with u_k = r_k·c_k
        let s: Vec<f64> = (1..=n).map(|k| (d1[(0, k)] - d1[(0, m - k)]) * grid[k]).collect();

        let mut a = DMatrix::<f64>::zeros(n, n);
        let mut b = DVector::<f64>::zeros(n);
        for (row, k) in (1..=n).enumerate() {
            let rk = grid[k];
            let surf_coef = d2[(k, 0)] - d2[(k, m)];
            for (col, l) in (1..=n).enumerate() {
                let direct = (d2[(k, l)] - d2[(k, m - l)]) * grid[l];
                let via_surface = surf_coef * (-s[col] / a0);
                a[(row, col)] = (direct + via_surface) / rk;
            }
            b[row] = surf_coef * radius / a0 / rk;
        }
        let e = DVector::from_iterator(n, s.iter().map(|sk| -sk / a0 / radius));
        let f = 1.0 / a0;

        // left null vector of a, normalised to unit sum
        let mut sys = a.transpose();
        for col in 0..n {
            sys[(n - 1, col)] = 1.0;
        }
        let mut rhs = DVector::<f64>::zeros(n);
        rhs[n - 1] = 1.0;
        let w = sys
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Config("singular Chebyshev inventory system".into()))?;

        let a_flat = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|ij| a[ij]).collect();
        Ok(Self {
            a_flat,
            n,
            radius,
            grid,
            d1,
            d2,
            a,
            b,
            e,
            f,
            w,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Radii of the state nodes, from the surface inwards.
    pub fn nodes(&self) -> &[f64] {
        &self.grid[1..=self.n]
    }

    /// Full mirrored collocation grid.
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn d1(&self) -> &DMatrix<f64> {
        &self.d1
    }

    pub fn d2(&self) -> &DMatrix<f64> {
        &self.d2
    }

    /// Diffusion operator for unit diffusivity.
    pub fn diffusion_operator(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// Response of the node derivatives to a unit inward flux density.
    pub fn flux_vector(&self) -> &DVector<f64> {
        &self.b
    }

    /// Surface-concentration row: `c_surf = e·c + f·j/D`.
    pub fn surface_row(&self) -> (&DVector<f64>, f64) {
        (&self.e, self.f)
    }

    /// Volume-average weights of the node concentrations.
    pub fn average_weights(&self) -> &DVector<f64> {
        &self.w
    }

    /// `∂c/∂t` at the nodes for diffusivity `diff` and inward flux density `flux`.
    pub fn rhs(&self, c: &[f64], diff: f64, flux: f64) -> Vec<f64> {
        let cv = DVector::from_column_slice(c);
        let out = (&self.a * cv) * diff + &self.b * flux;
        out.iter().copied().collect()
    }

    /// Same as [`ChebDisc::rhs`] without allocating.
    pub fn rhs_into(&self, c: &[f64], diff: f64, flux: f64, out: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let row = &self.a_flat[i * n..(i + 1) * n];
            let acc: f64 = row.iter().zip(c).map(|(a, c)| a * c).sum();
            out[i] = diff * acc + self.b[i] * flux;
        }
    }

    pub fn surface(&self, c: &[f64], diff: f64, flux: f64) -> f64 {
        self.e.iter().zip(c).map(|(e, c)| e * c).sum::<f64>() + self.f * flux / diff
    }

    pub fn average(&self, c: &[f64]) -> f64 {
        self.w.iter().zip(c).map(|(w, c)| w * c).sum()
    }

    /// Concentration at the centre, `c(0) = u'(0)`.
    pub fn center(&self, c: &[f64], diff: f64, flux: f64) -> f64 {
        let m = 2 * (self.n + 1);
        let mid = self.n + 1;
        let c_s = self.surface(c, diff, flux);
        let mut u = vec![0.0; m + 1];
        u[0] = self.radius * c_s;
        u[m] = -u[0];
        for k in 1..=self.n {
            u[k] = self.grid[k] * c[k - 1];
            u[m - k] = -u[k];
        }
        (0..=m).map(|j| self.d1[(mid, j)] * u[j]).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rejects_small_grids() {
        assert!(matches!(ChebDisc::new(2, 1e-5), Err(Error::Config(_))));
        assert!(ChebDisc::new(3, 1e-5).is_ok());
    }

    #[test]
    fn row_sums_vanish() {
        let disc = ChebDisc::new(5, 5e-6).unwrap();
        let d1 = disc.d1();
        for i in 0..d1.nrows() {
            let s: f64 = d1.row(i).iter().sum();
            assert!(s.abs() < 1e-9 * d1.row(i).amax(), "row {i}: {s}");
        }
    }

    #[test]
    fn d1_exact_on_low_degree_polynomials() {
        let r = 5e-6;
        let disc = ChebDisc::new(5, r).unwrap();
        let g = disc.grid();
        for deg in 0..=4 {
            let f: Vec<f64> = g.iter().map(|x| (x / r).powi(deg)).collect();
            let df = disc.d1() * DVector::from_column_slice(&f);
            for (k, x) in g.iter().enumerate() {
                let exact = if deg == 0 { 0.0 } else { deg as f64 * (x / r).powi(deg - 1) / r };
                assert!((df[k] - exact).abs() < 1e-8 / r, "deg {deg} node {k}");
            }
        }
    }

    #[test]
    fn linear_and_quadratic_profiles() {
        let r = 1e-5;
        let disc = ChebDisc::new(5, r).unwrap();
        let (a, b) = (1000.0, 3e8);
        let g = disc.grid();
        let lin: Vec<f64> = g.iter().map(|x| a + b * x).collect();
        let d = disc.d1() * DVector::from_column_slice(&lin);
        for v in d.iter() {
            assert_relative_eq!(*v, b, max_relative = 1e-10);
        }
        let quad: Vec<f64> = g.iter().map(|x| x * x).collect();
        let d = disc.d1() * DVector::from_column_slice(&quad);
        for (v, x) in d.iter().zip(g) {
            assert!((v - 2.0 * x).abs() < 1e-9 * r);
        }
    }

    #[test]
    fn uniform_profile_is_equilibrium() {
        let disc = ChebDisc::new(5, 6e-6).unwrap();
        let c = [21_000.0; 5];
        let d = 2e-14;
        let rhs = disc.rhs(&c, d, 0.0);
        let scale = d / (6e-6f64 * 6e-6) * c[0];
        for v in rhs {
            assert!(v.abs() <= 1e-10 * scale, "{v}");
        }
        assert_relative_eq!(disc.surface(&c, d, 0.0), c[0], max_relative = 1e-12);
        assert_relative_eq!(disc.center(&c, d, 0.0), c[0], max_relative = 1e-10);
        assert_relative_eq!(disc.average(&c), c[0], max_relative = 1e-12);
    }

    #[test]
    fn rhs_paths_agree() {
        let disc = ChebDisc::new(5, 5e-6).unwrap();
        let c = [1.0e4, 1.2e4, 1.5e4, 1.1e4, 0.9e4];
        let slow = disc.rhs(&c, 3e-14, 2e-5);
        let mut fast = [0.0; 5];
        disc.rhs_into(&c, 3e-14, 2e-5, &mut fast);
        for (a, b) in slow.iter().zip(&fast) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-12));
        }
    }

    #[test]
    fn inventory_weights_conserve_and_account_flux() {
        for n in [3, 5, 7] {
            let r = 4e-6;
            let disc = ChebDisc::new(n, r).unwrap();
            let wa = disc.average_weights().transpose() * disc.diffusion_operator();
            assert!(wa.amax() < 1e-9 * disc.diffusion_operator().amax());
            let wb = disc.average_weights().dot(disc.flux_vector());
            assert_relative_eq!(wb, 3.0 / r, max_relative = 1e-10);
        }
    }

    #[test]
    fn operator_is_stable() {
        let disc = ChebDisc::new(5, 1.0).unwrap();
        let eig = disc.diffusion_operator().clone().complex_eigenvalues();
        let mut zero = 0;
        for ev in eig.iter() {
            assert!(ev.im.abs() < 1e-8);
            if ev.re.abs() < 1e-8 {
                zero += 1;
            } else {
                assert!(ev.re < 0.0);
            }
        }
        assert_eq!(zero, 1);
    }
}
