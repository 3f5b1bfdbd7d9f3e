//! Dense primal simplex and the bucket-model dispatch LP.
//!
//! The bucket model is linear in its controls, so its arbitrage problem is an LP
//! once `|P_k|` and `max|P_k|` are split into epigraph variables. All right-hand
//! sides are non-negative, which makes the slack basis feasible and removes the
//! need for a phase-one problem.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::market::PriceSeries;
use crate::model::BatteryModel;
use crate::ocp::{assemble_nlp, Objective, OcpSpec};
use crate::profile::{ControlProfile, ControlUnit};
use crate::solver::{SolveReport, SolveStatus};

const PIVOT_TOL: f64 = 1e-12;
const PRICE_TOL: f64 = 1e-12;
const DEGENERATE_STREAK: usize = 50;

/// Optimal primal and dual solution of `max cᵀx, Ax ≤ b, x ≥ 0`.
#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    /// Row duals, non-negative.
    pub y: Vec<f64>,
    pub objective: f64,
    pub dual_objective: f64,
    /// Largest violation of `Ax ≤ b` and `x ≥ 0`.
    pub primal_infeasibility: f64,
    /// Largest violation of `Aᵀy ≥ c` and `y ≥ 0`.
    pub dual_infeasibility: f64,
    pub pivots: usize,
}

impl LpSolution {
    /// Relative primal-dual gap.
    pub fn gap(&self) -> f64 {
        (self.objective - self.dual_objective).abs() / self.objective.abs().max(1.0)
    }
}

/// Solves `max cᵀx` subject to `Ax ≤ b`, `x ≥ 0` with `b ≥ 0`, by the tableau
/// simplex method (Dantzig pricing, Bland's rule after degenerate streaks).
pub fn simplex_max(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> Result<LpSolution> {
    let m = a.len();
    let n = c.len();
    if b.len() != m || a.iter().any(|r| r.len() != n) {
        return Err(Error::Config("LP dimensions do not agree".into()));
    }
    if let Some(i) = b.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Config(format!("LP right-hand side {i} must be finite and non-negative")));
    }
    // equilibrate rows and the objective
    let row_scale: Vec<f64> = a
        .iter()
        .map(|r| {
            let mx = r.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if mx > 0.0 {
                1.0 / mx
            } else {
                1.0
            }
        })
        .collect();
    let c_max = c.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let c_scale = if c_max > 0.0 { 1.0 / c_max } else { 1.0 };

    let width = n + m + 1;
    let mut t = vec![0.0; m * width];
    for i in 0..m {
        let row = &mut t[i * width..(i + 1) * width];
        for j in 0..n {
            row[j] = a[i][j] * row_scale[i];
        }
        row[n + i] = 1.0;
        row[n + m] = b[i] * row_scale[i];
    }
    // reduced costs r_j = c_j − c_Bᵀ B⁻¹ A_j; objective value in the last slot
    let mut r = vec![0.0; width];
    for j in 0..n {
        r[j] = c[j] * c_scale;
    }
    let mut basis: Vec<usize> = (n..n + m).collect();
    let mut pivots = 0;
    let mut degenerate = 0;
    let max_pivots = 50 * (m + n) + 1000;
    loop {
        let bland = degenerate >= DEGENERATE_STREAK;
        let entering = if bland {
            (0..n + m).find(|&j| r[j] > PRICE_TOL)
        } else {
            (0..n + m)
                .filter(|&j| r[j] > PRICE_TOL)
                .max_by(|&i, &j| r[i].partial_cmp(&r[j]).unwrap())
        };
        let Some(e) = entering else { break };
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..m {
            let aie = t[i * width + e];
            if aie > PIVOT_TOL {
                let ratio = t[i * width + n + m] / aie;
                leave = match leave {
                    None => Some((i, ratio)),
                    Some((li, lr)) => {
                        if ratio < lr - 1e-14 || (ratio <= lr + 1e-14 && basis[i] < basis[li]) {
                            Some((i, ratio))
                        } else {
                            Some((li, lr))
                        }
                    }
                }
            }
        }
        let Some((l, ratio)) = leave else {
            return Err(Error::Config(
                "LP is unbounded; give the control a finite bound".into(),
            ));
        };
        degenerate = if ratio <= 1e-14 { degenerate + 1 } else { 0 };
        let piv = t[l * width + e];
        for v in &mut t[l * width..(l + 1) * width] {
            *v /= piv;
        }
        let prow: Vec<f64> = t[l * width..(l + 1) * width].to_vec();
        for i in 0..m {
            if i == l {
                continue;
            }
            let f = t[i * width + e];
            if f != 0.0 {
                for (v, p) in t[i * width..(i + 1) * width].iter_mut().zip(&prow) {
                    *v -= f * p;
                }
                t[i * width + e] = 0.0;
            }
        }
        let f = r[e];
        for (v, p) in r.iter_mut().zip(&prow) {
            *v -= f * p;
        }
        r[e] = 0.0;
        basis[l] = e;
        pivots += 1;
        if pivots > max_pivots {
            return Err(Error::Config(format!("simplex did not terminate after {pivots} pivots")));
        }
    }

    let mut x = vec![0.0; n];
    for (i, &bv) in basis.iter().enumerate() {
        if bv < n {
            x[bv] = t[i * width + n + m].max(0.0);
        }
    }
    // y_i (scaled problem) = −r_{slack i}; undo row and objective scaling
    let y: Vec<f64> = (0..m).map(|i| (-r[n + i]).max(0.0) * row_scale[i] / c_scale).collect();
    let objective: f64 = c.iter().zip(&x).map(|(ci, xi)| ci * xi).sum();
    let dual_objective: f64 = b.iter().zip(&y).map(|(bi, yi)| bi * yi).sum();
    let mut primal_infeasibility = 0.0_f64;
    for i in 0..m {
        let ax: f64 = a[i].iter().zip(&x).map(|(aij, xj)| aij * xj).sum();
        primal_infeasibility = primal_infeasibility.max((ax - b[i]) * row_scale[i]);
    }
    let mut dual_infeasibility = 0.0_f64;
    for j in 0..n {
        let aty: f64 = (0..m).map(|i| a[i][j] * y[i]).sum();
        dual_infeasibility = dual_infeasibility.max((c[j] - aty) * c_scale);
    }
    Ok(LpSolution {
        x,
        y,
        objective,
        dual_objective,
        primal_infeasibility,
        dual_infeasibility,
        pivots,
    })
}

/// Mean price over `[t0, t1)` of an hourly zero-order-hold series.
fn mean_price(prices: &PriceSeries, t0: f64, t1: f64) -> Result<f64> {
    let step = prices.step_s();
    let mut t = t0;
    let mut acc = 0.0;
    while t < t1 - 1e-9 {
        let next = (((t / step).floor() + 1.0) * step).min(t1);
        acc += prices.price_at(t)? * (next - t);
        t = next;
    }
    Ok(acc / (t1 - t0))
}

/// Solves the bucket arbitrage problem exactly as an LP:
///
/// maximise `N·Σ(−P_k·λ_k·Δt) − λ_degr·N·(k_power·m + k_throughput·Σ|P_k|Δt)` over
/// `P_k = p⁺_k − p⁻_k`, with `p⁺_k + p⁻_k ≤ m ≤ P_bound` and the state of charge
/// within `[0, 1]` after every interval.
pub fn solve_bucket_lp(spec: &OcpSpec) -> Result<(ControlProfile, SolveReport)> {
    let start = Instant::now();
    let BatteryModel::Bucket(params) = &spec.model else {
        return Err(Error::Config(format!(
            "the LP path needs the bucket model, got {}",
            spec.model.kind().name()
        )));
    };
    let (lo, hi) = spec.control_bounds;
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Config(
            "bucket LP needs finite power bounds; set control_bounds".into(),
        ));
    }
    let nlp = assemble_nlp(spec.clone())?;
    let k_n = nlp.n_intervals;
    let dt_h = spec.control_interval_s / 3600.0;
    let n_cells = params.n_cells;
    let z0 = spec.initial_state[0];
    let bound = hi.max(-lo);
    let profit = spec.objective == Objective::Profit;
    let w = if profit { params.lambda_degr_wh * n_cells } else { 0.0 };

    // columns: p⁺_0..p⁺_{K−1}, p⁻_0..p⁻_{K−1}, m
    let n = 2 * k_n + 1;
    let im = 2 * k_n;
    let mut c = vec![0.0; n];
    for k in 0..k_n {
        let t0 = k as f64 * spec.control_interval_s;
        let price = mean_price(&spec.prices, t0, t0 + spec.control_interval_s)?;
        let rev = n_cells * price * dt_h;
        c[k] = -rev - w * params.k_throughput * dt_h;
        c[k_n + k] = rev - w * params.k_throughput * dt_h;
    }
    c[im] = -w * params.k_power;

    let mut a = Vec::new();
    let mut b = Vec::new();
    for k in 0..k_n {
        let mut row = vec![0.0; n];
        row[k] = 1.0;
        row[k_n + k] = 1.0;
        row[im] = -1.0;
        a.push(row);
        b.push(0.0);
    }
    let mut row = vec![0.0; n];
    row[im] = 1.0;
    a.push(row);
    b.push(bound);
    if hi < bound {
        for k in 0..k_n {
            let mut row = vec![0.0; n];
            row[k] = 1.0;
            a.push(row);
            b.push(hi);
        }
    }
    if -lo < bound {
        for k in 0..k_n {
            let mut row = vec![0.0; n];
            row[k_n + k] = 1.0;
            a.push(row);
            b.push(-lo);
        }
    }
    let gain = dt_h / params.e_wh;
    for j in 0..k_n {
        let mut up = vec![0.0; n];
        let mut down = vec![0.0; n];
        for k in 0..=j {
            up[k] = gain;
            up[k_n + k] = -gain;
            down[k] = -gain;
            down[k_n + k] = gain;
        }
        a.push(up);
        b.push((1.0 - z0).max(0.0));
        a.push(down);
        b.push(z0.max(0.0));
    }

    let sol = simplex_max(&c, &a, &b)?;
    let values: Vec<f64> = (0..k_n).map(|k| sol.x[k] - sol.x[k_n + k]).collect();
    let soc_violation = {
        let mut z = z0;
        let mut v = 0.0_f64;
        for p in &values {
            z += p * gain;
            v = v.max(-z).max(z - 1.0);
        }
        v
    };
    let gap = sol.gap();
    let status = if gap <= 1e-9 && sol.primal_infeasibility <= 1e-9 && sol.dual_infeasibility <= 1e-9 {
        SolveStatus::Optimal
    } else {
        log::warn!(
            "bucket LP: gap {gap:.2e}, primal {:.2e}, dual {:.2e}",
            sol.primal_infeasibility,
            sol.dual_infeasibility
        );
        SolveStatus::MaxIter
    };
    let report = SolveReport {
        status,
        objective: sol.objective,
        max_defect: 0.0,
        max_violation: soc_violation.max(0.0),
        kkt: sol.dual_infeasibility.max(0.0),
        iterations: sol.pivots,
        wall_time_s: start.elapsed().as_secs_f64(),
        duality_gap: Some(gap),
    };
    Ok((ControlProfile::new(ControlUnit::Power, spec.control_interval_s, values)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bucket::BucketParams;

    #[test]
    fn textbook_lp() {
        // max 3x + 5y, x ≤ 4, 2y ≤ 12, 3x + 2y ≤ 18 → (2, 6), 36
        let a = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 2.0]];
        let s = simplex_max(&[3.0, 5.0], &a, &[4.0, 12.0, 18.0]).unwrap();
        assert!((s.x[0] - 2.0).abs() < 1e-12 && (s.x[1] - 6.0).abs() < 1e-12);
        assert!((s.objective - 36.0).abs() < 1e-12);
        assert!(s.gap() < 1e-12);
        assert!((s.y[1] - 1.5).abs() < 1e-12 && (s.y[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unbounded_is_reported() {
        let a = vec![vec![1.0, -1.0]];
        assert!(matches!(simplex_max(&[1.0, 1.0], &a, &[1.0]), Err(Error::Config(_))));
    }

    fn hourly_spec(prices_eur_mwh: &[f64], z0: f64, objective: Objective) -> OcpSpec {
        let p = BucketParams {
            e_wh: 1.0,
            n_cells: 1.0,
            ..BucketParams::default()
        };
        let prices = PriceSeries::from_eur_per_mwh(prices_eur_mwh).unwrap();
        let mut spec = OcpSpec::new(BatteryModel::Bucket(p), prices, objective, vec![z0]);
        spec.control_interval_s = 3600.0;
        spec
    }

    #[test]
    fn charge_low_sell_high() {
        // prices 1 and 3 per Wh; degradation far below the spread
        let spec = hourly_spec(&[1e6, 3e6], 0.0, Objective::Profit);
        let (profile, report) = solve_bucket_lp(&spec).unwrap();
        assert_eq!(report.status, SolveStatus::Optimal);
        assert!((profile.values[0] - 1.0).abs() < 1e-12);
        assert!((profile.values[1] + 1.0).abs() < 1e-12);
        // bang-bang candidates
        let mut best = f64::NEG_INFINITY;
        for u0 in [-1.0_f64, 0.0, 1.0] {
            for u1 in [-1.0_f64, 0.0, 1.0] {
                let (z1, z2) = (u0, u0 + u1);
                if !(0.0..=1.0).contains(&z1) || !(0.0..=1.0).contains(&z2) {
                    continue;
                }
                let rev = -(u0 * 1.0 + u1 * 3.0);
                let cost = 0.33 * (2.15e-4 * f64::max(u0.abs(), u1.abs()) + 1.25e-5 * (u0.abs() + u1.abs()));
                best = best.max(rev - cost);
            }
        }
        assert!((report.objective - best).abs() < 1e-12);
    }

    #[test]
    fn flat_prices_mean_rest() {
        let spec = hourly_spec(&[50.0; 6], 0.0, Objective::Profit);
        let (profile, report) = solve_bucket_lp(&spec).unwrap();
        assert!(profile.values.iter().all(|v| *v == 0.0));
        assert!(report.objective.abs() < 1e-15);
    }

    #[test]
    fn infinite_bounds_rejected() {
        let mut spec = hourly_spec(&[50.0, 60.0], 0.5, Objective::RevenueOnly);
        spec.control_bounds = (f64::NEG_INFINITY, f64::INFINITY);
        assert!(matches!(solve_bucket_lp(&spec), Err(Error::Config(_))));
    }
}
