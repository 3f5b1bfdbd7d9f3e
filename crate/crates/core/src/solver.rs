//! Augmented-Lagrangian solver for the shooting NLP.
//!
//! The shooting nodes are eliminated by forward integration, so every iterate has
//! zero defects and the solver works on the controls alone. Inequalities enter a
//! PHR augmented Lagrangian. Each subproblem is minimised by a projected
//! quasi-Newton method on the control box: dense damped BFGS for the objective plus
//! the Gauss-Newton curvature of the active penalty terms. Gradients come from an
//! adjoint sweep over the stored block Jacobians.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ocp::{NlpInstance, ObjectiveTerms};
use crate::profile::ControlProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    /// Objective (currency) at the returned controls.
    pub objective: f64,
    pub max_defect: f64,
    pub max_violation: f64,
    /// Scaled projected-gradient norm of the Lagrangian.
    pub kkt: f64,
    pub iterations: usize,
    pub wall_time_s: f64,
    /// Primal-dual gap, for solvers that produce one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duality_gap: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub kkt_tol: f64,
    pub feas_tol: f64,
    /// Violation up to which an iterate still counts as usable.
    pub acceptable_violation: f64,
    /// Cap on gradient evaluations.
    pub max_iter: usize,
    pub initial_penalty: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-6,
            feas_tol: 1e-8,
            acceptable_violation: 1e-4,
            max_iter: 3000,
            initial_penalty: 10.0,
        }
    }
}

/// Seam for plugging in other NLP solvers.
pub trait NlpSolver {
    fn solve(&self, nlp: &NlpInstance) -> Result<(ControlProfile, SolveReport)>;
}

#[derive(Debug, Clone, Default)]
pub struct AugmentedLagrangian {
    pub options: SolverOptions,
}

pub fn solve_nlp(nlp: &NlpInstance, options: &SolverOptions) -> Result<(ControlProfile, SolveReport)> {
    AugmentedLagrangian {
        options: options.clone(),
    }
    .solve(nlp)
}

/// Merit evaluation in scaled controls `s = u / u_scale`, minimised.
struct Problem<'a> {
    nlp: &'a NlpInstance,
    u_scale: f64,
    obj_scale: f64,
    lo: Vec<f64>,
    hi: Vec<f64>,
    evals: usize,
}

struct Point {
    s: Vec<f64>,
    nodes: Vec<f64>,
    outputs: Vec<f64>,
    /// Objective in currency.
    objective: f64,
    ineq: Vec<f64>,
    merit: f64,
}

impl Point {
    fn violation(&self) -> f64 {
        self.ineq.iter().fold(0.0_f64, |m, g| m.max(*g))
    }
}

/// First-order information at a point.
struct Derivs {
    jac: Vec<f64>,
    obj: ObjectiveTerms,
}

fn phr(g: f64, mu: f64, rho: f64) -> (f64, f64) {
    let t = g + mu / rho;
    if t > 0.0 {
        (0.5 * rho * t * t - mu * mu / (2.0 * rho), rho * t)
    } else {
        (-mu * mu / (2.0 * rho), 0.0)
    }
}

impl<'a> Problem<'a> {
    fn controls(&self, s: &[f64]) -> Vec<f64> {
        s.iter().map(|v| v * self.u_scale).collect()
    }

    fn acc_sum(&self, outputs: &[f64]) -> Vec<f64> {
        let nlp = self.nlp;
        let no = nlp.block_outputs();
        let mut acc = vec![0.0; nlp.n_acc];
        for k in 0..nlp.n_intervals {
            for (a, v) in acc.iter_mut().zip(&outputs[k * no + nlp.nx..k * no + nlp.nx + nlp.n_acc]) {
                *a += v;
            }
        }
        acc
    }

    fn merit(&self, objective: f64, ineq: &[f64], mu: &[f64], rho: f64) -> f64 {
        -objective / self.obj_scale + ineq.iter().zip(mu).map(|(g, m)| phr(*g, *m, rho).0).sum::<f64>()
    }

    fn point(&mut self, s: Vec<f64>, mu: &[f64], rho: f64) -> Result<Point> {
        let nlp = self.nlp;
        let u = self.controls(&s);
        let r = nlp.rollout(&u)?;
        let no = nlp.block_outputs();
        let ni = nlp.ineq_per_interval();
        let mut ineq = vec![0.0; nlp.n_inequalities()];
        for k in 0..nlp.n_intervals {
            nlp.interval_inequalities(
                &r.nodes[(k + 1) * nlp.nx..(k + 2) * nlp.nx],
                &r.outputs[k * no..(k + 1) * no],
                &mut ineq[k * ni..(k + 1) * ni],
            );
        }
        let objective = nlp.objective_terms(&self.acc_sum(&r.outputs), &r.nodes, &u).value;
        let merit = self.merit(objective, &ineq, mu, rho);
        self.evals += 1;
        Ok(Point {
            s,
            nodes: r.nodes,
            outputs: r.outputs,
            objective,
            ineq,
            merit,
        })
    }

    fn derivs(&self, p: &Point) -> Result<Derivs> {
        let u = self.controls(&p.s);
        Ok(Derivs {
            jac: self.nlp.block_jacobians(&p.nodes, &u)?,
            obj: self.nlp.objective_terms(&self.acc_sum(&p.outputs), &p.nodes, &u),
        })
    }

    /// Adjoint gradient with respect to `s` of `−J/obj_scale + Σ w_i·g_i`.
    fn gradient(&self, d: &Derivs, weights: Option<&[f64]>) -> Vec<f64> {
        let nlp = self.nlp;
        let nx = nlp.nx;
        let no = nlp.block_outputs();
        let ni = nlp.ineq_per_interval();
        let nb = nlp.n_state_bounds;
        let k_n = nlp.n_intervals;
        let size = no * (nx + 1);
        let f = -1.0 / self.obj_scale;
        let obj = &d.obj;

        let mut direct = obj.d_nodes.iter().map(|v| f * v).collect::<Vec<_>>();
        if let Some(weights) = weights {
            for (k, w) in weights.chunks(ni).enumerate() {
                for &(row, col, v) in &nlp.state_bound_jacobian() {
                    direct[(k + 1) * nx + col] += w[row] * v;
                }
            }
        }
        let mut lam = direct[k_n * nx..].to_vec();
        let mut grad = vec![0.0; k_n];
        let mut ybar = vec![0.0; no];
        for k in (0..k_n).rev() {
            ybar[..nx].copy_from_slice(&lam);
            for a in 0..nlp.n_acc {
                ybar[nx + a] = f * obj.d_acc[a];
            }
            for s in 0..nlp.n_volt {
                ybar[nx + nlp.n_acc + s] = match weights {
                    Some(w) => w[k * ni + nb + 2 * s] - w[k * ni + nb + 2 * s + 1],
                    None => 0.0,
                };
            }
            let jk = &d.jac[k * size..(k + 1) * size];
            let dot = |j: usize| -> f64 { jk[j * no..(j + 1) * no].iter().zip(&ybar).map(|(a, b)| a * b).sum() };
            grad[k] = (dot(nx) + f * obj.d_controls[k]) * self.u_scale;
            for j in 0..nx {
                lam[j] = dot(j) + direct[k * nx + j];
            }
        }
        grad
    }

    /// Gauss-Newton curvature `Σ ρ·∇g_i∇g_iᵀ` of the active penalty terms, from
    /// forward sensitivities of the nodes and voltage samples.
    fn penalty_curvature(&self, d: &Derivs, active: &[bool], rho: f64) -> DMatrix<f64> {
        let nlp = self.nlp;
        let nx = nlp.nx;
        let no = nlp.block_outputs();
        let ni = nlp.ineq_per_interval();
        let nb = nlp.n_state_bounds;
        let k_n = nlp.n_intervals;
        let size = no * (nx + 1);
        let bound_jac = nlp.state_bound_jacobian();
        let mut h = DMatrix::<f64>::zeros(k_n, k_n);
        // sensitivity of the current node, nx × (k + 1) used columns
        let mut sens = vec![0.0; nx * k_n];
        let mut next = vec![0.0; nx * k_n];
        let mut row = vec![0.0; k_n];
        let add = |h: &mut DMatrix<f64>, row: &[f64], n: usize| {
            for i in 0..n {
                if row[i] == 0.0 {
                    continue;
                }
                let ri = rho * row[i];
                for j in 0..n {
                    h[(i, j)] += ri * row[j];
                }
            }
        };
        for k in 0..k_n {
            let jk = &d.jac[k * size..(k + 1) * size];
            let n = k + 1;
            let out_row = |r: usize, sens: &[f64], row: &mut [f64]| {
                for c in 0..n {
                    row[c] = (0..nx).map(|j| jk[j * no + r] * sens[j * k_n + c]).sum::<f64>();
                }
                row[k] += jk[nx * no + r] * self.u_scale;
            };
            for r in 0..nx {
                out_row(r, &sens, &mut row);
                next[r * k_n..r * k_n + n].copy_from_slice(&row[..n]);
            }
            let act = &active[k * ni..(k + 1) * ni];
            for s in 0..nlp.n_volt {
                if act[nb + 2 * s] || act[nb + 2 * s + 1] {
                    out_row(nx + nlp.n_acc + s, &sens, &mut row);
                    let mult = act[nb + 2 * s] as u8 as f64 + act[nb + 2 * s + 1] as u8 as f64;
                    if mult > 1.0 {
                        row[..n].iter_mut().for_each(|v| *v *= mult.sqrt());
                    }
                    add(&mut h, &row, n);
                }
            }
            std::mem::swap(&mut sens, &mut next);
            for b in 0..nb {
                if !act[b] {
                    continue;
                }
                row[..n].iter_mut().for_each(|v| *v = 0.0);
                for &(r, c, v) in &bound_jac {
                    if r == b {
                        for j in 0..n {
                            row[j] += v * sens[c * k_n + j];
                        }
                    }
                }
                add(&mut h, &row, n);
            }
        }
        h
    }

    fn project(&self, s: &mut [f64]) {
        for ((v, l), h) in s.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(*l, *h);
        }
    }

    fn projected_gradient_norm(&self, s: &[f64], g: &[f64]) -> f64 {
        s.iter()
            .zip(g)
            .zip(self.lo.iter().zip(&self.hi))
            .map(|((v, gi), (l, h))| ((v - gi).clamp(*l, *h) - v).abs())
            .fold(0.0, f64::max)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Damped BFGS update of a dense Hessian approximation.
fn bfgs_update(b: &mut DMatrix<f64>, s: &[f64], y: &[f64]) {
    let sv = DVector::from_column_slice(s);
    let yv = DVector::from_column_slice(y);
    let bs = &*b * &sv;
    let sbs = sv.dot(&bs);
    if !(sbs > 0.0) {
        return;
    }
    let sy = sv.dot(&yv);
    let r = if sy >= 0.2 * sbs {
        yv
    } else {
        let theta = 0.8 * sbs / (sbs - sy);
        &yv * theta + &bs * (1.0 - theta)
    };
    let sr = sv.dot(&r);
    if !(sr > 0.0) {
        return;
    }
    *b += &r * r.transpose() / sr - &bs * bs.transpose() / sbs;
}

struct Best {
    s: Vec<f64>,
    objective: f64,
    violation: f64,
}

impl NlpSolver for AugmentedLagrangian {
    fn solve(&self, nlp: &NlpInstance) -> Result<(ControlProfile, SolveReport)> {
        let start = Instant::now();
        let o = &self.options;
        let u_scale = nlp.control_scale();
        let (lo, hi) = nlp.spec.control_bounds;
        let k_n = nlp.n_intervals;
        let mut prob = Problem {
            nlp,
            u_scale,
            obj_scale: 1.0,
            lo: vec![lo / u_scale; k_n],
            hi: vec![hi / u_scale; k_n],
            evals: 0,
        };
        let m_ineq = nlp.n_inequalities();
        let mut mu = vec![0.0; m_ineq];
        let mut rho = o.initial_penalty;

        let mut s0 = nlp.initial_controls();
        s0.iter_mut().for_each(|v| *v /= u_scale);
        prob.project(&mut s0);
        let mut p = prob.point(s0, &mu, rho)?;
        let mut d = prob.derivs(&p)?;
        let gmax = prob.gradient(&d, None).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if gmax > 0.0 && gmax.is_finite() {
            prob.obj_scale = gmax;
            d.obj = nlp.objective_terms(&prob.acc_sum(&p.outputs), &p.nodes, &prob.controls(&p.s));
        }
        p.merit = prob.merit(p.objective, &p.ineq, &mu, rho);
        let mut iterations = 1;

        let mut best: Option<Best> = None;
        let consider = |best: &mut Option<Best>, p: &Point| {
            let v = p.violation().max(0.0);
            if v > o.acceptable_violation {
                return;
            }
            let better = match best {
                None => true,
                Some(b) => {
                    if v <= o.feas_tol && b.violation <= o.feas_tol {
                        p.objective > b.objective
                    } else {
                        (p.objective > b.objective && v <= b.violation.max(o.feas_tol))
                            || (v < b.violation && p.objective >= b.objective)
                    }
                }
            };
            if better {
                *best = Some(Best {
                    s: p.s.clone(),
                    objective: p.objective,
                    violation: v,
                });
            }
        };
        consider(&mut best, &p);

        let mut b_obj = DMatrix::<f64>::identity(k_n, k_n) * 1e-2;
        let mut first_update = true;
        let mut idle_outer = 0;
        let mut omega = 1e-2_f64;
        let mut prev_violation = p.violation().max(0.0);
        let mut kkt;
        let mut status = None;
        let weights = |p: &Point, mu: &[f64], rho: f64| -> Vec<f64> {
            p.ineq.iter().zip(mu).map(|(g, m)| phr(*g, *m, rho).1).collect()
        };

        'outer: loop {
            let mut grad_f = prob.gradient(&d, None);
            let mut grad = prob.gradient(&d, Some(&weights(&p, &mu, rho)));
            let mut stalled = 0;
            let inner_start = iterations;
            loop {
                let pg = prob.projected_gradient_norm(&p.s, &grad);
                kkt = pg;
                log::trace!(
                    "iter {iterations}: merit {:.10e} pg {pg:.3e} violation {:.3e} rho {rho:.1e}",
                    p.merit,
                    p.violation()
                );
                if pg <= omega.max(o.kkt_tol) || stalled >= 3 {
                    break;
                }
                if iterations >= o.max_iter {
                    break 'outer;
                }
                // variables held at a bound by the gradient
                let eps = pg.min(1e-3);
                let free: Vec<usize> = (0..k_n)
                    .filter(|&i| {
                        let at_lo = p.s[i] <= prob.lo[i] + eps && grad[i] > 0.0;
                        let at_hi = p.s[i] >= prob.hi[i] - eps && grad[i] < 0.0;
                        !(at_lo || at_hi)
                    })
                    .collect();
                let active: Vec<bool> = p.ineq.iter().zip(&mu).map(|(g, m)| g + m / rho > 0.0).collect();
                let h = &b_obj + prob.penalty_curvature(&d, &active, rho);
                let nf = free.len();
                let mut dir = vec![0.0; k_n];
                if nf > 0 {
                    let hf = DMatrix::from_fn(nf, nf, |i, j| h[(free[i], free[j])]);
                    let scale = (0..nf).map(|i| hf[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
                    let hf = hf + DMatrix::identity(nf, nf) * (1e-12 * scale);
                    let gf = DVector::from_fn(nf, |i, _| -grad[free[i]]);
                    let step = match hf.cholesky() {
                        Some(c) => c.solve(&gf),
                        None => gf / scale,
                    };
                    for (i, &fi) in free.iter().enumerate() {
                        dir[fi] = step[i];
                    }
                }
                let mut t = 1.0;
                let mut accepted = None;
                for _ in 0..50 {
                    let mut trial: Vec<f64> = p.s.iter().zip(&dir).map(|(s, d)| s + t * d).collect();
                    prob.project(&mut trial);
                    let step: Vec<f64> = trial.iter().zip(&p.s).map(|(a, b)| a - b).collect();
                    if step.iter().all(|v| *v == 0.0) {
                        break;
                    }
                    let decrease = dot(&grad, &step);
                    if decrease < 0.0 {
                        if let Ok(q) = prob.point(trial, &mu, rho) {
                            if q.merit.is_finite() && q.merit <= p.merit + 1e-4 * decrease {
                                accepted = Some((q, step));
                                break;
                            }
                        }
                    }
                    t *= 0.5;
                }
                let Some((q, step)) = accepted else {
                    // no descent left at the resolution of the derivatives
                    log::trace!("line search stalled at pg {pg:.3e}");
                    break;
                };
                d = prob.derivs(&q)?;
                iterations += 1;
                let g_f_new = prob.gradient(&d, None);
                let y: Vec<f64> = g_f_new.iter().zip(&grad_f).map(|(a, b)| a - b).collect();
                if first_update {
                    let sy = dot(&step, &y);
                    if sy > 0.0 {
                        b_obj = DMatrix::identity(k_n, k_n) * (dot(&y, &y) / sy);
                    }
                    first_update = false;
                }
                bfgs_update(&mut b_obj, &step, &y);
                if p.merit - q.merit <= 1e-13 * p.merit.abs().max(1.0) {
                    stalled += 1;
                } else {
                    stalled = 0;
                }
                p = q;
                grad_f = g_f_new;
                grad = prob.gradient(&d, Some(&weights(&p, &mu, rho)));
                consider(&mut best, &p);
            }

            // multiplier and penalty update
            let v = p.violation().max(0.0);
            let new_mu: Vec<f64> = p.ineq.iter().zip(&mu).map(|(g, m)| (m + rho * g).max(0.0)).collect();
            let compl = p.ineq.iter().zip(&new_mu).map(|(g, m)| (g * m).abs()).fold(0.0, f64::max);
            let stationary = kkt <= o.kkt_tol;
            mu = new_mu;
            if v <= o.feas_tol && stationary && compl <= o.kkt_tol {
                status = Some(SolveStatus::Optimal);
                break;
            }
            if iterations >= o.max_iter {
                break;
            }
            idle_outer = if iterations == inner_start { idle_outer + 1 } else { 0 };
            if idle_outer >= 3 {
                // no accepted step under three successive penalty updates
                break;
            }
            if v > 0.25 * prev_violation && v > o.feas_tol {
                rho = (rho * 10.0).min(1e12);
            }
            prev_violation = v;
            omega = (omega * 0.1).max(o.kkt_tol * 0.1);
            p.merit = prob.merit(p.objective, &p.ineq, &mu, rho);
        }

        let (fin, status) = match status {
            Some(st) => (p, st),
            None => {
                let (s, st) = match &best {
                    Some(b) => (b.s.clone(), SolveStatus::MaxIter),
                    None => (p.s.clone(), SolveStatus::Infeasible),
                };
                let fin = prob.point(s, &mu, rho)?;
                kkt = match prob.derivs(&fin) {
                    Ok(d) => prob.projected_gradient_norm(&fin.s, &prob.gradient(&d, Some(&weights(&fin, &mu, rho)))),
                    Err(_) => f64::INFINITY,
                };
                (fin, st)
            }
        };
        let report = SolveReport {
            status,
            objective: fin.objective,
            max_defect: 0.0,
            max_violation: fin.violation().max(0.0),
            kkt,
            iterations,
            wall_time_s: start.elapsed().as_secs_f64(),
            duality_gap: None,
        };
        log::debug!(
            "solve {:?}: objective {:.6} violation {:.2e} kkt {:.2e} after {} iterations ({} rollouts)",
            report.status,
            report.objective,
            report.max_violation,
            report.kkt,
            report.iterations,
            prob.evals
        );
        let u = prob.controls(&fin.s);
        let profile = ControlProfile::new(nlp.spec.model.control_unit(), nlp.spec.control_interval_s, u)?;
        Ok((profile, report))
    }
}

/// Error helper for callers that require a usable solution.
pub fn require_usable(report: &SolveReport) -> Result<()> {
    match report.status {
        SolveStatus::Infeasible => Err(Error::Config(format!(
            "no feasible point found (violation {:.3e})",
            report.max_violation
        ))),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bucket::BucketParams;
    use crate::market::PriceSeries;
    use crate::model::BatteryModel;
    use crate::ocp::{assemble_nlp, Objective, OcpSpec};

    fn bucket_nlp(prices: &[f64], z0: f64) -> NlpInstance {
        let mut p = BucketParams::default();
        p.n_cells = 1.0;
        p.e_wh = 1.0;
        let prices = PriceSeries::from_eur_per_mwh(prices).unwrap();
        let mut spec = OcpSpec::new(BatteryModel::Bucket(p), prices, Objective::RevenueOnly, vec![z0]);
        spec.control_interval_s = 3600.0;
        spec.integration_step_s = 5.0;
        assemble_nlp(spec).unwrap()
    }

    #[test]
    fn two_interval_toy_is_bang_bang() {
        let nlp = bucket_nlp(&[20.0, 60.0], 0.0);
        let (profile, report) = solve_nlp(&nlp, &SolverOptions::default()).unwrap();
        assert_eq!(report.status, SolveStatus::Optimal);
        // exhaustive grid over the two controls
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        let n = 40;
        for i in 0..=n {
            for j in 0..=n {
                let u = [-1.0 + 2.0 * i as f64 / n as f64, -1.0 + 2.0 * j as f64 / n as f64];
                let z1 = u[0];
                let z2 = z1 + u[1];
                if !(0.0..=1.0).contains(&z1) || !(0.0..=1.0).contains(&z2) {
                    continue;
                }
                let rev = -(u[0] * 20e-6 + u[1] * 60e-6);
                if rev > best.0 {
                    best = (rev, u[0], u[1]);
                }
            }
        }
        assert!((profile.values[0] - best.1).abs() < 1e-4, "{:?} vs {:?}", profile.values, best);
        assert!((profile.values[1] - best.2).abs() < 1e-4);
        assert!((report.objective - best.0).abs() < 1e-9);
    }

    #[test]
    fn tighter_bounds_never_help() {
        let prices = [30.0, 10.0, 50.0, 70.0, 20.0, 40.0];
        let nlp = bucket_nlp(&prices, 0.5);
        let (_, wide) = solve_nlp(&nlp, &SolverOptions::default()).unwrap();
        let mut spec = nlp.spec.clone();
        spec.control_bounds = (-0.3, 0.3);
        let tight_nlp = assemble_nlp(spec).unwrap();
        let (_, tight) = solve_nlp(&tight_nlp, &SolverOptions::default()).unwrap();
        assert!(tight.objective <= wide.objective + 1e-9);
    }
}
