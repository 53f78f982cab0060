//! Weighted sparse group lasso surrogate.
//!
//! Minimizes, over an intercept and coefficients on weighted-standardized
//! columns,
//!
//! ```text
//! (1/2N) sum_i pi_i (y_i - b0 - x_i . beta)^2
//!     + lambda (1 - rho) sum_m tau_m ||beta_{g_m}||_2
//!     + lambda rho ||beta||_1
//! ```
//!
//! The group term selects whole modalities; the l1 term sparsifies within
//! them. Group penalty weights `tau_m = sqrt(p_m) * gamma_m` correct for
//! group size and for groups whose columns barely vary.
//!
//! Solver: cyclic block coordinate descent over modality groups. Each block
//! update first applies the exact group-zero subgradient check; active
//! groups are seeded off the group-zero point with one backtracking proximal
//! gradient step when needed, then polished by coordinate-wise safeguarded
//! Newton solves. Every step is an exact (or majorized) minimization, so the
//! objective never increases.

use crate::neighborhood::LocalDataset;
use crate::space::InstanceSpec;
use crate::stats;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SglError {
    #[error("design is degenerate: {0}")]
    DegenerateDesign(String),
    #[error("expected {expected} group penalty weights, got {got}")]
    BadTau { expected: usize, got: usize },
    #[error("bad config: {0}")]
    BadConfig(String),
}

fn default_lambda() -> f64 {
    0.004
}

fn default_l1_ratio() -> f64 {
    0.9
}

fn default_max_iters() -> usize {
    10_000
}

fn default_tol() -> f64 {
    1e-7
}

fn default_true() -> bool {
    true
}

fn default_ridge_lambda() -> f64 {
    1e-4
}

/// Regularization and solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SglConfig {
    /// Overall regularization strength.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// rho in [0,1]: 1 = pure l1, 0 = pure group penalty.
    #[serde(default = "default_l1_ratio")]
    pub l1_ratio: f64,
    /// Maximum outer sweeps over all groups.
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Convergence threshold on the max coefficient change per sweep.
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Re-estimate the selected coefficients with a small ridge penalty to
    /// undo l1 shrinkage, keeping the support fixed.
    #[serde(default = "default_true")]
    pub ridge_refit: bool,
    #[serde(default = "default_ridge_lambda")]
    pub ridge_lambda: f64,
}

impl Default for SglConfig {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            l1_ratio: default_l1_ratio(),
            max_iters: default_max_iters(),
            tol: default_tol(),
            ridge_refit: default_true(),
            ridge_lambda: default_ridge_lambda(),
        }
    }
}

impl SglConfig {
    fn validate(&self) -> Result<(), SglError> {
        if !(self.lambda > 0.0) {
            return Err(SglError::BadConfig("lambda must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.l1_ratio) {
            return Err(SglError::BadConfig("l1_ratio must lie in [0,1]".into()));
        }
        if !(self.tol > 0.0) {
            return Err(SglError::BadConfig("tol must be positive".into()));
        }
        Ok(())
    }
}

/// Threshold below which a weighted column scale counts as constant.
pub const CONSTANT_SCALE_EPS: f64 = 1e-12;

/// Cap on a group's inverse-spread factor before mean-1 rescaling.
const GAMMA_CAP: f64 = 1e6;

/// Weighted-standardized design: column j maps to (z_j - mu_j) / s_j.
/// Constant columns keep scale 1 and are pinned to coefficient 0.
#[derive(Debug, Clone)]
pub struct StandardizedDesign {
    /// K columns, each of length N.
    pub columns: Vec<Vec<f64>>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub constant: Vec<bool>,
}

impl StandardizedDesign {
    pub fn num_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }
}

/// Standardizes mask columns to weighted mean zero and unit weighted
/// variance under the locality weights.
pub fn standardize_weighted(dataset: &LocalDataset) -> StandardizedDesign {
    let n = dataset.n();
    let k = dataset.masks().first().map_or(0, |m| m.len());
    let w = dataset.weights();
    let mut columns = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut scales = Vec::with_capacity(k);
    let mut constant = Vec::with_capacity(k);
    for j in 0..k {
        let raw: Vec<f64> = (0..n).map(|i| dataset.masks()[i].get(j) as f64).collect();
        let mu = stats::weighted_mean(&raw, w);
        let sd = stats::weighted_std(&raw, w);
        if sd < CONSTANT_SCALE_EPS {
            columns.push(vec![0.0; n]);
            means.push(mu);
            scales.push(1.0);
            constant.push(true);
        } else {
            columns.push(raw.iter().map(|v| (v - mu) / sd).collect());
            means.push(mu);
            scales.push(sd);
            constant.push(false);
        }
    }
    StandardizedDesign {
        columns,
        means,
        scales,
        constant,
    }
}

/// Group penalty weights tau_m = sqrt(p_m) * gamma_m, where gamma_m is
/// inversely proportional to the mean weighted column spread of the group
/// (capped for zero-variance groups) and rescaled to mean 1.
pub fn group_penalty_weights(dataset: &LocalDataset, spec: &InstanceSpec) -> Vec<f64> {
    let n = dataset.n();
    let w = dataset.weights();
    let mut gamma: Vec<f64> = spec
        .groups()
        .map(|g| {
            let mean_sd = g
                .clone()
                .map(|j| {
                    let col: Vec<f64> = (0..n).map(|i| dataset.masks()[i].get(j) as f64).collect();
                    stats::weighted_std(&col, w)
                })
                .sum::<f64>()
                / g.len() as f64;
            if mean_sd > 0.0 {
                (1.0 / mean_sd).min(GAMMA_CAP)
            } else {
                GAMMA_CAP
            }
        })
        .collect();
    let mean_gamma = stats::mean(&gamma);
    for g in &mut gamma {
        *g /= mean_gamma;
    }
    spec.groups()
        .zip(&gamma)
        .map(|(g, gamma)| (g.len() as f64).sqrt() * gamma)
        .collect()
}

/// Solver outcome: coefficients in both coordinate systems, the selected
/// support, and fit diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateFit {
    /// Intercept in original (unstandardized) coordinates.
    pub beta0: f64,
    /// Coefficients in original coordinates.
    pub beta: Vec<f64>,
    /// Intercept over standardized columns.
    pub beta0_std: f64,
    /// Coefficients over standardized columns; attribution reads these.
    pub beta_std: Vec<f64>,
    /// Indices with nonzero coefficients.
    pub support: Vec<usize>,
    pub tau: Vec<f64>,
    /// Standardization transform: column means and scales.
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub constant_columns: Vec<bool>,
    /// Standardized coefficients before the ridge refit, when one ran.
    pub pre_refit_beta_std: Option<Vec<f64>>,
    pub diagnostics: FitDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// Final solver objective (standardized coordinates).
    pub objective: f64,
    /// Objective value after each sweep, starting at the zero solution.
    pub objective_trace: Vec<f64>,
    /// Weighted R^2 of the surrogate on the training neighborhood;
    /// `None` when the weighted target variance is zero.
    pub weighted_r2: Option<f64>,
    /// Sum of locality weights (the weights enter the loss unnormalized).
    pub weight_sum: f64,
    pub ridge_refit_applied: bool,
    pub ridge_refit_failed: bool,
}

impl SurrogateFit {
    /// Surrogate prediction for a raw mask (original coordinates).
    pub fn predict_bits(&self, bits: &[u8]) -> f64 {
        self.beta0
            + bits
                .iter()
                .zip(&self.beta)
                .map(|(&b, c)| b as f64 * c)
                .sum::<f64>()
    }
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Exact minimizer of (a/2)u^2 - c u + l1 |u| + gp sqrt(u^2 + rest_sq).
///
/// `rest_sq` is the squared norm of the other coefficients in the group.
/// With an empty rest the group term is gp |u| and the solve is closed-form;
/// otherwise the stationarity equation is solved by safeguarded Newton.
fn solve_coordinate(a: f64, c: f64, l1: f64, gp: f64, rest_sq: f64) -> f64 {
    debug_assert!(a > 0.0);
    if gp == 0.0 || rest_sq == 0.0 {
        return soft_threshold(c, l1 + if rest_sq == 0.0 { gp } else { 0.0 }) / a;
    }
    let cc = c.abs();
    if cc <= l1 {
        return 0.0;
    }
    let sign = c.signum();
    // psi(u) = a u - cc + l1 + gp u / sqrt(u^2 + rest_sq); root in (0, cc/a].
    let mut lo = 0.0;
    let mut hi = cc / a;
    let mut u = (soft_threshold(cc, l1) / a).min(hi);
    if u <= 0.0 {
        u = 0.5 * hi;
    }
    for _ in 0..100 {
        let root = (u * u + rest_sq).sqrt();
        let psi = a * u - cc + l1 + gp * u / root;
        if psi.abs() <= 1e-15 * (1.0 + cc) {
            break;
        }
        if psi > 0.0 {
            hi = u;
        } else {
            lo = u;
        }
        let dpsi = a + gp * rest_sq / (root * root * root);
        let newton = u - psi / dpsi;
        u = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    sign * u
}

/// Penalty part of the objective for standardized coefficients.
fn penalty(beta: &[f64], spec: &InstanceSpec, cfg: &SglConfig, tau: &[f64]) -> f64 {
    let group_term: f64 = spec
        .groups()
        .zip(tau)
        .map(|(g, t)| {
            let norm = g.map(|j| beta[j] * beta[j]).sum::<f64>().sqrt();
            t * norm
        })
        .sum();
    let l1_term: f64 = beta.iter().map(|b| b.abs()).sum();
    cfg.lambda * (1.0 - cfg.l1_ratio) * group_term + cfg.lambda * cfg.l1_ratio * l1_term
}

/// Full objective on an explicit design: weighted quadratic loss over
/// `columns` plus the sparse group penalty.
pub fn objective(
    columns: &[Vec<f64>],
    targets: &[f64],
    weights: &[f64],
    beta0: f64,
    beta: &[f64],
    cfg: &SglConfig,
    tau: &[f64],
    spec: &InstanceSpec,
) -> f64 {
    let n = targets.len();
    let mut loss = 0.0;
    for i in 0..n {
        let pred = beta0
            + columns
                .iter()
                .zip(beta)
                .map(|(col, b)| col[i] * b)
                .sum::<f64>();
        let res = targets[i] - pred;
        loss += weights[i] * res * res;
    }
    loss / (2.0 * n as f64) + penalty(beta, spec, cfg, tau)
}

/// Objective evaluated on the raw binary design of `dataset` (original
/// coordinates).
pub fn objective_on_dataset(
    dataset: &LocalDataset,
    beta0: f64,
    beta: &[f64],
    cfg: &SglConfig,
    tau: &[f64],
    spec: &InstanceSpec,
) -> f64 {
    let k = spec.total_units();
    let columns: Vec<Vec<f64>> = (0..k)
        .map(|j| dataset.masks().iter().map(|m| m.get(j) as f64).collect())
        .collect();
    objective(
        &columns,
        dataset.targets(),
        dataset.weights(),
        beta0,
        beta,
        cfg,
        tau,
        spec,
    )
}

struct SolverState<'a> {
    design: &'a StandardizedDesign,
    weights: &'a [f64],
    n: f64,
    /// (1/N) sum_i w_i x_ij^2 per column.
    quad: Vec<f64>,
    beta: Vec<f64>,
    beta0: f64,
    /// Residual y_i - beta0 - x_i . beta.
    residual: Vec<f64>,
}

impl<'a> SolverState<'a> {
    /// (1/N) sum_i w_i r_i x_ij over an arbitrary residual vector.
    fn weighted_dot(&self, col: usize, residual: &[f64]) -> f64 {
        let x = &self.design.columns[col];
        residual
            .iter()
            .zip(x)
            .zip(self.weights)
            .map(|((r, xv), w)| w * r * xv)
            .sum::<f64>()
            / self.n
    }

    fn set_coefficient(&mut self, col: usize, value: f64) -> f64 {
        let old = self.beta[col];
        if value == old {
            return 0.0;
        }
        let x = &self.design.columns[col];
        for (r, xv) in self.residual.iter_mut().zip(x) {
            *r += xv * (old - value);
        }
        self.beta[col] = value;
        (value - old).abs()
    }
}

/// Fits the weighted sparse group lasso on the standardized design.
///
/// Returns the best iterate with `converged = false` in the diagnostics if
/// `max_iters` sweeps did not reach `tol`.
pub fn fit(
    dataset: &LocalDataset,
    spec: &InstanceSpec,
    cfg: &SglConfig,
    tau: &[f64],
) -> Result<SurrogateFit, SglError> {
    cfg.validate()?;
    if tau.len() != spec.num_modalities() {
        return Err(SglError::BadTau {
            expected: spec.num_modalities(),
            got: tau.len(),
        });
    }
    let n = dataset.n();
    if n < 2 {
        return Err(SglError::DegenerateDesign(format!("only {n} rows")));
    }
    if dataset.masks().iter().any(|m| m.len() != spec.total_units()) {
        return Err(SglError::DegenerateDesign(
            "mask length does not match the instance spec".into(),
        ));
    }
    let distinct = {
        let mut seen = dataset.masks().to_vec();
        seen.sort_by(|a, b| a.bits().cmp(b.bits()));
        seen.dedup();
        seen.len()
    };
    if distinct < 2 {
        return Err(SglError::DegenerateDesign(
            "fewer than 2 distinct masks".into(),
        ));
    }

    let design = standardize_weighted(dataset);
    let k = design.columns.len();
    let w = dataset.weights();
    let y = dataset.targets();
    let nf = n as f64;
    let sw: f64 = w.iter().sum();
    let ybar = stats::weighted_mean(y, w);

    let quad: Vec<f64> = (0..k)
        .map(|j| {
            if design.constant[j] {
                0.0
            } else {
                design.columns[j]
                    .iter()
                    .zip(w)
                    .map(|(x, wi)| wi * x * x)
                    .sum::<f64>()
                    / nf
            }
        })
        .collect();

    let mut state = SolverState {
        design: &design,
        weights: w,
        n: nf,
        quad,
        beta: vec![0.0; k],
        beta0: ybar,
        residual: y.iter().map(|yi| yi - ybar).collect(),
    };

    let l1 = cfg.lambda * cfg.l1_ratio;
    let group_pen: Vec<f64> = tau.iter().map(|t| cfg.lambda * (1.0 - cfg.l1_ratio) * t).collect();
    let active_cols: Vec<Vec<usize>> = spec
        .groups()
        .map(|g| g.filter(|&j| !design.constant[j]).collect())
        .collect();

    let objective_now = |st: &SolverState| -> f64 {
        let loss = st
            .residual
            .iter()
            .zip(w)
            .map(|(r, wi)| wi * r * r)
            .sum::<f64>()
            / (2.0 * nf);
        loss + penalty(&st.beta, spec, cfg, tau)
    };

    let mut trace = vec![objective_now(&state)];
    let mut converged = false;
    let mut iterations = 0;

    for sweep in 1..=cfg.max_iters {
        let mut max_change: f64 = 0.0;
        for (m, cols) in active_cols.iter().enumerate() {
            if cols.is_empty() {
                continue;
            }
            max_change = max_change.max(update_group(&mut state, cols, l1, group_pen[m], cfg.tol));
        }
        // Intercept in closed form; centering keeps this near zero.
        let delta0: f64 = state
            .residual
            .iter()
            .zip(w)
            .map(|(r, wi)| wi * r)
            .sum::<f64>()
            / sw;
        state.beta0 += delta0;
        for r in &mut state.residual {
            *r -= delta0;
        }
        max_change = max_change.max(delta0.abs());

        trace.push(objective_now(&state));
        iterations = sweep;
        if max_change < cfg.tol {
            converged = true;
            break;
        }
    }

    let beta_std = state.beta;
    let beta0_std = state.beta0;
    let support: Vec<usize> = (0..k).filter(|&j| beta_std[j] != 0.0).collect();
    let (beta0, beta) = to_original_coordinates(beta0_std, &beta_std, &design);
    let weighted_r2 = stats_weighted_r2_from_residual(&state.residual, y, w);

    Ok(SurrogateFit {
        beta0,
        beta,
        beta0_std,
        beta_std,
        support,
        tau: tau.to_vec(),
        means: design.means,
        scales: design.scales,
        constant_columns: design.constant,
        pre_refit_beta_std: None,
        diagnostics: FitDiagnostics {
            iterations,
            converged,
            objective: *trace.last().expect("non-empty trace"),
            objective_trace: trace,
            weighted_r2,
            weight_sum: sw,
            ridge_refit_applied: false,
            ridge_refit_failed: false,
        },
    })
}

/// One block update for a group: exact group-zero check, then coordinate
/// polishing (seeded by a proximal gradient step when leaving zero).
/// Returns the max coefficient change.
fn update_group(
    state: &mut SolverState,
    cols: &[usize],
    l1: f64,
    gp: f64,
    tol: f64,
) -> f64 {
    // Partial residual with this group's contribution restored.
    let mut partial = state.residual.clone();
    let mut group_is_zero = true;
    for &j in cols {
        let b = state.beta[j];
        if b != 0.0 {
            group_is_zero = false;
            let x = &state.design.columns[j];
            for (r, xv) in partial.iter_mut().zip(x) {
                *r += xv * b;
            }
        }
    }
    let grad_at_zero: Vec<f64> = cols.iter().map(|&j| state.weighted_dot(j, &partial)).collect();
    let thresholded_norm = grad_at_zero
        .iter()
        .map(|c| {
            let s = soft_threshold(*c, l1);
            s * s
        })
        .sum::<f64>()
        .sqrt();

    if thresholded_norm <= gp {
        // Zero is the exact block minimizer.
        let mut max_change: f64 = 0.0;
        for &j in cols {
            max_change = max_change.max(state.set_coefficient(j, 0.0));
        }
        return max_change;
    }

    let mut max_change: f64 = 0.0;
    if group_is_zero && gp > 0.0 {
        max_change = prox_seed_step(state, cols, &grad_at_zero, l1, gp);
    }

    // Coordinate-wise exact minimization within the active group.
    let inner_tol = (tol * 0.1).max(f64::EPSILON);
    for _ in 0..50 {
        let mut inner_change: f64 = 0.0;
        let mut group_norm_sq: f64 = cols.iter().map(|&j| state.beta[j] * state.beta[j]).sum();
        for &j in cols {
            let a = state.quad[j];
            let bj = state.beta[j];
            let c = state.weighted_dot(j, &state.residual) + a * bj;
            let rest_sq = (group_norm_sq - bj * bj).max(0.0);
            let new = solve_coordinate(a, c, l1, gp, rest_sq);
            let change = state.set_coefficient(j, new);
            if change > 0.0 {
                group_norm_sq = rest_sq + new * new;
                inner_change = inner_change.max(change);
            }
        }
        max_change = max_change.max(inner_change);
        if inner_change < inner_tol {
            break;
        }
    }
    max_change
}

/// Backtracking proximal gradient step on one group, used to move an active
/// group off the (non-smooth) all-zero point. The step is accepted under the
/// standard quadratic majorization, so the objective cannot increase.
fn prox_seed_step(
    state: &mut SolverState,
    cols: &[usize],
    grad_at_zero: &[f64],
    l1: f64,
    gp: f64,
) -> f64 {
    let mean_quad =
        cols.iter().map(|&j| state.quad[j]).sum::<f64>() / cols.len() as f64;
    let mut step = 1.0 / mean_quad.max(f64::MIN_POSITIVE);
    let base_loss: f64 = state
        .residual
        .iter()
        .zip(state.weights)
        .map(|(r, w)| w * r * r)
        .sum::<f64>()
        / (2.0 * state.n);

    for _ in 0..60 {
        // prox of step*(l1 |.| + gp ||.||) at step * grad_at_zero
        // (gradient of the loss at the zero group is -grad_at_zero).
        let shrunk: Vec<f64> = grad_at_zero
            .iter()
            .map(|c| soft_threshold(step * c, step * l1))
            .collect();
        let norm = shrunk.iter().map(|s| s * s).sum::<f64>().sqrt();
        if norm <= step * gp {
            return 0.0;
        }
        let factor = 1.0 - step * gp / norm;
        let candidate: Vec<f64> = shrunk.iter().map(|s| factor * s).collect();

        // Majorization check: loss(b) <= loss(0) - g.b + ||b||^2 / (2 step).
        let mut new_loss = 0.0;
        {
            let mut residual = state.residual.clone();
            for (idx, &j) in cols.iter().enumerate() {
                let x = &state.design.columns[j];
                for (r, xv) in residual.iter_mut().zip(x) {
                    *r -= xv * candidate[idx];
                }
            }
            for (r, w) in residual.iter().zip(state.weights) {
                new_loss += w * r * r;
            }
            new_loss /= 2.0 * state.n;
        }
        let linear: f64 = grad_at_zero
            .iter()
            .zip(&candidate)
            .map(|(g, b)| g * b)
            .sum();
        let quad_term: f64 = candidate.iter().map(|b| b * b).sum::<f64>() / (2.0 * step);
        if new_loss <= base_loss - linear + quad_term + 1e-12 * (1.0 + base_loss) {
            let mut max_change: f64 = 0.0;
            for (idx, &j) in cols.iter().enumerate() {
                max_change = max_change.max(state.set_coefficient(j, candidate[idx]));
            }
            return max_change;
        }
        step *= 0.5;
    }
    0.0
}

fn to_original_coordinates(
    beta0_std: f64,
    beta_std: &[f64],
    design: &StandardizedDesign,
) -> (f64, Vec<f64>) {
    let beta: Vec<f64> = beta_std
        .iter()
        .zip(&design.scales)
        .map(|(b, s)| b / s)
        .collect();
    let shift: f64 = beta.iter().zip(&design.means).map(|(b, mu)| b * mu).sum();
    (beta0_std - shift, beta)
}

fn stats_weighted_r2_from_residual(residual: &[f64], y: &[f64], w: &[f64]) -> Option<f64> {
    let ybar = stats::weighted_mean(y, w);
    let ss_tot: f64 = y
        .iter()
        .zip(w)
        .map(|(yi, wi)| wi * (yi - ybar) * (yi - ybar))
        .sum();
    if ss_tot <= 0.0 {
        return None;
    }
    let ss_res: f64 = residual.iter().zip(w).map(|(r, wi)| wi * r * r).sum();
    Some(1.0 - ss_res / ss_tot)
}

/// Support-preserving ridge refit: re-solves a weighted ridge restricted to
/// the selected support (standardized coordinates), keeping every zero
/// coefficient at exactly zero. On a singular system the original fit is
/// returned with `ridge_refit_failed` set.
pub fn ridge_refit(
    fit: &SurrogateFit,
    dataset: &LocalDataset,
    spec: &InstanceSpec,
    ridge_lambda: f64,
) -> SurrogateFit {
    debug_assert_eq!(fit.beta_std.len(), spec.total_units());
    if fit.support.is_empty() {
        return fit.clone();
    }
    let design = standardize_weighted(dataset);
    let n = dataset.n() as f64;
    let w = dataset.weights();
    let y = dataset.targets();
    let ybar = stats::weighted_mean(y, w);
    let support = &fit.support;
    let s = support.len();

    // Normal equations (A' W A + N*ridge I) b = A' W y_centered over the
    // support columns; the intercept decouples because columns are
    // weighted-centered.
    let mut gram = vec![vec![0.0; s]; s];
    let mut rhs = vec![0.0; s];
    for (p, &jp) in support.iter().enumerate() {
        let xp = &design.columns[jp];
        rhs[p] = xp
            .iter()
            .zip(y)
            .zip(w)
            .map(|((x, yi), wi)| wi * x * (yi - ybar))
            .sum();
        for (q, &jq) in support.iter().enumerate().skip(p) {
            let xq = &design.columns[jq];
            let dot: f64 = xp.iter().zip(xq).zip(w).map(|((a, b), wi)| wi * a * b).sum();
            gram[p][q] = dot;
            gram[q][p] = dot;
        }
        gram[p][p] += n * ridge_lambda;
    }

    let solution = match cholesky_solve(&mut gram, &rhs) {
        Some(sol) => sol,
        None => {
            let mut failed = fit.clone();
            failed.diagnostics.ridge_refit_failed = true;
            return failed;
        }
    };

    let mut beta_std = vec![0.0; fit.beta_std.len()];
    for (p, &j) in support.iter().enumerate() {
        beta_std[j] = solution[p];
    }
    let beta0_std = ybar;
    let (beta0, beta) = to_original_coordinates(beta0_std, &beta_std, &design);

    let residual: Vec<f64> = (0..dataset.n())
        .map(|i| {
            let pred = beta0_std
                + support
                    .iter()
                    .map(|&j| design.columns[j][i] * beta_std[j])
                    .sum::<f64>();
            y[i] - pred
        })
        .collect();
    let weighted_r2 = stats_weighted_r2_from_residual(&residual, y, w);

    let mut refit = fit.clone();
    refit.pre_refit_beta_std = Some(fit.beta_std.clone());
    refit.beta_std = beta_std;
    refit.beta0_std = beta0_std;
    refit.beta = beta;
    refit.beta0 = beta0;
    refit.diagnostics.weighted_r2 = weighted_r2;
    refit.diagnostics.ridge_refit_applied = true;
    debug_assert_eq!(refit.support, fit.support);
    refit
}

/// Cholesky solve for a small symmetric positive definite system; `a` is
/// clobbered. Returns `None` when a pivot is not strictly positive.
fn cholesky_solve(a: &mut [Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    // Factor a = L L'.
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= a[i][k] * a[j][k];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                a[i][i] = sum.sqrt();
            } else {
                a[i][j] = sum / a[j][j];
            }
        }
    }
    // Forward then backward substitution.
    let mut x = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            let lik = a[i][k];
            x[i] -= lik * x[k];
        }
        x[i] /= a[i][i];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let lki = a[k][i];
            x[i] -= lki * x[k];
        }
        x[i] /= a[i][i];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blackbox::{BlackBoxSession, Synthetic, TargetSelector};
    use crate::neighborhood::{build_local_dataset, KernelConfig, SamplingConfig};
    use crate::space::MaskVector;

    fn spec(counts: &[usize]) -> InstanceSpec {
        let names: Vec<String> = (0..counts.len()).map(|i| format!("m{i}")).collect();
        InstanceSpec::new(names, counts.to_vec()).unwrap()
    }

    fn dataset_from_rows(rows: &[(&[u8], f64, f64)]) -> LocalDataset {
        LocalDataset::new(
            rows.iter().map(|(bits, _, _)| MaskVector::new(bits.to_vec())).collect(),
            rows.iter().map(|&(_, y, _)| y).collect(),
            rows.iter().map(|&(_, _, w)| w).collect(),
        )
        .unwrap()
    }

    fn synthetic_dataset(
        spec: &InstanceSpec,
        oracle: Synthetic,
        n: usize,
        seed: u64,
    ) -> LocalDataset {
        let session = BlackBoxSession::new(Box::new(oracle));
        build_local_dataset(
            spec,
            &session,
            &TargetSelector::identity(0),
            &SamplingConfig {
                n,
                p_keep: 0.5,
                seed,
                batch_size: 64,
            },
            &KernelConfig::default(),
        )
        .unwrap()
        .dataset
    }

    #[test]
    fn standardize_matches_hand_case() {
        let ds = dataset_from_rows(&[(&[0, 1], 0.0, 1.0), (&[1, 1], 1.0, 1.0)]);
        let design = standardize_weighted(&ds);
        assert_eq!(design.columns[0], vec![-1.0, 1.0]);
        assert_eq!(design.means[0], 0.5);
        assert_eq!(design.scales[0], 0.5);
        assert!(!design.constant[0]);
        // Second column is all ones: flagged constant, zeroed.
        assert!(design.constant[1]);
        assert_eq!(design.columns[1], vec![0.0, 0.0]);
        assert_eq!(design.scales[1], 1.0);
    }

    #[test]
    fn concentrated_weights_flag_all_columns_constant() {
        let ds = LocalDataset::new(
            vec![MaskVector::new(vec![1, 1]), MaskVector::new(vec![0, 1]), MaskVector::new(vec![1, 0])],
            vec![1.0, 0.0, 0.0],
            vec![1.0, 1e-30, 1e-30],
        )
        .unwrap();
        let design = standardize_weighted(&ds);
        assert!(design.constant.iter().all(|&c| c));
    }

    #[test]
    fn tau_is_sqrt_size_for_symmetric_groups() {
        let sp = spec(&[2, 2]);
        // Bernoulli columns with the same spread in both groups.
        let ds = dataset_from_rows(&[
            (&[1, 0, 1, 0], 1.0, 1.0),
            (&[0, 1, 0, 1], 0.0, 1.0),
            (&[1, 1, 1, 1], 1.0, 1.0),
            (&[0, 0, 0, 0], 0.0, 1.0),
        ]);
        let tau = group_penalty_weights(&ds, &sp);
        for t in tau {
            assert!((t - 2f64.sqrt()).abs() < 1e-12, "tau {t}");
        }
    }

    #[test]
    fn tau_single_group_is_sqrt_k() {
        let sp = spec(&[3]);
        let ds = dataset_from_rows(&[
            (&[1, 0, 1], 1.0, 1.0),
            (&[0, 1, 0], 0.0, 1.0),
            (&[1, 1, 0], 1.0, 1.0),
        ]);
        let tau = group_penalty_weights(&ds, &sp);
        assert_eq!(tau.len(), 1);
        assert!((tau[0] - 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn tau_unequal_spreads_follow_inverse_std() {
        // Two singleton groups. Column 0 is on for half the row mass
        // (sd 1/2), column 1 for a quarter (sd sqrt(3)/4). gamma is the
        // inverse spread rescaled to mean 1; singleton groups give
        // tau = gamma.
        let sp = spec(&[1, 1]);
        let ds = dataset_from_rows(&[
            (&[0, 0], 0.0, 1.0),
            (&[1, 0], 0.0, 1.0),
            (&[0, 1], 0.0, 1.0),
            (&[1, 0], 0.0, 1.0),
        ]);
        let tau = group_penalty_weights(&ds, &sp);
        let g0 = 1.0 / 0.5;
        let g1 = 4.0 / 3f64.sqrt();
        let mean = (g0 + g1) / 2.0;
        assert!((tau[0] - g0 / mean).abs() < 1e-12);
        assert!((tau[1] - g1 / mean).abs() < 1e-12);
    }

    #[test]
    fn tau_caps_zero_variance_groups() {
        // Column 1 never switches on: its group takes the capped gamma and
        // dominates after the mean-1 rescale.
        let sp = spec(&[1, 1]);
        let ds = dataset_from_rows(&[(&[0, 0], 0.0, 1.0), (&[1, 0], 0.0, 1.0)]);
        let tau = group_penalty_weights(&ds, &sp);
        let g0 = 2.0;
        let g1 = 1e6;
        let mean = (g0 + g1) / 2.0;
        assert!((tau[0] - g0 / mean).abs() < 1e-9);
        assert!((tau[1] - g1 / mean).abs() < 1e-9);
    }

    #[test]
    fn huge_lambda_gives_zero_coefficients_and_weighted_mean_intercept() {
        let sp = spec(&[2, 1]);
        let oracle = Synthetic::linear(&sp, vec![1.0, -2.0, 0.5], 0.3).unwrap();
        let ds = synthetic_dataset(&sp, oracle, 60, 4);
        let tau = group_penalty_weights(&ds, &sp);
        let cfg = SglConfig {
            lambda: 1e6,
            ..SglConfig::default()
        };
        let fit = fit(&ds, &sp, &cfg, &tau).unwrap();
        assert!(fit.beta_std.iter().all(|&b| b == 0.0));
        assert!(fit.support.is_empty());
        let ybar = stats::weighted_mean(ds.targets(), ds.weights());
        assert!((fit.beta0 - ybar).abs() < 1e-12);
    }

    /// Closed-form weighted least squares via normal equations (intercept
    /// included), solved with the same small Cholesky helper on an
    /// independently assembled system.
    fn wls_oracle(ds: &LocalDataset, k: usize) -> (f64, Vec<f64>) {
        let n = ds.n();
        let d = k + 1;
        let mut gram = vec![vec![0.0; d]; d];
        let mut rhs = vec![0.0; d];
        let row = |i: usize, j: usize| -> f64 {
            if j == 0 {
                1.0
            } else {
                ds.masks()[i].get(j - 1) as f64
            }
        };
        for i in 0..n {
            let w = ds.weights()[i];
            for p in 0..d {
                rhs[p] += w * row(i, p) * ds.targets()[i];
                for q in 0..d {
                    gram[p][q] += w * row(i, p) * row(i, q);
                }
            }
        }
        let sol = cholesky_solve(&mut gram, &rhs).expect("well-conditioned");
        (sol[0], sol[1..].to_vec())
    }

    #[test]
    fn vanishing_lambda_recovers_weighted_least_squares() {
        let sp = spec(&[2, 1]);
        let oracle = Synthetic::linear(&sp, vec![1.5, -0.75, 2.0], 0.4).unwrap();
        let ds = synthetic_dataset(&sp, oracle, 120, 9);
        let tau = group_penalty_weights(&ds, &sp);
        let cfg = SglConfig {
            lambda: 1e-12,
            tol: 1e-10,
            ..SglConfig::default()
        };
        let fit = fit(&ds, &sp, &cfg, &tau).unwrap();
        let (b0, b) = wls_oracle(&ds, 3);
        assert!((fit.beta0 - b0).abs() < 1e-6, "{} vs {}", fit.beta0, b0);
        for (a, e) in fit.beta.iter().zip(&b) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn pure_l1_on_orthonormal_design_matches_soft_threshold() {
        // Full factorial over 2 bits with uniform weights: standardized
        // columns are orthogonal with (1/N) sum x^2 = 1, so each lasso
        // coordinate solves soft(ols_j, lambda) exactly.
        let sp = spec(&[1, 1]);
        let y = [0.0, 0.9, 2.1, 2.6];
        let ds = LocalDataset::new(
            vec![
                MaskVector::new(vec![0, 0]),
                MaskVector::new(vec![0, 1]),
                MaskVector::new(vec![1, 0]),
                MaskVector::new(vec![1, 1]),
            ],
            y.to_vec(),
            vec![1.0; 4],
        )
        .unwrap();
        let design = standardize_weighted(&ds);
        let ybar = stats::mean(&y);
        let ols: Vec<f64> = (0..2)
            .map(|j| {
                design.columns[j]
                    .iter()
                    .zip(&y)
                    .map(|(x, yi)| x * (yi - ybar))
                    .sum::<f64>()
                    / 4.0
            })
            .collect();
        for lambda in [0.05, 0.4, 2.0] {
            let cfg = SglConfig {
                lambda,
                l1_ratio: 1.0,
                tol: 1e-12,
                ..SglConfig::default()
            };
            let tau = vec![1.0, 1.0];
            let fit = fit(&ds, &sp, &cfg, &tau).unwrap();
            for j in 0..2 {
                let expected = soft_threshold(ols[j], lambda);
                assert!(
                    (fit.beta_std[j] - expected).abs() < 1e-9,
                    "lambda {lambda} col {j}: {} vs {expected}",
                    fit.beta_std[j]
                );
            }
        }
    }

    #[test]
    fn objective_matches_plug_in_values() {
        let sp = spec(&[2]);
        let ds = dataset_from_rows(&[(&[1, 0], 2.0, 1.0), (&[0, 1], -1.0, 0.5)]);
        let cfg = SglConfig::default();
        let tau = vec![2f64.sqrt()];
        // beta = 0, beta0 = 0: objective is (1/2N) sum w y^2.
        let v = objective_on_dataset(&ds, 0.0, &[0.0, 0.0], &cfg, &tau, &sp);
        let expected = (1.0 * 4.0 + 0.5 * 1.0) / 4.0;
        assert!((v - expected).abs() < 1e-15);
        // Huge lambda: any nonzero beta strictly increases the objective.
        let big = SglConfig {
            lambda: 1e6,
            ..SglConfig::default()
        };
        let at_zero = objective_on_dataset(&ds, 0.5, &[0.0, 0.0], &big, &tau, &sp);
        let off_zero = objective_on_dataset(&ds, 0.5, &[1e-3, 0.0], &big, &tau, &sp);
        assert!(off_zero > at_zero);
    }

    #[test]
    fn solver_objective_descends_and_beats_zero_solution() {
        let sp = spec(&[4, 4]);
        let oracle = Synthetic::linear(
            &sp,
            vec![2.0, -1.0, 0.0, 0.5, 0.0, 0.0, 1.5, 0.0],
            0.1,
        )
        .unwrap();
        let ds = synthetic_dataset(&sp, oracle, 150, 21);
        let tau = group_penalty_weights(&ds, &sp);
        let cfg = SglConfig::default();
        let result = fit(&ds, &sp, &cfg, &tau).unwrap();
        let trace = &result.diagnostics.objective_trace;
        assert!(result.diagnostics.converged);
        for pair in trace.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-10 * (1.0 + pair[0].abs()),
                "objective increased: {} -> {}",
                pair[0],
                pair[1]
            );
        }
        // Final objective no worse than the best-intercept zero solution.
        assert!(result.diagnostics.objective <= trace[0] + 1e-12);
    }

    #[test]
    fn group_and_oracle_zeroes_non_signal_modalities() {
        // The exact-zero window for this setup is roughly lambda in
        // [0.01, 0.02]: below it spurious groups survive the group check,
        // above it the signal group shrinks away too.
        let sp = spec(&[4, 4, 4]);
        let oracle = Synthetic::group_and(&sp, 1).unwrap();
        let ds = synthetic_dataset(&sp, oracle, 800, 33);
        let tau = group_penalty_weights(&ds, &sp);
        for lambda in [0.01, 0.015, 0.02] {
            let cfg = SglConfig { lambda, ..SglConfig::default() };
            let result = fit(&ds, &sp, &cfg, &tau).unwrap();
            let norms: Vec<f64> = sp
                .groups()
                .map(|g| g.map(|j| result.beta_std[j].powi(2)).sum::<f64>().sqrt())
                .collect();
            assert_eq!(norms[0], 0.0, "lambda {lambda}");
            assert_eq!(norms[2], 0.0, "lambda {lambda}");
            assert!(norms[1] > 0.0, "lambda {lambda}");
        }
    }

    #[test]
    fn permuting_units_within_a_modality_permutes_beta() {
        let sp = spec(&[3, 2]);
        let oracle = Synthetic::linear(&sp, vec![1.0, -0.5, 0.25, 0.75, -1.25], 0.0).unwrap();
        let ds = synthetic_dataset(&sp, oracle, 200, 17);
        let tau = group_penalty_weights(&ds, &sp);
        let cfg = SglConfig {
            lambda: 0.01,
            tol: 1e-10,
            ..SglConfig::default()
        };
        let base = fit(&ds, &sp, &cfg, &tau).unwrap();

        // Swap units 0 and 2 (both in modality 0).
        let permuted_masks: Vec<MaskVector> = ds
            .masks()
            .iter()
            .map(|m| {
                let mut bits = m.bits().to_vec();
                bits.swap(0, 2);
                MaskVector::new(bits)
            })
            .collect();
        let permuted = LocalDataset::new(
            permuted_masks,
            ds.targets().to_vec(),
            ds.weights().to_vec(),
        )
        .unwrap();
        let tau_p = group_penalty_weights(&permuted, &sp);
        let other = fit(&permuted, &sp, &cfg, &tau_p).unwrap();
        assert!((base.beta_std[0] - other.beta_std[2]).abs() < 1e-7);
        assert!((base.beta_std[2] - other.beta_std[0]).abs() < 1e-7);
        assert!((base.beta_std[1] - other.beta_std[1]).abs() < 1e-7);
        for j in 3..5 {
            assert!((base.beta_std[j] - other.beta_std[j]).abs() < 1e-7);
        }
    }

    #[test]
    fn refit_on_empty_support_returns_fit_unchanged() {
        let sp = spec(&[2, 1]);
        let oracle = Synthetic::linear(&sp, vec![1.0, 1.0, 1.0], 0.0).unwrap();
        let ds = synthetic_dataset(&sp, oracle, 50, 2);
        let tau = group_penalty_weights(&ds, &sp);
        let cfg = SglConfig {
            lambda: 1e6,
            ..SglConfig::default()
        };
        let base = fit(&ds, &sp, &cfg, &tau).unwrap();
        assert!(base.support.is_empty());
        let refit = ridge_refit(&base, &ds, &sp, 1e-4);
        assert_eq!(refit, base);
    }

    #[test]
    fn refit_matches_scalar_ridge_closed_form() {
        // One active column with uniform weights: the standardized-coordinate
        // solution is sum(w x yc) / (sum(w x^2) + N * ridge).
        let sp = spec(&[1]);
        let ds = LocalDataset::new(
            vec![
                MaskVector::new(vec![0]),
                MaskVector::new(vec![1]),
                MaskVector::new(vec![0]),
                MaskVector::new(vec![1]),
            ],
            vec![0.1, 1.2, -0.2, 0.9],
            vec![1.0; 4],
        )
        .unwrap();
        let tau = group_penalty_weights(&ds, &sp);
        let cfg = SglConfig {
            lambda: 0.01,
            tol: 1e-12,
            ..SglConfig::default()
        };
        let base = fit(&ds, &sp, &cfg, &tau).unwrap();
        assert_eq!(base.support, vec![0]);
        let ridge_lambda = 0.05;
        let refit = ridge_refit(&base, &ds, &sp, ridge_lambda);
        let design = standardize_weighted(&ds);
        let ybar = stats::mean(ds.targets());
        let num: f64 = design.columns[0]
            .iter()
            .zip(ds.targets())
            .map(|(x, y)| x * (y - ybar))
            .sum();
        let den: f64 = design.columns[0].iter().map(|x| x * x).sum::<f64>() + 4.0 * ridge_lambda;
        assert!((refit.beta_std[0] - num / den).abs() < 1e-12);
        assert!(refit.diagnostics.ridge_refit_applied);
    }

    #[test]
    fn refit_never_reduces_weighted_r2() {
        let sp = spec(&[4, 4]);
        let oracle =
            Synthetic::linear(&sp, vec![2.0, 0.0, -1.0, 0.0, 0.5, 0.0, 0.0, 1.0], 0.2).unwrap();
        for seed in 0..5 {
            let ds = synthetic_dataset(&sp, oracle.clone(), 200, seed);
            let tau = group_penalty_weights(&ds, &sp);
            let cfg = SglConfig {
                lambda: 0.02,
                ..SglConfig::default()
            };
            let base = fit(&ds, &sp, &cfg, &tau).unwrap();
            if base.support.is_empty() {
                continue;
            }
            let refit = ridge_refit(&base, &ds, &sp, 1e-4);
            let before = base.diagnostics.weighted_r2.unwrap();
            let after = refit.diagnostics.weighted_r2.unwrap();
            assert!(after >= before - 1e-9, "seed {seed}: {before} -> {after}");
            // Zeros stayed exactly zero.
            for j in 0..8 {
                if base.beta_std[j] == 0.0 {
                    assert_eq!(refit.beta_std[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn huge_ridge_shrinks_refit_toward_zero() {
        let sp = spec(&[2]);
        let oracle = Synthetic::linear(&sp, vec![1.0, -1.0], 0.0).unwrap();
        let ds = synthetic_dataset(&sp, oracle, 80, 12);
        let tau = group_penalty_weights(&ds, &sp);
        let cfg = SglConfig {
            lambda: 0.01,
            ..SglConfig::default()
        };
        let base = fit(&ds, &sp, &cfg, &tau).unwrap();
        assert!(!base.support.is_empty());
        let refit = ridge_refit(&base, &ds, &sp, 1e9);
        for &j in &refit.support {
            assert!(refit.beta_std[j].abs() < 1e-6);
        }
        // Support labels retained even though values shrink.
        assert_eq!(refit.support, base.support);
    }

    #[test]
    fn degenerate_design_is_rejected() {
        let sp = spec(&[2]);
        let ds = dataset_from_rows(&[(&[1, 1], 1.0, 1.0), (&[1, 1], 1.0, 1.0)]);
        let err = fit(&ds, &sp, &SglConfig::default(), &[2f64.sqrt()]).unwrap_err();
        assert!(matches!(err, SglError::DegenerateDesign(_)));
    }

    #[test]
    fn fit_is_deterministic() {
        let sp = spec(&[3, 3]);
        let oracle = Synthetic::linear(&sp, vec![1.0, 0.0, -1.0, 0.5, 0.0, 0.0], 0.0).unwrap();
        let ds = synthetic_dataset(&sp, oracle, 100, 5);
        let tau = group_penalty_weights(&ds, &sp);
        let a = fit(&ds, &sp, &SglConfig::default(), &tau).unwrap();
        let b = fit(&ds, &sp, &SglConfig::default(), &tau).unwrap();
        assert_eq!(a, b);
    }
}
