//! Least-squares fit of the three-level g2 model and rate recovery.
//!
//! The fitted parameters are `(γ1, γ2, β, c)` with `c = ρ²/N`: ρ and N only
//! enter through their ratio and are never fitted separately. Rates need
//! one more input, the pump rate `k12`, because three shape parameters
//! cannot fix four rates.

use std::fmt::Write as _;

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlator::CorrelationHistogram;
use crate::exec::{self, Exec};
use crate::kinetics::{self, DerivedParams, EnsembleConfig, KineticsError, RateSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("need at least {needed} populated bins, got {got}")]
    TooFewBins { needed: usize, got: usize },
    #[error("invalid fit config: {0}")]
    InvalidConfig(String),
    #[error("no convergence after {} iterations", .0.n_iterations)]
    NonConvergence(Box<FitResult>),
    #[error("singular normal equations at the starting point")]
    SingularJacobian(Box<FitResult>),
    #[error(transparent)]
    Kinetics(#[from] KineticsError),
}

pub type Result<T> = std::result::Result<T, FitError>;

pub const PARAM_NAMES: [&str; 4] = ["gamma1", "gamma2", "beta", "c"];
pub const MIN_BINS: usize = 8;

/// `(γ1, γ2, β, c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitParams {
    pub gamma1: f64,
    pub gamma2: f64,
    pub beta: f64,
    pub c: f64,
}

impl FitParams {
    pub fn to_array(self) -> [f64; 4] {
        [self.gamma1, self.gamma2, self.beta, self.c]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            gamma1: a[0],
            gamma2: a[1],
            beta: a[2],
            c: a[3],
        }
    }

    pub fn shape(&self) -> DerivedParams {
        DerivedParams {
            gamma1: self.gamma1,
            gamma2: self.gamma2,
            beta: self.beta,
        }
    }

    pub fn from_shape(dp: &DerivedParams, c: f64) -> Self {
        Self {
            gamma1: dp.gamma1,
            gamma2: dp.gamma2,
            beta: dp.beta,
            c,
        }
    }
}

/// `1 − c·(β·e^{−γ1|τ|} − (β−1)·e^{−γ2|τ|})`, τ in ns.
pub fn model(tau: f64, p: &FitParams) -> f64 {
    let t = tau.abs();
    1.0 - p.c * (p.beta * (-p.gamma1 * t).exp() - (p.beta - 1.0) * (-p.gamma2 * t).exp())
}

/// Analytic gradient of [`model`] with respect to `(γ1, γ2, β, c)`.
pub fn model_jacobian(tau: f64, p: &FitParams) -> [f64; 4] {
    let t = tau.abs();
    let e1 = (-p.gamma1 * t).exp();
    let e2 = (-p.gamma2 * t).exp();
    [
        p.c * p.beta * t * e1,
        -p.c * (p.beta - 1.0) * t * e2,
        -p.c * (e1 - e2),
        -(p.beta * e1 - (p.beta - 1.0) * e2),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Starting point; `None` uses data-driven guesses (several starts).
    pub initial: Option<FitParams>,
    /// `[lo, hi]` per parameter, in `(γ1, γ2, β, c)` order.
    pub bounds: [[f64; 2]; 4],
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            initial: None,
            bounds: [[1e-6, 50.0], [0.0, 50.0], [1.0, 100.0], [0.0, 1.0]],
            max_iterations: 500,
            gradient_tolerance: 1e-10,
            step_tolerance: 1e-13,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        for (i, [lo, hi]) in self.bounds.iter().enumerate() {
            if !(lo <= hi) {
                return Err(FitError::InvalidConfig(format!(
                    "{}: lower bound {lo} > upper {hi}",
                    PARAM_NAMES[i]
                )));
            }
        }
        if let Some(init) = self.initial {
            for (i, v) in init.to_array().iter().enumerate() {
                let [lo, hi] = self.bounds[i];
                if !(lo <= *v && *v <= hi) {
                    return Err(FitError::InvalidConfig(format!(
                        "{} initial {v} outside [{lo}, {hi}]",
                        PARAM_NAMES[i]
                    )));
                }
            }
        }
        if !(self.gradient_tolerance > 0.0 && self.step_tolerance > 0.0) {
            return Err(FitError::InvalidConfig("tolerances must be > 0".into()));
        }
        if self.max_iterations == 0 {
            return Err(FitError::InvalidConfig("max_iterations must be > 0".into()));
        }
        Ok(())
    }

    /// Pins `c` to a known amplitude.
    pub fn with_fixed_amplitude(mut self, c: f64) -> Self {
        self.bounds[3] = [c, c];
        if let Some(init) = self.initial.as_mut() {
            init.c = c;
        }
        self
    }

    fn project(&self, mut p: [f64; 4]) -> [f64; 4] {
        for (v, [lo, hi]) in p.iter_mut().zip(self.bounds) {
            *v = v.clamp(lo, hi);
        }
        // The slow rate may not exceed the fast one.
        if p[1] > p[0] {
            let mid = 0.5 * (p[0] + p[1]);
            p[0] = mid.clamp(self.bounds[0][0], self.bounds[0][1]);
            p[1] = mid.clamp(self.bounds[1][0], self.bounds[1][1]).min(p[0]);
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnostic {
    /// The amplitude is compatible with zero, so the time constants carry
    /// no information.
    NonIdentifiable,
    /// The normal matrix is singular; covariance is a pseudo-inverse.
    SingularCovariance,
    /// Parameter ended on a bound.
    AtBound(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: FitParams,
    /// Standard errors, same order as `params`.
    pub sigma: [f64; 4],
    pub covariance: [[f64; 4]; 4],
    pub chi2: f64,
    pub chi2_reduced: f64,
    pub dof: usize,
    pub converged: bool,
    pub n_iterations: usize,
    /// χ² after every accepted step, starting with the initial point.
    pub objective_history: Vec<f64>,
    pub diagnostics: Vec<Diagnostic>,
}

impl FitResult {
    /// Fitted g2 at zero lag, `1 − c`.
    pub fn g2_zero(&self) -> f64 {
        1.0 - self.params.c
    }

    pub fn is_identifiable(&self) -> bool {
        !self.diagnostics.contains(&Diagnostic::NonIdentifiable)
    }
}

struct Data<'a> {
    tau: &'a [f64],
    y: &'a [f64],
    w: Vec<f64>,
}

impl Data<'_> {
    fn chi2(&self, p: &FitParams) -> f64 {
        self.tau
            .iter()
            .zip(self.y)
            .zip(&self.w)
            .map(|((t, y), w)| (y - model(*t, p)).powi(2) * w)
            .sum()
    }

    /// Normal matrix `JᵀWJ`, gradient `JᵀWr` and χ².
    fn normal_equations(&self, p: &FitParams) -> (Matrix4<f64>, Vector4<f64>, f64, Vector4<f64>) {
        let mut a = Matrix4::zeros();
        let mut g = Vector4::zeros();
        let mut col_norm = Vector4::zeros();
        let mut chi2 = 0.0;
        for ((t, y), w) in self.tau.iter().zip(self.y).zip(&self.w) {
            let r = y - model(*t, p);
            let j = Vector4::from(model_jacobian(*t, p));
            a += j * j.transpose() * *w;
            g += j * (r * w);
            col_norm += j.component_mul(&j) * *w;
            chi2 += r * r * w;
        }
        (a, g, chi2, col_norm.map(f64::sqrt))
    }
}

/// Data-driven starting point: γ1 from the lag where the dip has
/// recovered halfway, γ2 = γ1/10, β = 2, c = 1 − min g2.
pub fn initial_guess(tau: &[f64], y: &[f64]) -> FitParams {
    let mut pts: Vec<(f64, f64)> = tau.iter().map(|t| t.abs()).zip(y.iter().copied()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Light smoothing over neighbouring |τ| so a single noisy bin does not
    // decide the guess.
    let k = 3.min(pts.len());
    let smooth: Vec<(f64, f64)> = pts
        .windows(k)
        .map(|w| (w[k / 2].0, w.iter().map(|p| p.1).sum::<f64>() / k as f64))
        .collect();
    let min = smooth.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let min = if min.is_finite() { min } else { 0.0 };
    let c = (1.0 - min).clamp(0.01, 1.0);
    let half = min + 0.5 * (1.0 - min);
    let t_min = smooth
        .iter()
        .find(|p| p.1 == min)
        .map(|p| p.0)
        .unwrap_or(0.0);
    let t_half = smooth
        .iter()
        .find(|p| p.0 >= t_min && p.1 >= half)
        .map(|p| p.0)
        .unwrap_or_else(|| pts.last().map(|p| p.0).unwrap_or(1.0) / 4.0)
        .max(1e-3);
    let gamma1 = std::f64::consts::LN_2 / t_half;
    FitParams {
        gamma1,
        gamma2: gamma1 / 10.0,
        beta: 2.0,
        c,
    }
}

/// Fits the model to points `(τ_i, y_i ± σ_i)`; points with σ ≤ 0 are
/// dropped.
pub fn fit_points(tau: &[f64], y: &[f64], sigma: &[f64], cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let keep: Vec<usize> = (0..tau.len())
        .filter(|&i| sigma[i] > 0.0 && sigma[i].is_finite())
        .collect();
    if keep.len() < MIN_BINS {
        return Err(FitError::TooFewBins {
            needed: MIN_BINS,
            got: keep.len(),
        });
    }
    let t: Vec<f64> = keep.iter().map(|&i| tau[i]).collect();
    let v: Vec<f64> = keep.iter().map(|&i| y[i]).collect();
    let data = Data {
        tau: &t,
        y: &v,
        w: keep.iter().map(|&i| sigma[i].powi(-2)).collect(),
    };

    let starts: Vec<FitParams> = match cfg.initial {
        Some(p) => vec![p],
        None => {
            let g = initial_guess(&t, &v);
            let c = if cfg.bounds[3][0] == cfg.bounds[3][1] {
                cfg.bounds[3][0]
            } else {
                g.c
            };
            let mut starts = vec![FitParams::from_array(cfg.project([
                g.gamma1,
                g.gamma1 / 10.0,
                2.0,
                c,
            ]))];
            starts.extend(grid_starts(&data, cfg, 3));
            starts
        }
    };

    let mut best: Option<FitResult> = None;
    let mut last_err = None;
    for start in starts {
        match levenberg_marquardt(&data, start, cfg) {
            Ok(r) => {
                if best.as_ref().is_none_or(|b| r.chi2 < b.chi2) {
                    best = Some(r);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.expect("at least one start"))
}

/// Best `keep` points of a coarse scan over (γ1, γ2/γ1, β). The model is
/// linear in c, so c is solved exactly at each point.
fn grid_starts(data: &Data, cfg: &FitConfig, keep: usize) -> Vec<FitParams> {
    let abs: Vec<f64> = data.tau.iter().map(|t| t.abs()).collect();
    let t_max = abs.iter().copied().fold(0.0, f64::max).max(1e-9);
    let t_min = abs
        .iter()
        .copied()
        .filter(|&t| t > 0.0)
        .fold(f64::INFINITY, f64::min)
        .min(t_max);
    let (g_lo, g_hi) = (0.5 / t_max, 1.0 / t_min);
    const STEPS: usize = 16;
    let mut scored: Vec<(f64, FitParams)> = Vec::new();
    for i in 0..STEPS {
        let gamma1 = g_lo * (g_hi / g_lo).powf(i as f64 / (STEPS - 1) as f64);
        for ratio in [3.0, 10.0, 30.0] {
            for beta in [1.2, 2.0, 5.0, 10.0] {
                let shape = FitParams {
                    gamma1,
                    gamma2: gamma1 / ratio,
                    beta,
                    c: 1.0,
                };
                let (mut num, mut den) = (0.0, 0.0);
                for ((t, y), w) in data.tau.iter().zip(data.y).zip(&data.w) {
                    let s = 1.0 - model(*t, &shape);
                    num += w * (1.0 - y) * s;
                    den += w * s * s;
                }
                let c = if den > 0.0 { num / den } else { 0.0 };
                let p = FitParams::from_array(cfg.project([gamma1, gamma1 / ratio, beta, c]));
                scored.push((data.chi2(&p), p));
            }
        }
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    scored.into_iter().take(keep).map(|s| s.1).collect()
}

/// Fits a histogram on `|τ|`, using both sides of the window.
pub fn fit_g2(hist: &CorrelationHistogram, cfg: &FitConfig) -> Result<FitResult> {
    fit_points(&hist.centers_ns(), &hist.g2, &hist.sigma, cfg)
}

/// Independent fits of several histograms, in parallel when enabled.
pub fn fit_many(
    hists: &[CorrelationHistogram],
    cfg: &FitConfig,
    exec: Exec,
) -> Vec<Result<FitResult>> {
    exec::map_range(exec, hists.len(), |i| fit_g2(&hists[i], cfg))
}

fn levenberg_marquardt(data: &Data, start: FitParams, cfg: &FitConfig) -> Result<FitResult> {
    let n = data.tau.len();
    let n_free = cfg.bounds.iter().filter(|[lo, hi]| lo < hi).count();
    let mut p = cfg.project(start.to_array());
    let mut lambda = 1e-3;
    let (mut a, mut g, mut chi2, mut col_norm) = data.normal_equations(&FitParams::from_array(p));
    let mut history = vec![chi2];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        iterations += 1;
        // Scaled-gradient test: largest cosine between residual and a
        // Jacobian column, ignoring parameters held at a bound.
        let r_norm = chi2.sqrt();
        let mut cosine = 0.0f64;
        for j in 0..4 {
            let [lo, hi] = cfg.bounds[j];
            let blocked = (p[j] <= lo && g[j] < 0.0) || (p[j] >= hi && g[j] > 0.0) || lo == hi;
            if !blocked && col_norm[j] > 0.0 && r_norm > 0.0 {
                cosine = cosine.max(g[j].abs() / (col_norm[j] * r_norm));
            }
        }
        if r_norm == 0.0 || cosine <= cfg.gradient_tolerance {
            converged = true;
            break;
        }

        let mut damped = a;
        for j in 0..4 {
            let d = a[(j, j)].max(1e-30);
            damped[(j, j)] += lambda * d;
            if cfg.bounds[j][0] == cfg.bounds[j][1] {
                // Fixed parameter: decouple its row and column.
                for k in 0..4 {
                    damped[(j, k)] = 0.0;
                    damped[(k, j)] = 0.0;
                }
                damped[(j, j)] = 1.0;
            }
        }
        let mut rhs = g;
        for j in 0..4 {
            if cfg.bounds[j][0] == cfg.bounds[j][1] {
                rhs[j] = 0.0;
            }
        }
        let Some(step) = damped.cholesky().map(|c| c.solve(&rhs)) else {
            lambda *= 10.0;
            if lambda > 1e20 {
                break;
            }
            continue;
        };
        let trial = cfg.project([
            p[0] + step[0],
            p[1] + step[1],
            p[2] + step[2],
            p[3] + step[3],
        ]);
        let moved: f64 = (0..4)
            .map(|j| (trial[j] - p[j]).powi(2))
            .sum::<f64>()
            .sqrt();
        let size: f64 = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let trial_chi2 = data.chi2(&FitParams::from_array(trial));
        if trial_chi2 < chi2 {
            p = trial;
            (a, g, chi2, col_norm) = data.normal_equations(&FitParams::from_array(p));
            history.push(chi2);
            lambda = (lambda / 10.0).max(1e-12);
            if moved <= cfg.step_tolerance * (size + cfg.step_tolerance) {
                converged = true;
                break;
            }
        } else {
            if moved <= cfg.step_tolerance * (size + cfg.step_tolerance) {
                // No representable improvement left.
                converged = true;
                break;
            }
            lambda *= 10.0;
            if lambda > 1e20 {
                converged = true;
                break;
            }
        }
    }

    let params = FitParams::from_array(p);
    let dof = n.saturating_sub(n_free).max(1);
    let mut diagnostics = Vec::new();
    let (covariance, singular) = covariance(&a, cfg);
    if singular {
        diagnostics.push(Diagnostic::SingularCovariance);
    }
    let sigma = [0, 1, 2, 3].map(|j| covariance[j][j].max(0.0).sqrt());
    for (j, [lo, hi]) in cfg.bounds.iter().enumerate() {
        if lo < hi && (p[j] <= *lo || p[j] >= *hi) {
            diagnostics.push(Diagnostic::AtBound(j));
        }
    }
    if cfg.bounds[3][0] < cfg.bounds[3][1]
        && (params.c <= 2.0 * sigma[3] || singular || params.c == 0.0)
    {
        diagnostics.push(Diagnostic::NonIdentifiable);
    }
    let result = FitResult {
        params,
        sigma,
        covariance,
        chi2,
        chi2_reduced: chi2 / dof as f64,
        dof,
        converged,
        n_iterations: iterations,
        objective_history: history,
        diagnostics,
    };
    if !converged {
        return Err(FitError::NonConvergence(Box::new(result)));
    }
    Ok(result)
}

/// Inverse normal matrix over the free parameters.
fn covariance(a: &Matrix4<f64>, cfg: &FitConfig) -> ([[f64; 4]; 4], bool) {
    let free: Vec<usize> = (0..4)
        .filter(|&j| cfg.bounds[j][0] < cfg.bounds[j][1])
        .collect();
    let m = free.len();
    let sub = nalgebra::DMatrix::from_fn(m, m, |i, k| a[(free[i], free[k])]);
    let max_diag = (0..m).map(|i| sub[(i, i)]).fold(0.0, f64::max);
    let svd = sub.clone().svd(true, true);
    let min_sv = svd
        .singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let singular = m > 0 && (max_diag == 0.0 || min_sv <= 1e-13 * max_diag);
    let inv = if singular {
        svd.pseudo_inverse(1e-13 * max_diag.max(f64::MIN_POSITIVE))
            .unwrap_or_else(|_| sub.clone() * 0.0)
    } else {
        sub.clone().try_inverse().unwrap_or_else(|| sub * 0.0)
    };
    let mut cov = [[0.0; 4]; 4];
    for (i, &fi) in free.iter().enumerate() {
        for (k, &fk) in free.iter().enumerate() {
            cov[fi][fk] = 0.5 * (inv[(i, k)] + inv[(k, i)]);
        }
    }
    (cov, singular)
}

/// Largest deviation between the analytic Jacobian and central finite
/// differences (step `1e-6` relative), normalized per parameter by the
/// largest analytic entry of that column.
pub fn jacobian_check(params: &FitParams, tau_grid: &[f64]) -> f64 {
    let base = params.to_array();
    let mut worst = 0.0f64;
    for j in 0..4 {
        let h = 1e-6 * base[j].abs().max(1e-3);
        let mut up = base;
        let mut down = base;
        up[j] += h;
        down[j] -= h;
        let (pu, pd) = (FitParams::from_array(up), FitParams::from_array(down));
        let analytic: Vec<f64> = tau_grid
            .iter()
            .map(|&t| model_jacobian(t, params)[j])
            .collect();
        let scale = analytic.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for (&t, a) in tau_grid.iter().zip(&analytic) {
            let numeric = (model(t, &pu) - model(t, &pd)) / (2.0 * h);
            let dev = if scale > 0.0 {
                (numeric - a).abs() / scale
            } else {
                (numeric - a).abs()
            };
            worst = worst.max(dev);
        }
    }
    worst
}

/// How fitted shape parameters are turned into rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Inversion {
    /// Eigen-solution of the rate equations ([`kinetics::exact_rates`]).
    #[default]
    Exact,
    /// Customary closed forms ([`kinetics::invert_rates`]).
    ClosedForm,
}

impl Inversion {
    pub fn rates(self, dp: &DerivedParams, k12: f64) -> kinetics::Result<RateSet> {
        match self {
            Inversion::Exact => kinetics::exact_rates(dp, k12),
            Inversion::ClosedForm => kinetics::invert_rates(dp, k12),
        }
    }

    pub fn shape(self, rates: &RateSet) -> kinetics::Result<DerivedParams> {
        match self {
            Inversion::Exact => kinetics::exact_params(rates),
            Inversion::ClosedForm => kinetics::derived_params(rates),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShelvingLifetime {
    Finite(Estimate),
    /// β = 1: the shelving channel is closed.
    NoShelving,
}

/// Lifetimes (ns) and quantum yield recovered from a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotophysicsReport {
    pub tau12: Estimate,
    pub tau21: Estimate,
    pub tau23: ShelvingLifetime,
    pub tau31: Estimate,
    pub quantum_yield: Estimate,
    pub rates: RateSet,
    pub shape: DerivedParams,
    pub amplitude: Estimate,
    /// `ρ²/N` of the ensemble the data were taken with.
    pub expected_amplitude: f64,
    pub inversion: Inversion,
}

/// `(τ21, τ23, τ31, Q)` of a shape; τ23 is infinite when k23 = 0.
fn photophysics_of(shape: [f64; 3], k12: f64, inversion: Inversion) -> kinetics::Result<[f64; 4]> {
    let dp = DerivedParams {
        gamma1: shape[0],
        gamma2: shape[1],
        beta: shape[2],
    };
    let r = inversion.rates(&dp, k12)?;
    let tau23 = if r.k23 > 0.0 {
        1.0 / r.k23
    } else {
        f64::INFINITY
    };
    Ok([
        1.0 / r.k21,
        tau23,
        1.0 / r.k31,
        kinetics::quantum_yield(&r)?,
    ])
}

/// Converts a fit into a lifetime table row. Uncertainties are first
/// order in the fit covariance.
pub fn report_photophysics(
    fit: &FitResult,
    k12: f64,
    ensemble: &EnsembleConfig,
    inversion: Inversion,
) -> Result<PhotophysicsReport> {
    let dp = fit.params.shape();
    let rates = inversion.rates(&dp, k12)?;
    let base = [dp.gamma1, dp.gamma2, dp.beta];
    let center = photophysics_of(base, k12, inversion)?;
    let no_shelving = rates.k23 == 0.0 || dp.beta - 1.0 <= 1e-9 * dp.beta;

    // Numeric gradient of each quantity with respect to (γ1, γ2, β).
    let mut grad = [[0.0; 3]; 4];
    for j in 0..3 {
        let h = 1e-6 * base[j].abs().max(1e-9);
        let mut up = base;
        let mut down = base;
        up[j] += h;
        down[j] -= h;
        let both = (
            photophysics_of(up, k12, inversion),
            photophysics_of(down, k12, inversion),
        );
        let (fu, fd, span) = match both {
            (Ok(u), Ok(d)) => (u, d, 2.0 * h),
            (Ok(u), Err(_)) => (u, center, h),
            (Err(_), Ok(d)) => (center, d, h),
            (Err(_), Err(_)) => (center, center, 1.0),
        };
        for q in 0..4 {
            grad[q][j] = if fu[q].is_finite() && fd[q].is_finite() {
                (fu[q] - fd[q]) / span
            } else {
                0.0
            };
        }
    }
    let sig = |q: usize| {
        let mut var = 0.0;
        for i in 0..3 {
            for k in 0..3 {
                var += grad[q][i] * fit.covariance[i][k] * grad[q][k];
            }
        }
        var.max(0.0).sqrt()
    };
    let est = |q: usize| Estimate {
        value: center[q],
        sigma: sig(q),
    };
    Ok(PhotophysicsReport {
        tau12: Estimate {
            value: 1.0 / k12,
            sigma: 0.0,
        },
        tau21: est(0),
        tau23: if no_shelving {
            ShelvingLifetime::NoShelving
        } else {
            ShelvingLifetime::Finite(est(1))
        },
        tau31: est(2),
        quantum_yield: if no_shelving {
            Estimate {
                value: 1.0,
                sigma: 0.0,
            }
        } else {
            est(3)
        },
        rates,
        shape: dp,
        amplitude: Estimate {
            value: fit.params.c,
            sigma: fit.sigma[3],
        },
        expected_amplitude: ensemble.amplitude(),
        inversion,
    })
}

/// Mean of several reports of the same configuration; uncertainties are
/// combined as independent.
pub fn average_reports(reports: &[PhotophysicsReport]) -> Option<PhotophysicsReport> {
    let first = reports.first()?;
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&PhotophysicsReport) -> Estimate| {
        let v = reports.iter().map(|r| f(r).value).sum::<f64>() / n;
        let s = reports
            .iter()
            .map(|r| f(r).sigma.powi(2))
            .sum::<f64>()
            .sqrt()
            / n;
        Estimate { value: v, sigma: s }
    };
    let finite_23: Vec<Estimate> = reports
        .iter()
        .filter_map(|r| match r.tau23 {
            ShelvingLifetime::Finite(e) => Some(e),
            ShelvingLifetime::NoShelving => None,
        })
        .collect();
    let tau23 = if finite_23.len() == reports.len() {
        ShelvingLifetime::Finite(Estimate {
            value: finite_23.iter().map(|e| e.value).sum::<f64>() / n,
            sigma: finite_23
                .iter()
                .map(|e| e.sigma.powi(2))
                .sum::<f64>()
                .sqrt()
                / n,
        })
    } else {
        ShelvingLifetime::NoShelving
    };
    let avg_rate =
        |f: &dyn Fn(&RateSet) -> f64| reports.iter().map(|r| f(&r.rates)).sum::<f64>() / n;
    let avg_shape =
        |f: &dyn Fn(&DerivedParams) -> f64| reports.iter().map(|r| f(&r.shape)).sum::<f64>() / n;
    Some(PhotophysicsReport {
        tau12: mean(&|r| r.tau12),
        tau21: mean(&|r| r.tau21),
        tau23,
        tau31: mean(&|r| r.tau31),
        quantum_yield: mean(&|r| r.quantum_yield),
        rates: RateSet {
            k12: avg_rate(&|r| r.k12),
            k21: avg_rate(&|r| r.k21),
            k23: avg_rate(&|r| r.k23),
            k31: avg_rate(&|r| r.k31),
        },
        shape: DerivedParams {
            gamma1: avg_shape(&|d| d.gamma1),
            gamma2: avg_shape(&|d| d.gamma2),
            beta: avg_shape(&|d| d.beta),
        },
        amplitude: mean(&|r| r.amplitude),
        expected_amplitude: first.expected_amplitude,
        inversion: first.inversion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DipWidthReport {
    /// γ1(silver) / γ1(glass).
    pub gamma1_ratio: f64,
    /// τ21(glass) / τ21(silver).
    pub tau21_ratio: f64,
    pub tau21_ratio_sigma: f64,
    pub silver_narrower: bool,
}

/// Compares the antibunching dip widths of two fits.
pub fn dip_width_compare(
    glass: &FitResult,
    silver: &FitResult,
    k12_glass: f64,
    k12_silver: f64,
    inversion: Inversion,
) -> Result<DipWidthReport> {
    let one = EnsembleConfig::default();
    let g = report_photophysics(glass, k12_glass, &one, inversion)?;
    let s = report_photophysics(silver, k12_silver, &one, inversion)?;
    let ratio = g.tau21.value / s.tau21.value;
    let rel =
        ((g.tau21.sigma / g.tau21.value).powi(2) + (s.tau21.sigma / s.tau21.value).powi(2)).sqrt();
    Ok(DipWidthReport {
        gamma1_ratio: silver.params.gamma1 / glass.params.gamma1,
        tau21_ratio: ratio,
        tau21_ratio_sigma: ratio * rel,
        silver_narrower: silver.params.gamma1 > glass.params.gamma1,
    })
}

/// Plain-text table with the columns configuration, τ21, τ12, τ23, τ31, Q.
pub fn render_table(rows: &[(String, PhotophysicsReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<20} {:>16} {:>10} {:>16} {:>16} {:>12}",
        "Configuration", "tau21 (ns)", "tau12 (ns)", "tau23 (ns)", "tau31 (ns)", "Q (%)"
    );
    let cell = |e: &Estimate| format!("{:.1} ± {:.1}", e.value, e.sigma);
    for (name, r) in rows {
        let tau23 = match r.tau23 {
            ShelvingLifetime::Finite(e) => cell(&e),
            ShelvingLifetime::NoShelving => "none".to_string(),
        };
        let _ = writeln!(
            out,
            "{:<20} {:>16} {:>10.1} {:>16} {:>16} {:>12}",
            name,
            cell(&r.tau21),
            r.tau12.value,
            tau23,
            cell(&r.tau31),
            format!(
                "{:.0} ± {:.0}",
                100.0 * r.quantum_yield.value,
                100.0 * r.quantum_yield.sigma
            ),
        );
    }
    out
}
