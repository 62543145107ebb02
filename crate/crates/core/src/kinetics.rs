//! Analytic three-level emitter model.
//!
//! Levels are ground (1), excited (2) and a metastable shelving level (3),
//! connected by four channels: pumping `k12`, radiative decay `k21`,
//! intersystem crossing `k23` and deshelving `k31`. All rates are in ns⁻¹
//! and all lags in ns.
//!
//! The single-emitter second-order correlation has the exact form
//!
//! ```text
//! g2(τ) = 1 − β·exp(−γ1·|τ|) + (β − 1)·exp(−γ2·|τ|)
//! ```
//!
//! and an ensemble of `N` independent emitters seen with signal fraction `ρ`
//! scales the deviation from 1 by `ρ²/N`. Note the minus sign in front of
//! the `(β − 1)` term inside the bracket of [`g2_model`]: it is the only
//! sign for which `g2(0) = 1 − ρ²/N`, and it agrees with direct integration
//! of the rate equations ([`conditional_intensity`]).
//!
//! Two maps connect rates to the shape `(γ1, γ2, β)`:
//!
//! * [`derived_params`] / [`invert_rates`]: the customary closed-form
//!   approximations (`γ1 ≃ k12 + k21`, ...), valid when the deshelving is
//!   slow compared to the excited-state dynamics.
//! * [`exact_params`] / [`exact_rates`]: the eigen-solution of the rate
//!   equations. These are what a fit of simulated data actually measures.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KineticsError {
    #[error("invalid rates: {0}")]
    InvalidRates(String),
    #[error("degenerate rates: {0}")]
    DegenerateRates(String),
    #[error("invalid inversion: {0}")]
    InvalidInversion(String),
    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),
    #[error("rate matrix has no unique stationary distribution")]
    SingularSystem,
    #[error("ODE integration failed: {0}")]
    IntegrationFailure(String),
}

pub type Result<T> = std::result::Result<T, KineticsError>;

/// Transition rates of the three-level system, ns⁻¹.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSet {
    pub k12: f64,
    pub k21: f64,
    pub k23: f64,
    pub k31: f64,
}

impl RateSet {
    pub fn new(k12: f64, k21: f64, k23: f64, k31: f64) -> Result<Self> {
        let rates = Self { k12, k21, k23, k31 };
        rates.validate()?;
        Ok(rates)
    }

    /// Builds rates from lifetimes `τij = 1/kij` in ns. An infinite lifetime
    /// maps to a closed channel.
    pub fn from_lifetimes(tau12: f64, tau21: f64, tau23: f64, tau31: f64) -> Result<Self> {
        let inv = |t: f64| if t.is_infinite() { 0.0 } else { 1.0 / t };
        Self::new(inv(tau12), inv(tau21), inv(tau23), inv(tau31))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, k) in [
            ("k12", self.k12),
            ("k21", self.k21),
            ("k23", self.k23),
            ("k31", self.k31),
        ] {
            if !k.is_finite() || k < 0.0 {
                return Err(KineticsError::InvalidRates(format!(
                    "{name} = {k} must be finite and >= 0"
                )));
            }
        }
        if self.k21 <= 0.0 {
            return Err(KineticsError::InvalidRates("k21 must be > 0".into()));
        }
        Ok(())
    }

    /// Generator of the population dynamics, `dp/dt = M p`.
    pub fn rate_matrix(&self) -> Matrix3<f64> {
        let Self { k12, k21, k23, k31 } = *self;
        Matrix3::new(
            -k12,
            k21,
            k31, //
            k12,
            -(k21 + k23),
            0.0, //
            0.0,
            k23,
            -k31,
        )
    }
}

/// Shape parameters of the g2 curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedParams {
    pub gamma1: f64,
    pub gamma2: f64,
    pub beta: f64,
}

/// Ensemble size and detector-level signal fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n_emitters: u32,
    pub rho: f64,
}

impl EnsembleConfig {
    pub fn new(n_emitters: u32, rho: f64) -> Result<Self> {
        let cfg = Self { n_emitters, rho };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_emitters < 1 {
            return Err(KineticsError::InvalidEnsemble(
                "n_emitters must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(KineticsError::InvalidEnsemble(format!(
                "rho = {} out of [0,1]",
                self.rho
            )));
        }
        Ok(())
    }

    /// Correlation amplitude `ρ²/N`.
    pub fn amplitude(&self) -> f64 {
        self.rho * self.rho / f64::from(self.n_emitters)
    }
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_emitters: 1,
            rho: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Populations {
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
}

/// Closed-form shape parameters (`γ1 ≃ k12 + k21` family).
pub fn derived_params(rates: &RateSet) -> Result<DerivedParams> {
    rates.validate()?;
    let RateSet { k12, k21, k23, k31 } = *rates;
    let gamma1 = k12 + k21;
    if gamma1 <= 0.0 {
        return Err(KineticsError::DegenerateRates("k12 + k21 = 0".into()));
    }
    let shelving = k12 * k23 / gamma1;
    if shelving > 0.0 && k31 == 0.0 {
        return Err(KineticsError::DegenerateRates(
            "k31 = 0 with k12·k23 > 0: beta diverges".into(),
        ));
    }
    let beta = if shelving == 0.0 {
        1.0
    } else {
        1.0 + shelving / k31
    };
    Ok(DerivedParams {
        gamma1,
        gamma2: k31 + shelving,
        beta,
    })
}

/// Shape parameters from the eigen-solution of the rate equations.
///
/// The two non-zero relaxation rates are the roots of `λ² − Sλ + P = 0`;
/// `β` follows from `g2(0) = 0` and `g2'(0) = k12 / p2_ss`.
pub fn exact_params(rates: &RateSet) -> Result<DerivedParams> {
    rates.validate()?;
    let RateSet { k12, k21, k23, k31 } = *rates;
    if k12 + k21 <= 0.0 {
        return Err(KineticsError::DegenerateRates("k12 + k21 = 0".into()));
    }
    if k12 * k23 == 0.0 {
        // Shelving level never populated: pure two-level dynamics.
        return Ok(DerivedParams {
            gamma1: k12 + k21,
            gamma2: k31,
            beta: 1.0,
        });
    }
    if k31 == 0.0 {
        return Err(KineticsError::DegenerateRates(
            "k31 = 0 with k12·k23 > 0: beta diverges".into(),
        ));
    }
    let sum = k12 + k21 + k23 + k31;
    let product = k12 * k23 + k12 * k31 + k21 * k31 + k23 * k31;
    let disc2 = 0.25 * sum * sum - product;
    if disc2 < -1e-12 * product {
        return Err(KineticsError::DegenerateRates(
            "complex relaxation rates: g2 oscillates".into(),
        ));
    }
    let disc = disc2.max(0.0).sqrt();
    let fast = 0.5 * sum + disc;
    // Vieta form avoids cancellation in the small root.
    let slow = product / fast;
    let slope = k21 + k23 + k12 + k12 * k23 / k31;
    if fast == slow {
        return Err(KineticsError::DegenerateRates(
            "coincident relaxation rates".into(),
        ));
    }
    let beta = (slope - slow) / (fast - slow);
    Ok(DerivedParams {
        gamma1: fast,
        gamma2: slow,
        beta,
    })
}

/// Ensemble g2 at lag `tau` (ns).
///
/// `1 − (β·e^{−γ1|τ|} − (β−1)·e^{−γ2|τ|})·ρ²/N`
pub fn g2_model(tau: f64, dp: &DerivedParams, cfg: &EnsembleConfig) -> f64 {
    let t = tau.abs();
    let bracket = dp.beta * (-dp.gamma1 * t).exp() - (dp.beta - 1.0) * (-dp.gamma2 * t).exp();
    1.0 - bracket * cfg.amplitude()
}

pub fn g2_zero(cfg: &EnsembleConfig) -> f64 {
    1.0 - cfg.amplitude()
}

/// Radiative branching ratio `k21 / (k21 + k23)`.
pub fn quantum_yield(rates: &RateSet) -> Result<f64> {
    let total = rates.k21 + rates.k23;
    if !(total > 0.0) {
        return Err(KineticsError::DegenerateRates("k21 + k23 = 0".into()));
    }
    Ok(rates.k21 / total)
}

fn check_shape(dp: &DerivedParams, k12: f64) -> Result<()> {
    if !(k12 > 0.0) || !k12.is_finite() {
        return Err(KineticsError::InvalidInversion(format!(
            "k12 = {k12} must be > 0"
        )));
    }
    if !(dp.gamma1 > k12) {
        return Err(KineticsError::InvalidInversion(format!(
            "k12 = {k12} >= gamma1 = {} gives k21 <= 0",
            dp.gamma1
        )));
    }
    if !(dp.beta >= 1.0) {
        return Err(KineticsError::InvalidInversion(format!(
            "beta = {} < 1",
            dp.beta
        )));
    }
    if !(dp.gamma2 > 0.0) {
        return Err(KineticsError::InvalidInversion(format!(
            "gamma2 = {} must be > 0",
            dp.gamma2
        )));
    }
    Ok(())
}

/// Inverse of [`derived_params`] given the pump rate.
pub fn invert_rates(dp: &DerivedParams, k12: f64) -> Result<RateSet> {
    check_shape(dp, k12)?;
    let k21 = dp.gamma1 - k12;
    let k31 = dp.gamma2 / dp.beta;
    let k23 = dp.gamma1 * dp.gamma2 * (dp.beta - 1.0) / (dp.beta * k12);
    RateSet::new(k12, k21, k23, k31).map_err(|e| KineticsError::InvalidInversion(e.to_string()))
}

/// Inverse of [`exact_params`] given the pump rate.
///
/// With `D = γ1·β − γ2·(β − 1)` (the initial slope of g2):
/// `k31 = γ1·γ2/D`, `k21 + k23 = γ1 + γ2 − k12 − k31`,
/// `k23 = (D − k21 − k23 − k12)·k31/k12`.
pub fn exact_rates(dp: &DerivedParams, k12: f64) -> Result<RateSet> {
    check_shape(dp, k12)?;
    let slope = dp.gamma1 * dp.beta - dp.gamma2 * (dp.beta - 1.0);
    if !(slope > 0.0) {
        return Err(KineticsError::InvalidInversion(
            "non-positive initial slope".into(),
        ));
    }
    let k31 = dp.gamma1 * dp.gamma2 / slope;
    let out_of_excited = dp.gamma1 + dp.gamma2 - k12 - k31;
    let k23 = (slope - out_of_excited - k12) * k31 / k12;
    let k21 = out_of_excited - k23;
    // Round-off can leave k23 at -1e-18 in the two-level limit.
    let k23 = if k23.abs() <= 1e-14 * out_of_excited.abs() {
        0.0
    } else {
        k23
    };
    if k21 <= 0.0 || k23 < 0.0 || k31 <= 0.0 {
        return Err(KineticsError::InvalidInversion(format!(
            "shape has no physical rates for k12 = {k12}: k21 = {k21}, k23 = {k23}, k31 = {k31}"
        )));
    }
    RateSet::new(k12, k21, k23, k31).map_err(|e| KineticsError::InvalidInversion(e.to_string()))
}

/// Stationary populations of the rate equations.
pub fn steady_state(rates: &RateSet) -> Result<Populations> {
    rates.validate()?;
    let mut system = rates.rate_matrix();
    // Replace one balance equation by the normalization p1 + p2 + p3 = 1.
    system.set_row(2, &nalgebra::RowVector3::new(1.0, 1.0, 1.0));
    let rhs = Vector3::new(0.0, 0.0, 1.0);
    let lu = system.lu();
    let scale = rates.k12 + rates.k21 + rates.k23 + rates.k31;
    let det = lu.determinant();
    if det.abs() <= 1e-12 * scale * scale {
        return Err(KineticsError::SingularSystem);
    }
    let p = lu.solve(&rhs).ok_or(KineticsError::SingularSystem)?;
    let clamp = |x: f64| x.clamp(0.0, 1.0);
    let (p1, p2, p3) = (clamp(p[0]), clamp(p[1]), clamp(p[2]));
    let total = p1 + p2 + p3;
    Ok(Populations {
        p1: p1 / total,
        p2: p2 / total,
        p3: p3 / total,
    })
}

/// Stationary photon emission rate `k21·p2`, ns⁻¹.
pub fn photon_rate(rates: &RateSet) -> Result<f64> {
    Ok(rates.k21 * steady_state(rates)?.p2)
}

/// Single-emitter g2 by direct integration of the rate equations.
///
/// Starts from the post-emission state `p = (1, 0, 0)` and returns
/// `p2(τ) / p2_ss` on each lag of `tau_grid` (sorted, non-negative, ns).
pub fn conditional_intensity(rates: &RateSet, tau_grid: &[f64]) -> Result<Vec<f64>> {
    let ss = steady_state(rates)?;
    if !(ss.p2 > 0.0) {
        return Err(KineticsError::DegenerateRates(
            "stationary excited population is zero".into(),
        ));
    }
    if tau_grid.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(KineticsError::IntegrationFailure(
            "lags must be finite and >= 0".into(),
        ));
    }
    if tau_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(KineticsError::IntegrationFailure(
            "lag grid must be sorted".into(),
        ));
    }
    let m = rates.rate_matrix();
    let rhs = |p: &Vector3<f64>| m * p;
    let mut solver = DormandPrince::new(1e-12, 1e-15);
    let mut state = Vector3::new(1.0, 0.0, 0.0);
    let mut t = 0.0;
    let mut out = Vec::with_capacity(tau_grid.len());
    for &target in tau_grid {
        state = solver.advance(&rhs, state, t, target)?;
        t = target;
        out.push(state[1] / ss.p2);
    }
    Ok(out)
}

/// Adaptive Dormand–Prince 5(4) integrator for small autonomous systems.
struct DormandPrince {
    rtol: f64,
    atol: f64,
    h: f64,
    max_steps: usize,
}

impl DormandPrince {
    const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
            0.0,
            0.0,
        ],
        [
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
            0.0,
        ],
        [
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ];
    const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];

    fn new(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            h: 1e-3,
            max_steps: 1_000_000,
        }
    }

    fn advance<F>(
        &mut self,
        f: &F,
        mut y: Vector3<f64>,
        mut t: f64,
        t_end: f64,
    ) -> Result<Vector3<f64>>
    where
        F: Fn(&Vector3<f64>) -> Vector3<f64>,
    {
        let mut steps = 0;
        while t < t_end {
            steps += 1;
            if steps > self.max_steps {
                return Err(KineticsError::IntegrationFailure(
                    "step budget exhausted".into(),
                ));
            }
            let last = self.h >= t_end - t;
            let h = if last { t_end - t } else { self.h };
            let mut k = [Vector3::zeros(); 7];
            k[0] = f(&y);
            for stage in 1..7 {
                let mut yi = y;
                for (j, kj) in k.iter().enumerate().take(stage) {
                    yi += kj * (h * Self::A[stage][j]);
                }
                k[stage] = f(&yi);
            }
            // FSAL: the 7th stage argument is the 5th-order solution.
            let mut y5 = y;
            for (j, kj) in k.iter().enumerate().take(6) {
                y5 += kj * (h * Self::A[6][j]);
            }
            let mut err = 0.0f64;
            for i in 0..3 {
                let mut e = 0.0;
                for (j, kj) in k.iter().enumerate() {
                    let b5 = if j < 6 { Self::A[6][j] } else { 0.0 };
                    e += h * (b5 - Self::B4[j]) * kj[i];
                }
                let sc = self.atol + self.rtol * y[i].abs().max(y5[i].abs());
                err = err.max((e / sc).abs());
            }
            if !err.is_finite() {
                return Err(KineticsError::IntegrationFailure(
                    "non-finite error estimate".into(),
                ));
            }
            if err <= 1.0 {
                t = if last { t_end } else { t + h };
                y = y5;
            }
            let factor = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            let next = h * factor;
            if next < 1e-14 * t_end.max(1.0) {
                return Err(KineticsError::IntegrationFailure(
                    "step size underflow".into(),
                ));
            }
            // Do not let a short final step shrink the controller's memory.
            if !(last && err <= 1.0) || next > self.h {
                self.h = next;
            }
        }
        Ok(y)
    }
}
