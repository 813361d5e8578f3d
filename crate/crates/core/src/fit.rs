//! Weighted nonlinear least squares (Levenberg–Marquardt) for the model
//! functions used by the experiments.

use std::f64::consts::{LN_2, PI};
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_ITERATIONS: usize = 500;
pub const RELATIVE_COST_TOLERANCE: f64 = 1e-10;
pub const GRADIENT_TOLERANCE: f64 = 1e-12;
const LAMBDA_INIT: f64 = 1e-3;
const LAMBDA_MAX: f64 = 1e16;
const RANK_TOLERANCE: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    /// `offset - depth/2 * (g(x - c + s/2) + g(x - c - s/2))`, Gaussian `g` of FWHM `w`.
    GaussianDips,
    /// `offset + A exp(-x/T) cos(2π f x + φ)`.
    DampedSine,
    /// `offset + A exp(-x/T)`.
    ExpDecay,
    /// `A / (1 + x/f0)`.
    Lowpass,
    /// `a + b x`.
    Linear,
    /// `α x² / (1 + β x)`.
    Saturation,
}

impl Model {
    pub fn name(self) -> &'static str {
        match self {
            Model::GaussianDips => "gaussian_dips",
            Model::DampedSine => "damped_sine",
            Model::ExpDecay => "exp_decay",
            Model::Lowpass => "lowpass",
            Model::Linear => "linear",
            Model::Saturation => "saturation",
        }
    }

    pub fn parameter_names(self) -> &'static [&'static str] {
        match self {
            Model::GaussianDips => &["offset", "depth", "center", "split", "fwhm"],
            Model::DampedSine => &["offset", "amplitude", "decay_time", "frequency", "phase"],
            Model::ExpDecay => &["offset", "amplitude", "decay_time"],
            Model::Lowpass => &["amplitude", "f0"],
            Model::Linear => &["intercept", "slope"],
            Model::Saturation => &["alpha", "beta"],
        }
    }

    pub fn n_params(self) -> usize {
        self.parameter_names().len()
    }

    pub fn eval(self, x: f64, p: &[f64]) -> f64 {
        match self {
            Model::GaussianDips => {
                let k = 4.0 * LN_2 / (p[4] * p[4]);
                let (u1, u2) = (x - p[2] + 0.5 * p[3], x - p[2] - 0.5 * p[3]);
                p[0] - 0.5 * p[1] * ((-k * u1 * u1).exp() + (-k * u2 * u2).exp())
            }
            Model::DampedSine => {
                p[0] + p[1] * (-x / p[2]).exp() * (2.0 * PI * p[3] * x + p[4]).cos()
            }
            Model::ExpDecay => p[0] + p[1] * (-x / p[2]).exp(),
            Model::Lowpass => p[0] / (1.0 + x / p[1]),
            Model::Linear => p[0] + p[1] * x,
            Model::Saturation => p[0] * x * x / (1.0 + p[1] * x),
        }
    }

    /// Partial derivatives with respect to each parameter, written into `g`.
    pub fn gradient(self, x: f64, p: &[f64], g: &mut [f64]) {
        match self {
            Model::GaussianDips => {
                let w = p[4];
                let k = 4.0 * LN_2 / (w * w);
                let (u1, u2) = (x - p[2] + 0.5 * p[3], x - p[2] - 0.5 * p[3]);
                let (e1, e2) = ((-k * u1 * u1).exp(), (-k * u2 * u2).exp());
                let h = 0.5 * p[1];
                g[0] = 1.0;
                g[1] = -0.5 * (e1 + e2);
                // d/du e^{-k u²} = -2 k u e^{-k u²}
                g[2] = -h * (2.0 * k * u1 * e1 + 2.0 * k * u2 * e2);
                g[3] = -h * (-k * u1 * e1 + k * u2 * e2);
                // dk/dw = -2k/w
                g[4] = -h * (2.0 * k / w) * (u1 * u1 * e1 + u2 * u2 * e2);
            }
            Model::DampedSine => {
                let env = (-x / p[2]).exp();
                let arg = 2.0 * PI * p[3] * x + p[4];
                let (s, c) = arg.sin_cos();
                g[0] = 1.0;
                g[1] = env * c;
                g[2] = p[1] * env * c * x / (p[2] * p[2]);
                g[3] = -p[1] * env * s * 2.0 * PI * x;
                g[4] = -p[1] * env * s;
            }
            Model::ExpDecay => {
                let env = (-x / p[2]).exp();
                g[0] = 1.0;
                g[1] = env;
                g[2] = p[1] * env * x / (p[2] * p[2]);
            }
            Model::Lowpass => {
                let d = 1.0 + x / p[1];
                g[0] = 1.0 / d;
                g[1] = p[0] * x / (p[1] * p[1] * d * d);
            }
            Model::Linear => {
                g[0] = 1.0;
                g[1] = x;
            }
            Model::Saturation => {
                let d = 1.0 + p[1] * x;
                g[0] = x * x / d;
                g[1] = -p[0] * x * x * x / (d * d);
            }
        }
    }

    /// Data-driven starting point.
    pub fn initial_guess(self, xs: &[f64], ys: &[f64]) -> Vec<f64> {
        match self {
            Model::GaussianDips => guess_gaussian_dips(xs, ys),
            Model::DampedSine => guess_damped_sine(xs, ys),
            Model::ExpDecay => guess_exp_decay(xs, ys),
            Model::Lowpass => guess_lowpass(xs, ys),
            Model::Linear => {
                let (a, b) = ordinary_least_squares(xs, ys);
                vec![a, b]
            }
            Model::Saturation => guess_saturation(xs, ys),
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("{model} needs at least {needed} points, got {got}")]
    TooFewPoints {
        model: Model,
        needed: usize,
        got: usize,
    },
    #[error("input lengths differ: {0}")]
    LengthMismatch(String),
    #[error("non-finite or non-positive input: {0}")]
    InvalidInput(String),
    #[error("curvature matrix is rank deficient at the solution")]
    RankDeficient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitParameter {
    pub name: String,
    pub value: f64,
    pub uncertainty: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub trial_cost: f64,
    pub lambda: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ExactFit,
    Gradient,
    CostChange,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: Model,
    pub parameters: Vec<FitParameter>,
    /// `sqrt(Σ ((y - f) / σ)²)` at the solution.
    pub residual_norm: f64,
    /// Largest cosine between the residual and a Jacobian column.
    pub gradient_norm: f64,
    pub r_squared: f64,
    pub converged: bool,
    pub termination: Termination,
    pub iterations: usize,
    pub covariance: Vec<Vec<f64>>,
    /// Weighted cost after the initial evaluation and after each accepted step.
    pub cost_history: Vec<f64>,
    pub log: Vec<IterationRecord>,
}

impl FitReport {
    pub fn values(&self) -> Vec<f64> {
        self.parameters.iter().map(|p| p.value).collect()
    }

    pub fn param(&self, name: &str) -> Option<&FitParameter> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn value(&self, name: &str) -> f64 {
        self.param(name).map_or(f64::NAN, |p| p.value)
    }

    pub fn uncertainty(&self, name: &str) -> f64 {
        self.param(name).map_or(f64::NAN, |p| p.uncertainty)
    }

    pub fn predict(&self, x: f64) -> f64 {
        self.model.eval(x, &self.values())
    }

    /// Report in other units: parameter `i` and its uncertainty are multiplied
    /// by `factors[i]`; the covariance is rescaled accordingly.
    pub fn rescaled(mut self, factors: &[f64]) -> Self {
        for (p, k) in self.parameters.iter_mut().zip(factors) {
            p.value *= k;
            p.uncertainty *= k.abs();
        }
        for (i, row) in self.covariance.iter_mut().enumerate() {
            for (j, c) in row.iter_mut().enumerate() {
                *c *= factors[i] * factors[j];
            }
        }
        self
    }
}

struct Problem<'a> {
    model: Model,
    xs: &'a [f64],
    ys: &'a [f64],
    w: Vec<f64>,
}

impl Problem<'_> {
    fn residuals(&self, p: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.xs.len(),
            self.xs
                .iter()
                .zip(self.ys)
                .zip(&self.w)
                .map(|((&x, &y), &w)| (y - self.model.eval(x, p)) * w),
        )
    }

    fn jacobian(&self, p: &[f64]) -> DMatrix<f64> {
        let np = p.len();
        let mut j = DMatrix::zeros(self.xs.len(), np);
        let mut g = vec![0.0; np];
        for (i, (&x, &w)) in self.xs.iter().zip(&self.w).enumerate() {
            self.model.gradient(x, p, &mut g);
            for k in 0..np {
                j[(i, k)] = g[k] * w;
            }
        }
        j
    }
}

fn cost_of(r: &DVector<f64>) -> f64 {
    r.norm_squared()
}

fn scaled_gradient(j: &DMatrix<f64>, r: &DVector<f64>) -> f64 {
    let rn = r.norm();
    if rn == 0.0 {
        return 0.0;
    }
    let jtr = j.transpose() * r;
    (0..j.ncols())
        .map(|k| {
            let cn = j.column(k).norm();
            if cn == 0.0 {
                0.0
            } else {
                (jtr[k] / (cn * rn)).abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Fit `model` to `(xs, ys)` with per-point standard deviations `sigma`
/// (unit weights when `None`). Without `initial_guess` the model's
/// data-driven heuristic is used.
pub fn curve_fit(
    model: Model,
    xs: &[f64],
    ys: &[f64],
    sigma: Option<&[f64]>,
    initial_guess: Option<&[f64]>,
) -> Result<FitReport, FitError> {
    let np = model.n_params();
    if xs.len() != ys.len() {
        return Err(FitError::LengthMismatch(format!(
            "{} xs vs {} ys",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < np + 1 {
        return Err(FitError::TooFewPoints {
            model,
            needed: np + 1,
            got: xs.len(),
        });
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(FitError::InvalidInput("xs and ys must be finite".into()));
    }
    let w = match sigma {
        Some(s) if s.len() != xs.len() => {
            return Err(FitError::LengthMismatch(format!(
                "{} sigmas for {} points",
                s.len(),
                xs.len()
            )))
        }
        Some(s) => {
            if s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(FitError::InvalidInput(
                    "sigma must be finite and > 0".into(),
                ));
            }
            s.iter().map(|v| 1.0 / v).collect()
        }
        None => vec![1.0; xs.len()],
    };
    let mut p = match initial_guess {
        Some(g) if g.len() != np => {
            return Err(FitError::LengthMismatch(format!(
                "{} initial values for {} parameters",
                g.len(),
                np
            )))
        }
        Some(g) => g.to_vec(),
        None => model.initial_guess(xs, ys),
    };
    if p.iter().any(|v| !v.is_finite()) {
        return Err(FitError::InvalidInput(format!(
            "initial guess {p:?} is not finite"
        )));
    }
    let prob = Problem { model, xs, ys, w };

    let mut r = prob.residuals(&p);
    let mut cost = cost_of(&r);
    if !cost.is_finite() {
        return Err(FitError::InvalidInput(
            "model is not finite at the initial guess".into(),
        ));
    }
    let mut j = prob.jacobian(&p);
    let mut cost_history = vec![cost];
    let mut log = Vec::new();
    let mut lambda = LAMBDA_INIT;
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;

    'outer: while iterations < MAX_ITERATIONS {
        if cost == 0.0 {
            termination = Termination::ExactFit;
            break;
        }
        if scaled_gradient(&j, &r) < GRADIENT_TOLERANCE {
            termination = Termination::Gradient;
            break;
        }
        iterations += 1;
        let jtj = j.transpose() * &j;
        let jtr = j.transpose() * &r;
        let diag_max = jtj.diagonal().max();
        loop {
            let mut a = jtj.clone();
            for k in 0..np {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12 * diag_max);
            }
            let step = a.cholesky().map(|c| c.solve(&jtr));
            let accepted = match step {
                Some(delta) => {
                    let trial: Vec<f64> = p.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
                    let r_trial = prob.residuals(&trial);
                    let c_trial = cost_of(&r_trial);
                    let ok = c_trial.is_finite() && c_trial <= cost;
                    log.push(IterationRecord {
                        iteration: iterations,
                        cost,
                        trial_cost: c_trial,
                        lambda,
                        accepted: ok,
                    });
                    if ok {
                        let change = (cost - c_trial) / cost;
                        p = trial;
                        r = r_trial;
                        cost = c_trial;
                        j = prob.jacobian(&p);
                        cost_history.push(cost);
                        lambda = (lambda / 10.0).max(1e-12);
                        if change < RELATIVE_COST_TOLERANCE && cost > 0.0 {
                            termination = if scaled_gradient(&j, &r) < GRADIENT_TOLERANCE {
                                Termination::Gradient
                            } else {
                                Termination::CostChange
                            };
                            break 'outer;
                        }
                    }
                    ok
                }
                None => false,
            };
            if accepted {
                break;
            }
            lambda *= 10.0;
            if lambda > LAMBDA_MAX {
                // no downhill step left at working precision
                termination = Termination::CostChange;
                break 'outer;
            }
        }
    }

    let jtj = j.transpose() * &j;
    let covariance_unit = invert_curvature(&jtj)?;
    let dof = (xs.len() - np) as f64;
    let s2 = cost / dof;
    let covariance: Vec<Vec<f64>> = (0..np)
        .map(|a| (0..np).map(|b| covariance_unit[(a, b)] * s2).collect())
        .collect();
    canonicalize(model, &mut p);
    let parameters = model
        .parameter_names()
        .iter()
        .zip(&p)
        .enumerate()
        .map(|(k, (name, &value))| FitParameter {
            name: name.to_string(),
            value,
            uncertainty: covariance[k][k].max(0.0).sqrt(),
        })
        .collect();

    let mean_y = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean_y).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| (y - model.eval(x, &p)).powi(2))
        .sum();
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };

    Ok(FitReport {
        model,
        parameters,
        residual_norm: cost.sqrt(),
        gradient_norm: scaled_gradient(&j, &r),
        r_squared,
        converged: termination != Termination::MaxIterations,
        termination,
        iterations,
        covariance,
        cost_history,
        log,
    })
}

/// Pick one representative of parameter sets that give the same curve.
fn canonicalize(model: Model, p: &mut [f64]) {
    match model {
        Model::GaussianDips => p[3] = p[3].abs(),
        Model::DampedSine => p[4] = PI - (PI - p[4]).rem_euclid(2.0 * PI),
        _ => {}
    }
}

fn invert_curvature(jtj: &DMatrix<f64>) -> Result<DMatrix<f64>, FitError> {
    let n = jtj.nrows();
    let d: Vec<f64> = (0..n).map(|k| jtj[(k, k)]).collect();
    if d.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(FitError::RankDeficient);
    }
    let s = DMatrix::from_fn(n, n, |a, b| jtj[(a, b)] / (d[a] * d[b]).sqrt());
    let eig = s.clone().symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(lo > RANK_TOLERANCE * hi) {
        return Err(FitError::RankDeficient);
    }
    let inv = s.try_inverse().ok_or(FitError::RankDeficient)?;
    Ok(DMatrix::from_fn(n, n, |a, b| {
        inv[(a, b)] / (d[a] * d[b]).sqrt()
    }))
}

// ---------------------------------------------------------------------------
// Initial guesses

/// Unweighted ordinary least squares `y = a + b x`.
pub fn ordinary_least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - b * mx, b)
}

fn sorted_by_x(xs: &[f64], ys: &[f64]) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v
}

fn edge_baseline(pts: &[(f64, f64)]) -> f64 {
    let k = (pts.len() / 10).max(1);
    let edge: Vec<f64> = pts[..k]
        .iter()
        .chain(&pts[pts.len() - k..])
        .map(|p| p.1)
        .collect();
    edge.iter().sum::<f64>() / edge.len() as f64
}

fn guess_gaussian_dips(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let pts = sorted_by_x(xs, ys);
    let offset = edge_baseline(&pts);
    let (imin, &(xmin, ymin)) = pts
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .expect("non-empty data");
    let drop = offset - ymin;
    let half = offset - 0.5 * drop;
    // half-depth crossings on either side of the minimum
    let mut lo = pts[0].0;
    for k in (0..imin).rev() {
        if pts[k].1 >= half {
            let (a, b) = (pts[k], pts[k + 1]);
            lo = a.0 + (half - a.1) * (b.0 - a.0) / (b.1 - a.1);
            break;
        }
    }
    let mut hi = pts[pts.len() - 1].0;
    for k in imin + 1..pts.len() {
        if pts[k].1 >= half {
            let (a, b) = (pts[k - 1], pts[k]);
            hi = a.0 + (half - a.1) * (b.0 - a.0) / (b.1 - a.1);
            break;
        }
    }
    let width = (hi - lo).abs().max(f64::EPSILON * xmin.abs().max(1.0));
    let center = 0.5 * (lo + hi);
    let split = 0.5 * width;
    let fwhm = 0.8 * width;
    let k = 4.0 * LN_2 / (fwhm * fwhm);
    let depth = drop / (-k * 0.25 * split * split).exp();
    vec![offset, depth, center, split, fwhm]
}

fn guess_damped_sine(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let pts = sorted_by_x(xs, ys);
    let n = pts.len();
    let span = pts[n - 1].0 - pts[0].0;
    let mean = pts.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let x0 = pts[0].0;
    let spectrum = |f: f64| -> (f64, f64) {
        pts.iter().fold((0.0, 0.0), |(re, im), &(x, y)| {
            let a = 2.0 * PI * f * (x - x0);
            (re + (y - mean) * a.cos(), im - (y - mean) * a.sin())
        })
    };
    let df = 0.25 / span;
    let nyquist = 0.5 * (n - 1) as f64 / span;
    let mut best = (df, 0.0);
    let mut f = df;
    while f <= nyquist {
        let (re, im) = spectrum(f);
        let power = re * re + im * im;
        // strict comparison keeps the lowest frequency on ties
        if power > best.1 {
            best = (f, power);
        }
        f += df;
    }
    let freq = best.0;
    let (re, im) = spectrum(freq);
    let amplitude = 2.0 * (re * re + im * im).sqrt() / n as f64;
    let phase = im.atan2(re) - 2.0 * PI * freq * x0;
    let decay = 0.5 * span;
    // the envelope pulls the mean away from the asymptote; use the tail
    let k = (n / 5).max(1);
    let tail = pts[n - k..].iter().map(|p| p.1).sum::<f64>() / k as f64;
    vec![
        tail,
        amplitude * 1.5,
        decay,
        freq,
        phase.rem_euclid(2.0 * PI),
    ]
}

fn guess_exp_decay(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let pts = sorted_by_x(xs, ys);
    let n = pts.len();
    let k = (n / 10).max(1);
    let first = pts[0].1;
    let tail = pts[n - k..].iter().map(|p| p.1).sum::<f64>() / k as f64;
    let amp = first - tail;
    let span = pts[n - 1].0 - pts[0].0;
    // asymptote placed slightly beyond the tail so the logarithm stays defined
    let offset = tail - 0.02 * amp;
    let (lx, ly): (Vec<f64>, Vec<f64>) = pts
        .iter()
        .filter(|p| (p.1 - offset) * amp.signum() > 0.1 * amp.abs())
        .map(|p| (p.0, ((p.1 - offset) * amp.signum()).ln()))
        .unzip();
    let decay = if lx.len() >= 2 {
        let (_, slope) = ordinary_least_squares(&lx, &ly);
        if slope < 0.0 {
            -1.0 / slope
        } else {
            span / 3.0
        }
    } else {
        span / 3.0
    };
    let a0 = amp * (pts[0].0 / decay).exp();
    vec![tail, a0, decay]
}

fn guess_lowpass(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let pts = sorted_by_x(xs, ys);
    let a = pts[0].1 * (1.0 + 0.0);
    let target = 0.5 * a.abs();
    let f0 = pts
        .windows(2)
        .find(|w| w[0].1.abs() >= target && w[1].1.abs() < target)
        .map(|w| {
            // interpolate on a log axis
            let (l0, l1) = (w[0].0.max(f64::MIN_POSITIVE).ln(), w[1].0.ln());
            let t = (w[0].1.abs() - target) / (w[0].1.abs() - w[1].1.abs());
            (l0 + t * (l1 - l0)).exp()
        })
        .unwrap_or(pts[pts.len() - 1].0);
    let f0 = if f0 > 0.0 { f0 } else { 1.0 };
    vec![a * (1.0 + pts[0].0 / f0), f0]
}

fn guess_saturation(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    // y (1 + β x) = α x²  is linear in (α, β)
    let (mut s11, mut s12, mut s22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (u, v) = (x * x, -x * y);
        s11 += u * u;
        s12 += u * v;
        s22 += v * v;
        b1 += u * y;
        b2 += v * y;
    }
    let det = s11 * s22 - s12 * s12;
    if det.abs() > 0.0 && det.is_finite() {
        vec![(b1 * s22 - b2 * s12) / det, (s11 * b2 - s12 * b1) / det]
    } else {
        vec![if s11 > 0.0 { b1 / s11 } else { 1.0 }, 0.0]
    }
}
