//! Bilinear matrix control systems `Ẋ = A(t)X + Σ uᵢ(t) Bᵢ X`.
//!
//! When `J·A(t)` and every `J·Bᵢ` are symmetric the flow preserves `Sp(m)`,
//! so the end-point map `u ↦ X(T)` takes values in the group. Its
//! differential at a reference control is
//! `D E(v) = Σᵢ S(T) ∫ vᵢ(t) S(t)⁻¹ Bᵢ X̄(t) dt`, evaluated here with
//! composite Simpson quadrature on the trajectory grid.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::max_abs;
use crate::symplectic::{self, standard_form, SymplecticMatrix, DEFAULT_TOL_SYMP};
use crate::{Error, Result};

/// Default defect ceiling for stored trajectory states.
pub const DEFAULT_TOL_TRAJ: f64 = 1e-8;
/// Default number of RK4 steps on the horizon.
pub const DEFAULT_STEPS: usize = 1000;
/// Default reprojection period (in steps).
pub const DEFAULT_REPROJECT_EVERY: usize = 50;

const BLOW_UP_DEFECT: f64 = 0.1;
const INVERSE_FALLBACK_DEFECT: f64 = 1e-6;
const CHECK_SAMPLES: usize = 33;

/// Time-dependent drift coefficient `t ↦ A(t)`.
///
/// `derivative(t, 0)` is the value and `derivative(t, 1)` must always be
/// available. Higher orders are optional; bracket computations that need a
/// missing order either finite-difference it or fail.
pub trait CoefficientPath: Send + Sync + fmt::Debug {
    /// Matrix size (`2m`).
    fn dim(&self) -> usize;

    fn value(&self, t: f64) -> DMatrix<f64>;

    fn derivative(&self, t: f64, order: usize) -> Option<DMatrix<f64>>;
}

/// `A(t) ≡ A₀`.
#[derive(Debug, Clone)]
pub struct ConstantCoefficient(pub DMatrix<f64>);

impl CoefficientPath for ConstantCoefficient {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn value(&self, _t: f64) -> DMatrix<f64> {
        self.0.clone()
    }

    fn derivative(&self, _t: f64, order: usize) -> Option<DMatrix<f64>> {
        Some(if order == 0 {
            self.0.clone()
        } else {
            DMatrix::zeros(self.0.nrows(), self.0.ncols())
        })
    }
}

/// `A(t) = A₀ + t·A₁`.
#[derive(Debug, Clone)]
pub struct AffineCoefficient {
    pub offset: DMatrix<f64>,
    pub slope: DMatrix<f64>,
}

impl CoefficientPath for AffineCoefficient {
    fn dim(&self) -> usize {
        self.offset.nrows()
    }

    fn value(&self, t: f64) -> DMatrix<f64> {
        &self.offset + t * &self.slope
    }

    fn derivative(&self, t: f64, order: usize) -> Option<DMatrix<f64>> {
        Some(match order {
            0 => self.value(t),
            1 => self.slope.clone(),
            _ => DMatrix::zeros(self.offset.nrows(), self.offset.ncols()),
        })
    }
}

/// The data `(T, A(·), Ȧ(·), B₁…B_k)` of a bilinear control system whose flow
/// preserves the symplectic group.
#[derive(Debug, Clone)]
pub struct BilinearSystem {
    m: usize,
    horizon: f64,
    drift: Arc<dyn CoefficientPath>,
    controls: Vec<DMatrix<f64>>,
}

impl BilinearSystem {
    /// Validates `J·A(t)` and `J·Bᵢ` symmetry and the consistency of `Ȧ`
    /// with `A` on a uniform set of check times.
    pub fn new(horizon: f64, drift: Arc<dyn CoefficientPath>, controls: Vec<DMatrix<f64>>) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidSystem(format!("horizon must be positive, got {horizon}")));
        }
        let n = drift.dim();
        if n == 0 || !n.is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "drift dimension {n} is not a positive even number"
            )));
        }
        let m = n / 2;
        let j = standard_form(m);
        for (i, b) in controls.iter().enumerate() {
            if b.shape() != (n, n) {
                return Err(Error::Dimension(format!(
                    "control matrix {i} has shape {:?}",
                    b.shape()
                )));
            }
            let d = sym_defect(&(&j * b));
            if d > DEFAULT_TOL_SYMP {
                return Err(Error::InvalidSystem(format!(
                    "J·B{} is not symmetric (defect {d:.3e})",
                    i + 1
                )));
            }
        }
        let h = horizon * 1e-4;
        for s in 0..CHECK_SAMPLES {
            let t = horizon * s as f64 / (CHECK_SAMPLES - 1) as f64;
            let a = drift.value(t);
            if a.shape() != (n, n) {
                return Err(Error::Dimension(format!("A({t}) has shape {:?}", a.shape())));
            }
            let d = sym_defect(&(&j * &a));
            if d > DEFAULT_TOL_SYMP {
                return Err(Error::InvalidSystem(format!(
                    "J·A({t}) is not symmetric (defect {d:.3e})"
                )));
            }
            let a_dot = drift
                .derivative(t, 1)
                .ok_or_else(|| Error::InvalidSystem("drift does not provide its first derivative".into()))?;
            if s > 0 && s + 1 < CHECK_SAMPLES {
                let fd = (drift.value(t + h) - drift.value(t - h)) / (2.0 * h);
                let err = max_abs(&(fd - &a_dot));
                let scale = 1.0 + max_abs(&a) + max_abs(&a_dot);
                if err > 1e-5 * scale {
                    return Err(Error::InvalidSystem(format!(
                        "Ȧ({t}) is inconsistent with A (centered difference error {err:.3e})"
                    )));
                }
            }
        }
        Ok(Self {
            m,
            horizon,
            drift,
            controls,
        })
    }

    pub fn half_dim(&self) -> usize {
        self.m
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of control channels `k`.
    pub fn channels(&self) -> usize {
        self.controls.len()
    }

    pub fn drift(&self) -> &dyn CoefficientPath {
        self.drift.as_ref()
    }

    pub fn control_matrices(&self) -> &[DMatrix<f64>] {
        &self.controls
    }

    /// `A(t) + Σ uᵢ Bᵢ`.
    fn generator(&self, t: f64, u: &[f64]) -> DMatrix<f64> {
        let mut g = self.drift.value(t);
        for (ui, b) in u.iter().zip(&self.controls) {
            if *ui != 0.0 {
                g += *ui * b;
            }
        }
        g
    }
}

fn sym_defect(s: &DMatrix<f64>) -> f64 {
    max_abs(&(s - s.transpose()))
}

/// Open time interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, t: f64) -> bool {
        t > self.start && t < self.end
    }

    pub fn len(&self) -> f64 {
        (self.end - self.start).max(0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Where a control is allowed to be nonzero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Support {
    /// No restriction on the closed horizon.
    Unrestricted,
    /// Union of open intervals; samples elsewhere are exact zeros.
    Within(Vec<Interval>),
}

impl Support {
    pub fn contains(&self, t: f64) -> bool {
        match self {
            Support::Unrestricted => true,
            Support::Within(ints) => ints.iter().any(|i| i.contains(t)),
        }
    }

    fn union(&self, other: &Support) -> Support {
        match (self, other) {
            (Support::Unrestricted, _) | (_, Support::Unrestricted) => Support::Unrestricted,
            (Support::Within(a), Support::Within(b)) => {
                let mut all: Vec<Interval> = a.iter().chain(b).copied().filter(|i| !i.is_empty()).collect();
                all.sort_by(|x, y| x.start.total_cmp(&y.start));
                let mut merged: Vec<Interval> = Vec::with_capacity(all.len());
                for i in all {
                    match merged.last_mut() {
                        Some(last) if i.start < last.end => last.end = last.end.max(i.end),
                        _ => merged.push(i),
                    }
                }
                Support::Within(merged)
            }
        }
    }
}

/// A `k`-channel control sampled on a uniform grid of `[0, T]`.
///
/// Between grid points the signal is the cubic Hermite interpolant with
/// finite-difference node slopes, so it is `C¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    horizon: f64,
    /// `(N+1) x k`, one row per grid time.
    values: DMatrix<f64>,
    support: Support,
}

impl ControlSignal {
    /// Rejects samples that are nonzero outside the declared support.
    pub fn new(horizon: f64, values: DMatrix<f64>, support: Support) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::InvalidControl(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if values.nrows() < 2 {
            return Err(Error::InvalidControl("a control needs at least two grid points".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidControl("non-finite control sample".into()));
        }
        let sig = Self {
            horizon,
            values,
            support,
        };
        for j in 0..sig.values.nrows() {
            let t = sig.time(j);
            if !sig.support.contains(t) && sig.values.row(j).iter().any(|&v| v != 0.0) {
                return Err(Error::InvalidControl(format!(
                    "sample at t = {t} lies outside the declared support but is nonzero"
                )));
            }
        }
        Ok(sig)
    }

    pub fn zeros(channels: usize, intervals: usize, horizon: f64) -> Self {
        Self {
            horizon,
            values: DMatrix::zeros(intervals + 1, channels),
            support: Support::Within(Vec::new()),
        }
    }

    /// Samples `f` at every grid time inside `support` and stores exact zeros
    /// elsewhere.
    pub fn from_fn<F>(channels: usize, intervals: usize, horizon: f64, support: Support, f: F) -> Self
    where
        F: Fn(f64) -> Vec<f64>,
    {
        let mut values = DMatrix::zeros(intervals + 1, channels);
        for j in 0..=intervals {
            let t = horizon * j as f64 / intervals as f64;
            if support.contains(t) {
                let row = f(t);
                assert_eq!(row.len(), channels, "control closure returned wrong channel count");
                for (i, v) in row.into_iter().enumerate() {
                    values[(j, i)] = v;
                }
            }
        }
        Self {
            horizon,
            values,
            support,
        }
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    /// Number of grid intervals `N`.
    pub fn intervals(&self) -> usize {
        self.values.nrows() - 1
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.intervals() as f64
    }

    pub fn time(&self, j: usize) -> f64 {
        self.horizon * j as f64 / self.intervals() as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.intervals()).map(|j| self.time(j)).collect()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn support(&self) -> &Support {
        &self.support
    }

    pub fn sample(&self, j: usize) -> Vec<f64> {
        self.values.row(j).iter().copied().collect()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Largest absolute sample.
    pub fn sup_norm(&self) -> f64 {
        max_abs(&self.values)
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            horizon: self.horizon,
            values: alpha * &self.values,
            support: self.support.clone(),
        }
    }

    /// `base + Σ cⱼ·signalⱼ`; all signals must share the grid of `base`.
    pub fn combine(base: &ControlSignal, coeffs: &[f64], signals: &[ControlSignal]) -> Result<Self> {
        if coeffs.len() != signals.len() {
            return Err(Error::InvalidArgument(format!(
                "{} coefficients for {} signals",
                coeffs.len(),
                signals.len()
            )));
        }
        let mut values = base.values.clone();
        let mut support = base.support.clone();
        for (c, s) in coeffs.iter().zip(signals) {
            base.check_same_grid(s)?;
            if *c != 0.0 {
                values += *c * &s.values;
                support = support.union(&s.support);
            }
        }
        Ok(Self {
            horizon: base.horizon,
            values,
            support,
        })
    }

    pub(crate) fn check_same_grid(&self, other: &ControlSignal) -> Result<()> {
        if self.values.shape() != other.values.shape() || self.horizon != other.horizon {
            return Err(Error::Grid(format!(
                "control grids differ: {} intervals x {} channels on [0, {}] vs {} x {} on [0, {}]",
                self.intervals(),
                self.channels(),
                self.horizon,
                other.intervals(),
                other.channels(),
                other.horizon
            )));
        }
        Ok(())
    }

    fn node_slope(&self, j: usize, i: usize) -> f64 {
        let n = self.intervals();
        let h = self.step();
        let v = |r: usize| self.values[(r, i)];
        if n == 1 {
            (v(1) - v(0)) / h
        } else if j == 0 {
            (-3.0 * v(0) + 4.0 * v(1) - v(2)) / (2.0 * h)
        } else if j == n {
            (3.0 * v(n) - 4.0 * v(n - 1) + v(n - 2)) / (2.0 * h)
        } else {
            (v(j + 1) - v(j - 1)) / (2.0 * h)
        }
    }

    /// Hermite-interpolated value at `t` (clamped to `[0, T]`).
    pub fn value_at(&self, t: f64) -> Vec<f64> {
        let n = self.intervals();
        let h = self.step();
        let s = (t / h).clamp(0.0, n as f64);
        let j = (s.floor() as usize).min(n - 1);
        let theta = s - j as f64;
        if theta == 0.0 {
            return self.sample(j);
        }
        if theta == 1.0 {
            return self.sample(j + 1);
        }
        let t2 = theta * theta;
        let t3 = t2 * theta;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + theta;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        (0..self.channels())
            .map(|i| {
                h00 * self.values[(j, i)]
                    + h10 * h * self.node_slope(j, i)
                    + h01 * self.values[(j + 1, i)]
                    + h11 * h * self.node_slope(j + 1, i)
            })
            .collect()
    }
}

/// Sampled solution of the Cauchy problem.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<SymplecticMatrix>,
    /// Resolvent `S(t)` of the propagated generator `A(t) + Σ uᵢ(t)Bᵢ`, with
    /// `S(0) = I`. For the zero control this is the fundamental solution of
    /// `Ṡ = A(t)S`.
    pub fundamental: Option<Vec<SymplecticMatrix>>,
}

impl Trajectory {
    pub fn endpoint(&self) -> &SymplecticMatrix {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn intervals(&self) -> usize {
        self.times.len() - 1
    }

    pub fn max_defect(&self) -> f64 {
        self.states.iter().map(|s| s.defect()).fold(0.0, f64::max)
    }
}

/// Integration settings for [`propagate_with`].
#[derive(Debug, Clone)]
pub struct PropagateOptions {
    pub steps: usize,
    /// Reproject onto the group every `R` steps (`None` disables periodic
    /// reprojection; states whose defect exceeds `tol_traj` are always
    /// reprojected).
    pub reproject_every: Option<usize>,
    pub tol_traj: f64,
    pub with_fundamental: bool,
    /// Integration interval; defaults to `[0, T]`.
    pub span: Option<(f64, f64)>,
}

impl Default for PropagateOptions {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            reproject_every: Some(DEFAULT_REPROJECT_EVERY),
            tol_traj: DEFAULT_TOL_TRAJ,
            with_fundamental: false,
            span: None,
        }
    }
}

impl PropagateOptions {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }
}

/// Classical RK4 integration of `Ẋ = (A(t) + Σ uᵢ(t)Bᵢ) X` over `[0, T]`.
pub fn propagate(sys: &BilinearSystem, x0: &SymplecticMatrix, u: &ControlSignal, steps: usize) -> Result<Trajectory> {
    propagate_with(sys, x0, u, &PropagateOptions::with_steps(steps))
}

pub fn propagate_with(
    sys: &BilinearSystem,
    x0: &SymplecticMatrix,
    u: &ControlSignal,
    opts: &PropagateOptions,
) -> Result<Trajectory> {
    if u.channels() != sys.channels() {
        return Err(Error::InvalidControl(format!(
            "control has {} channels, system has {}",
            u.channels(),
            sys.channels()
        )));
    }
    if x0.half_dim() != sys.half_dim() {
        return Err(Error::Dimension(format!(
            "initial condition has half-dimension {}, system has {}",
            x0.half_dim(),
            sys.half_dim()
        )));
    }
    if opts.steps == 0 {
        return Err(Error::InvalidArgument("steps must be positive".into()));
    }
    let (t0, t1) = opts.span.unwrap_or((0.0, sys.horizon()));
    if !(t0 < t1) {
        return Err(Error::InvalidArgument(format!("empty integration span ({t0}, {t1})")));
    }
    let m = sys.half_dim();
    let j = standard_form(m);
    let h = (t1 - t0) / opts.steps as f64;
    let time = |s: usize| {
        if s == opts.steps {
            t1
        } else {
            t0 + (t1 - t0) * s as f64 / opts.steps as f64
        }
    };

    let mut times = Vec::with_capacity(opts.steps + 1);
    let mut states = Vec::with_capacity(opts.steps + 1);
    times.push(t0);
    states.push(x0.clone());

    let mut x = x0.entries().clone();
    let mut g_start = sys.generator(t0, &u.value_at(t0));
    for s in 0..opts.steps {
        let ta = time(s);
        let tb = time(s + 1);
        let tm = 0.5 * (ta + tb);
        let g_mid = sys.generator(tm, &u.value_at(tm));
        let g_end = sys.generator(tb, &u.value_at(tb));

        let k1 = &g_start * &x;
        let k2 = &g_mid * (&x + (0.5 * h) * &k1);
        let k3 = &g_mid * (&x + (0.5 * h) * &k2);
        let k4 = &g_end * (&x + h * &k3);
        x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);

        let mut defect = max_abs(&(x.transpose() * &j * &x - &j));
        if !defect.is_finite() || defect > BLOW_UP_DEFECT {
            return Err(Error::BlowUp { time: tb, defect });
        }
        let periodic = opts.reproject_every.is_some_and(|r| r > 0 && (s + 1) % r == 0);
        if periodic || defect > opts.tol_traj {
            let p = symplectic::reproject(&x, opts.tol_traj.min(DEFAULT_TOL_SYMP))
                .map_err(|_| Error::BlowUp { time: tb, defect })?;
            x = p.into_inner();
            defect = max_abs(&(x.transpose() * &j * &x - &j));
        }
        debug_assert!(defect <= opts.tol_traj);
        times.push(tb);
        states.push(SymplecticMatrix::from_trusted(m, x.clone()));
        g_start = g_end;
    }

    let fundamental = if opts.with_fundamental {
        let x0_inv = x0.inverse();
        let is_identity = x0.entries() == &DMatrix::<f64>::identity(2 * m, 2 * m);
        Some(
            states
                .iter()
                .map(|s| {
                    if is_identity {
                        s.clone()
                    } else {
                        SymplecticMatrix::from_trusted(m, s.entries() * &x0_inv)
                    }
                })
                .collect(),
        )
    } else {
        None
    };
    Ok(Trajectory {
        times,
        states,
        fundamental,
    })
}

/// The end-point map `E^{x0,T}(u)`.
pub fn endpoint(
    sys: &BilinearSystem,
    x0: &SymplecticMatrix,
    u: &ControlSignal,
    steps: usize,
) -> Result<SymplecticMatrix> {
    let mut traj = propagate(sys, x0, u, steps)?;
    Ok(traj.states.pop().expect("non-empty trajectory"))
}

/// Composite Simpson weights on `n` uniform intervals of width `h`, with a
/// closing 3/8 panel when `n` is odd.
pub fn simpson_weights(n: usize, h: f64) -> Vec<f64> {
    let mut w = vec![0.0; n + 1];
    match n {
        0 => {}
        1 => {
            w[0] = 0.5 * h;
            w[1] = 0.5 * h;
        }
        _ => {
            let even_part = if n.is_multiple_of(2) { n } else { n - 3 };
            for panel in (0..even_part).step_by(2) {
                w[panel] += h / 3.0;
                w[panel + 1] += 4.0 * h / 3.0;
                w[panel + 2] += h / 3.0;
            }
            if n % 2 == 1 {
                let s = n - 3;
                w[s] += 3.0 * h / 8.0;
                w[s + 1] += 9.0 * h / 8.0;
                w[s + 2] += 9.0 * h / 8.0;
                w[s + 3] += 3.0 * h / 8.0;
            }
        }
    }
    w
}

/// Precomputed integrand of the end-point differential along one trajectory:
/// `Kᵢ(tⱼ) = S(T) S(tⱼ)⁻¹ Bᵢ X̄(tⱼ)` together with Simpson weights.
#[derive(Debug, Clone)]
pub struct EndpointKernel {
    horizon: f64,
    weights: Vec<f64>,
    /// `terms[j][i]`.
    terms: Vec<Vec<DMatrix<f64>>>,
    endpoint: SymplecticMatrix,
}

impl EndpointKernel {
    pub fn new(sys: &BilinearSystem, traj: &Trajectory) -> Result<Self> {
        let fundamental = traj
            .fundamental
            .as_ref()
            .ok_or_else(|| Error::Grid("trajectory does not carry the fundamental solution".into()))?;
        if fundamental.len() != traj.states.len() || traj.states.len() < 2 {
            return Err(Error::Grid("fundamental and state samples differ in length".into()));
        }
        let n = traj.intervals();
        let t_start = traj.times[0];
        let t_end = *traj.times.last().expect("non-empty");
        let s_end = fundamental.last().expect("non-empty").entries().clone();
        let terms = fundamental
            .iter()
            .zip(&traj.states)
            .map(|(s, x)| {
                let s_inv = if s.defect() <= INVERSE_FALLBACK_DEFECT {
                    s.inverse()
                } else {
                    s.entries().clone().try_inverse().unwrap_or_else(|| s.inverse())
                };
                let left = &s_end * s_inv;
                sys.control_matrices().iter().map(|b| &left * b * x.entries()).collect()
            })
            .collect();
        Ok(Self {
            horizon: t_end - t_start,
            weights: simpson_weights(n, (t_end - t_start) / n as f64),
            terms,
            endpoint: traj.endpoint().clone(),
        })
    }

    pub fn intervals(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn endpoint(&self) -> &SymplecticMatrix {
        &self.endpoint
    }

    /// `Kᵢ(tⱼ)`.
    pub fn term(&self, j: usize, i: usize) -> &DMatrix<f64> {
        &self.terms[j][i]
    }

    /// `D E(v)`; `v` must live on the kernel's grid.
    pub fn apply(&self, v: &ControlSignal) -> Result<DMatrix<f64>> {
        if v.intervals() != self.intervals() || (v.horizon() - self.horizon).abs() > 1e-12 * self.horizon {
            return Err(Error::Grid(format!(
                "direction has {} intervals on [0, {}], trajectory has {} on a span of {}",
                v.intervals(),
                v.horizon(),
                self.intervals(),
                self.horizon
            )));
        }
        let channels = self.terms[0].len();
        if v.channels() != channels {
            return Err(Error::Grid(format!(
                "direction has {} channels, system has {channels}",
                v.channels()
            )));
        }
        let dim = self.endpoint.entries().nrows();
        let mut acc = DMatrix::zeros(dim, dim);
        for (j, (w, row)) in self.weights.iter().zip(&self.terms).enumerate() {
            for (i, term) in row.iter().enumerate() {
                let c = v.values()[(j, i)];
                if c != 0.0 {
                    acc += (w * c) * term;
                }
            }
        }
        Ok(acc)
    }
}

/// `D_ū E(v)` along `base` (which must carry its fundamental solution).
pub fn endpoint_differential(sys: &BilinearSystem, base: &Trajectory, v: &ControlSignal) -> Result<DMatrix<f64>> {
    EndpointKernel::new(sys, base)?.apply(v)
}

/// Column-major vectorization, exposed for residual computations.
pub fn vectorize(m: &DMatrix<f64>) -> DVector<f64> {
    crate::linalg::vectorize(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn harmonic(k: f64) -> BilinearSystem {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -k, 0.0]);
        let b = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        BilinearSystem::new(1.0, Arc::new(ConstantCoefficient(a)), vec![b]).unwrap()
    }

    #[test]
    fn flat_jacobi_flow_is_a_shear() {
        let sys = harmonic(0.0);
        let u = ControlSignal::zeros(1, 1000, 1.0);
        let x = endpoint(&sys, &SymplecticMatrix::identity(1), &u, 1000).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!((x.entries() - expected).amax() < 1e-14);
    }

    #[test]
    fn harmonic_flow_matches_rotation() {
        let sys = harmonic(1.0);
        let u = ControlSignal::zeros(1, 1000, 1.0);
        let x = endpoint(&sys, &SymplecticMatrix::identity(1), &u, 1000).unwrap();
        let (s, c) = 1.0_f64.sin_cos();
        let expected = DMatrix::from_row_slice(2, 2, &[c, s, -s, c]);
        assert!((x.entries() - expected).amax() < 1e-8);
    }

    #[test]
    fn rejects_non_hamiltonian_coefficients() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let err = BilinearSystem::new(1.0, Arc::new(ConstantCoefficient(a)), vec![]).unwrap_err();
        assert!(matches!(err, Error::InvalidSystem(_)));

        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::<f64>::identity(2, 2);
        let err = BilinearSystem::new(1.0, Arc::new(ConstantCoefficient(a)), vec![b]).unwrap_err();
        assert!(matches!(err, Error::InvalidSystem(_)));
    }

    #[derive(Debug)]
    struct WrongDerivative;

    impl CoefficientPath for WrongDerivative {
        fn dim(&self) -> usize {
            2
        }
        fn value(&self, t: f64) -> DMatrix<f64> {
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -t, 0.0])
        }
        fn derivative(&self, t: f64, order: usize) -> Option<DMatrix<f64>> {
            match order {
                0 => Some(self.value(t)),
                1 => Some(DMatrix::zeros(2, 2)),
                _ => None,
            }
        }
    }

    #[test]
    fn rejects_inconsistent_derivative() {
        let err = BilinearSystem::new(1.0, Arc::new(WrongDerivative), vec![]).unwrap_err();
        assert!(matches!(err, Error::InvalidSystem(msg) if msg.contains("inconsistent")));
    }

    #[test]
    fn control_support_is_enforced() {
        let mut values = DMatrix::zeros(11, 1);
        values[(0, 0)] = 1.0;
        let err = ControlSignal::new(1.0, values, Support::Within(vec![Interval::new(0.2, 0.8)])).unwrap_err();
        assert!(matches!(err, Error::InvalidControl(_)));

        let u = ControlSignal::from_fn(1, 10, 1.0, Support::Within(vec![Interval::new(0.2, 0.8)]), |_| {
            vec![1.0]
        });
        for (j, t) in u.times().iter().enumerate() {
            let inside = *t > 0.2 && *t < 0.8;
            assert_eq!(u.values()[(j, 0)] != 0.0, inside, "t = {t}");
        }
    }

    #[test]
    fn hermite_reproduces_cubics_in_the_interior() {
        let f = |t: f64| 0.3 + t - 2.0 * t * t;
        let u = ControlSignal::from_fn(1, 50, 1.0, Support::Unrestricted, |t| vec![f(t)]);
        for t in [0.1234, 0.5, 0.777] {
            let v = u.value_at(t)[0];
            assert!((v - f(t)).abs() < 1e-12, "t={t}: {v} vs {}", f(t));
        }
        assert_eq!(u.value_at(0.2)[0], u.values()[(10, 0)]);
    }

    #[test]
    fn simpson_weights_integrate_cubics() {
        for n in [2usize, 3, 7, 10] {
            let h = 1.0 / n as f64;
            let w = simpson_weights(n, h);
            let integral: f64 = w
                .iter()
                .enumerate()
                .map(|(j, wj)| {
                    let t = j as f64 * h;
                    wj * (t * t * t - t)
                })
                .sum();
            assert!((integral - (0.25 - 0.5)).abs() < 1e-13, "n={n}");
        }
    }

    #[test]
    fn zero_direction_has_zero_differential() {
        let sys = harmonic(1.0);
        let u = ControlSignal::zeros(1, 100, 1.0);
        let opts = PropagateOptions {
            steps: 100,
            with_fundamental: true,
            ..PropagateOptions::default()
        };
        let traj = propagate_with(&sys, &SymplecticMatrix::identity(1), &u, &opts).unwrap();
        let d = endpoint_differential(&sys, &traj, &u).unwrap();
        assert_eq!(d, DMatrix::zeros(2, 2));

        let wrong = ControlSignal::zeros(1, 50, 1.0);
        assert!(matches!(
            endpoint_differential(&sys, &traj, &wrong),
            Err(Error::Grid(_))
        ));
    }

    #[test]
    fn blow_up_is_reported() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0e6, 0.0]);
        let sys = BilinearSystem::new(1.0, Arc::new(ConstantCoefficient(a)), vec![]).unwrap();
        let u = ControlSignal::zeros(0, 10, 1.0);
        let err = propagate(&sys, &SymplecticMatrix::identity(1), &u, 10).unwrap_err();
        assert!(matches!(err, Error::BlowUp { .. }));
    }
}
