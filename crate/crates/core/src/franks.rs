//! Curvature perturbations of Jacobi flows along a geodesic arc.
//!
//! Along a unit-length geodesic in Fermi coordinates the linearized Poincaré
//! map solves `Ẇ = [[0, I], [−K(t), 0]] W`, where `K(t)` is the symmetric
//! `m x m` curvature matrix (`m = n − 1`). A conformal perturbation whose
//! transverse Hessian is `u_ij(t)` adds `u_ij(t)·𝓔(ij)` to the generator,
//! with `𝓔(ij) = [[0, 0], [E(ij), 0]]` and
//! `E(ij)_kl = δ_ik δ_jl + δ_il δ_jk`. The resulting bilinear system on
//! `Sp(m)` has `m(m+1)/2` channels; when `K(t̄)` has distinct eigenvalues for
//! some `t̄` in the perturbation window its brackets up to order three span the
//! tangent space, so every nearby symplectic matrix is the linearized Poincaré
//! map of a small perturbation.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bilinear::{
    propagate_with, BilinearSystem, CoefficientPath, ControlSignal, Interval, PropagateOptions, DEFAULT_STEPS,
};
use crate::steering::{
    build_basis, control_norm, newton_steer, Avoidance, BasisOptions, ControlBasis, SteerOptions, SupportMask,
};
use crate::symplectic::{reproject, tangent_basis, SymplecticMatrix};
use crate::{Error, Result};

/// Default eigenvalue-gap threshold for the distinct-eigenvalue check.
pub const DEFAULT_GAP_TOL: f64 = 1e-3;

const SYMMETRY_TOL: f64 = 1e-12;

/// How a curvature path was specified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurvaturePreset {
    Constant,
    DiagonalAffine,
    Sampled,
}

#[derive(Debug, Clone)]
enum CurvatureModel {
    Constant(DMatrix<f64>),
    DiagonalAffine {
        offset: Vec<f64>,
        slope: Vec<f64>,
    },
    Sampled {
        k: Vec<DMatrix<f64>>,
        k_dot: Vec<DMatrix<f64>>,
    },
}

/// Curvature matrices `K(t)` on a uniform grid of `[0, 1]`.
#[derive(Debug, Clone)]
pub struct CurvaturePath {
    m: usize,
    intervals: usize,
    model: CurvatureModel,
}

fn check_symmetric(k: &DMatrix<f64>, what: &str) -> Result<()> {
    if !k.is_square() || k.nrows() == 0 {
        return Err(Error::InvalidCurvature(format!(
            "{what} is not a non-empty square matrix"
        )));
    }
    let defect = (k - k.transpose()).amax();
    if defect > SYMMETRY_TOL {
        return Err(Error::InvalidCurvature(format!(
            "{what} is not symmetric (defect {defect:.3e})"
        )));
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidCurvature(format!("{what} has non-finite entries")));
    }
    Ok(())
}

impl CurvaturePath {
    /// `K(t) ≡ k` sampled on `intervals` grid intervals.
    pub fn constant(k: DMatrix<f64>, intervals: usize) -> Result<Self> {
        check_symmetric(&k, "constant curvature")?;
        Self::checked(k.nrows(), intervals, CurvatureModel::Constant(k))
    }

    /// `K(t) = diag(a₁ + b₁t, …, a_m + b_m t)`.
    pub fn diagonal_affine(offset: Vec<f64>, slope: Vec<f64>, intervals: usize) -> Result<Self> {
        if offset.is_empty() || offset.len() != slope.len() {
            return Err(Error::InvalidCurvature(format!(
                "diagonal-affine preset needs matching non-empty offset/slope, got {} and {}",
                offset.len(),
                slope.len()
            )));
        }
        if offset.iter().chain(&slope).any(|v| !v.is_finite()) {
            return Err(Error::InvalidCurvature("non-finite diagonal coefficient".into()));
        }
        Self::checked(
            offset.len(),
            intervals,
            CurvatureModel::DiagonalAffine { offset, slope },
        )
    }

    /// Grid samples `K(tⱼ)`, `j = 0..=N`, with optional derivative samples;
    /// missing derivatives are second-order finite differences.
    pub fn sampled(k: Vec<DMatrix<f64>>, k_dot: Option<Vec<DMatrix<f64>>>) -> Result<Self> {
        if k.len() < 3 {
            return Err(Error::InvalidCurvature(
                "a sampled path needs at least three samples".into(),
            ));
        }
        let m = k[0].nrows();
        for (j, kj) in k.iter().enumerate() {
            check_symmetric(kj, &format!("K sample {j}"))?;
            if kj.nrows() != m {
                return Err(Error::InvalidCurvature(format!(
                    "K sample {j} has size {}, expected {m}",
                    kj.nrows()
                )));
            }
        }
        let n = k.len() - 1;
        let k_dot = match k_dot {
            Some(d) => {
                if d.len() != k.len() {
                    return Err(Error::InvalidCurvature(format!(
                        "{} derivative samples for {} curvature samples",
                        d.len(),
                        k.len()
                    )));
                }
                for (j, dj) in d.iter().enumerate() {
                    check_symmetric(dj, &format!("K_dot sample {j}"))?;
                    if dj.nrows() != m {
                        return Err(Error::InvalidCurvature(format!("K_dot sample {j} has wrong size")));
                    }
                }
                d
            }
            None => {
                let h = 1.0 / n as f64;
                (0..=n)
                    .map(|j| {
                        if j == 0 {
                            (-3.0 * &k[0] + 4.0 * &k[1] - &k[2]) / (2.0 * h)
                        } else if j == n {
                            (3.0 * &k[n] - 4.0 * &k[n - 1] + &k[n - 2]) / (2.0 * h)
                        } else {
                            (&k[j + 1] - &k[j - 1]) / (2.0 * h)
                        }
                    })
                    .collect()
            }
        };
        Self::checked(m, n, CurvatureModel::Sampled { k, k_dot })
    }

    fn checked(m: usize, intervals: usize, model: CurvatureModel) -> Result<Self> {
        if intervals < 2 {
            return Err(Error::InvalidCurvature(format!(
                "grid needs at least 2 intervals, got {intervals}"
            )));
        }
        Ok(Self { m, intervals, model })
    }

    pub fn half_dim(&self) -> usize {
        self.m
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn preset(&self) -> CurvaturePreset {
        match self.model {
            CurvatureModel::Constant(_) => CurvaturePreset::Constant,
            CurvatureModel::DiagonalAffine { .. } => CurvaturePreset::DiagonalAffine,
            CurvatureModel::Sampled { .. } => CurvaturePreset::Sampled,
        }
    }

    pub fn time(&self, j: usize) -> f64 {
        j as f64 / self.intervals as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.intervals).map(|j| self.time(j)).collect()
    }

    pub fn curvature(&self, t: f64) -> DMatrix<f64> {
        self.derivative(t, 0).expect("value is always available")
    }

    pub fn curvature_rate(&self, t: f64) -> DMatrix<f64> {
        self.derivative(t, 1).expect("first derivative is always available")
    }

    /// `K⁽ᵈ⁾(t)`; presets are exact to every order, sampled paths provide
    /// orders 0 and 1 from their Hermite interpolant.
    pub fn derivative(&self, t: f64, order: usize) -> Option<DMatrix<f64>> {
        let m = self.m;
        match &self.model {
            CurvatureModel::Constant(k) => Some(if order == 0 { k.clone() } else { DMatrix::zeros(m, m) }),
            CurvatureModel::DiagonalAffine { offset, slope } => {
                let diag: Vec<f64> = match order {
                    0 => offset.iter().zip(slope).map(|(a, b)| a + b * t).collect(),
                    1 => slope.clone(),
                    _ => vec![0.0; m],
                };
                Some(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag)))
            }
            CurvatureModel::Sampled { k, k_dot } => {
                if order > 1 {
                    return None;
                }
                let n = self.intervals;
                let h = 1.0 / n as f64;
                let s = (t / h).clamp(0.0, n as f64);
                let j = (s.floor() as usize).min(n - 1);
                let x = s - j as f64;
                let (x2, x3) = (x * x, x * x * x);
                if order == 0 {
                    let h00 = 2.0 * x3 - 3.0 * x2 + 1.0;
                    let h10 = x3 - 2.0 * x2 + x;
                    let h01 = -2.0 * x3 + 3.0 * x2;
                    let h11 = x3 - x2;
                    Some(h00 * &k[j] + (h10 * h) * &k_dot[j] + h01 * &k[j + 1] + (h11 * h) * &k_dot[j + 1])
                } else {
                    let d00 = (6.0 * x2 - 6.0 * x) / h;
                    let d10 = 3.0 * x2 - 4.0 * x + 1.0;
                    let d01 = (-6.0 * x2 + 6.0 * x) / h;
                    let d11 = 3.0 * x2 - 2.0 * x;
                    Some(d00 * &k[j] + d10 * &k_dot[j] + d01 * &k[j + 1] + d11 * &k_dot[j + 1])
                }
            }
        }
    }
}

/// Drift `A(t) = [[0, I], [−K(t), 0]]` of the Jacobi system.
#[derive(Debug, Clone)]
pub struct JacobiDrift {
    path: CurvaturePath,
}

impl CoefficientPath for JacobiDrift {
    fn dim(&self) -> usize {
        2 * self.path.m
    }

    fn value(&self, t: f64) -> DMatrix<f64> {
        self.derivative(t, 0).expect("value is always available")
    }

    fn derivative(&self, t: f64, order: usize) -> Option<DMatrix<f64>> {
        let m = self.path.m;
        let k = self.path.derivative(t, order)?;
        let mut a = DMatrix::zeros(2 * m, 2 * m);
        if order == 0 {
            a.view_mut((0, m), (m, m)).fill_with_identity();
        }
        a.view_mut((m, 0), (m, m)).copy_from(&(-k));
        Some(a)
    }
}

/// Channel index pairs `(i, j)`, `i ≤ j`, zero-based, in lexicographic order.
pub fn channel_pairs(m: usize) -> Vec<(usize, usize)> {
    (0..m).flat_map(|i| (i..m).map(move |j| (i, j))).collect()
}

/// Column labels `u_i_j` (one-based) in channel order.
pub fn channel_labels(m: usize) -> Vec<String> {
    channel_pairs(m)
        .into_iter()
        .map(|(i, j)| format!("u_{}_{}", i + 1, j + 1))
        .collect()
}

/// Symmetric unit matrix for the channel `(i, j)` (zero-based): ones at
/// `(i, j)` and `(j, i)`, so `E(ii)` has a single unit diagonal entry.
pub fn e_matrix(m: usize, i: usize, j: usize) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(m, m);
    e[(i, j)] = 1.0;
    e[(j, i)] = 1.0;
    e
}

/// `𝓔(ij) = [[0, 0], [E(ij), 0]]`.
pub fn curvature_channel(m: usize, i: usize, j: usize) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(2 * m, 2 * m);
    c.view_mut((m, 0), (m, m)).copy_from(&e_matrix(m, i, j));
    c
}

/// The Jacobi control system with one channel per `(i ≤ j)` pair.
pub fn jacobi_system(path: &CurvaturePath) -> Result<BilinearSystem> {
    let m = path.half_dim();
    for t in path.times() {
        check_symmetric(&path.curvature(t), &format!("K({t})"))?;
    }
    let controls = channel_pairs(m)
        .into_iter()
        .map(|(i, j)| curvature_channel(m, i, j))
        .collect();
    BilinearSystem::new(1.0, Arc::new(JacobiDrift { path: path.clone() }), controls)
}

/// Linearized Poincaré map `W(1)` from `W(0) = I` under the perturbation `u`.
pub fn linearized_poincare(path: &CurvaturePath, u: &ControlSignal, steps: usize) -> Result<SymplecticMatrix> {
    let sys = jacobi_system(path)?;
    let traj = propagate_with(
        &sys,
        &SymplecticMatrix::identity(path.half_dim()),
        u,
        &PropagateOptions::with_steps(steps),
    )?;
    Ok(traj.endpoint().clone())
}

/// Result of the distinct-eigenvalue search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrerasReport {
    pub best_time: f64,
    /// Ascending eigenvalues of `K(best_time)`.
    pub eigenvalues: Vec<f64>,
    /// Smallest pairwise eigenvalue gap at `best_time`; `None` when `m = 1`.
    pub min_gap: Option<f64>,
    pub pass: bool,
}

fn sorted_eigenvalues(k: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(k.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

fn min_gap(ev: &[f64]) -> f64 {
    ev.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

/// Scans the grid times of `mask`'s effective support for the largest
/// minimal eigenvalue gap of `K(t)`.
pub fn contreras_check(path: &CurvaturePath, mask: &SupportMask, gap_tol: f64) -> Result<ContrerasReport> {
    let times: Vec<f64> = path.times().into_iter().filter(|&t| !mask.excludes(t)).collect();
    if times.is_empty() {
        return Err(Error::InvalidArgument(
            "the perturbation window contains no grid times".into(),
        ));
    }
    if path.half_dim() == 1 {
        let t = times[0];
        return Ok(ContrerasReport {
            best_time: t,
            eigenvalues: sorted_eigenvalues(&path.curvature(t)),
            min_gap: None,
            pass: true,
        });
    }
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    for t in times {
        let ev = sorted_eigenvalues(&path.curvature(t));
        let gap = min_gap(&ev);
        if best.as_ref().is_none_or(|(_, _, g)| gap > *g) {
            best = Some((t, ev, gap));
        }
    }
    let (best_time, eigenvalues, gap) = best.expect("non-empty scan");
    Ok(ContrerasReport {
        best_time,
        eigenvalues,
        min_gap: Some(gap.max(0.0)),
        pass: gap > gap_tol,
    })
}

/// Perturbation window `(1 − τ + δ, 1 − δ)`.
pub fn perturbation_window(tau: f64, delta: f64) -> Result<Interval> {
    if !(delta > 0.0 && delta < tau && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "window parameters need 0 < delta < tau <= 1, got tau = {tau}, delta = {delta}"
        )));
    }
    let w = Interval::new(1.0 - tau + delta, 1.0 - delta);
    if w.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "window ({}, {}) is empty; need 2·delta < tau",
            w.start, w.end
        )));
    }
    Ok(w)
}

/// Options shared by synthesis and sweeps.
#[derive(Debug, Clone)]
pub struct SynthesisOptions {
    pub tau: f64,
    pub delta: f64,
    pub avoided: Vec<Avoidance>,
    pub steps: usize,
    pub gap_tol: f64,
    pub basis: BasisOptions,
    pub steer: SteerOptions,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            tau: 1.0,
            delta: 0.05,
            avoided: Vec::new(),
            steps: DEFAULT_STEPS,
            gap_tol: DEFAULT_GAP_TOL,
            basis: BasisOptions::default(),
            steer: SteerOptions::default(),
        }
    }
}

/// A windowed curvature perturbation realizing a target Poincaré map.
#[derive(Debug, Clone)]
pub struct PerturbationPlan {
    pub window: Interval,
    pub avoided: Vec<Avoidance>,
    /// `u_ij(t)` in [`channel_pairs`] order.
    pub u: ControlSignal,
    pub lambda: Vec<f64>,
    pub target: SymplecticMatrix,
    pub achieved: SymplecticMatrix,
    pub residual: f64,
    pub iterations: usize,
    /// Discrete derivative sup-norms, orders `0..=4`.
    pub norms: Vec<f64>,
}

/// The Jacobi system, its unperturbed Poincaré map and a steering basis for
/// one window; reusable across many targets.
#[derive(Debug, Clone)]
pub struct PerturbationSetup {
    pub path: CurvaturePath,
    pub system: BilinearSystem,
    pub mask: SupportMask,
    pub basis: ControlBasis,
    pub contreras: ContrerasReport,
    pub steer: SteerOptions,
}

impl PerturbationSetup {
    pub fn new(path: &CurvaturePath, opts: &SynthesisOptions) -> Result<Self> {
        let window = perturbation_window(opts.tau, opts.delta)?;
        let mask = SupportMask::new(window, opts.avoided.clone());
        let n = opts.steps;
        let live = (0..=n).any(|j| mask.weight(j as f64 / n as f64) > 0.0);
        if !live {
            return Err(Error::AvoidanceInfeasible(
                "avoided neighbourhoods cover the whole perturbation window".into(),
            ));
        }
        let contreras = contreras_check(path, &mask, opts.gap_tol)?;
        if !contreras.pass {
            return Err(Error::ContrerasFailed {
                gap: contreras.min_gap.unwrap_or(0.0),
                time: contreras.best_time,
            });
        }
        let system = jacobi_system(path)?;
        let x0 = SymplecticMatrix::identity(path.half_dim());
        let reference = ControlSignal::zeros(system.channels(), n, 1.0);
        let popts = PropagateOptions {
            steps: n,
            with_fundamental: true,
            ..opts.basis.propagate.clone()
        };
        let base = propagate_with(&system, &x0, &reference, &popts)?;
        let basis = build_basis(&system, &x0, &reference, &base, &mask, &opts.basis).map_err(|e| match e {
            Error::BasisDegenerate(msg) if !opts.avoided.is_empty() => Error::AvoidanceInfeasible(msg),
            other => other,
        })?;
        Ok(Self {
            path: path.clone(),
            system,
            mask,
            basis,
            contreras,
            steer: opts.steer.clone(),
        })
    }

    /// `S(g₀)`, the unperturbed linearized Poincaré map.
    pub fn unperturbed(&self) -> &SymplecticMatrix {
        &self.basis.base_endpoint
    }

    pub fn solve(&self, target: &SymplecticMatrix) -> Result<PerturbationPlan> {
        let sol = newton_steer(&self.system, &self.basis, target, &self.steer)?;
        Ok(PerturbationPlan {
            window: self.mask.window,
            avoided: self.mask.avoided.clone(),
            u: sol.control,
            lambda: sol.lambda,
            target: target.clone(),
            achieved: sol.achieved,
            residual: sol.residual,
            iterations: sol.iterations,
            norms: sol.norms,
        })
    }
}

/// Builds the perturbation problem for `path` and steers to `target`.
pub fn synthesize(
    path: &CurvaturePath,
    target: &SymplecticMatrix,
    opts: &SynthesisOptions,
) -> Result<PerturbationPlan> {
    PerturbationSetup::new(path, opts)?.solve(target)
}

/// Largest half-width `ρ ≤ upper` of an avoided neighbourhood centred at
/// `center` for which the basis keeps full rank, by bisection.
pub fn max_avoidance_half_width(
    path: &CurvaturePath,
    center: f64,
    opts: &SynthesisOptions,
    upper: f64,
    iterations: usize,
) -> Result<f64> {
    let feasible = |rho: f64| -> Result<bool> {
        let mut o = opts.clone();
        o.avoided.push(Avoidance::new(center, rho));
        match PerturbationSetup::new(path, &o) {
            Ok(_) => Ok(true),
            Err(Error::AvoidanceInfeasible(_))
            | Err(Error::BasisDegenerate(_))
            | Err(Error::ContrerasFailed { .. }) => Ok(false),
            Err(e) => Err(e),
        }
    };
    if feasible(upper)? {
        return Ok(upper);
    }
    let (mut lo, mut hi) = (0.0, upper);
    for _ in 0..iterations {
        let mid = 0.5 * (lo + hi);
        if feasible(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// One `(radius, sample)` cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub radius: f64,
    pub sample: usize,
    pub solved: bool,
    pub norm_c0: f64,
    pub norm_c2: f64,
    /// `norm_c2 / radius`.
    pub ratio: f64,
    pub residual: f64,
    pub iterations: usize,
}

/// Per-radius summary of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusSummary {
    pub radius: f64,
    pub solved: usize,
    pub samples: usize,
    pub max_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub radii: Vec<RadiusSummary>,
    /// Least-squares slope of `ln ‖u‖_{C²}` against `ln r` over solved rows.
    pub slope: f64,
    /// `1 / max ratio` over solved rows: the empirical admissible constant.
    pub k_est: f64,
    /// Largest radius (in ascending order, without a gap) at which every
    /// sample was solved.
    pub radius_bound: Option<f64>,
}

/// Sweep settings.
#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub radii: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    /// Worker count; `None` uses the global rayon pool.
    pub threads: Option<usize>,
}

/// Unit-Frobenius random tangent direction at `base` for sample index `s`.
pub fn random_tangent_direction(base: &SymplecticMatrix, seed: u64, sample: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample as u64);
    let basis = tangent_basis(base);
    let n = base.entries().nrows();
    let mut y = DMatrix::zeros(n, n);
    for t in &basis {
        let c: f64 = StandardNormal.sample(&mut rng);
        y += c * t.entries();
    }
    let norm = y.norm();
    y / norm
}

/// `reproject(S(g₀) + r·Δ)`.
pub fn sweep_target(setup: &PerturbationSetup, radius: f64, seed: u64, sample: usize) -> Result<SymplecticMatrix> {
    let base = setup.unperturbed();
    let dir = random_tangent_direction(base, seed, sample);
    reproject(&(base.entries() + radius * dir), setup.steer.tol_symp)
}

fn fit_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 2 {
        return f64::NAN;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        f64::NAN
    } else {
        sxy / sxx
    }
}

/// Samples targets at each radius, steers to each and tabulates the control
/// norms. Sample `s` uses the same direction at every radius. Rows come back
/// in `(radius, sample)` order regardless of the worker count.
pub fn estimate_franks_constant(setup: &PerturbationSetup, opts: &SweepOptions) -> Result<SweepTable> {
    if opts.radii.is_empty() || opts.radii.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::InvalidArgument("radii must be positive".into()));
    }
    if opts.radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("radii must be strictly ascending".into()));
    }
    let cells: Vec<(f64, usize)> = opts
        .radii
        .iter()
        .flat_map(|&r| (0..opts.samples).map(move |s| (r, s)))
        .collect();
    let run = |&(radius, sample): &(f64, usize)| -> SweepRow {
        let solved = sweep_target(setup, radius, opts.seed, sample).and_then(|target| setup.solve(&target));
        match solved {
            Ok(plan) => {
                let sol_norm_c2 = plan_norm(&plan, 2);
                SweepRow {
                    radius,
                    sample,
                    solved: true,
                    norm_c0: plan.norms[0],
                    norm_c2: sol_norm_c2,
                    ratio: sol_norm_c2 / radius,
                    residual: plan.residual,
                    iterations: plan.iterations,
                }
            }
            Err(_) => SweepRow {
                radius,
                sample,
                solved: false,
                norm_c0: f64::NAN,
                norm_c2: f64::NAN,
                ratio: f64::NAN,
                residual: f64::NAN,
                iterations: 0,
            },
        }
    };
    let rows: Vec<SweepRow> = match opts.threads {
        Some(threads) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads.max(1))
                .build()
                .map_err(|e| Error::InvalidArgument(format!("cannot build worker pool: {e}")))?;
            pool.install(|| cells.par_iter().map(run).collect())
        }
        None => cells.par_iter().map(run).collect(),
    };

    let radii: Vec<RadiusSummary> = opts
        .radii
        .iter()
        .map(|&r| {
            let of_r: Vec<&SweepRow> = rows.iter().filter(|row| row.radius == r).collect();
            RadiusSummary {
                radius: r,
                solved: of_r.iter().filter(|row| row.solved).count(),
                samples: of_r.len(),
                max_ratio: of_r
                    .iter()
                    .filter(|row| row.solved)
                    .map(|row| row.ratio)
                    .fold(0.0, f64::max),
            }
        })
        .collect();
    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter(|row| row.solved && row.norm_c2 > 0.0)
        .map(|row| (row.radius.ln(), row.norm_c2.ln()))
        .collect();
    let max_ratio = radii.iter().map(|r| r.max_ratio).fold(0.0, f64::max);
    let radius_bound = radii
        .iter()
        .take_while(|r| r.solved == r.samples)
        .last()
        .map(|r| r.radius);
    Ok(SweepTable {
        slope: fit_slope(&points),
        k_est: if max_ratio > 0.0 { 1.0 / max_ratio } else { f64::NAN },
        rows,
        radii,
        radius_bound,
    })
}

/// Convenience wrapper: build the setup and run the sweep.
pub fn sweep(path: &CurvaturePath, synth: &SynthesisOptions, opts: &SweepOptions) -> Result<SweepTable> {
    let setup = PerturbationSetup::new(path, synth)?;
    estimate_franks_constant(&setup, opts)
}

/// `‖u‖_{C^k}` proxy of the metric perturbation in a plan.
pub fn plan_norm(plan: &PerturbationPlan, k: usize) -> f64 {
    if k < plan.norms.len() {
        plan.norms[..=k].iter().copied().fold(0.0, f64::max)
    } else {
        control_norm(&plan.u, k)
    }
}
