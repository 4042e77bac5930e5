//! Local steering of the end-point map.
//!
//! A finite family of smooth, windowed controls `u¹…uᵖ` (`p = m(2m+1)`) is
//! built from the trace pairing `uᵃᵢ(t) = χ(t)·Tr(Yₐᵀ S(T)S(t)⁻¹BᵢX̄(t))`
//! against a basis `Yₐ` of the tangent space at `X̄(T)`. When their images
//! under the end-point differential span the tangent space, the reduced map
//! `F(λ) = E(ū + Σ λₐuᵃ)` is a local diffeomorphism and damped Newton solves
//! `F(λ) = X` for nearby targets with `‖u‖ = O(‖X − X̄(T)‖)`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bilinear::{
    propagate_with, BilinearSystem, ControlSignal, EndpointKernel, Interval, PropagateOptions, Support, Trajectory,
};
use crate::controllability::DEFAULT_TOL_RANK;
use crate::linalg::{relative_rank, singular_values_desc, vectorize};
use crate::symplectic::{
    group_dimension, symplectic_defect, tangent_basis, tangent_coordinates, SymplecticMatrix, DEFAULT_TOL_SYMP,
};
use crate::{Error, Result};

pub const DEFAULT_TOL_STEER: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 25;
pub const MAX_HALVINGS: usize = 8;
/// Largest accepted Gramian condition number.
pub const MAX_GRAMIAN_CONDITION: f64 = 1e12;
/// Highest derivative order recorded in [`SteeringSolution::norms`].
pub const NORM_ORDERS: usize = 4;

/// Fraction of the window length used by each smoothstep ramp.
const RAMP_FRACTION: f64 = 0.1;

/// Degree-5 smoothstep `6x⁵ − 15x⁴ + 10x³`, clamped to `[0, 1]`; `C²` at the
/// seams.
pub fn smoothstep5(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        (x * x * x * (x * (6.0 * x - 15.0) + 10.0)).min(1.0)
    }
}

/// A time neighbourhood `(center − half_width, center + half_width)` where
/// controls must vanish.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Avoidance {
    pub center: f64,
    pub half_width: f64,
}

impl Avoidance {
    pub fn new(center: f64, half_width: f64) -> Self {
        Self { center, half_width }
    }

    /// Zero on the closed neighbourhood, one beyond twice the half-width,
    /// smoothstep in between.
    pub fn cutoff(&self, t: f64) -> f64 {
        if self.contains(t) {
            return 0.0;
        }
        if self.half_width <= 0.0 {
            return 1.0;
        }
        let d = (t - self.center).abs();
        smoothstep5((d - self.half_width) / self.half_width)
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.center - self.half_width && t <= self.center + self.half_width
    }
}

/// Smooth weight `χ` equal to one on the middle 80% of a window, vanishing
/// outside it and on every avoided neighbourhood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportMask {
    pub window: Interval,
    pub avoided: Vec<Avoidance>,
}

impl SupportMask {
    pub fn new(window: Interval, avoided: Vec<Avoidance>) -> Self {
        Self { window, avoided }
    }

    pub fn window(window: Interval) -> Self {
        Self::new(window, Vec::new())
    }

    pub fn weight(&self, t: f64) -> f64 {
        let Interval { start, end } = self.window;
        if !(t > start && t < end) {
            return 0.0;
        }
        let ramp = RAMP_FRACTION * (end - start);
        let mut w = smoothstep5((t - start) / ramp) * smoothstep5((end - t) / ramp);
        for a in &self.avoided {
            w *= a.cutoff(t);
        }
        w
    }

    /// The window minus the closed avoided neighbourhoods.
    pub fn support(&self) -> Support {
        let mut pieces = vec![self.window];
        for a in &self.avoided {
            let lo = a.center - a.half_width;
            let hi = a.center + a.half_width;
            pieces = pieces
                .into_iter()
                .flat_map(|iv| {
                    if hi <= iv.start || lo >= iv.end {
                        vec![iv]
                    } else {
                        [Interval::new(iv.start, lo), Interval::new(hi, iv.end)]
                            .into_iter()
                            .filter(|p| !p.is_empty())
                            .collect()
                    }
                })
                .collect();
        }
        Support::Within(pieces)
    }

    /// Whether `t` is a point where every masked control is exactly zero.
    pub fn excludes(&self, t: f64) -> bool {
        !self.window.contains(t) || self.avoided.iter().any(|a| a.contains(t))
    }
}

/// Trace-pairing controls whose end-point images span the tangent space.
#[derive(Debug, Clone)]
pub struct ControlBasis {
    pub x0: SymplecticMatrix,
    pub reference: ControlSignal,
    /// `X̄(T)` along the reference control.
    pub base_endpoint: SymplecticMatrix,
    pub mask: SupportMask,
    pub controls: Vec<ControlSignal>,
    /// `D E(uᵃ)` at the reference control.
    pub images: Vec<DMatrix<f64>>,
    /// Singular values (descending) of the Gramian of the images in tangent
    /// coordinates.
    pub gramian_singular_values: Vec<f64>,
    /// Estimated radius of the Newton attraction basin around `X̄(T)`.
    pub radius_estimate: f64,
}

impl ControlBasis {
    pub fn size(&self) -> usize {
        self.controls.len()
    }

    /// Smallest over largest Gramian singular value.
    pub fn conditioning(&self) -> f64 {
        let s = &self.gramian_singular_values;
        match (s.first(), s.last()) {
            (Some(&hi), Some(&lo)) if hi > 0.0 => lo / hi,
            _ => 0.0,
        }
    }

    /// `ū + Σ λₐ uᵃ`.
    pub fn control_for(&self, lambda: &[f64]) -> Result<ControlSignal> {
        ControlSignal::combine(&self.reference, lambda, &self.controls)
    }

    fn steps(&self) -> usize {
        self.reference.intervals()
    }
}

/// Options for [`build_basis`].
#[derive(Debug, Clone)]
pub struct BasisOptions {
    pub tol_rank: f64,
    pub max_condition: f64,
    pub propagate: PropagateOptions,
}

impl Default for BasisOptions {
    fn default() -> Self {
        Self {
            tol_rank: DEFAULT_TOL_RANK,
            max_condition: MAX_GRAMIAN_CONDITION,
            propagate: PropagateOptions::default(),
        }
    }
}

fn propagate_opts(base: &PropagateOptions, steps: usize) -> PropagateOptions {
    PropagateOptions {
        steps,
        with_fundamental: true,
        span: None,
        ..base.clone()
    }
}

fn jacobian_columns(kernel: &EndpointKernel, controls: &[ControlSignal]) -> Result<Vec<DMatrix<f64>>> {
    controls.iter().map(|u| kernel.apply(u)).collect()
}

/// Jacobian of `λ ↦ vec E(ū + Σλₐuᵃ)` at the control that produced `traj`.
pub fn reduced_jacobian(sys: &BilinearSystem, basis: &ControlBasis, traj: &Trajectory) -> Result<DMatrix<f64>> {
    let kernel = EndpointKernel::new(sys, traj)?;
    let cols: Vec<DVector<f64>> = jacobian_columns(&kernel, &basis.controls)?
        .iter()
        .map(vectorize)
        .collect();
    Ok(DMatrix::from_columns(&cols))
}

/// Builds the trace-pairing basis along `base`, the trajectory of `reference`
/// from `x0`.
pub fn build_basis(
    sys: &BilinearSystem,
    x0: &SymplecticMatrix,
    reference: &ControlSignal,
    base: &Trajectory,
    mask: &SupportMask,
    opts: &BasisOptions,
) -> Result<ControlBasis> {
    let kernel = EndpointKernel::new(sys, base)?;
    if kernel.intervals() != reference.intervals() {
        return Err(Error::Grid(format!(
            "reference control has {} intervals, trajectory has {}",
            reference.intervals(),
            kernel.intervals()
        )));
    }
    let endpoint = base.endpoint().clone();
    let n = reference.intervals();
    let k = sys.channels();
    let support = mask.support();
    let weights: Vec<f64> = (0..=n).map(|j| mask.weight(reference.time(j))).collect();

    let controls = tangent_basis(&endpoint)
        .iter()
        .map(|y| {
            let mut values = DMatrix::zeros(n + 1, k);
            for (j, w) in weights.iter().enumerate() {
                if *w == 0.0 {
                    continue;
                }
                for i in 0..k {
                    values[(j, i)] = w * y.entries().dot(kernel.term(j, i));
                }
            }
            ControlSignal::new(reference.horizon(), values, support.clone())
        })
        .collect::<Result<Vec<_>>>()?;

    let images = jacobian_columns(&kernel, &controls)?;
    let p = group_dimension(sys.half_dim());
    let coords: Vec<DVector<f64>> = images
        .iter()
        .map(|im| tangent_coordinates(endpoint.entries(), im))
        .collect();
    let coord_matrix = DMatrix::from_columns(&coords);
    let rank = relative_rank(&singular_values_desc(&coord_matrix), opts.tol_rank);
    if rank < p {
        return Err(Error::BasisDegenerate(format!(
            "basis images span {rank} of {p} tangent directions"
        )));
    }
    let gramian = coord_matrix.transpose() * &coord_matrix;
    let gramian_singular_values = singular_values_desc(&gramian);
    let (hi, lo) = (gramian_singular_values[0], gramian_singular_values[p - 1]);
    if !(lo > 0.0) || hi / lo > opts.max_condition {
        return Err(Error::BasisDegenerate(format!(
            "Gramian condition number {:.3e} exceeds {:.1e}",
            hi / lo,
            opts.max_condition
        )));
    }

    let mut basis = ControlBasis {
        x0: x0.clone(),
        reference: reference.clone(),
        base_endpoint: endpoint,
        mask: mask.clone(),
        controls,
        images,
        gramian_singular_values,
        radius_estimate: f64::INFINITY,
    };
    basis.radius_estimate = estimate_radius(sys, &basis, &opts.propagate)?;
    Ok(basis)
}

/// `0.1·σ_min(G) / L`, with `L` a one-probe Lipschitz estimate of the reduced
/// Jacobian.
fn estimate_radius(sys: &BilinearSystem, basis: &ControlBasis, popts: &PropagateOptions) -> Result<f64> {
    let p = basis.size();
    let unit = vec![1.0 / (p as f64).sqrt(); p];
    let zero_ref = ControlSignal::zeros(basis.reference.channels(), basis.steps(), basis.reference.horizon());
    let scale = ControlSignal::combine(&zero_ref, &unit, &basis.controls)?.sup_norm();
    if scale == 0.0 {
        return Ok(f64::INFINITY);
    }
    let delta = 1e-3 / scale;
    let lambda: Vec<f64> = unit.iter().map(|v| v * delta).collect();
    let opts = propagate_opts(popts, basis.steps());
    let j0 = DMatrix::from_columns(&basis.images.iter().map(vectorize).collect::<Vec<_>>());
    let probe = propagate_with(sys, &basis.x0, &basis.control_for(&lambda)?, &opts)?;
    let j1 = reduced_jacobian(sys, basis, &probe)?;
    let lipschitz = (j1 - j0).norm() / delta;
    let smallest = *basis.gramian_singular_values.last().expect("non-empty");
    Ok(if lipschitz > 0.0 {
        0.1 * smallest / lipschitz
    } else {
        f64::INFINITY
    })
}

/// Options for [`newton_steer`].
#[derive(Debug, Clone)]
pub struct SteerOptions {
    pub tol_steer: f64,
    pub max_iter: usize,
    pub tol_symp: f64,
    pub propagate: PropagateOptions,
}

impl Default for SteerOptions {
    fn default() -> Self {
        Self {
            tol_steer: DEFAULT_TOL_STEER,
            max_iter: DEFAULT_MAX_ITER,
            tol_symp: DEFAULT_TOL_SYMP,
            propagate: PropagateOptions::default(),
        }
    }
}

/// A control reaching the requested target.
#[derive(Debug, Clone)]
pub struct SteeringSolution {
    pub lambda: Vec<f64>,
    pub control: ControlSignal,
    pub achieved: SymplecticMatrix,
    /// `‖achieved − target‖_F`.
    pub residual: f64,
    pub iterations: usize,
    /// Discrete derivative sup-norms of the control, orders `0..=4`.
    pub norms: Vec<f64>,
}

/// Sup-norms of the discrete derivatives `Δᵈu / hᵈ`, `d = 0..=max_order`,
/// over all grid indices and channels.
pub fn derivative_norms(u: &ControlSignal, max_order: usize) -> Vec<f64> {
    let h = u.step();
    let mut diffs: Vec<Vec<f64>> = (0..u.channels())
        .map(|i| u.values().column(i).iter().copied().collect())
        .collect();
    (0..=max_order)
        .map(|d| {
            if d > 0 {
                for c in diffs.iter_mut() {
                    *c = c.windows(2).map(|w| w[1] - w[0]).collect();
                }
            }
            let sup = diffs.iter().flatten().fold(0.0_f64, |acc, v| acc.max(v.abs()));
            sup / h.powi(d as i32)
        })
        .collect()
}

/// `max_{d ≤ k} ‖u⁽ᵈ⁾‖_∞` with discrete derivatives on the control grid.
pub fn control_norm(u: &ControlSignal, k: usize) -> f64 {
    derivative_norms(u, k).into_iter().fold(0.0, f64::max)
}

/// [`control_norm`] of a solution's control.
pub fn norm_certificate(sol: &SteeringSolution, k: usize) -> f64 {
    if k < sol.norms.len() {
        sol.norms[..=k].iter().copied().fold(0.0, f64::max)
    } else {
        control_norm(&sol.control, k)
    }
}

struct Iterate {
    lambda: Vec<f64>,
    control: ControlSignal,
    traj: Trajectory,
    residual: DVector<f64>,
    norm: f64,
}

fn evaluate(
    sys: &BilinearSystem,
    basis: &ControlBasis,
    target: &DMatrix<f64>,
    lambda: Vec<f64>,
    opts: &PropagateOptions,
) -> Result<Iterate> {
    let control = basis.control_for(&lambda)?;
    let traj = propagate_with(sys, &basis.x0, &control, opts)?;
    let residual = vectorize(&(traj.endpoint().entries() - target));
    let norm = residual.norm();
    Ok(Iterate {
        lambda,
        control,
        traj,
        residual,
        norm,
    })
}

/// Damped Gauss–Newton on `F(λ) = target` with backtracking halvings.
pub fn newton_steer(
    sys: &BilinearSystem,
    basis: &ControlBasis,
    target: &SymplecticMatrix,
    opts: &SteerOptions,
) -> Result<SteeringSolution> {
    if target.half_dim() != sys.half_dim() {
        return Err(Error::Dimension(format!(
            "target half-dimension {} does not match system {}",
            target.half_dim(),
            sys.half_dim()
        )));
    }
    let defect = symplectic_defect(target.entries())?;
    if defect > opts.tol_symp {
        return Err(Error::InvalidTarget { defect });
    }
    let distance = (target.entries() - basis.base_endpoint.entries()).norm();
    if distance > basis.radius_estimate {
        warn!(
            "target distance {distance:.3e} exceeds the estimated attraction radius {:.3e}",
            basis.radius_estimate
        );
    }

    let popts = propagate_opts(&opts.propagate, basis.steps());
    let p = basis.size();
    let mut cur = evaluate(sys, basis, target.entries(), vec![0.0; p], &popts)?;
    let mut iterations = 0;
    while cur.norm > opts.tol_steer {
        if iterations == opts.max_iter {
            return Err(Error::NoConvergence {
                iterations,
                best_residual: cur.norm,
            });
        }
        iterations += 1;
        let jac = reduced_jacobian(sys, basis, &cur.traj)?;
        let step = jac
            .svd(true, true)
            .solve(&(-&cur.residual), 0.0)
            .map_err(|e| Error::Degenerate(format!("least-squares step failed: {e}")))?;
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let lambda: Vec<f64> = cur.lambda.iter().zip(step.iter()).map(|(l, s)| l + alpha * s).collect();
            let trial = evaluate(sys, basis, target.entries(), lambda, &popts)?;
            if trial.norm < cur.norm {
                accepted = Some(trial);
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some(next) => cur = next,
            None => {
                return Err(Error::NoConvergence {
                    iterations,
                    best_residual: cur.norm,
                })
            }
        }
    }
    let norms = derivative_norms(&cur.control, NORM_ORDERS);
    let achieved = cur.traj.states.pop().expect("non-empty trajectory");
    Ok(SteeringSolution {
        lambda: cur.lambda,
        control: cur.control,
        achieved,
        residual: cur.norm,
        iterations,
        norms,
    })
}
