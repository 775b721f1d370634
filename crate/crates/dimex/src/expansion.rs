//! The dimension-expansion learner: minimizes the penalized variogram misfit
//! over latent coordinates Z and variogram parameters jointly, alternating a
//! variogram refit with a projected-gradient step on Z.
//!
//! The sparsity penalty is a group lasso over the columns (dimensions) of Z.
//! The solver works in constraint form with a group-norm budget M and maps the
//! penalty weight lambda1 onto M by a 1-D search on the solution's Lagrange
//! multiplier.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geo::{distances_of_matrix, DistanceMatrix, Locations};
use crate::optim::nelder_mead;
use crate::variogram::{
    default_init, fit_variogram, pair_sse, DispersionMatrix, VariogramParams,
};

/// Which per-column norm the penalty uses. The group (Euclidean) norm is the
/// one the projection algorithm is built around; the l1-per-column mode exists
/// for comparison only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PenaltyNorm {
    GroupL2,
    L1Columns,
}

fn column_norm(col: nalgebra::DVectorView<f64>, norm: PenaltyNorm) -> f64 {
    match norm {
        PenaltyNorm::GroupL2 => col.norm(),
        PenaltyNorm::L1Columns => col.iter().map(|v| v.abs()).sum(),
    }
}

/// Sum of per-column norms of Z.
pub fn penalty_value(z: &DMatrix<f64>, norm: PenaltyNorm) -> f64 {
    (0..z.ncols()).map(|k| column_norm(z.column(k), norm)).sum()
}

/// Solver configuration.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ExpansionConfig {
    pub p_max: usize,
    pub lambda1: f64,
    pub max_iters: usize,
    pub step_size: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub penalty: PenaltyNorm,
}

impl ExpansionConfig {
    pub fn new(p_max: usize, lambda1: f64) -> Self {
        ExpansionConfig {
            p_max,
            lambda1,
            max_iters: 400,
            step_size: 1.0,
            tolerance: 1e-9,
            seed: 0,
            penalty: PenaltyNorm::GroupL2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p_max < 1 {
            return Err(Error::validation("p_max must be at least 1"));
        }
        if self.lambda1 < 0.0 || !self.lambda1.is_finite() {
            return Err(Error::validation("lambda1 must be nonnegative"));
        }
        if self.step_size <= 0.0 {
            return Err(Error::validation("step size must be positive"));
        }
        if self.max_iters < 1 {
            return Err(Error::validation("max_iters must be at least 1"));
        }
        Ok(())
    }
}

/// Learned expansion: latent coordinates, fitted variogram, diagnostics.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ExpansionSolution {
    pub phi: VariogramParams,
    pub lambda1: f64,
    /// Group-norm budget equivalent to lambda1 (constraint form).
    pub m: f64,
    pub active_dims: Vec<usize>,
    pub group_norms: Vec<f64>,
    /// Latent matrix, row-major, s rows of p_max entries.
    pub z: Vec<f64>,
    pub n_sites: usize,
    pub p_max: usize,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

impl ExpansionSolution {
    pub fn z_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_sites, self.p_max, &self.z)
    }

    pub fn n_active_dims(&self) -> usize {
        self.active_dims.len()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s + "\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&s)?)
    }
}

fn expanded_distances(x: &Locations, z: &DMatrix<f64>) -> DistanceMatrix {
    let s = x.n_sites();
    let d = x.n_dims();
    let p = z.ncols();
    let full = DMatrix::from_fn(s, d + p, |i, j| {
        if j < d {
            x.coords()[(i, j)]
        } else {
            z[(i, j - d)]
        }
    });
    distances_of_matrix(&full)
}

fn check_shapes(z: &DMatrix<f64>, x: &Locations, disp: &DispersionMatrix) -> Result<()> {
    if z.nrows() != x.n_sites() || disp.n_sites() != x.n_sites() {
        return Err(Error::validation(format!(
            "shape mismatch: {} sites, Z has {} rows, dispersions {}",
            x.n_sites(),
            z.nrows(),
            disp.n_sites()
        )));
    }
    Ok(())
}

/// Unpenalized misfit: sum over i<j of (v*_{ij} - gamma(d_{ij}([X,Z])))^2.
pub fn misfit(
    phi: &VariogramParams,
    z: &DMatrix<f64>,
    x: &Locations,
    disp: &DispersionMatrix,
) -> Result<f64> {
    check_shapes(z, x, disp)?;
    let dist = expanded_distances(x, z);
    Ok(pair_sse(phi, disp, &dist))
}

/// Penalized objective: misfit + lambda1 * sum of column norms of Z.
pub fn objective(
    phi: &VariogramParams,
    z: &DMatrix<f64>,
    x: &Locations,
    disp: &DispersionMatrix,
    lambda1: f64,
    norm: PenaltyNorm,
) -> Result<f64> {
    Ok(misfit(phi, z, x, disp)? + lambda1 * penalty_value(z, norm))
}

/// Gradient of the smooth misfit with respect to Z, plus a count of
/// coincident expanded points (whose pair terms use subgradient 0).
pub fn misfit_gradient_z(
    phi: &VariogramParams,
    z: &DMatrix<f64>,
    x: &Locations,
    disp: &DispersionMatrix,
) -> Result<(DMatrix<f64>, usize)> {
    check_shapes(z, x, disp)?;
    let s = x.n_sites();
    let p = z.ncols();
    let dist = expanded_distances(x, z);
    let mut grad = DMatrix::zeros(s, p);
    let mut coincident = 0usize;
    for i in 0..s {
        for j in (i + 1)..s {
            let d = dist.get(i, j);
            if d == 0.0 {
                coincident += 1;
                continue;
            }
            let g = phi.phi1 * (1.0 - (-d / phi.phi2).exp()) + phi.phi3;
            let gp = phi.phi1 / phi.phi2 * (-d / phi.phi2).exp();
            let w = 2.0 * (g - disp.get(i, j)) * gp / d;
            for k in 0..p {
                let diff = z[(i, k)] - z[(j, k)];
                grad[(i, k)] += w * diff;
                grad[(j, k)] -= w * diff;
            }
        }
    }
    Ok((grad, coincident))
}

/// Project columns of `u` onto the set { sum_j ||u_j|| <= m }. Feasible input
/// passes through unchanged; otherwise the iterative target-norm recurrence
/// shrinks the active set until all targets are positive, then rescales each
/// surviving column radially. Zero columns always stay zero.
pub fn group_project(u: &DMatrix<f64>, m: f64) -> DMatrix<f64> {
    group_project_with(u, m, PenaltyNorm::GroupL2)
}

pub(crate) fn group_project_with(u: &DMatrix<f64>, m: f64, norm: PenaltyNorm) -> DMatrix<f64> {
    let m = m.max(0.0);
    let p = u.ncols();
    let norms: Vec<f64> = (0..p).map(|k| column_norm(u.column(k), norm)).collect();
    let total: f64 = norms.iter().sum();
    if total <= m {
        return u.clone();
    }
    if m == 0.0 {
        return DMatrix::zeros(u.nrows(), p);
    }
    // active set: nonzero columns whose target norm stays positive
    let mut eta: Vec<usize> = (0..p).filter(|&k| norms[k] > 0.0).collect();
    let mut targets = vec![0.0; p];
    loop {
        let active_sum: f64 = eta.iter().map(|&k| norms[k]).sum();
        let correction = (m - active_sum) / eta.len() as f64;
        for t in targets.iter_mut() {
            *t = 0.0;
        }
        for &k in &eta {
            targets[k] = norms[k] + correction;
        }
        let next: Vec<usize> = eta.iter().cloned().filter(|&k| targets[k] > 0.0).collect();
        if next.len() == eta.len() {
            break;
        }
        if next.is_empty() {
            return DMatrix::zeros(u.nrows(), p);
        }
        eta = next;
    }
    let mut out = DMatrix::zeros(u.nrows(), p);
    for &k in &eta {
        let scale = targets[k] / norms[k];
        for i in 0..u.nrows() {
            out[(i, k)] = u[(i, k)] * scale;
        }
    }
    // guard against the rescaled sum overshooting m by rounding
    loop {
        let total: f64 = (0..p).map(|k| column_norm(out.column(k), norm)).sum();
        if total <= m {
            break;
        }
        out *= m / total;
    }
    out
}

/// Fit-quality summary for a (phi, Z) pair.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FitQuality {
    pub sse: f64,
    pub rmse_over_pairs: f64,
    pub n_active_dims: usize,
}

pub fn fit_quality(
    phi: &VariogramParams,
    z: &DMatrix<f64>,
    x: &Locations,
    disp: &DispersionMatrix,
) -> Result<FitQuality> {
    let sse = misfit(phi, z, x, disp)?;
    let s = x.n_sites();
    let n_pairs = s * (s - 1) / 2;
    let n_active = (0..z.ncols()).filter(|&k| z.column(k).norm() > 0.0).count();
    Ok(FitQuality {
        sse,
        rmse_over_pairs: (sse / n_pairs as f64).sqrt(),
        n_active_dims: n_active,
    })
}

/// Cheap warm refit of the variogram at fixed Z. Falls back to the incoming
/// parameters if the simplex does not improve on them.
fn warm_refit(
    disp: &DispersionMatrix,
    dist: &DistanceMatrix,
    current: &VariogramParams,
) -> VariogramParams {
    let floor = 1e-15;
    let loss = |x: &[f64]| {
        let p = VariogramParams {
            phi1: x[0].exp(),
            phi2: x[1].exp(),
            phi3: x[2].exp(),
        };
        pair_sse(&p, disp, dist)
    };
    let x0 = [
        current.phi1.max(floor).ln(),
        current.phi2.max(floor).ln(),
        current.phi3.max(floor).ln(),
    ];
    let r = nelder_mead(&loss, &x0, 0.15, 150, 1e-12);
    let refit = VariogramParams {
        phi1: r.x[0].exp(),
        phi2: r.x[1].exp(),
        phi3: r.x[2].exp(),
    };
    if pair_sse(&refit, disp, dist) < pair_sse(current, disp, dist) {
        refit
    } else {
        *current
    }
}

/// Distances depend on Z only through row differences, which are invariant
/// under right-multiplication by an orthogonal matrix; among those rotations
/// the right singular vectors minimize the group penalty (it becomes the sum
/// of singular values). Columns come out sorted by norm, signs fixed so the
/// largest-magnitude entry is positive.
fn principal_axis_rotation(z: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = nalgebra::SVD::new(z.clone(), false, true);
    let Some(v_t) = svd.v_t else {
        return z.clone();
    };
    let r = z * v_t.transpose();
    let mut order: Vec<usize> = (0..r.ncols()).collect();
    let norms: Vec<f64> = (0..r.ncols()).map(|k| r.column(k).norm()).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap().then(a.cmp(&b)));
    let mut out = DMatrix::zeros(r.nrows(), r.ncols());
    for (dst, &src) in order.iter().enumerate() {
        let mut idx = 0;
        let mut best = -1.0;
        for i in 0..r.nrows() {
            let a = r[(i, src)].abs();
            if a > best {
                best = a;
                idx = i;
            }
        }
        let flip = if r[(idx, src)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..r.nrows() {
            out[(i, dst)] = flip * r[(i, src)];
        }
    }
    out
}

struct InnerResult {
    z: DMatrix<f64>,
    phi: VariogramParams,
    trace: Vec<f64>,
    converged: bool,
}

/// Alternating solve of the raw misfit at a fixed budget (None =
/// unconstrained); the penalty enters only through the budget, matched to
/// lambda1 by the caller. Accepts a Z step only when the misfit decreases, so
/// the trace is nonincreasing by construction.
fn inner_solve(
    x: &Locations,
    disp: &DispersionMatrix,
    cfg: &ExpansionConfig,
    budget: Option<f64>,
    phi0: &VariogramParams,
    max_iters: usize,
    z_init: Option<&DMatrix<f64>>,
) -> Result<InnerResult> {
    let s = x.n_sites();
    let dist0 = distances_of_matrix(x.coords());
    let scale = dist0.mean_off_diagonal();

    // break the symmetric stall at Z = 0 with a tiny seeded perturbation;
    // warm starts keep their signal but zeroed columns get re-perturbed so
    // they can re-enter when the budget allows
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e3779b9));
    let mut z = match z_init {
        Some(init) => init.clone(),
        None => DMatrix::zeros(s, cfg.p_max),
    };
    for k in 0..cfg.p_max {
        if z.column(k).norm() == 0.0 {
            for i in 0..s {
                z[(i, k)] = 1e-6 * scale * rng.gen_range(-1.0..1.0);
            }
        }
    }
    if let Some(m) = budget {
        z = group_project_with(&z, m, cfg.penalty);
    }

    let mut phi = *phi0;
    let mut obj = misfit(&phi, &z, x, disp)?;
    let mut trace = vec![obj];
    let mut alpha = cfg.step_size;
    let mut converged = false;
    // the escape from the symmetric near-zero start produces exponentially
    // growing but initially minuscule decreases, so a small step only counts
    // toward convergence while the decreases are also shrinking
    let mut small_steps = 0usize;
    let mut prev_decrease = f64::INFINITY;

    for _ in 0..max_iters {
        // block (a): refit the variogram at the current Z
        let dist = expanded_distances(x, &z);
        let refit = warm_refit(disp, &dist, &phi);
        let obj_phi = misfit(&refit, &z, x, disp)?;
        if obj_phi <= obj {
            phi = refit;
            obj = obj_phi;
        }
        trace.push(obj);

        // block (b): projected gradient step on Z with backtracking
        let (grad, _) = misfit_gradient_z(&phi, &z, x, disp)?;
        let mut accepted = false;
        let mut try_alpha = alpha;
        for _ in 0..40 {
            let mut cand = &z - &grad * try_alpha;
            if let Some(m) = budget {
                cand = group_project_with(&cand, m, cfg.penalty);
            }
            let cand_obj = misfit(&phi, &cand, x, disp)?;
            if cand_obj < obj {
                // rotating to principal axes keeps the misfit but frees
                // group-penalty budget, steering the solver toward sparse
                // column supports
                z = principal_axis_rotation(&cand);
                let decrease = obj - cand_obj;
                obj = cand_obj;
                trace.push(obj);
                alpha = (try_alpha * 2.0).min(1e12);
                accepted = true;
                if decrease < cfg.tolerance * (1.0 + obj.abs()) && decrease <= prev_decrease {
                    small_steps += 1;
                    if small_steps >= 10 {
                        converged = true;
                    }
                } else {
                    small_steps = 0;
                }
                prev_decrease = decrease;
                break;
            }
            try_alpha *= 0.5;
        }
        if !accepted {
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }

    Ok(InnerResult {
        z,
        phi,
        trace,
        converged,
    })
}

fn total_group_norm(z: &DMatrix<f64>, norm: PenaltyNorm) -> f64 {
    penalty_value(z, norm)
}

/// Lagrange-multiplier estimate at a constrained solution: the radial
/// component of the misfit gradient on each active column.
fn multiplier_estimate(
    phi: &VariogramParams,
    z: &DMatrix<f64>,
    x: &Locations,
    disp: &DispersionMatrix,
) -> Result<f64> {
    let (grad, _) = misfit_gradient_z(phi, z, x, disp)?;
    let mut vals = Vec::new();
    for k in 0..z.ncols() {
        let n = z.column(k).norm();
        if n > 0.0 {
            let dot: f64 = grad.column(k).dot(&z.column(k));
            vals.push((-dot / n).max(0.0));
        }
    }
    if vals.is_empty() {
        return Ok(f64::INFINITY);
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

fn finish_solution(
    x: &Locations,
    inner: InnerResult,
    lambda1: f64,
    m: f64,
    cfg: &ExpansionConfig,
) -> ExpansionSolution {
    let dist0 = distances_of_matrix(x.coords());
    let scale = dist0.mean_off_diagonal();
    let s = x.n_sites();
    let mut z = inner.z;
    // columns that never grew beyond the seed perturbation carry no signal
    let snap = 1e-4 * scale * (s as f64).sqrt() * 1e-1;
    for k in 0..z.ncols() {
        if z.column(k).norm() <= snap {
            for i in 0..s {
                z[(i, k)] = 0.0;
            }
        }
    }
    let group_norms: Vec<f64> = (0..z.ncols()).map(|k| z.column(k).norm()).collect();
    let active_dims: Vec<usize> = (0..z.ncols()).filter(|&k| group_norms[k] > 0.0).collect();
    let z_rows: Vec<f64> = (0..s)
        .flat_map(|i| (0..cfg.p_max).map(move |k| (i, k)))
        .map(|(i, k)| z[(i, k)])
        .collect();
    ExpansionSolution {
        phi: inner.phi,
        lambda1,
        m,
        active_dims,
        group_norms,
        z: z_rows,
        n_sites: s,
        p_max: cfg.p_max,
        objective_trace: inner.trace,
        converged: inner.converged,
    }
}

fn zero_solution(
    x: &Locations,
    phi: VariogramParams,
    cfg: &ExpansionConfig,
    obj: f64,
) -> ExpansionSolution {
    let s = x.n_sites();
    ExpansionSolution {
        phi,
        lambda1: cfg.lambda1,
        m: 0.0,
        active_dims: Vec::new(),
        group_norms: vec![0.0; cfg.p_max],
        z: vec![0.0; s * cfg.p_max],
        n_sites: s,
        p_max: cfg.p_max,
        objective_trace: vec![obj],
        converged: true,
    }
}

/// Learn latent dimensions by alternating variogram refits with projected
/// gradient steps on Z, with the budget M matched to lambda1 by bisection on
/// the solution's multiplier estimate.
pub fn learn_expansion(
    x: &Locations,
    disp: &DispersionMatrix,
    cfg: &ExpansionConfig,
) -> Result<ExpansionSolution> {
    cfg.validate()?;
    let s = x.n_sites();
    if disp.n_sites() != s {
        return Err(Error::validation("dispersion shape does not match locations"));
    }
    if s < 2 {
        return Err(Error::validation("need at least 2 sites"));
    }
    let dist0 = distances_of_matrix(x.coords());

    let max_disp = disp.matrix().iter().cloned().fold(0.0, f64::max);
    if max_disp == 0.0 {
        let phi = VariogramParams {
            phi1: 0.0,
            phi2: dist0.max().max(1.0) / 3.0,
            phi3: 0.0,
        };
        return Ok(zero_solution(x, phi, cfg, 0.0));
    }

    // stationary fit at Z = 0
    let init = default_init(disp, &dist0)?;
    let stationary = fit_variogram(disp, &dist0, &init)?;

    if cfg.lambda1 == 0.0 {
        let inner = inner_solve(x, disp, cfg, None, &stationary.params, cfg.max_iters, None)?;
        let m = total_group_norm(&inner.z, cfg.penalty);
        return Ok(finish_solution(x, inner, 0.0, m, cfg));
    }

    // Z = 0 is always a local minimum of the penalized objective (the misfit
    // gain is quadratic in ||Z|| near zero while the penalty is linear), so
    // any candidate with a total norm below the zero-snap threshold loses to
    // it outright; for large lambda1 this skips the search entirely
    let scale = dist0.mean_off_diagonal();
    let snap = 1e-5 * scale * (s as f64).sqrt();
    if cfg.lambda1 * snap >= stationary.sse {
        return Ok(zero_solution(x, stationary.params, cfg, stationary.sse));
    }

    // budget range from the unconstrained solve
    let probe_iters = cfg.max_iters.min(200);
    let unconstrained = inner_solve(x, disp, cfg, None, &stationary.params, cfg.max_iters, None)?;
    let m_max = total_group_norm(&unconstrained.z, cfg.penalty);
    if m_max <= snap {
        return Ok(zero_solution(x, stationary.params, cfg, stationary.sse));
    }

    // Bisect M so the multiplier estimate matches lambda1. The multiplier is
    // zero at both ends of the budget range (unconstrained optimum and the
    // saddle at zero) and peaks between; the bisection tracks the larger-M
    // root, the branch where the budget still buys misfit.
    let mut lo = 0.0f64;
    let mut hi = m_max;
    let mut best_m = m_max / 2.0;
    let mut best_gap = f64::INFINITY;
    // warm-start each probe from the previous trial so the path stays on one
    // solution branch instead of re-escaping the saddle every time
    let mut warm = unconstrained.z.clone();
    let mut best_warm = warm.clone();
    for _ in 0..18 {
        let mid = 0.5 * (lo + hi);
        let trial = inner_solve(
            x,
            disp,
            cfg,
            Some(mid),
            &stationary.params,
            probe_iters,
            Some(&warm),
        )?;
        let lam = multiplier_estimate(&trial.phi, &trial.z, x, disp)?;
        if trial.z.norm() > 0.0 {
            warm = trial.z;
        }
        let gap = if lam.is_finite() {
            (lam - cfg.lambda1).abs()
        } else {
            f64::INFINITY
        };
        if gap < best_gap {
            best_gap = gap;
            best_m = mid;
            best_warm = warm.clone();
        }
        if lam.is_finite() && gap <= 0.01 * cfg.lambda1 {
            break;
        }
        if !lam.is_finite() || lam > cfg.lambda1 {
            lo = mid;
        } else {
            hi = mid;
        }
    }

    let inner = inner_solve(
        x,
        disp,
        cfg,
        Some(best_m),
        &stationary.params,
        cfg.max_iters,
        Some(&best_warm),
    )?;
    let candidate = finish_solution(x, inner, cfg.lambda1, best_m, cfg);
    if candidate.active_dims.is_empty() {
        return Ok(zero_solution(x, stationary.params, cfg, stationary.sse));
    }
    // pick between the two local minima by penalized objective
    let cand_obj = misfit(&candidate.phi, &candidate.z_matrix(), x, disp)?
        + cfg.lambda1 * candidate.group_norms.iter().sum::<f64>();
    if cand_obj >= stationary.sse {
        return Ok(zero_solution(x, stationary.params, cfg, stationary.sse));
    }
    Ok(candidate)
}
