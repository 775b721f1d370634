//! Simple kriging in the expanded space and leave-k-out cross-validation over
//! the (lambda1, lambda2) grid.
//!
//! The covariance implied by the exponential variogram is
//! C(h) = phi1 exp(-h/phi2), with the nugget phi3 entering the training
//! diagonal only (measurement-error reading). Prediction at new sites maps
//! geographic coordinates through the fitted splines first; the original
//! geographic space is the Z = 0 special case.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::expansion::{learn_expansion, ExpansionConfig, ExpansionSolution};
use crate::geo::{expand, pairwise_distances, ExpandedLocations, Locations};
use crate::tps::{map_latent, LatentMap, Smoothing};
use crate::variogram::{empirical_dispersion, Observations, VariogramParams};

/// Predictive mean and kriging variance per target site.
#[derive(Debug, Clone, PartialEq)]
pub struct KrigingResult {
    pub predictions: DVector<f64>,
    pub variances: DVector<f64>,
}

fn covariance_between(
    phi: &VariogramParams,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        let d = (a.row(i) - b.row(j)).norm();
        phi.phi1 * (-d / phi.phi2).exp()
    })
}

/// Simple kriging (known zero mean). Set `ordinary` to estimate a constant
/// mean instead, for data that is not mean-zero.
pub fn krige_with_mean(
    train: &ExpandedLocations,
    y: &DVector<f64>,
    phi: &VariogramParams,
    targets: &ExpandedLocations,
    ordinary: bool,
) -> Result<KrigingResult> {
    phi.validate()?;
    let s = train.n_sites();
    if y.len() != s {
        return Err(Error::validation("observation count does not match training sites"));
    }
    pairwise_distances(train)?; // finite-coordinate check
    let tm = train.full_matrix();
    let gm = targets.full_matrix();
    if tm.ncols() != gm.ncols() {
        return Err(Error::validation(
            "training and target expanded dimensions differ",
        ));
    }

    let mut c = covariance_between(phi, &tm, &tm);
    for i in 0..s {
        c[(i, i)] += phi.phi3;
    }
    let jitter = 1e-8 * c.trace() / s as f64;
    let chol = match c.clone().cholesky() {
        Some(ch) => ch,
        None => {
            let mut cj = c.clone();
            for i in 0..s {
                cj[(i, i)] += jitter;
            }
            cj.cholesky().ok_or_else(|| {
                let eig = nalgebra::SymmetricEigen::new(c.clone());
                let min_ev = eig.eigenvalues.min();
                Error::numeric(format!(
                    "kriging system singular beyond jitter {jitter:.3e} (smallest eigenvalue {min_ev:.3e})"
                ))
            })?
        }
    };

    let cross = covariance_between(phi, &tm, &gm);
    let sigma2 = phi.phi1 + phi.phi3;
    let n_t = targets.n_sites();
    let mut predictions = DVector::zeros(n_t);
    let mut variances = DVector::zeros(n_t);

    if ordinary {
        let ones = DVector::from_element(s, 1.0);
        let ci_ones = chol.solve(&ones);
        let denom = ones.dot(&ci_ones);
        for t in 0..n_t {
            let c0 = cross.column(t).clone_owned();
            let ci_c = chol.solve(&c0);
            let mu = (1.0 - ones.dot(&ci_c)) / denom;
            let w = chol.solve(&(c0.clone() + &ones * mu));
            predictions[t] = w.dot(y);
            variances[t] = (sigma2 - c0.dot(&ci_c) + mu * (1.0 - ones.dot(&ci_c))).max(0.0);
        }
    } else {
        for t in 0..n_t {
            let c0 = cross.column(t).clone_owned();
            let w = chol.solve(&c0);
            predictions[t] = w.dot(y);
            variances[t] = (sigma2 - c0.dot(&w)).max(0.0);
        }
    }
    Ok(KrigingResult {
        predictions,
        variances,
    })
}

/// Simple kriging under the mean-zero model.
pub fn krige(
    train: &ExpandedLocations,
    y: &DVector<f64>,
    phi: &VariogramParams,
    targets: &ExpandedLocations,
) -> Result<KrigingResult> {
    krige_with_mean(train, y, phi, targets, false)
}

/// Predict at new geographic sites: latent coordinates come from the spline
/// map at both the training and the target sites.
pub fn predict_new_sites(
    x_train: &Locations,
    y: &DVector<f64>,
    solution: &ExpansionSolution,
    map: &LatentMap,
    x_new: &DMatrix<f64>,
) -> Result<KrigingResult> {
    let z_train = map.latent_at(x_train.coords())?;
    let train = expand(x_train.clone(), z_train)?;
    let z_new = map.latent_at(x_new)?;
    let ids = (1..=x_new.nrows()).map(|i| format!("target-{i}")).collect();
    let targets = expand(Locations::new(x_new.clone_owned(), ids)?, z_new)?;
    krige(&train, y, &solution.phi, &targets)
}

/// Cross-validation configuration.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CvConfig {
    pub lambda1_values: Vec<f64>,
    pub lambda2_values: Vec<f64>,
    /// Interpret lambda2 values in mean-knot-distance-normalized units.
    pub normalized_lambda2: bool,
    /// Leave-out size per fold.
    pub k: usize,
    pub seed: u64,
    pub p_max: usize,
    pub max_iters: usize,
    /// Worker threads for (fold, lambda1) jobs.
    pub jobs: usize,
}

impl CvConfig {
    /// Log-spaced defaults; the top lambda1 suppresses expansion entirely.
    pub fn default_grid(k: usize, seed: u64) -> Self {
        CvConfig {
            lambda1_values: vec![0.01, 0.1, 1.0, 10.0, 10f64.powf(4.5)],
            lambda2_values: vec![1e-6, 1e-4, 1e-2],
            normalized_lambda2: true,
            k,
            seed,
            p_max: 3,
            max_iters: 200,
            jobs: 1,
        }
    }
}

/// One (cell, fold) record of the CV run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CvFoldRecord {
    pub lambda1_index: usize,
    pub lambda2_index: usize,
    pub fold: usize,
    pub rmse: f64,
    pub failed: bool,
}

/// Full grid result.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CvGrid {
    pub lambda1_values: Vec<f64>,
    pub lambda2_values: Vec<f64>,
    pub k: usize,
    pub seed: u64,
    /// Fold index per site, in location order.
    pub fold_of_site: Vec<usize>,
    /// Pooled RMSE per cell, row-major over (lambda1, lambda2); NaN-free:
    /// cells whose every fold failed carry infinity.
    pub rmse: Vec<f64>,
    /// Failure count per cell.
    pub n_failures: Vec<usize>,
    pub records: Vec<CvFoldRecord>,
    /// Indices of the best cell.
    pub argmin: (usize, usize),
}

impl CvGrid {
    pub fn rmse_at(&self, i1: usize, i2: usize) -> f64 {
        self.rmse[i1 * self.lambda2_values.len() + i2]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["lambda1", "lambda2", "fold", "rmse", "n_failures"])?;
        for r in &self.records {
            wtr.write_record([
                format!("{}", self.lambda1_values[r.lambda1_index]),
                format!("{}", self.lambda2_values[r.lambda2_index]),
                format!("{}", r.fold),
                format!("{}", r.rmse),
                format!("{}", if r.failed { 1 } else { 0 }),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s + "\n")?;
        Ok(())
    }
}

/// Per-(fold, lambda1) work product: squared errors per lambda2.
struct FoldTask {
    fold: usize,
    l1_index: usize,
    // per lambda2: (sum of squared errors, count), or None on failure
    outcomes: Vec<Option<(f64, usize)>>,
}

#[allow(clippy::too_many_arguments)]
fn run_fold_task(
    x: &Locations,
    values: &DMatrix<f64>,
    folds: &[Vec<usize>],
    fold: usize,
    l1_index: usize,
    cfg: &CvConfig,
) -> FoldTask {
    let lambda1 = cfg.lambda1_values[l1_index];
    let n_l2 = cfg.lambda2_values.len();
    let held_out = &folds[fold];
    let held_in: Vec<usize> = (0..x.n_sites())
        .filter(|i| !held_out.contains(i))
        .collect();

    let fail = FoldTask {
        fold,
        l1_index,
        outcomes: vec![None; n_l2],
    };

    let x_in = match x.subset(&held_in) {
        Ok(v) => v,
        Err(_) => return fail,
    };
    let values_in = DMatrix::from_fn(held_in.len(), values.ncols(), |i, j| {
        values[(held_in[i], j)]
    });
    // dispersions from held-in sites only, so no information leaks from the
    // held-out fold into the learned geometry
    let disp_in = match empirical_dispersion(&values_in) {
        Ok(v) => v,
        Err(_) => return fail,
    };

    let mut ecfg = ExpansionConfig::new(cfg.p_max, lambda1);
    ecfg.max_iters = cfg.max_iters;
    ecfg.seed = cfg
        .seed
        .wrapping_mul(0x100000001b3)
        .wrapping_add((fold as u64) << 16)
        .wrapping_add(l1_index as u64);
    let solution = match learn_expansion(&x_in, &disp_in, &ecfg) {
        Ok(v) => v,
        Err(_) => return fail,
    };

    let x_out = DMatrix::from_fn(held_out.len(), 2, |i, j| x.coords()[(held_out[i], j)]);
    let mut outcomes = Vec::with_capacity(n_l2);
    for &l2 in &cfg.lambda2_values {
        let smoothing = if cfg.normalized_lambda2 {
            Smoothing::Normalized(l2)
        } else {
            Smoothing::Raw(l2)
        };
        let map = match map_latent(&x_in, &solution, smoothing) {
            Ok(v) => v,
            Err(_) => {
                outcomes.push(None);
                continue;
            }
        };
        let mut sse = 0.0;
        let mut count = 0usize;
        let mut ok = true;
        for t in 0..values.ncols() {
            // sites with a value in this replicate
            let present: Vec<usize> = (0..held_in.len())
                .filter(|&i| !values_in[(i, t)].is_nan())
                .collect();
            if present.len() < 3 {
                continue;
            }
            let x_rep = match x_in.subset(&present) {
                Ok(v) => v,
                Err(_) => {
                    ok = false;
                    break;
                }
            };
            let y_rep = DVector::from_fn(present.len(), |i, _| values_in[(present[i], t)]);
            let pred = (|| -> Result<KrigingResult> {
                predict_new_sites(&x_rep, &y_rep, &solution, &map, &x_out)
            })();
            let pred = match pred {
                Ok(v) => v,
                Err(_) => {
                    ok = false;
                    break;
                }
            };
            for (o, &site) in held_out.iter().enumerate() {
                let truth = values[(site, t)];
                if truth.is_nan() {
                    continue;
                }
                let e = pred.predictions[o] - truth;
                sse += e * e;
                count += 1;
            }
        }
        if ok && count > 0 {
            outcomes.push(Some((sse, count)));
        } else {
            outcomes.push(None);
        }
    }
    FoldTask {
        fold,
        l1_index,
        outcomes,
    }
}

/// Leave-k-out cross-validation over the (lambda1, lambda2) grid.
/// Deterministic per seed; (fold, lambda1) jobs run on up to `jobs` threads
/// and results are merged by index so scheduling never affects output.
pub fn cross_validate(x: &Locations, obs: &Observations, cfg: &CvConfig) -> Result<CvGrid> {
    let s = x.n_sites();
    if cfg.k < 1 || cfg.k >= s {
        return Err(Error::validation(format!(
            "leave-out size k={} must satisfy 1 <= k < s={s}",
            cfg.k
        )));
    }
    if s - cfg.k < 3 {
        return Err(Error::validation(format!(
            "k={} leaves only {} training sites per fold; need at least 3",
            cfg.k,
            s - cfg.k
        )));
    }
    if cfg.lambda1_values.is_empty() || cfg.lambda2_values.is_empty() {
        return Err(Error::validation("empty hyperparameter grid"));
    }
    let values = obs.aligned_to(x.site_ids())?;

    // seeded fold assignment, fold sizes differing by at most one
    let mut order: Vec<usize> = (0..s).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order.shuffle(&mut rng);
    let n_folds = s.div_ceil(cfg.k);
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); n_folds];
    for (i, &site) in order.iter().enumerate() {
        folds[i % n_folds].push(site);
    }
    for f in folds.iter_mut() {
        f.sort_unstable();
    }
    let mut fold_of_site = vec![0usize; s];
    for (fi, f) in folds.iter().enumerate() {
        for &site in f {
            fold_of_site[site] = fi;
        }
    }

    let n_l1 = cfg.lambda1_values.len();
    let n_l2 = cfg.lambda2_values.len();
    let tasks: Vec<(usize, usize)> = (0..folds.len())
        .flat_map(|f| (0..n_l1).map(move |l| (f, l)))
        .collect();

    let mut results: Vec<Option<FoldTask>> = (0..tasks.len()).map(|_| None).collect();
    let jobs = cfg.jobs.max(1);
    if jobs == 1 {
        for (slot, &(f, l)) in tasks.iter().enumerate() {
            results[slot] = Some(run_fold_task(x, &values, &folds, f, l, cfg));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<FoldTask>>> =
            (0..tasks.len()).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(tasks.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= tasks.len() {
                        break;
                    }
                    let (f, l) = tasks[i];
                    let out = run_fold_task(x, &values, &folds, f, l, cfg);
                    *slots[i].lock().unwrap() = Some(out);
                });
            }
        });
        for (slot, cell) in results.iter_mut().zip(slots) {
            *slot = cell.into_inner().unwrap();
        }
    }

    // merge by (cell, fold) key
    let mut records = Vec::new();
    let mut sse = vec![0.0; n_l1 * n_l2];
    let mut count = vec![0usize; n_l1 * n_l2];
    let mut n_failures = vec![0usize; n_l1 * n_l2];
    for task in results.into_iter().flatten() {
        for (l2_index, outcome) in task.outcomes.iter().enumerate() {
            let cell = task.l1_index * n_l2 + l2_index;
            match outcome {
                Some((fold_sse, fold_count)) => {
                    sse[cell] += fold_sse;
                    count[cell] += fold_count;
                    records.push(CvFoldRecord {
                        lambda1_index: task.l1_index,
                        lambda2_index: l2_index,
                        fold: task.fold,
                        rmse: (fold_sse / *fold_count as f64).sqrt(),
                        failed: false,
                    });
                }
                None => {
                    n_failures[cell] += 1;
                    records.push(CvFoldRecord {
                        lambda1_index: task.l1_index,
                        lambda2_index: l2_index,
                        fold: task.fold,
                        rmse: f64::NAN,
                        failed: true,
                    });
                }
            }
        }
    }
    records.sort_by_key(|r| (r.lambda1_index, r.lambda2_index, r.fold));

    let rmse: Vec<f64> = sse
        .iter()
        .zip(&count)
        .map(|(&e, &c)| if c > 0 { (e / c as f64).sqrt() } else { f64::INFINITY })
        .collect();
    let mut argmin = (0, 0);
    let mut best = f64::INFINITY;
    for i1 in 0..n_l1 {
        for i2 in 0..n_l2 {
            let v = rmse[i1 * n_l2 + i2];
            if v < best {
                best = v;
                argmin = (i1, i2);
            }
        }
    }

    Ok(CvGrid {
        lambda1_values: cfg.lambda1_values.clone(),
        lambda2_values: cfg.lambda2_values.clone(),
        k: cfg.k,
        seed: cfg.seed,
        fold_of_site,
        rmse,
        n_failures,
        records,
        argmin,
    })
}
