//! Minimal image-warping baseline: move the sites within the plane by metric
//! least-squares scaling of the dispersion misfit, map original to warped
//! locations with smoothed thin-plate splines, and detect folding of that map
//! through Jacobian-determinant sign changes.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geo::{distances_of_matrix, Locations};
use crate::tps::{evaluate_tps, fit_tps, TpsModel};
use crate::variogram::{
    default_init, fit_variogram, pair_sse, DispersionMatrix, VariogramParams,
};

/// Same-dimension warp plus the spline map from original to warped space.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct WarpModel {
    /// Original geographic coordinates, row-major pairs.
    pub original: Vec<[f64; 2]>,
    /// Smoothed warped locations f(X), row-major pairs.
    pub warped_locations: Vec<[f64; 2]>,
    /// One spline per output dimension.
    pub maps: Vec<TpsModel>,
    pub lambda_iw: f64,
    pub phi: VariogramParams,
    /// Misfit of the smoothed warp after a variogram refit.
    pub misfit: f64,
    pub converged: bool,
}

impl WarpModel {
    pub fn warped_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.warped_locations.len(), 2, |i, j| {
            self.warped_locations[i][j]
        })
    }

    pub fn write_csv(&self, site_ids: &[String], path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["site_id", "wx1", "wx2"])?;
        for (id, w) in site_ids.iter().zip(&self.warped_locations) {
            wtr.write_record([id.clone(), format!("{}", w[0]), format!("{}", w[1])])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn free_misfit_gradient(
    phi: &VariogramParams,
    w: &DMatrix<f64>,
    disp: &DispersionMatrix,
) -> DMatrix<f64> {
    let s = w.nrows();
    let dist = distances_of_matrix(w);
    let mut grad = DMatrix::zeros(s, w.ncols());
    for i in 0..s {
        for j in (i + 1)..s {
            let d = dist.get(i, j);
            if d == 0.0 {
                continue;
            }
            let g = phi.phi1 * (1.0 - (-d / phi.phi2).exp()) + phi.phi3;
            let gp = phi.phi1 / phi.phi2 * (-d / phi.phi2).exp();
            let c = 2.0 * (g - disp.get(i, j)) * gp / d;
            for k in 0..w.ncols() {
                let diff = w[(i, k)] - w[(j, k)];
                grad[(i, k)] += c * diff;
                grad[(j, k)] -= c * diff;
            }
        }
    }
    grad
}

/// Metric (least-squares) warp of the locations within the plane, followed by
/// a d -> d thin-plate map with smoothing `lambda_iw`.
pub fn warp_mds(
    x: &Locations,
    disp: &DispersionMatrix,
    lambda_iw: f64,
    init: Option<&DMatrix<f64>>,
    iters: usize,
) -> Result<WarpModel> {
    if x.n_dims() != 2 {
        return Err(Error::validation("warping baseline requires d=2"));
    }
    let s = x.n_sites();
    if disp.n_sites() != s {
        return Err(Error::validation("dispersion shape does not match locations"));
    }

    let mut w = match init {
        Some(m) => {
            if m.nrows() != s || m.ncols() != 2 {
                return Err(Error::validation("warp init shape mismatch"));
            }
            m.clone()
        }
        None => x.coords().clone(),
    };

    // alternate variogram refits with gradient steps on the free locations
    let dist = distances_of_matrix(&w);
    let mut phi = fit_variogram(disp, &dist, &default_init(disp, &dist)?)?.params;
    let mut obj = pair_sse(&phi, disp, &distances_of_matrix(&w));
    let mut alpha = 1.0;
    let mut converged = false;
    for _ in 0..iters {
        let dist = distances_of_matrix(&w);
        let refit = fit_variogram(disp, &dist, &phi)?;
        if refit.sse <= obj {
            phi = refit.params;
            obj = refit.sse;
        }
        let grad = free_misfit_gradient(&phi, &w, disp);
        let mut accepted = false;
        let mut try_alpha = alpha;
        for _ in 0..40 {
            let cand = &w - &grad * try_alpha;
            let cand_obj = pair_sse(&phi, disp, &distances_of_matrix(&cand));
            if cand_obj < obj {
                let decrease = obj - cand_obj;
                w = cand;
                obj = cand_obj;
                alpha = try_alpha * 2.0;
                accepted = true;
                if decrease < 1e-10 * (1.0 + obj.abs()) {
                    converged = true;
                }
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

    // smooth the warp through the spline map
    let mut maps = Vec::with_capacity(2);
    for k in 0..2 {
        let targets: Vec<f64> = (0..s).map(|i| w[(i, k)]).collect();
        maps.push(fit_tps(x, &targets, lambda_iw)?);
    }
    let mut warped = Vec::with_capacity(s);
    let e0 = evaluate_tps(&maps[0], x.coords())?;
    let e1 = evaluate_tps(&maps[1], x.coords())?;
    for i in 0..s {
        warped.push([e0[i], e1[i]]);
    }
    let warped_m = DMatrix::from_fn(s, 2, |i, j| warped[i][j]);
    let dist_w = distances_of_matrix(&warped_m);
    let final_fit = fit_variogram(disp, &dist_w, &phi)?;

    Ok(WarpModel {
        original: (0..s)
            .map(|i| [x.coords()[(i, 0)], x.coords()[(i, 1)]])
            .collect(),
        warped_locations: warped,
        maps,
        lambda_iw,
        phi: final_fit.params,
        misfit: final_fit.sse,
        converged,
    })
}

/// Folding diagnostic over a regular grid clipped to the convex hull of the
/// original sites.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FoldingReport {
    pub folded: bool,
    pub fraction_negative: f64,
    pub n_evaluated: usize,
}

impl FoldingReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s + "\n")?;
        Ok(())
    }
}

// Andrew monotone chain; returns hull vertices counterclockwise.
fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: &[f64; 2], a: &[f64; 2], b: &[f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= 0.0
        {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= 0.0
        {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn inside_hull(hull: &[[f64; 2]], x: f64, y: f64) -> bool {
    if hull.len() < 3 {
        return false;
    }
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        let cross = (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
        if cross < 0.0 {
            return false;
        }
    }
    true
}

/// Jacobian-determinant sign scan of an arbitrary plane-to-plane map over the
/// convex hull of `domain` points.
pub fn detect_folding_fn<F>(map: F, domain: &[[f64; 2]], resolution: usize) -> FoldingReport
where
    F: Fn(f64, f64) -> (f64, f64),
{
    let hull = convex_hull(domain);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in domain {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let h = 1e-5 * ((x1 - x0) + (y1 - y0)).max(1e-12);
    let mut n_pos = 0usize;
    let mut n_neg = 0usize;
    for i in 0..resolution {
        for j in 0..resolution {
            let gx = x0 + (x1 - x0) * i as f64 / (resolution - 1).max(1) as f64;
            let gy = y0 + (y1 - y0) * j as f64 / (resolution - 1).max(1) as f64;
            if !inside_hull(&hull, gx, gy) {
                continue;
            }
            let (fx_p, fy_p) = map(gx + h, gy);
            let (fx_m, fy_m) = map(gx - h, gy);
            let (gx_p, gy_p) = map(gx, gy + h);
            let (gx_m, gy_m) = map(gx, gy - h);
            let j11 = (fx_p - fx_m) / (2.0 * h);
            let j21 = (fy_p - fy_m) / (2.0 * h);
            let j12 = (gx_p - gx_m) / (2.0 * h);
            let j22 = (gy_p - gy_m) / (2.0 * h);
            let det = j11 * j22 - j12 * j21;
            if det < 0.0 {
                n_neg += 1;
            } else {
                n_pos += 1;
            }
        }
    }
    let n = n_pos + n_neg;
    FoldingReport {
        folded: n_pos > 0 && n_neg > 0,
        fraction_negative: if n > 0 { n_neg as f64 / n as f64 } else { 0.0 },
        n_evaluated: n,
    }
}

/// Folding scan of a fitted warp model's spline map.
pub fn detect_folding(model: &WarpModel, resolution: usize) -> Result<FoldingReport> {
    let m0 = &model.maps[0];
    let m1 = &model.maps[1];
    let map = |px: f64, py: f64| {
        let pt = DMatrix::from_row_slice(1, 2, &[px, py]);
        let a = evaluate_tps(m0, &pt).expect("d=2 by construction");
        let b = evaluate_tps(m1, &pt).expect("d=2 by construction");
        (a[0], b[0])
    };
    Ok(detect_folding_fn(map, &model.original, resolution))
}
