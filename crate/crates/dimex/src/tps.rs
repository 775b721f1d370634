//! Thin-plate spline maps from the geographic plane to each latent dimension.
//!
//! The fit minimizes residual sum of squares plus `lambda2` times the bending
//! energy; lambda2 = 0 interpolates the targets, lambda2 -> infinity collapses
//! to the least-squares plane. Mapping is restricted to d = 2 inputs.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expansion::ExpansionSolution;
use crate::geo::{distances_of_matrix, Locations};

/// 2-D thin-plate radial kernel r^2 ln r, with k(0) = 0.
fn tps_kernel(r: f64) -> f64 {
    if r == 0.0 {
        0.0
    } else {
        r * r * r.ln()
    }
}

/// Smoothing parameter, either raw or normalized by the fourth power of the
/// mean inter-knot distance so CLI values transfer across data scales.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Smoothing {
    Raw(f64),
    Normalized(f64),
}

impl Smoothing {
    pub fn resolve(&self, knots: &DMatrix<f64>) -> Result<f64> {
        let v = match self {
            Smoothing::Raw(v) => *v,
            Smoothing::Normalized(v) => {
                let mean_d = distances_of_matrix(knots).mean_off_diagonal();
                v * mean_d.powi(4)
            }
        };
        if v < 0.0 || !v.is_finite() {
            return Err(Error::validation("smoothing parameter must be nonnegative"));
        }
        Ok(v)
    }
}

/// Fitted spline for one latent dimension.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TpsModel {
    /// Knot coordinates, row-major pairs.
    pub knots: Vec<[f64; 2]>,
    /// Radial weights, one per knot; they sum to zero and are orthogonal to
    /// the knot coordinates.
    pub weights: Vec<f64>,
    /// Affine part a0 + a1 x1 + a2 x2.
    pub affine: [f64; 3],
    pub lambda2: f64,
    /// Count of duplicate knots that were merged during fitting.
    pub merged_duplicates: usize,
}

fn knot_matrix(knots: &[[f64; 2]]) -> DMatrix<f64> {
    DMatrix::from_fn(knots.len(), 2, |i, j| knots[i][j])
}

/// Fit one spline: X are the training sites (d = 2), `targets` the latent
/// coordinate per site.
pub fn fit_tps(x: &Locations, targets: &[f64], lambda2: f64) -> Result<TpsModel> {
    if x.n_dims() != 2 {
        return Err(Error::validation(format!(
            "thin-plate mapping requires d=2, got d={}",
            x.n_dims()
        )));
    }
    if targets.len() != x.n_sites() {
        return Err(Error::validation("target count does not match sites"));
    }
    if lambda2 < 0.0 || !lambda2.is_finite() {
        return Err(Error::validation("lambda2 must be nonnegative"));
    }

    // merge exact-duplicate knots, averaging their targets
    let mut knots: Vec<[f64; 2]> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for i in 0..x.n_sites() {
        let pt = [x.coords()[(i, 0)], x.coords()[(i, 1)]];
        if let Some(k) = knots.iter().position(|q| q == &pt) {
            sums[k] += targets[i];
            counts[k] += 1;
        } else {
            knots.push(pt);
            sums.push(targets[i]);
            counts.push(1);
        }
    }
    let merged = x.n_sites() - knots.len();
    let y: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s / c as f64)
        .collect();
    let s = knots.len();
    if s < 3 {
        return Err(Error::validation("need at least 3 distinct knots"));
    }

    // affine part needs non-collinear knots
    let p = DMatrix::from_fn(s, 3, |i, j| match j {
        0 => 1.0,
        1 => knots[i][0],
        _ => knots[i][1],
    });
    let svd = p.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 1e-10 * smax {
        return Err(Error::validation(
            "knots are collinear; the affine part of the spline is not unique",
        ));
    }

    // bordered system [K + lambda I, P; P^T, 0]
    let km = knot_matrix(&knots);
    let dist = distances_of_matrix(&km);
    let n = s + 3;
    let mut a = DMatrix::zeros(n, n);
    for i in 0..s {
        for j in 0..s {
            a[(i, j)] = tps_kernel(dist.get(i, j));
        }
        a[(i, i)] += lambda2;
        for j in 0..3 {
            a[(i, s + j)] = p[(i, j)];
            a[(s + j, i)] = p[(i, j)];
        }
    }
    let mut rhs = DVector::zeros(n);
    for i in 0..s {
        rhs[i] = y[i];
    }
    let sol = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::numeric("singular thin-plate system"))?;

    Ok(TpsModel {
        knots,
        weights: (0..s).map(|i| sol[i]).collect(),
        affine: [sol[s], sol[s + 1], sol[s + 2]],
        lambda2,
        merged_duplicates: merged,
    })
}

/// Evaluate the spline at new d = 2 points.
pub fn evaluate_tps(model: &TpsModel, x_new: &DMatrix<f64>) -> Result<DVector<f64>> {
    if x_new.ncols() != 2 {
        return Err(Error::validation("thin-plate evaluation requires d=2 inputs"));
    }
    let mut out = DVector::zeros(x_new.nrows());
    for i in 0..x_new.nrows() {
        let (px, py) = (x_new[(i, 0)], x_new[(i, 1)]);
        let mut v = model.affine[0] + model.affine[1] * px + model.affine[2] * py;
        for (k, w) in model.knots.iter().zip(&model.weights) {
            let r = ((px - k[0]).powi(2) + (py - k[1]).powi(2)).sqrt();
            v += w * tps_kernel(r);
        }
        out[i] = v;
    }
    Ok(out)
}

/// Bending energy as the quadratic form of the radial weights against the
/// kernel matrix; zero iff the map is affine.
pub fn bending_energy(model: &TpsModel) -> f64 {
    let s = model.knots.len();
    let km = knot_matrix(&model.knots);
    let dist = distances_of_matrix(&km);
    let mut e = 0.0;
    for i in 0..s {
        for j in 0..s {
            e += model.weights[i] * model.weights[j] * tps_kernel(dist.get(i, j));
        }
    }
    e.max(0.0)
}

/// One spline per active latent dimension of a solution, plus the smoothed
/// latent coordinates f(X) used downstream instead of the raw Z.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LatentMap {
    /// (latent dimension index, model) for each active dimension.
    pub models: Vec<(usize, TpsModel)>,
    pub p_max: usize,
    /// Raw lambda2 actually used in the fits.
    pub lambda2: f64,
}

impl LatentMap {
    /// Latent coordinates for arbitrary 2-D points: f(X), with inactive
    /// dimensions identically zero.
    pub fn latent_at(&self, x_new: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut z = DMatrix::zeros(x_new.nrows(), self.p_max);
        for (dim, model) in &self.models {
            let col = evaluate_tps(model, x_new)?;
            for i in 0..x_new.nrows() {
                z[(i, *dim)] = col[i];
            }
        }
        Ok(z)
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

    /// Regular-grid export `x1,x2,z_k` for contour plots of each learned
    /// dimension.
    pub fn write_grid_csv(&self, x: &Locations, resolution: usize, path: &Path) -> Result<()> {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for row in x.coords().row_iter() {
            x0 = x0.min(row[0]);
            x1 = x1.max(row[0]);
            y0 = y0.min(row[1]);
            y1 = y1.max(row[1]);
        }
        let mut wtr = csv::Writer::from_path(path)?;
        let mut header = vec!["x1".to_string(), "x2".to_string()];
        header.extend(self.models.iter().map(|(dim, _)| format!("z{}", dim + 1)));
        wtr.write_record(&header)?;
        for i in 0..resolution {
            for j in 0..resolution {
                let gx = x0 + (x1 - x0) * i as f64 / (resolution - 1).max(1) as f64;
                let gy = y0 + (y1 - y0) * j as f64 / (resolution - 1).max(1) as f64;
                let pt = DMatrix::from_row_slice(1, 2, &[gx, gy]);
                let mut rec = vec![format!("{gx}"), format!("{gy}")];
                for (_, model) in &self.models {
                    rec.push(format!("{}", evaluate_tps(model, &pt)?[0]));
                }
                wtr.write_record(&rec)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Fit one spline per active latent dimension of an expansion solution.
pub fn map_latent(
    x: &Locations,
    solution: &ExpansionSolution,
    lambda2: Smoothing,
) -> Result<LatentMap> {
    let raw = lambda2.resolve(x.coords())?;
    let z = solution.z_matrix();
    let mut models = Vec::new();
    for &dim in &solution.active_dims {
        let targets: Vec<f64> = (0..x.n_sites()).map(|i| z[(i, dim)]).collect();
        models.push((dim, fit_tps(x, &targets, raw)?));
    }
    Ok(LatentMap {
        models,
        p_max: solution.p_max,
        lambda2: raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sites(s: usize, seed: u64) -> Locations {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = DMatrix::from_fn(s, 2, |_, _| rng.gen_range(0.0..1.0));
        Locations::from_coords(coords).unwrap()
    }

    #[test]
    fn affine_targets_reproduced_for_all_lambda() {
        let x = random_sites(12, 1);
        let (a, b, c) = (0.7, -1.3, 2.1);
        let targets: Vec<f64> = (0..12)
            .map(|i| a + b * x.coords()[(i, 0)] + c * x.coords()[(i, 1)])
            .collect();
        for lambda2 in [0.0, 1e-4, 1.0, 1e4] {
            let m = fit_tps(&x, &targets, lambda2).unwrap();
            assert_relative_eq!(m.affine[0], a, epsilon = 1e-9);
            assert_relative_eq!(m.affine[1], b, epsilon = 1e-9);
            assert_relative_eq!(m.affine[2], c, epsilon = 1e-9);
            assert!(m.weights.iter().all(|w| w.abs() < 1e-9));
            assert!(bending_energy(&m) < 1e-15);
        }
    }

    #[test]
    fn zero_lambda_interpolates() {
        let x = random_sites(15, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let targets: Vec<f64> = (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let m = fit_tps(&x, &targets, 0.0).unwrap();
        let at_knots = evaluate_tps(&m, x.coords()).unwrap();
        for i in 0..15 {
            assert_relative_eq!(at_knots[i], targets[i], epsilon = 1e-8);
        }
    }

    // Normal-equations oracle: the lambda2 -> infinity limit is the
    // least-squares plane.
    #[test]
    fn large_lambda_matches_least_squares_plane() {
        let x = random_sites(15, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let targets: Vec<f64> = (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let m = fit_tps(&x, &targets, 1e6).unwrap();

        let p = DMatrix::from_fn(15, 3, |i, j| match j {
            0 => 1.0,
            1 => x.coords()[(i, 0)],
            _ => x.coords()[(i, 1)],
        });
        let y = DVector::from_vec(targets.clone());
        let normal = (p.transpose() * &p)
            .lu()
            .solve(&(p.transpose() * &y))
            .unwrap();
        let pred = evaluate_tps(&m, x.coords()).unwrap();
        let plane = &p * &normal;
        for i in 0..15 {
            assert_relative_eq!(pred[i], plane[i], epsilon = 1e-3);
        }
    }

    #[test]
    fn zero_weight_model_is_exactly_affine() {
        let m = TpsModel {
            knots: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            weights: vec![0.0; 3],
            affine: [1.0, 2.0, -0.5],
            lambda2: 0.0,
            merged_duplicates: 0,
        };
        let pts = DMatrix::from_row_slice(2, 2, &[10.0, -3.0, 0.25, 0.5]);
        let v = evaluate_tps(&m, &pts).unwrap();
        assert_relative_eq!(v[0], 1.0 + 20.0 + 1.5, epsilon = 1e-12);
        assert_relative_eq!(v[1], 1.0 + 0.5 - 0.25, epsilon = 1e-12);
        assert_eq!(bending_energy(&m), 0.0);
    }

    // Independent kernel-sum oracle for evaluation.
    #[test]
    fn evaluation_matches_kernel_sum_oracle() {
        let x = random_sites(10, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let targets: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = fit_tps(&x, &targets, 1e-3).unwrap();
        for _ in 0..20 {
            let px: f64 = rng.gen_range(-5.0..5.0);
            let py: f64 = rng.gen_range(-5.0..5.0);
            let mut expected = m.affine[0] + m.affine[1] * px + m.affine[2] * py;
            for (k, w) in m.knots.iter().zip(&m.weights) {
                let r2 = (px - k[0]).powi(2) + (py - k[1]).powi(2);
                if r2 > 0.0 {
                    expected += w * r2 * r2.sqrt().ln();
                }
            }
            let got = evaluate_tps(&m, &DMatrix::from_row_slice(1, 2, &[px, py])).unwrap()[0];
            assert_relative_eq!(got, expected, epsilon = 1e-10);
        }
    }

    #[test]
    fn energy_monotone_in_lambda() {
        let x = random_sites(20, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let targets: Vec<f64> = (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut prev = f64::INFINITY;
        for lambda2 in [0.0, 1e-4, 1e-2, 1.0, 1e2] {
            let m = fit_tps(&x, &targets, lambda2).unwrap();
            let e = bending_energy(&m);
            assert!(e >= 0.0);
            assert!(e <= prev + 1e-9 * (1.0 + prev.abs()), "energy rose at {lambda2}");
            prev = e;
        }
    }

    #[test]
    fn weights_satisfy_side_conditions() {
        let x = random_sites(12, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let targets: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = fit_tps(&x, &targets, 1e-2).unwrap();
        let sum: f64 = m.weights.iter().sum();
        let dot_x: f64 = m.weights.iter().zip(&m.knots).map(|(w, k)| w * k[0]).sum();
        let dot_y: f64 = m.weights.iter().zip(&m.knots).map(|(w, k)| w * k[1]).sum();
        assert!(sum.abs() < 1e-8);
        assert!(dot_x.abs() < 1e-8);
        assert!(dot_y.abs() < 1e-8);
    }

    #[test]
    fn collinear_sites_rejected() {
        let coords = DMatrix::from_fn(5, 2, |i, _| i as f64);
        let x = Locations::from_coords(coords).unwrap();
        let err = fit_tps(&x, &[0.0, 1.0, 2.0, 3.0, 4.0], 0.0).unwrap_err();
        assert!(err.to_string().contains("collinear"));
    }

    #[test]
    fn duplicate_knots_merged() {
        let coords =
            DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        let x = Locations::from_coords(coords).unwrap();
        let m = fit_tps(&x, &[0.0, 1.0, 2.0, 3.0], 0.0).unwrap();
        assert_eq!(m.merged_duplicates, 1);
        assert_eq!(m.knots.len(), 3);
        // merged target is the average of the duplicates
        let at = evaluate_tps(&m, &DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        assert_relative_eq!(at[0], 2.0, epsilon = 1e-8);
    }

    #[test]
    fn d_not_two_rejected() {
        let coords = DMatrix::from_fn(5, 3, |i, j| (i * 3 + j) as f64);
        let x = Locations::from_coords(coords).unwrap();
        assert!(fit_tps(&x, &[0.0; 5], 0.0).is_err());
    }

    #[test]
    fn map_latent_zero_solution_has_no_models() {
        let x = random_sites(8, 12);
        let sol = ExpansionSolution {
            phi: crate::variogram::VariogramParams::new(1.0, 1.0, 0.0).unwrap(),
            lambda1: 1.0,
            m: 0.0,
            active_dims: vec![],
            group_norms: vec![0.0, 0.0],
            z: vec![0.0; 16],
            n_sites: 8,
            p_max: 2,
            objective_trace: vec![0.0],
            converged: true,
        };
        let map = map_latent(&x, &sol, Smoothing::Raw(1e-4)).unwrap();
        assert!(map.models.is_empty());
        let z = map.latent_at(x.coords()).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn map_latent_near_interpolates_at_small_lambda() {
        let x = random_sites(10, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let z_col: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut z = vec![0.0; 20];
        for i in 0..10 {
            z[i * 2] = z_col[i];
        }
        let sol = ExpansionSolution {
            phi: crate::variogram::VariogramParams::new(1.0, 1.0, 0.0).unwrap(),
            lambda1: 0.5,
            m: 1.0,
            active_dims: vec![0],
            group_norms: vec![1.0, 0.0],
            z,
            n_sites: 10,
            p_max: 2,
            objective_trace: vec![0.0],
            converged: true,
        };
        let map = map_latent(&x, &sol, Smoothing::Normalized(1e-4)).unwrap();
        let smoothed = map.latent_at(x.coords()).unwrap();
        for i in 0..10 {
            assert_relative_eq!(smoothed[(i, 0)], z_col[i], epsilon = 1e-2);
            assert_eq!(smoothed[(i, 1)], 0.0);
        }
        // increasing lambda2 never increases bending energy
        let mut prev = f64::INFINITY;
        for l2 in [1e-6, 1e-4, 1e-2, 1.0] {
            let m = map_latent(&x, &sol, Smoothing::Normalized(l2)).unwrap();
            let e = bending_energy(&m.models[0].1);
            assert!(e <= prev + 1e-9 * (1.0 + prev.abs()));
            prev = e;
        }
    }
}
