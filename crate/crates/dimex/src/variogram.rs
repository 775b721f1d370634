//! Exponential variogram, empirical dispersions, binning, and least-squares
//! parameter fitting at fixed locations.
//!
//! The dispersion between sites i and j is the replicate-averaged squared
//! difference of the observed field; the variogram is fit to the raw pair
//! cloud, binning exists only for plot output.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geo::DistanceMatrix;
use crate::optim::nelder_mead;

/// Exponential variogram parameters: sill-scale, range, nugget.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VariogramParams {
    pub phi1: f64,
    pub phi2: f64,
    pub phi3: f64,
}

impl VariogramParams {
    pub fn new(phi1: f64, phi2: f64, phi3: f64) -> Result<Self> {
        let p = VariogramParams { phi1, phi2, phi3 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.phi1.is_finite() && self.phi2.is_finite() && self.phi3.is_finite()) {
            return Err(Error::validation("non-finite variogram parameter"));
        }
        if self.phi1 < 0.0 || self.phi3 < 0.0 {
            return Err(Error::validation("sill-scale and nugget must be nonnegative"));
        }
        if self.phi2 <= 0.0 {
            return Err(Error::validation("range must be positive"));
        }
        Ok(())
    }
}

/// gamma(h) = phi1 (1 - exp(-h/phi2)) + phi3
pub fn evaluate_variogram(params: &VariogramParams, h: f64) -> Result<f64> {
    if h < 0.0 {
        return Err(Error::validation(format!("negative distance {h}")));
    }
    Ok(params.phi1 * (1.0 - (-h / params.phi2).exp()) + params.phi3)
}

/// d gamma / d h = (phi1/phi2) exp(-h/phi2)
pub fn variogram_d_dh(params: &VariogramParams, h: f64) -> Result<f64> {
    if h < 0.0 {
        return Err(Error::validation(format!("negative distance {h}")));
    }
    Ok(params.phi1 / params.phi2 * (-h / params.phi2).exp())
}

/// Symmetric matrix of empirical dispersions v*_{ij}.
#[derive(Debug, Clone, PartialEq)]
pub struct DispersionMatrix {
    v: DMatrix<f64>,
    n_replicates: usize,
}

impl DispersionMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn n_sites(&self) -> usize {
        self.v.nrows()
    }

    pub fn n_replicates(&self) -> usize {
        self.n_replicates
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.v[(i, j)]
    }

    pub fn from_matrix(v: DMatrix<f64>, n_replicates: usize) -> Result<Self> {
        if v.nrows() != v.ncols() {
            return Err(Error::validation("dispersion matrix must be square"));
        }
        for i in 0..v.nrows() {
            if v[(i, i)] != 0.0 {
                return Err(Error::validation("dispersion diagonal must be zero"));
            }
            for j in 0..v.ncols() {
                if v[(i, j)] < 0.0 || (v[(i, j)] - v[(j, i)]).abs() > 1e-12 {
                    return Err(Error::validation("dispersion matrix must be symmetric nonnegative"));
                }
            }
        }
        Ok(DispersionMatrix { v, n_replicates })
    }

    /// Keep only the listed sites (CV fold construction).
    pub fn subset(&self, rows: &[usize]) -> DispersionMatrix {
        let v = DMatrix::from_fn(rows.len(), rows.len(), |i, j| self.v[(rows[i], rows[j])]);
        DispersionMatrix {
            v,
            n_replicates: self.n_replicates,
        }
    }
}

/// Replicate-averaged squared differences; `values` is sites x replicates with
/// NaN marking a missing cell. Pairs use their complete replicates only.
pub fn empirical_dispersion(values: &DMatrix<f64>) -> Result<DispersionMatrix> {
    let s = values.nrows();
    let n_rep = values.ncols();
    if n_rep < 1 {
        return Err(Error::validation("need at least one replicate"));
    }
    for v in values.iter() {
        if v.is_infinite() {
            return Err(Error::validation("infinite observation value"));
        }
    }
    let mut v = DMatrix::zeros(s, s);
    for i in 0..s {
        for j in (i + 1)..s {
            let mut sum = 0.0;
            let mut n = 0usize;
            for t in 0..n_rep {
                let a = values[(i, t)];
                let b = values[(j, t)];
                if a.is_nan() || b.is_nan() {
                    continue;
                }
                sum += (a - b) * (a - b);
                n += 1;
            }
            if n == 0 {
                return Err(Error::validation(format!(
                    "sites {i} and {j} share no complete replicate"
                )));
            }
            let d = sum / n as f64;
            v[(i, j)] = d;
            v[(j, i)] = d;
        }
    }
    Ok(DispersionMatrix {
        v,
        n_replicates: n_rep,
    })
}

/// Binned dispersion-vs-distance summary for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedVariogram {
    pub bin_centers: Vec<f64>,
    pub bin_means: Vec<f64>,
    pub bin_counts: Vec<usize>,
}

impl BinnedVariogram {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["distance", "dispersion", "count"])?;
        for k in 0..self.bin_centers.len() {
            wtr.write_record([
                format!("{}", self.bin_centers[k]),
                format!("{}", self.bin_means[k]),
                format!("{}", self.bin_counts[k]),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Equal-width bins over [0, max distance]; empty bins are omitted.
pub fn bin_dispersions(
    disp: &DispersionMatrix,
    dist: &DistanceMatrix,
    n_bins: usize,
) -> Result<BinnedVariogram> {
    if disp.n_sites() != dist.n_sites() {
        return Err(Error::validation("dispersion and distance shapes differ"));
    }
    if n_bins < 1 {
        return Err(Error::validation("need at least one bin"));
    }
    let s = disp.n_sites();
    let max_d = dist.max();
    let width = if max_d > 0.0 { max_d / n_bins as f64 } else { 1.0 };
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for i in 0..s {
        for j in (i + 1)..s {
            let d = dist.get(i, j);
            let mut k = (d / width) as usize;
            if k >= n_bins {
                k = n_bins - 1;
            }
            sums[k] += disp.get(i, j);
            counts[k] += 1;
        }
    }
    let mut bin_centers = Vec::new();
    let mut bin_means = Vec::new();
    let mut bin_counts = Vec::new();
    for k in 0..n_bins {
        if counts[k] == 0 {
            continue;
        }
        bin_centers.push((k as f64 + 0.5) * width);
        bin_means.push(sums[k] / counts[k] as f64);
        bin_counts.push(counts[k]);
    }
    Ok(BinnedVariogram {
        bin_centers,
        bin_means,
        bin_counts,
    })
}

/// Outcome of a variogram fit.
#[derive(Debug, Clone, PartialEq)]
pub struct VariogramFit {
    pub params: VariogramParams,
    pub sse: f64,
    pub converged: bool,
}

/// Sum over i<j of (v*_{ij} - gamma(d_{ij}))^2.
pub fn pair_sse(params: &VariogramParams, disp: &DispersionMatrix, dist: &DistanceMatrix) -> f64 {
    let s = disp.n_sites();
    let mut sse = 0.0;
    for i in 0..s {
        for j in (i + 1)..s {
            let g = params.phi1 * (1.0 - (-dist.get(i, j) / params.phi2).exp()) + params.phi3;
            let r = disp.get(i, j) - g;
            sse += r * r;
        }
    }
    sse
}

/// Heuristic starting point: nugget from the lowest bin, sill from the
/// highest, range a third of the maximum distance.
pub fn default_init(disp: &DispersionMatrix, dist: &DistanceMatrix) -> Result<VariogramParams> {
    let binned = bin_dispersions(disp, dist, 10)?;
    let min_b = binned.bin_means.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_b = binned.bin_means.iter().cloned().fold(0.0, f64::max);
    let phi3 = min_b.max(0.0);
    let phi1 = (max_b - phi3).max(1e-6 * max_b.max(1.0));
    let phi2 = (dist.max() / 3.0).max(1e-12);
    VariogramParams::new(phi1, phi2, phi3)
}

/// Least-squares fit of the exponential variogram over the unbinned pair
/// cloud. Positivity is kept by optimizing log-transformed parameters.
pub fn fit_variogram(
    disp: &DispersionMatrix,
    dist: &DistanceMatrix,
    init: &VariogramParams,
) -> Result<VariogramFit> {
    init.validate()?;
    let s = disp.n_sites();
    if s != dist.n_sites() {
        return Err(Error::validation("dispersion and distance shapes differ"));
    }

    let mut dists: Vec<f64> = Vec::new();
    let mut max_disp: f64 = 0.0;
    for i in 0..s {
        for j in (i + 1)..s {
            dists.push(dist.get(i, j));
            max_disp = max_disp.max(disp.get(i, j));
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dists.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * a.max(1.0));
    if dists.len() < 3 {
        return Err(Error::validation(format!(
            "need at least 3 distinct pair distances, got {}",
            dists.len()
        )));
    }

    if max_disp == 0.0 {
        // Zero field: the loss is exactly zero at phi1 = phi3 = 0, any range.
        return Ok(VariogramFit {
            params: VariogramParams {
                phi1: 0.0,
                phi2: init.phi2,
                phi3: 0.0,
            },
            sse: 0.0,
            converged: true,
        });
    }

    // Optimize x = [ln phi1, ln phi2, ln phi3].
    let floor = 1e-12 * max_disp;
    let loss = |x: &[f64]| {
        let p = VariogramParams {
            phi1: x[0].exp(),
            phi2: x[1].exp(),
            phi3: x[2].exp(),
        };
        pair_sse(&p, disp, dist)
    };
    let x0 = [
        init.phi1.max(floor).ln(),
        init.phi2.ln(),
        init.phi3.max(floor).ln(),
    ];

    let mut best: Option<crate::optim::SimplexResult> = None;
    for start in [
        x0,
        [x0[0], x0[1] - 1.2, x0[2]],
        [x0[0], x0[1] + 1.2, x0[2]],
    ] {
        let r = nelder_mead(&loss, &start, 0.4, 2000, 1e-14);
        if best.as_ref().map_or(true, |b| r.value < b.value) {
            best = Some(r);
        }
    }
    let best = best.unwrap();
    let init_sse = pair_sse(init, disp, dist);
    if init_sse < best.value {
        // Starting point already better than anything found.
        return Ok(VariogramFit {
            params: *init,
            sse: init_sse,
            converged: best.converged,
        });
    }
    let mut params = VariogramParams {
        phi1: best.x[0].exp(),
        phi2: best.x[1].exp(),
        phi3: best.x[2].exp(),
    };
    // A component driven to the floor is an exact-zero solution.
    if params.phi1 <= 2.0 * floor {
        params.phi1 = 0.0;
    }
    if params.phi3 <= 2.0 * floor {
        params.phi3 = 0.0;
    }
    let sse = pair_sse(&params, disp, dist);
    Ok(VariogramFit {
        params,
        sse,
        converged: best.converged,
    })
}

/// Observations keyed by site, sites x replicates, NaN = missing.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    site_ids: Vec<String>,
    values: DMatrix<f64>,
}

impl Observations {
    pub fn new(site_ids: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        if site_ids.len() != values.nrows() {
            return Err(Error::validation("site id count does not match value rows"));
        }
        Ok(Observations { site_ids, values })
    }

    pub fn site_ids(&self) -> &[String] {
        &self.site_ids
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n_replicates(&self) -> usize {
        self.values.ncols()
    }

    /// Rows reordered to match the given site-id order.
    pub fn aligned_to(&self, site_ids: &[String]) -> Result<DMatrix<f64>> {
        let mut rows = Vec::with_capacity(site_ids.len());
        for id in site_ids {
            let idx = self
                .site_ids
                .iter()
                .position(|s| s == id)
                .ok_or_else(|| Error::validation(format!("no observations for site '{id}'")))?;
            rows.push(idx);
        }
        Ok(DMatrix::from_fn(rows.len(), self.values.ncols(), |i, j| {
            self.values[(rows[i], j)]
        }))
    }

    pub fn subset(&self, rows: &[usize]) -> Observations {
        Observations {
            site_ids: rows.iter().map(|&i| self.site_ids[i].clone()).collect(),
            values: DMatrix::from_fn(rows.len(), self.values.ncols(), |i, j| {
                self.values[(rows[i], j)]
            }),
        }
    }

    /// Read the `site_id,replicate,value` long-format CSV. Missing cells are
    /// simply absent rows.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)
            .map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
        let headers = rdr.headers()?.clone();
        if headers.len() != 3 || &headers[0] != "site_id" || &headers[1] != "replicate" {
            return Err(Error::validation(format!(
                "{}: expected header site_id,replicate,value",
                path.display()
            )));
        }
        let mut triples: Vec<(String, usize, f64)> = Vec::new();
        let mut site_ids: Vec<String> = Vec::new();
        let mut max_rep = 0usize;
        for record in rdr.records() {
            let record = record?;
            let id = record[0].to_string();
            let rep: usize = record[1]
                .parse()
                .map_err(|_| Error::validation(format!("bad replicate '{}'", &record[1])))?;
            let v: f64 = record[2]
                .parse()
                .map_err(|_| Error::validation(format!("bad value '{}'", &record[2])))?;
            if !site_ids.contains(&id) {
                site_ids.push(id.clone());
            }
            max_rep = max_rep.max(rep);
            triples.push((id, rep, v));
        }
        if triples.is_empty() {
            return Err(Error::validation(format!("{}: no observations", path.display())));
        }
        let mut values = DMatrix::from_element(site_ids.len(), max_rep + 1, f64::NAN);
        for (id, rep, v) in triples {
            let i = site_ids.iter().position(|s| s == &id).unwrap();
            values[(i, rep)] = v;
        }
        // Drop all-NaN replicate columns (replicate indices need not be dense).
        let keep: Vec<usize> = (0..values.ncols())
            .filter(|&t| (0..values.nrows()).any(|i| !values[(i, t)].is_nan()))
            .collect();
        let values = DMatrix::from_fn(site_ids.len(), keep.len(), |i, j| values[(i, keep[j])]);
        Observations::new(site_ids, values)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["site_id", "replicate", "value"])?;
        for i in 0..self.values.nrows() {
            for t in 0..self.values.ncols() {
                let v = self.values[(i, t)];
                if v.is_nan() {
                    continue;
                }
                wtr.write_record([self.site_ids[i].clone(), t.to_string(), format!("{v}")])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{distances_of_matrix, DistanceMatrix};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(p1: f64, p2: f64, p3: f64) -> VariogramParams {
        VariogramParams::new(p1, p2, p3).unwrap()
    }

    #[test]
    fn variogram_closed_forms() {
        let p = params(1.0, 1.0, 0.0);
        assert_relative_eq!(evaluate_variogram(&p, 0.0).unwrap(), 0.0);
        assert_relative_eq!(
            evaluate_variogram(&p, 1.0).unwrap(),
            1.0 - (-1.0f64).exp(),
            epsilon = 1e-12
        );
        let p = params(2.0, 3.0, 0.5);
        assert_relative_eq!(evaluate_variogram(&p, 1e6).unwrap(), 2.5, epsilon = 1e-9);
        assert!(evaluate_variogram(&p, -1.0).is_err());
    }

    #[test]
    fn derivative_closed_forms() {
        let p = params(1.0, 1.0, 0.0);
        assert_relative_eq!(variogram_d_dh(&p, 0.0).unwrap(), 1.0);
        assert_relative_eq!(variogram_d_dh(&p, 1.0).unwrap(), (-1.0f64).exp());
    }

    // Finite-difference oracle for the distance derivative.
    #[test]
    fn derivative_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let p = params(
                rng.gen_range(0.1..5.0),
                rng.gen_range(0.1..5.0),
                rng.gen_range(0.0..2.0),
            );
            // stay where the derivative is not vanishingly small, otherwise
            // the difference quotient itself loses the digits being checked
            let h: f64 = rng.gen_range(0.01..3.0) * p.phi2;
            let eps = 1e-5 * p.phi2;
            let fd = (evaluate_variogram(&p, h + eps).unwrap()
                - evaluate_variogram(&p, h - eps).unwrap())
                / (2.0 * eps);
            let an = variogram_d_dh(&p, h).unwrap();
            assert_relative_eq!(an, fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn dispersion_direct_arithmetic() {
        // Y1=(0,2), Y2=(1,1): mean squared difference is 1.
        let values = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 1.0, 1.0]);
        let d = empirical_dispersion(&values).unwrap();
        assert_relative_eq!(d.get(0, 1), 1.0);
        assert_eq!(d.n_replicates(), 2);
    }

    #[test]
    fn dispersion_constant_field_is_zero() {
        let values = DMatrix::from_element(4, 3, 7.5);
        let d = empirical_dispersion(&values).unwrap();
        assert_eq!(d.matrix().iter().cloned().fold(0.0, f64::max), 0.0);
    }

    #[test]
    fn dispersion_shift_invariant_within_replicate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values = DMatrix::from_fn(5, 4, |_, _| rng.gen_range(-1.0..1.0));
        let d0 = empirical_dispersion(&values).unwrap();
        let mut shifted = values.clone();
        for t in 0..4 {
            let c = rng.gen_range(-10.0..10.0);
            for i in 0..5 {
                shifted[(i, t)] += c;
            }
        }
        let d1 = empirical_dispersion(&shifted).unwrap();
        for (a, b) in d0.matrix().iter().zip(d1.matrix().iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn dispersion_pairwise_complete_and_empty_pair() {
        let mut values = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 1.0, f64::NAN]);
        let d = empirical_dispersion(&values).unwrap();
        // only the first replicate is complete for the pair
        assert_relative_eq!(d.get(0, 1), 1.0);
        values[(0, 0)] = f64::NAN;
        // now site 0 has only replicate 1 and site 1 only replicate 0
        assert!(empirical_dispersion(&values).is_err());
    }

    fn line_distances(s: usize) -> DistanceMatrix {
        let coords = DMatrix::from_fn(s, 1, |i, _| i as f64);
        distances_of_matrix(&coords)
    }

    #[test]
    fn binning_single_bin_equals_global_mean() {
        let dist = line_distances(4);
        let mut v = DMatrix::zeros(4, 4);
        let vals = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut k = 0;
        for i in 0..4 {
            for j in (i + 1)..4 {
                v[(i, j)] = vals[k];
                v[(j, i)] = vals[k];
                k += 1;
            }
        }
        let disp = DispersionMatrix::from_matrix(v, 1).unwrap();
        let b = bin_dispersions(&disp, &dist, 1).unwrap();
        assert_eq!(b.bin_counts, vec![6]);
        assert_relative_eq!(b.bin_means[0], 3.5);
    }

    #[test]
    fn binning_weighted_mean_recovers_global_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = 12;
        let coords = DMatrix::from_fn(s, 2, |_, _| rng.gen_range(0.0..10.0));
        let dist = distances_of_matrix(&coords);
        let mut v = DMatrix::zeros(s, s);
        for i in 0..s {
            for j in (i + 1)..s {
                let x = rng.gen_range(0.0..4.0);
                v[(i, j)] = x;
                v[(j, i)] = x;
            }
        }
        let disp = DispersionMatrix::from_matrix(v, 1).unwrap();
        let b = bin_dispersions(&disp, &dist, 6).unwrap();
        let total: usize = b.bin_counts.iter().sum();
        assert_eq!(total, s * (s - 1) / 2);
        let weighted: f64 = b
            .bin_means
            .iter()
            .zip(&b.bin_counts)
            .map(|(m, &c)| m * c as f64)
            .sum::<f64>()
            / total as f64;
        let global = disp.matrix().sum() / 2.0 / total as f64;
        assert_relative_eq!(weighted, global, epsilon = 1e-10);
    }

    #[test]
    fn fit_recovers_exact_parameters() {
        let truth = params(1.0, 2.0, 0.1);
        let dist = line_distances(10);
        let s = 10;
        let mut v = DMatrix::zeros(s, s);
        for i in 0..s {
            for j in (i + 1)..s {
                let g = evaluate_variogram(&truth, dist.get(i, j)).unwrap();
                v[(i, j)] = g;
                v[(j, i)] = g;
            }
        }
        let disp = DispersionMatrix::from_matrix(v, 1).unwrap();
        let init = default_init(&disp, &dist).unwrap();
        let fit = fit_variogram(&disp, &dist, &init).unwrap();
        assert!(fit.sse < 1e-8, "sse {}", fit.sse);
        assert_relative_eq!(fit.params.phi1, truth.phi1, max_relative = 1e-3);
        assert_relative_eq!(fit.params.phi2, truth.phi2, max_relative = 1e-3);
        assert_relative_eq!(fit.params.phi3, truth.phi3, max_relative = 1e-3);
    }

    #[test]
    fn fit_zero_dispersions() {
        let dist = line_distances(5);
        let disp = DispersionMatrix::from_matrix(DMatrix::zeros(5, 5), 1).unwrap();
        let fit = fit_variogram(&disp, &dist, &params(1.0, 1.0, 0.1)).unwrap();
        assert_eq!(fit.params.phi1, 0.0);
        assert_eq!(fit.params.phi3, 0.0);
        assert_eq!(fit.sse, 0.0);
    }

    #[test]
    fn fit_is_locally_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dist = line_distances(8);
        let s = 8;
        let truth = params(2.0, 1.5, 0.3);
        let mut v = DMatrix::zeros(s, s);
        for i in 0..s {
            for j in (i + 1)..s {
                let g = evaluate_variogram(&truth, dist.get(i, j)).unwrap()
                    + rng.gen_range(-0.05..0.05);
                let g = g.max(0.0);
                v[(i, j)] = g;
                v[(j, i)] = g;
            }
        }
        let disp = DispersionMatrix::from_matrix(v, 1).unwrap();
        let init = default_init(&disp, &dist).unwrap();
        let fit = fit_variogram(&disp, &dist, &init).unwrap();
        assert!(fit.sse <= pair_sse(&init, &disp, &dist) + 1e-12);
        for k in 0..3 {
            for sign in [-1.0, 1.0] {
                let mut p = fit.params;
                match k {
                    0 => p.phi1 *= 1.0 + sign * 0.01,
                    1 => p.phi2 *= 1.0 + sign * 0.01,
                    _ => p.phi3 *= 1.0 + sign * 0.01,
                }
                assert!(pair_sse(&p, &disp, &dist) >= fit.sse - 1e-10);
            }
        }
    }

    #[test]
    fn fit_rejects_degenerate_distances() {
        // equilateral triangle: a single distinct distance
        let coords = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.5, 0.75f64.sqrt()]);
        let dist = distances_of_matrix(&coords);
        let mut v = DMatrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    v[(i, j)] = 1.0;
                }
            }
        }
        let disp = DispersionMatrix::from_matrix(v, 1).unwrap();
        assert!(fit_variogram(&disp, &dist, &params(1.0, 1.0, 0.0)).is_err());
    }

    #[test]
    fn variogram_monotone_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let p = params(
                rng.gen_range(0.0..3.0),
                rng.gen_range(0.1..4.0),
                rng.gen_range(0.0..1.0),
            );
            let mut prev = -1.0;
            for k in 0..40 {
                let h = k as f64 * 0.5;
                let g = evaluate_variogram(&p, h).unwrap();
                assert!(g >= prev - 1e-12);
                assert!(g <= p.phi1 + p.phi3 + 1e-12);
                prev = g;
            }
        }
    }

    #[test]
    fn observations_csv_round_trip_with_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.csv");
        let mut values = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        values[(1, 1)] = f64::NAN;
        let obs = Observations::new(vec!["a".into(), "b".into()], values).unwrap();
        obs.write_csv(&path).unwrap();
        let back = Observations::read_csv(&path).unwrap();
        assert_eq!(back.site_ids(), obs.site_ids());
        for i in 0..2 {
            for t in 0..3 {
                let (x, y) = (obs.values()[(i, t)], back.values()[(i, t)]);
                assert!(x == y || (x.is_nan() && y.is_nan()));
            }
        }
    }
}
