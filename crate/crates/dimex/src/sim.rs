//! Gaussian-process simulation and analytic covariance oracles. Used both to
//! generate synthetic scenarios for the CLI and as independent references for
//! estimator tests.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geo::{expand, pairwise_distances, ExpandedLocations, Locations};
use crate::variogram::VariogramParams;

/// How to build the covariance matrix over a set of expanded locations.
#[derive(Debug, Clone)]
pub enum CovarianceSpec {
    /// C(h) = phi1 exp(-h/phi2), nugget phi3 on the diagonal.
    ExponentialFromVariogram(VariogramParams),
    /// C(u, v) = exp(-sum_k |u_k - v_k| / range_k), separable per coordinate.
    ProductExponential { ranges: Vec<f64> },
    /// Externally supplied matrix, checked for symmetry.
    CustomMatrix(DMatrix<f64>),
}

impl CovarianceSpec {
    /// Materialize the s x s covariance matrix for the given locations.
    pub fn matrix(&self, locs: &ExpandedLocations) -> Result<DMatrix<f64>> {
        let s = locs.n_sites();
        match self {
            CovarianceSpec::ExponentialFromVariogram(p) => {
                p.validate()?;
                let dist = pairwise_distances(locs)?;
                let mut c = DMatrix::from_fn(s, s, |i, j| {
                    p.phi1 * (-dist.get(i, j) / p.phi2).exp()
                });
                for i in 0..s {
                    c[(i, i)] += p.phi3;
                }
                Ok(c)
            }
            CovarianceSpec::ProductExponential { ranges } => {
                let full = locs.full_matrix();
                if ranges.len() != full.ncols() {
                    return Err(Error::validation(format!(
                        "{} ranges for {} coordinate dimensions",
                        ranges.len(),
                        full.ncols()
                    )));
                }
                if ranges.iter().any(|&r| r <= 0.0 || !r.is_finite()) {
                    return Err(Error::validation("ranges must be positive"));
                }
                Ok(DMatrix::from_fn(s, s, |i, j| {
                    let mut l1 = 0.0;
                    for k in 0..full.ncols() {
                        l1 += (full[(i, k)] - full[(j, k)]).abs() / ranges[k];
                    }
                    (-l1).exp()
                }))
            }
            CovarianceSpec::CustomMatrix(m) => {
                if m.nrows() != s || m.ncols() != s {
                    return Err(Error::validation("custom covariance shape mismatch"));
                }
                for i in 0..s {
                    for j in 0..s {
                        if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * (1.0 + m[(i, j)].abs()) {
                            return Err(Error::validation("custom covariance not symmetric"));
                        }
                    }
                }
                Ok(m.clone())
            }
        }
    }
}

/// Symmetric factor F with F F^T ~= C, trying Cholesky first and falling back
/// to an eigendecomposition for near-singular matrices. Negative eigenvalues
/// beyond the jitter budget are an error.
pub fn symmetric_factor(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = c.nrows();
    let budget = 1e-8 * c.trace() / s as f64;
    if let Some(chol) = c.clone().cholesky() {
        return Ok(chol.l());
    }
    if budget > 0.0 {
        let mut jittered = c.clone();
        for i in 0..s {
            jittered[(i, i)] += budget;
        }
        if let Some(chol) = jittered.cholesky() {
            return Ok(chol.l());
        }
    }
    let eig = SymmetricEigen::new(c.clone());
    let min_ev = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_ev < -budget.max(1e-300) {
        return Err(Error::numeric(format!(
            "covariance not positive semidefinite: smallest eigenvalue {min_ev:.3e} exceeds jitter budget {budget:.3e}"
        )));
    }
    let mut f = eig.eigenvectors;
    for (k, ev) in eig.eigenvalues.iter().enumerate() {
        let scale = ev.max(0.0).sqrt();
        for i in 0..s {
            f[(i, k)] *= scale;
        }
    }
    Ok(f)
}

/// Mean-zero GP draws: sites x realizations, deterministic per seed.
pub fn simulate_gp(
    cov: &CovarianceSpec,
    locs: &ExpandedLocations,
    n_realizations: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if n_realizations == 0 {
        return Err(Error::validation("need at least one realization"));
    }
    let c = cov.matrix(locs)?;
    let f = symmetric_factor(&c)?;
    let s = locs.n_sites();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // column-major fill so the draw stream is independent of how the caller
    // later slices realizations
    let mut white = DMatrix::zeros(s, n_realizations);
    for t in 0..n_realizations {
        for i in 0..s {
            white[(i, t)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(&f * white)
}

/// Points on the ellipsoid x^2/a^2 + y^2/b^2 + z^2/c^2 = 1, placed by a
/// golden-angle lattice (even coverage, deterministic per seed).
pub fn ellipsoid_locations(s: usize, semi_axes: (f64, f64, f64), seed: u64) -> Result<Locations> {
    let (a, b, c) = semi_axes;
    if s < 4 {
        return Err(Error::validation("need at least 4 ellipsoid points"));
    }
    if a <= 0.0 || b <= 0.0 || c <= 0.0 {
        return Err(Error::validation("semi-axes must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset: f64 = rng.gen_range(0.0..1.0);
    let golden = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut coords = DMatrix::zeros(s, 3);
    for i in 0..s {
        // stratified in cos(polar), golden-angle in azimuth
        let u = (i as f64 + 0.5) / s as f64;
        let cos_theta = 1.0 - 2.0 * u;
        let sin_theta = (1.0 - cos_theta * cos_theta).sqrt();
        let phi = 2.0 * std::f64::consts::PI * ((i as f64 / golden + offset) % 1.0);
        coords[(i, 0)] = a * sin_theta * phi.cos();
        coords[(i, 1)] = b * sin_theta * phi.sin();
        coords[(i, 2)] = c * cos_theta;
    }
    Locations::new(coords, (1..=s).map(|i| i.to_string()).collect())
}

/// Covariance of the 1-D field Y'(x) = Y([x, x^2]) when Y has the separable
/// covariance exp(-|dx| - |dz|): substitution gives exp(-|dx| (1 + |x_i + x_j|)).
pub fn perrin_reduced_cov(x_i: f64, x_j: f64) -> f64 {
    (-(x_i - x_j).abs() * (1.0 + (x_i + x_j).abs())).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::expand_zero;
    use approx::assert_relative_eq;

    #[test]
    fn identity_covariance_sample_variance() {
        let coords = DMatrix::from_fn(5, 2, |i, j| (i * 2 + j) as f64);
        let locs = expand_zero(Locations::from_coords(coords).unwrap());
        let cov = CovarianceSpec::CustomMatrix(DMatrix::identity(5, 5));
        let n = 100_000;
        let draws = simulate_gp(&cov, &locs, n, 42).unwrap();
        for i in 0..5 {
            let row = draws.row(i);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            assert!((var - 1.0).abs() < 0.05, "variance {var}");
        }
    }

    #[test]
    fn same_seed_same_draws() {
        let coords = DMatrix::from_fn(4, 2, |i, j| (i + j) as f64);
        let locs = expand_zero(Locations::from_coords(coords).unwrap());
        let p = VariogramParams::new(1.0, 1.0, 0.0).unwrap();
        let cov = CovarianceSpec::ExponentialFromVariogram(p);
        let a = simulate_gp(&cov, &locs, 10, 7).unwrap();
        let b = simulate_gp(&cov, &locs, 10, 7).unwrap();
        assert_eq!(a, b);
        let c = simulate_gp(&cov, &locs, 10, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_covariance_gives_zero_draws() {
        let coords = DMatrix::from_fn(3, 2, |i, j| (i + j) as f64);
        let locs = expand_zero(Locations::from_coords(coords).unwrap());
        let cov = CovarianceSpec::CustomMatrix(DMatrix::zeros(3, 3));
        let draws = simulate_gp(&cov, &locs, 5, 1).unwrap();
        assert!(draws.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_psd_reports_eigenvalue() {
        let mut m = DMatrix::identity(3, 3);
        m[(0, 1)] = 2.0;
        m[(1, 0)] = 2.0;
        let coords = DMatrix::from_fn(3, 2, |i, j| (i + j) as f64);
        let locs = expand_zero(Locations::from_coords(coords).unwrap());
        let err = simulate_gp(&CovarianceSpec::CustomMatrix(m), &locs, 2, 1).unwrap_err();
        assert!(err.to_string().contains("eigenvalue"));
    }

    #[test]
    fn ellipsoid_points_on_surface() {
        let (a, b, c) = (1.0, 1.0, 0.5);
        let locs = ellipsoid_locations(100, (a, b, c), 3).unwrap();
        for row in locs.coords().row_iter() {
            let v = row[0] * row[0] / (a * a) + row[1] * row[1] / (b * b) + row[2] * row[2] / (c * c);
            assert_relative_eq!(v, 1.0, epsilon = 1e-12);
            // disk projection
            assert!((row[0] * row[0] + row[1] * row[1]).sqrt() <= a + 1e-12);
        }
        assert_eq!(locs.n_sites(), 100);
        assert_eq!(locs.n_dims(), 3);
    }

    #[test]
    fn ellipsoid_deterministic_per_seed() {
        let a = ellipsoid_locations(50, (1.0, 1.0, 0.5), 9).unwrap();
        let b = ellipsoid_locations(50, (1.0, 1.0, 0.5), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn perrin_zero_lag_and_hand_case() {
        assert_relative_eq!(perrin_reduced_cov(0.7, 0.7), 1.0);
        assert_relative_eq!(perrin_reduced_cov(1.0, -1.0), (-2.0f64).exp(), epsilon = 1e-15);
    }

    // Brute-force substitution into the full-space covariance exp(-|dx|-|dz|)
    // with z = x^2.
    #[test]
    fn perrin_matches_direct_substitution() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10_000 {
            let xi: f64 = rng.gen_range(-3.0..3.0);
            let xj: f64 = rng.gen_range(-3.0..3.0);
            let direct = (-(xi - xj).abs()).exp() * (-(xi * xi - xj * xj).abs()).exp();
            assert_relative_eq!(perrin_reduced_cov(xi, xj), direct, epsilon = 1e-12);
        }
    }

    #[test]
    fn perrin_matrix_is_psd() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let xs: Vec<f64> = (0..50).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let m = DMatrix::from_fn(50, 50, |i, j| perrin_reduced_cov(xs[i], xs[j]));
        assert!(symmetric_factor(&m).is_ok());
    }

    #[test]
    fn product_exponential_matches_manual() {
        let coords = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 2.0]);
        let locs = expand_zero(Locations::from_coords(coords).unwrap());
        let cov = CovarianceSpec::ProductExponential { ranges: vec![1.0, 1.0] };
        let m = cov.matrix(&locs).unwrap();
        assert_relative_eq!(m[(0, 1)], (-3.0f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(m[(0, 0)], 1.0);
    }
}

/// Named synthetic scenarios emitted by the CLI `simulate` command. Each
/// returns 2-D geographic locations together with replicated observations,
/// generated from a ground truth that lives in a higher dimension (except the
/// stationary control).
pub mod scenario {
    use super::*;
    use crate::variogram::Observations;

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Scenario {
        /// GP on a 3-D ellipsoid surface, observed through its 2-D disk
        /// projection.
        Ellipsoid,
        /// Stationary GP on 2-D scattered sites.
        Stationary,
        /// Two urban clusters sharing a latent similarity dimension, plus
        /// rural scatter.
        Cities,
    }

    impl std::str::FromStr for Scenario {
        type Err = Error;
        fn from_str(s: &str) -> Result<Self> {
            match s {
                "ellipsoid" => Ok(Scenario::Ellipsoid),
                "stationary" => Ok(Scenario::Stationary),
                "cities" => Ok(Scenario::Cities),
                other => Err(Error::validation(format!("unknown scenario '{other}'"))),
            }
        }
    }

    /// Generate (2-D locations, observations) for a scenario.
    pub fn generate(
        which: Scenario,
        s: usize,
        n_realizations: usize,
        seed: u64,
    ) -> Result<(Locations, Observations)> {
        if n_realizations == 0 {
            return Err(Error::validation("need at least one realization"));
        }
        match which {
            Scenario::Ellipsoid => {
                let locs3 = ellipsoid_locations(s, (1.0, 1.0, 0.5), seed)?;
                // range comparable to the vertical axis keeps cross-sheet
                // correlations partial, which the 2-D projection cannot
                // explain with any stationary variogram
                let params = VariogramParams::new(1.0, 0.8, 0.0)?;
                let cov = CovarianceSpec::ExponentialFromVariogram(params);
                let draws = simulate_gp(
                    &cov,
                    &crate::geo::expand_zero(locs3.clone()),
                    n_realizations,
                    seed.wrapping_add(1),
                )?;
                let proj = DMatrix::from_fn(s, 2, |i, j| locs3.coords()[(i, j)]);
                let locs2 = Locations::new(proj, locs3.site_ids().to_vec())?;
                let obs = Observations::new(locs2.site_ids().to_vec(), draws)?;
                Ok((locs2, obs))
            }
            Scenario::Stationary => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let coords = DMatrix::from_fn(s, 2, |_, _| rng.gen_range(0.0..1.0));
                let locs = Locations::from_coords(coords)?;
                let params = VariogramParams::new(1.0, 0.3, 0.0)?;
                let cov = CovarianceSpec::ExponentialFromVariogram(params);
                let draws = simulate_gp(
                    &cov,
                    &crate::geo::expand_zero(locs.clone()),
                    n_realizations,
                    seed.wrapping_add(1),
                )?;
                let obs = Observations::new(locs.site_ids().to_vec(), draws)?;
                Ok((locs, obs))
            }
            Scenario::Cities => {
                if s < 8 {
                    return Err(Error::validation("cities scenario needs at least 8 sites"));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut coords = DMatrix::zeros(s, 2);
                let mut urban = vec![0.0; s];
                let centers = [(0.2, 0.2), (0.8, 0.8)];
                for i in 0..s {
                    if i < s / 2 {
                        // urban: tight cluster around one of two distant centers
                        let (cx, cy) = centers[i % 2];
                        coords[(i, 0)] = cx + rng.gen_range(-0.05..0.05);
                        coords[(i, 1)] = cy + rng.gen_range(-0.05..0.05);
                        urban[i] = 0.0;
                    } else {
                        coords[(i, 0)] = rng.gen_range(0.0..1.0);
                        coords[(i, 1)] = rng.gen_range(0.0..1.0);
                        urban[i] = 0.6;
                    }
                }
                let locs = Locations::from_coords(coords)?;
                let latent = DMatrix::from_fn(s, 1, |i, _| urban[i]);
                let hidden = expand(locs.clone(), latent)?;
                let params = VariogramParams::new(1.0, 0.4, 0.0)?;
                let cov = CovarianceSpec::ExponentialFromVariogram(params);
                let draws = simulate_gp(&cov, &hidden, n_realizations, seed.wrapping_add(1))?;
                let obs = Observations::new(locs.site_ids().to_vec(), draws)?;
                Ok((locs, obs))
            }
        }
    }
}
