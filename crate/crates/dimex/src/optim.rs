//! Small derivative-free simplex minimizer used by the variogram fit and the
//! warping baseline. Standard Nelder-Mead with adaptive restarts kept out of
//! scope; callers restart explicitly if they need to.

/// Result of a simplex minimization.
pub(crate) struct SimplexResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub converged: bool,
}

/// Minimize `f` starting from `x0` with initial simplex scale `scale`.
pub(crate) fn nelder_mead<F>(f: F, x0: &[f64], scale: f64, max_iters: usize, tol: f64) -> SimplexResult
where
    F: Fn(&[f64]) -> f64,
{
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += if v[i].abs() > 1e-12 { scale * v[i].abs() } else { scale };
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut converged = false;

    for _ in 0..max_iters {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
        let best = order[0];
        let worst = order[n];
        let second_worst = order[n - 1];

        if (values[worst] - values[best]).abs() <= tol * (1.0 + values[best].abs()) {
            converged = true;
            break;
        }

        // centroid of all but the worst vertex
        let mut centroid = vec![0.0; n];
        for &i in order.iter().take(n) {
            for k in 0..n {
                centroid[k] += simplex[i][k] / n as f64;
            }
        }

        let reflect: Vec<f64> = (0..n)
            .map(|k| centroid[k] + alpha * (centroid[k] - simplex[worst][k]))
            .collect();
        let f_reflect = f(&reflect);

        if f_reflect < values[best] {
            let expandv: Vec<f64> = (0..n)
                .map(|k| centroid[k] + gamma * (reflect[k] - centroid[k]))
                .collect();
            let f_expand = f(&expandv);
            if f_expand < f_reflect {
                simplex[worst] = expandv;
                values[worst] = f_expand;
            } else {
                simplex[worst] = reflect;
                values[worst] = f_reflect;
            }
        } else if f_reflect < values[second_worst] {
            simplex[worst] = reflect;
            values[worst] = f_reflect;
        } else {
            let contract: Vec<f64> = (0..n)
                .map(|k| centroid[k] + rho * (simplex[worst][k] - centroid[k]))
                .collect();
            let f_contract = f(&contract);
            if f_contract < values[worst] {
                simplex[worst] = contract;
                values[worst] = f_contract;
            } else {
                // shrink toward the best vertex
                let best_v = simplex[best].clone();
                for i in 0..=n {
                    if i == best {
                        continue;
                    }
                    for k in 0..n {
                        simplex[i][k] = best_v[k] + sigma * (simplex[i][k] - best_v[k]);
                    }
                    values[i] = f(&simplex[i]);
                }
            }
        }
    }

    let mut best = 0;
    for i in 1..=n {
        if values[i] < values[best] {
            best = i;
        }
    }
    SimplexResult {
        x: simplex[best].clone(),
        value: values[best],
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn minimizes_quadratic() {
        let f = |x: &[f64]| (x[0] - 1.5).powi(2) + 3.0 * (x[1] + 0.5).powi(2);
        let r = nelder_mead(f, &[0.0, 0.0], 0.5, 500, 1e-12);
        assert!(r.converged);
        assert_relative_eq!(r.x[0], 1.5, epsilon = 1e-4);
        assert_relative_eq!(r.x[1], -0.5, epsilon = 1e-4);
    }

    #[test]
    fn minimizes_rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let r = nelder_mead(f, &[-1.2, 1.0], 0.5, 5000, 1e-14);
        assert!(r.value < 1e-8);
    }
}
