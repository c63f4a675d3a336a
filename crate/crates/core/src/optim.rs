//! Bounded Nelder–Mead minimization.

/// Outcome of a minimization.
#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct NelderMead {
    /// Stop when the spread of simplex values falls below this.
    pub ftol: f64,
    pub max_evals: usize,
    /// Initial simplex step as a fraction of each box width.
    pub initial_step: f64,
    /// Fresh simplices built around the incumbent after convergence.
    pub restarts: usize,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self {
            ftol: 1e-8,
            max_evals: 2000,
            initial_step: 0.1,
            restarts: 0,
        }
    }
}

fn clamp_into(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, lo), hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(*lo, *hi);
    }
}

impl NelderMead {
    /// Minimizes `f` over the box `[lower, upper]` starting at `start`.
    ///
    /// Vertices are projected into the box; non-finite objective values are
    /// treated as `+∞`.
    pub fn minimize<F>(&self, mut f: F, start: &[f64], lower: &[f64], upper: &[f64]) -> Minimum
    where
        F: FnMut(&[f64]) -> f64,
    {
        let mut best = self.minimize_once(&mut f, start, lower, upper, self.max_evals);
        for _ in 0..self.restarts {
            let left = self.max_evals.saturating_sub(best.evaluations);
            if left <= start.len() + 1 {
                break;
            }
            let next = self.minimize_once(&mut f, &best.x, lower, upper, left);
            let improved = next.value < best.value - self.ftol * (1.0 + best.value.abs());
            let evaluations = best.evaluations + next.evaluations;
            if next.value <= best.value {
                best = Minimum { evaluations, ..next };
            } else {
                best.evaluations = evaluations;
            }
            if !improved {
                break;
            }
        }
        best
    }

    fn minimize_once<F>(&self, f: &mut F, start: &[f64], lower: &[f64], upper: &[f64], max_evals: usize) -> Minimum
    where
        F: FnMut(&[f64]) -> f64,
    {
        let n = start.len();
        let mut evals = 0usize;
        let mut eval = |x: &[f64], evals: &mut usize| {
            *evals += 1;
            let v = f(x);
            if v.is_finite() { v } else { f64::INFINITY }
        };

        let mut x0 = start.to_vec();
        clamp_into(&mut x0, lower, upper);
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        let v0 = eval(&x0, &mut evals);
        simplex.push((x0.clone(), v0));
        for k in 0..n {
            let mut x = x0.clone();
            let step = self.initial_step * (upper[k] - lower[k]);
            // Step away from the nearer bound.
            x[k] = if x0[k] + step <= upper[k] { x0[k] + step } else { x0[k] - step };
            clamp_into(&mut x, lower, upper);
            let v = eval(&x, &mut evals);
            simplex.push((x, v));
        }

        let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
        let mut converged = false;
        while evals < max_evals {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let best = simplex[0].1;
            let worst = simplex[n].1;
            if (worst - best).abs() <= self.ftol * (1.0 + best.abs()) && worst.is_finite() {
                converged = true;
                break;
            }
            let mut centroid = vec![0.0; n];
            for (x, _) in &simplex[..n] {
                for k in 0..n {
                    centroid[k] += x[k] / n as f64;
                }
            }
            let along = |t: f64, from: &[f64]| -> Vec<f64> {
                let mut p: Vec<f64> = (0..n).map(|k| centroid[k] + t * (from[k] - centroid[k])).collect();
                clamp_into(&mut p, lower, upper);
                p
            };
            let worst_x = simplex[n].0.clone();
            let xr = along(-alpha, &worst_x);
            let fr = eval(&xr, &mut evals);
            if fr < simplex[0].1 {
                let xe = along(-gamma, &worst_x);
                let fe = eval(&xe, &mut evals);
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
            } else {
                let (xc, fc) = if fr < worst {
                    let xc = along(-rho, &worst_x);
                    let fc = eval(&xc, &mut evals);
                    (xc, fc)
                } else {
                    let xc = along(rho, &worst_x);
                    let fc = eval(&xc, &mut evals);
                    (xc, fc)
                };
                if fc < worst.min(fr) {
                    simplex[n] = (xc, fc);
                } else {
                    let best_x = simplex[0].0.clone();
                    for item in simplex.iter_mut().skip(1) {
                        let mut x: Vec<f64> =
                            (0..n).map(|k| best_x[k] + sigma * (item.0[k] - best_x[k])).collect();
                        clamp_into(&mut x, lower, upper);
                        let v = eval(&x, &mut evals);
                        *item = (x, v);
                    }
                }
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (x, value) = simplex.swap_remove(0);
        Minimum {
            x,
            value,
            evaluations: evals,
            converged,
        }
    }
}
