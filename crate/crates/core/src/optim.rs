//! Derivative-free minimizers: Nelder-Mead simplex and golden-section line
//! search. Objective evaluations returning NaN or infinity are treated as
//! +inf, which lets callers encode box constraints by rejection.

/// Outcome of a minimization run.
#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f_min: f64,
    pub n_iter: usize,
    pub n_eval: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct NelderMead {
    pub max_iter: usize,
    /// Terminate when the simplex diameter (max vertex distance) drops
    /// below this.
    pub tol_diam: f64,
    /// Additional termination on the spread of vertex values.
    pub tol_f: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        NelderMead {
            max_iter: 2000,
            tol_diam: 1e-6,
            tol_f: 0.0,
        }
    }
}

fn guard(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

impl NelderMead {
    /// Minimizes `f` starting from `x0`; the initial simplex offsets each
    /// coordinate by the corresponding `step` entry.
    pub fn minimize<F: FnMut(&[f64]) -> f64>(
        &self,
        mut f: F,
        x0: &[f64],
        step: &[f64],
    ) -> OptimResult {
        assert_eq!(x0.len(), step.len());
        let dim = x0.len();
        assert!(dim > 0);
        let mut n_eval = 0usize;
        let mut eval = |x: &[f64], n_eval: &mut usize| {
            *n_eval += 1;
            guard(f(x))
        };

        let mut verts: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
        verts.push(x0.to_vec());
        for i in 0..dim {
            let mut v = x0.to_vec();
            v[i] += if step[i] != 0.0 { step[i] } else { 1e-3 };
            verts.push(v);
        }
        let mut fv: Vec<f64> = verts.iter().map(|v| eval(v, &mut n_eval)).collect();

        let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
        let mut n_iter = 0;
        let mut converged = false;
        while n_iter < self.max_iter {
            n_iter += 1;
            // Order vertices by value.
            let mut idx: Vec<usize> = (0..=dim).collect();
            idx.sort_by(|&a, &b| fv[a].partial_cmp(&fv[b]).unwrap_or(std::cmp::Ordering::Equal));
            let verts2: Vec<Vec<f64>> = idx.iter().map(|&i| verts[i].clone()).collect();
            let fv2: Vec<f64> = idx.iter().map(|&i| fv[i]).collect();
            verts = verts2;
            fv = fv2;

            // Convergence: simplex diameter and value spread.
            let mut diam: f64 = 0.0;
            for i in 1..=dim {
                let d: f64 = verts[0]
                    .iter()
                    .zip(&verts[i])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                diam = diam.max(d);
            }
            let spread = fv[dim] - fv[0];
            if diam < self.tol_diam || (self.tol_f > 0.0 && spread.abs() < self.tol_f) {
                converged = true;
                break;
            }

            // Centroid of all but the worst vertex.
            let mut cen = vec![0.0; dim];
            for v in verts.iter().take(dim) {
                for (c, x) in cen.iter_mut().zip(v) {
                    *c += x / dim as f64;
                }
            }

            let reflect: Vec<f64> = cen
                .iter()
                .zip(&verts[dim])
                .map(|(c, w)| c + alpha * (c - w))
                .collect();
            let f_r = eval(&reflect, &mut n_eval);

            if f_r < fv[0] {
                // Try expanding further.
                let expand: Vec<f64> = cen
                    .iter()
                    .zip(&verts[dim])
                    .map(|(c, w)| c + gamma * (c - w))
                    .collect();
                let f_e = eval(&expand, &mut n_eval);
                if f_e < f_r {
                    verts[dim] = expand;
                    fv[dim] = f_e;
                } else {
                    verts[dim] = reflect;
                    fv[dim] = f_r;
                }
            } else if f_r < fv[dim - 1] {
                verts[dim] = reflect;
                fv[dim] = f_r;
            } else {
                // Contract toward the better of worst/reflected.
                let (base, f_base) = if f_r < fv[dim] {
                    (reflect.clone(), f_r)
                } else {
                    (verts[dim].clone(), fv[dim])
                };
                let contract: Vec<f64> = cen
                    .iter()
                    .zip(base.iter())
                    .map(|(c, w)| c + rho * (w - c))
                    .collect();
                let f_c = eval(&contract, &mut n_eval);
                if f_c < f_base {
                    verts[dim] = contract;
                    fv[dim] = f_c;
                } else {
                    // Shrink everything toward the best vertex.
                    let best = verts[0].clone();
                    for i in 1..=dim {
                        for (x, b) in verts[i].iter_mut().zip(&best) {
                            *x = b + sigma * (*x - b);
                        }
                        fv[i] = eval(&verts[i].clone(), &mut n_eval);
                    }
                }
            }
        }

        let mut best = 0;
        for i in 1..=dim {
            if fv[i] < fv[best] {
                best = i;
            }
        }
        OptimResult {
            x: verts[best].clone(),
            f_min: fv[best],
            n_iter,
            n_eval,
            converged,
        }
    }
}

/// Golden-section minimization of a unimodal function on [a, b].
/// Returns (argmin, min).
pub fn golden_section_min<F: FnMut(f64) -> f64>(
    mut f: F,
    mut a: f64,
    mut b: f64,
    tol_x: f64,
    max_iter: usize,
) -> (f64, f64) {
    assert!(b > a);
    let invphi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut c = b - invphi * (b - a);
    let mut d = a + invphi * (b - a);
    let mut fc = guard(f(c));
    let mut fd = guard(f(d));
    for _ in 0..max_iter {
        if (b - a).abs() < tol_x {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - invphi * (b - a);
            fc = guard(f(c));
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + invphi * (b - a);
            fd = guard(f(d));
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rosenbrock_converges() {
        let rosen = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        };
        let nm = NelderMead {
            max_iter: 5000,
            tol_diam: 1e-8,
            tol_f: 0.0,
        };
        let res = nm.minimize(rosen, &[-1.2, 1.0], &[0.5, 0.5]);
        assert!(res.converged);
        assert_relative_eq!(res.x[0], 1.0, epsilon = 1e-3);
        assert_relative_eq!(res.x[1], 1.0, epsilon = 1e-3);
    }

    #[test]
    fn quadratic_in_four_dims() {
        let target = [1.0, -2.0, 0.5, 3.0];
        let f = |x: &[f64]| -> f64 {
            x.iter()
                .zip(&target)
                .map(|(a, t)| (a - t) * (a - t))
                .sum()
        };
        let res = NelderMead::default().minimize(f, &[0.0; 4], &[0.25; 4]);
        assert!(res.converged);
        for (got, want) in res.x.iter().zip(&target) {
            assert_relative_eq!(got, want, epsilon = 1e-4);
        }
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let f = |x: &[f64]| x[0] * x[0];
        let nm = NelderMead {
            max_iter: 3,
            tol_diam: 1e-12,
            tol_f: 0.0,
        };
        let res = nm.minimize(f, &[10.0], &[1.0]);
        assert!(!res.converged);
    }

    #[test]
    fn infinite_objective_regions_avoided() {
        // Constraint x > 0 encoded by rejection.
        let f = |x: &[f64]| {
            if x[0] <= 0.0 {
                f64::INFINITY
            } else {
                (x[0].ln() - 1.0).powi(2)
            }
        };
        let res = NelderMead::default().minimize(f, &[0.5, ], &[0.3]);
        assert!(res.converged);
        assert_relative_eq!(res.x[0], std::f64::consts::E, epsilon = 1e-3);
    }

    #[test]
    fn golden_section_parabola() {
        let (x, fx) = golden_section_min(|x| (x - 2.3) * (x - 2.3) + 0.7, 0.0, 10.0, 1e-9, 200);
        assert_relative_eq!(x, 2.3, epsilon = 1e-6);
        assert_relative_eq!(fx, 0.7, epsilon = 1e-10);
    }

    #[test]
    fn golden_section_cosine() {
        let (x, _) = golden_section_min(|x| x.cos(), 2.0, 4.0, 1e-10, 200);
        assert_relative_eq!(x, std::f64::consts::PI, epsilon = 1e-7);
    }
}
