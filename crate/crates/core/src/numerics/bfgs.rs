//! Dense BFGS with Armijo backtracking.

use super::NumericsError;

const ARMIJO_C1: f64 = 1e-4;
const SHRINK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 60;

/// Result of [`bfgs_minimize`].
#[derive(Debug, Clone, PartialEq)]
pub struct BfgsReport {
    pub x_star: Vec<f64>,
    pub f_star: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value at the start and after every accepted step.
    pub f_history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimize a smooth objective. `objective` returns the value and gradient.
///
/// Steps are accepted by Armijo backtracking (c₁ = 1e-4, halving from a unit
/// step); an accepted step is then refined by one secant step along the same
/// direction when that lowers the objective further.
///
/// Stops when the gradient norm drops to `grad_tol`, after `max_iter` steps,
/// or when the line search cannot make further progress in floating point.
pub fn bfgs_minimize<F>(
    mut objective: F,
    x0: &[f64],
    grad_tol: f64,
    max_iter: usize,
) -> Result<BfgsReport, NumericsError>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if !(grad_tol > 0.0) {
        return Err(NumericsError::InvalidArgument("grad_tol must be positive".into()));
    }
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut f, mut g) = objective(&x);
    if !f.is_finite() || g.len() != n || g.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::NonFiniteObjective);
    }

    // inverse Hessian approximation, row-major
    let mut h = identity(n);
    let mut f_history = vec![f];
    let mut iterations = 0;
    let mut first_step = true;

    while iterations < max_iter && norm(&g) > grad_tol {
        let mut p: Vec<f64> = mat_vec(&h, &g, n).iter().map(|v| -v).collect();
        let mut slope = dot(&g, &p);
        if slope >= 0.0 {
            // not a descent direction; fall back to steepest descent
            h = identity(n);
            p = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<f64> = x.iter().zip(&p).map(|(xi, pi)| xi + alpha * pi).collect();
            let (ft, gt) = objective(&trial);
            let finite = ft.is_finite() && gt.iter().all(|v| v.is_finite());
            if finite && ft <= f + ARMIJO_C1 * alpha * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            alpha *= SHRINK;
        }
        let Some((mut x_new, mut f_new, mut g_new)) = accepted else {
            break;
        };
        // Secant refinement: minimizer of the quadratic whose slope matches
        // both directional derivatives. Exact on quadratics.
        let slope_new = dot(&g_new, &p);
        if slope_new.abs() > 1e-3 * slope.abs() && slope_new != slope {
            let alpha_sec = alpha * slope / (slope - slope_new);
            if alpha_sec.is_finite() && alpha_sec > 0.0 && alpha_sec <= 4.0 * alpha {
                let trial: Vec<f64> =
                    x.iter().zip(&p).map(|(xi, pi)| xi + alpha_sec * pi).collect();
                let (ft, gt) = objective(&trial);
                let finite = ft.is_finite() && gt.iter().all(|v| v.is_finite());
                if finite && ft < f_new && ft <= f + ARMIJO_C1 * alpha_sec * slope {
                    x_new = trial;
                    f_new = ft;
                    g_new = gt;
                }
            }
        }
        iterations += 1;

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if first_step {
                // scale the initial identity to the observed curvature
                let scale = sy / dot(&y, &y);
                h.iter_mut().for_each(|v| *v *= scale);
                first_step = false;
            }
            bfgs_update(&mut h, &s, &y, sy, n);
        } else {
            h = identity(n);
            first_step = true;
        }

        x = x_new;
        f = f_new;
        g = g_new;
        f_history.push(f);
    }

    let grad_norm = norm(&g);
    Ok(BfgsReport {
        x_star: x,
        f_star: f,
        grad_norm,
        iterations,
        converged: grad_norm <= grad_tol,
        f_history,
    })
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn mat_vec(m: &[f64], v: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| dot(&m[i * n..(i + 1) * n], v)).collect()
}

/// H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ, expanded to avoid n³ work.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64, n: usize) {
    let rho = 1.0 / sy;
    let hy = mat_vec(h, y, n);
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j])
                + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shifted_quadratic() {
        let c = [3.0, -1.5, 0.25, 8.0];
        let r = bfgs_minimize(
            |x| {
                let f = x.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum();
                let g = x.iter().zip(&c).map(|(a, b)| 2.0 * (a - b)).collect();
                (f, g)
            },
            &[0.0; 4],
            1e-10,
            100,
        )
        .unwrap();
        assert!(r.converged);
        for (a, b) in r.x_star.iter().zip(&c) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn rosenbrock() {
        let r = bfgs_minimize(
            |x| {
                let (a, b) = (x[0], x[1]);
                let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
                let g = vec![
                    -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                    200.0 * (b - a * a),
                ];
                (f, g)
            },
            &[-1.2, 1.0],
            1e-10,
            1000,
        )
        .unwrap();
        assert!((r.x_star[0] - 1.0).abs() < 1e-5, "{:?}", r);
        assert!((r.x_star[1] - 1.0).abs() < 1e-5, "{:?}", r);
        for w in r.f_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn non_finite_start_is_rejected() {
        let r = bfgs_minimize(|_| (f64::NAN, vec![0.0]), &[1.0], 1e-6, 10);
        assert!(matches!(r, Err(NumericsError::NonFiniteObjective)));
    }

    proptest! {
        #[test]
        fn convex_quadratic_converges_within_dim_plus_five(
            dim in 1usize..7,
            entries in prop::collection::vec(-1.0f64..1.0, 49),
            rhs in prop::collection::vec(-5.0f64..5.0, 7),
        ) {
            // A = BᵀB + I is SPD
            let b: Vec<f64> = entries[..dim * dim].to_vec();
            let mut a = vec![0.0; dim * dim];
            for i in 0..dim {
                for j in 0..dim {
                    a[i * dim + j] = (0..dim).map(|k| b[k * dim + i] * b[k * dim + j]).sum::<f64>()
                        + if i == j { 1.0 } else { 0.0 };
                }
            }
            let rhs = rhs[..dim].to_vec();
            let r = bfgs_minimize(
                |x| {
                    let ax = mat_vec(&a, x, dim);
                    let f = 0.5 * dot(x, &ax) - dot(&rhs, x);
                    let g = ax.iter().zip(&rhs).map(|(p, q)| p - q).collect();
                    (f, g)
                },
                &vec![0.0; dim],
                1e-8,
                dim + 5,
            ).unwrap();
            prop_assert!(r.grad_norm < 1e-8, "grad {} after {} iterations", r.grad_norm, r.iterations);
            for w in r.f_history.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
        }
    }
}
