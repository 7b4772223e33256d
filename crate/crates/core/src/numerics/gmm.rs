//! One-dimensional Gaussian mixture fitted by expectation-maximization.

use super::NumericsError;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const MAX_ITER: usize = 1000;

/// Fitted 1-D Gaussian mixture. Modes are ordered by ascending mean.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub n_modes: usize,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub weights: Vec<f64>,
    pub log_likelihood: f64,
    /// Total log-likelihood after every EM iteration.
    pub history: Vec<f64>,
    /// Lower bound applied to every variance.
    pub variance_floor: f64,
    /// Set when the input had no spread; the model then holds one mode.
    pub degenerate: bool,
}

impl GmmModel {
    /// Log of `weight * N(x; mean, variance)` for mode `k`.
    pub fn log_weighted_density(&self, k: usize, x: f64) -> f64 {
        log_weighted_density(x, self.means[k], self.variances[k], self.weights[k])
    }
}

#[inline]
fn log_weighted_density(x: f64, mean: f64, var: f64, weight: f64) -> f64 {
    if weight <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let d = x - mean;
    weight.ln() - 0.5 * (LN_2PI + var.ln() + d * d / var)
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Fit an `n_modes` component mixture to `samples`.
///
/// Modes start at evenly spaced quantiles of the distinct sample values, so
/// a heavy spike cannot seed every mode, with the pooled variance and
/// equal weights; iterations stop once the log-likelihood gains less than `tol`.
/// The variance floor is `1e-6` times the sample variance.
pub fn gmm_em_1d(
    samples: &[f64],
    n_modes: usize,
    seed: u64,
    tol: f64,
) -> Result<GmmModel, NumericsError> {
    // Quantile initialization is deterministic; the seed is accepted for
    // interface stability and does not influence the fit.
    let _ = seed;
    if n_modes == 0 {
        return Err(NumericsError::InvalidArgument("n_modes must be at least 1".into()));
    }
    if !(tol > 0.0) {
        return Err(NumericsError::InvalidArgument("tol must be positive".into()));
    }
    if samples.len() < 2 * n_modes {
        return Err(NumericsError::InvalidArgument(format!(
            "need at least {} samples for {} modes, got {}",
            2 * n_modes,
            n_modes,
            samples.len()
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::InvalidArgument("samples must be finite".into()));
    }

    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;

    if var <= 0.0 {
        let floor = f64::MIN_POSITIVE.max(1e-12 * mean.abs().max(1.0));
        let ll = samples
            .iter()
            .map(|&x| log_weighted_density(x, mean, floor, 1.0))
            .sum::<f64>();
        return Ok(GmmModel {
            n_modes: 1,
            means: vec![mean],
            variances: vec![floor],
            weights: vec![1.0],
            log_likelihood: ll,
            history: vec![ll],
            variance_floor: floor,
            degenerate: true,
        });
    }
    let floor = 1e-6 * var;

    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    sorted.dedup();
    let distinct = sorted.len() as f64;
    let mut means: Vec<f64> = (0..n_modes)
        .map(|k| {
            let q = (k as f64 + 0.5) / n_modes as f64;
            sorted[((q * distinct) as usize).min(sorted.len() - 1)]
        })
        .collect();
    let mut variances = vec![var; n_modes];
    let mut weights = vec![1.0 / n_modes as f64; n_modes];

    let mut resp = vec![0.0; samples.len() * n_modes];
    let mut history = Vec::new();
    let mut scratch = vec![0.0; n_modes];
    let mut prev = f64::NEG_INFINITY;

    for _ in 0..MAX_ITER {
        // E-step; the log-likelihood is that of the current parameters.
        let mut ll = 0.0;
        for (i, &x) in samples.iter().enumerate() {
            for k in 0..n_modes {
                scratch[k] = log_weighted_density(x, means[k], variances[k], weights[k]);
            }
            let lse = log_sum_exp(&scratch);
            ll += lse;
            for k in 0..n_modes {
                resp[i * n_modes + k] = (scratch[k] - lse).exp();
            }
        }
        history.push(ll);
        if ll - prev < tol {
            break;
        }
        prev = ll;

        // M-step with the variance floor as a box constraint.
        for k in 0..n_modes {
            let nk: f64 = (0..samples.len()).map(|i| resp[i * n_modes + k]).sum();
            weights[k] = nk / n;
            if nk <= 1e-300 {
                continue;
            }
            let mk = samples
                .iter()
                .enumerate()
                .map(|(i, &x)| resp[i * n_modes + k] * x)
                .sum::<f64>()
                / nk;
            let vk = samples
                .iter()
                .enumerate()
                .map(|(i, &x)| resp[i * n_modes + k] * (x - mk) * (x - mk))
                .sum::<f64>()
                / nk;
            means[k] = mk;
            variances[k] = vk.max(floor);
        }
        let wsum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= wsum);
    }

    let mut order: Vec<usize> = (0..n_modes).collect();
    order.sort_by(|&a, &b| means[a].partial_cmp(&means[b]).expect("finite"));
    let log_likelihood = *history.last().expect("at least one iteration");
    Ok(GmmModel {
        n_modes,
        means: order.iter().map(|&k| means[k]).collect(),
        variances: order.iter().map(|&k| variances[k]).collect(),
        weights: order.iter().map(|&k| weights[k]).collect(),
        log_likelihood,
        history,
        variance_floor: floor,
        degenerate: false,
    })
}

/// Hard assignment of every sample to the mode with the largest posterior
/// responsibility; ties go to the lower mode index.
pub fn gmm_assign(samples: &[f64], model: &GmmModel) -> Vec<usize> {
    samples
        .iter()
        .map(|&x| {
            let mut best = (0, f64::NEG_INFINITY);
            for k in 0..model.n_modes {
                let v = model.log_weighted_density(k, x);
                if v > best.1 {
                    best = (k, v);
                }
            }
            best.0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn assert_monotone(m: &GmmModel) {
        for w in m.history.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "log-likelihood decreased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn symmetric_two_point_sample_splits_evenly() {
        let mut s = vec![-3.0; 50];
        s.extend(vec![3.0; 50]);
        let m = gmm_em_1d(&s, 2, 0, 1e-10).unwrap();
        assert!((m.weights[0] - 0.5).abs() < 1e-6);
        assert!((m.weights[1] - 0.5).abs() < 1e-6);
        assert!((m.means[0] + 3.0).abs() < 1e-6 && (m.means[1] - 3.0).abs() < 1e-6);
        assert_monotone(&m);
    }

    #[test]
    fn recovers_separated_normals() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a: Vec<f64> = Normal::new(0.0, 1.0).unwrap().sample_iter(&mut rng).take(500).collect();
        let b: Vec<f64> = Normal::new(10.0, 1.0).unwrap().sample_iter(&mut rng).take(500).collect();
        let oracle = (
            a.iter().sum::<f64>() / 500.0,
            b.iter().sum::<f64>() / 500.0,
        );
        let s: Vec<f64> = a.into_iter().chain(b).collect();
        let m = gmm_em_1d(&s, 2, 7, 1e-8).unwrap();
        assert!((m.means[0] - oracle.0).abs() < 0.2);
        assert!((m.means[1] - oracle.1).abs() < 0.2);
        assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_monotone(&m);
    }

    #[test]
    fn single_mode_is_closed_form() {
        let s = [1.0, 4.0, 2.5, 7.0, -1.0, 3.5];
        let m = gmm_em_1d(&s, 1, 0, 1e-12).unwrap();
        let mean = s.iter().sum::<f64>() / 6.0;
        let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 6.0;
        assert!((m.means[0] - mean).abs() < 1e-12);
        assert!((m.variances[0] - var).abs() < 1e-12);
    }

    #[test]
    fn constant_input_is_degenerate() {
        let m = gmm_em_1d(&[5.0; 40], 3, 0, 1e-6).unwrap();
        assert!(m.degenerate);
        assert_eq!(m.n_modes, 1);
        assert_eq!(m.means, vec![5.0]);
        assert!(m.variances[0] > 0.0);
    }

    #[test]
    fn rejects_too_few_samples() {
        assert!(gmm_em_1d(&[1.0, 2.0, 3.0], 2, 0, 1e-6).is_err());
        assert!(gmm_em_1d(&[1.0, 2.0, 3.0, 4.0], 2, 0, 0.0).is_err());
    }

    #[test]
    fn quantized_intensities_stay_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 4.0).unwrap();
        let s: Vec<f64> = (0..300)
            .map(|i| {
                let base: f64 = if i % 5 == 0 { 60.0 } else { 180.0 };
                (base + noise.sample(&mut rng)).round()
            })
            .collect();
        for modes in 1..=4 {
            let m = gmm_em_1d(&s, modes, 0, 1e-9).unwrap();
            assert_monotone(&m);
            assert!(m.variances.iter().all(|&v| v >= m.variance_floor));
            assert!(m.means.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    fn model(means: Vec<f64>, variances: Vec<f64>, weights: Vec<f64>) -> GmmModel {
        GmmModel {
            n_modes: means.len(),
            means,
            variances,
            weights,
            log_likelihood: 0.0,
            history: vec![],
            variance_floor: 0.0,
            degenerate: false,
        }
    }

    #[test]
    fn assign_at_means_and_ties() {
        let m = model(vec![0.0, 10.0], vec![1.0, 1.0], vec![0.5, 0.5]);
        assert_eq!(gmm_assign(&[0.0, 10.0, 5.0], &m), vec![0, 1, 0]);
    }

    #[test]
    fn assign_matches_density_oracle() {
        let m = model(vec![-2.0, 1.0, 6.0], vec![1.5, 0.3, 4.0], vec![0.2, 0.5, 0.3]);
        let xs: Vec<f64> = (0..200).map(|i| -6.0 + i as f64 * 0.07).collect();
        let labels = gmm_assign(&xs, &m);
        for (&x, &l) in xs.iter().zip(&labels) {
            let dens: Vec<f64> = (0..3)
                .map(|k| {
                    let v = m.variances[k];
                    m.weights[k] * (-(x - m.means[k]).powi(2) / (2.0 * v)).exp()
                        / (2.0 * std::f64::consts::PI * v).sqrt()
                })
                .collect();
            let mut best = 0;
            for k in 1..3 {
                if dens[k] > dens[best] {
                    best = k;
                }
            }
            assert_eq!(l, best, "x = {x}");
        }
    }
}
