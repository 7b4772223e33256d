use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{one_hot, CnnError, Mode, Network};
use crate::numerics::relative_error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Reshuffle the sample order every epoch; otherwise batches walk the
    /// data in order.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 100, learning_rate: 0.01, iterations: 1000, seed: 0, shuffle: true }
    }
}

/// Plain minibatch SGD, `w ← w − lr·∇L`. Returns the batch loss of every
/// iteration, measured before its update.
pub fn train<T: AsRef<[f64]> + Sync>(
    network: &mut Network,
    inputs: &[T],
    labels: &[usize],
    config: &TrainConfig,
    mut on_iteration: impl FnMut(usize, f64),
) -> Result<Vec<f64>, CnnError> {
    if config.batch_size == 0 {
        return Err(CnnError::InvalidConfig("batch size must be at least 1".into()));
    }
    if labels.len() != inputs.len() {
        return Err(CnnError::InvalidConfig(format!("{} labels for {} inputs", labels.len(), inputs.len())));
    }
    if !(labels.contains(&0) && labels.iter().any(|&l| l != 0)) {
        return Err(CnnError::DegenerateLabels);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    if config.shuffle {
        order.shuffle(&mut rng);
    }
    let mut cursor = 0;
    let mut history = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                cursor = 0;
                if config.shuffle {
                    order.shuffle(&mut rng);
                }
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let xs: Vec<&[f64]> = batch.iter().map(|&i| inputs[i].as_ref()).collect();
        let ts: Vec<[f64; 2]> = batch.iter().map(|&i| one_hot(labels[i])).collect();
        let dropout_seed = config.seed ^ (it as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let (loss, grad) = network.loss_and_gradients(&xs, &ts, Mode::Train { seed: dropout_seed })?;
        if !loss.is_finite() {
            return Err(CnnError::InvalidConfig(format!("loss diverged at iteration {it}")));
        }
        if config.learning_rate != 0.0 {
            network.params.iter_mut().zip(&grad).for_each(|(w, g)| *w -= config.learning_rate * g);
        }
        history.push(loss);
        on_iteration(it, loss);
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst_parameter: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares backpropagated gradients with central differences of step `h`
/// on `n_params` parameters drawn by `seed` (all of them if fewer). Dropout
/// masks are frozen by reusing one seed. Inputs should stay clear of exact
/// zeros so no ReLU sits on its kink.
pub fn gradient_check<T: AsRef<[f64]> + Sync>(
    network: &Network,
    inputs: &[T],
    targets: &[[f64; 2]],
    h: f64,
    n_params: usize,
    seed: u64,
) -> Result<GradCheckReport, CnnError> {
    let mode = Mode::Train { seed };
    let (_, grad) = network.loss_and_gradients(inputs, targets, mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if n_params >= grad.len() {
        (0..grad.len()).collect()
    } else {
        let mut v = rand::seq::index::sample(&mut rng, grad.len(), n_params).into_vec();
        v.sort_unstable();
        v
    };
    let mut probe = network.clone();
    let mut report =
        GradCheckReport { checked: picks.len(), max_relative_error: -1.0, worst_parameter: 0, analytic: 0.0, numeric: 0.0 };
    for &i in &picks {
        let w = network.params[i];
        probe.params[i] = w + h;
        let up = probe.loss(inputs, targets, mode)?;
        probe.params[i] = w - h;
        let down = probe.loss(inputs, targets, mode)?;
        probe.params[i] = w;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(grad[i], numeric, 1e-7);
        if err > report.max_relative_error {
            report = GradCheckReport { max_relative_error: err, worst_parameter: i, analytic: grad[i], numeric, ..report };
        }
    }
    report.max_relative_error = report.max_relative_error.max(0.0);
    Ok(report)
}

/// Gradient check of a seeded tiny network on four random 8×8 inputs whose
/// values stay at least 0.05 away from zero.
pub fn tiny_gradient_check(n_params: usize, seed: u64) -> Result<GradCheckReport, CnnError> {
    use rand::Rng;
    let net = super::build_network(&super::NetworkConfig::tiny(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let inputs: Vec<Vec<f64>> = (0..4)
        .map(|_| {
            (0..net.config.input_len())
                .map(|_| rng.gen_range(0.05..1.0) * if rng.gen() { 1.0 } else { -1.0 })
                .collect()
        })
        .collect();
    let targets: Vec<[f64; 2]> = (0..4).map(|i| one_hot(i % 2)).collect();
    gradient_check(&net, &inputs, &targets, 1e-5, n_params, seed)
}

#[cfg(test)]
mod tests {
    use super::super::{build_network, DropoutSpec, LossKind, NetworkConfig};
    use super::*;
    use rand::Rng;

    fn inputs(n: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..len).map(|_| rng.gen_range(0.05..1.0) * if rng.gen() { 1.0 } else { -1.0 }).collect()).collect()
    }

    #[test]
    fn backprop_matches_finite_differences() {
        for loss in [LossKind::Mse, LossKind::Xent] {
            let cfg = NetworkConfig { loss, ..NetworkConfig::tiny() };
            let net = build_network(&cfg, 11).unwrap();
            let x = inputs(4, 64, 2);
            let t: Vec<_> = (0..4).map(|i| one_hot(i % 2)).collect();
            let r = gradient_check(&net, &x, &t, 1e-5, 10_000, 3).unwrap();
            assert_eq!(r.checked, net.param_count());
            assert!(r.max_relative_error < 1e-4, "{loss:?}: {r:?}");
        }
    }

    #[test]
    fn backprop_with_dropout_matches_finite_differences() {
        let cfg = NetworkConfig { dropout: vec![DropoutSpec { layer: 2, p: 0.5 }, DropoutSpec { layer: 3, p: 0.3 }], ..NetworkConfig::tiny() };
        let net = build_network(&cfg, 4).unwrap();
        let x = inputs(3, 64, 7);
        let t = [one_hot(0), one_hot(1), one_hot(1)];
        assert!(gradient_check(&net, &x, &t, 1e-5, 200, 9).unwrap().max_relative_error < 1e-4);
    }

    fn toy() -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        (0..64)
            .map(|i| {
                let label = i % 2;
                let level = if label == 0 { 0.2 } else { 0.8 } + rng.gen_range(-0.05..0.05);
                (vec![level; 64], label)
            })
            .unzip()
    }

    #[test]
    fn separable_toy_is_learned() {
        let (x, y) = toy();
        let mut net = build_network(&NetworkConfig::tiny(), 1).unwrap();
        let cfg = TrainConfig { batch_size: 16, learning_rate: 0.5, iterations: 200, seed: 2, shuffle: true };
        let hist = train(&mut net, &x, &y, &cfg, |_, _| {}).unwrap();
        let pred = net.predict(&x).unwrap();
        let acc = pred.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
        assert!(acc >= 0.99, "accuracy {acc}");
        let smooth: Vec<f64> = hist.chunks(10).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        assert!(smooth.last().unwrap() < &smooth[0]);
    }

    #[test]
    fn zero_rate_keeps_weights() {
        let (x, y) = toy();
        let mut net = build_network(&NetworkConfig::tiny(), 1).unwrap();
        let before = net.clone();
        let cfg = TrainConfig { batch_size: x.len(), learning_rate: 0.0, iterations: 5, seed: 2, shuffle: false };
        let hist = train(&mut net, &x, &y, &cfg, |_, _| {}).unwrap();
        assert_eq!(net, before);
        assert!(hist.iter().all(|&l| l == hist[0]));
    }

    #[test]
    fn training_is_seeded() {
        let (x, y) = toy();
        let cfg = TrainConfig { batch_size: 8, learning_rate: 0.1, iterations: 20, seed: 5, shuffle: true };
        let run = || {
            let mut net = build_network(&NetworkConfig::tiny(), 1).unwrap();
            let h = train(&mut net, &x, &y, &cfg, |_, _| {}).unwrap();
            (net, h)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_class_is_rejected() {
        let mut net = build_network(&NetworkConfig::tiny(), 1).unwrap();
        let r = train(&mut net, &vec![vec![0.0; 64]; 4], &[1, 1, 1, 1], &TrainConfig::default(), |_, _| {});
        assert!(matches!(r, Err(CnnError::DegenerateLabels)));
    }
}
