//! Finite-difference gradient verification on the f64 shadow network.
//!
//! The oracle side evaluates the loss through the forward pass only, so it
//! stays independent of the backward implementation it checks. Central
//! differences are only valid where the network is smooth; coordinates whose
//! perturbation flips a ReLU sign, a pool argmax, a hinge margin, or a loss
//! clamp are retried with a smaller step and skipped if the kink persists
//! (the derivative does not exist there).

use rand_chacha::ChaCha8Rng;

use super::loss::{cross_entropy_loss, grad_through_sigmoid, hinge_loss, sigmoid, LOSS_PROB_EPS};
use super::train::LossKind;
use super::{randn, NetError, Network, NetworkSpec};
use crate::seeded::rng_for;
use crate::taxonomy::MaskedTarget;
use crate::tensor::Tensor;

const STREAM_DROP: u64 = 0x6CD0;
const STREAM_DATA: u64 = 0x6CDA;

/// Outcome of one finite-difference sweep over every parameter.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Coordinates compared against the central difference.
    pub checked: usize,
    /// Coordinates skipped because every step size crossed a kink.
    pub skipped_nondifferentiable: usize,
    pub max_rel_err: f64,
    /// Parameter name holding the worst coordinate.
    pub worst: String,
}

fn loss_of(
    net: &Network<f64>,
    x: &Tensor<f64>,
    target: &MaskedTarget,
    loss: LossKind,
    seed: u64,
) -> Result<(f64, Vec<u8>), NetError> {
    let mut rng: ChaCha8Rng = rng_for(seed, &[STREAM_DROP]);
    let (logits, caches) = net.forward_train(x.clone(), &mut rng)?;
    let mut sig = Vec::new();
    for c in &caches {
        c.signature_into(&mut sig);
    }
    let value = match loss {
        LossKind::CrossEntropySigmoid => {
            let probs: Vec<f64> = logits.data().iter().map(|&z| sigmoid(z)).collect();
            for &p in &probs {
                sig.push(u8::from(p <= LOSS_PROB_EPS || p >= 1.0 - LOSS_PROB_EPS));
            }
            cross_entropy_loss(&probs, target)?.0
        }
        LossKind::Hinge => {
            for (k, &z) in logits.data().iter().enumerate() {
                let y = if target.targets[k] != 0.0 { 1.0 } else { -1.0 };
                sig.push(u8::from(1.0 - z * y > 0.0));
            }
            hinge_loss(logits.data(), target)?.0
        }
    };
    Ok((value, sig))
}

fn analytic_grads(
    net: &Network<f64>,
    x: &Tensor<f64>,
    target: &MaskedTarget,
    loss: LossKind,
    seed: u64,
) -> Result<Vec<Tensor<f64>>, NetError> {
    let mut rng: ChaCha8Rng = rng_for(seed, &[STREAM_DROP]);
    let (logits, caches) = net.forward_train(x.clone(), &mut rng)?;
    let dlogits = match loss {
        LossKind::CrossEntropySigmoid => {
            let probs: Vec<f64> = logits.data().iter().map(|&z| sigmoid(z)).collect();
            let (_, grad_p) = cross_entropy_loss(&probs, target)?;
            Tensor::from_vec(logits.shape(), grad_through_sigmoid(&probs, &grad_p))
        }
        LossKind::Hinge => {
            let (_, grad) = hinge_loss(logits.data(), target)?;
            Tensor::from_vec(logits.shape(), grad)
        }
    };
    let grads = net.backward(&caches, dlogits);
    Ok(grads.flat().into_iter().cloned().collect())
}

/// Sweep every parameter of a randomly initialized `spec` instance.
///
/// `seed` fixes the weights, the input, the target/mask draw, and the
/// dropout mask shared by all evaluations.
pub fn check_network(
    spec: &NetworkSpec,
    loss: LossKind,
    seed: u64,
) -> Result<GradCheckReport, NetError> {
    let mut net: Network<f64> = Network::init(spec, &mut rng_for(seed, &[0x6C]))?;
    let mut data_rng = rng_for(seed, &[STREAM_DATA]);
    let (c, h, w) = spec.input;
    let x = Tensor::from_vec(
        &[c, h, w],
        (0..c * h * w).map(|_| randn(&mut data_rng) * 0.5).collect(),
    );
    let k = spec.outputs;
    let target = {
        use rand::Rng;
        let targets: Vec<f32> = (0..k).map(|_| f32::from(data_rng.gen::<bool>())).collect();
        let mut weights: Vec<f32> =
            (0..k).map(|_| f32::from(data_rng.gen::<f64>() > 0.25)).collect();
        if weights.iter().all(|&v| v == 0.0) {
            weights[0] = 1.0;
        }
        MaskedTarget { targets, weights }
    };

    let (_, base_sig) = loss_of(&net, &x, &target, loss, seed)?;
    let analytic = analytic_grads(&net, &x, &target, loss, seed)?;
    let names = net.param_names();

    let mut report = GradCheckReport {
        checked: 0,
        skipped_nondifferentiable: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };

    let n_tensors = analytic.len();
    for ti in 0..n_tensors {
        for ci in 0..analytic[ti].len() {
            let a = analytic[ti].data()[ci];
            let mut fd: Option<f64> = None;
            for &step in &[1e-3f64, 1e-4, 1e-5] {
                let orig = net.param_tensors()[ti].data()[ci];
                net.param_tensors_mut()[ti].data_mut()[ci] = orig + step;
                let (f_plus, sig_plus) = loss_of(&net, &x, &target, loss, seed)?;
                net.param_tensors_mut()[ti].data_mut()[ci] = orig - step;
                let (f_minus, sig_minus) = loss_of(&net, &x, &target, loss, seed)?;
                net.param_tensors_mut()[ti].data_mut()[ci] = orig;
                if sig_plus == base_sig && sig_minus == base_sig {
                    fd = Some((f_plus - f_minus) / (2.0 * step));
                    break;
                }
            }
            match fd {
                None => report.skipped_nondifferentiable += 1,
                Some(fd) => {
                    report.checked += 1;
                    let rel = (a - fd).abs() / (a.abs().max(fd.abs()) + 1e-8);
                    if rel > report.max_rel_err {
                        report.max_rel_err = rel;
                        report.worst = format!("{}[{}] analytic {a} fd {fd}", names[ti], ci);
                    }
                }
            }
        }
    }
    Ok(report)
}

/// Small single-layer probes plus the two-block net; together they cover
/// every layer type.
pub fn probe_specs() -> Vec<(&'static str, NetworkSpec)> {
    use super::LayerSpec as L;
    let spec = |input: (usize, usize, usize), outputs: usize, layers: Vec<L>| NetworkSpec {
        input,
        outputs,
        layers,
    };
    vec![
        (
            "conv3x3",
            spec(
                (2, 6, 6),
                3,
                vec![
                    L::Conv { out_channels: 3, kernel: 3, stride: 1, pad: 1 },
                    L::Dense { out: 3 },
                ],
            ),
        ),
        (
            "conv_strided",
            spec(
                (1, 8, 8),
                3,
                vec![
                    L::Conv { out_channels: 2, kernel: 3, stride: 2, pad: 0 },
                    L::Dense { out: 3 },
                ],
            ),
        ),
        (
            "relu",
            spec(
                (1, 6, 6),
                3,
                vec![
                    L::Conv { out_channels: 2, kernel: 3, stride: 1, pad: 1 },
                    L::Relu,
                    L::Dense { out: 3 },
                ],
            ),
        ),
        (
            "maxpool",
            spec(
                (1, 6, 6),
                3,
                vec![
                    L::Conv { out_channels: 2, kernel: 3, stride: 1, pad: 1 },
                    L::MaxPool { kernel: 2, stride: 2 },
                    L::Dense { out: 3 },
                ],
            ),
        ),
        (
            "inception",
            spec(
                (2, 5, 5),
                3,
                vec![
                    L::InceptionLite { b1: 2, b3: 2, b5: 2, bpool: 2 },
                    L::Dense { out: 3 },
                ],
            ),
        ),
        (
            "global_avg_pool",
            spec(
                (1, 6, 6),
                3,
                vec![
                    L::Conv { out_channels: 3, kernel: 3, stride: 1, pad: 1 },
                    L::GlobalAvgPool,
                    L::Dense { out: 3 },
                ],
            ),
        ),
        (
            "dropout",
            spec(
                (1, 5, 5),
                3,
                vec![
                    L::Conv { out_channels: 2, kernel: 3, stride: 1, pad: 1 },
                    L::Dropout { rate: 0.3 },
                    L::Dense { out: 3 },
                ],
            ),
        ),
        (
            "dense",
            spec((1, 4, 4), 4, vec![L::Dense { out: 4 }]),
        ),
        (
            "two_block",
            spec(
                (1, 8, 8),
                3,
                vec![
                    L::Conv { out_channels: 4, kernel: 3, stride: 1, pad: 1 },
                    L::Relu,
                    L::MaxPool { kernel: 2, stride: 2 },
                    L::InceptionLite { b1: 2, b3: 2, b5: 2, bpool: 2 },
                    L::InceptionLite { b1: 2, b3: 2, b5: 2, bpool: 2 },
                    L::GlobalAvgPool,
                    L::Dropout { rate: 0.2 },
                    L::Dense { out: 3 },
                ],
            ),
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_probe_passes_at_a_few_seeds() {
        for (name, spec) in probe_specs() {
            for loss in [LossKind::CrossEntropySigmoid, LossKind::Hinge] {
                for seed in 0..3 {
                    let r = check_network(&spec, loss, seed).unwrap();
                    assert!(
                        r.max_rel_err < 1e-4,
                        "{name}/{loss:?} seed {seed}: rel err {} at {}",
                        r.max_rel_err,
                        r.worst
                    );
                    assert!(r.checked > 0);
                    assert!(
                        (r.skipped_nondifferentiable as f64)
                            < 0.02 * (r.checked + r.skipped_nondifferentiable) as f64 + 3.0,
                        "{name}: too many kink skips ({})",
                        r.skipped_nondifferentiable
                    );
                }
            }
        }
    }

    #[test]
    fn zero_loss_gradient_means_zero_parameter_gradients() {
        // hinge with every logit far beyond its margin: loss 0, grads 0
        let spec = probe_specs().remove(7).1; // dense-only
        let mut net: Network<f64> = Network::init(&spec, &mut rng_for(3, &[0x6C])).unwrap();
        net.zero_params();
        let x = Tensor::from_vec(&[1, 4, 4], vec![0.3; 16]);
        let mut rng = rng_for(3, &[STREAM_DROP]);
        let (logits, caches) = net.forward_train(x, &mut rng).unwrap();
        let dlogits = Tensor::zeros(logits.shape());
        let grads = net.backward(&caches, dlogits);
        for g in grads.flat() {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn duplicated_sample_doubles_its_gradient_contribution() {
        let spec = probe_specs().remove(0).1;
        let net: Network<f64> = Network::init(&spec, &mut rng_for(5, &[0x6C])).unwrap();
        let mut rng = rng_for(5, &[STREAM_DATA]);
        let x = Tensor::from_vec(&[2, 6, 6], (0..72).map(|_| randn(&mut rng)).collect());
        let target = MaskedTarget {
            targets: vec![1.0, 0.0, 1.0],
            weights: vec![1.0; 3],
        };
        let one = analytic_grads(&net, &x, &target, LossKind::CrossEntropySigmoid, 5).unwrap();
        // batch accumulation is a sum over samples
        let mut twice = one.clone();
        for (a, b) in twice.iter_mut().zip(&one) {
            a.add_assign(b);
        }
        for (t, o) in twice.iter().zip(&one) {
            for (a, b) in t.data().iter().zip(o.data()) {
                assert!((a - 2.0 * b).abs() < 1e-12);
            }
        }
    }
}
