//! Finite-difference checks over every differentiable stage, from single
//! tensor ops up to a full training forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adadrop::{ChannelPooling, DropMode};
use crate::attention::{cbam, channel_attention, spatial_attention, ChannelGate, SpatialGate};
use crate::error::Result;
use crate::loss::{cross_entropy, pairwise_distances, total_loss, triplet_loss, Reduction};
use crate::net::{train_forward, Batch, BranchSet, ModelParams, NetConfig, TrainSettings};
use crate::tensor::{grad_check, relative_error, Activation, PoolKind, Tape, Tensor, Var};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    /// Probed elements summed over instances.
    pub elements: usize,
    /// Elements skipped because a probe crossed a relu, max or mask boundary.
    pub at_kink: usize,
}

impl CheckResult {
    /// At most one probe in ten may be skipped as a kink.
    pub fn passed(&self) -> bool {
        self.max_error < TOLERANCE && self.at_kink * 10 <= self.elements
    }
}

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Probe {
    pub max_error: f64,
    pub elements: usize,
    pub at_kink: usize,
}

impl Probe {
    fn merge(self, other: Probe) -> Probe {
        Probe {
            max_error: self.max_error.max(other.max_error),
            elements: self.elements + other.elements,
            at_kink: self.at_kink + other.at_kink,
        }
    }
}

fn smooth(f: impl Fn(&mut Tape, Var) -> Result<Var>, input: &Tensor, eps: f64) -> Result<Probe> {
    Ok(Probe {
        max_error: grad_check(f, input, eps)?,
        elements: input.numel(),
        at_kink: 0,
    })
}

/// Central differences for piecewise-smooth functions. An element is
/// compared only when both probes at `x ± EPS` take the same relu, max,
/// gather and mask decisions as `x`; the rest are counted as kinks.
pub fn piecewise_grad_check<F>(f: F, input: &Tensor) -> Result<Probe>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |x: Tensor| -> Result<(f64, Vec<u64>)> {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let out = f(&mut tape, v)?;
        Ok((tape.value(out).item(), tape.decisions()))
    };
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone().requiring_grad());
    let out = f(&mut tape, x)?;
    tape.backward(out)?;
    let base = tape.decisions();
    let analytic = tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; input.numel()]);

    let mut probe = Probe {
        elements: input.numel(),
        ..Probe::default()
    };
    let mut shifted = input.clone();
    for (i, a) in analytic.iter().enumerate() {
        let orig = shifted.data()[i];
        shifted.data_mut()[i] = orig + EPS;
        let (plus, dp) = eval(shifted.clone())?;
        shifted.data_mut()[i] = orig - EPS;
        let (minus, dm) = eval(shifted.clone())?;
        shifted.data_mut()[i] = orig;
        if dp != base || dm != base {
            probe.at_kink += 1;
            continue;
        }
        probe.max_error = probe.max_error.max(relative_error(*a, (plus - minus) / (2.0 * EPS)));
    }
    Ok(probe)
}

/// Random-weight scalarisation so every output element matters.
fn weighted(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(t.shape(y), 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

/// Values with |x| >= 0.1, keeping relu clear of its kink.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::uniform(shape, 0.1, 1.5, rng);
    for v in t.data_mut() {
        if rng.gen::<bool>() {
            *v = -*v;
        }
    }
    t
}

struct Suite {
    instances: usize,
    results: Vec<CheckResult>,
}

impl Suite {
    fn check(&mut self, name: &str, mut trial: impl FnMut(u64) -> Result<Probe>) -> Result<()> {
        let mut total = Probe::default();
        for i in 0..self.instances as u64 {
            total = total.merge(trial(i)?);
        }
        self.results.push(CheckResult {
            name: name.to_string(),
            instances: self.instances,
            max_error: total.max_error,
            elements: total.elements,
            at_kink: total.at_kink,
        });
        Ok(())
    }
}

fn gate_pair(t: &mut Tape, fc1: Var, fc2: Var, kernel: Var) -> (ChannelGate, SpatialGate) {
    let padding = (t.shape(kernel)[2] - 1) / 2;
    (
        ChannelGate {
            fc1,
            fc2,
            bias1: None,
            bias2: None,
        },
        SpatialGate { kernel, padding },
    )
}

fn tiny_net(num_classes: usize, branches: BranchSet) -> NetConfig {
    NetConfig {
        image_height: 8,
        image_width: 6,
        stage_channels: vec![4, 4],
        stage_strides: vec![2, 1],
        global_hidden: 5,
        global_dim: 4,
        attention_dim: 3,
        drop_dim: 3,
        num_classes,
        reduction: 2,
        spatial_kernel: 3,
        drop_pooling: PoolKind::Gmp,
        channel_pooling: ChannelPooling::Mean,
        branches,
    }
}

/// Full training loss as a function of parameter `index`, for each
/// auxiliary branch in turn.
pub fn train_forward_check(seed: u64, rho: f64) -> Result<Probe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_net(3, BranchSet::FULL);
    let mut params = ModelParams::init(&cfg, &mut rng)?;
    // Zero-initialised biases leave dead receptive fields with a
    // pre-activation of exactly 0, i.e. on the relu kink.
    for t in params.tensors_mut() {
        if t.rank() == 1 {
            let noise = Tensor::uniform(t.shape(), -0.1, 0.1, &mut rng);
            t.data_mut().copy_from_slice(noise.data());
        }
    }
    let batch = Batch {
        images: Tensor::uniform(&[6, 3, 8, 6], 0.0, 1.0, &mut rng),
        labels: vec![0, 0, 1, 1, 2, 2],
        cameras: vec![1, 2, 1, 2, 1, 2],
    };
    let settings = TrainSettings {
        rho,
        drop_mode: DropMode::Threshold { alpha: 0.8 },
        ..TrainSettings::default()
    };
    let mut total = Probe::default();
    for (index, t) in params.tensors().iter().enumerate() {
        let f = |tape: &mut Tape, v: Var| -> Result<Var> {
            let bound = params.bind_with(tape, Some((index, v)));
            let mut draw = ChaCha8Rng::seed_from_u64(seed);
            Ok(train_forward(tape, &batch, &bound, &settings, &mut draw)?.total)
        };
        total = total.merge(piecewise_grad_check(f, t)?);
    }
    Ok(total)
}

/// Runs every check on `instances` random instances each.
pub fn run_gradient_suite(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut s = Suite {
        instances,
        results: Vec::new(),
    };
    let rng = |i: u64, salt: u64| ChaCha8Rng::seed_from_u64(seed ^ (salt << 32) ^ i);

    s.check("conv2d/input", |i| {
        let mut r = rng(i, 1);
        let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
        let b = Tensor::randn(&[3], 1.0, &mut r);
        let x = Tensor::randn(&[2, 2, 5, 4], 1.0, &mut r);
        smooth(
            |t, x| {
                let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
                let y = t.conv2d(x, w, Some(b), 2, 1)?;
                weighted(t, y, i)
            },
            &x,
            EPS,
        )
    })?;
    s.check("conv2d/weight", |i| {
        let mut r = rng(i, 2);
        let x = Tensor::randn(&[2, 2, 5, 5], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
        smooth(
            |t, w| {
                let x = t.constant(x.clone());
                let y = t.conv2d(x, w, None, 1, 1)?;
                weighted(t, y, i)
            },
            &w,
            EPS,
        )
    })?;
    s.check("conv2d/bias", |i| {
        let mut r = rng(i, 3);
        let x = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
        let b = Tensor::randn(&[3], 1.0, &mut r);
        smooth(
            |t, b| {
                let (x, w) = (t.constant(x.clone()), t.constant(w.clone()));
                let y = t.conv2d(x, w, Some(b), 1, 0)?;
                weighted(t, y, i)
            },
            &b,
            EPS,
        )
    })?;
    s.check("linear/input", |i| {
        let mut r = rng(i, 4);
        let w = Tensor::randn(&[3, 5], 1.0, &mut r);
        let b = Tensor::randn(&[3], 1.0, &mut r);
        let x = Tensor::randn(&[4, 5], 1.0, &mut r);
        smooth(
            |t, x| {
                let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
                let y = t.linear(x, w, Some(b))?;
                weighted(t, y, i)
            },
            &x,
            EPS,
        )
    })?;
    s.check("linear/weight", |i| {
        let mut r = rng(i, 5);
        let x = Tensor::randn(&[4, 5], 1.0, &mut r);
        let w = Tensor::randn(&[3, 5], 1.0, &mut r);
        smooth(
            |t, w| {
                let x = t.constant(x.clone());
                let y = t.linear(x, w, None)?;
                weighted(t, y, i)
            },
            &w,
            EPS,
        )
    })?;
    s.check("linear/bias", |i| {
        let mut r = rng(i, 6);
        let x = Tensor::randn(&[4, 5], 1.0, &mut r);
        let w = Tensor::randn(&[3, 5], 1.0, &mut r);
        let b = Tensor::randn(&[3], 1.0, &mut r);
        smooth(
            |t, b| {
                let (x, w) = (t.constant(x.clone()), t.constant(w.clone()));
                let y = t.linear(x, w, Some(b))?;
                weighted(t, y, i)
            },
            &b,
            EPS,
        )
    })?;
    for (name, kind, salt) in [
        ("activation/sigmoid", Activation::Sigmoid, 7),
        ("activation/relu", Activation::Relu, 8),
        ("activation/softmax_rows", Activation::SoftmaxRows, 9),
    ] {
        s.check(name, |i| {
            let x = away_from_zero(&[3, 5], &mut rng(i, salt));
            smooth(
                |t, x| {
                    let y = t.activation(x, kind)?;
                    weighted(t, y, i)
                },
                &x,
                EPS,
            )
        })?;
    }
    for (name, kind, salt) in [
        ("pool/gap", PoolKind::Gap, 10),
        ("pool/gmp", PoolKind::Gmp, 11),
        ("pool/channel_avg", PoolKind::ChannelAvg, 12),
        ("pool/channel_max", PoolKind::ChannelMax, 13),
    ] {
        s.check(name, |i| {
            let x = Tensor::randn(&[2, 3, 4, 3], 1.0, &mut rng(i, salt));
            smooth(
                |t, x| {
                    let y = t.pool(x, kind)?;
                    weighted(t, y, i)
                },
                &x,
                EPS,
            )
        })?;
    }
    for (name, map_shape, salt) in [
        ("broadcast_mul/channel", [2, 3, 1, 1], 14),
        ("broadcast_mul/spatial", [2, 1, 4, 3], 15),
    ] {
        s.check(&format!("{name}/feature"), |i| {
            let mut r = rng(i, salt);
            let m = Tensor::randn(&map_shape, 1.0, &mut r);
            let f = Tensor::randn(&[2, 3, 4, 3], 1.0, &mut r);
            smooth(
                |t, f| {
                    let m = t.constant(m.clone());
                    let y = t.broadcast_mul(f, m)?;
                    weighted(t, y, i)
                },
                &f,
                EPS,
            )
        })?;
        s.check(&format!("{name}/map"), |i| {
            let mut r = rng(i, salt + 100);
            let f = Tensor::randn(&[2, 3, 4, 3], 1.0, &mut r);
            let m = Tensor::randn(&map_shape, 1.0, &mut r);
            smooth(
                |t, m| {
                    let f = t.constant(f.clone());
                    let y = t.broadcast_mul(f, m)?;
                    weighted(t, y, i)
                },
                &m,
                EPS,
            )
        })?;
    }

    let attention_inputs = |i: u64, salt: u64| {
        let mut r = rng(i, salt);
        (
            Tensor::randn(&[2, 4, 5, 4], 1.0, &mut r),
            Tensor::randn(&[2, 4], 0.7, &mut r),
            Tensor::randn(&[4, 2], 0.7, &mut r),
            Tensor::randn(&[1, 1, 3, 3], 0.7, &mut r),
        )
    };
    // gradients w.r.t. the feature map and each gate weight, per stage
    for (stage, salt) in [("channel_attention", 16), ("spatial_attention", 17), ("cbam", 18)] {
        for target in 0..4 {
            let label = ["feature", "fc1", "fc2", "kernel"][target];
            if stage == "channel_attention" && target == 3 || stage == "spatial_attention" && (target == 1 || target == 2) {
                continue;
            }
            s.check(&format!("{stage}/{label}"), |i| {
                let inputs = attention_inputs(i, salt);
                let all = [&inputs.0, &inputs.1, &inputs.2, &inputs.3];
                smooth(
                    |t, v| {
                        let mut vars = all.map(|x| t.constant(x.clone()));
                        vars[target] = v;
                        let (cg, sg) = gate_pair(t, vars[1], vars[2], vars[3]);
                        let y = match stage {
                            "channel_attention" => channel_attention(t, vars[0], &cg)?.1,
                            "spatial_attention" => spatial_attention(t, vars[0], &sg)?.1,
                            _ => cbam(t, vars[0], &cg, &sg)?,
                        };
                        weighted(t, y, i)
                    },
                    all[target],
                    EPS,
                )
            })?;
        }
    }

    s.check("loss/cross_entropy", |i| {
        let mut r = rng(i, 19);
        let x = Tensor::randn(&[5, 4], 2.0, &mut r);
        let labels: Vec<usize> = (0..5).map(|_| r.gen_range(0..4)).collect();
        smooth(|t, x| cross_entropy(t, x, &labels, Reduction::Mean), &x, EPS)
    })?;
    s.check("loss/pairwise_distances", |i| {
        let x = Tensor::randn(&[5, 3], 1.0, &mut rng(i, 20));
        smooth(
            |t, x| {
                let d = pairwise_distances(t, x)?;
                weighted(t, d, i)
            },
            &x,
            EPS,
        )
    })?;
    s.check("loss/soft_margin_triplet", |i| {
        let x = Tensor::randn(&[6, 3], 1.0, &mut rng(i, 21));
        let labels = [0, 0, 1, 1, 2, 2];
        smooth(|t, x| Ok(triplet_loss(t, x, &labels, Reduction::Sum)?.0), &x, EPS)
    })?;
    s.check("loss/total", |i| {
        let mut r = rng(i, 22);
        let x = Tensor::randn(&[6, 3], 1.0, &mut r);
        let w = Tensor::randn(&[3, 3], 1.0, &mut r);
        let labels = [0, 0, 1, 1, 2, 2];
        smooth(
            |t, x| {
                let w = t.constant(w.clone());
                let logits = t.linear(x, w, None)?;
                let ce = cross_entropy(t, logits, &labels, Reduction::Mean)?;
                let (tri, _) = triplet_loss(t, x, &labels, Reduction::Sum)?;
                total_loss(t, ce, tri)
            },
            &x,
            EPS,
        )
    })?;
    s.check("train_forward/attention", |i| train_forward_check(seed ^ (23 << 32) ^ i, 0.0))?;
    s.check("train_forward/drop", |i| train_forward_check(seed ^ (24 << 32) ^ i, 1.0))?;
    Ok(s.results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_kink_is_skipped_not_scored() {
        let x = Tensor::new(&[3], vec![0.0, 0.7, -0.4]).unwrap();
        let relu_sum = |t: &mut Tape, x: Var| {
            let y = t.relu(x);
            Ok(t.sum(y))
        };
        let p = piecewise_grad_check(relu_sum, &x).unwrap();
        assert_eq!((p.elements, p.at_kink), (3, 1));
        assert!(p.max_error < 1e-10);
        assert!(grad_check(relu_sum, &x, EPS).unwrap() > 0.1);
    }

    #[test]
    fn smooth_functions_have_no_kinks() {
        let x = Tensor::new(&[2], vec![0.5, -0.3]).unwrap();
        let p = piecewise_grad_check(
            |t, x| {
                let y = t.activation(x, Activation::Sigmoid)?;
                Ok(t.sum(y))
            },
            &x,
        )
        .unwrap();
        assert_eq!(p.at_kink, 0);
        assert!(p.max_error < 1e-8);
    }

    #[test]
    fn kink_budget_caps_passing() {
        let r = CheckResult {
            name: "x".into(),
            instances: 1,
            max_error: 0.0,
            elements: 10,
            at_kink: 2,
        };
        assert!(!r.passed());
    }

    #[test]
    fn suite_passes_on_two_instances() {
        let results = run_gradient_suite(2, 5).unwrap();
        assert!(results.len() > 25);
        for r in &results {
            assert!(r.passed(), "{} max error {}", r.name, r.max_error);
        }
    }
}
