//! Sequential channel-then-spatial gating of a feature map.
//!
//! Channel gate: `Mc = sigmoid(MLP(gap(F)) + MLP(gmp(F)))`, one shared MLP with
//! a relu hidden layer. Spatial gate: `Ms = sigmoid(conv(avg_c(Fc)) +
//! conv(max_c(Fc)))`, one shared `k x k` kernel with "same" padding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{PoolKind, Tape, Tensor, Var};

/// Shared two-layer MLP of the channel gate.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttentionParams {
    /// `C/r x C`
    pub fc1: Tensor,
    /// `C x C/r`
    pub fc2: Tensor,
    pub bias1: Option<Tensor>,
    pub bias2: Option<Tensor>,
    reduction: usize,
}

/// Largest divisor of `channels` not exceeding `reduction`, so that the
/// hidden width `channels / r` is a positive integer.
pub fn clamp_reduction(channels: usize, reduction: usize) -> usize {
    (1..=reduction.clamp(1, channels.max(1)))
        .rev()
        .find(|r| channels % r == 0)
        .unwrap_or(1)
}

impl ChannelAttentionParams {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::contract(format!(
                "reduction ratio {reduction} must divide channel count {channels}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Tensor::zeros(&[hidden, channels]),
            fc2: Tensor::zeros(&[channels, hidden]),
            bias1: None,
            bias2: None,
            reduction,
        })
    }

    /// He-initialised weights, no biases.
    pub fn init<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(channels, reduction)?;
        let hidden = channels / reduction;
        p.fc1 = Tensor::randn(&[hidden, channels], (2.0 / channels as f64).sqrt(), rng);
        p.fc2 = Tensor::randn(&[channels, hidden], (1.0 / hidden as f64).sqrt(), rng);
        Ok(p)
    }

    pub fn from_weights(fc1: Tensor, fc2: Tensor) -> Result<Self> {
        let (hidden, channels) = match fc1.shape() {
            [h, c] => (*h, *c),
            s => return Err(Error::dim(format!("fc1 must be rank 2, got {s:?}"))),
        };
        if fc2.shape() != [channels, hidden] {
            return Err(Error::dim(format!(
                "fc2 shape {:?}, expected [{channels}, {hidden}]",
                fc2.shape()
            )));
        }
        if channels % hidden != 0 {
            return Err(Error::contract(format!(
                "hidden width {hidden} does not divide {channels} channels"
            )));
        }
        Ok(Self {
            fc1,
            fc2,
            bias1: None,
            bias2: None,
            reduction: channels / hidden,
        })
    }

    /// Adds zero-initialised biases to both MLP layers.
    pub fn with_biases(mut self) -> Self {
        self.bias1 = Some(Tensor::zeros(&[self.hidden()]));
        self.bias2 = Some(Tensor::zeros(&[self.channels()]));
        self
    }

    pub fn channels(&self) -> usize {
        self.fc1.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.fc1.shape()[0]
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![("fc1", &self.fc1), ("fc2", &self.fc2)];
        v.extend(self.bias1.iter().map(|b| ("bias1", b)));
        v.extend(self.bias2.iter().map(|b| ("bias2", b)));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.fc1, &mut self.fc2];
        v.extend(self.bias1.iter_mut());
        v.extend(self.bias2.iter_mut());
        v
    }

    /// Records every tensor as a leaf, in [`Self::tensors`] order.
    pub fn bind(&self, tape: &mut Tape) -> ChannelGate {
        ChannelGate {
            fc1: tape.leaf(self.fc1.clone()),
            fc2: tape.leaf(self.fc2.clone()),
            bias1: self.bias1.as_ref().map(|b| tape.leaf(b.clone())),
            bias2: self.bias2.as_ref().map(|b| tape.leaf(b.clone())),
        }
    }
}

/// Channel-gate parameters recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ChannelGate {
    pub fc1: Var,
    pub fc2: Var,
    pub bias1: Option<Var>,
    pub bias2: Option<Var>,
}

impl ChannelGate {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.fc1, self.fc2];
        v.extend(self.bias1);
        v.extend(self.bias2);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialAttentionParams {
    /// `1 x 1 x k x k`, applied to both pooled maps.
    pub kernel: Tensor,
}

impl SpatialAttentionParams {
    pub fn zeros(kernel_size: usize) -> Result<Self> {
        Self::check_size(kernel_size)?;
        Ok(Self {
            kernel: Tensor::zeros(&[1, 1, kernel_size, kernel_size]),
        })
    }

    pub fn init<R: Rng + ?Sized>(kernel_size: usize, rng: &mut R) -> Result<Self> {
        Self::check_size(kernel_size)?;
        let fan_in = (kernel_size * kernel_size) as f64;
        Ok(Self {
            kernel: Tensor::randn(&[1, 1, kernel_size, kernel_size], (1.0 / fan_in).sqrt(), rng),
        })
    }

    pub fn from_kernel(kernel: Tensor) -> Result<Self> {
        match kernel.shape() {
            [1, 1, a, b] if a == b => {
                Self::check_size(*a)?;
                Ok(Self { kernel })
            }
            s => Err(Error::dim(format!("spatial kernel must be 1x1xkxk, got {s:?}"))),
        }
    }

    fn check_size(k: usize) -> Result<()> {
        if k % 2 == 0 {
            return Err(Error::contract(format!("spatial kernel size {k} must be odd")));
        }
        Ok(())
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn bind(&self, tape: &mut Tape) -> SpatialGate {
        SpatialGate {
            kernel: tape.leaf(self.kernel.clone()),
            padding: (self.kernel_size() - 1) / 2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SpatialGate {
    pub kernel: Var,
    pub padding: usize,
}

fn shared_mlp(tape: &mut Tape, pooled: Var, gate: &ChannelGate) -> Result<Var> {
    let flat = tape.flatten(pooled)?;
    let hidden = tape.linear(flat, gate.fc1, gate.bias1)?;
    let hidden = tape.relu(hidden);
    tape.linear(hidden, gate.fc2, gate.bias2)
}

/// Returns `(Mc, Fc)` with `Mc` of shape `N x C x 1 x 1`.
pub fn channel_attention(tape: &mut Tape, feature: Var, gate: &ChannelGate) -> Result<(Var, Var)> {
    let shape = tape.shape(feature).to_vec();
    if shape.len() != 4 {
        return Err(Error::dim(format!("channel attention needs rank 4, got {shape:?}")));
    }
    let expected = tape.shape(gate.fc1)[1];
    if shape[1] != expected {
        return Err(Error::dim(format!(
            "channel attention built for {expected} channels, input has {}",
            shape[1]
        )));
    }
    let avg = tape.pool(feature, PoolKind::Gap)?;
    let max = tape.pool(feature, PoolKind::Gmp)?;
    let avg = shared_mlp(tape, avg, gate)?;
    let max = shared_mlp(tape, max, gate)?;
    let logits = tape.add(avg, max)?;
    let mc = tape.sigmoid(logits);
    let mc = tape.reshape(mc, &[shape[0], shape[1], 1, 1])?;
    let fc = tape.broadcast_mul(feature, mc)?;
    Ok((mc, fc))
}

/// Returns `(Ms, Fsc)` with `Ms` of shape `N x 1 x H x W`.
pub fn spatial_attention(tape: &mut Tape, feature: Var, gate: &SpatialGate) -> Result<(Var, Var)> {
    let avg = tape.pool(feature, PoolKind::ChannelAvg)?;
    let max = tape.pool(feature, PoolKind::ChannelMax)?;
    let avg = tape.conv2d(avg, gate.kernel, None, 1, gate.padding)?;
    let max = tape.conv2d(max, gate.kernel, None, 1, gate.padding)?;
    let logits = tape.add(avg, max)?;
    let ms = tape.sigmoid(logits);
    let fsc = tape.broadcast_mul(feature, ms)?;
    Ok((ms, fsc))
}

/// Channel gate followed by spatial gate.
pub fn cbam(tape: &mut Tape, feature: Var, channel: &ChannelGate, spatial: &SpatialGate) -> Result<Var> {
    let (_, fc) = channel_attention(tape, feature, channel)?;
    let (_, fsc) = spatial_attention(tape, fc, spatial)?;
    Ok(fsc)
}
