//! Self-thresholding drop masks.
//!
//! An attention map is pooled across channels, each sample's threshold is
//! `alpha` times that sample's maximum, and every position strictly above the
//! threshold is erased in all channels. Masks are constants on the tape.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// How channels are collapsed into the attention map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChannelPooling {
    #[default]
    Mean,
    Max,
}

/// How the drop mask is derived from the attention map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DropMode {
    /// Erase positions strictly above `alpha * max`.
    Threshold { alpha: f64 },
    /// Erase the `round(q * H * W)` largest positions of each sample.
    Quantile { q: f64 },
}

impl DropMode {
    pub fn mask(&self, map: &AttentionMap) -> Result<DropMask> {
        match *self {
            DropMode::Threshold { alpha } => drop_mask(map, alpha),
            DropMode::Quantile { q } => quantile_mask(map, q),
        }
    }
}

/// Per-sample spatial saliency, `N x 1 x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    values: Tensor,
}

impl AttentionMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 4 || values.shape()[1] != 1 {
            return Err(Error::dim(format!(
                "attention map must be N x 1 x H x W, got {:?}",
                values.shape()
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// `(N, H, W)`
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[2], s[3])
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let (_, h, w) = self.dims();
        &self.values.data()[n * h * w..(n + 1) * h * w]
    }
}

/// Binary `N x 1 x H x W` mask; 0 marks erased positions.
#[derive(Debug, Clone, PartialEq)]
pub struct DropMask {
    values: Tensor,
    alpha: Option<f64>,
}

impl DropMask {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 4 || values.shape()[1] != 1 {
            return Err(Error::dim(format!(
                "drop mask must be N x 1 x H x W, got {:?}",
                values.shape()
            )));
        }
        if values.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract("drop mask entries must be 0 or 1"));
        }
        Ok(Self { values, alpha: None })
    }

    pub fn ones(n: usize, h: usize, w: usize) -> Self {
        Self {
            values: Tensor::ones(&[n, 1, h, w]),
            alpha: None,
        }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Threshold ratio the mask was built with, if any.
    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[2], s[3])
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let (_, h, w) = self.dims();
        &self.values.data()[n * h * w..(n + 1) * h * w]
    }
}

pub fn attention_map(feature: &Tensor) -> Result<AttentionMap> {
    attention_map_with(feature, ChannelPooling::Mean)
}

pub fn attention_map_with(feature: &Tensor, pooling: ChannelPooling) -> Result<AttentionMap> {
    if feature.rank() != 4 {
        return Err(Error::dim(format!(
            "attention map needs a rank-4 feature map, got {:?}",
            feature.shape()
        )));
    }
    let s = feature.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = vec![0.0; n * hw];
    for (sample, dst) in out.chunks_mut(hw).enumerate() {
        let planes = &feature.data()[sample * c * hw..(sample + 1) * c * hw];
        match pooling {
            ChannelPooling::Mean => {
                for plane in planes.chunks(hw) {
                    dst.iter_mut().zip(plane).for_each(|(a, b)| *a += b);
                }
                dst.iter_mut().for_each(|v| *v /= c as f64);
            }
            ChannelPooling::Max => {
                dst.copy_from_slice(&planes[..hw]);
                for plane in planes.chunks(hw).skip(1) {
                    dst.iter_mut().zip(plane).for_each(|(a, b)| *a = a.max(*b));
                }
            }
        }
    }
    AttentionMap::new(Tensor::new(&[n, 1, s[2], s[3]], out)?)
}

/// Erases every position whose value exceeds `alpha` times its sample's max.
pub fn drop_mask(map: &AttentionMap, alpha: f64) -> Result<DropMask> {
    if !(alpha > 0.0) {
        return Err(Error::contract(format!("alpha must be positive, got {alpha}")));
    }
    let (n, h, w) = map.dims();
    let mut out = Vec::with_capacity(n * h * w);
    for s in 0..n {
        let vals = map.sample(s);
        let peak = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let threshold = alpha * peak;
        out.extend(vals.iter().map(|&v| if v > threshold { 0.0 } else { 1.0 }));
    }
    Ok(DropMask {
        values: Tensor::new(&[n, 1, h, w], out)?,
        alpha: Some(alpha),
    })
}

/// Erases exactly `round(q * H * W)` positions per sample, largest first;
/// equal values are taken in row-major order.
pub fn quantile_mask(map: &AttentionMap, q: f64) -> Result<DropMask> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::contract(format!("quantile must lie in [0, 1], got {q}")));
    }
    let (n, h, w) = map.dims();
    let count = (q * (h * w) as f64).round() as usize;
    let mut out = vec![1.0; n * h * w];
    for s in 0..n {
        let vals = map.sample(s);
        let mut order: Vec<usize> = (0..h * w).collect();
        order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        for &i in order.iter().take(count) {
            out[s * h * w + i] = 0.0;
        }
    }
    Ok(DropMask {
        values: Tensor::new(&[n, 1, h, w], out)?,
        alpha: None,
    })
}

/// Multiplies every channel by the mask. No gradient reaches the mask.
pub fn apply_drop(tape: &mut Tape, feature: Var, mask: &DropMask) -> Result<Var> {
    let fs = tape.shape(feature).to_vec();
    let (n, h, w) = mask.dims();
    if fs.len() != 4 || fs[0] != n || fs[2] != h || fs[3] != w {
        return Err(Error::dim(format!(
            "mask {:?} does not fit feature map {fs:?}",
            mask.values.shape()
        )));
    }
    tape.note_decisions(mask.values.data().iter().map(|&v| u64::from(v != 0.0)));
    let m = tape.constant(mask.values.clone());
    tape.broadcast_mul(feature, m)
}

/// One block of `round(ratio_h * H) x round(ratio_w * W)` at a uniformly drawn
/// offset, shared by every sample in the batch.
pub fn random_block_mask<R: Rng + ?Sized>(
    n: usize,
    h: usize,
    w: usize,
    ratio_h: f64,
    ratio_w: f64,
    rng: &mut R,
) -> Result<DropMask> {
    for r in [ratio_h, ratio_w] {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::contract(format!("block ratio must lie in (0, 1], got {r}")));
        }
    }
    let bh = ((ratio_h * h as f64).round() as usize).clamp(1, h);
    let bw = ((ratio_w * w as f64).round() as usize).clamp(1, w);
    let top = rng.gen_range(0..=h - bh);
    let left = rng.gen_range(0..=w - bw);
    let mut plane = vec![1.0; h * w];
    for y in top..top + bh {
        plane[y * w + left..y * w + left + bw].iter_mut().for_each(|v| *v = 0.0);
    }
    let data = plane.repeat(n);
    Ok(DropMask {
        values: Tensor::new(&[n, 1, h, w], data)?,
        alpha: None,
    })
}

/// Random-block erasure of a plain feature map (the ablation baseline).
pub fn random_block_drop<R: Rng + ?Sized>(
    feature: &Tensor,
    ratio_h: f64,
    ratio_w: f64,
    rng: &mut R,
) -> Result<Tensor> {
    if feature.rank() != 4 {
        return Err(Error::dim(format!("expected rank 4, got {:?}", feature.shape())));
    }
    let s = feature.shape();
    let mask = random_block_mask(s[0], s[2], s[3], ratio_h, ratio_w, rng)?;
    let mut tape = Tape::new();
    let f = tape.constant(feature.clone());
    let out = apply_drop(&mut tape, f, &mask)?;
    Ok(tape.value(out).clone())
}

/// Fraction of erased positions, per sample.
pub fn drop_fraction(mask: &DropMask) -> Vec<f64> {
    let (n, h, w) = mask.dims();
    (0..n)
        .map(|s| mask.sample(s).iter().filter(|&&v| v == 0.0).count() as f64 / (h * w) as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn map2x2(v: [f64; 4]) -> AttentionMap {
        AttentionMap::new(Tensor::new(&[1, 1, 2, 2], v.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn attention_map_examples() {
        let mut data = vec![2.0; 4];
        data.extend([4.0; 4]);
        let f = Tensor::new(&[1, 2, 2, 2], data).unwrap();
        assert_eq!(attention_map(&f).unwrap().values().data(), &[3.0; 4]);
        assert_eq!(attention_map_with(&f, ChannelPooling::Max).unwrap().values().data(), &[4.0; 4]);

        let single = Tensor::new(&[1, 1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(attention_map(&single).unwrap().values(), &single);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = Tensor::randn(&[1, 4, 2, 2], 1.0, &mut rng);
        let a = attention_map(&f).unwrap();
        for p in 0..4 {
            let mean = (0..4).map(|c| f.data()[c * 4 + p]).sum::<f64>() / 4.0;
            assert!((a.values().data()[p] - mean).abs() < 1e-12);
        }
        assert!(attention_map(&Tensor::ones(&[2, 2])).is_err());
    }

    #[test]
    fn drop_mask_examples() {
        let m = drop_mask(&map2x2([1.0, 0.5, 0.2, 0.9]), 0.8).unwrap();
        assert_eq!(m.values().data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(m.alpha(), Some(0.8));
        let m = drop_mask(&map2x2([1.0, 0.5, 0.2, 0.9]), 1.0).unwrap();
        assert_eq!(m.values().data(), &[1.0; 4]);
        let m = drop_mask(&map2x2([0.0; 4]), 0.8).unwrap();
        assert_eq!(m.values().data(), &[1.0; 4]);
        assert!(matches!(drop_mask(&map2x2([0.0; 4]), 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn threshold_equality_survives() {
        // 0.5 * 1.0 == 0.5 exactly: not strictly greater, so kept.
        let m = drop_mask(&map2x2([1.0, 0.5, 0.25, 0.75]), 0.5).unwrap();
        assert_eq!(m.values().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn thresholds_are_per_sample() {
        let a = AttentionMap::new(
            Tensor::new(&[2, 1, 1, 2], vec![10.0, 9.0, 1.0, 0.5]).unwrap(),
        )
        .unwrap();
        let m = drop_mask(&a, 0.8).unwrap();
        assert_eq!(m.values().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn quantile_erases_exact_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = AttentionMap::new(Tensor::randn(&[3, 1, 5, 4], 1.0, &mut rng)).unwrap();
        let m = quantile_mask(&a, 0.2).unwrap();
        for s in 0..3 {
            assert_eq!(m.sample(s).iter().filter(|&&v| v == 0.0).count(), 4);
            let kept_max = a
                .sample(s)
                .iter()
                .zip(m.sample(s))
                .filter(|(_, &k)| k == 1.0)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let dropped_min = a
                .sample(s)
                .iter()
                .zip(m.sample(s))
                .filter(|(_, &k)| k == 0.0)
                .map(|(v, _)| *v)
                .fold(f64::INFINITY, f64::min);
            assert!(dropped_min >= kept_max);
        }
    }

    #[test]
    fn apply_drop_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let mut t = Tape::new();
        let x = t.constant(f.clone());
        let y = apply_drop(&mut t, x, &DropMask::ones(2, 2, 2)).unwrap();
        assert_eq!(t.value(y), &f);

        let mut m = vec![1.0; 8];
        m[0] = 0.0;
        let mask = DropMask::new(Tensor::new(&[2, 1, 2, 2], m).unwrap()).unwrap();
        let y = apply_drop(&mut t, x, &mask).unwrap();
        for c in 0..3 {
            assert_eq!(t.value(y).at4(0, c, 0, 0), 0.0);
            assert_eq!(t.value(y).at4(0, c, 1, 1), f.at4(0, c, 1, 1));
            assert_eq!(t.value(y).at4(1, c, 0, 0), f.at4(1, c, 0, 0));
        }

        let bits: Vec<f64> = (0..8).map(|_| if rand::Rng::gen_bool(&mut rng, 0.5) { 1.0 } else { 0.0 }).collect();
        let mask = DropMask::new(Tensor::new(&[2, 1, 2, 2], bits.clone()).unwrap()).unwrap();
        let y = apply_drop(&mut t, x, &mask).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for p in 0..4 {
                    let expected = f.data()[(n * 3 + c) * 4 + p] * bits[n * 4 + p];
                    assert_eq!(t.value(y).data()[(n * 3 + c) * 4 + p], expected);
                }
            }
        }
        let wrong = DropMask::ones(2, 3, 2);
        assert!(matches!(apply_drop(&mut t, x, &wrong), Err(Error::Dimension(_))));
        assert!(DropMask::new(Tensor::full(&[1, 1, 1, 2], 0.5)).is_err());
    }

    #[test]
    fn gradient_skips_erased_positions() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::ones(&[1, 2, 1, 2]).requiring_grad());
        let mask = DropMask::new(Tensor::new(&[1, 1, 1, 2], vec![0.0, 1.0]).unwrap()).unwrap();
        let y = apply_drop(&mut t, x, &mask).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn random_block_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let all = random_block_drop(&f, 1.0, 1.0, &mut rng).unwrap();
        assert!(all.data().iter().all(|&v| v == 0.0));

        let mask = random_block_mask(2, 4, 4, 0.5, 0.5, &mut rng).unwrap();
        assert_eq!(drop_fraction(&mask), vec![0.25, 0.25]);
        assert_eq!(mask.sample(0), mask.sample(1));
        let zeros: Vec<usize> = (0..16).filter(|&i| mask.sample(0)[i] == 0.0).collect();
        let (r0, c0) = (zeros[0] / 4, zeros[0] % 4);
        assert_eq!(zeros, vec![r0 * 4 + c0, r0 * 4 + c0 + 1, (r0 + 1) * 4 + c0, (r0 + 1) * 4 + c0 + 1]);

        let a = random_block_drop(&f, 0.5, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = random_block_drop(&f, 0.5, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(random_block_mask(1, 4, 4, 0.0, 0.5, &mut rng).is_err());
    }

    #[test]
    fn drop_fraction_examples() {
        assert_eq!(drop_fraction(&DropMask::ones(1, 3, 3)), vec![0.0]);
        let m = DropMask::new(Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(drop_fraction(&m), vec![0.5]);
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        fn map_strategy() -> impl Strategy<Value = AttentionMap> {
            (1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(n, h, w)| {
                prop::collection::vec(0.0f64..10.0, n * h * w).prop_map(move |v| {
                    AttentionMap::new(Tensor::new(&[n, 1, h, w], v).unwrap()).unwrap()
                })
            })
        }

        proptest! {
            #[test]
            fn argmax_is_always_erased(map in map_strategy(), alpha in 0.01f64..0.999) {
                let m = drop_mask(&map, alpha).unwrap();
                let (n, _, _) = map.dims();
                for s in 0..n {
                    let vals = map.sample(s);
                    let peak = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    if peak > 0.0 {
                        for (v, k) in vals.iter().zip(m.sample(s)) {
                            if *v == peak {
                                prop_assert_eq!(*k, 0.0);
                            }
                        }
                    }
                }
            }

            #[test]
            fn fraction_non_increasing_in_alpha(map in map_strategy(), a in 0.01f64..2.0, b in 0.01f64..2.0) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let f_lo = drop_fraction(&drop_mask(&map, lo).unwrap());
                let f_hi = drop_fraction(&drop_mask(&map, hi).unwrap());
                for (x, y) in f_lo.iter().zip(&f_hi) {
                    prop_assert!(y <= x);
                }
            }
        }
    }
}
