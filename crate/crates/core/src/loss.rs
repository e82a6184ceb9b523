//! Identity classification loss, soft-margin batch-hard triplet loss and the
//! P x K batch sampler that makes every anchor's triplet well defined.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::tape::softplus;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Batch composition: `identities` people with `instances` images each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PkBatchSpec {
    identities: usize,
    instances: usize,
}

impl PkBatchSpec {
    pub fn new(identities: usize, instances: usize) -> Result<Self> {
        if identities < 2 || instances < 2 {
            return Err(Error::contract(format!(
                "P x K batches need P >= 2 and K >= 2, got {identities} x {instances}"
            )));
        }
        Ok(Self {
            identities,
            instances,
        })
    }

    pub fn identities(&self) -> usize {
        self.identities
    }

    pub fn instances(&self) -> usize {
        self.instances
    }

    pub fn batch_size(&self) -> usize {
        self.identities * self.instances
    }
}

/// Hardest positive and negative per anchor, with the indices that won.
#[derive(Debug, Clone, PartialEq)]
pub struct HardPairs {
    pub hp: Vec<f64>,
    pub hn: Vec<f64>,
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
}

impl HardPairs {
    pub fn margins(&self) -> Vec<f64> {
        self.hp.iter().zip(&self.hn).map(|(p, n)| p - n).collect()
    }
}

/// Mean (or summed) `-log softmax(logits)[n, label_n]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
    let mean = tape.cross_entropy(logits, labels)?;
    Ok(match reduction {
        Reduction::Mean => mean,
        Reduction::Sum => tape.scale(mean, labels.len() as f64),
    })
}

pub fn pairwise_distances(tape: &mut Tape, embeddings: Var) -> Result<Var> {
    tape.pairwise_distances(embeddings)
}

/// Scans a distance matrix for each anchor's farthest same-label sample
/// (anchor included) and nearest different-label sample. Ties go to the
/// lowest index.
pub fn batch_hard(distances: &Tensor, labels: &[usize]) -> Result<HardPairs> {
    let n = labels.len();
    if distances.shape() != [n, n] {
        return Err(Error::dim(format!(
            "distance matrix {:?} for {n} labels",
            distances.shape()
        )));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::contract("batch-hard mining needs at least two identities"));
    }
    if let Some((label, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::contract(format!(
            "identity {label} has a single sample; no positive exists"
        )));
    }
    let d = distances.data();
    let mut pairs = HardPairs {
        hp: Vec::with_capacity(n),
        hn: Vec::with_capacity(n),
        positive: Vec::with_capacity(n),
        negative: Vec::with_capacity(n),
    };
    for q in 0..n {
        let row = &d[q * n..(q + 1) * n];
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..n {
            if labels[j] == labels[q] {
                if pos.map_or(true, |p| row[j] > row[p]) {
                    pos = Some(j);
                }
            } else if neg.map_or(true, |m| row[j] < row[m]) {
                neg = Some(j);
            }
        }
        let (p, m) = (pos.expect("anchor is its own positive"), neg.expect("two identities"));
        pairs.hp.push(row[p]);
        pairs.hn.push(row[m]);
        pairs.positive.push(p);
        pairs.negative.push(m);
    }
    Ok(pairs)
}

/// `sum_q log(1 + exp(hp_q - hn_q))`.
pub fn soft_margin_triplet(hp: &[f64], hn: &[f64]) -> Result<f64> {
    if hp.len() != hn.len() {
        return Err(Error::dim(format!("{} positives vs {} negatives", hp.len(), hn.len())));
    }
    Ok(hp.iter().zip(hn).map(|(p, n)| softplus(p - n)).sum())
}

/// Differentiable soft-margin batch-hard triplet loss over an `N x D`
/// embedding. Mining is done on the forward values; gradients flow through
/// the selected distances only.
pub fn triplet_loss(
    tape: &mut Tape,
    embeddings: Var,
    labels: &[usize],
    reduction: Reduction,
) -> Result<(Var, HardPairs)> {
    let dist = pairwise_distances(tape, embeddings)?;
    let pairs = batch_hard(tape.value(dist), labels)?;
    let n = labels.len();
    let pos_idx: Vec<usize> = pairs.positive.iter().enumerate().map(|(q, p)| q * n + p).collect();
    let neg_idx: Vec<usize> = pairs.negative.iter().enumerate().map(|(q, m)| q * n + m).collect();
    let hp = tape.gather(dist, &pos_idx)?;
    let hn = tape.gather(dist, &neg_idx)?;
    let margin = tape.sub(hp, hn)?;
    let terms = tape.softplus(margin);
    let loss = match reduction {
        Reduction::Sum => tape.sum(terms),
        Reduction::Mean => tape.mean(terms),
    };
    Ok((loss, pairs))
}

/// Unweighted sum of the label-prediction and metric-learning terms.
pub fn total_loss(tape: &mut Tape, label_prediction: Var, metric: Var) -> Result<Var> {
    tape.add(label_prediction, metric)
}

/// Draws `P` distinct identities and `K` images of each. Identities with
/// fewer than `K` images are sampled with replacement.
pub fn pk_sample<R: Rng + ?Sized>(labels: &[usize], spec: PkBatchSpec, rng: &mut R) -> Result<Vec<usize>> {
    let mut by_identity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_identity.entry(l).or_default().push(i);
    }
    let groups: Vec<&Vec<usize>> = by_identity.values().collect();
    if groups.len() < spec.identities {
        return Err(Error::contract(format!(
            "dataset has {} identities, batch needs {}",
            groups.len(),
            spec.identities
        )));
    }
    let mut batch = Vec::with_capacity(spec.batch_size());
    for g in sample(rng, groups.len(), spec.identities).iter() {
        let members = groups[g];
        if members.len() >= spec.instances {
            batch.extend(sample(rng, members.len(), spec.instances).iter().map(|i| members[i]));
        } else {
            batch.extend((0..spec.instances).map(|_| members[rng.gen_range(0..members.len())]));
        }
    }
    Ok(batch)
}
