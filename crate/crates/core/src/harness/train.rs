//! Training loop, model evaluation and the synthetic end-to-end experiment.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint;
use super::config::{lr_schedule, Config};
use super::dataset::{generate_synthetic_dataset, DatasetIndex, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::loss::{pk_sample, PkBatchSpec};
use crate::net::{embed_all, train_forward, Batch, BranchKind, ModelParams};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor};

pub const K_MAX: usize = 10;
const EMBED_CHUNK: usize = 64;

/// One JSON line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub iterations: usize,
    /// Means over the epoch's iterations.
    pub loss: f64,
    pub cross_entropy: f64,
    pub triplet: f64,
    pub attention_iterations: usize,
    pub drop_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    pub checkpoints: Vec<PathBuf>,
}

fn gather(images: &Tensor, indices: &[usize]) -> Tensor {
    let per = images.numel() / images.shape()[0];
    let mut data = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
    }
    let mut shape = images.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(&shape, data).expect("gathered rows keep the row size")
}

struct LogFile {
    path: PathBuf,
    file: File,
}

impl LogFile {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("log.jsonl");
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, file })
    }

    fn append(&mut self, entry: &EpochLog) -> Result<()> {
        let line = serde_json::to_string(entry).expect("log entries serialise");
        writeln!(self.file, "{line}")
            .and_then(|()| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Trains on every record of `data` (identities become classes in
/// ascending order). With `out_dir`, writes `log.jsonl` and periodic
/// `checkpoint_<epoch>.stdb` files there.
pub fn train(config: &Config, data: &DatasetIndex, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let (labels, classes) = data.class_labels();
    let spec = PkBatchSpec::new(config.p, config.n_per)?;
    if spec.batch_size() > data.len() {
        return Err(Error::contract(format!(
            "batch of {} exceeds the {} training images",
            spec.batch_size(),
            data.len()
        )));
    }
    let num_classes = match config.num_classes {
        0 => classes,
        k if k >= classes => k,
        k => {
            return Err(Error::contract(format!(
                "num_classes = {k} but the training set has {classes} identities"
            )))
        }
    };
    let images = data.to_tensor()?;
    if images.shape()[2..] != [config.height, config.width] {
        return Err(Error::dim(format!(
            "training images are {:?}, config expects {}x{}",
            &images.shape()[2..],
            config.height,
            config.width
        )));
    }
    let cameras: Vec<i64> = data.records.iter().map(|r| r.camera).collect();
    let iters = match config.iters_per_epoch {
        0 => data.len().div_ceil(spec.batch_size()),
        n => n,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::init(&config.net_config(num_classes), &mut rng)?;
    let settings = config.train_settings();
    let mut adam = Adam::new(AdamConfig::default());
    let mut log_file = out_dir.map(LogFile::create).transpose()?;
    let mut log = Vec::with_capacity(config.epochs);
    let mut checkpoints = Vec::new();

    for epoch in 0..config.epochs {
        let lr = lr_schedule(epoch, config.base_lr);
        let mut entry = EpochLog {
            epoch,
            lr,
            iterations: iters,
            loss: 0.0,
            cross_entropy: 0.0,
            triplet: 0.0,
            attention_iterations: 0,
            drop_iterations: 0,
        };
        for _ in 0..iters {
            let idx = pk_sample(&labels, spec, &mut rng)?;
            let batch = Batch {
                images: gather(&images, &idx),
                labels: idx.iter().map(|&i| labels[i]).collect(),
                cameras: idx.iter().map(|&i| cameras[i]).collect(),
            };
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let out = train_forward(&mut tape, &batch, &bound, &settings, &mut rng)?;
            tape.backward(out.total)?;
            params.zero_grad();
            params.accumulate_grads(&tape, &bound)?;
            adam.step(&mut params.tensors_mut(), lr)?;

            entry.loss += tape.value(out.total).item();
            for b in &out.branches {
                entry.cross_entropy += b.cross_entropy;
                entry.triplet += b.triplet;
            }
            match out.selected {
                Some(BranchKind::Attention) => entry.attention_iterations += 1,
                Some(BranchKind::Drop) => entry.drop_iterations += 1,
                _ => {}
            }
        }
        let n = iters as f64;
        entry.loss /= n;
        entry.cross_entropy /= n;
        entry.triplet /= n;
        if !entry.loss.is_finite() || !params.is_finite() {
            return Err(Error::contract(format!("training diverged at epoch {epoch}")));
        }
        if let Some(f) = log_file.as_mut() {
            f.append(&entry)?;
        }
        log.push(entry);
        let done = epoch + 1;
        if let Some(dir) = out_dir {
            if done % config.checkpoint_interval == 0 || done == config.epochs {
                let path = dir.join(format!("checkpoint_{done:04}.stdb"));
                checkpoint::save(&params, config, &path)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        checkpoints,
    })
}

/// Embeds both sets with the test-time embedding and scores retrieval.
pub fn evaluate_model(params: &ModelParams, query: &DatasetIndex, gallery: &DatasetIndex) -> Result<EvalReport> {
    let q = query.gallery_items(&embed_all(params, &query.to_tensor()?, EMBED_CHUNK)?)?;
    let g = gallery.gallery_items(&embed_all(params, &gallery.to_tensor()?, EMBED_CHUNK)?)?;
    evaluate(&q, &g, K_MAX)
}

/// Synthetic identity dataset matching the desk-scale protocol:
/// 20 identities x 8 images x 2 cameras.
pub fn desk_dataset(seed: u64, config: &Config) -> Result<DatasetIndex> {
    generate_synthetic_dataset(20, 8, 2, seed, config.height, config.width)
}

/// Trains on the train split of `data` and evaluates query vs gallery.
pub fn run_experiment(config: &Config, data: &DatasetIndex) -> Result<(TrainOutcome, EvalReport)> {
    let outcome = train(config, &data.split(Split::Train), None)?;
    let report = evaluate_model(&outcome.params, &data.split(Split::Query), &data.split(Split::Gallery))?;
    Ok((outcome, report))
}
