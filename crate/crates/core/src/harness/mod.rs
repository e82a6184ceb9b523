//! Configuration, data, persistence, heatmaps and the training driver.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod gradsuite;
pub mod heatmap;
pub mod ppm;
pub mod train;

use std::path::{Path, PathBuf};

pub use config::{lr_schedule, Config, DropModeKind, Variant};
pub use dataset::{generate_synthetic_dataset, parse_file_name, DatasetIndex, Record, Split};
pub use ppm::Image;
pub use train::{desk_dataset, evaluate_model, run_experiment, train, EpochLog, TrainOutcome, K_MAX};

use crate::adadrop::attention_map_with;
use crate::error::{Error, Result};
use crate::net::{backbone_forward, ModelParams};
use crate::tensor::Tape;

/// For each record writes `<stem>_attention.ppm` (map upscaled to the image),
/// `<stem>_overlay.ppm` and `<stem>_mask.ppm` into `out_dir`.
pub fn visualize(params: &ModelParams, config: &Config, images: &DatasetIndex, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(images.to_tensor()?);
    let featmap = backbone_forward(&mut tape, x, &bound)?;
    let map = attention_map_with(tape.value(featmap), config.channel_pooling)?;
    let mask = config.drop_mode().mask(&map)?;
    let mut written = Vec::new();
    for (n, r) in images.records.iter().enumerate() {
        let stem = r.name.trim_end_matches(".ppm");
        let size = (r.image.height, r.image.width);
        let a = out_dir.join(format!("{stem}_attention.ppm"));
        heatmap::export_heatmap(&map, n, Some(size), &a)?;
        let o = out_dir.join(format!("{stem}_overlay.ppm"));
        heatmap::export_overlay(&map, n, &r.image, &o)?;
        let m = out_dir.join(format!("{stem}_mask.ppm"));
        heatmap::export_mask(&mask, n, size, &m)?;
        written.extend([a, o, m]);
    }
    Ok(written)
}
