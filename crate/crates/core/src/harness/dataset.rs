//! Dataset index, `<id>_c<cam>_<idx>.ppm` ingestion and the synthetic
//! identity generator.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ppm::Image;
use crate::error::{Error, Result};
use crate::eval::GalleryItem;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Query, Split::Gallery];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub name: String,
    pub identity: i64,
    pub camera: i64,
    pub split: Split,
    pub image: Image,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetIndex {
    pub records: Vec<Record>,
}

/// Parses `<id>_c<cam>_<idx>.ppm` into `(identity, camera)`.
pub fn parse_file_name(name: &str) -> Option<(i64, i64)> {
    let stem = name.strip_suffix(".ppm")?;
    let mut parts = stem.split('_');
    let (id, cam, idx) = (parts.next()?, parts.next()?, parts.next()?);
    if parts.next().is_some() || idx.is_empty() || !idx.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    let id_digits = id.strip_prefix('-').unwrap_or(id);
    let cam = cam.strip_prefix('c')?;
    if !digits(id_digits) || !digits(cam) {
        return None;
    }
    Some((id.parse().ok()?, cam.parse().ok()?))
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> DatasetIndex {
        DatasetIndex {
            records: self.records.iter().filter(|r| r.split == split).cloned().collect(),
        }
    }

    /// Images as an N x 3 x H x W tensor scaled to [0, 1].
    pub fn to_tensor(&self) -> Result<Tensor> {
        let first = self.records.first().ok_or_else(|| Error::contract("empty dataset"))?;
        let (h, w) = (first.image.height, first.image.width);
        let mut data = Vec::with_capacity(self.len() * 3 * h * w);
        for r in &self.records {
            if (r.image.height, r.image.width) != (h, w) {
                return Err(Error::dim(format!("{} is not {h}x{w}", r.name)));
            }
            for c in 0..3 {
                data.extend(r.image.rgb.iter().skip(c).step_by(3).map(|&v| f64::from(v) / 255.0));
            }
        }
        Tensor::new(&[self.len(), 3, h, w], data)
    }

    /// Dense class labels (identities in ascending order) and class count.
    pub fn class_labels(&self) -> (Vec<usize>, usize) {
        let mut ids: BTreeMap<i64, usize> = self.records.iter().map(|r| (r.identity, 0)).collect();
        for (k, v) in ids.values_mut().enumerate() {
            *v = k;
        }
        let labels = self.records.iter().map(|r| ids[&r.identity]).collect();
        (labels, ids.len())
    }

    /// Pairs embeddings (one row per record) with identity and camera.
    pub fn gallery_items(&self, embeddings: &Tensor) -> Result<Vec<GalleryItem>> {
        if embeddings.rank() != 2 || embeddings.shape()[0] != self.len() {
            return Err(Error::dim(format!(
                "{} records but embeddings are {:?}",
                self.len(),
                embeddings.shape()
            )));
        }
        let d = embeddings.shape()[1];
        Ok(self
            .records
            .iter()
            .zip(embeddings.data().chunks(d))
            .map(|(r, e)| GalleryItem {
                embedding: e.to_vec(),
                identity: r.identity,
                camera: r.camera,
            })
            .collect())
    }

    /// Reads every `.ppm` in `dir` (sorted by name); all get tag `split`.
    pub fn load(dir: &Path, height: usize, width: usize, split: Split) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let path = entry.path();
            if path.is_file() && path.extension().is_some_and(|e| e == "ppm") {
                paths.push(path);
            }
        }
        paths.sort();
        let mut records = Vec::with_capacity(paths.len());
        for path in paths {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let ingest = |message: String| Error::Ingestion {
                path: path.clone(),
                message,
            };
            let (identity, camera) =
                parse_file_name(&name).ok_or_else(|| ingest("file name is not <id>_c<cam>_<idx>.ppm".into()))?;
            let image = Image::read(&path)?;
            if (image.width, image.height) != (width, height) {
                return Err(ingest(format!(
                    "image is {}x{}, expected {width}x{height}",
                    image.width, image.height
                )));
            }
            records.push(Record {
                name,
                identity,
                camera,
                split,
                image,
            });
        }
        if records.is_empty() {
            return Err(Error::Ingestion {
                path: dir.to_path_buf(),
                message: "no .ppm images found".into(),
            });
        }
        Ok(Self { records })
    }

    /// Writes `train/`, `query/` and `gallery/` subdirectories under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for split in Split::ALL {
            let sub = dir.join(split.dir_name());
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        }
        for r in &self.records {
            r.image.write(&dir.join(r.split.dir_name()).join(&r.name))?;
        }
        Ok(())
    }
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).min(5.999_999);
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Per-identity appearance: upper and lower body colours plus a shape offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityParams {
    pub upper: [f64; 3],
    pub lower: [f64; 3],
    /// Vertical offset of the upper/lower boundary, in pixels at 64 rows.
    pub split_offset: i64,
    /// Horizontal offset of the figure centre, in pixels at 32 columns.
    pub center_offset: i64,
}

impl IdentityParams {
    pub fn for_identity(id: usize) -> Self {
        let k = id as f64;
        Self {
            upper: hsv(k * GOLDEN, 0.85, 0.9),
            lower: hsv(0.37 + 2.0 * k * GOLDEN, 0.6, 0.55 + 0.3 * ((id % 3) as f64 / 2.0)),
            split_offset: (id * 7 % 9) as i64 - 4,
            center_offset: (id * 3 % 5) as i64 - 2,
        }
    }
}

fn camera_tint(cam: usize) -> [f64; 3] {
    let k = cam as f64;
    [
        1.0 + 0.12 * (k * 2.1).sin(),
        1.0 + 0.08 * (k * 1.3 + 1.0).sin(),
        1.0 + 0.12 * (k * 2.1 + 2.0).sin(),
    ]
}

fn render<R: Rng>(p: &IdentityParams, cam: usize, height: usize, width: usize, rng: &mut R) -> Image {
    let sy = height as f64 / 64.0;
    let sx = width as f64 / 32.0;
    let dx = rng.gen_range(-2..=2) as f64;
    let dy = rng.gen_range(-2..=2) as f64;
    let tint = camera_tint(cam);
    let brightness = rng.gen_range(0.9..1.1);
    let bg: [f64; 3] = {
        let g = rng.gen_range(0.35..0.6);
        [g, g, g]
    };
    let noise = Normal::new(0.0, 0.03).expect("valid std");
    let cx = 16.0 + p.center_offset as f64 + dx;
    let split = 32.0 + p.split_offset as f64 + dy;
    let head_y = 8.0 + dy;
    let mut rgb = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = ((x as f64 + 0.5) / sx, (y as f64 + 0.5) / sy);
            let base = if ((u - cx) / 4.0).powi(2) + ((v - head_y) / 5.0).powi(2) <= 1.0 {
                [0.85, 0.68, 0.55]
            } else if (u - cx).abs() <= 8.0 && v > 14.0 + dy && v < split {
                p.upper
            } else if (u - cx).abs() <= 6.5 && v >= split && v < 60.0 + dy {
                p.lower
            } else {
                bg
            };
            for c in 0..3 {
                let value = base[c] * tint[c] * brightness + noise.sample(rng);
                rgb.push((value.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Image::new(width, height, rgb)
}

/// `n_ids` identities with `per_id` images each. Instance `i` is seen by
/// camera `i % n_cams`; the first half of each identity's instances is for
/// training and the rest alternate query / gallery.
pub fn generate_synthetic_dataset(
    n_ids: usize,
    per_id: usize,
    n_cams: usize,
    seed: u64,
    height: usize,
    width: usize,
) -> Result<DatasetIndex> {
    if n_ids < 2 || per_id < 2 || n_cams < 2 {
        return Err(Error::contract("need at least 2 identities, 2 images each and 2 cameras"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_ids * per_id);
    let train_count = per_id / 2;
    for id in 0..n_ids {
        let params = IdentityParams::for_identity(id);
        for i in 0..per_id {
            let cam = i % n_cams;
            let split = if i < train_count {
                Split::Train
            } else if (i - train_count) % 2 == 0 {
                Split::Query
            } else {
                Split::Gallery
            };
            records.push(Record {
                name: format!("{id:04}_c{}_{i:02}.ppm", cam + 1),
                identity: id as i64,
                camera: cam as i64 + 1,
                split,
                image: render(&params, cam, height, width, &mut rng),
            });
        }
    }
    Ok(DatasetIndex { records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_names() {
        assert_eq!(parse_file_name("0003_c1_07.ppm"), Some((3, 1)));
        assert_eq!(parse_file_name("-1_c2_00.ppm"), Some((-1, 2)));
        for bad in ["0003_1_07.ppm", "0003_c1.ppm", "abc_c1_00.ppm", "0003_c1_07.png", "1_c1_2_3.ppm", "1_c_2.ppm"] {
            assert_eq!(parse_file_name(bad), None, "{bad}");
        }
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let a = generate_synthetic_dataset(20, 8, 2, 7, 64, 32).unwrap();
        assert_eq!(a.len(), 160);
        let b = generate_synthetic_dataset(20, 8, 2, 7, 64, 32).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(20, 8, 2, 8, 64, 32).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.split(Split::Train).len(), 80);
        assert_eq!(a.split(Split::Query).len(), 40);
        assert_eq!(a.split(Split::Gallery).len(), 40);
    }

    #[test]
    fn held_out_matches_are_cross_camera() {
        let d = generate_synthetic_dataset(5, 8, 2, 0, 64, 32).unwrap();
        let q = d.split(Split::Query);
        let g = d.split(Split::Gallery);
        for r in &q.records {
            assert!(g.records.iter().any(|x| x.identity == r.identity && x.camera != r.camera));
        }
    }

    #[test]
    fn identities_differ_in_pixel_space() {
        let d = generate_synthetic_dataset(20, 2, 2, 3, 64, 32).unwrap();
        let first: Vec<&Record> = d.records.iter().filter(|r| r.name.ends_with("_00.ppm")).collect();
        for i in 0..first.len() {
            for j in i + 1..first.len() {
                let dist: f64 = first[i]
                    .image
                    .rgb
                    .iter()
                    .zip(&first[j].image.rgb)
                    .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                    .sum();
                assert!(dist > 0.0);
            }
        }
        for id in 0..20 {
            for other in id + 1..20 {
                assert_ne!(IdentityParams::for_identity(id), IdentityParams::for_identity(other));
            }
        }
    }

    #[test]
    fn tensor_layout_and_labels() {
        let d = generate_synthetic_dataset(3, 2, 2, 1, 4, 2).unwrap();
        let t = d.to_tensor().unwrap();
        assert_eq!(t.shape(), &[6, 3, 4, 2]);
        let img = &d.records[1].image;
        assert_eq!(t.at4(1, 2, 3, 1), f64::from(img.pixel(1, 3)[2]) / 255.0);
        let (labels, k) = d.class_labels();
        assert_eq!(k, 3);
        assert_eq!(labels, vec![0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn disk_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_synthetic_dataset(3, 4, 2, 5, 8, 4).unwrap();
        d.write(dir.path()).unwrap();
        for split in Split::ALL {
            let back = DatasetIndex::load(&dir.path().join(split.dir_name()), 8, 4, split).unwrap();
            assert_eq!(back, d.split(split));
        }
        let train = dir.path().join("train");
        assert!(matches!(
            DatasetIndex::load(&train, 8, 5, Split::Train),
            Err(Error::Ingestion { .. })
        ));
        std::fs::write(train.join("bad.ppm"), b"P6\n1 1\n255\n\0\0\0").unwrap();
        match DatasetIndex::load(&train, 8, 4, Split::Train) {
            Err(Error::Ingestion { path, .. }) => assert!(path.ends_with("bad.ppm")),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::remove_file(train.join("bad.ppm")).unwrap();
        std::fs::write(train.join("0009_c1_00.ppm"), b"P5\n1 1\n255\n\0").unwrap();
        assert!(matches!(
            DatasetIndex::load(&train, 8, 4, Split::Train),
            Err(Error::Ingestion { .. })
        ));
    }
}
