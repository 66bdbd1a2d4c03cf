//! Datasets: PGM corpora with a `filename,label` CSV, the synthetic
//! blob-detection set, train/valid/test splitting and the identity latent
//! mapper.

mod pgm;
mod synthetic;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Array, Float, Tensor};

pub use pgm::{decode_pgm, encode_pgm, from_pixel, read_pgm, to_pixel, write_pgm};
pub use synthetic::{generate_synthetic, Background, SyntheticSpec};

/// Read access to images only. Everything that must not see labels
/// (pretraining, generation, feature extraction) takes this trait.
pub trait ImageSource {
    fn len(&self) -> usize;
    /// Image `i` as a `C×H×W` array in `[−1, 1]`.
    fn image(&self, i: usize) -> &Array<f32>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Images with integer class labels.
pub trait LabeledSource: ImageSource {
    fn label(&self, i: usize) -> Option<usize>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub name: String,
    pub image: Array<f32>,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub class_names: Option<Vec<String>>,
    pub split: Split,
}

impl ImageSource for Dataset {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn image(&self, i: usize) -> &Array<f32> {
        &self.items[i].image
    }
}

impl LabeledSource for Dataset {
    fn label(&self, i: usize) -> Option<usize> {
        self.items[i].label
    }
}

impl Dataset {
    pub fn image_shape(&self) -> Option<&[usize]> {
        self.items.first().map(|it| it.image.shape.as_slice())
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        self.items.iter().map(|it| it.label).collect()
    }

    /// Check the shared-shape and range invariants.
    pub fn validate(&self) -> Result<()> {
        let Some(shape) = self.image_shape() else {
            return Ok(());
        };
        for it in &self.items {
            if it.image.shape != shape {
                return Err(Error::Ingestion {
                    file: it.name.clone().into(),
                    msg: format!("shape {:?} differs from {:?}", it.image.shape, shape),
                });
            }
            if it.image.data.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(Error::Range(format!("{}: pixel outside [-1, 1]", it.name)));
            }
        }
        Ok(())
    }

    /// Items with the given indices, relabelled with `split`.
    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        Dataset {
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            class_names: self.class_names.clone(),
            split,
        }
    }

    /// Stack items `indices` into a `(B, C, H, W)` batch.
    pub fn batch<F: Float>(&self, indices: &[usize]) -> Result<Tensor<F>> {
        stack(self, indices)
    }
}

/// Stack images from any source into a `(B, C, H, W)` tensor.
pub fn stack<F: Float>(src: &(impl ImageSource + ?Sized), indices: &[usize]) -> Result<Tensor<F>> {
    let first = indices
        .first()
        .map(|&i| src.image(i).shape.clone())
        .ok_or_else(|| Error::Input("empty batch".into()))?;
    let mut data = Vec::with_capacity(indices.len() * first.iter().product::<usize>());
    for &i in indices {
        let img = src.image(i);
        if img.shape != first {
            return Err(Error::Input(format!("image {i} has shape {:?}, expected {first:?}", img.shape)));
        }
        data.extend(img.data.iter().map(|&v| F::from_f64(v as f64)));
    }
    let mut shape = vec![indices.len()];
    shape.extend(first);
    Ok(Tensor::new(&shape, data)?)
}

/// Load every `*.pgm` under `root` (sorted by file name). With a label CSV
/// (`filename,label`), every image needs a row and every row an image.
pub fn load_dataset(root: &Path, labels_csv: Option<&Path>) -> Result<Dataset> {
    let mut names: Vec<String> = fs::read_dir(root)
        .map_err(|e| Error::Ingestion {
            file: root.to_path_buf(),
            msg: e.to_string(),
        })?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".pgm"))
        .collect();
    names.sort();

    let labels = labels_csv.map(|p| read_labels(p, root)).transpose()?;
    let mut items = Vec::with_capacity(names.len());
    for name in names {
        let path = root.join(&name);
        let image = read_pgm(&path)?;
        let label = match &labels {
            Some(map) => Some(*map.get(&name).ok_or_else(|| Error::Ingestion {
                file: path.clone(),
                msg: "no label row".into(),
            })?),
            None => None,
        };
        items.push(Item { name, image, label });
    }
    let ds = Dataset {
        items,
        class_names: None,
        split: if labels.is_some() { Split::Train } else { Split::Pretrain },
    };
    if let Some(shape) = ds.image_shape() {
        if let Some(bad) = ds.items.iter().find(|it| it.image.shape != shape) {
            return Err(Error::Ingestion {
                file: root.join(&bad.name),
                msg: format!("shape {:?} differs from {:?}", bad.image.shape, shape),
            });
        }
    }
    Ok(ds)
}

fn read_labels(csv_path: &Path, root: &Path) -> Result<HashMap<String, usize>> {
    let ingest = |msg: String| Error::Ingestion {
        file: csv_path.to_path_buf(),
        msg,
    };
    let mut reader = csv::Reader::from_path(csv_path).map_err(|e| ingest(e.to_string()))?;
    let mut map = HashMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| ingest(e.to_string()))?;
        let (Some(name), Some(label)) = (row.get(0), row.get(1)) else {
            return Err(ingest(format!("malformed row {:?}", row)));
        };
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| ingest(format!("unknown label `{label}` for {name}")))?;
        if !root.join(name).is_file() {
            return Err(Error::Ingestion {
                file: root.join(name),
                msg: "listed in label CSV but missing".into(),
            });
        }
        map.insert(name.to_string(), label);
    }
    Ok(map)
}

/// Write images as `P5` files plus `labels.csv` when labelled.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for it in &ds.items {
        write_pgm(&dir.join(&it.name), &it.image)?;
    }
    if ds.items.iter().any(|it| it.label.is_some()) {
        let mut w = csv::Writer::from_path(dir.join("labels.csv")).map_err(csv_io)?;
        w.write_record(["filename", "label"]).map_err(csv_io)?;
        for it in &ds.items {
            let label = it.label.map(|l| l.to_string()).unwrap_or_default();
            w.write_record([it.name.as_str(), label.as_str()]).map_err(csv_io)?;
        }
        w.flush()?;
    }
    Ok(())
}

pub(crate) fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Sizes for `fractions` of `n`: floor for train and valid, the remainder
/// goes to test.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let train = (fractions[0] * n as f64).floor() as usize;
    let valid = ((fractions[1] * n as f64).floor() as usize).min(n - train);
    Ok([train, valid, n - train - valid])
}

/// Deterministic shuffled partition into train / valid / test.
pub fn split(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let [a, b, _] = split_sizes(ds.len(), fractions)?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((
        ds.subset(&order[..a], Split::Train),
        ds.subset(&order[a..a + b], Split::Valid),
        ds.subset(&order[a + b..], Split::Test),
    ))
}

/// Identity latent mapper. In strict mode values outside `[−1, 1]` are
/// rejected.
pub fn to_latent<F: Float>(image: &Tensor<F>, strict: bool) -> Result<Tensor<F>> {
    if image.rank() < 3 {
        return Err(Error::Input(format!("expected a C×H×W image, got shape {:?}", image.shape())));
    }
    if strict && image.data().iter().any(|v| !(v.as_f64() >= -1.0 && v.as_f64() <= 1.0)) {
        return Err(Error::Range("latent input outside [-1, 1]".into()));
    }
    Ok(image.clone())
}

/// Back to image space, clamped to `[−1, 1]`.
pub fn from_latent<F: Float>(z: &Tensor<F>) -> Result<Tensor<F>> {
    let lo = F::from_f64(-1.0);
    let hi = F::one();
    let data = z.data().iter().map(|&v| if v < lo { lo } else if v > hi { hi } else { v }).collect();
    Ok(Tensor::new(z.shape(), data)?)
}
