//! CIFAR-10/100 binary ingestion, normalization, augmentation hookup, and
//! epoch-deterministic batching.
//!
//! Record layout (published binary format): CIFAR-10 = 1 label byte + 3072
//! pixel bytes; CIFAR-100 = coarse byte + fine byte + 3072 pixel bytes. The
//! pixel block is 1024 R, 1024 G, 1024 B, each plane row-major.

pub mod augment;
pub mod synthetic;

use std::marker::PhantomData;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CxvError, Result};
use crate::scalar::{derive_seed, Scalar};
use crate::tensor::Tensor;

pub use augment::AugmentPolicy;

pub const IMAGE_BYTES: usize = 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetName {
    Cifar10,
    /// CIFAR-100 with fine labels (coarse labels are discarded on load).
    Cifar100Fine,
}

impl DatasetName {
    pub fn classes(&self) -> usize {
        match self {
            DatasetName::Cifar10 => 10,
            DatasetName::Cifar100Fine => 100,
        }
    }

    pub fn record_len(&self) -> usize {
        match self {
            DatasetName::Cifar10 => 1 + IMAGE_BYTES,
            DatasetName::Cifar100Fine => 2 + IMAGE_BYTES,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetName::Cifar10 => "cifar10",
            DatasetName::Cifar100Fine => "cifar100-fine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(DatasetName::Cifar10),
            "cifar100" | "cifar100-fine" => Ok(DatasetName::Cifar100Fine),
            other => Err(CxvError::Data(format!("unknown dataset name '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: DatasetName,
    /// `len * 3072` bytes, channel planes R,G,B row-major per image.
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    /// First `n` records (callers shuffle upstream when they need balance).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            name: self.name,
            images: self.images[..n * IMAGE_BYTES].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

/// Parse one CIFAR binary batch file already read into memory.
pub fn parse_cifar(bytes: &[u8], name: DatasetName) -> Result<Dataset> {
    let record = name.record_len();
    if bytes.len() % record != 0 {
        return Err(CxvError::Format {
            offset: (bytes.len() / record * record) as u64,
            msg: format!(
                "file size {} is not a multiple of the {} record size {record}",
                bytes.len(),
                name.as_str()
            ),
        });
    }
    let n = bytes.len() / record;
    let classes = name.classes() as u8;
    let mut images = Vec::with_capacity(n * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        // CIFAR-100 carries (coarse, fine); the fine label is kept
        let label = match name {
            DatasetName::Cifar10 => rec[0],
            DatasetName::Cifar100Fine => rec[1],
        };
        if label >= classes {
            return Err(CxvError::Data(format!(
                "label {label} out of range [0,{classes}) at record {i}"
            )));
        }
        labels.push(label);
        images.extend_from_slice(&rec[record - IMAGE_BYTES..]);
    }
    Ok(Dataset {
        name,
        images,
        labels,
    })
}

/// Inverse of [`parse_cifar`] for fixtures and synthetic data. CIFAR-100
/// coarse labels are synthesized as `fine / 5`.
pub fn serialize_cifar(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(ds.len() * ds.name.record_len());
    for i in 0..ds.len() {
        match ds.name {
            DatasetName::Cifar10 => out.push(ds.labels[i]),
            DatasetName::Cifar100Fine => {
                out.push(ds.labels[i] / 5);
                out.push(ds.labels[i]);
            }
        }
        out.extend_from_slice(ds.image(i));
    }
    out
}

pub fn load_cifar(path: &Path, name: DatasetName) -> Result<Dataset> {
    let bytes = std::fs::read(path)
        .map_err(|e| CxvError::Data(format!("cannot read {}: {e}", path.display())))?;
    parse_cifar(&bytes, name)
}

/// Load a standard split from a directory of published batch files.
pub fn load_cifar_split(dir: &Path, name: DatasetName, train: bool) -> Result<Dataset> {
    let files: Vec<String> = match (name, train) {
        (DatasetName::Cifar10, true) => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        (DatasetName::Cifar10, false) => vec!["test_batch.bin".into()],
        (DatasetName::Cifar100Fine, true) => vec!["train.bin".into()],
        (DatasetName::Cifar100Fine, false) => vec!["test.bin".into()],
    };
    let mut merged = Dataset {
        name,
        images: Vec::new(),
        labels: Vec::new(),
    };
    for f in files {
        let part = load_cifar(&dir.join(f), name)?;
        merged.images.extend_from_slice(&part.images);
        merged.labels.extend_from_slice(&part.labels);
    }
    Ok(merged)
}

// ---- normalization ---------------------------------------------------------

/// Per-channel statistics of `byte/255`, computed once from the training
/// split and then frozen into the run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

pub fn compute_channel_stats(ds: &Dataset) -> ChannelStats {
    let plane = 1024;
    let mut sum = [0.0f64; 3];
    let mut sum_sq = [0.0f64; 3];
    for i in 0..ds.len() {
        let img = ds.image(i);
        for c in 0..3 {
            for &b in &img[c * plane..(c + 1) * plane] {
                let v = b as f64 / 255.0;
                sum[c] += v;
                sum_sq[c] += v * v;
            }
        }
    }
    let count = (ds.len() * plane) as f64;
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..3 {
        mean[c] = sum[c] / count;
        std[c] = (sum_sq[c] / count - mean[c] * mean[c]).max(1e-12).sqrt();
    }
    ChannelStats { mean, std }
}

/// `x = byte/255`, then per-channel standardization.
pub fn normalize_image<E: Scalar>(img: &[u8], stats: &ChannelStats, out: &mut Vec<E>) {
    let plane = 1024;
    for c in 0..3 {
        let mean = stats.mean[c];
        let inv_std = 1.0 / stats.std[c];
        for &b in &img[c * plane..(c + 1) * plane] {
            out.push(E::from_f64((b as f64 / 255.0 - mean) * inv_std));
        }
    }
}

/// Normalize a whole dataset into one `[N,3,32,32]` tensor.
pub fn normalize<E: Scalar>(ds: &Dataset, stats: &ChannelStats) -> Tensor<E> {
    let mut data = Vec::with_capacity(ds.len() * IMAGE_BYTES);
    for i in 0..ds.len() {
        normalize_image(ds.image(i), stats, &mut data);
    }
    Tensor::from_vec(data, &[ds.len(), 3, 32, 32]).expect("consistent")
}

// ---- batching -----------------------------------------------------------------

pub struct Batches<'d, E: Scalar> {
    ds: &'d Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    epoch: u64,
    augment: Option<AugmentPolicy>,
    stats: ChannelStats,
    _elem: PhantomData<E>,
}

/// Epoch-deterministic shuffled batches: the permutation is seeded with
/// `shuffle_seed ^ epoch`, the final partial batch is emitted, and
/// augmentation (when enabled) runs per image before normalization with an
/// RNG derived from (augment seed, epoch, dataset index).
pub fn batch_iter<'d, E: Scalar>(
    ds: &'d Dataset,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
    augment: Option<&AugmentPolicy>,
    stats: &ChannelStats,
) -> Result<Batches<'d, E>> {
    if batch_size == 0 {
        return Err(CxvError::Param("batch_size must be >= 1".into()));
    }
    if ds.is_empty() {
        return Err(CxvError::Usage("batch_iter over an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed ^ epoch);
    order.shuffle(&mut rng);
    Ok(Batches {
        ds,
        order,
        pos: 0,
        batch_size,
        epoch,
        augment: augment.filter(|p| p.enabled).cloned(),
        stats: *stats,
        _elem: PhantomData,
    })
}

impl<E: Scalar> Iterator for Batches<'_, E> {
    type Item = (Tensor<E>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let mut data = Vec::with_capacity(idx.len() * IMAGE_BYTES);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            labels.push(self.ds.labels[i] as usize);
            match &self.augment {
                Some(policy) => {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(derive_seed(policy.seed, &[self.epoch, i as u64]));
                    let img = augment::randaugment_apply(self.ds.image(i), policy, &mut rng);
                    normalize_image(&img, &self.stats, &mut data);
                }
                None => normalize_image(self.ds.image(i), &self.stats, &mut data),
            }
        }
        let t = Tensor::from_vec(data, &[idx.len(), 3, 32, 32]).expect("consistent");
        Some((t, labels))
    }
}
