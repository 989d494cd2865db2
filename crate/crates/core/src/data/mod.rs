//! Dataset container format, non-i.i.d. partitioning, synthetic data
//! generation, and MedMNIST archive conversion.
//!
//! Containers hold quantized `[N,C,28,28]` image bytes plus class labels in
//! a little-endian binary layout (magic `FSSLD1`) that round-trips
//! bit-exactly. The split is carried as a `.train` / `.test` suffix on the
//! stored name.

mod medmnist;
mod partition;
mod synth;

pub use medmnist::{convert_medmnist, expected_total, parse_npy};
pub use partition::{dirichlet_partition, mean_label_entropy, PartitionConfig};
pub use synth::{synth_generate, SynthPattern, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 6] = b"FSSLD1";
const VERSION: u8 = 1;

/// Which side of the train/test divide a container holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Immutable image/label store decoding to `[N,C,28,28]` unit-range tensors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetContainer {
    name: String,
    split: Split,
    images: Vec<u8>,
    labels: Vec<u16>,
    n_classes: u16,
    channels: usize,
    height: usize,
    width: usize,
}

impl DatasetContainer {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        images: Vec<u8>,
        dims: (usize, usize, usize),
        labels: Vec<u16>,
        n_classes: u16,
    ) -> Result<Self> {
        let name = name.into();
        let (channels, height, width) = dims;
        if name.is_empty() || name.contains('.') {
            return Err(Error::Config(format!(
                "container name must be nonempty and dot-free, got {name:?}"
            )));
        }
        if labels.is_empty() {
            return Err(Error::Config("container needs at least one sample".into()));
        }
        if n_classes == 0 {
            return Err(Error::Config("n_classes must be positive".into()));
        }
        let sample_len = channels * height * width;
        if sample_len == 0 || images.len() != labels.len() * sample_len {
            return Err(Error::Config(format!(
                "image bytes {} do not match {} samples of {}x{}x{}",
                images.len(),
                labels.len(),
                channels,
                height,
                width
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Integrity(format!(
                "label {bad} exceeds n_classes {n_classes}"
            )));
        }
        Ok(DatasetContainer {
            name,
            split,
            images,
            labels,
            n_classes,
            channels,
            height,
            width,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> u16 {
        self.n_classes
    }

    pub fn image_bytes(&self) -> &[u8] {
        &self.images
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Decode the given samples to a `[B,C,H,W]` tensor of values in [0,1].
    pub fn image_batch(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::contract("image_batch", "empty index list"));
        }
        let sample_len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * sample_len);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::contract(
                    "image_batch",
                    format!("index {i} out of range for {} samples", self.len()),
                ));
            }
            data.extend(
                self.images[i * sample_len..(i + 1) * sample_len]
                    .iter()
                    .map(|&b| b as f64 / 255.0),
            );
        }
        Tensor::new(
            vec![indices.len(), self.channels, self.height, self.width],
            data,
        )
    }

    /// Labels for the given samples, as plain class ids.
    pub fn label_batch(&self, indices: &[usize]) -> Vec<u16> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        let stored_name = format!("{}.{}", self.name, self.split);
        let name_bytes = stored_name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Config("container name too long".into()));
        }
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        let n = u32::try_from(self.len())
            .map_err(|_| Error::Config("too many samples for container format".into()))?;
        buf.extend_from_slice(&n.to_le_bytes());
        for dim in [self.channels, self.height, self.width] {
            let byte = u8::try_from(dim)
                .map_err(|_| Error::Config(format!("dimension {dim} exceeds container format")))?;
            buf.push(byte);
        }
        buf.extend_from_slice(&self.n_classes.to_le_bytes());
        buf.extend_from_slice(&self.images);
        for label in &self.labels {
            buf.extend_from_slice(&label.to_le_bytes());
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        fn take_bytes<'a>(
            bytes: &'a [u8],
            cursor: &mut usize,
            len: usize,
            path: &Path,
        ) -> Result<&'a [u8]> {
            if *cursor + len > bytes.len() {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    msg: format!(
                        "truncated: wanted {len} bytes at offset {cursor}, have {}",
                        bytes.len()
                    ),
                });
            }
            let slice = &bytes[*cursor..*cursor + len];
            *cursor += len;
            Ok(slice)
        }

        let format_err = |msg: String| Error::Format {
            path: path.display().to_string(),
            msg,
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cursor = 0usize;
        let mut take = |len: usize| take_bytes(&bytes, &mut cursor, len, path);

        if take(6)? != MAGIC {
            return Err(format_err("bad magic, not a dataset container".into()));
        }
        let version = take(1)?[0];
        if version != VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let stored_name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|e| format_err(format!("name is not UTF-8: {e}")))?;
        let (name, split) = match stored_name.rsplit_once('.') {
            Some((base, "train")) => (base.to_string(), Split::Train),
            Some((base, "test")) => (base.to_string(), Split::Test),
            _ => {
                return Err(format_err(format!(
                    "stored name {stored_name:?} lacks a .train/.test suffix"
                )))
            }
        };
        let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let channels = take(1)?[0] as usize;
        let height = take(1)?[0] as usize;
        let width = take(1)?[0] as usize;
        let n_classes = u16::from_le_bytes(take(2)?.try_into().unwrap());
        let image_len = n * channels * height * width;
        let images = take(image_len)?.to_vec();
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(u16::from_le_bytes(take(2)?.try_into().unwrap()));
        }
        if cursor != bytes.len() {
            return Err(format_err(format!(
                "{} trailing bytes after labels",
                bytes.len() - cursor
            )));
        }
        DatasetContainer::new(name, split, images, (channels, height, width), labels, n_classes)
    }
}

/// Hex SHA-256 of a file's bytes, for run manifests.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher)?;
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
