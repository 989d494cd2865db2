//! Conversion from published MedMNIST `.npz` archives to dataset
//! containers.
//!
//! An archive is a zip of NPY members named `{train,val,test}_{images,
//! labels}.npy`; images are `[N,28,28]` grayscale or `[N,28,28,3]` RGB
//! uint8, labels `[N]` or `[N,1]` integers. The val split is merged into
//! the train container, since nothing here tunes on it, so the expected
//! sample counts below cover all three published splits.

use super::{DatasetContainer, Split};
use crate::error::{Error, Result};
use std::io::Read;
use std::path::{Path, PathBuf};

/// Published total sample count (train+val+test) for datasets with a known
/// size; conversion fails on a mismatch.
pub fn expected_total(name: &str) -> Option<usize> {
    let canonical = name.to_ascii_lowercase();
    let canonical = canonical.strip_suffix("mnist").unwrap_or(&canonical);
    match canonical {
        "breast" => Some(780),
        "pneumonia" => Some(5856),
        "retina" => Some(1600),
        _ => None,
    }
}

/// One decoded NPY member: C-order little-endian integer data.
#[derive(Debug)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub descr: String,
    raw: Vec<u8>,
}

impl NpyArray {
    fn item_size(descr: &str) -> Option<usize> {
        match descr {
            "|u1" | "|i1" => Some(1),
            "<u2" | "<i2" => Some(2),
            "<i4" | "<u4" => Some(4),
            "<i8" | "<u8" => Some(8),
            _ => None,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Raw bytes, only for `|u1` arrays.
    pub fn as_u8(&self, label: &str) -> Result<&[u8]> {
        if self.descr != "|u1" {
            return Err(Error::Format {
                path: label.into(),
                msg: format!("expected uint8 data (|u1), got {}", self.descr),
            });
        }
        Ok(&self.raw)
    }

    /// Integer values widened/narrowed to u16, for label arrays.
    pub fn as_u16_values(&self, label: &str) -> Result<Vec<u16>> {
        let size = Self::item_size(&self.descr).unwrap();
        let mut out = Vec::with_capacity(self.numel());
        for chunk in self.raw.chunks(size) {
            let mut wide = [0u8; 8];
            wide[..size].copy_from_slice(chunk);
            let value = i64::from_le_bytes(wide);
            let narrowed = u16::try_from(value).map_err(|_| Error::Integrity(format!(
                "{label}: label value {value} does not fit a class id"
            )))?;
            out.push(narrowed);
        }
        Ok(out)
    }
}

/// Parse an NPY byte stream (v1/v2 headers, C-order, integer dtypes).
pub fn parse_npy(bytes: &[u8], label: &str) -> Result<NpyArray> {
    let fail = |msg: String| Error::Format {
        path: label.into(),
        msg,
    };
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err(fail("missing NPY magic".into()));
    }
    let major = bytes[6];
    let (header_len, header_start) = match major {
        1 => (
            u16::from_le_bytes([bytes[8], bytes[9]]) as usize,
            10usize,
        ),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(fail("truncated v2 header length".into()));
            }
            (
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
                12usize,
            )
        }
        other => return Err(fail(format!("unsupported NPY version {other}"))),
    };
    let data_start = header_start + header_len;
    if bytes.len() < data_start {
        return Err(fail("truncated header".into()));
    }
    let header = std::str::from_utf8(&bytes[header_start..data_start])
        .map_err(|e| fail(format!("header is not ASCII: {e}")))?;

    let descr = extract_quoted(header, "descr")
        .ok_or_else(|| fail("header lacks a descr field".into()))?;
    if NpyArray::item_size(&descr).is_none() {
        return Err(fail(format!("unsupported dtype {descr}")));
    }
    if !header.contains("'fortran_order': False") {
        return Err(fail("only C-order arrays are supported".into()));
    }
    let shape = extract_shape(header).ok_or_else(|| fail("header lacks a shape tuple".into()))?;

    let numel: usize = shape.iter().product();
    let expected = numel * NpyArray::item_size(&descr).unwrap();
    let raw = &bytes[data_start..];
    if raw.len() != expected {
        return Err(fail(format!(
            "data length {} does not match shape {:?} of {}",
            raw.len(),
            shape,
            descr
        )));
    }
    Ok(NpyArray {
        shape,
        descr,
        raw: raw.to_vec(),
    })
}

fn extract_quoted(header: &str, key: &str) -> Option<String> {
    let anchor = format!("'{key}':");
    let after = &header[header.find(&anchor)? + anchor.len()..];
    let open = after.find('\'')?;
    let rest = &after[open + 1..];
    let close = rest.find('\'')?;
    Some(rest[..close].to_string())
}

fn extract_shape(header: &str) -> Option<Vec<usize>> {
    let after = &header[header.find("'shape':")? + "'shape':".len()..];
    let open = after.find('(')?;
    let close = after[open..].find(')')? + open;
    let inside = &after[open + 1..close];
    let mut dims = Vec::new();
    for part in inside.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        dims.push(part.parse::<usize>().ok()?);
    }
    Some(dims)
}

struct SplitArrays {
    images: NpyArray,
    labels: Vec<u16>,
}

fn read_member(zip: &mut zip::ZipArchive<std::fs::File>, member: &str) -> Result<Vec<u8>> {
    let mut entry = zip.by_name(member).map_err(|e| Error::Format {
        path: member.into(),
        msg: format!("missing archive member: {e}"),
    })?;
    let mut buf = Vec::new();
    entry.read_to_end(&mut buf)?;
    Ok(buf)
}

fn read_split(zip: &mut zip::ZipArchive<std::fs::File>, split: &str) -> Result<SplitArrays> {
    let images_name = format!("{split}_images.npy");
    let labels_name = format!("{split}_labels.npy");
    let images = parse_npy(&read_member(zip, &images_name)?, &images_name)?;
    let labels_arr = parse_npy(&read_member(zip, &labels_name)?, &labels_name)?;

    let n = *images.shape.first().unwrap_or(&0);
    let label_shape_ok = labels_arr.shape == [n] || labels_arr.shape == [n, 1];
    if !label_shape_ok {
        return Err(Error::Integrity(format!(
            "{labels_name}: shape {:?} does not match {n} images",
            labels_arr.shape
        )));
    }
    Ok(SplitArrays {
        images,
        labels: labels_arr.as_u16_values(&labels_name)?,
    })
}

/// Per-sample image bytes in container layout: grayscale passes through,
/// RGB is transposed from the archive's HWC order to CHW.
fn to_chw(images: &NpyArray, label: &str) -> Result<(Vec<u8>, usize)> {
    let bytes = images.as_u8(label)?;
    match images.shape.as_slice() {
        [_, 28, 28] => Ok((bytes.to_vec(), 1)),
        [n, 28, 28, 3] => {
            let mut out = Vec::with_capacity(bytes.len());
            let hw = 28 * 28;
            for i in 0..*n {
                let sample = &bytes[i * hw * 3..(i + 1) * hw * 3];
                for ch in 0..3 {
                    for pixel in 0..hw {
                        out.push(sample[pixel * 3 + ch]);
                    }
                }
            }
            Ok((out, 3))
        }
        other => Err(Error::Integrity(format!(
            "{label}: unsupported image shape {other:?}, expected [N,28,28] or [N,28,28,3]"
        ))),
    }
}

/// Convert one MedMNIST archive into train and test container files,
/// returning their paths. Train = published train+val; test = published
/// test.
pub fn convert_medmnist(archive: &Path, name: &str, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let file = std::fs::File::open(archive)?;
    let mut zip = zip::ZipArchive::new(file).map_err(|e| Error::Format {
        path: archive.display().to_string(),
        msg: format!("not a readable zip archive: {e}"),
    })?;

    let train = read_split(&mut zip, "train")?;
    let val = read_split(&mut zip, "val")?;
    let test = read_split(&mut zip, "test")?;

    let total = train.labels.len() + val.labels.len() + test.labels.len();
    if let Some(expected) = expected_total(name) {
        if total != expected {
            return Err(Error::Integrity(format!(
                "{name}: archive holds {total} samples, published total is {expected}"
            )));
        }
    }

    let (mut train_bytes, channels) = to_chw(&train.images, "train_images.npy")?;
    let (val_bytes, val_channels) = to_chw(&val.images, "val_images.npy")?;
    let (test_bytes, test_channels) = to_chw(&test.images, "test_images.npy")?;
    if channels != val_channels || channels != test_channels {
        return Err(Error::Integrity(
            "splits disagree on channel count".into(),
        ));
    }
    train_bytes.extend_from_slice(&val_bytes);
    let mut train_labels = train.labels;
    train_labels.extend_from_slice(&val.labels);

    let n_classes = train_labels
        .iter()
        .chain(&test.labels)
        .max()
        .map(|&m| m + 1)
        .unwrap_or(0);

    let train_container = DatasetContainer::new(
        name,
        Split::Train,
        train_bytes,
        (channels, 28, 28),
        train_labels,
        n_classes,
    )?;
    let test_container = DatasetContainer::new(
        name,
        Split::Test,
        test_bytes,
        (channels, 28, 28),
        test.labels,
        n_classes,
    )?;

    std::fs::create_dir_all(out_dir)?;
    let train_path = out_dir.join(format!("{name}.train.fssld"));
    let test_path = out_dir.join(format!("{name}.test.fssld"));
    train_container.save(&train_path)?;
    test_container.save(&test_path)?;
    Ok((train_path, test_path))
}
