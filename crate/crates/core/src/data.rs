//! Sequence datasets: sequential MNIST from IDX files, a seeded synthetic
//! temporal-pattern task, and a binned-spike container for externally
//! preprocessed event data.
//!
//! # Binned-spike container
//!
//! All integers little-endian.
//!
//! ```text
//! header (24 bytes)
//!   magic        [u8; 4]  b"BSPK"
//!   version      u16      1
//!   value_type   u8       0 = i8, 1 = i16, 2 = f32
//!   reserved     u8       0
//!   num_samples  u32
//!   c_in         u32
//!   num_classes  u32
//!   reserved     u32      0
//! per sample
//!   steps        u32
//!   label        u32
//!   payload      steps * c_in values, time-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CONTAINER_MAGIC: [u8; 4] = *b"BSPK";
pub const CONTAINER_VERSION: u16 = 1;
const CONTAINER_HEADER_LEN: u64 = 24;

/// One labelled sequence, `steps x channels`, time-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub values: Vec<f64>,
    pub steps: usize,
    pub label: usize,
}

impl Sample {
    pub fn row(&self, t: usize, channels: usize) -> &[f64] {
        &self.values[t * channels..(t + 1) * channels]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn max_steps(&self) -> usize {
        self.samples.iter().map(|s| s.steps).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= self.c_out {
                return Err(Error::Data(format!(
                    "sample {i}: label {} outside [0, {})",
                    s.label, self.c_out
                )));
            }
            if s.values.len() != s.steps * self.c_in {
                return Err(Error::Data(format!(
                    "sample {i}: {} values for {} steps x {} channels",
                    s.values.len(),
                    s.steps,
                    self.c_in
                )));
            }
            if s.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("sample {i}: non-finite value")));
            }
        }
        Ok(())
    }

    /// Keep the first `count` samples.
    pub fn truncated(mut self, count: usize) -> Self {
        self.samples.truncate(count);
        self
    }

    /// First `count` samples and the rest.
    pub fn split_at(mut self, count: usize) -> (Self, Self) {
        let rest = self.samples.split_off(count.min(self.samples.len()));
        let tail = SequenceDataset {
            name: self.name.clone(),
            c_in: self.c_in,
            c_out: self.c_out,
            seed: self.seed,
            samples: rest,
        };
        (self, tail)
    }

    /// Seeded split into `(train, validation)`; `fraction` of the samples go
    /// to validation.
    pub fn split_validation(self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!(
                "validation fraction must lie in [0, 1), got {fraction}"
            )));
        }
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let held = (self.samples.len() as f64 * fraction).round() as usize;
        let mut is_val = vec![false; self.samples.len()];
        for &i in &order[..held] {
            is_val[i] = true;
        }
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (s, v) in self.samples.into_iter().zip(is_val) {
            if v {
                val.push(s);
            } else {
                train.push(s);
            }
        }
        let base = |samples, suffix: &str| SequenceDataset {
            name: format!("{}-{suffix}", self.name),
            c_in: self.c_in,
            c_out: self.c_out,
            seed,
            samples,
        };
        Ok((base(train, "train"), base(val, "val")))
    }
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            message: "truncated IDX header".into(),
        })
}

/// Images of an IDX file (`0x00000803`) as `(rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad IDX image magic {magic:#010x}"),
        });
    }
    let count = read_u32_be(bytes, 4)? as usize;
    let rows = read_u32_be(bytes, 8)? as usize;
    let cols = read_u32_be(bytes, 12)? as usize;
    let size = rows * cols;
    let expected = 16 + count * size;
    if bytes.len() != expected {
        return Err(Error::Format {
            offset: bytes.len().min(expected) as u64,
            message: format!(
                "IDX image payload holds {} bytes, header declares {count} x {rows} x {cols}",
                bytes.len().saturating_sub(16)
            ),
        });
    }
    let images = bytes[16..].chunks(size).map(<[u8]>::to_vec).collect();
    Ok((rows, cols, images))
}

/// Labels of an IDX file (`0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad IDX label magic {magic:#010x}"),
        });
    }
    let count = read_u32_be(bytes, 4)? as usize;
    if bytes.len() != 8 + count {
        return Err(Error::Format {
            offset: bytes.len().min(8 + count) as u64,
            message: format!("IDX label payload does not match declared count {count}"),
        });
    }
    Ok(bytes[8..].to_vec())
}

pub fn write_idx_images(rows: usize, cols: usize, images: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IDX_IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        out.extend_from_slice(img);
    }
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Pixel-by-pixel sequences, one input channel, values scaled to `[0, 1]`.
pub fn smnist_from_idx(name: &str, images: &[u8], labels: &[u8]) -> Result<SequenceDataset> {
    let (rows, cols, images) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if images.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let samples = images
        .iter()
        .zip(&labels)
        .map(|(img, &label)| Sample {
            values: img.iter().map(|&p| p as f64 / 255.0).collect(),
            steps: rows * cols,
            label: label as usize,
        })
        .collect();
    let ds = SequenceDataset {
        name: name.to_string(),
        c_in: 1,
        c_out: 10,
        seed: 0,
        samples,
    };
    ds.validate()?;
    Ok(ds)
}

/// Load the train and test splits of sequential MNIST.
pub fn load_smnist(
    train_images: &Path,
    train_labels: &Path,
    test_images: &Path,
    test_labels: &Path,
) -> Result<(SequenceDataset, SequenceDataset)> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())))
    };
    let train = smnist_from_idx("smnist-train", &read(train_images)?, &read(train_labels)?)?;
    let test = smnist_from_idx("smnist-test", &read(test_images)?, &read(test_labels)?)?;
    Ok((train, test))
}

/// Settings of the synthetic temporal-pattern task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternTask {
    pub num_classes: usize,
    pub steps: usize,
    pub channels: usize,
    pub samples_per_class: usize,
    /// Probability of flipping each entry of the template.
    pub noise: f64,
    pub seed: u64,
    #[serde(default = "default_bursts")]
    pub bursts: usize,
    #[serde(default = "default_burst_len")]
    pub burst_len: usize,
}

fn default_bursts() -> usize {
    3
}

fn default_burst_len() -> usize {
    3
}

impl PatternTask {
    pub fn new(num_classes: usize, steps: usize, channels: usize, samples_per_class: usize) -> Self {
        Self {
            num_classes,
            steps,
            channels,
            samples_per_class,
            noise: 0.0,
            seed: 0,
            bursts: default_bursts(),
            burst_len: default_burst_len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0
            || self.steps == 0
            || self.channels == 0
            || self.samples_per_class == 0
            || self.bursts == 0
            || self.burst_len == 0
        {
            return Err(Error::Config(
                "pattern task sizes must all be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise rate {} outside [0, 1]", self.noise)));
        }
        Ok(())
    }

    /// Class templates (`steps x channels` binary maps), pairwise distinct.
    pub fn templates(&self) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut templates: Vec<Vec<f64>> = Vec::with_capacity(self.num_classes);
        while templates.len() < self.num_classes {
            let mut tpl = vec![0.0; self.steps * self.channels];
            for _ in 0..self.bursts {
                let start = rng.gen_range(0..self.steps);
                let active: Vec<usize> = (0..self.channels)
                    .filter(|_| rng.gen_bool(0.5))
                    .collect();
                for t in start..(start + self.burst_len).min(self.steps) {
                    for &c in &active {
                        tpl[t * self.channels + c] = 1.0;
                    }
                }
            }
            if tpl.iter().any(|&v| v != 0.0) && !templates.contains(&tpl) {
                templates.push(tpl);
            }
        }
        Ok(templates)
    }

    pub fn generate(&self) -> Result<SequenceDataset> {
        let templates = self.templates()?;
        // separate stream so the templates do not depend on the sample count
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut samples = Vec::with_capacity(self.num_classes * self.samples_per_class);
        for _ in 0..self.samples_per_class {
            for (label, tpl) in templates.iter().enumerate() {
                let values = tpl
                    .iter()
                    .map(|&v| {
                        if self.noise > 0.0 && rng.gen_bool(self.noise) {
                            1.0 - v
                        } else {
                            v
                        }
                    })
                    .collect();
                samples.push(Sample {
                    values,
                    steps: self.steps,
                    label,
                });
            }
        }
        Ok(SequenceDataset {
            name: "synthetic".into(),
            c_in: self.channels,
            c_out: self.num_classes,
            seed: self.seed,
            samples,
        })
    }
}

pub fn synth_pattern_task(
    num_classes: usize,
    steps: usize,
    channels: usize,
    samples_per_class: usize,
    noise: f64,
    seed: u64,
) -> Result<SequenceDataset> {
    PatternTask {
        noise,
        seed,
        ..PatternTask::new(num_classes, steps, channels, samples_per_class)
    }
    .generate()
}

/// Sum non-overlapping windows of `bin` steps; a trailing partial window is
/// summed as-is.
pub fn sum_bin(values: &[f64], steps: usize, channels: usize, bin: usize) -> Result<Vec<f64>> {
    if bin == 0 {
        return Err(Error::Config("bin size must be at least 1".into()));
    }
    let out_steps = steps.div_ceil(bin);
    let mut out = vec![0.0; out_steps * channels];
    for t in 0..steps {
        let o = (t / bin) * channels;
        for c in 0..channels {
            out[o + c] += values[t * channels + c];
        }
    }
    Ok(out)
}

/// Storage type of container payload values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueType {
    I8,
    I16,
    F32,
}

impl ValueType {
    fn code(self) -> u8 {
        match self {
            ValueType::I8 => 0,
            ValueType::I16 => 1,
            ValueType::F32 => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ValueType::I8),
            1 => Some(ValueType::I16),
            2 => Some(ValueType::F32),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            ValueType::I8 => 1,
            ValueType::I16 => 2,
            ValueType::F32 => 4,
        }
    }

    /// Narrowest type that represents every value exactly.
    pub fn fitting(values: impl Iterator<Item = f64>) -> Self {
        let mut ty = ValueType::I8;
        for v in values {
            if v.fract() != 0.0 || v.abs() > i16::MAX as f64 {
                return ValueType::F32;
            }
            if v < i8::MIN as f64 || v > i8::MAX as f64 {
                ty = ValueType::I16;
            }
        }
        ty
    }
}

/// Serialize a dataset into the binned-spike container.
pub fn write_binned_spikes<W: Write>(
    mut w: W,
    ds: &SequenceDataset,
    value_type: ValueType,
) -> Result<()> {
    ds.validate()?;
    w.write_all(&CONTAINER_MAGIC)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    w.write_all(&[value_type.code(), 0])?;
    for v in [ds.samples.len() as u32, ds.c_in as u32, ds.c_out as u32, 0] {
        w.write_all(&v.to_le_bytes())?;
    }
    for (i, s) in ds.samples.iter().enumerate() {
        w.write_all(&(s.steps as u32).to_le_bytes())?;
        w.write_all(&(s.label as u32).to_le_bytes())?;
        for &v in &s.values {
            match value_type {
                ValueType::I8 | ValueType::I16 => {
                    let ok = v.fract() == 0.0
                        && if value_type == ValueType::I8 {
                            (i8::MIN as f64..=i8::MAX as f64).contains(&v)
                        } else {
                            (i16::MIN as f64..=i16::MAX as f64).contains(&v)
                        };
                    if !ok {
                        return Err(Error::Data(format!(
                            "sample {i}: value {v} not representable as {value_type:?}"
                        )));
                    }
                    if value_type == ValueType::I8 {
                        w.write_all(&(v as i8).to_le_bytes())?;
                    } else {
                        w.write_all(&(v as i16).to_le_bytes())?;
                    }
                }
                ValueType::F32 => w.write_all(&(v as f32).to_le_bytes())?,
            }
        }
    }
    Ok(())
}

pub fn save_binned_spikes(path: &Path, ds: &SequenceDataset, value_type: ValueType) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_binned_spikes(&mut w, ds, value_type)?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated {what}"),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parse the binned-spike container.
pub fn read_binned_spikes(bytes: &[u8], name: &str) -> Result<SequenceDataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != CONTAINER_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad container magic".into(),
        });
    }
    let version = cur.take(2, "version")?;
    let version = u16::from_le_bytes([version[0], version[1]]);
    if version != CONTAINER_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported container version {version}"),
        });
    }
    let code = cur.take(2, "value type")?[0];
    let value_type = ValueType::from_code(code).ok_or_else(|| Error::Format {
        offset: 6,
        message: format!("unknown value type {code}"),
    })?;
    let num_samples = cur.u32("sample count")? as usize;
    let c_in = cur.u32("channel count")? as usize;
    let c_out = cur.u32("class count")? as usize;
    cur.u32("reserved")?;
    debug_assert_eq!(cur.pos as u64, CONTAINER_HEADER_LEN);
    if c_in == 0 || c_out == 0 {
        return Err(Error::Format {
            offset: 12,
            message: "channel and class counts must be positive".into(),
        });
    }
    let mut samples = Vec::with_capacity(num_samples.min(1 << 20));
    for i in 0..num_samples {
        let header_at = cur.pos as u64;
        let steps = cur.u32("sample header")? as usize;
        let label = cur.u32("sample header")? as usize;
        if label >= c_out {
            return Err(Error::Format {
                offset: header_at + 4,
                message: format!("sample {i}: label {label} outside [0, {c_out})"),
            });
        }
        let count = steps.checked_mul(c_in).ok_or_else(|| Error::Format {
            offset: header_at,
            message: "sample size overflow".into(),
        })?;
        let payload = cur.take(count * value_type.width(), "sample payload")?;
        let values = match value_type {
            ValueType::I8 => payload.iter().map(|&b| b as i8 as f64).collect(),
            ValueType::I16 => payload
                .chunks_exact(2)
                .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64)
                .collect(),
            ValueType::F32 => payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect(),
        };
        samples.push(Sample {
            values,
            steps,
            label,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos as u64,
            message: format!(
                "{} trailing bytes after {num_samples} samples (channel count mismatch?)",
                bytes.len() - cur.pos
            ),
        });
    }
    let ds = SequenceDataset {
        name: name.to_string(),
        c_in,
        c_out,
        seed: 0,
        samples,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn load_binned_spikes(path: &Path) -> Result<SequenceDataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "binned".into());
    read_binned_spikes(&bytes, &name)
}
