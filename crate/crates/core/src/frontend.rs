//! Acoustic frontend: frame stacking, SpecAugment masking and the on-disk
//! feature format.
//!
//! A feature set on disk is a manifest (`manifest.tsv`, one line per
//! utterance: `id<TAB>language<TAB>T<TAB>D<TAB>byte_offset`) plus a blob
//! (`features.bin`) of little-endian `f32` values, row-major, `T * D` per
//! utterance starting at `byte_offset`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const RAW_DIM: usize = 80;
pub const STACK_FACTOR: usize = 3;
pub const STACKED_DIM: usize = RAW_DIM * STACK_FACTOR;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const BLOB_FILE: &str = "features.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    /// `[T, D]`
    pub frames: Tensor,
    pub frame_rate_ms: u32,
    pub utterance_id: String,
    /// Metadata only; no model op reads it.
    pub language_id: String,
}

impl FeatureMatrix {
    pub fn new(
        frames: Tensor,
        frame_rate_ms: u32,
        utterance_id: impl Into<String>,
        language_id: impl Into<String>,
    ) -> Result<Self> {
        if frames.rank() != 2 {
            return Err(Error::shape("features", "frames must be [T, D]"));
        }
        Ok(Self {
            frames,
            frame_rate_ms,
            utterance_id: utterance_id.into(),
            language_id: language_id.into(),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Concatenate `factor` consecutive frames into one, dividing the frame rate.
/// A partial final stack repeats the last input frame.
pub fn stack_frames(raw: &FeatureMatrix, factor: usize) -> Result<FeatureMatrix> {
    if raw.dim() != RAW_DIM || raw.frame_rate_ms != 10 {
        return Err(Error::shape(
            "stack_frames",
            format!(
                "expected {RAW_DIM}-D frames at 10 ms, got {}-D at {} ms",
                raw.dim(),
                raw.frame_rate_ms
            ),
        ));
    }
    if factor == 0 {
        return Err(Error::invalid("stack factor must be positive"));
    }
    let t = raw.num_frames();
    let d = raw.dim();
    let out_t = t.div_ceil(factor);
    let mut data = Vec::with_capacity(out_t * d * factor);
    for o in 0..out_t {
        for k in 0..factor {
            let src = (o * factor + k).min(t - 1);
            data.extend_from_slice(raw.frames.row(src));
        }
    }
    FeatureMatrix::new(
        Tensor::new(vec![out_t, d * factor], data)?,
        raw.frame_rate_ms * factor as u32,
        raw.utterance_id.clone(),
        raw.language_id.clone(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpecAugConfig {
    pub freq_masks: usize,
    pub max_freq: usize,
    pub time_masks: usize,
    pub max_time: usize,
}

impl Default for SpecAugConfig {
    fn default() -> Self {
        Self {
            freq_masks: 2,
            max_freq: 27,
            time_masks: 2,
            max_time: 50,
        }
    }
}

/// A masked band: `width` consecutive bins (or frames) starting at `start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Band {
    pub start: usize,
    pub width: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AppliedMasks {
    pub freq: Vec<Band>,
    pub time: Vec<Band>,
}

/// Zero out random frequency and time bands. Widths are uniform on
/// `[0, max]` (time widths additionally capped at `T`), offsets uniform over
/// the valid range.
pub fn spec_augment(
    feats: &FeatureMatrix,
    rng: &mut SeededRng,
    cfg: &SpecAugConfig,
) -> Result<(FeatureMatrix, AppliedMasks)> {
    let (t, d) = (feats.num_frames(), feats.dim());
    if cfg.max_freq >= d {
        return Err(Error::invalid(format!(
            "max frequency mask {} must be below feature dimension {d}",
            cfg.max_freq
        )));
    }
    let mut masks = AppliedMasks::default();
    for _ in 0..cfg.freq_masks {
        let width = rng.inclusive(0, cfg.max_freq);
        let start = rng.inclusive(0, d - width);
        masks.freq.push(Band { start, width });
    }
    for _ in 0..cfg.time_masks {
        let width = rng.inclusive(0, cfg.max_time.min(t));
        let start = rng.inclusive(0, t - width);
        masks.time.push(Band { start, width });
    }

    let mut frames = feats.frames.clone();
    let data = frames.data_mut();
    for b in &masks.freq {
        for row in 0..t {
            data[row * d + b.start..row * d + b.start + b.width].fill(0.0);
        }
    }
    for b in &masks.time {
        data[b.start * d..(b.start + b.width) * d].fill(0.0);
    }
    let out = FeatureMatrix {
        frames,
        ..feats.clone()
    };
    Ok((out, masks))
}

/// Appends utterances to a manifest + blob pair.
pub struct FeatureWriter {
    manifest: BufWriter<File>,
    blob: BufWriter<File>,
    offset: u64,
}

impl FeatureWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            manifest: BufWriter::new(File::create(dir.join(MANIFEST_FILE))?),
            blob: BufWriter::new(File::create(dir.join(BLOB_FILE))?),
            offset: 0,
        })
    }

    pub fn append(&mut self, feats: &FeatureMatrix) -> Result<()> {
        if feats.utterance_id.contains(['\t', '\n']) || feats.language_id.contains(['\t', '\n']) {
            return Err(Error::invalid("ids must not contain tabs or newlines"));
        }
        writeln!(
            self.manifest,
            "{}\t{}\t{}\t{}\t{}",
            feats.utterance_id,
            feats.language_id,
            feats.num_frames(),
            feats.dim(),
            self.offset
        )?;
        for &v in feats.frames.data() {
            self.blob.write_all(&(v as f32).to_le_bytes())?;
        }
        self.offset += feats.frames.len() as u64 * 4;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.manifest.flush()?;
        self.blob.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub language: String,
    pub frames: usize,
    pub dim: usize,
    pub offset: u64,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::format("manifest", format!("line {}: {line:?}", n + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        let frames: usize = f[2].parse().map_err(|_| bad())?;
        let dim: usize = f[3].parse().map_err(|_| bad())?;
        if frames == 0 || dim == 0 {
            return Err(bad());
        }
        out.push(ManifestEntry {
            id: f[0].to_string(),
            language: f[1].to_string(),
            frames,
            dim,
            offset: f[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Load every utterance of a feature set directory as 10-ms frames.
pub fn read_feature_set(dir: &Path) -> Result<Vec<FeatureMatrix>> {
    let entries = read_manifest(&dir.join(MANIFEST_FILE))?;
    let mut blob = BufReader::new(File::open(dir.join(BLOB_FILE))?);
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        blob.seek(SeekFrom::Start(e.offset))?;
        let mut bytes = vec![0u8; e.frames * e.dim * 4];
        blob.read_exact(&mut bytes).map_err(|_| {
            Error::format("feature blob", format!("truncated data for {}", e.id))
        })?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push(FeatureMatrix::new(
            Tensor::new(vec![e.frames, e.dim], data)?,
            10,
            e.id,
            e.language,
        )?);
    }
    Ok(out)
}
