//! Spike stream files and their sidecar metadata.
//!
//! A `.dat` file is nothing but packed polling frames concatenated in order,
//! no header, no magic bytes; every property needed to decode it (geometry,
//! polling interval, label kind) lives in a `.info` sidecar next to it. The
//! sidecar is line-oriented UTF-8 `key = value` text with `#` comments and
//! case-sensitive keys. Keeping the data file headerless means a live capture
//! can append frames without rewriting anything.

use crate::error::{Result, SpikeError};
use crate::stream::{SpikeStream, StreamGeometry};
use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Ground-truth kind recorded alongside a stream. `Raw` marks data with no
/// labels at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelType {
    #[default]
    Raw,
    Image,
    Flow,
    Depth,
    Detection,
    Tracking,
    Recognition,
}

impl fmt::Display for LabelType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            LabelType::Raw => "raw",
            LabelType::Image => "image",
            LabelType::Flow => "flow",
            LabelType::Depth => "depth",
            LabelType::Detection => "detection",
            LabelType::Tracking => "tracking",
            LabelType::Recognition => "recognition",
        };
        f.write_str(name)
    }
}

impl FromStr for LabelType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "raw" => Ok(LabelType::Raw),
            "image" => Ok(LabelType::Image),
            "flow" => Ok(LabelType::Flow),
            "depth" => Ok(LabelType::Depth),
            "detection" => Ok(LabelType::Detection),
            "tracking" => Ok(LabelType::Tracking),
            "recognition" => Ok(LabelType::Recognition),
            other => Err(format!("unknown label type `{other}`")),
        }
    }
}

/// Recording properties of a spike stream file.
///
/// `width` and `height` are required in the sidecar; the polling interval
/// defaults to the sensor's canonical 25 µs and the label type to `raw`.
/// Keys this module does not know are kept verbatim in `extra` and written
/// back on serialization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamMeta {
    pub width: usize,
    pub height: usize,
    pub polling_interval_us: u32,
    pub label_type: LabelType,
    pub extra: BTreeMap<String, String>,
}

pub const DEFAULT_POLLING_INTERVAL_US: u32 = 25;

impl StreamMeta {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            polling_interval_us: DEFAULT_POLLING_INTERVAL_US,
            label_type: LabelType::Raw,
            extra: BTreeMap::new(),
        }
    }

    /// Packed bytes per polling frame for this geometry.
    pub fn bytes_per_frame(&self) -> usize {
        (self.height * self.width).div_ceil(8)
    }

    /// Stream geometry for a given number of polling steps.
    pub fn geometry(&self, num_steps: usize) -> Result<StreamGeometry> {
        StreamGeometry::new(self.height, self.width, num_steps)
    }
}

/// Decode-time options for spike files.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    /// Mirror rows on decode; some sensors emit rows bottom-up.
    pub vertical_flip: bool,
}

/// Sidecar path for a data file: same stem, `.info` extension.
pub fn sidecar_path(dat_path: &Path) -> PathBuf {
    dat_path.with_extension("info")
}

/// Loads a whole spike file. The file size must be a multiple of the frame
/// size given by `meta`; the step count is derived from the file size.
pub fn read_dat(path: &Path, meta: &StreamMeta) -> Result<SpikeStream> {
    read_dat_with(path, meta, ReadOptions::default())
}

pub fn read_dat_with(path: &Path, meta: &StreamMeta, opts: ReadOptions) -> Result<SpikeStream> {
    let data =
        std::fs::read(path).map_err(|e| SpikeError::io(format!("reading {}", path.display()), e))?;
    let num_steps = frames_in_len(path, data.len() as u64, meta)? as usize;
    let stream = SpikeStream::from_packed(data, meta.geometry(num_steps)?)?;
    Ok(if opts.vertical_flip {
        stream.flip_vertical()
    } else {
        stream
    })
}

/// Loads only frames `[start, start+length)` of a spike file, seeking past
/// the rest. Equivalent to `read_dat` followed by `get_block`.
pub fn read_dat_block(
    path: &Path,
    meta: &StreamMeta,
    start: usize,
    length: usize,
) -> Result<SpikeStream> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| SpikeError::io(format!("opening {}", path.display()), e))?;
    let size = file
        .metadata()
        .map_err(|e| SpikeError::io(format!("stat {}", path.display()), e))?
        .len();
    let file_frames = frames_in_len(path, size, meta)? as usize;
    let end = start.checked_add(length);
    if end.is_none() || end.unwrap() > file_frames {
        return Err(SpikeError::WindowOutOfRange {
            start,
            length,
            num_steps: file_frames,
        });
    }
    let bpf = meta.bytes_per_frame();
    file.seek(SeekFrom::Start((start * bpf) as u64))
        .map_err(|e| SpikeError::io(format!("seeking {}", path.display()), e))?;
    let mut data = vec![0u8; length * bpf];
    file.read_exact(&mut data)
        .map_err(|e| SpikeError::io(format!("reading {}", path.display()), e))?;
    SpikeStream::from_packed(data, meta.geometry(length)?)
}

/// Number of whole frames in a file of `len` bytes, or a corrupt-file error
/// naming the leftover byte count.
pub fn frames_in_len(path: &Path, len: u64, meta: &StreamMeta) -> Result<u64> {
    let bpf = meta.bytes_per_frame() as u64;
    let remainder = len % bpf;
    if remainder != 0 {
        return Err(SpikeError::CorruptFile {
            path: path.to_path_buf(),
            size: len,
            bytes_per_frame: bpf,
            remainder,
        });
    }
    Ok(len / bpf)
}

/// Writes the packed frames of `stream` to `path`, nothing else.
pub fn write_dat(stream: &SpikeStream, path: &Path) -> Result<()> {
    std::fs::write(path, stream.as_bytes())
        .map_err(|e| SpikeError::io(format!("writing {}", path.display()), e))
}

/// Parses a `.info` sidecar.
pub fn read_meta(path: &Path) -> Result<StreamMeta> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SpikeError::io(format!("reading {}", path.display()), e))?;
    parse_meta(&text, path)
}

pub fn parse_meta(text: &str, path: &Path) -> Result<StreamMeta> {
    let mut width: Option<usize> = None;
    let mut height: Option<usize> = None;
    let mut polling: Option<u32> = None;
    let mut label_type: Option<LabelType> = None;
    let mut extra = BTreeMap::new();

    for (idx, raw_line) in text.lines().enumerate() {
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(SpikeError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!("expected `key = value`, got `{line}`"),
            });
        };
        let key = key.trim();
        let value = value.trim();
        match key {
            "width" => width = Some(parse_dim(path, key, value)?),
            "height" => height = Some(parse_dim(path, key, value)?),
            "polling_interval_us" => {
                let v: u32 = value.parse().map_err(|_| bad_value(path, key, value, "expected a positive integer"))?;
                if v == 0 {
                    return Err(bad_value(path, key, value, "must be positive"));
                }
                polling = Some(v);
            }
            "label_type" => {
                let v = value
                    .parse::<LabelType>()
                    .map_err(|e| bad_value(path, key, value, &e))?;
                label_type = Some(v);
            }
            _ => {
                extra.insert(key.to_string(), value.to_string());
            }
        }
    }

    let width = width.ok_or_else(|| missing_key(path, "width"))?;
    let height = height.ok_or_else(|| missing_key(path, "height"))?;
    Ok(StreamMeta {
        width,
        height,
        polling_interval_us: polling.unwrap_or(DEFAULT_POLLING_INTERVAL_US),
        label_type: label_type.unwrap_or_default(),
        extra,
    })
}

/// Serializes a sidecar; `read_meta(write_meta(m)) == m` including `extra`.
pub fn write_meta(meta: &StreamMeta, path: &Path) -> Result<()> {
    std::fs::write(path, format_meta(meta))
        .map_err(|e| SpikeError::io(format!("writing {}", path.display()), e))
}

pub fn format_meta(meta: &StreamMeta) -> String {
    let mut out = String::new();
    out.push_str(&format!("width = {}\n", meta.width));
    out.push_str(&format!("height = {}\n", meta.height));
    out.push_str(&format!(
        "polling_interval_us = {}\n",
        meta.polling_interval_us
    ));
    out.push_str(&format!("label_type = {}\n", meta.label_type));
    for (k, v) in &meta.extra {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

fn parse_dim(path: &Path, key: &str, value: &str) -> Result<usize> {
    let v: usize = value
        .parse()
        .map_err(|_| bad_value(path, key, value, "expected a positive integer"))?;
    if v == 0 {
        return Err(bad_value(path, key, value, "must be positive"));
    }
    Ok(v)
}

fn bad_value(path: &Path, key: &str, value: &str, reason: &str) -> SpikeError {
    SpikeError::BadValue {
        path: path.to_path_buf(),
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn missing_key(path: &Path, key: &str) -> SpikeError {
    SpikeError::MissingKey {
        path: path.to_path_buf(),
        key: key.to_string(),
    }
}
