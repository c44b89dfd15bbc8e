//! Per-pixel class score, probability and label grids.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::CategoryTable;
use crate::raster::ensure_parent;

/// Raw per-pixel class scores, background channel first, pixel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

const SCORE_MAGIC: &[u8; 8] = b"PFSCORE1";

#[derive(Serialize, Deserialize)]
struct ScoreHeader {
    width: usize,
    height: usize,
    channels: usize,
    labels: Vec<String>,
}

impl ScoreMap {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels < 2 {
            return Err(Error::InvalidInput(format!(
                "score map needs positive size and at least 2 channels, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height}x{channels} score map with {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite score".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn same_shape(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }

    /// Writes a binary header (magic, header length, JSON) followed by
    /// little-endian f32 scores.
    pub fn save(&self, path: &Path, labels: &[String]) -> Result<()> {
        if labels.len() != self.channels {
            return Err(Error::InvalidInput(format!(
                "{} label names for {} channels",
                labels.len(),
                self.channels
            )));
        }
        ensure_parent(path)?;
        let header = serde_json::to_vec(&ScoreHeader {
            width: self.width,
            height: self.height,
            channels: self.channels,
            labels: labels.to_vec(),
        })
        .expect("plain data");
        let mut buf = Vec::with_capacity(12 + header.len() + 4 * self.data.len());
        buf.extend_from_slice(SCORE_MAGIC);
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        for v in &self.data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Reads a score map and its channel names.
    pub fn load(path: &Path) -> Result<(Self, Vec<String>)> {
        let bytes = std::fs::read(path).map_err(|source| Error::Unreadable {
            path: path.to_path_buf(),
            source,
        })?;
        if bytes.len() < 12 || &bytes[..8] != SCORE_MAGIC {
            return Err(Error::corrupt(path, "missing score map header"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let header: ScoreHeader = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| Error::corrupt(path, "truncated header"))
            .and_then(|h| serde_json::from_slice(h).map_err(|e| Error::corrupt(path, e)))?;
        if header.labels.len() != header.channels {
            return Err(Error::corrupt(path, "label names disagree with channel count"));
        }
        let body = &bytes[12 + hlen..];
        let expected = header.width * header.height * header.channels * 4;
        if body.len() != expected {
            return Err(Error::corrupt(
                path,
                format!("expected {expected} score bytes, found {}", body.len()),
            ));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        let map = Self::new(header.width, header.height, header.channels, data)
            .map_err(|e| Error::corrupt(path, e))?;
        Ok((map, header.labels))
    }
}

/// Per-pixel distribution over label channels; channels outside the allowed
/// set hold exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ClassProbMap {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels || data.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height}x{channels} probability map with {} values",
                data.len()
            )));
        }
        for px in data.chunks_exact(channels) {
            let sum: f64 = px.iter().sum();
            if px.iter().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(
                    "pixel distribution must lie in [0,1] and sum to 1".into(),
                ));
            }
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn same_shape(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }
}

/// Per-pixel label ids; `IGNORE` marks excluded pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl SegmentationMask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} mask with {} labels",
                labels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn filled(width: usize, height: usize, label: u8) -> Result<Self> {
        Self::new(width, height, vec![label; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn same_shape(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }

    pub fn validate(&self, table: &CategoryTable) -> Result<()> {
        match self.labels.iter().find(|&&l| !table.is_valid_mask_label(l)) {
            Some(l) => Err(Error::InvalidInput(format!("mask label {l} is not a known category"))),
            None => Ok(()),
        }
    }

    /// Writes an indexed PNG with the VOC palette.
    pub fn save(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(voc_palette().iter().flatten().copied().collect::<Vec<u8>>());
        let mut writer = enc.write_header().map_err(|e| Error::corrupt(path, e))?;
        writer
            .write_image_data(&self.labels)
            .map_err(|e| Error::corrupt(path, e))?;
        writer.finish().map_err(|e| Error::corrupt(path, e))?;
        Ok(())
    }

    /// Reads an indexed or 8-bit grayscale PNG; sample values are label ids.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|source| Error::Unreadable {
            path: path.to_path_buf(),
            source,
        })?;
        let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
        decoder.set_transformations(png::Transformations::IDENTITY);
        let mut reader = decoder.read_info().map_err(|e| match e {
            png::DecodingError::Format(_) => Error::UnsupportedFormat {
                path: path.to_path_buf(),
            },
            other => Error::corrupt(path, other),
        })?;
        let info = reader.info();
        if info.bit_depth != png::BitDepth::Eight
            || !matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale)
        {
            return Err(Error::corrupt(path, "mask must be 8-bit indexed or grayscale"));
        }
        let mut buf = vec![0; reader.output_buffer_size()];
        let frame = reader.next_frame(&mut buf).map_err(|e| Error::corrupt(path, e))?;
        buf.truncate(frame.buffer_size());
        let (w, h) = (frame.width as usize, frame.height as usize);
        let labels = if frame.line_size == w {
            buf
        } else {
            buf.chunks(frame.line_size).flat_map(|r| r[..w].to_vec()).collect()
        };
        Self::new(w, h, labels)
    }
}

/// The standard 256-entry VOC colormap; index 255 (ignore) is cream.
pub fn voc_palette() -> Vec<[u8; 3]> {
    (0..256u32)
        .map(|i| {
            let mut rgb = [0u8; 3];
            let mut c = i;
            for j in 0..8 {
                for (k, v) in rgb.iter_mut().enumerate() {
                    *v |= (((c >> k) & 1) as u8) << (7 - j);
                }
                c >>= 3;
            }
            rgb
        })
        .collect()
}

/// Writes `bytes` to `path` through a temporary sibling so readers never
/// observe partial files.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
