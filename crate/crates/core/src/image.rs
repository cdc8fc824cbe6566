//! Planar-interleaved float images and Netpbm I/O.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{LabError, Result};

/// Row-major, channel-interleaved image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn rgb(width: usize, height: usize) -> Self {
        Self::new(width, height, 3)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize, c: usize) -> &mut f64 {
        &mut self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// One channel as a dense `width * height` plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    /// Binary PPM (P6), 8 bits per channel. Values are clamped to `[0, 1]`.
    pub fn write_ppm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        assert_eq!(self.channels, 3, "PPM needs an RGB image");
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_all(&bytes)
    }

    pub fn read_ppm<R: BufRead>(mut r: R) -> Result<Self> {
        let (magic, width, height, maxval) = read_netpbm_header(&mut r)?;
        if magic != "P6" || maxval == 0 || maxval > 255 {
            return Err(LabError::Parse(format!(
                "expected 8-bit P6, got {magic} maxval {maxval}"
            )));
        }
        let mut bytes = vec![0u8; width * height * 3];
        r.read_exact(&mut bytes)
            .map_err(|_| LabError::Parse("truncated PPM body".into()))?;
        Ok(Self {
            width,
            height,
            channels: 3,
            data: bytes.iter().map(|&b| b as f64 / maxval as f64).collect(),
        })
    }

    /// 16-bit binary PGM (P5, big-endian samples) of a single-channel image,
    /// with `max_value` mapped to 65535.
    pub fn write_pgm16<W: Write>(&self, mut w: W, max_value: f64) -> std::io::Result<()> {
        assert_eq!(self.channels, 1, "PGM needs a single-channel image");
        write!(w, "P5\n{} {}\n65535\n", self.width, self.height)?;
        let scale = if max_value > 0.0 { 65535.0 / max_value } else { 0.0 };
        let mut bytes = Vec::with_capacity(self.data.len() * 2);
        for &v in &self.data {
            let q = (v * scale).round().clamp(0.0, 65535.0) as u16;
            bytes.extend_from_slice(&q.to_be_bytes());
        }
        w.write_all(&bytes)
    }

    pub fn read_pgm16<R: BufRead>(mut r: R, max_value: f64) -> Result<Self> {
        let (magic, width, height, maxval) = read_netpbm_header(&mut r)?;
        if magic != "P5" || maxval != 65535 {
            return Err(LabError::Parse(format!(
                "expected 16-bit P5, got {magic} maxval {maxval}"
            )));
        }
        let mut bytes = vec![0u8; width * height * 2];
        r.read_exact(&mut bytes)
            .map_err(|_| LabError::Parse("truncated PGM body".into()))?;
        Ok(Self {
            width,
            height,
            channels: 1,
            data: bytes
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 * max_value / 65535.0)
                .collect(),
        })
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
        self.write_ppm(std::io::BufWriter::new(f))
            .map_err(|e| LabError::io(path, e))
    }

    pub fn save_pgm16(&self, path: &Path, max_value: f64) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
        self.write_pgm16(std::io::BufWriter::new(f), max_value)
            .map_err(|e| LabError::io(path, e))
    }
}

fn read_netpbm_header<R: BufRead>(r: &mut R) -> Result<(String, usize, usize, usize)> {
    let mut tokens: Vec<String> = Vec::with_capacity(4);
    let mut byte = [0u8; 1];
    let mut current = String::new();
    let mut in_comment = false;
    while tokens.len() < 4 {
        if r.read(&mut byte).map_err(|e| LabError::Parse(e.to_string()))? == 0 {
            return Err(LabError::Parse("truncated Netpbm header".into()));
        }
        let ch = byte[0] as char;
        if in_comment {
            in_comment = ch != '\n';
            continue;
        }
        if ch == '#' {
            in_comment = true;
        } else if ch.is_ascii_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else {
            current.push(ch);
        }
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| LabError::Parse(format!("bad Netpbm header field {s:?}")))
    };
    Ok((tokens[0].clone(), num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?))
}
