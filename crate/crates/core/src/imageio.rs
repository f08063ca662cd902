//! 8-bit grayscale images: the simulator's input and reconstruction's output.
//!
//! PGM (binary P5) is the native format because its byte layout is exact and
//! diffable, which golden-file tests rely on. PNG is accepted on the read
//! side for ground-truth labels and source frames.

use crate::error::{Result, SpikeError};
use std::path::{Path, PathBuf};

/// Row-major H×W 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0u8; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(SpikeError::FrameSizeMismatch {
                expected: width * height,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.pixels[row * self.width + col] = value;
    }
}

/// Writes a binary P5 PGM with maxval 255. The emitted bytes are exactly
/// `P5\n{w} {h}\n255\n` followed by the row-major pixels.
pub fn write_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(img.pixels.len() + 32);
    out.extend_from_slice(format!("P5\n{} {}\n255\n", img.width, img.height).as_bytes());
    out.extend_from_slice(&img.pixels);
    std::fs::write(path, out).map_err(|e| SpikeError::io(format!("writing {}", path.display()), e))
}

/// Reads a binary P5 PGM with maxval up to 255. Header comments (`#`) are
/// skipped; pixel bytes are taken as-is without rescaling.
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let data =
        std::fs::read(path).map_err(|e| SpikeError::io(format!("reading {}", path.display()), e))?;
    parse_pgm(&data).map_err(|message| SpikeError::ImageFormat {
        path: path.to_path_buf(),
        message,
    })
}

fn pgm_token<'a>(data: &'a [u8], pos: &mut usize) -> std::result::Result<&'a str, String> {
    // Skip whitespace and comment lines.
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err("unexpected end of header".into());
    }
    std::str::from_utf8(&data[start..*pos]).map_err(|_| "non-ASCII header".into())
}

fn parse_pgm(data: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0usize;
    if pgm_token(data, &mut pos)? != "P5" {
        return Err("not a binary P5 PGM".into());
    }
    let width: usize = pgm_token(data, &mut pos)?.parse().map_err(|_| "bad width")?;
    let height: usize = pgm_token(data, &mut pos)?
        .parse()
        .map_err(|_| "bad height")?;
    let maxval: usize = pgm_token(data, &mut pos)?
        .parse()
        .map_err(|_| "bad maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = width * height;
    if data.len() < pos + need {
        return Err(format!(
            "raster truncated: need {need} bytes, have {}",
            data.len().saturating_sub(pos)
        ));
    }
    GrayImage::from_pixels(width, height, data[pos..pos + need].to_vec())
        .map_err(|e| e.to_string())
}

/// Reads a grayscale image, dispatching on the file extension
/// (`.pgm` native, `.png` via the image crate with luma conversion).
pub fn read_image(path: &Path) -> Result<GrayImage> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("pgm") => read_pgm(path),
        Some("png") => {
            let img = image::open(path).map_err(|e| SpikeError::ImageFormat {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            let luma = img.to_luma8();
            GrayImage::from_pixels(
                luma.width() as usize,
                luma.height() as usize,
                luma.into_raw(),
            )
        }
        other => Err(SpikeError::ImageFormat {
            path: path.to_path_buf(),
            message: format!("unsupported image extension {other:?}"),
        }),
    }
}

/// All `.pgm`/`.png` files directly under `dir`, sorted by file name.
pub fn load_image_dir(dir: &Path) -> Result<Vec<(PathBuf, GrayImage)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| SpikeError::io(format!("listing {}", dir.display()), e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                Some("pgm") | Some("png")
            )
        })
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| read_image(&p).map(|img| (p, img)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_is_byte_exact() {
        let img = GrayImage::from_pixels(3, 2, vec![0, 1, 2, 253, 254, 255]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        write_pgm(&img, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(read_pgm(&path).unwrap(), img);
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let img = parse_pgm(b"P5\n# made by hand\n2 1\n255\n\x10\x20").unwrap();
        assert_eq!(img.pixels(), &[0x10, 0x20]);
    }

    #[test]
    fn pgm_truncated_raster_is_an_error() {
        assert!(parse_pgm(b"P5\n4 4\n255\nxx").is_err());
        assert!(parse_pgm(b"P6\n1 1\n255\nx").is_err());
    }

    #[test]
    fn png_reads_back_as_luma() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let buf = image::GrayImage::from_raw(2, 2, vec![9, 18, 27, 36]).unwrap();
        buf.save(&path).unwrap();
        let img = read_image(&path).unwrap();
        assert_eq!(img.width(), 2);
        assert_eq!(img.height(), 2);
        assert_eq!(img.pixels(), &[9, 18, 27, 36]);
    }

    #[test]
    fn image_dir_is_sorted_by_name() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.pgm", "a.pgm", "c.txt"] {
            let p = dir.path().join(name);
            if name.ends_with(".pgm") {
                write_pgm(&GrayImage::new(1, 1), &p).unwrap();
            } else {
                std::fs::write(&p, "ignored").unwrap();
            }
        }
        let entries = load_image_dir(dir.path()).unwrap();
        let names: Vec<_> = entries
            .iter()
            .map(|(p, _)| p.file_name().unwrap().to_str().unwrap().to_string())
            .collect();
        assert_eq!(names, ["a.pgm", "b.pgm"]);
    }
}
