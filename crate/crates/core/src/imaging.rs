//! Pixel-grid primitives shared by every injection strategy: clipping,
//! value-domain conversion, deterministic noise, nearest-neighbor resizing
//! and pattern placement.
//!
//! All injection math happens in the 8-bit [0,255] domain with f64
//! intermediates; normalization to [0,1] happens only inside the training
//! module.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Fixed-shape H×W×C grid of 8-bit pixels, row-major, channels innermost.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidSize(format!("{height}x{width} image")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidSize(format!("{channels} channels (must be 1 or 3)")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} pixel bytes", height * width * channels),
                got: format!("{}", pixels.len()),
            });
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image::new(height, width, channels, vec![0; height * width * channels])
            .expect("zeros shape is valid")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.pixels[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: u8) {
        self.pixels[(row * self.width + col) * self.channels + ch] = v;
    }

    pub fn to_float(&self) -> FloatImage {
        FloatImage {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels: self.pixels.iter().map(|&p| f64::from(p)).collect(),
        }
    }

    /// Content hash of the raw pixel bytes (shape included), used for
    /// sample-identity and provenance checks.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.height as u64).to_le_bytes());
        hasher.update((self.width as u64).to_le_bytes());
        hasher.update((self.channels as u64).to_le_bytes());
        hasher.update(&self.pixels);
        hex::encode(hasher.finalize())
    }
}

/// Same shape as [`Image`] but with unbounded real pixel values, the
/// intermediate domain of blending and noise addition before `clip`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl FloatImage {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} pixel values", height * width * channels),
                got: format!("{}", pixels.len()),
            });
        }
        Ok(FloatImage {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }
}

/// A field of real values in [lo, hi], one per pixel position.
#[derive(Debug, Clone)]
pub struct NoiseField {
    shape: (usize, usize, usize),
    values: Vec<f64>,
    lo: f64,
    hi: f64,
}

impl NoiseField {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }
}

/// Rounds half away from zero, then clamps every value to [0, 255].
///
/// Total over finite inputs; NaN maps to 0 via the clamp.
pub fn clip(img: &FloatImage) -> Image {
    let pixels = img
        .pixels
        .iter()
        .map(|&v| {
            // f64::round is round-half-away-from-zero.
            let r = v.round();
            if r >= 255.0 {
                255
            } else if r <= 0.0 {
                0
            } else {
                r as u8
            }
        })
        .collect();
    Image {
        height: img.height,
        width: img.width,
        channels: img.channels,
        pixels,
    }
}

/// Draws an independent uniform value on [lo, hi] per pixel position.
pub fn uniform_noise(
    shape: (usize, usize, usize),
    lo: f64,
    hi: f64,
    rng: &mut impl Rng,
) -> Result<NoiseField> {
    if lo > hi {
        return Err(Error::InvalidRange { lo, hi });
    }
    let (h, w, c) = shape;
    let values = (0..h * w * c)
        .map(|_| if lo == hi { lo } else { rng.gen_range(lo..=hi) })
        .collect();
    Ok(NoiseField {
        shape,
        values,
        lo,
        hi,
    })
}

/// Adds a noise field to an image in float space.
pub fn add_noise(img: &Image, noise: &NoiseField) -> Result<FloatImage> {
    if img.shape() != noise.shape {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", img.shape()),
            got: format!("{:?}", noise.shape),
        });
    }
    let mut out = img.to_float();
    for (p, n) in out.pixels.iter_mut().zip(&noise.values) {
        *p += n;
    }
    Ok(out)
}

/// Nearest-neighbor resampling. Output pixel (i, j) copies source pixel
/// (⌊i·H/H'⌋, ⌊j·W/W'⌋), so a {0,255}-valued mask stays valued in {0,255}.
pub fn resize_nearest(img: &Image, target: (usize, usize)) -> Result<Image> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::InvalidSize(format!("resize target {th}x{tw}")));
    }
    let mut pixels = Vec::with_capacity(th * tw * img.channels);
    for i in 0..th {
        let si = i * img.height / th;
        for j in 0..tw {
            let sj = j * img.width / tw;
            for c in 0..img.channels {
                pixels.push(img.get(si, sj, c));
            }
        }
    }
    Image::new(th, tw, img.channels, pixels)
}

/// Positions a patch within a full-size frame. Returns the frame-sized
/// overlay (patch pixels inside the footprint, zeros elsewhere) and an
/// H×W coverage mask that is true exactly on the footprint.
pub fn place_at(
    canvas_shape: (usize, usize, usize),
    patch: &Image,
    anchor: (usize, usize),
) -> Result<(Image, Vec<bool>)> {
    let (ch, cw, cc) = canvas_shape;
    let (row, col) = anchor;
    if patch.channels != cc {
        return Err(Error::ShapeMismatch {
            expected: format!("{cc} channels"),
            got: format!("{}", patch.channels),
        });
    }
    if row + patch.height > ch || col + patch.width > cw {
        return Err(Error::Placement {
            patch_h: patch.height,
            patch_w: patch.width,
            row,
            col,
            canvas_h: ch,
            canvas_w: cw,
        });
    }
    let mut overlay = Image::zeros(ch, cw, cc);
    let mut coverage = vec![false; ch * cw];
    for i in 0..patch.height {
        for j in 0..patch.width {
            coverage[(row + i) * cw + (col + j)] = true;
            for c in 0..cc {
                overlay.set(row + i, col + j, c, patch.get(i, j, c));
            }
        }
    }
    Ok((overlay, coverage))
}

// --- PNG and raw-tensor IO ------------------------------------------------

pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    let (h, w) = (img.height as u32, img.width as u32);
    match img.channels {
        1 => {
            let buf =
                image::GrayImage::from_raw(w, h, img.pixels.clone()).expect("size checked");
            buf.save(path)?;
        }
        3 => {
            let buf =
                image::RgbImage::from_raw(w, h, img.pixels.clone()).expect("size checked");
            buf.save(path)?;
        }
        _ => unreachable!("Image invariant: channels in {{1,3}}"),
    }
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Image> {
    let dynimg = image::open(path)?;
    let img = match dynimg {
        image::DynamicImage::ImageLuma8(buf) => Image::new(
            buf.height() as usize,
            buf.width() as usize,
            1,
            buf.into_raw(),
        )?,
        other => {
            let buf = other.to_rgb8();
            Image::new(buf.height() as usize, buf.width() as usize, 3, buf.into_raw())?
        }
    };
    Ok(img)
}

const RAW_MAGIC: &[u8; 4] = b"IMG1";

/// Raw little-endian binary tensor: magic "IMG1", u16 H, u16 W, u8 C,
/// u8 pad (zero), then H·W·C pixel bytes row-major.
pub fn write_raw(img: &Image, path: &Path) -> Result<()> {
    if img.height > u16::MAX as usize || img.width > u16::MAX as usize {
        return Err(Error::InvalidSize(format!(
            "{}x{} exceeds raw-format u16 dimensions",
            img.height, img.width
        )));
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut header = Vec::with_capacity(10);
    header.extend_from_slice(RAW_MAGIC);
    header.extend_from_slice(&(img.height as u16).to_le_bytes());
    header.extend_from_slice(&(img.width as u16).to_le_bytes());
    header.push(img.channels as u8);
    header.push(0);
    f.write_all(&header).map_err(|e| Error::io(path, e))?;
    f.write_all(&img.pixels).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 10 || &bytes[0..4] != RAW_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "missing IMG1 magic".into(),
        });
    }
    let h = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let w = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let c = bytes[8] as usize;
    let expected = 10 + h * w * c;
    if bytes.len() != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    Image::new(h, w, c, bytes[10..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn clip_clamps_and_rounds() {
        let f = FloatImage::new(1, 3, 1, vec![267.0, -3.2, 127.5]).unwrap();
        assert_eq!(clip(&f).pixels(), &[255, 0, 128]);
    }

    #[test]
    fn clip_idempotent() {
        let f = FloatImage::new(1, 4, 1, vec![-1.0, 0.49, 254.5, 300.0]).unwrap();
        let once = clip(&f);
        let twice = clip(&once.to_float());
        assert_eq!(once, twice);
    }

    #[test]
    fn uniform_noise_degenerate_and_deterministic() {
        let s = Stream::new(1);
        let z = uniform_noise((2, 2, 3), 0.0, 0.0, &mut s.rng()).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));

        let a = uniform_noise((4, 4, 3), -5.0, 5.0, &mut s.rng()).unwrap();
        let b = uniform_noise((4, 4, 3), -5.0, 5.0, &mut s.rng()).unwrap();
        assert_eq!(a.values(), b.values());
        assert!(matches!(
            uniform_noise((1, 1, 1), 2.0, 1.0, &mut s.rng()),
            Err(Error::InvalidRange { .. })
        ));
    }

    #[test]
    fn uniform_noise_large_sample_stats() {
        let s = Stream::new(99);
        let field = uniform_noise((100, 100, 100), -5.0, 5.0, &mut s.rng()).unwrap();
        let mean = field.values().iter().sum::<f64>() / field.values().len() as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!(field.values().iter().all(|&v| (-5.0..=5.0).contains(&v)));
    }

    #[test]
    fn resize_identity_and_block_upscale() {
        let img = Image::new(2, 2, 1, vec![10, 20, 30, 40]).unwrap();
        assert_eq!(resize_nearest(&img, (2, 2)).unwrap(), img);

        let up = resize_nearest(&img, (4, 4)).unwrap();
        // each source pixel repeated in a 2x2 block
        let expected = vec![
            10, 10, 20, 20, //
            10, 10, 20, 20, //
            30, 30, 40, 40, //
            30, 30, 40, 40,
        ];
        assert_eq!(up.pixels(), &expected[..]);
        assert!(resize_nearest(&img, (0, 3)).is_err());
    }

    #[test]
    fn resize_keeps_mask_binary() {
        let mask = Image::new(3, 3, 1, vec![0, 255, 0, 255, 0, 255, 0, 255, 0]).unwrap();
        let r = resize_nearest(&mask, (7, 5)).unwrap();
        assert!(r.pixels().iter().all(|&p| p == 0 || p == 255));
    }

    #[test]
    fn place_at_footprint() {
        let patch = Image::new(1, 1, 1, vec![7]).unwrap();
        let (overlay, cov) = place_at((5, 5, 1), &patch, (2, 3)).unwrap();
        assert_eq!(cov.iter().filter(|&&b| b).count(), 1);
        assert!(cov[2 * 5 + 3]);
        assert_eq!(overlay.get(2, 3, 0), 7);

        let full = Image::zeros(5, 5, 1);
        let (_, cov) = place_at((5, 5, 1), &full, (0, 0)).unwrap();
        assert!(cov.iter().all(|&b| b));

        let wide = Image::zeros(1, 4, 1);
        assert!(matches!(
            place_at((5, 5, 1), &wide, (0, 3)),
            Err(Error::Placement { .. })
        ));
    }

    #[test]
    fn place_at_coverage_popcount() {
        let patch = Image::zeros(3, 4, 3);
        let (_, cov) = place_at((10, 10, 3), &patch, (1, 2)).unwrap();
        assert_eq!(
            cov.iter().filter(|&&b| b).count(),
            patch.pixels().len() / patch.channels()
        );
    }

    #[test]
    fn raw_roundtrip_exact_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.img1");
        let img = Image::new(2, 3, 1, vec![1, 2, 3, 4, 5, 6]).unwrap();
        write_raw(&img, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(
            bytes,
            vec![b'I', b'M', b'G', b'1', 2, 0, 3, 0, 1, 0, 1, 2, 3, 4, 5, 6]
        );
        assert_eq!(read_raw(&path).unwrap(), img);
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let img = Image::new(4, 4, 3, (0..48).collect()).unwrap();
        write_png(&img, &path).unwrap();
        assert_eq!(read_png(&path).unwrap(), img);
    }
}
