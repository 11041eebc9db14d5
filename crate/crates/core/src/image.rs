//! Grayscale rasters, PGM/PNG I/O, noise synthesis and PSNR.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// PSNR reported when two images are identical.
pub const PSNR_CAP: f64 = 99.0;

/// Row-major grayscale image with intensities nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Param(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::Param(format!(
                "pixel buffer has {} entries, expected {}",
                pixels.len(),
                height * width
            )));
        }
        if let Some(i) = pixels.iter().position(|p| !p.is_finite()) {
            return Err(Error::Param(format!("non-finite pixel at index {i}")));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c));
            }
        }
        Self::new(height, width, pixels)
    }

    /// Builds an image without validation. Callers guarantee the shape.
    pub(crate) fn from_raw(height: usize, width: usize, pixels: Vec<f64>) -> Self {
        debug_assert_eq!(pixels.len(), height * width);
        Image {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.pixels[row * self.width + col] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Copies the `h x w` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Image> {
        if h == 0 || w == 0 || row + h > self.height || col + w > self.width {
            return Err(Error::Param(format!(
                "crop {h}x{w} at ({row},{col}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(h * w);
        for r in row..row + h {
            pixels.extend_from_slice(&self.pixels[r * self.width + col..r * self.width + col + w]);
        }
        Ok(Image::from_raw(h, w, pixels))
    }

    /// Pixels clipped to `[0,1]` and quantized to 8 bits.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| quantize_byte(p)).collect()
    }

    /// Snaps every pixel to the 256-level grid `k/255` after clipping.
    pub fn quantized(&self) -> Image {
        let pixels = self
            .pixels
            .iter()
            .map(|&p| f64::from(quantize_byte(p)) / 255.0)
            .collect();
        Image::from_raw(self.height, self.width, pixels)
    }
}

/// Clip to `[0,1]`, scale by 255 and round half away from zero.
pub fn quantize_byte(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a binary PGM (P5, maxval 255) or an 8-bit grayscale PNG.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P5") {
        decode_pgm(&bytes)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(&bytes)
    } else {
        Err(Error::ImageFormat(format!(
            "{}: unsupported format (expected P5 PGM or grayscale PNG)",
            path.display()
        )))
    }
}

/// Writes a binary PGM after clipping and 8-bit rounding.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(&encode_pgm(img))
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut buf = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    buf.extend(img.to_bytes());
    buf
}

fn pgm_token(bytes: &[u8], pos: &mut usize, field: &str) -> Result<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::ImageFormat(format!("missing or malformed {field}")));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::ImageFormat(format!("malformed {field}")))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    if !bytes.starts_with(b"P5") {
        return Err(Error::ImageFormat("bad magic: expected P5".into()));
    }
    let mut pos = 2;
    let width = pgm_token(bytes, &mut pos, "width")?;
    let height = pgm_token(bytes, &mut pos, "height")?;
    let maxval = pgm_token(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::ImageFormat(format!("maxval must be 255, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::ImageFormat(format!(
            "width and height must be positive, got {width}x{height}"
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::ImageFormat("unexpected end of pixel data".into()));
    }
    pos += 1;
    let need = width * height;
    let data = &bytes[pos..];
    if data.len() < need {
        return Err(Error::ImageFormat("unexpected end of pixel data".into()));
    }
    let pixels = data[..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Image::from_raw(height, width, pixels))
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    let decoder = png::Decoder::new(bytes);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::ImageFormat(format!("png: {e}")))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::ImageFormat(format!(
            "png: unsupported color type {:?} / bit depth {:?}; only 8-bit grayscale",
            info.color_type, info.bit_depth
        )));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::ImageFormat(format!("png: {e}")))?;
    let data = &buf[..frame.buffer_size()];
    let mut pixels = Vec::with_capacity(width * height);
    for r in 0..height {
        let row = &data[r * frame.line_size..r * frame.line_size + width];
        pixels.extend(row.iter().map(|&b| f64::from(b) / 255.0));
    }
    Image::new(height, width, pixels)
}

/// Seeded generator used for all noise and initialization draws
/// (ChaCha8 from `rand_chacha` 0.3).
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Adds i.i.d. zero-mean Gaussian noise with std `sigma255 / 255`.
///
/// Samples come from [`rng_from_seed`] in row-major order, one standard normal
/// per pixel. With `quantize`, the result is clipped and snapped to `k/255`.
pub fn add_gaussian_noise(img: &Image, sigma255: f64, seed: u64, quantize: bool) -> Result<Image> {
    if !(sigma255 >= 0.0) || !sigma255.is_finite() {
        return Err(Error::Param(format!(
            "noise sigma must be finite and nonnegative, got {sigma255}"
        )));
    }
    let std = sigma255 / 255.0;
    let mut rng = rng_from_seed(seed);
    let pixels = img
        .pixels
        .iter()
        .map(|&p| {
            let n: f64 = StandardNormal.sample(&mut rng);
            p + std * n
        })
        .collect();
    let noisy = Image::from_raw(img.height, img.width, pixels);
    Ok(if quantize { noisy.quantized() } else { noisy })
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Param(format!(
            "dimension mismatch: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let sum: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP`] for identical inputs.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::Param(format!("peak must be positive, got {peak}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// 3x3 binomial (Gaussian) blur with border renormalization. Baseline only.
pub fn gaussian_blur3(img: &Image) -> Image {
    const K: [f64; 3] = [1.0, 2.0, 1.0];
    let (h, w) = (img.height as isize, img.width as isize);
    Image::from_fn(img.height, img.width, |r, c| {
        let (mut acc, mut wsum) = (0.0, 0.0);
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr >= 0 && rr < h && cc >= 0 && cc < w {
                    let wt = K[(dr + 1) as usize] * K[(dc + 1) as usize];
                    acc += wt * img.get(rr as usize, cc as usize);
                    wsum += wt;
                }
            }
        }
        acc / wsum
    })
    .expect("blur preserves shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, v: &[f64]) -> Image {
        Image::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn pgm_bytes_scale_to_unit_range() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend([0u8, 255, 128, 64]);
        let im = decode_pgm(&bytes).unwrap();
        assert_eq!(im.pixels(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n# another\n255\n".to_vec();
        bytes.extend([10u8, 20]);
        let im = decode_pgm(&bytes).unwrap();
        assert_eq!((im.height(), im.width()), (1, 2));
    }

    #[test]
    fn truncated_payload_is_reported() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend([0u8, 255, 128]);
        let err = decode_pgm(&bytes).unwrap_err().to_string();
        assert!(err.contains("unexpected end of pixel data"), "{err}");
    }

    #[test]
    fn maxval_other_than_255_is_rejected() {
        let mut bytes = b"P5\n1 1\n65535\n".to_vec();
        bytes.extend([0u8, 0]);
        let err = decode_pgm(&bytes).unwrap_err().to_string();
        assert!(err.contains("maxval"), "{err}");
    }

    #[test]
    fn save_rounds_and_clips() {
        let im = img(1, 4, &[1.2, 0.5, -0.1, 0.25]);
        let bytes = encode_pgm(&im);
        let tail = &bytes[bytes.len() - 4..];
        // 0.25 * 255 = 63.75 -> 64
        assert_eq!(tail, &[255, 128, 0, 64]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let im = Image::from_fn(5, 7, |r, c| ((r * 7 + c) as f64 * 0.031) % 1.0).unwrap();
        save_image(&im, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back, im.quantized());
    }

    #[test]
    fn png_grayscale_loads() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 3, 2);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0, 51, 102, 153, 204, 255]).unwrap();
        }
        let im = decode_png(&out).unwrap();
        assert_eq!((im.height(), im.width()), (2, 3));
        assert_eq!(im.get(1, 2), 1.0);
        assert_eq!(im.get(0, 1), 0.2);
    }

    #[test]
    fn unknown_format_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        std::fs::write(&path, b"GIF89a").unwrap();
        assert!(matches!(load_image(&path), Err(Error::ImageFormat(_))));
    }

    #[test]
    fn zero_noise_is_identity() {
        let im = Image::from_fn(4, 4, |r, c| (r + c) as f64 / 10.0).unwrap();
        assert_eq!(add_gaussian_noise(&im, 0.0, 7, false).unwrap(), im);
    }

    #[test]
    fn quantized_noise_lands_on_grid() {
        let im = Image::filled(16, 16, 0.5).unwrap();
        let n = add_gaussian_noise(&im, 40.0, 3, true).unwrap();
        for &p in n.pixels() {
            let k = p * 255.0;
            assert!((k - k.round()).abs() < 1e-9 && (0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn noise_is_seeded() {
        let im = Image::filled(8, 8, 0.5).unwrap();
        let a = add_gaussian_noise(&im, 10.0, 11, false).unwrap();
        let b = add_gaussian_noise(&im, 10.0, 11, false).unwrap();
        let c = add_gaussian_noise(&im, 10.0, 12, false).unwrap();
        assert!(a.pixels().iter().zip(b.pixels()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a, c);
    }

    #[test]
    fn negative_sigma_rejected() {
        let im = Image::filled(2, 2, 0.5).unwrap();
        assert!(matches!(add_gaussian_noise(&im, -1.0, 0, false), Err(Error::Param(_))));
    }

    #[test]
    fn noise_std_matches_request() {
        let im = Image::filled(1000, 1000, 0.5).unwrap();
        let n = add_gaussian_noise(&im, 25.0, 99, false).unwrap();
        let var = n.pixels().iter().map(|p| (p - 0.5) * (p - 0.5)).sum::<f64>() / 1e6;
        let rel = (var.sqrt() - 25.0 / 255.0).abs() / (25.0 / 255.0);
        assert!(rel < 0.05, "relative std error {rel}");
    }

    #[test]
    fn psnr_cases() {
        let a = img(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let b = img(2, 2, &[0.2, 0.2, 0.3, 0.4]);
        let p = psnr(&a, &b, 1.0).unwrap();
        // MSE = 0.01 / 4 = 0.0025
        assert!((p - 10.0 * 400f64.log10()).abs() < 1e-9);
        assert!((p - 26.0206).abs() < 1e-4);
        let c = img(1, 1, &[0.0]);
        let d = img(1, 1, &[0.1]);
        assert!((psnr(&c, &d, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(matches!(psnr(&a, &c, 1.0), Err(Error::Param(_))));
    }

    #[test]
    fn psnr_symmetric_and_decreasing() {
        let a = Image::from_fn(4, 4, |r, c| (r * 4 + c) as f64 / 16.0).unwrap();
        let mut b = a.clone();
        b.set(1, 1, b.get(1, 1) + 0.05);
        let p1 = psnr(&a, &b, 1.0).unwrap();
        assert_eq!(p1, psnr(&b, &a, 1.0).unwrap());
        b.set(1, 1, b.get(1, 1) + 0.05);
        assert!(psnr(&a, &b, 1.0).unwrap() < p1);
    }

    #[test]
    fn blur_preserves_constants() {
        let im = Image::filled(5, 6, 0.3).unwrap();
        let b = gaussian_blur3(&im);
        assert!(b.pixels().iter().all(|p| (p - 0.3).abs() < 1e-15));
    }
}
