//! Image buffers: 8-bit storage, normalized `f32` planes, PNG/PNM I/O.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};

use crate::error::{Error, ImageError, Result};
use crate::tensor::{Shape, Tensor};

/// BT.601 luma weights.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Single-channel `f32` raster, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape("plane", format!("{width}x{height}"), format!("{} values", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    /// Evaluates `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    /// Channel `c` of batch entry `n`.
    pub fn from_tensor(t: &Tensor, n: usize, c: usize) -> Self {
        let s = t.shape();
        Self {
            width: s.w,
            height: s.h,
            data: t.plane(n, c).to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), self.data.clone()).expect("sized")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Pixel with coordinates clamped into the frame.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Plane, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.expect_same_dims("zip_map", other)?;
        Ok(Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn expect_same_dims(&self, op: &'static str, other: &Plane) -> Result<()> {
        if self.dims() == other.dims() {
            Ok(())
        } else {
            Err(Error::shape(
                op,
                format!("{}x{}", self.width, self.height),
                format!("{}x{}", other.width, other.height),
            ))
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::invalid(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        Ok(Self::from_fn(width, height, |x, y| self.get(x0 + x, y0 + y)))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }
}

/// One or three normalized channels of equal size.
#[derive(Clone, Debug, PartialEq)]
pub struct RealImage {
    channels: Vec<Plane>,
}

impl RealImage {
    pub fn new(channels: Vec<Plane>) -> Result<Self> {
        match channels.len() {
            1 | 3 => {}
            n => return Err(Error::invalid(format!("images have 1 or 3 channels, got {n}"))),
        }
        for c in &channels[1..] {
            channels[0].expect_same_dims("image channels", c)?;
        }
        Ok(Self { channels })
    }

    pub fn gray(plane: Plane) -> Self {
        Self { channels: vec![plane] }
    }

    pub fn channels(&self) -> &[Plane] {
        &self.channels
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn width(&self) -> usize {
        self.channels[0].width()
    }

    pub fn height(&self) -> usize {
        self.channels[0].height()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.channels[0].dims()
    }

    /// BT.601 luminance; a gray image returns its only channel.
    pub fn luma(&self) -> Plane {
        match self.channels.as_slice() {
            [g] => g.clone(),
            [r, g, b] => {
                let data = r
                    .data()
                    .iter()
                    .zip(g.data())
                    .zip(b.data())
                    .map(|((&r, &g), &b)| LUMA[0] * r + LUMA[1] * g + LUMA[2] * b)
                    .collect();
                Plane::new(r.width(), r.height(), data).expect("sized")
            }
            _ => unreachable!("validated channel count"),
        }
    }

    pub fn map_channels(&self, mut f: impl FnMut(&Plane) -> Plane) -> Self {
        Self {
            channels: self.channels.iter().map(&mut f).collect(),
        }
    }
}

/// 8-bit interleaved samples with 1 (gray) or 3 (RGB) channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    samples: Vec<u8>,
}

/// `round(v * 255)` with ties away from zero, after clamping to `[0, 1]`.
#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[inline]
pub fn normalize(v: u8) -> f32 {
    v as f32 / 255.0
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, samples: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("images have 1 or 3 channels, got {channels}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("image has a zero dimension"));
        }
        if samples.len() != width * height * channels {
            return Err(Error::shape(
                "image buffer",
                format!("{width}x{height}x{channels}"),
                format!("{} samples", samples.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            samples,
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

    pub fn samples(&self) -> &[u8] {
        &self.samples
    }

    /// Normalized view: each sample divided by 255.
    pub fn to_real(&self) -> RealImage {
        let planes = (0..self.channels)
            .map(|c| {
                let data = self
                    .samples
                    .iter()
                    .skip(c)
                    .step_by(self.channels)
                    .map(|&v| normalize(v))
                    .collect();
                Plane::new(self.width, self.height, data).expect("sized")
            })
            .collect();
        RealImage { channels: planes }
    }

    pub fn from_real(img: &RealImage) -> Self {
        let (w, h) = img.dims();
        let c = img.channel_count();
        let mut samples = Vec::with_capacity(w * h * c);
        for i in 0..w * h {
            for p in img.channels() {
                samples.push(quantize(p.data()[i]));
            }
        }
        Self {
            width: w,
            height: h,
            channels: c,
            samples,
        }
    }

    pub fn from_plane(p: &Plane) -> Self {
        Self::from_real(&RealImage::gray(p.clone()))
    }
}

/// BT.601 conversion of an RGB buffer to one 8-bit channel.
pub fn rgb_to_gray(img: &ImageBuffer) -> Result<ImageBuffer> {
    if img.channels != 3 {
        return Err(Error::invalid(format!(
            "rgb_to_gray expects 3 channels, got {}",
            img.channels
        )));
    }
    Ok(ImageBuffer::from_plane(&img.to_real().luma()))
}

fn image_err(path: &Path, source: ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn format_for(path: &Path) -> Option<ImageFormat> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    match ext.as_str() {
        "png" => Some(ImageFormat::Png),
        "pgm" | "ppm" | "pnm" => Some(ImageFormat::Pnm),
        _ => None,
    }
}

/// Loads a PNG or binary/ASCII PGM/PPM file. Alpha is dropped; images with
/// any colour become RGB, others gray.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| image_err(path, ImageError::Io(e)))?;
    match image::guess_format(&bytes) {
        Ok(ImageFormat::Png | ImageFormat::Pnm) => {}
        _ => return Err(image_err(path, ImageError::UnsupportedFormat)),
    }
    let reader = ImageReader::new(std::io::Cursor::new(&bytes))
        .with_guessed_format()
        .map_err(|e| image_err(path, ImageError::Io(e)))?;
    let decoded = reader.decode().map_err(|e| {
        let source = match e {
            image::ImageError::Unsupported(_) => ImageError::UnsupportedFormat,
            other => ImageError::Corrupt(other.to_string()),
        };
        image_err(path, source)
    })?;
    if decoded.width() == 0 || decoded.height() == 0 {
        return Err(image_err(path, ImageError::ZeroDimension));
    }
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let buf = if decoded.color().has_color() {
        ImageBuffer::new(w, h, 3, decoded.to_rgb8().into_raw())
    } else {
        ImageBuffer::new(w, h, 1, decoded.to_luma8().into_raw())
    };
    buf.map_err(|e| image_err(path, ImageError::Corrupt(e.to_string())))
}

/// Writes PNG, or binary PGM/PPM, chosen by file extension.
pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = format_for(path).ok_or_else(|| image_err(path, ImageError::UnsupportedFormat))?;
    let (w, h) = (img.width as u32, img.height as u32);
    let color = if img.channels == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    };
    let wrap = |e: image::ImageError| image_err(path, ImageError::Corrupt(e.to_string()));
    match format {
        ImageFormat::Pnm => {
            let file = File::create(path).map_err(|e| image_err(path, ImageError::Io(e)))?;
            let subtype = if img.channels == 1 {
                PnmSubtype::Graymap(SampleEncoding::Binary)
            } else {
                PnmSubtype::Pixmap(SampleEncoding::Binary)
            };
            PnmEncoder::new(BufWriter::new(file))
                .with_subtype(subtype)
                .write_image(&img.samples, w, h, color)
                .map_err(wrap)
        }
        _ => {
            let dynamic = if img.channels == 1 {
                image::GrayImage::from_raw(w, h, img.samples.clone()).map(DynamicImage::ImageLuma8)
            } else {
                image::RgbImage::from_raw(w, h, img.samples.clone()).map(DynamicImage::ImageRgb8)
            }
            .expect("buffer sized at construction");
            debug_assert!(matches!(dynamic.color(), ColorType::L8 | ColorType::Rgb8));
            dynamic.save_with_format(path, ImageFormat::Png).map_err(wrap)
        }
    }
}
