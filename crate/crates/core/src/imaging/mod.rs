//! Images, masks and the dataset preparation steps: bounding-box crop,
//! centred zero padding, normalization, thresholding and augmentation.

mod augment;
pub mod io;

use std::path::Path;

pub use augment::{augment, hflip, rotate, scale_brightness, vflip, AugmentSpec};
pub use io::{decode_gray, decode_image, encode_gray, encode_image, FormatError};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Foreground decision threshold on 8-bit intensities (strictly greater).
pub const DEFAULT_THRESHOLD: u8 = 127;

/// Row-major 8-bit raster with a fixed number of interleaved channels.
pub trait Raster: Sized + Clone {
    const CHANNELS: usize;
    /// Whether resampling may blend neighbouring pixels. Masks use nearest
    /// neighbour so they stay binary.
    const SMOOTH: bool;

    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn raw(&self) -> &[u8];
    fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Self;
}

fn check_len(width: usize, height: usize, channels: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::dim(format!(
            "image dimensions {width}x{height} must be positive"
        )));
    }
    if width * height * channels != len {
        return Err(Error::dim(format!(
            "{width}x{height}x{channels} image needs {} bytes, got {len}",
            width * height * channels
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRGB {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ImageRGB {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        check_len(width, height, 3, pixels.len())?;
        Ok(ImageRGB { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        assert!(width > 0 && height > 0);
        ImageRGB {
            width,
            height,
            pixels: rgb.repeat(width * height),
        }
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

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        check_len(width, height, 1, pixels.len())?;
        Ok(GrayImage { width, height, pixels })
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

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

/// Pixels are 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_len(width, height, 1, data.len())?;
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::arg(format!("mask value {} at index {i} is not binary", data[i])));
        }
        Ok(BinaryMask { width, height, data })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0);
        BinaryMask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::empty(width, height);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(x, y) as u8;
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// 0 → 0, 1 → 255.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.data.iter().map(|&v| v * 255).collect(),
        }
    }
}

macro_rules! raster {
    ($t:ty, $field:ident, $ch:expr, $smooth:expr) => {
        impl Raster for $t {
            const CHANNELS: usize = $ch;
            const SMOOTH: bool = $smooth;

            fn width(&self) -> usize {
                self.width
            }

            fn height(&self) -> usize {
                self.height
            }

            fn raw(&self) -> &[u8] {
                &self.$field
            }

            fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Self {
                debug_assert_eq!(width * height * $ch, data.len());
                Self {
                    width,
                    height,
                    $field: data,
                }
            }
        }
    };
}

raster!(ImageRGB, pixels, 3, true);
raster!(GrayImage, pixels, 1, true);
raster!(BinaryMask, data, 1, false);

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_min > x_max || y_min > y_max {
            return Err(Error::arg(format!(
                "bounding box ({x_min},{y_min})-({x_max},{y_max}) has min > max"
            )));
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    pub fn check_within(&self, width: usize, height: usize) -> Result<()> {
        if self.x_min > self.x_max || self.y_min > self.y_max {
            return Err(Error::arg(format!("bounding box {self:?} has min > max")));
        }
        if self.x_max >= width || self.y_max >= height {
            return Err(Error::arg(format!(
                "bounding box {self:?} exceeds the {width}x{height} image"
            )));
        }
        Ok(())
    }

    /// Grows every side by `margin`, clamped to a `width × height` image.
    pub fn expand(&self, margin: usize, width: usize, height: usize) -> BBox {
        BBox {
            x_min: self.x_min.saturating_sub(margin),
            y_min: self.y_min.saturating_sub(margin),
            x_max: (self.x_max + margin).min(width - 1),
            y_max: (self.y_max + margin).min(height - 1),
        }
    }
}

/// Copies the `w × h` block whose top-left corner is `(x, y)`.
pub fn crop<R: Raster>(img: &R, x: usize, y: usize, w: usize, h: usize) -> Result<R> {
    if w == 0 || h == 0 || x + w > img.width() || y + h > img.height() {
        return Err(Error::arg(format!(
            "region {w}x{h} at ({x},{y}) does not fit a {}x{} image",
            img.width(),
            img.height()
        )));
    }
    let c = R::CHANNELS;
    let stride = img.width() * c;
    let mut out = Vec::with_capacity(w * h * c);
    for row in y..y + h {
        let start = row * stride + x * c;
        out.extend_from_slice(&img.raw()[start..start + w * c]);
    }
    Ok(R::from_raw(w, h, out))
}

/// The inclusive `bbox` expanded by `margin` and clamped to the image.
pub fn crop_bbox<R: Raster>(img: &R, bbox: &BBox, margin: usize) -> Result<R> {
    bbox.check_within(img.width(), img.height())?;
    let b = bbox.expand(margin, img.width(), img.height());
    crop(img, b.x_min, b.y_min, b.width(), b.height())
}

/// Half-pixel-centred resampling: bilinear for smooth rasters, nearest
/// neighbour for masks.
pub fn resize<R: Raster>(img: &R, width: usize, height: usize) -> R {
    assert!(width > 0 && height > 0);
    let (iw, ih, c) = (img.width(), img.height(), R::CHANNELS);
    let src = img.raw();
    let mut out = vec![0u8; width * height * c];
    if !R::SMOOTH {
        for y in 0..height {
            let sy = ((y * 2 + 1) * ih / (height * 2)).min(ih - 1);
            for x in 0..width {
                let sx = ((x * 2 + 1) * iw / (width * 2)).min(iw - 1);
                let (o, i) = ((y * width + x) * c, (sy * iw + sx) * c);
                out[o..o + c].copy_from_slice(&src[i..i + c]);
            }
        }
        return R::from_raw(width, height, out);
    }
    let taps = |o: usize, inn: usize, outn: usize| -> (usize, usize, f32) {
        let s = ((o as f32 + 0.5) * inn as f32 / outn as f32 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(inn - 1);
        let i1 = (i0 + 1).min(inn - 1);
        (i0, i1, s - i0 as f32)
    };
    for y in 0..height {
        let (y0, y1, fy) = taps(y, ih, height);
        for x in 0..width {
            let (x0, x1, fx) = taps(x, iw, width);
            for ch in 0..c {
                let at = |xx: usize, yy: usize| src[(yy * iw + xx) * c + ch] as f32;
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out[(y * width + x) * c + ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    R::from_raw(width, height, out)
}

/// A patch placed on a zero canvas, with the placement needed to undo it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Padded<R> {
    pub image: R,
    /// Top-left corner of the placed patch.
    pub offset: (usize, usize),
    /// Size of the placed patch (after any downscaling).
    pub placed: (usize, usize),
}

impl<R: Raster> Padded<R> {
    /// The placed patch, cut back out of the canvas.
    pub fn unpad(&self) -> R {
        crop(&self.image, self.offset.0, self.offset.1, self.placed.0, self.placed.1)
            .expect("placement lies inside the canvas")
    }
}

/// Centres `patch` on a black `target × target` canvas. Patches larger than
/// the target are first shrunk (aspect preserved) so the longer side fits.
pub fn pad_to_square<R: Raster>(patch: &R, target: usize) -> Padded<R> {
    assert!(target > 0);
    let (w, h) = (patch.width(), patch.height());
    let scaled;
    let patch = if w > target || h > target {
        let s = target as f64 / w.max(h) as f64;
        let nw = ((w as f64 * s).round() as usize).clamp(1, target);
        let nh = ((h as f64 * s).round() as usize).clamp(1, target);
        scaled = resize(patch, nw, nh);
        &scaled
    } else {
        patch
    };
    let (w, h, c) = (patch.width(), patch.height(), R::CHANNELS);
    let (ox, oy) = ((target - w) / 2, (target - h) / 2);
    let mut out = vec![0u8; target * target * c];
    for row in 0..h {
        let dst = ((oy + row) * target + ox) * c;
        out[dst..dst + w * c].copy_from_slice(&patch.raw()[row * w * c..(row + 1) * w * c]);
    }
    Padded {
        image: R::from_raw(target, target, out),
        offset: (ox, oy),
        placed: (w, h),
    }
}

/// `1×3×H×W` tensor with `x / 127.5 - 1`.
pub fn normalize(image: &ImageRGB) -> Tensor {
    let (w, h) = (image.width, image.height);
    let mut data = vec![0.0f32; 3 * w * h];
    for (i, px) in image.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    Tensor::new(&[1, 3, h, w], data).expect("shape matches pixel count")
}

/// `1×1×H×W` tensor of 0.0 / 1.0.
pub fn mask_tensor(mask: &BinaryMask) -> Tensor {
    Tensor::new(
        &[1, 1, mask.height, mask.width],
        mask.data.iter().map(|&v| v as f32).collect(),
    )
    .expect("shape matches pixel count")
}

/// Pixel becomes foreground iff its value is strictly greater than
/// `threshold`.
pub fn threshold_mask(gray: &GrayImage, threshold: u8) -> BinaryMask {
    BinaryMask {
        width: gray.width,
        height: gray.height,
        data: gray.pixels.iter().map(|&v| (v > threshold) as u8).collect(),
    }
}

/// `round(p · 255)` with ties away from zero, so p = 0.5 gives 128 and is
/// foreground under the default threshold.
pub fn prob_to_gray(p: f32) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grayscale rendering of plane `n` of an `N×1×H×W` probability tensor.
pub fn probability_image(probs: &Tensor, n: usize) -> Result<GrayImage> {
    let (batch, c, h, w) = probs.dims4()?;
    if c != 1 || n >= batch {
        return Err(Error::dim(format!(
            "expected plane {n} of an Nx1xHxW map, got shape {:?}",
            probs.shape()
        )));
    }
    GrayImage::new(w, h, probs.plane(n, 0).iter().map(|&p| prob_to_gray(p)).collect())
}

/// Tight box around the foreground, grown by `margin` and clamped. `None`
/// for an empty mask.
pub fn mask_to_bbox(mask: &BinaryMask, margin: usize) -> Option<BBox> {
    let mut b: Option<BBox> = None;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                b = Some(match b {
                    None => BBox {
                        x_min: x,
                        y_min: y,
                        x_max: x,
                        y_max: y,
                    },
                    Some(b) => BBox {
                        x_min: b.x_min.min(x),
                        y_min: b.y_min,
                        x_max: b.x_max.max(x),
                        y_max: y,
                    },
                });
            }
        }
    }
    b.map(|b| b.expand(margin, mask.width, mask.height))
}

/// Copy of `image` with the mask boundary painted in `rgb`. A boundary
/// pixel is foreground with a 4-neighbour in the background or on the edge.
pub fn overlay_boundary(image: &ImageRGB, mask: &BinaryMask, rgb: [u8; 3]) -> Result<ImageRGB> {
    let (w, h) = (image.width, image.height);
    if (mask.width, mask.height) != (w, h) {
        return Err(Error::dim(format!(
            "overlay: mask is {}x{}, image is {w}x{h}",
            mask.width, mask.height
        )));
    }
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !mask.get(x - 1, y)
                || !mask.get(x + 1, y)
                || !mask.get(x, y - 1)
                || !mask.get(x, y + 1);
            if edge {
                out.set(x, y, rgb);
            }
        }
    }
    Ok(out)
}

/// One row of a bounding-box annotation file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BBoxRecord {
    /// 1-based data row number (the header is row 0).
    pub row: usize,
    pub filename: String,
    pub bbox: BBox,
}

/// Parses `filename,x_min,y_min,x_max,y_max` lines after a header row.
pub fn read_bbox_csv(path: impl AsRef<Path>) -> Result<Vec<BBoxRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_bbox_csv(&text)
}

pub fn parse_bbox_csv(text: &str) -> Result<Vec<BBoxRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::arg(format!("bbox CSV row {row}: {e}")))?;
        if rec.len() != 5 {
            return Err(Error::arg(format!(
                "bbox CSV row {row}: expected 5 fields, found {}",
                rec.len()
            )));
        }
        let mut v = [0usize; 4];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = rec[k + 1].parse().map_err(|_| {
                Error::arg(format!(
                    "bbox CSV row {row}: '{}' is not a non-negative integer",
                    &rec[k + 1]
                ))
            })?;
        }
        let bbox = BBox::new(v[0], v[1], v[2], v[3])
            .map_err(|e| Error::arg(format!("bbox CSV row {row} ({}): {e}", &rec[0])))?;
        out.push(BBoxRecord {
            row,
            filename: rec[0].to_string(),
            bbox,
        });
    }
    Ok(out)
}
