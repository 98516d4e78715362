use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BinaryMask, ImageRGB, Raster};
use crate::{Error, Result};

/// Random flips, a small rotation and a brightness change. Each op fires
/// independently with its own probability.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSpec {
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub rotate_p: f64,
    /// Rotation angle drawn uniformly from `±max_rotation_deg`.
    pub max_rotation_deg: f64,
    pub brightness_p: f64,
    /// Intensity factor drawn uniformly from `1 ± max_brightness`.
    pub max_brightness: f64,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            hflip_p: 0.5,
            vflip_p: 0.5,
            rotate_p: 0.5,
            max_rotation_deg: 15.0,
            brightness_p: 0.5,
            max_brightness: 0.1,
            seed: 0,
        }
    }
}

impl AugmentSpec {
    /// No op ever fires.
    pub fn identity() -> Self {
        AugmentSpec {
            hflip_p: 0.0,
            vflip_p: 0.0,
            rotate_p: 0.0,
            brightness_p: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("hflip_p", self.hflip_p),
            ("vflip_p", self.vflip_p),
            ("rotate_p", self.rotate_p),
            ("brightness_p", self.brightness_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment {name} = {p} is not a probability")));
            }
        }
        if !(0.0..=45.0).contains(&self.max_rotation_deg) {
            return Err(Error::Config(format!(
                "augment rotation {} degrees is outside [0, 45]",
                self.max_rotation_deg
            )));
        }
        if !(0.0..1.0).contains(&self.max_brightness) {
            return Err(Error::Config(format!(
                "augment brightness {} is outside [0, 1)",
                self.max_brightness
            )));
        }
        Ok(())
    }
}

pub fn hflip<R: Raster>(img: &R) -> R {
    let (w, h, c) = (img.width(), img.height(), R::CHANNELS);
    let src = img.raw();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            let i = (y * w + x) * c;
            out.extend_from_slice(&src[i..i + c]);
        }
    }
    R::from_raw(w, h, out)
}

pub fn vflip<R: Raster>(img: &R) -> R {
    let (w, h, c) = (img.width(), img.height(), R::CHANNELS);
    let src = img.raw();
    let mut out = Vec::with_capacity(src.len());
    for y in (0..h).rev() {
        out.extend_from_slice(&src[y * w * c..(y + 1) * w * c]);
    }
    R::from_raw(w, h, out)
}

/// Rotation about the image centre by `degrees` (counter-clockwise on
/// screen). Smooth rasters are sampled bilinearly, masks by nearest
/// neighbour; pixels mapped from outside the source are zero.
pub fn rotate<R: Raster>(img: &R, degrees: f64) -> R {
    let (w, h, c) = (img.width(), img.height(), R::CHANNELS);
    let src = img.raw();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = vec![0u8; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            let o = (y * w + x) * c;
            if !R::SMOOTH {
                let (rx, ry) = (sx.round(), sy.round());
                if rx >= 0.0 && ry >= 0.0 && (rx as usize) < w && (ry as usize) < h {
                    let i = (ry as usize * w + rx as usize) * c;
                    out[o..o + c].copy_from_slice(&src[i..i + c]);
                }
                continue;
            }
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            for ch in 0..c {
                let at = |xx: f64, yy: f64| -> f64 {
                    if xx < 0.0 || yy < 0.0 || xx as usize >= w || yy as usize >= h {
                        0.0
                    } else {
                        src[(yy as usize * w + xx as usize) * c + ch] as f64
                    }
                };
                let v = (at(x0, y0) * (1.0 - fx) + at(x0 + 1.0, y0) * fx) * (1.0 - fy)
                    + (at(x0, y0 + 1.0) * (1.0 - fx) + at(x0 + 1.0, y0 + 1.0) * fx) * fy;
                out[o + ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    R::from_raw(w, h, out)
}

pub fn scale_brightness(img: &ImageRGB, factor: f64) -> ImageRGB {
    let px = img
        .raw()
        .iter()
        .map(|&v| (v as f64 * factor).round().clamp(0.0, 255.0) as u8)
        .collect();
    ImageRGB::from_raw(img.width(), img.height(), px)
}

/// Applies the same random geometric transform to `image` and `mask`;
/// brightness only touches the image. Deterministic in `spec.seed`.
pub fn augment(image: &ImageRGB, mask: &BinaryMask, spec: &AugmentSpec) -> Result<(ImageRGB, BinaryMask)> {
    spec.validate()?;
    if (image.width(), image.height()) != (mask.width(), mask.height()) {
        return Err(Error::dim(format!(
            "image is {}x{} but mask is {}x{}",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Every draw happens unconditionally so one op's outcome never shifts
    // another's random stream.
    let hf = rng.random::<f64>() < spec.hflip_p;
    let vf = rng.random::<f64>() < spec.vflip_p;
    let rot = rng.random::<f64>() < spec.rotate_p;
    let angle = rng.random_range(-1.0..=1.0) * spec.max_rotation_deg;
    let bright = rng.random::<f64>() < spec.brightness_p;
    let factor = 1.0 + rng.random_range(-1.0..=1.0) * spec.max_brightness;

    let (mut img, mut m) = (image.clone(), mask.clone());
    if hf {
        img = hflip(&img);
        m = hflip(&m);
    }
    if vf {
        img = vflip(&img);
        m = vflip(&m);
    }
    if rot && angle != 0.0 {
        img = rotate(&img, angle);
        m = rotate(&m, angle);
    }
    if bright {
        img = scale_brightness(&img, factor);
    }
    Ok((img, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (ImageRGB, BinaryMask) {
        let img = ImageRGB::new(7, 5, (0..105).map(|v| (v * 7 % 256) as u8).collect()).unwrap();
        let mask = BinaryMask::from_fn(7, 5, |x, y| x > y);
        (img, mask)
    }

    #[test]
    fn flips_are_involutions() {
        let (img, mask) = fixture();
        assert_eq!(hflip(&hflip(&img)), img);
        assert_eq!(hflip(&hflip(&mask)), mask);
        assert_eq!(vflip(&vflip(&img)), img);
        assert_eq!(hflip(&img).get(0, 0), img.get(6, 0));
        assert_eq!(vflip(&mask).get(3, 0), mask.get(3, 4));
    }

    #[test]
    fn same_seed_same_output() {
        let (img, mask) = fixture();
        let spec = AugmentSpec {
            seed: 11,
            ..AugmentSpec::default()
        };
        assert_eq!(
            augment(&img, &mask, &spec).unwrap(),
            augment(&img, &mask, &spec).unwrap()
        );
    }

    #[test]
    fn rotation_keeps_mask_binary_and_area() {
        let mask = BinaryMask::from_fn(64, 64, |x, y| {
            let (dx, dy) = (x as f64 - 31.5, y as f64 - 31.5);
            (dx / 18.0).powi(2) + (dy / 11.0).powi(2) <= 1.0
        });
        let img = ImageRGB::filled(64, 64, [200, 50, 50]);
        let area = mask.count() as f64;
        for seed in 0..50 {
            let spec = AugmentSpec {
                rotate_p: 1.0,
                max_rotation_deg: 15.0,
                seed,
                ..AugmentSpec::identity()
            };
            let (_, m) = augment(&img, &mask, &spec).unwrap();
            assert!(m.data().iter().all(|&v| v <= 1));
            let change = (m.count() as f64 - area).abs() / area;
            assert!(change < 0.10, "seed {seed}: area change {change}");
        }
    }

    #[test]
    fn zero_rotation_is_identity() {
        let (img, mask) = fixture();
        assert_eq!(rotate(&img, 0.0), img);
        assert_eq!(rotate(&mask, 0.0), mask);
    }

    #[test]
    fn rejects_bad_spec_and_mismatched_sizes() {
        let (img, mask) = fixture();
        let bad = AugmentSpec {
            hflip_p: 1.5,
            ..AugmentSpec::default()
        };
        assert!(matches!(augment(&img, &mask, &bad), Err(Error::Config(_))));
        let steep = AugmentSpec {
            max_rotation_deg: 60.0,
            ..AugmentSpec::default()
        };
        assert!(steep.validate().is_err());
        let other = BinaryMask::empty(3, 3);
        assert!(augment(&img, &other, &AugmentSpec::default()).is_err());
    }
}
