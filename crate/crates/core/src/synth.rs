//! Synthetic wound images: reddish ellipse unions on a skin-toned
//! background, with texture noise, small skin-coloured holes inside the
//! wound and small wound-coloured specks outside it.
//!
//! Holes and specks only change the image, never the mask, and both are
//! sized below the default post-processing limits.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imaging::{encode_gray, encode_image, BinaryMask, ImageRGB};
use crate::postprocess::{clean_mask, PostprocessConfig};
use crate::{derive_seed, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub image_size: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    /// Ellipse semi-axes as fractions of the image size.
    pub min_axis: f64,
    pub max_axis: f64,
    pub wound_rgb: [f64; 3],
    pub skin_rgb: [f64; 3],
    /// Per-image shift of each base colour channel, uniform in `±jitter`.
    pub color_jitter: f64,
    /// Per-pixel noise, uniform in `±noise`.
    pub noise: f64,
    pub hole_p: f64,
    pub speck_p: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            image_size: 64,
            min_blobs: 1,
            max_blobs: 3,
            min_axis: 0.12,
            max_axis: 0.28,
            wound_rgb: [190.0, 55.0, 60.0],
            skin_rgb: [150.0, 115.0, 95.0],
            color_jitter: 10.0,
            noise: 10.0,
            hole_p: 0.3,
            speck_p: 0.3,
            seed: 0,
        }
    }
}

/// Share of a sample's pixels the mask must cover.
pub const FOREGROUND_RANGE: (f64, f64) = (0.02, 0.5);

const SPLIT_SALT: u64 = 0x7a11_d5e7_5eed_0001;
const HOLE: [(i64, i64); 5] = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)];
const SPECK: [(i64, i64); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 32 {
            return bad(format!("synth image_size must be at least 32, got {}", self.image_size));
        }
        if self.min_blobs == 0 || self.min_blobs > self.max_blobs {
            return bad(format!(
                "synth blob range {}..={} is empty",
                self.min_blobs, self.max_blobs
            ));
        }
        if !(self.min_axis > 0.0 && self.min_axis < self.max_axis && self.max_axis <= 0.4) {
            return bad(format!(
                "synth axis range {}..{} must satisfy 0 < min < max <= 0.4",
                self.min_axis, self.max_axis
            ));
        }
        for (name, p) in [("hole_p", self.hole_p), ("speck_p", self.speck_p)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("synth {name} = {p} is not a probability"));
            }
        }
        if !(self.noise >= 0.0 && self.color_jitter >= 0.0) {
            return bad("synth noise and color_jitter must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

fn random_ellipse(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Ellipse {
    let s = spec.image_size as f64;
    let a = rng.random_range(spec.min_axis..spec.max_axis) * s;
    let b = rng.random_range(spec.min_axis..spec.max_axis) * s;
    let (sin, cos) = rng.random_range(0.0..std::f64::consts::PI).sin_cos();
    // Half-extents of the rotated ellipse; one pixel of margin to the edge.
    let ex = (a * a * cos * cos + b * b * sin * sin).sqrt() + 1.0;
    let ey = (a * a * sin * sin + b * b * cos * cos).sqrt() + 1.0;
    Ellipse {
        cx: rng.random_range(ex..s - 1.0 - ex),
        cy: rng.random_range(ey..s - 1.0 - ey),
        a,
        b,
        cos,
        sin,
    }
}

fn jittered(base: [f64; 3], jitter: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    base.map(|c| c + rng.random_range(-1.0..=1.0) * jitter)
}

fn at(mask: &BinaryMask, x: i64, y: i64) -> Option<bool> {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    (x >= 0 && y >= 0 && x < w && y < h).then(|| mask.get(x as usize, y as usize))
}

/// All pixels within Chebyshev distance `r` of `(x, y)` exist and equal
/// `value`.
fn surrounded(mask: &BinaryMask, x: i64, y: i64, r: i64, value: bool) -> bool {
    (-r..=r).all(|dy| (-r..=r).all(|dx| at(mask, x + dx, y + dy) == Some(value)))
}

/// One image/mask pair, a pure function of `(spec.seed, index)`.
pub fn generate_sample(spec: &SynthSpec, index: u64) -> Result<(ImageRGB, BinaryMask)> {
    spec.validate()?;
    let n = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, index));
    let post = PostprocessConfig::default();
    let mut mask = BinaryMask::empty(n, n);
    for _ in 0..1000 {
        let blobs: Vec<Ellipse> = (0..rng.random_range(spec.min_blobs..=spec.max_blobs))
            .map(|_| random_ellipse(spec, &mut rng))
            .collect();
        mask = BinaryMask::from_fn(n, n, |x, y| blobs.iter().any(|e| e.contains(x as f64, y as f64)));
        let frac = mask.count() as f64 / (n * n) as f64;
        // Overlapping ellipses can enclose a background pocket; such masks
        // are redrawn so the true mask is a fixpoint of post-processing.
        if (FOREGROUND_RANGE.0..=FOREGROUND_RANGE.1).contains(&frac) && clean_mask(&mask, &post) == mask {
            break;
        }
    }
    let wound = jittered(spec.wound_rgb, spec.color_jitter, &mut rng);
    let skin = jittered(spec.skin_rgb, spec.color_jitter, &mut rng);
    let mut paint: Vec<bool> = mask.data().iter().map(|&v| v != 0).collect();

    let hole_limit = post.hole_fraction * mask.count() as f64;
    if rng.random_bool(spec.hole_p) && (HOLE.len() as f64) < hole_limit {
        let inner: Vec<(i64, i64)> = (0..n as i64)
            .flat_map(|y| (0..n as i64).map(move |x| (x, y)))
            .filter(|&(x, y)| surrounded(&mask, x, y, 3, true))
            .collect();
        if !inner.is_empty() {
            let (x, y) = inner[rng.random_range(0..inner.len())];
            for (dx, dy) in HOLE {
                paint[((y + dy) as usize) * n + (x + dx) as usize] = false;
            }
        }
    }
    if rng.random_bool(spec.speck_p) {
        let outer: Vec<(i64, i64)> = (0..n as i64)
            .flat_map(|y| (0..n as i64).map(move |x| (x, y)))
            .filter(|&(x, y)| surrounded(&mask, x, y, 4, false))
            .collect();
        for _ in 0..rng.random_range(1..=2usize) {
            if outer.is_empty() {
                break;
            }
            let (x, y) = outer[rng.random_range(0..outer.len())];
            for (dx, dy) in SPECK {
                paint[((y + dy) as usize) * n + (x + dx) as usize] = true;
            }
        }
    }

    let mut pixels = Vec::with_capacity(n * n * 3);
    for &p in &paint {
        let base = if p { wound } else { skin };
        for c in base {
            let v = c + rng.random_range(-1.0..=1.0) * spec.noise;
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok((ImageRGB::new(n, n, pixels)?, mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    /// Stable hash split, about one in five samples to validation. The
    /// assignment of an index never depends on how many samples exist.
    pub fn of(seed: u64, index: u64) -> Split {
        if derive_seed(seed ^ SPLIT_SALT, index).is_multiple_of(5) {
            Split::Val
        } else {
            Split::Train
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub image: String,
    pub mask: String,
    pub split: String,
}

/// Writes `images/NNNN.png`, `masks/NNNN.png` and `manifest.csv`
/// (`image,mask,split`) under `out_dir`.
pub fn generate_dataset(spec: &SynthSpec, n: usize, out_dir: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    spec.validate()?;
    let out = out_dir.as_ref();
    for sub in ["images", "masks"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let (image, mask) = generate_sample(spec, i as u64)?;
        let name = format!("{i:04}.png");
        encode_image(&image, out.join("images").join(&name))?;
        encode_gray(&mask.to_gray(), out.join("masks").join(&name))?;
        rows.push(ManifestRow {
            image: format!("images/{name}"),
            mask: format!("masks/{name}"),
            split: Split::of(spec.seed, i as u64).as_str().to_string(),
        });
    }
    write_manifest(&out.join("manifest.csv"), &rows)?;
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let io = |e: csv::Error| Error::Internal(format!("writing {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["image", "mask", "split"]).map_err(io)?;
    for r in rows {
        w.write_record([&r.image, &r.mask, &r.split]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = r
        .headers()
        .map_err(|e| Error::arg(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::arg(format!("{} lacks a '{name}' column", path.display())))
    };
    let (ci, cm, cs) = (col("image")?, col("mask")?, col("split")?);
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::arg(format!("{} row {}: {e}", path.display(), i + 1)))?;
        let get = |c: usize| {
            rec.get(c)
                .map(str::to_string)
                .ok_or_else(|| Error::arg(format!("{} row {} is short", path.display(), i + 1)))
        };
        rows.push(ManifestRow {
            image: get(ci)?,
            mask: get(cm)?,
            split: get(cs)?,
        });
    }
    Ok(rows)
}
