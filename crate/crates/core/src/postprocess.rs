//! Threshold, hole filling and small-region removal on predicted masks.

use crate::imaging::{probability_image, threshold_mask, BinaryMask, GrayImage, DEFAULT_THRESHOLD};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    /// The complementary connectivity used for the background.
    pub fn dual(self) -> Self {
        match self {
            Connectivity::Four => Connectivity::Eight,
            Connectivity::Eight => Connectivity::Four,
        }
    }
}

impl TryFrom<u32> for Connectivity {
    type Error = Error;

    fn try_from(n: u32) -> Result<Self> {
        match n {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            _ => Err(Error::Config(format!("connectivity must be 4 or 8, got {n}"))),
        }
    }
}

impl std::fmt::Display for Connectivity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Connectivity::Four => "4",
            Connectivity::Eight => "8",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostprocessConfig {
    pub threshold: u8,
    /// Foreground connectivity; holes use the dual.
    pub connectivity: Connectivity,
    /// Enclosed background regions smaller than this fraction of the
    /// foreground are filled.
    pub hole_fraction: f64,
    /// Foreground regions smaller than this fraction of the foreground are
    /// removed.
    pub noise_fraction: f64,
    /// Foreground regions below this many pixels are always removed.
    pub min_absolute: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            threshold: DEFAULT_THRESHOLD,
            connectivity: Connectivity::Eight,
            hole_fraction: 0.10,
            noise_fraction: 0.05,
            min_absolute: 16,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("hole_fraction", self.hole_fraction),
            ("noise_fraction", self.noise_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// Component labels, 0 for pixels outside every component and `1..=K`
/// otherwise, numbered in raster order of each component's first pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    /// `sizes[k - 1]` is the pixel count of label `k`.
    pub sizes: Vec<usize>,
}

impl LabelMap {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Whether label `k` has a pixel on the image border.
    pub fn touches_border(&self) -> Vec<bool> {
        let mut out = vec![false; self.sizes.len()];
        let (w, h) = (self.width, self.height);
        let mut mark = |i: usize| {
            let l = self.labels[i];
            if l > 0 {
                out[l as usize - 1] = true;
            }
        };
        for x in 0..w {
            mark(x);
            mark((h - 1) * w + x);
        }
        for y in 0..h {
            mark(y * w);
            mark(y * w + w - 1);
        }
        out
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        // Keep the smaller provisional label as root.
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Two-pass labelling of the pixels where `data[i] == value`.
fn label_value(width: usize, height: usize, data: &[u8], value: u8, conn: Connectivity) -> LabelMap {
    let mut labels = vec![0u32; data.len()];
    let mut parent: Vec<u32> = vec![0];
    let on = |i: usize| data[i] == value;
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !on(i) {
                continue;
            }
            let mut neighbours = [0u32; 4];
            let mut n = 0;
            let mut push = |j: usize| {
                if labels[j] != 0 {
                    neighbours[n] = labels[j];
                    n += 1;
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if y > 0 {
                push(i - width);
                if conn == Connectivity::Eight {
                    if x > 0 {
                        push(i - width - 1);
                    }
                    if x + 1 < width {
                        push(i - width + 1);
                    }
                }
            }
            if n == 0 {
                let l = parent.len() as u32;
                parent.push(l);
                labels[i] = l;
                continue;
            }
            let first = neighbours[0];
            for &other in &neighbours[1..n] {
                union(&mut parent, first, other);
            }
            labels[i] = first;
        }
    }
    // Roots become dense labels in order of their first raster pixel, which
    // is also the order of the root's provisional label.
    let mut dense = vec![0u32; parent.len()];
    let mut sizes = Vec::new();
    for l in 1..parent.len() as u32 {
        if find(&mut parent, l) == l {
            sizes.push(0);
            dense[l as usize] = sizes.len() as u32;
        }
    }
    for v in labels.iter_mut().filter(|v| **v != 0) {
        *v = dense[find(&mut parent, *v) as usize];
        sizes[*v as usize - 1] += 1;
    }
    LabelMap {
        width,
        height,
        labels,
        sizes,
    }
}

/// Connected components of the foreground.
pub fn label_components(mask: &BinaryMask, conn: Connectivity) -> LabelMap {
    label_value(mask.width(), mask.height(), mask.data(), 1, conn)
}

/// Fills background regions that do not touch the border and are smaller
/// than `hole_fraction` of the foreground. Background connectivity is the
/// dual of the foreground's.
pub fn fill_holes(mask: &BinaryMask, config: &PostprocessConfig) -> BinaryMask {
    let fg = mask.count();
    if fg == 0 {
        return mask.clone();
    }
    let holes = label_value(mask.width(), mask.height(), mask.data(), 0, config.connectivity.dual());
    let limit = config.hole_fraction * fg as f64;
    let border = holes.touches_border();
    let fill: Vec<bool> = holes
        .sizes
        .iter()
        .zip(&border)
        .map(|(&s, &b)| !b && (s as f64) < limit)
        .collect();
    let data = mask
        .data()
        .iter()
        .zip(&holes.labels)
        .map(|(&v, &l)| if l > 0 && fill[l as usize - 1] { 1 } else { v })
        .collect();
    BinaryMask::new(mask.width(), mask.height(), data).expect("binary by construction")
}

/// Clears foreground regions smaller than
/// `max(noise_fraction · foreground, min_absolute)`.
pub fn remove_small_regions(mask: &BinaryMask, config: &PostprocessConfig) -> BinaryMask {
    let fg = mask.count();
    let limit = (config.noise_fraction * fg as f64).max(config.min_absolute as f64);
    let comps = label_components(mask, config.connectivity);
    let keep: Vec<bool> = comps.sizes.iter().map(|&s| s as f64 >= limit).collect();
    let data = comps
        .labels
        .iter()
        .map(|&l| (l > 0 && keep[l as usize - 1]) as u8)
        .collect();
    BinaryMask::new(mask.width(), mask.height(), data).expect("binary by construction")
}

/// Hole filling then small-region removal on an already thresholded mask.
pub fn clean_mask(mask: &BinaryMask, config: &PostprocessConfig) -> BinaryMask {
    remove_small_regions(&fill_holes(mask, config), config)
}

/// Thresholds an 8-bit probability rendering, then cleans it.
pub fn postprocess_gray(gray: &GrayImage, config: &PostprocessConfig) -> Result<BinaryMask> {
    config.validate()?;
    Ok(clean_mask(&threshold_mask(gray, config.threshold), config))
}

/// Full chain on a `1×1×H×W` probability map.
pub fn postprocess(probs: &Tensor, config: &PostprocessConfig) -> Result<BinaryMask> {
    let (n, c, _, _) = probs.dims4()?;
    if n != 1 || c != 1 {
        return Err(Error::dim(format!(
            "postprocess expects a single 1x1xHxW map, got {:?}",
            probs.shape()
        )));
    }
    postprocess_gray(&probability_image(probs, 0)?, config)
}
