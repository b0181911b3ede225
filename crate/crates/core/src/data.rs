//! Saliency samples: folder loading, a synthetic shape generator,
//! flip/crop augmentation and batching.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

/// An RGB image in `[0, 1]` with its binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencySample {
    /// `[3, H, W]`
    pub image: Tensor,
    /// `[1, H, W]`, values exactly 0 or 1.
    pub mask: Tensor,
}

impl SaliencySample {
    pub fn new(image: Tensor, mask: Tensor) -> Result<Self> {
        let s = SaliencySample { image, mask };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let (is, ms) = (self.image.shape(), self.mask.shape());
        if is.len() != 3 || is[0] != 3 || ms.len() != 3 || ms[0] != 1 || is[1..] != ms[1..] {
            return Err(config_err!("image {:?} and mask {:?} do not pair up", is, ms));
        }
        if self.mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(config_err!("mask is not binary"));
        }
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(config_err!("image values outside [0, 1]"));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.sum() / self.mask.numel() as f64
    }
}

/// Samples found in a pair of folders plus the stems that had no partner.
#[derive(Clone, Debug, Default)]
pub struct LoadedFolder {
    pub samples: Vec<SaliencySample>,
    pub names: Vec<String>,
    pub skipped: Vec<String>,
}

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "ppm", "pgm", "pnm", "pbm"];

fn list_by_stem(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    let d = t.data_mut();
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            d[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Ok(t)
}

/// Grey levels at or above half intensity become foreground.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .pixels()
        .map(|p| if p[0] as f64 / 255.0 >= 0.5 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![1, h, w], data)
}

/// Pairs images and masks by file stem, in lexicographic stem order.
pub fn load_folder(images: impl AsRef<Path>, masks: impl AsRef<Path>) -> Result<LoadedFolder> {
    let imgs = list_by_stem(images.as_ref())?;
    let msks = list_by_stem(masks.as_ref())?;
    let mut out = LoadedFolder::default();
    for (stem, ip) in &imgs {
        let Some(mp) = msks.get(stem) else {
            out.skipped.push(stem.clone());
            continue;
        };
        let image = load_image(ip)?;
        let mask = load_mask(mp)?;
        if image.shape()[1..] != mask.shape()[1..] {
            return Err(Error::Format(format!(
                "{stem}: image {:?} and mask {:?} differ in size",
                &image.shape()[1..],
                &mask.shape()[1..]
            )));
        }
        out.samples.push(SaliencySample { image, mask });
        out.names.push(stem.clone());
    }
    out.skipped
        .extend(msks.keys().filter(|s| !imgs.contains_key(*s)).cloned());
    out.skipped.sort();
    Ok(out)
}

/// Writes a sample as `<stem>.png` image and mask files.
pub fn save_sample(sample: &SaliencySample, images: &Path, masks: &Path, stem: &str) -> Result<()> {
    let (h, w) = (sample.height(), sample.width());
    let to_u8 = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| to_u8(sample.image.data()[(c * h + y as usize) * w + x as usize]);
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(images.join(format!("{stem}.png")))?;
    let m = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_u8(sample.mask.data()[y as usize * w + x as usize])])
    });
    m.save(masks.join(format!("{stem}.png")))?;
    Ok(())
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Rect { cx: f64, cy: f64, hw: f64, hh: f64, angle: f64 },
    Triangle([(f64, f64); 3]),
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Shape {
        let cx = rng.gen_range(0.2..0.8) * size;
        let cy = rng.gen_range(0.2..0.8) * size;
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        match rng.gen_range(0..3) {
            0 => Shape::Ellipse {
                cx,
                cy,
                rx: rng.gen_range(0.08..0.3) * size,
                ry: rng.gen_range(0.08..0.3) * size,
                angle,
            },
            1 => Shape::Rect {
                cx,
                cy,
                hw: rng.gen_range(0.07..0.25) * size,
                hh: rng.gen_range(0.07..0.25) * size,
                angle,
            },
            _ => {
                let r = rng.gen_range(0.12..0.35) * size;
                let mut pts = [(0.0, 0.0); 3];
                for (i, p) in pts.iter_mut().enumerate() {
                    let a = angle + i as f64 * 2.0 * std::f64::consts::PI / 3.0 + rng.gen_range(-0.4..0.4);
                    *p = (cx + r * a.cos(), cy + r * a.sin());
                }
                Shape::Triangle(pts)
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (dx, dy) = (x - cx, y - cy);
                let (s, c) = angle.sin_cos();
                let u = (dx * c + dy * s) / rx;
                let v = (-dx * s + dy * c) / ry;
                u * u + v * v <= 1.0
            }
            Shape::Rect { cx, cy, hw, hh, angle } => {
                let (dx, dy) = (x - cx, y - cy);
                let (s, c) = angle.sin_cos();
                (dx * c + dy * s).abs() <= hw && (-dx * s + dy * c).abs() <= hh
            }
            Shape::Triangle(p) => {
                let cross = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let d = [cross(p[0], p[1]), cross(p[1], p[2]), cross(p[2], p[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

const SUPERSAMPLE: usize = 4;

fn synth_one(rng: &mut ChaCha8Rng, size: usize) -> SaliencySample {
    loop {
        let bg = random_color(rng);
        let bg2 = random_color(rng);
        let (fx, fy, phase) = (
            rng.gen_range(0.05..0.4),
            rng.gen_range(0.05..0.4),
            rng.gen_range(0.0..6.3),
        );
        let n_shapes = rng.gen_range(1..=3);
        let mut shapes = Vec::new();
        let mut colors = Vec::new();
        for _ in 0..n_shapes {
            shapes.push(Shape::random(rng, size as f64));
            let mut col = random_color(rng);
            while color_distance(col, bg) < 0.6 || color_distance(col, bg2) < 0.4 {
                col = random_color(rng);
            }
            colors.push(col);
        }
        let mut image = Tensor::zeros(&[3, size, size]);
        let mut mask = Tensor::zeros(&[1, size, size]);
        let plane = size * size;
        let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        for y in 0..size {
            for x in 0..size {
                let t = 0.5 + 0.5 * ((x as f64 * fx + phase).sin() * (y as f64 * fy).cos());
                let noise: f64 = rng.gen_range(-0.04..0.04);
                let mut px = [0.0; 3];
                for c in 0..3 {
                    px[c] = (bg[c] * (1.0 - 0.35 * t) + bg2[c] * 0.35 * t + noise).clamp(0.0, 1.0);
                }
                let mut coverage = 0.0;
                let mut tint = [0.0; 3];
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let xs = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                        let ys = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                        // the last listed shape is on top
                        if let Some(i) = (0..shapes.len()).rev().find(|&i| shapes[i].contains(xs, ys)) {
                            coverage += inv;
                            for c in 0..3 {
                                tint[c] += inv * colors[i][c];
                            }
                        }
                    }
                }
                for c in 0..3 {
                    image.data_mut()[c * plane + y * size + x] = px[c] * (1.0 - coverage) + tint[c];
                }
                mask.data_mut()[y * size + x] = if coverage >= 0.5 { 1.0 } else { 0.0 };
            }
        }
        let s = SaliencySample { image, mask };
        let f = s.foreground_fraction();
        if f > 0.02 && f < 0.6 {
            return s;
        }
    }
}

/// `n` images of 1 to 3 anti-aliased shapes on a textured background.
pub fn synth_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<SaliencySample>> {
    if n == 0 || size < 32 {
        return Err(config_err!("synthetic data needs n >= 1 and size >= 32"));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            synth_one(&mut rng, size)
        })
        .collect())
}

/// A concrete flip/crop transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentParams {
    pub flip: bool,
    /// `(top, left, height, width)` of the crop window.
    pub crop: (usize, usize, usize, usize),
}

impl AugmentParams {
    pub fn identity(h: usize, w: usize) -> Self {
        AugmentParams {
            flip: false,
            crop: (0, 0, h, w),
        }
    }

    pub fn random(h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let ch = ((h as f64 * rng.gen_range(0.8..=1.0)).round() as usize).clamp(1, h);
        let cw = ((w as f64 * rng.gen_range(0.8..=1.0)).round() as usize).clamp(1, w);
        AugmentParams {
            flip: rng.gen_bool(0.5),
            crop: (rng.gen_range(0..=h - ch), rng.gen_range(0..=w - cw), ch, cw),
        }
    }
}

/// Bilinear resize of a `[C, H, W]` tensor (align-corners off).
pub fn resize_bilinear(t: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if (h, w) == (oh, ow) {
        return t.clone();
    }
    let src = |o: usize, n: usize, on: usize| -> (usize, usize, f64) {
        let f = ((o as f64 + 0.5) * n as f64 / on as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = f.floor() as usize;
        (i0, (i0 + 1).min(n - 1), f - i0 as f64)
    };
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for y in 0..oh {
        let (y0, y1, fy) = src(y, h, oh);
        for x in 0..ow {
            let (x0, x1, fx) = src(x, w, ow);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| t.data()[(ch * h + yy) * w + xx];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.data_mut()[(ch * oh + y) * ow + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn crop_flip(t: &Tensor, p: &AugmentParams) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let (top, left, ch, cw) = p.crop;
    let mut out = Tensor::zeros(&[c, ch, cw]);
    for k in 0..c {
        for y in 0..ch {
            for x in 0..cw {
                let sx = if p.flip { left + cw - 1 - x } else { left + x };
                out.data_mut()[(k * ch + y) * cw + x] = t.data()[(k * h + top + y) * w + sx];
            }
        }
    }
    out
}

/// Applies a transform to image and mask alike, then re-binarises the mask.
pub fn augment_with(sample: &SaliencySample, p: &AugmentParams) -> SaliencySample {
    let (h, w) = (sample.height(), sample.width());
    let image = resize_bilinear(&crop_flip(&sample.image, p), h, w).map(|v| v.clamp(0.0, 1.0));
    let mask = resize_bilinear(&crop_flip(&sample.mask, p), h, w).map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    SaliencySample { image, mask }
}

/// Random horizontal flip (p = 0.5) and a random crop of 80-100% per side.
pub fn augment(sample: &SaliencySample, seed: u64) -> SaliencySample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = AugmentParams::random(sample.height(), sample.width(), &mut rng);
    augment_with(sample, &p)
}

/// Stacks samples of equal size into `[N, 3, H, W]` images and `[N, 1, H, W]` masks.
pub fn make_batch(samples: &[&SaliencySample]) -> Result<(Tensor, Tensor)> {
    let first = samples
        .first()
        .ok_or_else(|| config_err!("empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut img = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut msk = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(config_err!("batch mixes image sizes"));
        }
        img.extend_from_slice(s.image.data());
        msk.extend_from_slice(s.mask.data());
    }
    Ok((
        Tensor::new(vec![samples.len(), 3, h, w], img)?,
        Tensor::new(vec![samples.len(), 1, h, w], msk)?,
    ))
}
