//! Labeled samples, class-balancing oversampling, image augmentation and the
//! seeded Gaussian toy-dataset generator.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicBool, Ordering};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::label::{Label, NUM_CLASSES};
use crate::numerics::{psd_cholesky, Tensor};

/// Row-major `height x width x channels` image with real intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height * width * channels == 0 || height * width * channels != data.len() {
            return Err(Error::shape("image", &[height, width, channels], &[data.len()]));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
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

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Vector(Vec<f64>),
    Image(Image),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::Vector(v) => v.len(),
            Payload::Image(img) => img.data.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat view used as backbone input.
    pub fn as_slice(&self) -> &[f64] {
        match self {
            Payload::Vector(v) => v,
            Payload::Image(img) => &img.data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub payload: Payload,
    pub label: Label,
}

impl LabeledSample {
    pub fn new(id: impl Into<String>, payload: Payload, label: Label) -> Self {
        LabeledSample {
            id: id.into(),
            payload,
            label,
        }
    }
}

pub fn class_counts(dataset: &[LabeledSample]) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for s in dataset {
        counts[s.label.index()] += 1;
    }
    counts
}

/// Duplicates samples of every minority class (drawn with replacement) up to
/// the majority-class count, then shuffles.
pub fn oversample(dataset: &[LabeledSample], rng: &mut crate::Rng) -> Result<Vec<LabeledSample>> {
    let mut by_class: BTreeMap<Label, Vec<&LabeledSample>> = BTreeMap::new();
    for s in dataset {
        by_class.entry(s.label).or_default().push(s);
    }
    let missing: Vec<&str> = Label::ALL
        .iter()
        .filter(|l| !by_class.contains_key(l))
        .map(|l| l.code())
        .collect();
    if !missing.is_empty() {
        return Err(Error::config(
            "train.oversample",
            format!("classes without samples: {}", missing.join(",")),
        ));
    }
    let target = by_class.values().map(Vec::len).max().unwrap_or(0);
    let mut out: Vec<LabeledSample> = dataset.to_vec();
    for members in by_class.values() {
        for _ in members.len()..target {
            let pick = members[rng.random_range(0..members.len())];
            out.push(pick.clone());
        }
    }
    out.shuffle(rng);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub crop_prob: f64,
    /// Side length of the crop relative to the image, in `(0, 1]`.
    pub crop_ratio: f64,
    pub blur_prob: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            crop_prob: 0.5,
            crop_ratio: 0.875,
            blur_prob: 0.3,
            blur_sigma_min: 0.1,
            blur_sigma_max: 1.5,
        }
    }
}

impl AugmentConfig {
    /// All transforms disabled.
    pub fn disabled() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            crop_prob: 0.0,
            blur_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, p) in [
            ("augment.flip_prob", self.flip_prob),
            ("augment.crop_prob", self.crop_prob),
            ("augment.blur_prob", self.blur_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(key, "probability must lie in [0, 1]"));
            }
        }
        if !(self.crop_ratio > 0.0 && self.crop_ratio <= 1.0) {
            return Err(Error::config("augment.crop_ratio", "must lie in (0, 1]"));
        }
        if !(self.blur_sigma_min >= 0.0 && self.blur_sigma_max >= self.blur_sigma_min) {
            return Err(Error::config(
                "augment.blur_sigma_max",
                "sigma range must satisfy 0 <= min <= max",
            ));
        }
        Ok(())
    }
}

static VECTOR_AUGMENT_LOGGED: AtomicBool = AtomicBool::new(false);

/// Random flip, crop-and-resize and Gaussian blur, each applied with its
/// configured probability. Vector payloads pass through unchanged.
pub fn augment(sample: &LabeledSample, rng: &mut crate::Rng, cfg: &AugmentConfig) -> LabeledSample {
    let img = match &sample.payload {
        Payload::Image(img) => img,
        Payload::Vector(_) => {
            if !VECTOR_AUGMENT_LOGGED.swap(true, Ordering::Relaxed) {
                log::info!("augmentation skipped: vector payloads have no spatial layout");
            }
            return sample.clone();
        }
    };
    let mut out = img.clone();
    if rng.random_bool(cfg.flip_prob) {
        out = flip_horizontal(&out);
    }
    if rng.random_bool(cfg.crop_prob) {
        let ch = (libm::round(out.height as f64 * cfg.crop_ratio) as usize).clamp(1, out.height);
        let cw = (libm::round(out.width as f64 * cfg.crop_ratio) as usize).clamp(1, out.width);
        let top = rng.random_range(0..=out.height - ch);
        let left = rng.random_range(0..=out.width - cw);
        out = crop_resize(&out, top, left, ch, cw);
    }
    if rng.random_bool(cfg.blur_prob) {
        let sigma = if cfg.blur_sigma_max > cfg.blur_sigma_min {
            rng.random_range(cfg.blur_sigma_min..cfg.blur_sigma_max)
        } else {
            cfg.blur_sigma_min
        };
        out = gaussian_blur(&out, sigma);
    }
    LabeledSample {
        id: sample.id.clone(),
        payload: Payload::Image(out),
        label: sample.label,
    }
}

pub fn flip_horizontal(img: &Image) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                out.set(y, x, c, img.get(y, img.width - 1 - x, c));
            }
        }
    }
    out
}

/// Crops the `crop_h x crop_w` window at `(top, left)` and resizes it back
/// to the original size with bilinear interpolation.
pub fn crop_resize(img: &Image, top: usize, left: usize, crop_h: usize, crop_w: usize) -> Image {
    let mut window = Image {
        height: crop_h,
        width: crop_w,
        channels: img.channels,
        data: vec![0.0; crop_h * crop_w * img.channels],
    };
    for y in 0..crop_h {
        for x in 0..crop_w {
            for c in 0..img.channels {
                window.set(y, x, c, img.get(top + y, left + x, c));
            }
        }
    }
    resize_bilinear(&window, img.height, img.width)
}

/// Bilinear resize with pixel-center alignment and edge clamping.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Image {
    let mut out = Image {
        height,
        width,
        channels: img.channels,
        data: vec![0.0; height * width * img.channels],
    };
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    for y in 0..height {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = libm::floor(fy) as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let ty = fy - y0 as f64;
        for x in 0..width {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = libm::floor(fx) as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let tx = fx - x0 as f64;
            for c in 0..img.channels {
                let top = img.get(y0, x0, c) * (1.0 - tx) + img.get(y0, x1, c) * tx;
                let bottom = img.get(y1, x0, c) * (1.0 - tx) + img.get(y1, x1, c) * tx;
                out.set(y, x, c, top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    out
}

/// Separable Gaussian blur with replicated borders. Sigmas below `1e-3`
/// return the image unchanged.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if !(sigma >= 1e-3) {
        return img.clone();
    }
    let radius = libm::ceil(3.0 * sigma) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| libm::exp(-((k * k) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let pass = |src: &Image, horizontal: bool| {
        let mut dst = src.clone();
        for y in 0..src.height {
            for x in 0..src.width {
                for c in 0..src.channels {
                    let mut acc = 0.0;
                    for (i, k) in kernel.iter().enumerate() {
                        let off = i as isize - radius;
                        let (yy, xx) = if horizontal {
                            (y, (x as isize + off).clamp(0, src.width as isize - 1) as usize)
                        } else {
                            ((y as isize + off).clamp(0, src.height as isize - 1) as usize, x)
                        };
                        acc += k * src.get(yy, xx, c);
                    }
                    dst.set(y, x, c, acc);
                }
            }
        }
        dst
    };
    pass(&pass(img, true), false)
}

/// Gaussian generating distribution of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    pub mean: Vec<f64>,
    pub cov: Tensor,
}

/// Isotropic class specs with means `s * e_k` placed so that every pair of
/// class means is `separation * sigma` apart.
pub fn isotropic_specs(dim: usize, separation: f64, sigma: f64) -> Result<Vec<ClassSpec>> {
    if dim < NUM_CLASSES {
        return Err(Error::config(
            "synthetic.dim",
            format!("must be at least {NUM_CLASSES}"),
        ));
    }
    if !(sigma >= 0.0) || !(separation >= 0.0) {
        return Err(Error::config("synthetic.sigma", "sigma and separation must be >= 0"));
    }
    let offset = separation * sigma / core::f64::consts::SQRT_2;
    let mut cov = Tensor::zeros(&[dim, dim]);
    for i in 0..dim {
        cov.set(i, i, sigma * sigma);
    }
    Ok((0..NUM_CLASSES)
        .map(|k| {
            let mut mean = vec![0.0; dim];
            mean[k] = offset;
            ClassSpec {
                mean,
                cov: cov.clone(),
            }
        })
        .collect())
}

/// Draws `n_per_class` samples from each class spec, shuffles them, and
/// assigns ids `{prefix}{index:05}` in output order.
pub fn gen_synthetic(
    specs: &[ClassSpec],
    n_per_class: usize,
    rng: &mut crate::Rng,
    prefix: &str,
) -> Result<Vec<LabeledSample>> {
    if specs.len() != NUM_CLASSES {
        return Err(Error::config(
            "synthetic",
            format!("expected {NUM_CLASSES} class specs, got {}", specs.len()),
        ));
    }
    if n_per_class == 0 {
        return Err(Error::config("synthetic.n_per_class", "must be at least 1"));
    }
    let mut factors = Vec::with_capacity(NUM_CLASSES);
    for (k, spec) in specs.iter().enumerate() {
        let d = spec.mean.len();
        if spec.cov.shape() != [d, d] {
            return Err(Error::shape("gen_synthetic", &[d, d], spec.cov.shape()));
        }
        let l = psd_cholesky(&spec.cov).map_err(|_| {
            Error::config(
                "synthetic",
                format!("covariance of class {} is not positive semidefinite", Label::ALL[k]),
            )
        })?;
        factors.push(l);
    }
    let mut samples = Vec::with_capacity(n_per_class * NUM_CLASSES);
    for (k, (spec, l)) in specs.iter().zip(&factors).enumerate() {
        let d = spec.mean.len();
        for _ in 0..n_per_class {
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let x = (0..d)
                .map(|i| spec.mean[i] + (0..=i).map(|j| l.at(i, j) * z[j]).sum::<f64>())
                .collect();
            samples.push(LabeledSample::new(String::new(), Payload::Vector(x), Label::ALL[k]));
        }
    }
    samples.shuffle(rng);
    for (i, s) in samples.iter_mut().enumerate() {
        s.id = format!("{prefix}{i:05}");
    }
    Ok(samples)
}

/// Sample ids in dataset order.
pub fn ids(dataset: &[LabeledSample]) -> Vec<String> {
    dataset.iter().map(|s| s.id.to_string()).collect()
}
