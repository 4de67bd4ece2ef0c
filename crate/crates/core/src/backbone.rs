//! Miniature trainable network with a mid-level feature-map tap and a
//! high-level feature-vector tap.
//!
//! Layer order: `input -> affine + ReLU -> mid map (C x H x W)
//! -> affine + ReLU -> high vector -> affine -> logits`. Parameters use the
//! row-vector convention `y = x W + b` with `W` shaped `[fan_in, fan_out]`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::data::{LabeledSample, Payload};
use crate::error::{Error, Result};
use crate::label::NUM_CLASSES;
use crate::numerics::Tensor;
use crate::rng_from_seed;

/// Default learning rate of the MRE sub-network.
pub const MRE_LEARNING_RATE: f64 = 1e-3;
/// Default learning rate of the GUS sub-network.
pub const GUS_LEARNING_RATE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    Vector { dim: usize },
    /// Row-major `height x width x channels` patch.
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
}

impl InputKind {
    pub fn input_len(&self) -> usize {
        match *self {
            InputKind::Vector { dim } => dim,
            InputKind::Image {
                height,
                width,
                channels,
            } => height * width * channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub input: InputKind,
    pub mid_channels: usize,
    pub mid_height: usize,
    pub mid_width: usize,
    pub high_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl BackboneConfig {
    /// Vector-input configuration with the given tap sizes.
    pub fn for_vectors(
        dim: usize,
        mid_channels: usize,
        mid_spatial: (usize, usize),
        high_dim: usize,
        seed: u64,
    ) -> Self {
        BackboneConfig {
            input: InputKind::Vector { dim },
            mid_channels,
            mid_height: mid_spatial.0,
            mid_width: mid_spatial.1,
            high_dim,
            num_classes: NUM_CLASSES,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.input_len() == 0 {
            return Err(Error::config("backbone.input", "input size must be positive"));
        }
        for (key, v) in [
            ("backbone.mid_channels", self.mid_channels),
            ("backbone.mid_height", self.mid_height),
            ("backbone.mid_width", self.mid_width),
            ("backbone.high_dim", self.high_dim),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.num_classes != NUM_CLASSES {
            return Err(Error::config("backbone.num_classes", "must be 6"));
        }
        Ok(())
    }

    pub fn mid_len(&self) -> usize {
        self.mid_channels * self.mid_height * self.mid_width
    }
}

/// Channel-major `C x H x W` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels * height * width != data.len() || channels == 0 || height * width == 0 {
            return Err(Error::shape(
                "feature_map",
                &[channels, height, width],
                &[data.len()],
            ));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn index(&self, c: usize, h: usize, w: usize) -> usize {
        (c * self.height + h) * self.width + w
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(c, h, w)]
    }

    pub fn set(&mut self, c: usize, h: usize, w: usize, value: f64) {
        let i = self.index(c, h, w);
        self.data[i] = value;
    }
}

/// Global average pooling: per-channel spatial mean.
pub fn gap(mid: &FeatureMap) -> Vec<f64> {
    let area = mid.height * mid.width;
    mid.data
        .chunks_exact(area)
        .map(|ch| ch.iter().sum::<f64>() / area as f64)
        .collect()
}

/// Backward of [`gap`]: spreads each channel gradient evenly over its cells.
pub fn gap_backward(grad: &[f64], channels: usize, height: usize, width: usize) -> Vec<f64> {
    let area = height * width;
    let mut out = Vec::with_capacity(channels * area);
    for g in grad.iter().take(channels) {
        out.extend(core::iter::repeat_n(g / area as f64, area));
    }
    out
}

/// `x W + b` with `W` shaped `[x.len(), out]`.
pub(crate) fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let cols = w.cols();
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        if *xi == 0.0 {
            continue;
        }
        let row = w.row(i);
        for (o, wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    for (o, bj) in out.iter_mut().zip(b.data()) {
        *o += bj;
    }
    out
}

/// Accumulates the gradients of `y = x W + b` given `dy`, returning `dx`.
pub(crate) fn affine_backward(
    x: &[f64],
    w: &Tensor,
    dy: &[f64],
    dw: &mut Tensor,
    db: &mut Tensor,
) -> Vec<f64> {
    let cols = w.cols();
    let dwd = dw.data_mut();
    for (i, xi) in x.iter().enumerate() {
        if *xi == 0.0 {
            continue;
        }
        for (j, g) in dy.iter().enumerate() {
            dwd[i * cols + j] += xi * g;
        }
    }
    for (b, g) in db.data_mut().iter_mut().zip(dy) {
        *b += g;
    }
    (0..x.len())
        .map(|i| w.row(i).iter().zip(dy).map(|(a, b)| a * b).sum())
        .collect()
}

pub(crate) fn uniform_init(rng: &mut crate::Rng, fan_in: usize, shape: &[usize]) -> Tensor {
    let bound = 1.0 / libm::sqrt(fan_in as f64);
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        *x = rng.random_range(-bound..=bound);
    }
    t
}

/// Applies `p <- p - lr * g` after checking the gradient is finite.
pub(crate) fn sgd_update(param: &mut Tensor, grad: &Tensor, lr: f64, name: &str) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape("sgd_step", param.shape(), grad.shape()));
    }
    if !grad.is_finite() {
        return Err(Error::NonFiniteGradient { param: name.into() });
    }
    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
    Ok(())
}

pub(crate) fn check_lr(lr: f64) -> Result<()> {
    if lr.is_finite() && lr >= 0.0 {
        Ok(())
    } else {
        Err(Error::domain("sgd_step", format!("invalid learning rate {lr}")))
    }
}

/// Weights and biases of the three affine layers. Also used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

impl BackboneParams {
    pub const NAMES: [&'static str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];

    pub fn zeros(cfg: &BackboneConfig) -> Self {
        let (i, m, h, c) = (
            cfg.input.input_len(),
            cfg.mid_len(),
            cfg.high_dim,
            cfg.num_classes,
        );
        BackboneParams {
            w1: Tensor::zeros(&[i, m]),
            b1: Tensor::zeros(&[m]),
            w2: Tensor::zeros(&[m, h]),
            b2: Tensor::zeros(&[h]),
            w3: Tensor::zeros(&[h, c]),
            b3: Tensor::zeros(&[c]),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("w3", &self.w3),
            ("b3", &self.b3),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 6] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("w3", &mut self.w3),
            ("b3", &mut self.b3),
        ]
    }

    pub fn add_assign(&mut self, other: &BackboneParams) -> Result<()> {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }
}

/// Intermediate representations produced by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTaps {
    /// Mid-level map, post-ReLU.
    pub mid: FeatureMap,
    /// High-level vector, post-ReLU.
    pub high: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneState {
    config: BackboneConfig,
    params: BackboneParams,
    step: u64,
}

impl BackboneState {
    /// Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
    pub fn init(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(config.seed);
        let (i, m, h, c) = (
            config.input.input_len(),
            config.mid_len(),
            config.high_dim,
            config.num_classes,
        );
        let params = BackboneParams {
            w1: uniform_init(&mut rng, i, &[i, m]),
            b1: uniform_init(&mut rng, i, &[m]),
            w2: uniform_init(&mut rng, m, &[m, h]),
            b2: uniform_init(&mut rng, m, &[h]),
            w3: uniform_init(&mut rng, h, &[h, c]),
            b3: uniform_init(&mut rng, h, &[c]),
        };
        Ok(BackboneState {
            config,
            params,
            step: 0,
        })
    }

    /// Rebuilds a state from stored parameters, checking every shape.
    pub fn from_parts(config: BackboneConfig, params: BackboneParams, step: u64) -> Result<Self> {
        config.validate()?;
        let expected = BackboneParams::zeros(&config);
        for ((name, want), (_, got)) in expected.tensors().into_iter().zip(params.tensors()) {
            if want.shape() != got.shape() {
                return Err(Error::shape(name_op(name), want.shape(), got.shape()));
            }
            if !got.is_finite() {
                return Err(Error::domain(
                    "backbone_params",
                    format!("parameter `{name}` is not finite"),
                ));
            }
        }
        Ok(BackboneState {
            config,
            params,
            step,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &BackboneParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BackboneParams {
        &mut self.params
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Forward pass over a flat input vector.
    pub fn forward(&self, input: &[f64]) -> Result<ForwardTaps> {
        let want = self.config.input.input_len();
        if input.len() != want {
            return Err(Error::shape("backbone_forward", &[want], &[input.len()]));
        }
        let p = &self.params;
        let mut mid = affine(input, &p.w1, &p.b1);
        relu_in_place(&mut mid);
        let mut high = affine(&mid, &p.w2, &p.b2);
        relu_in_place(&mut high);
        let logits = affine(&high, &p.w3, &p.b3);
        let mid = FeatureMap::new(
            self.config.mid_channels,
            self.config.mid_height,
            self.config.mid_width,
            mid,
        )?;
        Ok(ForwardTaps { mid, high, logits })
    }

    /// Forward pass over a labeled sample whose payload must match the
    /// configured input kind.
    pub fn forward_sample(&self, sample: &LabeledSample) -> Result<ForwardTaps> {
        match (&sample.payload, self.config.input) {
            (Payload::Vector(v), InputKind::Vector { .. }) => self.forward(v),
            (
                Payload::Image(img),
                InputKind::Image {
                    height,
                    width,
                    channels,
                },
            ) => {
                if img.dims() != (height, width, channels) {
                    return Err(Error::shape(
                        "backbone_forward",
                        &[height, width, channels],
                        &[img.height(), img.width(), img.channels()],
                    ));
                }
                self.forward(img.data())
            }
            (payload, _) => Err(Error::shape(
                "backbone_forward",
                &[self.config.input.input_len()],
                &[payload.len()],
            )),
        }
    }

    /// Gradients of a scalar loss given its gradient with respect to the
    /// logits and optional extra gradients arriving at the mid and high taps
    /// (from the MRE branch or a GCN head).
    pub fn backward(
        &self,
        input: &[f64],
        taps: &ForwardTaps,
        d_logits: &[f64],
        d_mid: Option<&[f64]>,
        d_high: Option<&[f64]>,
    ) -> Result<BackboneParams> {
        let cfg = &self.config;
        if d_logits.len() != cfg.num_classes {
            return Err(Error::shape("backbone_backward", &[cfg.num_classes], &[d_logits.len()]));
        }
        let p = &self.params;
        let mut g = BackboneParams::zeros(cfg);

        let mut dh = affine_backward(&taps.high, &p.w3, d_logits, &mut g.w3, &mut g.b3);
        if let Some(extra) = d_high {
            if extra.len() != dh.len() {
                return Err(Error::shape("backbone_backward", &[dh.len()], &[extra.len()]));
            }
            dh.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
        }
        relu_backward(&mut dh, &taps.high);

        let mut dm = affine_backward(taps.mid.data(), &p.w2, &dh, &mut g.w2, &mut g.b2);
        if let Some(extra) = d_mid {
            if extra.len() != dm.len() {
                return Err(Error::shape("backbone_backward", &[dm.len()], &[extra.len()]));
            }
            dm.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
        }
        relu_backward(&mut dm, taps.mid.data());

        affine_backward(input, &p.w1, &dm, &mut g.w1, &mut g.b1);
        Ok(g)
    }

    /// One plain SGD step; returns the updated state.
    pub fn sgd_step(&self, grads: &BackboneParams, lr: f64) -> Result<BackboneState> {
        self.sgd_step_multi(&[(grads, lr)])
    }

    /// One SGD step combining several gradients taken at the current
    /// parameters, each with its own learning rate.
    pub fn sgd_step_multi(&self, updates: &[(&BackboneParams, f64)]) -> Result<BackboneState> {
        let mut next = self.clone();
        for (grads, lr) in updates {
            check_lr(*lr)?;
            for ((name, p), (_, g)) in next.params.tensors_mut().into_iter().zip(grads.tensors()) {
                sgd_update(p, g, *lr, name)?;
            }
        }
        next.step += 1;
        Ok(next)
    }
}

fn name_op(name: &str) -> &'static str {
    BackboneParams::NAMES
        .iter()
        .find(|n| **n == name)
        .copied()
        .unwrap_or("backbone")
}

/// Fails with a numeric error when a training forward pass overflowed.
pub(crate) fn check_taps(taps: &ForwardTaps, id: &str) -> Result<()> {
    let finite = taps.mid.data().iter().chain(&taps.high).chain(&taps.logits).all(|x| x.is_finite());
    if finite {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            context: format!("forward pass for sample {id}"),
        })
    }
}

pub(crate) fn relu_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| {
        if *x < 0.0 {
            *x = 0.0
        }
    });
}

/// Zeroes gradient entries whose post-ReLU activation is not positive.
pub(crate) fn relu_backward(grad: &mut [f64], activated: &[f64]) {
    grad.iter_mut()
        .zip(activated)
        .for_each(|(g, a)| {
            if *a <= 0.0 {
                *g = 0.0
            }
        });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::Label;
    use crate::losses::{cross_entropy, cross_entropy_with_grad};
    use crate::numerics::{finite_diff_grad, max_rel_error, softmax};

    fn tiny() -> BackboneConfig {
        BackboneConfig::for_vectors(8, 4, (2, 2), 8, 42)
    }

    #[test]
    fn zero_input_zero_weights_gives_uniform_softmax() {
        let cfg = tiny();
        let state = BackboneState::from_parts(cfg.clone(), BackboneParams::zeros(&cfg), 0).unwrap();
        let taps = state.forward(&[0.0; 8]).unwrap();
        let p = softmax(&taps.logits).unwrap();
        assert!(p.iter().all(|x| (x - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn forward_is_deterministic_for_a_seed() {
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let a = BackboneState::init(tiny()).unwrap().forward(&x).unwrap();
        let b = BackboneState::init(tiny()).unwrap().forward(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn perturbing_mid_layer_weight_leaves_earlier_activations() {
        let x: Vec<f64> = (0..8).map(|i| 0.5 + i as f64 * 0.1).collect();
        let state = BackboneState::init(tiny()).unwrap();
        let before = state.forward(&x).unwrap();
        // pick a w2 row feeding from an active mid unit
        let active = before.mid.data().iter().position(|v| *v > 0.0).unwrap();
        let mut bumped = state.clone();
        let cols = bumped.params.w2.cols();
        for j in 0..cols {
            bumped.params.w2.data_mut()[active * cols + j] += 0.5;
        }
        let after = bumped.forward(&x).unwrap();
        assert_eq!(before.mid, after.mid);
        assert_ne!(before.high, after.high);
        assert_ne!(before.logits, after.logits);

        // first-layer change moves the mid tap
        let mut first = state.clone();
        first.params.b1.data_mut()[active] += 0.5;
        assert_ne!(first.forward(&x).unwrap().mid, before.mid);
    }

    #[test]
    fn forward_rejects_wrong_payload() {
        let state = BackboneState::init(tiny()).unwrap();
        assert!(matches!(state.forward(&[0.0; 7]), Err(Error::Shape { .. })));
        let s = LabeledSample::new("x", Payload::Vector(vec![0.0; 3]), Label::Anger);
        assert!(state.forward_sample(&s).is_err());
    }

    #[test]
    fn gap_examples() {
        assert_eq!(gap(&FeatureMap::filled(3, 2, 5, 1.5)), vec![1.5; 3]);
        let one = FeatureMap::new(3, 1, 1, vec![1.0, -2.0, 7.0]).unwrap();
        assert_eq!(gap(&one), vec![1.0, -2.0, 7.0]);
        let m = FeatureMap::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(gap(&m), vec![2.5]);
    }

    #[test]
    fn sgd_step_examples() {
        let cfg = tiny();
        let mut params = BackboneParams::zeros(&cfg);
        for (_, t) in params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 1.0);
        }
        let state = BackboneState::from_parts(cfg.clone(), params.clone(), 0).unwrap();
        let unchanged = state.sgd_step(&params, 0.0).unwrap();
        assert_eq!(unchanged.params, state.params);
        assert_eq!(unchanged.step(), 1);

        let stepped = state.sgd_step(&params, 0.001).unwrap();
        assert!(stepped.params.w1.data().iter().all(|w| *w == 1.0 - 0.001));

        let two = state
            .sgd_step(&params, 0.0005)
            .unwrap()
            .sgd_step(&params, 0.0005)
            .unwrap();
        for ((_, a), (_, b)) in two.params.tensors().into_iter().zip(stepped.params.tensors()) {
            assert!(max_rel_error(a.data(), b.data()) < 1e-15);
        }

        let mut bad = params.clone();
        bad.b2.data_mut()[0] = f64::NAN;
        assert_eq!(
            state.sgd_step(&bad, 0.1),
            Err(Error::NonFiniteGradient { param: "b2".into() })
        );
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = tiny();
        let state = BackboneState::init(cfg.clone()).unwrap();
        let x: Vec<f64> = (0..8).map(|i| libm::sin(i as f64 + 0.3) * 2.0).collect();
        let label = Label::Sadness;
        let probe: Vec<f64> = (0..4).map(|c| 0.3 * c as f64 - 0.4).collect();

        // loss = CE(logits) + probe . gap(mid)
        let loss = |s: &BackboneState| {
            let t = s.forward(&x).unwrap();
            cross_entropy(&t.logits, label).unwrap()
                + gap(&t.mid).iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
        };
        let taps = state.forward(&x).unwrap();
        let d_logits = cross_entropy_with_grad(&taps.logits, label).unwrap().grad;
        let d_mid = gap_backward(&probe, 4, 2, 2);
        let grads = state.backward(&x, &taps, &d_logits, Some(&d_mid), None).unwrap();

        for (idx, name) in BackboneParams::NAMES.iter().enumerate() {
            let base = state.params.tensors()[idx].1.clone();
            let fd = finite_diff_grad(
                |t| {
                    let mut s = state.clone();
                    *s.params.tensors_mut()[idx].1 = t.clone();
                    loss(&s)
                },
                &base,
                1e-5,
            )
            .unwrap();
            let err = max_rel_error(grads.tensors()[idx].1.data(), fd.data());
            assert!(err <= 1e-4, "{name}: {err}");
        }
    }
}
