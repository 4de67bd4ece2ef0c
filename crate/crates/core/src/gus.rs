//! Graph-embedded uncertainty suppression.
//!
//! A batch of feature vectors is turned into a cosine-similarity graph
//! `A`, self-loops are added (`Ã = A + I`), and GCN layers propagate
//! `F' = act(D̃^{-1/2} Ã D̃^{-1/2} F W)` before the final layer emits class
//! logits for every node.
//!
//! Node aggregation and degree sums use [`order_free_sum`] so that
//! permuting the batch permutes the outputs bit for bit.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::backbone::{
    check_taps,
    check_lr, relu_backward, relu_in_place, sgd_update, BackboneParams,
    BackboneState,
};
use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::label::NUM_CLASSES;
use crate::losses::ClassificationLoss;
use crate::numerics::{cosine_similarity, norm, order_free_sum, softmax, Tensor, DEGENERATE_NORM};

/// Symmetric similarity graph with a zero diagonal and entries in `[0, 1]`
/// (or `[-1, 1]` when negative similarities are kept).
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    adj: Tensor,
}

impl Graph {
    pub fn new(adj: Tensor) -> Result<Self> {
        let shape = adj.shape().to_vec();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::shape("graph", &shape, &[shape[0], shape[0]]));
        }
        let n = shape[0];
        for i in 0..n {
            if adj.at(i, i) != 0.0 {
                return Err(Error::domain("graph", format!("diagonal entry {i} is not zero")));
            }
            for j in 0..n {
                let v = adj.at(i, j);
                if !(-1.0..=1.0).contains(&v) || (v - adj.at(j, i)).abs() > 1e-12 {
                    return Err(Error::domain(
                        "graph",
                        format!("entry ({i}, {j}) breaks symmetry or range"),
                    ));
                }
            }
        }
        Ok(Graph { adj })
    }

    pub fn n(&self) -> usize {
        self.adj.rows()
    }

    pub fn adj(&self) -> &Tensor {
        &self.adj
    }
}

/// Cosine-similarity graph over the given features. Zero-norm features
/// become isolated nodes and are reported with a warning.
pub fn build_affinity(features: &[Vec<f64>], clamp_negative: bool) -> Result<Graph> {
    let n = features.len();
    if n == 0 {
        return Err(Error::domain("build_affinity", "empty feature set"));
    }
    let d = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != d) {
        return Err(Error::shape("build_affinity", &[d], &[bad.len()]));
    }
    let degenerate: Vec<bool> = features.iter().map(|f| !(norm(f) > DEGENERATE_NORM)).collect();
    for (i, _) in degenerate.iter().enumerate().filter(|(_, d)| **d) {
        log::warn!("feature {i} has zero norm; treated as an isolated node");
    }
    let mut adj = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            if degenerate[i] || degenerate[j] {
                continue;
            }
            let mut s = cosine_similarity(&features[i], &features[j])?;
            if clamp_negative && s < 0.0 {
                s = 0.0;
            }
            adj.set(i, j, s);
            adj.set(j, i, s);
        }
    }
    Ok(Graph { adj })
}

/// Which adjacency the degree matrix is summed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DegreeSource {
    /// Degrees of `A + I`.
    #[default]
    WithSelfLoops,
    /// Degrees of `A` alone; isolated nodes have zero degree and fail.
    Raw,
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` with degrees taken from `A + I`.
pub fn normalize_adjacency(g: &Graph) -> Tensor {
    normalize_adjacency_with(g, DegreeSource::WithSelfLoops)
        .expect("self-loop degrees are at least one")
}

pub fn normalize_adjacency_with(g: &Graph, source: DegreeSource) -> Result<Tensor> {
    let n = g.n();
    let mut tilde = g.adj.clone();
    for i in 0..n {
        tilde.set(i, i, 1.0);
    }
    let degree_of = match source {
        DegreeSource::WithSelfLoops => &tilde,
        DegreeSource::Raw => &g.adj,
    };
    let mut deg = Vec::with_capacity(n);
    for i in 0..n {
        let d = order_free_sum(&mut degree_of.row(i).to_vec());
        if !(d > 0.0) {
            return Err(Error::domain(
                "normalize_adjacency",
                format!("node {i} has non-positive degree {d}"),
            ));
        }
        deg.push(d);
    }
    // one rounding in the square root keeps the result exactly symmetric
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, tilde.at(i, j) / libm::sqrt(deg[i] * deg[j]));
        }
    }
    Ok(out)
}

/// `norm · x` with each output entry summed order-independently.
fn aggregate(norm_adj: &Tensor, x: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[n, d]);
    let mut terms = vec![0.0; n];
    for i in 0..n {
        for k in 0..d {
            for (j, t) in terms.iter_mut().enumerate() {
                *t = norm_adj.at(i, j) * x.at(j, k);
            }
            out.set(i, k, order_free_sum(&mut terms));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayer {
    /// `[d_in, d_out]`
    pub w: Tensor,
    pub activation: Activation,
}

impl GcnLayer {
    pub fn d_in(&self) -> usize {
        self.w.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w.cols()
    }
}

/// One propagation step over a pre-normalized adjacency.
pub fn gcn_propagate(norm_adj: &Tensor, f: &Tensor, layer: &GcnLayer) -> Result<Tensor> {
    if f.shape().len() != 2 || f.rows() != norm_adj.rows() || f.cols() != layer.d_in() {
        return Err(Error::shape(
            "gcn_forward",
            &[norm_adj.rows(), layer.d_in()],
            f.shape(),
        ));
    }
    let mut out = aggregate(norm_adj, &f.matmul(&layer.w)?);
    if layer.activation == Activation::Relu {
        relu_in_place(out.data_mut());
    }
    Ok(out)
}

/// `act(D̃^{-1/2} Ã D̃^{-1/2} F W)`.
pub fn gcn_forward(f: &Tensor, g: &Graph, layer: &GcnLayer) -> Result<Tensor> {
    if f.rows() != g.n() {
        return Err(Error::shape("gcn_forward", &[g.n()], &[f.rows()]));
    }
    gcn_propagate(&normalize_adjacency(g), f, layer)
}

/// Gradients of one layer: returns `(dW, dF)` given the layer input, its
/// activated output and the gradient at that output.
pub fn gcn_backward(
    norm_adj: &Tensor,
    f: &Tensor,
    out: &Tensor,
    layer: &GcnLayer,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if d_out.shape() != out.shape() {
        return Err(Error::shape("gcn_backward", out.shape(), d_out.shape()));
    }
    let mut dz = d_out.clone();
    if layer.activation == Activation::Relu {
        relu_backward(dz.data_mut(), out.data());
    }
    // the normalized adjacency is symmetric
    let dx = aggregate(norm_adj, &dz);
    let dw = f.transpose()?.matmul(&dx)?;
    let df = dx.matmul(&layer.w.transpose()?)?;
    Ok((dw, df))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GusConfig {
    /// Output width of each GCN layer; the last must be 6.
    pub layer_dims: Vec<usize>,
    pub clamp_negative_sim: bool,
    pub degree_source: DegreeSource,
    pub lr: f64,
    pub seed: u64,
}

impl GusConfig {
    /// Two layers: `d -> d` with ReLU, then `d -> 6`.
    pub fn with_hidden(hidden: usize) -> Self {
        GusConfig {
            layer_dims: vec![hidden, NUM_CLASSES],
            clamp_negative_sim: true,
            degree_source: DegreeSource::WithSelfLoops,
            lr: crate::backbone::GUS_LEARNING_RATE,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.is_empty() || self.layer_dims.contains(&0) {
            return Err(Error::config("gus.layers", "layer widths must be positive"));
        }
        if self.layer_dims.last() != Some(&NUM_CLASSES) {
            return Err(Error::config("gus.layers", "last layer must have width 6"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("gus.lr", "must be a finite value > 0"));
        }
        Ok(())
    }
}

/// Stack of GCN layers ending in class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct GusHead {
    pub layers: Vec<GcnLayer>,
}

/// Glorot-uniform weights, the usual choice for GCN layers.
fn glorot_init(rng: &mut crate::Rng, d_in: usize, d_out: usize) -> Tensor {
    let bound = libm::sqrt(6.0 / (d_in + d_out) as f64);
    let mut w = Tensor::zeros(&[d_in, d_out]);
    for x in w.data_mut() {
        *x = rng.random_range(-bound..=bound);
    }
    w
}

impl GusHead {
    pub fn init(d_in: usize, cfg: &GusConfig, rng: &mut crate::Rng) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.layer_dims.len());
        let mut width = d_in;
        for (i, &out) in cfg.layer_dims.iter().enumerate() {
            let activation = if i + 1 == cfg.layer_dims.len() {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(GcnLayer {
                w: glorot_init(rng, width, out),
                activation,
            });
            width = out;
        }
        Ok(GusHead { layers })
    }

    /// Checks that consecutive layers chain and end at 6 logits.
    pub fn validate(&self, d_in: usize) -> Result<()> {
        let mut width = d_in;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.d_in() != width {
                return Err(Error::shape("gus_head", &[width], &[layer.d_in()]));
            }
            let last = i + 1 == self.layers.len();
            let want = if last { Activation::Identity } else { Activation::Relu };
            if layer.activation != want {
                return Err(Error::domain("gus_head", format!("layer {i} has the wrong activation")));
            }
            width = layer.d_out();
        }
        if width != NUM_CLASSES || self.layers.is_empty() {
            return Err(Error::shape("gus_head", &[NUM_CLASSES], &[width]));
        }
        Ok(())
    }
}

/// Forward pass with every intermediate kept for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct GusForward {
    pub norm_adj: Tensor,
    /// `activations[0]` is the input, the last entry the logits.
    pub activations: Vec<Tensor>,
}

impl GusForward {
    pub fn logits(&self) -> Vec<Vec<f64>> {
        let out = self.activations.last().expect("input is always present");
        (0..out.rows()).map(|i| out.row(i).to_vec()).collect()
    }
}

pub fn gus_forward(features: &[Vec<f64>], cfg: &GusConfig, head: &GusHead) -> Result<GusForward> {
    let graph = build_affinity(features, cfg.clamp_negative_sim)?;
    let norm_adj = normalize_adjacency_with(&graph, cfg.degree_source)?;
    let mut activations = vec![Tensor::from_rows(features)?];
    for layer in &head.layers {
        let next = gcn_propagate(&norm_adj, activations.last().expect("non-empty"), layer)?;
        activations.push(next);
    }
    Ok(GusForward {
        norm_adj,
        activations,
    })
}

/// Per-node logits for a batch of features. The graph is rebuilt from the
/// batch on every call.
pub fn gus_head(features: &[Vec<f64>], cfg: &GusConfig, head: &GusHead) -> Result<Vec<Vec<f64>>> {
    Ok(gus_forward(features, cfg, head)?.logits())
}

/// Gradients of every layer weight and of the input features, given the
/// gradient at the logits. The graph is held constant.
pub fn gus_backward(fwd: &GusForward, head: &GusHead, d_logits: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
    let mut d = d_logits.clone();
    let mut dws = vec![Tensor::zeros(&[1]); head.layers.len()];
    for (l, layer) in head.layers.iter().enumerate().rev() {
        let (dw, df) = gcn_backward(
            &fwd.norm_adj,
            &fwd.activations[l],
            &fwd.activations[l + 1],
            layer,
            &d,
        )?;
        dws[l] = dw;
        d = df;
    }
    Ok((dws, d))
}

/// Backbone whose high-level features feed a GUS head.
#[derive(Debug, Clone, PartialEq)]
pub struct GusModel {
    pub backbone: BackboneState,
    pub head: GusHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GusGrads {
    pub backbone: BackboneParams,
    pub layers: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GusBatch {
    pub total: f64,
    pub grads: GusGrads,
}

impl GusModel {
    pub fn new(backbone: BackboneState, cfg: &GusConfig, rng: &mut crate::Rng) -> Result<Self> {
        let head = GusHead::init(backbone.config().high_dim, cfg, rng)?;
        Ok(GusModel { backbone, head })
    }

    /// Summed loss over the batch graph and gradients for the head and the
    /// backbone (through the high-level features).
    pub fn batch_gradients<L: ClassificationLoss + ?Sized>(
        &self,
        batch: &[LabeledSample],
        cfg: &GusConfig,
        base: &L,
    ) -> Result<GusBatch> {
        let taps = batch
            .iter()
            .map(|s| {
                let t = self.backbone.forward_sample(s)?;
                check_taps(&t, &s.id)?;
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        let features: Vec<Vec<f64>> = taps.iter().map(|t| t.high.clone()).collect();
        let fwd = gus_forward(&features, cfg, &self.head)?;
        let logits = fwd.logits();

        let mut total = 0.0;
        let mut d_logits = Tensor::zeros(&[batch.len(), NUM_CLASSES]);
        for (i, (sample, z)) in batch.iter().zip(&logits).enumerate() {
            let l = base.evaluate(z, sample.label)?;
            if !l.value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    context: format!("GUS objective for sample {}", sample.id),
                });
            }
            total += l.value;
            for (k, g) in l.grad.iter().enumerate() {
                d_logits.set(i, k, *g);
            }
        }
        let (layers, d_features) = gus_backward(&fwd, &self.head, &d_logits)?;

        let zero_logits = [0.0; NUM_CLASSES];
        let mut backbone = BackboneParams::zeros(self.backbone.config());
        for (i, sample) in batch.iter().enumerate() {
            let g = self.backbone.backward(
                sample.payload.as_slice(),
                &taps[i],
                &zero_logits,
                None,
                Some(d_features.row(i)),
            )?;
            backbone.add_assign(&g)?;
        }
        Ok(GusBatch {
            total,
            grads: GusGrads { backbone, layers },
        })
    }

    pub fn sgd_step(&self, grads: &GusGrads, lr: f64) -> Result<GusModel> {
        check_lr(lr)?;
        let backbone = self.backbone.sgd_step(&grads.backbone, lr)?;
        let mut head = self.head.clone();
        for (l, (layer, g)) in head.layers.iter_mut().zip(&grads.layers).enumerate() {
            sgd_update(&mut layer.w, g, lr, &format!("gcn_w{l}"))?;
        }
        Ok(GusModel { backbone, head })
    }

    /// High-level features used as graph nodes.
    pub fn embed(&self, batch: &[LabeledSample]) -> Result<Vec<Vec<f64>>> {
        batch
            .iter()
            .map(|s| self.backbone.forward_sample(s).map(|t| t.high))
            .collect()
    }

    /// Class scores for every sample, with the graph built over `batch`.
    pub fn predict_scores(&self, batch: &[LabeledSample], cfg: &GusConfig) -> Result<Vec<Vec<f64>>> {
        let features = self.embed(batch)?;
        gus_head(&features, cfg, &self.head)?
            .iter()
            .map(|z| softmax(z))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{affine, uniform_init, BackboneConfig};
    use crate::data::Payload;
    use crate::label::Label;
    use crate::losses::{mixed_loss, LossConfig};
    use crate::numerics::{finite_diff_grad, max_rel_error};
    use crate::rng_from_seed;

    const R: f64 = core::f64::consts::FRAC_1_SQRT_2;

    fn plain_mlp(x: &[f64], head: &GusHead) -> Vec<f64> {
        let mut v = x.to_vec();
        for layer in &head.layers {
            v = affine(&v, &layer.w, &Tensor::zeros(&[layer.d_out()]));
            if layer.activation == Activation::Relu {
                relu_in_place(&mut v);
            }
        }
        v
    }

    #[test]
    fn affinity_examples() {
        let g = build_affinity(&[vec![1.0, 2.0]], true).unwrap();
        assert_eq!(g.adj().data(), &[0.0]);
        let g = build_affinity(&[vec![0.5, 2.0], vec![0.5, 2.0]], true).unwrap();
        assert_eq!(g.adj().at(0, 0), 0.0);
        assert!((g.adj().at(0, 1) - 1.0).abs() < 1e-15);
        let g = build_affinity(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![R, R]], true).unwrap();
        assert_eq!(g.adj().at(0, 1), 0.0);
        assert!((g.adj().at(0, 2) - R).abs() < 1e-15);
        assert!((g.adj().at(1, 2) - R).abs() < 1e-15);
    }

    #[test]
    fn affinity_clamps_and_isolates() {
        let g = build_affinity(&[vec![1.0, 0.0], vec![-1.0, 0.1]], true).unwrap();
        assert_eq!(g.adj().at(0, 1), 0.0);
        let g = build_affinity(&[vec![1.0, 0.0], vec![-1.0, 0.1]], false).unwrap();
        assert!(g.adj().at(0, 1) < -0.9);
        let g = build_affinity(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.2]], true).unwrap();
        assert_eq!(g.adj().row(1), &[0.0, 0.0, 0.0]);
        assert_eq!(normalize_adjacency(&g).at(1, 1), 1.0);
    }

    #[test]
    fn affinity_scale_invariant() {
        let mut rng = rng_from_seed(2);
        let feats: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut scaled = feats.clone();
        scaled[2].iter_mut().for_each(|x| *x *= 37.5);
        let a = build_affinity(&feats, true).unwrap();
        let b = build_affinity(&scaled, true).unwrap();
        assert!(max_rel_error(a.adj().data(), b.adj().data()) < 1e-12);
    }

    #[test]
    fn normalization_examples() {
        let single = Graph::new(Tensor::zeros(&[1, 1])).unwrap();
        assert_eq!(normalize_adjacency(&single).data(), &[1.0]);
        let pair = Graph::new(Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(normalize_adjacency(&pair).data(), &[0.5; 4]);
        assert!(Graph::new(Tensor::from_rows(&[vec![0.0, 0.3], vec![0.2, 0.0]]).unwrap()).is_err());
    }

    #[test]
    fn raw_degree_switch_rejects_isolated_nodes() {
        let single = Graph::new(Tensor::zeros(&[1, 1])).unwrap();
        assert!(normalize_adjacency_with(&single, DegreeSource::Raw).is_err());
        let pair = Graph::new(Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(
            normalize_adjacency_with(&pair, DegreeSource::Raw).unwrap().data(),
            &[1.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn gcn_forward_examples() {
        let single = Graph::new(Tensor::zeros(&[1, 1])).unwrap();
        let f = Tensor::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap();
        let id = GcnLayer { w: Tensor::identity(3), activation: Activation::Identity };
        assert_eq!(gcn_forward(&f, &single, &id).unwrap(), f);

        let pair = Graph::new(Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()).unwrap();
        let f = Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![0.3, -1.2, 2.0]]).unwrap();
        assert_eq!(gcn_forward(&f, &pair, &id).unwrap(), f);

        let wrong = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(gcn_forward(&wrong, &pair, &id).is_err());
    }

    #[test]
    fn gcn_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(9);
        let feats: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let g = build_affinity(&feats, true).unwrap();
        let norm_adj = normalize_adjacency(&g);
        let f = Tensor::from_rows(&feats).unwrap();
        for activation in [Activation::Identity, Activation::Relu] {
            let layer = GcnLayer { w: uniform_init(&mut rng, 4, &[4, 3]), activation };
            let probe: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
            let loss = |f: &Tensor, l: &GcnLayer| {
                let out = gcn_propagate(&norm_adj, f, l).unwrap();
                out.data().iter().zip(&probe).map(|(a, b)| a * b * (1.0 + a)).sum::<f64>()
            };
            let out = gcn_propagate(&norm_adj, &f, &layer).unwrap();
            let d_out: Vec<f64> = out.data().iter().zip(&probe).map(|(a, b)| b * (1.0 + 2.0 * a)).collect();
            let d_out = Tensor::new(vec![5, 3], d_out).unwrap();
            let (dw, df) = gcn_backward(&norm_adj, &f, &out, &layer, &d_out).unwrap();
            let fd_w = finite_diff_grad(
                |w| loss(&f, &GcnLayer { w: w.clone(), activation }),
                &layer.w,
                1e-5,
            )
            .unwrap();
            assert!(max_rel_error(dw.data(), fd_w.data()) <= 1e-4);
            let fd_f = finite_diff_grad(|x| loss(x, &layer), &f, 1e-5).unwrap();
            assert!(max_rel_error(df.data(), fd_f.data()) <= 1e-4);
        }
    }

    fn head(d: usize, seed: u64) -> (GusConfig, GusHead) {
        let cfg = GusConfig::with_hidden(d);
        let head = GusHead::init(d, &cfg, &mut rng_from_seed(seed)).unwrap();
        (cfg, head)
    }

    #[test]
    fn single_node_reduces_to_mlp() {
        let (cfg, head) = head(4, 1);
        let x = vec![0.4, 1.1, -0.2, 0.9];
        let out = gus_head(&[x.clone()], &cfg, &head).unwrap();
        assert_eq!(out[0], plain_mlp(&x, &head));
    }

    #[test]
    fn duplicated_node_gets_identical_logits() {
        let (cfg, head) = head(4, 2);
        let mut rng = rng_from_seed(3);
        let mut feats: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..4).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        feats.push(feats[1].clone());
        let out = gus_head(&feats, &cfg, &head).unwrap();
        assert_eq!(out[1], out[4]);
    }

    #[test]
    fn orthogonal_pair_matches_per_node_mlp() {
        let (cfg, head) = head(4, 4);
        let feats = vec![vec![1.0, 0.0, 0.0, 2.0], vec![0.0, 3.0, -1.0, 0.0]];
        let out = gus_head(&feats, &cfg, &head).unwrap();
        for (o, f) in out.iter().zip(&feats) {
            assert_eq!(*o, plain_mlp(f, &head));
        }
    }

    #[test]
    fn permutation_equivariance_is_exact() {
        let (cfg, head) = head(5, 5);
        let mut rng = rng_from_seed(6);
        let feats: Vec<Vec<f64>> = (0..9)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let base = gus_head(&feats, &cfg, &head).unwrap();
        let perm = [4, 0, 8, 2, 6, 1, 7, 3, 5];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&p| feats[p].clone()).collect();
        let out = gus_head(&permuted, &cfg, &head).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            assert_eq!(out[k], base[p]);
        }
    }

    #[test]
    fn head_rejects_bad_layer_dims() {
        let mut cfg = GusConfig::with_hidden(4);
        cfg.layer_dims = vec![4, 5];
        assert!(GusHead::init(4, &cfg, &mut rng_from_seed(0)).is_err());
        let (_, h) = head(4, 0);
        assert!(h.validate(5).is_err());
        assert!(h.validate(4).is_ok());
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let backbone = BackboneState::init(BackboneConfig::for_vectors(6, 2, (2, 2), 5, 3)).unwrap();
        let cfg = GusConfig::with_hidden(5);
        let model = GusModel::new(backbone, &cfg, &mut rng_from_seed(4)).unwrap();
        let mut rng = rng_from_seed(5);
        let batch: Vec<LabeledSample> = (0..5)
            .map(|k| {
                let x = (0..6).map(|_| rng.random_range(-1.0..2.0)).collect();
                LabeledSample::new(alloc::format!("g{k}"), Payload::Vector(x), Label::ALL[k])
            })
            .collect();
        let loss_cfg = LossConfig::default();
        let analytic = model.batch_gradients(&batch, &cfg, &loss_cfg).unwrap();

        // graph held fixed at the unperturbed features
        let fixed = build_affinity(&model.embed(&batch).unwrap(), true).unwrap();
        let fixed_norm = normalize_adjacency(&fixed);
        let total = |m: &GusModel| {
            let mut x = Tensor::from_rows(&m.embed(&batch).unwrap()).unwrap();
            for layer in &m.head.layers {
                x = gcn_propagate(&fixed_norm, &x, layer).unwrap();
            }
            (0..batch.len())
                .map(|i| mixed_loss(x.row(i), batch[i].label, &loss_cfg).unwrap())
                .sum::<f64>()
        };
        assert!((total(&model) - analytic.total).abs() < 1e-12);
        for l in 0..model.head.layers.len() {
            let fd = finite_diff_grad(
                |w| {
                    let mut m = model.clone();
                    m.head.layers[l].w = w.clone();
                    total(&m)
                },
                &model.head.layers[l].w,
                1e-5,
            )
            .unwrap();
            assert!(max_rel_error(analytic.grads.layers[l].data(), fd.data()) <= 1e-4);
        }
        for idx in [0usize, 2] {
            let base = model.backbone.params().tensors()[idx].1.clone();
            let fd = finite_diff_grad(
                |t| {
                    let mut m = model.clone();
                    *m.backbone.params_mut().tensors_mut()[idx].1 = t.clone();
                    total(&m)
                },
                &base,
                1e-5,
            )
            .unwrap();
            let err = max_rel_error(analytic.grads.backbone.tensors()[idx].1.data(), fd.data());
            assert!(err <= 1e-4, "{err}");
        }
    }
}
