//! Classifier trained against fixed class centroids.
//!
//! Layout: feature layers -> `f_m` -> (optional BN + ReLU) -> FC1 -> `f_n`
//! -> cosine to every centroid. The loss is
//! `L_AM + mse_weight * L_MSE + k * L_lin_ind`, all gradients hand-derived.

mod checkpoint;
pub mod layers;
pub mod loss;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use train::{lr_at_epoch, train, EpochStats, TrainOutcome, TrainReport};

use crate::centroids::CentroidSet;
use crate::data::Shape;
use crate::error::{Error, Result};
use layers::{Batch, BatchNorm, Cache, Conv3x3, Dense, Layer, NormCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Dense(usize),
    Conv3x3(usize),
    MaxPool2,
    Flatten,
}

/// Parses `dense(64), conv3x3(8), maxpool2, flatten` style lists.
pub fn parse_architecture(spec: &str) -> Result<Vec<LayerSpec>> {
    let mut out = Vec::new();
    for raw in spec.split(',') {
        let item = raw.trim();
        if item.is_empty() {
            continue;
        }
        let bad = || Error::InvalidConfig(format!("cannot parse layer `{item}`"));
        let sized = |prefix: &str| -> Result<Option<usize>> {
            match item.strip_prefix(prefix) {
                Some(rest) => {
                    let inner = rest.trim().strip_prefix('(').and_then(|r| r.strip_suffix(')')).ok_or_else(bad)?;
                    let v: usize = inner.trim().parse().map_err(|_| bad())?;
                    if v == 0 {
                        return Err(bad());
                    }
                    Ok(Some(v))
                }
                None => Ok(None),
            }
        };
        let layer = if let Some(w) = sized("dense")? {
            LayerSpec::Dense(w)
        } else if let Some(c) = sized("conv3x3")? {
            LayerSpec::Conv3x3(c)
        } else if item == "maxpool2" {
            LayerSpec::MaxPool2
        } else if item == "flatten" {
            LayerSpec::Flatten
        } else {
            return Err(bad());
        };
        out.push(layer);
    }
    Ok(out)
}

fn default_arch() -> String {
    "dense(64),dense(32)".into()
}
fn default_input_shape() -> Vec<usize> {
    vec![2]
}
fn default_pedcc_dim() -> usize {
    3
}
fn default_true() -> bool {
    true
}
fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    128
}
fn default_lr() -> f64 {
    0.1
}
fn default_decay() -> f64 {
    0.1
}
fn default_decay_fractions() -> Vec<f64> {
    vec![0.3, 0.6]
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_checkpoint_fraction() -> f64 {
    0.7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "default_arch")]
    pub architecture: String,
    #[serde(default = "default_input_shape")]
    pub input_shape: Vec<usize>,
    /// Expected `f_m` length; checked against the architecture when set.
    #[serde(default)]
    pub conv_feature_dim: Option<usize>,
    #[serde(default = "default_pedcc_dim")]
    pub pedcc_dim: usize,
    #[serde(default)]
    pub final_bn_relu: bool,
    #[serde(default = "default_true")]
    pub fc1_bias: bool,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_decay_fractions")]
    pub decay_fractions: Vec<f64>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_checkpoint_fraction")]
    pub checkpoint_fraction: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            architecture: default_arch(),
            input_shape: default_input_shape(),
            conv_feature_dim: None,
            pedcc_dim: default_pedcc_dim(),
            final_bn_relu: false,
            fc1_bias: true,
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            lr_decay: default_decay(),
            decay_fractions: default_decay_fractions(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            seed: 0,
            checkpoint_fraction: default_checkpoint_fraction(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.pedcc_dim == 0 {
            return bad("pedcc_dim must be >= 1".into());
        }
        if self.decay_fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return bad(format!("decay fractions {:?} must lie in (0, 1)", self.decay_fractions));
        }
        if !(self.checkpoint_fraction > 0.0 && self.checkpoint_fraction <= 1.0) {
            return bad(format!("checkpoint_fraction {} must lie in (0, 1]", self.checkpoint_fraction));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.lr_decay <= 0.0 {
            return bad("momentum must be in [0, 1), weight_decay >= 0, lr_decay > 0".into());
        }
        Shape::from_dims(&self.input_shape).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        parse_architecture(&self.architecture)?;
        Ok(())
    }
}

fn default_scale() -> f64 {
    5.5
}
fn default_margin() -> f64 {
    0.35
}
fn default_k() -> f64 {
    1.0
}
fn default_mse_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_k")]
    pub lin_ind_weight: f64,
    #[serde(default = "default_mse_weight")]
    pub mse_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            scale: default_scale(),
            margin: default_margin(),
            lin_ind_weight: default_k(),
            mse_weight: default_mse_weight(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidConfig(format!("loss scale must be > 0, got {}", self.scale)));
        }
        if self.margin < 0.0 || self.lin_ind_weight < 0.0 || self.mse_weight < 0.0 {
            return Err(Error::InvalidConfig("margin, lin_ind_weight and mse_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Output of a forward pass over `n` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkOutput {
    pub n: usize,
    /// `n x m`, the direct input of FC1.
    pub f_m: Vec<f64>,
    /// `n x pedcc_dim`.
    pub f_n: Vec<f64>,
    /// `n x c`.
    pub cos_theta: Vec<f64>,
    pub degenerate: Vec<bool>,
}

/// Per-batch loss values.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub am: f64,
    pub mse: f64,
    pub lin_ind: f64,
    pub correct: usize,
}

/// Parameter gradients in [`NetworkModel::params_mut`] order.
#[derive(Debug, Clone)]
pub struct Gradients(pub Vec<Vec<f64>>);

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    config: NetworkConfig,
    input_shape: Shape,
    layers: Vec<Layer>,
    feature_dim: usize,
    /// `m x n` row-major; column `j` is the weight vector `w_j`.
    fc1_weight: Vec<f64>,
    fc1_bias: Option<Vec<f64>>,
    centroids: CentroidSet,
}

impl NetworkModel {
    /// Builds a freshly initialised model.
    pub fn new(config: NetworkConfig, centroids: CentroidSet) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (layers, input_shape, feature_dim) = build_layers(&config, &mut rng)?;
        let n = config.pedcc_dim;
        check_dims(&config, feature_dim, &centroids)?;
        let fc_std = Normal::new(0.0, (1.0 / feature_dim as f64).sqrt()).unwrap();
        let fc1_weight = (0..feature_dim * n).map(|_| fc_std.sample(&mut rng)).collect();
        let fc1_bias = config.fc1_bias.then(|| vec![0.0; n]);
        Ok(NetworkModel {
            config,
            input_shape,
            layers,
            feature_dim,
            fc1_weight,
            fc1_bias,
            centroids,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    /// Length `m` of `f_m`.
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn pedcc_dim(&self) -> usize {
        self.config.pedcc_dim
    }

    pub fn centroids(&self) -> &CentroidSet {
        &self.centroids
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn fc1_weight(&self) -> &[f64] {
        &self.fc1_weight
    }

    pub fn fc1_bias(&self) -> Option<&[f64]> {
        self.fc1_bias.as_deref()
    }

    pub fn set_fc1(&mut self, weight: Vec<f64>, bias: Option<Vec<f64>>) -> Result<()> {
        if weight.len() != self.feature_dim * self.pedcc_dim()
            || bias.as_ref().map(|b| b.len()) != self.fc1_bias.as_ref().map(|b| b.len())
        {
            return Err(Error::ShapeMismatch("FC1 replacement has the wrong shape".into()));
        }
        self.fc1_weight = weight;
        self.fc1_bias = bias;
        Ok(())
    }

    /// Trainable parameters: every layer's tensors, then FC1 weight and bias.
    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = self.layers.iter_mut().flat_map(|l| l.params_mut()).collect();
        out.push(&mut self.fc1_weight);
        if let Some(b) = self.fc1_bias.as_mut() {
            out.push(b);
        }
        out
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        let mut out: Vec<&Vec<f64>> = self.layers.iter().flat_map(|l| l.params()).collect();
        out.push(&self.fc1_weight);
        if let Some(b) = self.fc1_bias.as_ref() {
            out.push(b);
        }
        out
    }

    fn features(&self, x: &Batch, train: bool) -> Result<(Batch, Vec<Cache>)> {
        if x.shape != self.input_shape {
            return Err(Error::ShapeMismatch(format!(
                "model expects inputs of shape {:?}, got {:?}",
                self.input_shape, x.shape
            )));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (next, cache) = layer.forward(&cur, train)?;
            caches.push(cache);
            cur = next;
        }
        Ok((cur, caches))
    }

    fn project(&self, f_m: &[f64], n_samples: usize) -> Vec<f64> {
        let (m, n) = (self.feature_dim, self.pedcc_dim());
        let mut f_n = Vec::with_capacity(n_samples * n);
        for s in 0..n_samples {
            let mut out = self.fc1_bias.clone().unwrap_or_else(|| vec![0.0; n]);
            for (i, &v) in f_m[s * m..(s + 1) * m].iter().enumerate() {
                let row = &self.fc1_weight[i * n..(i + 1) * n];
                for (o, w) in out.iter_mut().zip(row) {
                    *o += v * w;
                }
            }
            f_n.extend_from_slice(&out);
        }
        f_n
    }

    /// Inference forward pass (batch norm uses running statistics).
    pub fn forward(&self, x: &Batch) -> Result<NetworkOutput> {
        self.forward_mode(x, false)
    }

    pub fn forward_mode(&self, x: &Batch, train: bool) -> Result<NetworkOutput> {
        let (f_m, _) = self.features(x, train)?;
        let f_n = self.project(&f_m.data, x.n);
        let (cos_theta, degenerate) = loss::cosine_head(&f_n, &self.centroids);
        Ok(NetworkOutput {
            n: x.n,
            f_m: f_m.data,
            f_n,
            cos_theta,
            degenerate,
        })
    }

    /// Evaluates the full loss and every parameter gradient.
    ///
    /// Returns the batch-norm caches so a training step can fold their
    /// statistics into the running averages.
    pub fn loss_and_gradients(
        &self,
        x: &Batch,
        labels: &[usize],
        cfg: &LossConfig,
        train: bool,
    ) -> Result<(LossBreakdown, Gradients, Vec<NormCache>)> {
        let (f_m, caches) = self.features(x, train)?;
        let n_samples = x.n;
        let (m, n) = (self.feature_dim, self.pedcc_dim());
        let c = self.centroids.class_count();
        let f_n = self.project(&f_m.data, n_samples);
        let (cos, _) = loss::cosine_head(&f_n, &self.centroids);

        let (am, g_cos) = loss::loss_am(&cos, labels, c, cfg.scale, cfg.margin)?;
        let mut g_fn = loss::cosine_head_backward(&f_n, &cos, &g_cos, &self.centroids);
        let mut mse = 0.0;
        if cfg.mse_weight != 0.0 {
            let (value, g) = loss::loss_mse(&f_n, labels, &self.centroids)?;
            mse = value;
            crate::linalg::axpy(cfg.mse_weight, &g, &mut g_fn);
        }
        let mut lin_ind = 0.0;
        let mut g_w = vec![0.0; m * n];
        if cfg.lin_ind_weight != 0.0 {
            let (value, g) = loss::loss_lin_ind(&self.fc1_weight, m, n)?;
            lin_ind = value;
            crate::linalg::axpy(cfg.lin_ind_weight, &g, &mut g_w);
        }

        // FC1: f_n = W^T f_m + b.
        let mut g_b = vec![0.0; n];
        let mut g_fm = vec![0.0; n_samples * m];
        for s in 0..n_samples {
            let gf = &g_fn[s * n..(s + 1) * n];
            let fm = &f_m.data[s * m..(s + 1) * m];
            for (gb, g) in g_b.iter_mut().zip(gf) {
                *gb += g;
            }
            for i in 0..m {
                let row = &self.fc1_weight[i * n..(i + 1) * n];
                g_fm[s * m + i] = row.iter().zip(gf).map(|(w, g)| w * g).sum();
                let grow = &mut g_w[i * n..(i + 1) * n];
                for (gw, g) in grow.iter_mut().zip(gf) {
                    *gw += fm[i] * g;
                }
            }
        }

        let mut grad = Batch {
            n: n_samples,
            shape: f_m.shape,
            data: g_fm,
        };
        let mut layer_grads: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.layers.len());
        let mut norm_caches = Vec::new();
        for (layer, cache) in self.layers.iter().zip(&caches).rev() {
            let (g_in, g_params) = layer.backward(cache, &grad);
            layer_grads.push(g_params);
            grad = g_in;
        }
        for cache in caches {
            if let Cache::Norm(nc) = cache {
                norm_caches.push(nc);
            }
        }
        layer_grads.reverse();
        let mut all: Vec<Vec<f64>> = layer_grads.into_iter().flatten().collect();
        all.push(g_w);
        if self.fc1_bias.is_some() {
            all.push(g_b);
        }

        let correct = (0..n_samples)
            .filter(|&s| argmax(&cos[s * c..(s + 1) * c]) == labels[s])
            .count();
        let total = am + cfg.mse_weight * mse + cfg.lin_ind_weight * lin_ind;
        Ok((
            LossBreakdown {
                total,
                am,
                mse,
                lin_ind,
                correct,
            },
            Gradients(all),
            norm_caches,
        ))
    }

    pub(crate) fn update_running_stats(&mut self, caches: &[NormCache]) {
        let mut it = caches.iter();
        for layer in &mut self.layers {
            if let Layer::BatchNorm(bn) = layer {
                if let Some(nc) = it.next() {
                    bn.update_running(nc);
                }
            }
        }
    }

    pub fn predict(&self, x: &Batch) -> Result<Vec<usize>> {
        let out = self.forward(x)?;
        let c = self.centroids.class_count();
        Ok((0..out.n).map(|s| argmax(&out.cos_theta[s * c..(s + 1) * c])).collect())
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn check_dims(config: &NetworkConfig, feature_dim: usize, centroids: &CentroidSet) -> Result<()> {
    let n = config.pedcc_dim;
    if centroids.feature_dim() != n {
        return Err(Error::ArchitectureMismatch(format!(
            "pedcc_dim is {n} but centroids live in {} dimensions",
            centroids.feature_dim()
        )));
    }
    if let Some(m) = config.conv_feature_dim {
        if m != feature_dim {
            return Err(Error::InvalidConfig(format!(
                "conv_feature_dim {m} does not match the architecture's output of {feature_dim}"
            )));
        }
    }
    if feature_dim <= n {
        return Err(Error::InvalidConfig(format!(
            "feature dimension m = {feature_dim} must exceed pedcc_dim n = {n}"
        )));
    }
    if n + 1 < centroids.class_count() {
        return Err(Error::InvalidConfig(format!(
            "pedcc_dim {n} must be at least class_count - 1 = {}",
            centroids.class_count() - 1
        )));
    }
    Ok(())
}

/// Instantiates the feature layers. Every dense/conv layer but the last is
/// followed by ReLU; the last one's raw output (after any pooling or
/// flattening) is `f_m`, optionally passed through BN + ReLU.
fn build_layers(config: &NetworkConfig, rng: &mut ChaCha8Rng) -> Result<(Vec<Layer>, Shape, usize)> {
    let specs = parse_architecture(&config.architecture)?;
    let input_shape = Shape::from_dims(&config.input_shape)?;
    let last_param = specs
        .iter()
        .rposition(|s| matches!(s, LayerSpec::Dense(_) | LayerSpec::Conv3x3(_)));
    let mut shape = input_shape;
    let mut layers = Vec::new();
    let arch_err = |msg: String| Error::InvalidConfig(format!("architecture `{}`: {msg}", config.architecture));
    for (idx, spec) in specs.iter().enumerate() {
        let layer = match (*spec, shape) {
            (LayerSpec::Dense(w), Shape::Flat(d)) => Layer::Dense(Dense::init(rng, d, w)),
            (LayerSpec::Dense(_), _) => return Err(arch_err("dense layer needs flat input; add `flatten`".into())),
            (LayerSpec::Conv3x3(c), Shape::Image(ch, _, _)) => Layer::Conv(Conv3x3::init(rng, ch, c)),
            (LayerSpec::Conv3x3(_), _) => return Err(arch_err("conv3x3 needs image input".into())),
            (LayerSpec::MaxPool2, Shape::Image(_, h, w)) if h >= 2 && w >= 2 => Layer::MaxPool2,
            (LayerSpec::MaxPool2, _) => return Err(arch_err("maxpool2 needs an image of at least 2x2".into())),
            (LayerSpec::Flatten, _) => Layer::Flatten,
        };
        shape = layer.output_shape(shape)?;
        layers.push(layer);
        if Some(idx) != last_param && matches!(spec, LayerSpec::Dense(_) | LayerSpec::Conv3x3(_)) {
            layers.push(Layer::Relu);
        }
    }
    let Shape::Flat(m) = shape else {
        return Err(arch_err("feature layers must end in a flat vector; add `flatten`".into()));
    };
    if config.final_bn_relu {
        layers.push(Layer::BatchNorm(BatchNorm::new(m)));
        layers.push(Layer::Relu);
    }
    Ok((layers, input_shape, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::centroids::{generate_simplex, GeneratorKind};
    use rand::Rng;

    fn small_config() -> NetworkConfig {
        NetworkConfig {
            architecture: "dense(6),dense(5)".into(),
            input_shape: vec![3],
            pedcc_dim: 3,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn parse_architecture_forms() {
        assert_eq!(
            parse_architecture("conv3x3(8), maxpool2,flatten , dense(16)").unwrap(),
            vec![LayerSpec::Conv3x3(8), LayerSpec::MaxPool2, LayerSpec::Flatten, LayerSpec::Dense(16)]
        );
        assert!(parse_architecture("dense(0)").is_err());
        assert!(parse_architecture("dense64").is_err());
        assert!(parse_architecture("lstm(3)").is_err());
    }

    #[test]
    fn identity_toy_forward() {
        // One dense layer preset to identity, W = [e1 e2] in R^3.
        let cs = CentroidSet::from_rows(
            &[vec![1.0, 0.0], vec![-0.5, 3f64.sqrt() / 2.0], vec![-0.5, -(3f64.sqrt()) / 2.0]],
            GeneratorKind::Simplex,
        )
        .unwrap();
        let config = NetworkConfig {
            architecture: "dense(3)".into(),
            input_shape: vec![3],
            pedcc_dim: 2,
            fc1_bias: false,
            ..NetworkConfig::default()
        };
        let mut model = NetworkModel::new(config, cs).unwrap();
        if let Layer::Dense(d) = &mut model.layers_mut()[0] {
            d.weight = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
            d.bias = vec![0.0; 3];
        }
        model.set_fc1(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0], None).unwrap();
        let x = Batch::new(1, Shape::Flat(3), vec![1.0, 1.0, 1.0]).unwrap();
        let out = model.forward(&x).unwrap();
        assert_eq!(out.f_m, vec![1.0, 1.0, 1.0]);
        assert_eq!(out.f_n, vec![1.0, 1.0]);
    }

    #[test]
    fn cosines_are_bounded() {
        let cs = generate_simplex(4, 3).unwrap();
        let model = NetworkModel::new(small_config(), cs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..1000 * 3).map(|_| rng.random_range(-5.0..5.0)).collect();
        let out = model.forward(&Batch::new(1000, Shape::Flat(3), data).unwrap()).unwrap();
        assert!(out.cos_theta.iter().all(|c| (-1.0..=1.0).contains(c)));
    }

    #[test]
    fn raw_features_without_bn_relu() {
        let cs = generate_simplex(4, 3).unwrap();
        let model = NetworkModel::new(small_config(), cs.clone()).unwrap();
        assert_eq!(model.layers().iter().map(Layer::kind).collect::<Vec<_>>(), ["dense", "relu", "dense"]);
        let with_bn = NetworkModel::new(
            NetworkConfig {
                final_bn_relu: true,
                ..small_config()
            },
            cs,
        )
        .unwrap();
        assert_eq!(
            with_bn.layers().iter().map(Layer::kind).collect::<Vec<_>>(),
            ["dense", "relu", "dense", "batchnorm", "relu"]
        );
        // Raw last-layer output can be negative; ReLU'd output cannot.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..50 * 3).map(|_| rng.random_range(-3.0..3.0)).collect();
        let x = Batch::new(50, Shape::Flat(3), data).unwrap();
        assert!(model.forward(&x).unwrap().f_m.iter().any(|&v| v < 0.0));
        assert!(with_bn.forward(&x).unwrap().f_m.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn dimension_checks() {
        let cs = generate_simplex(4, 3).unwrap();
        let cfg = NetworkConfig {
            architecture: "dense(3)".into(),
            ..small_config()
        };
        assert!(matches!(NetworkModel::new(cfg, cs.clone()), Err(Error::InvalidConfig(_))));
        let cfg = NetworkConfig {
            pedcc_dim: 4,
            ..small_config()
        };
        assert!(matches!(NetworkModel::new(cfg, cs.clone()), Err(Error::ArchitectureMismatch(_))));
        let cfg = NetworkConfig {
            conv_feature_dim: Some(7),
            ..small_config()
        };
        assert!(NetworkModel::new(cfg, cs.clone()).is_err());
        let model = NetworkModel::new(small_config(), cs).unwrap();
        assert!(matches!(model.forward(&Batch::zeros(1, Shape::Flat(2))), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn reduces_to_am_when_other_weights_zero() {
        let cs = generate_simplex(4, 3).unwrap();
        let model = NetworkModel::new(small_config(), cs.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..8 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Batch::new(8, Shape::Flat(3), data).unwrap();
        let labels = [0, 1, 2, 3, 0, 1, 2, 3];
        let cfg = LossConfig {
            lin_ind_weight: 0.0,
            mse_weight: 0.0,
            ..LossConfig::default()
        };
        let (b, _, _) = model.loss_and_gradients(&x, &labels, &cfg, false).unwrap();
        let out = model.forward(&x).unwrap();
        let (am, _) = loss::loss_am(&out.cos_theta, &labels, 4, cfg.scale, cfg.margin).unwrap();
        assert_eq!(b.total, am);
    }
}
