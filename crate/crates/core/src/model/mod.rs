//! Feature extractor, softmax classifiers and the EMA target model.

mod checkpoint;

pub use checkpoint::{checkpoint_load, checkpoint_read, checkpoint_save, checkpoint_write, CHECKPOINT_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::{tags, Rng};

/// Shape of a [`CmclModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Output width of each affine layer; empty means the identity extractor.
    pub layers: Vec<usize>,
    pub classes: usize,
    pub domains: usize,
    /// Apply ReLU after the last layer too.
    #[serde(default = "default_true")]
    pub final_relu: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.layers.last().copied().unwrap_or(self.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("model.input_dim", "must be positive"));
        }
        if let Some(i) = self.layers.iter().position(|&w| w == 0) {
            return Err(Error::invalid(format!("model.layers[{i}]"), "must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("model.classes", "need at least 2 classes"));
        }
        if self.domains == 0 {
            return Err(Error::invalid("model.domains", "need at least 1 domain"));
        }
        Ok(())
    }
}

/// `y = x Wᵀ + b`, weight `d_out × d_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    input_dim: usize,
    layers: Vec<AffineLayer>,
    final_relu: bool,
}

impl FeatureExtractor {
    pub fn new(input_dim: usize, layers: Vec<AffineLayer>, final_relu: bool) -> Result<Self> {
        let mut width = input_dim;
        for (i, l) in layers.iter().enumerate() {
            let (out, inp) = (l.weight.rows(), l.weight.cols());
            if l.weight.rank() != 2 || inp != width || l.bias.shape() != [out] {
                return Err(Error::invalid(
                    format!("extractor.layer{i}"),
                    format!(
                        "weight {:?} / bias {:?} do not chain from width {width}",
                        l.weight.shape(),
                        l.bias.shape()
                    ),
                ));
            }
            width = out;
        }
        Ok(Self {
            input_dim,
            layers,
            final_relu,
        })
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(input_dim: usize, widths: &[usize], final_relu: bool, rng: &mut Rng) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input_dim;
        for &out in widths {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..out * fan_in).map(|_| rng.uniform_in(-bound, bound)).collect();
            layers.push(AffineLayer {
                weight: Tensor::new(vec![out, fan_in], data).expect("shape matches data"),
                bias: Tensor::zeros(&[out]),
            });
            fan_in = out;
        }
        Self {
            input_dim,
            layers,
            final_relu,
        }
    }

    pub fn identity(input_dim: usize) -> Self {
        Self {
            input_dim,
            layers: Vec::new(),
            final_relu: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.weight.rows())
    }

    pub fn layers(&self) -> &[AffineLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [AffineLayer] {
        &mut self.layers
    }

    pub fn final_relu(&self) -> bool {
        self.final_relu
    }

    fn activates(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.final_relu
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.input_dim {
            return Err(Error::dim("extract_features", x.shape(), &[x.rows(), self.input_dim]));
        }
        Ok(())
    }

    /// `Z = F(X)` without recording gradients.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = affine(&h, l)?;
            if self.activates(i) {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Smallest `|pre-activation|` over every ReLU unit on this batch.
    pub fn min_abs_preactivation(&self, x: &Tensor) -> Result<f64> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut min = f64::INFINITY;
        for (i, l) in self.layers.iter().enumerate() {
            h = affine(&h, l)?;
            if self.activates(i) {
                min = h.data().iter().fold(min, |m, v| m.min(v.abs()));
                h = h.relu();
            }
        }
        Ok(min)
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }
}

fn affine(h: &Tensor, l: &AffineLayer) -> Result<Tensor> {
    let mut out = h.matmul(&l.weight.transpose()?)?;
    let d = out.cols();
    for row in out.data_mut().chunks_mut(d) {
        for (o, &b) in row.iter_mut().zip(l.bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

/// Bias-free softmax classifier over `K` classes, `W` is `K × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxClassifier {
    pub w: Tensor,
}

impl SoftmaxClassifier {
    pub fn zeros(classes: usize, feature_dim: usize) -> Self {
        Self {
            w: Tensor::zeros(&[classes, feature_dim]),
        }
    }

    pub fn new(w: Tensor) -> Result<Self> {
        w.require_matrix("SoftmaxClassifier")?;
        Ok(Self { w })
    }

    pub fn classes(&self) -> usize {
        self.w.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.w.cols()
    }

    /// Log-posterior `log P(Y | Z)` for each row of `z`.
    pub fn posterior(&self, z: &Tensor) -> Result<Tensor> {
        if z.rank() != 2 || z.cols() != self.feature_dim() {
            return Err(Error::dim("posterior", z.shape(), self.w.shape()));
        }
        z.matmul(&self.w.transpose()?)?.log_softmax()
    }

    /// Arg-max class per row; ties go to the lowest index.
    pub fn predict(&self, z: &Tensor) -> Result<Vec<usize>> {
        let logits = z.matmul(&self.w.transpose()?)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }
}

/// Online model: extractor, one classifier per source domain and the global
/// classifier used at test time.
#[derive(Clone, Debug, PartialEq)]
pub struct CmclModel {
    pub extractor: FeatureExtractor,
    pub domain_classifiers: Vec<SoftmaxClassifier>,
    pub global_classifier: SoftmaxClassifier,
}

impl CmclModel {
    pub fn new(
        extractor: FeatureExtractor,
        domain_classifiers: Vec<SoftmaxClassifier>,
        global_classifier: SoftmaxClassifier,
    ) -> Result<Self> {
        let d = extractor.feature_dim();
        let k = global_classifier.classes();
        if domain_classifiers.is_empty() {
            return Err(Error::invalid("model.domains", "need at least 1 domain classifier"));
        }
        if k < 2 {
            return Err(Error::invalid("model.classes", "need at least 2 classes"));
        }
        for (i, c) in domain_classifiers.iter().chain([&global_classifier]).enumerate() {
            if c.classes() != k || c.feature_dim() != d {
                return Err(Error::invalid(
                    format!("classifier {i}"),
                    format!("shape {:?} does not match [{k}, {d}]", c.w.shape()),
                ));
            }
        }
        Ok(Self {
            extractor,
            domain_classifiers,
            global_classifier,
        })
    }

    /// Random extractor, zero classifiers.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::substream(seed, &[tags::INIT]);
        let extractor = FeatureExtractor::init(cfg.input_dim, &cfg.layers, cfg.final_relu, &mut rng);
        let d = extractor.feature_dim();
        Self::new(
            extractor,
            vec![SoftmaxClassifier::zeros(cfg.classes, d); cfg.domains],
            SoftmaxClassifier::zeros(cfg.classes, d),
        )
    }

    pub fn domains(&self) -> usize {
        self.domain_classifiers.len()
    }

    pub fn classes(&self) -> usize {
        self.global_classifier.classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.feature_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.input_dim()
    }

    pub fn extract_features(&self, x: &Tensor) -> Result<Tensor> {
        self.extractor.forward(x)
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let extractor = self
            .extractor
            .layers
            .iter()
            .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
            .collect();
        let domain = self
            .domain_classifiers
            .iter()
            .map(|c| tape.leaf(c.w.clone()))
            .collect();
        let global = tape.leaf(self.global_classifier.w.clone());
        BoundModel {
            extractor,
            final_relu: self.extractor.final_relu,
            input_dim: self.extractor.input_dim,
            domain,
            global,
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.extractor
            .params()
            .chain(self.domain_classifiers.iter().map(|c| &c.w))
            .chain([&self.global_classifier.w])
    }
}

/// Tape handles for the parameters of a [`CmclModel`].
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub extractor: Vec<(Var, Var)>,
    pub domain: Vec<Var>,
    pub global: Var,
    final_relu: bool,
    input_dim: usize,
}

impl BoundModel {
    /// Assembles handles from raw leaves in [`CmclModel::bind`] order.
    pub fn from_parts(
        extractor: Vec<(Var, Var)>,
        domain: Vec<Var>,
        global: Var,
        final_relu: bool,
        input_dim: usize,
    ) -> Self {
        Self {
            extractor,
            domain,
            global,
            final_relu,
            input_dim,
        }
    }

    pub fn domains(&self) -> usize {
        self.domain.len()
    }

    /// Records `F(x)`. With `frozen`, extractor parameters are detached and
    /// receive no gradient.
    pub fn features(&self, tape: &mut Tape, x: &Tensor, frozen: bool) -> Result<Var> {
        if x.rank() != 2 || x.cols() != self.input_dim {
            return Err(Error::dim("extract_features", x.shape(), &[x.rows(), self.input_dim]));
        }
        let mut h = tape.constant(x.clone());
        let n = self.extractor.len();
        for (i, &(w, b)) in self.extractor.iter().enumerate() {
            let (w, b) = if frozen {
                (tape.detach(w), tape.detach(b))
            } else {
                (w, b)
            };
            let wt = tape.transpose(w)?;
            let lin = tape.matmul(h, wt)?;
            h = tape.add_row_bias(lin, b)?;
            if i + 1 < n || self.final_relu {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Records `log_softmax(z Wᵀ)`.
    pub fn posterior(&self, tape: &mut Tape, classifier: Var, z: Var, frozen: bool) -> Result<Var> {
        let w = if frozen { tape.detach(classifier) } else { classifier };
        let wt = tape.transpose(w)?;
        let logits = tape.matmul(z, wt)?;
        tape.log_softmax(logits)
    }
}

/// `W^g = (1/N) Σ W^i`, summed in domain order then divided by `N`.
pub fn average_classifiers(model: &CmclModel) -> SoftmaxClassifier {
    let cs = &model.domain_classifiers;
    let n = cs.len() as f64;
    let first = &cs[0].w;
    let mut out = first.clone();
    for (k, o) in out.data_mut().iter_mut().enumerate() {
        let x0 = first.data()[k];
        // Identical entries are their own mean; sum-then-divide can be an ulp off.
        if cs.iter().all(|c| c.w.data()[k].to_bits() == x0.to_bits()) {
            continue;
        }
        let s: f64 = cs.iter().map(|c| c.w.data()[k]).sum();
        *o = s / n;
    }
    SoftmaxClassifier { w: out }
}

/// Exponential moving average of the online extractor and global classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub target_extractor: FeatureExtractor,
    pub target_global: SoftmaxClassifier,
    alpha: f64,
}

impl EmaState {
    /// Target starts as a copy of the online model.
    pub fn new(model: &CmclModel, alpha: f64) -> Result<Self> {
        Self::from_parts(model.extractor.clone(), model.global_classifier.clone(), alpha)
    }

    pub fn from_parts(
        target_extractor: FeatureExtractor,
        target_global: SoftmaxClassifier,
        alpha: f64,
    ) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::invalid("alpha", format!("{alpha} is outside (0, 1]")));
        }
        Ok(Self {
            target_extractor,
            target_global,
            alpha,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `θ_target ← θ_target + α (θ_online − θ_target)` for the extractor and
    /// global classifier. Domain classifiers have no target copy.
    pub fn update(&mut self, online: &CmclModel) -> Result<()> {
        let alpha = self.alpha;
        let pairs = self
            .target_extractor
            .params_mut()
            .chain([&mut self.target_global.w])
            .zip(online.extractor.params().chain([&online.global_classifier.w]));
        let mut count = 0;
        for (target, src) in pairs {
            if target.shape() != src.shape() {
                return Err(Error::dim("ema_update", target.shape(), src.shape()));
            }
            if alpha == 1.0 {
                target.data_mut().copy_from_slice(src.data());
            } else {
                for (t, &o) in target.data_mut().iter_mut().zip(src.data()) {
                    *t += alpha * (o - *t);
                }
            }
            count += 1;
        }
        let expected = online.extractor.params().count() + 1;
        if count != expected {
            return Err(Error::Contract(format!(
                "EMA target has {count} parameter arrays, online model has {expected}"
            )));
        }
        Ok(())
    }

    /// Target-model view for evaluation: target extractor and global classifier.
    pub fn target_params(&self) -> impl Iterator<Item = &Tensor> {
        self.target_extractor.params().chain([&self.target_global.w])
    }

    pub fn extract_features(&self, x: &Tensor) -> Result<Tensor> {
        self.target_extractor.forward(x)
    }
}
