//! Three-stage alternating optimization.
//!
//! Every outer iteration runs, in order:
//!
//! * **Stage A** (`stage_a_iters` steps): extractor and all classifiers
//!   minimize cross-entropy plus the moment-matching penalty; the EMA target
//!   then moves toward the online extractor and global classifier.
//! * **Stage B** (`stage_b_iters` steps): with the extractor frozen, each
//!   domain classifier fits its own domain; the global classifier is then
//!   reset to their mean. No EMA update.
//! * **Stage C** (`stage_c_iters` steps): with the domain classifiers
//!   frozen, the extractor and global classifier maximize cross-domain
//!   likelihood; EMA update.
//!
//! The target model is evaluated on the validation splits after each outer
//! iteration and the best one is kept.

mod metrics;
mod optim;

pub use metrics::{write_metrics_csv, MetricsRow, Stage, METRICS_HEADER};
pub use optim::{optimizer_step, Optimizer, OptimizerKind, OptimizerSpec, ParamState};

use serde::{Deserialize, Serialize};

use crate::data::{BatchSampler, DomainDataset};
use crate::error::{Error, Result};
use crate::losses::{self, graph, DomainBatch};
use crate::model::{average_classifiers, BoundModel, CmclModel, EmaState, FeatureExtractor, ModelConfig, SoftmaxClassifier};
use crate::numerics::{Gradients, Tape, Tensor};
use crate::rng::splitmix64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Outer iterations.
    pub outer_iters: usize,
    pub stage_a_iters: usize,
    pub stage_b_iters: usize,
    pub stage_c_iters: usize,
    pub lambda_mean: f64,
    pub lambda_cov: f64,
    pub ema_alpha: f64,
    /// Examples per domain per step.
    pub batch_size: usize,
    /// Extractor layer widths; the last is the feature dimension.
    pub extractor_layers: Vec<usize>,
    #[serde(default = "default_true")]
    pub final_relu: bool,
    /// Extractor, global classifier, and the domain classifiers in Stage A.
    pub main_optimizer: OptimizerSpec,
    /// Domain classifiers in Stage B.
    pub domain_optimizer: OptimizerSpec,
    /// Evaluate every this many outer iterations (the last one is always
    /// evaluated).
    #[serde(default = "default_one")]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}
fn default_one() -> usize {
    1
}

impl TrainConfig {
    /// Small-network analogue of the digits setting: one Stage-A step, then
    /// 8 Stage-B and 6 Stage-C steps per outer iteration, α = 0.001,
    /// λ = (0.001, 0.01), SGD(0.05, momentum 0.9, wd 5e-4) for the
    /// extractor and global classifier, AdamW(1e-5, wd 5e-4) for the domain
    /// classifiers, 64 examples per domain.
    pub fn digits_defaults() -> Self {
        Self {
            outer_iters: 4000,
            stage_a_iters: 1,
            stage_b_iters: 8,
            stage_c_iters: 6,
            lambda_mean: 0.001,
            lambda_cov: 0.01,
            ema_alpha: 0.001,
            batch_size: 64,
            extractor_layers: vec![64, 64],
            final_relu: true,
            main_optimizer: OptimizerSpec::sgd(0.05, 0.9, 5e-4),
            domain_optimizer: OptimizerSpec::adamw(1e-5, 5e-4),
            eval_every: 1,
            seed: 0,
        }
    }

    /// The same code path reduced to joint empirical risk minimization:
    /// no moment penalty and no Stage B or C.
    pub fn erm_baseline(&self) -> Self {
        Self {
            lambda_mean: 0.0,
            lambda_cov: 0.0,
            stage_b_iters: 0,
            stage_c_iters: 0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return Err(Error::invalid("train.ema_alpha", format!("{} is outside (0, 1]", self.ema_alpha)));
        }
        for (name, v) in [("lambda_mean", self.lambda_mean), ("lambda_cov", self.lambda_cov)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("train.{name}"), format!("{v} must be non-negative")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train.batch_size", "must be at least 1"));
        }
        if self.lambda_cov != 0.0 && self.batch_size < 2 {
            return Err(Error::invalid("train.batch_size", "covariance matching needs at least 2"));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("train.eval_every", "must be at least 1"));
        }
        if let Some(i) = self.extractor_layers.iter().position(|&w| w == 0) {
            return Err(Error::invalid(format!("train.extractor_layers[{i}]"), "must be positive"));
        }
        self.main_optimizer.validate("train.main_optimizer")?;
        self.domain_optimizer.validate("train.domain_optimizer")?;
        Ok(())
    }
}

/// Everything the stage steps mutate.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: CmclModel,
    pub ema: EmaState,
    pub main_opt: Optimizer,
    pub domain_opt: Optimizer,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, model: CmclModel) -> Result<Self> {
        let ema = EmaState::new(&model, cfg.ema_alpha)?;
        Ok(Self {
            model,
            ema,
            main_opt: Optimizer::new(cfg.main_optimizer.clone()),
            domain_opt: Optimizer::new(cfg.domain_optimizer.clone()),
        })
    }
}

/// Loss values of one step; `None` for losses the stage does not compute.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepLosses {
    /// The objective that was differentiated.
    pub total: f64,
    pub ce: Option<f64>,
    pub mean: Option<f64>,
    pub cov: Option<f64>,
    pub dsc: Option<f64>,
    pub cdl: Option<f64>,
}

/// Stable optimizer ids: extractor `weight, bias` pairs, then domain
/// classifiers, then the global classifier.
fn domain_id(model: &CmclModel, j: usize) -> usize {
    2 * model.extractor.layers().len() + j
}

fn global_id(model: &CmclModel) -> usize {
    domain_id(model, model.domains())
}

fn step_extractor(opt: &mut Optimizer, ex: &mut FeatureExtractor, bound: &BoundModel, grads: &Gradients) -> Result<()> {
    for (i, (layer, &(w, b))) in ex.layers_mut().iter_mut().zip(&bound.extractor).enumerate() {
        opt.step(2 * i, &mut layer.weight, grads.get(w), true)?;
        opt.step(2 * i + 1, &mut layer.bias, grads.get(b), false)?;
    }
    Ok(())
}

fn check_finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric {
            context: what.to_string(),
            reason: format!("loss is {value}"),
        })
    }
}

/// Stage A: one step on `L_ce + λ1 L_mean + λ2 L_cov` over every parameter,
/// followed by an EMA update.
pub fn stage_a_step(state: &mut TrainState, batches: &[DomainBatch], cfg: &TrainConfig) -> Result<StepLosses> {
    let model = &mut state.model;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let out = graph::cemm(&mut tape, &bound, batches, cfg.lambda_mean, cfg.lambda_cov)?;
    let losses = StepLosses {
        total: check_finite(tape.scalar_value(out.total), "stage A loss")?,
        ce: Some(tape.scalar_value(out.ce)),
        mean: out.mean.map(|v| tape.scalar_value(v)),
        cov: out.cov.map(|v| tape.scalar_value(v)),
        ..Default::default()
    };
    let grads = tape.backward(out.total)?;
    step_extractor(&mut state.main_opt, &mut model.extractor, &bound, &grads)?;
    for j in 0..model.domains() {
        let id = domain_id(model, j);
        state
            .main_opt
            .step(id, &mut model.domain_classifiers[j].w, grads.get(bound.domain[j]), true)?;
    }
    let gid = global_id(model);
    state
        .main_opt
        .step(gid, &mut model.global_classifier.w, grads.get(bound.global), true)?;
    state.ema.update(model)?;
    Ok(losses)
}

/// Stage B: one step on `L_dsc` for the domain classifiers, then
/// `W^g ← mean(W^i)`. The extractor and the EMA target are untouched.
pub fn stage_b_step(state: &mut TrainState, batches: &[DomainBatch]) -> Result<StepLosses> {
    let model = &mut state.model;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let loss = graph::dsc(&mut tape, &bound, batches)?;
    let value = check_finite(tape.scalar_value(loss), "stage B loss")?;
    let grads = tape.backward(loss)?;
    for j in 0..model.domains() {
        let id = domain_id(model, j);
        state
            .domain_opt
            .step(id, &mut model.domain_classifiers[j].w, grads.get(bound.domain[j]), true)?;
    }
    model.global_classifier = average_classifiers(model);
    Ok(StepLosses {
        total: value,
        dsc: Some(value),
        ..Default::default()
    })
}

/// Stage C: one step on `L_cdl` for the extractor and global classifier,
/// followed by an EMA update. Domain classifiers are untouched.
pub fn stage_c_step(state: &mut TrainState, batches: &[DomainBatch]) -> Result<StepLosses> {
    let model = &mut state.model;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let loss = graph::cdl(&mut tape, &bound, batches)?;
    let value = check_finite(tape.scalar_value(loss), "stage C loss")?;
    let grads = tape.backward(loss)?;
    step_extractor(&mut state.main_opt, &mut model.extractor, &bound, &grads)?;
    let gid = global_id(model);
    state
        .main_opt
        .step(gid, &mut model.global_classifier.w, grads.get(bound.global), true)?;
    state.ema.update(model)?;
    Ok(StepLosses {
        total: value,
        cdl: Some(value),
        ..Default::default()
    })
}

/// Top-1 accuracy of `classifier ∘ extractor` on `ds`.
pub fn accuracy(extractor: &FeatureExtractor, classifier: &SoftmaxClassifier, ds: &DomainDataset) -> Result<f64> {
    let z = extractor.forward(&ds.x)?;
    let pred = classifier.predict(&z)?;
    let correct = pred.iter().zip(&ds.y).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Validation result after one outer iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub outer_iter: usize,
    pub val_acc_online: Vec<f64>,
    pub val_acc_target: Vec<f64>,
    pub align_symkl: f64,
}

impl EvalRecord {
    pub fn mean_online(&self) -> f64 {
        mean(&self.val_acc_online)
    }

    pub fn mean_target(&self) -> f64 {
        mean(&self.val_acc_target)
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[derive(Clone, Debug)]
pub struct Snapshot {
    pub outer_iter: usize,
    pub mean_val_acc_target: f64,
    pub model: CmclModel,
    pub ema: EmaState,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: CmclModel,
    pub ema: EmaState,
    pub metrics: Vec<MetricsRow>,
    pub evals: Vec<EvalRecord>,
    /// Best mean target-model validation accuracy; `None` when nothing was
    /// evaluated.
    pub best: Option<Snapshot>,
}

fn evaluate(state: &TrainState, val: &[DomainDataset], probe: &Tensor, outer_iter: usize) -> Result<EvalRecord> {
    let m = &state.model;
    let e = &state.ema;
    let val_acc_online = val
        .iter()
        .map(|ds| accuracy(&m.extractor, &m.global_classifier, ds))
        .collect::<Result<Vec<_>>>()?;
    let val_acc_target = val
        .iter()
        .map(|ds| accuracy(&e.target_extractor, &e.target_global, ds))
        .collect::<Result<Vec<_>>>()?;
    let align_symkl = losses::posterior_alignment_diag(m, probe)?;
    Ok(EvalRecord {
        outer_iter,
        val_acc_online,
        val_acc_target,
        align_symkl,
    })
}

fn check_datasets(train: &[DomainDataset], val: &[DomainDataset]) -> Result<()> {
    if train.len() < 2 {
        return Err(Error::invalid("datasets", format!("need at least 2 source domains, got {}", train.len())));
    }
    if val.len() != train.len() {
        return Err(Error::invalid(
            "datasets",
            format!("{} validation sets for {} source domains", val.len(), train.len()),
        ));
    }
    let (dim, k) = (train[0].input_dim(), train[0].classes);
    for ds in train.iter().chain(val) {
        if ds.input_dim() != dim || ds.classes != k {
            return Err(Error::invalid(
                format!("dataset {}", ds.name),
                format!(
                    "input_dim {} / classes {} differ from {dim} / {k}",
                    ds.input_dim(),
                    ds.classes
                ),
            ));
        }
    }
    Ok(())
}

/// Seeds for model initialization and batch sampling, derived from the
/// configured seed.
fn sub_seeds(seed: u64) -> (u64, u64) {
    let mut s = seed;
    (splitmix64(&mut s), splitmix64(&mut s))
}

/// Builds the initial model and sampler for `cfg`.
pub fn init_state(cfg: &TrainConfig, train: &[DomainDataset]) -> Result<(TrainState, BatchSampler)> {
    cfg.validate()?;
    let (init_seed, sample_seed) = sub_seeds(cfg.seed);
    let model_cfg = ModelConfig {
        input_dim: train[0].input_dim(),
        layers: cfg.extractor_layers.clone(),
        classes: train[0].classes,
        domains: train.len(),
        final_relu: cfg.final_relu,
    };
    let model = CmclModel::init(&model_cfg, init_seed)?;
    let state = TrainState::new(cfg, model)?;
    let sampler = BatchSampler::new(train.to_vec(), sample_seed)?;
    Ok((state, sampler))
}

/// Runs the full alternating schedule on the source training splits,
/// validating on the matching validation splits.
pub fn train(cfg: &TrainConfig, train_sets: &[DomainDataset], val_sets: &[DomainDataset]) -> Result<TrainOutput> {
    cfg.validate()?;
    check_datasets(train_sets, val_sets)?;
    let (mut state, mut sampler) = init_state(cfg, train_sets)?;
    let probe = Tensor::concat_rows(&val_sets.iter().map(|d| &d.x).collect::<Vec<_>>())?;

    let mut metrics = Vec::new();
    let mut evals = Vec::new();
    let mut best: Option<Snapshot> = None;
    let schedule = [
        (Stage::A, cfg.stage_a_iters),
        (Stage::B, cfg.stage_b_iters),
        (Stage::C, cfg.stage_c_iters),
    ];

    for outer in 1..=cfg.outer_iters {
        let first_row = metrics.len();
        for (stage, iters) in schedule {
            for inner in 1..=iters {
                let batches = sampler.sample_batches(cfg.batch_size)?;
                let context = |e: Error| match e {
                    Error::Numeric { reason, .. } => Error::Numeric {
                        context: format!("outer {outer}, stage {stage}, step {inner}"),
                        reason,
                    },
                    other => other,
                };
                let losses = match stage {
                    Stage::A => stage_a_step(&mut state, &batches, cfg),
                    Stage::B => stage_b_step(&mut state, &batches),
                    Stage::C => stage_c_step(&mut state, &batches),
                }
                .map_err(context)?;
                metrics.push(MetricsRow::from_step(outer, stage, inner, &losses));
            }
        }

        if outer % cfg.eval_every == 0 || outer == cfg.outer_iters {
            let record = evaluate(&state, val_sets, &probe, outer)?;
            if metrics.len() > first_row {
                metrics.last_mut().expect("non-empty").attach_eval(&record);
            }
            let score = record.mean_target();
            if best.as_ref().is_none_or(|b| score > b.mean_val_acc_target) {
                best = Some(Snapshot {
                    outer_iter: outer,
                    mean_val_acc_target: score,
                    model: state.model.clone(),
                    ema: state.ema.clone(),
                });
            }
            evals.push(record);
        }
    }

    Ok(TrainOutput {
        model: state.model,
        ema: state.ema,
        metrics,
        evals,
        best,
    })
}
