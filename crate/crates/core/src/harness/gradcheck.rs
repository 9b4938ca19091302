//! Finite-difference verification of every training loss on random toy
//! models.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{graph, DomainBatch};
use crate::model::{AffineLayer, BoundModel, CmclModel, FeatureExtractor, SoftmaxClassifier};
use crate::numerics::{gradient_check, GradCheckOptions, OpKind, Tape, Tensor, Var};
use crate::rng::{tags, Rng};

/// Random configurations per loss.
pub const SUITE_CONFIGS: usize = 20;
/// Toy configurations whose extractor pre-activations come closer than
/// this to zero are redrawn, so finite differences never straddle a kink.
const KINK_MARGIN: f64 = 1e-3;
const TOY_INPUT_DIM: usize = 3;
const TOY_HIDDEN: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    Mm,
    Dsc,
    Cdl,
    Cemm,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [LossKind::Ce, LossKind::Mm, LossKind::Dsc, LossKind::Cdl, LossKind::Cemm];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "loss_ce",
            LossKind::Mm => "loss_mm",
            LossKind::Dsc => "loss_dsc",
            LossKind::Cdl => "loss_cdl",
            LossKind::Cemm => "loss_cemm",
        }
    }

    /// Parameter groups the loss is differentiated with respect to:
    /// (extractor, domain classifiers, global classifier). The others enter
    /// as constants.
    fn trainable(self) -> (bool, bool, bool) {
        match self {
            LossKind::Ce | LossKind::Cemm => (true, true, true),
            LossKind::Mm => (true, false, false),
            LossKind::Dsc => (false, true, false),
            LossKind::Cdl => (true, false, true),
        }
    }
}

/// One random toy problem.
#[derive(Clone, Debug)]
pub struct Toy {
    pub model: CmclModel,
    pub batches: Vec<DomainBatch>,
    pub lambda_mean: f64,
    pub lambda_cov: f64,
}

impl Toy {
    /// Draws N ∈ {2, 3}, feature dimension ∈ {2, 5}, K ∈ {2, 4} and batch
    /// size ∈ {3, 8}, then weights and data, redrawing until every
    /// pre-activation clears the kink margin.
    pub fn random(rng: &mut Rng) -> Result<Self> {
        let n = [2, 3][rng.below(2)];
        let d = [2, 5][rng.below(2)];
        let k = [2, 4][rng.below(2)];
        let b = [3, 8][rng.below(2)];
        loop {
            let mut gauss = |shape: &[usize], scale: f64| {
                let len = shape.iter().product();
                Tensor::new(shape.to_vec(), (0..len).map(|_| scale * rng.normal()).collect())
            };
            let layers = vec![
                AffineLayer {
                    weight: gauss(&[TOY_HIDDEN, TOY_INPUT_DIM], 0.8)?,
                    bias: gauss(&[TOY_HIDDEN], 0.3)?,
                },
                AffineLayer {
                    weight: gauss(&[d, TOY_HIDDEN], 0.8)?,
                    bias: gauss(&[d], 0.3)?,
                },
            ];
            let extractor = FeatureExtractor::new(TOY_INPUT_DIM, layers, true)?;
            let domain = (0..n)
                .map(|_| SoftmaxClassifier::new(gauss(&[k, d], 0.5)?))
                .collect::<Result<Vec<_>>>()?;
            let global = SoftmaxClassifier::new(gauss(&[k, d], 0.5)?)?;
            let model = CmclModel::new(extractor, domain, global)?;
            let xs = (0..n)
                .map(|_| gauss(&[b, TOY_INPUT_DIM], 1.0))
                .collect::<Result<Vec<_>>>()?;
            let mut clear = true;
            for x in &xs {
                clear &= model.extractor.min_abs_preactivation(x)? > KINK_MARGIN;
            }
            let lambda_mean = 0.1 + 1.9 * rng.uniform();
            let lambda_cov = 0.1 + 1.9 * rng.uniform();
            if !clear {
                continue;
            }
            let batches = xs
                .into_iter()
                .enumerate()
                .map(|(i, x)| {
                    let y = (0..b).map(|_| rng.below(k)).collect();
                    DomainBatch::new(i, x, y)
                })
                .collect::<Result<Vec<_>>>()?;
            return Ok(Self {
                model,
                batches,
                lambda_mean,
                lambda_cov,
            });
        }
    }
}

struct Layout {
    names: Vec<String>,
    values: Vec<Tensor>,
}

fn layout(model: &CmclModel, kind: LossKind) -> Layout {
    let (ext, dom, glob) = kind.trainable();
    let mut names = Vec::new();
    let mut values = Vec::new();
    if ext {
        for (l, layer) in model.extractor.layers().iter().enumerate() {
            names.push(format!("extractor.{l}.weight"));
            values.push(layer.weight.clone());
            names.push(format!("extractor.{l}.bias"));
            values.push(layer.bias.clone());
        }
    }
    if dom {
        for (i, c) in model.domain_classifiers.iter().enumerate() {
            names.push(format!("domain.{i}"));
            values.push(c.w.clone());
        }
    }
    if glob {
        names.push("global".into());
        values.push(model.global_classifier.w.clone());
    }
    Layout { names, values }
}

/// Binds the model with the trainable groups taken from `leaves` (in
/// [`layout`] order) and the rest as constants.
fn bind(tape: &mut Tape, model: &CmclModel, kind: LossKind, leaves: &[Var]) -> BoundModel {
    let (ext, dom, glob) = kind.trainable();
    let mut it = leaves.iter().copied();
    let mut take = |tape: &mut Tape, trainable: bool, t: &Tensor| {
        if trainable {
            it.next().expect("leaf per trainable tensor")
        } else {
            tape.constant(t.clone())
        }
    };
    let extractor = model
        .extractor
        .layers()
        .iter()
        .map(|l| (take(tape, ext, &l.weight), take(tape, ext, &l.bias)))
        .collect();
    let domain = model
        .domain_classifiers
        .iter()
        .map(|c| take(tape, dom, &c.w))
        .collect();
    let global = take(tape, glob, &model.global_classifier.w);
    BoundModel::from_parts(
        extractor,
        domain,
        global,
        model.extractor.final_relu(),
        model.input_dim(),
    )
}

fn record(tape: &mut Tape, toy: &Toy, kind: LossKind, leaves: &[Var]) -> Result<Var> {
    let m = bind(tape, &toy.model, kind, leaves);
    let feats = |tape: &mut Tape| {
        toy.batches
            .iter()
            .map(|b| m.features(tape, &b.x, false))
            .collect::<Result<Vec<_>>>()
    };
    match kind {
        LossKind::Ce => {
            let f = feats(tape)?;
            graph::ce(tape, &m, &f, &toy.batches)
        }
        LossKind::Mm => {
            let f = feats(tape)?;
            graph::mm(tape, &f, toy.lambda_mean, toy.lambda_cov)
        }
        LossKind::Dsc => graph::dsc(tape, &m, &toy.batches),
        LossKind::Cdl => graph::cdl(tape, &m, &toy.batches),
        LossKind::Cemm => Ok(graph::cemm(tape, &m, &toy.batches, toy.lambda_mean, toy.lambda_cov)?.total),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckFailure {
    pub config: usize,
    pub param: String,
    pub coord: usize,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCheck {
    pub loss: LossKind,
    pub configs: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub failures: Vec<CheckFailure>,
}

impl LossCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSuite {
    pub tolerance: f64,
    pub step: f64,
    /// Op whose gradient rule was deliberately corrupted, if any.
    pub fault: Option<String>,
    pub checks: Vec<LossCheck>,
}

impl GradcheckSuite {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(LossCheck::passed)
    }
}

impl fmt::Display for GradcheckSuite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(op) = &self.fault {
            writeln!(f, "fault injected into op `{op}`")?;
        }
        for c in &self.checks {
            writeln!(
                f,
                "{:<10} {} configs={} coords={} max_rel_error={:.3e}",
                c.loss.name(),
                if c.passed() { "PASS" } else { "FAIL" },
                c.configs,
                c.coordinates,
                c.max_rel_error
            )?;
            for e in &c.failures {
                let op = self.fault.as_deref().map(|o| format!(" op={o}")).unwrap_or_default();
                writeln!(
                    f,
                    "  config {} {}[{}] rel_error={:.3e}{op}",
                    e.config, e.param, e.coord, e.rel_error
                )?;
            }
        }
        Ok(())
    }
}

/// Runs [`SUITE_CONFIGS`] random configurations for every loss at step
/// 1e-6 and tolerance 1e-5, optionally with one op's gradient corrupted.
pub fn cmd_gradcheck(seed: u64, fault: Option<OpKind>) -> Result<GradcheckSuite> {
    let opts = GradCheckOptions {
        fault,
        ..Default::default()
    };
    let mut checks = Vec::new();
    for (li, kind) in LossKind::ALL.into_iter().enumerate() {
        let mut rng = Rng::substream(seed, &[tags::GRADCHECK, li as u64]);
        let mut check = LossCheck {
            loss: kind,
            configs: 0,
            coordinates: 0,
            max_rel_error: 0.0,
            failures: Vec::new(),
        };
        for config in 0..SUITE_CONFIGS {
            let toy = Toy::random(&mut rng)?;
            let lay = layout(&toy.model, kind);
            let report = gradient_check(|tape, leaves| record(tape, &toy, kind, leaves), &lay.values, &opts)?;
            check.configs += 1;
            check.coordinates += report.checked;
            check.max_rel_error = check.max_rel_error.max(report.max_rel_error);
            if !report.passed {
                let (p, coord) = report.worst.expect("a failing check has a worst coordinate");
                check.failures.push(CheckFailure {
                    config,
                    param: lay.names[p].clone(),
                    coord,
                    rel_error: report.max_rel_error,
                });
            }
        }
        checks.push(check);
    }
    Ok(GradcheckSuite {
        tolerance: opts.tolerance,
        step: opts.step,
        fault: fault.map(|k| k.name().to_string()),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stock_suite_passes() {
        let s = cmd_gradcheck(0, None).unwrap();
        assert!(s.passed(), "{s}");
        assert_eq!(s.checks.len(), 5);
        for c in &s.checks {
            assert_eq!(c.configs, SUITE_CONFIGS);
            assert!(c.coordinates > 0);
        }
    }

    #[test]
    fn faults_are_caught_and_named() {
        let s = cmd_gradcheck(0, Some(OpKind::LogSoftmax)).unwrap();
        assert!(!s.passed());
        let text = s.to_string();
        assert!(text.contains("op=log_softmax"), "{text}");
        // the moment penalty never touches log_softmax
        assert!(s.checks.iter().find(|c| c.loss == LossKind::Mm).unwrap().passed());
        let s = cmd_gradcheck(0, Some(OpKind::BatchCovariance)).unwrap();
        assert!(!s.checks.iter().find(|c| c.loss == LossKind::Mm).unwrap().passed());
    }

    #[test]
    fn frozen_groups_are_constants() {
        let mut rng = Rng::new(1);
        let toy = Toy::random(&mut rng).unwrap();
        let n = toy.model.domains();
        assert_eq!(layout(&toy.model, LossKind::Dsc).values.len(), n);
        assert_eq!(layout(&toy.model, LossKind::Cdl).values.len(), 5);
        assert_eq!(layout(&toy.model, LossKind::Mm).values.len(), 4);
        assert_eq!(layout(&toy.model, LossKind::Ce).values.len(), 5 + n);
    }
}
