//! Synthetic domain-shift generators.
//!
//! Each domain is governed by one scalar parameter (a rotation angle or a
//! spurious-correlation strength). Whether the unseen domain lies inside the
//! range of the source parameters stands in for whether its distribution is
//! inside the convex hull of the source distributions; this is a proxy in
//! parameter space, not a statement about the distributions themselves.

use serde::{Deserialize, Serialize};

use super::DomainDataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{tags, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    /// Class prototypes on a circle, rotated per domain. Parameters are
    /// angles in degrees.
    RotatedGaussians,
    /// Binary task with a stable core feature and a spurious feature whose
    /// correlation with the label is the domain parameter.
    SpuriousFeature,
}

/// Where the unseen parameter must sit relative to the source parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    /// Strictly inside `(min, max)` of the source parameters.
    Interpolated,
    /// Strictly outside `[min, max]`.
    Extrapolated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub kind: GeneratorKind,
    pub classes: usize,
    pub samples_per_domain: usize,
    pub input_dim: usize,
    /// One parameter per source domain.
    pub source_params: Vec<f64>,
    pub unseen_param: f64,
    #[serde(default)]
    pub placement: Option<Placement>,
    /// Standard deviation of the Gaussian noise.
    pub noise: f64,
    /// Prototype circle radius (rotated gaussians only).
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_radius() -> f64 {
    1.0
}

impl ScenarioSpec {
    pub fn sources(&self) -> usize {
        self.source_params.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(Error::invalid(format!("scenario.{field}"), reason));
        if self.classes < 2 {
            return bad("classes", format!("need at least 2, got {}", self.classes));
        }
        if self.kind == GeneratorKind::SpuriousFeature && self.classes != 2 {
            return bad("classes", format!("spurious-feature needs exactly 2, got {}", self.classes));
        }
        if self.input_dim < 2 {
            return bad("input_dim", format!("need at least 2, got {}", self.input_dim));
        }
        if self.samples_per_domain < self.classes || !self.samples_per_domain.is_multiple_of(self.classes) {
            return bad(
                "samples_per_domain",
                format!(
                    "{} is not a positive multiple of the class count {}",
                    self.samples_per_domain, self.classes
                ),
            );
        }
        if self.source_params.is_empty() {
            return bad("source_params", "need at least one source domain".into());
        }
        let all = self.source_params.iter().chain([&self.unseen_param]);
        if all.clone().any(|p| !p.is_finite()) {
            return bad("source_params", "parameters must be finite".into());
        }
        if self.kind == GeneratorKind::SpuriousFeature && all.clone().any(|p| p.abs() > 1.0) {
            return bad("source_params", "correlations must lie in [-1, 1]".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise", format!("{} must be a finite non-negative number", self.noise));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return bad("radius", format!("{} must be positive", self.radius));
        }
        let lo = self.source_params.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.source_params.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let u = self.unseen_param;
        match self.placement {
            Some(Placement::Interpolated) if !(lo < u && u < hi) => {
                return bad("unseen_param", format!("{u} is not strictly inside ({lo}, {hi})"));
            }
            Some(Placement::Extrapolated) if lo <= u && u <= hi => {
                return bad("unseen_param", format!("{u} is not strictly outside [{lo}, {hi}]"));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Rotates the first two coordinates of every row by `degrees`.
pub fn rotate2d(x: &Tensor, degrees: f64) -> Result<Tensor> {
    x.require_matrix("rotate2d")?;
    if x.cols() < 2 {
        return Err(Error::dim("rotate2d", x.shape(), &[x.rows(), 2]));
    }
    let (s, c) = degrees.to_radians().sin_cos();
    let mut out = x.clone();
    let d = x.cols();
    for row in out.data_mut().chunks_mut(d) {
        let (a, b) = (row[0], row[1]);
        row[0] = c * a - s * b;
        row[1] = s * a + c * b;
    }
    Ok(out)
}

fn domain_name(index: usize, sources: usize) -> String {
    if index < sources {
        format!("source{index}")
    } else {
        "unseen".to_string()
    }
}

fn params_with_unseen(spec: &ScenarioSpec) -> impl Iterator<Item = (usize, f64)> + '_ {
    spec.source_params
        .iter()
        .copied()
        .chain([spec.unseen_param])
        .enumerate()
}

/// Sources in order, then the unseen domain last.
pub fn gen_rotated_gaussians(spec: &ScenarioSpec) -> Result<Vec<DomainDataset>> {
    if spec.kind != GeneratorKind::RotatedGaussians {
        return Err(Error::invalid("scenario.kind", "expected rotated-gaussians"));
    }
    spec.validate()?;
    let k = spec.classes;
    let d = spec.input_dim;
    let m = spec.samples_per_domain;
    params_with_unseen(spec)
        .map(|(index, angle)| {
            let mut rng = Rng::substream(spec.seed, &[tags::DOMAIN, index as u64]);
            let mut data = Vec::with_capacity(m * d);
            let mut y = Vec::with_capacity(m);
            for i in 0..m {
                let label = i % k;
                let theta = std::f64::consts::TAU * label as f64 / k as f64;
                data.push(spec.radius * theta.cos() + spec.noise * rng.normal());
                data.push(spec.radius * theta.sin() + spec.noise * rng.normal());
                for _ in 2..d {
                    data.push(spec.noise * rng.normal());
                }
                y.push(label);
            }
            let x = rotate2d(&Tensor::new(vec![m, d], data)?, angle)?;
            DomainDataset::new(domain_name(index, spec.sources()), x, y, k)
        })
        .collect()
}

/// Sources in order, then the unseen domain last.
///
/// With `s = ±1` the signed label: feature 0 is `s + noise·ε`, identical in
/// every domain; feature 1 is `ρ·s + sqrt(1 − ρ²)·ε`, so its correlation
/// with the label is exactly `ρ`; remaining features are `noise·ε`.
pub fn gen_spurious_feature(spec: &ScenarioSpec) -> Result<Vec<DomainDataset>> {
    if spec.kind != GeneratorKind::SpuriousFeature {
        return Err(Error::invalid("scenario.kind", "expected spurious-feature"));
    }
    spec.validate()?;
    let d = spec.input_dim;
    let m = spec.samples_per_domain;
    params_with_unseen(spec)
        .map(|(index, rho)| {
            let mut rng = Rng::substream(spec.seed, &[tags::DOMAIN, index as u64]);
            let spread = (1.0 - rho * rho).max(0.0).sqrt();
            let mut data = Vec::with_capacity(m * d);
            let mut y = Vec::with_capacity(m);
            for i in 0..m {
                let label = i % 2;
                let s = if label == 1 { 1.0 } else { -1.0 };
                data.push(s + spec.noise * rng.normal());
                data.push(rho * s + spread * rng.normal());
                for _ in 2..d {
                    data.push(spec.noise * rng.normal());
                }
                y.push(label);
            }
            DomainDataset::new(domain_name(index, spec.sources()), Tensor::new(vec![m, d], data)?, y, 2)
        })
        .collect()
}

pub fn generate(spec: &ScenarioSpec) -> Result<Vec<DomainDataset>> {
    match spec.kind {
        GeneratorKind::RotatedGaussians => gen_rotated_gaussians(spec),
        GeneratorKind::SpuriousFeature => gen_spurious_feature(spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rotated(angles: Vec<f64>, unseen: f64, noise: f64) -> ScenarioSpec {
        ScenarioSpec {
            kind: GeneratorKind::RotatedGaussians,
            classes: 4,
            samples_per_domain: 400,
            input_dim: 5,
            source_params: angles,
            unseen_param: unseen,
            placement: None,
            noise,
            radius: 2.0,
            seed: 3,
        }
    }

    fn spurious(rhos: Vec<f64>, unseen: f64, m: usize) -> ScenarioSpec {
        ScenarioSpec {
            kind: GeneratorKind::SpuriousFeature,
            classes: 2,
            samples_per_domain: m,
            input_dim: 4,
            source_params: rhos,
            unseen_param: unseen,
            placement: None,
            noise: 1.0,
            radius: 1.0,
            seed: 11,
        }
    }

    fn column_moments(ds: &DomainDataset, col: usize) -> (f64, f64) {
        let v: Vec<f64> = (0..ds.len()).map(|r| ds.x.get(r, col)).collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn zero_angles_give_identically_distributed_domains() {
        let ds = gen_rotated_gaussians(&rotated(vec![0.0, 0.0], 0.0, 0.3)).unwrap();
        assert_eq!(ds.len(), 3);
        for col in 0..2 {
            let (m0, v0) = column_moments(&ds[0], col);
            let (m2, v2) = column_moments(&ds[2], col);
            assert!((m0 - m2).abs() < 0.1 && (v0 - v2).abs() < 0.3);
        }
    }

    #[test]
    fn rotation_inverse() {
        let ds = gen_rotated_gaussians(&rotated(vec![10.0, 50.0], 30.0, 0.5)).unwrap();
        let back = rotate2d(&rotate2d(&ds[0].x, 37.0).unwrap(), -37.0).unwrap();
        for (a, b) in back.data().iter().zip(ds[0].x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn class_means_approach_rotated_prototypes() {
        let angle: f64 = 30.0;
        let ds = gen_rotated_gaussians(&rotated(vec![angle, 60.0], 45.0, 1e-6)).unwrap();
        let src = &ds[0];
        for k in 0..4 {
            let rows: Vec<usize> = (0..src.len()).filter(|&r| src.y[r] == k).collect();
            let mx = rows.iter().map(|&r| src.x.get(r, 0)).sum::<f64>() / rows.len() as f64;
            let my = rows.iter().map(|&r| src.x.get(r, 1)).sum::<f64>() / rows.len() as f64;
            let phi = std::f64::consts::TAU * k as f64 / 4.0 + angle.to_radians();
            assert!((mx - 2.0 * phi.cos()).abs() < 1e-5);
            assert!((my - 2.0 * phi.sin()).abs() < 1e-5);
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let s = rotated(vec![0.0, 40.0], 20.0, 0.2);
        assert_eq!(gen_rotated_gaussians(&s).unwrap(), gen_rotated_gaussians(&s).unwrap());
        let mut s2 = s.clone();
        s2.seed += 1;
        assert_ne!(gen_rotated_gaussians(&s).unwrap(), gen_rotated_gaussians(&s2).unwrap());
    }

    #[test]
    fn spurious_correlation_matches_rho() {
        let rhos = vec![0.9, 0.3, -0.4];
        let ds = gen_spurious_feature(&spurious(rhos.clone(), -0.9, 10_000)).unwrap();
        for (d, &rho) in ds.iter().zip(rhos.iter().chain([&-0.9])) {
            let y: Vec<f64> = d.y.iter().map(|&l| l as f64).collect();
            let s: Vec<f64> = (0..d.len()).map(|r| d.x.get(r, 1)).collect();
            let n = y.len() as f64;
            let (my, ms) = (y.iter().sum::<f64>() / n, s.iter().sum::<f64>() / n);
            let cov: f64 = y.iter().zip(&s).map(|(a, b)| (a - my) * (b - ms)).sum();
            let vy: f64 = y.iter().map(|a| (a - my).powi(2)).sum();
            let vs: f64 = s.iter().map(|b| (b - ms).powi(2)).sum();
            let corr = cov / (vy * vs).sqrt();
            assert!((corr - rho).abs() < 0.05, "{} {corr} vs {rho}", d.name);
        }
    }

    #[test]
    fn spurious_limit_is_deterministic_feature() {
        let ds = gen_spurious_feature(&spurious(vec![1.0, -1.0], 1.0, 100)).unwrap();
        for r in 0..100 {
            let s = if ds[0].y[r] == 1 { 1.0 } else { -1.0 };
            assert_eq!(ds[0].x.get(r, 1), s);
            assert_eq!(ds[1].x.get(r, 1), -s);
        }
    }

    #[test]
    fn spurious_zero_rho_unseen_matches_sources() {
        let ds = gen_spurious_feature(&spurious(vec![0.0, 0.0], 0.0, 20_000)).unwrap();
        for col in 0..4 {
            let (m0, v0) = column_moments(&ds[0], col);
            let (mu, vu) = column_moments(&ds[2], col);
            assert!((m0 - mu).abs() < 0.05 && (v0 - vu).abs() < 0.1, "col {col}");
        }
    }

    #[test]
    fn validation_names_offending_field() {
        let mut s = spurious(vec![0.5], 0.1, 100);
        s.classes = 3;
        let msg = gen_spurious_feature(&s).unwrap_err().to_string();
        assert!(msg.contains("scenario.classes"), "{msg}");

        let mut s = rotated(vec![0.0, 30.0], 60.0, 0.1);
        s.placement = Some(Placement::Interpolated);
        let msg = gen_rotated_gaussians(&s).unwrap_err().to_string();
        assert!(msg.contains("scenario.unseen_param"), "{msg}");
        s.placement = Some(Placement::Extrapolated);
        assert!(gen_rotated_gaussians(&s).is_ok());
        s.unseen_param = 15.0;
        assert!(gen_rotated_gaussians(&s).is_err());

        let mut s = rotated(vec![0.0], 1.0, 0.1);
        s.samples_per_domain = 401;
        assert!(gen_rotated_gaussians(&s).unwrap_err().to_string().contains("samples_per_domain"));
    }

    #[test]
    fn classes_are_balanced() {
        let ds = gen_rotated_gaussians(&rotated(vec![0.0, 10.0], 5.0, 0.1)).unwrap();
        assert!(ds.iter().all(|d| d.class_counts() == vec![100; 4]));
    }
}
