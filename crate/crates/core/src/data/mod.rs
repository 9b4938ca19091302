//! Synthetic multi-domain datasets, splits, batch sampling and file IO.

mod generators;
mod io;
mod sampler;

pub use generators::{gen_rotated_gaussians, gen_spurious_feature, generate, rotate2d, GeneratorKind, Placement, ScenarioSpec};
pub use io::{dataset_decode, dataset_encode, dataset_read, dataset_write, DATASET_VERSION};
pub use sampler::BatchSampler;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{tags, Rng};

/// Labeled examples from one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl DomainDataset {
    /// Checks that labels are in range and every class is present.
    pub fn new(name: impl Into<String>, x: Tensor, y: Vec<usize>, classes: usize) -> Result<Self> {
        let name = name.into();
        x.require_matrix("DomainDataset")?;
        if x.rows() != y.len() {
            return Err(Error::dim("DomainDataset", x.shape(), &[y.len()]));
        }
        let counts = class_counts(&y, classes).map_err(|label| {
            Error::invalid(format!("dataset {name}"), format!("label {label} outside [0, {classes})"))
        })?;
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::invalid(format!("dataset {name}"), format!("class {k} has no examples")));
        }
        Ok(Self { name, x, y, classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        class_counts(&self.y, self.classes).expect("labels validated on construction")
    }

    fn subset(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
        }
    }
}

fn class_counts(y: &[usize], classes: usize) -> std::result::Result<Vec<usize>, usize> {
    let mut counts = vec![0; classes];
    for &label in y {
        *counts.get_mut(label).ok_or(label)? += 1;
    }
    Ok(counts)
}

/// Stratified split. Each class contributes `round(count · val_fraction)`
/// examples to validation, clamped so both sides keep at least one. Both
/// halves preserve the original example order.
pub fn split_train_val(ds: &DomainDataset, val_fraction: f64, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::invalid("val_fraction", format!("{val_fraction} is outside (0, 1)")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (i, &label) in ds.y.iter().enumerate() {
        by_class[label].push(i);
    }
    let mut rng = Rng::substream(seed, &[tags::SPLIT]);
    let mut is_val = vec![false; ds.len()];
    for (class, mut idx) in by_class.into_iter().enumerate() {
        if idx.len() < 2 {
            return Err(Error::Stratification {
                class,
                count: idx.len(),
            });
        }
        rng.shuffle(&mut idx);
        let n_val = ((idx.len() as f64 * val_fraction).round() as usize).clamp(1, idx.len() - 1);
        for &i in &idx[..n_val] {
            is_val[i] = true;
        }
    }
    let (val, train): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| is_val[i]);
    Ok((ds.subset(&train), ds.subset(&val)))
}
