use super::DomainDataset;
use crate::error::{Error, Result};
use crate::losses::DomainBatch;
use crate::rng::{tags, Rng};

struct Stream {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Stream {
    fn next_index(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let i = self.order[self.pos];
        self.pos += 1;
        i
    }
}

/// Draws one mini-batch per domain from independent shuffled cycles.
///
/// Each domain walks a random permutation of its examples and reshuffles
/// when the permutation is exhausted, so within a cycle every example is
/// drawn exactly once. A batch may span two cycles.
pub struct BatchSampler {
    datasets: Vec<DomainDataset>,
    streams: Vec<Stream>,
}

impl BatchSampler {
    pub fn new(datasets: Vec<DomainDataset>, seed: u64) -> Result<Self> {
        if datasets.is_empty() {
            return Err(Error::Contract("BatchSampler needs at least one dataset".into()));
        }
        let streams = datasets
            .iter()
            .enumerate()
            .map(|(i, ds)| {
                let mut rng = Rng::substream(seed, &[tags::SAMPLER, i as u64]);
                let mut order: Vec<usize> = (0..ds.len()).collect();
                rng.shuffle(&mut order);
                Stream { order, pos: 0, rng }
            })
            .collect();
        Ok(Self { datasets, streams })
    }

    pub fn datasets(&self) -> &[DomainDataset] {
        &self.datasets
    }

    /// One batch of exactly `batch_size` examples per domain, in domain order.
    pub fn sample_batches(&mut self, batch_size: usize) -> Result<Vec<DomainBatch>> {
        if batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        self.streams
            .iter_mut()
            .zip(&self.datasets)
            .enumerate()
            .map(|(i, (stream, ds))| {
                let idx: Vec<usize> = (0..batch_size).map(|_| stream.next_index()).collect();
                let y = idx.iter().map(|&j| ds.y[j]).collect();
                DomainBatch::new(i, ds.x.select_rows(&idx), y)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn ds(m: usize) -> DomainDataset {
        let x = Tensor::new(vec![m, 1], (0..m).map(|i| i as f64).collect()).unwrap();
        DomainDataset::new("d", x, (0..m).map(|i| i % 2).collect(), 2).unwrap()
    }

    fn ids(b: &DomainBatch) -> Vec<usize> {
        b.x.data().iter().map(|&v| v as usize).collect()
    }

    #[test]
    fn full_batch_is_permutation() {
        let mut s = BatchSampler::new(vec![ds(10), ds(10)], 1).unwrap();
        let batches = s.sample_batches(10).unwrap();
        for b in &batches {
            let mut v = ids(b);
            v.sort_unstable();
            assert_eq!(v, (0..10).collect::<Vec<_>>());
        }
        assert_eq!(batches[1].domain_index, 1);
    }

    #[test]
    fn one_cycle_covers_every_example_once() {
        let mut s = BatchSampler::new(vec![ds(12)], 5).unwrap();
        let mut seen = Vec::new();
        for _ in 0..4 {
            seen.extend(ids(&s.sample_batches(3).unwrap()[0]));
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn identical_seed_identical_batches() {
        let mut a = BatchSampler::new(vec![ds(9), ds(7)], 3).unwrap();
        let mut b = BatchSampler::new(vec![ds(9), ds(7)], 3).unwrap();
        for _ in 0..5 {
            assert_eq!(a.sample_batches(4).unwrap(), b.sample_batches(4).unwrap());
        }
    }

    #[test]
    fn batch_larger_than_dataset_wraps() {
        let mut s = BatchSampler::new(vec![ds(4)], 0).unwrap();
        let b = s.sample_batches(10).unwrap();
        assert_eq!(b[0].len(), 10);
        let v = ids(&b[0]);
        let mut first: Vec<usize> = v[..4].to_vec();
        first.sort_unstable();
        assert_eq!(first, vec![0, 1, 2, 3]);
    }

    #[test]
    fn zero_batch_size_rejected() {
        let mut s = BatchSampler::new(vec![ds(4)], 0).unwrap();
        assert!(s.sample_batches(0).is_err());
    }
}
