//! Dataset file.
//!
//! ```text
//! "CMDS" | u32 version (=1) | u16 name length | UTF-8 name
//! | u64 M | u64 input_dim | u64 K | M × u32 labels | M·input_dim × f64 (row-major)
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use super::DomainDataset;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DATASET_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CMDS";

pub fn dataset_encode(ds: &DomainDataset) -> Result<Vec<u8>> {
    let name_len = u16::try_from(ds.name.len())
        .map_err(|_| Error::invalid("dataset name", "longer than 65535 bytes"))?;
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(DATASET_VERSION);
    w.u16(name_len);
    w.bytes(ds.name.as_bytes());
    w.u64(ds.len() as u64);
    w.u64(ds.input_dim() as u64);
    w.u64(ds.classes as u64);
    for &label in &ds.y {
        w.u32(label as u32);
    }
    w.f64s(ds.x.data());
    Ok(w.buf)
}

pub fn dataset_decode(bytes: &[u8]) -> Result<DomainDataset> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let name_len = r.u16("name length")? as usize;
    let name = r.utf8(name_len, "name")?;
    let header_at = r.offset();
    let m = r.len("example count")?;
    let dim = r.len("input_dim")?;
    let k = r.len("class count")?;
    if m == 0 || dim == 0 || k < 2 {
        return Err(Error::Format {
            offset: header_at,
            reason: format!("invalid header M={m} input_dim={dim} K={k}"),
        });
    }
    let labels_at = r.offset();
    let mut y = Vec::with_capacity(m.min(r.remaining() / 4));
    for _ in 0..m {
        y.push(r.u32("labels")? as usize);
    }
    let cells = m
        .checked_mul(dim)
        .ok_or_else(|| r.fail("M × input_dim overflows"))?;
    let x = r.f64s(cells, "features")?;
    r.finish()?;
    let x = Tensor::new(vec![m, dim], x).expect("length checked");
    DomainDataset::new(name, x, y, k).map_err(|e| Error::Format {
        offset: labels_at,
        reason: e.to_string(),
    })
}

pub fn dataset_write(ds: &DomainDataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, dataset_encode(ds)?)?;
    Ok(())
}

pub fn dataset_read(path: impl AsRef<Path>) -> Result<DomainDataset> {
    dataset_decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(m: usize, dim: usize, seed: u64) -> DomainDataset {
        let mut rng = Rng::new(seed);
        let x = Tensor::new(vec![m, dim], (0..m * dim).map(|_| rng.normal()).collect()).unwrap();
        DomainDataset::new("domain-é", x, (0..m).map(|i| i % 3).collect(), 3).unwrap()
    }

    #[test]
    fn roundtrip_bit_exact() {
        let ds = random(17, 4, 1);
        let back = dataset_decode(&dataset_encode(&ds).unwrap()).unwrap();
        assert!(back.x.bits_eq(&ds.x));
        assert_eq!(back.y, ds.y);
        assert_eq!(back.name, ds.name);
    }

    #[test]
    fn header_records_shape() {
        let ds = random(6, 9, 2);
        let bytes = dataset_encode(&ds).unwrap();
        let name_len = u16::from_le_bytes(bytes[8..10].try_into().unwrap()) as usize;
        let at = 10 + name_len;
        let dim = u64::from_le_bytes(bytes[at + 8..at + 16].try_into().unwrap());
        assert_eq!(dim, 9);
        assert_eq!(dataset_decode(&bytes).unwrap().input_dim(), 9);
    }

    #[test]
    fn truncated_payload() {
        let bytes = dataset_encode(&random(5, 2, 3)).unwrap();
        for cut in [2, 9, 20, bytes.len() - 3] {
            assert!(
                matches!(dataset_decode(&bytes[..cut]), Err(Error::Format { .. })),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn bad_label_is_format_error() {
        let mut bytes = dataset_encode(&random(5, 2, 3)).unwrap();
        let name_len = u16::from_le_bytes(bytes[8..10].try_into().unwrap()) as usize;
        let labels = 10 + name_len + 24;
        bytes[labels..labels + 4].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(dataset_decode(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.cmds");
        let ds = random(8, 3, 4);
        dataset_write(&ds, &p).unwrap();
        assert_eq!(dataset_read(&p).unwrap(), ds);
    }
}
