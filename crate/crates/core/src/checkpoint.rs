//! Binary checkpoint container.
//!
//! ```text
//! "BDAS" | version u16 | entry count u32
//! per entry: name length u16 | UTF-8 name | rank u8 | dims u32 * rank | f64 * prod(dims)
//! CRC32 of everything above
//! ```
//!
//! All integers and floats are little-endian. Parameters are stored under
//! `param.<name>`; the training config, epoch and loss history are stored as
//! numeric `config.*` / `meta.*` entries.

use std::fs;
use std::path::Path;

use crate::encoders::{DimensionSpec, ModelParams};
use crate::error::{Error, Result};
use crate::graph::GammaMode;
use crate::losses::{LossBreakdown, LossConfig, TermFlags};
use crate::tensor::Tensor;
use crate::trainer::{Checkpoint, TrainConfig};

pub const MAGIC: &[u8; 4] = b"BDAS";
pub const VERSION: u16 = 1;

fn push_entry(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for d in &t.shape {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn vector(values: Vec<f64>) -> Tensor {
    Tensor {
        shape: vec![values.len()],
        data: values,
    }
}

fn config_entries(c: &TrainConfig) -> Vec<(String, Tensor)> {
    let d = &c.dims;
    let l = &c.loss;
    vec![
        (
            "config.schedule".into(),
            vector(vec![
                c.epochs as f64,
                c.triplets_per_epoch as f64,
                c.batch_size as f64,
                c.learning_rate,
                c.momentum,
            ]),
        ),
        (
            "config.loss".into(),
            vector(vec![
                l.beta,
                l.lambda,
                l.mu,
                l.t_pos,
                l.t_neg,
                l.enable_global_adversarial as u8 as f64,
            ]),
        ),
        (
            "config.switches".into(),
            vector(vec![
                c.flags.bits() as f64,
                c.use_gcn as u8 as f64,
                match c.gamma_mode {
                    GammaMode::Dissimilarity => 0.0,
                    GammaMode::Similarity => 1.0,
                },
            ]),
        ),
        (
            "config.dims".into(),
            vector(
                [
                    d.grid,
                    d.channels,
                    d.hidden,
                    d.latent,
                    d.codec,
                    d.semantic,
                    d.semantic_hidden,
                    d.gcn_hidden,
                    d.num_seen,
                ]
                .iter()
                .map(|&v| v as f64)
                .collect(),
            ),
        ),
        // split so no bits are lost to the f64 mantissa
        (
            "config.seed".into(),
            vector(vec![(c.seed >> 32) as f64, (c.seed & 0xffff_ffff) as f64]),
        ),
    ]
}

pub fn checkpoint_to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut entries: Vec<(String, Tensor)> = ck
        .params
        .tensors
        .iter()
        .map(|(k, v)| (format!("param.{k}"), v.clone()))
        .collect();
    entries.extend(config_entries(&ck.config));
    entries.push(("meta.epoch".into(), vector(vec![ck.epoch as f64])));
    entries.push((
        "meta.history".into(),
        Tensor {
            shape: vec![ck.history.len(), 7],
            data: ck.history.iter().flat_map(|h| h.values).collect(),
        },
    ));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in &entries {
        push_entry(&mut out, name, t);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn field(entries: &[(String, Tensor)], name: &str, len: usize) -> Result<Vec<f64>> {
    let t = entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Format(format!("missing entry {name}")))?;
    if t.len() != len {
        return Err(Error::Format(format!("entry {name} has {} values, expected {len}", t.len())));
    }
    Ok(t.data.clone())
}

fn as_count(v: f64, what: &str) -> Result<usize> {
    if v.is_finite() && v >= 0.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::Format(format!("{what} is not a count: {v}")))
    }
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).map_err(|_| Error::Format("not a checkpoint".into()))? != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            supported: VERSION,
        });
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("entry too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        entries.push((name, Tensor { shape, data }));
    }
    let body_end = r.pos;
    let stored = r.u32()?;
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after checksum".into()));
    }
    let computed = crc32fast::hash(&buf[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let s = field(&entries, "config.schedule", 5)?;
    let l = field(&entries, "config.loss", 6)?;
    let sw = field(&entries, "config.switches", 3)?;
    let d = field(&entries, "config.dims", 9)?;
    let seed = field(&entries, "config.seed", 2)?;
    let dims = DimensionSpec {
        grid: as_count(d[0], "grid")?,
        channels: as_count(d[1], "channels")?,
        hidden: as_count(d[2], "hidden")?,
        latent: as_count(d[3], "latent")?,
        codec: as_count(d[4], "codec")?,
        semantic: as_count(d[5], "semantic")?,
        semantic_hidden: as_count(d[6], "semantic_hidden")?,
        gcn_hidden: as_count(d[7], "gcn_hidden")?,
        num_seen: as_count(d[8], "num_seen")?,
    };
    let config = TrainConfig {
        epochs: as_count(s[0], "epochs")?,
        triplets_per_epoch: as_count(s[1], "triplets_per_epoch")?,
        batch_size: as_count(s[2], "batch_size")?,
        learning_rate: s[3],
        momentum: s[4],
        loss: LossConfig {
            beta: l[0],
            lambda: l[1],
            mu: l[2],
            t_pos: l[3],
            t_neg: l[4],
            enable_global_adversarial: l[5] != 0.0,
        },
        flags: TermFlags::from_bits(as_count(sw[0], "flags")? as u8),
        use_gcn: sw[1] != 0.0,
        gamma_mode: if sw[2] == 0.0 {
            GammaMode::Dissimilarity
        } else {
            GammaMode::Similarity
        },
        dims,
        seed: ((as_count(seed[0], "seed")? as u64) << 32) | as_count(seed[1], "seed")? as u64,
    };
    let epoch = as_count(field(&entries, "meta.epoch", 1)?[0], "epoch")?;
    let hist = entries
        .iter()
        .find(|(n, _)| n == "meta.history")
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Format("missing entry meta.history".into()))?;
    if hist.shape.len() != 2 || hist.shape[1] != 7 || hist.shape[0] != epoch {
        return Err(Error::Format(format!("history shape {:?} for epoch {epoch}", hist.shape)));
    }
    let history = hist
        .data
        .chunks_exact(7)
        .map(|c| LossBreakdown {
            values: c.try_into().expect("7 values"),
        })
        .collect();
    let params = ModelParams {
        tensors: entries
            .into_iter()
            .filter_map(|(n, t)| n.strip_prefix("param.").map(|k| (k.to_string(), t)))
            .collect(),
    };
    params.check_shapes(&config.dims)?;
    Ok(Checkpoint {
        params,
        config,
        epoch,
        history,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, GeneratorSpec};
    use crate::trainer::train;

    fn trained() -> Checkpoint {
        let b = generate_synthetic_dataset(&GeneratorSpec::default()).unwrap();
        let c = TrainConfig {
            epochs: 2,
            triplets_per_epoch: 32,
            seed: u64::MAX - 12345,
            gamma_mode: GammaMode::Similarity,
            ..TrainConfig::default()
        };
        train(&b, &c).unwrap()
    }

    #[test]
    fn round_trip_is_value_identical() {
        let ck = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bdas");
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        for (name, t) in &ck.params.tensors {
            let a: Vec<u64> = t.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.params.get(name).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(checkpoint_to_bytes(&back), checkpoint_to_bytes(&ck));
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = checkpoint_to_bytes(&trained());

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(checkpoint_from_bytes(&bad_magic), Err(Error::Format(_))));

        let mut newer = bytes.clone();
        newer[4..6].copy_from_slice(&2u16.to_le_bytes());
        assert!(matches!(
            checkpoint_from_bytes(&newer),
            Err(Error::Version { found: 2, supported: 1 })
        ));

        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(checkpoint_from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }

        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x10;
        assert!(matches!(checkpoint_from_bytes(&flipped), Err(Error::Checksum { .. })));
    }

    #[test]
    fn header_layout() {
        let ck = trained();
        let bytes = checkpoint_to_bytes(&ck);
        assert_eq!(&bytes[..4], b"BDAS");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        let count = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        assert_eq!(count, ck.params.tensors.len() + 7);
        let body = &bytes[..bytes.len() - 4];
        let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        assert_eq!(crc, crc32fast::hash(body));
    }
}
