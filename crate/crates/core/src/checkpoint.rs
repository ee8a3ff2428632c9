//! Binary model checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic "KCRECKPT" | u32 version
//! str config echo  | str config digest | [32] graph digest
//! u64 adjacency count | per adjacency matrix: str relation name
//! u64 array count  | per array: str name, u64 rows, u64 cols, rows·cols f64
//! ```
//!
//! `str` is a u64 byte length followed by UTF-8.

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::hin::Hin;
use crate::model::{Model, PrototypeBank};
use crate::tensor::DenseMatrix;

pub const MAGIC: &[u8; 8] = b"KCRECKPT";
pub const VERSION: u32 = 1;
const FEATURES: &str = "features";

/// sha256 of a graph's shape signature.
pub fn graph_digest(hin: &Hin) -> [u8; 32] {
    Sha256::digest(hin.shape_signature().as_bytes()).into()
}

/// Everything needed to reproduce a trained model's predictions.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub prototypes: PrototypeBank,
    pub features: DenseMatrix,
    pub graph_digest: [u8; 32],
    /// Names of the adjacency matrices the model was built on.
    pub relation_names: Vec<String>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = &self.model.config;
        put_str(&mut out, &cfg.echo());
        put_str(&mut out, &cfg.digest());
        out.extend_from_slice(&self.graph_digest);
        out.extend_from_slice(&(self.relation_names.len() as u64).to_le_bytes());
        for name in &self.relation_names {
            put_str(&mut out, name);
        }
        let mut arrays: Vec<(&str, &DenseMatrix)> = self.model.store.iter().map(|(_, n, m)| (n, m)).collect();
        arrays.push((FEATURES, &self.features));
        for (name, slot) in PrototypeBank::NAMES.iter().zip(self.prototypes.slots()) {
            if let Some(m) = slot {
                arrays.push((name, m));
            }
        }
        out.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
        for (name, m) in arrays {
            put_str(&mut out, name);
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "not a kcrec checkpoint".into(),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Compatibility(format!(
                "checkpoint format version {version}, this build reads {VERSION}"
            )));
        }
        let echo_at = r.pos;
        let echo = r.str("config")?;
        let config = RunConfig::parse(&echo).map_err(|e| Error::Format {
            offset: echo_at,
            msg: format!("embedded config: {e}"),
        })?;
        let digest_at = r.pos;
        let digest = r.str("config digest")?;
        if digest != config.digest() {
            return Err(Error::Format {
                offset: digest_at,
                msg: "config digest does not match the embedded config".into(),
            });
        }
        let mut graph_digest = [0u8; 32];
        graph_digest.copy_from_slice(r.take(32, "graph digest")?);
        let adjacency_at = r.pos;
        let relations = r.u64("adjacency count")? as usize;
        if relations > r.remaining() / 8 {
            return Err(Error::Format {
                offset: adjacency_at,
                msg: format!("{relations} relation names overrun the file"),
            });
        }
        let relation_names = (0..relations).map(|_| r.str("relation name")).collect::<Result<Vec<_>>>()?;
        let mut model = Model::new(&config, relations).map_err(|e| Error::Format {
            offset: adjacency_at,
            msg: format!("cannot rebuild model: {e}"),
        })?;
        let count = r.u64("array count")?;
        let mut features = None;
        let mut prototypes = PrototypeBank::default();
        let mut filled = vec![false; model.store.len()];
        for _ in 0..count {
            let at = r.pos;
            let name = r.str("array name")?;
            let rows = r.u64("rows")? as usize;
            let cols = r.u64("cols")? as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| r.error(format!("array `{name}` of {rows}×{cols} overruns the file")))?;
            let raw = r.take(n * 8, "array values")?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let m = DenseMatrix::from_vec(rows, cols, values)?;
            let bad = |msg: String| Error::Format { offset: at, msg };
            if name == FEATURES {
                features = Some(m);
            } else if let Some(i) = PrototypeBank::NAMES.iter().position(|&p| p == name) {
                *prototypes.slots_mut()[i] = Some(m);
            } else if let Some(id) = model.store.find(&name) {
                if model.store.get(id).shape() != m.shape() {
                    return Err(bad(format!(
                        "`{name}` is {rows}×{cols}, the config implies {:?}",
                        model.store.get(id).shape()
                    )));
                }
                *model.store.get_mut(id) = m;
                filled[id.0] = true;
            } else {
                return Err(bad(format!("unknown array `{name}`")));
            }
        }
        if r.remaining() != 0 {
            return Err(r.error(format!("{} trailing bytes", r.remaining())));
        }
        if let Some(i) = filled.iter().position(|f| !f) {
            return Err(r.error(format!("missing parameter `{}`", model.store.name(crate::tensor::ParamId(i)))));
        }
        let features = features.ok_or_else(|| r.error("missing features".into()))?;
        Ok(Self {
            model,
            prototypes,
            features,
            graph_digest,
            relation_names,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Refuses graphs whose node counts or relations differ from training.
    pub fn check_graph(&self, hin: &Hin) -> Result<()> {
        if graph_digest(hin) != self.graph_digest {
            return Err(Error::Compatibility(format!(
                "dataset shape `{}` does not match the checkpoint's graph",
                hin.shape_signature()
            )));
        }
        Ok(())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn error(&self, msg: String) -> Error {
        Error::Format { offset: self.pos, msg }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        if n > self.remaining() {
            return Err(self.error(format!("truncated {what}: need {n} bytes, {} left", self.remaining())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let len = self.u64(what)?;
        let len = usize::try_from(len)
            .ok()
            .filter(|&l| l <= self.remaining())
            .ok_or_else(|| Error::Format {
                offset: at,
                msg: format!("{what} length {len} overruns the file"),
            })?;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: at + 8,
            msg: format!("{what} is not UTF-8"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hin::{synth_graph, SynthConfig};
    use crate::pipeline::{initial_features, prepare};

    fn small() -> (Hin, Checkpoint) {
        let hin = synth_graph(&SynthConfig {
            groups: 2,
            users_per_group: 4,
            concepts_per_group: 3,
            courses: 2,
            videos: 2,
            teachers: 1,
            p_in: 0.6,
            seed: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut cfg = RunConfig::default();
        for (k, v) in [("d0", "6"), ("d1", "4"), ("d_fused", "4"), ("prototypes_user", "2"), ("prototypes_concept", "2")] {
            cfg.set(k, v).unwrap();
        }
        let f = initial_features(&hin, &cfg, None).unwrap();
        let p = prepare(&hin, f.clone(), &cfg).unwrap();
        let model = Model::new(&cfg, p.inputs.implicit.adjacency.len()).unwrap();
        let prototypes = model.refresh_prototypes(&p.inputs, 3).unwrap();
        let ckpt = Checkpoint {
            model,
            prototypes,
            features: f,
            graph_digest: graph_digest(&hin),
            relation_names: hin.relation_names().to_vec(),
        };
        (hin, ckpt)
    }

    #[test]
    fn round_trip_is_exact() {
        let (hin, c) = small();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.model.store, c.model.store);
        assert_eq!(back.prototypes, c.prototypes);
        assert_eq!(back.features, c.features);
        assert_eq!(back.to_bytes(), bytes);
        back.check_graph(&hin).unwrap();
    }

    #[test]
    fn truncation_names_offset() {
        let (_, c) = small();
        let bytes = c.to_bytes();
        for cut in [3, 12, 40, bytes.len() / 2, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn version_mismatch_refused() {
        let (_, c) = small();
        let mut bytes = c.to_bytes();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Compatibility(_))));
    }

    #[test]
    fn other_graph_refused() {
        let (_, c) = small();
        let other = synth_graph(&SynthConfig::default()).unwrap();
        assert!(matches!(c.check_graph(&other), Err(Error::Compatibility(_))));
    }
}
