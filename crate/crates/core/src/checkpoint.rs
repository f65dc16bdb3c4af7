//! Binary checkpoint container.
//!
//! Layout (all integers and reals little-endian):
//!
//! ```text
//! "POCO"                         magic
//! u32                            format version (currently 1)
//! u32 len + bytes                config hash (hex)
//! u32 len + bytes                variant name
//! u32 len + bytes                model-section TOML (dimension check)
//! u64                            iteration counter
//! u32                            stage (1 or 2)
//! u64                            batch-stream draw counter
//! u64                            optimizer step counter
//! u32 n                          array table size
//! n × (u32 len + name,           name table: each entry carries the
//!      u32 ndim, ndim × u64)     array's name and shape
//! f64 × Σ elems                  array payloads, in table order
//! ```
//!
//! Parameter arrays are stored under their registry names; optimizer
//! moment buffers under `adam.m.<name>` / `adam.v.<name>`. Reals pass
//! through as raw IEEE-754 bits, so save → load → restore reproduces
//! training bitwise. Writes go to a temporary sibling file first and
//! are renamed into place, so a crash mid-write never corrupts an
//! existing checkpoint.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::ArrayD;

use crate::autodiff::{Adam, Tape, Value};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"POCO";
const VERSION: u32 = 1;

/// A materialized training state: everything needed to resume or
/// evaluate, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub variant: String,
    pub model_toml: String,
    pub iteration: u64,
    pub stage: u32,
    /// How many draws the training batch stream has consumed (replayed
    /// on resume to restore the stream position).
    pub rng_drawn: u64,
    pub adam_t: u64,
    /// (name, shape, data) for parameters and optimizer moments.
    pub arrays: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    /// Snapshots parameter data and optimizer moments from a tape.
    pub fn capture(
        tape: &Tape,
        params: &[(String, Value)],
        adam: Option<&Adam>,
        config_hash: &str,
        variant: &str,
        model_toml: &str,
        iteration: u64,
        stage: u32,
        rng_drawn: u64,
    ) -> Checkpoint {
        let mut arrays = Vec::new();
        for (name, v) in params {
            let data = tape.data(*v);
            arrays.push((
                name.clone(),
                data.shape().to_vec(),
                data.iter().cloned().collect(),
            ));
        }
        if let Some(adam) = adam {
            for (name, v) in params {
                if let Some((m, mv)) = adam.moments(*v) {
                    arrays.push((
                        format!("adam.m.{name}"),
                        m.shape().to_vec(),
                        m.iter().cloned().collect(),
                    ));
                    arrays.push((
                        format!("adam.v.{name}"),
                        mv.shape().to_vec(),
                        mv.iter().cloned().collect(),
                    ));
                }
            }
        }
        Checkpoint {
            config_hash: config_hash.to_string(),
            variant: variant.to_string(),
            model_toml: model_toml.to_string(),
            iteration,
            stage,
            rng_drawn,
            adam_t: adam.map(|a| a.t()).unwrap_or(0),
            arrays,
        }
    }

    fn find(&self, name: &str) -> Option<&(String, Vec<usize>, Vec<f64>)> {
        self.arrays.iter().find(|(n, _, _)| n == name)
    }

    /// Writes stored parameter data back into live tape nodes and, when
    /// given an optimizer, its moment buffers and step counter. Every
    /// target parameter must be present with a matching shape, and every
    /// stored parameter array must land somewhere — silent drift between
    /// a checkpoint and the model it claims to restore is an error.
    pub fn restore(
        &self,
        tape: &mut Tape,
        params: &[(String, Value)],
        adam: Option<&mut Adam>,
    ) -> Result<()> {
        for (name, v) in params {
            let (_, shape, data) = self.find(name).ok_or_else(|| {
                Error::CheckpointMismatch(format!("parameter {name} missing from checkpoint"))
            })?;
            if tape.data(*v).shape() != shape.as_slice() {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter {name}: checkpoint shape {:?} vs model shape {:?}",
                    shape,
                    tape.data(*v).shape()
                )));
            }
            let arr = ArrayD::from_shape_vec(shape.clone(), data.clone())
                .expect("shape/data length verified at decode");
            tape.set_data(*v, arr);
        }
        for (name, _, _) in &self.arrays {
            if !name.starts_with("adam.") && !params.iter().any(|(n, _)| n == name) {
                return Err(Error::CheckpointMismatch(format!(
                    "checkpoint array {name} has no matching model parameter"
                )));
            }
        }
        if let Some(adam) = adam {
            adam.set_t(self.adam_t);
            for (name, v) in params {
                let m = self.find(&format!("adam.m.{name}"));
                let mv = self.find(&format!("adam.v.{name}"));
                if let (Some((_, ms, md)), Some((_, vs, vd))) = (m, mv) {
                    adam.set_moments(
                        *v,
                        ArrayD::from_shape_vec(ms.clone(), md.clone()).unwrap(),
                        ArrayD::from_shape_vec(vs.clone(), vd.clone()).unwrap(),
                    );
                }
            }
        }
        Ok(())
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for s in [&self.config_hash, &self.variant, &self.model_toml] {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.stage.to_le_bytes());
        out.extend_from_slice(&self.rng_drawn.to_le_bytes());
        out.extend_from_slice(&self.adam_t.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, shape, _) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
        }
        for (_, _, data) in &self.arrays {
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    fn decode(bytes: &[u8], path: &str) -> Result<Checkpoint> {
        let mut r = Reader {
            bytes,
            at: 0,
            path,
        };
        if r.take(4)? != MAGIC {
            return Err(r.fail("bad magic (not a checkpoint file)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(&format!("unsupported version {version} (expected {VERSION})")));
        }
        let config_hash = r.string()?;
        let variant = r.string()?;
        let model_toml = r.string()?;
        let iteration = r.u64()?;
        let stage = r.u32()?;
        let rng_drawn = r.u64()?;
        let adam_t = r.u64()?;
        let n_arrays = r.u32()? as usize;
        let mut table: Vec<(String, Vec<usize>)> = Vec::with_capacity(n_arrays);
        for _ in 0..n_arrays {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(r.fail("implausible array rank (corrupt name table)"));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            table.push((name, shape));
        }
        let mut arrays = Vec::with_capacity(n_arrays);
        for (name, shape) in table {
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            arrays.push((name, shape, data));
        }
        if r.at != bytes.len() {
            return Err(r.fail("trailing bytes after payload"));
        }
        Ok(Checkpoint {
            config_hash,
            variant,
            model_toml,
            iteration,
            stage,
            rng_drawn,
            adam_t,
            arrays,
        })
    }

    /// Atomic save: write a temporary sibling, then rename over the
    /// target path.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode();
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)?;
        Self::decode(&bytes, &path.display().to_string())
    }
}

/// Bounds-checked cursor over the raw bytes; every read past the end
/// reports the file as truncated.
struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: &str) -> Error {
        Error::Format {
            path: self.path.to_string(),
            detail: detail.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(self.fail("truncated"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| self.fail("invalid utf-8 in header"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::Skeleton;
    use crate::config::ModelConfig;
    use crate::data::{generate, SourceSpec};
    use crate::losses::{loss_total, LossWeights, Variant};
    use crate::model::PocoModel;
    use ndarray::IxDyn;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            feature_dim: 24,
            cond_dim: 12,
            hidden_dim: 24,
            flow_hidden: 8,
            full_pose_flow: false,
            scale_grad_through_pose: false,
        }
    }

    fn trained_state(cfg: &ModelConfig, steps: usize) -> (Tape, PocoModel, Adam) {
        let mut tape = Tape::new();
        let model = PocoModel::new(&mut tape, cfg, Variant::Poco, Skeleton::toy(), 7);
        let mut adam = Adam::new(1e-3);
        let sk = Skeleton::toy();
        let spec = SourceSpec::from_config(&crate::config::SourceConfig::default());
        let batch = generate(&spec, &sk, 4, 123, 0);
        let handles: Vec<_> = model.params().iter().map(|(_, v)| *v).collect();
        for _ in 0..steps {
            tape.reset();
            let fwd = model.forward(&mut tape, &batch.inputs).unwrap();
            let pred = model.prediction(&fwd);
            let bd = loss_total(
                &mut tape,
                &pred,
                &batch.targets(),
                &LossWeights::default(),
                Variant::Poco,
            )
            .unwrap();
            tape.backward(bd.total).unwrap();
            adam.step(&mut tape, &handles);
        }
        (tape, model, adam)
    }

    #[test]
    fn save_load_restore_is_bitwise() {
        let cfg = small_cfg();
        let (tape, model, adam) = trained_state(&cfg, 3);
        let ckpt = Checkpoint::capture(
            &tape,
            model.params(),
            Some(&adam),
            "abcdef012345",
            "poco",
            "dims",
            42,
            1,
            99,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);

        // Restore into a freshly built (differently seeded) model.
        let mut tape2 = Tape::new();
        let model2 = PocoModel::new(&mut tape2, &cfg, Variant::Poco, Skeleton::toy(), 99);
        let mut adam2 = Adam::new(1e-3);
        loaded
            .restore(&mut tape2, model2.params(), Some(&mut adam2))
            .unwrap();
        assert_eq!(adam2.t(), adam.t());
        for ((n1, v1), (n2, v2)) in model.params().iter().zip(model2.params()) {
            assert_eq!(n1, n2);
            let a = tape.data(*v1);
            let b = tape2.data(*v2);
            assert!(
                a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
                "parameter {n1} not restored bitwise"
            );
            let (m1, mv1) = adam.moments(*v1).unwrap();
            let (m2, mv2) = adam2.moments(*v2).unwrap();
            assert_eq!(m1, m2);
            assert_eq!(mv1, mv2);
        }
        // The temporary file was renamed away.
        let entries: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(entries, vec![std::ffi::OsString::from("state.ckpt")]);
    }

    #[test]
    fn corrupt_files_are_rejected_with_reasons() {
        let cfg = small_cfg();
        let (tape, model, _) = trained_state(&cfg, 0);
        let ckpt = Checkpoint::capture(&tape, model.params(), None, "h", "poco", "m", 0, 1, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        ckpt.save(&path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let truncated = &good[..good.len() / 2];
        std::fs::write(&path, truncated).unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "got: {err}");

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "got: {err}");

        let mut bad_version = good.clone();
        bad_version[4] = 99;
        std::fs::write(&path, &bad_version).unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "got: {err}");

        let mut trailing = good.clone();
        trailing.push(0);
        std::fs::write(&path, &trailing).unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(err.contains("trailing"), "got: {err}");
    }

    #[test]
    fn restoring_into_a_different_model_is_an_error() {
        let cfg = small_cfg();
        let (tape, model, _) = trained_state(&cfg, 0);
        let ckpt = Checkpoint::capture(&tape, model.params(), None, "h", "poco", "m", 0, 1, 0);

        // Different feature width: shapes disagree.
        let mut tape2 = Tape::new();
        let wider = ModelConfig {
            feature_dim: 48,
            ..small_cfg()
        };
        let model2 = PocoModel::new(&mut tape2, &wider, Variant::Poco, Skeleton::toy(), 1);
        let err = ckpt
            .restore(&mut tape2, model2.params(), None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("shape"), "got: {err}");

        // Different variant: the gauss model has no flow parameters.
        let mut tape3 = Tape::new();
        let model3 = PocoModel::new(&mut tape3, &cfg, Variant::Gauss, Skeleton::toy(), 1);
        let err = ckpt
            .restore(&mut tape3, model3.params(), None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("no matching model parameter"), "got: {err}");

        // Missing array: checkpoint for gauss into a poco model.
        let ckpt_g = Checkpoint::capture(&tape3, model3.params(), None, "h", "gauss", "m", 0, 1, 0);
        let mut tape4 = Tape::new();
        let model4 = PocoModel::new(&mut tape4, &cfg, Variant::Poco, Skeleton::toy(), 1);
        let err = ckpt_g
            .restore(&mut tape4, model4.params(), None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("missing from checkpoint"), "got: {err}");
    }

    #[test]
    fn header_fields_survive_the_roundtrip() {
        let mut tape = Tape::new();
        let v = tape.persistent(ArrayD::from_elem(IxDyn(&[2, 3]), 1.5));
        let params = vec![("only.w".to_string(), v)];
        let ckpt = Checkpoint::capture(
            &tape, &params, None, "deadbeef0123", "nflow", "model-toml-here", 1234, 2, 777,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.config_hash, "deadbeef0123");
        assert_eq!(loaded.variant, "nflow");
        assert_eq!(loaded.model_toml, "model-toml-here");
        assert_eq!(loaded.iteration, 1234);
        assert_eq!(loaded.stage, 2);
        assert_eq!(loaded.rng_drawn, 777);
        assert_eq!(loaded.adam_t, 0);
        assert_eq!(loaded.arrays.len(), 1);
        assert_eq!(loaded.arrays[0].1, vec![2, 3]);
    }
}
