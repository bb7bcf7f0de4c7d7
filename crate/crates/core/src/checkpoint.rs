//! Binary checkpoints.
//!
//! Layout (all integers little-endian u32):
//!
//! ```text
//! "SMCK" | version | spec_len | spec JSON (sorted keys)
//! | count | count × (name_len | name | ndim | dims...)
//! | payload: f32 values of every tensor in manifest order
//! | CRC32 of payload
//! ```
//!
//! The manifest lists every learnable tensor as `layers.{i}.{weight,bias,gamma,beta}`
//! followed, for batch-norm layers with initialized statistics, by
//! `layers.{i}.running_mean` and `layers.{i}.running_var`.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Model, ModelSpec};
use crate::norms::RunningStats;

pub const MAGIC: &[u8; 4] = b"SMCK";
pub const VERSION: u32 = 1;

struct Entry {
    name: String,
    shape: Vec<usize>,
}

/// Canonical JSON text of a model spec: object keys sorted, no whitespace.
pub fn canonical_spec(spec: &ModelSpec) -> Result<String> {
    // serde_json's default map is ordered by key
    let value = serde_json::to_value(spec).map_err(|e| Error::Format(e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| Error::Format(e.to_string()))
}

fn running_name(layer: usize, field: &str) -> String {
    format!("layers.{layer}.running_{field}")
}

/// Expected manifest for a model: parameters, then running statistics.
fn tensors(model: &Model<f32>) -> Vec<(Entry, Vec<f32>)> {
    let mut out: Vec<(Entry, Vec<f32>)> = model
        .params()
        .into_iter()
        .map(|p| {
            (
                Entry {
                    name: p.name,
                    shape: p.tensor.shape().to_vec(),
                },
                p.tensor.data().to_vec(),
            )
        })
        .collect();
    for (layer, stats) in model.running_stats() {
        if let Some(s) = stats {
            for (field, values) in [("mean", &s.mean), ("var", &s.var)] {
                out.push((
                    Entry {
                        name: running_name(layer, field),
                        shape: vec![values.len()],
                    },
                    values.clone(),
                ));
            }
        }
    }
    out
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serialize a model to checkpoint bytes.
pub fn encode(model: &Model<f32>) -> Result<Vec<u8>> {
    let spec = canonical_spec(model.spec())?;
    let entries = tensors(model);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut buf, spec.len())?;
    buf.extend_from_slice(spec.as_bytes());
    put_u32(&mut buf, entries.len())?;
    for (e, _) in &entries {
        put_u32(&mut buf, e.name.len())?;
        buf.extend_from_slice(e.name.as_bytes());
        put_u32(&mut buf, e.shape.len())?;
        for &d in &e.shape {
            put_u32(&mut buf, d)?;
        }
    }
    let payload_start = buf.len();
    for (_, values) in &entries {
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf[payload_start..]);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                needed: n,
                offset: self.pos,
                len: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
}

/// Parse checkpoint bytes back into a model.
pub fn decode(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let spec_len = r.len()?;
    let spec_text = std::str::from_utf8(r.take(spec_len)?).map_err(|_| Error::Checkpoint("spec is not UTF-8".into()))?;
    let spec: ModelSpec =
        serde_json::from_str(spec_text).map_err(|e| Error::Checkpoint(format!("model spec: {e}")))?;
    let mut model = Model::<f32>::new(spec, 0)?;

    let count = r.len()?;
    let mut manifest = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.len()?;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = r.len()?;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.len()?);
        }
        manifest.push(Entry { name, shape });
    }

    let total: usize = manifest.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let payload = r.take(total * 4)?;
    let stored = r.u32()?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after CRC", bytes.len() - r.pos)));
    }
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Crc { stored, computed });
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));

    let params: Vec<(String, Vec<usize>)> = model
        .params()
        .into_iter()
        .map(|p| (p.name, p.tensor.shape().to_vec()))
        .collect();
    let mut entries = manifest.iter();
    for (i, (name, shape)) in params.iter().enumerate() {
        let e = entries.next().ok_or_else(|| Error::Manifest {
            tensor: name.clone(),
            message: "missing from manifest".into(),
        })?;
        if &e.name != name {
            return Err(Error::Manifest {
                tensor: e.name.clone(),
                message: format!("expected {name} at position {i}"),
            });
        }
        if &e.shape != shape {
            return Err(Error::Manifest {
                tensor: name.clone(),
                message: format!("shape {:?} does not match model {:?}", e.shape, shape),
            });
        }
        let mut params = model.params_mut();
        for (dst, v) in params[i].data_mut().iter_mut().zip(&mut values) {
            *dst = v;
        }
    }

    let bn: Vec<(usize, usize)> = model
        .running_stats()
        .into_iter()
        .map(|(layer, _)| (layer, model.norm_channels(layer).unwrap_or(0)))
        .collect();
    let rest: Vec<&Entry> = entries.collect();
    let mut k = 0;
    for (layer, channels) in bn {
        let mean_name = running_name(layer, "mean");
        if rest.get(k).is_none_or(|e| e.name != mean_name) {
            continue;
        }
        let var_name = running_name(layer, "var");
        let var_entry = rest.get(k + 1).filter(|e| e.name == var_name).ok_or_else(|| Error::Manifest {
            tensor: var_name.clone(),
            message: "running mean without running variance".into(),
        })?;
        for e in [rest[k], *var_entry] {
            if e.shape != [channels] {
                return Err(Error::Manifest {
                    tensor: e.name.clone(),
                    message: format!("shape {:?} does not match {channels} channels", e.shape),
                });
            }
        }
        let mean: Vec<f32> = (&mut values).take(channels).collect();
        let var: Vec<f32> = (&mut values).take(channels).collect();
        model
            .set_running_stats(layer, Some(RunningStats { mean, var }))
            .map_err(|e| Error::Manifest {
                tensor: var_name.clone(),
                message: e.to_string(),
            })?;
        k += 2;
    }
    if let Some(e) = rest.get(k) {
        return Err(Error::Manifest {
            tensor: e.name.clone(),
            message: "not part of the model".into(),
        });
    }
    if !model.params().iter().all(|p| p.tensor.all_finite()) {
        return Err(Error::Checkpoint("non-finite parameter values".into()));
    }
    Ok(model)
}

/// Write a checkpoint atomically: a temporary file in the target directory
/// is renamed over `path` once fully written.
pub fn save(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(model)?;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_shapes, NoiseSpec, Split};
    use crate::norms::{Mode, NormKind};
    use crate::optim::SgdConfig;
    use crate::trainer::{self, TrainPlan};

    fn trained_bn() -> Model<f32> {
        let data = synth_shapes(2, 4, 8, 1, Split::Train).unwrap();
        let m = Model::new(ModelSpec::conv_net([1, 8, 8], &[2], NormKind::Batch, None, 2), 3).unwrap();
        let sgd = SgdConfig {
            base_lr: 0.01,
            momentum: 0.9,
            epochs: 1,
            warmup_epochs: 0,
            batch_size: 4,
        };
        trainer::pretrain(m, &data, None, &TrainPlan::pretrain(NoiseSpec::clean(0), sgd, 0))
            .map_err(|f| f.error)
            .unwrap()
            .model
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let m = trained_bn();
        let bytes = encode(&m).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back).unwrap(), bytes);
        for (a, b) in m.params().iter().zip(back.params()) {
            let bits = |t: &[f32]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a.tensor.data()), bits(b.tensor.data()));
        }
        let x = synth_shapes(2, 1, 8, 9, Split::Test).unwrap().images;
        assert_eq!(m.forward(&x, Mode::Eval).unwrap(), back.forward(&x, Mode::Eval).unwrap());
    }

    #[test]
    fn spec_json_has_sorted_keys() {
        let m = Model::<f32>::new(ModelSpec::conv_net([1, 8, 8], &[2], NormKind::Group, Some(1), 2), 0).unwrap();
        let text = canonical_spec(m.spec()).unwrap();
        assert!(text.starts_with(r#"{"input_channels":1,"input_height":8,"input_width":8,"layers":[{"in_channels":1,"kind":"conv2d""#), "{text}");
        assert!(!text.contains('.'), "floats leaked into spec: {text}");
    }

    #[test]
    fn corrupted_payload_fails_crc() {
        let mut bytes = encode(&trained_bn()).unwrap();
        let i = bytes.len() - 10;
        bytes[i] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(Error::Crc { .. })));
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = encode(&trained_bn()).unwrap();
        for cut in [3, 10, 200, bytes.len() - 1] {
            let err = decode(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Truncated { .. }), "{cut}: {err}");
            assert!(err.to_string().starts_with("truncated checkpoint"));
        }
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = encode(&trained_bn()).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::UnsupportedVersion { found: 2, supported: 1 })));
    }

    #[test]
    fn manifest_mismatch_names_tensor() {
        let mut bytes = encode(&trained_bn()).unwrap();
        let needle = b"layers.0.bias";
        let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        bytes[at + 9] = b'B';
        match decode(&bytes) {
            Err(Error::Manifest { tensor, .. }) => assert_eq!(tensor, "layers.0.Bias"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn save_and_load_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.smck");
        let m = trained_bn();
        save(&m, &path).unwrap();
        save(&m, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), encode(&m).unwrap());
        assert_eq!(load(&path).unwrap().param_checksum(|_| true), m.param_checksum(|_| true));
        assert!(matches!(load(dir.path().join("missing")), Err(Error::Io { .. })));
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn uninitialized_stats_are_omitted() {
        let m = Model::<f32>::new(ModelSpec::conv_net([1, 8, 8], &[2], NormKind::Batch, None, 2), 0).unwrap();
        let back = decode(&encode(&m).unwrap()).unwrap();
        assert!(back.running_stats().iter().all(|(_, s)| s.is_none()));
    }
}
