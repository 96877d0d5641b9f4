//! Binary model checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "CRKN" u32 version u32 channels u32 h u32 s u32 layers
//! per layer: u8 kind (0 conv, 1 dense), u32 rank, u32 dims[rank]
//! per layer: f32 weights, f32 biases
//! u64 iterations, u64 seed, u8 ratio tag (0 fixed, 1 natural), f64 ratio
//! u8 optimizer flag; if 1, per layer: u64 steps, f32 m_w, m_b, v_w, v_b
//! u64 FNV-1a checksum of everything above
//! ```

use std::path::Path;

use crate::dataset::{PatchGeometry, Ratio};
use crate::error::{Error, Result};
use crate::network::ModelParams;
use crate::tensor::{LayerKind, LayerParams, ParamGrads, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CRKN";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    /// Optimizer steps completed.
    pub iterations: u64,
    pub seed: u64,
    pub ratio: Ratio,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams<f32>,
    pub meta: CheckpointMeta,
    /// Whether Adam moments were stored (and restored into `model`).
    pub has_optimizer_state: bool,
}

impl Checkpoint {
    /// Errors when the stored network does not fit the requested run.
    pub fn expect(&self, channels: usize, structure: usize) -> Result<()> {
        if self.model.channels() != channels || self.model.geometry().structure != structure {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint was trained for C={} s={}, run requests C={channels} s={structure}",
                self.model.channels(),
                self.model.geometry().structure
            )));
        }
        Ok(())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} exceeds u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_floats(buf: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &ModelParams<f32>,
    meta: &CheckpointMeta,
    with_optimizer_state: bool,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut buf, model.channels())?;
    put_u32(&mut buf, model.geometry().half_width)?;
    put_u32(&mut buf, model.geometry().structure)?;
    put_u32(&mut buf, model.layers().len())?;
    for layer in model.layers() {
        buf.push(match layer.kind {
            LayerKind::Conv => 0,
            LayerKind::Dense => 1,
        });
        put_u32(&mut buf, layer.weights.rank())?;
        for &d in layer.weights.shape() {
            put_u32(&mut buf, d)?;
        }
    }
    for layer in model.layers() {
        put_floats(&mut buf, &layer.weights);
        put_floats(&mut buf, &layer.biases);
    }
    buf.extend_from_slice(&meta.iterations.to_le_bytes());
    buf.extend_from_slice(&meta.seed.to_le_bytes());
    let (tag, r) = match meta.ratio {
        Ratio::Fixed(r) => (0u8, r),
        Ratio::Natural => (1u8, 0.0),
    };
    buf.push(tag);
    buf.extend_from_slice(&r.to_le_bytes());
    buf.push(u8::from(with_optimizer_state));
    if with_optimizer_state {
        for layer in model.layers() {
            buf.extend_from_slice(&layer.step_count.to_le_bytes());
            for t in [
                &layer.adam_m.weights,
                &layer.adam_m.biases,
                &layer.adam_v.weights,
                &layer.adam_v.biases,
            ] {
                put_floats(&mut buf, t);
            }
        }
    }
    let sum = fnv1a(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());

    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptCheckpoint("file is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::CorruptCheckpoint("tensor size overflows".into()))?,
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::from_vec(shape, data)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::CorruptCheckpoint(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if fnv1a(body).to_le_bytes() != tail {
        return Err(Error::CorruptCheckpoint(format!(
            "{}: checksum mismatch",
            path.display()
        )));
    }
    let mut r = Reader {
        bytes: body,
        pos: 8,
    };
    let channels = r.u32()? as usize;
    let half_width = r.u32()? as usize;
    let structure = r.u32()? as usize;
    let geometry = PatchGeometry::new(half_width, structure)
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let n_layers = r.u32()? as usize;
    if n_layers > 64 {
        return Err(Error::CorruptCheckpoint(format!("{n_layers} layers")));
    }
    let mut plan = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let kind = match r.u8()? {
            0 => LayerKind::Conv,
            1 => LayerKind::Dense,
            k => return Err(Error::CorruptCheckpoint(format!("unknown layer kind {k}"))),
        };
        let rank = r.u32()? as usize;
        if rank > 4 {
            return Err(Error::CorruptCheckpoint(format!("rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        plan.push((kind, shape));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for (kind, shape) in &plan {
        let w = r.tensor(shape)?;
        let b = r.tensor(&[shape[0]])?;
        layers.push(LayerParams::new(*kind, w, b)?);
    }
    let iterations = r.u64()?;
    let seed = r.u64()?;
    let ratio = match (r.u8()?, r.f64()?) {
        (0, v) => Ratio::Fixed(v),
        (1, _) => Ratio::Natural,
        (t, _) => return Err(Error::CorruptCheckpoint(format!("ratio tag {t}"))),
    };
    let has_optimizer_state = match r.u8()? {
        0 => false,
        1 => true,
        f => return Err(Error::CorruptCheckpoint(format!("optimizer flag {f}"))),
    };
    if has_optimizer_state {
        for layer in &mut layers {
            layer.step_count = r.u64()?;
            let (ws, bs) = (
                layer.weights.shape().to_vec(),
                layer.biases.shape().to_vec(),
            );
            layer.adam_m = ParamGrads {
                weights: r.tensor(&ws)?,
                biases: r.tensor(&bs)?,
            };
            layer.adam_v = ParamGrads {
                weights: r.tensor(&ws)?,
                biases: r.tensor(&bs)?,
            };
        }
    }
    if r.pos != body.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    let model = ModelParams::from_layers(channels, geometry, layers)
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    Ok(Checkpoint {
        model,
        meta: CheckpointMeta {
            iterations,
            seed,
            ratio,
        },
        has_optimizer_state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, NetworkConfig};

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            iterations: 1234,
            seed: 77,
            ratio: Ratio::Fixed(3.0),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = build_network::<f32>(&NetworkConfig::default(), 5).unwrap();
        model.layers_mut()[2].adam_m.weights.fill(0.25);
        model.layers_mut()[2].step_count = 9;
        save_checkpoint(&path, &model, &meta(), true).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.model, model);
        assert_eq!(loaded.meta, meta());
        assert!(loaded.has_optimizer_state);

        save_checkpoint(&path, &model, &meta(), false).unwrap();
        let plain = load_checkpoint(&path).unwrap();
        assert!(!plain.has_optimizer_state);
        for (a, b) in plain.model.layers().iter().zip(model.layers()) {
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.biases, b.biases);
        }
    }

    #[test]
    fn truncation_and_corruption_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = build_network::<f32>(
            &NetworkConfig {
                input_channels: 1,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        save_checkpoint(&path, &model, &meta(), false).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CorruptCheckpoint(_))
        ));

        let mut flipped = bytes.clone();
        flipped[200] ^= 0x40;
        std::fs::write(&path, &flipped).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CorruptCheckpoint(_))
        ));

        let mut old = bytes.clone();
        old[4] = 0;
        std::fs::write(&path, &old).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointVersion { .. })
        ));

        std::fs::write(&path, b"not a model").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn run_mismatch_is_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = build_network::<f32>(&NetworkConfig::default(), 1).unwrap();
        save_checkpoint(&path, &model, &meta(), false).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert!(ck.expect(3, 5).is_ok());
        assert!(matches!(ck.expect(1, 5), Err(Error::ShapeMismatch(_))));
        assert!(matches!(ck.expect(3, 3), Err(Error::ShapeMismatch(_))));
    }
}
