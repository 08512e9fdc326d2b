//! Model files.
//!
//! Layout (little-endian): `"BCIM"`, version u16, kind tag u8, u32 length +
//! TOML hyperparameters, u32 block count, blocks, u32 length + TOML
//! training metadata, CRC-64/XZ of everything before it. A block is u16
//! name length + UTF-8 name, dtype u8 (1 = f32, 2 = f64, 3 = u8), ndim u8,
//! ndim × u32 dims, then the packed values.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use super::{
    CnnParams, CnnSpec, Classifier, KnnModel, LdaModel, ModelConfig, ModelError, ModelKind, TrainedModel,
    TrainingMeta,
};
use super::cnn::{ConvParams, DenseParams};
use crate::dataset::{verify_checksum, write_atomic, ClassLabel, Cursor, DatasetError, CRC64};
use crate::features::NormStats;

pub const MODEL_MAGIC: &[u8; 4] = b"BCIM";
pub const MODEL_FORMAT_VERSION: u16 = 1;

const DT_F32: u8 = 1;
const DT_F64: u8 = 2;
const DT_U8: u8 = 3;

#[derive(Serialize, Deserialize)]
struct Hyper {
    config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cnn: Option<CnnSpec>,
}

#[derive(Debug, Clone, PartialEq)]
enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    dims: Vec<usize>,
    data: Data,
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Dataset(DatasetError::CorruptFile(msg.into()))
}

fn header_err(e: impl std::fmt::Display) -> ModelError {
    ModelError::Dataset(DatasetError::Header(e.to_string()))
}

#[derive(Default)]
struct Blocks(BTreeMap<String, Block>);

impl Blocks {
    fn f64(&mut self, name: &str, dims: &[usize], v: &[f64]) {
        self.0.insert(
            name.into(),
            Block {
                dims: dims.to_vec(),
                data: Data::F64(v.to_vec()),
            },
        );
    }

    fn u8(&mut self, name: &str, dims: &[usize], v: Vec<u8>) {
        self.0.insert(
            name.into(),
            Block {
                dims: dims.to_vec(),
                data: Data::U8(v),
            },
        );
    }

    fn get(&self, name: &str) -> Result<&Block, ModelError> {
        self.0.get(name).ok_or_else(|| corrupt(format!("missing block {name}")))
    }

    fn take_f64(&self, name: &str) -> Result<Vec<f64>, ModelError> {
        match &self.get(name)?.data {
            Data::F64(v) => Ok(v.clone()),
            Data::F32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            Data::U8(_) => Err(corrupt(format!("block {name} is not floating point"))),
        }
    }

    fn take_u8(&self, name: &str) -> Result<Vec<u8>, ModelError> {
        match &self.get(name)?.data {
            Data::U8(v) => Ok(v.clone()),
            _ => Err(corrupt(format!("block {name} is not u8"))),
        }
    }

    fn rows(&self, name: &str) -> Result<Vec<Vec<f64>>, ModelError> {
        let b = self.get(name)?;
        let v = self.take_f64(name)?;
        let width = *b.dims.last().unwrap_or(&1);
        if width == 0 {
            return Ok(Vec::new());
        }
        Ok(v.chunks(width).map(<[f64]>::to_vec).collect())
    }
}

fn labels_from(bytes: &[u8]) -> Result<Vec<ClassLabel>, ModelError> {
    bytes
        .iter()
        .map(|&b| ClassLabel::from_index(b as usize).ok_or_else(|| corrupt(format!("bad class {b}"))))
        .collect()
}

pub fn encode_model(c: &Classifier) -> Result<Vec<u8>, ModelError> {
    let mut blocks = Blocks::default();
    let n = &c.norm;
    let shape = [n.channels, n.bins];
    blocks.f64("norm.mean", &shape, &n.mean);
    blocks.f64("norm.std", &shape, &n.std);
    blocks.u8("norm.retained", &shape, n.retained.iter().map(|&r| r as u8).collect());

    let mut cnn_spec = None;
    match &c.model {
        TrainedModel::Knn(m) => {
            blocks.f64("knn.points", &[m.len(), m.dim], &m.points);
            blocks.u8("knn.labels", &[m.len()], m.labels.iter().map(|l| l.index() as u8).collect());
            blocks.u8("knn.k", &[8], (m.k as u64).to_le_bytes().to_vec());
        }
        TrainedModel::Lda(m) => {
            let k = m.classes.len();
            blocks.u8("lda.classes", &[k], m.classes.iter().map(|l| l.index() as u8).collect());
            blocks.f64("lda.means", &[k, m.dim], &m.means.concat());
            blocks.f64("lda.priors", &[k], &m.priors);
            blocks.f64("lda.weights", &[k, m.dim], &m.weights.concat());
            blocks.f64("lda.biases", &[k], &m.biases);
            blocks.f64("lda.shrinkage", &[1], &[m.shrinkage]);
        }
        TrainedModel::Cnn { spec, params } => {
            cnn_spec = Some(spec.clone());
            let f = spec.filters;
            for (i, conv) in params.convs.iter().enumerate() {
                let p = format!("conv{i}");
                blocks.f64(&format!("{p}.w"), &[f, spec.block_in_channels(i), spec.kernel], &conv.w);
                blocks.f64(&format!("{p}.b"), &[f], &conv.b);
                blocks.f64(&format!("{p}.gamma"), &[f], &conv.gamma);
                blocks.f64(&format!("{p}.beta"), &[f], &conv.beta);
                blocks.f64(&format!("{p}.running_mean"), &[f], &conv.running_mean);
                blocks.f64(&format!("{p}.running_var"), &[f], &conv.running_var);
                blocks.u8(&format!("{p}.frozen"), &[1], vec![conv.frozen as u8]);
            }
            for (name, d) in [("hidden", &params.hidden), ("output", &params.output)] {
                blocks.f64(&format!("{name}.w"), &[d.outputs(), d.inputs], &d.w);
                blocks.f64(&format!("{name}.b"), &[d.outputs()], &d.b);
                blocks.u8(&format!("{name}.frozen"), &[1], vec![d.frozen as u8]);
            }
        }
    }

    let hyper = toml::to_string(&Hyper {
        config: c.config.clone(),
        cnn: cnn_spec,
    })
    .map_err(header_err)?;
    let meta = toml::to_string(&c.meta).map_err(header_err)?;

    let mut b = Vec::new();
    b.extend_from_slice(MODEL_MAGIC);
    b.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    b.push(c.kind().tag());
    put_text(&mut b, &hyper)?;
    b.extend_from_slice(&(blocks.0.len() as u32).to_le_bytes());
    for (name, block) in &blocks.0 {
        put_block(&mut b, name, block)?;
    }
    put_text(&mut b, &meta)?;
    let crc = CRC64.checksum(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    Ok(b)
}

fn put_text(b: &mut Vec<u8>, s: &str) -> Result<(), ModelError> {
    let len = u32::try_from(s.len()).map_err(|_| corrupt("header too large"))?;
    b.extend_from_slice(&len.to_le_bytes());
    b.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_block(b: &mut Vec<u8>, name: &str, block: &Block) -> Result<(), ModelError> {
    b.extend_from_slice(&(name.len() as u16).to_le_bytes());
    b.extend_from_slice(name.as_bytes());
    let (dt, count) = match &block.data {
        Data::F32(v) => (DT_F32, v.len()),
        Data::F64(v) => (DT_F64, v.len()),
        Data::U8(v) => (DT_U8, v.len()),
    };
    if block.dims.iter().product::<usize>() != count {
        return Err(ModelError::ShapeMismatch(format!("block {name} dims disagree with data")));
    }
    b.push(dt);
    b.push(block.dims.len() as u8);
    for &d in &block.dims {
        b.extend_from_slice(&u32::try_from(d).map_err(|_| corrupt("dimension exceeds u32"))?.to_le_bytes());
    }
    match &block.data {
        Data::F32(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
        Data::F64(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
        Data::U8(v) => b.extend_from_slice(v),
    }
    Ok(())
}

fn read_text<'a>(c: &mut Cursor<'a>) -> Result<&'a str, ModelError> {
    let len = c.u32()? as usize;
    std::str::from_utf8(c.take(len)?).map_err(|e| corrupt(e.to_string()))
}

fn read_block(c: &mut Cursor<'_>) -> Result<(String, Block), ModelError> {
    let nlen = c.u16()? as usize;
    let name = std::str::from_utf8(c.take(nlen)?)
        .map_err(|e| corrupt(e.to_string()))?
        .to_string();
    let dt = c.u8()?;
    let ndim = c.u8()? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(c.u32()? as usize);
    }
    let count: usize = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| corrupt("block too large"))?;
    let data = match dt {
        DT_F32 => {
            let raw = c.take(count.checked_mul(4).ok_or_else(|| corrupt("block too large"))?)?;
            Data::F32(raw.chunks_exact(4).map(|x| f32::from_le_bytes(x.try_into().unwrap())).collect())
        }
        DT_F64 => {
            let raw = c.take(count.checked_mul(8).ok_or_else(|| corrupt("block too large"))?)?;
            Data::F64(raw.chunks_exact(8).map(|x| f64::from_le_bytes(x.try_into().unwrap())).collect())
        }
        DT_U8 => Data::U8(c.take(count)?.to_vec()),
        other => return Err(corrupt(format!("unknown dtype {other}"))),
    };
    Ok((name, Block { dims, data }))
}

pub fn decode_model(bytes: &[u8]) -> Result<Classifier, ModelError> {
    let body = verify_checksum(bytes, MODEL_MAGIC)?;
    let mut c = Cursor::new(body);
    c.take(6)?;
    let kind = ModelKind::from_tag(c.u8()?).ok_or_else(|| corrupt("unknown model kind"))?;
    let hyper: Hyper = toml::from_str(read_text(&mut c)?).map_err(header_err)?;
    let count = c.u32()?;
    let mut blocks = Blocks::default();
    for _ in 0..count {
        let (name, block) = read_block(&mut c)?;
        blocks.0.insert(name, block);
    }
    let meta: TrainingMeta = toml::from_str(read_text(&mut c)?).map_err(header_err)?;
    if c.remaining() != 0 {
        return Err(corrupt("trailing bytes"));
    }
    if hyper.config.kind != kind {
        return Err(corrupt("kind tag disagrees with hyperparameters"));
    }

    let shape = &blocks.get("norm.mean")?.dims;
    if shape.len() != 2 {
        return Err(corrupt("normalization block must be 2-D"));
    }
    let norm = NormStats {
        channels: shape[0],
        bins: shape[1],
        mean: blocks.take_f64("norm.mean")?,
        std: blocks.take_f64("norm.std")?,
        retained: blocks.take_u8("norm.retained")?.iter().map(|&b| b != 0).collect(),
    };
    if norm.std.len() != norm.mean.len() || norm.retained.len() != norm.mean.len() {
        return Err(corrupt("normalization blocks disagree"));
    }

    let model = match kind {
        ModelKind::Knn => {
            let dims = &blocks.get("knn.points")?.dims;
            let k_bytes = blocks.take_u8("knn.k")?;
            let k = u64::from_le_bytes(k_bytes.try_into().map_err(|_| corrupt("bad k"))?) as usize;
            let m = KnnModel {
                k,
                dim: *dims.get(1).ok_or_else(|| corrupt("knn.points must be 2-D"))?,
                points: blocks.take_f64("knn.points")?,
                labels: labels_from(&blocks.take_u8("knn.labels")?)?,
            };
            if m.labels.len() != dims[0] || k == 0 || k > m.labels.len() {
                return Err(corrupt("inconsistent KNN store"));
            }
            TrainedModel::Knn(m)
        }
        ModelKind::Lda => {
            let means = blocks.rows("lda.means")?;
            let m = LdaModel {
                dim: means.first().map_or(0, Vec::len),
                shrinkage: blocks.take_f64("lda.shrinkage")?.first().copied().unwrap_or(0.0),
                classes: labels_from(&blocks.take_u8("lda.classes")?)?,
                means,
                priors: blocks.take_f64("lda.priors")?,
                weights: blocks.rows("lda.weights")?,
                biases: blocks.take_f64("lda.biases")?,
            };
            let k = m.classes.len();
            if m.means.len() != k || m.weights.len() != k || m.biases.len() != k || m.priors.len() != k {
                return Err(corrupt("inconsistent LDA blocks"));
            }
            TrainedModel::Lda(m)
        }
        ModelKind::Cnn => {
            let spec = hyper.cnn.clone().ok_or_else(|| corrupt("missing CNN spec"))?;
            let spec = CnnSpec::custom(
                (spec.in_channels, spec.in_len),
                spec.n_convs,
                spec.filters,
                spec.kernel,
                spec.dense_len,
            )?;
            let frozen = |name: &str| -> Result<bool, ModelError> {
                Ok(blocks.take_u8(name)?.first().copied().unwrap_or(0) != 0)
            };
            let convs = (0..spec.n_convs)
                .map(|i| {
                    let p = format!("conv{i}");
                    Ok(ConvParams {
                        w: blocks.take_f64(&format!("{p}.w"))?,
                        b: blocks.take_f64(&format!("{p}.b"))?,
                        gamma: blocks.take_f64(&format!("{p}.gamma"))?,
                        beta: blocks.take_f64(&format!("{p}.beta"))?,
                        running_mean: blocks.take_f64(&format!("{p}.running_mean"))?,
                        running_var: blocks.take_f64(&format!("{p}.running_var"))?,
                        frozen: frozen(&format!("{p}.frozen"))?,
                    })
                })
                .collect::<Result<Vec<_>, ModelError>>()?;
            let dense = |name: &str| -> Result<DenseParams, ModelError> {
                let dims = &blocks.get(&format!("{name}.w"))?.dims;
                Ok(DenseParams {
                    w: blocks.take_f64(&format!("{name}.w"))?,
                    b: blocks.take_f64(&format!("{name}.b"))?,
                    inputs: *dims.get(1).ok_or_else(|| corrupt("dense weights must be 2-D"))?,
                    frozen: frozen(&format!("{name}.frozen"))?,
                })
            };
            let params = CnnParams {
                convs,
                hidden: dense("hidden")?,
                output: dense("output")?,
            };
            params.check_shapes(&spec)?;
            if (spec.in_channels, spec.in_len) != (norm.channels, norm.bins) {
                return Err(corrupt("CNN input shape disagrees with normalization"));
            }
            TrainedModel::Cnn { spec, params }
        }
    };
    Ok(Classifier {
        config: hyper.config,
        norm,
        model,
        meta,
    })
}

pub fn save_model(c: &Classifier, path: &Path) -> Result<(), ModelError> {
    Ok(write_atomic(path, &encode_model(c)?)?)
}

pub fn load_model(path: &Path) -> Result<Classifier, ModelError> {
    decode_model(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::tests::frames;
    use crate::models::train_classifier;

    #[test]
    fn round_trip_every_kind() {
        let data = frames(5, 2, 16);
        for kind in [ModelKind::Knn, ModelKind::Lda, ModelKind::Cnn] {
            let mut cfg = ModelConfig::new(kind);
            cfg.n_convs = 1;
            cfg.dense_len = 8;
            cfg.train.epochs = 2;
            let c = train_classifier(&data, &cfg).unwrap();
            let bytes = encode_model(&c).unwrap();
            assert_eq!(&bytes[..4], MODEL_MAGIC);
            assert_eq!(bytes[6], kind.tag());
            let back = decode_model(&bytes).unwrap();
            assert_eq!(back, c, "{kind}");
            for e in &data {
                assert_eq!(back.predict(&e.features).unwrap(), c.predict(&e.features).unwrap());
            }
        }
    }

    #[test]
    fn corruption_and_version() {
        let data = frames(3, 2, 16);
        let c = train_classifier(&data, &ModelConfig::new(ModelKind::Knn)).unwrap();
        let bytes = encode_model(&c).unwrap();
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x10;
        assert!(decode_model(&bad).is_err());
        assert!(decode_model(&bytes[..bytes.len() - 1]).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            decode_model(&v2),
            Err(ModelError::Dataset(DatasetError::FormatVersionMismatch { found: 2, .. }))
        ));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let data = frames(3, 2, 16);
        let c = train_classifier(&data, &ModelConfig::new(ModelKind::Lda)).unwrap();
        let path = dir.path().join("m.bcim");
        save_model(&c, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), c);
    }
}
