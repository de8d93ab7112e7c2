//! Model container.
//!
//! ```text
//! "XVDM" | header_len u32 LE | header (UTF-8 JSON) | parameter block
//! ```
//!
//! The parameter block is a run of little-endian `f64`s. The header lists
//! every tensor with its shape and byte offset into the block, plus the
//! metadata needed to rebuild the model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{
    Architecture, DenoiserModel, DenoiserVariant, InputScaling, StackedDaeModel, CONCAT_ORDER,
};
use crate::error::{Error, Result};
use crate::nnet::{Activation, DenseLayer, Network};
use crate::plda::{PldaModel, PldaParams, Preprocessing};
use crate::tensor::{Matrix, Vector};

pub const MAGIC: &[u8; 4] = b"XVDM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Denoiser,
    Plda,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the parameter block.
    pub offset: u64,
}

impl TensorEntry {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessingInfo {
    pub center: bool,
    pub length_norm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub format_version: u32,
    pub kind: ModelKind,
    /// `dae` or `stacked`; denoisers only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<String>,
    pub dim: usize,
    /// Layers of each block, in order; denoisers only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub blocks: Vec<Vec<LayerInfo>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concat_order: Option<Vec<String>>,
    /// PLDA only; the mean lives in the `preprocessing.mean` tensor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocessing: Option<PreprocessingInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    pub param_count: u64,
    pub tensors: Vec<TensorEntry>,
}

/// Provenance stored alongside the parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelMeta {
    pub seed: Option<u64>,
    pub config: Option<serde_json::Value>,
}

#[derive(Default)]
struct BlockWriter {
    tensors: Vec<TensorEntry>,
    data: Vec<f64>,
}

impl BlockWriter {
    fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.tensors.push(TensorEntry {
            name: name.into(),
            shape,
            offset: (self.data.len() * 8) as u64,
        });
        self.data.extend_from_slice(values);
    }

    fn push_matrix(&mut self, name: impl Into<String>, m: &Matrix) {
        self.push(name, vec![m.rows(), m.cols()], m.as_slice());
    }
}

/// Joins a header value and a raw parameter block into container bytes.
pub fn join_container(header: &serde_json::Value, block: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let len =
        u32::try_from(json.len()).map_err(|_| Error::Format("model header too large".into()))?;
    let mut out = Vec::with_capacity(8 + json.len() + block.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(block);
    Ok(out)
}

/// Splits container bytes into the raw header value and the parameter block.
pub fn split_container<'a>(bytes: &'a [u8], path: &Path) -> Result<(serde_json::Value, &'a [u8])> {
    let parse = |offset: usize, detail: String| Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail,
    };
    if bytes.len() < 8 {
        return Err(parse(
            0,
            format!("truncated model file ({} bytes)", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(parse(0, "bad magic, expected \"XVDM\"".into()));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let end = 8usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| parse(4, format!("header length {len} exceeds file size")))?;
    let header = serde_json::from_slice(&bytes[8..end])
        .map_err(|e| parse(8, format!("header is not valid JSON: {e}")))?;
    Ok((header, &bytes[end..]))
}

fn encode(header: &ModelHeader, data: &[f64]) -> Result<Vec<u8>> {
    let block: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    join_container(&serde_json::to_value(header)?, &block)
}

struct Loaded {
    header: ModelHeader,
    data: Vec<f64>,
}

impl Loaded {
    fn tensor(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let entry = self
            .header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("model file lacks tensor `{name}`")))?;
        if entry.shape != shape {
            return Err(Error::Format(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                entry.shape
            )));
        }
        let start = (entry.offset / 8) as usize;
        Ok(&self.data[start..start + entry.len()])
    }

    fn vector(&self, name: &str, n: usize) -> Result<Vector> {
        Ok(Vector(self.tensor(name, &[n])?.to_vec()))
    }

    fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::from_vec(rows, cols, self.tensor(name, &[rows, cols])?.to_vec())
    }
}

fn decode(bytes: &[u8], path: &Path, want: ModelKind) -> Result<Loaded> {
    let (value, block) = split_container(bytes, path)?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Format("model header has no format_version".into()))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(Error::UnsupportedVersion {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            supported: FORMAT_VERSION,
        });
    }
    let header: ModelHeader = serde_json::from_value(value)
        .map_err(|e| Error::Format(format!("malformed model header: {e}")))?;
    if header.kind != want {
        return Err(Error::Format(format!(
            "model file holds a {:?} model, expected {want:?}",
            header.kind
        )));
    }
    if block.len() % 8 != 0 || (block.len() / 8) as u64 != header.param_count {
        return Err(Error::Format(format!(
            "parameter block is {} bytes but the header declares {} parameters ({} bytes)",
            block.len(),
            header.param_count,
            header.param_count.saturating_mul(8)
        )));
    }
    let mut covered = 0u64;
    for t in &header.tensors {
        let n = t.len() as u64;
        if t.offset % 8 != 0 || t.offset / 8 + n > header.param_count {
            return Err(Error::Format(format!(
                "tensor `{}` (offset {}, {} values) lies outside the parameter block",
                t.name, t.offset, n
            )));
        }
        covered += n;
    }
    if covered != header.param_count {
        return Err(Error::Format(format!(
            "tensors cover {covered} values, header declares {}",
            header.param_count
        )));
    }
    let data = block
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Loaded { header, data })
}

fn layer_infos(net: &Network) -> Vec<LayerInfo> {
    net.layers()
        .iter()
        .map(|l| LayerInfo {
            in_dim: l.weights.cols(),
            out_dim: l.weights.rows(),
            activation: l.activation,
        })
        .collect()
}

pub fn serialize_denoiser(model: &DenoiserModel, meta: &ModelMeta) -> Result<Vec<u8>> {
    let nets: Vec<&Network> = match &model.variant {
        DenoiserVariant::Plain(n) => vec![n],
        DenoiserVariant::Stacked(s) => s.blocks().iter().collect(),
    };
    let mut w = BlockWriter::default();
    for (b, net) in nets.iter().enumerate() {
        for (l, layer) in net.layers().iter().enumerate() {
            w.push_matrix(format!("block{b}.layer{l}.weight"), &layer.weights);
            w.push(
                format!("block{b}.layer{l}.bias"),
                vec![layer.bias.dim()],
                &layer.bias,
            );
        }
    }
    w.push("scaling.mean", vec![model.dim()], &model.scaling.mean);
    w.push("scaling.scale", vec![1], &[model.scaling.scale]);
    let arch = model.architecture();
    let header = ModelHeader {
        format_version: FORMAT_VERSION,
        kind: ModelKind::Denoiser,
        architecture: Some(arch.tag().to_string()),
        dim: model.dim(),
        blocks: nets.iter().map(|n| layer_infos(n)).collect(),
        concat_order: (arch == Architecture::Stacked)
            .then(|| CONCAT_ORDER.iter().map(|s| s.to_string()).collect()),
        preprocessing: None,
        seed: meta.seed,
        config: meta.config.clone(),
        param_count: w.data.len() as u64,
        tensors: w.tensors,
    };
    encode(&header, &w.data)
}

pub fn deserialize_denoiser(bytes: &[u8], path: &Path) -> Result<(DenoiserModel, ModelMeta)> {
    let loaded = decode(bytes, path, ModelKind::Denoiser)?;
    let h = &loaded.header;
    let tag = h
        .architecture
        .as_deref()
        .ok_or_else(|| Error::Format("denoiser header has no architecture".into()))?;
    let arch: Architecture = tag.parse()?;
    if arch == Architecture::Stacked {
        let expected: Vec<String> = CONCAT_ORDER.iter().map(|s| s.to_string()).collect();
        if h.concat_order.as_ref() != Some(&expected) {
            return Err(Error::Format(format!(
                "unsupported concat order {:?}, expected {expected:?}",
                h.concat_order
            )));
        }
    }
    let mut nets = Vec::with_capacity(h.blocks.len());
    for (b, infos) in h.blocks.iter().enumerate() {
        let layers = infos
            .iter()
            .enumerate()
            .map(|(l, info)| {
                DenseLayer::new(
                    loaded.matrix(
                        &format!("block{b}.layer{l}.weight"),
                        info.out_dim,
                        info.in_dim,
                    )?,
                    loaded.vector(&format!("block{b}.layer{l}.bias"), info.out_dim)?,
                    info.activation,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        nets.push(Network::new(layers)?);
    }
    let variant = match arch {
        Architecture::Dae => {
            if nets.len() != 1 {
                return Err(Error::Format(format!(
                    "plain denoiser with {} blocks",
                    nets.len()
                )));
            }
            DenoiserVariant::Plain(nets.pop().expect("one block"))
        }
        Architecture::Stacked => DenoiserVariant::Stacked(StackedDaeModel::new(nets)?),
    };
    let scaling = InputScaling {
        mean: loaded.vector("scaling.mean", h.dim)?,
        scale: loaded.tensor("scaling.scale", &[1])?[0],
    };
    let model = DenoiserModel::new(variant, scaling)?;
    if model.dim() != h.dim {
        return Err(Error::Format(format!(
            "header dim {} but layers imply {}",
            h.dim,
            model.dim()
        )));
    }
    let meta = ModelMeta {
        seed: h.seed,
        config: h.config.clone(),
    };
    Ok((model, meta))
}

pub fn serialize_plda(model: &PldaModel, meta: &ModelMeta) -> Result<Vec<u8>> {
    let p = &model.params;
    let mut w = BlockWriter::default();
    w.push("mu", vec![p.mu.dim()], &p.mu);
    w.push_matrix("between", &p.between);
    w.push_matrix("within", &p.within);
    w.push(
        "preprocessing.mean",
        vec![model.preprocessing.mean.dim()],
        &model.preprocessing.mean,
    );
    let header = ModelHeader {
        format_version: FORMAT_VERSION,
        kind: ModelKind::Plda,
        architecture: None,
        dim: model.dim(),
        blocks: Vec::new(),
        concat_order: None,
        preprocessing: Some(PreprocessingInfo {
            center: model.preprocessing.center,
            length_norm: model.preprocessing.length_norm,
        }),
        seed: meta.seed,
        config: meta.config.clone(),
        param_count: w.data.len() as u64,
        tensors: w.tensors,
    };
    encode(&header, &w.data)
}

pub fn deserialize_plda(bytes: &[u8], path: &Path) -> Result<(PldaModel, ModelMeta)> {
    let loaded = decode(bytes, path, ModelKind::Plda)?;
    let h = &loaded.header;
    let d = h.dim;
    let pre = h
        .preprocessing
        .as_ref()
        .ok_or_else(|| Error::Format("PLDA header has no preprocessing".into()))?;
    let params = PldaParams {
        mu: loaded.vector("mu", d)?,
        between: loaded.matrix("between", d, d)?,
        within: loaded.matrix("within", d, d)?,
    };
    let preprocessing = Preprocessing {
        center: pre.center,
        length_norm: pre.length_norm,
        mean: loaded.vector("preprocessing.mean", d)?,
    };
    let meta = ModelMeta {
        seed: h.seed,
        config: h.config.clone(),
    };
    Ok((PldaModel::new(params, preprocessing)?, meta))
}

pub fn save_denoiser(model: &DenoiserModel, meta: &ModelMeta, path: &Path) -> Result<()> {
    super::write_atomic(path, &serialize_denoiser(model, meta)?)
}

pub fn load_denoiser(path: &Path) -> Result<(DenoiserModel, ModelMeta)> {
    deserialize_denoiser(&super::read_bytes(path)?, path)
}

pub fn save_plda(model: &PldaModel, meta: &ModelMeta, path: &Path) -> Result<()> {
    super::write_atomic(path, &serialize_plda(model, meta)?)
}

pub fn load_plda(path: &Path) -> Result<(PldaModel, ModelMeta)> {
    deserialize_plda(&super::read_bytes(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{build_dae, build_stacked_blocks, stacked_forward};
    use crate::rng;

    fn p() -> &'static Path {
        Path::new("m.xvdm")
    }

    fn stacked_model() -> DenoiserModel {
        let s = build_stacked_blocks(4, 6, 3, 9).unwrap();
        let scaling = InputScaling {
            mean: Vector(vec![0.1, -0.2, 0.3, 0.0]),
            scale: 1.7,
        };
        DenoiserModel::new(DenoiserVariant::Stacked(s), scaling).unwrap()
    }

    fn random_rows(n: usize, d: usize, seed: u64) -> Matrix {
        let mut r = rng::seeded(seed);
        Matrix::from_vec(
            n,
            d,
            (0..n * d).map(|_| 3.0 * rng::normal(&mut r)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn stacked_round_trip_is_bit_exact() {
        let m = stacked_model();
        let meta = ModelMeta {
            seed: Some(9),
            config: Some(serde_json::json!({"epochs": 3})),
        };
        let bytes = serialize_denoiser(&m, &meta).unwrap();
        let (back, back_meta) = deserialize_denoiser(&bytes, p()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back_meta, meta);
        assert_eq!(serialize_denoiser(&back, &back_meta).unwrap(), bytes);
        let x = random_rows(100, 4, 1);
        let (a, b) = (m.apply(&x).unwrap(), back.apply(&x).unwrap());
        assert!(a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(u, v)| u.to_bits() == v.to_bits()));
        if let (DenoiserVariant::Stacked(s0), DenoiserVariant::Stacked(s1)) =
            (&m.variant, &back.variant)
        {
            for row in x.row_iter() {
                assert_eq!(
                    stacked_forward(s0, row).unwrap(),
                    stacked_forward(s1, row).unwrap()
                );
            }
        } else {
            panic!("variant changed");
        }
    }

    #[test]
    fn plain_round_trip() {
        let m = DenoiserModel::new(
            DenoiserVariant::Plain(build_dae(3, 5, 2).unwrap()),
            InputScaling::identity(3),
        )
        .unwrap();
        let bytes = serialize_denoiser(&m, &ModelMeta::default()).unwrap();
        assert_eq!(deserialize_denoiser(&bytes, p()).unwrap().0, m);
        assert!(matches!(
            deserialize_plda(&bytes, p()),
            Err(Error::Format(_))
        ));
    }

    fn tamper(bytes: &[u8], f: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
        let (mut h, block) = split_container(bytes, p()).unwrap();
        f(&mut h);
        join_container(&h, block).unwrap()
    }

    #[test]
    fn header_tampering_is_detected() {
        let bytes = serialize_denoiser(&stacked_model(), &ModelMeta::default()).unwrap();
        let off_by_one = tamper(&bytes, |h| {
            let n = h["param_count"].as_u64().unwrap();
            h["param_count"] = (n + 1).into();
        });
        assert!(matches!(
            deserialize_denoiser(&off_by_one, p()),
            Err(Error::Format(_))
        ));

        let future = tamper(&bytes, |h| h["format_version"] = 2.into());
        assert!(matches!(
            deserialize_denoiser(&future, p()),
            Err(Error::UnsupportedVersion {
                found: 2,
                supported: 1
            })
        ));

        let unknown = tamper(&bytes, |h| h["architecture"] = "lstm".into());
        assert!(
            matches!(deserialize_denoiser(&unknown, p()), Err(Error::Format(m)) if m.contains("lstm"))
        );

        let truncated = &bytes[..bytes.len() - 8];
        assert!(deserialize_denoiser(truncated, p()).is_err());
        assert!(matches!(
            deserialize_denoiser(&bytes[..6], p()),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn plda_round_trip() {
        let params = PldaParams {
            mu: Vector(vec![0.5, -1.0]),
            between: Matrix::from_rows(&[vec![2.0, 0.3], vec![0.3, 1.0]]).unwrap(),
            within: Matrix::from_rows(&[vec![1.0, 0.1], vec![0.1, 0.5]]).unwrap(),
        };
        let pre = Preprocessing {
            center: true,
            length_norm: false,
            mean: Vector(vec![0.25, 0.125]),
        };
        let m = PldaModel::new(params, pre).unwrap();
        let bytes = serialize_plda(&m, &ModelMeta::default()).unwrap();
        let (back, _) = deserialize_plda(&bytes, p()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.preprocessing, m.preprocessing);
        assert_eq!(serialize_plda(&back, &ModelMeta::default()).unwrap(), bytes);
    }
}
