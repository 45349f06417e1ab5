//! Single-file model checkpoints.
//!
//! Layout: 8-byte magic, little-endian u32 header length, JSON header,
//! little-endian f32 arrays in manifest order, little-endian CRC32 of all
//! preceding bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{CgmmParams, Mixture, Sharing};
use crate::layers::{ClassifierParams, LayerSpec};
use crate::model::{parse_config, DcgmmModel, LayerParams, ModelConfig};
use crate::tensor::Shape3;

pub const MAGIC: [u8; 8] = *b"DCGMM\x00\x01\x00";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    name: String,
    arch: String,
    input_shape: Shape3,
    shapes: Vec<Shape3>,
    steps_seen: Vec<u64>,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    /// 1-based layer position.
    layer: usize,
    /// Mixture index within the layer (0 for shared and classifier layers).
    block: usize,
    name: String,
    dtype: String,
    /// Byte offset from the start of the array section.
    offset: usize,
    len: usize,
}

struct Writer {
    arrays: Vec<ArrayEntry>,
    payload: Vec<u8>,
}

impl Writer {
    fn push(&mut self, layer: usize, block: usize, name: &str, values: &[f32]) {
        self.arrays.push(ArrayEntry {
            layer: layer + 1,
            block,
            name: name.to_string(),
            dtype: "f32le".into(),
            offset: self.payload.len(),
            len: values.len(),
        });
        for v in values {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn to_bytes(model: &DcgmmModel) -> Vec<u8> {
    let mut w = Writer {
        arrays: Vec::new(),
        payload: Vec::new(),
    };
    for (layer, params) in model.params().iter().enumerate() {
        match params {
            LayerParams::Cgmm(p) => {
                for (block, m) in p.mixtures().iter().enumerate() {
                    w.push(layer, block, "logits", m.logits());
                    w.push(layer, block, "centroids", m.centroids());
                    w.push(layer, block, "log_precisions", m.log_precisions());
                }
            }
            LayerParams::Classifier(c) => {
                w.push(layer, 0, "weights", c.weights());
                w.push(layer, 0, "bias", c.bias());
            }
            LayerParams::None => {}
        }
    }
    let config = model.config();
    let header = Header {
        version: VERSION,
        name: config.name.clone(),
        arch: config.arch(),
        input_shape: config.input_shape,
        shapes: model.shapes().to_vec(),
        steps_seen: model.steps_seen().to_vec(),
        arrays: w.arrays,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + w.payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<DcgmmModel> {
    let fail = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < MAGIC.len() + 8 {
        return Err(fail("file too short".into()));
    }
    if bytes[..6] != MAGIC[..6] {
        return Err(fail("not a checkpoint file".into()));
    }
    if bytes[6..8] != MAGIC[6..8] {
        return Err(fail(format!(
            "unsupported format version {}.{}",
            bytes[6], bytes[7]
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(fail(
            "checksum mismatch (truncated or corrupted file)".into(),
        ));
    }
    let header_len = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
    let json = body
        .get(12..12 + header_len)
        .ok_or_else(|| fail("header length exceeds file".into()))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| fail(format!("bad header: {e}")))?;
    if header.version != VERSION {
        return Err(fail(format!(
            "unsupported header version {}",
            header.version
        )));
    }
    let payload = &body[12 + header_len..];
    let mut config: ModelConfig = parse_config(&header.arch, header.input_shape)
        .map_err(|e| fail(format!("bad architecture: {e}")))?;
    config.name = header.name.clone();
    if config.shapes()? != header.shapes {
        return Err(fail("stored shapes disagree with the architecture".into()));
    }
    let mut entries = header.arrays.iter();
    let mut next = |layer: usize, block: usize, name: &str| -> Result<Vec<f32>> {
        let e = entries
            .next()
            .ok_or_else(|| fail(format!("missing array {name} of layer {}", layer + 1)))?;
        if e.layer != layer + 1 || e.block != block || e.name != name || e.dtype != "f32le" {
            return Err(fail(format!(
                "unexpected array {} (layer {}, block {}), wanted {name}",
                e.name, e.layer, e.block
            )));
        }
        let raw = payload
            .get(e.offset..e.offset + 4 * e.len)
            .ok_or_else(|| fail(format!("array {name} of layer {} exceeds file", e.layer)))?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    };
    let shapes = config.shapes()?;
    let mut params = Vec::with_capacity(config.layers.len());
    for (layer, spec) in config.layers.iter().enumerate() {
        let input = shapes[layer];
        params.push(match *spec {
            LayerSpec::Cgmm { k, sharing } => {
                let copies = match sharing {
                    Sharing::Shared => 1,
                    Sharing::Independent => input.positions(),
                };
                let mut mixtures = Vec::with_capacity(copies);
                for block in 0..copies {
                    let logits = next(layer, block, "logits")?;
                    let centroids = next(layer, block, "centroids")?;
                    let log_precisions = next(layer, block, "log_precisions")?;
                    mixtures.push(Mixture::from_raw(
                        k,
                        input.c,
                        logits,
                        centroids,
                        log_precisions,
                    )?);
                }
                LayerParams::Cgmm(match sharing {
                    Sharing::Shared => CgmmParams::shared(mixtures.pop().expect("one mixture")),
                    Sharing::Independent => CgmmParams::independent(mixtures)?,
                })
            }
            LayerSpec::Classifier { classes } => {
                let weights = next(layer, 0, "weights")?;
                let bias = next(layer, 0, "bias")?;
                LayerParams::Classifier(ClassifierParams::from_parts(
                    input.len(),
                    classes,
                    weights,
                    bias,
                )?)
            }
            _ => LayerParams::None,
        });
    }
    if entries.next().is_some() {
        return Err(fail("unexpected extra arrays".into()));
    }
    DcgmmModel::from_parts(config, params, header.steps_seen).map_err(|e| fail(e.to_string()))
}

pub fn save(model: &DcgmmModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<DcgmmModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
