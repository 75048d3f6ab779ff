//! Self-describing checkpoint: an 8-byte magic, a little-endian `u32`
//! header length, a JSON layer index, then every parameter as
//! little-endian `f64` in index order.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, Dense};
use super::model::{Extractor, LayerKind, Model, FC_LAYER};
use super::network::{ConvBlock, Network};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"BAMODEL\0";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    frozen_blocks: usize,
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    kind: LayerKind,
    inputs: usize,
    outputs: usize,
    kernel: usize,
    pool: bool,
    /// Offset into the parameter stream, in f64 values.
    offset: usize,
    /// Weight count followed by `outputs` biases.
    weights: usize,
}

fn encode(blocks: &[ConvBlock], fc: Option<&Dense>, frozen: usize) -> Result<Vec<u8>> {
    let mut layers = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    for b in blocks {
        layers.push(LayerEntry {
            name: b.name.clone(),
            kind: LayerKind::Conv,
            inputs: b.conv.in_channels(),
            outputs: b.conv.out_channels(),
            kernel: b.conv.kernel,
            pool: b.pool,
            offset: data.len(),
            weights: b.conv.weight.len(),
        });
        data.extend(b.conv.weight.iter());
        data.extend(b.conv.bias.iter());
    }
    if let Some(fc) = fc {
        layers.push(LayerEntry {
            name: FC_LAYER.into(),
            kind: LayerKind::Dense,
            inputs: fc.weight.ncols(),
            outputs: fc.weight.nrows(),
            kernel: 1,
            pool: false,
            offset: data.len(),
            weights: fc.weight.len(),
        });
        data.extend(fc.weight.iter());
        data.extend(fc.bias.iter());
    }
    let header = serde_json::to_vec(&Header {
        version: VERSION,
        frozen_blocks: frozen,
        layers,
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + data.len() * 8);
    out.extend(MAGIC);
    out.extend((header.len() as u32).to_le_bytes());
    out.extend(header);
    for v in data {
        out.extend(v.to_le_bytes());
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(Vec<ConvBlock>, Option<Dense>, usize)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a model checkpoint"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?)?;
    if header.version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {}", header.version)));
    }
    let payload = &bytes[12 + hlen..];
    if payload.len() % 8 != 0 {
        return Err(bad("parameter stream not a whole number of f64"));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let take = |e: &LayerEntry| -> Result<(Vec<f64>, Vec<f64>)> {
        let end = e.offset + e.weights + e.outputs;
        if end > data.len() {
            return Err(bad(&format!("layer {} runs past the parameter stream", e.name)));
        }
        Ok((
            data[e.offset..e.offset + e.weights].to_vec(),
            data[e.offset + e.weights..end].to_vec(),
        ))
    };
    let mut blocks = Vec::new();
    let mut fc = None;
    for e in &header.layers {
        let (w, b) = take(e)?;
        match e.kind {
            LayerKind::Conv => {
                let cols = e.inputs * e.kernel * e.kernel;
                let weight = Array2::from_shape_vec((e.outputs, cols), w)
                    .map_err(|_| bad(&format!("layer {} has a bad weight shape", e.name)))?;
                blocks.push(ConvBlock {
                    name: e.name.clone(),
                    conv: Conv2d {
                        weight,
                        bias: Array1::from(b),
                        kernel: e.kernel,
                    },
                    pool: e.pool,
                });
            }
            LayerKind::Dense => {
                let weight = Array2::from_shape_vec((e.outputs, e.inputs), w)
                    .map_err(|_| bad("dense layer has a bad weight shape"))?;
                fc = Some(Dense {
                    weight,
                    bias: Array1::from(b),
                });
            }
        }
    }
    Ok((blocks, fc, header.frozen_blocks))
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let net = model.network();
    let bytes = encode(&net.blocks, Some(&net.fc), model.frozen_blocks())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (blocks, fc, frozen) = decode(&bytes)?;
    let fc = fc.ok_or_else(|| Error::Checkpoint("model checkpoint lacks a dense layer".into()))?;
    Model::from_network(Network { blocks, fc }, frozen)
}

pub fn save_extractor(extractor: &Extractor, path: &Path) -> Result<()> {
    let bytes = encode(&extractor.blocks, None, extractor.blocks.len())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_extractor(path: &Path) -> Result<Extractor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (blocks, _, _) = decode(&bytes)?;
    Ok(Extractor { blocks })
}
