//! Versioned model container.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "SCDFLOW\0"
//! 8       4     format version, u32 little-endian
//! 12      8     header length H in bytes, u64 little-endian
//! 20      H     UTF-8 JSON header (id, dimension, layer shapes, masks,
//!               preprocessing, training metadata, weight count)
//! 20+H    8*N   N weights, f64 little-endian, in layer order; per layer the
//!               scale network then the translate network; per network each
//!               dense layer's weight matrix (row-major, in x out) then bias
//! end-8   8     FNV-1a 64 checksum of the weight bytes, u64 little-endian
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{CouplingLayer, Dense, FlowModel, GaussianPrior, Mlp, TrainingMeta};
use crate::error::{Error, Result};
use crate::traces::Preprocessing;

pub const MAGIC: &[u8; 8] = b"SCDFLOW\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LayerHeader {
    mask: Vec<bool>,
    scale_clamp: f64,
    scale_net: Vec<(usize, usize)>,
    translate_net: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    executable_id: String,
    dim: usize,
    layers: Vec<LayerHeader>,
    preprocessing: Preprocessing,
    training: TrainingMeta,
    n_weights: usize,
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn shapes(net: &Mlp) -> Vec<(usize, usize)> {
    net.layers.iter().map(Dense::shape).collect()
}

pub fn write_model<W: Write>(mut w: W, model: &FlowModel) -> Result<()> {
    let header = Header {
        executable_id: model.executable_id.clone(),
        dim: model.dim(),
        layers: model
            .layers
            .iter()
            .map(|l| LayerHeader {
                mask: l.mask.clone(),
                scale_clamp: l.scale_clamp,
                scale_net: shapes(&l.scale_net),
                translate_net: shapes(&l.translate_net),
            })
            .collect(),
        preprocessing: model.preprocessing.clone(),
        training: model.training.clone(),
        n_weights: model.n_params(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut weights = Vec::with_capacity(header.n_weights * 8);
    for block in model.param_slices() {
        for v in block {
            weights.extend_from_slice(&v.to_le_bytes());
        }
    }
    let io = |e| Error::io("<model stream>", e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    w.write_all(&weights).map_err(io)?;
    w.write_all(&checksum(&weights).to_le_bytes()).map_err(io)?;
    w.flush().map_err(io)
}

fn read_exact<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Corrupt(format!("truncated while reading {what}")))?;
    Ok(buf)
}

fn take_net(shapes: &[(usize, usize)], weights: &mut impl Iterator<Item = f64>) -> Result<Mlp> {
    if shapes.is_empty() {
        return Err(Error::Corrupt("network without layers".into()));
    }
    let mut layers = Vec::with_capacity(shapes.len());
    for &(i, o) in shapes {
        let w: Vec<f64> = weights.by_ref().take(i * o).collect();
        let b: Vec<f64> = weights.by_ref().take(o).collect();
        if w.len() != i * o || b.len() != o {
            return Err(Error::Corrupt("weight block shorter than declared".into()));
        }
        layers.push(Dense {
            weight: Array2::from_shape_vec((i, o), w).expect("sized above"),
            bias: Array1::from_vec(b),
        });
    }
    Ok(Mlp { layers })
}

pub fn read_model<R: Read>(mut r: R) -> Result<FlowModel> {
    let magic = read_exact(&mut r, 8, "magic")?;
    if magic != MAGIC {
        return Err(Error::Corrupt("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut r, 4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(read_exact(&mut r, 8, "header length")?.try_into().unwrap());
    if hlen > 64 << 20 {
        return Err(Error::Corrupt(format!("implausible header length {hlen}")));
    }
    let header: Header = serde_json::from_slice(&read_exact(&mut r, hlen as usize, "header")?)
        .map_err(|e| Error::Corrupt(format!("header: {e}")))?;
    if header.n_weights > 1 << 28 {
        return Err(Error::Corrupt("implausible weight count".into()));
    }
    let raw = read_exact(&mut r, header.n_weights * 8, "weights")?;
    let sum = u64::from_le_bytes(read_exact(&mut r, 8, "checksum")?.try_into().unwrap());
    if sum != checksum(&raw) {
        return Err(Error::Corrupt("weight checksum mismatch".into()));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)
        .map_err(|e| Error::io("<model stream>", e))?;
    if !rest.is_empty() {
        return Err(Error::Corrupt("trailing bytes after checksum".into()));
    }

    let mut weights = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut layers = Vec::with_capacity(header.layers.len());
    for lh in &header.layers {
        if lh.mask.len() != header.dim {
            return Err(Error::Corrupt("mask width differs from dimension".into()));
        }
        let s = take_net(&lh.scale_net, &mut weights)?;
        let t = take_net(&lh.translate_net, &mut weights)?;
        layers.push(CouplingLayer::from_parts(lh.mask.clone(), s, t, lh.scale_clamp));
    }
    if weights.next().is_some() {
        return Err(Error::Corrupt("more weights than layer shapes".into()));
    }
    if header.preprocessing.total_dims() != header.dim {
        return Err(Error::Corrupt("preprocessing width differs from dimension".into()));
    }
    Ok(FlowModel {
        executable_id: header.executable_id,
        layers,
        prior: GaussianPrior { dim: header.dim },
        preprocessing: header.preprocessing,
        training: header.training,
    })
}

pub fn save(model: &FlowModel, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_model(BufWriter::new(f), model)
}

pub fn load(path: &Path) -> Result<FlowModel> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(BufReader::new(f))
}
