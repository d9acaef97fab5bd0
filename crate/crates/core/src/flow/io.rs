//! NVPF model files.
//!
//! ```text
//! "NVPF" | version=1 | f | L | hidden    (u32 LE)
//! shift[f] | scale[f]                    (f64 LE)
//! for each layer: scale net | translate net | log caps   (f64 LE)
//! ```
//!
//! Masks are not stored: layer `l` keeps coordinates with parity `l % 2`.

use std::fs;
use std::path::Path;

use super::coupling::{alternating_mask, CouplingLayer};
use super::mlp::Mlp;
use super::model::FlowModel;
use crate::error::{Error, Result};
use crate::io_util::{write_atomic, ByteReader, ByteWriter};

const MAGIC: &[u8; 4] = b"NVPF";
const VERSION: u32 = 1;

pub fn encode_model(model: &FlowModel) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.len_u32(model.dim(), "dimension")?;
    w.len_u32(model.chain_length(), "chain length")?;
    w.len_u32(model.hidden(), "hidden width")?;
    let (shift, scale) = model.standardization();
    shift.iter().chain(scale).for_each(|&v| w.f64(v));
    model.parameters().into_iter().for_each(|v| w.f64(v));
    Ok(w.finish())
}

pub fn decode_model(bytes: &[u8]) -> Result<FlowModel> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported NVPF version {version}")));
    }
    let dim = r.usize()?;
    let chain = r.usize()?;
    let hidden = r.usize()?;
    if dim < 2 || chain == 0 || hidden == 0 {
        return Err(Error::format(format!("invalid flow header f={dim} L={chain} hidden={hidden}")));
    }
    let shift = r.f64_vec(dim)?;
    let scale = r.f64_vec(dim)?;
    let mut layers = Vec::with_capacity(chain.min(1024));
    for l in 0..chain {
        let mask = alternating_mask(dim, l);
        let kept = mask.iter().filter(|&&k| k).count();
        let changed = dim - kept;
        let n = Mlp::param_count(kept, hidden, changed);
        let scale_net = Mlp::from_params(kept, hidden, changed, r.f64_vec(n)?).expect("sized above");
        let translate_net = Mlp::from_params(kept, hidden, changed, r.f64_vec(n)?).expect("sized above");
        let log_cap = r.f64_vec(changed)?;
        layers.push(CouplingLayer::from_parts(mask, scale_net, translate_net, log_cap)?);
    }
    r.expect_end()?;
    FlowModel::from_parts(dim, hidden, shift, scale, layers)
}

pub fn write_model(model: &FlowModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_model(model)?)
}

pub fn read_model(path: impl AsRef<Path>) -> Result<FlowModel> {
    decode_model(&fs::read(path)?)
}
