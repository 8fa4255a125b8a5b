//! `irt_model.bin`: magic, format version, a length-prefixed JSON header
//! (config, layout, model and item ids) and the parameter vector as
//! little-endian f64.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{IrtConfig, IrtParams, Layout};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ZPDIRT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: IrtConfig,
    layout: Layout,
    models: Vec<String>,
    items: Vec<String>,
}

/// Fitted parameters together with the id orderings they index.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub params: IrtParams,
    pub models: Vec<String>,
    pub items: Vec<String>,
}

pub fn to_bytes(model: &SavedModel) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        config: model.params.config.clone(),
        layout: model.params.layout.clone(),
        models: model.models.clone(),
        items: model.items.clone(),
    })?;
    let mut out = Vec::with_capacity(28 + header.len() + 8 * model.params.values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.params.values.len() as u64).to_le_bytes());
    for v in &model.params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<SavedModel> {
    let bad = |m: &str| Error::Format(m.to_string());
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(at..at + n).ok_or_else(|| bad("unexpected end of file"))?;
        at += n;
        Ok(s)
    };
    if take(8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(hlen)?)?;
    let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    if n != header.layout.len {
        return Err(Error::Format(format!("layout expects {} values, file has {n}", header.layout.len)));
    }
    let values: Vec<f64> = take(n * 8)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite parameter"));
    }
    Ok(SavedModel {
        params: IrtParams {
            config: header.config,
            layout: header.layout,
            values,
        },
        models: header.models,
        items: header.items,
    })
}

pub fn save(path: &Path, model: &SavedModel) -> Result<()> {
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<SavedModel> {
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
