//! Self-describing binary checkpoints.
//!
//! Layout: 8-byte magic, u32 version, u64 header length, JSON header, then
//! every parameter array, every running-statistics vector and any external
//! embedding table as little-endian `f64`.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{FeatureTable, ModelSpec, MtClar, EMBEDDING_DIM};

pub const MAGIC: &[u8; 8] = b"MTCLARCK";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    sl_heads: bool,
    params: Vec<ParamEntry>,
    stats: Vec<usize>,
    features: Option<Vec<u64>>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn to_bytes(model: &MtClar) -> Result<Vec<u8>> {
    let params = model.params();
    let header = Header {
        spec: model.spec().clone(),
        sl_heads: model.has_sl_heads(),
        params: params
            .ids()
            .map(|id| ParamEntry {
                name: params.name(id).to_string(),
                shape: params.get(id).shape().to_vec(),
            })
            .collect(),
        stats: model.norm_stats().iter().map(|s| s.mean.len()).collect(),
        features: model.feature_table().map(|t| t.sorted_entries().iter().map(|(k, _)| *k).collect()),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * params.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
    for id in params.ids() {
        params.get(id).iter().for_each(|&v| put(v));
    }
    for s in model.norm_stats() {
        s.mean.iter().chain(s.var.iter()).for_each(|&v| put(v));
    }
    if let Some(t) = model.feature_table() {
        for (_, e) in t.sorted_entries() {
            e.iter().for_each(|&v| put(v));
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated archive")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let raw = self.take(n.checked_mul(8).ok_or("array too large")?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Parses a checkpoint; `origin` names the source in error messages.
pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<MtClar> {
    let bad = |message: String| Error::Checkpoint {
        path: origin.to_path_buf(),
        message,
    };
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(8).map_err(&bad)?;
    if magic != MAGIC {
        return Err(bad(format!("bad magic header (expected checkpoint format version {VERSION})")));
    }
    let version = u32::from_le_bytes(cur.take(4).map_err(&bad)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let hlen = u64::from_le_bytes(cur.take(8).map_err(&bad)?.try_into().expect("8 bytes"));
    let header: Header =
        serde_json::from_slice(cur.take(hlen as usize).map_err(&bad)?).map_err(|e| bad(format!("header: {e}")))?;

    let mut model = MtClar::new(header.spec, 0)?;
    if header.sl_heads {
        model.attach_sl_heads(0);
    }
    let ids: Vec<_> = model.params().ids().collect();
    if ids.len() != header.params.len() {
        return Err(bad(format!(
            "archive has {} parameter arrays, architecture needs {}",
            header.params.len(),
            ids.len()
        )));
    }
    for (id, entry) in ids.into_iter().zip(&header.params) {
        let store = model.params_mut();
        if store.name(id) != entry.name || store.get(id).shape() != entry.shape.as_slice() {
            return Err(bad(format!("parameter {} does not match the architecture", entry.name)));
        }
        let n = entry.shape.iter().product();
        let data = cur.f64s(n).map_err(&bad)?;
        *store.get_mut(id) = ArrayD::from_shape_vec(IxDyn(&entry.shape), data).expect("sized");
    }
    if header.stats.len() != model.norm_stats().len() {
        return Err(bad("normalisation statistics do not match the architecture".into()));
    }
    for (i, &dim) in header.stats.iter().enumerate() {
        let mean = cur.f64s(dim).map_err(&bad)?;
        let var = cur.f64s(dim).map_err(&bad)?;
        let s = &mut model.norm_stats_mut()[i];
        if s.mean.len() != dim {
            return Err(bad(format!("statistics {i} have the wrong width")));
        }
        s.mean = Array1::from(mean);
        s.var = Array1::from(var);
    }
    if let Some(keys) = header.features {
        let mut entries = HashMap::with_capacity(keys.len());
        for k in keys {
            entries.insert(k, cur.f64s(EMBEDDING_DIM).map_err(&bad)?);
        }
        match model.feature_table_mut() {
            Some(t) => *t = FeatureTable::from_raw(entries),
            None => return Err(bad("embedding table present for a convolutional encoder".into())),
        }
    }
    if cur.pos != bytes.len() {
        return Err(bad("trailing bytes after archive".into()));
    }
    Ok(model)
}

pub fn save(model: &MtClar, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<MtClar> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Image;
    use crate::network::EncoderSpec;

    fn model() -> MtClar {
        let mut spec = ModelSpec::new(EncoderSpec::small_cnn(8));
        spec.projector_hidden = vec![8];
        spec.sl_hidden = vec![8];
        let mut m = MtClar::new(spec, 4).unwrap();
        m.attach_sl_heads(5);
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let img = Image::filled(8, 8, 0.3);
        let bytes = to_bytes(&m).unwrap();
        let back = from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(m.siamese_forward(&img, &img).unwrap(), back.siamese_forward(&img, &img).unwrap());
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn wrong_magic_and_version() {
        let mut bytes = to_bytes(&model()).unwrap();
        bytes[2] ^= 0xff;
        assert!(matches!(from_bytes(&bytes, Path::new("x")), Err(Error::Checkpoint { .. })));
        let mut bytes = to_bytes(&model()).unwrap();
        bytes[8] = 9;
        assert!(matches!(
            from_bytes(&bytes, Path::new("x")),
            Err(Error::CheckpointVersion { found: 9, .. })
        ));
        let bytes = to_bytes(&model()).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 3], Path::new("x")).is_err());
    }
}
