//! Versioned tensor container: magic, version, JSON header, then
//! little-endian f32 payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::{AdapterParams, BackboneParams, ModelConfig};

pub const MAGIC: &[u8; 8] = b"FSTENSOR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    /// Configuration echo for the stored object.
    pub config: serde_json::Value,
    pub seed: u64,
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub struct Container {
    pub header: Header,
    pub payload: Vec<f32>,
}

impl Container {
    pub fn open(path: &Path, kind: &str) -> Result<Self> {
        let c = read_container(std::io::BufReader::new(std::fs::File::open(path)?))?;
        if c.header.kind != kind {
            return Err(Error::Checkpoint(format!("expected {kind}, found {}", c.header.kind)));
        }
        Ok(c)
    }

    pub fn config<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.header.config.clone()).map_err(|e| Error::Checkpoint(format!("config: {e}")))
    }

    pub fn tensor(&self, name: &str) -> Result<(&[usize], &[f32])> {
        let e = self
            .header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let n: usize = e.shape.iter().product();
        let data = self
            .payload
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} out of bounds")))?;
        Ok((&e.shape, data))
    }
}

pub fn write_container<W: Write>(
    mut out: W,
    kind: &str,
    config: serde_json::Value,
    seed: u64,
    extra: serde_json::Value,
    tensors: Vec<(String, Vec<usize>, &[f32])>,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut offset = 0;
    for (name, shape, data) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
        });
        offset += data.len();
    }
    let header = Header {
        kind: kind.to_string(),
        config,
        seed,
        extra,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::with_capacity(offset * 4);
    for (_, _, data) in &tensors {
        for v in *data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn read_container<R: Read>(mut input: R) -> Result<Container> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut v = [0u8; 4];
    input.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut l = [0u8; 8];
    input.read_exact(&mut l)?;
    let mut json = vec![0u8; u64::from_le_bytes(l) as usize];
    input.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if rest.len() % 4 != 0 {
        return Err(Error::Checkpoint("truncated payload".into()));
    }
    let payload = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Container { header, payload })
}

pub fn fill(dst: &mut [f32], shape: &[usize], src: (&[usize], &[f32]), name: &str) -> Result<()> {
    if src.0 != shape || src.1.len() != dst.len() {
        return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
    }
    dst.copy_from_slice(src.1);
    Ok(())
}

pub fn save_backbone(path: &Path, p: &BackboneParams<f32>, seed: u64, extra: serde_json::Value) -> Result<()> {
    let tensors = p.tensors().into_iter().map(|t| (t.name, t.shape, t.data)).collect();
    write_container(
        std::io::BufWriter::new(std::fs::File::create(path)?),
        "backbone",
        serde_json::to_value(p.cfg)?,
        seed,
        extra,
        tensors,
    )
}

pub fn load_backbone(path: &Path) -> Result<(BackboneParams<f32>, Header)> {
    let c = Container::open(path, "backbone")?;
    let model: ModelConfig = c.config()?;
    model.validate()?;
    let mut p = BackboneParams::<f32>::zeros(model);
    let shapes: Vec<Vec<usize>> = p.tensors().into_iter().map(|t| t.shape).collect();
    for (t, shape) in p.tensors_mut().into_iter().zip(shapes) {
        fill(t.data, &shape, c.tensor(&t.name)?, &t.name)?;
    }
    if !p.all_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok((p, c.header))
}

pub fn save_adapters(
    path: &Path,
    model: ModelConfig,
    adapters: &BTreeMap<String, AdapterParams<f32>>,
    seed: u64,
) -> Result<()> {
    let mut tensors = Vec::new();
    for (user, a) in adapters {
        for t in a.tensors() {
            tensors.push((format!("{user}/{}", t.name), t.shape, t.data));
        }
    }
    let users: Vec<&String> = adapters.keys().collect();
    write_container(
        std::io::BufWriter::new(std::fs::File::create(path)?),
        "adapters",
        serde_json::to_value(model)?,
        seed,
        serde_json::json!({ "users": users }),
        tensors,
    )
}

pub fn load_adapters(path: &Path) -> Result<BTreeMap<String, AdapterParams<f32>>> {
    let c = Container::open(path, "adapters")?;
    let model: ModelConfig = c.config()?;
    let users: Vec<String> = serde_json::from_value(c.header.extra.get("users").cloned().unwrap_or_default())
        .map_err(|e| Error::Checkpoint(format!("adapter user list: {e}")))?;
    let mut out = BTreeMap::new();
    for u in users {
        let mut a = AdapterParams::<f32>::zeros(model.d_model);
        let shapes: Vec<Vec<usize>> = a.tensors().into_iter().map(|t| t.shape).collect();
        for (t, shape) in a.tensors_mut().into_iter().zip(shapes) {
            let name = format!("{u}/{}", t.name);
            fill(t.data, &shape, c.tensor(&name)?, &name)?;
        }
        out.insert(u, a);
    }
    Ok(out)
}
