//! Parameter checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "PSEGCKPT"
//! version u32      currently 1
//! count   u32      number of named arrays
//! entry*: name_len u32 | name utf-8 | ndim u32 | dims u32[ndim] | f32 data
//! ```
//!
//! Entries hold every learnable tensor plus the batch-norm running
//! buffers, all stored as f32 regardless of the training precision.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::NetworkParams;
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 8] = b"PSEGCKPT";
const VERSION: u32 = 1;

/// Raw checkpoint contents: shape and f32 data per name.
pub type CheckpointData = HashMap<String, (Vec<usize>, Vec<f32>)>;

fn collect_entries<R: Real>(params: &NetworkParams<R>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut entries = Vec::new();
    params.for_each(|name, t| {
        entries.push((
            name.to_string(),
            t.shape().to_vec(),
            t.data().iter().map(|v| v.to_f64_c() as f32).collect(),
        ));
    });
    params.for_each_buffer(|name, data| {
        entries.push((
            name.to_string(),
            vec![data.len()],
            data.iter().map(|v| v.to_f64_c() as f32).collect(),
        ));
    });
    entries
}

/// Write all parameters and buffers to `path`.
pub fn save_checkpoint<R: Real>(path: &Path, params: &NetworkParams<R>) -> Result<()> {
    let entries = collect_entries(params);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, data) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in &shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                offset: self.pos as u64,
                message: "checkpoint truncated".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Read a checkpoint file into raw named arrays.
pub fn read_checkpoint(path: &Path) -> Result<CheckpointData> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: "bad checkpoint magic".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 8,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = r.u32()? as usize;
    let mut data = CheckpointData::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            offset: r.pos as u64,
            message: "entry name is not valid utf-8".into(),
        })?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        data.insert(name, (shape, values));
    }
    Ok(data)
}

/// Load a checkpoint into an existing parameter struct (shapes must match
/// the configuration the struct was built from).
pub fn load_checkpoint<R: Real>(path: &Path, params: &mut NetworkParams<R>) -> Result<()> {
    let data = read_checkpoint(path)?;
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    let mut used = 0usize;
    params.for_each_mut(|name, t| match data.get(name) {
        Some((shape, values)) if shape == t.shape() => {
            *t = Tensor::new(shape, values.iter().map(|&v| R::from_f64_c(v as f64)).collect());
            used += 1;
        }
        Some(_) => mismatched.push(name.to_string()),
        None => missing.push(name.to_string()),
    });
    params.for_each_bn_mut(|name, bn| {
        for (suffix, buf) in [
            ("running_mean", &mut bn.state.running_mean),
            ("running_var", &mut bn.state.running_var),
        ] {
            let key = format!("{name}.{suffix}");
            match data.get(&key) {
                Some((shape, values)) if shape == &[buf.len()] => {
                    *buf = values.iter().map(|&v| R::from_f64_c(v as f64)).collect();
                    used += 1;
                }
                Some(_) => mismatched.push(key),
                None => missing.push(key),
            }
        }
    });
    if !mismatched.is_empty() {
        return Err(Error::shape(format!(
            "incompatible checkpoint shapes for {mismatched:?}"
        )));
    }
    if !missing.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("checkpoint is missing entries {missing:?}"),
        });
    }
    if used != data.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!(
                "checkpoint holds {} entries but the network uses {used}",
                data.len()
            ),
        });
    }
    Ok(())
}
