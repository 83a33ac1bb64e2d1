//! Flat checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"FDNA"
//! version u8 (currently 1)
//! meta    u32 length + UTF-8 bytes (config echo, JSON; may be empty)
//! count   u32 number of tensors
//! entry*  name: u32 length + UTF-8 bytes
//!         ndim: u32, dims: u64 * ndim
//!         data: f64 little-endian * product(dims)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FDNA";
const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint file (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: unsupported checkpoint version {found}")]
    BadVersion { path: String, found: u8 },
    #[error("{path}: corrupt checkpoint: {msg}")]
    Corrupt { path: String, msg: String },
}

/// Named f64 tensors plus a free-form metadata string (config echo).
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: String,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// All tensors whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| {
                n.strip_prefix(prefix)
                    .map(|rest| (rest.to_string(), t.clone()))
            })
            .collect()
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let p = path.display().to_string();
    let io_err = |source| CheckpointError::Io {
        path: p.clone(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| -> Result<(), CheckpointError> {
        w.write_all(bytes).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    };
    write(MAGIC)?;
    write(&[VERSION])?;
    write(&(ckpt.meta.len() as u32).to_le_bytes())?;
    write(ckpt.meta.as_bytes())?;
    write(&(ckpt.tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in &ckpt.tensors {
        write(&(name.len() as u32).to_le_bytes())?;
        write(name.as_bytes())?;
        write(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            write(&(d as u64).to_le_bytes())?;
        }
        for &x in tensor.data() {
            write(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let p = path.display().to_string();
    let file = File::open(path).map_err(|source| CheckpointError::Io {
        path: p.clone(),
        source,
    })?;
    let mut r = BufReader::new(file);

    fn read_exact(
        r: &mut impl Read,
        buf: &mut [u8],
        p: &str,
    ) -> Result<(), CheckpointError> {
        r.read_exact(buf).map_err(|_| CheckpointError::Corrupt {
            path: p.to_string(),
            msg: "unexpected end of file".into(),
        })
    }
    fn read_u32(r: &mut impl Read, p: &str) -> Result<u32, CheckpointError> {
        let mut b = [0u8; 4];
        read_exact(r, &mut b, p)?;
        Ok(u32::from_le_bytes(b))
    }
    fn read_string(r: &mut impl Read, p: &str) -> Result<String, CheckpointError> {
        let len = read_u32(r, p)? as usize;
        let mut b = vec![0u8; len];
        read_exact(r, &mut b, p)?;
        String::from_utf8(b).map_err(|_| CheckpointError::Corrupt {
            path: p.to_string(),
            msg: "non-UTF-8 string".into(),
        })
    }

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, &p)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic { path: p });
    }
    let mut version = [0u8; 1];
    read_exact(&mut r, &mut version, &p)?;
    if version[0] != VERSION {
        return Err(CheckpointError::BadVersion {
            path: p,
            found: version[0],
        });
    }
    let meta = read_string(&mut r, &p)?;
    let count = read_u32(&mut r, &p)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_string(&mut r, &p)?;
        let ndim = read_u32(&mut r, &p)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b, &p)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            read_exact(&mut r, &mut b, &p)?;
            data.push(f64::from_le_bytes(b));
        }
        tensors.push((name, Tensor::new(shape, data)));
    }
    Ok(Checkpoint { tensors, meta })
}
