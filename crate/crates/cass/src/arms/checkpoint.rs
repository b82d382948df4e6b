//! Single-file arm checkpoints.
//!
//! Layout: an 8-byte magic, a format version, a JSON metadata record
//! (spec, seed, epoch, swa flag), then every parameter tensor in store
//! order as name + shape + little-endian f64 payload. Writing is fully
//! deterministic for a given arm state, so reruns of a deterministic
//! training job produce byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{CassError, Result};
use crate::tensor::Tensor;

use super::{build_arm, Arm, ArmSpec, InitKind};

const MAGIC: &[u8; 8] = b"CASSCKPT";
const VERSION: u32 = 1;

/// Everything about a checkpoint except the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ArmSpec,
    pub seed: u64,
    pub epoch: u64,
    pub swa: bool,
}

pub fn save_checkpoint(arm: &Arm, epoch: u64, swa: bool, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        spec: arm.spec.clone(),
        seed: arm.seed,
        epoch,
        swa,
    };
    let meta_bytes = serde_json::to_vec(&meta)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u64::<LittleEndian>(meta_bytes.len() as u64)?;
    w.write_all(&meta_bytes)?;
    w.write_u64::<LittleEndian>(arm.store().len() as u64)?;
    for p in arm.store().iter() {
        let name = p.name.as_bytes();
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name)?;
        w.write_u32::<LittleEndian>(p.value.shape().len() as u32)?;
        for &d in p.value.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in p.value.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Arm, CheckpointMeta)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CassError::InvalidInput(format!(
            "{} is not an arm checkpoint",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(CassError::InvalidInput(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let meta_len = r.read_u64::<LittleEndian>()? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)?;

    // Rebuild with random init, then overwrite every tensor from the file;
    // keeping init=pretrained_file here would recurse into another load.
    let mut spec = meta.spec.clone();
    spec.init = InitKind::Random;
    let mut arm = build_arm(&spec, meta.seed)?;

    let count = r.read_u64::<LittleEndian>()? as usize;
    if count != arm.store().len() {
        return Err(CassError::InvalidInput(format!(
            "checkpoint has {count} tensors, model expects {}",
            arm.store().len()
        )));
    }
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CassError::InvalidInput("non-UTF8 tensor name".into()))?;
        let ndim = r.read_u32::<LittleEndian>()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u64::<LittleEndian>()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        for v in &mut data {
            *v = r.read_f64::<LittleEndian>()?;
        }
        let id = arm.store().find(&name).ok_or_else(|| {
            CassError::InvalidInput(format!("checkpoint tensor '{name}' not in model"))
        })?;
        if arm.store().value(id).shape() != shape.as_slice() {
            return Err(CassError::InvalidInput(format!(
                "tensor '{name}' shape {:?} does not match model {:?}",
                shape,
                arm.store().value(id).shape()
            )));
        }
        *arm.store_mut().value_mut(id) = Tensor::from_vec(&shape, data)?;
    }
    Ok((arm, meta))
}
