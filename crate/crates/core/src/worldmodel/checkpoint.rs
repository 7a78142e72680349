use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{WorldModel, WorldModelConfig};
use crate::config::{from_flat_text, to_flat_text};
use crate::error::{Error, Result};
use crate::numerics::DenseArray;

const MAGIC: &[u8; 8] = b"LWMCKPT\0";
const VERSION: u32 = 1;

const STAT_NAMES: [&str; 4] = [
    "encoder.running_mean",
    "encoder.running_var",
    "predictor.running_mean",
    "predictor.running_var",
];

fn stats_arrays(model: &WorldModel) -> [DenseArray; 4] {
    [
        DenseArray::row_vector(model.encoder_stats.mean.clone()),
        DenseArray::row_vector(model.encoder_stats.var.clone()),
        DenseArray::row_vector(model.predictor_stats.mean.clone()),
        DenseArray::row_vector(model.predictor_stats.var.clone()),
    ]
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_string(r: &mut impl Read, limit: usize) -> Result<String> {
    let n = get_u32(r)? as usize;
    if n > limit {
        return Err(Error::Format(format!("string of {n} bytes exceeds limit")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::Format("string is not utf-8".into()))
}

fn put_array(w: &mut impl Write, name: &str, a: &DenseArray) -> Result<()> {
    put_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    put_u32(w, a.shape().len() as u32)?;
    for &d in a.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for x in a.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Serializes config, weights and running statistics.
pub fn write_checkpoint(model: &WorldModel, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    let cfg = to_flat_text(model.config())?;
    put_u32(w, cfg.len() as u32)?;
    w.write_all(cfg.as_bytes())?;
    let stats = stats_arrays(model);
    put_u32(w, (model.params().len() + stats.len()) as u32)?;
    for (name, a) in model.params().iter() {
        put_array(w, name, a)?;
    }
    for (name, a) in STAT_NAMES.iter().zip(&stats) {
        put_array(w, name, a)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<WorldModel> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_text = get_string(r, 1 << 20)?;
    let config: WorldModelConfig = from_flat_text(&cfg_text)?;
    // Weights are overwritten below; the seed is irrelevant.
    let mut model = WorldModel::new(config, 0)?;
    let d = model.config().embed_dim;

    let count = get_u32(r)? as usize;
    let expected = model.params().len() + STAT_NAMES.len();
    if count != expected {
        return Err(Error::Format(format!("checkpoint has {count} arrays, model needs {expected}")));
    }
    let mut seen = vec![false; expected];
    for _ in 0..count {
        let name = get_string(r, 4096)?;
        let ndim = get_u32(r)? as usize;
        if ndim > 8 {
            return Err(Error::Format(format!("array {name} has rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(get_u64(r)? as usize);
        }
        let slot = match model.params().find(&name) {
            Some(id) => id.0,
            None => match STAT_NAMES.iter().position(|s| *s == name) {
                Some(k) => model.params().len() + k,
                None => return Err(Error::Format(format!("unknown array {name}"))),
            },
        };
        let want: Vec<usize> = if slot < model.params().len() {
            model.params().values()[slot].shape().to_vec()
        } else {
            vec![1, d]
        };
        if shape != want {
            return Err(Error::Format(format!("array {name} has shape {shape:?}, expected {want:?}")));
        }
        if std::mem::replace(&mut seen[slot], true) {
            return Err(Error::Format(format!("array {name} appears twice")));
        }
        let len: usize = shape.iter().product();
        let mut data = vec![0.0; len];
        let mut b = [0u8; 8];
        for x in data.iter_mut() {
            r.read_exact(&mut b)?;
            *x = f64::from_le_bytes(b);
        }
        if slot < model.params().len() {
            model.params_mut().values_mut()[slot].data_mut().copy_from_slice(&data);
        } else {
            match slot - model.params().len() {
                0 => model.encoder_stats.mean = data,
                1 => model.encoder_stats.var = data,
                2 => model.predictor_stats.mean = data,
                _ => model.predictor_stats.var = data,
            }
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &WorldModel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<WorldModel> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}
