//! Binary model file: little-endian, self-describing enough to rebuild the
//! architecture, schedule and standardizer without side files.
//!
//! ```text
//! "FSDA" | u32 version
//! u8 backbone | u32 hidden, heads, input_dim, conditions, ffn_mult
//! u32 timesteps | f64 beta_start, beta_end
//! f64[6] mean | f64[6] std
//! u32 n_params, then per param: u32 name_len, name, u32 rank, u32[rank] dims, f64[numel]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DiffusionModel, Standardizer, VarianceSchedule, STAIN_DIM};
use crate::nn::{Backbone, DenoiserArch, ModelState, Param, Tensor};
use crate::{Error, Result};

pub const MODEL_MAGIC: [u8; 4] = *b"FSDA";
pub const MODEL_FORMAT_VERSION: u32 = 1;

// Sanity bounds when decoding; far above anything this crate builds.
const MAX_NAME_LEN: usize = 256;
const MAX_RANK: usize = 8;
const MAX_PARAMS: usize = 1024;
const MAX_NUMEL: usize = 1 << 26;

pub fn write_model<W: Write>(model: &DiffusionModel, out: &mut W) -> std::io::Result<()> {
    let arch = model.arch();
    out.write_all(&MODEL_MAGIC)?;
    put_u32(out, MODEL_FORMAT_VERSION)?;
    out.write_all(&[match arch.backbone {
        Backbone::Transformer => 0u8,
        Backbone::Mlp => 1u8,
    }])?;
    for v in [
        arch.hidden_size,
        arch.num_heads,
        arch.input_dim,
        arch.num_conditions,
        arch.ffn_mult,
    ] {
        put_u32(out, v as u32)?;
    }
    put_u32(out, model.schedule.timesteps() as u32)?;
    let (b0, b1) = model.schedule.beta_range();
    put_f64(out, b0)?;
    put_f64(out, b1)?;
    for v in model
        .standardizer
        .mean
        .iter()
        .chain(&model.standardizer.std)
    {
        put_f64(out, *v)?;
    }
    let params = model.state.params();
    put_u32(out, params.len() as u32)?;
    for p in params {
        put_u32(out, p.name.len() as u32)?;
        out.write_all(p.name.as_bytes())?;
        put_u32(out, p.value.shape().len() as u32)?;
        for &d in p.value.shape() {
            put_u32(out, d as u32)?;
        }
        for &v in p.value.data() {
            put_f64(out, v)?;
        }
    }
    Ok(())
}

pub fn read_model<R: Read>(input: &mut R) -> Result<DiffusionModel> {
    let fmt = |m: &str| Error::ModelFormat(m.to_string());
    let mut magic = [0u8; 4];
    read_exact(input, &mut magic)?;
    if magic != MODEL_MAGIC {
        return Err(fmt("bad magic"));
    }
    let version = get_u32(input)?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::ModelFormat(format!("unsupported version {version}")));
    }
    let mut tag = [0u8; 1];
    read_exact(input, &mut tag)?;
    let backbone = match tag[0] {
        0 => Backbone::Transformer,
        1 => Backbone::Mlp,
        t => return Err(Error::ModelFormat(format!("unknown backbone tag {t}"))),
    };
    let arch = DenoiserArch {
        backbone,
        hidden_size: get_usize(input)?,
        num_heads: get_usize(input)?,
        input_dim: get_usize(input)?,
        num_conditions: get_usize(input)?,
        ffn_mult: get_usize(input)?,
    };
    arch.validate()
        .map_err(|e| Error::ModelFormat(format!("architecture: {e}")))?;
    let timesteps = get_usize(input)?;
    let schedule = VarianceSchedule::linear(timesteps, get_f64(input)?, get_f64(input)?)
        .map_err(|e| Error::ModelFormat(format!("schedule: {e}")))?;
    let mut standardizer = Standardizer::default();
    for i in 0..STAIN_DIM {
        standardizer.mean[i] = get_f64(input)?;
    }
    for i in 0..STAIN_DIM {
        standardizer.std[i] = get_f64(input)?;
    }
    let n = get_usize(input)?;
    if n > MAX_PARAMS {
        return Err(fmt("too many parameter tensors"));
    }
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let len = get_usize(input)?;
        if len > MAX_NAME_LEN {
            return Err(fmt("parameter name too long"));
        }
        let mut name = vec![0u8; len];
        read_exact(input, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| fmt("parameter name is not UTF-8"))?;
        let rank = get_usize(input)?;
        if rank > MAX_RANK {
            return Err(fmt("parameter rank too large"));
        }
        let shape = (0..rank)
            .map(|_| get_usize(input))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= MAX_NUMEL)
            .ok_or_else(|| fmt("parameter too large"))?;
        let data = (0..numel)
            .map(|_| get_f64(input))
            .collect::<Result<Vec<_>>>()?;
        params.push(Param {
            name,
            value: Tensor::new(shape, data)?,
        });
    }
    let mut rest = [0u8; 1];
    if input
        .read(&mut rest)
        .map_err(|e| Error::ModelFormat(e.to_string()))?
        != 0
    {
        return Err(fmt("trailing bytes after parameters"));
    }
    Ok(DiffusionModel {
        state: ModelState::from_params(arch, params)?,
        schedule,
        standardizer,
    })
}

pub fn save_model(model: &DiffusionModel, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_model(model, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<DiffusionModel> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(&mut BufReader::new(file))
}

fn put_u32<W: Write>(out: &mut W, v: u32) -> std::io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

fn put_f64<W: Write>(out: &mut W, v: f64) -> std::io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<()> {
    input
        .read_exact(buf)
        .map_err(|e| Error::ModelFormat(format!("truncated model file: {e}")))
}

fn get_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_usize<R: Read>(input: &mut R) -> Result<usize> {
    Ok(get_u32(input)? as usize)
}

fn get_f64<R: Read>(input: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(input, &mut b)?;
    Ok(f64::from_le_bytes(b))
}
