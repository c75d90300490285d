//! Binary parameter checkpoints (`.dcnp`).
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic           4 bytes  "DCNP"
//! version         u32      1
//! layer_count     u32      encoder layers + decoder layers
//! encoder_layers  u32
//! layer_count x { in_dim u64, out_dim u64, activation u8 (0 relu, 1 linear), batch_norm u8 }
//! layer_count x { weight f64[out*in] row-major, bias f64[out],
//!                 if batch_norm: gamma, beta, running_mean, running_var f64[out] each }
//! ```
//!
//! Layers appear encoder first (input side to bottleneck), then decoder
//! (bottleneck to output).

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use super::{Activation, AutoencoderParams, Layer, LayerSpec};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCNP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn to_bytes(params: &AutoencoderParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let layers: Vec<&Layer> = params.layers().collect();
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    out.extend_from_slice(&(params.encoder.len() as u32).to_le_bytes());
    for l in &layers {
        out.extend_from_slice(&(l.spec.in_dim as u64).to_le_bytes());
        out.extend_from_slice(&(l.spec.out_dim as u64).to_le_bytes());
        out.push(match l.spec.activation {
            Activation::Relu => 0,
            Activation::Linear => 1,
        });
        out.push(u8::from(l.spec.batch_norm));
    }
    let mut put = |xs: &[f64]| {
        for v in xs {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for l in &layers {
        put(l.weight.as_slice());
        put(&l.bias);
        if l.spec.batch_norm {
            put(&l.gamma);
            put(&l.beta);
            put(&l.running_mean);
            put(&l.running_var);
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<AutoencoderParams> {
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut cur = Cursor::new(bytes);
    let mut read_exact = |buf: &mut [u8]| -> Result<()> {
        cur.read_exact(buf)
            .map_err(|_| bad("unexpected end of file".to_string()))
    };
    let mut magic = [0u8; 4];
    read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut u32b = [0u8; 4];
    let mut u64b = [0u8; 8];
    let mut u8b = [0u8; 1];
    read_exact(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    read_exact(&mut u32b)?;
    let count = u32::from_le_bytes(u32b) as usize;
    read_exact(&mut u32b)?;
    let enc_count = u32::from_le_bytes(u32b) as usize;
    if enc_count > count || count > 4096 {
        return Err(bad(format!("implausible layer counts {enc_count}/{count}")));
    }
    let mut specs = Vec::with_capacity(count);
    for _ in 0..count {
        read_exact(&mut u64b)?;
        let in_dim = u64::from_le_bytes(u64b) as usize;
        read_exact(&mut u64b)?;
        let out_dim = u64::from_le_bytes(u64b) as usize;
        read_exact(&mut u8b)?;
        let activation = match u8b[0] {
            0 => Activation::Relu,
            1 => Activation::Linear,
            other => return Err(bad(format!("unknown activation code {other}"))),
        };
        read_exact(&mut u8b)?;
        let batch_norm = match u8b[0] {
            0 => false,
            1 => true,
            other => return Err(bad(format!("bad batch-norm flag {other}"))),
        };
        specs.push(LayerSpec::new(in_dim, out_dim, activation, batch_norm));
    }
    let mut floats = |n: usize| -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            read_exact(&mut u64b)?;
            v.push(f64::from_le_bytes(u64b));
        }
        Ok(v)
    };
    let mut layers = Vec::with_capacity(count);
    for spec in specs {
        let (o, i) = (spec.out_dim, spec.in_dim);
        let weight = Matrix::new(o, i, floats(o.checked_mul(i).ok_or_else(|| bad("overflow".into()))?)?)?;
        let bias = floats(o)?;
        let mut layer = Layer {
            spec,
            weight,
            bias,
            gamma: Vec::new(),
            beta: Vec::new(),
            running_mean: Vec::new(),
            running_var: Vec::new(),
        };
        if spec.batch_norm {
            layer.gamma = floats(o)?;
            layer.beta = floats(o)?;
            layer.running_mean = floats(o)?;
            layer.running_var = floats(o)?;
        }
        layers.push(layer);
    }
    if (cur.position() as usize) != bytes.len() {
        return Err(bad("trailing bytes after parameters".to_string()));
    }
    let decoder = layers.split_off(enc_count);
    AutoencoderParams::new(layers, decoder).map_err(|e| bad(e.to_string()))
}

pub fn write_params(path: impl AsRef<Path>, params: &AutoencoderParams) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn read_params(path: impl AsRef<Path>) -> Result<AutoencoderParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
