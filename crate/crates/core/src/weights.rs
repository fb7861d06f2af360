//! Little-endian binary weight files for the temporal block and the backbone.
//!
//! Both formats are a magic tag, a `u32` version, a shape header, a `u64`
//! parameter count and then that many `f64` values in `to_flat` order.

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::micronet::{MicroNetConfig, MicroNetParams};
use crate::temporal::{EtscParams, ETSC_DILATIONS, ETSC_KERNEL};

pub const ETSC_MAGIC: &[u8; 8] = b"EVPETSC\0";
pub const NET_MAGIC: &[u8; 8] = b"EVPNET\0\0";
pub const FORMAT_VERSION: u32 = 1;

const LAYER_NAMES: [&str; 4] = ["mlp0", "mlp1", "mlp2", "head"];

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::WeightFormat(msg.into())
}

/// Maps a short read to a format error instead of a bare I/O error.
fn io<T>(r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => fmt_err("file truncated"),
        _ => Error::Io(e),
    })
}

fn read_header<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<()> {
    let mut tag = [0u8; 8];
    io(r.read_exact(&mut tag))?;
    if &tag != magic {
        return Err(fmt_err(format!("bad magic {tag:?}")));
    }
    let version = io(r.read_u32::<LE>())?;
    if version != FORMAT_VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    Ok(())
}

fn write_values<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    w.write_u64::<LE>(values.len() as u64)?;
    for &v in values {
        w.write_f64::<LE>(v)?;
    }
    Ok(())
}

fn read_values<R: Read>(r: &mut R, expected: usize) -> Result<Vec<f64>> {
    let count = io(r.read_u64::<LE>())?;
    if count != expected as u64 {
        return Err(fmt_err(format!("header implies {expected} values, file says {count}")));
    }
    let mut out = vec![0.0; expected];
    io(r.read_f64_into::<LE>(&mut out))?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(fmt_err("non-finite weight"));
    }
    let mut rest = [0u8; 1];
    if io(r.read(&mut rest))? != 0 {
        return Err(fmt_err("trailing bytes after weights"));
    }
    Ok(out)
}

pub fn write_etsc<W: Write>(p: &EtscParams<f64>, mut w: W) -> Result<()> {
    w.write_all(ETSC_MAGIC)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    w.write_u32::<LE>(p.channels() as u32)?;
    w.write_u32::<LE>(2)?;
    for conv in [&p.conv1, &p.conv2] {
        w.write_u32::<LE>(conv.kernel as u32)?;
        w.write_u32::<LE>(conv.dilation as u32)?;
    }
    write_values(&mut w, &p.to_flat())
}

pub fn read_etsc<R: Read>(mut r: R) -> Result<EtscParams<f64>> {
    read_header(&mut r, ETSC_MAGIC)?;
    let channels = io(r.read_u32::<LE>())? as usize;
    let convs = io(r.read_u32::<LE>())?;
    if channels == 0 || convs != 2 {
        return Err(fmt_err(format!(
            "expected 2 convolutions over >= 1 channel, got {convs} over {channels}"
        )));
    }
    for d in ETSC_DILATIONS {
        let kernel = io(r.read_u32::<LE>())? as usize;
        let dilation = io(r.read_u32::<LE>())? as usize;
        if kernel != ETSC_KERNEL || dilation != d {
            return Err(fmt_err(format!(
                "convolution (kernel {kernel}, dilation {dilation}) does not match ({ETSC_KERNEL}, {d})"
            )));
        }
    }
    let flat = read_values(&mut r, EtscParams::<f64>::zeros(channels).param_count())?;
    EtscParams::from_flat(channels, &flat)
}

pub fn write_micronet<W: Write>(p: &MicroNetParams<f64>, mut w: W) -> Result<()> {
    w.write_all(NET_MAGIC)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    w.write_u32::<LE>(p.joints as u32)?;
    w.write_u32::<LE>(p.w_bins as u32)?;
    w.write_u32::<LE>(p.h_bins as u32)?;
    w.write_u32::<LE>(LAYER_NAMES.len() as u32)?;
    for (name, layer) in LAYER_NAMES.iter().zip(p.layers()) {
        w.write_u16::<LE>(name.len() as u16)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LE>(layer.out_dim as u32)?;
        w.write_u32::<LE>(layer.in_dim as u32)?;
    }
    write_values(&mut w, &p.to_flat())
}

pub fn read_micronet<R: Read>(mut r: R) -> Result<MicroNetParams<f64>> {
    read_header(&mut r, NET_MAGIC)?;
    let joints = io(r.read_u32::<LE>())? as usize;
    let w_bins = io(r.read_u32::<LE>())? as usize;
    let h_bins = io(r.read_u32::<LE>())? as usize;
    let n_layers = io(r.read_u32::<LE>())?;
    if n_layers as usize != LAYER_NAMES.len() {
        return Err(fmt_err(format!(
            "expected {} layers, got {n_layers}",
            LAYER_NAMES.len()
        )));
    }
    let mut dims = Vec::with_capacity(LAYER_NAMES.len());
    for expected in LAYER_NAMES {
        let len = io(r.read_u16::<LE>())? as usize;
        let mut name = vec![0u8; len];
        io(r.read_exact(&mut name))?;
        if name != expected.as_bytes() {
            return Err(fmt_err(format!(
                "expected layer {expected}, found {:?}",
                String::from_utf8_lossy(&name)
            )));
        }
        let out = io(r.read_u32::<LE>())? as usize;
        let inp = io(r.read_u32::<LE>())? as usize;
        dims.push((out, inp));
    }
    let cfg = MicroNetConfig {
        hidden: [dims[0].0, dims[1].0],
        channels: dims[2].0,
        joints,
        w_bins,
        h_bins,
    };
    let expected = MicroNetParams::<f64>::zeros(&cfg).map_err(|e| fmt_err(e.to_string()))?;
    for (layer, &(out, inp)) in expected.layers().zip(&dims) {
        if (layer.out_dim, layer.in_dim) != (out, inp) {
            return Err(fmt_err(format!(
                "layer shape {out}x{inp} inconsistent with the rest of the network"
            )));
        }
    }
    let flat = read_values(&mut r, expected.param_count())?;
    MicroNetParams::from_flat(&cfg, &flat)
}
