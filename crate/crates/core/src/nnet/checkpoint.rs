//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `LTNN1`, `u32` layer count, then per layer
//! `u32` rows, `u32` cols, `rows*cols` row-major `f64` weights, `rows` `f64`
//! biases and one activation tag byte. Tag 3 (cosine head) is followed by
//! its `f64` scale.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Activation, DenseNet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 5] = b"LTNN1";

fn tag(act: Activation) -> u8 {
    match act {
        Activation::Identity => 0,
        Activation::Relu => 1,
        Activation::Sigmoid => 2,
        Activation::Cosine { .. } => 3,
    }
}

pub fn write_checkpoint(net: &DenseNet, out: &mut impl Write) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(net.num_layers() as u32).to_le_bytes())?;
    for k in 0..net.num_layers() {
        let s = net.shapes()[k];
        out.write_all(&(s.outputs as u32).to_le_bytes())?;
        out.write_all(&(s.inputs as u32).to_le_bytes())?;
        for v in net.weights(k).iter().chain(net.bias(k).iter()) {
            out.write_all(&v.to_le_bytes())?;
        }
        let act = net.activations()[k];
        out.write_all(&[tag(act)])?;
        if let Activation::Cosine { scale } = act {
            out.write_all(&scale.to_le_bytes())?;
        }
    }
    Ok(())
}

fn bad(msg: impl Into<String>) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, msg.into())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_checkpoint(r: &mut impl Read) -> std::io::Result<DenseNet> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not an LTNN1 checkpoint"));
    }
    let layers = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(layers);
    for _ in 0..layers {
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let mut w = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            w.push(read_f64(r)?);
        }
        let mut b = Vec::with_capacity(rows);
        for _ in 0..rows {
            b.push(read_f64(r)?);
        }
        let mut t = [0u8; 1];
        r.read_exact(&mut t)?;
        let act = match t[0] {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Sigmoid,
            3 => Activation::Cosine { scale: read_f64(r)? },
            other => return Err(bad(format!("unknown activation tag {other}"))),
        };
        let w = Array2::from_shape_vec((rows, cols), w).map_err(|e| bad(e.to_string()))?;
        out.push((w, Array1::from(b), act));
    }
    DenseNet::from_layers(out).map_err(|e| bad(e.to_string()))
}

pub fn save_checkpoint(net: &DenseNet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(net.num_params() * 8 + 64);
    write_checkpoint(net, &mut buf).expect("writing to memory");
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DenseNet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut bytes.as_slice()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    #[test]
    fn round_trip_preserves_bits_and_heads() {
        let mut net = DenseNet::init(&[3, 5, 4], Activation::Identity, &mut SeedTree::new(1).rng()).unwrap();
        net.set_activation(1, Activation::Cosine { scale: 16.0 });
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        assert_eq!(&buf[..5], b"LTNN1");
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_checkpoint(&mut &b"LTNN2\0\0\0\0"[..]).is_err());
        let net = DenseNet::zeros(&[2, 2], &[Activation::Sigmoid]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
