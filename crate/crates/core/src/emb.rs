//! `EMB` binary matrix format.
//!
//! Layout: the 8 magic bytes `CEMGEMB1`, row count as u32 LE, column count
//! as u32 LE, then `rows * cols` f32 LE values in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::optim::Parameters;
use crate::{Error, Result, Scalar};

pub const MAGIC: &[u8; 8] = b"CEMGEMB1";
const HEADER_LEN: usize = 16;

pub fn encode(m: ArrayView2<'_, f32>) -> Vec<u8> {
    let (rows, cols) = m.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * rows * cols);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Array2<f32>> {
    let bad = |msg: String| Error::Emb {
        path: origin.to_path_buf(),
        msg,
    };
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("dimensions overflow".into()))?;
    if body.len() != expected {
        return Err(bad(format!(
            "expected {expected} payload bytes for {rows}x{cols}, found {}",
            body.len()
        )));
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
}

pub fn write(path: &Path, m: ArrayView2<'_, f32>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(m))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Array2<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes, path)
}

/// Write a generic-precision matrix, rounding to f32.
pub fn write_scalar<T: Scalar>(path: &Path, m: ArrayView2<'_, T>) -> Result<()> {
    let m32 = m.mapv(|v| v.as_f64() as f32);
    write(path, m32.view())
}

pub fn read_scalar<T: Scalar>(path: &Path) -> Result<Array2<T>> {
    Ok(read(path)?.mapv(|v| T::of(v as f64)))
}

fn as_2d(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => (1, shape.iter().product()),
    }
}

/// Write every tensor of `p` as `<dir>/<prefix><name>.emb`; vectors become
/// single-row matrices.
pub fn save_params<T: Scalar, P: Parameters<T> + ?Sized>(dir: &Path, prefix: &str, p: &P) -> Result<()> {
    for ((name, shape), data) in p.tensor_specs().into_iter().zip(p.tensors()) {
        let (r, c) = as_2d(&shape);
        let m = ArrayView2::from_shape((r, c), data).expect("spec matches data");
        write_scalar(&dir.join(format!("{prefix}{name}.emb")), m)?;
    }
    Ok(())
}

/// Inverse of [`save_params`]; shapes must match the receiving model.
pub fn load_params<T: Scalar, P: Parameters<T> + ?Sized>(dir: &Path, prefix: &str, p: &mut P) -> Result<()> {
    let specs = p.tensor_specs();
    for ((name, shape), dst) in specs.into_iter().zip(p.tensors_mut()) {
        let path = dir.join(format!("{prefix}{name}.emb"));
        let m: Array2<T> = read_scalar(&path)?;
        let (r, c) = as_2d(&shape);
        if m.dim() != (r, c) {
            return Err(Error::Emb {
                path,
                msg: format!("expected shape {r}x{c}, found {}x{}", m.nrows(), m.ncols()),
            });
        }
        dst.iter_mut().zip(m.iter()).for_each(|(d, s)| *d = *s);
    }
    Ok(())
}
