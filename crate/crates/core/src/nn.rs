//! Fully connected layers with f32 storage and f64 arithmetic, plus the
//! little-endian layer encoding shared by both weight sections.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub out_dim: usize,
    pub in_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl DenseLayer {
    pub fn new(out_dim: usize, in_dim: usize, weight: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if out_dim == 0 || in_dim == 0 {
            return Err(Error::Config("layer dimensions must be positive".into()));
        }
        if weight.len() != out_dim * in_dim || bias.len() != out_dim {
            return Err(Error::Config(format!(
                "layer {in_dim}->{out_dim}: got {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        let layer = Self {
            out_dim,
            in_dim,
            weight,
            bias,
        };
        if !layer.is_finite() {
            return Err(Error::Config("layer contains non-finite parameters".into()));
        }
        Ok(layer)
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            out_dim,
            in_dim,
            weight: vec![0.0; out_dim * in_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// He-scaled uniform init, `U(-sqrt(6/in), sqrt(6/in))`, zero bias.
    pub fn he_uniform<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt() as f32;
        let weight = (0..out_dim * in_dim).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            out_dim,
            in_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    pub fn row(&self, o: usize) -> &[f32] {
        &self.weight[o * self.in_dim..(o + 1) * self.in_dim]
    }

    /// `out = W x + b`.
    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        for (o, slot) in out.iter_mut().enumerate() {
            *slot = self.bias[o] as f64 + dot(self.row(o), x);
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim];
        self.forward_into(x, &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&(self.out_dim as u32).to_le_bytes())?;
        w.write_all(&(self.in_dim as u32).to_le_bytes())?;
        for v in self.weight.iter().chain(&self.bias) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let out_dim = read_u32(r)? as usize;
        let in_dim = read_u32(r)? as usize;
        if out_dim == 0 || in_dim == 0 {
            return Err(Error::Format(format!("layer with zero dimension ({in_dim}->{out_dim})")));
        }
        let weight = read_f32s(r, out_dim * in_dim)?;
        let bias = read_f32s(r, out_dim)?;
        let layer = Self {
            out_dim,
            in_dim,
            weight,
            bias,
        };
        if !layer.is_finite() {
            return Err(Error::Format("non-finite parameter".into()));
        }
        Ok(layer)
    }
}

#[inline]
pub(crate) fn dot(w: &[f32], x: &[f64]) -> f64 {
    // four accumulators; fixed order keeps results reproducible
    let mut acc = [0.0f64; 4];
    let chunks = w.len() / 4 * 4;
    for k in (0..chunks).step_by(4) {
        acc[0] += w[k] as f64 * x[k];
        acc[1] += w[k + 1] as f64 * x[k + 1];
        acc[2] += w[k + 2] as f64 * x[k + 2];
        acc[3] += w[k + 3] as f64 * x[k + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in chunks..w.len() {
        s += w[k] as f64 * x[k];
    }
    s
}

#[inline]
pub(crate) fn relu_in_place(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Checks that each layer's input width matches the previous output width.
pub fn check_chain(layers: &[DenseLayer]) -> std::result::Result<(), String> {
    for pair in layers.windows(2) {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(format!(
                "layer output {} does not feed next layer input {}",
                pair[0].out_dim, pair[1].in_dim
            ));
        }
    }
    Ok(())
}

/// Writes `magic`, a u32 layer count and every layer.
pub fn write_section<W: Write>(w: &mut W, magic: &[u8; 4], layers: &[DenseLayer]) -> std::io::Result<()> {
    w.write_all(magic)?;
    w.write_all(&(layers.len() as u32).to_le_bytes())?;
    for layer in layers {
        layer.write_to(w)?;
    }
    Ok(())
}

pub fn read_section<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<Vec<DenseLayer>> {
    let mut got = [0u8; 4];
    read_exact(r, &mut got)?;
    if &got != magic {
        return Err(Error::Format(format!(
            "bad magic: expected {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&got)
        )));
    }
    let count = read_u32(r)? as usize;
    if count == 0 {
        return Err(Error::Format("section has no layers".into()));
    }
    let layers = (0..count).map(|_| DenseLayer::read_from(r)).collect::<Result<Vec<_>>>()?;
    check_chain(&layers).map_err(Error::Format)?;
    Ok(layers)
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
        _ => Error::Format(e.to_string()),
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(f32::from_le_bytes(b))
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    // cap the up-front allocation so a corrupt header cannot request gigabytes
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        out.push(read_f32(r)?);
    }
    Ok(out)
}
