use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Number of channel categories per layer.
pub const CATEGORIES: usize = 4;

/// Depth and width of an InterferenceNet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    /// Total layer count `L`, including the final diagonal layer.
    pub layers: usize,
    /// Output width of each category.
    pub feature_dim: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        Self {
            layers: 5,
            feature_dim: 20,
        }
    }
}

impl NetShape {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 || self.feature_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "network needs at least 2 layers and a positive feature dim, got L={} d={}",
                self.layers, self.feature_dim
            )));
        }
        Ok(())
    }

    /// Width of the concatenated layer output.
    pub fn concat_dim(&self) -> usize {
        1 + CATEGORIES * self.feature_dim
    }

    /// Input width of category layer `l` (0-based).
    pub fn in_dim(&self, l: usize) -> usize {
        if l == 0 {
            1
        } else {
            self.concat_dim()
        }
    }

    /// Trainable scalars of one network.
    pub fn param_count(&self) -> usize {
        let d = self.feature_dim;
        let hidden: usize = (0..self.layers - 1)
            .map(|l| CATEGORIES * (d * self.in_dim(l) + d))
            .sum();
        hidden + self.concat_dim() + 1
    }
}

/// Weights of one category layer with the four categories stacked along
/// the output dimension: rows `k*d .. (k+1)*d` belong to category `k+1`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// `[4d, in_dim]`.
    pub weight: Tensor,
    /// `[4d]`.
    pub bias: Tensor,
}

impl LayerParams {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[CATEGORIES * out_dim, in_dim]),
            bias: Tensor::zeros(&[CATEGORIES * out_dim]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.bias.len() / CATEGORIES
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Weight rows of category `k` (1-based), row-major `[d, in_dim]`.
    pub fn category_weight(&self, k: usize) -> &[f64] {
        let rows = self.out_dim() * self.in_dim();
        &self.weight.data()[(k - 1) * rows..k * rows]
    }

    pub fn category_bias(&self, k: usize) -> &[f64] {
        let d = self.out_dim();
        &self.bias.data()[(k - 1) * d..k * d]
    }
}

/// Diagonal affine read-out `w · f_jj + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalLayerParams {
    /// `[1, in_dim]`.
    pub weight: Tensor,
    /// `[1]`.
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    pub shape: NetShape,
    pub layers: Vec<LayerParams>,
    pub final_layer: FinalLayerParams,
}

impl NetParams {
    /// All-zero parameters.
    pub fn zeros(shape: NetShape) -> Result<Self> {
        shape.validate()?;
        let layers = (0..shape.layers - 1)
            .map(|l| LayerParams::zeros(shape.feature_dim, shape.in_dim(l)))
            .collect();
        Ok(Self {
            shape,
            layers,
            final_layer: FinalLayerParams {
                weight: Tensor::zeros(&[1, shape.concat_dim()]),
                bias: Tensor::zeros(&[1]),
            },
        })
    }

    /// Glorot-uniform hidden weights and zero biases. The read-out weights
    /// start at zero, so the initial output equals `final_bias` for every
    /// channel matrix.
    pub fn init<R: Rng + ?Sized>(shape: NetShape, final_bias: f64, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(shape)?;
        for layer in &mut p.layers {
            let (fan_out, fan_in) = (layer.out_dim(), layer.in_dim());
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            layer
                .weight
                .data_mut()
                .iter_mut()
                .for_each(|w| *w = rng.gen_range(-limit..limit));
        }
        p.final_layer.bias.data_mut()[0] = final_bias;
        Ok(p)
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Parameter tensors in checkpoint order: for each category layer its
    /// stacked weight then bias, then the read-out weight and bias.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.final_layer.weight);
        out.push(&self.final_layer.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.final_layer.weight);
        out.push(&mut self.final_layer.bias);
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn from_flat(shape: NetShape, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(shape)?;
        if flat.len() != p.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "network with L={} d={} has {} parameters, got {}",
                shape.layers,
                shape.feature_dim,
                p.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for t in p.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(p)
    }
}

const MAGIC: &str = "EEMAX-NET v1";

/// Writes `EEMAX-NET v1 L=<L> d=<dim>` followed by the α then β parameters
/// as little-endian `f64` in [`NetParams::tensors`] order.
pub fn save_checkpoint(path: impl AsRef<Path>, alpha: &NetParams, beta: &NetParams) -> Result<()> {
    if alpha.shape != beta.shape {
        return Err(Error::DimensionMismatch("alpha and beta networks differ in shape".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MAGIC} L={} d={}", alpha.shape.layers, alpha.shape.feature_dim)?;
    for v in alpha.to_flat().into_iter().chain(beta.to_flat()) {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn field(token: Option<&str>, key: &str) -> Result<usize> {
    token
        .and_then(|t| t.strip_prefix(key))
        .and_then(|t| t.strip_prefix('='))
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::MalformedHeader(format!("expected `{key}=<count>`")))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(NetParams, NetParams)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = String::new();
    r.read_line(&mut header)
        .map_err(|_| Error::MalformedHeader("checkpoint header is not UTF-8".into()))?;
    let line = header
        .strip_suffix('\n')
        .ok_or_else(|| Error::MalformedHeader("missing checkpoint header".into()))?;
    let rest = line
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::MalformedHeader(format!("checkpoint must start with `{MAGIC}`")))?;
    let mut tokens = rest.split_whitespace();
    let shape = NetShape {
        layers: field(tokens.next(), "L")?,
        feature_dim: field(tokens.next(), "d")?,
    };
    if tokens.next().is_some() {
        return Err(Error::MalformedHeader(line.to_string()));
    }
    shape
        .validate()
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let per_net = shape.param_count();
    if payload.len() != 2 * per_net * 8 {
        return Err(Error::DimensionMismatch(format!(
            "checkpoint for L={} d={} needs {} bytes, has {}",
            shape.layers,
            shape.feature_dim,
            2 * per_net * 8,
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((
        NetParams::from_flat(shape, &values[..per_net])?,
        NetParams::from_flat(shape, &values[per_net..])?,
    ))
}
