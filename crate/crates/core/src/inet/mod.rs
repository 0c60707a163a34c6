//! InterferenceNet: a permutation-equivariant network over the `I x I`
//! channel matrix.
//!
//! Every channel `(i, j)` carries a feature vector. A category layer maps
//! each feature through four shared affine+ReLU filters and averages the
//! results over four channel sets relative to `(i, j)`: the channel itself,
//! the other receivers of transmitter `j`, the other transmitters at
//! receiver `i`, and all channels sharing neither. The averaged maps are
//! concatenated with `log10 g_ij`. A final affine layer reads out one value
//! per user from the diagonal channels.

mod mp;
mod params;
mod perm;

use crate::chanmodel::ChannelMatrix;
use crate::diffcore::{MaskedSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use mp::mp_forward;
pub use params::{load_checkpoint, save_checkpoint, FinalLayerParams, LayerParams, NetParams, NetShape, CATEGORIES};
pub use perm::{extraction_matrix, permute, permute_features, permute_vec, Permutation};

/// Smallest box width produced by the β head.
pub const ELL_MIN: f64 = 1e-6;

/// Which output a network produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Lower box bound, unconstrained.
    Alpha,
    /// Box width, clamped below at `ell_min`.
    Beta,
}

/// `log10 g_ij` as a `[1, I, I]` tensor.
pub fn init_input(g: &ChannelMatrix) -> Tensor {
    let n = g.users();
    Tensor::new(vec![1, n, n], g.gains().iter().map(|v| v.log10()).collect()).expect("square gains")
}

/// Stacked `log10` gains of a batch, `[1, B, I, I]`.
pub fn init_input_batch(gs: &[&ChannelMatrix]) -> Result<Tensor> {
    let n = gs.first().map(|g| g.users()).ok_or(Error::EmptyDataset)?;
    if let Some(bad) = gs.iter().position(|g| g.users() != n) {
        return Err(Error::DimensionMismatch(format!(
            "batch mixes {n} and {} users at position {bad}",
            gs[bad].users()
        )));
    }
    let data = gs.iter().flat_map(|g| g.gains().iter().map(|v| v.log10())).collect();
    Tensor::new(vec![1, gs.len(), n, n], data)
}

/// Tape handles of one network's parameters, in [`NetParams::tensors`]
/// order.
#[derive(Clone, Debug)]
pub struct NetVars {
    pub layers: Vec<(Var, Var)>,
    pub final_weight: Var,
    pub final_bias: Var,
    feature_dim: usize,
}

impl NetVars {
    /// Records the parameters as trainable leaves (or constants).
    pub fn bind(tape: &mut Tape, params: &NetParams, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let layers = params
            .layers
            .iter()
            .map(|l| (leaf(&l.weight), leaf(&l.bias)))
            .collect();
        let final_weight = leaf(&params.final_layer.weight);
        let final_bias = leaf(&params.final_layer.bias);
        Self {
            layers,
            final_weight,
            final_bias,
            feature_dim: params.shape.feature_dim,
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.layers.iter().flat_map(|&(w, b)| [w, b]).collect();
        out.push(self.final_weight);
        out.push(self.final_bias);
        out
    }
}

/// One category layer on the tape. `f` is `[d_in, ..., I, I]` and `log_g`
/// is `[1, ..., I, I]` with the same trailing shape.
pub fn layer_on_tape(tape: &mut Tape, f: Var, weight: Var, bias: Var, log_g: Var, feature_dim: usize) -> Result<Var> {
    let h = tape.affine(weight, f, bias)?;
    let h = tape.relu(h);
    let d = feature_dim;
    let c1 = tape.narrow_first(h, 0, d)?;
    let h2 = tape.narrow_first(h, d, d)?;
    let c2 = tape.masked_mean(h2, MaskedSet::SameTransmitter)?;
    let h3 = tape.narrow_first(h, 2 * d, d)?;
    let c3 = tape.masked_mean(h3, MaskedSet::SameReceiver)?;
    let h4 = tape.narrow_first(h, 3 * d, d)?;
    let c4 = tape.masked_mean(h4, MaskedSet::Unrelated)?;
    tape.concat_first(&[log_g, c1, c2, c3, c4])
}

/// Full network on the tape. `log_g` is `[1, B, I, I]`; the result is
/// `[B, I]`.
pub fn net_on_tape(tape: &mut Tape, net: &NetVars, log_g: Var, head: Head, ell_min: f64) -> Result<Var> {
    let shape = tape.value(log_g).shape().to_vec();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::ShapeMismatch {
            op: "net input",
            left: shape,
            right: vec![1, 0, 0, 0],
        });
    }
    let (batch, n) = (shape[1], shape[2]);
    let mut f = log_g;
    for &(w, b) in &net.layers {
        f = layer_on_tape(tape, f, w, b, log_g, net.feature_dim)?;
    }
    let diag = tape.diag(f)?;
    let y = tape.affine(net.final_weight, diag, net.final_bias)?;
    let y = tape.reshape(y, &[batch, n])?;
    Ok(match head {
        Head::Alpha => y,
        Head::Beta => tape.max_scalar(y, ell_min),
    })
}

/// One category layer outside any training context: `f` is `[d_in, I, I]`.
pub fn layer_forward(f: &Tensor, params: &LayerParams, g: &ChannelMatrix) -> Result<Tensor> {
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let w = tape.constant(params.weight.clone());
    let b = tape.constant(params.bias.clone());
    let lg = tape.constant(init_input(g));
    let out = layer_on_tape(&mut tape, fv, w, b, lg, params.out_dim())?;
    Ok(tape.value(out).clone())
}

/// Network outputs for a batch of channels, `[B, I]`.
pub fn net_forward_batch(gs: &[&ChannelMatrix], params: &NetParams, head: Head, ell_min: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let net = NetVars::bind(&mut tape, params, false);
    let lg = tape.constant(init_input_batch(gs)?);
    let out = net_on_tape(&mut tape, &net, lg, head, ell_min)?;
    Ok(tape.value(out).clone())
}

/// Per-user network output for one channel matrix.
pub fn net_forward(g: &ChannelMatrix, params: &NetParams, head: Head, ell_min: f64) -> Result<Vec<f64>> {
    Ok(net_forward_batch(&[g], params, head, ell_min)?.into_data())
}

#[cfg(test)]
mod tests;
