//! Message-passing form of the network, written with plain loops.
//!
//! Each receiver row `i` is a node holding one feature vector per column.
//! Per layer a node emits the category-2 activations of its row and the
//! row-masked category-4 activations as its message, neighbours' messages
//! are averaged, and the node update concatenates `log10 g`, its own
//! category-1 and row-masked category-3 activations with the aggregate.

use super::{Head, NetParams, CATEGORIES};
use crate::chanmodel::ChannelMatrix;
use crate::error::Result;

/// `relu(W x + b)` for the category-`k` block of a stacked layer.
fn filter(weight: &[f64], bias: &[f64], k: usize, d: usize, x: &[f64]) -> Vec<f64> {
    let in_dim = x.len();
    (0..d)
        .map(|r| {
            let row = (k * d + r) * in_dim;
            let z = bias[k * d + r] + (0..in_dim).map(|c| weight[row + c] * x[c]).sum::<f64>();
            z.max(0.0)
        })
        .collect()
}

/// Mean over `j' != j` of row vectors `rows[j']`, for every `j`.
fn mask_columns(rows: &[Vec<f64>], d: usize) -> Vec<Vec<f64>> {
    let n = rows.len();
    (0..n)
        .map(|j| {
            let mut acc = vec![0.0; d];
            if n > 1 {
                for (p, r) in rows.iter().enumerate() {
                    if p != j {
                        acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
                    }
                }
                acc.iter_mut().for_each(|a| *a /= (n - 1) as f64);
            }
            acc
        })
        .collect()
}

struct Message {
    same_transmitter: Vec<Vec<f64>>,
    unrelated: Vec<Vec<f64>>,
}

/// Same result as [`net_forward`](super::net_forward), computed node by
/// node.
pub fn mp_forward(g: &ChannelMatrix, params: &NetParams, head: Head, ell_min: f64) -> Result<Vec<f64>> {
    let n = g.users();
    let d = params.shape.feature_dim;
    let log_g: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| g.get(i, j).log10()).collect()).collect();
    // node i, column j -> feature vector
    let mut feats: Vec<Vec<Vec<f64>>> = log_g.iter().map(|row| row.iter().map(|&v| vec![v]).collect()).collect();

    for layer in &params.layers {
        let (w, b) = (layer.weight.data(), layer.bias.data());
        let acts: Vec<[Vec<Vec<f64>>; CATEGORIES]> = feats
            .iter()
            .map(|row| std::array::from_fn(|k| row.iter().map(|x| filter(w, b, k, d, x)).collect()))
            .collect();

        let messages: Vec<Message> = acts
            .iter()
            .map(|a| Message {
                same_transmitter: a[1].clone(),
                unrelated: mask_columns(&a[3], d),
            })
            .collect();

        let mut next = Vec::with_capacity(n);
        for (i, a) in acts.iter().enumerate() {
            let mut agg_st = vec![vec![0.0; d]; n];
            let mut agg_un = vec![vec![0.0; d]; n];
            if n > 1 {
                for (k, m) in messages.iter().enumerate() {
                    if k == i {
                        continue;
                    }
                    for j in 0..n {
                        agg_st[j].iter_mut().zip(&m.same_transmitter[j]).for_each(|(x, v)| *x += v);
                        agg_un[j].iter_mut().zip(&m.unrelated[j]).for_each(|(x, v)| *x += v);
                    }
                }
                let m = (n - 1) as f64;
                agg_st.iter_mut().chain(agg_un.iter_mut()).flatten().for_each(|x| *x /= m);
            }
            let same_receiver = mask_columns(&a[2], d);
            let row = (0..n)
                .map(|j| {
                    let mut f = Vec::with_capacity(1 + CATEGORIES * d);
                    f.push(log_g[i][j]);
                    f.extend(&a[0][j]);
                    f.extend(&agg_st[j]);
                    f.extend(&same_receiver[j]);
                    f.extend(&agg_un[j]);
                    f
                })
                .collect();
            next.push(row);
        }
        feats = next;
    }

    let w = params.final_layer.weight.data();
    let b = params.final_layer.bias.data()[0];
    Ok((0..n)
        .map(|j| {
            let y = b + w.iter().zip(&feats[j][j]).map(|(w, f)| w * f).sum::<f64>();
            match head {
                Head::Alpha => y,
                Head::Beta => y.max(ell_min),
            }
        })
        .collect())
}
