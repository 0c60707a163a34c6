use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Update rule used for gradient ascent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adaptive moments with `(0.9, 0.999, 1e-8)`.
    #[default]
    Adam,
    /// Plain stochastic gradient ascent.
    Sga,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "sga" => Ok(Self::Sga),
            other => Err(Error::InvalidConfig(format!("unknown optimizer `{other}`, expected adam or sga"))),
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer state over a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub steps: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        let moments = if kind == OptimizerKind::Adam { len } else { 0 };
        Self {
            kind,
            steps: 0,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
        }
    }

    /// One ascent step: `params += lr * direction(grads)`. Tensors are
    /// visited in order and treated as one concatenated vector.
    pub fn ascend(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        let total: usize = params.iter().map(|p| p.len()).sum();
        if self.kind == OptimizerKind::Adam && self.m.len() != total {
            return Err(Error::State(format!("optimizer holds {} moments for {total} parameters", self.m.len())));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        let mut offset = 0;
        for (p, g) in params.into_iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let n = p.len();
            match self.kind {
                OptimizerKind::Sga => {
                    for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x += lr * d;
                    }
                }
                OptimizerKind::Adam => {
                    let m = &mut self.m[offset..offset + n];
                    let v = &mut self.v[offset..offset + n];
                    for (((x, d), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                        *m = BETA1 * *m + (1.0 - BETA1) * d;
                        *v = BETA2 * *v + (1.0 - BETA2) * d * d;
                        *x += lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
            offset += n;
        }
        Ok(())
    }
}
