use crate::chanmodel::ChannelMatrix;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Permutation matrix `P`, stored as the column index of the single one in
/// each row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    map: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Self { map: (0..n).collect() }
    }

    /// `P[i][map[i]] = 1`.
    pub fn from_indices(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &m in &map {
            if m >= map.len() || std::mem::replace(&mut seen[m], true) {
                return Err(Error::InvalidPermutation(format!("{map:?} is not a bijection")));
            }
        }
        Ok(Self { map })
    }

    /// Accepts a square 0/1 matrix whose rows and columns each sum to one.
    pub fn from_matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut map = Vec::with_capacity(n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidPermutation(format!("row {i} has {} entries, expected {n}", row.len())));
            }
            if let Some(bad) = row.iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidPermutation(format!("entry {bad} in row {i} is not 0 or 1")));
            }
            let ones: Vec<usize> = (0..n).filter(|&j| row[j] == 1.0).collect();
            if ones.len() != 1 {
                return Err(Error::InvalidPermutation(format!("row {i} sums to {}", ones.len())));
            }
            map.push(ones[0]);
        }
        Self::from_indices(map)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.map
    }

    /// `P^T`, which is also `P^{-1}`.
    pub fn transpose(&self) -> Self {
        let mut inv = vec![0; self.map.len()];
        for (i, &m) in self.map.iter().enumerate() {
            inv[m] = i;
        }
        Self { map: inv }
    }

    pub fn matrix(&self) -> Tensor {
        let n = self.map.len();
        let mut t = Tensor::zeros(&[n, n]);
        for (i, &m) in self.map.iter().enumerate() {
            t.data_mut()[i * n + m] = 1.0;
        }
        t
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.map.len() != n {
            return Err(Error::InvalidPermutation(format!(
                "permutation of size {} applied to {n} users",
                self.map.len()
            )));
        }
        Ok(())
    }
}

/// `P G P^T`: entry `(i, j)` becomes `G[map[i]][map[j]]`.
pub fn permute(g: &ChannelMatrix, p: &Permutation) -> Result<ChannelMatrix> {
    let n = g.users();
    p.check(n)?;
    let m = p.indices();
    let gains = (0..n * n).map(|k| g.get(m[k / n], m[k % n])).collect();
    ChannelMatrix::new(n, gains)
}

/// `v P^T`: entry `i` becomes `v[map[i]]`.
pub fn permute_vec(v: &[f64], p: &Permutation) -> Result<Vec<f64>> {
    p.check(v.len())?;
    Ok(p.indices().iter().map(|&m| v[m]).collect())
}

/// `P ∘ F ∘ P^T` applied to every trailing `I x I` block of a feature tensor.
pub fn permute_features(f: &Tensor, p: &Permutation) -> Result<Tensor> {
    let shape = f.shape();
    let r = shape.len();
    if r < 2 || shape[r - 1] != shape[r - 2] {
        return Err(Error::DimensionMismatch(format!("feature tensor {shape:?} has no square tail")));
    }
    let n = shape[r - 1];
    p.check(n)?;
    let m = p.indices();
    let mut out = f.clone();
    for (dst, src) in out.data_mut().chunks_exact_mut(n * n).zip(f.data().chunks_exact(n * n)) {
        for k in 0..n * n {
            dst[k] = src[m[k / n] * n + m[k % n]];
        }
    }
    Ok(out)
}

/// Extraction matrix `E = 1 1^T - I`.
pub fn extraction_matrix(n: usize) -> Tensor {
    let mut t = Tensor::full(&[n, n], 1.0);
    for i in 0..n {
        t.data_mut()[i * n + i] = 0.0;
    }
    t
}
