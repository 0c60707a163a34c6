use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::ChannelMatrix;
use crate::error::{Error, Result};

/// Ordered collection of channel matrices sharing one user count.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    num_users: usize,
    seed: u64,
    samples: Vec<ChannelMatrix>,
}

impl Dataset {
    pub fn new(num_users: usize, seed: u64, samples: Vec<ChannelMatrix>) -> Result<Self> {
        if let Some(bad) = samples.iter().position(|s| s.users() != num_users) {
            return Err(Error::DimensionMismatch(format!(
                "sample {bad} has {} users, dataset has {num_users}",
                samples[bad].users()
            )));
        }
        Ok(Self {
            num_users,
            seed,
            samples,
        })
    }

    pub fn users(&self) -> usize {
        self.num_users
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn samples(&self) -> &[ChannelMatrix] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples `range`, keeping the seed.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            num_users: self.num_users,
            seed: self.seed,
            samples: self.samples[range].to_vec(),
        }
    }
}

const MAGIC: &str = "EEMAX v1";

/// Writes the header line `EEMAX v1 I=<I> n=<N> seed=<seed>` followed by the
/// gains as little-endian `f64` in (sample, receiver, transmitter) order.
pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MAGIC} I={} n={} seed={}", ds.num_users, ds.len(), ds.seed)?;
    for s in &ds.samples {
        for g in s.gains() {
            w.write_all(&g.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(token: Option<&str>, key: &str) -> Result<T> {
    token
        .and_then(|t| t.strip_prefix(key))
        .and_then(|v| v.strip_prefix('='))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::MalformedHeader(format!("expected `{key}=<value>`")))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    r.read_until(b'\n', &mut header)?;
    if header.last() != Some(&b'\n') {
        return Err(Error::MalformedHeader("missing header line".into()));
    }
    let header = std::str::from_utf8(&header[..header.len() - 1])
        .map_err(|_| Error::MalformedHeader("header is not UTF-8".into()))?;
    let rest = header
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::MalformedHeader(format!("header must start with `{MAGIC}`")))?;
    let mut tokens = rest.split_whitespace();
    let users: usize = parse_field(tokens.next(), "I")?;
    let count: usize = parse_field(tokens.next(), "n")?;
    let seed: u64 = parse_field(tokens.next(), "seed")?;
    if tokens.next().is_some() || users == 0 {
        return Err(Error::MalformedHeader(header.to_string()));
    }

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let expected = count * users * users * 8;
    if payload.len() != expected {
        return Err(Error::DimensionMismatch(format!(
            "header promises {count} samples of {users}x{users} ({expected} bytes), payload has {} bytes",
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let samples = values
        .chunks_exact(users * users)
        .map(|g| ChannelMatrix::new(users, g.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(users, seed, samples)
}
