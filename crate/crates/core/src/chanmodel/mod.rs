//! Multi-cell uplink scenarios and noise-normalized equivalent gains.
//!
//! Users are dropped uniformly in a rectangular area served by a fixed set
//! of multi-antenna base stations. Each user is served by the station with
//! the strongest matched-filter gain, and every link is reduced to a scalar
//! gain through the serving link's matched filter.

mod dataset;
pub mod units;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{load_dataset, save_dataset, Dataset};

/// Speed of light, m/s.
const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Path-loss reference distance, m.
const REFERENCE_DISTANCE_M: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub num_users: usize,
    pub num_bs: usize,
    pub bs_antennas: usize,
    /// Base-station coordinates, km.
    pub bs_positions: Vec<[f64; 2]>,
    /// `[x_min, y_min, x_max, y_max]`, km.
    pub area: [f64; 4],
    pub carrier_freq_hz: f64,
    pub decay_factor: f64,
    pub noise_figure_db: f64,
    pub noise_density_dbm_hz: f64,
    pub bandwidth_hz: f64,
    /// Static circuit power `P_c`, W.
    pub static_power_w: f64,
    /// Power-amplifier inefficiency `mu`.
    pub amp_inefficiency: f64,
    pub p_max_w: f64,
    pub rng_seed: u64,
    /// Divide gains by the receiver noise power.
    pub normalize_noise: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_users: 4,
            num_bs: 4,
            bs_antennas: 2,
            bs_positions: vec![[0.5, 0.5], [0.5, 1.5], [1.5, 1.5], [1.5, 0.5]],
            area: [0.0, 0.0, 2.0, 2.0],
            carrier_freq_hz: 1.8e9,
            decay_factor: 4.5,
            noise_figure_db: 3.0,
            noise_density_dbm_hz: -174.0,
            bandwidth_hz: 180e3,
            static_power_w: 1.0,
            amp_inefficiency: 4.0,
            p_max_w: 1.0,
            rng_seed: 0,
            normalize_noise: true,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_users == 0 {
            return bad("num_users must be at least 1");
        }
        if self.num_bs == 0 || self.bs_antennas == 0 {
            return bad("num_bs and bs_antennas must be at least 1");
        }
        if !(self.p_max_w > 0.0 && self.bandwidth_hz > 0.0) {
            return bad("p_max and bandwidth must be positive");
        }
        if !(self.static_power_w > 0.0 && self.amp_inefficiency > 0.0) {
            return bad("static power and amplifier inefficiency must be positive");
        }
        if self.bs_positions.len() != self.num_bs {
            return bad("bs_positions must list exactly num_bs coordinates");
        }
        let [x0, y0, x1, y1] = self.area;
        if !(x1 > x0 && y1 > y0) {
            return bad("area must have positive extent");
        }
        if self
            .bs_positions
            .iter()
            .any(|&[x, y]| x < x0 || x > x1 || y < y0 || y > y1)
        {
            return bad("every base station must lie inside the area");
        }
        Ok(())
    }

    /// Receiver noise power `F * N0 * B`, W.
    pub fn noise_power_w(&self) -> f64 {
        units::db_to_linear(self.noise_figure_db)
            * units::dbm_to_watts(self.noise_density_dbm_hz)
            * self.bandwidth_hz
    }

    /// Log-distance path gain (linear, <= 1) at `distance_m`, anchored to
    /// free-space loss at the reference distance.
    pub fn path_gain(&self, distance_m: f64) -> f64 {
        let d = distance_m.max(REFERENCE_DISTANCE_M);
        let wavelength = SPEED_OF_LIGHT / self.carrier_freq_hz;
        let pl0_db = 20.0 * (4.0 * std::f64::consts::PI * REFERENCE_DISTANCE_M / wavelength).log10();
        let pl_db = pl0_db + 10.0 * self.decay_factor * (d / REFERENCE_DISTANCE_M).log10();
        units::db_to_linear(-pl_db)
    }
}

/// `I x I` matrix of positive equivalent gains. Entry `(i, j)` is the gain
/// of transmitting user `j` at the base station serving user `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMatrix {
    n: usize,
    gains: Vec<f64>,
}

impl ChannelMatrix {
    /// Row-major gains; every entry must be positive and finite.
    pub fn new(n: usize, gains: Vec<f64>) -> Result<Self> {
        if n == 0 || gains.len() != n * n {
            return Err(Error::DimensionMismatch(format!(
                "expected {n}x{n} gains, got {} values",
                gains.len()
            )));
        }
        for (k, &g) in gains.iter().enumerate() {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::NonPositiveGain {
                    row: k / n,
                    col: k % n,
                    value: g,
                });
            }
        }
        Ok(Self { n, gains })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch("rows must form a square matrix".into()));
        }
        Self::new(n, rows.concat())
    }

    pub fn users(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, receiver: usize, transmitter: usize) -> f64 {
        self.gains[receiver * self.n + transmitter]
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }
}

/// One drawn network snapshot.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub channel: ChannelMatrix,
    /// Serving base station of each user.
    pub assignment: Vec<usize>,
    pub user_positions: Vec<[f64; 2]>,
    /// Matched-filter self gain `||h||^2` of each user at each base
    /// station, in the same normalization as `channel`.
    pub direct_gains: Vec<Vec<f64>>,
}

/// `|w^H h_src|^2` with `w = h_serve / ||h_serve||`.
pub fn matched_filter_gain(h_serve: &[Complex64], h_src: &[Complex64]) -> Result<f64> {
    if h_serve.len() != h_src.len() {
        return Err(Error::DimensionMismatch(format!(
            "antenna counts differ: {} vs {}",
            h_serve.len(),
            h_src.len()
        )));
    }
    let norm_sq: f64 = h_serve.iter().map(|h| h.norm_sqr()).sum();
    if norm_sq == 0.0 {
        return Err(Error::ZeroServingVector);
    }
    let inner: Complex64 = h_serve.iter().zip(h_src).map(|(w, h)| w.conj() * h).sum();
    Ok(inner.norm_sqr() / norm_sq)
}

/// Draws user positions and small-scale fading and reduces them to an
/// equivalent gain matrix.
pub fn draw_scenario<R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> Result<Scenario> {
    config.validate()?;
    let (n, m, nr) = (config.num_users, config.num_bs, config.bs_antennas);
    let [x0, y0, x1, y1] = config.area;
    let scale = if config.normalize_noise {
        1.0 / config.noise_power_w()
    } else {
        1.0
    };

    let user_positions: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.gen_range(x0..x1), rng.gen_range(y0..y1)])
        .collect();

    // channels[user][bs][antenna]
    let mut channels = vec![vec![vec![Complex64::new(0.0, 0.0); nr]; m]; n];
    for (u, pos) in user_positions.iter().enumerate() {
        for (b, bs) in config.bs_positions.iter().enumerate() {
            let d_m = 1e3 * ((pos[0] - bs[0]).powi(2) + (pos[1] - bs[1]).powi(2)).sqrt();
            let amp = config.path_gain(d_m).sqrt();
            for h in channels[u][b].iter_mut() {
                let a: f64 = rng.sample(StandardNormal);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                *h = Complex64::from_polar(amp * a, phase);
            }
        }
    }

    let direct_gains: Vec<Vec<f64>> = channels
        .iter()
        .map(|per_bs| {
            per_bs
                .iter()
                .map(|h| scale * h.iter().map(|c| c.norm_sqr()).sum::<f64>())
                .collect()
        })
        .collect();
    let assignment: Vec<usize> = direct_gains
        .iter()
        .map(|g| {
            g.iter()
                .enumerate()
                .fold(0, |best, (b, &v)| if v > g[best] { b } else { best })
        })
        .collect();

    let mut gains = vec![0.0; n * n];
    for i in 0..n {
        let serve = &channels[i][assignment[i]];
        for j in 0..n {
            let src = &channels[j][assignment[i]];
            gains[i * n + j] = scale * matched_filter_gain(serve, src)?;
        }
    }
    Ok(Scenario {
        channel: ChannelMatrix::new(n, gains)?,
        assignment,
        user_positions,
        direct_gains,
    })
}

/// Independent RNG stream for sample `index` of a dataset seeded by `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `count` scenarios, sample `k` drawn from stream `(seed, k)`.
pub fn generate(config: &ScenarioConfig, count: usize, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let samples = (0..count)
        .map(|k| draw_scenario(config, &mut sample_rng(seed, k as u64)).map(|s| s.channel))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(config.num_users, seed, samples)
}
