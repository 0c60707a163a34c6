//! Decibel conversions used at the configuration boundary.

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm - 30.0)
}

pub fn dbw_to_watts(dbw: f64) -> f64 {
    db_to_linear(dbw)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    linear_to_db(w) + 30.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dbm_and_dbw_agree() {
        assert!((dbm_to_watts(0.0) - 1e-3).abs() < 1e-18);
        assert_eq!(dbm_to_watts(0.0), dbw_to_watts(-30.0));
        assert!((dbw_to_watts(0.0) - 1.0).abs() < 1e-15);
        assert!((watts_to_dbm(1e-3)).abs() < 1e-12);
    }
}
