//! Nine-significant-digit float output for JSON and CSV files.

use serde::Serializer;

/// Rounds to nine significant decimal digits.
pub fn round9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

/// Shortest decimal rendering of `round9(x)`.
pub fn fmt9(x: f64) -> String {
    // Debug keeps a trailing ".0" on whole numbers and switches to
    // exponent notation for very large or small magnitudes.
    format!("{:?}", round9(x))
}

pub fn ser<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(round9(*x))
}

pub fn ser_vec<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(xs.iter().map(|&x| round9(x)))
}

pub fn ser_mat<S: Serializer>(xs: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(
        xs.iter()
            .map(|row| row.iter().map(|&x| round9(x)).collect::<Vec<_>>()),
    )
}
