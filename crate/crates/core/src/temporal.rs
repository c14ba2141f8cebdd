//! Sinusoidal encoding of event times.
//!
//! `v[2k] = sin(tau / base^(2k/dim))`, `v[2k+1] = cos(tau / base^(2k/dim))`
//! with `tau = t / time_scale`. The width equals the backbone model width so
//! temporal rows can sit next to token-embedding rows in one input matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mat, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalEncodingConfig {
    pub dim: usize,
    pub base: f64,
    pub time_scale: f64,
}

impl Default for TemporalEncodingConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            base: 10_000.0,
            time_scale: 1.0,
        }
    }
}

impl TemporalEncodingConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(Error::Config(format!(
                "temporal dim must be even and positive, got {}",
                self.dim
            )));
        }
        if !(self.base > 1.0) {
            return Err(Error::Config(format!("temporal base must exceed 1, got {}", self.base)));
        }
        if !(self.time_scale > 0.0) {
            return Err(Error::Config(format!(
                "time_scale must be positive, got {}",
                self.time_scale
            )));
        }
        Ok(())
    }

    fn frequencies(&self) -> impl Iterator<Item = f64> + '_ {
        let dim = self.dim as f64;
        (0..self.dim / 2).map(move |k| self.base.powf(-(2.0 * k as f64) / dim))
    }
}

/// Encode one time. Computed in double precision, then cast.
pub fn encode_time<T: Scalar>(t: f64, cfg: &TemporalEncodingConfig) -> Result<Vec<T>> {
    cfg.validate()?;
    if !t.is_finite() {
        return Err(Error::NonFinite(format!("event time {t}")));
    }
    if t < 0.0 {
        return Err(Error::Validation(format!("negative event time {t}")));
    }
    let tau = t / cfg.time_scale;
    let mut out = Vec::with_capacity(cfg.dim);
    for w in cfg.frequencies() {
        let (s, c) = (tau * w).sin_cos();
        out.push(T::from_f64(s));
        out.push(T::from_f64(c));
    }
    Ok(out)
}

/// Row `j` is `encode_time(ts[j])`.
pub fn encode_times<T: Scalar>(ts: &[f64], cfg: &TemporalEncodingConfig) -> Result<Mat<T>> {
    cfg.validate()?;
    let mut data = Vec::with_capacity(ts.len() * cfg.dim);
    for &t in ts {
        data.extend(encode_time::<T>(t, cfg)?);
    }
    Mat::from_vec(ts.len(), cfg.dim, data)
}
