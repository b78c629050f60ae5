//! Continuous rotary positional encoding: channel pair `(2r, 2r+1)` of a
//! head vector is rotated by `omega_r * s * p`, where the position `p` is a
//! real-valued chart coordinate, `omega_r = theta^(-2r/d_h)`, and `s` is a
//! fixed angular scale. Scores then depend on positions only through their
//! difference.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

pub const DEFAULT_THETA: f64 = 10_000.0;
/// Chart coordinates live in [-1, 1]; scaling by pi spreads the lowest
/// frequency over a half turn.
pub const DEFAULT_SCALE: f64 = std::f64::consts::PI;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub theta: f64,
    /// Multiplies the position before rotation.
    pub scale: f64,
}

impl RopeConfig {
    pub fn new(head_dim: usize, theta: f64, scale: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::Config(format!("head_dim must be even and positive, got {head_dim}")));
        }
        if !(theta > 0.0) {
            return Err(Error::Config(format!("theta must be positive, got {theta}")));
        }
        Ok(RopeConfig { head_dim, theta, scale })
    }

    pub fn with_defaults(head_dim: usize) -> Result<Self> {
        Self::new(head_dim, DEFAULT_THETA, DEFAULT_SCALE)
    }

    /// `omega_r = theta^(-2r / d_h)` for `r = 0 .. d_h/2`.
    pub fn frequencies<F: Scalar>(&self) -> Vec<F> {
        (0..self.head_dim / 2)
            .map(|r| F::c(self.theta.powf(-2.0 * r as f64 / self.head_dim as f64)))
            .collect()
    }

    /// Frequencies premultiplied by the angular scale, as used on positions.
    pub fn scaled_frequencies<F: Scalar>(&self) -> Vec<F> {
        let s = F::c(self.scale);
        self.frequencies::<F>().into_iter().map(|w| w * s).collect()
    }
}

/// Rotate every channel pair of `v` by its angle at position `p`.
pub fn rope_apply<F: Scalar>(cfg: &RopeConfig, v: &[F], p: F) -> Result<Vec<F>> {
    if v.len() != cfg.head_dim {
        return Err(Error::Shape {
            op: "rope_apply",
            detail: format!("vector length {} vs head_dim {}", v.len(), cfg.head_dim),
        });
    }
    let freqs = cfg.scaled_frequencies::<F>();
    let mut out = Vec::with_capacity(v.len());
    for (r, w) in freqs.iter().enumerate() {
        let angle = *w * p;
        let (sin, cos) = (angle.sin(), angle.cos());
        let a = v[2 * r];
        let b = v[2 * r + 1];
        out.push(a * cos - b * sin);
        out.push(a * sin + b * cos);
    }
    Ok(out)
}

/// Attention logit between rotated query and key.
pub fn rope_score<F: Scalar>(cfg: &RopeConfig, q: &[F], k: &[F], p_q: F, p_k: F) -> Result<F> {
    if q.len() != k.len() {
        return Err(Error::Shape {
            op: "rope_score",
            detail: format!("query length {} vs key length {}", q.len(), k.len()),
        });
    }
    let qr = rope_apply(cfg, q, p_q)?;
    let kr = rope_apply(cfg, k, p_k)?;
    Ok(qr.iter().zip(&kr).map(|(a, b)| *a * *b).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, rng_from_seed};

    #[test]
    fn zero_position_is_identity() {
        let cfg = RopeConfig::with_defaults(8).unwrap();
        let v = vec![0.3, -1.2, 0.7, 2.0, -0.4, 0.1, 1.0, -1.0];
        let out = rope_apply(&cfg, &v, 0.0).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn unit_rotation_in_two_dims() {
        // d_h = 2 means omega_0 = 1; with unit scale, (1, 0) at p = pi/2
        // rotates to (0, 1).
        let cfg = RopeConfig::new(2, 123.0, 1.0).unwrap();
        let out = rope_apply(&cfg, &[1.0, 0.0], std::f64::consts::FRAC_PI_2).unwrap();
        assert!(out[0].abs() < 1e-15);
        assert!((out[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rotation_preserves_norm() {
        let cfg = RopeConfig::with_defaults(16).unwrap();
        let mut rng = rng_from_seed(2);
        for _ in 0..50 {
            let v: Vec<f64> = normal_vec(&mut rng, 16);
            let p: f64 = normal_vec::<f64>(&mut rng, 1)[0];
            let out = rope_apply(&cfg, &v, p).unwrap();
            let n0: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let n1: f64 = out.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n0 - n1).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_positions_reduce_to_plain_dot() {
        let cfg = RopeConfig::with_defaults(8).unwrap();
        let mut rng = rng_from_seed(4);
        let q: Vec<f64> = normal_vec(&mut rng, 8);
        let k: Vec<f64> = normal_vec(&mut rng, 8);
        let dot: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
        let s = rope_score(&cfg, &q, &k, 0.37, 0.37).unwrap();
        assert!((s - dot).abs() < 1e-12);
    }

    #[test]
    fn score_at_opposite_positions_matches_trig() {
        // d_h = 2, unit scale: score of e1 against e1 across a half-turn gap
        // is cos(pi) = -1.
        let cfg = RopeConfig::new(2, 7.0, 1.0).unwrap();
        let s = rope_score(&cfg, &[1.0, 0.0], &[1.0, 0.0], 0.0, std::f64::consts::PI).unwrap();
        assert!((s + 1.0).abs() < 1e-12);
    }

    #[test]
    fn frequencies_are_monotone_from_one() {
        let cfg = RopeConfig::with_defaults(12).unwrap();
        let w: Vec<f64> = cfg.frequencies();
        assert!((w[0] - 1.0).abs() < 1e-15);
        for pair in w.windows(2) {
            assert!(pair[0] >= pair[1]);
        }
    }

    #[test]
    fn odd_head_dim_is_rejected() {
        assert!(RopeConfig::new(7, 10.0, 1.0).is_err());
        let cfg = RopeConfig::with_defaults(4).unwrap();
        assert!(rope_apply(&cfg, &[1.0, 2.0, 3.0], 0.5).is_err());
    }
}
