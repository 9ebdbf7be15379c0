//! Compression-ratio trajectories for progressive pruning.
//!
//! `p_t` is the fraction of entries currently marked; marked entries are
//! scaled by `1 − p_t/p`, so the effective ratio is `a_t = p_t²/p`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// `p·t/(T−1)`.
    Uniform,
    /// `p·(2T−t+1)·t / ((T+1)·T)`.
    Quadratic,
    /// `p·√(½(1 − cos(πt/(T−1))))`.
    #[default]
    Cosine,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Uniform => "uniform",
            ScheduleKind::Quadratic => "quadratic",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "quadratic" => Ok(Self::Quadratic),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::InvalidConfig(format!("unknown schedule '{other}'"))),
        }
    }
}

/// Instantaneous ratio `p_t` at step `t` of `total` (`T_s`).
pub fn ratio_at(kind: ScheduleKind, t: usize, total: usize, p: f64) -> Result<f64> {
    if total < 2 {
        return Err(Error::InvalidConfig(format!(
            "schedule needs at least 2 steps, got {total}"
        )));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!("target ratio {p} outside [0, 1)")));
    }
    if t > total - 1 {
        return Err(Error::StepOutOfRange { t, max: total - 1 });
    }
    let (tf, tt) = (t as f64, total as f64);
    Ok(match kind {
        ScheduleKind::Uniform => p * (tf / (tt - 1.0)),
        ScheduleKind::Quadratic => p * (2.0 * tt - tf + 1.0) * tf / ((tt + 1.0) * tt),
        ScheduleKind::Cosine => p * (0.5 * (1.0 - (PI * tf / (tt - 1.0)).cos())).sqrt(),
    })
}

/// Effective ratio `a_t = p_t²/p` (0 when `p = 0`).
pub fn actual_ratio(p_t: f64, p: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p_t * p_t / p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub t: usize,
    pub total: usize,
    pub p: f64,
    pub p_t: f64,
    pub a_t: f64,
    pub kind: ScheduleKind,
}

impl ScheduleState {
    pub fn at(kind: ScheduleKind, t: usize, total: usize, p: f64) -> Result<Self> {
        let p_t = ratio_at(kind, t, total, p)?;
        Ok(Self {
            t,
            total,
            p,
            p_t,
            a_t: actual_ratio(p_t, p),
            kind,
        })
    }
}

/// Outcome of the four discrete checks on the `a_t` trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequirementReport {
    pub kind: ScheduleKind,
    /// `a_0 = 0`.
    pub starts_at_zero: bool,
    /// `a_{T−1} = p`.
    pub ends_at_target: bool,
    /// `a_{t+1} ≥ a_t` for all t.
    pub nondecreasing: bool,
    /// Second differences are positive, then negative, with one sign change.
    pub single_inflection: bool,
    pub final_value: f64,
}

impl RequirementReport {
    pub fn all_pass(&self) -> bool {
        self.starts_at_zero && self.ends_at_target && self.nondecreasing && self.single_inflection
    }
}

const ENDPOINT_TOL: f64 = 1e-12;

pub fn verify_requirements(kind: ScheduleKind, total: usize, p: f64) -> Result<RequirementReport> {
    if total < 4 {
        return Err(Error::InvalidConfig(format!(
            "requirement checks need at least 4 steps, got {total}"
        )));
    }
    let a: Vec<f64> = (0..total)
        .map(|t| ratio_at(kind, t, total, p).map(|pt| actual_ratio(pt, p)))
        .collect::<Result<_>>()?;
    let last = a[total - 1];
    let nondecreasing = a.windows(2).all(|w| w[1] >= w[0] - ENDPOINT_TOL);
    // ignore second differences at rounding level (the inflection point)
    let eps = 1e-12 * p.max(1e-300);
    let signs: Vec<i8> = a
        .windows(3)
        .map(|w| w[2] - 2.0 * w[1] + w[0])
        .filter(|d| d.abs() > eps)
        .map(|d| if d > 0.0 { 1 } else { -1 })
        .collect();
    let changes = signs.windows(2).filter(|w| w[0] != w[1]).count();
    let single_inflection = changes == 1 && signs.first() == Some(&1) && signs.last() == Some(&-1);
    Ok(RequirementReport {
        kind,
        starts_at_zero: a[0].abs() < ENDPOINT_TOL,
        ends_at_target: (last - p).abs() < ENDPOINT_TOL,
        nondecreasing,
        single_inflection,
        final_value: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let p = 0.5;
        assert_eq!(ratio_at(ScheduleKind::Cosine, 0, 11, p).unwrap(), 0.0);
        assert_eq!(ratio_at(ScheduleKind::Cosine, 10, 11, p).unwrap(), p);
        // t = (T−1)/2: cos(π/2) = 0 ⇒ p_t = p·√½, a_t = p/2
        let mid = ratio_at(ScheduleKind::Cosine, 5, 11, p).unwrap();
        assert!((mid - p * 0.5f64.sqrt()).abs() < 1e-15);
        assert!((actual_ratio(mid, p) - p / 2.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_interpolates() {
        assert_eq!(ratio_at(ScheduleKind::Uniform, 5, 11, 0.5).unwrap(), 0.25);
        assert_eq!(ratio_at(ScheduleKind::Uniform, 10, 11, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn out_of_range_step_is_rejected() {
        assert!(matches!(
            ratio_at(ScheduleKind::Cosine, 11, 11, 0.5),
            Err(Error::StepOutOfRange { t: 11, max: 10 })
        ));
    }

    #[test]
    fn requirement_checks_per_kind() {
        let cos = verify_requirements(ScheduleKind::Cosine, 100, 0.5).unwrap();
        assert!(cos.all_pass(), "{cos:?}");

        let uni = verify_requirements(ScheduleKind::Uniform, 100, 0.5).unwrap();
        assert!(uni.starts_at_zero && uni.ends_at_target && uni.nondecreasing);
        assert!(!uni.single_inflection);

        // printed quadratic reaches p only at t = T
        let quad = verify_requirements(ScheduleKind::Quadratic, 100, 0.5).unwrap();
        assert!(!quad.ends_at_target);
        let expected = 0.5 * (102.0 * 99.0) / (101.0 * 100.0);
        assert!((quad.final_value - expected * expected / 0.5).abs() < 1e-15);
        assert!(quad.starts_at_zero && quad.nondecreasing);
    }

    #[test]
    fn zero_target_is_flat() {
        for t in 0..5 {
            assert_eq!(ratio_at(ScheduleKind::Cosine, t, 5, 0.0).unwrap(), 0.0);
        }
        assert_eq!(actual_ratio(0.0, 0.0), 0.0);
    }

    proptest! {
        #[test]
        fn monotone_and_consistent(total in 2usize..500, p in 0.0f64..0.99, kind in 0u8..3) {
            let kind = [ScheduleKind::Uniform, ScheduleKind::Quadratic, ScheduleKind::Cosine][kind as usize];
            let mut prev = 0.0;
            for t in 0..total {
                let s = ScheduleState::at(kind, t, total, p).unwrap();
                prop_assert!(s.p_t >= prev);
                prop_assert!(s.p_t >= 0.0 && s.p_t <= p + 1e-15);
                if p > 0.0 {
                    prop_assert!((s.a_t * p - s.p_t * s.p_t).abs() < 1e-12);
                }
                prev = s.p_t;
            }
        }
    }
}
