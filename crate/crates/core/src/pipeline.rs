//! Method and reference-policy selection on top of the estimators.

use std::fmt;
use std::str::FromStr;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::estimators::{conic_ls, hyperbolic_ls, srd_ls, usrd_ls, HyperbolicOptions};
use crate::geometry::{select_reference, GeometricReference, LocalizationResult, Point, RdMatrix};
use crate::tdoa::{select_by_energy, EnergyReference};

/// How the reference microphone of a reference-based RD set is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Deserialize)]
#[serde(try_from = "String")]
pub enum RefPolicy {
    #[default]
    NearestBarycenter,
    /// Loudest recording. Without signals, the microphone with the smallest
    /// fitted distance stands in for it.
    MaxEnergy,
    /// Quietest recording, or the largest fitted distance without signals.
    MinEnergy,
    /// Fixed position in the microphone list.
    Index(usize),
}

impl RefPolicy {
    /// Resolves the policy against the microphones that `rd` covers.
    pub fn resolve(self, mics: &[Point], rd: &RdMatrix, energies: Option<&[f64]>) -> Result<usize> {
        match self {
            RefPolicy::NearestBarycenter => {
                select_reference(mics, GeometricReference::NearestBarycenter)
            }
            RefPolicy::Index(i) => select_reference(mics, GeometricReference::Fixed(i)),
            RefPolicy::MaxEnergy | RefPolicy::MinEnergy => {
                let policy = if self == RefPolicy::MaxEnergy {
                    EnergyReference::MaxEnergy
                } else {
                    EnergyReference::MinEnergy
                };
                match energies {
                    Some(e) if e.len() == rd.mic_count() => Ok(select_by_energy(e, policy)),
                    Some(e) => Err(Error::DimensionMismatch(format!(
                        "{} channel energies for {} microphones",
                        e.len(),
                        rd.mic_count()
                    ))),
                    None => {
                        // Energy falls with distance, so negated fitted
                        // distances rank microphones the same way.
                        let m = rd.mic_count();
                        let proximity: Vec<f64> = (0..m)
                            .map(|j| -rd.values().column(j).sum() / m as f64)
                            .collect();
                        Ok(select_by_energy(&proximity, policy))
                    }
                }
            }
        }
    }
}

impl fmt::Display for RefPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RefPolicy::NearestBarycenter => f.write_str("nearest-barycenter"),
            RefPolicy::MaxEnergy => f.write_str("max-energy"),
            RefPolicy::MinEnergy => f.write_str("min-energy"),
            RefPolicy::Index(i) => write!(f, "index:{i}"),
        }
    }
}

impl FromStr for RefPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest-barycenter" => Ok(RefPolicy::NearestBarycenter),
            "max-energy" | "max" => Ok(RefPolicy::MaxEnergy),
            "min-energy" | "min" => Ok(RefPolicy::MinEnergy),
            _ => s
                .strip_prefix("index:")
                .and_then(|n| n.parse().ok())
                .map(RefPolicy::Index)
                .ok_or_else(|| Error::Parse(format!("unknown reference policy '{s}'"))),
        }
    }
}

impl TryFrom<String> for RefPolicy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Deserialize)]
#[serde(try_from = "String")]
pub enum Method {
    UsrdLs(RefPolicy),
    SrdLs(RefPolicy),
    Conic,
    ConicNorm,
    Hyperbolic(RefPolicy),
}

impl Method {
    pub fn reference_policy(self) -> Option<RefPolicy> {
        match self {
            Method::UsrdLs(r) | Method::SrdLs(r) | Method::Hyperbolic(r) => Some(r),
            Method::Conic | Method::ConicNorm => None,
        }
    }

    pub fn with_reference(self, policy: RefPolicy) -> Self {
        match self {
            Method::UsrdLs(_) => Method::UsrdLs(policy),
            Method::SrdLs(_) => Method::SrdLs(policy),
            Method::Hyperbolic(_) => Method::Hyperbolic(policy),
            other => other,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::UsrdLs(_) => "usrd-ls",
            Method::SrdLs(_) => "srd-ls",
            Method::Conic => "conic",
            Method::ConicNorm => "conic-norm",
            Method::Hyperbolic(_) => "hyperbolic",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.reference_policy() {
            Some(r) => write!(f, "{}:{r}", self.name()),
            None => f.write_str(self.name()),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    /// `name` or `name:policy`; reference-based methods default to the
    /// nearest-barycenter policy.
    fn from_str(s: &str) -> Result<Self> {
        let (name, policy) = match s.split_once(':') {
            Some((name, policy)) => (name, Some(policy.parse::<RefPolicy>()?)),
            None => (s, None),
        };
        let r = policy.unwrap_or_default();
        let method = match name {
            "usrd-ls" => Method::UsrdLs(r),
            "srd-ls" => Method::SrdLs(r),
            "hyperbolic" => Method::Hyperbolic(r),
            "conic" | "conic-norm" if policy.is_some() => {
                return Err(Error::Parse(format!("{name} takes no reference policy")))
            }
            "conic" => Method::Conic,
            "conic-norm" => Method::ConicNorm,
            _ => return Err(Error::Parse(format!("unknown method '{s}'"))),
        };
        Ok(method)
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Runs `method` on a full pairwise RD matrix. Reference-based methods use
/// the row of the resolved reference microphone.
pub fn localize(
    method: Method,
    rd: &RdMatrix,
    mics: &[Point],
    energies: Option<&[f64]>,
) -> Result<LocalizationResult> {
    if mics.len() != rd.mic_count() {
        return Err(Error::DimensionMismatch(format!(
            "{} microphone positions for a {}x{} RD matrix",
            mics.len(),
            rd.mic_count(),
            rd.mic_count()
        )));
    }
    match method {
        Method::Conic => conic_ls(rd, mics, false),
        Method::ConicNorm => conic_ls(rd, mics, true),
        Method::UsrdLs(policy) | Method::SrdLs(policy) | Method::Hyperbolic(policy) => {
            let reference = policy.resolve(mics, rd, energies)?;
            let vector = rd.reference_vector(reference)?;
            match method {
                Method::UsrdLs(_) => usrd_ls(&vector, mics),
                Method::SrdLs(_) => srd_ls(&vector, mics),
                _ => hyperbolic_ls(&vector, mics, &HyperbolicOptions::default()),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{lab_scene, true_rd_full, DEFAULT_SOUND_SPEED};

    #[test]
    fn method_names_round_trip() {
        for s in [
            "usrd-ls:nearest-barycenter",
            "srd-ls:max-energy",
            "srd-ls:min-energy",
            "hyperbolic:index:3",
            "conic",
            "conic-norm",
        ] {
            assert_eq!(s.parse::<Method>().unwrap().to_string(), s);
        }
        assert_eq!(
            "srd-ls".parse::<Method>().unwrap(),
            Method::SrdLs(RefPolicy::NearestBarycenter)
        );
        assert_eq!(
            "usrd-ls:max".parse::<Method>().unwrap(),
            Method::UsrdLs(RefPolicy::MaxEnergy)
        );
        for bad in [
            "",
            "srd",
            "conic:max-energy",
            "srd-ls:index:x",
            "srd-ls:nearest",
        ] {
            assert!(bad.parse::<Method>().is_err(), "{bad}");
        }
    }

    #[test]
    fn energy_proxy_follows_distance() {
        let scene = lab_scene::scene(1, DEFAULT_SOUND_SPEED).unwrap();
        let rd = true_rd_full(&scene);
        let d = scene.distances();
        let nearest = crate::geometry::argmin_first(d.iter().copied());
        let farthest = crate::geometry::argmax_first(d.iter().copied());
        assert_eq!(
            RefPolicy::MaxEnergy
                .resolve(scene.mics(), &rd, None)
                .unwrap(),
            nearest
        );
        assert_eq!(
            RefPolicy::MinEnergy
                .resolve(scene.mics(), &rd, None)
                .unwrap(),
            farthest
        );
        let energies = [1.0, 3.0, 2.0, 0.5, 1.0, 1.0, 1.0, 1.0];
        assert_eq!(
            RefPolicy::MaxEnergy
                .resolve(scene.mics(), &rd, Some(&energies))
                .unwrap(),
            1
        );
        assert_eq!(
            RefPolicy::MinEnergy
                .resolve(scene.mics(), &rd, Some(&energies))
                .unwrap(),
            3
        );
        assert!(RefPolicy::Index(8)
            .resolve(scene.mics(), &rd, None)
            .is_err());
    }

    #[test]
    fn every_method_recovers_the_lab_scene() {
        let scene = lab_scene::scene(2, DEFAULT_SOUND_SPEED).unwrap();
        let rd = true_rd_full(&scene);
        for method in [
            Method::UsrdLs(RefPolicy::NearestBarycenter),
            Method::SrdLs(RefPolicy::MaxEnergy),
            Method::SrdLs(RefPolicy::MinEnergy),
            Method::Conic,
            Method::ConicNorm,
            Method::Hyperbolic(RefPolicy::Index(4)),
        ] {
            let res = localize(method, &rd, scene.mics(), None).unwrap();
            assert!(res.status.is_success(), "{method}: {:?}", res.status);
            assert!((res.position - scene.source()).norm() <= 1e-6, "{method}");
        }
    }
}
