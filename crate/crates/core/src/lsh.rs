//! Sign-random-projection hashing of feature vectors into a linear `b`-bit
//! bucket space.
//!
//! Plane `i` decides bit `b - 1 - i` of the signature (plane 0 is the most
//! significant bit), and a projection of exactly zero sets the bit. Both
//! rules are part of the wire contract: clients hashing in user-assisted mode
//! must reproduce them bit for bit.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BITS: u32 = 16;
pub const MAX_BITS: u32 = 32;

/// Task input data as a fixed-dimension real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::input(format!(
                "feature vector needs at least 2 components, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!("component {pos} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    /// Returns the vector scaled to unit length, or `None` for the zero vector.
    pub fn normalized(&self) -> Option<Self> {
        let n = self.norm();
        (n > 0.0).then(|| Self(self.0.iter().map(|v| v / n).collect()))
    }
}

impl TryFrom<Vec<f64>> for FeatureVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<FeatureVector> for Vec<f64> {
    fn from(v: FeatureVector) -> Self {
        v.0
    }
}

impl std::ops::Neg for &FeatureVector {
    type Output = FeatureVector;

    fn neg(self) -> FeatureVector {
        FeatureVector(self.0.iter().map(|v| -v).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LshConfig {
    pub bits: u32,
    pub dim: usize,
    pub seed: u64,
}

impl LshConfig {
    pub fn new(bits: u32, dim: usize, seed: u64) -> Result<Self> {
        let config = Self { bits, dim, seed };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_BITS).contains(&self.bits) {
            return Err(Error::config(format!(
                "signature length must be within 1..={MAX_BITS} bits, got {}",
                self.bits
            )));
        }
        if self.dim < 2 {
            return Err(Error::config(format!(
                "dimension must be at least 2, got {}",
                self.dim
            )));
        }
        Ok(())
    }

    /// Number of distinct signature values, `2^bits`.
    pub fn space(&self) -> u64 {
        space_size(self.bits)
    }
}

pub fn space_size(bits: u32) -> u64 {
    1u64 << bits
}

/// A `b`-bit bucket identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LshSignature(u32);

impl LshSignature {
    pub fn new(value: u32, bits: u32) -> Result<Self> {
        if u64::from(value) >= space_size(bits) {
            return Err(Error::input(format!(
                "signature {value} does not fit in {bits} bits"
            )));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> u32 {
        self.0
    }

    /// Lowercase hex, zero-padded to `ceil(bits / 4)` digits.
    pub fn to_hex(self, bits: u32) -> String {
        let width = bits.div_ceil(4) as usize;
        format!("{:0width$x}", self.0)
    }

    pub fn from_hex(text: &str, bits: u32) -> Result<Self> {
        let text = text.trim();
        if text.is_empty() || text.len() > bits.div_ceil(4) as usize {
            return Err(Error::input(format!("malformed signature {text:?}")));
        }
        let value = u32::from_str_radix(text, 16)
            .map_err(|e| Error::input(format!("malformed signature {text:?}: {e}")))?;
        Self::new(value, bits)
    }
}

impl fmt::Display for LshSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Random-hyperplane hasher. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Hasher {
    config: LshConfig,
    // `bits` rows of `dim` normals, row-major.
    planes: Vec<f64>,
}

impl Hasher {
    pub fn new(config: LshConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let planes = (0..config.bits as usize * config.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Ok(Self { config, planes })
    }

    pub fn config(&self) -> &LshConfig {
        &self.config
    }

    pub fn bits(&self) -> u32 {
        self.config.bits
    }

    pub fn plane(&self, index: usize) -> &[f64] {
        let d = self.config.dim;
        &self.planes[index * d..(index + 1) * d]
    }

    pub fn hash(&self, v: &FeatureVector) -> Result<LshSignature> {
        if v.dim() != self.config.dim {
            return Err(Error::input(format!(
                "expected {} dimensions, got {}",
                self.config.dim,
                v.dim()
            )));
        }
        let bits = self.config.bits;
        let value = self
            .planes
            .chunks_exact(self.config.dim)
            .enumerate()
            .filter(|(_, plane)| dot(plane, v.as_slice()) >= 0.0)
            .fold(0u32, |acc, (i, _)| acc | 1 << (bits - 1 - i as u32));
        Ok(LshSignature(value))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::input(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::input("cosine similarity of a zero vector"));
    }
    Ok((dot(a.as_slice(), b.as_slice()) / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn hasher(bits: u32, dim: usize, seed: u64) -> Hasher {
        Hasher::new(LshConfig::new(bits, dim, seed).unwrap()).unwrap()
    }

    fn fv(values: &[f64]) -> FeatureVector {
        FeatureVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn same_config_builds_identical_planes() {
        assert_eq!(hasher(16, 8, 7), hasher(16, 8, 7));
    }

    #[test]
    fn different_seed_builds_different_planes() {
        let a = hasher(16, 8, 7);
        let b = hasher(16, 8, 8);
        let differing = (0..16).filter(|&i| a.plane(i) != b.plane(i)).count();
        assert_eq!(differing, 16);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(LshConfig::new(0, 8, 7), Err(Error::Config(_))));
        assert!(matches!(LshConfig::new(33, 8, 7), Err(Error::Config(_))));
        assert!(matches!(LshConfig::new(16, 1, 7), Err(Error::Config(_))));
        let bad = LshConfig { bits: 0, dim: 8, seed: 7 };
        assert!(Hasher::new(bad).is_err());
    }

    #[test]
    fn dimension_mismatch_is_input_error() {
        let h = hasher(16, 8, 7);
        assert!(matches!(h.hash(&fv(&[1.0, 2.0])), Err(Error::Input(_))));
    }

    #[test]
    fn feature_vector_rejects_non_finite() {
        assert!(FeatureVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(FeatureVector::new(vec![1.0]).is_err());
        assert!(serde_json::from_str::<FeatureVector>("[1.0]").is_err());
    }

    #[test]
    fn zero_projection_sets_bit() {
        let h = hasher(4, 2, 1);
        // The zero vector projects to exactly 0 on every plane.
        assert_eq!(h.hash(&fv(&[0.0, 0.0])).unwrap().value(), 0b1111);
    }

    #[test]
    fn plane_zero_is_most_significant_bit() {
        let h = hasher(8, 4, 3);
        let v = fv(&[0.3, -1.2, 0.8, 0.1]);
        let sig = h.hash(&v).unwrap().value();
        for i in 0..8 {
            let bit = (sig >> (7 - i)) & 1 == 1;
            assert_eq!(bit, dot(h.plane(i), v.as_slice()) >= 0.0);
        }
    }

    #[test]
    fn cosine_examples() {
        let v = fv(&[0.5, -2.0, 1.5]);
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&v, &-&v).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&fv(&[1.0, 0.0]), &fv(&[0.0, 1.0])).unwrap(), 0.0);
        assert!(cosine_similarity(&fv(&[0.0, 0.0]), &fv(&[0.0, 1.0])).is_err());
        assert!(cosine_similarity(&fv(&[1.0, 0.0]), &fv(&[0.0, 1.0, 0.0])).is_err());
    }

    #[test]
    fn hex_is_zero_padded_lowercase() {
        let s = LshSignature::new(0xab, 16).unwrap();
        assert_eq!(s.to_hex(16), "00ab");
        assert_eq!(LshSignature::new(5, 5).unwrap().to_hex(5), "05");
        assert_eq!(LshSignature::from_hex("00AB", 16).unwrap(), s);
        assert!(LshSignature::from_hex("10000", 16).is_err());
        assert!(LshSignature::from_hex("1f", 4).is_err());
        assert!(LshSignature::from_hex("zz", 8).is_err());
    }

    #[test]
    fn matching_bits_follow_angle_law() {
        // Monte-Carlo over random unit pairs at fixed angles.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let dim = 16;
        for theta in [std::f64::consts::FRAC_PI_4, std::f64::consts::FRAC_PI_2] {
            let mut agree = 0u64;
            let mut total = 0u64;
            for pair in 0..2_000u64 {
                let h = hasher(32, dim, pair);
                let (u, w) = pair_at_angle(&mut rng, dim, theta);
                let x = h.hash(&u).unwrap().value() ^ h.hash(&w).unwrap().value();
                agree += u64::from(32 - x.count_ones());
                total += 32;
            }
            let observed = agree as f64 / total as f64;
            let expected = 1.0 - theta / std::f64::consts::PI;
            assert!((observed - expected).abs() < 0.02, "{observed} vs {expected}");
        }
    }

    fn pair_at_angle(rng: &mut impl Rng, dim: usize, theta: f64) -> (FeatureVector, FeatureVector) {
        let gauss = |rng: &mut dyn rand::RngCore| -> Vec<f64> {
            (0..dim).map(|_| StandardNormal.sample(rng)).collect()
        };
        let u = fv(&gauss(rng)).normalized().unwrap();
        let mut z = gauss(rng);
        let proj = dot(&z, u.as_slice());
        z.iter_mut().zip(u.as_slice()).for_each(|(zi, ui)| *zi -= proj * ui);
        let z = fv(&z).normalized().unwrap();
        let w: Vec<f64> = u
            .as_slice()
            .iter()
            .zip(z.as_slice())
            .map(|(a, b)| theta.cos() * a + theta.sin() * b)
            .collect();
        (u, fv(&w))
    }

    proptest! {
        #[test]
        fn signatures_stay_in_range(bits in 1u32..=32, seed: u64,
                                    values in prop::collection::vec(-10.0f64..10.0, 6)) {
            let h = hasher(bits, 6, seed);
            let v = fv(&values);
            let sig = h.hash(&v).unwrap();
            prop_assert!(u64::from(sig.value()) < space_size(bits));
            prop_assert_eq!(sig, h.hash(&v).unwrap());
            prop_assert_eq!(LshSignature::from_hex(&sig.to_hex(bits), bits).unwrap(), sig);
        }

        #[test]
        fn negation_complements_signature(seed: u64,
                                          values in prop::collection::vec(-10.0f64..10.0, 8)) {
            let h = hasher(16, 8, seed);
            let v = fv(&values);
            let ties = (0..16).any(|i| dot(h.plane(i), v.as_slice()) == 0.0);
            prop_assume!(!ties);
            let a = h.hash(&v).unwrap().value();
            let b = h.hash(&-&v).unwrap().value();
            prop_assert_eq!(a ^ b, 0xffff);
        }
    }
}
