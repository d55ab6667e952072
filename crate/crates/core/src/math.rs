//! Scalar math routed through `libm` so results are identical with and
//! without `std`.

use serde::{Deserialize, Serialize};

pub(crate) const SQRT_2: f64 = core::f64::consts::SQRT_2;

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn ln_1p(x: f64) -> f64 {
    libm::log1p(x)
}

#[inline]
pub fn log10(x: f64) -> f64 {
    libm::log10(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// Upper tail `1 - Φ(z)`, accurate far into the tail.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / SQRT_2)
}

/// How a Wald z statistic is turned into a p-value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueConvention {
    /// `2 (1 - Φ(|z|))`
    #[default]
    TwoSided,
    /// `1 - Φ(|z|)`: half the two-sided value, same ordering.
    UpperTail,
}

impl PValueConvention {
    pub fn p_value(self, z: f64) -> f64 {
        let tail = normal_sf(abs(z));
        match self {
            PValueConvention::TwoSided => (2.0 * tail).min(1.0),
            PValueConvention::UpperTail => tail,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PValueConvention::TwoSided => "two_sided",
            PValueConvention::UpperTail => "upper_tail",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "two_sided" => Some(Self::TwoSided),
            "upper_tail" => Some(Self::UpperTail),
            _ => None,
        }
    }
}

/// SplitMix64 finalizer, used to derive RNG stream identifiers.
#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the bytes of a label.
pub(crate) fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
