use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::histogram::{Hist1d, Hist2d};

/// Payload of one instrument reading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum QuantityValue {
    Scalar(#[serde(with = "crate::log::float")] f64),
    Vector(#[serde(with = "crate::log::float_vec")] Vec<f64>),
    Hist1d(Hist1d),
    Hist2d(Hist2d),
}

impl QuantityValue {
    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            QuantityValue::Scalar(v) => Some(*v),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            QuantityValue::Scalar(_) => "scalar",
            QuantityValue::Vector(_) => "vector",
            QuantityValue::Hist1d(_) => "hist1d",
            QuantityValue::Hist2d(_) => "hist2d",
        }
    }
}

/// Flags attached to a reading when a guard or fallback shaped the value.
pub mod flags {
    /// An ε-guard dominated at least one denominator.
    pub const SATURATED: &str = "saturated";
    /// The value was clamped into its display range; the raw value is in the metadata.
    pub const CLAMPED: &str = "clamped";
    /// The fitted parabola had no minimum and the qualitative fallback was used.
    pub const FALLBACK: &str = "fallback";
    /// The dominant eigenvalue found by power iteration is negative.
    pub const NEGATIVE_DOMINANT: &str = "negative_dominant";
    /// Power iteration stopped at its iteration budget without meeting the tolerance.
    pub const NOT_CONVERGED: &str = "not_converged";
    /// The normal matrix of a least-squares fit was singular and had to be damped.
    pub const REGULARIZED: &str = "regularized";
    /// The quantity is undefined at this point (zero gradient, batch too small, …).
    pub const UNDEFINED: &str = "undefined";
}

/// A value together with its flags and optional numeric metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reading {
    #[serde(flatten)]
    pub value: QuantityValue,
    #[serde(default)]
    pub flags: Vec<String>,
    #[serde(
        default,
        skip_serializing_if = "BTreeMap::is_empty",
        with = "crate::log::float_map"
    )]
    pub meta: BTreeMap<String, f64>,
}

impl Reading {
    pub fn new(value: QuantityValue) -> Self {
        Self {
            value,
            flags: Vec::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(QuantityValue::Scalar(v))
    }

    pub fn flag(mut self, flag: &str, on: bool) -> Self {
        if on {
            self.flags.push(flag.to_string());
        }
        self
    }

    pub fn meta(mut self, key: &str, value: f64) -> Self {
        self.meta.insert(key.to_string(), value);
        self
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.iter().any(|f| f == flag)
    }
}

/// A scalar produced under an ε-guard.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Guarded {
    pub value: f64,
    /// True when the guard dominated at least one denominator.
    pub saturated: bool,
}

impl From<Guarded> for Reading {
    fn from(g: Guarded) -> Self {
        Reading::scalar(g.value).flag(flags::SATURATED, g.saturated)
    }
}
