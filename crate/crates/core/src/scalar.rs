//! Scalar abstraction over the two supported float widths.
//!
//! Training defaults to f32; tests and gradient checks run f64 because
//! central finite differences need the extra precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssignOps};

/// Storage width of a tensor buffer, as recorded in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarWidth {
    F32,
    F64,
}

impl ScalarWidth {
    pub fn bytes(self) -> usize {
        match self {
            ScalarWidth::F32 => 4,
            ScalarWidth::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScalarWidth::F32 => "f32",
            ScalarWidth::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(ScalarWidth::F32),
            "f64" => Some(ScalarWidth::F64),
            _ => None,
        }
    }
}

/// Element type of every tensor in the engine.
pub trait Scalar:
    Float + NumAssignOps + Sum<Self> + Debug + Display + Send + Sync + 'static
{
    const WIDTH: ScalarWidth;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn append_le_bytes(self, out: &mut Vec<u8>);
    /// Reads one value from a buffer of exactly `WIDTH.bytes()` bytes.
    fn from_le_bytes(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const WIDTH: ScalarWidth = ScalarWidth::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn append_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_bytes(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const WIDTH: ScalarWidth = ScalarWidth::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn append_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_bytes(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}
