//! Datatype labels and their physical storage formats.
//!
//! Coverage accounting works on the six labels a model author can write,
//! while kernels only ever see the four storage formats behind them.
//! `half` and `float16` share f16 storage; `double` and `float64` share f64.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// One of the six datatype labels tracked by input coverage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DTypeLabel {
    Bfloat16,
    Double,
    Float16,
    Float32,
    Float64,
    Half,
}

/// Physical element format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Storage {
    F16,
    Bf16,
    F32,
    F64,
}

impl DTypeLabel {
    pub const ALL: [DTypeLabel; 6] = [
        DTypeLabel::Bfloat16,
        DTypeLabel::Double,
        DTypeLabel::Float16,
        DTypeLabel::Float32,
        DTypeLabel::Float64,
        DTypeLabel::Half,
    ];

    pub fn storage(self) -> Storage {
        match self {
            DTypeLabel::Bfloat16 => Storage::Bf16,
            DTypeLabel::Float16 | DTypeLabel::Half => Storage::F16,
            DTypeLabel::Float32 => Storage::F32,
            DTypeLabel::Double | DTypeLabel::Float64 => Storage::F64,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DTypeLabel::Bfloat16 => "bfloat16",
            DTypeLabel::Double => "double",
            DTypeLabel::Float16 => "float16",
            DTypeLabel::Float32 => "float32",
            DTypeLabel::Float64 => "float64",
            DTypeLabel::Half => "half",
        }
    }

    /// Stable one-byte code used by the binary tensor sidecar.
    pub fn code(self) -> u8 {
        match self {
            DTypeLabel::Bfloat16 => 0,
            DTypeLabel::Double => 1,
            DTypeLabel::Float16 => 2,
            DTypeLabel::Float32 => 3,
            DTypeLabel::Float64 => 4,
            DTypeLabel::Half => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.iter().copied().find(|d| d.code() == code)
    }

    /// Half-precision labels are excluded from the inconsistency oracle.
    pub fn is_reduced_precision(self) -> bool {
        matches!(self.storage(), Storage::F16 | Storage::Bf16)
    }
}

impl fmt::Display for DTypeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown dtype label `{0}`")]
pub struct UnknownDType(pub String);

impl FromStr for DTypeLabel {
    type Err = UnknownDType;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| UnknownDType(s.to_string()))
    }
}

impl Storage {
    pub fn byte_width(self) -> usize {
        match self {
            Storage::F16 | Storage::Bf16 => 2,
            Storage::F32 => 4,
            Storage::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Storage::F16 => "f16",
            Storage::Bf16 => "bf16",
            Storage::F32 => "f32",
            Storage::F64 => "f64",
        }
    }

    /// Rounds `v` to the nearest value representable in this format.
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Storage::F64 => v,
            Storage::F32 => v as f32 as f64,
            Storage::F16 => half::f16::from_f64(v).to_f64(),
            Storage::Bf16 => half::bf16::from_f64(v).to_f64(),
        }
    }

    pub fn write_le(self, v: f64, out: &mut Vec<u8>) {
        match self {
            Storage::F64 => out.extend_from_slice(&v.to_le_bytes()),
            Storage::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Storage::F16 => out.extend_from_slice(&half::f16::from_f64(v).to_le_bytes()),
            Storage::Bf16 => out.extend_from_slice(&half::bf16::from_f64(v).to_le_bytes()),
        }
    }

    /// Decodes one element; `bytes` must hold exactly `byte_width()` bytes.
    pub fn read_le(self, bytes: &[u8]) -> f64 {
        match self {
            Storage::F64 => f64::from_le_bytes(bytes.try_into().expect("8 bytes")),
            Storage::F32 => f32::from_le_bytes(bytes.try_into().expect("4 bytes")) as f64,
            Storage::F16 => half::f16::from_le_bytes(bytes.try_into().expect("2 bytes")).to_f64(),
            Storage::Bf16 => half::bf16::from_le_bytes(bytes.try_into().expect("2 bytes")).to_f64(),
        }
    }
}

impl fmt::Display for Storage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_labels_four_storages() {
        assert_eq!(DTypeLabel::ALL.len(), 6);
        let storages: std::collections::BTreeSet<_> =
            DTypeLabel::ALL.iter().map(|d| d.storage()).collect();
        assert_eq!(storages.len(), 4);
        assert_eq!(DTypeLabel::Half.storage(), Storage::F16);
        assert_eq!(DTypeLabel::Double.storage(), Storage::F64);
    }

    #[test]
    fn label_round_trip() {
        for d in DTypeLabel::ALL {
            assert_eq!(d.as_str().parse::<DTypeLabel>().unwrap(), d);
            assert_eq!(DTypeLabel::from_code(d.code()), Some(d));
        }
        assert!("int8".parse::<DTypeLabel>().is_err());
    }

    #[test]
    fn rounding_is_idempotent() {
        for s in [Storage::F16, Storage::Bf16, Storage::F32, Storage::F64] {
            let r = s.round(0.1234567891);
            assert_eq!(s.round(r), r);
            let mut buf = Vec::new();
            s.write_le(r, &mut buf);
            assert_eq!(buf.len(), s.byte_width());
            assert_eq!(s.read_le(&buf), r);
        }
    }
}
