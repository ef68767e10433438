use std::fmt;
use std::str::FromStr;

/// Element types known to the compiler.
///
/// The types form a lattice under lossless widening:
///
/// ```text
///            Float32
///           /       \
///       Int32      Float16
///           \       /
///             Int16
///               |
///             Int8
///               |
///             Int4
///               |
///             Bool
/// ```
///
/// `Int32` and `Float16` are incomparable; their join is `Float32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    Bool,
    Int4,
    Int8,
    Int16,
    Int32,
    Float16,
    Float32,
}

impl DType {
    pub const ALL: [DType; 7] =
        [DType::Bool, DType::Int4, DType::Int8, DType::Int16, DType::Int32, DType::Float16, DType::Float32];

    fn level(self) -> u8 {
        match self {
            DType::Bool => 0,
            DType::Int4 => 1,
            DType::Int8 => 2,
            DType::Int16 => 3,
            DType::Int32 | DType::Float16 => 4,
            DType::Float32 => 5,
        }
    }

    /// Lattice order: `self` widens to `other` without loss.
    pub fn le(self, other: DType) -> bool {
        self == other || self.level() < other.level()
    }

    /// Least upper bound.
    pub fn join(self, other: DType) -> DType {
        if self.le(other) {
            other
        } else if other.le(self) {
            self
        } else {
            DType::Float32
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::Float16 | DType::Float32)
    }

    /// Bool and all integer types.
    pub fn is_integral(self) -> bool {
        !self.is_float()
    }

    /// The dtype kernels actually execute in. Int4 and Float16 have no native kernels.
    pub fn promoted(self) -> DType {
        match self {
            DType::Int4 => DType::Int8,
            DType::Float16 => DType::Float32,
            other => other,
        }
    }

    /// Inclusive value range for integral types.
    pub fn int_range(self) -> Option<(i64, i64)> {
        match self {
            DType::Bool => Some((0, 1)),
            DType::Int4 => Some((-8, 7)),
            DType::Int8 => Some((i8::MIN as i64, i8::MAX as i64)),
            DType::Int16 => Some((i16::MIN as i64, i16::MAX as i64)),
            DType::Int32 => Some((i32::MIN as i64, i32::MAX as i64)),
            DType::Float16 | DType::Float32 => None,
        }
    }

    /// Largest magnitude an integral value of this type can have.
    pub fn max_magnitude(self) -> Option<f64> {
        self.int_range().map(|(lo, hi)| lo.unsigned_abs().max(hi.unsigned_abs()) as f64)
    }

    /// Whether `v` is exactly representable.
    pub fn holds(self, v: f32) -> bool {
        match self {
            DType::Float32 => true,
            DType::Float16 => v.is_finite() && half::f16::from_f32(v).to_f32() == v,
            _ => {
                let (lo, hi) = self.int_range().expect("integral");
                v.is_finite() && v.fract() == 0.0 && (lo as f64) <= v as f64 && v as f64 <= hi as f64
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::Bool => "bool",
            DType::Int4 => "int4",
            DType::Int8 => "int8",
            DType::Int16 => "int16",
            DType::Int32 => "int32",
            DType::Float16 => "float16",
            DType::Float32 => "float32",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DType::ALL.into_iter().find(|d| d.name() == s).ok_or_else(|| format!("unknown dtype `{s}`"))
    }
}

/// Free-function form of [`DType::join`].
pub fn dtype_join(a: DType, b: DType) -> DType {
    a.join(b)
}

/// Smallest dtype that holds every value without loss.
///
/// Integral candidates are tried before `Float16`, so integers that both
/// `Int32` and `Float16` could hold are classed `Int32`.
pub fn smallest_lossless_dtype(values: impl IntoIterator<Item = f32> + Clone) -> DType {
    const LADDER: [DType; 6] = [DType::Bool, DType::Int4, DType::Int8, DType::Int16, DType::Int32, DType::Float16];
    LADDER.into_iter().find(|d| values.clone().into_iter().all(|v| d.holds(v))).unwrap_or(DType::Float32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn join_examples() {
        assert_eq!(dtype_join(DType::Bool, DType::Float32), DType::Float32);
        assert_eq!(dtype_join(DType::Int8, DType::Int8), DType::Int8);
        assert_eq!(dtype_join(DType::Int32, DType::Float16), DType::Float32);
        assert_eq!(dtype_join(DType::Int4, DType::Float16), DType::Float16);
    }

    #[test]
    fn int32_and_float16_incomparable() {
        assert!(!DType::Int32.le(DType::Float16));
        assert!(!DType::Float16.le(DType::Int32));
    }

    #[test]
    fn smallest_dtype_ladder() {
        assert_eq!(smallest_lossless_dtype([0.0, 1.0]), DType::Bool);
        assert_eq!(smallest_lossless_dtype([0.0, 2.0, -8.0]), DType::Int4);
        assert_eq!(smallest_lossless_dtype([100.0]), DType::Int8);
        assert_eq!(smallest_lossless_dtype([300.0]), DType::Int16);
        assert_eq!(smallest_lossless_dtype([70000.0]), DType::Int32);
        assert_eq!(smallest_lossless_dtype([0.5, 1.25]), DType::Float16);
        assert_eq!(smallest_lossless_dtype([0.1]), DType::Float32);
        assert_eq!(smallest_lossless_dtype(std::iter::empty::<f32>()), DType::Bool);
    }

    #[test]
    fn parse_names() {
        for d in DType::ALL {
            assert_eq!(d.name().parse::<DType>().unwrap(), d);
        }
        assert!("int64".parse::<DType>().is_err());
    }
}
