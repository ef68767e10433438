use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::tensor::DType;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("unknown profile `{0}` (built-ins: cpu-avx2, plain)")]
    Unknown(String),
    #[error("cannot read profile: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed profile: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid profile: {0}")]
    Invalid(String),
}

/// What the passes need to know about a target.
#[derive(Debug, Clone, PartialEq)]
pub struct HardwareProfile {
    pub name: String,
    /// Integer width that accumulating operators are widened to.
    pub preferred_int_dtype: DType,
    /// Weights with a non-zero fraction below this are stored as CSR.
    pub sparse_threshold: f32,
    pub notes: String,
}

#[derive(Deserialize)]
struct ProfileFile {
    name: String,
    preferred_int_dtype: String,
    sparse_threshold: f32,
    #[serde(default)]
    notes: String,
}

impl HardwareProfile {
    /// AVX-class CPU: fast int8 arithmetic, sparse kernels pay off below 30% density.
    pub fn cpu_avx2() -> Self {
        HardwareProfile {
            name: "cpu-avx2".into(),
            preferred_int_dtype: DType::Int8,
            sparse_threshold: 0.3,
            notes: "int8 SIMD arithmetic; CSR below 30% non-zeros".into(),
        }
    }

    /// No integer preference, sparse replacement disabled.
    pub fn plain() -> Self {
        HardwareProfile {
            name: "plain".into(),
            preferred_int_dtype: DType::Int32,
            sparse_threshold: 0.0,
            notes: "int32 arithmetic; dense kernels only".into(),
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "cpu-avx2" => Some(Self::cpu_avx2()),
            "plain" => Some(Self::plain()),
            _ => None,
        }
    }

    pub fn builtins() -> Vec<Self> {
        vec![Self::cpu_avx2(), Self::plain()]
    }

    pub fn from_json(text: &str) -> Result<Self, ProfileError> {
        let f: ProfileFile = serde_json::from_str(text)?;
        let preferred_int_dtype = match f.preferred_int_dtype.as_str() {
            "int8" => DType::Int8,
            "int16" => DType::Int16,
            "int32" => DType::Int32,
            other => {
                return Err(ProfileError::Invalid(format!(
                    "preferred_int_dtype must be int8, int16 or int32, not `{other}`"
                )))
            }
        };
        if !(0.0..=1.0).contains(&f.sparse_threshold) {
            return Err(ProfileError::Invalid(format!("sparse_threshold {} is outside [0, 1]", f.sparse_threshold)));
        }
        Ok(HardwareProfile { name: f.name, preferred_int_dtype, sparse_threshold: f.sparse_threshold, notes: f.notes })
    }

    /// A built-in name, or else a path to a JSON profile.
    pub fn resolve(name_or_path: &str) -> Result<Self, ProfileError> {
        if let Some(p) = Self::builtin(name_or_path) {
            return Ok(p);
        }
        let path = Path::new(name_or_path);
        if !path.exists() {
            return Err(ProfileError::Unknown(name_or_path.into()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
