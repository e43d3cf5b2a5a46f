//! Embedding vectors and the cosine geometry the whole engine is built on.
//!
//! Values are stored as `f32` (the precision embedders hand back and the
//! precision the run store persists) and every computation is carried out in
//! `f64`.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A fixed-length vector of finite reals.
///
/// Serializes as a plain JSON array on the wire; run-store records use
/// [`base64_le`] instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::domain("embedding must have at least one dimension"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!(
                "embedding entry {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    /// Builds from `f64` values, rounding each to `f32`.
    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| v as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    /// Fails with a domain error on an all-zero vector; used wherever
    /// embeddings enter a pool or a metric.
    pub fn ensure_nonzero(&self) -> Result<()> {
        if self.is_zero() {
            Err(Error::domain(
                "zero-norm embedding (the embedder returned an all-zero vector)",
            ))
        } else {
            Ok(())
        }
    }

    pub fn to_base64(&self) -> String {
        encode_f32_le(&self.0)
    }

    pub fn from_base64(text: &str) -> Result<Self> {
        Self::new(decode_f32_le(text)?)
    }
}

impl TryFrom<Vec<f32>> for EmbeddingVector {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f32> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

pub fn encode_f32_le(values: &[f32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f32_le(text: &str) -> Result<Vec<f32>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::domain(format!("invalid base64 embedding: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::domain(format!(
            "embedding payload length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Serde adapter storing an [`EmbeddingVector`] as base64 little-endian `f32`.
pub mod base64_le {
    use serde::{de, Deserialize, Deserializer, Serializer};

    use super::EmbeddingVector;

    pub fn serialize<S: Serializer>(v: &EmbeddingVector, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_base64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<EmbeddingVector, D::Error> {
        let text = String::deserialize(d)?;
        EmbeddingVector::from_base64(&text).map_err(de::Error::custom)
    }

    pub mod option {
        use serde::{de, Deserialize, Deserializer, Serializer};

        use super::super::EmbeddingVector;

        pub fn serialize<S: Serializer>(
            v: &Option<EmbeddingVector>,
            s: S,
        ) -> Result<S::Ok, S::Error> {
            match v {
                Some(v) => s.serialize_some(&v.to_base64()),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(
            d: D,
        ) -> Result<Option<EmbeddingVector>, D::Error> {
            Option::<String>::deserialize(d)?
                .map(|t| EmbeddingVector::from_base64(&t).map_err(de::Error::custom))
                .transpose()
        }
    }
}

fn check_dims(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(())
}

/// Cosine similarity `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    check_dims(a, b)?;
    let (aa, bb) = (a.dot(a), b.dot(b));
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::domain("cosine of a zero-norm embedding is undefined"));
    }
    // sqrt(x * x) == x exactly, so identical vectors give exactly 1.
    Ok((a.dot(b) / (aa * bb).sqrt()).clamp(-1.0, 1.0))
}

/// Cosine distance `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    Ok(1.0 - cosine_similarity(a, b)?)
}
