use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A named parameter tensor with its shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn check(&self) -> Result<()> {
        let expected: usize = self.shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Shape(format!(
                "tensor {} has shape {:?} but {} elements",
                self.name,
                self.shape,
                self.data.len()
            )));
        }
        Ok(())
    }
}

/// An ordered list of tensors. The order is fixed by the architecture that
/// created it and survives save/load, so two sets from the same architecture
/// can be compared element by element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new(tensors: Vec<Tensor>) -> Result<Self> {
        for t in &tensors {
            t.check()?;
        }
        Ok(Self { tensors })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    /// True when both sets have the same tensor names and shapes in the same order.
    pub fn congruent(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn ensure_congruent(&self, other: &ParamSet, what: &str) -> Result<()> {
        if self.congruent(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!("{what}: parameter sets are not congruent")))
        }
    }

    /// Flat index → (tensor, element) lookup, in the deterministic order.
    pub fn locate(&self, mut flat: usize) -> Option<(usize, usize)> {
        for (i, t) in self.tensors.iter().enumerate() {
            if flat < t.len() {
                return Some((i, flat));
            }
            flat -= t.len();
        }
        None
    }

    pub fn get_flat(&self, flat: usize) -> Option<f64> {
        self.locate(flat).map(|(t, e)| self.tensors[t].data[e])
    }

    pub fn set_flat(&mut self, flat: usize, value: f64) {
        let (t, e) = self.locate(flat).expect("flat index out of range");
        self.tensors[t].data[e] = value;
    }

    pub fn iter_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.data.iter().copied())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        debug_assert!(self.congruent(other));
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|t| t.data.iter().any(|v| !v.is_finite()))
            .map(|t| t.name.as_str())
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tensors {
            hasher.update(t.name.as_bytes());
            hasher.update([0u8]);
            for &s in &t.shape {
                hasher.update((s as u64).to_le_bytes());
            }
            for v in &t.data {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Smooth activation used inside the velocity models and heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `x * sigmoid(x)`
    Silu,
}

/// Describes which network a parameter file belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    VelocityMlp {
        dim: usize,
        hidden: usize,
        blocks: usize,
        activation: Activation,
    },
    ProjectionHead {
        input: usize,
        hidden: usize,
        key_index: usize,
    },
}

pub const PARAM_FILE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamFile {
    pub format_version: u32,
    pub architecture: Architecture,
    pub params: ParamSet,
}

impl ParamFile {
    pub fn new(architecture: Architecture, params: ParamSet) -> Self {
        Self {
            format_version: PARAM_FILE_VERSION,
            architecture,
            params,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("parameter files always serialize")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ParamFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if file.format_version != PARAM_FILE_VERSION {
            return Err(Error::Config(format!(
                "unsupported parameter file version {}",
                file.format_version
            )));
        }
        for t in file.params.tensors() {
            t.check()?;
        }
        Ok(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        ParamSet::new(vec![
            Tensor {
                name: "w".into(),
                shape: vec![2, 2],
                data: vec![0.1, -0.2, 1.0 / 3.0, 1e-300],
            },
            Tensor {
                name: "b".into(),
                shape: vec![2],
                data: vec![f64::MIN_POSITIVE, -7.5],
            },
        ])
        .unwrap()
    }

    #[test]
    fn rejects_shape_element_mismatch() {
        let bad = Tensor {
            name: "w".into(),
            shape: vec![3, 2],
            data: vec![0.0; 5],
        };
        assert!(matches!(ParamSet::new(vec![bad]), Err(Error::Shape(_))));
    }

    #[test]
    fn flat_indexing_follows_tensor_order() {
        let p = sample();
        assert_eq!(p.numel(), 6);
        assert_eq!(p.locate(4), Some((1, 0)));
        assert_eq!(p.get_flat(5), Some(-7.5));
        assert_eq!(p.locate(6), None);
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let arch = Architecture::VelocityMlp {
            dim: 1,
            hidden: 2,
            blocks: 1,
            activation: Activation::Silu,
        };
        ParamFile::new(arch, sample()).save(&path).unwrap();
        let back = ParamFile::load(&path).unwrap();
        let bits: Vec<u64> = back.params.iter_values().map(f64::to_bits).collect();
        let orig: Vec<u64> = sample().iter_values().map(f64::to_bits).collect();
        assert_eq!(bits, orig);
        assert_eq!(back.params.fingerprint(), sample().fingerprint());
    }

    #[test]
    fn fingerprint_sees_single_bit_changes() {
        let a = sample();
        let mut b = sample();
        let v = b.get_flat(0).unwrap();
        b.set_flat(0, f64::from_bits(v.to_bits() + 1));
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
