//! Portable array container: a JSON manifest of named arrays (shape, dtype,
//! byte offset, byte length) next to a raw little-endian blob.
//!
//! `save("ckpt.json")` writes `ckpt.json` and `ckpt.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const FORMAT: &str = "efcm-array-container";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub blob: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

/// In-memory container; arrays keep insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub metadata: serde_json::Value,
    entries: Vec<ArrayEntry>,
    blob: Vec<u8>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

impl Container {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            metadata,
            entries: Vec::new(),
            blob: Vec::new(),
        }
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(TensorError::Container(format!("duplicate array {name}")));
        }
        let offset = self.blob.len() as u64;
        for &v in t.data() {
            v.write_le(&mut self.blob);
        }
        self.entries.push(ArrayEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            offset,
            nbytes: self.blob.len() as u64 - offset,
        });
        Ok(())
    }

    pub fn entries(&self) -> &[ArrayEntry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    /// The array `name`, which must have been stored with element type `T`.
    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| TensorError::Container(format!("missing array {name}")))?;
        if e.dtype != T::DTYPE {
            return Err(TensorError::Container(format!(
                "array {name} has dtype {:?}, requested {:?}",
                e.dtype,
                T::DTYPE
            )));
        }
        let bytes = &self.blob[e.offset as usize..(e.offset + e.nbytes) as usize];
        let w = e.dtype.size_of();
        let data = bytes.chunks_exact(w).map(T::read_le).collect();
        Tensor::from_vec(e.shape.clone(), data)
    }

    pub fn manifest(&self, blob_name: &str) -> Manifest {
        Manifest {
            format: FORMAT.into(),
            version: VERSION,
            blob: blob_name.into(),
            metadata: self.metadata.clone(),
            arrays: self.entries.clone(),
        }
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let blob = blob_path(manifest_path);
        let blob_name = blob
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| TensorError::Container(format!("bad path {}", manifest_path.display())))?
            .to_string();
        if let Some(dir) = manifest_path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(&blob, &self.blob)?;
        fs::write(manifest_path, serde_json::to_vec_pretty(&self.manifest(&blob_name))?)?;
        Ok(())
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
        if manifest.format != FORMAT {
            return Err(TensorError::Container(format!("unknown format {}", manifest.format)));
        }
        if manifest.version != VERSION {
            return Err(TensorError::Container(format!("unsupported version {}", manifest.version)));
        }
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let blob = fs::read(dir.join(&manifest.blob))?;
        for e in &manifest.arrays {
            let expect = e.shape.iter().product::<usize>() * e.dtype.size_of();
            if e.nbytes as usize != expect || (e.offset + e.nbytes) as usize > blob.len() {
                return Err(TensorError::Container(format!("array {} out of bounds or mis-sized", e.name)));
            }
        }
        Ok(Self {
            metadata: manifest.metadata,
            entries: manifest.arrays,
            blob,
        })
    }

    /// Every parameter and buffer of `store` under its stable name.
    pub fn from_store<T: Scalar>(store: &ParamStore<T>, metadata: serde_json::Value) -> Result<Self> {
        let mut c = Self::new(metadata);
        for (name, t) in store.named_arrays() {
            c.insert(name, &t)?;
        }
        Ok(c)
    }

    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let mut arrays = BTreeMap::new();
        for e in &self.entries {
            arrays.insert(e.name.clone(), self.get::<T>(&e.name)?);
        }
        store.load_named(&arrays)
    }
}

/// One sample of a feature store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub array: String,
    pub label: i64,
    #[serde(default)]
    pub split: String,
}

/// Named per-sample arrays plus a dataset manifest mapping sample id to
/// (array name, label, split). Saved as `<dir>/features.{json,bin}` and
/// `<dir>/dataset.json`.
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    pub entries: BTreeMap<String, FeatureEntry>,
    container: Container,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    version: u32,
    samples: BTreeMap<String, FeatureEntry>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: &str, features: &Tensor<f32>, label: i64, split: &str) -> Result<()> {
        let array = format!("sample.{id}");
        self.container.insert(array.clone(), features)?;
        self.entries.insert(
            id.to_string(),
            FeatureEntry {
                array,
                label,
                split: split.to_string(),
            },
        );
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<Tensor<f32>> {
        let e = self
            .entries
            .get(id)
            .ok_or_else(|| TensorError::Container(format!("no feature-store entry for sample {id}")))?;
        self.container.get(&e.array)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.container.save(&dir.join("features.json"))?;
        let manifest = DatasetManifest {
            format: "efcm-feature-store".into(),
            version: VERSION,
            samples: self.entries.clone(),
        };
        fs::write(dir.join("dataset.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("dataset.json"))?)?;
        let container = Container::load(&dir.join("features.json"))?;
        for (id, e) in &manifest.samples {
            if !container.contains(&e.array) {
                return Err(TensorError::Container(format!("sample {id} points at missing array {}", e.array)));
            }
        }
        Ok(Self {
            entries: manifest.samples,
            container,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_mixed_dtypes() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Container::new(serde_json::json!({"seed": 3}));
        let a = Tensor::<f32>::from_fn([2, 3], |i| i as f32 * 0.25);
        let b = Tensor::<f64>::from_fn([4], |i| -(i as f64));
        c.insert("a", &a).unwrap();
        c.insert("b", &b).unwrap();
        assert!(c.insert("a", &a).is_err());
        let p = dir.path().join("x.json");
        c.save(&p).unwrap();
        let back = Container::load(&p).unwrap();
        assert_eq!(back.get::<f32>("a").unwrap(), a);
        assert_eq!(back.get::<f64>("b").unwrap(), b);
        assert!(back.get::<f64>("a").is_err());
        assert_eq!(back.metadata["seed"], 3);
        assert_eq!(back.entries()[1].offset, 24);
    }

    #[test]
    fn feature_store_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut fs_ = FeatureStore::new();
        let v = Tensor::<f32>::from_vec([3], vec![0.1, f32::MIN_POSITIVE, -7.5]).unwrap();
        fs_.insert("s1", &v, 1, "train").unwrap();
        fs_.save(dir.path()).unwrap();
        let back = FeatureStore::load(dir.path()).unwrap();
        assert_eq!(back.get("s1").unwrap(), v);
        assert_eq!(back.entries["s1"].label, 1);
        assert!(back.get("s2").is_err());
    }
}
