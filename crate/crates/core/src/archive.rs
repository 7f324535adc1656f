//! Single-file archives of named arrays plus a string manifest.
//!
//! Backed by the safetensors container: arrays are stored little-endian with
//! their shapes, and the manifest lives in the header metadata.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    I64(Vec<i64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub arrays: Vec<NamedArray>,
    pub manifest: BTreeMap<String, String>,
}

impl Archive {
    pub fn push_f64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        self.arrays.push(NamedArray {
            name: name.into(),
            shape,
            data: ArrayData::F64(data),
        });
    }

    pub fn push_i64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<i64>) {
        self.arrays.push(NamedArray {
            name: name.into(),
            shape,
            data: ArrayData::I64(data),
        });
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Format(format!("archive has no array {name}")))
    }

    pub fn f64(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.get(name)? {
            NamedArray {
                shape,
                data: ArrayData::F64(v),
                ..
            } => Ok((shape, v)),
            _ => Err(Error::Format(format!("{name} is not f64"))),
        }
    }

    pub fn i64(&self, name: &str) -> Result<(&[usize], &[i64])> {
        match self.get(name)? {
            NamedArray {
                shape,
                data: ArrayData::I64(v),
                ..
            } => Ok((shape, v)),
            _ => Err(Error::Format(format!("{name} is not i64"))),
        }
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.manifest
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("manifest lacks {key}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes: Vec<Vec<u8>> = self
            .arrays
            .iter()
            .map(|a| match &a.data {
                ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
                ArrayData::I64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            })
            .collect();
        let views = self
            .arrays
            .iter()
            .zip(&bytes)
            .map(|(a, b)| {
                let dtype = match a.data {
                    ArrayData::F64(_) => Dtype::F64,
                    ArrayData::I64(_) => Dtype::I64,
                };
                Ok((a.name.clone(), TensorView::new(dtype, a.shape.clone(), b)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = self.manifest.clone().into_iter().collect();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        safetensors::serialize_to_file(views, &Some(meta), path)?;
        Ok(())
    }

    /// Arrays come back sorted by name.
    pub fn read(path: &Path) -> Result<Self> {
        let buffer = fs::read(path)?;
        let (_, metadata) = SafeTensors::read_metadata(&buffer)?;
        let manifest: BTreeMap<String, String> = metadata.metadata().clone().unwrap_or_default().into_iter().collect();
        let tensors = SafeTensors::deserialize(&buffer)?;
        let mut named: Vec<(String, TensorView<'_>)> = tensors.tensors();
        named.sort_by(|a, b| a.0.cmp(&b.0));
        let arrays = named
            .into_iter()
            .map(|(name, view)| {
                let raw = view.data();
                let data = match view.dtype() {
                    Dtype::F64 => ArrayData::F64(
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                            .collect(),
                    ),
                    Dtype::I64 => ArrayData::I64(
                        raw.chunks_exact(8)
                            .map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes")))
                            .collect(),
                    ),
                    other => return Err(Error::Format(format!("unsupported dtype {other:?}"))),
                };
                Ok(NamedArray {
                    name,
                    shape: view.shape().to_vec(),
                    data,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { arrays, manifest })
    }
}
