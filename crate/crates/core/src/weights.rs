// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reading named tensors out of a single-file safetensors checkpoint.

use std::path::Path;

use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};

/// Owned bytes of a safetensors file with typed, shape-checked accessors.
pub struct TensorFile {
    bytes: Vec<u8>,
}

impl TensorFile {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file = TensorFile { bytes };
        // validate the header once up front
        file.view()?;
        Ok(file)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let file = TensorFile { bytes };
        file.view()?;
        Ok(file)
    }

    fn view(&self) -> Result<SafeTensors<'_>> {
        SafeTensors::deserialize(&self.bytes).map_err(|e| Error::WeightFormat(e.to_string()))
    }

    pub fn names(&self) -> Result<Vec<String>> {
        let mut names: Vec<String> = self.view()?.names().into_iter().map(String::from).collect();
        names.sort();
        Ok(names)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.view().map(|v| v.tensor(name).is_ok()).unwrap_or(false)
    }

    pub fn shape(&self, name: &str) -> Result<Vec<usize>> {
        let view = self.view()?;
        let t = view
            .tensor(name)
            .map_err(|_| Error::MissingTensor(name.to_owned()))?;
        Ok(t.shape().to_vec())
    }

    /// Tensor `name` as row-major f32, converting from f16/bf16/f64.
    pub fn f32(&self, name: &str, expected: &[usize]) -> Result<Vec<f32>> {
        let view = self.view()?;
        let t = view
            .tensor(name)
            .map_err(|_| Error::MissingTensor(name.to_owned()))?;
        if t.shape() != expected {
            return Err(Error::ShapeMismatch {
                name: name.to_owned(),
                expected: expected.to_vec(),
                actual: t.shape().to_vec(),
            });
        }
        let data = t.data();
        let values = match t.dtype() {
            Dtype::F32 => data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Dtype::F16 => data
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            Dtype::BF16 => data
                .chunks_exact(2)
                .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            Dtype::F64 => data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as f32)
                .collect(),
            other => {
                return Err(Error::UnsupportedDtype {
                    name: name.to_owned(),
                    dtype: format!("{other:?}"),
                })
            }
        };
        Ok(values)
    }

    /// Tensor `name` as f64, for reference fixtures.
    pub fn f64(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let view = self.view()?;
        let t = view
            .tensor(name)
            .map_err(|_| Error::MissingTensor(name.to_owned()))?;
        let data = t.data();
        let values = match t.dtype() {
            Dtype::F64 => data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            Dtype::F32 => data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::I64 => data
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes")) as f64)
                .collect(),
            other => {
                return Err(Error::UnsupportedDtype {
                    name: name.to_owned(),
                    dtype: format!("{other:?}"),
                })
            }
        };
        Ok((t.shape().to_vec(), values))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use safetensors::tensor::TensorView;

    fn file_with(dtype: Dtype, shape: Vec<usize>, data: &[u8]) -> TensorFile {
        let view = TensorView::new(dtype, shape, data).unwrap();
        let bytes = safetensors::serialize([("w", view)], None).unwrap();
        TensorFile::from_bytes(bytes).unwrap()
    }

    #[test]
    fn converts_half_precision() {
        let vals = [half::f16::from_f32(1.5), half::f16::from_f32(-2.0)];
        let data: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        let f = file_with(Dtype::F16, vec![2], &data);
        assert_eq!(f.f32("w", &[2]).unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn shape_and_dtype_errors() {
        let data: Vec<u8> = [1.0f32, 2.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        let f = file_with(Dtype::F32, vec![2], &data);
        assert!(matches!(f.f32("w", &[1, 2]), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(f.f32("v", &[2]), Err(Error::MissingTensor(n)) if n == "v"));
        let f = file_with(Dtype::I32, vec![2], &data);
        assert!(matches!(f.f32("w", &[2]), Err(Error::UnsupportedDtype { .. })));
    }

    #[test]
    fn garbage_is_a_format_error() {
        assert!(matches!(
            TensorFile::from_bytes(vec![1, 2, 3]),
            Err(Error::WeightFormat(_))
        ));
    }
}
