//! Row-major tensor containers and the raw-binary tensor file format.
//!
//! A tensor file is the little-endian element buffer with a JSON sidecar
//! `{"shape":[...], "dtype":"f16"}`. `u4` buffers store two codes per byte,
//! low nibble first, padded to whole bytes with a zero high nibble.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fp16::Half;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f16")]
    F16,
    #[serde(rename = "i8")]
    I8,
    #[serde(rename = "u8")]
    U8,
    #[serde(rename = "u4")]
    U4,
}

impl Dtype {
    pub fn tag(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F16 => "f16",
            Dtype::I8 => "i8",
            Dtype::U8 => "u8",
            Dtype::U4 => "u4",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Dtype> {
        match tag {
            "f32" => Ok(Dtype::F32),
            "f16" => Ok(Dtype::F16),
            "i8" => Ok(Dtype::I8),
            "u8" => Ok(Dtype::U8),
            "u4" => Ok(Dtype::U4),
            other => Err(Error::UnknownDtype(other.to_string())),
        }
    }

    /// Bytes needed to store `numel` logical elements.
    pub fn storage_bytes(self, numel: usize) -> usize {
        match self {
            Dtype::F32 => numel * 4,
            Dtype::F16 => numel * 2,
            Dtype::I8 | Dtype::U8 => numel,
            Dtype::U4 => numel.div_ceil(2),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F16(Vec<Half>),
    I8(Vec<i8>),
    U8(Vec<u8>),
    /// Nibble-packed codes, low nibble first.
    U4(Vec<u8>),
}

/// A dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn from_f16(shape: Vec<usize>, data: Vec<Half>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: TensorData::F16(data),
        }
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: TensorData::F32(data),
        }
    }

    pub fn from_i8(shape: Vec<usize>, data: Vec<i8>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: TensorData::I8(data),
        }
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: TensorData::U8(data),
        }
    }

    /// Build a u4 tensor from one logical code per input byte (values 0..16).
    pub fn from_u4_codes(shape: Vec<usize>, codes: &[u8]) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), codes.len());
        let mut packed = vec![0u8; codes.len().div_ceil(2)];
        for (i, &c) in codes.iter().enumerate() {
            debug_assert!(c < 16);
            packed[i / 2] |= (c & 0xf) << ((i % 2) * 4);
        }
        Tensor {
            shape,
            data: TensorData::U4(packed),
        }
    }

    pub fn zeros(shape: Vec<usize>, dtype: Dtype) -> Tensor {
        let numel = shape.iter().product();
        let data = match dtype {
            Dtype::F32 => TensorData::F32(vec![0.0; numel]),
            Dtype::F16 => TensorData::F16(vec![Half::ZERO; numel]),
            Dtype::I8 => TensorData::I8(vec![0; numel]),
            Dtype::U8 => TensorData::U8(vec![0; numel]),
            Dtype::U4 => TensorData::U4(vec![0; numel.div_ceil(2)]),
        };
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn dtype(&self) -> Dtype {
        match &self.data {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F16(_) => Dtype::F16,
            TensorData::I8(_) => Dtype::I8,
            TensorData::U8(_) => Dtype::U8,
            TensorData::U4(_) => Dtype::U4,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_f16(&self) -> &[Half] {
        match &self.data {
            TensorData::F16(v) => v,
            other => panic!("expected f16 tensor, found {:?}", dtype_of(other)),
        }
    }

    pub fn as_f32(&self) -> &[f32] {
        match &self.data {
            TensorData::F32(v) => v,
            other => panic!("expected f32 tensor, found {:?}", dtype_of(other)),
        }
    }

    pub fn as_i8(&self) -> &[i8] {
        match &self.data {
            TensorData::I8(v) => v,
            other => panic!("expected i8 tensor, found {:?}", dtype_of(other)),
        }
    }

    pub fn as_u8(&self) -> &[u8] {
        match &self.data {
            TensorData::U8(v) => v,
            other => panic!("expected u8 tensor, found {:?}", dtype_of(other)),
        }
    }

    /// Raw nibble-packed bytes of a u4 tensor.
    pub fn as_u4_packed(&self) -> &[u8] {
        match &self.data {
            TensorData::U4(v) => v,
            other => panic!("expected u4 tensor, found {:?}", dtype_of(other)),
        }
    }

    /// Logical u4 code at a flat index.
    pub fn u4_at(&self, idx: usize) -> u8 {
        let packed = self.as_u4_packed();
        (packed[idx / 2] >> ((idx % 2) * 4)) & 0xf
    }

    /// Serialize the element buffer little-endian.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match &self.data {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::F16(v) => v.iter().flat_map(|x| x.to_bits().to_le_bytes()).collect(),
            TensorData::I8(v) => v.iter().map(|&x| x as u8).collect(),
            TensorData::U8(v) => v.clone(),
            TensorData::U4(v) => v.clone(),
        }
    }

    /// Rebuild a tensor from its little-endian buffer.
    pub fn from_le_bytes(shape: Vec<usize>, dtype: Dtype, bytes: &[u8]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        let expected = dtype.storage_bytes(numel);
        if bytes.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: bytes.len(),
            });
        }
        let data = match dtype {
            Dtype::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            Dtype::F16 => TensorData::F16(
                bytes
                    .chunks_exact(2)
                    .map(|c| Half::from_bits(u16::from_le_bytes([c[0], c[1]])))
                    .collect(),
            ),
            Dtype::I8 => TensorData::I8(bytes.iter().map(|&b| b as i8).collect()),
            Dtype::U8 => TensorData::U8(bytes.to_vec()),
            Dtype::U4 => {
                if numel % 2 == 1 && bytes.last().is_some_and(|b| b >> 4 != 0) {
                    return Err(Error::InvalidConfig(
                        "u4 padding nibble must be zero".into(),
                    ));
                }
                TensorData::U4(bytes.to_vec())
            }
        };
        Ok(Tensor { shape, data })
    }

    /// Crop a 2-D tensor to its leading `rows` x `cols` corner.
    pub fn crop2d(&self, rows: usize, cols: usize) -> Tensor {
        assert_eq!(self.shape.len(), 2);
        let (_r, c) = (self.shape[0], self.shape[1]);
        assert!(rows <= self.shape[0] && cols <= c);
        match &self.data {
            TensorData::F16(v) => {
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    out.extend_from_slice(&v[r * c..r * c + cols]);
                }
                Tensor::from_f16(vec![rows, cols], out)
            }
            TensorData::F32(v) => {
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    out.extend_from_slice(&v[r * c..r * c + cols]);
                }
                Tensor::from_f32(vec![rows, cols], out)
            }
            _ => unimplemented!("crop2d is only needed for float tensors"),
        }
    }
}

fn dtype_of(data: &TensorData) -> Dtype {
    match data {
        TensorData::F32(_) => Dtype::F32,
        TensorData::F16(_) => Dtype::F16,
        TensorData::I8(_) => Dtype::I8,
        TensorData::U8(_) => Dtype::U8,
        TensorData::U4(_) => Dtype::U4,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub shape: Vec<usize>,
    pub dtype: Dtype,
}

/// Parse a tensor from sidecar JSON text and the raw data bytes.
pub fn tensor_from_parts(sidecar_json: &str, data: &[u8]) -> Result<Tensor> {
    let sidecar: Sidecar = serde_json::from_str(sidecar_json)?;
    Tensor::from_le_bytes(sidecar.shape, sidecar.dtype, data)
}

/// Write `tensor` to `data_path` with its JSON sidecar at `sidecar_path`.
pub fn write_tensor(tensor: &Tensor, data_path: &Path, sidecar_path: &Path) -> Result<()> {
    let sidecar = Sidecar {
        shape: tensor.shape().to_vec(),
        dtype: tensor.dtype(),
    };
    fs::write(data_path, tensor.to_le_bytes())?;
    fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// Read a tensor written by [`write_tensor`]. Lossless on bit patterns.
pub fn read_tensor(data_path: &Path, sidecar_path: &Path) -> Result<Tensor> {
    let sidecar_json = fs::read_to_string(sidecar_path)?;
    let data = fs::read(data_path)?;
    tensor_from_parts(&sidecar_json, &data)
}
