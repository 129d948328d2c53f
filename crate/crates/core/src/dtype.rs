//! Element types and the tagged 1-D array used for every stored tensor.

use alloc::vec::Vec;
use half::f16;

/// Element type. The discriminant is the on-disk dtype code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F16 = 1,
    F64 = 2,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
            DType::F64 => 8,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F16),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
            DType::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TypedArray {
    F32(Vec<f32>),
    F16(Vec<f16>),
    F64(Vec<f64>),
}

impl TypedArray {
    pub fn zeros(dtype: DType, len: usize) -> Self {
        match dtype {
            DType::F32 => TypedArray::F32(alloc::vec![0.0; len]),
            DType::F16 => TypedArray::F16(alloc::vec![f16::ZERO; len]),
            DType::F64 => TypedArray::F64(alloc::vec![0.0; len]),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            TypedArray::F32(_) => DType::F32,
            TypedArray::F16(_) => DType::F16,
            TypedArray::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TypedArray::F32(v) => v.len(),
            TypedArray::F16(v) => v.len(),
            TypedArray::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn byte_len(&self) -> usize {
        self.len() * self.dtype().size()
    }

    /// Copy of `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> TypedArray {
        let r = start..start + len;
        match self {
            TypedArray::F32(v) => TypedArray::F32(v[r].to_vec()),
            TypedArray::F16(v) => TypedArray::F16(v[r].to_vec()),
            TypedArray::F64(v) => TypedArray::F64(v[r].to_vec()),
        }
    }

    /// Appends `other`; both arrays must share a dtype.
    pub fn extend_from(&mut self, other: &TypedArray) -> bool {
        match (self, other) {
            (TypedArray::F32(a), TypedArray::F32(b)) => a.extend_from_slice(b),
            (TypedArray::F16(a), TypedArray::F16(b)) => a.extend_from_slice(b),
            (TypedArray::F64(a), TypedArray::F64(b)) => a.extend_from_slice(b),
            _ => return false,
        }
        true
    }

    /// Pads with zeros (or truncates) to `len`.
    pub fn resize(&mut self, len: usize) {
        match self {
            TypedArray::F32(v) => v.resize(len, 0.0),
            TypedArray::F16(v) => v.resize(len, f16::ZERO),
            TypedArray::F64(v) => v.resize(len, 0.0),
        }
    }

    /// Little-endian encoding of `[start, start + count)` appended to `out`.
    pub fn encode_le(&self, start: usize, count: usize, out: &mut Vec<u8>) {
        let r = start..start + count;
        match self {
            TypedArray::F32(v) => v[r].iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TypedArray::F16(v) => v[r].iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TypedArray::F64(v) => v[r].iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    /// Decodes little-endian bytes (length must be a multiple of the element size).
    pub fn decode_le(dtype: DType, bytes: &[u8]) -> TypedArray {
        match dtype {
            DType::F32 => TypedArray::F32(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
            ),
            DType::F16 => {
                TypedArray::F16(bytes.chunks_exact(2).map(|c| f16::from_le_bytes([c[0], c[1]])).collect())
            }
            DType::F64 => TypedArray::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                    .collect(),
            ),
        }
    }

    /// Bitwise equality (distinguishes NaN payloads and signed zeros).
    pub fn bit_eq(&self, other: &TypedArray) -> bool {
        match (self, other) {
            (TypedArray::F32(a), TypedArray::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TypedArray::F16(a), TypedArray::F16(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TypedArray::F64(a), TypedArray::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

/// Scalar types that can be stored in a [`TypedArray`].
pub trait Element: Copy + Sized + 'static {
    const DTYPE: DType;
    fn wrap(v: Vec<Self>) -> TypedArray;
    fn view(a: &TypedArray) -> Option<&[Self]>;
    fn unwrap(a: TypedArray) -> Option<Vec<Self>>;
    fn zero() -> Self;
}

macro_rules! element {
    ($t:ty, $variant:ident, $zero:expr) => {
        impl Element for $t {
            const DTYPE: DType = DType::$variant;
            fn wrap(v: Vec<Self>) -> TypedArray {
                TypedArray::$variant(v)
            }
            fn view(a: &TypedArray) -> Option<&[Self]> {
                match a {
                    TypedArray::$variant(v) => Some(v),
                    _ => None,
                }
            }
            fn unwrap(a: TypedArray) -> Option<Vec<Self>> {
                match a {
                    TypedArray::$variant(v) => Some(v),
                    _ => None,
                }
            }
            fn zero() -> Self {
                $zero
            }
        }
    };
}

element!(f32, F32, 0.0);
element!(f16, F16, f16::ZERO);
element!(f64, F64, 0.0);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn le_encoding_round_trips() {
        let a = TypedArray::F16(alloc::vec![f16::from_f32(1.5), f16::from_f32(-2.0), f16::NAN]);
        let mut bytes = Vec::new();
        a.encode_le(0, a.len(), &mut bytes);
        assert_eq!(bytes.len(), 6);
        assert!(TypedArray::decode_le(DType::F16, &bytes).bit_eq(&a));
        assert_eq!(DType::from_code(2), Some(DType::F64));
        assert_eq!(DType::from_code(3), None);
    }
}
