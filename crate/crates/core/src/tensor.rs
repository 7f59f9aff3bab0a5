//! Dense row-major tensors and the `TNS1` on-disk format.
//!
//! `TNS1` layout: the magic bytes `TNS1`, a little-endian `u32` rank, `rank`
//! little-endian `u32` extents, then the payload as little-endian `f32`.

use std::fmt::Debug;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const TNS1_MAGIC: &[u8; 4] = b"TNS1";

/// Element type of a [`Tensor`].
///
/// Production tensors are `f32`; `f64` tensors exist so gradient checks can
/// run the exact same graph code without single-precision roundoff.
pub trait Scalar: Copy + Default + Debug + PartialEq + PartialOrd + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn zero() -> Self {
        Self::default()
    }
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
            grad: None,
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "set_grad",
                left: self.shape.clone(),
                right: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64(v.to_f64())).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.to_f64().is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum::<f64>() / self.data.len() as f64
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero tensors"))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape() != first.shape() {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: first.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
        }
        Tensor::new(shape, data)
    }

    /// Splits along the leading axis.
    pub fn unstack(&self) -> Vec<Tensor<T>> {
        let inner: Vec<usize> = if self.shape.len() > 1 {
            self.shape[1..].to_vec()
        } else {
            vec![1]
        };
        let step: usize = inner.iter().product();
        self.data
            .chunks(step)
            .map(|c| Tensor {
                shape: inner.clone(),
                data: c.to_vec(),
                grad: None,
            })
            .collect()
    }
}

impl Tensor<f32> {
    pub fn to_tns1_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(TNS1_MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a `TNS1` buffer; `origin` is only used in error messages.
    pub fn from_tns1_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::corrupt(origin, reason);
        if bytes.len() < 8 {
            return Err(corrupt(format!("{} bytes is too short for a header", bytes.len())));
        }
        if &bytes[..4] != TNS1_MAGIC {
            return Err(corrupt(format!("bad magic {:?}", &bytes[..4])));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let rank = word(4);
        if rank == 0 || rank > 16 {
            return Err(corrupt(format!("implausible rank {rank}")));
        }
        let header = 8 + 4 * rank;
        if bytes.len() < header {
            return Err(corrupt("truncated extents".into()));
        }
        let shape: Vec<usize> = (0..rank).map(|i| word(8 + 4 * i)).collect();
        if shape.contains(&0) {
            return Err(corrupt(format!("zero extent in {shape:?}")));
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| corrupt(format!("extent product overflows for {shape:?}")))?;
        let expected = n
            .checked_mul(4)
            .and_then(|p| p.checked_add(header))
            .ok_or_else(|| corrupt("payload size overflows".into()))?;
        if bytes.len() != expected {
            return Err(corrupt(format!(
                "payload for {shape:?} needs {expected} bytes, file has {}",
                bytes.len()
            )));
        }
        let data = bytes[header..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn write_tns1(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path.as_ref())?;
        f.write_all(&self.to_tns1_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn read_tns1(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_tns1_bytes(&bytes, path)
    }

    /// Bit pattern of the payload, used for hashing and exact comparison.
    pub fn bits(&self) -> impl Iterator<Item = u32> + '_ {
        self.data.iter().map(|v| v.to_bits())
    }
}

/// FNV-1a over the shape and payload bits.
pub fn fingerprint<'a>(tensors: impl IntoIterator<Item = &'a Tensor<f32>>) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |word: u32| {
        for b in word.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    for t in tensors {
        for &d in t.shape() {
            feed(d as u32);
        }
        for bits in t.bits() {
            feed(bits);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn header_is_bit_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0f32, -2.5]).unwrap();
        let b = t.to_tns1_bytes();
        assert_eq!(&b[..4], b"TNS1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&b[20..24], &(-2.5f32).to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn corrupt_inputs_are_errors() {
        let t = Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let good = t.to_tns1_bytes();
        let p = Path::new("mem");

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            Tensor::from_tns1_bytes(&bad_magic, p),
            Err(Error::Corrupt { .. })
        ));
        assert!(Tensor::from_tns1_bytes(&good[..good.len() - 1], p).is_err());
        let mut long = good.clone();
        long.push(0);
        assert!(Tensor::from_tns1_bytes(&long, p).is_err());
        assert!(Tensor::from_tns1_bytes(&good[..6], p).is_err());
    }

    #[test]
    fn stack_and_unstack() {
        let a = Tensor::new(vec![1, 2], vec![1.0f32, 2.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![3.0f32, 4.0]).unwrap();
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 1, 2]);
        assert_eq!(s.unstack(), vec![a, b]);
    }

    proptest! {
        #[test]
        fn tns1_round_trip_is_bit_exact(
            shape in proptest::collection::vec(1usize..5, 1..5),
            seed in any::<u32>(),
        ) {
            let n: usize = shape.iter().product();
            // arbitrary bit patterns, including NaN payloads and subnormals
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 40503)))
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = Tensor::from_tns1_bytes(&t.to_tns1_bytes(), Path::new("mem")).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.bits().eq(t.bits()));
        }
    }
}
