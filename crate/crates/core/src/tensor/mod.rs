//! Dense row-major tensors whose buffers are allocated from a tracked
//! [`Arena`].
//!
//! A `Tensor` is a shape plus a reference-counted buffer. `Clone` shares the
//! buffer (no new allocation is recorded); [`Tensor::duplicate`] makes a deep,
//! tracked copy. Mutating a shared buffer copies it first.

mod ops;

use std::fmt;
use std::sync::Arc;

use num_traits::Float;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memtrack::Arena;

pub use ops::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    pub const fn bytes(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F64 => "f64",
            Dtype::F32 => "f32",
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Dtype::F64),
            "f32" => Ok(Dtype::F32),
            other => Err(Error::Config(format!("unknown dtype `{other}`"))),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[doc(hidden)]
#[derive(Debug, Clone, PartialEq)]
pub enum Storage {
    F64(Vec<f64>),
    F32(Vec<f32>),
}

impl Storage {
    fn len(&self) -> usize {
        match self {
            Storage::F64(v) => v.len(),
            Storage::F32(v) => v.len(),
        }
    }

    fn dtype(&self) -> Dtype {
        match self {
            Storage::F64(_) => Dtype::F64,
            Storage::F32(_) => Dtype::F32,
        }
    }

    fn zeros(dtype: Dtype, n: usize) -> Storage {
        match dtype {
            Dtype::F64 => Storage::F64(vec![0.0; n]),
            Dtype::F32 => Storage::F32(vec![0.0; n]),
        }
    }

    fn from_f64(dtype: Dtype, data: &[f64]) -> Storage {
        match dtype {
            Dtype::F64 => Storage::F64(data.to_vec()),
            Dtype::F32 => Storage::F32(data.iter().map(|&x| x as f32).collect()),
        }
    }

    pub(crate) fn all_finite(&self) -> bool {
        match self {
            Storage::F64(v) => v.iter().all(|x| x.is_finite()),
            Storage::F32(v) => v.iter().all(|x| x.is_finite()),
        }
    }
}

mod sealed {
    use super::Storage;

    pub trait Storable: Sized {
        fn wrap(v: Vec<Self>) -> Storage;
        fn view(s: &Storage) -> Option<&[Self]>;
        fn view_mut(s: &mut Storage) -> Option<&mut [Self]>;
    }
}

/// Scalar types a tensor can hold (`f64`, `f32`).
pub trait Element: sealed::Storable + Float + Default + fmt::Debug + Send + Sync + 'static {
    const DTYPE: Dtype;
    fn of(x: f64) -> Self;
}

macro_rules! element {
    ($t:ty, $variant:ident) => {
        impl Element for $t {
            const DTYPE: Dtype = Dtype::$variant;
            fn of(x: f64) -> Self {
                x as $t
            }
        }

        impl sealed::Storable for $t {
            fn wrap(v: Vec<Self>) -> Storage {
                Storage::$variant(v)
            }
            fn view(s: &Storage) -> Option<&[Self]> {
                match s {
                    Storage::$variant(v) => Some(v),
                    _ => None,
                }
            }
            fn view_mut(s: &mut Storage) -> Option<&mut [Self]> {
                match s {
                    Storage::$variant(v) => Some(v),
                    _ => None,
                }
            }
        }
    };
}

element!(f64, F64);
element!(f32, F32);

struct Buffer {
    data: Storage,
    label: String,
    arena: Arena,
    param: bool,
}

impl Buffer {
    fn new(arena: &Arena, data: Storage, label: &str, param: bool) -> Buffer {
        let bytes = (data.len() * data.dtype().bytes()) as u64;
        arena.record_alloc(bytes, label);
        Buffer {
            data,
            label: label.to_string(),
            arena: arena.clone(),
            param,
        }
    }

    fn bytes(&self) -> u64 {
        (self.data.len() * self.data.dtype().bytes()) as u64
    }
}

impl Clone for Buffer {
    fn clone(&self) -> Self {
        Buffer::new(&self.arena, self.data.clone(), &self.label, self.param)
    }
}

impl Drop for Buffer {
    fn drop(&mut self) {
        self.arena.record_free(self.bytes(), &self.label);
    }
}

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    buf: Arc<Buffer>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &self.dtype())
            .field("label", &self.buf.label)
            .finish()
    }
}

impl Tensor {
    pub(crate) fn from_storage(arena: &Arena, shape: &[usize], data: Storage, label: &str) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape: shape.to_vec(),
            buf: Arc::new(Buffer::new(arena, data, label, false)),
        }
    }

    pub fn zeros(arena: &Arena, shape: &[usize], dtype: Dtype, label: &str) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_storage(arena, shape, Storage::zeros(dtype, n), label)
    }

    pub fn full(arena: &Arena, shape: &[usize], dtype: Dtype, value: f64, label: &str) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_storage(arena, shape, Storage::from_f64(dtype, &vec![value; n]), label)
    }

    pub fn from_f64(arena: &Arena, shape: &[usize], dtype: Dtype, data: &[f64], label: &str) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "from_f64",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "from_f64" });
        }
        Ok(Tensor::from_storage(
            arena,
            shape,
            Storage::from_f64(dtype, data),
            label,
        ))
    }

    /// A tensor flagged as a model parameter: matmuls reading it count toward
    /// the weight-read counter.
    pub fn new_param(arena: &Arena, shape: &[usize], dtype: Dtype, data: &[f64], label: &str) -> Result<Tensor> {
        let t = Tensor::from_f64(arena, shape, dtype, data, label)?;
        Ok(t.into_param())
    }

    fn into_param(mut self) -> Tensor {
        self.make_unique();
        Arc::get_mut(&mut self.buf).expect("unique").param = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.buf.data.len()
    }

    /// Product of all extents but the last.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }

    /// Last extent.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn dtype(&self) -> Dtype {
        self.buf.data.dtype()
    }

    pub fn label(&self) -> &str {
        &self.buf.label
    }

    pub fn arena(&self) -> &Arena {
        &self.buf.arena
    }

    pub fn is_param(&self) -> bool {
        self.buf.param
    }

    pub fn bytes(&self) -> u64 {
        self.buf.bytes()
    }

    /// True when both handles share one buffer.
    pub fn shares_buffer(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.buf, &other.buf)
    }

    pub(crate) fn storage(&self) -> &Storage {
        &self.buf.data
    }

    fn make_unique(&mut self) {
        if Arc::get_mut(&mut self.buf).is_none() {
            let copy = (*self.buf).clone();
            self.buf = Arc::new(copy);
        }
    }

    /// Mutable access to the storage; copies a shared buffer first.
    pub(crate) fn storage_mut(&mut self) -> &mut Storage {
        self.make_unique();
        &mut Arc::get_mut(&mut self.buf).expect("unique after make_unique").data
    }

    /// Typed view of the data. Panics if `T` is not this tensor's dtype.
    pub fn data<T: Element>(&self) -> &[T] {
        T::view(&self.buf.data).expect("tensor dtype does not match requested element type")
    }

    /// Typed mutable view (copies a shared buffer first). Panics on dtype mismatch.
    pub fn data_mut<T: Element>(&mut self) -> &mut [T] {
        T::view_mut(self.storage_mut()).expect("tensor dtype does not match requested element type")
    }

    pub fn to_vec(&self) -> Vec<f64> {
        match &self.buf.data {
            Storage::F64(v) => v.clone(),
            Storage::F32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn get(&self, flat: usize) -> f64 {
        match &self.buf.data {
            Storage::F64(v) => v[flat],
            Storage::F32(v) => v[flat] as f64,
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.get(row * self.cols() + col)
    }

    /// Overwrites one element (copying a shared buffer first).
    pub fn set(&mut self, flat: usize, value: f64) {
        match self.storage_mut() {
            Storage::F64(v) => v[flat] = value,
            Storage::F32(v) => v[flat] = value as f32,
        }
    }

    /// Same buffer, new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::dim("reshape", format!("{:?} -> {:?}", self.shape, shape)));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            buf: Arc::clone(&self.buf),
        })
    }

    /// Deep copy with a new tracked allocation.
    pub fn duplicate(&self, label: &str) -> Tensor {
        let mut t = Tensor::from_storage(self.arena(), &self.shape, self.buf.data.clone(), label);
        if self.buf.param {
            t = t.into_param();
        }
        t
    }

    /// Deep copy allocated in another arena, keeping label and parameter flag.
    pub fn copy_to(&self, arena: &Arena) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            buf: Arc::new(Buffer::new(
                arena,
                self.buf.data.clone(),
                &self.buf.label,
                self.buf.param,
            )),
        }
    }

    pub fn sum_squares(&self) -> f64 {
        match &self.buf.data {
            Storage::F64(v) => v.iter().map(|x| x * x).sum(),
            Storage::F32(v) => v.iter().map(|&x| (x as f64) * (x as f64)).sum(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.to_vec()
            .iter()
            .zip(other.to_vec())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape && self.buf.data == other.buf.data
    }

    pub(crate) fn check_finite_in_place(&self, op: &'static str) -> Result<()> {
        if self.buf.data.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Tensor> {
        if self.buf.data.all_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clone_shares_and_duplicate_allocates() {
        let arena = Arena::new();
        let t = Tensor::zeros(&arena, &[4, 4], Dtype::F64, "t");
        let before = arena.live_bytes();
        let shared = t.clone();
        assert_eq!(arena.live_bytes(), before);
        let deep = t.duplicate("copy");
        assert_eq!(arena.live_bytes(), before + 128);
        drop(shared);
        drop(deep);
        drop(t);
        assert_eq!(arena.live_bytes(), 0);
    }

    #[test]
    fn copy_on_write_when_shared() {
        let arena = Arena::new();
        let a = Tensor::from_f64(&arena, &[2], Dtype::F64, &[1.0, 2.0], "a").unwrap();
        let mut b = a.clone();
        b.set(0, 5.0);
        assert_eq!(a.to_vec(), vec![1.0, 2.0]);
        assert_eq!(b.to_vec(), vec![5.0, 2.0]);
        assert_eq!(arena.live_bytes(), 32);
    }

    #[test]
    fn dtype_bytes_match_tag() {
        assert_eq!(Dtype::F64.bytes(), 8);
        assert_eq!(Dtype::F32.bytes(), 4);
        let arena = Arena::new();
        let t = Tensor::zeros(&arena, &[3, 5], Dtype::F32, "t");
        assert_eq!(t.bytes(), 60);
        assert_eq!(t.numel(), t.shape().iter().product::<usize>());
    }

    #[test]
    fn from_f64_rejects_bad_input() {
        let arena = Arena::new();
        assert!(Tensor::from_f64(&arena, &[2, 2], Dtype::F64, &[1.0; 3], "x").is_err());
        assert!(matches!(
            Tensor::from_f64(&arena, &[1], Dtype::F64, &[f64::NAN], "x"),
            Err(Error::NonFinite { .. })
        ));
    }
}
