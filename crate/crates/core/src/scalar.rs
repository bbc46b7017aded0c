//! Scalar abstraction shared by the statistics and tensor code.
//!
//! Everything numeric that is not pinned to a storage width by a file format
//! is written against [`Real`], so the same code runs in `f32` (training) and
//! `f64` (gradient checking, statistics oracles).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point scalar usable throughout the crate.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Identifier written into checkpoint headers.
    const DTYPE: &'static str;
    /// Bytes per element in little-endian serialization.
    const BYTES: usize;

    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_real {
    ($t:ty, $name:literal) => {
        impl Real for $t {
            const DTYPE: &'static str = $name;
            const BYTES: usize = std::mem::size_of::<$t>();

            #[inline]
            fn lit(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_real!(f32, "f32le");
impl_real!(f64, "f64le");

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<T: Real>(v: T) -> T {
        let mut buf = Vec::new();
        v.write_le(&mut buf);
        assert_eq!(buf.len(), T::BYTES);
        T::read_le(&buf)
    }

    #[test]
    fn le_roundtrip_is_bit_exact() {
        for v in [0.0f32, -1.0, 1.0e-30, f32::MAX, 0.1] {
            assert_eq!(roundtrip(v).to_bits(), v.to_bits());
        }
        for v in [0.0f64, -1.0, 1.0e-300, 0.1] {
            assert_eq!(roundtrip(v).to_bits(), v.to_bits());
        }
    }
}
