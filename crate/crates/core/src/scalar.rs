//! Floating-point element type shared by every numeric routine in the crate.

use core::fmt::Debug;
use core::iter::Sum;

use num_traits::Float;

/// A floating-point element usable by the model, tape and optimizer.
///
/// Implemented for `f32` and `f64`. Gradient verification requires `f64`.
pub trait Scalar: Float + Debug + Default + Sum + Send + Sync + 'static {
    /// Width of the little-endian encoding in bytes.
    const BYTES: usize;
    /// Name used in checkpoints and configs.
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut alloc::vec::Vec<u8>);
    /// Decodes one value from exactly `Self::BYTES` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    const NAME: &'static str = "float64";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut alloc::vec::Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
}

impl Scalar for f32 {
    const BYTES: usize = 4;
    const NAME: &'static str = "float32";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut alloc::vec::Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 4];
        b.copy_from_slice(&bytes[..4]);
        f32::from_le_bytes(b)
    }
}
