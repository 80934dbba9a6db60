//! Scalar abstraction: f32 or f64.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar every numeric routine in this crate is generic over.
pub trait Real:
    Float + NumAssign + FromPrimitive + ToPrimitive + Sum<Self> + Display + Debug + Send + Sync + 'static
{
}

impl<T> Real for T where
    T: Float + NumAssign + FromPrimitive + ToPrimitive + Sum<T> + Display + Debug + Send + Sync + 'static
{
}

/// Convert an `f64` constant into `T`.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 constant converts to scalar type")
}

/// 97.5% standard normal quantile, used for all Gaussian 95% intervals.
pub fn normal_q975<T: Real>() -> T {
    real(1.959_963_984_540_054)
}

/// Stable 64-bit mix used to derive independent RNG streams
/// (per-tree, per-iteration, per-split) from one master seed.
#[inline]
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_add(0x9E37_79B9_7F4A_7C15)))
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable FNV-1a hash for keying RNG streams to unit identifiers.
pub fn stable_key(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_spreads_streams() {
        let a = derive_seed(7, 0);
        let b = derive_seed(7, 1);
        let c = derive_seed(8, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, 0));
    }

    #[test]
    fn real_round_trips_constants() {
        let x: f32 = real(0.5);
        assert_eq!(x, 0.5f32);
        let y: f64 = normal_q975();
        assert!((y - 1.959_963_984_540_054).abs() == 0.0);
    }
}
