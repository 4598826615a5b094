//! A scalar that counts its multiplications, for checking analytic MAC
//! counts against what the kernels actually execute.
//!
//! The counter is process-global. Callers that count concurrently must
//! serialise around [`count_multiplies`].

use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::numerics::Real;

static MULTIPLIES: AtomicU64 = AtomicU64::new(0);
static EXCLUSIVE: Mutex<()> = Mutex::new(());

/// `f64` whose `*` and `*=` bump a global counter.
#[derive(Clone, Copy, Debug, Default, PartialEq, PartialOrd)]
pub struct Counted(pub f64);

/// Runs `f` with the counter reset and returns its result together with the
/// number of multiplies performed on [`Counted`] values.
pub fn count_multiplies<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let _guard = EXCLUSIVE.lock().unwrap_or_else(|e| e.into_inner());
    MULTIPLIES.store(0, Ordering::SeqCst);
    let r = f();
    (r, MULTIPLIES.load(Ordering::SeqCst))
}

impl Mul for Counted {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        MULTIPLIES.fetch_add(1, Ordering::Relaxed);
        Counted(self.0 * rhs.0)
    }
}

impl MulAssign for Counted {
    #[inline]
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl Add for Counted {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        Counted(self.0 + rhs.0)
    }
}

impl AddAssign for Counted {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        self.0 += rhs.0;
    }
}

impl Sub for Counted {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        Counted(self.0 - rhs.0)
    }
}

impl SubAssign for Counted {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        self.0 -= rhs.0;
    }
}

impl Div for Counted {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        Counted(self.0 / rhs.0)
    }
}

impl Neg for Counted {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Counted(-self.0)
    }
}

impl Real for Counted {
    const ZERO: Self = Counted(0.0);
    const ONE: Self = Counted(1.0);

    fn from_f64(v: f64) -> Self {
        Counted(v)
    }
    fn to_f64(self) -> f64 {
        self.0
    }
    fn sqrt(self) -> Self {
        Counted(self.0.sqrt())
    }
    fn abs(self) -> Self {
        Counted(self.0.abs())
    }
    fn is_finite(self) -> bool {
        self.0.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{matmul, Matrix};

    #[test]
    fn counts_matmul_multiplies() {
        let x = Matrix::from_vec(3, 4, vec![Counted(1.0); 12]).unwrap();
        let w = Matrix::from_vec(4, 5, vec![Counted(2.0); 20]).unwrap();
        let (y, n) = count_multiplies(|| matmul(&x, &w).unwrap());
        assert_eq!(n, 3 * 4 * 5);
        assert_eq!(y.get(2, 4), Counted(8.0));
    }

    #[test]
    fn additions_are_free() {
        let (_, n) = count_multiplies(|| Counted(1.0) + Counted(2.0) - Counted(0.5));
        assert_eq!(n, 0);
    }
}
