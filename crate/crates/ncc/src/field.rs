//! Arithmetic over the Mersenne prime field F_p, p = 2^61 - 1.
//!
//! All sketch cells, fingerprints and hash evaluations use this field so
//! that recovery is exact (no floating point anywhere).

pub const P: u64 = (1u64 << 61) - 1;

/// Reduce a value already < 2p.
#[inline]
fn reduce_once(x: u64) -> u64 {
    if x >= P {
        x - P
    } else {
        x
    }
}

/// Canonical reduction of an arbitrary u64 (used when ingesting raw bits).
#[inline]
pub fn reduce64(x: u64) -> u64 {
    let lo = x & P;
    let hi = x >> 61;
    reduce_once(lo + hi)
}

#[inline]
pub fn add(a: u64, b: u64) -> u64 {
    debug_assert!(a < P && b < P);
    reduce_once(a + b)
}

#[inline]
pub fn sub(a: u64, b: u64) -> u64 {
    debug_assert!(a < P && b < P);
    reduce_once(a + P - b)
}

#[inline]
pub fn neg(a: u64) -> u64 {
    debug_assert!(a < P);
    if a == 0 {
        0
    } else {
        P - a
    }
}

#[inline]
pub fn mul(a: u64, b: u64) -> u64 {
    debug_assert!(a < P && b < P);
    let wide = a as u128 * b as u128;
    let lo = (wide & P as u128) as u64;
    let hi = (wide >> 61) as u64;
    // hi < 2^61 because a, b < 2^61, so one fold plus reduce suffices.
    reduce_once(reduce64(hi) + lo)
}

pub fn pow(mut base: u64, mut exp: u64) -> u64 {
    let mut acc = 1u64;
    base %= P;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul(acc, base);
        }
        base = mul(base, base);
        exp >>= 1;
    }
    acc
}

/// Multiplicative inverse via Fermat; `a` must be nonzero.
pub fn inv(a: u64) -> u64 {
    debug_assert!(a != 0 && a < P);
    pow(a, P - 2)
}

/// Interpret a field element as a signed integer in (-p/2, p/2].
/// Sketch values in this crate are small signed deltas, so the centered
/// representative recovers them exactly.
pub fn to_signed(a: u64) -> i64 {
    debug_assert!(a < P);
    if a > P / 2 {
        -((P - a) as i64)
    } else {
        a as i64
    }
}

/// Embed a signed delta into the field.
pub fn from_signed(v: i64) -> u64 {
    if v >= 0 {
        (v as u64) % P
    } else {
        neg(((-(v as i128)) as u64) % P)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_identities() {
        assert_eq!(add(P - 1, 1), 0);
        assert_eq!(sub(0, 1), P - 1);
        assert_eq!(mul(P - 1, P - 1), 1); // (-1)^2
        assert_eq!(pow(3, P - 1), 1); // Fermat
        assert_eq!(to_signed(from_signed(-7)), -7);
        assert_eq!(to_signed(from_signed(12345)), 12345);
    }

    proptest! {
        #[test]
        fn inverse_is_exact(a in 1u64..P) {
            prop_assert_eq!(mul(a, inv(a)), 1);
        }

        #[test]
        fn mul_matches_u128(a in 0u64..P, b in 0u64..P) {
            let expect = ((a as u128 * b as u128) % P as u128) as u64;
            prop_assert_eq!(mul(a, b), expect);
        }

        #[test]
        fn signed_roundtrip(v in -(1i64 << 40)..(1i64 << 40)) {
            prop_assert_eq!(to_signed(from_signed(v)), v);
        }
    }
}
