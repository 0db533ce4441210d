//! k-wise independent hashing via degree-(k-1) polynomials over F_p.

use crate::field;

/// A k-wise independent hash family member: h(x) = sum c_i x^i mod p,
/// evaluated by Horner's rule. The coefficients are the seed material.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KWiseHash {
    coeffs: Vec<u64>,
}

impl KWiseHash {
    /// Build from exactly k field elements (the polynomial coefficients,
    /// constant term last in evaluation order).
    pub fn from_coeffs(coeffs: Vec<u64>) -> Self {
        assert!(!coeffs.is_empty());
        debug_assert!(coeffs.iter().all(|&c| c < field::P));
        Self { coeffs }
    }

    /// Draw k coefficients from a seed-bit consumer.
    pub fn from_material(material: &mut impl FnMut() -> u64, k: usize) -> Self {
        assert!(k >= 1);
        Self { coeffs: (0..k).map(|_| field::reduce64(material())).collect() }
    }

    pub fn k(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &[u64] {
        &self.coeffs
    }

    /// Evaluate at x, returning a field element.
    #[inline]
    pub fn eval(&self, x: u64) -> u64 {
        let x = field::reduce64(x);
        let mut acc = 0u64;
        for &c in &self.coeffs {
            acc = field::add(field::mul(acc, x), c);
        }
        acc
    }

    /// Evaluate and map into `0..range` (range ≤ 2^32 keeps the modular bias
    /// below 2^-29, far under anything the statistical tests can see).
    #[inline]
    pub fn eval_range(&self, x: u64, range: u64) -> u64 {
        debug_assert!(range > 0);
        self.eval(x) % range
    }
}

/// Pairwise-independent special case used pervasively inside sketches:
/// h(x) = a·x + b with a drawn nonzero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairwiseHash {
    pub a: u64,
    pub b: u64,
}

impl PairwiseHash {
    pub fn from_material(material: &mut impl FnMut() -> u64) -> Self {
        let mut a = field::reduce64(material());
        if a == 0 {
            a = 1;
        }
        let b = field::reduce64(material());
        Self { a, b }
    }

    #[inline]
    pub fn eval(&self, x: u64) -> u64 {
        field::add(field::mul(self.a, field::reduce64(x)), self.b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degree_one_matches_affine() {
        let h = KWiseHash::from_coeffs(vec![3, 11]);
        // 3x + 11
        assert_eq!(h.eval(0), 11);
        assert_eq!(h.eval(5), 26);
    }

    #[test]
    fn horner_matches_pow_sum() {
        let h = KWiseHash::from_coeffs(vec![7, 0, 2, 9]);
        let x = 12345u64;
        let direct = field::add(
            field::add(field::mul(7, field::pow(x, 3)), field::mul(2, x)),
            9,
        );
        assert_eq!(h.eval(x), direct);
    }

    #[test]
    fn identical_seeds_identical_hashes() {
        let mut c = 0u64;
        let mut gen = || {
            c = c.wrapping_add(0x9e37_79b9_7f4a_7c15);
            c
        };
        let h1 = KWiseHash::from_material(&mut gen, 4);
        let mut c2 = 0u64;
        let mut gen2 = || {
            c2 = c2.wrapping_add(0x9e37_79b9_7f4a_7c15);
            c2
        };
        let h2 = KWiseHash::from_material(&mut gen2, 4);
        assert_eq!(h1, h2);
        assert_eq!(h1.eval(42), h2.eval(42));
    }
}
