//! Centred differences on periodic coarse-grid sequences.
//!
//! The macroscale models are written in terms of the operators `δ²`, `δ⁴`
//! and `μδ` acting across the element index `j`. All three wrap around the
//! ring of `m` elements.

use std::ops::{Deref, Index};

use crate::error::{config, Result};

/// Values indexed by element on a periodic ring, `s[j + m] == s[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSeq(Vec<f64>);

impl GridSeq {
    /// Smallest ring on which `δ⁴` still has a consistent wrap.
    pub const MIN_LEN: usize = 3;

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < Self::MIN_LEN {
            return config(format!(
                "grid sequence needs at least {} elements, got {}",
                Self::MIN_LEN,
                values.len()
            ));
        }
        Ok(Self(values))
    }

    pub fn constant(m: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; m])
    }

    pub fn from_fn(m: usize, f: impl FnMut(usize) -> f64) -> Result<Self> {
        Self::new((0..m).map(f).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Periodic access with any signed offset.
    pub fn wrap(&self, j: isize) -> f64 {
        let m = self.0.len() as isize;
        self.0[j.rem_euclid(m) as usize]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn delta2(&self) -> GridSeq {
        GridSeq(delta2(&self.0))
    }

    pub fn delta4(&self) -> GridSeq {
        GridSeq(delta4(&self.0))
    }

    pub fn mudelta(&self) -> GridSeq {
        GridSeq(mudelta(&self.0))
    }

    /// Cyclic shift: `out[j] = s[j + by]`.
    pub fn shifted(&self, by: isize) -> GridSeq {
        GridSeq((0..self.len() as isize).map(|j| self.wrap(j + by)).collect())
    }
}

impl Deref for GridSeq {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl Index<usize> for GridSeq {
    type Output = f64;
    fn index(&self, j: usize) -> &f64 {
        &self.0[j]
    }
}

#[inline]
fn nb(n: usize, j: usize, off: isize) -> usize {
    (j as isize + off).rem_euclid(n as isize) as usize
}

/// `out[j] = s[j+1] − 2 s[j] + s[j−1]` on the ring.
pub fn delta2(s: &[f64]) -> Vec<f64> {
    let n = s.len();
    (0..n)
        .map(|j| s[nb(n, j, 1)] - 2.0 * s[j] + s[nb(n, j, -1)])
        .collect()
}

/// Fused centred first difference `out[j] = ½(s[j+1] − s[j−1])`.
pub fn mudelta(s: &[f64]) -> Vec<f64> {
    let n = s.len();
    (0..n)
        .map(|j| 0.5 * (s[nb(n, j, 1)] - s[nb(n, j, -1)]))
        .collect()
}

/// `δ²δ²`, the five-point stencil `(1, −4, 6, −4, 1)`.
pub fn delta4(s: &[f64]) -> Vec<f64> {
    delta2(&delta2(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn seq(v: &[f64]) -> GridSeq {
        GridSeq::new(v.to_vec()).unwrap()
    }

    #[test]
    fn rejects_short_rings() {
        assert!(GridSeq::new(vec![1.0, 2.0]).is_err());
        assert!(GridSeq::new(vec![1.0, 2.0, 3.0]).is_ok());
    }

    #[test]
    fn constants_are_annihilated() {
        let c = GridSeq::constant(7, 2.5).unwrap();
        for op in [c.delta2(), c.delta4(), c.mudelta()] {
            assert!(op.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn impulse_responses() {
        let s = seq(&[0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(s.delta2().as_slice(), &[0.0, 1.0, -2.0, 1.0, 0.0]);
        assert_eq!(s.mudelta().as_slice(), &[0.0, 0.5, 0.0, -0.5, 0.0]);
        let s = seq(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(
            s.delta4().as_slice(),
            &[0.0, 1.0, -4.0, 6.0, -4.0, 1.0, 0.0]
        );
    }

    #[test]
    fn delta4_on_smallest_ring() {
        // m = 3: every neighbour offset folds back onto the ring
        let s = seq(&[1.0, 0.0, 0.0]);
        let d4 = s.delta4();
        let manual: Vec<f64> = (0..3)
            .map(|j| {
                let j = j as isize;
                s.wrap(j + 2) - 4.0 * s.wrap(j + 1) + 6.0 * s.wrap(j) - 4.0 * s.wrap(j - 1)
                    + s.wrap(j - 2)
            })
            .collect();
        assert_eq!(d4.as_slice(), manual.as_slice());
    }

    #[test]
    fn mudelta_of_linear_ramp_in_interior() {
        let s = GridSeq::from_fn(64, |j| j as f64).unwrap();
        assert_eq!(s.mudelta()[32], 1.0);
    }

    #[test]
    fn fourier_eigenvalues() {
        let m = 16;
        let s = GridSeq::from_fn(m, |j| (2.0 * PI * j as f64 / m as f64).sin()).unwrap();
        let lam = -4.0 * (PI / m as f64).sin().powi(2);
        let d2 = s.delta2();
        let d4 = s.delta4();
        for j in 0..m {
            assert_abs_diff_eq!(d2[j], lam * s[j], epsilon = 1e-14);
            assert_abs_diff_eq!(d4[j], lam * lam * s[j], epsilon = 1e-14);
        }
        let c = GridSeq::from_fn(m, |j| (2.0 * PI * j as f64 / m as f64).cos()).unwrap();
        let md = c.mudelta();
        for j in 0..m {
            let expect = -(2.0 * PI / m as f64).sin() * (2.0 * PI * j as f64 / m as f64).sin();
            assert_abs_diff_eq!(md[j], expect, epsilon = 1e-14);
        }
    }

    #[test]
    fn shift_wraps() {
        let s = seq(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.shifted(1).as_slice(), &[2.0, 3.0, 4.0, 1.0]);
        assert_eq!(s.shifted(-1).as_slice(), &[4.0, 1.0, 2.0, 3.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn ring() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-10.0f64..10.0, 3..24)
        }

        proptest! {
            #[test]
            fn telescoping_sums(v in ring()) {
                let s = GridSeq::new(v).unwrap();
                let scale: f64 = s.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
                prop_assert!(s.delta2().iter().sum::<f64>().abs() <= 1e-12 * scale);
                prop_assert!(s.mudelta().iter().sum::<f64>().abs() <= 1e-12 * scale);
            }

            #[test]
            fn linear_and_shift_equivariant(v in ring(), a in -3.0f64..3.0, shift in -5isize..5) {
                let w: Vec<f64> = v.iter().map(|x| (x * 1.7).sin()).collect();
                let s = GridSeq::new(v.clone()).unwrap();
                let t = GridSeq::new(w.clone()).unwrap();
                let comb = GridSeq::new(v.iter().zip(&w).map(|(x, y)| a * x + y).collect()).unwrap();
                type Op = fn(&GridSeq) -> GridSeq;
                let ops: [Op; 3] = [GridSeq::delta2, GridSeq::delta4, GridSeq::mudelta];
                for op in ops {
                    let lhs = op(&comb);
                    let (os, ot) = (op(&s), op(&t));
                    for j in 0..s.len() {
                        prop_assert!((lhs[j] - (a * os[j] + ot[j])).abs() < 1e-10);
                    }
                    let a1 = op(&s.shifted(shift));
                    let a2 = op(&s).shifted(shift);
                    prop_assert_eq!(a1, a2);
                }
            }
        }
    }
}
