//! Local rotation: a global Hadamard rotation of dimension `n` approximated
//! by an upper and a lower segment rotation, each of size `m·2^k` with
//! `k` bounded by a depth cap, whose ranges together cover `[0, n)`.
//!
//! A segment rotation reshapes its slice into an `m × 2^k` array (element
//! `r·2^k + c` sits at row `r`, column `c`), runs the FWHT along every row,
//! then the order-`m` add/subtract product along every column, and scales by
//! `1/√(m·2^k)`. That is `(H_m ⊗ H_{2^k}) / √size` under the row-major index
//! convention, so every stage is orthonormal.

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hadamard::{self, HadamardError, HadamardLibrary, HadamardMatrix};

pub const DEFAULT_DEPTH_CAP: u32 = 6;

/// Orders searched when a config does not name any.
pub const DEFAULT_ORDERS: [usize; 4] = [1, 12, 20, 28];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RotationError {
    #[error("no (m, k) decomposition covers n = {n} with depth cap {depth_cap} and orders {orders:?}")]
    Infeasible {
        n: usize,
        depth_cap: u32,
        orders: Vec<usize>,
    },
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("invalid rotation plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Hadamard(#[from] HadamardError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RotationSegment {
    pub offset: usize,
    /// Order of the non-power-of-two Hadamard factor.
    pub m: usize,
    /// FWHT depth; the power-of-two factor is `2^k`.
    pub k: u32,
}

impl RotationSegment {
    pub fn size(&self) -> usize {
        self.m << self.k
    }

    pub fn end(&self) -> usize {
        self.offset + self.size()
    }

    /// Add/subtract count per rotated vector: `size · (k + m)`.
    pub fn arithmetic_cost(&self) -> usize {
        self.size() * (self.k as usize + self.m)
    }
}

/// Two-stage rotation plan. `lower == upper` encodes a single segment that
/// spans `n` exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotationPlan {
    pub n: usize,
    pub depth_cap: u32,
    pub upper: RotationSegment,
    pub lower: RotationSegment,
}

impl RotationPlan {
    pub fn single(n: usize, m: usize, k: u32, depth_cap: u32) -> Result<Self, RotationError> {
        let seg = RotationSegment { offset: 0, m, k };
        let plan = Self {
            n,
            depth_cap,
            upper: seg,
            lower: seg,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn is_single(&self) -> bool {
        self.upper == self.lower
    }

    pub fn overlap(&self) -> usize {
        if self.is_single() {
            0
        } else {
            self.upper.end().saturating_sub(self.lower.offset)
        }
    }

    pub fn segment_count(&self) -> usize {
        if self.is_single() {
            1
        } else {
            2
        }
    }

    pub fn arithmetic_cost(&self) -> usize {
        self.segments().map(|s| s.arithmetic_cost()).sum()
    }

    /// Segments in stage order (upper first).
    pub fn segments(&self) -> impl Iterator<Item = RotationSegment> + '_ {
        std::iter::once(self.upper).chain((!self.is_single()).then_some(self.lower))
    }

    /// Structural checks: anchoring, coverage, and the depth cap.
    pub fn validate(&self) -> Result<(), RotationError> {
        let bad = |msg: String| Err(RotationError::InvalidPlan(msg));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        for seg in [self.upper, self.lower] {
            if seg.m == 0 {
                return bad("segment order m must be positive".into());
            }
            if seg.k > self.depth_cap {
                return bad(format!("segment depth {} exceeds cap {}", seg.k, self.depth_cap));
            }
            if seg.end() > self.n {
                return bad(format!("segment [{}, {}) exceeds n = {}", seg.offset, seg.end(), self.n));
            }
        }
        if self.upper.offset != 0 {
            return bad("upper segment must start at 0".into());
        }
        if self.lower.end() != self.n {
            return bad("lower segment must end at n".into());
        }
        if self.lower.offset > self.upper.end() {
            return bad(format!(
                "gap between {} and {} is not covered",
                self.upper.end(),
                self.lower.offset
            ));
        }
        Ok(())
    }

    fn search_key(&self) -> (usize, usize, usize, usize, u32, usize, u32) {
        (
            self.overlap(),
            self.segment_count(),
            self.arithmetic_cost(),
            self.upper.m,
            self.upper.k,
            self.lower.m,
            self.lower.k,
        )
    }

    /// Plain-text record used in configs and reports.
    pub fn to_record(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }

    pub fn from_record(text: &str) -> Result<Self, RotationError> {
        let plan: Self =
            toml::from_str(text).map_err(|e| RotationError::InvalidPlan(e.message().to_string()))?;
        plan.validate()?;
        Ok(plan)
    }
}

/// Picks the covering plan with the smallest overlap, preferring a single
/// segment, then the lowest arithmetic cost, then the lexicographically
/// smallest `(upper.m, upper.k, lower.m, lower.k)`.
pub fn search_plan(
    n: usize,
    depth_cap: u32,
    orders: &BTreeSet<usize>,
) -> Result<RotationPlan, RotationError> {
    let infeasible = || RotationError::Infeasible {
        n,
        depth_cap,
        orders: orders.iter().copied().collect(),
    };
    if n == 0 {
        return Err(infeasible());
    }
    let candidates: Vec<(usize, u32)> = orders
        .iter()
        .filter(|&&m| m > 0)
        .flat_map(|&m| (0..=depth_cap).map(move |k| (m, k)))
        .filter(|&(m, k)| m.checked_shl(k).is_some_and(|s| s <= n && s >> k == m))
        .collect();

    let mut best: Option<RotationPlan> = None;
    let mut consider = |plan: RotationPlan| {
        if best.is_none_or(|b| plan.search_key() < b.search_key()) {
            best = Some(plan);
        }
    };
    for &(m1, k1) in &candidates {
        let s1 = m1 << k1;
        if s1 == n {
            let seg = RotationSegment { offset: 0, m: m1, k: k1 };
            consider(RotationPlan {
                n,
                depth_cap,
                upper: seg,
                lower: seg,
            });
        }
        for &(m2, k2) in &candidates {
            let s2 = m2 << k2;
            if s1 + s2 < n || s1 == n || s2 == n {
                continue;
            }
            consider(RotationPlan {
                n,
                depth_cap,
                upper: RotationSegment { offset: 0, m: m1, k: k1 },
                lower: RotationSegment {
                    offset: n - s2,
                    m: m2,
                    k: k2,
                },
            });
        }
    }
    best.ok_or_else(infeasible)
}

/// Applies one orthonormal segment rotation to `x` (length `seg.size()`).
pub fn segment_rotation_apply(
    x: &[f64],
    seg: &RotationSegment,
    h_m: &HadamardMatrix,
) -> Result<Vec<f64>, RotationError> {
    let mut out = x.to_vec();
    rotate_segment_in_place(&mut out, seg, h_m)?;
    Ok(out)
}

fn rotate_segment_in_place(
    x: &mut [f64],
    seg: &RotationSegment,
    h_m: &HadamardMatrix,
) -> Result<(), RotationError> {
    if x.len() != seg.size() {
        return Err(RotationError::Shape {
            expected: seg.size(),
            got: x.len(),
        });
    }
    if h_m.order() != seg.m {
        return Err(RotationError::Shape {
            expected: seg.m,
            got: h_m.order(),
        });
    }
    let width = 1usize << seg.k;
    for row in x.chunks_exact_mut(width) {
        hadamard::fwht_in_place(row)?;
    }
    if seg.m > 1 {
        let mut column = vec![0.0; seg.m];
        for c in 0..width {
            for (r, v) in column.iter_mut().enumerate() {
                *v = x[r * width + c];
            }
            let mixed = hadamard::apply_npt(&column, h_m)?;
            for (r, v) in mixed.into_iter().enumerate() {
                x[r * width + c] = v;
            }
        }
    }
    let scale = 1.0 / (seg.size() as f64).sqrt();
    x.iter_mut().for_each(|v| *v *= scale);
    Ok(())
}

/// A plan with its Hadamard factors resolved.
#[derive(Debug, Clone)]
pub struct LocalRotation {
    plan: RotationPlan,
    upper_h: HadamardMatrix,
    lower_h: HadamardMatrix,
}

impl LocalRotation {
    pub fn new(plan: RotationPlan, library: &HadamardLibrary) -> Result<Self, RotationError> {
        plan.validate()?;
        Ok(Self {
            upper_h: library.get(plan.upper.m)?,
            lower_h: library.get(plan.lower.m)?,
            plan,
        })
    }

    pub fn plan(&self) -> &RotationPlan {
        &self.plan
    }

    pub fn rotate_in_place(&self, x: &mut [f64]) -> Result<(), RotationError> {
        if x.len() != self.plan.n {
            return Err(RotationError::Shape {
                expected: self.plan.n,
                got: x.len(),
            });
        }
        let up = self.plan.upper;
        rotate_segment_in_place(&mut x[up.offset..up.end()], &up, &self.upper_h)?;
        if !self.plan.is_single() {
            let lo = self.plan.lower;
            rotate_segment_in_place(&mut x[lo.offset..lo.end()], &lo, &self.lower_h)?;
        }
        Ok(())
    }

    /// Two-stage rotation of an activation row.
    pub fn rotate_activation(&self, x: &[f64]) -> Result<Vec<f64>, RotationError> {
        let mut out = x.to_vec();
        self.rotate_in_place(&mut out)?;
        Ok(out)
    }

    /// Folds the rotation into an `n × d` weight so that
    /// `rotate_activation(x) · fold_weights(W) = x · W`. Each column of `W`
    /// goes through the same two stages as an activation.
    pub fn fold_weights(&self, w: &Array2<f64>) -> Result<Array2<f64>, RotationError> {
        if w.nrows() != self.plan.n {
            return Err(RotationError::Shape {
                expected: self.plan.n,
                got: w.nrows(),
            });
        }
        let mut out = w.clone();
        let mut column = vec![0.0; self.plan.n];
        for mut col in out.columns_mut() {
            for (dst, src) in column.iter_mut().zip(col.iter()) {
                *dst = *src;
            }
            self.rotate_in_place(&mut column)?;
            for (dst, src) in col.iter_mut().zip(&column) {
                *dst = *src;
            }
        }
        Ok(out)
    }
}

/// `max|x| / rms(x)`; 0 for the zero vector.
pub fn peak_to_rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if rms == 0.0 {
        0.0
    } else {
        peak / rms
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hadamard::{construct_npt, construct_sylvester};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn orders(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    /// Exhaustive oracle: every (offset-anchored) pair and every exact
    /// single segment, ranked by the documented key.
    fn brute_force(n: usize, cap: u32, ord: &BTreeSet<usize>) -> Option<(usize, usize, usize, Vec<(usize, u32)>)> {
        let mut best: Option<(usize, usize, usize, Vec<(usize, u32)>)> = None;
        let segs: Vec<(usize, u32)> = ord
            .iter()
            .flat_map(|&m| (0..=cap).map(move |k| (m, k)))
            .collect();
        for &(m1, k1) in &segs {
            for &(m2, k2) in &segs {
                let (s1, s2) = (m1 << k1, m2 << k2);
                let key = if s1 == n && (m1, k1) == (m2, k2) {
                    (0, 1, s1 * (k1 as usize + m1), vec![(m1, k1), (m1, k1)])
                } else if s1 < n && s2 < n && s1 + s2 >= n {
                    (
                        s1 + s2 - n,
                        2,
                        s1 * (k1 as usize + m1) + s2 * (k2 as usize + m2),
                        vec![(m1, k1), (m2, k2)],
                    )
                } else {
                    continue;
                };
                if best.as_ref().is_none_or(|b| key < *b) {
                    best = Some(key);
                }
            }
        }
        best
    }

    #[test]
    fn search_examples() {
        let p = search_plan(768, 6, &orders(&[1, 12])).unwrap();
        assert!(p.is_single());
        assert_eq!((p.upper.m, p.upper.k), (12, 6));

        let p = search_plan(64, 6, &orders(&[1])).unwrap();
        assert!(p.is_single());
        assert_eq!((p.upper.m, p.upper.k), (1, 6));

        let p = search_plan(14336, 6, &orders(&[1, 12, 20, 28, 112])).unwrap();
        assert!(!p.is_single());
        assert_eq!(p.overlap(), 0);
        assert_eq!((p.upper.m, p.upper.k, p.upper.size()), (112, 6, 7168));
        assert_eq!((p.lower.m, p.lower.k, p.lower.offset), (112, 6, 7168));

        assert!(matches!(
            search_plan(10, 6, &orders(&[12])),
            Err(RotationError::Infeasible { n: 10, .. })
        ));
    }

    #[test]
    fn search_agrees_with_exhaustive_oracle() {
        let ord = orders(&DEFAULT_ORDERS);
        for n in (1..=4096).chain([14336]) {
            let got = search_plan(n, 6, &ord);
            match brute_force(n, 6, &ord) {
                None => assert!(got.is_err(), "n={n}"),
                Some((overlap, count, cost, segs)) => {
                    let p = got.unwrap();
                    p.validate().unwrap();
                    assert_eq!(p.overlap(), overlap, "n={n}");
                    assert_eq!(p.segment_count(), count, "n={n}");
                    assert_eq!(p.arithmetic_cost(), cost, "n={n}");
                    assert_eq!((p.upper.m, p.upper.k), segs[0], "n={n}");
                    assert_eq!((p.lower.m, p.lower.k), segs[1], "n={n}");
                }
            }
        }
    }

    #[test]
    fn validate_rejects_gaps_and_depth() {
        let mut p = RotationPlan::single(64, 1, 6, 6).unwrap();
        p.depth_cap = 5;
        assert!(p.validate().is_err());
        let gap = RotationPlan {
            n: 100,
            depth_cap: 6,
            upper: RotationSegment { offset: 0, m: 12, k: 2 },
            lower: RotationSegment { offset: 52, m: 12, k: 2 },
        };
        assert!(gap.validate().is_err());
    }

    #[test]
    fn record_round_trip() {
        let p = search_plan(1000, 6, &orders(&DEFAULT_ORDERS)).unwrap();
        assert_eq!(RotationPlan::from_record(&p.to_record()).unwrap(), p);
    }

    #[test]
    fn segment_examples() {
        let h1 = construct_npt(1).unwrap();
        let seg = RotationSegment { offset: 0, m: 1, k: 2 };
        assert_eq!(
            segment_rotation_apply(&[1.0, 0.0, 0.0, 0.0], &seg, &h1).unwrap(),
            vec![0.5; 4]
        );

        let h12 = construct_npt(12).unwrap();
        let seg = RotationSegment { offset: 0, m: 12, k: 0 };
        let col: Vec<f64> = h12.row(0).iter().map(|&v| v as f64).collect();
        let y = segment_rotation_apply(&col, &seg, &h12).unwrap();
        assert!((y[0] - 12f64.sqrt()).abs() < 1e-12);
        assert!(y[1..].iter().all(|v| v.abs() < 1e-12));

        assert!(matches!(
            segment_rotation_apply(&[1.0; 5], &seg, &h12),
            Err(RotationError::Shape { expected: 12, got: 5 })
        ));
    }

    #[test]
    fn segment_matches_dense_kronecker() {
        let h12 = construct_npt(12).unwrap();
        let dense = h12.kron(&construct_sylvester(3).unwrap());
        let seg = RotationSegment { offset: 0, m: 12, k: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..96).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = segment_rotation_apply(&x, &seg, &h12).unwrap();
        let norm = 96f64.sqrt();
        for r in 0..96 {
            let want: f64 = dense.row(r).iter().zip(&x).map(|(&s, v)| s as f64 * v).sum::<f64>() / norm;
            assert!((got[r] - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn outlier_is_spread_by_rotation() {
        let plan = RotationPlan::single(448, 28, 4, 6).unwrap();
        let rot = LocalRotation::new(plan, &HadamardLibrary::new()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let normal = rand_distr_normal(&mut rng, 448);
        let mut x = normal;
        x[0] += 100.0;
        let before = peak_to_rms(&x);
        let after = peak_to_rms(&rot.rotate_activation(&x).unwrap());
        // Frozen from this seed: before ≈ 20.7, after ≈ 1.6.
        assert!(before / after >= 5.0, "before {before}, after {after}");
        assert!(rot.rotate_activation(&[0.0; 448]).unwrap().iter().all(|&v| v == 0.0));
    }

    fn rand_distr_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| crate::rng::standard_normal(rng)).collect()
    }

    #[test]
    fn identity_plan_leaves_weights_unchanged() {
        let plan = RotationPlan::single(1, 1, 0, 6).unwrap();
        let rot = LocalRotation::new(plan, &HadamardLibrary::new()).unwrap();
        let w = Array2::from_shape_vec((1, 3), vec![1.0, -2.0, 3.5]).unwrap();
        assert_eq!(rot.fold_weights(&w).unwrap(), w);
    }

    #[test]
    fn fold_preserves_gemm_and_column_norms() {
        let plan = search_plan(448, 6, &orders(&DEFAULT_ORDERS)).unwrap();
        let rot = LocalRotation::new(plan, &HadamardLibrary::new()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..448).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Array2::from_shape_fn((448, 32), |_| rng.random_range(-1.0..1.0));
        let xr = rot.rotate_activation(&x).unwrap();
        let wr = rot.fold_weights(&w).unwrap();
        let exact: Vec<f64> = w.columns().into_iter().map(|c| c.iter().zip(&x).map(|(a, b)| a * b).sum()).collect();
        let got: Vec<f64> = wr.columns().into_iter().map(|c| c.iter().zip(&xr).map(|(a, b)| a * b).sum()).collect();
        let num: f64 = exact.iter().zip(&got).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = exact.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(num / den <= 1e-10);
        for (a, b) in w.columns().into_iter().zip(wr.columns()) {
            let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((na - nb).abs() <= 1e-12 * na);
        }
    }
}
