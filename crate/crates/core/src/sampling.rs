//! Cartesian sampling masks: equidistant acquisition patterns with an ACS block,
//! SSDU splits of the acquired set, and shifted equidistant patterns for the
//! cyclic-consistency baselines.

use std::ops::Range;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{invalid, Result};

/// A set of sampled k-space locations on an `n_pe × n_ro` grid (rows are the
/// phase-encode direction).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplingMask {
    n_pe: usize,
    n_ro: usize,
    sampled: Vec<bool>,
    acs_rows: Range<usize>,
    acceleration: usize,
    /// Phase offset of the equidistant lattice when the mask is a plain
    /// equidistant pattern; `None` for SSDU subsets.
    lattice_offset: Option<usize>,
}

impl SamplingMask {
    /// Builds a mask from explicit points. `acs_rows` must be fully sampled.
    pub fn from_points(
        n_pe: usize,
        n_ro: usize,
        sampled: Vec<bool>,
        acs_rows: Range<usize>,
        acceleration: usize,
    ) -> Result<Self> {
        if sampled.len() != n_pe * n_ro {
            return invalid(format!(
                "mask has {} entries, expected {}x{}",
                sampled.len(),
                n_pe,
                n_ro
            ));
        }
        if acs_rows.end > n_pe {
            return invalid("ACS block exceeds the grid");
        }
        for r in acs_rows.clone() {
            if !sampled[r * n_ro..(r + 1) * n_ro].iter().all(|&b| b) {
                return invalid(format!("ACS row {r} is not fully sampled"));
            }
        }
        Ok(Self {
            n_pe,
            n_ro,
            sampled,
            acs_rows,
            acceleration,
            lattice_offset: None,
        })
    }

    /// Every location sampled.
    pub fn full(n_pe: usize, n_ro: usize) -> Self {
        Self {
            n_pe,
            n_ro,
            sampled: vec![true; n_pe * n_ro],
            acs_rows: 0..0,
            acceleration: 1,
            lattice_offset: Some(0),
        }
    }

    pub fn empty(n_pe: usize, n_ro: usize) -> Self {
        Self {
            n_pe,
            n_ro,
            sampled: vec![false; n_pe * n_ro],
            acs_rows: 0..0,
            acceleration: 1,
            lattice_offset: None,
        }
    }

    pub fn n_pe(&self) -> usize {
        self.n_pe
    }

    pub fn n_ro(&self) -> usize {
        self.n_ro
    }

    pub fn acceleration(&self) -> usize {
        self.acceleration
    }

    pub fn acs_rows(&self) -> Range<usize> {
        self.acs_rows.clone()
    }

    pub fn lattice_offset(&self) -> Option<usize> {
        self.lattice_offset
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.sampled
    }

    pub fn is_sampled(&self, row: usize, col: usize) -> bool {
        self.sampled[row * self.n_ro + col]
    }

    pub fn count(&self) -> usize {
        self.sampled.iter().filter(|&&b| b).count()
    }

    pub fn is_acs(&self, row: usize) -> bool {
        self.acs_rows.contains(&row)
    }

    /// Rows containing at least one sampled point, ascending.
    pub fn sampled_rows(&self) -> Vec<usize> {
        (0..self.n_pe)
            .filter(|&r| self.sampled[r * self.n_ro..(r + 1) * self.n_ro].iter().any(|&b| b))
            .collect()
    }

    /// Flat indices of sampled points, row-major.
    pub fn indices(&self) -> Vec<usize> {
        self.sampled
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    /// Point-set union.
    pub fn union(&self, other: &SamplingMask) -> Result<SamplingMask> {
        self.check_grid(other)?;
        let sampled = self.sampled.iter().zip(&other.sampled).map(|(a, b)| *a || *b).collect();
        Ok(SamplingMask {
            n_pe: self.n_pe,
            n_ro: self.n_ro,
            sampled,
            acs_rows: self.acs_rows.clone(),
            acceleration: self.acceleration,
            lattice_offset: None,
        })
    }

    /// Number of points in both masks.
    pub fn intersection_count(&self, other: &SamplingMask) -> usize {
        self.sampled
            .iter()
            .zip(&other.sampled)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    pub fn same_points(&self, other: &SamplingMask) -> bool {
        self.n_pe == other.n_pe && self.n_ro == other.n_ro && self.sampled == other.sampled
    }

    fn check_grid(&self, other: &SamplingMask) -> Result<()> {
        if self.n_pe != other.n_pe || self.n_ro != other.n_ro {
            return invalid("masks are defined on different grids");
        }
        Ok(())
    }

    /// Rows of `0`/`1` characters, one line per phase-encode row.
    pub fn to_bitmap_text(&self) -> String {
        let mut s = String::with_capacity(self.n_pe * (self.n_ro + 1));
        for r in 0..self.n_pe {
            for c in 0..self.n_ro {
                s.push(if self.is_sampled(r, c) { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }

    pub fn descriptor(&self) -> MaskDescriptor {
        MaskDescriptor {
            n_pe: self.n_pe,
            n_ro: self.n_ro,
            acceleration: self.acceleration,
            acs_start: self.acs_rows.start,
            acs_len: self.acs_rows.len(),
            lattice_offset: self.lattice_offset,
            sampled_rows: self.sampled_rows(),
            n_sampled: self.count(),
        }
    }
}

/// JSON summary of a mask written next to the bitmap text.
#[derive(Clone, Debug, Serialize, PartialEq, Eq)]
pub struct MaskDescriptor {
    pub n_pe: usize,
    pub n_ro: usize,
    pub acceleration: usize,
    pub acs_start: usize,
    pub acs_len: usize,
    pub lattice_offset: Option<usize>,
    pub sampled_rows: Vec<usize>,
    pub n_sampled: usize,
}

fn acs_block(n_pe: usize, n_acs: usize) -> Range<usize> {
    let start = (n_pe - n_acs) / 2;
    start..start + n_acs
}

fn lattice_mask(n_pe: usize, n_ro: usize, r: usize, offset: usize, acs: Range<usize>) -> SamplingMask {
    let mut sampled = vec![false; n_pe * n_ro];
    let mut mark = |row: usize| sampled[row * n_ro..(row + 1) * n_ro].fill(true);
    let mut k = 0;
    while k * r < n_pe {
        mark((k * r + offset) % n_pe);
        k += 1;
    }
    for row in acs.clone() {
        mark(row);
    }
    SamplingMask {
        n_pe,
        n_ro,
        sampled,
        acs_rows: acs,
        acceleration: r,
        lattice_offset: Some(offset),
    }
}

/// Rows `{0, R, 2R, …}` plus `n_acs` central rows, each fully sampled along readout.
pub fn equidistant_mask(n_pe: usize, n_ro: usize, r: usize, n_acs: usize) -> Result<SamplingMask> {
    if n_ro == 0 || n_pe == 0 {
        return invalid("mask grid must be non-empty");
    }
    if r == 0 || r > n_pe {
        return invalid(format!("acceleration {r} must lie in 1..={n_pe}"));
    }
    if n_acs > n_pe {
        return invalid(format!("{n_acs} ACS rows exceed {n_pe} phase-encode rows"));
    }
    Ok(lattice_mask(n_pe, n_ro, r, 0, acs_block(n_pe, n_acs)))
}

/// One fidelity/loss partition of the acquired set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPair {
    pub theta: SamplingMask,
    pub lambda: SamplingMask,
}

/// `K` independent SSDU partitions of Ω.
#[derive(Clone, Debug, PartialEq)]
pub struct SsduSplit {
    pub rho: f64,
    pub pairs: Vec<SplitPair>,
}

impl SsduSplit {
    pub fn k(&self) -> usize {
        self.pairs.len()
    }
}

/// Size of each loss set: `round(ρ/(1+ρ)·|Ω|)`, so that `|Λ|/|Θ| ≈ ρ`.
pub fn lambda_size(rho: f64, omega_count: usize) -> usize {
    (rho / (1.0 + rho) * omega_count as f64).round() as usize
}

/// Draws `k` independent partitions of `omega` into Θ (fidelity, always holding
/// the ACS block) and Λ (held-out loss points, uniform over non-ACS points).
pub fn ssdu_split(omega: &SamplingMask, rho: f64, k: usize, seed: u64) -> Result<SsduSplit> {
    if !(rho > 0.0 && rho < 1.0) {
        return invalid(format!("rho must lie in (0, 1), got {rho}"));
    }
    if k == 0 {
        return invalid("at least one SSDU split is required");
    }
    let n_ro = omega.n_ro;
    let candidates: Vec<usize> = omega
        .indices()
        .into_iter()
        .filter(|&i| !omega.is_acs(i / n_ro))
        .collect();
    let n_lambda = lambda_size(rho, omega.count());
    if candidates.is_empty() {
        return invalid("the acquisition mask has no non-ACS points to hold out");
    }
    if n_lambda > candidates.len() {
        return invalid(format!(
            "requested |Λ|={n_lambda} exceeds the {} available non-ACS points",
            candidates.len()
        ));
    }
    if n_lambda == 0 {
        return invalid("rho too small: the loss set would be empty");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(k);
    for _ in 0..k {
        let mut lambda = vec![false; omega.sampled.len()];
        for j in sample(&mut rng, candidates.len(), n_lambda).into_iter() {
            lambda[candidates[j]] = true;
        }
        let theta: Vec<bool> = omega
            .sampled
            .iter()
            .zip(&lambda)
            .map(|(&o, &l)| o && !l)
            .collect();
        pairs.push(SplitPair {
            theta: SamplingMask {
                n_pe: omega.n_pe,
                n_ro,
                sampled: theta,
                acs_rows: omega.acs_rows.clone(),
                acceleration: omega.acceleration,
                lattice_offset: None,
            },
            lambda: SamplingMask {
                n_pe: omega.n_pe,
                n_ro,
                sampled: lambda,
                acs_rows: 0..0,
                acceleration: omega.acceleration,
                lattice_offset: None,
            },
        });
    }
    Ok(SsduSplit { rho, pairs })
}

/// Equidistant pattern shifted by `offset` rows (mod `n_pe`), ACS block unchanged.
pub fn shifted_pattern(omega: &SamplingMask, offset: usize) -> Result<SamplingMask> {
    let base = match omega.lattice_offset {
        Some(o) => o,
        None => return invalid("shifted patterns require an equidistant acquisition mask"),
    };
    Ok(lattice_mask(
        omega.n_pe,
        omega.n_ro,
        omega.acceleration,
        (base + offset) % omega.n_pe,
        omega.acs_rows.clone(),
    ))
}

/// `count` shifted copies of an equidistant Ω with distinct offsets drawn
/// without replacement from `1..R`.
pub fn shifted_patterns(omega: &SamplingMask, count: usize, seed: u64) -> Result<Vec<SamplingMask>> {
    let r = omega.acceleration;
    if count == 0 {
        return invalid("at least one shifted pattern is required");
    }
    if r < 2 || count > r - 1 {
        return invalid(format!("cannot draw {count} distinct shifts at acceleration {r}"));
    }
    let offsets = shift_offsets(r, count, seed);
    offsets.into_iter().map(|o| shifted_pattern(omega, o)).collect()
}

/// The seeded offsets used by [`shifted_patterns`].
pub fn shift_offsets(r: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample(&mut rng, r - 1, count).into_iter().map(|j| j + 1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equidistant_rows_without_acs() {
        let m = equidistant_mask(16, 8, 4, 0).unwrap();
        assert_eq!(m.sampled_rows(), vec![0, 4, 8, 12]);
        assert_eq!(m.count(), 4 * 8);
    }

    #[test]
    fn unit_acceleration_is_full() {
        let m = equidistant_mask(16, 8, 1, 0).unwrap();
        assert_eq!(m.sampled_rows(), (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn equidistant_rows_with_acs() {
        let m = equidistant_mask(16, 8, 4, 4).unwrap();
        assert_eq!(m.sampled_rows(), vec![0, 4, 6, 7, 8, 9, 12]);
        assert_eq!(m.acs_rows(), 6..10);
    }

    #[test]
    fn equidistant_rejects_bad_arguments() {
        assert!(equidistant_mask(16, 8, 0, 0).is_err());
        assert!(equidistant_mask(16, 8, 17, 0).is_err());
        assert!(equidistant_mask(16, 8, 4, 17).is_err());
    }

    #[test]
    fn cardinality_is_ceil_of_rows_over_r() {
        for n_pe in [15, 16, 17, 64] {
            for r in 1..=8 {
                let m = equidistant_mask(n_pe, 4, r, 0).unwrap();
                assert_eq!(m.sampled_rows().len(), n_pe.div_ceil(r), "n_pe={n_pe} r={r}");
            }
        }
    }

    #[test]
    fn lambda_size_arithmetic() {
        assert_eq!(lambda_size(0.4, 700), 200);
    }

    #[test]
    fn split_of_700_points() {
        // 100 rows x 7 cols with a 20-row ACS block: |Ω| = 700, 560 non-ACS points.
        let n_ro = 7;
        let mut sampled = vec![false; 200 * n_ro];
        let mut rows: Vec<usize> = (0..200).step_by(2).filter(|r| !(90..110).contains(r)).collect();
        rows.truncate(80);
        rows.extend(90..110);
        for r in &rows {
            sampled[r * n_ro..(r + 1) * n_ro].fill(true);
        }
        let omega = SamplingMask::from_points(200, n_ro, sampled, 90..110, 2).unwrap();
        assert_eq!(omega.count(), 700);
        let split = ssdu_split(&omega, 0.4, 3, 11).unwrap();
        for p in &split.pairs {
            assert_eq!(p.lambda.count(), 200);
            assert_eq!(p.theta.count(), 500);
        }
    }

    #[test]
    fn split_rejects_oversized_lambda() {
        // Only the ACS block is off-lattice; with R=2 on 8 rows and 6 ACS rows,
        // non-ACS points are scarce.
        let omega = equidistant_mask(8, 4, 4, 6).unwrap();
        let err = ssdu_split(&omega, 0.9, 1, 0).unwrap_err();
        assert!(err.to_string().contains("exceeds"), "{err}");
    }

    #[test]
    fn split_partitions_omega_and_keeps_acs() {
        let omega = equidistant_mask(64, 64, 4, 8).unwrap();
        let split = ssdu_split(&omega, 0.4, 3, 5).unwrap();
        for p in &split.pairs {
            assert_eq!(p.theta.intersection_count(&p.lambda), 0);
            assert!(p.theta.union(&p.lambda).unwrap().same_points(&omega));
            for r in omega.acs_rows() {
                for c in 0..64 {
                    assert!(p.theta.is_sampled(r, c));
                }
            }
            let ratio = p.lambda.count() as f64 / p.theta.count() as f64;
            assert!((ratio - 0.4).abs() <= 0.05 * 0.4, "ratio {ratio}");
        }
        assert_ne!(split.pairs[0].lambda, split.pairs[1].lambda);
    }

    #[test]
    fn split_is_seed_deterministic() {
        let omega = equidistant_mask(64, 64, 4, 8).unwrap();
        assert_eq!(ssdu_split(&omega, 0.4, 3, 9).unwrap(), ssdu_split(&omega, 0.4, 3, 9).unwrap());
    }

    #[test]
    fn shift_by_one() {
        let omega = equidistant_mask(16, 8, 4, 0).unwrap();
        let d = shifted_pattern(&omega, 1).unwrap();
        assert_eq!(d.sampled_rows(), vec![1, 5, 9, 13]);
        assert_eq!(d.count(), omega.count());
        assert_eq!(d.acceleration(), 4);
    }

    #[test]
    fn shift_keeps_acs() {
        let omega = equidistant_mask(16, 8, 4, 4).unwrap();
        let d = shifted_pattern(&omega, 2).unwrap();
        assert_eq!(d.sampled_rows(), vec![2, 6, 7, 8, 9, 10, 14]);
        assert_eq!(d.acs_rows(), 6..10);
    }

    #[test]
    fn shifted_patterns_use_distinct_offsets() {
        let omega = equidistant_mask(64, 16, 4, 8).unwrap();
        let ds = shifted_patterns(&omega, 3, 2).unwrap();
        let mut offsets: Vec<_> = ds.iter().map(|d| d.lattice_offset().unwrap()).collect();
        offsets.sort();
        assert_eq!(offsets, vec![1, 2, 3]);
        assert!(shifted_patterns(&omega, 4, 2).is_err());
    }

    #[test]
    fn bitmap_text_layout() {
        let m = equidistant_mask(4, 3, 2, 0).unwrap();
        assert_eq!(m.to_bitmap_text(), "111\n000\n111\n000\n");
    }
}
