//! Cross-scale patch matching and feature transfer.
//!
//! Queries are patches on a grid with the configured stride over the
//! query map; candidates are all patches of the reference map (stride 1).
//! Similarity is the cosine of vectorized patches, and a patch with zero
//! norm scores 0 against everything.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Error, Result};
use crate::features::{FeatureMap, FeaturePyramid};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub patch_size: usize,
    pub stride: usize,
    /// Upper bound on reference candidates; when exceeded, an evenly spaced
    /// row-major subset is searched.
    pub ref_cap: Option<usize>,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { patch_size: 3, stride: 1, ref_cap: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchMap {
    pub patch_size: usize,
    pub stride: usize,
    /// Pyramid level the match was computed at.
    pub level: usize,
    /// Spatial dims of the query map.
    pub query_dims: (usize, usize),
    /// Spatial dims of the reference map.
    pub ref_dims: (usize, usize),
    /// Rows and columns of the query patch grid.
    pub grid: (usize, usize),
    /// Top-left reference coordinate of the best patch, per query patch in row-major order.
    pub best_index: Vec<(usize, usize)>,
    pub best_score: Vec<f64>,
}

impl MatchMap {
    /// Top-left query-map coordinate of query patch `q`.
    pub fn query_origin(&self, q: usize) -> (usize, usize) {
        (q / self.grid.1 * self.stride, q % self.grid.1 * self.stride)
    }

    /// Reference patch grid dims (positions a patch can start at).
    pub fn ref_grid(&self) -> (usize, usize) {
        (self.ref_dims.0 + 1 - self.patch_size, self.ref_dims.1 + 1 - self.patch_size)
    }

    pub fn len(&self) -> usize {
        self.best_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.best_index.is_empty()
    }
}

/// ℓ2-normalized vectorized patches at the given top-left coordinates, one row each.
fn patch_matrix(map: &FeatureMap, p: usize, origins: &[(usize, usize)]) -> Vec<f64> {
    let c = map.channels();
    let dim = p * p * c;
    let mut out = vec![0.0; origins.len() * dim];
    out.par_chunks_mut(dim).zip(origins.par_iter()).for_each(|(row, &(y, x))| {
        for dy in 0..p {
            for dx in 0..p {
                let dst = (dy * p + dx) * c;
                row[dst..dst + c].copy_from_slice(map.pixel(y + dy, x + dx));
            }
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    });
    out
}

const QUERY_BLOCK: usize = 64;

pub fn match_features(query: &FeatureMap, reference: &FeatureMap, patch_size: usize, stride: usize) -> Result<MatchMap> {
    match_features_with(query, reference, &MatchConfig { patch_size, stride, ref_cap: None }, 0)
}

/// Exhaustive cosine matching, recording `level` in the result.
pub fn match_features_with(
    query: &FeatureMap,
    reference: &FeatureMap,
    cfg: &MatchConfig,
    level: usize,
) -> Result<MatchMap> {
    let p = cfg.patch_size;
    if p == 0 || cfg.stride == 0 {
        bail_arg!("patch size and stride must be positive");
    }
    if query.channels() != reference.channels() {
        bail_arg!("query has {} channels but reference has {}", query.channels(), reference.channels());
    }
    for (name, m) in [("query", query), ("reference", reference)] {
        if m.height() < p || m.width() < p {
            bail_arg!("{name} map {}x{} is smaller than the {p}x{p} patch", m.height(), m.width());
        }
    }
    let grid = ((query.height() - p) / cfg.stride + 1, (query.width() - p) / cfg.stride + 1);
    let q_origins: Vec<(usize, usize)> =
        (0..grid.0).flat_map(|i| (0..grid.1).map(move |j| (i * cfg.stride, j * cfg.stride))).collect();
    let (rh, rw) = (reference.height() + 1 - p, reference.width() + 1 - p);
    let mut r_origins: Vec<(usize, usize)> = (0..rh).flat_map(|y| (0..rw).map(move |x| (y, x))).collect();
    if let Some(cap) = cfg.ref_cap {
        if cap == 0 {
            bail_arg!("reference candidate cap must be positive");
        }
        if r_origins.len() > cap {
            let n = r_origins.len();
            r_origins = (0..cap).map(|i| r_origins[i * n / cap]).collect();
        }
    }

    let dim = p * p * query.channels();
    let qm = patch_matrix(query, p, &q_origins);
    let rm = patch_matrix(reference, p, &r_origins);
    let nr = r_origins.len();

    let best: Vec<(usize, f64)> = qm
        .par_chunks(QUERY_BLOCK * dim)
        .flat_map_iter(|block| {
            let bq = block.len() / dim;
            let mut scores = vec![0.0; bq * nr];
            // SAFETY: slice lengths match the dims and strides passed.
            unsafe {
                matrixmultiply::dgemm(
                    bq,
                    dim,
                    nr,
                    1.0,
                    block.as_ptr(),
                    dim as isize,
                    1,
                    rm.as_ptr(),
                    1,
                    dim as isize,
                    0.0,
                    scores.as_mut_ptr(),
                    nr as isize,
                    1,
                );
            }
            scores
                .chunks(nr)
                .map(|row| {
                    let mut arg = 0;
                    let mut top = row[0];
                    for (j, &s) in row.iter().enumerate().skip(1) {
                        if s > top {
                            top = s;
                            arg = j;
                        }
                    }
                    (arg, top.clamp(-1.0, 1.0))
                })
                .collect::<Vec<_>>()
        })
        .collect();

    Ok(MatchMap {
        patch_size: p,
        stride: cfg.stride,
        level,
        query_dims: (query.height(), query.width()),
        ref_dims: (reference.height(), reference.width()),
        grid,
        best_index: best.iter().map(|&(j, _)| r_origins[j]).collect(),
        best_score: best.iter().map(|&(_, s)| s).collect(),
    })
}

/// Transferred features with per-position contribution counts.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferredFeature {
    pub data: FeatureMap,
    /// Row-major `H×W` number of patches averaged at each position.
    pub coverage: Vec<u32>,
}

/// Pastes the matched reference patches of `ref_feat` (scaled by `scale_gap`
/// relative to the match level) onto the query grid, averaging overlaps.
pub fn transfer_features(ref_feat: &FeatureMap, m: &MatchMap, scale_gap: usize) -> Result<TransferredFeature> {
    if scale_gap == 0 {
        bail_arg!("scale gap must be positive");
    }
    let expected = (m.ref_dims.0 * scale_gap, m.ref_dims.1 * scale_gap);
    if (ref_feat.height(), ref_feat.width()) != expected {
        bail_arg!(
            "reference features are {}x{} but the match grid at gap {scale_gap} needs {}x{}",
            ref_feat.height(),
            ref_feat.width(),
            expected.0,
            expected.1
        );
    }
    let (oh, ow) = (m.query_dims.0 * scale_gap, m.query_dims.1 * scale_gap);
    let c = ref_feat.channels();
    let size = m.patch_size * scale_gap;
    let mut out = FeatureMap::zeros(oh, ow, c);
    let mut coverage = vec![0u32; oh * ow];
    for (q, &(ry, rx)) in m.best_index.iter().enumerate() {
        let (qy, qx) = m.query_origin(q);
        for dy in 0..size {
            let oy = qy * scale_gap + dy;
            for dx in 0..size {
                let ox = qx * scale_gap + dx;
                let k = &mut coverage[oy * ow + ox];
                *k += 1;
                let inv = 1.0 / f64::from(*k);
                let src = ref_feat.pixel(ry * scale_gap + dy, rx * scale_gap + dx);
                let base = (oy * ow + ox) * c;
                for (o, &v) in out.data_mut()[base..base + c].iter_mut().zip(src) {
                    *o += (v - *o) * inv;
                }
            }
        }
    }
    if let Some(hole) = coverage.iter().position(|&k| k == 0) {
        bail_arg!(
            "match grid does not tile the output: position ({}, {}) has no contributing patch",
            hole / ow,
            hole % ow
        );
    }
    Ok(TransferredFeature { data: out, coverage })
}

/// Transfer at pyramid level `l`, reusing a match computed at `m.level`.
pub fn transfer_at_level(ref_pyramid: &FeaturePyramid, m: &MatchMap, l: usize) -> Result<TransferredFeature> {
    if l < m.level {
        bail_arg!("cannot transfer at level {l}, below the matching level {}", m.level);
    }
    let gap = 1usize
        .checked_shl((l - m.level) as u32)
        .ok_or_else(|| Error::Argument(format!("level gap {} too large", l - m.level)))?;
    transfer_features(ref_pyramid.level(l)?, m, gap)
}

const DUMP_MAGIC: &[u8; 8] = b"RSMATCH1";

/// Writes a match map as a flat binary file: the 8-byte magic `RSMATCH1`,
/// nine little-endian u64 header fields (patch_size, stride, level,
/// query_h, query_w, ref_h, ref_w, grid_rows, grid_cols), then one record per
/// query patch of (row: u64, col: u64, score: f64), all little-endian.
pub fn write_match_dump(m: &MatchMap, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 72 + m.len() * 24);
    buf.extend_from_slice(DUMP_MAGIC);
    for v in [m.patch_size, m.stride, m.level, m.query_dims.0, m.query_dims.1, m.ref_dims.0, m.ref_dims.1, m.grid.0, m.grid.1] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for (&(r, c), &s) in m.best_index.iter().zip(&m.best_score) {
        buf.extend_from_slice(&(r as u64).to_le_bytes());
        buf.extend_from_slice(&(c as u64).to_le_bytes());
        buf.extend_from_slice(&s.to_le_bytes());
    }
    std::fs::File::create(path).and_then(|mut f| f.write_all(&buf)).map_err(|e| Error::io(path, e))
}

pub fn read_match_dump(path: &Path) -> Result<MatchMap> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 80 || &bytes[..8] != DUMP_MAGIC {
        return Err(Error::Format(format!("{} is not a match dump", path.display())));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap()) as usize;
    let h: Vec<usize> = (0..9).map(|k| word(8 + 8 * k)).collect();
    let n = h[7] * h[8];
    if bytes.len() != 80 + n * 24 {
        return Err(Error::Corruption(format!("{}: expected {n} records", path.display())));
    }
    let mut best_index = Vec::with_capacity(n);
    let mut best_score = Vec::with_capacity(n);
    for k in 0..n {
        let at = 80 + k * 24;
        best_index.push((word(at), word(at + 8)));
        best_score.push(f64::from_le_bytes(bytes[at + 16..at + 24].try_into().unwrap()));
    }
    Ok(MatchMap {
        patch_size: h[0],
        stride: h[1],
        level: h[2],
        query_dims: (h[3], h[4]),
        ref_dims: (h[5], h[6]),
        grid: (h[7], h[8]),
        best_index,
        best_score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn patch(m: &FeatureMap, y: usize, x: usize, p: usize) -> Vec<f64> {
        let mut v = Vec::new();
        for dy in 0..p {
            for dx in 0..p {
                v.extend_from_slice(m.pixel(y + dy, x + dx));
            }
        }
        v
    }

    /// Double loop over all pairs, computing cosines directly.
    fn brute_match(q: &FeatureMap, r: &FeatureMap, p: usize, stride: usize) -> Vec<((usize, usize), f64)> {
        let mut out = Vec::new();
        let mut qy = 0;
        while qy + p <= q.height() {
            let mut qx = 0;
            while qx + p <= q.width() {
                let a = patch(q, qy, qx, p);
                let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let mut best = ((0, 0), f64::NEG_INFINITY);
                for ry in 0..=r.height() - p {
                    for rx in 0..=r.width() - p {
                        let b = patch(r, ry, rx, p);
                        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
                        let s = if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) };
                        if s > best.1 {
                            best = ((ry, rx), s);
                        }
                    }
                }
                out.push(best);
                qx += stride;
            }
            qy += stride;
        }
        out
    }

    #[test]
    fn self_match_is_identity() {
        let m = random_map(9, 7, 4, 1);
        let mm = match_features(&m, &m, 3, 1).unwrap();
        assert_eq!(mm.grid, (7, 5));
        for (q, (&idx, &s)) in mm.best_index.iter().zip(&mm.best_score).enumerate() {
            assert_eq!(idx, mm.query_origin(q));
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scaled_patch_still_scores_one() {
        let r = random_map(6, 6, 2, 2);
        let mut data = Vec::new();
        for y in 0..3 {
            for x in 0..3 {
                data.extend(r.pixel(2 + y, 1 + x).iter().map(|v| 2.0 * v));
            }
        }
        let q = FeatureMap::new(3, 3, 2, data).unwrap();
        let mm = match_features(&q, &r, 3, 1).unwrap();
        assert_eq!(mm.best_index, vec![(2, 1)]);
        assert!((mm.best_score[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_exhaustive_oracle() {
        let q = random_map(8, 8, 4, 3);
        let r = random_map(10, 10, 4, 4);
        let mm = match_features(&q, &r, 3, 1).unwrap();
        let oracle = brute_match(&q, &r, 3, 1);
        for (k, (idx, s)) in oracle.iter().enumerate() {
            assert_eq!(mm.best_index[k], *idx);
            assert!((mm.best_score[k] - s).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_patches_score_zero_and_ties_pick_first() {
        let q = FeatureMap::zeros(3, 3, 2);
        let r = random_map(5, 5, 2, 5);
        let mm = match_features(&q, &r, 3, 1).unwrap();
        assert_eq!(mm.best_index, vec![(0, 0)]);
        assert_eq!(mm.best_score, vec![0.0]);
    }

    #[test]
    fn argument_errors() {
        let q = random_map(4, 4, 2, 6);
        assert!(matches!(match_features(&q, &random_map(4, 4, 3, 7), 3, 1), Err(Error::Argument(_))));
        assert!(matches!(match_features(&q, &random_map(2, 5, 2, 7), 3, 1), Err(Error::Argument(_))));
        let cfg = MatchConfig { ref_cap: Some(0), ..MatchConfig::default() };
        assert!(matches!(match_features_with(&q, &q, &cfg, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn ref_cap_is_deterministic_and_bounded() {
        let q = random_map(6, 6, 3, 8);
        let r = random_map(12, 12, 3, 9);
        let cfg = MatchConfig { ref_cap: Some(17), ..MatchConfig::default() };
        let a = match_features_with(&q, &r, &cfg, 1).unwrap();
        let b = match_features_with(&q, &r, &cfg, 1).unwrap();
        assert_eq!(a, b);
        let allowed: Vec<(usize, usize)> = (0..17).map(|i| i * 100 / 17).map(|k| (k / 10, k % 10)).collect();
        assert!(a.best_index.iter().all(|idx| allowed.contains(idx)));
    }

    #[test]
    fn identity_transfer_is_exact() {
        let low = random_map(6, 6, 3, 10);
        let high = random_map(24, 24, 5, 11);
        let mm = match_features(&low, &low, 3, 1).unwrap();
        let t = transfer_features(&high, &mm, 4).unwrap();
        assert_eq!(t.data, high);
    }

    #[test]
    fn two_patch_averaging_by_hand() {
        // Query 1x4 grid of 1x1 features -> patch 1x3, two query patches at x=0 and x=1,
        // both matched to reference (0,0); gap 1.
        let high = FeatureMap::new(1, 5, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let mm = MatchMap {
            patch_size: 1,
            stride: 1,
            level: 0,
            query_dims: (1, 4),
            ref_dims: (1, 5),
            grid: (1, 4),
            best_index: vec![(0, 0); 4],
            best_score: vec![1.0; 4],
        };
        let t = transfer_features(&high, &mm, 1).unwrap();
        assert_eq!(t.data.data(), &[1.0; 4]);

        // 2x2 patches on a 1-row grid with overlap: origins x=0 and x=1 of a 2x3 query,
        // matched to reference (0,0) and (0,2) of a 2x4 reference.
        let r = FeatureMap::new(2, 4, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let mm = MatchMap {
            patch_size: 2,
            stride: 1,
            level: 0,
            query_dims: (2, 3),
            ref_dims: (2, 4),
            grid: (1, 2),
            best_index: vec![(0, 0), (0, 2)],
            best_score: vec![1.0; 2],
        };
        let t = transfer_features(&r, &mm, 1).unwrap();
        // column 0: first patch only; column 1: avg of (2,3) and (6,7); column 2: second patch col 1.
        assert_eq!(t.data.data(), &[1.0, 2.5, 4.0, 5.0, 6.5, 8.0]);
        assert_eq!(t.coverage, vec![1, 2, 1, 1, 2, 1]);
    }

    #[test]
    fn coverage_matches_enumeration() {
        let low = random_map(6, 7, 2, 12);
        let high = random_map(24, 28, 2, 13);
        let mm = match_features(&low, &low, 3, 1).unwrap();
        let t = transfer_features(&high, &mm, 4).unwrap();
        for y in 0..24 {
            for x in 0..28 {
                let (cy, cx) = (y / 4, x / 4);
                let rows = (0..mm.grid.0).filter(|&i| i <= cy && cy < i + 3).count();
                let cols = (0..mm.grid.1).filter(|&j| j <= cx && cx < j + 3).count();
                assert_eq!(t.coverage[y * 28 + x] as usize, rows * cols);
            }
        }
        assert_eq!(t.coverage[10 * 28 + 10], 9);
    }

    #[test]
    fn gaps_in_tiling_are_rejected() {
        let q = random_map(7, 7, 2, 14);
        let mm = match_features(&q, &q, 2, 3).unwrap();
        assert!(matches!(transfer_features(&random_map(7, 7, 2, 15), &mm, 1), Err(Error::Argument(_))));
        let mm = match_features(&q, &q, 3, 1).unwrap();
        assert!(matches!(transfer_features(&random_map(14, 13, 2, 16), &mm, 2), Err(Error::Argument(_))));
    }

    fn brute_transfer(high: &FeatureMap, mm: &MatchMap, gap: usize) -> FeatureMap {
        let (oh, ow) = (mm.query_dims.0 * gap, mm.query_dims.1 * gap);
        let c = high.channels();
        let mut data = vec![0.0; oh * ow * c];
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = vec![0.0; c];
                let mut n = 0.0;
                for (q, &(ry, rx)) in mm.best_index.iter().enumerate() {
                    let (qy, qx) = mm.query_origin(q);
                    let (y0, x0) = (qy * gap, qx * gap);
                    let size = mm.patch_size * gap;
                    if y >= y0 && y < y0 + size && x >= x0 && x < x0 + size {
                        let src = high.pixel(ry * gap + y - y0, rx * gap + x - x0);
                        acc.iter_mut().zip(src).for_each(|(a, s)| *a += s);
                        n += 1.0;
                    }
                }
                for k in 0..c {
                    data[(y * ow + x) * c + k] = acc[k] / n;
                }
            }
        }
        FeatureMap::new(oh, ow, c, data).unwrap()
    }

    #[test]
    fn transfer_at_level_matches_oracle() {
        let mut levels = std::collections::BTreeMap::new();
        let match_q = random_map(5, 6, 3, 20);
        levels.insert(1, random_map(6, 5, 3, 21));
        levels.insert(2, random_map(12, 10, 2, 22));
        levels.insert(3, random_map(24, 20, 4, 23));
        let pyr = FeaturePyramid { top_level: 3, levels, extractor_id: "test".into() };
        let mm = match_features_with(&match_q, pyr.level(1).unwrap(), &MatchConfig::default(), 1).unwrap();

        let t1 = transfer_at_level(&pyr, &mm, 1).unwrap();
        assert_eq!(t1.data.dims(), (5, 6, 3));
        let t2 = transfer_at_level(&pyr, &mm, 2).unwrap();
        let oracle = brute_transfer(pyr.level(2).unwrap(), &mm, 2);
        for (a, b) in t2.data.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let t3 = transfer_at_level(&pyr, &mm, 3).unwrap();
        assert_eq!(t3, transfer_features(pyr.level(3).unwrap(), &mm, 4).unwrap());
        assert!(matches!(transfer_at_level(&pyr, &match_features(&match_q, &match_q, 3, 1).map(|mut m| { m.level = 2; m }).unwrap(), 1), Err(Error::Argument(_))));
    }

    #[test]
    fn dump_round_trip() {
        let q = random_map(6, 5, 2, 30);
        let r = random_map(7, 8, 2, 31);
        let mm = match_features_with(&q, &r, &MatchConfig::default(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        write_match_dump(&mm, &path).unwrap();
        assert_eq!(read_match_dump(&path).unwrap(), mm);
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(read_match_dump(&path), Err(Error::Format(_))));
    }

    fn flip_w(m: &FeatureMap) -> FeatureMap {
        let (h, w, c) = m.dims();
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                data.extend_from_slice(m.pixel(y, w - 1 - x));
            }
        }
        FeatureMap::new(h, w, c, data).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn oracle_equivalence(qh in 3usize..=16, qw in 3usize..=16, rh in 3usize..=16, rw in 3usize..=16,
                              c in 1usize..=8, stride in 1usize..=3, seed in 0u64..1_000_000) {
            let q = random_map(qh, qw, c, seed);
            let r = random_map(rh, rw, c, seed + 1);
            let mm = match_features(&q, &r, 3, stride).unwrap();
            let oracle = brute_match(&q, &r, 3, stride);
            prop_assert_eq!(mm.len(), oracle.len());
            let (gh, gw) = mm.ref_grid();
            for (k, (idx, s)) in oracle.iter().enumerate() {
                prop_assert_eq!(mm.best_index[k], *idx);
                prop_assert!((mm.best_score[k] - s).abs() < 1e-9);
                prop_assert!(idx.0 < gh && idx.1 < gw);
            }
        }

        #[test]
        fn duplicated_reference_patch_keeps_best_index(seed in 0u64..1_000_000, y in 0usize..4, x in 0usize..4) {
            // Copy the winning patch for query 0 to a later location in the reference.
            let q = random_map(3, 3, 2, seed);
            let mut r = random_map(10, 10, 2, seed + 7);
            let before = match_features(&q, &r, 3, 1).unwrap();
            let (by, bx) = before.best_index[0];
            let (ty, tx) = (by + 3 + y, x);
            prop_assume!(ty + 3 <= 10 && tx + 3 <= 10);
            let src = patch(&r, by, bx, 3);
            for dy in 0..3 {
                for dx in 0..3 {
                    let base = ((ty + dy) * 10 + tx + dx) * 2;
                    r.data_mut()[base..base + 2].copy_from_slice(&src[(dy * 3 + dx) * 2..(dy * 3 + dx) * 2 + 2]);
                }
            }
            let after = match_features(&q, &r, 3, 1).unwrap();
            // Only a window straddling the copy can displace the original, and only by scoring higher.
            prop_assert!(after.best_index[0] == (by, bx) || after.best_score[0] > before.best_score[0]);
            prop_assert_ne!(after.best_index[0], (ty, tx));
        }

        #[test]
        fn mirroring_is_equivariant(seed in 0u64..1_000_000) {
            let q = random_map(6, 7, 3, seed);
            let r = random_map(8, 9, 3, seed + 3);
            let a = match_features(&q, &r, 3, 1).unwrap();
            let b = match_features(&flip_w(&q), &flip_w(&r), 3, 1).unwrap();
            let (_, gw) = a.ref_grid();
            for qi in 0..a.grid.0 {
                for qj in 0..a.grid.1 {
                    let (ry, rx) = a.best_index[qi * a.grid.1 + qj];
                    let mirrored = b.best_index[qi * b.grid.1 + (b.grid.1 - 1 - qj)];
                    prop_assert_eq!(mirrored, (ry, gw - 1 - rx));
                }
            }
        }

        #[test]
        fn transfer_is_convex(seed in 0u64..1_000_000, gap in 1usize..=4) {
            let q = random_map(5, 5, 2, seed);
            let r = random_map(6, 6, 2, seed + 1);
            let high = random_map(6 * gap, 6 * gap, 2, seed + 2);
            let mm = match_features(&q, &r, 3, 1).unwrap();
            let t = transfer_features(&high, &mm, gap).unwrap();
            for ch in 0..2 {
                let vals: Vec<f64> = high.data().iter().skip(ch).step_by(2).copied().collect();
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for v in t.data.data().iter().skip(ch).step_by(2) {
                    prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
                }
            }
            prop_assert!(t.coverage.iter().all(|&k| k >= 1));
        }
    }
}
