//! Maximum-likelihood part coding, dilation and OR-pooling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::FeatureMap;
use crate::permem::PartsDictionary;

/// Scale of the fixed-point log-likelihoods used for coding.
///
/// Scores are integer sums, so the winning part never depends on the order
/// in which patch bits are visited.
const SCORE_SCALE: f64 = 4_294_967_296.0;

/// How disjoint pooling cells are laid out when the map size is not a
/// multiple of the pool size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolLayout {
    /// Cells anchored at both borders and mirrored about the centre; the
    /// middle cell absorbs the remainder. Commutes with quarter turns.
    #[default]
    Mirrored,
    /// Cells anchored at the top-left; the last cell is truncated.
    TopLeft,
}

/// Half-open `[start, end)` pixel ranges of the `⌈len/pool⌉` pooling cells.
pub fn pool_cells(len: usize, pool: usize, layout: PoolLayout) -> Vec<(usize, usize)> {
    let pool = pool.max(1);
    let n = len.div_ceil(pool);
    match layout {
        PoolLayout::TopLeft => (0..n).map(|i| (i * pool, ((i + 1) * pool).min(len))).collect(),
        PoolLayout::Mirrored => {
            let half = n / 2;
            let mut cells: Vec<(usize, usize)> = (0..half).map(|i| (i * pool, (i + 1) * pool)).collect();
            if n % 2 == 1 {
                cells.push((half * pool, len - half * pool));
            }
            cells.extend((0..half).rev().map(|j| (len - (j + 1) * pool, len - j * pool)));
            cells
        }
    }
}

/// Which part is set when several share the maximum score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    #[default]
    LowestIndex,
    /// Every maximizer is set. Tied rotations of one part family then stay
    /// tied after a quarter turn, so coding commutes with it exactly.
    AllMaxima,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodingConfig {
    pub patch_size: usize,
    pub spread_radius: usize,
    pub pool_size: usize,
    pub min_active_bits: usize,
    pub pool_layout: PoolLayout,
    /// Add `log π` of each part to its score.
    pub use_prior: bool,
    #[serde(default)]
    pub tie_break: TieBreak,
}

impl Default for CodingConfig {
    fn default() -> Self {
        CodingConfig {
            patch_size: 6,
            spread_radius: 1,
            pool_size: 4,
            min_active_bits: 4,
            pool_layout: PoolLayout::Mirrored,
            use_prior: false,
            tie_break: TieBreak::LowestIndex,
        }
    }
}

impl CodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.pool_size == 0 {
            return Err(Error::InvalidArgument("patch and pool size must be at least 1".into()));
        }
        Ok(())
    }
}

/// A dictionary compiled for fast one-hot coding.
#[derive(Debug, Clone)]
pub struct Coder {
    parts: usize,
    dim: usize,
    base: Vec<i64>,
    /// `D×K` fixed-point logits.
    logit_t: Vec<i64>,
}

fn fixed(v: f64) -> i64 {
    (v * SCORE_SCALE).round() as i64
}

impl Coder {
    pub fn new(dict: &PartsDictionary, use_prior: bool) -> Self {
        let (k, dim) = (dict.len(), dict.dim());
        let mut base = vec![0i64; k];
        let mut logit_t = vec![0i64; dim * k];
        for (p, b) in base.iter_mut().enumerate() {
            let row = dict.part(p);
            let mut acc = 0i64;
            for (d, &m) in row.iter().enumerate() {
                let l0 = fixed((1.0 - m).ln());
                acc += l0;
                logit_t[d * k + p] = fixed(m.ln()) - l0;
            }
            if use_prior {
                acc += fixed(dict.priors()[p].ln());
            }
            *b = acc;
        }
        Coder {
            parts: k,
            dim,
            base,
            logit_t,
        }
    }

    pub fn parts(&self) -> usize {
        self.parts
    }

    /// Index of the best part for a patch given by its ON indices (ties to the lowest index).
    pub fn best_part(&self, on: &[u32], scratch: &mut Vec<i64>) -> usize {
        scratch.clear();
        scratch.extend_from_slice(&self.base);
        for &d in on {
            self.add_row(d as usize, scratch);
        }
        best_index(scratch)
    }

    #[inline]
    fn add_row(&self, d: usize, scores: &mut [i64]) {
        let row = &self.logit_t[d * self.parts..(d + 1) * self.parts];
        for (s, &l) in scores.iter_mut().zip(row) {
            *s += l;
        }
    }

    /// One-hot coding of every `S×S` window of `fm` (ties per `cfg.tie_break`).
    pub fn code(&self, fm: &FeatureMap, cfg: &CodingConfig) -> Result<FeatureMap> {
        cfg.validate()?;
        let (h, w, c) = (fm.height(), fm.width(), fm.channels());
        let s = cfg.patch_size;
        if s * s * c != self.dim {
            return Err(Error::dim("dictionary patch dimension", s * s * c, self.dim));
        }
        if h < s || w < s {
            return Err(Error::InvalidArgument(format!(
                "{h}×{w} map is smaller than the {s}×{s} patch"
            )));
        }
        let (oh, ow) = (h - s + 1, w - s + 1);
        let mut out = FeatureMap::zeros(oh, ow, self.parts);
        // per-pixel ON channels
        let mut starts = Vec::with_capacity(h * w + 1);
        let mut chans: Vec<u32> = Vec::new();
        starts.push(0);
        for y in 0..h {
            for x in 0..w {
                chans.extend(
                    fm.pixel(y, x)
                        .iter()
                        .enumerate()
                        .filter(|(_, &b)| b != 0)
                        .map(|(k, _)| k as u32),
                );
                starts.push(chans.len());
            }
        }
        let count = |y: usize, x: usize| starts[y * w + x + 1] - starts[y * w + x];
        let mut scores = Vec::with_capacity(self.parts);
        for y in 0..oh {
            for x in 0..ow {
                let active: usize = (0..s)
                    .flat_map(|dy| (0..s).map(move |dx| (dy, dx)))
                    .map(|(dy, dx)| count(y + dy, x + dx))
                    .sum();
                if active < cfg.min_active_bits {
                    continue;
                }
                scores.clear();
                scores.extend_from_slice(&self.base);
                for dy in 0..s {
                    for dx in 0..s {
                        let p = (y + dy) * w + x + dx;
                        for &k in &chans[starts[p]..starts[p + 1]] {
                            self.add_row((dy * s + dx) * c + k as usize, &mut scores);
                        }
                    }
                }
                match cfg.tie_break {
                    TieBreak::LowestIndex => out.set(y, x, best_index(&scores), true),
                    TieBreak::AllMaxima => {
                        let top = scores.iter().copied().max().unwrap_or(0);
                        for k in (0..self.parts).filter(|&k| scores[k] == top) {
                            out.set(y, x, k, true);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn best_index(scores: &[i64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// One-hot maximum-likelihood coding of every window of `fm`.
pub fn code_map(fm: &FeatureMap, dict: &PartsDictionary, cfg: &CodingConfig) -> Result<FeatureMap> {
    Coder::new(dict, cfg.use_prior).code(fm, cfg)
}

/// Per-channel binary dilation with a `(2r+1)²` square.
pub fn dilate(fm: &FeatureMap, radius: usize) -> FeatureMap {
    if radius == 0 {
        return fm.clone();
    }
    let (h, w, c) = (fm.height(), fm.width(), fm.channels());
    let mut horiz = FeatureMap::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for (k, &b) in fm.pixel(y, x).iter().enumerate() {
                if b != 0 {
                    for xx in x.saturating_sub(radius)..(x + radius + 1).min(w) {
                        horiz.set(y, xx, k, true);
                    }
                }
            }
        }
    }
    let mut out = FeatureMap::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for (k, &b) in horiz.pixel(y, x).iter().enumerate() {
                if b != 0 {
                    for yy in y.saturating_sub(radius)..(y + radius + 1).min(h) {
                        out.set(yy, x, k, true);
                    }
                }
            }
        }
    }
    out
}

/// OR-pooling over disjoint cells laid out as `layout`.
pub fn or_pool_with(fm: &FeatureMap, pool: usize, layout: PoolLayout) -> FeatureMap {
    let rows = pool_cells(fm.height(), pool, layout);
    let cols = pool_cells(fm.width(), pool, layout);
    let c = fm.channels();
    let mut out = FeatureMap::zeros(rows.len(), cols.len(), c);
    for (oy, &(y0, y1)) in rows.iter().enumerate() {
        for (ox, &(x0, x1)) in cols.iter().enumerate() {
            for y in y0..y1 {
                for x in x0..x1 {
                    for (k, &b) in fm.pixel(y, x).iter().enumerate() {
                        if b != 0 {
                            out.set(oy, ox, k, true);
                        }
                    }
                }
            }
        }
    }
    out
}

/// OR-pooling with the default mirrored layout.
pub fn or_pool(fm: &FeatureMap, pool: usize) -> FeatureMap {
    or_pool_with(fm, pool, PoolLayout::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dict(parts: Vec<Vec<f64>>) -> PartsDictionary {
        PartsDictionary::plain(parts, 0.0).unwrap()
    }

    fn cfg(s: usize, min_active: usize) -> CodingConfig {
        CodingConfig {
            patch_size: s,
            min_active_bits: min_active,
            ..CodingConfig::default()
        }
    }

    #[test]
    fn cells_cover_the_map() {
        assert_eq!(
            pool_cells(23, 4, PoolLayout::Mirrored),
            vec![(0, 4), (4, 8), (8, 12), (11, 15), (15, 19), (19, 23)]
        );
        assert_eq!(pool_cells(10, 4, PoolLayout::Mirrored), vec![(0, 4), (4, 6), (6, 10)]);
        assert_eq!(pool_cells(23, 4, PoolLayout::TopLeft).last(), Some(&(20, 23)));
        assert_eq!(pool_cells(3, 4, PoolLayout::Mirrored), vec![(0, 3)]);
        assert_eq!(pool_cells(8, 4, PoolLayout::Mirrored), vec![(0, 4), (4, 8)]);
    }

    #[test]
    fn codes_matching_part() {
        let pattern = [1u8, 0, 0, 1];
        let near = |p: &[u8]| p.iter().map(|&b| if b == 1 { 0.99 } else { 0.01 }).collect::<Vec<_>>();
        let d = dict(vec![near(&[0, 1, 1, 0]), near(&pattern), near(&[1, 1, 1, 1])]);
        let fm = FeatureMap::from_bits(2, 2, 1, pattern.to_vec()).unwrap();
        let out = code_map(&fm, &d, &cfg(2, 1)).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (1, 1, 3));
        assert_eq!(out.pixel(0, 0), &[0, 1, 0]);
    }

    #[test]
    fn rejects_quiet_patches_and_breaks_ties_low() {
        let d = dict(vec![vec![0.3; 4], vec![0.3; 4]]);
        let blank = FeatureMap::zeros(2, 2, 1);
        assert_eq!(code_map(&blank, &d, &cfg(2, 1)).unwrap().count_ones(), 0);
        let full = FeatureMap::from_bits(2, 2, 1, vec![1; 4]).unwrap();
        assert_eq!(code_map(&full, &d, &cfg(2, 1)).unwrap().pixel(0, 0), &[1, 0]);
        assert!(code_map(&full, &d, &cfg(3, 1)).is_err());
        let all = CodingConfig {
            tie_break: TieBreak::AllMaxima,
            ..cfg(2, 1)
        };
        let d = dict(vec![vec![0.3; 4], vec![0.2; 4], vec![0.3; 4]]);
        assert_eq!(code_map(&full, &d, &all).unwrap().pixel(0, 0), &[1, 0, 1]);
    }

    #[test]
    fn dilation_examples() {
        let mut fm = FeatureMap::zeros(4, 4, 2);
        fm.set(0, 0, 1, true);
        assert_eq!(dilate(&fm, 0), fm);
        let d = dilate(&fm, 1);
        assert_eq!(d.count_ones(), 4);
        assert!(d.get(1, 1, 1) && !d.get(1, 1, 0));
        fm.set(2, 2, 0, true);
        assert_eq!(dilate(&fm, 1).count_ones(), 4 + 9);
    }

    #[test]
    fn pooling_examples() {
        let mut fm = FeatureMap::zeros(5, 5, 1);
        assert_eq!(or_pool(&fm, 4).count_ones(), 0);
        fm.set(4, 0, 0, true);
        let p = or_pool(&fm, 4);
        assert_eq!((p.height(), p.width()), (2, 2));
        assert!(p.get(1, 0, 0));
        assert_eq!(p.count_ones(), 1);
        assert_eq!(or_pool(&dilate(&fm, 0), 1), fm);
    }

    fn arb_map() -> impl Strategy<Value = FeatureMap> {
        (1usize..9, 1usize..9, 1usize..3).prop_flat_map(|(h, w, c)| {
            proptest::collection::vec(0u8..2, h * w * c)
                .prop_map(move |bits| FeatureMap::from_bits(h, w, c, bits).unwrap())
        })
    }

    proptest! {
        #[test]
        fn dilation_is_a_superset(fm in arb_map(), r in 0usize..3) {
            prop_assert!(dilate(&fm, r).contains(&fm));
        }

        #[test]
        fn pooling_is_monotone(fm in arb_map(), extra in arb_map(), pool in 1usize..5) {
            if (fm.height(), fm.width(), fm.channels()) == (extra.height(), extra.width(), extra.channels()) {
                let mut more = fm.clone();
                more.or_assign(&extra);
                for layout in [PoolLayout::Mirrored, PoolLayout::TopLeft] {
                    prop_assert!(or_pool_with(&more, pool, layout).contains(&or_pool_with(&fm, pool, layout)));
                }
            }
        }

        #[test]
        fn coding_is_one_hot(fm in arb_map(), seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let s = 1.min(fm.height()).max(1);
            let dim = s * s * fm.channels();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let parts = (0..5).map(|_| (0..dim).map(|_| rng.random_range(0.05..0.95)).collect()).collect();
            let out = code_map(&fm, &dict(parts), &cfg(s, 0)).unwrap();
            for y in 0..out.height() {
                for x in 0..out.width() {
                    prop_assert!(out.pixel(y, x).iter().map(|&b| b as usize).sum::<usize>() <= 1);
                }
            }
        }

        #[test]
        fn mirrored_cells_are_symmetric(len in 1usize..40, pool in 1usize..6) {
            let cells = pool_cells(len, pool, PoolLayout::Mirrored);
            prop_assert_eq!(cells.len(), len.div_ceil(pool));
            prop_assert_eq!(cells[0].0, 0);
            prop_assert_eq!(cells.last().unwrap().1, len);
            for (&(a, b), &(c, d)) in cells.iter().zip(cells.iter().rev()) {
                prop_assert!(a < b && b - a <= pool);
                prop_assert_eq!(a, len - d);
                prop_assert_eq!(b, len - c);
            }
        }
    }
}
