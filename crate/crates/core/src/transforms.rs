//! Group actions on images and binary feature maps.
//!
//! Every rotation is split into a residual angle in `[0°, 90°)` followed by an
//! exact quarter-turn index permutation. Rotations that differ by a multiple
//! of 90° therefore produce results that are exact quarter turns of each other.

use crate::coding::{pool_cells, PoolLayout};
use crate::error::{Error, Result};
use crate::groups::{GroupElement, GroupSpec};
use crate::map::{ChannelLayout, FeatureMap, GrayImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Nearest,
    Bilinear,
}

/// Sampling grid of a feature map, used to resample after rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapGrid {
    /// One sample per pixel, nearest-neighbour resampling.
    Pixels,
    /// Output of OR-pooling over a `pre_height×pre_width` map; a rotated
    /// point is assigned to the pooling cell whose centre is nearest.
    Pooled {
        pre_height: usize,
        pre_width: usize,
        pool: usize,
        layout: PoolLayout,
    },
}

/// A rotation decomposed as `quarter_turns·90° + residual` with `residual ∈ [0, 90)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationSplit {
    pub quarter_turns: usize,
    pub residual_degrees: f64,
}

impl RotationSplit {
    pub fn from_degrees(angle: f64) -> Self {
        let a = angle.rem_euclid(360.0);
        let mut q = (a / 90.0).floor();
        let mut res = a - 90.0 * q;
        if !(1e-9..=90.0 - 1e-9).contains(&res) {
            if res > 45.0 {
                q += 1.0;
            }
            res = 0.0;
        }
        RotationSplit {
            quarter_turns: (q as usize) % 4,
            residual_degrees: res,
        }
    }

    /// Exact split of `steps · 360/rotations` degrees.
    pub fn from_steps(steps: usize, rotations: usize) -> Self {
        let steps = steps % rotations;
        let q = (4 * steps) / rotations;
        // 360·steps/R − 90·q, computed from integers
        let num = 360 * steps as i64 - 90 * (q * rotations) as i64;
        RotationSplit {
            quarter_turns: q % 4,
            residual_degrees: num as f64 / rotations as f64,
        }
    }

    pub fn is_exact(&self) -> bool {
        self.residual_degrees == 0.0
    }
}

/// Source position of output point `(y, x)` under a counter-clockwise
/// rotation by `degrees` about `(cy, cx)`.
#[inline]
fn inverse_rotate(y: f64, x: f64, cy: f64, cx: f64, cos: f64, sin: f64) -> (f64, f64) {
    let (dy, dx) = (y - cy, x - cx);
    (cy + dx * sin + dy * cos, cx + dx * cos - dy * sin)
}

/// Destination of point `(y, x)` under a counter-clockwise rotation.
#[inline]
fn forward_rotate(y: f64, x: f64, cy: f64, cx: f64, cos: f64, sin: f64) -> (f64, f64) {
    let (dy, dx) = (y - cy, x - cx);
    (cy - dx * sin + dy * cos, cx + dx * cos + dy * sin)
}

/// Counter-clockwise quarter turn of `(y, x)` in an `n×n` grid.
#[inline]
pub fn quarter_turn_point(y: usize, x: usize, n: usize) -> (usize, usize) {
    (n - 1 - x, y)
}

fn quarter_turn_image(img: &GrayImage, turns: usize) -> GrayImage {
    let mut cur = img.clone();
    let n = img.height();
    for _ in 0..turns % 4 {
        let mut next = GrayImage::zeros(n, n);
        for y in 0..n {
            for x in 0..n {
                let (ny, nx) = quarter_turn_point(y, x, n);
                next.set(ny, nx, cur.get(y, x));
            }
        }
        cur = next;
    }
    cur
}

fn resample_image(img: &GrayImage, degrees: f64, method: Interpolation) -> GrayImage {
    let (h, w) = (img.height(), img.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let sample = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            img.get(yy as usize, xx as usize)
        }
    };
    GrayImage::from_fn(h, w, |y, x| {
        let (sy, sx) = inverse_rotate(y as f64, x as f64, cy, cx, cos, sin);
        match method {
            Interpolation::Nearest => sample(sy.round() as isize, sx.round() as isize),
            Interpolation::Bilinear => {
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let (y0, x0) = (y0 as isize, x0 as isize);
                (1.0 - fy) * ((1.0 - fx) * sample(y0, x0) + fx * sample(y0, x0 + 1))
                    + fy * ((1.0 - fx) * sample(y0 + 1, x0) + fx * sample(y0 + 1, x0 + 1))
            }
        }
    })
}

fn rotate_image_split(img: &GrayImage, split: RotationSplit, method: Interpolation) -> GrayImage {
    if img.height() != img.width() && split.quarter_turns % 2 == 1 {
        let degrees = 90.0 * split.quarter_turns as f64 + split.residual_degrees;
        return resample_image(img, degrees, method);
    }
    let base = if split.is_exact() {
        img.clone()
    } else {
        resample_image(img, split.residual_degrees, method)
    };
    if img.height() == img.width() {
        quarter_turn_image(&base, split.quarter_turns)
    } else if split.quarter_turns == 2 {
        let mut out = base.clone();
        let (h, w) = (base.height(), base.width());
        for y in 0..h {
            for x in 0..w {
                out.set(h - 1 - y, w - 1 - x, base.get(y, x));
            }
        }
        out
    } else {
        base
    }
}

/// Rotates counter-clockwise by `degrees` about the image centre; pixels
/// that map from outside the source read as 0.
pub fn rotate_image(img: &GrayImage, degrees: f64, method: Interpolation) -> GrayImage {
    rotate_image_split(img, RotationSplit::from_degrees(degrees), method)
}

/// Rotates by `steps · 360/rotations` degrees using an exact integer split.
pub fn rotate_image_steps(img: &GrayImage, steps: usize, rotations: usize, method: Interpolation) -> GrayImage {
    rotate_image_split(img, RotationSplit::from_steps(steps, rotations), method)
}

/// Applies a group element to an image: polarity flip `I → 1 − I`, then rotation.
pub fn transform_image(img: &GrayImage, element: GroupElement, spec: &GroupSpec, method: Interpolation) -> GrayImage {
    let flipped;
    let src = if element.polarity % 2 == 1 {
        flipped = img.map(|v| 1.0 - v);
        &flipped
    } else {
        img
    };
    rotate_image_steps(src, element.rotation, spec.rotations(), method)
}

/// Top-left corner of a `size×size` window after rotating the image it lives in.
///
/// The window centre is rotated about the map centre, rounded to the grid and
/// clamped so the window stays inside the map.
pub fn rotate_window(
    y: usize,
    x: usize,
    size: usize,
    height: usize,
    width: usize,
    split: RotationSplit,
) -> (usize, usize) {
    let (mut y, mut x) = (y, x);
    if !split.is_exact() {
        let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
        let half = (size as f64 - 1.0) / 2.0;
        let (sin, cos) = split.residual_degrees.to_radians().sin_cos();
        let (ny, nx) = forward_rotate(y as f64 + half, x as f64 + half, cy, cx, cos, sin);
        let clampf = |v: f64, hi: usize| (v - half).round().clamp(0.0, hi as f64) as usize;
        y = clampf(ny, height - size);
        x = clampf(nx, width - size);
    }
    for _ in 0..split.quarter_turns {
        // only square maps are supported for quarter turns
        let (ny, nx) = (width - x - size, y);
        y = ny;
        x = nx;
    }
    (y, x)
}

fn check_channels(fm: &FeatureMap, layout: &ChannelLayout) -> Result<()> {
    if layout.channels() == 0 || !fm.channels().is_multiple_of(layout.channels()) || fm.channels() != layout.channels()
    {
        return Err(Error::InvalidArgument(format!(
            "feature map has {} channels, layout expects {}",
            fm.channels(),
            layout.channels()
        )));
    }
    Ok(())
}

fn cell_centers(len: usize, grid: &MapGrid, pre_len: usize) -> Vec<f64> {
    match grid {
        MapGrid::Pixels => (0..len).map(|i| i as f64).collect(),
        MapGrid::Pooled { pool, layout, .. } => pool_cells(pre_len, *pool, *layout)
            .into_iter()
            .map(|(s, e)| (s as f64 + e as f64 - 1.0) / 2.0)
            .collect(),
    }
}

fn nearest_center(centers: &[f64], v: f64) -> usize {
    let mut best = 0;
    for (i, &c) in centers.iter().enumerate() {
        if (c - v).abs() < (centers[best] - v).abs() {
            best = i;
        }
    }
    best
}

fn grid_is_symmetric(centers: &[f64], pre_len: usize) -> bool {
    let mid = (pre_len as f64 - 1.0) / 2.0;
    centers
        .iter()
        .zip(centers.iter().rev())
        .all(|(&a, &b)| ((a - mid) + (b - mid)).abs() < 1e-12)
}

/// Spatial part of the two-step transform, without channel permutation.
fn rotate_map_spatial(fm: &FeatureMap, split: RotationSplit, grid: &MapGrid) -> Result<FeatureMap> {
    let (h, w, c) = (fm.height(), fm.width(), fm.channels());
    let (pre_h, pre_w) = match grid {
        MapGrid::Pixels => (h, w),
        MapGrid::Pooled {
            pre_height, pre_width, ..
        } => (*pre_height, *pre_width),
    };
    let cy_centers = cell_centers(h, grid, pre_h);
    let cx_centers = cell_centers(w, grid, pre_w);
    if cy_centers.len() != h || cx_centers.len() != w {
        return Err(Error::InvalidArgument(
            "pooled grid does not match feature map size".into(),
        ));
    }
    let square = h == w && pre_h == pre_w;
    let symmetric = grid_is_symmetric(&cy_centers, pre_h) && grid_is_symmetric(&cx_centers, pre_w);

    let mut cur = fm.clone();
    if !split.is_exact() || !(square && symmetric) {
        let degrees = if square && symmetric {
            split.residual_degrees
        } else {
            split.residual_degrees + 90.0 * split.quarter_turns as f64
        };
        let (sin, cos) = degrees.to_radians().sin_cos();
        let (my, mx) = ((pre_h as f64 - 1.0) / 2.0, (pre_w as f64 - 1.0) / 2.0);
        let mut out = FeatureMap::zeros(h, w, c);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = inverse_rotate(cy_centers[y], cx_centers[x], my, mx, cos, sin);
                if sy < -0.5 || sx < -0.5 || sy > pre_h as f64 - 0.5 || sx > pre_w as f64 - 0.5 {
                    continue;
                }
                let (yy, xx) = match grid {
                    MapGrid::Pixels => (sy.round() as usize, sx.round() as usize),
                    MapGrid::Pooled { .. } => (nearest_center(&cy_centers, sy), nearest_center(&cx_centers, sx)),
                };
                for (k, &b) in cur.pixel(yy.min(h - 1), xx.min(w - 1)).iter().enumerate() {
                    if b != 0 {
                        out.set(y, x, k, true);
                    }
                }
            }
        }
        if !(square && symmetric) {
            return Ok(out);
        }
        cur = out;
    }
    for _ in 0..split.quarter_turns {
        let mut next = FeatureMap::zeros(h, w, c);
        for y in 0..h {
            for x in 0..w {
                let (ny, nx) = quarter_turn_point(y, x, h);
                for k in 0..c {
                    if cur.get(y, x, k) {
                        next.set(ny, nx, k, true);
                    }
                }
            }
        }
        cur = next;
    }
    Ok(cur)
}

fn permute_channels(fm: &FeatureMap, layout: &ChannelLayout, rot_shift: usize, pol_shift: usize) -> FeatureMap {
    if rot_shift == 0 && pol_shift == 0 {
        return fm.clone();
    }
    let c = fm.channels();
    let target: Vec<usize> = (0..c).map(|k| layout.shift(k, rot_shift, pol_shift)).collect();
    let mut out = FeatureMap::zeros(fm.height(), fm.width(), c);
    for y in 0..fm.height() {
        for x in 0..fm.width() {
            for (k, &b) in fm.pixel(y, x).iter().enumerate() {
                if b != 0 {
                    out.set(y, x, target[k], true);
                }
            }
        }
    }
    out
}

/// Orientation channel shift for a rotation of `steps` out of `group_rotations`.
fn channel_shift(steps: usize, group_rotations: usize, layout: &ChannelLayout) -> Result<usize> {
    if layout.rotations == 1 {
        return Ok(0);
    }
    let num = steps * layout.rotations;
    if !num.is_multiple_of(group_rotations) {
        return Err(Error::InvalidArgument(format!(
            "rotation by {steps}/{group_rotations} turns does not map {} orientation channels onto themselves",
            layout.rotations
        )));
    }
    Ok((num / group_rotations) % layout.rotations)
}

/// Two-step rotation: spatial rotation by `steps · 360/R` degrees, then a
/// cyclic shift of the orientation channels within each channel group.
pub fn rotate_feature_map(
    fm: &FeatureMap,
    steps: usize,
    spec: &GroupSpec,
    layout: &ChannelLayout,
    grid: &MapGrid,
) -> Result<FeatureMap> {
    transform_feature_map(
        fm,
        GroupElement {
            rotation: steps % spec.rotations(),
            polarity: 0,
        },
        spec,
        layout,
        grid,
    )
}

/// Two-step transform for a full group element (rotation and polarity).
pub fn transform_feature_map(
    fm: &FeatureMap,
    element: GroupElement,
    spec: &GroupSpec,
    layout: &ChannelLayout,
    grid: &MapGrid,
) -> Result<FeatureMap> {
    check_channels(fm, layout)?;
    let rot_shift = channel_shift(element.rotation, spec.rotations(), layout)?;
    let split = RotationSplit::from_steps(element.rotation, spec.rotations());
    let spatial = if element.rotation == 0 {
        fm.clone()
    } else {
        rotate_map_spatial(fm, split, grid)?
    };
    Ok(permute_channels(&spatial, layout, rot_shift, element.polarity))
}

/// For an `size×size×C` patch, the flat index each source bit moves to under
/// one counter-clockwise quarter turn (spatial turn plus channel shift by a
/// quarter of the orientations).
pub fn quarter_turn_permutation(size: usize, layout: &ChannelLayout) -> Result<Vec<u32>> {
    if layout.rotations > 1 && !layout.rotations.is_multiple_of(4) {
        return Err(Error::InvalidArgument(format!(
            "quarter turns need orientation count divisible by 4, got {}",
            layout.rotations
        )));
    }
    let c = layout.channels();
    let shift = layout.rotations / 4;
    let mut perm = vec![0u32; size * size * c];
    for y in 0..size {
        for x in 0..size {
            let (ny, nx) = quarter_turn_point(y, x, size);
            for k in 0..c {
                perm[(y * size + x) * c + k] = ((ny * size + nx) * c + layout.shift(k, shift, 0)) as u32;
            }
        }
    }
    Ok(perm)
}

/// All group transformations of one patch, identity first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompleteSample {
    pub blocks: Vec<FeatureMap>,
}

impl CompleteSample {
    pub fn block_dim(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.len())
    }

    /// ON indices per block.
    pub fn on_indices(&self) -> Vec<Vec<u32>> {
        self.blocks.iter().map(|b| b.on_indices()).collect()
    }
}

/// Builds `[g_0(x), …, g_{P−1}(x)]` ordered by flat group index. Block 0 is
/// the patch itself; `transform` is called for every other element.
pub fn complete_sample<F>(patch: &FeatureMap, spec: &GroupSpec, mut transform: F) -> Result<CompleteSample>
where
    F: FnMut(GroupElement, &FeatureMap) -> Result<FeatureMap>,
{
    let mut blocks = Vec::with_capacity(spec.order());
    blocks.push(patch.clone());
    for element in spec.elements().skip(1) {
        let block = transform(element, patch)?;
        if (block.height(), block.width(), block.channels()) != (patch.height(), patch.width(), patch.channels()) {
            return Err(Error::dim("complete sample block", patch.len(), block.len()));
        }
        blocks.push(block);
    }
    Ok(CompleteSample { blocks })
}

/// Transform callback that applies the analytic two-step rule to a patch.
pub fn analytic_transform(
    spec: GroupSpec,
    layout: ChannelLayout,
) -> impl FnMut(GroupElement, &FeatureMap) -> Result<FeatureMap> {
    move |element, patch| transform_feature_map(patch, element, &spec, &layout, &MapGrid::Pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> GrayImage {
        GrayImage::from_fn(n, n, |y, x| ((y * n + x) as f64) / (n * n) as f64)
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = ramp(7);
        assert_eq!(rotate_image(&img, 0.0, Interpolation::Bilinear), img);
        assert_eq!(rotate_image(&img, 360.0, Interpolation::Nearest), img);
    }

    #[test]
    fn quarter_turns_are_exact_permutations() {
        let img = ramp(6);
        let r = rotate_image(&img, 90.0, Interpolation::Nearest);
        let mut a: Vec<f64> = img.pixels().to_vec();
        let mut b: Vec<f64> = r.pixels().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        // top-right corner moves to top-left under a counter-clockwise turn
        assert_eq!(r.get(0, 0), img.get(0, 5));
        let back = rotate_image(&r, 270.0, Interpolation::Nearest);
        assert_eq!(back, img);
        let bil = rotate_image(&img, 90.0, Interpolation::Bilinear);
        assert_eq!(bil, r);
    }

    #[test]
    fn steps_split_is_exact() {
        let s = RotationSplit::from_steps(9, 32);
        assert_eq!(s.quarter_turns, 1);
        assert_eq!(s.residual_degrees, 11.25);
        assert!(RotationSplit::from_steps(8, 32).is_exact());
        let s = RotationSplit::from_steps(5, 6);
        assert_eq!(s.quarter_turns, 3);
        assert_eq!(s.residual_degrees, 30.0);
        let d = RotationSplit::from_degrees(-90.0);
        assert_eq!(d.quarter_turns, 3);
        assert!(d.is_exact());
    }

    #[test]
    fn rotations_90_apart_differ_by_a_quarter_turn() {
        let img = GrayImage::from_fn(28, 28, |y, x| (((y * 7 + x * 3) % 11) as f64) / 10.0);
        let a = rotate_image_steps(&img, 3, 32, Interpolation::Bilinear);
        let b = rotate_image_steps(&img, 11, 32, Interpolation::Bilinear);
        assert_eq!(quarter_turn_image(&a, 1), b);
    }

    #[test]
    fn window_rotation_quarter_turn() {
        let split = RotationSplit::from_steps(1, 4);
        assert_eq!(rotate_window(0, 0, 6, 28, 28, split), (22, 0));
        assert_eq!(
            rotate_window(3, 10, 6, 28, 28, RotationSplit::from_steps(0, 4)),
            (3, 10)
        );
    }

    #[test]
    fn feature_map_identity_and_full_cycle() {
        let spec = GroupSpec::new(4, 1).unwrap();
        let layout = ChannelLayout::edges();
        let mut fm = FeatureMap::zeros(5, 5, 8);
        fm.set(0, 1, 3, true);
        fm.set(4, 2, 0, true);
        assert_eq!(
            rotate_feature_map(&fm, 0, &spec, &layout, &MapGrid::Pixels).unwrap(),
            fm
        );
        let mut cur = fm.clone();
        for _ in 0..4 {
            cur = rotate_feature_map(&cur, 1, &spec, &layout, &MapGrid::Pixels).unwrap();
        }
        assert_eq!(cur, fm);
    }

    #[test]
    fn edge_channels_shift_with_rotation() {
        let layout = ChannelLayout::edges();
        let mut fm = FeatureMap::zeros(3, 3, 8);
        fm.set(1, 1, 5, true);
        let spec8 = GroupSpec::new(8, 1).unwrap();
        let r = rotate_feature_map(&fm, 1, &spec8, &layout, &MapGrid::Pixels).unwrap();
        assert!(r.get(1, 1, 6));
        let spec4 = GroupSpec::new(4, 1).unwrap();
        let r = rotate_feature_map(&fm, 1, &spec4, &layout, &MapGrid::Pixels).unwrap();
        assert!(r.get(1, 1, 7));
        assert_eq!(r.count_ones(), 1);
    }

    #[test]
    fn incompatible_channels_are_rejected() {
        let spec = GroupSpec::new(32, 1).unwrap();
        let fm = FeatureMap::zeros(3, 3, 8);
        assert!(rotate_feature_map(&fm, 1, &spec, &ChannelLayout::edges(), &MapGrid::Pixels).is_err());
        let fm = FeatureMap::zeros(3, 3, 6);
        let spec4 = GroupSpec::new(4, 1).unwrap();
        assert!(rotate_feature_map(&fm, 1, &spec4, &ChannelLayout::edges(), &MapGrid::Pixels).is_err());
    }

    #[test]
    fn complete_sample_trivial_group() {
        let mut patch = FeatureMap::zeros(2, 2, 1);
        patch.set(0, 1, 0, true);
        let cs = complete_sample(&patch, &GroupSpec::trivial(), |_, _| unreachable!()).unwrap();
        assert_eq!(cs.blocks, vec![patch]);
    }

    #[test]
    fn complete_sample_corner_walk() {
        // Oracle: CCW index map (y, x) -> (n-1-x, y), enumerated for a 2x2 grid.
        let mut patch = FeatureMap::zeros(2, 2, 1);
        patch.set(0, 0, 0, true);
        let spec = GroupSpec::new(4, 1).unwrap();
        let layout = ChannelLayout::parts(1, 1, 1);
        let cs = complete_sample(&patch, &spec, analytic_transform(spec, layout)).unwrap();
        let expected = [(0, 0), (1, 0), (1, 1), (0, 1)];
        for (block, &(y, x)) in cs.blocks.iter().zip(&expected) {
            assert_eq!(block.count_ones(), 1);
            assert!(block.get(y, x, 0), "expected ON bit at ({y},{x})");
        }
    }

    #[test]
    fn complete_sample_symmetric_patch() {
        let mut patch = FeatureMap::zeros(3, 3, 1);
        patch.set(0, 0, 0, true);
        patch.set(2, 2, 0, true);
        let spec = GroupSpec::new(2, 1).unwrap();
        let cs = complete_sample(&patch, &spec, analytic_transform(spec, ChannelLayout::parts(1, 1, 1))).unwrap();
        assert_eq!(cs.blocks[0], cs.blocks[1]);
    }

    #[test]
    fn pooled_grid_rotation_uses_cell_centres() {
        let spec = GroupSpec::new(4, 1).unwrap();
        let layout = ChannelLayout::parts(1, 1, 1);
        let grid = MapGrid::Pooled {
            pre_height: 23,
            pre_width: 23,
            pool: 4,
            layout: PoolLayout::Mirrored,
        };
        let mut fm = FeatureMap::zeros(6, 6, 1);
        fm.set(0, 5, 0, true);
        let r = rotate_feature_map(&fm, 1, &spec, &layout, &grid).unwrap();
        assert!(r.get(0, 0, 0));
        assert_eq!(r.count_ones(), 1);
    }

    #[test]
    fn quarter_turn_permutation_matches_map_rotation() {
        let layout = ChannelLayout::edges();
        let spec = GroupSpec::new(4, 1).unwrap();
        let perm = quarter_turn_permutation(3, &layout).unwrap();
        let mut fm = FeatureMap::zeros(3, 3, 8);
        fm.set(0, 2, 1, true);
        fm.set(1, 0, 6, true);
        let rotated = rotate_feature_map(&fm, 1, &spec, &layout, &MapGrid::Pixels).unwrap();
        let mut via_perm = vec![0u8; fm.len()];
        for i in fm.on_indices() {
            via_perm[perm[i as usize] as usize] = 1;
        }
        assert_eq!(rotated.bits(), &via_perm[..]);
    }
}
