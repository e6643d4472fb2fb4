//! Regional segmentation: cut an aligned volume into `k^3` equally shaped
//! regions and stack them along the channel axis.
//!
//! Region cores are the `floor(X/k)`-wide cells of a grid anchored at the
//! origin. For `k >= 2` every region is grown by `boundary` voxels per
//! dimension toward whichever sides have volume beyond them: split
//! `ceil(b/2)` low and `floor(b/2)` high when both sides do, all on the one
//! side otherwise. Voxels past the volume edge read as zero. When `k` does not
//! divide an extent the leftover slab at the top is only seen through the last
//! region's high-side growth.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_BOUNDARY: usize = 3;

/// One of the 8 axis reflections, as a per-axis flip flag.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Orientation {
    pub flip: [bool; 3],
}

impl Orientation {
    pub const IDENTITY: Orientation = Orientation { flip: [false; 3] };

    /// All 8 reflections, identity first.
    pub fn all() -> [Orientation; 8] {
        std::array::from_fn(|i| Orientation { flip: [i & 4 != 0, i & 2 != 0, i & 1 != 0] })
    }

    fn map(&self, axis: usize, i: usize, extent: usize) -> usize {
        if self.flip[axis] {
            extent - 1 - i
        } else {
            i
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    /// Grid coordinates `(rx, ry, rz)`.
    pub grid: [usize; 3],
    pub core_origin: [usize; 3],
    /// Source box start; the box spans `region_shape` voxels from here and
    /// may run past the volume's upper edge.
    pub origin: [usize; 3],
    pub orientation: Orientation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationPlan {
    pub k: usize,
    pub input_shape: [usize; 3],
    pub region_core: [usize; 3],
    pub boundary: usize,
    pub region_shape: [usize; 3],
    /// Channel order: row-major over `grid`.
    pub regions: Vec<Region>,
}

impl SegmentationPlan {
    pub fn channels(&self) -> usize {
        self.regions.len()
    }

    /// Extent of the grid tiled by region cores, `k * floor(X/k)` per axis.
    pub fn core_grid(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.k * self.region_core[a])
    }

    pub fn with_orientations(&self, orientations: &[Orientation]) -> Result<Self> {
        if orientations.len() != self.channels() {
            return Err(arg_err!("{} orientations for {} regions", orientations.len(), self.channels()));
        }
        let mut plan = self.clone();
        for (r, &o) in plan.regions.iter_mut().zip(orientations) {
            r.orientation = o;
        }
        Ok(plan)
    }
}

pub fn make_plan(input_shape: &[usize], k: usize, boundary: usize) -> Result<SegmentationPlan> {
    if input_shape.len() != 3 {
        return Err(shape_err!("segmentation works on (X, Y, Z) volumes, got {:?}", input_shape));
    }
    if k == 0 {
        return Err(arg_err!("segmentation rate must be at least 1"));
    }
    if let Some(&x) = input_shape.iter().find(|&&x| x < k) {
        return Err(arg_err!("segmentation rate {} exceeds extent {}", k, x));
    }
    let dims: [usize; 3] = [input_shape[0], input_shape[1], input_shape[2]];
    let core: [usize; 3] = std::array::from_fn(|a| dims[a] / k);
    let grow = if k == 1 { 0 } else { boundary };
    let region_shape: [usize; 3] = std::array::from_fn(|a| if k == 1 { dims[a] } else { core[a] + grow });

    let mut regions = Vec::with_capacity(k * k * k);
    for rx in 0..k {
        for ry in 0..k {
            for rz in 0..k {
                let grid = [rx, ry, rz];
                let core_origin: [usize; 3] = std::array::from_fn(|a| grid[a] * core[a]);
                let origin = std::array::from_fn(|a| {
                    let low_room = core_origin[a];
                    let high_room = dims[a] - core_origin[a] - core[a];
                    let low = match (low_room > 0, high_room > 0) {
                        (true, true) => grow.div_ceil(2),
                        (true, false) => grow,
                        _ => 0,
                    };
                    core_origin[a] - low.min(low_room)
                });
                regions.push(Region { grid, core_origin, origin, orientation: Orientation::IDENTITY });
            }
        }
    }
    Ok(SegmentationPlan { k, input_shape: dims, region_core: core, boundary, region_shape, regions })
}

/// A batch of segmented volumes, `(N, X', Y', Z', k^3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedVolume<T = f32> {
    pub data: Tensor<T>,
    pub plan: SegmentationPlan,
}

/// Accepts `(X, Y, Z)` or `(N, X, Y, Z, 1)`; the result is always batched.
pub fn segment<T: Scalar>(volume: &Tensor<T>, plan: &SegmentationPlan) -> Result<SegmentedVolume<T>> {
    let n = batch_of(volume, plan)?;
    let [sx, sy, sz] = plan.input_shape;
    let [ex, ey, ez] = plan.region_shape;
    let c = plan.channels();
    let mut out = vec![T::zero(); n * ex * ey * ez * c];
    let src = volume.data();
    for b in 0..n {
        let vol = &src[b * sx * sy * sz..(b + 1) * sx * sy * sz];
        for (ch, r) in plan.regions.iter().enumerate() {
            let o = r.orientation;
            for i in 0..ex {
                let x = r.origin[0] + o.map(0, i, ex);
                if x >= sx {
                    continue;
                }
                for j in 0..ey {
                    let y = r.origin[1] + o.map(1, j, ey);
                    if y >= sy {
                        continue;
                    }
                    for l in 0..ez {
                        let z = r.origin[2] + o.map(2, l, ez);
                        if z >= sz {
                            continue;
                        }
                        out[(((b * ex + i) * ey + j) * ez + l) * c + ch] = vol[(x * sy + y) * sz + z];
                    }
                }
            }
        }
    }
    Ok(SegmentedVolume { data: Tensor::new(&[n, ex, ey, ez, c], out)?, plan: plan.clone() })
}

fn batch_of<T: Scalar>(volume: &Tensor<T>, plan: &SegmentationPlan) -> Result<usize> {
    let s = volume.shape();
    let (n, spatial) = match s.len() {
        3 => (1, s),
        5 if s[4] == 1 => (s[0], &s[1..4]),
        _ => return Err(shape_err!("expected (X, Y, Z) or (N, X, Y, Z, 1), got {:?}", s)),
    };
    if spatial != plan.input_shape {
        return Err(shape_err!("volume is {:?}, plan expects {:?}", spatial, plan.input_shape));
    }
    Ok(n)
}

/// Undo orientations, drop boundaries and place every core back on the core
/// grid: `(N, kX_c, kY_c, kZ_c, 1)`.
pub fn assemble_cores<T: Scalar>(seg: &SegmentedVolume<T>) -> Result<Tensor<T>> {
    let plan = &seg.plan;
    let [ex, ey, ez] = plan.region_shape;
    let c = plan.channels();
    seg.data.expect_shape(&[seg.data.shape()[0], ex, ey, ez, c])?;
    let n = seg.data.shape()[0];
    let [gx, gy, gz] = plan.core_grid();
    let core = plan.region_core;
    let mut out = vec![T::zero(); n * gx * gy * gz];
    let src = seg.data.data();
    for b in 0..n {
        for (ch, r) in plan.regions.iter().enumerate() {
            let o = r.orientation;
            let off: [usize; 3] = std::array::from_fn(|a| r.core_origin[a] - r.origin[a]);
            for i in 0..core[0] {
                let si = o.map(0, off[0] + i, ex);
                for j in 0..core[1] {
                    let sj = o.map(1, off[1] + j, ey);
                    for l in 0..core[2] {
                        let sl = o.map(2, off[2] + l, ez);
                        let dst = (((b * gx + r.core_origin[0] + i) * gy + r.core_origin[1] + j) * gz)
                            + r.core_origin[2]
                            + l;
                        out[dst] = src[(((b * ex + si) * ey + sj) * ez + sl) * c + ch];
                    }
                }
            }
        }
    }
    Tensor::new(&[n, gx, gy, gz, 1], out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrientMode {
    #[default]
    Native,
    MinOverlap,
    MaxOverlap,
}

impl FromStr for OrientMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "native" => Ok(OrientMode::Native),
            "min_overlap" | "min-overlap" => Ok(OrientMode::MinOverlap),
            "max_overlap" | "max-overlap" => Ok(OrientMode::MaxOverlap),
            _ => Err(arg_err!("unknown orientation mode {:?}", s)),
        }
    }
}

impl fmt::Display for OrientMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OrientMode::Native => "native",
            OrientMode::MinOverlap => "min_overlap",
            OrientMode::MaxOverlap => "max_overlap",
        })
    }
}

/// Pick an orientation per region, greedily in channel order. Each candidate
/// mask (`|v| > tau` in `reference`) is scored by soft Jaccard against the
/// running mean of the masks already placed; ties keep the earlier candidate,
/// so identity wins whenever nothing distinguishes the choices.
pub fn orient_regions<T: Scalar>(
    plan: &SegmentationPlan,
    mode: OrientMode,
    reference: &Tensor<T>,
    tau: f64,
) -> Result<SegmentationPlan> {
    let native = plan.with_orientations(&vec![Orientation::IDENTITY; plan.channels()])?;
    if batch_of(reference, plan)? != 1 {
        return Err(shape_err!("orientation reference must be a single volume"));
    }
    if mode == OrientMode::Native {
        return Ok(native);
    }
    let seg = segment(reference, &native)?;
    let c = plan.channels();
    let voxels = seg.data.len() / c;
    let [ex, ey, ez] = plan.region_shape;
    let masks: Vec<Vec<f64>> = (0..c)
        .map(|ch| {
            seg.data
                .data()
                .iter()
                .skip(ch)
                .step_by(c)
                .map(|v| if v.to_f64_lossy().abs() > tau { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();

    let reflect = |mask: &[f64], o: Orientation| -> Vec<f64> {
        let mut out = vec![0.0; voxels];
        for i in 0..ex {
            for j in 0..ey {
                for l in 0..ez {
                    let src = (o.map(0, i, ex) * ey + o.map(1, j, ey)) * ez + o.map(2, l, ez);
                    out[(i * ey + j) * ez + l] = mask[src];
                }
            }
        }
        out
    };

    let mut chosen = Vec::with_capacity(c);
    let mut running = vec![0.0f64; voxels];
    for (ch, mask) in masks.iter().enumerate() {
        let mut best = (Orientation::IDENTITY, f64::NAN, reflect(mask, Orientation::IDENTITY));
        if ch > 0 {
            for o in Orientation::all() {
                let cand = reflect(mask, o);
                let score = soft_jaccard(&cand, &running);
                let better = match mode {
                    OrientMode::MinOverlap => score < best.1,
                    _ => score > best.1,
                };
                if best.1.is_nan() || better {
                    best = (o, score, cand);
                }
            }
        }
        for (r, v) in running.iter_mut().zip(&best.2) {
            *r += (v - *r) / (ch + 1) as f64;
        }
        chosen.push(best.0);
    }
    plan.with_orientations(&chosen)
}

fn soft_jaccard(a: &[f64], b: &[f64]) -> f64 {
    let (mut inter, mut union) = (0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        inter += x.min(y);
        union += x.max(y);
    }
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Mean over channel pairs of `|a & b| / max(1, |a | b|)` for the foreground
/// masks `|v| > tau`. A single channel scores 1.
pub fn overlap_score<T: Scalar>(seg: &SegmentedVolume<T>, tau: f64) -> f64 {
    let c = seg.data.channels();
    if c < 2 {
        return 1.0;
    }
    let masks: Vec<Vec<bool>> = (0..c)
        .map(|ch| seg.data.data().iter().skip(ch).step_by(c).map(|v| v.to_f64_lossy().abs() > tau).collect())
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..c {
        for b in a + 1..c {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&x, &y) in masks[a].iter().zip(&masks[b]) {
                inter += (x && y) as usize;
                union += (x || y) as usize;
            }
            total += inter as f64 / union.max(1) as f64;
            pairs += 1;
        }
    }
    total / pairs as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(shape: [usize; 3], radius: f64) -> Tensor<f64> {
        let center: [f64; 3] = std::array::from_fn(|a| (shape[a] as f64 - 1.0) / 2.0);
        Tensor::from_fn(&shape, |i| {
            let d2: f64 = (0..3).map(|a| (i[a] as f64 - center[a]).powi(2)).sum();
            if d2 <= radius * radius { 1.0 } else { 0.0 }
        })
    }

    #[test]
    fn k2_shape_of_brain_volume() {
        let plan = make_plan(&[41, 49, 41], 2, 3).unwrap();
        assert_eq!(plan.region_shape, [23, 27, 23]);
        assert_eq!(plan.channels(), 8);
        let seg = segment(&Tensor::<f32>::zeros(&[41, 49, 41]), &plan).unwrap();
        assert_eq!(seg.data.shape(), &[1, 23, 27, 23, 8]);
    }

    #[test]
    fn k4_shape_and_core_partition() {
        let plan = make_plan(&[41, 49, 41], 4, 3).unwrap();
        assert_eq!(plan.region_shape, [13, 15, 13]);
        assert_eq!(plan.channels(), 64);
        let grid = plan.core_grid();
        let mut hits = vec![0u8; grid.iter().product()];
        for r in &plan.regions {
            for i in 0..plan.region_core[0] {
                for j in 0..plan.region_core[1] {
                    for l in 0..plan.region_core[2] {
                        let p = [r.core_origin[0] + i, r.core_origin[1] + j, r.core_origin[2] + l];
                        hits[(p[0] * grid[1] + p[1]) * grid[2] + p[2]] += 1;
                    }
                }
            }
        }
        assert!(hits.iter().all(|&h| h == 1));
    }

    #[test]
    fn k1_is_identity() {
        let plan = make_plan(&[5, 4, 3], 1, 3).unwrap();
        assert_eq!(plan.region_shape, [5, 4, 3]);
        let v = Tensor::from_fn(&[5, 4, 3], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64);
        let seg = segment(&v, &plan).unwrap();
        assert_eq!(seg.data.data(), v.data());
    }

    #[test]
    fn boxes_reach_residual_slab() {
        let plan = make_plan(&[41, 49, 41], 2, 3).unwrap();
        let last = plan.regions.last().unwrap();
        assert_eq!(last.origin, [18, 22, 18]);
        assert_eq!(last.origin[0] + plan.region_shape[0], 41);
        assert_eq!(plan.regions[0].origin, [0, 0, 0]);
    }

    #[test]
    fn interior_regions_split_boundary() {
        let plan = make_plan(&[30, 30, 30], 3, 3).unwrap();
        let mid = &plan.regions[13];
        assert_eq!(mid.grid, [1, 1, 1]);
        assert_eq!(mid.core_origin, [10, 10, 10]);
        assert_eq!(mid.origin, [8, 8, 8]);
    }

    #[test]
    fn constant_volume_constant_channels() {
        let plan = make_plan(&[12, 10, 8], 2, 3).unwrap();
        let seg = segment(&Tensor::<f32>::full(&[12, 10, 8], 2.5), &plan).unwrap();
        assert!(seg.data.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn octant_labels_land_in_their_channels() {
        let plan = make_plan(&[10, 12, 8], 2, 3).unwrap();
        let v = Tensor::from_fn(&[10, 12, 8], |i| ((i[0] / 5) * 4 + (i[1] / 6) * 2 + i[2] / 4) as f64);
        let seg = segment(&v, &plan).unwrap();
        let cores = assemble_cores(&seg).unwrap();
        for (ch, r) in plan.regions.iter().enumerate() {
            let off: Vec<usize> = (0..3).map(|a| r.core_origin[a] - r.origin[a]).collect();
            for i in 0..5 {
                for j in 0..6 {
                    for l in 0..4 {
                        let v = seg.data.get(&[0, off[0] + i, off[1] + j, off[2] + l, ch]);
                        assert_eq!(v, ch as f64);
                    }
                }
            }
        }
        assert_eq!(cores.shape(), &[1, 10, 12, 8, 1]);
        assert_eq!(cores.data(), v.data());
    }

    #[test]
    fn round_trip_with_orientations() {
        let plan = make_plan(&[11, 9, 13], 3, 3).unwrap();
        let orient: Vec<Orientation> = (0..27).map(|i| Orientation::all()[i % 8]).collect();
        let plan = plan.with_orientations(&orient).unwrap();
        let v = Tensor::from_fn(&[2, 11, 9, 13, 1], |i| (i[0] * 10000 + i[1] * 1000 + i[2] * 50 + i[3]) as f64);
        let cores = assemble_cores(&segment(&v, &plan).unwrap()).unwrap();
        let expected = crate::tensor::slice_box(&v, &[0, 0, 0, 0, 0], &[2, 9, 9, 12, 1]).unwrap();
        assert_eq!(cores, expected);
    }

    #[test]
    fn shape_errors() {
        assert!(matches!(make_plan(&[3, 8, 8], 4, 3), Err(Error::Argument(_))));
        assert!(make_plan(&[8, 8, 8], 0, 3).is_err());
        let plan = make_plan(&[8, 8, 8], 2, 3).unwrap();
        assert!(matches!(segment(&Tensor::<f32>::zeros(&[8, 8, 7]), &plan), Err(Error::Shape(_))));
    }

    #[test]
    fn overlap_extremes() {
        let plan = make_plan(&[4, 4, 4], 1, 0).unwrap();
        let same = SegmentedVolume { data: Tensor::<f64>::full(&[1, 2, 2, 2, 3], 1.0), plan: plan.clone() };
        assert_eq!(overlap_score(&same, 0.0), 1.0);
        let disjoint = Tensor::from_fn(&[1, 2, 2, 2, 2], |i| if (i[1] == 0) == (i[4] == 0) { 1.0 } else { 0.0 });
        assert_eq!(overlap_score(&SegmentedVolume { data: disjoint, plan }, 0.0), 0.0);
    }

    #[test]
    fn sphere_orientation_ordering() {
        let shape = [16, 16, 16];
        let reference = sphere(shape, 5.0);
        let plan = make_plan(&shape, 2, 3).unwrap();
        let score = |mode| {
            let p = orient_regions(&plan, mode, &reference, 0.0).unwrap();
            overlap_score(&segment(&reference, &p).unwrap(), 0.0)
        };
        let (lo, mid, hi) = (score(OrientMode::MinOverlap), score(OrientMode::Native), score(OrientMode::MaxOverlap));
        assert!(lo <= mid && mid < hi, "{} {} {}", lo, mid, hi);
        assert!(hi > 0.99);
    }

    #[test]
    fn zero_reference_keeps_identity() {
        let plan = make_plan(&[8, 8, 8], 2, 3).unwrap();
        for mode in [OrientMode::MinOverlap, OrientMode::MaxOverlap] {
            let p = orient_regions(&plan, mode, &Tensor::<f32>::zeros(&[8, 8, 8]), 0.0).unwrap();
            assert!(p.regions.iter().all(|r| r.orientation == Orientation::IDENTITY));
        }
    }

    #[test]
    fn native_mode_matches_plain_plan() {
        let plan = make_plan(&[9, 9, 9], 2, 3).unwrap();
        let v = sphere([9, 9, 9], 3.0);
        let p = orient_regions(&plan, OrientMode::Native, &v, 0.0).unwrap();
        assert_eq!(segment(&v, &p).unwrap().data, segment(&v, &plan).unwrap().data);
    }

    #[test]
    fn mode_names() {
        for m in [OrientMode::Native, OrientMode::MinOverlap, OrientMode::MaxOverlap] {
            assert_eq!(m.to_string().parse::<OrientMode>().unwrap(), m);
        }
        assert!("sideways".parse::<OrientMode>().is_err());
    }
}
