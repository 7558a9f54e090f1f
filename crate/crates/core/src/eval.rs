//! Evaluation: pixel error with threshold line search, 2D segmentation
//! back-ends (connected components, seeded watershed), and Rand merge/split/F
//! scoring with precision-recall curves.
//!
//! Conventions, documented once here:
//! - segmentation label 0 is boundary/background; label-0 pixels are excluded
//!   from Rand contingency counting in both volumes;
//! - 4-connectivity in-plane, never across z (the task is 2D per section);
//! - all threshold line searches use the 0.01 grid over [0, 1].

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::collections::HashMap;

use rayon::prelude::*;

use crate::tensor::{dims_len, Dims, Volume};
use crate::{Error, Result};

/// A labeled volume: nonnegative integer labels, x-fastest, 0 reserved for
/// boundary/background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segmentation {
    dims: Dims,
    labels: Vec<u32>,
}

impl Segmentation {
    pub fn new(dims: Dims, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != dims_len(dims) {
            return Err(Error::Shape(format!(
                "segmentation of dims {dims:?} needs {} labels, got {}",
                dims_len(dims),
                labels.len()
            )));
        }
        Ok(Segmentation { dims, labels })
    }

    pub fn zeros(dims: Dims) -> Self {
        Segmentation { dims, labels: vec![0; dims_len(dims)] }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u32] {
        &mut self.labels
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> u32 {
        self.labels[x + self.dims[0] * (y + self.dims[1] * z)]
    }

    /// Count of distinct nonzero labels.
    pub fn segment_count(&self) -> usize {
        let mut seen: Vec<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    /// Relabel so every (z-slice, label) pair becomes its own segment; zero
    /// stays zero. Proposals from the 2D segmenters carry independent labels
    /// per slice, so volumetric truth must be restricted the same way before
    /// Rand scoring — otherwise a segment spanning `nz` slices looks like an
    /// `nz`-way split no matter how good the proposal is. A bijective
    /// relabeling (e.g. a single slice, or an already slice-local proposal)
    /// leaves all Rand scores unchanged.
    pub fn slicewise(&self) -> Segmentation {
        let [nx, ny, nz] = self.dims;
        let mut out = Segmentation::zeros(self.dims);
        let mut next = 1u32;
        let mut remap: HashMap<u32, u32> = HashMap::new();
        for z in 0..nz {
            remap.clear();
            let base = nx * ny * z;
            for i in base..base + nx * ny {
                let l = self.labels[i];
                if l == 0 {
                    continue;
                }
                out.labels[i] = *remap.entry(l).or_insert_with(|| {
                    let v = next;
                    next += 1;
                    v
                });
            }
        }
        out
    }
}

/// Fraction of pixels where the thresholded map `(map >= t)` disagrees with
/// the binary label.
pub fn pixel_error(map: &Volume, labels: &Volume, t: f32) -> Result<f64> {
    if map.dims() != labels.dims() {
        return Err(Error::Shape(format!(
            "map dims {:?} != label dims {:?}",
            map.dims(),
            labels.dims()
        )));
    }
    let wrong: u64 = map
        .values()
        .iter()
        .zip(labels.values())
        .filter(|(m, y)| (**m >= t) != (**y >= 0.5))
        .count() as u64;
    Ok(wrong as f64 / map.len() as f64)
}

/// Line search over thresholds {0.00, 0.01, ..., 1.00}; returns the
/// minimizing threshold (lowest on ties) and its pixel error.
pub fn best_pixel_error(map: &Volume, labels: &Volume) -> Result<(f32, f64)> {
    if map.dims() != labels.dims() {
        return Err(Error::Shape(format!(
            "map dims {:?} != label dims {:?}",
            map.dims(),
            labels.dims()
        )));
    }
    let errors: Vec<f64> = (0..=100u32)
        .into_par_iter()
        .map(|k| {
            let t = k as f32 / 100.0;
            pixel_error(map, labels, t).expect("dims pre-checked")
        })
        .collect();
    let mut best = (0.0f32, errors[0]);
    for (k, &e) in errors.iter().enumerate().skip(1) {
        if e < best.1 {
            best = (k as f32 / 100.0, e);
        }
    }
    Ok(best)
}

const NEIGH4: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// Thresholds the map, then labels 4-connected components of the
/// below-threshold pixels per z-slice. Pixels with `map >= t` become 0;
/// component labels are unique across the whole volume.
pub fn connected_components_2d(map: &Volume, t: f32) -> Segmentation {
    let [nx, ny, nz] = map.dims();
    let mut seg = Segmentation::zeros(map.dims());
    let mut next_label = 1u32;
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for z in 0..nz {
        let base = nx * ny * z;
        for y0 in 0..ny {
            for x0 in 0..nx {
                let idx = base + y0 * nx + x0;
                if map.values()[idx] >= t || seg.labels[idx] != 0 {
                    continue;
                }
                let label = next_label;
                next_label += 1;
                seg.labels[idx] = label;
                stack.push((x0, y0));
                while let Some((x, y)) = stack.pop() {
                    for (dx, dy) in NEIGH4 {
                        let (qx, qy) = (x as isize + dx, y as isize + dy);
                        if qx < 0 || qy < 0 || qx >= nx as isize || qy >= ny as isize {
                            continue;
                        }
                        let qidx = base + qy as usize * nx + qx as usize;
                        if map.values()[qidx] < t && seg.labels[qidx] == 0 {
                            seg.labels[qidx] = label;
                            stack.push((qx as usize, qy as usize));
                        }
                    }
                }
            }
        }
    }
    seg
}

/// Priority-queue entry ordered by (map value, linear index); the heap is a
/// max-heap so entries are wrapped in `Reverse` by the caller.
#[derive(PartialEq)]
struct QItem {
    value: f32,
    idx: usize,
}

impl Eq for QItem {}

impl PartialOrd for QItem {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for QItem {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.value.total_cmp(&other.value).then(self.idx.cmp(&other.idx))
    }
}

/// Seeded watershed per z-slice. Seeds are connected components of
/// `{map < t_low}`; basins flood outward by repeatedly assigning the cheapest
/// unassigned 4-neighbor (priority queue on map value, ties by index) to the
/// adjacent basin whose touching pixel has the lowest map value. Pixels with
/// `map >= t_high` stay 0. Basins smaller than `min_size` merge into the
/// neighbor with the lowest saddle (the minimum over shared-boundary pixel
/// pairs of the larger of the two map values), smallest basins first, or
/// become 0 when they touch no other basin; `min_size == 0` skips merging.
pub fn watershed_2d(map: &Volume, t_low: f32, t_high: f32, min_size: usize) -> Result<Segmentation> {
    if !(0.0..=1.0).contains(&t_low) || !(0.0..=1.0).contains(&t_high) || t_low > t_high {
        return Err(Error::Config(format!(
            "watershed thresholds need 0 <= t_low <= t_high <= 1, got {t_low} / {t_high}"
        )));
    }
    let [nx, ny, nz] = map.dims();
    let vals = map.values();
    // seeds: components of the sub-threshold mask, labels unique across volume
    let mut seg = connected_components_2d(map, t_low);

    for z in 0..nz {
        let base = nx * ny * z;
        let mut heap: BinaryHeap<Reverse<QItem>> = BinaryHeap::new();
        let push_frontier =
            |heap: &mut BinaryHeap<Reverse<QItem>>, seg: &Segmentation, x: usize, y: usize| {
                for (dx, dy) in NEIGH4 {
                    let (qx, qy) = (x as isize + dx, y as isize + dy);
                    if qx < 0 || qy < 0 || qx >= nx as isize || qy >= ny as isize {
                        continue;
                    }
                    let qidx = base + qy as usize * nx + qx as usize;
                    if seg.labels[qidx] == 0 && vals[qidx] < t_high {
                        heap.push(Reverse(QItem { value: vals[qidx], idx: qidx }));
                    }
                }
            };
        for y in 0..ny {
            for x in 0..nx {
                if seg.labels[base + y * nx + x] != 0 {
                    push_frontier(&mut heap, &seg, x, y);
                }
            }
        }
        while let Some(Reverse(QItem { idx, .. })) = heap.pop() {
            if seg.labels[idx] != 0 {
                continue;
            }
            let (x, y) = ((idx - base) % nx, (idx - base) / nx);
            // adopt the basin of the assigned neighbor with the lowest value
            let mut best: Option<(f32, usize, u32)> = None;
            for (dx, dy) in NEIGH4 {
                let (qx, qy) = (x as isize + dx, y as isize + dy);
                if qx < 0 || qy < 0 || qx >= nx as isize || qy >= ny as isize {
                    continue;
                }
                let qidx = base + qy as usize * nx + qx as usize;
                let label = seg.labels[qidx];
                if label != 0 {
                    let cand = (vals[qidx], qidx, label);
                    if best.is_none()
                        || (cand.0, cand.1) < (best.unwrap().0, best.unwrap().1)
                    {
                        best = Some(cand);
                    }
                }
            }
            if let Some((_, _, label)) = best {
                seg.labels[idx] = label;
                push_frontier(&mut heap, &seg, x, y);
            }
        }

        if min_size > 0 {
            merge_small_basins(&mut seg, vals, nx, ny, base, min_size);
        }
    }
    Ok(seg)
}

/// One round of the small-basin merging rule, within one slice.
fn merge_small_basins(
    seg: &mut Segmentation,
    vals: &[f32],
    nx: usize,
    ny: usize,
    base: usize,
    min_size: usize,
) {
    loop {
        let mut sizes: HashMap<u32, usize> = HashMap::new();
        for y in 0..ny {
            for x in 0..nx {
                let l = seg.labels[base + y * nx + x];
                if l != 0 {
                    *sizes.entry(l).or_insert(0) += 1;
                }
            }
        }
        // smallest basin below min_size, ties to the lowest label
        let victim = sizes
            .iter()
            .filter(|(_, &s)| s < min_size)
            .map(|(&l, &s)| (s, l))
            .min();
        let Some((_, victim)) = victim else { break };

        // saddle per neighboring basin: min over boundary pairs of max(map)
        let mut saddle: HashMap<u32, f32> = HashMap::new();
        for y in 0..ny {
            for x in 0..nx {
                let idx = base + y * nx + x;
                if seg.labels[idx] != victim {
                    continue;
                }
                for (dx, dy) in NEIGH4 {
                    let (qx, qy) = (x as isize + dx, y as isize + dy);
                    if qx < 0 || qy < 0 || qx >= nx as isize || qy >= ny as isize {
                        continue;
                    }
                    let qidx = base + qy as usize * nx + qx as usize;
                    let other = seg.labels[qidx];
                    if other != 0 && other != victim {
                        let pair = vals[idx].max(vals[qidx]);
                        saddle
                            .entry(other)
                            .and_modify(|s| *s = s.min(pair))
                            .or_insert(pair);
                    }
                }
            }
        }
        let target = saddle
            .iter()
            .map(|(&l, &s)| (s, l))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, l)| l);
        let replacement = target.unwrap_or(0);
        for y in 0..ny {
            for x in 0..nx {
                let idx = base + y * nx + x;
                if seg.labels[idx] == victim {
                    seg.labels[idx] = replacement;
                }
            }
        }
    }
}

/// Rand merge/split scores and their harmonic mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RandScores {
    pub merge: f64,
    pub split: f64,
    pub f: f64,
}

/// Contingency-table Rand scores. Pixels labeled 0 in either volume are
/// excluded. `merge = sum n_ij^2 / sum_i (row_i)^2` (i over proposal
/// segments), `split = sum n_ij^2 / sum_j (col_j)^2` (j over truth segments),
/// `f` their harmonic mean.
pub fn rand_scores(proposal: &Segmentation, truth: &Segmentation) -> Result<RandScores> {
    if proposal.dims() != truth.dims() {
        return Err(Error::Shape(format!(
            "proposal dims {:?} != truth dims {:?}",
            proposal.dims(),
            truth.dims()
        )));
    }
    let mut cells: HashMap<(u32, u32), u64> = HashMap::new();
    for (&p, &t) in proposal.labels().iter().zip(truth.labels()) {
        if p != 0 && t != 0 {
            *cells.entry((p, t)).or_insert(0) += 1;
        }
    }
    if cells.is_empty() {
        return Err(Error::Numerical(
            "Rand score undefined: no pixels with nonzero labels in both volumes".into(),
        ));
    }
    let mut rows: HashMap<u32, u64> = HashMap::new();
    let mut cols: HashMap<u32, u64> = HashMap::new();
    let mut sum_sq = 0u64;
    for (&(p, t), &n) in &cells {
        sum_sq += n * n;
        *rows.entry(p).or_insert(0) += n;
        *cols.entry(t).or_insert(0) += n;
    }
    let row_sq: u64 = rows.values().map(|&r| r * r).sum();
    let col_sq: u64 = cols.values().map(|&c| c * c).sum();
    let merge = sum_sq as f64 / row_sq as f64;
    let split = sum_sq as f64 / col_sq as f64;
    let f = 2.0 * merge * split / (merge + split);
    Ok(RandScores { merge, split, f })
}

/// Parameters of one segmentation back-end invocation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SegParams {
    /// Threshold + 2D connected components.
    Cc { t: f32 },
    /// Seeded 2D watershed.
    Ws { t_low: f32, t_high: f32, min_size: usize },
}

impl SegParams {
    pub fn segment(&self, map: &Volume) -> Result<Segmentation> {
        match *self {
            SegParams::Cc { t } => Ok(connected_components_2d(map, t)),
            SegParams::Ws { t_low, t_high, min_size } => watershed_2d(map, t_low, t_high, min_size),
        }
    }

    /// The `param...` prefix of a curve line.
    pub fn param_text(&self) -> String {
        match *self {
            SegParams::Cc { t } => format!("{t:.2}"),
            SegParams::Ws { t_low, t_high, min_size } => {
                format!("{t_low:.2}, {t_high:.2}, {min_size}")
            }
        }
    }
}

/// One scored grid point of a precision-recall curve.
#[derive(Clone, Copy, Debug)]
pub struct CurvePoint {
    pub params: SegParams,
    pub scores: RandScores,
}

/// A Rand PR curve: points sorted by split score (split plays recall, merge
/// plays precision) plus any grid entries whose score was undefined.
#[derive(Clone, Debug)]
pub struct PrCurve {
    pub points: Vec<CurvePoint>,
    pub skipped: Vec<(SegParams, String)>,
}

impl PrCurve {
    /// Plot-ready text: one `param..., split, merge, f` line per point, with
    /// skipped grid entries as trailing `#` comments.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.points {
            out.push_str(&format!(
                "{}, {:.6}, {:.6}, {:.6}\n",
                p.params.param_text(),
                p.scores.split,
                p.scores.merge,
                p.scores.f
            ));
        }
        for (params, why) in &self.skipped {
            out.push_str(&format!("# skipped {}: {why}\n", params.param_text()));
        }
        out
    }
}

/// Segments `map` once per grid entry and scores against `truth`. Undefined
/// points (e.g. everything below threshold in one volume) are skipped and
/// noted. The curve is sorted by split score.
pub fn rand_pr_curve(map: &Volume, truth: &Segmentation, grid: &[SegParams]) -> Result<PrCurve> {
    if grid.is_empty() {
        return Err(Error::Config("empty parameter grid".into()));
    }
    let evaluated: Vec<(SegParams, Result<RandScores>)> = grid
        .par_iter()
        .map(|&p| {
            let scores = p.segment(map).and_then(|seg| rand_scores(&seg, truth));
            (p, scores)
        })
        .collect();
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for (params, r) in evaluated {
        match r {
            Ok(scores) => points.push(CurvePoint { params, scores }),
            Err(e) => skipped.push((params, e.to_string())),
        }
    }
    points.sort_by(|a, b| a.scores.split.total_cmp(&b.scores.split));
    Ok(PrCurve { points, skipped })
}

/// The grid point with the highest Rand F-score (first on ties, in grid
/// order). Errors if every point is undefined.
pub fn best_rand_f(
    map: &Volume,
    truth: &Segmentation,
    grid: &[SegParams],
) -> Result<(SegParams, RandScores)> {
    if grid.is_empty() {
        return Err(Error::Config("empty parameter grid".into()));
    }
    let evaluated: Vec<Option<(SegParams, RandScores)>> = grid
        .par_iter()
        .map(|&p| {
            p.segment(map)
                .and_then(|seg| rand_scores(&seg, truth))
                .ok()
                .map(|s| (p, s))
        })
        .collect();
    let mut best: Option<(SegParams, RandScores)> = None;
    for entry in evaluated.into_iter().flatten() {
        match &best {
            None => best = Some(entry),
            Some((_, s)) if entry.1.f > s.f => best = Some(entry),
            _ => {}
        }
    }
    best.ok_or_else(|| Error::Numerical("every grid point had an undefined Rand score".into()))
}
