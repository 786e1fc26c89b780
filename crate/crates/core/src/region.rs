//! Region-aware pairs and the ground metrics between them.
//!
//! Regions are compared after aligning them at their extrema: a vertex at offset `o` from one
//! extremum faces the vertex at offset `o` from the other. All costs are returned as q-th
//! powers (`*_q` functions); the assignment layers sum these and take the q-th root once.

use std::sync::Arc;

use bitvec::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Coord, ScalarGrid};
use crate::topology::{Bdt, PersistencePair, Segmentation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    /// Missing values are 0.
    Null,
    /// Missing values are read from the other pair's source field (0 outside its domain).
    Data,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundMetric {
    /// Birth/death only.
    Classic,
    /// Birth/death plus weighted extremum position.
    Lifting,
    /// Birth/death plus weighted region volume.
    Volume,
    /// Saddle value plus aligned regional discrepancy.
    Region,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundParams {
    pub q: f64,
    pub lambda: f64,
    pub background: Background,
    pub w_l: f64,
    pub w_v: f64,
}

impl Default for GroundParams {
    fn default() -> Self {
        Self {
            q: 2.0,
            lambda: 0.1,
            background: Background::Null,
            w_l: 0.5,
            w_v: 0.2,
        }
    }
}

impl GroundParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.q >= 1.0 && self.q.is_finite()) {
            return Err(Error::InvalidParameter(format!("q must be a finite value >= 1 (got {})", self.q)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidParameter(format!("lambda must lie in [0, 1] (got {})", self.lambda)));
        }
        if !(self.w_l >= 0.0 && self.w_l.is_finite()) || !(self.w_v >= 0.0 && self.w_v.is_finite()) {
            return Err(Error::InvalidParameter("weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RegionAwarePair {
    pub pair: PersistencePair,
    pub extremum_coord: Coord,
    pub extremum_value: f64,
    pub saddle_value: f64,
    /// Inclusive bounds of the (unsubsampled) region.
    pub bbox_min: Coord,
    pub bbox_max: Coord,
    /// Membership of the full region over the bbox, row-major with the last axis fastest.
    /// Subsampling leaves it intact and filters lookups by `stride`.
    pub mask: BitVec,
    /// Values over the bbox; only entries under `mask` are meaningful.
    pub values: Vec<f64>,
    /// Local bbox indices of the kept members, ascending.
    pub members: Vec<usize>,
    /// Vertex count of the full region, unaffected by subsampling.
    pub volume: usize,
    pub stride: usize,
    pub source: Arc<ScalarGrid>,
}

impl PartialEq for RegionAwarePair {
    fn eq(&self, other: &Self) -> bool {
        self.pair == other.pair
            && self.extremum_coord == other.extremum_coord
            && self.extremum_value == other.extremum_value
            && self.saddle_value == other.saddle_value
            && self.bbox_min == other.bbox_min
            && self.bbox_max == other.bbox_max
            && self.mask == other.mask
            && self.members == other.members
            && self.members.iter().all(|&i| self.values[i] == other.values[i])
            && self.volume == other.volume
            && self.stride == other.stride
    }
}

impl RegionAwarePair {
    pub fn bbox_shape(&self) -> [usize; 3] {
        [0, 1, 2].map(|k| self.bbox_max[k] - self.bbox_min[k] + 1)
    }

    pub fn ndim(&self) -> usize {
        self.source.ndim()
    }

    /// Number of kept region vertices.
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn local_coord(&self, local: usize) -> Coord {
        let s = self.bbox_shape();
        [local / (s[1] * s[2]), (local / s[2]) % s[1], local % s[2]]
    }

    /// Offset of a local bbox index from the extremum.
    pub fn offset(&self, local: usize) -> [i64; 3] {
        let c = self.local_coord(local);
        [0, 1, 2].map(|k| (c[k] + self.bbox_min[k]) as i64 - self.extremum_coord[k] as i64)
    }

    /// Local index of the kept member at offset `o` from the extremum, if any.
    pub fn member_at(&self, o: [i64; 3]) -> Option<usize> {
        if self.stride > 1 && o.iter().any(|x| x.rem_euclid(self.stride as i64) != 0) {
            return None;
        }
        self.region_local(o)
    }

    fn region_local(&self, o: [i64; 3]) -> Option<usize> {
        let s = self.bbox_shape();
        let mut local = 0usize;
        for k in 0..3 {
            let c = self.extremum_coord[k] as i64 + o[k] - self.bbox_min[k] as i64;
            if c < 0 || c >= s[k] as i64 {
                return None;
            }
            local = local * s[k] + c as usize;
        }
        self.mask[local].then_some(local)
    }

    /// Kept members as (offset from extremum, value) in ascending local order.
    pub fn points(&self) -> impl Iterator<Item = ([i64; 3], f64)> + '_ {
        self.members.iter().map(|&l| (self.offset(l), self.values[l]))
    }

    /// Whether grid coordinate `c` belongs to the full (unsubsampled) region.
    pub fn contains(&self, c: Coord) -> bool {
        self.region_local([0, 1, 2].map(|k| c[k] as i64 - self.extremum_coord[k] as i64))
            .is_some()
    }

    /// Global vertex indices of the kept members.
    pub fn vertices(&self) -> Vec<usize> {
        self.members
            .iter()
            .map(|&l| {
                let c = self.local_coord(l);
                self.source.index([0, 1, 2].map(|k| c[k] + self.bbox_min[k]))
            })
            .collect()
    }

    fn background_at(&self, o: [i64; 3]) -> f64 {
        let c = [0, 1, 2].map(|k| self.extremum_coord[k] as i64 + o[k]);
        self.source.index_signed(c).map_or(0.0, |v| self.source.value(v))
    }

    /// Extremum position normalized by the domain bounds, per padded axis.
    pub fn normalized_coord(&self) -> [f64; 3] {
        let shape = self.source.shape();
        [0, 1, 2].map(|k| {
            if shape[k] > 1 {
                self.extremum_coord[k] as f64 / (shape[k] - 1) as f64
            } else {
                0.0
            }
        })
    }

    /// Region volume as a fraction of the domain.
    pub fn normalized_volume(&self) -> f64 {
        self.volume as f64 / self.source.len() as f64
    }

    /// Copy with the values of every member replaced from `grid`; extremum value kept exactly.
    pub fn with_values_from(&self, grid: &Arc<ScalarGrid>) -> Result<Self> {
        if grid.dims() != self.source.dims() {
            return Err(Error::Mismatch(format!(
                "value grid dims {:?} differ from region grid dims {:?}",
                grid.dims(),
                self.source.dims()
            )));
        }
        let mut out = self.clone();
        let s = self.bbox_shape();
        // Every region vertex is refreshed so later subsampling sees consistent values.
        for l in 0..self.mask.len() {
            if self.mask[l] {
                let c = [l / (s[1] * s[2]), (l / s[2]) % s[1], l % s[2]];
                out.values[l] = grid.value(grid.index([0, 1, 2].map(|k| c[k] + self.bbox_min[k])));
            }
        }
        if let Some(l) = out.member_at([0; 3]) {
            out.values[l] = self.extremum_value;
        }
        out.source = Arc::clone(grid);
        Ok(out)
    }
}

/// One region-aware pair per BDT node, in BDT node order.
pub fn make_region_aware(
    bdt: &Bdt,
    segmentation: &Segmentation,
    grid: &Arc<ScalarGrid>,
) -> Result<Vec<RegionAwarePair>> {
    let n = grid.len();
    let k = bdt.len();
    if segmentation.pair_of.len() != n {
        return Err(Error::Mismatch(format!(
            "segmentation covers {} vertices, grid has {n}",
            segmentation.pair_of.len()
        )));
    }
    let mut lo = vec![[usize::MAX; 3]; k];
    let mut hi = vec![[0usize; 3]; k];
    let mut volume = vec![0usize; k];
    for (v, &p) in segmentation.pair_of.iter().enumerate() {
        if p >= k {
            return Err(Error::Mismatch(format!("vertex {v} maps to pair {p}, BDT has {k} pairs")));
        }
        let c = grid.coord(v);
        for a in 0..3 {
            lo[p][a] = lo[p][a].min(c[a]);
            hi[p][a] = hi[p][a].max(c[a]);
        }
        volume[p] += 1;
    }
    let mut out: Vec<RegionAwarePair> = Vec::with_capacity(k);
    for (i, pair) in bdt.pairs.iter().enumerate() {
        if pair.id != i {
            return Err(Error::Inconsistent(format!("pair at position {i} carries id {}", pair.id)));
        }
        if volume[i] == 0 || segmentation.pair_of.get(pair.extremum_vertex) != Some(&i) {
            return Err(Error::Inconsistent(format!("pair {i}: extremum outside its region")));
        }
        if let Some(s) = pair.saddle_vertex {
            if segmentation.pair_of.get(s) == Some(&i) {
                return Err(Error::Inconsistent(format!("pair {i}: saddle inside its own region")));
            }
        }
        let shape = [0, 1, 2].map(|a| hi[i][a] - lo[i][a] + 1);
        let len = shape.iter().product();
        out.push(RegionAwarePair {
            pair: pair.clone(),
            extremum_coord: grid.coord(pair.extremum_vertex),
            extremum_value: pair.extremum_value(),
            saddle_value: pair.saddle_value(),
            bbox_min: lo[i],
            bbox_max: hi[i],
            mask: bitvec![0; len],
            values: vec![0.0; len],
            members: Vec::with_capacity(volume[i]),
            volume: volume[i],
            stride: 1,
            source: Arc::clone(grid),
        });
    }
    for (v, &p) in segmentation.pair_of.iter().enumerate() {
        let r = &mut out[p];
        let c = grid.coord(v);
        let s = [0, 1, 2].map(|a| r.bbox_max[a] - r.bbox_min[a] + 1);
        let l = ((c[0] - r.bbox_min[0]) * s[1] + (c[1] - r.bbox_min[1])) * s[2] + (c[2] - r.bbox_min[2]);
        r.mask.set(l, true);
        r.values[l] = if v == r.pair.extremum_vertex { r.extremum_value } else { grid.value(v) };
        r.members.push(l);
    }
    Ok(out)
}

/// Stride for subsampling parameter `lambda` on a domain whose largest extent is `m`.
pub fn stride_for(lambda: f64, m: usize) -> usize {
    ((lambda * m as f64 + 1.0).round() as usize).max(1)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Keeps the region vertices whose per-axis offsets from the extremum are multiples of the
/// stride. Repeated calls compose through the least common multiple of the strides.
pub fn subsample(pair: &RegionAwarePair, lambda: f64) -> Result<RegionAwarePair> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!("lambda must lie in [0, 1] (got {lambda})")));
    }
    let n = stride_for(lambda, pair.source.max_extent());
    let stride = pair.stride / gcd(pair.stride, n) * n;
    let mut out = pair.clone();
    if stride == pair.stride {
        return Ok(out);
    }
    out.stride = stride;
    out.members.clear();
    for &l in &pair.members {
        let o = pair.offset(l);
        if o.iter().all(|x| x.rem_euclid(stride as i64) == 0) {
            out.members.push(l);
        }
    }
    Ok(out)
}

pub fn subsample_all(pairs: &[RegionAwarePair], lambda: f64) -> Result<Vec<RegionAwarePair>> {
    pairs.iter().map(|p| subsample(p, lambda)).collect()
}

fn check_compatible(a: &RegionAwarePair, b: &RegionAwarePair) -> Result<()> {
    if a.stride != b.stride {
        return Err(Error::Mismatch(format!("stride {} vs {}", a.stride, b.stride)));
    }
    if a.ndim() != b.ndim() {
        return Err(Error::Mismatch(format!("{}D vs {}D regions", a.ndim(), b.ndim())));
    }
    Ok(())
}

/// q-th power of the region-aware ground distance. Terms are summed in ascending offset
/// order over the union of both regions, so swapping the arguments gives the same bits.
pub fn ground_cost_q(a: &RegionAwarePair, b: &RegionAwarePair, params: &GroundParams) -> Result<f64> {
    check_compatible(a, b)?;
    let q = params.q;
    let data = params.background == Background::Data;
    let missing = |r: &RegionAwarePair, o| if data { r.background_at(o) } else { 0.0 };
    let mut c = (a.saddle_value - b.saddle_value).abs().powf(q);
    let (mut ia, mut ib) = (a.members.iter().peekable(), b.members.iter().peekable());
    loop {
        let (fa, fb) = match (ia.peek(), ib.peek()) {
            (None, None) => break,
            (Some(&&la), None) => {
                ia.next();
                (a.values[la], missing(b, a.offset(la)))
            }
            (None, Some(&&lb)) => {
                ib.next();
                (missing(a, b.offset(lb)), b.values[lb])
            }
            (Some(&&la), Some(&&lb)) => {
                let (oa, ob) = (a.offset(la), b.offset(lb));
                match oa.cmp(&ob) {
                    std::cmp::Ordering::Less => {
                        ia.next();
                        (a.values[la], missing(b, oa))
                    }
                    std::cmp::Ordering::Greater => {
                        ib.next();
                        (missing(a, ob), b.values[lb])
                    }
                    std::cmp::Ordering::Equal => {
                        ia.next();
                        ib.next();
                        (a.values[la], b.values[lb])
                    }
                }
            }
        };
        c += (fa - fb).abs().powf(q);
    }
    Ok(c)
}

pub fn ground_distance(a: &RegionAwarePair, b: &RegionAwarePair, params: &GroundParams) -> Result<f64> {
    Ok(ground_cost_q(a, b, params)?.powf(1.0 / params.q))
}

/// q-th power of the cost of moving `a` to its region-aware diagonal projection: the same
/// region carrying the constant `(e + s) / 2`, with that value as saddle.
pub fn projection_cost_q(a: &RegionAwarePair, params: &GroundParams) -> f64 {
    let q = params.q;
    let m = 0.5 * (a.saddle_value + a.extremum_value);
    let mut c = (a.saddle_value - m).abs().powf(q);
    for &l in &a.members {
        c += (a.values[l] - m).abs().powf(q);
    }
    c
}

pub fn projection_cost(a: &RegionAwarePair, params: &GroundParams) -> f64 {
    projection_cost_q(a, params).powf(1.0 / params.q)
}

fn classical_q(a: &PersistencePair, b: &PersistencePair, q: f64) -> f64 {
    (a.birth - b.birth).abs().powf(q) + (a.death - b.death).abs().powf(q)
}

fn classical_diagonal_q(a: &PersistencePair, q: f64) -> f64 {
    let m = 0.5 * (a.birth + a.death);
    (a.birth - m).abs().powf(q) + (a.death - m).abs().powf(q)
}

/// q-th power of the lifting ground metric on normalized extremum coordinates.
pub fn lifting_cost_q(a: &RegionAwarePair, b: &RegionAwarePair, params: &GroundParams) -> f64 {
    let (xa, xb) = (a.normalized_coord(), b.normalized_coord());
    let geo: f64 = (0..3).map(|k| (xa[k] - xb[k]).abs().powf(params.q)).sum();
    classical_q(&a.pair, &b.pair, params.q) + params.w_l * geo
}

pub fn lifting_ground(a: &RegionAwarePair, b: &RegionAwarePair, params: &GroundParams) -> f64 {
    lifting_cost_q(a, b, params).powf(1.0 / params.q)
}

/// q-th power of the volume ground metric on normalized region volumes.
pub fn volume_cost_q(a: &RegionAwarePair, b: &RegionAwarePair, params: &GroundParams) -> f64 {
    let dv = (a.normalized_volume() - b.normalized_volume()).abs().powf(params.q);
    classical_q(&a.pair, &b.pair, params.q) + params.w_v * dv
}

pub fn volume_ground(a: &RegionAwarePair, b: &RegionAwarePair, params: &GroundParams) -> f64 {
    volume_cost_q(a, b, params).powf(1.0 / params.q)
}

impl GroundMetric {
    /// q-th power of the pair-to-pair cost.
    pub fn cost_q(self, a: &RegionAwarePair, b: &RegionAwarePair, params: &GroundParams) -> Result<f64> {
        Ok(match self {
            GroundMetric::Classic => classical_q(&a.pair, &b.pair, params.q),
            GroundMetric::Lifting => lifting_cost_q(a, b, params),
            GroundMetric::Volume => volume_cost_q(a, b, params),
            GroundMetric::Region => ground_cost_q(a, b, params)?,
        })
    }

    /// q-th power of the pair-to-diagonal cost. The lifting and volume metrics keep the
    /// classical diagonal, since the projected point carries no geometry of its own.
    pub fn projection_q(self, a: &RegionAwarePair, params: &GroundParams) -> f64 {
        match self {
            GroundMetric::Region => projection_cost_q(a, params),
            _ => classical_diagonal_q(&a.pair, params.q),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionExport {
    #[serde(flatten)]
    pub pair: PersistencePair,
    pub extremum_coord: Coord,
    pub bbox: [Coord; 2],
    pub stride: usize,
    pub volume: usize,
    /// Alternating run lengths over the bbox, starting with a run of non-members.
    pub mask_rle: Vec<usize>,
}

impl From<&RegionAwarePair> for RegionExport {
    fn from(r: &RegionAwarePair) -> Self {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0;
        for bit in r.mask.iter().by_vals() {
            if bit == current {
                len += 1;
            } else {
                runs.push(len);
                current = bit;
                len = 1;
            }
        }
        runs.push(len);
        RegionExport {
            pair: r.pair.clone(),
            extremum_coord: r.extremum_coord,
            bbox: [r.bbox_min, r.bbox_max],
            stride: r.stride,
            volume: r.volume,
            mask_rle: runs,
        }
    }
}
