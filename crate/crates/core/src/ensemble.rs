//! Ensemble products: member preparation, distance matrices, classical MDS, clustering
//! scores, feature tracking and temporal persistence curves.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ScalarGrid;
use crate::region::{make_region_aware, subsample};
use crate::topology::{
    build_bdt, compute_merge_tree, saddle_merge, simplify, simplify_tree, MergeTree, PersistencePair, Segmentation,
    TreeKind,
};
use crate::wasserstein::{wasserstein_bdt, wasserstein_diagrams, DistanceParams, Endpoint, Matching, RegionBdt};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub kind: TreeKind,
    /// Persistence threshold as a fraction of the data range.
    pub simplify: f64,
    pub eps1: f64,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            kind: TreeKind::Split,
            simplify: 0.005,
            eps1: 0.05,
        }
    }
}

/// One field with its simplified topology and full-resolution region-aware BDT.
#[derive(Debug, Clone)]
pub struct Member {
    pub grid: Arc<ScalarGrid>,
    pub tree: MergeTree,
    pub pairs: Vec<PersistencePair>,
    pub segmentation: Segmentation,
    pub bdt: RegionBdt,
    pub preprocess: Preprocess,
}

impl Member {
    pub fn prepare(grid: Arc<ScalarGrid>, pre: &Preprocess) -> Result<Self> {
        let topo = compute_merge_tree(&grid, pre.kind);
        let (pairs, segmentation) = simplify(&topo.pairs, &topo.segmentation, pre.simplify)?;
        let tree = simplify_tree(&topo.tree, &pairs)?;
        Self::from_parts(grid, tree, pairs, segmentation, pre)
    }

    /// Rebuilds a member from stored topology; region values come from `grid`, while
    /// extremum and saddle values come from `pairs`.
    pub fn from_parts(
        grid: Arc<ScalarGrid>,
        tree: MergeTree,
        pairs: Vec<PersistencePair>,
        segmentation: Segmentation,
        pre: &Preprocess,
    ) -> Result<Self> {
        let bdt = build_bdt(&tree, &pairs)?;
        let merged = saddle_merge(&bdt, &tree, pre.eps1)?;
        let regions = make_region_aware(&merged, &segmentation, &grid)?;
        let bdt = RegionBdt::new(&merged, regions, pre.eps1)?;
        Ok(Self {
            grid,
            tree,
            pairs,
            segmentation,
            bdt,
            preprocess: *pre,
        })
    }

    /// The region-aware BDT subsampled with `lambda`.
    pub fn view(&self, lambda: f64) -> Result<RegionBdt> {
        self.bdt.map_nodes(|r| subsample(r, lambda))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    Diagram,
    #[serde(rename = "mergetree")]
    MergeTree,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub rep: Representation,
    pub params: DistanceParams,
}

impl Default for Method {
    fn default() -> Self {
        Self {
            rep: Representation::MergeTree,
            params: DistanceParams::default(),
        }
    }
}

/// Distance between two already subsampled region-aware BDTs.
pub fn distance(a: &RegionBdt, b: &RegionBdt, method: &Method) -> Result<(f64, Matching)> {
    match method.rep {
        Representation::Diagram => wasserstein_diagrams(&a.nodes, &b.nodes, &method.params),
        Representation::MergeTree => wasserstein_bdt(a, b, &method.params),
    }
}

/// Single scalar from the split and join distances of the same two members.
pub fn combine_kinds(split: f64, join: f64, q: f64) -> f64 {
    (split.powf(q) + join.powf(q)).powf(1.0 / q)
}

pub fn views(members: &[Member], lambda: f64) -> Result<Vec<RegionBdt>> {
    members.par_iter().map(|m| m.view(lambda)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub n: usize,
    /// Row-major n x n entries.
    pub entries: Vec<f64>,
    pub method: Method,
    pub eps1: f64,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| format!("{:.12e}", self.get(i, j))).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    /// Parses the CSV written by [`DistanceMatrix::to_csv`].
    pub fn from_csv(text: &str, method: Method, eps1: f64) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
        let mut entries = Vec::new();
        let mut n = 0;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
            n += 1;
            for f in rec.iter() {
                entries.push(f.trim().parse::<f64>().map_err(|e| Error::Csv(format!("{f:?}: {e}")))?);
            }
        }
        if entries.len() != n * n {
            return Err(Error::Csv(format!("{} entries do not form a square matrix", entries.len())));
        }
        Ok(Self { n, entries, method, eps1 })
    }
}

/// All pairwise distances, evaluated in parallel. Entries do not depend on the schedule.
pub fn distance_matrix(members: &[RegionBdt], method: &Method) -> Result<DistanceMatrix> {
    let n = members.len();
    if let Some(first) = members.first() {
        for m in members {
            if m.eps1 != first.eps1 {
                return Err(Error::Mismatch("members built with different eps1".into()));
            }
            if let (Some(a), Some(b)) = (m.nodes.first(), first.nodes.first()) {
                if a.stride != b.stride || a.source.dims() != b.source.dims() {
                    return Err(Error::Mismatch("members differ in dims or subsampling".into()));
                }
            }
        }
    }
    let jobs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let values: Vec<f64> = jobs
        .par_iter()
        .map(|&(i, j)| distance(&members[i], &members[j], method).map(|r| r.0))
        .collect::<Result<_>>()?;
    let mut entries = vec![0.0; n * n];
    for (&(i, j), &d) in jobs.iter().zip(&values) {
        entries[i * n + j] = d;
        entries[j * n + i] = d;
    }
    Ok(DistanceMatrix {
        n,
        entries,
        method: *method,
        eps1: members.first().map_or(0.0, |m| m.eps1),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    /// One row of `dim` coordinates per member.
    pub coords: Vec<Vec<f64>>,
    /// All eigenvalues of the double-centered matrix, descending.
    pub eigenvalues: Vec<f64>,
}

impl Embedding {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("member,u,v\n");
        for (i, c) in self.coords.iter().enumerate() {
            let u = c.first().copied().unwrap_or(0.0);
            let v = c.get(1).copied().unwrap_or(0.0);
            let _ = writeln!(s, "{i},{u:.12e},{v:.12e}");
        }
        s
    }
}

/// Classical (Torgerson) MDS. Fewer members than `dim + 1` yield zero-padded coordinates.
pub fn mds_embed(matrix: &DistanceMatrix, dim: usize) -> Embedding {
    let n = matrix.n;
    if n == 0 {
        return Embedding {
            coords: Vec::new(),
            eigenvalues: Vec::new(),
        };
    }
    let d2 = DMatrix::from_fn(n, n, |i, j| matrix.get(i, j).powi(2));
    let row_mean: Vec<f64> = (0..n).map(|i| d2.row(i).mean()).collect();
    let all_mean = d2.mean();
    let b = DMatrix::from_fn(n, n, |i, j| -0.5 * (d2[(i, j)] - row_mean[i] - row_mean[j] + all_mean));
    let eig = b.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]).then(x.cmp(&y)));
    let mut coords = vec![vec![0.0; dim]; n];
    for (k, &col) in order.iter().take(dim).enumerate() {
        let scale = eig.eigenvalues[col].max(0.0).sqrt();
        let v = eig.eigenvectors.column(col);
        let mut lead = 0;
        for i in 1..n {
            if v[i].abs() > v[lead].abs() {
                lead = i;
            }
        }
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            coords[i][k] = sign * v[i] * scale;
        }
    }
    Embedding {
        coords,
        eigenvalues: order.iter().map(|&c| eig.eigenvalues[c]).collect(),
    }
}

/// Lloyd's k-means with farthest-point seeding from the point farthest from the centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize) -> Vec<usize> {
    let n = points.len();
    if n == 0 || k == 0 {
        return vec![0; n];
    }
    let dim = points[0].len();
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let centroid: Vec<f64> = (0..dim).map(|d| points.iter().map(|p| p[d]).sum::<f64>() / n as f64).collect();
    let argmax = |f: &dyn Fn(usize) -> f64| (0..n).fold(0, |best, i| if f(i) > f(best) { i } else { best });
    let mut centers: Vec<Vec<f64>> = vec![points[argmax(&|i| dist2(&points[i], &centroid))].clone()];
    while centers.len() < k.min(n) {
        let next = argmax(&|i| {
            centers
                .iter()
                .map(|c| dist2(&points[i], c))
                .fold(f64::INFINITY, f64::min)
        });
        centers.push(points[next].clone());
    }
    let mut labels = vec![usize::MAX; n];
    for _ in 0..100 {
        let new: Vec<usize> = points
            .iter()
            .map(|p| {
                (0..centers.len()).fold(0, |best, c| if dist2(p, &centers[c]) < dist2(p, &centers[best]) { c } else { best })
            })
            .collect();
        if new == labels {
            break;
        }
        labels = new;
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            if !members.is_empty() {
                for d in 0..dim {
                    center[d] = members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64;
                }
            }
        }
    }
    labels
}

fn contingency<T: Ord + Clone>(a: &[T], b: &[T]) -> Result<(Vec<Vec<f64>>, usize)> {
    if a.len() != b.len() {
        return Err(Error::Mismatch(format!("label lists of length {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::InvalidParameter("empty label lists".into()));
    }
    let index = |xs: &[T]| {
        let mut u: Vec<T> = xs.to_vec();
        u.sort();
        u.dedup();
        xs.iter().map(|x| u.binary_search(x).unwrap()).collect::<Vec<_>>()
    };
    let (ia, ib) = (index(a), index(b));
    let ka = ia.iter().max().unwrap() + 1;
    let kb = ib.iter().max().unwrap() + 1;
    let mut t = vec![vec![0.0; kb]; ka];
    for (x, y) in ia.iter().zip(&ib) {
        t[*x][*y] += 1.0;
    }
    Ok((t, a.len()))
}

/// Normalized mutual information, `2 I / (H_a + H_b)`; 1 when both entropies vanish.
pub fn nmi<T: Ord + Clone>(a: &[T], b: &[T]) -> Result<f64> {
    let (t, n) = contingency(a, b)?;
    let n = n as f64;
    let rows: Vec<f64> = t.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..t[0].len()).map(|j| t.iter().map(|r| r[j]).sum()).collect();
    let h = |m: &[f64]| -m.iter().filter(|&&x| x > 0.0).map(|&x| x / n * (x / n).ln()).sum::<f64>();
    let (ha, hb) = (h(&rows), h(&cols));
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (i, r) in t.iter().enumerate() {
        for (j, &nij) in r.iter().enumerate() {
            if nij > 0.0 {
                mi += nij / n * (n * nij / (rows[i] * cols[j])).ln();
            }
        }
    }
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

/// Adjusted Rand index; 1 when the index equals its maximum and its expectation.
pub fn ari<T: Ord + Clone>(a: &[T], b: &[T]) -> Result<f64> {
    let (t, n) = contingency(a, b)?;
    let c2 = |x: f64| x * (x - 1.0) / 2.0;
    let index: f64 = t.iter().flatten().map(|&x| c2(x)).sum();
    let sa: f64 = t.iter().map(|r| c2(r.iter().sum())).sum();
    let sb: f64 = (0..t[0].len()).map(|j| c2(t.iter().map(|r| r[j]).sum())).sum();
    let expected = sa * sb / c2(n as f64).max(f64::MIN_POSITIVE);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: usize,
    pub start: usize,
    /// Pair id at steps `start`, `start + 1`, ...
    pub pairs: Vec<usize>,
}

impl Track {
    pub fn end(&self) -> usize {
        self.start + self.pairs.len() - 1
    }

    pub fn pair_at(&self, step: usize) -> Option<usize> {
        step.checked_sub(self.start).and_then(|k| self.pairs.get(k).copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    /// `track` ended at `step - 1`; its extremum lies in `other`'s region at `step`.
    Merge,
    /// `track` started at `step`; its extremum lies in `other`'s region at `step - 1`.
    Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackEvent {
    pub step: usize,
    pub kind: EventKind,
    pub track: usize,
    pub other: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingGraph {
    pub steps: usize,
    /// Matching between steps `t` and `t + 1`.
    pub matchings: Vec<Matching>,
    pub tracks: Vec<Track>,
    pub events: Vec<TrackEvent>,
}

fn region_owner(tree: &RegionBdt, c: crate::field::Coord) -> Option<usize> {
    tree.nodes.iter().position(|r| r.contains(c))
}

pub fn track(sequence: &[RegionBdt], method: &Method) -> Result<TrackingGraph> {
    if sequence.len() < 2 {
        return Err(Error::InvalidParameter("tracking needs at least two steps".into()));
    }
    let matchings: Vec<Matching> = (0..sequence.len() - 1)
        .into_par_iter()
        .map(|t| distance(&sequence[t], &sequence[t + 1], method).map(|r| r.1))
        .collect::<Result<_>>()?;

    let mut tracks: Vec<Track> = Vec::new();
    let mut track_of: Vec<usize> = (0..sequence[0].len()).collect();
    for p in 0..sequence[0].len() {
        tracks.push(Track {
            id: p,
            start: 0,
            pairs: vec![p],
        });
    }
    for (t, m) in matchings.iter().enumerate() {
        let mut next = vec![usize::MAX; sequence[t + 1].len()];
        for (s, d) in m.pair_edges() {
            let id = track_of[s];
            tracks[id].pairs.push(d);
            next[d] = id;
        }
        for (d, slot) in next.iter_mut().enumerate() {
            if *slot == usize::MAX {
                *slot = tracks.len();
                tracks.push(Track {
                    id: tracks.len(),
                    start: t + 1,
                    pairs: vec![d],
                });
            }
        }
        track_of = next;
    }

    let mut events = Vec::new();
    for (t, m) in matchings.iter().enumerate() {
        let (cur, nxt) = (&sequence[t], &sequence[t + 1]);
        let track_at = |step: usize, pair: usize| {
            tracks.iter().position(|tr| tr.pair_at(step) == Some(pair))
        };
        for e in &m.edges {
            match (e.source, e.target) {
                (Endpoint::Pair(s), Endpoint::Diagonal) => {
                    let c = cur.nodes[s].extremum_coord;
                    if let (Some(tr), Some(owner)) = (track_at(t, s), region_owner(nxt, c)) {
                        if let Some(other) = track_at(t + 1, owner) {
                            events.push(TrackEvent { step: t + 1, kind: EventKind::Merge, track: tr, other });
                        }
                    }
                }
                (Endpoint::Diagonal, Endpoint::Pair(d)) => {
                    let c = nxt.nodes[d].extremum_coord;
                    if let (Some(tr), Some(owner)) = (track_at(t + 1, d), region_owner(cur, c)) {
                        if let Some(other) = track_at(t, owner) {
                            if tracks[other].end() > t {
                                events.push(TrackEvent { step: t + 1, kind: EventKind::Split, track: tr, other });
                            }
                        }
                    }
                }
                _ => {}
            }
        }
    }
    events.sort_by_key(|e| (e.step, e.track));
    Ok(TrackingGraph {
        steps: sequence.len(),
        matchings,
        tracks,
        events,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub track_id: usize,
    pub step: usize,
    pub persistence: f64,
    /// Extremum grid coordinates; `x` is the fastest axis, missing axes are 0.
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

/// Per-track persistence over time, optionally restricted to the `topk` tracks with the
/// highest peak persistence.
pub fn persistence_curves(graph: &TrackingGraph, sequence: &[RegionBdt], topk: Option<usize>) -> Vec<CurveRow> {
    let mut keep: Vec<usize> = (0..graph.tracks.len()).collect();
    if let Some(k) = topk {
        let peak = |tr: &Track| {
            tr.pairs
                .iter()
                .enumerate()
                .map(|(i, &p)| sequence[tr.start + i].nodes[p].pair.persistence())
                .fold(f64::NEG_INFINITY, f64::max)
        };
        keep.sort_by(|&a, &b| peak(&graph.tracks[b]).total_cmp(&peak(&graph.tracks[a])).then(a.cmp(&b)));
        keep.truncate(k);
        keep.sort();
    }
    let mut rows = Vec::new();
    for id in keep {
        let tr = &graph.tracks[id];
        for (i, &p) in tr.pairs.iter().enumerate() {
            let r = &sequence[tr.start + i].nodes[p];
            let c = r.extremum_coord;
            rows.push(CurveRow {
                track_id: tr.id,
                step: tr.start + i,
                persistence: r.pair.persistence(),
                x: c[2],
                y: c[1],
                z: c[0],
            });
        }
    }
    rows
}

pub fn curves_to_csv(rows: &[CurveRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Csv(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Csv(e.to_string()))
}

/// Static line chart of persistence against time step, one polyline per track.
pub fn curves_to_svg(rows: &[CurveRow], steps: usize) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let pmax = rows.iter().map(|r| r.persistence).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let sx = |s: usize| pad + (w - 2.0 * pad) * s as f64 / (steps.max(2) - 1) as f64;
    let sy = |p: f64| h - pad - (h - 2.0 * pad) * p / pmax;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <text x=\"{xm}\" y=\"{yl}\" font-size=\"12\" text-anchor=\"middle\">time step</text>\n\
         <text x=\"12\" y=\"{ym}\" font-size=\"12\" transform=\"rotate(-90 12 {ym})\" text-anchor=\"middle\">persistence (max {pmax:.4})</text>\n",
        y0 = h - pad,
        x1 = w - pad,
        xm = w / 2.0,
        yl = h - 8.0,
        ym = h / 2.0,
    );
    let mut ids: Vec<usize> = rows.iter().map(|r| r.track_id).collect();
    ids.dedup();
    for (k, id) in ids.iter().enumerate() {
        let hue = (k * 137) % 360;
        let pts: Vec<String> = rows
            .iter()
            .filter(|r| r.track_id == *id)
            .map(|r| format!("{:.1},{:.1}", sx(r.step), sy(r.persistence)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"hsl({hue},70%,40%)\" stroke-width=\"1.5\" points=\"{}\"><title>track {id}</title></polyline>",
            pts.join(" ")
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Distance between each pair of consecutive steps.
pub fn consecutive_distance_curve(sequence: &[RegionBdt], method: &Method) -> Result<Vec<f64>> {
    if sequence.len() < 2 {
        return Err(Error::InvalidParameter("need at least two steps".into()));
    }
    (0..sequence.len() - 1)
        .into_par_iter()
        .map(|t| distance(&sequence[t], &sequence[t + 1], method).map(|r| r.0))
        .collect()
}
