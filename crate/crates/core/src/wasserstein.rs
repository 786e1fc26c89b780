//! Wasserstein distances between sets of region-aware pairs and between region-aware BDTs.
//!
//! Both distances reduce to assignment problems over q-th powers of ground costs. Diagram
//! distances solve one augmented assignment; the tree distance runs a dynamic program over
//! rooted partial isomorphisms whose child forests are matched with local assignments.
//! When both inputs carry a global pair, the two global pairs are always matched to each
//! other, exactly as the two roots are in the tree distance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::{GroundMetric, GroundParams, RegionAwarePair};
use crate::topology::{children_of, Bdt};

/// Solves a square assignment problem with `+inf` marking forbidden cells.
/// Returns `col_of_row`. Ties resolve towards lower column indices.
pub(crate) fn assign(n: usize, cost: &[f64]) -> Result<Vec<usize>> {
    debug_assert_eq!(cost.len(), n * n);
    if n == 0 {
        return Ok(Vec::new());
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.fill(inf);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            if j1 == 0 {
                return Err(Error::Inconsistent("assignment problem has no finite solution".into()));
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        col_of_row[p[j] - 1] = j - 1;
    }
    Ok(col_of_row)
}

/// Exact minimum-cost perfect matching of a square, finite cost matrix.
/// The total sums the chosen entries in row order.
pub fn solve_assignment(cost: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    let n = cost.len();
    let mut flat = Vec::with_capacity(n * n);
    for (i, row) in cost.iter().enumerate() {
        if row.len() != n {
            return Err(Error::InvalidParameter(format!(
                "cost matrix is not square: row {i} has {} entries, expected {n}",
                row.len()
            )));
        }
        if let Some(j) = row.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite cost at ({i}, {j})")));
        }
        flat.extend_from_slice(row);
    }
    let perm = assign(n, &flat)?;
    let total = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok((perm, total))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    Pair(usize),
    Diagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchEdge {
    pub source: Endpoint,
    pub target: Endpoint,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// Source-side edges in source order, then insertions in target order.
    pub edges: Vec<MatchEdge>,
    pub total: f64,
}

impl Matching {
    /// Target matched to source pair `i`, if it is matched off the diagonal.
    pub fn target_of(&self, i: usize) -> Option<usize> {
        self.edges.iter().find_map(|e| match (e.source, e.target) {
            (Endpoint::Pair(s), Endpoint::Pair(t)) if s == i => Some(t),
            _ => None,
        })
    }

    pub fn pair_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().filter_map(|e| match (e.source, e.target) {
            (Endpoint::Pair(s), Endpoint::Pair(t)) => Some((s, t)),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceParams {
    pub metric: GroundMetric,
    pub ground: GroundParams,
}

impl Default for DistanceParams {
    fn default() -> Self {
        Self {
            metric: GroundMetric::Region,
            ground: GroundParams::default(),
        }
    }
}

fn check_inputs(a: &[RegionAwarePair], b: &[RegionAwarePair], params: &DistanceParams) -> Result<()> {
    params.ground.validate()?;
    let mut all = a.iter().chain(b.iter());
    if let Some(first) = all.next() {
        for r in all {
            if r.pair.kind != first.pair.kind {
                return Err(Error::Mismatch(format!("pair kinds {:?} and {:?}", first.pair.kind, r.pair.kind)));
            }
            if r.stride != first.stride {
                return Err(Error::Mismatch(format!("strides {} and {}", first.stride, r.stride)));
            }
            if r.ndim() != first.ndim() {
                return Err(Error::Mismatch(format!("{}D and {}D inputs", first.ndim(), r.ndim())));
            }
        }
    }
    Ok(())
}

/// Sum in ascending order, so the same multiset of terms always gives the same bits.
fn sorted_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.into_iter().sum()
}

fn root_of(pairs: &[RegionAwarePair]) -> Option<usize> {
    pairs.iter().position(|p| p.pair.is_global())
}

/// Region-aware (or baseline, per `params.metric`) Wasserstein distance between two diagrams.
pub fn wasserstein_diagrams(
    a: &[RegionAwarePair],
    b: &[RegionAwarePair],
    params: &DistanceParams,
) -> Result<(f64, Matching)> {
    check_inputs(a, b, params)?;
    let g = &params.ground;
    let m = params.metric;
    let q = g.q;
    let forced = match (root_of(a), root_of(b)) {
        (Some(i), Some(j)) => Some((i, j)),
        _ => None,
    };
    let rows: Vec<usize> = (0..a.len()).filter(|&i| forced.is_none_or(|f| f.0 != i)).collect();
    let cols: Vec<usize> = (0..b.len()).filter(|&j| forced.is_none_or(|f| f.1 != j)).collect();
    let (na, nb) = (rows.len(), cols.len());
    let n = na + nb;
    let mut cost = vec![0.0; n * n];
    for (r, &i) in rows.iter().enumerate() {
        for (c, &j) in cols.iter().enumerate() {
            cost[r * n + c] = m.cost_q(&a[i], &b[j], g)?;
        }
        for c in 0..na {
            cost[r * n + nb + c] = f64::INFINITY;
        }
        cost[r * n + nb + r] = m.projection_q(&a[i], g);
    }
    for (c, &j) in cols.iter().enumerate() {
        let r = na + c;
        for cc in 0..nb {
            cost[r * n + cc] = f64::INFINITY;
        }
        cost[r * n + c] = m.projection_q(&b[j], g);
    }
    let perm = assign(n, &cost)?;

    let mut edges = Vec::with_capacity(n);
    let mut terms = Vec::with_capacity(n + 1);
    let mut src: Vec<(usize, Endpoint, f64)> = Vec::with_capacity(a.len());
    if let Some((i, j)) = forced {
        let c = m.cost_q(&a[i], &b[j], g)?;
        terms.push(c);
        src.push((i, Endpoint::Pair(j), c));
    }
    for (r, &i) in rows.iter().enumerate() {
        let c = cost[r * n + perm[r]];
        terms.push(c);
        let target = if perm[r] < nb { Endpoint::Pair(cols[perm[r]]) } else { Endpoint::Diagonal };
        src.push((i, target, c));
    }
    src.sort_by_key(|e| e.0);
    for (i, target, c) in src {
        edges.push(MatchEdge {
            source: Endpoint::Pair(i),
            target,
            cost: c.powf(1.0 / q),
        });
    }
    for (c, &j) in cols.iter().enumerate() {
        let r = na + c;
        // An insertion row either takes its own target column or an idle deletion slot.
        if perm[r] >= nb {
            continue;
        }
        let cc = cost[r * n + perm[r]];
        terms.push(cc);
        edges.push(MatchEdge {
            source: Endpoint::Diagonal,
            target: Endpoint::Pair(j),
            cost: cc.powf(1.0 / q),
        });
    }
    let total = sorted_sum(terms).powf(1.0 / q);
    Ok((total, Matching { edges, total }))
}

/// A branch decomposition tree whose nodes are region-aware pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionBdt {
    pub nodes: Vec<RegionAwarePair>,
    pub parent: Vec<Option<usize>>,
    pub root: usize,
    /// Saddle-merge parameter the hierarchy was built with.
    pub eps1: f64,
}

impl RegionBdt {
    pub fn new(bdt: &Bdt, nodes: Vec<RegionAwarePair>, eps1: f64) -> Result<Self> {
        if nodes.len() != bdt.len() {
            return Err(Error::Mismatch(format!("{} regions for {} BDT nodes", nodes.len(), bdt.len())));
        }
        Ok(Self {
            nodes,
            parent: bdt.parent.clone(),
            root: bdt.root,
            eps1,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn children(&self) -> Vec<Vec<usize>> {
        children_of(&self.parent)
    }

    pub fn map_nodes(&self, f: impl Fn(&RegionAwarePair) -> Result<RegionAwarePair>) -> Result<Self> {
        Ok(Self {
            nodes: self.nodes.iter().map(f).collect::<Result<_>>()?,
            parent: self.parent.clone(),
            root: self.root,
            eps1: self.eps1,
        })
    }
}

struct TreeDp<'a> {
    a: &'a RegionBdt,
    b: &'a RegionBdt,
    ca: Vec<Vec<usize>>,
    cb: Vec<Vec<usize>>,
    del_a: Vec<f64>,
    del_b: Vec<f64>,
    proj_a: Vec<f64>,
    proj_b: Vec<f64>,
    d: Vec<f64>,
    params: &'a DistanceParams,
}

/// q-th power cost of removing every subtree, post-order sums of node costs.
fn subtree_sums(children: &[Vec<usize>], root: usize, node_cost: &[f64]) -> Vec<f64> {
    let mut sums = node_cost.to_vec();
    if node_cost.is_empty() {
        return sums;
    }
    let mut order = vec![root];
    let mut k = 0;
    while k < order.len() {
        order.extend_from_slice(&children[order[k]]);
        k += 1;
    }
    for &v in order.iter().rev() {
        for &c in &children[v] {
            sums[v] += sums[c];
        }
    }
    sums
}

impl<'a> TreeDp<'a> {
    fn new(a: &'a RegionBdt, b: &'a RegionBdt, params: &'a DistanceParams) -> Self {
        let g = &params.ground;
        let proj_a: Vec<f64> = a.nodes.iter().map(|r| params.metric.projection_q(r, g)).collect();
        let proj_b: Vec<f64> = b.nodes.iter().map(|r| params.metric.projection_q(r, g)).collect();
        let ca = a.children();
        let cb = b.children();
        let del_a = subtree_sums(&ca, a.root, &proj_a);
        let del_b = subtree_sums(&cb, b.root, &proj_b);
        Self {
            a,
            b,
            ca,
            cb,
            del_a,
            del_b,
            proj_a,
            proj_b,
            d: vec![f64::NAN; a.len() * b.len()],
            params,
        }
    }

    fn forest_cost_matrix(&self, ka: &[usize], kb: &[usize]) -> (usize, Vec<f64>) {
        let (na, nb) = (ka.len(), kb.len());
        let n = na + nb;
        let nbl = self.b.len();
        let mut cost = vec![0.0; n * n];
        for (r, &c) in ka.iter().enumerate() {
            for (s, &c2) in kb.iter().enumerate() {
                cost[r * n + s] = self.d[c * nbl + c2];
            }
            for s in 0..na {
                cost[r * n + nb + s] = f64::INFINITY;
            }
            cost[r * n + nb + r] = self.del_a[c];
        }
        for (s, &c2) in kb.iter().enumerate() {
            let r = na + s;
            for t in 0..nb {
                cost[r * n + t] = f64::INFINITY;
            }
            cost[r * n + s] = self.del_b[c2];
        }
        (n, cost)
    }

    fn forest(&self, i: usize, j: usize) -> Result<(f64, Vec<usize>)> {
        let (n, cost) = self.forest_cost_matrix(&self.ca[i], &self.cb[j]);
        let perm = assign(n, &cost)?;
        let total = sorted_sum(perm.iter().enumerate().map(|(r, &c)| cost[r * n + c]).collect());
        Ok((total, perm))
    }

    fn run(&mut self) -> Result<f64> {
        let nbl = self.b.len();
        // Every node pair reachable from the roots by descending both trees in lockstep.
        let mut order = vec![(self.a.root, self.b.root)];
        let mut k = 0;
        while k < order.len() {
            let (i, j) = order[k];
            for &c in &self.ca[i] {
                for &c2 in &self.cb[j] {
                    order.push((c, c2));
                }
            }
            k += 1;
        }
        for &(i, j) in order.iter().rev() {
            let node = self
                .params
                .metric
                .cost_q(&self.a.nodes[i], &self.b.nodes[j], &self.params.ground)?;
            let (forest, _) = self.forest(i, j)?;
            self.d[i * nbl + j] = node + forest;
        }
        Ok(self.d[self.a.root * nbl + self.b.root])
    }

    fn delete_subtree(&self, root: usize, edges: &mut Vec<(usize, Endpoint, f64)>) {
        let mut stack = vec![root];
        while let Some(v) = stack.pop() {
            edges.push((v, Endpoint::Diagonal, self.proj_a[v]));
            stack.extend_from_slice(&self.ca[v]);
        }
    }

    fn insert_subtree(&self, root: usize, edges: &mut Vec<(usize, f64)>) {
        let mut stack = vec![root];
        while let Some(v) = stack.pop() {
            edges.push((v, self.proj_b[v]));
            stack.extend_from_slice(&self.cb[v]);
        }
    }

    fn matching(&self, q: f64, total: f64) -> Result<Matching> {
        let mut src: Vec<(usize, Endpoint, f64)> = Vec::new();
        let mut ins: Vec<(usize, f64)> = Vec::new();
        let mut stack = vec![(self.a.root, self.b.root)];
        while let Some((i, j)) = stack.pop() {
            let node = self
                .params
                .metric
                .cost_q(&self.a.nodes[i], &self.b.nodes[j], &self.params.ground)?;
            src.push((i, Endpoint::Pair(j), node));
            let (ka, kb) = (&self.ca[i], &self.cb[j]);
            let (_, perm) = self.forest(i, j)?;
            for (r, &c) in ka.iter().enumerate() {
                if perm[r] < kb.len() {
                    stack.push((c, kb[perm[r]]));
                } else {
                    self.delete_subtree(c, &mut src);
                }
            }
            for (s, &c2) in kb.iter().enumerate() {
                if perm[ka.len() + s] < kb.len() {
                    self.insert_subtree(c2, &mut ins);
                }
            }
        }
        Ok(assemble(src, ins, q, total))
    }
}

fn assemble(mut src: Vec<(usize, Endpoint, f64)>, mut ins: Vec<(usize, f64)>, q: f64, total: f64) -> Matching {
    src.sort_by_key(|e| e.0);
    ins.sort_by_key(|e| e.0);
    let mut edges: Vec<MatchEdge> = src
        .into_iter()
        .map(|(i, t, c)| MatchEdge {
            source: Endpoint::Pair(i),
            target: t,
            cost: c.powf(1.0 / q),
        })
        .collect();
    edges.extend(ins.into_iter().map(|(j, c)| MatchEdge {
        source: Endpoint::Diagonal,
        target: Endpoint::Pair(j),
        cost: c.powf(1.0 / q),
    }));
    Matching { edges, total }
}

/// Region-aware Wasserstein distance between two BDTs, restricted to rooted partial
/// isomorphisms: matched nodes keep their parent relation and the two roots are matched.
pub fn wasserstein_bdt(a: &RegionBdt, b: &RegionBdt, params: &DistanceParams) -> Result<(f64, Matching)> {
    if a.eps1 != b.eps1 {
        return Err(Error::Mismatch(format!("BDTs preprocessed with eps1 {} and {}", a.eps1, b.eps1)));
    }
    check_inputs(&a.nodes, &b.nodes, params)?;
    let q = params.ground.q;
    if a.is_empty() || b.is_empty() {
        let g = &params.ground;
        let mut terms = Vec::new();
        let mut src = Vec::new();
        let mut ins = Vec::new();
        for (i, r) in a.nodes.iter().enumerate() {
            let c = params.metric.projection_q(r, g);
            terms.push(c);
            src.push((i, Endpoint::Diagonal, c));
        }
        for (j, r) in b.nodes.iter().enumerate() {
            let c = params.metric.projection_q(r, g);
            terms.push(c);
            ins.push((j, c));
        }
        let total = sorted_sum(terms).powf(1.0 / q);
        return Ok((total, assemble(src, ins, q, total)));
    }
    let mut dp = TreeDp::new(a, b, params);
    let total = dp.run()?.powf(1.0 / q);
    let matching = dp.matching(q, total)?;
    Ok((total, matching))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::field::ScalarGrid;
    use crate::region::make_region_aware;
    use crate::topology::{build_bdt, compute_merge_tree, saddle_merge, TreeKind};

    fn tree_of(values: &[f64], eps1: f64) -> RegionBdt {
        let grid = Arc::new(ScalarGrid::new(vec![values.len()], values.to_vec()).unwrap());
        let topo = compute_merge_tree(&grid, TreeKind::Split);
        let bdt = build_bdt(&topo.tree, &topo.pairs).unwrap();
        let merged = saddle_merge(&bdt, &topo.tree, eps1).unwrap();
        let regions = make_region_aware(&merged, &topo.segmentation, &grid).unwrap();
        RegionBdt::new(&merged, regions, eps1).unwrap()
    }

    #[test]
    fn assignment_small_cases() {
        let (p, c) = solve_assignment(&[vec![0.0, 9.0], vec![9.0, 0.0]]).unwrap();
        assert_eq!((p, c), (vec![0, 1], 0.0));
        let (p, c) = solve_assignment(&[vec![4.0, 1.0], vec![2.0, 3.0]]).unwrap();
        assert_eq!((p, c), (vec![1, 0], 3.0));
        assert_eq!(solve_assignment(&[]).unwrap(), (vec![], 0.0));
        assert!(solve_assignment(&[vec![1.0, 2.0]]).is_err());
        assert!(solve_assignment(&[vec![f64::NAN]]).is_err());
    }

    #[test]
    fn assignment_ties_are_deterministic() {
        let (p, _) = solve_assignment(&[vec![1.0; 3], vec![1.0; 3], vec![1.0; 3]]).unwrap();
        let (p2, _) = solve_assignment(&[vec![1.0; 3], vec![1.0; 3], vec![1.0; 3]]).unwrap();
        assert_eq!(p, p2);
    }

    #[test]
    fn forbidden_cells_are_avoided() {
        let inf = f64::INFINITY;
        let p = assign(2, &[inf, 5.0, 1.0, inf]).unwrap();
        assert_eq!(p, vec![1, 0]);
        assert!(assign(1, &[inf]).is_err());
    }

    #[test]
    fn self_distance_is_zero() {
        let t = tree_of(&[0.0, 3.0, 1.0, 2.0, 0.5, 2.5, 0.2], 0.0);
        let p = DistanceParams::default();
        let (d, m) = wasserstein_diagrams(&t.nodes, &t.nodes, &p).unwrap();
        assert_eq!(d, 0.0);
        assert!(m.pair_edges().all(|(s, t)| s == t));
        let (d, m) = wasserstein_bdt(&t, &t, &p).unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(m.pair_edges().count(), t.len());
    }

    #[test]
    fn deletion_against_empty() {
        let t = tree_of(&[0.0, 3.0, 1.0, 2.0], 0.0);
        let p = DistanceParams::default();
        let one = &t.nodes[1..];
        let (d, m) = wasserstein_diagrams(one, &[], &p).unwrap();
        let expect = crate::region::projection_cost(&one[0], &p.ground);
        assert!((d - expect).abs() < 1e-15);
        assert_eq!(m.edges.len(), 1);
        assert_eq!(m.edges[0].target, Endpoint::Diagonal);
    }

    #[test]
    fn flat_trees_match_diagrams() {
        let p = DistanceParams::default();
        let a = tree_of(&[0.0, 3.0, 1.0, 2.0, 0.5, 2.5, 0.2, 1.7, 0.1], 1.0);
        let b = tree_of(&[0.3, 2.0, 0.4, 3.1, 1.1, 1.9, 0.0], 1.0);
        let (dt, mt) = wasserstein_bdt(&a, &b, &p).unwrap();
        let (dd, _) = wasserstein_diagrams(&a.nodes, &b.nodes, &p).unwrap();
        assert!((dt - dd).abs() <= 1e-12 * dd.max(1.0));
        let s: f64 = mt.edges.iter().map(|e| e.cost.powi(2)).sum();
        assert!((s - dt * dt).abs() <= 1e-9 * s.max(1.0));
    }

    #[test]
    fn eps1_mismatch_rejected() {
        let a = tree_of(&[0.0, 3.0, 1.0, 2.0], 0.0);
        let b = tree_of(&[0.0, 3.0, 1.0, 2.0], 1.0);
        assert!(matches!(
            wasserstein_bdt(&a, &b, &DistanceParams::default()),
            Err(Error::Mismatch(_))
        ));
    }

    #[test]
    fn tree_distance_dominates_diagram_distance() {
        // Restricting matchings can only raise the optimum.
        let p = DistanceParams::default();
        let a = tree_of(&[10.0, 4.9, 9.0, 5.0, 8.0, 0.0], 0.0);
        let b = tree_of(&[10.0, 5.0, 8.0, 4.9, 9.0, 0.0], 0.0);
        let (dt, _) = wasserstein_bdt(&a, &b, &p).unwrap();
        let (dd, _) = wasserstein_diagrams(&a.nodes, &b.nodes, &p).unwrap();
        assert!(dt >= dd);
    }
}
