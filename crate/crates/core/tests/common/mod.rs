//! Brute-force oracles shared by the integration tests. None of them call into the code
//! paths they check: connectivity is recomputed from scratch, costs are recomputed from
//! raw grid values and optima come from exhaustive enumeration.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rwass::ensemble::{Member, Preprocess};
use rwass::field::ScalarGrid;
use rwass::region::{Background, GroundParams, RegionAwarePair};
use rwass::topology::TreeKind;
use rwass::wasserstein::RegionBdt;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random grid of at most 4 x 4 x 4 vertices. Values come from a small integer set so that
/// ties are frequent.
pub fn random_small_grid(r: &mut ChaCha8Rng) -> ScalarGrid {
    let nd = r.gen_range(1..=3);
    let dims: Vec<usize> = (0..nd).map(|_| r.gen_range(1..=4)).collect();
    let n: usize = dims.iter().product();
    let levels = r.gen_range(2..=12);
    let values = (0..n).map(|_| r.gen_range(0..levels) as f64).collect();
    ScalarGrid::new(dims, values).unwrap()
}

pub fn random_grid(r: &mut ChaCha8Rng, dims: &[usize]) -> ScalarGrid {
    let n: usize = dims.iter().product();
    ScalarGrid::new(dims.to_vec(), (0..n).map(|_| r.gen::<f64>()).collect()).unwrap()
}

fn padded_coord(dims: &[usize], v: usize) -> [i64; 3] {
    let mut s = [1usize; 3];
    s[3 - dims.len()..].copy_from_slice(dims);
    [(v / (s[1] * s[2])) as i64, ((v / s[2]) % s[1]) as i64, (v % s[2]) as i64]
}

/// Freudenthal adjacency: the coordinate difference is a nonzero 0/1 vector or its negation.
pub fn adjacent(dims: &[usize], u: usize, v: usize) -> bool {
    if u == v {
        return false;
    }
    let (a, b) = (padded_coord(dims, u), padded_coord(dims, v));
    let d: Vec<i64> = (0..3).map(|k| b[k] - a[k]).collect();
    d.iter().all(|&x| x == 0 || x == 1) || d.iter().all(|&x| x == 0 || x == -1)
}

/// Sweep order by (value, index), reversed for split trees.
pub fn order(grid: &ScalarGrid, kind: TreeKind) -> Vec<usize> {
    let mut o: Vec<usize> = (0..grid.len()).collect();
    o.sort_by(|&a, &b| {
        grid.values()[a]
            .partial_cmp(&grid.values()[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    if kind == TreeKind::Split {
        o.reverse();
    }
    o
}

pub struct OracleDiagram {
    /// (extremum, saddle) with `None` for the surviving component.
    pub pairs: BTreeSet<(usize, Option<usize>)>,
    /// Extremum whose pair owns each vertex.
    pub owner: Vec<usize>,
}

/// Level-set connectivity recomputed by BFS after every insertion. The oldest vertex of a
/// component is its oldest extremum; at a merge every other component dies.
pub fn oracle_diagram(grid: &ScalarGrid, kind: TreeKind) -> OracleDiagram {
    let dims = grid.dims().to_vec();
    let n = grid.len();
    let ord = order(grid, kind);
    let mut rank = vec![0; n];
    for (i, &v) in ord.iter().enumerate() {
        rank[v] = i;
    }
    let component_root = |inset: &[bool], start: usize| -> usize {
        let mut seen = vec![false; n];
        let mut q = VecDeque::from([start]);
        seen[start] = true;
        let mut oldest = start;
        while let Some(u) = q.pop_front() {
            if rank[u] < rank[oldest] {
                oldest = u;
            }
            for w in 0..n {
                if inset[w] && !seen[w] && adjacent(&dims, u, w) {
                    seen[w] = true;
                    q.push_back(w);
                }
            }
        }
        oldest
    };
    let mut inset = vec![false; n];
    let mut pairs = BTreeSet::new();
    let mut owner = vec![usize::MAX; n];
    for &v in &ord {
        let mut roots: Vec<usize> = (0..n)
            .filter(|&u| inset[u] && adjacent(&dims, u, v))
            .map(|u| component_root(&inset, u))
            .collect();
        roots.sort_by_key(|&x| rank[x]);
        roots.dedup();
        for &dying in roots.iter().skip(1) {
            pairs.insert((dying, Some(v)));
        }
        inset[v] = true;
        owner[v] = component_root(&inset, v);
    }
    pairs.insert((ord[0], None));
    OracleDiagram { pairs, owner }
}

/// Extremum-aligned map of a region's kept members, rebuilt from grid coordinates.
fn offsets(a: &RegionAwarePair) -> HashMap<[i64; 3], f64> {
    let dims = a.source.dims().to_vec();
    let e = padded_coord(&dims, a.pair.extremum_vertex);
    a.vertices()
        .into_iter()
        .map(|v| {
            let c = padded_coord(&dims, v);
            let val = if v == a.pair.extremum_vertex { a.extremum_value } else { a.source.values()[v] };
            ([c[0] - e[0], c[1] - e[1], c[2] - e[2]], val)
        })
        .collect()
}

fn background(a: &RegionAwarePair, o: [i64; 3]) -> f64 {
    let dims = a.source.dims().to_vec();
    let e = padded_coord(&dims, a.pair.extremum_vertex);
    let mut s = [1usize; 3];
    s[3 - dims.len()..].copy_from_slice(&dims);
    let c = [e[0] + o[0], e[1] + o[1], e[2] + o[2]];
    if (0..3).all(|k| c[k] >= 0 && c[k] < s[k] as i64) {
        a.source.values()[((c[0] as usize) * s[1] + c[1] as usize) * s[2] + c[2] as usize]
    } else {
        0.0
    }
}

/// q-th power of the region-aware ground distance, evaluated over the union of offsets.
pub fn naive_ground_q(a: &RegionAwarePair, b: &RegionAwarePair, p: &GroundParams) -> f64 {
    let (ma, mb) = (offsets(a), offsets(b));
    let mut keys: Vec<[i64; 3]> = ma.keys().chain(mb.keys()).copied().collect();
    keys.sort();
    keys.dedup();
    let bg = |r: &RegionAwarePair, o| if p.background == Background::Data { background(r, o) } else { 0.0 };
    let mut c = (a.saddle_value - b.saddle_value).abs().powf(p.q);
    for o in keys {
        let fa = ma.get(&o).copied().unwrap_or_else(|| bg(a, o));
        let fb = mb.get(&o).copied().unwrap_or_else(|| bg(b, o));
        c += (fa - fb).abs().powf(p.q);
    }
    c
}

pub fn naive_projection_q(a: &RegionAwarePair, p: &GroundParams) -> f64 {
    let m = (a.extremum_value + a.saddle_value) / 2.0;
    offsets(a).values().map(|f| (f - m).abs().powf(p.q)).sum::<f64>() + (a.saddle_value - m).abs().powf(p.q)
}

/// Minimum over all permutations, each summed in row order.
pub fn brute_assignment(cost: &[Vec<f64>]) -> f64 {
    fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..cost.len() {
            if !used[j] {
                used[j] = true;
                rec(cost, row + 1, used, acc + cost[row][j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, 0, &mut vec![false; cost.len()], 0.0, &mut best);
    best
}

/// Exhaustive augmented-diagram optimum over partial injections from `a` into `b`, with
/// the global pairs (index 0 of each side when `forced`) matched to each other. Terms are
/// summed in ascending order.
pub fn brute_diagram_q(
    pair: &dyn Fn(usize, usize) -> f64,
    proj_a: &[f64],
    proj_b: &[f64],
    forced: bool,
) -> f64 {
    let start = usize::from(forced);
    let (na, nb) = (proj_a.len(), proj_b.len());
    let mut best = f64::INFINITY;
    let mut choice = vec![usize::MAX; na];
    fn rec(
        i: usize,
        choice: &mut Vec<usize>,
        used: &mut Vec<bool>,
        eval: &dyn Fn(&[usize], &[bool]) -> f64,
        start: usize,
        nb: usize,
        best: &mut f64,
    ) {
        if i == choice.len() {
            *best = best.min(eval(choice, used));
            return;
        }
        choice[i] = usize::MAX;
        rec(i + 1, choice, used, eval, start, nb, best);
        for j in start..nb {
            if !used[j] {
                used[j] = true;
                choice[i] = j;
                rec(i + 1, choice, used, eval, start, nb, best);
                used[j] = false;
            }
        }
    }
    let eval = |ch: &[usize], used: &[bool]| {
        let mut t = Vec::new();
        if forced {
            t.push(pair(0, 0));
        }
        for (i, &c) in ch.iter().enumerate().skip(start) {
            t.push(if c == usize::MAX { proj_a[i] } else { pair(i, c) });
        }
        for j in start..nb {
            if !used[j] {
                t.push(proj_b[j]);
            }
        }
        ascending_sum(t)
    };
    let mut used = vec![false; nb];
    if forced {
        used[0] = true;
        choice[0] = 0;
    }
    rec(start, &mut choice, &mut used, &eval, start, nb, &mut best);
    best
}

pub fn ascending_sum(mut t: Vec<f64>) -> f64 {
    t.sort_by(f64::total_cmp);
    t.into_iter().sum()
}

/// Classical q-Wasserstein distance between (birth, death) diagrams, each listing its
/// global pair first, by dynamic programming over subsets of the second diagram.
pub fn classical_wasserstein(a: &[(f64, f64)], b: &[(f64, f64)], q: f64) -> f64 {
    let d = |x: (f64, f64), y: (f64, f64)| (x.0 - y.0).abs().powf(q) + (x.1 - y.1).abs().powf(q);
    let diag = |x: (f64, f64)| 2.0 * ((x.1 - x.0) / 2.0).abs().powf(q);
    let (ra, rb) = (&a[1..], &b[1..]);
    let nb = rb.len();
    assert!(nb <= 16, "oracle limited to 16 target pairs");
    let full = 1usize << nb;
    // f[mask] after processing all rows so far = best cost with targets in mask used.
    let mut f = vec![f64::INFINITY; full];
    f[0] = 0.0;
    for &x in ra {
        let mut g = vec![f64::INFINITY; full];
        for mask in 0..full {
            if f[mask].is_infinite() {
                continue;
            }
            let del = f[mask] + diag(x);
            if del < g[mask] {
                g[mask] = del;
            }
            for j in 0..nb {
                if mask & (1 << j) == 0 {
                    let m2 = mask | (1 << j);
                    let c = f[mask] + d(x, rb[j]);
                    if c < g[m2] {
                        g[m2] = c;
                    }
                }
            }
        }
        f = g;
    }
    let mut best = f64::INFINITY;
    for mask in 0..full {
        let ins: f64 = (0..nb).filter(|j| mask & (1 << j) == 0).map(|j| diag(rb[j])).sum();
        best = best.min(f[mask] + ins);
    }
    (d(a[0], b[0]) + best).powf(1.0 / q)
}

/// Exhaustive minimum over rooted partial isomorphisms between two trees given by parent
/// arrays. Each candidate is costed with the same association as the dynamic program:
/// node cost plus the ascending sum of matched subtree costs and deleted or inserted
/// subtree sums.
pub fn brute_tree_q(
    pa: &[Option<usize>],
    pb: &[Option<usize>],
    node: &dyn Fn(usize, usize) -> f64,
    proj_a: &[f64],
    proj_b: &[f64],
) -> f64 {
    let kids = |p: &[Option<usize>]| {
        let mut c = vec![Vec::new(); p.len()];
        for (i, x) in p.iter().enumerate() {
            if let Some(x) = x {
                c[*x].push(i);
            }
        }
        c
    };
    let (ka, kb) = (kids(pa), kids(pb));
    let root_a = pa.iter().position(|p| p.is_none()).unwrap();
    let root_b = pb.iter().position(|p| p.is_none()).unwrap();
    fn sums(k: &[Vec<usize>], root: usize, proj: &[f64]) -> Vec<f64> {
        let mut s = proj.to_vec();
        fn go(v: usize, k: &[Vec<usize>], s: &mut Vec<f64>) {
            for &c in &k[v] {
                go(c, k, s);
            }
            for &c in &k[v] {
                let add = s[c];
                s[v] += add;
            }
        }
        go(root, k, &mut s);
        s
    }
    let (sa, sb) = (sums(&ka, root_a, proj_a), sums(&kb, root_b, proj_b));
    let na = pa.len();
    let mut phi = vec![usize::MAX; na];
    let mut best = f64::INFINITY;
    fn valid(phi: &[usize], pa: &[Option<usize>], pb: &[Option<usize>], ra: usize, rb: usize) -> bool {
        if phi[ra] != rb {
            return false;
        }
        let mut seen = BTreeSet::new();
        for (i, &t) in phi.iter().enumerate() {
            if t == usize::MAX {
                continue;
            }
            if !seen.insert(t) {
                return false;
            }
            if i != ra {
                match pa[i] {
                    Some(p) if phi[p] != usize::MAX && pb[t] == Some(phi[p]) => {}
                    _ => return false,
                }
            }
        }
        true
    }
    fn cost(
        i: usize,
        phi: &[usize],
        ka: &[Vec<usize>],
        kb: &[Vec<usize>],
        node: &dyn Fn(usize, usize) -> f64,
        sa: &[f64],
        sb: &[f64],
    ) -> f64 {
        let j = phi[i];
        let mut forest = Vec::new();
        for &c in &ka[i] {
            forest.push(if phi[c] == usize::MAX { sa[c] } else { cost(c, phi, ka, kb, node, sa, sb) });
        }
        for &c2 in &kb[j] {
            if !phi.contains(&c2) {
                forest.push(sb[c2]);
            }
        }
        node(i, j) + ascending_sum(forest)
    }
    fn rec(
        i: usize,
        phi: &mut Vec<usize>,
        nb: usize,
        check: &dyn Fn(&[usize]) -> Option<f64>,
        best: &mut f64,
    ) {
        if i == phi.len() {
            if let Some(c) = check(phi) {
                *best = best.min(c);
            }
            return;
        }
        for t in (0..nb).map(Some).chain(std::iter::once(None)) {
            phi[i] = t.unwrap_or(usize::MAX);
            rec(i + 1, phi, nb, check, best);
        }
    }
    let check = |phi: &[usize]| {
        valid(phi, pa, pb, root_a, root_b).then(|| cost(root_a, phi, &ka, &kb, node, &sa, &sb))
    };
    rec(0, &mut phi, pb.len(), &check, &mut best);
    best
}

/// Members of random 2D fields with the given preprocessing, all sharing one grid shape.
pub fn random_members(r: &mut ChaCha8Rng, count: usize, dims: &[usize], pre: &Preprocess) -> Vec<Member> {
    (0..count)
        .map(|_| Member::prepare(Arc::new(random_grid(r, dims)), pre).unwrap())
        .collect()
}

/// Random tree of `n` nodes over the given region-aware pairs: node 0 is the root.
pub fn random_tree(r: &mut ChaCha8Rng, nodes: Vec<RegionAwarePair>, eps1: f64) -> RegionBdt {
    let parent = (0..nodes.len())
        .map(|i| if i == 0 { None } else { Some(r.gen_range(0..i)) })
        .collect();
    RegionBdt {
        nodes,
        parent,
        root: 0,
        eps1,
    }
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}
