//! Merge trees, extremum persistence pairs and branch decomposition trees.
//!
//! [`compute_merge_tree`] sweeps the vertices of a grid in the perturbed vertex order and
//! tracks connected components of the sublevel (join) or superlevel (split) sets with a
//! union-find. A component is born at each extremum. When a vertex connects several
//! components, all but the oldest die there and each dying component yields a
//! [`PersistencePair`] (elder rule). Every vertex is assigned to the pair of the component
//! it joins when it is processed; a merging vertex goes to the surviving component. The
//! resulting [`Segmentation`] partitions the domain into one region per pair.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ScalarGrid;

/// Which level sets the sweep follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreeKind {
    /// Sublevel sets, ascending sweep; leaves are minima.
    Join,
    /// Superlevel sets, descending sweep; leaves are maxima.
    Split,
}

impl TreeKind {
    pub fn pair_kind(self) -> PairKind {
        match self {
            TreeKind::Join => PairKind::MinSaddle,
            TreeKind::Split => PairKind::SaddleMax,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairKind {
    MinSaddle,
    SaddleMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistencePair {
    pub id: usize,
    pub kind: PairKind,
    pub extremum_vertex: usize,
    /// `None` for the global pair, whose death is cropped to the opposite global extremum.
    pub saddle_vertex: Option<usize>,
    pub birth: f64,
    pub death: f64,
    /// The pair whose component absorbed this one at its saddle.
    pub merged_into: Option<usize>,
}

impl PersistencePair {
    pub fn persistence(&self) -> f64 {
        self.death - self.birth
    }

    pub fn extremum_value(&self) -> f64 {
        match self.kind {
            PairKind::MinSaddle => self.birth,
            PairKind::SaddleMax => self.death,
        }
    }

    pub fn saddle_value(&self) -> f64 {
        match self.kind {
            PairKind::MinSaddle => self.death,
            PairKind::SaddleMax => self.birth,
        }
    }

    pub fn is_global(&self) -> bool {
        self.saddle_vertex.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Extremum,
    Saddle,
    /// A regular vertex closing the tree at the opposite global extremum.
    Root,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub vertex: usize,
    pub value: f64,
    pub kind: NodeKind,
    pub parent: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeTree {
    pub kind: TreeKind,
    pub nodes: Vec<TreeNode>,
    pub root: usize,
}

impl MergeTree {
    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut ch = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            if let Some(p) = n.parent {
                ch[p].push(i);
            }
        }
        ch
    }

    pub fn node_of_vertex(&self) -> HashMap<usize, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.vertex, i)).collect()
    }
}

/// Vertex-to-pair map; the regions it induces partition the domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    pub pair_of: Vec<usize>,
}

impl Segmentation {
    pub fn region_sizes(&self, n_pairs: usize) -> Vec<usize> {
        let mut sizes = vec![0; n_pairs];
        for &p in &self.pair_of {
            sizes[p] += 1;
        }
        sizes
    }

    pub fn regions(&self, n_pairs: usize) -> Vec<Vec<usize>> {
        let mut regions = vec![Vec::new(); n_pairs];
        for (v, &p) in self.pair_of.iter().enumerate() {
            regions[p].push(v);
        }
        regions
    }
}

/// Output of one sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub tree: MergeTree,
    pub pairs: Vec<PersistencePair>,
    pub segmentation: Segmentation,
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let next = self.parent[x];
            self.parent[x] = root;
            x = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) -> usize {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return ra;
        }
        let (big, small) = if self.size[ra] >= self.size[rb] { (ra, rb) } else { (rb, ra) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        big
    }
}

/// Sweep order of the vertices: ascending for join trees, descending for split trees.
pub fn sweep_order(grid: &ScalarGrid, kind: TreeKind) -> Vec<usize> {
    let mut order = grid.sorted_vertices();
    if kind == TreeKind::Split {
        order.reverse();
    }
    order
}

pub fn compute_merge_tree(grid: &ScalarGrid, kind: TreeKind) -> Topology {
    let n = grid.len();
    let order = sweep_order(grid, kind);
    let mut rank = vec![0usize; n];
    for (r, &v) in order.iter().enumerate() {
        rank[v] = r;
    }

    let mut uf = UnionFind::new(n);
    let mut processed = vec![false; n];
    // Per union-find root: oldest extremum of the component and its lowest tree node.
    let mut comp_ext = vec![usize::MAX; n];
    let mut comp_head = vec![usize::MAX; n];
    let mut owner_ext = vec![usize::MAX; n];
    let mut nodes: Vec<TreeNode> = Vec::new();
    // (extremum, saddle, survivor extremum) in death order.
    let mut deaths: Vec<(usize, usize, usize)> = Vec::new();
    let mut roots: Vec<usize> = Vec::with_capacity(14);

    for &v in &order {
        processed[v] = true;
        roots.clear();
        grid.for_each_neighbor(v, |u| {
            if processed[u] {
                let r = uf.find(u);
                if !roots.contains(&r) {
                    roots.push(r);
                }
            }
        });
        match roots.len() {
            0 => {
                let id = nodes.len();
                nodes.push(TreeNode {
                    vertex: v,
                    value: grid.value(v),
                    kind: NodeKind::Extremum,
                    parent: None,
                });
                comp_ext[v] = v;
                comp_head[v] = id;
                owner_ext[v] = v;
            }
            1 => {
                let r = roots[0];
                let ext = comp_ext[r];
                let head = comp_head[r];
                let nr = uf.union(r, v);
                comp_ext[nr] = ext;
                comp_head[nr] = head;
                owner_ext[v] = ext;
            }
            _ => {
                roots.sort_by_key(|&r| rank[comp_ext[r]]);
                let survivor = comp_ext[roots[0]];
                let id = nodes.len();
                nodes.push(TreeNode {
                    vertex: v,
                    value: grid.value(v),
                    kind: NodeKind::Saddle,
                    parent: None,
                });
                for &r in roots.iter() {
                    nodes[comp_head[r]].parent = Some(id);
                }
                for &r in roots.iter().skip(1) {
                    deaths.push((comp_ext[r], v, survivor));
                }
                let mut nr = v;
                for &r in roots.iter() {
                    nr = uf.union(nr, r);
                }
                comp_ext[nr] = survivor;
                comp_head[nr] = id;
                owner_ext[v] = survivor;
            }
        }
    }

    let last = *order.last().expect("grids have at least one vertex");
    let last_root = uf.find(last);
    let global_ext = comp_ext[last_root];
    let head = comp_head[last_root];
    let root = if nodes[head].vertex == last {
        head
    } else {
        let id = nodes.len();
        nodes.push(TreeNode {
            vertex: last,
            value: grid.value(last),
            kind: NodeKind::Root,
            parent: None,
        });
        nodes[head].parent = Some(id);
        id
    };

    let pair_kind = kind.pair_kind();
    let make = |id: usize, ext: usize, saddle: Option<usize>, merged_into: Option<usize>| {
        let e = grid.value(ext);
        let s = grid.value(saddle.unwrap_or(last));
        let (birth, death) = match pair_kind {
            PairKind::MinSaddle => (e, s),
            PairKind::SaddleMax => (s, e),
        };
        PersistencePair {
            id,
            kind: pair_kind,
            extremum_vertex: ext,
            saddle_vertex: saddle,
            birth,
            death,
            merged_into,
        }
    };

    let mut id_of_ext: HashMap<usize, usize> = HashMap::with_capacity(deaths.len() + 1);
    id_of_ext.insert(global_ext, 0);
    for (i, &(ext, _, _)) in deaths.iter().enumerate() {
        id_of_ext.insert(ext, i + 1);
    }
    let mut pairs = Vec::with_capacity(deaths.len() + 1);
    pairs.push(make(0, global_ext, None, None));
    for (i, &(ext, saddle, survivor)) in deaths.iter().enumerate() {
        pairs.push(make(i + 1, ext, Some(saddle), Some(id_of_ext[&survivor])));
    }
    let pair_of = owner_ext.iter().map(|e| id_of_ext[e]).collect();

    Topology {
        tree: MergeTree { kind, nodes, root },
        pairs,
        segmentation: Segmentation { pair_of },
    }
}

/// Removes pairs whose persistence is below `threshold_ratio` times the data range and hands
/// their regions to the nearest surviving pair they merged into. Pair ids are compacted.
pub fn simplify(
    pairs: &[PersistencePair],
    segmentation: &Segmentation,
    threshold_ratio: f64,
) -> Result<(Vec<PersistencePair>, Segmentation)> {
    if !(0.0..=1.0).contains(&threshold_ratio) {
        return Err(Error::InvalidParameter(format!(
            "simplification threshold must lie in [0, 1] (got {threshold_ratio})"
        )));
    }
    let range = data_range(pairs)?;
    let cutoff = threshold_ratio * range;
    let keep: Vec<bool> = pairs
        .iter()
        .map(|p| p.is_global() || p.persistence() >= cutoff)
        .collect();

    let mut new_id = vec![usize::MAX; pairs.len()];
    let mut next = 0;
    for (i, &k) in keep.iter().enumerate() {
        if k {
            new_id[i] = next;
            next += 1;
        }
    }
    // Resolve each pair to its nearest kept ancestor along the merged-into chain.
    let mut target = vec![usize::MAX; pairs.len()];
    for i in 0..pairs.len() {
        let mut j = i;
        let mut steps = 0;
        while !keep[j] {
            j = pairs[j]
                .merged_into
                .ok_or_else(|| Error::Inconsistent(format!("pair {j} has no parent")))?;
            steps += 1;
            if steps > pairs.len() {
                return Err(Error::Inconsistent("cycle in merged-into links".into()));
            }
        }
        target[i] = new_id[j];
    }

    let kept = pairs
        .iter()
        .enumerate()
        .filter(|(i, _)| keep[*i])
        .map(|(_, p)| {
            let mut q = p.clone();
            q.id = new_id[p.id];
            q.merged_into = p.merged_into.map(|m| target[m]);
            q
        })
        .collect();
    let pair_of = segmentation
        .pair_of
        .iter()
        .map(|&p| target.get(p).copied().ok_or_else(|| Error::Inconsistent(format!("unknown pair {p}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((kept, Segmentation { pair_of }))
}

/// Drops the tree nodes that no longer carry a kept pair: leaves of removed pairs, nodes
/// without surviving leaves below them and saddles left with a single surviving child.
pub fn simplify_tree(tree: &MergeTree, kept: &[PersistencePair]) -> Result<MergeTree> {
    let node_of = tree.node_of_vertex();
    let n = tree.nodes.len();
    let mut alive_leaf = vec![false; n];
    for p in kept {
        let id = *node_of
            .get(&p.extremum_vertex)
            .ok_or_else(|| Error::Inconsistent(format!("no tree node for extremum {}", p.extremum_vertex)))?;
        alive_leaf[id] = true;
    }
    let children = tree.children();
    // Post-order via explicit stack.
    let mut alive = vec![false; n];
    let mut alive_children = vec![0usize; n];
    let mut stack = vec![(tree.root, false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            alive[v] = alive_leaf[v] || alive_children[v] > 0;
            if alive[v] {
                if let Some(p) = tree.nodes[v].parent {
                    alive_children[p] += 1;
                }
            }
        } else {
            stack.push((v, true));
            for &c in &children[v] {
                stack.push((c, false));
            }
        }
    }
    let keep: Vec<bool> = (0..n)
        .map(|v| v == tree.root || alive_leaf[v] || (alive[v] && alive_children[v] >= 2))
        .collect();
    let mut new_id = vec![usize::MAX; n];
    let mut nodes = Vec::new();
    for v in 0..n {
        if keep[v] {
            new_id[v] = nodes.len();
            nodes.push(tree.nodes[v].clone());
        }
    }
    for v in 0..n {
        if !keep[v] {
            continue;
        }
        let mut p = tree.nodes[v].parent;
        while let Some(u) = p {
            if keep[u] {
                break;
            }
            p = tree.nodes[u].parent;
        }
        nodes[new_id[v]].parent = p.map(|u| new_id[u]);
    }
    Ok(MergeTree {
        kind: tree.kind,
        nodes,
        root: new_id[tree.root],
    })
}

/// Data range, read off the global pair (whose persistence spans the whole range).
pub fn data_range(pairs: &[PersistencePair]) -> Result<f64> {
    pairs
        .iter()
        .find(|p| p.is_global())
        .map(|p| p.persistence())
        .ok_or_else(|| Error::Inconsistent("no global pair".into()))
}

/// Branch decomposition tree: one node per persistence pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bdt {
    pub pairs: Vec<PersistencePair>,
    pub parent: Vec<Option<usize>>,
    pub root: usize,
}

impl Bdt {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn children(&self) -> Vec<Vec<usize>> {
        children_of(&self.parent)
    }

    pub fn depth(&self) -> usize {
        depths(&self.parent).into_iter().max().unwrap_or(0)
    }

    /// Every non-root node hangs directly off the root.
    pub fn flattened(&self) -> Bdt {
        let parent = (0..self.len())
            .map(|i| if i == self.root { None } else { Some(self.root) })
            .collect();
        Bdt {
            pairs: self.pairs.clone(),
            parent,
            root: self.root,
        }
    }
}

pub(crate) fn children_of(parent: &[Option<usize>]) -> Vec<Vec<usize>> {
    let mut ch = vec![Vec::new(); parent.len()];
    for (i, p) in parent.iter().enumerate() {
        if let Some(p) = p {
            ch[*p].push(i);
        }
    }
    ch
}

pub(crate) fn depths(parent: &[Option<usize>]) -> Vec<usize> {
    let mut depth = vec![usize::MAX; parent.len()];
    for i in 0..parent.len() {
        let mut chain = vec![i];
        let mut cur = i;
        while depth[cur] == usize::MAX {
            match parent[cur] {
                Some(p) if chain.len() <= parent.len() => {
                    chain.push(p);
                    cur = p;
                }
                _ => {
                    depth[cur] = 0;
                    break;
                }
            }
        }
        let mut d = depth[cur];
        for &v in chain.iter().rev().skip(1) {
            d += 1;
            depth[v] = d;
        }
    }
    depth
}

/// For every tree node, the pair whose persistent branch continues upward through it.
/// A pair's saddle node is owned by the branch it merged into, not by the pair itself.
fn branch_owners(tree: &MergeTree, pairs: &[PersistencePair]) -> Result<(Vec<Option<usize>>, HashMap<usize, usize>)> {
    let node_of = tree.node_of_vertex();
    let mut owner = vec![None; tree.nodes.len()];
    for (i, p) in pairs.iter().enumerate() {
        let mut cur = *node_of
            .get(&p.extremum_vertex)
            .ok_or_else(|| Error::Inconsistent(format!("pair {i}: extremum {} is not a tree node", p.extremum_vertex)))?;
        let mut steps = 0;
        loop {
            if Some(tree.nodes[cur].vertex) == p.saddle_vertex {
                break;
            }
            if let Some(o) = owner[cur] {
                return Err(Error::Inconsistent(format!(
                    "tree node {cur} lies on the branches of pairs {o} and {i}"
                )));
            }
            owner[cur] = Some(i);
            match tree.nodes[cur].parent {
                Some(next) => cur = next,
                None if p.is_global() => break,
                None => {
                    return Err(Error::Inconsistent(format!(
                        "pair {i}: saddle vertex {:?} not found above its extremum",
                        p.saddle_vertex
                    )))
                }
            }
            steps += 1;
            if steps > tree.nodes.len() {
                return Err(Error::Inconsistent("cycle in merge tree".into()));
            }
        }
    }
    Ok((owner, node_of))
}

/// Pair `i` becomes a child of pair `j` when `i`'s saddle lies on `j`'s persistent branch.
pub fn build_bdt(tree: &MergeTree, pairs: &[PersistencePair]) -> Result<Bdt> {
    let roots: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].is_global()).collect();
    if roots.len() != 1 {
        return Err(Error::Inconsistent(format!("expected one global pair, found {}", roots.len())));
    }
    let (owner, node_of) = branch_owners(tree, pairs)?;
    let mut parent = vec![None; pairs.len()];
    for (i, p) in pairs.iter().enumerate() {
        if let Some(s) = p.saddle_vertex {
            let node = node_of
                .get(&s)
                .ok_or_else(|| Error::Inconsistent(format!("pair {i}: saddle {s} is not a tree node")))?;
            let j = owner[*node].ok_or_else(|| Error::Inconsistent(format!("pair {i}: no branch through saddle {s}")))?;
            parent[i] = Some(j);
        }
    }
    Ok(Bdt {
        pairs: pairs.to_vec(),
        parent,
        root: roots[0],
    })
}

/// Collapses adjacent saddle nodes of the merge tree whose values differ by at most
/// `eps1` times the data range, then re-derives the BDT hierarchy: a pair whose saddle falls
/// in a collapsed group hangs off the branch that leaves the group at its top. Pair values
/// are unchanged.
pub fn saddle_merge(bdt: &Bdt, tree: &MergeTree, eps1: f64) -> Result<Bdt> {
    if !(0.0..=1.0).contains(&eps1) {
        return Err(Error::InvalidParameter(format!("eps1 must lie in [0, 1] (got {eps1})")));
    }
    if eps1 == 0.0 {
        return Ok(bdt.clone());
    }
    let threshold = eps1 * data_range(&bdt.pairs)?;
    let (owner, node_of) = branch_owners(tree, &bdt.pairs)?;
    let n = tree.nodes.len();
    let mut uf = UnionFind::new(n);
    for (c, node) in tree.nodes.iter().enumerate() {
        if node.kind != NodeKind::Saddle {
            continue;
        }
        if let Some(p) = node.parent {
            let pn = &tree.nodes[p];
            if pn.kind == NodeKind::Saddle && (node.value - pn.value).abs() <= threshold {
                uf.union(c, p);
            }
        }
    }
    // Top of each group: the member whose parent leaves the group.
    let mut top = vec![usize::MAX; n];
    for (c, node) in tree.nodes.iter().enumerate() {
        let g = uf.find(c);
        let leaves_group = match node.parent {
            None => true,
            Some(p) => uf.find(p) != g,
        };
        if leaves_group {
            top[g] = c;
        }
    }
    let mut parent = vec![None; bdt.len()];
    for (i, p) in bdt.pairs.iter().enumerate() {
        if let Some(s) = p.saddle_vertex {
            let node = node_of
                .get(&s)
                .ok_or_else(|| Error::Inconsistent(format!("pair {i}: saddle {s} is not a tree node")))?;
            let t = top[uf.find(*node)];
            let j = owner[t].ok_or_else(|| Error::Inconsistent(format!("pair {i}: no branch above saddle group")))?;
            parent[i] = Some(j);
        }
    }
    Ok(Bdt {
        pairs: bdt.pairs.clone(),
        parent,
        root: bdt.root,
    })
}
