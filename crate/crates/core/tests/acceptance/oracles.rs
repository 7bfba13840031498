//! Offline reference computations over frozen graphs. None of these reuse
//! library code beyond the element types.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use provstream::model::{Element, NodeId, NodeKind, ProvNode, RelationKind, Scalar};

/// Kahn's algorithm over every edge; true iff all vertices get sorted.
pub fn topo_sorts(elements: &[Element]) -> bool {
    let mut ids: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut edges = Vec::new();
    for el in elements {
        if let Element::Edge(e) = el {
            let n = ids.len();
            let a = *ids.entry(e.from).or_insert(n);
            let n = ids.len();
            let b = *ids.entry(e.to).or_insert(n);
            edges.push((a, b));
        }
    }
    let n = ids.len();
    let mut indeg = vec![0u32; n];
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(a, b) in &edges {
        out[a].push(b);
        indeg[b] += 1;
    }
    let mut queue: VecDeque<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(v) = queue.pop_front() {
        order.push(v);
        for &w in &out[v] {
            indeg[w] -= 1;
            if indeg[w] == 0 {
                queue.push_back(w);
            }
        }
    }
    if order.len() != n {
        return false;
    }
    let mut rank = vec![0usize; n];
    for (i, &v) in order.iter().enumerate() {
        rank[v] = i;
    }
    edges.iter().all(|&(a, b)| rank[a] < rank[b])
}

/// A frozen graph with dense vertex indices.
pub struct Frozen<'a> {
    pub nodes: Vec<&'a ProvNode>,
    pub index: HashMap<NodeId, usize>,
    /// `(from, to, kind)` in stream order.
    pub edges: Vec<(usize, usize, RelationKind)>,
}

impl<'a> Frozen<'a> {
    pub fn new(elements: &'a [Element]) -> Self {
        let nodes: Vec<&ProvNode> = elements.iter().filter_map(Element::as_node).collect();
        let index: HashMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        let edges = elements
            .iter()
            .filter_map(Element::as_edge)
            .map(|e| (index[&e.from], index[&e.to], e.kind))
            .collect();
        Frozen { nodes, index, edges }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn parents(&self) -> Vec<Vec<usize>> {
        let mut p = vec![Vec::new(); self.len()];
        for &(a, b, _) in &self.edges {
            p[b].push(a);
        }
        p
    }

    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut c = vec![Vec::new(); self.len()];
        for &(a, b, _) in &self.edges {
            c[a].push(b);
        }
        c
    }
}

const LEAK_RELATIONS: [RelationKind; 9] = [
    RelationKind::Read,
    RelationKind::Write,
    RelationKind::Version,
    RelationKind::Send,
    RelationKind::Receive,
    RelationKind::SharedRead,
    RelationKind::SharedWrite,
    RelationKind::Create,
    RelationKind::Exec,
];

fn is_secret_inode(n: &ProvNode) -> bool {
    n.kind == NodeKind::Inode && matches!(n.attr("path"), Some(Scalar::Str(p)) if p.starts_with("/secret/"))
}

/// Socket and packet vertices reachable over at least one relevant edge
/// from a confidential inode.
pub fn leaking_sinks(elements: &[Element]) -> HashSet<NodeId> {
    let g = Frozen::new(elements);
    let mut succ = vec![Vec::new(); g.len()];
    for &(a, b, k) in &g.edges {
        if LEAK_RELATIONS.contains(&k) {
            succ[a].push(b);
        }
    }
    let mut reached = vec![false; g.len()];
    let mut stack: Vec<usize> = (0..g.len()).filter(|&i| is_secret_inode(g.nodes[i])).collect();
    let mut expanded = vec![false; g.len()];
    while let Some(v) = stack.pop() {
        if std::mem::replace(&mut expanded[v], true) {
            continue;
        }
        for &w in &succ[v] {
            reached[w] = true;
            stack.push(w);
        }
    }
    (0..g.len())
        .filter(|&i| reached[i] && matches!(g.nodes[i].kind, NodeKind::Socket | NodeKind::Packet))
        .map(|i| g.nodes[i].id)
        .collect()
}

/// In-degree lists by brute-force ancestry: generation `i` lists the
/// in-degree of the far end of every parent path of length `i`.
pub fn degree_lists(elements: &[Element], depth: usize) -> HashMap<NodeId, Vec<Vec<u32>>> {
    let g = Frozen::new(elements);
    let parents = g.parents();
    let mut out = HashMap::new();
    for v in 0..g.len() {
        let mut lists = vec![vec![parents[v].len() as u32]];
        let mut paths: Vec<Vec<usize>> = vec![vec![v]];
        for _ in 0..depth {
            let mut next = Vec::new();
            for p in &paths {
                for &u in &parents[*p.last().unwrap()] {
                    let mut q = p.clone();
                    q.push(u);
                    next.push(q);
                }
            }
            let mut gen: Vec<u32> = next.iter().map(|p| parents[*p.last().unwrap()].len() as u32).collect();
            gen.sort();
            lists.push(gen);
            paths = next;
        }
        while lists.len() > 1 && lists.last().unwrap().is_empty() {
            lists.pop();
        }
        out.insert(g.nodes[v].id, lists);
    }
    out
}

/// Dynamic time warping with the whole cost table kept, in integers.
/// Against an empty sequence the cost is the other sequence's sum.
pub fn dtw_table(a: &[u32], b: &[u32]) -> u64 {
    if a.is_empty() || b.is_empty() {
        return a.iter().chain(b).map(|&x| u64::from(x)).sum();
    }
    let (n, m) = (a.len(), b.len());
    let mut d = vec![vec![u64::MAX; m + 1]; n + 1];
    d[0][0] = 0;
    for i in 1..=n {
        for j in 1..=m {
            let cost = u64::from(a[i - 1].abs_diff(b[j - 1]));
            let best = d[i - 1][j].min(d[i][j - 1]).min(d[i - 1][j - 1]);
            d[i][j] = cost + best;
        }
    }
    d[n][m]
}

/// Answers of the five path questions for one graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathAnswers {
    pub q: [bool; 5],
}

/// Vertex roles for the path questions.
pub struct Roles {
    pub a: Vec<bool>,
    pub b: Vec<bool>,
    pub v: Vec<bool>,
    pub x: Vec<bool>,
    pub y: Vec<bool>,
    pub t: Vec<bool>,
    pub p: Vec<bool>,
}

fn none(r: &[bool]) -> bool {
    !r.iter().any(|&x| x)
}

/// Every path with at least one edge, as vertex sequences, or `None` once
/// more than `limit` have been produced.
pub fn enumerate_paths(children: &[Vec<usize>], limit: usize) -> Option<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    let mut stack: Vec<Vec<usize>> = (0..children.len()).map(|v| vec![v]).collect();
    while let Some(path) = stack.pop() {
        for &w in &children[*path.last().unwrap()] {
            let mut p = path.clone();
            p.push(w);
            out.push(p.clone());
            if out.len() > limit {
                return None;
            }
            stack.push(p);
        }
    }
    Some(out)
}

/// Evaluates the questions directly over an explicit path list.
pub fn answers_by_paths(n: usize, paths: &[Vec<usize>], r: &Roles) -> PathAnswers {
    let ab: Vec<&Vec<usize>> = paths.iter().filter(|p| r.a[p[0]] && r.b[*p.last().unwrap()]).collect();
    let vac = |sets: &[&[bool]]| sets.iter().any(|s| none(s));
    let q1 = vac(&[&r.a, &r.b]) || !ab.is_empty();
    let q2 = vac(&[&r.a, &r.b, &r.v]) || (!ab.is_empty() && ab.iter().all(|p| p.iter().any(|&w| r.v[w])));
    let q3 = vac(&[&r.a, &r.b, &r.v]) || ab.iter().all(|p| !p.iter().any(|&w| r.v[w]));
    let closure = |s: &[bool]| -> HashSet<usize> {
        let mut c: HashSet<usize> = (0..n).filter(|&i| s[i]).collect();
        c.extend(paths.iter().filter(|p| s[p[0]]).map(|p| *p.last().unwrap()));
        c
    };
    let q4 = vac(&[&r.x, &r.y]) || closure(&r.x).is_disjoint(&closure(&r.y));
    let q5 = vac(&[&r.a, &r.b, &r.t]) || (!ab.is_empty() && ab.iter().all(|p| !p.iter().any(|&w| r.t[w] && !r.p[w])));
    PathAnswers {
        q: [q1, q2, q3, q4, q5],
    }
}

/// Same questions by search over (vertex, flags seen so far) states, which
/// covers every path without listing them one by one.
pub fn answers_by_states(children: &[Vec<usize>], r: &Roles) -> PathAnswers {
    let n = children.len();
    // Flags: bit 0 a v vertex was on the path, bit 1 a bad vertex was.
    let flag = |w: usize| u8::from(r.v[w]) | (u8::from(r.t[w] && !r.p[w]) << 1);
    let mut seen = vec![[false; 4]; n];
    // Path endings at a b vertex, by flag set, for paths of length >= 1.
    let mut endings = [false; 4];
    let mut stack: Vec<(usize, u8, bool)> = (0..n).filter(|&i| r.a[i]).map(|i| (i, flag(i), false)).collect();
    while let Some((v, f, long)) = stack.pop() {
        if long {
            if seen[v][f as usize] {
                continue;
            }
            seen[v][f as usize] = true;
            if r.b[v] {
                endings[f as usize] = true;
            }
        }
        for &w in &children[v] {
            stack.push((w, f | flag(w), true));
        }
    }
    let any_ab = endings.iter().any(|&e| e);
    let vac = |sets: &[&[bool]]| sets.iter().any(|s| none(s));
    let q1 = vac(&[&r.a, &r.b]) || any_ab;
    let q2 = vac(&[&r.a, &r.b, &r.v]) || (any_ab && !endings[0] && !endings[2]);
    let q3 = vac(&[&r.a, &r.b, &r.v]) || (!endings[1] && !endings[3]);
    let reach = |s: &[bool]| -> Vec<bool> {
        let mut on = s.to_vec();
        let mut stack: Vec<usize> = (0..n).filter(|&i| s[i]).collect();
        while let Some(v) = stack.pop() {
            for &w in &children[v] {
                if !on[w] {
                    on[w] = true;
                    stack.push(w);
                }
            }
        }
        on
    };
    let (rx, ry) = (reach(&r.x), reach(&r.y));
    let q4 = vac(&[&r.x, &r.y]) || !(0..n).any(|i| rx[i] && ry[i]);
    let q5 = vac(&[&r.a, &r.b, &r.t]) || (any_ab && !endings[2] && !endings[3]);
    PathAnswers {
        q: [q1, q2, q3, q4, q5],
    }
}

/// Every vertex reachable from `sites`, the sites included.
pub fn downstream(children: &[Vec<usize>], sites: &[usize]) -> HashSet<usize> {
    let mut on: HashSet<usize> = sites.iter().copied().collect();
    let mut stack = sites.to_vec();
    while let Some(v) = stack.pop() {
        for &w in &children[v] {
            if on.insert(w) {
                stack.push(w);
            }
        }
    }
    on
}
