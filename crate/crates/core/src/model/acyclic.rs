use std::collections::HashMap;

use super::{Element, NodeId};

/// True iff a topological sort succeeds over every edge in `elements`.
/// Terminate markers are not edges and are ignored.
pub fn is_acyclic(elements: &[Element]) -> bool {
    let mut index: HashMap<NodeId, usize> = HashMap::new();
    let intern = |id: NodeId, index: &mut HashMap<NodeId, usize>| {
        let next = index.len();
        *index.entry(id).or_insert(next)
    };
    let mut pairs = Vec::new();
    for el in elements {
        if let Element::Edge(e) = el {
            let a = intern(e.from, &mut index);
            let b = intern(e.to, &mut index);
            pairs.push((a, b));
        }
    }
    let n = index.len();
    let mut indegree = vec![0usize; n];
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(a, b) in &pairs {
        adj[a].push(b);
        indegree[b] += 1;
    }
    let mut ready: Vec<usize> = (0..n).filter(|&v| indegree[v] == 0).collect();
    let mut visited = 0;
    while let Some(v) = ready.pop() {
        visited += 1;
        for &w in &adj[v] {
            indegree[w] -= 1;
            if indegree[w] == 0 {
                ready.push(w);
            }
        }
    }
    visited == n
}
