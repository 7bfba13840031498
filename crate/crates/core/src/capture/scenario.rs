//! Small fixed scenarios used by tests, examples and the CLI.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{
    attrs, Attributes, Element, GraphBuilder, NodeId, NodeKind, ProvEdge, ProvNode, PublishedNode, RelationKind,
    TerminateMarker,
};

/// Object handles of the confidential-flow scenario.
#[derive(Debug, Clone, Copy)]
pub struct LeakIds {
    pub f: NodeId,
    pub p: NodeId,
    pub g: NodeId,
    pub q: NodeId,
    pub s: NodeId,
    pub h: NodeId,
}

/// Confidential file F flows to socket S through process P, file G and
/// process Q. Both processes first write an unrelated file H so that the
/// later reads create new versions P1 and Q1: the confidential label ends
/// up on F, P1, G, Q1 and S, and never on P0 or Q0.
pub fn leak_scenario() -> (Vec<Element>, LeakIds) {
    let mut b = GraphBuilder::new(0, 1, 1);
    let mut out = Vec::new();
    let obj = |b: &mut GraphBuilder, out: &mut Vec<Element>, kind, key: &str, name: &str| {
        b.new_object(kind, attrs([(key, name)]), out).id
    };
    let f = obj(&mut b, &mut out, NodeKind::Inode, "path", "/secret/plan.txt");
    let h = obj(&mut b, &mut out, NodeKind::Inode, "path", "/tmp/log");
    let g = obj(&mut b, &mut out, NodeKind::Inode, "path", "/tmp/notes.txt");
    let p = obj(&mut b, &mut out, NodeKind::Task, "comm", "P");
    let q = obj(&mut b, &mut out, NodeKind::Task, "comm", "Q");
    let s = obj(&mut b, &mut out, NodeKind::Socket, "address", "203.0.113.7:443");
    let flows = [
        (p, h, RelationKind::Write),
        (q, h, RelationKind::Write),
        (f, p, RelationKind::Read),
        (p, g, RelationKind::Write),
        (g, q, RelationKind::Read),
        (q, s, RelationKind::Write),
    ];
    for (from, to, kind) in flows {
        b.record_flow(from.object_id, to.object_id, kind, Attributes::new(), &mut out)
            .expect("scenario objects are live");
    }
    b.shutdown(&mut out);
    (out, LeakIds { f, p, g, q, s, h })
}

const DAG_KINDS: [NodeKind; 4] = [NodeKind::Task, NodeKind::Inode, NodeKind::Socket, NodeKind::Packet];
const DAG_RELATIONS: [RelationKind; 6] = [
    RelationKind::Read,
    RelationKind::Write,
    RelationKind::Send,
    RelationKind::Receive,
    RelationKind::SharedRead,
    RelationKind::Fork,
];

/// A random DAG on one lane as a stream that honours the ordering
/// contract: every vertex first, then edges grouped by destination in
/// index order, then a terminate marker per vertex. Vertex `i` has object
/// id `i + 1`; edges always point from a lower to a higher index and may
/// repeat. Inodes get a `path` under `/secret` or `/data`, every vertex a
/// `uid` in `0..4`.
pub fn random_dag(seed: u64, nodes: usize, edges: usize) -> Vec<Element> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * nodes + edges);
    let mut seq = 0u64;
    let mut next = || {
        seq += 1;
        seq - 1
    };
    let ids: Vec<NodeId> = (0..nodes).map(|i| NodeId::new(i as u64 + 1, 1, 1, 0)).collect();
    for (i, id) in ids.iter().enumerate() {
        let kind = DAG_KINDS[rng.gen_range(0..DAG_KINDS.len())];
        let mut a = attrs([("uid", rng.gen_range(0..4i64))]);
        if kind == NodeKind::Inode {
            let dir = if rng.gen_bool(0.3) { "secret" } else { "data" };
            a.insert("path".into(), format!("/{dir}/{i}").into());
        }
        out.push(Element::Node(PublishedNode {
            edge_id: next(),
            lane: 0,
            node: ProvNode::new(*id, kind, a),
        }));
    }
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(edges);
    if nodes >= 2 {
        for _ in 0..edges {
            let a = rng.gen_range(0..nodes);
            let mut b = rng.gen_range(0..nodes - 1);
            if b >= a {
                b += 1;
            }
            pairs.push((a.min(b), a.max(b)));
        }
    }
    pairs.sort_by_key(|&(_, to)| to);
    for (from, to) in pairs {
        out.push(Element::Edge(ProvEdge {
            edge_id: next(),
            lane: 0,
            from: ids[from],
            to: ids[to],
            kind: DAG_RELATIONS[rng.gen_range(0..DAG_RELATIONS.len())],
            attributes: Attributes::new(),
            scratch: Default::default(),
        }));
    }
    for id in ids {
        out.push(Element::Terminate(TerminateMarker {
            edge_id: next(),
            lane: 0,
            node: id,
        }));
    }
    out
}
