use std::time::{Duration, Instant};

use proptest::prelude::*;

use super::*;
use crate::capture::{lane_prefix, root_task_id, Capture, EventKind, ObjectRef, SysEvent, Workload, WorkloadConfig};
use crate::model::{attrs, Attributes, GraphBuilder, NodeKind, OrderValidator};

fn chain(lane: Lane, machine: u32, n: usize) -> Vec<Element> {
    let mut b = GraphBuilder::new(lane, machine, 1);
    let mut out = Vec::new();
    let mut prev = b.new_object(NodeKind::Task, Attributes::new(), &mut out).id.object_id;
    while out.len() < n {
        let next = b.new_object(NodeKind::Inode, Attributes::new(), &mut out).id.object_id;
        b.record_flow(prev, next, RelationKind::Write, Attributes::new(), &mut out)
            .unwrap();
        prev = next;
    }
    out.truncate(n);
    out
}

fn seqs(els: &[Element]) -> Vec<(Lane, u64)> {
    els.iter().map(|e| (e.lane(), e.seq())).collect()
}

#[test]
fn contiguous_pushes_advance_the_watermark() {
    let els = chain(0, 1, 3);
    let mut m = Merger::new(MergePolicy::elements(100));
    for el in els.clone() {
        m.push(0, el).unwrap();
    }
    assert_eq!(m.lane(0).unwrap().watermark(), 3);

    let mut m = Merger::new(MergePolicy::elements(100));
    m.push(0, els[0].clone()).unwrap();
    m.push(0, els[2].clone()).unwrap();
    assert_eq!(m.lane(0).unwrap().watermark(), 1);
    assert_eq!(
        m.push(0, els[0].clone()),
        Err(MergeError::StaleElement {
            lane: 0,
            edge_id: 1,
            watermark: 1
        })
    );
    assert!(matches!(
        m.push(0, els[2].clone()),
        Err(MergeError::StaleElement { .. })
    ));
}

#[test]
fn gap_holds_back_later_elements_until_close() {
    let els = chain(0, 1, 4);
    let mut m = Merger::new(MergePolicy::elements(100));
    m.push(0, els[0].clone()).unwrap();
    m.push(0, els[2].clone()).unwrap();
    let now = Instant::now();
    assert_eq!(seqs(&m.drain(now).elements), vec![(0, 1)]);
    m.push(0, els[1].clone()).unwrap();
    assert_eq!(seqs(&m.drain(now).elements), vec![(0, 2), (0, 3)]);
    m.close(0);
    assert!(m.drain(now).elements.is_empty());
    assert!(m.is_drained());
}

#[test]
fn two_lanes_merge_by_edge_id_up_to_the_min_watermark() {
    let a = chain(0, 1, 6);
    let b = chain(1, 1, 3);
    let mut m = Merger::new(MergePolicy::elements(1000));
    for el in a {
        m.push(0, el).unwrap();
    }
    for el in b {
        m.push(1, el).unwrap();
    }
    let out = m.drain(Instant::now()).elements;
    assert_eq!(seqs(&out), vec![(0, 1), (1, 1), (0, 2), (1, 2), (0, 3), (1, 3)]);
    m.close(1);
    let rest = m.drain(Instant::now()).elements;
    assert_eq!(seqs(&rest), vec![(0, 4), (0, 5), (0, 6)]);
}

#[test]
fn single_lane_drain_is_identity() {
    let els = chain(0, 1, 50);
    let mut m = Merger::new(MergePolicy::default());
    for el in els.clone() {
        m.push(0, el).unwrap();
    }
    assert_eq!(m.drain(Instant::now()).elements, els);
}

#[test]
fn silent_lane_stops_holding_back_after_the_time_threshold() {
    let t0 = Instant::now();
    let mut m = Merger::new(MergePolicy::time(100));
    m.open_lane_at(1, t0);
    for el in chain(0, 1, 5) {
        m.push_at(0, el, t0).unwrap();
    }
    assert!(m.drain(t0 + Duration::from_millis(50)).elements.is_empty());
    let out = m.drain(t0 + Duration::from_millis(150)).elements;
    assert_eq!(out.len(), 5);
}

#[test]
fn silent_lane_stops_holding_back_after_the_element_threshold() {
    let mut m = Merger::new(MergePolicy::elements(4));
    m.open_lane(1);
    let els = chain(0, 1, 6);
    for el in els[..3].iter().cloned() {
        m.push(0, el).unwrap();
    }
    assert!(m.drain(Instant::now()).elements.is_empty());
    for el in els[3..].iter().cloned() {
        m.push(0, el).unwrap();
    }
    assert_eq!(m.drain(Instant::now()).elements.len(), 6);
}

fn open_socket(c: &mut Capture, lane: Lane, n: u64, out: &mut Vec<Element>) -> u64 {
    let sock = lane_prefix(lane) | n;
    let ev = SysEvent::new(lane, 0, EventKind::Open, root_task_id(lane), ObjectRef::Id(sock)).with("address", "x");
    out.extend(c.translate(&ev).unwrap());
    sock
}

/// Host 0 sends one packet to host 1.
fn two_hosts() -> (Vec<Element>, Vec<Element>, NodeId) {
    let mut a = Capture::new(0, 1, 1);
    let mut b = Capture::new(1, 2, 1);
    let mut sa = a.boot();
    let mut sb = b.boot();
    let ka = open_socket(&mut a, 0, 5, &mut sa);
    let kb = open_socket(&mut b, 1, 5, &mut sb);
    let packet = lane_prefix(0) | 9;
    let origin = NodeId::new(packet, 1, 1, 0);
    // The receiving host is busy first so its ids run ahead of the sender's.
    for i in 0..10u64 {
        let f = lane_prefix(1) | (100 + i);
        let ev = SysEvent::new(1, 0, EventKind::Open, root_task_id(1), ObjectRef::Id(f)).with("path", format!("/f{i}"));
        sb.extend(b.translate(&ev).unwrap());
    }
    let mut pin = SysEvent::new(1, 0, EventKind::PacketIn, root_task_id(1), ObjectRef::Id(kb));
    pin.origin = Some(origin);
    sb.extend(b.translate(&pin).unwrap());
    for i in 0..10u64 {
        let f = lane_prefix(0) | (100 + i);
        let ev = SysEvent::new(0, 0, EventKind::Open, root_task_id(0), ObjectRef::Id(f)).with("path", format!("/f{i}"));
        sa.extend(a.translate(&ev).unwrap());
    }
    let pout = SysEvent::new(0, 0, EventKind::PacketOut, root_task_id(0), ObjectRef::Id(ka)).with("packet", packet);
    sa.extend(a.translate(&pout).unwrap());
    sa.extend(a.shutdown());
    sb.extend(b.shutdown());
    (sa, sb, origin)
}

fn validate(els: &[Element]) {
    let mut v = OrderValidator::new();
    for el in els {
        v.check(el).unwrap();
    }
    assert_eq!(v.tracked(), 0);
}

#[test]
fn packet_sender_subgraph_precedes_receipt() {
    let (sa, sb, origin) = two_hosts();
    let total = sa.len() + sb.len();
    let out = cross_host_merge([sa, sb], MergePolicy::elements(1_000_000)).unwrap();
    assert!(out.warnings.is_empty());
    assert_eq!(out.elements.len(), total);
    validate(&out.elements);
    let pos = |pred: &dyn Fn(&Element) -> bool| out.elements.iter().position(pred).unwrap();
    let sent = pos(&|e| e.as_edge().is_some_and(|e| e.to == origin));
    let received = pos(&|e| e.as_edge().is_some_and(|e| e.from == origin));
    assert!(sent < received);
}

#[test]
fn no_cross_traffic_interleaves_by_edge_id_then_machine() {
    let a = chain(0, 2, 4);
    let b = chain(1, 1, 4);
    let out = cross_host_merge([a, b], MergePolicy::default()).unwrap();
    assert_eq!(
        seqs(&out.elements),
        vec![(1, 1), (0, 1), (1, 2), (0, 2), (1, 3), (0, 3), (1, 4), (0, 4)]
    );
}

#[test]
fn lost_packet_out_is_reported_as_dangling() {
    let (sa, sb, origin) = two_hosts();
    let sa: Vec<Element> = sa
        .into_iter()
        .filter(|e| !matches!(e, Element::Node(n) if n.node.id == origin))
        .filter(|e| e.as_edge().is_none_or(|e| e.to != origin))
        .collect();
    // Gap-free ids are part of the lane contract; renumber the sender.
    let sa: Vec<Element> = sa
        .into_iter()
        .enumerate()
        .map(|(i, mut e)| {
            match &mut e {
                Element::Node(n) => n.edge_id = i as u64 + 1,
                Element::Edge(x) => x.edge_id = i as u64 + 1,
                Element::Terminate(t) => t.edge_id = i as u64 + 1,
            }
            e
        })
        .collect();
    let out = cross_host_merge([sa, sb], MergePolicy::default()).unwrap();
    assert_eq!(out.warnings.len(), 1);
    assert!(matches!(out.warnings[0], MergeWarning::DanglingPacket { lane: 1, node, .. } if node == origin));
    validate(&out.elements);
}

#[test]
fn gated_edge_turns_dangling_after_the_threshold() {
    let (_, sb, origin) = two_hosts();
    let t0 = Instant::now();
    let mut m = Merger::new(MergePolicy::time(100));
    m.open_lane_at(0, t0);
    for el in sb.clone() {
        m.push_at(1, el, t0).unwrap();
    }
    let first = m.drain(t0 + Duration::from_millis(10));
    assert!(first.warnings.is_empty());
    let later = m.drain(t0 + Duration::from_millis(200));
    assert_eq!(later.warnings.len(), 1);
    assert!(matches!(later.warnings[0], MergeWarning::DanglingPacket { node, .. } if node == origin));
    m.close(1);
    m.close(0);
    let rest = m.drain(t0 + Duration::from_millis(300));
    let all: Vec<Element> = first
        .elements
        .into_iter()
        .chain(later.elements)
        .chain(rest.elements)
        .collect();
    // The packet's in-edge and its terminate marker are both withheld.
    assert_eq!(all.len(), sb.len() - 2);
    assert_eq!(m.stats().dangling, 1);
}

fn lane_streams(seed: u64, lanes: u16) -> Vec<Vec<Element>> {
    let cfg = WorkloadConfig {
        event_count: 600,
        seed,
        lanes,
        ..WorkloadConfig::default()
    };
    let mut caps: Vec<Capture> = (0..lanes).map(|l| Capture::new(l, 1, 1)).collect();
    let mut streams: Vec<Vec<Element>> = caps.iter_mut().map(Capture::boot).collect();
    for ev in Workload::new(cfg) {
        let l = ev.lane as usize;
        caps[l].translate_into(&ev, &mut streams[l]).unwrap();
    }
    for (c, s) in caps.iter_mut().zip(streams.iter_mut()) {
        s.extend(c.shutdown());
    }
    streams
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_arrival_interleaving_yields_a_valid_total_order(
        seed in 0u64..1000,
        lanes in 1u16..4,
        schedule in proptest::collection::vec(0usize..4, 4000),
        chunk in 1usize..64,
    ) {
        let streams = lane_streams(seed, lanes);
        let total: usize = streams.iter().map(Vec::len).sum();
        let mut cursors = vec![0usize; streams.len()];
        let mut m = Merger::new(MergePolicy::elements(1_000_000));
        for l in 0..lanes {
            m.open_lane(l);
        }
        let mut out = Vec::new();
        let mut step = schedule.iter().cycle();
        while cursors.iter().zip(&streams).any(|(c, s)| *c < s.len()) {
            let l = *step.next().unwrap() % streams.len();
            for _ in 0..chunk {
                if cursors[l] < streams[l].len() {
                    m.push(l as Lane, streams[l][cursors[l]].clone()).unwrap();
                    cursors[l] += 1;
                }
            }
            if cursors[l] == streams[l].len() {
                m.close(l as Lane);
            }
            let d = m.drain(Instant::now());
            prop_assert!(d.warnings.is_empty());
            out.extend(d.elements);
        }
        out.extend(m.drain(Instant::now()).elements);
        prop_assert_eq!(out.len(), total);
        validate(&out);
        prop_assert!(crate::model::is_acyclic(&out));
        prop_assert_eq!(m.stats().live_nodes, 0);
    }
}

#[test]
fn attrs_survive_the_merge() {
    let mut b = GraphBuilder::new(0, 1, 1);
    let mut out = Vec::new();
    b.new_object(NodeKind::Inode, attrs([("path", "/x")]), &mut out);
    let merged = cross_host_merge([out.clone()], MergePolicy::default()).unwrap();
    assert_eq!(merged.elements, out);
}
