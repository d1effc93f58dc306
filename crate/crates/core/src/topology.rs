//! Impedance-weighted graph measures over in-service branches.
//!
//! Parallel branches collapse to the lowest-impedance connection, so the
//! measures see a simple weighted graph.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use crate::error::{GridError, GridResult};
use crate::network::{BusType, Network};

/// Simple undirected graph, `adj[i]` sorted by neighbour with weight `|z|`.
pub fn weighted_adjacency(net: &Network) -> Vec<Vec<(usize, f64)>> {
    let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); net.n_buses()];
    for (_, br) in net.active_branches() {
        let w = br.effective_impedance().norm();
        for (a, b) in [(br.from, br.to), (br.to, br.from)] {
            let e = maps[a].entry(b).or_insert(f64::INFINITY);
            *e = e.min(w);
        }
    }
    maps.into_iter().map(|m| m.into_iter().collect()).collect()
}

/// Distinct buses within `hops` steps, excluding the bus itself.
pub fn neighbourhood(adj: &[Vec<(usize, f64)>], start: usize, hops: usize) -> BTreeSet<usize> {
    let mut seen = BTreeSet::from([start]);
    let mut frontier = vec![start];
    for _ in 0..hops {
        let mut next = Vec::new();
        for u in frontier {
            for &(v, _) in &adj[u] {
                if seen.insert(v) {
                    next.push(v);
                }
            }
        }
        frontier = next;
    }
    seen.remove(&start);
    seen
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    // Min-heap on distance, ties broken by bus index.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| other.1.cmp(&self.1))
    }
}

fn dijkstra(adj: &[Vec<(usize, f64)>], sources: &[usize]) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; adj.len()];
    let mut heap = BinaryHeap::new();
    for &s in sources {
        dist[s] = 0.0;
        heap.push(Entry(0.0, s));
    }
    while let Some(Entry(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &adj[u] {
            let alt = d + w;
            if alt < dist[v] {
                dist[v] = alt;
                heap.push(Entry(alt, v));
            }
        }
    }
    dist
}

/// Shortest `|r + jx|`-weighted path length from every bus to the nearest slack.
pub fn electrical_distance_to_slack(net: &Network) -> GridResult<Vec<f64>> {
    let adj = weighted_adjacency(net);
    let slacks: Vec<usize> = (0..net.n_buses())
        .filter(|&i| net.buses[i].bus_type == BusType::Slack)
        .collect();
    let dist = dijkstra(&adj, &slacks);
    match dist.iter().position(|d| !d.is_finite()) {
        Some(bus) => Err(GridError::DisconnectedBus { bus }),
        None => Ok(dist),
    }
}

fn same_length(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300)
}

/// Impedance-weighted betweenness centrality (Brandes), normalized by
/// `(N-1)(N-2)/2` for undirected graphs. Path lengths equal to within a
/// relative 1e-12 count as ties.
pub fn electrical_betweenness(net: &Network) -> Vec<f64> {
    let n = net.n_buses();
    let adj = weighted_adjacency(net);
    let mut score = vec![0.0; n];
    for s in 0..n {
        let mut dist = vec![f64::INFINITY; n];
        let mut sigma = vec![0.0f64; n];
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut settled = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut heap = BinaryHeap::new();
        dist[s] = 0.0;
        sigma[s] = 1.0;
        heap.push(Entry(0.0, s));
        while let Some(Entry(d, u)) = heap.pop() {
            if settled[u] || d > dist[u] {
                continue;
            }
            settled[u] = true;
            order.push(u);
            for &(v, w) in &adj[u] {
                if settled[v] {
                    continue;
                }
                let alt = d + w;
                if dist[v].is_finite() && same_length(alt, dist[v]) {
                    sigma[v] += sigma[u];
                    preds[v].push(u);
                } else if alt < dist[v] {
                    dist[v] = alt;
                    sigma[v] = sigma[u];
                    preds[v] = vec![u];
                    heap.push(Entry(alt, v));
                }
            }
        }
        let mut delta = vec![0.0; n];
        for &w in order.iter().rev() {
            for &v in &preds[w] {
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w]);
            }
            if w != s {
                score[w] += delta[w];
            }
        }
    }
    if n < 3 {
        return vec![0.0; n];
    }
    // Each unordered pair was counted from both ends.
    let norm = ((n - 1) * (n - 2)) as f64 / 2.0;
    score.iter().map(|x| x / 2.0 / norm).collect()
}
