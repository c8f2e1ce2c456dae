//! Leiden optimisation of directed modularity: fast local moving, refinement
//! within communities, aggregation on the refined partition, repeated until
//! no community can be merged further.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::MobilityGraph;

const MAX_PASSES: usize = 16;
const RANDOMNESS: f64 = 0.01;

#[derive(Clone, Debug)]
struct Net {
    n: usize,
    out_adj: Vec<Vec<(usize, f64)>>,
    in_adj: Vec<Vec<(usize, f64)>>,
    k_out: Vec<f64>,
    k_in: Vec<f64>,
    self_w: Vec<f64>,
    m: f64,
}

impl Net {
    fn from_graph(g: &MobilityGraph) -> Self {
        let n = g.node_count();
        let mut out_adj = vec![Vec::new(); n];
        let mut in_adj = vec![Vec::new(); n];
        let mut k_out = vec![0.0; n];
        let mut k_in = vec![0.0; n];
        let mut self_w = vec![0.0; n];
        for e in g.edges() {
            k_out[e.origin] += e.weight;
            k_in[e.dest] += e.weight;
            if e.origin == e.dest {
                self_w[e.origin] += e.weight;
            } else {
                out_adj[e.origin].push((e.dest, e.weight));
                in_adj[e.dest].push((e.origin, e.weight));
            }
        }
        for list in in_adj.iter_mut() {
            list.sort_by_key(|&(u, _)| u);
        }
        Self {
            n,
            out_adj,
            in_adj,
            k_out,
            k_in,
            self_w,
            m: g.total_weight(),
        }
    }

    fn neighbors(&self, v: usize) -> impl Iterator<Item = &(usize, f64)> {
        self.out_adj[v].iter().chain(self.in_adj[v].iter())
    }

    fn quality(&self, part: &[usize], gamma: f64) -> f64 {
        let k = part.iter().copied().max().map_or(0, |c| c + 1);
        let mut internal = vec![0.0; k];
        let mut kout = vec![0.0; k];
        let mut kin = vec![0.0; k];
        for v in 0..self.n {
            let c = part[v];
            internal[c] += self.self_w[v];
            kout[c] += self.k_out[v];
            kin[c] += self.k_in[v];
            for &(u, w) in &self.out_adj[v] {
                if part[u] == c {
                    internal[c] += w;
                }
            }
        }
        (0..k)
            .map(|c| internal[c] / self.m - gamma * kout[c] * kin[c] / (self.m * self.m))
            .sum()
    }

    /// Collapses each community of `part` (contiguous ids) into one node.
    fn aggregate(&self, part: &[usize], k: usize) -> Net {
        let mut out_acc: Vec<Vec<(usize, f64)>> = vec![Vec::new(); k];
        let mut k_out = vec![0.0; k];
        let mut k_in = vec![0.0; k];
        let mut self_w = vec![0.0; k];
        for v in 0..self.n {
            let c = part[v];
            k_out[c] += self.k_out[v];
            k_in[c] += self.k_in[v];
            self_w[c] += self.self_w[v];
            for &(u, w) in &self.out_adj[v] {
                let d = part[u];
                if d == c {
                    self_w[c] += w;
                } else {
                    out_acc[c].push((d, w));
                }
            }
        }
        let mut out_adj = Vec::with_capacity(k);
        let mut in_adj = vec![Vec::new(); k];
        for (c, mut list) in out_acc.into_iter().enumerate() {
            list.sort_by_key(|&(d, _)| d);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(list.len());
            for (d, w) in list {
                match merged.last_mut() {
                    Some((last, acc)) if *last == d => *acc += w,
                    _ => merged.push((d, w)),
                }
            }
            for &(d, w) in &merged {
                in_adj[d].push((c, w));
            }
            out_adj.push(merged);
        }
        Net {
            n: k,
            out_adj,
            in_adj,
            k_out,
            k_in,
            self_w,
            m: self.m,
        }
    }
}

/// Renumbers community labels to `0..k` in order of first appearance.
fn renumber(part: &mut [usize]) -> usize {
    let max = part.iter().copied().max().map_or(0, |c| c + 1);
    let mut map = vec![usize::MAX; max];
    let mut next = 0;
    for c in part.iter_mut() {
        if map[*c] == usize::MAX {
            map[*c] = next;
            next += 1;
        }
        *c = map[*c];
    }
    next
}

fn move_nodes<R: Rng>(net: &Net, part: &mut [usize], gamma: f64, rng: &mut R) -> bool {
    let n = net.n;
    let scale = gamma / net.m;
    let eps = 1e-12 * net.m.max(1.0);
    let mut kout_c = vec![0.0; n];
    let mut kin_c = vec![0.0; n];
    let mut size = vec![0usize; n];
    for v in 0..n {
        kout_c[part[v]] += net.k_out[v];
        kin_c[part[v]] += net.k_in[v];
        size[part[v]] += 1;
    }
    let mut empty: Vec<usize> = (0..n).filter(|&c| size[c] == 0).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut queue: VecDeque<usize> = order.into();
    let mut queued = vec![true; n];
    let mut link = vec![0.0; n];
    let mut seen = vec![false; n];
    let mut touched: Vec<usize> = Vec::new();
    let mut changed = false;

    while let Some(v) = queue.pop_front() {
        queued[v] = false;
        let cur = part[v];
        for &(u, w) in net.neighbors(v) {
            let c = part[u];
            if !seen[c] {
                seen[c] = true;
                touched.push(c);
            }
            link[c] += w;
        }
        kout_c[cur] -= net.k_out[v];
        kin_c[cur] -= net.k_in[v];
        size[cur] -= 1;
        if size[cur] == 0 {
            empty.push(cur);
        }

        let gain = |c: usize, kout_c: &[f64], kin_c: &[f64]| {
            link[c] - scale * (net.k_out[v] * kin_c[c] + net.k_in[v] * kout_c[c])
        };
        let mut best = cur;
        let mut best_gain = gain(cur, &kout_c, &kin_c);
        for &c in &touched {
            let g = gain(c, &kout_c, &kin_c);
            if g > best_gain + eps {
                best = c;
                best_gain = g;
            }
        }
        if best_gain < -eps {
            // an empty community scores exactly zero
            best = *empty.last().expect("at least one empty community");
        }

        if size[best] == 0 {
            let pos = empty.iter().rposition(|&c| c == best).expect("tracked");
            empty.remove(pos);
        }
        kout_c[best] += net.k_out[v];
        kin_c[best] += net.k_in[v];
        size[best] += 1;
        part[v] = best;

        for &c in &touched {
            link[c] = 0.0;
            seen[c] = false;
        }
        touched.clear();

        if best != cur {
            changed = true;
            for &(u, _) in net.neighbors(v) {
                if part[u] != best && !queued[u] {
                    queued[u] = true;
                    queue.push_back(u);
                }
            }
        }
    }
    changed
}

fn refine<R: Rng>(net: &Net, part: &[usize], gamma: f64, rng: &mut R) -> Vec<usize> {
    let n = net.n;
    let scale = gamma / net.m;
    let k = part.iter().copied().max().map_or(0, |c| c + 1);
    let mut kout_p = vec![0.0; k];
    let mut kin_p = vec![0.0; k];
    for v in 0..n {
        kout_p[part[v]] += net.k_out[v];
        kin_p[part[v]] += net.k_in[v];
    }

    let mut refined: Vec<usize> = (0..n).collect();
    let mut rkout = net.k_out.clone();
    let mut rkin = net.k_in.clone();
    let mut rsize = vec![1usize; n];
    // weight between each refined community and the rest of its parent community
    let mut ext: Vec<f64> = (0..n)
        .map(|v| {
            net.neighbors(v)
                .filter(|&&(u, _)| part[u] == part[v])
                .map(|&(_, w)| w)
                .sum()
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut link = vec![0.0; n];
    let mut seen = vec![false; n];
    let mut touched: Vec<usize> = Vec::new();
    let mut cands: Vec<(usize, f64)> = Vec::new();

    for v in order {
        let own = refined[v];
        if rsize[own] != 1 {
            continue;
        }
        let c = part[v];
        let node_threshold = scale
            * (net.k_out[v] * (kin_p[c] - net.k_in[v]) + net.k_in[v] * (kout_p[c] - net.k_out[v]));
        if ext[own] < node_threshold {
            continue;
        }
        for &(u, w) in net.neighbors(v) {
            if part[u] != c {
                continue;
            }
            let r = refined[u];
            if !seen[r] {
                seen[r] = true;
                touched.push(r);
            }
            link[r] += w;
        }

        cands.clear();
        cands.push((own, 0.0));
        for &r in &touched {
            if r == own {
                continue;
            }
            let well_connected = ext[r]
                >= scale * (rkout[r] * (kin_p[c] - rkin[r]) + rkin[r] * (kout_p[c] - rkout[r]));
            if !well_connected {
                continue;
            }
            let gain = link[r] - scale * (net.k_out[v] * rkin[r] + net.k_in[v] * rkout[r]);
            if gain >= 0.0 {
                cands.push((r, gain / net.m));
            }
        }

        let gmax = cands.iter().map(|&(_, g)| g).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = cands
            .iter()
            .map(|&(_, g)| ((g - gmax) / RANDOMNESS).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        let mut pick = rng.random::<f64>() * total;
        let mut chosen = cands[cands.len() - 1].0;
        for (&(r, _), w) in cands.iter().zip(&weights) {
            if pick < *w {
                chosen = r;
                break;
            }
            pick -= w;
        }

        if chosen != own {
            ext[chosen] += ext[own] - 2.0 * link[chosen];
            rkout[chosen] += rkout[own];
            rkin[chosen] += rkin[own];
            rsize[chosen] += 1;
            rsize[own] = 0;
            refined[v] = chosen;
        }

        for &r in &touched {
            link[r] = 0.0;
            seen[r] = false;
        }
        touched.clear();
    }
    refined
}

/// One full Leiden run starting from `initial`.
fn pass<R: Rng>(base: &Net, initial: &[usize], gamma: f64, rng: &mut R) -> Vec<usize> {
    let mut net = base.clone();
    let mut part = initial.to_vec();
    renumber(&mut part);
    let mut node_map: Vec<usize> = (0..base.n).collect();
    loop {
        move_nodes(&net, &mut part, gamma, rng);
        let k = renumber(&mut part);
        if k == net.n {
            break;
        }
        let mut refined = refine(&net, &part, gamma, rng);
        let kr = renumber(&mut refined);
        let (agg, k_agg) = if kr < net.n {
            (refined, kr)
        } else {
            (part.clone(), k)
        };
        let mut next = vec![0usize; k_agg];
        for v in 0..net.n {
            next[agg[v]] = part[v];
        }
        net = net.aggregate(&agg, k_agg);
        for x in node_map.iter_mut() {
            *x = agg[*x];
        }
        part = next;
    }
    let mut out: Vec<usize> = node_map.iter().map(|&x| part[x]).collect();
    renumber(&mut out);
    out
}

/// Runs Leiden passes until modularity stops improving. Returns contiguous
/// community labels per node.
pub(crate) fn leiden<R: Rng>(graph: &MobilityGraph, gamma: f64, rng: &mut R) -> Vec<usize> {
    let net = Net::from_graph(graph);
    let mut best: Vec<usize> = (0..net.n).collect();
    let mut best_q = net.quality(&best, gamma);
    for _ in 0..MAX_PASSES {
        let cand = pass(&net, &best, gamma, rng);
        let q = net.quality(&cand, gamma);
        if q > best_q + 1e-12 {
            best = cand;
            best_q = q;
        } else {
            break;
        }
    }
    renumber(&mut best);
    best
}
