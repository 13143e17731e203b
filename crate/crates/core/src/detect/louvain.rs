use std::collections::BTreeMap;

use super::graph::WeightedGraph;
use crate::scalar::Scalar;

/// Community assignment for every node of a graph, by node index.
///
/// Community ids are canonical: numbered `0, 1, ...` in order of the first node
/// that belongs to each community.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Partition {
    assignment: Vec<usize>,
}

impl Partition {
    /// Canonicalises arbitrary labels.
    pub fn from_labels<L: Ord + Clone>(labels: &[L]) -> Self {
        let mut ids: BTreeMap<L, usize> = BTreeMap::new();
        let mut assignment = Vec::with_capacity(labels.len());
        for l in labels {
            let next = ids.len();
            assignment.push(*ids.entry(l.clone()).or_insert(next));
        }
        Partition { assignment }
    }

    pub fn singletons(n: usize) -> Self {
        Partition {
            assignment: (0..n).collect(),
        }
    }

    pub fn single(n: usize) -> Self {
        Partition {
            assignment: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn community_of(&self, node: usize) -> usize {
        self.assignment[node]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn community_count(&self) -> usize {
        self.assignment.iter().max().map_or(0, |m| m + 1)
    }

    /// Members of each community, ascending.
    pub fn communities(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.community_count()];
        for (node, &c) in self.assignment.iter().enumerate() {
            out[c].push(node);
        }
        out
    }
}

/// Weighted Newman modularity `Q = Σ_c [Σin_c / 2m − (Σtot_c / 2m)²]`,
/// where `Σin_c` sums `A_ij` over ordered pairs inside `c` (diagonal included)
/// and `Σtot_c` sums degrees. A graph without edge weight has `Q = 0`.
pub fn modularity<T: Scalar>(graph: &WeightedGraph<T>, partition: &Partition) -> T {
    assert_eq!(
        graph.len(),
        partition.len(),
        "partition must cover every node"
    );
    let two_m = graph.total_weight_2m();
    if two_m <= T::zero() {
        return T::zero();
    }
    let k = partition.community_count();
    let mut inside = vec![T::zero(); k];
    let mut total = vec![T::zero(); k];
    for u in 0..graph.len() {
        let cu = partition.community_of(u);
        total[cu] += graph.degree(u);
        inside[cu] += graph.self_loop(u);
        for (v, w) in graph.neighbors(u) {
            if partition.community_of(v) == cu {
                inside[cu] += w;
            }
        }
    }
    inside
        .into_iter()
        .zip(total)
        .map(|(i, t)| i / two_m - (t / two_m) * (t / two_m))
        .sum()
}

const MAX_SWEEPS: usize = 1_000;

/// Visit order for the local-moving phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VisitOrder {
    Index,
    Reverse,
    DegreeAscending,
    DegreeDescending,
}

impl VisitOrder {
    pub const ALL: [VisitOrder; 4] = [
        VisitOrder::Index,
        VisitOrder::Reverse,
        VisitOrder::DegreeAscending,
        VisitOrder::DegreeDescending,
    ];

    fn nodes<T: Scalar>(self, g: &WeightedGraph<T>) -> Vec<usize> {
        let mut order: Vec<usize> = (0..g.len()).collect();
        match self {
            VisitOrder::Index => {}
            VisitOrder::Reverse => order.reverse(),
            VisitOrder::DegreeAscending => order.sort_by(|&a, &b| {
                g.degree(a)
                    .partial_cmp(&g.degree(b))
                    .unwrap_or(std::cmp::Ordering::Equal)
            }),
            VisitOrder::DegreeDescending => order.sort_by(|&a, &b| {
                g.degree(b)
                    .partial_cmp(&g.degree(a))
                    .unwrap_or(std::cmp::Ordering::Equal)
            }),
        }
        order
    }
}

/// Louvain community detection.
///
/// Runs [`louvain_ordered`] for each of [`VisitOrder::ALL`], keeps the
/// partition with the highest modularity (ties go to the earlier order), and
/// polishes it with [`merge_refine`].
pub fn louvain<T: Scalar>(graph: &WeightedGraph<T>) -> Partition {
    let mut best: Option<(T, Partition)> = None;
    for order in VisitOrder::ALL {
        let p = louvain_ordered(graph, order);
        let q = modularity(graph, &p);
        if best.as_ref().is_none_or(|(bq, _)| q > *bq) {
            best = Some((q, p));
        }
    }
    match best {
        Some((_, p)) => kl_refine(graph, merge_refine(graph, p)),
        None => Partition {
            assignment: Vec::new(),
        },
    }
}

const KL_PASSES: usize = 8;

/// Kernighan-Lin style refinement. Each pass moves every node once, always
/// taking the best available single move even when it lowers modularity,
/// then keeps the prefix of moves with the highest cumulative gain. Passes
/// repeat while they improve.
pub fn kl_refine<T: Scalar>(graph: &WeightedGraph<T>, start: Partition) -> Partition {
    let n = graph.len();
    let two_m = graph.total_weight_2m();
    if n < 2 || two_m <= T::zero() {
        return start;
    }
    let eps = T::epsilon() * T::of_usize(64) * (two_m + T::one());
    let degree: Vec<T> = (0..n).map(|u| graph.degree(u)).collect();
    let mut labels = start.assignment().to_vec();
    for _ in 0..KL_PASSES {
        let mut comm = labels.clone();
        let mut tot = vec![T::zero(); n];
        let mut size = vec![0usize; n];
        for u in 0..n {
            tot[comm[u]] += degree[u];
            size[comm[u]] += 1;
        }
        let mut locked = vec![false; n];
        let mut moves: Vec<(usize, usize)> = Vec::with_capacity(n);
        let (mut gain_sum, mut best_sum, mut best_len) = (T::zero(), T::zero(), 0);
        let mut links: BTreeMap<usize, T> = BTreeMap::new();
        for _ in 0..n {
            let mut pick: Option<(T, usize, usize)> = None;
            for u in (0..n).filter(|&u| !locked[u]) {
                let (ku, own) = (degree[u], comm[u]);
                links.clear();
                for (v, w) in graph.neighbors(u) {
                    *links.entry(comm[v]).or_insert_with(T::zero) += w;
                }
                let own_tot = tot[own] - ku;
                let stay = links.get(&own).copied().unwrap_or_else(T::zero) - own_tot * ku / two_m;
                let mut consider = |c: usize, k_in: T, tot_c: T| {
                    let d = k_in - tot_c * ku / two_m - stay;
                    if pick.is_none_or(|(bd, _, _)| d > bd + eps) {
                        pick = Some((d, u, c));
                    }
                };
                for (&c, &k_in) in &links {
                    if c != own {
                        consider(c, k_in, tot[c]);
                    }
                }
                if size[own] > 1 {
                    if let Some(empty) = size.iter().position(|&s| s == 0) {
                        consider(empty, T::zero(), T::zero());
                    }
                }
            }
            let Some((d, u, c)) = pick else { break };
            let own = comm[u];
            tot[own] -= degree[u];
            size[own] -= 1;
            tot[c] += degree[u];
            size[c] += 1;
            comm[u] = c;
            locked[u] = true;
            moves.push((u, c));
            gain_sum += d;
            if gain_sum > best_sum + eps {
                best_sum = gain_sum;
                best_len = moves.len();
            }
        }
        if best_len == 0 {
            break;
        }
        for &(u, c) in &moves[..best_len] {
            labels[u] = c;
        }
    }
    Partition::from_labels(&labels)
}

/// Escapes local optima that need several nodes to switch at once: for each
/// pair of linked communities, merges them, lets only their nodes move, and
/// keeps the result when modularity rises. Repeats until no pair improves.
pub fn merge_refine<T: Scalar>(graph: &WeightedGraph<T>, start: Partition) -> Partition {
    let eps = T::epsilon() * T::of_usize(64) * (graph.total_weight_2m() + T::one());
    let mut best = start;
    let mut best_q = modularity(graph, &best);
    for _ in 0..graph.len() {
        let labels = best.assignment();
        let mut pairs: BTreeMap<(usize, usize), ()> = BTreeMap::new();
        for (u, v, _) in graph.edges() {
            let (a, b) = (labels[u], labels[v]);
            if a != b {
                pairs.insert((a.min(b), a.max(b)), ());
            }
        }
        let mut improved = false;
        for &(a, b) in pairs.keys() {
            let merged: Vec<usize> = labels.iter().map(|&c| if c == b { a } else { c }).collect();
            let nodes: Vec<usize> = (0..labels.len()).filter(|&u| merged[u] == a).collect();
            let (_, moved) = local_moving(graph, &nodes, merged);
            let trial = Partition::from_labels(&moved);
            let q = modularity(graph, &trial);
            if q > best_q + eps {
                best = trial;
                best_q = q;
                improved = true;
                break;
            }
        }
        if !improved {
            break;
        }
    }
    best
}

/// Single Louvain run with multilevel refinement.
///
/// Local moving runs to a fixed point, communities collapse into nodes, and
/// this repeats until a level produces no move. The final partition is then
/// projected back down the hierarchy and local moving is repeated on every
/// level, starting from the projection. A node moves only to the community
/// (a neighbouring one, or an empty one) with the strictly largest gain over
/// staying; among equal gains the first community met wins.
pub fn louvain_ordered<T: Scalar>(graph: &WeightedGraph<T>, order: VisitOrder) -> Partition {
    let n = graph.len();
    if n == 0 {
        return Partition {
            assignment: Vec::new(),
        };
    }
    if graph.total_weight_2m() <= T::zero() {
        return Partition::singletons(n);
    }
    let mut levels: Vec<(WeightedGraph<T>, Vec<usize>)> = Vec::new();
    let mut level = graph.clone();
    loop {
        let start: Vec<usize> = (0..level.len()).collect();
        let (moved, local) = local_moving(&level, &order.nodes(&level), start);
        let local = Partition::from_labels(&local);
        if !moved || local.community_count() == level.len() {
            break;
        }
        let next = collapse(&level, &local);
        levels.push((level, local.assignment().to_vec()));
        level = next;
    }
    let mut labels: Vec<usize> = (0..level.len()).collect();
    while let Some((g, up)) = levels.pop() {
        let projected: Vec<usize> = up.iter().map(|&c| labels[c]).collect();
        let (_, refined) = local_moving(&g, &order.nodes(&g), projected);
        labels = refined;
    }
    Partition::from_labels(&labels)
}

fn local_moving<T: Scalar>(
    g: &WeightedGraph<T>,
    order: &[usize],
    start: Vec<usize>,
) -> (bool, Vec<usize>) {
    let n = g.len();
    let two_m = g.total_weight_2m();
    let degree: Vec<T> = (0..n).map(|u| g.degree(u)).collect();
    let mut comm = Partition::from_labels(&start).assignment().to_vec();
    let mut tot: Vec<T> = vec![T::zero(); n];
    let mut size: Vec<usize> = vec![0; n];
    for u in 0..n {
        tot[comm[u]] += degree[u];
        size[comm[u]] += 1;
    }
    let mut moved_any = false;
    let mut links: BTreeMap<usize, T> = BTreeMap::new();
    let eps = T::epsilon() * T::of_usize(64) * (two_m + T::one());
    for _ in 0..MAX_SWEEPS {
        let mut moved = false;
        for &u in order {
            let ku = degree[u];
            let own = comm[u];
            links.clear();
            for (v, w) in g.neighbors(u) {
                *links.entry(comm[v]).or_insert_with(T::zero) += w;
            }
            tot[own] -= ku;
            size[own] -= 1;
            let gain = |c: usize, k_in: T, tot: &[T]| k_in - tot[c] * ku / two_m;
            let mut best = own;
            let mut best_gain = gain(own, links.get(&own).copied().unwrap_or_else(T::zero), &tot);
            for (&c, &k_in) in &links {
                if c == own {
                    continue;
                }
                let g_c = gain(c, k_in, &tot);
                if g_c > best_gain + eps {
                    best = c;
                    best_gain = g_c;
                }
            }
            if size[own] > 0 && T::zero() > best_gain + eps {
                if let Some(empty) = size.iter().position(|&s| s == 0) {
                    best = empty;
                }
            }
            tot[best] += ku;
            size[best] += 1;
            if best != own {
                comm[u] = best;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        moved_any = true;
    }
    (moved_any, comm)
}

/// One node per community; `A_cc` collects both directions of every internal edge plus internal loops.
fn collapse<T: Scalar>(g: &WeightedGraph<T>, p: &Partition) -> WeightedGraph<T> {
    let mut out = WeightedGraph::with_size(p.community_count());
    for u in 0..g.len() {
        let cu = p.community_of(u);
        let l = g.self_loop(u);
        if l > T::zero() {
            out.add_edge(cu, cu, l);
        }
    }
    for (u, v, w) in g.edges() {
        let (cu, cv) = (p.community_of(u), p.community_of(v));
        if cu == cv {
            out.add_edge(cu, cu, w + w);
        } else {
            out.add_edge(cu, cv, w);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    type G = WeightedGraph<f64>;

    fn graph(n: usize, edges: &[(usize, usize, f64)]) -> G {
        let mut g = G::with_size(n);
        for &(u, v, w) in edges {
            g.add_edge(u, v, w);
        }
        g
    }

    fn two_triangles(bridge: f64) -> G {
        let mut e = vec![
            (0, 1, 1.0),
            (0, 2, 1.0),
            (1, 2, 1.0),
            (3, 4, 1.0),
            (3, 5, 1.0),
            (4, 5, 1.0),
        ];
        if bridge > 0.0 {
            e.push((2, 3, bridge));
        }
        graph(6, &e)
    }

    #[test]
    fn single_edge_together_is_zero() {
        let g = graph(2, &[(0, 1, 1.0)]);
        assert!(modularity(&g, &Partition::single(2)).abs() < 1e-12);
    }

    #[test]
    fn singletons_reduce_to_degree_sum() {
        let g = two_triangles(0.01);
        let two_m = g.total_weight_2m();
        let expect: f64 = -(0..6).map(|u| (g.degree(u) / two_m).powi(2)).sum::<f64>();
        assert!((modularity(&g, &Partition::singletons(6)) - expect).abs() < 1e-12);
    }

    #[test]
    fn disconnected_triangles_half() {
        let g = two_triangles(0.0);
        let p = Partition::from_labels(&[0, 0, 0, 1, 1, 1]);
        assert!((modularity(&g, &p) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn recovers_bridged_triangles() {
        let p = louvain(&two_triangles(0.01));
        assert_eq!(p, Partition::from_labels(&[0, 0, 0, 1, 1, 1]));
    }

    #[test]
    fn trivial_graphs() {
        assert!(louvain(&G::with_size(0)).is_empty());
        assert_eq!(louvain(&G::with_size(1)), Partition::singletons(1));
        assert_eq!(louvain(&G::with_size(4)), Partition::singletons(4));
        assert_eq!(modularity(&G::with_size(3), &Partition::single(3)), 0.0);
    }

    #[test]
    fn collapse_preserves_modularity() {
        let g = two_triangles(0.3);
        let p = Partition::from_labels(&[0, 0, 1, 1, 2, 2]);
        let c = collapse(&g, &p);
        assert!((c.total_weight_2m() - g.total_weight_2m()).abs() < 1e-12);
        assert!((modularity(&c, &Partition::singletons(3)) - modularity(&g, &p)).abs() < 1e-12);
    }

    #[test]
    fn works_in_f32() {
        let mut g = WeightedGraph::<f32>::with_size(6);
        for &(u, v) in &[(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5)] {
            g.add_edge(u, v, 1.0);
        }
        g.add_edge(2, 3, 0.05);
        assert_eq!(louvain(&g).community_count(), 2);
    }

    #[test]
    fn kl_moves_a_pair_that_only_pays_off_together() {
        let g = graph(
            6,
            &[
                (0, 1, 0.25),
                (0, 2, 0.68),
                (0, 4, 0.84),
                (0, 5, 0.48),
                (1, 2, 0.16),
                (1, 3, 0.97),
                (1, 4, 0.97),
                (1, 5, 0.15),
                (2, 3, 0.42),
                (2, 4, 0.63),
                (3, 4, 0.79),
                (3, 5, 0.49),
                (4, 5, 0.98),
            ],
        );
        let stuck = Partition::from_labels(&[0, 1, 0, 1, 0, 0]);
        let refined = kl_refine(&g, stuck.clone());
        assert_eq!(refined, Partition::from_labels(&[0, 1, 0, 1, 1, 1]));
        assert!(modularity(&g, &refined) > modularity(&g, &stuck));
        assert_eq!(louvain(&g), refined);
    }
}
