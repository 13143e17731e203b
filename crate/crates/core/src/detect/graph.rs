use std::collections::BTreeMap;

use crate::scalar::Scalar;
use crate::text::SparseVector;

/// Undirected weighted graph over string-named nodes.
///
/// Nodes are kept sorted by id, so node indices (and everything derived from
/// them) are reproducible. Self-loops are stored separately as the diagonal
/// entry `A_ii`; similarity graphs never carry them, but the graphs Louvain
/// builds between passes do.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedGraph<T: Scalar> {
    ids: Vec<String>,
    adj: Vec<BTreeMap<usize, T>>,
    loops: Vec<T>,
}

impl<T: Scalar> WeightedGraph<T> {
    /// Graph with the given nodes (deduplicated and sorted) and no edges.
    pub fn with_nodes<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut ids: Vec<String> = ids.into_iter().map(Into::into).collect();
        ids.sort();
        ids.dedup();
        let n = ids.len();
        WeightedGraph {
            ids,
            adj: vec![BTreeMap::new(); n],
            loops: vec![T::zero(); n],
        }
    }

    /// Anonymous nodes named by zero-padded index, so sorted order is index order.
    pub fn with_size(n: usize) -> Self {
        let width = n.to_string().len();
        Self::with_nodes((0..n).map(|i| format!("{i:0width$}")))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.binary_search_by(|x| x.as_str().cmp(id)).ok()
    }

    /// Adds `w` to the edge `{u, v}`. For `u == v` this adds `w` to `A_uu`.
    pub fn add_edge(&mut self, u: usize, v: usize, w: T) {
        if u == v {
            self.loops[u] += w;
            return;
        }
        *self.adj[u].entry(v).or_insert_with(T::zero) += w;
        *self.adj[v].entry(u).or_insert_with(T::zero) += w;
    }

    pub fn weight(&self, u: usize, v: usize) -> T {
        if u == v {
            return self.loops[u];
        }
        self.adj[u].get(&v).copied().unwrap_or_else(T::zero)
    }

    pub fn self_loop(&self, u: usize) -> T {
        self.loops[u]
    }

    /// Off-diagonal neighbours of `u` in index order.
    pub fn neighbors(&self, u: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        self.adj[u].iter().map(|(v, w)| (*v, *w))
    }

    /// Each undirected off-diagonal edge once, as `(u, v, w)` with `u < v`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        self.adj
            .iter()
            .enumerate()
            .flat_map(|(u, m)| m.range(u + 1..).map(move |(v, w)| (u, *v, *w)))
    }

    pub fn edge_count(&self) -> usize {
        self.edges().count()
    }

    /// Weighted degree `k_u = Σ_j A_uj`, diagonal included.
    pub fn degree(&self, u: usize) -> T {
        self.adj[u].values().copied().sum::<T>() + self.loops[u]
    }

    /// `2m = Σ_ij A_ij`.
    pub fn total_weight_2m(&self) -> T {
        (0..self.len()).map(|u| self.degree(u)).sum()
    }
}

/// Graph over packets and clusters whose edges are cosine similarities at or above a threshold.
pub type SimilarityGraph = WeightedGraph<f64>;

/// Connects every pair of nodes whose vectors have cosine at least `threshold`.
/// Node ids must be unique.
pub fn build_similarity_graph<T: Scalar>(
    nodes: &[(String, &SparseVector<T>)],
    threshold: T,
) -> WeightedGraph<T> {
    let g = WeightedGraph::with_nodes(nodes.iter().map(|(id, _)| id.clone()));
    assert_eq!(g.len(), nodes.len(), "duplicate node ids");
    let mut vecs: Vec<Option<&SparseVector<T>>> = vec![None; nodes.len()];
    for (id, v) in nodes {
        vecs[g.index_of(id).expect("node present")] = Some(*v);
    }
    let vecs: Vec<&SparseVector<T>> = vecs
        .into_iter()
        .map(|v| v.expect("every node has a vector"))
        .collect();
    connect(g, &vecs, threshold)
}

fn connect<T: Scalar>(
    mut g: WeightedGraph<T>,
    vecs: &[&SparseVector<T>],
    threshold: T,
) -> WeightedGraph<T> {
    // Only pairs sharing a term can have a positive cosine.
    let mut postings: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, v) in vecs.iter().enumerate() {
        if v.norm() > T::zero() {
            for t in v.terms() {
                postings.entry(t).or_default().push(i);
            }
        }
    }
    let mut stamp = vec![usize::MAX; vecs.len()];
    for (i, v) in vecs.iter().enumerate() {
        if v.norm() == T::zero() {
            continue;
        }
        let mut cand = Vec::new();
        for t in v.terms() {
            let list = &postings[t];
            let from = list.partition_point(|&j| j <= i);
            for &j in &list[from..] {
                if stamp[j] != i {
                    stamp[j] = i;
                    cand.push(j);
                }
            }
        }
        cand.sort_unstable();
        for j in cand {
            let c = v.cosine(vecs[j]);
            if c >= threshold && c > T::zero() {
                g.add_edge(i, j, c);
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    type V = SparseVector<f64>;

    #[test]
    fn identical_texts_one_full_edge() {
        let a = V::indicator(["fire", "downtown"]);
        let b = a.clone();
        let g = build_similarity_graph(&[("p:a".into(), &a), ("p:b".into(), &b)], 0.3);
        assert_eq!(g.edge_count(), 1);
        assert!((g.weight(0, 1) - 1.0).abs() < 1e-12);
        assert_eq!(g.self_loop(0), 0.0);
    }

    #[test]
    fn disjoint_vocabularies_edgeless() {
        let a = V::indicator(["fire"]);
        let b = V::indicator(["concert"]);
        let z = V::zero();
        let g =
            build_similarity_graph(&[("a".into(), &a), ("b".into(), &b), ("z".into(), &z)], 0.3);
        assert_eq!(g.edge_count(), 0);
        assert_eq!(g.total_weight_2m(), 0.0);
    }

    #[test]
    fn threshold_against_hand_cosine() {
        // Packet {a,b,c,d} against a centroid sharing half of its terms: 2/(2*2) = 0.5.
        let p = V::indicator(["a", "b", "c", "d"]);
        let c = V::indicator(["a", "b", "x", "y"]);
        let g = build_similarity_graph(&[("c:1".into(), &c), ("p:1".into(), &p)], 0.5);
        assert!((g.weight(0, 1) - 0.5).abs() < 1e-12);
        let g = build_similarity_graph(&[("c:1".into(), &c), ("p:1".into(), &p)], 0.51);
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn nodes_sorted_and_symmetric() {
        let v = V::indicator(["x"]);
        let g =
            build_similarity_graph(&[("z".into(), &v), ("a".into(), &v), ("m".into(), &v)], 0.3);
        assert_eq!(g.ids(), &["a", "m", "z"]);
        for (u, w, x) in g.edges() {
            assert_eq!(g.weight(w, u), x);
        }
        assert!((g.total_weight_2m() - 6.0).abs() < 1e-12);
    }
}
