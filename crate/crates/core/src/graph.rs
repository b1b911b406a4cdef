//! Stroke graphs and the two-layer dynamic edge convolution.
//!
//! Layer 1 runs on sequential edges united with feature-space k-NN edges
//! (dilation 1). Layer 2 rebuilds its edges from layer-1 output with
//! dilation 2. Both layers are residual.

use std::collections::BTreeSet;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{Init, Linear};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_K: usize = 4;
pub const LAYER_DILATIONS: [usize; 2] = [1, 2];

/// Directed edges `(src, dst)`: `dst` aggregates messages from `src`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrokeGraph {
    pub n_nodes: usize,
    pub edges: Vec<(usize, usize)>,
}

impl StrokeGraph {
    pub fn empty(n_nodes: usize) -> Self {
        Self {
            n_nodes,
            edges: Vec::new(),
        }
    }

    pub fn neighbors_of(&self, node: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|e| e.1 == node)
            .map(|e| e.0)
            .collect()
    }

    pub fn in_degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|e| e.1 == node).count()
    }

    /// Edge-set union, sorted and deduplicated.
    pub fn union(&self, other: &StrokeGraph) -> StrokeGraph {
        let edges: BTreeSet<(usize, usize)> =
            self.edges.iter().chain(&other.edges).copied().collect();
        StrokeGraph {
            n_nodes: self.n_nodes.max(other.n_nodes),
            edges: edges.into_iter().collect(),
        }
    }
}

/// Bidirectional edges between strokes adjacent in drawing order.
pub fn build_sequential_graph(n: usize) -> Result<StrokeGraph> {
    if n == 0 {
        return Err(Error::Invalid("graph needs at least one stroke".into()));
    }
    let edges = (0..n - 1).flat_map(|i| [(i, i + 1), (i + 1, i)]).collect();
    Ok(StrokeGraph { n_nodes: n, edges })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    pub graph: StrokeGraph,
    /// Nodes whose neighbourhood had to be clamped (`k * dilation > n - 1`).
    pub clamped: usize,
}

/// Dilated k-NN: for each node, sort the other nodes by Euclidean distance
/// (ties by index) and keep ranks `dilation, 2*dilation, ..., k*dilation`.
/// When fewer than `k*dilation` neighbours exist, every `dilation`-th of the
/// available ones is kept (at least the farthest one reachable).
pub fn dilated_knn(features: &Tensor, k: usize, dilation: usize) -> Result<KnnGraph> {
    if k == 0 || dilation == 0 {
        return Err(Error::Invalid(format!(
            "k ({k}) and dilation ({dilation}) must be positive"
        )));
    }
    let n = features.rows();
    let mut edges = Vec::new();
    let mut clamped = 0;
    if n <= 1 {
        return Ok(KnnGraph {
            graph: StrokeGraph::empty(n),
            clamped,
        });
    }
    for node in 0..n {
        let here = features.row(node);
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != node)
            .map(|j| {
                let d: f64 = here
                    .iter()
                    .zip(features.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (d.sqrt(), j)
            })
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let available = others.len();
        if k * dilation > available {
            clamped += 1;
        }
        let mut picked: Vec<usize> = (1..=k)
            .map(|m| m * dilation)
            .take_while(|&rank| rank <= available)
            .map(|rank| others[rank - 1].1)
            .collect();
        if picked.is_empty() {
            picked.push(others[available - 1].1);
        }
        edges.extend(picked.into_iter().map(|src| (src, node)));
    }
    Ok(KnnGraph {
        graph: StrokeGraph { n_nodes: n, edges },
        clamped,
    })
}

/// Edge function `MLP([x_i, x_j - x_i])` with one hidden layer of width `d`.
#[derive(Debug, Clone, Copy)]
pub struct EdgeConvLayer {
    pub hidden: Linear,
    pub out: Linear,
    pub width: usize,
}

impl EdgeConvLayer {
    pub fn new(init: &mut Init<'_>, name: &str, width: usize) -> Self {
        init.scoped(name, |init| Self {
            hidden: Linear::new(init, "hidden", 2 * width, width),
            out: Linear::new(init, "out", width, width),
            width,
        })
    }

    /// `x_i + max_{j -> i} MLP([x_i, x_j - x_i])`; nodes without neighbours pass through.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        graph: &StrokeGraph,
    ) -> Result<Var<'t>> {
        let (n, d) = x.dims();
        if d != self.width {
            return Err(Error::Shape(format!(
                "edge conv width {} applied to {:?}",
                self.width,
                (n, d)
            )));
        }
        if graph.edges.iter().any(|&(s, t)| s >= n || t >= n) {
            return Err(Error::Invalid(format!(
                "graph edge out of range for {n} nodes"
            )));
        }
        if graph.edges.is_empty() {
            return Ok(x);
        }
        // [x_i, x_j - x_i] W = x_i (W_top - W_bottom) + x_j W_bottom, evaluated per node.
        let w = tape.param(store, self.hidden.weight);
        let w_top = w.slice(0, 0, d)?;
        let w_bottom = w.slice(0, d, d)?;
        let centre = x.matmul(w_top.sub(w_bottom)?)?;
        let neighbour = x.matmul(w_bottom)?;
        let src: Vec<usize> = graph.edges.iter().map(|e| e.0).collect();
        let dst: Vec<usize> = graph.edges.iter().map(|e| e.1).collect();
        let pre = centre
            .gather_rows(&dst)?
            .add(neighbour.gather_rows(&src)?)?
            .add(tape.param(store, self.hidden.bias))?;
        let messages = self.out.forward(tape, store, pre.gelu())?;
        x.add(messages.segment_max(&dst, n)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GraphParams {
    pub layers: [EdgeConvLayer; 2],
    pub k: usize,
}

impl GraphParams {
    pub fn new(init: &mut Init<'_>, width: usize, k: usize) -> Self {
        init.scoped("graph", |init| Self {
            layers: [
                EdgeConvLayer::new(init, "layer1", width),
                EdgeConvLayer::new(init, "layer2", width),
            ],
            k,
        })
    }

    /// Returns the stroke features `Q` and the number of clamped k-NN neighbourhoods.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        embeddings: Var<'t>,
    ) -> Result<(Var<'t>, usize)> {
        let n = embeddings.dims().0;
        let sequential = build_sequential_graph(n)?;
        let knn1 = dilated_knn(&embeddings.value(), self.k, LAYER_DILATIONS[0])?;
        let first =
            self.layers[0].forward(tape, store, embeddings, &sequential.union(&knn1.graph))?;
        let knn2 = dilated_knn(&first.value(), self.k, LAYER_DILATIONS[1])?;
        let q = self.layers[1].forward(tape, store, first, &knn2.graph)?;
        Ok((q, knn1.clamped + knn2.clamped))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck;

    fn layer(width: usize, seed: u64) -> (ParamStore, EdgeConvLayer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let l = EdgeConvLayer::new(&mut init, "l", width);
        // Larger weights than the default init so the max actually discriminates.
        for p in store.iter_mut() {
            p.value = p.value.map(|v| v * 20.0);
        }
        (store, l)
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x * x * x)).tanh())
    }

    /// Per-node loop evaluation of the edge convolution.
    fn naive_edgeconv(
        store: &ParamStore,
        l: &EdgeConvLayer,
        x: &Tensor,
        graph: &StrokeGraph,
    ) -> Tensor {
        let (n, d) = x.dims();
        let w1 = store.value(l.hidden.weight);
        let b1 = store.value(l.hidden.bias);
        let w2 = store.value(l.out.weight);
        let b2 = store.value(l.out.bias);
        let mut out = x.clone();
        for i in 0..n {
            let mut best: Option<Vec<f64>> = None;
            for j in graph.neighbors_of(i) {
                let input: Vec<f64> = (0..2 * d)
                    .map(|c| {
                        if c < d {
                            x.get(i, c)
                        } else {
                            x.get(j, c - d) - x.get(i, c - d)
                        }
                    })
                    .collect();
                let hidden: Vec<f64> = (0..d)
                    .map(|h| {
                        gelu(
                            b1.get(0, h) + (0..2 * d).map(|c| input[c] * w1.get(c, h)).sum::<f64>(),
                        )
                    })
                    .collect();
                let msg: Vec<f64> = (0..d)
                    .map(|o| b2.get(0, o) + (0..d).map(|h| hidden[h] * w2.get(h, o)).sum::<f64>())
                    .collect();
                best = Some(match best {
                    None => msg,
                    Some(b) => b.iter().zip(&msg).map(|(a, m)| a.max(*m)).collect(),
                });
            }
            if let Some(b) = best {
                for c in 0..d {
                    out.set(i, c, x.get(i, c) + b[c]);
                }
            }
        }
        out
    }

    #[test]
    fn sequential_graphs() {
        assert!(build_sequential_graph(0).is_err());
        assert!(build_sequential_graph(1).unwrap().edges.is_empty());
        assert_eq!(build_sequential_graph(2).unwrap().edges.len(), 2);
        let mut e = build_sequential_graph(3).unwrap().edges;
        e.sort();
        assert_eq!(e, vec![(0, 1), (1, 0), (1, 2), (2, 1)]);
    }

    #[test]
    fn collinear_dilated_neighbours() {
        // Six points on a line at x = 0..5; node 2 sorted by distance is
        // [1, 3, 0, 4, 5] (ties by index), so ranks 2 and 4 are nodes 3 and 4.
        let x = Tensor::matrix(6, 1, (0..6).map(|v| v as f64).collect()).unwrap();
        let g = dilated_knn(&x, 2, 2).unwrap().graph;
        let mut n2 = g.neighbors_of(2);
        n2.sort();
        assert_eq!(n2, vec![3, 4]);

        // Brute force: sort distances independently and take the ranks.
        for node in 0..6 {
            let mut order: Vec<usize> = (0..6).filter(|&j| j != node).collect();
            order.sort_by_key(|&j| ((j as i64 - node as i64).abs(), j));
            let expected: BTreeSet<usize> = [order[1], order[3]].into_iter().collect();
            let got: BTreeSet<usize> = g.neighbors_of(node).into_iter().collect();
            assert_eq!(got, expected, "node {node}");
        }
    }

    #[test]
    fn dilation_one_is_plain_knn() {
        let x = Tensor::matrix(5, 1, vec![0.0, 0.1, 0.5, 2.0, 2.2]).unwrap();
        let g = dilated_knn(&x, 2, 1).unwrap().graph;
        let mut n0 = g.neighbors_of(0);
        n0.sort();
        assert_eq!(n0, vec![1, 2]);
    }

    #[test]
    fn knn_edge_cases() {
        let one = Tensor::zeros(1, 3);
        let r = dilated_knn(&one, 4, 2).unwrap();
        assert!(r.graph.edges.is_empty());

        let three = Tensor::matrix(3, 1, vec![0.0, 1.0, 3.0]).unwrap();
        let r = dilated_knn(&three, 4, 2).unwrap();
        assert_eq!(r.clamped, 3);
        for node in 0..3 {
            assert_eq!(r.graph.in_degree(node), 1);
        }
        assert!(dilated_knn(&three, 0, 1).is_err());
    }

    #[test]
    fn empty_graph_is_pure_residual() {
        let (store, l) = layer(3, 1);
        let tape = Tape::new();
        let x = Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![-0.5, 0.4, 0.0]]);
        let out = l
            .forward(&tape, &store, tape.leaf(x.clone()), &StrokeGraph::empty(2))
            .unwrap();
        assert_eq!(*out.value(), x);
    }

    #[test]
    fn single_neighbour_is_message_plus_residual() {
        let (store, l) = layer(3, 2);
        let x = Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![-0.5, 0.4, 0.0]]);
        let g = StrokeGraph {
            n_nodes: 2,
            edges: vec![(0, 1)],
        };
        let tape = Tape::new();
        let out = l
            .forward(&tape, &store, tape.leaf(x.clone()), &g)
            .unwrap()
            .value()
            .clone();
        let naive = naive_edgeconv(&store, &l, &x, &g);
        assert!(out.max_abs_diff(&naive) < 1e-12);
        assert_eq!(out.row(0), x.row(0));
    }

    #[test]
    fn matches_loop_oracle_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..20 {
            let (store, l) = layer(4, trial);
            let n = 2 + trial as usize % 7;
            let x = Tensor::randn(n, 4, 1.0, &mut rng);
            let g = build_sequential_graph(n)
                .unwrap()
                .union(&dilated_knn(&x, 3, 1 + trial as usize % 2).unwrap().graph);
            let tape = Tape::new();
            let out = l
                .forward(&tape, &store, tape.leaf(x.clone()), &g)
                .unwrap()
                .value()
                .clone();
            assert!(out.max_abs_diff(&naive_edgeconv(&store, &l, &x, &g)) <= 1e-12);
        }
    }

    #[test]
    fn zero_weights_make_module_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gp = GraphParams::new(&mut Init::new(&mut store, &mut rng), 4, 2);
        for p in store.iter_mut() {
            p.value = p.value.map(|_| 0.0);
        }
        let x = Tensor::randn(5, 4, 1.0, &mut rng);
        let tape = Tape::new();
        let (q, _) = gp.forward(&tape, &store, tape.leaf(x.clone())).unwrap();
        assert_eq!(*q.value(), x);
    }

    #[test]
    fn single_stroke_passes_through() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gp = GraphParams::new(&mut Init::new(&mut store, &mut rng), 4, 4);
        let x = Tensor::randn(1, 4, 1.0, &mut rng);
        let tape = Tape::new();
        let (q, _) = gp.forward(&tape, &store, tape.leaf(x.clone())).unwrap();
        assert_eq!(*q.value(), x);
    }

    #[test]
    fn graph_module_gradients() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gp = GraphParams::new(&mut Init::new(&mut store, &mut rng), 3, 2);
        for p in store.iter_mut() {
            p.value = p.value.map(|v| v * 25.0);
        }
        let x = Tensor::randn(5, 3, 1.0, &mut rng);
        let report = gradcheck::check_params(&mut store, |tape, store| {
            let (q, _) = gp.forward(tape, store, tape.leaf(x.clone()))?;
            Ok(q.tanh().sum())
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");

        let report = gradcheck::check_inputs(&[x.clone()], |tape, xs| {
            let (q, _) = gp.forward(tape, &store, xs[0])?;
            Ok(q.tanh().sum())
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    proptest! {
        #[test]
        fn knn_degree_is_k_when_enough_nodes(n in 2usize..12, k in 1usize..4, dil in 1usize..3, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(n, 3, 1.0, &mut rng);
            let g = dilated_knn(&x, k, dil).unwrap();
            for node in 0..n {
                if k * dil <= n - 1 {
                    prop_assert_eq!(g.graph.in_degree(node), k);
                }
                prop_assert!(!g.graph.neighbors_of(node).contains(&node));
            }
        }

        #[test]
        fn edgeconv_is_permutation_equivariant(n in 2usize..8, seed in 0u64..500) {
            let (store, l) = layer(3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let x = Tensor::randn(n, 3, 1.0, &mut rng);
            let g = dilated_knn(&x, 2, 1).unwrap().graph.union(&build_sequential_graph(n).unwrap());
            let mut perm: Vec<usize> = (0..n).collect();
            perm.rotate_left(seed as usize % n);
            perm.swap(0, n - 1);
            // new node p holds old node perm[p]
            let mut inverse = vec![0; n];
            for (p, &old) in perm.iter().enumerate() {
                inverse[old] = p;
            }
            let px = Tensor::from_rows(&perm.iter().map(|&o| x.row(o).to_vec()).collect::<Vec<_>>());
            let pg = StrokeGraph {
                n_nodes: n,
                edges: g.edges.iter().map(|&(s, t)| (inverse[s], inverse[t])).collect(),
            };
            let tape = Tape::new();
            let out = l.forward(&tape, &store, tape.leaf(x.clone()), &g).unwrap().value().clone();
            let pout = l.forward(&tape, &store, tape.leaf(px), &pg).unwrap().value().clone();
            for (p, &old) in perm.iter().enumerate() {
                for c in 0..3 {
                    prop_assert!((pout.get(p, c) - out.get(old, c)).abs() < 1e-12);
                }
            }
        }
    }
}
