//! Per-sample candidate graphs and the graph-convolutional update.
//!
//! Nodes are the fused (context, candidate) vectors of one sample. The layer is
//! `H' = act(D̂^{-1/2} (A + I) D̂^{-1/2} H W + b)`, optionally with an extra
//! self term `H W_root` inside the activation.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::dot_similarity;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Init};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    /// Every pair of distinct candidates is connected.
    #[default]
    Full,
    /// Each node links to its `k` highest dot-product neighbours, then the
    /// edge set is symmetrised by union.
    Knn,
}

impl fmt::Display for GraphMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphMode::Full => "full",
            GraphMode::Knn => "knn",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Symmetric 0/1 adjacency with zero diagonal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    edges: Vec<bool>,
}

impl Adjacency {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            edges: vec![false; n * n],
        }
    }

    pub fn full(n: usize) -> Self {
        let mut a = Self::empty(n);
        for u in 0..n {
            for v in 0..n {
                if u != v {
                    a.edges[u * n + v] = true;
                }
            }
        }
        a
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut a = Self::empty(n);
        for &(u, v) in edges {
            if u >= n || v >= n || u == v {
                return Err(Error::Input(format!(
                    "invalid edge ({u}, {v}) for {n} nodes"
                )));
            }
            a.connect(u, v);
        }
        Ok(a)
    }

    fn connect(&mut self, u: usize, v: usize) {
        self.edges[u * self.n + v] = true;
        self.edges[v * self.n + u] = true;
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edges[u * self.n + v]
    }

    /// Undirected edges `(u, v)` with `u < v`.
    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        (0..self.n)
            .flat_map(|u| (u + 1..self.n).map(move |v| (u, v)))
            .filter(|&(u, v)| self.has_edge(u, v))
            .collect()
    }

    /// `D̂^{-1/2} (A + I) D̂^{-1/2}` as an `[n, n]` matrix.
    pub fn normalized(&self) -> Tensor {
        let n = self.n;
        let deg: Vec<f64> = (0..n)
            .map(|u| 1.0 + (0..n).filter(|&v| self.has_edge(u, v)).count() as f64)
            .collect();
        let mut data = vec![0.0; n * n];
        for u in 0..n {
            for v in 0..n {
                if u == v || self.has_edge(u, v) {
                    data[u * n + v] = 1.0 / (deg[u] * deg[v]).sqrt();
                }
            }
        }
        Tensor::from_parts(vec![n, n], data)
    }
}

/// Node features plus topology for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateGraph {
    pub features: Tensor,
    pub adjacency: Adjacency,
}

/// Edge set over the rows of `features` (`[n, d]`).
pub fn build_adjacency(features: &Tensor, mode: GraphMode, k: usize) -> Result<Adjacency> {
    if features.rank() != 2 {
        return Err(Error::dim(
            "build_candidate_graph",
            format!("node features must be [n, d], got {:?}", features.shape()),
        ));
    }
    let n = features.shape()[0];
    match mode {
        GraphMode::Full => Ok(Adjacency::full(n)),
        GraphMode::Knn => {
            if k == 0 || k >= n {
                return Err(Error::Config(format!(
                    "graph_k must satisfy 1 <= k < n, got k={k} with n={n}"
                )));
            }
            let mut adj = Adjacency::empty(n);
            for u in 0..n {
                let mut others: Vec<(f64, usize)> = (0..n)
                    .filter(|&v| v != u)
                    .map(|v| Ok((dot_similarity(features.row(u), features.row(v))?, v)))
                    .collect::<Result<_>>()?;
                others.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                for &(_, v) in &others[..k] {
                    adj.connect(u, v);
                }
            }
            Ok(adj)
        }
    }
}

pub fn build_candidate_graph(
    features: Tensor,
    mode: GraphMode,
    k: usize,
) -> Result<CandidateGraph> {
    let adjacency = build_adjacency(&features, mode, k)?;
    Ok(CandidateGraph {
        features,
        adjacency,
    })
}

/// Dense layer parameters for the tensor-level API.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub root: Option<Tensor>,
    pub activation: Activation,
}

/// One graph-convolution step on plain tensors.
pub fn gcn_layer(g: &CandidateGraph, params: &GcnParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let h = tape.constant(g.features.clone());
    let w = tape.constant(params.weight.clone());
    let b = tape.constant(params.bias.clone());
    let root = params.root.clone().map(|r| tape.constant(r));
    let out = convolve(&mut tape, &g.adjacency, h, w, b, root, params.activation)?;
    Ok(tape.value(out).clone())
}

/// Identity pass-through used when the graph stage is ablated.
pub fn gcn_bypass(g: &CandidateGraph) -> Tensor {
    g.features.clone()
}

fn convolve(
    tape: &mut Tape,
    adj: &Adjacency,
    h: Var,
    w: Var,
    b: Var,
    root: Option<Var>,
    act: Activation,
) -> Result<Var> {
    let (hs, ws) = (tape.shape(h).to_vec(), tape.shape(w).to_vec());
    if hs.len() != 2 || ws.len() != 2 || hs[1] != ws[0] || hs[0] != adj.len() {
        return Err(Error::dim(
            "gcn_layer",
            format!("features {hs:?}, weight {ws:?}, {} nodes", adj.len()),
        ));
    }
    let norm = tape.constant(adj.normalized());
    let hw = tape.matmul(h, w)?;
    let mut z = tape.matmul(norm, hw)?;
    if let Some(r) = root {
        let self_term = tape.matmul(h, r)?;
        z = tape.add(z, self_term)?;
    }
    let z = tape.add(z, b)?;
    match act {
        Activation::Relu => tape.relu(z),
        Activation::Identity => Ok(z),
    }
}

pub fn init_params<R: Rng>(
    init: &mut Init<'_, R>,
    prefix: &str,
    d: usize,
    layers: usize,
    root: bool,
) {
    for l in 0..layers {
        init.linear(&format!("{prefix}.{l}"), d, d);
        if root {
            init.weight(&format!("{prefix}.{l}.root"), d, d);
        }
    }
}

/// `layers` ReLU graph convolutions over `h` (`[n, d]`) with parameters
/// `{prefix}.{l}.weight`, `.bias` and, when present, `.root`.
pub fn gcn_forward(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    adj: &Adjacency,
    h: Var,
    layers: usize,
) -> Result<Var> {
    let mut h = h;
    for l in 0..layers {
        let w = p.var(&format!("{prefix}.{l}.weight"))?;
        let b = p.var(&format!("{prefix}.{l}.bias"))?;
        let root = p.var(&format!("{prefix}.{l}.root")).ok();
        h = convolve(tape, adj, h, w, b, root, Activation::Relu)?;
    }
    Ok(h)
}

/// Adjacency of a sample graph built from the current node values.
pub fn adjacency_for(tape: &Tape, h: Var, mode: GraphMode, k: usize) -> Result<Adjacency> {
    build_adjacency(tape.value(h), mode, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_params(d: usize) -> GcnParams {
        GcnParams {
            weight: Tensor::eye(d),
            bias: Tensor::zeros(&[d]),
            root: None,
            activation: Activation::Identity,
        }
    }

    /// Per-node sum over the closed neighbourhood with explicit weights.
    fn brute_force(g: &CandidateGraph, p: &GcnParams) -> Vec<Vec<f64>> {
        let n = g.adjacency.len();
        let d_in = g.features.shape()[1];
        let d_out = p.weight.shape()[1];
        let deg = |u: usize| 1 + (0..n).filter(|&v| g.adjacency.has_edge(u, v)).count();
        let hw: Vec<Vec<f64>> = (0..n)
            .map(|u| {
                (0..d_out)
                    .map(|o| {
                        (0..d_in)
                            .map(|i| g.features.row(u)[i] * p.weight.data()[i * d_out + o])
                            .sum()
                    })
                    .collect()
            })
            .collect();
        (0..n)
            .map(|k| {
                let mut acc = p.bias.data().to_vec();
                for j in 0..n {
                    if j == k || g.adjacency.has_edge(k, j) {
                        let c = 1.0 / ((deg(k) * deg(j)) as f64).sqrt();
                        acc.iter_mut().zip(&hw[j]).for_each(|(a, v)| *a += c * v);
                    }
                }
                match p.activation {
                    Activation::Relu => acc.iter().map(|v| v.max(0.0)).collect(),
                    Activation::Identity => acc,
                }
            })
            .collect()
    }

    #[test]
    fn self_loops_only_is_identity() {
        let h = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0], vec![4.0, 0.0]]).unwrap();
        let g = CandidateGraph {
            features: h.clone(),
            adjacency: Adjacency::empty(3),
        };
        assert_eq!(gcn_layer(&g, &identity_params(2)).unwrap(), h);
    }

    #[test]
    fn two_node_worked_example() {
        let g = CandidateGraph {
            features: Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap(),
            adjacency: Adjacency::from_edges(2, &[(0, 1)]).unwrap(),
        };
        let out = gcn_layer(&g, &identity_params(2)).unwrap();
        assert_eq!(out.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn matches_brute_force_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..100 {
            let n = rng.random_range(1..=6);
            let (d_in, d_out) = (rng.random_range(1..=4), rng.random_range(1..=4));
            let edges: Vec<(usize, usize)> = (0..n)
                .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
                .filter(|_| rng.random_bool(0.5))
                .collect();
            let g = CandidateGraph {
                features: Tensor::randn(&[n, d_in], 1.0, &mut rng),
                adjacency: Adjacency::from_edges(n, &edges).unwrap(),
            };
            let p = GcnParams {
                weight: Tensor::randn(&[d_in, d_out], 1.0, &mut rng),
                bias: Tensor::randn(&[d_out], 1.0, &mut rng),
                root: None,
                activation: if trial % 2 == 0 {
                    Activation::Relu
                } else {
                    Activation::Identity
                },
            };
            let out = gcn_layer(&g, &p).unwrap();
            for (k, row) in brute_force(&g, &p).iter().enumerate() {
                for (a, b) in out.row(k).iter().zip(row) {
                    assert!((a - b).abs() <= 1e-12, "trial {trial}");
                }
            }
        }
    }

    #[test]
    fn normalized_rows_sum_as_expected() {
        let adj = Adjacency::from_edges(5, &[(0, 1), (1, 2), (1, 3), (3, 4)]).unwrap();
        let norm = adj.normalized();
        let deg = [2.0, 4.0, 2.0, 3.0, 2.0];
        for k in 0..5 {
            let expect: f64 = (0..5)
                .filter(|&j| j == k || adj.has_edge(k, j))
                .map(|j| 1.0 / (deg[k] * deg[j] as f64).sqrt())
                .sum();
            let got: f64 = norm.row(k).iter().sum();
            assert!((got - expect).abs() <= 1e-15);
        }
    }

    #[test]
    fn full_mode_edge_count_and_knn_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Tensor::randn(&[10, 4], 1.0, &mut rng);
        let full = build_adjacency(&h, GraphMode::Full, 0).unwrap();
        assert_eq!(full.edge_list().len(), 45);
        assert_eq!(build_adjacency(&h, GraphMode::Knn, 9).unwrap(), full);
        assert!(matches!(
            build_adjacency(&h, GraphMode::Knn, 10),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_adjacency(&h, GraphMode::Knn, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn knn_hand_case() {
        let h = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 1e-3], vec![0.0, 1.0]]).unwrap();
        let adj = build_adjacency(&h, GraphMode::Knn, 1).unwrap();
        assert_eq!(adj.edge_list(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn knn_ties_prefer_lower_index() {
        let h = Tensor::from_rows(&[vec![1.0], vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        let adj = build_adjacency(&h, GraphMode::Knn, 1).unwrap();
        assert_eq!(adj.edge_list(), vec![(0, 1), (0, 2), (0, 3)]);
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let edges = [(0, 1), (0, 4), (2, 3), (1, 3)];
        let p = GcnParams {
            weight: Tensor::randn(&[3, 3], 1.0, &mut rng),
            bias: Tensor::randn(&[3], 1.0, &mut rng),
            root: Some(Tensor::randn(&[3, 3], 1.0, &mut rng)),
            activation: Activation::Relu,
        };
        let perm = [3, 0, 4, 1, 2];
        let g = CandidateGraph {
            features: h.clone(),
            adjacency: Adjacency::from_edges(5, &edges).unwrap(),
        };
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| h.row(i).to_vec()).collect();
        let mut inv = [0; 5];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let pedges: Vec<(usize, usize)> = edges.iter().map(|&(u, v)| (inv[u], inv[v])).collect();
        let gp = CandidateGraph {
            features: Tensor::from_rows(&rows).unwrap(),
            adjacency: Adjacency::from_edges(5, &pedges).unwrap(),
        };
        let (out, outp) = (gcn_layer(&g, &p).unwrap(), gcn_layer(&gp, &p).unwrap());
        for (new, &old) in perm.iter().enumerate() {
            for (a, b) in outp.row(new).iter().zip(out.row(old)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_give_activation_of_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = build_candidate_graph(Tensor::randn(&[4, 3], 1.0, &mut rng), GraphMode::Full, 0)
            .unwrap();
        let p = GcnParams {
            weight: Tensor::zeros(&[3, 2]),
            bias: Tensor::zeros(&[2]),
            root: None,
            activation: Activation::Relu,
        };
        assert!(gcn_layer(&g, &p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_graph_without_root_collapses_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = build_candidate_graph(Tensor::randn(&[10, 3], 1.0, &mut rng), GraphMode::Full, 0)
            .unwrap();
        let mut p = GcnParams {
            weight: Tensor::randn(&[3, 3], 1.0, &mut rng),
            bias: Tensor::zeros(&[3]),
            root: None,
            activation: Activation::Identity,
        };
        let out = gcn_layer(&g, &p).unwrap();
        for k in 1..10 {
            for (a, b) in out.row(k).iter().zip(out.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        p.root = Some(Tensor::eye(3));
        let out = gcn_layer(&g, &p).unwrap();
        assert_ne!(out.row(1), out.row(0));
    }

    #[test]
    fn bypass_is_identity_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = build_candidate_graph(Tensor::randn(&[10, 6], 1.0, &mut rng), GraphMode::Full, 0)
            .unwrap();
        let once = gcn_bypass(&g);
        assert_eq!(once, g.features);
        let twice = gcn_bypass(&CandidateGraph {
            features: once.clone(),
            adjacency: g.adjacency.clone(),
        });
        assert_eq!(twice, once);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let g = build_candidate_graph(Tensor::zeros(&[3, 2]), GraphMode::Full, 0).unwrap();
        assert!(matches!(
            gcn_layer(&g, &identity_params(3)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn tape_layer_gradients() {
        let mut store = crate::nn::ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        init_params(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
            },
            "gcn",
            3,
            2,
            true,
        );
        let names: Vec<String> = store.names().cloned().collect();
        let mut values: Vec<Tensor> = names
            .iter()
            .map(|n| store.get(n).unwrap().clone())
            .collect();
        values.push(Tensor::randn(&[4, 3], 1.0, &mut rng));
        let weights = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let adj = Adjacency::from_edges(4, &[(0, 1), (1, 2), (0, 3)]).unwrap();
        let report = crate::autodiff::grad_check(
            |tape, vars| {
                let mut p = store.bind(tape, false);
                for (n, &v) in names.iter().zip(vars) {
                    p = p.with(n, v);
                }
                let h = gcn_forward(tape, &p, "gcn", &adj, vars[vars.len() - 1], 2)?;
                let w = tape.constant(weights.clone());
                let y = tape.mul(h, w)?;
                tape.mean_all(y)
            },
            &values,
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
