//! Collaborative item embeddings: LightGCN-style propagation over the
//! user-item bipartite graph, trained with BPR and Adam.

use ndarray::{Array2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SplitDataset;
use crate::optim::{derive_seed, gaussian_matrix, rng_from_seed, Adam};
use crate::{Error, Result, Scalar};

/// Deduplicated training edges with per-side adjacency lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BipartiteGraph {
    pub n_users: usize,
    pub n_items: usize,
    /// Sorted, distinct `(user, item)` pairs.
    pub edges: Vec<(u32, u32)>,
    pub user_adj: Vec<Vec<u32>>,
    pub item_adj: Vec<Vec<u32>>,
    pub deg_u: Vec<u32>,
    pub deg_i: Vec<u32>,
}

impl BipartiteGraph {
    pub fn from_edges(n_users: usize, n_items: usize, mut edges: Vec<(u32, u32)>) -> Result<Self> {
        edges.sort_unstable();
        edges.dedup();
        let mut user_adj = vec![Vec::new(); n_users];
        let mut item_adj = vec![Vec::new(); n_items];
        for &(u, i) in &edges {
            if u as usize >= n_users || i as usize >= n_items {
                return Err(Error::invalid(format!(
                    "edge ({u}, {i}) outside a {n_users}x{n_items} graph"
                )));
            }
            user_adj[u as usize].push(i);
            item_adj[i as usize].push(u);
        }
        // edges are sorted by (u, i), so user lists are already sorted
        item_adj.iter_mut().for_each(|a| a.sort_unstable());
        let deg_u = user_adj.iter().map(|a| a.len() as u32).collect();
        let deg_i = item_adj.iter().map(|a| a.len() as u32).collect();
        Ok(Self {
            n_users,
            n_items,
            edges,
            user_adj,
            item_adj,
            deg_u,
            deg_i,
        })
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, u: u32, i: u32) -> bool {
        self.user_adj[u as usize].binary_search(&i).is_ok()
    }
}

/// One edge per distinct (user, item) pair of the training prefixes.
pub fn build_graph(split: &SplitDataset) -> Result<BipartiteGraph> {
    let edges: Vec<(u32, u32)> = split
        .users
        .iter()
        .flat_map(|u| u.train.iter().map(move |&i| (u.user, i)))
        .collect();
    if edges.is_empty() {
        return Err(Error::EmptyDataset("no training interactions".into()));
    }
    BipartiteGraph::from_edges(split.n_users, split.n_items, edges)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollabEmbeddings<T> {
    pub user_emb: Array2<T>,
    pub item_emb: Array2<T>,
    pub n_layers: u32,
}

impl<T: Scalar> CollabEmbeddings<T> {
    pub fn zeros(n_users: usize, n_items: usize, d: usize, n_layers: u32) -> Self {
        Self {
            user_emb: Array2::zeros((n_users, d)),
            item_emb: Array2::zeros((n_items, d)),
            n_layers,
        }
    }

    pub fn dim(&self) -> usize {
        self.item_emb.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.user_emb.iter().chain(self.item_emb.iter()).all(|v| v.is_finite())
    }

    pub fn scaled(&self, a: T) -> Self {
        Self {
            user_emb: &self.user_emb * a,
            item_emb: &self.item_emb * a,
            n_layers: self.n_layers,
        }
    }
}

/// Final embeddings as the mean of propagation layers `0..=n_layers`, where
/// each layer sums neighbour embeddings weighted by `1/sqrt(deg_u deg_i)`.
///
/// The operator is self-adjoint, so the same routine maps gradients with
/// respect to the final embeddings back onto layer 0.
pub fn propagate<T: Scalar>(graph: &BipartiteGraph, emb0: &CollabEmbeddings<T>) -> CollabEmbeddings<T> {
    assert_eq!(emb0.user_emb.nrows(), graph.n_users, "user rows");
    assert_eq!(emb0.item_emb.nrows(), graph.n_items, "item rows");
    let mut cur_u = emb0.user_emb.clone();
    let mut cur_i = emb0.item_emb.clone();
    let mut acc_u = cur_u.clone();
    let mut acc_i = cur_i.clone();
    for _ in 0..emb0.n_layers {
        let next_i = spread(&graph.item_adj, &graph.deg_i, &graph.deg_u, &cur_u);
        let next_u = spread(&graph.user_adj, &graph.deg_u, &graph.deg_i, &cur_i);
        acc_u += &next_u;
        acc_i += &next_i;
        cur_u = next_u;
        cur_i = next_i;
    }
    let scale = T::one() / T::of_usize(emb0.n_layers as usize + 1);
    if emb0.n_layers > 0 {
        acc_u.mapv_inplace(|v| v * scale);
        acc_i.mapv_inplace(|v| v * scale);
    }
    CollabEmbeddings {
        user_emb: acc_u,
        item_emb: acc_i,
        n_layers: emb0.n_layers,
    }
}

/// One propagation hop onto the nodes listed in `adj` (fixed summation order).
fn spread<T: Scalar>(
    adj: &[Vec<u32>],
    deg_self: &[u32],
    deg_other: &[u32],
    src: &Array2<T>,
) -> Array2<T> {
    let mut out = Array2::<T>::zeros((adj.len(), src.ncols()));
    for (n, (neigh, mut row)) in adj.iter().zip(out.axis_iter_mut(Axis(0))).enumerate() {
        for &m in neigh {
            let w = T::of(1.0 / ((deg_self[n] as f64) * (deg_other[m as usize] as f64)).sqrt());
            Zip::from(&mut row)
                .and(src.row(m as usize))
                .for_each(|o, &s| *o += w * s);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BprTriple {
    pub user: u32,
    pub pos: u32,
    pub neg: u32,
}

fn dot<T: Scalar>(a: ndarray::ArrayView1<T>, b: ndarray::ArrayView1<T>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
}

/// `-ln σ(x)` without overflow.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    (-x).max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean BPR loss over `triples` plus `reg * (|e_u|² + |e_i|² + |e_j|²)` on
/// layer-0 rows, and its gradient with respect to layer 0.
pub fn bpr_loss_and_grad<T: Scalar>(
    graph: &BipartiteGraph,
    emb0: &CollabEmbeddings<T>,
    triples: &[BprTriple],
    reg: f64,
) -> (f64, CollabEmbeddings<T>) {
    let fin = propagate(graph, emb0);
    let d = emb0.dim();
    let mut g = CollabEmbeddings::zeros(graph.n_users, graph.n_items, d, emb0.n_layers);
    if triples.is_empty() {
        return (0.0, g);
    }
    let inv_n = 1.0 / triples.len() as f64;
    let mut loss = 0.0;
    for t in triples {
        let fu = fin.user_emb.row(t.user as usize);
        let fi = fin.item_emb.row(t.pos as usize);
        let fj = fin.item_emb.row(t.neg as usize);
        let x = dot(fu, fi) - dot(fu, fj);
        loss += neg_log_sigmoid(x) * inv_n;
        let coef = (sigmoid(x) - 1.0) * inv_n;
        for k in 0..d {
            let (u, i, j) = (fu[k].as_f64(), fi[k].as_f64(), fj[k].as_f64());
            g.user_emb[[t.user as usize, k]] += T::of(coef * (i - j));
            g.item_emb[[t.pos as usize, k]] += T::of(coef * u);
            g.item_emb[[t.neg as usize, k]] -= T::of(coef * u);
        }
    }
    let mut grad = propagate(graph, &g);
    if reg > 0.0 {
        for t in triples {
            let rows = [
                (true, t.user as usize),
                (false, t.pos as usize),
                (false, t.neg as usize),
            ];
            for (is_user, r) in rows {
                let src = if is_user { &emb0.user_emb } else { &emb0.item_emb };
                let row = src.row(r);
                loss += reg * inv_n * dot(row, row);
                let dst = if is_user {
                    &mut grad.user_emb
                } else {
                    &mut grad.item_emb
                };
                let c = T::of(2.0 * reg * inv_n);
                Zip::from(dst.row_mut(r))
                    .and(row)
                    .for_each(|g, &e| *g += c * e);
            }
        }
    }
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BprConfig {
    pub d: usize,
    pub n_layers: u32,
    /// Adam step size.
    pub lr: f64,
    pub epochs: usize,
    pub reg: f64,
    pub batch_size: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for BprConfig {
    fn default() -> Self {
        Self {
            d: 768,
            n_layers: 3,
            lr: 1e-3,
            epochs: 50,
            reg: 1e-4,
            batch_size: 1024,
            init_std: 0.01,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BprOutcome<T> {
    /// Trained layer-0 parameters.
    pub layer0: CollabEmbeddings<T>,
    /// Propagated embeddings; `item_emb` holds the collaborative item vectors.
    pub embeddings: CollabEmbeddings<T>,
    pub epoch_losses: Vec<f64>,
}

/// Uniform negative not interacted by `user`; `None` if the user saw everything.
fn sample_negative<R: Rng + ?Sized>(graph: &BipartiteGraph, user: u32, rng: &mut R) -> Option<u32> {
    if graph.deg_u[user as usize] as usize >= graph.n_items {
        return None;
    }
    loop {
        let j = rng.random_range(0..graph.n_items as u32);
        if !graph.has_edge(user, j) {
            return Some(j);
        }
    }
}

pub fn bpr_train<T: Scalar>(graph: &BipartiteGraph, cfg: &BprConfig) -> Result<BprOutcome<T>> {
    if graph.n_edges() == 0 {
        return Err(Error::EmptyDataset("graph has no edges".into()));
    }
    if cfg.batch_size == 0 || cfg.d == 0 {
        return Err(Error::config("collab batch_size and d must be positive"));
    }
    let mut init_rng = rng_from_seed(derive_seed(cfg.seed, "collab/init"));
    let mut emb0 = CollabEmbeddings {
        user_emb: gaussian_matrix(&mut init_rng, graph.n_users, cfg.d, cfg.init_std),
        item_emb: gaussian_matrix(&mut init_rng, graph.n_items, cfg.d, cfg.init_std),
        n_layers: cfg.n_layers,
    };
    let mut rng = rng_from_seed(derive_seed(cfg.seed, "collab/sampling"));
    let mut order: Vec<usize> = (0..graph.n_edges()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut adam = Adam::new(cfg.lr);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let triples: Vec<BprTriple> = chunk
                .iter()
                .filter_map(|&e| {
                    let (u, i) = graph.edges[e];
                    sample_negative(graph, u, &mut rng).map(|j| BprTriple { user: u, pos: i, neg: j })
                })
                .collect();
            if triples.is_empty() {
                continue;
            }
            let (loss, grad) = bpr_loss_and_grad(graph, &emb0, &triples, cfg.reg);
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    stage: "collaborative BPR training".into(),
                    detail: format!(
                        "loss {loss} at epoch {epoch}, batch {batches}; lr {} is likely too high",
                        cfg.lr
                    ),
                });
            }
            adam.step(
                vec![
                    emb0.user_emb.as_slice_mut().expect("contiguous"),
                    emb0.item_emb.as_slice_mut().expect("contiguous"),
                ],
                vec![
                    grad.user_emb.as_slice().expect("contiguous"),
                    grad.item_emb.as_slice().expect("contiguous"),
                ],
            );
            total += loss;
            batches += 1;
        }
        let mean = total / batches.max(1) as f64;
        log::debug!("collab epoch {epoch}: bpr loss {mean:.5}");
        epoch_losses.push(mean);
    }
    if !emb0.is_finite() {
        return Err(Error::NonFinite {
            stage: "collaborative BPR training".into(),
            detail: "embeddings diverged".into(),
        });
    }
    let embeddings = propagate(graph, &emb0);
    Ok(BprOutcome {
        layer0: emb0,
        embeddings,
        epoch_losses,
    })
}
