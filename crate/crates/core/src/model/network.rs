use std::sync::Arc;

use super::{ModelConfig, ModelParams, Variant};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::SubjectFeatures;
use crate::graphbuild::ClusterGraph;

/// Fixed-width neighbor table derived from a [`ClusterGraph`].
///
/// Every node gets `width = max(1, max degree)` slots. Short lists are padded
/// by repeating their first neighbor, which leaves both the max-pooled value
/// and its gradient unchanged. A node without neighbors gets itself, which
/// makes its single edge feature `LeakyReLU(W·[x_i, 0] + b)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborTable {
    nodes: usize,
    width: usize,
    slots: Vec<usize>,
}

impl NeighborTable {
    pub fn from_graph(g: &ClusterGraph) -> Self {
        let nodes = g.node_count();
        let width = (0..nodes).map(|i| g.neighbors(i).len()).max().unwrap_or(0).max(1);
        let mut slots = Vec::with_capacity(nodes * width);
        for i in 0..nodes {
            let list = g.neighbors(i);
            let fill = list.first().copied().unwrap_or(i);
            slots.extend_from_slice(list);
            slots.extend(std::iter::repeat_n(fill, width - list.len()));
        }
        Self { nodes, width, slots }
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Neighbor row indices for `batch` stacked subjects, `width` per row.
    fn batch_index(&self, batch: usize) -> Vec<usize> {
        let mut neighbors = Vec::with_capacity(batch * self.slots.len());
        for b in 0..batch {
            let offset = b * self.nodes;
            neighbors.extend(self.slots.iter().map(|j| offset + j));
        }
        neighbors
    }
}

/// One EdgeConv layer on stacked node features `x: [B·C, F]` with weights
/// `w: [F', 2F]` and bias `b: [F']`.
///
/// Edge features are `LeakyReLU(W·[x_i, x_j − x_i] + b)`, max-pooled over
/// `j ∈ N(i)`. Splitting `W = [W_c | W_d]` gives
/// `W_c·x_i + W_d·(x_j − x_i) = (W_c − W_d)·x_i + W_d·x_j`, so both terms are
/// computed once per node and only gathered per edge. LeakyReLU is
/// increasing, so it is applied after the max.
pub fn edgeconv_layer(
    tape: &mut Tape,
    x: Var,
    table: &NeighborTable,
    w: Var,
    b: Var,
    slope: f64,
) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let (rows, f) = match shape.as_slice() {
        [r, f] => (*r, *f),
        _ => return Err(Error::InvalidShape(format!("edgeconv input {shape:?}"))),
    };
    if rows % table.nodes() != 0 {
        return Err(Error::InvalidShape(format!(
            "edgeconv input has {rows} rows, not a multiple of the graph's {} nodes",
            table.nodes()
        )));
    }
    let batch = rows / table.nodes();
    let w_center = tape.slice_cols(w, 0, f)?;
    let w_diff = tape.slice_cols(w, f, 2 * f)?;
    let w_self = tape.sub(w_center, w_diff)?;
    let own = tape.affine(x, w_self, Some(b))?;
    let other = tape.affine(x, w_diff, None)?;
    tape.gather_add_max_leaky(own, other, &table.batch_index(batch), table.width(), slope)
}

/// Output of one forward pass over a batch.
pub struct Forward {
    pub logits: Var,
    /// `[B·C, 1]` attention weights in (0, 1).
    pub attention: Var,
}

/// Per-subject inference result.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub attention: Vec<f64>,
    pub class: usize,
}

/// Index of the largest logit, lowest index on ties.
pub fn predicted_class(logits: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = k;
        }
    }
    best
}

/// A model configuration bound to its (static) graph.
#[derive(Debug, Clone)]
pub struct Network {
    config: ModelConfig,
    layer_tables: Option<[Arc<NeighborTable>; 2]>,
}

impl Network {
    /// `graph` is required for the EdgeConv variant and ignored by `cnn1d`.
    pub fn new(config: ModelConfig, graph: Option<&ClusterGraph>) -> Result<Self> {
        config.validate()?;
        let layer_tables = match (config.variant, graph) {
            (Variant::Cnn1d, _) => None,
            (Variant::TractGraphCnn, None) => {
                return Err(Error::InvalidConfig("tractgraphcnn needs a cluster graph".into()))
            }
            (Variant::TractGraphCnn, Some(g)) => {
                if g.node_count() != config.clusters {
                    return Err(Error::InvalidShape(format!(
                        "graph has {} nodes but the model expects {} clusters",
                        g.node_count(),
                        config.clusters
                    )));
                }
                // One table shared by both layers: the graph is never
                // recomputed from features.
                let table = Arc::new(NeighborTable::from_graph(g));
                Some([Arc::clone(&table), table])
            }
        };
        Ok(Self { config, layer_tables })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// The neighbor table each EdgeConv layer reads (`None` for `cnn1d`).
    pub fn layer_tables(&self) -> Option<&[Arc<NeighborTable>; 2]> {
        self.layer_tables.as_ref()
    }

    /// Puts every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape, params: &ModelParams) -> Result<Vec<Var>> {
        params.check(&self.config)?;
        Ok(params.tensors().iter().map(|t| tape.param(t.clone())).collect())
    }

    /// Stacks subjects into the `[B·C, in_channels]` input matrix.
    pub fn input(&self, subjects: &[&SubjectFeatures]) -> Result<Tensor> {
        let c = self.config.clusters;
        let mut data = Vec::with_capacity(subjects.len() * c * 2);
        for s in subjects {
            if s.cluster_count() != c {
                return Err(Error::InvalidShape(format!(
                    "subject {} has {} clusters, model expects {c}",
                    s.subject_id,
                    s.cluster_count()
                )));
            }
            data.extend(s.input_rows());
        }
        Tensor::matrix(subjects.len() * c, self.config.in_channels, data)
    }

    /// Forward pass on stacked input `x: [B·C, in_channels]` with bound
    /// parameters `p` (see [`Network::bind`]).
    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Forward> {
        let cfg = &self.config;
        let rows = tape.value(x).shape()[0];
        if !rows.is_multiple_of(cfg.clusters) || tape.value(x).shape()[1] != cfg.in_channels {
            return Err(Error::InvalidShape(format!(
                "input {:?} does not stack {}×{} subject matrices",
                tape.value(x).shape(),
                cfg.clusters,
                cfg.in_channels
            )));
        }
        let batch = rows / cfg.clusters;
        let slope = cfg.leaky_slope;

        let (h1, h2) = match &self.layer_tables {
            Some([first, second]) => {
                debug_assert!(Arc::ptr_eq(first, second));
                let h1 = edgeconv_layer(tape, x, first, p[0], p[1], slope)?;
                let h2 = edgeconv_layer(tape, h1, second, p[2], p[3], slope)?;
                (h1, h2)
            }
            None => {
                let h1 = tape.affine(x, p[0], Some(p[1]))?;
                let h1 = tape.leaky_relu(h1, slope)?;
                let h2 = tape.affine(h1, p[2], Some(p[3]))?;
                let h2 = tape.leaky_relu(h2, slope)?;
                (h1, h2)
            }
        };

        let h = tape.affine_cat(&[h1, h2], p[4], Some(p[5]))?;
        let h = tape.leaky_relu(h, slope)?;

        let tanh_branch = tape.affine(h, p[6], Some(p[7]))?;
        let tanh_branch = tape.tanh(tanh_branch)?;
        let sigmoid_branch = tape.affine(h, p[8], Some(p[9]))?;
        let sigmoid_branch = tape.sigmoid(sigmoid_branch)?;
        let score = tape.affine_cat(&[tanh_branch, sigmoid_branch], p[10], Some(p[11]))?;
        let attention = tape.sigmoid(score)?;

        let h = tape.mul(h, attention)?;
        let flat = tape.reshape(h, &[batch, cfg.clusters * cfg.aggregate_dim])?;
        let hidden = tape.affine(flat, p[12], Some(p[13]))?;
        let hidden = tape.leaky_relu(hidden, slope)?;
        let logits = tape.affine(hidden, p[14], Some(p[15]))?;
        Ok(Forward { logits, attention })
    }

    /// Mean cross-entropy over a batch, with the forward outputs.
    pub fn loss(&self, tape: &mut Tape, p: &[Var], subjects: &[&SubjectFeatures]) -> Result<(Var, Forward)> {
        let x = self.input(subjects)?;
        let x = tape.constant(x);
        let fwd = self.forward(tape, p, x)?;
        let labels: Vec<usize> = subjects.iter().map(|s| s.label).collect();
        let loss = tape.softmax_cross_entropy(fwd.logits, &labels)?;
        Ok((loss, fwd))
    }

    /// Logits, attention map and predicted class for each subject.
    pub fn predict(&self, params: &ModelParams, subjects: &[&SubjectFeatures]) -> Result<Vec<Prediction>> {
        const CHUNK: usize = 32;
        params.check(&self.config)?;
        let mut out = Vec::with_capacity(subjects.len());
        let c = self.config.clusters;
        for chunk in subjects.chunks(CHUNK) {
            let mut tape = Tape::new();
            let p: Vec<Var> = params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
            let x = self.input(chunk)?;
            let x = tape.constant(x);
            let fwd = self.forward(&mut tape, &p, x)?;
            let logits = tape.value(fwd.logits).data();
            let attention = tape.value(fwd.attention).data();
            let k = self.config.classes;
            for b in 0..chunk.len() {
                let l = logits[b * k..(b + 1) * k].to_vec();
                out.push(Prediction {
                    class: predicted_class(&l),
                    logits: l,
                    attention: attention[b * c..(b + 1) * c].to_vec(),
                });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::model::init_params;
    use crate::rng::{stream, Stream};
    use rand::Rng;

    fn leaky(v: f64, slope: f64) -> f64 {
        if v > 0.0 {
            v
        } else {
            slope * v
        }
    }

    /// Edge features straight from `LeakyReLU(W·[x_i, x_j − x_i] + b)`.
    fn edgeconv_oracle(x: &[Vec<f64>], g: &ClusterGraph, w: &[Vec<f64>], b: &[f64], slope: f64) -> Vec<Vec<f64>> {
        let f = x[0].len();
        (0..x.len())
            .map(|i| {
                let neighbors: Vec<usize> = if g.neighbors(i).is_empty() { vec![i] } else { g.neighbors(i).to_vec() };
                (0..w.len())
                    .map(|o| {
                        neighbors
                            .iter()
                            .map(|&j| {
                                let mut v = b[o];
                                for k in 0..f {
                                    v += w[o][k] * x[i][k] + w[o][f + k] * (x[j][k] - x[i][k]);
                                }
                                leaky(v, slope)
                            })
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .collect()
            })
            .collect()
    }

    fn run_edgeconv(x: &[Vec<f64>], g: &ClusterGraph, w: &[Vec<f64>], b: &[f64], slope: f64) -> Vec<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::matrix(x.len(), x[0].len(), x.concat()).unwrap());
        let wv = tape.param(Tensor::matrix(w.len(), w[0].len(), w.concat()).unwrap());
        let bv = tape.param(Tensor::vector(b.to_vec()));
        let table = NeighborTable::from_graph(g);
        let out = edgeconv_layer(&mut tape, xv, &table, wv, bv, slope).unwrap();
        tape.value(out).data().to_vec()
    }

    #[test]
    fn two_node_hand_example() {
        let g = ClusterGraph::new(vec![vec![1], vec![0]], false).unwrap();
        // Identity activation region: slope 1 makes LeakyReLU the identity.
        let out = run_edgeconv(&[vec![1.0], vec![3.0]], &g, &[vec![1.0, 1.0]], &[0.0], 1.0);
        assert_eq!(out, vec![3.0, 1.0]);
    }

    #[test]
    fn isolated_node_uses_virtual_self_edge() {
        let g = ClusterGraph::new(vec![vec![]], false).unwrap();
        let out = run_edgeconv(&[vec![2.0]], &g, &[vec![1.0, 1.0]], &[0.0], 0.2);
        assert_eq!(out, vec![2.0]);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let g = ClusterGraph::new(vec![vec![1, 2], vec![0], vec![0]], true).unwrap();
        let x = vec![vec![1.0, -2.0], vec![0.5, 3.0], vec![-1.0, 0.0]];
        let out = run_edgeconv(&x, &g, &vec![vec![0.0; 4]; 3], &[0.0; 3], 0.2);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_direct_formula_on_random_graphs() {
        let mut rng = stream(21, Stream::Diagnostics);
        for _ in 0..30 {
            let n = rng.random_range(2..10);
            let f = rng.random_range(1..5);
            let o = rng.random_range(1..6);
            let neighbors: Vec<Vec<usize>> = (0..n)
                .map(|i| (0..n).filter(|&j| j != i && rng.random_bool(0.4)).collect())
                .collect();
            let g = ClusterGraph::new(neighbors, true).unwrap();
            let x: Vec<Vec<f64>> = (0..n).map(|_| (0..f).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let w: Vec<Vec<f64>> = (0..o).map(|_| (0..2 * f).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let b: Vec<f64> = (0..o).map(|_| rng.random_range(-0.5..0.5)).collect();
            let got = run_edgeconv(&x, &g, &w, &b, 0.2);
            let want = edgeconv_oracle(&x, &g, &w, &b, 0.2).concat();
            for (a, e) in got.iter().zip(&want) {
                assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0), "{a} vs {e}");
            }
        }
    }

    fn toy_subjects(c: usize, n: usize, seed: u64) -> Vec<SubjectFeatures> {
        let mut rng = stream(seed, Stream::Diagnostics);
        (0..n)
            .map(|i| {
                let fa: Vec<Option<f64>> = (0..c).map(|_| Some(rng.random_range(0.0..1.0))).collect();
                let nos: Vec<u64> = (0..c).map(|_| rng.random_range(1..50)).collect();
                SubjectFeatures::from_measurements(format!("s{i}"), i % 2, &fa, &nos).unwrap()
            })
            .collect()
    }

    fn ring(c: usize, k: usize) -> ClusterGraph {
        ClusterGraph::new((0..c).map(|i| (1..=k).map(|d| (i + d) % c).collect()).collect(), true).unwrap()
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let cfg = ModelConfig::new(6, Variant::TractGraphCnn);
        let net = Network::new(cfg.clone(), Some(&ring(6, 2))).unwrap();
        let mut params = init_params(&cfg, 0).unwrap();
        params.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
        let subjects = toy_subjects(6, 3, 1);
        let refs: Vec<_> = subjects.iter().collect();
        for p in net.predict(&params, &refs).unwrap() {
            assert_eq!(p.logits, vec![0.0, 0.0]);
            assert_eq!(p.class, 0);
            assert!(p.attention.iter().all(|&a| a == 0.5));
        }
    }

    #[test]
    fn output_shapes_at_atlas_scale() {
        let c = 953;
        let cfg = ModelConfig::new(c, Variant::TractGraphCnn);
        let net = Network::new(cfg.clone(), Some(&ring(c, 20))).unwrap();
        let params = init_params(&cfg, 0).unwrap();
        let subjects = toy_subjects(c, 1, 2);
        let p = &net.predict(&params, &[&subjects[0]]).unwrap()[0];
        assert_eq!(p.logits.len(), 2);
        assert_eq!(p.attention.len(), 953);
        assert!(p.attention.iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn graph_size_must_match() {
        let cfg = ModelConfig::new(5, Variant::TractGraphCnn);
        assert!(Network::new(cfg.clone(), Some(&ring(6, 2))).is_err());
        assert!(Network::new(cfg, None).is_err());
        assert!(Network::new(ModelConfig::new(5, Variant::Cnn1d), None).is_ok());
    }

    #[test]
    fn both_layers_share_one_table() {
        let cfg = ModelConfig::new(6, Variant::TractGraphCnn);
        let net = Network::new(cfg, Some(&ring(6, 2))).unwrap();
        let [a, b] = net.layer_tables().unwrap();
        assert!(Arc::ptr_eq(a, b));
    }

    fn small_config(c: usize, variant: Variant) -> ModelConfig {
        ModelConfig {
            edgeconv_dims: [6, 5],
            aggregate_dim: 4,
            attention_dim: 3,
            head_hidden: 7,
            ..ModelConfig::new(c, variant)
        }
    }

    #[test]
    fn attention_matches_direct_formula() {
        let c = 4;
        let cfg = small_config(c, Variant::Cnn1d);
        let net = Network::new(cfg.clone(), None).unwrap();
        let params = init_params(&cfg, 8).unwrap();
        let subjects = toy_subjects(c, 1, 9);
        let got = &net.predict(&params, &[&subjects[0]]).unwrap()[0].attention;

        // Recompute the aggregated map on a tape, then apply the attention
        // formula by hand.
        let mut tape = Tape::new();
        let p: Vec<Var> = params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let x = tape.constant(net.input(&[&subjects[0]]).unwrap());
        let h1 = tape.affine(x, p[0], Some(p[1])).unwrap();
        let h1 = tape.leaky_relu(h1, 0.2).unwrap();
        let h2 = tape.affine(h1, p[2], Some(p[3])).unwrap();
        let h2 = tape.leaky_relu(h2, 0.2).unwrap();
        let cat = tape.concat(&[h1, h2], 1).unwrap();
        let h = tape.affine(cat, p[4], Some(p[5])).unwrap();
        let h = tape.leaky_relu(h, 0.2).unwrap();
        let h = tape.value(h).data().to_vec();

        let get = |name: &str| params.get(name).unwrap().data().to_vec();
        let (v, bv, u, bu, w, bw) = (get("attention.V"), get("attention.b_V"), get("attention.U"), get("attention.b_U"), get("attention.W"), get("attention.b_W"));
        let (l, f) = (cfg.attention_dim, cfg.aggregate_dim);
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        for i in 0..c {
            let hi = &h[i * f..(i + 1) * f];
            let mut score = bw[0];
            for r in 0..l {
                let t = (bv[r] + (0..f).map(|k| v[r * f + k] * hi[k]).sum::<f64>()).tanh();
                let s = sig(bu[r] + (0..f).map(|k| u[r * f + k] * hi[k]).sum::<f64>());
                score += w[r] * t + w[l + r] * s;
            }
            assert!((got[i] - sig(score)).abs() < 1e-12);
        }
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let c = 12;
        let cfg = small_config(c, Variant::TractGraphCnn);
        let net = Network::new(cfg.clone(), Some(&ring(c, 3))).unwrap();
        let params = init_params(&cfg, 5).unwrap();
        let subjects = toy_subjects(c, 3, 6);
        let refs: Vec<_> = subjects.iter().collect();
        let report = grad_check(
            |tape, p| net.loss(tape, p, &refs).map(|(loss, _)| loss),
            params.tensors(),
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert_eq!(report.checked, params.scalar_count());
    }

    #[test]
    fn cnn1d_is_edgeconv_without_neighbors() {
        let c = 5;
        let graph_cfg = small_config(c, Variant::TractGraphCnn);
        let cnn_cfg = small_config(c, Variant::Cnn1d);
        let empty = ClusterGraph::new(vec![vec![]; c], false).unwrap();
        let graph_net = Network::new(graph_cfg.clone(), Some(&empty)).unwrap();
        let cnn_net = Network::new(cnn_cfg.clone(), None).unwrap();

        let mut graph_params = init_params(&graph_cfg, 3).unwrap();
        let mut cnn_params = init_params(&cnn_cfg, 4).unwrap();
        // Zero the x_j − x_i half of each EdgeConv weight and copy the x_i
        // half into the matching convolution.
        for (edge, conv) in [("edgeconv1", "conv1"), ("edgeconv2", "conv2")] {
            let w = graph_params.get_mut(&format!("{edge}.W")).unwrap();
            let (out, cols) = (w.shape()[0], w.shape()[1]);
            let half = cols / 2;
            for r in 0..out {
                w.data_mut()[r * cols + half..(r + 1) * cols].fill(0.0);
            }
            let centre: Vec<f64> = (0..out).flat_map(|r| w.data()[r * cols..r * cols + half].to_vec()).collect();
            cnn_params.get_mut(&format!("{conv}.W")).unwrap().data_mut().copy_from_slice(&centre);
            let b = graph_params.get(&format!("{edge}.b")).unwrap().clone();
            *cnn_params.get_mut(&format!("{conv}.b")).unwrap() = b;
        }
        for (name, t) in graph_params.iter().skip(4) {
            *cnn_params.get_mut(name).unwrap() = t.clone();
        }

        let subjects = toy_subjects(c, 4, 7);
        let refs: Vec<_> = subjects.iter().collect();
        let a = graph_net.predict(&graph_params, &refs).unwrap();
        let b = cnn_net.predict(&cnn_params, &refs).unwrap();
        for (p, q) in a.iter().zip(&b) {
            for (x, y) in p.logits.iter().chain(&p.attention).zip(q.logits.iter().chain(&q.attention)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cluster_permutation_equivariance() {
        let c = 7;
        let cfg = small_config(c, Variant::TractGraphCnn);
        let mut rng = stream(31, Stream::Diagnostics);
        let neighbors: Vec<Vec<usize>> = (0..c)
            .map(|i| (0..c).filter(|&j| j != i && rng.random_bool(0.5)).collect())
            .collect();
        let g = ClusterGraph::new(neighbors, true).unwrap();
        let params = init_params(&cfg, 12).unwrap();
        let subjects = toy_subjects(c, 3, 13);

        // Old cluster i moves to position perm[i].
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let g2 = g.permuted(&perm).unwrap();
        let permute = |v: &[f64]| {
            let mut out = vec![0.0; v.len()];
            for (i, &x) in v.iter().enumerate() {
                out[perm[i]] = x;
            }
            out
        };
        let subjects2: Vec<SubjectFeatures> = subjects
            .iter()
            .map(|s| SubjectFeatures {
                fa: permute(&s.fa),
                pos: permute(&s.pos),
                present: {
                    let mut p = vec![false; c];
                    for (i, &v) in s.present.iter().enumerate() {
                        p[perm[i]] = v;
                    }
                    p
                },
                ..s.clone()
            })
            .collect();
        let mut params2 = params.clone();
        {
            let f = cfg.aggregate_dim;
            let head = params2.get_mut("head1.W").unwrap();
            let cols = c * f;
            let original = head.data().to_vec();
            for r in 0..cfg.head_hidden {
                for i in 0..c {
                    let src = r * cols + i * f;
                    let dst = r * cols + perm[i] * f;
                    head.data_mut()[dst..dst + f].copy_from_slice(&original[src..src + f]);
                }
            }
        }
        let a = Network::new(cfg.clone(), Some(&g)).unwrap().predict(&params, &subjects.iter().collect::<Vec<_>>()).unwrap();
        let b = Network::new(cfg, Some(&g2)).unwrap().predict(&params2, &subjects2.iter().collect::<Vec<_>>()).unwrap();
        for (p, q) in a.iter().zip(&b) {
            for (x, y) in p.logits.iter().zip(&q.logits) {
                assert!((x - y).abs() < 1e-9);
            }
            assert_eq!(permute(&p.attention).len(), q.attention.len());
            for (x, y) in permute(&p.attention).iter().zip(&q.attention) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
