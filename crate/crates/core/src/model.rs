//! Frozen multi-view GNN link predictor and its trainer.
//!
//! Per view, `layers` rounds of propagation `Z <- relu(RowNorm(A_masked + I) Z W)`
//! starting from the node features, followed by mean or concat fusion and a
//! bilinear score `sigma(z_u W_s z_i^T)`. The whole forward pass runs on the
//! differentiation tape, so predictions are differentiable with respect to
//! the masked adjacency entries. Once trained the model is frozen: the
//! explainer only reads its parameters.

use crate::autodiff::{LeafValues, Matrix, NodeId, Tape, TapeError};
use crate::graph::{Instance, MultiViewGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("node {node} out of range (graph has {count} nodes)")]
    NodeOutOfRange { node: usize, count: usize },
    #[error("adjacency for view {view} has shape {got:?}, expected {want:?}")]
    AdjacencyShape {
        view: usize,
        got: (usize, usize),
        want: (usize, usize),
    },
    #[error("got {got} adjacency matrices, model expects {want} views")]
    ViewCount { got: usize, want: usize },
    #[error("feature matrix has {got} columns, model expects {want}")]
    FeatureDim { got: usize, want: usize },
    #[error("training produced a non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("training requires both labels, got only label {0}")]
    SingleClass(u8),
    #[error("model file {path}: {msg}")]
    Format { path: String, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Mean,
    Concat,
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fusion::Mean => write!(f, "mean"),
            Fusion::Concat => write!(f, "concat"),
        }
    }
}

impl std::str::FromStr for Fusion {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Fusion::Mean),
            "concat" => Ok(Fusion::Concat),
            other => Err(format!("unknown fusion '{other}' (expected mean|concat)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Propagation rounds h; also the hop radius a prediction can see.
    pub layers: usize,
    pub hidden_dim: usize,
    pub fusion: Fusion,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden_dim: 32,
            fusion: Fusion::Mean,
            seed: 0,
        }
    }
}

/// Row-normalized propagation over sparse features shrinks activations every
/// layer; a vanilla Glorot init leaves the bilinear score so close to zero
/// that full-batch descent stalls at p = 0.5. The propagation gain compensates.
const PROPAGATION_GAIN: f64 = 4.0;
const SCORING_GAIN: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub probability: f64,
    /// `probability >= 0.5`; the tie maps to the positive label.
    pub label: u8,
}

impl Prediction {
    fn from_probability(p: f64) -> Self {
        Self {
            probability: p,
            label: u8::from(p >= 0.5),
        }
    }
}

/// How parameters enter a prediction tape: frozen models embed them as
/// constants, the trainer declares them as leaves.
#[derive(Clone, Copy)]
enum ParamMode {
    Frozen,
    Trainable,
}

struct ParamNodes {
    prop: Vec<Vec<NodeId>>,
    fusion: Vec<NodeId>,
    scoring: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecommenderModel {
    config: ModelConfig,
    view_count: usize,
    feature_dim: usize,
    /// `propagation[view][layer]`; layer 0 maps d -> hidden, the rest hidden -> hidden.
    propagation: Vec<Vec<Matrix>>,
    /// Per-view blocks of the concat-fusion projection; empty under mean fusion.
    fusion_blocks: Vec<Matrix>,
    /// Bilinear scoring form, hidden x hidden.
    scoring: Matrix,
    frozen: bool,
}

impl RecommenderModel {
    /// Gain-scaled Glorot-normal initialization, deterministic per config
    /// seed. Row-normalized propagation over sparse one-hot-style features
    /// shrinks activations layer by layer, so the propagation gain leans
    /// high to keep embedding magnitudes usable by plain gradient descent.
    pub fn init(config: &ModelConfig, view_count: usize, feature_dim: usize) -> Self {
        assert!(config.layers >= 1 && config.hidden_dim >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden_dim;
        let mut glorot = |rows: usize, cols: usize, gain: f64| {
            let std = gain * (2.0 / (rows + cols) as f64).sqrt();
            let normal = rand_distr::Normal::new(0.0, std).expect("valid std");
            Matrix::from_shape_fn((rows, cols), |_| rng.sample(normal))
        };

        let mut propagation = Vec::with_capacity(view_count);
        for _ in 0..view_count {
            let mut layers = Vec::with_capacity(config.layers);
            for layer in 0..config.layers {
                let rows = if layer == 0 { feature_dim } else { h };
                layers.push(glorot(rows, h, PROPAGATION_GAIN));
            }
            propagation.push(layers);
        }
        let fusion_blocks = match config.fusion {
            Fusion::Mean => Vec::new(),
            Fusion::Concat => (0..view_count).map(|_| glorot(h, h, PROPAGATION_GAIN)).collect(),
        };
        let scoring = glorot(h, h, SCORING_GAIN);

        Self {
            config: config.clone(),
            view_count,
            feature_dim,
            propagation,
            fusion_blocks,
            scoring,
            frozen: false,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn view_count(&self) -> usize {
        self.view_count
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (k, layers) in self.propagation.iter().enumerate() {
            for (l, w) in layers.iter().enumerate() {
                out.push((format!("prop_{k}_{l}"), w));
            }
        }
        for (k, w) in self.fusion_blocks.iter().enumerate() {
            out.push((format!("fusion_{k}"), w));
        }
        out.push(("scoring".to_string(), &self.scoring));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (k, layers) in self.propagation.iter_mut().enumerate() {
            for (l, w) in layers.iter_mut().enumerate() {
                out.push((format!("prop_{k}_{l}"), w));
            }
        }
        for (k, w) in self.fusion_blocks.iter_mut().enumerate() {
            out.push((format!("fusion_{k}"), w));
        }
        out.push(("scoring".to_string(), &mut self.scoring));
        out
    }

    /// FNV-1a over every parameter byte plus the config; used by the frozen
    /// contract checks.
    pub fn parameter_checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= u64::from(b);
                hash = hash.wrapping_mul(0x100000001b3);
            }
        };
        eat(format!(
            "{}|{}|{}|{}|{}|{}",
            self.config.layers,
            self.config.hidden_dim,
            self.config.fusion,
            self.config.seed,
            self.view_count,
            self.feature_dim
        )
        .as_bytes());
        for (name, w) in self.params() {
            eat(name.as_bytes());
            for v in w.iter() {
                eat(&v.to_le_bytes());
            }
        }
        hash
    }

    fn check_inputs(
        &self,
        adjacencies: &[Matrix],
        features: &Matrix,
        u: usize,
        i: usize,
    ) -> Result<usize, ModelError> {
        if adjacencies.len() != self.view_count {
            return Err(ModelError::ViewCount {
                got: adjacencies.len(),
                want: self.view_count,
            });
        }
        let n = features.nrows();
        if features.ncols() != self.feature_dim {
            return Err(ModelError::FeatureDim {
                got: features.ncols(),
                want: self.feature_dim,
            });
        }
        for (view, a) in adjacencies.iter().enumerate() {
            if a.nrows() != n || a.ncols() != n {
                return Err(ModelError::AdjacencyShape {
                    view,
                    got: (a.nrows(), a.ncols()),
                    want: (n, n),
                });
            }
        }
        for node in [u, i] {
            if node >= n {
                return Err(ModelError::NodeOutOfRange { node, count: n });
            }
        }
        Ok(n)
    }

    fn declare_params(&self, tape: &mut Tape, mode: ParamMode) -> ParamNodes {
        let mut node = |name: &str, value: &Matrix| match mode {
            ParamMode::Frozen => tape.constant(value.clone()),
            ParamMode::Trainable => tape.leaf(name, value.nrows(), value.ncols()),
        };
        ParamNodes {
            prop: self
                .propagation
                .iter()
                .enumerate()
                .map(|(k, layers)| {
                    layers
                        .iter()
                        .enumerate()
                        .map(|(l, w)| node(&format!("prop_{k}_{l}"), w))
                        .collect()
                })
                .collect(),
            fusion: self
                .fusion_blocks
                .iter()
                .enumerate()
                .map(|(k, w)| node(&format!("fusion_{k}"), w))
                .collect(),
            scoring: node("scoring", &self.scoring),
        }
    }

    /// Per-view propagation plus fusion; shared by every instance head on the
    /// same tape.
    fn append_fused_embedding(
        &self,
        tape: &mut Tape,
        adjacency_nodes: &[NodeId],
        features: NodeId,
        n: usize,
        params: &ParamNodes,
    ) -> NodeId {
        let mut eye = Matrix::zeros((n, n));
        for d in 0..n {
            eye[(d, d)] = 1.0;
        }

        let mut view_embeddings = Vec::with_capacity(self.view_count);
        for (k, &adj) in adjacency_nodes.iter().enumerate() {
            let eye_node = tape.constant(eye.clone());
            let hat = tape.add(adj, eye_node);
            let norm = tape.row_normalize(hat);
            let mut z = features;
            for &w_node in &params.prop[k] {
                let agg = tape.matmul(norm, z);
                let lin = tape.matmul(agg, w_node);
                z = tape.relu(lin);
            }
            view_embeddings.push(z);
        }

        match self.config.fusion {
            Fusion::Mean => {
                let mut acc = view_embeddings[0];
                for &z in &view_embeddings[1..] {
                    acc = tape.add(acc, z);
                }
                tape.scale(acc, 1.0 / self.view_count as f64)
            }
            Fusion::Concat => {
                // projection of the concatenation, written as a sum of
                // per-view blocks
                let mut acc = None;
                for (k, &z) in view_embeddings.iter().enumerate() {
                    let part = tape.matmul(z, params.fusion[k]);
                    acc = Some(match acc {
                        None => part,
                        Some(prev) => tape.add(prev, part),
                    });
                }
                acc.expect("at least one view")
            }
        }
    }

    /// Bilinear score head for one (user, item) pair over a fused embedding;
    /// returns the probability node.
    fn append_score_head(
        &self,
        tape: &mut Tape,
        fused: NodeId,
        scoring: NodeId,
        u: usize,
        i: usize,
        n: usize,
    ) -> NodeId {
        let pick = |node: usize, tape: &mut Tape| {
            let mut onehot = Matrix::zeros((1, n));
            onehot[(0, node)] = 1.0;
            let sel = tape.constant(onehot);
            tape.matmul(sel, fused)
        };
        let e_u = pick(u, tape);
        let e_i = pick(i, tape);
        let proj = tape.matmul(e_u, scoring);
        let overlap = tape.mul(proj, e_i);
        let score = tape.reduce_sum(overlap);
        tape.sigmoid(score)
    }

    /// Appends the frozen forward pass to an existing tape. The per-view
    /// adjacency nodes must be `n x n` and are taken as given (soft masks
    /// applied upstream); self-loops and row normalization happen here.
    /// Returns the probability node. Parameters enter as constants, so no
    /// gradient can reach them.
    pub fn append_prediction(
        &self,
        tape: &mut Tape,
        adjacency_nodes: &[NodeId],
        features: &Matrix,
        u: usize,
        i: usize,
    ) -> Result<NodeId, ModelError> {
        if adjacency_nodes.len() != self.view_count {
            return Err(ModelError::ViewCount {
                got: adjacency_nodes.len(),
                want: self.view_count,
            });
        }
        let n = features.nrows();
        let x = tape.constant(features.clone());
        let params = self.declare_params(tape, ParamMode::Frozen);
        let fused = self.append_fused_embedding(tape, adjacency_nodes, x, n, &params);
        Ok(self.append_score_head(tape, fused, params.scoring, u, i, n))
    }

    /// Pure forward pass on explicit (possibly soft-masked) adjacencies.
    pub fn predict(
        &self,
        u: usize,
        i: usize,
        adjacencies: &[Matrix],
        features: &Matrix,
    ) -> Result<Prediction, ModelError> {
        let n = self.check_inputs(adjacencies, features, u, i)?;
        let mut tape = Tape::new();
        let adj_nodes: Vec<NodeId> = adjacencies
            .iter()
            .map(|a| tape.constant(a.clone()))
            .collect();
        let x = tape.constant(features.clone());
        let params = self.declare_params(&mut tape, ParamMode::Frozen);
        let fused = self.append_fused_embedding(&mut tape, &adj_nodes, x, n, &params);
        let p_node = self.append_score_head(&mut tape, fused, params.scoring, u, i, n);
        let eval = tape.forward(&LeafValues::new())?;
        Ok(Prediction::from_probability(eval.scalar(p_node)))
    }

    /// Forward pass on a graph's raw 0/1 adjacencies.
    pub fn predict_graph(
        &self,
        u: usize,
        i: usize,
        graph: &MultiViewGraph,
    ) -> Result<Prediction, ModelError> {
        self.predict(u, i, &graph.adjacencies(), graph.features())
    }
}

/// Full-batch gradient descent on clamped BCE over the instances. Returns the
/// frozen model; deterministic given the config seed.
pub fn train(
    graph: &MultiViewGraph,
    instances: &[Instance],
    config: &ModelConfig,
    epochs: usize,
    lr: f64,
) -> Result<RecommenderModel, ModelError> {
    assert!(lr > 0.0, "learning rate must be positive");
    let mut labels = [false, false];
    for inst in instances {
        labels[usize::from(inst.label)] = true;
    }
    if !(labels[0] && labels[1]) {
        return Err(ModelError::SingleClass(u8::from(labels[1])));
    }

    let mut model = RecommenderModel::init(config, graph.view_count(), graph.feature_dim());
    let n = graph.node_count();

    // one tape for the whole run; weights are leaves rebound every epoch,
    // the propagation is shared and per-instance scoring heads hang off it
    let mut tape = Tape::new();
    let adj_nodes: Vec<NodeId> = (0..graph.view_count())
        .map(|k| tape.constant(graph.adjacency(k)))
        .collect();
    let x = tape.constant(graph.features().clone());
    let params = model.declare_params(&mut tape, ParamMode::Trainable);
    let fused = model.append_fused_embedding(&mut tape, &adj_nodes, x, n, &params);
    let mut loss_acc = None;
    for inst in instances {
        let p = model.append_score_head(&mut tape, fused, params.scoring, inst.user, inst.item, n);
        let l = tape.bce(f64::from(inst.label), p);
        loss_acc = Some(match loss_acc {
            None => l,
            Some(prev) => tape.add(prev, l),
        });
    }
    let total = loss_acc.expect("at least one instance");
    tape.scale(total, 1.0 / instances.len() as f64);

    let names: Vec<String> = model.params().iter().map(|(n, _)| n.clone()).collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();

    for epoch in 0..epochs {
        let mut leaves = LeafValues::new();
        for (name, w) in model.params() {
            leaves.insert(name, w.clone());
        }
        let eval = tape.forward(&leaves).map_err(|e| match e {
            TapeError::NonFinite { .. } => ModelError::Diverged { epoch },
            other => ModelError::Tape(other),
        })?;
        let loss = eval.output_scalar();
        if !loss.is_finite() {
            return Err(ModelError::Diverged { epoch });
        }
        let grads = eval.backward(&name_refs)?;
        for (name, w) in model.params_mut() {
            let g = grads.get(&name)?;
            w.zip_mut_with(g, |wv, gv| *wv -= lr * gv);
        }
    }

    model.frozen = true;
    Ok(model)
}

/// Fraction of instances whose predicted label matches the dataset label.
pub fn training_accuracy(
    model: &RecommenderModel,
    graph: &MultiViewGraph,
    instances: &[Instance],
) -> Result<f64, ModelError> {
    let adjacencies = graph.adjacencies();
    let mut hits = 0usize;
    for inst in instances {
        let pred = model.predict(inst.user, inst.item, &adjacencies, graph.features())?;
        if pred.label == inst.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / instances.len() as f64)
}

const MODEL_MAGIC: &str = "SEMEXMDL1";

/// Self-describing model file: magic string, `key=value` header lines, then
/// length-prefixed little-endian float64 arrays in header order.
pub fn save_model(model: &RecommenderModel, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    let io = |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut header = String::new();
    header.push_str(MODEL_MAGIC);
    header.push('\n');
    header.push_str(&format!("layers={}\n", model.config.layers));
    header.push_str(&format!("hidden_dim={}\n", model.config.hidden_dim));
    header.push_str(&format!("fusion={}\n", model.config.fusion));
    header.push_str(&format!("seed={}\n", model.config.seed));
    header.push_str(&format!("views={}\n", model.view_count));
    header.push_str(&format!("feature_dim={}\n", model.feature_dim));
    header.push_str(&format!("frozen={}\n", model.frozen));
    let params = model.params();
    header.push_str(&format!("arrays={}\n", params.len()));
    for (name, w) in &params {
        header.push_str(&format!("array={}:{}:{}\n", name, w.nrows(), w.ncols()));
    }
    header.push_str("end_header\n");

    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(header.as_bytes()).map_err(io)?;
    for (_, w) in &params {
        let count = (w.len() as u64).to_le_bytes();
        file.write_all(&count).map_err(io)?;
        for v in w.iter() {
            file.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<RecommenderModel, ModelError> {
    let path = path.as_ref();
    let fmt = |msg: String| ModelError::Format {
        path: path.display().to_string(),
        msg,
    };
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;

    let header_end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| fmt("missing end_header".to_string()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|e| fmt(format!("header is not utf-8: {e}")))?;
    let mut lines = header.lines();
    if lines.next() != Some(MODEL_MAGIC) {
        return Err(fmt(format!("bad magic, expected {MODEL_MAGIC}")));
    }

    let mut fields = std::collections::BTreeMap::new();
    let mut arrays: Vec<(String, usize, usize)> = Vec::new();
    for line in lines {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| fmt(format!("malformed header line '{line}'")))?;
        if key == "array" {
            let parts: Vec<&str> = value.split(':').collect();
            if parts.len() != 3 {
                return Err(fmt(format!("malformed array descriptor '{value}'")));
            }
            let rows = parts[1]
                .parse()
                .map_err(|e| fmt(format!("bad rows in '{value}': {e}")))?;
            let cols = parts[2]
                .parse()
                .map_err(|e| fmt(format!("bad cols in '{value}': {e}")))?;
            arrays.push((parts[0].to_string(), rows, cols));
        } else {
            fields.insert(key.to_string(), value.to_string());
        }
    }
    let get = |key: &str| {
        fields
            .get(key)
            .cloned()
            .ok_or_else(|| fmt(format!("missing header field '{key}'")))
    };
    let parse_usize = |key: &str| -> Result<usize, ModelError> {
        get(key)?
            .parse()
            .map_err(|e| fmt(format!("bad '{key}': {e}")))
    };
    let config = ModelConfig {
        layers: parse_usize("layers")?,
        hidden_dim: parse_usize("hidden_dim")?,
        fusion: get("fusion")?
            .parse()
            .map_err(|e: String| fmt(format!("bad fusion: {e}")))?,
        seed: get("seed")?
            .parse()
            .map_err(|e| fmt(format!("bad seed: {e}")))?,
    };
    let view_count = parse_usize("views")?;
    let feature_dim = parse_usize("feature_dim")?;
    let frozen: bool = get("frozen")?
        .parse()
        .map_err(|e| fmt(format!("bad frozen flag: {e}")))?;
    let declared = parse_usize("arrays")?;
    if declared != arrays.len() {
        return Err(fmt(format!(
            "declared {declared} arrays, found {} descriptors",
            arrays.len()
        )));
    }

    // expected shapes derive from the config; any mismatch is a format error
    let h = config.hidden_dim;
    let mut expected: Vec<(String, usize, usize)> = Vec::new();
    for k in 0..view_count {
        for l in 0..config.layers {
            let rows = if l == 0 { feature_dim } else { h };
            expected.push((format!("prop_{k}_{l}"), rows, h));
        }
    }
    if config.fusion == Fusion::Concat {
        for k in 0..view_count {
            expected.push((format!("fusion_{k}"), h, h));
        }
    }
    expected.push(("scoring".to_string(), h, h));
    if arrays != expected {
        return Err(fmt(format!(
            "array layout mismatch: expected {expected:?}, found {arrays:?}"
        )));
    }

    let mut cursor = &bytes[header_end + 11..];
    let mut read_array = |rows: usize, cols: usize, name: &str| -> Result<Matrix, ModelError> {
        let mut len_bytes = [0u8; 8];
        cursor
            .read_exact(&mut len_bytes)
            .map_err(|_| fmt(format!("truncated file reading length of '{name}'")))?;
        let count = u64::from_le_bytes(len_bytes) as usize;
        if count != rows * cols {
            return Err(fmt(format!(
                "array '{name}' declares {count} values, expected {} ({rows}x{cols})",
                rows * cols
            )));
        }
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let mut vb = [0u8; 8];
            cursor
                .read_exact(&mut vb)
                .map_err(|_| fmt(format!("truncated file reading '{name}'")))?;
            data.push(f64::from_le_bytes(vb));
        }
        Matrix::from_shape_vec((rows, cols), data)
            .map_err(|e| fmt(format!("array '{name}': {e}")))
    };

    let mut propagation = Vec::with_capacity(view_count);
    for k in 0..view_count {
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let rows = if l == 0 { feature_dim } else { h };
            layers.push(read_array(rows, h, &format!("prop_{k}_{l}"))?);
        }
        propagation.push(layers);
    }
    let mut fusion_blocks = Vec::new();
    if config.fusion == Fusion::Concat {
        for k in 0..view_count {
            fusion_blocks.push(read_array(h, h, &format!("fusion_{k}"))?);
        }
    }
    let scoring = read_array(h, h, "scoring")?;

    Ok(RecommenderModel {
        config,
        view_count,
        feature_dim,
        propagation,
        fusion_blocks,
        scoring,
        frozen,
    })
}
