//! Joint edge-mask optimization.
//!
//! Two mask sets are optimized per instance against a frozen recommender.
//! The explanatory masks `M_E` keep the prediction reproducible while a
//! sparsity regularizer trims them; the synergy masks `M_S` split the
//! explanatory subgraph into a synergistic part (the joint prediction over
//! all views must stay faithful while every single view fails) and a
//! non-synergistic remainder with the opposite objective. All three losses
//! descend under plain gradient descent with per-group norm clipping.

use crate::autodiff::{logit, Gradients, LeafValues, Matrix, NodeId, Tape, TapeError};
use crate::graph::MultiViewGraph;
use crate::model::{ModelError, RecommenderModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("explainer config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}; last finite trace entry: {last:?}")]
    NonFinite {
        epoch: usize,
        last: Option<LossTracePoint>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainerConfig {
    /// Sparsity weight on the explanatory masks.
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Cap on each maximized cross-entropy term; without it the adversarial
    /// terms diverge by driving predictions to certainty-wrong.
    pub bce_ceiling: f64,
    /// Per-group L2 clip on logit gradients.
    pub grad_clip: f64,
    /// Threshold tau for binarizing masks into subgraphs.
    pub binarize_threshold: f64,
    pub seed: u64,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            epochs: 100,
            lr: 0.1,
            bce_ceiling: 5.0,
            grad_clip: 1.0,
            binarize_threshold: 0.5,
            seed: 0,
        }
    }
}

impl ExplainerConfig {
    pub fn validate(&self) -> Result<(), ExplainError> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(ExplainError::Config(format!(
                "lambda {} out of range [0, inf)",
                self.lambda
            )));
        }
        if self.lr <= 0.0 {
            return Err(ExplainError::Config(format!(
                "lr {} out of range (0, inf)",
                self.lr
            )));
        }
        if self.bce_ceiling <= 0.0 {
            return Err(ExplainError::Config(format!(
                "bce_ceiling {} out of range (0, inf)",
                self.bce_ceiling
            )));
        }
        if self.grad_clip <= 0.0 {
            return Err(ExplainError::Config(format!(
                "grad_clip {} out of range (0, inf)",
                self.grad_clip
            )));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(ExplainError::Config(format!(
                "binarize_threshold {} out of range (0, 1)",
                self.binarize_threshold
            )));
        }
        Ok(())
    }
}

/// Per-view explanatory and synergy mask logits. Logits are the single source
/// of truth; realized masks are `sigmoid(logit)` restricted to edge positions
/// and exactly zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    explanatory_logits: Vec<Matrix>,
    synergy_logits: Vec<Matrix>,
    edge_indicators: Vec<Matrix>,
}

const INIT_CLAMP: (f64, f64) = (0.05, 0.95);

impl MaskSet {
    /// Draws target mask values from `N(1.0, 2/n)` per edge position, clamps
    /// them into (0, 1) and stores their logits. The synergy masks use an
    /// independent stream of the same seed.
    pub fn init(graph: &MultiViewGraph, seed: u64) -> Self {
        let n = graph.node_count();
        let sigma = (2.0 / n as f64).sqrt();
        let normal = rand_distr::Normal::new(1.0, sigma).expect("valid sigma");

        let mut rng_e = ChaCha8Rng::seed_from_u64(seed);
        let mut rng_s = ChaCha8Rng::seed_from_u64(seed);
        rng_s.set_stream(1);

        let mut explanatory = Vec::with_capacity(graph.view_count());
        let mut synergy = Vec::with_capacity(graph.view_count());
        let mut indicators = Vec::with_capacity(graph.view_count());
        for k in 0..graph.view_count() {
            let mut theta_e = Matrix::zeros((n, n));
            let mut theta_s = Matrix::zeros((n, n));
            for &(s, d) in graph.view_edges(k) {
                let me: f64 = rng_e.sample(normal);
                let ms: f64 = rng_s.sample(normal);
                theta_e[(s, d)] = logit(me.clamp(INIT_CLAMP.0, INIT_CLAMP.1));
                theta_s[(s, d)] = logit(ms.clamp(INIT_CLAMP.0, INIT_CLAMP.1));
            }
            explanatory.push(theta_e);
            synergy.push(theta_s);
            indicators.push(graph.adjacency(k));
        }
        Self {
            explanatory_logits: explanatory,
            synergy_logits: synergy,
            edge_indicators: indicators,
        }
    }

    pub fn view_count(&self) -> usize {
        self.edge_indicators.len()
    }

    pub fn explanatory_logits(&self, view: usize) -> &Matrix {
        &self.explanatory_logits[view]
    }

    pub fn synergy_logits(&self, view: usize) -> &Matrix {
        &self.synergy_logits[view]
    }

    /// `sigmoid(theta_E)` at edge positions, zero elsewhere.
    pub fn explanatory_mask(&self, view: usize) -> Matrix {
        realized(&self.explanatory_logits[view], &self.edge_indicators[view])
    }

    pub fn synergy_mask(&self, view: usize) -> Matrix {
        realized(&self.synergy_logits[view], &self.edge_indicators[view])
    }

    /// `M_E * M_S` elementwise, the combined synergy weight of each edge.
    pub fn product_mask(&self, view: usize) -> Matrix {
        &self.explanatory_mask(view) * &self.synergy_mask(view)
    }

    fn bind_explanatory(&self, leaves: &mut LeafValues) {
        for k in 0..self.view_count() {
            leaves.insert(format!("theta_e_{k}"), self.explanatory_logits[k].clone());
        }
    }

    fn bind_synergy(&self, leaves: &mut LeafValues) {
        for k in 0..self.view_count() {
            leaves.insert(format!("theta_s_{k}"), self.synergy_logits[k].clone());
            leaves.insert(format!("m_e_{k}"), self.explanatory_mask(k));
        }
    }
}

fn realized(logits: &Matrix, indicator: &Matrix) -> Matrix {
    let mut m = logits.mapv(crate::autodiff::sigmoid);
    m *= indicator;
    m
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossTracePoint {
    pub l_e: f64,
    pub l_s: f64,
    pub l_ns: f64,
    pub l_all: f64,
}

/// Mask values of one edge, as reported in explanations.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EdgeMaskValue {
    pub view: usize,
    pub src: usize,
    pub dst: usize,
    pub m_e: f64,
    pub m_s: f64,
    pub product: f64,
    pub in_explanatory: bool,
    pub in_synergistic: bool,
}

#[derive(Debug, Clone)]
pub struct Explanation {
    pub user: usize,
    pub item: usize,
    /// The model's original hard prediction on the unmasked subgraph; the
    /// target every loss is computed against.
    pub target_label: u8,
    pub original_probability: f64,
    pub masks: MaskSet,
    /// Binarized subgraphs per view: `G_E`, its synergistic part `G_S`, and
    /// the non-synergistic remainder `G_NS = G_E \ G_S`.
    pub explanatory: Vec<Vec<(usize, usize)>>,
    pub synergistic: Vec<Vec<(usize, usize)>>,
    pub non_synergistic: Vec<Vec<(usize, usize)>>,
    pub loss_trace: Vec<LossTracePoint>,
    pub config: ExplainerConfig,
}

impl Explanation {
    pub fn view_count(&self) -> usize {
        self.masks.view_count()
    }

    /// Per-edge mask values for one view, in the graph's edge order.
    pub fn edge_values(&self, graph: &MultiViewGraph, view: usize) -> Vec<EdgeMaskValue> {
        let m_e = self.masks.explanatory_mask(view);
        let m_s = self.masks.synergy_mask(view);
        graph
            .view_edges(view)
            .iter()
            .map(|&(src, dst)| {
                let me = m_e[(src, dst)];
                let ms = m_s[(src, dst)];
                EdgeMaskValue {
                    view,
                    src,
                    dst,
                    m_e: me,
                    m_s: ms,
                    product: me * ms,
                    in_explanatory: self.explanatory[view].contains(&(src, dst)),
                    in_synergistic: self.synergistic[view].contains(&(src, dst)),
                }
            })
            .collect()
    }

    /// Partition invariant: per view, `G_S` and `G_NS` are disjoint and their
    /// union is `G_E`.
    pub fn partition_holds(&self) -> bool {
        for k in 0..self.view_count() {
            if self.synergistic[k]
                .iter()
                .any(|e| self.non_synergistic[k].contains(e))
            {
                return false;
            }
            let mut union: Vec<(usize, usize)> = self.synergistic[k].clone();
            union.extend(&self.non_synergistic[k]);
            union.sort_unstable();
            let mut expected = self.explanatory[k].clone();
            expected.sort_unstable();
            if union != expected {
                return false;
            }
        }
        true
    }
}

fn ensure_frozen(model: &RecommenderModel) -> Result<(), ExplainError> {
    if !model.is_frozen() {
        return Err(ExplainError::Config(
            "model must be frozen before explanation".to_string(),
        ));
    }
    Ok(())
}

/// Declares the explanatory mask leaves and returns the per-view masked
/// adjacency nodes `sigmoid(theta_E) * A`.
fn declare_explanatory(tape: &mut Tape, graph: &MultiViewGraph) -> Vec<NodeId> {
    let n = graph.node_count();
    (0..graph.view_count())
        .map(|k| {
            let theta = tape.leaf(&format!("theta_e_{k}"), n, n);
            let soft = tape.sigmoid(theta);
            let adj = tape.constant(graph.adjacency(k));
            tape.mul(soft, adj)
        })
        .collect()
}

/// Declares synergy-side leaves: `m_e_{k}` (bound to the realized explanatory
/// masks, treated as constants) and `theta_s_{k}`. Returns the synergistic
/// products `M_E * M_S` and the non-synergistic products `M_E * (1 - M_S)`.
fn declare_synergy(tape: &mut Tape, graph: &MultiViewGraph) -> (Vec<NodeId>, Vec<NodeId>) {
    let n = graph.node_count();
    let mut s_products = Vec::with_capacity(graph.view_count());
    let mut ns_products = Vec::with_capacity(graph.view_count());
    for k in 0..graph.view_count() {
        let m_e = tape.leaf(&format!("m_e_{k}"), n, n);
        let theta = tape.leaf(&format!("theta_s_{k}"), n, n);
        let m_s = tape.sigmoid(theta);
        s_products.push(tape.mul(m_e, m_s));
        let ones = tape.constant(Matrix::from_elem((n, n), 1.0));
        let inv = tape.sub(ones, m_s);
        ns_products.push(tape.mul(m_e, inv));
    }
    (s_products, ns_products)
}

fn chain_add(tape: &mut Tape, nodes: &[NodeId]) -> NodeId {
    let mut acc = nodes[0];
    for &node in &nodes[1..] {
        acc = tape.add(acc, node);
    }
    acc
}

fn build_loss_e_tape(
    model: &RecommenderModel,
    graph: &MultiViewGraph,
    u: usize,
    i: usize,
    target: f64,
    lambda: f64,
) -> Result<Tape, ExplainError> {
    let mut tape = Tape::new();
    let masked = declare_explanatory(&mut tape, graph);
    let p = model.append_prediction(&mut tape, &masked, graph.features(), u, i)?;
    let fidelity = tape.bce(target, p);

    // lambda * sigmoid(total L1 of the masks / total edge count)
    let sums: Vec<NodeId> = masked.iter().map(|&m| tape.reduce_sum(m)).collect();
    let total = chain_add(&mut tape, &sums);
    let mean = tape.scale(total, 1.0 / graph.edge_count().max(1) as f64);
    let squashed = tape.sigmoid(mean);
    let reg = tape.scale(squashed, lambda);

    tape.add(fidelity, reg);
    Ok(tape)
}

/// `L_S = l(y, y_S) - sum_k cap(l(y, y_S^k))`: the joint synergistic
/// prediction must match the target while every single view must not.
#[allow(clippy::too_many_arguments)]
fn append_loss_s(
    tape: &mut Tape,
    model: &RecommenderModel,
    graph: &MultiViewGraph,
    u: usize,
    i: usize,
    target: f64,
    ceiling: f64,
    s_products: &[NodeId],
) -> Result<NodeId, ExplainError> {
    let n = graph.node_count();
    let p_joint = model.append_prediction(tape, s_products, graph.features(), u, i)?;
    let l_joint = tape.bce(target, p_joint);
    let mut caps = Vec::with_capacity(s_products.len());
    for k in 0..s_products.len() {
        let adjs: Vec<NodeId> = (0..s_products.len())
            .map(|j| {
                if j == k {
                    s_products[j]
                } else {
                    tape.constant(Matrix::zeros((n, n)))
                }
            })
            .collect();
        let p = model.append_prediction(tape, &adjs, graph.features(), u, i)?;
        let l = tape.bce(target, p);
        caps.push(tape.cap(l, ceiling));
    }
    let cap_sum = chain_add(tape, &caps);
    Ok(tape.sub(l_joint, cap_sum))
}

/// `L_NS = sum_k l(y, y_NS^k) - cap(l(y, y_NS))`: the reverse of `L_S`,
/// pushing the non-synergistic remainder to be per-view informative but
/// jointly unfaithful.
#[allow(clippy::too_many_arguments)]
fn append_loss_ns(
    tape: &mut Tape,
    model: &RecommenderModel,
    graph: &MultiViewGraph,
    u: usize,
    i: usize,
    target: f64,
    ceiling: f64,
    ns_products: &[NodeId],
) -> Result<NodeId, ExplainError> {
    let n = graph.node_count();
    let mut singles = Vec::with_capacity(ns_products.len());
    for k in 0..ns_products.len() {
        let adjs: Vec<NodeId> = (0..ns_products.len())
            .map(|j| {
                if j == k {
                    ns_products[j]
                } else {
                    tape.constant(Matrix::zeros((n, n)))
                }
            })
            .collect();
        let p = model.append_prediction(tape, &adjs, graph.features(), u, i)?;
        singles.push(tape.bce(target, p));
    }
    let single_sum = chain_add(tape, &singles);
    let p_joint = model.append_prediction(tape, ns_products, graph.features(), u, i)?;
    let l_joint = tape.bce(target, p_joint);
    let capped = tape.cap(l_joint, ceiling);
    Ok(tape.sub(single_sum, capped))
}

fn theta_e_names(k: usize) -> Vec<String> {
    (0..k).map(|v| format!("theta_e_{v}")).collect()
}

fn theta_s_names(k: usize) -> Vec<String> {
    (0..k).map(|v| format!("theta_s_{v}")).collect()
}

fn collect_grads(grads: &Gradients, names: &[String]) -> Result<Vec<Matrix>, TapeError> {
    names.iter().map(|n| Ok(grads.get(n)?.clone())).collect()
}

/// Explanatory loss: fidelity to the original prediction plus the sparsity
/// regularizer. Returns the scalar and the gradients with respect to the
/// explanatory logits only.
pub fn loss_e(
    model: &RecommenderModel,
    graph: &MultiViewGraph,
    u: usize,
    i: usize,
    target: u8,
    masks: &MaskSet,
    lambda: f64,
) -> Result<(f64, Vec<Matrix>), ExplainError> {
    ensure_frozen(model)?;
    let tape = build_loss_e_tape(model, graph, u, i, f64::from(target), lambda)?;
    let mut leaves = LeafValues::new();
    masks.bind_explanatory(&mut leaves);
    let eval = tape.forward(&leaves)?;
    let names = theta_e_names(graph.view_count());
    let grads = eval.backward(&names.iter().map(String::as_str).collect::<Vec<_>>())?;
    Ok((eval.output_scalar(), collect_grads(&grads, &names)?))
}

/// Synergistic loss; gradients flow to the synergy logits only, the
/// explanatory masks enter as fixed values.
pub fn loss_s(
    model: &RecommenderModel,
    graph: &MultiViewGraph,
    u: usize,
    i: usize,
    target: u8,
    masks: &MaskSet,
    ceiling: f64,
) -> Result<(f64, Vec<Matrix>), ExplainError> {
    ensure_frozen(model)?;
    let mut tape = Tape::new();
    let (s_products, _) = declare_synergy(&mut tape, graph);
    append_loss_s(
        &mut tape,
        model,
        graph,
        u,
        i,
        f64::from(target),
        ceiling,
        &s_products,
    )?;
    let mut leaves = LeafValues::new();
    masks.bind_synergy(&mut leaves);
    let eval = tape.forward(&leaves)?;
    let names = theta_s_names(graph.view_count());
    let grads = eval.backward(&names.iter().map(String::as_str).collect::<Vec<_>>())?;
    Ok((eval.output_scalar(), collect_grads(&grads, &names)?))
}

/// Non-synergistic loss; same leaves as [`loss_s`].
pub fn loss_ns(
    model: &RecommenderModel,
    graph: &MultiViewGraph,
    u: usize,
    i: usize,
    target: u8,
    masks: &MaskSet,
    ceiling: f64,
) -> Result<(f64, Vec<Matrix>), ExplainError> {
    ensure_frozen(model)?;
    let mut tape = Tape::new();
    let (_, ns_products) = declare_synergy(&mut tape, graph);
    append_loss_ns(
        &mut tape,
        model,
        graph,
        u,
        i,
        f64::from(target),
        ceiling,
        &ns_products,
    )?;
    let mut leaves = LeafValues::new();
    masks.bind_synergy(&mut leaves);
    let eval = tape.forward(&leaves)?;
    let names = theta_s_names(graph.view_count());
    let grads = eval.backward(&names.iter().map(String::as_str).collect::<Vec<_>>())?;
    Ok((eval.output_scalar(), collect_grads(&grads, &names)?))
}

/// Scales a gradient group so its joint L2 norm does not exceed `clip`.
fn clip_group(grads: &mut [Matrix], clip: f64) {
    let norm: f64 = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > clip {
        let factor = clip / norm;
        for g in grads {
            g.mapv_inplace(|v| v * factor);
        }
    }
}

/// Runs the joint optimization for one instance on its computational
/// subgraph and returns the explanation with binarized subgraphs and the full
/// loss trace. Deterministic given the config seed.
pub fn optimize(
    model: &RecommenderModel,
    graph: &MultiViewGraph,
    u: usize,
    i: usize,
    config: &ExplainerConfig,
) -> Result<Explanation, ExplainError> {
    config.validate()?;
    ensure_frozen(model)?;
    let original = model.predict_graph(u, i, graph)?;
    let target = original.label;
    let target_f = f64::from(target);
    let k = graph.view_count();

    // one tape per loss group, built once; leaves are rebound every epoch
    let tape_e = build_loss_e_tape(model, graph, u, i, target_f, config.lambda)?;
    let mut tape_sns = Tape::new();
    let (s_products, ns_products) = declare_synergy(&mut tape_sns, graph);
    let out_s = append_loss_s(
        &mut tape_sns,
        model,
        graph,
        u,
        i,
        target_f,
        config.bce_ceiling,
        &s_products,
    )?;
    let out_ns = append_loss_ns(
        &mut tape_sns,
        model,
        graph,
        u,
        i,
        target_f,
        config.bce_ceiling,
        &ns_products,
    )?;
    tape_sns.add(out_s, out_ns);

    let e_names = theta_e_names(k);
    let s_names = theta_s_names(k);
    let e_refs: Vec<&str> = e_names.iter().map(String::as_str).collect();
    let s_refs: Vec<&str> = s_names.iter().map(String::as_str).collect();

    let mut masks = MaskSet::init(graph, config.seed);
    let mut trace: Vec<LossTracePoint> = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut leaves_e = LeafValues::new();
        masks.bind_explanatory(&mut leaves_e);
        let eval_e = match tape_e.forward(&leaves_e) {
            Ok(eval) => eval,
            Err(TapeError::NonFinite { .. }) => {
                return Err(ExplainError::NonFinite {
                    epoch,
                    last: trace.last().copied(),
                })
            }
            Err(other) => return Err(other.into()),
        };
        let l_e = eval_e.output_scalar();
        let grads_e = eval_e.backward(&e_refs)?;
        let mut g_e = collect_grads(&grads_e, &e_names)?;

        let mut leaves_s = LeafValues::new();
        masks.bind_synergy(&mut leaves_s);
        let eval_s = match tape_sns.forward(&leaves_s) {
            Ok(eval) => eval,
            Err(TapeError::NonFinite { .. }) => {
                return Err(ExplainError::NonFinite {
                    epoch,
                    last: trace.last().copied(),
                })
            }
            Err(other) => return Err(other.into()),
        };
        let l_s = eval_s.scalar(out_s);
        let l_ns = eval_s.scalar(out_ns);
        let grads_s = eval_s.backward(&s_refs)?;
        let mut g_s = collect_grads(&grads_s, &s_names)?;

        trace.push(LossTracePoint {
            l_e,
            l_s,
            l_ns,
            l_all: l_e + l_s + l_ns,
        });

        clip_group(&mut g_e, config.grad_clip);
        clip_group(&mut g_s, config.grad_clip);
        for (theta, g) in masks.explanatory_logits.iter_mut().zip(&g_e) {
            theta.zip_mut_with(g, |t, gv| *t -= config.lr * gv);
        }
        for (theta, g) in masks.synergy_logits.iter_mut().zip(&g_s) {
            theta.zip_mut_with(g, |t, gv| *t -= config.lr * gv);
        }

        // logits stay finite, so realized masks stay strictly inside (0, 1)
        debug_assert!(masks
            .explanatory_logits
            .iter()
            .chain(&masks.synergy_logits)
            .all(|m| m.iter().all(|v| v.is_finite())));
    }

    let tau = config.binarize_threshold;
    let mut explanatory = Vec::with_capacity(k);
    let mut synergistic = Vec::with_capacity(k);
    let mut non_synergistic = Vec::with_capacity(k);
    for view in 0..k {
        let m_e = masks.explanatory_mask(view);
        let m_s = masks.synergy_mask(view);
        let mut g_e_edges = Vec::new();
        let mut g_s_edges = Vec::new();
        let mut g_ns_edges = Vec::new();
        for &(s, d) in graph.view_edges(view) {
            if m_e[(s, d)] >= tau {
                g_e_edges.push((s, d));
                if m_e[(s, d)] * m_s[(s, d)] >= tau {
                    g_s_edges.push((s, d));
                } else {
                    g_ns_edges.push((s, d));
                }
            }
        }
        explanatory.push(g_e_edges);
        synergistic.push(g_s_edges);
        non_synergistic.push(g_ns_edges);
    }

    Ok(Explanation {
        user: u,
        item: i,
        target_label: target,
        original_probability: original.probability,
        masks,
        explanatory,
        synergistic,
        non_synergistic,
        loss_trace: trace,
        config: config.clone(),
    })
}
