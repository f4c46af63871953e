//! Planted-synergy synthetic benchmark generator.
//!
//! Builds a friendship view (user-user), a preference view (user-item) and an
//! optional attribute view (item-attr). Background edges appear independently
//! with probability `background_density`. Each positive instance `(u, i)`
//! plants a cross-view pair: a friendship edge `(u, v)` and a preference edge
//! `(v, i)`. The label rule is the conjunction re-evaluated on the final
//! graph: `y = 1` iff some friend `v` of `u` prefers `i`. Neither planted edge
//! alone determines the label, which is what makes the pair synergistic.

use super::{GraphError, Instance, MultiViewGraph, NodeRole};
use crate::autodiff::Matrix;
use rand::prelude::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantedSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_attributes: usize,
    /// Background edge probability per candidate pair, per view.
    pub background_density: f64,
    /// Number of planted positive instances; the same number of negative
    /// instances is emitted, so the batch is balanced.
    pub positive_instances: usize,
    /// Human-readable description of the conjunction that forces `y = 1`.
    pub plant_rule: String,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            n_users: 32,
            n_items: 28,
            n_attributes: 0,
            background_density: 0.05,
            positive_instances: 20,
            plant_rule: "friendship(u,v) AND preference(v,i) => y=1".to_string(),
            seed: 0,
        }
    }
}

impl PlantedSpec {
    pub fn node_count(&self) -> usize {
        self.n_users + self.n_items + self.n_attributes
    }

    pub fn view_count(&self) -> usize {
        if self.n_attributes > 0 {
            3
        } else {
            2
        }
    }

    /// Candidate pair count per view: ordered user pairs for friendship,
    /// user->item pairs for preference, item->attr pairs for attributes.
    pub fn candidate_counts(&self) -> Vec<usize> {
        let mut counts = vec![
            self.n_users * self.n_users.saturating_sub(1),
            self.n_users * self.n_items,
        ];
        if self.n_attributes > 0 {
            counts.push(self.n_items * self.n_attributes);
        }
        counts
    }

    fn validate(&self) -> Result<(), GraphError> {
        if !(0.0..=1.0).contains(&self.background_density) {
            return Err(GraphError::Config(format!(
                "background_density {} outside [0, 1]",
                self.background_density
            )));
        }
        if self.n_users < 2 {
            return Err(GraphError::Config(
                "need at least 2 users to plant a friendship edge".to_string(),
            ));
        }
        if self.n_items < 1 {
            return Err(GraphError::Config("need at least 1 item".to_string()));
        }
        if self.positive_instances == 0 {
            return Err(GraphError::Config(
                "positive_instances must be at least 1".to_string(),
            ));
        }
        if self.positive_instances > self.n_users * self.n_items / 2 {
            return Err(GraphError::Config(format!(
                "cannot place {} positive plus {} negative instances over {} user-item pairs",
                self.positive_instances,
                self.positive_instances,
                self.n_users * self.n_items
            )));
        }
        Ok(())
    }
}

/// Re-evaluates the plant rule on a finished graph: does any friend of `u`
/// prefer `i`? View 0 is friendship, view 1 preference.
pub fn plant_rule_holds(g: &MultiViewGraph, u: usize, i: usize) -> bool {
    g.view_edges(0)
        .iter()
        .filter(|&&(s, _)| s == u)
        .any(|&(_, v)| g.has_edge(1, v, i))
}

/// Deterministic planted-synergy generator. Positive instances carry the
/// planted friend node; negatives are user-item pairs for which the rule does
/// not hold on the final graph (background noise included).
pub fn generate_planted_synergy(
    spec: &PlantedSpec,
) -> Result<(MultiViewGraph, Vec<Instance>), GraphError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let n_users = spec.n_users;
    let n_items = spec.n_items;
    let n = spec.node_count();
    let users: Vec<usize> = (0..n_users).collect();
    let items: Vec<usize> = (n_users..n_users + n_items).collect();
    let attrs: Vec<usize> = (n_users + n_items..n).collect();

    let mut friendship: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut preference: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut attribute: BTreeSet<(usize, usize)> = BTreeSet::new();

    // background noise, one Bernoulli draw per candidate pair in fixed order
    let rho = spec.background_density;
    if rho > 0.0 {
        for &a in &users {
            for &b in &users {
                if a != b && rng.random_bool(rho) {
                    friendship.insert((a, b));
                }
            }
        }
        for &u in &users {
            for &i in &items {
                if rng.random_bool(rho) {
                    preference.insert((u, i));
                }
            }
        }
        for &i in &items {
            for &a in &attrs {
                if rng.random_bool(rho) {
                    attribute.insert((i, a));
                }
            }
        }
    }

    // planted positives: friendship (u, v) plus preference (v, i)
    let mut used_pairs: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut positives = Vec::with_capacity(spec.positive_instances);
    let retry_cap = 1000 * spec.positive_instances.max(1);
    let mut attempts = 0;
    while positives.len() < spec.positive_instances {
        attempts += 1;
        if attempts > retry_cap {
            return Err(GraphError::Config(format!(
                "could not place {} distinct positive instances",
                spec.positive_instances
            )));
        }
        let u = *users.choose(&mut rng).expect("users nonempty");
        let v = *users.choose(&mut rng).expect("users nonempty");
        let i = *items.choose(&mut rng).expect("items nonempty");
        if u == v || used_pairs.contains(&(u, i)) {
            continue;
        }
        used_pairs.insert((u, i));
        friendship.insert((u, v));
        preference.insert((v, i));
        positives.push((u, v, i));
    }

    // one-hot features keep node identity visible to the model
    let mut features = Matrix::zeros((n, n));
    for node in 0..n {
        features[(node, node)] = 1.0;
    }
    let mut roles = vec![NodeRole::User; n_users];
    roles.extend(std::iter::repeat_n(NodeRole::Item, n_items));
    roles.extend(std::iter::repeat_n(NodeRole::Attr, spec.n_attributes));

    let mut views = vec![
        friendship.iter().copied().collect::<Vec<_>>(),
        preference.iter().copied().collect::<Vec<_>>(),
    ];
    if spec.n_attributes > 0 {
        views.push(attribute.iter().copied().collect());
    }
    let graph = MultiViewGraph::new(n, roles, views, features)?;

    // labels re-evaluated on the final graph; background edges may have
    // completed additional conjunctions, the rule is what counts
    let mut instances = Vec::with_capacity(2 * spec.positive_instances);
    for &(u, v, i) in &positives {
        debug_assert!(plant_rule_holds(&graph, u, i));
        let mut inst = Instance::new(u, i, 1);
        inst.planted_friend = Some(v);
        instances.push(inst);
    }

    let mut attempts = 0;
    let mut negatives = 0;
    while negatives < spec.positive_instances {
        attempts += 1;
        if attempts > retry_cap {
            return Err(GraphError::Config(format!(
                "could not find {} negative instances; graph too dense",
                spec.positive_instances
            )));
        }
        let u = *users.choose(&mut rng).expect("users nonempty");
        let i = *items.choose(&mut rng).expect("items nonempty");
        if used_pairs.contains(&(u, i)) || plant_rule_holds(&graph, u, i) {
            continue;
        }
        used_pairs.insert((u, i));
        instances.push(Instance::new(u, i, 0));
        negatives += 1;
    }

    Ok((graph, instances))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_byte_identical() {
        let spec = PlantedSpec::default();
        let (g1, i1) = generate_planted_synergy(&spec).unwrap();
        let (g2, i2) = generate_planted_synergy(&spec).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(i1, i2);
    }

    #[test]
    fn zero_density_single_positive_has_exactly_two_edges() {
        let spec = PlantedSpec {
            background_density: 0.0,
            positive_instances: 1,
            n_users: 6,
            n_items: 5,
            ..PlantedSpec::default()
        };
        let (g, instances) = generate_planted_synergy(&spec).unwrap();
        assert_eq!(g.edge_count(), 2);
        let pos = &instances[0];
        let v = pos.planted_friend.unwrap();
        assert!(g.has_edge(0, pos.user, v));
        assert!(g.has_edge(1, v, pos.item));
    }

    #[test]
    fn background_count_within_three_sigma_of_binomial() {
        let spec = PlantedSpec {
            background_density: 0.05,
            positive_instances: 1,
            ..PlantedSpec::default()
        };
        let (g, _) = generate_planted_synergy(&spec).unwrap();
        let counts = spec.candidate_counts();
        for (k, &candidates) in counts.iter().enumerate() {
            let expected = spec.background_density * candidates as f64;
            let sigma = (candidates as f64
                * spec.background_density
                * (1.0 - spec.background_density))
                .sqrt();
            // planting adds at most two extra edges on top of the binomial draw
            let observed = g.view_edges(k).len() as f64;
            assert!(
                (observed - expected).abs() <= 3.0 * sigma + 2.0,
                "view {k}: observed {observed}, expected {expected} +- {sigma}"
            );
        }
    }

    #[test]
    fn labels_match_rule_reevaluated_post_noise() {
        let spec = PlantedSpec {
            background_density: 0.08,
            seed: 42,
            ..PlantedSpec::default()
        };
        let (g, instances) = generate_planted_synergy(&spec).unwrap();
        assert_eq!(instances.len(), 2 * spec.positive_instances);
        for inst in &instances {
            let holds = plant_rule_holds(&g, inst.user, inst.item);
            assert_eq!(holds, inst.label == 1, "instance {inst:?}");
            assert_eq!(g.role(inst.user), NodeRole::User);
            assert_eq!(g.role(inst.item), NodeRole::Item);
            assert_ne!(inst.user, inst.item);
        }
    }

    #[test]
    fn impossible_counts_are_config_errors() {
        let spec = PlantedSpec {
            n_users: 1,
            ..PlantedSpec::default()
        };
        assert!(matches!(
            generate_planted_synergy(&spec),
            Err(GraphError::Config(_))
        ));

        let spec = PlantedSpec {
            positive_instances: 0,
            ..PlantedSpec::default()
        };
        assert!(matches!(
            generate_planted_synergy(&spec),
            Err(GraphError::Config(_))
        ));
    }

    #[test]
    fn attribute_view_appears_when_requested() {
        let spec = PlantedSpec {
            n_attributes: 4,
            background_density: 0.2,
            n_users: 8,
            n_items: 6,
            positive_instances: 2,
            seed: 9,
            ..PlantedSpec::default()
        };
        let (g, _) = generate_planted_synergy(&spec).unwrap();
        assert_eq!(g.view_count(), 3);
        for &(s, d) in g.view_edges(2) {
            assert_eq!(g.role(s), NodeRole::Item);
            assert_eq!(g.role(d), NodeRole::Attr);
        }
    }
}
