//! The federated orchestrator: partial-averaging rounds with client
//! selection, local training, and pluggable aggregation — volume-weighted
//! baseline, cosine distance weight (CDW), first-neighbor client clustering
//! (CC), knowledge distillation (KD), and the CC+CDW / KD+CDW combinations.
//!
//! Clients share only the backbone; classifiers and optimizer state stay
//! local across rounds.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{ClientShard, FederatedWorld, Sample};
use crate::error::{Error, Result};
use crate::metrics::{self, ClientMetrics, EvalRecord, MetricsReport, WeightEntry};
use crate::model::{
    backward_and_step, extract_features, extract_logits, Backbone, Classifier, OptimizerHyper,
    OptimizerState,
};
use crate::numcore::{cosine_distance_slices, weighted_sum, ParamVector, Rng};

const TAG_INIT: u64 = 0x494e_4954;
const TAG_SERVER: u64 = 0x5352_5652;
const TAG_CLIENT: u64 = 0x434c_4e54;
const TAG_CLASSIFIER: u64 = 0x434c_5346;

/// Aggregation strategy of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "fedpav")]
    FedPav,
    #[serde(rename = "fedpav+cdw")]
    FedPavCdw,
    #[serde(rename = "fedpav+cc")]
    FedPavCc,
    #[serde(rename = "fedpav+cc+cdw")]
    FedPavCcCdw,
    #[serde(rename = "fedpav+kd")]
    FedPavKd,
    #[serde(rename = "fedpav+kd+cdw")]
    FedPavKdCdw,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::FedPav,
        Strategy::FedPavCdw,
        Strategy::FedPavCc,
        Strategy::FedPavCcCdw,
        Strategy::FedPavKd,
        Strategy::FedPavKdCdw,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "fedpav" => Ok(Self::FedPav),
            "fedpav+cdw" => Ok(Self::FedPavCdw),
            "fedpav+cc" => Ok(Self::FedPavCc),
            "fedpav+cc+cdw" => Ok(Self::FedPavCcCdw),
            "fedpav+kd" => Ok(Self::FedPavKd),
            "fedpav+kd+cdw" => Ok(Self::FedPavKdCdw),
            other => Err(Error::Config(format!(
                "unknown strategy `{other}` (expected fedpav, fedpav+cdw, fedpav+cc, \
                 fedpav+cc+cdw, fedpav+kd, or fedpav+kd+cdw)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::FedPav => "fedpav",
            Self::FedPavCdw => "fedpav+cdw",
            Self::FedPavCc => "fedpav+cc",
            Self::FedPavCcCdw => "fedpav+cc+cdw",
            Self::FedPavKd => "fedpav+kd",
            Self::FedPavKdCdw => "fedpav+kd+cdw",
        }
    }

    pub fn uses_cdw(&self) -> bool {
        matches!(self, Self::FedPavCdw | Self::FedPavCcCdw | Self::FedPavKdCdw)
    }

    pub fn uses_clustering(&self) -> bool {
        matches!(self, Self::FedPavCc | Self::FedPavCcCdw)
    }

    pub fn uses_distillation(&self) -> bool {
        matches!(self, Self::FedPavKd | Self::FedPavKdCdw)
    }
}

/// Run settings. Defaults: 300 rounds, one local epoch, batch size 32, nine
/// clients with full participation, evaluation every ten rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub clients: usize,
    pub selected_per_round: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub hidden_dim: usize,
    pub optimizer: OptimizerHyper,
    /// Server fine-tuning rate for knowledge distillation.
    pub kd_lr: f64,
    /// First-neighbor merge steps per round (one recovers two-to-three
    /// groups; more steps collapse toward a single cluster).
    pub finch_steps: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::FedPav,
            rounds: 300,
            local_epochs: 1,
            batch_size: 32,
            clients: 9,
            selected_per_round: 9,
            seed: 0,
            eval_every: 10,
            hidden_dim: 8,
            optimizer: OptimizerHyper::default(),
            kd_lr: 5e-4,
            finch_steps: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self, world: &FederatedWorld) -> Result<()> {
        if self.clients < 1 || world.num_clients() < self.clients {
            return Err(Error::Config(format!(
                "config expects {} clients, world has {}",
                self.clients,
                world.num_clients()
            )));
        }
        if self.selected_per_round < 1 || self.selected_per_round > self.clients {
            return Err(Error::Config(format!(
                "selected_per_round {} must be in [1, {}]",
                self.selected_per_round, self.clients
            )));
        }
        if self.rounds < 1 || self.local_epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config(
                "rounds, local_epochs, and batch_size must be at least 1".into(),
            ));
        }
        if self.eval_every < 1 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if self.hidden_dim < 1 {
            return Err(Error::Config("hidden_dim must be at least 1".into()));
        }
        if self.finch_steps < 1 {
            return Err(Error::Config("finch_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// One client's per-round upload. Carries the shared part of the model only;
/// classifier parameters never leave the client.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundUpdate {
    pub client_id: usize,
    pub trained_backbone: ParamVector,
    pub data_volume: usize,
    /// Cosine distance between shared-batch logits before and after local
    /// training, in [0, 2].
    pub cosine_distance: f64,
    /// Shared-batch embeddings for clustering (when CC is enabled).
    pub clustering_features: Option<Vec<f64>>,
    /// Shared-dataset embeddings used as soft labels (when KD is enabled).
    pub soft_labels: Option<Vec<f64>>,
}

/// Output of client clustering: a partition of the selected clients and one
/// aggregated backbone per group.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub clusters: Vec<Vec<usize>>,
    pub backbones: Vec<ParamVector>,
}

impl ClusterAssignment {
    pub fn backbone_for(&self, client: usize) -> Option<&ParamVector> {
        self.clusters
            .iter()
            .position(|c| c.contains(&client))
            .map(|i| &self.backbones[i])
    }
}

/// Normalized volume weights `n_k / n` over the updates.
pub fn aggregate_volume(updates: &[RoundUpdate]) -> Result<(ParamVector, Vec<f64>)> {
    if updates.is_empty() {
        return Err(Error::EmptyAggregation);
    }
    let total: usize = updates.iter().map(|u| u.data_volume).sum();
    if total == 0 {
        return Err(Error::Aggregation("all client volumes are zero".into()));
    }
    let weights: Vec<f64> = updates
        .iter()
        .map(|u| u.data_volume as f64 / total as f64)
        .collect();
    let vectors: Vec<ParamVector> = updates.iter().map(|u| u.trained_backbone.clone()).collect();
    let agg = weighted_sum(&vectors, &weights)?;
    Ok((agg, weights))
}

/// Distance-proportional weights `d_k / sum(d)`. All-zero distances fall
/// back to uniform weights with a warning: nothing trained, so no upload is
/// preferable to another.
pub fn cdw_weights(distances: &[f64]) -> Result<Vec<f64>> {
    if distances.is_empty() {
        return Err(Error::EmptyAggregation);
    }
    if let Some(&d) = distances.iter().find(|d| **d < 0.0 || !d.is_finite()) {
        return Err(Error::InvalidDistance(d));
    }
    let total: f64 = distances.iter().sum();
    if total == 0.0 {
        log::warn!("all cosine distances are zero; falling back to uniform weights");
        return Ok(vec![1.0 / distances.len() as f64; distances.len()]);
    }
    Ok(distances.iter().map(|d| d / total).collect())
}

/// Aggregates all updates with CDW weights.
pub fn aggregate_cdw(updates: &[RoundUpdate]) -> Result<(ParamVector, Vec<f64>)> {
    if updates.is_empty() {
        return Err(Error::EmptyAggregation);
    }
    let distances: Vec<f64> = updates.iter().map(|u| u.cosine_distance).collect();
    let weights = cdw_weights(&distances)?;
    let vectors: Vec<ParamVector> = updates.iter().map(|u| u.trained_backbone.clone()).collect();
    let agg = weighted_sum(&vectors, &weights)?;
    Ok((agg, weights))
}

/// One first-neighbor merge step: clients are linked when one is the other's
/// nearest feature (by cosine distance) or they share the same nearest
/// feature; clusters are the connected components.
///
/// `steps > 1` repeats the merge on cluster mean features. Zero-norm features
/// cannot be compared and end up as singleton clusters with a warning.
pub fn cluster_clients(features: &[(usize, Vec<f64>)], steps: usize) -> Result<Vec<Vec<usize>>> {
    if features.len() < 2 {
        return Err(Error::Config(
            "clustering needs at least 2 clients".into(),
        ));
    }
    let dim = features[0].1.len();
    for (_, f) in features {
        if f.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: f.len(),
            });
        }
    }

    // Each group starts as one client; every step merges groups whose mean
    // features are first neighbors.
    let mut groups: Vec<Vec<usize>> = (0..features.len()).map(|i| vec![i]).collect();
    for _ in 0..steps {
        if groups.len() <= 1 {
            break;
        }
        let means: Vec<Vec<f64>> = groups
            .iter()
            .map(|members| {
                let mut m = vec![0.0; dim];
                for &i in members {
                    for (mv, fv) in m.iter_mut().zip(&features[i].1) {
                        *mv += fv;
                    }
                }
                for mv in m.iter_mut() {
                    *mv /= members.len() as f64;
                }
                m
            })
            .collect();
        let merged = first_neighbor_step(&means);
        if merged.len() == groups.len() {
            break;
        }
        groups = merged
            .into_iter()
            .map(|component| {
                let mut members: Vec<usize> = component
                    .into_iter()
                    .flat_map(|g| groups[g].clone())
                    .collect();
                members.sort_unstable();
                members
            })
            .collect();
    }

    // Canonical order: members ascending by client id, clusters by first
    // member.
    let mut clusters: Vec<Vec<usize>> = groups
        .into_iter()
        .map(|members| {
            let mut ids: Vec<usize> = members.into_iter().map(|i| features[i].0).collect();
            ids.sort_unstable();
            ids
        })
        .collect();
    clusters.sort_by_key(|c| c[0]);
    Ok(clusters)
}

/// Connected components of the first-neighbor graph over one set of points.
/// Returns index groups into `points`.
fn first_neighbor_step(points: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let n = points.len();
    let degenerate: Vec<bool> = points
        .iter()
        .map(|p| p.iter().all(|&v| v == 0.0))
        .collect();
    if degenerate.iter().any(|&d| d) {
        log::warn!("zero-norm clustering features placed in singleton clusters");
    }

    // Nearest neighbor by cosine distance among non-degenerate points; ties
    // break toward the smaller index.
    let mut first_neighbor: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        if degenerate[i] {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if i == j || degenerate[j] {
                continue;
            }
            let d = cosine_distance_slices(&points[i], &points[j])
                .expect("non-degenerate by construction");
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        first_neighbor[i] = best.map(|(j, _)| j);
    }

    // Union-find over the adjacency: j = fn(i), i = fn(j), or fn(i) = fn(j).
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        if parent[x] != x {
            let root = find(parent, parent[x]);
            parent[x] = root;
        }
        parent[x]
    }
    let union = |parent: &mut Vec<usize>, a: usize, b: usize| {
        let (ra, rb) = (find(parent, a), find(parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    };
    for i in 0..n {
        for j in i + 1..n {
            let linked = first_neighbor[i] == Some(j)
                || first_neighbor[j] == Some(i)
                || (first_neighbor[i].is_some() && first_neighbor[i] == first_neighbor[j]);
            if linked {
                union(&mut parent, i, j);
            }
        }
    }
    let mut components: Vec<Vec<usize>> = Vec::new();
    let mut root_of: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        let root = find(&mut parent, i);
        match root_of[root] {
            Some(slot) => components[slot].push(i),
            None => {
                root_of[root] = Some(components.len());
                components.push(vec![i]);
            }
        }
    }
    components
}

/// Aggregates within each cluster: CDW weights over that cluster's distances
/// when `use_cdw`, volume weights otherwise. Returns the per-cluster
/// backbones and the flattened per-client weights actually used.
pub fn aggregate_clustered(
    updates: &[RoundUpdate],
    clusters: &[Vec<usize>],
    use_cdw: bool,
) -> Result<(ClusterAssignment, Vec<WeightEntry>)> {
    let mut backbones = Vec::with_capacity(clusters.len());
    let mut weights_used = Vec::new();
    for cluster in clusters {
        let members: Vec<&RoundUpdate> = cluster
            .iter()
            .map(|id| {
                updates
                    .iter()
                    .find(|u| u.client_id == *id)
                    .ok_or_else(|| Error::Aggregation(format!("cluster client {id} not in updates")))
            })
            .collect::<Result<_>>()?;
        let member_updates: Vec<RoundUpdate> = members.iter().map(|u| (*u).clone()).collect();
        let (agg, weights) = if use_cdw {
            aggregate_cdw(&member_updates)?
        } else {
            aggregate_volume(&member_updates)?
        };
        for (u, w) in member_updates.iter().zip(&weights) {
            weights_used.push(WeightEntry {
                client: u.client_id,
                weight: *w,
            });
        }
        backbones.push(agg);
    }
    weights_used.sort_by_key(|w| w.client);
    Ok((
        ClusterAssignment {
            clusters: clusters.to_vec(),
            backbones,
        },
        weights_used,
    ))
}

/// Distillation stats of one server fine-tune.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdOutcome {
    pub mse_pre: f64,
    pub mse_post: f64,
}

/// Server-side knowledge distillation: average the clients' soft labels and
/// move the global backbone toward them with one full-batch gradient step on
/// the shared dataset (the pass computes the exact mean-squared-error
/// gradient over every shared sample).
pub fn kd_finetune(
    global: &ParamVector,
    input_dim: usize,
    hidden_dim: usize,
    shared_inputs: &[Vec<f64>],
    soft_labels: &[Vec<f64>],
    kd_lr: f64,
) -> Result<(ParamVector, KdOutcome)> {
    if shared_inputs.is_empty() || soft_labels.is_empty() {
        return Err(Error::EmptyAggregation);
    }
    let expected = shared_inputs.len() * hidden_dim;
    for l in soft_labels {
        if l.len() != expected {
            return Err(Error::DistillationShape {
                expected,
                got: l.len(),
            });
        }
    }
    let mut target = vec![0.0; expected];
    for l in soft_labels {
        for (t, v) in target.iter_mut().zip(l) {
            *t += v;
        }
    }
    for t in target.iter_mut() {
        *t /= soft_labels.len() as f64;
    }

    let mut backbone = Backbone::from_params(input_dim, hidden_dim, global)?;
    let mse = |bb: &Backbone| -> Result<f64> {
        let mut total = 0.0;
        for (i, x) in shared_inputs.iter().enumerate() {
            let emb = bb.embed(x)?;
            for (h, e) in emb.iter().enumerate() {
                let diff = e - target[i * hidden_dim + h];
                total += diff * diff;
            }
        }
        Ok(total / expected as f64)
    };
    let mse_pre = mse(&backbone)?;

    // Full-batch MSE gradient through the rectifier.
    let mut grad_w1 = vec![0.0; input_dim * hidden_dim];
    let mut grad_b1 = vec![0.0; hidden_dim];
    for (i, x) in shared_inputs.iter().enumerate() {
        let emb = backbone.embed(x)?;
        for h in 0..hidden_dim {
            if emb[h] <= 0.0 {
                continue; // rectifier gate closed
            }
            let dz = 2.0 * (emb[h] - target[i * hidden_dim + h]) / expected as f64;
            grad_b1[h] += dz;
            for (f, &xf) in x.iter().enumerate() {
                grad_w1[f * hidden_dim + h] += xf * dz;
            }
        }
    }
    let mut params = backbone.to_params().into_values();
    for (p, g) in params.iter_mut().zip(grad_w1.iter().chain(&grad_b1)) {
        *p -= kd_lr * g;
    }
    let tuned = ParamVector::new(params)?;
    backbone.load_params(&tuned)?;
    let mse_post = mse(&backbone)?;
    Ok((tuned, KdOutcome { mse_pre, mse_post }))
}

/// One participating client: its shard, private classifier, optimizer state,
/// and rng, all persistent across rounds.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    pub volume: usize,
    backbone: Backbone,
    classifier: Classifier,
    opt: OptimizerState,
    rng: Rng,
    /// Mini-batch steps taken so far (diagnostics).
    pub steps: u64,
}

impl ClientState {
    pub fn new(
        shard: &ClientShard,
        hidden_dim: usize,
        hyper: OptimizerHyper,
        seed: u64,
        init_backbone: &Backbone,
    ) -> Result<Self> {
        let mut identities: Vec<usize> = shard.samples.iter().map(|s| s.identity).collect();
        identities.sort_unstable();
        identities.dedup();
        let num_classes = identities.len().max(1);
        let labels: Vec<usize> = shard
            .samples
            .iter()
            .map(|s| identities.binary_search(&s.identity).unwrap())
            .collect();
        let inputs: Vec<Vec<f64>> = shard.samples.iter().map(|s| s.features.clone()).collect();
        // The classifier stream is keyed by the label set, not the client id:
        // identical label spaces initialize identically. Shuffles use a
        // separate per-client stream.
        let mut label_key = 0xcbf2_9ce4_8422_2325u64;
        for id in &identities {
            label_key ^= *id as u64;
            label_key = label_key.wrapping_mul(0x100_0000_01b3);
        }
        let mut classifier_rng = Rng::derive(seed, TAG_CLASSIFIER ^ label_key);
        let rng = Rng::derive(seed, TAG_CLIENT.wrapping_add(shard.id as u64));
        let classifier = Classifier::init(hidden_dim, num_classes, &mut classifier_rng);
        let opt = OptimizerState::new(init_backbone, &classifier, hyper);
        Ok(Self {
            id: shard.id,
            inputs,
            labels,
            volume: shard.samples.len(),
            backbone: init_backbone.clone(),
            classifier,
            opt,
            rng,
            steps: 0,
        })
    }

    /// Replaces this client's private randomness entirely: the classifier is
    /// re-initialized from the new stream, optimizer state resets, and all
    /// subsequent shuffles come from it. Matched-stream oracle runs use this
    /// to make distinct clients bit-identical.
    pub fn reseed(&mut self, mut rng: Rng) {
        self.classifier = Classifier::init(
            self.classifier.hidden_dim,
            self.classifier.num_classes,
            &mut rng,
        );
        self.opt = OptimizerState::new(&self.backbone, &self.classifier, self.opt.hyper);
        self.rng = rng;
        self.steps = 0;
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn cumulative_epochs(&self) -> u64 {
        self.opt.cumulative_epochs
    }

    /// Runs `epochs` of shuffled mini-batch SGD (batch size `batch_size`,
    /// partial final batch kept) starting from `incoming`, and returns the
    /// upload: trained backbone, volume, shared-batch logit distance, and the
    /// optional clustering features / soft labels.
    pub fn local_train(
        &mut self,
        incoming: &ParamVector,
        epochs: usize,
        batch_size: usize,
        shared_batch: &[Vec<f64>],
        shared_all: &[Vec<f64>],
        want_features: bool,
        want_soft_labels: bool,
    ) -> Result<RoundUpdate> {
        self.backbone.load_params(incoming)?;
        let logits_before = extract_logits(&self.backbone, &self.classifier, shared_batch)?;

        for _ in 0..epochs {
            let mut order: Vec<usize> = (0..self.inputs.len()).collect();
            self.rng.shuffle(&mut order);
            for chunk in order.chunks(batch_size) {
                let batch_inputs: Vec<Vec<f64>> =
                    chunk.iter().map(|&i| self.inputs[i].clone()).collect();
                let batch_labels: Vec<usize> = chunk.iter().map(|&i| self.labels[i]).collect();
                backward_and_step(
                    &mut self.backbone,
                    &mut self.classifier,
                    &mut self.opt,
                    &batch_inputs,
                    &batch_labels,
                )?;
                self.steps += 1;
            }
            self.opt.advance_epoch();
        }

        let logits_after = extract_logits(&self.backbone, &self.classifier, shared_batch)?;
        let cosine_distance = match cosine_distance_slices(&logits_before, &logits_after) {
            Ok(d) => d,
            Err(Error::DegenerateVector) => {
                // Untrained output can be legitimately unchanged-zero; treat
                // as "no progress" rather than failing the round.
                log::warn!("client {}: degenerate shared-batch logits, using d = 0", self.id);
                0.0
            }
            Err(e) => return Err(e),
        };

        let clustering_features = if want_features {
            Some(extract_features(
                &self.backbone,
                shared_batch,
                shared_batch.len(),
            )?)
        } else {
            None
        };
        let soft_labels = if want_soft_labels {
            let mut emb = Vec::with_capacity(shared_all.len() * self.backbone.hidden_dim);
            for x in shared_all {
                emb.extend(self.backbone.embed(x)?);
            }
            Some(emb)
        } else {
            None
        };

        Ok(RoundUpdate {
            client_id: self.id,
            trained_backbone: self.backbone.to_params(),
            data_volume: self.volume,
            cosine_distance,
            clustering_features,
            soft_labels,
        })
    }

    /// Evaluates this client's current local backbone on its own test split.
    fn eval_local(&self, queries: &[Sample], gallery: &[Sample]) -> Result<ClientMetrics> {
        ClientMetrics::evaluate(self.id, queries, gallery, &self.backbone)
    }
}

/// Round-synchronous federation over one world. Single-threaded and fully
/// deterministic given the config seed.
pub struct Federation<'w> {
    pub config: ExperimentConfig,
    world: &'w FederatedWorld,
    clients: Vec<ClientState>,
    global: ParamVector,
    assignment: Option<ClusterAssignment>,
    server_rng: Rng,
    shared_batch_inputs: Vec<Vec<f64>>,
    shared_inputs: Vec<Vec<f64>>,
    comm_per_client: u64,
    comm_fleet: u64,
    aggregations: usize,
    last_weights: Vec<WeightEntry>,
    last_clusters: Option<Vec<Vec<usize>>>,
    last_kd: Option<KdOutcome>,
}

impl<'w> Federation<'w> {
    pub fn new(config: ExperimentConfig, world: &'w FederatedWorld) -> Result<Self> {
        config.validate(world)?;
        let mut init_rng = Rng::derive(config.seed, TAG_INIT);
        let init_backbone = Backbone::init(world.input_dim, config.hidden_dim, &mut init_rng);
        let clients: Vec<ClientState> = world.clients[..config.clients]
            .iter()
            .map(|shard| {
                ClientState::new(
                    shard,
                    config.hidden_dim,
                    config.optimizer,
                    config.seed,
                    &init_backbone,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            server_rng: Rng::derive(config.seed, TAG_SERVER),
            global: init_backbone.to_params(),
            assignment: None,
            clients,
            shared_batch_inputs: world.shared_batch_inputs(),
            shared_inputs: world.shared_inputs(),
            world,
            config,
            comm_per_client: 0,
            comm_fleet: 0,
            aggregations: 0,
            last_weights: Vec::new(),
            last_clusters: None,
            last_kd: None,
        })
    }

    pub fn global_backbone(&self) -> &ParamVector {
        &self.global
    }

    pub fn cluster_assignment(&self) -> Option<&ClusterAssignment> {
        self.assignment.as_ref()
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    /// Replaces one client's private randomness (matched-stream oracle runs).
    pub fn reseed_client(&mut self, client: usize, rng: Rng) {
        self.clients[client].reseed(rng);
    }

    /// Backbone a client would receive at distribution time: its cluster's
    /// model once clustering has run, the global model otherwise.
    fn incoming_for(&self, client: usize) -> ParamVector {
        match &self.assignment {
            Some(assignment) => assignment
                .backbone_for(client)
                .cloned()
                .unwrap_or_else(|| self.global.clone()),
            None => self.global.clone(),
        }
    }

    /// One round: select K clients, distribute, train locally, aggregate per
    /// strategy, optionally distill.
    pub fn run_round(&mut self, round: usize) -> Result<()> {
        let strategy = self.config.strategy;
        let mut selected = self
            .server_rng
            .choice_k(self.config.clients, self.config.selected_per_round)?;
        selected.sort_unstable();

        let mut updates = Vec::with_capacity(selected.len());
        for &k in &selected {
            let incoming = self.incoming_for(k);
            let update = self.clients[k]
                .local_train(
                    &incoming,
                    self.config.local_epochs,
                    self.config.batch_size,
                    &self.shared_batch_inputs,
                    &self.shared_inputs,
                    strategy.uses_clustering(),
                    strategy.uses_distillation(),
                )
                .map_err(|e| Error::RoundFailed {
                    round,
                    client: k,
                    source: Box::new(e),
                })?;
            updates.push(update);
        }

        if strategy.uses_clustering() {
            let features: Vec<(usize, Vec<f64>)> = updates
                .iter()
                .map(|u| {
                    (
                        u.client_id,
                        u.clustering_features.clone().expect("CC collects features"),
                    )
                })
                .collect();
            let clusters = if features.len() >= 2 {
                cluster_clients(&features, self.config.finch_steps)?
            } else {
                vec![vec![features[0].0]]
            };
            let (assignment, weights) =
                aggregate_clustered(&updates, &clusters, strategy.uses_cdw())?;
            self.last_weights = weights;
            self.last_clusters = Some(assignment.clusters.clone());
            self.assignment = Some(assignment);
        } else {
            let (mut aggregated, weights) = if strategy.uses_cdw() {
                aggregate_cdw(&updates)?
            } else {
                aggregate_volume(&updates)?
            };
            self.last_weights = updates
                .iter()
                .zip(&weights)
                .map(|(u, w)| WeightEntry {
                    client: u.client_id,
                    weight: *w,
                })
                .collect();
            if strategy.uses_distillation() {
                let soft_labels: Vec<Vec<f64>> = updates
                    .iter()
                    .map(|u| u.soft_labels.clone().expect("KD collects soft labels"))
                    .collect();
                let (tuned, outcome) = kd_finetune(
                    &aggregated,
                    self.world.input_dim,
                    self.config.hidden_dim,
                    &self.shared_inputs,
                    &soft_labels,
                    self.config.kd_lr,
                )?;
                aggregated = tuned;
                self.last_kd = Some(outcome);
            }
            self.global = aggregated;
        }
        self.aggregations += 1;

        let model_bytes = self.global.byte_size();
        self.comm_per_client += metrics::communication_cost(1, model_bytes, 1);
        self.comm_fleet += metrics::communication_cost(1, model_bytes, selected.len() as u64);
        Ok(())
    }

    /// Evaluates global (or per-cluster) and local models on every client's
    /// test split.
    pub fn evaluate(&self, round: usize) -> Result<EvalRecord> {
        let mut global = Vec::with_capacity(self.clients.len());
        let mut local = Vec::with_capacity(self.clients.len());
        for client in &self.clients {
            let test = &self.world.tests[client.id];
            let global_params = self.incoming_for(client.id);
            let global_model = Backbone::from_params(
                self.world.input_dim,
                self.config.hidden_dim,
                &global_params,
            )?;
            global.push(ClientMetrics::evaluate(
                client.id,
                &test.query,
                &test.gallery,
                &global_model,
            )?);
            local.push(client.eval_local(&test.query, &test.gallery)?);
        }
        Ok(EvalRecord {
            round,
            strategy: self.config.strategy.name().to_string(),
            global,
            local,
            weights: self.last_weights.clone(),
            clusters: self.last_clusters.clone(),
            kd_mse_pre: self.last_kd.map(|k| k.mse_pre),
            kd_mse_post: self.last_kd.map(|k| k.mse_post),
            comm_bytes_per_client: self.comm_per_client,
            comm_bytes_fleet: self.comm_fleet,
        })
    }

    /// Runs all rounds, evaluating on the configured cadence (and always
    /// after the final round). Artifacts stream into `outdir` when given.
    pub fn run(&mut self, outdir: Option<&Path>) -> Result<MetricsReport> {
        let mut sink = outdir.map(RunSink::new).transpose()?;
        let mut trace = Vec::new();
        for t in 0..self.config.rounds {
            self.run_round(t)?;
            let completed = t + 1;
            if completed % self.config.eval_every == 0 || completed == self.config.rounds {
                let record = self.evaluate(completed)?;
                if let Some(sink) = sink.as_mut() {
                    sink.record(&record)?;
                    self.write_checkpoints(sink, completed)?;
                }
                trace.push(record);
            }
        }
        let volumes: Vec<usize> = self.clients.iter().map(|c| c.volume).collect();
        let report = MetricsReport::finalize(
            self.config.strategy.name().to_string(),
            self.config.rounds,
            self.config.seed,
            volumes,
            self.aggregations,
            trace,
        );
        if let Some(sink) = sink.as_mut() {
            sink.finish(&report)?;
        }
        Ok(report)
    }

    fn write_checkpoints(&self, sink: &mut RunSink, round: usize) -> Result<()> {
        let epochs = (round * self.config.local_epochs) as u64;
        match &self.assignment {
            Some(assignment) => {
                for (i, backbone) in assignment.backbones.iter().enumerate() {
                    let bb = Backbone::from_params(
                        self.world.input_dim,
                        self.config.hidden_dim,
                        backbone,
                    )?;
                    sink.checkpoint(
                        &format!("round_{round:04}_cluster_{i}"),
                        &crate::model::Checkpoint::of_backbone(&bb, epochs),
                    )?;
                }
            }
            None => {
                let bb = Backbone::from_params(
                    self.world.input_dim,
                    self.config.hidden_dim,
                    &self.global,
                )?;
                sink.checkpoint(
                    &format!("round_{round:04}"),
                    &crate::model::Checkpoint::of_backbone(&bb, epochs),
                )?;
            }
        }
        Ok(())
    }
}

/// Executes `config` against `world`; writes trace, checkpoints, and report
/// into `outdir` when given.
pub fn run_experiment(
    config: &ExperimentConfig,
    world: &FederatedWorld,
    outdir: Option<&Path>,
) -> Result<MetricsReport> {
    Federation::new(config.clone(), world)?.run(outdir)
}

/// Per-client training with no federation: every client trains alone on its
/// own shard for `rounds * local_epochs` epochs, evaluated on the same
/// cadence as federated runs. Performs zero aggregations.
pub fn run_standalone(
    config: &ExperimentConfig,
    world: &FederatedWorld,
    outdir: Option<&Path>,
) -> Result<MetricsReport> {
    config.validate(world)?;
    let mut init_rng = Rng::derive(config.seed, TAG_INIT);
    let init_backbone = Backbone::init(world.input_dim, config.hidden_dim, &mut init_rng);
    let mut clients: Vec<ClientState> = world.clients[..config.clients]
        .iter()
        .map(|shard| {
            ClientState::new(
                shard,
                config.hidden_dim,
                config.optimizer,
                config.seed,
                &init_backbone,
            )
        })
        .collect::<Result<_>>()?;

    let mut sink = outdir.map(RunSink::new).transpose()?;
    let mut trace = Vec::new();
    for t in 0..config.rounds {
        for client in clients.iter_mut() {
            let incoming = client.backbone.to_params();
            client
                .local_train(
                    &incoming,
                    config.local_epochs,
                    config.batch_size,
                    &[],
                    &[],
                    false,
                    false,
                )
                .map_err(|e| Error::RoundFailed {
                    round: t,
                    client: client.id,
                    source: Box::new(e),
                })?;
        }
        let completed = t + 1;
        if completed % config.eval_every == 0 || completed == config.rounds {
            let local: Vec<ClientMetrics> = clients
                .iter()
                .map(|c| c.eval_local(&world.tests[c.id].query, &world.tests[c.id].gallery))
                .collect::<Result<_>>()?;
            let record = EvalRecord {
                round: completed,
                strategy: "standalone".to_string(),
                global: Vec::new(),
                local,
                weights: Vec::new(),
                clusters: None,
                kd_mse_pre: None,
                kd_mse_post: None,
                comm_bytes_per_client: 0,
                comm_bytes_fleet: 0,
            };
            if let Some(sink) = sink.as_mut() {
                sink.record(&record)?;
            }
            trace.push(record);
        }
    }
    let volumes: Vec<usize> = clients.iter().map(|c| c.volume).collect();
    let report = MetricsReport::finalize_standalone(config.rounds, config.seed, volumes, trace);
    if let Some(sink) = sink.as_mut() {
        sink.finish(&report)?;
    }
    Ok(report)
}

/// Training on the union of all shards with one model, matching the
/// federated compute budget (`rounds * local_epochs` total epochs). The
/// single model is evaluated as the global model on every client's test
/// split.
pub fn run_centralized(
    config: &ExperimentConfig,
    world: &FederatedWorld,
    outdir: Option<&Path>,
) -> Result<MetricsReport> {
    config.validate(world)?;
    let mut init_rng = Rng::derive(config.seed, TAG_INIT);
    let init_backbone = Backbone::init(world.input_dim, config.hidden_dim, &mut init_rng);
    let union = ClientShard {
        id: 0,
        samples: world.clients[..config.clients]
            .iter()
            .flat_map(|c| c.samples.iter().cloned())
            .collect(),
    };
    let mut model = ClientState::new(
        &union,
        config.hidden_dim,
        config.optimizer,
        config.seed,
        &init_backbone,
    )?;

    let mut sink = outdir.map(RunSink::new).transpose()?;
    let mut trace = Vec::new();
    for t in 0..config.rounds {
        let incoming = model.backbone.to_params();
        model
            .local_train(
                &incoming,
                config.local_epochs,
                config.batch_size,
                &[],
                &[],
                false,
                false,
            )
            .map_err(|e| Error::RoundFailed {
                round: t,
                client: 0,
                source: Box::new(e),
            })?;
        let completed = t + 1;
        if completed % config.eval_every == 0 || completed == config.rounds {
            let global: Vec<ClientMetrics> = world.clients[..config.clients]
                .iter()
                .map(|c| {
                    ClientMetrics::evaluate(
                        c.id,
                        &world.tests[c.id].query,
                        &world.tests[c.id].gallery,
                        &model.backbone,
                    )
                })
                .collect::<Result<_>>()?;
            let record = EvalRecord {
                round: completed,
                strategy: "centralized".to_string(),
                global,
                local: Vec::new(),
                weights: Vec::new(),
                clusters: None,
                kd_mse_pre: None,
                kd_mse_post: None,
                comm_bytes_per_client: 0,
                comm_bytes_fleet: 0,
            };
            if let Some(sink) = sink.as_mut() {
                sink.record(&record)?;
            }
            trace.push(record);
        }
    }
    let volumes: Vec<usize> = world.clients[..config.clients]
        .iter()
        .map(|c| c.volume())
        .collect();
    let report = MetricsReport::finalize(
        "centralized".to_string(),
        config.rounds,
        config.seed,
        volumes,
        0,
        trace,
    );
    if let Some(sink) = sink.as_mut() {
        sink.finish(&report)?;
    }
    Ok(report)
}

/// Streams run artifacts: `trace.jsonl` (one record per evaluation point),
/// `trace.txt` (aligned table), `checkpoints/`, and `report.json`.
struct RunSink {
    dir: PathBuf,
    jsonl: fs::File,
    table: fs::File,
    wrote_header: bool,
}

impl RunSink {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints"))?;
        let jsonl = fs::File::create(dir.join("trace.jsonl"))?;
        let table = fs::File::create(dir.join("trace.txt"))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            jsonl,
            table,
            wrote_header: false,
        })
    }

    fn record(&mut self, record: &EvalRecord) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::Format {
            what: "trace record",
            detail: e.to_string(),
        })?;
        writeln!(self.jsonl, "{line}")?;
        if !self.wrote_header {
            writeln!(
                self.table,
                "{:>6}  {:>14}  {:>9}  {:>9}  {:>9}  {:>9}  {:>12}  {}",
                "round", "strategy", "glob-r1", "glob-mAP", "loc-r1", "loc-mAP", "comm/client", "kd-mse"
            )?;
            self.wrote_header = true;
        }
        let mean = |ms: &[ClientMetrics], f: fn(&ClientMetrics) -> f64| -> f64 {
            if ms.is_empty() {
                return f64::NAN;
            }
            ms.iter().map(f).sum::<f64>() / ms.len() as f64
        };
        let kd = match (record.kd_mse_pre, record.kd_mse_post) {
            (Some(pre), Some(post)) => format!("{pre:.6}->{post:.6}"),
            _ => "-".to_string(),
        };
        writeln!(
            self.table,
            "{:>6}  {:>14}  {:>9.4}  {:>9.4}  {:>9.4}  {:>9.4}  {:>12}  {}",
            record.round,
            record.strategy,
            mean(&record.global, |m| m.rank1),
            mean(&record.global, |m| m.map),
            mean(&record.local, |m| m.rank1),
            mean(&record.local, |m| m.map),
            record.comm_bytes_per_client,
            kd
        )?;
        Ok(())
    }

    fn checkpoint(&mut self, name: &str, ck: &crate::model::Checkpoint) -> Result<()> {
        ck.save(&self.dir.join("checkpoints").join(format!("{name}.ckpt")))
    }

    fn finish(&mut self, report: &MetricsReport) -> Result<()> {
        let json = serde_json::to_string_pretty(report).map_err(|e| Error::Format {
            what: "report",
            detail: e.to_string(),
        })?;
        fs::write(self.dir.join("report.json"), json)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_world, WorldConfig};

    fn test_world(seed: u64) -> FederatedWorld {
        generate_world(&WorldConfig {
            clients: 4,
            identities_per_client: 3,
            test_identities_per_client: 4,
            cameras_per_client: 2,
            total_train_samples: 120,
            input_dim: 6,
            identity_dims: 3,
            shared_size: 16,
            shared_batch_size: 8,
            seed,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    fn test_config() -> ExperimentConfig {
        ExperimentConfig {
            rounds: 3,
            clients: 4,
            selected_per_round: 4,
            batch_size: 16,
            eval_every: 1,
            hidden_dim: 4,
            seed: 11,
            ..ExperimentConfig::default()
        }
    }

    fn update(id: usize, backbone: &[f64], volume: usize, d: f64) -> RoundUpdate {
        RoundUpdate {
            client_id: id,
            trained_backbone: ParamVector::new(backbone.to_vec()).unwrap(),
            data_volume: volume,
            cosine_distance: d,
            clustering_features: None,
            soft_labels: None,
        }
    }

    #[test]
    fn strategy_parse_roundtrip() {
        for s in Strategy::ALL {
            assert_eq!(Strategy::parse(s.name()).unwrap(), s);
        }
        assert!(Strategy::parse("fedavg").is_err());
        assert!(Strategy::parse("fedpav+kd+cc").is_err());
    }

    #[test]
    fn volume_weights_match_ratios() {
        let updates = vec![
            update(0, &[1.0, 0.0], 32621, 0.1),
            update(1, &[0.0, 1.0], 248, 0.1),
        ];
        let (_, weights) = aggregate_volume(&updates).unwrap();
        assert!((weights[0] - 0.9925).abs() < 5e-4, "{}", weights[0]);
        assert!((weights[1] - 0.0075).abs() < 5e-4, "{}", weights[1]);

        let equal = vec![update(0, &[2.0], 10, 0.0), update(1, &[4.0], 10, 0.0)];
        let (agg, weights) = aggregate_volume(&equal).unwrap();
        assert_eq!(weights, vec![0.5, 0.5]);
        assert_eq!(agg.as_slice(), &[3.0]);

        let single = vec![update(7, &[5.0, -1.0], 3, 0.0)];
        let (agg, weights) = aggregate_volume(&single).unwrap();
        assert_eq!(weights, vec![1.0]);
        assert_eq!(agg.as_slice(), &[5.0, -1.0]);

        let zeros = vec![update(0, &[1.0], 0, 0.0)];
        assert!(matches!(
            aggregate_volume(&zeros),
            Err(Error::Aggregation(_))
        ));
    }

    #[test]
    fn cdw_weight_fixtures() {
        assert_eq!(cdw_weights(&[1.0, 3.0]).unwrap(), vec![0.25, 0.75]);
        let thirds = cdw_weights(&[0.7, 0.7, 0.7]).unwrap();
        for w in &thirds {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        // All-zero distances: uniform fallback.
        assert_eq!(cdw_weights(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(
            cdw_weights(&[-0.1, 0.5]),
            Err(Error::InvalidDistance(_))
        ));
    }

    #[test]
    fn clustering_two_clients_forced_together() {
        let features = vec![(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])];
        let clusters = cluster_clients(&features, 1).unwrap();
        assert_eq!(clusters, vec![vec![0, 1]]);
    }

    #[test]
    fn clustering_four_angles() {
        // Angles 0, 1, 90, 91 degrees: two tight pairs.
        let point = |deg: f64| {
            let r = deg.to_radians();
            vec![r.cos(), r.sin()]
        };
        let features = vec![
            (10, point(0.0)),
            (11, point(1.0)),
            (12, point(90.0)),
            (13, point(91.0)),
        ];
        let clusters = cluster_clients(&features, 1).unwrap();
        assert_eq!(clusters, vec![vec![10, 11], vec![12, 13]]);
    }

    #[test]
    fn clustering_degenerate_feature_is_singleton() {
        let features = vec![
            (0, vec![1.0, 0.0]),
            (1, vec![0.9, 0.1]),
            (2, vec![0.0, 0.0]),
        ];
        let clusters = cluster_clients(&features, 1).unwrap();
        assert_eq!(clusters, vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn clustering_extra_steps_merge_fragments() {
        let point = |deg: f64| {
            let r = deg.to_radians();
            vec![r.cos(), r.sin()]
        };
        // Four tight pairs in two far-apart regions: a second step merges
        // the within-region fragments.
        let features = vec![
            (0, point(0.0)),
            (1, point(0.5)),
            (2, point(8.0)),
            (3, point(8.5)),
            (4, point(90.0)),
            (5, point(90.5)),
            (6, point(98.0)),
            (7, point(98.5)),
        ];
        let one = cluster_clients(&features, 1).unwrap();
        assert_eq!(one.len(), 4);
        let two = cluster_clients(&features, 2).unwrap();
        assert_eq!(two, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]]);
    }

    #[test]
    fn clustered_aggregation_reductions() {
        let updates = vec![
            update(0, &[1.0, 1.0], 10, 0.5),
            update(1, &[3.0, 3.0], 10, 0.5),
            update(2, &[5.0, 5.0], 20, 0.5),
        ];
        // Single cluster of everyone == global aggregation.
        let all = vec![vec![0, 1, 2]];
        let (assignment, _) = aggregate_clustered(&updates, &all, false).unwrap();
        let (global, _) = aggregate_volume(&updates).unwrap();
        assert_eq!(assignment.backbones[0], global);

        // Singletons: each cluster backbone is its sole member's backbone.
        let singles = vec![vec![0], vec![1], vec![2]];
        let (assignment, weights) = aggregate_clustered(&updates, &singles, true).unwrap();
        for (i, u) in updates.iter().enumerate() {
            assert_eq!(assignment.backbones[i], u.trained_backbone);
        }
        assert!(weights.iter().all(|w| w.weight == 1.0));

        // {A}, {B, C} with equal distances: cluster 2 backbone = mean.
        let split = vec![vec![0], vec![1, 2]];
        let (assignment, _) = aggregate_clustered(&updates, &split, true).unwrap();
        assert_eq!(assignment.backbones[1].as_slice(), &[4.0, 4.0]);
        assert_eq!(assignment.backbone_for(2), Some(&assignment.backbones[1]));
    }

    #[test]
    fn kd_fixed_point_and_descent() {
        let mut rng = Rng::new(3);
        let backbone = Backbone::init(4, 3, &mut rng);
        let shared: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..4).map(|_| rng.next_gaussian()).collect())
            .collect();
        // Soft labels equal to the model's own embeddings: zero gradient.
        let own: Vec<f64> = shared
            .iter()
            .flat_map(|x| backbone.embed(x).unwrap())
            .collect();
        let params = backbone.to_params();
        let (tuned, outcome) = kd_finetune(&params, 4, 3, &shared, &[own.clone()], 5e-4).unwrap();
        assert_eq!(outcome.mse_pre, 0.0);
        assert_eq!(outcome.mse_post, 0.0);
        for (a, b) in tuned.as_slice().iter().zip(params.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }

        // Identical labels: mean equals them exactly; distinct target
        // decreases MSE after the step.
        let target: Vec<f64> = own.iter().map(|v| v + 0.5).collect();
        let labels = vec![target.clone(), target.clone(), target.clone()];
        let (_, outcome) = kd_finetune(&params, 4, 3, &shared, &labels, 5e-4).unwrap();
        assert!(outcome.mse_post <= outcome.mse_pre);
        assert!(outcome.mse_pre > 0.0);

        // Shape mismatch rejected.
        assert!(matches!(
            kd_finetune(&params, 4, 3, &shared, &[vec![0.0; 5]], 5e-4),
            Err(Error::DistillationShape { .. })
        ));
    }

    #[test]
    fn local_train_zero_epochs_is_identity() {
        let world = test_world(5);
        let mut rng = Rng::new(1);
        let init = Backbone::init(world.input_dim, 4, &mut rng);
        let mut client = ClientState::new(
            &world.clients[0],
            4,
            OptimizerHyper::default(),
            2,
            &init,
        )
        .unwrap();
        let incoming = init.to_params();
        let update = client
            .local_train(
                &incoming,
                0,
                32,
                &world.shared_batch_inputs(),
                &world.shared_inputs(),
                true,
                true,
            )
            .unwrap();
        assert_eq!(update.trained_backbone, incoming);
        assert_eq!(update.cosine_distance, 0.0);
        assert_eq!(update.data_volume, world.clients[0].volume());
    }

    #[test]
    fn identical_clients_produce_identical_updates() {
        let world = test_world(6);
        let mut rng = Rng::new(1);
        let init = Backbone::init(world.input_dim, 4, &mut rng);
        let shard = &world.clients[0];
        let make = || {
            ClientState::new(
                shard,
                4,
                OptimizerHyper::default(),
                99,
                &init,
            )
            .unwrap()
        };
        let (mut a, mut b) = (make(), make());
        let incoming = init.to_params();
        let batch = world.shared_batch_inputs();
        let all = world.shared_inputs();
        let ua = a.local_train(&incoming, 2, 8, &batch, &all, true, true).unwrap();
        let ub = b.local_train(&incoming, 2, 8, &batch, &all, true, true).unwrap();
        assert_eq!(ua, ub);
        assert!(ua.cosine_distance > 0.0);
    }

    #[test]
    fn minibatch_count_keeps_partial_batch() {
        // 100 samples at batch size 32: ceil(100/32) = 4 steps per epoch.
        let samples: Vec<Sample> = (0..100)
            .map(|i| Sample {
                features: vec![(i % 7) as f64, 1.0],
                identity: i % 5,
                camera: i % 2,
                client: 0,
            })
            .collect();
        let shard = ClientShard { id: 0, samples };
        let mut rng = Rng::new(4);
        let init = Backbone::init(2, 3, &mut rng);
        let mut client =
            ClientState::new(&shard, 3, OptimizerHyper::default(), 5, &init).unwrap();
        client
            .local_train(&init.to_params(), 1, 32, &[], &[], false, false)
            .unwrap();
        assert_eq!(client.steps, 4);
        assert_eq!(client.cumulative_epochs(), 1);
    }

    #[test]
    fn single_client_round_returns_client_backbone() {
        let world = test_world(7);
        let config = ExperimentConfig {
            rounds: 1,
            clients: 1,
            selected_per_round: 1,
            eval_every: 1,
            hidden_dim: 4,
            seed: 3,
            ..ExperimentConfig::default()
        };
        let mut fed = Federation::new(config, &world).unwrap();
        fed.run_round(0).unwrap();
        assert_eq!(fed.global_backbone(), &fed.clients()[0].backbone().to_params());
    }

    #[test]
    fn run_is_deterministic() {
        let world = test_world(8);
        for strategy in Strategy::ALL {
            let config = ExperimentConfig {
                strategy,
                ..test_config()
            };
            let a = run_experiment(&config, &world, None).unwrap();
            let b = run_experiment(&config, &world, None).unwrap();
            assert_eq!(
                serde_json::to_string(&a).unwrap(),
                serde_json::to_string(&b).unwrap(),
                "strategy {} not deterministic",
                strategy.name()
            );
        }
    }

    #[test]
    fn round_update_carries_no_classifier() {
        let world = test_world(9);
        let mut rng = Rng::new(1);
        let init = Backbone::init(world.input_dim, 4, &mut rng);
        let mut client = ClientState::new(
            &world.clients[0],
            4,
            OptimizerHyper::default(),
            2,
            &init,
        )
        .unwrap();
        let update = client
            .local_train(
                &init.to_params(),
                1,
                16,
                &world.shared_batch_inputs(),
                &world.shared_inputs(),
                true,
                true,
            )
            .unwrap();
        // Structural privacy boundary: the serialized upload exposes exactly
        // the declared fields, and the backbone length matches the shared
        // part only.
        let value = serde_json::to_value(&update).unwrap();
        let keys: Vec<&str> = value.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        assert_eq!(
            keys,
            vec![
                "client_id",
                "clustering_features",
                "cosine_distance",
                "data_volume",
                "soft_labels",
                "trained_backbone"
            ]
        );
        assert_eq!(
            update.trained_backbone.len(),
            world.input_dim * 4 + 4,
            "upload must be backbone-sized"
        );
    }

    #[test]
    fn weights_in_trace_form_simplex() {
        let world = test_world(10);
        for strategy in Strategy::ALL {
            let config = ExperimentConfig {
                strategy,
                ..test_config()
            };
            let report = run_experiment(&config, &world, None).unwrap();
            for record in &report.trace {
                assert!(!record.weights.is_empty());
                if strategy.uses_clustering() {
                    // Weights sum to one within each cluster.
                    let clusters = record.clusters.as_ref().unwrap();
                    for cluster in clusters {
                        let sum: f64 = record
                            .weights
                            .iter()
                            .filter(|w| cluster.contains(&w.client))
                            .map(|w| w.weight)
                            .sum();
                        assert!((sum - 1.0).abs() < 1e-12, "cluster weight sum {sum}");
                    }
                } else {
                    let sum: f64 = record.weights.iter().map(|w| w.weight).sum();
                    assert!((sum - 1.0).abs() < 1e-12, "weight sum {sum}");
                }
                for w in &record.weights {
                    assert!(w.weight >= 0.0);
                }
            }
        }
    }

    #[test]
    fn cdw_equal_distances_reduce_to_uniform() {
        let backbones = [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let updates: Vec<RoundUpdate> = backbones
            .iter()
            .enumerate()
            .map(|(i, b)| update(i, b, 10 + i, 0.42))
            .collect();
        let (cdw_agg, cdw_w) = aggregate_cdw(&updates).unwrap();
        let uniform = weighted_sum(
            &updates
                .iter()
                .map(|u| u.trained_backbone.clone())
                .collect::<Vec<_>>(),
            &[1.0 / 3.0; 3],
        )
        .unwrap();
        for (a, b) in cdw_agg.as_slice().iter().zip(uniform.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        for w in &cdw_w {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kd_trace_has_mse_columns() {
        let world = test_world(12);
        let config = ExperimentConfig {
            strategy: Strategy::FedPavKdCdw,
            ..test_config()
        };
        let report = run_experiment(&config, &world, None).unwrap();
        for record in &report.trace {
            let pre = record.kd_mse_pre.expect("kd runs trace pre-mse");
            let post = record.kd_mse_post.expect("kd runs trace post-mse");
            assert!(post <= pre + 1e-12, "distillation increased mse: {pre} -> {post}");
        }
    }

    #[test]
    fn persisted_artifacts_exist_and_rerun_identically() {
        let world = test_world(13);
        let config = test_config();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        run_experiment(&config, &world, Some(dir_a.path())).unwrap();
        run_experiment(&config, &world, Some(dir_b.path())).unwrap();
        for name in ["trace.jsonl", "trace.txt", "report.json"] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
            assert!(!a.is_empty());
        }
        assert!(dir_a.path().join("checkpoints/round_0003.ckpt").exists());
    }

    #[test]
    fn standalone_performs_zero_aggregations() {
        let world = test_world(14);
        let config = test_config();
        let report = run_standalone(&config, &world, None).unwrap();
        assert_eq!(report.aggregations, 0);
        assert!(report.final_global.is_empty());
        assert_eq!(report.final_local.len(), 4);
        assert!(report.trace.iter().all(|r| r.weights.is_empty()));
        assert_eq!(report.comm_bytes_fleet, 0);
    }

    #[test]
    fn centralized_on_single_client_world_matches_standalone() {
        let mut world = test_world(15);
        // Reduce to one client.
        world.clients.truncate(1);
        world.tests.truncate(1);
        world.groups.truncate(1);
        let config = ExperimentConfig {
            rounds: 3,
            clients: 1,
            selected_per_round: 1,
            eval_every: 1,
            hidden_dim: 4,
            seed: 21,
            ..ExperimentConfig::default()
        };
        let standalone = run_standalone(&config, &world, None).unwrap();
        let centralized = run_centralized(&config, &world, None).unwrap();
        for (s, c) in standalone.trace.iter().zip(&centralized.trace) {
            let sm = &s.local[0];
            let cm = &c.global[0];
            assert!((sm.rank1 - cm.rank1).abs() < 1e-10);
            assert!((sm.map - cm.map).abs() < 1e-10);
        }
    }

    #[test]
    fn uniform_federation_matches_single_client_stream() {
        // All clients hold identical data and rng streams: fedpav with equal
        // volumes must follow the one-client training trajectory.
        let world = test_world(16);
        let shard = world.clients[0].clone();
        let mk_world = |n: usize| {
            let mut w = world.clone();
            w.clients = (0..n)
                .map(|id| ClientShard {
                    id,
                    samples: shard.samples.clone(),
                })
                .collect();
            w.tests = vec![world.tests[0].clone(); n];
            w.groups = vec![0; n];
            w
        };
        let world3 = mk_world(3);
        let world1 = mk_world(1);
        let config = |n: usize| ExperimentConfig {
            rounds: 4,
            clients: n,
            selected_per_round: n,
            eval_every: 4,
            hidden_dim: 4,
            seed: 33,
            batch_size: 16,
            ..ExperimentConfig::default()
        };
        let mut fed3 = Federation::new(config(3), &world3).unwrap();
        for k in 0..3 {
            fed3.reseed_client(k, Rng::new(1234));
        }
        let mut fed1 = Federation::new(config(1), &world1).unwrap();
        fed1.reseed_client(0, Rng::new(1234));
        for t in 0..4 {
            fed3.run_round(t).unwrap();
            fed1.run_round(t).unwrap();
        }
        for (a, b) in fed3
            .global_backbone()
            .as_slice()
            .iter()
            .zip(fed1.global_backbone().as_slice())
        {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let world = test_world(17);
        let mut config = test_config();
        config.selected_per_round = 9;
        assert!(run_experiment(&config, &world, None).is_err());
        let mut config = test_config();
        config.clients = 99;
        assert!(run_experiment(&config, &world, None).is_err());
        let mut config = test_config();
        config.rounds = 0;
        assert!(run_experiment(&config, &world, None).is_err());
    }
}
