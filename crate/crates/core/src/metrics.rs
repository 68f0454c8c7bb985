//! Retrieval evaluation (CMC rank-k, mAP) over embedding similarity, plus
//! communication-cost accounting and the run report types.

use serde::{Deserialize, Serialize};

use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::model::Backbone;

/// Cosine similarity with zero-norm inputs mapped to a neutral 0.
fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

/// Ranked admissible gallery for one query, most similar first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedQuery {
    /// Index of the query in the evaluated query list.
    pub query_index: usize,
    /// Admissible gallery indices ordered by descending similarity; ties
    /// break by ascending gallery index.
    pub order: Vec<usize>,
    /// Same-identity flags aligned with `order`.
    pub matches: Vec<bool>,
}

/// Rankings for all evaluable queries.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub per_query: Vec<RankedQuery>,
    /// Queries dropped because no admissible same-identity entry exists.
    pub excluded_queries: usize,
}

/// Ranks every query against the gallery in embedding space.
///
/// Gallery entries sharing both identity and camera with the query are
/// excluded (standard junk filtering); queries left without any admissible
/// match are dropped with a logged count.
pub fn rank_embeddings(
    query_embeddings: &[Vec<f64>],
    query_meta: &[(usize, usize)],
    gallery_embeddings: &[Vec<f64>],
    gallery_meta: &[(usize, usize)],
) -> RankingResult {
    debug_assert_eq!(query_embeddings.len(), query_meta.len());
    debug_assert_eq!(gallery_embeddings.len(), gallery_meta.len());
    let mut per_query = Vec::with_capacity(query_embeddings.len());
    let mut excluded = 0usize;
    for (qi, (q_emb, &(q_id, q_cam))) in query_embeddings.iter().zip(query_meta).enumerate() {
        let admissible: Vec<usize> = (0..gallery_embeddings.len())
            .filter(|&g| !(gallery_meta[g].0 == q_id && gallery_meta[g].1 == q_cam))
            .collect();
        if !admissible.iter().any(|&g| gallery_meta[g].0 == q_id) {
            excluded += 1;
            continue;
        }
        let mut scored: Vec<(usize, f64)> = admissible
            .into_iter()
            .map(|g| (g, cosine_similarity(q_emb, &gallery_embeddings[g])))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let order: Vec<usize> = scored.iter().map(|(g, _)| *g).collect();
        let matches: Vec<bool> = order.iter().map(|&g| gallery_meta[g].0 == q_id).collect();
        per_query.push(RankedQuery {
            query_index: qi,
            order,
            matches,
        });
    }
    if excluded > 0 {
        log::warn!("{excluded} queries had no admissible gallery match and were excluded");
    }
    RankingResult {
        per_query,
        excluded_queries: excluded,
    }
}

/// Embeds queries and gallery with the backbone and ranks them.
pub fn rank(queries: &[Sample], gallery: &[Sample], backbone: &Backbone) -> Result<RankingResult> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let embed_all = |samples: &[Sample]| -> Result<(Vec<Vec<f64>>, Vec<(usize, usize)>)> {
        let mut embs = Vec::with_capacity(samples.len());
        let mut meta = Vec::with_capacity(samples.len());
        for s in samples {
            embs.push(backbone.embed(&s.features)?);
            meta.push((s.identity, s.camera));
        }
        Ok((embs, meta))
    };
    let (q_embs, q_meta) = embed_all(queries)?;
    let (g_embs, g_meta) = embed_all(gallery)?;
    Ok(rank_embeddings(&q_embs, &q_meta, &g_embs, &g_meta))
}

/// Fraction of queries whose top-k admissible entries contain a match, for
/// each requested k.
pub fn cmc_from_ranking(ranking: &RankingResult, ks: &[usize]) -> Vec<f64> {
    let total = ranking.per_query.len();
    ks.iter()
        .map(|&k| {
            if total == 0 {
                return 0.0;
            }
            let hits = ranking
                .per_query
                .iter()
                .filter(|q| q.matches.iter().take(k).any(|&m| m))
                .count();
            hits as f64 / total as f64
        })
        .collect()
}

/// Mean over queries of average precision: for each true match at rank r,
/// precision = matches-so-far / r, averaged over that query's matches.
pub fn map_from_ranking(ranking: &RankingResult) -> f64 {
    if ranking.per_query.is_empty() {
        return 0.0;
    }
    let mut total_ap = 0.0;
    for q in &ranking.per_query {
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (pos, &matched) in q.matches.iter().enumerate() {
            if matched {
                hits += 1;
                ap += hits as f64 / (pos + 1) as f64;
            }
        }
        total_ap += ap / hits.max(1) as f64;
    }
    total_ap / ranking.per_query.len() as f64
}

/// CMC accuracies at the requested ranks.
pub fn cmc(
    queries: &[Sample],
    gallery: &[Sample],
    backbone: &Backbone,
    ks: &[usize],
) -> Result<Vec<f64>> {
    Ok(cmc_from_ranking(&rank(queries, gallery, backbone)?, ks))
}

/// Mean average precision over all evaluable queries.
pub fn mean_average_precision(
    queries: &[Sample],
    gallery: &[Sample],
    backbone: &Backbone,
) -> Result<f64> {
    Ok(map_from_ranking(&rank(queries, gallery, backbone)?))
}

/// Total transmission bytes: `rounds * 2 * model_bytes` per participant
/// (upload plus download each round), times the participant count.
pub fn communication_cost(rounds: u64, model_bytes: u64, participants_per_round: u64) -> u64 {
    rounds * 2 * model_bytes * participants_per_round
}

/// Retrieval metrics of one model on one client's test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client: usize,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
}

impl ClientMetrics {
    pub fn evaluate(
        client: usize,
        queries: &[Sample],
        gallery: &[Sample],
        backbone: &Backbone,
    ) -> Result<Self> {
        let ranking = rank(queries, gallery, backbone)?;
        let cmc = cmc_from_ranking(&ranking, &[1, 5, 10]);
        Ok(Self {
            client,
            rank1: cmc[0],
            rank5: cmc[1],
            rank10: cmc[2],
            map: map_from_ranking(&ranking),
        })
    }

    fn mean_of(client: usize, points: &[&ClientMetrics]) -> Self {
        let n = points.len().max(1) as f64;
        Self {
            client,
            rank1: points.iter().map(|m| m.rank1).sum::<f64>() / n,
            rank5: points.iter().map(|m| m.rank5).sum::<f64>() / n,
            rank10: points.iter().map(|m| m.rank10).sum::<f64>() / n,
            map: points.iter().map(|m| m.map).sum::<f64>() / n,
        }
    }
}

/// Aggregation weight actually used for one client in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub client: usize,
    pub weight: f64,
}

/// One evaluation point of a run: metrics, the weights and clusters used in
/// the round it follows, and cumulative communication cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub round: usize,
    pub strategy: String,
    /// Global (or per-cluster) model on each client's test split.
    pub global: Vec<ClientMetrics>,
    /// Each client's post-training local model on its own test split.
    pub local: Vec<ClientMetrics>,
    pub weights: Vec<WeightEntry>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clusters: Option<Vec<Vec<usize>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kd_mse_pre: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kd_mse_post: Option<f64>,
    pub comm_bytes_per_client: u64,
    pub comm_bytes_fleet: u64,
}

impl EvalRecord {
    pub fn mean_global_rank1(&self) -> f64 {
        if self.global.is_empty() {
            return 0.0;
        }
        self.global.iter().map(|m| m.rank1).sum::<f64>() / self.global.len() as f64
    }

    pub fn mean_local_rank1(&self) -> f64 {
        if self.local.is_empty() {
            return 0.0;
        }
        self.local.iter().map(|m| m.rank1).sum::<f64>() / self.local.len() as f64
    }
}

/// Full outcome of a run: the trace plus final accuracies averaged over the
/// three best evaluation points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub strategy: String,
    pub rounds: usize,
    pub seed: u64,
    /// Train volume per client, descending order of the client list.
    pub volumes: Vec<usize>,
    /// Rounds of the evaluation points averaged into the final metrics.
    pub best_rounds: Vec<usize>,
    pub final_global: Vec<ClientMetrics>,
    pub final_local: Vec<ClientMetrics>,
    pub comm_bytes_per_client: u64,
    pub comm_bytes_fleet: u64,
    /// Server aggregations performed (zero for standalone training).
    pub aggregations: usize,
    pub trace: Vec<EvalRecord>,
}

impl MetricsReport {
    /// Averages the three best evaluation points. The shared global model is
    /// one artifact, so its checkpoints are ranked by mean rank-1 across
    /// clients; local models are per-client artifacts, so each client's
    /// final local metrics average its own three best points.
    pub fn finalize(
        strategy: String,
        rounds: usize,
        seed: u64,
        volumes: Vec<usize>,
        aggregations: usize,
        trace: Vec<EvalRecord>,
    ) -> Self {
        let best = best_three(&trace, |r, _| r.mean_global_rank1());
        let final_global = average_points(&trace, &best, |r| &r.global);
        let clients = trace.first().map_or(0, |r| r.local.len());
        let final_local: Vec<ClientMetrics> = (0..clients)
            .map(|c| {
                let own_best = best_three(&trace, |r, _| r.local[c].rank1);
                average_points(&trace, &own_best, |r| &r.local)
                    .into_iter()
                    .nth(c)
                    .expect("client index in range")
            })
            .collect();
        Self::assemble(
            strategy,
            rounds,
            seed,
            volumes,
            aggregations,
            trace,
            best,
            final_global,
            final_local,
        )
    }

    /// Per-client best-three averaging for standalone training: every client
    /// is an independent run, so each one's final metrics come from its own
    /// three best checkpoints (ranked by its own rank-1).
    pub fn finalize_standalone(
        rounds: usize,
        seed: u64,
        volumes: Vec<usize>,
        trace: Vec<EvalRecord>,
    ) -> Self {
        let clients = trace.first().map_or(0, |r| r.local.len());
        let final_local: Vec<ClientMetrics> = (0..clients)
            .map(|c| {
                let best = best_three(&trace, |r, _| r.local[c].rank1);
                average_points(&trace, &best, |r| &r.local)
                    .into_iter()
                    .nth(c)
                    .expect("client index in range")
            })
            .collect();
        let best = best_three(&trace, |r, _| r.mean_local_rank1());
        Self::assemble(
            "standalone".to_string(),
            rounds,
            seed,
            volumes,
            0,
            trace,
            best,
            Vec::new(),
            final_local,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        strategy: String,
        rounds: usize,
        seed: u64,
        volumes: Vec<usize>,
        aggregations: usize,
        trace: Vec<EvalRecord>,
        best: Vec<usize>,
        final_global: Vec<ClientMetrics>,
        final_local: Vec<ClientMetrics>,
    ) -> Self {
        let best_rounds: Vec<usize> = best.iter().map(|&i| trace[i].round).collect();
        let (comm_pc, comm_fleet) = trace
            .last()
            .map(|r| (r.comm_bytes_per_client, r.comm_bytes_fleet))
            .unwrap_or((0, 0));
        Self {
            strategy,
            rounds,
            seed,
            volumes,
            best_rounds,
            final_global,
            final_local,
            comm_bytes_per_client: comm_pc,
            comm_bytes_fleet: comm_fleet,
            aggregations,
            trace,
        }
    }

    pub fn mean_final_global_rank1(&self) -> f64 {
        if self.final_global.is_empty() {
            return 0.0;
        }
        self.final_global.iter().map(|m| m.rank1).sum::<f64>() / self.final_global.len() as f64
    }

    pub fn mean_final_local_rank1(&self) -> f64 {
        if self.final_local.is_empty() {
            return 0.0;
        }
        self.final_local.iter().map(|m| m.rank1).sum::<f64>() / self.final_local.len() as f64
    }
}

/// Indices of the three best evaluation points by `key`, ascending by round.
fn best_three(trace: &[EvalRecord], key: impl Fn(&EvalRecord, usize) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..trace.len()).collect();
    order.sort_by(|&a, &b| {
        key(&trace[b], b)
            .partial_cmp(&key(&trace[a], a))
            .unwrap()
            .then(trace[a].round.cmp(&trace[b].round))
    });
    let mut best: Vec<usize> = order.into_iter().take(3).collect();
    best.sort_by_key(|&i| trace[i].round);
    best
}

/// Per-client mean of the selected evaluation points.
fn average_points(
    trace: &[EvalRecord],
    points: &[usize],
    select: impl Fn(&EvalRecord) -> &Vec<ClientMetrics>,
) -> Vec<ClientMetrics> {
    if points.is_empty() || select(&trace[points[0]]).is_empty() {
        return Vec::new();
    }
    let clients = select(&trace[points[0]]).len();
    (0..clients)
        .map(|c| {
            let selected: Vec<&ClientMetrics> =
                points.iter().map(|&i| &select(&trace[i])[c]).collect();
            ClientMetrics::mean_of(selected[0].client, &selected)
        })
        .collect()
}
