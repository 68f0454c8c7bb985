//! Synthetic multi-camera identity worlds with controllable heterogeneity:
//! per-camera domain shifts (non-IID) and per-client volume skew (unbalanced),
//! plus the partitioners for the by-camera / by-identity scenarios and the
//! shared public dataset used by the aggregation optimizations.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Rng;

/// One observation: a feature vector tagged with identity, camera, and the
/// client shard it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub identity: usize,
    pub camera: usize,
    pub client: usize,
}

/// Knobs for [`generate_world`].
///
/// Identity centroids live in the first `identity_dims` feature dimensions;
/// cameras add full-space affine distortion scaled by `domain_shift`, so a
/// backbone must learn to favor identity structure over camera signature for
/// cross-camera retrieval to work. `volume_ratios` fix relative client sizes
/// (unbalancedness); with `group_count = 2` the clients split into two
/// super-groups whose camera transforms come from distinct families, so
/// client clustering has a recoverable structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub clients: usize,
    pub identities_per_client: usize,
    pub test_identities_per_client: usize,
    pub cameras_per_client: usize,
    /// Per-client camera counts (empty = `cameras_per_client` everywhere).
    pub client_cameras: Vec<usize>,
    /// Relative train volumes per client; empty means equal.
    pub volume_ratios: Vec<f64>,
    pub total_train_samples: usize,
    pub input_dim: usize,
    /// Leading dimensions carrying identity information.
    pub identity_dims: usize,
    /// Geometric decay of identity variance across the identity dimensions;
    /// clients can only estimate this prior from their own identities, so
    /// pooling data sharpens it.
    pub identity_spectrum_decay: f64,
    /// Strength of the identity-dependent camera corruption that lands in
    /// the camera subspace (suppressible by any model that learns to project
    /// onto the identity dimensions).
    pub camera_mix: f64,
    /// Fraction of camera corruption leaking into the identity subspace
    /// itself; only models specialized to those cameras can undo it.
    pub camera_leak: f64,
    pub domain_shift: f64,
    /// Per-client multipliers on `domain_shift` (empty = all ones), so
    /// domain severity can vary across clients.
    pub client_shift_scale: Vec<f64>,
    /// Per-client multipliers on `camera_leak` (empty = all ones).
    pub client_leak_scale: Vec<f64>,
    /// Per-client multipliers on `noise_scale` (empty = all ones), applied
    /// to both train and test samples.
    pub client_noise_scale: Vec<f64>,
    /// Per-client multipliers applied to train samples only (empty = all
    /// ones): archives may be far noisier than curated test sets.
    pub client_train_noise_scale: Vec<f64>,
    pub noise_scale: f64,
    /// 1 = homogeneous transform family, 2 = two super-groups.
    pub group_count: usize,
    /// Scale of the per-group camera bias family (group worlds only).
    pub group_separation: f64,
    /// Spread of per-camera transforms around their group family. The
    /// spread grades from zero for the first client of a group (the group's
    /// anchor domain) up to the full value for its last client.
    pub within_group_jitter: f64,
    /// Fraction of each client's train identities drawn from a pool shared
    /// by its super-group (group worlds only): sibling venues see some of
    /// the same people.
    pub group_shared_identity_fraction: f64,
    pub shared_size: usize,
    pub shared_batch_size: usize,
    /// Draw the shared dataset from held-out transforms instead of reusing
    /// client cameras.
    pub shared_from_heldout: bool,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            clients: 9,
            identities_per_client: 12,
            test_identities_per_client: 16,
            cameras_per_client: 2,
            client_cameras: Vec::new(),
            volume_ratios: Vec::new(),
            total_train_samples: 600,
            input_dim: 16,
            identity_dims: 8,
            identity_spectrum_decay: 0.8,
            camera_mix: 1.0,
            camera_leak: 0.35,
            domain_shift: 1.0,
            client_shift_scale: Vec::new(),
            client_leak_scale: Vec::new(),
            client_noise_scale: Vec::new(),
            client_train_noise_scale: Vec::new(),
            noise_scale: 0.2,
            group_count: 1,
            group_separation: 2.0,
            within_group_jitter: 0.2,
            group_shared_identity_fraction: 0.0,
            shared_size: 64,
            shared_batch_size: 32,
            shared_from_heldout: true,
            seed: 0,
        }
    }
}

/// Per-client train/test split of the cross-camera retrieval protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSplit {
    pub query: Vec<Sample>,
    pub gallery: Vec<Sample>,
    /// Identities seen under a single camera, excluded from queries.
    pub skipped_single_camera: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub id: usize,
    pub samples: Vec<Sample>,
}

impl ClientShard {
    pub fn volume(&self) -> usize {
        self.samples.len()
    }
}

/// The full simulated federation: client shards, per-client retrieval test
/// splits, the shared public dataset with its fixed probe batch, and the
/// planted super-group labels.
///
/// Shared-dataset identity labels exist for bookkeeping only and are never
/// used for supervised training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedWorld {
    pub input_dim: usize,
    pub seed: u64,
    pub clients: Vec<ClientShard>,
    pub tests: Vec<TestSplit>,
    pub shared: Vec<Sample>,
    /// Indices into `shared`; identical across rounds and clients.
    pub shared_batch: Vec<usize>,
    /// Planted super-group id per client (all zero without grouping).
    pub groups: Vec<usize>,
}

impl FederatedWorld {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// Feature rows of the fixed shared probe batch.
    pub fn shared_batch_inputs(&self) -> Vec<Vec<f64>> {
        self.shared_batch
            .iter()
            .map(|&i| self.shared[i].features.clone())
            .collect()
    }

    /// Feature rows of the whole shared dataset.
    pub fn shared_inputs(&self) -> Vec<Vec<f64>> {
        self.shared.iter().map(|s| s.features.clone()).collect()
    }
}

/// Affine domain distortion attached to one camera:
/// `x + shift * (M x + b)` with a low-rank identity-dependent mixing matrix
/// and a full-space bias. Low rank keeps the corruption nullable by a model
/// specialized to a few cameras, while no model can null every client's
/// cameras at once.
#[derive(Debug, Clone)]
struct CameraDomain {
    matrix: Vec<f64>, // d x d row-major
    bias: Vec<f64>,
    shift: f64,
}

/// Rank of each camera's mixing into the camera subspace.
const CAMERA_MIX_RANK: usize = 3;
/// Rank of each camera's leak back into the identity subspace.
const CAMERA_LEAK_RANK: usize = 3;
/// Leading identity dimensions never touched by leak, so the strongest
/// identity signal survives every domain.
const LEAK_PROTECTED_DIMS: usize = 0;

impl CameraDomain {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let mut out = Vec::with_capacity(d);
        for i in 0..d {
            let row = &self.matrix[i * d..(i + 1) * d];
            let mx: f64 = row.iter().zip(x).map(|(m, xv)| m * xv).sum();
            out.push(x[i] + self.shift * (mx + self.bias[i]));
        }
        out
    }
}

fn gaussian_vec(rng: &mut Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.next_gaussian() * scale).collect()
}

/// Unit direction supported on `dims`, embedded in d dimensions.
fn unit_direction(rng: &mut Rng, d: usize, dims: std::ops::Range<usize>) -> Vec<f64> {
    let mut v = vec![0.0; d];
    let mut norm = 0.0;
    for i in dims {
        v[i] = rng.next_gaussian();
        norm += v[i] * v[i];
    }
    let norm = norm.sqrt().max(1e-12);
    for item in v.iter_mut() {
        *item /= norm;
    }
    v
}

/// Low-rank camera mixing `sum_t u_t v_t^T`. Every `v_t` reads identity
/// content; `mix`-scaled terms write into the camera subspace (common
/// nuisance structure) while `mix * leak`-scaled terms write back into the
/// identity subspace (camera-specific damage). Leak never touches the
/// leading protected dimensions.
fn mixing_matrix(rng: &mut Rng, d: usize, identity_dims: usize, mix: f64, leak: f64) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    let mut add_term =
        |rng: &mut Rng, out_dims: std::ops::Range<usize>, in_dims: std::ops::Range<usize>, scale: f64| {
            let u = unit_direction(rng, d, out_dims);
            let v = unit_direction(rng, d, in_dims);
            for i in 0..d {
                for j in 0..d {
                    m[i * d + j] += scale * u[i] * v[j];
                }
            }
        };
    for _ in 0..CAMERA_MIX_RANK {
        add_term(rng, identity_dims..d, 0..identity_dims, mix);
    }
    let leak_lo = LEAK_PROTECTED_DIMS.min(identity_dims.saturating_sub(1));
    for _ in 0..CAMERA_LEAK_RANK {
        add_term(rng, leak_lo..identity_dims, leak_lo..identity_dims, mix * leak);
    }
    m
}

/// Camera bias: a constant offset in the camera subspace.
fn camera_bias(rng: &mut Rng, d: usize, identity_dims: usize, scale: f64) -> Vec<f64> {
    let mut b = vec![0.0; d];
    for item in b.iter_mut().take(d).skip(identity_dims) {
        *item = rng.next_gaussian() * scale;
    }
    b
}

/// Identity centroid: gaussian in the leading identity dimensions with a
/// geometrically decaying scale, zero in the camera-dominated remainder.
fn centroid_vec(rng: &mut Rng, dim: usize, identity_dims: usize, decay: f64) -> Vec<f64> {
    let mut scale = 1.0;
    (0..dim)
        .map(|i| {
            if i < identity_dims {
                let v = rng.next_gaussian() * scale;
                scale *= decay;
                v
            } else {
                // Advance the stream anyway so draws stay aligned across
                // configs with the same seed.
                let _ = rng.next_gaussian();
                0.0
            }
        })
        .collect()
}

/// Largest-remainder apportionment of `total` into `ratios`-proportional
/// integer volumes; every client gets at least one sample.
fn realize_volumes(ratios: &[f64], total: usize) -> Result<Vec<usize>> {
    if ratios.iter().any(|r| *r < 0.0 || !r.is_finite()) {
        return Err(Error::Config("volume ratios must be non-negative".into()));
    }
    let sum: f64 = ratios.iter().sum();
    if sum <= 0.0 {
        return Err(Error::Config("volume ratios sum to zero".into()));
    }
    let exact: Vec<f64> = ratios.iter().map(|r| total as f64 * r / sum).collect();
    let mut volumes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = volumes.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        volumes[i] += 1;
    }
    // No empty clients: borrow from the largest.
    for i in 0..volumes.len() {
        if volumes[i] == 0 {
            let largest = (0..volumes.len())
                .max_by_key(|&j| volumes[j])
                .expect("non-empty");
            if volumes[largest] > 1 {
                volumes[largest] -= 1;
                volumes[i] = 1;
            }
        }
    }
    Ok(volumes)
}

/// Generates a deterministic federation from the config seed.
///
/// Each identity has a latent centroid; each camera applies an affine domain
/// distortion; a sample is the distorted centroid plus gaussian noise.
pub fn generate_world(config: &WorldConfig) -> Result<FederatedWorld> {
    if config.clients < 2 {
        return Err(Error::Config("need at least 2 clients".into()));
    }
    if config.identities_per_client < 2 {
        return Err(Error::Config("need at least 2 identities per client".into()));
    }
    if config.cameras_per_client < 2 {
        return Err(Error::Config("need at least 2 cameras per client".into()));
    }
    if !config.client_cameras.is_empty() {
        if config.client_cameras.len() != config.clients {
            return Err(Error::Config(format!(
                "client_cameras has {} entries for {} clients",
                config.client_cameras.len(),
                config.clients
            )));
        }
        if config.client_cameras.iter().any(|&c| c < 2) {
            return Err(Error::Config("every client needs at least 2 cameras".into()));
        }
    }
    if config.test_identities_per_client < 2 {
        return Err(Error::Config("need at least 2 test identities per client".into()));
    }
    if !config.volume_ratios.is_empty() && config.volume_ratios.len() != config.clients {
        return Err(Error::Config(format!(
            "volume_ratios has {} entries for {} clients",
            config.volume_ratios.len(),
            config.clients
        )));
    }
    if !config.client_shift_scale.is_empty() && config.client_shift_scale.len() != config.clients {
        return Err(Error::Config(format!(
            "client_shift_scale has {} entries for {} clients",
            config.client_shift_scale.len(),
            config.clients
        )));
    }
    if !config.client_leak_scale.is_empty() && config.client_leak_scale.len() != config.clients {
        return Err(Error::Config(format!(
            "client_leak_scale has {} entries for {} clients",
            config.client_leak_scale.len(),
            config.clients
        )));
    }
    if !config.client_noise_scale.is_empty() && config.client_noise_scale.len() != config.clients
    {
        return Err(Error::Config(format!(
            "client_noise_scale has {} entries for {} clients",
            config.client_noise_scale.len(),
            config.clients
        )));
    }
    if !config.client_train_noise_scale.is_empty()
        && config.client_train_noise_scale.len() != config.clients
    {
        return Err(Error::Config(format!(
            "client_train_noise_scale has {} entries for {} clients",
            config.client_train_noise_scale.len(),
            config.clients
        )));
    }
    if !(1..=2).contains(&config.group_count) {
        return Err(Error::Config("group_count must be 1 or 2".into()));
    }
    if !(0.0..=1.0).contains(&config.group_shared_identity_fraction) {
        return Err(Error::Config(
            "group_shared_identity_fraction must be in [0, 1]".into(),
        ));
    }
    if config.shared_batch_size > config.shared_size {
        return Err(Error::Config(format!(
            "shared batch ({}) larger than shared dataset ({})",
            config.shared_batch_size, config.shared_size
        )));
    }
    if config.identity_dims < 1 || config.identity_dims > config.input_dim {
        return Err(Error::Config(format!(
            "identity_dims {} must be in [1, {}]",
            config.identity_dims, config.input_dim
        )));
    }
    if config.total_train_samples < config.clients {
        return Err(Error::Config(format!(
            "{} train samples cannot cover {} clients",
            config.total_train_samples, config.clients
        )));
    }

    let d = config.input_dim;
    let n = config.clients;
    let mut rng = Rng::derive(config.seed, 0x77_4f52_4c44); // world stream

    // Super-group transform families. With one group, cameras are fully
    // independent draws.
    let groups: Vec<usize> = (0..n)
        .map(|k| {
            if config.group_count == 2 && k >= n.div_ceil(2) {
                1
            } else {
                0
            }
        })
        .collect();
    let family: Vec<(Vec<f64>, Vec<f64>)> = (0..config.group_count)
        .map(|_| {
            (
                mixing_matrix(
                    &mut rng,
                    d,
                    config.identity_dims,
                    config.camera_mix,
                    config.camera_leak,
                ),
                camera_bias(&mut rng, d, config.identity_dims, config.group_separation),
            )
        })
        .collect();

    // Per-client cameras.
    let camera_count = |k: usize| -> usize {
        config
            .client_cameras
            .get(k)
            .copied()
            .unwrap_or(config.cameras_per_client)
    };
    let group_sizes: Vec<usize> = (0..config.group_count)
        .map(|g| groups.iter().filter(|&&x| x == g).count())
        .collect();
    let mut seen_in_group = vec![0usize; config.group_count];
    let mut domains: Vec<Vec<CameraDomain>> = Vec::with_capacity(n);
    for (k, &g) in groups.iter().enumerate() {
        let client_scale = config
            .client_shift_scale
            .get(k)
            .copied()
            .unwrap_or(1.0);
        let leak_scale = config.client_leak_scale.get(k).copied().unwrap_or(1.0);
        let idx_in_group = seen_in_group[g];
        seen_in_group[g] += 1;
        let mut cams = Vec::with_capacity(camera_count(k));
        for _ in 0..camera_count(k) {
            let jm = mixing_matrix(
                &mut rng,
                d,
                config.identity_dims,
                config.camera_mix,
                config.camera_leak * leak_scale,
            );
            let jb = camera_bias(&mut rng, d, config.identity_dims, 1.0);
            let (matrix, bias) = if config.group_count == 2 {
                let (base_m, base_b) = &family[g];
                let grade = idx_in_group as f64 / (group_sizes[g].saturating_sub(1)).max(1) as f64;
                let jitter = config.within_group_jitter * grade;
                (
                    base_m.iter().zip(&jm).map(|(a, b)| a + jitter * b).collect(),
                    base_b.iter().zip(&jb).map(|(a, b)| a + jitter * b).collect(),
                )
            } else {
                (jm, jb)
            };
            cams.push(CameraDomain {
                matrix,
                bias,
                shift: config.domain_shift * client_scale,
            });
        }
        domains.push(cams);
    }

    let ratios = if config.volume_ratios.is_empty() {
        vec![1.0; n]
    } else {
        config.volume_ratios.clone()
    };
    let volumes = realize_volumes(&ratios, config.total_train_samples)?;

    // Globally unique camera ids: per-client bases by prefix sum.
    let mut camera_base = Vec::with_capacity(n + 1);
    camera_base.push(0usize);
    for k in 0..n {
        camera_base.push(camera_base[k] + domains[k].len());
    }

    let mut next_identity = 0usize;

    // Group-shared identity pools: sibling clients see some common people.
    let shared_count = if config.group_count == 2 {
        ((config.identities_per_client as f64) * config.group_shared_identity_fraction).round()
            as usize
    } else {
        0
    };
    let group_pools: Vec<Vec<(usize, Vec<f64>)>> = (0..config.group_count)
        .map(|_| {
            (0..shared_count)
                .map(|_| {
                    let id = next_identity;
                    next_identity += 1;
                    let c = centroid_vec(
                        &mut rng,
                        d,
                        config.identity_dims,
                        config.identity_spectrum_decay,
                    );
                    (id, c)
                })
                .collect()
        })
        .collect();

    let mut clients = Vec::with_capacity(n);
    let mut tests = Vec::with_capacity(n);
    for (k, cams) in domains.iter().enumerate() {
        let pool = &group_pools[groups[k].min(group_pools.len().saturating_sub(1))];
        let mut train_ids: Vec<usize> = pool.iter().map(|(id, _)| *id).collect();
        let mut centroids: Vec<Vec<f64>> = pool.iter().map(|(_, c)| c.clone()).collect();
        for _ in shared_count..config.identities_per_client {
            train_ids.push(next_identity);
            next_identity += 1;
            centroids.push(centroid_vec(
                &mut rng,
                d,
                config.identity_dims,
                config.identity_spectrum_decay,
            ));
        }

        let noise = config.noise_scale * config.client_noise_scale.get(k).copied().unwrap_or(1.0);
        let train_noise = noise * config.client_train_noise_scale.get(k).copied().unwrap_or(1.0);

        // Round-robin over identities, then cameras, so small shards still
        // touch many identities.
        let mut samples = Vec::with_capacity(volumes[k]);
        for i in 0..volumes[k] {
            let id_idx = i % train_ids.len();
            let cam_idx = (i / train_ids.len()) % cams.len();
            let mut features = cams[cam_idx].apply(&centroids[id_idx]);
            for f in features.iter_mut() {
                *f += rng.next_gaussian() * train_noise;
            }
            samples.push(Sample {
                features,
                identity: train_ids[id_idx],
                camera: camera_base[k] + cam_idx,
                client: k,
            });
        }

        // Disjoint test identities, one sample per identity per camera.
        let mut test_samples = Vec::new();
        for _ in 0..config.test_identities_per_client {
            let id = next_identity;
            next_identity += 1;
            let centroid = centroid_vec(&mut rng, d, config.identity_dims, config.identity_spectrum_decay);
            for (cam_idx, cam) in cams.iter().enumerate() {
                let mut features = cam.apply(&centroid);
                for f in features.iter_mut() {
                    *f += rng.next_gaussian() * noise;
                }
                test_samples.push(Sample {
                    features,
                    identity: id,
                    camera: camera_base[k] + cam_idx,
                    client: k,
                });
            }
        }
        tests.push(make_query_gallery(&test_samples)?);
        clients.push(ClientShard { id: k, samples });
    }

    // Shared public dataset: held-out transforms by default.
    let shared_cam_base = camera_base[n];
    let shared_domains: Vec<CameraDomain> = if config.shared_from_heldout {
        (0..2)
            .map(|_| CameraDomain {
                matrix: mixing_matrix(
                    &mut rng,
                    d,
                    config.identity_dims,
                    config.camera_mix,
                    config.camera_leak,
                ),
                bias: camera_bias(&mut rng, d, config.identity_dims, 1.0),
                shift: config.domain_shift,
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut shared = Vec::with_capacity(config.shared_size);
    for i in 0..config.shared_size {
        let id = next_identity;
        next_identity += 1;
        let centroid = centroid_vec(&mut rng, d, config.identity_dims, config.identity_spectrum_decay);
        let (camera, domain) = if config.shared_from_heldout {
            let c = i % shared_domains.len();
            (shared_cam_base + c, &shared_domains[c])
        } else {
            let k = i % n;
            let c = (i / n) % domains[k].len();
            (camera_base[k] + c, &domains[k][c])
        };
        let mut features = domain.apply(&centroid);
        for f in features.iter_mut() {
            *f += rng.next_gaussian() * config.noise_scale;
        }
        shared.push(Sample {
            features,
            identity: id,
            camera,
            client: usize::MAX, // not owned by any client
        });
    }
    let mut order: Vec<usize> = (0..shared.len()).collect();
    rng.shuffle(&mut order);
    let shared_batch: Vec<usize> = order.into_iter().take(config.shared_batch_size).collect();

    Ok(FederatedWorld {
        input_dim: d,
        seed: config.seed,
        clients,
        tests,
        shared,
        shared_batch,
        groups,
    })
}

/// One shard per camera id; shard `k` holds exactly the samples of the k-th
/// camera (ascending id). Shard index becomes the client id.
pub fn partition_by_camera(dataset: &[Sample]) -> Result<Vec<Vec<Sample>>> {
    let mut by_camera: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();
    for sample in dataset {
        by_camera
            .entry(sample.camera)
            .or_default()
            .push(sample.clone());
    }
    if by_camera.len() < 2 {
        return Err(Error::Partition(format!(
            "by-camera split needs at least 2 cameras, found {}",
            by_camera.len()
        )));
    }
    Ok(by_camera
        .into_values()
        .enumerate()
        .map(|(k, mut shard)| {
            for s in shard.iter_mut() {
                s.client = k;
            }
            shard
        })
        .collect())
}

/// Splits identities into `num_clients` near-equal disjoint groups; each
/// shard holds all samples of its identities across every camera.
pub fn partition_by_identity(dataset: &[Sample], num_clients: usize) -> Result<Vec<Vec<Sample>>> {
    let mut identities: Vec<usize> = dataset.iter().map(|s| s.identity).collect();
    identities.sort_unstable();
    identities.dedup();
    if num_clients == 0 || identities.len() < num_clients {
        return Err(Error::Partition(format!(
            "cannot split {} identities into {} clients",
            identities.len(),
            num_clients
        )));
    }
    let base = identities.len() / num_clients;
    let extra = identities.len() % num_clients;
    // First (num_clients - extra) shards take `base` identities, the rest
    // take one more, so shard sizes differ by at most one.
    let mut owner = BTreeMap::new();
    let mut cursor = 0;
    for shard_idx in 0..num_clients {
        let take = if shard_idx < num_clients - extra {
            base
        } else {
            base + 1
        };
        for _ in 0..take {
            owner.insert(identities[cursor], shard_idx);
            cursor += 1;
        }
    }
    let mut shards = vec![Vec::new(); num_clients];
    for sample in dataset {
        let shard_idx = owner[&sample.identity];
        let mut s = sample.clone();
        s.client = shard_idx;
        shards[shard_idx].push(s);
    }
    Ok(shards)
}

/// Cross-camera retrieval split: per identity, the samples of its lowest
/// camera id become queries and the rest become gallery. Identities visible
/// under a single camera go to the gallery only.
pub fn make_query_gallery(test_samples: &[Sample]) -> Result<TestSplit> {
    let mut cameras: Vec<usize> = test_samples.iter().map(|s| s.camera).collect();
    cameras.sort_unstable();
    cameras.dedup();
    if cameras.len() < 2 {
        return Err(Error::Partition(
            "query/gallery split needs at least 2 cameras".into(),
        ));
    }
    let mut by_identity: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
    for s in test_samples {
        by_identity.entry(s.identity).or_default().push(s);
    }
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    let mut skipped = 0usize;
    for (_, samples) in by_identity {
        let mut cams: Vec<usize> = samples.iter().map(|s| s.camera).collect();
        cams.sort_unstable();
        cams.dedup();
        if cams.len() < 2 {
            skipped += 1;
            gallery.extend(samples.into_iter().cloned());
            continue;
        }
        let query_cam = cams[0];
        for s in samples {
            if s.camera == query_cam {
                query.push(s.clone());
            } else {
                gallery.push(s.clone());
            }
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} identities visible under one camera excluded from queries");
    }
    Ok(TestSplit {
        query,
        gallery,
        skipped_single_camera: skipped,
    })
}

/// A single multi-camera dataset (no client split yet) for the partitioning
/// scenarios: one pooled train set and one common retrieval test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledConfig {
    pub identities: usize,
    pub test_identities: usize,
    pub cameras: usize,
    pub samples_per_identity_camera: usize,
    pub input_dim: usize,
    pub identity_dims: usize,
    pub identity_spectrum_decay: f64,
    pub camera_mix: f64,
    pub camera_leak: f64,
    pub domain_shift: f64,
    pub noise_scale: f64,
    pub shared_size: usize,
    pub shared_batch_size: usize,
    pub seed: u64,
}

impl Default for PooledConfig {
    fn default() -> Self {
        Self {
            identities: 24,
            test_identities: 24,
            cameras: 6,
            samples_per_identity_camera: 2,
            input_dim: 16,
            identity_dims: 8,
            identity_spectrum_decay: 0.8,
            camera_mix: 1.0,
            camera_leak: 0.35,
            domain_shift: 1.0,
            noise_scale: 0.2,
            shared_size: 64,
            shared_batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledDataset {
    pub input_dim: usize,
    pub seed: u64,
    pub train: Vec<Sample>,
    pub test: TestSplit,
    pub shared: Vec<Sample>,
    pub shared_batch: Vec<usize>,
}

/// Generates one pooled multi-camera dataset with per-camera domain shifts.
pub fn generate_pooled(config: &PooledConfig) -> Result<PooledDataset> {
    if config.cameras < 2 {
        return Err(Error::Config("pooled dataset needs at least 2 cameras".into()));
    }
    if config.identities < 2 || config.test_identities < 2 {
        return Err(Error::Config("pooled dataset needs at least 2 identities".into()));
    }
    if config.shared_batch_size > config.shared_size {
        return Err(Error::Config("shared batch larger than shared dataset".into()));
    }
    if config.identity_dims < 1 || config.identity_dims > config.input_dim {
        return Err(Error::Config("identity_dims must be in [1, input_dim]".into()));
    }
    let d = config.input_dim;
    let mut rng = Rng::derive(config.seed, 0x50_4f4f_4c45); // pooled stream
    let domains: Vec<CameraDomain> = (0..config.cameras)
        .map(|_| CameraDomain {
            matrix: mixing_matrix(
                &mut rng,
                d,
                config.identity_dims,
                config.camera_mix,
                config.camera_leak,
            ),
            bias: camera_bias(&mut rng, d, config.identity_dims, 1.0),
            shift: config.domain_shift,
        })
        .collect();

    let mut next_identity = 0usize;
    let mut train = Vec::new();
    for _ in 0..config.identities {
        let id = next_identity;
        next_identity += 1;
        let centroid = centroid_vec(&mut rng, d, config.identity_dims, config.identity_spectrum_decay);
        for (cam, domain) in domains.iter().enumerate() {
            for _ in 0..config.samples_per_identity_camera {
                let mut features = domain.apply(&centroid);
                for f in features.iter_mut() {
                    *f += rng.next_gaussian() * config.noise_scale;
                }
                train.push(Sample {
                    features,
                    identity: id,
                    camera: cam,
                    client: 0,
                });
            }
        }
    }

    let mut test_samples = Vec::new();
    for _ in 0..config.test_identities {
        let id = next_identity;
        next_identity += 1;
        let centroid = centroid_vec(&mut rng, d, config.identity_dims, config.identity_spectrum_decay);
        for (cam, domain) in domains.iter().enumerate() {
            let mut features = domain.apply(&centroid);
            for f in features.iter_mut() {
                *f += rng.next_gaussian() * config.noise_scale;
            }
            test_samples.push(Sample {
                features,
                identity: id,
                camera: cam,
                client: 0,
            });
        }
    }
    let test = make_query_gallery(&test_samples)?;

    let mut shared = Vec::with_capacity(config.shared_size);
    for i in 0..config.shared_size {
        let id = next_identity;
        next_identity += 1;
        let centroid = centroid_vec(&mut rng, d, config.identity_dims, config.identity_spectrum_decay);
        let cam = i % config.cameras;
        let mut features = domains[cam].apply(&centroid);
        for f in features.iter_mut() {
            *f += rng.next_gaussian() * config.noise_scale;
        }
        shared.push(Sample {
            features,
            identity: id,
            camera: cam,
            client: usize::MAX,
        });
    }
    let mut order: Vec<usize> = (0..shared.len()).collect();
    rng.shuffle(&mut order);
    let shared_batch: Vec<usize> = order.into_iter().take(config.shared_batch_size).collect();

    Ok(PooledDataset {
        input_dim: d,
        seed: config.seed,
        train,
        test,
        shared,
        shared_batch,
    })
}

/// Wraps pre-partitioned shards of a pooled dataset into a federation where
/// every client is evaluated against the common test split.
pub fn world_from_shards(pooled: &PooledDataset, shards: Vec<Vec<Sample>>) -> FederatedWorld {
    let n = shards.len();
    FederatedWorld {
        input_dim: pooled.input_dim,
        seed: pooled.seed,
        clients: shards
            .into_iter()
            .enumerate()
            .map(|(id, samples)| ClientShard { id, samples })
            .collect(),
        tests: vec![pooled.test.clone(); n],
        shared: pooled.shared.clone(),
        shared_batch: pooled.shared_batch.clone(),
        groups: vec![0; n],
    }
}

fn write_sample_line(out: &mut String, tag: &str, s: &Sample, with_client: bool) {
    if with_client {
        write!(out, "{tag} {} {} {} ", s.client, s.identity, s.camera).unwrap();
    } else {
        write!(out, "{tag} {} {} ", s.identity, s.camera).unwrap();
    }
    let mut first = true;
    for v in &s.features {
        if !first {
            out.push(',');
        }
        write!(out, "{v}").unwrap();
        first = false;
    }
    out.push('\n');
}

impl FederatedWorld {
    /// Line-delimited text export; parses back bit-identically.
    ///
    /// ```text
    /// fedpav-world v1
    /// input_dim <d>
    /// clients <n>
    /// seed <seed>
    /// groups <g0>,<g1>,...
    /// skipped <s0>,<s1>,...
    /// sharedbatch <i0>,<i1>,...
    /// train <client> <identity> <camera> <f0>,<f1>,...
    /// query <client> <identity> <camera> ...
    /// gallery <client> <identity> <camera> ...
    /// shared <identity> <camera> ...
    /// ```
    pub fn export_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "fedpav-world v1").unwrap();
        writeln!(out, "input_dim {}", self.input_dim).unwrap();
        writeln!(out, "clients {}", self.clients.len()).unwrap();
        writeln!(out, "seed {}", self.seed).unwrap();
        let join = |xs: &[usize]| {
            xs.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        writeln!(out, "groups {}", join(&self.groups)).unwrap();
        let skipped: Vec<usize> = self.tests.iter().map(|t| t.skipped_single_camera).collect();
        writeln!(out, "skipped {}", join(&skipped)).unwrap();
        writeln!(out, "sharedbatch {}", join(&self.shared_batch)).unwrap();
        for shard in &self.clients {
            for s in &shard.samples {
                write_sample_line(&mut out, "train", s, true);
            }
        }
        for test in &self.tests {
            for s in &test.query {
                write_sample_line(&mut out, "query", s, true);
            }
            for s in &test.gallery {
                write_sample_line(&mut out, "gallery", s, true);
            }
        }
        for s in &self.shared {
            write_sample_line(&mut out, "shared", s, false);
        }
        out
    }

    pub fn import_text(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "world export",
            detail,
        };
        let mut lines = text.lines();
        if lines.next() != Some("fedpav-world v1") {
            return Err(bad("missing header line".into()));
        }
        let mut header = |name: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| bad("truncated header".into()))?;
            line.strip_prefix(name)
                .and_then(|r| r.strip_prefix(' '))
                .map(|r| r.to_string())
                .ok_or_else(|| bad(format!("expected header field {name}")))
        };
        let input_dim: usize = header("input_dim")?
            .parse()
            .map_err(|_| bad("bad input_dim".into()))?;
        let n: usize = header("clients")?
            .parse()
            .map_err(|_| bad("bad clients".into()))?;
        let seed: u64 = header("seed")?
            .parse()
            .map_err(|_| bad("bad seed".into()))?;
        let parse_list = |s: String| -> Result<Vec<usize>> {
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(',')
                .map(|x| x.parse().map_err(|_| bad(format!("bad list entry {x}"))))
                .collect()
        };
        let groups = parse_list(header("groups")?)?;
        let skipped = parse_list(header("skipped")?)?;
        let shared_batch = parse_list(header("sharedbatch")?)?;
        if groups.len() != n || skipped.len() != n {
            return Err(bad("header list lengths do not match client count".into()));
        }

        let mut clients: Vec<ClientShard> = (0..n)
            .map(|id| ClientShard {
                id,
                samples: Vec::new(),
            })
            .collect();
        let mut tests: Vec<TestSplit> = skipped
            .iter()
            .map(|&s| TestSplit {
                query: Vec::new(),
                gallery: Vec::new(),
                skipped_single_camera: s,
            })
            .collect();
        let mut shared = Vec::new();

        for line in lines {
            let mut parts = line.split(' ');
            let tag = parts.next().ok_or_else(|| bad("empty line".into()))?;
            let with_client = tag != "shared";
            let client: usize = if with_client {
                parts
                    .next()
                    .ok_or_else(|| bad("missing client".into()))?
                    .parse()
                    .map_err(|_| bad("bad client id".into()))?
            } else {
                usize::MAX
            };
            let identity: usize = parts
                .next()
                .ok_or_else(|| bad("missing identity".into()))?
                .parse()
                .map_err(|_| bad("bad identity".into()))?;
            let camera: usize = parts
                .next()
                .ok_or_else(|| bad("missing camera".into()))?
                .parse()
                .map_err(|_| bad("bad camera".into()))?;
            let features: Vec<f64> = parts
                .next()
                .ok_or_else(|| bad("missing features".into()))?
                .split(',')
                .map(|x| x.parse().map_err(|_| bad(format!("bad feature {x}"))))
                .collect::<Result<_>>()?;
            if features.len() != input_dim {
                return Err(bad(format!(
                    "feature length {} != input_dim {input_dim}",
                    features.len()
                )));
            }
            if with_client && client >= n {
                return Err(bad(format!("client {client} out of range")));
            }
            let sample = Sample {
                features,
                identity,
                camera,
                client,
            };
            match tag {
                "train" => clients[client].samples.push(sample),
                "query" => tests[client].query.push(sample),
                "gallery" => tests[client].gallery.push(sample),
                "shared" => shared.push(sample),
                other => return Err(bad(format!("unknown record tag {other}"))),
            }
        }
        for &i in &shared_batch {
            if i >= shared.len() {
                return Err(bad(format!("shared batch index {i} out of range")));
            }
        }
        Ok(FederatedWorld {
            input_dim,
            seed,
            clients,
            tests,
            shared,
            shared_batch,
            groups,
        })
    }
}

/// Table-1-shaped train volume ratios (nine clients, sharply decreasing).
pub const NINE_CLIENT_VOLUME_RATIOS: [f64; 9] = [
    32621.0, 16522.0, 12936.0, 7365.0, 3744.0, 1940.0, 632.0, 450.0, 248.0,
];

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> WorldConfig {
        WorldConfig {
            clients: 4,
            identities_per_client: 3,
            test_identities_per_client: 4,
            cameras_per_client: 2,
            total_train_samples: 80,
            input_dim: 6,
            identity_dims: 3,
            shared_size: 16,
            shared_batch_size: 8,
            seed: 5,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn world_is_deterministic_per_seed() {
        let config = small_config();
        let a = generate_world(&config).unwrap();
        let b = generate_world(&config).unwrap();
        assert_eq!(a, b);
        let c = generate_world(&WorldConfig {
            seed: 6,
            ..config
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn volumes_follow_ratios() {
        let config = WorldConfig {
            volume_ratios: NINE_CLIENT_VOLUME_RATIOS.to_vec(),
            total_train_samples: 200,
            ..WorldConfig::default()
        };
        let world = generate_world(&config).unwrap();
        let volumes: Vec<usize> = world.clients.iter().map(|c| c.volume()).collect();
        assert_eq!(volumes.iter().sum::<usize>(), 200);
        // Largest client holds about 43% of the samples.
        let frac = volumes[0] as f64 / 200.0;
        assert!((0.41..=0.45).contains(&frac), "largest fraction {frac}");
        assert!(volumes.iter().all(|&v| v >= 1));
        // Exact ratios up to rounding: compare against real-valued shares.
        let sum: f64 = NINE_CLIENT_VOLUME_RATIOS.iter().sum();
        for (v, r) in volumes.iter().zip(NINE_CLIENT_VOLUME_RATIOS) {
            let exact = 200.0 * r / sum;
            assert!(
                (*v as f64 - exact).abs() <= 1.0,
                "volume {v} deviates from {exact}"
            );
        }
    }

    #[test]
    fn zero_noise_duplicates_are_identical() {
        let config = WorldConfig {
            noise_scale: 0.0,
            // Volumes wrap the identity/camera grid, producing repeats.
            total_train_samples: 200,
            clients: 2,
            identities_per_client: 2,
            cameras_per_client: 2,
            input_dim: 4,
            identity_dims: 2,
            shared_size: 8,
            shared_batch_size: 4,
            test_identities_per_client: 2,
            ..WorldConfig::default()
        };
        let world = generate_world(&config).unwrap();
        for shard in &world.clients {
            let mut seen: BTreeMap<(usize, usize), &Vec<f64>> = BTreeMap::new();
            for s in &shard.samples {
                if let Some(prev) = seen.get(&(s.identity, s.camera)) {
                    assert_eq!(*prev, &s.features);
                } else {
                    seen.insert((s.identity, s.camera), &s.features);
                }
            }
            assert!(shard.samples.len() > 8, "expected wrapped duplicates");
        }
    }

    #[test]
    fn infeasible_configs_rejected() {
        let mut config = small_config();
        config.identities_per_client = 1;
        assert!(matches!(generate_world(&config), Err(Error::Config(_))));
        let mut config = small_config();
        config.cameras_per_client = 1;
        assert!(generate_world(&config).is_err());
        let mut config = small_config();
        config.volume_ratios = vec![1.0; 3];
        assert!(generate_world(&config).is_err());
        let mut config = small_config();
        config.shared_batch_size = 99;
        assert!(generate_world(&config).is_err());
    }

    #[test]
    fn by_camera_partition_is_exact() {
        let pooled = generate_pooled(&PooledConfig {
            cameras: 6,
            ..PooledConfig::default()
        })
        .unwrap();
        let shards = partition_by_camera(&pooled.train).unwrap();
        assert_eq!(shards.len(), 6);
        let total: usize = shards.iter().map(|s| s.len()).sum();
        assert_eq!(total, pooled.train.len());
        for shard in &shards {
            let mut cams: Vec<usize> = shard.iter().map(|s| s.camera).collect();
            cams.sort_unstable();
            cams.dedup();
            assert_eq!(cams.len(), 1, "shard must be camera-homogeneous");
        }
        // Union equals the original multiset of (identity, camera) pairs.
        let mut original: Vec<(usize, usize)> = pooled
            .train
            .iter()
            .map(|s| (s.identity, s.camera))
            .collect();
        let mut collected: Vec<(usize, usize)> = shards
            .iter()
            .flatten()
            .map(|s| (s.identity, s.camera))
            .collect();
        original.sort_unstable();
        collected.sort_unstable();
        assert_eq!(original, collected);
    }

    #[test]
    fn by_camera_small_fixture() {
        let mk = |camera: usize, identity: usize| Sample {
            features: vec![0.0],
            identity,
            camera,
            client: 0,
        };
        let mut data = Vec::new();
        for i in 0..7 {
            data.push(mk(0, i));
        }
        for i in 0..3 {
            data.push(mk(1, i));
        }
        let shards = partition_by_camera(&data).unwrap();
        assert_eq!(shards[0].len(), 7);
        assert_eq!(shards[1].len(), 3);

        let single: Vec<Sample> = (0..4).map(|i| mk(0, i)).collect();
        assert!(partition_by_camera(&single).is_err());
    }

    #[test]
    fn by_identity_partition_sizes() {
        // 751 identities over 6 clients: five shards of 125, one of 126.
        let data: Vec<Sample> = (0..751)
            .flat_map(|id| {
                (0..2).map(move |cam| Sample {
                    features: vec![id as f64],
                    identity: id,
                    camera: cam,
                    client: 0,
                })
            })
            .collect();
        let shards = partition_by_identity(&data, 6).unwrap();
        let mut id_counts: Vec<usize> = shards
            .iter()
            .map(|s| {
                let mut ids: Vec<usize> = s.iter().map(|x| x.identity).collect();
                ids.sort_unstable();
                ids.dedup();
                ids.len()
            })
            .collect();
        id_counts.sort_unstable();
        assert_eq!(id_counts, vec![125, 125, 125, 125, 125, 126]);
        let total: usize = shards.iter().map(|s| s.len()).sum();
        assert_eq!(total, data.len());

        // No identity in two shards.
        let mut owner = BTreeMap::new();
        for (k, shard) in shards.iter().enumerate() {
            for s in shard {
                if let Some(prev) = owner.insert(s.identity, k) {
                    assert_eq!(prev, k, "identity {} split across shards", s.identity);
                }
            }
        }

        let tiny: Vec<Sample> = (0..4)
            .map(|id| Sample {
                features: vec![0.0],
                identity: id,
                camera: 0,
                client: 0,
            })
            .collect();
        let shards = partition_by_identity(&tiny, 2).unwrap();
        assert_eq!(shards[0].len(), 2);
        assert_eq!(shards[1].len(), 2);
        assert!(partition_by_identity(&tiny, 5).is_err());
    }

    #[test]
    fn query_gallery_protocol() {
        let mk = |identity: usize, camera: usize| Sample {
            features: vec![identity as f64, camera as f64],
            identity,
            camera,
            client: 0,
        };
        // 2 identities x 2 cameras x 1 sample.
        let samples = vec![mk(0, 0), mk(0, 1), mk(1, 0), mk(1, 1)];
        let split = make_query_gallery(&samples).unwrap();
        assert_eq!(split.query.len(), 2);
        assert_eq!(split.gallery.len(), 2);
        assert_eq!(split.skipped_single_camera, 0);
        for q in &split.query {
            let matches = split
                .gallery
                .iter()
                .filter(|g| g.identity == q.identity && g.camera != q.camera)
                .count();
            assert_eq!(matches, 1);
        }

        // Identity 2 appears only under camera 0: gallery only.
        let samples = vec![mk(0, 0), mk(0, 1), mk(2, 0)];
        let split = make_query_gallery(&samples).unwrap();
        assert_eq!(split.skipped_single_camera, 1);
        assert!(split.query.iter().all(|s| s.identity != 2));
        assert!(split.gallery.iter().any(|s| s.identity == 2));

        // 36 identities x 2 cameras: 36 queries, 36 gallery entries.
        let mut samples = Vec::new();
        for id in 0..36 {
            samples.push(mk(id, 0));
            samples.push(mk(id, 1));
        }
        let split = make_query_gallery(&samples).unwrap();
        assert_eq!(split.query.len(), 36);
        assert_eq!(split.gallery.len(), 36);
    }

    #[test]
    fn heterogeneity_knob_is_monotonic() {
        // Larger domain shift spreads per-client means further apart.
        let mean_pairwise = |shift: f64, seed: u64| -> f64 {
            let world = generate_world(&WorldConfig {
                domain_shift: shift,
                seed,
                ..small_config()
            })
            .unwrap();
            let means: Vec<Vec<f64>> = world
                .clients
                .iter()
                .map(|c| {
                    let mut m = vec![0.0; world.input_dim];
                    for s in &c.samples {
                        for (mi, f) in m.iter_mut().zip(&s.features) {
                            *mi += f;
                        }
                    }
                    let n = c.samples.len() as f64;
                    m.into_iter().map(|x| x / n).collect()
                })
                .collect();
            let mut total = 0.0;
            let mut count = 0;
            for i in 0..means.len() {
                for j in i + 1..means.len() {
                    let d2: f64 = means[i]
                        .iter()
                        .zip(&means[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    total += d2.sqrt();
                    count += 1;
                }
            }
            total / count as f64
        };
        let mut wins = 0;
        let trials = 40;
        for seed in 0..trials {
            if mean_pairwise(2.0, seed) > mean_pairwise(0.5, seed) {
                wins += 1;
            }
        }
        assert!(
            wins as f64 >= 0.95 * trials as f64,
            "monotonic in only {wins}/{trials} trials"
        );
    }

    #[test]
    fn shared_batch_is_stable_and_within_bounds() {
        let world = generate_world(&small_config()).unwrap();
        assert_eq!(world.shared_batch.len(), 8);
        let again = generate_world(&small_config()).unwrap();
        assert_eq!(world.shared_batch, again.shared_batch);
        assert!(world.shared_batch.iter().all(|&i| i < world.shared.len()));
    }

    #[test]
    fn export_import_roundtrip() {
        let world = generate_world(&small_config()).unwrap();
        let text = world.export_text();
        let back = FederatedWorld::import_text(&text).unwrap();
        assert_eq!(world, back);
        // Re-export is byte-identical.
        assert_eq!(text, back.export_text());
    }

    #[test]
    fn import_rejects_garbage() {
        assert!(FederatedWorld::import_text("nonsense").is_err());
        let world = generate_world(&small_config()).unwrap();
        let mut text = world.export_text();
        text.push_str("train 99 0 0 1,2,3,4,5,6\n");
        assert!(FederatedWorld::import_text(&text).is_err());
    }
}
