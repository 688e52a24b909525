//! Synthetic correlated task streams.
//!
//! Tasks are drawn around `clusters` seeded unit centroids: a task picks a
//! cluster with Zipf popularity and perturbs its centroid with isotropic
//! gaussian noise, so tasks of the same cluster are similar and likely to
//! share reusable results.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Zipf};
use serde::{Deserialize, Serialize};

use dedup_core::edge::{synthetic_centroids, DEFAULT_COST_MS};
use dedup_core::{Error, FeatureVector, Result, ServiceDef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub dim: usize,
    pub clusters: usize,
    /// Target mean cosine similarity between a task and its centroid.
    pub intra_similarity: f64,
    pub zipf_s: f64,
    pub tasks: usize,
    /// Each task goes to one of these, chosen uniformly.
    pub services: Vec<String>,
    pub threshold: f64,
    pub seed: u64,
    pub clients: usize,
    /// Make cluster centroids mutually orthogonal (needs `clusters <= dim`).
    pub orthogonal: bool,
    /// Trailing whitespace bytes added to each request body.
    pub payload_padding: usize,
    /// Clients hash their own payloads and send the signature along.
    pub user_assisted: bool,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self::standard(1)
    }
}

impl WorkloadConfig {
    /// 16-dimensional tasks around 50 clusters, intra-cluster similarity
    /// 0.95, Zipf 1.1, 10 000 tasks over 8 services, threshold 0.9.
    pub fn standard(seed: u64) -> Self {
        Self {
            dim: 16,
            clusters: 50,
            intra_similarity: 0.95,
            zipf_s: 1.1,
            tasks: 10_000,
            services: (0..8).map(|i| format!("svc-{i}")).collect(),
            threshold: 0.9,
            seed,
            clients: 100,
            orthogonal: false,
            payload_padding: 0,
            user_assisted: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::config("dimension must be at least 2"));
        }
        if self.clusters == 0 {
            return Err(Error::config("need at least one cluster"));
        }
        if !(self.intra_similarity > 0.0 && self.intra_similarity < 1.0) {
            return Err(Error::config(format!(
                "intra-cluster similarity {} must lie in (0, 1)",
                self.intra_similarity
            )));
        }
        if !(self.zipf_s >= 0.0 && self.zipf_s.is_finite()) {
            return Err(Error::config("zipf exponent must be a finite value >= 0"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("threshold must lie in [0, 1]"));
        }
        if self.services.is_empty() || self.clients == 0 {
            return Err(Error::config("need at least one service and one client"));
        }
        Ok(())
    }

    /// Per-coordinate noise scale giving roughly `intra_similarity` mean
    /// cosine to the centroid after normalisation.
    pub fn noise_sigma(&self) -> f64 {
        let rho = self.intra_similarity;
        ((1.0 / (rho * rho) - 1.0) / (self.dim as f64 - 1.0)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub index: usize,
    pub task_id: String,
    pub service: String,
    pub cluster: usize,
    pub payload: FeatureVector,
    pub client_id: String,
}

#[derive(Debug, Clone)]
pub struct Workload {
    pub config: WorkloadConfig,
    pub centroids: Vec<FeatureVector>,
    pub tasks: Vec<Task>,
    services: Arc<Vec<ServiceDef>>,
}

impl Workload {
    /// One classifier per service, all over the cluster centroids, so a
    /// task's from-scratch label is normally its cluster.
    pub fn services(&self) -> Arc<Vec<ServiceDef>> {
        self.services.clone()
    }

    pub fn service(&self, name: &str) -> Option<&ServiceDef> {
        self.services.iter().find(|s| s.name == name)
    }
}

pub fn generate_workload(cfg: &WorkloadConfig) -> Result<Workload> {
    cfg.validate()?;
    let centroids = synthetic_centroids(cfg.dim, cfg.clusters, cfg.seed, cfg.orthogonal)?;
    let services = cfg
        .services
        .iter()
        .map(|name| ServiceDef::new(name.clone(), centroids.clone(), DEFAULT_COST_MS))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x005e_ed0f_7a5c));
    let zipf = Zipf::new(cfg.clusters as f64, cfg.zipf_s)
        .map_err(|e| Error::config(format!("zipf: {e}")))?;
    let sigma = cfg.noise_sigma();
    let mut tasks = Vec::with_capacity(cfg.tasks);
    for index in 0..cfg.tasks {
        let cluster = (zipf.sample(&mut rng) as usize).clamp(1, cfg.clusters) - 1;
        let service = cfg.services[rng.random_range(0..cfg.services.len())].clone();
        let noisy: Vec<f64> = centroids[cluster]
            .as_slice()
            .iter()
            .map(|c| {
                let z: f64 = StandardNormal.sample(&mut rng);
                c + sigma * z
            })
            .collect();
        let payload = FeatureVector::new(noisy)?
            .normalized()
            .ok_or_else(|| Error::input("degenerate payload"))?;
        tasks.push(Task {
            index,
            task_id: format!("t{index}"),
            service,
            cluster,
            payload,
            client_id: format!("client-{}", index % cfg.clients),
        });
    }
    Ok(Workload {
        config: cfg.clone(),
        centroids,
        tasks,
        services: Arc::new(services),
    })
}
