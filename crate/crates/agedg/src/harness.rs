//! Training runs, model selection, and the multi-run protocols.
//!
//! A run equalizes the training budget over its active domains, steps the
//! configured update rule, scores candidate checkpoints on the pooled
//! validation sets of the active domains, and evaluates the winner on all
//! five test sets. Everything downstream of (config, data) is a pure
//! function of the seed; wall-clock time is the only field that varies
//! between repeats.

use std::collections::HashSet;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::algorithms::{
    algorithm_step, batch_from_samples, AlgorithmConfig, DomainBatchSet, StepDiagnostics,
};
use crate::backbone::{forward, init_reference_backbone, BackboneConfig, ModelState};
use crate::data::{
    equalize_training_budget, load_manifest, mix_seed, synthesize_dataset, AgeGroup, DomainSplit,
    Sample, SynthSpec, DOMAIN_COUNT,
};
use crate::error::{AgedgError, Result};
use crate::metrics::{composite_loss, LabelBatch, ShakeWeights};
use crate::report::{evaluate, EvalReport};

pub const HARNESS_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Seed salts keep the model init, the batch stream, and the per-step
/// draws on independent substreams of the run seed.
const MODEL_SEED_SALT: u64 = 0x0DE1;
const SAMPLER_SEED_SALT: u64 = 0x5A3B;
const STEP_SEED_SALT: u64 = 0x57E9;

/// Where a run's samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// CSV manifest plus sidecar vectors; splits are carved per domain
    /// from the listed fractions and the run seed.
    Manifest {
        path: String,
        #[serde(default = "default_fraction")]
        val_fraction: f64,
        #[serde(default = "default_fraction")]
        test_fraction: f64,
    },
    /// Generated data; `SynthSpec` carries its own split fractions.
    Synth(SynthSpec),
}

fn default_fraction() -> f64 {
    0.15
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synth(SynthSpec::default())
    }
}

impl DatasetSource {
    pub fn load(&self, seed: u64) -> Result<DomainSplit> {
        match self {
            DatasetSource::Synth(spec) => synthesize_dataset(spec, seed),
            DatasetSource::Manifest {
                path,
                val_fraction,
                test_fraction,
            } => load_manifest(std::path::Path::new(path))?
                .into_split(*val_fraction, *test_fraction, seed),
        }
    }
}

/// Backbone sizing. The input layout always comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![32],
            feature_dim: 16,
        }
    }
}

/// Everything a single run needs. `total_train_budget = 0` means "use the
/// whole pool" (for the multi-run protocols: the smallest pool among the
/// runs, so budgets stay equal).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: AlgorithmConfig,
    pub model: ModelConfig,
    pub active_training_domains: Vec<AgeGroup>,
    pub total_train_budget: usize,
    pub steps: usize,
    pub eval_every: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub source: DatasetSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: AlgorithmConfig::default(),
            model: ModelConfig::default(),
            active_training_domains: AgeGroup::ALL.to_vec(),
            total_train_budget: 0,
            steps: 2000,
            eval_every: 100,
            batch_size: 16,
            seed: 0,
            source: DatasetSource::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.active_training_domains.is_empty() {
            return Err(AgedgError::Config(
                "active_training_domains must name at least one age group".into(),
            ));
        }
        let mut seen = HashSet::new();
        for g in &self.active_training_domains {
            if !seen.insert(*g) {
                return Err(AgedgError::Config(format!(
                    "active_training_domains lists {g} twice"
                )));
            }
        }
        if self.eval_every < 1 {
            return Err(AgedgError::Config("eval_every must be at least 1".into()));
        }
        if self.steps < self.eval_every {
            return Err(AgedgError::Config(format!(
                "steps ({}) must be at least eval_every ({})",
                self.steps, self.eval_every
            )));
        }
        if self.batch_size < 2 {
            return Err(AgedgError::Config(
                "batch_size must be at least 2, the correlation losses need spread".into(),
            ));
        }
        if self.model.feature_dim == 0 {
            return Err(AgedgError::Config("model.feature_dim must be positive".into()));
        }
        if self.model.hidden.iter().any(|&h| h == 0) {
            return Err(AgedgError::Config("model.hidden sizes must be positive".into()));
        }
        self.algorithm.validate()
    }
}

/// Outcome of one run: the resolved config, what was selected, the
/// equalized training sizes, and the full per-domain test report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub selected_step: usize,
    pub selection_score: f64,
    pub train_sizes: [usize; DOMAIN_COUNT],
    pub report: EvalReport,
    pub wall_clock_secs: f64,
    pub harness_version: String,
}

fn sorted_active(domains: &[AgeGroup]) -> Vec<AgeGroup> {
    let mut out = domains.to_vec();
    out.sort_by_key(|g| g.ordinal());
    out
}

// ---------------------------------------------------------------------------
// Batch stream

struct DomainQueue {
    domain: AgeGroup,
    pool: usize,
    order: Vec<usize>,
    pos: usize,
}

/// Per-domain without-replacement batch stream. Each domain's pool is
/// shuffled, consumed in batch-size slices, and reshuffled when fewer
/// than a full batch remains (the tail is dropped, so every emitted
/// batch has the same size).
pub struct BatchSampler {
    queues: Vec<DomainQueue>,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(
        split: &DomainSplit,
        active: &[AgeGroup],
        batch_size: usize,
        seed: u64,
    ) -> Result<BatchSampler> {
        if active.is_empty() {
            return Err(AgedgError::Config("sampler needs at least one domain".into()));
        }
        let mut queues = Vec::with_capacity(active.len());
        let mut min_pool = usize::MAX;
        for g in sorted_active(active) {
            let pool = split.domain(g).train.len();
            min_pool = min_pool.min(pool);
            queues.push(DomainQueue {
                domain: g,
                pool,
                order: (0..pool).collect(),
                // Start exhausted so the first draw shuffles.
                pos: pool,
            });
        }
        let batch = batch_size.min(min_pool);
        if batch < 2 {
            return Err(AgedgError::Config(format!(
                "smallest active training pool has {min_pool} samples, need at least 2 per batch"
            )));
        }
        Ok(BatchSampler {
            queues,
            batch,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Rows per emitted domain batch; the configured size capped by the
    /// smallest active pool.
    pub fn batch_rows(&self) -> usize {
        self.batch
    }

    /// Draws the next one-batch-per-domain set from `split`, which must
    /// be the split the sampler was built over.
    pub fn next_set(&mut self, split: &DomainSplit) -> Result<DomainBatchSet> {
        let mut batches = Vec::with_capacity(self.queues.len());
        for q in &mut self.queues {
            let train = &split.domain(q.domain).train;
            if train.len() != q.pool {
                return Err(AgedgError::Config(format!(
                    "sampler was built over a {}-sample pool for {}, given {}",
                    q.pool,
                    q.domain,
                    train.len()
                )));
            }
            if q.pos + self.batch > q.order.len() {
                q.order.shuffle(&mut self.rng);
                q.pos = 0;
            }
            let picked = &q.order[q.pos..q.pos + self.batch];
            q.pos += self.batch;
            let refs: Vec<&Sample> = picked.iter().map(|&i| &train[i]).collect();
            batches.push(batch_from_samples(q.domain, &refs)?);
        }
        DomainBatchSet::new(batches)
    }
}

// ---------------------------------------------------------------------------
// Selection

/// Deterministic composite loss (equal 1/3 weights) over a pooled sample
/// set. Lower is better. Order-invariant: every term is built from means.
pub fn selection_score(state: &ModelState, pooled_val: &[&Sample]) -> Result<f64> {
    if pooled_val.is_empty() {
        return Err(AgedgError::Config(
            "selection needs a non-empty pooled validation set".into(),
        ));
    }
    let width = pooled_val[0].input.len();
    let mut inputs = Array2::zeros((pooled_val.len(), width));
    for (i, s) in pooled_val.iter().enumerate() {
        if s.input.len() != width {
            return Err(AgedgError::ShapeMismatch {
                context: "selection_score".into(),
                detail: format!(
                    "sample {} has width {}, expected {width}",
                    s.id,
                    s.input.len()
                ),
            });
        }
        for (j, &v) in s.input.iter().enumerate() {
            inputs[[i, j]] = v;
        }
    }
    let labels = LabelBatch::from_samples(pooled_val.iter().copied());
    labels.validate()?;
    let pred = forward(state, &inputs)?;
    composite_loss(&pred, &labels, &ShakeWeights::uniform())
}

fn describe_step_failure(
    e: AgedgError,
    step: usize,
    last: &Option<(usize, StepDiagnostics)>,
) -> AgedgError {
    match e {
        AgedgError::Divergence(msg) => {
            let tail = match last {
                Some((s, d)) => format!(
                    "; last healthy step {s}: loss {:.6}, gradient norm {:.3e}",
                    d.loss.total, d.grad_norm
                ),
                None => "; no step had completed".into(),
            };
            AgedgError::Divergence(format!("step {step}: {msg}{tail}"))
        }
        other => other,
    }
}

/// Training ids and selection ids must never meet the evaluation ids,
/// and inactive domains must contribute nothing at all.
fn check_holdout_disjoint(
    working: &DomainSplit,
    original: &DomainSplit,
    active: &[AgeGroup],
) -> Result<()> {
    let mut used: HashSet<&str> = HashSet::new();
    for g in active {
        for s in &working.domain(*g).train {
            used.insert(s.id.as_str());
        }
        for s in &working.domain(*g).val {
            used.insert(s.id.as_str());
        }
    }
    for g in AgeGroup::ALL {
        for s in &original.domain(g).test {
            if used.contains(s.id.as_str()) {
                return Err(AgedgError::Config(format!(
                    "sample {} sits in both the training pool and the {g} test split",
                    s.id
                )));
            }
        }
        if !active.contains(&g) {
            for s in original
                .domain(g)
                .train
                .iter()
                .chain(original.domain(g).val.iter())
            {
                if used.contains(s.id.as_str()) {
                    return Err(AgedgError::Config(format!(
                        "held-out domain {g} leaked sample {} into training",
                        s.id
                    )));
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Single run

/// Runs one config and returns its record. See [`train_and_select_full`]
/// when the selected model itself is needed.
pub fn train_and_select(cfg: &TrainConfig, data: &DomainSplit) -> Result<RunRecord> {
    train_and_select_full(cfg, data).map(|(rec, _)| rec)
}

/// The full result: the run record plus the selected model state.
pub fn train_and_select_full(
    cfg: &TrainConfig,
    data: &DomainSplit,
) -> Result<(RunRecord, ModelState)> {
    let t0 = Instant::now();
    cfg.validate()?;
    data.validate()?;
    let active = sorted_active(&cfg.active_training_domains);
    let available: usize = active.iter().map(|g| data.domain(*g).train.len()).sum();
    let budget = if cfg.total_train_budget == 0 {
        available
    } else {
        cfg.total_train_budget
    };
    let working = equalize_training_budget(data, &active, budget, cfg.seed)?;
    check_holdout_disjoint(&working, data, &active)?;

    let mut state = init_reference_backbone(
        &BackboneConfig {
            input: data.shape,
            hidden: cfg.model.hidden.clone(),
            feature_dim: cfg.model.feature_dim,
        },
        mix_seed(cfg.seed, MODEL_SEED_SALT),
    )?;
    let mut sampler = BatchSampler::new(
        &working,
        &active,
        cfg.batch_size,
        mix_seed(cfg.seed, SAMPLER_SEED_SALT),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, STEP_SEED_SALT));

    let pooled_val: Vec<&Sample> = active
        .iter()
        .flat_map(|g| working.domain(*g).val.iter())
        .collect();
    if pooled_val.is_empty() {
        return Err(AgedgError::Config(
            "active domains have no validation samples; model selection is impossible".into(),
        ));
    }

    let mut best: Option<(f64, usize, ModelState)> = None;
    let mut last_ok: Option<(usize, StepDiagnostics)> = None;
    for step in 1..=cfg.steps {
        let set = sampler.next_set(&working)?;
        let (next, diag) = algorithm_step(&state, &set, &cfg.algorithm, &mut rng)
            .map_err(|e| describe_step_failure(e, step, &last_ok))?;
        state = next;
        last_ok = Some((step, diag));
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let score = selection_score(&state, &pooled_val)?;
            if best.as_ref().map_or(true, |(s, _, _)| score < *s) {
                best = Some((score, step, state.clone()));
            }
        }
    }
    let (score, selected_step, selected) = best.expect("the final step is always scored");
    let report = evaluate(&selected, data)?;

    let mut resolved = cfg.clone();
    resolved.active_training_domains = active;
    resolved.total_train_budget = budget;
    let record = RunRecord {
        config: resolved,
        selected_step,
        selection_score: score,
        train_sizes: working.train_sizes(),
        report,
        wall_clock_secs: t0.elapsed().as_secs_f64(),
        harness_version: HARNESS_VERSION.into(),
    };
    Ok((record, selected))
}

// ---------------------------------------------------------------------------
// Multi-run protocols

/// Runs each config against the same data, optionally across `jobs`
/// worker threads. Runs share nothing mutable; output order follows
/// input order either way.
pub fn run_many(cfgs: &[TrainConfig], data: &DomainSplit, jobs: usize) -> Result<Vec<RunRecord>> {
    Ok(run_many_full(cfgs, data, jobs)?
        .into_iter()
        .map(|(rec, _)| rec)
        .collect())
}

pub fn run_many_full(
    cfgs: &[TrainConfig],
    data: &DomainSplit,
    jobs: usize,
) -> Result<Vec<(RunRecord, ModelState)>> {
    if jobs == 0 {
        return Err(AgedgError::Config("jobs must be at least 1".into()));
    }
    if jobs == 1 || cfgs.len() <= 1 {
        return cfgs
            .iter()
            .map(|cfg| train_and_select_full(cfg, data))
            .collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| AgedgError::Config(format!("worker pool: {e}")))?;
    pool.install(|| {
        use rayon::prelude::*;
        cfgs.par_iter()
            .map(|cfg| train_and_select_full(cfg, data))
            .collect()
    })
}

/// Five runs, each holding out one domain, all with the same equalized
/// training budget. The base config must start from all five domains.
pub fn leave_one_domain_out(
    base: &TrainConfig,
    data: &DomainSplit,
    jobs: usize,
) -> Result<Vec<RunRecord>> {
    Ok(leave_one_domain_out_full(base, data, jobs)?
        .into_iter()
        .map(|(rec, _)| rec)
        .collect())
}

pub fn leave_one_domain_out_full(
    base: &TrainConfig,
    data: &DomainSplit,
    jobs: usize,
) -> Result<Vec<(RunRecord, ModelState)>> {
    base.validate()?;
    if sorted_active(&base.active_training_domains)[..] != AgeGroup::ALL {
        return Err(AgedgError::Config(
            "leave-one-domain-out starts from all five domains active".into(),
        ));
    }
    data.validate()?;
    let mut cfgs = Vec::with_capacity(DOMAIN_COUNT);
    let mut min_available = usize::MAX;
    for held in AgeGroup::ALL {
        let active: Vec<AgeGroup> = AgeGroup::ALL
            .iter()
            .copied()
            .filter(|g| *g != held)
            .collect();
        let available: usize = active.iter().map(|g| data.domain(*g).train.len()).sum();
        min_available = min_available.min(available);
        let mut cfg = base.clone();
        cfg.active_training_domains = active;
        cfgs.push(cfg);
    }
    let shared = resolve_shared_budget(base.total_train_budget, min_available)?;
    for cfg in &mut cfgs {
        cfg.total_train_budget = shared;
    }
    run_many_full(&cfgs, data, jobs)
}

/// One run per requested domain subset, all sharing one total budget.
pub fn subset_ablation(
    base: &TrainConfig,
    data: &DomainSplit,
    subsets: &[Vec<AgeGroup>],
    jobs: usize,
) -> Result<Vec<RunRecord>> {
    Ok(subset_ablation_full(base, data, subsets, jobs)?
        .into_iter()
        .map(|(rec, _)| rec)
        .collect())
}

pub fn subset_ablation_full(
    base: &TrainConfig,
    data: &DomainSplit,
    subsets: &[Vec<AgeGroup>],
    jobs: usize,
) -> Result<Vec<(RunRecord, ModelState)>> {
    if subsets.is_empty() {
        return Err(AgedgError::Config("subset ablation needs at least one subset".into()));
    }
    data.validate()?;
    let mut cfgs = Vec::with_capacity(subsets.len());
    let mut min_available = usize::MAX;
    for subset in subsets {
        let mut cfg = base.clone();
        cfg.active_training_domains = sorted_active(subset);
        cfg.validate()?;
        let available: usize = cfg
            .active_training_domains
            .iter()
            .map(|g| data.domain(*g).train.len())
            .sum();
        min_available = min_available.min(available);
        cfgs.push(cfg);
    }
    let shared = resolve_shared_budget(base.total_train_budget, min_available)?;
    for cfg in &mut cfgs {
        cfg.total_train_budget = shared;
    }
    run_many_full(&cfgs, data, jobs)
}

fn resolve_shared_budget(requested: usize, min_available: usize) -> Result<usize> {
    let shared = if requested == 0 {
        min_available
    } else {
        requested
    };
    if shared > min_available {
        return Err(AgedgError::Config(format!(
            "shared budget {shared} exceeds the smallest run's available pool {min_available}"
        )));
    }
    if shared == 0 {
        return Err(AgedgError::Config(
            "no training samples available for the requested runs".into(),
        ));
    }
    Ok(shared)
}
