//! Pretraining, the retrieve-and-train loop, silhouette early stopping and
//! run-directory output.

use std::fs;
use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, LabeledSample};
use crate::encoder::{
    init_encoder, momentum_update_in_place, AdamW, AdamWConfig, Checkpoint, EncoderParams, MomentumParams,
    OptimizerState,
};
use crate::error::{Error, Result};
use crate::inference::{kmeans, KMeansConfig};
use crate::metrics::silhouette_subsample;
use crate::neighborhood::{AlphaSchedule, MomentumQueue, QueueEntry, RetrievalConfig};
use crate::objective::{compute_gradients, LossBreakdown, LossConfig, Objective, ObjectiveConfig};
use crate::seed::{stream_rng, stream_seed, StreamRng};
use crate::vecmath::{ProbSpec, UnitEmbedding};

pub const DEFAULT_QUEUE_CAP: usize = 8192;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StarConfig {
    pub objective: Objective,
    pub tau: f64,
    pub gamma: f64,
    /// Momentum coefficient `m`.
    pub momentum: f64,
    /// Neighbors retrieved per query.
    pub k: usize,
    /// Number of fine categories K.
    pub n_fine: usize,
    /// Number of coarse categories M.
    pub n_coarse: usize,
    /// `None` means `min(|train|, 8192)`.
    pub queue_capacity: Option<usize>,
    pub same_coarse_only: bool,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub pretrain_epochs: usize,
    pub train_epochs: usize,
    pub patience: usize,
    pub alpha: AlphaSchedule,
    /// Initial value of B.
    pub base: f64,
    /// Keep B fixed at `base` instead of training it.
    pub fix_base: bool,
    pub use_ce: bool,
    pub kl_loss: bool,
    pub kl_weight: bool,
    pub prob: ProbSpec,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    /// Cap on points used for the per-epoch silhouette.
    pub silhouette_samples: Option<usize>,
    /// k-means restarts for inference (evaluation clustering, centroid
    /// banks, cluster export). Training-time silhouettes use the default.
    pub inference_restarts: usize,
    pub seed: u64,
}

impl Default for StarConfig {
    fn default() -> Self {
        StarConfig {
            objective: Objective::Star,
            tau: 0.07,
            gamma: 1.0,
            momentum: 0.99,
            k: 10,
            n_fine: 2,
            n_coarse: 1,
            queue_capacity: None,
            same_coarse_only: false,
            batch_size: 64,
            lr: 5e-5,
            weight_decay: 0.01,
            clip: 1.0,
            pretrain_epochs: 100,
            train_epochs: 20,
            patience: 5,
            alpha: AlphaSchedule::default(),
            base: crate::encoder::DEFAULT_BASE,
            fix_base: false,
            use_ce: true,
            kl_loss: true,
            kl_weight: true,
            prob: ProbSpec::default(),
            hidden: vec![64],
            embed_dim: 16,
            silhouette_samples: None,
            inference_restarts: 10,
            seed: 0,
        }
    }
}

fn field_err(field: &str, message: impl Into<String>) -> Error {
    Error::config(field, message)
}

fn require(ok: bool, field: &str, message: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(field_err(field, message))
    }
}

impl StarConfig {
    pub fn validate(&self) -> Result<()> {
        require(self.tau > 0.0 && self.tau.is_finite(), "tau", "must be > 0")?;
        require(self.gamma >= 0.0 && self.gamma.is_finite(), "gamma", "must be >= 0")?;
        require((0.0..=1.0).contains(&self.momentum), "momentum", "must lie in [0, 1]")?;
        require(self.k >= 1, "k", "must be >= 1")?;
        require(self.n_coarse >= 1, "n_coarse", "must be >= 1")?;
        require(self.n_fine >= self.n_coarse, "n_fine", "must be >= n_coarse")?;
        require(self.batch_size >= 1, "batch_size", "must be >= 1")?;
        require(self.queue_capacity != Some(0), "queue_capacity", "must be >= 1")?;
        require(self.lr > 0.0 && self.lr.is_finite(), "lr", "must be > 0")?;
        require(
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            "weight_decay",
            "must be >= 0",
        )?;
        require(self.clip > 0.0, "clip", "must be > 0")?;
        require(self.base > 0.0 && self.base.is_finite(), "base", "must be > 0")?;
        require(self.embed_dim >= 1, "embed_dim", "must be >= 1")?;
        require(!self.hidden.contains(&0), "hidden", "layer widths must be >= 1")?;
        require(
            self.prob.temperature > 0.0 && self.prob.floor > 0.0 && self.prob.floor < 1.0,
            "prob",
            "temperature must be > 0 and floor in (0, 1)",
        )?;
        require(
            self.silhouette_samples.is_none_or(|s| s >= 2),
            "silhouette_samples",
            "must be >= 2",
        )?;
        require(self.inference_restarts >= 1, "inference_restarts", "must be >= 1")?;
        self.alpha.validate().map_err(|e| field_err("alpha", e.to_string()))
    }

    /// Hex SHA-256 of the canonical JSON form, truncated to 16 characters.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            objective: self.objective,
            tau: self.tau,
            gamma: self.gamma,
            prob: self.prob,
            use_ce: self.use_ce,
            kl_loss: self.kl_loss,
            kl_weight: self.kl_weight,
        }
    }

    pub fn objective_config(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            loss: self.loss_config(),
            retrieval: RetrievalConfig {
                k: self.k,
                same_coarse_only: self.same_coarse_only,
            },
            alpha: self.alpha.clone(),
        }
    }

    pub fn adamw_config(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            clip_norm: self.clip,
            ..AdamWConfig::default()
        }
    }

    pub fn queue_capacity_for(&self, n_train: usize) -> usize {
        self.queue_capacity
            .unwrap_or_else(|| n_train.clamp(1, DEFAULT_QUEUE_CAP))
    }

    /// `ln B` as it enters the denominators, or 0 when no shift is applied.
    pub fn log_base_shift(&self, params: &EncoderParams) -> f64 {
        if self.objective == Objective::Star && self.kl_weight {
            params.b_raw
        } else {
            0.0
        }
    }

    /// k-means settings for inference over the fine categories.
    pub fn inference_kmeans(&self, seed: u64) -> KMeansConfig {
        KMeansConfig {
            restarts: self.inference_restarts,
            ..KMeansConfig::new(self.n_fine, seed)
        }
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.is_empty() {
            return Err(Error::Empty("training set".into()));
        }
        ds.validate()?;
        if let Some(s) = ds.samples.iter().find(|s| s.coarse >= self.n_coarse) {
            return Err(Error::InvalidArgument(format!(
                "sample {} has coarse label {} but n_coarse is {}",
                s.id, s.coarse, self.n_coarse
            )));
        }
        if ds.len() < self.n_fine {
            return Err(Error::InvalidArgument(format!(
                "{} training samples cannot form {} clusters",
                ds.len(),
                self.n_fine
            )));
        }
        Ok(())
    }
}

fn optimizer_for(params: &EncoderParams, config: &StarConfig) -> Result<AdamW> {
    let mut frozen = vec![false; params.num_params()];
    if config.fix_base {
        frozen[params.b_raw_index()] = true;
    }
    AdamW::new(params.no_decay_mask(), frozen)
}

/// Initial parameters for `config`, with `b_raw = ln(config.base)`.
pub fn initial_params(d_in: usize, config: &StarConfig) -> Result<EncoderParams> {
    let mut params = init_encoder(d_in, &config.hidden, config.embed_dim, config.n_coarse, config.seed)?;
    params.b_raw = config.base.ln();
    Ok(params)
}

fn shuffled(n: usize, rng: &mut StreamRng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Coarse cross-entropy pretraining. Returns the parameters and the mean
/// training CE of every epoch.
pub fn pretrain_logged(dataset: &Dataset, config: &StarConfig) -> Result<(EncoderParams, Vec<f64>)> {
    config.validate()?;
    config.check_dataset(dataset)?;
    let mut params = initial_params(dataset.dim, config)?;
    let optimizer = optimizer_for(&params, config)?;
    let mut state = OptimizerState::new(config.adamw_config(), params.num_params());
    let mut rng = stream_rng(config.seed, "pretrain-shuffle");
    let objective = ObjectiveConfig {
        loss: LossConfig {
            objective: Objective::Pretrain,
            ..config.loss_config()
        },
        ..config.objective_config()
    };
    let mut losses = Vec::with_capacity(config.pretrain_epochs);
    for epoch in 0..config.pretrain_epochs {
        let order = shuffled(dataset.len(), &mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&LabeledSample> = chunk.iter().map(|&i| &dataset.samples[i]).collect();
            let (loss, grads) = compute_gradients(&params, &batch, None, epoch, &objective)?;
            total += loss.ce * batch.len() as f64;
            let mut flat = params.to_flat();
            optimizer.step(&mut flat, &grads, &mut state)?;
            params.set_flat(&flat)?;
        }
        let mean = total / dataset.len() as f64;
        debug!("pretrain epoch {epoch}: ce {mean:.6}");
        losses.push(mean);
    }
    Ok((params, losses))
}

pub fn pretrain(dataset: &Dataset, config: &StarConfig) -> Result<EncoderParams> {
    pretrain_logged(dataset, config).map(|(p, _)| p)
}

fn queue_entries(net: &MomentumParams, samples: &[&LabeledSample]) -> Result<Vec<QueueEntry>> {
    let feats: Vec<Vec<f64>> = samples.iter().map(|s| s.features.clone()).collect();
    let embeddings = net.net().encode_batch(&feats)?;
    Ok(samples
        .iter()
        .zip(embeddings)
        .map(|(s, embedding)| QueueEntry {
            sample_id: s.id,
            embedding,
            coarse_label: s.coarse,
        })
        .collect())
}

/// One pass of the momentum encoder over the training set, pushed in
/// dataset order.
pub fn init_queue(momentum: &MomentumParams, dataset: &Dataset, config: &StarConfig) -> Result<MomentumQueue> {
    let mut queue = MomentumQueue::new(config.queue_capacity_for(dataset.len()))?;
    let samples: Vec<&LabeledSample> = dataset.samples.iter().collect();
    queue.push(queue_entries(momentum, &samples)?);
    Ok(queue)
}

/// Mutable state of the main training loop.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Number of completed training epochs.
    pub epoch: usize,
    pub stopper: EarlyStopper,
    pub params: EncoderParams,
    pub momentum: MomentumParams,
    pub optimizer: OptimizerState,
    pub queue: MomentumQueue,
    pub rng: StreamRng,
}

impl TrainState {
    /// Momentum copy of `params`, a fresh optimizer and a warm queue.
    pub fn new(params: EncoderParams, dataset: &Dataset, config: &StarConfig) -> Result<Self> {
        let momentum = MomentumParams::from_encoder(&params);
        let queue = init_queue(&momentum, dataset, config)?;
        Ok(TrainState {
            epoch: 0,
            stopper: EarlyStopper::new(config.patience),
            optimizer: OptimizerState::new(config.adamw_config(), params.num_params()),
            params,
            momentum,
            queue,
            rng: stream_rng(config.seed, "train-shuffle"),
        })
    }
}

/// One epoch over shuffled batches: retrieve against the queue snapshot,
/// step the encoder, update the momentum copy, refresh the queue with the
/// batch's momentum features. Returns the sample-weighted mean losses.
pub fn train_epoch(state: &mut TrainState, dataset: &Dataset, config: &StarConfig) -> Result<LossBreakdown> {
    let objective = config.objective_config();
    let optimizer = optimizer_for(&state.params, config)?;
    let order = shuffled(dataset.len(), &mut state.rng);
    let mut sum = LossBreakdown::default();
    for chunk in order.chunks(config.batch_size) {
        let batch: Vec<&LabeledSample> = chunk.iter().map(|&i| &dataset.samples[i]).collect();
        let (loss, grads) = compute_gradients(&state.params, &batch, Some(&state.queue), state.epoch, &objective)?;
        let w = batch.len() as f64;
        sum.ce += loss.ce * w;
        sum.contrastive += loss.contrastive * w;
        sum.kl_term += loss.kl_term * w;
        sum.euclid_term += loss.euclid_term * w;
        sum.total += loss.total * w;

        let mut flat = state.params.to_flat();
        optimizer.step(&mut flat, &grads, &mut state.optimizer)?;
        state.params.set_flat(&flat)?;
        if !state.params.all_finite() {
            return Err(Error::non_finite("encoder parameters"));
        }
        momentum_update_in_place(&mut state.momentum, &state.params, config.momentum)?;
        state.queue.push(queue_entries(&state.momentum, &batch)?);
    }
    let n = dataset.len() as f64;
    let mean = LossBreakdown {
        ce: sum.ce / n,
        contrastive: sum.contrastive / n,
        kl_term: sum.kl_term / n,
        euclid_term: sum.euclid_term / n,
        total: sum.total / n,
    };
    mean.check_finite()?;
    state.epoch += 1;
    Ok(mean)
}

/// Silhouette of a K-means clustering of the training embeddings.
pub fn embedding_silhouette(
    params: &EncoderParams,
    dataset: &Dataset,
    config: &StarConfig,
    stream: &str,
) -> Result<f64> {
    let embeddings: Vec<UnitEmbedding> = params.encode_batch(&dataset.features())?;
    let seed = stream_seed(config.seed, stream);
    let model = kmeans(&embeddings, config.n_fine, seed)?;
    match config.silhouette_samples {
        Some(max) => silhouette_subsample(&embeddings, &model.assignments, max, seed),
        None => silhouette_subsample(&embeddings, &model.assignments, usize::MAX, seed),
    }
}

/// Patience-based stopping on a score that should increase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: Option<f64>,
    /// Ordinal (1-based) of the best observation.
    pub best_index: Option<usize>,
    pub since_improvement: usize,
    pub seen: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            best_index: None,
            since_improvement: 0,
            seen: 0,
        }
    }

    /// Records a score; returns whether it improved on the best so far.
    pub fn observe(&mut self, score: f64) -> bool {
        self.seen += 1;
        let improved = self.best.is_none_or(|b| score > b);
        if improved {
            self.best = Some(score);
            self.best_index = Some(self.seen);
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.patience > 0 && self.since_improvement >= self.patience
    }
}

/// Replays a score sequence through [`EarlyStopper`]; returns
/// `(observations consumed, 1-based index of the best)`.
pub fn stopping_point(scores: &[f64], patience: usize) -> (usize, Option<usize>) {
    let mut stopper = EarlyStopper::new(patience);
    for (i, &s) in scores.iter().enumerate() {
        stopper.observe(s);
        if stopper.should_stop() {
            return (i + 1, stopper.best_index);
        }
    }
    (scores.len(), stopper.best_index)
}

/// One line of `history.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Zero-based training epoch; `alpha` is the schedule value for it.
    pub epoch: usize,
    pub alpha: f64,
    pub loss: LossBreakdown,
    pub silhouette: f64,
    pub base: f64,
    /// `ln B` added to denominator logits (0 when the shift is off).
    pub log_base_shift: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Parameters of the best-silhouette epoch (pretrained when no training
    /// epochs ran).
    pub best: EncoderParams,
    /// Zero-based epoch of `best`.
    pub best_epoch: Option<usize>,
    pub final_state: Option<TrainState>,
    pub pretrained: EncoderParams,
    pub pretrain_losses: Vec<f64>,
    /// Silhouette of the pretrained encoder.
    pub initial_silhouette: f64,
    pub history: Vec<EpochRecord>,
}

impl FitResult {
    pub fn final_params(&self) -> &EncoderParams {
        self.final_state.as_ref().map_or(&self.pretrained, |s| &s.params)
    }
}

/// Pretrain, then loop [`train_epoch`] with silhouette early stopping.
pub fn fit(dataset: &Dataset, config: &StarConfig) -> Result<FitResult> {
    let (pretrained, pretrain_losses) = pretrain_logged(dataset, config)?;
    let initial_silhouette = embedding_silhouette(&pretrained, dataset, config, "silhouette-pretrained")?;
    info!(
        "pretrained {} epochs, silhouette {initial_silhouette:.4}",
        config.pretrain_epochs
    );
    if config.objective == Objective::Pretrain || config.train_epochs == 0 {
        return Ok(FitResult {
            best: pretrained.clone(),
            best_epoch: None,
            final_state: None,
            pretrained,
            pretrain_losses,
            initial_silhouette,
            history: Vec::new(),
        });
    }

    let mut state = TrainState::new(pretrained.clone(), dataset, config)?;
    let mut best = pretrained.clone();
    let mut best_epoch = None;
    let mut history = Vec::new();
    while state.epoch < config.train_epochs {
        let epoch = state.epoch;
        let alpha = config.alpha.alpha(epoch);
        let loss = train_epoch(&mut state, dataset, config)?;
        let silhouette = embedding_silhouette(&state.params, dataset, config, &format!("silhouette-epoch-{epoch}"))?;
        let improved = state.stopper.observe(silhouette);
        if improved {
            best = state.params.clone();
            best_epoch = Some(epoch);
        }
        info!(
            "epoch {epoch}: alpha {alpha} total {:.5} silhouette {silhouette:.4}",
            loss.total
        );
        history.push(EpochRecord {
            epoch,
            alpha,
            loss,
            silhouette,
            base: state.params.base(),
            log_base_shift: config.log_base_shift(&state.params),
            improved,
        });
        if state.stopper.should_stop() {
            info!("early stop after epoch {epoch}");
            break;
        }
    }
    Ok(FitResult {
        best,
        best_epoch,
        final_state: Some(state),
        pretrained,
        pretrain_losses,
        initial_silhouette,
        history,
    })
}

pub const CONFIG_FILE: &str = "config.json";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const BEST_FILE: &str = "best.json";
pub const FINAL_FILE: &str = "final.json";

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents).map_err(|e| Error::io(path, e))
}

pub fn history_jsonl(history: &[EpochRecord]) -> Result<String> {
    let mut out = String::new();
    for record in history {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn save_config(config: &StarConfig, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(config)? + "\n";
    write_file(path, text.as_bytes())
}

pub fn load_config(path: &Path) -> Result<StarConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let config: StarConfig = serde_json::from_str(&text)?;
    config.validate()?;
    Ok(config)
}

/// Writes `config.json`, `history.jsonl`, `best.json` and `final.json`.
pub fn write_run_dir(dir: &Path, config: &StarConfig, result: &FitResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let hash = config.config_hash();
    save_config(config, &dir.join(CONFIG_FILE))?;
    write_file(&dir.join(HISTORY_FILE), history_jsonl(&result.history)?.as_bytes())?;
    Checkpoint::new(result.best.clone(), result.best_epoch, hash.clone()).save(&dir.join(BEST_FILE))?;
    let mut last = Checkpoint::new(
        result.final_params().clone(),
        result.final_state.as_ref().map(|s| s.epoch),
        hash,
    );
    if let Some(state) = &result.final_state {
        last.momentum = Some(state.momentum.clone());
        last.optimizer = Some(state.optimizer.clone());
    }
    last.save(&dir.join(FINAL_FILE))
}

/// [`fit`] followed by [`write_run_dir`].
pub fn fit_to_dir(dataset: &Dataset, config: &StarConfig, dir: &Path) -> Result<FitResult> {
    let result = fit(dataset, config)?;
    write_run_dir(dir, config, &result)?;
    Ok(result)
}
