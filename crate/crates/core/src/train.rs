//! Training loop: noising, condition dropout, loss, optimiser step.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::conditioning::{condition_dropout, Condition};
use crate::corpus::DanceItem;
use crate::denoiser::{forward_graph, Denoiser, DenoiserConfig};
use crate::diffusion::{make_schedule, q_sample, DiffusionSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossTerms, LossWeights};
use crate::metrics::par_map;
use crate::motion::{Skeleton, FRAME_DIM};
use crate::nn::{Graph, Tensor};
use crate::optim::{optimizer_step, OptimizerConfig, OptimizerState};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Probability of replacing an item's condition with the null condition.
    pub dropout: f64,
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            dropout: 0.1,
            diffusion_steps: 1000,
            schedule: ScheduleKind::Cosine,
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::BadProbability(self.dropout));
        }
        if self.diffusion_steps == 0 {
            return Err(Error::BadT(0));
        }
        self.weights.validate()?;
        self.optimizer.validate()
    }
}

/// Mean loss terms over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub simple: f64,
    pub pos: f64,
    pub vel: f64,
    pub foot: f64,
    pub total: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,L_simple,L_pos,L_vel,L_foot,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.simple, self.pos, self.vel, self.foot, self.total
        )
    }
}

/// State carried across epochs.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Denoiser,
    pub optimizer: OptimizerState,
    schedule: DiffusionSchedule,
    skeleton: Arc<Skeleton>,
    rng: Rng,
    epoch: usize,
    jobs: usize,
}

/// Randomness drawn for one item before any model evaluation, so that the
/// order of later work cannot change the result.
struct ItemDraw {
    index: usize,
    t: usize,
    z: Vec<f64>,
    cond: Condition,
}

struct ItemResult {
    grads: Vec<Vec<f64>>,
    terms: LossTerms,
}

/// Checks that every item shares the shape the model expects.
pub fn validate_dataset(data: &[DanceItem], model: &DenoiserConfig) -> Result<usize> {
    let first = data.first().ok_or(Error::EmptyDataset)?;
    let n = first.motion.len();
    model.validate_for(n)?;
    for (i, item) in data.iter().enumerate() {
        if item.motion.len() != n || item.condition.n_frames != n {
            return Err(Error::ShapeMismatch(format!(
                "item {i} has {} frames and a {}-frame condition, expected {n}",
                item.motion.len(),
                item.condition.n_frames
            )));
        }
        if item.condition.feature_dim != model.feature_dim {
            return Err(Error::ShapeMismatch(format!(
                "item {i} has {} feature channels, model expects {}",
                item.condition.feature_dim, model.feature_dim
            )));
        }
    }
    Ok(n)
}

impl Trainer {
    pub fn new(config: TrainConfig, model: Denoiser, skeleton: Arc<Skeleton>) -> Result<Self> {
        config.validate()?;
        let schedule = make_schedule(config.diffusion_steps, config.schedule)?;
        let optimizer = OptimizerState::new(model.params.tensors());
        let rng = Rng::with_stream(config.seed, 1);
        Ok(Self {
            config,
            model,
            optimizer,
            schedule,
            skeleton,
            rng,
            epoch: 0,
            jobs: 1,
        })
    }

    /// Worker threads for per-item gradients. Results are merged in item
    /// order, so the outcome does not depend on this value.
    pub fn with_jobs(mut self, jobs: usize) -> Self {
        self.jobs = jobs.max(1);
        self
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    fn draw(&mut self, data: &[DanceItem], index: usize) -> Result<ItemDraw> {
        let item = &data[index];
        let x = item.motion.to_flat();
        let t = self.rng.between(1, self.schedule.steps);
        let noise = self.rng.normal_vec(x.len());
        let z = q_sample(&x, t, &noise, &self.schedule)?;
        let cond = condition_dropout(&item.condition, self.config.dropout, &mut self.rng)?;
        Ok(ItemDraw { index, t, z, cond })
    }

    fn item_gradient(&self, data: &[DanceItem], d: &ItemDraw) -> Result<ItemResult> {
        let x = data[d.index].motion.to_flat();
        let n = x.len() / FRAME_DIM;
        let mut g = Graph::new();
        let p = self.model.params.bind(&mut g);
        let xv = g.constant(Tensor::matrix(n, FRAME_DIM, x)?);
        let zv = g.constant(Tensor::matrix(n, FRAME_DIM, d.z.clone())?);
        let x_hat = forward_graph(&mut g, &p, &self.model.config, zv, d.t, &d.cond)?;
        let losses = total_loss(&mut g, xv, x_hat, &self.config.weights, &self.skeleton)?;
        let terms = losses.values(&g);
        if !terms.total.is_finite() {
            return Err(Error::NumericFailure(format!(
                "loss is {} at step t = {}",
                terms.total, d.t
            )));
        }
        let vars = p.vars().to_vec();
        let mut grads = g.backward(losses.total)?;
        let grads = vars
            .iter()
            .zip(self.model.params.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        Ok(ItemResult { grads, terms })
    }

    /// Runs one pass over `data` and returns the epoch means.
    pub fn run_epoch(&mut self, data: &[DanceItem]) -> Result<EpochLog> {
        validate_dataset(data, &self.model.config)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        self.rng.shuffle(&mut order);
        let mut sums = LossTerms::default();
        for batch in order.chunks(self.config.batch_size) {
            let draws = batch.iter().map(|&i| self.draw(data, i)).collect::<Result<Vec<_>>>()?;
            let results: Vec<Result<ItemResult>> = par_map(&draws, self.jobs, |d| self.item_gradient(data, d));
            let scale = 1.0 / batch.len() as f64;
            let mut total: Vec<Vec<f64>> = self.model.params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
            for r in results {
                let r = r?;
                for (acc, g) in total.iter_mut().zip(&r.grads) {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += scale * b;
                    }
                }
                sums.simple += r.terms.simple;
                sums.pos += r.terms.pos;
                sums.vel += r.terms.vel;
                sums.foot += r.terms.foot;
                sums.total += r.terms.total;
            }
            optimizer_step(
                self.model.params.tensors_mut(),
                &total,
                &mut self.optimizer,
                &self.config.optimizer,
            )?;
            if !self.model.params.all_finite() {
                return Err(Error::NumericFailure("parameters became non-finite".into()));
            }
        }
        self.epoch += 1;
        let k = data.len() as f64;
        Ok(EpochLog {
            epoch: self.epoch,
            simple: sums.simple / k,
            pos: sums.pos / k,
            vel: sums.vel / k,
            foot: sums.foot / k,
            total: sums.total / k,
        })
    }
}

/// Trains for `config.epochs` epochs, calling `on_epoch` after each one.
pub fn train(
    config: &TrainConfig,
    model_config: &DenoiserConfig,
    data: &[DanceItem],
    skeleton: Arc<Skeleton>,
    jobs: usize,
    mut on_epoch: impl FnMut(&EpochLog, &Denoiser) -> Result<()>,
) -> Result<(Denoiser, Vec<EpochLog>)> {
    validate_dataset(data, model_config)?;
    let model = Denoiser::new(model_config.clone(), config.seed)?;
    let mut trainer = Trainer::new(config.clone(), model, skeleton)?.with_jobs(jobs);
    let mut log = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let entry = trainer.run_epoch(data)?;
        on_epoch(&entry, &trainer.model)?;
        log.push(entry);
    }
    Ok((trainer.model, log))
}
