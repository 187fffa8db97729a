//! Joint optimisation of network weights and controller, consensus
//! bookkeeping, and search checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{self, BlobReader};
use crate::controller::{
    site_logits, task_tensor, ConsensusConfig, ConsensusState, ConsensusTraceEntry, Controller, ControllerConfig,
};
use crate::cost::{r1_surrogate, Resolution};
use crate::degrade::{
    crop, load_png_dir, procedural_corpus, sample_training_pair, ActiveTypes, SampleMode, SamplePair,
};
use crate::error::{Error, Result};
use crate::imageconv::images_to_tensor;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::supernet::{PrefixPlan, SuperNet, SuperNetConfig};
use crate::task::TaskVector;
use crate::tensor::Tensor;

const INIT_NET_SALT: u64 = 0x6e65_7477_6f72_6b00;
const INIT_CTRL_SALT: u64 = 0x636f_6e74_726f_6c00;
const DATA_SALT: u64 = 0x6461_7461_0000_0000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of clean PNGs; procedural images are used when absent.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default = "default_procedural")]
    pub procedural_images: usize,
    #[serde(default)]
    pub active_types: ActiveTypes,
}

fn default_procedural() -> usize {
    50
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            procedural_images: default_procedural(),
            active_types: ActiveTypes::ALL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// Tasks per batch (one sample per task).
    pub batch_size: usize,
    pub patch_size: usize,
    pub learning_rate: f64,
    pub total_iterations: u64,
    /// Defaults to half of `total_iterations`.
    #[serde(default)]
    pub lr_decay_step: Option<u64>,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    pub seed: u64,
    pub sampling_mode: SampleMode,
    pub supernet: SuperNetConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    /// Effects sharing one prefix in the cost term; defaults to `batch_size`.
    #[serde(default)]
    pub effects: Option<usize>,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    /// Gate prefix sites with the consensus mask (and drop their scaling)
    /// during search instead of the per-task masks.
    #[serde(default)]
    pub consensus_forward: bool,
    /// Steps trained on the reconstruction loss alone.
    #[serde(default)]
    pub warmup_iterations: u64,
    #[serde(default)]
    pub data: DataConfig,
    /// Checkpoint period in steps; 0 saves only at the end.
    #[serde(default)]
    pub checkpoint_every: u64,
}

fn default_decay_factor() -> f64 {
    0.1
}

fn default_clip() -> f64 {
    10.0
}

impl TrainConfig {
    /// Task-specific search (no shared prefix pressure).
    pub fn full_tsnet() -> Self {
        TrainConfig {
            lambda1: 5e-11,
            lambda2: 0.0,
            alpha: 0.9,
            gamma: 0.9,
            batch_size: 64,
            patch_size: 64,
            learning_rate: 1e-4,
            total_iterations: 1_000_000,
            lr_decay_step: None,
            lr_decay_factor: 0.1,
            seed: 0,
            sampling_mode: SampleMode::Relative,
            supernet: SuperNetConfig::FULL,
            controller: ControllerConfig::default(),
            effects: Some(1),
            grad_clip: 10.0,
            consensus_forward: false,
            warmup_iterations: 0,
            data: DataConfig::default(),
            checkpoint_every: 10_000,
        }
    }

    /// Task-agnostic plus task-specific search.
    pub fn full_ta_tsnet() -> Self {
        TrainConfig {
            lambda2: 1e-2,
            effects: None,
            ..Self::full_tsnet()
        }
    }

    /// Laptop-scale search.
    pub fn desk() -> Self {
        TrainConfig {
            lambda1: 3e-8,
            lambda2: 1e-2,
            batch_size: 8,
            patch_size: 32,
            learning_rate: 1e-3,
            total_iterations: 20_000,
            supernet: SuperNetConfig::DESK,
            effects: None,
            checkpoint_every: 0,
            ..Self::full_tsnet()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.supernet.validate()?;
        self.consensus().validate()?;
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("lambda1 and lambda2 must be >= 0".into()));
        }
        if self.batch_size < 1 || self.effects == Some(0) {
            return Err(Error::Config("batch size and effects must be >= 1".into()));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(self.supernet.head_stride) {
            return Err(Error::Config(format!(
                "patch size {} must be a positive multiple of {}",
                self.patch_size, self.supernet.head_stride
            )));
        }
        // NaN fails too.
        let positive = |v: f64| v > 0.0;
        if !positive(self.learning_rate) || !positive(self.lr_decay_factor) || !positive(self.grad_clip) {
            return Err(Error::Config(
                "learning rate, decay factor and clip must be positive".into(),
            ));
        }
        if !self.data.active_types.0.iter().any(|&a| a) {
            return Err(Error::Config("at least one degradation type must be active".into()));
        }
        Ok(())
    }

    pub fn consensus(&self) -> ConsensusConfig {
        ConsensusConfig {
            alpha: self.alpha,
            gamma: self.gamma,
        }
    }

    pub fn effects(&self) -> usize {
        self.effects.unwrap_or(self.batch_size)
    }

    pub fn decay_step(&self) -> u64 {
        self.lr_decay_step.unwrap_or(self.total_iterations / 2)
    }

    pub fn patch_resolution(&self) -> Resolution {
        Resolution::new(self.patch_size, self.patch_size)
    }
}

/// Step-decay schedule: base rate before the decay step, scaled after.
pub fn lr_schedule(iteration: u64, cfg: &TrainConfig) -> f64 {
    if iteration < cfg.decay_step() {
        cfg.learning_rate
    } else {
        cfg.learning_rate * cfg.lr_decay_factor
    }
}

/// Clean training images and the deterministic per-step batch sampler.
pub struct TrainingData {
    images: Vec<RgbImage>,
}

impl TrainingData {
    pub fn new(images: Vec<RgbImage>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Data("no training images".into()));
        }
        Ok(TrainingData { images })
    }

    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        match &cfg.data.dir {
            Some(dir) => Self::new(load_png_dir(dir)?.into_iter().map(|(_, img)| img).collect()),
            None => Self::new(procedural_corpus(cfg.data.procedural_images, cfg.seed)),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Batch for `step`; depends only on the seed and the step index.
    pub fn batch(&self, step: u64, cfg: &TrainConfig) -> Result<Vec<SamplePair>> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DATA_SALT);
        rng.set_stream(step);
        let p = cfg.patch_size as u32;
        (0..cfg.batch_size)
            .map(|_| {
                let id = rng.random_range(0..self.images.len());
                let img = &self.images[id];
                if img.width() < p || img.height() < p {
                    return Err(Error::Data(format!(
                        "image {id} ({}x{}) smaller than patch {p}",
                        img.width(),
                        img.height()
                    )));
                }
                let x = rng.random_range(0..=img.width() - p);
                let y = rng.random_range(0..=img.height() - p);
                let patch = crop(img, x, y, p);
                sample_training_pair(&patch, id, cfg.sampling_mode, &cfg.data.active_types, &mut rng)
            })
            .collect()
    }
}

/// Scalar components of one step, for logging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub l1: f64,
    pub r1: f64,
    pub r2: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub prefix_len: usize,
}

/// Everything needed to continue or extract a search.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchState {
    pub config: TrainConfig,
    pub net: SuperNet<f32>,
    pub controller: Controller<f32>,
    pub consensus: ConsensusState,
    pub adam: AdamState<f32>,
    pub adam_config: AdamConfig,
    pub iteration: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Search,
    Pruned,
}

#[derive(Serialize, Deserialize)]
struct SearchHeader {
    kind: CheckpointKind,
    train: TrainConfig,
    consensus: ConsensusState,
    iteration: u64,
    adam_step: u64,
    adam: AdamConfig,
    /// Data sampling resumes from `(seed, iteration)`.
    rng: RngState,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: u64,
    stream: u64,
}

#[derive(Deserialize)]
struct KindOnly {
    kind: CheckpointKind,
}

/// Kind recorded in a checkpoint header.
pub fn checkpoint_kind(path: &Path) -> Result<CheckpointKind> {
    Ok(checkpoint::peek_header::<KindOnly>(path)?.kind)
}

impl SearchState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = SuperNet::new(config.supernet, config.seed ^ INIT_NET_SALT)?;
        let n = config.supernet.num_sites();
        let controller = Controller::new(
            config.controller,
            n,
            config.supernet.channels,
            config.seed ^ INIT_CTRL_SALT,
        )?;
        let consensus = ConsensusState::new(n, config.supernet.channels, config.consensus());
        let params: Vec<&Tensor<f32>> = net.params().into_iter().chain(controller.params()).collect();
        let adam = AdamState::new(&params);
        Ok(SearchState {
            config,
            net,
            controller,
            consensus,
            adam,
            adam_config: AdamConfig::default(),
            iteration: 0,
        })
    }

    /// Controller cost per task vector.
    pub fn epsilon(&self) -> u64 {
        self.controller.flops()
    }

    fn param_names(&self) -> Vec<String> {
        self.net
            .param_names()
            .into_iter()
            .chain(self.controller.param_names())
            .collect()
    }

    /// One optimisation step on `batch`, followed by the consensus update.
    pub fn train_step(&mut self, batch: &[SamplePair]) -> Result<StepMetrics> {
        self.step_traced(batch).map(|(m, _)| m)
    }

    pub fn step_traced(&mut self, batch: &[SamplePair]) -> Result<(StepMetrics, ConsensusTraceEntry)> {
        let cfg = self.config.clone();
        let scfg = cfg.supernet;
        let (n_sites, c) = (scfg.num_sites(), scfg.channels);
        let m = batch.len();
        if m == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        let tasks: Vec<TaskVector> = batch.iter().map(|p| p.task).collect();
        let inputs: Vec<&RgbImage> = batch.iter().map(|p| &p.input).collect();
        let targets: Vec<&RgbImage> = batch.iter().map(|p| &p.target).collect();
        let x = images_to_tensor(&inputs)?;
        let y = images_to_tensor(&targets)?;
        let (_, _, h, w) = x.dims4()?;

        let mut tape = Tape::<f32>::new();
        let net_vars = self.net.register(&mut tape, true);
        let ctrl_vars = self.controller.register(&mut tape, true);
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let tv = tape.constant(task_tensor(&tasks)?);
        let zs = self.controller.forward(&mut tape, &ctrl_vars, tv)?;
        let mut logits = site_logits(&mut tape, zs, n_sites, c)?;
        let prefix = self.consensus.prefix_len();
        let mut unscaled = 0;
        if cfg.consensus_forward && prefix > 0 {
            for (n, slot) in logits.iter_mut().enumerate().take(prefix) {
                let row = self.consensus.za_site(n);
                *slot = tape.constant(Tensor::new([m, c], row.repeat(m))?);
            }
            unscaled = PrefixPlan::new(&scfg, prefix)?.full_blocks;
        }
        let pred = self
            .net
            .forward(&mut tape, &net_vars, xv, tv, Some(&logits), unscaled)?;
        let l1 = tape.l1_loss(pred, yv)?;
        let r1 = r1_surrogate(
            &mut tape,
            zs,
            &scfg,
            Resolution::new(w, h),
            prefix,
            self.epsilon(),
            cfg.effects(),
        )?;
        let r2 = crate::controller::r2_penalty(&mut tape, zs, &self.consensus.za, &self.consensus.phi, c)?;
        let regularize = self.iteration >= cfg.warmup_iterations;
        let (l1w, l2w) = if regularize {
            (cfg.lambda1, cfg.lambda2)
        } else {
            (0.0, 0.0)
        };
        let loss = tape.affine_scalars(0.0, vec![(l1, 1.0), (r1, l1w as f32), (r2, l2w as f32)])?;

        let metrics_values = (
            tape.scalar_value(loss) as f64,
            tape.scalar_value(l1) as f64,
            tape.scalar_value(r1) as f64,
            tape.scalar_value(r2) as f64,
        );
        let zs_value = tape.value(zs).clone();

        let mut grads = tape.backward(loss)?;
        let vars: Vec<Var> = net_vars.all().into_iter().chain(ctrl_vars.all()).collect();
        let mut grad_tensors: Vec<Tensor<f32>> = Vec::with_capacity(vars.len());
        {
            let params: Vec<&Tensor<f32>> = self.net.params().into_iter().chain(self.controller.params()).collect();
            for (v, p) in vars.iter().zip(&params) {
                grad_tensors.push(grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())));
            }
        }
        let norm = grad_tensors
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!(
                "gradient norm {norm} at step {}",
                self.iteration
            )));
        }
        if norm > cfg.grad_clip {
            let k = (cfg.grad_clip / norm) as f32;
            for g in &mut grad_tensors {
                g.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
        let lr = lr_schedule(self.iteration, &cfg);
        {
            let grad_refs: Vec<&Tensor<f32>> = grad_tensors.iter().collect();
            let mut params: Vec<&mut Tensor<f32>> = self.net.params_mut();
            params.extend(self.controller.params_mut());
            adam_step(&mut params, &grad_refs, &mut self.adam, lr, &self.adam_config)?;
        }
        let trace = self.consensus.step(self.iteration, &zs_value)?;
        let metrics = StepMetrics {
            step: self.iteration,
            loss: metrics_values.0,
            l1: metrics_values.1,
            r1: metrics_values.2,
            r2: metrics_values.3,
            lr,
            grad_norm: norm,
            prefix_len: trace.prefix_len,
        };
        self.iteration += 1;
        Ok((metrics, trace))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = SearchHeader {
            kind: CheckpointKind::Search,
            train: self.config.clone(),
            consensus: self.consensus.clone(),
            iteration: self.iteration,
            adam_step: self.adam.step,
            adam: self.adam_config,
            rng: RngState {
                seed: self.config.seed,
                stream: self.iteration,
            },
        };
        let names = self.param_names();
        let za = Tensor::new(
            [self.consensus.sites, self.consensus.channels],
            self.consensus.za.clone(),
        )?;
        let mut blobs: Vec<(String, &Tensor<f32>)> = Vec::new();
        let params: Vec<&Tensor<f32>> = self.net.params().into_iter().chain(self.controller.params()).collect();
        for (name, p) in names.iter().zip(&params) {
            blobs.push((name.clone(), p));
        }
        blobs.push(("consensus.za".into(), &za));
        for (name, t) in names.iter().zip(&self.adam.m) {
            blobs.push((format!("adam.m.{name}"), t));
        }
        for (name, t) in names.iter().zip(&self.adam.v) {
            blobs.push((format!("adam.v.{name}"), t));
        }
        checkpoint::save(path, &header, &blobs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, blobs): (SearchHeader, _) = checkpoint::load(path)?;
        if header.kind != CheckpointKind::Search {
            return Err(Error::Format(format!("{} is not a search checkpoint", path.display())));
        }
        let mut state = SearchState::new(header.train)?;
        let names = state.param_names();
        let mut reader = BlobReader::new(blobs);
        {
            let mut params: Vec<&mut Tensor<f32>> = state.net.params_mut();
            params.extend(state.controller.params_mut());
            for (name, p) in names.iter().zip(params) {
                *p = reader.next(name, p.shape())?;
            }
        }
        let mut consensus = header.consensus;
        if consensus.sites != state.consensus.sites || consensus.channels != state.consensus.channels {
            return Err(Error::Format("consensus shape does not match the super network".into()));
        }
        consensus.za = reader
            .next("consensus.za", &[consensus.sites, consensus.channels])?
            .into_data();
        state.consensus = consensus;
        for (i, name) in names.iter().enumerate() {
            let shape = state.adam.m[i].shape().to_vec();
            state.adam.m[i] = reader.next(&format!("adam.m.{name}"), &shape)?;
        }
        for (i, name) in names.iter().enumerate() {
            let shape = state.adam.v[i].shape().to_vec();
            state.adam.v[i] = reader.next(&format!("adam.v.{name}"), &shape)?;
        }
        reader.finish()?;
        state.adam.step = header.adam_step;
        state.adam_config = header.adam;
        state.iteration = header.iteration;
        Ok(state)
    }
}

/// Result of [`run_search`].
pub struct SearchOutcome {
    pub state: SearchState,
    pub metrics: Vec<StepMetrics>,
    pub trace: Vec<ConsensusTraceEntry>,
}

/// Output locations for a search run.
#[derive(Clone, Debug, Default)]
pub struct RunOutputs {
    pub dir: Option<PathBuf>,
}

impl RunOutputs {
    pub fn checkpoint_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("search.ckpt"))
    }
}

fn append_jsonl<T: Serialize>(file: &mut Option<std::fs::File>, value: &T) -> Result<()> {
    if let Some(f) = file {
        serde_json::to_writer(&mut *f, value)?;
        f.write_all(b"\n").map_err(|e| Error::io("writing log", e))?;
    }
    Ok(())
}

fn open_log(dir: Option<&PathBuf>, name: &str, append: bool) -> Result<Option<std::fs::File>> {
    dir.map(|d| {
        let path = d.join(name);
        std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))
    })
    .transpose()
}

/// Runs the search from `state` (fresh or resumed) up to the configured
/// iteration count. Writes `metrics.jsonl`, `consensus.jsonl` and
/// checkpoints into `outputs.dir` when set.
pub fn run_search(mut state: SearchState, data: &TrainingData, outputs: &RunOutputs) -> Result<SearchOutcome> {
    if let Some(d) = &outputs.dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    let resumed = state.iteration > 0;
    let mut metrics_log = open_log(outputs.dir.as_ref(), "metrics.jsonl", resumed)?;
    let mut trace_log = open_log(outputs.dir.as_ref(), "consensus.jsonl", resumed)?;
    let mut metrics = Vec::new();
    let mut trace = Vec::new();
    let total = state.config.total_iterations;
    while state.iteration < total {
        let step = state.iteration;
        let batch = data.batch(step, &state.config)?;
        let (m, t) = match state.step_traced(&batch) {
            Ok(v) => v,
            Err(e) if e.is_numeric() => {
                if let Some(d) = &outputs.dir {
                    let dump = serde_json::json!({
                        "step": step,
                        "error": e.to_string(),
                        "tasks": batch.iter().map(|p| p.task).collect::<Vec<_>>(),
                        "provenance": batch.iter().map(|p| &p.provenance).collect::<Vec<_>>(),
                        "last_metrics": metrics.last(),
                    });
                    let path = d.join("diagnostic.json");
                    std::fs::write(&path, serde_json::to_vec_pretty(&dump)?)
                        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if !m.loss.is_finite() {
            return Err(Error::Numeric(format!("loss {} at step {step}", m.loss)));
        }
        append_jsonl(&mut metrics_log, &m)?;
        append_jsonl(&mut trace_log, &t)?;
        if step.is_multiple_of(500) {
            tracing::info!(
                step,
                loss = m.loss,
                l1 = m.l1,
                r1 = m.r1,
                prefix = m.prefix_len,
                "search step"
            );
        }
        metrics.push(m);
        trace.push(t);
        let every = state.config.checkpoint_every;
        if every > 0 && state.iteration.is_multiple_of(every) && state.iteration < total {
            if let Some(p) = outputs.checkpoint_path() {
                state.save(&p)?;
            }
        }
    }
    if let Some(p) = outputs.checkpoint_path() {
        state.save(&p)?;
    }
    Ok(SearchOutcome { state, metrics, trace })
}
