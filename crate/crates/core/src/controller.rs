//! Architecture controller and the task-agnostic consensus bookkeeping.
//!
//! The controller maps a task vector to one logit per channel per site. The
//! consensus state tracks an exponential moving average of those logits
//! (`z^a`), a per-site agreement score `s`, and the shared-prefix indicator
//! `phi` derived from `s`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::task::{TaskVector, TASK_DIM};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub hidden: usize,
    /// Initial bias of the logit layer; positive keeps every channel active at start.
    pub init_bias: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            hidden: 64,
            init_bias: 1.0,
        }
    }
}

/// Three fully connected layers, `D -> H -> H -> N*C`, ReLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Controller<T: Scalar = f32> {
    pub config: ControllerConfig,
    pub sites: usize,
    pub channels: usize,
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ControllerVars {
    vars: [Var; 6],
}

impl ControllerVars {
    pub fn all(&self) -> Vec<Var> {
        self.vars.to_vec()
    }
}

impl<T: Scalar> Controller<T> {
    pub fn new(config: ControllerConfig, sites: usize, channels: usize, seed: u64) -> Result<Self> {
        if config.hidden == 0 || sites == 0 || channels == 0 {
            return Err(Error::Config("controller dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let relu_gain = std::f64::consts::SQRT_2;
        Ok(Controller {
            config,
            sites,
            channels,
            fc1_w: Tensor::randn([h, TASK_DIM], relu_gain / (TASK_DIM as f64).sqrt(), &mut rng),
            fc1_b: Tensor::zeros([h]),
            fc2_w: Tensor::randn([h, h], relu_gain / (h as f64).sqrt(), &mut rng),
            fc2_b: Tensor::zeros([h]),
            head_w: Tensor::randn([sites * channels, h], 1.0 / (h as f64).sqrt(), &mut rng),
            head_b: Tensor::full([sites * channels], T::from_f64_lossy(config.init_bias)),
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        [
            "fc1.weight",
            "fc1.bias",
            "fc2.weight",
            "fc2.bias",
            "head.weight",
            "head.bias",
        ]
        .map(|n| format!("controller.{n}"))
        .to_vec()
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        vec![
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
            &self.head_w,
            &self.head_b,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> ControllerVars {
        let vars = self.params().map_leaves(tape, trainable);
        ControllerVars {
            vars: vars.try_into().expect("six controller tensors"),
        }
    }

    /// `t: [m, TASK_DIM] -> [m, sites * channels]` logits.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &ControllerVars, t: Var) -> Result<Var> {
        let [w1, b1, w2, b2, w3, b3] = vars.vars;
        let mut h = tape.linear(t, w1, Some(b1))?;
        h = tape.relu(h)?;
        h = tape.linear(h, w2, Some(b2))?;
        h = tape.relu(h)?;
        tape.linear(h, w3, Some(b3))
    }

    /// Logits for a batch of task vectors, without gradients.
    pub fn predict(&self, tasks: &[TaskVector]) -> Result<Tensor<T>> {
        let t = task_tensor(tasks)?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let tv = tape.constant(t);
        let z = self.forward(&mut tape, &vars, tv)?;
        Ok(tape.value(z).clone())
    }

    /// Controller forward FLOPs for one task vector (fully connected layers only).
    pub fn flops(&self) -> u64 {
        controller_flops(self.config.hidden, self.sites, self.channels)
    }
}

pub fn controller_flops(hidden: usize, sites: usize, channels: usize) -> u64 {
    let (d, h, nc) = (TASK_DIM as u64, hidden as u64, (sites * channels) as u64);
    2 * (d * h + h * h + h * nc)
}

trait MapLeaves<T: Scalar> {
    fn map_leaves(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var>;
}

impl<T: Scalar> MapLeaves<T> for Vec<&Tensor<T>> {
    fn map_leaves(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.iter()
            .map(|t| {
                if trainable {
                    tape.param((*t).clone())
                } else {
                    tape.constant((*t).clone())
                }
            })
            .collect()
    }
}

/// Validates task vectors and stacks them into `[m, TASK_DIM]`.
pub fn task_tensor<T: Scalar>(tasks: &[TaskVector]) -> Result<Tensor<T>> {
    if tasks.is_empty() {
        return Err(Error::dim("empty task batch"));
    }
    let mut data = Vec::with_capacity(tasks.len() * TASK_DIM);
    for t in tasks {
        t.validate()?;
        data.extend(t.0.iter().map(|&v| T::from_f64_lossy(v)));
    }
    Tensor::new([tasks.len(), TASK_DIM], data)
}

/// Splits `[m, sites * channels]` logits into one `[m, channels]` var per site.
pub fn site_logits<T: Scalar>(tape: &mut Tape<T>, z: Var, sites: usize, channels: usize) -> Result<Vec<Var>> {
    (0..sites)
        .map(|n| tape.narrow_cols(z, n * channels, channels))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusConfig {
    /// Moving-average rate.
    pub alpha: f64,
    /// Agreement threshold.
    pub gamma: f64,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        ConsensusConfig { alpha: 0.9, gamma: 0.9 }
    }
}

impl ConsensusConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} = {v} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

#[inline]
fn gate(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusState {
    pub sites: usize,
    pub channels: usize,
    pub config: ConsensusConfig,
    /// Task-agnostic logits, `sites * channels`, site-major.
    #[serde(skip)]
    pub za: Vec<f32>,
    pub s: Vec<f64>,
    pub phi: Vec<bool>,
}

/// One consensus update, for logging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusTraceEntry {
    pub step: u64,
    pub eta: Vec<bool>,
    pub s: Vec<f64>,
    pub prefix_len: usize,
}

impl ConsensusState {
    pub fn new(sites: usize, channels: usize, config: ConsensusConfig) -> Self {
        ConsensusState {
            sites,
            channels,
            config,
            za: vec![0.0; sites * channels],
            s: vec![0.0; sites],
            phi: vec![false; sites],
        }
    }

    pub fn za_site(&self, n: usize) -> &[f32] {
        &self.za[n * self.channels..(n + 1) * self.channels]
    }

    /// `z^a <- (1 - alpha) z^a + alpha * mean_m z^s`.
    pub fn update_za(&mut self, zs: &Tensor<f32>) -> Result<()> {
        let (m, width) = zs.dims2()?;
        if width != self.za.len() {
            return Err(Error::dim(format!(
                "logit width {width}, consensus width {}",
                self.za.len()
            )));
        }
        let a = self.config.alpha as f32;
        for (k, za) in self.za.iter_mut().enumerate() {
            let mean = (0..m).map(|r| zs.data()[r * width + k]).sum::<f32>() / m as f32;
            *za = (1.0 - a) * *za + a * mean;
        }
        Ok(())
    }

    /// `s_n <- (1 - alpha) s_n + alpha * eta_n`.
    pub fn update_s(&mut self, eta: &[bool]) -> Result<()> {
        if eta.len() != self.sites {
            return Err(Error::dim(format!(
                "{} agreement flags for {} sites",
                eta.len(),
                self.sites
            )));
        }
        let a = self.config.alpha;
        for (s, &e) in self.s.iter_mut().zip(eta) {
            *s = (1.0 - a) * *s + a * if e { 1.0 } else { 0.0 };
        }
        Ok(())
    }

    pub fn prefix_len(&self) -> usize {
        prefix_len(&self.phi)
    }

    /// Full bookkeeping for one optimisation step: moving average, per-site
    /// agreement against the updated consensus, agreement score, prefix.
    pub fn step(&mut self, step: u64, zs: &Tensor<f32>) -> Result<ConsensusTraceEntry> {
        self.update_za(zs)?;
        let eta: Vec<bool> = (0..self.sites)
            .map(|n| agreement(zs, self.za_site(n), n, self.config.gamma))
            .collect::<Result<_>>()?;
        self.update_s(&eta)?;
        self.phi = compute_phi(&self.s, self.config.gamma);
        Ok(ConsensusTraceEntry {
            step,
            eta,
            s: self.s.clone(),
            prefix_len: self.prefix_len(),
        })
    }
}

/// Whether the batch agrees with the consensus mask at site `n`:
/// `mean_m sum_c g(zs) g(za) > gamma * sum_c g(za)`, strict.
pub fn agreement(zs: &Tensor<f32>, za_site: &[f32], n: usize, gamma: f64) -> Result<bool> {
    let (m, width) = zs.dims2()?;
    let c = za_site.len();
    if (n + 1) * c > width {
        return Err(Error::dim(format!("site {n} outside logits of width {width}")));
    }
    let mut overlap = 0.0f64;
    for r in 0..m {
        let row = &zs.data()[r * width + n * c..r * width + (n + 1) * c];
        overlap += row
            .iter()
            .zip(za_site)
            .map(|(&a, &b)| (gate(a) * gate(b)) as f64)
            .sum::<f64>();
    }
    let lhs = overlap / m as f64;
    let active: f64 = za_site.iter().map(|&v| gate(v) as f64).sum();
    Ok(lhs > gamma * active)
}

/// `phi_n = 1` iff `s_i > gamma` for every `i <= n`.
pub fn compute_phi(s: &[f64], gamma: f64) -> Vec<bool> {
    let mut open = true;
    s.iter()
        .map(|&v| {
            open &= v > gamma;
            open
        })
        .collect()
}

pub fn prefix_len(phi: &[bool]) -> usize {
    phi.iter().take_while(|&&p| p).count()
}

/// Disagreement penalty `sum_n phi_{n-1} sum_c sum_m |g(zs) - g(za)|`, with
/// `phi_{-1} = 1` so the first site is always penalized. `za` is a constant.
pub fn r2_penalty<T: Scalar>(tape: &mut Tape<T>, zs: Var, za: &[f32], phi: &[bool], channels: usize) -> Result<Var> {
    let (m, width) = tape.value(zs).dims2()?;
    if width != za.len() || phi.len() * channels != width {
        return Err(Error::dim(format!(
            "r2 penalty on width {width} with {} consensus logits and {} sites",
            za.len(),
            phi.len()
        )));
    }
    let za_row: Vec<T> = za.iter().map(|&v| T::from_f64_lossy(gate(v) as f64)).collect();
    let weight_row: Vec<T> = (0..width)
        .map(|k| {
            let n = k / channels;
            if n == 0 || phi[n - 1] {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    let repeat = |row: &[T]| -> Result<Tensor<T>> { Tensor::new([m, width], row.repeat(m)) };
    let g = tape.ste_gate(zs)?;
    let target = tape.constant(repeat(&za_row)?);
    let diff = tape.sub(g, target)?;
    let dist = tape.abs(diff)?;
    let w = tape.constant(repeat(&weight_row)?);
    let weighted = tape.mul(dist, w)?;
    tape.sum(weighted)
}
