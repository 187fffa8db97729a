//! Conditional residual super network with channel-selection sites.
//!
//! Topology: a strided head convolution, `B` residual blocks whose residual
//! branch is scaled per channel by a linear projection of the task vector, and
//! an upsampler (conv, pixel shuffle, ReLU, conv) whose output is scaled by a
//! second task projection and added to the input image.
//!
//! Channel-selection sites, in topological order:
//!
//! | index        | port                                   |
//! |--------------|----------------------------------------|
//! | `0`          | head conv output                       |
//! | `1 + 3b`     | block `b` conv1 input                  |
//! | `2 + 3b`     | block `b` conv1 output = conv2 input   |
//! | `3 + 3b`     | block `b` conv2 output                 |
//! | `1 + 3B`     | upsampler conv input                   |
//! | `2 + 3B`     | last conv input                        |
//!
//! The head input, the pixel-shuffle input (upsampler conv output) and the
//! last conv output are never gated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::task::TASK_DIM;
use crate::tensor::{Scalar, Tensor};

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperNetConfig {
    pub blocks: usize,
    pub channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_stride")]
    pub head_stride: usize,
}

fn default_kernel() -> usize {
    3
}

fn default_stride() -> usize {
    2
}

impl SuperNetConfig {
    /// Full-size network: 32 blocks of 64 channels.
    pub const FULL: SuperNetConfig = SuperNetConfig {
        blocks: 32,
        channels: 64,
        kernel: 3,
        head_stride: 2,
    };

    /// Laptop-scale default.
    pub const DESK: SuperNetConfig = SuperNetConfig {
        blocks: 4,
        channels: 16,
        kernel: 3,
        head_stride: 2,
    };

    pub fn validate(&self) -> Result<()> {
        if self.blocks < 1 {
            return Err(Error::Config("super network needs at least one block".into()));
        }
        if self.channels < 4 {
            return Err(Error::Config(format!("channels {} < 4", self.channels)));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if self.head_stride < 1 {
            return Err(Error::Config("head stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn num_sites(&self) -> usize {
        3 + 3 * self.blocks
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn upsampled_channels(&self) -> usize {
        self.channels * self.head_stride * self.head_stride
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (c, k2, s2) = (
            self.channels,
            self.kernel * self.kernel,
            self.head_stride * self.head_stride,
        );
        let head = IMAGE_CHANNELS * c * k2 + c;
        let block = 2 * (c * c * k2 + c) + c * TASK_DIM;
        let up = c * s2 * c * k2 + s2 * c;
        let last = c * IMAGE_CHANNELS * k2 + IMAGE_CHANNELS;
        head + self.blocks * block + up + last + IMAGE_CHANNELS * TASK_DIM
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Port {
    In,
    Out,
}

/// Which network location a channel-selection site gates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "block", rename_all = "snake_case")]
pub enum SiteKind {
    HeadOut,
    BlockIn(usize),
    BlockMid(usize),
    BlockOut(usize),
    UpsampleIn,
    LastIn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteDesc {
    pub index: usize,
    pub kind: SiteKind,
    pub layer: String,
    pub port: Port,
    /// Second port sharing this site's channel set, if any.
    pub coupled: Option<(String, Port)>,
    pub width: usize,
}

pub fn site_head_out() -> usize {
    0
}

pub fn site_block_in(b: usize) -> usize {
    1 + 3 * b
}

pub fn site_block_mid(b: usize) -> usize {
    2 + 3 * b
}

pub fn site_block_out(b: usize) -> usize {
    3 + 3 * b
}

pub fn site_upsample_in(cfg: &SuperNetConfig) -> usize {
    1 + 3 * cfg.blocks
}

pub fn site_last_in(cfg: &SuperNetConfig) -> usize {
    2 + 3 * cfg.blocks
}

pub fn cs_sites(cfg: &SuperNetConfig) -> Vec<SiteDesc> {
    let c = cfg.channels;
    let mut sites = vec![SiteDesc {
        index: 0,
        kind: SiteKind::HeadOut,
        layer: "head".into(),
        port: Port::Out,
        coupled: None,
        width: c,
    }];
    for b in 0..cfg.blocks {
        let conv1 = format!("block{b}.conv1");
        let conv2 = format!("block{b}.conv2");
        sites.push(SiteDesc {
            index: site_block_in(b),
            kind: SiteKind::BlockIn(b),
            layer: conv1.clone(),
            port: Port::In,
            coupled: None,
            width: c,
        });
        sites.push(SiteDesc {
            index: site_block_mid(b),
            kind: SiteKind::BlockMid(b),
            layer: conv1,
            port: Port::Out,
            coupled: Some((conv2.clone(), Port::In)),
            width: c,
        });
        sites.push(SiteDesc {
            index: site_block_out(b),
            kind: SiteKind::BlockOut(b),
            layer: conv2,
            port: Port::Out,
            coupled: None,
            width: c,
        });
    }
    sites.push(SiteDesc {
        index: site_upsample_in(cfg),
        kind: SiteKind::UpsampleIn,
        layer: "upsample".into(),
        port: Port::In,
        coupled: None,
        width: c,
    });
    sites.push(SiteDesc {
        index: site_last_in(cfg),
        kind: SiteKind::LastIn,
        layer: "last".into(),
        port: Port::In,
        coupled: None,
        width: c,
    });
    sites
}

/// Which parts of the network a shared prefix of `len` sites covers.
///
/// A convolution is shared when every gated port it touches lies inside the
/// prefix. A block whose second convolution is shared loses its task scaling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixPlan {
    pub len: usize,
    pub head: bool,
    /// Leading blocks computed entirely in the prefix (unscaled).
    pub full_blocks: usize,
    /// Whether conv1 of block `full_blocks` is also shared.
    pub partial_conv1: bool,
    pub upsample: bool,
    pub last: bool,
}

impl PrefixPlan {
    pub fn new(cfg: &SuperNetConfig, len: usize) -> Result<Self> {
        let n = cfg.num_sites();
        if len > n {
            return Err(Error::Config(format!("prefix of {len} sites exceeds {n}")));
        }
        let head = len > site_head_out();
        let mut full_blocks = 0;
        while full_blocks < cfg.blocks && len > site_block_out(full_blocks) {
            full_blocks += 1;
        }
        let partial_conv1 = full_blocks < cfg.blocks && len > site_block_mid(full_blocks);
        Ok(PrefixPlan {
            len,
            head,
            full_blocks,
            partial_conv1,
            upsample: len > site_upsample_in(cfg),
            last: len > site_last_in(cfg),
        })
    }

    pub fn is_empty(&self) -> bool {
        !self.head
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    fn init(cout: usize, cin: usize, k: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let std = gain / ((cin * k * k) as f64).sqrt();
        ConvParams {
            weight: Tensor::randn([cout, cin, k, k], std, rng),
            bias: Tensor::zeros([cout]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T: Scalar = f32> {
    pub conv1: ConvParams<T>,
    pub conv2: ConvParams<T>,
    /// Task projection `[channels, TASK_DIM]`, bias-free.
    pub cond: Tensor<T>,
}

/// Super-network weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperNet<T: Scalar = f32> {
    pub config: SuperNetConfig,
    pub head: ConvParams<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub upsample: ConvParams<T>,
    pub last: ConvParams<T>,
    /// Task projection onto the image residual, `[3, TASK_DIM]`.
    pub global_cond: Tensor<T>,
}

/// Tape handles for every super-network parameter.
#[derive(Clone, Debug)]
pub struct SuperNetVars {
    head: (Var, Var),
    blocks: Vec<[Var; 5]>,
    upsample: (Var, Var),
    last: (Var, Var),
    global_cond: Var,
}

impl SuperNetVars {
    /// Same order as [`SuperNet::params`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.head.0, self.head.1];
        for b in &self.blocks {
            v.extend_from_slice(b);
        }
        v.extend([
            self.upsample.0,
            self.upsample.1,
            self.last.0,
            self.last.1,
            self.global_cond,
        ]);
        v
    }
}

impl<T: Scalar> SuperNet<T> {
    /// Kaiming fan-in normal initialization. Gains: `sqrt(2)` for convolutions
    /// followed by ReLU, 1 for the head, 0.1 for the last convolution of each
    /// residual branch and of the upsampler so the initial output stays near
    /// the input. Task projections start at 1 and biases at 0.
    pub fn new(config: SuperNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, k) = (config.channels, config.kernel);
        let relu_gain = std::f64::consts::SQRT_2;
        let head = ConvParams::init(c, IMAGE_CHANNELS, k, 1.0, &mut rng);
        let blocks = (0..config.blocks)
            .map(|_| BlockParams {
                conv1: ConvParams::init(c, c, k, relu_gain, &mut rng),
                conv2: ConvParams::init(c, c, k, 0.1, &mut rng),
                cond: Tensor::full([c, TASK_DIM], T::one()),
            })
            .collect();
        let upsample = ConvParams::init(config.upsampled_channels(), c, k, relu_gain, &mut rng);
        let last = ConvParams::init(IMAGE_CHANNELS, c, k, 0.1, &mut rng);
        Ok(SuperNet {
            config,
            head,
            blocks,
            upsample,
            last,
            global_cond: Tensor::full([IMAGE_CHANNELS, TASK_DIM], T::one()),
        })
    }

    /// Parameter names in flat order.
    pub fn param_names(&self) -> Vec<String> {
        let mut v = vec!["head.weight".to_string(), "head.bias".to_string()];
        for b in 0..self.blocks.len() {
            for n in ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "cond"] {
                v.push(format!("block{b}.{n}"));
            }
        }
        v.extend(
            [
                "upsample.weight",
                "upsample.bias",
                "last.weight",
                "last.bias",
                "global_cond",
            ]
            .map(String::from),
        );
        v
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.head.weight, &self.head.bias];
        for b in &self.blocks {
            v.extend([&b.conv1.weight, &b.conv1.bias, &b.conv2.weight, &b.conv2.bias, &b.cond]);
        }
        v.extend([
            &self.upsample.weight,
            &self.upsample.bias,
            &self.last.weight,
            &self.last.bias,
            &self.global_cond,
        ]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.head.weight, &mut self.head.bias];
        for b in &mut self.blocks {
            v.extend([
                &mut b.conv1.weight,
                &mut b.conv1.bias,
                &mut b.conv2.weight,
                &mut b.conv2.bias,
                &mut b.cond,
            ]);
        }
        v.extend([
            &mut self.upsample.weight,
            &mut self.upsample.bias,
            &mut self.last.weight,
            &mut self.last.bias,
            &mut self.global_cond,
        ]);
        v
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Records every parameter on the tape (as trainable leaves when `trainable`).
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> SuperNetVars {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let head = (leaf(&self.head.weight), leaf(&self.head.bias));
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                [
                    leaf(&b.conv1.weight),
                    leaf(&b.conv1.bias),
                    leaf(&b.conv2.weight),
                    leaf(&b.conv2.bias),
                    leaf(&b.cond),
                ]
            })
            .collect();
        let upsample = (leaf(&self.upsample.weight), leaf(&self.upsample.bias));
        let last = (leaf(&self.last.weight), leaf(&self.last.bias));
        let global_cond = leaf(&self.global_cond);
        SuperNetVars {
            head,
            blocks,
            upsample,
            last,
            global_cond,
        }
    }

    /// Restores `x: [n, 3, h, w]` under task vectors `t: [n, TASK_DIM]`.
    ///
    /// `gate_logits`, when given, holds one `[n, channels]` logit tensor per
    /// site; each is binarized with the straight-through gate and multiplied
    /// into its port. The first `unscaled_blocks` blocks skip their task scaling.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        vars: &SuperNetVars,
        x: Var,
        t: Var,
        gate_logits: Option<&[Var]>,
        unscaled_blocks: usize,
    ) -> Result<Var> {
        self.forward_probed(tape, vars, x, t, gate_logits, unscaled_blocks, &mut Vec::new())
    }

    /// [`forward`](Self::forward) that also records, per site, the activation
    /// right after that site's gate multiply.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_probed(
        &self,
        tape: &mut Tape<T>,
        vars: &SuperNetVars,
        x: Var,
        t: Var,
        gate_logits: Option<&[Var]>,
        unscaled_blocks: usize,
        probes: &mut Vec<Var>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (_, cin, h, w) = tape.value(x).dims4()?;
        if cin != IMAGE_CHANNELS || h % cfg.head_stride != 0 || w % cfg.head_stride != 0 {
            return Err(Error::dim(format!(
                "input must be [n, 3, h, w] with sides divisible by {}, got {:?}",
                cfg.head_stride,
                tape.value(x).shape()
            )));
        }
        if let Some(g) = gate_logits {
            if g.len() != cfg.num_sites() {
                return Err(Error::dim(format!(
                    "{} gate logit sets for {} sites",
                    g.len(),
                    cfg.num_sites()
                )));
            }
        }
        probes.clear();
        let mut gate = |tape: &mut Tape<T>, v: Var, site: usize| -> Result<Var> {
            let out = match gate_logits {
                Some(g) => {
                    let mask = tape.ste_gate(g[site])?;
                    tape.channel_scale(v, mask)?
                }
                None => v,
            };
            probes.push(out);
            Ok(out)
        };
        let pad = cfg.padding();

        let mut h = tape.conv2d(x, vars.head.0, Some(vars.head.1), cfg.head_stride, pad)?;
        h = gate(tape, h, site_head_out())?;
        for (b, bv) in vars.blocks.iter().enumerate() {
            let mut u = gate(tape, h, site_block_in(b))?;
            u = tape.conv2d(u, bv[0], Some(bv[1]), 1, pad)?;
            u = tape.relu(u)?;
            u = gate(tape, u, site_block_mid(b))?;
            u = tape.conv2d(u, bv[2], Some(bv[3]), 1, pad)?;
            u = gate(tape, u, site_block_out(b))?;
            if b >= unscaled_blocks {
                let s = tape.linear(t, bv[4], None)?;
                u = tape.channel_scale(u, s)?;
            }
            h = tape.add(h, u)?;
        }
        let mut u = gate(tape, h, site_upsample_in(cfg))?;
        u = tape.conv2d(u, vars.upsample.0, Some(vars.upsample.1), 1, pad)?;
        u = tape.pixel_shuffle(u, cfg.head_stride)?;
        u = tape.relu(u)?;
        u = gate(tape, u, site_last_in(cfg))?;
        u = tape.conv2d(u, vars.last.0, Some(vars.last.1), 1, pad)?;
        let s = tape.linear(t, vars.global_cond, None)?;
        u = tape.channel_scale(u, s)?;
        tape.add(x, u)
    }

    /// Convenience inference without gradients.
    pub fn infer(
        &self,
        x: &Tensor<T>,
        tasks: &Tensor<T>,
        gate_logits: Option<&[Tensor<T>]>,
        unscaled_blocks: usize,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let tv = tape.constant(tasks.clone());
        let gates: Option<Vec<Var>> = gate_logits.map(|g| g.iter().map(|l| tape.constant(l.clone())).collect());
        let y = self.forward(&mut tape, &vars, xv, tv, gates.as_deref(), unscaled_blocks)?;
        Ok(tape.value(y).clone())
    }
}
