//! Pruned networks sliced out of a trained super network, and the
//! prefix-reuse engine that serves several effects from one shared prefix.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, SliceMode};
use crate::checkpoint::{self, BlobReader};
use crate::controller::{task_tensor, ConsensusState, Controller};
use crate::cost::{arch_flops_with, ArchFlops, CostReport, Resolution};
use crate::error::{Error, Result};
use crate::kernels;
use crate::supernet::{
    cs_sites, BlockParams, ConvParams, PrefixPlan, SiteKind, SuperNet, SuperNetConfig, IMAGE_CHANNELS,
};
use crate::task::TaskVector;
use crate::tensor::Tensor;
use crate::trainer::{CheckpointKind, SearchState};

/// How one site is realised: the channels kept, and for sites that stay at
/// full width an explicit 0/1 multiplier.
#[derive(Clone, Debug)]
struct SiteReal {
    idx: Vec<usize>,
    mask: Option<Vec<f32>>,
}

impl SiteReal {
    fn new(spec: &ArchSpec, site: usize, sliced: bool) -> Self {
        if sliced {
            SiteReal {
                idx: spec.active_indices(site),
                mask: None,
            }
        } else {
            SiteReal {
                idx: (0..spec.config.channels).collect(),
                mask: Some(spec.masks[site].iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()),
            }
        }
    }

    fn apply(&self, x: Tensor) -> Result<Tensor> {
        match &self.mask {
            None => Ok(x),
            Some(m) => {
                let n = x.shape()[0];
                let scale = Tensor::new([n, m.len()], m.repeat(n))?;
                kernels::channel_scale(&x, &scale)
            }
        }
    }
}

fn slice_conv(w: &Tensor, out_idx: &[usize], in_idx: &[usize]) -> Result<Tensor> {
    let [cout, cin, kh, kw] = *w.shape() else {
        return Err(Error::dim(format!("conv weight must be rank 4, got {:?}", w.shape())));
    };
    let kk = kh * kw;
    let mut data = Vec::with_capacity(out_idx.len() * in_idx.len() * kk);
    for &o in out_idx {
        for &i in in_idx {
            if o >= cout || i >= cin {
                return Err(Error::dim("slice index out of range"));
            }
            let off = (o * cin + i) * kk;
            data.extend_from_slice(&w.data()[off..off + kk]);
        }
    }
    Tensor::new([out_idx.len(), in_idx.len(), kh, kw], data)
}

fn slice_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let cols = x.numel() / x.shape()[0].max(1);
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &r in idx {
        data.extend_from_slice(&x.data()[r * cols..(r + 1) * cols]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data)
}

fn slice_conv_params(p: &ConvParams, out_idx: &[usize], in_idx: &[usize]) -> Result<ConvParams> {
    Ok(ConvParams {
        weight: slice_conv(&p.weight, out_idx, in_idx)?,
        bias: slice_rows(&p.bias, out_idx)?,
    })
}

/// Task rows repeated once per image.
fn task_rows(t: &TaskVector, n: usize) -> Result<Tensor> {
    task_tensor(&vec![*t; n])
}

/// Output of the shared prefix for one input batch.
#[derive(Clone, Debug)]
pub struct PrefixFeature {
    input: Tensor,
    prefix_len: usize,
    stage: Stage,
}

#[derive(Clone, Debug)]
enum Stage {
    Input,
    Stream { h: Tensor, mid: Option<Tensor> },
    Upsampled(Tensor),
    Last(Tensor),
}

impl PrefixFeature {
    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }
}

/// A physically sliced network: weights hold only the computed channels.
#[derive(Clone, Debug)]
pub struct PrunedNet {
    spec: ArchSpec,
    mode: SliceMode,
    plan: PrefixPlan,
    epsilon: u64,
    sites: Vec<SiteReal>,
    head: ConvParams,
    blocks: Vec<BlockParams>,
    upsample: ConvParams,
    last: ConvParams,
    global_cond: Tensor,
}

#[derive(Serialize, Deserialize)]
struct PrunedHeader {
    kind: CheckpointKind,
    spec: ArchSpec,
    mode: SliceMode,
    epsilon: u64,
}

impl PrunedNet {
    /// Slices `net` down to `spec`.
    pub fn from_supernet(net: &SuperNet, spec: ArchSpec, mode: SliceMode, epsilon: u64) -> Result<Self> {
        if spec.config != net.config {
            return Err(Error::Config("architecture does not match the super network".into()));
        }
        spec.validate()?;
        let sites = Self::realise(&spec, mode);
        let cfg = spec.config;
        let rgb: Vec<usize> = (0..IMAGE_CHANNELS).collect();
        let all_up: Vec<usize> = (0..cfg.upsampled_channels()).collect();
        let head = slice_conv_params(&net.head, &sites[0].idx, &rgb)?;
        let blocks = net
            .blocks
            .iter()
            .enumerate()
            .map(|(b, p)| {
                let (i, m, o) = (&sites[1 + 3 * b], &sites[2 + 3 * b], &sites[3 + 3 * b]);
                Ok(BlockParams {
                    conv1: slice_conv_params(&p.conv1, &m.idx, &i.idx)?,
                    conv2: slice_conv_params(&p.conv2, &o.idx, &m.idx)?,
                    cond: slice_rows(&p.cond, &o.idx)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = cfg.num_sites();
        let upsample = slice_conv_params(&net.upsample, &all_up, &sites[n - 2].idx)?;
        let last = slice_conv_params(&net.last, &rgb, &sites[n - 1].idx)?;
        Self::assemble(
            spec,
            mode,
            epsilon,
            head,
            blocks,
            upsample,
            last,
            net.global_cond.clone(),
        )
    }

    fn realise(spec: &ArchSpec, mode: SliceMode) -> Vec<SiteReal> {
        cs_sites(&spec.config)
            .iter()
            .map(|s| {
                let sliced = mode == SliceMode::Full || matches!(s.kind, SiteKind::BlockMid(_));
                SiteReal::new(spec, s.index, sliced)
            })
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        spec: ArchSpec,
        mode: SliceMode,
        epsilon: u64,
        head: ConvParams,
        blocks: Vec<BlockParams>,
        upsample: ConvParams,
        last: ConvParams,
        global_cond: Tensor,
    ) -> Result<Self> {
        let plan = PrefixPlan::new(&spec.config, spec.shared_prefix_len)?;
        let sites = Self::realise(&spec, mode);
        Ok(PrunedNet {
            spec,
            mode,
            plan,
            epsilon,
            sites,
            head,
            blocks,
            upsample,
            last,
            global_cond,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn mode(&self) -> SliceMode {
        self.mode
    }

    pub fn config(&self) -> &SuperNetConfig {
        &self.spec.config
    }

    pub fn plan(&self) -> PrefixPlan {
        self.plan
    }

    /// Controller cost charged per effect.
    pub fn epsilon(&self) -> u64 {
        self.epsilon
    }

    pub fn num_params(&self) -> usize {
        self.blobs().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn flops(&self, res: Resolution) -> Result<ArchFlops> {
        arch_flops_with(
            &self.spec,
            res.padded_to(self.spec.config.head_stride),
            self.epsilon,
            self.mode,
        )
    }

    fn conv(&self, x: &Tensor, p: &ConvParams, stride: usize) -> Result<Tensor> {
        kernels::conv2d(x, &p.weight, Some(&p.bias), stride, self.spec.config.padding())
    }

    fn head_forward(&self, x: &Tensor) -> Result<Tensor> {
        let cfg = &self.spec.config;
        let (n, c, h, w) = x.dims4()?;
        if c != IMAGE_CHANNELS || h % cfg.head_stride != 0 || w % cfg.head_stride != 0 {
            return Err(Error::dim(format!(
                "input must be [n, 3, h, w] with sides divisible by {}, got {:?}",
                cfg.head_stride,
                x.shape()
            )));
        }
        let y = self.sites[0].apply(self.conv(x, &self.head, cfg.head_stride)?)?;
        let mut stream = Tensor::zeros([n, cfg.channels, h / cfg.head_stride, w / cfg.head_stride]);
        kernels::scatter_add_channels(&mut stream, &y, &self.sites[0].idx)?;
        Ok(stream)
    }

    fn block_conv1(&self, h: &Tensor, b: usize) -> Result<Tensor> {
        let site = &self.sites[1 + 3 * b];
        let u = site.apply(kernels::gather_channels(h, &site.idx)?)?;
        Ok(kernels::relu(&self.conv(&u, &self.blocks[b].conv1, 1)?))
    }

    fn block_conv2(&self, h: &mut Tensor, mid: &Tensor, b: usize, t: Option<&Tensor>) -> Result<()> {
        let site = &self.sites[3 + 3 * b];
        let mut u = site.apply(self.conv(mid, &self.blocks[b].conv2, 1)?)?;
        if let Some(t) = t {
            let s = kernels::linear(t, &self.blocks[b].cond, None)?;
            u = kernels::channel_scale(&u, &s)?;
        }
        kernels::scatter_add_channels(h, &u, &site.idx)
    }

    fn upsample_forward(&self, h: &Tensor) -> Result<Tensor> {
        let site = &self.sites[self.sites.len() - 2];
        let u = site.apply(kernels::gather_channels(h, &site.idx)?)?;
        self.conv(&u, &self.upsample, 1)
    }

    fn last_forward(&self, u: &Tensor) -> Result<Tensor> {
        let site = &self.sites[self.sites.len() - 1];
        let u = kernels::relu(&kernels::pixel_shuffle(u, self.spec.config.head_stride)?);
        let u = site.apply(kernels::gather_channels(&u, &site.idx)?)?;
        self.conv(&u, &self.last, 1)
    }

    fn global(&self, y: &Tensor, x: &Tensor, t: &Tensor) -> Result<Tensor> {
        let s = kernels::linear(t, &self.global_cond, None)?;
        kernels::add(x, &kernels::channel_scale(y, &s)?)
    }

    /// Runs every layer inside the shared prefix. Prefix blocks are unscaled.
    pub fn run_prefix(&self, x: &Tensor) -> Result<PrefixFeature> {
        let plan = self.plan;
        let stage = if !plan.head {
            // Still validates the input geometry.
            x.dims4()?;
            Stage::Input
        } else {
            let mut h = self.head_forward(x)?;
            for b in 0..plan.full_blocks {
                let m = self.block_conv1(&h, b)?;
                self.block_conv2(&mut h, &m, b, None)?;
            }
            if plan.upsample {
                let u = self.upsample_forward(&h)?;
                if plan.last {
                    Stage::Last(self.last_forward(&u)?)
                } else {
                    Stage::Upsampled(u)
                }
            } else {
                let mid = if plan.partial_conv1 {
                    Some(self.block_conv1(&h, plan.full_blocks)?)
                } else {
                    None
                };
                Stage::Stream { h, mid }
            }
        };
        Ok(PrefixFeature {
            input: x.clone(),
            prefix_len: plan.len,
            stage,
        })
    }

    /// Finishes the network from a prefix feature for task `t`.
    pub fn run_tail(&self, feature: &PrefixFeature, t: &TaskVector) -> Result<Tensor> {
        if feature.prefix_len != self.plan.len {
            return Err(Error::Config(format!(
                "feature from a {}-site prefix fed to a tail expecting {}",
                feature.prefix_len, self.plan.len
            )));
        }
        let x = &feature.input;
        let tt = task_rows(t, x.shape()[0])?;
        let u = match &feature.stage {
            Stage::Last(y) => return self.global(y, x, &tt),
            Stage::Upsampled(u) => u.clone(),
            Stage::Input | Stage::Stream { .. } => {
                let (mut h, start, mut mid) = match &feature.stage {
                    Stage::Stream { h, mid } => (h.clone(), self.plan.full_blocks, mid.clone()),
                    _ => (self.head_forward(x)?, 0, None),
                };
                for b in start..self.blocks.len() {
                    let m = match mid.take() {
                        Some(m) => m,
                        None => self.block_conv1(&h, b)?,
                    };
                    let scale = (b >= self.plan.full_blocks).then_some(&tt);
                    self.block_conv2(&mut h, &m, b, scale)?;
                }
                self.upsample_forward(&h)?
            }
        };
        let y = self.last_forward(&u)?;
        self.global(&y, x, &tt)
    }

    /// End-to-end forward of `x: [n, 3, h, w]`, sides divisible by the head stride.
    pub fn forward(&self, x: &Tensor, t: &TaskVector) -> Result<Tensor> {
        self.run_tail(&self.run_prefix(x)?, t)
    }

    /// Forward on any image size: edge-replicates up to the head stride and crops back.
    pub fn forward_padded(&self, x: &Tensor, t: &TaskVector) -> Result<Tensor> {
        let s = self.spec.config.head_stride;
        let (padded, h, w) = pad_to_multiple(x, s)?;
        crop(&self.forward(&padded, t)?, h, w)
    }

    fn blobs(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("head.weight".into(), &self.head.weight),
            ("head.bias".into(), &self.head.bias),
        ];
        for (b, p) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{b}.conv1.weight"), &p.conv1.weight));
            out.push((format!("blocks.{b}.conv1.bias"), &p.conv1.bias));
            out.push((format!("blocks.{b}.conv2.weight"), &p.conv2.weight));
            out.push((format!("blocks.{b}.conv2.bias"), &p.conv2.bias));
            out.push((format!("blocks.{b}.cond"), &p.cond));
        }
        out.push(("upsample.weight".into(), &self.upsample.weight));
        out.push(("upsample.bias".into(), &self.upsample.bias));
        out.push(("last.weight".into(), &self.last.weight));
        out.push(("last.bias".into(), &self.last.bias));
        out.push(("global_cond".into(), &self.global_cond));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = PrunedHeader {
            kind: CheckpointKind::Pruned,
            spec: self.spec.clone(),
            mode: self.mode,
            epsilon: self.epsilon,
        };
        checkpoint::save(path, &header, &self.blobs())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, blobs): (PrunedHeader, _) = checkpoint::load(path)?;
        if header.kind != CheckpointKind::Pruned {
            return Err(Error::Format(format!("{} is not a pruned network", path.display())));
        }
        header.spec.validate()?;
        // Shapes are checked against the ones slicing would produce.
        let template = SuperNet::<f32>::new(header.spec.config, 0)?;
        let expect = PrunedNet::from_supernet(&template, header.spec.clone(), header.mode, header.epsilon)?;
        let mut reader = BlobReader::new(blobs);
        let head = read_conv(&mut reader, "head", &expect.head)?;
        let mut blocks = Vec::with_capacity(expect.blocks.len());
        for (b, p) in expect.blocks.iter().enumerate() {
            blocks.push(BlockParams {
                conv1: read_conv(&mut reader, &format!("blocks.{b}.conv1"), &p.conv1)?,
                conv2: read_conv(&mut reader, &format!("blocks.{b}.conv2"), &p.conv2)?,
                cond: reader.next(&format!("blocks.{b}.cond"), p.cond.shape())?,
            });
        }
        let upsample = read_conv(&mut reader, "upsample", &expect.upsample)?;
        let last = read_conv(&mut reader, "last", &expect.last)?;
        let global_cond = reader.next("global_cond", expect.global_cond.shape())?;
        reader.finish()?;
        Self::assemble(
            header.spec,
            header.mode,
            header.epsilon,
            head,
            blocks,
            upsample,
            last,
            global_cond,
        )
    }
}

fn read_conv(reader: &mut BlobReader, prefix: &str, like: &ConvParams) -> Result<ConvParams> {
    Ok(ConvParams {
        weight: reader.next(&format!("{prefix}.weight"), like.weight.shape())?,
        bias: reader.next(&format!("{prefix}.bias"), like.bias.shape())?,
    })
}

/// Edge-replicates `x` so both sides are multiples of `s`. Returns the
/// padded tensor and the original height and width.
pub fn pad_to_multiple(x: &Tensor, s: usize) -> Result<(Tensor, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    let (ph, pw) = (h.div_ceil(s) * s, w.div_ceil(s) * s);
    if (ph, pw) == (h, w) {
        return Ok((x.clone(), h, w));
    }
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * ph * pw);
    for plane in 0..n * c {
        for i in 0..ph {
            let row = plane * h * w + i.min(h - 1) * w;
            out.extend((0..pw).map(|j| src[row + j.min(w - 1)]));
        }
    }
    Ok((Tensor::new([n, c, ph, pw], out)?, h, w))
}

/// Top-left `h x w` window of every plane.
pub fn crop(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c, xh, xw) = x.dims4()?;
    if h > xh || w > xw {
        return Err(Error::dim(format!("cannot crop {xh}x{xw} to {h}x{w}")));
    }
    if (h, w) == (xh, xw) {
        return Ok(x.clone());
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in 0..n * c {
        for i in 0..h {
            let row = plane * xh * xw + i * xw;
            out.extend_from_slice(&x.data()[row..row + w]);
        }
    }
    Tensor::new([n, c, h, w], out)
}

/// Architecture the controller selects for `t` with no shared prefix.
pub fn task_spec(controller: &Controller, config: SuperNetConfig, t: &TaskVector) -> Result<ArchSpec> {
    let logits = controller.predict(std::slice::from_ref(t))?;
    ArchSpec::from_logits(config, logits.data(), 0, Some(*t))
}

/// Shared-prefix architecture from the consensus logits. Masks past the
/// prefix are the consensus masks too; only the prefix part is meaningful.
pub fn shared_spec(consensus: &ConsensusState, config: SuperNetConfig) -> Result<ArchSpec> {
    ArchSpec::from_logits(config, &consensus.za, consensus.prefix_len(), None)
}

/// Task-specific network for `t` (no prefix sharing).
pub fn extract_taskspecific(state: &SearchState, t: &TaskVector, mode: SliceMode) -> Result<PrunedNet> {
    let spec = task_spec(&state.controller, state.net.config, t)?;
    PrunedNet::from_supernet(&state.net, spec, mode, state.epsilon())
}

/// Shared prefix network, or `None` when no site has reached consensus.
pub fn extract_shared(state: &SearchState, mode: SliceMode) -> Result<Option<PrunedNet>> {
    if state.consensus.prefix_len() == 0 {
        return Ok(None);
    }
    let spec = shared_spec(&state.consensus, state.net.config)?;
    PrunedNet::from_supernet(&state.net, spec, mode, state.epsilon()).map(Some)
}

/// Images and cost of a multi-effect request.
#[derive(Clone, Debug)]
pub struct ReuseOutput {
    pub images: Vec<Tensor>,
    pub report: CostReport,
}

/// An input image with its shared-prefix output already computed.
#[derive(Clone, Debug)]
pub struct PreparedInput {
    feature: PrefixFeature,
    pub height: usize,
    pub width: usize,
    /// Size actually computed, after padding.
    pub resolution: Resolution,
}

/// A searched model ready for interactive use: one shared prefix plus
/// lazily extracted, cached task tails.
pub struct ModulationModel {
    net: SuperNet,
    controller: Controller,
    mode: SliceMode,
    prefix_spec: ArchSpec,
    prefix: PrunedNet,
    tails: Mutex<HashMap<[i32; 3], Arc<PrunedNet>>>,
}

impl std::fmt::Debug for ModulationModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModulationModel")
            .field("config", &self.net.config)
            .field("mode", &self.mode)
            .field("prefix_len", &self.prefix_len())
            .finish_non_exhaustive()
    }
}

impl ModulationModel {
    /// Uses the consensus prefix when the search applied prefix pressure
    /// (`lambda2 > 0`); a task-specific search gets an empty prefix.
    pub fn from_search(state: &SearchState, mode: SliceMode) -> Result<Self> {
        let cfg = state.net.config;
        let mut prefix_spec = shared_spec(&state.consensus, cfg)?;
        if state.config.lambda2 <= 0.0 {
            prefix_spec.shared_prefix_len = 0;
        }
        Self::new(state.net.clone(), state.controller.clone(), prefix_spec, mode)
    }

    pub fn new(net: SuperNet, controller: Controller, prefix_spec: ArchSpec, mode: SliceMode) -> Result<Self> {
        let eps = controller.flops();
        let prefix = PrunedNet::from_supernet(&net, prefix_spec.clone(), mode, eps)?;
        Ok(ModulationModel {
            net,
            controller,
            mode,
            prefix_spec,
            prefix,
            tails: Mutex::new(HashMap::new()),
        })
    }

    pub fn load(path: &Path, mode: SliceMode) -> Result<Self> {
        Self::from_search(&SearchState::load(path)?, mode)
    }

    pub fn config(&self) -> &SuperNetConfig {
        &self.net.config
    }

    pub fn mode(&self) -> SliceMode {
        self.mode
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_spec.shared_prefix_len
    }

    pub fn prefix_spec(&self) -> &ArchSpec {
        &self.prefix_spec
    }

    pub fn supernet(&self) -> &SuperNet {
        &self.net
    }

    pub fn epsilon(&self) -> u64 {
        self.controller.flops()
    }

    /// Full architecture used for `t`: shared prefix plus its task tail.
    pub fn tail_spec(&self, t: &TaskVector) -> Result<ArchSpec> {
        let tail = task_spec(&self.controller, self.net.config, t)?;
        ArchSpec::compose(&self.prefix_spec, &tail)
    }

    /// Cached tail network for `t`, extracted on first use.
    pub fn tail(&self, t: &TaskVector) -> Result<Arc<PrunedNet>> {
        t.validate()?;
        let key = t.cache_key();
        if let Some(hit) = self.tails.lock().expect("tail cache poisoned").get(&key) {
            return Ok(hit.clone());
        }
        let net = Arc::new(PrunedNet::from_supernet(
            &self.net,
            self.tail_spec(t)?,
            self.mode,
            self.epsilon(),
        )?);
        let mut cache = self.tails.lock().expect("tail cache poisoned");
        Ok(cache.entry(key).or_insert(net).clone())
    }

    pub fn cached_tails(&self) -> usize {
        self.tails.lock().expect("tail cache poisoned").len()
    }

    /// Prefix output for `x`, reusable across effects.
    pub fn prefix_feature(&self, x: &Tensor) -> Result<PrefixFeature> {
        self.prefix.run_prefix(x)
    }

    /// Pads `x` to the head stride and runs the shared prefix once.
    pub fn prepare(&self, x: &Tensor) -> Result<PreparedInput> {
        let (padded, height, width) = pad_to_multiple(x, self.net.config.head_stride)?;
        let resolution = Resolution::new(padded.shape()[3], padded.shape()[2]);
        Ok(PreparedInput {
            feature: self.prefix.run_prefix(&padded)?,
            height,
            width,
            resolution,
        })
    }

    /// One effect from a prepared input, with its FLOPs split.
    pub fn apply(&self, input: &PreparedInput, t: &TaskVector) -> Result<(Tensor, ArchFlops)> {
        let tail = self.tail(t)?;
        let y = crop(&tail.run_tail(&input.feature, t)?, input.height, input.width)?;
        Ok((y, tail.flops(input.resolution)?))
    }

    /// Applies every task in `tasks` to `x`, evaluating the prefix once.
    /// Any image size is accepted; odd sides are edge-padded internally.
    pub fn run(&self, x: &Tensor, tasks: &[TaskVector]) -> Result<ReuseOutput> {
        if tasks.is_empty() {
            return Err(Error::range("no task vectors given"));
        }
        let input = self.prepare(x)?;
        let mut images = Vec::with_capacity(tasks.len());
        let mut tail_flops = Vec::with_capacity(tasks.len());
        let mut prefix_flops = 0;
        for t in tasks {
            let (y, f) = self.apply(&input, t)?;
            images.push(y);
            prefix_flops = f.prefix;
            tail_flops.push(f.tail);
        }
        Ok(ReuseOutput {
            images,
            report: CostReport {
                resolution: Resolution::new(input.width, input.height),
                prefix_flops,
                tail_flops,
                epsilon: self.epsilon(),
                latency: Vec::new(),
            },
        })
    }

    /// FLOPs of applying `tasks` to one `res` image, without running anything.
    /// Matches the report of [`ModulationModel::run`].
    pub fn cost_report(&self, res: Resolution, tasks: &[TaskVector]) -> Result<CostReport> {
        if tasks.is_empty() {
            return Err(Error::range("no task vectors given"));
        }
        let padded = res.padded_to(self.net.config.head_stride);
        let mut prefix_flops = 0;
        let mut tail_flops = Vec::with_capacity(tasks.len());
        for t in tasks {
            t.validate()?;
            let f = arch_flops_with(&self.tail_spec(t)?, padded, self.epsilon(), self.mode)?;
            prefix_flops = f.prefix;
            tail_flops.push(f.tail);
        }
        Ok(CostReport {
            resolution: res,
            prefix_flops,
            tail_flops,
            epsilon: self.epsilon(),
            latency: Vec::new(),
        })
    }

    /// End-to-end recomputation of one effect, prefix included.
    pub fn run_single(&self, x: &Tensor, t: &TaskVector) -> Result<Tensor> {
        self.tail(t)?.forward_padded(x, t)
    }

    /// Super network with the extracted masks applied as gates; reference
    /// for the sliced computation.
    pub fn masked_reference(&self, x: &Tensor, t: &TaskVector) -> Result<Tensor> {
        let spec = self.tail_spec(t)?;
        masked_forward(&self.net, &spec, x, t)
    }
}

/// Gated super-network forward under `spec`, with prefix blocks unscaled.
pub fn masked_forward(net: &SuperNet, spec: &ArchSpec, x: &Tensor, t: &TaskVector) -> Result<Tensor> {
    let n = x.shape()[0];
    let c = spec.config.channels;
    let logits = spec.mask_logits();
    let gates = logits
        .chunks(c)
        .map(|row| Tensor::new([n, c], row.repeat(n)))
        .collect::<Result<Vec<_>>>()?;
    let plan = PrefixPlan::new(&spec.config, spec.shared_prefix_len)?;
    net.infer(x, &task_rows(t, n)?, Some(&gates), plan.full_blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::ControllerConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> SuperNetConfig {
        SuperNetConfig {
            blocks: 2,
            channels: 6,
            kernel: 3,
            head_stride: 2,
        }
    }

    fn random_spec(cfg: SuperNetConfig, prefix: usize, rng: &mut ChaCha8Rng) -> ArchSpec {
        let logits: Vec<f32> = (0..cfg.num_sites() * cfg.channels)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let mut spec = ArchSpec::from_logits(cfg, &logits, 0, None).unwrap();
        spec.shared_prefix_len = prefix;
        spec
    }

    fn perturbed_net(cfg: SuperNetConfig, seed: u64) -> SuperNet {
        let mut net = SuperNet::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Non-trivial conditioning so scaled and unscaled blocks differ.
        for b in &mut net.blocks {
            b.cond
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-1.0..1.5));
        }
        net.last.weight.data_mut().iter_mut().for_each(|v| *v *= 10.0);
        net
    }

    #[test]
    fn sliced_matches_masked_for_every_prefix_length() {
        let cfg = toy();
        let net = perturbed_net(cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn([2, 3, 8, 6], |i| ((i * 37 % 101) as f32) / 101.0);
        let t = TaskVector::new([0.3, 0.8, 0.1]).unwrap();
        for p in 0..=cfg.num_sites() {
            let spec = random_spec(cfg, p, &mut rng);
            let reference = masked_forward(&net, &spec, &x, &t).unwrap();
            for mode in [SliceMode::Full, SliceMode::MiddleOnly] {
                let pruned = PrunedNet::from_supernet(&net, spec.clone(), mode, 0).unwrap();
                let y = pruned.forward(&x, &t).unwrap();
                let d = y.max_abs_diff(&reference).unwrap();
                assert!(d < 1e-5, "prefix {p} {mode:?}: diff {d}");
            }
        }
    }

    #[test]
    fn full_slice_has_fewer_params_than_middle_only() {
        let cfg = toy();
        let net = perturbed_net(cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = random_spec(cfg, 0, &mut rng);
        let full = PrunedNet::from_supernet(&net, spec.clone(), SliceMode::Full, 0).unwrap();
        let mid = PrunedNet::from_supernet(&net, spec, SliceMode::MiddleOnly, 0).unwrap();
        assert!(full.num_params() <= mid.num_params());
        assert!(mid.num_params() <= net.num_params());
        let res = Resolution::new(16, 16);
        assert!(full.flops(res).unwrap().total() <= mid.flops(res).unwrap().total());
    }

    #[test]
    fn pruned_save_load_round_trip() {
        let cfg = toy();
        let net = perturbed_net(cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = random_spec(cfg, 4, &mut rng);
        let pruned = PrunedNet::from_supernet(&net, spec, SliceMode::Full, 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        pruned.save(&path).unwrap();
        assert_eq!(crate::trainer::checkpoint_kind(&path).unwrap(), CheckpointKind::Pruned);
        let back = PrunedNet::load(&path).unwrap();
        assert_eq!(back.spec(), pruned.spec());
        assert_eq!(back.epsilon(), 77);
        let x = Tensor::from_fn([1, 3, 6, 6], |i| (i as f32 * 0.1).sin());
        let t = TaskVector::new([1.0, 0.0, 0.5]).unwrap();
        assert_eq!(back.forward(&x, &t).unwrap(), pruned.forward(&x, &t).unwrap());
    }

    #[test]
    fn static_cost_report_matches_run() {
        let cfg = toy();
        let net = perturbed_net(cfg, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ctrl = Controller::new(ControllerConfig::default(), cfg.num_sites(), cfg.channels, 3).unwrap();
        let model = ModulationModel::new(net, ctrl, random_spec(cfg, 5, &mut rng), SliceMode::Full).unwrap();
        let tasks = [TaskVector([0.1, 0.9, 0.4]), TaskVector([1.0, 0.0, 0.0])];
        let x = Tensor::from_fn([1, 3, 7, 9], |i| (i as f32 * 0.3).cos());
        let ran = model.run(&x, &tasks).unwrap().report;
        assert_eq!(model.cost_report(Resolution::new(9, 7), &tasks).unwrap(), ran);
        assert!(model.cost_report(Resolution::new(9, 7), &[]).is_err());
    }

    #[test]
    fn pad_and_crop_invert() {
        let x = Tensor::from_fn([1, 2, 3, 5], |i| i as f32);
        let (p, h, w) = pad_to_multiple(&x, 2).unwrap();
        assert_eq!(p.shape(), &[1, 2, 4, 6]);
        // Last row and column replicate the edge.
        assert_eq!(p.data()[5], p.data()[4]);
        assert_eq!(&p.data()[18..24], &p.data()[12..18]);
        assert_eq!(crop(&p, h, w).unwrap(), x);
    }
}
