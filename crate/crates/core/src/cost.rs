//! FLOPs accounting. One multiply-accumulate is 2 FLOPs, elementwise ops are
//! 1 FLOP per output element, biases are ignored.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, SliceMode};
use crate::autodiff::{QuadraticForm, Tape, Var};
use crate::error::{Error, Result};
use crate::supernet::{
    site_block_in, site_block_mid, site_block_out, site_head_out, site_last_in, site_upsample_in, PrefixPlan,
    SuperNetConfig, IMAGE_CHANNELS,
};
use crate::task::TASK_DIM;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Resolution {
    pub width: usize,
    pub height: usize,
}

impl Resolution {
    pub const HD: Resolution = Resolution::new(1280, 720);
    pub const QHD_2K: Resolution = Resolution::new(2048, 1080);
    pub const UHD_4K: Resolution = Resolution::new(3840, 2160);

    pub const fn new(width: usize, height: usize) -> Self {
        Resolution { width, height }
    }

    /// Parses `WxH`.
    pub fn parse(s: &str) -> Result<Self> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::Config(format!("resolution {s:?} is not WxH")))?;
        let num = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("resolution {s:?} is not WxH")))
        };
        Ok(Resolution::new(num(w)?, num(h)?))
    }

    /// Rounds odd sides up to the next multiple of `stride`.
    pub fn padded_to(&self, stride: usize) -> Resolution {
        Resolution::new(
            self.width.div_ceil(stride) * stride,
            self.height.div_ceil(stride) * stride,
        )
    }

    pub fn pixels(&self) -> u64 {
        (self.width * self.height) as u64
    }

    fn check(&self, stride: usize) -> Result<()> {
        if self.width == 0
            || self.height == 0
            || !self.width.is_multiple_of(stride)
            || !self.height.is_multiple_of(stride)
        {
            return Err(Error::range(format!(
                "resolution {self} must be nonzero and divisible by {stride}"
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for Resolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv { kernel: usize },
    FullyConnected,
    Elementwise,
}

pub fn layer_flops(kind: LayerKind, active_in: usize, active_out: usize, h_out: usize, w_out: usize) -> u64 {
    let (ci, co, hw) = (active_in as u64, active_out as u64, (h_out * w_out) as u64);
    match kind {
        LayerKind::Conv { kernel } => 2 * (kernel * kernel) as u64 * ci * co * hw,
        LayerKind::FullyConnected => 2 * ci * co,
        LayerKind::Elementwise => co * hw,
    }
}

/// A channel width entering a cost term.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Width {
    Site(usize),
    Fixed(usize),
}

/// `coef * a * b` FLOPs, attributed to the prefix or the tail.
#[derive(Clone, Copy, Debug)]
struct Term {
    coef: u64,
    a: Width,
    b: Width,
    prefix: bool,
}

/// Every cost term of the network under a prefix of `prefix_len` sites.
fn cost_terms(cfg: &SuperNetConfig, res: Resolution, prefix_len: usize) -> Result<Vec<Term>> {
    cfg.validate()?;
    res.check(cfg.head_stride)?;
    let plan = PrefixPlan::new(cfg, prefix_len)?;
    let s = cfg.head_stride;
    let hw_f = (res.width / s * (res.height / s)) as u64;
    let hw_o = res.pixels();
    let k2 = (cfg.kernel * cfg.kernel) as u64;
    let conv_f = 2 * k2 * hw_f;
    let mut terms = Vec::new();
    let mut push = |coef: u64, a: Width, b: Width, prefix: bool| terms.push(Term { coef, a, b, prefix });

    push(
        conv_f,
        Width::Fixed(IMAGE_CHANNELS),
        Width::Site(site_head_out()),
        plan.head,
    );
    for b in 0..cfg.blocks {
        let (i, m, o) = (site_block_in(b), site_block_mid(b), site_block_out(b));
        let conv1_shared = prefix_len > m;
        let conv2_shared = prefix_len > o;
        push(conv_f, Width::Site(i), Width::Site(m), conv1_shared);
        push(hw_f, Width::Fixed(1), Width::Site(m), conv1_shared);
        push(conv_f, Width::Site(m), Width::Site(o), conv2_shared);
        if !conv2_shared {
            push(2 * TASK_DIM as u64, Width::Fixed(1), Width::Site(o), false);
            push(hw_f, Width::Fixed(1), Width::Site(o), false);
        }
        push(hw_f, Width::Fixed(1), Width::Site(o), conv2_shared);
    }
    let (u, l) = (site_upsample_in(cfg), site_last_in(cfg));
    push(
        conv_f,
        Width::Site(u),
        Width::Fixed(cfg.upsampled_channels()),
        plan.upsample,
    );
    push(hw_o, Width::Fixed(1), Width::Site(l), plan.last);
    push(2 * k2 * hw_o, Width::Site(l), Width::Fixed(IMAGE_CHANNELS), plan.last);
    push(
        2 * (TASK_DIM * IMAGE_CHANNELS) as u64,
        Width::Fixed(1),
        Width::Fixed(1),
        false,
    );
    push(2 * hw_o, Width::Fixed(1), Width::Fixed(IMAGE_CHANNELS), false);
    Ok(terms)
}

fn eval_terms(terms: &[Term], counts: &[usize]) -> (u64, u64) {
    let w = |x: Width| match x {
        Width::Site(n) => counts[n] as u64,
        Width::Fixed(k) => k as u64,
    };
    terms.iter().fold((0, 0), |(p, t), term| {
        let f = term.coef * w(term.a) * w(term.b);
        if term.prefix {
            (p + f, t)
        } else {
            (p, t + f)
        }
    })
}

/// FLOPs split of one architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchFlops {
    pub prefix: u64,
    pub tail: u64,
    pub epsilon: u64,
}

impl ArchFlops {
    pub fn total(&self) -> u64 {
        self.prefix + self.tail + self.epsilon
    }

    pub fn network(&self) -> u64 {
        self.prefix + self.tail
    }
}

/// Prefix/tail split of a fully sliced architecture, plus the controller cost.
pub fn arch_flops(spec: &ArchSpec, res: Resolution, epsilon: u64) -> Result<ArchFlops> {
    arch_flops_with(spec, res, epsilon, SliceMode::Full)
}

pub fn arch_flops_with(spec: &ArchSpec, res: Resolution, epsilon: u64, mode: SliceMode) -> Result<ArchFlops> {
    spec.validate()?;
    let terms = cost_terms(&spec.config, res, spec.shared_prefix_len)?;
    let (prefix, tail) = eval_terms(&terms, &spec.computed_counts(mode));
    Ok(ArchFlops { prefix, tail, epsilon })
}

/// Unpruned super-network cost (no controller).
pub fn supernet_flops(cfg: &SuperNetConfig, res: Resolution) -> Result<u64> {
    Ok(arch_flops(&ArchSpec::full(*cfg), res, 0)?.network())
}

/// `prefix / M + (1/M) sum_m (tail_m + epsilon)`.
pub fn amortized_cost(prefix: u64, tails: &[u64], epsilon: u64, m: usize) -> Result<f64> {
    if m < 1 {
        return Err(Error::range("amortization needs at least one effect"));
    }
    if tails.len() != m {
        return Err(Error::dim(format!("{} tail costs for M = {m}", tails.len())));
    }
    let mf = m as f64;
    Ok(prefix as f64 / mf + tails.iter().map(|&t| (t + epsilon) as f64).sum::<f64>() / mf)
}

/// Cost of one task as a quadratic in the per-site active counts, with the
/// controller cost in the constant and prefix terms divided by `effects`.
pub fn r1_form<T: Scalar>(
    cfg: &SuperNetConfig,
    res: Resolution,
    prefix_len: usize,
    epsilon: u64,
    effects: usize,
) -> Result<QuadraticForm<T>> {
    if effects == 0 {
        return Err(Error::range("r1 surrogate needs at least one effect"));
    }
    let terms = cost_terms(cfg, res, prefix_len)?;
    let mut form = QuadraticForm::new(cfg.num_sites());
    let inv_m = 1.0 / effects as f64;
    let mut constant = epsilon as f64;
    for t in &terms {
        let weight = t.coef as f64 * if t.prefix { inv_m } else { 1.0 };
        match (t.a, t.b) {
            (Width::Fixed(a), Width::Fixed(b)) => constant += weight * (a * b) as f64,
            (Width::Site(i), Width::Fixed(k)) | (Width::Fixed(k), Width::Site(i)) => {
                form.linear[i] = form.linear[i] + T::from_f64_lossy(weight * k as f64);
            }
            (Width::Site(i), Width::Site(j)) => form.pairs.push((i, j, T::from_f64_lossy(weight))),
        }
    }
    form.constant = T::from_f64_lossy(constant);
    Ok(form)
}

/// Differentiable expected cost of the gated super network.
///
/// `zs: [rows, sites * channels]` logits, one row per task. Per task, active
/// counts are sums of straight-through gates, so the value with binary gates
/// equals the cost of the induced architecture. Prefix terms are divided by
/// `effects`, the number of effects sharing one prefix evaluation, and the
/// result is averaged over rows.
pub fn r1_surrogate<T: Scalar>(
    tape: &mut Tape<T>,
    zs: Var,
    cfg: &SuperNetConfig,
    res: Resolution,
    prefix_len: usize,
    epsilon: u64,
    effects: usize,
) -> Result<Var> {
    let (rows, width) = tape.value(zs).dims2()?;
    let n = cfg.num_sites();
    if width != n * cfg.channels {
        return Err(Error::dim(format!(
            "{width} logits for {n} sites of {} channels",
            cfg.channels
        )));
    }
    let form = r1_form(cfg, res, prefix_len, epsilon, effects)?;
    let g = tape.ste_gate(zs)?;
    let counts = tape.block_sums(g, cfg.channels)?;
    let total = tape.row_quadratic(counts, form)?;
    tape.scale(total, T::from_f64_lossy(1.0 / rows as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub device: String,
    pub threads: usize,
    pub effect: usize,
    pub seconds: f64,
}

/// Cost of running one or more effects on one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub resolution: Resolution,
    pub prefix_flops: u64,
    /// Tail cost of each effect, in request order.
    pub tail_flops: Vec<u64>,
    pub epsilon: u64,
    #[serde(default)]
    pub latency: Vec<LatencySample>,
}

impl CostReport {
    pub fn effects(&self) -> usize {
        self.tail_flops.len()
    }

    /// Prefix, first tail and controller.
    pub fn flops_first(&self) -> u64 {
        self.prefix_flops + self.tail_flops.first().copied().unwrap_or(0) + self.epsilon
    }

    /// Mean cost of each effect after the first.
    pub fn flops_subsequent(&self) -> f64 {
        let rest = self.tail_flops.get(1..).unwrap_or(&[]);
        if rest.is_empty() {
            return 0.0;
        }
        rest.iter().map(|&t| (t + self.epsilon) as f64).sum::<f64>() / rest.len() as f64
    }

    /// Amortized cost over the first `m` effects.
    pub fn flops_amortized(&self, m: usize) -> Result<f64> {
        if m > self.tail_flops.len() {
            return Err(Error::range(format!(
                "{m} effects requested, {} recorded",
                self.tail_flops.len()
            )));
        }
        amortized_cost(self.prefix_flops, &self.tail_flops[..m], self.epsilon, m)
    }
}

/// Row of a FLOPs table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub label: String,
    pub gflops: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsTable {
    pub resolutions: Vec<Resolution>,
    pub rows: Vec<FlopsRow>,
}

impl FlopsTable {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<28}", "FLOPs (G)");
        for r in &self.resolutions {
            let _ = write!(out, "{:>14}", r.to_string());
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:<28}", row.label);
            for v in &row.gflops {
                let _ = write!(out, "{v:>14.1}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn gflops(f: f64) -> f64 {
    f / 1e9
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> SuperNetConfig {
        SuperNetConfig {
            blocks: 2,
            channels: 8,
            kernel: 3,
            head_stride: 2,
        }
    }

    #[test]
    fn conv_formula() {
        assert_eq!(layer_flops(LayerKind::Conv { kernel: 3 }, 64, 64, 10, 10), 7_372_800);
        assert_eq!(layer_flops(LayerKind::Conv { kernel: 3 }, 0, 64, 10, 10), 0);
        assert_eq!(layer_flops(LayerKind::FullyConnected, 3, 64, 1, 1), 384);
        assert_eq!(layer_flops(LayerKind::Elementwise, 7, 5, 2, 3), 30);
    }

    #[test]
    fn hand_count_single_block() {
        let cfg = SuperNetConfig {
            blocks: 1,
            channels: 4,
            kernel: 3,
            head_stride: 2,
        };
        let res = Resolution::new(4, 2);
        // Feature 2x1, output 4x2. Convs: head 2*9*3*4*2, conv1/conv2 2*9*4*4*2,
        // upsample 2*9*4*16*2, last 2*9*4*3*8. Elementwise: mid relu 4*2,
        // block fc 2*3*4, scale 4*2, add 4*2, tail relu 4*8, global fc 18,
        // global scale and add 2*3*8.
        let convs = 432 + 2 * 576 + 2304 + 1728;
        let elementwise = 8 + 24 + 8 + 8 + 32 + 18 + 48;
        assert_eq!(supernet_flops(&cfg, res).unwrap(), (convs + elementwise) as u64);
    }

    #[test]
    fn prefix_split_preserves_total() {
        let cfg = toy();
        let res = Resolution::new(16, 16);
        let full = supernet_flops(&cfg, res).unwrap();
        let mut spec = ArchSpec::full(cfg);
        spec.shared_prefix_len = 0;
        let f0 = arch_flops(&spec, res, 0).unwrap();
        assert_eq!(f0.prefix, 0);
        assert_eq!(f0.tail, full);
        spec.shared_prefix_len = cfg.num_sites();
        let all = arch_flops(&spec, res, 0).unwrap();
        // A fully shared network loses the per-block conditioning.
        let block_cond = cfg.blocks as u64 * (2 * 3 * 8 + 8 * 64);
        assert_eq!(all.network() + block_cond, full);
    }

    #[test]
    fn odd_resolution_rejected() {
        assert!(supernet_flops(&toy(), Resolution::new(481, 321)).is_err());
        assert_eq!(Resolution::new(481, 321).padded_to(2), Resolution::new(482, 322));
        assert_eq!(Resolution::parse("1280x720").unwrap(), Resolution::HD);
    }

    #[test]
    fn amortized_arithmetic() {
        let v = amortized_cost(100, &[10; 27], 0, 27).unwrap();
        assert!((v - (100.0 / 27.0 + 10.0)).abs() < 1e-12);
        assert_eq!(amortized_cost(100, &[10], 3, 1).unwrap(), 113.0);
        assert!(amortized_cost(1, &[], 0, 0).is_err());
    }

    #[test]
    fn surrogate_matches_binary_architecture() {
        let cfg = toy();
        let res = Resolution::new(8, 8);
        let n = cfg.num_sites();
        let logits: Vec<f64> = (0..n * 8).map(|i| if (i * 7) % 5 < 3 { 1.0 } else { -1.0 }).collect();
        let mut tape = Tape::<f64>::new();
        let z = tape.param(crate::Tensor::new([1, n * 8], logits.clone()).unwrap());
        for p in [0, 3, n] {
            let r = r1_surrogate(&mut tape, z, &cfg, res, p, 123, 1).unwrap();
            let spec_logits: Vec<f32> = logits.iter().map(|&v| v as f32).collect();
            let spec = ArchSpec::from_logits(cfg, &spec_logits, p, None).unwrap();
            assert_eq!(
                tape.scalar_value(r),
                arch_flops(&spec, res, 123).unwrap().total() as f64
            );
        }
    }
}
