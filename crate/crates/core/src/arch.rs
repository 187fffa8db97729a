//! Concrete architectures selected from the super network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::supernet::{cs_sites, SiteKind, SuperNetConfig};
use crate::task::TaskVector;

/// How an extracted network realises its channel masks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceMode {
    /// Every site is physically sliced; inactive channels are never computed.
    #[default]
    Full,
    /// Only the middle site of each residual block is sliced; the other
    /// sites multiply by their mask at full width.
    MiddleOnly,
}

/// Per-site channel masks plus the length of the task-agnostic prefix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub config: SuperNetConfig,
    pub shared_prefix_len: usize,
    /// One mask of `channels` entries per site.
    pub masks: Vec<Vec<bool>>,
    /// Task the tail masks were extracted for; `None` for a shared prefix.
    pub task: Option<TaskVector>,
    /// Sites whose all-zero mask was clamped to one channel.
    #[serde(default)]
    pub clamped: Vec<usize>,
}

impl ArchSpec {
    /// Every channel active, no prefix.
    pub fn full(config: SuperNetConfig) -> Self {
        ArchSpec {
            config,
            shared_prefix_len: 0,
            masks: vec![vec![true; config.channels]; config.num_sites()],
            task: None,
            clamped: Vec::new(),
        }
    }

    /// Builds a spec from per-site logits (`> 0` is active), clamping an
    /// all-inactive site to its highest logit.
    pub fn from_logits(
        config: SuperNetConfig,
        logits: &[f32],
        shared_prefix_len: usize,
        task: Option<TaskVector>,
    ) -> Result<Self> {
        let (n, c) = (config.num_sites(), config.channels);
        if logits.len() != n * c {
            return Err(Error::dim(format!(
                "{} logits for {n} sites of {c} channels",
                logits.len()
            )));
        }
        let mut clamped = Vec::new();
        let masks = logits
            .chunks(c)
            .enumerate()
            .map(|(site, row)| {
                let mut mask: Vec<bool> = row.iter().map(|&z| z > 0.0).collect();
                if !mask.iter().any(|&m| m) {
                    let best = row
                        .iter()
                        .enumerate()
                        .fold(0, |b, (i, &z)| if z > row[b] { i } else { b });
                    mask[best] = true;
                    clamped.push(site);
                }
                mask
            })
            .collect();
        if !clamped.is_empty() {
            tracing::info!(sites = ?clamped, "clamped empty channel masks to one channel");
        }
        let spec = ArchSpec {
            config,
            shared_prefix_len,
            masks,
            task,
            clamped,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let n = self.config.num_sites();
        if self.masks.len() != n {
            return Err(Error::Format(format!("{} masks for {n} sites", self.masks.len())));
        }
        if self.shared_prefix_len > n {
            return Err(Error::Format(format!(
                "prefix {} longer than {n} sites",
                self.shared_prefix_len
            )));
        }
        for (i, m) in self.masks.iter().enumerate() {
            if m.len() != self.config.channels {
                return Err(Error::Format(format!("site {i} mask has {} entries", m.len())));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::Format(format!("site {i} has no active channel")));
            }
        }
        Ok(())
    }

    pub fn active_count(&self, site: usize) -> usize {
        self.masks[site].iter().filter(|&&b| b).count()
    }

    pub fn active_indices(&self, site: usize) -> Vec<usize> {
        self.masks[site]
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    /// Active channel count per site as computed under `mode`.
    pub fn computed_counts(&self, mode: SliceMode) -> Vec<usize> {
        cs_sites(&self.config)
            .iter()
            .map(|s| match (mode, s.kind) {
                (SliceMode::MiddleOnly, k) if !matches!(k, SiteKind::BlockMid(_)) => self.config.channels,
                _ => self.active_count(s.index),
            })
            .collect()
    }

    /// Masks as `+1 / -1` logits, usable as gate inputs to the super network.
    pub fn mask_logits(&self) -> Vec<f32> {
        self.masks
            .iter()
            .flat_map(|m| m.iter().map(|&b| if b { 1.0 } else { -1.0 }))
            .collect()
    }

    /// Combines a shared prefix with a task tail: sites below the prefix
    /// length come from `prefix`, the rest from `tail`.
    pub fn compose(prefix: &ArchSpec, tail: &ArchSpec) -> Result<ArchSpec> {
        if prefix.config != tail.config {
            return Err(Error::Config("prefix and tail use different super networks".into()));
        }
        let p = prefix.shared_prefix_len;
        let masks = prefix.masks[..p].iter().chain(&tail.masks[p..]).cloned().collect();
        let mut clamped: Vec<usize> = prefix.clamped.iter().copied().filter(|&s| s < p).collect();
        clamped.extend(tail.clamped.iter().copied().filter(|&s| s >= p));
        Ok(ArchSpec {
            config: prefix.config,
            shared_prefix_len: p,
            masks,
            task: tail.task,
            clamped,
        })
    }
}
