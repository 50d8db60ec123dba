//! Run configuration: one TOML file shared by every subcommand.
//!
//! The schema is strict. Unknown keys are rejected, and fields that change
//! the physics (box size, interaction parameters, cutoff radius, spectral
//! grid) have no defaults, so a config either states them or the command
//! refuses to run.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use lrcnet::dataset::KernelKind;
use lrcnet::domain::Domain;
use lrcnet::net::DescriptorConfig;
use lrcnet::refdata::{KernelSpec, SpectralOverride};
use lrcnet::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for dataset generation and benchmark clouds.
    #[serde(default)]
    pub seed: u64,
    pub domain: DomainSection,
    pub kernel: Option<KernelSection>,
    pub sampler: Option<SamplerSection>,
    pub descriptor: Option<DescriptorSection>,
    pub nufft: Option<NufftSection>,
    pub train: Option<TrainConfig>,
    /// Second-phase schedule for two-scale runs; defaults to `[train]`.
    pub train_b: Option<TrainConfig>,
    pub paths: Option<PathsSection>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub d: usize,
    pub length: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKindSection {
    Exponential,
    ScreenedCoulomb,
    Mixed,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub kind: KernelKindSection,
    pub mu1: f64,
    pub mu2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Optional spectral-table resolutions for screened components.
    pub spectral_grid1: Option<usize>,
    pub spectral_grid2: Option<usize>,
    pub eps_smooth: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub n_particles: usize,
    pub n_sample: usize,
    pub delta_min: f64,
}

fn default_n_max_neigh() -> usize {
    64
}
fn default_m_sr() -> usize {
    64
}
fn default_m_lr() -> usize {
    32
}
fn default_k_chnls() -> usize {
    2
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorSection {
    /// Interaction radius; no default.
    pub r_cut: f64,
    #[serde(default = "default_n_max_neigh")]
    pub n_max_neigh: usize,
    #[serde(default = "default_m_sr")]
    pub m_sr: usize,
    #[serde(default = "default_m_lr")]
    pub m_lr: usize,
    #[serde(default = "default_k_chnls")]
    pub k_chnls: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NufftSection {
    /// Spectral grid points per axis.
    pub l_fft: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// Primary dataset file.
    pub data: PathBuf,
    /// Large-box dataset for two-scale runs.
    pub data_large: Option<PathBuf>,
}

impl RunConfig {
    /// Parses and cross-validates a config file. Returns the config along
    /// with the raw text for manifest echoing.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .with_context(|| format!("cannot parse config {}", path.display()))?;
        cfg.validate()?;
        Ok((cfg, text))
    }

    fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.domain.d) {
            bail!("d must be 1, 2, or 3 (got {})", self.domain.d);
        }
        self.domain()?;
        if let Some(k) = &self.kernel {
            self.kernel_spec_of(k)?.validate()?;
        }
        if let Some(s) = &self.sampler {
            if s.n_particles == 0 || s.n_sample == 0 {
                bail!("sampler.n_particles and sampler.n_sample must be positive");
            }
            if !(s.delta_min.is_finite() && s.delta_min >= 0.0) {
                bail!("sampler.delta_min must be finite and non-negative");
            }
        }
        if let Some(desc) = &self.descriptor {
            self.descriptor_config_of(desc).validate()?;
        }
        if let Some(t) = &self.train {
            t.validate()?;
        }
        if let Some(t) = &self.train_b {
            t.validate()?;
        }
        Ok(())
    }

    pub fn domain(&self) -> Result<Domain> {
        Ok(Domain::new(self.domain.d, self.domain.length)?)
    }

    fn kernel_spec_of(&self, k: &KernelSection) -> Result<KernelSpec> {
        let kind = match k.kind {
            KernelKindSection::Exponential => KernelKind::Exponential,
            KernelKindSection::ScreenedCoulomb => KernelKind::ScreenedCoulomb,
            KernelKindSection::Mixed => KernelKind::Mixed,
        };
        Ok(KernelSpec {
            kind,
            mu1: k.mu1,
            mu2: k.mu2,
            alpha1: k.alpha1,
            alpha2: k.alpha2,
        })
    }

    pub fn kernel_spec(&self) -> Result<KernelSpec> {
        let k = self
            .kernel
            .as_ref()
            .context("config is missing the [kernel] section")?;
        self.kernel_spec_of(k)
    }

    pub fn spectral_overrides(&self) -> [SpectralOverride; 2] {
        match &self.kernel {
            Some(k) => [
                k.spectral_grid1.map(|g| (g, k.eps_smooth)),
                k.spectral_grid2.map(|g| (g, k.eps_smooth)),
            ],
            None => [None, None],
        }
    }

    pub fn sampler(&self) -> Result<&SamplerSection> {
        self.sampler
            .as_ref()
            .context("config is missing the [sampler] section")
    }

    fn descriptor_config_of(&self, d: &DescriptorSection) -> DescriptorConfig {
        DescriptorConfig {
            r_cut: d.r_cut,
            n_max_neigh: d.n_max_neigh,
            m_sr: d.m_sr,
            m_lr: d.m_lr,
            k_chnls: d.k_chnls,
        }
    }

    pub fn descriptor_config(&self) -> Result<DescriptorConfig> {
        let d = self
            .descriptor
            .as_ref()
            .context("config is missing the [descriptor] section (r_cut is required)")?;
        Ok(self.descriptor_config_of(d))
    }

    pub fn l_fft(&self) -> Result<usize> {
        Ok(self
            .nufft
            .as_ref()
            .context("config is missing the [nufft] section (l_fft is required)")?
            .l_fft)
    }

    pub fn train_config(&self) -> Result<&TrainConfig> {
        self.train
            .as_ref()
            .context("config is missing the [train] section")
    }

    pub fn paths(&self) -> Result<&PathsSection> {
        self.paths
            .as_ref()
            .context("config is missing the [paths] section")
    }
}
