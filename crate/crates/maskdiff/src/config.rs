//! Experiment configuration: a sectioned key-value text format (TOML) with
//! `#` comments, strict unknown-key rejection, named presets, and builders
//! that translate the parsed sections into library types.
//!
//! Parsing is deliberately unforgiving — a misspelled key is a hard error
//! naming the key, not a silently ignored setting.

use crate::codebook::{Codebook, MAX_BINARY_DIM};
use crate::error::{Error, Result};
use crate::measure::{Kernel, LossKind, MeasurementSpec, Operator};
use crate::opt::{LrDecay, OptConfig};
use crate::sampler::{SamplerConfig, SamplerKind};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::world::{PatchDecoder, TemplatePrior};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Mixture prior over token grids. When `templates` is absent, `components`
/// random templates are synthesized from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    /// Explicit templates, each of length grid_h * grid_w with entries < K.
    pub templates: Option<Vec<Vec<usize>>>,
    /// Mixture weights; uniform when absent.
    pub weights: Option<Vec<f64>>,
    /// Per-position corruption rate in [0, (K-1)/K).
    pub rho: f64,
    /// Number of synthesized templates when none are given explicitly.
    pub components: usize,
    /// Seed for template synthesis.
    pub seed: u64,
}

impl Default for PriorSection {
    fn default() -> Self {
        PriorSection { templates: None, weights: None, rho: 0.1, components: 3, seed: 5 }
    }
}

/// Token grid geometry and the fixed decoder that maps embeddings to pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderSection {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Pixels per patch side; the image is (grid_h*patch) x (grid_w*patch).
    pub patch: usize,
    /// Embedding dimension d; the vocabulary is K = 2^d.
    pub dim: usize,
    pub seed: u64,
    /// Squash decoder output through tanh.
    pub tanh: bool,
}

impl Default for DecoderSection {
    fn default() -> Self {
        DecoderSection { grid_h: 4, grid_w: 4, patch: 2, dim: 2, seed: 11, tanh: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub steps: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { kind: ScheduleKind::Cosine, steps: 8 }
    }
}

/// Measurement model: operator, noise level, and loss weights. Set either
/// `op` with its parameter keys or `preset`, never both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasureSection {
    /// One of identity, downsample, gaussian_blur, conv_kernel, pixel_mask,
    /// hdr_clip, feature_cosine.
    pub op: Option<String>,
    /// Named operator preset: paper-sr4, paper-gblur, paper-inpaint70,
    /// paper-hdr.
    pub preset: Option<String>,
    /// downsample: pooling factor.
    pub factor: usize,
    /// gaussian_blur: kernel side (odd) and standard deviation.
    pub kernel_side: usize,
    pub kernel_std: f64,
    /// conv_kernel: path to a plain-text kernel matrix.
    pub kernel_file: Option<String>,
    /// pixel_mask: keep rate and mask seed.
    pub keep_rate: f64,
    pub mask_seed: u64,
    /// hdr_clip: gain and clamp range.
    pub scale: f64,
    pub lo: f64,
    pub hi: f64,
    /// feature_cosine: feature map seed and dimension.
    pub feature_seed: u64,
    pub feature_dim: usize,
    /// Observation noise standard deviation.
    pub sigma: f64,
    /// Data-fit loss: l1, l2, or cosine.
    pub loss: String,
    pub lambda_data: f64,
    /// Perceptual (feature-space) loss weight.
    pub lambda_p: f64,
    /// Prior-preservation weight.
    pub lambda_pp: f64,
    /// Constant added to the total guidance loss.
    pub loss_offset: f64,
}

impl Default for MeasureSection {
    fn default() -> Self {
        MeasureSection {
            op: None,
            preset: None,
            factor: 2,
            kernel_side: 7,
            kernel_std: 1.5,
            kernel_file: None,
            keep_rate: 0.5,
            mask_seed: 0,
            scale: 2.0,
            lo: -1.0,
            hi: 1.0,
            feature_seed: 0,
            feature_dim: 16,
            sigma: 0.05,
            loss: "l2".into(),
            lambda_data: 1.0,
            lambda_p: 0.0,
            lambda_pp: 0.0,
            loss_offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    /// Sampler kinds to run: aps, aps1, standard, prior.
    pub kinds: Vec<String>,
    /// Gumbel exploration scale added to masked confidences (0 = off).
    pub gumbel: f64,
    /// Re-mask anchors with the forward keep probability instead of
    /// freezing them deterministically.
    pub stochastic_reveal: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection { kinds: vec!["aps".into()], gumbel: 0.0, stochastic_reveal: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptSection {
    /// Inner gradient steps per reverse step (M).
    pub inner_steps: usize,
    /// Base learning rate (eta).
    pub lr: f64,
    /// none or harmonic (eta / (1 + m/M)).
    pub lr_decay: String,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Initialize each reverse step from the previous step's solution.
    pub warm_start: bool,
}

impl Default for OptSection {
    fn default() -> Self {
        let d = OptConfig::default();
        OptSection {
            inner_steps: d.inner_steps,
            lr: d.lr,
            lr_decay: "harmonic".into(),
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
            warm_start: d.warm_start,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Number of seeds; run r uses seed base_seed + r.
    pub seeds: usize,
    pub base_seed: u64,
    /// Passes per seed (kept at 1 for paired comparisons).
    pub repeats: usize,
    pub out_dir: String,
    /// Worker threads for the seed fan-out.
    pub parallel: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seeds: 8, base_seed: 0, repeats: 1, out_dir: "out".into(), parallel: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub prior: PriorSection,
    pub decoder: DecoderSection,
    pub schedule: ScheduleSection,
    pub measure: MeasureSection,
    pub sampler: SamplerSection,
    pub opt: OptSection,
    pub run: RunSection,
}

impl ExperimentConfig {
    /// Parse from TOML text. Unknown keys and malformed syntax are hard
    /// errors; the message carries the offending line and key.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Parse(e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("{path}: {e}")))?;
        Self::parse(&text).map_err(|e| Error::Parse(format!("{path}: {e}")))
    }

    /// Serialize back to TOML. Parsing the result reproduces this config.
    pub fn render(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// First 16 hex characters of the SHA-256 of the rendered config. The
    /// output directory and worker count are normalized away first: neither
    /// can change a computed value, so two runs of the same experiment get
    /// the same identity wherever their artifacts land.
    pub fn hash(&self) -> Result<String> {
        let mut identity = self.clone();
        identity.run.out_dir = String::new();
        identity.run.parallel = 1;
        let mut hasher = Sha256::new();
        hasher.update(identity.render()?.as_bytes());
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            hex.push_str(&format!("{byte:02x}"));
        }
        Ok(hex)
    }

    /// Full-experiment preset by name.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy-inpaint" => Ok(Self::toy_inpaint()),
            "paper-defaults" => Ok(Self::paper_defaults()),
            other => Err(Error::invalid(format!(
                "unknown preset `{other}`; available: toy-inpaint, paper-defaults"
            ))),
        }
    }

    /// Small inpainting task: 4x4 token grid over K=4, half the pixels
    /// observed at sigma = 0.05, mixture prior with three templates.
    pub fn toy_inpaint() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.measure.op = Some("pixel_mask".into());
        cfg.measure.keep_rate = 0.5;
        cfg.measure.sigma = 0.05;
        cfg.sampler.kinds = vec!["aps".into(), "aps1".into(), "standard".into()];
        cfg.run.seeds = 50;
        cfg
    }

    /// The reference algorithm settings: T=15, M=100, eta=1.0 with harmonic
    /// decay, lambda_p=1e-3, lambda_pp=0 (a small positive value is also
    /// reasonable; zero is the active default), sigma=0.05.
    pub fn paper_defaults() -> Self {
        let mut cfg = Self::toy_inpaint();
        cfg.schedule.steps = 15;
        cfg.opt.inner_steps = 100;
        cfg.opt.lr = 1.0;
        cfg.measure.lambda_p = 1e-3;
        cfg.measure.lambda_pp = 0.0;
        cfg.measure.sigma = 0.05;
        cfg
    }

    /// Cross-section consistency checks that don't need to touch the disk.
    pub fn validate(&self) -> Result<()> {
        let d = &self.decoder;
        if d.dim == 0 || d.dim > MAX_BINARY_DIM {
            return Err(Error::invalid(format!(
                "decoder.dim must be in 1..={MAX_BINARY_DIM}, got {}",
                d.dim
            )));
        }
        if d.grid_h == 0 || d.grid_w == 0 || d.patch == 0 {
            return Err(Error::invalid("decoder grid and patch sizes must be positive"));
        }
        let tokens = self.tokens();
        let vocab = self.vocab();
        if let Some(templates) = &self.prior.templates {
            if templates.is_empty() {
                return Err(Error::invalid("prior.templates is empty"));
            }
            for (r, t) in templates.iter().enumerate() {
                if t.len() != tokens {
                    return Err(Error::invalid(format!(
                        "prior.templates[{r}] has {} tokens, the grid holds {tokens}",
                        t.len()
                    )));
                }
                if let Some(&bad) = t.iter().find(|&&tok| tok >= vocab) {
                    return Err(Error::invalid(format!(
                        "prior.templates[{r}] uses token {bad}, vocabulary is {vocab}"
                    )));
                }
            }
            if let Some(w) = &self.prior.weights {
                if w.len() != templates.len() {
                    return Err(Error::invalid(format!(
                        "{} prior weights for {} templates",
                        w.len(),
                        templates.len()
                    )));
                }
            }
        } else if self.prior.components == 0 {
            return Err(Error::invalid("prior.components must be positive"));
        }
        if self.measure.op.is_some() && self.measure.preset.is_some() {
            return Err(Error::invalid(
                "set measure.op or measure.preset, not both",
            ));
        }
        if self.run.seeds == 0 || self.run.repeats == 0 {
            return Err(Error::invalid("run.seeds and run.repeats must be positive"));
        }
        if self.run.parallel == 0 {
            return Err(Error::invalid("run.parallel must be positive"));
        }
        if self.sampler.kinds.is_empty() {
            return Err(Error::invalid("sampler.kinds is empty"));
        }
        for kind in &self.sampler.kinds {
            parse_sampler_kind(kind)?;
        }
        parse_loss(&self.measure.loss)?;
        parse_decay(&self.opt.lr_decay)?;
        Ok(())
    }

    /// Tokens in the grid (L).
    pub fn tokens(&self) -> usize {
        self.decoder.grid_h * self.decoder.grid_w
    }

    /// Vocabulary size K = 2^dim.
    pub fn vocab(&self) -> usize {
        1 << self.decoder.dim
    }

    pub fn build_codebook(&self) -> Result<Codebook> {
        Codebook::new(self.decoder.dim)
    }

    pub fn build_decoder(&self) -> Result<PatchDecoder> {
        let d = &self.decoder;
        let mut dec = PatchDecoder::new(d.grid_h, d.grid_w, d.patch, d.dim, d.seed)?;
        dec.tanh_output = d.tanh;
        Ok(dec)
    }

    pub fn build_prior(&self) -> Result<TemplatePrior> {
        let tokens = self.tokens();
        let vocab = self.vocab();
        let templates = match &self.prior.templates {
            Some(t) => t.clone(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.prior.seed);
                (0..self.prior.components)
                    .map(|_| (0..tokens).map(|_| rng.gen_range(0..vocab)).collect())
                    .collect()
            }
        };
        let weights = match &self.prior.weights {
            Some(w) => w.clone(),
            None => vec![1.0 / templates.len() as f64; templates.len()],
        };
        TemplatePrior::new(templates, weights, self.prior.rho, vocab)
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule.kind, self.schedule.steps)
    }

    /// Resolve the operator from explicit keys or a named preset.
    pub fn build_operator(&self) -> Result<Operator> {
        let m = &self.measure;
        if let Some(preset) = &m.preset {
            return match preset.as_str() {
                "paper-sr4" => Ok(Operator::Downsample { factor: 4 }),
                "paper-gblur" => Ok(Operator::GaussianBlur { side: 61, std: 3.0 }),
                "paper-inpaint70" => {
                    Ok(Operator::PixelMask { keep_rate: 0.3, seed: m.mask_seed })
                }
                "paper-hdr" => Ok(Operator::HdrClip { scale: 2.0, lo: -1.0, hi: 1.0 }),
                other => Err(Error::invalid(format!(
                    "unknown measure.preset `{other}`; available: paper-sr4, \
                     paper-gblur, paper-inpaint70, paper-hdr"
                ))),
            };
        }
        let op = m
            .op
            .as_deref()
            .ok_or_else(|| Error::invalid("set measure.op or measure.preset"))?;
        match op {
            "identity" => Ok(Operator::Identity),
            "downsample" => Ok(Operator::Downsample { factor: m.factor }),
            "gaussian_blur" => {
                Ok(Operator::GaussianBlur { side: m.kernel_side, std: m.kernel_std })
            }
            "conv_kernel" => {
                let path = m.kernel_file.as_deref().ok_or_else(|| {
                    Error::invalid("conv_kernel needs measure.kernel_file")
                })?;
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Parse(format!("{path}: {e}")))?;
                Ok(Operator::ConvKernel { kernel: Kernel::parse(&text)? })
            }
            "pixel_mask" => {
                Ok(Operator::PixelMask { keep_rate: m.keep_rate, seed: m.mask_seed })
            }
            "hdr_clip" => Ok(Operator::HdrClip { scale: m.scale, lo: m.lo, hi: m.hi }),
            "feature_cosine" => {
                Ok(Operator::FeatureCosine { seed: m.feature_seed, dim: m.feature_dim })
            }
            other => Err(Error::invalid(format!(
                "unknown measure.op `{other}`; available: identity, downsample, \
                 gaussian_blur, conv_kernel, pixel_mask, hdr_clip, feature_cosine"
            ))),
        }
    }

    /// Measurement spec without an observation; the harness attaches y.
    pub fn build_measurement(&self) -> Result<MeasurementSpec> {
        let m = &self.measure;
        let mut spec =
            MeasurementSpec::new(self.build_operator()?, m.sigma, parse_loss(&m.loss)?)?;
        spec.lambda_data = m.lambda_data;
        spec.lambda_perceptual = m.lambda_p;
        spec.perceptual_seed = m.feature_seed;
        spec.perceptual_dim = m.feature_dim;
        spec.lambda_prior = m.lambda_pp;
        spec.loss_offset = m.loss_offset;
        Ok(spec)
    }

    pub fn build_opt(&self) -> Result<OptConfig> {
        let o = &self.opt;
        let cfg = OptConfig {
            inner_steps: o.inner_steps,
            lr: o.lr,
            lr_decay: parse_decay(&o.lr_decay)?,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            warm_start: o.warm_start,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// One sampler configuration per requested kind, sharing the schedule,
    /// optimizer settings, and exploration flags.
    pub fn build_sampler_configs(&self) -> Result<Vec<SamplerConfig>> {
        let schedule = self.build_schedule()?;
        let opt = self.build_opt()?;
        self.sampler
            .kinds
            .iter()
            .map(|name| {
                let mut cfg = SamplerConfig::new(parse_sampler_kind(name)?, schedule);
                cfg.opt = opt.clone();
                cfg.gumbel = self.sampler.gumbel;
                cfg.stochastic_reveal = self.sampler.stochastic_reveal;
                Ok(cfg)
            })
            .collect()
    }
}

pub fn parse_sampler_kind(name: &str) -> Result<SamplerKind> {
    match name {
        "aps" => Ok(SamplerKind::Aps),
        "aps1" => Ok(SamplerKind::Aps1),
        "standard" => Ok(SamplerKind::Standard),
        "prior" => Ok(SamplerKind::Prior),
        other => Err(Error::invalid(format!(
            "unknown sampler kind `{other}`; available: aps, aps1, standard, prior"
        ))),
    }
}

fn parse_loss(name: &str) -> Result<LossKind> {
    match name {
        "l1" => Ok(LossKind::L1),
        "l2" => Ok(LossKind::L2),
        "cosine" => Ok(LossKind::Cosine),
        other => Err(Error::invalid(format!(
            "unknown measure.loss `{other}`; available: l1, l2, cosine"
        ))),
    }
}

fn parse_decay(name: &str) -> Result<LrDecay> {
    match name {
        "none" => Ok(LrDecay::None),
        "harmonic" => Ok(LrDecay::Harmonic),
        other => Err(Error::invalid(format!(
            "unknown opt.lr_decay `{other}`; available: none, harmonic"
        ))),
    }
}
