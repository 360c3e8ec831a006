//! Model configuration, parameter layout and initialization.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::parse_value;
use crate::error::{Error, Result};
use crate::params::{Param, ParamStore};
use crate::seed;

pub const CONTENT_ENCODER: &str = "content_encoder";
pub const ARTIFACT_ENCODER: &str = "artifact_encoder";
pub const ENCODERS: [&str; 2] = [CONTENT_ENCODER, ARTIFACT_ENCODER];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub num_filters: usize,
    pub num_res_blocks: usize,
    pub channels: usize,
    pub recurrent_dim: usize,
    /// Size `d` of the content and shared artifact embeddings.
    pub embed_dim: usize,
    /// Size `d_a` of `a_s` and `a_g`.
    pub artifact_proj_dim: usize,
    /// Number of domains including "real".
    pub num_domains: usize,
    pub input_len: usize,
    pub sample_rate: u32,
    /// Length of the band-pass impulse responses (odd).
    pub sinc_kernel: usize,
    pub frontend_stride: usize,
    pub frontend_pool: usize,
}

impl BackboneConfig {
    /// Trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            num_filters: 20,
            num_res_blocks: 4,
            channels: 32,
            recurrent_dim: 64,
            embed_dim: 64,
            artifact_proj_dim: 32,
            num_domains: 7,
            input_len: 16_384,
            sample_rate: 16_000,
            sinc_kernel: 129,
            frontend_stride: 4,
            frontend_pool: 16,
        }
    }

    /// Small enough for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            num_filters: 4,
            num_res_blocks: 2,
            channels: 4,
            recurrent_dim: 8,
            embed_dim: 8,
            artifact_proj_dim: 8,
            num_domains: 3,
            input_len: 256,
            sample_rate: 16_000,
            sinc_kernel: 17,
            frontend_stride: 2,
            frontend_pool: 2,
        }
    }

    /// RawNet2-sized trunk for real corpora at 65536 samples.
    pub fn large() -> Self {
        Self {
            num_filters: 20,
            num_res_blocks: 6,
            channels: 128,
            recurrent_dim: 1024,
            embed_dim: 1024,
            artifact_proj_dim: 256,
            num_domains: 7,
            input_len: 65_536,
            sample_rate: 16_000,
            sinc_kernel: 1025,
            frontend_stride: 1,
            frontend_pool: 3,
        }
    }

    /// Frames after the frontend.
    pub fn frontend_len(&self) -> usize {
        self.input_len / self.frontend_stride / self.frontend_pool
    }

    /// Recurrent steps after the residual blocks.
    pub fn sequence_len(&self) -> usize {
        if self.num_res_blocks >= usize::BITS as usize {
            return 0;
        }
        self.frontend_len() >> self.num_res_blocks
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_filters", self.num_filters),
            ("num_res_blocks", self.num_res_blocks),
            ("channels", self.channels),
            ("recurrent_dim", self.recurrent_dim),
            ("embed_dim", self.embed_dim),
            ("artifact_proj_dim", self.artifact_proj_dim),
            ("input_len", self.input_len),
            ("sinc_kernel", self.sinc_kernel),
            ("frontend_stride", self.frontend_stride),
            ("frontend_pool", self.frontend_pool),
            ("sample_rate", self.sample_rate as usize),
        ];
        if let Some((k, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::bad_value(&format!("model.{k}"), "must be at least 1"));
        }
        if self.num_domains < 2 {
            return Err(Error::bad_value("model.num_domains", "must be at least 2"));
        }
        if self.sinc_kernel.is_multiple_of(2) {
            return Err(Error::bad_value("model.sinc_kernel", "must be odd"));
        }
        if self.sequence_len() == 0 {
            return Err(Error::Validation(format!(
                "input_len {} is too short for the frontend and {} residual blocks",
                self.input_len, self.num_res_blocks
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    /// Upsampling points: one right after AdaIN, then one per final
    /// convolution + upsample stage. At least 2.
    pub num_upsample_stages: usize,
    pub output_len: usize,
}

impl DecoderConfig {
    pub fn desk() -> Self {
        Self {
            grid_h: 8,
            grid_w: 8,
            channels: 16,
            num_upsample_stages: 2,
            output_len: 16_384,
        }
    }

    pub fn tiny() -> Self {
        Self {
            grid_h: 2,
            grid_w: 2,
            channels: 4,
            num_upsample_stages: 2,
            output_len: 256,
        }
    }

    pub fn large() -> Self {
        Self {
            grid_h: 16,
            grid_w: 16,
            channels: 16,
            num_upsample_stages: 3,
            output_len: 65_536,
        }
    }

    /// Channels of the content grid that AdaIN normalizes.
    pub fn content_channels(&self, embed_dim: usize) -> usize {
        embed_dim / (self.grid_h * self.grid_w)
    }

    /// Spatial size of the final map.
    pub fn output_hw(&self) -> (usize, usize) {
        let f = 1usize << self.num_upsample_stages.min(usize::BITS as usize - 1);
        (self.grid_h.saturating_mul(f), self.grid_w.saturating_mul(f))
    }

    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.grid_h == 0 || self.grid_w == 0 || self.channels == 0 || self.output_len == 0 {
            return Err(Error::Validation("decoder dimensions must be at least 1".into()));
        }
        if !(2..=16).contains(&self.num_upsample_stages) {
            return Err(Error::bad_value(
                "decoder.num_upsample_stages",
                "must be between 2 and 16",
            ));
        }
        let cells = self.grid_h.saturating_mul(self.grid_w);
        if !embed_dim.is_multiple_of(cells) {
            return Err(Error::Validation(format!(
                "embed_dim {embed_dim} cannot be reshaped onto a {}x{} grid",
                self.grid_h, self.grid_w
            )));
        }
        let (h, w) = self.output_hw();
        let produced = self.channels.saturating_mul(h).saturating_mul(w);
        if produced < self.output_len {
            return Err(Error::Validation(format!(
                "decoder produces {produced} samples, fewer than output_len {}",
                self.output_len
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            backbone: BackboneConfig::desk(),
            decoder: DecoderConfig::desk(),
        }
    }

    pub fn tiny() -> Self {
        Self {
            backbone: BackboneConfig::tiny(),
            decoder: DecoderConfig::tiny(),
        }
    }

    pub fn large() -> Self {
        Self {
            backbone: BackboneConfig::large(),
            decoder: DecoderConfig::large(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            "large" => Ok(Self::large()),
            _ => Err(Error::bad_value(
                "model.preset",
                format!("`{name}` is not one of desk, tiny, large"),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.decoder.validate(self.backbone.embed_dim)
    }

    /// Applies a `model.*` or `decoder.*` key. Returns `Ok(false)` for keys
    /// outside those namespaces.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let b = &mut self.backbone;
        let d = &mut self.decoder;
        match key {
            "model.num_filters" => b.num_filters = parse_value(key, value)?,
            "model.num_res_blocks" => b.num_res_blocks = parse_value(key, value)?,
            "model.channels" => b.channels = parse_value(key, value)?,
            "model.recurrent_dim" => b.recurrent_dim = parse_value(key, value)?,
            "model.embed_dim" => b.embed_dim = parse_value(key, value)?,
            "model.artifact_proj_dim" => b.artifact_proj_dim = parse_value(key, value)?,
            "model.input_len" => {
                b.input_len = parse_value(key, value)?;
                d.output_len = b.input_len;
            }
            "model.sample_rate" => b.sample_rate = parse_value(key, value)?,
            "model.sinc_kernel" => b.sinc_kernel = parse_value(key, value)?,
            "model.frontend_stride" => b.frontend_stride = parse_value(key, value)?,
            "model.frontend_pool" => b.frontend_pool = parse_value(key, value)?,
            "decoder.grid_h" => d.grid_h = parse_value(key, value)?,
            "decoder.grid_w" => d.grid_w = parse_value(key, value)?,
            "decoder.channels" => d.channels = parse_value(key, value)?,
            "decoder.num_upsample_stages" => d.num_upsample_stages = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let b = &self.backbone;
        let d = &self.decoder;
        [
            ("model.num_filters", b.num_filters),
            ("model.num_res_blocks", b.num_res_blocks),
            ("model.channels", b.channels),
            ("model.recurrent_dim", b.recurrent_dim),
            ("model.embed_dim", b.embed_dim),
            ("model.artifact_proj_dim", b.artifact_proj_dim),
            ("model.input_len", b.input_len),
            ("model.sample_rate", b.sample_rate as usize),
            ("model.sinc_kernel", b.sinc_kernel),
            ("model.frontend_stride", b.frontend_stride),
            ("model.frontend_pool", b.frontend_pool),
            ("decoder.grid_h", d.grid_h),
            ("decoder.grid_w", d.grid_w),
            ("decoder.channels", d.channels),
            ("decoder.num_upsample_stages", d.num_upsample_stages),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }
}

/// Both encoders, projection heads, classifier heads, critic projections and
/// decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamStore,
}

enum Init {
    /// Normal with variance `2 / fan_in`.
    Kaiming(usize),
    Zeros,
    Ones,
    /// `start + i·step`.
    Linear {
        start: f64,
        step: f64,
    },
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
    trainable: bool,
}

fn spec(name: String, shape: &[usize], init: Init) -> Spec {
    Spec {
        name,
        shape: shape.to_vec(),
        init,
        trainable: true,
    }
}

fn linear(out: &mut Vec<Spec>, prefix: &str, inp: usize, outp: usize) {
    out.push(spec(format!("{prefix}/weight"), &[outp, inp], Init::Kaiming(inp)));
    out.push(spec(format!("{prefix}/bias"), &[outp], Init::Zeros));
}

fn encoder_specs(out: &mut Vec<Spec>, enc: &str, cfg: &BackboneConfig) {
    let f = cfg.num_filters;
    let nyquist = cfg.sample_rate as f64 / 2.0;
    let width = nyquist / f as f64;
    for (name, start, step) in [("low_hz", 0.0, width), ("band_hz", width, 0.0)] {
        out.push(Spec {
            name: format!("{enc}/frontend/{name}"),
            shape: vec![f],
            init: Init::Linear { start, step },
            trainable: false,
        });
    }
    let c = cfg.channels;
    for i in 0..cfg.num_res_blocks {
        let inp = if i == 0 { f } else { c };
        let p = format!("{enc}/resblock{i}");
        out.push(spec(format!("{p}/conv1/weight"), &[c, inp, 3], Init::Kaiming(inp * 3)));
        out.push(spec(format!("{p}/conv1/bias"), &[c], Init::Zeros));
        out.push(spec(format!("{p}/norm/gamma"), &[c], Init::Ones));
        out.push(spec(format!("{p}/norm/beta"), &[c], Init::Zeros));
        out.push(spec(format!("{p}/conv2/weight"), &[c, c, 3], Init::Kaiming(c * 3)));
        out.push(spec(format!("{p}/conv2/bias"), &[c], Init::Zeros));
        if inp != c {
            out.push(spec(format!("{p}/skip/weight"), &[c, inp, 1], Init::Kaiming(inp)));
        }
        linear(out, &format!("{p}/fms"), c, c);
    }
    let h = cfg.recurrent_dim;
    out.push(spec(format!("{enc}/gru/w_ih"), &[3 * h, c], Init::Kaiming(c)));
    out.push(spec(format!("{enc}/gru/b_ih"), &[3 * h], Init::Zeros));
    out.push(spec(format!("{enc}/gru/w_hh"), &[3 * h, h], Init::Kaiming(h)));
    out.push(spec(format!("{enc}/gru/b_hh"), &[3 * h], Init::Zeros));
    linear(out, &format!("{enc}/fc"), h, cfg.embed_dim);
}

fn model_specs(cfg: &ModelConfig) -> Vec<Spec> {
    let b = &cfg.backbone;
    let d = &cfg.decoder;
    let mut out = Vec::new();
    for enc in ENCODERS {
        encoder_specs(&mut out, enc, b);
    }
    let da = b.artifact_proj_dim;
    linear(&mut out, "proj_s", b.embed_dim, da);
    linear(&mut out, "proj_g", b.embed_dim, da);
    linear(&mut out, "head_domain", da, b.num_domains);
    linear(&mut out, "head_auth", da, 2);
    linear(&mut out, "mi_critic/content", b.embed_dim, da);
    linear(&mut out, "mi_critic/artifact", da, da);

    let cc = d.content_channels(b.embed_dim);
    let ch = d.channels;
    linear(&mut out, "decoder/style", 2 * da, 2 * cc);
    let mut conv = |name: String, inp: usize| {
        out.push(spec(format!("{name}/weight"), &[ch, inp, 3, 3], Init::Kaiming(inp * 9)));
        out.push(spec(format!("{name}/bias"), &[ch], Init::Zeros));
    };
    conv("decoder/conv_in".into(), cc);
    conv("decoder/conv_a".into(), ch);
    conv("decoder/conv_b".into(), ch);
    for k in 0..d.num_upsample_stages - 1 {
        conv(format!("decoder/conv_out{k}"), ch);
    }
    out
}

/// Kaiming-normal weights (fan-in, rectifier gain), zero biases, unit norm
/// scales. Every parameter draws from its own stream seeded by
/// `(seed, name)`, so the two encoders get independent values.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let mut params = ParamStore::new();
    for s in model_specs(config) {
        let n: usize = s.shape.iter().product();
        let data = match s.init {
            Init::Kaiming(fan_in) => {
                let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let mut rng = seed::rng(&[seed, seed::hash_str(&s.name)]);
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Linear { start, step } => (0..n).map(|i| start + i as f64 * step).collect(),
        };
        params.insert(
            s.name,
            Param {
                shape: s.shape,
                data,
                trainable: s.trainable,
            },
        );
    }
    Ok(ModelState {
        config: config.clone(),
        params,
    })
}

impl ModelState {
    /// Checks that the parameter set matches the layout implied by the
    /// config, e.g. after loading a checkpoint.
    pub fn check_layout(&self) -> Result<()> {
        self.config.validate()?;
        let specs = model_specs(&self.config);
        if specs.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter arrays, found {}",
                specs.len(),
                self.params.len()
            )));
        }
        for s in specs {
            match self.params.get(&s.name) {
                Some(p) if p.shape == s.shape && p.data.len() == s.shape.iter().product::<usize>() => {}
                Some(p) => {
                    return Err(Error::Shape(format!(
                        "`{}` has shape {:?}, expected {:?}",
                        s.name, p.shape, s.shape
                    )))
                }
                None => return Err(Error::Shape(format!("missing parameter `{}`", s.name))),
            }
        }
        Ok(())
    }
}
