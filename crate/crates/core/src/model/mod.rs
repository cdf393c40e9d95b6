//! Desk-scale latent diffusion pipeline: prompt embedding, a UNet diffuser
//! iterated for a fixed number of steps, and a patch decoder.
//!
//! Block topology follows the Stable Diffusion UNet: every down level but the
//! deepest is a cross-attention block (ResNets interleaved with transformers,
//! then a stride-2 down-sampler); the deepest down and up levels are
//! ResNet-only; the mid block is ResNet, transformer, ResNet; each up block
//! receives the same-level down output through a skip concatenation.

pub mod ops;
mod text;
mod unet;

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{CheckpointBuilder, CheckpointError, CheckpointStore, CheckpointView};
use crate::half16::encode_half;
use crate::image::Image;
use crate::rng;
use crate::selector::UnetTopology;

pub use ops::{attention, ffn, AttentionWeights, FeatureMap, Tokens};
pub use text::{embed_prompt, tokenize, TextEmbedding};
pub use unet::{tensor_specs, ActivationTrace, ForwardOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffuserConfig {
    /// Latent side length in pixels.
    pub latent_size: usize,
    /// Output image side length; a multiple of `latent_size`.
    pub image_size: usize,
    pub latent_channels: usize,
    /// Feature channels per UNet level; its length is the number of levels.
    pub channels: Vec<usize>,
    pub transformers_per_down_block: usize,
    pub transformers_per_up_block: usize,
    pub transformers_per_mid_block: usize,
    pub heads: usize,
    /// Text embedding width.
    pub embed_width: usize,
    /// Text tokens per prompt.
    pub text_length: usize,
    pub ff_mult: usize,
    pub norm_groups: usize,
    pub time_dim: usize,
    /// Denoising iterations.
    pub steps: usize,
    pub seed: u64,
}

impl Default for DiffuserConfig {
    fn default() -> Self {
        DiffuserConfig {
            latent_size: 16,
            image_size: 64,
            latent_channels: 4,
            channels: vec![16, 32, 32],
            transformers_per_down_block: 2,
            transformers_per_up_block: 3,
            transformers_per_mid_block: 1,
            heads: 2,
            embed_width: 32,
            text_length: 8,
            ff_mult: 4,
            norm_groups: 4,
            time_dim: 16,
            steps: 10,
            seed: 0,
        }
    }
}

impl DiffuserConfig {
    pub fn num_levels(&self) -> usize {
        self.channels.len()
    }

    pub fn topology(&self) -> UnetTopology {
        UnetTopology {
            num_levels: self.num_levels(),
            transformers_per_down_block: self.transformers_per_down_block,
            transformers_per_up_block: self.transformers_per_up_block,
            transformers_per_mid_block: self.transformers_per_mid_block,
        }
    }

    /// Side length of the decoder patch produced by one latent pixel.
    pub fn patch_size(&self) -> usize {
        self.image_size / self.latent_size
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::InvalidConfig(m));
        let positive = [
            ("latent_size", self.latent_size),
            ("image_size", self.image_size),
            ("latent_channels", self.latent_channels),
            ("transformers_per_down_block", self.transformers_per_down_block),
            ("transformers_per_up_block", self.transformers_per_up_block),
            ("transformers_per_mid_block", self.transformers_per_mid_block),
            ("heads", self.heads),
            ("embed_width", self.embed_width),
            ("text_length", self.text_length),
            ("ff_mult", self.ff_mult),
            ("norm_groups", self.norm_groups),
            ("time_dim", self.time_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if self.num_levels() < 2 {
            return fail("channels must list at least two levels".into());
        }
        if self.latent_size >= self.image_size || !self.image_size.is_multiple_of(self.latent_size) {
            return fail(format!(
                "image_size {} must be a larger multiple of latent_size {}",
                self.image_size, self.latent_size
            ));
        }
        let reduction = 1 << (self.num_levels() - 1);
        if !self.latent_size.is_multiple_of(reduction) {
            return fail(format!(
                "latent_size {} is not divisible by {reduction} for {} levels",
                self.latent_size,
                self.num_levels()
            ));
        }
        if !self.time_dim.is_multiple_of(2) {
            return fail("time_dim must be even".into());
        }
        for (level, &c) in self.channels.iter().enumerate() {
            if c == 0 || c % self.norm_groups != 0 {
                return fail(format!(
                    "channels[{level}] = {c} must be a positive multiple of norm_groups {}",
                    self.norm_groups
                ));
            }
            if c % self.heads != 0 {
                return fail(format!("channels[{level}] = {c} is not divisible by {} heads", self.heads));
            }
        }
        Ok(())
    }
}

/// Decoded f32 weights keyed by tensor name.
#[derive(Debug, Clone, Default)]
pub struct ModelWeights {
    tensors: HashMap<String, Arc<[f32]>>,
}

impl ModelWeights {
    pub fn get(&self, name: &str) -> Result<&[f32], ModelError> {
        self.tensors
            .get(name)
            .map(|t| &t[..])
            .ok_or_else(|| ModelError::MissingTensor(name.to_string()))
    }

    fn decode(view: &CheckpointView, name: &str) -> Result<Arc<[f32]>, ModelError> {
        Ok(view.tensor_f16(name)?.into_iter().map(|h| h.to_f32()).collect())
    }

    fn load(view: &CheckpointView, specs: &[(String, Vec<usize>)]) -> Result<Self, ModelError> {
        let store = view.base();
        let mut tensors = HashMap::with_capacity(specs.len());
        for (name, shape) in specs {
            let entry = store
                .entry(name)
                .map_err(|_| ModelError::MissingTensor(name.clone()))?;
            if &entry.shape != shape {
                return Err(ModelError::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: entry.shape.clone(),
                });
            }
            tensors.insert(name.clone(), Self::decode(view, name)?);
        }
        Ok(ModelWeights { tensors })
    }

    /// Multiplies every weight by zero for tensors accepted by `filter`.
    pub fn zeroed(&self, filter: impl Fn(&str) -> bool) -> ModelWeights {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let v = if filter(k) { vec![0.0; v.len()].into() } else { v.clone() };
                (k.clone(), v)
            })
            .collect();
        ModelWeights { tensors }
    }
}

/// Latent `[latent_channels, N_L, N_L]` plus whether every value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentImage {
    pub map: FeatureMap,
}

impl LatentImage {
    pub fn new(map: FeatureMap) -> Self {
        LatentImage { map }
    }

    pub fn is_finite(&self) -> bool {
        self.map.is_finite()
    }
}

/// Linearly decaying step fractions for the fixed-coefficient scheduler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub first: f32,
    pub last: f32,
}

impl Default for LinearSchedule {
    fn default() -> Self {
        LinearSchedule { first: 0.2, last: 0.05 }
    }
}

impl LinearSchedule {
    pub fn fraction(&self, step: usize, steps: usize) -> f32 {
        if steps <= 1 {
            return self.first;
        }
        self.first + (self.last - self.first) * step as f32 / (steps - 1) as f32
    }

    /// Diffusion timestep fed to the time embedding, counting down from 1000.
    pub fn timestep(&self, step: usize, steps: usize) -> f32 {
        1000.0 * (steps - step) as f32 / steps as f32
    }
}

/// Config plus an immutable base checkpoint shared by every generation.
#[derive(Debug, Clone)]
pub struct ToyModel {
    cfg: DiffuserConfig,
    base: Arc<CheckpointStore>,
    base_weights: ModelWeights,
    specs: Vec<(String, Vec<usize>)>,
    decoder: Arc<[f32]>,
    schedule: LinearSchedule,
}

impl ToyModel {
    /// Seeded untrained model. Every weight is drawn uniformly from
    /// `(-a, a)` where `a` is the largest power of two not above
    /// `1/sqrt(fan_in)`, so all magnitudes stay below 1.
    pub fn new(cfg: DiffuserConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let store = init_checkpoint(&cfg)?;
        Self::from_checkpoint(cfg, store)
    }

    pub fn from_checkpoint(cfg: DiffuserConfig, store: CheckpointStore) -> Result<Self, ModelError> {
        cfg.validate()?;
        let specs = unet::tensor_specs(&cfg);
        let base = Arc::new(store);
        let base_weights = ModelWeights::load(&CheckpointView::new(base.clone()), &specs)?;
        let decoder = decoder_weights(&cfg);
        Ok(ToyModel {
            cfg,
            base,
            base_weights,
            specs,
            decoder,
            schedule: LinearSchedule::default(),
        })
    }

    pub fn config(&self) -> &DiffuserConfig {
        &self.cfg
    }

    pub fn base(&self) -> &Arc<CheckpointStore> {
        &self.base
    }

    pub fn base_view(&self) -> CheckpointView {
        CheckpointView::new(self.base.clone())
    }

    pub fn base_weights(&self) -> &ModelWeights {
        &self.base_weights
    }

    /// Names of every transformer weight matrix in the checkpoint.
    pub fn transformer_tensor_names(&self) -> Vec<String> {
        let scheme = crate::selector::NamingScheme::canonical();
        let topo = self.cfg.topology();
        topo.selectors()
            .iter()
            .map(|s| scheme.resolve(s, &topo).expect("topology selectors resolve"))
            .collect()
    }

    /// f32 weights seen through `view`. Views over this model's base only
    /// re-decode their dirty tensors.
    pub fn weights_for(&self, view: &CheckpointView) -> Result<ModelWeights, ModelError> {
        if !Arc::ptr_eq(view.base(), &self.base) {
            return ModelWeights::load(view, &self.specs);
        }
        let mut weights = self.base_weights.clone();
        for name in view.dirty_tensors() {
            if weights.tensors.contains_key(name) {
                weights.tensors.insert(name.to_string(), ModelWeights::decode(view, name)?);
            }
        }
        Ok(weights)
    }

    pub fn embed_prompt(&self, prompt: &str) -> TextEmbedding {
        embed_prompt(prompt, &self.cfg)
    }

    /// The fixed seeded noise latent every generation starts from.
    pub fn initial_latent(&self) -> LatentImage {
        let c = &self.cfg;
        let mut r = rng::stream(c.seed, "initial-latent", 0);
        let limit = 3f32.sqrt();
        let n = c.latent_channels * c.latent_size * c.latent_size;
        let data = (0..n).map(|_| r.random_range(-limit..limit)).collect();
        LatentImage::new(FeatureMap::new(c.latent_channels, c.latent_size, c.latent_size, data))
    }

    pub fn unet_forward(
        &self,
        latent: &LatentImage,
        text: &TextEmbedding,
        weights: &ModelWeights,
        step: usize,
    ) -> Result<LatentImage, ModelError> {
        self.unet_forward_with(latent, text, weights, step, ForwardOptions::default(), None)
    }

    pub fn unet_forward_with(
        &self,
        latent: &LatentImage,
        text: &TextEmbedding,
        weights: &ModelWeights,
        step: usize,
        options: ForwardOptions,
        trace: Option<&mut ActivationTrace>,
    ) -> Result<LatentImage, ModelError> {
        let t = self.schedule.timestep(step, self.cfg.steps.max(1));
        unet::forward(&self.cfg, weights, &latent.map, &text.tokens, t, options, trace).map(LatentImage::new)
    }

    /// `steps` updates `z <- z - fraction(k) * eps(z, k)`. Non-finite values
    /// are carried through, not treated as errors.
    pub fn denoise_loop(
        &self,
        initial: &LatentImage,
        text: &TextEmbedding,
        weights: &ModelWeights,
    ) -> Result<LatentImage, ModelError> {
        let mut z = initial.clone();
        let steps = self.cfg.steps;
        for k in 0..steps {
            let eps = self.unet_forward(&z, text, weights, k)?;
            let a = self.schedule.fraction(k, steps);
            for (zi, &e) in z.map.data.iter_mut().zip(&eps.map.data) {
                *zi -= a * e;
            }
        }
        Ok(z)
    }

    /// Fixed linear patch decoder: each latent pixel sets exactly one
    /// `patch x patch` block of the image, offset from mid-grey.
    pub fn decode_latent(&self, latent: &LatentImage) -> Image {
        let c = &self.cfg;
        let (nl, n, p, lc) = (c.latent_size, c.image_size, c.patch_size(), c.latent_channels);
        let z = &latent.map;
        let mut data = vec![0.5f32; 3 * n * n];
        for ch in 0..3 {
            for ly in 0..nl {
                for lx in 0..nl {
                    for dy in 0..p {
                        for dx in 0..p {
                            let w = &self.decoder[((ch * p + dy) * p + dx) * lc..][..lc];
                            let mut v = 0.5f32;
                            for (k, &wk) in w.iter().enumerate() {
                                v += wk * z.data[(k * nl + ly) * nl + lx];
                            }
                            data[(ch * n + ly * p + dy) * n + lx * p + dx] = v;
                        }
                    }
                }
            }
        }
        Image::from_unclamped(n, data)
    }

    pub fn generate(&self, prompt: &str, weights: &ModelWeights) -> Result<Image, ModelError> {
        let text = self.embed_prompt(prompt);
        let z = self.denoise_loop(&self.initial_latent(), &text, weights)?;
        Ok(self.decode_latent(&z))
    }

    pub fn generate_view(&self, prompt: &str, view: &CheckpointView) -> Result<Image, ModelError> {
        self.generate(prompt, &self.weights_for(view)?)
    }
}

fn init_scale(fan_in: usize) -> f64 {
    let bound = 1.0 / (fan_in as f64).sqrt();
    2f64.powi(bound.log2().floor() as i32)
}

/// Seeded toy checkpoint. Each tensor's stream depends only on the seed and
/// its name.
pub fn init_checkpoint(cfg: &DiffuserConfig) -> Result<CheckpointStore, ModelError> {
    cfg.validate()?;
    let mut builder = CheckpointBuilder::new().metadata("format", "seulab-toy");
    for (name, shape) in unet::tensor_specs(cfg) {
        let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
        let a = init_scale(fan_in);
        let mut r = rng::stream(cfg.seed, &name, 0);
        let n: usize = shape.iter().product();
        let values: Vec<_> = (0..n).map(|_| encode_half(r.random_range(-a..a))).collect();
        builder = builder.push_f16(name, &shape, &values)?;
    }
    Ok(builder.build()?)
}

fn decoder_weights(cfg: &DiffuserConfig) -> Arc<[f32]> {
    let p = cfg.patch_size();
    let n = 3 * p * p * cfg.latent_channels;
    let mut r = rng::stream(cfg.seed, "decoder", 0);
    (0..n).map(|_| r.random_range(-0.25f32..0.25)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::half16::BitPosition;

    fn model() -> ToyModel {
        ToyModel::new(DiffuserConfig { seed: 3, ..Default::default() }).unwrap()
    }

    #[test]
    fn default_config_is_valid() {
        let c = DiffuserConfig::default();
        c.validate().unwrap();
        assert_eq!((c.latent_size, c.image_size, c.embed_width, c.text_length), (16, 64, 32, 8));
        assert_eq!((c.num_levels(), c.steps, c.heads), (3, 10, 2));
    }

    #[test]
    fn config_validation() {
        let bad = [
            DiffuserConfig { image_size: 16, ..Default::default() },
            DiffuserConfig { image_size: 60, ..Default::default() },
            DiffuserConfig { heads: 0, ..Default::default() },
            DiffuserConfig { heads: 3, ..Default::default() },
            DiffuserConfig { channels: vec![16], ..Default::default() },
            DiffuserConfig { channels: vec![16, 18, 32], ..Default::default() },
            DiffuserConfig { latent_size: 6, image_size: 12, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn all_initial_weights_below_one() {
        let m = model();
        for name in m.base().tensor_names() {
            for h in m.base().tensor_f16(name).unwrap() {
                assert!(h.to_f64().abs() < 1.0, "{name}");
                assert!(!h.bit(BitPosition::EXPONENT_MSB));
            }
        }
    }

    #[test]
    fn zero_steps_returns_initial() {
        let m = ToyModel::new(DiffuserConfig { steps: 0, ..Default::default() }).unwrap();
        let z0 = m.initial_latent();
        let z = m.denoise_loop(&z0, &m.embed_prompt("x"), m.base_weights()).unwrap();
        assert_eq!(z, z0);
    }

    #[test]
    fn generation_is_deterministic_and_finite() {
        let m = model();
        let w = m.base_weights();
        let a = m.generate("a blue car", w).unwrap();
        let b = m.generate("a blue car", w).unwrap();
        assert_eq!(a, b);
        let z = m.denoise_loop(&m.initial_latent(), &m.embed_prompt("a blue car"), w).unwrap();
        assert!(z.is_finite());
        let other = ToyModel::new(DiffuserConfig { seed: 3, ..Default::default() }).unwrap();
        assert_eq!(other.generate("a blue car", other.base_weights()).unwrap(), a);
    }

    #[test]
    fn critical_flip_changes_latent_and_involution_restores() {
        let m = model();
        let name = "down.0.t0.sa.wv";
        let idx = 17;
        let view = m.base_view().flip_element(name, idx, BitPosition::EXPONENT_MSB).unwrap();
        let text = m.embed_prompt("beach umbrellas");
        let clean = m.denoise_loop(&m.initial_latent(), &text, m.base_weights()).unwrap();
        let hit = m.denoise_loop(&m.initial_latent(), &text, &m.weights_for(&view).unwrap()).unwrap();
        assert_ne!(clean, hit);

        let restored = view.flip_element(name, idx, BitPosition::EXPONENT_MSB).unwrap();
        let img = m.generate_view("beach umbrellas", &restored).unwrap();
        assert_eq!(img, m.decode_latent(&clean));
    }

    #[test]
    fn decoder_examples() {
        let m = model();
        let c = m.config().clone();
        let zero = LatentImage::new(FeatureMap::zeros(c.latent_channels, c.latent_size, c.latent_size));
        let img = m.decode_latent(&zero);
        assert!(img.data().iter().all(|&v| v == 0.5));

        let base = m.initial_latent();
        let mut bumped = base.clone();
        let (ly, lx) = (5, 9);
        bumped.map.data[(c.latent_size + ly) * c.latent_size + lx] += 0.7;
        let (a, b) = (m.decode_latent(&base), m.decode_latent(&bumped));
        let p = c.patch_size();
        for ch in 0..3 {
            for y in 0..c.image_size {
                for x in 0..c.image_size {
                    if a.get(ch, y, x) != b.get(ch, y, x) {
                        assert_eq!((y / p, x / p), (ly, lx));
                    }
                }
            }
        }
        assert_ne!(a, b);

        let mut wild = base.clone();
        wild.map.data[0] = f32::INFINITY;
        wild.map.data[1] = f32::NAN;
        wild.map.data[2] = f32::NEG_INFINITY;
        let img = m.decode_latent(&wild);
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn foreign_checkpoint_must_match_topology() {
        let m = model();
        let small = DiffuserConfig { channels: vec![8, 16, 16], ..Default::default() };
        let store = init_checkpoint(&small).unwrap();
        assert!(matches!(
            ToyModel::from_checkpoint(m.config().clone(), store),
            Err(ModelError::ShapeMismatch { .. })
        ));
        let empty = CheckpointBuilder::new().build().unwrap();
        assert!(matches!(
            ToyModel::from_checkpoint(m.config().clone(), empty),
            Err(ModelError::MissingTensor(_))
        ));
    }

    #[test]
    fn weights_from_foreign_view_match_shared_path() {
        let m = model();
        let copy = CheckpointStore::parse(&m.base().to_bytes()).unwrap().into_view();
        let flipped = copy.flip_element("mid.t0.ffn.w1", 3, BitPosition::new(12).unwrap()).unwrap();
        let shared = m.base_view().flip_element("mid.t0.ffn.w1", 3, BitPosition::new(12).unwrap()).unwrap();
        let a = m.weights_for(&flipped).unwrap();
        let b = m.weights_for(&shared).unwrap();
        assert_eq!(a.get("mid.t0.ffn.w1").unwrap(), b.get("mid.t0.ffn.w1").unwrap());
        assert_ne!(a.get("mid.t0.ffn.w1").unwrap(), m.base_weights().get("mid.t0.ffn.w1").unwrap());
    }
}
