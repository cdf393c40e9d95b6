//! Seeded fault-injection campaigns: one flip per trial, every prompt
//! generated under that flip, scores aggregated per target.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{CampaignConfig, Metric, Target, ValidationError};
use crate::half16::BitPosition;
use crate::image::Image;
use crate::injector::{inject_named, InjectionError, InjectionRecord};
use crate::metrics::{clip_like_score, corruption_stats, ImageEncoder, MetricError};
use crate::model::{ModelError, ModelWeights, TextEmbedding, ToyModel};
use crate::rng;
use crate::selector::{NamingScheme, TensorSelector};

pub const RESULT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CampaignError {
    #[error(transparent)]
    Config(#[from] ValidationError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Injection(#[from] InjectionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error("base checkpoint changed during the campaign ({before} -> {after})")]
    BaseMutated { before: String, after: String },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses rayon's default. Never affects results.
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub count: usize,
}

impl Aggregate {
    /// Sums in iteration order, so recomputing from stored values in the
    /// same order reproduces the result exactly.
    pub fn from_values<I: IntoIterator<Item = f64>>(values: I) -> Aggregate {
        let values: Vec<f64> = values.into_iter().collect();
        let count = values.len();
        if count == 0 {
            return Aggregate {
                mean: 0.0,
                std: 0.0,
                count,
            };
        }
        let mean = values.iter().sum::<f64>() / count as f64;
        let std = if count > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1) as f64).sqrt()
        } else {
            0.0
        };
        Aggregate { mean, std, count }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptScores {
    pub prompt: String,
    pub values: BTreeMap<Metric, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub target: String,
    pub trial: usize,
    pub seed: u64,
    pub record: InjectionRecord,
    /// Metric -> one value per prompt, in prompt order.
    pub values: BTreeMap<Metric, Vec<f64>>,
    /// Some prompt's final latent contained inf or NaN.
    pub non_finite: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetResult {
    pub id: String,
    pub target: Target,
    pub tensor: String,
    pub aggregates: BTreeMap<Metric, Aggregate>,
    pub trials: Vec<TrialOutcome>,
}

impl TargetResult {
    /// Aggregate of `metric` over trials, then prompts.
    pub fn recompute(&self, metric: Metric) -> Aggregate {
        Aggregate::from_values(
            self.trials
                .iter()
                .flat_map(|t| t.values.get(&metric).into_iter().flatten().copied()),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub format_version: u32,
    pub config: CampaignConfig,
    /// SHA-256 of the serialized base checkpoint.
    pub base_checksum: String,
    pub baseline: Vec<PromptScores>,
    /// Sorted by target.
    pub targets: Vec<TargetResult>,
}

impl CampaignResult {
    /// True when every stored aggregate equals the one recomputed from the
    /// stored trial values.
    pub fn aggregates_consistent(&self) -> bool {
        self.targets
            .iter()
            .all(|t| t.aggregates.iter().all(|(&m, a)| t.recompute(m) == *a))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("result serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// Mean of `metric` per flipped bit, for results whose targets differ
    /// only in the bit. Missing bits are `None`.
    pub fn per_bit_means(&self, metric: Metric) -> [Option<f64>; 16] {
        let mut out = [None; 16];
        for t in &self.targets {
            if let Some(a) = t.aggregates.get(&metric) {
                out[t.target.bit.index() as usize] = Some(a.mean);
            }
        }
        out
    }
}

/// Error-free and first-trial images kept for export.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageCache {
    /// One per prompt.
    pub baseline: Vec<Image>,
    /// Target id -> trial 0 image per prompt.
    pub exemplars: BTreeMap<String, Vec<Image>>,
}

#[derive(Debug, Clone)]
pub struct CampaignRun {
    pub result: CampaignResult,
    pub images: ImageCache,
}

#[derive(Debug, Clone)]
pub struct Baseline {
    pub scores: Vec<PromptScores>,
    pub images: Vec<Image>,
}

/// Model plus the per-prompt state every generation reuses.
struct Scorer<'a> {
    model: &'a ToyModel,
    encoder: ImageEncoder,
    texts: Vec<TextEmbedding>,
    pooled: Vec<Vec<f64>>,
    metrics: &'a [Metric],
    threshold: f32,
}

impl<'a> Scorer<'a> {
    fn new(model: &'a ToyModel, prompts: &[String], metrics: &'a [Metric], threshold: f32) -> Self {
        let cfg = model.config();
        let texts: Vec<TextEmbedding> = prompts.iter().map(|p| model.embed_prompt(p)).collect();
        let pooled = texts
            .iter()
            .map(|t| t.pooled().into_iter().map(f64::from).collect())
            .collect();
        Scorer {
            model,
            encoder: ImageEncoder::new(cfg.seed, cfg.image_size, cfg.embed_width),
            texts,
            pooled,
            metrics,
            threshold,
        }
    }

    /// Image for prompt `p` and whether its final latent stayed finite.
    fn generate(&self, p: usize, weights: &ModelWeights) -> Result<(Image, bool), ModelError> {
        let z = self
            .model
            .denoise_loop(&self.model.initial_latent(), &self.texts[p], weights)?;
        Ok((self.model.decode_latent(&z), z.is_finite()))
    }

    fn score(&self, p: usize, img: &Image, baseline: &Image) -> Result<BTreeMap<Metric, f64>, MetricError> {
        let needs_stats = self.metrics.iter().any(|&m| m != Metric::Clip);
        let stats = if needs_stats {
            Some(corruption_stats(img, baseline, self.threshold)?)
        } else {
            None
        };
        let mut out = BTreeMap::new();
        for &m in self.metrics {
            let v = match m {
                Metric::Clip => {
                    let e = self.encoder.embed(img)?;
                    // A featureless image has no direction to compare.
                    match clip_like_score(&e, &self.pooled[p]) {
                        Err(MetricError::ZeroNorm) => 0.0,
                        other => other?,
                    }
                }
                Metric::Deviation => stats.expect("computed").deviation,
                Metric::CorruptedFraction => stats.expect("computed").corrupted_fraction,
                Metric::ComponentCount => stats.expect("computed").component_count as f64,
                Metric::MeanComponentArea => stats.expect("computed").mean_component_area,
            };
            out.insert(m, v);
        }
        Ok(out)
    }
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CampaignError> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CampaignError::ThreadPool(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn baseline_with(scorer: &Scorer<'_>, prompts: &[String], threads: Option<usize>) -> Result<Baseline, CampaignError> {
    let weights = scorer.model.base_weights();
    let images = with_pool(threads, || {
        (0..prompts.len())
            .into_par_iter()
            .map(|p| scorer.generate(p, weights).map(|(img, _)| img))
            .collect::<Result<Vec<_>, _>>()
    })??;
    let scores = prompts
        .iter()
        .zip(&images)
        .enumerate()
        .map(|(p, (prompt, img))| {
            Ok(PromptScores {
                prompt: prompt.clone(),
                values: scorer.score(p, img, img)?,
            })
        })
        .collect::<Result<Vec<_>, MetricError>>()?;
    Ok(Baseline { scores, images })
}

/// Error-free scores and images for each prompt.
pub fn run_baseline(
    model: &ToyModel,
    prompts: &[String],
    metrics: &[Metric],
    threshold: f32,
) -> Result<Baseline, CampaignError> {
    let scorer = Scorer::new(model, prompts, metrics, threshold);
    baseline_with(&scorer, prompts, None)
}

/// Seed for trial `trial` of a target. The bit is not part of the key, so
/// sweeping bits of one matrix reuses the same elements.
pub fn trial_seed(master: u64, selector: &TensorSelector, trial: usize) -> u64 {
    rng::derive_seed(master, &format!("trial:{selector}"), trial as u64)
}

pub fn run_campaign(cfg: &CampaignConfig, opts: &RunOptions) -> Result<CampaignRun, CampaignError> {
    cfg.validate()?;
    let model = ToyModel::new(cfg.model.clone())?;
    run_campaign_on(&model, cfg, opts)
}

/// Runs `cfg` against an already built model whose config must equal
/// `cfg.model`.
pub fn run_campaign_on(model: &ToyModel, cfg: &CampaignConfig, opts: &RunOptions) -> Result<CampaignRun, CampaignError> {
    cfg.validate()?;
    if model.config() != &cfg.model {
        return Err(ValidationError::new("model", "does not match the supplied model").into());
    }
    let cfg = cfg.normalized();
    let before = model.base().checksum();
    let scorer = Scorer::new(model, &cfg.prompts, &cfg.metrics, cfg.threshold);
    let baseline = baseline_with(&scorer, &cfg.prompts, opts.threads)?;

    let scheme = NamingScheme::canonical();
    let topology = cfg.model.topology();
    let tensors = cfg
        .targets
        .iter()
        .map(|t| scheme.resolve(&t.selector, &topology))
        .collect::<Result<Vec<_>, _>>()
        .map_err(InjectionError::from)?;
    let jobs: Vec<(usize, usize)> = (0..cfg.targets.len())
        .flat_map(|t| (0..cfg.trials).map(move |k| (t, k)))
        .collect();

    let run_trial = |&(ti, trial): &(usize, usize)| -> Result<(TrialOutcome, Option<Vec<Image>>), CampaignError> {
        let target = &cfg.targets[ti];
        let seed = trial_seed(cfg.seed, &target.selector, trial);
        let (view, record) = inject_named(&model.base_view(), &tensors[ti], target.bit, target.element_policy(), seed)?;
        let weights = model.weights_for(&view)?;
        let mut values: BTreeMap<Metric, Vec<f64>> = cfg.metrics.iter().map(|&m| (m, Vec::new())).collect();
        let mut non_finite = false;
        let mut images = Vec::new();
        for p in 0..cfg.prompts.len() {
            let (img, finite) = scorer.generate(p, &weights)?;
            non_finite |= !finite;
            for (m, v) in scorer.score(p, &img, &baseline.images[p])? {
                values.get_mut(&m).expect("configured metric").push(v);
            }
            if trial == 0 {
                images.push(img);
            }
        }
        let outcome = TrialOutcome {
            target: target.id(),
            trial,
            seed,
            record,
            values,
            non_finite,
        };
        Ok((outcome, (trial == 0).then_some(images)))
    };
    let outcomes = with_pool(opts.threads, || {
        jobs.par_iter().map(run_trial).collect::<Result<Vec<_>, _>>()
    })??;

    let mut images = ImageCache {
        baseline: baseline.images.clone(),
        exemplars: BTreeMap::new(),
    };
    let mut targets: Vec<TargetResult> = cfg
        .targets
        .iter()
        .zip(tensors)
        .map(|(t, tensor)| TargetResult {
            id: t.id(),
            target: *t,
            tensor,
            aggregates: BTreeMap::new(),
            trials: Vec::with_capacity(cfg.trials),
        })
        .collect();
    for (&(ti, _), (outcome, exemplar)) in jobs.iter().zip(outcomes) {
        if let Some(imgs) = exemplar {
            images.exemplars.insert(outcome.target.clone(), imgs);
        }
        targets[ti].trials.push(outcome);
    }
    for t in &mut targets {
        t.aggregates = cfg.metrics.iter().map(|&m| (m, t.recompute(m))).collect();
    }

    let after = model.base().checksum();
    if before != after {
        return Err(CampaignError::BaseMutated { before, after });
    }
    Ok(CampaignRun {
        result: CampaignResult {
            format_version: RESULT_FORMAT_VERSION,
            config: cfg,
            base_checksum: before,
            baseline: baseline.scores,
            targets,
        },
        images,
    })
}

/// Campaign config flipping each of the 16 bits of one matrix.
pub fn bit_sweep_config(
    selector: TensorSelector,
    index: Option<usize>,
    prompt: &str,
    trials: usize,
    base: &CampaignConfig,
) -> CampaignConfig {
    CampaignConfig {
        prompts: vec![prompt.to_string()],
        trials,
        targets: BitPosition::all()
            .map(|bit| Target { selector, bit, index })
            .collect(),
        ..base.clone()
    }
}

/// Per-bit sweep of one matrix. Every bit sees the same trial elements.
pub fn bit_sweep(
    selector: TensorSelector,
    index: Option<usize>,
    prompt: &str,
    trials: usize,
    base: &CampaignConfig,
    opts: &RunOptions,
) -> Result<CampaignRun, CampaignError> {
    run_campaign(&bit_sweep_config(selector, index, prompt, trials, base), opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DiffuserConfig;

    fn tiny_model() -> DiffuserConfig {
        DiffuserConfig {
            latent_size: 8,
            image_size: 16,
            channels: vec![8, 8],
            embed_width: 8,
            text_length: 4,
            steps: 2,
            transformers_per_down_block: 1,
            transformers_per_up_block: 1,
            ..DiffuserConfig::default()
        }
    }

    fn tiny(targets: &[&str], trials: usize, prompts: &[&str]) -> CampaignConfig {
        CampaignConfig {
            trials,
            prompts: prompts.iter().map(|p| p.to_string()).collect(),
            model: tiny_model(),
            targets: targets
                .iter()
                .map(|s| Target::new(s.parse().unwrap(), BitPosition::EXPONENT_MSB))
                .collect(),
            ..CampaignConfig::new(Vec::new())
        }
    }

    #[test]
    fn aggregates_are_plain_means() {
        let values = [1.0, 2.0, 4.0];
        let a = Aggregate::from_values(values);
        assert_eq!(a.mean, 7.0 / 3.0);
        assert_eq!(a.count, 3);
        assert_eq!(Aggregate::from_values([5.0]).std, 0.0);
    }

    #[test]
    fn degenerate_campaign_has_one_outcome() {
        let run = run_campaign(&tiny(&["down.0.t0.sa.wv"], 1, &["a red car"]), &RunOptions::default()).unwrap();
        let r = &run.result;
        assert_eq!(r.targets.len(), 1);
        let t = &r.targets[0];
        assert_eq!(t.trials.len(), 1);
        for (m, a) in &t.aggregates {
            assert_eq!(a.count, 1);
            assert_eq!(a.mean, t.trials[0].values[m][0]);
        }
        assert!(r.aggregates_consistent());
        assert_eq!(run.images.exemplars.len(), 1);
        assert_eq!(run.images.baseline.len(), 1);
    }

    #[test]
    fn baseline_self_deviation_is_zero() {
        let model = ToyModel::new(tiny_model()).unwrap();
        let prompts = vec!["x".to_string(), "y".to_string()];
        let a = run_baseline(&model, &prompts, &Metric::ALL, 0.01).unwrap();
        let b = run_baseline(&model, &prompts, &Metric::ALL, 0.01).unwrap();
        assert_eq!(a.scores, b.scores);
        for s in &a.scores {
            assert_eq!(s.values[&Metric::Deviation], 0.0);
            assert_eq!(s.values[&Metric::ComponentCount], 0.0);
            assert!((0.0..=100.0).contains(&s.values[&Metric::Clip]));
        }
    }

    #[test]
    fn target_order_and_threads_do_not_matter() {
        let a = tiny(&["up.0.t0.ca.wk", "down.0.t0.sa.wv"], 3, &["p1", "p2"]);
        let mut b = a.clone();
        b.targets.reverse();
        let ra = run_campaign(&a, &RunOptions { threads: Some(1) }).unwrap();
        let rb = run_campaign(&b, &RunOptions { threads: Some(3) }).unwrap();
        assert_eq!(ra.result.to_json(), rb.result.to_json());
        assert_eq!(ra.images, rb.images);
        assert_eq!(ra.result.targets[0].id, "down.0.t0.sa.wv@14");
    }

    #[test]
    fn json_round_trip_keeps_aggregates() {
        let run = run_campaign(&tiny(&["mid.t0.ffn.w2"], 2, &["p"]), &RunOptions::default()).unwrap();
        let back = CampaignResult::from_json(&run.result.to_json()).unwrap();
        assert_eq!(back, run.result);
        assert!(back.aggregates_consistent());
    }

    #[test]
    fn sweep_shares_elements_across_bits() {
        let base = CampaignConfig {
            model: tiny_model(),
            ..CampaignConfig::new(Vec::new())
        };
        let run = bit_sweep("down.0.t0.sa.wv".parse().unwrap(), None, "p", 2, &base, &RunOptions::default()).unwrap();
        let r = &run.result;
        assert_eq!(r.targets.len(), 16);
        let idx: Vec<usize> = r.targets.iter().map(|t| t.trials[1].record.index).collect();
        assert!(idx.iter().all(|&i| i == idx[0]));
        assert!(r.per_bit_means(Metric::Deviation).iter().all(Option::is_some));
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let model = ToyModel::new(DiffuserConfig::default()).unwrap();
        let cfg = tiny(&["mid.t0.sa.wq"], 1, &["p"]);
        assert!(matches!(
            run_campaign_on(&model, &cfg, &RunOptions::default()),
            Err(CampaignError::Config(_))
        ));
    }
}
