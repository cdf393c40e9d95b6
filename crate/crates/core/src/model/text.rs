use rand::Rng;

use super::ops::Tokens;
use super::DiffuserConfig;
use crate::rng;

const PAD: &str = "<pad>";

/// `text_length x embed_width` prompt embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub tokens: Tokens,
}

impl TextEmbedding {
    /// Mean over token rows.
    pub fn pooled(&self) -> Vec<f32> {
        let t = &self.tokens;
        let mut out = vec![0.0f32; t.cols];
        for r in 0..t.rows {
            for (o, &v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= t.rows as f32;
        }
        out
    }
}

/// Lower-cased alphanumeric words.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Hash-seeded stand-in for a text encoder. Row `i` is a word vector keyed by
/// the `i`-th word (or the pad token) plus a positional vector, both drawn
/// uniformly from `(-1, 1)`. Words past `text_length` are truncated.
pub fn embed_prompt(prompt: &str, cfg: &DiffuserConfig) -> TextEmbedding {
    let words = tokenize(prompt);
    let (m, w) = (cfg.text_length, cfg.embed_width);
    let mut data = Vec::with_capacity(m * w);
    for i in 0..m {
        let word = words.get(i).map(String::as_str).unwrap_or(PAD);
        let mut word_rng = rng::stream(cfg.seed, &format!("word:{word}"), 0);
        let mut pos_rng = rng::stream(cfg.seed, "position", i as u64);
        for _ in 0..w {
            let v: f32 = word_rng.random_range(-1.0..1.0);
            let p: f32 = pos_rng.random_range(-1.0..1.0);
            data.push(v + 0.25 * p);
        }
    }
    TextEmbedding {
        tokens: Tokens::new(m, w, data),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(tokenize("BMW-M2-M-Performance, Blue 05"), ["bmw", "m2", "m", "performance", "blue", "05"]);
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn empty_prompt_is_all_pad() {
        let cfg = DiffuserConfig::default();
        let a = embed_prompt("", &cfg);
        let b = embed_prompt("   ", &cfg);
        assert_eq!(a, b);
        assert_eq!((a.tokens.rows, a.tokens.cols), (cfg.text_length, cfg.embed_width));
        // Pad rows differ only through the positional component.
        assert_ne!(a.tokens.row(0), a.tokens.row(1));
        let other_seed = embed_prompt("", &DiffuserConfig { seed: 9, ..cfg });
        assert_ne!(a, other_seed);
    }

    #[test]
    fn deterministic_and_distinct() {
        let cfg = DiffuserConfig::default();
        let a = embed_prompt("Blue Beach Umbrellas", &cfg);
        assert_eq!(a, embed_prompt("Blue Beach Umbrellas", &cfg));
        let b = embed_prompt("MANETTE XBOX ONE", &cfg);
        assert!(a.tokens.data.iter().zip(&b.tokens.data).any(|(x, y)| x != y));
        assert!(a.tokens.data.iter().all(|v| v.is_finite()));
        assert_eq!(a.pooled().len(), cfg.embed_width);
    }
}
