//! Prompt construction and raw text embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KdsmError, Result};
use crate::kemb::EmbeddingTable;
use crate::nn::{fnv1a64, mix_seed};
use crate::tensor::Tensor;

pub const PLACEHOLDER_PROMPT: &str = "There is not the keypoint we are looking for.";

/// Minimum width accepted by the synthetic encoder.
pub const MIN_SYNTH_DIM: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSpec {
    pub species: String,
    pub keypoint_category: String,
    pub rendered: String,
}

pub fn build_prompt(species: &str, keypoint_category: &str) -> Result<PromptSpec> {
    if species.trim().is_empty() || keypoint_category.trim().is_empty() {
        return Err(KdsmError::Validation(format!(
            "prompt needs non-empty species and keypoint category (got {species:?}, {keypoint_category:?})"
        )));
    }
    Ok(PromptSpec {
        species: species.to_string(),
        keypoint_category: keypoint_category.to_string(),
        rendered: format!("The {keypoint_category} of a {species} in the photo."),
    })
}

pub fn placeholder_prompt() -> &'static str {
    PLACEHOLDER_PROMPT
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn token_vector(token: &str, dim: usize, seed: u64, acc: &mut [f64]) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, fnv1a64(token.as_bytes())]));
    let mut i = 0;
    while i < dim {
        // Box-Muller, two normals per draw
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let t = std::f64::consts::TAU * u2;
        acc[i] += r * t.cos();
        if i + 1 < dim {
            acc[i + 1] += r * t.sin();
        }
        i += 2;
    }
}

/// Deterministic stand-in for a frozen text encoder: each token seeds a
/// Gaussian vector, the vectors are summed and the sum is L2-normalized.
pub fn synthetic_encode(text: &str, dim: usize, seed: u64) -> Result<Vec<f64>> {
    if dim < MIN_SYNTH_DIM {
        return Err(KdsmError::Config(format!(
            "synthetic embedding width must be >= {MIN_SYNTH_DIM}, got {dim}"
        )));
    }
    let mut v = vec![0.0; dim];
    let tokens = tokenize(text);
    if tokens.is_empty() {
        token_vector("", dim, seed, &mut v);
    }
    for tok in &tokens {
        token_vector(tok, dim, seed, &mut v);
    }
    normalize(&mut v);
    Ok(v)
}

pub(crate) fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Where raw embeddings come from.
#[derive(Clone, Debug)]
pub enum EmbeddingSource {
    Synthetic {
        dim: usize,
        seed: u64,
    },
    Table {
        table: EmbeddingTable,
        /// Fall back to the synthetic encoder for keys missing from the table.
        allow_synth_fallback: bool,
        seed: u64,
    },
}

impl EmbeddingSource {
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingSource::Synthetic { dim, .. } => *dim,
            EmbeddingSource::Table { table, .. } => table.dim(),
        }
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>> {
        match self {
            EmbeddingSource::Synthetic { dim, seed } => synthetic_encode(text, *dim, *seed),
            EmbeddingSource::Table {
                table,
                allow_synth_fallback,
                seed,
            } => match table.lookup(text) {
                Some(v) => Ok(v),
                None if *allow_synth_fallback => synthetic_encode(text, table.dim(), *seed),
                None => Err(KdsmError::Lookup(format!(
                    "no embedding for {text:?} and synthetic fallback is disabled"
                ))),
            },
        }
    }

    /// Errors when the source width disagrees with the configured width.
    pub fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(KdsmError::Config(format!(
                "embedding width {} does not match configured width {expected}",
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Prompts of one sample, embedded and padded to `k` rows.
#[derive(Clone, Debug)]
pub struct PromptBatch {
    pub prompts: Vec<PromptSpec>,
    pub raw: Tensor,
    pub k: usize,
    pub k_valid: usize,
}

pub fn embed_batch(prompts: &[PromptSpec], source: &EmbeddingSource, k: usize) -> Result<PromptBatch> {
    if prompts.len() > k {
        return Err(KdsmError::Capacity {
            got: prompts.len(),
            capacity: k,
        });
    }
    let dim = source.dim();
    let placeholder = source.embed(PLACEHOLDER_PROMPT)?;
    let mut data = Vec::with_capacity(k * dim);
    for p in prompts {
        data.extend(source.embed(&p.rendered)?);
    }
    for _ in prompts.len()..k {
        data.extend_from_slice(&placeholder);
    }
    Ok(PromptBatch {
        prompts: prompts.to_vec(),
        raw: Tensor::new(vec![k, dim], data)?,
        k,
        k_valid: prompts.len(),
    })
}
