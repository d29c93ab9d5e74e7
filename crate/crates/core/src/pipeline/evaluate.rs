//! Held-out evaluation and single-image inference.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{KdsmError, Result};
use crate::eval::{FoldMetrics, MetricAccumulator};
use crate::heatmap::argmax_plane;
use crate::matching::{greedy_assign, max_value_assign, predict_p};
use crate::network::{predict, Mode};
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::train::restrict;
use crate::synthworld::{Sample, SplitPlan};
use crate::tensor::Tensor;
use crate::text::{embed_batch, EmbeddingSource, PromptSpec};

/// How prompts pick a heatmap group at inference (KDSM only).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignMode {
    /// First maximum of each row of `P`.
    #[default]
    Max,
    /// One-to-one greedy assignment over `P`.
    Greedy,
}

impl std::str::FromStr for AssignMode {
    type Err = KdsmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(AssignMode::Max),
            "greedy" => Ok(AssignMode::Greedy),
            _ => Err(KdsmError::Usage(format!("assignment must be `max` or `greedy`, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for AssignMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AssignMode::Max => "max",
            AssignMode::Greedy => "greedy",
        })
    }
}

/// One located prompt, in input-image pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferredKeypoint {
    pub prompt: String,
    pub x: f64,
    pub y: f64,
    /// Heatmap peak value.
    pub score: f64,
    /// Heatmap group (KDSM); `None` for the baseline or an unassigned row.
    pub group: Option<usize>,
    /// False when no group was assigned or the heatmap has no positive value.
    pub valid: bool,
}

/// Bilinear resize of a `1 x h x w` image (pixel-center alignment).
pub fn resize(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let src = image.data();
    let mut out = vec![0.0; c * out_h * out_w];
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
    };
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1, fy) = coord(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1, fx) = coord(ox, w, out_w);
                let top = (1.0 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1];
                let bot = (1.0 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1];
                out[ch * out_h * out_w + oy * out_w + ox] = (1.0 - fy) * top + fy * bot;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Runs the model on one image for the given prompts. Coordinates are in
/// the pixel frame of `image`, whatever its size.
pub fn locate(
    ck: &Checkpoint,
    source: &EmbeddingSource,
    image: &Tensor,
    prompts: &[PromptSpec],
    assign: AssignMode,
) -> Result<Vec<InferredKeypoint>> {
    let m = &ck.meta.config.model;
    if prompts.is_empty() {
        return Err(KdsmError::Usage("at least one prompt is required".into()));
    }
    let (_, in_h, in_w) = image.dims3()?;
    let resized = resize(image, m.image_size, m.image_size)?;
    let batch = embed_batch(prompts, source, m.k)?;
    let pred = predict(m, &ck.params, &resized, &batch.raw, batch.k_valid)?;
    let (hei, wid) = (pred.heatmaps.hei(), pred.heatmaps.wid());
    let kv = batch.k_valid;
    let groups: Vec<Option<usize>> = match m.mode {
        Mode::Baseline => (0..kv).map(Some).collect(),
        Mode::Kdsm => {
            let logits = pred.logits.as_ref().expect("KDSM prediction carries logits");
            let o = logits.shape()[1];
            // placeholder rows never compete for groups
            let rows = Tensor::new(vec![kv, o], logits.data()[..kv * o].to_vec())?;
            let p = predict_p(&rows)?;
            let a = match assign {
                AssignMode::Max => max_value_assign(&p)?,
                AssignMode::Greedy => greedy_assign(&p)?,
            };
            a.into_iter().map(|g| usize::try_from(g).ok()).collect()
        }
    };
    Ok(prompts
        .iter()
        .zip(groups)
        .map(|(prompt, group)| {
            let d = group.map(|c| argmax_plane(pred.heatmaps.channel(c), wid));
            let (x, y, score, valid) = match d {
                Some(d) => (d.x as f64, d.y as f64, d.score, d.valid),
                None => (0.0, 0.0, 0.0, false),
            };
            InferredKeypoint {
                prompt: prompt.rendered.clone(),
                x: x * in_w as f64 / wid as f64,
                y: y * in_h as f64 / hei as f64,
                score,
                group: if m.mode == Mode::Kdsm { group } else { None },
                valid,
            }
        })
        .collect())
}

pub fn infer(ck: &Checkpoint, image: &Tensor, prompts: &[PromptSpec], assign: AssignMode) -> Result<Vec<InferredKeypoint>> {
    locate(ck, &ck.meta.config.embedding_source()?, image, prompts, assign)
}

/// Scores `ids` with the prompts of `categories` on each sample's species.
pub fn evaluate(
    ck: &Checkpoint,
    samples: &[Sample],
    ids: &[usize],
    categories: &BTreeMap<String, Vec<String>>,
    assign: AssignMode,
    fold: usize,
) -> Result<FoldMetrics> {
    let source = ck.meta.config.embedding_source()?;
    let mut acc = MetricAccumulator::default();
    for &id in ids {
        let s = samples
            .get(id)
            .ok_or_else(|| KdsmError::Data(format!("split references unknown sample {id}")))?;
        let Some(cats) = categories.get(&s.species) else { continue };
        let (prompts, kps) = restrict(s, cats)?;
        if prompts.is_empty() {
            continue;
        }
        let found = locate(ck, &source, &s.image, &prompts, assign)?;
        let pred: Vec<Option<(f64, f64)>> = found.iter().map(|k| k.valid.then_some((k.x, k.y))).collect();
        acc.add(&pred, &kps)?;
    }
    acc.finish(fold)
}

/// Held-out side of `plan`.
pub fn evaluate_split(ck: &Checkpoint, samples: &[Sample], plan: &SplitPlan, assign: AssignMode) -> Result<FoldMetrics> {
    evaluate(ck, samples, &plan.test_samples, &plan.test_categories, assign, plan.fold)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_constant() {
        let t = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(resize(&t, 2, 2).unwrap(), t);
        let c = Tensor::full(&[1, 3, 5], 0.25);
        let r = resize(&c, 8, 4).unwrap();
        assert_eq!(r.shape(), &[1, 8, 4]);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn assign_mode_parses() {
        assert_eq!("greedy".parse::<AssignMode>().unwrap(), AssignMode::Greedy);
        assert!("best".parse::<AssignMode>().is_err());
    }
}
