//! Training loop.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{KdsmError, Result};
use crate::grouping::{build_domain_matrix, constrained_kmeans, Grouping, PairKey};
use crate::heatmap::{encode_gaussian, KeypointSet};
use crate::matching::LOG_FLOOR;
use crate::network::{forward, init_params, Mode};
use crate::nn::{fnv1a64, mix_seed, ForwardCtx};
use crate::pipeline::checkpoint::{Checkpoint, CheckpointMeta, LogEntry};
use crate::pipeline::config::TrainConfig;
use crate::pipeline::optim::Adam;
use crate::synthworld::{augment, Sample, SplitPlan};
use crate::text::{build_prompt, embed_batch, EmbeddingSource, PromptBatch, PromptSpec};

/// Entries kept in a checkpoint's log tail.
pub const LOG_TAIL: usize = 200;

/// The prompts of `sample` restricted to `categories` (sample order kept),
/// with the matching keypoints. The box stays the full-instance box.
pub fn restrict(sample: &Sample, categories: &[String]) -> Result<(Vec<PromptSpec>, KeypointSet)> {
    let mut prompts = Vec::new();
    let (mut coords, mut visible) = (Vec::new(), Vec::new());
    for (i, c) in sample.categories.iter().enumerate() {
        if categories.contains(c) {
            prompts.push(build_prompt(&sample.species, c)?);
            coords.push(sample.kps.coords[i]);
            visible.push(sample.kps.visible[i]);
        }
    }
    Ok((prompts, KeypointSet::new(coords, visible, sample.kps.bbox)?))
}

/// Clusters every train-side `(species, category)` pair by the embedding of
/// its keypoint-category text, so one category carries the same vector in
/// every species and only the constraint tells species apart.
pub fn cluster_plan(config: &TrainConfig, plan: &SplitPlan, source: &EmbeddingSource) -> Result<Grouping> {
    let mut emb: Vec<(PairKey, Vec<f64>)> = Vec::new();
    for (species, cats) in &plan.train_categories {
        for c in cats {
            emb.push(((species.clone(), c.clone()), source.embed(c)?));
        }
    }
    constrained_kmeans(
        &emb,
        config.model.o,
        mix_seed(&[config.seed, fnv1a64(b"kmeans")]),
        config.kmeans_max_iter,
    )
}

/// Sample id consumed at `slot` of optimizer step `step`: each epoch is a
/// seeded permutation of the training ids.
pub fn data_index(seed: u64, n: usize, batch: usize, step: usize, slot: usize) -> usize {
    let flat = step * batch + slot;
    let epoch = flat / n;
    epoch_order(seed, n, epoch)[flat % n]
}

fn epoch_order(seed: u64, n: usize, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, fnv1a64(b"epoch"), epoch as u64])));
    order
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// One entry per optimizer step taken in this call.
    pub losses: Vec<LogEntry>,
}

/// Where training starts from.
#[derive(Clone, Debug, Default)]
pub enum Start {
    #[default]
    Fresh,
    Resume(Box<Checkpoint>),
}

struct Prepared<'a> {
    config: &'a TrainConfig,
    samples: &'a [Sample],
    train_ids: &'a [usize],
    train_cats: &'a BTreeMap<String, Vec<String>>,
    grouping: Option<&'a Grouping>,
    prompts: BTreeMap<String, PromptBatch>,
}

struct StepLoss {
    loss: Var,
    mse: f64,
    match_loss: f64,
}

impl Prepared<'_> {
    /// Builds the batch loss `mean_b(beta * MSE + alpha * match)` on `g`.
    fn batch_loss(&self, g: &mut Graph, p: &crate::nn::Bound, step: usize) -> Result<StepLoss> {
        let cfg = self.config;
        let m = &cfg.model;
        let b = cfg.batch_size;
        let mut total: Option<Var> = None;
        let (mut mse_sum, mut match_sum) = (0.0, 0.0);
        for slot in 0..b {
            let pos = data_index(cfg.seed, self.train_ids.len(), b, step, slot);
            let id = self.train_ids[pos];
            let base = &self.samples[id];
            let sample_seed = mix_seed(&[cfg.seed, step as u64, slot as u64]);
            let aug;
            let sample = if cfg.augment {
                aug = augment(base, mix_seed(&[sample_seed, fnv1a64(b"augment")]))?;
                &aug
            } else {
                base
            };
            let cats = self
                .train_cats
                .get(&sample.species)
                .ok_or_else(|| KdsmError::Data(format!("species {} has no training categories", sample.species)))?;
            let (prompts, kps) = restrict(sample, cats)?;
            let batch = &self.prompts[&sample.species];
            let side = sample.image_size();
            // baseline: the first K_valid prompt channels; KDSM: all O reordered channels
            let n_gt = match m.mode {
                Mode::Baseline => prompts.len(),
                Mode::Kdsm => m.o,
            };
            let (gt, _) = encode_gaussian(&kps, n_gt, m.heatmap_size, m.heatmap_size, cfg.sigma, (side, side))?;

            let img = g.constant(sample.image.clone());
            let txt = g.constant(batch.raw.clone());
            let ctx = ForwardCtx::train(mix_seed(&[sample_seed, fnv1a64(b"dropout")]));
            let out = forward(g, p, m, img, txt, &ctx)?;
            let target = g.constant(gt.channels);
            let mut loss = match m.mode {
                Mode::Baseline => {
                    let h = g.slice_rows(out.h_raw, 0, prompts.len())?;
                    let mse = g.mse(h, target)?;
                    mse_sum += g.value(mse).data()[0];
                    g.scale(mse, cfg.beta)
                }
                Mode::Kdsm => {
                    let grouping = self.grouping.expect("KDSM training carries a grouping");
                    let pairs: Vec<(String, String)> = prompts
                        .iter()
                        .map(|q| (q.species.clone(), q.keypoint_category.clone()))
                        .collect();
                    let dm = build_domain_matrix(&pairs, grouping, m.k)?;
                    let mut picks: Vec<Option<usize>> = dm.selections().into_iter().map(Some).collect();
                    picks.resize(m.o, None);
                    let h = g.select_channels(out.h_raw, &picks)?;
                    let mse = g.mse(h, target)?;
                    let probs = g.softmax_rows(out.logits.expect("KDSM forward yields logits"))?;
                    let ce = g.cross_entropy(probs, &dm.d, LOG_FLOOR)?;
                    mse_sum += g.value(mse).data()[0];
                    match_sum += g.value(ce).data()[0];
                    let a = g.scale(mse, cfg.beta);
                    let c = g.scale(ce, cfg.alpha);
                    g.add(a, c)?
                }
            };
            debug_assert_eq!(prompts.len(), batch.k_valid);
            if let Some(t) = total {
                loss = g.add(t, loss)?;
            }
            total = Some(loss);
        }
        let loss = g.scale(total.expect("batch_size > 0"), 1.0 / b as f64);
        Ok(StepLoss {
            loss,
            mse: mse_sum / b as f64,
            match_loss: match_sum / b as f64,
        })
    }
}

/// Trains on the train side of `plan`. With `out`, periodic checkpoints
/// (every `checkpoint_every` steps) and the final one are written there;
/// on divergence the last finite state is written before the error returns.
pub fn train(
    config: &TrainConfig,
    samples: &[Sample],
    plan: &SplitPlan,
    start: Start,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if plan.train_samples.is_empty() {
        return Err(KdsmError::Data("split has no training samples".into()));
    }
    if let Some((species, _)) = plan.train_categories.iter().find(|(_, c)| c.is_empty()) {
        return Err(KdsmError::Data(format!("species {species} has no training categories")));
    }
    if let Some(&bad) = plan.train_samples.iter().find(|&&i| i >= samples.len()) {
        return Err(KdsmError::Data(format!("split references unknown sample {bad}")));
    }
    let m = &config.model;
    let total_steps = config.total_steps(plan.train_samples.len());

    let mut ck = match start {
        Start::Fresh => {
            let params = init_params(m, config.seed)?;
            let grouping = match m.mode {
                Mode::Kdsm => Some(cluster_plan(config, plan, &config.embedding_source()?)?),
                Mode::Baseline => None,
            };
            Checkpoint {
                meta: CheckpointMeta {
                    config: config.clone(),
                    setting: plan.setting,
                    fold: plan.fold,
                    step: 0,
                    total_steps,
                    adam_t: 0,
                },
                adam: Some(Adam::new(&params, config.adam_beta1, config.adam_beta2, config.adam_eps)),
                params,
                grouping,
                log: Vec::new(),
            }
        }
        Start::Resume(ck) => {
            if (ck.meta.setting, ck.meta.fold) != (plan.setting, plan.fold) {
                return Err(KdsmError::Config(format!(
                    "checkpoint was trained on setting {} fold {}, not setting {} fold {}",
                    ck.meta.setting, ck.meta.fold, plan.setting, plan.fold
                )));
            }
            if &ck.meta.config != config {
                log::warn!("resuming with the checkpoint's stored configuration");
            }
            *ck
        }
    };
    let config = ck.meta.config.clone();
    let config = &config;
    let source = config.embedding_source()?;
    let mut adam = ck
        .adam
        .take()
        .unwrap_or_else(|| Adam::new(&ck.params, config.adam_beta1, config.adam_beta2, config.adam_eps));

    let mut prompts = BTreeMap::new();
    for (species, cats) in &plan.train_categories {
        // split category lists keep template order, as restrict() does
        let specs: Vec<PromptSpec> = cats.iter().map(|c| build_prompt(species, c)).collect::<Result<_>>()?;
        prompts.insert(species.clone(), embed_batch(&specs, &source, config.model.k)?);
    }
    let prep = Prepared {
        config,
        samples,
        train_ids: &plan.train_samples,
        train_cats: &plan.train_categories,
        grouping: ck.grouping.as_ref(),
        prompts,
    };

    let mut losses = Vec::new();
    let start_step = ck.meta.step;
    for step in start_step..ck.meta.total_steps {
        let lr = config.lr_at(step, ck.meta.total_steps);
        let mut g = Graph::new();
        let bound = ck.params.bind(&mut g, true);
        let sl = prep.batch_loss(&mut g, &bound, step)?;
        let loss = g.value(sl.loss).data()[0];
        let grads = g.backward(sl.loss)?;
        let mut by_name = BTreeMap::new();
        let mut finite = loss.is_finite();
        for (name, &v) in bound.iter() {
            if let Some(gr) = grads.get_slice(v) {
                finite &= gr.iter().all(|x| x.is_finite());
                by_name.insert(name.clone(), gr.to_vec());
            }
        }
        if !finite {
            ck.adam = Some(adam);
            if let Some(path) = out {
                ck.save(path)?;
            }
            return Err(KdsmError::Numeric(format!(
                "non-finite loss or gradient at step {}; last finite state kept at step {}",
                step + 1,
                ck.meta.step
            )));
        }
        let mut next = ck.params.clone();
        adam.step(&mut next, &by_name, lr)?;
        if next.iter().any(|(_, t)| !t.is_finite()) {
            ck.adam = Some(adam);
            if let Some(path) = out {
                ck.save(path)?;
            }
            return Err(KdsmError::Numeric(format!(
                "parameters became non-finite at step {}; last finite state kept at step {}",
                step + 1,
                ck.meta.step
            )));
        }
        ck.params = next;
        ck.meta.step = step + 1;
        ck.meta.adam_t = adam.t;
        let entry = LogEntry {
            step: step + 1,
            lr,
            loss,
            mse: sl.mse,
            match_loss: sl.match_loss,
        };
        losses.push(entry.clone());
        let every = config.log_every.max(1);
        if ck.meta.step % every == 0 || ck.meta.step == ck.meta.total_steps {
            log::info!(
                "step {}/{} lr {:.1e} loss {:.6} mse {:.6} match {:.4}",
                entry.step,
                ck.meta.total_steps,
                lr,
                loss,
                entry.mse,
                entry.match_loss
            );
            ck.log.push(entry);
            if ck.log.len() > LOG_TAIL {
                ck.log.remove(0);
            }
        }
        if let Some(path) = out {
            if config.checkpoint_every > 0 && ck.meta.step % config.checkpoint_every == 0 && ck.meta.step < ck.meta.total_steps {
                let mut snap = ck.clone();
                snap.adam = Some(adam.clone());
                snap.save(path)?;
            }
        }
    }
    ck.adam = Some(adam);
    if let Some(path) = out {
        ck.save(path)?;
    }
    Ok(TrainOutcome { checkpoint: ck, losses })
}
