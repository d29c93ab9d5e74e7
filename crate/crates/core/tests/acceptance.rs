//! Acceptance criteria 1-9. Each test prints one `criterion N: PASS|FAIL ...`
//! line with the measured values, then asserts.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kdsm::autograd::{Graph, Var};
use kdsm::eval::{aggregate, nme, normalized_errors, pck, FoldMetrics, MetricAccumulator};
use kdsm::grouping::{constrained_kmeans_traced, PairKey};
use kdsm::heatmap::{decode_argmax, encode_gaussian, KeypointSet};
use kdsm::matching::{greedy_assign, heatmap_mse, match_loss, reorder_heatmaps, total_loss};
use kdsm::network::{forward, init_params, Mode, ModelConfig};
use kdsm::nn::{ForwardCtx, ParamStore};
use kdsm::pipeline::{evaluate_split, train, AssignMode, Start, TrainConfig};
use kdsm::synthworld::{build_world, make_splits, render_world_sample, Sample, Setting, SplitPlan, WorldConfig};
use kdsm::tensor::ConvGeometry;
use kdsm::Tensor;

/// Written straight to stderr so the line shows even when the harness
/// captures the output of passing tests.
fn report(n: u32, ok: bool, detail: &str) {
    let line = format!("criterion {n}: {} {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

/// Heavy criteria run one at a time so their wall-clock measurements are
/// not inflated by each other.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

// ---------------------------------------------------------------- criterion 1

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

/// Contracts a non-scalar output with a fixed random tensor so every output
/// element carries a distinct weight.
fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    if shape.iter().product::<usize>() == 1 {
        return out;
    }
    let r = rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape, 1.0);
    let r = g.constant(r);
    let prod = g.mul(out, r).unwrap();
    g.sum(prod)
}

fn loss_value(inputs: &[Tensor], f: &Builder) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let l = f(&mut g, &vars);
    g.value(l).data()[0]
}

/// Largest norm-wise relative error between the analytic gradient and a
/// central finite difference, over all inputs.
fn gradcheck(inputs: &[Tensor], f: &Builder) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let l = f(&mut g, &vars);
    let grads = g.backward(l).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(|t| t.into_data()).unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut numeric = vec![0.0; t.numel()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            *n = (loss_value(&plus, f) - loss_value(&minus, f)) / (2.0 * h);
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        if denom > 0.0 {
            worst = worst.max(diff / denom);
        }
    }
    worst
}

/// Uniform values bounded away from zero, so ReLU kinks stay out of reach of
/// the finite-difference step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Instance = (Vec<Tensor>, Builder);

fn op_cases() -> Vec<(&'static str, Box<dyn Fn(&mut ChaCha8Rng, u64) -> Instance>)> {
    vec![
        (
            "matmul_t",
            Box::new(|r, s| {
                let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
                let (ta, tb) = (r.gen::<bool>(), r.gen::<bool>());
                let a = rand_tensor(r, &if ta { [k, m] } else { [m, k] }, 1.0);
                let b = rand_tensor(r, &if tb { [n, k] } else { [k, n] }, 1.0);
                let f: Builder = Box::new(move |g, v| {
                    let o = g.matmul_t(v[0], ta, v[1], tb).unwrap();
                    project(g, o, s)
                });
                (vec![a, b], f)
            }),
        ),
        (
            "add",
            Box::new(|r, s| {
                let sh = [r.gen_range(1..4), r.gen_range(1..5)];
                let f: Builder = Box::new(move |g, v| {
                    let o = g.add(v[0], v[1]).unwrap();
                    project(g, o, s)
                });
                (vec![rand_tensor(r, &sh, 1.0), rand_tensor(r, &sh, 1.0)], f)
            }),
        ),
        (
            "mul",
            Box::new(|r, s| {
                let sh = [r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4)];
                let f: Builder = Box::new(move |g, v| {
                    let o = g.mul(v[0], v[1]).unwrap();
                    project(g, o, s)
                });
                (vec![rand_tensor(r, &sh, 1.0), rand_tensor(r, &sh, 1.0)], f)
            }),
        ),
        (
            "scale",
            Box::new(|r, s| {
                let c = r.gen_range(-3.0..3.0);
                let f: Builder = Box::new(move |g, v| {
                    let o = g.scale(v[0], c);
                    project(g, o, s)
                });
                let m = r.gen_range(1..5);
                (vec![rand_tensor(r, &[m, 3], 1.0)], f)
            }),
        ),
        (
            "add_row_bias",
            Box::new(|r, s| {
                let (m, n) = (r.gen_range(1..5), r.gen_range(1..5));
                let f: Builder = Box::new(move |g, v| {
                    let o = g.add_row_bias(v[0], v[1]).unwrap();
                    project(g, o, s)
                });
                (vec![rand_tensor(r, &[m, n], 1.0), rand_tensor(r, &[n], 1.0)], f)
            }),
        ),
        (
            "add_channel_bias",
            Box::new(|r, s| {
                let c = r.gen_range(1..4);
                let f: Builder = Box::new(move |g, v| {
                    let o = g.add_channel_bias(v[0], v[1]).unwrap();
                    project(g, o, s)
                });
                (vec![rand_tensor(r, &[c, 3, 2], 1.0), rand_tensor(r, &[c], 1.0)], f)
            }),
        ),
        (
            "relu",
            Box::new(|r, s| {
                let sh = [r.gen_range(1..5), r.gen_range(1..6)];
                let f: Builder = Box::new(move |g, v| {
                    let o = g.relu(v[0]);
                    project(g, o, s)
                });
                (vec![away_from_zero(r, &sh)], f)
            }),
        ),
        (
            "transpose",
            Box::new(|r, s| {
                let sh = [r.gen_range(1..5), r.gen_range(1..5)];
                let f: Builder = Box::new(move |g, v| {
                    let o = g.transpose(v[0]).unwrap();
                    project(g, o, s)
                });
                (vec![rand_tensor(r, &sh, 1.0)], f)
            }),
        ),
        (
            "reshape",
            Box::new(|r, s| {
                let (a, b) = (r.gen_range(1..4), r.gen_range(1..4));
                let f: Builder = Box::new(move |g, v| {
                    let o = g.reshape(v[0], &[b, a * 2]).unwrap();
                    project(g, o, s)
                });
                (vec![rand_tensor(r, &[2, a, b], 1.0)], f)
            }),
        ),
        (
            "slice_cols",
            Box::new(|r, s| {
                let n = r.gen_range(2..6);
                let start = r.gen_range(0..n - 1);
                let len = r.gen_range(1..=n - start);
                let f: Builder = Box::new(move |g, v| {
                    let o = g.slice_cols(v[0], start, len).unwrap();
                    project(g, o, s)
                });
                (vec![rand_tensor(r, &[3, n], 1.0)], f)
            }),
        ),
        (
            "concat_cols",
            Box::new(|r, s| {
                let m = r.gen_range(1..4);
                let f: Builder = Box::new(move |g, v| {
                    let o = g.concat_cols(v).unwrap();
                    project(g, o, s)
                });
                let mut parts = Vec::new();
                for _ in 0..r.gen_range(1..4) {
                    let w = r.gen_range(1..4);
                    parts.push(rand_tensor(r, &[m, w], 1.0));
                }
                (parts, f)
            }),
        ),
        (
            "slice_rows",
            Box::new(|r, s| {
                let n = r.gen_range(2..6);
                let start = r.gen_range(0..n - 1);
                let len = r.gen_range(1..=n - start);
                let f: Builder = Box::new(move |g, v| {
                    let o = g.slice_rows(v[0], start, len).unwrap();
                    project(g, o, s)
                });
                (vec![rand_tensor(r, &[n, 2, 3], 1.0)], f)
            }),
        ),
        (
            "softmax_rows",
            Box::new(|r, s| {
                let sh = [r.gen_range(1..5), r.gen_range(1..6)];
                let f: Builder = Box::new(move |g, v| {
                    let o = g.softmax_rows(v[0]).unwrap();
                    project(g, o, s)
                });
                (vec![rand_tensor(r, &sh, 3.0)], f)
            }),
        ),
        (
            "layer_norm",
            Box::new(|r, s| {
                let (m, n) = (r.gen_range(1..4), r.gen_range(2..7));
                let f: Builder = Box::new(move |g, v| {
                    let o = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                    project(g, o, s)
                });
                (vec![rand_tensor(r, &[m, n], 2.0), rand_tensor(r, &[n], 1.5), rand_tensor(r, &[n], 1.0)], f)
            }),
        ),
        (
            "conv2d",
            Box::new(|r, s| {
                let (cin, cout) = (r.gen_range(1..3), r.gen_range(1..3));
                let k = r.gen_range(1..4);
                let geo = ConvGeometry::new(r.gen_range(1..3), r.gen_range(0..2));
                let (h, w) = (r.gen_range(k..k + 4), r.gen_range(k..k + 4));
                let f: Builder = Box::new(move |g, v| {
                    let o = g.conv2d(v[0], v[1], geo).unwrap();
                    project(g, o, s)
                });
                (vec![rand_tensor(r, &[cin, h, w], 1.0), rand_tensor(r, &[cout, cin, k, k], 1.0)], f)
            }),
        ),
        (
            "deconv2d",
            Box::new(|r, s| {
                let (cin, cout) = (r.gen_range(1..3), r.gen_range(1..3));
                let k = r.gen_range(2..4);
                let stride = r.gen_range(1..3);
                let geo = ConvGeometry::new(stride, r.gen_range(0..2)).with_output_padding(r.gen_range(0..stride));
                let (h, w) = (r.gen_range(2..5), r.gen_range(2..5));
                let f: Builder = Box::new(move |g, v| {
                    let o = g.deconv2d(v[0], v[1], geo).unwrap();
                    project(g, o, s)
                });
                (vec![rand_tensor(r, &[cin, h, w], 1.0), rand_tensor(r, &[cin, cout, k, k], 1.0)], f)
            }),
        ),
        (
            "dropout",
            Box::new(|r, s| {
                let rate = r.gen_range(0.1..0.6);
                let f: Builder = Box::new(move |g, v| {
                    let o = g.dropout(v[0], rate, s);
                    project(g, o, s)
                });
                let m = r.gen_range(1..5);
                (vec![rand_tensor(r, &[m, 4], 1.0)], f)
            }),
        ),
        (
            "select_channels",
            Box::new(|r, s| {
                let n = r.gen_range(1..5);
                let picks: Vec<Option<usize>> = (0..r.gen_range(1..6))
                    .map(|_| if r.gen_bool(0.2) { None } else { Some(r.gen_range(0..n)) })
                    .collect();
                let f: Builder = Box::new(move |g, v| {
                    let o = g.select_channels(v[0], &picks).unwrap();
                    project(g, o, s)
                });
                (vec![rand_tensor(r, &[n, 2, 2], 1.0)], f)
            }),
        ),
        (
            "sum",
            Box::new(|r, _| {
                let f: Builder = Box::new(|g, v| g.sum(v[0]));
                let sh = [r.gen_range(1..4), r.gen_range(1..4)];
                (vec![rand_tensor(r, &sh, 1.0)], f)
            }),
        ),
        (
            "mse",
            Box::new(|r, _| {
                let sh = [r.gen_range(1..4), r.gen_range(1..3), r.gen_range(1..4)];
                let f: Builder = Box::new(|g, v| g.mse(v[0], v[1]).unwrap());
                (vec![rand_tensor(r, &sh, 1.0), rand_tensor(r, &sh, 1.0)], f)
            }),
        ),
        (
            "cross_entropy",
            Box::new(|r, _| {
                let (m, n) = (r.gen_range(1..5), r.gen_range(2..6));
                let mut d = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    if r.gen_bool(0.8) {
                        d.data_mut()[i * n + r.gen_range(0..n)] = 1.0;
                    }
                }
                let f: Builder = Box::new(move |g, v| {
                    let p = g.softmax_rows(v[0]).unwrap();
                    g.cross_entropy(p, &d, 1e-12).unwrap()
                });
                (vec![rand_tensor(r, &[m, n], 2.0)], f)
            }),
        ),
    ]
}

fn tiny_model(mode: Mode) -> ModelConfig {
    ModelConfig {
        mode,
        k: 3,
        o: 4,
        c: 8,
        c0: 12,
        d: 16,
        heads: 4,
        self_layers: 3,
        cross_layers: 3,
        ffn: 16,
        dropout: 0.1,
        image_size: 32,
        heatmap_size: 32,
        enc_channels: vec![4, 4, 4],
        head_channels: vec![4, 4, 4],
        vadapter_hidden: 6,
    }
}

struct FullGraph {
    cfg: ModelConfig,
    image: Tensor,
    text: Tensor,
    target: Tensor,
    picks: Vec<Option<usize>>,
    d: Tensor,
    k_valid: usize,
    dropout_seed: u64,
}

impl FullGraph {
    fn new(mode: Mode, seed: u64) -> (Self, ParamStore) {
        let cfg = tiny_model(mode);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = init_params(&cfg, seed).unwrap();
        // perturb every tensor, zero-initialized ones included, so all paths carry gradient
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        let k_valid = 2;
        let s = cfg.heatmap_size;
        let n_gt = if mode == Mode::Kdsm { cfg.o } else { k_valid };
        let mut d = Tensor::zeros(&[cfg.k, cfg.o]);
        let mut groups: Vec<usize> = (0..cfg.o).collect();
        for i in 0..k_valid {
            let j = rng.gen_range(i..cfg.o);
            groups.swap(i, j);
            d.data_mut()[i * cfg.o + groups[i]] = 1.0;
        }
        let mut picks: Vec<Option<usize>> = groups[..k_valid].iter().map(|&g| Some(g)).collect();
        picks.resize(cfg.o, None);
        let fg = FullGraph {
            image: Tensor::new(vec![1, s, s], (0..s * s).map(|_| rng.gen::<f64>()).collect()).unwrap(),
            text: rand_tensor(&mut rng, &[cfg.k, cfg.c0], 1.0),
            target: Tensor::new(vec![n_gt, s, s], (0..n_gt * s * s).map(|_| rng.gen::<f64>() * 0.5).collect()).unwrap(),
            picks,
            d,
            k_valid,
            dropout_seed: rng.gen(),
            cfg,
        };
        (fg, params)
    }

    /// The training objective: `MSE + CE` (KDSM) or masked MSE (baseline),
    /// with dropout active under a fixed mask seed.
    fn loss(&self, g: &mut Graph, params: &ParamStore) -> (Var, kdsm::nn::Bound) {
        let p = params.bind(g, true);
        let img = g.constant(self.image.clone());
        let txt = g.constant(self.text.clone());
        let ctx = ForwardCtx::train(self.dropout_seed);
        let out = forward(g, &p, &self.cfg, img, txt, &ctx).unwrap();
        let target = g.constant(self.target.clone());
        let l = match self.cfg.mode {
            Mode::Baseline => {
                let h = g.slice_rows(out.h_raw, 0, self.k_valid).unwrap();
                g.mse(h, target).unwrap()
            }
            Mode::Kdsm => {
                let h = g.select_channels(out.h_raw, &self.picks).unwrap();
                let mse = g.mse(h, target).unwrap();
                let prob = g.softmax_rows(out.logits.unwrap()).unwrap();
                let ce = g.cross_entropy(prob, &self.d, 1e-12).unwrap();
                g.add(mse, ce).unwrap()
            }
        };
        (l, p)
    }

    fn value(&self, params: &ParamStore) -> f64 {
        let mut g = Graph::new();
        let (l, _) = self.loss(&mut g, params);
        g.value(l).data()[0]
    }
}

fn shifted(params: &ParamStore, name: &str, dir: &[f64], eps: f64) -> ParamStore {
    let mut p = params.clone();
    for (v, u) in p.get_mut(name).unwrap().data_mut().iter_mut().zip(dir) {
        *v += eps * u;
    }
    p
}

/// Directional derivative checks, one random unit direction per parameter
/// tensor. Steps shrink from 1e-5 to 1e-7 until the central differences at
/// `h` and `h/2` agree beyond roundoff; a direction where no step agrees
/// straddles a ReLU kink and is redrawn. Returns (worst relative error,
/// checks, redraws).
fn full_graph_check(mode: Mode, seed: u64) -> (f64, usize, usize) {
    let (fg, params) = FullGraph::new(mode, seed);
    let mut g = Graph::new();
    let (l, bound) = fg.loss(&mut g, &params);
    let grads = g.backward(l).unwrap();
    let loss = g.value(l).data()[0].abs().max(1.0);
    // a few ulps of the loss divided by the step: below this a difference quotient is roundoff
    let noise = |h: f64| 16.0 * f64::EPSILON * loss / (2.0 * h);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1e5);
    let (mut worst, mut checks, mut redraws) = (0.0f64, 0, 0);
    for (name, &var) in bound.iter() {
        let grad = grads.get_slice(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; params.get(name).unwrap().numel()]);
        let mut attempt = 0;
        loop {
            let mut dir: Vec<f64> = (0..grad.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            dir.iter_mut().for_each(|x| *x /= norm);
            let analytic: f64 = grad.iter().zip(&dir).map(|(a, b)| a * b).sum();
            let fd = |e: f64| (fg.value(&shifted(&params, name, &dir, e)) - fg.value(&shifted(&params, name, &dir, -e))) / (2.0 * e);
            let smooth = [1e-5, 1e-6, 1e-7].into_iter().find_map(|h| {
                let (n1, n2) = (fd(h), fd(h / 2.0));
                ((n1 - n2).abs() <= 1e-6 * n1.abs().max(n2.abs()) + noise(h / 2.0)).then_some((n1, h))
            });
            let Some((numeric, h)) = smooth.or_else(|| (attempt == 20).then(|| (fd(1e-7), 1e-7))) else {
                attempt += 1;
                redraws += 1;
                continue;
            };
            let denom = analytic.abs().max(numeric.abs());
            // both at the noise floor (e.g. attention key biases, which softmax ignores)
            if denom > noise(h) {
                worst = worst.max((analytic - numeric).abs() / denom);
            }
            checks += 1;
            break;
        }
    }
    (worst, checks, redraws)
}

#[test]
fn criterion_1_gradient_suite() {
    let _guard = serial();
    let t0 = Instant::now();
    let mut lines = Vec::new();
    let mut all_ok = true;
    for (i, (name, case)) in op_cases().into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for inst in 0..20u64 {
            let seed = 1000 * i as u64 + inst;
            let (inputs, f) = case(&mut ChaCha8Rng::seed_from_u64(seed), seed);
            worst = worst.max(gradcheck(&inputs, &f));
        }
        all_ok &= worst < 1e-4;
        lines.push(format!("{name} {worst:.1e}"));
    }
    for mode in [Mode::Kdsm, Mode::Baseline] {
        let (mut worst, mut checks, mut redraws) = (0.0f64, 0, 0);
        for inst in 0..20u64 {
            let (w, c, r) = full_graph_check(mode, 77 + inst);
            worst = worst.max(w);
            checks += c;
            redraws += r;
        }
        all_ok &= worst < 1e-4;
        lines.push(format!("full-{mode} {worst:.1e} ({checks} directions, {redraws} redrawn)"));
    }
    let secs = t0.elapsed().as_secs_f64();
    let ok = all_ok && secs < 60.0;
    report(1, ok, &format!("max rel err per op over 20 instances: {}; {secs:.1}s", lines.join(", ")));
    assert!(all_ok, "gradient check failed: {lines:?}");
    assert!(secs < 60.0, "gradient suite took {secs:.1}s");
}

// ---------------------------------------------------------------- criterion 2

/// Queue entry ordered by score; equal scores pop the lower keypoint, then
/// the lower heatmap, first.
#[derive(PartialEq)]
struct Entry(f64, usize, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(other.1.cmp(&self.1)).then(other.2.cmp(&self.2))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn priority_queue_assign(p: &[Vec<f64>]) -> Vec<i64> {
    let k = p.len();
    let mut q = BinaryHeap::new();
    for (i, row) in p.iter().enumerate() {
        for (j, &s) in row.iter().enumerate() {
            q.push(Entry(s, i, j));
        }
    }
    let mut a_o = std::collections::HashSet::new();
    let mut a_k = std::collections::HashSet::new();
    let mut l = vec![-1i64; k];
    while !q.is_empty() && a_k.len() < k {
        let Entry(_, kk, o) = q.pop().unwrap();
        if !a_k.contains(&kk) && !a_o.contains(&o) {
            l[kk] = o as i64;
            a_k.insert(kk);
            a_o.insert(o);
        }
    }
    l
}

#[test]
fn criterion_2_greedy_matches_priority_queue() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut matches, mut with_unassigned, mut with_ties) = (0, 0, 0);
    for inst in 0..500 {
        let (k, o) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        // every other matrix is quantized to tenths so score ties occur
        let quant = inst % 2 == 1;
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                (0..o)
                    .map(|_| {
                        let v: f64 = rng.gen();
                        if quant {
                            (v * 10.0).floor() / 10.0
                        } else {
                            v
                        }
                    })
                    .collect()
            })
            .collect();
        let t = Tensor::from_rows(&rows).unwrap();
        let got = greedy_assign(&t).unwrap();
        let want = priority_queue_assign(&rows);
        if got == want {
            matches += 1;
        }
        with_unassigned += usize::from(want.contains(&-1));
        let mut flat: Vec<f64> = rows.concat();
        flat.sort_by(f64::total_cmp);
        with_ties += usize::from(flat.windows(2).any(|w| w[0] == w[1]));
    }
    let ok = matches == 500 && with_unassigned > 0;
    report(
        2,
        ok,
        &format!("{matches}/500 exact matches; {with_unassigned} matrices with -1 entries; {with_ties} with tied scores"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 3

fn brute_force_optimum(points: &[Vec<f64>], species: &[usize], o: usize) -> f64 {
    let n = points.len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let feasible = (0..n).all(|i| (0..i).all(|j| species[i] != species[j] || labels[i] != labels[j]));
        if feasible {
            let mut sse = 0.0;
            for g in 0..o {
                let members: Vec<&Vec<f64>> = (0..n).filter(|&i| labels[i] == g).map(|i| &points[i]).collect();
                if members.is_empty() {
                    continue;
                }
                let dim = members[0].len();
                let mean: Vec<f64> = (0..dim).map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64).collect();
                sse += members.iter().map(|p| p.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum::<f64>();
            }
            best = best.min(sse);
        }
        // next labelling in base o
        let mut i = 0;
        while i < n {
            labels[i] += 1;
            if labels[i] < o {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
        if i == n {
            return best;
        }
    }
}

#[test]
fn criterion_3_constrained_clustering() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut feasible, mut optimal, mut monotone) = (0, 0, 0);
    let mut gaps = Vec::new();
    for inst in 0..20u64 {
        let o = rng.gen_range(2..=3);
        let n_species = rng.gen_range(1..=3);
        let mut embeddings: Vec<(PairKey, Vec<f64>)> = Vec::new();
        let mut species = Vec::new();
        'fill: for s in 0..n_species {
            for c in 0..rng.gen_range(1..=o) {
                if embeddings.len() == 6 {
                    break 'fill;
                }
                let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                embeddings.push(((format!("s{s}"), format!("c{c}")), v));
                species.push(s);
            }
        }
        let (grouping, trace) = constrained_kmeans_traced(&embeddings, o, inst, 100).unwrap();
        let labels: Vec<usize> = embeddings.iter().map(|(k, _)| grouping.assignment[k]).collect();
        let ok_constraint = (0..labels.len()).all(|i| (0..i).all(|j| species[i] != species[j] || labels[i] != labels[j]));
        feasible += usize::from(ok_constraint);
        let obj = grouping.objective(&embeddings).unwrap();
        let points: Vec<Vec<f64>> = embeddings.iter().map(|(_, v)| v.clone()).collect();
        let opt = brute_force_optimum(&points, &species, o);
        gaps.push(obj - opt);
        optimal += usize::from((obj - opt).abs() <= 1e-9);
        let never_up = trace.objectives.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
        monotone += usize::from(never_up);
    }
    let ok = feasible == 20 && optimal >= 18 && monotone == 20;
    let worst_gap = gaps.iter().cloned().fold(0.0f64, f64::max);
    report(
        3,
        ok,
        &format!("constraint {feasible}/20; optimum within 1e-9 {optimal}/20 (worst gap {worst_gap:.2e}); monotone {monotone}/20"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 4

fn oracle_errors(pred: &[Option<(f64, f64)>], coords: &[(f64, f64)], visible: &[bool], bbox: [f64; 4]) -> Vec<f64> {
    let l = (bbox[2] - bbox[0]).max(bbox[3] - bbox[1]);
    let mut out = Vec::new();
    for i in 0..coords.len() {
        if !visible[i] {
            continue;
        }
        out.push(match pred[i] {
            None => 1.0,
            Some((x, y)) => {
                let dx = x - coords[i].0;
                let dy = y - coords[i].1;
                (dx * dx + dy * dy).sqrt() / l
            }
        });
    }
    out
}

#[test]
fn criterion_4_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut exact = 0;
    let mut ordered = true;
    let mut acc = MetricAccumulator::default();
    let (mut hits02, mut hits005, mut err_sum, mut count) = (0usize, 0usize, 0.0f64, 0usize);
    for _ in 0..200 {
        let n = rng.gen_range(1..=8);
        let x0 = rng.gen_range(0.0..20.0);
        let y0 = rng.gen_range(0.0..20.0);
        let bbox = [x0, y0, x0 + rng.gen_range(5.0..60.0), y0 + rng.gen_range(5.0..60.0)];
        let coords: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen_range(bbox[0]..bbox[2]), rng.gen_range(bbox[1]..bbox[3]))).collect();
        let mut visible: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.8)).collect();
        visible[0] = true;
        let pred: Vec<Option<(f64, f64)>> = coords
            .iter()
            .map(|&(x, y)| {
                if rng.gen_bool(0.1) {
                    None
                } else {
                    let s = rng.gen_range(0.0..25.0);
                    Some((x + rng.gen_range(-s..=s), y + rng.gen_range(-s..=s)))
                }
            })
            .collect();
        let gt = KeypointSet::new(coords.clone(), visible.clone(), bbox).unwrap();
        let errs = oracle_errors(&pred, &coords, &visible, bbox);
        let m = errs.len() as f64;
        let o02 = errs.iter().filter(|&&e| e <= 0.2).count() as f64 / m;
        let o005 = errs.iter().filter(|&&e| e <= 0.05).count() as f64 / m;
        let onme = 100.0 * errs.iter().sum::<f64>() / m;
        let same = normalized_errors(&pred, &gt).unwrap() == errs
            && pck(&pred, &gt, 0.2).unwrap() == Some(o02)
            && pck(&pred, &gt, 0.05).unwrap() == Some(o005)
            && nme(&pred, &gt).unwrap() == Some(onme);
        exact += usize::from(same);
        ordered &= o005 <= o02;
        acc.add(&pred, &gt).unwrap();
        for e in &errs {
            hits02 += usize::from(*e <= 0.2);
            hits005 += usize::from(*e <= 0.05);
            err_sum += e;
            count += 1;
        }
    }
    let fold = acc.finish(1).unwrap();
    let pooled = fold.pck_02 == hits02 as f64 / count as f64
        && fold.pck_005 == hits005 as f64 / count as f64
        && fold.nme == 100.0 * err_sum / count as f64;
    let rep = aggregate("oracle", &[fold.clone(), FoldMetrics { fold: 2, ..fold.clone() }]).unwrap();
    ordered &= fold.pck_005 <= fold.pck_02 && rep.mean_pck_005 <= rep.mean_pck_02;

    let box100 = [0.0, 0.0, 100.0, 50.0];
    let one = KeypointSet::new(vec![(50.0, 25.0)], vec![true], box100).unwrap();
    let worked_pck = pck(&[Some((70.0, 25.0))], &one, 0.2).unwrap();
    let two = KeypointSet::new(vec![(10.0, 10.0), (50.0, 25.0)], vec![true, true], box100).unwrap();
    let worked_nme = nme(&[Some((20.0, 10.0)), Some((50.0, 55.0))], &two).unwrap();
    let worked = worked_pck == Some(1.0) && worked_nme == Some(20.0);

    let ok = exact == 200 && ordered && pooled && worked;
    report(
        4,
        ok,
        &format!(
            "{exact}/200 exact; pooled fold totals exact {pooled}; PCK@0.05<=PCK@0.2 {ordered}; worked PCK {worked_pck:?} NME {worked_nme:?}"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_5_heatmap_codec() {
    let s = 64;
    let mut round_trip = 0;
    let mut peak_ok = true;
    let mut worst_neighbour: f64 = 0.0;
    let expected = (-1.0f64 / 8.0).exp();
    for y in 0..s {
        for x in 0..s {
            let kps = KeypointSet::new(vec![(x as f64, y as f64)], vec![true], [0.0, 0.0, s as f64, s as f64]).unwrap();
            let (h, vis) = encode_gaussian(&kps, 1, s, s, 2.0, (s, s)).unwrap();
            let d = decode_argmax(&h)[0];
            if vis[0] && d.valid && (d.x, d.y) == (x, y) {
                round_trip += 1;
            }
            let plane = h.channel(0);
            peak_ok &= plane[y * s + x] == 1.0;
            for (nx, ny) in [(x + 1, y), (x.wrapping_sub(1), y), (x, y + 1), (x, y.wrapping_sub(1))] {
                if nx < s && ny < s {
                    worst_neighbour = worst_neighbour.max((plane[ny * s + nx] - expected).abs());
                }
            }
        }
    }
    let ok = round_trip == s * s && peak_ok && worst_neighbour <= 1e-12;
    report(
        5,
        ok,
        &format!("round trip {round_trip}/{}; peak 1.0 {peak_ok}; max |neighbour - exp(-1/8)| {worst_neighbour:.1e}", s * s),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn criterion_6_losses() {
    let p = Tensor::full(&[1, 4], 0.25);
    let d = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
    let worked = match_loss(&p, &d).unwrap();
    // 1.386294 is ln 4 printed to six places
    let worked_ok = (worked - 4f64.ln()).abs() < 1e-9 && format!("{worked:.6}") == "1.386294";

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut bit_exact = 0;
    for _ in 0..50 {
        let (o, k) = (rng.gen_range(2..6), rng.gen_range(1..4));
        let h_raw = kdsm::heatmap::HeatmapStack {
            channels: Tensor::new(vec![o, 4, 4], (0..o * 16).map(|_| rng.gen()).collect()).unwrap(),
            valid: o,
        };
        let g = kdsm::heatmap::HeatmapStack {
            channels: Tensor::new(vec![o, 4, 4], (0..o * 16).map(|_| rng.gen()).collect()).unwrap(),
            valid: o,
        };
        let sel: Vec<usize> = (0..k.min(o)).map(|_| rng.gen_range(0..o)).collect();
        let h = reorder_heatmaps(&h_raw, &sel).unwrap();
        let p = kdsm::matching::predict_p(&rand_tensor(&mut rng, &[k, o], 3.0)).unwrap();
        let mut dm = Tensor::zeros(&[k, o]);
        dm.data_mut()[0] = 1.0;
        let total = total_loss(&h, &g, &p, &dm, 0.0, 1.0).unwrap();
        let mse = heatmap_mse(&h, &g).unwrap();
        bit_exact += usize::from(total.to_bits() == mse.to_bits());
    }
    let ok = worked_ok && bit_exact == 50;
    report(6, ok, &format!("match loss {worked:.9} (ln 4 = {:.9}); alpha=0 total == MSE bit-exact {bit_exact}/50", 4f64.ln()));
    assert!(ok);
}

// ---------------------------------------------------------------- criteria 7-9

struct World {
    samples: Vec<Sample>,
    plans: HashMap<Setting, SplitPlan>,
}

fn world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| {
        let wc = WorldConfig::default();
        assert_eq!((wc.n_species, wc.cats_per_species), (8, 6));
        let w = build_world(&wc).unwrap();
        let samples = (0..w.n_samples()).map(|i| render_world_sample(&w, i).unwrap()).collect();
        let plans = [Setting::A, Setting::B]
            .into_iter()
            .map(|s| (s, make_splits(&w, s, wc.n_folds, wc.seed).unwrap().remove(0)))
            .collect();
        World { samples, plans }
    })
}

#[derive(Clone, Debug)]
struct RunResult {
    pck_02: f64,
    secs: f64,
}

/// Trains fold 1 with the desk preset and evaluates the held-out side;
/// results are shared between criteria.
fn run(mode: Mode, setting: Setting, alpha: f64) -> RunResult {
    static CACHE: OnceLock<Mutex<BTreeMap<String, RunResult>>> = OnceLock::new();
    let key = format!("{mode} {setting} {alpha:e}");
    let cache = CACHE.get_or_init(|| Mutex::new(BTreeMap::new()));
    if let Some(r) = cache.lock().unwrap().get(&key) {
        return r.clone();
    }
    let w = world();
    let plan = &w.plans[&setting];
    let mut cfg = TrainConfig::desk(mode);
    cfg.alpha = alpha;
    let t0 = Instant::now();
    let out = train(&cfg, &w.samples, plan, Start::Fresh, None).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let m = evaluate_split(&out.checkpoint, &w.samples, plan, AssignMode::Max).unwrap();
    println!("  {key}: held-out PCK@0.2 {:.4} PCK@0.05 {:.4} NME {:.2}, {} steps in {secs:.0}s", m.pck_02, m.pck_005, m.nme, out.checkpoint.meta.step);
    let r = RunResult { pck_02: m.pck_02, secs };
    cache.lock().unwrap().insert(key, r.clone());
    r
}

#[test]
fn criterion_7_desk_scale_zero_shot() {
    let _guard = serial();
    let w = world();
    let b = &w.plans[&Setting::B];
    assert_eq!(b.test_species().len(), 2, "Setting B fold holds out two species");
    assert!(w.plans[&Setting::A].test_categories.values().all(|c| c.len() == 2), "Setting A holds out two categories per species");
    let mut ok = true;
    let mut parts = Vec::new();
    for (setting, floor) in [(Setting::B, 0.80), (Setting::A, 0.75)] {
        let k = run(Mode::Kdsm, setting, 1e-6);
        let base = run(Mode::Baseline, setting, 1e-6);
        let margin = k.pck_02 - base.pck_02;
        let fast = k.secs < 600.0 && base.secs < 600.0;
        let this = k.pck_02 >= floor && margin >= 0.10 && fast;
        ok &= this;
        parts.push(format!(
            "Setting {setting}: KDSM {:.4} (target >= {floor}), baseline {:.4}, margin {:+.4} (target >= 0.10), {:.0}s/{:.0}s",
            k.pck_02, base.pck_02, margin, k.secs, base.secs
        ));
    }
    report(7, ok, &parts.join("; "));
    assert!(ok, "{parts:?}");
}

#[test]
fn criterion_8_alpha_ablation_direction() {
    let _guard = serial();
    let with = run(Mode::Kdsm, Setting::B, 1e-6);
    let without = run(Mode::Kdsm, Setting::B, 0.0);
    let ok = without.pck_02 < with.pck_02;
    report(8, ok, &format!("Setting B fold 1 held-out PCK@0.2: alpha=0 {:.4}, alpha=1e-6 {:.4}", without.pck_02, with.pck_02));
    assert!(ok);
}

#[test]
fn criterion_9_determinism() {
    let _guard = serial();
    let w = world();
    let plan = &w.plans[&Setting::B];
    let mut cfg = TrainConfig::desk(Mode::Kdsm);
    cfg.steps = 40;
    let once = || {
        let out = train(&cfg, &w.samples, plan, Start::Fresh, None).unwrap();
        let m = evaluate_split(&out.checkpoint, &w.samples, plan, AssignMode::Max).unwrap();
        (out.checkpoint.to_bytes(), aggregate("kdsm", &[m]).unwrap().to_json())
    };
    let (ck1, rep1) = once();
    let (ck2, rep2) = once();
    let ok = ck1 == ck2 && rep1 == rep2;
    report(
        9,
        ok,
        &format!("checkpoints {} bytes identical {}; reports identical {}", ck1.len(), ck1 == ck2, rep1 == rep2),
    );
    assert!(ok);
}
