//! Procedural keypoint world: species templates drawn from a shared category
//! vocabulary, rendered as glyphs on a noisy background, with the two
//! zero-shot split protocols and train-time augmentation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KdsmError, Result};
use crate::heatmap::KeypointSet;
use crate::nn::{fnv1a64, mix_seed};
use crate::tensor::Tensor;
use crate::text::{build_prompt, PromptSpec};

/// Shared category names with their canonical anchor in the unit square.
pub const VOCABULARY: [(&str, (f64, f64)); 12] = [
    ("left eye", (0.36, 0.18)),
    ("right eye", (0.64, 0.18)),
    ("nose", (0.50, 0.30)),
    ("mouth", (0.50, 0.44)),
    ("left ear", (0.22, 0.04)),
    ("right ear", (0.78, 0.04)),
    ("neck", (0.50, 0.60)),
    ("tail base", (0.50, 0.96)),
    ("left front paw", (0.20, 0.74)),
    ("right front paw", (0.80, 0.74)),
    ("left hind paw", (0.28, 0.98)),
    ("right hind paw", (0.72, 0.98)),
];

const ANIMALS: [&str; 20] = [
    "fox", "owl", "bear", "deer", "lynx", "otter", "crane", "bison", "hare", "wolf", "seal", "yak", "moose", "heron",
    "badger", "camel", "panda", "zebra", "koala", "tapir",
];

pub const GLYPH_RADIUS: i64 = 3;
/// Value of glyph pixels other than the center (which is 1).
pub const GLYPH_LEVEL: f64 = 0.75;
pub const NOISE_LEVEL: f64 = 0.2;
const LAYOUT_SPAN: f64 = 0.7;
const LAYOUT_JITTER: f64 = 0.06;
const FRAME_MARGIN: f64 = 4.0;

/// Whether glyph `id` covers offset `(dx, dy)` from its center.
pub fn glyph_mask(id: usize, dx: i64, dy: i64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match id {
        0 => dx == 0 || dy == 0,
        1 => ax == ay,
        2 => ax.max(ay) == 3,
        3 => ax.max(ay) <= 1,
        4 => ay <= 1,
        5 => ax <= 1,
        6 => ax + ay == 3,
        7 => dx == -3 || dy == 3,
        8 => dy == -3 || dx == 0,
        9 => ax.max(ay) <= 2 && (dx + dy).rem_euclid(2) == 0,
        10 => ax == 3 && ay == 3,
        11 => ax * ax + ay * ay <= 5,
        _ => false,
    }
}

/// Glyph intensity at an offset: 1 at the center, `GLYPH_LEVEL` on the mask.
pub fn glyph_value(id: usize, dx: i64, dy: i64) -> f64 {
    if dx == 0 && dy == 0 {
        1.0
    } else if dx.abs() <= GLYPH_RADIUS && dy.abs() <= GLYPH_RADIUS && glyph_mask(id, dx, dy) {
        GLYPH_LEVEL
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeciesTemplate {
    pub name: String,
    pub categories: Vec<String>,
    pub base_layout: Vec<(f64, f64)>,
    /// Glyph per category, fixed by the category name.
    pub pattern_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_species: usize,
    pub cats_per_species: usize,
    pub samples_per_species: usize,
    pub image_size: usize,
    pub n_folds: usize,
    pub invisible_rate: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_species: 8,
            cats_per_species: 6,
            samples_per_species: 200,
            image_size: 64,
            n_folds: 5,
            invisible_rate: 0.1,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub species: Vec<SpeciesTemplate>,
}

impl World {
    pub fn template(&self, species: &str) -> Option<&SpeciesTemplate> {
        self.species.iter().find(|t| t.name == species)
    }

    pub fn n_samples(&self) -> usize {
        self.species.len() * self.config.samples_per_species
    }

    /// Seed of sample `id`; samples are numbered species-major.
    pub fn instance_seed(&self, id: usize) -> u64 {
        mix_seed(&[self.config.seed, 0x5a3d, id as u64])
    }
}

fn pattern_of(name: &str) -> usize {
    VOCABULARY.iter().position(|(n, _)| *n == name).expect("vocabulary name")
}

pub fn gen_world(n_species: usize, cats_per_species: usize, seed: u64) -> Result<Vec<SpeciesTemplate>> {
    if cats_per_species > VOCABULARY.len() {
        return Err(KdsmError::Config(format!(
            "{cats_per_species} categories per species exceed the {}-name vocabulary",
            VOCABULARY.len()
        )));
    }
    if cats_per_species < 2 {
        return Err(KdsmError::Config("species need at least two categories".into()));
    }
    if n_species == 0 || n_species > ANIMALS.len() {
        return Err(KdsmError::Config(format!("species count must be in 1..={}", ANIMALS.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, fnv1a64(b"world")]));
    let mut animals = ANIMALS.to_vec();
    animals.shuffle(&mut rng);
    let mut out = Vec::with_capacity(n_species);
    for animal in animals.into_iter().take(n_species) {
        let mut idx: Vec<usize> = (0..VOCABULARY.len()).collect();
        idx.shuffle(&mut rng);
        let mut chosen: Vec<usize> = idx.into_iter().take(cats_per_species).collect();
        chosen.sort_unstable();
        let mut categories = Vec::new();
        let mut base_layout = Vec::new();
        let mut pattern_ids = Vec::new();
        for i in chosen {
            let (name, (x, y)) = VOCABULARY[i];
            categories.push(name.to_string());
            base_layout.push((
                x + rng.gen_range(-LAYOUT_JITTER..=LAYOUT_JITTER),
                y + rng.gen_range(-LAYOUT_JITTER..=LAYOUT_JITTER),
            ));
            pattern_ids.push(pattern_of(name));
        }
        out.push(SpeciesTemplate {
            name: format!("{animal} body"),
            categories,
            base_layout,
            pattern_ids,
        });
    }
    Ok(out)
}

pub fn build_world(config: &WorldConfig) -> Result<World> {
    if config.image_size < 32 {
        return Err(KdsmError::Config(format!("image size must be >= 32, got {}", config.image_size)));
    }
    if !(0.0..1.0).contains(&config.invisible_rate) {
        return Err(KdsmError::Config("invisible_rate must be in [0, 1)".into()));
    }
    if config.n_folds == 0 {
        return Err(KdsmError::Config("n_folds must be positive".into()));
    }
    Ok(World {
        config: config.clone(),
        species: gen_world(config.n_species, config.cats_per_species, config.seed)?,
    })
}

/// One rendered instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub kps: KeypointSet,
    pub species: String,
    pub categories: Vec<String>,
    pub prompts: Vec<PromptSpec>,
}

impl Sample {
    pub fn image_size(&self) -> usize {
        self.image.shape()[1]
    }
}

/// Tight box around all keypoints, each side pushed out by 5% of the extent.
pub fn dilated_bbox(coords: &[(f64, f64)]) -> [f64; 4] {
    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(x, y) in coords {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let w = (x1 - x0).max(1.0);
    let h = (y1 - y0).max(1.0);
    [x0 - 0.05 * w, y0 - 0.05 * h, x0 + 1.05 * w, y0 + 1.05 * h]
}

pub fn render_sample(template: &SpeciesTemplate, instance_seed: u64, s: usize) -> Result<Sample> {
    if s < 32 {
        return Err(KdsmError::Config(format!("image size must be >= 32, got {s}")));
    }
    render_with_rate(template, instance_seed, s, 0.1)
}

pub(crate) fn render_with_rate(template: &SpeciesTemplate, instance_seed: u64, s: usize, invisible_rate: f64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(instance_seed);
    let sf = s as f64;
    let lo = FRAME_MARGIN;
    let hi = sf - 1.0 - FRAME_MARGIN;
    let theta = rng.gen_range(-30f64..=30.0).to_radians();
    let mut scale = rng.gen_range(0.8..=1.2);
    let (sin, cos) = theta.sin_cos();
    let place = |scale: f64| -> Vec<(f64, f64)> {
        template
            .base_layout
            .iter()
            .map(|&(ax, ay)| {
                let (ux, uy) = ((ax - 0.5) * LAYOUT_SPAN * sf * scale, (ay - 0.5) * LAYOUT_SPAN * sf * scale);
                (cos * ux - sin * uy, sin * ux + cos * uy)
            })
            .collect()
    };
    let mut pts = place(scale);
    // shrink until the rotated layout fits inside the margins
    loop {
        let (minx, maxx) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.0), a.1.max(p.0)));
        let (miny, maxy) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.1), a.1.max(p.1)));
        if maxx - minx <= hi - lo && maxy - miny <= hi - lo {
            let tx = rng.gen_range((lo - minx)..=(hi - maxx));
            let ty = rng.gen_range((lo - miny)..=(hi - maxy));
            pts.iter_mut().for_each(|p| {
                p.0 = (p.0 + tx).round().clamp(0.0, sf - 1.0);
                p.1 = (p.1 + ty).round().clamp(0.0, sf - 1.0);
            });
            break;
        }
        scale *= 0.95;
        pts = place(scale);
    }

    let mut data: Vec<f64> = (0..s * s).map(|_| rng.gen::<f64>() * NOISE_LEVEL).collect();
    let mut visible = Vec::with_capacity(pts.len());
    for (i, &(x, y)) in pts.iter().enumerate() {
        let vis = rng.gen::<f64>() >= invisible_rate;
        visible.push(vis);
        if !vis {
            continue;
        }
        let (cx, cy) = (x as i64, y as i64);
        for dy in -GLYPH_RADIUS..=GLYPH_RADIUS {
            for dx in -GLYPH_RADIUS..=GLYPH_RADIUS {
                let (px, py) = (cx + dx, cy + dy);
                if px < 0 || py < 0 || px >= s as i64 || py >= s as i64 {
                    continue;
                }
                let v = glyph_value(template.pattern_ids[i], dx, dy);
                let cell = &mut data[py as usize * s + px as usize];
                *cell = cell.max(v);
            }
        }
    }
    let prompts = template
        .categories
        .iter()
        .map(|c| build_prompt(&template.name, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(Sample {
        image: Tensor::new(vec![1, s, s], data)?,
        kps: KeypointSet::new(pts.clone(), visible, dilated_bbox(&pts))?,
        species: template.name.clone(),
        categories: template.categories.clone(),
        prompts,
    })
}

/// Renders sample `id` of the world.
pub fn render_world_sample(world: &World, id: usize) -> Result<Sample> {
    let per = world.config.samples_per_species;
    let t = world
        .species
        .get(id / per)
        .ok_or_else(|| KdsmError::Data(format!("sample {id} out of range")))?;
    render_with_rate(t, world.instance_seed(id), world.config.image_size, world.config.invisible_rate)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setting {
    A,
    B,
}

impl std::str::FromStr for Setting {
    type Err = KdsmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Setting::A),
            "B" | "b" => Ok(Setting::B),
            _ => Err(KdsmError::Usage(format!("setting must be A or B, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Setting::A => "A",
            Setting::B => "B",
        })
    }
}

/// Train/test membership of one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub setting: Setting,
    pub fold: usize,
    pub train_samples: Vec<usize>,
    pub test_samples: Vec<usize>,
    /// Prompted categories per species on each side.
    pub train_categories: BTreeMap<String, Vec<String>>,
    pub test_categories: BTreeMap<String, Vec<String>>,
}

impl SplitPlan {
    pub fn train_species(&self) -> BTreeSet<&str> {
        self.train_categories.keys().map(String::as_str).collect()
    }

    pub fn test_species(&self) -> BTreeSet<&str> {
        self.test_categories.keys().map(String::as_str).collect()
    }
}

/// Number of held-out species per Setting B fold.
pub fn setting_b_test_count(n_species: usize, n_folds: usize) -> usize {
    let frac = (0.15 * n_species as f64).round() as usize;
    frac.max(n_species.div_ceil(n_folds)).max(1)
}

/// Number of held-out categories per species in Setting A.
pub fn setting_a_test_count(n_categories: usize) -> usize {
    ((0.3 * n_categories as f64).round() as usize).clamp(1, n_categories - 1)
}

pub fn make_splits(world: &World, setting: Setting, n_folds: usize, seed: u64) -> Result<Vec<SplitPlan>> {
    if n_folds == 0 {
        return Err(KdsmError::Config("n_folds must be positive".into()));
    }
    let per = world.config.samples_per_species;
    let n = world.species.len();
    let all_cats = |t: &SpeciesTemplate| (t.name.clone(), t.categories.clone());
    let mut plans = Vec::with_capacity(n_folds);
    match setting {
        Setting::B => {
            if n < 5 {
                return Err(KdsmError::Config(format!("Setting B needs at least 5 species, world has {n}")));
            }
            let n_test = setting_b_test_count(n, n_folds);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, fnv1a64(b"settingB")])));
            for fold in 0..n_folds {
                let test: BTreeSet<usize> = (0..n_test).map(|j| order[(fold * n_test + j) % n]).collect();
                let mut plan = SplitPlan {
                    setting,
                    fold: fold + 1,
                    train_samples: Vec::new(),
                    test_samples: Vec::new(),
                    train_categories: BTreeMap::new(),
                    test_categories: BTreeMap::new(),
                };
                for (si, t) in world.species.iter().enumerate() {
                    let ids = (si * per..(si + 1) * per).collect::<Vec<_>>();
                    let (name, cats) = all_cats(t);
                    if test.contains(&si) {
                        plan.test_samples.extend(ids);
                        plan.test_categories.insert(name, cats);
                    } else {
                        plan.train_samples.extend(ids);
                        plan.train_categories.insert(name, cats);
                    }
                }
                plans.push(plan);
            }
        }
        Setting::A => {
            if world.config.cats_per_species < 2 {
                return Err(KdsmError::Config("Setting A needs at least two categories per species".into()));
            }
            if per < 2 {
                return Err(KdsmError::Config("Setting A needs at least two samples per species".into()));
            }
            for fold in 0..n_folds {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, fnv1a64(b"settingA"), fold as u64]));
                // prefer held-out names that other species still train on
                let mut held = Vec::new();
                for attempt in 0..1000 {
                    held = world
                        .species
                        .iter()
                        .map(|t| {
                            let mut idx: Vec<usize> = (0..t.categories.len()).collect();
                            idx.shuffle(&mut rng);
                            let mut h: Vec<usize> = idx.into_iter().take(setting_a_test_count(t.categories.len())).collect();
                            h.sort_unstable();
                            h
                        })
                        .collect::<Vec<_>>();
                    if covered(world, &held) || attempt == 999 {
                        break;
                    }
                }
                let mut plan = SplitPlan {
                    setting,
                    fold: fold + 1,
                    train_samples: Vec::new(),
                    test_samples: Vec::new(),
                    train_categories: BTreeMap::new(),
                    test_categories: BTreeMap::new(),
                };
                for (si, t) in world.species.iter().enumerate() {
                    for i in 0..per {
                        let id = si * per + i;
                        if i % n_folds.min(per) == fold % n_folds.min(per) {
                            plan.test_samples.push(id);
                        } else {
                            plan.train_samples.push(id);
                        }
                    }
                    let (tr, te): (Vec<_>, Vec<_>) = t
                        .categories
                        .iter()
                        .enumerate()
                        .partition(|(ci, _)| !held[si].contains(ci));
                    plan.train_categories.insert(t.name.clone(), tr.into_iter().map(|(_, c)| c.clone()).collect());
                    plan.test_categories.insert(t.name.clone(), te.into_iter().map(|(_, c)| c.clone()).collect());
                }
                plans.push(plan);
            }
        }
    }
    Ok(plans)
}

/// Every held-out name is trained on in at least one other species.
fn covered(world: &World, held: &[Vec<usize>]) -> bool {
    let mut trained: BTreeSet<&str> = BTreeSet::new();
    for (si, t) in world.species.iter().enumerate() {
        for (ci, c) in t.categories.iter().enumerate() {
            if !held[si].contains(&ci) {
                trained.insert(c);
            }
        }
    }
    world
        .species
        .iter()
        .enumerate()
        .all(|(si, t)| held[si].iter().all(|&ci| trained.contains(t.categories[ci].as_str())))
}

/// Augmentation draw: scale factor and rotation in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub rotation_deg: f64,
}

pub const AUG_SCALE: f64 = 0.15;
pub const AUG_ROTATION_DEG: f64 = 15.0;

pub fn draw_augment(seed: u64) -> AugmentParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AugmentParams {
        scale: 1.0 + rng.gen_range(-AUG_SCALE..=AUG_SCALE),
        rotation_deg: rng.gen_range(-AUG_ROTATION_DEG..=AUG_ROTATION_DEG),
    }
}

pub fn augment(sample: &Sample, seed: u64) -> Result<Sample> {
    augment_with(sample, draw_augment(seed))
}

/// Scales and rotates image and keypoints about the image center (bilinear
/// resampling, zero fill). Keypoints leaving the frame become invisible.
pub fn augment_with(sample: &Sample, a: AugmentParams) -> Result<Sample> {
    let (_, h, w) = sample.image.dims3()?;
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = a.rotation_deg.to_radians().sin_cos();
    let fwd = |x: f64, y: f64| {
        let (ux, uy) = ((x - cx) * a.scale, (y - cy) * a.scale);
        (cx + cos * ux - sin * uy, cy + sin * ux + cos * uy)
    };
    let src = sample.image.data();
    let at = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0.0
        } else {
            src[y as usize * w + x as usize]
        }
    };
    let mut out = vec![0.0; w * h];
    for py in 0..h {
        for px in 0..w {
            // inverse map
            let (dx, dy) = (px as f64 - cx, py as f64 - cy);
            let sx = cx + (cos * dx + sin * dy) / a.scale;
            let sy = cy + (-sin * dx + cos * dy) / a.scale;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let v = if fx == 0.0 && fy == 0.0 {
                at(x0, y0)
            } else {
                (1.0 - fx) * (1.0 - fy) * at(x0, y0)
                    + fx * (1.0 - fy) * at(x0 + 1, y0)
                    + (1.0 - fx) * fy * at(x0, y0 + 1)
                    + fx * fy * at(x0 + 1, y0 + 1)
            };
            out[py * w + px] = v;
        }
    }
    let coords: Vec<(f64, f64)> = sample.kps.coords.iter().map(|&(x, y)| fwd(x, y)).collect();
    let visible = coords
        .iter()
        .zip(&sample.kps.visible)
        .map(|(&(x, y), &v)| v && x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64)
        .collect();
    Ok(Sample {
        image: Tensor::new(vec![1, h, w], out)?,
        kps: KeypointSet::new(coords.clone(), visible, dilated_bbox(&coords))?,
        species: sample.species.clone(),
        categories: sample.categories.clone(),
        prompts: sample.prompts.clone(),
    })
}

/// Non-learned oracle: for each keypoint, the location whose 7x7
/// neighborhood best matches (least squares) the category's glyph, the
/// neighborhood's other pixels compared against the mean background level.
pub fn template_match(image: &Tensor, pattern_id: usize) -> Result<(usize, usize)> {
    let (_, h, w) = image.dims3()?;
    let d = image.data();
    let bg = NOISE_LEVEL / 2.0;
    let mut best = (0, 0);
    let mut best_cost = f64::INFINITY;
    for cy in 0..h as i64 {
        for cx in 0..w as i64 {
            let mut cost = 0.0;
            for dy in -GLYPH_RADIUS..=GLYPH_RADIUS {
                for dx in -GLYPH_RADIUS..=GLYPH_RADIUS {
                    let (px, py) = (cx + dx, cy + dy);
                    if px < 0 || py < 0 || px >= w as i64 || py >= h as i64 {
                        continue;
                    }
                    let t = glyph_value(pattern_id, dx, dy);
                    let expect = if t > 0.0 { t } else { bg };
                    let v = d[py as usize * w + px as usize];
                    cost += (v - expect) * (v - expect);
                }
            }
            if cost < best_cost {
                best_cost = cost;
                best = (cx as usize, cy as usize);
            }
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// dataset directory

/// 8-bit binary PGM.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let (_, h, w) = image.dims3()?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, bytes).map_err(|e| KdsmError::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| KdsmError::io(path, e))?;
    parse_pgm(&bytes).map_err(|e| KdsmError::Data(format!("{}: {e}", path.display())))
}

pub fn parse_pgm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format!("not a binary PGM (magic {:?})", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PGM header field {s:?}"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported PGM maxval {maxval}"));
    }
    pos += 1; // single whitespace before the raster
    let raster = bytes.get(pos..pos + w * h).ok_or("truncated PGM raster")?;
    let data = raster.iter().map(|&b| f64::from(b) / maxval as f64).collect();
    Tensor::new(vec![1, h, w], data).map_err(|e| e.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub species: String,
    pub categories: Vec<String>,
    pub prompts: Vec<String>,
    pub keypoints: Vec<(f64, f64)>,
    pub visible: Vec<bool>,
    pub bbox: [f64; 4],
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| KdsmError::Data(e.to_string()))?;
    std::fs::write(path, s + "\n").map_err(|e| KdsmError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| KdsmError::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| KdsmError::Data(format!("{}: {e}", path.display())))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| KdsmError::io(path, e))
}

pub fn split_file_name(setting: Setting, fold: usize) -> String {
    format!("setting{setting}_fold{fold}.json")
}

/// Renders the world and writes the dataset directory.
pub fn write_dataset(config: &WorldConfig, out: &Path) -> Result<World> {
    let world = build_world(config)?;
    mkdir(&out.join("samples"))?;
    mkdir(&out.join("splits"))?;
    write_json(&out.join("world.json"), &world)?;
    for id in 0..world.n_samples() {
        let s = render_world_sample(&world, id)?;
        write_pgm(&out.join(format!("samples/{id:04}.pgm")), &s.image)?;
        let rec = SampleRecord {
            id,
            species: s.species.clone(),
            categories: s.categories.clone(),
            prompts: s.prompts.iter().map(|p| p.rendered.clone()).collect(),
            keypoints: s.kps.coords.clone(),
            visible: s.kps.visible.clone(),
            bbox: s.kps.bbox,
        };
        write_json(&out.join(format!("samples/{id:04}.json")), &rec)?;
    }
    for setting in [Setting::A, Setting::B] {
        for plan in make_splits(&world, setting, config.n_folds, config.seed)? {
            write_json(&out.join("splits").join(split_file_name(setting, plan.fold)), &plan)?;
        }
    }
    Ok(world)
}

/// A dataset directory loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub world: World,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let world: World = read_json(&root.join("world.json"))?;
        let mut samples = Vec::with_capacity(world.n_samples());
        for id in 0..world.n_samples() {
            let rec: SampleRecord = read_json(&root.join(format!("samples/{id:04}.json")))?;
            if rec.id != id {
                return Err(KdsmError::Data(format!("sample file {id:04} holds id {}", rec.id)));
            }
            let image = read_pgm(&root.join(format!("samples/{id:04}.pgm")))?;
            let prompts = rec
                .categories
                .iter()
                .map(|c| build_prompt(&rec.species, c))
                .collect::<Result<Vec<_>>>()?;
            let kps = KeypointSet::new(rec.keypoints, rec.visible, rec.bbox)
                .map_err(|e| KdsmError::Data(format!("sample {id}: {e}")))?;
            samples.push(Sample {
                image,
                kps,
                species: rec.species,
                categories: rec.categories,
                prompts,
            });
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            world,
            samples,
        })
    }

    pub fn split(&self, setting: Setting, fold: usize) -> Result<SplitPlan> {
        let plan: SplitPlan = read_json(&self.root.join("splits").join(split_file_name(setting, fold)))?;
        if let Some(&bad) = plan
            .train_samples
            .iter()
            .chain(&plan.test_samples)
            .find(|&&i| i >= self.samples.len())
        {
            return Err(KdsmError::Data(format!("split references unknown sample {bad}")));
        }
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_are_distinct() {
        for a in 0..12 {
            for b in 0..a {
                let differ = (-3..=3).any(|dy| (-3..=3).any(|dx| glyph_mask(a, dx, dy) != glyph_mask(b, dx, dy)));
                assert!(differ, "glyphs {a} and {b} coincide");
            }
        }
    }

    #[test]
    fn world_is_deterministic_and_shares_patterns() {
        let a = gen_world(8, 6, 7).unwrap();
        assert_eq!(a, gen_world(8, 6, 7).unwrap());
        assert!(a.iter().all(|t| t.categories.len() == 6));
        let mut by_name: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
        for t in &a {
            for (c, &p) in t.categories.iter().zip(&t.pattern_ids) {
                by_name.entry(c).or_default().insert(p);
            }
        }
        assert!(by_name.values().all(|s| s.len() == 1));
        assert!(matches!(gen_world(8, 13, 7), Err(KdsmError::Config(_))));
    }

    #[test]
    fn rendering_is_reproducible_and_in_frame() {
        let w = gen_world(4, 6, 1).unwrap();
        for seed in 0..20 {
            let s = render_sample(&w[seed as usize % 4], seed, 64).unwrap();
            assert_eq!(s, render_sample(&w[seed as usize % 4], seed, 64).unwrap());
            for (&(x, y), &v) in s.kps.coords.iter().zip(&s.kps.visible) {
                assert!((0.0..64.0).contains(&x) && (0.0..64.0).contains(&y));
                if v {
                    assert_eq!(s.image.data()[y as usize * 64 + x as usize], 1.0);
                }
            }
        }
    }

    #[test]
    fn zero_augment_is_identity() {
        let w = gen_world(1, 4, 2).unwrap();
        let s = render_sample(&w[0], 3, 64).unwrap();
        let a = augment_with(&s, AugmentParams { scale: 1.0, rotation_deg: 0.0 }).unwrap();
        assert_eq!(a.image, s.image);
        assert_eq!(a.kps.coords, s.kps.coords);
        for seed in 0..50 {
            let p = draw_augment(seed);
            assert!((p.scale - 1.0).abs() <= AUG_SCALE && p.rotation_deg.abs() <= AUG_ROTATION_DEG);
        }
    }

    #[test]
    fn setting_b_rotation_covers_all_species() {
        let world = build_world(&WorldConfig::default()).unwrap();
        let plans = make_splits(&world, Setting::B, 5, 3).unwrap();
        let mut novel = BTreeSet::new();
        for p in &plans {
            assert_eq!(p.test_species().len(), 2);
            assert!(p.train_species().is_disjoint(&p.test_species()));
            novel.extend(p.test_species().into_iter().map(str::to_string));
        }
        assert_eq!(novel.len(), 8);
    }

    #[test]
    fn setting_a_category_sets_are_disjoint() {
        let world = build_world(&WorldConfig::default()).unwrap();
        for p in make_splits(&world, Setting::A, 5, 3).unwrap() {
            for (sp, te) in &p.test_categories {
                assert_eq!(te.len(), 2);
                let tr = &p.train_categories[sp];
                assert_eq!(tr.len(), 4);
                assert!(te.iter().all(|c| !tr.contains(c)));
            }
            let train: BTreeSet<_> = p.train_samples.iter().collect();
            assert!(p.test_samples.iter().all(|i| !train.contains(i)));
        }
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(vec![1, 2, 3], vec![0.0, 1.0, 0.5, 0.2, 0.8, 1.0]).unwrap();
        let p = dir.path().join("x.pgm");
        write_pgm(&p, &t).unwrap();
        let back = read_pgm(&p).unwrap();
        assert_eq!(back.shape(), &[1, 2, 3]);
        assert!(back.max_abs_diff(&t) <= 0.5 / 255.0 + 1e-12);
        assert!(parse_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\x01").is_err());
    }
}
