//! Constrained k-means over keypoint-category embeddings and the per-sample
//! binary domain matrices derived from it.
//!
//! Categories of one species must land in pairwise-distinct groups; the
//! assignment step solves that exactly, species by species.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{KdsmError, Result};
use crate::hungarian;
use crate::kemb::{put_string, Reader};
use crate::tensor::Tensor;

pub const GROUPING_MAGIC: &[u8; 4] = b"KGRP";
pub const GROUPING_VERSION: u32 = 1;

pub const DEFAULT_MAX_ITER: usize = 100;

/// (species, keypoint category)
pub type PairKey = (String, String);

#[derive(Clone, Debug, PartialEq)]
pub struct Grouping {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: BTreeMap<PairKey, usize>,
}

/// Objective values recorded during clustering. Entries alternate between
/// "after assignment" and "after centroid update" and never increase.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KmeansTrace {
    pub objectives: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid, ties to the lower index.
fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

fn kmeans_pp(points: &[&[f64]], o: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < o {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && r < w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        } else {
            rng.gen_range(0..points.len())
        };
        let c = points[pick].to_vec();
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn objective(points: &[&[f64]], labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l]))
        .sum()
}

/// Constrained assignment step: exact per-species assignment to distinct
/// clusters, nearest centroid for species with a single category.
fn assign(points: &[&[f64]], species_members: &[Vec<usize>], centroids: &[Vec<f64>]) -> Result<Vec<usize>> {
    let o = centroids.len();
    let mut labels = vec![0; points.len()];
    for members in species_members {
        if members.len() == 1 {
            labels[members[0]] = nearest(points[members[0]], centroids);
            continue;
        }
        let mut cost = Vec::with_capacity(members.len() * o);
        for &m in members {
            cost.extend(centroids.iter().map(|c| sq_dist(points[m], c)));
        }
        let cols = hungarian::solve(&cost, members.len(), o)?;
        for (&m, c) in members.iter().zip(cols) {
            labels[m] = c;
        }
    }
    Ok(labels)
}

/// Lloyd iterations under the same-species-distinct-groups constraint.
pub fn constrained_kmeans(
    embeddings: &[(PairKey, Vec<f64>)],
    o: usize,
    seed: u64,
    max_iter: usize,
) -> Result<Grouping> {
    constrained_kmeans_traced(embeddings, o, seed, max_iter).map(|(g, _)| g)
}

pub fn constrained_kmeans_traced(
    embeddings: &[(PairKey, Vec<f64>)],
    o: usize,
    seed: u64,
    max_iter: usize,
) -> Result<(Grouping, KmeansTrace)> {
    if embeddings.is_empty() {
        return Err(KdsmError::Config("no categories to cluster".into()));
    }
    if o == 0 {
        return Err(KdsmError::Config("group count must be positive".into()));
    }
    let dim = embeddings[0].1.len();
    if let Some(((s, c), v)) = embeddings.iter().find(|(_, v)| v.len() != dim) {
        return Err(KdsmError::Dimension {
            op: "constrained_kmeans",
            lhs: vec![dim],
            rhs: vec![v.len(), s.len(), c.len()],
        });
    }
    let mut seen = BTreeSet::new();
    let mut by_species: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, ((s, c), _)) in embeddings.iter().enumerate() {
        if !seen.insert((s, c)) {
            return Err(KdsmError::Validation(format!("duplicate pair ({s}, {c})")));
        }
        by_species.entry(s.as_str()).or_default().push(i);
    }
    let offending: Vec<String> = by_species
        .iter()
        .filter(|(_, m)| m.len() > o)
        .map(|(s, m)| format!("{s} ({} categories)", m.len()))
        .collect();
    if !offending.is_empty() {
        return Err(KdsmError::Config(format!(
            "O={o} groups cannot separate the categories of: {}",
            offending.join(", ")
        )));
    }
    let species_members: Vec<Vec<usize>> = by_species.into_values().collect();
    let points: Vec<&[f64]> = embeddings.iter().map(|(_, v)| v.as_slice()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(&points, o, &mut rng);
    let mut trace = KmeansTrace::default();
    let mut labels: Option<Vec<usize>> = None;
    for it in 0..max_iter.max(1) {
        let new_labels = assign(&points, &species_members, &centroids)?;
        trace.objectives.push(objective(&points, &new_labels, &centroids));
        trace.iterations = it + 1;
        let stable = labels.as_ref() == Some(&new_labels);
        labels = Some(new_labels);
        if stable {
            trace.converged = true;
            break;
        }
        let labels = labels.as_ref().expect("labels set above");

        // member means
        let mut sums = vec![vec![0.0; dim]; o];
        let mut counts = vec![0usize; o];
        for (p, &l) in points.iter().zip(labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        let mut used_for_reseed = BTreeSet::new();
        for j in 0..o {
            if counts[j] > 0 {
                let n = counts[j] as f64;
                centroids[j] = sums[j].iter().map(|s| s / n).collect();
            }
        }
        // empty clusters move to the point farthest from its own centroid
        for j in 0..o {
            if counts[j] > 0 {
                continue;
            }
            let mut far = None;
            let mut far_d = 0.0;
            for (i, (p, &l)) in points.iter().zip(labels).enumerate() {
                if used_for_reseed.contains(&i) {
                    continue;
                }
                let d = sq_dist(p, &centroids[l]);
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
            if let Some(i) = far {
                used_for_reseed.insert(i);
                centroids[j] = points[i].to_vec();
            }
        }
        trace.objectives.push(objective(&points, labels, &centroids));
    }
    let labels = labels.expect("at least one iteration");
    let assignment = embeddings
        .iter()
        .zip(&labels)
        .map(|((k, _), &l)| (k.clone(), l))
        .collect();
    Ok((Grouping { centroids, assignment }, trace))
}

impl Grouping {
    pub fn o(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    pub fn group_of(&self, species: &str, category: &str) -> Option<usize> {
        self.assignment
            .get(&(species.to_string(), category.to_string()))
            .copied()
    }

    /// Within-group sum of squared distances to the group means.
    pub fn objective(&self, embeddings: &[(PairKey, Vec<f64>)]) -> Result<f64> {
        let mut groups: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
        for (k, v) in embeddings {
            let g = self
                .assignment
                .get(k)
                .ok_or_else(|| KdsmError::Lookup(format!("pair {k:?} not in grouping")))?;
            groups.entry(*g).or_default().push(v);
        }
        Ok(groups.values().map(|m| within_sse(m)).sum())
    }

    /// Checks the distinct-groups constraint and index bounds.
    pub fn validate(&self) -> Result<()> {
        let mut per_species: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
        for ((s, c), &g) in &self.assignment {
            if g >= self.o() {
                return Err(KdsmError::Validation(format!("({s}, {c}) -> group {g} >= O={}", self.o())));
            }
            if !per_species.entry(s).or_default().insert(g) {
                return Err(KdsmError::Validation(format!("species {s} has two categories in group {g}")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(GROUPING_MAGIC);
        out.extend_from_slice(&GROUPING_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.o() as u32).to_le_bytes());
        for c in &self.centroids {
            for x in c {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.assignment.len() as u32).to_le_bytes());
        for ((s, c), &g) in &self.assignment {
            put_string(&mut out, s);
            put_string(&mut out, c);
            out.extend_from_slice(&(g as u32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let g = Self::read(&mut r)?;
        if !r.is_empty() {
            return Err(KdsmError::Parse("trailing bytes after grouping".into()));
        }
        Ok(g)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        if r.take(4, "grouping magic")? != GROUPING_MAGIC {
            return Err(KdsmError::Parse("bad magic in grouping section".into()));
        }
        let version = r.u32("grouping version")?;
        if version != GROUPING_VERSION {
            return Err(KdsmError::Version {
                found: version,
                expected: GROUPING_VERSION,
            });
        }
        let dim = r.u32("grouping dim")? as usize;
        let o = r.u32("group count")? as usize;
        let mut centroids = Vec::with_capacity(o);
        for _ in 0..o {
            let mut c = Vec::with_capacity(dim);
            for _ in 0..dim {
                c.push(r.f64("centroid")?);
            }
            centroids.push(c);
        }
        let n = r.u32("assignment count")? as usize;
        let mut assignment = BTreeMap::new();
        for _ in 0..n {
            let s = r.string("species")?;
            let c = r.string("category")?;
            let g = r.u32("group")? as usize;
            if assignment.insert((s.clone(), c.clone()), g).is_some() {
                return Err(KdsmError::Parse(format!("duplicate pair ({s}, {c})")));
            }
        }
        let g = Grouping { centroids, assignment };
        g.validate()?;
        Ok(g)
    }

    /// Tab-separated `species  category  group` listing.
    pub fn sidecar(&self) -> String {
        let mut s = String::from("# species\tcategory\tgroup\n");
        for ((sp, c), g) in &self.assignment {
            let _ = writeln!(s, "{sp}\t{c}\t{g}");
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| KdsmError::io(path, e))?;
        let side = path.with_extension("txt");
        std::fs::write(&side, self.sidecar()).map_err(|e| KdsmError::io(side, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| KdsmError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn within_sse(members: &[&[f64]]) -> f64 {
    let dim = members[0].len();
    let n = members.len() as f64;
    let mut mean = vec![0.0; dim];
    for m in members {
        for (a, x) in mean.iter_mut().zip(m.iter()) {
            *a += x / n;
        }
    }
    members.iter().map(|m| sq_dist(m, &mean)).sum()
}

/// Binary K x O matrix with one-hot rows for valid prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainMatrix {
    pub d: Tensor,
    pub k_valid: usize,
}

impl DomainMatrix {
    /// Selected group of each valid row.
    pub fn selections(&self) -> Vec<usize> {
        let o = self.d.shape()[1];
        (0..self.k_valid)
            .map(|i| {
                self.d.row(i)
                    .iter()
                    .position(|&v| v == 1.0)
                    .unwrap_or_else(|| panic!("row {i} of a domain matrix has no selection (O={o})"))
            })
            .collect()
    }
}

pub fn build_domain_matrix(prompts: &[(String, String)], grouping: &Grouping, k: usize) -> Result<DomainMatrix> {
    if prompts.len() > k {
        return Err(KdsmError::Capacity {
            got: prompts.len(),
            capacity: k,
        });
    }
    let o = grouping.o();
    let mut d = Tensor::zeros(&[k, o]);
    let mut used = BTreeSet::new();
    for (i, (s, c)) in prompts.iter().enumerate() {
        let g = grouping
            .group_of(s, c)
            .ok_or_else(|| KdsmError::Lookup(format!("({s}, {c}) was not clustered")))?;
        assert!(used.insert(g), "two prompts of one sample share group {g}");
        d.data_mut()[i * o + g] = 1.0;
    }
    Ok(DomainMatrix {
        d,
        k_valid: prompts.len(),
    })
}
