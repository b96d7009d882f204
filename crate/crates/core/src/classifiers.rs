//! Random forest over QIF or fused CNN+QIF vectors, and the size-only
//! logistic baseline.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{expect_len, frame, unframe};
use crate::nn::FEATURE_UNITS;
use crate::qif::N_FEATURES;
use crate::{seed, Error, Result};

pub const NDXF_MAGIC: &[u8; 4] = b"NDXF";
pub const NDXL_MAGIC: &[u8; 4] = b"NDXL";
pub const MODEL_VERSION: u32 = 1;
pub const DEFAULT_TREES: usize = 1000;
pub const FUSED_LEN: usize = FEATURE_UNITS + N_FEATURES;

/// CNN features at 0..200, QIF at 200..250.
pub fn concat_features(cnn: &[f64], qif: &[f64]) -> Result<Vec<f64>> {
    if cnn.len() != FEATURE_UNITS {
        return Err(Error::LengthMismatch {
            expected: FEATURE_UNITS,
            found: cnn.len(),
        });
    }
    if qif.len() != N_FEATURES {
        return Err(Error::LengthMismatch {
            expected: N_FEATURES,
            found: qif.len(),
        });
    }
    let mut v = Vec::with_capacity(FUSED_LEN);
    v.extend_from_slice(cnn);
    v.extend_from_slice(qif);
    Ok(v)
}

pub fn mtry_for(p: usize) -> usize {
    ((p as f64).sqrt().floor() as usize).max(1)
}

/// One node of a flattened tree. Leaves have `feature == -1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub feature: i32,
    pub threshold: f64,
    pub left: u32,
    pub right: u32,
    /// Bootstrap class counts reaching this node.
    pub counts: [u32; 2],
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.feature < 0
    }

    /// Leaf majority; ties vote positive.
    pub fn vote(&self) -> u8 {
        u8::from(self.counts[1] >= self.counts[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_for(&self, x: &[f64]) -> &Node {
        let mut n = &self.nodes[0];
        while !n.is_leaf() {
            n = if x[n.feature as usize] <= n.threshold {
                &self.nodes[n.left as usize]
            } else {
                &self.nodes[n.right as usize]
            };
        }
        n
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        self.leaf_for(x).vote()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            let n = &t.nodes[i];
            if n.is_leaf() {
                0
            } else {
                1 + go(t, n.left as usize).max(go(t, n.right as usize))
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub n_features: usize,
    pub mtry: usize,
    pub seed: u64,
    pub trees: Vec<Tree>,
}

impl ForestModel {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }
}

fn check_xy(x: &[Vec<f64>], y: &[u8]) -> Result<usize> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    if x.len() < 2 || !y.contains(&0) || !y.contains(&1) {
        return Err(Error::SingleClassTrainingSet);
    }
    if let Some(&l) = y.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidInput(format!("label {l} not in {{0, 1}}")));
    }
    let p = x[0].len();
    if p == 0 {
        return Err(Error::InvalidInput("no features".into()));
    }
    for row in x {
        if row.len() != p {
            return Err(Error::LengthMismatch {
                expected: p,
                found: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
    }
    Ok(p)
}

pub fn train_forest(x: &[Vec<f64>], y: &[u8], n_trees: usize, seed: u64) -> Result<ForestModel> {
    let p = check_xy(x, y)?;
    if n_trees == 0 {
        return Err(Error::InvalidInput("n_trees must be >= 1".into()));
    }
    let mtry = mtry_for(p);
    let trees = (0..n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = seed::rng(seed ^ t as u64);
            let boot: Vec<usize> = (0..x.len()).map(|_| rng.gen_range(0..x.len())).collect();
            grow_tree(x, y, boot, mtry, &mut rng)
        })
        .collect();
    Ok(ForestModel {
        n_features: p,
        mtry,
        seed,
        trees,
    })
}

fn counts(y: &[u8], idx: &[usize]) -> [u32; 2] {
    let mut c = [0u32; 2];
    for &i in idx {
        c[y[i] as usize] += 1;
    }
    c
}

fn gini_weighted(c: [u32; 2]) -> f64 {
    let n = (c[0] + c[1]) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let (a, b) = (c[0] as f64, c[1] as f64);
    n - (a * a + b * b) / n
}

/// Best split of `idx` on feature `f`: (weighted impurity, threshold).
fn best_split(x: &[Vec<f64>], y: &[u8], idx: &[usize], f: usize) -> Option<(f64, f64)> {
    let mut vals: Vec<(f64, u8)> = idx.iter().map(|&i| (x[i][f], y[i])).collect();
    vals.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total = counts(y, idx);
    let mut left = [0u32; 2];
    let mut best: Option<(f64, f64)> = None;
    for k in 0..vals.len() - 1 {
        left[vals[k].1 as usize] += 1;
        if vals[k].0 == vals[k + 1].0 {
            continue;
        }
        let right = [total[0] - left[0], total[1] - left[1]];
        let imp = gini_weighted(left) + gini_weighted(right);
        if best.is_none_or(|(b, _)| imp < b) {
            let mid = vals[k].0 + (vals[k + 1].0 - vals[k].0) / 2.0;
            // guard against the midpoint rounding onto the upper value
            let thr = if mid < vals[k + 1].0 { mid } else { vals[k].0 };
            best = Some((imp, thr));
        }
    }
    best
}

fn grow_tree(x: &[Vec<f64>], y: &[u8], boot: Vec<usize>, mtry: usize, rng: &mut impl Rng) -> Tree {
    let p = x[0].len();
    let mut nodes = vec![Node {
        feature: -1,
        threshold: 0.0,
        left: 0,
        right: 0,
        counts: counts(y, &boot),
    }];
    let mut stack = vec![(0usize, boot)];
    let mut features: Vec<usize> = (0..p).collect();
    while let Some((ni, idx)) = stack.pop() {
        let c = nodes[ni].counts;
        if c[0] == 0 || c[1] == 0 {
            continue;
        }
        features.shuffle(rng);
        let mut best: Option<(f64, f64, usize)> = None;
        for (tried, &f) in features.iter().enumerate() {
            // past mtry, keep drawing only until some valid split exists
            if tried >= mtry && best.is_some() {
                break;
            }
            if let Some((imp, thr)) = best_split(x, y, &idx, f) {
                if best.is_none_or(|(b, _, _)| imp < b) {
                    best = Some((imp, thr, f));
                }
            }
        }
        let Some((_, thr, f)) = best else { continue };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| x[i][f] <= thr);
        let li = nodes.len();
        for side in [&l, &r] {
            nodes.push(Node {
                feature: -1,
                threshold: 0.0,
                left: 0,
                right: 0,
                counts: counts(y, side),
            });
        }
        nodes[ni] = Node {
            feature: f as i32,
            threshold: thr,
            left: li as u32,
            right: li as u32 + 1,
            counts: c,
        };
        stack.push((li + 1, r));
        stack.push((li, l));
    }
    Tree { nodes }
}

/// Fraction of trees voting positive.
pub fn forest_proba(model: &ForestModel, x: &[f64]) -> Result<f64> {
    if x.len() != model.n_features {
        return Err(Error::LengthMismatch {
            expected: model.n_features,
            found: x.len(),
        });
    }
    let votes: usize = model.trees.iter().map(|t| t.predict(x) as usize).sum();
    Ok(votes as f64 / model.trees.len() as f64)
}

pub fn forest_proba_many(model: &ForestModel, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
    xs.iter().map(|x| forest_proba(model, x)).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct NdxfHeader {
    n_features: usize,
    mtry: usize,
    seed: u64,
    tree_sizes: Vec<usize>,
}

const NODE_BYTES: usize = 4 + 8 + 4 * 4;

/// NDXF framing, JSON tree manifest, then fixed-width nodes.
pub fn encode_forest(model: &ForestModel) -> Result<Vec<u8>> {
    let header = NdxfHeader {
        n_features: model.n_features,
        mtry: model.mtry,
        seed: model.seed,
        tree_sizes: model.trees.iter().map(|t| t.nodes.len()).collect(),
    };
    let total: usize = header.tree_sizes.iter().sum();
    let mut payload = Vec::with_capacity(total * NODE_BYTES);
    for n in model.trees.iter().flat_map(|t| &t.nodes) {
        payload.extend_from_slice(&n.feature.to_le_bytes());
        payload.extend_from_slice(&n.threshold.to_le_bytes());
        for v in [n.left, n.right, n.counts[0], n.counts[1]] {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(frame(NDXF_MAGIC, MODEL_VERSION, &serde_json::to_vec(&header)?, &payload))
}

pub fn decode_forest(bytes: &[u8]) -> Result<ForestModel> {
    let (hjson, payload) = unframe(NDXF_MAGIC, MODEL_VERSION, bytes)?;
    let h: NdxfHeader = serde_json::from_slice(hjson)
        .map_err(|e| Error::TruncatedPayload(format!("header: {e}")))?;
    let total: usize = h.tree_sizes.iter().sum();
    expect_len(payload, total * NODE_BYTES)?;
    let u32_at = |b: &[u8], o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
    let mut chunks = payload.chunks_exact(NODE_BYTES);
    let mut trees = Vec::with_capacity(h.tree_sizes.len());
    for &size in &h.tree_sizes {
        let mut nodes = Vec::with_capacity(size);
        for _ in 0..size {
            let b = chunks.next().expect("length checked");
            let node = Node {
                feature: i32::from_le_bytes(b[0..4].try_into().unwrap()),
                threshold: f64::from_le_bytes(b[4..12].try_into().unwrap()),
                left: u32_at(b, 12),
                right: u32_at(b, 16),
                counts: [u32_at(b, 20), u32_at(b, 24)],
            };
            let in_range = |i: u32| (i as usize) < size;
            if !node.is_leaf()
                && (node.feature as usize >= h.n_features || !in_range(node.left) || !in_range(node.right))
            {
                return Err(Error::InvalidInput("forest node index out of range".into()));
            }
            nodes.push(node);
        }
        if nodes.is_empty() {
            return Err(Error::InvalidInput("empty tree".into()));
        }
        trees.push(Tree { nodes });
    }
    Ok(ForestModel {
        n_features: h.n_features,
        mtry: h.mtry,
        seed: h.seed,
        trees,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub intercept: f64,
    pub slope: f64,
    pub converged: bool,
    pub iterations: usize,
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn logistic_proba(model: &LogisticModel, x: f64) -> f64 {
    sigmoid(model.intercept + model.slope * x)
}

/// Bernoulli log-likelihood of η = b0 + b1 z.
fn log_likelihood(b: [f64; 2], z: &[f64], y: &[u8]) -> f64 {
    z.iter()
        .zip(y)
        .map(|(&zi, &yi)| {
            let eta = b[0] + b[1] * zi;
            // log(1 + e^eta), stable
            let sp = if eta > 0.0 {
                eta + (-eta).exp().ln_1p()
            } else {
                eta.exp().ln_1p()
            };
            yi as f64 * eta - sp
        })
        .sum()
}

pub fn fit_logistic(x: &[f64], y: &[u8]) -> Result<LogisticModel> {
    Ok(fit_logistic_trace(x, y)?.0)
}

/// IRLS with step halving; also returns the log-likelihood after each
/// accepted iterate, starting from β = 0.
pub fn fit_logistic_trace(x: &[f64], y: &[u8]) -> Result<(LogisticModel, Vec<f64>)> {
    const MAX_ITER: usize = 100;
    const TOL: f64 = 1e-8;
    const DIVERGED: f64 = 1e4;
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    if x.len() < 2 || !y.contains(&0) || !y.contains(&1) {
        return Err(Error::SingleClassTrainingSet);
    }
    if x.iter().any(|v| !v.is_finite()) || y.iter().any(|&l| l > 1) {
        return Err(Error::InvalidInput("non-finite x or non-binary label".into()));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        let pbar = y.iter().map(|&l| l as f64).sum::<f64>() / n;
        let m = LogisticModel {
            intercept: (pbar / (1.0 - pbar)).ln(),
            slope: 0.0,
            converged: true,
            iterations: 0,
        };
        let ll = log_likelihood([m.intercept, 0.0], &vec![0.0; x.len()], y);
        return Ok((m, vec![ll]));
    }
    let z: Vec<f64> = x.iter().map(|v| (v - mean) / sd).collect();
    let mut b = [0.0f64; 2];
    let mut ll = log_likelihood(b, &z, y);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=MAX_ITER {
        iterations = it;
        let (mut g, mut h) = ([0.0f64; 2], [0.0f64; 3]);
        for (&zi, &yi) in z.iter().zip(y) {
            let p = sigmoid(b[0] + b[1] * zi);
            let w = p * (1.0 - p);
            let r = yi as f64 - p;
            g[0] += r;
            g[1] += r * zi;
            h[0] += w;
            h[1] += w * zi;
            h[2] += w * zi * zi;
        }
        let det = h[0] * h[2] - h[1] * h[1];
        if !(det.is_finite() && det > 1e-300) {
            break;
        }
        let step = [(h[2] * g[0] - h[1] * g[1]) / det, (h[0] * g[1] - h[1] * g[0]) / det];
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-12 {
            let cand = [b[0] + t * step[0], b[1] + t * step[1]];
            let cll = log_likelihood(cand, &z, y);
            if cll >= ll {
                accepted = Some((cand, cll));
                break;
            }
            t /= 2.0;
        }
        let Some((cand, cll)) = accepted else { break };
        let delta = (cand[0] - b[0]).abs().max((cand[1] - b[1]).abs());
        b = cand;
        ll = cll;
        trace.push(ll);
        if b[0].hypot(b[1]) > DIVERGED {
            break;
        }
        if delta < TOL {
            converged = true;
            break;
        }
    }
    let model = LogisticModel {
        intercept: b[0] - b[1] * mean / sd,
        slope: b[1] / sd,
        converged: converged && !separable(x, y),
        iterations,
    };
    Ok((model, trace))
}

/// True when a single threshold on x splits the classes perfectly.
fn separable(x: &[f64], y: &[u8]) -> bool {
    let range = |c: u8| {
        x.iter()
            .zip(y)
            .filter(|(_, &l)| l == c)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| (lo.min(v), hi.max(v)))
    };
    let (n0, n1) = (range(0), range(1));
    n0.1 < n1.0 || n1.1 < n0.0
}

pub fn encode_logistic(model: &LogisticModel) -> Result<Vec<u8>> {
    Ok(frame(NDXL_MAGIC, MODEL_VERSION, &serde_json::to_vec(model)?, &[]))
}

pub fn decode_logistic(bytes: &[u8]) -> Result<LogisticModel> {
    let (hjson, payload) = unframe(NDXL_MAGIC, MODEL_VERSION, bytes)?;
    expect_len(payload, 0)?;
    serde_json::from_slice(hjson).map_err(|e| Error::TruncatedPayload(format!("header: {e}")))
}

pub fn save_forest(model: &ForestModel, path: &Path) -> Result<()> {
    fs::write(path, encode_forest(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_forest(path: &Path) -> Result<ForestModel> {
    decode_forest(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_logistic(model: &LogisticModel, path: &Path) -> Result<()> {
    fs::write(path, encode_logistic(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_logistic(path: &Path) -> Result<LogisticModel> {
    decode_logistic(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn concat_layout() {
        let cnn: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let qif: Vec<f64> = (0..50).map(|i| -(i as f64) - 1.0).collect();
        let v = concat_features(&cnn, &qif).unwrap();
        assert_eq!(v.len(), 250);
        assert_eq!(v[199], 199.0);
        assert_eq!(v[200], -1.0);
        assert!(matches!(
            concat_features(&cnn[..199], &qif),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn mtry_values() {
        assert_eq!(mtry_for(250), 15);
        assert_eq!(mtry_for(50), 7);
        assert_eq!(mtry_for(38), 6);
        assert_eq!(mtry_for(1), 1);
    }

    #[test]
    fn xor_is_learned() {
        let x = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]];
        let y = vec![0, 1, 1, 0];
        let f = train_forest(&x, &y, 250, 3).unwrap();
        assert_eq!(f.n_trees(), 250);
        for (xi, &yi) in x.iter().zip(&y) {
            let p = forest_proba(&f, xi).unwrap();
            assert_eq!(u8::from(p >= 0.5), yi, "{xi:?} -> {p}");
        }
    }

    #[test]
    fn duplicated_positive_point() {
        let mut x = vec![vec![1.0, 2.0]; 6];
        let mut y = vec![1; 6];
        x.push(vec![-5.0, -5.0]);
        y.push(0);
        let f = train_forest(&x, &y, 50, 1).unwrap();
        // trees whose bootstrap missed the negative are single positive leaves
        assert_eq!(forest_proba(&f, &[1.0, 2.0]).unwrap(), 1.0);
        assert!(matches!(
            train_forest(&x[..6], &y[..6], 5, 1),
            Err(Error::SingleClassTrainingSet)
        ));
    }

    #[test]
    fn hand_built_votes() {
        let leaf = |c0, c1| Node {
            feature: -1,
            threshold: 0.0,
            left: 0,
            right: 0,
            counts: [c0, c1],
        };
        let stump = |thr: f64| Tree {
            nodes: vec![
                Node {
                    feature: 0,
                    threshold: thr,
                    left: 1,
                    right: 2,
                    counts: [2, 2],
                },
                leaf(2, 0),
                leaf(1, 1),
            ],
        };
        let f = ForestModel {
            n_features: 1,
            mtry: 1,
            seed: 0,
            trees: vec![stump(0.0), stump(1.0), stump(2.0)],
        };
        assert_eq!(forest_proba(&f, &[0.5]).unwrap(), 1.0 / 3.0);
        assert_eq!(forest_proba(&f, &[5.0]).unwrap(), 1.0);
        assert_eq!(forest_proba(&f, &[-1.0]).unwrap(), 0.0);
        assert!(forest_proba(&f, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn forest_deterministic_and_round_trips() {
        let mut rng = seed::rng(4);
        let x: Vec<Vec<f64>> = (0..40).map(|_| (0..6).map(|_| rng.gen::<f64>()).collect()).collect();
        let y: Vec<u8> = x.iter().map(|r| u8::from(r[0] + r[3] > 1.0)).collect();
        let a = train_forest(&x, &y, 30, 9).unwrap();
        let b = train_forest(&x, &y, 30, 9).unwrap();
        assert_eq!(a, b);
        for t in &a.trees {
            for n in t.nodes.iter().filter(|n| n.is_leaf()) {
                assert!(n.counts[0] + n.counts[1] >= 1);
            }
        }
        assert_eq!(decode_forest(&encode_forest(&a).unwrap()).unwrap(), a);
    }

    #[test]
    fn logistic_symmetric_data() {
        let x: Vec<f64> = (1..=20).flat_map(|i| [i as f64 * 0.1, -(i as f64) * 0.1]).collect();
        let y: Vec<u8> = (0..40).map(|i| if (i / 2) % 3 == 0 { (i % 2) as u8 } else { ((i + 1) % 2) as u8 }).collect();
        let m = fit_logistic(&x, &y).unwrap();
        assert!(m.intercept.abs() < 1e-8, "{m:?}");
        assert!(m.converged);
    }

    #[test]
    fn logistic_recovery_and_monotone() {
        let mut rng = seed::rng(11);
        let normal = Normal::new(0.0, 1.5).unwrap();
        let x: Vec<f64> = (0..10_000).map(|_| normal.sample(&mut rng)).collect();
        let y: Vec<u8> = x
            .iter()
            .map(|&v| u8::from(rng.gen::<f64>() < sigmoid(-2.0 + 1.5 * v)))
            .collect();
        let (m, trace) = fit_logistic_trace(&x, &y).unwrap();
        assert!(m.converged);
        assert!((m.intercept + 2.0).abs() < 0.1 && (m.slope - 1.5).abs() < 0.1, "{m:?}");
        assert!(trace.windows(2).all(|w| w[1] >= w[0]));
        let boundary = -m.intercept / m.slope;
        assert!((logistic_proba(&m, boundary) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn logistic_separation_flagged() {
        let x = [1.0, 2.0, 3.0, 10.0, 11.0, 12.0];
        let y = [0, 0, 0, 1, 1, 1];
        let m = fit_logistic(&x, &y).unwrap();
        assert!(!m.converged);
        assert!(m.intercept.is_finite() && m.slope > 0.0);
        assert_eq!(decode_logistic(&encode_logistic(&m).unwrap()).unwrap(), m);
    }
}
