//! Point-feature encoder and the voting decode head.
//!
//! The encoder runs three stages of k-nearest-neighbor edge aggregation
//! (edge feature = concat(center, neighbor − center), shared affine map,
//! GELU, max over neighbors), each followed by 2× farthest-point
//! downsampling, so N input points become N/8 seeds with `feature_dim`
//! channels.
//!
//! The decode head is proposal-free: a targetness score and a
//! (Δx, Δy, Δz, Δθ) vote per seed; the emitted box composes the previous
//! box with the targetness-weighted mean vote.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{linear, AdError, BoundParams, Graph, ParamStore, Tensor};
use crate::config::TrackerConfig;
use crate::geom::Box3D;

#[derive(Debug, Error)]
pub enum PerceptionError {
    #[error("need at least {need} points for {k} neighbors, got {got}")]
    TooFewPoints { need: usize, got: usize, k: usize },
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// Downsampled seed coordinates with their feature rows.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub coords: Vec<[f64; 3]>,
    /// seeds × feature_dim, on the active graph.
    pub features: Tensor,
}

impl FeatureMap {
    pub fn seeds(&self) -> usize {
        self.coords.len()
    }
}

/// Per-seed scores plus the decoded box. The tensors stay on the graph so
/// losses can differentiate through them.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// seeds × 1 targetness scores in [0, 1].
    pub targetness: Tensor,
    /// seeds × 1 normalized weights (sum 1).
    pub weights: Tensor,
    /// 1 × 4 weighted mean vote (Δx, Δy, Δz, Δθ) relative to the previous box.
    pub residual: Tensor,
    pub box3d: Box3D,
}

impl Prediction {
    pub fn max_targetness(&self) -> f64 {
        self.targetness
            .values()
            .iter()
            .fold(0.0_f64, |m, v| m.max(*v))
    }
}

// ── Neighborhood selection (coordinate space, gradient-free) ────────────

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// k nearest neighbors per point, excluding the point itself.
/// Ties break toward the lower index, so the result is order-stable.
pub(crate) fn knn_indices(coords: &[[f64; 3]], k: usize) -> Vec<Vec<usize>> {
    let n = coords.len();
    let mut out = Vec::with_capacity(n);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        scratch.clear();
        for (j, c) in coords.iter().enumerate() {
            if j != i {
                scratch.push((dist2(coords[i], *c), j));
            }
        }
        scratch.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        out.push(scratch.iter().take(k).map(|&(_, j)| j).collect());
    }
    out
}

/// Deterministic farthest-point sampling: start from the point farthest
/// from the centroid (translation-invariant), greedily add the point
/// farthest from the selected set. Ties break toward the lower index.
pub(crate) fn farthest_point_indices(coords: &[[f64; 3]], count: usize) -> Vec<usize> {
    let n = coords.len();
    let count = count.min(n);
    if count == 0 {
        return Vec::new();
    }
    let mut centroid = [0.0f64; 3];
    for c in coords {
        for k in 0..3 {
            centroid[k] += c[k];
        }
    }
    for k in &mut centroid {
        *k /= n as f64;
    }
    let mut best = 0usize;
    let mut best_norm = f64::NEG_INFINITY;
    for (i, c) in coords.iter().enumerate() {
        let norm = dist2(*c, centroid);
        if norm > best_norm {
            best_norm = norm;
            best = i;
        }
    }
    let mut selected = Vec::with_capacity(count);
    selected.push(best);
    let mut min_dist: Vec<f64> = coords.iter().map(|c| dist2(*c, coords[best])).collect();
    while selected.len() < count {
        let mut far = 0usize;
        let mut far_dist = f64::NEG_INFINITY;
        for (i, d) in min_dist.iter().enumerate() {
            if *d > far_dist {
                far_dist = *d;
                far = i;
            }
        }
        selected.push(far);
        for (i, d) in min_dist.iter_mut().enumerate() {
            let nd = dist2(coords[i], coords[far]);
            if nd < *d {
                *d = nd;
            }
        }
    }
    selected
}

// ── Encoder ─────────────────────────────────────────────────────────────

/// Parameters for the three edge-aggregation stages.
pub fn init_encoder_params(store: &mut ParamStore, cfg: &TrackerConfig, rng: &mut ChaCha8Rng) {
    let widths = cfg.encoder_widths();
    let mut in_dim = 3usize;
    for (s, w) in widths.into_iter().enumerate() {
        store.insert(&format!("enc.{s}.w"), xavier(rng, 2 * in_dim, w));
        store.insert(&format!("enc.{s}.b"), Tensor::zeros(1, w));
        in_dim = w;
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    use rand::Rng as _;
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new(rows, cols, data).expect("finite init")
}

/// Encode a frame's points into N/8 seed features.
pub fn encode(
    g: &mut Graph,
    points: &[[f64; 3]],
    params: &BoundParams,
    cfg: &TrackerConfig,
) -> Result<FeatureMap, PerceptionError> {
    let k = cfg.neighbors;
    let mut coords: Vec<[f64; 3]> = points.to_vec();
    let mut features = Tensor::from_points(&coords)?;

    for stage in 0..3 {
        let n = coords.len();
        if n < k + 1 {
            return Err(PerceptionError::TooFewPoints {
                need: k + 1,
                got: n,
                k,
            });
        }
        let neighbors = knn_indices(&coords, k);
        let mut center_idx = Vec::with_capacity(n * k);
        let mut neighbor_idx = Vec::with_capacity(n * k);
        for (i, nb) in neighbors.iter().enumerate() {
            for &j in nb {
                center_idx.push(i);
                neighbor_idx.push(j);
            }
        }
        let centers = g.gather_rows(&features, &center_idx)?;
        let nbrs = g.gather_rows(&features, &neighbor_idx)?;
        let offsets = g.sub(&nbrs, &centers)?;
        let edge = g.concat_cols(&[&centers, &offsets])?;
        let w = params.get(&format!("enc.{stage}.w"))?;
        let b = params.get(&format!("enc.{stage}.b"))?;
        let h = linear(g, &edge, w, b)?;
        let h = g.gelu(&h)?;
        let pooled = g.group_max_rows(&h, k)?;

        let keep = farthest_point_indices(&coords, n.div_ceil(2));
        coords = keep.iter().map(|&i| coords[i]).collect();
        features = g.gather_rows(&pooled, &keep)?;
    }

    Ok(FeatureMap { coords, features })
}

// ── Decode head ─────────────────────────────────────────────────────────

pub fn init_decoder_params(store: &mut ParamStore, cfg: &TrackerConfig, rng: &mut ChaCha8Rng) {
    let d = cfg.feature_dim;
    store.insert("dec.target.w", xavier(rng, d, 1));
    store.insert("dec.target.b", Tensor::zeros(1, 1));
    store.insert("dec.vote.w", xavier(rng, d, 4));
    store.insert("dec.vote.b", Tensor::zeros(1, 4));
}

/// Threshold below which the targetness mass counts as numerically zero
/// and weighting falls back to uniform.
const WEIGHT_FLOOR: f64 = 1e-12;

/// Predict per-seed targetness and the next box from refined features.
pub fn decode(
    g: &mut Graph,
    refined: &Tensor,
    coords: &[[f64; 3]],
    previous_box: &Box3D,
    params: &BoundParams,
) -> Result<Prediction, AdError> {
    let logits = linear(
        g,
        refined,
        params.get("dec.target.w")?,
        params.get("dec.target.b")?,
    )?;
    let targetness = g.sigmoid(&logits)?;
    let votes = linear(
        g,
        refined,
        params.get("dec.vote.w")?,
        params.get("dec.vote.b")?,
    )?;

    let total = g.sum_all(&targetness)?;
    let weights = if total.values()[0] <= WEIGHT_FLOOR {
        let n = refined.rows();
        let uniform = Tensor::filled(n, 1, 1.0 / n as f64);
        g.constant(&uniform)?
    } else {
        g.div_by_scalar(&targetness, &total)?
    };

    let wt = g.transpose(&weights)?;
    let residual = g.matmul(&wt, &votes)?;

    let r = residual.values();
    let box3d = previous_box.shifted([r[0], r[1], r[2]], r[3]);
    let _ = coords;

    Ok(Prediction {
        targetness,
        weights,
        residual,
        box3d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn cloud(r: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                [
                    r.random_range(-3.0..3.0),
                    r.random_range(-3.0..3.0),
                    r.random_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    fn desk_params(cfg: &TrackerConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        init_encoder_params(&mut store, cfg, &mut r);
        init_decoder_params(&mut store, cfg, &mut r);
        store
    }

    #[test]
    fn encode_shape_contract_across_sizes() {
        for n in [256usize, 512, 1024] {
            let cfg = TrackerConfig {
                points: n,
                ..TrackerConfig::desk()
            };
            let store = desk_params(&cfg, 1);
            let mut r = rng(2);
            let pts = cloud(&mut r, n);
            let mut g = Graph::new();
            let bound = store.bind(&mut g).unwrap();
            let fm = encode(&mut g, &pts, &bound, &cfg).unwrap();
            assert_eq!(fm.seeds(), n / 8);
            assert_eq!(fm.features.shape(), [n / 8, cfg.feature_dim]);
        }
    }

    #[test]
    fn standard_config_produces_128_seeds_of_128_channels() {
        let cfg = TrackerConfig::standard();
        let store = desk_params(&cfg, 3);
        let mut r = rng(4);
        let pts = cloud(&mut r, 1024);
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let fm = encode(&mut g, &pts, &bound, &cfg).unwrap();
        assert_eq!(fm.seeds(), 128);
        assert_eq!(fm.features.shape(), [128, 128]);
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = TrackerConfig::desk();
        let store = desk_params(&cfg, 5);
        let mut r = rng(6);
        let pts = cloud(&mut r, cfg.points);
        let run = || {
            let mut g = Graph::new();
            let bound = store.bind(&mut g).unwrap();
            let fm = encode(&mut g, &pts, &bound, &cfg).unwrap();
            (fm.coords.clone(), fm.features.values().to_vec())
        };
        let (ca, fa) = run();
        let (cb, fb) = run();
        assert_eq!(ca, cb);
        for (a, b) in fa.iter().zip(&fb) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn translation_moves_seed_coordinates() {
        let cfg = TrackerConfig::desk();
        let store = desk_params(&cfg, 7);
        let mut r = rng(8);
        let pts = cloud(&mut r, cfg.points);
        let moved: Vec<[f64; 3]> = pts.iter().map(|p| [p[0] + 10.0, p[1], p[2]]).collect();

        let encode_with = |points: &[[f64; 3]]| {
            let mut g = Graph::new();
            let bound = store.bind(&mut g).unwrap();
            encode(&mut g, points, &bound, &cfg).unwrap().coords
        };
        let base = encode_with(&pts);
        let shifted = encode_with(&moved);
        assert_eq!(base.len(), shifted.len());
        for (a, b) in base.iter().zip(&shifted) {
            assert!((a[0] + 10.0 - b[0]).abs() < 1e-12);
            assert!((a[1] - b[1]).abs() < 1e-12);
            assert!((a[2] - b[2]).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_points_is_a_structured_error() {
        let cfg = TrackerConfig::desk();
        let store = desk_params(&cfg, 9);
        let pts = cloud(&mut rng(10), cfg.neighbors); // k points: not enough
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        match encode(&mut g, &pts, &bound, &cfg) {
            Err(PerceptionError::TooFewPoints { .. }) => {}
            other => panic!("expected TooFewPoints, got {other:?}"),
        }
    }

    #[test]
    fn knn_excludes_self_and_breaks_ties_by_index() {
        let coords = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
        ];
        let nb = knn_indices(&coords, 2);
        assert_eq!(nb[0], vec![1, 2]);
        assert_eq!(nb[1], vec![2, 0]);
        assert_eq!(nb[3], vec![1, 2]);
    }

    #[test]
    fn fps_starts_from_centroid_extreme_and_spreads() {
        let coords = vec![
            [0.0, 0.0, 0.0],
            [5.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [-4.0, 0.1, 0.0],
        ];
        let sel = farthest_point_indices(&coords, 2);
        assert_eq!(sel[0], 1);
        assert_eq!(sel[1], 3);
        // invariant under translation of the whole cloud
        let moved: Vec<[f64; 3]> = coords.iter().map(|c| [c[0] + 100.0, c[1], c[2]]).collect();
        assert_eq!(farthest_point_indices(&moved, 2), sel);
    }

    fn tiny_prediction_setup(
        vote_w: Option<Tensor>,
    ) -> (TrackerConfig, ParamStore, Tensor, Vec<[f64; 3]>, Box3D) {
        let cfg = TrackerConfig::micro();
        let mut store = desk_params(&cfg, 11);
        if let Some(w) = vote_w {
            store.insert("dec.vote.w", w);
        }
        let mut r = rng(12);
        let feats = Tensor::new(
            2,
            cfg.feature_dim,
            (0..2 * cfg.feature_dim)
                .map(|_| r.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let coords = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let prev = Box3D::new([0.5, 0.0, 0.0], 0.3, [1.0, 2.0, 1.0]).unwrap();
        (cfg, store, feats, coords, prev)
    }

    #[test]
    fn zero_votes_reproduce_previous_box() {
        let (cfg, mut store, feats, coords, prev) = tiny_prediction_setup(None);
        store.insert("dec.vote.w", Tensor::zeros(cfg.feature_dim, 4));
        store.insert("dec.vote.b", Tensor::zeros(1, 4));
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let pred = decode(&mut g, &feats, &coords, &prev, &bound).unwrap();
        assert_eq!(pred.box3d, prev);
    }

    #[test]
    fn single_seed_box_offset_equals_its_vote() {
        let (cfg, store, _, _, prev) = tiny_prediction_setup(None);
        let mut r = rng(13);
        let feats = Tensor::new(
            1,
            cfg.feature_dim,
            (0..cfg.feature_dim).map(|_| r.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let pred = decode(&mut g, &feats, &[[0.0; 3]], &prev, &bound).unwrap();

        // the single row's vote, via the same affine map
        let mut g2 = Graph::new();
        let bound2 = store.bind(&mut g2).unwrap();
        let votes = linear(
            &mut g2,
            &feats,
            bound2.get("dec.vote.w").unwrap(),
            bound2.get("dec.vote.b").unwrap(),
        )
        .unwrap();
        for k in 0..4 {
            assert!((pred.residual.values()[k] - votes.values()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_are_normalized_and_scores_bounded() {
        let (_, store, feats, coords, prev) = tiny_prediction_setup(None);
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let pred = decode(&mut g, &feats, &coords, &prev, &bound).unwrap();
        let wsum: f64 = pred.weights.values().iter().sum();
        assert!((wsum - 1.0).abs() < 1e-9);
        for t in pred.targetness.values() {
            assert!((0.0..=1.0).contains(t));
        }
        assert_eq!(pred.box3d.size, prev.size);
    }

    #[test]
    fn saturated_low_targetness_falls_back_to_uniform_weights() {
        let (cfg, mut store, feats, coords, prev) = tiny_prediction_setup(None);
        store.insert("dec.target.w", Tensor::zeros(cfg.feature_dim, 1));
        store.insert("dec.target.b", Tensor::new(1, 1, vec![-60.0]).unwrap());
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let pred = decode(&mut g, &feats, &coords, &prev, &bound).unwrap();
        for w in pred.weights.values() {
            assert!((w - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn decode_head_gradients_match_finite_differences() {
        let (cfg, store, feats, coords, prev) = tiny_prediction_setup(None);
        let target = Tensor::new(1, 4, vec![0.2, -0.1, 0.05, 0.02]).unwrap();
        let names = ["dec.target.w", "dec.target.b", "dec.vote.w", "dec.vote.b"];
        let inputs: Vec<(&str, Tensor)> = names
            .iter()
            .map(|n| (*n, store.get(n).unwrap().clone()))
            .collect();
        let rep = grad_check(
            |g, p| {
                let pred = decode(g, &feats, &coords, &prev, p)?;
                let sl = g.smooth_l1(&pred.residual, &target)?;
                g.mean_all(&sl)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "rel err {}", rep.max_rel_err);
        let _ = cfg;
    }
}
