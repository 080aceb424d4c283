//! Training losses: temporal feature consistency across corresponding
//! points, memory cycle consistency through token→point→token walks, and
//! the decode-head terms, combined into one unweighted total.

use crate::autodiff::{AdError, Graph, Tensor};
use crate::geom::{wrap_angle, Box3D, CorrespondenceSet};
use crate::perception::Prediction;

/// Row-stochastic transitions of the two-step cyclic walk.
#[derive(Debug, Clone)]
pub struct TransitionMatrices {
    /// K×N, token to point.
    pub token_to_point: Tensor,
    /// N×K, point back to token.
    pub point_to_token: Tensor,
    /// K×K product walk.
    pub cycle: Tensor,
}

/// Temperature-softmaxed cosine transitions between the token bank and
/// one frame's seed features, plus their two-step product.
pub fn build_transitions(
    g: &mut Graph,
    fg_tokens: &Tensor,
    features: &Tensor,
    tau_cycle: f64,
) -> Result<TransitionMatrices, AdError> {
    let sims = g.cosine_sim(fg_tokens, features)?;
    let token_to_point = g.softmax_rows(&sims, tau_cycle)?;
    let sims_t = g.transpose(&sims)?;
    let point_to_token = g.softmax_rows(&sims_t, tau_cycle)?;
    let cycle = g.matmul(&token_to_point, &point_to_token)?;
    Ok(TransitionMatrices {
        token_to_point,
        point_to_token,
        cycle,
    })
}

/// Mean smooth-L1 between features of corresponding points across frames.
/// `frame_features` is indexed by the frame indices stored in the set;
/// an empty set contributes zero loss.
pub fn temporal_consistency_loss(
    g: &mut Graph,
    frame_features: &[Tensor],
    correspondences: &CorrespondenceSet,
) -> Result<Tensor, AdError> {
    if correspondences.is_empty() {
        return g.constant_scalar(0.0);
    }
    // group consecutive entries by frame pair so each pair needs one gather
    let mut groups: Vec<((usize, usize), Vec<usize>, Vec<usize>)> = Vec::new();
    for e in &correspondences.entries {
        match groups.last_mut() {
            Some((key, is, js)) if *key == (e.t, e.t_future) => {
                is.push(e.i);
                js.push(e.j);
            }
            _ => groups.push(((e.t, e.t_future), vec![e.i], vec![e.j])),
        }
    }
    let mut parts: Vec<Tensor> = Vec::with_capacity(groups.len());
    for ((t, tf), is, js) in &groups {
        let src = g.gather_rows(&frame_features[*t], is)?;
        let dst = g.gather_rows(&frame_features[*tf], js)?;
        parts.push(g.smooth_l1(&src, &dst)?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let all = g.concat_rows(&refs)?;
    g.mean_all(&all)
}

/// The two memory cycle consistency terms and their sum.
#[derive(Debug, Clone)]
pub struct MccTerms {
    pub l_cycle: Tensor,
    pub l_fg: Tensor,
    pub l_mcc: Tensor,
}

/// Per-frame input to [`mcc_loss`]: the transitions plus the ground-truth
/// foreground seed indices of that frame.
pub struct MccFrame {
    pub transitions: TransitionMatrices,
    pub fg_indices: Vec<usize>,
}

/// Cross-entropy of each cyclic walk against the identity (every token
/// should return to itself), plus the log-mass of token→point transitions
/// landing on foreground seeds. Frames with no foreground are skipped in
/// the foreground term and its average renormalized.
pub fn mcc_loss(g: &mut Graph, frames: &[MccFrame]) -> Result<MccTerms, AdError> {
    if frames.is_empty() {
        return Err(AdError::EmptyInput { op: "mcc_loss" });
    }

    let mut cycle_sum: Option<Tensor> = None;
    let mut fg_sum: Option<Tensor> = None;
    let mut fg_frames = 0usize;
    for frame in frames {
        let k = frame.transitions.cycle.rows();
        let eye = g.constant(&Tensor::eye(k))?;
        let masked = g.mul(&frame.transitions.cycle, &eye)?;
        let ones = g.constant(&Tensor::filled(k, 1, 1.0))?;
        let diag = g.matmul(&masked, &ones)?;
        let logd = g.log(&diag)?;
        let mean = g.mean_all(&logd)?;
        let ce = g.scale(&mean, -1.0)?;
        cycle_sum = Some(match cycle_sum {
            Some(acc) => g.add(&acc, &ce)?,
            None => ce,
        });

        if frame.fg_indices.is_empty() {
            continue;
        }
        let n = frame.transitions.token_to_point.cols();
        let mut mask = vec![0.0; n];
        for &i in &frame.fg_indices {
            if i >= n {
                return Err(AdError::IndexOutOfRange { index: i, rows: n });
            }
            mask[i] = 1.0;
        }
        let mask_col = g.constant(&Tensor::new(n, 1, mask)?)?;
        let fg_mass = g.matmul(&frame.transitions.token_to_point, &mask_col)?;
        let logm = g.log(&fg_mass)?;
        let mean = g.mean_all(&logm)?;
        let term = g.scale(&mean, -1.0)?;
        fg_sum = Some(match fg_sum {
            Some(acc) => g.add(&acc, &term)?,
            None => term,
        });
        fg_frames += 1;
    }

    let l_cycle = g.scale(&cycle_sum.expect("at least one frame"), 1.0 / frames.len() as f64)?;
    let l_fg = match fg_sum {
        Some(acc) => g.scale(&acc, 1.0 / fg_frames as f64)?,
        None => g.constant_scalar(0.0)?,
    };
    let l_mcc = g.add(&l_cycle, &l_fg)?;
    Ok(MccTerms {
        l_cycle,
        l_fg,
        l_mcc,
    })
}

/// Decode-head terms and their weighted sum.
#[derive(Debug, Clone)]
pub struct DecoderTerms {
    pub l_m: Tensor,
    pub l_c: Tensor,
    pub l_bbox: Tensor,
    pub l_dec: Tensor,
}

/// Targetness cross-entropy against the seed mask, squared distance of
/// the weighted seed centroid to the true center, and smooth-L1 on the
/// box residual expressed relative to the previous box.
pub fn decoder_loss(
    g: &mut Graph,
    pred: &Prediction,
    seed_coords: &[[f64; 3]],
    previous_box: &Box3D,
    gt_box: &Box3D,
    gt_seed_mask: &[u8],
    lambda_m: f64,
    lambda_c: f64,
) -> Result<DecoderTerms, AdError> {
    let targets: Vec<f64> = gt_seed_mask.iter().map(|m| f64::from(*m)).collect();
    let l_m = g.bce_mean(&pred.targetness, &targets)?;

    let coords = g.constant(&Tensor::from_points(seed_coords)?)?;
    let wt = g.transpose(&pred.weights)?;
    let centroid = g.matmul(&wt, &coords)?;
    let gt_center = g.constant(&Tensor::new(1, 3, gt_box.center.to_vec())?)?;
    let sq = g.sq_err(&centroid, &gt_center)?;
    let l_c = g.sum_all(&sq)?;

    let gt_residual = Tensor::new(
        1,
        4,
        vec![
            gt_box.center[0] - previous_box.center[0],
            gt_box.center[1] - previous_box.center[1],
            gt_box.center[2] - previous_box.center[2],
            wrap_angle(gt_box.heading - previous_box.heading),
        ],
    )?;
    let target_res = g.constant(&gt_residual)?;
    let sl = g.smooth_l1(&pred.residual, &target_res)?;
    let l_bbox = g.mean_all(&sl)?;

    let wm = g.scale(&l_m, lambda_m)?;
    let wc = g.scale(&l_c, lambda_c)?;
    let partial = g.add(&wm, &wc)?;
    let l_dec = g.add(&partial, &l_bbox)?;
    Ok(DecoderTerms {
        l_m,
        l_c,
        l_bbox,
        l_dec,
    })
}

/// All loss components of one training window, as scalar tensors.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub l_tc: Tensor,
    pub l_cycle: Tensor,
    pub l_fg: Tensor,
    pub l_mcc: Tensor,
    pub l_m: Tensor,
    pub l_c: Tensor,
    pub l_bbox: Tensor,
    pub l_dec: Tensor,
    pub total: Tensor,
}

impl LossBreakdown {
    /// Scalar values in a stable order, for logging.
    pub fn values(&self) -> [f64; 9] {
        [
            self.l_tc.values()[0],
            self.l_cycle.values()[0],
            self.l_fg.values()[0],
            self.l_mcc.values()[0],
            self.l_m.values()[0],
            self.l_c.values()[0],
            self.l_bbox.values()[0],
            self.l_dec.values()[0],
            self.total.values()[0],
        ]
    }
}

/// The unweighted sum of the three top-level objectives.
pub fn total_loss(
    g: &mut Graph,
    l_dec: &Tensor,
    l_tc: &Tensor,
    l_mcc: &Tensor,
) -> Result<Tensor, AdError> {
    let partial = g.add(l_dec, l_tc)?;
    g.add(&partial, l_mcc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Correspondence;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(
            rows,
            cols,
            (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    // ── temporal consistency ────────────────────────────────────────────

    #[test]
    fn identical_features_give_zero_consistency_loss() {
        let mut r = rng(1);
        let f = rand_tensor(&mut r, 4, 3);
        let set = CorrespondenceSet {
            entries: (0..4)
                .map(|i| Correspondence {
                    t: 0,
                    i,
                    t_future: 1,
                    j: i,
                    distance: 0.0,
                })
                .collect(),
        };
        let mut g = Graph::new();
        let loss = temporal_consistency_loss(&mut g, &[f.clone(), f], &set).unwrap();
        assert_eq!(loss.values()[0], 0.0);
    }

    #[test]
    fn empty_set_gives_zero() {
        let mut g = Graph::new();
        let f = Tensor::zeros(2, 3);
        let loss =
            temporal_consistency_loss(&mut g, &[f.clone(), f], &CorrespondenceSet::default())
                .unwrap();
        assert_eq!(loss.values()[0], 0.0);
    }

    #[test]
    fn consistency_loss_matches_enumeration_oracle() {
        let mut r = rng(2);
        let fa = rand_tensor(&mut r, 5, 4);
        let fb = rand_tensor(&mut r, 5, 4);
        let pairs = [(0usize, 3usize), (2, 2), (4, 0)];
        let set = CorrespondenceSet {
            entries: pairs
                .iter()
                .map(|&(i, j)| Correspondence {
                    t: 0,
                    i,
                    t_future: 1,
                    j,
                    distance: 0.1,
                })
                .collect(),
        };
        let mut g = Graph::new();
        let loss =
            temporal_consistency_loss(&mut g, &[fa.clone(), fb.clone()], &set).unwrap();

        // exhaustive per-pair smooth-L1, averaged over pairs and channels
        let mut want = 0.0;
        for &(i, j) in &pairs {
            for k in 0..4 {
                let d: f64 = fa.get(i, k) - fb.get(j, k);
                want += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
            }
        }
        want /= (pairs.len() * 4) as f64;
        assert!((loss.values()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_index_is_a_structured_error() {
        let mut g = Graph::new();
        let f = Tensor::zeros(2, 3);
        let set = CorrespondenceSet {
            entries: vec![Correspondence {
                t: 0,
                i: 7,
                t_future: 1,
                j: 0,
                distance: 0.0,
            }],
        };
        let err = temporal_consistency_loss(&mut g, &[f.clone(), f], &set).unwrap_err();
        assert!(matches!(err, AdError::IndexOutOfRange { .. }));
    }

    // ── transitions ─────────────────────────────────────────────────────

    #[test]
    fn identical_feature_rows_make_uniform_transitions() {
        let mut r = rng(3);
        let tokens = rand_tensor(&mut r, 3, 4);
        let row: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let feats = Tensor::new(5, 4, row.repeat(5)).unwrap();
        let mut g = Graph::new();
        let tr = build_transitions(&mut g, &tokens, &feats, 0.1).unwrap();
        for v in tr.token_to_point.values() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_cycle_is_exactly_one() {
        let mut r = rng(4);
        let tokens = rand_tensor(&mut r, 1, 4);
        let feats = rand_tensor(&mut r, 5, 4);
        let mut g = Graph::new();
        let tr = build_transitions(&mut g, &tokens, &feats, 0.1).unwrap();
        assert_eq!(tr.cycle.shape(), [1, 1]);
        assert!((tr.cycle.values()[0] - 1.0).abs() < 1e-12);
    }

    /// Naive double-loop computation of the walk with its own cosine.
    fn oracle_transitions(tokens: &Tensor, feats: &Tensor, tau: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (k, n, d) = (tokens.rows(), feats.rows(), tokens.cols());
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / ((na + 1e-8) * (nb + 1e-8))
        };
        let mut t2p = vec![0.0; k * n];
        for i in 0..k {
            let mut denom = 0.0;
            for j in 0..n {
                denom += (cos(tokens.row(i), feats.row(j)) / tau).exp();
            }
            for j in 0..n {
                t2p[i * n + j] = (cos(tokens.row(i), feats.row(j)) / tau).exp() / denom;
            }
        }
        let mut p2t = vec![0.0; n * k];
        for i in 0..n {
            let mut denom = 0.0;
            for j in 0..k {
                denom += (cos(feats.row(i), tokens.row(j)) / tau).exp();
            }
            for j in 0..k {
                p2t[i * k + j] = (cos(feats.row(i), tokens.row(j)) / tau).exp() / denom;
            }
        }
        let mut cyc = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                for m in 0..n {
                    cyc[i * k + j] += t2p[i * n + m] * p2t[m * k + j];
                }
            }
        }
        let _ = d;
        (t2p, p2t, cyc)
    }

    #[test]
    fn transitions_match_double_loop_oracle() {
        let mut r = rng(5);
        let tokens = rand_tensor(&mut r, 3, 6);
        let feats = rand_tensor(&mut r, 5, 6);
        let mut g = Graph::new();
        let tr = build_transitions(&mut g, &tokens, &feats, 0.1).unwrap();
        let (t2p, p2t, cyc) = oracle_transitions(&tokens, &feats, 0.1);
        for (a, b) in tr.token_to_point.values().iter().zip(&t2p) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in tr.point_to_token.values().iter().zip(&p2t) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in tr.cycle.values().iter().zip(&cyc) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn all_transition_rows_are_stochastic() {
        let mut r = rng(6);
        for _ in 0..50 {
            let k = r.random_range(1..6);
            let n = r.random_range(1..9);
            let d = r.random_range(2..7);
            let tokens = rand_tensor(&mut r, k, d);
            let feats = rand_tensor(&mut r, n, d);
            let mut g = Graph::new();
            let tr = build_transitions(&mut g, &tokens, &feats, 0.1).unwrap();
            for m in [&tr.token_to_point, &tr.point_to_token, &tr.cycle] {
                for row in 0..m.rows() {
                    let sum: f64 = m.row(row).iter().sum();
                    assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
                    for v in m.row(row) {
                        assert!(*v > 0.0 && *v <= 1.0 + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn smaller_temperature_sharpens_rows() {
        let mut r = rng(7);
        for _ in 0..20 {
            let tokens = rand_tensor(&mut r, 3, 5);
            let feats = rand_tensor(&mut r, 6, 5);
            let mut g = Graph::new();
            let sharp = build_transitions(&mut g, &tokens, &feats, 0.05).unwrap();
            let soft = build_transitions(&mut g, &tokens, &feats, 0.5).unwrap();
            for row in 0..3 {
                let max_sharp = sharp
                    .token_to_point
                    .row(row)
                    .iter()
                    .cloned()
                    .fold(0.0_f64, f64::max);
                let max_soft = soft
                    .token_to_point
                    .row(row)
                    .iter()
                    .cloned()
                    .fold(0.0_f64, f64::max);
                assert!(max_sharp >= max_soft - 1e-12);
            }
        }
    }

    // ── memory cycle consistency ────────────────────────────────────────

    fn manual_transitions(g: &mut Graph, t2p: Tensor, cycle: Tensor) -> TransitionMatrices {
        let k = cycle.rows();
        let n = t2p.cols();
        TransitionMatrices {
            token_to_point: g.constant(&t2p).unwrap(),
            point_to_token: g.constant(&Tensor::filled(n, k, 1.0 / k as f64)).unwrap(),
            cycle: g.constant(&cycle).unwrap(),
        }
    }

    #[test]
    fn identity_cycle_has_zero_cycle_loss() {
        let mut g = Graph::new();
        let k = 4;
        let tr = manual_transitions(
            &mut g,
            Tensor::filled(k, 6, 1.0 / 6.0),
            Tensor::eye(k),
        );
        let terms = mcc_loss(
            &mut g,
            &[MccFrame {
                transitions: tr,
                fg_indices: vec![0, 1, 2],
            }],
        )
        .unwrap();
        assert_eq!(terms.l_cycle.values()[0], 0.0);
    }

    #[test]
    fn non_identity_diagonal_gives_positive_cycle_loss() {
        let mut g = Graph::new();
        let cycle = Tensor::new(2, 2, vec![0.9, 0.1, 0.2, 0.8]).unwrap();
        let tr = manual_transitions(&mut g, Tensor::filled(2, 4, 0.25), cycle);
        let terms = mcc_loss(
            &mut g,
            &[MccFrame {
                transitions: tr,
                fg_indices: vec![0],
            }],
        )
        .unwrap();
        let want = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((terms.l_cycle.values()[0] - want).abs() < 1e-12);
        assert!(terms.l_cycle.values()[0] > 0.0);
    }

    #[test]
    fn full_foreground_mass_gives_zero_fg_loss() {
        let mut g = Graph::new();
        // all token→point mass on the two foreground columns
        let t2p = Tensor::new(2, 4, vec![0.5, 0.5, 0.0, 0.0, 0.25, 0.75, 0.0, 0.0]).unwrap();
        let tr = manual_transitions(&mut g, t2p, Tensor::eye(2));
        let terms = mcc_loss(
            &mut g,
            &[MccFrame {
                transitions: tr,
                fg_indices: vec![0, 1],
            }],
        )
        .unwrap();
        assert!(terms.l_fg.values()[0].abs() < 1e-12);
    }

    #[test]
    fn uniform_half_foreground_gives_log_two() {
        let mut g = Graph::new();
        let n = 8;
        let tr = manual_transitions(&mut g, Tensor::filled(3, n, 1.0 / n as f64), Tensor::eye(3));
        let terms = mcc_loss(
            &mut g,
            &[MccFrame {
                transitions: tr,
                fg_indices: (0..n / 2).collect(),
            }],
        )
        .unwrap();
        assert!((terms.l_fg.values()[0] - 0.5f64.ln().abs()).abs() < 1e-9);
        assert!((terms.l_fg.values()[0] - 2.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn empty_foreground_frame_is_skipped_and_renormalized() {
        let mut g = Graph::new();
        let n = 4;
        let t2p = Tensor::filled(2, n, 1.0 / n as f64);
        let a = manual_transitions(&mut g, t2p.clone(), Tensor::eye(2));
        let b = manual_transitions(&mut g, t2p, Tensor::eye(2));
        let terms = mcc_loss(
            &mut g,
            &[
                MccFrame {
                    transitions: a,
                    fg_indices: vec![0, 1],
                },
                MccFrame {
                    transitions: b,
                    fg_indices: vec![],
                },
            ],
        )
        .unwrap();
        // only the first frame contributes: mass 0.5 → ln 2
        assert!((terms.l_fg.values()[0] - 2.0f64.ln()).abs() < 1e-9);
        let sum = terms.l_cycle.values()[0] + terms.l_fg.values()[0];
        assert!((terms.l_mcc.values()[0] - sum).abs() < 1e-12);
    }

    // ── decoder loss ────────────────────────────────────────────────────

    fn fake_prediction(
        g: &mut Graph,
        targetness: Vec<f64>,
        residual: [f64; 4],
        prev: &Box3D,
    ) -> Prediction {
        let n = targetness.len();
        let t = g
            .constant(&Tensor::new(n, 1, targetness.clone()).unwrap())
            .unwrap();
        let sum: f64 = targetness.iter().sum();
        let weights: Vec<f64> = targetness.iter().map(|v| v / sum).collect();
        let w = g.constant(&Tensor::new(n, 1, weights).unwrap()).unwrap();
        let res = g
            .constant(&Tensor::new(1, 4, residual.to_vec()).unwrap())
            .unwrap();
        Prediction {
            targetness: t,
            weights: w,
            residual: res,
            box3d: prev.shifted([residual[0], residual[1], residual[2]], residual[3]),
        }
    }

    #[test]
    fn exact_box_gives_zero_bbox_loss() {
        let prev = Box3D::new([1.0, 0.0, 0.0], 0.1, [1.0, 2.0, 1.0]).unwrap();
        let gt = prev.shifted([0.2, -0.1, 0.05], 0.03);
        let mut g = Graph::new();
        let pred = fake_prediction(&mut g, vec![0.9, 0.8], [0.2, -0.1, 0.05, 0.03], &prev);
        let coords = [[1.1, 0.0, 0.0], [0.9, 0.0, 0.0]];
        let terms =
            decoder_loss(&mut g, &pred, &coords, &prev, &gt, &[1, 1], 1.0, 1.0).unwrap();
        assert!(terms.l_bbox.values()[0].abs() < 1e-15);
    }

    #[test]
    fn perfect_targetness_has_negligible_mask_loss() {
        let prev = Box3D::new([0.0; 3], 0.0, [1.0, 1.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let pred = fake_prediction(&mut g, vec![1.0, 0.0, 1.0], [0.0; 4], &prev);
        let coords = [[0.0, 0.0, 0.0]; 3];
        let terms =
            decoder_loss(&mut g, &pred, &coords, &prev, &prev, &[1, 0, 1], 1.0, 1.0).unwrap();
        assert!(terms.l_m.values()[0] <= 1e-6);
    }

    #[test]
    fn decoder_total_matches_hand_computed_sum() {
        let prev = Box3D::new([0.5, -0.2, 0.1], 0.2, [1.0, 2.0, 1.0]).unwrap();
        let gt = prev.shifted([0.3, 0.1, 0.0], -0.05);
        let mut g = Graph::new();
        let targetness = vec![0.7, 0.3, 0.9];
        let residual = [0.25, 0.05, 0.01, -0.02];
        let pred = fake_prediction(&mut g, targetness.clone(), residual, &prev);
        let coords = [[0.4, -0.1, 0.1], [2.0, 1.0, 0.0], [0.6, -0.3, 0.2]];
        let mask = [1u8, 0, 1];
        let (lm, lc) = (0.8, 1.3);
        let terms = decoder_loss(&mut g, &pred, &coords, &prev, &gt, &mask, lm, lc).unwrap();

        // scalar oracle
        let mut l_m = 0.0;
        for (t, m) in targetness.iter().zip(&mask) {
            let p = t.clamp(1e-7, 1.0 - 1e-7);
            l_m -= f64::from(*m) * p.ln() + (1.0 - f64::from(*m)) * (1.0 - p).ln();
        }
        l_m /= 3.0;
        let wsum: f64 = targetness.iter().sum();
        let mut centroid = [0.0; 3];
        for (t, c) in targetness.iter().zip(&coords) {
            for k in 0..3 {
                centroid[k] += t / wsum * c[k];
            }
        }
        let mut l_c = 0.0;
        for k in 0..3 {
            l_c += (centroid[k] - gt.center[k]).powi(2);
        }
        let gt_res = [0.3, 0.1, 0.0, -0.05];
        let mut l_bbox = 0.0;
        for k in 0..4 {
            let d: f64 = residual[k] - gt_res[k];
            l_bbox += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
        }
        l_bbox /= 4.0;
        let want = lm * l_m + lc * l_c + l_bbox;

        assert!((terms.l_m.values()[0] - l_m).abs() < 1e-12);
        assert!((terms.l_c.values()[0] - l_c).abs() < 1e-12);
        assert!((terms.l_bbox.values()[0] - l_bbox).abs() < 1e-12);
        assert!((terms.l_dec.values()[0] - want).abs() < 1e-12);
    }

    // ── total ───────────────────────────────────────────────────────────

    #[test]
    fn total_is_plain_sum() {
        let mut g = Graph::new();
        let zero = g.constant_scalar(0.0).unwrap();
        let t = total_loss(&mut g, &zero, &zero, &zero).unwrap();
        assert_eq!(t.values()[0], 0.0);

        let a = g.constant_scalar(1.0).unwrap();
        let b = g.constant_scalar(2.0).unwrap();
        let c = g.constant_scalar(3.0).unwrap();
        let t = total_loss(&mut g, &a, &b, &c).unwrap();
        assert_eq!(t.values()[0], 6.0);
    }

    #[test]
    fn total_gradient_is_sum_of_component_gradients() {
        let mut r = rng(8);
        let x = rand_tensor(&mut r, 3, 3);
        let c = rand_tensor(&mut r, 3, 3);

        let component = |which: usize, xv: &Tensor| -> Vec<f64> {
            let mut g = Graph::new();
            let xp = g.param("x", xv).unwrap();
            let loss = match which {
                0 => {
                    let sq = g.mul(&xp, &xp).unwrap();
                    g.mean_all(&sq).unwrap()
                }
                1 => {
                    let sl = g.smooth_l1(&xp, &c).unwrap();
                    g.mean_all(&sl).unwrap()
                }
                _ => {
                    let m = g.mul(&xp, &c).unwrap();
                    g.sum_all(&m).unwrap()
                }
            };
            let grads = g.backward(&loss).unwrap();
            grads.get("x").unwrap().values().to_vec()
        };

        let mut g = Graph::new();
        let xp = g.param("x", &x).unwrap();
        let sq = g.mul(&xp, &xp).unwrap();
        let l0 = g.mean_all(&sq).unwrap();
        let sl = g.smooth_l1(&xp, &c).unwrap();
        let l1 = g.mean_all(&sl).unwrap();
        let m = g.mul(&xp, &c).unwrap();
        let l2 = g.sum_all(&m).unwrap();
        let tot = total_loss(&mut g, &l0, &l1, &l2).unwrap();
        let grads = g.backward(&tot).unwrap();
        let got = grads.get("x").unwrap().values().to_vec();

        let parts: Vec<Vec<f64>> = (0..3).map(|w| component(w, &x)).collect();
        for idx in 0..got.len() {
            let want = parts[0][idx] + parts[1][idx] + parts[2][idx];
            assert!((got[idx] - want).abs() < 1e-12);
        }
    }
}
