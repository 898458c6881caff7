//! Training losses and evaluation metrics.
//!
//! Losses build on the autodiff graph and treat a segmentation as `[N, C]`
//! token rows (one row per voxel). Metrics operate on plain label arrays and
//! never touch the graph: overlap as per-class Dice, boundary quality as the
//! exact symmetric Hausdorff distance in millimetres via an exact squared
//! Euclidean distance transform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::{strides_of, Tensor};

/// Smoothing guard in the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-5;

/// Focusing exponent of the focal term; 0 reduces it to cross-entropy.
pub const FOCAL_GAMMA: f64 = 2.0;

/// Background class index, excluded from Dice averaging.
pub const BACKGROUND: u8 = 0;

// -- graph losses ------------------------------------------------------------

/// One-hot rows `[N, classes]` from a label array.
pub fn one_hot<T: Scalar>(labels: &[u8], classes: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= classes {
            return Err(Error::config(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        t.data_mut()[i * classes + l as usize] = T::one();
    }
    Ok(t)
}

/// Reorders map logits `[C, spatial...]` into token rows `[N, C]`.
pub fn logit_tokens<T: Scalar>(g: &mut Graph<T>, logits: NodeId) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    if shape.len() < 2 {
        return Err(Error::BadShape {
            op: "logit_tokens",
            shape,
            reason: "need [C, spatial...]".into(),
        });
    }
    let c = shape[0];
    let n: usize = shape[1..].iter().product();
    let flat = g.reshape(logits, &[c, n])?;
    g.transpose(flat, 0, 1)
}

/// Soft Dice loss over the foreground classes:
/// `1 - mean_c (2 * sum p_c t_c + eps) / (sum p_c + sum t_c + eps)`.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, logits_nc: NodeId, onehot: NodeId) -> Result<NodeId> {
    let shape = g.shape(logits_nc).to_vec();
    if shape.len() != 2 || g.shape(onehot) != shape {
        return Err(Error::ShapeMismatch {
            op: "dice_loss",
            lhs: shape,
            rhs: g.shape(onehot).to_vec(),
        });
    }
    let classes = shape[1];
    if classes < 2 {
        return Err(Error::config("dice needs at least one foreground class"));
    }
    let probs = g.softmax(logits_nc)?;
    let pt = g.mul(probs, onehot)?;
    let inter = g.sum_axis(pt, 0)?;
    let psum = g.sum_axis(probs, 0)?;
    let tsum = g.sum_axis(onehot, 0)?;

    let take_fg = |g: &mut Graph<T>, x: NodeId| g.slice(x, 0, 1, classes - 1);
    let inter_fg = take_fg(g, inter)?;
    let psum_fg = take_fg(g, psum)?;
    let tsum_fg = take_fg(g, tsum)?;

    let twice = g.scale(inter_fg, 2.0);
    let num = g.add_scalar(twice, DICE_EPS);
    let den_sum = g.add(psum_fg, tsum_fg)?;
    let den = g.add_scalar(den_sum, DICE_EPS);
    let per_class = g.div(num, den)?;
    let total = g.sum_all(per_class);
    let mean = g.scale(total, 1.0 / (classes - 1) as f64);
    let neg = g.scale(mean, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Focal loss `mean_n -(1 - p_t)^gamma * log p_t`, computed through
/// log-softmax so extreme logits stay finite.
pub fn focal_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits_nc: NodeId,
    onehot: NodeId,
    gamma: f64,
) -> Result<NodeId> {
    let shape = g.shape(logits_nc).to_vec();
    if shape.len() != 2 || g.shape(onehot) != shape {
        return Err(Error::ShapeMismatch {
            op: "focal_loss",
            lhs: shape,
            rhs: g.shape(onehot).to_vec(),
        });
    }
    let n = shape[0];
    let logp = g.logsoftmax(logits_nc)?;
    let picked = g.mul(logp, onehot)?;
    let logp_t = g.sum_axis(picked, 1)?;
    let per = if gamma == 0.0 {
        logp_t
    } else {
        let p_t = g.exp(logp_t);
        let neg_p = g.scale(p_t, -1.0);
        let one_minus = g.add_scalar(neg_p, 1.0);
        let w = g.powf(one_minus, gamma);
        g.mul(w, logp_t)?
    };
    let total = g.sum_all(per);
    Ok(g.scale(total, -1.0 / n as f64))
}

/// Per-view Dice + focal, summed over views.
pub fn segmentation_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: &[NodeId],
    onehots: &[NodeId],
) -> Result<NodeId> {
    if logits.len() != onehots.len() || logits.is_empty() {
        return Err(Error::config(format!(
            "{} logit maps vs {} label sets",
            logits.len(),
            onehots.len()
        )));
    }
    let mut total = None;
    for (&lg, &oh) in logits.iter().zip(onehots) {
        let tokens = logit_tokens(g, lg)?;
        let d = dice_loss(g, tokens, oh)?;
        let f = focal_loss(g, tokens, oh, FOCAL_GAMMA)?;
        let view_loss = g.add(d, f)?;
        total = Some(match total {
            None => view_loss,
            Some(t) => g.add(t, view_loss)?,
        });
    }
    Ok(total.unwrap())
}

// -- label-space metrics -------------------------------------------------------

/// Argmax over the class axis of `[C, spatial...]` logits or probabilities.
pub fn predict_labels<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let c = logits.shape()[0];
    let n: usize = logits.shape()[1..].iter().product();
    let data = logits.data();
    (0..n)
        .map(|i| {
            let mut best = 0usize;
            for class in 1..c {
                if data[class * n + i] > data[best * n + i] {
                    best = class;
                }
            }
            best as u8
        })
        .collect()
}

/// Voxel-counting Dice for one class; 1.0 when both masks are empty.
pub fn dice_score(pred: &[u8], truth: &[u8], class: u8) -> f64 {
    assert_eq!(pred.len(), truth.len());
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut t = 0usize;
    for (&a, &b) in pred.iter().zip(truth) {
        let pa = a == class;
        let tb = b == class;
        p += pa as usize;
        t += tb as usize;
        inter += (pa && tb) as usize;
    }
    if p + t == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + t) as f64
    }
}

/// Exact 1D squared distance transform (lower envelope of parabolas) on
/// arbitrary increasing sample coordinates.
fn dt_1d(f: &[f64], coords: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        loop {
            let p = v[k];
            if f[p] == f64::INFINITY {
                if k == 0 {
                    v[k] = q;
                    z[k] = f64::NEG_INFINITY;
                    z[k + 1] = f64::INFINITY;
                    break;
                }
                k -= 1;
                continue;
            }
            let s = ((f[q] + coords[q] * coords[q]) - (f[p] + coords[p] * coords[p]))
                / (2.0 * (coords[q] - coords[p]));
            if s <= z[k] {
                if k == 0 {
                    v[k] = q;
                    z[k] = f64::NEG_INFINITY;
                    z[k + 1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < coords[q] {
            k += 1;
        }
        let p = v[k];
        out[q] = if f[p] == f64::INFINITY {
            f64::INFINITY
        } else {
            let d = coords[q] - coords[p];
            d * d + f[p]
        };
    }
}

/// Exact squared Euclidean distance (in physical units) from every voxel
/// center to the nearest `true` voxel center.
pub fn squared_edt(mask: &[bool], shape: &[usize], spacing: &[f64]) -> Vec<f64> {
    assert_eq!(shape.len(), spacing.len());
    let numel: usize = shape.iter().product();
    assert_eq!(mask.len(), numel);
    let mut dist: Vec<f64> =
        mask.iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();
    let strides = strides_of(shape);

    for axis in 0..shape.len() {
        let n = shape[axis];
        if n == 1 {
            continue;
        }
        let coords: Vec<f64> = (0..n).map(|i| i as f64 * spacing[axis]).collect();
        let stride = strides[axis];
        let mut line = vec![0.0f64; n];
        let mut out = vec![0.0f64; n];
        // walk every line along `axis`
        let lines = numel / n;
        for li in 0..lines {
            // decompose li into the non-axis coordinates
            let mut rem = li;
            let mut base = 0usize;
            for (a, &e) in shape.iter().enumerate() {
                if a == axis {
                    continue;
                }
                let c = rem % e;
                rem /= e;
                base += c * strides[a];
            }
            for i in 0..n {
                line[i] = dist[base + i * stride];
            }
            if line.iter().all(|&d| d == f64::INFINITY) {
                continue;
            }
            dt_1d(&line, &coords, &mut out);
            for i in 0..n {
                dist[base + i * stride] = out[i];
            }
        }
    }
    dist
}

/// Exact symmetric Hausdorff distance between the class masks of two label
/// arrays, in the physical units of `spacing`. `None` when either mask is
/// empty, so callers can count exclusions instead of silently scoring them.
pub fn hausdorff(
    pred: &[u8],
    truth: &[u8],
    shape: &[usize],
    spacing: &[f64],
    class: u8,
) -> Option<f64> {
    let a: Vec<bool> = pred.iter().map(|&v| v == class).collect();
    let b: Vec<bool> = truth.iter().map(|&v| v == class).collect();
    if !a.iter().any(|&m| m) || !b.iter().any(|&m| m) {
        return None;
    }
    let dist_to_b = squared_edt(&b, shape, spacing);
    let dist_to_a = squared_edt(&a, shape, spacing);
    let mut worst: f64 = 0.0;
    for i in 0..a.len() {
        if a[i] {
            worst = worst.max(dist_to_b[i]);
        }
        if b[i] {
            worst = worst.max(dist_to_a[i]);
        }
    }
    Some(worst.sqrt())
}

/// Evaluation scores of one view on one sample.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiceByClass {
    pub lv: f64,
    pub myo: f64,
    pub rv: f64,
}

impl DiceByClass {
    pub fn from_labels(pred: &[u8], truth: &[u8]) -> Self {
        DiceByClass {
            lv: dice_score(pred, truth, 1),
            myo: dice_score(pred, truth, 2),
            rv: dice_score(pred, truth, 3),
        }
    }

    pub fn avg(&self) -> f64 {
        (self.lv + self.myo + self.rv) / 3.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, CheckOpts};
    use crate::rng::Rng;

    #[test]
    fn one_hot_rows_mark_the_label() {
        let t: Tensor<f64> = one_hot(&[0, 2, 1], 3).unwrap();
        assert_eq!(t.shape(), &[3, 3]);
        assert_eq!(t.data(), &[1., 0., 0., 0., 0., 1., 0., 1., 0.]);
        assert!(one_hot::<f64>(&[3], 3).is_err());
    }

    #[test]
    fn dice_loss_matches_hand_computation() {
        // two voxels, two classes, uniform probabilities; target class 1 on
        // both: intersection 1.0, sums 1 and 2 -> dice (2+e)/(3+e)
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::zeros(&[2, 2]), true);
        let target = g.constant(one_hot(&[1, 1], 2).unwrap());
        let loss = dice_loss(&mut g, logits, target).unwrap();
        let want = 1.0 - (2.0 * 1.0 + DICE_EPS) / (3.0 + DICE_EPS);
        assert!((g.value(loss).item().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn dice_loss_is_small_for_confident_correct_predictions() {
        let labels = [1u8, 2, 0, 3, 1, 0];
        let mut logits = Tensor::<f64>::zeros(&[6, 4]);
        for (i, &l) in labels.iter().enumerate() {
            logits.data_mut()[i * 4 + l as usize] = 30.0;
        }
        let mut g = Graph::new();
        let lg = g.constant(logits);
        let oh = g.constant(one_hot(&labels, 4).unwrap());
        let loss = dice_loss(&mut g, lg, oh).unwrap();
        assert!(g.value(loss).item().unwrap() < 1e-6);
    }

    #[test]
    fn focal_matches_pinned_value_and_zero_gamma_is_cross_entropy() {
        // probabilities (0.9, 0.05, 0.05) exactly, target class 0
        let logits = Tensor::<f64>::from_f64(
            &[1, 3],
            &[0.9f64.ln(), 0.05f64.ln(), 0.05f64.ln()],
        )
        .unwrap();
        let oh: Tensor<f64> = one_hot(&[0], 3).unwrap();

        let mut g = Graph::new();
        let lg = g.constant(logits.clone());
        let ohid = g.constant(oh.clone());
        let f2 = focal_loss(&mut g, lg, ohid, 2.0).unwrap();
        let want = -(0.1f64.powi(2)) * 0.9f64.ln();
        assert!((g.value(f2).item().unwrap() - want).abs() < 1e-12);
        assert!((want - 0.0010536).abs() < 1e-7);

        let f0 = focal_loss(&mut g, lg, ohid, 0.0).unwrap();
        let ce = -(0.9f64.ln());
        assert!((g.value(f0).item().unwrap() - ce).abs() < 1e-12);
    }

    #[test]
    fn focal_survives_extreme_logits() {
        let logits = Tensor::from_f64(&[2, 2], &[500.0, -500.0, -500.0, 500.0]).unwrap();
        let mut g = Graph::<f64>::new();
        let lg = g.constant(logits);
        let oh = g.constant(one_hot(&[0, 1], 2).unwrap());
        let f = focal_loss(&mut g, lg, oh, 2.0).unwrap();
        let v = g.value(f).item().unwrap();
        assert!(v.is_finite() && v.abs() < 1e-12, "got {v}");
    }

    #[test]
    fn loss_gradients_match_numeric() {
        let mut rng = Rng::new(13);
        let logits = Tensor::<f64>::uniform(&[5, 4], -2.0, 2.0, &mut rng);
        let labels = [1u8, 0, 3, 2, 1];
        let oh: Tensor<f64> = one_hot(&labels, 4).unwrap();

        let report = grad_check(&[logits], &CheckOpts::default(), |g, ids| {
            let ohid = g.constant(oh.clone());
            let d = dice_loss(g, ids[0], ohid)?;
            let f = focal_loss(g, ids[0], ohid, 2.0)?;
            g.add(d, f)
        })
        .unwrap();
        assert!(report.pass(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn predictions_take_the_argmax_class() {
        let logits = Tensor::<f64>::from_f64(
            &[3, 2, 2],
            &[
                5.0, 0.0, 0.0, 1.0, // class 0
                1.0, 4.0, 0.0, 2.0, // class 1
                0.0, 1.0, 7.0, 3.0, // class 2
            ],
        )
        .unwrap();
        assert_eq!(predict_labels(&logits), vec![0, 1, 2, 2]);
    }

    #[test]
    fn dice_score_counts_and_handles_empty_masks() {
        let pred = [0u8, 1, 1, 2];
        let truth = [0u8, 1, 2, 2];
        assert!((dice_score(&pred, &truth, 1) - 2.0 / 3.0).abs() < 1e-12);
        assert!((dice_score(&pred, &truth, 2) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(dice_score(&pred, &truth, 3), 1.0); // both empty
        assert_eq!(dice_score(&[1, 0], &[0, 0], 1), 0.0); // one empty
    }

    #[test]
    fn hausdorff_matches_the_pinned_example() {
        // A = {(0,0), (2,0)}, B = {(0,1)} on a unit grid: sup distance sqrt(5)
        let shape = [3usize, 2];
        let mut a = vec![0u8; 6];
        let mut b = vec![0u8; 6];
        a[0] = 1; // (0,0)
        a[4] = 1; // (2,0)
        b[1] = 1; // (0,1)
        let d = hausdorff(&a, &b, &shape, &[1.0, 1.0], 1).unwrap();
        assert!((d - 5.0f64.sqrt()).abs() < 1e-12);
        assert!((d - 2.23607).abs() < 1e-5);

        assert!(hausdorff(&a, &vec![0u8; 6], &shape, &[1.0, 1.0], 1).is_none());
    }

    #[test]
    fn hausdorff_scales_with_spacing() {
        let shape = [1usize, 4];
        let a = [1u8, 0, 0, 0];
        let b = [0u8, 0, 0, 1];
        let d = hausdorff(&a, &b, &shape, &[8.0, 1.25], 1).unwrap();
        assert!((d - 3.75).abs() < 1e-12);
    }

    #[test]
    fn edt_agrees_with_brute_force_on_random_masks() {
        let mut rng = Rng::new(99);
        for _ in 0..10 {
            let shape = [4usize, 5, 6];
            let spacing = [8.0, 1.25, 1.25];
            let mask: Vec<bool> = (0..120).map(|_| rng.flag(0.2)).collect();
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let fast = squared_edt(&mask, &shape, &spacing);
            for z in 0..4 {
                for y in 0..5 {
                    for x in 0..6 {
                        let i = (z * 5 + y) * 6 + x;
                        let mut best = f64::INFINITY;
                        for zz in 0..4 {
                            for yy in 0..5 {
                                for xx in 0..6 {
                                    let j = (zz * 5 + yy) * 6 + xx;
                                    if mask[j] {
                                        let dz = (z as f64 - zz as f64) * spacing[0];
                                        let dy = (y as f64 - yy as f64) * spacing[1];
                                        let dx = (x as f64 - xx as f64) * spacing[2];
                                        best = best.min(dz * dz + dy * dy + dx * dx);
                                    }
                                }
                            }
                        }
                        assert_eq!(fast[i], best, "voxel ({z},{y},{x})");
                    }
                }
            }
        }
    }
}
