//! Central-difference gradient verification.
//!
//! The checker rebuilds the computation twice per coordinate with the input
//! nudged by `±h`, `h = 1e-5 * max(1, |x|)`, and compares the numeric slope
//! against the tape's analytic gradient with the relative error
//! `|ga - gn| / (|ga| + |gn| + 1e-8)`. Differences below an absolute floor
//! count as agreement so that genuinely zero gradients are not failed on
//! roundoff noise. Everything runs in `f64`; the ops being checked are the
//! same generic code paths training uses in `f32`.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CheckOpts {
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Absolute differences below this pass regardless of relative error.
    pub abs_floor: f64,
    /// `Some((k, seed))` checks k random coordinates per input instead of all.
    pub sample: Option<(usize, u64)>,
}

impl Default for CheckOpts {
    fn default() -> Self {
        CheckOpts { tolerance: 1e-5, abs_floor: 1e-9, sample: None }
    }
}

#[derive(Clone, Debug)]
pub struct WorstCoord {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<WorstCoord>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rel_err(ga: f64, gn: f64, abs_floor: f64) -> f64 {
    let diff = (ga - gn).abs();
    if diff <= abs_floor {
        return 0.0;
    }
    diff / (ga.abs() + gn.abs() + 1e-8)
}

/// Checks every differentiable input of the computation `build` constructs.
///
/// `build` receives one leaf per entry of `inputs` (all `requires_grad`) and
/// must return the scalar loss node. It is called once for the analytic pass
/// and twice per checked coordinate for the numeric passes, so it must be a
/// pure function of the leaf values.
pub fn grad_check<F>(inputs: &[Tensor<f64>], opts: &CheckOpts, build: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &ids)?;
        g.value(loss).item()
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &ids)?;
    let grads = g.backward(loss)?;

    let mut report = GradReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        tolerance: opts.tolerance,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();

    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let coords: Vec<usize> = match opts.sample {
            None => (0..input.numel()).collect(),
            Some((k, seed)) => {
                let mut rng = Rng::for_name(seed, &format!("gradcheck-input-{i}"));
                (0..k.min(input.numel()))
                    .map(|_| rng.below(input.numel()))
                    .collect()
            }
        };

        for &j in &coords {
            let x = input.data()[j];
            let h = 1e-5 * x.abs().max(1.0);

            work[i].data_mut()[j] = x + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x;

            let gn = (up - down) / (2.0 * h);
            let ga = analytic.data()[j];
            let err = rel_err(ga, gn, opts.abs_floor);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(WorstCoord { input: i, coord: j, analytic: ga, numeric: gn });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use std::cell::Cell;

    #[test]
    fn quadratic_composite_passes() {
        let mut rng = Rng::new(11);
        let x = Tensor::<f64>::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::uniform(&[4, 2], -1.0, 1.0, &mut rng);
        let report = grad_check(&[x, w], &CheckOpts::default(), |g, ids| {
            let y = g.matmul(ids[0], ids[1])?;
            let s = g.softmax(y)?;
            let sq = g.mul(s, s)?;
            Ok(g.sum_all(sq))
        })
        .unwrap();
        assert!(report.pass(), "max rel err {}", report.max_rel_err);
        assert_eq!(report.checked, 12 + 8);
    }

    #[test]
    fn inconsistent_function_is_caught() {
        // The analytic pass sees f(x); numeric passes see a slightly scaled
        // function, standing in for a wrong adjoint.
        let calls = Cell::new(0usize);
        let x = Tensor::from_f64(&[3], &[0.4, -0.7, 1.2]).unwrap();
        let report = grad_check(&[x], &CheckOpts::default(), |g, ids| {
            let n = calls.get();
            calls.set(n + 1);
            let sq = g.mul(ids[0], ids[0])?;
            let s = g.sum_all(sq);
            Ok(if n == 0 { s } else { g.scale(s, 1.001) })
        })
        .unwrap();
        assert!(!report.pass());
        assert!(report.max_rel_err > 1e-4);
    }

    #[test]
    fn sampling_bounds_work_and_is_deterministic() {
        let mut rng = Rng::new(3);
        let x = Tensor::<f64>::uniform(&[10, 10], -1.0, 1.0, &mut rng);
        let opts = CheckOpts { sample: Some((7, 99)), ..CheckOpts::default() };
        let run = || {
            grad_check(&[x.clone()], &opts, |g, ids| {
                let r = g.gelu(ids[0]);
                Ok(g.sum_all(r))
            })
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.checked, 7);
        assert_eq!(a.max_rel_err, b.max_rel_err);
        assert!(a.pass());
    }

    #[test]
    fn zero_gradient_is_not_a_false_positive() {
        // loss ignores the second input entirely
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let unused = Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap();
        let report = grad_check(&[x, unused], &CheckOpts::default(), |g, ids| {
            let sq = g.mul(ids[0], ids[0])?;
            Ok(g.sum_all(sq))
        })
        .unwrap();
        assert!(report.pass(), "max rel err {}", report.max_rel_err);
    }
}
