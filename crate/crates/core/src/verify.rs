//! Runtime verification suites.
//!
//! Everything the test suite pins down statically is also runnable on demand:
//! gradient checks over every operation and every composite layer, behavioural
//! invariants of the attention and fusion paths, metric oracles, and
//! determinism of initialisation, data generation and training. Each suite
//! returns a report of case counts and failure messages rather than
//! panicking, so a caller can print one line per suite and fail the process
//! at the end.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::fusion::{Capture, DifaLevel, MsaLevel, MsaView};
use crate::gradcheck::{grad_check, CheckOpts, GradReport};
use crate::graph::{Graph, NodeId};
use crate::network::{FusionOrder, ModelConfig, TransFusionModel, ViewConfig, MODEL_SCHEMA};
use crate::objectives;
use crate::params::{Bound, ParamSet, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::synthdata::{generate_sample, SampleBundle, ViewData};
use crate::tensor::Tensor;
use crate::trainer::{self, AdamConfig, LrSchedule, TrainConfig, Trainer};

pub const SUITES: &[&str] = &[
    "gradcheck-ops",
    "gradcheck-composite",
    "attention-invariants",
    "difa-invariants",
    "msa-invariants",
    "ablation-identity",
    "metric-oracles",
    "determinism",
];

/// Outcome of one suite.
#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub failures: Vec<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn summary_line(&self) -> String {
        if self.passed() {
            format!("suite {}: {} cases, PASS", self.name, self.cases)
        } else {
            format!(
                "suite {}: {} cases, FAIL ({} failing)",
                self.name,
                self.cases,
                self.failures.len()
            )
        }
    }
}

struct Suite {
    report: SuiteReport,
}

impl Suite {
    fn new(name: &str) -> Suite {
        Suite { report: SuiteReport { name: name.into(), cases: 0, failures: Vec::new() } }
    }

    fn check(&mut self, label: &str, ok: bool) {
        self.report.cases += 1;
        if !ok {
            self.report.failures.push(label.to_string());
        }
    }

    fn close(&mut self, label: &str, got: f64, want: f64, tol: f64) {
        self.report.cases += 1;
        if !(got - want).abs().le(&tol) {
            self.report
                .failures
                .push(format!("{label}: got {got}, want {want} within {tol}"));
        }
    }

    fn grad<F>(&mut self, label: &str, inputs: &[Tensor<f64>], opts: &CheckOpts, build: F)
    where
        F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
    {
        self.report.cases += 1;
        match grad_check(inputs, opts, build) {
            Ok(r) if r.pass() => {}
            Ok(r) => self.report.failures.push(format!(
                "{label}: max rel err {:.3e} (tolerance {:.1e})",
                r.max_rel_err, r.tolerance
            )),
            Err(e) => self.report.failures.push(format!("{label}: {e}")),
        }
    }

    fn finish(self) -> SuiteReport {
        self.report
    }
}

/// Gradient check where some inputs are a parameter store bound by name.
fn grad_check_with_params<F>(
    store: &ParamStore<f64>,
    data_inputs: &[Tensor<f64>],
    opts: &CheckOpts,
    build: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &Bound, &[NodeId]) -> Result<NodeId>,
{
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut inputs = data_inputs.to_vec();
    for n in &names {
        inputs.push(store.get(n)?.clone());
    }
    let nd = data_inputs.len();
    grad_check(&inputs, opts, |g, ids| {
        let mut map = BTreeMap::new();
        for (i, n) in names.iter().enumerate() {
            map.insert(n.clone(), ids[nd + i]);
        }
        let bound = Bound::new(map);
        build(g, &bound, &ids[..nd])
    })
}

/// Pushes zero-initialised output projections off zero so gradients flow
/// through every path being checked.
fn randomize_zero_inits<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng) {
    let zeroed: Vec<String> = store
        .names()
        .filter(|n| n.ends_with(".wo") || n.ends_with(".w2") || n.ends_with(".wout"))
        .map(String::from)
        .collect();
    for name in zeroed {
        let shape = store.get(&name).unwrap().shape().to_vec();
        store.set(&name, Tensor::uniform(&shape, -0.2, 0.2, rng)).unwrap();
    }
}

/// Two-view model small enough to differentiate numerically.
fn probe_config() -> ModelConfig {
    ModelConfig {
        schema: MODEL_SCHEMA,
        views: vec![
            ViewConfig { name: "vol".into(), shape: vec![4, 8, 8] },
            ViewConfig { name: "plane".into(), shape: vec![8, 8] },
        ],
        classes: 3,
        base_channels: 2,
        max_channels: 8,
        levels: 3,
        heads: 2,
        difa_levels: vec![3],
        msa_levels: vec![3],
        fusion_order: FusionOrder::CrossViewFirst,
    }
}

/// Phantom-shaped model used by the determinism suite on cropped samples.
fn cropped_config() -> ModelConfig {
    ModelConfig {
        schema: MODEL_SCHEMA,
        views: vec![
            ViewConfig { name: "sa".into(), shape: vec![8, 32, 32] },
            ViewConfig { name: "la".into(), shape: vec![32, 32] },
        ],
        classes: 4,
        base_channels: 2,
        max_channels: 8,
        levels: 3,
        heads: 2,
        difa_levels: vec![3],
        msa_levels: vec![3],
        fusion_order: FusionOrder::CrossViewFirst,
    }
}

/// Central 32x32 in-plane crop of a rendered sample.
fn crop32(bundle: &SampleBundle<f32>) -> SampleBundle<f32> {
    let views = bundle
        .views
        .iter()
        .map(|view| {
            let shape = view.image.shape().to_vec();
            let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
            let slices: usize = shape[..shape.len() - 2].iter().product();
            let mut img = Vec::new();
            let mut lab = Vec::new();
            for s in 0..slices {
                for y in 16..48 {
                    for x in 16..48 {
                        let o = (s * h + y) * w + x;
                        img.push(view.image.data()[o]);
                        lab.push(view.labels[o]);
                    }
                }
            }
            let mut new_shape = shape[..shape.len() - 2].to_vec();
            new_shape.extend_from_slice(&[32, 32]);
            ViewData {
                name: view.name.clone(),
                image: Tensor::new(new_shape, img).unwrap(),
                labels: lab,
            }
        })
        .collect();
    SampleBundle { views }
}

fn sq_sum(g: &mut Graph<f64>, y: NodeId) -> Result<NodeId> {
    let sq = g.mul(y, y)?;
    Ok(g.sum_all(sq))
}

fn gradcheck_ops() -> SuiteReport {
    let mut suite = Suite::new("gradcheck-ops");
    let opts = CheckOpts::default();
    for seed in 0..5u64 {
        let mut rng = Rng::for_name(seed, "verify-ops");
        let t = |shape: &[usize], lo: f64, hi: f64, rng: &mut Rng| {
            Tensor::<f64>::uniform(shape, lo, hi, rng)
        };

        let a = t(&[3, 4], -1.0, 1.0, &mut rng);
        let b = t(&[4, 5], -1.0, 1.0, &mut rng);
        suite.grad(&format!("matmul2d/{seed}"), &[a, b], &opts, |g, ids| {
            let y = g.matmul(ids[0], ids[1])?;
            sq_sum(g, y)
        });

        let a = t(&[2, 3, 4], -1.0, 1.0, &mut rng);
        let b = t(&[2, 4, 5], -1.0, 1.0, &mut rng);
        suite.grad(&format!("matmul3d/{seed}"), &[a, b], &opts, |g, ids| {
            let y = g.matmul(ids[0], ids[1])?;
            sq_sum(g, y)
        });

        let x = t(&[5, 3], -1.0, 1.0, &mut rng);
        let w = t(&[3, 4], -1.0, 1.0, &mut rng);
        let bias = t(&[4], -0.5, 0.5, &mut rng);
        suite.grad(&format!("linear/{seed}"), &[x, w, bias], &opts, |g, ids| {
            let y = g.linear(ids[0], ids[1], ids[2])?;
            sq_sum(g, y)
        });

        let x = t(&[4, 6], -2.0, 2.0, &mut rng);
        suite.grad(&format!("softmax/{seed}"), &[x], &opts, |g, ids| {
            let y = g.softmax(ids[0])?;
            sq_sum(g, y)
        });

        let x = t(&[4, 6], -2.0, 2.0, &mut rng);
        suite.grad(&format!("logsoftmax/{seed}"), &[x], &opts, |g, ids| {
            let y = g.logsoftmax(ids[0])?;
            sq_sum(g, y)
        });

        let x = t(&[3, 7], -1.0, 1.0, &mut rng);
        let bias = t(&[7], -0.5, 0.5, &mut rng);
        suite.grad(&format!("add_bias/{seed}"), &[x, bias], &opts, |g, ids| {
            let y = g.add_bias(ids[0], ids[1])?;
            sq_sum(g, y)
        });

        let x = t(&[2, 5, 6], -1.0, 1.0, &mut rng);
        let w = t(&[3, 2, 3, 3], -0.5, 0.5, &mut rng);
        let bias = t(&[3], -0.2, 0.2, &mut rng);
        suite.grad(&format!("conv2d/{seed}"), &[x, w, bias], &opts, |g, ids| {
            let y = g.conv(ids[0], ids[1], ids[2], &[1, 1], &[1, 1])?;
            sq_sum(g, y)
        });

        let x = t(&[1, 4, 6, 6], -1.0, 1.0, &mut rng);
        let w = t(&[2, 1, 1, 3, 3], -0.5, 0.5, &mut rng);
        let bias = t(&[2], -0.2, 0.2, &mut rng);
        suite.grad(&format!("conv3d_strided/{seed}"), &[x, w, bias], &opts, |g, ids| {
            let y = g.conv(ids[0], ids[1], ids[2], &[1, 2, 2], &[0, 1, 1])?;
            sq_sum(g, y)
        });

        let x = t(&[3, 8], -1.5, 1.5, &mut rng);
        let gamma = t(&[8], 0.5, 1.5, &mut rng);
        let beta = t(&[8], -0.5, 0.5, &mut rng);
        suite.grad(&format!("layer_norm/{seed}"), &[x, gamma, beta], &opts, |g, ids| {
            let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
            sq_sum(g, y)
        });

        let x = t(&[4, 2, 5], -1.5, 1.5, &mut rng);
        let gamma = t(&[4], 0.5, 1.5, &mut rng);
        let beta = t(&[4], -0.5, 0.5, &mut rng);
        suite.grad(&format!("channel_norm/{seed}"), &[x, gamma, beta], &opts, |g, ids| {
            let y = g.channel_norm(ids[0], ids[1], ids[2], 1e-5)?;
            sq_sum(g, y)
        });

        let x = t(&[3, 4], -1.0, 1.0, &mut rng);
        let y = t(&[3, 4], -1.0, 1.0, &mut rng);
        suite.grad(&format!("add_mul_sub/{seed}"), &[x, y], &opts, |g, ids| {
            let s = g.add(ids[0], ids[1])?;
            let m = g.mul(s, ids[0])?;
            let d = g.sub(m, ids[1])?;
            sq_sum(g, d)
        });

        let x = t(&[3, 4], -1.0, 1.0, &mut rng);
        let mut y = t(&[3, 4], 0.5, 1.5, &mut rng);
        if seed % 2 == 0 {
            for v in y.data_mut() {
                *v = -*v;
            }
        }
        suite.grad(&format!("div/{seed}"), &[x, y], &opts, |g, ids| {
            let q = g.div(ids[0], ids[1])?;
            sq_sum(g, q)
        });

        let mut x = t(&[3, 4], 0.2, 1.5, &mut rng);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            if i % 2 == 0 {
                *v = -*v;
            }
        }
        suite.grad(&format!("relu_off_kink/{seed}"), &[x], &opts, |g, ids| {
            let y = g.relu(ids[0]);
            sq_sum(g, y)
        });

        let x = t(&[3, 4], -2.0, 2.0, &mut rng);
        suite.grad(&format!("gelu/{seed}"), &[x], &opts, |g, ids| {
            let y = g.gelu(ids[0]);
            sq_sum(g, y)
        });

        let x = t(&[3, 4], -1.0, 1.0, &mut rng);
        suite.grad(&format!("exp/{seed}"), &[x], &opts, |g, ids| {
            let y = g.exp(ids[0]);
            sq_sum(g, y)
        });

        let x = t(&[3, 4], 0.3, 2.0, &mut rng);
        suite.grad(&format!("log/{seed}"), &[x], &opts, |g, ids| {
            let y = g.log(ids[0]);
            sq_sum(g, y)
        });

        let x = t(&[3, 4], 0.2, 1.5, &mut rng);
        suite.grad(&format!("powf/{seed}"), &[x], &opts, |g, ids| {
            let y = g.powf(ids[0], 1.7);
            sq_sum(g, y)
        });

        let x = t(&[3, 4], -1.0, 1.0, &mut rng);
        suite.grad(&format!("scale_shift/{seed}"), &[x], &opts, |g, ids| {
            let y = g.scale(ids[0], -2.5);
            let z = g.add_scalar(y, 0.7);
            sq_sum(g, z)
        });

        let x = t(&[2, 3, 4], -1.0, 1.0, &mut rng);
        suite.grad(&format!("reshape_transpose/{seed}"), &[x], &opts, |g, ids| {
            let r = g.reshape(ids[0], &[6, 4])?;
            let tr = g.transpose(r, 0, 1)?;
            sq_sum(g, tr)
        });

        let a = t(&[3, 2], -1.0, 1.0, &mut rng);
        let b = t(&[3, 5], -1.0, 1.0, &mut rng);
        suite.grad(&format!("concat_slice/{seed}"), &[a, b], &opts, |g, ids| {
            let c = g.concat(1, &[ids[0], ids[1]])?;
            let s = g.slice(c, 1, 1, 4)?;
            sq_sum(g, s)
        });

        let x = t(&[2, 3, 4], -1.0, 1.0, &mut rng);
        suite.grad(&format!("upsample2x/{seed}"), &[x], &opts, |g, ids| {
            let y = g.upsample2x(ids[0], &[1, 2])?;
            sq_sum(g, y)
        });

        let x = t(&[3, 5], -1.0, 1.0, &mut rng);
        suite.grad(&format!("sum_axes/{seed}"), &[x], &opts, |g, ids| {
            let s0 = g.sum_axis(ids[0], 0)?;
            let s1 = g.sum_axis(ids[0], 1)?;
            let a = sq_sum(g, s0)?;
            let b = sq_sum(g, s1)?;
            g.add(a, b)
        });

        let logits = t(&[5, 4], -2.0, 2.0, &mut rng);
        let labels: Vec<u8> = (0..5).map(|i| (i % 4) as u8).collect();
        let oh = objectives::one_hot::<f64>(&labels, 4).unwrap();
        suite.grad(&format!("losses/{seed}"), &[logits], &opts, move |g, ids| {
            let ohid = g.constant(oh.clone());
            let d = objectives::dice_loss(g, ids[0], ohid)?;
            let f = objectives::focal_loss(g, ids[0], ohid, 2.0)?;
            g.add(d, f)
        });
    }
    suite.finish()
}

fn gradcheck_composite() -> SuiteReport {
    let mut suite = Suite::new("gradcheck-composite");
    let opts = CheckOpts { tolerance: 1e-4, ..CheckOpts::default() };

    for seed in 0..2u64 {
        let mut rng = Rng::for_name(seed, "verify-composite");

        let mut set = ParamSet::new();
        let block = crate::attention::TransformerBlock::new(&mut set, "blk", 8, 2);
        let mut store: ParamStore<f64> = set.init_store(seed + 100);
        randomize_zero_inits(&mut store, &mut rng);
        let x = Tensor::<f64>::uniform(&[5, 8], -1.0, 1.0, &mut rng);
        match grad_check_with_params(&store, &[x], &opts, |g, p, ids| {
            let (y, _) = block.forward(g, p, ids[0])?;
            sq_sum(g, y)
        }) {
            Ok(r) => suite.check(
                &format!("transformer_block/{seed}: max rel err {:.3e}", r.max_rel_err),
                r.pass(),
            ),
            Err(e) => suite.check(&format!("transformer_block/{seed}: {e}"), false),
        }

        let views = ["a".to_string(), "b".to_string(), "c".to_string()];
        let mut set = ParamSet::new();
        let difa = DifaLevel::new(&mut set, "difa", &views[..2 + (seed as usize % 2)], 8, 2);
        let mut store: ParamStore<f64> = set.init_store(seed + 200);
        randomize_zero_inits(&mut store, &mut rng);
        let feats: Vec<Tensor<f64>> = (0..(2 + seed as usize % 2))
            .map(|i| Tensor::uniform(&[3 + i, 8], -1.0, 1.0, &mut rng))
            .collect();
        match grad_check_with_params(&store, &feats, &opts, |g, p, ids| {
            let outs = difa.forward(g, p, ids, &mut Capture::off())?;
            let mut total = None;
            for o in outs {
                let s = sq_sum(g, o)?;
                total = Some(match total {
                    None => s,
                    Some(t) => g.add(t, s)?,
                });
            }
            Ok(total.unwrap())
        }) {
            Ok(r) => suite.check(
                &format!("cross_view/{seed}: max rel err {:.3e}", r.max_rel_err),
                r.pass(),
            ),
            Err(e) => suite.check(&format!("cross_view/{seed}: {e}"), false),
        }

        let levels = [
            MsaLevel { level: 3, channels: 4 },
            MsaLevel { level: 4, channels: 8 },
        ];
        let mut set = ParamSet::new();
        let msa = MsaView::new(&mut set, "msa.x", &levels, 2);
        let mut store: ParamStore<f64> = set.init_store(seed + 300);
        randomize_zero_inits(&mut store, &mut rng);
        let f3 = Tensor::<f64>::uniform(&[6, 4], -1.0, 1.0, &mut rng);
        let f4 = Tensor::<f64>::uniform(&[3, 8], -1.0, 1.0, &mut rng);
        match grad_check_with_params(&store, &[f3, f4], &opts, |g, p, ids| {
            let outs = msa.forward(g, p, ids, &mut Capture::off())?;
            let a = sq_sum(g, outs[0])?;
            let b = sq_sum(g, outs[1])?;
            g.add(a, b)
        }) {
            Ok(r) => suite.check(
                &format!("cross_scale/{seed}: max rel err {:.3e}", r.max_rel_err),
                r.pass(),
            ),
            Err(e) => suite.check(&format!("cross_scale/{seed}: {e}"), false),
        }
    }

    // whole model, sampled coordinates
    let cfg = probe_config();
    let model = TransFusionModel::new(cfg.clone()).unwrap();
    let mut store: ParamStore<f64> = model.init_store(41);
    let mut rng = Rng::new(42);
    randomize_zero_inits(&mut store, &mut rng);
    let mut images = Vec::new();
    for v in &cfg.views {
        let mut shape = vec![1];
        shape.extend(&v.shape);
        images.push(Tensor::<f64>::uniform(&shape, 0.1, 0.9, &mut rng));
    }
    let opts = CheckOpts { sample: Some((2, 977)), tolerance: 1e-4, ..CheckOpts::default() };
    match grad_check_with_params(&store, &images, &opts, |g, p, ids| {
        let outs = model.forward(g, p, ids, &mut Capture::off())?;
        let mut total = None;
        for o in outs {
            let s = sq_sum(g, o)?;
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
        }
        Ok(total.unwrap())
    }) {
        Ok(r) => {
            suite.check(&format!("whole_model: max rel err {:.3e}", r.max_rel_err), r.pass())
        }
        Err(e) => suite.check(&format!("whole_model: {e}"), false),
    }

    suite.finish()
}

fn attention_invariants() -> SuiteReport {
    let mut suite = Suite::new("attention-invariants");
    let mut rng = Rng::new(11);

    let q = Tensor::<f64>::uniform(&[2, 5, 3], -1.0, 1.0, &mut rng);
    let k = Tensor::<f64>::uniform(&[2, 4, 3], -1.0, 1.0, &mut rng);
    let v = Tensor::<f64>::uniform(&[2, 4, 3], -1.0, 1.0, &mut rng);
    let mut g = Graph::<f64>::new();
    let (qid, kid, vid) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let (_, weights) = crate::attention::scaled_dot_attention(&mut g, qid, kid, vid).unwrap();
    let wt = g.value(weights);
    let mut worst: f64 = 0.0;
    for h in 0..2 {
        for n in 0..5 {
            let row: f64 = (0..4).map(|m| wt.data()[(h * 5 + n) * 4 + m]).sum();
            worst = worst.max((row - 1.0).abs());
        }
    }
    suite.close("weight rows sum to one", worst, 0.0, 1e-12);

    // permuting keys and values together leaves the output unchanged
    let perm = [2usize, 0, 3, 1];
    let permute = |t: &Tensor<f64>| {
        let mut out = t.clone();
        for h in 0..2 {
            for (dst, &src) in perm.iter().enumerate() {
                for d in 0..3 {
                    out.data_mut()[(h * 4 + dst) * 3 + d] = t.data()[(h * 4 + src) * 3 + d];
                }
            }
        }
        out
    };
    let mut g = Graph::<f64>::new();
    let qid = g.constant(q.clone());
    let (kp, vp) = (g.constant(permute(&k)), g.constant(permute(&v)));
    let (out_p, _) = crate::attention::scaled_dot_attention(&mut g, qid, kp, vp).unwrap();
    let mut g2 = Graph::<f64>::new();
    let qid2 = g2.constant(q.clone());
    let (k2, v2) = (g2.constant(k.clone()), g2.constant(v.clone()));
    let (out, _) = crate::attention::scaled_dot_attention(&mut g2, qid2, k2, v2).unwrap();
    let diff = g2.value(out).max_abs_diff(g.value(out_p)).unwrap();
    suite.close("key/value permutation invariance", diff, 0.0, 1e-12);

    // 1x1x d case against a direct softmax computation
    let d = 4usize;
    let qv: Vec<f64> = (0..d).map(|i| 0.3 * i as f64 - 0.4).collect();
    let k0: Vec<f64> = (0..d).map(|i| 0.2 * i as f64 + 0.1).collect();
    let k1: Vec<f64> = (0..d).map(|i| -0.1 * i as f64 + 0.5).collect();
    let mut g = Graph::<f64>::new();
    let qid = g.constant(Tensor::new(vec![1, 1, d], qv.clone()).unwrap());
    let kid = g.constant(Tensor::new(vec![1, 2, d], [k0.clone(), k1.clone()].concat()).unwrap());
    let vid = g.constant(
        Tensor::from_f64(&[1, 2, d], &[[1.0; 4].as_slice(), [2.0; 4].as_slice()].concat())
            .unwrap(),
    );
    let (out, _) = crate::attention::scaled_dot_attention(&mut g, qid, kid, vid).unwrap();
    let s0: f64 = qv.iter().zip(&k0).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt();
    let s1: f64 = qv.iter().zip(&k1).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt();
    let w1 = (s1 - s0).exp() / (1.0 + (s1 - s0).exp());
    let want = (1.0 - w1) * 1.0 + w1 * 2.0;
    suite.close(
        "scaled scores match direct softmax",
        g.value(out).data()[0],
        want,
        1e-12,
    );

    let mut set = ParamSet::new();
    let block = crate::attention::TransformerBlock::new(&mut set, "blk", 8, 2);
    let store: ParamStore<f64> = set.init_store(5);
    let x = Tensor::<f64>::uniform(&[6, 8], -2.0, 2.0, &mut rng);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let xid = g.constant(x.clone());
    let (y, _) = block.forward(&mut g, &p, xid).unwrap();
    suite.check(
        "fresh block is the identity",
        g.value(y).data() == x.data(),
    );

    let mut store2 = store.clone();
    randomize_zero_inits(&mut store2, &mut rng);
    let mut g = Graph::new();
    let p = store2.bind(&mut g, false);
    let xid = g.constant(x.clone());
    let (y, _) = block.forward(&mut g, &p, xid).unwrap();
    suite.check(
        "perturbed block moves off the identity",
        g.value(y).data() != x.data(),
    );

    suite.finish()
}

fn difa_invariants() -> SuiteReport {
    let mut suite = Suite::new("difa-invariants");
    let mut rng = Rng::new(21);
    let views: Vec<String> = ["sa", "la"].iter().map(|s| s.to_string()).collect();

    let mut set = ParamSet::new();
    let difa = DifaLevel::new(&mut set, "difa3", &views, 8, 2);
    let mut store: ParamStore<f64> = set.init_store(3);
    randomize_zero_inits(&mut store, &mut rng);

    let x_sa = Tensor::<f64>::uniform(&[6, 8], -1.0, 1.0, &mut rng);
    let x_la = Tensor::<f64>::uniform(&[3, 8], -1.0, 1.0, &mut rng);

    // a view attends only to the other views: zero them and nothing is added
    let mut g = Graph::<f64>::new();
    let p = store.bind(&mut g, false);
    let zeros = g.constant(Tensor::zeros(&[3, 8]));
    let xid = g.constant(x_sa.clone());
    let outs = difa.forward(&mut g, &p, &[xid, zeros], &mut Capture::off()).unwrap();
    suite.check(
        "queries exclude the view itself",
        g.value(outs[0]).data() == x_sa.data(),
    );

    // information does flow from the other view when it is nonzero
    let mut g = Graph::<f64>::new();
    let p = store.bind(&mut g, false);
    let xid = g.constant(x_sa.clone());
    let laid = g.constant(x_la.clone());
    let outs = difa.forward(&mut g, &p, &[xid, laid], &mut Capture::off()).unwrap();
    suite.check(
        "other views feed the target view",
        g.value(outs[0]).data() != x_sa.data(),
    );
    suite.check(
        "token counts are preserved",
        g.shape(outs[0]) == [6, 8] && g.shape(outs[1]) == [3, 8],
    );

    // fresh weights leave every view untouched
    let fresh: ParamStore<f64> = set.init_store(3);
    let mut g = Graph::<f64>::new();
    let p = fresh.bind(&mut g, false);
    let xid = g.constant(x_sa.clone());
    let laid = g.constant(x_la.clone());
    let outs = difa.forward(&mut g, &p, &[xid, laid], &mut Capture::off()).unwrap();
    suite.check(
        "fresh cross-view layer is the identity",
        g.value(outs[0]).data() == x_sa.data() && g.value(outs[1]).data() == x_la.data(),
    );

    // a single-view model cannot ask for cross-view fusion
    let mut cfg = probe_config();
    cfg.views.truncate(1);
    suite.check(
        "single-view config with cross-view levels is rejected",
        TransFusionModel::new(cfg).is_err(),
    );

    suite.finish()
}

fn msa_invariants() -> SuiteReport {
    let mut suite = Suite::new("msa-invariants");
    let mut rng = Rng::new(31);

    let mut set = ParamSet::new();
    let single = MsaView::new(&mut set, "msa.x", &[MsaLevel { level: 5, channels: 8 }], 2);
    let mut store: ParamStore<f64> = set.init_store(7);
    randomize_zero_inits(&mut store, &mut rng);
    let x = Tensor::<f64>::uniform(&[6, 8], -1.0, 1.0, &mut rng);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let xid = g.constant(x.clone());
    let via_msa = single.forward(&mut g, &p, &[xid], &mut Capture::off()).unwrap();
    let (via_block, _) = single.block.forward(&mut g, &p, xid).unwrap();
    suite.check(
        "single level equals its inner block",
        g.value(via_msa[0]).data() == g.value(via_block).data(),
    );

    let levels = [
        MsaLevel { level: 3, channels: 4 },
        MsaLevel { level: 4, channels: 8 },
        MsaLevel { level: 5, channels: 8 },
    ];
    let mut set = ParamSet::new();
    let msa = MsaView::new(&mut set, "msa.y", &levels, 2);
    let store: ParamStore<f64> = set.init_store(8);
    let f3 = Tensor::<f64>::uniform(&[9, 4], -2.0, 2.0, &mut rng);
    let f4 = Tensor::<f64>::uniform(&[4, 8], -2.0, 2.0, &mut rng);
    let f5 = Tensor::<f64>::uniform(&[2, 8], -2.0, 2.0, &mut rng);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let ids = [g.constant(f3.clone()), g.constant(f4.clone()), g.constant(f5.clone())];
    let outs = msa.forward(&mut g, &p, &ids, &mut Capture::off()).unwrap();
    suite.check(
        "fresh multi-scale layer is the identity",
        g.value(outs[0]).data() == f3.data()
            && g.value(outs[1]).data() == f4.data()
            && g.value(outs[2]).data() == f5.data(),
    );
    suite.check(
        "widths are projected back per level",
        g.shape(outs[0]) == [9, 4] && g.shape(outs[1]) == [4, 8] && g.shape(outs[2]) == [2, 8],
    );

    // only levels whose width differs from the deepest get projections
    let names: Vec<&str> = store.names().collect();
    suite.check(
        "only narrow levels own projections",
        names.iter().any(|n| n.starts_with("msa.y.l3."))
            && !names.iter().any(|n| n.starts_with("msa.y.l4."))
            && !names.iter().any(|n| n.starts_with("msa.y.l5.")),
    );

    suite.finish()
}

fn ablation_identity() -> SuiteReport {
    let mut suite = Suite::new("ablation-identity");
    let cfg = probe_config();
    let seed = 17u64;
    let mut rng = Rng::new(18);

    let mut images = Vec::new();
    for v in &cfg.views {
        let mut shape = vec![1];
        shape.extend(&v.shape);
        images.push(Tensor::<f32>::uniform(&shape, 0.1, 0.9, &mut rng));
    }

    let fused_off = TransFusionModel::new(cfg.without_fusion()).unwrap();
    let store_off: ParamStore<f32> = fused_off.init_store(seed);
    let mut g = Graph::<f32>::new();
    let p = store_off.bind(&mut g, false);
    let ids: Vec<NodeId> = images.iter().map(|t| g.constant(t.clone())).collect();
    let outs_joint = fused_off.forward(&mut g, &p, &ids, &mut Capture::off()).unwrap();

    for (i, _) in cfg.views.iter().enumerate() {
        let solo = TransFusionModel::new(cfg.single_view(i)).unwrap();
        let store: ParamStore<f32> = solo.init_store(seed);
        let mut gs = Graph::<f32>::new();
        let ps = store.bind(&mut gs, false);
        let img = gs.constant(images[i].clone());
        let outs = solo.forward(&mut gs, &ps, &[img], &mut Capture::off()).unwrap();
        suite.check(
            &format!("fusion-off view {i} equals the single-view model"),
            gs.value(outs[0]).data() == g.value(outs_joint[i]).data(),
        );
    }

    // fused variants stay valid and produce the right output shapes
    for levels in [vec![3usize], vec![]] {
        let sub = cfg.with_fused_levels(&levels);
        let model = TransFusionModel::new(sub).unwrap();
        let store: ParamStore<f32> = model.init_store(seed);
        let mut gs = Graph::<f32>::new();
        let ps = store.bind(&mut gs, false);
        let ids: Vec<NodeId> = images.iter().map(|t| gs.constant(t.clone())).collect();
        let outs = model.forward(&mut gs, &ps, &ids, &mut Capture::off()).unwrap();
        suite.check(
            &format!("fused levels {levels:?} keep logits shapes"),
            gs.shape(outs[0]) == [cfg.classes, 4, 8, 8] && gs.shape(outs[1]) == [cfg.classes, 8, 8],
        );
    }

    suite.finish()
}

fn metric_oracles() -> SuiteReport {
    let mut suite = Suite::new("metric-oracles");

    // focal at p_t = 0.9, gamma = 2, against independent arithmetic
    let logits =
        Tensor::<f64>::from_f64(&[1, 3], &[0.9f64.ln(), 0.05f64.ln(), 0.05f64.ln()]).unwrap();
    let oh = objectives::one_hot::<f64>(&[0], 3).unwrap();
    let mut g = Graph::new();
    let lg = g.constant(logits.clone());
    let ohid = g.constant(oh.clone());
    let f2 = objectives::focal_loss(&mut g, lg, ohid, 2.0).unwrap();
    suite.close(
        "focal(p_t = 0.9, gamma = 2)",
        g.value(f2).item().unwrap(),
        0.0010536051565782628,
        1e-9,
    );

    // gamma = 0 equals cross-entropy computed independently
    let mut rng = Rng::new(41);
    let raw = Tensor::<f64>::uniform(&[6, 4], -3.0, 3.0, &mut rng);
    let labels: Vec<u8> = (0..6).map(|i| (i * 7 % 4) as u8).collect();
    let mut ce = 0.0;
    for (row, &label) in labels.iter().enumerate() {
        let x = &raw.data()[row * 4..row * 4 + 4];
        let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + x.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        ce -= x[label as usize] - lse;
    }
    ce /= labels.len() as f64;
    let oh = objectives::one_hot::<f64>(&labels, 4).unwrap();
    let mut g = Graph::new();
    let lg = g.constant(raw.clone());
    let ohid = g.constant(oh);
    let f0 = objectives::focal_loss(&mut g, lg, ohid, 0.0).unwrap();
    suite.close(
        "focal(gamma = 0) equals cross-entropy",
        g.value(f0).item().unwrap(),
        ce,
        1e-6,
    );

    // soft dice on a uniform prediction
    let mut g = Graph::<f64>::new();
    let lg = g.constant(Tensor::zeros(&[2, 2]));
    let ohid = g.constant(objectives::one_hot::<f64>(&[1, 1], 2).unwrap());
    let d = objectives::dice_loss(&mut g, lg, ohid).unwrap();
    let eps = objectives::DICE_EPS;
    suite.close(
        "soft dice on uniform probabilities",
        g.value(d).item().unwrap(),
        1.0 - (2.0 + eps) / (3.0 + eps),
        1e-12,
    );

    // counting dice conventions
    let pred = [0u8, 1, 1, 2];
    let truth = [0u8, 1, 2, 2];
    suite.close("dice overlap", objectives::dice_score(&pred, &truth, 1), 2.0 / 3.0, 1e-12);
    suite.close("dice both empty", objectives::dice_score(&pred, &truth, 3), 1.0, 1e-12);
    suite.close("dice one empty", objectives::dice_score(&[1, 0], &[0, 0], 1), 0.0, 1e-12);

    // pinned Hausdorff pair
    let shape = [3usize, 2];
    let mut a = vec![0u8; 6];
    let mut b = vec![0u8; 6];
    a[0] = 1;
    a[4] = 1;
    b[1] = 1;
    let d = objectives::hausdorff(&a, &b, &shape, &[1.0, 1.0], 1).unwrap();
    suite.close("hausdorff sqrt(5) pair", d, 5.0f64.sqrt(), 1e-12);
    suite.check(
        "hausdorff empty mask excluded",
        objectives::hausdorff(&a, &vec![0u8; 6], &shape, &[1.0, 1.0], 1).is_none(),
    );

    // anisotropic distance transform against brute force
    let mut rng = Rng::new(55);
    let shape = [4usize, 5, 6];
    let spacing = [8.0, 1.25, 1.25];
    let mut exact = 0usize;
    let mut total = 0usize;
    for _ in 0..20 {
        let mask: Vec<bool> = (0..120).map(|_| rng.flag(0.15)).collect();
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let fast = objectives::squared_edt(&mask, &shape, &spacing);
        for z in 0..4 {
            for y in 0..5 {
                for x in 0..6 {
                    let mut best = f64::INFINITY;
                    for (j, &m) in mask.iter().enumerate() {
                        if m {
                            let (zz, yy, xx) = (j / 30, (j / 6) % 5, j % 6);
                            let dz = (z as f64 - zz as f64) * spacing[0];
                            let dy = (y as f64 - yy as f64) * spacing[1];
                            let dx = (x as f64 - xx as f64) * spacing[2];
                            best = best.min(dz * dz + dy * dy + dx * dx);
                        }
                    }
                    total += 1;
                    if fast[(z * 5 + y) * 6 + x] == best {
                        exact += 1;
                    }
                }
            }
        }
    }
    suite.check(
        &format!("distance transform exact on {exact}/{total} voxels"),
        exact == total && total > 0,
    );

    suite.finish()
}

fn determinism() -> SuiteReport {
    let mut suite = Suite::new("determinism");

    let model = TransFusionModel::new(probe_config()).unwrap();
    let s1: ParamStore<f32> = model.init_store(9);
    let s2: ParamStore<f32> = model.init_store(9);
    let s3: ParamStore<f32> = model.init_store(10);
    let same = s1.iter().zip(s2.iter()).all(|((_, a), (_, b))| a.data() == b.data());
    let differs = s1.iter().zip(s3.iter()).any(|((_, a), (_, b))| a.data() != b.data());
    suite.check("parameter init depends only on the seed", same);
    suite.check("different seeds give different parameters", differs);

    let (_, a) = generate_sample::<f32>(9, 4);
    let (_, b) = generate_sample::<f32>(9, 4);
    let same = a
        .views
        .iter()
        .zip(&b.views)
        .all(|(x, y)| x.image.data() == y.image.data() && x.labels == y.labels);
    suite.check("sample generation depends only on (seed, index)", same);

    let cfg = TrainConfig {
        epochs: 1,
        batch: 1,
        lr0: 1e-3,
        schedule: LrSchedule::Exponential { decay: 0.99 },
        adam: AdamConfig::default(),
        augment: true,
        seed: 13,
    };
    let data: Vec<SampleBundle<f32>> = vec![crop32(&generate_sample::<f32>(19, 0).1)];
    let run = |cfg: &TrainConfig| -> Result<ParamStore<f32>> {
        let model = TransFusionModel::new(cropped_config())?;
        let mut t = Trainer::<f32>::new(model, 23, cfg.clone());
        t.run_epoch(&data)?;
        Ok(t.params)
    };
    match (run(&cfg), run(&cfg)) {
        (Ok(p1), Ok(p2)) => {
            let same = p1.iter().zip(p2.iter()).all(|((_, a), (_, b))| a.data() == b.data());
            suite.check("one training epoch is bit-reproducible", same);
        }
        (Err(e), _) | (_, Err(e)) => {
            suite.check(&format!("one training epoch is bit-reproducible: {e}"), false)
        }
    }

    let model = TransFusionModel::new(cropped_config()).unwrap();
    let params = model.init_store::<f32>(23);
    match (
        trainer::evaluate(&model, &params, &data),
        trainer::evaluate(&model, &params, &data),
    ) {
        (Ok(e1), Ok(e2)) => {
            let same = e1
                .iter()
                .zip(&e2)
                .all(|(a, b)| a.dice.lv == b.dice.lv && a.dice.myo == b.dice.myo && a.dice.rv == b.dice.rv);
            suite.check("evaluation is bit-reproducible", same);
        }
        (Err(e), _) | (_, Err(e)) => {
            suite.check(&format!("evaluation is bit-reproducible: {e}"), false)
        }
    }

    suite.finish()
}

pub fn run_suite(name: &str) -> Result<SuiteReport> {
    match name {
        "gradcheck-ops" => Ok(gradcheck_ops()),
        "gradcheck-composite" => Ok(gradcheck_composite()),
        "attention-invariants" => Ok(attention_invariants()),
        "difa-invariants" => Ok(difa_invariants()),
        "msa-invariants" => Ok(msa_invariants()),
        "ablation-identity" => Ok(ablation_identity()),
        "metric-oracles" => Ok(metric_oracles()),
        "determinism" => Ok(determinism()),
        other => Err(Error::config(format!(
            "unknown suite {other:?}; known: {}",
            SUITES.join(", ")
        ))),
    }
}

pub fn run_all() -> Result<Vec<SuiteReport>> {
    SUITES.iter().map(|name| run_suite(name)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        for report in run_all().unwrap() {
            assert!(
                report.passed(),
                "{}: {:?}",
                report.summary_line(),
                report.failures
            );
            assert!(report.cases > 0);
        }
    }

    #[test]
    fn op_gradients_have_enough_cases() {
        let report = run_suite("gradcheck-ops").unwrap();
        assert!(report.cases >= 100, "only {} cases", report.cases);
    }

    #[test]
    fn unknown_suite_is_an_error() {
        assert!(run_suite("nope").is_err());
    }
}
