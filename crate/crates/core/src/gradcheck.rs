//! Central finite-difference verification of the backward pass, in `f64`.
//!
//! Analytic gradients come from [`Graph::backward`]; numeric gradients from
//! the fourth-order central stencil
//! `(8[f(θ + h) − f(θ − h)] − [f(θ + 2h) − f(θ − 2h)]) / 12h`, with the graph
//! rebuilt for every perturbation. The higher order allows a step large
//! enough that roundoff stays far below the tolerance.
//!
//! Per coordinate the error is `max(0, |a − n| − r) / max(|a|, |n|)`, where
//! `r = ROUNDOFF_ULPS · ε · |f| / h` bounds the stencil's roundoff. Without
//! `r`, a gradient component near zero would show a large relative error
//! that no f64 difference quotient can resolve. Below [`ABS_FALLBACK`] the
//! denominator is dropped.
//!
//! Leaky ReLU is not differentiable at zero. When a perturbation flips the
//! sign of any leaky ReLU input the difference quotient straddles a kink, so
//! the step is halved (down to [`MIN_STEP`]) until no sign flips.

use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Primitive};
use crate::kernels::ConvGeometry;
use crate::model::{
    build_discriminator, build_generator, GeneratorVariant, Model, Phase, Stage,
    DEFAULT_LEAKY_ALPHA,
};
use crate::noise::seeded_rng;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-3;
pub const MIN_STEP: f64 = 1e-7;
pub const TOLERANCE: f64 = 1e-4;
pub const ABS_FALLBACK: f64 = 1e-8;
/// Roundoff allowance of one stencil evaluation, in units of `ε · |f| / h`.
pub const ROUNDOFF_ULPS: f64 = 64.0;
/// Coordinates checked per tensor; larger tensors are subsampled.
pub const DEFAULT_MAX_COORDS: usize = 24;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    excess_error(analytic, numeric, 0.0)
}

/// Relative error after discounting `roundoff` from the absolute difference.
pub fn excess_error(analytic: f64, numeric: f64, roundoff: f64) -> f64 {
    let diff = (analytic - numeric).abs() - roundoff;
    let diff = if diff.is_nan() { diff } else { diff.max(0.0) };
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABS_FALLBACK {
        diff
    } else {
        diff / scale
    }
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    pub max_coords: usize,
    pub seed: u64,
    /// Corrupts the backward rule of one primitive in the analytic pass.
    pub fault: Option<Primitive>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            max_coords: DEFAULT_MAX_COORDS,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares analytic and numeric gradients of the scalar built by `build`
/// with respect to each named leaf.
pub fn check_leaves<F>(
    leaves: &[(String, Tensor<f64>)],
    build: F,
    opts: &CheckOptions,
) -> Result<Vec<ParamReport>>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor<f64>],
                fault: Option<Primitive>|
     -> Result<(Graph<f64>, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        if let Some(p) = fault {
            g.inject_fault(p);
        }
        let ids: Vec<NodeId> = values.iter().map(|v| g.param(v.clone())).collect();
        let root = build(&mut g, &ids)?;
        if !g.value(root).is_scalar() {
            return Err(Error::NonScalarRoot(g.value(root).shape().to_vec()));
        }
        Ok((g, ids, root))
    };

    let mut values: Vec<Tensor<f64>> = leaves.iter().map(|(_, t)| t.clone()).collect();
    let (mut g, ids, root) = eval(&values, opts.fault)?;
    g.backward(root)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .zip(&values)
        .map(|(&id, v)| {
            g.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(v.shape().to_vec()))
        })
        .collect();

    let base_signs = kink_signs(&g);
    let f_scale = g.value(root).item().abs();

    let mut rng = seeded_rng(opts.seed);
    let mut reports = Vec::with_capacity(leaves.len());
    for (i, (name, _)) in leaves.iter().enumerate() {
        let len = values[i].len();
        let coords = if len <= opts.max_coords {
            (0..len).collect::<Vec<_>>()
        } else {
            let mut c = index::sample(&mut rng, len, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst = 0.0f64;
        for &j in &coords {
            let orig = values[i].data()[j];
            let mut h = opts.step;
            let (numeric, h) = loop {
                let mut f = [0.0; 4];
                let mut smooth = true;
                for (slot, offset) in f.iter_mut().zip([h, -h, 2.0 * h, -2.0 * h]) {
                    values[i].data_mut()[j] = orig + offset;
                    let (gv, _, root) = eval(&values, None)?;
                    *slot = gv.value(root).item();
                    smooth &= kink_signs(&gv) == base_signs;
                }
                values[i].data_mut()[j] = orig;
                if smooth || h / 2.0 < MIN_STEP {
                    break ((8.0 * (f[0] - f[1]) - (f[2] - f[3])) / (12.0 * h), h);
                }
                h /= 2.0;
            };
            let roundoff = ROUNDOFF_ULPS * f64::EPSILON * f_scale / h;
            let err = excess_error(analytic[i].data()[j], numeric, roundoff);
            // NaN must never compare as passing.
            worst = if err.is_nan() {
                f64::NAN
            } else {
                worst.max(err)
            };
            if worst.is_nan() {
                break;
            }
        }
        reports.push(ParamReport {
            name: name.clone(),
            max_rel_error: worst,
            checked: coords.len(),
        });
    }
    Ok(reports)
}

/// Sign of every leaky ReLU input, in node order.
fn kink_signs(g: &Graph<f64>) -> Vec<bool> {
    g.nodes()
        .filter(|n| n.primitive() == Primitive::LeakyRelu)
        .flat_map(|n| g.value(n.parents()[0]).data().iter().map(|&v| v >= 0.0))
        .collect()
}

/// Gradient of the mean BCE between `model(input)` and `target` with
/// respect to every parameter. Batch norm uses batch statistics without
/// touching the running buffers.
pub fn grad_check(
    model: &Model<f64>,
    input: &Tensor<f64>,
    target: &Tensor<f64>,
    opts: &CheckOptions,
) -> Result<Vec<ParamReport>> {
    let leaves: Vec<(String, Tensor<f64>)> = model
        .param_names()
        .iter()
        .cloned()
        .zip(model.params().iter().cloned())
        .collect();
    check_leaves(
        &leaves,
        |g, ids| {
            let mut m = model.clone();
            let x = g.input(input.clone());
            let y = m.apply(g, ids, x, Phase::TrainFrozenStats)?;
            g.bce(y, target.clone(), 1e-7)
        },
        opts,
    )
}

/// One row of the suite: a primitive or a reference model.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub kind: String,
    pub case: String,
    pub params: Vec<ParamReport>,
}

impl CaseReport {
    pub fn worst(&self) -> f64 {
        self.params.iter().fold(0.0, |w, p| {
            if p.max_rel_error.is_nan() || w.is_nan() {
                f64::NAN
            } else {
                w.max(p.max_rel_error)
            }
        })
    }

    pub fn worst_param(&self) -> Option<&ParamReport> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.worst() < tol
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub cases: Vec<CaseReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed(self.tolerance))
    }

    /// `(kind, worst error)` per distinct kind, in first-seen order.
    pub fn by_kind(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for c in &self.cases {
            let w = c.worst();
            match out.iter_mut().find(|(k, _)| *k == c.kind) {
                Some((_, acc)) => {
                    *acc = if w.is_nan() || acc.is_nan() {
                        f64::NAN
                    } else {
                        acc.max(w)
                    }
                }
                None => out.push((c.kind.clone(), w)),
            }
        }
        out
    }

    pub fn failures(&self) -> Vec<&CaseReport> {
        self.cases
            .iter()
            .filter(|c| !c.passed(self.tolerance))
            .collect()
    }

    /// Deterministic text report: one line per case and a summary per kind.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.cases {
            let status = if c.passed(self.tolerance) {
                "ok"
            } else {
                "FAIL"
            };
            let (param, n) = c
                .worst_param()
                .map(|p| {
                    (
                        p.name.as_str(),
                        c.params.iter().map(|p| p.checked).sum::<usize>(),
                    )
                })
                .unwrap_or(("-", 0));
            let _ = writeln!(
                s,
                "{status:<4} {:<20} {:<28} max_rel_err={:.3e} worst={param} coords={n}",
                c.kind,
                c.case,
                c.worst()
            );
        }
        let _ = writeln!(
            s,
            "worst relative error per kind (tolerance {:.0e}):",
            self.tolerance
        );
        for (k, w) in self.by_kind() {
            let _ = writeln!(s, "  {k:<20} {w:.3e}");
        }
        s
    }
}

fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        std * rng.sample::<f64, _>(StandardNormal)
    })
}

/// Normal values bounded away from zero, so a leaky ReLU kink is never
/// straddled by a finite-difference step.
fn off_kink<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.sample(StandardNormal);
        if v.abs() < 0.1 {
            v.signum() * 0.1 + v
        } else {
            v
        }
    })
}

/// Collapses any node to a scalar through a fixed random linear map.
fn readout(g: &mut Graph<f64>, y: NodeId, w: &Tensor<f64>) -> Result<NodeId> {
    let n = g.value(y).len();
    let flat = g.reshape(y, &[1, n])?;
    let w = g.input(w.clone());
    let b = g.input(Tensor::zeros([1]));
    g.dense(flat, w, b)
}

type CaseFn = Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>>;

struct Case {
    kind: &'static str,
    name: String,
    leaves: Vec<(String, Tensor<f64>)>,
    build: CaseFn,
}

fn named(pairs: Vec<(&str, Tensor<f64>)>) -> Vec<(String, Tensor<f64>)> {
    pairs.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut rng = seeded_rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    let r = &mut rng;
    let mut cases = Vec::new();

    let out = [2, 4];
    let w_out = normal_tensor(r, &[out.iter().product(), 1], 1.0);
    cases.push(Case {
        kind: "dense",
        name: "2x5 -> 4".into(),
        leaves: named(vec![
            ("x", normal_tensor(r, &[2, 5], 1.0)),
            ("weight", normal_tensor(r, &[5, 4], 0.5)),
            ("bias", normal_tensor(r, &[4], 0.5)),
        ]),
        build: Box::new(move |g, l| {
            let y = g.dense(l[0], l[1], l[2])?;
            readout(g, y, &w_out)
        }),
    });

    let geom = ConvGeometry::square(2, 3, 3, 2, 1);
    let (oh, ow) = geom.conv_output(6, 5).expect("valid geometry");
    let w_out = normal_tensor(r, &[2 * 3 * oh * ow, 1], 1.0);
    cases.push(Case {
        kind: "conv2d",
        name: "k3 s2 p1 2->3 on 6x5".into(),
        leaves: named(vec![
            ("x", normal_tensor(r, &[2, 2, 6, 5], 1.0)),
            ("weight", normal_tensor(r, &[3, 2, 3, 3], 0.5)),
            ("bias", normal_tensor(r, &[3], 0.5)),
        ]),
        build: Box::new(move |g, l| {
            let y = g.conv2d(l[0], l[1], l[2], geom)?;
            readout(g, y, &w_out)
        }),
    });

    let geom = ConvGeometry {
        kernel: (2, 3),
        stride: (1, 2),
        padding: (0, 1),
        in_channels: 1,
        out_channels: 2,
    };
    let (oh, ow) = geom.conv_output(4, 7).expect("valid geometry");
    let w_out = normal_tensor(r, &[2 * 2 * oh * ow, 1], 1.0);
    cases.push(Case {
        kind: "conv2d",
        name: "k2x3 s1x2 p0x1 1->2 on 4x7".into(),
        leaves: named(vec![
            ("x", normal_tensor(r, &[2, 1, 4, 7], 1.0)),
            ("weight", normal_tensor(r, &[2, 1, 2, 3], 0.5)),
            ("bias", normal_tensor(r, &[2], 0.5)),
        ]),
        build: Box::new(move |g, l| {
            let y = g.conv2d(l[0], l[1], l[2], geom)?;
            readout(g, y, &w_out)
        }),
    });

    let geom = ConvGeometry::square(3, 2, 4, 2, 1);
    let (oh, ow) = geom.transpose_output(3, 4).expect("valid geometry");
    let w_out = normal_tensor(r, &[2 * 2 * oh * ow, 1], 1.0);
    cases.push(Case {
        kind: "conv2d_transpose",
        name: "k4 s2 p1 3->2 on 3x4".into(),
        leaves: named(vec![
            ("x", normal_tensor(r, &[2, 3, 3, 4], 1.0)),
            ("weight", normal_tensor(r, &[3, 2, 4, 4], 0.5)),
            ("bias", normal_tensor(r, &[2], 0.5)),
        ]),
        build: Box::new(move |g, l| {
            let y = g.conv2d_transpose(l[0], l[1], l[2], geom)?;
            readout(g, y, &w_out)
        }),
    });

    let w_out = normal_tensor(r, &[3 * 2 * 3 * 3, 1], 1.0);
    cases.push(Case {
        kind: "batchnorm",
        name: "train, batch 3, 2 channels".into(),
        leaves: named(vec![
            ("x", normal_tensor(r, &[3, 2, 3, 3], 1.0)),
            ("gamma", normal_tensor(r, &[2], 1.0)),
            ("beta", normal_tensor(r, &[2], 1.0)),
        ]),
        build: Box::new(move |g, l| {
            let y = g.batchnorm_train(l[0], l[1], l[2], 1e-5)?;
            readout(g, y, &w_out)
        }),
    });

    let w_out = normal_tensor(r, &[2 * 2 * 2 * 3, 1], 1.0);
    let running_mean = normal_tensor(r, &[2], 0.5);
    let running_var = Tensor::from_fn([2], |i| 0.5 + i as f64);
    cases.push(Case {
        kind: "batchnorm",
        name: "inference, running stats".into(),
        leaves: named(vec![
            ("x", normal_tensor(r, &[2, 2, 2, 3], 1.0)),
            ("gamma", normal_tensor(r, &[2], 1.0)),
            ("beta", normal_tensor(r, &[2], 1.0)),
        ]),
        build: Box::new(move |g, l| {
            let y = g.batchnorm_infer(l[0], l[1], l[2], &running_mean, &running_var, 1e-5)?;
            readout(g, y, &w_out)
        }),
    });

    let w_out = normal_tensor(r, &[14, 1], 1.0);
    cases.push(Case {
        kind: "leaky_relu",
        name: "alpha 0.2".into(),
        leaves: named(vec![("x", off_kink(r, &[2, 7]))]),
        build: Box::new(move |g, l| {
            let y = g.leaky_relu(l[0], 0.2);
            readout(g, y, &w_out)
        }),
    });

    let w_out = normal_tensor(r, &[12, 1], 1.0);
    cases.push(Case {
        kind: "sigmoid",
        name: "2x6".into(),
        leaves: named(vec![("x", normal_tensor(r, &[2, 6], 2.0))]),
        build: Box::new(move |g, l| {
            let y = g.sigmoid(l[0]);
            readout(g, y, &w_out)
        }),
    });

    let target = Tensor::from_fn([2, 3], |i| [0.0, 1.0, 0.3][i % 3]);
    cases.push(Case {
        kind: "bce",
        name: "probabilities in (0.1, 0.9)".into(),
        leaves: named(vec![(
            "p",
            Tensor::from_fn([2, 3], |_| 0.1 + 0.8 * r.random::<f64>()),
        )]),
        build: Box::new(move |g, l| g.bce(l[0], target.clone(), 1e-7)),
    });

    let w_out = normal_tensor(r, &[2 * 36, 1], 1.0);
    cases.push(Case {
        kind: "upsample_nearest",
        name: "x2 on 3x3".into(),
        leaves: named(vec![("x", normal_tensor(r, &[2, 1, 3, 3], 1.0))]),
        build: Box::new(move |g, l| {
            let y = g.upsample_nearest(l[0], 2)?;
            readout(g, y, &w_out)
        }),
    });

    let w_out = normal_tensor(r, &[2 * 9, 1], 1.0);
    cases.push(Case {
        kind: "downsample_nearest",
        name: "x2 on 6x6".into(),
        leaves: named(vec![("x", normal_tensor(r, &[2, 1, 6, 6], 1.0))]),
        build: Box::new(move |g, l| {
            let y = g.downsample_nearest(l[0], 2)?;
            readout(g, y, &w_out)
        }),
    });

    let w_out = normal_tensor(r, &[12, 1], 1.0);
    cases.push(Case {
        kind: "reshape",
        name: "2x6 -> 2x2x3".into(),
        leaves: named(vec![("x", normal_tensor(r, &[2, 6], 1.0))]),
        build: Box::new(move |g, l| {
            let y = g.reshape(l[0], &[2, 2, 3])?;
            readout(g, y, &w_out)
        }),
    });

    let w_out = normal_tensor(r, &[8, 1], 1.0);
    cases.push(Case {
        kind: "add",
        name: "a + 0.5a + b (fan-out)".into(),
        leaves: named(vec![
            ("a", normal_tensor(r, &[2, 4], 1.0)),
            ("b", normal_tensor(r, &[2, 4], 1.0)),
        ]),
        build: Box::new(move |g, l| {
            let half = g.scale(l[0], 0.5);
            let s = g.add(l[0], half)?;
            let s = g.add(s, l[1])?;
            readout(g, s, &w_out)
        }),
    });

    let w_out = normal_tensor(r, &[6, 1], 1.0);
    cases.push(Case {
        kind: "scale",
        name: "-1.7x".into(),
        leaves: named(vec![("x", normal_tensor(r, &[2, 3], 1.0))]),
        build: Box::new(move |g, l| {
            let y = g.scale(l[0], -1.7);
            readout(g, y, &w_out)
        }),
    });

    let w1 = normal_tensor(r, &[6, 1], 1.0);
    let target = Tensor::from_fn([2, 1], |i| i as f64);
    let geom = ConvGeometry::square(1, 1, 3, 1, 1);
    cases.push(Case {
        kind: "composite",
        name: "dense>leaky>conv>sigmoid>bce".into(),
        leaves: named(vec![
            ("x", normal_tensor(r, &[2, 5], 1.0)),
            ("dense.weight", normal_tensor(r, &[5, 9], 0.5)),
            ("dense.bias", normal_tensor(r, &[9], 0.5)),
            ("conv.weight", normal_tensor(r, &[1, 1, 3, 3], 0.5)),
            ("conv.bias", normal_tensor(r, &[1], 0.5)),
        ]),
        build: Box::new(move |g, l| {
            let h = g.dense(l[0], l[1], l[2])?;
            let h = g.leaky_relu(h, 0.2);
            let h = g.reshape(h, &[2, 1, 3, 3])?;
            let h = g.conv2d(h, l[3], l[4], geom)?;
            let h = g.reshape(h, &[2, 9])?;
            let w = g.input(Tensor::from_fn([9, 1], |i| w1.data()[i % 6]));
            let b = g.input(Tensor::zeros([1]));
            let h = g.dense(h, w, b)?;
            let p = g.sigmoid(h);
            g.bce(p, target.clone(), 1e-7)
        }),
    });
    cases
}

/// Re-initializes `model` with fan-in scaled weights and non-trivial biases
/// so that no gradient vanishes below finite-difference resolution.
pub fn scaled_init(model: &mut Model<f64>, seed: u64) {
    let mut rng = seeded_rng(seed);
    let names = model.param_names().to_vec();
    for (name, p) in names.iter().zip(model.params_mut()) {
        let shape = p.shape().to_vec();
        let (mean, std) = if name.ends_with(".gamma") {
            (1.0, 0.2)
        } else if shape.len() == 1 {
            (0.0, 0.2)
        } else {
            let fan_in = if shape.len() == 2 {
                shape[0]
            } else {
                p.len() / shape[0]
            };
            (0.0, 1.0 / (fan_in as f64).sqrt())
        };
        let dist = Normal::new(mean, std).expect("finite std");
        for v in p.data_mut() {
            *v = dist.sample(&mut rng);
        }
    }
}

/// `(case name, model, input, target)`.
type ModelCase = (String, Model<f64>, Tensor<f64>, Tensor<f64>);

/// Both reference architectures at 16×16: each generator variant and the
/// discriminator.
fn model_cases(seed: u64) -> Result<Vec<ModelCase>> {
    let size = (16, 16);
    let alpha = DEFAULT_LEAKY_ALPHA;
    let mut rng = seeded_rng(seed ^ 0x5851_f42d_4c95_7f2d);
    let specs = [
        (
            "generator latent_upsample",
            build_generator(Stage::First, GeneratorVariant::LatentUpsample, size, alpha)?,
        ),
        (
            "generator dense_noise",
            build_generator(Stage::First, GeneratorVariant::DenseNoise, size, alpha)?,
        ),
        (
            "generator refine",
            build_generator(Stage::Refine, GeneratorVariant::default(), size, alpha)?,
        ),
        ("discriminator", build_discriminator(size, alpha)?),
    ];
    let mut out = Vec::new();
    for (i, (name, spec)) in specs.into_iter().enumerate() {
        let mut model = Model::zeroed(spec);
        scaled_init(&mut model, seed.wrapping_add(i as u64));
        let batch = 2;
        let mut in_shape = vec![batch];
        in_shape.extend_from_slice(model.spec().input_shape());
        let input = normal_tensor(&mut rng, &in_shape, 1.0);
        let mut out_shape = vec![batch];
        out_shape.extend_from_slice(model.spec().output_shape());
        let target = Tensor::from_fn(out_shape, |_| rng.random::<f64>());
        out.push((name.to_string(), model, input, target));
    }
    Ok(out)
}

/// Runs every primitive case and both reference models.
pub fn run_suite(opts: &CheckOptions) -> Result<SuiteReport> {
    let mut cases = Vec::new();
    for c in primitive_cases(opts.seed) {
        let params = check_leaves(&c.leaves, &c.build, opts)?;
        cases.push(CaseReport {
            kind: c.kind.to_string(),
            case: c.name,
            params,
        });
    }
    for (name, model, input, target) in model_cases(opts.seed)? {
        let params = grad_check(&model, &input, &target, opts)?;
        let kind = if name.starts_with("generator") {
            "generator"
        } else {
            "discriminator"
        };
        cases.push(CaseReport {
            kind: kind.to_string(),
            case: name,
            params,
        });
    }
    Ok(SuiteReport {
        tolerance: TOLERANCE,
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_measure() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1e-9, -1e-9), 2e-9);
        assert!(relative_error(f64::NAN, 1.0).is_nan());
        assert_eq!(excess_error(1.0, 1.5, 0.25), 0.25 / 1.5);
        assert_eq!(excess_error(1.0, 1.1, 0.5), 0.0);
        assert!(excess_error(f64::NAN, 1.0, 0.5).is_nan());
    }

    #[test]
    fn single_dense_passes() {
        let leaves = named(vec![
            ("w", Tensor::from_fn([3, 1], |i| i as f64 * 0.3 - 0.2)),
            ("x", Tensor::from_fn([1, 3], |i| 1.0 - i as f64)),
        ]);
        let reports = check_leaves(
            &leaves,
            |g, l| {
                let b = g.input(Tensor::zeros([1]));
                let y = g.dense(l[1], l[0], b)?;
                let p = g.sigmoid(y);
                g.bce(p, Tensor::ones([1, 1]), 1e-7)
            },
            &CheckOptions::default(),
        )
        .unwrap();
        assert_eq!(reports.len(), 2);
        assert!(
            reports.iter().all(|r| r.max_rel_error < TOLERANCE),
            "{reports:?}"
        );
    }

    #[test]
    fn fault_is_detected() {
        let leaves = named(vec![("x", Tensor::from_fn([1, 2], |i| i as f64 - 0.4))]);
        let build = |g: &mut Graph<f64>, l: &[NodeId]| {
            let y = g.sigmoid(l[0]);
            g.bce(y, Tensor::ones([1, 2]), 1e-7)
        };
        let opts = CheckOptions {
            fault: Some(Primitive::Sigmoid),
            ..CheckOptions::default()
        };
        let r = check_leaves(&leaves, build, &opts).unwrap();
        assert!(r[0].max_rel_error > 0.1);
    }

    #[test]
    fn zero_model_checks_cleanly() {
        let spec = build_discriminator((16, 16), 0.2).unwrap();
        let model = Model::<f64>::zeroed(spec);
        let input = Tensor::full([2, 1, 16, 16], 0.5);
        let target = Tensor::from_fn([2, 1], |i| i as f64);
        let r = grad_check(&model, &input, &target, &CheckOptions::default()).unwrap();
        assert!(r.iter().all(|p| p.max_rel_error < TOLERANCE), "{r:?}");
    }
}
