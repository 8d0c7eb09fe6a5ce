//! Finite-difference verification of reverse-mode gradients.
//!
//! Each probed coordinate is perturbed by `±step` and the central difference
//! is compared with the analytic gradient. The relative error of a probe is
//! `|a - n| / max(|a|, |n|, floor)`; the floor keeps round-off on tiny
//! gradients from dominating.
//!
//! Probes whose perturbation flips a ReLU's active set straddle a kink and
//! are skipped (and counted), since the central difference is meaningless
//! there.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::param::ParamStore;
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    /// Probe at most this many coordinates per argument (all when `None`).
    pub max_probes: Option<usize>,
    pub seed: u64,
    /// Multiplies analytic gradients before comparison. Only useful for
    /// negative controls.
    pub analytic_scale: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            tolerance: 1e-5,
            floor: 1e-3,
            max_probes: None,
            seed: 0,
            analytic_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArgReport {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    pub probes: usize,
    pub skipped_kinks: usize,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub args: Vec<ArgReport>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.args.iter().map(|a| a.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.args
            .iter()
            .all(|a| a.max_rel_err < self.tolerance && a.probes > 0)
    }

    /// One line per argument, for terminal output.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<40} {:>12} {:>7} {:>6}  {}\n",
            "argument", "max_rel_err", "probes", "kinks", "status"
        );
        for a in &self.args {
            let ok = a.max_rel_err < self.tolerance && a.probes > 0;
            out.push_str(&format!(
                "{:<40} {:>12.3e} {:>7} {:>6}  {}\n",
                a.name,
                a.max_rel_err,
                a.probes,
                a.skipped_kinks,
                if ok { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Random projection turning a tensor output into a scalar objective.
fn projection(shape: &[usize], seed: u64) -> Tensor<f64> {
    crate::nn::init::Init::new(seed ^ 0x9e37_79b9_7f4a_7c15).uniform(shape, 1.0)
}

fn objective(value: &Tensor<f64>, weights: &Tensor<f64>) -> f64 {
    value
        .data()
        .iter()
        .zip(weights.data())
        .map(|(a, b)| a * b)
        .sum()
}

fn probe_indices(len: usize, opts: &GradcheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_probes {
        Some(m) if m < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(salt));
            let mut idx = sample(&mut rng, len, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

struct Evaluation {
    objective: f64,
    pattern: u64,
}

/// Checks gradients with respect to explicit input tensors.
///
/// `f` receives the graph and one tracked leaf per input and returns the
/// output node; non-scalar outputs are reduced with a fixed random
/// projection.
pub fn check_inputs<Fn_>(
    f: Fn_,
    inputs: &[(&str, Tensor<f64>)],
    opts: &GradcheckOptions,
) -> Result<GradcheckReport>
where
    Fn_: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let run = |values: &[Tensor<f64>],
               weights: Option<&Tensor<f64>>|
     -> Result<(Evaluation, Option<Vec<Tensor<f64>>>, Tensor<f64>)> {
        let mut g = Graph::new();
        let leaves = values
            .iter()
            .map(|v| g.input(v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &leaves)?;
        let w = match weights {
            Some(w) => w.clone(),
            None => projection(g.shape(out), opts.seed),
        };
        let eval = Evaluation {
            objective: objective(g.value(out), &w),
            pattern: g.relu_pattern(),
        };
        let grads = if weights.is_none() {
            let grads = g.backward_seeded(out, w.clone())?;
            Some(
                leaves
                    .iter()
                    .zip(values)
                    .map(|(&l, v)| {
                        grads
                            .get(l)
                            .cloned()
                            .unwrap_or_else(|| Tensor::zeros(v.shape()))
                    })
                    .collect(),
            )
        } else {
            None
        };
        Ok((eval, grads, w))
    };

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (base, grads, weights) = run(&values, None)?;
    let grads = grads.expect("analytic pass returns gradients");

    let mut args = Vec::new();
    for (a, (name, _)) in inputs.iter().enumerate() {
        let mut report = ArgReport {
            name: name.to_string(),
            max_rel_err: 0.0,
            worst_index: None,
            probes: 0,
            skipped_kinks: 0,
        };
        for i in probe_indices(values[a].len(), opts, a as u64) {
            let orig = values[a].data()[i];
            values[a].data_mut()[i] = orig + opts.step;
            let plus = run(&values, Some(&weights))
                .map_err(|e| locate(e, name, i))?
                .0;
            values[a].data_mut()[i] = orig - opts.step;
            let minus = run(&values, Some(&weights))
                .map_err(|e| locate(e, name, i))?
                .0;
            values[a].data_mut()[i] = orig;
            if plus.pattern != base.pattern || minus.pattern != base.pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus.objective - minus.objective) / (2.0 * opts.step);
            let analytic = grads[a].data()[i] * opts.analytic_scale;
            let err = relative_error(analytic, numeric, opts.floor);
            report.probes += 1;
            if err > report.max_rel_err || report.worst_index.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst_index = Some(i);
            }
        }
        args.push(report);
    }
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        args,
    })
}

/// Checks gradients with respect to every parameter in `store`.
///
/// `f` builds the forward pass on a graph bound to the store and returns a
/// scalar loss.
pub fn check_params<Fn_>(
    f: Fn_,
    store: &mut ParamStore<f64>,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport>
where
    Fn_: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<Evaluation> {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g)?;
        Ok(Evaluation {
            objective: g.value(loss).data()[0],
            pattern: g.relu_pattern(),
        })
    };

    let (base_pattern, analytic) = {
        let mut g = Graph::with_params(&*store);
        let loss = f(&mut g)?;
        let grads = g.backward(loss)?;
        let mut scratch = store.clone();
        scratch.zero_grad();
        scratch.accumulate(&g, &grads);
        let analytic: Vec<Tensor<f64>> = scratch.iter().map(|p| p.grad.clone()).collect();
        (g.relu_pattern(), analytic)
    };

    let ids: Vec<_> = store.ids().collect();
    let mut args = Vec::new();
    for (a, id) in ids.into_iter().enumerate() {
        let name = store.get(id).name.clone();
        let mut report = ArgReport {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: None,
            probes: 0,
            skipped_kinks: 0,
        };
        for i in probe_indices(store.value(id).len(), opts, a as u64) {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + opts.step;
            let plus = eval(store).map_err(|e| locate(e, &name, i));
            store.value_mut(id).data_mut()[i] = orig - opts.step;
            let minus = eval(store).map_err(|e| locate(e, &name, i));
            store.value_mut(id).data_mut()[i] = orig;
            let (plus, minus) = (plus?, minus?);
            if plus.pattern != base_pattern || minus.pattern != base_pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus.objective - minus.objective) / (2.0 * opts.step);
            let analytic = analytic[a].data()[i] * opts.analytic_scale;
            let err = relative_error(analytic, numeric, opts.floor);
            report.probes += 1;
            if err > report.max_rel_err || report.worst_index.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst_index = Some(i);
            }
        }
        args.push(report);
    }
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        args,
    })
}

fn locate(e: Error, name: &str, index: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} while probing {name}[{index}]")),
        other => other,
    }
}

/// Ops with a standalone gradient check, by CLI name.
pub const OP_NAMES: &[&str] = &[
    "conv3d",
    "linear",
    "layer-norm",
    "gelu",
    "relu",
    "softmax",
    "attention",
    "cross-entropy",
    "avg-pool3d",
    "avg-pool2d",
    "tensor-plumbing",
];

/// Gradient check of one op on small random inputs drawn from `seed`.
pub fn check_op(name: &str, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    use crate::nn::init::Init;
    use crate::nn::kernels::ConvGeometry;

    let mut init = Init::new(seed);
    let mut r = |shape: &[usize]| -> Tensor<f64> { init.uniform(shape, 1.0) };
    match name {
        "conv3d" => {
            let geom = ConvGeometry::new([1, 2, 1], [1, 1, 0]);
            check_inputs(
                |g, v| g.conv3d(v[0], v[1], v[2], geom),
                &[
                    ("x", r(&[2, 2, 4, 5, 5])),
                    ("w", r(&[3, 2, 3, 3, 2])),
                    ("b", r(&[3])),
                ],
                opts,
            )
        }
        "linear" => check_inputs(
            |g, v| g.linear(v[0], v[1], v[2]),
            &[("x", r(&[3, 4, 5])), ("w", r(&[6, 5])), ("b", r(&[6]))],
            opts,
        ),
        "layer-norm" => check_inputs(
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
            &[("x", r(&[3, 4, 6])), ("gamma", r(&[6])), ("beta", r(&[6]))],
            opts,
        ),
        "gelu" => check_inputs(
            |g, v| g.gelu(v[0]),
            &[("x", r(&[4, 5]).map(|x| 3.0 * x))],
            opts,
        ),
        "relu" => check_inputs(|g, v| g.relu(v[0]), &[("x", r(&[4, 5]))], opts),
        "softmax" => check_inputs(
            |g, v| g.softmax(v[0]),
            &[("x", r(&[3, 7]).map(|x| 4.0 * x))],
            opts,
        ),
        "attention" => check_inputs(
            |g, v| g.attention(v[0], v[1], v[2], 2),
            &[
                ("q", r(&[2, 3, 8])),
                ("k", r(&[2, 4, 8])),
                ("v", r(&[2, 4, 8])),
            ],
            opts,
        ),
        "cross-entropy" => {
            let labels = [0, 3, 4, 1];
            check_inputs(
                |g, v| g.cross_entropy(v[0], &labels),
                &[("logits", r(&[4, 5]).map(|x| 3.0 * x))],
                opts,
            )
        }
        "avg-pool3d" => check_inputs(
            |g, v| g.avg_pool3d_global(v[0]),
            &[("x", r(&[2, 3, 2, 3, 4]))],
            opts,
        ),
        "avg-pool2d" => check_inputs(
            |g, v| g.avg_pool2d_spatial(v[0]),
            &[("x", r(&[2, 3, 2, 3, 4]))],
            opts,
        ),
        "tensor-plumbing" => check_inputs(
            |g, v| {
                // concat, narrow, repeat, add, broadcast add, scale, mean, reshape
                let x = g.concat(&[v[0], v[1]], 1)?;
                let n = g.narrow(x, 1, 1, 3)?;
                let c = g.repeat_batch(v[2], 2)?;
                let s = g.add(n, c)?;
                let s = g.add_broadcast(s, v[2])?;
                let s = g.scale(s, -1.5)?;
                let m = g.mean_axis(s, 1)?;
                let m = g.reshape(m, &[2, 1, 4])?;
                g.concat(&[s, m], 1)
            },
            &[
                ("a", r(&[2, 2, 4])),
                ("b", r(&[2, 3, 4])),
                ("c", r(&[1, 3, 4])),
            ],
            opts,
        ),
        other => Err(Error::Config(format!(
            "unknown gradcheck scope `{other}`; expected one of {}, model",
            OP_NAMES.join(", ")
        ))),
    }
}
