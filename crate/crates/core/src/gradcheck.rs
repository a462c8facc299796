//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates the forward function on constant inputs,
//! so it shares no code with the backward rules it checks.

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::Batch;
use crate::distributions::{gaussian_kl, BernoulliVec, DiagGaussian};
use crate::error::Result;
use crate::generative::{GenerativeSpec, LorenzTheta};
use crate::model::{BoundModel, ModelBundle, ModelSpec};
use crate::objectives::{draw_eps, sample_log_weights, WeightForm};
use crate::params::BoundParams;
use crate::rng::substream2;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor for the relative error, so that gradients near zero
    /// are compared in absolute terms.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compare backward gradients of the scalar `f(inputs)` against central
/// differences for every input coordinate.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, cfg: GradCheck) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let graph = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let loss = f(&graph, &vars)?;
    let grads = loss.backward()?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vs: Vec<Var<'_>> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vs)?.item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(var).expect("every param has a gradient");
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + cfg.step;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - cfg.step;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;

            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(cfg.floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = rel;
                report.worst_input = i;
                report.worst_index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
/// Worst relative error of one named case over its random instances.
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

/// Scalar readout `Σ c_i v_i` with fixed, non-uniform coefficients so that
/// every output position carries a distinct upstream gradient.
pub fn contract<'g>(v: Var<'g>) -> Result<Var<'g>> {
    let shape = v.shape();
    let n: usize = shape.iter().product();
    let c: Vec<f64> = (0..n).map(|i| (1.3 * i as f64 + 0.7).sin() + 0.1).collect();
    let coef = v.graph().constant(Tensor::new(shape, c)?);
    v.mul(coef)?.sum()
}

fn normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), crate::rng::standard_normals(rng, n)).expect("shape matches")
}

fn positive(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    normal(rng, shape).map(|v| 0.5 + v.abs())
}

type CaseFn = for<'g> fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>;

struct OpCase {
    name: &'static str,
    inputs: fn(&mut crate::rng::StreamRng) -> Vec<Tensor>,
    f: CaseFn,
}

fn dims(rng: &mut impl Rng) -> (usize, usize) {
    (rng.random_range(1..=4), rng.random_range(1..=4))
}

fn op_cases() -> Vec<OpCase> {
    macro_rules! case {
        ($name:expr, |$rng:ident| $inputs:expr, |$g:ident, $v:ident| $body:expr) => {
            OpCase {
                name: $name,
                inputs: |$rng| $inputs,
                f: |$g, $v| {
                    let _ = $g;
                    contract($body?)
                },
            }
        };
    }
    vec![
        case!("neg", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b])] }, |g, v| v[0].neg()),
        case!("exp", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b])] }, |g, v| v[0].exp()),
        case!("ln", |r| { let (a, b) = dims(r); vec![positive(r, &[a, b])] }, |g, v| v[0].ln()),
        case!("tanh", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b])] }, |g, v| v[0].tanh()),
        case!("sigmoid", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b]).map(|x| 3.0 * x)] }, |g, v| v[0].sigmoid()),
        case!("softplus", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b]).map(|x| 3.0 * x)] }, |g, v| v[0].softplus()),
        case!("add", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b]), normal(r, &[a, b])] }, |g, v| v[0].add(v[1])),
        case!("sub", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b]), normal(r, &[a, b])] }, |g, v| v[0].sub(v[1])),
        case!("mul", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b]), normal(r, &[a, b])] }, |g, v| v[0].mul(v[1])),
        case!("div", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b]), positive(r, &[a, b])] }, |g, v| v[0].div(v[1])),
        case!("add_broadcast", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b]), normal(r, &[b])] }, |g, v| v[0].add(v[1])),
        case!("sub_broadcast", |r| { let (a, b) = dims(r); vec![normal(r, &[b]), normal(r, &[a, b])] }, |g, v| v[0].sub(v[1])),
        case!("mul_broadcast", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b]), normal(r, &[b])] }, |g, v| v[0].mul(v[1])),
        case!("div_broadcast", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b]), positive(r, &[])] }, |g, v| v[0].div(v[1])),
        case!("square", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b])] }, |g, v| v[0].square()),
        case!("scale", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b])] }, |g, v| v[0].scale(-1.7)),
        case!("offset", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b])] }, |g, v| v[0].offset(2.5)?.square()),
        case!("one_minus", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b])] }, |g, v| v[0].one_minus()?.square()),
        case!("matmul", |r| {
            let (a, b) = dims(r);
            let c = r.random_range(1..=4);
            vec![normal(r, &[a, b]), normal(r, &[b, c])]
        }, |g, v| v[0].matmul(v[1])),
        case!("sum", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b])] }, |g, v| v[0].square()?.sum()),
        case!("sum_axis", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b, 2])] }, |g, v| v[0].square()?.sum_axis(1)),
        case!("mean", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b])] }, |g, v| v[0].square()?.mean()),
        case!("mean_axis", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b])] }, |g, v| v[0].square()?.mean_axis(0)),
        case!("logsumexp", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b]).map(|x| 5.0 * x)] }, |g, v| v[0].logsumexp()),
        case!("logsumexp_axis", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b]).map(|x| 5.0 * x)] }, |g, v| v[0].logsumexp_axis(0)),
        case!("sum_last", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b])] }, |g, v| v[0].square()?.sum_last()),
        case!("reshape", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b])] }, |g, v| {
            let n = v[0].shape().iter().product::<usize>();
            v[0].square()?.reshape(&[n])
        }),
        case!("repeat_rows", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b])] }, |g, v| v[0].repeat_rows(3)?.tanh()),
        case!("select", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b])] }, |g, v| {
            let last = v[0].shape()[1] - 1;
            v[0].square()?.select(last)
        }),
        case!("stack", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b]), normal(r, &[a, b])] }, |g, v| {
            Var::stack(&[v[0].tanh()?, v[1], v[0].mul(v[1])?])
        }),
        case!("gaussian_log_prob", |r| {
            let (a, b) = dims(r);
            vec![normal(r, &[a, b]), normal(r, &[a, b]), normal(r, &[a, b])]
        }, |g, v| DiagGaussian::new(v[1], v[2])?.log_prob(v[0])),
        case!("gaussian_kl", |r| {
            let (a, b) = dims(r);
            (0..4).map(|_| normal(r, &[a, b])).collect()
        }, |g, v| gaussian_kl(&DiagGaussian::new(v[0], v[1])?, &DiagGaussian::new(v[2], v[3])?)),
        case!("gaussian_rsample", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b]), normal(r, &[a, b])] }, |g, v| {
            let shape = v[0].shape();
            let n = shape.iter().product::<usize>();
            let eps = (0..n).map(|i| (0.9 * i as f64 + 0.3).cos() * 1.5).collect();
            DiagGaussian::new(v[0], v[1])?.rsample(g.constant(Tensor::new(shape, eps)?))?.square()
        }),
        case!("bernoulli_log_prob", |r| { let (a, b) = dims(r); vec![normal(r, &[a, b]).map(|v| 3.0 * v)] }, |g, v| {
            let shape = v[0].shape();
            let n = shape.iter().product::<usize>();
            let x = (0..n).map(|i| ((i * 7 + 3) % 3 == 0) as u8 as f64).collect();
            BernoulliVec { logits: v[0] }.log_prob(g.constant(Tensor::new(shape, x)?))
        }),
        case!("mlp3", |r| {
            let (n, d) = dims(r);
            let h = 3;
            vec![
                normal(r, &[n, d]),
                normal(r, &[d, h]), normal(r, &[h]),
                normal(r, &[h, h]), normal(r, &[h]),
                normal(r, &[h, 2]), normal(r, &[2]),
            ]
        }, |g, v| {
            let h1 = v[0].matmul(v[1])?.add(v[2])?.tanh()?;
            let h2 = h1.matmul(v[3])?.add(v[4])?.sigmoid()?;
            h2.matmul(v[5])?.add(v[6])?.softplus()
        }),
    ]
}

/// Small random batch of `count` sequences with unequal lengths.
fn random_batch(rng: &mut impl Rng, count: usize, max_len: usize, obs_dim: usize, binary: bool) -> Result<Batch> {
    let seqs: Vec<Tensor> = (0..count)
        .map(|_| {
            let t = rng.random_range(1..=max_len);
            let x = normal(rng, &[t, obs_dim]);
            if binary {
                x.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
            } else {
                x
            }
        })
        .collect();
    let refs: Vec<&Tensor> = seqs.iter().collect();
    Batch::from_sequences(&refs, (0..count).collect())
}

/// Gradient check of the `K`-sample bound `Σ_b logmeanexp_k log w` with
/// respect to every parameter of a randomly drawn model.
fn model_instance(spec: &ModelSpec, rng: &mut crate::rng::StreamRng, cfg: GradCheck) -> Result<f64> {
    let binary = matches!(spec.generative, GenerativeSpec::GatedBernoulli { .. });
    let lorenz_theta = LorenzTheta::default().perturbed(rng, 0.2);
    let mut bundle = ModelBundle::init(spec.clone(), rng.random(), Some(lorenz_theta))?;
    let names: Vec<String> = bundle.params.names().cloned().collect();
    for name in &names {
        let p = bundle.params.get_mut(name)?;
        if !name.starts_with("gen.") || binary {
            let shape = p.shape().to_vec();
            *p = normal(rng, &shape).map(|v| 0.5 * v);
        }
    }
    let batch = random_batch(rng, 2, 3, spec.inference.obs_dim, binary)?;
    let k = 2;
    let form = if rng.random::<bool>() { WeightForm::Analytic } else { WeightForm::Sampled };
    let anneal = rng.random_range(0.2..=1.0);
    let eps = draw_eps(rng, batch.steps(), k * batch.size(), spec.inference.latent_dim);
    let inputs: Vec<Tensor> = names.iter().map(|n| bundle.params.get(n).cloned()).collect::<Result<_>>()?;
    let b = batch.size();
    let report = check_gradients(
        &inputs,
        |g, vars| {
            let params = BoundParams::from_vars(names.iter().cloned().zip(vars.iter().copied()));
            let model = BoundModel {
                generative: spec.generative.bind(g, &params)?,
                inference: spec.inference.bind(g, &params)?,
                params,
            };
            let (logw, _) = sample_log_weights(g, &model, &batch, &eps, k, anneal, form)?;
            logw.reshape(&[k, b])?.logsumexp_axis(0)?.sum()
        },
        cfg,
    )?;
    Ok(report.max_rel_err)
}

/// Finite-difference checks of every differentiable op and of both model
/// families, each over `instances` random draws.
pub fn run_suite(instances: usize, seed: u64, cfg: GradCheck) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for (c, case) in op_cases().into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let mut rng = substream2(seed, "gradcheck", c as u64, i as u64);
            let inputs = (case.inputs)(&mut rng);
            let r = check_gradients(&inputs, case.f, cfg)?;
            worst = worst.max(r.max_rel_err);
        }
        out.push(SuiteResult {
            name: case.name,
            instances,
            max_rel_err: worst,
        });
    }
    let families = [
        ("lorenz_model", ModelSpec::lorenz(3)),
        ("gated_bernoulli_model", ModelSpec::gated_bernoulli(3, 2, 3, 3)),
    ];
    for (f, (name, spec)) in families.into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let mut rng = substream2(seed, "gradcheck-model", f as u64, i as u64);
            worst = worst.max(model_instance(&spec, &mut rng, cfg)?);
        }
        out.push(SuiteResult {
            name,
            instances,
            max_rel_err: worst,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_few_instances() {
        for r in run_suite(3, 1, GradCheck::default()).unwrap() {
            assert!(r.max_rel_err < 1e-5, "{}: {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn a_wrong_rule_is_caught() {
        // |x| has no autodiff op; sqrt(x²) via exp/ln is fine, but a
        // deliberately detached factor breaks the gradient.
        let x = Tensor::vector(vec![0.7, -1.2]);
        let r = check_gradients(
            &[x],
            |_, v| v[0].square()?.mul(v[0].stop_gradient())?.sum(),
            GradCheck::default(),
        )
        .unwrap();
        assert!(r.max_rel_err > 0.1);
    }
}
