//! Central finite-difference checks of analytic gradients.
//!
//! Each check draws a random direction `u` over all inputs and compares the
//! analytic directional derivative `∇f · u` with
//! `(f(x + h·u) − f(x − h·u)) / 2h`, evaluated on fresh graphs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Builds a scalar output from the given input leaves.
pub type Builder<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

pub fn evaluate(build: &Builder<'_>, inputs: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    Ok(g.value(out).data()[0])
}

pub fn analytic_gradients(build: &Builder<'_>, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .map(|&v| g.grad(v).expect("leaf gradient").to_vec())
        .collect())
}

/// Relative error `|analytic − numeric| / (|numeric| + 1e-8)` of one random
/// directional derivative.
pub fn directional_error<R: Rng + ?Sized>(
    build: &Builder<'_>,
    inputs: &[Tensor],
    h: f64,
    rng: &mut R,
) -> Result<f64> {
    let grads = analytic_gradients(build, inputs)?;
    let dirs: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| (0..t.len()).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let shifted = |sign: f64| -> Result<Vec<Tensor>> {
        inputs
            .iter()
            .zip(&dirs)
            .map(|(t, u)| {
                let data = t.data().iter().zip(u).map(|(x, d)| x + sign * h * d).collect();
                Tensor::new(t.shape().to_vec(), data)
            })
            .collect()
    };
    let plus = evaluate(build, &shifted(1.0)?)?;
    let minus = evaluate(build, &shifted(-1.0)?)?;
    let numeric = (plus - minus) / (2.0 * h);
    let analytic: f64 = grads
        .iter()
        .zip(&dirs)
        .flat_map(|(g, u)| g.iter().zip(u).map(|(a, b)| a * b))
        .sum();
    Ok((analytic - numeric).abs() / (numeric.abs() + 1e-8))
}

/// Per-entry central differences for small inputs.
pub fn numeric_gradients(build: &Builder<'_>, inputs: &[Tensor], h: f64) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut gi = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let mut probe = inputs.to_vec();
            probe[i].data_mut()[j] += h;
            let plus = evaluate(build, &probe)?;
            probe[i].data_mut()[j] -= 2.0 * h;
            let minus = evaluate(build, &probe)?;
            gi.push((plus - minus) / (2.0 * h));
        }
        out.push(gi);
    }
    Ok(out)
}

/// `Σ out ⊙ weights`, reducing a tensor-valued op to a scalar.
pub fn weighted_sum(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

#[derive(Debug, Clone)]
pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Inputs bounded away from zero, where `|x|` is differentiable.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

type CaseFn = fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Builder<'static>>);

fn cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("matmul", |rng| {
            let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
            let w = randn(rng, &[m, n]);
            let inputs = vec![randn(rng, &[m, k]), randn(rng, &[k, n])];
            (
                inputs,
                Box::new(move |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    weighted_sum(g, y, &w)
                }),
            )
        }),
        ("linear", |rng| {
            let (r, i, o) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
            let w = randn(rng, &[r, o]);
            let inputs = vec![randn(rng, &[r, i]), randn(rng, &[o, i]), randn(rng, &[o])];
            (
                inputs,
                Box::new(move |g, v| {
                    let y = g.linear(v[0], v[1], Some(v[2]))?;
                    weighted_sum(g, y, &w)
                }),
            )
        }),
        ("add", |rng| {
            let s = [rng.gen_range(1..4), rng.gen_range(1..4)];
            let w = randn(rng, &s);
            (
                vec![randn(rng, &s), randn(rng, &s)],
                Box::new(move |g, v| {
                    let y = g.add(v[0], v[1])?;
                    weighted_sum(g, y, &w)
                }),
            )
        }),
        ("elementwise_mul", |rng| {
            let s = [rng.gen_range(1..4), rng.gen_range(1..4)];
            let w = randn(rng, &s);
            (
                vec![randn(rng, &s), randn(rng, &s)],
                Box::new(move |g, v| {
                    let y = g.mul(v[0], v[1])?;
                    weighted_sum(g, y, &w)
                }),
            )
        }),
        ("scale_columns", |rng| {
            let (rows, reps, width) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
            let w = randn(rng, &[rows, reps * width]);
            (
                vec![randn(rng, &[rows, reps * width]), randn(rng, &[width])],
                Box::new(move |g, v| {
                    let y = g.scale_columns(v[0], v[1])?;
                    weighted_sum(g, y, &w)
                }),
            )
        }),
        ("softmax_rows", |rng| {
            let s = [rng.gen_range(1..4), rng.gen_range(1..6)];
            let w = randn(rng, &s);
            (
                vec![randn(rng, &s)],
                Box::new(move |g, v| {
                    let y = g.softmax_rows(v[0])?;
                    weighted_sum(g, y, &w)
                }),
            )
        }),
        ("layer_norm", |rng| {
            let (r, c) = (rng.gen_range(1..4), rng.gen_range(2..6));
            let w = randn(rng, &[r, c]);
            (
                vec![randn(rng, &[r, c]), randn(rng, &[c]), randn(rng, &[c])],
                Box::new(move |g, v| {
                    let y = g.layer_norm(v[0], v[1], v[2])?;
                    weighted_sum(g, y, &w)
                }),
            )
        }),
        ("gelu", |rng| {
            let s = [rng.gen_range(1..4), rng.gen_range(1..4)];
            let w = randn(rng, &s);
            (
                vec![randn(rng, &s)],
                Box::new(move |g, v| {
                    let y = g.gelu(v[0])?;
                    weighted_sum(g, y, &w)
                }),
            )
        }),
        ("attention", |rng| {
            let (b, h, dh) = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..4));
            let (nq, nk) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let scale = 1.0 / (dh as f64).sqrt();
            let w = randn(rng, &[b * nq, h * dh]);
            (
                vec![
                    randn(rng, &[b * nq, h * dh]),
                    randn(rng, &[b * nk, h * dh]),
                    randn(rng, &[b * nk, h * dh]),
                ],
                Box::new(move |g, v| {
                    let y = g.attention(v[0], v[1], v[2], b, h, scale)?;
                    weighted_sum(g, y, &w)
                }),
            )
        }),
        ("cross_entropy", |rng| {
            let (n, c) = (rng.gen_range(1..5), rng.gen_range(2..5));
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            (
                vec![randn(rng, &[n, c])],
                Box::new(move |g, v| g.cross_entropy(v[0], &labels)),
            )
        }),
        ("l1_norm", |rng| {
            let n = rng.gen_range(1..8);
            (vec![away_from_zero(rng, &[n])], Box::new(|g, v| g.l1_norm(v[0])))
        }),
        ("sum", |rng| {
            let s = [rng.gen_range(1..4), rng.gen_range(1..4)];
            (
                vec![randn(rng, &s)],
                Box::new(|g, v| {
                    let y = g.gelu(v[0])?;
                    g.sum(y)
                }),
            )
        }),
        ("mean", |rng| {
            let s = [rng.gen_range(1..4), rng.gen_range(1..4)];
            (
                vec![randn(rng, &s)],
                Box::new(|g, v| {
                    let y = g.gelu(v[0])?;
                    g.mean(y)
                }),
            )
        }),
        ("std", |rng| {
            let n = rng.gen_range(2..8);
            (vec![randn(rng, &[n])], Box::new(|g, v| g.std(v[0])))
        }),
        ("embedding", |rng| {
            let (vocab, dim, n) = (rng.gen_range(1..5), rng.gen_range(1..4), rng.gen_range(1..6));
            let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..vocab)).collect();
            let w = randn(rng, &[n, dim]);
            (
                vec![randn(rng, &[vocab, dim])],
                Box::new(move |g, v| {
                    let y = g.embedding(v[0], &ids)?;
                    weighted_sum(g, y, &w)
                }),
            )
        }),
        ("gather_rows", |rng| {
            let (r, c, n) = (rng.gen_range(1..5), rng.gen_range(1..4), rng.gen_range(1..5));
            let rows: Vec<usize> = (0..n).map(|_| rng.gen_range(0..r)).collect();
            let w = randn(rng, &[n, c]);
            (
                vec![randn(rng, &[r, c])],
                Box::new(move |g, v| {
                    let y = g.gather_rows(v[0], &rows)?;
                    weighted_sum(g, y, &w)
                }),
            )
        }),
        ("masked_attention_composite", |rng| {
            // ln -> q/k/v projections masked per head -> attention -> out proj -> CE
            let (b, n, h, dh) = (2, 3, 2, rng.gen_range(1..4));
            let d = h * dh;
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..2)).collect();
            let pool: Vec<usize> = (0..b).map(|i| i * n).collect();
            let scale = 1.0 / (dh as f64).sqrt();
            let mut inputs = vec![randn(rng, &[b * n, d])];
            for _ in 0..4 {
                inputs.push(Tensor::randn(&[d, d], 0.5, rng));
            }
            inputs.push(Tensor::uniform(&[dh], 0.2, 1.0, rng));
            inputs.push(Tensor::randn(&[2, d], 0.5, rng));
            inputs.push(Tensor::ones(&[d]));
            inputs.push(Tensor::zeros(&[d]));
            (
                inputs,
                Box::new(move |g, v| {
                    let x = g.layer_norm(v[0], v[7], v[8])?;
                    let q = g.linear(x, v[1], None)?;
                    let k = g.linear(x, v[2], None)?;
                    let val = g.linear(x, v[3], None)?;
                    let q = g.scale_columns(q, v[5])?;
                    let k = g.scale_columns(k, v[5])?;
                    let val = g.scale_columns(val, v[5])?;
                    let a = g.attention(q, k, val, b, h, scale)?;
                    let o = g.linear(a, v[4], None)?;
                    let o = g.add(o, v[0])?;
                    let o = g.gelu(o)?;
                    let pooled = g.gather_rows(o, &pool)?;
                    let logits = g.linear(pooled, v[6], None)?;
                    let ce = g.cross_entropy(logits, &labels)?;
                    let l1 = g.l1_norm(v[5])?;
                    let l1 = g.scale(l1, 0.1)?;
                    g.add(ce, l1)
                }),
            )
        }),
    ]
}

/// Names of the operations covered by [`run_suite`].
pub fn suite_ops() -> Vec<&'static str> {
    cases().into_iter().map(|(name, _)| name).collect()
}

/// Runs `instances` random directional checks per operation.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<OpReport>> {
    let mut reports = Vec::new();
    for (idx, (op, case)) in cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(idx as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let (inputs, build) = case(&mut rng);
            let err = directional_error(build.as_ref(), &inputs, DEFAULT_STEP, &mut rng)?;
            worst = worst.max(err);
        }
        reports.push(OpReport {
            op,
            instances,
            max_rel_error: worst,
        });
    }
    Ok(reports)
}
