//! Finite-difference gradient checking.

use super::array::NdArray;
use super::graph::{Graph, Var};
use super::nn;
use crate::error::Result;
use crate::rng::{child_seed, rng_from_seed};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Floor of the relative-error denominator, so near-zero gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

/// Builds an output from leaf inputs.
pub type Builder = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

fn projected_loss(build: Builder, inputs: &[NdArray<f64>], probe: &NdArray<f64>) -> Result<(Graph<f64>, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = build(&mut g, &vars)?;
    let rv = g.constant(probe.clone());
    let m = g.mul(out, rv)?;
    let loss = g.sum(m);
    Ok((g, vars, loss))
}

/// Largest relative error between backward gradients and central differences
/// of `sum(build(inputs) ⊙ R)` for a random projection `R` drawn from `seed`.
pub fn grad_check(build: Builder, inputs: &[NdArray<f64>], seed: u64) -> Result<f64> {
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.shape(out).to_vec()
    };
    let probe = NdArray::randn(&out_shape, 1.0, &mut rng_from_seed(seed));
    let (g, vars, loss) = projected_loss(build, inputs, &probe)?;
    let grads = g.backward(loss)?;
    let eval = |xs: &[NdArray<f64>]| -> Result<f64> {
        let (g, _, loss) = projected_loss(build, xs, &probe)?;
        Ok(g.value(loss).item())
    };
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| NdArray::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            xs[k].data_mut()[i] = x0 + FD_STEP;
            let up = eval(&xs)?;
            xs[k].data_mut()[i] = x0 - FD_STEP;
            let down = eval(&xs)?;
            xs[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// A differentiable op under test with the input shapes it is checked at.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Builder,
}

impl OpCase {
    /// Random inputs for `seed`.
    pub fn inputs(&self, seed: u64) -> Vec<NdArray<f64>> {
        let mut rng = rng_from_seed(child_seed(seed, self.name.len() as u64));
        self.shapes.iter().map(|s| NdArray::randn(s, 1.0, &mut rng)).collect()
    }

    pub fn check(&self, seed: u64) -> Result<f64> {
        grad_check(self.build, &self.inputs(seed), seed)
    }
}

fn case(name: &'static str, shapes: &[&[usize]], build: Builder) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build,
    }
}

/// Every public differentiable op, plus a fan-out composite.
pub fn catalogue() -> Vec<OpCase> {
    vec![
        case("add", &[&[2, 3], &[2, 3]], |g, v| g.add(v[0], v[1])),
        case("sub", &[&[2, 3], &[2, 3]], |g, v| g.sub(v[0], v[1])),
        case("mul", &[&[2, 3], &[2, 3]], |g, v| g.mul(v[0], v[1])),
        case("scale", &[&[4]], |g, v| Ok(g.scale(v[0], -1.7))),
        case("silu", &[&[2, 5]], |g, v| Ok(g.silu(v[0]))),
        case("tanh", &[&[2, 5]], |g, v| Ok(g.tanh(v[0]))),
        case("exp", &[&[2, 5]], |g, v| Ok(g.exp(v[0]))),
        case("sum", &[&[3, 2]], |g, v| Ok(g.sum(v[0]))),
        case("mean", &[&[3, 2]], |g, v| Ok(g.mean(v[0]))),
        case("mse", &[&[3, 4], &[3, 4]], |g, v| g.mse(v[0], v[1])),
        case("kl_gaussian", &[&[2, 3], &[2, 3]], |g, v| g.kl_gaussian(v[0], v[1])),
        case("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        case("transpose_last", &[&[2, 3, 4]], |g, v| g.transpose_last(v[0])),
        case("matmul", &[&[2, 3, 4], &[2, 4, 5]], |g, v| g.matmul(v[0], v[1])),
        case("linear", &[&[2, 3, 4], &[5, 4], &[5]], |g, v| g.linear(v[0], v[1], Some(v[2]))),
        case("linear_nobias", &[&[3, 4], &[2, 4]], |g, v| g.linear(v[0], v[1], None)),
        case("softmax", &[&[3, 5]], |g, v| g.softmax(v[0])),
        case("add_channel", &[&[2, 3, 2, 2, 2], &[2, 3]], |g, v| g.add_channel(v[0], v[1])),
        case("repeat_rows", &[&[4]], |g, v| g.repeat_rows(v[0], 3)),
        case("concat_channels", &[&[2, 2, 2, 2, 2], &[2, 1, 2, 2, 2]], |g, v| {
            g.concat_channels(v[0], v[1])
        }),
        case("upsample2", &[&[1, 2, 2, 2, 2]], |g, v| g.upsample2(v[0])),
        case("group_norm", &[&[2, 4, 2, 2, 2], &[4], &[4]], |g, v| g.group_norm(v[0], v[1], v[2], 2)),
        case("conv3d", &[&[2, 2, 4, 4, 4], &[3, 2, 3, 3, 3], &[3]], |g, v| {
            g.conv3d(v[0], v[1], Some(v[2]), 1, 1)
        }),
        case("conv3d_stride2", &[&[1, 2, 5, 5, 5], &[2, 2, 3, 3, 3]], |g, v| g.conv3d(v[0], v[1], None, 2, 1)),
        case(
            "cross_attention",
            &[&[2, 3, 4], &[2, 2, 5], &[4, 4], &[4, 5], &[4, 5], &[4, 4]],
            |g, v| {
                let w = nn::AttentionVars {
                    q: v[2],
                    k: v[3],
                    v: v[4],
                    out: v[5],
                };
                nn::cross_attention(g, v[0], v[1], &w)
            },
        ),
        case("fan_out", &[&[3, 3]], |g, v| {
            let a = g.silu(v[0]);
            let b = g.tanh(v[0]);
            let c = g.mul(v[0], v[0])?;
            let s = g.add(a, b)?;
            g.add(s, c)
        }),
    ]
}
