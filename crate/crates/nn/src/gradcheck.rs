//! Central finite-difference checks of tape gradients.
//!
//! The error measure is vector-wise: `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`
//! over every element of every input.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use c2v_core::rng;

use crate::error::Result;
use crate::model::Model;
use crate::params::Bound;
use crate::tape::{Tape, Tensor, Var};
use crate::unet::{self, DenoiserConfig};

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub rel_error: f64,
    /// Scalars compared.
    pub checked: usize,
}

/// Compare `backward` against central differences with step `h` for a scalar
/// function of `inputs`.
pub fn check<F>(name: &str, inputs: &[Tensor], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<f64> = vars
        .iter()
        .zip(inputs)
        .flat_map(|(&v, t)| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
        })
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data[0])
    };
    let mut work = inputs.to_vec();
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..work.len() {
        for k in 0..work[i].len() {
            let x = work[i].data[k];
            work[i].data[k] = x + h;
            let up = eval(&work)?;
            work[i].data[k] = x - h;
            let down = eval(&work)?;
            work[i].data[k] = x;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    let rel_error = if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    };
    Ok(GradReport {
        name: name.to_string(),
        rel_error,
        checked: analytic.len(),
    })
}

fn random(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
    }
}

fn weights(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// Reduce a tensor output to a scalar with fixed random weights, so every
/// output element carries a distinct sensitivity.
fn project(tape: &mut Tape, v: Var, w: &[f64]) -> Result<Var> {
    tape.dot(v, w)
}

const H: f64 = 1e-5;

/// One check per differentiable op (plus the conv kernels' distinct code
/// paths), on small random shapes.
pub fn op_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut r = rng::stream(seed, "gradcheck", &[]);
    let mut out = Vec::new();

    let conv_cases: [(&str, [usize; 5], [usize; 5], usize, usize); 5] = [
        (
            "conv3d 3x3x3 stride 1 pad 1",
            [2, 3, 5, 4, 6],
            [4, 3, 3, 3, 3],
            1,
            1,
        ),
        (
            "conv3d 3x3x3 stride 1 pad 0",
            [1, 2, 5, 5, 9],
            [3, 2, 3, 3, 3],
            1,
            0,
        ),
        (
            "conv3d 3x3x3 stride 2 pad 1",
            [2, 3, 6, 4, 4],
            [2, 3, 3, 3, 3],
            2,
            1,
        ),
        ("conv3d 1x1x1", [2, 5, 3, 2, 4], [3, 5, 1, 1, 1], 1, 0),
        (
            "conv3d 2x2x2 stride 2",
            [1, 2, 4, 4, 6],
            [3, 2, 2, 2, 2],
            2,
            0,
        ),
    ];
    for (name, xs, ws, stride, pad) in conv_cases {
        let inputs = vec![
            random(&mut r, &xs),
            random(&mut r, &ws),
            random(&mut r, &[ws[0]]),
        ];
        let probe = {
            let mut t = Tape::new();
            let v: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
            let y = t.conv3d(v[0], v[1], Some(v[2]), stride, pad)?;
            t.value(y).len()
        };
        let w = weights(&mut r, probe);
        out.push(check(name, &inputs, H, |t, v| {
            let y = t.conv3d(v[0], v[1], Some(v[2]), stride, pad)?;
            project(t, y, &w)
        })?);
    }

    let xs = [2, 4, 3, 2, 3];
    let n: usize = xs.iter().product();
    let w = weights(&mut r, n);
    let inputs = vec![
        random(&mut r, &xs),
        random(&mut r, &[4]),
        random(&mut r, &[4]),
    ];
    out.push(check("group_norm", &inputs, H, |t, v| {
        let y = t.group_norm(v[0], v[1], v[2], 2)?;
        project(t, y, &w)
    })?);

    let inputs = vec![random(&mut r, &xs)];
    out.push(check("silu", &inputs, H, |t, v| {
        let y = t.silu(v[0]);
        project(t, y, &w)
    })?);

    let inputs = vec![random(&mut r, &xs), random(&mut r, &xs)];
    out.push(check("add", &inputs, H, |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, &w)
    })?);

    let inputs = vec![
        random(&mut r, &[2, 3, 2, 2, 2]),
        random(&mut r, &[2, 2, 2, 2, 2]),
    ];
    let wc = weights(&mut r, 2 * 5 * 8);
    out.push(check("concat_channels", &inputs, H, |t, v| {
        let y = t.concat_channels(v[0], v[1])?;
        project(t, y, &wc)
    })?);

    let inputs = vec![
        random(&mut r, &[3, 5]),
        random(&mut r, &[4, 5]),
        random(&mut r, &[4]),
    ];
    let wl = weights(&mut r, 12);
    out.push(check("linear", &inputs, H, |t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        project(t, y, &wl)
    })?);

    let inputs = vec![random(&mut r, &xs), random(&mut r, &[2, 8])];
    out.push(check("modulate", &inputs, H, |t, v| {
        let y = t.modulate(v[0], v[1])?;
        project(t, y, &w)
    })?);

    let inputs = vec![random(&mut r, &[2, 2, 2, 3, 2])];
    let wu = weights(&mut r, 2 * 2 * 8 * 12);
    out.push(check("upsample2", &inputs, H, |t, v| {
        let y = t.upsample2(v[0])?;
        project(t, y, &wu)
    })?);

    let inputs = vec![random(&mut r, &[2, 3 * 2 * 3, 2, 3, 1])];
    let wa = weights(&mut r, 2 * 6 * 6);
    out.push(check("attention", &inputs, H, |t, v| {
        let y = t.attention(v[0], 2)?;
        project(t, y, &wa)
    })?);

    // targets kept at least 0.1 away from the prediction so the step h never
    // crosses the kink of |·|
    let pred = random(&mut r, &xs);
    let target = Tensor {
        shape: pred.shape.clone(),
        data: pred
            .data
            .iter()
            .map(|&p| p + if r.random_bool(0.5) { 1.0 } else { -1.0 } * r.random_range(0.1..0.5))
            .collect(),
    };
    out.push(check("l1_loss", &[pred], 1e-3, |t, v| {
        t.l1_loss(v[0], &target)
    })?);

    // the same loss differentiated through a convolution weight
    let x = random(&mut r, &[1, 2, 4, 4, 4]);
    let wt = random(&mut r, &[2, 2, 3, 3, 3]);
    let base = {
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x.clone()), t.constant(wt.clone()));
        let y = t.conv3d(xv, wv, None, 1, 1)?;
        t.value(y).clone()
    };
    let target = Tensor {
        shape: base.shape.clone(),
        data: base
            .data
            .iter()
            .map(|&p| p + if r.random_bool(0.5) { 1.0 } else { -1.0 } * r.random_range(0.2..0.6))
            .collect(),
    };
    out.push(check(
        "l1_loss through conv3d weight",
        &[wt],
        1e-3,
        |t, v| {
            let xv = t.constant(x.clone());
            let y = t.conv3d(xv, v[0], None, 1, 1)?;
            t.l1_loss(y, &target)
        },
    )?);

    let inputs = vec![random(&mut r, &xs)];
    out.push(check("sum", &inputs, H, |t, v| Ok(t.sum(v[0])))?);
    out.push(check("dot", &inputs, H, |t, v| t.dot(v[0], &w))?);
    Ok(out)
}

/// Whole-network check on a tiny U-Net: every parameter and the input.
/// The zero-initialized output conv is randomized first so that gradients
/// reach the rest of the network.
pub fn unet_check(cfg: &DenoiserConfig, seed: u64) -> Result<GradReport> {
    let model = Model::new(cfg.clone(), seed)?;
    let mut r = rng::stream(seed, "gradcheck-unet", &[]);
    let mut params: Vec<Tensor> = model.params().tensors().to_vec();
    for (name, p) in model.params().names().iter().zip(params.iter_mut()) {
        if name.starts_with("out.conv") {
            *p = random(&mut r, &p.shape);
        }
    }
    let res = cfg.resolution;
    let x = random(&mut r, &[2, cfg.in_channels, res, res, res]);
    let w = weights(&mut r, 2 * res * res * res);
    let names = model.params().names().to_vec();
    let mut inputs = params;
    inputs.push(x);
    check("unet", &inputs, H, |tape, vars| {
        let (pv, xv) = vars.split_at(vars.len() - 1);
        let bound = Bound::from_parts(names.clone(), pv.to_vec());
        let y = unet::forward(cfg, tape, &bound, xv[0], &[1, 517])?;
        project(tape, y, &w)
    })
}
