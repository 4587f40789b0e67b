//! Central finite-difference verification of tape gradients.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn check_step(h: f64) -> Result<()> {
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::Config(format!("finite-difference step {h} outside (0, 1e-2]")));
    }
    Ok(())
}

/// Compares the tape gradient of the scalar `f(x)` with central differences
/// over every coordinate of `x`, returning the maximum relative error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    check_step(h)?;
    let mut tape = Tape::new();
    let xv = tape.owned_leaf(x.clone().with_requires_grad(true));
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = tape.grad(xv).expect("leaf requires grad").to_vec();

    let eval = |data: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.owned_leaf(Tensor::new(x.shape().to_vec(), data.to_vec())?);
        let out = f(&mut tape, xv)?;
        Ok(tape.scalar(out))
    };
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(eval, x.data(), &analytic, &coords, h)
}

/// Finite-difference check over a chosen subset of coordinates, for inputs
/// too large to probe exhaustively. `eval` maps a full input vector to the
/// scalar objective.
pub fn grad_check_coords<F>(
    eval: F,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    check_step(h)?;
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = eval(&probe)?;
        probe[i] = orig - h;
        let down = eval(&probe)?;
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Step and tolerance used by [`check_ops`].
pub const OP_STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

type OpFn = for<'t> fn(&mut Tape<'t>, Var, &Fixture) -> Result<Var>;

/// Constant operands shared by the op cases, drawn once from a fixed seed.
pub struct Fixture {
    a45: Tensor,
    b54: Tensor,
    c34: Tensor,
    v4: Tensor,
    gamma: Tensor,
}

impl Fixture {
    fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
        Fixture {
            a45: Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng),
            b54: Tensor::uniform(&[5, 4], -1.0, 1.0, &mut rng),
            c34: Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng),
            v4: Tensor::uniform(&[4], -1.0, 1.0, &mut rng),
            gamma: Tensor::uniform(&[4], 0.5, 1.5, &mut rng),
        }
    }
}

fn c<'t>(t: &mut Tape<'t>, x: &Tensor) -> Result<Var> {
    t.constant(x.shape(), x.data().to_vec())
}

/// Every differentiable tape op, each as a function of one `[3 x 4]` input
/// (a `[4]` vector for the names in [`VECTOR_INPUT`]).
const OPS: &[(&str, OpFn)] = &[
    ("matmul", |t, x, f| {
        let w = c(t, &f.a45)?;
        t.matmul(x, w)
    }),
    ("matmul_rhs", |t, x, f| {
        let a = c(t, &f.c34)?;
        let xt = t.transpose(x)?;
        t.matmul(a, xt)
    }),
    ("matmul_nt", |t, x, f| {
        let w = c(t, &f.b54)?;
        t.matmul_nt(x, w)
    }),
    ("matmul_nt_self", |t, x, _| t.matmul_nt(x, x)),
    ("transpose", |t, x, _| t.transpose(x)),
    ("add", |t, x, f| {
        let y = c(t, &f.c34)?;
        t.add(x, y)
    }),
    ("sub", |t, x, f| {
        let y = c(t, &f.c34)?;
        t.sub(y, x)
    }),
    ("mul", |t, x, f| {
        let y = c(t, &f.c34)?;
        let p = t.mul(x, y)?;
        t.mul(p, x)
    }),
    ("add_bias", |t, x, f| {
        let b = c(t, &f.v4)?;
        t.add_bias(x, b)
    }),
    ("add_bias_vector", |t, x, f| {
        let m = c(t, &f.c34)?;
        t.add_bias(m, x)
    }),
    ("scale", |t, x, _| Ok(t.scale(x, -2.5))),
    ("softmax", |t, x, _| Ok(t.softmax(x))),
    ("softmax_masked", |t, x, _| t.softmax_masked(x, &[true, false, true, true])),
    ("layer_norm", |t, x, f| {
        let g = c(t, &f.gamma)?;
        let b = c(t, &f.v4)?;
        t.layer_norm(x, g, b, 1e-5)
    }),
    ("layer_norm_gain", |t, x, f| {
        let input = c(t, &f.c34)?;
        let b = c(t, &f.v4)?;
        t.layer_norm(input, x, b, 1e-5)
    }),
    ("layer_norm_shift", |t, x, f| {
        let input = c(t, &f.c34)?;
        let g = c(t, &f.gamma)?;
        t.layer_norm(input, g, x, 1e-5)
    }),
    ("gelu", |t, x, _| Ok(t.gelu(x))),
    ("gather", |t, x, _| t.gather(x, &[2, 0, 2, 1])),
    ("concat_rows", |t, x, f| {
        let y = c(t, &f.c34)?;
        t.concat_rows(&[x, y, x])
    }),
    ("concat_cols", |t, x, f| {
        let y = c(t, &f.c34)?;
        t.concat_cols(&[y, x])
    }),
    ("slice_cols", |t, x, _| t.slice_cols(x, 1, 2)),
    ("mean_rows", |t, x, _| t.mean_rows(x, &[0, 2])),
    ("l2_normalize_rows", |t, x, _| Ok(t.l2_normalize_rows(x))),
    ("sum", |t, x, _| Ok(t.sum(x))),
    ("mean", |t, x, _| Ok(t.mean(x))),
    ("trace", |t, x, _| {
        let sq = t.matmul_nt(x, x)?;
        t.trace(sq)
    }),
    ("ln", |t, x, _| {
        let sq = t.mul(x, x)?;
        let one = t.constant(&[3, 4], vec![0.5; 12])?;
        let pos = t.add(sq, one)?;
        t.ln(pos)
    }),
    ("cross_entropy_sum", |t, x, _| t.cross_entropy_sum(x, &[3, 0, 1])),
    ("dot_const", |t, x, f| t.dot_const(x, f.c34.data())),
    ("linear", |t, x, f| {
        let w = c(t, &f.a45)?;
        let b = t.constant(&[5], vec![0.1, -0.2, 0.3, 0.0, 0.5])?;
        t.linear(x, w, b)
    }),
    ("pwcl_literal", |t, x, _| {
        let sq = t.mul(x, x)?;
        let e = t.l2_normalize_rows(sq);
        let f = t.gather(e, &[0, 2, 1])?;
        let f = t.add(f, e)?;
        let f = t.l2_normalize_rows(f);
        crate::objectives::pwcl_loss(t, e, f)
    }),
    ("pwcl_shifted", |t, x, _| {
        let e = t.l2_normalize_rows(x);
        let f = t.gather(e, &[1, 2, 0])?;
        crate::objectives::pwcl_shifted_loss(t, e, f, crate::objectives::DEFAULT_CONTRASTIVE_OFFSET)
    }),
];

/// Ops that take a `[4]` vector rather than the usual `[3 x 4]` matrix.
const VECTOR_INPUT: &[&str] = &["add_bias_vector", "layer_norm_gain", "layer_norm_shift"];

pub fn op_names() -> Vec<&'static str> {
    OPS.iter().map(|(n, _)| *n).collect()
}

/// Runs the finite-difference check for each op named in `only` (all when
/// empty). Each op output is projected onto fixed random weights so that
/// every output coordinate contributes to the checked scalar.
pub fn check_ops(only: &[String]) -> Result<Vec<OpCheck>> {
    for name in only {
        if !OPS.iter().any(|(n, _)| n == name) {
            return Err(Error::Config(format!("unknown op {name:?}; known: {}", op_names().join(", "))));
        }
    }
    let fx = Fixture::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6f70_7321);
    let matrix = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let vector = Tensor::uniform(&[4], 0.5, 1.5, &mut rng);
    let mut out = Vec::new();
    for (name, op) in OPS {
        if !only.is_empty() && !only.iter().any(|n| n == name) {
            continue;
        }
        let x = if VECTOR_INPUT.contains(name) { &vector } else { &matrix };
        let mut probe = Tape::new();
        let pv = probe.owned_leaf(x.clone());
        let y = op(&mut probe, pv, &fx)?;
        let len = probe.value(y).len();
        let proj: Vec<f64> = (0..len).map(|k| ((k as f64 + 1.0) * 0.731).sin()).collect();
        let err = grad_check(
            |t, xv| {
                let y = op(t, xv, &fx)?;
                t.dot_const(y, &proj)
            },
            x,
            OP_STEP,
        )?;
        out.push(OpCheck {
            name: name.to_string(),
            max_relative_error: err,
            tolerance: OP_TOLERANCE,
        });
    }
    Ok(out)
}
