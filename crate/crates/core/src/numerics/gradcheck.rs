//! Central-difference gradient checking for tape primitives.
//!
//! The finite-difference side only ever evaluates forward values, so it is an
//! independent oracle for the analytic reverse sweep.

use super::rng::SeededRng;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Builds a scalar loss on a fresh tape from the given leaves.
pub type LossBuilder<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Relative error `||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-10)`
/// over all inputs jointly.
pub fn check_gradient(build: &LossBuilder<'_>, inputs: &[Tensor], h: f64) -> Result<f64> {
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut diff2 = 0.0;
    let mut an2 = 0.0;
    let mut nu2 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .slice(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            diff2 += (analytic[j] - numeric).powi(2);
            an2 += analytic[j].powi(2);
            nu2 += numeric.powi(2);
        }
    }
    Ok(diff2.sqrt() / an2.sqrt().max(nu2.sqrt()).max(1e-10))
}

fn rand_tensor(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| scale * rng.normal()).collect())
}

/// Reduces an arbitrary tensor to a scalar through a fixed random projection so
/// every output entry receives a distinct upstream gradient.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let mut rng = SeededRng::with_stream(seed, 99);
    let w = Tensor::new(shape, (0..n).map(|_| rng.normal()).collect())?;
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Worst relative gradient error per primitive over `points` random draws.
pub fn primitive_suite(seed: u64, points: usize) -> Result<Vec<(&'static str, f64)>> {
    type Case = (&'static str, Box<dyn Fn(&mut SeededRng) -> Vec<Tensor>>, Box<LossBuilder<'static>>);
    let cases: Vec<Case> = vec![
        (
            "matmul",
            Box::new(|r| vec![rand_tensor(r, 3, 4, 1.0), rand_tensor(r, 4, 2, 1.0)]),
            Box::new(|t, v| {
                let o = t.matmul(v[0], v[1])?;
                project(t, o, 1)
            }),
        ),
        (
            "matmul_transposed",
            Box::new(|r| vec![rand_tensor(r, 4, 3, 1.0), rand_tensor(r, 2, 4, 1.0)]),
            Box::new(|t, v| {
                let o = t.matmul_t(v[0], true, v[1], true)?;
                project(t, o, 2)
            }),
        ),
        (
            "matmul_nt",
            Box::new(|r| vec![rand_tensor(r, 3, 4, 1.0), rand_tensor(r, 5, 4, 1.0)]),
            Box::new(|t, v| {
                let o = t.matmul_t(v[0], false, v[1], true)?;
                project(t, o, 3)
            }),
        ),
        (
            "add",
            Box::new(|r| vec![rand_tensor(r, 2, 3, 1.0), rand_tensor(r, 2, 3, 1.0)]),
            Box::new(|t, v| {
                let o = t.add(v[0], v[1])?;
                project(t, o, 4)
            }),
        ),
        (
            "mul",
            Box::new(|r| vec![rand_tensor(r, 2, 3, 1.0), rand_tensor(r, 2, 3, 1.0)]),
            Box::new(|t, v| {
                let o = t.mul(v[0], v[1])?;
                project(t, o, 5)
            }),
        ),
        (
            "add_bias",
            Box::new(|r| vec![rand_tensor(r, 3, 4, 1.0), rand_tensor(r, 1, 4, 1.0)]),
            Box::new(|t, v| {
                let o = t.add_bias(v[0], v[1])?;
                project(t, o, 6)
            }),
        ),
        (
            "scale",
            Box::new(|r| vec![rand_tensor(r, 2, 3, 1.0)]),
            Box::new(|t, v| {
                let o = t.scale(v[0], -1.7);
                project(t, o, 7)
            }),
        ),
        (
            "gelu",
            Box::new(|r| vec![rand_tensor(r, 3, 3, 2.0)]),
            Box::new(|t, v| {
                let o = t.gelu(v[0]);
                project(t, o, 8)
            }),
        ),
        (
            "elu_plus_one",
            Box::new(|r| vec![rand_tensor(r, 3, 3, 2.0)]),
            Box::new(|t, v| {
                let o = t.elu_plus_one(v[0]);
                project(t, o, 9)
            }),
        ),
        (
            "softmax_rows",
            Box::new(|r| vec![rand_tensor(r, 3, 5, 2.0)]),
            Box::new(|t, v| {
                let o = t.softmax_rows(v[0], 0.7)?;
                project(t, o, 10)
            }),
        ),
        (
            "layer_norm",
            Box::new(|r| {
                vec![
                    rand_tensor(r, 3, 6, 2.0),
                    rand_tensor(r, 1, 6, 1.0),
                    rand_tensor(r, 1, 6, 1.0),
                ]
            }),
            Box::new(|t, v| {
                let o = t.layer_norm(v[0], v[1], v[2])?;
                project(t, o, 11)
            }),
        ),
        (
            "conv1d_depthwise",
            Box::new(|r| {
                vec![
                    rand_tensor(r, 6, 3, 1.0),
                    rand_tensor(r, 5, 3, 1.0),
                    rand_tensor(r, 1, 3, 1.0),
                ]
            }),
            Box::new(|t, v| {
                let o = t.conv1d_depthwise(v[0], v[1], v[2])?;
                project(t, o, 12)
            }),
        ),
        (
            "slice_and_concat",
            Box::new(|r| vec![rand_tensor(r, 5, 4, 1.0), rand_tensor(r, 2, 4, 1.0)]),
            Box::new(|t, v| {
                let a = t.slice_rows(v[0], 1, 3)?;
                let b = t.concat_rows(&[a, v[1]])?;
                let c = t.slice_cols(b, 1, 2)?;
                let d = t.slice_cols(b, 0, 1)?;
                let e = t.concat_cols(&[c, d, c])?;
                project(t, e, 13)
            }),
        ),
        (
            "neg_sq_dist",
            Box::new(|r| {
                vec![
                    rand_tensor(r, 3, 4, 1.0),
                    rand_tensor(r, 5, 4, 1.0),
                    rand_tensor(r, 1, 1, 0.3),
                ]
            }),
            Box::new(|t, v| {
                let o = t.neg_sq_dist(v[0], v[1], v[2])?;
                project(t, o, 14)
            }),
        ),
        (
            "col_sum",
            Box::new(|r| vec![rand_tensor(r, 4, 3, 1.0)]),
            Box::new(|t, v| {
                let o = t.col_sum(v[0]);
                project(t, o, 15)
            }),
        ),
        (
            "div_rows",
            Box::new(|r| {
                let den = Tensor::from_vec(3, 1, (0..3).map(|_| 1.0 + r.uniform()).collect());
                vec![rand_tensor(r, 3, 4, 1.0), den]
            }),
            Box::new(|t, v| {
                let o = t.div_rows(v[0], v[1])?;
                project(t, o, 16)
            }),
        ),
        (
            "bar_nll",
            Box::new(|r| vec![rand_tensor(r, 4, 6, 1.5)]),
            Box::new(|t, v| t.bar_nll(v[0], &[0, 5, 2, 2], &[-1.0, -0.5, 0.0, 0.3, -2.0, -1.2])),
        ),
        (
            "mean",
            Box::new(|r| vec![rand_tensor(r, 3, 3, 1.0)]),
            Box::new(|t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.mean(sq))
            }),
        ),
    ];

    let mut out = Vec::new();
    for (k, (name, gen, build)) in cases.iter().enumerate() {
        let mut rng = SeededRng::with_stream(seed, k as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            let inputs = gen(&mut rng);
            worst = worst.max(check_gradient(build.as_ref(), &inputs, FD_STEP)?);
        }
        out.push((*name, worst));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_matches_central_differences() {
        for (name, err) in primitive_suite(3, 10).unwrap() {
            assert!(err < 1e-3, "{name}: rel err {err}");
        }
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.slice(x).unwrap(), &[6.0]);
    }

    #[test]
    fn two_class_softmax_nll_gradient() {
        let mut t = Tape::new();
        let l = t.param(Tensor::from_vec(1, 2, vec![0.0, 0.0]));
        let loss = t.bar_nll(l, &[0], &[0.0, 0.0]).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.slice(l).unwrap(), &[-0.5, 0.5]);
    }

    #[test]
    fn matmul_sum_gradient_is_b_transpose_broadcast() {
        let a = Tensor::from_vec(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]);
        let b = Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut t = Tape::new();
        let (va, vb) = (t.param(a), t.param(b.clone()));
        let c = t.matmul(va, vb).unwrap();
        let s = t.sum(c);
        let g = t.backward(s).unwrap();
        // d sum(AB) / dA_ij = sum_k B_jk
        let row: Vec<f64> = (0..3).map(|j| b.get(j, 0) + b.get(j, 1)).collect();
        assert_eq!(g.slice(va).unwrap(), &[row.clone(), row].concat()[..]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(&[2, 2]));
        assert!(t.backward(x).is_err());
    }
}
