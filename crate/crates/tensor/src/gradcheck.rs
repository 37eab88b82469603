//! Central finite-difference comparison against recorded gradients, in f64.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::param::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Largest relative error between the recorded gradient of `f` at `x` and
/// central differences with step `eps`, over every coordinate of `x`.
///
/// `f` receives a fresh tape and the leaf holding the input, and must return
/// a single-element value.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut scratch = ParamStore::new();
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out, &mut scratch)?;
    let zeros = Tensor::zeros(x.shape());
    let analytic = grads.wrt(xv).unwrap_or(&zeros);

    let eval = |p: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::inference();
        let v = t.constant(p);
        let o = f(&mut t, v)?;
        Ok(t.value(o).sum())
    };
    let mut worst = 0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = eval(probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let lo = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (hi - lo) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub max_relative_error: f64,
    /// `name[flat index]` of the coordinate with the largest error.
    pub worst: Option<String>,
    pub coordinates: usize,
}

/// Like [`finite_diff_check`], but perturbs every parameter coordinate of
/// `params`. `f` records a forward pass reading parameters from the store.
/// Gradients already held by `params` are cleared.
pub fn finite_diff_check_params<F>(f: F, params: &mut ParamStore<f64>, eps: f64) -> Result<ParamCheck>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    params.zero_grad();
    {
        let mut tape = Tape::new();
        let out = f(&mut tape, params)?;
        tape.backward(out, params)?;
    }
    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::inference();
        let o = f(&mut t, p)?;
        Ok(t.value(o).sum())
    };
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    let mut report = ParamCheck {
        max_relative_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for id in ids {
        for i in 0..params.get(id).value.numel() {
            let orig = params.get(id).value.data()[i];
            params.get_mut(id).value.data_mut()[i] = orig + eps;
            let hi = eval(params)?;
            params.get_mut(id).value.data_mut()[i] = orig - eps;
            let lo = eval(params)?;
            params.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (hi - lo) / (2.0 * eps);
            let err = relative_error(params.get(id).grad.data()[i], numeric);
            report.coordinates += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some(format!("{}[{}]", params.get(id).name, i));
            }
        }
    }
    Ok(report)
}

/// Outcome of one operation's check in [`check_all_ops`].
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub max_relative_error: f64,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Random values at least `margin` away from zero, so piecewise-linear
/// activations are never probed across their kink.
fn away_from_zero(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    random(shape, rng).map(|v| if v < 0.0 { v.min(-margin) } else { v.max(margin) })
}

/// `sum(v * r)` for a fixed random `r`, so every output coordinate carries a
/// distinct weight into the check.
fn project(t: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = t.constant(random(t.shape(v), &mut rng));
    let p = t.mul(v, r)?;
    Ok(t.sum(p))
}

/// Checks the recorded gradient of every differentiable operation against
/// central differences on small random inputs.
pub fn check_all_ops(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut run = |op: &'static str, err: f64| out.push(OpCheck { op, max_relative_error: err });
    let eps = DEFAULT_EPS;
    let ps = rng.random::<u64>();

    let x = random(&[2, 2, 4, 3, 4], &mut rng);
    let w = random(&[3, 2, 3, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    run("conv3d.input", finite_diff_check(|t, v| {
        let (wv, bv) = (t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv3d(v, wv, Some(bv), 1, 1)?;
        project(t, y, ps)
    }, &x, eps)?);
    run("conv3d.kernel", finite_diff_check(|t, v| {
        let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
        let y = t.conv3d(xv, v, Some(bv), 2, 1)?;
        project(t, y, ps)
    }, &w, eps)?);
    run("conv3d.bias", finite_diff_check(|t, v| {
        let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
        let y = t.conv3d(xv, wv, Some(v), 1, 1)?;
        project(t, y, ps)
    }, &b, eps)?);
    let wd = random(&[3, 2, 2, 2, 2], &mut rng);
    run("conv3d.downsample", finite_diff_check(|t, v| {
        let wv = t.constant(wd.clone());
        let y = t.conv3d(v, wv, None, 2, 0)?;
        project(t, y, ps)
    }, &x, eps)?);

    let xu = random(&[2, 3, 2, 3, 2], &mut rng);
    let wu = random(&[3, 2, 2, 2, 2], &mut rng);
    let bu = random(&[2], &mut rng);
    run("conv_transpose3d.input", finite_diff_check(|t, v| {
        let (wv, bv) = (t.constant(wu.clone()), t.constant(bu.clone()));
        let y = t.conv_transpose3d(v, wv, Some(bv), 2)?;
        project(t, y, ps)
    }, &xu, eps)?);
    run("conv_transpose3d.kernel", finite_diff_check(|t, v| {
        let (xv, bv) = (t.constant(xu.clone()), t.constant(bu.clone()));
        let y = t.conv_transpose3d(xv, v, Some(bv), 2)?;
        project(t, y, ps)
    }, &wu, eps)?);
    run("conv_transpose3d.bias", finite_diff_check(|t, v| {
        let (xv, wv) = (t.constant(xu.clone()), t.constant(wu.clone()));
        let y = t.conv_transpose3d(xv, wv, Some(v), 2)?;
        project(t, y, ps)
    }, &bu, eps)?);

    let a = away_from_zero(&[3, 5], 1e-3, &mut rng);
    run("relu", finite_diff_check(|t, v| {
        let y = t.relu(v);
        project(t, y, ps)
    }, &a, eps)?);
    run("leaky_relu", finite_diff_check(|t, v| {
        let y = t.leaky_relu(v, 0.2);
        project(t, y, ps)
    }, &a, eps)?);

    let s = random(&[2, 4, 3], &mut rng).map(|v| 3.0 * v);
    run("softmax", finite_diff_check(|t, v| {
        let y = t.softmax(v, 1)?;
        project(t, y, ps)
    }, &s, eps)?);
    run("log_softmax", finite_diff_check(|t, v| {
        let y = t.log_softmax(v, 1)?;
        project(t, y, ps)
    }, &s, eps)?);

    let ma = random(&[2, 3, 4], &mut rng);
    let mb = random(&[2, 4, 5], &mut rng);
    let ms = random(&[4, 5], &mut rng);
    run("matmul.lhs", finite_diff_check(|t, v| {
        let bv = t.constant(mb.clone());
        let y = t.matmul(v, bv)?;
        project(t, y, ps)
    }, &ma, eps)?);
    run("matmul.rhs", finite_diff_check(|t, v| {
        let av = t.constant(ma.clone());
        let y = t.matmul(av, v)?;
        project(t, y, ps)
    }, &mb, eps)?);
    run("matmul.shared_rhs", finite_diff_check(|t, v| {
        let av = t.constant(ma.clone());
        let y = t.matmul(av, v)?;
        project(t, y, ps)
    }, &ms, eps)?);
    run("transpose_last2", finite_diff_check(|t, v| {
        let y = t.transpose_last2(v)?;
        project(t, y, ps)
    }, &ma, eps)?);
    run("reshape", finite_diff_check(|t, v| {
        let y = t.reshape(v, &[6, 4])?;
        project(t, y, ps)
    }, &ma, eps)?);

    let c2 = random(&[2, 1, 4], &mut rng);
    run("concat", finite_diff_check(|t, v| {
        let other = t.constant(c2.clone());
        let y = t.concat(&[v, other, v], 1)?;
        project(t, y, ps)
    }, &ma, eps)?);

    let p = random(&[3, 4], &mut rng);
    let q = away_from_zero(&[3, 4], 0.3, &mut rng);
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2), ("div.numerator", 3)] {
        run(name, finite_diff_check(|t, v| {
            let qv = t.constant(q.clone());
            let y = match which {
                0 => t.add(v, qv)?,
                1 => t.sub(qv, v)?,
                2 => t.mul(v, qv)?,
                _ => t.div(v, qv)?,
            };
            project(t, y, ps)
        }, &p, eps)?);
    }
    run("div.denominator", finite_diff_check(|t, v| {
        let pv = t.constant(p.clone());
        let y = t.div(pv, v)?;
        project(t, y, ps)
    }, &q, eps)?);
    run("scale", finite_diff_check(|t, v| {
        let y = t.scale(v, -1.7);
        project(t, y, ps)
    }, &p, eps)?);
    run("add_scalar", finite_diff_check(|t, v| {
        let y = t.add_scalar(v, 0.3);
        let y = t.mul(y, y)?;
        project(t, y, ps)
    }, &p, eps)?);
    let gamma = Tensor::new(vec![1], vec![0.4])?;
    run("scale_by.input", finite_diff_check(|t, v| {
        let g = t.constant(gamma.clone());
        let y = t.scale_by(g, v)?;
        project(t, y, ps)
    }, &p, eps)?);
    run("scale_by.scalar", finite_diff_check(|t, v| {
        let pv = t.constant(p.clone());
        let y = t.scale_by(v, pv)?;
        project(t, y, ps)
    }, &gamma, eps)?);
    run("sum", finite_diff_check(|t, v| {
        let sq = t.mul(v, v)?;
        Ok(t.sum(sq))
    }, &p, eps)?);
    run("mean", finite_diff_check(|t, v| {
        let sq = t.mul(v, v)?;
        Ok(t.mean(sq))
    }, &p, eps)?);
    run("sum_axes", finite_diff_check(|t, v| {
        let y = t.sum_axes(v, &[0, 2])?;
        project(t, y, ps)
    }, &ma, eps)?);

    let rows = random(&[4, 3], &mut rng);
    let index: Arc<[usize]> = Arc::from(vec![0, 3, 3, 1, 2, 0]);
    run("gather_rows", finite_diff_check(|t, v| {
        let y = t.gather_rows(v, index.clone())?;
        project(t, y, ps)
    }, &rows, eps)?);
    let edges = random(&[6, 3], &mut rng);
    run("scatter_add_rows", finite_diff_check(|t, v| {
        let y = t.scatter_add_rows(v, index.clone(), 5)?;
        project(t, y, ps)
    }, &edges, eps)?);
    let scores = random(&[6], &mut rng).map(|v| 2.0 * v);
    run("segment_softmax", finite_diff_check(|t, v| {
        let y = t.segment_softmax(v, index.clone(), 4)?;
        project(t, y, ps)
    }, &scores, eps)?);
    let weights = random(&[6], &mut rng);
    run("mul_rows.rows", finite_diff_check(|t, v| {
        let wv = t.constant(weights.clone());
        let y = t.mul_rows(v, wv)?;
        project(t, y, ps)
    }, &edges, eps)?);
    run("mul_rows.weights", finite_diff_check(|t, v| {
        let ev = t.constant(edges.clone());
        let y = t.mul_rows(ev, v)?;
        project(t, y, ps)
    }, &weights, eps)?);
    let logits = random(&[2, 3, 2, 2], &mut rng);
    let classes: Arc<[usize]> = Arc::from(vec![0, 2, 1, 1, 2, 2, 0, 1]);
    run("select_class", finite_diff_check(|t, v| {
        let y = t.select_class(v, classes.clone())?;
        project(t, y, ps)
    }, &logits, eps)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for c in check_all_ops(11).unwrap() {
            assert!(c.max_relative_error < 1e-4, "{}: {}", c.op, c.max_relative_error);
        }
    }

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.5, 0.0]).unwrap();
        let err = finite_diff_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                let s = t.sum(sq);
                Ok(t.scale(s, 0.5))
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-8, "{}", err);
    }

    #[test]
    fn constant_softmax_sum() {
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.7, -0.4, 2.0, 1.0, 0.0]).unwrap();
        let err = finite_diff_check(
            |t, x| {
                let s = t.softmax(x, 1)?;
                Ok(t.sum(s))
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "{}", err);
    }
}
