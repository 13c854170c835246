use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Settings for [`grad_check`].
///
/// The error at a coordinate is `|analytic − numeric| / max(|analytic|,
/// |numeric|, floor)`; the floor keeps coordinates whose true gradient is
/// zero from dividing roundoff by roundoff.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
}

impl GradCheck {
    pub fn new(step: f64, tolerance: f64) -> Self {
        Self { step, tolerance, floor: 1e-6 }
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradFailure {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub failures: Vec<GradFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences, coordinate by coordinate.
pub fn grad_check<F>(params: &[Tensor], f: F, opts: GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if opts.step <= 0.0 {
        return Err(Error::Config(format!("finite-difference step {} must be positive", opts.step)));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {v} in gradient check")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut work = params.to_vec();
    let mut report = GradCheckReport::default();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; params[pi].numel()]);
        for (idx, &a) in analytic.iter().enumerate() {
            let orig = work[pi].data()[idx];
            work[pi].data_mut()[idx] = orig + opts.step;
            let plus = eval(&work)?;
            work[pi].data_mut()[idx] = orig - opts.step;
            let minus = eval(&work)?;
            work[pi].data_mut()[idx] = orig;
            let n = (plus - minus) / (2.0 * opts.step);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(opts.floor);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > opts.tolerance {
                report.failures.push(GradFailure { param: pi, index: idx, analytic: a, numeric: n, rel_error: rel });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::AttentionMask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic() {
        let x = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq);
        assert_eq!(g.backward(s).unwrap().get(v).unwrap(), &[2.0, 4.0, 6.0]);
        let report = grad_check(
            &[x],
            |g, p| {
                let sq = g.mul(p[0], p[0])?;
                Ok(g.sum(sq))
            },
            GradCheck::new(1e-4, 1e-6),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let report = grad_check(
            &[x],
            |g, _| Ok(g.constant(Tensor::scalar(4.2))),
            GradCheck::new(1e-4, 1e-6),
        )
        .unwrap();
        assert!(report.passed());
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn matmul_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let w = random(&mut rng, 3, 2);
        let report = grad_check(
            &[a, b],
            |g, p| {
                let c = g.matmul(p[0], p[1])?;
                let w = g.constant(w.clone());
                let m = g.mul(c, w)?;
                Ok(g.sum(m))
            },
            GradCheck::new(1e-4, 1e-5),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn elementwise_and_normalization_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, 3, 5);
        let y = random(&mut rng, 3, 5);
        let bias = random(&mut rng, 1, 5).reshape(vec![5]).unwrap();
        let w = random(&mut rng, 6, 5);
        let report = grad_check(
            &[x, y, bias],
            |g, p| {
                let a = g.add(p[0], p[1])?;
                let m = g.mul(a, p[1])?;
                let s = g.silu(m);
                let d = g.sub(s, p[0])?;
                let b = g.add_bias(d, p[2])?;
                let n = g.layer_norm(b);
                let sc = g.scale(n, 0.7);
                let sc = g.add_scalar(sc, 0.3);
                let sm = g.softmax(sc);
                let cat = g.concat_rows(&[sm, p[0]])?;
                let gat = g.gather_rows(cat, vec![5, 0, 0, 2, 3, 4])?;
                let w = g.constant(w.clone());
                let prod = g.mul(gat, w)?;
                let sl = g.slice_cols(prod, 1, 3)?;
                let sq = g.mul(sl, sl)?;
                let r = g.row_weighted_sum(sq, vec![0.5, 1.0, -2.0, 0.25, 3.0, 1.5])?;
                let mean = g.mean(prod);
                Ok(g.add(r, mean)?)
            },
            GradCheck::new(1e-5, 1e-5),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn masked_multihead_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (batch, len, width) = (2, 4, 6);
        let q = random(&mut rng, batch * len, width);
        let k = random(&mut rng, batch * len, width);
        let v = random(&mut rng, batch * len, width);
        let w = random(&mut rng, batch * len, width);
        let mask = Arc::new(AttentionMask::from_fn(len, |q, k| k <= q || k == 3).unwrap());
        let report = grad_check(
            &[q, k, v],
            |g, p| {
                let o = g.attention(p[0], p[1], p[2], &mask, 2)?;
                let w = g.constant(w.clone());
                let m = g.mul(o, w)?;
                Ok(g.sum(m))
            },
            GradCheck::new(1e-5, 1e-5),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn non_positive_step_is_rejected() {
        let err = grad_check(&[], |g, _| Ok(g.constant(Tensor::scalar(0.0))), GradCheck::new(0.0, 1e-4));
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
