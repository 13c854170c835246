//! Parameter-free multi-scale action targets.
//!
//! `down` averages contiguous groups of timesteps; `up` resamples a coarse
//! sequence onto a finer grid by linear interpolation. Both operate on
//! `[rows, action_dim]` tensors and carry no trainable state.
//!
//! Sample positions follow one convention everywhere: row `g` of an
//! `n`-row sequence sits at the center of its group, `(g + 0.5) / n` of the
//! chunk. `up` interpolates between those centers and clamps beyond the
//! first and last one, so a single row broadcasts exactly.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Strictly increasing temporal scales, each dividing the chunk length,
/// ending at the chunk length.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct ScaleSchedule {
    scales: Vec<usize>,
    chunk_len: usize,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ScheduleRepr {
    scales: Vec<usize>,
    chunk_len: usize,
}

impl TryFrom<ScheduleRepr> for ScaleSchedule {
    type Error = Error;
    fn try_from(r: ScheduleRepr) -> Result<Self> {
        ScaleSchedule::new(r.scales, r.chunk_len)
    }
}

impl From<ScaleSchedule> for ScheduleRepr {
    fn from(s: ScaleSchedule) -> Self {
        ScheduleRepr { scales: s.scales, chunk_len: s.chunk_len }
    }
}

impl ScaleSchedule {
    pub fn new(scales: Vec<usize>, chunk_len: usize) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::Schedule("schedule is empty".into()));
        }
        if scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Schedule(format!("scales {scales:?} are not strictly increasing")));
        }
        if scales[0] == 0 {
            return Err(Error::Schedule("scale 0 is not allowed".into()));
        }
        if *scales.last().unwrap() != chunk_len {
            return Err(Error::Schedule(format!(
                "last scale of {scales:?} must equal the chunk length {chunk_len}"
            )));
        }
        if let Some(bad) = scales.iter().find(|&&s| chunk_len % s != 0) {
            return Err(Error::Schedule(format!("scale {bad} does not divide chunk length {chunk_len}")));
        }
        Ok(Self { scales, chunk_len })
    }

    /// `{1, 2, 4, …, T}` for a power-of-two `T`.
    pub fn dyadic(chunk_len: usize) -> Result<Self> {
        if !chunk_len.is_power_of_two() {
            return Err(Error::Schedule(format!("chunk length {chunk_len} is not a power of two")));
        }
        let scales = std::iter::successors(Some(1usize), |&s| (s < chunk_len).then_some(s * 2)).collect();
        Self::new(scales, chunk_len)
    }

    /// Parses a comma-separated list such as `1,2,4,8`.
    pub fn parse(list: &str, chunk_len: usize) -> Result<Self> {
        let scales = list
            .split(',')
            .map(|s| s.trim().parse::<usize>().map_err(|e| Error::Schedule(format!("bad scale {s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(scales, chunk_len)
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    pub fn chunk_len(&self) -> usize {
        self.chunk_len
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn coarsest(&self) -> usize {
        self.scales[0]
    }

    /// Loss weight `i / T`, before the `1/|S|` average.
    pub fn weight(&self, scale: usize) -> f64 {
        scale as f64 / self.chunk_len as f64
    }
}

impl std::fmt::Display for ScaleSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.scales.iter().map(ToString::to_string).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

fn smallest_prime_factor(n: usize) -> usize {
    let mut p = 2;
    while p * p <= n {
        if n % p == 0 {
            return p;
        }
        p += 1;
    }
    n
}

fn reduce_groups(x: &Tensor, factor: usize) -> Tensor {
    let (rows, cols) = (x.rows(), x.cols());
    let out_rows = rows / factor;
    let mut out = Vec::with_capacity(out_rows * cols);
    for g in 0..out_rows {
        for c in 0..cols {
            let s: f64 = (0..factor).map(|r| x.data()[(g * factor + r) * cols + c]).sum();
            out.push(s / factor as f64);
        }
    }
    Tensor::matrix(out_rows, cols, out).expect("consistent shape")
}

/// Averages `rows / scale` consecutive rows into each of `scale` output rows.
///
/// The group mean is taken as a chain of reductions by the prime factors of
/// the group width, smallest first. Nested calls along a prime-power chain
/// therefore apply the same arithmetic and agree bitwise with a direct call.
pub fn down(chunk: &Tensor, scale: usize) -> Result<Tensor> {
    let rows = chunk.rows();
    if scale == 0 || rows % scale != 0 {
        return Err(Error::Schedule(format!("scale {scale} does not divide {rows} rows")));
    }
    let mut group = rows / scale;
    let mut cur = chunk.clone().reshape(vec![rows, chunk.cols()])?;
    while group > 1 {
        let p = smallest_prime_factor(group);
        cur = reduce_groups(&cur, p);
        group /= p;
    }
    Ok(cur)
}

/// Interpolation weights of `up` from `from` rows to `to` rows, as a
/// row-major `[to, from]` matrix.
pub fn up_weights(from: usize, to: usize) -> Result<Vec<f64>> {
    if from == 0 || to < from {
        return Err(Error::Resample(format!("cannot upsample {from} rows to {to}")));
    }
    let mut w = vec![0.0; to * from];
    let den = 2 * to as i64;
    for u in 0..to {
        // position of output row u in input-row units, as num / den
        let num = (2 * u as i64 + 1) * from as i64 - to as i64;
        let row = &mut w[u * from..(u + 1) * from];
        if num <= 0 {
            row[0] = 1.0;
        } else if num >= (from as i64 - 1) * den {
            row[from - 1] = 1.0;
        } else {
            let lo = num.div_euclid(den) as usize;
            let frac = num.rem_euclid(den) as f64 / den as f64;
            row[lo] = 1.0 - frac;
            if frac > 0.0 {
                row[lo + 1] = frac;
            }
        }
    }
    Ok(w)
}

/// Linear upsampling along the temporal axis with center-aligned samples.
pub fn up(coarse: &Tensor, target_len: usize) -> Result<Tensor> {
    let (from, cols) = (coarse.rows(), coarse.cols());
    if target_len < from || from == 0 {
        return Err(Error::Resample(format!("target length {target_len} is shorter than {from} input rows")));
    }
    if target_len == from {
        return coarse.clone().reshape(vec![from, cols]);
    }
    let w = up_weights(from, target_len)?;
    let mut out = vec![0.0; target_len * cols];
    for u in 0..target_len {
        for (g, &wg) in w[u * from..(u + 1) * from].iter().enumerate() {
            if wg == 0.0 {
                continue;
            }
            for c in 0..cols {
                out[u * cols + c] += wg * coarse.data()[g * cols + c];
            }
        }
    }
    Tensor::matrix(target_len, cols, out)
}

/// Per-scale averaged targets for one chunk, in schedule order.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleTargets {
    per_scale: Vec<(usize, Tensor)>,
}

impl MultiScaleTargets {
    pub fn get(&self, scale: usize) -> Option<&Tensor> {
        self.per_scale.iter().find(|(s, _)| *s == scale).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.per_scale.iter().map(|(s, t)| (*s, t))
    }
}

pub fn build_targets(chunk: &Tensor, schedule: &ScaleSchedule) -> Result<MultiScaleTargets> {
    if chunk.rows() != schedule.chunk_len() {
        return Err(Error::Schedule(format!(
            "chunk has {} rows, schedule expects {}",
            chunk.rows(),
            schedule.chunk_len()
        )));
    }
    let per_scale = schedule
        .scales()
        .iter()
        .map(|&s| Ok((s, down(chunk, s)?)))
        .collect::<Result<_>>()?;
    Ok(MultiScaleTargets { per_scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(v: &[f64]) -> Tensor {
        Tensor::matrix(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn schedule_validation() {
        assert!(ScaleSchedule::new(vec![1, 2, 4, 8], 8).is_ok());
        assert!(ScaleSchedule::new(vec![1, 4, 8], 8).is_ok());
        assert!(ScaleSchedule::new(vec![8], 8).is_ok());
        assert!(matches!(ScaleSchedule::new(vec![1, 3, 8], 8), Err(Error::Schedule(_))));
        assert!(matches!(ScaleSchedule::new(vec![1, 4, 2, 8], 8), Err(Error::Schedule(_))));
        assert!(matches!(ScaleSchedule::new(vec![1, 2, 4], 8), Err(Error::Schedule(_))));
        assert!(matches!(ScaleSchedule::new(vec![1, 2, 4, 8, 16], 8), Err(Error::Schedule(_))));
        assert!(matches!(ScaleSchedule::new(vec![], 8), Err(Error::Schedule(_))));
        assert_eq!(ScaleSchedule::dyadic(8).unwrap().scales(), &[1, 2, 4, 8]);
        assert_eq!(ScaleSchedule::parse("1, 8", 8).unwrap().scales(), &[1, 8]);
    }

    #[test]
    fn down_examples() {
        assert_eq!(down(&col(&[1.0, 2.0, 3.0, 4.0]), 2).unwrap().data(), &[1.5, 3.5]);
        let c = Tensor::matrix(4, 2, [0.3, -0.7].repeat(4)).unwrap();
        for i in [1, 2, 4] {
            assert_eq!(down(&c, i).unwrap(), Tensor::matrix(i, 2, [0.3, -0.7].repeat(i)).unwrap());
        }
        let x = col(&[0.1, 0.7, -2.0, 9.5]);
        assert_eq!(down(&x, 4).unwrap(), x);
        assert!(matches!(down(&x, 3), Err(Error::Schedule(_))));
    }

    #[test]
    fn up_examples() {
        assert_eq!(up(&col(&[0.0, 1.0]), 4).unwrap().data(), &[0.0, 0.25, 0.75, 1.0]);
        let r = Tensor::matrix(1, 2, vec![0.5, -1.5]).unwrap();
        assert_eq!(up(&r, 4).unwrap().data(), [0.5, -1.5].repeat(4).as_slice());
        let c = col(&[2.0, 2.0, 2.0]);
        assert_eq!(up(&c, 9).unwrap().data(), &[2.0; 9]);
        assert!(matches!(up(&col(&[1.0, 2.0]), 1), Err(Error::Resample(_))));
    }

    /// Independent interpolation oracle: piecewise-linear through the group
    /// centers, evaluated at the output centers, clamped at both ends.
    fn interp_oracle(xs: &[f64], n: usize) -> Vec<f64> {
        let i = xs.len();
        let centers: Vec<f64> = (0..i).map(|g| (g as f64 + 0.5) / i as f64).collect();
        (0..n)
            .map(|u| {
                let t = (u as f64 + 0.5) / n as f64;
                if t <= centers[0] {
                    return xs[0];
                }
                if t >= centers[i - 1] {
                    return xs[i - 1];
                }
                let g = centers.iter().rposition(|&c| c <= t).unwrap();
                let f = (t - centers[g]) / (centers[g + 1] - centers[g]);
                xs[g] * (1.0 - f) + xs[g + 1] * f
            })
            .collect()
    }

    #[test]
    fn up_matches_interpolation_oracle() {
        let xs = [0.3, -1.2, 4.0, 0.5, 2.2];
        for n in [5, 6, 10, 13, 40] {
            let got = up(&col(&xs), n).unwrap();
            for (a, b) in got.data().iter().zip(interp_oracle(&xs, n)) {
                assert!((a - b).abs() < 1e-12, "n={n}");
            }
        }
        assert_eq!(interp_oracle(&[0.0, 1.0], 4), vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn build_targets_examples() {
        let chunk = col(&[1.0, 2.0, 3.0, 4.0]);
        let s = ScaleSchedule::new(vec![1, 2, 4], 4).unwrap();
        let t = build_targets(&chunk, &s).unwrap();
        assert_eq!(t.get(1).unwrap().data(), &[2.5]);
        assert_eq!(t.get(2).unwrap().data(), &[1.5, 3.5]);
        assert_eq!(t.get(4).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);

        let ramp = col(&(0..8).map(|v| v as f64 * 0.25).collect::<Vec<_>>());
        let t = build_targets(&ramp, &ScaleSchedule::dyadic(8).unwrap()).unwrap();
        let mean = ramp.data().iter().sum::<f64>() / 8.0;
        assert_eq!(t.get(1).unwrap().data(), &[mean]);
    }

    #[test]
    fn non_dyadic_nesting_is_close() {
        let x = col(&(0..12).map(|v| (v as f64 * 0.37).sin()).collect::<Vec<_>>());
        let direct = down(&x, 2).unwrap();
        for j in [4, 6, 12] {
            let nested = down(&down(&x, j).unwrap(), 2).unwrap();
            assert!(nested.max_abs_diff(&direct) < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn dyadic_nesting_is_exact(data in proptest::collection::vec(-10.0f64..10.0, 16 * 3)) {
            let x = Tensor::matrix(16, 3, data).unwrap();
            for i in [1usize, 2, 4, 8, 16] {
                for j in [1usize, 2, 4, 8, 16] {
                    if j % i == 0 {
                        prop_assert_eq!(down(&down(&x, j).unwrap(), i).unwrap(), down(&x, i).unwrap());
                    }
                }
            }
        }

        #[test]
        fn up_is_linear(
            x in proptest::collection::vec(-5.0f64..5.0, 6),
            y in proptest::collection::vec(-5.0f64..5.0, 6),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let tx = Tensor::matrix(3, 2, x.clone()).unwrap();
            let ty = Tensor::matrix(3, 2, y.clone()).unwrap();
            let comb: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let lhs = up(&Tensor::matrix(3, 2, comb).unwrap(), 7).unwrap();
            let (ux, uy) = (up(&tx, 7).unwrap(), up(&ty, 7).unwrap());
            for k in 0..lhs.numel() {
                let rhs = a * ux.data()[k] + b * uy.data()[k];
                prop_assert!((lhs.data()[k] - rhs).abs() < 1e-12);
            }
        }
    }
}
