//! Sample-based accuracy metrics against a true state path.
//!
//! All functions take samples as a `(K, N, d)` array (steps, samples, state
//! dimension) and the truth as `(K, d)`.

use ndarray::{ArrayView1, ArrayView2, ArrayView3, Axis};

use crate::error::{shape_err, Error, Result};

pub const DEFAULT_MMD_BANDWIDTH: f64 = 2.0;

/// A metric's aggregate and its per-step values.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSeries {
    pub value: f64,
    pub per_step: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rmse: MetricSeries,
    pub mmd: MetricSeries,
    pub crps: MetricSeries,
}

fn check(samples: &ArrayView3<f64>, truth: &ArrayView2<f64>, op: &'static str) -> Result<()> {
    let (k, n, d) = samples.dim();
    if n == 0 || k == 0 {
        return Err(Error::Empty(format!("{op} needs at least one step and one sample")));
    }
    if truth.dim() != (k, d) {
        return Err(shape_err(op, format!("truth ({k}, {d})"), format!("{:?}", truth.dim())));
    }
    Ok(())
}

/// Root mean squared deviation of the sample mean from the truth, averaged
/// over steps and coordinates before the square root. Per-step values are
/// `sqrt` of the coordinate mean at that step.
pub fn rmse(samples: ArrayView3<f64>, truth: ArrayView2<f64>) -> Result<MetricSeries> {
    check(&samples, &truth, "rmse")?;
    let mut per_step = Vec::with_capacity(truth.nrows());
    let mut total = 0.0;
    for (s, y) in samples.outer_iter().zip(truth.outer_iter()) {
        let mean = s.mean_axis(Axis(0)).expect("nonempty");
        let mse = (&mean - &y).mapv(|e| e * e).mean().unwrap_or(0.0);
        total += mse;
        per_step.push(mse.sqrt());
    }
    Ok(MetricSeries {
        value: (total / per_step.len() as f64).sqrt(),
        per_step,
    })
}

fn kernel(a: ArrayView1<f64>, b: ArrayView1<f64>, two_s2: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / two_s2).exp()
}

/// Squared kernel mean discrepancy between the sample cloud and a point mass
/// at the truth, Gaussian kernel with bandwidth `sigma`.
pub fn mmd(samples: ArrayView3<f64>, truth: ArrayView2<f64>, sigma: f64) -> Result<MetricSeries> {
    check(&samples, &truth, "mmd")?;
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("kernel bandwidth must be > 0, got {sigma}")));
    }
    let two_s2 = 2.0 * sigma * sigma;
    let n = samples.dim().1;
    let nf = n as f64;
    let mut per_step = Vec::with_capacity(truth.nrows());
    for (s, y) in samples.outer_iter().zip(truth.outer_iter()) {
        let mut within = nf;
        for i in 0..n {
            for j in i + 1..n {
                within += 2.0 * kernel(s.row(i), s.row(j), two_s2);
            }
        }
        let cross: f64 = s.outer_iter().map(|x| kernel(x, y, two_s2)).sum();
        per_step.push(within / (nf * nf) - 2.0 * cross / nf + 1.0);
    }
    let value = per_step.iter().sum::<f64>() / per_step.len() as f64;
    Ok(MetricSeries { value, per_step })
}

/// Energy form `(1/N) Σ|x_j - y| - (1/2N²) ΣΣ|x_i - x_j|` of the empirical
/// CRPS for one scalar component.
pub fn crps_scalar(xs: &mut [f64], y: f64) -> f64 {
    let n = xs.len() as f64;
    let abs_dev: f64 = xs.iter().map(|x| (x - y).abs()).sum::<f64>() / n;
    xs.sort_by(f64::total_cmp);
    // Σ_{i<j} (x_j - x_i) over sorted values
    let pair: f64 = xs.iter().enumerate().map(|(j, x)| x * (2.0 * j as f64 - n + 1.0)).sum();
    abs_dev - pair / (n * n)
}

/// CRPS averaged over components; the aggregate averages over steps too.
pub fn crps(samples: ArrayView3<f64>, truth: ArrayView2<f64>) -> Result<MetricSeries> {
    check(&samples, &truth, "crps")?;
    let mut per_step = Vec::with_capacity(truth.nrows());
    let mut buf = Vec::new();
    for (s, y) in samples.outer_iter().zip(truth.outer_iter()) {
        let mut acc = 0.0;
        for (col, &yi) in s.axis_iter(Axis(1)).zip(y) {
            buf.clear();
            buf.extend(col.iter().copied());
            acc += crps_scalar(&mut buf, yi);
        }
        per_step.push(acc / y.len().max(1) as f64);
    }
    let value = per_step.iter().sum::<f64>() / per_step.len() as f64;
    Ok(MetricSeries { value, per_step })
}

pub fn report(samples: ArrayView3<f64>, truth: ArrayView2<f64>, mmd_sigma: f64) -> Result<MetricReport> {
    Ok(MetricReport {
        rmse: rmse(samples, truth)?,
        mmd: mmd(samples, truth, mmd_sigma)?,
        crps: crps(samples, truth)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2, Array3};

    #[test]
    fn exact_samples_score_zero() {
        let truth = array![[1.0, -2.0], [0.5, 0.0]];
        let samples = Array3::from_shape_fn((2, 4, 2), |(k, _, i)| truth[[k, i]]);
        let r = report(samples.view(), truth.view(), 2.0).unwrap();
        assert_eq!(r.rmse.value, 0.0);
        assert!(r.mmd.value.abs() < 1e-15);
        assert_eq!(r.crps.value, 0.0);
    }

    #[test]
    fn single_sample_identities() {
        let s = Array3::from_elem((1, 1, 1), 3.0);
        let t = array![[1.0]];
        assert_eq!(rmse(s.view(), t.view()).unwrap().value, 2.0);
        assert_eq!(crps(s.view(), t.view()).unwrap().value, 2.0);
        let expected = 2.0 - 2.0 * (-4.0f64 / 8.0).exp();
        assert!((mmd(s.view(), t.view(), 2.0).unwrap().value - expected).abs() < 1e-15);
    }

    #[test]
    fn empty_and_mismatched() {
        let s = Array3::<f64>::zeros((2, 0, 3));
        assert!(matches!(
            rmse(s.view(), Array2::zeros((2, 3)).view()),
            Err(Error::Empty(_))
        ));
        let s = Array3::<f64>::zeros((2, 2, 3));
        assert!(matches!(
            crps(s.view(), Array2::zeros((2, 2)).view()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn crps_small_case() {
        // samples {0, 2}, y = 1: mean |x-y| = 1, pair term = 2·2/(2·4) = 0.5
        let mut xs = [2.0, 0.0];
        assert!((crps_scalar(&mut xs, 1.0) - 0.5).abs() < 1e-15);
    }
}
