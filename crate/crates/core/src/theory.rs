//! Monte Carlo checks of the projection-separation bound and of the
//! distance-correlation counterexample to reconstruction security.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{normal_cdf, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryParams {
    pub d: usize,
    pub sigma_w: f64,
    pub k: f64,
    pub trials: usize,
    pub rho: f64,
    pub delta: f64,
    pub n: usize,
    pub seed: u64,
}

impl TheoryParams {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Domain("d must be at least 1".into()));
        }
        if !(self.k > 0.0 && self.sigma_w > 0.0) {
            return Err(Error::Domain("k and sigma_w must be positive".into()));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Domain(format!(
                "rho must lie in (0, 1), got {}",
                self.rho
            )));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Domain("delta must be positive".into()));
        }
        Ok(())
    }
}

/// `P(|N(0, sigma_w^2)| >= k sqrt(d)) = 2 - 2 Phi(k sqrt(d) / sigma_w)`.
pub fn separation_bound(d: usize, sigma_w: f64, k: f64) -> f64 {
    2.0 - 2.0 * normal_cdf(k * (d as f64).sqrt() / sigma_w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationEstimate {
    pub d: usize,
    pub sigma_w: f64,
    pub k: f64,
    pub trials: usize,
    pub empirical: f64,
    pub analytic: f64,
    /// Binomial standard error of `empirical`.
    pub se: f64,
    pub pass: bool,
}

/// Estimates `P(|w.x - w.y| >= k |x - y|_1)` for standard normal `x, y`
/// and `w ~ N(0, sigma_w^2 I)`, for several `k` on shared draws.
pub fn mc_projection_separation_multi(
    d: usize,
    sigma_w: f64,
    ks: &[f64],
    trials: usize,
    rng: &mut SeededRng,
) -> Result<Vec<SeparationEstimate>> {
    if d == 0 || trials == 0 {
        return Err(Error::Domain("d and trials must be positive".into()));
    }
    if !(sigma_w > 0.0) || ks.iter().any(|&k| !(k > 0.0)) {
        return Err(Error::Domain("k and sigma_w must be positive".into()));
    }
    let mut hits = vec![0usize; ks.len()];
    for _ in 0..trials {
        let (mut proj, mut l1) = (0.0f64, 0.0f64);
        for _ in 0..d {
            let diff = rng.normal() - rng.normal();
            proj += sigma_w * rng.normal() * diff;
            l1 += diff.abs();
        }
        for (h, &k) in hits.iter_mut().zip(ks) {
            if proj.abs() >= k * l1 {
                *h += 1;
            }
        }
    }
    Ok(ks
        .iter()
        .zip(hits)
        .map(|(&k, h)| {
            let p = h as f64 / trials as f64;
            let se = binomial_se(p, trials);
            let analytic = separation_bound(d, sigma_w, k);
            SeparationEstimate {
                d,
                sigma_w,
                k,
                trials,
                empirical: p,
                analytic,
                se,
                pass: p >= analytic - 3.0 * se,
            }
        })
        .collect())
}

fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

pub fn mc_projection_separation(
    params: &TheoryParams,
    rng: &mut SeededRng,
) -> Result<SeparationEstimate> {
    let mut out =
        mc_projection_separation_multi(params.d, params.sigma_w, &[params.k], params.trials, rng)?;
    Ok(out.remove(0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscorrEstimate {
    pub value: f64,
    pub n: usize,
}

/// Mean of `|x_i - x_j|` over `j` for every `i`, and the grand mean.
fn distance_means(x: &[f64]) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let rows: Vec<f64> = x
        .iter()
        .map(|&xi| x.iter().map(|&xj| (xi - xj).abs()).sum::<f64>() / n)
        .collect();
    let grand = rows.iter().sum::<f64>() / n;
    (rows, grand)
}

/// Sample distance correlation of two scalar samples from double-centered
/// pairwise-distance matrices. The matrices are never stored: row means
/// come from one pass and the centered products from a second. Returns 0
/// when either sample has zero distance variance.
pub fn distance_correlation(x: &[f64], y: &[f64]) -> Result<DiscorrEstimate> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "samples of size {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 4 {
        return Err(Error::Domain(
            "distance correlation needs at least 4 samples".into(),
        ));
    }
    let (ax, gx) = distance_means(x);
    let (ay, gy) = distance_means(y);
    let (mut cov, mut vx, mut vy) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..x.len() {
        for j in 0..x.len() {
            let a = (x[i] - x[j]).abs() - ax[i] - ax[j] + gx;
            let b = (y[i] - y[j]).abs() - ay[i] - ay[j] + gy;
            cov += a * b;
            vx += a * a;
            vy += b * b;
        }
    }
    let denom = (vx * vy).sqrt();
    let value = if denom > 0.0 {
        (cov.max(0.0) / denom).sqrt().min(1.0)
    } else {
        0.0
    };
    Ok(DiscorrEstimate { value, n: x.len() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub rho: f64,
    pub delta: f64,
    pub n: usize,
    pub w: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub report: CounterexampleReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleReport {
    pub dcor_wx: f64,
    pub dcor_yz: f64,
    /// Fraction of samples with `|Y - 0| <= delta`.
    pub zero_estimator_success: f64,
    /// Fraction of samples with `|W - rho X| <= delta`.
    pub linear_estimator_success: f64,
    /// `2 Phi(delta / sqrt(1 - rho^2)) - 1`.
    pub analytic_c: f64,
}

/// Minimum correlation for which the counterexample ordering is proven.
pub const RHO_MIN: f64 = 0.945;

pub fn analytic_c(rho: f64, delta: f64) -> f64 {
    2.0 * normal_cdf(delta / (1.0 - rho * rho).sqrt()) - 1.0
}

/// `X = rho W + sqrt(1 - rho^2) e` with `W, e ~ N(0, 1)`, and
/// `Y ~ U[-delta, delta]`, `Z = |Y|`.
pub fn build_discorr_counterexample(
    rho: f64,
    delta: f64,
    n: usize,
    rng: &mut SeededRng,
) -> Result<Counterexample> {
    if !(rho > RHO_MIN && rho < 1.0) {
        return Err(Error::Domain(format!(
            "rho must lie in ({RHO_MIN}, 1), got {rho}"
        )));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Domain("delta must be positive".into()));
    }
    let s = (1.0 - rho * rho).sqrt();
    let mut w = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let wi = rng.normal();
        w.push(wi);
        x.push(rho * wi + s * rng.normal());
        y.push(delta * (2.0 * rng.uniform() - 1.0));
    }
    let z: Vec<f64> = y.iter().map(|v| v.abs()).collect();
    let frac = |hits: usize| hits as f64 / n as f64;
    let report = CounterexampleReport {
        dcor_wx: distance_correlation(&w, &x)?.value,
        dcor_yz: distance_correlation(&y, &z)?.value,
        zero_estimator_success: frac(y.iter().filter(|v| v.abs() <= delta).count()),
        linear_estimator_success: frac(
            w.iter()
                .zip(&x)
                .filter(|(wi, xi)| (*wi - rho * *xi).abs() <= delta)
                .count(),
        ),
        analytic_c: analytic_c(rho, delta),
    };
    Ok(Counterexample {
        rho,
        delta,
        n,
        w,
        x,
        y,
        z,
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryCheck {
    pub label: String,
    pub empirical: f64,
    pub analytic: f64,
    pub n: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub preset: String,
    pub seed: u64,
    pub checks: Vec<TheoryCheck>,
    pub pass: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Thm1Paper,
    Thm2Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "thm1-paper" => Ok(Preset::Thm1Paper),
            "thm2-paper" => Ok(Preset::Thm2Paper),
            other => Err(Error::Config(format!(
                "unknown preset {other:?}, expected thm1-paper or thm2-paper"
            ))),
        }
    }
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Thm1Paper => "thm1-paper",
            Preset::Thm2Paper => "thm2-paper",
        }
    }
}

/// `d = 4096`, `sigma_w = 1`, `k` in {1/64, 1/32}, `trials` draws.
pub fn verify_separation(trials: usize, seed: u64) -> Result<TheoryReport> {
    let mut rng = SeededRng::new(seed).substream("separation");
    let est =
        mc_projection_separation_multi(4096, 1.0, &[1.0 / 64.0, 1.0 / 32.0], trials, &mut rng)?;
    let checks: Vec<TheoryCheck> = est
        .iter()
        .map(|e| TheoryCheck {
            label: format!("separation k=1/{}", (1.0 / e.k).round()),
            empirical: e.empirical,
            analytic: e.analytic,
            n: e.trials,
            pass: e.pass,
        })
        .collect();
    Ok(TheoryReport {
        preset: Preset::Thm1Paper.name().into(),
        seed,
        pass: checks.iter().all(|c| c.pass),
        checks,
    })
}

/// `rho = 0.99`, `delta = 0.1`, `n = 5000` over `seeds` repetitions.
pub fn verify_counterexample(n: usize, seeds: usize, seed: u64) -> Result<TheoryReport> {
    let (rho, delta) = (0.99, 0.1);
    let root = SeededRng::new(seed).substream("counterexample");
    let mut ordered = 0usize;
    let mut zero_ok = true;
    let mut linear = Vec::with_capacity(seeds);
    for s in 0..seeds {
        let ce = build_discorr_counterexample(
            rho,
            delta,
            n,
            &mut root.substream_indexed("seed", s as u64),
        )?;
        if ce.report.dcor_wx - ce.report.dcor_yz > 0.02 {
            ordered += 1;
        }
        zero_ok &= ce.report.zero_estimator_success == 1.0;
        linear.push(ce.report.linear_estimator_success);
    }
    let c = analytic_c(rho, delta);
    let mean = linear.iter().sum::<f64>() / linear.len().max(1) as f64;
    let worst = linear.iter().map(|p| (p - c).abs()).fold(0.0, f64::max);
    let order_rate = ordered as f64 / seeds.max(1) as f64;
    let checks = vec![
        TheoryCheck {
            label: "dcor(W,X) - dcor(Y,Z) > 0.02, fraction of seeds".into(),
            empirical: order_rate,
            analytic: 0.95,
            n: seeds,
            pass: order_rate >= 0.95,
        },
        TheoryCheck {
            label: "zero estimator within delta".into(),
            empirical: if zero_ok { 1.0 } else { 0.0 },
            analytic: 1.0,
            n,
            pass: zero_ok,
        },
        TheoryCheck {
            label: "P(|W - rho X| <= delta), mean over seeds".into(),
            empirical: mean,
            analytic: c,
            n,
            pass: !linear.is_empty() && worst <= 0.03,
        },
    ];
    Ok(TheoryReport {
        preset: Preset::Thm2Paper.name().into(),
        seed,
        pass: checks.iter().all(|c| c.pass),
        checks,
    })
}

pub fn verify_preset(preset: Preset, seed: u64) -> Result<TheoryReport> {
    match preset {
        Preset::Thm1Paper => verify_separation(100_000, seed),
        Preset::Thm2Paper => verify_counterexample(5000, 20, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_values() {
        assert!((separation_bound(4096, 1.0, 1.0 / 64.0) - 0.31731).abs() < 1e-4);
        assert!((separation_bound(4096, 1.0, 1.0 / 32.0) - 0.04550).abs() < 1e-4);
        assert!((analytic_c(0.99, 0.1) - 0.5218).abs() < 1e-3);
    }

    #[test]
    fn dcor_of_identical_samples_is_one() {
        let mut rng = SeededRng::new(2);
        let x: Vec<f64> = (0..300).map(|_| rng.normal()).collect();
        assert!((distance_correlation(&x, &x).unwrap().value - 1.0).abs() < 1e-9);
        let affine: Vec<f64> = x.iter().map(|v| -3.0 * v + 2.0).collect();
        assert!((distance_correlation(&x, &affine).unwrap().value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dcor_matches_stored_matrix_oracle() {
        let mut rng = SeededRng::new(3);
        let x: Vec<f64> = (0..40).map(|_| rng.normal()).collect();
        let y: Vec<f64> = x.iter().map(|v| v * v + 0.3 * rng.normal()).collect();
        let n = x.len();
        let center = |s: &[f64]| {
            let m: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..n).map(|j| (s[i] - s[j]).abs()).collect())
                .collect();
            let rm: Vec<f64> = m.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
            let g = rm.iter().sum::<f64>() / n as f64;
            (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| m[i][j] - rm[i] - rm[j] + g)
                        .collect::<Vec<_>>()
                })
                .collect::<Vec<_>>()
        };
        let (a, b) = (center(&x), center(&y));
        let dot = |p: &Vec<Vec<f64>>, q: &Vec<Vec<f64>>| {
            p.iter()
                .flatten()
                .zip(q.iter().flatten())
                .map(|(u, v)| u * v)
                .sum::<f64>()
                / (n * n) as f64
        };
        let expect = (dot(&a, &b) / (dot(&a, &a) * dot(&b, &b)).sqrt()).sqrt();
        assert!((distance_correlation(&x, &y).unwrap().value - expect).abs() < 1e-12);
    }

    #[test]
    fn dcor_edge_cases() {
        assert!(distance_correlation(&[1.0; 5], &[1.0, 2.0, 3.0, 4.0]).is_err());
        assert!(distance_correlation(&[1.0; 3], &[1.0; 3]).is_err());
        assert_eq!(
            distance_correlation(&[2.0; 6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
                .unwrap()
                .value,
            0.0
        );
    }

    #[test]
    fn small_k_separates_almost_surely() {
        let mut rng = SeededRng::new(1);
        let est = mc_projection_separation_multi(64, 1.0, &[1e-6], 2000, &mut rng).unwrap();
        assert!(est[0].empirical > 0.99);
    }

    #[test]
    fn counterexample_domain() {
        let mut rng = SeededRng::new(0);
        assert!(build_discorr_counterexample(0.9, 0.1, 100, &mut rng).is_err());
        assert!(build_discorr_counterexample(0.99, 0.0, 100, &mut rng).is_err());
        let ce = build_discorr_counterexample(0.99, 0.1, 200, &mut rng).unwrap();
        assert_eq!(ce.report.zero_estimator_success, 1.0);
        assert!(ce.z.iter().zip(&ce.y).all(|(z, y)| *z == y.abs()));
    }
}
