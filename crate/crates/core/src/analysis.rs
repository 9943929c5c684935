//! Diagnostics: stable rank, gradient-similarity divergence and its
//! probability, and gradient sparsity.

use crate::compression::{check_subtoken_size, token_dims};
use crate::rng::SeededRng;
use crate::tensor::dot;
use crate::{Error, Result, Tensor};

/// Power iterations used for the largest singular value.
pub const STABLE_RANK_ITERS: usize = 2000;
const STABLE_RANK_SEED: u64 = 0x5ab1e;

/// `‖A‖_F² / σ_max(A)²`.
pub fn stable_rank(a: &Tensor) -> Result<f64> {
    if a.rank() != 2 {
        return Err(Error::Rank {
            op: "stable_rank",
            min: 2,
            shape: a.shape().to_vec(),
        });
    }
    let fro = a.frobenius_norm();
    if fro == 0.0 {
        return Err(Error::Undefined("stable rank of a zero matrix".into()));
    }
    // σ_max(A)² is the top eigenvalue of the smaller Gram matrix, which is
    // far cheaper to iterate on for tall sub-token matrices
    let (rows, cols) = (a.shape()[0], a.shape()[1]);
    let at = a.transpose()?;
    let gram = if rows >= cols { at.matmul(a)? } else { a.matmul(&at)? };
    let sigma_sq = gram.spectral_norm(STABLE_RANK_ITERS, STABLE_RANK_SEED)?;
    Ok(fro * fro / sigma_sq)
}

/// One point of a sub-token stable-rank profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfilePoint {
    pub m: usize,
    pub rows: usize,
    pub stable_rank: f64,
    /// `stable_rank / min(rows, m)`, in `(0, 1]`.
    pub normalized: f64,
}

/// Stable rank of the `(B·N·D/M) × M` sub-token matrix for each `M`.
/// `M = D` is the ungrouped token matrix.
pub fn subtoken_stable_rank_profile(z: &Tensor, ms: &[usize]) -> Result<Vec<ProfilePoint>> {
    let [b, n, d] = token_dims(z)?;
    ms.iter()
        .map(|&m| {
            check_subtoken_size("profile", d, m)?;
            let rows = b * n * d / m;
            let sub = Tensor::with_dtype(vec![rows, m], z.data().to_vec(), z.dtype())?;
            let sr = stable_rank(&sub)?;
            Ok(ProfilePoint {
                m,
                rows,
                stable_rank: sr,
                normalized: sr / rows.min(m) as f64,
            })
        })
        .collect()
}

/// `|(z_i·v)(z_j·v) − z_i·z_j|`: how far the dot-product similarity moves
/// when both sub-tokens are replaced by their projections onto `v`.
pub fn similarity_divergence(z_i: &[f64], z_j: &[f64], v: &[f64]) -> f64 {
    (dot(z_i, v) * dot(z_j, v) - dot(z_i, z_j)).abs()
}

/// Standard normal CDF.
///
/// Hart's double-precision rational approximation as arranged by West
/// (2005): a ratio of degree 6 and 7 polynomials times the Gaussian density
/// for `|x| < 5√2`, and a continued fraction beyond. Absolute error is below
/// 1e-14 over the real line.
pub fn normal_cdf(x: f64) -> f64 {
    const P: [f64; 7] = [
        3.526_249_659_989_11e-2,
        0.700_383_064_443_688,
        6.373_962_203_531_65,
        33.912_866_078_383,
        112.079_291_497_871,
        221.213_596_169_931,
        220.206_867_912_376,
    ];
    const Q: [f64; 8] = [
        8.838_834_764_831_84e-2,
        1.755_667_163_182_64,
        16.064_177_579_207,
        86.780_732_202_946_1,
        296.564_248_779_674,
        637.333_633_378_831,
        793.826_512_519_948,
        440.413_735_824_752,
    ];
    if x.is_nan() {
        return f64::NAN;
    }
    let ax = x.abs();
    let tail = if ax > 37.0 {
        0.0
    } else {
        let e = (-ax * ax / 2.0).exp();
        if ax < 7.071_067_811_865_47 {
            let num = P.iter().fold(0.0, |acc, c| acc * ax + c);
            let den = Q.iter().fold(0.0, |acc, c| acc * ax + c);
            e * num / den
        } else {
            let b = ax + 1.0 / (ax + 2.0 / (ax + 3.0 / (ax + 4.0 / (ax + 0.65))));
            e / b / 2.506_628_274_631
        }
    };
    if x > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Small-angle estimate of `P(d > k)` for angles to `v` drawn from
/// `N(0, σ²)`: `2·(1 − Φ(√k/σ))`.
pub fn divergence_probability_analytic(k: f64, sigma: f64) -> Result<f64> {
    if !(k > 0.0 && k.is_finite()) || !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("divergence probability needs k > 0 and sigma > 0 (k={k}, sigma={sigma})")));
    }
    Ok(2.0 * (1.0 - normal_cdf(k.sqrt() / sigma)))
}

/// How a sampled pair of angles is turned into a divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DivergenceModel {
    /// Unit vectors built in a 2-plane through `v` and fed to
    /// [`similarity_divergence`].
    #[default]
    Exact,
    /// The small-angle expansion `(θ_i − θ_j)²/2`.
    FirstOrder,
}

impl DivergenceModel {
    pub fn tag(self) -> &'static str {
        match self {
            DivergenceModel::Exact => "exact",
            DivergenceModel::FirstOrder => "first_order",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceSample {
    pub theta_i: f64,
    pub theta_j: f64,
    pub d: f64,
    pub k: f64,
    pub sigma: f64,
}

impl DivergenceSample {
    pub fn draw(rng: &mut SeededRng, k: f64, sigma: f64, model: DivergenceModel) -> Self {
        let theta_i = sigma * rng.normal();
        let theta_j = sigma * rng.normal();
        let d = match model {
            DivergenceModel::Exact => {
                let v = [1.0, 0.0];
                let zi = [theta_i.cos(), theta_i.sin()];
                let zj = [theta_j.cos(), theta_j.sin()];
                similarity_divergence(&zi, &zj, &v)
            }
            DivergenceModel::FirstOrder => (theta_i - theta_j).powi(2) / 2.0,
        };
        Self {
            theta_i,
            theta_j,
            d,
            k,
            sigma,
        }
    }

    pub fn exceeds(&self) -> bool {
        self.d > self.k
    }
}

/// Empirical `P(d > k)` over `n` sampled sub-token pairs, exact geometry.
pub fn divergence_probability_montecarlo(k: f64, sigma: f64, n: usize, seed: u64) -> Result<f64> {
    divergence_probability_montecarlo_with(k, sigma, n, seed, DivergenceModel::Exact)
}

pub fn divergence_probability_montecarlo_with(k: f64, sigma: f64, n: usize, seed: u64, model: DivergenceModel) -> Result<f64> {
    if n == 0 {
        return Err(Error::Precondition("Monte-Carlo needs at least one sample".into()));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() || k.is_nan() {
        return Err(Error::Domain(format!("invalid Monte-Carlo inputs (k={k}, sigma={sigma})")));
    }
    let mut rng = SeededRng::new(seed, 0);
    let hits = (0..n)
        .filter(|_| DivergenceSample::draw(&mut rng, k, sigma, model).exceeds())
        .count();
    Ok(hits as f64 / n as f64)
}

/// Fraction of entries with `|g| ≤ tol`.
pub fn gradient_sparsity(g: &Tensor, tol: f64) -> Result<f64> {
    if !(tol >= 0.0) {
        return Err(Error::Domain(format!("sparsity tolerance must be >= 0 (got {tol})")));
    }
    if g.numel() == 0 {
        return Ok(0.0);
    }
    let small = g.data().iter().filter(|x| x.abs() <= tol).count();
    Ok(small as f64 / g.numel() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Distribution;
    use nalgebra::DMatrix;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::seeded_fill(shape, Distribution::Normal { mean: 0.0, std: 1.0 }, seed).unwrap()
    }

    fn svd_stable_rank(a: &Tensor) -> f64 {
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let s = DMatrix::from_row_slice(m, n, a.data()).singular_values();
        let max = s.max();
        s.iter().map(|x| x * x).sum::<f64>() / (max * max)
    }

    #[test]
    fn identity_and_rank_one() {
        for n in [1, 3, 8] {
            assert!((stable_rank(&Tensor::eye(n).unwrap()).unwrap() - n as f64).abs() < 1e-4);
        }
        let u = randn(&[6, 1], 1);
        let w = randn(&[1, 5], 2);
        assert!((stable_rank(&u.matmul(&w).unwrap()).unwrap() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn random_matches_svd_oracle() {
        for seed in 0..5 {
            let a = randn(&[20, 8], seed);
            let got = stable_rank(&a).unwrap();
            let want = svd_stable_rank(&a);
            assert!((got - want).abs() / want < 1e-3, "{got} vs {want}");
        }
    }

    #[test]
    fn zero_matrix_is_undefined() {
        assert!(matches!(stable_rank(&Tensor::zeros(&[3, 3]).unwrap()), Err(Error::Undefined(_))));
    }

    #[test]
    fn profile_bounds_and_baseline() {
        let z = randn(&[2, 3, 8], 4);
        let prof = subtoken_stable_rank_profile(&z, &[1, 2, 4, 8]).unwrap();
        for p in &prof {
            assert!(p.normalized > 0.0 && p.normalized <= 1.0 + 1e-9, "{p:?}");
        }
        let tokens = z.clone().reshape(vec![6, 8]).unwrap();
        let base = stable_rank(&tokens).unwrap() / 6.0;
        assert!((prof[3].normalized - base).abs() < 1e-12);
        assert!(subtoken_stable_rank_profile(&z, &[3]).is_err());
    }

    #[test]
    fn low_token_rank_has_higher_subtoken_rank() {
        // every token is a multiple of one depth vector
        let (b, n, d, m) = (2, 16, 16, 4);
        let w = randn(&[1, d], 9);
        let mut data = Vec::new();
        for bi in 0..b {
            let u = randn(&[n, 1], 20 + bi as u64);
            data.extend(u.matmul(&w).unwrap().into_data());
        }
        let z = Tensor::new(vec![b, n, d], data).unwrap();
        let prof = subtoken_stable_rank_profile(&z, &[m, d]).unwrap();
        let sub = Tensor::new(vec![b * n * d / m, m], z.data().to_vec()).unwrap();
        let tok = Tensor::new(vec![b * n, d], z.data().to_vec()).unwrap();
        let sub_oracle = svd_stable_rank(&sub) / m as f64;
        let tok_oracle = svd_stable_rank(&tok) / d as f64;
        assert!((prof[0].normalized - sub_oracle).abs() < 1e-6);
        assert!((prof[1].normalized - tok_oracle).abs() < 1e-6);
        assert!(sub_oracle > tok_oracle);
    }

    #[test]
    fn divergence_examples() {
        let v = [1.0, 0.0, 0.0];
        assert_eq!(similarity_divergence(&v, &v, &v), 0.0);
        let p = [0.0, 1.0, 0.0];
        assert_eq!(similarity_divergence(&p, &p, &v), 1.0);
        let zi = [0.3, -1.2, 0.5];
        let zj = [2.0, 0.1, -0.7];
        let s = 0.6f64.sqrt();
        let v = [s, 0.0, (1.0 - 0.6f64).sqrt()];
        // project both, then compare dot products
        let pi: Vec<f64> = v.iter().map(|x| x * (zi[0] * v[0] + zi[1] * v[1] + zi[2] * v[2])).collect();
        let pj: Vec<f64> = v.iter().map(|x| x * (zj[0] * v[0] + zj[1] * v[1] + zj[2] * v[2])).collect();
        let sim_p: f64 = pi.iter().zip(&pj).map(|(a, b)| a * b).sum();
        let sim: f64 = zi.iter().zip(&zj).map(|(a, b)| a * b).sum();
        assert!((similarity_divergence(&zi, &zj, &v) - (sim_p - sim).abs()).abs() < 1e-12);
    }

    #[test]
    fn normal_cdf_matches_statrs() {
        let oracle = Normal::new(0.0, 1.0).unwrap();
        let mut x = -40.0;
        while x <= 40.0 {
            assert!((normal_cdf(x) - oracle.cdf(x)).abs() < 1e-10, "x={x}");
            x += 0.037;
        }
        assert_eq!(normal_cdf(0.0), 0.5);
    }

    #[test]
    fn normal_cdf_matches_erfc_values() {
        // 0.5·erfc(−x/√2) in double precision
        let table = [
            (-8.0, 6.220960574271819e-16),
            (-3.666, 1.2318696202650537e-4),
            (-1.0, 0.15865525393145707),
            (1.0, 0.8413447460685429),
            (2.5, 0.9937903346742238),
        ];
        for (x, want) in table {
            let got = normal_cdf(x);
            assert!((got - want).abs() <= 1e-15_f64.max(want * 1e-12), "x={x}: {got} vs {want}");
        }
    }

    #[test]
    fn analytic_values_and_limits() {
        let oracle = Normal::new(0.0, 1.0).unwrap();
        let want = 2.0 * (1.0 - oracle.cdf(1.0));
        for sigma in [0.05, 0.1, 0.2, 1.0] {
            let got = divergence_probability_analytic(sigma * sigma, sigma).unwrap();
            assert!((got - want).abs() < 1e-10);
            assert!((got - 0.317_310_507_862_914_15).abs() < 1e-14);
            assert!((got - 0.31731).abs() < 1e-5);
        }
        assert!((divergence_probability_analytic(1e-30, 0.1).unwrap() - 1.0).abs() < 1e-12);
        assert!(divergence_probability_analytic(0.01, 1e-6).unwrap() < 1e-300);
        assert!(matches!(divergence_probability_analytic(0.0, 0.1), Err(Error::Domain(_))));
        assert!(matches!(divergence_probability_analytic(0.1, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn montecarlo_basics() {
        assert_eq!(divergence_probability_montecarlo(0.01, 0.0, 1000, 3).unwrap(), 0.0);
        let a = divergence_probability_montecarlo(0.01, 0.1, 5000, 3).unwrap();
        let b = divergence_probability_montecarlo(0.01, 0.1, 5000, 3).unwrap();
        assert_eq!(a, b);
        assert!(divergence_probability_montecarlo(0.01, 0.1, 0, 3).is_err());
    }

    #[test]
    fn first_order_montecarlo_tracks_analytic() {
        let n = 100_000;
        for sigma in [0.05, 0.1, 0.2] {
            for k in [sigma * sigma / 4.0, sigma * sigma, 4.0 * sigma * sigma] {
                let mc = divergence_probability_montecarlo_with(k, sigma, n, 11, DivergenceModel::FirstOrder).unwrap();
                let an = divergence_probability_analytic(k, sigma).unwrap();
                assert!((mc - an).abs() < 3.0 / (n as f64).sqrt(), "σ={sigma} k={k}: {mc} vs {an}");
            }
        }
    }

    #[test]
    fn exact_montecarlo_matches_product_of_sines_quadrature() {
        // in the 2-plane the exact divergence is |sin θ_i sin θ_j|; integrate
        // P(|sin X sin Y| > k) for X, Y ~ N(0, σ²) on a grid
        let (sigma, k) = (0.1, 0.01);
        let steps = 2000;
        let lim = 8.0 * sigma;
        let h = 2.0 * lim / steps as f64;
        let pdf = |x: f64| (-(x * x) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        let mut p = 0.0;
        for i in 0..steps {
            let x = -lim + (i as f64 + 0.5) * h;
            let sx = x.sin().abs();
            if sx <= k {
                continue;
            }
            // |sin y| > k / |sin x|  ⇔  |y| > asin(k/|sin x|) on this range
            let t = (k / sx).min(1.0).asin();
            let tail = 2.0 * (1.0 - normal_cdf(t / sigma));
            p += pdf(x) * h * tail;
        }
        let mc = divergence_probability_montecarlo(k, sigma, 100_000, 5).unwrap();
        assert!((mc - p).abs() < 3.0 / 100_000f64.sqrt(), "{mc} vs {p}");
    }

    #[test]
    fn sparsity() {
        assert_eq!(gradient_sparsity(&Tensor::zeros(&[3, 4]).unwrap(), 0.0).unwrap(), 1.0);
        assert_eq!(gradient_sparsity(&Tensor::ones(&[3, 4]).unwrap(), 0.5).unwrap(), 0.0);
        let g = Tensor::new(vec![4], vec![0.0, 1e-10, 0.5, -2.0]).unwrap();
        assert_eq!(gradient_sparsity(&g, 1e-9).unwrap(), 0.5);
    }
}
