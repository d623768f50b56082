//! Layer normalization for complex activations.
//!
//! Each token's features are treated as samples of a 2-d real variable
//! (re, im): the layer centers them, whitens with the inverse square root of
//! the 2x2 covariance (ridged by `eps`), then recolors with a learnable SPD
//! matrix zeta^(1/2) and shifts by a complex beta. Zeta is materialized from
//! unconstrained parameters so it stays positive definite for any setting:
//!
//!   a = softplus(alpha) + e',  c = softplus(gamma) + e',
//!   b = tanh(delta) * sqrt(a*c) * (1 - e')
//!
//! with e' a small floor. A plain real layer norm (same per-token, population
//! statistics) is provided for the real-valued baseline model.

use crate::ctensor::{CTensor, Spd2};
use crate::error::{CvError, Result};
use crate::scalar::Scalar;

/// Floor used by the zeta materialization.
pub const MATERIALIZE_EPS: f64 = 1e-6;

pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln()
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Inverse of softplus: ln(e^y - 1), for y > 0.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Materialize one SPD zeta from unconstrained (alpha, gamma, delta).
pub fn materialize_zeta<T: Scalar>(alpha: T, gamma: T, delta: T) -> Spd2<T> {
    let ep = T::from_f64(MATERIALIZE_EPS);
    let a = softplus(alpha) + ep;
    let c = softplus(gamma) + ep;
    let b = delta.tanh() * (a * c).sqrt() * (T::one() - ep);
    Spd2 { a, b, c }
}

/// Parameter values that materialize zeta = I (with delta = 0 so b = 0).
pub fn identity_zeta_param() -> f64 {
    softplus_inv(1.0 - MATERIALIZE_EPS)
}

/// Per-token statistics saved by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct LnCache<T> {
    stride: usize,
    data: Vec<T>,
}

const CSTRIDE: usize = 8; // suu, suv, svv, w11, w12, w22, mu_u, mu_v
const RSTRIDE: usize = 2; // mu, inv_sigma

fn param_slots(context: &'static str, n_features: usize, lens: &[usize]) -> Result<usize> {
    let k = lens[0];
    if lens.iter().any(|&l| l != k) || (k != 1 && k != n_features) {
        return Err(CvError::ShapeMismatch {
            context,
            expected: format!("parameter lengths all 1 or all {n_features}"),
            got: format!("{lens:?}"),
        });
    }
    Ok(k)
}

/// Per-token first and second moments of the real/imaginary pair, treated as
/// a bivariate sample over the feature axis. Returns, for each row of `x`,
/// the complex mean and the population covariance entries (suu, suv, svv).
pub fn complex_stats<T: Scalar>(x: &CTensor<T>) -> Result<(CTensor<T>, Vec<[T; 3]>)> {
    let (tokens, n) = (x.rows(), x.cols());
    if n < 2 {
        return Err(CvError::InvalidArgument(
            "complex stats need at least 2 features per token".into(),
        ));
    }
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut means = CTensor::zeros(&[tokens, 1]);
    let mut covs = Vec::with_capacity(tokens);
    for i in 0..tokens {
        let row = i * n;
        let mut mu_u = T::zero();
        let mut mu_v = T::zero();
        for j in 0..n {
            mu_u += x.re()[row + j];
            mu_v += x.im()[row + j];
        }
        mu_u *= inv_n;
        mu_v *= inv_n;
        let mut s = [T::zero(); 3];
        for j in 0..n {
            let p = x.re()[row + j] - mu_u;
            let q = x.im()[row + j] - mu_v;
            s[0] += p * p;
            s[1] += p * q;
            s[2] += q * q;
        }
        means.re_mut()[i] = mu_u;
        means.im_mut()[i] = mu_v;
        covs.push([s[0] * inv_n, s[1] * inv_n, s[2] * inv_n]);
    }
    Ok((means, covs))
}

/// Whiten-and-recolor forward pass over a (tokens x features) tensor.
pub fn complex_ln_forward<T: Scalar>(
    x: &CTensor<T>,
    alpha: &CTensor<T>,
    gamma: &CTensor<T>,
    delta: &CTensor<T>,
    beta: &CTensor<T>,
    eps: T,
) -> Result<(CTensor<T>, LnCache<T>)> {
    let (tokens, n) = (x.rows(), x.cols());
    let k = param_slots(
        "complex layer norm params",
        n,
        &[alpha.len(), gamma.len(), delta.len(), beta.len()],
    )?;
    if n < 2 {
        return Err(CvError::InvalidArgument(
            "complex layer norm needs at least 2 features".into(),
        ));
    }
    // recoloring matrices, one per parameter slot
    let zs: Vec<Spd2<T>> = (0..k)
        .map(|j| materialize_zeta(alpha.re()[j], gamma.re()[j], delta.re()[j]).sqrt())
        .collect();

    let inv_n = T::one() / T::from_f64(n as f64);
    let mut out = CTensor::zeros(&[tokens, n]);
    let mut cache = LnCache {
        stride: CSTRIDE,
        data: vec![T::zero(); tokens * CSTRIDE],
    };
    for i in 0..tokens {
        let row = i * n;
        let mut mu_u = T::zero();
        let mut mu_v = T::zero();
        for j in 0..n {
            mu_u = mu_u + x.re()[row + j];
            mu_v = mu_v + x.im()[row + j];
        }
        mu_u = mu_u * inv_n;
        mu_v = mu_v * inv_n;
        let mut suu = T::zero();
        let mut suv = T::zero();
        let mut svv = T::zero();
        for j in 0..n {
            let p = x.re()[row + j] - mu_u;
            let q = x.im()[row + j] - mu_v;
            suu = suu + p * p;
            suv = suv + p * q;
            svv = svv + q * q;
        }
        suu = suu * inv_n;
        suv = suv * inv_n;
        svv = svv * inv_n;
        let w = Spd2 {
            a: suu + eps,
            b: suv,
            c: svv + eps,
        }
        .inv_sqrt();
        let c = &mut cache.data[i * CSTRIDE..(i + 1) * CSTRIDE];
        c.copy_from_slice(&[suu, suv, svv, w.a, w.b, w.c, mu_u, mu_v]);
        for j in 0..n {
            let p = x.re()[row + j] - mu_u;
            let q = x.im()[row + j] - mu_v;
            let r = w.a * p + w.b * q;
            let s = w.b * p + w.c * q;
            let z = &zs[if k == 1 { 0 } else { j }];
            let bi = if k == 1 { 0 } else { j };
            out.re_mut()[row + j] = z.a * r + z.b * s + beta.re()[bi];
            out.im_mut()[row + j] = z.b * r + z.c * s + beta.im()[bi];
        }
    }
    Ok((out, cache))
}

/// Gradients of [`complex_ln_forward`] with respect to input and parameters.
#[derive(Debug)]
pub struct ComplexLnGrads<T> {
    pub gx: CTensor<T>,
    pub galpha: CTensor<T>,
    pub ggamma: CTensor<T>,
    pub gdelta: CTensor<T>,
    pub gbeta: CTensor<T>,
}

pub fn complex_ln_backward<T: Scalar>(
    x: &CTensor<T>,
    alpha: &CTensor<T>,
    gamma: &CTensor<T>,
    delta: &CTensor<T>,
    eps: T,
    cache: &LnCache<T>,
    g: &CTensor<T>,
) -> Result<ComplexLnGrads<T>> {
    debug_assert_eq!(cache.stride, CSTRIDE);
    let (tokens, n) = (x.rows(), x.cols());
    let k = alpha.len();
    let inv_n = T::one() / T::from_f64(n as f64);
    let two = T::from_f64(2.0);

    let zetas: Vec<Spd2<T>> = (0..k)
        .map(|j| materialize_zeta(alpha.re()[j], gamma.re()[j], delta.re()[j]))
        .collect();
    let zs: Vec<(Spd2<T>, [[T; 3]; 3])> = zetas.iter().map(|z| z.sqrt_jacobian()).collect();

    let mut gx = CTensor::zeros(&[tokens, n]);
    let mut dz = vec![[T::zero(); 3]; k]; // dL/d(z11, z12, z22) per slot
    let mut gbeta = CTensor::zeros(&[k]);

    let mut dp = vec![T::zero(); n];
    let mut dq = vec![T::zero(); n];
    for i in 0..tokens {
        let row = i * n;
        let c = &cache.data[i * CSTRIDE..(i + 1) * CSTRIDE];
        let (suu, suv, svv, w11, w12, w22, mu_u, mu_v) =
            (c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]);

        let mut dw = [T::zero(); 3]; // dL/d(w11, w12, w22)
        for j in 0..n {
            let p = x.re()[row + j] - mu_u;
            let q = x.im()[row + j] - mu_v;
            let r = w11 * p + w12 * q;
            let s = w12 * p + w22 * q;
            let (gr, gi) = (g.re()[row + j], g.im()[row + j]);
            let slot = if k == 1 { 0 } else { j };
            let z = &zs[slot].0;
            // recoloring: out = Z * (r, s) + beta
            dz[slot][0] = dz[slot][0] + gr * r;
            dz[slot][1] = dz[slot][1] + gr * s + gi * r;
            dz[slot][2] = dz[slot][2] + gi * s;
            gbeta.re_mut()[slot] = gbeta.re()[slot] + gr;
            gbeta.im_mut()[slot] = gbeta.im()[slot] + gi;
            let dr = z.a * gr + z.b * gi;
            let ds = z.b * gr + z.c * gi;
            // whitening application: direct path plus covariance accumulators
            dw[0] = dw[0] + dr * p;
            dw[1] = dw[1] + dr * q + ds * p;
            dw[2] = dw[2] + ds * q;
            dp[j] = w11 * dr + w12 * ds;
            dq[j] = w12 * dr + w22 * ds;
        }
        // chain through W = (C + eps I)^(-1/2)
        let cmat = Spd2 {
            a: suu + eps,
            b: suv,
            c: svv + eps,
        };
        let (_, jw) = cmat.inv_sqrt_jacobian();
        let mut dcov = [T::zero(); 3]; // dL/d(suu, suv, svv)
        for kk in 0..3 {
            dcov[kk] = jw[0][kk] * dw[0] + jw[1][kk] * dw[1] + jw[2][kk] * dw[2];
        }
        // stats paths, then centering
        let mut mean_dp = T::zero();
        let mut mean_dq = T::zero();
        for j in 0..n {
            let p = x.re()[row + j] - mu_u;
            let q = x.im()[row + j] - mu_v;
            dp[j] = dp[j] + (two * p * dcov[0] + q * dcov[1]) * inv_n;
            dq[j] = dq[j] + (p * dcov[1] + two * q * dcov[2]) * inv_n;
            mean_dp = mean_dp + dp[j];
            mean_dq = mean_dq + dq[j];
        }
        mean_dp = mean_dp * inv_n;
        mean_dq = mean_dq * inv_n;
        for j in 0..n {
            gx.re_mut()[row + j] = dp[j] - mean_dp;
            gx.im_mut()[row + j] = dq[j] - mean_dq;
        }
    }

    // chain dL/dZ through the zeta square root and the materialization
    let ep = T::from_f64(MATERIALIZE_EPS);
    let mut galpha = CTensor::zeros(&[k]);
    let mut ggamma = CTensor::zeros(&[k]);
    let mut gdelta = CTensor::zeros(&[k]);
    for slot in 0..k {
        let jz = &zs[slot].1;
        let mut dzeta = [T::zero(); 3]; // dL/d(a, b, c)
        for kk in 0..3 {
            dzeta[kk] = jz[0][kk] * dz[slot][0] + jz[1][kk] * dz[slot][1] + jz[2][kk] * dz[slot][2];
        }
        let zeta = &zetas[slot];
        let (a, b, c) = (zeta.a, zeta.b, zeta.c);
        let d = delta.re()[slot];
        let th = d.tanh();
        // b = tanh(delta) sqrt(ac) (1 - e'): db/da = b/(2a), db/dc = b/(2c)
        galpha.re_mut()[slot] = (dzeta[0] + dzeta[1] * b / (two * a)) * sigmoid(alpha.re()[slot]);
        ggamma.re_mut()[slot] = (dzeta[2] + dzeta[1] * b / (two * c)) * sigmoid(gamma.re()[slot]);
        gdelta.re_mut()[slot] =
            dzeta[1] * (T::one() - th * th) * (a * c).sqrt() * (T::one() - ep);
    }
    Ok(ComplexLnGrads {
        gx,
        galpha,
        ggamma,
        gdelta,
        gbeta,
    })
}

/// Standard per-token layer norm over the real component, for the real
/// baseline model. Input and output carry zero imaginary parts.
pub fn real_ln_forward<T: Scalar>(
    x: &CTensor<T>,
    gamma: &CTensor<T>,
    beta: &CTensor<T>,
    eps: T,
) -> Result<(CTensor<T>, LnCache<T>)> {
    let (tokens, n) = (x.rows(), x.cols());
    let k = param_slots("real layer norm params", n, &[gamma.len(), beta.len()])?;
    debug_assert!(x.max_abs_im() == T::zero(), "real layer norm expects a real tensor");
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut out = CTensor::zeros(&[tokens, n]);
    let mut cache = LnCache {
        stride: RSTRIDE,
        data: vec![T::zero(); tokens * RSTRIDE],
    };
    for i in 0..tokens {
        let row = i * n;
        let mut mu = T::zero();
        for j in 0..n {
            mu = mu + x.re()[row + j];
        }
        mu = mu * inv_n;
        let mut var = T::zero();
        for j in 0..n {
            let d = x.re()[row + j] - mu;
            var = var + d * d;
        }
        var = var * inv_n;
        let inv_sigma = T::one() / (var + eps).sqrt();
        cache.data[i * RSTRIDE] = mu;
        cache.data[i * RSTRIDE + 1] = inv_sigma;
        for j in 0..n {
            let slot = if k == 1 { 0 } else { j };
            let xhat = (x.re()[row + j] - mu) * inv_sigma;
            out.re_mut()[row + j] = gamma.re()[slot] * xhat + beta.re()[slot];
        }
    }
    Ok((out, cache))
}

pub fn real_ln_backward<T: Scalar>(
    x: &CTensor<T>,
    gamma: &CTensor<T>,
    eps: T,
    cache: &LnCache<T>,
    g: &CTensor<T>,
) -> Result<(CTensor<T>, CTensor<T>, CTensor<T>)> {
    let _ = eps;
    debug_assert_eq!(cache.stride, RSTRIDE);
    let (tokens, n) = (x.rows(), x.cols());
    let k = gamma.len();
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut gx = CTensor::zeros(&[tokens, n]);
    let mut ggamma = CTensor::zeros(&[k]);
    let mut gbeta = CTensor::zeros(&[k]);
    let mut h = vec![T::zero(); n];
    let mut xhat = vec![T::zero(); n];
    for i in 0..tokens {
        let row = i * n;
        let mu = cache.data[i * RSTRIDE];
        let inv_sigma = cache.data[i * RSTRIDE + 1];
        let mut mean_h = T::zero();
        let mut mean_hx = T::zero();
        for j in 0..n {
            let slot = if k == 1 { 0 } else { j };
            xhat[j] = (x.re()[row + j] - mu) * inv_sigma;
            h[j] = gamma.re()[slot] * g.re()[row + j];
            mean_h = mean_h + h[j];
            mean_hx = mean_hx + h[j] * xhat[j];
            ggamma.re_mut()[slot] = ggamma.re()[slot] + g.re()[row + j] * xhat[j];
            gbeta.re_mut()[slot] = gbeta.re()[slot] + g.re()[row + j];
        }
        mean_h = mean_h * inv_n;
        mean_hx = mean_hx * inv_n;
        for j in 0..n {
            gx.re_mut()[row + j] = (h[j] - mean_h - xhat[j] * mean_hx) * inv_sigma;
        }
    }
    Ok((gx, ggamma, gbeta))
}
