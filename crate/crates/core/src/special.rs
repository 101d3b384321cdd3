//! Normal-distribution special functions shared by the samplers and the
//! goodness-of-fit tests.

use statrs::function::erf::{erfc, erfc_inv};
use std::f64::consts::{PI, SQRT_2};

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Standard normal upper tail, `1 - Φ(x)`, accurate for large `x`.
pub fn norm_sf(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal quantile.
pub fn norm_ppf(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    -SQRT_2 * erfc_inv(2.0 * p)
}

/// Inverse hazard `φ(α) / (1 - Φ(α))`, the mean of a standard normal
/// truncated below at `α`.
pub fn inverse_mills(alpha: f64) -> f64 {
    if alpha > 30.0 {
        // Asymptotic expansion; the direct ratio underflows.
        let a2 = alpha * alpha;
        return alpha + 1.0 / alpha - 2.0 / (alpha * a2) + 10.0 / (alpha * a2 * a2);
    }
    norm_pdf(alpha) / norm_sf(alpha)
}

/// Quantile of the standard normal truncated below at `alpha`.
pub fn truncated_std_normal_ppf(alpha: f64, p: f64) -> f64 {
    if alpha > 0.0 {
        // Work in the upper tail to keep precision when Φ(α) ≈ 1.
        let tail = norm_sf(alpha) * (1.0 - p);
        -norm_ppf(tail)
    } else {
        let lo = norm_cdf(alpha);
        norm_ppf(lo + p * (1.0 - lo))
    }
}

/// CDF of the standard normal truncated below at `alpha`.
pub fn truncated_std_normal_cdf(alpha: f64, z: f64) -> f64 {
    if z <= alpha {
        return 0.0;
    }
    if alpha > 0.0 {
        1.0 - norm_sf(z) / norm_sf(alpha)
    } else {
        let lo = norm_cdf(alpha);
        (norm_cdf(z) - lo) / (1.0 - lo)
    }
}

const GL_NODES: [&[f64]; 3] = [
    &[0.9324695142031522, 0.6612093864662647, 0.238_619_186_083_197],
    &[
        0.9815606342467191,
        0.904_117_256_370_475,
        0.769_902_674_194_305,
        0.5873179542866171,
        0.3678314989981802,
        0.1252334085114692,
    ],
    &[
        0.9931285991850949,
        0.9639719272779138,
        0.912_234_428_251_326,
        0.8391169718222188,
        0.7463319064601508,
        0.636_053_680_726_515,
        0.5108670019508271,
        0.3737060887154196,
        0.2277858511416451,
        0.07652652113349733,
    ],
];

const GL_WEIGHTS: [&[f64]; 3] = [
    &[0.1713244923791705, 0.3607615730481384, 0.4679139345726904],
    &[
        0.04717533638651177,
        0.1069393259953183,
        0.1600783285433464,
        0.2031674267230659,
        0.2334925365383547,
        0.2491470458134029,
    ],
    &[
        0.01761400713915212,
        0.04060142980038694,
        0.06267204833410906,
        0.08327674157670475,
        0.1019301198172404,
        0.1181945319615184,
        0.1316886384491766,
        0.1420961093183821,
        0.1491729864726037,
        0.1527533871307259,
    ],
];

/// Upper bivariate normal probability `P(X > h, Y > k)` for standard
/// marginals with correlation `r` (Drezner–Wesolowsky with Genz's
/// Gauss–Legendre refinements).
pub fn bivariate_upper(h: f64, k: f64, r: f64) -> f64 {
    if h == f64::INFINITY || k == f64::INFINITY {
        return 0.0;
    }
    if h == f64::NEG_INFINITY {
        return if k == f64::NEG_INFINITY { 1.0 } else { norm_sf(k) };
    }
    if k == f64::NEG_INFINITY {
        return norm_sf(h);
    }
    let tp = 2.0 * PI;
    let ng = if r.abs() < 0.3 {
        0
    } else if r.abs() < 0.75 {
        1
    } else {
        2
    };
    let (xs_nodes, ws) = (GL_NODES[ng], GL_WEIGHTS[ng]);
    let mut hk = h * k;
    let mut bvn = 0.0;
    if r.abs() < 0.925 {
        let hs = (h * h + k * k) / 2.0;
        let asr = r.asin();
        for (&x, &w) in xs_nodes.iter().zip(ws) {
            for sign in [-1.0, 1.0] {
                let sn = (asr * (sign * x + 1.0) / 2.0).sin();
                bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
            }
        }
        return (bvn * asr / (2.0 * tp) + norm_sf(h) * norm_sf(k)).clamp(0.0, 1.0);
    }
    let mut bk = k;
    if r < 0.0 {
        bk = -bk;
        hk = -hk;
    }
    if r.abs() < 1.0 {
        let as_ = (1.0 - r) * (1.0 + r);
        let mut a = as_.sqrt();
        let bs = (h - bk).powi(2);
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 16.0;
        bvn = a
            * (-(bs / as_ + hk) / 2.0).exp()
            * (1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0);
        if hk > -160.0 {
            let b = bs.sqrt();
            bvn -= (-hk / 2.0).exp()
                * tp.sqrt()
                * norm_cdf(-b / a)
                * b
                * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
        }
        a /= 2.0;
        for (&x, &w) in xs_nodes.iter().zip(ws) {
            for sign in [-1.0, 1.0] {
                let xs = (a * (sign * x + 1.0)).powi(2);
                let rs = (1.0 - xs).sqrt();
                bvn += a
                    * w
                    * ((-bs / (2.0 * xs) - hk / (1.0 + rs)).exp() / rs
                        - (-(bs / xs + hk) / 2.0).exp() * (1.0 + c * xs * (1.0 + d * xs)));
            }
        }
        bvn = -bvn / tp;
    }
    if r > 0.0 {
        bvn += norm_sf(h.max(bk));
    } else {
        bvn = -bvn + (norm_sf(h) - norm_sf(bk)).max(0.0);
    }
    bvn.clamp(0.0, 1.0)
}
