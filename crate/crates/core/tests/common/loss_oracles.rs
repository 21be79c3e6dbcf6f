//! Direct formula evaluations of the training losses used as test oracles.

use partleak::autodiff::warp::Affine;
use partleak::autodiff::Tensor;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cos(a: &[f64], b: &[f64], eps: f64) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt() + eps)
}

/// Direct evaluation of the orthogonality terms from rows of `v`.
pub fn orth_oracle(v: &Tensor, parts: usize, eps: f64, legacy: bool) -> (f64, f64) {
    let rows: Vec<&[f64]> = (0..=parts).map(|i| v.row(i)).collect();
    if legacy {
        let mut s = 0.0;
        let mut n = 0.0;
        for i in 0..=parts {
            for j in 0..=parts {
                if i < j {
                    s += cos(rows[i], rows[j], eps).powi(2);
                    n += 1.0;
                }
            }
        }
        return (0.0, if n > 0.0 { s / n } else { 0.0 });
    }
    let bg = (0..parts).map(|k| cos(rows[parts], rows[k], eps).powi(2)).sum::<f64>() / parts as f64;
    if parts < 2 {
        return (bg, 0.0);
    }
    let d = v.last_dim();
    let mu: Vec<f64> = (0..d).map(|j| (0..parts).map(|k| rows[k][j]).sum::<f64>() / parts as f64).collect();
    let u: Vec<Vec<f64>> = (0..parts).map(|k| (0..d).map(|j| rows[k][j] - mu[j]).collect()).collect();
    let mut s = 0.0;
    for i in 0..parts {
        for j in 0..parts {
            if i != j {
                s += (dot(&u[i], &u[j]) / (dot(&u[i], &u[i]).sqrt() * dot(&u[j], &u[j]).sqrt() + eps)).powi(2);
            }
        }
    }
    (bg, s / (parts * (parts - 1)) as f64)
}

pub fn tv_oracle(a: &Tensor, grid: usize) -> f64 {
    let k = a.last_dim() - 1;
    let (mut s, mut n) = (0.0, 0.0);
    for c in 0..k {
        for r in 0..grid {
            for q in 0..grid {
                if q + 1 < grid {
                    s += (a.get2(r * grid + q + 1, c) - a.get2(r * grid + q, c)).abs();
                    n += 1.0;
                }
                if r + 1 < grid {
                    s += (a.get2((r + 1) * grid + q, c) - a.get2(r * grid + q, c)).abs();
                    n += 1.0;
                }
            }
        }
    }
    s / n
}

/// Bilinear sample of a token-major map at normalized coordinates, zero
/// outside, pixel centers at `(2j+1)/W - 1`.
pub fn sample(a: &Tensor, grid: usize, x: f64, y: f64, c: usize) -> f64 {
    let px = ((x + 1.0) * grid as f64 - 1.0) / 2.0;
    let py = ((y + 1.0) * grid as f64 - 1.0) / 2.0;
    let (x0, y0) = (px.floor(), py.floor());
    let mut s = 0.0;
    for (yy, wy) in [(y0, 1.0 - (py - y0)), (y0 + 1.0, py - y0)] {
        for (xx, wx) in [(x0, 1.0 - (px - x0)), (x0 + 1.0, px - x0)] {
            if xx >= 0.0 && yy >= 0.0 && (xx as usize) < grid && (yy as usize) < grid {
                s += wx * wy * a.get2(yy as usize * grid + xx as usize, c);
            }
        }
    }
    s
}

pub fn eq_oracle(a_t: &Tensor, a: &Tensor, grid: usize, theta: &Affine) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for i in 0..grid {
        for j in 0..grid {
            let xo = (2 * j + 1) as f64 / grid as f64 - 1.0;
            let yo = (2 * i + 1) as f64 / grid as f64 - 1.0;
            let xi = theta[0][0] * xo + theta[0][1] * yo + theta[0][2];
            let yi = theta[1][0] * xo + theta[1][1] * yo + theta[1][2];
            if xi.abs() > 1.0 || yi.abs() > 1.0 {
                continue;
            }
            for c in 0..a.last_dim() {
                s += (a_t.get2(i * grid + j, c) - sample(a, grid, xi, yi, c)).powi(2);
                n += 1.0;
            }
        }
    }
    if n == 0.0 {
        0.0
    } else {
        s / n
    }
}

/// Part vectors `[K+1][D]`: `v_k = (1/HW) Σ_i a_ik z_i`.
pub fn pool_oracle(a: &Tensor, z: &Tensor) -> Vec<Vec<f64>> {
    let (hw, k1, d) = (a.rows(), a.last_dim(), z.last_dim());
    (0..k1)
        .map(|k| (0..d).map(|j| (0..hw).map(|i| a.get2(i, k) * z.get2(i, j)).sum::<f64>() / hw as f64).collect())
        .collect()
}

/// Routed logit of one attribute row: `Σ_k softmax(s)_k s_k`.
pub fn route_oracle(scores: &[f64]) -> f64 {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|x| (x - m).exp()).sum();
    scores.iter().map(|x| (x - m).exp() / z * x).sum()
}

pub fn bce_oracle(logits: &[f64], labels: &[f64]) -> f64 {
    let sig = |t: f64| 1.0 / (1.0 + (-t).exp());
    logits.iter().zip(labels).map(|(&t, &y)| -(y * sig(t).ln() + (1.0 - y) * (1.0 - sig(t)).ln())).sum::<f64>()
        / logits.len() as f64
}

/// Mean per-row entropy (nats) of a row-stochastic map.
pub fn entropy_oracle(a: &Tensor) -> f64 {
    -a.data().iter().map(|p| if *p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>() / a.rows() as f64
}

/// `(1/C) Σ_c (1 - max over maps and rows of a_c)`.
pub fn presence_oracle(maps: &[Tensor]) -> f64 {
    let c = maps[0].last_dim();
    (0..c)
        .map(|k| 1.0 - maps.iter().flat_map(|a| (0..a.rows()).map(move |i| a.get2(i, k))).fold(0.0, f64::max))
        .sum::<f64>()
        / c as f64
}
