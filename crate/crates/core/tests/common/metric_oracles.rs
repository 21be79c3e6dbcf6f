//! Brute-force metric implementations used as test oracles.

use std::collections::HashMap;

use partleak::metrics::Keypoint;

/// AP from explicit ranks: rank(i) = 1 + #{j : s_j > s_i or (s_j == s_i and j < i)}.
pub fn ap_oracle(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let rank = |i: usize| 1 + (0..scores.len()).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count();
    let pos: Vec<usize> = (0..scores.len()).filter(|&i| labels[i] == 1.0).collect();
    if pos.is_empty() {
        return None;
    }
    let total: f64 = pos
        .iter()
        .map(|&i| {
            let r = rank(i);
            let above = pos.iter().filter(|&&j| rank(j) <= r).count();
            above as f64 / r as f64
        })
        .sum();
    Some(total / pos.len() as f64)
}

pub fn ps_oracle(m: &[Vec<f64>], plus: &[Vec<usize>], minus: &[Vec<usize>]) -> (Vec<f64>, f64) {
    let mut per = Vec::new();
    for g in 0..plus.len() {
        let mut a = 0.0;
        for &k in &plus[g] {
            a += m[k][g];
        }
        let mut b = 0.0;
        for &k in &minus[g] {
            b += m[k][g];
        }
        per.push(a / plus[g].len() as f64 - b / minus[g].len() as f64);
    }
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    (per, mean)
}

/// Returns (numerators, denominators) of the contingency matrix.
pub fn contingency_oracle(kps: &[Vec<Keypoint>], masks: &[Vec<Vec<bool>>], groups: usize, grid: usize) -> (Vec<Vec<usize>>, Vec<usize>) {
    let parts = masks[0].len();
    let mut num = vec![vec![0; parts]; groups];
    let mut den = vec![0; groups];
    for g in 0..groups {
        for s in 0..kps.len() {
            if kps[s].iter().any(|k| k.visible && k.group == g) {
                den[g] += 1;
            }
            for k in 0..parts {
                if kps[s].iter().any(|p| p.visible && p.group == g && masks[s][k][p.row * grid + p.col]) {
                    num[g][k] += 1;
                }
            }
        }
    }
    (num, den)
}

pub fn mppo_oracle(
    logits: &[Vec<Vec<f64>>],
    labels: &[Vec<f64>],
    disc: &[Vec<Vec<bool>>],
    gt: &[Vec<Vec<bool>>],
    group_of: &[usize],
) -> Vec<Option<(usize, usize)>> {
    let mut out = Vec::new();
    for (a, &g) in group_of.iter().enumerate() {
        let (mut hits, mut n) = (0, 0);
        for s in 0..logits.len() {
            if labels[s][a] != 1.0 {
                continue;
            }
            n += 1;
            // first index attaining the maximum
            let mut best = 0;
            for k in 1..logits[s].len() {
                if logits[s][k][a] > logits[s][best][a] {
                    best = k;
                }
            }
            let mut overlap = false;
            for i in 0..disc[s][best].len() {
                overlap |= disc[s][best][i] && gt[s][g][i];
            }
            hits += overlap as usize;
        }
        out.push((n > 0).then_some((hits, n)));
    }
    out
}

pub fn comb2(n: usize) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// ARI from explicit pair enumeration.
pub fn ari_oracle(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut both, mut in_a, mut in_b) = (0usize, 0usize, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            let sa = a[i] == a[j];
            let sb = b[i] == b[j];
            both += (sa && sb) as usize;
            in_a += sa as usize;
            in_b += sb as usize;
        }
    }
    let total = comb2(n);
    let expected = in_a as f64 * in_b as f64 / total;
    let max = 0.5 * (in_a + in_b) as f64;
    (both as f64 - expected) / (max - expected)
}

pub fn nmi_oracle(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let mut pa: HashMap<usize, f64> = HashMap::new();
    let mut pb: HashMap<usize, f64> = HashMap::new();
    let mut pab: HashMap<(usize, usize), f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *pa.entry(x).or_default() += 1.0 / n;
        *pb.entry(y).or_default() += 1.0 / n;
        *pab.entry((x, y)).or_default() += 1.0 / n;
    }
    let h = |m: &HashMap<usize, f64>| -m.values().map(|p| p * p.ln()).sum::<f64>();
    let mi: f64 = pab.iter().map(|(&(x, y), &p)| p * (p / (pa[&x] * pb[&y])).ln()).sum();
    mi / ((h(&pa) + h(&pb)) / 2.0)
}
