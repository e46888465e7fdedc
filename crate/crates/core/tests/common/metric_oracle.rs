//! Brute-force metric definitions: linear scans and explicit loops, no maps.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const WORDS: [&str; 6] = ["a", "b", "c", "d", "e", "f"];

pub fn sentence(rng: &mut ChaCha8Rng) -> Vec<&'static str> {
    let n = rng.gen_range(0..=5);
    (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect()
}

pub fn corpus(rng: &mut ChaCha8Rng) -> (Vec<Vec<&'static str>>, Vec<Vec<&'static str>>) {
    let n = rng.gen_range(1..=6);
    (0..n).map(|_| (sentence(rng), sentence(rng))).unzip()
}

pub fn occurrences(s: &[&str], gram: &[&str]) -> usize {
    if s.len() < gram.len() {
        return 0;
    }
    (0..=s.len() - gram.len())
        .filter(|&i| s[i..i + gram.len()] == *gram)
        .count()
}

/// Brute-force corpus BLEU: for every distinct candidate n-gram (found by a
/// linear scan of earlier positions) add min(count in candidate, count in
/// reference).
pub fn bleu_oracle(cands: &[Vec<&str>], refs: &[Vec<&str>], n: usize) -> f64 {
    let c_len: usize = cands.iter().map(|c| c.len()).sum();
    let r_len: usize = refs.iter().map(|r| r.len()).sum();
    if c_len == 0 {
        return 0.0;
    }
    let mut product = 1.0;
    for k in 1..=n {
        let mut matched = 0;
        let mut total = 0;
        for (c, r) in cands.iter().zip(refs) {
            if c.len() < k {
                continue;
            }
            total += c.len() - k + 1;
            for i in 0..=c.len() - k {
                let g = &c[i..i + k];
                let seen_before = (0..i).any(|j| c[j..j + k] == *g);
                if !seen_before {
                    matched += occurrences(c, g).min(occurrences(r, g));
                }
            }
        }
        if matched == 0 {
            return 0.0;
        }
        product *= matched as f64 / total as f64;
    }
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    bp * product.powf(1.0 / n as f64)
}

pub fn distinct_oracle(cands: &[Vec<&str>], n: usize) -> Option<f64> {
    let mut all: Vec<&[&str]> = Vec::new();
    for c in cands {
        if c.len() >= n {
            for i in 0..=c.len() - n {
                all.push(&c[i..i + n]);
            }
        }
    }
    if all.is_empty() {
        return None;
    }
    let unique = (0..all.len())
        .filter(|&i| !(0..i).any(|j| all[j] == all[i]))
        .count();
    Some(unique as f64 / all.len() as f64)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

pub fn embedding_oracle(
    cands: &[Vec<&str>],
    refs: &[Vec<&str>],
    table: &[(&str, Vec<f64>)],
) -> Option<(f64, f64, f64, usize)> {
    let vecs = |s: &[&str]| -> Vec<Vec<f64>> {
        s.iter()
            .filter_map(|w| table.iter().find(|(k, _)| k == w).map(|(_, v)| v.clone()))
            .collect()
    };
    let dim = table[0].1.len();
    let mean = |vs: &[Vec<f64>]| -> Vec<f64> {
        (0..dim)
            .map(|d| vs.iter().map(|v| v[d]).sum::<f64>() / vs.len() as f64)
            .collect()
    };
    let extreme = |vs: &[Vec<f64>]| -> Vec<f64> {
        (0..dim)
            .map(|d| {
                let mut best = vs[0][d];
                for v in vs {
                    if v[d].abs() > best.abs() || (v[d].abs() == best.abs() && v[d] > best) {
                        best = v[d];
                    }
                }
                best
            })
            .collect()
    };
    let greedy = |x: &[Vec<f64>], y: &[Vec<f64>]| -> f64 {
        let mut s = 0.0;
        for a in x {
            let mut best = f64::NEG_INFINITY;
            for b in y {
                best = best.max(cos(a, b));
            }
            s += best;
        }
        s / x.len() as f64
    };
    let (mut avg, mut ext, mut gre, mut used) = (0.0, 0.0, 0.0, 0);
    for (c, r) in cands.iter().zip(refs) {
        let (cv, rv) = (vecs(c), vecs(r));
        if cv.is_empty() || rv.is_empty() {
            continue;
        }
        avg += cos(&mean(&cv), &mean(&rv));
        ext += cos(&extreme(&cv), &extreme(&rv));
        gre += 0.5 * (greedy(&cv, &rv) + greedy(&rv, &cv));
        used += 1;
    }
    (used > 0).then(|| {
        let n = used as f64;
        (avg / n, ext / n, gre / n, used)
    })
}
