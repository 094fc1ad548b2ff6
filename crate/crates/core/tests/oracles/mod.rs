//! Independent reference implementations shared by the integration tests
//! and the acceptance harness. Written for obviousness, not speed.
#![allow(dead_code)]

use anticipate::datastore::{BoxXyxy, DetectionRecord};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Selection by repeated linear scans for the best remaining detection.
pub fn filter_oracle(dets: &[DetectionRecord], threshold: f64, n_obj: usize) -> Vec<Option<u32>> {
    let mut out = vec![None];
    let mut used = vec![false; dets.len()];
    while out.len() < n_obj {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if used[i] || dets[i].score < threshold {
                continue;
            }
            let better = match best {
                None => true,
                Some(j) => {
                    let (a, b) = (&dets[i], &dets[j]);
                    if a.score != b.score {
                        a.score > b.score
                    } else if a.bbox.area() != b.bbox.area() {
                        a.bbox.area() > b.bbox.area()
                    } else {
                        a.bbox.x1 < b.bbox.x1
                    }
                }
            };
            if better {
                best = Some(i);
            }
        }
        match best {
            Some(i) => {
                used[i] = true;
                out.push(Some(dets[i].category_idx));
            }
            None => break,
        }
    }
    out
}

/// Both clauses written out per axis.
pub fn crop_oracle(b: &BoxXyxy, w: f64, h: f64) -> [f64; 4] {
    let bw = b.x2 - b.x1;
    let bh = b.y2 - b.y1;
    let mut side = if bw > bh { bw } else { bh };
    let short = if w < h { w } else { h };
    if side > short {
        side = short;
    }
    let mut x1 = (b.x1 + b.x2) / 2.0 - side / 2.0;
    let mut y1 = (b.y1 + b.y2) / 2.0 - side / 2.0;
    if x1 + side > w {
        x1 = w - side;
    }
    if x1 < 0.0 {
        x1 = 0.0;
    }
    if y1 + side > h {
        y1 = h - side;
    }
    if y1 < 0.0 {
        y1 = 0.0;
    }
    [x1, y1, x1 + side, y1 + side]
}

pub fn random_box(rng: &mut ChaCha8Rng, w: f64, h: f64, coarse: bool) -> BoxXyxy {
    loop {
        let mut c = |e: f64| {
            let v: f64 = rng.random::<f64>() * e;
            if coarse {
                v.round()
            } else {
                v
            }
        };
        let (a, b, c2, d) = (c(w), c(h), c(w), c(h));
        let bx = BoxXyxy::new(a.min(c2), b.min(d), a.max(c2), b.max(d));
        if bx.is_valid() {
            return bx;
        }
    }
}


/// Restricted Damerau-Levenshtein straight from its recursive definition.
pub fn dl_recursive<E: PartialEq>(a: &[E], b: &[E]) -> usize {
    let (i, j) = (a.len(), b.len());
    if i == 0 {
        return j;
    }
    if j == 0 {
        return i;
    }
    let mut best = dl_recursive(&a[..i - 1], b) + 1;
    best = best.min(dl_recursive(a, &b[..j - 1]) + 1);
    let sub = if a[i - 1] == b[j - 1] { 0 } else { 1 };
    best = best.min(dl_recursive(&a[..i - 1], &b[..j - 1]) + sub);
    if i > 1 && j > 1 && a[i - 1] == b[j - 2] && a[i - 2] == b[j - 1] {
        best = best.min(dl_recursive(&a[..i - 2], &b[..j - 2]) + 1);
    }
    best
}

/// Every sequence over `0..alphabet` of length `0..=max_len`.
pub fn all_sequences(alphabet: u8, max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..alphabet {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Rolling three-row OSA distance (a second, independent DP).
pub fn dl_rows<E: PartialEq>(a: &[E], b: &[E]) -> usize {
    let m = b.len();
    let mut prev2: Vec<usize> = vec![0; m + 1];
    let mut prev: Vec<usize> = (0..=m).collect();
    for i in 1..=a.len() {
        let mut cur = vec![i; m + 1];
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            let mut v = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
            if i > 1 && j > 1 && a[i - 1] == b[j - 2] && a[i - 2] == b[j - 1] {
                v = v.min(prev2[j - 2] + 1);
            }
            cur[j] = v;
        }
        prev2 = std::mem::replace(&mut prev, cur);
    }
    prev[m]
}

/// ED@z recomputed per candidate and field with explicit loops.
/// `field`: 0 = verb, 1 = noun, 2 = joint pair.
pub fn ed_at_z_oracle(candidates: &[Vec<(u32, u32)>], gt: &[(u32, u32)], z: usize, field: u8) -> f64 {
    let pick = |s: &[(u32, u32)]| -> Vec<(u32, u32)> {
        s[..z]
            .iter()
            .map(|(v, n)| match field {
                0 => (*v, 0),
                1 => (0, *n),
                _ => (*v, *n),
            })
            .collect()
    };
    let g = pick(gt);
    let mut best = usize::MAX;
    for c in candidates {
        let d = dl_rows(&pick(c), &g);
        if d < best {
            best = d;
        }
    }
    best as f64 / z as f64
}

/// Optimal k-means inertia by enumerating every labelling.
pub fn exhaustive_inertia(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let dim = points[0].len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut inertia = 0.0;
        for c in 0..k {
            let members: Vec<&Vec<f64>> =
                (0..n).filter(|i| labels[*i] == c).map(|i| &points[i]).collect();
            if members.is_empty() {
                continue;
            }
            for d in 0..dim {
                let mean = members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64;
                inertia += members.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>();
            }
        }
        best = best.min(inertia);
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}

/// Rollout by explicit triple loops: average heads, mix with identity,
/// renormalise over unmasked keys, multiply newest layer on the left.
pub fn rollout_oracle(layers: &[Vec<Vec<Vec<f64>>>], mask: &[bool]) -> Vec<Vec<f64>> {
    let l = mask.len();
    let mut acc: Option<Vec<Vec<f64>>> = None;
    for heads in layers {
        let mut m = vec![vec![0.0; l]; l];
        for i in 0..l {
            for j in 0..l {
                let mean = heads.iter().map(|h| h[i][j]).sum::<f64>() / heads.len() as f64;
                let eye = if i == j { 1.0 } else { 0.0 };
                m[i][j] = if mask[j] { 0.0 } else { 0.5 * mean + 0.5 * eye };
            }
            let s: f64 = m[i].iter().sum();
            if s > 0.0 {
                for j in 0..l {
                    m[i][j] /= s;
                }
            }
        }
        acc = Some(match acc {
            None => m,
            Some(prev) => {
                let mut out = vec![vec![0.0; l]; l];
                for i in 0..l {
                    for j in 0..l {
                        for t in 0..l {
                            out[i][j] += m[i][t] * prev[t][j];
                        }
                    }
                }
                out
            }
        });
    }
    acc.expect("at least one layer")
}

/// Random row-stochastic attention `[heads][L][L]` with zero weight on masked keys.
pub fn random_attention(rng: &mut ChaCha8Rng, heads: usize, mask: &[bool]) -> Vec<Vec<Vec<f64>>> {
    let l = mask.len();
    (0..heads)
        .map(|_| {
            (0..l)
                .map(|_| {
                    let w: Vec<f64> = mask
                        .iter()
                        .map(|m| if *m { 0.0 } else { rng.random::<f64>() + 1e-3 })
                        .collect();
                    let s: f64 = w.iter().sum();
                    w.into_iter().map(|v| v / s).collect()
                })
                .collect()
        })
        .collect()
}
