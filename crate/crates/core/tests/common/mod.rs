//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

pub mod gradcheck;

use ncd_core::net::NcdModel;
use ncd_core::synth::{PanelSpec, Raster, Rule, RuleSet, CONTEXT_PANELS};
use ncd_core::tensor::Tensor;

/// Brute-force verdict of one rule on a 3×3 grid of levels.
pub fn brute_rule(rule: Rule, grid: &[[u8; 3]; 3]) -> bool {
    let rows_ok = |f: &dyn Fn(u8, u8, u8) -> bool| grid.iter().all(|r| f(r[0], r[1], r[2]));
    match rule {
        Rule::Constant => rows_ok(&|a, b, c| a == b && b == c),
        Rule::Increase => rows_ok(&|a, b, c| i16::from(b) - i16::from(a) == 1 && i16::from(c) - i16::from(b) == 1),
        Rule::Decrease => rows_ok(&|a, b, c| i16::from(a) - i16::from(b) == 1 && i16::from(b) - i16::from(c) == 1),
        Rule::DistributeThree => {
            let mut counts = [[0u8; 5]; 3];
            for (r, row) in grid.iter().enumerate() {
                for &v in row {
                    counts[r][usize::from(v)] += 1;
                }
            }
            counts[0].iter().all(|&n| n <= 1) && counts[0].iter().sum::<u8>() == 3 && counts[1] == counts[0] && counts[2] == counts[0]
        }
    }
}

/// Levels of (shape, size, shade, number) read straight off the entities.
pub fn brute_levels(p: &PanelSpec) -> Option<[u8; 4]> {
    let e = p.entities.first()?;
    let same = p.entities.iter().all(|o| o.shape == e.shape && o.size == e.size && o.shade == e.shade);
    let cells_unique = {
        let mut c: Vec<u8> = p.entities.iter().map(|o| o.cell).collect();
        c.sort_unstable();
        c.dedup();
        c.len() == p.entities.len() && c.iter().all(|&x| x < 4)
    };
    let ranges = (1..=4).contains(&e.size) && (1..=4).contains(&e.shade);
    (same && cells_unique && ranges).then(|| [e.shape.level(), e.size, e.shade, p.entities.len() as u8])
}

pub fn brute_check(rows: &[[&PanelSpec; 3]; 3], rules: &RuleSet) -> bool {
    let mut grids = [[[0u8; 3]; 3]; 4];
    for (r, row) in rows.iter().enumerate() {
        for (c, p) in row.iter().enumerate() {
            let Some(l) = brute_levels(p) else { return false };
            for a in 0..4 {
                grids[a][r][c] = l[a];
            }
        }
    }
    (0..4).all(|a| brute_rule(rules.rules[a], &grids[a]))
}

/// Per-candidate verdicts of the brute-force checker.
pub fn brute_verdicts(specs: &[PanelSpec], rules: &RuleSet) -> [bool; 8] {
    let mut out = [false; 8];
    for (c, v) in out.iter_mut().enumerate() {
        let rows =
            [[&specs[0], &specs[1], &specs[2]], [&specs[3], &specs[4], &specs[5]], [&specs[6], &specs[7], &specs[CONTEXT_PANELS + c]]];
        *v = brute_check(&rows, rules);
    }
    out
}

/// Loop-nest convolution in f64: `x [N,C,H,W]`, `k [O,C,KH,KW]`, `b [O]`.
pub fn naive_conv(x: &[f64], xs: [usize; 4], k: &[f64], ks: [usize; 4], b: &[f64], stride: usize, pad: usize) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = xs;
    let [o, _, kh, kw] = ks;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xo * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((ni * c + ci) * h + iy as usize) * w + ix as usize] * k[((oi * c + ci) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (out, [n, o, oh, ow])
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

/// Straight-line forward pass of one problem's ten row-matrixed rows,
/// dropout off, in f64.
pub fn naive_logits(model: &NcdModel, panels: &[Raster]) -> [f64; 10] {
    let p = &model.params.tensors;
    let s = usize::from(panels[0].size);
    let rows: Vec<[usize; 3]> = (0..10)
        .map(|j| match j {
            0 => [0, 1, 2],
            1 => [3, 4, 5],
            _ => [6, 7, 6 + j],
        })
        .collect();
    let mut feats = Vec::new();
    for row in &rows {
        let mut x: Vec<f64> = row.iter().flat_map(|&i| panels[i].pixels.iter().map(|&px| (255.0 - f64::from(px)) / 255.0)).collect();
        let mut shape = [1, 3, s, s];
        for layer in 0..3 {
            let k = &p[2 * layer];
            let ks: [usize; 4] = k.shape().try_into().unwrap();
            let (y, ys) = naive_conv(&x, shape, &to_f64(k), ks, &to_f64(&p[2 * layer + 1]), 1, 0);
            let y: Vec<f64> = y.into_iter().map(|v| v.max(0.0)).collect();
            let [_, c, h, w] = ys;
            if layer < 2 {
                let (oh, ow) = (h / 2, w / 2);
                let mut pooled = vec![0.0; c * oh * ow];
                for ci in 0..c {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let at = |dy: usize, dx: usize| y[(ci * h + 2 * yy + dy) * w + 2 * xx + dx];
                            pooled[(ci * oh + yy) * ow + xx] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
                        }
                    }
                }
                x = pooled;
                shape = [1, c, oh, ow];
            } else {
                x = (0..c).map(|ci| y[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() / (h * w) as f64).collect();
            }
        }
        feats.push(x);
    }
    let d = feats[0].len();
    if model.config.decentralize {
        let centroid: Vec<f64> = (0..d).map(|i| (feats[0][i] + feats[1][i]) / 2.0).collect();
        for f in &mut feats {
            for (v, c) in f.iter_mut().zip(&centroid) {
                *v -= c;
            }
        }
    }
    let w = to_f64(&p[6]);
    let b = f64::from(p[7].data()[0]);
    let mut out = [0.0; 10];
    for (o, f) in out.iter_mut().zip(&feats) {
        *o = f.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
    }
    out
}

/// Unfused binary cross-entropy, summed over a row.
pub fn unfused_bce(logits: &[f64], targets: &[f64]) -> f64 {
    logits
        .iter()
        .zip(targets)
        .map(|(&x, &y)| {
            let s = 1.0 / (1.0 + (-x).exp());
            -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
        })
        .sum()
}
