//! Independent reference implementations used by the integration tests.
//! Deliberately naive: hash sets, exhaustive pair loops, plain f64 sums.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

use nuclei_fusion::synth::{generate_scene, SynthConfig};
use nuclei_fusion::{ClassId, LabeledScene};

pub const SEMANTIC_WEIGHTS: [f64; 6] = [2.0, 1.0, 1.0, 2.0, 2.0, 1.0];
pub const INSTANCE_WEIGHTS: [f64; 6] = [1.5; 6];

#[derive(Debug, Clone)]
pub struct Blob {
    pub pixels: HashSet<(u32, u32)>,
    pub class: u8,
}

impl Blob {
    /// Half-open box `(x0, y0, x1, y1)`.
    pub fn bbox(&self) -> (u32, u32, u32, u32) {
        let x0 = self.pixels.iter().map(|p| p.0).min().unwrap();
        let y0 = self.pixels.iter().map(|p| p.1).min().unwrap();
        let x1 = self.pixels.iter().map(|p| p.0).max().unwrap() + 1;
        let y1 = self.pixels.iter().map(|p| p.1).max().unwrap() + 1;
        (x0, y0, x1, y1)
    }
}

/// Instances of a raster keyed by id, each labelled by its most frequent
/// class (lowest class on ties).
pub fn blobs(scene: &LabeledScene) -> BTreeMap<u32, Blob> {
    let mut acc: BTreeMap<u32, (HashSet<(u32, u32)>, [u64; 7])> = BTreeMap::new();
    for y in 0..scene.height() {
        for x in 0..scene.width() {
            let id = scene.instance_at(x, y);
            if id == 0 {
                continue;
            }
            let e = acc.entry(id).or_default();
            e.0.insert((x, y));
            e.1[scene.class_at(x, y).value() as usize] += 1;
        }
    }
    acc.into_iter()
        .map(|(id, (pixels, hist))| {
            let mut class = 1;
            for c in 1..7 {
                if hist[c] > hist[class] {
                    class = c;
                }
            }
            (id, Blob { pixels, class: class as u8 })
        })
        .collect()
}

pub fn box_iou(a: (u32, u32, u32, u32), b: (u32, u32, u32, u32)) -> f64 {
    let area = |r: (u32, u32, u32, u32)| (r.2 - r.0) as u64 * (r.3 - r.1) as u64;
    let iw = a.2.min(b.2).saturating_sub(a.0.max(b.0)) as u64;
    let ih = a.3.min(b.3).saturating_sub(a.1.max(b.1)) as u64;
    let inter = iw * ih;
    inter as f64 / (area(a) + area(b) - inter) as f64
}

pub fn pixel_iou(a: &HashSet<(u32, u32)>, b: &HashSet<(u32, u32)>) -> f64 {
    let inter = a.intersection(b).count();
    inter as f64 / (a.len() + b.len() - inter) as f64
}

/// Weighted vote from a table lookup; ties prefer a semantic member's
/// label, then the lower class.
pub fn table_vote(members: &[(u8, bool)], semantic_w: &[f64; 6], instance_w: &[f64; 6]) -> u8 {
    let mut score = [0.0f64; 7];
    for &(c, is_sem) in members {
        score[c as usize] += if is_sem {
            semantic_w[c as usize - 1]
        } else {
            instance_w[c as usize - 1]
        };
    }
    let best = score[1..].iter().cloned().fold(f64::MIN, f64::max);
    let tied: Vec<u8> = (1..7u8).filter(|&c| score[c as usize] == best).collect();
    tied.iter()
        .copied()
        .find(|c| members.iter().any(|&(l, s)| s && l == *c))
        .unwrap_or(tied[0])
}

/// Reference fusion: every cross pair is tested, groups are closed
/// transitively by repeated sweeps, and regions are painted in
/// (box, row-major pixels, label) order with first writer winning.
pub fn brute_fuse(sem: &LabeledScene, inst: &LabeledScene, threshold: f64) -> LabeledScene {
    let (w, h) = sem.dims();
    let mut nodes: Vec<(Blob, bool)> = blobs(sem).into_values().map(|b| (b, true)).collect();
    nodes.extend(blobs(inst).into_values().map(|b| (b, false)));
    let n = nodes.len();
    let mut edge = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            if nodes[i].1 && !nodes[j].1 && box_iou(nodes[i].0.bbox(), nodes[j].0.bbox()) >= threshold {
                edge[i][j] = true;
                edge[j][i] = true;
            }
        }
    }
    let mut comp: Vec<usize> = (0..n).collect();
    loop {
        let mut changed = false;
        for i in 0..n {
            for j in 0..n {
                if edge[i][j] && comp[i] != comp[j] {
                    let m = comp[i].min(comp[j]);
                    comp[i] = m;
                    comp[j] = m;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut regions: Vec<(HashSet<(u32, u32)>, u8)> = Vec::new();
    for root in 0..n {
        let members: Vec<usize> = (0..n).filter(|&k| comp[k] == root).collect();
        if members.is_empty() {
            continue;
        }
        let pixels: HashSet<(u32, u32)> = members.iter().flat_map(|&k| nodes[k].0.pixels.iter().copied()).collect();
        let class = if members.len() == 1 {
            nodes[members[0]].0.class
        } else {
            let votes: Vec<(u8, bool)> = members.iter().map(|&k| (nodes[k].0.class, nodes[k].1)).collect();
            table_vote(&votes, &SEMANTIC_WEIGHTS, &INSTANCE_WEIGHTS)
        };
        regions.push((pixels, class));
    }
    let key = |r: &(HashSet<(u32, u32)>, u8)| {
        let b = Blob { pixels: r.0.clone(), class: r.1 }.bbox();
        let mut px: Vec<(u32, u32)> = r.0.iter().map(|&(x, y)| (y, x)).collect();
        px.sort();
        ((b.1, b.0, b.3, b.2), px, r.1)
    };
    regions.sort_by_key(key);
    let mut ids = vec![0u32; (w * h) as usize];
    let mut classes = vec![0u8; (w * h) as usize];
    let mut next = 0;
    for (pixels, class) in &regions {
        let mut px: Vec<&(u32, u32)> = pixels.iter().collect();
        px.sort();
        let mut painted = false;
        for &&(x, y) in &px {
            let i = (y * w + x) as usize;
            if ids[i] == 0 {
                ids[i] = next + 1;
                classes[i] = *class;
                painted = true;
            }
        }
        if painted {
            next += 1;
        }
    }
    LabeledScene::from_raw(w, h, ids, &classes).unwrap()
}

/// (tp, fp, fn, iou_sum) by scoring every gt/pred pair.
pub fn brute_stats(gt: &[&Blob], pred: &[&Blob]) -> (u64, u64, u64, f64) {
    let mut tp = 0;
    let mut sum = 0.0;
    let mut gt_hit = vec![false; gt.len()];
    let mut pred_hit = vec![false; pred.len()];
    for (i, g) in gt.iter().enumerate() {
        for (j, p) in pred.iter().enumerate() {
            let iou = pixel_iou(&g.pixels, &p.pixels);
            if iou > 0.5 {
                tp += 1;
                sum += iou;
                gt_hit[i] = true;
                pred_hit[j] = true;
            }
        }
    }
    let fn_ = gt_hit.iter().filter(|h| !**h).count() as u64;
    let fp = pred_hit.iter().filter(|h| !**h).count() as u64;
    (tp, fp, fn_, sum)
}

pub fn pq_formula(tp: u64, fp: u64, fn_: u64, sum: f64) -> f64 {
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        sum / (tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64)
    }
}

#[derive(Debug, Clone)]
pub struct OracleReport {
    pub pq: f64,
    pub pq_plus: [Option<f64>; 6],
    pub mpq_plus: f64,
    pub r2: [Option<f64>; 6],
    pub r2_mean: Option<f64>,
}

pub fn oracle_counts(scene: &LabeledScene) -> [u64; 6] {
    let mut c = [0u64; 6];
    for b in blobs(scene).values() {
        c[b.class as usize - 1] += 1;
    }
    c
}

/// R² per class from the textbook formula with the mean subtracted.
pub fn oracle_r2(gt: &[[u64; 6]], pred: &[[u64; 6]]) -> ([Option<f64>; 6], Option<f64>) {
    let mut out = [None; 6];
    for c in 0..6 {
        let g: Vec<f64> = gt.iter().map(|v| v[c] as f64).collect();
        let p: Vec<f64> = pred.iter().map(|v| v[c] as f64).collect();
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        let ss_tot: f64 = g.iter().map(|x| (x - mean).powi(2)).sum();
        let ss_res: f64 = g.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum();
        out[c] = if ss_tot == 0.0 {
            (ss_res == 0.0).then_some(1.0)
        } else {
            Some(1.0 - ss_res / ss_tot)
        };
    }
    let d: Vec<f64> = out.iter().flatten().copied().collect();
    let mean = (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64);
    (out, mean)
}

pub fn oracle_report(gt: &[LabeledScene], pred: &[LabeledScene]) -> OracleReport {
    let mut pq = 0.0;
    let mut pooled = [(0u64, 0u64, 0u64, 0.0f64); 6];
    for (g, p) in gt.iter().zip(pred) {
        let gb = blobs(g);
        let pb = blobs(p);
        let gv: Vec<&Blob> = gb.values().collect();
        let pv: Vec<&Blob> = pb.values().collect();
        let (tp, fp, fn_, sum) = brute_stats(&gv, &pv);
        pq += pq_formula(tp, fp, fn_, sum);
        for c in 1..=6u8 {
            let gc: Vec<&Blob> = gv.iter().copied().filter(|b| b.class == c).collect();
            let pc: Vec<&Blob> = pv.iter().copied().filter(|b| b.class == c).collect();
            let s = brute_stats(&gc, &pc);
            let t = &mut pooled[c as usize - 1];
            t.0 += s.0;
            t.1 += s.1;
            t.2 += s.2;
            t.3 += s.3;
        }
    }
    pq /= gt.len() as f64;
    let pq_plus = pooled.map(|(tp, fp, fn_, sum)| (tp + fp + fn_ > 0).then(|| pq_formula(tp, fp, fn_, sum)));
    let d: Vec<f64> = pq_plus.iter().flatten().copied().collect();
    let mpq_plus = if d.is_empty() { 1.0 } else { d.iter().sum::<f64>() / d.len() as f64 };
    let gc: Vec<[u64; 6]> = gt.iter().map(oracle_counts).collect();
    let pc: Vec<[u64; 6]> = pred.iter().map(oracle_counts).collect();
    let (r2, r2_mean) = oracle_r2(&gc, &pc);
    OracleReport {
        pq,
        pq_plus,
        mpq_plus,
        r2,
        r2_mean,
    }
}

/// −(1/(M·K)) Σ_m Σ_k y log p, summed term by term.
pub fn direct_cross_entropy(labels: &[usize], probs: &[f64], k: usize) -> f64 {
    let m = labels.len();
    let mut total = 0.0;
    for i in 0..m {
        for c in 0..k {
            let y = if labels[i] == c { 1.0 } else { 0.0 };
            total += y * probs[i * k + c].max(1e-12).ln();
        }
    }
    -total / (m * k) as f64
}

pub fn synth(seed: u64, n_cells: usize, width: u32, height: u32) -> LabeledScene {
    generate_scene(&SynthConfig {
        width,
        height,
        n_cells,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
    .scene
}

pub fn class(v: u8) -> ClassId {
    ClassId::new(v).unwrap()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

pub fn close_opt(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => close(x, y, tol),
        (None, None) => true,
        _ => false,
    }
}
