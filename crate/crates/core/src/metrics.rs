//! Classification metrics, edge-mask recovery scores, k-means and NMI.

use ndarray::{Array2, ArrayView1};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

pub fn argmax(row: ArrayView1<f64>) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

pub fn predictions(probs: &Array2<f64>) -> Vec<usize> {
    probs.rows().into_iter().map(argmax).collect()
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

/// Binary ROC-AUC via the rank-sum statistic; ties get average ranks.
/// Returns `None` when either class is absent.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// ROC-AUC: positive-class score for two classes, one-vs-rest macro
/// average otherwise (classes lacking positives or negatives skipped).
pub fn roc_auc(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let c = probs.ncols();
    let class_auc = |k: usize| {
        let scores: Vec<f64> = probs.column(k).to_vec();
        let pos: Vec<bool> = labels.iter().map(|&y| y == k).collect();
        binary_auc(&scores, &pos)
    };
    if c == 2 {
        return class_auc(1).unwrap_or(0.5);
    }
    let aucs: Vec<f64> = (0..c).filter_map(class_auc).collect();
    if aucs.is_empty() {
        0.5
    } else {
        aucs.iter().sum::<f64>() / aucs.len() as f64
    }
}

/// Multiclass Matthews correlation coefficient; 0 when undefined.
pub fn mcc(pred: &[usize], labels: &[usize], num_classes: usize) -> f64 {
    let mut conf = vec![vec![0.0f64; num_classes]; num_classes];
    for (&p, &y) in pred.iter().zip(labels) {
        conf[y][p] += 1.0;
    }
    let s: f64 = labels.len() as f64;
    let correct: f64 = (0..num_classes).map(|k| conf[k][k]).sum();
    let t: Vec<f64> = (0..num_classes).map(|k| conf[k].iter().sum()).collect();
    let p: Vec<f64> = (0..num_classes).map(|k| conf.iter().map(|r| r[k]).sum()).collect();
    let pt: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
    let pp: f64 = p.iter().map(|a| a * a).sum();
    let tt: f64 = t.iter().map(|a| a * a).sum();
    let denom = ((s * s - pp) * (s * s - tt)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (correct * s - pt) / denom
    }
}

/// Micro-averaged edge-level agreement between predicted and true masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Recovery {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RecoveryCounts {
    pub true_pos: usize,
    pub predicted: usize,
    pub actual: usize,
}

impl RecoveryCounts {
    pub fn add(&mut self, pred: &[bool], truth: &[bool]) {
        for (&p, &t) in pred.iter().zip(truth) {
            self.true_pos += usize::from(p && t);
            self.predicted += usize::from(p);
            self.actual += usize::from(t);
        }
    }

    pub fn scores(&self) -> Recovery {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.true_pos, self.predicted);
        let recall = ratio(self.true_pos, self.actual);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Recovery {
            precision,
            recall,
            f1,
        }
    }
}

pub fn recovery<'a>(pairs: impl IntoIterator<Item = (&'a [bool], &'a [bool])>) -> Recovery {
    let mut c = RecoveryCounts::default();
    for (p, t) in pairs {
        c.add(p, t);
    }
    c.scores()
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| -(c / n) * (c / n).ln())
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization.
/// Two single-cluster partitions score 1.
pub fn nmi(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "nmi: partitions over different sets");
    let n = a.len() as f64;
    if a.is_empty() {
        return 1.0;
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut joint = vec![0.0; ka * kb];
    let mut ca = vec![0.0; ka];
    let mut cb = vec![0.0; kb];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * kb + y] += 1.0;
        ca[x] += 1.0;
        cb[y] += 1.0;
    }
    let (ha, hb) = (entropy(&ca, n), entropy(&cb, n));
    if ha == 0.0 && hb == 0.0 {
        return 1.0;
    }
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let j = joint[x * kb + y];
            if j > 0.0 {
                mi += (j / n) * ((j * n) / (ca[x] * cb[y])).ln();
            }
        }
    }
    (2.0 * mi / (ha + hb)).clamp(0.0, 1.0)
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with k-means++ seeding, best of `restarts` by inertia.
pub fn kmeans(points: &Array2<f64>, k: usize, restarts: usize, rng: &mut Rng) -> Vec<usize> {
    let n = points.nrows();
    if n == 0 || k == 0 {
        return vec![0; n];
    }
    let k = k.min(n);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts.max(1) {
        // k-means++ seeding
        let mut centers = Array2::zeros((k, points.ncols()));
        centers.row_mut(0).assign(&points.row(rng.gen_range(0..n)));
        let mut d2: Vec<f64> = points.rows().into_iter().map(|p| sq_dist(p, centers.row(0))).collect();
        for c in 1..k {
            let total: f64 = d2.iter().sum();
            let idx = if total > 0.0 {
                let mut t = rng.gen::<f64>() * total;
                let mut pick = n - 1;
                for (i, &d) in d2.iter().enumerate() {
                    if t < d {
                        pick = i;
                        break;
                    }
                    t -= d;
                }
                pick
            } else {
                rng.gen_range(0..n)
            };
            centers.row_mut(c).assign(&points.row(idx));
            for (i, p) in points.rows().into_iter().enumerate() {
                d2[i] = d2[i].min(sq_dist(p, centers.row(c)));
            }
        }

        let mut assign = vec![usize::MAX; n];
        for _ in 0..300 {
            let mut changed = false;
            for (i, p) in points.rows().into_iter().enumerate() {
                let c = (0..k)
                    .min_by(|&a, &b| sq_dist(p, centers.row(a)).total_cmp(&sq_dist(p, centers.row(b))))
                    .expect("k > 0");
                if assign[i] != c {
                    assign[i] = c;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            let mut sums = Array2::<f64>::zeros(centers.dim());
            let mut counts = vec![0usize; k];
            for (p, &c) in points.rows().into_iter().zip(&assign) {
                let mut row = sums.row_mut(c);
                row += &p;
                counts[c] += 1;
            }
            for (c, &count) in counts.iter().enumerate() {
                if count > 0 {
                    let mean = &sums.row(c) / count as f64;
                    centers.row_mut(c).assign(&mean);
                }
            }
        }
        let inertia: f64 = points
            .rows()
            .into_iter()
            .zip(&assign)
            .map(|(p, &c)| sq_dist(p, centers.row(c)))
            .sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, assign));
        }
    }
    best.expect("at least one restart").1
}
