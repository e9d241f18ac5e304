//! Overlap, ROC and tortuosity metrics plus the two statistics used to
//! relate tortuosity to clinical values.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::centerline::CenterlineTree;
use crate::error::{Error, Result};
use crate::volume::{Mask, VoxelIndex};

/// Default minimum branch length for the patient-level tortuosity summary.
pub const DEFAULT_MIN_BRANCH_MM: f64 = 10.0;

/// `|a ∩ b| / |a ∪ b|`, 1 when both masks are empty.
pub fn jaccard(a: &Mask, b: &Mask) -> Result<f64> {
    a.same_dims(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Average (mid) ranks, 1-based; tied values share the mean of their ranks.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut s = 0;
    while s < order.len() {
        let mut e = s + 1;
        while e < order.len() && values[order[e]] == values[order[s]] {
            e += 1;
        }
        let r = (s + e + 1) as f64 / 2.0;
        for &o in &order[s..e] {
            ranks[o] = r;
        }
        s = e;
    }
    ranks
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub az: f64,
    /// One point per distinct score, from the highest threshold down, after
    /// the (0, 0) start.
    pub points: Vec<RocPoint>,
}

/// Area under the ROC curve as the Mann-Whitney concordance probability,
/// ties counted one half. `labels[i]` is true for vessel points.
pub fn roc_az(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidParameter(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidParameter("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("ROC needs both classes"));
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    let az = (rank_sum - p * (p + 1.0) / 2.0) / (p * n);

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut s = 0;
    while s < order.len() {
        let t = scores[order[s]];
        while s < order.len() && scores[order[s]] == t {
            if labels[order[s]] {
                tp += 1;
            } else {
                fp += 1;
            }
            s += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / n,
            tpr: tp as f64 / p,
        });
    }
    Ok(RocCurve { az, points })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(prediction: &[bool], labels: &[bool]) -> Result<Self> {
        if prediction.len() != labels.len() {
            return Err(Error::InvalidParameter(format!(
                "{} predictions for {} labels",
                prediction.len(),
                labels.len()
            )));
        }
        let mut c = Confusion::default();
        for (&p, &l) in prediction.iter().zip(labels) {
            match (p, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    /// `TP / (TP + FN)`, `None` without positive labels.
    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `TN / (TN + FP)`, `None` without negative labels.
    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Sensitivity and specificity; a zero denominator yields `None`.
pub fn sens_spec(prediction: &[bool], labels: &[bool]) -> Result<(Option<f64>, Option<f64>)> {
    let c = Confusion::from_predictions(prediction, labels)?;
    Ok((c.sensitivity(), c.specificity()))
}

/// Ordered node positions in mm between two branch points or endpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchPath(pub Vec<[f64; 3]>);

impl BranchPath {
    pub fn length(&self) -> f64 {
        self.0.windows(2).map(|w| dist(w[0], w[1])).sum()
    }

    pub fn chord(&self) -> f64 {
        match (self.0.first(), self.0.last()) {
            (Some(&a), Some(&b)) => dist(a, b),
            _ => 0.0,
        }
    }

    /// All branches of a centerline tree.
    pub fn from_tree(tree: &CenterlineTree) -> Vec<BranchPath> {
        tree.branches()
            .into_iter()
            .map(|ids| BranchPath(ids.iter().map(|&i| tree.nodes[i].xyz_mm).collect()))
            .collect()
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Path length over endpoint distance.
pub fn distance_metric(branch: &BranchPath) -> Result<f64> {
    if branch.0.len() < 2 {
        return Err(Error::Undefined("branch needs at least 2 nodes"));
    }
    let chord = branch.chord();
    if chord <= 0.0 {
        return Err(Error::Undefined("branch endpoints coincide"));
    }
    Ok(branch.length() / chord)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmSummary {
    pub branches: usize,
    pub min_branch_mm: f64,
    pub mean: f64,
    /// Sample standard deviation, 0 for a single branch.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Unweighted tortuosity summary over every branch at least `min_branch_mm` long.
pub fn patient_dm(trees: &[CenterlineTree], min_branch_mm: f64) -> Result<DmSummary> {
    if trees.iter().all(|t| t.nodes.is_empty()) {
        return Err(Error::Undefined("empty centerline tree"));
    }
    let dms = trees
        .iter()
        .flat_map(BranchPath::from_tree)
        .filter(|b| b.length() >= min_branch_mm)
        .map(|b| distance_metric(&b))
        .collect::<Result<Vec<_>>>()?;
    summarize_dm(&dms, min_branch_mm)
}

pub fn summarize_dm(dms: &[f64], min_branch_mm: f64) -> Result<DmSummary> {
    if dms.is_empty() {
        return Err(Error::Undefined("no branch reaches the minimum length"));
    }
    let n = dms.len() as f64;
    let mean = dms.iter().sum::<f64>() / n;
    let std = if dms.len() > 1 {
        (dms.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(DmSummary {
        branches: dms.len(),
        min_branch_mm,
        mean,
        std,
        min: dms.iter().copied().fold(f64::INFINITY, f64::min),
        max: dms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ConstantInput("correlation input"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman's rho: Pearson correlation of the mid-ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidParameter(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::InvalidParameter("spearman needs at least 3 pairs".into()));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::InvalidParameter("NaN value".into()));
    }
    pearson(&midranks(x), &midranks(y))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TTestKind {
    /// Unequal variances with Welch-Satterthwaite degrees of freedom.
    #[default]
    Welch,
    Pooled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p: f64,
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Two-sample t-test of `mean(a) - mean(b)`.
pub fn two_sample_t(a: &[f64], b: &[f64], kind: TTestKind) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidParameter("each group needs at least 2 values".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    if va == 0.0 && vb == 0.0 {
        return Err(Error::ConstantInput("both groups"));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (se2, df) = match kind {
        TTestKind::Welch => {
            let (qa, qb) = (va / na, vb / nb);
            let df = (qa + qb).powi(2) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
            (qa + qb, df)
        }
        TTestKind::Pooled => {
            let df = na + nb - 2.0;
            let sp2 = ((na - 1.0) * va + (nb - 1.0) * vb) / df;
            (sp2 * (1.0 / na + 1.0 / nb), df)
        }
    };
    let t = (ma - mb) / se2.sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest { t, df, p })
}

/// One annotated evaluation point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnnotatedPoint {
    pub voxel: VoxelIndex,
    pub vessel: bool,
}

/// Reads `x,y,z,label` rows (voxel indices, label 0 or 1). A header row is
/// allowed; errors name the 1-based line.
pub fn load_points_csv(path: impl AsRef<Path>, dims: [usize; 3]) -> Result<Vec<AnnotatedPoint>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_points_csv(&text, dims)
}

pub fn parse_points_csv(text: &str, dims: [usize; 3]) -> Result<Vec<AnnotatedPoint>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (n, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
        let line = rec.position().map_or(n as u64 + 1, |p| p.line());
        if n == 0 && rec.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        let err = |msg: String| Error::Csv(format!("line {line}: {msg}"));
        if rec.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", rec.len())));
        }
        let mut c = [0usize; 3];
        for a in 0..3 {
            let v: i64 = rec[a]
                .parse()
                .map_err(|_| err(format!("bad coordinate '{}'", &rec[a])))?;
            if v < 0 || v as usize >= dims[a] {
                return Err(err(format!("coordinate {v} outside 0..{}", dims[a])));
            }
            c[a] = v as usize;
        }
        let vessel = match &rec[3] {
            "0" => false,
            "1" => true,
            other => return Err(err(format!("label must be 0 or 1, got '{other}'"))),
        };
        out.push(AnnotatedPoint {
            voxel: VoxelIndex::new(c[0], c[1], c[2]),
            vessel,
        });
    }
    Ok(out)
}

/// Evaluation summary; absent fields were not computed or are undefined.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub jaccard: Option<f64>,
    pub az: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub dm_mean: Option<f64>,
    pub dm_std: Option<f64>,
    pub dm_range: Option<[f64; 2]>,
    pub spearman_rho: Option<f64>,
    pub t_statistic: Option<f64>,
    pub p_value: Option<f64>,
}

impl EvalReport {
    pub fn with_dm(mut self, dm: &DmSummary) -> Self {
        self.dm_mean = Some(dm.mean);
        self.dm_std = Some(dm.std);
        self.dm_range = Some([dm.min, dm.max]);
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    fn rows(&self) -> Vec<(&'static str, String)> {
        let f = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"));
        vec![
            ("jaccard", f(self.jaccard)),
            ("az", f(self.az)),
            ("sensitivity", f(self.sensitivity)),
            ("specificity", f(self.specificity)),
            ("dm_mean", f(self.dm_mean)),
            ("dm_std", f(self.dm_std)),
            (
                "dm_range",
                self.dm_range
                    .map_or_else(|| "n/a".to_string(), |[a, b]| format!("{a:.6} - {b:.6}")),
            ),
            ("spearman_rho", f(self.spearman_rho)),
            ("t_statistic", f(self.t_statistic)),
            ("p_value", f(self.p_value)),
        ]
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = self.rows();
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        for (k, v) in rows {
            writeln!(f, "{k:<w$}  {v:>20}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::centerline::TreeNode;
    use crate::volume::{Grid, Volume};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn mask(bits: &[bool]) -> Mask {
        Volume::new(Grid::unit([bits.len(), 1, 1]).unwrap(), bits.to_vec()).unwrap()
    }

    #[test]
    fn jaccard_cases() {
        let a = mask(&[true, true, false, false]);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &mask(&[false, false, true, true])).unwrap(), 0.0);
        let b = mask(&[false, true, true, false]);
        assert_eq!(jaccard(&a, &b).unwrap(), 1.0 / 3.0);
        assert_eq!(jaccard(&b, &a).unwrap(), jaccard(&a, &b).unwrap());
        let e = mask(&[false; 4]);
        assert_eq!(jaccard(&e, &e).unwrap(), 1.0);
        assert!(matches!(jaccard(&a, &mask(&[true])), Err(Error::DimMismatch(..))));
    }

    fn concordance(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut sum, mut pairs) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    sum += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        sum / pairs
    }

    #[test]
    fn roc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let labels: Vec<bool> = (0..200).map(|_| rng.random_bool(0.4)).collect();
            // coarse scores so ties occur
            let scores: Vec<f64> = labels
                .iter()
                .map(|&l| (rng.random_range(0.0..10.0f64) + if l { 2.0 } else { 0.0 }).floor())
                .collect();
            let az = roc_az(&scores, &labels).unwrap().az;
            assert!((az - concordance(&scores, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn roc_edge_cases() {
        let labels = [true, true, false, false];
        assert_eq!(roc_az(&[4.0, 3.0, 2.0, 1.0], &labels).unwrap().az, 1.0);
        assert_eq!(roc_az(&[1.0; 4], &labels).unwrap().az, 0.5);
        let s = [0.3, 0.9, 0.1, 0.5];
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let sum = roc_az(&s, &labels).unwrap().az + roc_az(&neg, &labels).unwrap().az;
        assert!((sum - 1.0).abs() < 1e-15);
        let curve = roc_az(&s, &labels).unwrap();
        assert_eq!(curve.points.len(), 5);
        let last = curve.points.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert!(matches!(roc_az(&[1.0, 2.0], &[true, true]), Err(Error::Undefined(_))));
    }

    #[test]
    fn sensitivity_and_specificity() {
        let labels = [true, true, false, false];
        assert_eq!(sens_spec(&labels, &labels).unwrap(), (Some(1.0), Some(1.0)));
        assert_eq!(sens_spec(&[true; 4], &labels).unwrap(), (Some(1.0), Some(0.0)));
        let c = Confusion {
            tp: 8,
            fn_: 2,
            tn: 15,
            fp: 5,
        };
        assert_eq!((c.sensitivity(), c.specificity()), (Some(0.8), Some(0.75)));
        assert_eq!(sens_spec(&[true], &[false]).unwrap(), (None, Some(0.0)));
    }

    #[test]
    fn distance_metric_cases() {
        let straight = BranchPath(vec![[0.0; 3], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0]]);
        assert_eq!(distance_metric(&straight).unwrap(), 1.0);
        let semi = BranchPath(
            (0..=64)
                .map(|s| {
                    let a = PI * s as f64 / 64.0;
                    [10.0 * a.cos(), 10.0 * a.sin(), 0.0]
                })
                .collect(),
        );
        let dm = distance_metric(&semi).unwrap();
        assert!((dm - PI / 2.0).abs() / (PI / 2.0) < 0.005, "{dm}");
        let l = BranchPath(vec![[0.0; 3], [3.0, 0.0, 0.0], [3.0, 4.0, 0.0]]);
        assert!((distance_metric(&l).unwrap() - 1.4).abs() < 1e-15);
        let loop_ = BranchPath(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0; 3]]);
        assert!(matches!(distance_metric(&loop_), Err(Error::Undefined(_))));
    }

    #[test]
    fn distance_metric_rigid_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let path: Vec<[f64; 3]> = (0..20)
            .map(|_| {
                [
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                ]
            })
            .collect();
        let rot = nalgebra::Rotation3::from_euler_angles(0.3, -1.1, 2.0);
        let moved: Vec<[f64; 3]> = path
            .iter()
            .map(|p| {
                let q = rot * nalgebra::Point3::new(p[0], p[1], p[2]) + nalgebra::Vector3::new(7.0, -3.0, 11.0);
                [q.x, q.y, q.z]
            })
            .collect();
        let a = distance_metric(&BranchPath(path)).unwrap();
        let b = distance_metric(&BranchPath(moved)).unwrap();
        assert!(a >= 1.0);
        assert!((a - b).abs() < 1e-9);
    }

    fn tree_from_paths(paths: &[Vec<[f64; 3]>]) -> CenterlineTree {
        // all paths start at a shared root node
        let mut t = CenterlineTree::empty(2);
        let node = |id: usize, p: [f64; 3]| TreeNode {
            id,
            ijk: [0; 3],
            xyz_mm: p,
            radius_mm: None,
            response: 0.0,
        };
        t.nodes.push(node(0, paths[0][0]));
        t.roots.push(0);
        for path in paths {
            let mut prev = 0;
            for &p in &path[1..] {
                let id = t.nodes.len();
                t.nodes.push(node(id, p));
                t.edges.push([prev, id]);
                prev = id;
            }
        }
        t
    }

    #[test]
    fn patient_dm_cases() {
        let line = |d: [f64; 3]| {
            (0..=20)
                .map(|s| [d[0] * s as f64, d[1] * s as f64, d[2] * s as f64])
                .collect()
        };
        let t = tree_from_paths(&[line([1.0, 0.0, 0.0]), line([0.0, 1.0, 0.0])]);
        let s = patient_dm(&[t], 10.0).unwrap();
        assert_eq!((s.branches, s.mean), (2, 1.0));
        let semi: Vec<[f64; 3]> = (0..=64)
            .map(|s| {
                let a = PI * s as f64 / 64.0;
                [10.0 - 10.0 * a.cos(), 10.0 * a.sin(), 0.0]
            })
            .collect();
        let t = tree_from_paths(&[line([0.0, 0.0, -1.0]), semi]);
        let s = patient_dm(&[t.clone()], 10.0).unwrap();
        assert!((s.mean - (1.0 + PI / 2.0) / 2.0).abs() < 0.005);
        assert!(matches!(patient_dm(&[t], 1000.0), Err(Error::Undefined(_))));
    }

    fn spearman_oracle(x: &[f64], y: &[f64]) -> f64 {
        // rank by counting, ties averaged
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|a| {
                    let less = v.iter().filter(|b| *b < a).count() as f64;
                    let eq = v.iter().filter(|b| *b == a).count() as f64;
                    less + (eq + 1.0) / 2.0
                })
                .collect()
        };
        let (rx, ry) = (rank(x), rank(y));
        let n = x.len() as f64;
        let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
        let sy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
        cov / (sx * sy)
    }

    #[test]
    fn spearman_cases() {
        let x: Vec<f64> = (0..10).map(|v| v as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0).collect();
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-15);
        let r: Vec<f64> = x.iter().rev().copied().collect();
        assert!((spearman(&x, &r).unwrap() + 1.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a: Vec<f64> = (0..50).map(|_| rng.random_range(0..20) as f64).collect();
            let b: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
            assert!((spearman(&a, &b).unwrap() - spearman_oracle(&a, &b)).abs() < 1e-12);
            let exp_a: Vec<f64> = a.iter().map(|v| v.exp()).collect();
            assert!((spearman(&exp_a, &b).unwrap() - spearman(&a, &b).unwrap()).abs() < 1e-12);
        }
        assert!(matches!(spearman(&[1.0; 5], &x[..5]), Err(Error::ConstantInput(_))));
        assert!(spearman(&x[..2], &x[..2]).is_err());
    }

    #[test]
    fn t_test_cases() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let same = two_sample_t(&a, &a, TTestKind::Welch).unwrap();
        assert_eq!((same.t, same.p), (0.0, 1.0));
        let lo = [0.0, 0.001, -0.001, 0.0005];
        let hi = [1.0, 1.001, 0.999, 1.0005];
        assert!(two_sample_t(&hi, &lo, TTestKind::Welch).unwrap().p < 1e-4);
        // means 5 and 4, unit sd, n = 10 each
        let g = |m: f64| -> Vec<f64> {
            let base = [-1.5, -1.0, -0.5, 0.0, 0.5, 0.5, 0.0, -0.5, 1.0, 1.5];
            let sd = (base.iter().map(|v| v * v).sum::<f64>() / 9.0).sqrt();
            base.iter().map(|v| m + v / sd).collect()
        };
        let r = two_sample_t(&g(5.0), &g(4.0), TTestKind::Welch).unwrap();
        assert!((r.t - 5f64.sqrt()).abs() < 1e-12);
        assert!((r.df - 18.0).abs() < 1e-9);
        // two-sided p for t = sqrt 5 at 18 df
        assert!((r.p - 0.0382).abs() < 5e-4, "{}", r.p);
        let pooled = two_sample_t(&g(5.0), &g(4.0), TTestKind::Pooled).unwrap();
        assert!((pooled.t - r.t).abs() < 1e-12);
        assert!(matches!(
            two_sample_t(&[1.0, 1.0], &[2.0, 2.0], TTestKind::Welch),
            Err(Error::ConstantInput(_))
        ));
    }

    #[test]
    fn points_csv_parsing() {
        let pts = parse_points_csv("x,y,z,label\n1,2,3,1\n0,0,0,0\n", [4, 4, 4]).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[0].voxel, VoxelIndex::new(1, 2, 3));
        assert!(pts[0].vessel && !pts[1].vessel);
        let err = parse_points_csv("1,2,3,1\n0,9,0,0\n", [4, 4, 4])
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2"), "{err}");
        let err = parse_points_csv("1,2,3,7\n", [4, 4, 4]).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn report_formats() {
        let r = EvalReport {
            jaccard: Some(0.5),
            ..Default::default()
        };
        let text = r.to_string();
        assert!(text.contains("jaccard") && text.contains("0.500000") && text.contains("n/a"));
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
