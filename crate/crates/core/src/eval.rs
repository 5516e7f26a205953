//! Score statistics and report artifacts.
//!
//! AUCs are oriented so that positives are expected to score higher; the
//! OOD tables use the normal class as positive and likelihood as score.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_REPS: usize = 1000;
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub score: f64,
    pub label: Label,
    pub class: String,
    pub volume_id: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub entries: Vec<ScoreEntry>,
}

impl ScoreSet {
    /// Anonymous score set; ids are `p{i}` and `n{i}`.
    pub fn from_scores(positives: &[f64], negatives: &[f64]) -> Self {
        let mut entries = Vec::with_capacity(positives.len() + negatives.len());
        for (i, &s) in positives.iter().enumerate() {
            entries.push(ScoreEntry {
                score: s,
                label: Label::Positive,
                class: "positive".into(),
                volume_id: format!("p{i}"),
            });
        }
        for (i, &s) in negatives.iter().enumerate() {
            entries.push(ScoreEntry {
                score: s,
                label: Label::Negative,
                class: "negative".into(),
                volume_id: format!("n{i}"),
            });
        }
        ScoreSet { entries }
    }

    pub fn push(&mut self, score: f64, label: Label, class: &str, volume_id: &str) {
        self.entries.push(ScoreEntry {
            score,
            label,
            class: class.into(),
            volume_id: volume_id.into(),
        });
    }

    pub fn scores(&self, label: Label) -> Vec<f64> {
        self.entries.iter().filter(|e| e.label == label).map(|e| e.score).collect()
    }

    /// Labels swapped.
    pub fn swapped(&self) -> Self {
        let mut s = self.clone();
        for e in &mut s.entries {
            e.label = match e.label {
                Label::Positive => Label::Negative,
                Label::Negative => Label::Positive,
            };
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucResult {
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
    /// Positive/negative pairs with equal scores.
    pub ties: u64,
}

pub fn auc(scores: &ScoreSet) -> Result<AucResult> {
    auc_of(&scores.scores(Label::Positive), &scores.scores(Label::Negative))
}

/// Mann-Whitney AUC from a single sort. Wins count 2 and ties 1 in an
/// integer tally, so the result is exactly the pairwise fraction.
pub fn auc_of(pos: &[f64], neg: &[f64]) -> Result<AucResult> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid(format!(
            "auc needs both labels: {} positives, {} negatives",
            pos.len(),
            neg.len()
        )));
    }
    if pos.iter().chain(neg).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("auc score".into()));
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut twice, mut ties, mut neg_below) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice += p * (2 * neg_below + n);
        ties += p * n;
        neg_below += n;
        i = j;
    }
    let pairs = pos.len() as u64 * neg.len() as u64;
    Ok(AucResult {
        auc: twice as f64 / (2 * pairs) as f64,
        positives: pos.len(),
        negatives: neg.len(),
        ties,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub auc_a: f64,
    pub auc_b: f64,
    /// `auc_b - auc_a` on the full data.
    pub observed: f64,
    pub reps: usize,
    /// Fraction of resamples with `auc_b - auc_a <= 0`.
    pub p_value: f64,
    pub alpha: f64,
    pub significant: bool,
}

/// One-sided test that model b's AUC exceeds model a's. Volumes are paired
/// by id and resampled with replacement within each label, so every
/// resample keeps both labels.
pub fn bootstrap_compare(a: &ScoreSet, b: &ScoreSet, reps: usize, alpha: f64, seed_value: u64) -> Result<BootstrapResult> {
    if reps == 0 {
        return Err(Error::invalid("bootstrap needs at least one resample"));
    }
    let index = |s: &ScoreSet| -> Result<BTreeMap<String, (f64, Label)>> {
        let mut m = BTreeMap::new();
        for e in &s.entries {
            if m.insert(e.volume_id.clone(), (e.score, e.label)).is_some() {
                return Err(Error::invalid(format!("duplicate volume id {}", e.volume_id)));
            }
        }
        Ok(m)
    };
    let (ma, mb) = (index(a)?, index(b)?);
    let only: Vec<&String> = ma
        .keys()
        .filter(|k| !mb.contains_key(*k))
        .chain(mb.keys().filter(|k| !ma.contains_key(*k)))
        .collect();
    if !only.is_empty() {
        let names: Vec<&str> = only.iter().take(10).map(|s| s.as_str()).collect();
        return Err(Error::Unpaired(names.join(", ")));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (id, &(sa, la)) in &ma {
        let (sb, lb) = mb[id];
        if la != lb {
            return Err(Error::Unpaired(format!("{id} has different labels")));
        }
        match la {
            Label::Positive => pos.push((sa, sb)),
            Label::Negative => neg.push((sa, sb)),
        }
    }
    let pair_auc = |p: &[(f64, f64)], n: &[(f64, f64)]| -> Result<(f64, f64)> {
        let pa: Vec<f64> = p.iter().map(|x| x.0).collect();
        let na: Vec<f64> = n.iter().map(|x| x.0).collect();
        let pb: Vec<f64> = p.iter().map(|x| x.1).collect();
        let nb: Vec<f64> = n.iter().map(|x| x.1).collect();
        Ok((auc_of(&pa, &na)?.auc, auc_of(&pb, &nb)?.auc))
    };
    let (auc_a, auc_b) = pair_auc(&pos, &neg)?;
    let mut not_greater = 0usize;
    let (mut rp, mut rn) = (Vec::with_capacity(pos.len()), Vec::with_capacity(neg.len()));
    for r in 0..reps {
        let mut rng = seed::rng(seed::derive_index(seed_value, r as u64));
        rp.clear();
        rn.clear();
        for _ in 0..pos.len() {
            rp.push(pos[rng.gen_range(0..pos.len())]);
        }
        for _ in 0..neg.len() {
            rn.push(neg[rng.gen_range(0..neg.len())]);
        }
        let (ra, rb) = pair_auc(&rp, &rn)?;
        if rb - ra <= 0.0 {
            not_greater += 1;
        }
    }
    let p_value = not_greater as f64 / reps as f64;
    Ok(BootstrapResult {
        auc_a,
        auc_b,
        observed: auc_b - auc_a,
        reps,
        p_value,
        alpha,
        significant: p_value < alpha,
    })
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `"mean (std)"` rounded to integers.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    let r = |x: f64| {
        let v = x.round();
        if v == 0.0 {
            0.0
        } else {
            v
        }
    };
    format!("{} ({})", r(mean), r(std))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: String,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub formatted: String,
    /// AUC of normal (positive) against this class; absent for the normal row.
    pub auc: Option<f64>,
}

/// One row per class, in `order` (classes missing from `order` follow in
/// name order). Every non-normal row gets an AUC against `normal`.
pub fn summarize(groups: &BTreeMap<String, Vec<f64>>, normal: &str, order: &[String]) -> Result<Vec<ClassSummary>> {
    let base = groups
        .get(normal)
        .ok_or_else(|| Error::MissingInputs(format!("scores for class {normal}")))?;
    let mut names: Vec<&String> = order.iter().filter(|c| groups.contains_key(*c)).collect();
    for k in groups.keys() {
        if !names.contains(&k) {
            names.push(k);
        }
    }
    names
        .into_iter()
        .map(|c| {
            let xs = &groups[c];
            if xs.is_empty() {
                return Err(Error::Empty(format!("class {c}")));
            }
            let (mean, std) = mean_std(xs);
            let auc = if c == normal { None } else { Some(auc_of(base, xs)?.auc) };
            Ok(ClassSummary {
                class: c.clone(),
                count: xs.len(),
                mean,
                std,
                formatted: format_mean_std(mean, std),
                auc,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodTable {
    pub score: String,
    pub rows: Vec<ClassSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub auc: f64,
    /// Bootstrap p-value against the baseline model; absent for the baseline.
    pub p_value: Option<f64>,
    pub significant: bool,
}

/// Model-by-class AUC grid; the first model is the baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub models: Vec<String>,
    pub classes: Vec<String>,
    pub cells: Vec<Vec<Option<AblationCell>>>,
}

impl AblationTable {
    /// Fill the grid from per-model, per-class score sets (normal = positive).
    pub fn build(
        models: &[String],
        classes: &[String],
        scores: &BTreeMap<(String, String), ScoreSet>,
        reps: usize,
        alpha: f64,
        seed_value: u64,
    ) -> Result<Self> {
        let mut cells = Vec::with_capacity(models.len());
        for (mi, m) in models.iter().enumerate() {
            let mut row = Vec::with_capacity(classes.len());
            for (ci, c) in classes.iter().enumerate() {
                let Some(s) = scores.get(&(m.clone(), c.clone())) else {
                    row.push(None);
                    continue;
                };
                let a = auc(s)?.auc;
                let (p_value, significant) = if mi == 0 {
                    (None, false)
                } else {
                    match scores.get(&(models[0].clone(), c.clone())) {
                        Some(base) => {
                            let seed = seed::derive_index(seed_value, (mi * classes.len() + ci) as u64);
                            let b = bootstrap_compare(base, s, reps, alpha, seed)?;
                            (Some(b.p_value), b.significant)
                        }
                        None => (None, false),
                    }
                };
                row.push(Some(AblationCell {
                    auc: a,
                    p_value,
                    significant,
                }));
            }
            cells.push(row);
        }
        Ok(AblationTable {
            models: models.to_vec(),
            classes: classes.to_vec(),
            cells,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionAucRow {
    pub method: String,
    pub class: String,
    /// AUC of per-lesion certainty, true positives as positives; absent
    /// when either group is empty.
    pub auc: Option<f64>,
    pub true_positives: usize,
    pub false_positives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: BTreeMap<String, Vec<usize>>,
}

impl Histogram {
    /// `bins` equal-width bins spanning the min..max of all scores; the last
    /// bin includes the maximum.
    pub fn build(groups: &BTreeMap<String, Vec<f64>>, bins: usize) -> Result<Self> {
        let bins = bins.max(1);
        let all: Vec<f64> = groups.values().flatten().copied().collect();
        if all.is_empty() {
            return Err(Error::MissingInputs("histogram scores".into()));
        }
        let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
        let mut hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi == lo {
            hi = lo + 1.0;
        }
        let w = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + w * i as f64 }).collect();
        let counts = groups
            .iter()
            .map(|(c, xs)| {
                let mut h = vec![0; bins];
                for &x in xs {
                    let b = (((x - lo) / w) as usize).min(bins - 1);
                    h[b] += 1;
                }
                (c.clone(), h)
            })
            .collect();
        Ok(Histogram { edges, counts })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub volume_id: String,
    pub log_likelihood: f64,
    pub false_positives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Report {
    OodTable(OodTable),
    AblationTable(AblationTable),
    LesionAucTable { rows: Vec<LesionAucRow> },
    Histogram(Histogram),
    Scatter { rows: Vec<ScatterRow> },
}

impl Report {
    pub fn kind(&self) -> &'static str {
        match self {
            Report::OodTable(_) => "ood_table",
            Report::AblationTable(_) => "ablation_table",
            Report::LesionAucTable { .. } => "lesion_auc_table",
            Report::Histogram(_) => "histogram",
            Report::Scatter { .. } => "scatter",
        }
    }

    /// Names of absent pieces; empty when the report is complete.
    pub fn missing(&self) -> Vec<String> {
        match self {
            Report::OodTable(t) => {
                if t.rows.is_empty() {
                    vec!["ood rows".into()]
                } else {
                    Vec::new()
                }
            }
            Report::AblationTable(t) => {
                let mut out = Vec::new();
                if t.models.is_empty() {
                    out.push("models".into());
                }
                for (m, row) in t.models.iter().zip(&t.cells) {
                    for (c, cell) in t.classes.iter().zip(row) {
                        if cell.is_none() {
                            out.push(format!("{m} / {c}"));
                        }
                    }
                }
                out
            }
            Report::LesionAucTable { rows } => {
                if rows.is_empty() {
                    vec!["lesion auc rows".into()]
                } else {
                    Vec::new()
                }
            }
            Report::Histogram(h) => h
                .counts
                .iter()
                .filter(|(_, c)| c.iter().sum::<usize>() == 0)
                .map(|(k, _)| format!("histogram class {k}"))
                .collect(),
            Report::Scatter { rows } => {
                if rows.is_empty() {
                    vec!["scatter rows".into()]
                } else {
                    Vec::new()
                }
            }
        }
    }

    fn csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let e = |err: csv::Error| Error::Format(format!("csv: {err}"));
        match self {
            Report::OodTable(t) => {
                w.write_record(["class", "count", "mean", "std", "mean_std", "auc"]).map_err(e)?;
                for r in &t.rows {
                    w.write_record([
                        r.class.clone(),
                        r.count.to_string(),
                        r.mean.to_string(),
                        r.std.to_string(),
                        r.formatted.clone(),
                        r.auc.map(|a| format!("{a:.4}")).unwrap_or_default(),
                    ])
                    .map_err(e)?;
                }
            }
            Report::AblationTable(t) => {
                let mut header = vec!["model".to_string()];
                header.extend(t.classes.iter().cloned());
                w.write_record(&header).map_err(e)?;
                for (m, row) in t.models.iter().zip(&t.cells) {
                    let mut rec = vec![m.clone()];
                    for cell in row {
                        rec.push(match cell {
                            Some(c) => format!("{:.2}{}", c.auc, if c.significant { "*" } else { "" }),
                            None => String::new(),
                        });
                    }
                    w.write_record(&rec).map_err(e)?;
                }
            }
            Report::LesionAucTable { rows } => {
                w.write_record(["method", "class", "auc", "true_positives", "false_positives"]).map_err(e)?;
                for r in rows {
                    w.write_record([
                        r.method.clone(),
                        r.class.clone(),
                        r.auc.map(|a| format!("{a:.4}")).unwrap_or_default(),
                        r.true_positives.to_string(),
                        r.false_positives.to_string(),
                    ])
                    .map_err(e)?;
                }
            }
            Report::Histogram(h) => {
                let mut header = vec!["bin_lo".to_string(), "bin_hi".to_string()];
                header.extend(h.counts.keys().cloned());
                w.write_record(&header).map_err(e)?;
                for b in 0..h.edges.len() - 1 {
                    let mut rec = vec![h.edges[b].to_string(), h.edges[b + 1].to_string()];
                    rec.extend(h.counts.values().map(|c| c[b].to_string()));
                    w.write_record(&rec).map_err(e)?;
                }
            }
            Report::Scatter { rows } => {
                w.write_record(["volume_id", "log_likelihood", "false_positives"]).map_err(e)?;
                for r in rows {
                    w.write_record([r.volume_id.clone(), r.log_likelihood.to_string(), r.false_positives.to_string()])
                        .map_err(e)?;
                }
            }
        }
        w.into_inner().map_err(|err| Error::Format(format!("csv: {err}")))
    }

    fn json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_value(self)?;
        v["schema_version"] = REPORT_SCHEMA_VERSION.into();
        let mut out = serde_json::to_vec_pretty(&v)?;
        out.push(b'\n');
        Ok(out)
    }
}

/// Write `<stem>.csv` and `<stem>.json` under `dir`.
pub fn export_report(report: &Report, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let missing = report.missing();
    if !missing.is_empty() {
        return Err(Error::MissingInputs(format!("{}: {}", report.kind(), missing.join(", "))));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for (ext, bytes) in [("csv", report.csv()?), ("json", report.json()?)] {
        let p = dir.join(format!("{stem}.{ext}"));
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        out.push(p);
    }
    Ok(out)
}

/// Distinct classes in a score set.
pub fn classes(s: &ScoreSet) -> BTreeSet<String> {
    s.entries.iter().map(|e| e.class.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc_of(&[2.0, 3.0], &[0.0, 1.0]).unwrap().auc, 1.0);
        assert_eq!(auc_of(&[1.0, 1.0, 2.0], &[1.0, 2.0, 1.0]).unwrap().auc, 0.5);
        assert_eq!(auc_of(&[1.0, 3.0], &[2.0, 4.0]).unwrap().auc, 0.25);
        assert!(auc_of(&[1.0], &[]).is_err());
        let r = auc_of(&[1.0, 2.0], &[1.0]).unwrap();
        assert_eq!(r.ties, 1);
    }

    #[test]
    fn summary_format() {
        assert_eq!(format_mean_std(-15.0, 5.0), "-15 (5)");
        let (m, s) = mean_std(&[-10.0, -20.0]);
        assert_eq!(format_mean_std(m, s), "-15 (5)");
        assert_eq!(format_mean_std(-0.3, 0.0), "0 (0)");
        let mut g = BTreeMap::new();
        g.insert("normal".to_string(), vec![-3.0, -3.0]);
        g.insert("b".to_string(), vec![-9.0]);
        g.insert("a".to_string(), vec![-5.0]);
        let rows = summarize(&g, "normal", &["normal".into(), "b".into()]).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.class.as_str()).collect();
        assert_eq!(names, ["normal", "b", "a"]);
        assert_eq!(rows[0].formatted, "-3 (0)");
        assert_eq!(rows[1].auc, Some(1.0));
    }

    #[test]
    fn bootstrap_degenerate_cases() {
        let s = ScoreSet::from_scores(&[0.9, 0.4, 0.7], &[0.5, 0.1, 0.6]);
        let same = bootstrap_compare(&s, &s, 200, 0.05, 1).unwrap();
        assert!(!same.significant);
        let one = bootstrap_compare(&s, &s, 1, 0.05, 1).unwrap();
        assert!(one.p_value == 0.0 || one.p_value == 1.0);
        let mut other = s.clone();
        other.entries[0].volume_id = "x".into();
        assert!(matches!(bootstrap_compare(&s, &other, 10, 0.05, 1), Err(Error::Unpaired(_))));
    }

    #[test]
    fn histogram_covers_range() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), vec![-1.0, 0.0, 3.0]);
        g.insert("b".to_string(), vec![2.0]);
        let h = Histogram::build(&g, 4).unwrap();
        assert_eq!(h.edges.first(), Some(&-1.0));
        assert_eq!(h.edges.last(), Some(&3.0));
        assert_eq!(h.counts["a"].iter().sum::<usize>(), 3);
        assert_eq!(h.counts["a"][3], 1);
    }

    #[test]
    fn export_rejects_missing_cells() {
        let t = AblationTable {
            models: vec!["m".into()],
            classes: vec!["c".into()],
            cells: vec![vec![None]],
        };
        let dir = tempfile::tempdir().unwrap();
        let e = export_report(&Report::AblationTable(t), dir.path(), "x").unwrap_err();
        assert!(e.to_string().contains("m / c"), "{e}");
    }
}
