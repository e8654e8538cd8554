use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{bail, Result};
use crate::numerics::Matrix;

fn ser_bias<S: Serializer>(b: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if b.is_infinite() {
        s.serialize_str(if *b > 0.0 { "inf" } else { "-inf" })
    } else {
        s.serialize_f64(*b)
    }
}

fn de_bias<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Text(t) => match t.as_str() {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            other => Err(serde::de::Error::custom(format!("bad bias {other:?}"))),
        },
    }
}

/// One operating point of the calibration sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    #[serde(serialize_with = "ser_bias", deserialize_with = "de_bias")]
    pub bias: f64,
    pub seen_acc: f64,
    pub unseen_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub curve: Vec<CurvePoint>,
    pub seen: f64,
    pub unseen: f64,
    pub hm: f64,
    pub auc: f64,
    pub n_seen: usize,
    pub n_unseen: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl EvalReport {
    /// Curve as CSV with a header row.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("bias,seen_acc,unseen_acc\n");
        for p in &self.curve {
            let b = if p.bias.is_infinite() {
                if p.bias > 0.0 { "inf".to_string() } else { "-inf".to_string() }
            } else {
                p.bias.to_string()
            };
            out.push_str(&format!("{b},{},{}\n", p.seen_acc, p.unseen_acc));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        format!(
            "seen,unseen,hm,auc,n_seen,n_unseen\n{},{},{},{},{},{}\n",
            self.seen, self.unseen, self.hm, self.auc, self.n_seen, self.n_unseen
        )
    }
}

pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u <= 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

/// Trapezoidal area under the unseen-vs-seen curve after sorting by seen
/// accuracy (ties by descending unseen) and dropping repeated points.
pub fn curve_auc(points: &[(f64, f64)]) -> f64 {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.dedup();
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Sweeps a calibration bias added to every unseen-composition score.
///
/// `scores` is `items x compositions`, `labels` index its columns and
/// `seen_columns` marks seen compositions. An item switches to an unseen
/// prediction once the bias exceeds its best-seen minus best-unseen gap, so
/// the sorted distinct gaps plus the two infinite sentinels enumerate every
/// distinct operating point.
pub fn bias_sweep(scores: &Matrix, labels: &[usize], seen_columns: &[bool]) -> Result<EvalReport> {
    let (n, c) = scores.shape();
    if labels.len() != n {
        bail!(Dimension, "{} labels for {n} score rows", labels.len());
    }
    if seen_columns.len() != c {
        bail!(Dimension, "{} column flags for {c} compositions", seen_columns.len());
    }
    if !seen_columns.iter().any(|&s| s) {
        bail!(Contract, "bias sweep needs at least one seen composition");
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        bail!(Contract, "label {bad} outside the {c} scored compositions");
    }

    struct Item {
        gap: f64,
        seen_label: bool,
        seen_right: bool,
        unseen_right: bool,
    }
    let mut items = Vec::with_capacity(n);
    for (r, &label) in labels.iter().enumerate() {
        let row = scores.row(r);
        let (mut bs, mut bs_i) = (f64::NEG_INFINITY, usize::MAX);
        let (mut bu, mut bu_i) = (f64::NEG_INFINITY, usize::MAX);
        for (j, &v) in row.iter().enumerate() {
            if seen_columns[j] {
                if v > bs || bs_i == usize::MAX {
                    bs = v;
                    bs_i = j;
                }
            } else if v > bu || bu_i == usize::MAX {
                bu = v;
                bu_i = j;
            }
        }
        items.push(Item {
            gap: bs - bu,
            seen_label: seen_columns[label],
            seen_right: bs_i == label,
            unseen_right: bu_i == label,
        });
    }
    let n_seen = items.iter().filter(|i| i.seen_label).count();
    let n_unseen = n - n_seen;

    let mut biases = vec![f64::NEG_INFINITY];
    let mut gaps: Vec<f64> = items.iter().map(|i| i.gap).filter(|g| g.is_finite()).collect();
    gaps.sort_by(f64::total_cmp);
    gaps.dedup();
    biases.extend(gaps);
    biases.push(f64::INFINITY);

    let frac = |k: usize, total: usize| if total == 0 { 0.0 } else { k as f64 / total as f64 };
    let curve: Vec<CurvePoint> = biases
        .iter()
        .map(|&b| {
            let (mut cs, mut cu) = (0, 0);
            for it in &items {
                let unseen_pred = b > it.gap;
                if it.seen_label && !unseen_pred && it.seen_right {
                    cs += 1;
                }
                if !it.seen_label && unseen_pred && it.unseen_right {
                    cu += 1;
                }
            }
            CurvePoint {
                bias: b,
                seen_acc: frac(cs, n_seen),
                unseen_acc: frac(cu, n_unseen),
            }
        })
        .collect();

    let seen = curve.iter().map(|p| p.seen_acc).fold(0.0, f64::max);
    let unseen = curve.iter().map(|p| p.unseen_acc).fold(0.0, f64::max);
    let hm = curve
        .iter()
        .map(|p| harmonic_mean(p.seen_acc, p.unseen_acc))
        .fold(0.0, f64::max);
    let pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.seen_acc, p.unseen_acc)).collect();
    let warning = (n_unseen == 0).then(|| "no unseen test items: unseen, hm and auc reported as 0".to_string());
    let auc = if n_unseen == 0 { 0.0 } else { curve_auc(&pts) };
    Ok(EvalReport {
        curve,
        seen,
        unseen,
        hm: if n_unseen == 0 { 0.0 } else { hm },
        auc,
        n_seen,
        n_unseen,
        warning,
    })
}
