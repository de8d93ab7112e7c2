//! Trial scoring, equal error rate, DET points and duration buckets.
//!
//! Operating points: a trial is accepted when `score ≥ θ`. With thresholds
//! at every distinct score plus `+∞`, `FRR(θ) = P(target < θ)` and
//! `FAR(θ) = P(nontarget ≥ θ)`. The EER is read where `FAR − FRR` changes
//! sign, linearly interpolated between the two operating points around the
//! crossing.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::denoiser::{denoise, DenoiserModel};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::plda::PldaModel;
use crate::tensor::Vector;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub enroll_key: String,
    pub test_key: String,
    pub is_target: bool,
    pub test_duration_s: Option<f64>,
}

impl Trial {
    pub fn new(enroll: impl Into<String>, test: impl Into<String>, is_target: bool) -> Self {
        Trial {
            enroll_key: enroll.into(),
            test_key: test.into(),
            is_target,
            test_duration_s: None,
        }
    }

    pub fn with_duration(mut self, seconds: f64) -> Self {
        self.test_duration_s = Some(seconds);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrial {
    pub trial: Trial,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSet {
    pub trials: Vec<ScoredTrial>,
}

impl ScoreSet {
    pub fn new(trials: Vec<ScoredTrial>) -> Self {
        ScoreSet { trials }
    }

    /// Builds a set from bare `(score, is_target)` pairs.
    pub fn from_labeled_scores(scores: &[(f64, bool)]) -> Self {
        ScoreSet {
            trials: scores
                .iter()
                .enumerate()
                .map(|(i, &(score, t))| ScoredTrial {
                    trial: Trial::new(format!("e{i}"), format!("t{i}"), t),
                    score,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    fn labeled(&self) -> Result<Vec<(f64, bool)>> {
        self.trials
            .iter()
            .map(|t| {
                if t.score.is_finite() {
                    Ok((t.score, t.trial.is_target))
                } else {
                    Err(Error::Format(format!(
                        "non-finite score for trial {} / {}",
                        t.trial.enroll_key, t.trial.test_key
                    )))
                }
            })
            .collect()
    }
}

/// One operating point of the threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    /// Acceptance threshold; `+∞` for the reject-everything endpoint.
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

fn operating_points(scores: &[(f64, bool)]) -> Result<Vec<DetPoint>> {
    let n_target = scores.iter().filter(|s| s.1).count();
    let n_nontarget = scores.len() - n_target;
    if n_target == 0 || n_nontarget == 0 {
        return Err(Error::EmptyInput(format!(
            "EER needs at least one target and one nontarget trial (got {n_target} targets, {n_nontarget} nontargets)"
        )));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nt, nn) = (n_target as f64, n_nontarget as f64);
    let mut points = Vec::new();
    let (mut targets_below, mut nontargets_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let theta = sorted[i].0;
        points.push(DetPoint {
            threshold: theta,
            far: (n_nontarget - nontargets_below) as f64 / nn,
            frr: targets_below as f64 / nt,
        });
        while i < sorted.len() && sorted[i].0 == theta {
            if sorted[i].1 {
                targets_below += 1;
            } else {
                nontargets_below += 1;
            }
            i += 1;
        }
    }
    points.push(DetPoint {
        threshold: f64::INFINITY,
        far: 0.0,
        frr: 1.0,
    });
    Ok(points)
}

/// Interpolated crossing of `FAR` and `FRR` along a monotone sweep.
pub fn eer_from_points(points: &[DetPoint]) -> Option<Eer> {
    let gap = |p: &DetPoint| p.far - p.frr;
    let k = points.iter().position(|p| gap(p) <= 0.0)?;
    let cur = points[k];
    if gap(&cur) == 0.0 || k == 0 {
        return Some(Eer {
            eer: cur.far,
            threshold: cur.threshold,
        });
    }
    let prev = points[k - 1];
    let t = gap(&prev) / (gap(&prev) - gap(&cur));
    let eer = prev.far + t * (cur.far - prev.far);
    let threshold = if cur.threshold.is_finite() {
        prev.threshold + t * (cur.threshold - prev.threshold)
    } else {
        prev.threshold
    };
    Some(Eer { eer, threshold })
}

pub fn compute_eer(scores: &ScoreSet) -> Result<Eer> {
    let points = operating_points(&scores.labeled()?)?;
    Ok(eer_from_points(&points).expect("sweep ends at FAR=0, FRR=1"))
}

/// Operating points sorted by threshold, from `(FAR=1, FRR=0)` to `(0, 1)`.
pub fn det_points(scores: &ScoreSet) -> Result<Vec<DetPoint>> {
    operating_points(&scores.labeled()?)
}

/// Test-duration buckets, lower bound inclusive and upper bound exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Bucket {
    #[serde(rename = "s<2")]
    Under2,
    #[serde(rename = "2<=s<4")]
    From2To4,
    #[serde(rename = "4<=s<6")]
    From4To6,
    #[serde(rename = "6<=s<8")]
    From6To8,
    #[serde(rename = "8<=s<10")]
    From8To10,
    #[serde(rename = "10<=s<12")]
    From10To12,
    #[serde(rename = "s>=12")]
    Over12,
}

impl Bucket {
    pub const ALL: [Bucket; 7] = [
        Bucket::Under2,
        Bucket::From2To4,
        Bucket::From4To6,
        Bucket::From6To8,
        Bucket::From8To10,
        Bucket::From10To12,
        Bucket::Over12,
    ];

    pub fn for_duration(seconds: f64) -> Bucket {
        let idx = if seconds < 2.0 {
            0
        } else if seconds >= 12.0 {
            6
        } else {
            (seconds / 2.0).floor() as usize
        };
        Bucket::ALL[idx]
    }

    pub fn label(self) -> &'static str {
        match self {
            Bucket::Under2 => "s<2",
            Bucket::From2To4 => "2<=s<4",
            Bucket::From4To6 => "4<=s<6",
            Bucket::From6To8 => "6<=s<8",
            Bucket::From8To10 => "8<=s<10",
            Bucket::From10To12 => "10<=s<12",
            Bucket::Over12 => "s>=12",
        }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BucketedTrials {
    pub buckets: BTreeMap<Bucket, Vec<Trial>>,
    /// Trials without a (positive) duration.
    pub unbucketed: Vec<Trial>,
}

pub fn bucket_trials(trials: &[Trial]) -> BucketedTrials {
    let mut out = BucketedTrials::default();
    for t in trials {
        match t.test_duration_s {
            Some(d) if d > 0.0 && d.is_finite() => out
                .buckets
                .entry(Bucket::for_duration(d))
                .or_default()
                .push(t.clone()),
            _ => out.unbucketed.push(t.clone()),
        }
    }
    out
}

/// `100·(baseline − system)/baseline`.
pub fn relative_improvement(baseline_eer: f64, system_eer: f64) -> Result<f64> {
    if !(baseline_eer > 0.0) {
        return Err(Error::Config(format!(
            "relative improvement needs a positive baseline EER, got {baseline_eer}"
        )));
    }
    Ok(100.0 * (baseline_eer - system_eer) / baseline_eer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub bucket: Bucket,
    pub n_target: usize,
    pub n_nontarget: usize,
    /// Absent when the bucket lacks targets or nontargets.
    pub eer: Option<f64>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub overall_eer: f64,
    pub overall_threshold: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
    /// Non-empty buckets only, in duration order.
    pub buckets: Vec<BucketReport>,
    pub unbucketed: usize,
    #[serde(skip)]
    pub det_points: Vec<DetPoint>,
}

impl EvalReport {
    pub fn bucket(&self, b: Bucket) -> Option<&BucketReport> {
        self.buckets.iter().find(|r| r.bucket == b)
    }

    pub fn bucket_eers(&self) -> BTreeMap<Bucket, f64> {
        self.buckets
            .iter()
            .filter_map(|r| r.eer.map(|e| (r.bucket, e)))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(REPORT_SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(Error::UnsupportedVersion {
                    found: v as u32,
                    supported: REPORT_SCHEMA_VERSION,
                })
            }
            None => return Err(Error::Format("report has no schema_version".into())),
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn det_csv(&self) -> String {
        let mut out = String::from("threshold,far,frr\n");
        for p in &self.det_points {
            out.push_str(&format!("{},{},{}\n", p.threshold, p.far, p.frr));
        }
        out
    }
}

/// Overall and per-bucket EER of a scored trial list.
pub fn evaluate(scores: &ScoreSet) -> Result<EvalReport> {
    let overall = compute_eer(scores)?;
    let det = det_points(scores)?;
    let n_target = scores.trials.iter().filter(|t| t.trial.is_target).count();
    let mut per_bucket: BTreeMap<Bucket, Vec<ScoredTrial>> = BTreeMap::new();
    let mut unbucketed = 0;
    for st in &scores.trials {
        match st.trial.test_duration_s {
            Some(d) if d > 0.0 && d.is_finite() => per_bucket
                .entry(Bucket::for_duration(d))
                .or_default()
                .push(st.clone()),
            _ => unbucketed += 1,
        }
    }
    let buckets = per_bucket
        .into_iter()
        .map(|(bucket, trials)| {
            let nt = trials.iter().filter(|t| t.trial.is_target).count();
            let set = ScoreSet::new(trials);
            let eer = compute_eer(&set).ok();
            BucketReport {
                bucket,
                n_target: nt,
                n_nontarget: set.len() - nt,
                eer: eer.map(|e| e.eer),
                threshold: eer.map(|e| e.threshold),
            }
        })
        .collect();
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        overall_eer: overall.eer,
        overall_threshold: overall.threshold,
        n_target,
        n_nontarget: scores.len() - n_target,
        buckets,
        unbucketed,
        det_points: det,
    })
}

/// Which sides of a trial pass through the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DenoiseSides {
    #[default]
    Both,
    Test,
}

impl std::str::FromStr for DenoiseSides {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(DenoiseSides::Both),
            "test" => Ok(DenoiseSides::Test),
            other => Err(Error::Config(format!("unknown denoise sides `{other}`"))),
        }
    }
}

fn index_by_key(set: &[Embedding]) -> HashMap<&str, usize> {
    set.iter()
        .enumerate()
        .map(|(i, e)| (e.key.as_str(), i))
        .collect()
}

/// Optional denoising, preprocessing and PLDA scoring of every trial.
pub fn score_trials(
    enroll: &[Embedding],
    test: &[Embedding],
    denoiser: Option<(&DenoiserModel, DenoiseSides)>,
    plda: &PldaModel,
    trials: &[Trial],
) -> Result<ScoreSet> {
    let enroll_idx = index_by_key(enroll);
    let test_idx = index_by_key(test);
    for t in trials {
        if !enroll_idx.contains_key(t.enroll_key.as_str()) {
            return Err(Error::UnknownKey(format!("{} (enrollment)", t.enroll_key)));
        }
        if !test_idx.contains_key(t.test_key.as_str()) {
            return Err(Error::UnknownKey(format!("{} (test)", t.test_key)));
        }
    }
    let (enroll, test) = match denoiser {
        Some((model, sides)) => {
            let e = match sides {
                DenoiseSides::Both => denoise(model, enroll)?,
                DenoiseSides::Test => enroll.to_vec(),
            };
            (e, denoise(model, test)?)
        }
        None => (enroll.to_vec(), test.to_vec()),
    };
    let prep = |set: &[Embedding]| -> Result<Vec<Vector>> {
        set.iter()
            .map(|e| plda.preprocessing.apply(&e.key, &e.vector))
            .collect()
    };
    let (enroll_v, test_v) = (prep(&enroll)?, prep(&test)?);
    let scorer = plda.scorer()?;
    let scored = trials
        .iter()
        .map(|t| {
            let e = &enroll_v[enroll_idx[t.enroll_key.as_str()]];
            let v = &test_v[test_idx[t.test_key.as_str()]];
            Ok(ScoredTrial {
                trial: t.clone(),
                score: scorer.score(e, v)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreSet::new(scored))
}

/// Full pipeline: denoise (optional) → preprocess → PLDA → EER report.
pub fn run_protocol(
    enroll: &[Embedding],
    test: &[Embedding],
    denoiser: Option<(&DenoiserModel, DenoiseSides)>,
    plda: &PldaModel,
    trials: &[Trial],
) -> Result<EvalReport> {
    evaluate(&score_trials(enroll, test, denoiser, plda, trials)?)
}

/// Per-bucket relative improvement of `system` over `baseline`, for buckets
/// with an EER in both reports, followed by the overall figure.
pub fn improvement_table(
    baseline: &EvalReport,
    system: &EvalReport,
) -> Result<Vec<ImprovementRow>> {
    let base = baseline.bucket_eers();
    let sys = system.bucket_eers();
    let mut rows = Vec::new();
    for b in Bucket::ALL {
        if let (Some(&be), Some(&se)) = (base.get(&b), sys.get(&b)) {
            rows.push(ImprovementRow {
                label: b.label().to_string(),
                baseline_eer: be,
                system_eer: se,
                relative_improvement_pct: relative_improvement(be, se).ok(),
            });
        }
    }
    rows.push(ImprovementRow {
        label: "overall".into(),
        baseline_eer: baseline.overall_eer,
        system_eer: system.overall_eer,
        relative_improvement_pct: relative_improvement(baseline.overall_eer, system.overall_eer)
            .ok(),
    });
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImprovementRow {
    pub label: String,
    pub baseline_eer: f64,
    pub system_eer: f64,
    /// `None` when the baseline EER is zero.
    pub relative_improvement_pct: Option<f64>,
}
