//! Tab-separated manifests: no header row, `\n` line endings, no tabs
//! inside fields. Optional numeric fields are written as empty strings.

use std::path::Path;

use crate::embedding::{PairRecord, UtteranceLabel};
use crate::error::{Error, Result};
use crate::eval::{ScoredTrial, Trial};

fn manifest_err<T>(path: &Path, line: usize, detail: impl Into<String>) -> Result<T> {
    Err(Error::Manifest {
        path: path.to_path_buf(),
        line,
        detail: detail.into(),
    })
}

/// Splits `text` into rows of exactly `n_fields` fields. Line numbers in
/// errors are 1-based.
fn rows<'a>(text: &'a str, n_fields: usize, path: &Path) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Ok(Vec::new());
    }
    body.split('\n')
        .enumerate()
        .map(|(i, line)| {
            let n = i + 1;
            if line.contains('\r') {
                return manifest_err(path, n, "carriage return in line (expected \\n endings)");
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != n_fields {
                return manifest_err(
                    path,
                    n,
                    format!(
                        "expected {n_fields} tab-separated fields, found {}",
                        fields.len()
                    ),
                );
            }
            Ok((n, fields))
        })
        .collect()
}

fn key<'a>(field: &'a str, what: &str, path: &Path, line: usize) -> Result<&'a str> {
    if field.is_empty() {
        manifest_err(path, line, format!("empty {what}"))
    } else {
        Ok(field)
    }
}

fn number(field: &str, what: &str, path: &Path, line: usize) -> Result<f64> {
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => manifest_err(
            path,
            line,
            format!("{what} `{field}` is not a finite number"),
        ),
    }
}

fn optional_number(field: &str, what: &str, path: &Path, line: usize) -> Result<Option<f64>> {
    if field.is_empty() {
        Ok(None)
    } else {
        number(field, what, path, line).map(Some)
    }
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = super::read_bytes(path)?;
    String::from_utf8(bytes).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        line: 0,
        detail: format!("not UTF-8: {e}"),
    })
}

fn check_field(f: &str) -> Result<&str> {
    if f.contains(['\t', '\n', '\r']) {
        Err(Error::Format(format!(
            "field {f:?} contains a tab or line break"
        )))
    } else {
        Ok(f)
    }
}

fn format_number(v: f64) -> Result<String> {
    if v.is_finite() {
        Ok(format!("{v}"))
    } else {
        Err(Error::Format(format!("cannot write non-finite value {v}")))
    }
}

fn join(fields: &[&str]) -> Result<String> {
    let mut line = String::new();
    for (i, f) in fields.iter().enumerate() {
        if i > 0 {
            line.push('\t');
        }
        line.push_str(check_field(f)?);
    }
    line.push('\n');
    Ok(line)
}

pub fn parse_pairs(text: &str, path: &Path) -> Result<Vec<PairRecord>> {
    rows(text, 4, path)?
        .into_iter()
        .map(|(n, f)| {
            Ok(PairRecord {
                noisy_key: key(f[0], "noisy key", path, n)?.to_string(),
                clean_key: key(f[1], "clean key", path, n)?.to_string(),
                snr_db: optional_number(f[2], "snr_db", path, n)?,
                noise_id: (!f[3].is_empty()).then(|| f[3].to_string()),
            })
        })
        .collect()
}

pub fn format_pairs(records: &[PairRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let snr = r.snr_db.map(format_number).transpose()?.unwrap_or_default();
        out.push_str(&join(&[
            &r.noisy_key,
            &r.clean_key,
            &snr,
            r.noise_id.as_deref().unwrap_or(""),
        ])?);
    }
    Ok(out)
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<UtteranceLabel>> {
    rows(text, 3, path)?
        .into_iter()
        .map(|(n, f)| {
            let duration_s = optional_number(f[2], "duration_s", path, n)?;
            if duration_s.is_some_and(|d| d <= 0.0) {
                return manifest_err(path, n, format!("duration `{}` must be positive", f[2]));
            }
            Ok(UtteranceLabel {
                key: key(f[0], "key", path, n)?.to_string(),
                speaker: key(f[1], "speaker id", path, n)?.to_string(),
                duration_s,
            })
        })
        .collect()
}

pub fn format_labels(labels: &[UtteranceLabel]) -> Result<String> {
    let mut out = String::new();
    for l in labels {
        let d = l
            .duration_s
            .map(format_number)
            .transpose()?
            .unwrap_or_default();
        out.push_str(&join(&[&l.key, &l.speaker, &d])?);
    }
    Ok(out)
}

fn target_flag(field: &str, path: &Path, line: usize) -> Result<bool> {
    match field {
        "target" => Ok(true),
        "nontarget" => Ok(false),
        other => manifest_err(
            path,
            line,
            format!("expected target|nontarget, found `{other}`"),
        ),
    }
}

fn flag_str(is_target: bool) -> &'static str {
    if is_target {
        "target"
    } else {
        "nontarget"
    }
}

pub fn parse_trials(text: &str, path: &Path) -> Result<Vec<Trial>> {
    rows(text, 3, path)?
        .into_iter()
        .map(|(n, f)| {
            Ok(Trial::new(
                key(f[0], "enroll key", path, n)?,
                key(f[1], "test key", path, n)?,
                target_flag(f[2], path, n)?,
            ))
        })
        .collect()
}

pub fn format_trials(trials: &[Trial]) -> Result<String> {
    let mut out = String::new();
    for t in trials {
        out.push_str(&join(&[&t.enroll_key, &t.test_key, flag_str(t.is_target)])?);
    }
    Ok(out)
}

pub fn parse_scores(text: &str, path: &Path) -> Result<Vec<ScoredTrial>> {
    rows(text, 4, path)?
        .into_iter()
        .map(|(n, f)| {
            Ok(ScoredTrial {
                trial: Trial::new(
                    key(f[0], "enroll key", path, n)?,
                    key(f[1], "test key", path, n)?,
                    target_flag(f[2], path, n)?,
                ),
                score: number(f[3], "score", path, n)?,
            })
        })
        .collect()
}

pub fn format_scores(scores: &[ScoredTrial]) -> Result<String> {
    let mut out = String::new();
    for s in scores {
        let score = format_number(s.score)?;
        out.push_str(&join(&[
            &s.trial.enroll_key,
            &s.trial.test_key,
            flag_str(s.trial.is_target),
            &score,
        ])?);
    }
    Ok(out)
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    parse_pairs(&read_text(path)?, path)
}

pub fn write_pairs(records: &[PairRecord], path: &Path) -> Result<()> {
    super::write_atomic(path, format_pairs(records)?.as_bytes())
}

pub fn read_labels(path: &Path) -> Result<Vec<UtteranceLabel>> {
    parse_labels(&read_text(path)?, path)
}

pub fn write_labels(labels: &[UtteranceLabel], path: &Path) -> Result<()> {
    super::write_atomic(path, format_labels(labels)?.as_bytes())
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    parse_trials(&read_text(path)?, path)
}

pub fn write_trials(trials: &[Trial], path: &Path) -> Result<()> {
    super::write_atomic(path, format_trials(trials)?.as_bytes())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoredTrial>> {
    parse_scores(&read_text(path)?, path)
}

pub fn write_scores(scores: &[ScoredTrial], path: &Path) -> Result<()> {
    super::write_atomic(path, format_scores(scores)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("m.tsv")
    }

    #[test]
    fn pair_manifest_round_trip() {
        let text = "n1\tc1\t3.5\tseen001\nn2\tc1\t\t\n";
        let recs = parse_pairs(text, p()).unwrap();
        assert_eq!(recs[0].snr_db, Some(3.5));
        assert_eq!(recs[1].snr_db, None);
        assert_eq!(recs[1].noise_id, None);
        assert_eq!(format_pairs(&recs).unwrap(), text);
    }

    #[test]
    fn label_manifest() {
        let text = "a\tspk1\t2.25\nb\tspk2\t\n";
        let l = parse_labels(text, p()).unwrap();
        assert_eq!(l[0].duration_s, Some(2.25));
        assert_eq!(format_labels(&l).unwrap(), text);
        assert!(parse_labels("a\tspk\t0\n", p()).is_err());
        assert!(parse_labels("a\tspk\tx\n", p()).is_err());
    }

    #[test]
    fn trials_and_scores() {
        let text = "e\tt\ttarget\ne\tu\tnontarget\n";
        let t = parse_trials(text, p()).unwrap();
        assert!(t[0].is_target && !t[1].is_target);
        assert_eq!(format_trials(&t).unwrap(), text);
        let s = parse_scores("e\tt\ttarget\t-1.25\n", p()).unwrap();
        assert_eq!(s[0].score, -1.25);
        assert!(parse_trials("e\tt\tyes\n", p()).is_err());
    }

    #[test]
    fn empty_file_has_no_rows() {
        assert!(parse_scores("", p()).unwrap().is_empty());
        assert!(parse_trials("\n", p()).unwrap().is_empty());
        assert!(parse_trials("e\tt\ttarget\n\n", p()).is_err());
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let err = parse_trials("e\tt\ttarget\ne\tt\n", p()).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 2, .. }), "{err:?}");
        let err = parse_trials("e\tt\ttarget\r\n", p()).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 1, .. }));
        let err = parse_trials("\tt\ttarget\n", p()).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 1, .. }));
    }

    #[test]
    fn writers_reject_tabs_in_fields() {
        let t = vec![Trial::new("a\tb", "c", true)];
        assert!(matches!(format_trials(&t), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn scores_round_trip_bit_exactly(
            rows in proptest::collection::vec(("[a-z0-9_-]{1,8}", "[a-z0-9_-]{1,8}", any::<bool>(), -1e6f64..1e6), 0..30)
        ) {
            let scores: Vec<ScoredTrial> = rows.iter().map(|(e, t, tg, s)| ScoredTrial {
                trial: Trial::new(e.clone(), t.clone(), *tg),
                score: *s,
            }).collect();
            let text = format_scores(&scores).unwrap();
            let back = parse_scores(&text, p()).unwrap();
            prop_assert_eq!(back.len(), scores.len());
            for (a, b) in back.iter().zip(&scores) {
                prop_assert_eq!(&a.trial, &b.trial);
                prop_assert_eq!(a.score.to_bits(), b.score.to_bits());
            }
        }
    }
}
