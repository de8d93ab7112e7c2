//! Synthetic embedding corpus.
//!
//! Speakers are Gaussian: a speaker mean `m ~ N(0, B)` and utterances
//! `x = m + N(0, W)` with diagonal `B = between_var·I`, `W = within_var·I`.
//! Noise is additive in embedding space: a prototype direction scaled so
//! that `‖noisy − clean‖ = 10^(−snr/20)·‖clean‖`, plus optional isotropic
//! jitter. Prototype directions are drawn from a shared low-rank subspace,
//! so held-out prototypes are new directions from the same family.

use std::collections::{HashMap, HashSet};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::embedding::{resolve_pairs, Embedding, EmbeddingPair, PairRecord, UtteranceLabel};
use crate::error::{Error, Result};
use crate::eval::Trial;
use crate::rng::{self, Rng};
use crate::tensor::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub dim: usize,
    /// Speakers whose clean embeddings train PLDA and the denoisers.
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    /// Extra held-out speakers providing the denoiser dev pairs.
    pub n_dev_speakers: usize,
    pub n_test_speakers: usize,
    pub test_utts_per_speaker: usize,
    /// Leading utterances of each test speaker used (clean) for enrollment.
    pub enroll_per_speaker: usize,
    pub n_noise_prototypes_train: usize,
    pub n_noise_prototypes_unseen: usize,
    /// Rank of the subspace prototype directions are drawn from.
    pub noise_rank: usize,
    pub snr_low_db: f64,
    pub snr_high_db: f64,
    pub noisy_versions_per_clean: usize,
    pub jitter_sigma: f64,
    pub between_var: f64,
    pub within_var: f64,
    pub duration_min_s: f64,
    pub duration_max_s: f64,
    /// Adds `duration_variance_scale / duration_s` to the within-speaker
    /// variance of every utterance, so short utterances are harder. Zero
    /// leaves durations as pure metadata.
    pub duration_variance_scale: f64,
    pub max_nontarget_per_enroll: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            dim: 64,
            n_speakers: 200,
            utts_per_speaker: 10,
            n_dev_speakers: 20,
            n_test_speakers: 40,
            test_utts_per_speaker: 10,
            enroll_per_speaker: 5,
            n_noise_prototypes_train: 50,
            n_noise_prototypes_unseen: 20,
            noise_rank: 4,
            snr_low_db: 0.0,
            snr_high_db: 15.0,
            noisy_versions_per_clean: 1,
            jitter_sigma: 0.1,
            between_var: 4.0,
            within_var: 1.0,
            duration_min_s: 1.0,
            duration_max_s: 15.0,
            duration_variance_scale: 4.0,
            max_nontarget_per_enroll: 50,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim < 2 {
            return bad(format!("dim must be >= 2, got {}", self.dim));
        }
        for (name, v) in [
            ("n_speakers", self.n_speakers),
            ("utts_per_speaker", self.utts_per_speaker),
            ("n_test_speakers", self.n_test_speakers),
            ("n_noise_prototypes_train", self.n_noise_prototypes_train),
            ("n_noise_prototypes_unseen", self.n_noise_prototypes_unseen),
            ("noise_rank", self.noise_rank),
            ("noisy_versions_per_clean", self.noisy_versions_per_clean),
            ("enroll_per_speaker", self.enroll_per_speaker),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.test_utts_per_speaker <= self.enroll_per_speaker {
            return bad(format!(
                "test_utts_per_speaker ({}) must exceed enroll_per_speaker ({})",
                self.test_utts_per_speaker, self.enroll_per_speaker
            ));
        }
        if !(self.snr_low_db.is_finite() && self.snr_high_db.is_finite())
            || self.snr_low_db > self.snr_high_db
        {
            return bad(format!(
                "snr range [{}, {}] is not a finite ordered interval",
                self.snr_low_db, self.snr_high_db
            ));
        }
        if !(self.duration_min_s > 0.0 && self.duration_min_s <= self.duration_max_s)
            || !self.duration_max_s.is_finite()
        {
            return bad(format!(
                "duration range [{}, {}] must be positive and ordered",
                self.duration_min_s, self.duration_max_s
            ));
        }
        for (name, v) in [
            ("jitter_sigma", self.jitter_sigma),
            ("between_var", self.between_var),
            ("duration_variance_scale", self.duration_variance_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.within_var > 0.0 && self.within_var.is_finite()) {
            return bad(format!(
                "within_var must be positive, got {}",
                self.within_var
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePrototype {
    pub id: String,
    pub direction: Vector,
}

impl NoisePrototype {
    pub fn new(id: impl Into<String>, direction: impl Into<Vector>) -> Result<Self> {
        let id = id.into();
        let direction = direction.into();
        if !(direction.norm() > 0.0) {
            return Err(Error::ZeroVector(id));
        }
        Ok(NoisePrototype { id, direction })
    }
}

/// `clean + g·d/‖d‖ + ε` with `g = 10^(−snr_db/20)·‖clean‖` and
/// `ε ~ N(0, jitter_sigma²·I)`.
pub fn add_embedding_noise(
    clean: &[f64],
    proto: &NoisePrototype,
    snr_db: f64,
    jitter_sigma: f64,
    rng: &mut Rng,
) -> Result<Vector> {
    if clean.len() != proto.direction.dim() {
        return crate::error::shape_err(format!(
            "clean dim {} vs prototype `{}` dim {}",
            clean.len(),
            proto.id,
            proto.direction.dim()
        ));
    }
    let clean_norm = clean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if clean_norm == 0.0 {
        return Err(Error::ZeroVector("clean embedding".into()));
    }
    let g = 10f64.powf(-snr_db / 20.0) * clean_norm / proto.direction.norm();
    let mut out: Vec<f64> = clean
        .iter()
        .zip(proto.direction.iter())
        .map(|(c, d)| c + g * d)
        .collect();
    if jitter_sigma > 0.0 {
        for v in &mut out {
            *v += jitter_sigma * rng::normal(rng);
        }
    }
    Ok(Vector(out))
}

/// Everything one seeded generation run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub train_clean: Vec<Embedding>,
    pub train_noisy: Vec<Embedding>,
    /// Pairs of the training speakers.
    pub train_pairs: Vec<PairRecord>,
    /// Pairs of the held-out dev speakers (same archives as the train pairs).
    pub dev_pairs: Vec<PairRecord>,
    /// Labels of every clean train-side embedding (PLDA training set).
    pub train_labels: Vec<UtteranceLabel>,
    pub enroll: Vec<Embedding>,
    pub test_clean: Vec<Embedding>,
    /// Same keys as `test_clean`, corrupted with unseen prototypes only.
    pub test_noisy: Vec<Embedding>,
    /// Noise applied to each test embedding (`noisy_key == clean_key`).
    pub test_noise: Vec<PairRecord>,
    /// Labels of the enrollment and test embeddings, with durations.
    pub test_labels: Vec<UtteranceLabel>,
    pub trials: Vec<Trial>,
    pub train_prototypes: Vec<NoisePrototype>,
    pub unseen_prototypes: Vec<NoisePrototype>,
}

impl Corpus {
    pub fn train_pair_set(&self) -> Result<Vec<EmbeddingPair>> {
        resolve_pairs(&self.train_pairs, &self.train_noisy, &self.train_clean)
    }

    pub fn dev_pair_set(&self) -> Result<Vec<EmbeddingPair>> {
        resolve_pairs(&self.dev_pairs, &self.train_noisy, &self.train_clean)
    }

    /// `(speaker, embedding)` rows for PLDA training.
    pub fn plda_training_set(&self) -> Result<Vec<(String, Embedding)>> {
        labeled(&self.train_labels, &self.train_clean)
    }
}

/// Joins labels to embeddings by key, in embedding order.
pub fn labeled(labels: &[UtteranceLabel], set: &[Embedding]) -> Result<Vec<(String, Embedding)>> {
    let by_key: HashMap<&str, &UtteranceLabel> =
        labels.iter().map(|l| (l.key.as_str(), l)).collect();
    set.iter()
        .map(|e| {
            by_key
                .get(e.key.as_str())
                .map(|l| (l.speaker.clone(), e.clone()))
                .ok_or_else(|| Error::UnknownKey(format!("{} has no label", e.key)))
        })
        .collect()
}

fn gen_prototypes(cfg: &CorpusConfig) -> Result<(Vec<NoisePrototype>, Vec<NoisePrototype>)> {
    let mut basis_rng = rng::stream(cfg.seed, "noise-subspace", 0);
    let rank = cfg.noise_rank.min(cfg.dim);
    let basis = Matrix::from_vec(
        cfg.dim,
        rank,
        (0..cfg.dim * rank)
            .map(|_| rng::normal(&mut basis_rng))
            .collect(),
    )?;
    let draw = |label: &str, prefix: &str, n: usize| -> Result<Vec<NoisePrototype>> {
        (0..n)
            .map(|i| {
                let mut r = rng::stream(cfg.seed, label, i as u64);
                let coeffs = Vector((0..rank).map(|_| rng::normal(&mut r)).collect());
                NoisePrototype::new(format!("{prefix}{i:03}"), basis.matvec(&coeffs)?)
            })
            .collect()
    };
    Ok((
        draw("noise-train", "seen", cfg.n_noise_prototypes_train)?,
        draw("noise-unseen", "unseen", cfg.n_noise_prototypes_unseen)?,
    ))
}

fn sample_duration(cfg: &CorpusConfig, r: &mut Rng) -> f64 {
    let (lo, hi) = (cfg.duration_min_s.ln(), cfg.duration_max_s.ln());
    if hi > lo {
        r.random_range(lo..hi).exp()
    } else {
        cfg.duration_min_s
    }
}

fn sample_snr(cfg: &CorpusConfig, r: &mut Rng) -> f64 {
    if cfg.snr_high_db > cfg.snr_low_db {
        r.random_range(cfg.snr_low_db..=cfg.snr_high_db)
    } else {
        cfg.snr_low_db
    }
}

struct Speaker {
    utterances: Vec<(Vector, f64)>,
}

fn gen_speaker(cfg: &CorpusConfig, label: &str, index: usize, n_utts: usize) -> Speaker {
    let mut r = rng::stream(cfg.seed, label, index as u64);
    let sb = cfg.between_var.sqrt();
    let mean: Vec<f64> = (0..cfg.dim).map(|_| sb * rng::normal(&mut r)).collect();
    let utterances = (0..n_utts)
        .map(|_| {
            let duration = sample_duration(cfg, &mut r);
            let var = cfg.within_var + cfg.duration_variance_scale / duration;
            let sw = var.sqrt();
            let x = mean.iter().map(|m| m + sw * rng::normal(&mut r)).collect();
            (Vector(x), duration)
        })
        .collect();
    Speaker { utterances }
}

fn corrupt(
    cfg: &CorpusConfig,
    clean: &[f64],
    prototypes: &[NoisePrototype],
    snr_db: Option<f64>,
    r: &mut Rng,
) -> Result<(Vector, f64, String)> {
    let proto = &prototypes[r.random_range(0..prototypes.len())];
    let snr = snr_db.unwrap_or_else(|| sample_snr(cfg, r));
    let noisy = add_embedding_noise(clean, proto, snr, cfg.jitter_sigma, r)?;
    Ok((noisy, snr, proto.id.clone()))
}

pub fn gen_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let (train_prototypes, unseen_prototypes) = gen_prototypes(cfg)?;
    let mut corpus = Corpus {
        config: cfg.clone(),
        train_clean: Vec::new(),
        train_noisy: Vec::new(),
        train_pairs: Vec::new(),
        dev_pairs: Vec::new(),
        train_labels: Vec::new(),
        enroll: Vec::new(),
        test_clean: Vec::new(),
        test_noisy: Vec::new(),
        test_noise: Vec::new(),
        test_labels: Vec::new(),
        trials: Vec::new(),
        train_prototypes,
        unseen_prototypes,
    };

    let n_train_side = cfg.n_speakers + cfg.n_dev_speakers;
    for s in 0..n_train_side {
        let is_dev = s >= cfg.n_speakers;
        let (speaker, label) = if is_dev {
            (format!("dev{:04}", s - cfg.n_speakers), "dev-speaker")
        } else {
            (format!("spk{s:04}"), "train-speaker")
        };
        let idx = if is_dev { s - cfg.n_speakers } else { s };
        let spk = gen_speaker(cfg, label, idx, cfg.utts_per_speaker);
        let mut noise_rng = rng::stream(cfg.seed, &format!("{label}-noise"), idx as u64);
        for (u, (x, duration)) in spk.utterances.into_iter().enumerate() {
            let clean_key = format!("{speaker}-u{u:02}");
            for v in 0..cfg.noisy_versions_per_clean {
                let (noisy, snr, noise_id) =
                    corrupt(cfg, &x, &corpus.train_prototypes, None, &mut noise_rng)?;
                let noisy_key = format!("{clean_key}-n{v}");
                corpus
                    .train_noisy
                    .push(Embedding::new(noisy_key.clone(), noisy));
                let rec = PairRecord {
                    noisy_key,
                    clean_key: clean_key.clone(),
                    snr_db: Some(snr),
                    noise_id: Some(noise_id),
                };
                if is_dev {
                    corpus.dev_pairs.push(rec)
                } else {
                    corpus.train_pairs.push(rec)
                }
            }
            corpus.train_labels.push(UtteranceLabel {
                key: clean_key.clone(),
                speaker: speaker.clone(),
                duration_s: Some(duration),
            });
            corpus.train_clean.push(Embedding::new(clean_key, x));
        }
    }

    for s in 0..cfg.n_test_speakers {
        let speaker = format!("tst{s:03}");
        let spk = gen_speaker(cfg, "test-speaker", s, cfg.test_utts_per_speaker);
        let mut noise_rng = rng::stream(cfg.seed, "test-noise", s as u64);
        for (u, (x, duration)) in spk.utterances.into_iter().enumerate() {
            let key = format!("{speaker}-u{u:02}");
            corpus.test_labels.push(UtteranceLabel {
                key: key.clone(),
                speaker: speaker.clone(),
                duration_s: Some(duration),
            });
            if u < cfg.enroll_per_speaker {
                corpus.enroll.push(Embedding::new(key, x));
                continue;
            }
            let (noisy, snr, noise_id) =
                corrupt(cfg, &x, &corpus.unseen_prototypes, None, &mut noise_rng)?;
            corpus.test_noisy.push(Embedding::new(key.clone(), noisy));
            corpus.test_noise.push(PairRecord {
                noisy_key: key.clone(),
                clean_key: key.clone(),
                snr_db: Some(snr),
                noise_id: Some(noise_id),
            });
            corpus.test_clean.push(Embedding::new(key, x));
        }
    }

    corpus.trials = make_trial_list(
        &corpus.enroll,
        &corpus.test_clean,
        &corpus.test_labels,
        cfg.max_nontarget_per_enroll,
        cfg.seed,
    )?;
    Ok(corpus)
}

/// Test embeddings re-corrupted at a fixed SNR with the unseen prototypes.
pub fn corrupt_at_snr(corpus: &Corpus, snr_db: f64, seed: u64) -> Result<Vec<Embedding>> {
    let mut r = rng::stream(seed, "snr-sweep", snr_db.to_bits());
    corpus
        .test_clean
        .iter()
        .map(|e| {
            let (v, _, _) = corrupt(
                &corpus.config,
                &e.vector,
                &corpus.unseen_prototypes,
                Some(snr_db),
                &mut r,
            )?;
            Ok(Embedding::new(e.key.clone(), v))
        })
        .collect()
}

/// Every same-speaker `(enroll, test)` pair as a target trial, plus up to
/// `max_nontarget_per_enroll` different-speaker test embeddings per
/// enrollment, chosen uniformly without replacement. Trials keep test
/// archive order within each enrollment.
pub fn make_trial_list(
    enroll: &[Embedding],
    test: &[Embedding],
    labels: &[UtteranceLabel],
    max_nontarget_per_enroll: usize,
    seed: u64,
) -> Result<Vec<Trial>> {
    if enroll.is_empty() || test.is_empty() {
        return Err(Error::EmptyInput(format!(
            "trial list needs enrollment and test embeddings (got {} and {})",
            enroll.len(),
            test.len()
        )));
    }
    let by_key: HashMap<&str, &UtteranceLabel> =
        labels.iter().map(|l| (l.key.as_str(), l)).collect();
    let lookup = |key: &str| {
        by_key
            .get(key)
            .copied()
            .ok_or_else(|| Error::UnknownKey(format!("{key} has no label")))
    };
    let test_labels = test
        .iter()
        .map(|e| lookup(&e.key))
        .collect::<Result<Vec<_>>>()?;
    let mut trials = Vec::new();
    for (ei, e) in enroll.iter().enumerate() {
        let speaker = &lookup(&e.key)?.speaker;
        let others: Vec<usize> = (0..test.len())
            .filter(|&i| &test_labels[i].speaker != speaker)
            .collect();
        let k = max_nontarget_per_enroll.min(others.len());
        let mut r = rng::stream(seed, "nontarget", ei as u64);
        let chosen: HashSet<usize> = rand::seq::index::sample(&mut r, others.len(), k)
            .into_iter()
            .map(|j| others[j])
            .collect();
        for (ti, t) in test.iter().enumerate() {
            let is_target = &test_labels[ti].speaker == speaker;
            if is_target || chosen.contains(&ti) {
                let mut trial = Trial::new(e.key.clone(), t.key.clone(), is_target);
                trial.test_duration_s = test_labels[ti].duration_s;
                trials.push(trial);
            }
        }
    }
    Ok(trials)
}
