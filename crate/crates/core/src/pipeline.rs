//! End-to-end runs on a synthetic corpus: train PLDA on clean embeddings,
//! train denoisers on noisy/clean pairs, score clean, noisy and denoised
//! test trials.

use serde::Serialize;

use crate::config::{Settings, TrainSettings};
use crate::denoiser::{
    build_dae, build_stacked_blocks, denoise, train_denoiser, Architecture, DenoiserModel,
    DenoiserVariant,
};
use crate::embedding::EmbeddingPair;
use crate::error::{Error, Result};
use crate::eval::{run_protocol, DenoiseSides, EvalReport};
use crate::nnet::TrainHistory;
use crate::plda::{train_plda, PldaModel};
use crate::synth::{corrupt_at_snr, gen_corpus, Corpus};

pub fn build_variant(
    arch: Architecture,
    dim: usize,
    train: &TrainSettings,
    seed: u64,
) -> Result<DenoiserVariant> {
    Ok(match arch {
        Architecture::Dae => DenoiserVariant::Plain(build_dae(dim, train.hidden, seed)?),
        Architecture::Stacked => {
            DenoiserVariant::Stacked(build_stacked_blocks(dim, train.hidden, train.blocks, seed)?)
        }
    })
}

/// Training settings echoed into model files.
pub fn config_echo(
    arch: Architecture,
    train: &TrainSettings,
    seed: u64,
) -> Result<serde_json::Value> {
    #[derive(Serialize)]
    struct Echo<'a> {
        arch: &'static str,
        seed: u64,
        #[serde(flatten)]
        train: &'a TrainSettings,
    }
    Ok(serde_json::to_value(Echo {
        arch: arch.tag(),
        seed,
        train,
    })?)
}

pub fn train_architecture(
    arch: Architecture,
    train: &TrainSettings,
    seed: u64,
    pairs: &[EmbeddingPair],
    dev_pairs: &[EmbeddingPair],
) -> Result<(DenoiserModel, TrainHistory)> {
    let dim = pairs
        .first()
        .map(EmbeddingPair::dim)
        .ok_or_else(|| Error::EmptyInput("no training pairs".into()))?;
    let variant = build_variant(arch, dim, train, seed)?;
    train_denoiser(variant, pairs, dev_pairs, &train.train_config(seed))
}

/// Mean squared error over all elements between the denoised noisy side and
/// the clean side of `pairs`; `None` compares noisy to clean directly.
pub fn pair_mse(model: Option<&DenoiserModel>, pairs: &[EmbeddingPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no pairs".into()));
    }
    let noisy: Vec<_> = pairs
        .iter()
        .map(|p| crate::embedding::Embedding::new(p.key.clone(), p.noisy.clone()))
        .collect();
    let estimate = match model {
        Some(m) => denoise(m, &noisy)?,
        None => noisy,
    };
    let (mut sum, mut n) = (0.0, 0usize);
    for (e, p) in estimate.iter().zip(pairs) {
        for (a, b) in e.vector.iter().zip(p.clean.iter()) {
            sum += (a - b) * (a - b);
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone)]
pub struct SystemResult {
    pub arch: Architecture,
    pub model: DenoiserModel,
    pub history: TrainHistory,
    pub report: EvalReport,
    pub dev_mse: f64,
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    pub corpus: Corpus,
    pub plda: PldaModel,
    pub clean: EvalReport,
    pub noisy: EvalReport,
    pub noisy_dev_mse: f64,
    pub systems: Vec<SystemResult>,
}

impl BenchmarkOutcome {
    pub fn system(&self, arch: Architecture) -> Option<&SystemResult> {
        self.systems.iter().find(|s| s.arch == arch)
    }
}

pub fn train_corpus_plda(corpus: &Corpus, settings: &Settings) -> Result<PldaModel> {
    let p = &settings.plda;
    Ok(train_plda(
        &corpus.plda_training_set()?,
        p.center,
        p.length_norm,
        p.iters,
    )?
    .0)
}

/// Generates the corpus, trains PLDA and every configured denoiser, and
/// evaluates clean, noisy and denoised test trials.
pub fn run_benchmark(settings: &Settings) -> Result<BenchmarkOutcome> {
    let corpus = gen_corpus(&settings.corpus)?;
    let plda = train_corpus_plda(&corpus, settings)?;
    let clean = run_protocol(
        &corpus.enroll,
        &corpus.test_clean,
        None,
        &plda,
        &corpus.trials,
    )?;
    let noisy = run_protocol(
        &corpus.enroll,
        &corpus.test_noisy,
        None,
        &plda,
        &corpus.trials,
    )?;
    log::info!(
        "clean EER {:.4}, noisy EER {:.4}",
        clean.overall_eer,
        noisy.overall_eer
    );
    let pairs = corpus.train_pair_set()?;
    let dev = corpus.dev_pair_set()?;
    let noisy_dev_mse = pair_mse(None, &dev)?;
    let mut systems = Vec::new();
    for arch in settings.sweep.architectures()? {
        let (model, history) =
            train_architecture(arch, &settings.train, settings.seed(), &pairs, &dev)?;
        let report = run_protocol(
            &corpus.enroll,
            &corpus.test_noisy,
            Some((&model, settings.sweep.denoise_sides)),
            &plda,
            &corpus.trials,
        )?;
        let dev_mse = pair_mse(Some(&model), &dev)?;
        log::info!(
            "{} EER {:.4}, dev MSE {dev_mse:.5}",
            arch.tag(),
            report.overall_eer
        );
        systems.push(SystemResult {
            arch,
            model,
            history,
            report,
            dev_mse,
        });
    }
    Ok(BenchmarkOutcome {
        corpus,
        plda,
        clean,
        noisy,
        noisy_dev_mse,
        systems,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub snr_db: f64,
    pub system: String,
    pub eer: f64,
}

/// EER of every system with the test side re-corrupted at each grid SNR.
pub fn snr_sweep(
    outcome: &BenchmarkOutcome,
    grid: &[f64],
    sides: DenoiseSides,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let c = &outcome.corpus;
    let mut rows = Vec::new();
    for &snr in grid {
        let test = corrupt_at_snr(c, snr, seed)?;
        let mut push = |system: &str, model: Option<&DenoiserModel>| -> Result<()> {
            let report = run_protocol(
                &c.enroll,
                &test,
                model.map(|m| (m, sides)),
                &outcome.plda,
                &c.trials,
            )?;
            rows.push(SweepRow {
                snr_db: snr,
                system: system.to_string(),
                eer: report.overall_eer,
            });
            Ok(())
        };
        push("noisy", None)?;
        for s in &outcome.systems {
            push(s.arch.tag(), Some(&s.model))?;
        }
        rows.push(SweepRow {
            snr_db: snr,
            system: "clean".into(),
            eer: outcome.clean.overall_eer,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("snr_db,system,eer\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.snr_db, r.system, r.eer));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::CorpusConfig;

    fn tiny() -> Settings {
        Settings {
            corpus: CorpusConfig {
                dim: 6,
                n_speakers: 12,
                utts_per_speaker: 4,
                n_dev_speakers: 3,
                n_test_speakers: 6,
                test_utts_per_speaker: 4,
                enroll_per_speaker: 2,
                n_noise_prototypes_train: 6,
                n_noise_prototypes_unseen: 3,
                noise_rank: 2,
                max_nontarget_per_enroll: 5,
                seed: 5,
                ..CorpusConfig::default()
            },
            train: TrainSettings {
                epochs: 3,
                hidden: 8,
                batch: 8,
                ..TrainSettings::default()
            },
            ..Settings::default()
        }
    }

    #[test]
    fn tiny_benchmark_runs_end_to_end() {
        let out = run_benchmark(&tiny()).unwrap();
        assert_eq!(out.systems.len(), 2);
        assert!(out.noisy_dev_mse > 0.0);
        for s in &out.systems {
            assert!((0.0..=1.0).contains(&s.report.overall_eer));
            assert_eq!(s.history.epochs.len(), 3);
        }
        let rows = snr_sweep(&out, &[0.0, 10.0], DenoiseSides::Both, 5).unwrap();
        assert_eq!(rows.len(), 2 * 4);
        assert!(sweep_csv(&rows).starts_with("snr_db,system,eer\n"));
    }

    #[test]
    fn pair_mse_of_identity_is_noise_power() {
        let pairs = vec![
            EmbeddingPair::new("a", vec![1.0, 2.0], vec![0.0, 2.0]).unwrap(),
            EmbeddingPair::new("b", vec![0.0, 0.0], vec![0.0, 1.0]).unwrap(),
        ];
        assert_eq!(pair_mse(None, &pairs).unwrap(), 0.5);
        assert!(pair_mse(None, &[]).is_err());
    }
}
