//! One-command reproduction pipeline: generate data, train the baseline and
//! the mitigated variant, evaluate both, and check the qualitative
//! reversal-curse pattern.
//!
//! Baseline: token-level masking in pretraining, forward-template SFT only.
//! Mitigated: whole-entity masking plus the direction-balanced and
//! inverse-relation splits during SFT. Both variants share the corpus, the
//! instruction template, and every hyperparameter.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusBundle, CorpusConfig, Direction};
use crate::eval::{evaluate_cases, CaseRecord, ErrorBreakdown};
use crate::infer::DecodeConfig;
use crate::masking::MaskMode;
use crate::model::{Denoiser, DenoiserConfig};
use crate::train::{pretrain, sft, Stage, TrainConfig, TrainLog};
use crate::Result;

/// Pass thresholds for the qualitative reproduction, in percent.
pub const BASELINE_FORWARD_MIN: f64 = 90.0;
pub const BASELINE_REVERSE_MAX: f64 = 25.0;
pub const COVERED_REVERSE_MIN: f64 = 80.0;
pub const FORWARD_DROP_MAX: f64 = 2.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReproConfig {
    pub corpus: CorpusConfig,
    pub pretrain_epochs: usize,
    pub sft_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl ReproConfig {
    /// Defaults sized for a desk-scale run: 200 facts with a quarter of them
    /// covered by the auxiliary splits.
    pub fn with_seed(seed: u64) -> ReproConfig {
        let base_train = TrainConfig::pretrain_default(seed);
        ReproConfig {
            corpus: CorpusConfig {
                n_facts: 200,
                n_sym: 50,
                n_rel: 50,
                relation: "parent".to_string(),
                seed,
            },
            pretrain_epochs: 30,
            sft_epochs: 50,
            learning_rate: base_train.learning_rate,
            batch_size: base_train.batch_size,
        }
    }

    fn train_config(&self, stage: Stage, mask_mode: MaskMode) -> TrainConfig {
        let mut cfg = match stage {
            Stage::Pretrain => TrainConfig::pretrain_default(self.corpus.seed),
            Stage::Sft => TrainConfig::sft_default(self.corpus.seed),
        };
        cfg.epochs = match stage {
            Stage::Pretrain => self.pretrain_epochs,
            Stage::Sft => self.sft_epochs,
        };
        cfg.learning_rate = self.learning_rate;
        cfg.batch_size = self.batch_size;
        cfg.mask_mode = mask_mode;
        cfg
    }
}

/// Accuracies (percent) of one trained variant across the four query
/// templates, with the reverse column split by auxiliary coverage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantReport {
    pub forward: f64,
    pub paraphrase: f64,
    pub rev_paraphrase: f64,
    pub reverse: f64,
    pub reverse_covered: f64,
    pub reverse_uncovered: f64,
}

/// The qualitative gap checks of one seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapChecks {
    pub baseline_forward_ok: bool,
    pub baseline_reverse_ok: bool,
    pub covered_reverse_ok: bool,
    pub uncovered_reverse_not_worse: bool,
    pub forward_preserved: bool,
    pub all_ok: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReproReport {
    pub seed: u64,
    pub n_facts: usize,
    pub covered_fact_ids: Vec<u64>,
    pub baseline: VariantReport,
    pub mitigated: VariantReport,
    pub checks: GapChecks,
    pub baseline_reverse_errors: ErrorBreakdown,
    pub mitigated_reverse_errors: ErrorBreakdown,
}

/// Everything a repro run produces, for callers that persist artifacts.
pub struct ReproArtifacts {
    pub report: ReproReport,
    pub bundle: CorpusBundle,
    pub baseline_model: Denoiser,
    pub mitigated_model: Denoiser,
    pub baseline_cases: Vec<CaseRecord>,
    pub mitigated_cases: Vec<CaseRecord>,
    pub logs: Vec<(String, TrainLog)>,
}

fn accuracy(cases: &[CaseRecord], dir: Direction, subset: Option<(&HashSet<u64>, bool)>) -> f64 {
    let sel: Vec<&CaseRecord> = cases
        .iter()
        .filter(|c| c.query_template == dir)
        .filter(|c| match subset {
            Some((ids, keep_inside)) => ids.contains(&c.fact_id) == keep_inside,
            None => true,
        })
        .collect();
    if sel.is_empty() {
        return 0.0;
    }
    100.0 * sel.iter().filter(|c| c.correct).count() as f64 / sel.len() as f64
}

fn variant_report(cases: &[CaseRecord], covered: &HashSet<u64>) -> VariantReport {
    VariantReport {
        forward: accuracy(cases, Direction::Forward, None),
        paraphrase: accuracy(cases, Direction::Paraphrase, None),
        rev_paraphrase: accuracy(cases, Direction::RevParaphrase, None),
        reverse: accuracy(cases, Direction::Reverse, None),
        reverse_covered: accuracy(cases, Direction::Reverse, Some((covered, true))),
        reverse_uncovered: accuracy(cases, Direction::Reverse, Some((covered, false))),
    }
}

/// Run the full pipeline for one seed.
pub fn run_repro(cfg: &ReproConfig) -> Result<ReproArtifacts> {
    let bundle = CorpusBundle::build(&cfg.corpus)?;
    let covered: HashSet<u64> = bundle.meta.sym_fact_ids.iter().copied().collect();
    let decode_cfg = DecodeConfig::default();
    let seed = cfg.corpus.seed;
    let mut logs = Vec::new();

    // Baseline variant.
    let mut baseline_model = Denoiser::new(DenoiserConfig::new(bundle.vocab.size()), seed)?;
    let log = pretrain(
        &mut baseline_model,
        &bundle.base,
        &bundle.vocab,
        &cfg.train_config(Stage::Pretrain, MaskMode::Token),
    )?;
    logs.push(("pretrain_baseline".to_string(), log));
    let log = sft(
        &mut baseline_model,
        &bundle.qa_train[&Direction::Forward],
        None,
        None,
        &bundle.vocab,
        &cfg.train_config(Stage::Sft, MaskMode::Token),
    )?;
    logs.push(("sft_baseline".to_string(), log));
    let baseline_cases = evaluate_cases(
        &baseline_model,
        Direction::Forward,
        &bundle.qa_eval,
        &bundle.vocab,
        &decode_cfg,
    )?;

    // Mitigated variant.
    let mut mitigated_model = Denoiser::new(DenoiserConfig::new(bundle.vocab.size()), seed)?;
    let log = pretrain(
        &mut mitigated_model,
        &bundle.base,
        &bundle.vocab,
        &cfg.train_config(Stage::Pretrain, MaskMode::WholeEntity),
    )?;
    logs.push(("pretrain_mitigated".to_string(), log));
    let log = sft(
        &mut mitigated_model,
        &bundle.qa_train[&Direction::Forward],
        Some(&bundle.sym),
        Some(&bundle.rel),
        &bundle.vocab,
        &cfg.train_config(Stage::Sft, MaskMode::WholeEntity),
    )?;
    logs.push(("sft_mitigated".to_string(), log));
    let mitigated_cases = evaluate_cases(
        &mitigated_model,
        Direction::Forward,
        &bundle.qa_eval,
        &bundle.vocab,
        &decode_cfg,
    )?;

    let baseline = variant_report(&baseline_cases, &covered);
    let mitigated = variant_report(&mitigated_cases, &covered);
    let checks = GapChecks {
        baseline_forward_ok: baseline.forward >= BASELINE_FORWARD_MIN,
        baseline_reverse_ok: baseline.reverse <= BASELINE_REVERSE_MAX,
        covered_reverse_ok: mitigated.reverse_covered >= COVERED_REVERSE_MIN,
        uncovered_reverse_not_worse: mitigated.reverse_uncovered >= baseline.reverse_uncovered,
        forward_preserved: mitigated.forward >= baseline.forward - FORWARD_DROP_MAX,
        all_ok: false,
    };
    let checks = GapChecks {
        all_ok: checks.baseline_forward_ok
            && checks.baseline_reverse_ok
            && checks.covered_reverse_ok
            && checks.uncovered_reverse_not_worse
            && checks.forward_preserved,
        ..checks
    };

    let reverse_only = |cases: &[CaseRecord]| {
        ErrorBreakdown::from_cases(
            cases
                .iter()
                .filter(|c| c.query_template == Direction::Reverse)
                .collect::<Vec<_>>()
                .iter()
                .copied(),
        )
    };
    let report = ReproReport {
        seed,
        n_facts: cfg.corpus.n_facts,
        covered_fact_ids: bundle.meta.sym_fact_ids.clone(),
        baseline,
        mitigated,
        checks,
        baseline_reverse_errors: reverse_only(&baseline_cases),
        mitigated_reverse_errors: reverse_only(&mitigated_cases),
    };
    Ok(ReproArtifacts {
        report,
        bundle,
        baseline_model,
        mitigated_model,
        baseline_cases,
        mitigated_cases,
        logs,
    })
}
