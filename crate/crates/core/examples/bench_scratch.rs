use dfer_core::corpus::{CorpusBundle, CorpusConfig, Direction};
use dfer_core::eval::{evaluate_cases, CaseRecord};
use dfer_core::infer::DecodeConfig;
use dfer_core::masking::MaskMode;
use dfer_core::model::{Denoiser, DenoiserConfig};
use dfer_core::train::{pretrain, sft, TrainConfig};
use std::collections::HashSet;
use std::time::Instant;

fn acc(cases: &[CaseRecord], dir: Direction, subset: Option<&HashSet<u64>>, invert: bool) -> f64 {
    let sel: Vec<&CaseRecord> = cases
        .iter()
        .filter(|c| c.query_template == dir)
        .filter(|c| match subset {
            Some(s) => s.contains(&c.fact_id) != invert,
            None => true,
        })
        .collect();
    100.0 * sel.iter().filter(|c| c.correct).count() as f64 / sel.len() as f64
}

fn main() {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0u64);
    let cfg = CorpusConfig {
        n_facts: 200,
        n_sym: 50,
        n_rel: 50,
        relation: "parent".into(),
        seed,
    };
    let bundle = CorpusBundle::build(&cfg).unwrap();
    let covered: HashSet<u64> = bundle.meta.sym_fact_ids.iter().copied().collect();
    println!("vocab {} covered {}", bundle.vocab.size(), covered.len());
    let decode_cfg = DecodeConfig::default();

    // Baseline: token masking pretrain + forward-only SFT.
    let t0 = Instant::now();
    let mut base_model = Denoiser::new(DenoiserConfig::new(bundle.vocab.size()), seed).unwrap();
    let tc = TrainConfig::pretrain_default(seed);
    pretrain(&mut base_model, &bundle.base, &bundle.vocab, &tc).unwrap();
    println!("baseline pretrain done {:.1}s", t0.elapsed().as_secs_f64());
    let sc = TrainConfig::sft_default(seed);
    sft(
        &mut base_model,
        &bundle.qa_train[&Direction::Forward],
        None,
        None,
        &bundle.vocab,
        &sc,
    )
    .unwrap();
    println!("baseline sft done {:.1}s", t0.elapsed().as_secs_f64());
    let base_cases = evaluate_cases(
        &base_model,
        Direction::Forward,
        &bundle.qa_eval,
        &bundle.vocab,
        &decode_cfg,
    )
    .unwrap();
    println!("baseline eval done {:.1}s", t0.elapsed().as_secs_f64());
    println!(
        "baseline: fwd {:.2} par {:.2} rev-par {:.2} rev {:.2} | rev covered {:.2} uncovered {:.2}",
        acc(&base_cases, Direction::Forward, None, false),
        acc(&base_cases, Direction::Paraphrase, None, false),
        acc(&base_cases, Direction::RevParaphrase, None, false),
        acc(&base_cases, Direction::Reverse, None, false),
        acc(&base_cases, Direction::Reverse, Some(&covered), false),
        acc(&base_cases, Direction::Reverse, Some(&covered), true),
    );

    // Mitigated: whole-entity masking + sym + rel.
    let t0 = Instant::now();
    let mut wem_model = Denoiser::new(DenoiserConfig::new(bundle.vocab.size()), seed).unwrap();
    let mut tc = TrainConfig::pretrain_default(seed);
    tc.mask_mode = MaskMode::WholeEntity;
    pretrain(&mut wem_model, &bundle.base, &bundle.vocab, &tc).unwrap();
    let mut sc = TrainConfig::sft_default(seed);
    sc.mask_mode = MaskMode::WholeEntity;
    sft(
        &mut wem_model,
        &bundle.qa_train[&Direction::Forward],
        Some(&bundle.sym),
        Some(&bundle.rel),
        &bundle.vocab,
        &sc,
    )
    .unwrap();
    println!("differ train done {:.1}s", t0.elapsed().as_secs_f64());
    let differ_cases = evaluate_cases(
        &wem_model,
        Direction::Forward,
        &bundle.qa_eval,
        &bundle.vocab,
        &decode_cfg,
    )
    .unwrap();
    println!(
        "differ:   fwd {:.2} par {:.2} rev-par {:.2} rev {:.2} | rev covered {:.2} uncovered {:.2}",
        acc(&differ_cases, Direction::Forward, None, false),
        acc(&differ_cases, Direction::Paraphrase, None, false),
        acc(&differ_cases, Direction::RevParaphrase, None, false),
        acc(&differ_cases, Direction::Reverse, None, false),
        acc(&differ_cases, Direction::Reverse, Some(&covered), false),
        acc(&differ_cases, Direction::Reverse, Some(&covered), true),
    );
    println!("total eval+train {:.1}s", t0.elapsed().as_secs_f64());
}
