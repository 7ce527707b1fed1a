use dfer_core::corpus::{CorpusBundle, CorpusConfig, Direction};
use dfer_core::eval::evaluate_cases;
use dfer_core::infer::DecodeConfig;
use dfer_core::model::{Denoiser, DenoiserConfig};
use dfer_core::train::{pretrain, sft, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args[1].parse().unwrap();
    let pre_epochs: usize = args[2].parse().unwrap();
    let sft_epochs: usize = args[3].parse().unwrap();
    let seed: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0);

    let cfg = CorpusConfig { n_facts: 200, n_sym: 50, n_rel: 50, relation: "parent".into(), seed };
    let bundle = CorpusBundle::build(&cfg).unwrap();
    let t0 = Instant::now();
    let mut model = Denoiser::new(DenoiserConfig::new(bundle.vocab.size()), seed).unwrap();
    let mut tc = TrainConfig::pretrain_default(seed);
    tc.epochs = pre_epochs;
    tc.learning_rate = lr;
    let plog = pretrain(&mut model, &bundle.base, &bundle.vocab, &tc).unwrap();
    let mut sc = TrainConfig::sft_default(seed);
    sc.epochs = sft_epochs;
    sc.learning_rate = lr;
    let slog = sft(&mut model, &bundle.qa_train[&Direction::Forward], None, None, &bundle.vocab, &sc).unwrap();
    let cases = evaluate_cases(&model, Direction::Forward, &bundle.qa_eval, &bundle.vocab, &DecodeConfig::default()).unwrap();
    let fwd: Vec<_> = cases.iter().filter(|c| c.query_template == Direction::Forward).collect();
    let rev: Vec<_> = cases.iter().filter(|c| c.query_template == Direction::Reverse).collect();
    let fa = 100.0 * fwd.iter().filter(|c| c.correct).count() as f64 / fwd.len() as f64;
    let ra = 100.0 * rev.iter().filter(|c| c.correct).count() as f64 / rev.len() as f64;
    println!(
        "lr={lr} pre={pre_epochs} sft={sft_epochs} seed={seed}: fwd {fa:.1} rev {ra:.1} | pre_loss {:.2}->{:.2} sft_loss {:.2}->{:.2} | {:.0}s",
        plog.steps.first().unwrap().loss, plog.steps.last().unwrap().loss,
        slog.steps.first().unwrap().loss, slog.steps.last().unwrap().loss,
        t0.elapsed().as_secs_f64()
    );
    for c in fwd.iter().take(3) {
        println!("  sample: pred {:?} gold {:?}", c.prediction, c.gold);
    }
}
