//! End-to-end runs on small synthetic datasets.

use rltune::dataforge::synth::{generate_synthetic_tasks, reference_cot, synth_vocab, SynthSpec};
use rltune::eval::{evaluate, run_inference, score_report, BenchmarkManifest, Decoding};
use rltune::policy::{init_policy, load_checkpoint, save_checkpoint, PolicyConfig, PolicyParams};
use rltune::prompting::Strategy;
use rltune::records::{load_records, save_records, DatasetRecord, Split};
use rltune::rng::RngStream;
use rltune::tuner::{format_warmup, prepare_tasks, run_rlt, run_sft, sft_examples, RltConfig, SftConfig, WarmupConfig};
use rltune::vocab::Vocab;

struct Fixture {
    records: Vec<DatasetRecord>,
    vocab: Vocab,
}

fn fixture(p_train: f64) -> Fixture {
    let spec = SynthSpec { p_train, n_train: 200, n_iid_test: 96, n_ood_test: 96, seed: 3, ..SynthSpec::default() };
    Fixture { records: generate_synthetic_tasks(&spec).unwrap(), vocab: synth_vocab(&spec).unwrap() }
}

fn split(f: &Fixture, s: Split) -> Vec<DatasetRecord> {
    f.records.iter().filter(|r| r.task.split == s).cloned().collect()
}

fn warm_base(f: &Fixture) -> PolicyParams {
    let cfg = PolicyConfig { init_scale: 0.5, ..PolicyConfig::new(f.vocab.len()) };
    let p0 = init_policy(cfg, &mut RngStream::named(3, "policy.init", &[])).unwrap();
    let train = prepare_tasks(&split(f, Split::Train), &f.vocab, Strategy::Cot).unwrap();
    format_warmup(&WarmupConfig { seed: 3, ..WarmupConfig::default() }, &train, p0, &f.vocab).unwrap().params
}

#[test]
fn warmed_base_is_formatted_but_at_chance() {
    let f = fixture(0.0);
    let base = warm_base(&f);
    let iid = BenchmarkManifest::from_split(&f.records, Split::IidTest).unwrap();
    let out = run_inference(&base, &iid, Strategy::Cot, &f.vocab, Decoding::Greedy).unwrap();
    let report = score_report(&out, &iid, Strategy::Cot).unwrap();
    assert!(report.unextractable.is_empty(), "{:?}", report.unextractable);
    let acc = report.n_correct as f64 / report.n as f64;
    assert!((acc - 0.25).abs() <= 0.04, "greedy accuracy {acc}");

    let sampled = run_inference(&base, &iid, Strategy::Cot, &f.vocab, Decoding::Sampled { seed: 1 }).unwrap();
    let letters: std::collections::BTreeSet<_> =
        sampled.iter().filter_map(|o| o.letter).map(|l| l.index()).collect();
    assert_eq!(letters.len(), 4);
}

#[test]
fn sft_on_reference_rationales_learns_the_task() {
    let f = fixture(0.0);
    let train = split(&f, Split::Train);
    let tasks = prepare_tasks(&train, &f.vocab, Strategy::Cot).unwrap();
    let cots: Vec<_> = train.iter().map(|r| Some(reference_cot(&r.task.prompt, r.task.gold))).collect();
    let examples = sft_examples(&tasks, &cots, &f.vocab).unwrap();
    let cfg = SftConfig { lr: 1e-2, epochs: 10, batch_size: 32, ..SftConfig::text_preset() };
    let out = run_sft(&cfg, &examples, warm_base(&f)).unwrap();
    assert!(out.rows.last().unwrap().loss < out.rows[0].loss);
    let iid = BenchmarkManifest::from_split(&f.records, Split::IidTest).unwrap();
    let report = evaluate(&out.params, &iid, Strategy::Cot, &f.vocab).unwrap();
    assert!(report.accuracy.hundredths() >= 9000, "{}", report.accuracy);
}

#[test]
fn rlt_is_reproducible_and_files_round_trip() {
    let f = fixture(1.0);
    let tasks = prepare_tasks(&split(&f, Split::Train), &f.vocab, Strategy::Cot).unwrap();
    let base = warm_base(&f);
    let cfg = RltConfig { lr: 3e-3, max_steps: Some(12), checkpoint_steps: vec![0, 10], seed: 3, ..RltConfig::default() };
    let tmp = tempfile::tempdir().unwrap();
    let a = run_rlt(&cfg, &tasks, base.clone(), &f.vocab, Some(tmp.path()), |_| {}).unwrap();
    let b = run_rlt(&cfg, &tasks, base, &f.vocab, None, |_| {}).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.params, b.params);
    assert_eq!(a.metrics.len(), 12);
    assert_eq!(load_checkpoint(&tmp.path().join("final.ckpt")).unwrap(), a.params);
    assert_eq!(load_checkpoint(&tmp.path().join("step_000010.ckpt")).unwrap(), a.checkpoints[1].1);

    let ck = tmp.path().join("copy.ckpt");
    save_checkpoint(&a.params, &ck).unwrap();
    assert_eq!(std::fs::read(&ck).unwrap(), std::fs::read(tmp.path().join("final.ckpt")).unwrap());

    let rec = tmp.path().join("records.jsonl");
    save_records(&f.records, &rec).unwrap();
    assert_eq!(load_records(&rec).unwrap(), f.records);
}
