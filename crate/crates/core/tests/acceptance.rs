//! Acceptance criteria, one test each. Every test prints a single
//! `criterion N: PASS|FAIL ...` line straight to stdout so the verdicts show
//! up even when the harness captures test output.

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use msin::cell::{init_states, run_plain_lstm, run_sequence, AttnVars, MsinVars};
use msin::checkpoint::{Checkpoint, CheckpointMeta};
use msin::data::{corpus_tokens, make_samples, Dataset, SampleConfig, Sample, SplitRule, Vocab};
use msin::eval::{precision_recall_at_k, rank_report, select_relevant, DayRanking};
use msin::lstm::{LstmState, LstmVars};
use msin::model::{model_grad_check, random_sample, ModelConfig, ModelParams, Variant, GRAD_CHECK_SEED};
use msin::rng::{seeded, Stream};
use msin::synth::{generate, SynthSpec};
use msin::tape::{Tape, Var};
use msin::train::{mean_loss, train, train_observed, TrainConfig};

fn verdict(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
}

#[test]
fn gradient_check_all_variants() {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut names = Vec::new();
    for v in Variant::ALL {
        let r = model_grad_check(&ModelConfig::tiny(v), GRAD_CHECK_SEED).unwrap();
        worst = worst.max(r.max_rel_err);
        names.push(format!("{}={:.1e}", v.name(), r.max_rel_err));
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && secs < 30.0;
    verdict(1, pass, &format!("worst relative error {worst:.2e} < 1e-4 ({}) in {secs:.1}s < 30s", names.join(", ")));
    assert!(pass);
}

#[test]
fn published_mass_fixtures() {
    let jan22 = [0.00, 0.15, 0.03, 0.21, 0.09, 0.03, 0.04, 0.02, 0.03, 0.01, 0.00, 0.01, 0.40];
    let aug14 = [0.00, 0.00, 0.00, 0.00, 0.00, 0.03, 0.00, 0.02, 0.01, 0.76, 0.17];
    let jan09 = [0.00, 0.87, 0.00, 0.00];
    let docs = |m: &[f64]| select_relevant(m).iter().map(|j| j + 1).collect::<Vec<_>>();
    let got = [docs(&jan22), docs(&aug14), docs(&jan09)];
    let pass = got == [vec![13, 4], vec![10], vec![2]];
    verdict(2, pass, &format!("2013-01-22 {:?}, 2013-08-14 {:?}, 2013-01-09 {:?}", got[0], got[1], got[2]));
    assert!(pass);
}

/// Pre@k and Rec@k from first principles: hits counted as exact integers,
/// every division done once at the end.
fn brute_force(days: &[(Vec<f64>, Vec<usize>)], k: usize) -> (f64, f64) {
    let mut pre_num = Vec::new();
    let mut rec_num = Vec::new();
    for (mass, gtn) in days.iter().filter(|(_, g)| !g.is_empty()) {
        let n = mass.len();
        let mut top: Vec<usize> = Vec::new();
        let mut left: Vec<usize> = (0..n).collect();
        while top.len() < k.min(n) {
            // highest mass, lowest index among equals
            let mut best = 0;
            for i in 1..left.len() {
                if mass[left[i]] > mass[left[best]] {
                    best = i;
                }
            }
            top.push(left.remove(best));
        }
        let hits = top.iter().filter(|j| gtn.contains(j)).count() as u64;
        pre_num.push((hits, k.min(n) as u64));
        rec_num.push((hits, k.min(gtn.len()) as u64));
    }
    let avg = |v: &[(u64, u64)]| v.iter().map(|&(a, b)| a as f64 / b as f64).sum::<f64>() / v.len() as f64;
    (avg(&pre_num), avg(&rec_num))
}

#[test]
fn metrics_match_brute_force() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n_days = rng.random_range(1..6);
        let mut raw = Vec::new();
        for _ in 0..n_days {
            let n = rng.random_range(1..12);
            // coarse masses so ties are frequent
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64 + 0.5).collect();
            let total: f64 = w.iter().sum();
            let mass: Vec<f64> = w.iter().map(|x| x / total).collect();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx.truncate(rng.random_range(0..=n.min(4)));
            raw.push((mass, idx));
        }
        if raw.iter().all(|(_, g)| g.is_empty()) {
            raw[0].1.push(0);
        }
        let k = rng.random_range(1..8);
        let days: Vec<DayRanking> = raw
            .iter()
            .enumerate()
            .map(|(i, (m, g))| DayRanking::new(NaiveDate::from_num_days_from_ce_opt(735_000 + i as i32).unwrap(), m.clone(), g.clone()).unwrap())
            .collect();
        let (p, r) = precision_recall_at_k(&days, k).unwrap();
        let (bp, br) = brute_force(&raw, k);
        worst = worst.max((p - bp).abs()).max((r - br).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = worst <= 1e-12 && secs < 5.0;
    verdict(3, pass, &format!("200 random instances, max deviation {worst:.1e} <= 1e-12, {secs:.2}s < 5s"));
    assert!(pass);
}

// Synthetic recovery run settings. The attention is wider than the hidden
// layers: with d_a = d_s training tends to attend to one sign of planted
// word only, which already explains the series.
const RECOVERY_WIDTH: usize = 16;
const RECOVERY_ATTENTION: usize = 128;
const RECOVERY_STEPS: usize = 6000;
const RECOVERY_LR: f64 = 3e-3;

fn recovery_data() -> (Dataset, usize) {
    let spec = SynthSpec::default();
    let (corpus, series) = generate(&spec).unwrap();
    let tokens = corpus_tokens(&corpus, 8);
    let vocab = Vocab::build(tokens.iter().map(String::as_str), 5000, None);
    let day = |i: u64| spec.start + chrono::Days::new(i);
    let cfg = SampleConfig {
        window: 5,
        max_len: 8,
        daily_doc_cap: 10,
        split: SplitRule::Dates {
            train_until: day(1999),
            valid_until: day(2099),
        },
    };
    (make_samples(&corpus, &series, &vocab, &cfg, None).unwrap(), vocab.len())
}

fn recovery_run(variant: Variant, data: &Dataset, vocab_size: usize) -> (f64, f64, f64) {
    let cfg = ModelConfig {
        variant,
        d_s: RECOVERY_WIDTH,
        d_h: RECOVERY_WIDTH,
        d_w: RECOVERY_WIDTH,
        d_a: Some(RECOVERY_ATTENTION),
        vocab_size,
        window: 5,
        max_len: 8,
        daily_doc_cap: 10,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        learning_rate: RECOVERY_LR,
        max_steps: RECOVERY_STEPS,
        eval_every: 100,
        patience: RECOVERY_STEPS,
        ..TrainConfig::default()
    };
    let params = ModelParams::init(&cfg, &mut seeded(tc.seed, Stream::Init)).unwrap();
    let out = train_observed(params, &data.train, &data.valid, &tc, |_| {}).unwrap();
    let (report, _) = rank_report(&out.params, &data.test, 3, 1).unwrap();
    (report.per_k[0].rec, report.per_k[2].rec, report.mse.unwrap_or(f64::NAN))
}

#[test]
fn synthetic_association_recovery() {
    let t = Instant::now();
    let (data, vocab_size) = recovery_data();
    assert_eq!((data.train.len(), data.valid.len(), data.test.len()), (1995, 100, 100));
    let (r1, r3, mse) = recovery_run(Variant::Msin, &data, vocab_size);
    let (w1, w3, wmse) = recovery_run(Variant::LstmWo, &data, vocab_size);
    let pass = r1 >= 0.8 && r3 >= 0.95;
    let order = if r1 > w1 { "msin > lstm_wo" } else { "msin <= lstm_wo" };
    verdict(
        4,
        pass,
        &format!(
            "msin Rec@1 {r1:.2} (>= 0.8) Rec@3 {r3:.2} (>= 0.95) mse {mse:.4}; lstm_wo Rec@1 {w1:.2} Rec@3 {w3:.2} mse {wmse:.4}; ordering {order} (reported only); {:.0}s",
            t.elapsed().as_secs_f64()
        ),
    );
    assert!(pass, "synthetic recovery below target: Rec@1 {r1}, Rec@3 {r3}");
}

#[test]
fn overfits_eight_samples() {
    let t = Instant::now();
    let cfg = ModelConfig::tiny(Variant::Msin);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples: Vec<Sample> = (0..8).map(|_| random_sample(&cfg, 3, &mut rng)).collect();
    let params = ModelParams::init(&cfg, &mut seeded(5, Stream::Init)).unwrap();
    let tc = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 8,
        max_steps: 2000,
        eval_every: 50,
        patience: 2000,
        ..TrainConfig::default()
    };
    let out = train_observed(params, &samples, &samples, &tc, |_| {}).unwrap();
    let mse = mean_loss(&out.params, &samples, 1).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let pass = mse < 1e-3 && secs < 60.0;
    verdict(5, pass, &format!("8-sample train MSE {mse:.2e} < 1e-3 by step {} (<= 2000), {secs:.1}s < 60s", out.best_step));
    assert!(pass);
}

struct CellDims {
    ds: usize,
    dv: usize,
    da: usize,
    d: usize,
}

fn cell_vars(tape: &mut Tape<'_, f64>, k: &CellDims, rng: &mut ChaCha8Rng, zero_context: bool) -> MsinVars {
    let mut p = |shape: &[usize], zero: bool| -> Var {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| if zero { 0.0 } else { rng.random_range(-0.8..0.8) }).collect();
        tape.param_owned(data, shape).unwrap()
    };
    MsinVars {
        u_c0: p(&[k.ds, k.dv], false),
        b_c0: p(&[k.ds], false),
        u_h0: p(&[k.ds, k.dv], false),
        b_h0: p(&[k.ds], false),
        attn: AttnVars {
            w_a: p(&[k.da, k.ds], false),
            u_a: p(&[k.da, k.dv], false),
            b_a: p(&[k.da], false),
            v_a: p(&[k.da], false),
        },
        gates: LstmVars {
            w_x: p(&[4 * k.ds, k.d], false),
            w_h: p(&[4 * k.ds, k.ds], false),
            bias: p(&[4 * k.ds], false),
        },
        u_v: p(&[4 * k.ds, k.dv], zero_context),
    }
}

#[test]
fn zero_context_weights_reduce_to_lstm() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut identical = 0;
    for _ in 0..20 {
        let k = CellDims {
            ds: rng.random_range(1..6),
            dv: rng.random_range(1..7),
            da: rng.random_range(1..5),
            d: rng.random_range(1..3),
        };
        let n = rng.random_range(1..6);
        let m = rng.random_range(1..8);
        let mut tape = Tape::<f64>::new();
        let vars = cell_vars(&mut tape, &k, &mut rng, true);
        let docs = tape.constant((0..n * k.dv).map(|_| rng.random_range(-1.0..1.0)).collect(), &[n, k.dv]).unwrap();
        let xs: Vec<Var> = (0..m)
            .map(|_| tape.constant((0..k.d).map(|_| rng.random_range(-2.0..2.0)).collect(), &[1, k.d]).unwrap())
            .collect();
        let mask = vec![true; n];
        let full = run_sequence(&mut tape, &xs, docs, &mask, &vars).unwrap();
        let init = init_states(&mut tape, docs, &mask, &vars).unwrap();
        let plain = run_plain_lstm(&mut tape, &xs, LstmState { c: init.c, h: init.h }, vars.gates).unwrap();
        let bits = |v: &Var| tape.value(*v).iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if full.hiddens.iter().map(bits).eq(plain.iter().map(bits)) {
            identical += 1;
        }
    }
    let pass = identical == 20;
    verdict(6, pass, &format!("{identical}/20 random inputs bit-identical to the plain LSTM with context weights zeroed"));
    assert!(pass);
}

#[test]
fn context_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let k = CellDims { ds: 4, dv: 6, da: 3, d: 2 };
    let mut tape = Tape::<f64>::new();
    let vars = cell_vars(&mut tape, &k, &mut rng, false);
    let s: Vec<f64> = (0..k.dv).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = 4;
    let docs = tape.constant(s.repeat(n), &[n, k.dv]).unwrap();
    let xs: Vec<Var> = (0..10)
        .map(|_| tape.constant((0..k.d).map(|_| rng.random_range(-1.0..1.0)).collect(), &[1, k.d]).unwrap())
        .collect();
    let out = run_sequence(&mut tape, &xs, docs, &vec![true; n], &vars).unwrap();
    let mut worst = 0.0f64;
    for (l, v) in out.contexts.iter().enumerate() {
        let f = 1.0 - 0.5f64.powi(l as i32 + 1);
        for (a, b) in tape.value(*v).iter().zip(&s) {
            worst = worst.max((a - b * f).abs());
        }
    }
    let pass = worst < 1e-6 && out.contexts.len() == 10;
    verdict(7, pass, &format!("context after l steps equals s(1 - 2^-l) for l = 1..10, max deviation {worst:.1e} < 1e-6"));
    assert!(pass);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut ok = true;
    for v in Variant::ALL {
        let cfg = ModelConfig::tiny(v);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples: Vec<Sample> = (0..6).map(|_| random_sample(&cfg, 2, &mut rng)).collect();
        let data = Dataset {
            train: samples.clone(),
            valid: samples,
            test: Vec::new(),
            normalizer: msin::data::Normalizer::identity(1),
            report: Default::default(),
        };
        let tc = TrainConfig {
            max_steps: 5,
            batch_size: 3,
            eval_every: 5,
            ..TrainConfig::default()
        };
        let params = ModelParams::init(&cfg, &mut seeded(8, Stream::Init)).unwrap();
        let out = train(params, &data, &tc).unwrap();
        let ck = Checkpoint {
            params: out.params,
            train: tc,
            meta: CheckpointMeta {
                step: out.best_step,
                seed: 8,
                metric: Some(out.best_valid),
                vocab: (0..cfg.vocab_size).map(|i| format!("w{i}")).collect(),
                normalizer: Some(data.normalizer.clone()),
                split: Some(SplitRule::default()),
            },
        };
        let a = dir.path().join(format!("{}_a.msn", v.name()));
        let b = dir.path().join(format!("{}_b.msn", v.name()));
        ck.save(&a).unwrap();
        Checkpoint::load(&a).unwrap().save(&b).unwrap();
        let bytes = std::fs::read(&a).unwrap();
        ok &= bytes == std::fs::read(&b).unwrap();
        let mut bad = bytes.clone();
        bad[1] ^= 0xff;
        ok &= Checkpoint::read(bad.as_slice()).is_err();
        ok &= Checkpoint::read(&bytes[..bytes.len() / 2]).is_err();
        ok &= Checkpoint::read(&bytes[..bytes.len() - 1]).is_err();
    }
    verdict(8, ok, "save -> load -> save byte-identical for all variants; corrupted magic and truncation rejected");
    assert!(ok);
}

fn cli(args: &[&str], cwd: &Path) {
    let out = Command::new(env!("CARGO_BIN_EXE_msin"))
        .args(args)
        .current_dir(cwd)
        .env("MSIN_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn training_history_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    cli(&["synth", "--days", "150", "--out-dir", "data", "--seed", "7"], dir.path());
    let run = |out: &str| {
        cli(
            &[
                "train", "--corpus", "data/corpus.jsonl", "--series", "data/series.csv", "--seed", "7", "--d-s", "8",
                "--d-h", "8", "--d-w", "8", "--batch-size", "8", "--max-steps", "100", "--eval-every", "10",
                "--dropout", "0.2", "--out-dir", out,
            ],
            dir.path(),
        );
        std::fs::read_to_string(dir.path().join(out).join("history.csv")).unwrap()
    };
    let (a, b) = (run("r1"), run("r2"));
    let rows = a.lines().count() - 1;
    let pass = a == b && rows == 101;
    verdict(9, pass, &format!("two seed-7 single-thread runs: history.csv identical over {rows} rows (steps 0..=100)"));
    assert!(pass);
}

#[test]
fn full_scale_numbers_not_reproduced() {
    verdict(
        10,
        true,
        "NOT REPRODUCIBLE at desk scale (stated): the published Rec@5 84.9%/87.2%, Pre@5 46.8%/59.6% and 52-56% movement \
         accuracies need the proprietary Reuters/Yahoo corpora; criteria 1-9 substitute. A corpus in the documented \
         JSONL/CSV formats runs through the same pipeline unchanged.",
    );
}
