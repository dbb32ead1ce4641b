//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 7-9 run the full synthetic study (50 pretraining drivers, five
//! personal drivers with 40 minutes each); criterion 10 runs everything a
//! second time and compares the reports byte for byte.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trajcast::baselines::cv_predict_sample;
use trajcast::datagen::{make_driver_cohort, simulate_highway, Density, ScenarioConfig};
use trajcast::eval::{horizon_step, rmse_at_horizon, HORIZONS_S};
use trajcast::experiment::{run_experiment, ExperimentConfig, ExperimentReport};
use trajcast::graph::{
    extract_target_windows, extract_windows, normalize_adjacency, GraphConfig, GraphSample, TrackPoint, VehicleTrack, DT,
};
use trajcast::model::{init_params, predict, random_sample, ModelConfig, ENCODER_GROUPS};
use trajcast::numeric::{load_checkpoint, save_checkpoint, Tensor};
use trajcast::training::{finetune, l1_loss, model_grad_check, train, TrainConfig};

const SEED: u64 = 7;

struct Outcome {
    pass: bool,
    /// Deterministic description of what was measured.
    report: String,
    /// Wall-clock notes, excluded from the determinism comparison.
    timing: String,
}

fn outcome(pass: bool, report: String) -> Outcome {
    Outcome {
        pass,
        report,
        timing: String::new(),
    }
}

fn timed(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let took = start.elapsed();
    o.pass &= took < limit;
    o.timing = format!("{:.1}s (limit {}s)", took.as_secs_f64(), limit.as_secs());
    o
}

fn c1_gradient() -> Outcome {
    timed(Duration::from_secs(10), || match model_grad_check(SEED) {
        Ok(r) => outcome(
            r.max_rel_error < 1e-4,
            format!("max relative error {:.3e} over {} parameters", r.max_rel_error, r.checked),
        ),
        Err(e) => outcome(false, format!("error: {e}")),
    })
}

fn c2_normalization() -> Outcome {
    let cases: [(&str, usize, Vec<f64>, Vec<f64>); 3] = [
        ("N=1", 1, vec![0.0], vec![1.0]),
        ("N=2", 2, vec![0.0, 1.0, 1.0, 0.0], vec![0.5, 0.5, 0.5, 0.5]),
        (
            "path",
            3,
            vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
            vec![
                0.5,
                1.0 / 6f64.sqrt(),
                0.0,
                1.0 / 6f64.sqrt(),
                1.0 / 3.0,
                1.0 / 6f64.sqrt(),
                0.0,
                1.0 / 6f64.sqrt(),
                0.5,
            ],
        ),
    ];
    let mut worst = 0.0f64;
    let mut pass = true;
    for (_, n, a, want) in &cases {
        match normalize_adjacency(&Tensor::matrix(*n, *n, a.clone()).unwrap()) {
            Ok(got) => {
                for (g, w) in got.data().iter().zip(want) {
                    worst = worst.max((g - w).abs());
                }
            }
            Err(_) => pass = false,
        }
    }
    outcome(
        pass && worst <= 1e-12,
        format!("max deviation {worst:.1e} over N=1, N=2 and the 3-node path"),
    )
}

/// The first `count` ego windows of one simulated driver, one every 10 s.
fn small_sim_windows(count: usize) -> Vec<GraphSample> {
    let pool = make_driver_cohort(6, SEED).unwrap();
    let scenario = ScenarioConfig {
        density: Density::Medium,
        duration: 40.0 + count as f64 * 10.0,
        warmup: 20.0,
        ego: pool[0],
        background: pool,
        seed: SEED,
        ..ScenarioConfig::default()
    };
    let ep = simulate_highway(&scenario).unwrap();
    let windows = extract_target_windows(&ep.tracks, &GraphConfig::default(), 20, |id| id == ep.ego_id).unwrap();
    assert!(windows.len() >= count, "only {} windows", windows.len());
    windows.into_iter().take(count).collect()
}

fn c3_overfit() -> Outcome {
    timed(Duration::from_secs(120), || {
        let samples = small_sim_windows(10);
        let model = ModelConfig::default();
        let cfg = TrainConfig {
            batch_size: samples.len(),
            epochs: 2000,
            patience: 0,
            ..TrainConfig::pretrain().with_seed(SEED)
        };
        let init = init_params(&model, SEED).unwrap();
        match train(&samples, &[], &init, &model, &cfg) {
            Ok((params, _)) => {
                let preds: Vec<_> = samples
                    .iter()
                    .map(|s| trajcast::model::predict_offsets(s, &params, &model).unwrap())
                    .collect();
                let truth: Vec<_> = samples.iter().map(|s| s.future.clone()).collect();
                let loss = l1_loss(&preds, &truth).unwrap();
                outcome(
                    loss < 0.05,
                    format!("loss {loss:.4} m on {} samples after 2000 steps", samples.len()),
                )
            }
            Err(e) => outcome(false, format!("error: {e}")),
        }
    })
}

fn line_tracks(n: usize, steps: usize, rng: &mut ChaCha8Rng) -> Vec<VehicleTrack> {
    (0..n)
        .map(|i| {
            let (x0, lane) = (rng.gen_range(-25.0..25.0), rng.gen_range(0..3u32));
            let (vx, vy) = (rng.gen_range(15.0..35.0), rng.gen_range(-0.3..0.3));
            let y0 = (lane as f64 + 0.5) * 3.7;
            VehicleTrack {
                vehicle_id: i as u64,
                points: (0..steps)
                    .map(|k| {
                        let t = k as f64 * DT;
                        TrackPoint {
                            t,
                            x: x0 + vx * t,
                            y: y0 + vy * t,
                            speed: vx.hypot(vy),
                            lane,
                        }
                    })
                    .collect(),
            }
        })
        .collect()
}

fn c4_cv_exact() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let tracks = line_tracks(5, 40, &mut rng);
    let samples = extract_windows(&tracks, &GraphConfig::default(), 1).unwrap();
    let preds: Vec<_> = samples.iter().map(|s| cv_predict_sample(s).unwrap()).collect();
    let truth: Vec<_> = samples.iter().map(GraphSample::future_absolute).collect();
    let worst = HORIZONS_S
        .iter()
        .map(|&h| rmse_at_horizon(&preds, &truth, horizon_step(h)).unwrap())
        .fold(0.0, f64::max);
    outcome(worst < 1e-6, format!("max RMSE {worst:.2e} m over {} windows", samples.len()))
}

fn c5_freeze() -> Outcome {
    let samples = small_sim_windows(40);
    let (train_set, val) = samples.split_at(30);
    let model = ModelConfig::default();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&init_params(&model, SEED).unwrap(), dir.path()).unwrap();
    let base = load_checkpoint(dir.path()).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::finetune().with_seed(SEED)
    };
    let (tuned, _) = finetune(&base, train_set, val, &model, &cfg).unwrap();
    let frozen_same = ENCODER_GROUPS.iter().all(|g| tuned.group_bit_eq(&base, g));
    let decoder_moved = !tuned.bit_eq(&base);
    outcome(
        frozen_same && decoder_moved,
        format!("encoder groups bit-identical: {frozen_same}; decoder updated: {decoder_moved}"),
    )
}

fn c6_invariance() -> Outcome {
    let model = ModelConfig::default();
    let params = init_params(&model, SEED).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut relabel_dev, mut shift_dev) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let n = rng.gen_range(1..=8);
        let s = random_sample(n, model.t_in, model.t_out, SEED + i);
        let base = predict(&s, &params, &model).unwrap();

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let p = predict(&s.relabel(&perm).unwrap(), &params, &model).unwrap();
        for (a, b) in base.iter().zip(&p) {
            relabel_dev = relabel_dev.max((a[0] - b[0]).abs()).max((a[1] - b[1]).abs());
        }

        let mut tracks = line_tracks(n.max(2), 30, &mut rng);
        let d = [rng.gen_range(-500.0..500.0), rng.gen_range(-20.0..20.0)];
        let before = extract_target_windows(&tracks, &model_graph(&model), 5, |id| id == 0).unwrap();
        for t in &mut tracks {
            for p in &mut t.points {
                p.x += d[0];
                p.y += d[1];
            }
        }
        let after = extract_target_windows(&tracks, &model_graph(&model), 5, |id| id == 0).unwrap();
        for (s0, s1) in before.iter().zip(&after) {
            let a = predict(s0, &params, &model).unwrap();
            let b = predict(s1, &params, &model).unwrap();
            for (a, b) in a.iter().zip(&b) {
                shift_dev = shift_dev.max((a[0] + d[0] - b[0]).abs()).max((a[1] + d[1] - b[1]).abs());
            }
        }
    }
    outcome(
        relabel_dev <= 1e-9 && shift_dev <= 1e-9,
        format!("relabeling deviation {relabel_dev:.1e} m, translation deviation {shift_dev:.1e} m over 100 samples"),
    )
}

fn model_graph(model: &ModelConfig) -> GraphConfig {
    GraphConfig {
        t_in: model.t_in,
        t_out: model.t_out,
        ..GraphConfig::default()
    }
}

fn study() -> (Result<ExperimentReport, String>, Duration) {
    let start = Instant::now();
    let cfg = ExperimentConfig {
        seed: SEED,
        ..ExperimentConfig::default()
    };
    let r = run_experiment(&cfg, true, |m| eprintln!("  [{:6.0}s] {m}", start.elapsed().as_secs_f64()));
    (r.map_err(|e| e.to_string()), start.elapsed())
}

fn c7_table(report: &ExperimentReport, took: Duration) -> Outcome {
    let pooled = report.pooled().unwrap();
    let cv = pooled.rmse("cv").unwrap();
    let s2s = pooled.rmse("seq2seq").unwrap();
    let generic = pooled.rmse("generic").unwrap();
    let ordered = (2..5).all(|h| cv[h] >= s2s[h] && s2s[h] >= generic[h]);
    let wins = report
        .drivers
        .iter()
        .filter(|d| d.table.rmse("personalized").unwrap()[4] < d.table.rmse("generic").unwrap()[4])
        .count();
    let mut text = String::new();
    for h in 2..5 {
        let _ = write!(text, "{}s cv {:.4} seq2seq {:.4} generic {:.4}; ", h + 1, cv[h], s2s[h], generic[h]);
    }
    let _ = write!(text, "personalized < generic at 5 s for {wins}/{} drivers", report.drivers.len());
    let mut o = outcome(ordered && wins >= 4, text);
    o.pass &= took < Duration::from_secs(30 * 60);
    o.timing = format!("pipeline {:.0}s (limit 1800s)", took.as_secs_f64());
    o
}

fn c8_reduction(report: &ExperimentReport) -> Outcome {
    let r = report.mean_reduction().unwrap();
    match (r[0], r[4]) {
        (Some(r1), Some(r5)) => outcome(r5 > r1, format!("mean reduction {r1:.2}% at 1 s, {r5:.2}% at 5 s")),
        _ => outcome(false, "reduction undefined".into()),
    }
}

fn c9_sweep(report: &ExperimentReport) -> Outcome {
    let mut ok = 0;
    let mut text = String::new();
    for d in &report.drivers {
        let Some(sweep) = &d.sweep else { continue };
        let (Some(m5), Some(m30)) = (sweep.at(5), sweep.at(30)) else {
            continue;
        };
        if m30[4] <= m5[4] {
            ok += 1;
        }
        let _ = write!(text, "{} {:.3}->{:.3}; ", d.name, m5[4], m30[4]);
    }
    let _ = write!(text, "30 min <= 5 min at 5 s for {ok}/{} drivers", report.drivers.len());
    outcome(ok >= 4, text)
}

/// Criterion outcomes plus the full study summary.
fn run_all() -> (Vec<(&'static str, Outcome)>, String) {
    let mut out = vec![
        ("gradient correctness", c1_gradient()),
        ("normalization oracle", c2_normalization()),
        ("overfit sanity", c3_overfit()),
        ("baseline exactness", c4_cv_exact()),
        ("freeze contract", c5_freeze()),
        ("invariance suite", c6_invariance()),
    ];
    let study_names = ["table ordering", "reduction grows with horizon", "duration sweep"];
    if std::env::var_os("TRAJCAST_SKIP_STUDY").is_some() {
        for name in study_names {
            out.push((name, outcome(false, "skipped (TRAJCAST_SKIP_STUDY is set)".into())));
        }
        return (out, String::new());
    }
    eprintln!("running the synthetic study");
    match study() {
        (Ok(report), took) => {
            out.push((study_names[0], c7_table(&report, took)));
            out.push((study_names[1], c8_reduction(&report)));
            out.push((study_names[2], c9_sweep(&report)));
            let summary = report.summary().unwrap_or_else(|e| e.to_string());
            println!("{summary}");
            (out, summary)
        }
        (Err(e), _) => {
            for name in study_names {
                out.push((name, outcome(false, format!("study failed: {e}"))));
            }
            (out, String::new())
        }
    }
}

fn transcript(results: &[(&str, Outcome)]) -> String {
    results
        .iter()
        .map(|(name, o)| format!("{name}: {} {}\n", if o.pass { "PASS" } else { "FAIL" }, o.report))
        .collect()
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let (first, summary1) = run_all();
    eprintln!("repeating every criterion for the determinism check");
    let (second, summary2) = run_all();
    let identical = transcript(&first) == transcript(&second) && summary1 == summary2;

    let mut failed = 0;
    for (i, (name, o)) in first.iter().enumerate() {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        let timing = if o.timing.is_empty() {
            String::new()
        } else {
            format!(" [{}]", o.timing)
        };
        println!("criterion {:>2} {tag} {name}: {}{timing}", i + 1, o.report);
    }
    let tag = if identical { "PASS" } else { "FAIL" };
    failed += usize::from(!identical);
    println!(
        "criterion 10 {tag} determinism: reports of two full runs are {}",
        if identical { "byte-identical" } else { "different" }
    );
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
