//! Acceptance checks, one PASS/FAIL line each.
//!
//! `cargo test --test acceptance` runs everything; numeric arguments select
//! criteria, e.g. `cargo test --test acceptance -- 4 8`.

#[path = "../../core/tests/support/oracle.rs"]
mod oracle;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retina_xfer::datapipe::{self, RebalanceConfig};
use retina_xfer::metrics::{self, Metric};
use retina_xfer::neuralnet::{Architecture, Checkpoint, HeadActivation, LayerSpec, Provenance};
use retina_xfer::sweep::{
    mean_improvement_core, size_degradation_core, std_reduction_core, CellKey, GridEntry, MetricValues,
    SweepResult,
};
use retina_xfer::synthfundus::{self, TaskSpec, TrainRatio};
use retina_xfer::trainer::InitMode;
use retina_xfer::Error;
use retina_xfer_cli::report::read_results;

const BIN: &str = env!("CARGO_BIN_EXE_retina-xfer");

fn within(limit: Duration, started: Instant) -> anyhow::Result<()> {
    let t = started.elapsed();
    ensure!(t <= limit, "took {:.1}s, limit {}s", t.as_secs_f64(), limit.as_secs());
    Ok(())
}

fn gradients() -> anyhow::Result<String> {
    let started = Instant::now();
    let mut report = oracle::GradReport::default();
    let mut kinds = BTreeSet::new();
    let nets = 24;
    for seed in 0..nets {
        let net = oracle::tiny_net(seed);
        for layer in &net.arch.layers {
            kinds.insert(match layer {
                LayerSpec::Conv { .. } => "conv",
                LayerSpec::Relu => "relu",
                LayerSpec::MaxPool { .. } => "maxpool",
                LayerSpec::Dense { .. } => "dense",
                LayerSpec::Head {
                    activation: HeadActivation::Sigmoid,
                    ..
                } => "sigmoid-head",
                LayerSpec::Head {
                    activation: HeadActivation::Softmax,
                    ..
                } => "softmax-head",
            });
        }
        kinds.insert(match net.loss {
            oracle::LossSpec::Bce { .. } => "weighted-bce",
            oracle::LossSpec::Ce { .. } => "cross-entropy",
            oracle::LossSpec::Mse { .. } => "mse",
        });
        oracle::check_gradients(&net, 1e-5, &mut report);
    }
    ensure!(kinds.len() == 9, "layer/loss coverage incomplete: {kinds:?}");
    ensure!(report.skipped_kinks * 10 < report.checked, "{report:?}");
    ensure!(report.max_rel_err < 1e-3, "{report:?}");
    within(Duration::from_secs(30), started)?;
    Ok(format!(
        "{nets} nets, {} coordinates, max rel err {:.2e}",
        report.checked, report.max_rel_err
    ))
}

fn auroc() -> anyhow::Result<String> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    let mut ties = 0usize;
    for _ in 0..100 {
        let n = rng.gen_range(2..=200);
        let levels = rng.gen_range(2..=25);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.35) as u8).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        ties += n - scores.iter().map(|s| s.to_bits()).collect::<BTreeSet<_>>().len();
        let got = metrics::auroc(&scores, &labels)?;
        worst = worst.max((got - oracle::auroc_pairs(&scores, &labels)).abs());
    }
    ensure!(ties > 0, "no ties were generated");
    ensure!(worst <= 1e-12, "max |rank - pairs| = {worst:e}");
    within(Duration::from_secs(5), started)?;
    Ok(format!("100 instances, {ties} tied scores, max diff {worst:.1e}"))
}

fn rebalance() -> anyhow::Result<String> {
    let spec = |neg, pos| TaskSpec {
        image_size: 4,
        negative_count: neg,
        positive_count: pos,
        ..TaskSpec::target_rop()
    };
    let rop_like = synthfundus::generate_dataset(&spec(40, 9))?;
    let dr_like = synthfundus::generate_dataset(&spec(9, 40))?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut batches = 0;
    for r in [1u32, 2, 3, 5] {
        for (data, minority) in [(&rop_like, 1), (&dr_like, 0)] {
            let cfg = RebalanceConfig {
                r,
                enabled: true,
                minority,
            };
            let (w_neg, w_pos) = cfg.class_weights();
            let bs = 4 * (r as usize + 1);
            for _ in 0..10_000 {
                let idx = datapipe::minibatch_indices(data, bs, &cfg, &mut rng)?;
                let pos = idx.iter().filter(|&&i| data.items[i].label == 1).count();
                let neg = idx.len() - pos;
                let (major, minor) = if minority == 1 { (neg, pos) } else { (pos, neg) };
                ensure!(major == r as usize * minor, "r={r}: {major}:{minor}");
                let gap = (neg as f64 * w_neg - pos as f64 * w_pos).abs();
                ensure!(gap <= 1e-9, "r={r}: class weight totals differ by {gap}");
                batches += 1;
            }
        }
    }
    Ok(format!("{batches} batches, r in {{1,2,3,5}}, both minority orientations"))
}

const DETERMINISM_CONFIG: &str = r#"
[source]
positive_count = 300
negative_count = 100
[pretext]
per_class_count = 40
[pretrain]
epochs = 3
[finetune]
epochs = 3
[sweep]
modes = ["Direct", "SourcePretrained"]
fractions = [0.0, 0.5, 0.9]
seeds = [0, 1]
"#;

fn cli(args: &[&str]) -> anyhow::Result<()> {
    let out = Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .context("launching the CLI")?;
    if !out.status.success() {
        bail!("{args:?} failed ({}): {}", out.status, String::from_utf8_lossy(&out.stderr));
    }
    Ok(())
}

fn files_under(root: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root)?.to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn determinism() -> anyhow::Result<String> {
    let started = Instant::now();
    let tmp = tempfile::tempdir()?;
    let cfg = tmp.path().join("config.toml");
    std::fs::write(&cfg, DETERMINISM_CONFIG)?;
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let (a_s, b_s) = (a.to_str().unwrap(), b.to_str().unwrap());
    for cmd in ["gen-data", "pretrain"] {
        cli(&[cmd, "--config", cfg, "--out", a_s])?;
    }
    cli(&["sweep", "--config", cfg, "--out", a_s, "--jobs", "1"])?;
    // second pipeline: one-shot, different worker count
    cli(&["all", "--config", cfg, "--out", b_s, "--jobs", "3"])?;

    let results = std::fs::read(a.join("results.csv"))?;
    ensure!(results == std::fs::read(b.join("results.csv"))?, "results.csv differs");
    ensure!(
        results.iter().filter(|&&c| c == b'\n').count() == 1 + 2 * 3 * 2,
        "expected 12 data rows"
    );
    let ckpts = files_under(&a.join("checkpoints"))?;
    ensure!(ckpts == files_under(&b.join("checkpoints"))?, "checkpoint file sets differ");
    let mut n = 0;
    for rel in &ckpts {
        ensure!(
            std::fs::read(a.join("checkpoints").join(rel))? == std::fs::read(b.join("checkpoints").join(rel))?,
            "{} differs",
            rel.display()
        );
        n += 1;
    }
    within(Duration::from_secs(300), started)?;
    Ok(format!("results.csv and {n} checkpoint files identical"))
}

fn close(got: Option<f64>, want: f64, what: &str) -> anyhow::Result<()> {
    let got = got.with_context(|| format!("{what}: undefined"))?;
    ensure!((got - want).abs() <= 1e-9, "{what}: {got} vs {want}");
    Ok(())
}

fn col(xs: &[&[f64]]) -> Vec<Vec<Option<f64>>> {
    xs.iter().map(|seeds| seeds.iter().map(|&v| Some(v)).collect()).collect()
}

fn fixture_result(direct: &[[f64; 2]; 2], source: &[[f64; 2]; 2]) -> SweepResult {
    let mut grid = std::collections::BTreeMap::new();
    for (mode, table) in [(InitMode::Direct, direct), (InitMode::SourcePretrained, source)] {
        for (f, seeds) in [0.0, 0.9].into_iter().zip(table) {
            for (s, &v) in seeds.iter().enumerate() {
                grid.insert(
                    CellKey::new(mode, f, s as u64),
                    GridEntry {
                        metrics: MetricValues {
                            auroc: Some(v),
                            accuracy: Some(v),
                            precision: Some(v),
                            sensitivity: Some(v),
                        },
                        train_size: 10,
                        epochs: 1,
                        wall_seconds: 0.0,
                        source_ckpt_hash: None,
                    },
                );
            }
        }
    }
    SweepResult {
        modes: vec![InitMode::Direct, InitMode::SourcePretrained],
        fractions: vec![0.0, 0.9],
        seeds: vec![0, 1],
        grid,
        test_set_hash: "fixture".into(),
    }
}

fn table_fixtures() -> anyhow::Result<String> {
    // seed means D = (0.6, 0.5), P = (0.7, 0.525): (100/6 + 5) / 2 = 65/6
    let d = col(&[&[0.5, 0.7], &[0.4, 0.6]]);
    let p = col(&[&[0.7, 0.7], &[0.5, 0.55]]);
    close(mean_improvement_core(&d, &p)?.value, 65.0 / 6.0, "mean improvement")?;
    let q = |a: i64, b: i64| Some(Ratio::new(a, b));
    let exact = mean_improvement_core(
        &[vec![q(1, 2), q(7, 10)], vec![q(2, 5), q(3, 5)]],
        &[vec![q(7, 10), q(7, 10)], vec![q(1, 2), q(11, 20)]],
    )?;
    ensure!(exact.value == Some(Ratio::new(65, 6)), "exact improvement {:?}", exact.value);

    // two seeds: σ = |a − b| / √2, so (0.2 − 0.3) / 0.2 = −50%
    let sd = col(&[&[0.5, 0.7]]);
    let sp = col(&[&[0.4, 0.7]]);
    close(std_reduction_core(&sd, &sp)?.value, -50.0, "negative std reduction")?;
    close(std_reduction_core(&sp, &sd)?.value, 100.0 / 3.0, "std reduction")?;

    close(mean_improvement_core(&d, &d)?.value, 0.0, "self improvement")?;
    close(std_reduction_core(&d, &d)?.value, 0.0, "self std reduction")?;

    // F = 0.85, S = 0.675: 100 · 0.175 / 0.85 = 350/17
    let full = [Some(0.9), Some(0.8)];
    let small = [Some(0.6), Some(0.75)];
    close(size_degradation_core(&full, &small).value, 350.0 / 17.0, "size degradation")?;
    let exact = size_degradation_core(&[q(9, 10), q(4, 5)], &[q(3, 5), q(3, 4)]);
    ensure!(exact.value == Some(Ratio::new(350, 17)), "exact degradation {:?}", exact.value);

    // through the grid: D means (0.7, 0.6), P means (0.9, 0.7)
    let r = fixture_result(&[[0.8, 0.6], [0.5, 0.7]], &[[0.9, 0.9], [0.8, 0.6]]);
    let t = r.tables()?;
    let src = InitMode::SourcePretrained;
    close(
        t.mean_improvement[&src][&Metric::Auroc].value,
        (100.0 * 0.2 / 0.7 + 100.0 * 0.1 / 0.6) / 2.0,
        "grid improvement",
    )?;
    close(t.std_reduction[&src][&Metric::Auroc].value, 50.0, "grid std reduction")?;
    close(t.size_degradation[&src][&Metric::Auroc].value, 100.0 * 0.2 / 0.9, "grid degradation")?;
    close(
        t.size_degradation[&InitMode::Direct][&Metric::Auroc].value,
        100.0 * 0.1 / 0.7,
        "grid Direct degradation",
    )?;
    let same = fixture_result(&[[0.8, 0.6], [0.5, 0.7]], &[[0.8, 0.6], [0.5, 0.7]]).tables()?;
    for m in Metric::ALL {
        close(same.mean_improvement[&src][&m].value, 0.0, "grid self improvement")?;
        close(same.std_reduction[&src][&m].value, 0.0, "grid self std reduction")?;
    }
    Ok("improvement 65/6, std −50% and 33.3%, degradation 350/17, self-comparison 0".into())
}

struct DefaultSweep {
    result: SweepResult,
    seconds: f64,
}

fn default_sweep() -> anyhow::Result<DefaultSweep> {
    let started = Instant::now();
    let tmp = tempfile::tempdir()?;
    let out = tmp.path().join("default");
    cli(&["all", "--out", out.to_str().unwrap()])?;
    let result = read_results(&std::fs::read_to_string(out.join("results.csv"))?)?;
    ensure!(result.grid.len() == 90, "expected 90 runs, got {}", result.grid.len());
    ensure!(out.join("tables.csv").exists() && out.join("plots/auroc.svg").exists());
    Ok(DefaultSweep {
        result,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn mean_auroc(r: &SweepResult, mode: InitMode, f: f64) -> anyhow::Result<f64> {
    let v: Vec<f64> = r
        .values(mode, Metric::Auroc, f)
        .into_iter()
        .collect::<Option<_>>()
        .with_context(|| format!("{mode} AUROC undefined at {f}"))?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

fn directional(sweep: &anyhow::Result<DefaultSweep>) -> anyhow::Result<String> {
    let s = sweep.as_ref().map_err(|e| anyhow::anyhow!("default sweep failed: {e:#}"))?;
    let src = mean_auroc(&s.result, InitMode::SourcePretrained, 0.9)?;
    let direct = mean_auroc(&s.result, InitMode::Direct, 0.9)?;
    let generic = mean_auroc(&s.result, InitMode::GenericPretrained, 0.9)?;
    let line = format!(
        "AUROC at reduction 0.9: source {src:.3}, direct {direct:.3}, generic {generic:.3}; 90 runs in {:.0}s",
        s.seconds
    );
    ensure!(src - direct >= 0.02, "{line}");
    ensure!(src >= generic, "{line}");
    ensure!(s.seconds < 900.0, "{line}");
    Ok(line)
}

fn robustness(sweep: &anyhow::Result<DefaultSweep>) -> anyhow::Result<String> {
    let s = sweep.as_ref().map_err(|e| anyhow::anyhow!("default sweep failed: {e:#}"))?;
    let t = s.result.tables()?;
    let deg = |m| t.size_degradation[&m][&Metric::Auroc].value.context("undefined degradation");
    let (src, direct) = (deg(InitMode::SourcePretrained)?, deg(InitMode::Direct)?);
    let line = format!("AUROC size degradation: source {src:.1}%, direct {direct:.1}%");
    ensure!(src <= direct, "{line}");
    Ok(line)
}

fn checkpoints() -> anyhow::Result<String> {
    let arch = Architecture::reference(16, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut params = arch.init_params::<f32>(3)?;
    // arbitrary bit patterns, including subnormals and NaN payloads
    for t in params.iter_mut() {
        for v in t.tensor.data_mut() {
            *v = f32::from_bits(rng.gen());
        }
    }
    let prov = Provenance {
        init_mode: "Pretrain".into(),
        source_task: Some("SourceDR".into()),
        seed: 3,
        epochs: 0,
    };
    let ckpt = Checkpoint::new(&arch, params, prov);
    let bytes = ckpt.to_bytes()?;
    let back = Checkpoint::from_bytes(&bytes)?;
    ensure!(back.params.bit_eq(&ckpt.params), "parameters changed in the round trip");
    ensure!(back.provenance == ckpt.provenance && back.fingerprint == ckpt.fingerprint);
    ensure!(back.to_bytes()? == bytes, "re-encoding differs");
    let corrupt = |b: &[u8]| matches!(Checkpoint::from_bytes(b), Err(Error::CorruptCheckpoint(_)));
    let mut bad = bytes.clone();
    bad[3] ^= 0x20;
    ensure!(corrupt(&bad), "bad magic accepted");
    let cuts: Vec<usize> = (0..bytes.len()).step_by(97).chain([bytes.len() - 1]).collect();
    for &cut in &cuts {
        ensure!(corrupt(&bytes[..cut]), "truncation at {cut} accepted");
    }
    Ok(format!("{} bytes bit-exact; bad magic and {} truncations rejected", bytes.len(), cuts.len()))
}

fn split_and_reduction() -> anyhow::Result<String> {
    let ds = synthfundus::generate_dataset(&TaskSpec {
        image_size: 4,
        ..TaskSpec::target_rop()
    })?;
    ensure!(ds.len() == 973 && ds.class_counts() == [742, 231], "{:?}", ds.class_counts());
    let (train, test) = synthfundus::split(&ds, TrainRatio::four_to_one(), 202)?;
    ensure!(train.len() == 777 && test.len() == 196, "{} / {}", train.len(), test.len());
    ensure!(train.class_counts() == [593, 184], "train classes {:?}", train.class_counts());
    let reduced = datapipe::reduce_training_set(&ds, 0.3, 0)?;
    ensure!(reduced.class_counts() == [519, 162], "reduced {:?}", reduced.class_counts());
    Ok("973 → 777 (593 + 184) / 196; 742/231 at 0.3 → 519 + 162".into())
}

fn run(n: usize, name: &str, f: impl FnOnce() -> anyhow::Result<String>) -> bool {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(anyhow::anyhow!("panicked: {msg}"))
    });
    let t = started.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS [{n}] {name}: {detail} ({t:.1}s)");
            true
        }
        Err(e) => {
            println!("FAIL [{n}] {name}: {e:#} ({t:.1}s)");
            false
        }
    }
}

fn main() {
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut ok = true;
    if want(1) {
        ok &= run(1, "gradient oracle", gradients);
    }
    if want(2) {
        ok &= run(2, "AUROC oracle", auroc);
    }
    if want(3) {
        ok &= run(3, "rebalance exactness", rebalance);
    }
    if want(4) {
        ok &= run(4, "pipeline determinism", determinism);
    }
    if want(5) {
        ok &= run(5, "table formulas", table_fixtures);
    }
    if want(6) || want(7) {
        let sweep = catch_unwind(default_sweep).unwrap_or_else(|_| Err(anyhow::anyhow!("default sweep panicked")));
        if want(6) {
            ok &= run(6, "transfer beats direct training", || directional(&sweep));
        }
        if want(7) {
            ok &= run(7, "robustness to sample reduction", || robustness(&sweep));
        }
    }
    if want(8) {
        ok &= run(8, "checkpoint format", checkpoints);
    }
    if want(9) {
        ok &= run(9, "split and reduction arithmetic", split_and_reduction);
    }
    if !ok {
        std::process::exit(1);
    }
}
