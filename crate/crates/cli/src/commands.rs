//! The `gen-data`, `pretrain`, `sweep` and `all` commands.

use std::collections::BTreeMap;
use std::io::Write;

use anyhow::{bail, Context};
use retina_xfer::neuralnet::{load_checkpoint, Checkpoint};
use retina_xfer::seed::sha256_hex;
use retina_xfer::sweep::{self, ResultRow, SourceCheckpoints, SweepConfig, SweepResult, TargetData, RESULTS_HEADER};
use retina_xfer::synthfundus::{self, Dataset, TaskSpec, TrainRatio};
use retina_xfer::trainer::{self, InitMode};

use crate::config::ExperimentConfig;
use crate::report;
use crate::rundir::{
    read_json, write_file, write_json, DatasetEntry, DatasetsManifest, RunDir, RunRecordFile, SourceProvenance,
    SplitEntry, SweepManifest,
};

fn split_entry(d: &Dataset) -> SplitEntry {
    SplitEntry {
        count: d.len(),
        class_counts: d.class_counts(),
        content_hash: d.content_hash(),
    }
}

/// Ratio used to split `spec` into train and test: the sweep's ratio for the
/// target task, 4:1 for pretraining sources.
fn ratio_for(config: &SweepConfig, spec: &TaskSpec) -> TrainRatio {
    if spec.task_id == config.target.task_id {
        config.train_ratio
    } else {
        TrainRatio::four_to_one()
    }
}

fn snapshot(exp: &ExperimentConfig, run: &RunDir) -> anyhow::Result<()> {
    write_file(&run.config(), exp.to_toml().as_bytes())
}

/// Generates all three tasks, exports them under `datasets/`, and writes the
/// manifest with content hashes of each dataset and its split.
pub fn gen_data(exp: &ExperimentConfig, run: &RunDir) -> anyhow::Result<DatasetsManifest> {
    let config = exp.sweep_config()?;
    snapshot(exp, run)?;
    let mut datasets = Vec::new();
    for spec in [&config.source, &config.target, &config.pretext] {
        let data = synthfundus::generate_dataset(spec)?;
        let (train, test) = synthfundus::split(&data, ratio_for(&config, spec), spec.seed)?;
        let name = spec.task_id.name();
        let dir = run.datasets().join(name);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        data.export(&dir)?;
        log::info!("{name}: {} images, classes {:?}", data.len(), data.class_counts());
        datasets.push(DatasetEntry {
            task_id: name.to_string(),
            dir: name.to_string(),
            count: data.len(),
            class_counts: data.class_counts(),
            positives: spec.task_id.is_binary().then(|| data.num_positive()),
            content_hash: data.content_hash(),
            train: split_entry(&train),
            test: split_entry(&test),
        });
    }
    let manifest = DatasetsManifest {
        image_size: exp.image_size,
        datasets,
    };
    write_json(&run.datasets_manifest(), &manifest)?;
    Ok(manifest)
}

fn load_manifest(run: &RunDir) -> anyhow::Result<DatasetsManifest> {
    let path = run.datasets_manifest();
    if !path.exists() {
        bail!("no datasets manifest at {}; run gen-data first", path.display());
    }
    read_json(&path)
}

fn check_hash(what: &str, expected: &str, actual: &str) -> anyhow::Result<()> {
    if expected != actual {
        bail!("{what} does not match the datasets manifest ({actual} vs {expected}); rerun gen-data");
    }
    Ok(())
}

fn pretrain_one(
    config: &SweepConfig,
    run: &RunDir,
    mode: InitMode,
    seed: u64,
    train: &Dataset,
) -> anyhow::Result<Checkpoint> {
    let cfg = config.pretrain_config(seed);
    let out = trainer::pretrain_on(train, &config.arch(), &cfg)
        .with_context(|| format!("pretraining {mode} seed {seed}"))?;
    let bytes = out.checkpoint.to_bytes()?;
    write_file(&run.source_checkpoint(mode, seed), &bytes)?;
    write_json(
        &run.source_provenance(mode, seed),
        &SourceProvenance {
            mode,
            source_task: train.spec.task_id.name().to_string(),
            seed,
            fingerprint: out.checkpoint.fingerprint.clone(),
            checkpoint_sha256: sha256_hex(&bytes),
            train_set_hash: train.content_hash(),
            config: cfg,
            epoch_losses: out.epoch_losses.clone(),
        },
    )?;
    log::info!(
        "pretrained {mode} seed {seed}: final loss {:?}",
        out.epoch_losses.last()
    );
    Ok(out.checkpoint)
}

/// Pretrains one checkpoint per seed for each of `modes`.
pub fn pretrain(exp: &ExperimentConfig, run: &RunDir, modes: &[InitMode]) -> anyhow::Result<SourceCheckpoints> {
    let config = exp.sweep_config()?;
    snapshot(exp, run)?;
    let manifest = load_manifest(run)?;
    let mut out = BTreeMap::new();
    for &mode in modes {
        let task = config
            .task_for(mode)
            .with_context(|| format!("{mode} has no pretraining task"))?;
        let train = trainer::source_train_split(task)?;
        check_hash(
            &format!("{} train split", task.task_id),
            &manifest.get(task.task_id.name())?.train.content_hash,
            &train.content_hash(),
        )?;
        for &seed in &config.seeds {
            out.insert((mode, seed), pretrain_one(&config, run, mode, seed, &train)?);
        }
    }
    Ok(out)
}

/// The stored checkpoint, if it exists and was produced by the current
/// pretraining config on the current data.
fn reusable_checkpoint(
    config: &SweepConfig,
    run: &RunDir,
    mode: InitMode,
    seed: u64,
    train_set_hash: &str,
) -> anyhow::Result<Option<Checkpoint>> {
    let (ckpt_path, prov_path) = (run.source_checkpoint(mode, seed), run.source_provenance(mode, seed));
    if !ckpt_path.exists() || !prov_path.exists() {
        return Ok(None);
    }
    let prov: SourceProvenance = read_json(&prov_path)?;
    let bytes = std::fs::read(&ckpt_path)?;
    if prov.config != config.pretrain_config(seed)
        || prov.train_set_hash != train_set_hash
        || prov.checkpoint_sha256 != sha256_hex(&bytes)
    {
        log::warn!("{} is stale, pretraining again", ckpt_path.display());
        return Ok(None);
    }
    Ok(Some(load_checkpoint(&ckpt_path)?))
}

fn ensure_sources(config: &SweepConfig, run: &RunDir) -> anyhow::Result<SourceCheckpoints> {
    let mut out = BTreeMap::new();
    for mode in config.pretrained_modes() {
        let task = config.task_for(mode).expect("pretrained mode has a task");
        let train = trainer::source_train_split(task)?;
        let hash = train.content_hash();
        for &seed in &config.seeds {
            let ckpt = match reusable_checkpoint(config, run, mode, seed, &hash)? {
                Some(c) => c,
                None => pretrain_one(config, run, mode, seed, &train)?,
            };
            out.insert((mode, seed), ckpt);
        }
    }
    Ok(out)
}

/// Runs the grid, streaming results.csv in canonical cell order. Missing
/// datasets and checkpoints are built first.
pub fn sweep(exp: &ExperimentConfig, run: &RunDir, jobs: usize) -> anyhow::Result<SweepResult> {
    let config = exp.sweep_config()?;
    let manifest = if run.datasets_manifest().exists() {
        load_manifest(run)?
    } else {
        log::info!("no datasets yet, generating");
        gen_data(exp, run)?
    };
    snapshot(exp, run)?;
    let data = TargetData::generate(&config)?;
    let target = manifest.get(config.target.task_id.name())?;
    check_hash("target train split", &target.train.content_hash, &data.train.content_hash())?;
    check_hash("target test split", &target.test.content_hash, &data.test.content_hash())?;
    let sources = ensure_sources(&config, run)?;

    let results_path = run.results();
    let mut csv = std::io::BufWriter::new(
        std::fs::File::create(&results_path).with_context(|| format!("creating {}", results_path.display()))?,
    );
    writeln!(csv, "{RESULTS_HEADER}")?;
    csv.flush()?;
    let test_set_hash = data.test.content_hash();
    let result = sweep::run_grid(&config, &data, &sources, jobs, |cell| {
        let entry = cell.entry(&config);
        let row = ResultRow::from_entry(&cell.key, &entry, &test_set_hash);
        let bytes = cell.record.checkpoint.to_bytes()?;
        let mut io = || -> anyhow::Result<()> {
            write_file(&run.run_checkpoint(&row.run_id), &bytes)?;
            write_json(
                &run.run_record(&row.run_id),
                &RunRecordFile {
                    run_id: row.run_id.clone(),
                    init_mode: cell.key.mode,
                    reduction_fraction: cell.key.fraction.value(),
                    seed: cell.key.seed,
                    train_size: entry.train_size,
                    epochs: entry.epochs,
                    head_replaced: cell.record.head_replaced,
                    metrics: cell.metrics,
                    epoch_losses: cell.record.epoch_losses.clone(),
                    wall_seconds: entry.wall_seconds,
                    checkpoint_sha256: sha256_hex(&bytes),
                    source_ckpt_hash: entry.source_ckpt_hash.clone(),
                },
            )?;
            writeln!(csv, "{}", row.to_csv_line())?;
            csv.flush()?;
            Ok(())
        };
        io().map_err(|e| retina_xfer::Error::Io(std::io::Error::other(format!("{e:#}"))))
    })?;
    drop(csv);

    let written = std::fs::read(&results_path)?;
    let reparsed = report::read_results(&String::from_utf8(written.clone())?)?;
    if reparsed.grid != result.grid {
        bail!("results.csv does not reproduce the in-memory sweep");
    }
    let source_checkpoints = sources
        .iter()
        .map(|((mode, seed), c)| Ok((format!("{}_s{seed}", mode.name()), sha256_hex(&c.to_bytes()?))))
        .collect::<anyhow::Result<_>>()?;
    write_json(
        &run.sweep_manifest(),
        &SweepManifest {
            config: exp.clone(),
            dataset_hashes: manifest
                .datasets
                .iter()
                .map(|d| (d.task_id.clone(), d.content_hash.clone()))
                .collect(),
            grid_size: result.grid.len(),
            modes: result.modes.clone(),
            fractions: result.fractions.clone(),
            seeds: result.seeds.clone(),
            train_set_hash: data.train.content_hash(),
            test_set_hash,
            source_checkpoints,
            results_sha256: sha256_hex(&written),
        },
    )?;
    log::info!("sweep complete: {} cells", result.grid.len());
    Ok(result)
}

/// gen-data → pretrain → sweep → report.
pub fn all(exp: &ExperimentConfig, run: &RunDir, jobs: usize) -> anyhow::Result<SweepResult> {
    gen_data(exp, run)?;
    let config = exp.sweep_config()?;
    pretrain(exp, run, &config.pretrained_modes())?;
    let result = sweep(exp, run, jobs)?;
    report::report(run)?;
    Ok(result)
}
