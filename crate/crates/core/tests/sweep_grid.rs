use std::collections::BTreeMap;

use num_rational::Ratio;
use retina_xfer::datapipe::{AugmentConfig, RebalanceConfig};
use retina_xfer::metrics::Metric;
use retina_xfer::sweep::{self, CellKey, GridEntry, MetricValues, ResultRow, SweepConfig, SweepResult};
use retina_xfer::synthfundus::TaskSpec;
use retina_xfer::trainer::InitMode;

fn tiny_config() -> SweepConfig {
    let size = 12;
    let mut c = SweepConfig {
        modes: InitMode::ALL.to_vec(),
        fractions: vec![0.0, 0.5],
        seeds: vec![0, 1],
        source: TaskSpec { image_size: size, negative_count: 30, positive_count: 90, ..TaskSpec::source_dr() },
        target: TaskSpec { image_size: size, negative_count: 60, positive_count: 20, ..TaskSpec::target_rop() },
        pretext: TaskSpec { image_size: size, per_class_count: 12, ..TaskSpec::generic_pretext() },
        ..SweepConfig::default()
    };
    for t in [&mut c.pretrain, &mut c.finetune] {
        t.epochs = 2;
        t.batch_size = 8;
        t.augment = AugmentConfig { output_size: size, ..AugmentConfig::default() };
    }
    c.pretrain.rebalance = RebalanceConfig::from_counts(30, 90);
    c.finetune.rebalance = RebalanceConfig::from_counts(60, 20);
    c
}

#[test]
fn grid_is_deterministic_across_worker_counts() {
    let config = tiny_config();
    let data = sweep::TargetData::generate(&config).unwrap();
    let sources = sweep::pretrain_all(&config).unwrap();
    assert_eq!(sources.len(), 4);

    let mut order = Vec::new();
    let mut ckpts = BTreeMap::new();
    let a = sweep::run_grid(&config, &data, &sources, 1, |cell| {
        order.push(cell.key);
        ckpts.insert(cell.key, cell.record.checkpoint.to_bytes().unwrap());
        Ok(())
    })
    .unwrap();
    assert_eq!(order, config.cells());

    let mut order3 = Vec::new();
    let b = sweep::run_grid(&config, &data, &sources, 3, |cell| {
        order3.push(cell.key);
        assert_eq!(&cell.record.checkpoint.to_bytes().unwrap(), &ckpts[&cell.key]);
        Ok(())
    })
    .unwrap();
    assert_eq!(order3, order);
    assert_eq!(a, b);

    let lines: Vec<String> = a.rows().iter().map(ResultRow::to_csv_line).collect();
    let parsed: Vec<ResultRow> = lines.iter().map(|l| ResultRow::parse_csv_line(l).unwrap()).collect();
    assert_eq!(SweepResult::from_rows(&parsed).unwrap(), a);
    assert!(a.tables().is_ok());
}

#[test]
fn failing_cell_names_its_coordinate() {
    let mut config = tiny_config();
    config.fractions = vec![0.0, 0.97];
    let data = sweep::TargetData::generate(&config).unwrap();
    let sources = sweep::pretrain_all(&config).unwrap();
    let err = sweep::run_grid(&config, &data, &sources, 2, |_| Ok(())).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("fraction=0.97"), "{msg}");
}

fn entry(auroc: Option<f64>) -> GridEntry {
    GridEntry {
        metrics: MetricValues { auroc, accuracy: auroc, precision: None, sensitivity: auroc },
        train_size: 10,
        epochs: 1,
        wall_seconds: 0.0,
        source_ckpt_hash: None,
    }
}

/// Two modes, two fractions, `values[mode][fraction][seed]` AUROCs.
fn result(fractions: &[f64], values: [&[&[f64]]; 2]) -> SweepResult {
    let modes = vec![InitMode::Direct, InitMode::SourcePretrained];
    let seeds: Vec<u64> = (0..values[0][0].len() as u64).collect();
    let mut grid = BTreeMap::new();
    for (m, mode) in modes.iter().enumerate() {
        for (f, &frac) in fractions.iter().enumerate() {
            for &s in &seeds {
                grid.insert(CellKey::new(*mode, frac, s), entry(Some(values[m][f][s as usize])));
            }
        }
    }
    SweepResult { modes, fractions: fractions.to_vec(), seeds, grid, test_set_hash: "h".into() }
}

#[test]
fn improvement_fixture_and_self_comparison() {
    let r = result(&[0.0, 0.9], [&[&[0.80], &[0.60]], &[&[0.88], &[0.72]]]);
    let t = sweep::mean_improvement(&r, InitMode::SourcePretrained).unwrap();
    assert!((t[&Metric::Auroc].value.unwrap() - 15.0).abs() < 1e-9);
    assert_eq!(t[&Metric::Precision].value, None);
    assert_eq!(t[&Metric::Precision].excluded, 2);
    let own = sweep::mean_improvement(&r, InitMode::Direct).unwrap();
    assert_eq!(own[&Metric::Auroc].value, Some(0.0));

    let exact = sweep::mean_improvement_core(
        &[vec![Some(Ratio::new(4i64, 5))], vec![Some(Ratio::new(3, 5))]],
        &[vec![Some(Ratio::new(22i64, 25))], vec![Some(Ratio::new(18, 25))]],
    )
    .unwrap();
    assert_eq!(exact.value, Some(Ratio::from_integer(15)));
}

#[test]
fn std_reduction_fixture_and_sign() {
    let r = result(&[0.0, 0.9], [&[&[0.78, 0.80, 0.82], &[0.57, 0.60, 0.63]], &[&[0.79, 0.80, 0.81], &[0.58, 0.60, 0.62]]]);
    // σ_D: 0.02, 0.03; σ_P: 0.01, 0.02 → 50%, 33.3%
    let t = sweep::std_reduction(&r, InitMode::SourcePretrained).unwrap();
    let want = (50.0 + 100.0 / 3.0) / 2.0;
    assert!((t[&Metric::Auroc].value.unwrap() - want).abs() < 1e-9);
    assert_eq!(sweep::std_reduction(&r, InitMode::Direct).unwrap()[&Metric::Auroc].value, Some(0.0));

    let worse = result(&[0.0, 0.9], [&[&[0.79, 0.80, 0.81], &[0.58, 0.60, 0.62]], &[&[0.78, 0.80, 0.82], &[0.57, 0.60, 0.63]]]);
    let t = sweep::std_reduction(&worse, InitMode::SourcePretrained).unwrap();
    assert!((t[&Metric::Auroc].value.unwrap() - (-100.0 - 50.0) / 2.0).abs() < 1e-9);
}

#[test]
fn size_degradation_fixture() {
    let r = result(&[0.0, 0.5, 0.9], [&[&[0.90], &[0.88], &[0.85]], &[&[0.90], &[0.89], &[0.90]]]);
    let d = sweep::size_degradation(&r, InitMode::Direct).unwrap();
    assert!((d[&Metric::Auroc].value.unwrap() - 100.0 * 0.05 / 0.90).abs() < 1e-9);
    assert_eq!(sweep::size_degradation(&r, InitMode::SourcePretrained).unwrap()[&Metric::Auroc].value, Some(0.0));
    let missing = result(&[0.0, 0.5], [&[&[0.9], &[0.8]], &[&[0.9], &[0.8]]]);
    assert!(sweep::size_degradation(&missing, InitMode::Direct).is_err());
}

#[test]
fn learning_curve_points() {
    let r = result(&[0.0, 0.9], [&[&[0.8, 0.9, 1.0], &[0.5, 0.6, 0.7]], &[&[0.8, 0.8, 0.8], &[0.6, 0.6, 0.6]]]);
    let c = sweep::learning_curves(&r, InitMode::Direct, Metric::Auroc);
    assert_eq!(c.len(), 2);
    assert_eq!(c[0].size, 0.1);
    assert_eq!(c[1].size, 1.0);
    assert!((c[1].mean - 0.9).abs() < 1e-12);
    assert_eq!((c[1].min, c[1].max), (0.8, 1.0));
}

#[test]
fn incomplete_grid_is_reported() {
    let mut r = result(&[0.0, 0.9], [&[&[0.8], &[0.6]], &[&[0.88], &[0.72]]]);
    r.grid.remove(&CellKey::new(InitMode::SourcePretrained, 0.9, 0));
    let err = r.tables().unwrap_err().to_string();
    assert!(err.contains("SourcePretrained") && err.contains("0.9"), "{err}");
}
