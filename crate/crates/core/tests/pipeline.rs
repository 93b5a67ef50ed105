use ipsi_core::estimator::{
    estimate_complete_case, estimate_cross_fit, estimate_ipw, estimate_no_censoring, estimate_plugin,
    estimate_with_folds,
};
use ipsi_core::inference::uniform_band;
use ipsi_core::intervention::{default_grid, DeltaGrid};
use ipsi_core::panel::{read_long_csv, split_folds, write_long_csv_to, CsvSchema};
use ipsi_core::simulation::{benchmark_specs, oracle_specs, simulate, true_psi_oracle, DgpConfig, DgpKind};
use ipsi_core::{Error, FoldAssignment, LearnerSpec, NuisanceSpecs, OracleFn, PanelDataset, Trajectory};
use proptest::prelude::*;

fn dropout_panel(n: usize, horizon: usize, seed: u64) -> (DgpConfig, PanelDataset) {
    let cfg = DgpConfig {
        kind: DgpKind::DropoutSim { u_l: 1.0 },
        n,
        horizon,
        seed,
    };
    (cfg, simulate(&cfg).unwrap())
}

#[test]
fn csv_round_trip_preserves_estimates() {
    let (_, ds) = dropout_panel(200, 3, 1);
    let mut buf = Vec::new();
    write_long_csv_to(&ds, &mut buf).unwrap();
    let back = read_long_csv(buf.as_slice(), &CsvSchema::default()).unwrap();
    assert_eq!(back, ds);
    let grid = DeltaGrid::new(vec![0.5, 2.0]).unwrap();
    let a = estimate_cross_fit(&ds, 2, 4, &benchmark_specs(), &grid, 3).unwrap();
    let b = estimate_cross_fit(&back, 2, 4, &benchmark_specs(), &grid, 3).unwrap();
    assert_eq!(a.estimate.psi_hat, b.estimate.psi_hat);
}

#[test]
fn delta_one_oracle_recovers_sample_mean() {
    let cfg = DgpConfig {
        kind: DgpKind::Observational,
        n: 5000,
        horizon: 2,
        seed: 3,
    };
    let ds = simulate(&cfg).unwrap();
    let grid = DeltaGrid::single(1.0).unwrap();
    let est = estimate_cross_fit(&ds, 2, 1, &oracle_specs(cfg.kind, 2), &grid, 2).unwrap().estimate;
    let ys: Vec<f64> = ds.trajectories().iter().map(|t| t.outcome(2).unwrap()).collect();
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((est.psi_hat[0] - mean).abs() <= 3.0 * sd / n.sqrt());
}

#[test]
fn oracle_cross_fit_matches_plugin() {
    let (cfg, ds) = dropout_panel(402, 3, 5);
    let specs = oracle_specs(cfg.kind, 3);
    let grid = DeltaGrid::new(vec![0.3, 1.0, 4.0]).unwrap();
    let cf = estimate_cross_fit(&ds, 3, 2, &specs, &grid, 3).unwrap();
    let pl = estimate_plugin(&ds, &specs, &grid, 3).unwrap();
    for d in 0..grid.len() {
        assert_eq!(cf.eif.column(d), pl.eif.column(d));
        assert!((cf.estimate.psi_hat[d] - pl.estimate.psi_hat[d]).abs() < 1e-10);
    }
}

#[test]
fn duplicated_folds_give_equal_fold_means() {
    let (cfg, ds) = dropout_panel(150, 2, 8);
    let mut trajs: Vec<Trajectory> = ds.trajectories().to_vec();
    trajs.extend(ds.trajectories().iter().map(|t| {
        Trajectory::new(
            format!("{}b", t.subject_id()),
            (1..=2).map(|s| t.covariates(s).map(<[f64]>::to_vec)).collect(),
            (1..=2).map(|s| t.treatment(s)).collect(),
            (1..=2).map(|s| t.outcome(s)).collect(),
            t.retention().to_vec(),
        )
        .unwrap()
    }));
    let doubled = PanelDataset::new(trajs).unwrap();
    let labels: Vec<usize> = (0..doubled.len()).map(|i| usize::from(i >= ds.len())).collect();
    let folds = FoldAssignment::from_labels(labels, 2).unwrap();
    let grid = DeltaGrid::new(vec![0.5, 2.0]).unwrap();
    let est = estimate_with_folds(&doubled, &folds, &oracle_specs(cfg.kind, 2), &grid, 2).unwrap().estimate;
    for d in 0..2 {
        assert!((est.fold_psi[0][d] - est.fold_psi[1][d]).abs() < 1e-12);
    }
}

#[test]
fn ipw_is_plugin_with_zero_outcome_model() {
    let (_, ds) = dropout_panel(300, 3, 9);
    let grid = DeltaGrid::new(vec![0.5, 1.0, 3.0]).unwrap();
    let specs = benchmark_specs();
    let ipw = estimate_ipw(&ds, &specs, &grid, 3).unwrap();
    let zero = NuisanceSpecs {
        outcome: LearnerSpec::Oracle(OracleFn::constant(0.0)),
        ..specs
    };
    let pl = estimate_plugin(&ds, &zero, &grid, 3).unwrap();
    assert_eq!(ipw.estimate.psi_hat, pl.estimate.psi_hat);
}

#[test]
fn no_censoring_uses_complete_cases() {
    let (_, ds) = dropout_panel(400, 4, 10);
    let grid = DeltaGrid::single(2.0).unwrap();
    let est = estimate_no_censoring(&ds, 2, 1, &benchmark_specs(), &grid, 4).unwrap().estimate;
    let complete = ds.trajectories().iter().filter(|t| t.retained(5)).count();
    assert_eq!(est.n, complete);
    assert!(est.n < ds.len());
}

#[test]
fn complete_case_errors_on_empty_group() {
    let t = Trajectory::new("1", vec![Some(vec![0.0])], vec![Some(true)], vec![Some(1.0)], vec![true, true]).unwrap();
    let ds = PanelDataset::new(vec![t]).unwrap();
    assert!(matches!(estimate_complete_case(&ds, 1), Err(Error::Undefined(_))));
}

#[test]
fn trial_truth_increases_with_delta() {
    let cfg = DgpConfig {
        kind: DgpKind::Trial { p: 0.5 },
        n: 1,
        horizon: 4,
        seed: 0,
    };
    let truth = true_psi_oracle(&cfg, &default_grid(), 4, 50_000, 2).unwrap();
    assert!(truth.windows(2).all(|w| w[1].psi > w[0].psi));
}

#[test]
fn effect_and_band_csv_layout() {
    let (_, ds) = dropout_panel(300, 2, 12);
    let grid = DeltaGrid::new(vec![0.5, 1.0, 2.0]).unwrap();
    let est = estimate_cross_fit(&ds, 2, 1, &benchmark_specs(), &grid, 2).unwrap();
    let mut out = Vec::new();
    est.estimate.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "delta,psi_hat,sigma_hat,n");
    assert_eq!(text.lines().count(), 4);
    let band = uniform_band(&est.eif, &est.estimate.psi_hat, &est.estimate.sigma_hat, 0.05, 200, 3).unwrap();
    let mut out = Vec::new();
    band.write_csv(&mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap().lines().count(), 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn folds_partition_subjects(n in 2usize..200, k in 2usize..6, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let (_, ds) = dropout_panel(n, 1, seed % 1000);
        let f = split_folds(&ds, k, seed).unwrap();
        let sizes = f.sizes();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for i in 0..n {
            prop_assert_eq!((0..k).filter(|&j| f.members(j).any(|m| m == i)).count(), 1);
        }
    }
}
