use statrs::distribution::{ContinuousCDF, Normal};
use velora_harness::analyze::{divergence_rows, run_analysis, AnalysisRow};
use velora_harness::{parse_config, run_training, ExperimentConfig};

fn config() -> ExperimentConfig {
    parse_config(
        r#"
seed = 4
epochs = 1
batch_size = 16
[dataset]
kind = "synthetic_regression"
n = 256
d_in = 24
[model]
kind = "mlp"
hidden = [16]
[layers.layer1]
save_policy = "velora"
m = 4
[analysis]
ms = [1, 2, 3, 4, 8, 16]
sigmas = [0.05, 0.1]
k_factors = [1.0, 4.0]
mc_samples = 20000
probe_examples = 20
"#,
    )
    .unwrap()
}

#[test]
fn analysis_report_rows() {
    let cfg = config();
    let out = run_training(&cfg).unwrap();
    let rows = run_analysis(&cfg, &out.checkpoint).unwrap();

    let mut stable = 0;
    let mut skipped = Vec::new();
    for row in &rows {
        match row {
            AnalysisRow::StableRank { d, m, rows, stable_rank, normalized, .. } => {
                stable += 1;
                assert_eq!(*rows, 20 * d / m);
                assert!(*stable_rank >= 1.0 - 1e-9 && *stable_rank <= (*rows).min(*m) as f64 + 1e-9);
                assert!(*normalized > 0.0 && *normalized <= 1.0 + 1e-9);
            }
            AnalysisRow::Skipped { layer, d, m, .. } => skipped.push((layer.clone(), *d, *m)),
            _ => {}
        }
    }
    // layer0 (D=24) drops 16; layer1 (D=16) drops 3
    assert_eq!(skipped, vec![("layer0".into(), 24, 16), ("layer1".into(), 16, 3)]);
    assert_eq!(stable, 2 * 6 - 2);

    let projection: Vec<_> = rows.iter().filter(|r| matches!(r, AnalysisRow::Projection { .. })).collect();
    assert_eq!(projection.len(), 1);
    if let AnalysisRow::Projection { m, v, relative_error, .. } = projection[0] {
        assert_eq!(*m, 4);
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((0.0..=1.0).contains(relative_error));
    }
    let params: Vec<_> = rows
        .iter()
        .filter_map(|r| match r {
            AnalysisRow::Sparsity { param, fraction_zero, .. } => Some((param.as_str(), *fraction_zero)),
            _ => None,
        })
        .collect();
    assert_eq!(params.len(), 4);
    assert!(params.iter().all(|(_, f)| (0.0..=1.0).contains(f)));

    for row in &rows {
        let line = row.to_line();
        assert_eq!(&serde_json::from_str::<AnalysisRow>(&line).unwrap(), row);
    }
}

#[test]
fn divergence_rows_against_normal_cdf_oracle() {
    let cfg = config();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let rows = divergence_rows(&cfg).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 2);
    for row in rows {
        let AnalysisRow::Divergence { sigma, k, analytic, montecarlo, model, tolerance, .. } = row else {
            panic!("unexpected row");
        };
        let oracle = 2.0 * (1.0 - normal.cdf(k.sqrt() / sigma));
        assert!((analytic - oracle).abs() < 1e-9);
        if (k - sigma * sigma).abs() < 1e-15 {
            assert!((analytic - 0.31731).abs() < 1e-5);
        }
        if model == "first_order" {
            assert!((montecarlo - analytic).abs() <= tolerance, "σ={sigma} k={k}: {montecarlo} vs {analytic}");
        }
        assert!((0.0..=1.0).contains(&montecarlo));
    }
}
