use std::sync::{Mutex, OnceLock};

use nalgebra::DMatrix;
use velora_core::compression::{initialise, init_svd, InitStrategy, Provenance};
use velora_core::rng::SeededRng;
use velora_core::Tensor;

struct Capture(Mutex<Vec<String>>);

impl log::Log for Capture {
    fn enabled(&self, _: &log::Metadata) -> bool {
        true
    }
    fn log(&self, record: &log::Record) {
        if record.level() <= log::Level::Warn {
            self.0.lock().unwrap().push(record.args().to_string());
        }
    }
    fn flush(&self) {}
}

fn capture() -> &'static Capture {
    static LOGGER: OnceLock<&'static Capture> = OnceLock::new();
    LOGGER.get_or_init(|| {
        let c: &'static Capture = Box::leak(Box::new(Capture(Mutex::new(Vec::new()))));
        log::set_logger(c).unwrap();
        log::set_max_level(log::LevelFilter::Warn);
        c
    })
}

/// Sub-tokens with a dominant direction plus noise.
fn batch(rows: usize, m: usize, seed: u64) -> Tensor {
    let mut rng = SeededRng::new(seed, 0);
    let dir: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
    let data = (0..rows)
        .flat_map(|_| {
            let c = 3.0 * rng.normal();
            dir.iter().map(|d| c * d + 0.3 * rng.normal()).collect::<Vec<_>>()
        })
        .collect();
    Tensor::new(vec![rows, m], data).unwrap()
}

#[test]
fn all_strategies_give_unit_vectors() {
    for m in [1, 2, 4, 8, 16] {
        for strategy in InitStrategy::ALL {
            let pv = initialise("l", strategy, &batch(64, m, m as u64), 0.9, 100, 3).unwrap();
            let n: f64 = pv.v().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6, "{strategy:?} M={m}");
            assert_eq!(pv.strategy(), strategy);
        }
    }
}

#[test]
fn svd_agrees_with_reference_decomposition() {
    for (rows, m, seed) in [(64, 4, 1), (200, 8, 2), (500, 16, 3), (40, 3, 4)] {
        let b = batch(rows, m, seed);
        let pv = init_svd("l", &b, 200, seed).unwrap();
        let svd = DMatrix::from_row_slice(rows, m, b.data()).svd(false, true);
        let vt = svd.v_t.unwrap();
        let top = (0..svd.singular_values.len())
            .max_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]))
            .unwrap();
        let cos: f64 = (0..m).map(|k| vt[(top, k)] * pv.v()[k]).sum();
        assert!(cos.abs() >= 1.0 - 1e-4, "rows={rows} M={m}: {cos}");
    }
}

#[test]
fn degenerate_first_batch_falls_back_and_logs() {
    let log = capture();
    let zeros = Tensor::zeros(&[32, 8]).unwrap();
    for strategy in [InitStrategy::FixedAverage, InitStrategy::Svd, InitStrategy::RunningAverage] {
        log.0.lock().unwrap().clear();
        let pv = initialise("deg", strategy, &zeros, 0.9, 50, 9).unwrap();
        assert_eq!(pv.provenance(), Provenance::FallbackRandom, "{strategy:?}");
        let n: f64 = pv.v().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        let msgs = log.0.lock().unwrap();
        assert!(msgs.iter().any(|m| m.contains("deg") && m.contains("falling back")), "{strategy:?}: {msgs:?}");
    }
}
