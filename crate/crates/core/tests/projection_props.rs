use nalgebra::DMatrix;
use proptest::prelude::*;
use velora_core::compression::{
    compress, group, init_random, project, reconstruct, ungroup, InitStrategy,
};
use velora_core::compression::initialise;
use velora_core::Tensor;

const DEPTHS: [usize; 5] = [1, 4, 6, 8, 12];

/// `(B, N, D, M, data)` with `M | D`.
fn activation() -> impl Strategy<Value = (usize, usize, usize, usize, Vec<f64>)> {
    (1usize..4, 1usize..5, prop::sample::select(DEPTHS.to_vec()))
        .prop_flat_map(|(b, n, d)| {
            let ms: Vec<usize> = (1..=d).filter(|m| d % m == 0).collect();
            (
                Just(b),
                Just(n),
                Just(d),
                prop::sample::select(ms),
                prop::collection::vec(-10.0f64..10.0, b * n * d),
            )
        })
}

fn grouped(b: usize, n: usize, d: usize, m: usize, data: Vec<f64>) -> Tensor {
    group(Tensor::new(vec![b, n, d], data).unwrap(), m).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn projection_is_idempotent((b, n, d, m, data) in activation(), seed in any::<u64>()) {
        let pv = init_random("l", m, seed).unwrap();
        let z = grouped(b, n, d, m, data);
        let once = project(&z, &pv).unwrap();
        let twice = project(&once, &pv).unwrap();
        let scale = 1.0 + once.data().iter().fold(0.0f64, |a, x| a.max(x.abs()));
        prop_assert!(max_abs_diff(&once, &twice) <= 1e-12 * scale);
    }

    #[test]
    fn projection_is_linear(
        (b, n, d, m, x) in activation(),
        seed in any::<u64>(),
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
        shift in any::<u64>(),
    ) {
        let pv = init_random("l", m, seed).unwrap();
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v.sin() * 7.0 + ((shift ^ i as u64) % 13) as f64 - 6.0).collect();
        let zx = grouped(b, n, d, m, x);
        let zy = grouped(b, n, d, m, y);
        let combo = zx.scale(alpha).add(&zy.scale(beta)).unwrap();
        let lhs = project(&combo, &pv).unwrap();
        let rhs = project(&zx, &pv).unwrap().scale(alpha).add(&project(&zy, &pv).unwrap().scale(beta)).unwrap();
        let scale = 1.0 + combo.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        prop_assert!(max_abs_diff(&lhs, &rhs) <= 1e-12 * scale);
    }

    #[test]
    fn projection_is_non_expansive((b, n, d, m, data) in activation(), seed in any::<u64>()) {
        let pv = init_random("l", m, seed).unwrap();
        let z = grouped(b, n, d, m, data);
        let p = project(&z, &pv).unwrap();
        for (orig, proj) in z.data().chunks(m).zip(p.data().chunks(m)) {
            let no: f64 = orig.iter().map(|x| x * x).sum::<f64>().sqrt();
            let np: f64 = proj.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(np <= no * (1.0 + 1e-12) + 1e-15);
        }
    }

    #[test]
    fn projected_subtokens_have_rank_at_most_one((b, n, d, m, data) in activation(), seed in any::<u64>()) {
        let pv = init_random("l", m, seed).unwrap();
        let z = grouped(b, n, d, m, data);
        let p = project(&z, &pv).unwrap();
        let rows = p.numel() / m;
        let s = DMatrix::from_row_slice(rows, m, p.data()).singular_values();
        let mut sv: Vec<f64> = s.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        if sv.len() > 1 {
            prop_assert!(sv[1] <= 1e-10 * sv[0].max(1.0));
        }
    }

    #[test]
    fn group_roundtrip_and_storage((b, n, d, m, data) in activation(), seed in any::<u64>()) {
        let x = Tensor::new(vec![b, n, d], data).unwrap();
        let g = group(x.clone(), m).unwrap();
        prop_assert_eq!(g.shape(), &[b, n * d / m, m][..]);
        prop_assert_eq!(ungroup(g.clone(), [b, n, d]).unwrap(), x);
        let pv = init_random("l", m, seed).unwrap();
        let ca = compress(&g, &pv).unwrap();
        prop_assert_eq!(ca.stored_scalars(), b * n * d / m);
        prop_assert_eq!(reconstruct(&ca, &pv).unwrap(), project(&g, &pv).unwrap());
    }

    #[test]
    fn every_strategy_yields_unit_v((b, n, d, m, data) in activation(), seed in any::<u64>(), which in 0usize..4) {
        let strategy = InitStrategy::ALL[which];
        let batch = Tensor::new(vec![b * n * d / m, m], data).unwrap();
        let pv = initialise("l", strategy, &batch, 0.9, 100, seed).unwrap();
        let norm: f64 = pv.v().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-6);
    }
}
