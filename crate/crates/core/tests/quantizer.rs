use cushion_core::quant::{
    conditional_quant_error, fake_quant, fake_quant_masked, quant_error, resolve_params, smooth_migrate, Granularity,
    QuantSpec, RangeMode, Symmetry, TapStats,
};
use cushion_core::taps::TapRecord;
use cushion_core::tensor::matmul;
use cushion_core::Tensor;
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    (prop::collection::vec(-1.0f32..1.0, rows * cols), -2.0f32..2.0).prop_map(move |(v, exp)| {
        let scale = 10f32.powf(exp);
        Tensor::new(&[rows, cols], v.into_iter().map(|x| x * scale).collect()).unwrap()
    })
}

fn matrix() -> impl Strategy<Value = Tensor> {
    (1usize..6, prop::sample::select(vec![2usize, 4, 6, 8, 12])).prop_flat_map(|(r, c)| tensor(r, c))
}

fn spec() -> impl Strategy<Value = QuantSpec> {
    (
        2u32..=8,
        prop::bool::ANY,
        prop::sample::select(vec![Granularity::PerTensor, Granularity::PerToken, Granularity::PerChannelGroup]),
        prop::sample::select(vec![1usize, 2, 128]),
    )
        .prop_map(|(bits, sym, gran, group)| {
            let sym = if sym { Symmetry::Symmetric } else { Symmetry::Asymmetric };
            QuantSpec::new(bits, sym, gran, RangeMode::Dynamic).with_group_size(group)
        })
}

fn unit_scale(spec: &QuantSpec, scales: &[f32], i: usize, cols: usize) -> f64 {
    let g = spec.group_size.min(cols);
    let u = match spec.granularity {
        Granularity::PerTensor => 0,
        Granularity::PerToken => i / cols,
        Granularity::PerChannelGroup => (i / cols) * (cols / g) + (i % cols) / g,
    };
    scales[u] as f64
}

fn taps(x: &Tensor) -> TapRecord {
    TapRecord {
        activations: vec![("layers.0.attn_in".into(), x.clone())],
        ..TapRecord::default()
    }
}

proptest! {
    #[test]
    fn fake_quant_is_idempotent(x in matrix(), spec in spec()) {
        let p = resolve_params(&x, &spec, None).unwrap();
        let q = fake_quant(&x, &p);
        prop_assert_eq!(fake_quant(&q, &p), q);
    }

    #[test]
    fn in_range_error_is_at_most_half_a_step(x in matrix(), spec in spec()) {
        let p = resolve_params(&x, &spec, None).unwrap();
        let (q, inside) = fake_quant_masked(&x, &p);
        let cols = x.dims2().1;
        for (i, (&a, &b)) in x.data().iter().zip(q.data()).enumerate() {
            prop_assert!(inside[i]);
            let s = unit_scale(&spec, &p.scale, i, cols);
            let err = (a as f64 - b as f64).abs();
            prop_assert!(err <= s / 2.0 + 1e-7 + f32::EPSILON as f64 * a.abs() as f64, "{} > {}", err, s / 2.0);
        }
    }

    #[test]
    fn grid_points_are_fixed(x in matrix(), spec in spec(), k in prop::collection::vec(0.0f64..1.0, 64)) {
        let p = resolve_params(&x, &spec, None).unwrap();
        let (lo, hi) = p.grid();
        let cols = x.dims2().1;
        let g = spec.group_size.min(cols);
        let grid = Tensor::from_fn(x.shape(), |i| {
            let u = match spec.granularity {
                Granularity::PerTensor => 0,
                Granularity::PerToken => i / cols,
                Granularity::PerChannelGroup => (i / cols) * (cols / g) + (i % cols) / g,
            };
            let level = (lo + (k[i % k.len()] * (hi - lo)).floor()).min(hi);
            (p.scale[u] as f64 * level + p.zero[u] as f64) as f32
        });
        prop_assert_eq!(fake_quant(&grid, &p), grid);
    }

    #[test]
    fn per_token_equals_per_tensor_row_by_row(x in matrix(), bits in 2u32..=8, sym in prop::bool::ANY) {
        let sym = if sym { Symmetry::Symmetric } else { Symmetry::Asymmetric };
        let tok = QuantSpec::new(bits, sym, Granularity::PerToken, RangeMode::Dynamic);
        let whole = QuantSpec::new(bits, sym, Granularity::PerTensor, RangeMode::Dynamic);
        let p = resolve_params(&x, &tok, None).unwrap();
        let q = fake_quant(&x, &p);
        for r in 0..x.dims2().0 {
            let row = x.slice_rows(r, r + 1).unwrap();
            let pr = resolve_params(&row, &whole, None).unwrap();
            prop_assert_eq!((pr.scale[0], pr.zero[0]), (p.scale[r], p.zero[r]));
            prop_assert_eq!(fake_quant(&row, &pr), q.slice_rows(r, r + 1).unwrap());
        }
    }

    #[test]
    fn static_ranges_bound_in_grid_elements(x in matrix(), bits in 2u32..=8, lo in -3.0f32..0.0, hi in 0.1f32..3.0) {
        let spec = QuantSpec::per_tensor_static(bits);
        let stats = TapStats::from_tensor(&Tensor::new(&[1, 2], vec![lo, hi]).unwrap());
        let p = resolve_params(&x, &spec, Some(&stats)).unwrap();
        let (q, inside) = fake_quant_masked(&x, &p);
        let s = p.scale[0] as f64;
        for ((&a, &b), &ok) in x.data().iter().zip(q.data()).zip(&inside) {
            if ok {
                prop_assert!((a as f64 - b as f64).abs() <= s / 2.0 + 1e-7 + f32::EPSILON as f64 * a.abs() as f64);
            } else {
                prop_assert!(b >= lo - 1e-5 * lo.abs().max(1.0) && b <= hi + 1e-5 * hi.abs().max(1.0));
            }
        }
        prop_assert_eq!(fake_quant(&q, &p), q);
    }

    #[test]
    fn quant_error_is_non_negative_and_conditional_matches_plain(x in matrix(), spec in spec()) {
        let t = taps(&x);
        let plain = quant_error(&t, &spec, None).unwrap();
        prop_assert!(plain.total >= 0.0);
        let cond = conditional_quant_error(&t, &spec, None).unwrap();
        prop_assert_eq!(plain.total.to_bits(), cond.total.to_bits());
    }

    #[test]
    fn smoothing_preserves_matmul(
        (x, w) in (1usize..5, 1usize..9, 1usize..6).prop_flat_map(|(n, d, o)| (tensor(n, d), tensor(d, o))),
        alpha in 0.0f32..=1.0,
    ) {
        let (n, d) = x.dims2();
        let act: Vec<f32> = (0..d).map(|c| (0..n).map(|r| x.row(r)[c].abs()).fold(0.0, f32::max)).collect();
        let (ws, div) = smooth_migrate(&w, &act, alpha).unwrap();
        let xd = Tensor::from_fn(&[n, d], |i| x.data()[i] / div.data()[i % d]);
        let want = matmul(&x, &w).unwrap();
        let got = matmul(&xd, &ws).unwrap();
        let num: f64 = want.data().iter().zip(got.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
        let den: f64 = want.data().iter().map(|a| (*a as f64).powi(2)).sum();
        prop_assume!(den > 1e-12);
        prop_assert!((num / den).sqrt() < 1e-4, "relative error {}", (num / den).sqrt());
    }
}
