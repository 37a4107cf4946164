mod common;

use candle_core::{DType, Device, Tensor};
use common::*;
use dae_core::losses::{
    bias_reduce, class_cross_entropy, lsgan_discriminator, lsgan_generator, recon_l2, shade_smooth,
    smooth_tv, total_variation, LossWeights, Reduction,
};
use dae_core::warp::{
    affine_grid, bilinear_sample, clamp_increments, compose, integrate, mean_field, AffineParams,
    DifferentialWarp, WarpField,
};

const N: usize = 2;
const S: usize = 8;

fn field(data: &[f64]) -> WarpField {
    WarpField::new(t64(data, &[N, S, S, 2])).unwrap()
}

#[test]
fn clamp_matches_elementwise_oracle() {
    let mut r = rng(1);
    let side = 64;
    let raw = uniform(&mut r, 2 * side * side, -1.0, 1.0);
    let d = clamp_increments(&t64(&raw, &[1, 2, side, side])).unwrap();
    let clamped: Vec<f64> = raw.iter().map(|v| v.clamp(0.0, 5.0 / 64.0)).collect();
    let got: Vec<f64> = flat64(&d.dx).into_iter().chain(flat64(&d.dy)).collect();
    // values are snapped to a 2^-21 lattice so prefix sums stay exact
    let lattice = 2f64.powi(21);
    let snapped: Vec<f64> = clamped
        .iter()
        .map(|v| (v * lattice).round() / lattice)
        .collect();
    assert_eq!(max_abs_diff(&got, &snapped), 0.0);
    assert!(max_abs_diff(&got, &clamped) <= 0.5 / lattice);
    assert!(got.iter().all(|v| (0.0..=5.0 / 64.0).contains(v)));
}

#[test]
fn integration_matches_prefix_sum_oracle() {
    let mut r = rng(2);
    for _ in 0..20 {
        let dx = uniform(&mut r, N * S * S, 0.0, 5.0 / S as f64);
        let dy = uniform(&mut r, N * S * S, 0.0, 5.0 / S as f64);
        let d = DifferentialWarp::new(t64(&dx, &[N, S, S]), t64(&dy, &[N, S, S])).unwrap();
        let got = flat64(&integrate(&d).unwrap().grid);
        assert!(max_abs_diff(&got, &integrate_oracle(&dx, &dy, N, S, S)) <= 1e-12);
    }
}

#[test]
fn translation_affine_matches_pointwise_oracle() {
    let theta = [1.0, 0.0, 0.2, 0.0, 1.0, 0.0];
    let a = AffineParams::new(t64(&theta, &[1, 2, 3])).unwrap();
    let got = flat64(&affine_grid(&a, 4, 4).unwrap().grid);
    assert!(max_abs_diff(&got, &compose_oracle(&theta, &identity_grid(4, 4), 1, 16)) <= 1e-12);
}

#[test]
fn composition_laws() {
    let mut r = rng(3);
    let local = uniform(&mut r, N * S * S * 2, -1.0, 1.0);
    let s0 = AffineParams::identity(N, DType::F64, &Device::Cpu).unwrap();
    let got = flat64(&compose(&s0, &field(&local)).unwrap().grid);
    assert!(max_abs_diff(&got, &local) <= 1e-15);

    let theta = uniform(&mut r, N * 6, -1.0, 1.0);
    let a = AffineParams::new(t64(&theta, &[N, 2, 3])).unwrap();
    let w0 = WarpField::identity(N, S, S, DType::F64, &Device::Cpu).unwrap();
    let lhs = flat64(&compose(&a, &w0).unwrap().grid);
    let rhs = flat64(&affine_grid(&a, S, S).unwrap().grid);
    assert_eq!(lhs, rhs);

    for _ in 0..20 {
        let theta = uniform(&mut r, N * 6, -1.0, 1.0);
        let a = AffineParams::new(t64(&theta, &[N, 2, 3])).unwrap();
        let got = flat64(&compose(&a, &field(&local)).unwrap().grid);
        assert!(max_abs_diff(&got, &compose_oracle(&theta, &local, N, S * S)) <= 1e-12);
    }
}

#[test]
fn single_affine_broadcasts_over_the_batch() {
    let mut r = rng(4);
    let local = uniform(&mut r, N * S * S * 2, -1.0, 1.0);
    let theta = uniform(&mut r, 6, -1.0, 1.0);
    let a = AffineParams::new(t64(&theta, &[1, 2, 3])).unwrap();
    let got = flat64(&compose(&a, &field(&local)).unwrap().grid);
    let both: Vec<f64> = theta.iter().chain(&theta).copied().collect();
    assert!(max_abs_diff(&got, &compose_oracle(&both, &local, N, S * S)) <= 1e-12);
}

#[test]
fn sampler_matches_interpolation_oracle() {
    let mut r = rng(5);
    for _ in 0..20 {
        let src = uniform(&mut r, N * 3 * S * S, 0.0, 1.0);
        // a little outside the frame too, to exercise border replication
        let grid = uniform(&mut r, N * S * S * 2, -1.2, 1.2);
        let got = flat64(&bilinear_sample(&t64(&src, &[N, 3, S, S]), &field(&grid)).unwrap());
        assert!(max_abs_diff(&got, &bilinear_oracle(&src, N, 3, S, S, &grid, S, S)) <= 1e-12);
    }
}

#[test]
fn sampler_trivial_cases() {
    let mut r = rng(6);
    let src = uniform(&mut r, N * S * S, 0.0, 1.0);
    let w0 = WarpField::identity(N, S, S, DType::F64, &Device::Cpu).unwrap();
    let got = flat64(&bilinear_sample(&t64(&src, &[N, 1, S, S]), &w0).unwrap());
    assert!(max_abs_diff(&got, &src) <= 1e-12);

    let constant = vec![0.37; N * S * S];
    let grid = uniform(&mut r, N * S * S * 2, -1.0, 1.0);
    let got = flat64(&bilinear_sample(&t64(&constant, &[N, 1, S, S]), &field(&grid)).unwrap());
    assert!(got.iter().all(|v| (v - 0.37).abs() <= 1e-12));
}

#[test]
fn sampler_is_bitwise_deterministic() {
    let mut r = rng(7);
    let src = Tensor::from_vec(
        uniform(&mut r, N * S * S, 0.0, 1.0)
            .iter()
            .map(|&v| v as f32)
            .collect::<Vec<_>>(),
        (N, 1, S, S),
        &Device::Cpu,
    )
    .unwrap();
    let grid = uniform(&mut r, N * S * S * 2, -1.0, 1.0)
        .iter()
        .map(|&v| v as f32)
        .collect::<Vec<_>>();
    let f = WarpField::new(Tensor::from_vec(grid, (N, S, S, 2), &Device::Cpu).unwrap()).unwrap();
    let a = bilinear_sample(&src, &f)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f32>()
        .unwrap();
    let b = bilinear_sample(&src, &f)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f32>()
        .unwrap();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn mean_field_matches_elementwise_mean() {
    let mut r = rng(8);
    let grid = uniform(&mut r, N * S * S * 2, -1.0, 1.0);
    let got = flat64(&mean_field(&field(&grid)).unwrap().grid);
    assert!(max_abs_diff(&got, &mean_oracle(&grid, N)) <= 1e-15);
}

#[test]
fn loss_terms_match_loop_oracles() {
    let mut r = rng(9);
    let w = LossWeights::default();
    for reduction in [Reduction::Mean, Reduction::Sum] {
        let w = LossWeights {
            reduction,
            ..w.clone()
        };
        for _ in 0..10 {
            let a = uniform(&mut r, N * S * S, 0.0, 1.0);
            let b = uniform(&mut r, N * S * S, 0.0, 1.0);
            let got =
                scalar64(&recon_l2(&t64(&a, &[N, 1, S, S]), &t64(&b, &[N, 1, S, S])).unwrap());
            assert!((got - mse_oracle(&a, &b)).abs() <= 1e-12);

            let got = scalar64(&total_variation(&t64(&a, &[N, 1, S, S]), reduction).unwrap());
            assert!((got - tv_oracle(&a, N, S, S, reduction)).abs() <= 1e-12);

            let d = DifferentialWarp::new(t64(&a, &[N, S, S]), t64(&b, &[N, S, S])).unwrap();
            let got = scalar64(&smooth_tv(&d, 0.3, reduction).unwrap());
            let expect =
                0.3 * (tv_oracle(&a, N, S, S, reduction) + tv_oracle(&b, N, S, S, reduction));
            assert!((got - expect).abs() <= 1e-12);

            let got = scalar64(&shade_smooth(&t64(&a, &[N, 1, S, S]), 0.7, reduction).unwrap());
            assert!((got - 0.7 * grad_sq_oracle(&a, N, S, S, reduction)).abs() <= 1e-12);

            let theta = uniform(&mut r, N * 6, -1.0, 1.0);
            let grid = uniform(&mut r, N * S * S * 2, -1.0, 1.0);
            let aff = AffineParams::new(t64(&theta, &[N, 2, 3])).unwrap();
            let got = scalar64(&bias_reduce(&aff, &field(&grid), &w).unwrap());
            let expect = bias_oracle(
                &theta,
                &grid,
                N,
                S,
                S,
                w.bias_affine,
                w.bias_field,
                reduction,
            );
            assert!((got - expect).abs() <= 1e-12);
        }
    }
}

#[test]
fn unit_step_tv_is_hand_countable() {
    // one unit step between columns 31 and 32 on every row of a 64x64 map
    let side = 64;
    let m: Vec<f64> = (0..side * side)
        .map(|k| if k % side >= 32 { 1.0 } else { 0.0 })
        .collect();
    let zeros = vec![0.0; side * side];
    let d =
        DifferentialWarp::new(t64(&m, &[1, side, side]), t64(&zeros, &[1, side, side])).unwrap();
    let got = scalar64(&smooth_tv(&d, 1e-6, Reduction::Sum).unwrap());
    assert!((got - 1e-6 * 64.0).abs() <= 1e-15);
}

#[test]
fn linear_ramp_shading_has_closed_form_penalty() {
    // S[i, j] = 0.1 j: every horizontal difference is 0.1, vertical ones vanish
    let m: Vec<f64> = (0..S * S).map(|k| 0.1 * (k % S) as f64).collect();
    let got = scalar64(&shade_smooth(&t64(&m, &[1, 1, S, S]), 1.0, Reduction::Mean).unwrap());
    assert!((got - 0.01).abs() <= 1e-12);
}

#[test]
fn adversarial_and_class_terms_match_formulae() {
    let mut r = rng(10);
    for _ in 0..20 {
        let real = uniform(&mut r, 4 * 64, -2.0, 2.0);
        let fake = uniform(&mut r, 4 * 64, -2.0, 2.0);
        let (rt, ft) = (t64(&real, &[4, 1, 8, 8]), t64(&fake, &[4, 1, 8, 8]));
        assert!((scalar64(&lsgan_generator(&ft).unwrap()) - lsgan_g_oracle(&fake)).abs() <= 1e-12);
        assert!(
            (scalar64(&lsgan_discriminator(&rt, &ft).unwrap()) - lsgan_d_oracle(&real, &fake))
                .abs()
                <= 1e-12
        );

        let logits = uniform(&mut r, 6 * 10, -3.0, 3.0);
        let labels: Vec<u32> = (0..6)
            .map(|_| rand::Rng::random_range(&mut r, 0..10))
            .collect();
        let lt = Tensor::from_slice(&labels, 6, &Device::Cpu).unwrap();
        let got = scalar64(&class_cross_entropy(&t64(&logits, &[6, 10]), &lt).unwrap());
        assert!((got - cross_entropy_oracle(&logits, &labels, 10)).abs() <= 1e-12);
    }
}

#[test]
fn identity_pipeline_is_a_penalty_free_fixed_point() {
    let mut r = rng(11);
    let src = uniform(&mut r, N * S * S, 0.0, 1.0);
    let d = DifferentialWarp::identity(N, S, S, DType::F64, &Device::Cpu).unwrap();
    let local = integrate(&d).unwrap();
    let s0 = AffineParams::identity(N, DType::F64, &Device::Cpu).unwrap();
    let f = compose(&s0, &local).unwrap();
    let out = flat64(&bilinear_sample(&t64(&src, &[N, 1, S, S]), &f).unwrap());
    assert!(max_abs_diff(&out, &src) <= 1e-12);
    assert_eq!(
        scalar64(&smooth_tv(&d, 1e-6, Reduction::Mean).unwrap()),
        0.0
    );
    assert!(scalar64(&bias_reduce(&s0, &local, &LossWeights::default()).unwrap()) <= 1e-28);
}
