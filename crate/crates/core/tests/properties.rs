use pie_core::checkpoint::Checkpoint;
use pie_core::config::TrainConfig;
use pie_core::data::{make_synthetic_2d, SyntheticKind};
use pie_core::eval::{laplace_sharpness, quantize, read_pgm, GreyImage, SharpnessSource};
use pie_core::layers::{apply_forward, apply_inverse, CouplingLayer, DownsampleLayer, HouseholderTransform, ResidualMean};
use pie_core::model::{Architecture, PieModel};
use pie_core::optim::AdamState;
use pie_core::params::ParamStore;
use pie_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, scale: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn perturb(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += scale * rng.gen_range(-1.0..1.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn coupling_inverts(half in 1usize..8, seed in any::<u64>(), scale in 0.0..1.0f64) {
        let mut store = ParamStore::new();
        let layer = CouplingLayer::new(&mut store, "c", 2 * half, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        perturb(&mut store, seed ^ 1, scale);
        let x = random(5, 2 * half, 3.0, seed ^ 2);
        let (y, _) = apply_forward(&layer, &store, &x).unwrap();
        prop_assert!(apply_inverse(&layer, &store, &y).unwrap().max_abs_diff(&x).unwrap() < 1e-8);
        let x2 = apply_inverse(&layer, &store, &x).unwrap();
        prop_assert!(apply_forward(&layer, &store, &x2).unwrap().0.max_abs_diff(&x).unwrap() < 1e-8);
    }

    #[test]
    fn householder_is_orthogonal(dim in 1usize..12, count in 1usize..5, seed in any::<u64>()) {
        let mut store = ParamStore::new();
        let layer = HouseholderTransform::new(&mut store, "h", dim, count, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let x = random(4, dim, 2.0, seed ^ 3);
        let (y, logdet) = apply_forward(&layer, &store, &x).unwrap();
        prop_assert!(logdet.iter().all(|&l| l == 0.0));
        for i in 0..4 {
            let n = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assert!((n(x.row(i)) - n(y.row(i))).abs() < 1e-12);
        }
        prop_assert!(apply_inverse(&layer, &store, &y).unwrap().max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn downsample_permutes(c in 1usize..3, h in 1usize..4, w in 1usize..4, seed in any::<u64>()) {
        let (h, w) = (2 * h, 2 * w);
        let layer = DownsampleLayer::new(c, h, w).unwrap();
        let x = random(2 * h * w, c, 1.0, seed);
        let store = ParamStore::new();
        let (y, _) = apply_forward(&layer, &store, &x).unwrap();
        let mut a = x.data().to_vec();
        let mut b = y.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
        prop_assert_eq!(apply_inverse(&layer, &store, &y).unwrap(), x);
    }

    #[test]
    fn decoded_codes_encode_back(half in 2usize..5, keep_frac in 0.1..0.9f64, seed in any::<u64>(), mlp in any::<bool>()) {
        let d_in = 2 * half;
        let keep = ((d_in as f64 * keep_frac) as usize).clamp(1, d_in - 1);
        let arch = Architecture {
            input_shape: vec![d_in],
            conv_blocks: 0,
            dim_schedule: vec![keep],
            final_block: keep % 2 == 0,
            k_repeats: 2,
            householder_count: 2,
            residual_mean: if mlp { ResidualMean::Mlp } else { ResidualMean::Zero },
            epsilon_sq: 0.1,
        };
        let mut model = PieModel::new(arch, seed).unwrap();
        model.perturb_parameters(seed ^ 5, 0.3);
        let z = random(3, keep, 1.5, seed ^ 6);
        let x = model.decode(&z).unwrap();
        prop_assert!(model.encode(&x).unwrap().z.max_abs_diff(&z).unwrap() < 1e-8);
    }

    #[test]
    fn likelihood_is_per_sample(seed in any::<u64>()) {
        let arch = Architecture {
            input_shape: vec![6],
            conv_blocks: 0,
            dim_schedule: vec![3],
            final_block: false,
            k_repeats: 1,
            householder_count: 3,
            residual_mean: ResidualMean::Mlp,
            epsilon_sq: 0.2,
        };
        let mut model = PieModel::new(arch, seed).unwrap();
        model.perturb_parameters(seed ^ 7, 0.3);
        let x = random(4, 6, 1.0, seed ^ 8);
        let all = model.log_likelihood(&x).unwrap();
        for i in 0..4 {
            let one = model.log_likelihood(&Tensor::vector(x.row(i))).unwrap();
            prop_assert!((one[0] - all[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn sharpness_ignores_brightness(h in 3usize..9, w in 3usize..9, shift in -2.0..2.0f64, seed in any::<u64>()) {
        let img = random(h, w, 1.0, seed).reshape(&[1, h, w]).unwrap();
        let base = laplace_sharpness(std::slice::from_ref(&img), SharpnessSource::Dataset).unwrap().mean_variance;
        let moved = laplace_sharpness(&[img.map(|v| v + shift)], SharpnessSource::Dataset).unwrap().mean_variance;
        prop_assert!(base >= 0.0);
        prop_assert!((base - moved).abs() <= 1e-9 * base.max(1e-12));
    }

    #[test]
    fn checkpoint_is_bit_exact(seed in any::<u64>(), scale in prop::sample::select(vec![1e-300, 1e-8, 1.0, 1e10, 1e300])) {
        let cfg = TrainConfig::new(0.1, 1, seed, vec![1]);
        let mut model = PieModel::new(cfg.architecture(&[2]), seed).unwrap();
        for id in model.params().ids().collect::<Vec<_>>() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ id.0 as u64);
            for v in model.params_mut().get_mut(id).data_mut() {
                *v = scale * rng.gen_range(-1.0..1.0);
            }
        }
        let opt = AdamState::new(model.params());
        let ck = Checkpoint::capture(&cfg, &model, &opt, 1);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        for (a, b) in ck.params.iter().zip(&back.params) {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.data), bits(&b.data));
        }
    }

    #[test]
    fn pgm_round_trips(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = GreyImage { width: w, height: h, pixels: (0..w * h).map(|_| rng.gen()).collect() };
        prop_assert_eq!(read_pgm(&g.to_pgm()).unwrap(), g);
    }

    #[test]
    fn quantize_is_monotone(a in -1.0..2.0f64, b in -1.0..2.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(quantize(lo) <= quantize(hi));
    }

    #[test]
    fn split_partitions(n in 1usize..300, frac in 0.05..0.95f64, seed in any::<u64>()) {
        let ds = make_synthetic_2d(SyntheticKind::Ring, n, seed).unwrap().with_split(frac, seed).unwrap();
        let mut all: Vec<usize> = ds.train_indices().iter().chain(ds.test_indices()).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(!ds.train_indices().is_empty());
        if n >= 2 {
            prop_assert!(!ds.test_indices().is_empty());
        }
    }
}
