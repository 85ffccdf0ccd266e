use cfmd_core::io::image::{decode_image, encode_image};
use cfmd_core::io::npy::{decode_npy, encode_npy};
use cfmd_core::ssm::{self, SsmStaticParams};
use cfmd_core::{nn, Rng, Tape, Tensor};
use proptest::prelude::*;

fn dims(max: usize) -> impl Strategy<Value = [usize; 4]> {
    (1..=2usize, 1..=3usize, 1..=max, 1..=max).prop_map(|(n, c, h, w)| [n, c, h, w])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn blocked_scan_matches_sequential(seed in any::<u64>(), l in 1..96usize, d in 1..6usize, s in 1..5usize, block in 1..40usize) {
        let mut rng = Rng::new(seed);
        let u = Tensor::<f64>::normal([1, 1, l, d], 0.0, 1.0, &mut rng).unwrap();
        let p = SsmStaticParams::random(d, s, &mut rng).unwrap();
        let sp = ssm::discretize(&u, &p).unwrap();
        let seq = ssm::scan_sequential(&sp, &p.d_skip, &u).unwrap();
        let blocked = ssm::scan_blocked(&sp, &p.d_skip, &u, block).unwrap();
        prop_assert!(blocked.max_abs_diff(&seq).unwrap() < 1e-10);
    }

    #[test]
    fn npy_round_trip_is_bit_exact(seed in any::<u64>(), d in dims(6), rank in 1..=4usize) {
        let t = Tensor::<f64>::normal(d, 0.0, 1e6, &mut Rng::new(seed)).unwrap();
        let mut shape = d[4 - rank..].to_vec();
        shape[0] *= d[..4 - rank].iter().product::<usize>();
        let array = decode_npy(&encode_npy(&t, &shape).unwrap()).unwrap();
        prop_assert_eq!(&array.shape, &shape);
        let back = array.into_tensor::<f64>().unwrap();
        prop_assert!(back.reshape(d).unwrap().bitwise_eq(&t));
        let t32 = t.cast::<f32>();
        let back32 = decode_npy(&encode_npy(&t32, &shape).unwrap()).unwrap().into_tensor::<f32>().unwrap();
        prop_assert!(back32.reshape(d).unwrap().bitwise_eq(&t32));
    }

    #[test]
    fn image_encoding_is_a_fixpoint_after_one_pass(seed in any::<u64>(), gray in any::<bool>(), h in 1..12usize, w in 1..12usize) {
        let c = if gray { 1 } else { 3 };
        let img = Tensor::<f64>::uniform([1, c, h, w], -0.2, 1.2, &mut Rng::new(seed)).unwrap();
        let once = decode_image::<f64>(&encode_image(&img).unwrap()).unwrap();
        let twice = decode_image::<f64>(&encode_image(&once).unwrap()).unwrap();
        prop_assert!(once.bitwise_eq(&twice));
        let clamped = img.map(|v| v.clamp(0.0, 1.0));
        prop_assert!(once.max_abs_diff(&clamped).unwrap() <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn broadcast_add_equals_tiling_and_reduces_gradients(seed in any::<u64>(), d in dims(5), mask in 0..16u8) {
        let mut rng = Rng::new(seed);
        let small_dims: [usize; 4] = std::array::from_fn(|i| if mask & (1 << i) != 0 { 1 } else { d[i] });
        let a = Tensor::<f64>::normal(d, 0.0, 1.0, &mut rng).unwrap();
        let b = Tensor::<f64>::normal(small_dims, 0.0, 1.0, &mut rng).unwrap();
        let tape = Tape::new();
        let (va, vb) = (tape.param(a.clone()), tape.param(b.clone()));
        let y = va.add(vb).unwrap();
        let tiled = Tensor::from_fn(d, |i| a.at(i) + b.at(std::array::from_fn(|k| if small_dims[k] == 1 { 0 } else { i[k] }))).unwrap();
        prop_assert!(y.value().bitwise_eq(&tiled));
        let grads = tape.backward(y.sum()).unwrap();
        let copies = (a.len() / b.len()) as f64;
        prop_assert!(grads.get(vb).unwrap().data().iter().all(|&g| g == copies));
    }

    #[test]
    fn pixel_shuffle_inverts_unshuffle(seed in any::<u64>(), d in dims(3), s in 1..4usize) {
        let [n, c, h, w] = d;
        let x = Tensor::<f64>::normal([n, c, h * s, w * s], 0.0, 1.0, &mut Rng::new(seed)).unwrap();
        let down = nn::pixel_unshuffle(&x, s).unwrap();
        prop_assert_eq!(down.dims(), [n, c * s * s, h, w]);
        prop_assert!(nn::pixel_shuffle(&down, s).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn identity_grid_reproduces_input(seed in any::<u64>(), d in dims(9)) {
        let x = Tensor::<f64>::normal(d, 0.0, 1.0, &mut Rng::new(seed)).unwrap();
        let grid = nn::upsample_grid::<f64>(d[2], d[3], 1).unwrap();
        prop_assert!(nn::grid_sample_bilinear(&x, &grid).unwrap().max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn pooling_divisible_windows_preserves_mean(seed in any::<u64>(), d in dims(4), k in 1..4usize) {
        let [n, c, h, w] = d;
        let x = Tensor::<f64>::normal([n, c, h * k, w * k], 0.0, 1.0, &mut Rng::new(seed)).unwrap();
        let pooled = nn::adaptive_avg_pool(&x, (h, w)).unwrap();
        prop_assert!((pooled.mean() - x.mean()).abs() < 1e-12);
    }
}
