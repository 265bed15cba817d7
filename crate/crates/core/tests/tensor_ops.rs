use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vnet_core::conv::{
    channel_sums, conv3d, conv3d_transpose, conv3d_weight_grad, ConvGeometry, ConvPath,
};
use vnet_core::losses::{ClassWeights, DiceReduction};
use vnet_core::ops;
use vnet_core::tape::{Graph, ParamId, ParamStore, Tape, Var};
use vnet_core::Tensor5;

fn random(shape: [usize; 5], rng: &mut ChaCha8Rng) -> Tensor5 {
    let n = shape.iter().product();
    Tensor5::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn ones(shape: [usize; 5]) -> Tensor5 {
    Tensor5::full(shape, 1.0)
}

#[test]
fn all_ones_kernel_counts_neighbours() {
    let g = ConvGeometry::new(3, 1, 1);
    let y = conv3d(
        &ones([1, 1, 3, 3, 3]),
        &ones([1, 1, 3, 3, 3]),
        &[0.0],
        g,
        ConvPath::Gemm,
    )
    .unwrap();
    assert_eq!(y.at(0, 0, 1, 1, 1), 27.0);
    assert_eq!(y.at(0, 0, 0, 0, 0), 8.0);
    assert_eq!(y.at(0, 0, 2, 0, 2), 8.0);
}

#[test]
fn stride_two_halves_and_sums_blocks() {
    let g = ConvGeometry::new(2, 2, 0);
    let y = conv3d(
        &ones([1, 1, 4, 4, 4]),
        &ones([1, 1, 2, 2, 2]),
        &[0.0],
        g,
        ConvPath::Gemm,
    )
    .unwrap();
    assert_eq!(y.shape(), [1, 1, 2, 2, 2]);
    assert!(y.data().iter().all(|&v| v == 8.0));
    // doubling channels
    let y = conv3d(
        &ones([1, 3, 4, 4, 4]),
        &ones([6, 3, 2, 2, 2]),
        &[0.0; 6],
        g,
        ConvPath::Gemm,
    )
    .unwrap();
    assert_eq!(y.shape(), [1, 6, 2, 2, 2]);
}

#[test]
fn transposed_stride_two_doubles() {
    let g = ConvGeometry::new(2, 2, 0);
    let y = conv3d_transpose(
        &ones([1, 2, 2, 2, 2]),
        &ones([2, 1, 2, 2, 2]),
        &[0.5],
        g,
        None,
        ConvPath::Gemm,
    )
    .unwrap();
    assert_eq!(y.shape(), [1, 1, 4, 4, 4]);
    assert!(y.data().iter().all(|&v| v == 2.5));
}

#[test]
fn non_finite_input_is_rejected() {
    let mut x = ones([1, 1, 3, 3, 3]);
    x.data_mut()[4] = f64::NAN;
    let e = conv3d(
        &x,
        &ones([1, 1, 3, 3, 3]),
        &[0.0],
        ConvGeometry::new(3, 1, 1),
        ConvPath::Gemm,
    )
    .unwrap_err();
    assert_eq!(e.kind(), "non_finite");
    assert!(Tensor5::from_vec([1, 1, 2, 2, 2], vec![0.0; 7]).is_err());
    assert!(Tensor5::from_vec([1, 0, 2, 2, 2], vec![]).is_err());
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random([3, 4, 8, 8, 8], &mut rng);
    let w = random([5, 4, 5, 5, 5], &mut rng);
    let g = ConvGeometry::new(5, 1, 2);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                let y = conv3d(&x, &w, &[0.1; 5], g, ConvPath::Gemm).unwrap();
                let gw = conv3d_weight_grad(&x, &y, g, ConvPath::Gemm).unwrap();
                (y, gw)
            })
    };
    let (y1, g1) = run(1);
    let (y4, g4) = run(4);
    assert_eq!(y1.data(), y4.data());
    assert_eq!(g1.data(), g4.data());
}

/// Central-difference check of every parameter and of the input.
fn check_graph(
    params: &mut ParamStore,
    x: Tensor5,
    build: impl Fn(&mut Tape, Var) -> Var,
    tol: f64,
) {
    let h = 1e-6;
    let loss_of = |params: &ParamStore, x: &Tensor5| {
        let mut t = Tape::new(params);
        let v = t.input(x.clone());
        let out = build(&mut t, v);
        t.value(out).data()[0]
    };
    let mut t = Tape::new(params);
    let xv = t.input(x.clone().with_requires_grad(true));
    let out = build(&mut t, xv);
    t.backward(out).unwrap();
    let gx = t.grad(xv).unwrap().to_vec();
    let grads = t.into_param_grads();

    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-7);
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (loss_of(params, &xp) - loss_of(params, &xm)) / (2.0 * h);
        assert!(rel(gx[i], fd) < tol, "input {i}: {} vs {fd}", gx[i]);
    }
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let g = grads
            .get(id)
            .expect("gradient for every parameter")
            .to_vec();
        for i in 0..g.len() {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + h;
            let lp = loss_of(params, &x);
            params.get_mut(id).data_mut()[i] = orig - h;
            let lm = loss_of(params, &x);
            params.get_mut(id).data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                rel(g[i], fd) < tol,
                "{}[{i}]: {} vs {fd}",
                params.name(id),
                g[i]
            );
        }
    }
}

/// `sum(y * r)` for a fixed random `r`, turning any node into a scalar.
fn project(t: &mut Tape, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random(t.value(y).shape(), &mut rng);
    let r = t.input(r);
    let p = t.mul(y, r).unwrap();
    t.sum(p).unwrap()
}

#[test]
fn conv_and_prelu_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = ParamStore::new();
    let w = params.add("w", random([3, 2, 3, 3, 3], &mut rng));
    let b = params.add("b", random([1, 3, 1, 1, 1], &mut rng));
    let s = params.add(
        "s",
        Tensor5::from_vec([1, 3, 1, 1, 1], vec![0.25, -0.1, 0.6]).unwrap(),
    );
    let x = random([2, 2, 4, 3, 5], &mut rng);
    check_graph(
        &mut params,
        x,
        |t, x| {
            let y = t.conv(&x, w, b, ConvGeometry::new(3, 1, 1)).unwrap();
            let y = t.prelu(&y, s).unwrap();
            project(t, y, 9)
        },
        1e-6,
    );
}

#[test]
fn down_and_up_conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = ParamStore::new();
    let wd = params.add("wd", random([4, 2, 2, 2, 2], &mut rng));
    let bd = params.add("bd", random([1, 4, 1, 1, 1], &mut rng));
    let wu = params.add("wu", random([4, 2, 2, 2, 2], &mut rng));
    let bu = params.add("bu", random([1, 2, 1, 1, 1], &mut rng));
    let x = random([1, 2, 4, 4, 2], &mut rng);
    let g = ConvGeometry::new(2, 2, 0);
    check_graph(
        &mut params,
        x,
        |t, x| {
            let d = t.conv(&x, wd, bd, g).unwrap();
            let u = t.up_conv(&d, wu, bu, g).unwrap();
            let c = t.concat(&u, &x).unwrap();
            let y = t.add(&c, &c).unwrap();
            project(t, y, 3)
        },
        1e-6,
    );
}

#[test]
fn tile_softmax_and_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = ParamStore::new();
    let w = params.add("w", random([2, 2, 1, 1, 1], &mut rng));
    let b = params.add("b", random([1, 2, 1, 1, 1], &mut rng));
    let x = random([2, 1, 3, 2, 2], &mut rng);
    let labels: Vec<u8> = (0..24).map(|i| (i % 3 == 0) as u8).collect();
    for reduction in [DiceReduction::MeanPerVolume, DiceReduction::Pooled] {
        let labels = labels.clone();
        check_graph(
            &mut params,
            x.clone(),
            move |t, x| {
                let x2 = t.tile_channels(&x, 2).unwrap();
                let z = t.conv(&x2, w, b, ConvGeometry::new(1, 1, 0)).unwrap();
                let p = t.softmax(z).unwrap();
                t.dice_loss(p, &labels, reduction).unwrap().0
            },
            1e-6,
        );
    }
    let weights = ClassWeights::inverse_frequency(&labels);
    check_graph(
        &mut params,
        x,
        move |t, x| {
            let x2 = t.tile_channels(&x, 2).unwrap();
            let z = t.conv(&x2, w, b, ConvGeometry::new(1, 1, 0)).unwrap();
            t.weighted_logistic(z, &labels, weights).unwrap()
        },
        1e-6,
    );
}

#[test]
fn prelu_examples() {
    let x = Tensor5::from_vec([1, 2, 1, 1, 2], vec![2.0, -2.0, -1.0, 0.0]).unwrap();
    let y = ops::prelu(&x, &[0.25, 0.5]).unwrap();
    assert_eq!(y.data(), &[2.0, -0.5, -0.5, 0.0]);
    let gy = Tensor5::full([1, 2, 1, 1, 2], 1.0);
    let (gx, gs) = ops::prelu_backward(&x, &[0.25, 0.5], &gy);
    assert_eq!(gx.data(), &[1.0, 0.25, 0.5, 0.5]);
    assert_eq!(gs, vec![-2.0, -1.0]);
}

#[test]
fn backward_needs_a_scalar_root() {
    let params = ParamStore::new();
    let mut t = Tape::new(&params);
    let x = t.input(ones([1, 1, 2, 2, 2]));
    assert_eq!(t.backward(x).unwrap_err().kind(), "tape");
}

fn geometry() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..4, 1usize..3).prop_flat_map(|(k, s)| (Just(k), Just(s), 0..k))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shape_law_and_paths_agree(
        (k, s, pad) in geometry(),
        dims in prop::array::uniform3(3usize..7),
        cin in 1usize..3,
        cout in 1usize..3,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random([2, cin, dims[0], dims[1], dims[2]], &mut rng);
        let w = random([cout, cin, k, k, k], &mut rng);
        let g = ConvGeometry::new(k, s, pad);
        let fast = conv3d(&x, &w, &vec![0.3; cout], g, ConvPath::Gemm).unwrap();
        let slow = conv3d(&x, &w, &vec![0.3; cout], g, ConvPath::Direct).unwrap();
        for a in 0..3 {
            prop_assert_eq!(fast.spatial()[a], (dims[a] + 2 * pad - k) / s + 1);
        }
        for (a, b) in fast.data().iter().zip(slow.data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        let gw_fast = conv3d_weight_grad(&x, &fast, g, ConvPath::Gemm).unwrap();
        let gw_slow = conv3d_weight_grad(&x, &fast, g, ConvPath::Direct).unwrap();
        for (a, b) in gw_fast.data().iter().zip(gw_slow.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        prop_assert_eq!(channel_sums(&fast).len(), cout);
    }

    #[test]
    fn transpose_is_the_adjoint(
        (k, s, pad) in geometry(),
        dims in prop::array::uniform3(3usize..7),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random([1, 2, dims[0], dims[1], dims[2]], &mut rng);
        let w = random([3, 2, k, k, k], &mut rng);
        let g = ConvGeometry::new(k, s, pad);
        let y = conv3d(&x, &w, &[0.0; 3], g, ConvPath::Direct).unwrap();
        let r = random(y.shape(), &mut rng);
        for path in [ConvPath::Direct, ConvPath::Gemm] {
            let back = conv3d_transpose(&r, &w, &[0.0; 2], g, Some(x.spatial()), path).unwrap();
            let lhs = y.dot(&r);
            let rhs = x.dot(&back);
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), scale in 0.1f64..500.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = random([2, 2, 2, 3, 2], &mut rng);
        z.data_mut().iter_mut().for_each(|v| *v *= scale);
        let p = ops::softmax2(&z).unwrap();
        for n in 0..2 {
            for (a, b) in p.channel(n, 0).iter().zip(p.channel(n, 1)) {
                prop_assert!((a + b - 1.0).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(a));
            }
        }
    }
}
