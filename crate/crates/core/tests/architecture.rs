use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vnet_core::losses::DiceReduction;
use vnet_core::model::{receptive_fields, NetworkConfig, VNetModel};
use vnet_core::ops;
use vnet_core::tape::{Eager, Tape};
use vnet_core::Tensor5;

fn toy(input: [usize; 3]) -> NetworkConfig {
    NetworkConfig {
        input,
        in_channels: 1,
        base_channels: 4,
        kernel: 5,
        convs_down: vec![1, 2, 3],
        convs_up: vec![2, 1],
    }
}

fn random_input(shape: [usize; 5], seed: u64) -> Tensor5 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor5::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn receptive_field_table() {
    let rf = receptive_fields(&NetworkConfig::default());
    let expect = [
        ("L-Stage 1", 5),
        ("L-Stage 2", 22),
        ("L-Stage 3", 72),
        ("L-Stage 4", 172),
        ("L-Stage 5", 372),
        ("R-Stage 4", 476),
        ("R-Stage 3", 528),
        ("R-Stage 2", 546),
        ("R-Stage 1", 551),
        ("Output", 551),
    ];
    for (layer, value) in expect {
        assert_eq!(rf.get(layer), Some(value), "{layer}");
    }
    let values: Vec<usize> = rf.rows.iter().map(|r| r.receptive_field).collect();
    assert!(values.windows(2).all(|w| w[0] <= w[1]));
    let bottom = rf.get("L-Stage 5").unwrap();
    assert!(bottom > *NetworkConfig::default().input.iter().max().unwrap());
}

#[test]
fn three_cubed_kernels_give_a_different_table() {
    let cfg = NetworkConfig {
        kernel: 3,
        ..NetworkConfig::default()
    };
    let rf = receptive_fields(&cfg);
    assert_eq!(rf.get("L-Stage 1"), Some(3));
    assert_ne!(rf.get("Output"), Some(551));
}

#[test]
fn table_text_has_every_row() {
    let text = receptive_fields(&NetworkConfig::default()).to_table();
    assert_eq!(text.lines().count(), 6);
    for v in [
        "5x5x5",
        "22x22x22",
        "372x372x372",
        "476x476x476",
        "551x551x551",
    ] {
        assert!(text.contains(v), "{v}");
    }
    assert!(text.lines().nth(1).unwrap().starts_with("L-Stage 1"));
}

#[test]
fn default_network_shapes() {
    let cfg = NetworkConfig::default();
    cfg.validate_buildable().unwrap();
    assert_eq!(cfg.output_shape(1), [1, 2, 64, 128, 128]);
    let widths: Vec<usize> = cfg.encoder().iter().map(|s| s.channels).collect();
    assert_eq!(widths, vec![16, 32, 64, 128, 256]);
    let model = VNetModel::build(cfg, 0).unwrap();
    for level in 1..5 {
        let id = model.params().find(&format!("down{level}.weight")).unwrap();
        let [cout, cin, ..] = model.params().get(id).shape();
        assert_eq!(cout, 2 * cin);
    }
}

#[test]
#[ignore = "full-size forward pass, several minutes on one core"]
fn default_network_forward() {
    let model = VNetModel::build(NetworkConfig::default(), 0).unwrap();
    let x = random_input([1, 1, 64, 128, 128], 1);
    assert_eq!(model.predict(&x).unwrap().shape(), [1, 2, 64, 128, 128]);
}

#[test]
fn toy_forward_backward_reaches_every_block() {
    let model = VNetModel::build(toy([16, 16, 16]), 7).unwrap();
    let x = random_input([1, 1, 16, 16, 16], 2);
    let labels: Vec<u8> = (0..4096).map(|i| (i % 7 == 0) as u8).collect();
    let mut tape = Tape::new(model.params());
    let xv = tape.input(x);
    let trace = model.forward(&mut tape, xv).unwrap();
    assert_eq!(tape.value(trace.logits).shape(), [1, 2, 16, 16, 16]);
    let p = tape.softmax(trace.logits).unwrap();
    let (loss, _) = tape
        .dice_loss(p, &labels, DiceReduction::MeanPerVolume)
        .unwrap();
    tape.backward(loss).unwrap();
    let grads = tape.into_param_grads();
    for (id, param) in model.params().iter() {
        let g = grads.get(id).expect(&param.name);
        assert!(
            g.iter().any(|&v| v != 0.0),
            "{} has an all-zero gradient",
            param.name
        );
    }
}

#[test]
fn same_seed_same_parameters() {
    let a = VNetModel::build(toy([8, 8, 8]), 11).unwrap();
    let b = VNetModel::build(toy([8, 8, 8]), 11).unwrap();
    let c = VNetModel::build(toy([8, 8, 8]), 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.parameter_count() > 0);
}

#[test]
fn duplicate_batch_entries_give_duplicate_outputs() {
    let model = VNetModel::build(toy([8, 8, 8]), 1).unwrap();
    let one = random_input([1, 1, 8, 8, 8], 3);
    let mut data = one.data().to_vec();
    data.extend_from_slice(one.data());
    let two = Tensor5::from_vec([2, 1, 8, 8, 8], data).unwrap();
    let p = model.predict(&two).unwrap();
    assert_eq!(p.item(0), p.item(1));
    assert_eq!(p.item(0), model.predict(&one).unwrap().item(0));
}

#[test]
fn zeroed_stage_convolutions_leave_the_shortcut() {
    let mut model = VNetModel::build(toy([8, 8, 8]), 5).unwrap();
    let ids: Vec<_> = model
        .params()
        .iter()
        .filter(|(_, p)| {
            (p.name.starts_with("enc") || p.name.starts_with("dec"))
                && (p.name.ends_with(".weight") || p.name.ends_with(".bias"))
        })
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        model.params_mut().get_mut(id).data_mut().fill(0.0);
    }
    let x = random_input([1, 1, 8, 8, 8], 4);
    let mut g = Eager::new(model.params());
    let trace = model.forward(&mut g, x.clone()).unwrap();
    assert_eq!(trace.encoder[0], ops::tile_channels(&x, 4).unwrap());
    // deeper encoder stages pass their (down-sampled) input through
    let mut g2 = Eager::new(model.params());
    let d1 = model.params().find("down1.weight").unwrap();
    let b1 = model.params().find("down1.bias").unwrap();
    let s1 = model.params().find("down1.prelu").unwrap();
    use vnet_core::tape::Graph;
    let down = g2
        .conv(&trace.encoder[0], d1, b1, vnet_core::model::RESAMPLE)
        .unwrap();
    let down = g2.prelu(&down, s1).unwrap();
    assert_eq!(trace.encoder[1], down);
}

#[test]
fn wrong_input_shape_is_rejected() {
    let model = VNetModel::build(toy([8, 8, 8]), 1).unwrap();
    assert_eq!(
        model
            .predict(&Tensor5::zeros([1, 1, 8, 8, 16]))
            .unwrap_err()
            .kind(),
        "shape"
    );
    assert!(model.predict(&Tensor5::zeros([1, 2, 8, 8, 8])).is_err());
    let mut cfg = toy([10, 8, 8]);
    assert!(VNetModel::build(cfg.clone(), 0).is_err());
    cfg.input = [8, 8, 8];
    cfg.kernel = 4;
    assert!(VNetModel::build(cfg, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn output_matches_input_extent(
        stages in 1usize..4,
        convs in prop::collection::vec(1usize..4, 5),
        mult in prop::array::uniform3(1usize..3),
        seed in any::<u64>(),
    ) {
        let unit = 1 << (stages - 1);
        let input = mult.map(|m| m * unit * 2);
        let cfg = NetworkConfig {
            input,
            in_channels: 1,
            base_channels: 2,
            kernel: 3,
            convs_down: convs[..stages].to_vec(),
            convs_up: convs[..stages - 1].to_vec(),
        };
        let model = VNetModel::build(cfg.clone(), seed).unwrap();
        let x = random_input([1, 1, input[0], input[1], input[2]], seed);
        let p = model.predict(&x).unwrap();
        prop_assert_eq!(p.shape(), cfg.output_shape(1));
        let rf = receptive_fields(&cfg);
        prop_assert_eq!(rf.rows.len(), 2 * stages);
    }
}
