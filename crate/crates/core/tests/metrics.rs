mod common;

use common::{all_pairs_oracle, blob_mask, set_oracle};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vnet_core::dataset::{Case, Dataset};
use vnet_core::losses::dice_coefficient;
use vnet_core::metrics::{
    dice_metric, evaluate, hausdorff_mm, hausdorff_percentile_mm, score, threshold, MetricsReport,
    MetricsRow,
};
use vnet_core::model::{NetworkConfig, VNetModel};
use vnet_core::volume::{LabelVolume, Volume};

#[test]
fn worked_pairs() {
    let dims = [10, 10, 10];
    let mut a = vec![0u8; 1000];
    let mut b = vec![0u8; 1000];
    a[..100].fill(1);
    b[50..150].fill(1);
    let a = LabelVolume::new(dims, [1.0; 3], a).unwrap();
    let b = LabelVolume::new(dims, [1.0; 3], b).unwrap();
    assert_eq!(dice_metric(&a, &b).unwrap(), 0.5);
    assert_eq!(dice_metric(&a, &a).unwrap(), 1.0);
    assert_eq!(hausdorff_mm(&a, &a).unwrap(), 0.0);
}

#[test]
fn single_voxel_distances() {
    let mut a = vec![0u8; 125];
    let mut b = vec![0u8; 125];
    a[2 * 25 + 2] = 1;
    b[2 * 25 + 3 * 5 + 2] = 1;
    let a = LabelVolume::new([5, 5, 5], [1.0; 3], a).unwrap();
    let b = LabelVolume::new([5, 5, 5], [1.0; 3], b).unwrap();
    assert_eq!(hausdorff_mm(&a, &b).unwrap(), 3.0);
    assert_eq!(dice_metric(&a, &b).unwrap(), 0.0);
}

#[test]
fn half_probability_is_background() {
    let v = Volume::new([1, 1, 3], [1.0; 3], vec![0.5, 0.5000001, 0.4999999]).unwrap();
    assert_eq!(threshold(&v).data(), &[0, 1, 0]);
}

#[test]
fn singleton_identical_report() {
    let m = blob_mask([6, 6, 6], [1.0; 3], 8, 0.3);
    let report = MetricsReport {
        rows: vec![score("only", &m, &m)],
    };
    let (d, h) = (report.dice().unwrap(), report.hausdorff().unwrap());
    assert_eq!((d.mean, d.std), (1.0, 0.0));
    assert_eq!((h.mean, h.std), (0.0, 0.0));
}

#[test]
fn spacing_scales_distances() {
    let a = LabelVolume::new([2, 1, 1], [1.5, 1.0, 1.0], vec![1, 0]).unwrap();
    let b = LabelVolume::new([2, 1, 1], [1.5, 1.0, 1.0], vec![0, 1]).unwrap();
    assert_eq!(hausdorff_mm(&a, &b).unwrap(), 1.5);
    let c = LabelVolume::new([2, 1, 1], [1.0, 1.0, 1.0], vec![0, 1]).unwrap();
    assert!(hausdorff_mm(&a, &c).is_err());
}

#[test]
fn percentile_is_at_most_the_maximum() {
    let a = blob_mask([8, 8, 8], [1.0; 3], 1, 0.2);
    let b = blob_mask([8, 8, 8], [1.0; 3], 2, 0.2);
    let full = hausdorff_mm(&a, &b).unwrap();
    assert_eq!(hausdorff_percentile_mm(&a, &b, 100.0).unwrap(), full);
    assert!(hausdorff_percentile_mm(&a, &b, 95.0).unwrap() <= full);
    assert!(hausdorff_percentile_mm(&a, &b, 0.0).is_err());
}

#[test]
fn empty_prediction_is_reported_not_scored() {
    let truth = blob_mask([4, 4, 4], [1.0; 3], 3, 0.4);
    let empty = LabelVolume::new([4, 4, 4], [1.0; 3], vec![0; 64]).unwrap();
    let row = score("v", &empty, &truth);
    assert_eq!(row.status, "missing_prediction");
    assert_eq!(row.hausdorff_mm, None);
    let report = MetricsReport {
        rows: vec![row, score("w", &truth, &truth)],
    };
    assert_eq!(report.excluded(), 1);
    let d = report.dice().unwrap();
    assert_eq!((d.mean, d.std, d.count), (1.0, 0.0, 1));
}

#[test]
fn report_aggregates_recompute_from_rows() {
    let row = |name: &str, d: f64, h: f64| MetricsRow {
        volume: name.into(),
        dice: Some(d),
        hausdorff_mm: Some(h),
        status: "ok".into(),
    };
    let report = MetricsReport {
        rows: vec![row("a", 1.0, 0.0), row("b", 0.5, 3.0), row("c", 0.75, 1.5)],
    };
    // independent recomputation from the CSV text
    let csv = report.to_csv();
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    let dice: Vec<f64> = rows
        .iter()
        .filter(|r| r[3] == "ok")
        .map(|r| r[1].parse().unwrap())
        .collect();
    let mean = dice.iter().sum::<f64>() / 3.0;
    let var = dice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 2.0;
    let mean_row = rows.iter().find(|r| r[0] == "mean").unwrap();
    let std_row = rows.iter().find(|r| r[0] == "stddev").unwrap();
    assert!((mean_row[1].parse::<f64>().unwrap() - mean).abs() < 1e-15);
    assert!((std_row[1].parse::<f64>().unwrap() - var.sqrt()).abs() < 1e-15);
    assert!(mean_row[3].contains("n=3") && mean_row[3].contains("excluded=0"));
    let two = MetricsReport {
        rows: vec![row("a", 1.0, 0.0), row("b", 0.5, 2.0)],
    };
    assert_eq!(two.dice().unwrap().mean, 0.75);
}

#[test]
fn evaluate_reports_every_case() {
    let cfg = NetworkConfig {
        input: [8, 8, 8],
        in_channels: 1,
        base_channels: 2,
        kernel: 3,
        convs_down: vec![1, 1],
        convs_up: vec![1],
    };
    let model = VNetModel::build(cfg, 0).unwrap();
    let mut data = Dataset::default();
    for i in 0..3 {
        let label = blob_mask([8, 8, 8], [1.0; 3], i, 0.3);
        data.push(Case::new(format!("c{i}"), label.to_volume(), label).unwrap());
    }
    let wrong = blob_mask([8, 8, 4], [1.0; 3], 9, 0.3);
    data.push(Case::new("odd", wrong.to_volume(), wrong).unwrap());
    let report = evaluate(&model, &data).unwrap();
    assert_eq!(report.rows.len(), 4);
    assert_eq!(report.rows[3].status, "shape");
    assert!(report.rows[..3].iter().all(|r| r.dice.is_some()));
}

#[test]
fn threshold_flip_changes_exactly_one_voxel() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let p: Vec<f64> = (0..125).map(|_| rng.random_range(0.0..1.0)).collect();
    let v = Volume::new([5, 5, 5], [1.0; 3], p.clone()).unwrap();
    let base = threshold(&v);
    for i in [0, 17, 64, 124] {
        let mut q = p.clone();
        q[i] = if q[i] > 0.5 { 0.5 } else { 0.75 };
        let flipped = threshold(&v.with_data(q).unwrap());
        let diff: Vec<usize> = (0..125)
            .filter(|&j| base.data()[j] != flipped.data()[j])
            .collect();
        assert_eq!(diff, vec![i]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_match_brute_force(
        dims in prop::array::uniform3(1usize..=12),
        spacing in prop::array::uniform3(0.5f64..2.0),
        density in 0.02f64..0.6,
        seed in any::<u64>(),
    ) {
        let a = blob_mask(dims, spacing, seed, density);
        let b = blob_mask(dims, spacing, seed ^ 0x55, density);
        let d = dice_metric(&a, &b).unwrap();
        prop_assert_eq!(d, set_oracle(&a, &b));
        prop_assert_eq!(d, dice_metric(&b, &a).unwrap());
        let pa: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
        prop_assert_eq!(d, dice_coefficient(&pa, b.data(), 0.0).unwrap());
        match all_pairs_oracle(&a, &b) {
            Some(h) => {
                prop_assert_eq!(hausdorff_mm(&a, &b).unwrap(), h);
                prop_assert_eq!(hausdorff_mm(&b, &a).unwrap(), h);
            }
            None => prop_assert!(hausdorff_mm(&a, &b).is_err()),
        }
        if a.foreground_count() > 0 {
            prop_assert_eq!(dice_metric(&a, &a).unwrap(), 1.0);
            prop_assert_eq!(hausdorff_mm(&a, &a).unwrap(), 0.0);
        }
    }
}
