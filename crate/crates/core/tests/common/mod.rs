//! Oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vnet_core::losses::DICE_SMOOTHING;
use vnet_core::volume::LabelVolume;

pub fn blob_mask(dims: [usize; 3], spacing: [f64; 3], seed: u64, density: f64) -> LabelVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.random_bool(density) as u8).collect();
    LabelVolume::new(dims, spacing, data).unwrap()
}

pub fn set_oracle(a: &LabelVolume, b: &LabelVolume) -> f64 {
    let on = |m: &LabelVolume| -> std::collections::BTreeSet<usize> {
        m.data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(i, _)| i)
            .collect()
    };
    let (sa, sb) = (on(a), on(b));
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

/// Surface voxels by an explicit neighbour scan, then every pairwise distance.
pub fn all_pairs_oracle(a: &LabelVolume, b: &LabelVolume) -> Option<f64> {
    let surface = |m: &LabelVolume| {
        let [d, h, w] = m.dims();
        let mut pts = Vec::new();
        for z in 0..d as i64 {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    if m.at(z as usize, y as usize, x as usize) == 0 {
                        continue;
                    }
                    let exposed = [
                        (1, 0, 0),
                        (-1, 0, 0),
                        (0, 1, 0),
                        (0, -1, 0),
                        (0, 0, 1),
                        (0, 0, -1),
                    ]
                    .iter()
                    .any(|(dz, dy, dx)| {
                        let (nz, ny, nx) = (z + dz, y + dy, x + dx);
                        nz < 0
                            || ny < 0
                            || nx < 0
                            || nz >= d as i64
                            || ny >= h as i64
                            || nx >= w as i64
                            || m.at(nz as usize, ny as usize, nx as usize) == 0
                    });
                    if exposed {
                        pts.push([z as usize, y as usize, x as usize]);
                    }
                }
            }
        }
        pts
    };
    let (pa, pb) = (surface(a), surface(b));
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let s = a.spacing();
    let d2 = |p: [usize; 3], q: [usize; 3]| {
        let dz = (p[0] as f64 - q[0] as f64) * s[0];
        let dy = (p[1] as f64 - q[1] as f64) * s[1];
        let dx = (p[2] as f64 - q[2] as f64) * s[2];
        dz * dz + dy * dy + dx * dx
    };
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        from.iter()
            .map(|&p| to.iter().map(|&q| d2(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    Some(directed(&pa, &pb).max(directed(&pb, &pa)).sqrt())
}

/// Central differences of the smoothed Dice, with an independent forward.
pub fn fd_dice(p: &[f64], g: &[u8], j: usize, h: f64) -> f64 {
    let dice = |p: &[f64]| {
        let (mut pg, mut pp, mut gg) = (0.0, 0.0, 0.0);
        for (a, &b) in p.iter().zip(g) {
            pg += a * b as f64;
            pp += a * a;
            gg += (b as f64) * (b as f64);
        }
        (2.0 * pg + DICE_SMOOTHING) / (pp + gg + DICE_SMOOTHING)
    };
    let mut plus = p.to_vec();
    plus[j] += h;
    let mut minus = p.to_vec();
    minus[j] -= h;
    (dice(&plus) - dice(&minus)) / (2.0 * h)
}
