use irgrid_core::explain::*;
use irgrid_core::featurize::{FeatureStack, CHANNELS};
use irgrid_core::model::{AttUNet, AttUNetConfig};
use irgrid_core::nn::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 16;

fn model(seed: u64) -> AttUNet<f64> {
    let mut m = AttUNet::<f64>::new(AttUNetConfig::narrowed(8), seed).unwrap();
    // Lift the output so the clamp stays inactive around the hotspots.
    let head = m.param_specs().iter().find(|s| s.name == "head.bias").unwrap().offset;
    m.params[head] = 1.0;
    m
}

fn input(seed: u64) -> FeatureStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureStack {
        height: SIDE,
        width: SIDE,
        data: (0..CHANNELS * SIDE * SIDE).map(|_| rng.random::<f32>()).collect(),
        scales: vec![1.0; CHANNELS],
        original_dims: (SIDE, SIDE),
    }
}

fn hot(pixels: Vec<(usize, usize)>) -> HotspotSet {
    HotspotSet {
        pixels,
        dr_max: 1.0,
        dr_th: 0.9,
        zero_map: false,
    }
}

fn mean_output(m: &AttUNet<f64>, x: &[f64], pixels: &[(usize, usize)]) -> f64 {
    let t = Tensor::from_vec(1, CHANNELS, SIDE, SIDE, x.to_vec());
    let y = m.predict(&t).unwrap();
    pixels.iter().map(|&(r, c)| y.data[r * SIDE + c]).sum::<f64>() / pixels.len() as f64
}

#[test]
fn saliency_matches_finite_differences() {
    let m = model(4);
    let s = input(5);
    let pred = Differentiable::predict(&m, &s).unwrap();
    let hs = select_hotspots(&pred, 0.8).unwrap();
    assert!(!hs.pixels.is_empty() && hs.pixels.iter().all(|&(r, c)| pred.get(r, c) > 0.0));
    let sal = saliency(&m, &s, &hs).unwrap();
    let x0: Vec<f64> = s.data.iter().map(|&v| v as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = 1e-6;
    let mut checked = 0;
    for _ in 0..60 {
        let i = rng.random_range(0..x0.len());
        let mut xp = x0.clone();
        xp[i] += h;
        let mut xm = x0.clone();
        xm[i] -= h;
        let fd = (mean_output(&m, &xp, &hs.pixels) - mean_output(&m, &xm, &hs.pixels)) / (2.0 * h);
        let a = sal.signed[i];
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
        assert!(err <= 1e-2, "input {i}: analytic {a}, numeric {fd}");
        checked += 1;
    }
    assert_eq!(checked, 60);
}

#[test]
fn saliency_is_linear_over_disjoint_sets() {
    let m = model(7);
    let s = input(8);
    let a = vec![(1, 1), (3, 9), (10, 4)];
    let b = vec![(12, 12), (0, 15), (7, 7)];
    let sa = saliency(&m, &s, &hot(a.clone())).unwrap();
    let sb = saliency(&m, &s, &hot(b.clone())).unwrap();
    let both = saliency(&m, &s, &hot([a, b].concat())).unwrap();
    for i in 0..both.signed.len() {
        let avg = 0.5 * (sa.signed[i] + sb.signed[i]);
        assert!((both.signed[i] - avg).abs() <= 1e-12 * (1.0 + avg.abs()));
    }
}

#[test]
fn saliency_is_deterministic() {
    let m = model(9);
    let s = input(10);
    let hs = select_hotspots(&Differentiable::predict(&m, &s).unwrap(), 0.9).unwrap();
    assert_eq!(saliency(&m, &s, &hs).unwrap(), saliency(&m, &s, &hs).unwrap());
}

#[test]
fn optimize_edge_cases() {
    let m = model(11);
    let s = input(12);
    let opts = ExplainOptions::default();
    let r = optimize(&m, &s, 0, &opts).unwrap();
    assert_eq!(r.reduction_percent, 0.0);
    assert_eq!(r.high_drop_before, r.high_drop_after);

    let r = optimize(&m, &s, 5, &opts).unwrap();
    assert_eq!(r.chosen_pixels.len(), 5);
    assert!(resistance_channels().contains(&r.contributor_channel.unwrap()));

    let flat = LinearSurrogate {
        height: SIDE,
        width: SIDE,
        weights: vec![0.0; CHANNELS * SIDE * SIDE],
    };
    assert!(matches!(optimize(&flat, &s, 5, &opts), Err(irgrid_core::error::Error::EmptyHotspots)));
    assert_eq!(baseline_no_saliency(&flat, &s, &opts).unwrap().reduction_percent, 0.0);
}

#[test]
fn surrogate_upsizing_removes_hotspots_it_should() {
    // Output = Σ w·x with one nonzero weight, constant over the map. Cutting
    // that input by 20 % drops every pixel below 0.9 of the old maximum.
    let mut weights = vec![0.0; CHANNELS * SIDE * SIDE];
    let ch = resistance_channels()[2];
    weights[ch * SIDE * SIDE + 5] = 1.0;
    let m = LinearSurrogate { height: SIDE, width: SIDE, weights };
    let mut s = input(13);
    s.plane_mut(ch)[5] = 1.0;
    let opts = ExplainOptions { fraction: 0.2, ..ExplainOptions::default() };
    let r = optimize(&m, &s, 1, &opts).unwrap();
    assert_eq!(r.contributor_channel, Some(ch));
    assert_eq!(r.chosen_pixels, [(0, 5)]);
    assert_eq!(r.high_drop_before, SIDE * SIDE);
    assert_eq!(r.high_drop_after, 0);
    assert_eq!(r.reduction_percent, 100.0);
}

proptest! {
    #[test]
    fn upsize_touches_exactly_the_listed_pixels(
        seed in any::<u64>(),
        ch in 0usize..CHANNELS,
        picks in prop::collection::btree_set((0usize..SIDE, 0usize..SIDE), 0..20),
    ) {
        let s = input(seed);
        let pixels: Vec<(usize, usize)> = picks.into_iter().collect();
        let out = apply_upsize(&s, ch, &pixels, 0.1).unwrap();
        let mut changed = 0;
        for (i, (a, b)) in s.data.iter().zip(&out.data).enumerate() {
            let on = i / (SIDE * SIDE) == ch && pixels.contains(&((i % (SIDE * SIDE)) / SIDE, i % SIDE));
            if on {
                prop_assert_eq!(*b, *a * 0.9f32);
                changed += (a != b) as usize;
            } else {
                prop_assert_eq!(a, b);
            }
        }
        prop_assert!(changed <= pixels.len());
    }
}
