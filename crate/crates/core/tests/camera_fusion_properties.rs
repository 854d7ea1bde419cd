use proptest::prelude::*;

use roadlabel::camera_label::{
    camera_label, compute_prototype, similarity_labels, similarity_map, PrototypeSource, PrototypeTracker,
};
use roadlabel::features::PatchFeatureMap;
use roadlabel::fusion::fuse;
use roadlabel::{LabelImage, Mask};

fn map_of(rows: usize, cols: usize, dim: usize, data: Vec<f32>) -> PatchFeatureMap {
    let mut m = PatchFeatureMap::zeros(rows, cols, dim, 4);
    m.data = data;
    m
}

fn feature_grid() -> impl Strategy<Value = PatchFeatureMap> {
    (1usize..6, 1usize..6, 1usize..9).prop_flat_map(|(r, c, d)| {
        proptest::collection::vec(0.01f32..2.0, r * c * d).prop_map(move |v| map_of(r, c, d, v))
    })
}

fn label_image(w: usize, h: usize) -> impl Strategy<Value = LabelImage> {
    (
        proptest::collection::vec(0.0f64..1.0, w * h),
        proptest::collection::vec(any::<bool>(), w * h),
    )
        .prop_map(move |(values, coverage)| {
            let mut img = LabelImage::empty(w, h);
            img.values = values;
            img.coverage = coverage;
            img
        })
}

proptest! {
    #[test]
    fn cosine_ignores_positive_scale(m in feature_grid(), k_exp in -6i32..7, kp in 0.1f64..10.0, which in 0usize..36) {
        let proto: Vec<f64> = m.feature(0).iter().map(|v| *v as f64 + 0.5).collect();
        let base = similarity_map(&m, &proto).unwrap();
        // features are f32, so power-of-two factors keep the scaled map exact
        let k = 2f32.powi(k_exp);
        let mut scaled = m.clone();
        let i = which % m.patch_count();
        scaled.feature_mut(i).iter_mut().for_each(|v| *v *= k);
        let p2: Vec<f64> = proto.iter().map(|v| v * kp).collect();
        let s = similarity_map(&scaled, &p2).unwrap();
        for (a, b) in base.iter().zip(&s) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
        let (la, lb) = (similarity_labels(&base, 0.6).unwrap(), similarity_labels(&s, 0.6).unwrap());
        prop_assert_eq!(argmax(&la), argmax(&lb));
    }

    #[test]
    fn camera_label_rises_with_similarity(sim in proptest::collection::vec(-1.0f64..1.0, 2..50), sigma in 0.1f64..2.0) {
        prop_assume!(sim.iter().any(|s| *s > 0.0));
        let l = similarity_labels(&sim, sigma).unwrap();
        for i in 0..sim.len() {
            prop_assert!((0.0..=1.0).contains(&l[i]));
            for j in 0..sim.len() {
                if sim[i] <= sim[j] {
                    prop_assert!(l[i] <= l[j]);
                }
            }
        }
    }

    #[test]
    fn prototype_is_plain_mean(m in feature_grid(), pick in proptest::collection::vec(any::<bool>(), 36)) {
        let selected: Vec<bool> = (0..m.patch_count()).map(|i| pick[i]).collect();
        let chosen: Vec<Vec<f32>> = (0..m.patch_count())
            .filter(|&i| selected[i])
            .map(|i| m.feature(i).to_vec())
            .collect();
        let got = compute_prototype(&m, &selected, 1);
        if chosen.is_empty() {
            prop_assert!(got.is_none());
        } else {
            let got = got.unwrap();
            for k in 0..m.dim {
                let mean = chosen.iter().map(|f| f[k] as f64).sum::<f64>() / chosen.len() as f64;
                prop_assert!((got[k] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fusion_symmetric_and_idempotent(a in label_image(6, 5), b in label_image(6, 5)) {
        let ab = fuse(&a, &b).unwrap().image;
        let ba = fuse(&b, &a).unwrap().image;
        prop_assert_eq!(&ab.coverage, &ba.coverage);
        for i in 0..30 {
            if ab.coverage[i] {
                prop_assert!((ab.values[i] - ba.values[i]).abs() < 1e-15);
            }
        }
        let aa = fuse(&a, &a).unwrap().image;
        prop_assert_eq!(&aa.coverage, &a.coverage);
        for i in 0..30 {
            if a.coverage[i] {
                prop_assert_eq!(aa.values[i], a.values[i]);
            }
        }
    }
}

/// 20×20 patches of 4 px; `road` columns carry one feature direction.
fn frame(seed: f32, road_cols: std::ops::Range<usize>, traj_cols: std::ops::Range<usize>) -> (PatchFeatureMap, Mask) {
    let (rows, cols) = (20, 20);
    let mut m = PatchFeatureMap::zeros(rows, cols, 3, 4);
    for r in 0..rows {
        for c in 0..cols {
            let wobble = ((r * cols + c) as f32 * 0.37 + seed).sin() * 0.05;
            let f = if road_cols.contains(&c) { [1.0 + wobble, 0.2, 0.1] } else { [0.1, 1.0 + wobble, 0.3] };
            m.feature_mut(r * cols + c).copy_from_slice(&f);
        }
    }
    let mut mask = Mask::new(80, 80);
    for y in 0..80 {
        for x in traj_cols.start * 4..traj_cols.end * 4 {
            mask.set(x, y, true);
        }
    }
    (m, mask)
}

#[test]
fn sparse_frame_reuses_previous_prototype_exactly() {
    let mut tracker = PrototypeTracker::new(200);
    // 20 rows × 12 columns = 240 trajectory patches
    let (m1, t1) = frame(0.0, 4..16, 4..16);
    let first = camera_label(&m1, &t1, &mut tracker, 0.5, 0.6).unwrap();
    assert_eq!(first.source, PrototypeSource::Current { patches: 240 });
    let proto1 = tracker.last().unwrap().to_vec();

    // 20 × 7.5 = 150 patches: below the minimum, so frame 1's prototype is used
    let (m2, mut t2) = frame(1.3, 4..16, 6..13);
    for y in 0..40 {
        for x in 52..56 {
            t2.set(x, y, true);
        }
    }
    let second = camera_label(&m2, &t2, &mut tracker, 0.5, 0.6).unwrap();
    assert_eq!(second.source, PrototypeSource::Carried { patches: 150 });
    assert_eq!(tracker.last().unwrap(), &proto1[..]);

    let direct = similarity_labels(&similarity_map(&m2, &proto1).unwrap(), 0.6).unwrap();
    assert_eq!(second.patch_labels, direct);
}
