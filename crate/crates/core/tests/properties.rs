use cinecav::biomarkers::{self, VolumeCurve};
use cinecav::cav::{self, ConceptSpec, ConceptVector, Layer, LogisticConfig, SensitivityReport};
use cinecav::interp;
use cinecav::model::{self, ModelConfig, ModelParams};
use cinecav::phantom::{self, CohortSpec, LabelFrame, SegSequence};
use cinecav::{BiomarkerSet, N_LABELS};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn curve_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(10.0..100.0f64, 8..30)
}

fn window_order() -> impl Strategy<Value = (usize, usize)> {
    (1usize..6).prop_flat_map(|half| {
        let window = 2 * half + 1;
        (Just(window), 0..window)
    })
}

fn tiny_sequence(seed: u64) -> SegSequence {
    let cfg = ModelConfig::tiny();
    let frames = (0..cfg.frames)
        .map(|t| {
            let labels = (0..cfg.dims.pixels())
                .map(|i| ((i as u64 * 2654435761 + seed * 97 + t as u64 * 13) >> 3) as u8 % N_LABELS as u8)
                .collect();
            LabelFrame::from_labels(cfg.dims, labels).unwrap()
        })
        .collect();
    SegSequence::new(seed as u32, frames, None).unwrap()
}

fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (s, _) in scores.iter().zip(labels).filter(|p| *p.1) {
        for (t, _) in scores.iter().zip(labels).filter(|p| !*p.1) {
            pairs += 1;
            twice += if s > t { 2 } else if s == t { 1 } else { 0 };
        }
    }
    twice as f64 / (2 * pairs) as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn savgol_weights_are_symmetric_and_sum_to_one((window, order) in window_order()) {
        let c = biomarkers::savgol_coefficients(window, order).unwrap();
        prop_assert_eq!(c.len(), window);
        prop_assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..window {
            prop_assert!((c[i] - c[window - 1 - i]).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothing_is_linear(x in curve_strategy(), a in 0.1..3.0f64, b in 0.1..3.0f64) {
        let y: Vec<f64> = x.iter().rev().copied().collect();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let s = |v: &[f64]| biomarkers::savgol_smooth(&VolumeCurve::new(v.to_vec()).unwrap(), 5, 2).unwrap().values().to_vec();
        let (sx, sy, sm) = (s(&x), s(&y), s(&mix));
        for i in 0..x.len() {
            prop_assert!((sm[i] - (a * sx[i] + b * sy[i])).abs() < 1e-9 * sm[i].abs().max(1.0));
        }
    }

    #[test]
    fn ef_ignores_volume_scale(x in curve_strategy(), scale in 0.01..100.0f64) {
        let base = VolumeCurve::new(x.clone()).unwrap();
        let scaled = VolumeCurve::new(x.iter().map(|v| v * scale).collect()).unwrap();
        let lm = biomarkers::detect_landmarks(&base);
        let lm_scaled = biomarkers::detect_landmarks(&scaled);
        if let (Ok(lm), Ok(lm_scaled)) = (lm, lm_scaled) {
            prop_assert_eq!(lm.ed_frame, lm_scaled.ed_frame);
            prop_assert_eq!(lm.es_frame, lm_scaled.es_frame);
            let e = biomarkers::ejection_fraction(&base, &lm).unwrap();
            let es = biomarkers::ejection_fraction(&scaled, &lm_scaled).unwrap();
            prop_assert!((e - es).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&e));
        }
    }

    #[test]
    fn landmarks_follow_cyclic_rotation(x in curve_strategy(), shift in 0usize..30) {
        let n = x.len();
        let k = shift % n;
        let mut rotated = x.clone();
        rotated.rotate_right(k);
        let a = biomarkers::detect_landmarks(&VolumeCurve::new(x).unwrap());
        let b = biomarkers::detect_landmarks(&VolumeCurve::new(rotated).unwrap());
        if let (Ok(a), Ok(b)) = (a, b) {
            prop_assert_eq!((a.ed_frame + k) % n, b.ed_frame);
            prop_assert_eq!((a.es_frame + k) % n, b.es_frame);
        }
    }

    #[test]
    fn kl_is_nonnegative(pairs in prop::collection::vec((-4.0..4.0f64, -3.0..3.0f64), 1..10)) {
        let mu: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let sigma: Vec<f64> = pairs.iter().map(|p| p.1.exp()).collect();
        prop_assert!(model::kl_divergence(&mu, &sigma).unwrap() >= 0.0);
        let d = mu.len();
        prop_assert_eq!(model::kl_divergence(&vec![0.0; d], &vec![1.0; d]).unwrap(), 0.0);
    }

    #[test]
    fn decoder_emits_distributions(seed in 0u64..1000, z in prop::collection::vec(-3.0..3.0f64, 4)) {
        let p = ModelParams::init(&ModelConfig::tiny(), seed).unwrap();
        let probs = p.decode(&z).unwrap();
        prop_assert_eq!(probs.len(), p.dims.pixels() * N_LABELS);
        for px in probs.chunks(N_LABELS) {
            prop_assert!(px.iter().all(|q| (0.0..=1.0).contains(q)));
            prop_assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_matches_pair_counting(
        rows in prop::collection::vec((0u8..8, any::<bool>()), 2..80)
    ) {
        let scores: Vec<f64> = rows.iter().map(|r| r.0 as f64).collect();
        let labels: Vec<bool> = rows.iter().map(|r| r.1).collect();
        let both = labels.iter().any(|l| *l) && labels.iter().any(|l| !*l);
        match model::auc(&scores, &labels) {
            Ok(a) => {
                prop_assert!(both);
                prop_assert_eq!(a, pair_count_auc(&scores, &labels));
                let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
                prop_assert!((model::auc(&flipped, &labels).unwrap() - (1.0 - a)).abs() < 1e-12);
            }
            Err(_) => prop_assert!(!both),
        }
    }

    #[test]
    fn fraction_positive_recounts(dots in prop::collection::vec(-1.0..1.0f64, 1..200)) {
        let n = dots.len();
        let r = SensitivityReport::from_dots(dots.iter().enumerate().map(|(i, d)| (i as u32, *d)).collect()).unwrap();
        let positive = dots.iter().filter(|d| **d > 0.0).count();
        prop_assert_eq!(r.fraction_positive, positive as f64 / n as f64);
    }

    #[test]
    fn cav_is_unit_and_points_to_positives(seed in 0u64..500, sep in 0.5..3.0f64) {
        let dim = 6;
        let jitter = |i: usize, j: usize| (((i * 31 + j * 17) as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0 - 0.5;
        let axis: Vec<f64> = (0..dim).map(|j| if j == (seed as usize % dim) { 1.0 } else { 0.0 }).collect();
        let pos: Vec<Vec<f64>> = (0..20).map(|i| (0..dim).map(|j| sep * axis[j] + 0.2 * jitter(i, j)).collect()).collect();
        let neg: Vec<Vec<f64>> = (0..20).map(|i| (0..dim).map(|j| -sep * axis[j] + 0.2 * jitter(i + 50, j)).collect()).collect();
        let cv = cav::train_cav("c", Layer::Cav, &pos, &neg, &LogisticConfig::default()).unwrap();
        prop_assert!((cv.v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(cav::dot(&cv.v, &axis) > 0.9);
    }

    #[test]
    fn sensitivity_is_linear_in_the_concept(seed in 0u64..200, raw in prop::collection::vec(-1.0..1.0f64, 5)) {
        prop_assume!(raw.iter().any(|x| x.abs() > 1e-3));
        let cfg = ModelConfig::tiny();
        let model = ModelParams::init(&cfg, seed).unwrap();
        let seq = tiny_sequence(seed);
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        let v: Vec<f64> = raw.iter().map(|x| x / norm).collect();
        prop_assert_eq!(v.len(), model.cav_width());
        let cv = |v: Vec<f64>| ConceptVector { concept: "c".into(), layer: Layer::Cav, v, accuracy: 1.0 };
        let s = cav::sensitivity(&model, &seq, &cv(v.clone())).unwrap();
        let s_neg = cav::sensitivity(&model, &seq, &cv(v.iter().map(|x| -x).collect())).unwrap();
        prop_assert!((s + s_neg).abs() < 1e-12);
        let g = cav::logit_gradient(&model, &model.encode_sequence(&seq).unwrap().mus, Layer::Cav).unwrap();
        let by_axis: f64 = v.iter().enumerate().map(|(i, vi)| {
            let mut e = vec![0.0; v.len()];
            e[i] = 1.0;
            vi * cav::dot(&g, &e)
        }).sum();
        prop_assert!((s - by_axis).abs() < 1e-12);
    }

    #[test]
    fn pca_axes_are_orthonormal(points in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 5), 8..40)) {
        let pca = interp::pca_project(&points, 3).unwrap();
        for (i, a) in pca.axes.iter().enumerate() {
            for (j, b) in pca.axes.iter().enumerate() {
                let d = cav::dot(a, b);
                prop_assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-6, "axes {i},{j}: {d}");
            }
        }
        prop_assert!(pca.explained.windows(2).all(|w| w[0] >= w[1] - 1e-9));
    }

    #[test]
    fn power_iteration_matches_dense_eigen(entries in prop::collection::vec(-1.0..1.0f64, 25)) {
        let a = DMatrix::from_row_slice(5, 5, &entries);
        let cov = &a * a.transpose();
        let rows: Vec<Vec<f64>> = (0..5).map(|i| (0..5).map(|j| cov[(i, j)]).collect()).collect();
        let (values, _) = interp::power_eigen(&rows, 5);
        let mut oracle: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
        oracle.sort_by(|x, y| y.total_cmp(x));
        // Power iteration cannot separate nearly equal eigenvalues quickly.
        let gaps = oracle.windows(2).map(|w| w[0] - w[1]).fold(f64::INFINITY, f64::min);
        prop_assume!(gaps > 1e-3);
        for (v, o) in values.iter().zip(&oracle) {
            prop_assert!((v - o).abs() < 1e-8, "{v} vs {o}");
        }
    }

    #[test]
    fn dice_is_symmetric_and_one_on_identity(seed in 0u64..1000) {
        let a = &tiny_sequence(seed).frames[0];
        let b = &tiny_sequence(seed + 1).frames[1];
        prop_assert_eq!(model::dice_frame(a, a).unwrap(), 1.0);
        let ab = model::dice_frame(a, b).unwrap();
        prop_assert_eq!(ab, model::dice_frame(b, a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
    }
}

#[test]
fn concept_sets_are_disjoint_extremes() {
    let pool: Vec<(u32, BiomarkerSet)> = (0..30u32)
        .map(|i| {
            let v = ((i * 7) % 30) as f64;
            (i, BiomarkerSet { ef: v, per: v, pfr: v, pafr: v, lvt: v, qc_pass: true, rv_offset: v })
        })
        .collect();
    let spec = ConceptSpec::named("low_ef", 10).unwrap();
    let (pos, neg) = cav::select_concept_sets(&pool, &spec).unwrap();
    assert_eq!((pos.len(), neg.len()), (10, 10));
    assert!(pos.iter().all(|p| !neg.contains(p)));
    let ef = |id: &u32| pool[*id as usize].1.ef;
    assert!(pos.iter().map(ef).fold(f64::MIN, f64::max) < neg.iter().map(ef).fold(f64::MAX, f64::min));
    assert!(cav::select_concept_sets(&pool[..19], &spec).is_err());
}

#[test]
fn cohort_generation_and_formats_round_trip() {
    let spec = CohortSpec { frames: 8, ..CohortSpec::new(5, 0.4, 13) };
    let a = phantom::generate_cohort(&spec).unwrap();
    let b = phantom::generate_cohort(&spec).unwrap();
    assert_eq!(a.dataset, b.dataset);

    let mut bytes = Vec::new();
    phantom::write_dataset(&mut bytes, &a.dataset).unwrap();
    assert_eq!(phantom::read_dataset(&bytes[..]).unwrap(), a.dataset);

    let model = ModelParams::init(&ModelConfig::new(a.dataset.dims, a.dataset.frames), 13).unwrap();
    let mut m = Vec::new();
    model::write_model(&mut m, &model).unwrap();
    let back = model::read_model(&m[..], a.dataset.dims).unwrap();
    assert!(back.values().eq(model.values()));
    assert_eq!(back.cav_index, model.cav_index);
}
