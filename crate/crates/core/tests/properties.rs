use proptest::prelude::*;

use geovmf::checkpoint::{Checkpoint, FeatureSource};
use geovmf::density::{density_grid, hpd_mask, hpd_thresholds, BBox, DECILES};
use geovmf::eval::{resolve, Candidate, Prediction};
use geovmf::features::{featurize, FeaturizerConfig};
use geovmf::head::{HeadDims, HeadParams};
use geovmf::ingest::{parse_jsonl_str, split, Dataset, GeoTextRecord, ParseMode};
use geovmf::mixture::{mixture_nll, weighted_nll};
use geovmf::sphere::{cart_to_geo, geo_to_cart, haversine_km, normalize_lon};
use geovmf::stats::median;
use geovmf::{GeoPoint, PointRule, UnitVec3, VmfComponent, VmfMixture};

fn geo() -> impl Strategy<Value = GeoPoint> {
    (-90.0f64..=90.0, -180.0f64..180.0).prop_map(|(lat, lon)| GeoPoint::new(lat, lon).unwrap())
}

fn unit() -> impl Strategy<Value = UnitVec3> {
    geo().prop_map(geo_to_cart)
}

fn mixture(max_k: usize) -> impl Strategy<Value = VmfMixture> {
    prop::collection::vec((unit(), -1.0f64..3.0, 0.05f64..1.0), 1..=max_k).prop_map(|parts| {
        let total: f64 = parts.iter().map(|p| p.2).sum();
        let comps = parts.iter().map(|(mu, lk, _)| VmfComponent::new(*mu, 10f64.powf(*lk)).unwrap()).collect();
        VmfMixture::new(comps, parts.iter().map(|p| p.2 / total).collect()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn geo_cart_round_trip_off_poles(lat in -89.9f64..89.9, lon in -180.0f64..180.0) {
        let back = cart_to_geo(geo_to_cart(GeoPoint::new(lat, lon).unwrap())).unwrap();
        prop_assert!((back.lat() - lat).abs() < 1e-9);
        prop_assert!(normalize_lon(back.lon() - lon).abs() < 1e-9);
    }

    #[test]
    fn haversine_is_a_metric(a in geo(), b in geo(), c in geo()) {
        let ab = haversine_km(a, b);
        prop_assert!((ab - haversine_km(b, a)).abs() < 1e-6);
        prop_assert!(ab <= haversine_km(a, c) + haversine_km(c, b) + 1e-6);
    }

    #[test]
    fn density_peaks_at_mean(mu in unit(), x in unit(), lk in -2.0f64..4.0) {
        let c = VmfComponent::new(mu, 10f64.powf(lk)).unwrap();
        prop_assert!(c.log_density(x) <= c.log_density(mu) + 1e-12);
    }

    #[test]
    fn weighted_nll_bounds_mixture_nll(ms in prop::collection::vec(mixture(5), 1..8), seed_targets in prop::collection::vec(unit(), 8)) {
        let targets = &seed_targets[..ms.len()];
        prop_assert!(weighted_nll(targets, &ms).unwrap() >= mixture_nll(targets, &ms).unwrap() - 1e-12);
    }

    #[test]
    fn losses_ignore_component_order(m in mixture(5), y in unit(), rot in 0usize..5) {
        let mut pairs: Vec<(VmfComponent, f64)> = m.components().iter().copied().zip(m.rho().iter().copied()).collect();
        let k = pairs.len();
        pairs.rotate_left(rot % k);
        pairs.reverse();
        let (c, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let p = VmfMixture::new(c, r).unwrap();
        let (a, b) = ([m], [p]);
        prop_assert!((weighted_nll(&[y], &a).unwrap() - weighted_nll(&[y], &b).unwrap()).abs() < 1e-9);
        prop_assert!((mixture_nll(&[y], &a).unwrap() - mixture_nll(&[y], &b).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn features_deterministic_and_unit(text in ".{0,80}", seed in 0u64..4) {
        let cfg = FeaturizerConfig { dim: 256, hash_seed: seed, ..FeaturizerConfig::default() };
        let f = featurize(&text, &cfg);
        prop_assert_eq!(&f, &featurize(&text, &cfg));
        prop_assert!(f.is_zero() || (f.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn split_partitions_exactly(n in 3usize..400, seed in any::<u64>(), a in 0.1f64..0.8) {
        let rest = 1.0 - a;
        let recs = (0..n).map(|i| GeoTextRecord {
            id: format!("r{i}"), text: String::new(), location: GeoPoint::new(0.0, 0.0).unwrap(), title: None,
        }).collect();
        let d = Dataset::new(recs, "p").unwrap();
        let (tr, va, te) = split(&d, (a, rest / 2.0, rest / 2.0), seed).unwrap();
        prop_assert_eq!(tr.len() + va.len() + te.len(), n);
        let mut ids: Vec<String> = tr.records.iter().chain(&va.records).chain(&te.records).map(|r| r.id.clone()).collect();
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
        let again = split(&d, (a, rest / 2.0, rest / 2.0), seed).unwrap();
        prop_assert_eq!(again.0.records, tr.records);
    }

    #[test]
    fn corpus_jsonl_round_trip(texts in prop::collection::vec((".{0,40}", geo(), prop::option::of("[a-zA-Z ]{1,12}")), 1..20)) {
        let recs: Vec<GeoTextRecord> = texts.into_iter().enumerate().map(|(i, (text, location, title))| GeoTextRecord {
            id: format!("id{i}"), text, location, title,
        }).collect();
        let d = Dataset::new(recs, "p").unwrap();
        let mut s = String::new();
        for r in &d.records {
            s.push_str(&serde_json::to_string(r).unwrap());
            s.push('\n');
        }
        let back = parse_jsonl_str(&s, std::path::Path::new("mem"), ParseMode::Strict).unwrap();
        prop_assert_eq!(back.dataset.records, d.records);
    }

    #[test]
    fn best_never_worse_than_other_rules(truth in geo(), cands in prop::collection::vec((geo(), prop::option::of(0.0f64..1.0)), 1..10), seed in any::<u64>()) {
        let pred = Prediction::Candidates(cands.into_iter().map(|(point, score)| Candidate { point, score }).collect());
        let err = |rule| haversine_km(resolve(&pred, truth, rule, seed).unwrap(), truth);
        let best = err(PointRule::Best);
        prop_assert!(best <= err(PointRule::HighProb) + 1e-9);
        prop_assert!(best <= err(PointRule::Random) + 1e-9);
        prop_assert!(best <= err(PointRule::RandomWeighted) + 1e-9);
    }

    #[test]
    fn median_lies_within_range(xs in prop::collection::vec(-1e6f64..1e6, 1..200)) {
        let m = median(&xs);
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= m && m <= hi);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn hpd_regions_nest(m in mixture(3)) {
        let g = density_grid(&m, 3.0, BBox::WHOLE).unwrap();
        let th = hpd_thresholds(&g, &DECILES).unwrap();
        let masks: Vec<Vec<bool>> = th.iter().map(|&t| hpd_mask(&g, t)).collect();
        for w in masks.windows(2) {
            prop_assert!(w[0].iter().zip(&w[1]).all(|(a, b)| !a || *b));
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(d in 1usize..20, h in 1usize..10, k in 1usize..5, seed in any::<u64>()) {
        let dims = HeadDims::new(d, h, k).unwrap();
        let c = Checkpoint {
            features: FeatureSource::External,
            params: HeadParams::init(seed, dims),
        };
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, c);
    }
}
