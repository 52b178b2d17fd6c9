use leafnet::cascade::{aggregate_patches, stage1_decide, top_k, CascadeConfig, StageDecision};
use leafnet::network::Weights;
use leafnet::ops::softmax;
use leafnet::preprocess::{binarize, sample_patches, LeafImage};
use leafnet::trainer::Clr;
use leafnet::wire::protocol::{encode_request, read_request, Request};
use leafnet::{weights_io, ProbVector, Tensor};
use proptest::prelude::*;

fn probs(k: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(0u32..1000, k).prop_map(|raw| {
        let s: u32 = raw.iter().sum::<u32>().max(1);
        if raw.iter().all(|&r| r == 0) {
            return vec![1.0 / raw.len() as f32; raw.len()];
        }
        raw.iter().map(|&r| r as f32 / s as f32).collect()
    })
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

proptest! {
    #[test]
    fn top_k_matches_a_stable_sort(p in probs(2..=20), k in 1usize..20) {
        let k = k.min(p.len());
        let pv = ProbVector::new(p.clone()).unwrap();
        let mut ids: Vec<usize> = (0..p.len()).collect();
        // stable sort on descending value keeps lower ids first among ties
        ids.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap());
        let got: Vec<usize> = top_k(&pv, k).unwrap().classes().collect();
        prop_assert_eq!(got, ids[..k].to_vec());
        prop_assert_eq!(pv.argmax(), ids[0]);
    }

    #[test]
    fn stricter_stage_one_thresholds_never_decide_more(p in probs(2..=12), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let pv = ProbVector::new(p).unwrap();
        let mut loose = CascadeConfig::mk();
        loose.top_seg = 1;
        loose.min_prob_seg = a.min(b);
        loose.min_delta_seg = a.min(b);
        let mut strict = loose.clone();
        strict.min_prob_seg = a.max(b);
        strict.min_delta_seg = a.max(b);
        let decided = |cfg: &CascadeConfig| matches!(stage1_decide(&pv, cfg).unwrap(), StageDecision::Decided { .. });
        prop_assert!(!decided(&strict) || decided(&loose));
    }

    #[test]
    fn stage_one_is_permutation_equivariant(p in probs(3..=10), rot in 0usize..10) {
        // distinct values so ties cannot reorder
        let p: Vec<f32> = p.iter().enumerate().map(|(i, v)| v + i as f32 * 1e-3).collect();
        let s: f32 = p.iter().sum();
        let p: Vec<f32> = p.iter().map(|v| v / s).collect();
        let k = p.len();
        let rot = rot % k;
        let rotated: Vec<f32> = (0..k).map(|i| p[(i + k - rot) % k]).collect();
        let cfg = CascadeConfig { top_seg: 2, ..CascadeConfig::flavia() };
        let a = stage1_decide(&ProbVector::new(p).unwrap(), &cfg).unwrap();
        let b = stage1_decide(&ProbVector::new(rotated).unwrap(), &cfg).unwrap();
        match (a, b) {
            (StageDecision::Decided { class: ca, rule: ra }, StageDecision::Decided { class: cb, rule: rb }) => {
                prop_assert_eq!((ca + rot) % k, cb);
                prop_assert_eq!(ra, rb);
            }
            (StageDecision::Defer(ka), StageDecision::Defer(kb)) => {
                let shifted: Vec<usize> = ka.classes().map(|c| (c + rot) % k).collect();
                prop_assert_eq!(shifted, kb.classes().collect::<Vec<_>>());
            }
            (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
        }
    }

    #[test]
    fn aggregated_patches_are_the_mean(rows in prop::collection::vec(probs(5..=5), 1..8)) {
        let pvs: Vec<ProbVector> = rows.iter().cloned().map(|r| ProbVector::new(r).unwrap()).collect();
        let agg = aggregate_patches(&pvs).unwrap();
        let sum: f64 = agg.as_slice().iter().map(|&v| f64::from(v)).sum();
        prop_assert!((sum - 1.0).abs() < 1e-5);
        for c in 0..5 {
            let mean = rows.iter().map(|r| f64::from(r[c])).sum::<f64>() / rows.len() as f64;
            prop_assert!((f64::from(agg.get(c)) - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(logits in prop::collection::vec(-60.0f32..60.0, 2..30)) {
        let n = logits.len();
        let p = softmax(&Tensor::new(&[1, n], logits).unwrap());
        let sum: f32 = p.data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-5);
        prop_assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn clr_stays_within_its_band(it in 0u64..100_000) {
        let clr = Clr::default();
        let lr = clr.rate(it);
        prop_assert!(lr >= clr.base_lr - 1e-15 && lr <= clr.max_lr + 1e-15);
    }

    #[test]
    fn wire_requests_round_trip_bit_exactly(
        dims in prop::collection::vec(1usize..5, 1..=4),
        seed in any::<u64>(),
    ) {
        let len: usize = dims.iter().product();
        let mut x = seed | 1;
        let data: Vec<f32> = (0..len)
            .map(|_| {
                x ^= x << 13;
                x ^= x >> 7;
                x ^= x << 17;
                f32::from_bits(x as u32)
            })
            .collect();
        let t = Tensor::new(&dims, data).unwrap();
        let bytes = encode_request(&Request::Infer(t.clone())).unwrap();
        let Request::Infer(back) = read_request(&mut bytes.as_slice()).unwrap() else {
            return Err(TestCaseError::fail("ping decoded"));
        };
        prop_assert_eq!(back.dims(), t.dims());
        prop_assert_eq!(bits(back.data()), bits(t.data()));
    }

    #[test]
    fn archives_round_trip(tensors in prop::collection::btree_map("[a-z]{1,6}\\.[0-9]\\.kernel", prop::collection::vec(-1e3f32..1e3, 1..40), 1..6)) {
        let mut w = Weights::new();
        for (name, data) in &tensors {
            w.insert(name.clone(), Tensor::new(&[data.len()], data.clone()).unwrap());
        }
        let back = weights_io::decode(&weights_io::encode(&w).unwrap()).unwrap();
        for (name, data) in &tensors {
            prop_assert_eq!(bits(back.get(name).unwrap().data()), bits(data));
        }
    }

    #[test]
    fn sampled_windows_meet_the_coverage_rule(
        cells in prop::collection::vec(any::<bool>(), 64),
        fraction in 0.3f64..=1.0,
        seed in any::<u64>(),
    ) {
        // 8×8 blocks of 4 px give a blocky 32×32 mask
        let mask = Tensor::from_fn(&[1, 32, 32], |i| if cells[(i / 32 / 4) * 8 + (i % 32) / 4] { 1.0 } else { 0.0 });
        let rgb = Tensor::from_fn(&[3, 32, 32], |i| (i % 97) as f32 / 97.0);
        let leaf = LeafImage::new(rgb, mask.clone()).unwrap();
        let set = sample_patches(&leaf, 5, 8, fraction, seed).unwrap();
        for &(r, c) in &set.origins {
            let covered: f32 = (r..r + 8).flat_map(|y| (c..c + 8).map(move |x| (y, x))).map(|(y, x)| mask.data()[y * 32 + x]).sum();
            prop_assert!(f64::from(covered) / 64.0 >= fraction);
        }
    }

    #[test]
    fn binarized_masks_are_binary(vals in prop::collection::vec(0.0f32..=1.0, 3 * 12 * 12)) {
        if let Ok(m) = binarize(&Tensor::new(&[3, 12, 12], vals).unwrap()) {
            prop_assert_eq!(m.dims(), &[1, 12, 12]);
            prop_assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }
}

#[test]
fn config_text_round_trips_for_both_presets() {
    for cfg in [CascadeConfig::mk(), CascadeConfig::flavia()] {
        assert_eq!(CascadeConfig::parse(&cfg.to_kv_string()).unwrap(), cfg);
    }
}
