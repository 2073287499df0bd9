mod common;

use std::collections::BTreeMap;

use depfusion_core::features::{self, KeypointFrame, FRAME_ROWS, N_FACE_POINTS};
use depfusion_core::fusion;
use depfusion_core::io::{self, Checkpoint};
use depfusion_core::musdl::{self, MusdlConfig};
use depfusion_core::nn::{Graph, Mode, ParamStore, Tensor};
use depfusion_core::phq::{self, Gender, Severity};
use depfusion_core::sam::{Grads, Sam, SamConfig, SgdConfig};
use depfusion_core::sampling::{self, ClipLabel, SamplerMode};
use depfusion_core::signal;
use proptest::prelude::*;

/// Starts `k·(w − o)` whose window `[s, s + w)` fits in `[0, D]`, enumerated one by one.
fn brute_clip_count(d: f64, w: f64, o: f64) -> usize {
    let mut n = 0;
    while n as f64 * (w - o) + w <= d {
        n += 1;
    }
    n
}

fn frames_strategy() -> impl Strategy<Value = Vec<KeypointFrame>> {
    prop::collection::vec(prop::collection::vec(-50.0..50.0f64, FRAME_ROWS * 3), 1..5).prop_map(|fs| {
        fs.into_iter()
            .enumerate()
            .map(|(i, v)| {
                let points = v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
                KeypointFrame::new(i as f64, points).unwrap()
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clip_count_matches_enumeration(d in 0.0..600.0f64, w in 1.0..90.0f64, frac in 0.0..0.95f64) {
        let o = w * frac;
        prop_assert_eq!(features::clip_count(d, w, o), brute_clip_count(d, w, o));
    }

    #[test]
    fn normalized_keypoints_in_unit_range_and_invertible(frames in frames_strategy()) {
        let n = features::normalize_keypoints(&frames).unwrap();
        for (f, orig) in n.frames.iter().zip(&frames) {
            for p in &f.points[..N_FACE_POINTS] {
                prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
            }
            prop_assert_eq!(&f.points[N_FACE_POINTS..], &orig.points[N_FACE_POINTS..]);
        }
        for (f, orig) in n.denormalize().iter().zip(&frames) {
            for (p, q) in f.points.iter().zip(&orig.points) {
                for a in 0..3 {
                    prop_assert!((p[a] - q[a]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn soft_rows_are_distributions(label in 0usize..4, sigma in 0.5..12.0f64) {
        let cfg = MusdlConfig { sigma, ..MusdlConfig::default() };
        let row = musdl::soft_row(label, &cfg).unwrap();
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(row.iter().all(|&v| v >= 0.0));
        prop_assert_eq!(musdl::argmax(&row) / cfg.ratio(), label);
        let c = cfg.center(label);
        for j in 0..cfg.expanded {
            let mirror = 2.0 * c - j as f64;
            if mirror >= 0.0 && mirror < cfg.expanded as f64 && mirror.fract() == 0.0 {
                prop_assert!((row[j] - row[mirror as usize]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kl_is_zero_on_target_and_positive_elsewhere(labels in prop::collection::vec(0usize..4, 1..6), noise in prop::collection::vec(0.0..1.0f64, 32)) {
        let cfg = MusdlConfig::default();
        let t = musdl::transform_labels(&labels, &cfg).unwrap();
        prop_assert!(musdl::kl_loss(&t, &t.values).unwrap().abs() < 1e-9);
        let mut p = t.values.clone();
        for (i, v) in p.iter_mut().enumerate() {
            *v += noise[i % 32] + 1e-3;
        }
        for r in p.chunks_mut(cfg.expanded) {
            let s: f64 = r.iter().sum();
            r.iter_mut().for_each(|v| *v /= s);
        }
        prop_assert!(musdl::kl_loss(&t, &p).unwrap() > 0.0);
    }

    #[test]
    fn baselines_match_oracles(n in 2usize..4, d in 1usize..6, seed in any::<u64>()) {
        let mut r = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let vs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rand::Rng::gen_range(&mut r, -2.0..2.0)).collect()).collect();
        for m in common::BASELINES {
            let want = common::baseline_oracle(m, &vs);
            let plain = fusion::baseline_fuse(m, &vs).unwrap();
            let mut g = Graph::new(Mode::Eval);
            let inputs: Vec<_> = vs.iter().map(|v| g.input(Tensor::new(vec![1, d], v.clone()).unwrap()).unwrap()).collect();
            let out = fusion::baseline_fuse_graph(&mut g, m, &inputs).unwrap();
            let graph = g.value(out).data().to_vec();
            prop_assert_eq!(plain.len(), want.len());
            for ((a, b), c) in plain.iter().zip(&graph).zip(&want) {
                prop_assert!((a - c).abs() < 1e-12, "{} plain {} oracle {}", m, a, c);
                prop_assert!((b - c).abs() < 1e-12, "{} graph {} oracle {}", m, b, c);
            }
        }
    }

    #[test]
    fn sampler_weights_positive_with_equal_class_mass(scores in prop::collection::vec((0u8..4, any::<bool>()), 1..40), binary in any::<bool>(), gb in any::<bool>()) {
        let labels: Vec<ClipLabel> = scores
            .iter()
            .map(|&(s, male)| ClipLabel { subscores: [s; 8], gender: if male { Gender::Male } else { Gender::Female } })
            .collect();
        let mode = if binary { SamplerMode::Binary } else { SamplerMode::Score };
        let w = sampling::compute_sampler_weights(&labels, mode, gb).unwrap();
        prop_assert!(w.weights.iter().all(|&v| v > 0.0));
        let mut mass: BTreeMap<(u32, Option<Gender>), f64> = BTreeMap::new();
        for (l, &v) in labels.iter().zip(&w.weights) {
            *mass.entry((l.class(mode), gb.then_some(l.gender))).or_default() += v;
        }
        for m in mass.values() {
            prop_assert!((m - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn balanced_batches_get_uniform_class_weights(reps in 1usize..4, seed in any::<u64>()) {
        let mut batch: Vec<[u8; 8]> = (0..4 * reps).map(|i| [(i % 4) as u8; 8]).collect();
        let mut r = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(batch.as_mut_slice(), &mut r);
        let w = sampling::dynamic_class_weights(&batch, 4).unwrap();
        prop_assert!(w.iter().all(|&v| (v - 1.0 / reps as f64).abs() < 1e-12));
    }

    #[test]
    fn phq_binary_and_severity_follow_total(sub in prop::array::uniform8(0u8..4)) {
        let r = phq::derive_phq(&sub).unwrap();
        let total: u32 = sub.iter().map(|&v| v as u32).sum();
        prop_assert_eq!(r.score, total);
        prop_assert_eq!(r.binary, total >= 10);
        prop_assert_eq!(r.severity, Severity::from_score(total).unwrap());
    }

    #[test]
    fn hann_is_bounded_and_periodic_symmetric(len in 2usize..300) {
        let w = signal::hann_window(len).unwrap();
        prop_assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
        for n in 1..len {
            prop_assert!((w[n] - w[len - n]).abs() < 1e-12);
        }
    }

    #[test]
    fn mel_scale_is_increasing_and_invertible(a in 0.0..8000.0f64, b in 0.0..8000.0f64) {
        let (ma, mb) = (signal::mel_scale(a).unwrap(), signal::mel_scale(b).unwrap());
        if a < b {
            prop_assert!(ma < mb);
        }
        prop_assert!((signal::mel_to_hz(ma) - a).abs() < 1e-8);
    }

    #[test]
    fn permute_round_trips(dims in prop::collection::vec(1usize..4, 1..5), seed in any::<u64>()) {
        let n: usize = dims.iter().product();
        let t = Tensor::new(dims.clone(), (0..n).map(|i| i as f64).collect()).unwrap();
        let mut perm: Vec<usize> = (0..dims.len()).collect();
        let mut r = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let p = t.permute(&perm).unwrap();
        let shape: Vec<usize> = perm.iter().map(|&i| dims[i]).collect();
        prop_assert_eq!(p.shape(), shape.as_slice());
        prop_assert_eq!(p.permute(&inv).unwrap(), t);
    }

    #[test]
    fn checkpoint_rewrite_is_byte_identical(tensors in prop::collection::btree_map("[a-z]{1,6}(\\.[a-z]{1,4})?", prop::collection::vec(-1e3..1e3f64, 1..12), 0..6), epoch in any::<u32>(), hash in any::<u64>()) {
        let mut store = ParamStore::new();
        for (i, (name, v)) in tensors.iter().enumerate() {
            let t = Tensor::new(vec![v.len()], v.iter().map(|&x| x as f32 as f64).collect()).unwrap();
            if i % 3 == 2 {
                store.insert_buffer(name.clone(), t);
            } else {
                store.insert(name.clone(), t);
            }
        }
        let ck = Checkpoint { epoch, config_hash: hash, config_text: format!("model.d = {epoch}\n"), store };
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        prop_assert_eq!(back, ck);
    }

    #[test]
    fn tensor_files_round_trip(dims in prop::collection::vec(1usize..4, 0..4)) {
        let n: usize = dims.iter().product();
        let t = Tensor::new(dims, (0..n).map(|i| (i as f32 * 0.37) as f64).collect()).unwrap();
        prop_assert_eq!(io::decode_tensor(&io::encode_tensor(&t)).unwrap(), t);
    }

    #[test]
    fn sam_perturbation_has_radius_rho(g in prop::collection::vec(-5.0..5.0f64, 1..8), rho in 1e-3..2.0f64) {
        prop_assume!(g.iter().any(|&v| v.abs() > 1e-6));
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![g.len()], vec![0.0; g.len()]).unwrap());
        let mut sam = Sam::new(SamConfig { rho, sgd: SgdConfig { lr: 0.1, momentum: 0.0 } }).unwrap();
        let grad = Tensor::new(vec![g.len()], g.clone()).unwrap();
        let step = sam
            .step(&mut store, |_| Ok((1.0, Grads::from([("w".to_string(), grad.clone())]))))
            .unwrap();
        prop_assert!((step.perturbation_norm - rho).abs() < 1e-9);
        prop_assert_eq!(step.evaluations, 2);
    }
}
