use proptest::prelude::*;

use super::*;

fn pair() -> LangPair {
    LangPair::new("en", "aa")
}

fn store(tensors: &[(&str, Vec<f32>)]) -> ParamStore<f32> {
    ParamStore::<f32>::from_tensors(
        tensors
            .iter()
            .map(|(n, v)| (n.to_string(), vec![v.len()], v.clone()))
            .collect::<Vec<_>>(),
    )
    .unwrap()
}

fn bools(bits: &Bitset) -> Vec<u8> {
    bits.iter().map(u8::from).collect()
}

fn layered(seed: u64, n: usize) -> ParamStore<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::Rng;
    let mut v = |k: usize| (0..k).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<_>>();
    store(&[
        ("dec.0.cross_q.weight", v(n)),
        ("dec.0.ffn_1.weight", v(n)),
        ("enc.0.attn_q.weight", v(n)),
        ("enc.0.ffn_1.bias", v(8)),
        ("enc.0.ffn_2.weight", v(n)),
        ("enc.0.ln_1.gain", v(8)),
    ])
}

#[test]
fn maskable_names() {
    assert!(is_maskable("enc.0.attn_q.weight"));
    assert!(is_maskable("dec.1.cross_k.weight"));
    assert!(is_maskable("dec.1.self_v.weight"));
    assert!(is_maskable("enc.2.ffn_1.weight"));
    assert!(!is_maskable("enc.2.ffn_1.bias"));
    assert!(!is_maskable("embed.weight"));
    assert!(!is_maskable("enc.0.ln_1.gain"));
}

#[test]
fn prune_half_of_four() {
    let s = store(&[("enc.0.ffn_1.weight", vec![0.1, -0.5, 0.3, -0.2])]);
    let m = magnitude_prune(&s, 0.5, PruneScope::PerTensor, pair()).unwrap();
    assert_eq!(bools(m.bits("enc.0.ffn_1.weight").unwrap()), vec![0, 1, 1, 0]);
    assert_eq!(m.provenance, Provenance::Pruned);
}

#[test]
fn alpha_zero_keeps_everything() {
    let s = layered(1, 50);
    let m = magnitude_prune(&s, 0.0, PruneScope::PerTensor, pair()).unwrap();
    assert_eq!(m.count_ones(), m.num_bits());
    assert_eq!(m, ParameterMask::all_ones(&s, pair()));
}

#[test]
fn alpha_point_seven_keeps_three_hundred_of_a_thousand() {
    let s = layered(2, 1000);
    for scope in [PruneScope::PerTensor, PruneScope::Global] {
        let m = magnitude_prune(&s, 0.7, scope, pair()).unwrap();
        if scope == PruneScope::PerTensor {
            for bits in m.tensors().values() {
                assert_eq!(bits.count_ones(), 300);
            }
        } else {
            assert_eq!(m.count_ones(), 1200);
        }
    }
}

#[test]
fn ties_prune_lower_index_first() {
    let s = store(&[("enc.0.ffn_1.weight", vec![0.5, -0.5, 0.5, 0.1])]);
    let m = magnitude_prune(&s, 0.5, PruneScope::PerTensor, pair()).unwrap();
    assert_eq!(bools(m.bits("enc.0.ffn_1.weight").unwrap()), vec![0, 1, 1, 0]);
}

#[test]
fn invalid_alpha_is_config_error() {
    let s = layered(3, 10);
    for a in [1.0, -0.1, f64::NAN] {
        let e = magnitude_prune(&s, a, PruneScope::PerTensor, pair()).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}

#[test]
fn random_mask_counts_and_determinism() {
    let s = store(&[("enc.0.ffn_1.weight", vec![1.0; 10])]);
    let a = random_mask(&s, 0.3, 7, pair()).unwrap();
    assert_eq!(a.count_ones(), 7);
    assert_eq!(a, random_mask(&s, 0.3, 7, pair()).unwrap());
    assert_eq!(a.provenance, Provenance::Random);
}

#[test]
fn independent_random_masks_overlap_near_density() {
    let s = layered(4, 20_000);
    let a = random_mask(&s, 0.3, 1, pair()).unwrap();
    let b = random_mask(&s, 0.3, 2, pair()).unwrap();
    let sim = similarity(&a, &b).unwrap();
    assert!((sim - 0.7).abs() < 0.01, "{sim}");
}

fn explicit(bits: &[u8], p: LangPair, fp: u64) -> ParameterMask {
    let t = [("enc.0.ffn_1.weight".to_string(), Bitset::from_bools(bits.iter().map(|&b| b == 1)))]
        .into_iter()
        .collect();
    ParameterMask::from_parts(t, 0.5, Provenance::Pruned, p, fp)
}

#[test]
fn similarity_examples() {
    let a = explicit(&[1, 1, 0, 0], pair(), 9);
    let b = explicit(&[1, 0, 1, 0], pair(), 9);
    assert_eq!(similarity(&a, &b).unwrap(), 0.5);
    let c = explicit(&[0, 0, 1, 1], pair(), 9);
    assert_eq!(similarity(&a, &c).unwrap(), 0.0);
    assert_eq!(similarity(&a, &a).unwrap(), 1.0);
    let empty = explicit(&[0, 0, 0, 0], pair(), 9);
    assert!(matches!(similarity(&empty, &a), Err(Error::Metric(_))));
    let other = explicit(&[1, 1, 0, 0], pair(), 10);
    assert!(similarity(&a, &other).is_err());
}

#[test]
fn zero_shot_merge_takes_encoder_and_decoder_halves() {
    let s = layered(5, 64);
    let xe = magnitude_prune(&s, 0.5, PruneScope::PerTensor, LangPair::new("aa", "en")).unwrap();
    let ey = random_mask(&s, 0.5, 3, LangPair::new("en", "ba")).unwrap();
    let m = merge_zero_shot(&xe, &ey).unwrap();
    assert_eq!(m.pair, LangPair::new("aa", "ba"));
    assert_eq!(m.provenance, Provenance::Merged);
    for (name, bits) in m.tensors() {
        let donor = if name.starts_with("dec.") { &ey } else { &xe };
        assert_eq!(bits, donor.bits(name).unwrap());
    }
    let bad = merge_zero_shot(&xe, &random_mask(&s, 0.5, 3, LangPair::new("aa", "ba")).unwrap());
    assert!(matches!(bad, Err(Error::Usage(_))));
}

#[test]
fn mask_file_round_trip_and_corruption() {
    let s = layered(6, 37);
    let m = magnitude_prune(&s, 0.3, PruneScope::PerTensor, pair()).unwrap();
    let bytes = m.to_bytes().unwrap();
    assert_eq!(&bytes[..4], MASK_MAGIC);
    assert_eq!(ParameterMask::from_bytes(&bytes).unwrap(), m);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("en-aa.mask");
    m.save(&path).unwrap();
    assert_eq!(ParameterMask::load(&path).unwrap(), m);

    // flip one mask bit: the CRC must catch it
    let mut flipped = bytes.clone();
    let at = bytes.len() - 6;
    flipped[at] ^= 1;
    assert!(matches!(ParameterMask::from_bytes(&flipped), Err(Error::Format { .. })));
    let loose = ParameterMask::from_bytes_unverified(&flipped).unwrap();
    assert_eq!(loose.count_ones().abs_diff(m.count_ones()), 1);

    assert!(ParameterMask::from_bytes(&bytes[..bytes.len() - 9]).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(ParameterMask::from_bytes(&magic).is_err());
}

#[test]
fn empty_mask_cannot_be_written() {
    let m = ParameterMask::from_parts(BTreeMap::new(), 0.5, Provenance::Pruned, pair(), 0);
    assert!(matches!(m.to_bytes(), Err(Error::Format { .. })));
}

#[test]
fn congruence_names_the_tensor() {
    let s = layered(7, 16);
    let m = ParameterMask::all_ones(&s, pair());
    m.check_congruent(&s).unwrap();
    let bigger = layered(7, 17);
    let err = m.check_congruent(&bigger).unwrap_err().to_string();
    assert!(err.contains("weight"), "{err}");
}

#[test]
fn apply_zeroes_pruned_weights_only() {
    let s = layered(8, 20);
    let m = magnitude_prune(&s, 0.5, PruneScope::PerTensor, pair()).unwrap();
    let masked = m.apply(&s).unwrap();
    for (e, me) in s.entries().iter().zip(masked.entries()) {
        match m.tensors().get(&e.name) {
            Some(bits) => {
                for j in 0..e.len() {
                    let want = if bits.get(j) { e.values[j] } else { 0.0 };
                    assert_eq!(me.values[j], want);
                }
            }
            None => assert_eq!(me.values, e.values),
        }
    }
}

#[test]
fn mask_set_rejects_duplicates_and_foreign_layouts() {
    let s = layered(9, 16);
    let a = ParameterMask::all_ones(&s, pair());
    let mut set = MaskSet::from_masks([a.clone()]).unwrap();
    assert!(set.insert(a.clone()).is_err());
    let foreign = ParameterMask::all_ones(&layered(9, 17), LangPair::new("en", "ab"));
    assert!(set.insert(foreign).is_err());
    assert!(set.get(&LangPair::new("en", "zz")).is_err());
    assert_eq!(set.len(), 1);
}

proptest! {
    #[test]
    fn reciprocal_similarity_is_weighted_by_density(
        seed in any::<u64>(), a1 in 0.0f64..0.95, a2 in 0.0f64..0.95,
    ) {
        let s = layered(seed, 200);
        let m1 = random_mask(&s, a1, seed ^ 1, pair()).unwrap();
        let m2 = random_mask(&s, a2, seed ^ 2, pair()).unwrap();
        let inter = intersection_count(&m1, &m2).unwrap();
        prop_assert_eq!(inter, intersection_count(&m2, &m1).unwrap());
        let s12 = similarity(&m1, &m2).unwrap();
        let s21 = similarity(&m2, &m1).unwrap();
        let lhs = s12 * m1.count_ones() as f64;
        let rhs = s21 * m2.count_ones() as f64;
        prop_assert!((lhs - rhs).abs() < 1e-6 * lhs.max(1.0));
    }

    #[test]
    fn larger_alpha_prunes_a_subset(seed in any::<u64>(), a in 0.0f64..0.9, d in 0.0f64..0.09) {
        let s = layered(seed, 150);
        for scope in [PruneScope::PerTensor, PruneScope::Global] {
            let lo = magnitude_prune(&s, a, scope, pair()).unwrap();
            let hi = magnitude_prune(&s, a + d, scope, pair()).unwrap();
            for (name, bits) in hi.tensors() {
                prop_assert!(bits.is_subset_of(lo.bits(name).unwrap()));
            }
        }
    }

    #[test]
    fn positive_scaling_does_not_change_the_mask(
        seed in any::<u64>(), a in 0.0f64..0.95, k in 0.01f32..100.0,
    ) {
        let s = layered(seed, 120);
        let mut scaled = s.clone();
        for e in scaled.entries_mut() {
            for v in &mut e.values {
                *v *= k;
            }
        }
        let m = magnitude_prune(&s, a, PruneScope::PerTensor, pair()).unwrap();
        let ms = magnitude_prune(&scaled, a, PruneScope::PerTensor, pair()).unwrap();
        prop_assert_eq!(m.tensors(), ms.tensors());
    }
}
