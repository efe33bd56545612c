use proptest::prelude::*;

use super::*;
use crate::numerics::finite_difference_check;
use crate::Error;

fn random(shape: &[usize], rng: &mut SeedStream, std: f64) -> Tensor<f64> {
    normal_tensor(shape, std, rng)
}

fn loop_matmul_nt(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k) = a.dims2();
    let (n, _) = b.dims2();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i * n + j] += a.data()[i * k + t] * b.data()[j * k + t];
            }
        }
    }
    out
}

fn random_mapping(v: usize, k: usize, rng: &mut SeedStream) -> VocabMapping {
    // every code gets at least one member, the rest are random
    let mut codes: Vec<usize> = (0..v).map(|i| if i < k { i } else { rng.below(k) }).collect();
    rng.shuffle(&mut codes);
    VocabMapping::new(codes, k).unwrap()
}

fn ln_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[test]
fn mapping_counts_and_errors() {
    let m = VocabMapping::new(vec![0, 1, 1, 2, 0], 4).unwrap();
    assert_eq!(m.counts(), &[2, 2, 1, 0]);
    assert_eq!(m.counts().iter().sum::<usize>(), 5);
    assert_eq!(m.empty_codes(), 1);
    assert_eq!(m.members(1).collect::<Vec<_>>(), vec![1, 2]);
    assert!(matches!(VocabMapping::new(vec![0, 3], 3), Err(Error::Index(_))));
    assert!(matches!(VocabMapping::new(vec![], 0), Err(Error::Config(_))));
}

#[test]
fn full_logits_one_hot_row_selects_column() {
    let mut rng = SeedStream::new(1);
    let e_out = random(&[5, 3], &mut rng, 1.0);
    let mut tape = Tape::new();
    let h = tape.leaf(Tensor::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap(), false);
    let w = tape.leaf(e_out.clone(), false);
    let l = full_logits(&mut tape, w, h).unwrap();
    let expected: Vec<f64> = (0..5).map(|i| e_out.data()[i * 3 + 1]).collect();
    assert_eq!(tape.value(l).data(), &expected[..]);
}

#[test]
fn full_logits_hand_instance() {
    // d=2, V=3; W_out = [[1,2,3],[4,5,6]] stored as E_out = W_outᵀ
    let e_out = Tensor::<f64>::from_rows(&[vec![1.0, 4.0], vec![2.0, 5.0], vec![3.0, 6.0]]).unwrap();
    let hm = Tensor::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]).unwrap();
    let mut tape = Tape::new();
    let (h, w) = (tape.leaf(hm.clone(), false), tape.leaf(e_out.clone(), false));
    let l = full_logits(&mut tape, w, h).unwrap();
    assert_eq!(tape.value(l).data(), &[-3.0, -3.0, -3.0, 8.5, 11.0, 13.5]);
    assert_eq!(tape.value(l).data(), &loop_matmul_nt(&hm, &e_out)[..]);
}

#[test]
fn full_logits_gradient_check() {
    let mut rng = SeedStream::new(2);
    let mut store = ParamStore::new();
    let w = store.add("w", random(&[6, 4], &mut rng, 0.5), true);
    let h = store.add("h", random(&[3, 4], &mut rng, 1.0), true);
    let targets = [0, 5, 2];
    let report = finite_difference_check(&mut store, 1e-6, |tape, s| {
        let (wv, hv) = (tape.param(s, w), tape.param(s, h));
        let l = full_logits(tape, wv, hv)?;
        tape.cross_entropy(l, &targets)
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn codebook_logits_orthogonal_codes() {
    let c = Tensor::<f64>::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.0, 0.5, 0.0], vec![0.0, 0.0, -4.0]]).unwrap();
    for j in 0..3 {
        let row = c.row(j);
        let norm2: f64 = row.iter().map(|x| x * x).sum();
        let hrow: Vec<f64> = row.iter().map(|x| x / norm2).collect();
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::from_rows(&[hrow]).unwrap(), false);
        let cv = tape.leaf(c.clone(), false);
        let l = codebook_logits(&mut tape, cv, h).unwrap();
        let expected: Vec<f64> = (0..3).map(|i| if i == j { 1.0 } else { 0.0 }).collect();
        assert_eq!(tape.value(l).data(), &expected[..]);
    }
}

#[test]
fn codebook_logits_match_full_logits_and_oracle() {
    let mut rng = SeedStream::new(3);
    let c = random(&[9, 7], &mut rng, 1.0);
    let hm = random(&[5, 7], &mut rng, 1.0);
    let mut tape = Tape::new();
    let (h, cv) = (tape.leaf(hm.clone(), false), tape.leaf(c.clone(), false));
    let lc = codebook_logits(&mut tape, cv, h).unwrap();
    let lf = full_logits(&mut tape, cv, h).unwrap();
    assert_eq!(tape.value(lc).data(), tape.value(lf).data());
    let oracle = loop_matmul_nt(&hm, &c);
    for (a, b) in tape.value(lc).data().iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-12);
    }
    let bad = tape.leaf(random(&[9, 6], &mut rng, 1.0), false);
    assert!(matches!(codebook_logits(&mut tape, bad, h), Err(Error::Dimension(_))));
}

#[test]
fn scatter_logits_examples() {
    let mut tape = Tape::new();
    let lc = tape.leaf(Tensor::<f64>::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap(), false);
    let map = VocabMapping::new(vec![0, 1, 1, 2, 0], 3).unwrap();
    let lv = scatter_logits(&mut tape, lc, &map).unwrap();
    assert_eq!(tape.value(lv).data(), &[1.0, 2.0, 2.0, 3.0, 1.0]);
    let id = scatter_logits(&mut tape, lc, &VocabMapping::identity(3)).unwrap();
    assert_eq!(tape.value(id).data(), tape.value(lc).data());
    let wrong = VocabMapping::identity(4);
    assert!(matches!(scatter_logits(&mut tape, lc, &wrong), Err(Error::Dimension(_))));
}

#[test]
fn scatter_logits_loop_oracle() {
    let mut rng = SeedStream::new(4);
    for trial in 0..10 {
        let (m, k, v) = (3 + trial % 4, 2 + trial, 11 + 3 * trial);
        let map = random_mapping(v, k, &mut rng);
        let src = random(&[m, k], &mut rng, 1.0);
        let mut tape = Tape::new();
        let lc = tape.leaf(src.clone(), false);
        let lv = scatter_logits(&mut tape, lc, &map).unwrap();
        for r in 0..m {
            for i in 0..v {
                assert_eq!(tape.value(lv).data()[r * v + i], src.data()[r * k + map.code(i)]);
            }
        }
    }
}

fn fused_and_naive(c: &Tensor<f64>, hm: &Tensor<f64>, map: &VocabMapping, targets: &[usize]) -> (f64, f64) {
    let mut tape = Tape::new();
    let (cv, h) = (tape.leaf(c.clone(), false), tape.leaf(hm.clone(), false));
    let f = vq_loss_fused(&mut tape, cv, map, h, targets).unwrap();
    let n = vq_loss_naive(&mut tape, cv, map, h, targets).unwrap();
    (tape.scalar(f), tape.scalar(n))
}

#[test]
fn fused_loss_matches_naive_pipeline() {
    let mut rng = SeedStream::new(5);
    for _ in 0..20 {
        let map = random_mapping(23, 5, &mut rng);
        let c = random(&[5, 6], &mut rng, 1.5);
        let hm = random(&[7, 6], &mut rng, 1.5);
        let targets: Vec<usize> = (0..7).map(|_| rng.below(23)).collect();
        let (f, n) = fused_and_naive(&c, &hm, &map, &targets);
        assert!((f - n).abs() <= 1e-10, "{f} vs {n}");
    }
}

#[test]
fn fused_loss_identity_is_full_cross_entropy() {
    let mut rng = SeedStream::new(6);
    let c = random(&[8, 4], &mut rng, 1.0);
    let hm = random(&[5, 4], &mut rng, 1.0);
    let targets = [0, 7, 3, 3, 1];
    let mut tape = Tape::new();
    let (cv, h) = (tape.leaf(c, false), tape.leaf(hm, false));
    let f = vq_loss_fused(&mut tape, cv, &VocabMapping::identity(8), h, &targets).unwrap();
    let l = full_logits(&mut tape, cv, h).unwrap();
    let ce = tape.cross_entropy(l, &targets).unwrap();
    assert!((tape.scalar(f) - tape.scalar(ce)).abs() <= 1e-15);
}

#[test]
fn single_code_loss_is_ln_v() {
    let mut rng = SeedStream::new(7);
    for v in [2usize, 17, 1000] {
        let c = random(&[1, 5], &mut rng, 3.0);
        let hm = random(&[4, 5], &mut rng, 3.0);
        let targets: Vec<usize> = (0..4).map(|_| rng.below(v)).collect();
        let (f, n) = fused_and_naive(&c, &hm, &VocabMapping::single_code(v), &targets);
        assert!((f - (v as f64).ln()).abs() <= 1e-12);
        assert!((n - (v as f64).ln()).abs() <= 1e-12);
    }
}

#[test]
fn fused_loss_rejects_bad_targets() {
    let mut tape = Tape::<f64>::new();
    let c = tape.leaf(Tensor::zeros(&[2, 3]), false);
    let h = tape.leaf(Tensor::zeros(&[1, 3]), false);
    let map = VocabMapping::new(vec![0, 1, 1], 2).unwrap();
    assert!(matches!(vq_loss_fused(&mut tape, c, &map, h, &[3]), Err(Error::Index(_))));
}

#[test]
fn empty_codes_do_not_contribute() {
    let mut rng = SeedStream::new(8);
    let map = VocabMapping::new(vec![0, 2, 2, 0, 3], 5).unwrap();
    let c = random(&[5, 3], &mut rng, 2.0);
    let hm = random(&[3, 3], &mut rng, 2.0);
    let targets = [1, 4, 0];
    let (f, n) = fused_and_naive(&c, &hm, &map, &targets);
    assert!((f - n).abs() <= 1e-12);
}

#[test]
fn probabilities_shared_codes_and_cluster_mass() {
    let mut rng = SeedStream::new(9);
    let map = random_mapping(19, 6, &mut rng);
    let c = random(&[6, 4], &mut rng, 1.0);
    let hm = random(&[3, 4], &mut rng, 1.0);
    let mut tape = Tape::new();
    let (cv, h) = (tape.leaf(c.clone(), false), tape.leaf(hm.clone(), false));
    let p = vq_probabilities(&mut tape, cv, &map, h).unwrap();
    let lc = loop_matmul_nt(&hm, &c);
    for r in 0..3 {
        let row = tape.value(p).row(r);
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for i in 0..19 {
            for i2 in 0..19 {
                if map.code(i) == map.code(i2) {
                    assert_eq!(row[i], row[i2]);
                }
            }
        }
        let lrow = &lc[r * 6..(r + 1) * 6];
        let z: f64 = (0..6).map(|j| map.counts()[j] as f64 * lrow[j].exp()).sum();
        for j in 0..6 {
            let mass: f64 = map.members(j).map(|i| row[i]).sum();
            let oracle = map.counts()[j] as f64 * lrow[j].exp() / z;
            assert!((mass - oracle).abs() <= 1e-12);
        }
    }
}

#[test]
fn probabilities_identity_is_softmax() {
    let mut rng = SeedStream::new(10);
    let c = random(&[7, 3], &mut rng, 1.0);
    let hm = random(&[2, 3], &mut rng, 1.0);
    let mut tape = Tape::new();
    let (cv, h) = (tape.leaf(c, false), tape.leaf(hm, false));
    let p = vq_probabilities(&mut tape, cv, &VocabMapping::identity(7), h).unwrap();
    let lc = codebook_logits(&mut tape, cv, h).unwrap();
    let s = tape.softmax(lc).unwrap();
    assert_eq!(tape.value(p).data(), tape.value(s).data());
}

#[test]
fn lowrank_identity_w1_is_full_head() {
    let mut rng = SeedStream::new(11);
    let d = 4;
    let mut eye = vec![0.0; d * d];
    for i in 0..d {
        eye[i * d + i] = 1.0;
    }
    let w2 = random(&[d, 9], &mut rng, 1.0);
    let hm = random(&[3, d], &mut rng, 1.0);
    let mut tape = Tape::new();
    let (h, a, b) = (
        tape.leaf(hm, false),
        tape.leaf(Tensor::new(&[d, d], eye).unwrap(), false),
        tape.leaf(w2.clone(), false),
    );
    let lr = lowrank_logits(&mut tape, a, b, h).unwrap();
    let full = tape.matmul(h, b).unwrap();
    assert_eq!(tape.value(lr).data(), tape.value(full).data());
}

/// Singular values by one-sided Jacobi rotations.
fn singular_values(a: &Tensor<f64>) -> Vec<f64> {
    let (m, n) = a.dims2();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.data()[i * n + j]).collect()).collect();
    for _ in 0..60 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (x, y) = (cols[p][i], cols[q][i]);
                    cols[p][i] = c * x - s * y;
                    cols[q][i] = s * x + c * y;
                }
            }
        }
        if off < 1e-14 {
            break;
        }
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

#[test]
fn lowrank_logit_rank_is_bounded() {
    let mut rng = SeedStream::new(12);
    let (d, r, v, m) = (6, 2, 10, 8);
    let mut tape = Tape::new();
    let h = tape.leaf(random(&[m, d], &mut rng, 1.0), false);
    let w1 = tape.leaf(random(&[d, r], &mut rng, 1.0), false);
    let w2 = tape.leaf(random(&[r, v], &mut rng, 1.0), false);
    let l = lowrank_logits(&mut tape, w1, w2, h).unwrap();
    let sv = singular_values(tape.value(l));
    let rank = sv.iter().filter(|&&s| s > 1e-9 * sv[0]).count();
    assert_eq!(rank, r);
    // full-rank reference so the oracle is not vacuous
    let f = tape.leaf(random(&[m, v], &mut rng, 1.0), false);
    assert_eq!(singular_values(tape.value(f)).iter().filter(|&&s| s > 1e-9).count(), m);
}

#[test]
fn lowrank_gradient_check() {
    let mut rng = SeedStream::new(13);
    let mut store = ParamStore::new();
    let w1 = store.add("w1", random(&[5, 3], &mut rng, 0.5), true);
    let w2 = store.add("w2", random(&[3, 8], &mut rng, 0.5), true);
    let h = store.add("h", random(&[4, 5], &mut rng, 1.0), true);
    let targets = [7, 0, 3, 3];
    let report = finite_difference_check(&mut store, 1e-6, |tape, s| {
        let (a, b, hv) = (tape.param(s, w1), tape.param(s, w2), tape.param(s, h));
        let l = lowrank_logits(tape, a, b, hv)?;
        tape.cross_entropy(l, &targets)
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn adaptive_single_cluster_is_full_softmax() {
    let mut rng = SeedStream::new(14);
    let mut store = ParamStore::<f64>::new();
    let head = AdaptiveHead::new(&mut store, 6, 12, &[12], &[], &mut rng).unwrap();
    let hm = random(&[5, 6], &mut rng, 1.0);
    let targets = [0, 11, 4, 4, 9];
    let mut tape = Tape::new();
    let h = tape.leaf(hm, false);
    let a = adaptive_loss(&mut tape, &store, &head, h, &targets).unwrap();
    let w = tape.param(&store, head.shortlist);
    let l = tape.matmul(h, w).unwrap();
    let ce = tape.cross_entropy(l, &targets).unwrap();
    assert_eq!(tape.scalar(a), tape.scalar(ce));
}

#[test]
fn adaptive_probabilities_sum_to_one_and_match_loss() {
    let mut rng = SeedStream::new(15);
    let mut store = ParamStore::<f64>::new();
    let head = AdaptiveHead::new(&mut store, 8, 50, &[10, 30, 50], &[2, 4], &mut rng).unwrap();
    let hm = random(&[6, 8], &mut rng, 2.0);
    let lp = adaptive_log_probs(&store, &head, &hm).unwrap();
    for r in 0..6 {
        let total: f64 = lp.row(r).iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() <= 1e-6, "row {r} sums to {total}");
        assert!((ln_sum_exp(lp.row(r))).abs() <= 1e-12);
    }
    let targets = [0, 9, 10, 29, 30, 49];
    let mut tape = Tape::new();
    let h = tape.leaf(hm, false);
    let loss = adaptive_loss(&mut tape, &store, &head, h, &targets).unwrap();
    let nll: f64 = targets.iter().enumerate().map(|(r, &t)| -lp.row(r)[t]).sum::<f64>() / 6.0;
    assert!((tape.scalar(loss) - nll).abs() <= 1e-12);
}

#[test]
fn adaptive_gradient_check() {
    let mut rng = SeedStream::new(16);
    let mut store = ParamStore::<f64>::new();
    let head = AdaptiveHead::new(&mut store, 4, 20, &[5, 12, 20], &[2, 4], &mut rng).unwrap();
    let h = store.add("h", random(&[5, 4], &mut rng, 1.0), true);
    let targets = [1, 6, 13, 19, 6];
    let report = finite_difference_check(&mut store, 1e-6, |tape, s| {
        let hv = tape.param(s, h);
        adaptive_loss(tape, s, &head, hv, &targets)
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

#[test]
fn adaptive_param_count_formula() {
    let mut rng = SeedStream::new(17);
    let mut store = ParamStore::<f32>::new();
    let (d, v) = (16, 100);
    let cutoffs = [10, 40, 100];
    let factors = [2, 4];
    let before = store.numel();
    AdaptiveHead::new(&mut store, d, v, &cutoffs, &factors, &mut rng).unwrap();
    // shortlist 16·(10+2) + tail0 16·8 + 8·30 + tail1 16·4 + 4·60
    let expected = 16 * 12 + 16 * 8 + 8 * 30 + 16 * 4 + 4 * 60;
    assert_eq!(store.numel() - before, expected);
    let spec = HeadSpec::Adaptive {
        cutoffs: cutoffs.to_vec(),
        tail_factors: factors.to_vec(),
    };
    assert_eq!(head_param_count(&spec, d, v), expected);
}

#[test]
fn adaptive_rejects_bad_cutoffs() {
    let mut rng = SeedStream::new(18);
    let mut store = ParamStore::<f64>::new();
    for (cut, fac) in [
        (vec![10, 5, 20], vec![1, 1]),
        (vec![5, 10], vec![1]),
        (vec![5, 20], vec![]),
        (vec![0, 20], vec![1]),
        (vec![5, 20], vec![0]),
    ] {
        let r = AdaptiveHead::new(&mut store, 4, 20, &cut, &fac, &mut rng);
        assert!(matches!(r, Err(Error::Config(_))), "{cut:?} {fac:?}");
    }
}

#[test]
fn head_param_count_table_values() {
    let d = 768;
    let k1024 = head_param_count(&HeadSpec::Vq { k: 1024, codebook_trainable: true }, d, 267_735);
    let k2048 = head_param_count(&HeadSpec::Vq { k: 2048, codebook_trainable: true }, d, 267_735);
    let full = head_param_count(&HeadSpec::Full, d, 267_735);
    assert_eq!(k1024, 786_432);
    assert_eq!(k2048, 1_572_864);
    assert_eq!(full, 205_620_480);
    assert!((k1024 as f64 / 1e6 - 0.78).abs() < 0.01);
    assert!((k2048 as f64 / 1e6 - 1.57).abs() < 0.01);
    assert!((full as f64 / 1e6 - 205.2).abs() / 205.2 < 0.01);
    assert_eq!(head_param_count(&HeadSpec::Lowrank { rank: 64 }, d, 1000), 768 * 64 + 64 * 1000);
}

#[test]
fn default_adaptive_cutoffs_scale_with_vocabulary() {
    assert_eq!(
        HeadSpec::default_adaptive(267_735),
        HeadSpec::Adaptive {
            cutoffs: vec![20_000, 80_000, 267_735],
            tail_factors: vec![2, 4]
        }
    );
}

fn build_pair(d: usize, v: usize, seed: u64) -> (ParamStore<f64>, OutputHead, OutputHead) {
    let mut rng = SeedStream::new(seed);
    let mut store = ParamStore::new();
    let full = OutputHead::build(&HeadSpec::Full, &mut store, d, v, None, &mut rng).unwrap();
    let vq = OutputHead::build(
        &HeadSpec::Vq { k: v, codebook_trainable: true },
        &mut store,
        d,
        v,
        Some(VocabMapping::identity(v)),
        &mut rng,
    )
    .unwrap();
    let src = store.value(full.param_ids()[0]).clone();
    store.get_mut(vq.param_ids()[0]).value = src;
    (store, full, vq)
}

#[test]
fn identity_vq_head_equals_full_head() {
    let (store, full, vq) = build_pair(5, 13, 19);
    let mut rng = SeedStream::new(20);
    let hm = random(&[6, 5], &mut rng, 1.0);
    let targets = [0, 12, 5, 5, 7, 1];
    let mut tape = Tape::new();
    let h = tape.leaf(hm.clone(), false);
    let lf = full.logits(&mut tape, &store, h).unwrap();
    let lv = vq.logits(&mut tape, &store, h).unwrap();
    assert_eq!(tape.value(lf).data(), tape.value(lv).data());
    let (pf, pv) = (tape.softmax(lf).unwrap(), tape.softmax(lv).unwrap());
    assert_eq!(tape.value(pf).data(), tape.value(pv).data());
    let a = full.loss(&mut tape, &store, h, &targets, VqLossPath::Fused).unwrap();
    let b = vq.loss(&mut tape, &store, h, &targets, VqLossPath::Naive).unwrap();
    let c = vq.loss(&mut tape, &store, h, &targets, VqLossPath::Fused).unwrap();
    assert_eq!(tape.scalar(a), tape.scalar(b));
    assert!((tape.scalar(a) - tape.scalar(c)).abs() <= 1e-15);

    let store32: ParamStore<f32> = {
        let mut s = ParamStore::new();
        for p in store.iter() {
            s.add(p.name.clone(), p.value.cast::<f32>(), p.decay);
        }
        s
    };
    let mut t32 = Tape::<f32>::new();
    let h32 = t32.leaf(hm.cast::<f32>(), false);
    let a32 = full.loss(&mut t32, &store32, h32, &targets, VqLossPath::Fused).unwrap();
    let c32 = vq.loss(&mut t32, &store32, h32, &targets, VqLossPath::Fused).unwrap();
    assert!((t32.scalar(a32) - t32.scalar(c32)).abs() <= 1e-6);
}

fn codebook_grad(path: VqLossPath, seed: u64) -> (Vec<f64>, f64) {
    let mut rng = SeedStream::new(seed);
    let map = random_mapping(17, 4, &mut rng);
    let mut store = ParamStore::new();
    let head = OutputHead::build(
        &HeadSpec::Vq { k: 4, codebook_trainable: true },
        &mut store,
        3,
        17,
        Some(map),
        &mut rng,
    )
    .unwrap();
    let c = head.param_ids()[0];
    store.get_mut(c).value = random(&[4, 3], &mut rng, 1.0);
    let h = store.add("h", random(&[6, 3], &mut rng, 1.0), true);
    let targets: Vec<usize> = (0..6).map(|_| rng.below(17)).collect();
    let report = finite_difference_check(&mut store, 1e-6, |tape, s| {
        let hv = tape.param(s, h);
        head.loss(tape, s, hv, &targets, path)
    })
    .unwrap();
    store.zero_grads();
    let mut tape = Tape::new();
    let hv = tape.param(&store, h);
    let l = head.loss(&mut tape, &store, hv, &targets, path).unwrap();
    tape.backward(l).unwrap();
    tape.accumulate_param_grads(&mut store);
    (store.get(c).grad.clone(), report.max_rel_error)
}

#[test]
fn codebook_gradients_fused_and_naive() {
    for seed in [21, 22, 23] {
        let (gf, ef) = codebook_grad(VqLossPath::Fused, seed);
        let (gn, en) = codebook_grad(VqLossPath::Naive, seed);
        assert!(ef <= 1e-5 && en <= 1e-5, "fd errors {ef} {en}");
        for (a, b) in gf.iter().zip(&gn) {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn code_logit_gradient_is_scatter_sum() {
    let mut rng = SeedStream::new(24);
    let map = random_mapping(15, 4, &mut rng);
    let mut tape = Tape::new();
    let lc = tape.leaf(random(&[3, 4], &mut rng, 1.0), true);
    let lv = scatter_logits(&mut tape, lc, &map).unwrap();
    let loss = tape.cross_entropy(lv, &[2, 14, 7]).unwrap();
    tape.backward(loss).unwrap();
    let glv = tape.grad(lv).unwrap().to_vec();
    let glc = tape.grad(lc).unwrap();
    for r in 0..3 {
        for j in 0..4 {
            let sum: f64 = map.members(j).map(|i| glv[r * 15 + i]).sum();
            assert!((glc[r * 4 + j] - sum).abs() <= 1e-15);
        }
    }
}

#[test]
fn codebook_flops_scale_linearly_in_k() {
    let (m, d) = (32, 16);
    let mut measured = Vec::new();
    for k in [8, 16, 32, 64] {
        let mut tape = Tape::<f32>::new();
        let h = tape.leaf(Tensor::zeros(&[m, d]), false);
        let c = tape.leaf(Tensor::zeros(&[k, d]), false);
        codebook_logits(&mut tape, c, h).unwrap();
        measured.push(tape.matmul_flops());
    }
    let unit = measured[0] / 8;
    for (i, k) in [8u64, 16, 32, 64].iter().enumerate() {
        assert_eq!(measured[i], unit * k);
    }
    assert_eq!(unit, 2 * (m * d) as u64);
}

#[test]
fn fixed_codebook_is_not_trainable() {
    let mut rng = SeedStream::new(25);
    let mut store = ParamStore::<f32>::new();
    let head = OutputHead::build(
        &HeadSpec::Vq { k: 2, codebook_trainable: false },
        &mut store,
        4,
        6,
        Some(VocabMapping::new(vec![0, 1, 0, 1, 0, 1], 2).unwrap()),
        &mut rng,
    )
    .unwrap();
    assert!(!store.get(head.param_ids()[0]).trainable);
    assert_eq!(
        head.spec(&store),
        HeadSpec::Vq { k: 2, codebook_trainable: false }
    );
    let mismatch = OutputHead::build(
        &HeadSpec::Vq { k: 3, codebook_trainable: true },
        &mut store,
        4,
        6,
        Some(VocabMapping::identity(6)),
        &mut rng,
    );
    assert!(matches!(mismatch, Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fused_equals_naive(seed in 0u64..10_000, m in 1usize..9, k in 1usize..7, extra in 0usize..20, d in 1usize..6) {
        let mut rng = SeedStream::new(seed);
        let v = k + extra;
        let map = random_mapping(v, k, &mut rng);
        let c = random(&[k, d], &mut rng, 2.0);
        let hm = random(&[m, d], &mut rng, 2.0);
        let targets: Vec<usize> = (0..m).map(|_| rng.below(v)).collect();
        let (f, n) = fused_and_naive(&c, &hm, &map, &targets);
        prop_assert!((f - n).abs() <= 1e-10, "{} vs {}", f, n);
    }

    #[test]
    fn shared_codes_have_equal_probability(seed in 0u64..10_000, k in 1usize..6, extra in 0usize..12) {
        let mut rng = SeedStream::new(seed);
        let v = k + extra;
        let map = random_mapping(v, k, &mut rng);
        let mut tape = Tape::new();
        let c = tape.leaf(random(&[k, 3], &mut rng, 2.0), false);
        let h = tape.leaf(random(&[2, 3], &mut rng, 2.0), false);
        let p = vq_probabilities(&mut tape, c, &map, h).unwrap();
        for r in 0..2 {
            let row = tape.value(p).row(r);
            for i in 0..v {
                let first = map.members(map.code(i)).next().unwrap();
                prop_assert_eq!(row[i], row[first]);
            }
        }
    }
}
