use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::BBox;
use crate::oracle;

fn small_cfg(heads: usize) -> ModelConfig {
    ModelConfig {
        d_a: 5,
        d_l: 4,
        d_m: 8,
        d_r: 4,
        d_att: 6,
        heads: (0..heads).map(|h| 0.5 + 0.1 * h as f64).collect(),
        cap: 50,
    }
}

fn img() -> ImageSize {
    ImageSize::new(200.0, 150.0).unwrap()
}

fn random_cands(n: usize, d_a: usize, seed: u64) -> Vec<ScoredProposal> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|id| {
            let x = r.random_range(0.0..150.0);
            let y = r.random_range(0.0..100.0);
            let w = r.random_range(5.0..50.0);
            let h = r.random_range(5.0..50.0);
            ScoredProposal {
                bbox: BBox::new(x, y, x + w, y + h),
                class_id: 0,
                s0: r.random_range(0.0..1.0),
                feat: (0..d_a).map(|_| r.random_range(-1.0..1.0)).collect(),
                id,
            }
        })
        .collect()
}

/// Randomizes every weight and bias so no path is trivially zero.
fn perturbed(cfg: ModelConfig, seed: u64, scale: f64) -> Model {
    let mut m = Model::new(cfg, seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed + 100);
    for p in m.params.iter_mut() {
        for v in p.value.data_mut() {
            *v = r.random_range(-scale..scale);
        }
    }
    m
}

fn rows(t: &Tensor) -> oracle::Mat {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn assert_close(a: &Tensor, b: &oracle::Mat, tol: f64) {
    assert_eq!(a.rows(), b.len());
    for (r, row) in b.iter().enumerate() {
        for (x, y) in a.row_slice(r).iter().zip(row) {
            assert!((x - y).abs() < tol, "row {r}: {x} vs {y}");
        }
    }
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    let mut c = small_cfg(1);
    c.d_m = 9;
    assert!(c.validate().is_err());
    let mut c = small_cfg(1);
    c.heads.clear();
    assert!(c.validate().is_err());
    let mut c = small_cfg(1);
    c.d_r = 6;
    assert!(c.validate().is_err());
}

#[test]
fn sort_candidates_examples() {
    let mut c = random_cands(3, 5, 1);
    c[0].s0 = 0.2;
    c[1].s0 = 0.9;
    c[2].s0 = 0.5;
    assert_eq!(sort_candidates(&c, 10).order, vec![1, 2, 0]);

    let mut tie = random_cands(2, 5, 2);
    tie[0].s0 = 0.5;
    tie[1].s0 = 0.5;
    tie[0].bbox.x1 = 9.0;
    tie[1].bbox.x1 = 3.0;
    assert_eq!(sort_candidates(&tie, 10).order, vec![1, 0]);

    let many = random_cands(13, 5, 3);
    let s = sort_candidates(&many, 10);
    assert_eq!(s.order.len(), 10);
    assert_eq!(s.truncated.len(), 3);
    let min_kept = s.order.iter().map(|&i| many[i].s0).fold(1.0, f64::min);
    assert!(s.truncated.iter().all(|&i| many[i].s0 <= min_kept));
}

#[test]
fn encoder_and_decoder_basics() {
    let m = perturbed(small_cfg(1), 3, 0.7);
    let c = random_cands(3, 5, 4);
    let seq: Vec<&ScoredProposal> = c.iter().collect();

    let mut g = Graph::new(&m.params);
    let f_l = embed_sequence(&mut g, &seq, img(), &m.ids.embed).unwrap();
    let (f_m, finals) = m.ids.encode(&mut g, f_l).unwrap();
    let zero = g.input(Tensor::zeros(&[1, 4]));
    let f_h_zero = m.ids.decode(&mut g, f_l, (zero, zero)).unwrap();
    let f_h = m.ids.decode(&mut g, f_l, finals).unwrap();

    let ps = &m.params;
    let enc = (
        oracle::ScalarGru::new(ps, &m.ids.encoder.fwd),
        oracle::ScalarGru::new(ps, &m.ids.encoder.bwd),
    );
    let dec = (
        oracle::ScalarGru::new(ps, &m.ids.decoder.fwd),
        oracle::ScalarGru::new(ps, &m.ids.decoder.bwd),
    );
    let fl = rows(g.value(f_l));
    let z = vec![0.0; 4];
    let (want_m, ff, fb) = oracle::bigru(&enc.0, &enc.1, &fl, &z, &z);
    assert_close(g.value(f_m), &want_m, 1e-13);
    let (want_h, _, _) = oracle::bigru(&dec.0, &dec.1, &fl, &ff, &fb);
    assert_close(g.value(f_h), &want_h, 1e-13);
    let (want_h0, _, _) = oracle::bigru(&dec.0, &dec.1, &fl, &z, &z);
    assert_close(g.value(f_h_zero), &want_h0, 1e-13);

    // N = 1: encoder output is one step of each direction from zero.
    let mut g = Graph::new(&m.params);
    let f_l = embed_sequence(&mut g, &seq[..1], img(), &m.ids.embed).unwrap();
    let (f_m, _) = m.ids.encode(&mut g, f_l).unwrap();
    let x = g.value(f_l).row_slice(0).to_vec();
    let want = [enc.0.step(&x, &z), enc.1.step(&x, &z)].concat();
    assert_close(g.value(f_m), &vec![want], 1e-14);
}

#[test]
fn decoder_with_zero_finals_equals_encoder_when_weights_match() {
    let mut m = perturbed(small_cfg(1), 5, 0.6);
    // Copy encoder weights into the decoder: identical structure then gives
    // identical output from identical (zero) initial states.
    let pairs = [
        (m.ids.encoder.fwd, m.ids.decoder.fwd),
        (m.ids.encoder.bwd, m.ids.decoder.bwd),
    ];
    for (src, dst) in pairs {
        for (a, b) in [
            (src.w_z, dst.w_z),
            (src.w_r, dst.w_r),
            (src.w_h, dst.w_h),
            (src.u_z, dst.u_z),
            (src.u_r, dst.u_r),
            (src.u_h, dst.u_h),
            (src.b_z, dst.b_z),
            (src.b_r, dst.b_r),
            (src.b_h, dst.b_h),
        ] {
            let v = m.params.value(a).clone();
            m.params.get_mut(b).value = v;
        }
    }
    let c = random_cands(4, 5, 6);
    let seq: Vec<&ScoredProposal> = c.iter().collect();
    let mut g = Graph::new(&m.params);
    let f_l = embed_sequence(&mut g, &seq, img(), &m.ids.embed).unwrap();
    let (f_m, _) = m.ids.encode(&mut g, f_l).unwrap();
    let zero = g.input(Tensor::zeros(&[1, 4]));
    let f_h = m.ids.decode(&mut g, f_l, (zero, zero)).unwrap();
    assert_eq!(g.value(f_m), g.value(f_h));
}

#[test]
fn zero_weights_zero_everything_downstream() {
    let mut m = Model::new(small_cfg(2), 1).unwrap();
    m.params.zero_values();
    let c = random_cands(5, 5, 7);
    let t = m.forward_trace(&c, img()).unwrap();
    assert!(t.f_m.data().iter().all(|&v| v == 0.0));
    assert!(t.f_h.data().iter().all(|&v| v == 0.0));
    assert!(t.f_v.data().iter().all(|&v| v == 0.0));
    assert!(t.f_t.data().iter().all(|&v| v == 0.0));
    assert!(t.f_c.data().iter().all(|&v| v == 0.0));
    assert!(t.f_z.data().iter().all(|&v| v == 0.5));
    assert!(t.s1.data().iter().all(|&v| v == 0.5));
    assert!(t.s_a.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    assert_eq!(m.forward(&c, img()).unwrap(), vec![0.5; 5]);
}

#[test]
fn attention_uniform_when_scorer_is_zero() {
    let mut m = perturbed(small_cfg(1), 8, 0.8);
    m.params.get_mut(m.ids.w_s).value.data_mut().fill(0.0);
    for n in [1usize, 3, 7] {
        let t = m.forward_trace(&random_cands(n, 5, 9), img()).unwrap();
        assert_eq!(t.s_a.shape(), &[n, n]);
        for &v in t.s_a.data() {
            assert!((v - 1.0 / n as f64).abs() < 1e-12);
        }
    }
    let t = m.forward_trace(&random_cands(1, 5, 9), img()).unwrap();
    assert_eq!(t.s_a.data(), &[1.0]);
}

#[test]
fn attention_and_gate_match_dense_oracle() {
    let m = perturbed(small_cfg(2), 10, 0.8);
    let t = m.forward_trace(&random_cands(3, 5, 11), img()).unwrap();
    let (s_a, glob) = oracle::attention(&m, &rows(&t.f_m), &rows(&t.f_h));
    assert_close(&t.s_a, &s_a, 1e-13);
    assert_close(&t.f_glob, &glob, 1e-13);
    let f_c = oracle::gate(&m, &rows(&t.f_l), &rows(&t.f_h), &rows(&t.f_glob));
    assert_close(&t.f_c, &f_c, 1e-13);
    let s1 = oracle::decide(&m, &rows(&t.f_c));
    assert_close(&t.s1, &s1, 1e-13);
}

#[test]
fn gate_passes_tanh_of_high_grade_feature() {
    let mut m = perturbed(small_cfg(1), 12, 0.5);
    let (d_l, d_m) = (4, 8);
    // W_C1 selects the f_H block; everything else zero.
    let mut w1 = Tensor::zeros(&[d_m, d_l + d_m]);
    for i in 0..d_m {
        w1.data_mut()[i * (d_l + d_m) + d_l + i] = 1.0;
    }
    m.params.get_mut(m.ids.w_c1).value = w1;
    m.params.get_mut(m.ids.b_c1).value.data_mut().fill(0.0);
    // Zero f_glob still yields f_V = b_C3; zero that too.
    m.params.get_mut(m.ids.b_c3).value.data_mut().fill(0.0);
    let mut g = Graph::new(&m.params);
    let f_l = g.input(Tensor::filled(&[2, d_l], 0.3));
    let f_h = g.input(Tensor::from_rows(&[vec![0.5; d_m], vec![-0.2; d_m]]));
    let f_glob = g.input(Tensor::zeros(&[2, d_m]));
    let (_, _, _, f_c) = m.ids.context_gate(&mut g, f_l, f_h, f_glob);
    let got = g.value(f_c);
    for (k, &v) in got.data().iter().enumerate() {
        let want = if k < d_m { 0.5f64.tanh() } else { (-0.2f64).tanh() };
        assert!((v - want).abs() < 1e-15);
    }
}

#[test]
fn decision_heads() {
    let mut m = perturbed(small_cfg(3), 13, 0.5);
    m.params.get_mut(m.ids.w_d).value.data_mut().fill(0.0);
    m.params.get_mut(m.ids.b_d).value.data_mut().fill(0.0);
    let t = m.forward_trace(&random_cands(4, 5, 14), img()).unwrap();
    assert!(t.s1.data().iter().all(|&v| v == 0.5));

    let mut m = perturbed(small_cfg(3), 15, 0.5);
    let row: Vec<f64> = m.params.value(m.ids.w_d).row_slice(0).to_vec();
    m.params.get_mut(m.ids.w_d).value = Tensor::from_rows(&[row.clone(), row.clone(), row]);
    m.params.get_mut(m.ids.b_d).value.data_mut().fill(0.1);
    let t = m.forward_trace(&random_cands(4, 5, 16), img()).unwrap();
    for r in 0..4 {
        let s = t.s1.row_slice(r);
        assert_eq!(s[0], s[1]);
        assert_eq!(s[1], s[2]);
    }
}

#[test]
fn single_candidate_single_head() {
    let m = perturbed(small_cfg(1), 17, 0.5);
    let c = random_cands(1, 5, 18);
    let t = m.forward_trace(&c, img()).unwrap();
    let w = m.params.value(m.ids.w_d).data();
    let b = m.params.value(m.ids.b_d).data()[0];
    let logit: f64 = w.iter().zip(t.f_c.data()).map(|(a, b)| a * b).sum::<f64>() + b;
    let got = m.forward(&c, img()).unwrap()[0];
    assert!((got - oracle::sig(logit)).abs() < 1e-15);
}

#[test]
fn forward_matches_full_scalar_oracle() {
    let m = perturbed(small_cfg(2), 19, 0.6);
    let c = random_cands(5, 5, 20);
    let sorted = sort_candidates(&c, 50);
    let seq: Vec<&ScoredProposal> = sorted.order.iter().map(|&i| &c[i]).collect();
    let want = oracle::forward_sorted(&m, &seq, img());
    let got = m.forward(&c, img()).unwrap();
    for (row, &i) in sorted.order.iter().enumerate() {
        let mean = (want[row][0] + want[row][1]) / 2.0;
        assert!((got[i] - mean).abs() < 1e-13);
    }
}

#[test]
fn forward_is_permutation_invariant_by_id() {
    let m = perturbed(small_cfg(2), 21, 0.6);
    let c = random_cands(7, 5, 22);
    let a = m.forward(&c, img()).unwrap();
    let mut shuffled = c.clone();
    shuffled.reverse();
    shuffled.swap(1, 4);
    let b = m.forward(&shuffled, img()).unwrap();
    for (p, s) in shuffled.iter().zip(&b) {
        assert!((a[p.id] - s).abs() <= 1e-12);
    }
}

#[test]
fn truncated_candidates_score_zero() {
    let mut cfg = small_cfg(1);
    cfg.cap = 4;
    let m = perturbed(cfg, 23, 0.5);
    let c = random_cands(6, 5, 24);
    let s = m.forward(&c, img()).unwrap();
    let sorted = sort_candidates(&c, 4);
    for &i in &sorted.truncated {
        assert_eq!(s[i], 0.0);
    }
    for &i in &sorted.order {
        assert!(s[i] > 0.0 && s[i] < 1.0);
    }
    assert!(m.forward(&[], img()).unwrap().is_empty());
}

#[test]
fn final_score_examples() {
    assert!((final_score(0.8, (0.6 + 0.4) / 2.0) - 0.4).abs() < 1e-15);
    assert_eq!(final_score(0.7, 1.0), 0.7);
    assert_eq!(final_score(0.0, 0.9), 0.0);
}

#[test]
fn attention_rows_sum_to_one_on_random_forwards() {
    for seed in 0..20 {
        let m = perturbed(small_cfg(1), 30 + seed, 1.5);
        let n = 1 + (seed as usize % 9);
        let t = m.forward_trace(&random_cands(n, 5, seed), img()).unwrap();
        for r in 0..n {
            let row = t.s_a.row_slice(r);
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(t.s1.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn duplicated_heads_average_to_the_single_head_bitwise() {
    let single = perturbed(small_cfg(1), 40, 0.7);
    let mut multi_cfg = small_cfg(1);
    multi_cfg.heads = vec![0.5, 0.6, 0.7, 0.8];
    let mut multi = Model::new(multi_cfg, 40).unwrap();
    for p in single.params.iter() {
        let id = multi.params.find(&p.name).unwrap();
        if p.name.starts_with("decide.") {
            let h = 4;
            let mut data = Vec::new();
            for _ in 0..h {
                data.extend_from_slice(p.value.data());
            }
            let shape = multi.params.value(id).shape().to_vec();
            multi.params.get_mut(id).value = Tensor::new(&shape, data);
        } else {
            multi.params.get_mut(id).value = p.value.clone();
        }
    }
    let c = random_cands(6, 5, 41);
    let a = single.forward(&c, img()).unwrap();
    let b = multi.forward(&c, img()).unwrap();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
               b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn composed_forward_gradients_match_finite_differences() {
    for seed in 0..4 {
        let report = composed_grad_check(seed, 1e-4, 1e-4).unwrap();
        assert!(report.passed, "seed {seed}: {report}");
        assert!(report.coords_checked > 500);
    }
}

#[test]
fn checkpoint_round_trip() {
    let m = perturbed(small_cfg(2), 60, 0.5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path, &[("stage".into(), "II".into())]).unwrap();
    let (back, meta) = Model::load(&path).unwrap();
    assert_eq!(back, m);
    assert!(meta.iter().any(|(k, v)| k == "stage" && v == "II"));

    let mut wrong = m.params.clone();
    let id = wrong.find("attn.w_s").unwrap();
    wrong.get_mut(id).value = Tensor::zeros(&[1, 5]);
    assert!(Model::from_params(small_cfg(2), wrong).is_err());
}

