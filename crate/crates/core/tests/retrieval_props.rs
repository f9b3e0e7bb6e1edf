use oca_core::linalg::{mat_exp, skew_from_params, SkewParams};
use oca_core::retrieval::{
    decode_store, def1_check_with, equalize, evaluate, read_store_text, write_store,
    write_store_text, EvalOptions, FeatureRecord, FeatureStore, PadMode, RetrievalReport,
};
use oca_core::Exec;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

fn store_of(dim: usize, rows: &[(u32, Vec<f64>)], id_base: u64) -> FeatureStore {
    let records = rows
        .iter()
        .enumerate()
        .map(|(i, (label, f))| FeatureRecord {
            id: id_base + i as u64,
            label: *label,
            feature: f.clone(),
        })
        .collect();
    FeatureStore::new(dim, records).unwrap()
}

fn cos_dist(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

struct Oracle {
    map: f64,
    cmc1: f64,
    skipped: usize,
}

/// Rank-free reference: an item's rank is the number of gallery items that
/// sort at or before it by (distance, id).
fn oracle(q: &FeatureStore, g: &FeatureStore, self_exclusion: bool) -> Oracle {
    let (mut ap_sum, mut top1, mut used) = (0.0, 0usize, 0usize);
    for qr in q.records() {
        let cands: Vec<(f64, u64, u32)> = g
            .records()
            .iter()
            .filter(|gr| !(self_exclusion && gr.id == qr.id))
            .map(|gr| (cos_dist(&qr.feature, &gr.feature), gr.id, gr.label))
            .collect();
        let before = |a: &(f64, u64, u32), b: &(f64, u64, u32)| (a.0, a.1) <= (b.0, b.1);
        let positives: Vec<&(f64, u64, u32)> = cands.iter().filter(|c| c.2 == qr.label).collect();
        if positives.is_empty() {
            continue;
        }
        used += 1;
        let mut precisions = Vec::new();
        for p in &positives {
            let rank = cands.iter().filter(|c| before(c, p)).count();
            let hits = positives.iter().filter(|c| before(c, p)).count();
            precisions.push((rank, hits as f64 / rank as f64));
        }
        precisions.sort_by_key(|&(r, _)| r);
        ap_sum += precisions.iter().map(|&(_, p)| p).sum::<f64>() / positives.len() as f64;
        let best = cands
            .iter()
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .unwrap();
        top1 += usize::from(best.2 == qr.label);
    }
    let denom = used.max(1) as f64;
    Oracle {
        map: ap_sum / denom,
        cmc1: top1 as f64 / denom,
        skipped: q.len() - used,
    }
}

fn def1_oracle(old: &FeatureStore, new: &FeatureStore) -> (f64, f64) {
    let (mut s, mut s_ok, mut d, mut d_ok) = (0u64, 0u64, 0u64, 0u64);
    for (i, oi) in old.records().iter().enumerate() {
        for (j, oj) in old.records().iter().enumerate() {
            if i == j {
                continue;
            }
            let nj = new.records().iter().find(|r| r.id == oj.id).unwrap();
            let cross = cos_dist(&oi.feature, &nj.feature);
            let within = cos_dist(&oi.feature, &oj.feature);
            if oi.label == oj.label {
                s += 1;
                s_ok += u64::from(cross <= within);
            } else {
                d += 1;
                d_ok += u64::from(cross >= within);
            }
        }
    }
    let f = |ok: u64, n: u64| if n == 0 { 1.0 } else { ok as f64 / n as f64 };
    (f(s_ok, s), f(d_ok, d))
}

fn rows(
    n: std::ops::RangeInclusive<usize>,
    dim: usize,
) -> impl Strategy<Value = Vec<(u32, Vec<f64>)>> {
    prop::collection::vec(
        (
            0u32..3,
            prop::collection::vec(-1.0f64..1.0, dim)
                .prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3)),
        ),
        n,
    )
}

fn close(a: f64, b: f64) -> Result<(), TestCaseError> {
    prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    Ok(())
}

fn opts(self_exclusion: bool) -> EvalOptions {
    EvalOptions {
        self_exclusion,
        k_list: vec![1, 2, 3, 5, 10],
        exec: Exec::Sequential,
    }
}

fn same_metrics(a: &RetrievalReport, b: &RetrievalReport) -> Result<(), TestCaseError> {
    close(a.map_at_1, b.map_at_1)?;
    for (x, y) in a.cmc.iter().zip(&b.cmc) {
        close(x.value, y.value)?;
    }
    Ok(())
}

proptest! {
    #[test]
    fn metrics_match_brute_force(
        (q, g, shared) in (1usize..=4).prop_flat_map(|dim| (rows(1..=10, dim), rows(1..=10, dim), any::<bool>())),
        self_exclusion in any::<bool>(),
    ) {
        let dim = q[0].1.len();
        let qs = store_of(dim, &q, 0);
        // with shared ids the gallery reuses the query ids, so self-exclusion bites
        let gs = store_of(dim, &g, if shared { 0 } else { 100 });
        let want = oracle(&qs, &gs, self_exclusion);
        for exec in [Exec::Sequential, Exec::Parallel] {
            let got = evaluate(&qs, &gs, &EvalOptions { exec, ..opts(self_exclusion) }).unwrap();
            close(got.map_at_1, want.map)?;
            close(got.cmc_1, want.cmc1)?;
            prop_assert_eq!(got.num_skipped, want.skipped);
        }
    }

    #[test]
    fn def1_matches_brute_force(
        (old, noise) in (1usize..=4).prop_flat_map(|dim| (rows(2..=20, dim), prop::collection::vec(-0.5f64..0.5, 20 * dim))),
    ) {
        let dim = old[0].1.len();
        let new_rows: Vec<(u32, Vec<f64>)> = old
            .iter()
            .enumerate()
            .map(|(i, (l, f))| (*l, f.iter().enumerate().map(|(k, v)| v + noise[i * dim + k]).collect()))
            .collect();
        prop_assume!(new_rows.iter().all(|(_, f)| f.iter().any(|x| x.abs() > 1e-9)));
        let os = store_of(dim, &old, 0);
        // reversed record order: the check must align by id
        let mut ns = store_of(dim, &new_rows, 0).records().to_vec();
        ns.reverse();
        let ns = FeatureStore::new(dim, ns).unwrap();
        let (same, diff) = def1_oracle(&os, &ns);
        for exec in [Exec::Sequential, Exec::Parallel] {
            let got = def1_check_with(&os, &ns, u64::MAX, 0, exec).unwrap();
            prop_assert_eq!(got.same_class_pairs_ok_fraction, same);
            prop_assert_eq!(got.diff_class_pairs_ok_fraction, diff);
            prop_assert!(!got.sampled);
        }
    }

    #[test]
    fn metrics_ignore_positive_rescaling(
        q in rows(1..=8, 3), g in rows(1..=8, 3), idx in 0usize..8, factor in 0.01f64..100.0,
    ) {
        let qs = store_of(3, &q, 0);
        let gs = store_of(3, &g, 50);
        let mut g2 = g.clone();
        let k = idx % g2.len();
        g2[k].1.iter_mut().for_each(|v| *v *= factor);
        let base = evaluate(&qs, &gs, &opts(true)).unwrap();
        let scaled = evaluate(&qs, &store_of(3, &g2, 50), &opts(true)).unwrap();
        same_metrics(&base, &scaled)?;
    }

    #[test]
    fn metrics_ignore_common_rotation(
        q in rows(1..=8, 4), g in rows(1..=8, 4), skew in prop::collection::vec(-2.0f64..2.0, 6),
    ) {
        let rot = mat_exp(&skew_from_params(&SkewParams::new(4, skew).unwrap()).unwrap()).unwrap();
        let turn = |rs: &[(u32, Vec<f64>)]| -> Vec<(u32, Vec<f64>)> {
            rs.iter().map(|(l, f)| (*l, rot.mul_vec(f).unwrap())).collect()
        };
        let base = evaluate(&store_of(4, &q, 0), &store_of(4, &g, 50), &opts(true)).unwrap();
        let turned = evaluate(&store_of(4, &turn(&q), 0), &store_of(4, &turn(&g), 50), &opts(true)).unwrap();
        same_metrics(&base, &turned)?;
    }

    #[test]
    fn gallery_order_is_irrelevant(q in rows(1..=8, 2), g in rows(1..=8, 2), rot in 0usize..8) {
        let gs = store_of(2, &g, 0);
        let mut recs = gs.records().to_vec();
        let k = rot % recs.len();
        recs.rotate_left(k);
        recs.reverse();
        let permuted = FeatureStore::new(2, recs).unwrap();
        let qs = store_of(2, &q, 0);
        let a = evaluate(&qs, &gs, &opts(true)).unwrap();
        let b = evaluate(&qs, &permuted, &opts(true)).unwrap();
        prop_assert_eq!(a.map_at_1, b.map_at_1);
        prop_assert_eq!(a.cmc, b.cmc);
    }

    #[test]
    fn wider_queries_rank_alike_under_both_paddings(q in rows(1..=8, 5), g in rows(1..=8, 3)) {
        prop_assume!(q.iter().all(|(_, f)| f[..3].iter().any(|x| x.abs() > 1e-3)));
        let (qs, gs) = (store_of(5, &q, 0), store_of(3, &g, 0));
        let (qz, gz) = equalize(&qs, &gs, PadMode::Zero).unwrap();
        let (qt, gt) = equalize(&qs, &gs, PadMode::Truncate).unwrap();
        prop_assert_eq!((qz.dim(), qt.dim()), (5, 3));
        let zero = evaluate(&qz, &gz, &opts(true)).unwrap();
        let cut = evaluate(&qt, &gt, &opts(true)).unwrap();
        same_metrics(&zero, &cut)?;
    }

    #[test]
    fn cmc_is_monotone_and_bounded(q in rows(1..=10, 3), g in rows(1..=10, 3)) {
        let r = evaluate(&store_of(3, &q, 0), &store_of(3, &g, 0), &opts(true)).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.map_at_1));
        for w in r.cmc.windows(2) {
            prop_assert!(w[0].value <= w[1].value);
        }
        for p in &r.cmc {
            prop_assert!((0.0..=1.0).contains(&p.value));
        }
        // CMC at the full gallery depth covers every evaluated query
        let deep = evaluate(
            &store_of(3, &q, 0),
            &store_of(3, &g, 0),
            &EvalOptions { k_list: vec![g.len() + 1], ..opts(true) },
        ).unwrap();
        if deep.num_queries > deep.num_skipped {
            prop_assert_eq!(deep.cmc.last().unwrap().value, 1.0);
        }
    }

    #[test]
    fn binary_store_round_trips_at_f32(rs in rows(0..=12, 5)) {
        let s = store_of(5, &rs, 7);
        let mut buf = Vec::new();
        write_store(&s, &mut buf).unwrap();
        let back = decode_store(&buf).unwrap();
        prop_assert_eq!(&back, &s.rounded_f32());
        let mut again = Vec::new();
        write_store(&back, &mut again).unwrap();
        prop_assert_eq!(buf, again);
    }

    #[test]
    fn text_store_round_trips_exactly(rs in rows(1..=12, 3)) {
        let s = store_of(3, &rs, 0);
        let mut buf = Vec::new();
        write_store_text(&s, &mut buf).unwrap();
        prop_assert_eq!(read_store_text(&buf[..]).unwrap(), s);
    }
}

#[test]
fn twenty_small_instances_match_exhaustively() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(20);
    for _ in 0..20 {
        let dim = rng.random_range(2..=5);
        let mut draw = |n: usize| -> Vec<(u32, Vec<f64>)> {
            (0..n)
                .map(|_| {
                    (
                        rng.random_range(0..3),
                        (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    )
                })
                .collect()
        };
        let q = draw(10);
        let g = draw(10);
        let qs = store_of(dim, &q, 0);
        let gs = store_of(dim, &g, 0);
        let got = evaluate(&qs, &gs, &opts(true)).unwrap();
        let want = oracle(&qs, &gs, true);
        assert!((got.map_at_1 - want.map).abs() <= 1e-12);
        assert_eq!(got.cmc_1, want.cmc1);
        let drift: Vec<(u32, Vec<f64>)> = q
            .iter()
            .map(|(l, f)| {
                (
                    *l,
                    f.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect(),
                )
            })
            .collect();
        let ns = store_of(dim, &drift, 0);
        let d1 = def1_check_with(&qs, &ns, u64::MAX, 0, Exec::Parallel).unwrap();
        let (s, d) = def1_oracle(&qs, &ns);
        assert_eq!(
            (
                d1.same_class_pairs_ok_fraction,
                d1.diff_class_pairs_ok_fraction
            ),
            (s, d)
        );
    }
}
