use dualtta::stats::{wilcoxon_signed_rank, WilcoxonMethod};
use dualtta::RngStream;

/// Two-sided p by enumerating all sign assignments of the given ranks.
fn enumerate_p(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len();
    let centre = ranks.iter().sum::<f64>() / 2.0;
    let dev = (w_plus - centre).abs();
    let mut hits = 0u64;
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if (w - centre).abs() >= dev - 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << n) as f64
}

#[test]
fn exact_branch_matches_enumeration_with_ties() {
    // |d| = 1,1,2,3,3,3,4,5,6,7,8,9 gives mid-ranks with two tie groups.
    let d = [1.0, -1.0, 2.0, 3.0, -3.0, 3.0, 4.0, -5.0, 6.0, 7.0, 8.0, -9.0];
    let ranks = [1.5, 1.5, 3.0, 5.0, 5.0, 5.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
    let res = wilcoxon_signed_rank(&d, &[0.0; 12]).unwrap();
    assert_eq!(res.method, WilcoxonMethod::Exact);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    assert_eq!(res.w_plus, w_plus);
    assert!((res.p_two_sided - enumerate_p(&ranks, w_plus)).abs() < 1e-12);
}

#[test]
fn exact_branch_matches_enumeration_on_random_samples() {
    let mut rng = RngStream::new(11);
    for n in 5..=14 {
        let a: Vec<f64> = (0..n).map(|_| rng.gaussian() + 0.3).collect();
        let b = vec![0.0; n];
        let res = wilcoxon_signed_rank(&a, &b).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| a[i].abs().total_cmp(&a[j].abs()));
        let mut ranks = vec![0.0; n];
        for (r, &i) in order.iter().enumerate() {
            ranks[i] = r as f64 + 1.0;
        }
        assert!((res.p_two_sided - enumerate_p(&ranks, res.w_plus)).abs() < 1e-12, "n={n}");
    }
}

#[test]
fn large_sample_approximation_tracks_permutation() {
    let mut rng = RngStream::new(3);
    for _ in 0..5 {
        let x: Vec<f64> = (0..25).map(|_| rng.gaussian()).collect();
        let y: Vec<f64> = (0..25).map(|_| rng.gaussian()).collect();
        let res = wilcoxon_signed_rank(&x, &y).unwrap();
        assert_eq!(res.method, WilcoxonMethod::NormalApprox);
        let d: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        let mut order: Vec<usize> = (0..25).collect();
        order.sort_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs()));
        let mut ranks = vec![0.0; 25];
        for (r, &i) in order.iter().enumerate() {
            ranks[i] = r as f64 + 1.0;
        }
        let centre = 25.0 * 26.0 / 4.0;
        let dev = (res.w_plus - centre).abs();
        let trials = 100_000;
        let hits = (0..trials)
            .filter(|_| {
                let w: f64 = ranks.iter().filter(|_| rng.bernoulli(0.5)).sum();
                (w - centre).abs() >= dev - 1e-9
            })
            .count();
        let perm = hits as f64 / trials as f64;
        assert!((res.p_two_sided - perm).abs() < 0.02, "{} vs {perm}", res.p_two_sided);
    }
}
