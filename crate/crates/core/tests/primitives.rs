//! Every differentiable primitive against central finite differences at
//! random smooth points, plus the normalization round trip.

use dualtta::ndgrad::{grad_check, Axes, BN_EPS};
use dualtta::{NodeId, Result, RngStream, Tape, Tensor};
use proptest::prelude::*;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Reduces `y` to a scalar with fixed, non-uniform weights so that no
/// coordinate of the gradient cancels by symmetry.
fn weighted_sum(tape: &mut Tape, y: NodeId, seed: u64) -> Result<NodeId> {
    let shape = tape.value(y).shape().to_vec();
    let w = RngStream::new(seed).split("weights").gaussian_tensor(&shape);
    let w = tape.leaf(w);
    let prod = tape.mul(y, w)?;
    tape.reduce_sum(prod, Axes::All)
}

fn gauss(shape: &[usize], seed: u64) -> Tensor {
    RngStream::new(seed).gaussian_tensor(shape)
}

/// Gaussian values pushed at least `gap` away from zero.
fn away_from_zero(shape: &[usize], seed: u64, gap: f64) -> Tensor {
    gauss(shape, seed).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

fn check<F>(f: F, params: &[Tensor]) -> f64
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    grad_check(f, params, STEP).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn add_sub_mul(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..5) {
        let a = gauss(&[rows, cols], seed);
        let b = gauss(&[rows, cols], seed ^ 1);
        let bias = gauss(&[cols], seed ^ 2);
        let err = check(|t, p| {
            let s = t.add(p[0], p[1])?;
            let d = t.sub(s, p[1])?;
            let m = t.mul(d, p[1])?;
            let m = t.add(m, p[2])?;
            weighted_sum(t, m, seed)
        }, &[a, b, bias]);
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn scale_and_exp(seed in any::<u64>(), k in -3.0f64..3.0) {
        let a = gauss(&[3, 4], seed).map(|v| v * 0.5);
        let err = check(|t, p| {
            let s = t.scale(p[0], k)?;
            let e = t.exp(s)?;
            weighted_sum(t, e, seed)
        }, &[a]);
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn matmul(seed in any::<u64>(), n in 1usize..5, k in 1usize..6, m in 1usize..5) {
        let a = gauss(&[n, k], seed);
        let b = gauss(&[k, m], seed ^ 3);
        let err = check(|t, p| {
            let y = t.matmul(p[0], p[1])?;
            weighted_sum(t, y, seed)
        }, &[a, b]);
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn conv2d(seed in any::<u64>(), cin in 1usize..3, cout in 1usize..3, pad in 0usize..2) {
        let x = gauss(&[2, cin, 5, 5], seed);
        let w = gauss(&[cout, cin, 3, 3], seed ^ 4);
        let b = gauss(&[cout], seed ^ 5);
        let err = check(|t, p| {
            let y = t.conv2d(p[0], p[1], Some(p[2]), pad)?;
            weighted_sum(t, y, seed)
        }, &[x, w, b]);
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn relu_off_the_kink(seed in any::<u64>()) {
        let x = away_from_zero(&[3, 5], seed, 0.01);
        let err = check(|t, p| {
            let y = t.relu(p[0])?;
            weighted_sum(t, y, seed)
        }, &[x]);
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn pooling(seed in any::<u64>(), c in 1usize..3, side in 1usize..4) {
        let x = gauss(&[2, c, 2 * side, 2 * side], seed);
        let err = check(|t, p| {
            let a = t.avg_pool2d(p[0])?;
            let g = t.global_avg_pool(a)?;
            let s = weighted_sum(t, a, seed)?;
            let h = weighted_sum(t, g, seed ^ 6)?;
            t.add(s, h)
        }, &[x]);
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn channel_affine(seed in any::<u64>(), c in 1usize..4, spatial in any::<bool>()) {
        let shape = if spatial { vec![2, c, 3, 3] } else { vec![3, c] };
        let x = gauss(&shape, seed);
        let g = gauss(&[c], seed ^ 7);
        let b = gauss(&[c], seed ^ 8);
        let err = check(|t, p| {
            let y = t.channel_affine(p[0], p[1], p[2])?;
            weighted_sum(t, y, seed)
        }, &[x, g, b]);
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn batch_normalize(seed in any::<u64>(), c in 1usize..3) {
        let x = gauss(&[3, c, 3, 3], seed);
        let err = check(|t, p| {
            let y = t.batch_normalize(p[0])?;
            weighted_sum(t, y, seed)
        }, &[x]);
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn log_softmax(seed in any::<u64>(), rows in 1usize..5, k in 2usize..6) {
        let x = gauss(&[rows, k], seed);
        let err = check(|t, p| {
            let y = t.log_softmax(p[0])?;
            weighted_sum(t, y, seed)
        }, &[x]);
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn log_clamped_on_positive_inputs(seed in any::<u64>()) {
        let x = gauss(&[4, 3], seed).map(|v| 0.1 + v.abs());
        let err = check(|t, p| {
            let y = t.log_clamped(p[0])?;
            weighted_sum(t, y, seed)
        }, &[x]);
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn reductions(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..5) {
        let x = gauss(&[rows, cols], seed);
        let err = check(|t, p| {
            let last = t.reduce_mean(p[0], Axes::Last)?;
            let s = weighted_sum(t, last, seed)?;
            let all = t.reduce_sum(p[0], Axes::All)?;
            let all = t.scale(all, 0.3)?;
            t.add(s, all)
        }, &[x]);
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn select_rows(seed in any::<u64>(), picks in proptest::collection::vec(0usize..4, 1..6)) {
        let x = gauss(&[4, 3], seed);
        let err = check(|t, p| {
            let y = t.select_rows(p[0], picks.clone())?;
            weighted_sum(t, y, seed)
        }, &[x]);
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn softmax_entropy(seed in any::<u64>(), rows in 1usize..5, k in 2usize..5) {
        let x = gauss(&[rows, k], seed);
        let err = check(|t, p| {
            let (ent, _) = t.softmax_entropy(p[0])?;
            weighted_sum(t, ent, seed)
        }, &[x]);
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn normalization_round_trip(seed in any::<u64>(), c in 1usize..4, scale in 0.01f64..100.0) {
        let x = gauss(&[4, c, 3, 3], seed).map(|v| v * scale + 2.0);
        let mut tape = Tape::new();
        let id = tape.leaf(x.clone());
        let y = tape.batch_normalize(id).unwrap();
        let xhat = tape.value(y).clone();

        let hw = 9;
        let n = (4 * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (p, plane) in x.data().chunks(hw).enumerate() {
            mean[p % c] += plane.iter().sum::<f64>() / n;
        }
        for (p, plane) in x.data().chunks(hw).enumerate() {
            var[p % c] += plane.iter().map(|v| (v - mean[p % c]).powi(2)).sum::<f64>() / n;
        }
        for (p, (orig, norm)) in x.data().chunks(hw).zip(xhat.data().chunks(hw)).enumerate() {
            let ch = p % c;
            let sd = (var[ch] + BN_EPS).sqrt();
            for (o, z) in orig.iter().zip(norm) {
                let back = z * sd + mean[ch];
                prop_assert!((back - o).abs() <= 1e-9 * o.abs().max(1.0), "{back} vs {o}");
            }
        }
    }
}
