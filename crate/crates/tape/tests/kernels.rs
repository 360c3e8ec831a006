use proptest::prelude::*;
use vocoguard_tape::kernels::{self, Conv1dDims};

fn naive_conv1d(d: Conv1dDims, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let lo = d.out_len();
    let mut y = vec![0.0; d.batch * d.out_ch * lo];
    for b in 0..d.batch {
        for co in 0..d.out_ch {
            for t in 0..lo {
                let mut acc = bias[co];
                for ci in 0..d.in_ch {
                    for k in 0..d.kernel {
                        let at = t as isize + k as isize - d.pad as isize;
                        if at >= 0 && (at as usize) < d.len {
                            acc += w[(co * d.in_ch + ci) * d.kernel + k] * x[(b * d.in_ch + ci) * d.len + at as usize];
                        }
                    }
                }
                y[(b * d.out_ch + co) * lo + t] = acc;
            }
        }
    }
    y
}

proptest! {
    #[test]
    fn dot_and_sum_match_sequential(v in prop::collection::vec(-10.0f64..10.0, 0..40)) {
        let w: Vec<f64> = v.iter().map(|x| x * 0.5 - 1.0).collect();
        let dot: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        prop_assert!((kernels::dot(&v, &w) - dot).abs() <= 1e-9 * (1.0 + dot.abs()));
        let s: f64 = v.iter().sum();
        prop_assert!((kernels::sum(&v) - s).abs() <= 1e-9 * (1.0 + s.abs()));
    }

    #[test]
    fn conv1d_matches_direct_sum(
        batch in 1usize..3,
        in_ch in 1usize..3,
        out_ch in 1usize..3,
        len in 3usize..12,
        kernel in 1usize..4,
        pad in 0usize..2,
        seed in 0u64..1000,
    ) {
        prop_assume!(len + 2 * pad >= kernel);
        let d = Conv1dDims { batch, in_ch, out_ch, len, kernel, pad };
        let gen = |n: usize, salt: u64| -> Vec<f64> {
            (0..n).map(|i| (((i as u64 + 1) * 2654435761 + seed * 97 + salt) % 1000) as f64 / 500.0 - 1.0).collect()
        };
        let x = gen(batch * in_ch * len, 1);
        let w = gen(out_ch * in_ch * kernel, 2);
        let bias = gen(out_ch, 3);
        let mut y = vec![0.0; batch * out_ch * d.out_len()];
        kernels::conv1d_forward(d, &x, &w, Some(&bias), &mut y);
        let want = naive_conv1d(d, &x, &w, &bias);
        for (a, b) in y.iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
