//! Deferred gradient validation: non-finite check, global norm, clipping.

use super::{AdamHyper, Verdict};
use crate::par::Exec;

/// Sum of squares of one bucket, sequential in element order, in `f64`.
fn bucket_sum_squares(g: &[f32], inv_scale: Option<f32>) -> f64 {
    let mut acc = 0.0f64;
    for &x in g {
        let x = match inv_scale {
            Some(s) => unscale(x, s),
            None => x,
        } as f64;
        acc += x * x;
    }
    acc
}

/// Gradient with the loss scale divided out.
#[inline]
pub fn unscale(g: f32, loss_scale: f32) -> f32 {
    g / loss_scale
}

/// L2 norm over all buckets: per-bucket sequential sums of squares, added
/// in bucket order, then the square root.
pub fn global_grad_norm(buckets: &[&[f32]]) -> f64 {
    global_grad_norm_with(buckets, Exec::Sequential)
}

/// Same reduction with the per-bucket partials computed under `exec`; the
/// partials are always combined in bucket order.
pub fn global_grad_norm_with(buckets: &[&[f32]], exec: Exec) -> f64 {
    combine(exec.map(buckets, |b| bucket_sum_squares(b, None)))
}

fn combine(partials: Vec<f64>) -> f64 {
    partials.into_iter().fold(0.0, |acc, p| acc + p).sqrt()
}

/// Checks loss-scaled gradients. Non-finite values are looked for before
/// unscaling; the norm is taken of the unscaled gradients and clipping
/// triggers only when it is strictly above the threshold.
pub fn validate(grad_buckets: &[&[f32]], hyper: &AdamHyper, loss_scale: f32) -> Verdict {
    validate_with(grad_buckets, hyper, loss_scale, Exec::Sequential)
}

pub fn validate_with(
    grad_buckets: &[&[f32]],
    hyper: &AdamHyper,
    loss_scale: f32,
    exec: Exec,
) -> Verdict {
    if grad_buckets
        .iter()
        .any(|b| b.iter().any(|x| !x.is_finite()))
    {
        return Verdict::SkipNonFinite;
    }
    let Some(clip) = hyper.clip_norm else {
        return Verdict::Proceed;
    };
    let norm = combine(exec.map(grad_buckets, |b| bucket_sum_squares(b, Some(loss_scale))));
    if !norm.is_finite() {
        return Verdict::SkipNonFinite;
    }
    if norm > clip {
        Verdict::Clip(clip / norm)
    } else {
        Verdict::Proceed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hyper(clip: f64) -> AdamHyper {
        AdamHyper {
            clip_norm: Some(clip),
            ..AdamHyper::default()
        }
    }

    #[test]
    fn pythagorean_norm() {
        assert_eq!(global_grad_norm(&[&[3.0, 4.0]]), 5.0);
        assert_eq!(global_grad_norm(&[&[0.0; 8], &[0.0; 3]]), 0.0);
    }

    #[test]
    fn any_nan_skips() {
        let a = [1.0, 2.0];
        let b = [0.0, f32::NAN, 1.0];
        assert_eq!(
            validate(&[&a, &b], &hyper(1e9), 1.0),
            Verdict::SkipNonFinite
        );
        let c = [f32::NEG_INFINITY];
        assert_eq!(
            validate(&[&a, &c], &hyper(1e9), 1.0),
            Verdict::SkipNonFinite
        );
    }

    #[test]
    fn non_finite_check_comes_before_unscaling() {
        // an infinite loss scale would turn every finite gradient into zero
        let g = [f32::INFINITY, 1.0];
        assert_eq!(
            validate(&[&g], &hyper(1.0), f32::INFINITY),
            Verdict::SkipNonFinite
        );
    }

    #[test]
    fn norm_equal_to_threshold_proceeds() {
        assert_eq!(validate(&[&[3.0, 4.0]], &hyper(5.0), 1.0), Verdict::Proceed);
    }

    #[test]
    fn twice_the_threshold_clips_by_half() {
        // unscaled norm 10 from gradients scaled by 8
        let g = [48.0, 64.0, 0.0];
        assert_eq!(
            validate(&[&g[..2], &g[2..]], &hyper(5.0), 8.0),
            Verdict::Clip(0.5)
        );
    }

    #[test]
    fn no_threshold_never_clips() {
        let h = AdamHyper {
            clip_norm: None,
            ..AdamHyper::default()
        };
        assert_eq!(validate(&[&[1e30, 1e30]], &h, 1.0), Verdict::Proceed);
    }

    proptest! {
        #[test]
        fn bucketed_norm_equals_concatenated_norm(
            a in prop::collection::vec(-1e3f32..1e3, 0..50),
            b in prop::collection::vec(-1e3f32..1e3, 1..50),
            c in prop::collection::vec(-1e3f32..1e3, 0..50),
        ) {
            let all: Vec<f32> = a.iter().chain(&b).chain(&c).copied().collect();
            // concatenate-then-reduce with the same grouping of partial sums
            let oracle = [&a, &b, &c]
                .iter()
                .map(|part| part.iter().map(|&x| (x as f64) * (x as f64)).fold(0.0, |s, x| s + x))
                .fold(0.0, |s, x| s + x)
                .sqrt();
            let got = global_grad_norm(&[&all[..a.len()], &all[a.len()..a.len() + b.len()], &all[a.len() + b.len()..]]);
            prop_assert_eq!(got.to_bits(), oracle.to_bits());
            let par = global_grad_norm_with(&[&a, &b, &c], Exec::Parallel);
            prop_assert_eq!(par.to_bits(), got.to_bits());
        }

        #[test]
        fn clip_coefficient_is_below_one(g in prop::collection::vec(-10f32..10.0, 1..40), clip in 0.1f64..5.0) {
            match validate(&[&g], &hyper(clip), 1.0) {
                Verdict::Clip(c) => {
                    prop_assert!(c > 0.0 && c < 1.0);
                    prop_assert!((c * global_grad_norm(&[&g]) - clip).abs() < 1e-9 * clip);
                }
                Verdict::Proceed => prop_assert!(global_grad_norm(&[&g]) <= clip),
                Verdict::SkipNonFinite => prop_assert!(false),
            }
        }
    }
}
