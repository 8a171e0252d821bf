//! Generator-side objectives. Every term is a mean over its inputs.

use crate::aligner::LossTerm;
use crate::nn::Real;

fn l1<T: Real>(out: &[T], target: &[T]) -> (f64, Vec<T>) {
    assert_eq!(out.len(), target.len(), "shape mismatch");
    let n = out.len() as f64;
    let mut value = 0.0;
    let grad = out
        .iter()
        .zip(target)
        .map(|(&o, &t)| {
            let d = (o - t).as_f64();
            value += d.abs() / n;
            T::lit(if d == 0.0 { 0.0 } else { d.signum() / n })
        })
        .collect();
    (value, grad)
}

/// `mean (s - target)²` and its gradient.
pub fn least_squares<T: Real>(scores: &[T], target: f64) -> (f64, Vec<T>) {
    let n = scores.len() as f64;
    let mut value = 0.0;
    let grad = scores
        .iter()
        .map(|&s| {
            let d = s.as_f64() - target;
            value += d * d / n;
            T::lit(2.0 * d / n)
        })
        .collect();
    (value, grad)
}

/// L1 between each reconstruction and its input, summed over the two domains.
/// Gradients are with respect to the reconstructions.
pub fn recon_loss<T: Real>(g_out_src: &[T], d_src: &[T], g_out_trg: &[T], d_trg: &[T]) -> LossTerm<T> {
    let (va, grad_a) = l1(g_out_src, d_src);
    let (vb, grad_b) = l1(g_out_trg, d_trg);
    LossTerm { value: va + vb, grad_a, grad_b }
}

/// Least-squares generator objective: both generated batches should score 1.
pub fn gen_style_loss<T: Real>(score_g_src: &[T], score_g_trg: &[T]) -> LossTerm<T> {
    let (va, grad_a) = least_squares(score_g_src, 1.0);
    let (vb, grad_b) = least_squares(score_g_trg, 1.0);
    LossTerm { value: va + vb, grad_a, grad_b }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscLoss<T> {
    pub value: f64,
    pub grad_g_src: Vec<T>,
    pub grad_g_trg: Vec<T>,
    pub grad_real: Vec<T>,
}

/// Least-squares discriminator objective: generated images score 0, real
/// target images score 1.
pub fn disc_style_loss<T: Real>(score_g_src: &[T], score_g_trg: &[T], score_real: &[T]) -> DiscLoss<T> {
    let (va, grad_g_src) = least_squares(score_g_src, 0.0);
    let (vb, grad_g_trg) = least_squares(score_g_trg, 0.0);
    let (vc, grad_real) = least_squares(score_real, 1.0);
    DiscLoss { value: va + vb + vc, grad_g_src, grad_g_trg, grad_real }
}
