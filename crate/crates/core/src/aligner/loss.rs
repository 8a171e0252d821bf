//! Training objectives with their analytic gradients. All reductions are means.

use crate::nn::Real;

pub const PROB_EPS: f64 = 1e-7;

/// Loss value plus the gradient with respect to each input.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm<T> {
    pub value: f64,
    pub grad_a: Vec<T>,
    pub grad_b: Vec<T>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Clamped probability and its derivative with respect to the logit
/// (zero where the clamp is active).
fn prob<T: Real>(z: T) -> (f64, f64) {
    let p = sigmoid(z.as_f64());
    if p < PROB_EPS {
        (PROB_EPS, 0.0)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, 0.0)
    } else {
        (p, p * (1.0 - p))
    }
}

/// Mean absolute difference between two feature batches.
pub fn pixel_consistency_loss<T: Real>(f_src: &[T], f_s2t: &[T]) -> LossTerm<T> {
    assert_eq!(f_src.len(), f_s2t.len(), "feature length mismatch");
    let n = f_src.len() as f64;
    let mut value = 0.0;
    let mut ga = Vec::with_capacity(f_src.len());
    for (&a, &b) in f_src.iter().zip(f_s2t) {
        let d = (a - b).as_f64();
        value += d.abs();
        ga.push(T::lit(d.signum() * (d != 0.0) as u8 as f64 / n));
    }
    let gb = ga.iter().map(|&g| -g).collect();
    LossTerm { value: value / n, grad_a: ga, grad_b: gb }
}

/// Binary cross-entropy of the domain classifier: source is class 1.
pub fn domain_disc_loss<T: Real>(logits_src: &[T], logits_s2t: &[T]) -> LossTerm<T> {
    let (ns, nt) = (logits_src.len() as f64, logits_s2t.len() as f64);
    let mut value = 0.0;
    let grad_a = logits_src
        .iter()
        .map(|&z| {
            let (p, dp) = prob(z);
            value -= p.ln() / ns;
            T::lit(-dp / p / ns)
        })
        .collect();
    let grad_b = logits_s2t
        .iter()
        .map(|&z| {
            let (p, dp) = prob(z);
            value -= (1.0 - p).ln() / nt;
            T::lit(dp / (1.0 - p) / nt)
        })
        .collect();
    LossTerm { value, grad_a, grad_b }
}

/// Confusion objective for the extractor: minimal when every probability is 0.5.
pub fn feature_adv_loss<T: Real>(logits_src: &[T], logits_s2t: &[T]) -> LossTerm<T> {
    let half = |logits: &[T], value: &mut f64| -> Vec<T> {
        let n = logits.len() as f64;
        logits
            .iter()
            .map(|&z| {
                let (p, dp) = prob(z);
                *value -= 0.5 * (p * (1.0 - p)).ln() / n;
                // d/dp of -ln(p(1-p)) is (2p - 1) / (p(1-p)).
                T::lit(-0.5 * dp * (1.0 - 2.0 * p) / (p * (1.0 - p)) / n)
            })
            .collect()
    };
    let mut value = 0.0;
    let grad_a = half(logits_src, &mut value);
    let grad_b = half(logits_s2t, &mut value);
    LossTerm { value, grad_a, grad_b }
}

fn mse<T: Real>(pred: &[T], label: &[T]) -> (f64, Vec<T>) {
    assert_eq!(pred.len(), label.len(), "prediction/label length mismatch");
    let n = pred.len() as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(label)
        .map(|(&p, &l)| {
            let d = (p - l).as_f64();
            value += d * d / n;
            T::lit(2.0 * d / n)
        })
        .collect();
    (value, grad)
}

/// Mean squared error of each prediction batch against the shared labels,
/// summed over the two branches. `pred_s2t` may be omitted for single-branch
/// training, in which case `grad_b` is empty.
pub fn regression_loss<T: Real>(pred_src: &[T], pred_s2t: Option<&[T]>, label: &[T]) -> LossTerm<T> {
    let (va, grad_a) = mse(pred_src, label);
    let (vb, grad_b) = pred_s2t.map(|p| mse(p, label)).unwrap_or((0.0, Vec::new()));
    LossTerm { value: va + vb, grad_a, grad_b }
}
