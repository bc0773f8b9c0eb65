//! Content, style and entropy losses for generator training, with analytic
//! gradients that feed the classifier's backward pass.
//!
//! * content: batch mean of `||f(x~) - f(x)||_2` on the pooled last-layer features;
//!   the original-image features are a constant target.
//! * style: mean over batch-norm layers of `||mu_cur - mu_stored|| + ||sigma_cur - sigma_stored||`.
//! * entropy: batch mean of `-sum_c p_c ln(max(p_c, 1e-8))`.

use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::models::{ClassifierTrace, Generator, LayerStats, SourceClassifier, TraceGrads};
use crate::nn::Scalar;

/// Probabilities are clamped below at this value before the logarithm.
pub const PROB_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub content: f64,
    pub style: f64,
    pub entropy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            content: 1.0,
            style: 10.0,
            entropy: 0.1,
        }
    }
}

impl LossWeights {
    pub fn new(content: f64, style: f64, entropy: f64) -> Result<Self> {
        let w = Self {
            content,
            style,
            entropy,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("content", self.content),
            ("style", self.style),
            ("entropy", self.entropy),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn combine(&self, content: f64, style: f64, entropy: f64) -> f64 {
        self.content * content + self.style * style + self.entropy * entropy
    }
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub content: f64,
    pub style: f64,
    pub entropy: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(content: f64, style: f64, entropy: f64, weights: &LossWeights) -> Self {
        Self {
            content,
            style,
            entropy,
            total: weights.combine(content, style, entropy),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.content, self.style, self.entropy, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn l2<T: Scalar>(v: impl Iterator<Item = T>) -> T {
    v.map(|x| x * x).sum::<T>().sqrt()
}

/// `v / ||v||`, or zero when `||v|| == 0` (the subgradient of the norm at the origin).
fn unit<T: Scalar>(v: &Array1<T>) -> (T, Array1<T>) {
    let n = l2(v.iter().cloned());
    if n > T::zero() {
        (n, v.mapv(|x| x / n))
    } else {
        (n, Array1::zeros(v.len()))
    }
}

/// Batch-mean Euclidean distance between two feature matrices, and its
/// gradient with respect to `translated`.
pub fn feature_distance<T: Scalar>(
    translated: &Array2<T>,
    original: &Array2<T>,
) -> Result<(T, Array2<T>)> {
    ensure!(
        translated.dim() == original.dim(),
        "content loss needs matching feature shapes, got {:?} and {:?}",
        translated.dim(),
        original.dim()
    );
    let b = translated.nrows();
    ensure!(b >= 1, "empty batch");
    let bt = T::from_usize(b).expect("count");
    let mut grad = Array2::zeros(translated.raw_dim());
    let mut total = T::zero();
    for ((ft, fo), mut g) in translated
        .outer_iter()
        .zip(original.outer_iter())
        .zip(grad.outer_iter_mut())
    {
        let diff = &ft - &fo;
        let (n, u) = unit(&diff);
        total += n;
        g.assign(&(u / bt));
    }
    Ok((total / bt, grad))
}

pub fn content_loss<T: Scalar>(
    translated: &ClassifierTrace<T>,
    original: &ClassifierTrace<T>,
) -> Result<T> {
    ensure!(
        translated.batch_size() == original.batch_size(),
        "content loss batch mismatch: {} vs {}",
        translated.batch_size(),
        original.batch_size()
    );
    Ok(feature_distance(&translated.last_features, &original.last_features)?.0)
}

fn check_layers<T: Scalar>(current: &[LayerStats<T>], stored: &[LayerStats<T>]) -> Result<()> {
    ensure!(!stored.is_empty(), "style loss needs at least one layer");
    ensure!(
        current.len() == stored.len(),
        "style loss got {} current layers but {} stored layers",
        current.len(),
        stored.len()
    );
    for (n, (c, s)) in current.iter().zip(stored).enumerate() {
        ensure!(
            c.n_channels() == s.n_channels()
                && c.std.len() == c.n_channels()
                && s.std.len() == s.n_channels(),
            "style loss channel mismatch at layer {n}: {} current vs {} stored",
            c.n_channels(),
            s.n_channels()
        );
    }
    Ok(())
}

/// Layer-averaged distance between current and stored statistics.
pub fn style_distance<T: Scalar>(current: &[LayerStats<T>], stored: &[LayerStats<T>]) -> Result<T> {
    check_layers(current, stored)?;
    let total = current
        .iter()
        .zip(stored)
        .map(|(c, s)| l2((&c.mean - &s.mean).into_iter()) + l2((&c.std - &s.std).into_iter()))
        .sum::<T>();
    Ok(total / T::from_usize(stored.len()).expect("count"))
}

pub fn style_loss<T: Scalar>(trace: &ClassifierTrace<T>, stored: &[LayerStats<T>]) -> Result<T> {
    let current = (0..trace.bn_inputs.len())
        .map(|n| trace.current_stats(n))
        .collect::<Result<Vec<_>>>()?;
    style_distance(&current, stored)
}

/// Style loss and its gradient with respect to every batch-norm input.
pub fn style_loss_grad<T: Scalar>(
    trace: &ClassifierTrace<T>,
    stored: &[LayerStats<T>],
) -> Result<(T, Vec<Array4<T>>)> {
    let current = (0..trace.bn_inputs.len())
        .map(|n| trace.current_stats(n))
        .collect::<Result<Vec<_>>>()?;
    let loss = style_distance(&current, stored)?;
    let layers = T::from_usize(stored.len()).expect("count");
    let mut grads = Vec::with_capacity(stored.len());
    for ((a, cur), st) in trace.bn_inputs.iter().zip(&current).zip(stored) {
        let (b, ch, h, w) = a.dim();
        let m = T::from_usize(b * h * w).expect("count");
        let (_, gmu) = unit(&(&cur.mean - &st.mean));
        let (_, gsigma) = unit(&(&cur.std - &st.std));
        // d sigma / d a = (a - mu) / (M sigma); d mu / d a = 1 / M.
        let mut g = a.as_standard_layout().into_owned();
        let hw = h * w;
        let data = g.as_slice_mut().expect("standard layout");
        for c in 0..ch {
            let k_mu = gmu[c] / (m * layers);
            let k_sigma = gsigma[c] / (m * cur.std[c] * layers);
            let mu = cur.mean[c];
            for bi in 0..b {
                for v in &mut data[(bi * ch + c) * hw..][..hw] {
                    *v = k_mu + k_sigma * (*v - mu);
                }
            }
        }
        grads.push(g);
    }
    Ok((loss, grads))
}

fn check_probs<T: Scalar>(probs: &Array2<T>) -> Result<()> {
    ensure!(probs.nrows() >= 1, "empty batch");
    for (i, row) in probs.outer_iter().enumerate() {
        ensure!(
            row.iter().all(|&p| p >= T::zero()),
            "row {i} contains a negative probability"
        );
        let s: f64 = row.iter().map(|p| p.to_f64_lossy()).sum();
        ensure!((s - 1.0).abs() <= 1e-5, "row {i} sums to {s}, not 1");
    }
    Ok(())
}

pub fn entropy_loss<T: Scalar>(probs: &Array2<T>) -> Result<T> {
    Ok(entropy_loss_grad(probs)?.0)
}

/// Mean entropy and its gradient with respect to the probabilities.
pub fn entropy_loss_grad<T: Scalar>(probs: &Array2<T>) -> Result<(T, Array2<T>)> {
    check_probs(probs)?;
    let floor = T::lit(PROB_FLOOR);
    let b = T::from_usize(probs.nrows()).expect("count");
    let mut total = T::zero();
    let mut grad = Array2::zeros(probs.raw_dim());
    ndarray::Zip::from(&mut grad).and(probs).for_each(|g, &p| {
        let lp = p.max(floor).ln();
        total -= p * lp;
        let d = if p > floor { lp + T::one() } else { lp };
        *g = -d / b;
    });
    Ok((total / b, grad))
}

/// Evaluates the weighted generation loss on one batch without touching gradients.
pub fn total_loss<T: Scalar>(
    x: &Array4<T>,
    g: &Generator<T>,
    model: &SourceClassifier<T>,
    weights: &LossWeights,
) -> Result<LossReport> {
    let translated = g.forward(x)?;
    let tt = model.predict(&translated)?;
    let to = model.predict(x)?;
    let content = content_loss(&tt, &to)?;
    let style = style_loss(&tt, &model.stored_stats())?;
    let entropy = entropy_loss(&tt.probs)?;
    Ok(LossReport::new(
        content.to_f64_lossy(),
        style.to_f64_lossy(),
        entropy.to_f64_lossy(),
        weights,
    ))
}

/// Evaluates the weighted generation loss and accumulates its gradient into
/// the generator's parameters. The classifier is only read.
pub fn total_loss_backward<T: Scalar>(
    x: &Array4<T>,
    g: &mut Generator<T>,
    model: &SourceClassifier<T>,
    weights: &LossWeights,
) -> Result<LossReport> {
    weights.validate()?;
    let tape = g.forward_tape(x)?;
    let tt = model.forward(tape.output())?;
    let to = model.predict(x)?;
    let stored = model.stored_stats();

    let (content, dfeat) = feature_distance(&tt.last_features, &to.last_features)?;
    let (style, dstats) = style_loss_grad(&tt, &stored)?;
    let (entropy, dprobs) = entropy_loss_grad(&tt.probs)?;
    let report = LossReport::new(
        content.to_f64_lossy(),
        style.to_f64_lossy(),
        entropy.to_f64_lossy(),
        weights,
    );

    let scale = |w: f64| T::lit(w);
    let mut grads = TraceGrads::default();
    if weights.content > 0.0 {
        grads.features = Some(dfeat * scale(weights.content));
    }
    if weights.style > 0.0 {
        grads.bn_inputs = dstats
            .into_iter()
            .map(|d| Some(d * scale(weights.style)))
            .collect();
    }
    if weights.entropy > 0.0 {
        grads.probs = Some(dprobs * scale(weights.entropy));
    }
    let dx = model.input_gradient(&tt, &grads)?;
    g.backward(&tape, &dx)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::StatsKind;
    use ndarray::array;

    fn stats(mean: Vec<f64>, std: Vec<f64>, kind: StatsKind) -> LayerStats<f64> {
        LayerStats {
            mean: Array1::from(mean),
            std: Array1::from(std),
            kind,
        }
    }

    #[test]
    fn content_identical_features_is_zero() {
        let f = array![[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]];
        assert_eq!(feature_distance(&f, &f).unwrap().0, 0.0);
    }

    #[test]
    fn content_three_four_five() {
        let (d, _) = feature_distance(&array![[3.0, 4.0]], &array![[0.0, 0.0]]).unwrap();
        assert_eq!(d, 5.0);
    }

    #[test]
    fn content_is_homogeneous() {
        let a: Array2<f64> = array![[1.0, 2.0], [3.0, -1.0]];
        let b = array![[0.5, -2.0], [1.0, 1.0]];
        let (d1, _) = feature_distance(&a, &b).unwrap();
        let (d2, _) = feature_distance(&(&a * 2.0), &(&b * 2.0)).unwrap();
        assert!((d2 - 2.0 * d1).abs() < 1e-12);
    }

    #[test]
    fn content_batch_mismatch_is_rejected() {
        assert!(feature_distance(&Array2::<f64>::zeros((2, 3)), &Array2::zeros((3, 3))).is_err());
    }

    #[test]
    fn style_equal_stats_is_zero() {
        let s = vec![stats(vec![1.0, 2.0], vec![0.5, 0.7], StatsKind::Stored)];
        assert_eq!(style_distance(&s, &s).unwrap(), 0.0);
    }

    #[test]
    fn style_mean_offset_sqrt_five() {
        let cur = vec![stats(vec![1.0, 2.0], vec![1.0, 1.0], StatsKind::Current)];
        let st = vec![stats(vec![0.0, 0.0], vec![1.0, 1.0], StatsKind::Stored)];
        assert!((style_distance(&cur, &st).unwrap() - 5f64.sqrt()).abs() < 1e-12);
        assert!((5f64.sqrt() - 2.2361).abs() < 1e-4);
    }

    #[test]
    fn style_averages_over_layers() {
        let st = vec![
            stats(vec![0.0, 0.0], vec![1.0, 1.0], StatsKind::Stored),
            stats(vec![0.0], vec![1.0], StatsKind::Stored),
        ];
        let cur = vec![
            stats(vec![3.0, 4.0], vec![1.0, 1.0], StatsKind::Current),
            stats(vec![0.0], vec![2.0], StatsKind::Current),
        ];
        let a = style_distance(&cur[..1], &st[..1]).unwrap();
        let b = style_distance(&cur[1..], &st[1..]).unwrap();
        assert_eq!((a, b), (5.0, 1.0));
        assert!((style_distance(&cur, &st).unwrap() - (a + b) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn style_channel_mismatch_names_layer() {
        let st = vec![
            stats(vec![0.0; 2], vec![1.0; 2], StatsKind::Stored),
            stats(vec![0.0; 3], vec![1.0; 3], StatsKind::Stored),
        ];
        let cur = vec![
            stats(vec![0.0; 2], vec![1.0; 2], StatsKind::Current),
            stats(vec![0.0; 4], vec![1.0; 4], StatsKind::Current),
        ];
        let err = style_distance(&cur, &st).unwrap_err().to_string();
        assert!(err.contains("layer 1"), "{err}");
    }

    #[test]
    fn entropy_uniform_is_ln_c() {
        let p = Array2::from_elem((3, 10), 0.1);
        assert!((entropy_loss(&p).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!((10f64.ln() - std::f64::consts::LN_10).abs() < 1e-12);
    }

    #[test]
    fn entropy_one_hot_is_zero() {
        let mut p = Array2::<f64>::zeros((2, 10));
        p[[0, 3]] = 1.0;
        p[[1, 0]] = 1.0;
        assert!(entropy_loss(&p).unwrap().abs() < 2e-7);
    }

    #[test]
    fn entropy_fair_coin_is_ln_two() {
        let p: Array2<f64> = array![[0.5, 0.5]];
        assert!((entropy_loss(&p).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn entropy_rejects_negative_probabilities() {
        assert!(entropy_loss(&array![[1.2, -0.2]]).is_err());
        assert!(entropy_loss(&array![[0.3, 0.3]]).is_err());
    }

    #[test]
    fn report_recomposes_total() {
        let w = LossWeights::default();
        let r = LossReport::new(0.3, 0.02, 1.7, &w);
        assert_eq!(r.total, 0.3 + 10.0 * 0.02 + 0.1 * 1.7);
    }

    #[test]
    fn weights_must_be_non_negative() {
        assert!(LossWeights::new(1.0, -1.0, 0.0).is_err());
        assert!(LossWeights::new(f64::NAN, 1.0, 0.0).is_err());
        assert_eq!(
            LossWeights::default(),
            LossWeights::new(1.0, 10.0, 0.1).unwrap()
        );
    }
}
