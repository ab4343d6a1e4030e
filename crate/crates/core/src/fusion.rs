//! Fusion classifier, logit-averaging ensemble head and the distillation
//! losses tying the four classifiers together.
//!
//! Knowledge flows one way along each edge: the ensemble head teaches the
//! fusion classifier (EKD) and the fusion classifier teaches each
//! sub-network (FKD). Teachers are detached, so a loss never pushes
//! gradient into its own teacher.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::nn::{ClassifierHead, Forward, ParamStore};
use crate::ops::softmax_tensor;
use crate::tensor::Tensor;

/// Temperature-softened class distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftenedDistribution {
    pub probabilities: Vec<f64>,
    pub temperature: f64,
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")))
    }
}

/// `softmax(logits / T)`, computed with max subtraction.
pub fn soften(logits: &[f64], temperature: f64) -> Result<SoftenedDistribution> {
    check_temperature(temperature)?;
    if logits.is_empty() {
        return Err(Error::InvalidArgument("empty logit vector".into()));
    }
    let scaled = Tensor::vector(logits.iter().map(|l| l / temperature).collect());
    Ok(SoftenedDistribution {
        probabilities: softmax_tensor(&scaled, 0).into_data(),
        temperature,
    })
}

/// Elementwise mean of the two sub-network logit vectors.
pub fn ensemble_logits(logit_t: &[f64], logit_o: &[f64]) -> Result<Vec<f64>> {
    if logit_t.len() != logit_o.len() {
        return Err(shape_err(
            "ensemble_logits",
            format!("{} vs {}", logit_t.len(), logit_o.len()),
        ));
    }
    Ok(logit_t.iter().zip(logit_o).map(|(a, b)| (a + b) / 2.0).collect())
}

/// `T² · KL(teacher ‖ student)`.
pub fn kd_loss(teacher: &SoftenedDistribution, student: &SoftenedDistribution) -> Result<f64> {
    if teacher.probabilities.len() != student.probabilities.len() {
        return Err(shape_err(
            "kd_loss",
            format!(
                "{} vs {} classes",
                teacher.probabilities.len(),
                student.probabilities.len()
            ),
        ));
    }
    if teacher.temperature != student.temperature {
        return Err(Error::InvalidArgument(format!(
            "temperature mismatch: {} vs {}",
            teacher.temperature, student.temperature
        )));
    }
    let kl: f64 = teacher
        .probabilities
        .iter()
        .zip(&student.probabilities)
        .map(|(&p, &q)| if p > 0.0 { p * (p / q).ln() } else { 0.0 })
        .sum();
    Ok(teacher.temperature * teacher.temperature * kl)
}

/// Distillation settings shared by the three losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Distillation {
    pub temperature: f64,
    /// Multiplier on the KL terms; `T²` by default, `0` disables distillation.
    pub kd_weight: f64,
}

impl Distillation {
    pub fn new(temperature: f64) -> Self {
        Self {
            temperature,
            kd_weight: temperature * temperature,
        }
    }

    pub fn without_kd(temperature: f64) -> Self {
        Self {
            temperature,
            kd_weight: 0.0,
        }
    }
}

fn check_labels(logits: &[usize], labels: &[usize]) -> Result<(usize, usize)> {
    if logits.len() != 2 || logits[0] != labels.len() {
        return Err(shape_err(
            "loss",
            format!("logits {logits:?} for {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits[1]) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside {} classes",
            logits[1]
        )));
    }
    Ok((logits[0], logits[1]))
}

/// Batch-mean cross-entropy of `softmax(logits)` against class indices.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let (b, c) = check_labels(&logits.shape(), labels)?;
    let mut onehot = vec![0.0; b * c];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * c + l] = -1.0 / b as f64;
    }
    let onehot = logits.tape().constant(Tensor::new(&[b, c], onehot)?);
    logits.log_softmax(1)?.mul(onehot)?.sum()
}

/// Batch-mean `weight · KL(softmax(teacher/T) ‖ softmax(student/T))`.
/// The teacher is detached.
pub fn distillation_term<'t>(
    teacher: Var<'t>,
    student: Var<'t>,
    kd: Distillation,
) -> Result<Var<'t>> {
    check_temperature(kd.temperature)?;
    let shape = student.shape();
    if teacher.shape() != shape || shape.len() != 2 {
        return Err(shape_err(
            "distillation",
            format!("teacher {:?}, student {shape:?}", teacher.shape()),
        ));
    }
    let b = shape[0] as f64;
    let t_scaled = teacher.value().map(|v| v / kd.temperature);
    let p = softmax_tensor(&t_scaled, 1);
    let neg_p = student.tape().constant(p.map(|v| -v * kd.kd_weight / b));
    let entropy: f64 = p.data().iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum();
    // Σ p ln p is constant in the student; kept so the term is a true KL.
    student
        .mul_scalar(1.0 / kd.temperature)?
        .log_softmax(1)?
        .mul(neg_p)?
        .sum()?
        .add_scalar(kd.kd_weight * entropy / b)
}

/// Sub-network loss: FKD from the fusion classifier plus cross-entropy.
pub fn sub_network_loss<'t>(
    logit_m: Var<'t>,
    logit_f: Var<'t>,
    labels: &[usize],
    kd: Distillation,
) -> Result<Var<'t>> {
    let ce = cross_entropy(logit_m, labels)?;
    distillation_term(logit_f, logit_m, kd)?.add(ce)
}

/// Fusion loss: EKD from the ensemble head plus cross-entropy.
pub fn fusion_loss<'t>(
    logit_f: Var<'t>,
    logit_e: Var<'t>,
    labels: &[usize],
    kd: Distillation,
) -> Result<Var<'t>> {
    let ce = cross_entropy(logit_f, labels)?;
    distillation_term(logit_e, logit_f, kd)?.add(ce)
}

/// Differentiable logit average.
pub fn ensemble_logits_var<'t>(logit_t: Var<'t>, logit_o: Var<'t>) -> Result<Var<'t>> {
    logit_t.add(logit_o)?.mul_scalar(0.5)
}

/// Three-layer MLP over the concatenated sub-network features.
#[derive(Clone, Debug)]
pub struct FusionMlp {
    pub mlp: ClassifierHead,
    pub feature_dim: usize,
}

impl FusionMlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        feature_dim: usize,
        classes: usize,
        dropout: f64,
        bn_eps: f64,
        bn_momentum: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            mlp: ClassifierHead::new(
                store,
                prefix,
                2 * feature_dim,
                feature_dim,
                classes,
                dropout,
                bn_eps,
                bn_momentum,
                rng,
            ),
            feature_dim,
        }
    }

    pub fn forward<'t>(&self, f: &Forward<'t>, feat_t: Var<'t>, feat_o: Var<'t>) -> Result<Var<'t>> {
        let joined = Var::concat(&[feat_t, feat_o], 1)?;
        Ok(self.mlp.forward(f, joined)?.logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::Mode;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // 30-digit reference: KL((σ(1), 1-σ(1)) ‖ (0.5, 0.5))
    const KL_TOY: f64 = 0.110_944_071_671_727_35;
    const TOY_LOSS: f64 = 1.691_643_825_605_491_5;

    #[test]
    fn soften_examples() {
        let a = soften(&[1.0, 0.0], 1.0).unwrap();
        let b = soften(&[3.0, 0.0], 3.0).unwrap();
        assert!((a.probabilities[0] - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((b.probabilities[0] - a.probabilities[0]).abs() < 1e-15);
        let u = soften(&[5.0, -2.0, 0.3, 9.0], 1e6).unwrap();
        assert!(u.probabilities.iter().all(|p| (p - 0.25).abs() < 1e-5));
        assert!(soften(&[1.0], 0.0).is_err());
        assert!(soften(&[1.0], -1.0).is_err());
    }

    #[test]
    fn kd_loss_examples() {
        let p = soften(&[1.0, 0.0], 1.0).unwrap();
        let q = soften(&[0.0, 0.0], 1.0).unwrap();
        assert!((kd_loss(&p, &q).unwrap() - KL_TOY).abs() < 1e-15);
        assert_eq!(kd_loss(&p, &p).unwrap(), 0.0);
        let r = soften(&[0.0, 0.0], 2.0).unwrap();
        assert!(kd_loss(&p, &r).is_err());
    }

    #[test]
    fn ensemble_examples() {
        assert_eq!(ensemble_logits(&[2.0, 0.0], &[0.0, 2.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(ensemble_logits(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), vec![0.3, 0.7]);
        assert!(ensemble_logits(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn toy(tape: &Tape, m: [f64; 2], f: [f64; 2]) -> (Var<'_>, Var<'_>) {
        (
            tape.param(Tensor::new(&[1, 2], m.to_vec()).unwrap()),
            tape.param(Tensor::new(&[1, 2], f.to_vec()).unwrap()),
        )
    }

    #[test]
    fn two_class_toy_losses() {
        let tape = Tape::new();
        let kd = Distillation::new(3.0);
        let (m, f) = toy(&tape, [0.0, 0.0], [3.0, 0.0]);
        let l = sub_network_loss(m, f, &[0], kd).unwrap().value().item();
        assert!((l - TOY_LOSS).abs() < 1e-14, "{l}");
        // same numbers with the roles of the fusion and ensemble heads
        let l = fusion_loss(m, f, &[0], kd).unwrap().value().item();
        assert!((l - TOY_LOSS).abs() < 1e-14, "{l}");
    }

    #[test]
    fn distillation_direction_puts_teacher_first() {
        let tape = Tape::new();
        let kd = Distillation::new(1.0);
        let (student, teacher) = toy(&tape, [0.0, 0.0], [1.0, 0.0]);
        let forward = distillation_term(teacher, student, kd).unwrap().value().item();
        let reverse = distillation_term(student, teacher, kd).unwrap().value().item();
        assert!((forward - KL_TOY).abs() < 1e-15);
        assert!((forward - reverse).abs() > 1e-3);
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let tape = Tape::new();
        let (m, f) = toy(&tape, [30.0, 0.0], [30.0, 0.0]);
        let kd = Distillation::new(3.0);
        assert!(sub_network_loss(m, f, &[0], kd).unwrap().value().item() < 1e-12);
        assert!(fusion_loss(f, m, &[0], kd).unwrap().value().item() < 1e-12);
        let (m, f) = toy(&tape, [0.2, -1.0], [0.2, -1.0]);
        assert!(distillation_term(f, m, kd).unwrap().value().item().abs() < 1e-15);
    }

    #[test]
    fn teacher_receives_no_gradient() {
        let tape = Tape::new();
        let (m, f) = toy(&tape, [0.4, -0.3], [1.5, 0.2]);
        let loss = sub_network_loss(m, f, &[1], Distillation::new(3.0)).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(f).is_none());
        assert!(g.wrt(m).data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn label_validation() {
        let tape = Tape::new();
        let (m, f) = toy(&tape, [0.0, 0.0], [0.0, 0.0]);
        assert!(sub_network_loss(m, f, &[2], Distillation::new(3.0)).is_err());
        assert!(fusion_loss(m, f, &[0, 1], Distillation::new(3.0)).is_err());
    }

    #[test]
    fn fusion_zero_params_give_zero_logits() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fusion = FusionMlp::new(&mut store, "fusion", 8, 4, 0.5, 1e-5, 0.1, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get(id);
            if p.kind == crate::nn::ParamKind::Weight {
                let shape = p.tensor.shape().to_vec();
                *store.tensor_mut(id) = Tensor::zeros(&shape);
            }
        }
        let tape = Tape::new();
        let f = Forward::new(&tape, &store, Mode::Eval, 0);
        let a = tape.constant(Tensor::uniform(&[3, 8], 1.0, &mut rng));
        let b = tape.constant(Tensor::uniform(&[3, 8], 1.0, &mut rng));
        let out = fusion.forward(&f, a, b).unwrap().value();
        assert_eq!(out.shape(), &[3, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
        let again = fusion.forward(&f, a, b).unwrap().value();
        assert_eq!(out, again);
    }

    proptest! {
        #[test]
        fn kd_is_non_negative(t in proptest::collection::vec(-10.0f64..10.0, 5),
                              s in proptest::collection::vec(-10.0f64..10.0, 5),
                              temp in 0.5f64..5.0) {
            let p = soften(&t, temp).unwrap();
            let q = soften(&s, temp).unwrap();
            prop_assert!(kd_loss(&p, &q).unwrap() >= 0.0);
            prop_assert!(kd_loss(&p, &p).unwrap().abs() < 1e-10);
        }

        #[test]
        fn soften_is_shift_invariant(l in proptest::collection::vec(-20.0f64..20.0, 4),
                                     c in -50.0f64..50.0, temp in 0.5f64..5.0) {
            let a = soften(&l, temp).unwrap();
            let shifted: Vec<f64> = l.iter().map(|v| v + c).collect();
            let b = soften(&shifted, temp).unwrap();
            for (x, y) in a.probabilities.iter().zip(&b.probabilities) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
