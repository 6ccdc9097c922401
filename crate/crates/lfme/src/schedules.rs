//! The two adaptive weight schedules: self-paced expert selection (w_l,
//! driven by the student/expert accuracy gap) and curriculum instance
//! selection (v_i, growing from a confidence-and-shot-scaled start to 1).

use serde::{Deserialize, Serialize};

use crate::distribution::{Dataset, Partition};
use crate::error::{Error, Result};
use crate::metrics::CardinalitySplit;
use crate::neural::{temperature_softmax, DenseNet};
use crate::scalar::Real;

/// Distillation weight for one expert given the current student accuracy.
///
/// Stays at 1 while the student is below `alpha * acc_expert`, then decays
/// linearly with the remaining gap; clamped to [0, 1] (the raw formula goes
/// negative once the student exceeds the expert). A zero-accuracy expert
/// contributes nothing.
pub fn expert_weight<F: Real>(acc_student: F, acc_expert: F, alpha: F) -> F {
    if acc_expert <= F::zero() {
        return F::zero();
    }
    if acc_student <= alpha * acc_expert {
        return F::one();
    }
    let raw = (acc_expert - acc_student) / (acc_expert * (F::one() - alpha));
    raw.max(F::zero()).min(F::one())
}

/// v_i at epoch 1: expert confidence scaled by the average-shot ratio
/// between the fewest-shot subset and the instance's own subset.
pub fn initial_instance_weight<F: Real>(p: F, avg_shot_min: F, avg_shot_l: F) -> Result<F> {
    if avg_shot_min > avg_shot_l {
        return Err(Error::Validation(format!(
            "min average shot {avg_shot_min} exceeds subset average shot {avg_shot_l}"
        )));
    }
    Ok(p * avg_shot_min / avg_shot_l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Convex,
    Concave,
}

/// Curriculum weight at epoch `e` of `total`, ramping from `v1` to 1.
///
/// Progress is normalized as s = (e-1)/(E-1) so the value is exactly `v1`
/// at the first epoch and exactly 1 at the last.
pub fn schedule_value<F: Real>(kind: ScheduleKind, v1: F, epoch: usize, total: usize) -> Result<F> {
    if total < 1 || epoch < 1 || epoch > total {
        return Err(Error::InvalidSpec(format!(
            "epoch {epoch} outside 1..={total}"
        )));
    }
    let s = if total == 1 {
        F::one()
    } else {
        F::from_usize_lossy(epoch - 1) / F::from_usize_lossy(total - 1)
    };
    let one = F::one();
    let ramp = one - v1;
    let value = match kind {
        ScheduleKind::Linear => ramp * s + v1,
        ScheduleKind::Convex => {
            let half_pi = F::from_f64_lossy(std::f64::consts::FRAC_PI_2);
            one - ramp * (s * half_pi).cos()
        }
        ScheduleKind::Concave => {
            let two = one + one;
            ramp * (one + s).ln() / two.ln() + v1
        }
    };
    Ok(value.max(F::zero()).min(one))
}

/// Per-expert self-paced weight with its epoch history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertWeightState<F> {
    pub acc_expert: F,
    pub alpha: F,
    pub current: F,
    pub history: Vec<F>,
}

impl<F: Real> ExpertWeightState<F> {
    pub fn new(acc_expert: F, alpha: F) -> Self {
        Self {
            acc_expert,
            alpha,
            current: F::one(),
            history: Vec::new(),
        }
    }

    /// End-of-epoch update from the student's current subset accuracy.
    pub fn update(&mut self, acc_student: F) -> F {
        self.current = expert_weight(acc_student, self.acc_expert, self.alpha);
        self.history.push(self.current);
        self.current
    }
}

/// Expert confidence p_i for every train instance whose label falls in the
/// split: the subset expert's softmax probability (temperature 1) for the
/// true class. Returned in dataset order as (instance_id, p).
pub fn compute_confidences<F: Real>(
    experts: &[DenseNet<F>],
    split: &CardinalitySplit,
    dataset: &Dataset,
) -> Result<Vec<(u64, F)>> {
    if experts.len() != split.num_subsets() {
        return Err(Error::Shape(format!(
            "{} experts for {} subsets",
            experts.len(),
            split.num_subsets()
        )));
    }
    let mut out = Vec::new();
    for inst in dataset.partition(Partition::Train) {
        let (l, class_pos) = split.locate(inst.label).ok_or_else(|| {
            Error::Validation(format!("label {} not in any subset", inst.label))
        })?;
        let x: Vec<F> = inst.features.iter().map(|&f| F::from_f64_lossy(f)).collect();
        let logits = experts[l].forward(&x)?;
        let probs = temperature_softmax(&logits, F::one())?;
        out.push((inst.id, probs[class_pos]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn expert_weight_branches() {
        assert_eq!(expert_weight::<f64>(0.30, 0.60, 0.6), 1.0);
        assert!((expert_weight::<f64>(0.48, 0.60, 0.6) - 0.5).abs() < 1e-12);
        assert_eq!(expert_weight::<f64>(0.70, 0.60, 0.6), 0.0); // raw -0.4167, clamped
        // continuous at the branch switch
        assert!((expert_weight::<f64>(0.36, 0.60, 0.6) - 1.0).abs() < 1e-12);
        assert_eq!(expert_weight::<f64>(0.5, 0.0, 0.6), 0.0);
    }

    #[test]
    fn initial_weight_examples() {
        assert!((initial_instance_weight::<f64>(0.8, 5.0, 20.0).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(initial_instance_weight::<f64>(0.7, 5.0, 5.0).unwrap(), 0.7);
        assert_eq!(initial_instance_weight::<f64>(0.0, 5.0, 20.0).unwrap(), 0.0);
        assert!(initial_instance_weight::<f64>(0.5, 20.0, 5.0).is_err());
    }

    #[test]
    fn schedule_boundaries_and_midpoint() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Convex, ScheduleKind::Concave] {
            assert!((schedule_value::<f64>(kind, 0.3, 1, 10).unwrap() - 0.3).abs() < 1e-12);
            assert!((schedule_value::<f64>(kind, 0.3, 10, 10).unwrap() - 1.0).abs() < 1e-12);
            assert_eq!(schedule_value::<f64>(kind, 0.4, 1, 1).unwrap(), 1.0);
        }
        // linear midpoint: v1 = 0.2, E = 11, e = 6 -> s = 0.5 -> 0.6
        assert!((schedule_value::<f64>(ScheduleKind::Linear, 0.2, 6, 11).unwrap() - 0.6).abs() < 1e-12);
        assert!(schedule_value::<f64>(ScheduleKind::Linear, 0.2, 12, 11).is_err());
    }

    #[test]
    fn convex_below_linear_below_concave() {
        for v1_step in 0..10 {
            let v1 = v1_step as f64 * 0.1;
            for e in 1..=21 {
                let convex = schedule_value(ScheduleKind::Convex, v1, e, 21).unwrap();
                let linear = schedule_value(ScheduleKind::Linear, v1, e, 21).unwrap();
                let concave = schedule_value(ScheduleKind::Concave, v1, e, 21).unwrap();
                assert!(convex <= linear + 1e-12, "e={e} v1={v1}");
                assert!(linear <= concave + 1e-12, "e={e} v1={v1}");
            }
        }
    }

    #[test]
    fn weight_state_records_history() {
        let mut state = ExpertWeightState::<f64>::new(0.6, 0.6);
        state.update(0.2);
        state.update(0.48);
        state.update(0.9);
        assert_eq!(state.history.len(), 3);
        assert_eq!(state.history[0], 1.0);
        assert!((state.history[1] - 0.5).abs() < 1e-12);
        assert_eq!(state.history[2], 0.0);
    }

    proptest! {
        #[test]
        fn expert_weight_bounded_and_monotone(
            acc_e in 0.01..1.0f64,
            alpha in 0.05..0.95f64,
            a in 0.0..1.0f64,
            b in 0.0..1.0f64,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let w_lo = expert_weight(lo, acc_e, alpha);
            let w_hi = expert_weight(hi, acc_e, alpha);
            prop_assert!((0.0..=1.0).contains(&w_lo));
            prop_assert!(w_hi <= w_lo + 1e-12);
            // continuity at the switch
            let at_switch = expert_weight(alpha * acc_e, acc_e, alpha);
            prop_assert!((at_switch - 1.0).abs() < 1e-12);
        }

        #[test]
        fn schedule_monotone_in_epoch(
            v1 in 0.0..1.0f64,
            total in 1usize..200,
            kind_idx in 0usize..3,
        ) {
            let kind = [ScheduleKind::Linear, ScheduleKind::Convex, ScheduleKind::Concave][kind_idx];
            let mut prev = -1.0f64;
            for e in 1..=total {
                let val = schedule_value(kind, v1, e, total).unwrap();
                prop_assert!((0.0..=1.0 + 1e-12).contains(&val));
                prop_assert!(val >= prev - 1e-12);
                prev = val;
            }
            prop_assert!((schedule_value(kind, v1, total, total).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn schedule_monotone_in_v1(
            a in 0.0..1.0f64,
            b in 0.0..1.0f64,
            total in 2usize..50,
            e in 1usize..50,
            kind_idx in 0usize..3,
        ) {
            // orderings by v1 are preserved pointwise in epoch, so within-subset
            // instance order by v matches the order by confidence
            let e = e.min(total);
            let kind = [ScheduleKind::Linear, ScheduleKind::Convex, ScheduleKind::Concave][kind_idx];
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let v_lo = schedule_value(kind, lo, e, total).unwrap();
            let v_hi = schedule_value(kind, hi, e, total).unwrap();
            prop_assert!(v_lo <= v_hi + 1e-12);
        }
    }
}
