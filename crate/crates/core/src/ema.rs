//! Teacher weights as an exponential moving average of the student's.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterSet;

/// Deep copy of the student with the update counter reset.
pub fn init_teacher(student: &ParameterSet) -> ParameterSet {
    let mut t = student.clone();
    t.iteration = 0;
    t
}

/// `teacher ← α·teacher + (1 − α)·student`, element-wise.
pub fn ema_update(teacher: &mut ParameterSet, student: &ParameterSet, alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(format!("EMA decay {alpha} outside [0, 1)")));
    }
    teacher.check_same_structure(student)?;
    let beta = 1.0 - alpha;
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (tv, &sv) in t.data.iter_mut().zip(&s.data) {
            *tv = alpha * *tv + beta * sv;
        }
    }
    teacher.iteration += 1;
    Ok(())
}

/// Decay used at a given step. A positive `ramp_iters` grows the decay
/// linearly from 0 to `decay` over that many updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct EmaSchedule {
    pub ramp_iters: u64,
}


impl EmaSchedule {
    pub fn decay_at(&self, decay: f64, step: u64) -> f64 {
        if self.ramp_iters == 0 {
            decay
        } else {
            decay * (step as f64 / self.ramp_iters as f64).min(1.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamArray;

    fn single(v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", ParamArray::new(vec![1], vec![v]).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn teacher_is_an_independent_copy() {
        let mut s = single(1.5);
        s.iteration = 7;
        let t = init_teacher(&s);
        assert!(t.values_bit_equal(&s));
        assert_eq!(t.iteration, 0);
        s.get_mut("w").unwrap().data[0] = -3.0;
        assert_eq!(t.get("w").unwrap().data[0], 1.5);
        assert!(t.all_finite());
    }

    #[test]
    fn single_update() {
        let mut t = single(0.0);
        ema_update(&mut t, &single(1.0), 0.99).unwrap();
        assert!((t.get("w").unwrap().data[0] - 0.01).abs() < 1e-15);
        assert_eq!(t.iteration, 1);

        let mut t = single(0.3);
        ema_update(&mut t, &single(0.3), 0.9).unwrap();
        assert_eq!(t.get("w").unwrap().data[0], 0.3);
    }

    #[test]
    fn structure_mismatch_rejected() {
        let mut t = single(0.0);
        let mut s = ParameterSet::new();
        s.insert("v", ParamArray::zeros(vec![1])).unwrap();
        assert!(matches!(ema_update(&mut t, &s, 0.5), Err(Error::Structure(_))));
        assert!(ema_update(&mut t, &single(0.0), 1.0).is_err());
    }

    #[test]
    fn ramp_schedule() {
        let s = EmaSchedule { ramp_iters: 10 };
        assert_eq!(s.decay_at(0.99, 0), 0.0);
        assert!((s.decay_at(0.99, 5) - 0.495).abs() < 1e-15);
        assert_eq!(s.decay_at(0.99, 50), 0.99);
        assert_eq!(EmaSchedule::default().decay_at(0.99, 0), 0.99);
    }
}
