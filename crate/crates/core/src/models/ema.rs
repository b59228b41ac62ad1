use super::net::SegNet;
use super::params::ParamRole;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default EMA decay of the teachers.
pub const EMA_DECAY: f64 = 0.99;

/// A student network and its exponential-moving-average teacher.
///
/// Only trainable student parameters are tracked; frozen ones are shared
/// values copied once at construction.
#[derive(Clone, Debug)]
pub struct TeacherStudentPair<N> {
    pub student: N,
    pub teacher: N,
    decay: f64,
}

impl<N> TeacherStudentPair<N> {
    pub fn decay(&self) -> f64 {
        self.decay
    }
}

impl<N> TeacherStudentPair<N> {
    pub fn new<T: Scalar>(student: N, decay: f64) -> Result<Self>
    where
        N: SegNet<T>,
    {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!("EMA decay {decay} outside [0, 1]")));
        }
        let teacher = student.clone();
        Ok(Self {
            student,
            teacher,
            decay,
        })
    }

    /// `θ̂ ← d·θ̂ + (1 − d)·θ` for every trainable student parameter.
    pub fn ema_update<T: Scalar>(&mut self) -> Result<()>
    where
        N: SegNet<T>,
    {
        self.teacher.params().check_aligned(self.student.params())?;
        let d = T::lit(self.decay);
        let one_minus = T::lit(1.0 - self.decay);
        let student = self.student.params();
        for (tp, sp) in self.teacher.params_mut().params_mut().zip(student.iter()) {
            if sp.role != ParamRole::Trainable {
                continue;
            }
            for (t, &s) in tp.value.data_mut().iter_mut().zip(sp.value.data()) {
                *t = d * *t + one_minus * s;
            }
        }
        Ok(())
    }
}
