use crate::error::{Error, Result};

/// Damping factor of the adversarial loss weight.
pub const DAMPING: f64 = 0.99;

/// Weight schedule of the adversarial term: `(1 + s t) / T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSchedule {
    pub damping: f64,
    pub total: u64,
}

impl LossSchedule {
    pub fn new(damping: f64, total: u64) -> Result<Self> {
        if total == 0 {
            return Err(Error::Config("loss schedule needs at least one iteration".into()));
        }
        if !damping.is_finite() {
            return Err(Error::Config("damping factor must be finite".into()));
        }
        Ok(Self { damping, total })
    }

    pub fn weight(&self, t: u64) -> Result<f64> {
        adversarial_weight(self, t)
    }
}

pub fn adversarial_weight(schedule: &LossSchedule, t: u64) -> Result<f64> {
    if schedule.total == 0 {
        return Err(Error::Config("loss schedule with T = 0".into()));
    }
    if t > schedule.total {
        return Err(Error::InvalidArgument(format!(
            "iteration {t} is past the schedule end {}",
            schedule.total
        )));
    }
    Ok((1.0 + schedule.damping * t as f64) / schedule.total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_points() {
        let s = LossSchedule::new(DAMPING, 1000).unwrap();
        assert!((s.weight(0).unwrap() - 0.001).abs() < 1e-18);
        assert!((s.weight(1000).unwrap() - 0.991).abs() < 1e-15);
        assert!(s.weight(1001).is_err());
        assert!(LossSchedule::new(DAMPING, 0).is_err());
    }

    #[test]
    fn weight_never_decreases() {
        let s = LossSchedule::new(DAMPING, 777).unwrap();
        let mut prev = 0.0;
        for t in 0..=777 {
            let w = s.weight(t).unwrap();
            assert!(w >= prev);
            prev = w;
        }
        assert_eq!(s.weight(0).unwrap(), 1.0 / 777.0);
    }
}
