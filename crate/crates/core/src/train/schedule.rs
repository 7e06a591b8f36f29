//! Polynomial learning-rate decay.

use super::TrainError;

/// lr(epoch) = init_lr · (1 − epoch/max_epoch)^power.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolySchedule {
    pub init_lr: f64,
    pub power: f64,
    pub max_epoch: usize,
}

impl PolySchedule {
    pub fn new(max_epoch: usize) -> Self {
        PolySchedule { init_lr: 5e-4, power: 0.9, max_epoch }
    }

    pub fn lr(&self, epoch: usize) -> Result<f64, TrainError> {
        if epoch > self.max_epoch {
            return Err(TrainError::EpochOutOfRange { epoch, max_epoch: self.max_epoch });
        }
        let frac = 1.0 - epoch as f64 / self.max_epoch as f64;
        Ok(self.init_lr * frac.powf(self.power))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_are_exact() {
        let s = PolySchedule::new(400);
        assert_eq!(s.lr(0).unwrap(), 5e-4);
        assert_eq!(s.lr(400).unwrap(), 0.0);
    }

    #[test]
    fn midpoint_matches_direct_evaluation() {
        let s = PolySchedule::new(100);
        let lr = s.lr(50).unwrap();
        let expect = 5e-4 * 0.5f64.powf(0.9);
        assert!((lr - expect).abs() < 1e-15);
        assert!((lr - 2.6794e-4).abs() < 1e-8);
    }

    #[test]
    fn strictly_decreasing() {
        let s = PolySchedule::new(37);
        let mut prev = f64::INFINITY;
        for e in 0..=37 {
            let lr = s.lr(e).unwrap();
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn out_of_range_is_contract_violation() {
        let s = PolySchedule::new(10);
        assert!(matches!(s.lr(11), Err(TrainError::EpochOutOfRange { .. })));
    }
}
