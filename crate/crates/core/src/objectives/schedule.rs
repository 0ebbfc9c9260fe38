use crate::error::{CtError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleState {
    pub current_epoch: usize,
    pub total_epochs: usize,
}

impl ScheduleState {
    pub fn new(current_epoch: usize, total_epochs: usize) -> Result<Self> {
        if current_epoch >= total_epochs {
            return Err(CtError::Config(format!(
                "epoch {current_epoch} outside a schedule of {total_epochs}"
            )));
        }
        Ok(Self {
            current_epoch,
            total_epochs,
        })
    }
}

/// Mask sizes grow linearly over training: `k` reaches `T` and `k'`
/// reaches `T / 2` in the final epoch.
pub fn schedule_mask_sizes(state: ScheduleState, pairs: usize) -> (usize, usize) {
    // Exact rational arithmetic: truncating T(e+1)/E and (T/2)(e+1)/E.
    let num = pairs * (state.current_epoch + 1);
    let k = num / state.total_epochs;
    let k_prime = num / (2 * state.total_epochs);
    (k.max(1), k_prime.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(e: usize, total: usize, t: usize) -> (usize, usize) {
        schedule_mask_sizes(ScheduleState::new(e, total).unwrap(), t)
    }

    #[test]
    fn reference_points() {
        assert_eq!(at(0, 10, 30), (3, 1));
        assert_eq!(at(9, 10, 30), (30, 15));
        assert_eq!(at(0, 100, 4), (1, 1));
    }

    #[test]
    fn epoch_out_of_range_rejected() {
        assert!(ScheduleState::new(10, 10).is_err());
    }
}
