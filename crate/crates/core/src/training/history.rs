/// One epoch of training.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub outer: usize,
    pub epoch: usize,
    /// Mean task loss over the epoch's minibatches.
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation loss plus the constraint terms.
    pub val_objective: f64,
    pub h: f64,
    pub lambda: f64,
    pub penalty: f64,
    /// Wall-clock seconds of the optimizer pass.
    pub seconds: f64,
}

pub const HISTORY_HEADER: &str = "outer,epoch,train_loss,val_loss,val_objective,h_A,lambda,c,seconds";

pub fn history_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.outer, r.epoch, r.train_loss, r.val_loss, r.val_objective, r.h, r.lambda, r.penalty, r.seconds
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_one_line_per_record() {
        let r = EpochRecord {
            outer: 1,
            epoch: 2,
            train_loss: 0.5,
            val_loss: 0.25,
            val_objective: 0.375,
            h: 1e-9,
            lambda: 0.0,
            penalty: 1.0,
            seconds: 0.1,
        };
        let csv = history_csv(&[r.clone(), r]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "1,2,0.5,0.25,0.375,0.000000001,0,1,0.1");
    }
}
