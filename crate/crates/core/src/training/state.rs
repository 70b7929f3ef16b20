use crate::error::{Error, Result};

/// Augmented-Lagrangian hyperparameters.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct AlConfig {
    /// Penalty growth factor η > 1.
    pub eta: f64,
    /// Required progress ratio γ_al ∈ (0, 1).
    pub gamma_al: f64,
    pub dag_threshold: f64,
    pub initial_penalty: f64,
    pub max_outer: usize,
}

impl Default for AlConfig {
    fn default() -> Self {
        Self {
            eta: 5.0,
            gamma_al: 0.25,
            dag_threshold: 1e-8,
            initial_penalty: 1.0,
            max_outer: 30,
        }
    }
}

impl AlConfig {
    /// Defaults tuned by graph size.
    pub fn for_nodes(n: usize) -> Self {
        let (eta, gamma_al) = match n {
            0..=3 => (3.0, 0.3),
            4..=5 => (5.0, 0.25),
            6..=15 => (7.0, 0.21),
            16..=25 => (7.0, 0.19),
            _ => (7.0, 0.16),
        };
        Self {
            eta,
            gamma_al,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 1.0) || !(self.gamma_al > 0.0 && self.gamma_al < 1.0) {
            return Err(Error::invalid(format!(
                "need eta > 1 and gamma_al in (0, 1), got {} and {}",
                self.eta, self.gamma_al
            )));
        }
        if !(self.dag_threshold > 0.0) || !(self.initial_penalty > 0.0) || self.max_outer == 0 {
            return Err(Error::invalid("dag_threshold, initial_penalty, and max_outer must be positive"));
        }
        Ok(())
    }
}

/// Multiplier and penalty of the augmented Lagrangian across outer iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub lambda: f64,
    pub penalty: f64,
    pub config: AlConfig,
    /// `|h|` after the previous outer iteration.
    pub h_prev: Option<f64>,
    pub outer: usize,
}

impl TrainState {
    pub fn new(config: AlConfig) -> Self {
        Self {
            lambda: 0.0,
            penalty: config.initial_penalty,
            config,
            h_prev: None,
            outer: 0,
        }
    }

    /// Outer-iteration update after an inner solve ended with constraint
    /// value `h`. Returns `true` once `|h|` is below the threshold.
    pub fn finish_outer(&mut self, h: f64) -> bool {
        self.lambda += self.penalty * h;
        if let Some(prev) = self.h_prev {
            if h.abs() > self.config.gamma_al * prev {
                self.penalty *= self.config.eta;
            }
        }
        self.h_prev = Some(h.abs());
        self.outer += 1;
        h.abs() < self.config.dag_threshold
    }

    pub fn penalty_value(&self, h: f64) -> f64 {
        self.lambda * h + 0.5 * self.penalty * h * h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_outer_never_grows_penalty() {
        let mut s = TrainState::new(AlConfig::default());
        assert!(!s.finish_outer(0.4));
        assert_eq!((s.lambda, s.penalty), (0.4, 1.0));
        // 0.2 > 0.25 · 0.4 ⇒ grow
        assert!(!s.finish_outer(0.2));
        assert_eq!(s.penalty, 5.0);
        assert!((s.lambda - 0.6).abs() < 1e-15);
        // 0.01 < 0.25 · 0.2 ⇒ keep
        s.finish_outer(0.01);
        assert_eq!(s.penalty, 5.0);
        assert!(s.finish_outer(1e-9));
    }

    #[test]
    fn table_lookup_and_validation() {
        assert_eq!(AlConfig::for_nodes(5).eta, 5.0);
        assert_eq!(AlConfig::for_nodes(20).gamma_al, 0.19);
        assert_eq!(AlConfig::for_nodes(30).gamma_al, 0.16);
        let bad = AlConfig {
            eta: 1.0,
            ..AlConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
