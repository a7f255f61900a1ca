//! Per-step records and their window aggregates.

use serde::{Deserialize, Serialize};

/// `(correct, counted)` pair.
pub type Tally = (usize, usize);

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss_total: f64,
    pub loss_mlm: f64,
    pub loss_disc: f64,
    pub loss_aux: f64,
    /// Accuracy of the head that produced the training loss.
    pub rtd: Tally,
    pub replaced: usize,
    pub content: usize,
    pub exit: Option<usize>,
    pub rtd_per_exit: Vec<Option<Tally>>,
    pub mlm_per_exit: Vec<Option<Tally>>,
    pub rtd_per_section: Vec<Option<Tally>>,
    pub grad_norm: f64,
}

impl StepMetrics {
    pub fn rtd_acc(&self) -> f64 {
        ratio(self.rtd.0 as u64, self.rtd.1 as u64).unwrap_or(0.0)
    }
}

fn ratio(a: u64, b: u64) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

/// One closed window, written as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsWindow {
    pub step: usize,
    pub start_step: usize,
    pub variant: String,
    pub rtd_acc: f64,
    pub rtd_acc_per_exit: Vec<Option<f64>>,
    pub mlm_acc_per_exit: Vec<Option<f64>>,
    pub p_vector: Vec<f64>,
    pub loss_total: f64,
    pub loss_mlm: f64,
    pub loss_disc: f64,
    pub loss_aux: f64,
    pub steps_per_sec: f64,
    pub replaced_fraction: f64,
    pub exit_counts: Vec<usize>,
    pub rtd_acc_per_section: Vec<Option<f64>>,
    pub active_section: Option<usize>,
    pub threshold: Option<f64>,
    pub controller_diff: Option<f64>,
}

impl MetricsWindow {
    /// Copy with timing zeroed, for run-to-run comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            steps_per_sec: 0.0,
            ..self.clone()
        }
    }
}

fn add_tallies(sum: &mut Vec<(u64, u64)>, items: &[Option<Tally>]) {
    if sum.len() < items.len() {
        sum.resize(items.len(), (0, 0));
    }
    for (s, t) in sum.iter_mut().zip(items) {
        if let Some((c, n)) = t {
            s.0 += *c as u64;
            s.1 += *n as u64;
        }
    }
}

/// Running sums for the open window.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowAccumulator {
    pub start_step: usize,
    pub steps: usize,
    loss_total: f64,
    loss_mlm: f64,
    loss_disc: f64,
    loss_aux: f64,
    rtd: (u64, u64),
    replaced: (u64, u64),
    rtd_per_exit: Vec<(u64, u64)>,
    mlm_per_exit: Vec<(u64, u64)>,
    rtd_per_section: Vec<(u64, u64)>,
    exit_counts: Vec<usize>,
}

impl WindowAccumulator {
    pub fn new(start_step: usize) -> Self {
        Self {
            start_step,
            ..Self::default()
        }
    }

    pub fn push(&mut self, m: &StepMetrics) {
        self.steps += 1;
        self.loss_total += m.loss_total;
        self.loss_mlm += m.loss_mlm;
        self.loss_disc += m.loss_disc;
        self.loss_aux += m.loss_aux;
        self.rtd.0 += m.rtd.0 as u64;
        self.rtd.1 += m.rtd.1 as u64;
        self.replaced.0 += m.replaced as u64;
        self.replaced.1 += m.content as u64;
        add_tallies(&mut self.rtd_per_exit, &m.rtd_per_exit);
        add_tallies(&mut self.mlm_per_exit, &m.mlm_per_exit);
        add_tallies(&mut self.rtd_per_section, &m.rtd_per_section);
        if let Some(e) = m.exit {
            if self.exit_counts.len() <= e {
                self.exit_counts.resize(e + 1, 0);
            }
            self.exit_counts[e] += 1;
        }
    }

    pub fn rtd_acc(&self) -> f64 {
        ratio(self.rtd.0, self.rtd.1).unwrap_or(0.0)
    }

    /// Window means; the caller fills the controller and section fields.
    pub fn close(&self, step: usize, variant: &str, elapsed_secs: f64) -> MetricsWindow {
        let n = self.steps.max(1) as f64;
        let accs = |v: &[(u64, u64)]| v.iter().map(|(c, k)| ratio(*c, *k)).collect::<Vec<_>>();
        MetricsWindow {
            step,
            start_step: self.start_step,
            variant: variant.to_string(),
            rtd_acc: self.rtd_acc(),
            rtd_acc_per_exit: accs(&self.rtd_per_exit),
            mlm_acc_per_exit: accs(&self.mlm_per_exit),
            p_vector: Vec::new(),
            loss_total: self.loss_total / n,
            loss_mlm: self.loss_mlm / n,
            loss_disc: self.loss_disc / n,
            loss_aux: self.loss_aux / n,
            steps_per_sec: self.steps as f64 / elapsed_secs.max(1e-9),
            replaced_fraction: ratio(self.replaced.0, self.replaced.1).unwrap_or(0.0),
            exit_counts: self.exit_counts.clone(),
            rtd_acc_per_section: accs(&self.rtd_per_section),
            active_section: None,
            threshold: None,
            controller_diff: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_accuracy_gives_that_window_accuracy() {
        let mut w = WindowAccumulator::new(1);
        for i in 0..100 {
            let n = 10 * (1 + i % 7);
            w.push(&StepMetrics {
                rtd: (n * 8 / 10, n),
                ..StepMetrics::default()
            });
        }
        assert_eq!(w.close(100, "baseline", 1.0).rtd_acc, 0.8);
    }

    #[test]
    fn steps_per_sec_is_steps_over_duration() {
        let mut w = WindowAccumulator::new(1);
        for _ in 0..100 {
            w.push(&StepMetrics::default());
        }
        let m = w.close(100, "baseline", 4.0);
        assert_eq!(m.steps_per_sec, 25.0);
        assert!(m.steps_per_sec > 0.0);
    }

    #[test]
    fn per_exit_tallies_skip_missing_steps() {
        let mut w = WindowAccumulator::new(1);
        w.push(&StepMetrics {
            rtd_per_exit: vec![Some((1, 2)), None],
            exit: Some(1),
            ..StepMetrics::default()
        });
        w.push(&StepMetrics {
            rtd_per_exit: vec![Some((2, 2)), Some((0, 4))],
            exit: Some(1),
            ..StepMetrics::default()
        });
        let m = w.close(2, "adaptive-gen", 1.0);
        assert_eq!(m.rtd_acc_per_exit, vec![Some(0.75), Some(0.0)]);
        assert_eq!(m.exit_counts, vec![0, 2]);
    }
}
