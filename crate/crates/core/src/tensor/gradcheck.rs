use super::graph::Graph;
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max |numeric − analytic| / max(|analytic|, 1e-8)` over checked elements.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Elements whose ±ε perturbation crossed a leaky-ReLU kink.
    pub skipped: usize,
}

impl Graph {
    /// Central-difference check of `∂seed/∂input`.
    ///
    /// While perturbing, every stop edge carries the unperturbed value it had
    /// before the check, so the numeric derivative differentiates exactly the
    /// paths the analytic gradient does. Heaviside gates are therefore frozen
    /// at their current state. Elements whose perturbation flips the side of
    /// any leaky-ReLU kink are skipped and counted.
    pub fn finite_diff_check(&mut self, seed: &str, input: &str, epsilon: f64) -> Result<GradCheck> {
        if !(1e-7..=1e-3).contains(&epsilon) {
            return Err(Error::invalid(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
        }
        let seed_id = self
            .output_id(seed)
            .ok_or_else(|| Error::invalid(format!("no output named {seed:?}")))?;
        if !self.value(seed_id).is_scalar() {
            return Err(Error::invalid(format!(
                "finite_diff_check needs a scalar output, {seed:?} has shape {:?}",
                self.value(seed_id).shape()
            )));
        }
        let leaf = self
            .leaf_id(input)
            .ok_or_else(|| Error::invalid(format!("no leaf named {input:?}")))?;
        let analytic = self
            .backward_from(seed_id)?
            .get(input)
            .cloned()
            .expect("named leaf has a gradient entry");

        let snapshot = self.snapshot();
        let base_sig = self.kink_signature();
        let original = self.value(leaf).clone();
        let mut report = GradCheck {
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };

        let eval_at = |g: &mut Graph, i: usize, delta: f64| -> Result<(f64, bool)> {
            let v = g.leaf_value_mut(leaf);
            v.data_mut()[i] = original.data()[i] + delta;
            g.recompute(Some(&snapshot))?;
            let f = g.value(seed_id).data()[0];
            let same = g.kink_signature() == base_sig;
            g.leaf_value_mut(leaf).data_mut()[i] = original.data()[i];
            Ok((f, same))
        };

        for i in 0..original.len() {
            let (fp, okp) = eval_at(self, i, epsilon)?;
            let (fm, okm) = eval_at(self, i, -epsilon)?;
            if !(okp && okm) {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * epsilon);
            let a = analytic.data()[i];
            let rel = (numeric - a).abs() / a.abs().max(1e-8);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
        self.recompute(None)?;
        Ok(report)
    }
}
