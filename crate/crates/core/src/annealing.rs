//! Validation-gated density annealing.
//!
//! The accuracy target decays linearly with every example seen. Whenever a
//! periodic validation pass beats the current target, the sparsity layer's
//! density is multiplied by `delta_update` and the target is raised to the
//! accuracy just achieved.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparsity::SparsityState;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealConfig {
    /// Examples between validation passes.
    pub eval_every: u64,
    pub batch_size: usize,
    /// Target decay per example seen.
    pub target_decay: f64,
    pub delta_update: f64,
    /// Densities below this floor are never scheduled.
    pub delta_min: f64,
    pub initial_target: f64,
    /// When false, validation still runs and is logged but the density never
    /// changes.
    pub enabled: bool,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            eval_every: 20_000,
            batch_size: 10,
            target_decay: 1e-6,
            delta_update: 0.75,
            delta_min: 0.0,
            initial_target: 1.0,
            enabled: true,
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_update > 0.0 && self.delta_update < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "delta_update {} outside (0, 1)",
                self.delta_update
            )));
        }
        if self.eval_every == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "eval_every and batch_size must be positive".into(),
            ));
        }
        if self.target_decay < 0.0 || !self.target_decay.is_finite() {
            return Err(Error::InvalidArgument("target_decay must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// One validation pass, as logged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealEvent {
    pub examples: u64,
    pub accuracy: f64,
    pub target: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnealState {
    pub config: AnnealConfig,
    examples: u64,
    steps: u64,
    // The target is anchor_target - (examples - anchor_examples) * decay,
    // which avoids drift from repeated subtraction.
    anchor_target: f64,
    anchor_examples: u64,
    reductions: u32,
    log: Vec<AnnealEvent>,
}

impl AnnealState {
    pub fn new(config: AnnealConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            anchor_target: config.initial_target,
            config,
            examples: 0,
            steps: 0,
            anchor_examples: 0,
            reductions: 0,
            log: Vec::new(),
        })
    }

    pub fn examples(&self) -> u64 {
        self.examples
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn reductions(&self) -> u32 {
        self.reductions
    }

    pub fn target(&self) -> f64 {
        self.anchor_target - (self.examples - self.anchor_examples) as f64 * self.config.target_decay
    }

    pub fn log(&self) -> &[AnnealEvent] {
        &self.log
    }

    /// Accounts for one training step of `batch_size` examples and, on a
    /// validation boundary, runs `validate` and applies the density gate.
    pub fn step(
        &mut self,
        sparsity: &mut SparsityState,
        validate: impl FnOnce() -> Result<f64>,
    ) -> Result<Option<AnnealEvent>> {
        if !self.advance() {
            return Ok(None);
        }
        let accuracy = validate().map_err(|e| Error::Validation(e.to_string()))?;
        self.record(accuracy, Some(sparsity)).map(Some)
    }

    /// Counts one training step; true when a validation pass is due.
    pub fn advance(&mut self) -> bool {
        self.examples += self.config.batch_size as u64;
        self.steps += 1;
        self.examples.is_multiple_of(self.config.eval_every)
    }

    /// Whether a validation accuracy would reduce the density `delta`.
    pub fn would_reduce(&self, accuracy: f64, delta: f64) -> bool {
        self.config.enabled
            && accuracy > self.target()
            && delta * self.config.delta_update >= self.config.delta_min
    }

    /// Applies the gate for one validation result and logs it. Without a
    /// sparsity state the event is only logged, with density 1.
    pub fn record(&mut self, accuracy: f64, sparsity: Option<&mut SparsityState>) -> Result<AnnealEvent> {
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::Validation(format!("accuracy {accuracy} outside [0, 1]")));
        }
        let delta = match sparsity {
            Some(sp) => {
                if self.would_reduce(accuracy, sp.delta()) {
                    sp.set_delta(sp.delta() * self.config.delta_update)?;
                    self.anchor_target = accuracy;
                    self.anchor_examples = self.examples;
                    self.reductions += 1;
                }
                sp.delta()
            }
            None => 1.0,
        };
        let event = AnnealEvent {
            examples: self.examples,
            accuracy,
            target: self.target(),
            delta,
        };
        self.log.push(event);
        Ok(event)
    }
}

/// Turns an event log into the density plateaus it implies: `(examples at
/// which the plateau starts, density)`.
pub fn schedule_replay(log: &[AnnealEvent], initial_delta: f64) -> Result<Vec<(u64, f64)>> {
    if !(initial_delta > 0.0 && initial_delta <= 1.0) {
        return Err(Error::InvalidArgument(format!("initial density {initial_delta}")));
    }
    let mut plateaus = vec![(0u64, initial_delta)];
    let mut last_examples = 0u64;
    for (i, e) in log.iter().enumerate() {
        if i > 0 && e.examples <= last_examples {
            return Err(Error::Format(format!(
                "event {i}: examples {} not after {last_examples}",
                e.examples
            )));
        }
        if !(e.delta > 0.0 && e.delta.is_finite()) || !(0.0..=1.0).contains(&e.accuracy) {
            return Err(Error::Format(format!("event {i} holds out-of-range values")));
        }
        last_examples = e.examples;
        let current = plateaus.last().expect("non-empty").1;
        if e.delta > current {
            return Err(Error::Format(format!(
                "event {i}: density rose from {current} to {}",
                e.delta
            )));
        }
        if e.delta < current {
            plateaus.push((e.examples, e.delta));
        }
    }
    Ok(plateaus)
}

pub fn write_event_log(w: &mut impl Write, log: &[AnnealEvent]) -> Result<()> {
    for e in log {
        serde_json::to_writer(&mut *w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_event_log(r: impl BufRead) -> Result<Vec<AnnealEvent>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: AnnealEvent = serde_json::from_str(&line)
            .map_err(|err| Error::Format(format!("event log line {}: {err}", i + 1)))?;
        out.push(e);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparsity::ThresholdVariant;

    fn every_step(decay: f64) -> AnnealConfig {
        AnnealConfig {
            eval_every: 10,
            batch_size: 10,
            target_decay: decay,
            ..AnnealConfig::default()
        }
    }

    #[test]
    fn gate_met_reduces_density_and_raises_target() {
        let mut st = AnnealState::new(AnnealConfig {
            initial_target: 0.90,
            ..every_step(0.0)
        })
        .unwrap();
        let mut sp = SparsityState::new(4, 0.01, ThresholdVariant::PerChannel).unwrap();
        let e = st.step(&mut sp, || Ok(0.93)).unwrap().unwrap();
        assert_eq!(sp.delta(), 0.0075);
        assert_eq!(st.target(), 0.93);
        assert_eq!((e.delta, e.target, e.accuracy), (0.0075, 0.93, 0.93));
    }

    #[test]
    fn gate_missed_leaves_density() {
        let mut st = AnnealState::new(AnnealConfig {
            initial_target: 0.95,
            ..every_step(1e-4)
        })
        .unwrap();
        let mut sp = SparsityState::new(4, 0.01, ThresholdVariant::PerChannel).unwrap();
        st.step(&mut sp, || Ok(0.93)).unwrap();
        assert_eq!(sp.delta(), 0.01);
        assert!(st.target() < 0.95);
        assert_eq!(st.reductions(), 0);
    }

    #[test]
    fn linear_target_decay() {
        let mut st = AnnealState::new(AnnealConfig {
            eval_every: u64::MAX,
            batch_size: 10,
            target_decay: 1e-7,
            ..AnnealConfig::default()
        })
        .unwrap();
        let mut sp = SparsityState::new(1, 0.5, ThresholdVariant::PerChannel).unwrap();
        for _ in 0..100_000 {
            st.step(&mut sp, || unreachable!()).unwrap();
        }
        assert_eq!(st.target(), 0.9);
    }

    #[test]
    fn validation_errors_abort() {
        let mut st = AnnealState::new(every_step(0.0)).unwrap();
        let mut sp = SparsityState::new(1, 0.5, ThresholdVariant::PerChannel).unwrap();
        let r = st.step(&mut sp, || Err(Error::InvalidArgument("boom".into())));
        assert!(matches!(r, Err(Error::Validation(_))));
        assert!(matches!(st.step(&mut sp, || Ok(1.5)), Err(Error::Validation(_))));
    }

    #[test]
    fn floor_stops_annealing() {
        let mut st = AnnealState::new(AnnealConfig {
            delta_min: 0.006,
            initial_target: 0.0,
            ..every_step(0.0)
        })
        .unwrap();
        let mut sp = SparsityState::new(1, 0.01, ThresholdVariant::PerChannel).unwrap();
        st.step(&mut sp, || Ok(0.5)).unwrap();
        assert_eq!(sp.delta(), 0.0075);
        st.step(&mut sp, || Ok(0.6)).unwrap();
        assert_eq!(sp.delta(), 0.0075);
    }

    #[test]
    fn replay_shapes() {
        assert_eq!(schedule_replay(&[], 0.05).unwrap(), vec![(0, 0.05)]);
        let ev = |examples, delta| AnnealEvent {
            examples,
            accuracy: 0.9,
            target: 0.9,
            delta,
        };
        let d1 = 0.05 * 0.75;
        let d2 = d1 * 0.75;
        let log = [ev(10, 0.05), ev(20, d1), ev(30, d1), ev(40, d2)];
        let plateaus = schedule_replay(&log, 0.05).unwrap();
        assert_eq!(plateaus, vec![(0, 0.05), (20, d1), (40, d2)]);
        let mut expected = 0.05;
        for (_, d) in &plateaus {
            assert_eq!(*d, expected);
            expected *= 0.75;
        }
        assert!(schedule_replay(&[ev(20, 0.01), ev(10, 0.01)], 0.05).is_err());
        assert!(schedule_replay(&[ev(20, 0.01), ev(30, 0.02)], 0.05).is_err());
    }

    #[test]
    fn event_log_json_lines() {
        let log = vec![AnnealEvent {
            examples: 20000,
            accuracy: 0.5,
            target: 0.98,
            delta: 0.05,
        }];
        let mut buf = Vec::new();
        write_event_log(&mut buf, &log).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text,
            "{\"examples\":20000,\"accuracy\":0.5,\"target\":0.98,\"delta\":0.05}\n"
        );
        assert_eq!(read_event_log(buf.as_slice()).unwrap(), log);
        assert!(read_event_log("{\"examples\":1}\n".as_bytes()).is_err());
    }
}
