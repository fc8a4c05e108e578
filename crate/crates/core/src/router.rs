//! Difficulty-aware routing: sliding-window threshold and tier assignment.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Hard,
    Medium,
    Easy,
}

impl Tier {
    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Hard => "hard",
            Tier::Medium => "medium",
            Tier::Easy => "easy",
        }
    }
}

/// `p = 0` is Hard, `0 < p <= eta` is Medium, `p > eta` is Easy.
pub fn route(p: f64, eta: f64) -> Tier {
    if p == 0.0 {
        Tier::Hard
    } else if p <= eta {
        Tier::Medium
    } else {
        Tier::Easy
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterState {
    window: usize,
    pass_means: VecDeque<f64>,
    gain_means: VecDeque<f64>,
    step: usize,
}

impl RouterState {
    pub fn new(window: usize) -> Self {
        assert!(window > 0, "window must be positive");
        Self {
            window,
            pass_means: VecDeque::with_capacity(window),
            gain_means: VecDeque::with_capacity(window),
            step: 0,
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn pass_means(&self) -> &VecDeque<f64> {
        &self.pass_means
    }

    pub fn gain_means(&self) -> &VecDeque<f64> {
        &self.gain_means
    }

    /// Pushes the current batch mean, then returns the mean of the last
    /// `min(W, t)` batch means.
    pub fn threshold(&mut self, current_batch_mean: f64) -> f64 {
        push(&mut self.pass_means, self.window, current_batch_mean);
        self.step += 1;
        mean(&self.pass_means)
    }

    /// Mean of the buffered gain means; 0 before any gain was recorded.
    pub fn utilization_anchor(&self) -> f64 {
        if self.gain_means.is_empty() {
            0.0
        } else {
            mean(&self.gain_means)
        }
    }

    /// Records a batch mean gain. Call after the batch's advantages are formed.
    pub fn push_gain_mean(&mut self, gain: f64) {
        push(&mut self.gain_means, self.window, gain);
    }
}

fn push(buf: &mut VecDeque<f64>, window: usize, v: f64) {
    if buf.len() == window {
        buf.pop_front();
    }
    buf.push_back(v);
}

fn mean(buf: &VecDeque<f64>) -> f64 {
    buf.iter().sum::<f64>() / buf.len() as f64
}
