//! Trajectory samples, the synthetic oracle scenarios, and CSV ingestion.

mod csv_io;
mod synthetic;

pub use csv_io::{
    load_trajectory_csv, read_mode_endpoints, read_mode_labels, write_dataset_csv,
    write_mode_endpoints, write_mode_labels, ModeEndpoints, ModeLabel, WindowKey,
};
pub use synthetic::{generate, generate_avoidance, generate_crossroad, ScenarioKind, ScenarioSpec};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Observed past, neighbor pasts, and ground-truth future of one agent, in scene units.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySample {
    pub scene_id: String,
    pub agent_id: String,
    /// Timestamp of `history[0]`.
    pub t_start: f64,
    /// Spacing between consecutive positions.
    pub dt: f64,
    pub history: Vec<Point>,
    pub future: Vec<Point>,
    pub neighbors: Vec<Vec<Point>>,
}

impl TrajectorySample {
    pub fn last_observed(&self) -> Point {
        *self.history.last().expect("validated sample has history")
    }

    /// Ground-truth endpoint.
    pub fn goal(&self) -> Point {
        *self.future.last().expect("validated sample has future")
    }

    pub fn time_of(&self, index: usize) -> f64 {
        self.t_start + index as f64 * self.dt
    }

    /// Timestamp of `future[j]`.
    pub fn future_time(&self, j: usize) -> f64 {
        self.time_of(self.history.len() + j)
    }

    pub fn key(&self) -> WindowKey {
        WindowKey::new(&self.scene_id, &self.agent_id, self.future_time(0))
    }

    pub fn validate(&self, t_p: usize, t_q: usize) -> Result<()> {
        if self.history.len() != t_p {
            return Err(Error::Data(format!(
                "{}/{}: history length {} != {t_p}",
                self.scene_id,
                self.agent_id,
                self.history.len()
            )));
        }
        if self.future.len() != t_q {
            return Err(Error::Data(format!(
                "{}/{}: future length {} != {t_q}",
                self.scene_id,
                self.agent_id,
                self.future.len()
            )));
        }
        if let Some(n) = self.neighbors.iter().find(|n| n.len() != t_p) {
            return Err(Error::Data(format!(
                "{}/{}: neighbor track length {} != {t_p}",
                self.scene_id,
                self.agent_id,
                n.len()
            )));
        }
        let finite = self
            .history
            .iter()
            .chain(&self.future)
            .chain(self.neighbors.iter().flatten())
            .all(|p| p[0].is_finite() && p[1].is_finite());
        if !finite {
            return Err(Error::Data(format!(
                "{}/{}: non-finite position",
                self.scene_id, self.agent_id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub t_p: usize,
    pub t_q: usize,
    pub samples: Vec<TrajectorySample>,
}

impl Dataset {
    pub fn new(t_p: usize, t_q: usize, samples: Vec<TrajectorySample>) -> Result<Self> {
        if t_p == 0 || t_q == 0 {
            return Err(Error::Config(format!(
                "t_p and t_q must be positive, got {t_p}/{t_q}"
            )));
        }
        for s in &samples {
            s.validate(t_p, t_q)?;
        }
        Ok(Self { t_p, t_q, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits off the last `fraction` of samples (held-out evaluation set).
    pub fn split_tail(mut self, fraction: f64) -> (Dataset, Dataset) {
        let n_tail = ((self.samples.len() as f64) * fraction).round() as usize;
        let tail = self
            .samples
            .split_off(self.samples.len() - n_tail.min(self.samples.len()));
        (
            Dataset {
                t_p: self.t_p,
                t_q: self.t_q,
                samples: self.samples,
            },
            Dataset {
                t_p: self.t_p,
                t_q: self.t_q,
                samples: tail,
            },
        )
    }
}
