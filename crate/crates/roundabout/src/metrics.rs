//! Per-trip and aggregate performance accounting.
//!
//! Each completed trip contributes its travel time and control energy; the
//! combined objective is beta * time + energy with beta derived from the
//! energy/time trade-off weight.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One completed (or in-progress) trip.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TripRecord {
    pub cav: u64,
    pub entry_cz: usize,
    pub exit_cz: usize,
    pub entry_time: f64,
    pub exit_time: Option<f64>,
    pub energy: f64,
}

impl TripRecord {
    pub fn travel_time(&self) -> Option<f64> {
        self.exit_time.map(|t| t - self.entry_time)
    }
}

/// Energy increment of one control step: (1/2) u^2 Td.
pub fn record_energy(u: f64, td: f64) -> f64 {
    0.5 * u * u * td
}

/// Aggregate row grouped by origin CZ.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CzMetrics {
    pub cz: usize,
    pub trips: usize,
    pub avg_time: f64,
    pub avg_energy: f64,
    pub avg_objective: f64,
}

/// The summary document of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub controller: String,
    pub horizon: usize,
    pub seed: u64,
    pub duration: f64,
    pub beta: f64,
    pub arrivals: usize,
    pub exits: usize,
    pub in_system: usize,
    pub queued: usize,
    pub total_time: f64,
    pub total_energy: f64,
    pub total_objective: f64,
    pub per_cz: Vec<CzMetrics>,
    pub infeasible_count: usize,
    pub unsafe_count: usize,
    pub fallback_steps: usize,
    /// Hash of the arrival trace consumed by the run.
    pub arrival_trace_hash: u64,
    /// Mean wall-clock time of one horizon-QP solve (ms), when measured.
    pub avg_qp_solve_ms: f64,
}

impl MetricsSummary {
    /// Builds the aggregate from completed trips; in-flight trips count
    /// toward `in_system` but not toward the totals.
    #[allow(clippy::too_many_arguments)]
    pub fn from_trips(
        controller: &str,
        horizon: usize,
        seed: u64,
        duration: f64,
        beta: f64,
        trips: &[TripRecord],
        queued: usize,
        infeasible_count: usize,
        unsafe_count: usize,
        fallback_steps: usize,
        arrival_trace_hash: u64,
        avg_qp_solve_ms: f64,
    ) -> Self {
        let exited: Vec<&TripRecord> = trips.iter().filter(|t| t.exit_time.is_some()).collect();
        let total_time: f64 = exited.iter().map(|t| t.travel_time().unwrap()).sum();
        let total_energy: f64 = exited.iter().map(|t| t.energy).sum();
        let total_objective = beta * total_time + total_energy;

        let mut groups: BTreeMap<usize, Vec<&TripRecord>> = BTreeMap::new();
        for t in &exited {
            groups.entry(t.entry_cz).or_default().push(t);
        }
        let per_cz = groups
            .into_iter()
            .map(|(cz, members)| {
                let n = members.len() as f64;
                let time: f64 = members.iter().map(|t| t.travel_time().unwrap()).sum();
                let energy: f64 = members.iter().map(|t| t.energy).sum();
                CzMetrics {
                    cz,
                    trips: members.len(),
                    avg_time: time / n,
                    avg_energy: energy / n,
                    avg_objective: (beta * time + energy) / n,
                }
            })
            .collect();

        MetricsSummary {
            controller: controller.to_string(),
            horizon,
            seed,
            duration,
            beta,
            arrivals: trips.len() + queued,
            exits: exited.len(),
            in_system: trips.len() - exited.len(),
            queued,
            total_time,
            total_energy,
            total_objective,
            per_cz,
            infeasible_count,
            unsafe_count,
            fallback_steps,
            arrival_trace_hash,
            avg_qp_solve_ms,
        }
    }

    /// Checks the accounting identity total = beta * time + energy.
    pub fn objective_identity_error(&self) -> f64 {
        let expected = self.beta * self.total_time + self.total_energy;
        if expected.abs() < 1e-12 {
            (self.total_objective - expected).abs()
        } else {
            ((self.total_objective - expected) / expected).abs()
        }
    }
}
