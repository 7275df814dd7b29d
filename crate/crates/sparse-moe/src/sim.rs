//! Analytical cost model for running sparse expert layers under mixed data
//! and model parallelism.
//!
//! Each of `d` devices holds a data-parallel shard of the batch while the
//! experts themselves are model-parallel: one shard of the expert set per
//! device. Every expert therefore sees the k-of-n routed fraction of the
//! combined batch, `k*b*d/n` examples per step, instead of the `k*b/n` it
//! would get from one device's batch alone. Keeping that number high enough
//! to amortize weight traffic is the whole game, so the model reports the
//! compute-to-I/O ratio of an expert (exactly the hidden size for a
//! one-hidden-layer expert with equal input and output widths) and a
//! roofline-style efficiency bound against the device's compute-to-bandwidth
//! ratio. Closed-form throughout; nothing is simulated event by event.

use crate::error::{Error, Result};
use serde::Deserialize;

/// One cluster and expert configuration to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    /// Devices `d` combining their data-parallel batches.
    pub devices: u64,
    /// Examples per device per step, `b`.
    pub per_device_batch: u64,
    /// Total experts `n` across the cluster.
    pub experts: u64,
    /// Experts consulted per example, `k`.
    pub active_k: u64,
    /// Hidden width `h` of one expert's single hidden layer.
    pub expert_hidden: u64,
    /// Expert input and output width.
    pub model_dim: u64,
    /// Peak device throughput in multiply-adds per second.
    pub device_flops: f64,
    /// Link throughput in values per second.
    pub link_bandwidth: f64,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.devices,
            self.per_device_batch,
            self.experts,
            self.active_k,
            self.expert_hidden,
            self.model_dim,
        ];
        if counts.contains(&0) {
            return Err(Error::invalid(
                "cluster spec: every count must be positive".to_string(),
            ));
        }
        if self.active_k > self.experts {
            return Err(Error::invalid(format!(
                "cluster spec: active_k {} exceeds experts {}",
                self.active_k, self.experts
            )));
        }
        if !(self.device_flops > 0.0) || !(self.link_bandwidth > 0.0) {
            return Err(Error::invalid(
                "cluster spec: device_flops and link_bandwidth must be positive".to_string(),
            ));
        }
        Ok(())
    }

    /// Examples per expert per step with the data-parallel batches combined:
    /// k*b*d/n.
    pub fn expert_batch_size(&self) -> f64 {
        (self.active_k * self.per_device_batch * self.devices) as f64 / self.experts as f64
    }

    /// Examples per expert if each device routed only its own batch: k*b/n.
    pub fn naive_expert_batch_size(&self) -> f64 {
        (self.active_k * self.per_device_batch) as f64 / self.experts as f64
    }

    /// Forward multiply-adds to push one example through one expert:
    /// in*h + h*out.
    pub fn compute_per_expert_example(&self) -> f64 {
        (2 * self.model_dim * self.expert_hidden) as f64
    }

    /// The same work counted as two operations per multiply-add.
    pub fn compute_per_expert_example_flops(&self) -> f64 {
        2.0 * self.compute_per_expert_example()
    }

    /// Values moved in and out per expert example: in + out.
    pub fn io_per_expert_example(&self) -> f64 {
        (2 * self.model_dim) as f64
    }

    /// Multiply-adds per value of I/O. Exactly `expert_hidden` for the
    /// one-hidden-layer expert with equal input and output widths.
    pub fn compute_io_ratio(&self) -> f64 {
        self.compute_per_expert_example() / self.io_per_expert_example()
    }

    /// Roofline bound: fraction of peak compute sustainable given the
    /// device's multiply-adds-per-value appetite.
    pub fn predicted_efficiency(&self) -> f64 {
        let machine_ratio = self.device_flops / self.link_bandwidth;
        (self.compute_io_ratio() / machine_ratio).min(1.0)
    }

    /// Expert parameter values resident per device: n/d experts of
    /// 2*model_dim*h each.
    pub fn per_device_expert_params(&self) -> f64 {
        self.experts as f64 / self.devices as f64 * (2 * self.model_dim * self.expert_hidden) as f64
    }

    pub fn report(&self) -> Result<SimReport> {
        self.validate()?;
        Ok(SimReport {
            spec: *self,
            expert_batch: self.expert_batch_size(),
            naive_expert_batch: self.naive_expert_batch_size(),
            compute_per_expert_example: self.compute_per_expert_example(),
            compute_per_expert_example_flops: self.compute_per_expert_example_flops(),
            io_per_expert_example: self.io_per_expert_example(),
            compute_io_ratio: self.compute_io_ratio(),
            predicted_efficiency: self.predicted_efficiency(),
        })
    }
}

/// Derived quantities for one spec.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimReport {
    pub spec: ClusterSpec,
    pub expert_batch: f64,
    pub naive_expert_batch: f64,
    pub compute_per_expert_example: f64,
    pub compute_per_expert_example_flops: f64,
    pub io_per_expert_example: f64,
    pub compute_io_ratio: f64,
    pub predicted_efficiency: f64,
}

pub const SWEEP_CSV_HEADER: &str = "devices,per_device_batch,experts,active_k,expert_hidden,model_dim,device_flops,link_bandwidth,expert_batch,naive_expert_batch,io_per_expert_example,compute_per_expert_example_macs,compute_per_expert_example_flops,compute_io_ratio,predicted_efficiency";

impl SimReport {
    pub fn csv_row(&self) -> String {
        let s = &self.spec;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.devices,
            s.per_device_batch,
            s.experts,
            s.active_k,
            s.expert_hidden,
            s.model_dim,
            s.device_flops,
            s.link_bandwidth,
            self.expert_batch,
            self.naive_expert_batch,
            self.io_per_expert_example,
            self.compute_per_expert_example,
            self.compute_per_expert_example_flops,
            self.compute_io_ratio,
            self.predicted_efficiency,
        )
    }
}

/// Evaluate every spec and render a CSV table, header first.
pub fn efficiency_sweep(specs: &[ClusterSpec]) -> Result<String> {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for spec in specs {
        out.push_str(&spec.report()?.csv_row());
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    spec: Vec<ClusterSpec>,
}

/// Parse a sweep config: TOML with one `[[spec]]` block per configuration,
/// using the `ClusterSpec` field names.
pub fn parse_sweep_config(text: &str) -> Result<Vec<ClusterSpec>> {
    let file: SweepFile =
        toml::from_str(text).map_err(|e| Error::Config(format!("sweep config: {e}")))?;
    if file.spec.is_empty() {
        return Err(Error::Config("sweep config: no [[spec]] entries".into()));
    }
    for s in &file.spec {
        s.validate()?;
    }
    Ok(file.spec)
}
