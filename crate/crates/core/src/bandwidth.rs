//! Compute utilization versus cross-datacenter bandwidth.
//!
//! `CU = T_math / (T_math + T_comm)`. Data-parallel all-reduces the whole
//! model every step; decoupled training all-reduces one fragment per step and
//! hides it under `overlap` steps of compute.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BwMethod {
    Dp,
    Decoupled,
    DecoupledInt4,
}

impl BwMethod {
    pub const ALL: [BwMethod; 3] = [BwMethod::Dp, BwMethod::Decoupled, BwMethod::DecoupledInt4];

    pub fn name(self) -> &'static str {
        match self {
            BwMethod::Dp => "dp",
            BwMethod::Decoupled => "decoupled",
            BwMethod::DecoupledInt4 => "decoupled_int4",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthQuery {
    pub model_bits: f64,
    /// Pure compute time per step, seconds.
    pub step_time: f64,
    pub datacenters: usize,
    /// Bits per second.
    pub bandwidth: f64,
    pub method: BwMethod,
    pub cycle: u64,
    pub overlap: u64,
    /// Size of the largest fragment.
    pub fragment_bits: f64,
    /// Multiplier on transferred bits for protocol and precision effects.
    pub overhead: f64,
}

impl BandwidthQuery {
    /// A query for a model of `params` parameters sent at `bits_per_param`,
    /// split evenly into `fragments`.
    pub fn new(params: f64, bits_per_param: f64, fragments: usize, method: BwMethod) -> Self {
        let model_bits = params * bits_per_param;
        BandwidthQuery {
            model_bits,
            step_time: 1.0,
            datacenters: 2,
            bandwidth: 1e9,
            method,
            cycle: fragments as u64,
            overlap: 2,
            fragment_bits: model_bits / fragments as f64,
            overhead: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model_bits", self.model_bits),
            ("step_time", self.step_time),
            ("fragment_bits", self.fragment_bits),
            ("overhead", self.overhead),
        ];
        for (k, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("{k} must be positive, got {v}")));
            }
        }
        if self.datacenters < 2 {
            return Err(Error::InvalidArgument("need at least 2 datacenters".into()));
        }
        if self.bandwidth < 0.0 {
            return Err(Error::InvalidArgument("bandwidth must be >= 0".into()));
        }
        Ok(())
    }

    /// Bits each datacenter puts on the wire per step, before the ring factor.
    pub fn payload_bits(&self) -> f64 {
        let bits = match self.method {
            BwMethod::Dp => self.model_bits,
            BwMethod::Decoupled => self.fragment_bits,
            BwMethod::DecoupledInt4 => self.fragment_bits / 4.0,
        };
        bits * self.overhead
    }

    fn hidden_time(&self) -> f64 {
        match self.method {
            BwMethod::Dp => 0.0,
            _ => self.overlap as f64 * self.step_time,
        }
    }
}

/// All-reduce traffic factor on a ring of `d` participants.
pub fn ring(d: usize) -> f64 {
    2.0 * (d as f64 - 1.0) / d as f64
}

pub fn comm_time(q: &BandwidthQuery) -> f64 {
    if q.bandwidth <= 0.0 {
        return f64::INFINITY;
    }
    let transfer = q.payload_bits() * ring(q.datacenters) / q.bandwidth;
    (transfer - q.hidden_time()).max(0.0)
}

pub fn compute_utilization(q: &BandwidthQuery) -> Result<f64> {
    q.validate()?;
    let comm = comm_time(q);
    Ok(if comm.is_infinite() { 0.0 } else { q.step_time / (q.step_time + comm) })
}

/// Smallest bandwidth reaching `target` compute utilization. For decoupled
/// methods a target of 1 returns the bandwidth that just fits the transfer
/// inside the overlap window.
pub fn required_bandwidth(q: &BandwidthQuery, target: f64) -> Result<f64> {
    q.validate()?;
    let hidden = q.hidden_time();
    let reachable = if hidden > 0.0 { target > 0.0 && target <= 1.0 } else { target > 0.0 && target < 1.0 };
    if !reachable {
        return Err(Error::InvalidArgument(format!("compute utilization {target} is not reachable")));
    }
    let allowed = q.step_time * (1.0 / target - 1.0);
    Ok(q.payload_bits() * ring(q.datacenters) / (allowed + hidden))
}

pub const CU_TARGETS: [f64; 5] = [0.50, 0.75, 0.90, 0.95, 0.99];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BwRow {
    pub step_time: f64,
    pub datacenters: usize,
    pub method: BwMethod,
    /// Required bandwidth in Gbit/s, one per entry of [`CU_TARGETS`].
    pub gbps: Vec<f64>,
}

/// The four grids (1 s and 5 s steps, 2 and 8 datacenters), each with one
/// row per method.
pub fn bandwidth_table(base: &BandwidthQuery) -> Result<Vec<BwRow>> {
    let mut rows = Vec::new();
    for datacenters in [2, 8] {
        for step_time in [1.0, 5.0] {
            for method in BwMethod::ALL {
                let q = BandwidthQuery { step_time, datacenters, method, ..*base };
                let gbps = CU_TARGETS
                    .iter()
                    .map(|&cu| required_bandwidth(&q, cu).map(|b| b / 1e9))
                    .collect::<Result<_>>()?;
                rows.push(BwRow { step_time, datacenters, method, gbps });
            }
        }
    }
    Ok(rows)
}

pub fn bandwidth_csv(rows: &[BwRow]) -> String {
    let mut out = String::from("step_time,datacenters,method");
    for cu in CU_TARGETS {
        let _ = write!(out, ",cu_{:.0}", cu * 100.0);
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},{}", r.step_time, r.datacenters, r.method.name());
        for g in &r.gbps {
            let _ = write!(out, ",{g:.4}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn query(method: BwMethod) -> BandwidthQuery {
        BandwidthQuery::new(5e9, 16.0, 24, method)
    }

    #[test]
    fn ring_factor() {
        assert_eq!(ring(2), 1.0);
        assert_eq!(ring(8), 1.75);
    }

    #[test]
    fn inverse_roundtrip() {
        for method in BwMethod::ALL {
            for cu in [0.5, 0.75, 0.9, 0.99] {
                let q = query(method);
                let bw = required_bandwidth(&q, cu).unwrap();
                let got = compute_utilization(&BandwidthQuery { bandwidth: bw, ..q }).unwrap();
                assert!((got - cu).abs() < 1e-9, "{method:?} {cu} {got}");
            }
        }
    }

    #[test]
    fn transfer_under_overlap_is_hidden() {
        let q = BandwidthQuery { bandwidth: 1e12, ..query(BwMethod::Decoupled) };
        assert_eq!(compute_utilization(&q).unwrap(), 1.0);
        assert!(required_bandwidth(&query(BwMethod::Dp), 1.0).is_err());
        assert!(required_bandwidth(&query(BwMethod::Decoupled), 1.0).is_ok());
    }

    #[test]
    fn table_shape() {
        let rows = bandwidth_table(&query(BwMethod::Dp)).unwrap();
        assert_eq!(rows.len(), 12);
        let csv = bandwidth_csv(&rows);
        assert_eq!(csv.lines().count(), 13);
        assert!(csv.starts_with("step_time,datacenters,method,cu_50,cu_75,cu_90,cu_95,cu_99"));
    }
}
