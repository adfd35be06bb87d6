//! Analytic attention costs and a roofline latency estimate.
//!
//! Costs are exact integers counted in FLOPs and cache elements. Bytes only
//! appear inside [`roofline_latency`], which converts with the workload's
//! bytes-per-element.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Method {
    /// Plain multi-head or grouped-query attention; the normalization baseline.
    MhaGqa,
    Yoco,
    FusedKvLite,
    FusedKv,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::MhaGqa, Method::Yoco, Method::FusedKvLite, Method::FusedKv];

    pub fn name(self) -> &'static str {
        match self {
            Method::MhaGqa => "MHA/GQA",
            Method::Yoco => "YOCO",
            Method::FusedKvLite => "FusedKV-Lite",
            Method::FusedKv => "FusedKV",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "mha" | "gqa" | "mha/gqa" | "vanilla" => Ok(Method::MhaGqa),
            "yoco" => Ok(Method::Yoco),
            "fusedkvlite" | "lite" => Ok(Method::FusedKvLite),
            "fusedkv" => Ok(Method::FusedKv),
            _ => Err(Error::UnknownMethod(s.to_string())),
        }
    }
}

/// Shape of one inference workload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WorkloadSpec {
    pub layers: u64,
    /// Prefill length, also the length the cache is sized for.
    pub seq_len: u64,
    /// Context length seen by the decode step being costed.
    pub decode_pos: u64,
    pub head_dim: u64,
    pub q_heads: u64,
    pub kv_heads: u64,
    pub bytes_per_elem: u64,
}

impl WorkloadSpec {
    /// Decode position defaults to `seq_len`, elements to 2 bytes.
    pub fn new(layers: u64, seq_len: u64, head_dim: u64, q_heads: u64, kv_heads: u64) -> Result<Self> {
        WorkloadSpec {
            layers,
            seq_len,
            decode_pos: seq_len,
            head_dim,
            q_heads,
            kv_heads,
            bytes_per_elem: 2,
        }
        .validated()
    }

    pub fn with_decode_pos(mut self, pos: u64) -> Result<Self> {
        self.decode_pos = pos;
        self.validated()
    }

    pub fn with_bytes_per_elem(mut self, bytes: u64) -> Result<Self> {
        self.bytes_per_elem = bytes;
        self.validated()
    }

    pub fn with_seq_len(mut self, seq_len: u64) -> Result<Self> {
        self.seq_len = seq_len;
        self.decode_pos = seq_len;
        self.validated()
    }

    fn validated(self) -> Result<Self> {
        let fields = [
            ("layers", self.layers),
            ("seq_len", self.seq_len),
            ("decode_pos", self.decode_pos),
            ("head_dim", self.head_dim),
            ("q_heads", self.q_heads),
            ("kv_heads", self.kv_heads),
            ("bytes_per_elem", self.bytes_per_elem),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("workload {name} must be positive")));
        }
        if self.kv_heads > self.q_heads {
            return Err(Error::Config(format!(
                "kv_heads {} exceeds q_heads {}",
                self.kv_heads, self.q_heads
            )));
        }
        Ok(self)
    }
}

/// Peak compute and memory bandwidth of one accelerator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceProfile {
    pub label: String,
    /// FLOP/s.
    pub peak_flops: f64,
    /// Bytes/s.
    pub bandwidth: f64,
}

impl DeviceProfile {
    pub fn new(label: impl Into<String>, peak_flops: f64, bandwidth: f64) -> Result<Self> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if !ok(peak_flops) || !ok(bandwidth) {
            return Err(Error::Config(format!(
                "device rates must be positive, got {peak_flops} FLOP/s and {bandwidth} B/s"
            )));
        }
        Ok(DeviceProfile {
            label: label.into(),
            peak_flops,
            bandwidth,
        })
    }

    /// Dense BF16 peaks and HBM bandwidth of a few common parts.
    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "h20" => Self::new("h20", 148e12, 4.0e12),
            "a100" => Self::new("a100", 312e12, 2.0e12),
            "h100" => Self::new("h100", 989e12, 3.35e12),
            _ => Err(Error::Config(format!("unknown device preset {name:?}"))),
        }
    }

    pub const PRESETS: [&'static str; 3] = ["h20", "a100", "h100"];

    /// Parses `label=`, `peak_flops=` and `bandwidth=` lines. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let (mut label, mut peak, mut bw) = (None, None, None);
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected key=value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let num = || {
                v.parse::<f64>()
                    .map_err(|_| Error::Format(format!("line {}: {k} is not a number", no + 1)))
            };
            match k {
                "label" => label = Some(v.to_string()),
                "peak_flops" => peak = Some(num()?),
                "bandwidth" => bw = Some(num()?),
                _ => return Err(Error::Format(format!("line {}: unknown key {k:?}", no + 1))),
            }
        }
        let missing = |k: &str| Error::Format(format!("device profile is missing {k}"));
        Self::new(
            label.unwrap_or_else(|| "custom".into()),
            peak.ok_or_else(|| missing("peak_flops"))?,
            bw.ok_or_else(|| missing("bandwidth"))?,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// FLOPs per byte at which compute and bandwidth balance.
    pub fn ridge_point(&self) -> f64 {
        self.peak_flops / self.bandwidth
    }
}

/// Attention-only costs of one method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostBreakdown {
    pub method: Method,
    pub prefill_flops: u128,
    /// FLOPs of one decode step at `decode_pos`.
    pub decode_flops: u128,
    /// Cache elements held after prefill.
    pub cache_memory: u128,
    /// Cache elements read by one decode step.
    pub cache_io: u128,
    pub bytes_per_elem: u64,
}

pub fn table1_costs(method: Method, w: &WorkloadSpec) -> CostBreakdown {
    let [l, s, sd, d, hq, hkv] =
        [w.layers, w.seq_len, w.decode_pos, w.head_dim, w.q_heads, w.kv_heads].map(u128::from);
    let (hqd, hkvd) = (hq * d, hkv * d);
    // The fusion terms carry a factor H_kv/H_q that cancels against the
    // leading L·S·H_q·D, so they stay integral.
    let fusion_prefill = 3 * l * s * hkv * d;
    let fusion_decode = 3 * l * sd * hkv * d;
    let shared_prefill = l * s * hqd * (2 * s + 2 * hqd + 2 * hkvd + 2) + 2 * l * hqd * hqd;
    let (prefill_flops, decode_flops, cache_memory, cache_io) = match method {
        Method::MhaGqa => (
            l * s * hqd * (4 * s + 4 * hqd + 4 * hkvd),
            l * hqd * (4 * sd + 4 * hqd + 4 * hkvd),
            2 * l * s * hkvd,
            2 * l * sd * hkvd,
        ),
        Method::Yoco | Method::FusedKvLite => (
            shared_prefill,
            l * hqd * (4 * sd + 4 * hqd + 2 * hkvd),
            l * s * hkvd,
            2 * l * sd * hkvd,
        ),
        Method::FusedKv => (
            shared_prefill + fusion_prefill,
            l * hqd * (4 * sd + 4 * hqd + 2 * hkvd) + fusion_decode,
            l * s * hkvd,
            3 * l * sd * hkvd,
        ),
    };
    CostBreakdown {
        method,
        prefill_flops,
        decode_flops,
        cache_memory,
        cache_io,
        bytes_per_elem: w.bytes_per_elem,
    }
}

/// Share of FusedKV decode attention spent on cache fusion: `3·H_kv / (4·H_q)`.
pub fn fusion_overhead_fraction(w: &WorkloadSpec) -> f64 {
    (3 * w.kv_heads) as f64 / (4 * w.q_heads) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Bound {
    Compute,
    Memory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyEstimate {
    /// Seconds.
    pub ttft: f64,
    /// Seconds.
    pub tpot: f64,
    pub prefill_bound: Bound,
    pub decode_bound: Bound,
}

fn roof(flops: u128, bytes: f64, dev: &DeviceProfile) -> (f64, Bound) {
    let compute = flops as f64 / dev.peak_flops;
    let memory = bytes / dev.bandwidth;
    if compute >= memory {
        (compute, Bound::Compute)
    } else {
        (memory, Bound::Memory)
    }
}

/// Roofline estimate with no compute/I-O overlap beyond `max`.
///
/// Prefill moves the written cache plus the weights, decode moves the cache
/// read plus the weights. Only ratios between methods are meaningful.
pub fn roofline_latency(costs: &CostBreakdown, dev: &DeviceProfile, weight_bytes: f64) -> Result<LatencyEstimate> {
    if !(dev.peak_flops > 0.0 && dev.bandwidth > 0.0) {
        return Err(Error::Config(format!("device {} has a zero rate", dev.label)));
    }
    if !(weight_bytes >= 0.0 && weight_bytes.is_finite()) {
        return Err(Error::Config(format!("weight bytes must be nonnegative, got {weight_bytes}")));
    }
    let bpe = costs.bytes_per_elem as f64;
    let (ttft, prefill_bound) = roof(costs.prefill_flops, costs.cache_memory as f64 * bpe + weight_bytes, dev);
    let (tpot, decode_bound) = roof(costs.decode_flops, costs.cache_io as f64 * bpe + weight_bytes, dev);
    Ok(LatencyEstimate {
        ttft,
        tpot,
        prefill_bound,
        decode_bound,
    })
}

/// Quantities of one row divided by the MHA/GQA row for the same workload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ratios {
    pub prefill_flops: f64,
    pub decode_flops: f64,
    pub cache_memory: f64,
    pub cache_io: f64,
    pub ttft: f64,
    pub tpot: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub method: Method,
    pub workload: WorkloadSpec,
    pub device: String,
    pub costs: CostBreakdown,
    pub latency: LatencyEstimate,
    pub vs_vanilla: Ratios,
}

/// Every method on every workload and device, ordered workload-major.
pub fn sweep(
    methods: &[Method],
    workloads: &[WorkloadSpec],
    devices: &[DeviceProfile],
    weight_bytes: f64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(methods.len() * workloads.len() * devices.len());
    for w in workloads {
        for dev in devices {
            let base = table1_costs(Method::MhaGqa, w);
            let base_lat = roofline_latency(&base, dev, weight_bytes)?;
            for &m in methods {
                let costs = table1_costs(m, w);
                let latency = roofline_latency(&costs, dev, weight_bytes)?;
                let r = |a: u128, b: u128| a as f64 / b as f64;
                rows.push(SweepRow {
                    method: m,
                    workload: *w,
                    device: dev.label.clone(),
                    costs,
                    latency,
                    vs_vanilla: Ratios {
                        prefill_flops: r(costs.prefill_flops, base.prefill_flops),
                        decode_flops: r(costs.decode_flops, base.decode_flops),
                        cache_memory: r(costs.cache_memory, base.cache_memory),
                        cache_io: r(costs.cache_io, base.cache_io),
                        ttft: latency.ttft / base_lat.ttft,
                        tpot: latency.tpot / base_lat.tpot,
                    },
                });
            }
        }
    }
    Ok(rows)
}
