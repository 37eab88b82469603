//! Process resource sampling. Only resident memory and wall time are
//! available; accelerator fields are always absent.

use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResourceSample {
    pub peak_rss_bytes: u64,
    pub wall: Duration,
    pub gpu_memory_bytes: Option<u64>,
    pub gpu_power_watts: Option<f64>,
}

/// Peak resident set size of this process (`VmHWM`), when the platform
/// reports it.
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Tracks a running peak so reported memory never decreases even where the
/// OS counter is unavailable or reset.
#[derive(Debug)]
pub struct Monitor {
    started: Instant,
    peak: u64,
}

impl Default for Monitor {
    fn default() -> Self {
        Monitor::start()
    }
}

impl Monitor {
    pub fn start() -> Self {
        Monitor {
            started: Instant::now(),
            peak: peak_rss_bytes().unwrap_or(0),
        }
    }

    /// Restarts the wall clock; the memory peak carries over.
    pub fn restart(&mut self) {
        self.started = Instant::now();
    }

    pub fn sample(&mut self) -> ResourceSample {
        self.peak = self.peak.max(peak_rss_bytes().unwrap_or(0));
        ResourceSample {
            peak_rss_bytes: self.peak,
            wall: self.started.elapsed(),
            gpu_memory_bytes: None,
            gpu_power_watts: None,
        }
    }
}
