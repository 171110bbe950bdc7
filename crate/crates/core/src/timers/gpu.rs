use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use crate::clock::Clock;
use crate::error::{Error, Result};

pub const GPU_CSV_HEADER: &str = "ts,gpu,util_pct,mem_used,power_w,temp_c";

const DEFAULT_SAMPLER: &str = "nvidia-smi --query-gpu=utilization.gpu,memory.used,power.draw,temperature.gpu --format=csv,noheader,nounits -i {gpu}";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GpuSample {
    pub util_pct: String,
    pub mem_used: String,
    pub power_w: String,
    pub temp_c: String,
}

impl GpuSample {
    pub fn unknown() -> Self {
        let u = || "unknown".to_string();
        GpuSample {
            util_pct: u(),
            mem_used: u(),
            power_w: u(),
            temp_c: u(),
        }
    }

    /// First non-empty line of `util, mem, power, temp`.
    pub fn parse(text: &str) -> Option<Self> {
        let line = text.lines().map(str::trim).find(|l| !l.is_empty())?;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 4 || fields.iter().take(4).any(|f| f.is_empty()) {
            return None;
        }
        Some(GpuSample {
            util_pct: fields[0].to_string(),
            mem_used: fields[1].to_string(),
            power_w: fields[2].to_string(),
            temp_c: fields[3].to_string(),
        })
    }
}

pub trait Sampler {
    fn sample(&mut self, gpu: u32) -> Result<GpuSample>;
}

impl<F> Sampler for F
where
    F: FnMut(u32) -> Result<GpuSample>,
{
    fn sample(&mut self, gpu: u32) -> Result<GpuSample> {
        self(gpu)
    }
}

/// Runs an external command per sample; `{gpu}` in its arguments is
/// replaced by the GPU index.
pub struct CommandSampler {
    argv: Vec<String>,
}

fn find_executable(program: &str) -> Option<PathBuf> {
    if program.contains('/') {
        let p = PathBuf::from(program);
        return p.is_file().then_some(p);
    }
    std::env::var_os("PATH").and_then(|paths| {
        std::env::split_paths(&paths)
            .map(|dir| dir.join(program))
            .find(|p| is_executable(p))
    })
}

fn is_executable(path: &Path) -> bool {
    use std::os::unix::fs::PermissionsExt;
    path.metadata()
        .map(|m| m.is_file() && m.permissions().mode() & 0o111 != 0)
        .unwrap_or(false)
}

impl CommandSampler {
    /// Fails with [`Error::SamplerMissing`] when the executable cannot be
    /// found, before anything is sampled.
    pub fn new(command: Option<&str>) -> Result<Self> {
        let command = command.unwrap_or(DEFAULT_SAMPLER);
        let argv = shlex::split(command)
            .filter(|a| !a.is_empty())
            .ok_or_else(|| Error::validation(format!("cannot parse sampler command `{command}`")))?;
        if find_executable(&argv[0]).is_none() {
            return Err(Error::SamplerMissing(argv[0].clone()));
        }
        Ok(CommandSampler { argv })
    }
}

impl Sampler for CommandSampler {
    fn sample(&mut self, gpu: u32) -> Result<GpuSample> {
        let args: Vec<String> = self.argv[1..]
            .iter()
            .map(|a| a.replace("{gpu}", &gpu.to_string()))
            .collect();
        let out = Command::new(&self.argv[0])
            .args(&args)
            .output()
            .map_err(|e| Error::io(format!("running {}", self.argv[0]), e))?;
        if !out.status.success() {
            return Err(Error::validation(format!(
                "sampler exited with {}",
                out.status.code().unwrap_or(-1)
            )));
        }
        GpuSample::parse(&String::from_utf8_lossy(&out.stdout))
            .ok_or_else(|| Error::validation("sampler output not understood"))
    }
}

#[derive(Debug, Clone)]
pub struct WatchOptions {
    pub gpu: u32,
    pub delay: Duration,
    /// Skip rows whose values equal the previous written row.
    pub dense: bool,
    /// Stop once this much clock time has passed.
    pub duration: Option<Duration>,
    pub max_samples: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WatchStats {
    pub samples: u64,
    pub rows: u64,
    pub failures: u64,
}

/// Samples every `delay` until stopped, writing csv rows. A failed
/// sample becomes an all-`unknown` row and sampling continues.
pub fn gpu_watch(
    sampler: &mut dyn Sampler,
    clock: &dyn Clock,
    sleep: &mut dyn FnMut(Duration),
    opts: &WatchOptions,
    stop: &AtomicBool,
    out: &mut dyn Write,
) -> Result<WatchStats> {
    if opts.delay.is_zero() {
        return Err(Error::validation("delay must be positive"));
    }
    let io = |e| Error::io("writing samples", e);
    writeln!(out, "{GPU_CSV_HEADER}").map_err(io)?;
    let began = clock.now();
    let mut stats = WatchStats::default();
    let mut previous: Option<GpuSample> = None;
    loop {
        if stop.load(Ordering::SeqCst) || opts.max_samples.is_some_and(|m| stats.samples >= m) {
            break;
        }
        let now = clock.now();
        if let Some(limit) = opts.duration {
            let elapsed = (now - began).to_std().unwrap_or_default();
            if elapsed >= limit {
                break;
            }
        }
        let sample = sampler.sample(opts.gpu).unwrap_or_else(|_| {
            stats.failures += 1;
            GpuSample::unknown()
        });
        stats.samples += 1;
        if !(opts.dense && previous.as_ref() == Some(&sample)) {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                now.format("%Y-%m-%dT%H:%M:%S%.3fZ"),
                opts.gpu,
                sample.util_pct,
                sample.mem_used,
                sample.power_w,
                sample.temp_c
            )
            .map_err(io)?;
            out.flush().map_err(io)?;
            stats.rows += 1;
        }
        previous = Some(sample);
        sleep(opts.delay);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;

    fn constant(_: u32) -> Result<GpuSample> {
        Ok(GpuSample::parse("87, 30000, 250.5, 61").unwrap())
    }

    fn opts(dense: bool) -> WatchOptions {
        WatchOptions {
            gpu: 0,
            delay: Duration::from_millis(500),
            dense,
            duration: Some(Duration::from_secs(2)),
            max_samples: None,
        }
    }

    fn watch(sampler: &mut dyn Sampler, dense: bool) -> (WatchStats, String) {
        let clock = ManualClock::at_epoch();
        let c2 = clock.clone();
        let mut out = Vec::new();
        let stats = gpu_watch(
            sampler,
            &clock,
            &mut |d| c2.advance(d),
            &opts(dense),
            &AtomicBool::new(false),
            &mut out,
        )
        .unwrap();
        (stats, String::from_utf8(out).unwrap())
    }

    #[test]
    fn half_second_delay_over_two_seconds_is_four_samples() {
        let (stats, text) = watch(&mut constant, false);
        assert_eq!(stats.samples, 4);
        assert_eq!(text.lines().count(), 5);
        assert_eq!(
            text.lines().nth(2).unwrap(),
            "2025-01-01T00:00:00.500Z,0,87,30000,250.5,61"
        );
    }

    #[test]
    fn dense_drops_repeats() {
        let (stats, text) = watch(&mut constant, true);
        assert_eq!(stats.rows, 1);
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn failures_become_unknown_rows() {
        let mut n = 0;
        let mut flaky = |_gpu: u32| {
            n += 1;
            if n == 2 {
                Err(Error::validation("boom"))
            } else {
                constant(0)
            }
        };
        let (stats, text) = watch(&mut flaky, false);
        assert_eq!(stats.failures, 1);
        assert!(text.lines().nth(2).unwrap().ends_with(",0,unknown,unknown,unknown,unknown"));
        assert_eq!(stats.samples, 4);
    }

    #[test]
    fn missing_sampler_fails_up_front() {
        assert!(matches!(
            CommandSampler::new(Some("definitely-not-a-sampler-xyz --x")),
            Err(Error::SamplerMissing(_))
        ));
    }

    #[test]
    fn fixture_command_sampler() {
        let mut s = CommandSampler::new(Some("echo 10, 2048, 70.0, 45")).unwrap();
        assert_eq!(s.sample(1).unwrap().mem_used, "2048");
    }
}
