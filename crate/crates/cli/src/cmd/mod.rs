mod cc;
mod ee;
mod misc;

use std::sync::Arc;

use anyhow::{Context, Result};
use indexmap::IndexMap;

use bench_core::scheduler::{build_scheduler, parse_resources, ResourceTarget, Scheduler, SystemRunner};
use bench_core::Error;

use crate::config::Settings;
use crate::{CcCommand, Command, CostCommand, EeCommand, GpuCommand, ResultsCommand};

pub fn dispatch(command: Command, settings: &Settings) -> Result<()> {
    match command {
        Command::Ee(EeCommand::Generate(a)) => ee::generate(a, settings),
        Command::Ee(EeCommand::Submit(a)) => ee::submit(a, settings),
        Command::Ee(EeCommand::Status(a)) => ee::status(a, settings),
        Command::Cc(CcCommand::Run(a)) => cc::run(a, settings),
        Command::Cc(CcCommand::Sync(a)) => cc::sync(a, settings),
        Command::Cc(CcCommand::View(a)) => cc::view(a, settings),
        Command::Results(ResultsCommand::Record(a)) => misc::record(a, settings),
        Command::Results(ResultsCommand::Merge(a)) => misc::merge(a),
        Command::Results(ResultsCommand::Query(a)) => misc::query(a),
        Command::Cost(CostCommand::Estimate(a)) => misc::estimate(a),
        Command::Gpu(GpuCommand::Watch(a)) => misc::gpu_watch(a),
    }
}

pub type Targets = IndexMap<String, ResourceTarget>;

/// Built-in targets plus those of the resources file.
pub fn load_resources(settings: &Settings) -> Result<Targets> {
    let text = match &settings.resources {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::io(format!("reading {}", p.display()), e))
            .with_context(|| "loading resources")?,
        None => String::new(),
    };
    Ok(parse_resources(&text)?)
}

pub fn scheduler_for(targets: &Targets, name: &str) -> Result<Arc<dyn Scheduler>> {
    let target = targets
        .get(name)
        .ok_or_else(|| Error::validation(format!("unknown resource `{name}`")))?;
    Ok(build_scheduler(target, Arc::new(SystemRunner))?)
}
