use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::images::{CommandBuilder, ImageBuilder, SimBuilder};
use super::probe::{default_probe_commands, FileHeartbeat, HealthChecker, HEARTBEAT_FILE};
use super::runtime::{ContainerRuntime, DockerRuntime, SimRuntime};
use super::swap::SwapSupervisor;
use super::HostDaemon;
use crate::autoscan::{AutoScan, AutoScanConfig, ChunkEvaluator, RunnerEvaluator, ScriptedEvaluator};
use crate::clock::{Clock, SystemClock, Timing};
use crate::error::{Error, Result};
use crate::model::{StageName, DEFAULT_SEAL_THRESHOLD};
use crate::runners::{preset, RunnerRegistry, SubprocessConfig, SubprocessRunner, PRESET_NAMES};
use crate::store::StateStore;
use crate::trials::RuntimeTrialBackend;
use crate::webhook::{HttpWebhookSink, NullSink, WebhookSink};
use crate::workspace::GitWorkspace;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuntimeKind {
    #[default]
    Docker,
    Sim,
}

/// `moss hostd` configuration file (toml).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HostdConfig {
    pub state_dir: PathBuf,
    pub socket: PathBuf,
    /// Git checkout of the substrate's source.
    pub workspace: PathBuf,
    #[serde(default)]
    pub session_dirs: Vec<PathBuf>,
    /// The live user-state volume; the substrate writes its heartbeat here.
    pub state_volume: PathBuf,
    #[serde(default)]
    pub webhook_url: Option<String>,
    #[serde(default)]
    pub runtime: RuntimeKind,
    /// Image directory for the simulated runtime.
    #[serde(default)]
    pub image_root: Option<PathBuf>,
    #[serde(default = "default_provider")]
    pub default_provider: String,
    #[serde(default)]
    pub stage_providers: BTreeMap<String, String>,
    /// Extra or replacement provider command templates.
    #[serde(default)]
    pub providers: BTreeMap<String, SubprocessConfig>,
    /// Scripted tagging for autoscan instead of the task_evaluate provider.
    #[serde(default)]
    pub evaluator_script: Option<PathBuf>,
    #[serde(default)]
    pub seal_threshold: Option<usize>,
    #[serde(default)]
    pub timing: Timing,
}

fn default_provider() -> String {
    "claude-code".into()
}

impl HostdConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::BadRequest(format!("{}: {e}", path.display())))
    }

    /// Builds the daemon and its collaborators from the configuration.
    pub fn assemble(&self) -> Result<Arc<HostDaemon>> {
        let clock: Arc<dyn Clock> = Arc::new(SystemClock);
        let store = StateStore::open(&self.state_dir)?;
        let workspace = Arc::new(GitWorkspace::open(&self.workspace)?);
        let invocations = self.state_dir.join("invocations");

        let mut registry = RunnerRegistry::new(self.default_provider.clone());
        let mut configs: BTreeMap<String, SubprocessConfig> =
            PRESET_NAMES.iter().filter_map(|n| preset(n).map(|c| (n.to_string(), c))).collect();
        configs.extend(self.providers.clone());
        for (name, config) in configs {
            registry.register(Arc::new(SubprocessRunner::new(name, config, &invocations)));
        }
        for (stage, provider) in &self.stage_providers {
            let stage: StageName = stage.parse()?;
            registry.override_stage(stage, provider.clone());
        }
        let registry = Arc::new(registry);

        let evaluator: Arc<dyn ChunkEvaluator> = match &self.evaluator_script {
            Some(p) => Arc::new(ScriptedEvaluator::load(p)?),
            None => Arc::new(RunnerEvaluator::new(registry.clone(), self.workspace.clone(), Duration::from_secs(600))),
        };
        let autoscan = Arc::new(AutoScan::new(
            store.clone(),
            AutoScanConfig {
                session_dirs: self.session_dirs.clone(),
                seal_threshold: self.seal_threshold.unwrap_or(DEFAULT_SEAL_THRESHOLD),
                ..AutoScanConfig::default()
            },
            evaluator,
            clock.clone(),
        ));

        let (runtime, builder): (Arc<dyn ContainerRuntime>, Arc<dyn ImageBuilder>) = match self.runtime {
            RuntimeKind::Docker => (
                Arc::new(DockerRuntime::default()),
                Arc::new(CommandBuilder::docker(workspace.clone(), clock.clone())),
            ),
            RuntimeKind::Sim => {
                let root = self
                    .image_root
                    .clone()
                    .ok_or_else(|| Error::BadRequest("runtime = \"sim\" needs image_root".into()))?;
                (
                    Arc::new(SimRuntime::new(&root, clock.clone())),
                    Arc::new(SimBuilder::new(workspace.clone(), &root, clock.clone())),
                )
            }
        };
        let sink: Arc<dyn WebhookSink> = match &self.webhook_url {
            Some(u) => Arc::new(HttpWebhookSink::new(u.clone())),
            None => Arc::new(NullSink),
        };
        let checker = HealthChecker::new(
            runtime.clone(),
            FileHeartbeat::new(self.state_volume.join(HEARTBEAT_FILE)),
            default_probe_commands(),
            self.timing.real(self.timing.heartbeat_freshness),
            clock.clone(),
        );
        let gate = Arc::new(RwLock::new(()));
        let swap = Arc::new(SwapSupervisor::new(
            store.clone(),
            runtime.clone(),
            checker,
            sink,
            clock.clone(),
            self.timing.clone(),
            &self.state_volume,
            gate.clone(),
        ));
        let trials = Arc::new(RuntimeTrialBackend::new(runtime.clone(), clock).with_state_volume(&self.state_volume));
        Ok(Arc::new(HostDaemon::new(store, autoscan, registry, trials, builder, runtime, swap, gate)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_parses_with_defaults() {
        let c: HostdConfig = toml::from_str(
            r#"
state_dir = "/var/lib/moss"
socket = "/run/moss/hostd.sock"
workspace = "/srv/substrate"
state_volume = "/srv/state"
"#,
        )
        .unwrap();
        assert_eq!(c.runtime, RuntimeKind::Docker);
        assert_eq!(c.default_provider, "claude-code");
        assert_eq!(c.timing.probe_samples(), 18);
    }
}
