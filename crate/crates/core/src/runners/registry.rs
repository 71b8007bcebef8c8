use std::collections::BTreeMap;
use std::sync::Arc;

use super::Runner;
use crate::error::{Error, Result};
use crate::model::StageName;

/// Provider table with a configured default and optional per-stage overrides.
#[derive(Clone)]
pub struct RunnerRegistry {
    default: String,
    providers: BTreeMap<String, Arc<dyn Runner>>,
    stage_overrides: BTreeMap<StageName, String>,
}

impl RunnerRegistry {
    pub fn new(default: impl Into<String>) -> Self {
        Self {
            default: default.into(),
            providers: BTreeMap::new(),
            stage_overrides: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, runner: Arc<dyn Runner>) -> &mut Self {
        self.providers.insert(runner.provider_name().to_string(), runner);
        self
    }

    pub fn with(mut self, runner: Arc<dyn Runner>) -> Self {
        self.register(runner);
        self
    }

    /// Route one stage to a different provider for every spawn of that stage.
    pub fn override_stage(&mut self, stage: StageName, provider: impl Into<String>) -> &mut Self {
        self.stage_overrides.insert(stage, provider.into());
        self
    }

    pub fn default_provider(&self) -> &str {
        &self.default
    }

    pub fn provider_names(&self) -> Vec<String> {
        self.providers.keys().cloned().collect()
    }

    /// The override wins over `provider_name` when present.
    pub fn get(&self, provider_name: &str, per_spawn_override: Option<&str>) -> Result<Arc<dyn Runner>> {
        let name = per_spawn_override.unwrap_or(provider_name);
        self.providers
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownProvider(name.to_string()))
    }

    pub fn get_for_stage(&self, stage: StageName, per_spawn_override: Option<&str>) -> Result<Arc<dyn Runner>> {
        let configured = self.stage_overrides.get(&stage).map(String::as_str);
        self.get(&self.default, per_spawn_override.or(configured))
    }
}
