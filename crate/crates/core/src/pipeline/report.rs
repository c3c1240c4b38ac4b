use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::PipelineConfig;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub layer: String,
    pub action: String,
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub skipped: bool,
    pub entries: Vec<ReportEntry>,
}

impl StageReport {
    pub fn new(stage: &str, skipped: bool) -> Self {
        Self {
            stage: stage.into(),
            skipped,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, layer: &str, action: &str, params: serde_json::Value) {
        self.entries.push(ReportEntry {
            layer: layer.into(),
            action: action.into(),
            params,
        });
    }
}

/// What each stage did, in execution order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub schema_version: u32,
    pub config: PipelineConfig,
    pub stages: Vec<StageReport>,
}

impl PipelineReport {
    pub fn new(config: PipelineConfig) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            config,
            stages: Vec::new(),
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let c = &self.config;
        let _ = writeln!(
            s,
            "bits={} measure={} z_threshold={} snc_alpha={} iterations={} bins={}",
            c.bits, c.measure, c.z_threshold, c.snc_alpha, c.iterations, c.bins
        );
        for st in &self.stages {
            if st.skipped {
                let _ = writeln!(s, "[{}] skipped", st.stage);
                continue;
            }
            let _ = writeln!(s, "[{}] {} entries", st.stage, st.entries.len());
            for e in &st.entries {
                let _ = writeln!(s, "  {:<24} {:<12} {}", e.layer, e.action, e.params);
            }
        }
        s
    }
}
