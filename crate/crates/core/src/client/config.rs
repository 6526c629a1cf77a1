//! Property-list XML job configuration.
//!
//! ```xml
//! <configuration>
//!   <property><name>orch.worker.instances</name><value>2</value></property>
//! </configuration>
//! ```
//!
//! Key grammar (anything else under `orch.` is an error):
//!
//! | key | meaning |
//! |-----|---------|
//! | `orch.<group>.instances` | required for every group mentioned |
//! | `orch.<group>.memory` | `512`, `512m`, `4g`; default 2g |
//! | `orch.<group>.vcores` / `.gpus` | default 1 / 0 |
//! | `orch.<group>.tracked` | `true`/`false`; default false for `ps`, true otherwise |
//! | `orch.application.name` | job name, default `orch-job` |
//! | `orch.application.command` | program and arguments, split on whitespace |
//! | `orch.application.max-attempts` / `.heartbeat-ms` / `.heartbeat-miss-limit` | |
//! | `orch.scheduler.<key>` | passed through opaquely |
//!
//! Properties outside `orch.` are ignored.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{
    default_tracked, validate_job_spec, JobSpec, ResourceRequest, TaskGroupSpec, ValidatedJobSpec, ValidationError,
};

pub const DEFAULT_MEMORY_MB: u64 = 2048;
pub const DEFAULT_VCORES: u32 = 1;
pub const DEFAULT_JOB_NAME: &str = "orch-job";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("malformed XML: {0}")]
    MalformedXml(String),
    #[error("unexpected document structure: {0}")]
    MalformedStructure(String),
    #[error("malformed override {0:?}, expected name=value")]
    MalformedOverride(String),
    #[error("unknown configuration key {0}")]
    UnknownKey(String),
    #[error("malformed memory string {0:?}")]
    MalformedMemory(String),
    #[error("invalid value {value:?} for {key}")]
    InvalidValue { key: String, value: String },
    #[error("group {0} has no orch.{0}.instances")]
    MissingInstances(String),
    #[error("orch.application.command is not set")]
    MissingCommand,
    #[error("invalid job: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Validation(Vec<ValidationError>),
}

/// Properties in document order. Later duplicates win when resolved.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawConfig {
    pub properties: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

impl RawConfig {
    pub fn push(&mut self, name: String, value: String) {
        if self.properties.iter().any(|(n, _)| *n == name) {
            let w = format!("duplicate property {name}; the last value wins");
            log::warn!("{w}");
            self.warnings.push(w);
        }
        self.properties.push((name, value));
    }

    /// Last value for each name, names in order of first appearance.
    pub fn resolved(&self) -> Vec<(&str, &str)> {
        let mut order: Vec<&str> = Vec::new();
        let mut last: BTreeMap<&str, &str> = BTreeMap::new();
        for (n, v) in &self.properties {
            if last.insert(n, v).is_none() {
                order.push(n);
            }
        }
        order.into_iter().map(|n| (n, last[n])).collect()
    }
}

fn child_text(node: roxmltree::Node, tag: &str) -> Result<Option<String>, ConfigError> {
    let mut found = None;
    for c in node.children().filter(|c| c.is_element()) {
        if c.tag_name().name() == tag {
            if found.is_some() {
                return Err(ConfigError::MalformedStructure(format!(
                    "property with two <{tag}> elements"
                )));
            }
            found = Some(c.text().unwrap_or("").trim().to_string());
        }
    }
    Ok(found)
}

pub fn parse_raw(document: &str) -> Result<RawConfig, ConfigError> {
    let doc = roxmltree::Document::parse(document).map_err(|e| ConfigError::MalformedXml(e.to_string()))?;
    let root = doc.root_element();
    if root.tag_name().name() != "configuration" {
        return Err(ConfigError::MalformedStructure(format!(
            "root element is <{}>, expected <configuration>",
            root.tag_name().name()
        )));
    }
    let mut raw = RawConfig::default();
    for p in root.children().filter(|c| c.is_element()) {
        if p.tag_name().name() != "property" {
            return Err(ConfigError::MalformedStructure(format!(
                "unexpected <{}> in <configuration>",
                p.tag_name().name()
            )));
        }
        for c in p.children().filter(|c| c.is_element()) {
            if !matches!(c.tag_name().name(), "name" | "value" | "description" | "final") {
                return Err(ConfigError::MalformedStructure(format!(
                    "unexpected <{}> in <property>",
                    c.tag_name().name()
                )));
            }
        }
        let name = child_text(p, "name")?
            .filter(|n| !n.is_empty())
            .ok_or_else(|| ConfigError::MalformedStructure("property without <name>".into()))?;
        let value = child_text(p, "value")?
            .ok_or_else(|| ConfigError::MalformedStructure(format!("property {name} without <value>")))?;
        raw.push(name, value);
    }
    Ok(raw)
}

/// `512` and `512m` are MiB, `4g` is 4096 MiB. Case-insensitive, no fractions.
pub fn parse_memory(text: &str) -> Result<u64, ConfigError> {
    let bad = || ConfigError::MalformedMemory(text.to_string());
    let lower = text.to_ascii_lowercase();
    let (digits, factor) = match lower.as_bytes().last() {
        Some(b'g') => (&lower[..lower.len() - 1], 1024),
        Some(b'm') => (&lower[..lower.len() - 1], 1),
        _ => (lower.as_str(), 1),
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    digits
        .parse::<u64>()
        .ok()
        .and_then(|n| n.checked_mul(factor))
        .ok_or_else(bad)
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::InvalidValue {
            key: key.into(),
            value: value.into(),
        }),
    }
}

pub fn parse_override(text: &str) -> Result<(String, String), ConfigError> {
    match text.split_once('=') {
        Some((n, v)) if !n.trim().is_empty() => Ok((n.trim().to_string(), v.to_string())),
        _ => Err(ConfigError::MalformedOverride(text.to_string())),
    }
}

#[derive(Default)]
struct GroupDraft {
    instances: Option<u32>,
    memory_mb: Option<u64>,
    vcores: Option<u32>,
    gpus: Option<u32>,
    tracked: Option<bool>,
}

/// Applies the key grammar to resolved properties.
pub fn job_from_raw(raw: &RawConfig) -> Result<ValidatedJobSpec, ConfigError> {
    let mut groups: Vec<(String, GroupDraft)> = Vec::new();
    let mut job = JobSpec::new(DEFAULT_JOB_NAME, Vec::new());
    let mut command = None;
    for (key, value) in raw.resolved() {
        let Some(rest) = key.strip_prefix("orch.") else {
            log::debug!("ignoring non-orch property {key}");
            continue;
        };
        let unknown = || ConfigError::UnknownKey(key.to_string());
        if let Some(sk) = rest.strip_prefix("scheduler.") {
            if sk.is_empty() {
                return Err(unknown());
            }
            job.scheduler_config.insert(sk.to_string(), value.to_string());
            continue;
        }
        let (scope, attr) = rest.split_once('.').ok_or_else(unknown)?;
        if scope == "application" {
            match attr {
                "name" => job.job_name = value.trim().to_string(),
                "command" => command = Some(value.split_whitespace().map(str::to_string).collect::<Vec<_>>()),
                "max-attempts" => job.max_attempts = parse_num(key, value)?,
                "heartbeat-ms" => job.heartbeat_interval_ms = parse_num(key, value)?,
                "heartbeat-miss-limit" => job.heartbeat_miss_limit = parse_num(key, value)?,
                _ => return Err(unknown()),
            }
            continue;
        }
        let idx = match groups.iter().position(|(g, _)| g == scope) {
            Some(i) => i,
            None => {
                groups.push((scope.to_string(), GroupDraft::default()));
                groups.len() - 1
            }
        };
        let draft = &mut groups[idx].1;
        match attr {
            "instances" => draft.instances = Some(parse_num(key, value)?),
            "memory" => draft.memory_mb = Some(parse_memory(value.trim())?),
            "vcores" => draft.vcores = Some(parse_num(key, value)?),
            "gpus" => draft.gpus = Some(parse_num(key, value)?),
            "tracked" => draft.tracked = Some(parse_bool(key, value)?),
            _ => return Err(unknown()),
        }
    }
    for (name, d) in groups {
        let instances = d.instances.ok_or_else(|| ConfigError::MissingInstances(name.clone()))?;
        let resources = ResourceRequest::new(
            d.memory_mb.unwrap_or(DEFAULT_MEMORY_MB),
            d.vcores.unwrap_or(DEFAULT_VCORES),
            d.gpus.unwrap_or(0),
        );
        let tracked = d.tracked.unwrap_or_else(|| default_tracked(&name));
        job.groups
            .push(TaskGroupSpec::new(name, instances, resources).tracked(tracked));
    }
    match command {
        Some(c) if !c.is_empty() => job.command = c,
        _ => return Err(ConfigError::MissingCommand),
    }
    validate_job_spec(job).map_err(ConfigError::Validation)
}

/// Parses the document, applies `overrides` (`name=value`, after the file's
/// properties) and validates the result.
pub fn parse_config(document: &str, overrides: &[String]) -> Result<ValidatedJobSpec, ConfigError> {
    let mut raw = parse_raw(document)?;
    for o in overrides {
        let (n, v) = parse_override(o)?;
        // overriding is the point, so no duplicate warning
        raw.properties.push((n, v));
    }
    job_from_raw(&raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(props: &[(&str, &str)]) -> String {
        let mut s = String::from("<configuration>\n");
        for (n, v) in props {
            s.push_str(&format!("  <property><name>{n}</name><value>{v}</value></property>\n"));
        }
        s.push_str("</configuration>\n");
        s
    }

    const EXAMPLE: &[(&str, &str)] = &[
        ("orch.worker.instances", "2"),
        ("orch.worker.memory", "4g"),
        ("orch.ps.instances", "1"),
        ("orch.ps.memory", "2g"),
        ("orch.application.command", "run.sh"),
    ];

    #[test]
    fn memory_strings() {
        assert_eq!(parse_memory("4g"), Ok(4096));
        assert_eq!(parse_memory("4G"), Ok(4096));
        assert_eq!(parse_memory("512"), Ok(512));
        assert_eq!(parse_memory("512M"), Ok(512));
        for bad in ["1.5g", "", "g", "-1", "4 g", "4k", "99999999999999999999"] {
            assert_eq!(
                parse_memory(bad),
                Err(ConfigError::MalformedMemory(bad.into())),
                "{bad}"
            );
        }
    }

    #[test]
    fn example_document() {
        let spec = parse_config(&doc(EXAMPLE), &[]).unwrap();
        assert_eq!(spec.groups.len(), 2);
        let w = &spec.groups[0];
        assert_eq!(
            (w.name.as_str(), w.instances, w.resources.memory_mb, w.tracked),
            ("worker", 2, 4096, true)
        );
        let p = &spec.groups[1];
        assert_eq!(
            (p.name.as_str(), p.instances, p.resources.memory_mb, p.tracked),
            ("ps", 1, 2048, false)
        );
        assert_eq!(spec.command, vec!["run.sh".to_string()]);
        assert_eq!(
            (spec.max_attempts, spec.heartbeat_interval_ms, spec.heartbeat_miss_limit),
            (3, 1000, 3)
        );
    }

    #[test]
    fn typo_is_an_error() {
        let mut props = EXAMPLE.to_vec();
        props.push(("orch.wroker.instanses", "3"));
        assert_eq!(
            parse_config(&doc(&props), &[]),
            Err(ConfigError::UnknownKey("orch.wroker.instanses".into()))
        );
    }

    #[test]
    fn override_wins() {
        let spec = parse_config(&doc(EXAMPLE), &["orch.worker.instances=3".into()]).unwrap();
        assert_eq!(spec.groups[0].instances, 3);
    }

    #[test]
    fn duplicate_last_wins_with_warning() {
        let mut props = EXAMPLE.to_vec();
        props.push(("orch.worker.instances", "5"));
        let raw = parse_raw(&doc(&props)).unwrap();
        assert_eq!(raw.warnings.len(), 1);
        assert_eq!(job_from_raw(&raw).unwrap().groups[0].instances, 5);
    }

    #[test]
    fn structure_errors() {
        assert!(matches!(
            parse_raw("<configuration>"),
            Err(ConfigError::MalformedXml(_))
        ));
        assert!(matches!(parse_raw("<conf/>"), Err(ConfigError::MalformedStructure(_))));
        assert!(matches!(
            parse_raw("<configuration><property><value>1</value></property></configuration>"),
            Err(ConfigError::MalformedStructure(_))
        ));
    }
}
