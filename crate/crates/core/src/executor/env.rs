use std::collections::BTreeMap;

use super::bootstrap::{Bootstrap, ENV_ATTEMPT, ENV_CLUSTER_SPEC, ENV_TASK_INDEX, ENV_TASK_TYPE, RESERVED_CHILD_VARS};
use crate::model::ClusterSpec;

/// Variables set on top of the inherited environment when spawning the child.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ChildEnv {
    pub vars: BTreeMap<String, String>,
    /// `extra_env` keys dropped because they collide with reserved names.
    pub dropped: Vec<String>,
}

impl ChildEnv {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.vars.get(key).map(String::as_str)
    }
}

pub fn build_child_env(spec: &ClusterSpec, boot: &Bootstrap) -> ChildEnv {
    let mut env = ChildEnv::default();
    for (k, v) in &boot.extra_env {
        if RESERVED_CHILD_VARS.contains(&k.as_str()) {
            log::warn!("executor: dropping extra_env {k}, the name is reserved");
            env.dropped.push(k.clone());
        } else {
            env.vars.insert(k.clone(), v.clone());
        }
    }
    env.vars.insert(ENV_CLUSTER_SPEC.into(), spec.canonical_encoding());
    env.vars.insert(ENV_TASK_TYPE.into(), boot.task.group.clone());
    env.vars.insert(ENV_TASK_INDEX.into(), boot.task.index.to_string());
    env.vars.insert(ENV_ATTEMPT.into(), boot.attempt.to_string());
    env
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Endpoint, TaskId};

    fn boot(extra: &[(&str, &str)]) -> Bootstrap {
        Bootstrap {
            master_addr: "m:1".into(),
            task: TaskId::new("worker", 1),
            attempt: 2,
            heartbeat_interval_ms: 1000,
            command: vec!["x".into()],
            extra_env: extra.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            is_ui_task: false,
        }
    }

    fn spec() -> ClusterSpec {
        let mut s = ClusterSpec::new();
        s.insert_group("worker", vec![Endpoint::new("h1", 1), Endpoint::new("h2", 2)]);
        s
    }

    #[test]
    fn reserved_mapping() {
        let env = build_child_env(&spec(), &boot(&[]));
        assert_eq!(env.get("ORCH_TASK_TYPE"), Some("worker"));
        assert_eq!(env.get("ORCH_TASK_INDEX"), Some("1"));
        assert_eq!(env.get("ORCH_ATTEMPT"), Some("2"));
        assert_eq!(env.get("ORCH_CLUSTER_SPEC"), Some(r#"{"worker":["h1:1","h2:2"]}"#));
        for k in RESERVED_CHILD_VARS {
            assert!(env.vars.contains_key(k));
        }
    }

    #[test]
    fn reserved_wins_over_extra() {
        let env = build_child_env(&spec(), &boot(&[("ORCH_TASK_INDEX", "9")]));
        assert_eq!(env.get("ORCH_TASK_INDEX"), Some("1"));
        assert_eq!(env.dropped, vec!["ORCH_TASK_INDEX".to_string()]);
    }

    #[test]
    fn extra_passes_through() {
        let env = build_child_env(&spec(), &boot(&[("DATA_DIR", "/x")]));
        assert_eq!(env.get("DATA_DIR"), Some("/x"));
        assert!(env.dropped.is_empty());
    }
}
