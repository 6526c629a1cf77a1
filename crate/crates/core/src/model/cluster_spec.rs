//! The global rendezvous map and its canonical encoding.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use super::spec::JobSpec;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
}

impl Endpoint {
    pub fn new(host: impl Into<String>, port: u16) -> Self {
        Endpoint {
            host: host.into(),
            port,
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed endpoint {0:?}, expected host:port with port in 1..=65535")]
pub struct ParseEndpointError(pub String);

impl FromStr for Endpoint {
    type Err = ParseEndpointError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseEndpointError(s.to_string());
        let (host, port) = s.rsplit_once(':').ok_or_else(err)?;
        if host.is_empty() || host.contains(char::is_whitespace) {
            return Err(err());
        }
        if port.is_empty() || !port.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err());
        }
        let port: u32 = port.parse().map_err(|_| err())?;
        if !(1..=65535).contains(&port) {
            return Err(err());
        }
        Ok(Endpoint::new(host, port as u16))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClusterSpecError {
    #[error("cluster spec is not a JSON object of string arrays: {0}")]
    Syntax(String),
    #[error(transparent)]
    Endpoint(#[from] ParseEndpointError),
    #[error("group {group} has {actual} endpoints, job declares {expected}")]
    Count {
        group: String,
        expected: usize,
        actual: usize,
    },
    #[error("group {0} is not part of the job")]
    UnknownGroup(String),
    #[error("group {0} is missing")]
    MissingGroup(String),
}

/// Group name to endpoint list; position `i` holds the endpoint of task index `i`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClusterSpec {
    endpoints: BTreeMap<String, Vec<Endpoint>>,
}

impl ClusterSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_group(&mut self, group: impl Into<String>, endpoints: Vec<Endpoint>) {
        self.endpoints.insert(group.into(), endpoints);
    }

    pub fn groups(&self) -> impl Iterator<Item = (&str, &[Endpoint])> {
        self.endpoints.iter().map(|(g, e)| (g.as_str(), e.as_slice()))
    }

    pub fn endpoints(&self, group: &str) -> Option<&[Endpoint]> {
        self.endpoints.get(group).map(Vec::as_slice)
    }

    pub fn endpoint(&self, group: &str, index: u32) -> Option<&Endpoint> {
        self.endpoints.get(group)?.get(index as usize)
    }

    /// Canonical form: keys sorted, arrays in index order, no whitespace.
    pub fn canonical_encoding(&self) -> String {
        let map: BTreeMap<&str, Vec<String>> = self
            .endpoints
            .iter()
            .map(|(g, eps)| (g.as_str(), eps.iter().map(Endpoint::to_string).collect()))
            .collect();
        serde_json::to_string(&map).expect("string map always serializes")
    }

    pub fn from_canonical(text: &str) -> Result<Self, ClusterSpecError> {
        let raw: BTreeMap<String, Vec<String>> =
            serde_json::from_str(text).map_err(|e| ClusterSpecError::Syntax(e.to_string()))?;
        let mut spec = ClusterSpec::new();
        for (group, eps) in raw {
            let eps = eps.iter().map(|e| e.parse()).collect::<Result<Vec<Endpoint>, _>>()?;
            spec.insert_group(group, eps);
        }
        Ok(spec)
    }

    /// Checks the shape invariants against the job the spec was built for.
    pub fn check_against(&self, job: &JobSpec) -> Result<(), ClusterSpecError> {
        for group in &job.groups {
            let actual = self
                .endpoints
                .get(&group.name)
                .ok_or_else(|| ClusterSpecError::MissingGroup(group.name.clone()))?
                .len();
            if actual != group.instances as usize {
                return Err(ClusterSpecError::Count {
                    group: group.name.clone(),
                    expected: group.instances as usize,
                    actual,
                });
            }
        }
        if let Some(extra) = self.endpoints.keys().find(|g| job.group(g).is_none()) {
            return Err(ClusterSpecError::UnknownGroup(extra.clone()));
        }
        Ok(())
    }
}

/// Free-function form of [`ClusterSpec::canonical_encoding`].
pub fn canonical_spec_encoding(spec: &ClusterSpec) -> Vec<u8> {
    spec.canonical_encoding().into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ep(s: &str) -> Endpoint {
        s.parse().unwrap()
    }

    #[test]
    fn sorted_keys_index_order() {
        let mut spec = ClusterSpec::new();
        spec.insert_group("worker", vec![ep("h1:4000"), ep("h2:4001")]);
        spec.insert_group("ps", vec![ep("h3:5000")]);
        assert_eq!(
            canonical_spec_encoding(&spec),
            br#"{"ps":["h3:5000"],"worker":["h1:4000","h2:4001"]}"#
        );
    }

    #[test]
    fn single_entry() {
        let mut spec = ClusterSpec::new();
        spec.insert_group("worker", vec![ep("h1:4000")]);
        assert_eq!(spec.canonical_encoding(), r#"{"worker":["h1:4000"]}"#);
    }

    #[test]
    fn insertion_order_does_not_matter() {
        let mut a = ClusterSpec::new();
        a.insert_group("worker", vec![ep("h1:1")]);
        a.insert_group("ps", vec![ep("h2:2")]);
        let mut b = ClusterSpec::new();
        b.insert_group("ps", vec![ep("h2:2")]);
        b.insert_group("worker", vec![ep("h1:1")]);
        assert_eq!(canonical_spec_encoding(&a), canonical_spec_encoding(&b));
    }

    #[test]
    fn endpoint_grammar() {
        assert_eq!(ep("127.0.0.1:80"), Endpoint::new("127.0.0.1", 80));
        for bad in ["h1", "h1:", ":80", "h1:0", "h1:65536", "h1:8x", "h 1:80", "h1:-1"] {
            assert!(bad.parse::<Endpoint>().is_err(), "{bad}");
        }
        assert!("h1:65535".parse::<Endpoint>().is_ok());
    }

    fn arb_spec() -> impl Strategy<Value = ClusterSpec> {
        proptest::collection::btree_map(
            "[a-z][a-z0-9_]{0,5}",
            proptest::collection::vec(("[a-z][a-z0-9.]{0,6}", 1u16..), 1..4),
            1..4,
        )
        .prop_map(|m| {
            let mut spec = ClusterSpec::new();
            for (g, eps) in m {
                spec.insert_group(g, eps.into_iter().map(|(h, p)| Endpoint::new(h, p)).collect());
            }
            spec
        })
    }

    proptest! {
        #[test]
        fn encoding_is_injective(a in arb_spec(), b in arb_spec()) {
            let (ea, eb) = (a.canonical_encoding(), b.canonical_encoding());
            prop_assert_eq!(a == b, ea == eb);
            prop_assert_eq!(ClusterSpec::from_canonical(&ea).unwrap(), a);
        }
    }
}
