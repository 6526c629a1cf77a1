use std::collections::BTreeSet;
use std::net::TcpListener;
use std::ops::RangeInclusive;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PortError {
    #[error("no free port: {0}")]
    NoFreePort(String),
}

/// Hands out ports that are bindable at the time of the call.
pub trait PortAllocator {
    fn allocate(&mut self) -> Result<u16, PortError>;

    /// Drops any reservation so the child can bind the ports itself.
    fn release_all(&mut self);
}

/// Binds an OS-assigned ephemeral port and keeps it bound until `release_all`,
/// so consecutive allocations on one host never collide.
#[derive(Debug, Default)]
pub struct SystemPorts {
    held: Vec<TcpListener>,
}

impl SystemPorts {
    pub fn new() -> Self {
        Self::default()
    }
}

impl PortAllocator for SystemPorts {
    fn allocate(&mut self) -> Result<u16, PortError> {
        let listener = TcpListener::bind(("0.0.0.0", 0)).map_err(|e| PortError::NoFreePort(e.to_string()))?;
        let port = listener
            .local_addr()
            .map_err(|e| PortError::NoFreePort(e.to_string()))?
            .port();
        self.held.push(listener);
        Ok(port)
    }

    fn release_all(&mut self) {
        self.held.clear();
    }
}

/// Deterministic per-host port space for the simulator.
#[derive(Debug, Clone)]
pub struct SimPorts {
    range: RangeInclusive<u16>,
    in_use: BTreeSet<u16>,
}

impl SimPorts {
    pub fn new(range: RangeInclusive<u16>) -> Self {
        SimPorts {
            range,
            in_use: BTreeSet::new(),
        }
    }

    pub fn free(&mut self, port: u16) {
        self.in_use.remove(&port);
    }
}

impl PortAllocator for SimPorts {
    fn allocate(&mut self) -> Result<u16, PortError> {
        let port = self.range.clone().find(|p| !self.in_use.contains(p)).ok_or_else(|| {
            PortError::NoFreePort(format!("range {}-{} exhausted", self.range.start(), self.range.end()))
        })?;
        self.in_use.insert(port);
        Ok(port)
    }

    fn release_all(&mut self) {}
}

/// Allocates one ephemeral port and releases it before returning.
pub fn allocate_port() -> Result<u16, PortError> {
    let mut ports = SystemPorts::new();
    let port = ports.allocate()?;
    ports.release_all();
    Ok(port)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn system_port_is_ephemeral_and_rebindable() {
        let port = allocate_port().unwrap();
        assert!(port >= 1024);
        TcpListener::bind(("0.0.0.0", port)).unwrap();
    }

    #[test]
    fn two_allocations_distinct() {
        let mut a = SystemPorts::new();
        let p1 = a.allocate().unwrap();
        let p2 = a.allocate().unwrap();
        assert_ne!(p1, p2);
    }

    #[test]
    fn exhausted_sim_range() {
        let mut ports = SimPorts::new(40000..=40001);
        assert_eq!(ports.allocate(), Ok(40000));
        assert_eq!(ports.allocate(), Ok(40001));
        assert!(matches!(ports.allocate(), Err(PortError::NoFreePort(_))));
        ports.free(40000);
        assert_eq!(ports.allocate(), Ok(40000));
    }
}
