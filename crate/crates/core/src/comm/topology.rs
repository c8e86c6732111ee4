use std::fmt;
use std::str::FromStr;

use super::CommError;

/// `X` machines with `Y` devices each, written `<X>M<Y>G`. Ranks are laid
/// out machine-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Topology {
    pub machines: usize,
    pub gpus_per_machine: usize,
}

impl Topology {
    pub fn new(machines: usize, gpus_per_machine: usize) -> Topology {
        assert!(machines > 0 && gpus_per_machine > 0, "empty topology");
        Topology {
            machines,
            gpus_per_machine,
        }
    }

    /// All ranks on one machine.
    pub fn flat(world: usize) -> Topology {
        Topology::new(1, world)
    }

    pub fn world(&self) -> usize {
        self.machines * self.gpus_per_machine
    }

    pub fn machine_of(&self, rank: usize) -> usize {
        rank / self.gpus_per_machine
    }

    pub fn gpu_of(&self, rank: usize) -> usize {
        rank % self.gpus_per_machine
    }

    pub fn next(&self, rank: usize) -> usize {
        (rank + 1) % self.world()
    }

    pub fn prev(&self, rank: usize) -> usize {
        (rank + self.world() - 1) % self.world()
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}M{}G", self.machines, self.gpus_per_machine)
    }
}

impl FromStr for Topology {
    type Err = CommError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CommError::Rendezvous(format!("bad topology label `{s}`"));
        let s2 = s.trim().to_ascii_uppercase();
        let (x, rest) = s2.split_once('M').ok_or_else(bad)?;
        let y = rest.strip_suffix('G').ok_or_else(bad)?;
        let x: usize = x.parse().map_err(|_| bad())?;
        let y: usize = y.parse().map_err(|_| bad())?;
        if x == 0 || y == 0 {
            return Err(bad());
        }
        Ok(Topology::new(x, y))
    }
}
