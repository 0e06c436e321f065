//! Name-keyed tables of conic backends, relaxation models and recovery
//! algorithms.

use crate::conic::{ClarabelBackend, ConicBackend};
use crate::recovery::{BfmModel, BimModel, Penalty, PostProcess, RecoveryAlgorithm, RelaxationModel};

pub struct Registry<T: ?Sized> {
    entries: Vec<(&'static str, Box<T>)>,
}

impl<T: ?Sized> Default for Registry<T> {
    fn default() -> Self {
        Registry { entries: Vec::new() }
    }
}

impl<T: ?Sized> Registry<T> {
    /// Adds `item` under `name`, replacing an earlier entry of that name.
    pub fn register(&mut self, name: &'static str, item: Box<T>) {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, item));
    }

    pub fn get(&self, name: &str) -> Option<&T> {
        self.entries.iter().find(|(n, _)| *n == name).map(|(_, b)| b.as_ref())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }
}

pub fn backends() -> Registry<dyn ConicBackend> {
    let mut r: Registry<dyn ConicBackend> = Registry::default();
    r.register("clarabel", Box::new(ClarabelBackend));
    r
}

pub fn models() -> Registry<dyn RelaxationModel> {
    let mut r: Registry<dyn RelaxationModel> = Registry::default();
    r.register("bim", Box::new(BimModel));
    r.register("bfm", Box::new(BfmModel));
    r
}

pub fn algorithms() -> Registry<dyn RecoveryAlgorithm> {
    let mut r: Registry<dyn RecoveryAlgorithm> = Registry::default();
    r.register("post", Box::new(PostProcess));
    r.register("penalty", Box::new(Penalty));
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_registered_under_their_own_names() {
        assert_eq!(backends().names(), ["clarabel"]);
        assert_eq!(backends().get("clarabel").unwrap().name(), "clarabel");
        for n in ["bim", "bfm"] {
            assert_eq!(models().get(n).unwrap().name(), n);
        }
        for n in ["post", "penalty"] {
            assert_eq!(algorithms().get(n).unwrap().name(), n);
        }
        assert!(models().get("dense").is_none());
    }

    #[test]
    fn registering_twice_replaces() {
        let mut r = models();
        r.register("bim", Box::new(BfmModel));
        assert_eq!(r.names(), ["bfm", "bim"]);
        assert_eq!(r.get("bim").unwrap().name(), "bfm");
    }
}
