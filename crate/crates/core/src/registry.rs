use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Name-keyed table of interchangeable strategy objects.
///
/// Centroid generators, fusion classifiers and score functions each live in
/// one of these, so configs and the CLI can pick a variant by its name.
pub struct Registry<T: ?Sized> {
    family: &'static str,
    entries: BTreeMap<&'static str, Arc<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(family: &'static str) -> Self {
        Registry {
            family,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(mut self, name: &'static str, strategy: Arc<T>) -> Self {
        self.entries.insert(name, strategy);
        self
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        self.entries.get(name).cloned().ok_or_else(|| Error::UnknownStrategy {
            family: self.family,
            name: name.to_string(),
            available: self.names().join(", "),
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn family(&self) -> &'static str {
        self.family
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Greet: Send + Sync {
        fn hello(&self) -> String;
    }

    struct En;
    impl Greet for En {
        fn hello(&self) -> String {
            "hello".into()
        }
    }

    #[test]
    fn lookup_and_unknown() {
        let reg: Registry<dyn Greet> = Registry::new("greeter").register("en", Arc::new(En));
        assert_eq!(reg.get("en").unwrap().hello(), "hello");
        match reg.get("fr") {
            Err(Error::UnknownStrategy { available, .. }) => assert_eq!(available, "en"),
            _ => panic!("expected unknown strategy"),
        }
    }
}
