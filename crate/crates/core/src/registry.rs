//! Named strategy registries for runtime selection by config or CLI flag.

use std::sync::Arc;

use crate::error::{Error, Result};

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: Vec<(String, Arc<T>)>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Registry {
            kind,
            entries: Vec::new(),
        }
    }

    /// Adds a strategy, replacing any previous one with the same name.
    pub fn register(&mut self, name: impl Into<String>, strategy: Arc<T>) -> &mut Self {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = strategy,
            None => self.entries.push((name, strategy)),
        }
        self
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| Arc::clone(s))
            .ok_or_else(|| Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn kind(&self) -> &'static str {
        self.kind
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Greeter: Send + Sync {
        fn greet(&self) -> String;
    }

    struct Plain(&'static str);

    impl Greeter for Plain {
        fn greet(&self) -> String {
            self.0.to_string()
        }
    }

    #[test]
    fn lookup_and_replacement() {
        let mut r: Registry<dyn Greeter> = Registry::new("greeter");
        r.register("a", Arc::new(Plain("first")));
        r.register("b", Arc::new(Plain("second")));
        assert_eq!(r.get("a").unwrap().greet(), "first");
        r.register("a", Arc::new(Plain("third")));
        assert_eq!(r.get("a").unwrap().greet(), "third");
        assert_eq!(r.names(), vec!["a", "b"]);
        match r.get("zzz") {
            Err(Error::UnknownStrategy { kind, available, .. }) => {
                assert_eq!(kind, "greeter");
                assert_eq!(available, "a, b");
            }
            _ => panic!("expected an unknown-strategy error"),
        }
    }
}
