//! Name-keyed registries of interchangeable strategies.
//!
//! Each algorithm family (kernels, control metrics, optimizers, interpolation
//! methods) exposes a trait; concrete variants are registered under a stable
//! name and constructed at runtime from a family-specific settings value.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

type Constructor<S, T> = Box<dyn Fn(&S) -> Result<Box<T>> + Send + Sync>;

pub struct Registry<S, T: ?Sized> {
    family: &'static str,
    entries: BTreeMap<&'static str, Constructor<S, T>>,
}

impl<S, T: ?Sized> Registry<S, T> {
    pub fn new(family: &'static str) -> Self {
        Self {
            family,
            entries: BTreeMap::new(),
        }
    }

    /// Registers `ctor` under `name`, replacing any previous entry.
    pub fn register<F>(&mut self, name: &'static str, ctor: F) -> &mut Self
    where
        F: Fn(&S) -> Result<Box<T>> + Send + Sync + 'static,
    {
        self.entries.insert(name, Box::new(ctor));
        self
    }

    pub fn create(&self, name: &str, settings: &S) -> Result<Box<T>> {
        match self.entries.get(name) {
            Some(ctor) => ctor(settings),
            None => Err(Error::UnknownStrategy {
                family: self.family,
                name: name.to_string(),
                available: self.names().join(", "),
            }),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn family(&self) -> &'static str {
        self.family
    }
}

impl<S, T: ?Sized> fmt::Debug for Registry<S, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("family", &self.family)
            .field("entries", &self.names())
            .finish()
    }
}
