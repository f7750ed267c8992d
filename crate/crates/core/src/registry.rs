//! Named strategy registries.
//!
//! Each family of interchangeable behaviour (optimizer, reference init,
//! quantization objective, ...) is a trait; a [`Registry`] maps
//! configuration names to factories producing boxed trait objects.

use crate::error::{Error, Result};

type Factory<T, P> = Box<dyn Fn(&P) -> Box<T> + Send + Sync>;

pub struct Registry<T: ?Sized, P = ()> {
    kind: &'static str,
    entries: Vec<(&'static str, Factory<T, P>)>,
}

impl<T: ?Sized, P> Registry<T, P> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: Vec::new(),
        }
    }

    /// Adds a strategy. Registering a name twice replaces the earlier factory.
    pub fn register(
        &mut self,
        name: &'static str,
        factory: impl Fn(&P) -> Box<T> + Send + Sync + 'static,
    ) -> &mut Self {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, Box::new(factory)));
        self
    }

    pub fn with(mut self, name: &'static str, factory: impl Fn(&P) -> Box<T> + Send + Sync + 'static) -> Self {
        self.register(name, factory);
        self
    }

    pub fn kind(&self) -> &'static str {
        self.kind
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| *n == name)
    }

    /// Checks a name without building anything.
    pub fn validate(&self, name: &str) -> Result<()> {
        if self.contains(name) {
            Ok(())
        } else {
            Err(self.unknown(name))
        }
    }

    pub fn create(&self, name: &str, params: &P) -> Result<Box<T>> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, f)| f(params))
            .ok_or_else(|| self.unknown(name))
    }

    fn unknown(&self, name: &str) -> Error {
        Error::UnknownStrategy {
            kind: self.kind,
            name: name.to_string(),
            available: self.names().join(", "),
        }
    }
}

/// Reference initializers: `random-unit`, `kmeans-warmstart`.
pub fn reference_inits() -> Registry<dyn crate::l2gmapper::ReferenceInit> {
    use crate::l2gmapper::{KMeansWarmStart, RandomUnit, ReferenceInit};
    Registry::<dyn ReferenceInit>::new("reference init")
        .with("random-unit", |_| Box::new(RandomUnit))
        .with("kmeans-warmstart", |_| Box::new(KMeansWarmStart))
}

/// Quantization objectives, parameterized by the commitment weight:
/// `stop-gradient`, `literal`.
pub fn quant_objectives() -> Registry<dyn crate::quantizer::QuantObjective, f64> {
    use crate::quantizer::{LiteralSquaredError, QuantObjective, StopGradientPair};
    Registry::<dyn QuantObjective, f64>::new("quantization objective")
        .with("stop-gradient", |&beta| Box::new(StopGradientPair { beta }))
        .with("literal", |_| Box::new(LiteralSquaredError))
}
