//! Named parameter registration on a [`Tape`].

use crate::numerics::{Matrix, Tape, Var};

/// Visits every named parameter matrix of a component.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Places named parameters on a tape as trainable leaves or constants.
pub struct Binder<'a> {
    pub tape: &'a mut Tape,
    trainable: &'a dyn Fn(&str) -> bool,
    registry: Vec<(String, Var)>,
    preset: &'a [(String, Var)],
}

impl<'a> Binder<'a> {
    pub fn new(tape: &'a mut Tape, trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Self {
            tape,
            trainable,
            registry: Vec::new(),
            preset: &[],
        }
    }

    /// Reuses the given leaves for matching names instead of creating new ones.
    pub fn with_leaves(mut self, preset: &'a [(String, Var)]) -> Self {
        self.preset = preset;
        self
    }

    pub fn bind(&mut self, name: &str, value: &Matrix) -> Var {
        if let Some((_, v)) = self.preset.iter().find(|(n, _)| n == name) {
            self.registry.push((name.to_string(), *v));
            return *v;
        }
        let trainable = (self.trainable)(name);
        let v = self.tape.leaf(value.clone(), trainable);
        if trainable {
            self.registry.push((name.to_string(), v));
        }
        v
    }

    /// Names and nodes of the trainable leaves bound so far.
    pub fn finish(self) -> Vec<(String, Var)> {
        self.registry
    }
}

/// Predicate that freezes everything.
pub fn frozen(_: &str) -> bool {
    false
}
