//! Named parameter collections that can be bound into a [`Graph`].

use crate::numerics::{Graph, Tensor, Var};

/// A fixed, ordered set of trainable tensors.
///
/// `named` and `tensors_mut` must list tensors in the order `bind` consumes
/// graph handles.
pub trait ParamSet {
    type Vars;

    fn named(&self) -> Vec<(String, &Tensor)>;

    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn bind(&self, vars: &mut dyn Iterator<Item = Var>) -> Self::Vars;

    /// Adds every tensor to `g` as a leaf and returns the typed handles.
    fn register(&self, g: &mut Graph, trainable: bool) -> Self::Vars {
        let vars: Vec<Var> = self
            .named()
            .into_iter()
            .map(|(_, t)| g.leaf(t.clone(), trainable))
            .collect();
        self.bind(&mut vars.into_iter())
    }

    fn n_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, inner: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    inner
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

pub(crate) fn next(vars: &mut dyn Iterator<Item = Var>) -> Var {
    vars.next().expect("parameter binding ran out of graph handles")
}
