use std::collections::HashMap;

use super::params::{Group, Init, ParamStore};
use crate::tensor::{Real, Tape, Var};

/// A tape with every model parameter bound as a leaf, plus a record of the
/// shapes seen at annotated reshape points.
pub struct Graph<T: Real> {
    pub tape: Tape<T>,
    vars: HashMap<String, Var>,
    bound: Vec<(String, Var)>,
    pub trace: Vec<(&'static str, Vec<usize>)>,
}

impl<T: Real> Graph<T> {
    /// Binds `store`. With `train`, non-frozen parameters require gradients.
    pub fn bind(store: &ParamStore<T>, train: bool) -> Self {
        let mut tape = Tape::new();
        let mut vars = HashMap::with_capacity(store.len());
        let mut bound = Vec::with_capacity(store.len());
        for p in store.iter() {
            let v = tape.leaf(p.value.clone(), train && !p.frozen);
            vars.insert(p.name.clone(), v);
            bound.push((p.name.clone(), v));
        }
        Self { tape, vars, bound, trace: Vec::new() }
    }

    pub fn p(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Bound parameters in store order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.bound
    }

    pub fn note(&mut self, label: &'static str, v: Var) {
        let shape = self.tape.shape(v).to_vec();
        self.trace.push((label, shape));
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.tape.shape(v).to_vec()
    }

    pub fn linear(&mut self, prefix: &str, x: Var) -> Var {
        let (w, b) = (self.p(&format!("{prefix}.weight")), self.p(&format!("{prefix}.bias")));
        self.tape.linear(x, w, Some(b))
    }

    pub fn layer_norm(&mut self, prefix: &str, x: Var) -> Var {
        let (g, b) = (self.p(&format!("{prefix}.gamma")), self.p(&format!("{prefix}.beta")));
        self.tape.layer_norm(x, g, b, 1e-5)
    }

    pub fn conv(&mut self, prefix: &str, x: Var) -> Var {
        let (w, b) = (self.p(&format!("{prefix}.weight")), self.p(&format!("{prefix}.bias")));
        self.tape.conv2d(x, w, Some(b))
    }

    /// `fc2(gelu(fc1(x)))`.
    pub fn mlp(&mut self, prefix: &str, x: Var) -> Var {
        let h = self.linear(&format!("{prefix}.fc1"), x);
        let h = self.tape.gelu(h);
        self.linear(&format!("{prefix}.fc2"), h)
    }

    /// Multi-head attention of `q_in: [N, Lq, Cq]` over `kv_in: [N, Lk, Ck]`,
    /// returning `[N, Lq, Cq]`.
    pub fn attention(&mut self, prefix: &str, q_in: Var, kv_in: Var, heads: usize) -> Var {
        let qs = self.shape(q_in);
        let ks = self.shape(kv_in);
        assert_eq!(qs.len(), 3, "attention queries must be [N, L, C]");
        assert_eq!(ks.len(), 3, "attention keys must be [N, L, C]");
        assert_eq!(qs[0], ks[0], "attention batch: {qs:?} vs {ks:?}");
        let (n, lq, lk) = (qs[0], qs[1], ks[1]);
        let q = self.linear(&format!("{prefix}.q"), q_in);
        let k = self.linear(&format!("{prefix}.k"), kv_in);
        let v = self.linear(&format!("{prefix}.v"), kv_in);
        let c = *self.tape.shape(q).last().unwrap();
        assert_eq!(c % heads, 0, "{prefix}: width {c} not divisible by {heads} heads");
        let d = c / heads;
        let split = |g: &mut Self, x: Var, l: usize| {
            let x = g.tape.reshape(x, &[n, l, heads, d]);
            g.tape.permute(x, &[0, 2, 1, 3])
        };
        let q = split(self, q, lq);
        let q = self.tape.scale(q, T::of(1.0 / (d as f64).sqrt()));
        let k = split(self, k, lk);
        let v = split(self, v, lk);
        let scores = self.tape.matmul(q, k, false, true);
        let attn = self.tape.softmax(scores);
        let out = self.tape.matmul(attn, v, false, false);
        let out = self.tape.permute(out, &[0, 2, 1, 3]);
        let out = self.tape.reshape(out, &[n, lq, c]);
        self.linear(&format!("{prefix}.o"), out)
    }
}

/// Parameter registration helpers mirroring the [`Graph`] layer helpers.
pub struct Builder<'a, T: Real> {
    pub store: &'a mut ParamStore<T>,
    pub seed: u64,
}

impl<T: Real> Builder<'_, T> {
    pub fn linear(&mut self, prefix: &str, din: usize, dout: usize, group: Group, frozen: bool) {
        let std = 1.0 / (din as f64).sqrt();
        self.store.register(self.seed, &format!("{prefix}.weight"), &[din, dout], group, frozen, Init::Normal(std));
        self.store.register(self.seed, &format!("{prefix}.bias"), &[dout], group, frozen, Init::Zeros);
    }

    pub fn linear_zero(&mut self, prefix: &str, din: usize, dout: usize, group: Group) {
        self.store.register(self.seed, &format!("{prefix}.weight"), &[din, dout], group, false, Init::Zeros);
        self.store.register(self.seed, &format!("{prefix}.bias"), &[dout], group, false, Init::Zeros);
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize) {
        self.store.register(self.seed, &format!("{prefix}.gamma"), &[dim], Group::Norm, false, Init::Ones);
        self.store.register(self.seed, &format!("{prefix}.beta"), &[dim], Group::Norm, false, Init::Zeros);
    }

    pub fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, group: Group) {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        self.store.register(self.seed, &format!("{prefix}.weight"), &[cout, cin, k, k], group, false, Init::Normal(std));
        self.store.register(self.seed, &format!("{prefix}.bias"), &[cout], group, false, Init::Zeros);
    }

    pub fn mlp(&mut self, prefix: &str, din: usize, hidden: usize, dout: usize, group: Group, frozen: bool) {
        self.linear(&format!("{prefix}.fc1"), din, hidden, group, frozen);
        self.linear(&format!("{prefix}.fc2"), hidden, dout, group, frozen);
    }

    pub fn attention(&mut self, prefix: &str, dq: usize, dkv: usize, width: usize, group: Group, frozen: bool) {
        self.linear(&format!("{prefix}.q"), dq, width, group, frozen);
        self.linear(&format!("{prefix}.k"), dkv, width, group, frozen);
        self.linear(&format!("{prefix}.v"), dkv, width, group, frozen);
        self.linear(&format!("{prefix}.o"), width, dq, group, frozen);
    }
}
