use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// Affine map `W x + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut R) -> Self {
        let w = store.add_glorot(format!("{name}.w"), out_dim, in_dim, rng);
        let b = bias.then(|| store.add_zeros(format!("{name}.b"), out_dim, 1));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matvec(w, x);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut R) -> Self {
        let bound = (3.0 / dim as f64).sqrt();
        let table = store.add_uniform(format!("{name}.table"), vocab, dim, bound, rng);
        Embedding { table, vocab, dim }
    }

    pub fn lookup<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, id: usize) -> Var {
        let t = g.param(store, self.table);
        g.row(t, id)
    }

    pub fn table<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore) -> Var {
        g.param(store, self.table)
    }
}

/// Gated recurrent unit with fused gate matrices (update, reset, candidate).
#[derive(Clone, Debug)]
pub struct GruCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bx: ParamId,
    pub bh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let wx = store.add_uniform(format!("{name}.wx"), 3 * hidden, input, bound, rng);
        let wh = store.add_uniform(format!("{name}.wh"), 3 * hidden, hidden, bound, rng);
        let bx = store.add_zeros(format!("{name}.bx"), 3 * hidden, 1);
        let bh = store.add_zeros(format!("{name}.bh"), 3 * hidden, 1);
        GruCell { wx, wh, bx, bh, input, hidden }
    }

    pub fn step<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var, h: Var) -> Var {
        let n = self.hidden;
        let wx = g.param(store, self.wx);
        let wh = g.param(store, self.wh);
        let bx = g.param(store, self.bx);
        let bh = g.param(store, self.bh);
        let gx = g.matvec(wx, x);
        let gx = g.add(gx, bx);
        let gh = g.matvec(wh, h);
        let gh = g.add(gh, bh);
        let xz = g.slice(gx, 0, n);
        let hz = g.slice(gh, 0, n);
        let z = g.add(xz, hz);
        let z = g.sigmoid(z);
        let xr = g.slice(gx, n, n);
        let hr = g.slice(gh, n, n);
        let r = g.add(xr, hr);
        let r = g.sigmoid(r);
        let xn = g.slice(gx, 2 * n, n);
        let hn = g.slice(gh, 2 * n, n);
        let rn = g.mul(r, hn);
        let cand = g.add(xn, rn);
        let cand = g.tanh(cand);
        // h' = (1 - z) * cand + z * h
        let keep = g.mul(z, h);
        let omz = g.one_minus(z);
        let fresh = g.mul(omz, cand);
        g.add(fresh, keep)
    }
}

/// Stack of GRU cells; layer `k > 0` consumes the output of layer `k - 1`.
#[derive(Clone, Debug)]
pub struct Gru {
    pub cells: Vec<GruCell>,
}

impl Gru {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, layers: usize, rng: &mut R) -> Self {
        assert!(layers >= 1, "GRU needs at least one layer");
        let cells = (0..layers)
            .map(|l| GruCell::new(store, &format!("{name}.l{l}"), if l == 0 { input } else { hidden }, hidden, rng))
            .collect();
        Gru { cells }
    }

    pub fn hidden(&self) -> usize {
        self.cells[0].hidden
    }

    pub fn layers(&self) -> usize {
        self.cells.len()
    }

    pub fn zero_state(&self, g: &mut Graph<'_>) -> Vec<Var> {
        self.cells.iter().map(|c| g.zeros(c.hidden)).collect()
    }

    /// One time step through every layer. Returns the new per-layer states;
    /// the last entry is the top-layer output.
    pub fn step<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var, state: &[Var]) -> Vec<Var> {
        let mut input = x;
        let mut next = Vec::with_capacity(self.cells.len());
        for (cell, &h) in self.cells.iter().zip(state) {
            let h2 = cell.step(g, store, input, h);
            next.push(h2);
            input = h2;
        }
        next
    }

    /// Runs over a whole sequence. Returns top-layer outputs per step and the
    /// final per-layer state.
    pub fn run<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, xs: &[Var], init: Vec<Var>) -> (Vec<Var>, Vec<Var>) {
        let mut state = init;
        let mut outs = Vec::with_capacity(xs.len());
        for &x in xs {
            state = self.step(g, store, x, &state);
            outs.push(*state.last().expect("non-empty stack"));
        }
        (outs, state)
    }
}
