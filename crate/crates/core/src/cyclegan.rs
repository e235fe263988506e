//! Unpaired polarity transfer over frozen word embeddings: translators
//! F (positive → negative) and G (negative → positive), Wasserstein critics
//! D_P and D_N with gradient penalty, and a cycle-consistency term.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sentiscale_nn::parallel::map;
use sentiscale_nn::{Gradients, Graph, Gru, Linear, OptimConfig, Optimizer, ParamId, ParamStore, Tensor, Var};

use crate::checkpoint::{load_params_like, read_json, write_json};
use crate::corpus::truncate;
use crate::embedding::{nearest_token, EmbeddingTable};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CycleConfig {
    pub unit_size: usize,
    pub batch_size: usize,
    pub max_len: usize,
    /// Alternation rounds; each runs `disc_steps` critic and `gen_steps`
    /// translator updates on fresh batches.
    pub iterations: usize,
    pub gen_steps: usize,
    pub disc_steps: usize,
    pub gp_coefficient: f64,
    pub identity_loss: bool,
    /// Zero output projections so untrained translators are identity maps.
    pub identity_init: bool,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl Default for CycleConfig {
    fn default() -> Self {
        CycleConfig {
            unit_size: 256,
            batch_size: 32,
            max_len: 15,
            iterations: 2000,
            gen_steps: 1,
            disc_steps: 1,
            gp_coefficient: 10.0,
            identity_loss: false,
            identity_init: true,
            seed: 0,
            optim: OptimConfig { beta1: 0.5, beta2: 0.9, ..OptimConfig::adam(0.0001) },
        }
    }
}

impl CycleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gen_steps == 0 || self.disc_steps == 0 {
            return Err(CoreError::Config("generator and critic step counts must be at least 1".into()));
        }
        if [self.unit_size, self.batch_size, self.max_len].contains(&0) {
            return Err(CoreError::Config("CycleGAN sizes must be positive".into()));
        }
        if !(self.gp_coefficient >= 0.0) {
            return Err(CoreError::Config(format!("gradient-penalty coefficient {} must be non-negative", self.gp_coefficient)));
        }
        Ok(())
    }
}

/// Length-preserving sequence translator: a GRU encoder summarises the input,
/// a GRU decoder reads each input vector with that summary and emits a
/// residual added to the input vector.
#[derive(Clone, Debug)]
pub struct Translator {
    enc: Gru,
    dec: Gru,
    out: Linear,
}

impl Translator {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, identity: bool, rng: &mut R) -> Self {
        let enc = Gru::new(store, &format!("{name}.enc"), dim, hidden, 1, rng);
        let dec = Gru::new(store, &format!("{name}.dec"), dim + hidden, hidden, 1, rng);
        let out = Linear::new(store, &format!("{name}.out"), hidden, dim, true, rng);
        if identity {
            store.get_mut(out.w).data_mut().fill(0.0);
        }
        Translator { enc, dec, out }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, s: &'a ParamStore, xs: &[Var]) -> Vec<Var> {
        let init = self.enc.zero_state(g);
        let (_, ctx) = self.enc.run(g, s, xs, init);
        let mut state = ctx.clone();
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            let inp = g.concat(&[x, ctx[0]]);
            state = self.dec.step(g, s, inp, &state);
            let r = self.out.forward(g, s, state[0]);
            out.push(g.add(x, r));
        }
        out
    }
}

/// Recurrent critic with an unbounded scalar output.
#[derive(Clone, Debug)]
pub struct Critic {
    rnn: Gru,
    head: Linear,
}

impl Critic {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Critic { rnn: Gru::new(store, &format!("{name}.rnn"), dim, hidden, 1, rng), head: Linear::new(store, &format!("{name}.head"), hidden, 1, true, rng) }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, s: &'a ParamStore, xs: &[Var]) -> Var {
        let init = self.rnn.zero_state(g);
        let (_, h) = self.rnn.run(g, s, xs, init);
        self.head.forward(g, s, h[0])
    }
}

/// All four networks in one store under the prefixes `F.`, `G.`, `dP.`, `dN.`.
#[derive(Clone, Debug)]
pub struct CycleGan {
    pub cfg: CycleConfig,
    pub dim: usize,
    pub store: ParamStore,
    pub f: Translator,
    pub g: Translator,
    pub d_p: Critic,
    pub d_n: Critic,
    /// Checksum of the embedding table the model was trained against.
    pub table_checksum: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleLogEntry {
    pub iter: usize,
    #[serde(rename = "L_dP")]
    pub l_dp: f64,
    #[serde(rename = "L_dN")]
    pub l_dn: f64,
    #[serde(rename = "L_F")]
    pub l_f: f64,
    #[serde(rename = "L_G")]
    pub l_g: f64,
    pub gp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config: CycleConfig,
    dim: usize,
    table_checksum: u64,
}

fn rows(g: &mut Graph<'_>, seq: &[Vec<f64>]) -> Vec<Var> {
    seq.iter().map(|r| g.constant(Tensor::vector(r.clone()))).collect()
}

/// Mean over positions of the squared Euclidean distance between vectors.
fn seq_mse(g: &mut Graph<'_>, a: &[Var], b: &[Var]) -> Var {
    let dim = g.data(a[0]).len() as f64;
    let a = g.concat(a);
    let b = g.concat(b);
    let m = g.mse(a, b);
    g.scale(m, dim)
}

/// λ·(‖∇_u d(u)‖₂ − 1)² at u = ε·real + (1−ε)·fake over the common prefix.
/// `u` enters the graph as fresh leaves, so gradients reach only the critic.
pub fn gradient_penalty<'a>(
    g: &mut Graph<'a>,
    critic: impl Fn(&mut Graph<'a>, &[Var]) -> Var,
    real: &[Vec<f64>],
    fake: &[Vec<f64>],
    eps: f64,
    lambda: f64,
) -> Var {
    let n = real.len().min(fake.len());
    let u: Vec<Var> = (0..n).map(|t| g.vector(real[t].iter().zip(&fake[t]).map(|(r, f)| eps * r + (1.0 - eps) * f).collect())).collect();
    let d = critic(g, &u);
    let grads = g.grad(d, &u);
    let all = g.concat(&grads);
    let sq = g.square(all);
    let ss = g.sum(sq);
    // Keeps the square root differentiable at a zero gradient.
    let ss = g.shift(ss, 1e-12);
    let norm = g.sqrt(ss);
    let dev = g.shift(norm, -1.0);
    let dev2 = g.square(dev);
    g.scale(dev2, lambda)
}

pub struct GenLosses {
    pub l_f: Var,
    pub l_g: Var,
}

impl CycleGan {
    pub fn new(dim: usize, table_checksum: u64, cfg: CycleConfig) -> Result<Self> {
        cfg.validate()?;
        if dim == 0 {
            return Err(CoreError::Config("embedding dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let h = cfg.unit_size;
        let f = Translator::new(&mut store, "F", dim, h, cfg.identity_init, &mut rng);
        let g = Translator::new(&mut store, "G", dim, h, cfg.identity_init, &mut rng);
        let d_p = Critic::new(&mut store, "dP", dim, h, &mut rng);
        let d_n = Critic::new(&mut store, "dN", dim, h, &mut rng);
        Ok(CycleGan { cfg, dim, store, f, g, d_p, d_n, table_checksum })
    }

    fn ids(&self, prefixes: &[&str]) -> Vec<ParamId> {
        prefixes.iter().flat_map(|p| self.store.ids_with_prefix(p).collect::<Vec<_>>()).collect()
    }

    /// D_P(G(y_n)) − D_P(y_p) and D_N(F(y_p)) − D_N(y_n), translators detached.
    pub fn disc_losses<'a>(&self, g: &mut Graph<'a>, s: &'a ParamStore, y_p: &[Var], y_n: &[Var]) -> (Var, Var, Vec<Var>, Vec<Var>) {
        let gn: Vec<Var> = self.g.forward(g, s, y_n).into_iter().map(|v| g.detach(v)).collect();
        let fp: Vec<Var> = self.f.forward(g, s, y_p).into_iter().map(|v| g.detach(v)).collect();
        let a = self.d_p.forward(g, s, &gn);
        let b = self.d_p.forward(g, s, y_p);
        let l_dp = g.sub(a, b);
        let c = self.d_n.forward(g, s, &fp);
        let d = self.d_n.forward(g, s, y_n);
        let l_dn = g.sub(c, d);
        (l_dp, l_dn, gn, fp)
    }

    /// Translator losses sharing the cycle term C.
    pub fn gen_losses<'a>(&self, g: &mut Graph<'a>, s: &'a ParamStore, y_p: &[Var], y_n: &[Var], identity: bool) -> GenLosses {
        let fp = self.f.forward(g, s, y_p);
        let gfp = self.g.forward(g, s, &fp);
        let gn = self.g.forward(g, s, y_n);
        let fgn = self.f.forward(g, s, &gn);
        let m1 = seq_mse(g, y_p, &gfp);
        let m2 = seq_mse(g, y_n, &fgn);
        let c = g.add(m1, m2);
        let mut c = g.scale(c, 2.0);
        if identity {
            let gp = self.g.forward(g, s, y_p);
            let fneg = self.f.forward(g, s, y_n);
            let i1 = seq_mse(g, y_p, &gp);
            let i2 = seq_mse(g, y_n, &fneg);
            let i = g.add(i1, i2);
            c = g.add(c, i);
        }
        let dn = self.d_n.forward(g, s, &fp);
        let dp = self.d_p.forward(g, s, &gn);
        GenLosses { l_f: g.sub(c, dn), l_g: g.sub(c, dp) }
    }

    fn disc_example(&self, s: &ParamStore, y_p: &[Vec<f64>], y_n: &[Vec<f64>], eps: (f64, f64)) -> (f64, Gradients, [f64; 3]) {
        let mut g = Graph::new();
        let p = rows(&mut g, y_p);
        let n = rows(&mut g, y_n);
        let (l_dp, l_dn, gn, fp) = self.disc_losses(&mut g, s, &p, &n);
        let gn: Vec<Vec<f64>> = gn.iter().map(|&v| g.data(v).to_vec()).collect();
        let fp: Vec<Vec<f64>> = fp.iter().map(|&v| g.data(v).to_vec()).collect();
        let lam = self.cfg.gp_coefficient;
        let gp_p = gradient_penalty(&mut g, |g, u| self.d_p.forward(g, s, u), y_p, &gn, eps.0, lam);
        let gp_n = gradient_penalty(&mut g, |g, u| self.d_n.forward(g, s, u), y_n, &fp, eps.1, lam);
        let gps = g.add(gp_p, gp_n);
        let l = g.add(l_dp, l_dn);
        let total = g.add(l, gps);
        let grads = g.backward(total).gradients(&g, s);
        (g.scalar(total), grads, [g.scalar(l_dp), g.scalar(l_dn), g.scalar(gps)])
    }

    fn gen_example(&self, s: &ParamStore, y_p: &[Vec<f64>], y_n: &[Vec<f64>], f_ids: &[ParamId], g_ids: &[ParamId]) -> (f64, Gradients, [f64; 2]) {
        let mut g = Graph::new();
        let p = rows(&mut g, y_p);
        let n = rows(&mut g, y_n);
        let l = self.gen_losses(&mut g, s, &p, &n, self.cfg.identity_loss);
        let mut gf = g.backward(l.l_f).gradients(&g, s);
        gf.retain(f_ids);
        let mut gg = g.backward(l.l_g).gradients(&g, s);
        gg.retain(g_ids);
        gf.merge(gg);
        let (a, b) = (g.scalar(l.l_f), g.scalar(l.l_g));
        (a + b, gf, [a, b])
    }

    /// G applied to an embedded sentence.
    pub fn translate_rows(&self, which: Direction, seq: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let xs = rows(&mut g, seq);
        let t = match which {
            Direction::NegToPos => &self.g,
            Direction::PosToNeg => &self.f,
        };
        let out = t.forward(&mut g, &self.store, &xs);
        out.iter().map(|&v| g.data(v).to_vec()).collect()
    }

    /// Mean MSE(y, F(G(y))) over embedded negatives.
    pub fn cycle_mse(&self, negatives: &[Vec<Vec<f64>>]) -> f64 {
        let per = map(negatives, |y| {
            let gy = self.translate_rows(Direction::NegToPos, y);
            let fgy = self.translate_rows(Direction::PosToNeg, &gy);
            let n = y.len() as f64;
            y.iter().flatten().zip(fgy.iter().flatten()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n
        });
        per.iter().sum::<f64>() / per.len().max(1) as f64
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("config.json"), &Manifest { config: self.cfg.clone(), dim: self.dim, table_checksum: self.table_checksum })?;
        self.store.save(dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest = read_json(&dir.join("config.json"))?;
        let mut c = CycleGan::new(m.dim, m.table_checksum, m.config)?;
        c.store = load_params_like(dir, &c.store)?;
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    NegToPos,
    PosToNeg,
}

pub fn embed_rows(table: &EmbeddingTable, ids: &[usize]) -> Vec<Vec<f64>> {
    ids.iter().map(|&i| table.row(i).to_vec()).collect()
}

fn embed_all(table: &EmbeddingTable, sents: &[Vec<usize>], max_len: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    sents
        .iter()
        .map(|s| {
            if s.is_empty() {
                return Err(CoreError::EmptySentence);
            }
            if let Some(i) = s.iter().find(|&&i| i >= table.len()) {
                return Err(CoreError::Encoding(format!("token id {i} outside embedding table")));
            }
            Ok(embed_rows(table, &truncate(s, max_len)))
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub log: Vec<CycleLogEntry>,
}

/// Alternating critic / translator training. Sentences are ids in the
/// table's vocabulary; the table is only read.
pub fn train_cyclegan(pos: &[Vec<usize>], neg: &[Vec<usize>], table: &EmbeddingTable, cfg: &CycleConfig) -> Result<(CycleGan, CycleReport)> {
    cfg.validate()?;
    if pos.is_empty() || neg.is_empty() {
        return Err(CoreError::InsufficientData("CycleGAN needs positive and negative sentences".into()));
    }
    let pos = embed_all(table, pos, cfg.max_len)?;
    let neg = embed_all(table, neg, cfg.max_len)?;
    let mut model = CycleGan::new(table.dim(), table.checksum(), cfg.clone())?;
    let disc_ids = model.ids(&["dP.", "dN."]);
    let f_ids = model.ids(&["F."]);
    let g_ids = model.ids(&["G."]);
    let mut d_opt = Optimizer::new(cfg.optim.clone());
    let mut g_opt = Optimizer::new(cfg.optim.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc7c1e);
    let mut log = Vec::with_capacity(cfg.iterations);
    let b = cfg.batch_size;
    for iter in 0..cfg.iterations {
        let mut entry = CycleLogEntry { iter, ..Default::default() };
        for _ in 0..cfg.disc_steps {
            let batch: Vec<(usize, usize, f64, f64)> = (0..b).map(|_| (rng.gen_range(0..pos.len()), rng.gen_range(0..neg.len()), rng.gen(), rng.gen())).collect();
            let parts = map(&batch, |&(i, j, e1, e2)| model.disc_example(&model.store, &pos[i], &neg[j], (e1, e2)));
            let mut grads = Gradients::for_store(&model.store);
            let mut sums = [0.0; 3];
            for (_, gr, c) in parts {
                grads.merge(gr);
                for k in 0..3 {
                    sums[k] += c[k];
                }
            }
            grads.retain(&disc_ids);
            grads.scale(1.0 / b as f64);
            if !sums.iter().all(|v| v.is_finite()) || !grads.all_finite() {
                return Err(CoreError::TrainingDiverged { at: iter });
            }
            d_opt.apply(&mut model.store, &grads);
            entry.l_dp = sums[0] / b as f64;
            entry.l_dn = sums[1] / b as f64;
            entry.gp = sums[2] / b as f64;
        }
        for _ in 0..cfg.gen_steps {
            let batch: Vec<(usize, usize)> = (0..b).map(|_| (rng.gen_range(0..pos.len()), rng.gen_range(0..neg.len()))).collect();
            let parts = map(&batch, |&(i, j)| model.gen_example(&model.store, &pos[i], &neg[j], &f_ids, &g_ids));
            let mut grads = Gradients::for_store(&model.store);
            let mut sums = [0.0; 2];
            for (_, gr, c) in parts {
                grads.merge(gr);
                sums[0] += c[0];
                sums[1] += c[1];
            }
            grads.scale(1.0 / b as f64);
            if !sums.iter().all(|v| v.is_finite()) || !grads.all_finite() {
                return Err(CoreError::TrainingDiverged { at: iter });
            }
            g_opt.apply(&mut model.store, &grads);
            entry.l_f = sums[0] / b as f64;
            entry.l_g = sums[1] / b as f64;
        }
        log.push(entry);
    }
    Ok((model, CycleReport { log }))
}

/// Translates a sentence (table-vocabulary ids) and decodes each position to
/// its cosine-nearest non-special token.
pub fn transfer(model: &CycleGan, table: &EmbeddingTable, ids: &[usize], direction: Direction) -> Result<Vec<usize>> {
    if ids.is_empty() {
        return Err(CoreError::EmptySentence);
    }
    if model.dim != table.dim() {
        return Err(CoreError::Config(format!("model expects {}-dim embeddings, table has {}", model.dim, table.dim())));
    }
    let seq = embed_all(table, &[ids.to_vec()], model.cfg.max_len)?.pop().expect("one sentence");
    model.translate_rows(direction, &seq).iter().map(|v| nearest_token(table, v)).collect()
}
