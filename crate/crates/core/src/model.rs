//! All trainable weights, their initialization, and tape registration.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Value};
use crate::config::RunConfig;
use crate::error::Result;

/// How a parameter participates in initialization and L2 regularization.
/// Only `Weight` matrices enter the L2 term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Embedding,
}

/// Structural dimensions every parameter shape derives from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub embed: usize,
    pub case_feat: usize,
    pub window: usize,
    pub horizon: usize,
    pub layers: usize,
}

impl ModelDims {
    pub fn from_config(cfg: &RunConfig) -> Self {
        ModelDims {
            embed: cfg.embed_dim,
            case_feat: cfg.case_feature_dim,
            window: cfg.window,
            horizon: cfg.horizon,
            layers: cfg.sage_layers,
        }
    }
}

/// Two-layer perceptron: linear, ReLU, linear.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpParams {
    pub w1: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DMatrix<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SageParams {
    pub w_self: DMatrix<f64>,
    pub w_neigh: DMatrix<f64>,
}

/// Every trainable matrix in the model. Relation order throughout is
/// spatial, genetic, assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    /// Raw feature projections into the shared embedding space.
    pub proj_loc_w: DMatrix<f64>,
    pub proj_loc_b: DMatrix<f64>,
    pub proj_case_w: DMatrix<f64>,
    pub proj_case_b: DMatrix<f64>,
    /// Cross-layer smoothing: one matrix per relation, one bias per node type.
    pub smooth_w: Vec<DMatrix<f64>>,
    pub smooth_b_loc: DMatrix<f64>,
    pub smooth_b_case: DMatrix<f64>,
    /// Fusion-node perceptrons.
    pub f1: MlpParams,
    pub f2: MlpParams,
    pub fm: MlpParams,
    /// Link predictor over concatenated pairs.
    pub link_w: DMatrix<f64>,
    pub link_b: DMatrix<f64>,
    /// Relation-aware edge embeddings and their attention gate.
    pub rel_emb_spatial: DMatrix<f64>,
    pub rel_emb_genetic: DMatrix<f64>,
    pub edge_w: DMatrix<f64>,
    pub edge_b: DMatrix<f64>,
    pub attn_q: DMatrix<f64>,
    pub attn_k: DMatrix<f64>,
    /// Encoder stack, shared across window steps.
    pub enc_sage: Vec<SageParams>,
    pub pos_emb: DMatrix<f64>,
    pub temp_q: DMatrix<f64>,
    pub temp_k: DMatrix<f64>,
    /// Decoder stack (parameters separate from the encoder).
    pub dec_sage: Vec<SageParams>,
    pub dec_prev_w: DMatrix<f64>,
    pub step_emb: DMatrix<f64>,
    pub out_w: DMatrix<f64>,
}

macro_rules! visit_fields {
    ($self:expr, $f:expr, $($ref_mut:tt)*) => {{
        let s = $self;
        let f = $f;
        f("proj_loc_w", ParamKind::Weight, & $($ref_mut)* s.proj_loc_w);
        f("proj_loc_b", ParamKind::Bias, & $($ref_mut)* s.proj_loc_b);
        f("proj_case_w", ParamKind::Weight, & $($ref_mut)* s.proj_case_w);
        f("proj_case_b", ParamKind::Bias, & $($ref_mut)* s.proj_case_b);
        for (i, w) in s.smooth_w.iter $($ref_mut)* ().enumerate() {
            let name: &'static str = ["smooth_w_spatial", "smooth_w_genetic", "smooth_w_assign"][i];
            f(name, ParamKind::Weight, w);
        }
        f("smooth_b_loc", ParamKind::Bias, & $($ref_mut)* s.smooth_b_loc);
        f("smooth_b_case", ParamKind::Bias, & $($ref_mut)* s.smooth_b_case);
        f("f1_w1", ParamKind::Weight, & $($ref_mut)* s.f1.w1);
        f("f1_b1", ParamKind::Bias, & $($ref_mut)* s.f1.b1);
        f("f1_w2", ParamKind::Weight, & $($ref_mut)* s.f1.w2);
        f("f1_b2", ParamKind::Bias, & $($ref_mut)* s.f1.b2);
        f("f2_w1", ParamKind::Weight, & $($ref_mut)* s.f2.w1);
        f("f2_b1", ParamKind::Bias, & $($ref_mut)* s.f2.b1);
        f("f2_w2", ParamKind::Weight, & $($ref_mut)* s.f2.w2);
        f("f2_b2", ParamKind::Bias, & $($ref_mut)* s.f2.b2);
        f("fm_w1", ParamKind::Weight, & $($ref_mut)* s.fm.w1);
        f("fm_b1", ParamKind::Bias, & $($ref_mut)* s.fm.b1);
        f("fm_w2", ParamKind::Weight, & $($ref_mut)* s.fm.w2);
        f("fm_b2", ParamKind::Bias, & $($ref_mut)* s.fm.b2);
        f("link_w", ParamKind::Weight, & $($ref_mut)* s.link_w);
        f("link_b", ParamKind::Bias, & $($ref_mut)* s.link_b);
        f("rel_emb_spatial", ParamKind::Embedding, & $($ref_mut)* s.rel_emb_spatial);
        f("rel_emb_genetic", ParamKind::Embedding, & $($ref_mut)* s.rel_emb_genetic);
        f("edge_w", ParamKind::Weight, & $($ref_mut)* s.edge_w);
        f("edge_b", ParamKind::Bias, & $($ref_mut)* s.edge_b);
        f("attn_q", ParamKind::Weight, & $($ref_mut)* s.attn_q);
        f("attn_k", ParamKind::Weight, & $($ref_mut)* s.attn_k);
        for (i, l) in s.enc_sage.iter $($ref_mut)* ().enumerate() {
            f(enc_self_name(i), ParamKind::Weight, & $($ref_mut)* l.w_self);
            f(enc_neigh_name(i), ParamKind::Weight, & $($ref_mut)* l.w_neigh);
        }
        f("pos_emb", ParamKind::Embedding, & $($ref_mut)* s.pos_emb);
        f("temp_q", ParamKind::Weight, & $($ref_mut)* s.temp_q);
        f("temp_k", ParamKind::Weight, & $($ref_mut)* s.temp_k);
        for (i, l) in s.dec_sage.iter $($ref_mut)* ().enumerate() {
            f(dec_self_name(i), ParamKind::Weight, & $($ref_mut)* l.w_self);
            f(dec_neigh_name(i), ParamKind::Weight, & $($ref_mut)* l.w_neigh);
        }
        f("dec_prev_w", ParamKind::Weight, & $($ref_mut)* s.dec_prev_w);
        f("step_emb", ParamKind::Embedding, & $($ref_mut)* s.step_emb);
        f("out_w", ParamKind::Weight, & $($ref_mut)* s.out_w);
    }};
}

const LAYER_NAMES_SELF_ENC: &[&str] = &[
    "enc_sage0_self",
    "enc_sage1_self",
    "enc_sage2_self",
    "enc_sage3_self",
    "enc_sage4_self",
    "enc_sage5_self",
    "enc_sage6_self",
    "enc_sage7_self",
];
const LAYER_NAMES_NEIGH_ENC: &[&str] = &[
    "enc_sage0_neigh",
    "enc_sage1_neigh",
    "enc_sage2_neigh",
    "enc_sage3_neigh",
    "enc_sage4_neigh",
    "enc_sage5_neigh",
    "enc_sage6_neigh",
    "enc_sage7_neigh",
];
const LAYER_NAMES_SELF_DEC: &[&str] = &[
    "dec_sage0_self",
    "dec_sage1_self",
    "dec_sage2_self",
    "dec_sage3_self",
    "dec_sage4_self",
    "dec_sage5_self",
    "dec_sage6_self",
    "dec_sage7_self",
];
const LAYER_NAMES_NEIGH_DEC: &[&str] = &[
    "dec_sage0_neigh",
    "dec_sage1_neigh",
    "dec_sage2_neigh",
    "dec_sage3_neigh",
    "dec_sage4_neigh",
    "dec_sage5_neigh",
    "dec_sage6_neigh",
    "dec_sage7_neigh",
];

fn enc_self_name(i: usize) -> &'static str {
    LAYER_NAMES_SELF_ENC[i]
}
fn enc_neigh_name(i: usize) -> &'static str {
    LAYER_NAMES_NEIGH_ENC[i]
}
fn dec_self_name(i: usize) -> &'static str {
    LAYER_NAMES_SELF_DEC[i]
}
fn dec_neigh_name(i: usize) -> &'static str {
    LAYER_NAMES_NEIGH_DEC[i]
}

impl ModelParams {
    /// All-zeros parameter set with the shapes implied by `dims`.
    pub fn zeros(dims: ModelDims) -> Self {
        let d = dims.embed;
        let dg = dims.case_feat;
        let mlp = || MlpParams {
            w1: DMatrix::zeros(d, 2 * d),
            b1: DMatrix::zeros(1, d),
            w2: DMatrix::zeros(d, d),
            b2: DMatrix::zeros(1, d),
        };
        let sage = || SageParams {
            w_self: DMatrix::zeros(d, d),
            w_neigh: DMatrix::zeros(d, d),
        };
        ModelParams {
            dims,
            proj_loc_w: DMatrix::zeros(d, 2),
            proj_loc_b: DMatrix::zeros(1, d),
            proj_case_w: DMatrix::zeros(d, dg),
            proj_case_b: DMatrix::zeros(1, d),
            smooth_w: vec![DMatrix::zeros(d, d); 3],
            smooth_b_loc: DMatrix::zeros(1, d),
            smooth_b_case: DMatrix::zeros(1, d),
            f1: mlp(),
            f2: mlp(),
            fm: mlp(),
            link_w: DMatrix::zeros(1, 2 * d),
            link_b: DMatrix::zeros(1, 1),
            rel_emb_spatial: DMatrix::zeros(1, d),
            rel_emb_genetic: DMatrix::zeros(1, d),
            edge_w: DMatrix::zeros(d, 1),
            edge_b: DMatrix::zeros(1, d),
            attn_q: DMatrix::zeros(d, 2 * d),
            attn_k: DMatrix::zeros(d, d),
            enc_sage: (0..dims.layers).map(|_| sage()).collect(),
            pos_emb: DMatrix::zeros(dims.window, d),
            temp_q: DMatrix::zeros(d, d),
            temp_k: DMatrix::zeros(d, d),
            dec_sage: (0..dims.layers).map(|_| sage()).collect(),
            dec_prev_w: DMatrix::zeros(d, d),
            step_emb: DMatrix::zeros(dims.horizon, d),
            out_w: DMatrix::zeros(1, d),
        }
    }

    /// Seeded initialization: Xavier-uniform weights, zero biases, small
    /// uniform embeddings. Draw order is the fixed field order, so equal
    /// seeds give bit-identical parameters.
    pub fn init(dims: ModelDims, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(dims);
        p.visit_mut(&mut |_name, kind, m: &mut DMatrix<f64>| {
            match kind {
                ParamKind::Weight => {
                    let bound = (6.0 / (m.nrows() + m.ncols()) as f64).sqrt();
                    for v in m.iter_mut() {
                        *v = rng.gen_range(-bound..bound);
                    }
                }
                ParamKind::Bias => {}
                ParamKind::Embedding => {
                    for v in m.iter_mut() {
                        *v = rng.gen_range(-0.1..0.1);
                    }
                }
            }
        });
        p
    }

    pub fn visit(&self, f: &mut impl FnMut(&'static str, ParamKind, &DMatrix<f64>)) {
        visit_fields!(self, f,);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&'static str, ParamKind, &mut DMatrix<f64>)) {
        visit_fields!(self, f, mut);
    }

    /// Parameter matrices in registry order.
    pub fn flatten(&self) -> Vec<DMatrix<f64>> {
        let mut out = Vec::new();
        self.visit(&mut |_, _, m| out.push(m.clone()));
        out
    }

    /// Rebuild from matrices in registry order (shapes must match `dims`).
    pub fn from_flat(dims: ModelDims, mats: &[DMatrix<f64>]) -> Self {
        let mut p = Self::zeros(dims);
        let mut it = mats.iter();
        p.visit_mut(&mut |name, _, m| {
            let src = it.next().unwrap_or_else(|| panic!("missing matrix for {name}"));
            assert_eq!(
                (src.nrows(), src.ncols()),
                (m.nrows(), m.ncols()),
                "shape mismatch for {name}"
            );
            *m = src.clone();
        });
        assert!(it.next().is_none(), "extra matrices in from_flat");
        p
    }

    pub fn num_entries(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, m| n += m.len());
        n
    }

    /// Register every parameter on `tape` and return the leaf handles.
    pub fn leaves(&self, tape: &Tape) -> ParamLeaves {
        let mut vals = Vec::new();
        self.visit(&mut |name, kind, m| {
            vals.push((name, kind, tape.value(m.clone())));
        });
        ParamLeaves { vals }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| crate::error::Error::Data(format!("serialize params: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| crate::error::Error::Data(format!("parse params: {e}")))
    }
}

/// Tape-registered parameter values for one forward/backward pass.
pub struct ParamLeaves {
    vals: Vec<(&'static str, ParamKind, Value)>,
}

impl ParamLeaves {
    pub fn get(&self, name: &str) -> &Value {
        &self
            .vals
            .iter()
            .find(|(n, _, _)| *n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .2
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, ParamKind, &Value)> {
        self.vals.iter().map(|(n, k, v)| (*n, *k, v))
    }

    /// Gradients in registry order (zeros where no path reached a leaf).
    pub fn gradients(&self) -> Vec<(&'static str, DMatrix<f64>)> {
        self.vals
            .iter()
            .map(|(n, _, v)| (*n, v.grad_or_zero()))
            .collect()
    }

    /// Sum of squared entries over `Weight`-kind parameters only.
    pub fn l2_weights(&self) -> Result<Value> {
        let mut acc: Option<Value> = None;
        for (_, kind, v) in self.iter() {
            if kind != ParamKind::Weight {
                continue;
            }
            let sq = v.sum_squares()?;
            acc = Some(match acc {
                Some(a) => a.add(&sq)?,
                None => sq,
            });
        }
        Ok(acc.expect("model has weight parameters"))
    }
}

/// Per-pass context: training mode enables dropout with its own seeded
/// stream; evaluation is deterministic and mask-free.
pub struct ForwardCtx {
    pub dropout: f64,
    pub rng: Option<ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(dropout: f64, rng: ChaCha8Rng) -> Self {
        ForwardCtx {
            dropout,
            rng: Some(rng),
        }
    }

    /// Inverted-dropout mask applied during training; identity otherwise.
    pub fn apply_dropout(&mut self, v: &Value) -> Result<Value> {
        if self.dropout <= 0.0 {
            return Ok(v.clone());
        }
        let Some(rng) = self.rng.as_mut() else {
            return Ok(v.clone());
        };
        let (r, c) = v.shape();
        let keep = 1.0 - self.dropout;
        let mask = DMatrix::from_fn(r, c, |_, _| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        v.hadamard(&v.tape().value(mask))
    }
}

/// Simple SGD with optional momentum over the parameter registry.
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<DMatrix<f64>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, params: &ModelParams) -> Self {
        let velocity = params
            .flatten()
            .into_iter()
            .map(|m| DMatrix::zeros(m.nrows(), m.ncols()))
            .collect();
        Sgd {
            learning_rate,
            momentum,
            velocity,
        }
    }

    /// Apply one update from gradients in registry order.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[(&'static str, DMatrix<f64>)]) {
        let lr = self.learning_rate;
        let mu = self.momentum;
        let mut i = 0usize;
        let velocity = &mut self.velocity;
        params.visit_mut(&mut |name, _, m| {
            let (gname, g) = &grads[i];
            assert_eq!(*gname, name, "gradient order mismatch");
            if mu > 0.0 {
                velocity[i] = &velocity[i] * mu + g;
                *m -= &velocity[i] * lr;
            } else {
                *m -= g * lr;
            }
            i += 1;
        });
        assert_eq!(i, grads.len());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn dims() -> ModelDims {
        ModelDims {
            embed: 8,
            case_feat: 4,
            window: 4,
            horizon: 4,
            layers: 2,
        }
    }

    #[test]
    fn visit_and_visit_mut_agree_on_order() {
        let mut p = ModelParams::zeros(dims());
        let mut names_a = Vec::new();
        p.visit(&mut |n, _, _| names_a.push(n));
        let mut names_b = Vec::new();
        p.visit_mut(&mut |n, _, _| names_b.push(n));
        assert_eq!(names_a, names_b);
        assert!(names_a.len() >= 30);
    }

    #[test]
    fn flatten_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = ModelParams::init(dims(), &mut rng);
        let q = ModelParams::from_flat(dims(), &p.flatten());
        assert_eq!(format!("{:?}", p.out_w), format!("{:?}", q.out_w));
        assert_eq!(p.num_entries(), q.num_entries());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = ModelParams::init(dims(), &mut ChaCha8Rng::seed_from_u64(3));
        let b = ModelParams::init(dims(), &mut ChaCha8Rng::seed_from_u64(3));
        let fa = a.flatten();
        let fb = b.flatten();
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn l2_covers_weights_only() {
        let mut p = ModelParams::zeros(dims());
        p.visit_mut(&mut |_, kind, m| {
            if kind != ParamKind::Weight {
                for v in m.iter_mut() {
                    *v = 100.0;
                }
            }
        });
        p.out_w[(0, 0)] = 2.0;
        let tape = Tape::new();
        let leaves = p.leaves(&tape);
        let l2 = leaves.l2_weights().unwrap();
        assert!((l2.item() - 4.0).abs() < 1e-12);
    }
}
