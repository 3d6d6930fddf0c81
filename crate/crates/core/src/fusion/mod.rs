//! Encoders, cross-attention fusion blocks and gates, plus the assembled
//! classification network.

mod network;

use rand::Rng;

use crate::autodiff::{ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};

pub use network::{Ablation, ImageMode, ModelConfig, Network, PathwayMode, SpotView};

/// Shared embedding width.
pub const DIM: usize = 512;
pub const HEADS: usize = 8;
pub const FF_DIM: usize = 2048;
pub const ENCODER_DROPOUT: f64 = 0.5;
pub const BLOCK_DROPOUT: f64 = 0.25;
pub const GATE_HIDDEN: usize = 256;
pub const INIT_STD: f64 = 0.02;

/// Registers parameters under a name prefix and hands out dropout layer ids.
pub struct Builder<'a, R: Rng> {
    pub ps: &'a mut ParamSet,
    pub rng: &'a mut R,
    pub std: f64,
    next_layer: u64,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(ps: &'a mut ParamSet, rng: &'a mut R, std: f64) -> Self {
        Self {
            ps,
            rng,
            std,
            next_layer: 0,
        }
    }

    fn layer_id(&mut self) -> u64 {
        self.next_layer += 1;
        self.next_layer
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.ps.add_normal(format!("{name}.w"), &[fan_in, fan_out], self.std, self.rng)?,
            b: self.ps.add_const(format!("{name}.b"), &[fan_out], 0.0)?,
        })
    }

    pub fn layer_norm(&mut self, name: &str, width: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: self.ps.add_const(format!("{name}.gamma"), &[width], 1.0)?,
            beta: self.ps.add_const(format!("{name}.beta"), &[width], 0.0)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

/// Layer norm with a learned per-feature scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x);
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        let y = tape.mul(n, g)?;
        tape.add(y, b)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// linear -> layer norm -> relu -> dropout(0.5), to 512 features.
#[derive(Clone, Copy, Debug)]
pub struct MlpEncoder {
    pub lin: Linear,
    pub ln: LayerNorm,
    pub fan_in: usize,
    layer: u64,
}

impl MlpEncoder {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, fan_in: usize) -> Result<Self> {
        Ok(Self {
            lin: b.linear(&format!("{name}.lin"), fan_in, DIM)?,
            ln: b.layer_norm(&format!("{name}.ln"), DIM)?,
            fan_in,
            layer: b.layer_id(),
        })
    }

    pub fn encode(&self, tape: &mut Tape, v: Var) -> Result<Var> {
        if tape.value(v).cols() != self.fan_in {
            return Err(Error::Shape {
                op: "mlp_encode",
                lhs: tape.value(v).shape().to_vec(),
                rhs: vec![self.fan_in, DIM],
            });
        }
        let y = self.lin.forward(tape, v)?;
        let y = self.ln.forward(tape, y)?;
        let y = tape.relu(y);
        tape.dropout(y, ENCODER_DROPOUT, self.layer)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.lin.ids(), self.ln.ids()].concat()
    }
}

/// Post-norm transformer block whose queries and keys come from the
/// morphology stream and whose values come from a pathway vector.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttnBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: LayerNorm,
    /// Split each 512-d vector into 8 tokens of 64 instead of attending
    /// over a single token.
    pub tokens: bool,
    drop_attn: u64,
    drop_ff: u64,
}

impl CrossAttnBlock {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, tokens: bool) -> Result<Self> {
        Ok(Self {
            q: b.linear(&format!("{name}.q"), DIM, DIM)?,
            k: b.linear(&format!("{name}.k"), DIM, DIM)?,
            v: b.linear(&format!("{name}.v"), DIM, DIM)?,
            o: b.linear(&format!("{name}.o"), DIM, DIM)?,
            ln1: b.layer_norm(&format!("{name}.ln1"), DIM)?,
            ff1: b.linear(&format!("{name}.ff1"), DIM, FF_DIM)?,
            ff2: b.linear(&format!("{name}.ff2"), FF_DIM, DIM)?,
            ln2: b.layer_norm(&format!("{name}.ln2"), DIM)?,
            tokens,
            drop_attn: b.layer_id(),
            drop_ff: b.layer_id(),
        })
    }

    /// Attention weights `[B * 8, 1]` (or `[B * 8, 8]` with tokens).
    pub fn attention(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let q = self.q.forward(tape, x)?;
        let k = self.k.forward(tape, x)?;
        let logits = tape.head_logits(q, k, HEADS, self.tokens)?;
        Ok(tape.softmax(logits))
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, p: Var) -> Result<Var> {
        let a = self.attention(tape, x)?;
        let v = self.v.forward(tape, p)?;
        let att = tape.head_mix(a, v, HEADS, self.tokens)?;
        let o = self.o.forward(tape, att)?;
        let o = tape.dropout(o, BLOCK_DROPOUT, self.drop_attn)?;
        let x = tape.add(x, o)?;
        let x = self.ln1.forward(tape, x)?;
        let f = self.ff1.forward(tape, x)?;
        let f = tape.relu(f);
        let f = self.ff2.forward(tape, f)?;
        let f = tape.dropout(f, BLOCK_DROPOUT, self.drop_ff)?;
        let x = tape.add(x, f)?;
        self.ln2.forward(tape, x)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [
            self.q.ids(),
            self.k.ids(),
            self.v.ids(),
            self.o.ids(),
            self.ln1.ids(),
            self.ff1.ids(),
            self.ff2.ids(),
            self.ln2.ids(),
        ]
        .concat()
    }
}

/// Two stacked cross-attention blocks sharing one pathway vector.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttention {
    pub blocks: [CrossAttnBlock; 2],
}

impl CrossAttention {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, tokens: bool) -> Result<Self> {
        Ok(Self {
            blocks: [
                CrossAttnBlock::new(b, &format!("{name}.0"), tokens)?,
                CrossAttnBlock::new(b, &format!("{name}.1"), tokens)?,
            ],
        })
    }

    pub fn fuse(&self, tape: &mut Tape, x: Var, p: Var) -> Result<Var> {
        for v in [x, p] {
            if tape.value(v).cols() != DIM {
                return Err(Error::Shape {
                    op: "cross_attention_fuse",
                    lhs: tape.value(v).shape().to_vec(),
                    rhs: vec![DIM],
                });
            }
        }
        let mut s = x;
        for blk in &self.blocks {
            s = blk.forward(tape, s, p)?;
        }
        Ok(s)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.blocks[0].ids(), self.blocks[1].ids()].concat()
    }
}

/// concat -> linear -> relu -> linear -> softmax over the inputs, then the
/// weighted sum of the inputs.
#[derive(Clone, Copy, Debug)]
pub struct Gate {
    pub l1: Linear,
    pub l2: Linear,
    pub arity: usize,
}

impl Gate {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, arity: usize) -> Result<Self> {
        Ok(Self {
            l1: b.linear(&format!("{name}.l1"), arity * DIM, GATE_HIDDEN)?,
            l2: b.linear(&format!("{name}.l2"), GATE_HIDDEN, arity)?,
            arity,
        })
    }

    /// Returns the pooled vectors and the gate weights `[B, arity]`.
    pub fn pool(&self, tape: &mut Tape, items: &[Var]) -> Result<(Var, Var)> {
        if items.len() != self.arity {
            return Err(Error::Shape {
                op: "gate",
                lhs: vec![items.len()],
                rhs: vec![self.arity],
            });
        }
        let c = tape.concat(items)?;
        let h = self.l1.forward(tape, c)?;
        let h = tape.relu(h);
        let logits = self.l2.forward(tape, h)?;
        let w = tape.softmax(logits);
        Ok((tape.weighted_sum(w, items)?, w))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.l1.ids(), self.l2.ids()].concat()
    }
}

/// Three-entity gate followed by the linear classifier.
#[derive(Clone, Copy, Debug)]
pub struct LateGate {
    pub gate: Gate,
    pub head: Linear,
}

impl LateGate {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, classes: usize) -> Result<Self> {
        Ok(Self {
            gate: Gate::new(b, &format!("{name}.gate"), 3)?,
            head: b.linear(&format!("{name}.head"), DIM, classes)?,
        })
    }

    pub fn classify(&self, tape: &mut Tape, h: Var, fused: Var, st: Var) -> Result<Var> {
        let (pooled, _) = self.gate.pool(tape, &[h, fused, st])?;
        self.head.forward(tape, pooled)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.gate.ids(), self.head.ids()].concat()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, Entries, Mode, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    fn zero(ps: &mut ParamSet, ids: &[ParamId]) {
        for &id in ids {
            ps.get_mut(id).value.data_mut().fill(0.0);
        }
    }

    #[test]
    fn encoder_zero_weights_gives_zero() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = MlpEncoder::new(&mut Builder::new(&mut ps, &mut rng, INIT_STD), "e", 7).unwrap();
        zero(&mut ps, &enc.lin.ids());
        let mut t = Tape::inference(&ps);
        let x = t.input(rand_rows(&mut rng, 2, 7));
        let y = enc.encode(&mut t, x).unwrap();
        assert_eq!(t.value(y).shape(), [2, DIM]);
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
        let bad = t.input(rand_rows(&mut rng, 2, 6));
        assert!(enc.encode(&mut t, bad).is_err());
    }

    #[test]
    fn encoder_eval_equals_train_without_dropout_draws() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = MlpEncoder::new(&mut Builder::new(&mut ps, &mut rng, INIT_STD), "e", 5).unwrap();
        let x = rand_rows(&mut rng, 3, 5);
        let mut te = Tape::new(&ps, Mode::Eval);
        let xe = te.input(x.clone());
        let ye = enc.encode(&mut te, xe).unwrap();
        // train mode with the dropout mask removed: rebuild the stages by hand
        let mut tt = Tape::new(&ps, Mode::Train);
        let xt = tt.input(x);
        let y = enc.lin.forward(&mut tt, xt).unwrap();
        let y = enc.ln.forward(&mut tt, y).unwrap();
        let y = tt.relu(y);
        let y = tt.dropout(y, 0.0, 99).unwrap();
        assert_eq!(te.value(ye).data(), tt.value(y).data());
    }

    #[test]
    fn single_token_attention_is_one() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let blk = CrossAttnBlock::new(&mut Builder::new(&mut ps, &mut rng, 0.5), "b", false).unwrap();
        let mut t = Tape::inference(&ps);
        let x = t.input(rand_rows(&mut rng, 4, DIM));
        let a = blk.attention(&mut t, x).unwrap();
        assert_eq!(t.value(a).shape(), [4 * HEADS, 1]);
        assert!(t.value(a).data().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn degenerate_block_is_double_layer_norm() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ca = CrossAttention::new(&mut Builder::new(&mut ps, &mut rng, INIT_STD), "ca", false).unwrap();
        for blk in &ca.blocks {
            zero(&mut ps, &[blk.ff1.ids(), blk.ff2.ids()].concat());
        }
        let x = rand_rows(&mut rng, 2, DIM);
        let mut t = Tape::inference(&ps);
        let xv = t.input(x.clone());
        let p = t.input(Tensor::zeros(&[2, DIM]));
        let f = ca.fuse(&mut t, xv, p).unwrap();
        // independent row normalization, applied four times (two per block)
        let mut expect = x.data().to_vec();
        for _ in 0..4 {
            for row in expect.chunks_mut(DIM) {
                let m = row.iter().sum::<f64>() / DIM as f64;
                let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / DIM as f64;
                row.iter_mut().for_each(|v| *v = (*v - m) / (var + 1e-5).sqrt());
            }
        }
        for (a, b) in t.value(f).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    fn gate_fixture(arity: usize) -> (ParamSet, Gate, ChaCha8Rng) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Gate::new(&mut Builder::new(&mut ps, &mut rng, 0.1), "g", arity).unwrap();
        (ps, g, rng)
    }

    #[test]
    fn zero_gate_averages() {
        let (mut ps, g, mut rng) = gate_fixture(2);
        zero(&mut ps, &g.ids());
        let (a, b) = (rand_rows(&mut rng, 1, DIM), rand_rows(&mut rng, 1, DIM));
        let mut t = Tape::inference(&ps);
        let (av, bv) = (t.input(a.clone()), t.input(b.clone()));
        let (out, w) = g.pool(&mut t, &[av, bv]).unwrap();
        assert_eq!(t.value(w).data(), [0.5, 0.5]);
        for ((o, x), y) in t.value(out).data().iter().zip(a.data()).zip(b.data()) {
            assert!((o - (x + y) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gate_logits_ln3_give_three_quarters() {
        let (mut ps, g, mut rng) = gate_fixture(2);
        zero(&mut ps, &g.ids());
        ps.get_mut(g.l2.b).value.data_mut()[0] = 3f64.ln();
        let mut t = Tape::inference(&ps);
        let (a, b) = (t.input(rand_rows(&mut rng, 1, DIM)), t.input(rand_rows(&mut rng, 1, DIM)));
        let (_, w) = g.pool(&mut t, &[a, b]).unwrap();
        let w = t.value(w).data();
        assert!((w[0] - 0.75).abs() < 1e-12 && (w[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn equal_inputs_pass_through_gate() {
        let (ps, g, mut rng) = gate_fixture(3);
        let x = rand_rows(&mut rng, 2, DIM);
        let mut t = Tape::inference(&ps);
        let items: Vec<Var> = (0..3).map(|_| t.input(x.clone())).collect();
        let (out, _) = g.pool(&mut t, &items).unwrap();
        for (o, v) in t.value(out).data().iter().zip(x.data()) {
            assert!((o - v).abs() < 1e-12);
        }
    }

    #[test]
    fn late_gate_zero_params_thirds_and_width() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lg = LateGate::new(&mut Builder::new(&mut ps, &mut rng, 0.1), "late", 4).unwrap();
        zero(&mut ps, &lg.gate.ids());
        let mut t = Tape::inference(&ps);
        let e: Vec<Var> = (0..3).map(|_| t.input(rand_rows(&mut rng, 2, DIM))).collect();
        let (_, w) = lg.gate.pool(&mut t, &e).unwrap();
        assert!(t.value(w).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let logits = lg.classify(&mut t, e[0], e[1], e[2]).unwrap();
        assert_eq!(t.value(logits).shape(), [2, 4]);
    }

    #[test]
    fn fd_encoder_attention_gate_chain() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut b = Builder::new(&mut ps, &mut rng, 0.1);
        let enc = MlpEncoder::new(&mut b, "e", 6).unwrap();
        let ca = CrossAttention::new(&mut b, "ca", true).unwrap();
        let g = Gate::new(&mut b, "g", 2).unwrap();
        let x = rand_rows(&mut rng, 2, DIM);
        let p = rand_rows(&mut rng, 2, 6);
        let r = finite_diff_check(
            &mut ps,
            |t| {
                let xv = t.input(x.clone());
                let pv = t.input(p.clone());
                let pe = enc.encode(t, pv)?;
                let f = ca.fuse(t, xv, pe)?;
                let (out, _) = g.pool(t, &[f, pe])?;
                let sq = t.mul(out, out)?;
                Ok(t.mean(sq))
            },
            1e-6,
            &Entries::Sample { per_param: 6, seed: 2 },
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }
}
