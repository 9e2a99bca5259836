use crate::experts::Heads;
use crate::numerics::{ParamId, ParamStore, SeededRng, Tape, Var};

/// Input projection into `G` tokens followed by one pre-activation-free
/// self-attention block with an MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerEncoder {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub pos: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub heads: Heads,
    pub tokens: usize,
    pub width: usize,
    pub mlp_hidden: usize,
}

/// Parameter count of an encoder with the given sizes.
pub fn encoder_params(input: usize, tokens: usize, width: usize, mlp: usize, embed: usize) -> usize {
    let gd = tokens * width;
    input * gd + gd + gd + 4 * width * width + width * mlp + mlp + mlp * width + width + 2 * (width * embed + embed)
}

impl TransformerEncoder {
    /// Picks the MLP width so the total parameter count lands as close as
    /// possible to `target`.
    pub fn matched(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        tokens: usize,
        width: usize,
        embed: usize,
        target: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let base = encoder_params(input, tokens, width, 0, embed);
        let per = 2 * width + 1;
        let mlp = (target.saturating_sub(base) / per).max(width);
        Self::new(store, prefix, input, tokens, width, mlp, embed, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        tokens: usize,
        width: usize,
        mlp: usize,
        embed: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let gd = tokens * width;
        let sw = 1.0 / (width as f64).sqrt();
        Self {
            w_in: store.add_normal(format!("{prefix}.w_in"), &[input, gd], 1.0 / (input as f64).sqrt(), rng),
            b_in: store.add_zeros(format!("{prefix}.b_in"), &[1, gd]),
            pos: store.add_normal(format!("{prefix}.pos"), &[tokens, width], 0.1, rng),
            wq: store.add_normal(format!("{prefix}.wq"), &[width, width], sw, rng),
            wk: store.add_normal(format!("{prefix}.wk"), &[width, width], sw, rng),
            wv: store.add_normal(format!("{prefix}.wv"), &[width, width], sw, rng),
            wo: store.add_normal(format!("{prefix}.wo"), &[width, width], sw, rng),
            w1: store.add_normal(format!("{prefix}.w1"), &[width, mlp], sw, rng),
            b1: store.add_zeros(format!("{prefix}.b1"), &[1, mlp]),
            w2: store.add_normal(format!("{prefix}.w2"), &[mlp, width], 1.0 / (mlp as f64).sqrt(), rng),
            b2: store.add_zeros(format!("{prefix}.b2"), &[1, width]),
            heads: Heads::new(store, &format!("{prefix}.head"), width, embed, rng),
            tokens,
            width,
            mlp_hidden: mlp,
        }
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        let h = &self.heads;
        [
            self.w_in, self.b_in, self.pos, self.wq, self.wk, self.wv, self.wo, self.w1, self.b1, self.w2, self.b2,
            h.text_w, h.text_b, h.img_w, h.img_b,
        ]
        .iter()
        .map(|&id| store.get(id).len())
        .sum()
    }

    /// `x` is the dense `1 x L` input; returns `G x width` tokens.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let [w_in, b_in, pos, wq, wk, wv, wo, w1, b1, w2, b2] = [
            self.w_in, self.b_in, self.pos, self.wq, self.wk, self.wv, self.wo, self.w1, self.b1, self.w2, self.b2,
        ]
        .map(|id| tape.param(id));
        let e = tape.matmul(x, w_in);
        let e = tape.add(e, b_in);
        let h = tape.reshape(e, &[self.tokens, self.width]);
        let h = tape.add(h, pos);
        let q = tape.matmul(h, wq);
        let k = tape.matmul(h, wk);
        let v = tape.matmul(h, wv);
        let kt = tape.transpose(k);
        let s = tape.matmul(q, kt);
        let s = tape.scale(s, 1.0 / (self.width as f64).sqrt());
        let a = tape.softmax_rows(s);
        let ctx = tape.matmul(a, v);
        let o = tape.matmul(ctx, wo);
        let h = tape.add(h, o);
        let u = tape.matmul(h, w1);
        let u = tape.add_row(u, b1);
        let u = tape.gelu(u);
        let u = tape.matmul(u, w2);
        let u = tape.add_row(u, b2);
        tape.add(h, u)
    }
}
