//! Small word-level encoder-decoder with dot-product attention.
//!
//! Encoder: `h_j = tanh(We e(x_j) + Wp pos(j) + be)` where `pos` is a fixed
//! sinusoidal feature of the distance from the end of the history.
//! Decoder: Elman recurrence `s_t = tanh(Wx e(y_t) + Wh s_{t-1} + bd)` seeded
//! with `s_init = tanh(Wi mean(h) + bi)`, attention `a = softmax(h . Wa s_t /
//! sqrt(H))`, `o_t = tanh(Wo [s_t; c_t] + bo)`, logits `Wv o_t + bv`.
//!
//! All arithmetic is f64 and the backward pass is written out by hand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DecoderSession, Seq2seqModel, TokenId, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub pos_dim: usize,
    pub max_input_len: usize,
    pub max_output_len: usize,
    pub seed: u64,
    /// Start the output projection at zero, which makes the untrained model
    /// predict the uniform distribution.
    pub zero_output_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: 64,
            pos_dim: 8,
            max_input_len: 256,
            max_output_len: 32,
            seed: 0,
            zero_output_init: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.max_input_len == 0 || self.max_output_len == 0 {
            return Err(Error::Config(
                "embed_dim, hidden_dim, max_input_len and max_output_len must be positive".into(),
            ));
        }
        if self.hidden_dim > 64 {
            return Err(Error::Config(format!(
                "hidden_dim {} exceeds the reference model limit of 64",
                self.hidden_dim
            )));
        }
        Ok(())
    }

    /// `V(E + H + 1) + 2HE + HP + 5H^2 + 4H`.
    pub fn param_count(&self, vocab_size: usize) -> usize {
        let (v, e, h, p) = (vocab_size, self.embed_dim, self.hidden_dim, self.pos_dim);
        v * (e + h + 1) + 2 * h * e + h * p + 5 * h * h + 4 * h
    }
}

/// Offsets of each tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    v: usize,
    e: usize,
    h: usize,
    p: usize,
    emb: usize,
    enc_w: usize,
    enc_p: usize,
    enc_b: usize,
    init_w: usize,
    init_b: usize,
    dec_wx: usize,
    dec_wh: usize,
    dec_b: usize,
    att_w: usize,
    out_w: usize,
    out_b: usize,
    voc_w: usize,
    voc_b: usize,
    total: usize,
}

impl Layout {
    fn new(v: usize, cfg: &ModelConfig) -> Self {
        let (e, h, p) = (cfg.embed_dim, cfg.hidden_dim, cfg.pos_dim);
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let emb = take(v * e);
        let enc_w = take(h * e);
        let enc_p = take(h * p);
        let enc_b = take(h);
        let init_w = take(h * h);
        let init_b = take(h);
        let dec_wx = take(h * e);
        let dec_wh = take(h * h);
        let dec_b = take(h);
        let att_w = take(h * h);
        let out_w = take(h * 2 * h);
        let out_b = take(h);
        let voc_w = take(v * h);
        let voc_b = take(v);
        Self {
            v,
            e,
            h,
            p,
            emb,
            enc_w,
            enc_p,
            enc_b,
            init_w,
            init_b,
            dec_wx,
            dec_wh,
            dec_b,
            att_w,
            out_w,
            out_b,
            voc_w,
            voc_b,
            total: at,
        }
    }
}

/// `out += W x` for row-major `W` of shape rows x x.len().
fn matvec_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += W^T y` for row-major `W` of shape y.len() x out.len().
fn matvec_t_acc(w: &[f64], y: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * yr;
        }
    }
}

/// `g += a b^T`.
fn outer_acc(g: &mut [f64], a: &[f64], b: &[f64]) {
    let cols = b.len();
    for (r, &ar) in a.iter().enumerate() {
        if ar == 0.0 {
            continue;
        }
        let row = &mut g[r * cols..(r + 1) * cols];
        for (gi, bi) in row.iter_mut().zip(b) {
            *gi += ar * bi;
        }
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

fn position_features(dim: usize, distance_from_end: usize) -> Vec<f64> {
    (0..dim)
        .map(|k| {
            let freq = 10000f64.powf((2 * (k / 2)) as f64 / dim.max(1) as f64);
            let x = distance_from_end as f64 / freq;
            if k % 2 == 0 {
                x.sin()
            } else {
                x.cos()
            }
        })
        .collect()
}

struct Encoded {
    ids: Vec<TokenId>,
    pos: Vec<Vec<f64>>,
    /// n x H, row-major.
    h: Vec<f64>,
    mean: Vec<f64>,
    s_init: Vec<f64>,
}

struct Step {
    input: TokenId,
    s: Vec<f64>,
    k: Vec<f64>,
    alpha: Vec<f64>,
    c: Vec<f64>,
    o: Vec<f64>,
    p: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    config: ModelConfig,
    vocab: Vocab,
    params: Vec<f64>,
    layout_total: usize,
}

impl ReferenceModel {
    /// Seeded initialization: uniform weights with variance 1/fan_in, zero
    /// biases.
    pub fn new(vocab: Vocab, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let l = Layout::new(vocab.len(), &config);
        debug_assert_eq!(l.total, config.param_count(vocab.len()));
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = vec![0.0; l.total];
        let mut fill = |params: &mut [f64], start: usize, len: usize, fan_in: usize| {
            let a = (3.0 / fan_in.max(1) as f64).sqrt();
            for p in &mut params[start..start + len] {
                *p = rng.gen_range(-a..a);
            }
        };
        let (v, e, h, p) = (l.v, l.e, l.h, l.p);
        fill(&mut params, l.emb, v * e, 3);
        fill(&mut params, l.enc_w, h * e, e);
        fill(&mut params, l.enc_p, h * p, p.max(1));
        fill(&mut params, l.init_w, h * h, h);
        fill(&mut params, l.dec_wx, h * e, e);
        fill(&mut params, l.dec_wh, h * h, h);
        fill(&mut params, l.att_w, h * h, h);
        fill(&mut params, l.out_w, h * 2 * h, 2 * h);
        if !config.zero_output_init {
            fill(&mut params, l.voc_w, v * h, h);
        }
        Ok(Self {
            layout_total: l.total,
            config,
            vocab,
            params,
        })
    }

    pub fn from_parts(vocab: Vocab, config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_count(vocab.len());
        if params.len() != expected {
            return Err(Error::Validation(format!(
                "parameter vector has {} entries, config expects {expected}",
                params.len()
            )));
        }
        Ok(Self {
            layout_total: expected,
            config,
            vocab,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.layout_total
    }

    fn layout(&self) -> Layout {
        Layout::new(self.vocab.len(), &self.config)
    }

    fn emb_row(&self, l: &Layout, id: TokenId) -> &[f64] {
        let s = l.emb + id as usize * l.e;
        &self.params[s..s + l.e]
    }

    fn encode(&self, l: &Layout, history: &[TokenId]) -> Result<Encoded> {
        self.vocab.check_ids(history)?;
        let start = history.len().saturating_sub(self.config.max_input_len);
        let mut ids = history[start..].to_vec();
        if ids.is_empty() {
            ids.push(Vocab::PAD);
        }
        let n = ids.len();
        let w = &self.params;
        let mut h = vec![0.0; n * l.h];
        let mut pos = Vec::with_capacity(n);
        let mut mean = vec![0.0; l.h];
        for (j, &id) in ids.iter().enumerate() {
            let pf = position_features(l.p, n - 1 - j);
            let hj = &mut h[j * l.h..(j + 1) * l.h];
            hj.copy_from_slice(&w[l.enc_b..l.enc_b + l.h]);
            matvec_acc(&w[l.enc_w..l.enc_w + l.h * l.e], self.emb_row(l, id), hj);
            matvec_acc(&w[l.enc_p..l.enc_p + l.h * l.p], &pf, hj);
            for (x, m) in hj.iter_mut().zip(mean.iter_mut()) {
                *x = x.tanh();
                *m += *x / n as f64;
            }
            pos.push(pf);
        }
        let mut s_init = w[l.init_b..l.init_b + l.h].to_vec();
        matvec_acc(&w[l.init_w..l.init_w + l.h * l.h], &mean, &mut s_init);
        s_init.iter_mut().for_each(|x| *x = x.tanh());
        Ok(Encoded {
            ids,
            pos,
            h,
            mean,
            s_init,
        })
    }

    fn step(&self, l: &Layout, enc: &Encoded, s_prev: &[f64], input: TokenId) -> Step {
        let w = &self.params;
        let hd = l.h;
        let n = enc.ids.len();
        let mut s = w[l.dec_b..l.dec_b + hd].to_vec();
        matvec_acc(&w[l.dec_wx..l.dec_wx + hd * l.e], self.emb_row(l, input), &mut s);
        matvec_acc(&w[l.dec_wh..l.dec_wh + hd * hd], s_prev, &mut s);
        s.iter_mut().for_each(|x| *x = x.tanh());

        let mut k = vec![0.0; hd];
        matvec_acc(&w[l.att_w..l.att_w + hd * hd], &s, &mut k);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut alpha: Vec<f64> = (0..n)
            .map(|j| scale * enc.h[j * hd..(j + 1) * hd].iter().zip(&k).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        softmax_in_place(&mut alpha);
        let mut c = vec![0.0; hd];
        for (j, &a) in alpha.iter().enumerate() {
            for (ci, hi) in c.iter_mut().zip(&enc.h[j * hd..(j + 1) * hd]) {
                *ci += a * hi;
            }
        }

        let sc: Vec<f64> = s.iter().chain(&c).copied().collect();
        let mut o = w[l.out_b..l.out_b + hd].to_vec();
        matvec_acc(&w[l.out_w..l.out_w + hd * 2 * hd], &sc, &mut o);
        o.iter_mut().for_each(|x| *x = x.tanh());

        let mut p = w[l.voc_b..l.voc_b + l.v].to_vec();
        matvec_acc(&w[l.voc_w..l.voc_w + l.v * hd], &o, &mut p);
        softmax_in_place(&mut p);
        Step {
            input,
            s,
            k,
            alpha,
            c,
            o,
            p,
        }
    }

    fn run(&self, l: &Layout, enc: &Encoded, target_ids: &[TokenId]) -> Vec<Step> {
        let mut steps: Vec<Step> = Vec::with_capacity(target_ids.len());
        let mut input = Vocab::BOS;
        for &tok in target_ids {
            let prev = steps.last().map(|s| s.s.as_slice()).unwrap_or(&enc.s_init);
            let st = self.step(l, enc, prev, input);
            steps.push(st);
            input = tok;
        }
        steps
    }

    fn backward(&self, l: &Layout, enc: &Encoded, steps: &[Step], targets: &[Vec<f64>]) -> Vec<f64> {
        let w = &self.params;
        let hd = l.h;
        let n = enc.ids.len();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut g = vec![0.0; l.total];
        let mut dh = vec![0.0; n * hd];
        let mut ds_next = vec![0.0; hd];

        for t in (0..steps.len()).rev() {
            let st = &steps[t];
            let tg = &targets[t];
            let gsum: f64 = tg.iter().sum();
            let dz: Vec<f64> = st.p.iter().zip(tg).map(|(p, y)| gsum * p - y).collect();

            for (gb, d) in g[l.voc_b..l.voc_b + l.v].iter_mut().zip(&dz) {
                *gb += d;
            }
            outer_acc(&mut g[l.voc_w..l.voc_w + l.v * hd], &dz, &st.o);
            let mut d_o = vec![0.0; hd];
            matvec_t_acc(&w[l.voc_w..l.voc_w + l.v * hd], &dz, &mut d_o);
            let da_o: Vec<f64> = d_o.iter().zip(&st.o).map(|(d, o)| d * (1.0 - o * o)).collect();

            for (gb, d) in g[l.out_b..l.out_b + hd].iter_mut().zip(&da_o) {
                *gb += d;
            }
            let sc: Vec<f64> = st.s.iter().chain(&st.c).copied().collect();
            outer_acc(&mut g[l.out_w..l.out_w + hd * 2 * hd], &da_o, &sc);
            let mut dsc = vec![0.0; 2 * hd];
            matvec_t_acc(&w[l.out_w..l.out_w + hd * 2 * hd], &da_o, &mut dsc);
            let mut ds: Vec<f64> = dsc[..hd].iter().zip(&ds_next).map(|(a, b)| a + b).collect();
            let dc = &dsc[hd..];

            // c = sum_j alpha_j h_j; e_j = scale * h_j . k; alpha = softmax(e)
            let dalpha: Vec<f64> = (0..n)
                .map(|j| enc.h[j * hd..(j + 1) * hd].iter().zip(dc).map(|(a, b)| a * b).sum())
                .collect();
            let dot: f64 = st.alpha.iter().zip(&dalpha).map(|(a, b)| a * b).sum();
            let mut dk = vec![0.0; hd];
            for j in 0..n {
                let a = st.alpha[j];
                let de = a * (dalpha[j] - dot);
                let hj = &enc.h[j * hd..(j + 1) * hd];
                let dhj = &mut dh[j * hd..(j + 1) * hd];
                for i in 0..hd {
                    dhj[i] += a * dc[i] + scale * de * st.k[i];
                    dk[i] += scale * de * hj[i];
                }
            }
            outer_acc(&mut g[l.att_w..l.att_w + hd * hd], &dk, &st.s);
            matvec_t_acc(&w[l.att_w..l.att_w + hd * hd], &dk, &mut ds);

            let da_s: Vec<f64> = ds.iter().zip(&st.s).map(|(d, s)| d * (1.0 - s * s)).collect();
            for (gb, d) in g[l.dec_b..l.dec_b + hd].iter_mut().zip(&da_s) {
                *gb += d;
            }
            outer_acc(&mut g[l.dec_wx..l.dec_wx + hd * l.e], &da_s, self.emb_row(l, st.input));
            let mut demb = vec![0.0; l.e];
            matvec_t_acc(&w[l.dec_wx..l.dec_wx + hd * l.e], &da_s, &mut demb);
            let er = l.emb + st.input as usize * l.e;
            for (ge, d) in g[er..er + l.e].iter_mut().zip(&demb) {
                *ge += d;
            }
            let s_prev = if t == 0 { &enc.s_init } else { &steps[t - 1].s };
            outer_acc(&mut g[l.dec_wh..l.dec_wh + hd * hd], &da_s, s_prev);
            ds_next.iter_mut().for_each(|x| *x = 0.0);
            matvec_t_acc(&w[l.dec_wh..l.dec_wh + hd * hd], &da_s, &mut ds_next);
        }

        // s_init = tanh(Wi mean + bi)
        let da_i: Vec<f64> = ds_next.iter().zip(&enc.s_init).map(|(d, s)| d * (1.0 - s * s)).collect();
        for (gb, d) in g[l.init_b..l.init_b + hd].iter_mut().zip(&da_i) {
            *gb += d;
        }
        outer_acc(&mut g[l.init_w..l.init_w + hd * hd], &da_i, &enc.mean);
        let mut dmean = vec![0.0; hd];
        matvec_t_acc(&w[l.init_w..l.init_w + hd * hd], &da_i, &mut dmean);

        for j in 0..n {
            let hj = &enc.h[j * hd..(j + 1) * hd];
            let da_e: Vec<f64> = (0..hd)
                .map(|i| (dh[j * hd + i] + dmean[i] / n as f64) * (1.0 - hj[i] * hj[i]))
                .collect();
            for (gb, d) in g[l.enc_b..l.enc_b + hd].iter_mut().zip(&da_e) {
                *gb += d;
            }
            let id = enc.ids[j];
            outer_acc(&mut g[l.enc_w..l.enc_w + hd * l.e], &da_e, self.emb_row(l, id));
            outer_acc(&mut g[l.enc_p..l.enc_p + hd * l.p], &da_e, &enc.pos[j]);
            let mut demb = vec![0.0; l.e];
            matvec_t_acc(&w[l.enc_w..l.enc_w + hd * l.e], &da_e, &mut demb);
            let er = l.emb + id as usize * l.e;
            for (ge, d) in g[er..er + l.e].iter_mut().zip(&demb) {
                *ge += d;
            }
        }
        g
    }
}

struct Session<'a> {
    model: &'a ReferenceModel,
    layout: Layout,
    enc: Encoded,
}

impl DecoderSession for Session<'_> {
    fn start(&self) -> (Vec<f64>, Vec<f64>) {
        let st = self.model.step(&self.layout, &self.enc, &self.enc.s_init, Vocab::BOS);
        (st.s, st.p)
    }

    fn advance(&self, state: &[f64], token: TokenId) -> (Vec<f64>, Vec<f64>) {
        let st = self.model.step(&self.layout, &self.enc, state, token);
        (st.s, st.p)
    }
}

impl Seq2seqModel for ReferenceModel {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn max_input_len(&self) -> usize {
        self.config.max_input_len
    }

    fn max_output_len(&self) -> usize {
        self.config.max_output_len
    }

    fn session<'a>(&'a self, history_ids: &[TokenId]) -> Result<Box<dyn DecoderSession + 'a>> {
        let layout = self.layout();
        let enc = self.encode(&layout, history_ids)?;
        Ok(Box::new(Session {
            model: self,
            layout,
            enc,
        }))
    }

    fn teacher_forced(&self, history_ids: &[TokenId], target_ids: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        self.vocab.check_ids(target_ids)?;
        let l = self.layout();
        let enc = self.encode(&l, history_ids)?;
        Ok(self.run(&l, &enc, target_ids).into_iter().map(|s| s.p).collect())
    }

    fn forward_backward(
        &self,
        history_ids: &[TokenId],
        target_ids: &[TokenId],
        targets: &mut dyn FnMut(&[Vec<f64>]) -> Vec<Vec<f64>>,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        self.vocab.check_ids(target_ids)?;
        let l = self.layout();
        let enc = self.encode(&l, history_ids)?;
        let steps = self.run(&l, &enc, target_ids);
        let dists: Vec<Vec<f64>> = steps.iter().map(|s| s.p.clone()).collect();
        let tg = targets(&dists);
        if tg.len() != steps.len() || tg.iter().any(|t| t.len() != l.v) {
            return Err(Error::Validation("target vectors do not match sequence shape".into()));
        }
        let grad = self.backward(&l, &enc, &steps, &tg);
        Ok((dists, grad))
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn save(&self, path: &std::path::Path) -> Result<()> {
        super::save_checkpoint(path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::next_token_dist;

    fn small() -> ModelConfig {
        ModelConfig {
            embed_dim: 4,
            hidden_dim: 5,
            pos_dim: 2,
            max_input_len: 16,
            max_output_len: 6,
            seed: 3,
            zero_output_init: false,
        }
    }

    #[test]
    fn param_count_matches_formula() {
        let cfg = small();
        let m = ReferenceModel::new(Vocab::synthetic(6), cfg.clone()).unwrap();
        // V = 10, E = 4, H = 5, P = 2:
        // 10*(4+5+1) + 2*5*4 + 5*2 + 5*25 + 4*5 = 100 + 40 + 10 + 125 + 20
        assert_eq!(m.num_params(), 295);
        assert_eq!(m.params().len(), cfg.param_count(10));
    }

    #[test]
    fn same_seed_same_params() {
        let a = ReferenceModel::new(Vocab::synthetic(6), small()).unwrap();
        let b = ReferenceModel::new(Vocab::synthetic(6), small()).unwrap();
        assert_eq!(a.params(), b.params());
        let c = ReferenceModel::new(Vocab::synthetic(6), ModelConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn zero_output_layer_is_uniform() {
        let m = ReferenceModel::new(
            Vocab::synthetic(6),
            ModelConfig {
                zero_output_init: true,
                ..small()
            },
        )
        .unwrap();
        let d = next_token_dist(&m, &[4, 5, 6], &[7]).unwrap();
        for p in d {
            assert!((p - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn distribution_contract_and_determinism() {
        let m = ReferenceModel::new(Vocab::synthetic(6), small()).unwrap();
        let a = next_token_dist(&m, &[4], &[]).unwrap();
        let b = next_token_dist(&m, &[4], &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        assert!(a.iter().all(|p| p.is_finite() && *p >= 0.0));
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(next_token_dist(&m, &[4], &[99]).is_err());
        assert!(next_token_dist(&m, &[99], &[]).is_err());
    }

    #[test]
    fn session_matches_teacher_forcing() {
        let m = ReferenceModel::new(Vocab::synthetic(6), small()).unwrap();
        let h = [4, 5, 9, 6];
        let tgt = [7, 8, Vocab::EOS];
        let tf = m.teacher_forced(&h, &tgt).unwrap();
        for i in 0..tgt.len() {
            let d = next_token_dist(&m, &h, &tgt[..i]).unwrap();
            assert_eq!(d, tf[i]);
        }
    }

    #[test]
    fn long_history_truncated_from_left() {
        let m = ReferenceModel::new(Vocab::synthetic(6), ModelConfig { max_input_len: 3, ..small() }).unwrap();
        let a = next_token_dist(&m, &[4, 5, 6, 7, 8], &[]).unwrap();
        let b = next_token_dist(&m, &[6, 7, 8], &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_oversized_hidden() {
        let cfg = ModelConfig {
            hidden_dim: 65,
            ..small()
        };
        assert!(matches!(ReferenceModel::new(Vocab::synthetic(2), cfg), Err(Error::Config(_))));
    }

    #[test]
    fn from_parts_checks_length() {
        assert!(ReferenceModel::from_parts(Vocab::synthetic(6), small(), vec![0.0; 3]).is_err());
    }
}
