//! Property-gated LSTM over the embedded behavior sequence, followed by
//! query-conditioned attention pooling.
//!
//! ```text
//! i_t = sigmoid(W_ei e_t + W_pi p_t + W_hi h_{t-1} + b_i)
//! f_t = sigmoid(W_ef e_t + W_pf p_t + W_hf h_{t-1} + b_f)
//! c_t = f_t * c_{t-1} + i_t * tanh(W_ec e_t + W_hc h_{t-1} + b_c)
//! o_t = sigmoid(W_eo e_t + W_po p_t + W_ho h_{t-1} + b_o)
//! h_t = o_t * tanh(c_t)
//! ```
//!
//! The property `p_t` feeds the three gates but never the cell candidate.
//! Attention scores are `s_t = v . relu(W_h h_t + W_q q + W_u u + W_p p_t + b)`,
//! normalised by a softmax over unmasked positions; `rep = [sum_t a_t h_t, u]`.

use crate::embedding::EmbeddedBehavior;
use crate::error::{Error, Result};
use crate::numeric::ops::{gemv_acc, gemv_t_acc, ger_acc, sigmoid_scalar, softmax_into};
use crate::numeric::{GradBuffer, ParamId, ParamKind, ParameterStore, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub d_h: usize,
    pub d_att: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_h: 32,
            d_att: 64,
            max_len: 100,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 || self.d_att == 0 || self.max_len == 0 {
            return Err(Error::config("encoder d_h, d_att and max_len must be positive"));
        }
        Ok(())
    }
}

/// Input sizes the encoder is wired to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderInputs {
    pub d_e: usize,
    pub d_p: usize,
    pub d_q: usize,
    pub d_u: usize,
}

/// One gate's weights. The candidate gate has no property matrix.
#[derive(Clone, Copy, Debug)]
pub struct GateIds {
    pub w_e: ParamId,
    pub w_p: Option<ParamId>,
    pub w_h: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmIds {
    pub input: GateIds,
    pub forget: GateIds,
    pub cell: GateIds,
    pub output: GateIds,
}

impl LstmIds {
    fn gates(&self) -> [&GateIds; 4] {
        [&self.input, &self.forget, &self.cell, &self.output]
    }

    /// The three property matrices `W_pi, W_pf, W_po`.
    pub fn property_weights(&self) -> [ParamId; 3] {
        [
            self.input.w_p.expect("input gate reads p"),
            self.forget.w_p.expect("forget gate reads p"),
            self.output.w_p.expect("output gate reads p"),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionIds {
    pub w_h: ParamId,
    pub w_q: ParamId,
    pub w_u: ParamId,
    pub w_p: ParamId,
    pub b: ParamId,
    pub v: ParamId,
}

/// Output of the recurrent pass. Masked positions hold zero states.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence {
    pub h: Vec<Tensor>,
    pub c: Vec<Tensor>,
    pub mask: Vec<bool>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserRepresentation {
    pub rep_s: Tensor,
    pub u: Tensor,
    pub rep: Tensor,
    pub attention_weights: Vec<f64>,
}

/// Everything one LSTM step needs for its backward pass.
#[derive(Clone, Debug)]
pub struct StepCache {
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    tanh_c: Vec<f64>,
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

/// Forward record of one `encode_user` call.
#[derive(Clone, Debug)]
pub struct EncoderTape {
    pub steps: Vec<StepCache>,
    /// Attention hidden pre-activations, `N x d_att`.
    att_pre: Vec<f64>,
    pub weights: Vec<f64>,
    pub rep: Vec<f64>,
    q: Vec<f64>,
    u: Vec<f64>,
}

impl EncoderTape {
    pub fn rep_s(&self) -> &[f64] {
        &self.rep[..self.rep.len() - self.u.len()]
    }
}

/// Gradients the encoder hands back to the embedding layer.
#[derive(Clone, Debug)]
pub struct InputGrads {
    pub de: Vec<Vec<f64>>,
    pub dp: Vec<Vec<f64>>,
    pub dq: Vec<f64>,
    pub du: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    inputs: EncoderInputs,
    pub lstm: LstmIds,
    pub att: AttentionIds,
}

fn gate_names(gate: char) -> (String, String, String, String) {
    (
        format!("lstm.w_e{gate}"),
        format!("lstm.w_p{gate}"),
        format!("lstm.w_h{gate}"),
        format!("lstm.b_{gate}"),
    )
}

impl Encoder {
    pub fn register(store: &mut ParameterStore, cfg: &EncoderConfig, inputs: EncoderInputs) -> Result<Self> {
        cfg.validate()?;
        let d_h = cfg.d_h;
        let mut gate = |g: char, with_p: bool| -> Result<GateIds> {
            let (we, wp, wh, b) = gate_names(g);
            Ok(GateIds {
                w_e: store.add(&we, &[d_h, inputs.d_e], ParamKind::Dense)?,
                w_p: if with_p { Some(store.add(&wp, &[d_h, inputs.d_p], ParamKind::Dense)?) } else { None },
                w_h: store.add(&wh, &[d_h, d_h], ParamKind::Dense)?,
                b: store.add(&b, &[d_h], ParamKind::Bias)?,
            })
        };
        let lstm = LstmIds {
            input: gate('i', true)?,
            forget: gate('f', true)?,
            cell: gate('c', false)?,
            output: gate('o', true)?,
        };
        let a = cfg.d_att;
        let att = AttentionIds {
            w_h: store.add("att.w_h", &[a, d_h], ParamKind::Dense)?,
            w_q: store.add("att.w_q", &[a, inputs.d_q], ParamKind::Dense)?,
            w_u: store.add("att.w_u", &[a, inputs.d_u], ParamKind::Dense)?,
            w_p: store.add("att.w_p", &[a, inputs.d_p], ParamKind::Dense)?,
            b: store.add("att.b", &[a], ParamKind::Bias)?,
            v: store.add("att.v", &[1, a], ParamKind::Dense)?,
        };
        Ok(Encoder {
            cfg: cfg.clone(),
            inputs,
            lstm,
            att,
        })
    }

    pub fn bind(store: &ParameterStore, cfg: &EncoderConfig, inputs: EncoderInputs) -> Result<Self> {
        cfg.validate()?;
        let gate = |g: char, with_p: bool| -> Result<GateIds> {
            let (we, wp, wh, b) = gate_names(g);
            Ok(GateIds {
                w_e: store.require(&we)?,
                w_p: if with_p { Some(store.require(&wp)?) } else { None },
                w_h: store.require(&wh)?,
                b: store.require(&b)?,
            })
        };
        Ok(Encoder {
            cfg: cfg.clone(),
            inputs,
            lstm: LstmIds {
                input: gate('i', true)?,
                forget: gate('f', true)?,
                cell: gate('c', false)?,
                output: gate('o', true)?,
            },
            att: AttentionIds {
                w_h: store.require("att.w_h")?,
                w_q: store.require("att.w_q")?,
                w_u: store.require("att.w_u")?,
                w_p: store.require("att.w_p")?,
                b: store.require("att.b")?,
                v: store.require("att.v")?,
            },
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn inputs(&self) -> EncoderInputs {
        self.inputs
    }

    pub fn rep_dim(&self) -> usize {
        self.cfg.d_h + self.inputs.d_u
    }

    pub fn lstm_param_ids(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for g in self.lstm.gates() {
            v.push(g.w_e);
            v.extend(g.w_p);
            v.push(g.w_h);
            v.push(g.b);
        }
        v
    }

    pub fn attention_param_ids(&self) -> Vec<ParamId> {
        let a = &self.att;
        vec![a.w_h, a.w_q, a.w_u, a.w_p, a.b, a.v]
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.lstm_param_ids();
        v.extend(self.attention_param_ids());
        v
    }

    /// Property-input weights: the three gate matrices plus attention's `p` block.
    pub fn property_param_ids(&self) -> [ParamId; 4] {
        let [a, b, c] = self.lstm.property_weights();
        [a, b, c, self.att.w_p]
    }

    fn gate_pre(&self, store: &ParameterStore, g: &GateIds, e: &[f64], p: &[f64], h_prev: &[f64]) -> Vec<f64> {
        let d_h = self.cfg.d_h;
        let mut z = store.value(g.b).data().to_vec();
        gemv_acc(store.value(g.w_e).data(), d_h, self.inputs.d_e, e, &mut z);
        if let Some(wp) = g.w_p {
            gemv_acc(store.value(wp).data(), d_h, self.inputs.d_p, p, &mut z);
        }
        gemv_acc(store.value(g.w_h).data(), d_h, d_h, h_prev, &mut z);
        z
    }

    /// One recurrent step with its backward cache.
    pub fn step(&self, store: &ParameterStore, e: &[f64], p: &[f64], h_prev: &[f64], c_prev: &[f64]) -> StepCache {
        let sig = |mut z: Vec<f64>| {
            z.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
            z
        };
        let i = sig(self.gate_pre(store, &self.lstm.input, e, p, h_prev));
        let f = sig(self.gate_pre(store, &self.lstm.forget, e, p, h_prev));
        let mut g = self.gate_pre(store, &self.lstm.cell, e, p, h_prev);
        g.iter_mut().for_each(|v| *v = v.tanh());
        let o = sig(self.gate_pre(store, &self.lstm.output, e, p, h_prev));
        let c: Vec<f64> = (0..self.cfg.d_h).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let h = o.iter().zip(&tanh_c).map(|(o, t)| o * t).collect();
        StepCache {
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            i,
            f,
            g,
            o,
            tanh_c,
            h,
            c,
        }
    }

    /// Single property-gated step from explicit state.
    pub fn pg_lstm_step(
        &self,
        store: &ParameterStore,
        e: &Tensor,
        p: &Tensor,
        h_prev: &Tensor,
        c_prev: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let d_h = self.cfg.d_h;
        if e.len() != self.inputs.d_e || p.len() != self.inputs.d_p || h_prev.len() != d_h || c_prev.len() != d_h {
            return Err(Error::shape("pg_lstm_step", "input sizes do not match the encoder"));
        }
        let s = self.step(store, e.data(), p.data(), h_prev.data(), c_prev.data());
        let h = Tensor::new(vec![d_h], s.h).map_err(|_| Error::non_finite("LSTM state at position 0"))?;
        let c = Tensor::new(vec![d_h], s.c).map_err(|_| Error::non_finite("LSTM cell at position 0"))?;
        Ok((h, c))
    }

    fn check_seq(&self, seq: &[EmbeddedBehavior]) -> Result<()> {
        if seq.len() > self.cfg.max_len {
            return Err(Error::config(format!(
                "sequence of length {} exceeds max_len {}",
                seq.len(),
                self.cfg.max_len
            )));
        }
        for b in seq {
            if b.e().len() != self.inputs.d_e || b.p().len() != self.inputs.d_p {
                return Err(Error::shape("encoder", "behavior embedding has the wrong size"));
            }
        }
        Ok(())
    }

    /// Runs the recurrence left to right from zero state.
    pub fn run_lstm(&self, store: &ParameterStore, seq: &[EmbeddedBehavior]) -> Result<Vec<StepCache>> {
        let d_h = self.cfg.d_h;
        let mut h = vec![0.0; d_h];
        let mut c = vec![0.0; d_h];
        let mut steps = Vec::with_capacity(seq.len());
        for (t, b) in seq.iter().enumerate() {
            let s = self.step(store, b.e(), b.p(), &h, &c);
            if !s.h.iter().chain(&s.c).all(|v| v.is_finite()) {
                return Err(Error::non_finite(format!("LSTM state at position {t}")));
            }
            h.clone_from(&s.h);
            c.clone_from(&s.c);
            steps.push(s);
        }
        Ok(steps)
    }

    /// Encodes a chronological sequence, optionally padded with masked
    /// positions up to `pad_to`.
    pub fn encode_sequence(&self, store: &ParameterStore, seq: &[EmbeddedBehavior], pad_to: Option<usize>) -> Result<EncodedSequence> {
        self.check_seq(seq)?;
        let steps = self.run_lstm(store, seq)?;
        let d_h = self.cfg.d_h;
        let total = pad_to.unwrap_or(seq.len()).max(seq.len());
        let mut out = EncodedSequence {
            h: Vec::with_capacity(total),
            c: Vec::with_capacity(total),
            mask: Vec::with_capacity(total),
        };
        for s in steps {
            out.h.push(Tensor::from_parts(vec![d_h], s.h));
            out.c.push(Tensor::from_parts(vec![d_h], s.c));
            out.mask.push(true);
        }
        while out.h.len() < total {
            out.h.push(Tensor::zeros(&[d_h]));
            out.c.push(Tensor::zeros(&[d_h]));
            out.mask.push(false);
        }
        Ok(out)
    }

    /// `W_q q + W_u u + b`, shared by every position.
    fn attention_context(&self, store: &ParameterStore, q: &[f64], u: &[f64]) -> Vec<f64> {
        let a = self.cfg.d_att;
        let mut ctx = store.value(self.att.b).data().to_vec();
        gemv_acc(store.value(self.att.w_q).data(), a, self.inputs.d_q, q, &mut ctx);
        gemv_acc(store.value(self.att.w_u).data(), a, self.inputs.d_u, u, &mut ctx);
        ctx
    }

    /// Raw score and hidden pre-activation for one position.
    fn attention_score(&self, store: &ParameterStore, ctx: &[f64], h: &[f64], p: &[f64], pre: &mut [f64]) -> f64 {
        let a = self.cfg.d_att;
        pre.copy_from_slice(ctx);
        gemv_acc(store.value(self.att.w_h).data(), a, self.cfg.d_h, h, pre);
        gemv_acc(store.value(self.att.w_p).data(), a, self.inputs.d_p, p, pre);
        store.value(self.att.v).data().iter().zip(pre.iter()).map(|(v, z)| v * z.max(0.0)).sum()
    }

    /// Unnormalised attention scores `s_t` (masked positions included).
    pub fn raw_scores(&self, store: &ParameterStore, enc: &EncodedSequence, q: &Tensor, u: &Tensor, props: &[Tensor]) -> Result<Vec<f64>> {
        if props.len() != enc.len() {
            return Err(Error::shape("attention", "one property vector per position is required"));
        }
        let ctx = self.attention_context(store, q.data(), u.data());
        let mut pre = vec![0.0; self.cfg.d_att];
        Ok(enc
            .h
            .iter()
            .zip(props)
            .map(|(h, p)| self.attention_score(store, &ctx, h.data(), p.data(), &mut pre))
            .collect())
    }

    /// Attention weights: masked softmax of the scores.
    pub fn attention_scores(&self, store: &ParameterStore, enc: &EncodedSequence, q: &Tensor, u: &Tensor, props: &[Tensor]) -> Result<Tensor> {
        if enc.valid_len() == 0 {
            return Err(Error::Data("attention over a sequence with no unmasked positions".into()));
        }
        let s = self.raw_scores(store, enc, q, u, props)?;
        Ok(Tensor::from_parts(vec![s.len()], masked_softmax(&s, &enc.mask)))
    }

    /// Full pass recording what the backward needs.
    pub fn forward(&self, store: &ParameterStore, seq: &[EmbeddedBehavior], q: &[f64], u: &[f64]) -> Result<EncoderTape> {
        self.check_seq(seq)?;
        if q.len() != self.inputs.d_q || u.len() != self.inputs.d_u {
            return Err(Error::shape("encoder", "query or profile vector has the wrong size"));
        }
        let steps = self.run_lstm(store, seq)?;
        let (d_h, a, n) = (self.cfg.d_h, self.cfg.d_att, seq.len());
        let mut att_pre = vec![0.0; n * a];
        let mut weights = vec![0.0; n];
        let mut rep = vec![0.0; d_h + u.len()];
        if n > 0 {
            let ctx = self.attention_context(store, q, u);
            let scores: Vec<f64> = steps
                .iter()
                .zip(seq)
                .zip(att_pre.chunks_exact_mut(a))
                .map(|((s, b), pre)| self.attention_score(store, &ctx, &s.h, b.p(), pre))
                .collect();
            softmax_into(&scores, &mut weights);
            for (w, s) in weights.iter().zip(&steps) {
                for (r, h) in rep[..d_h].iter_mut().zip(&s.h) {
                    *r += w * h;
                }
            }
        }
        rep[d_h..].copy_from_slice(u);
        Ok(EncoderTape {
            steps,
            att_pre,
            weights,
            rep,
            q: q.to_vec(),
            u: u.to_vec(),
        })
    }

    pub fn encode_user(&self, store: &ParameterStore, seq: &[EmbeddedBehavior], q: &Tensor, u: &Tensor) -> Result<UserRepresentation> {
        let tape = self.forward(store, seq, q.data(), u.data())?;
        let d_h = self.cfg.d_h;
        Ok(UserRepresentation {
            rep_s: Tensor::from_parts(vec![d_h], tape.rep[..d_h].to_vec()),
            u: u.clone(),
            rep: Tensor::from_parts(vec![tape.rep.len()], tape.rep),
            attention_weights: tape.weights,
        })
    }

    /// Backpropagates `drep` through attention and the recurrence.
    pub fn backward(&self, store: &ParameterStore, seq: &[EmbeddedBehavior], tape: &EncoderTape, drep: &[f64], grads: &mut GradBuffer) -> InputGrads {
        let (d_h, a, n) = (self.cfg.d_h, self.cfg.d_att, tape.steps.len());
        let EncoderInputs { d_e, d_p, d_q, d_u } = self.inputs;
        let mut out = InputGrads {
            de: vec![vec![0.0; d_e]; n],
            dp: vec![vec![0.0; d_p]; n],
            dq: vec![0.0; d_q],
            du: drep[d_h..].to_vec(),
        };
        if n == 0 {
            return out;
        }
        let drep_s = &drep[..d_h];

        // Attention pooling.
        let mut dh_ext = vec![vec![0.0; d_h]; n];
        let da: Vec<f64> = tape.steps.iter().map(|s| s.h.iter().zip(drep_s).map(|(h, g)| h * g).sum()).collect();
        let inner: f64 = tape.weights.iter().zip(&da).map(|(w, d)| w * d).sum();
        let v = store.value(self.att.v).data().to_vec();
        let w_h = store.value(self.att.w_h).data();
        let w_p = store.value(self.att.w_p).data();
        let mut dz_sum = vec![0.0; a];
        let mut dz = vec![0.0; a];
        let mut hidden = vec![0.0; a];
        for t in 0..n {
            let w = tape.weights[t];
            for (dh, g) in dh_ext[t].iter_mut().zip(drep_s) {
                *dh += w * g;
            }
            let ds = w * (da[t] - inner);
            if ds == 0.0 {
                continue;
            }
            let pre = &tape.att_pre[t * a..(t + 1) * a];
            for k in 0..a {
                hidden[k] = pre[k].max(0.0);
                dz[k] = if pre[k] > 0.0 { ds * v[k] } else { 0.0 };
                dz_sum[k] += dz[k];
            }
            for (gv, hk) in grads.slot(self.att.v).iter_mut().zip(&hidden) {
                *gv += ds * hk;
            }
            ger_acc(&dz, &tape.steps[t].h, grads.slot(self.att.w_h));
            gemv_t_acc(w_h, a, d_h, &dz, &mut dh_ext[t]);
            ger_acc(&dz, seq[t].p(), grads.slot(self.att.w_p));
            gemv_t_acc(w_p, a, d_p, &dz, &mut out.dp[t]);
        }
        ger_acc(&dz_sum, &tape.q, grads.slot(self.att.w_q));
        gemv_t_acc(store.value(self.att.w_q).data(), a, d_q, &dz_sum, &mut out.dq);
        ger_acc(&dz_sum, &tape.u, grads.slot(self.att.w_u));
        gemv_t_acc(store.value(self.att.w_u).data(), a, d_u, &dz_sum, &mut out.du);
        for (gb, d) in grads.slot(self.att.b).iter_mut().zip(&dz_sum) {
            *gb += d;
        }

        // Recurrence, newest to oldest.
        let mut dh_next = vec![0.0; d_h];
        let mut dc_next = vec![0.0; d_h];
        let mut d_pre = [vec![0.0; d_h], vec![0.0; d_h], vec![0.0; d_h], vec![0.0; d_h]];
        for t in (0..n).rev() {
            let s = &tape.steps[t];
            for k in 0..d_h {
                let dh = dh_ext[t][k] + dh_next[k];
                let dc = dc_next[k] + dh * s.o[k] * (1.0 - s.tanh_c[k] * s.tanh_c[k]);
                let d_o = dh * s.tanh_c[k];
                let d_i = dc * s.g[k];
                let d_g = dc * s.i[k];
                let d_f = dc * s.c_prev[k];
                d_pre[0][k] = d_i * s.i[k] * (1.0 - s.i[k]);
                d_pre[1][k] = d_f * s.f[k] * (1.0 - s.f[k]);
                d_pre[2][k] = d_g * (1.0 - s.g[k] * s.g[k]);
                d_pre[3][k] = d_o * s.o[k] * (1.0 - s.o[k]);
                dc_next[k] = dc * s.f[k];
            }
            dh_next.fill(0.0);
            for (gate, dz) in self.lstm.gates().into_iter().zip(&d_pre) {
                ger_acc(dz, seq[t].e(), grads.slot(gate.w_e));
                gemv_t_acc(store.value(gate.w_e).data(), d_h, d_e, dz, &mut out.de[t]);
                if let Some(wp) = gate.w_p {
                    ger_acc(dz, seq[t].p(), grads.slot(wp));
                    gemv_t_acc(store.value(wp).data(), d_h, d_p, dz, &mut out.dp[t]);
                }
                ger_acc(dz, &s.h_prev, grads.slot(gate.w_h));
                gemv_t_acc(store.value(gate.w_h).data(), d_h, d_h, dz, &mut dh_next);
                for (gb, d) in grads.slot(gate.b).iter_mut().zip(dz) {
                    *gb += d;
                }
            }
        }
        out
    }
}

/// Softmax over unmasked entries; masked entries get exactly zero.
pub fn masked_softmax(scores: &[f64], mask: &[bool]) -> Vec<f64> {
    let valid: Vec<f64> = scores.iter().zip(mask).filter(|(_, &m)| m).map(|(s, _)| *s).collect();
    let mut w = vec![0.0; valid.len()];
    if !valid.is_empty() {
        softmax_into(&valid, &mut w);
    }
    let mut it = w.into_iter();
    mask.iter().map(|&m| if m { it.next().unwrap() } else { 0.0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::RngState;
    use rand::Rng;

    const INPUTS: EncoderInputs = EncoderInputs {
        d_e: 5,
        d_p: 3,
        d_q: 2,
        d_u: 4,
    };

    fn setup(d_h: usize) -> (ParameterStore, Encoder) {
        let mut store = ParameterStore::new();
        let cfg = EncoderConfig {
            d_h,
            d_att: 6,
            max_len: 10,
        };
        let enc = Encoder::register(&mut store, &cfg, INPUTS).unwrap();
        store.init(&mut RngState::new(21));
        (store, enc)
    }

    fn rand_vec(rng: &mut RngState, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rand_seq(rng: &mut RngState, n: usize) -> Vec<EmbeddedBehavior> {
        (0..n)
            .map(|_| EmbeddedBehavior::from_parts(&rand_vec(rng, INPUTS.d_e), &rand_vec(rng, INPUTS.d_p)))
            .collect()
    }

    #[test]
    fn registers_eleven_matrices_and_four_biases() {
        let (store, enc) = setup(4);
        let ids = enc.lstm_param_ids();
        assert_eq!(ids.len(), 15);
        let biases = ids.iter().filter(|&&id| store.value(id).shape().len() == 1).count();
        assert_eq!(biases, 4);
        assert!(store.id("lstm.w_pc").is_none());
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let (mut store, enc) = setup(4);
        store.value_mut(enc.lstm.forget.b).fill(50.0);
        store.value_mut(enc.lstm.input.b).fill(-50.0);
        let zero = |n| Tensor::zeros(&[n]);
        let c_prev = Tensor::vector(vec![0.3, -0.7, 1.2, 0.05]).unwrap();
        let (_, c) = enc
            .pg_lstm_step(&store, &zero(5), &zero(3), &zero(4), &c_prev)
            .unwrap();
        for (a, b) in c.data().iter().zip(c_prev.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn length_one_matches_single_step() {
        let (store, enc) = setup(4);
        let mut rng = RngState::new(1);
        let seq = rand_seq(&mut rng, 1);
        let encd = enc.encode_sequence(&store, &seq, None).unwrap();
        let z = Tensor::zeros(&[4]);
        let e = Tensor::vector(seq[0].e().to_vec()).unwrap();
        let p = Tensor::vector(seq[0].p().to_vec()).unwrap();
        let (h, _) = enc.pg_lstm_step(&store, &e, &p, &z, &z).unwrap();
        assert_eq!(encd.h[0], h);
    }

    #[test]
    fn padding_does_not_change_valid_states() {
        let (store, enc) = setup(4);
        let mut rng = RngState::new(2);
        let seq = rand_seq(&mut rng, 4);
        let plain = enc.encode_sequence(&store, &seq, None).unwrap();
        let padded = enc.encode_sequence(&store, &seq, Some(10)).unwrap();
        assert_eq!(padded.len(), 10);
        assert_eq!(&padded.h[..4], &plain.h[..]);
        assert!(padded.h[4..].iter().all(|h| h.data().iter().all(|v| *v == 0.0)));
        assert_eq!(padded.valid_len(), 4);

        let q = Tensor::vector(rand_vec(&mut rng, 2)).unwrap();
        let u = Tensor::vector(rand_vec(&mut rng, 4)).unwrap();
        let mut props: Vec<Tensor> = seq.iter().map(|b| Tensor::vector(b.p().to_vec()).unwrap()).collect();
        let w_plain = enc.attention_scores(&store, &plain, &q, &u, &props).unwrap();
        props.resize(10, Tensor::zeros(&[3]));
        let w_pad = enc.attention_scores(&store, &padded, &q, &u, &props).unwrap();
        assert_eq!(&w_pad.data()[..4], w_plain.data());
        assert!(w_pad.data()[4..].iter().all(|w| *w == 0.0));
    }

    #[test]
    fn too_long_sequence_rejected() {
        let (store, enc) = setup(4);
        let seq = rand_seq(&mut RngState::new(3), 11);
        assert!(enc.encode_sequence(&store, &seq, None).is_err());
    }

    #[test]
    fn all_masked_attention_is_an_error() {
        let (store, enc) = setup(4);
        let encd = enc.encode_sequence(&store, &[], Some(3)).unwrap();
        let props = vec![Tensor::zeros(&[3]); 3];
        let err = enc.attention_scores(&store, &encd, &Tensor::zeros(&[2]), &Tensor::zeros(&[4]), &props);
        assert!(err.is_err());
    }

    #[test]
    fn raising_one_score_shifts_mass_to_it() {
        let base = vec![0.3, -1.2, 0.8, 0.1];
        let mask = vec![true; 4];
        let a = masked_softmax(&base, &mask);
        let mut bumped = base.clone();
        bumped[1] += 10.0;
        let b = masked_softmax(&bumped, &mask);
        assert!(b[1] > a[1]);
        for k in [0, 2, 3] {
            assert!(b[k] < a[k]);
        }
    }

    #[test]
    fn empty_sequence_gives_zero_summary() {
        let (store, enc) = setup(4);
        let u = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let rep = enc.encode_user(&store, &[], &Tensor::zeros(&[2]), &u).unwrap();
        assert!(rep.rep_s.data().iter().all(|v| *v == 0.0));
        assert_eq!(&rep.rep.data()[4..], u.data());
        assert!(rep.attention_weights.is_empty());
    }

    #[test]
    fn zero_attention_gives_mean_of_states() {
        let (mut store, enc) = setup(4);
        for id in enc.attention_param_ids() {
            store.value_mut(id).fill(0.0);
        }
        let mut rng = RngState::new(4);
        let seq = rand_seq(&mut rng, 5);
        let q = Tensor::vector(rand_vec(&mut rng, 2)).unwrap();
        let u = Tensor::vector(rand_vec(&mut rng, 4)).unwrap();
        let rep = enc.encode_user(&store, &seq, &q, &u).unwrap();
        let encd = enc.encode_sequence(&store, &seq, None).unwrap();
        for k in 0..4 {
            let mean = encd.h.iter().map(|h| h.data()[k]).sum::<f64>() / 5.0;
            assert!((rep.rep_s.data()[k] - mean).abs() < 1e-15);
        }
        assert!(rep.attention_weights.iter().all(|w| (*w - 0.2).abs() < 1e-15));
    }
}
