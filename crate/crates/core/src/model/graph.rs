//! Forward computations recorded on a tape.

use crate::autodiff::{Tape, Tensor, Var, LOG_FLOOR};
use crate::corpus::{CLS, SEP};

use super::{decide, Aggregation, AnswerabilityOutput, Mode, ModelParams, ParamId, Prepared};

pub(crate) struct Graph<'p> {
    pub tape: Tape,
    pub params: &'p ModelParams,
}

pub(crate) struct Pass {
    pub states: Var,
    pub cls: Var,
    pub hk: Var,
    pub qbar: Var,
    pub query_rows: Var,
    pub sentence_rows: Var,
}

/// Copy sources for the pointer path: token states, their ids and the
/// additive log-weight of the sentence each token came from.
pub(crate) struct Sources {
    pub states: Var,
    pub ids: Vec<usize>,
    pub offsets: Var,
}

pub(crate) struct HierVars {
    /// S×1 sentence scores in reading order.
    pub yk: Var,
    pub layout: Vec<usize>,
    pub alpha: Vec<Var>,
    /// M×1
    pub yp: Var,
    /// 1×M
    pub beta: Var,
    pub yd: Var,
    pub ctx: Var,
    pub sources: Sources,
}

/// 1.0 where a token also occurs in one of `others`.
fn match_flags(tokens: &[usize], others: &[&[usize]]) -> Vec<f64> {
    tokens
        .iter()
        .map(|t| f64::from(u8::from(others.iter().any(|o| o.contains(t)))))
        .collect()
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Self {
            tape: Tape::new(),
            params,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(id.index(), self.params.get(id))
    }

    /// Embedding plus exact-match flag, one scaled dot-product self-attention
    /// layer, tanh output affine and a residual connection. Returns n×d.
    pub fn encode_tokens(&mut self, tokens: &[usize], flags: &[f64]) -> Var {
        let d = self.params.config.d;
        let e = self.p(ParamId::E);
        let x = self.tape.gather(e, tokens);
        let f = self.tape.constant(Tensor::column(flags.to_vec()));
        let m = self.p(ParamId::MMatch);
        let fm = self.tape.matmul(f, m);
        let h0 = self.tape.add(x, fm);
        let (wq, wk, wv) = (self.p(ParamId::Wq), self.p(ParamId::Wk), self.p(ParamId::Wv));
        let q = self.tape.matmul_nt(h0, wq);
        let k = self.tape.matmul_nt(h0, wk);
        let v = self.tape.matmul_nt(h0, wv);
        let s = self.tape.matmul_nt(q, k);
        let s = self.tape.scale(s, 1.0 / (d as f64).sqrt());
        let a = self.tape.softmax_rows(s);
        let mixed = self.tape.matmul(a, v);
        let wo = self.p(ParamId::Wo);
        let bo = self.p(ParamId::BO);
        let o = self.tape.matmul_nt(mixed, wo);
        let o = self.tape.add_row(o, bo);
        let o = self.tape.tanh(o);
        self.tape.add(o, h0)
    }

    pub fn sentence_pass(&mut self, query: &[usize], sentence: &[usize]) -> Pass {
        let mut tokens = Vec::with_capacity(query.len() + sentence.len() + 2);
        tokens.push(CLS);
        tokens.extend_from_slice(query);
        tokens.push(SEP);
        tokens.extend_from_slice(sentence);
        let mut flags = vec![0.0];
        flags.extend(match_flags(query, &[sentence]));
        flags.push(0.0);
        flags.extend(match_flags(sentence, &[query]));
        let states = self.encode_tokens(&tokens, &flags);
        let q_end = 1 + query.len();
        let cls = self.tape.row_of(states, 0);
        let query_rows = self.tape.slice_rows(states, 1, q_end);
        let qbar = self.tape.mean_rows(query_rows);
        let sentence_rows = self.tape.slice_rows(states, q_end + 1, tokens.len());
        let hk = self.tape.mean_rows(sentence_rows);
        Pass {
            states,
            cls,
            hk,
            qbar,
            query_rows,
            sentence_rows,
        }
    }

    /// e_k = vᵀ tanh(W_a h_k + b_a) for stacked S×d rows, giving S×1.
    pub fn sentence_energies(&mut self, hk: Var) -> Var {
        let (wa, ba, v) = (self.p(ParamId::Wa), self.p(ParamId::BA), self.p(ParamId::V));
        let t = self.tape.matmul_nt(hk, wa);
        let t = self.tape.add_row(t, ba);
        let t = self.tape.tanh(t);
        self.tape.matmul_nt(t, v)
    }

    /// e′_m = v′ᵀ tanh(W_a′ ŷ_P,m + b_a′) for an M×1 column of scalar scores.
    pub fn ranking_energies(&mut self, yp: Var) -> Var {
        let (wa, ba, v) = (
            self.p(ParamId::WaPrime),
            self.p(ParamId::BAPrime),
            self.p(ParamId::VPrime),
        );
        let t = self.tape.matmul_nt(yp, wa);
        let t = self.tape.add_row(t, ba);
        let t = self.tape.tanh(t);
        self.tape.matmul_nt(t, v)
    }

    fn uniform_row(&mut self, n: usize) -> Var {
        self.tape.constant(Tensor::row(vec![1.0 / n as f64; n]))
    }

    pub fn hierarchy(&mut self, input: &Prepared, agg: Aggregation) -> HierVars {
        let layout: Vec<usize> = input.paragraphs.iter().map(Vec::len).collect();
        let passes: Vec<Pass> = input
            .paragraphs
            .iter()
            .flatten()
            .map(|s| self.sentence_pass(&input.query, s))
            .collect();

        let cls: Vec<Var> = passes.iter().map(|p| p.cls).collect();
        let cls = self.tape.concat_rows(&cls);
        let (wc, bc) = (self.p(ParamId::WCls), self.p(ParamId::BCls));
        let z = self.tape.matmul_nt(cls, wc);
        let z = self.tape.add_row(z, bc);
        let yk = self.tape.sigmoid(z);

        let hk: Vec<Var> = passes.iter().map(|p| p.hk).collect();
        let hk = self.tape.concat_rows(&hk);
        let energies = match agg {
            Aggregation::Attention => Some(self.sentence_energies(hk)),
            Aggregation::Mean => None,
        };

        let mut alpha = Vec::with_capacity(layout.len());
        let mut yp = Vec::with_capacity(layout.len());
        let mut hctx = Vec::with_capacity(layout.len());
        let mut start = 0;
        for &k in &layout {
            let a = match energies {
                Some(e) => {
                    let e = self.tape.slice_rows(e, start, start + k);
                    let e = self.tape.transpose(e);
                    self.tape.softmax_rows(e)
                }
                None => self.uniform_row(k),
            };
            let y = self.tape.slice_rows(yk, start, start + k);
            yp.push(self.tape.matmul(a, y));
            let h = self.tape.slice_rows(hk, start, start + k);
            hctx.push(self.tape.matmul(a, h));
            alpha.push(a);
            start += k;
        }
        let yp = self.tape.concat_rows(&yp);
        let beta = match agg {
            Aggregation::Attention => {
                let e = self.ranking_energies(yp);
                let e = self.tape.transpose(e);
                self.tape.softmax_rows(e)
            }
            Aggregation::Mean => self.uniform_row(layout.len()),
        };
        let yd = self.tape.matmul(beta, yp);
        let hctx = self.tape.concat_rows(&hctx);
        let hctx = self.tape.matmul(beta, hctx);
        let qbars: Vec<Var> = passes.iter().map(|p| p.qbar).collect();
        let qbars = self.tape.concat_rows(&qbars);
        let qbar = self.tape.mean_rows(qbars);
        let ctx = self.tape.add(qbar, hctx);

        let sources = self.sources(input, &passes, &layout, &alpha, beta);
        HierVars {
            yk,
            layout,
            alpha,
            yp,
            beta,
            yd,
            ctx,
            sources,
        }
    }

    fn sources(
        &mut self,
        input: &Prepared,
        passes: &[Pass],
        layout: &[usize],
        alpha: &[Var],
        beta: Var,
    ) -> Sources {
        let mut states = vec![passes[0].query_rows];
        let mut ids = input.query.clone();
        let mut offsets = vec![self.tape.constant(Tensor::zeros(1, input.query.len()))];
        let mut idx = 0;
        for (m, &k) in layout.iter().enumerate() {
            let b = self.tape.pick(beta, m);
            for j in 0..k {
                let sentence = &input.paragraphs[m][j];
                let a = self.tape.pick(alpha[m], j);
                let w = self.tape.mul(a, b);
                let lw = self.tape.log(w, LOG_FLOOR);
                let ones = self.tape.constant(Tensor::row(vec![1.0; sentence.len()]));
                offsets.push(self.tape.matmul(lw, ones));
                states.push(passes[idx].sentence_rows);
                ids.extend_from_slice(sentence);
                idx += 1;
            }
        }
        Sources {
            states: self.tape.concat_rows(&states),
            ids,
            offsets: self.tape.concat_cols(&offsets),
        }
    }

    pub fn answerability_output(&self, h: &HierVars, tau: f64) -> AnswerabilityOutput {
        let t = &self.tape;
        let yk = t.value(h.yk).data();
        let mut sentence_scores = Vec::with_capacity(h.layout.len());
        let mut start = 0;
        for &k in &h.layout {
            sentence_scores.push(yk[start..start + k].to_vec());
            start += k;
        }
        let ranking_score = t.scalar(h.yd);
        AnswerabilityOutput {
            sentence_scores,
            sentence_attn: h.alpha.iter().map(|&a| t.value(a).data().to_vec()).collect(),
            paragraph_scores: t.value(h.yp).data().to_vec(),
            paragraph_attn: t.value(h.beta).data().to_vec(),
            ranking_score,
            y_pred: decide(ranking_score, tau),
        }
    }

    /// Mixture of the vocabulary softmax and the copy distribution, 1×|V|.
    pub fn decode_step(&mut self, ctx: Var, src: &Sources, prefix: &[usize], mode: Mode) -> Var {
        let vocab = self.params.config.vocab_size;
        let e = self.p(ParamId::E);
        let last = self.tape.gather(e, &prefix[prefix.len() - 1..]);
        let all = self.tape.gather(e, prefix);
        let mean = self.tape.mean_rows(all);
        let m = self.p(match mode {
            Mode::Answer => ParamId::MAns,
            Mode::Refusal => ParamId::MRef,
        });
        let c = self.tape.concat_cols(&[last, mean, ctx, m]);
        let (wh, bh) = (self.p(ParamId::Wh), self.p(ParamId::BH));
        let u = self.tape.matmul_nt(c, wh);
        let u = self.tape.add_row(u, bh);
        let u = self.tape.tanh(u);

        let (wo, bo) = (self.p(ParamId::WOut), self.p(ParamId::BOut));
        let logits = self.tape.matmul_nt(u, wo);
        let logits = self.tape.add_row(logits, bo);
        let p_vocab = self.tape.softmax_rows(logits);

        let (wg, bg) = (self.p(ParamId::WGate), self.p(ParamId::BGate));
        let gz = self.tape.matmul_nt(u, wg);
        let gz = self.tape.add_row(gz, bg);
        let gate = self.tape.sigmoid(gz);

        let wp = self.p(ParamId::WPtr);
        let query = self.tape.matmul_nt(u, wp);
        let scores = self.tape.matmul_nt(query, src.states);
        let scores = self.tape.add(scores, src.offsets);
        let attn = self.tape.softmax_rows(scores);
        let p_copy = self.tape.scatter_cols(attn, &src.ids, vocab);

        let neg = self.tape.scale(gate, -1.0);
        let rest = self.tape.add_const(neg, 1.0);
        let a = self.tape.mul_scalar(p_vocab, gate);
        let b = self.tape.mul_scalar(p_copy, rest);
        self.tape.add(a, b)
    }

    /// `[CLS] query [SEP] context [SEP] response` scored from the CLS state.
    pub fn reward(&mut self, input: &Prepared, response: &[usize]) -> Var {
        let ctx = input.context_tokens();
        let q = input.query.as_slice();
        let mut tokens = vec![CLS];
        let mut flags = vec![0.0];
        tokens.extend_from_slice(q);
        flags.extend(match_flags(q, &[&ctx, response]));
        tokens.push(SEP);
        flags.push(0.0);
        tokens.extend_from_slice(&ctx);
        flags.extend(match_flags(&ctx, &[q, response]));
        tokens.push(SEP);
        flags.push(0.0);
        tokens.extend_from_slice(response);
        flags.extend(match_flags(response, &[q, &ctx]));
        let states = self.encode_tokens(&tokens, &flags);
        let cls = self.tape.row_of(states, 0);
        let (wr, br) = (self.p(ParamId::WR), self.p(ParamId::BR));
        let s = self.tape.matmul_nt(cls, wr);
        self.tape.add_row(s, br)
    }
}
