//! Toy text encoder: table lookup, sinusoidal positions, optional self-attention mixing.

use ndarray::{Array2, Axis};

use super::nn::{attention, attention_back, sinusoid, AttentionCache};
use super::params::{DenoiserParams, GradRequest, Grads, Partition};
use super::vocab::{SlotValues, Token};
use crate::error::{Error, Result};

/// Encoded prompt: `seq_len` rows of `text_dim` values.
#[derive(Debug, Clone, PartialEq)]
pub struct TextCondition {
    pub rows: Array2<f64>,
}

impl TextCondition {
    pub fn is_finite(&self) -> bool {
        self.rows.iter().all(|v| v.is_finite())
    }
}

/// Positional codes for a sequence.
pub fn positions(seq_len: usize, dim: usize) -> Array2<f64> {
    let mut p = Array2::zeros((seq_len, dim));
    for i in 0..seq_len {
        p.row_mut(i).assign(&sinusoid(i as f64, dim));
    }
    p
}

/// Pads `tokens` to the configured length.
pub fn padded(tokens: &[Token], seq_len: usize, pad_id: usize) -> Result<Vec<Token>> {
    if tokens.len() > seq_len {
        return Err(Error::PromptTooLong { len: tokens.len(), max: seq_len });
    }
    let mut out = tokens.to_vec();
    out.resize(seq_len, Token::Base(pad_id));
    Ok(out)
}

pub struct TextTrace {
    tokens: Vec<Token>,
    mixed_input: Option<(Array2<f64>, Array2<f64>, AttentionCache)>,
}

/// Embedding lookup plus positions, before mixing.
pub fn embed_rows(params: &DenoiserParams, tokens: &[Token], slots: &SlotValues) -> Result<Array2<f64>> {
    let cfg = params.config;
    let table = params.get("text.token");
    let mut rows = positions(cfg.seq_len, cfg.text_dim);
    for (i, tok) in tokens.iter().enumerate() {
        let mut row = rows.row_mut(i);
        match tok {
            Token::Base(id) => {
                if *id >= table.nrows() {
                    return Err(Error::UnknownToken(format!("#{id}")));
                }
                row += &table.row(*id);
            }
            Token::Slot(name) => {
                let v = slots.get(name).ok_or_else(|| Error::UnregisteredSlot(name.clone()))?;
                if v.len() != cfg.text_dim {
                    return Err(Error::Shape { expected: vec![cfg.text_dim], got: vec![v.len()] });
                }
                row += v;
            }
        }
    }
    Ok(rows)
}

/// Encodes an already padded token sequence.
pub fn encode_traced(params: &DenoiserParams, tokens: &[Token], slots: &SlotValues) -> Result<(TextCondition, TextTrace)> {
    let cfg = params.config;
    if tokens.len() != cfg.seq_len {
        return Err(Error::Shape { expected: vec![cfg.seq_len], got: vec![tokens.len()] });
    }
    let z = embed_rows(params, tokens, slots)?;
    let (rows, mixed_input) = if cfg.text_mixing {
        let q = z.dot(params.get("text.mix.q"));
        let k = z.dot(params.get("text.mix.k"));
        let v = z.dot(params.get("text.mix.v"));
        let (a, cache) = attention(q, k, v, 1);
        let rows = &z + &a.dot(params.get("text.mix.o"));
        (rows, Some((z, a, cache)))
    } else {
        (z, None)
    };
    Ok((TextCondition { rows }, TextTrace { tokens: tokens.to_vec(), mixed_input }))
}

pub fn encode(params: &DenoiserParams, tokens: &[Token], slots: &SlotValues) -> Result<TextCondition> {
    encode_traced(params, tokens, slots).map(|(c, _)| c)
}

/// Propagates `d_rows` back to the embedding table (OTHER) and slot vectors.
pub fn encode_back(params: &DenoiserParams, trace: &TextTrace, d_rows: &Array2<f64>, req: &GradRequest, grads: &mut Grads) {
    let other = req.wants(Partition::Other);
    if !other && !req.slots {
        return;
    }
    let dz = match &trace.mixed_input {
        Some((z, a, cache)) => {
            let wo = params.get("text.mix.o");
            let da = d_rows.dot(&wo.t());
            let (dq, dk, dv) = attention_back(&da, cache);
            let mut dz = d_rows.clone();
            for (name, d) in [("text.mix.q", &dq), ("text.mix.k", &dk), ("text.mix.v", &dv)] {
                let w = params.get(name);
                dz += &d.dot(&w.t());
                if other {
                    grads.add_param(params.id(name), z.t().dot(d));
                }
            }
            if other {
                grads.add_param(params.id("text.mix.o"), a.t().dot(d_rows));
            }
            dz
        }
        None => d_rows.clone(),
    };
    if other {
        let mut dt = Array2::zeros(params.get("text.token").raw_dim());
        for (i, tok) in trace.tokens.iter().enumerate() {
            if let Token::Base(id) = tok {
                let mut r = dt.row_mut(*id);
                r += &dz.row(i);
            }
        }
        grads.add_param(params.id("text.token"), dt);
    }
    if req.slots {
        for (i, tok) in trace.tokens.iter().enumerate() {
            if let Token::Slot(name) = tok {
                grads.add_slot(name, dz.index_axis(Axis(0), i));
            }
        }
    }
}
