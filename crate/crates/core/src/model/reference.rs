//! Cache-free reference forward: recomputes the whole sequence with an
//! explicit causal mask. Used as the oracle for the cached, ragged and
//! padded paths.

use super::{mlp, ops, LogitsRow, Model, ModelError};

/// Logits for every position of a single sequence, positions `0..len`.
pub fn full_forward(model: &Model, tokens: &[u32]) -> Result<Vec<LogitsRow>, ModelError> {
    let cfg = model.config();
    let (n, h, hd) = (tokens.len(), cfg.hidden, cfg.head_dim());
    if n == 0 {
        return Err(ModelError::EmptyInput("full_forward"));
    }
    if n > cfg.max_positions {
        return Err(ModelError::Capacity { position: n - 1, max: cfg.max_positions });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange { token: t, vocab: cfg.vocab_size });
    }
    let w = &model.weights;
    let mut x: Vec<Vec<f32>> = tokens
        .iter()
        .enumerate()
        .map(|(pos, &t)| (0..h).map(|j| w.tok_emb[t as usize * h + j] + w.pos_emb[pos * h + j]).collect())
        .collect();

    let scale = 1.0 / (hd as f32).sqrt();
    for layer in &w.layers {
        let mut qs = vec![vec![0.0; h]; n];
        let mut ks = vec![vec![0.0; h]; n];
        let mut vs = vec![vec![0.0; h]; n];
        let mut normed = vec![0.0; h];
        for i in 0..n {
            ops::layer_norm(&x[i], &layer.ln1_gain, &layer.ln1_bias, &mut normed);
            ops::affine(&layer.wq, &layer.bq, &normed, &mut qs[i]);
            ops::affine(&layer.wk, &layer.bk, &normed, &mut ks[i]);
            ops::affine(&layer.wv, &layer.bv, &normed, &mut vs[i]);
        }
        // mask[i][j]: may position i attend to position j?
        let mask: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| j <= i).collect()).collect();
        for i in 0..n {
            let mut attn = vec![0.0; h];
            for head in 0..cfg.num_heads {
                let span = head * hd..(head + 1) * hd;
                let mut scores: Vec<f32> = (0..n)
                    .map(|j| {
                        if mask[i][j] {
                            ops::dot(&qs[i][span.clone()], &ks[j][span.clone()]) * scale
                        } else {
                            f32::NEG_INFINITY
                        }
                    })
                    .collect();
                ops::softmax_in_place(&mut scores);
                for j in 0..n {
                    for d in 0..hd {
                        attn[span.start + d] += scores[j] * vs[j][span.start + d];
                    }
                }
            }
            let mut proj = vec![0.0; h];
            ops::affine(&layer.wo, &layer.bo, &attn, &mut proj);
            for j in 0..h {
                x[i][j] += proj[j];
            }
            let mut up = vec![0.0; cfg.ffn_dim()];
            mlp(layer, &mut x[i], &mut normed, &mut up, &mut proj);
        }
    }
    Ok(x.iter().map(|xi| LogitsRow(model.head(xi))).collect())
}
