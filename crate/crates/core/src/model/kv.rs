use super::layers::{gelu, layernorm, vec_mat};
use super::{ModelError, Params, Scalar};

/// Incremental decoding state: per-layer key/value caches for the tokens fed so
/// far. When the context window is full the cache is rebuilt from the most
/// recent `context_len` tokens.
#[derive(Debug, Clone)]
pub struct KvSession<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    window: Vec<u32>,
}

impl<T: Scalar> KvSession<T> {
    pub fn new(params: &Params<T>) -> Self {
        let n = params.config.n_layers;
        KvSession {
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            window: Vec::new(),
        }
    }

    /// Tokens currently held in the cache.
    pub fn window(&self) -> &[u32] {
        &self.window
    }

    fn reset(&mut self) {
        self.keys.iter_mut().for_each(Vec::clear);
        self.values.iter_mut().for_each(Vec::clear);
        self.window.clear();
    }

    /// Clears the cache and feeds `tokens`; returns the next-token logits after the
    /// last one. Only the trailing `context_len` tokens are used.
    pub fn prime(&mut self, params: &Params<T>, tokens: &[u32]) -> Result<Vec<T>, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyWindow);
        }
        let ctx = params.config.context_len;
        let tail = &tokens[tokens.len().saturating_sub(ctx)..];
        self.reset();
        let mut logits = Vec::new();
        for &t in tail {
            logits = self.push(params, t)?;
        }
        Ok(logits)
    }

    /// Appends one token and returns the logits for the position after it.
    pub fn step(&mut self, params: &Params<T>, token: u32) -> Result<Vec<T>, ModelError> {
        if self.window.len() == params.config.context_len {
            let mut tail = self.window[1..].to_vec();
            tail.push(token);
            return self.prime(params, &tail);
        }
        self.push(params, token)
    }

    fn push(&mut self, params: &Params<T>, token: u32) -> Result<Vec<T>, ModelError> {
        let cfg = &params.config;
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                id: token,
                vocab: cfg.vocab_size,
            });
        }
        let (d, heads) = (cfg.d_model, cfg.n_heads);
        let hd = d / heads;
        let pos = self.window.len();
        let lay = &params.layout;
        let wte = params.get(&lay.wte);
        let wpe = params.get(&lay.wpe);
        let tok = token as usize;
        let mut x: Vec<T> = (0..d).map(|i| wte[tok * d + i] + wpe[pos * d + i]).collect();
        let scale = T::of(1.0 / (hd as f64).sqrt());

        for (l, lay_l) in lay.layers.iter().enumerate() {
            let (h, _) = layernorm(&x, d, params.get(&lay_l.ln1_g), params.get(&lay_l.ln1_b));
            let qkv = vec_mat(&h, params.get(&lay_l.w_qkv), 3 * d, Some(params.get(&lay_l.b_qkv)));
            self.keys[l].extend_from_slice(&qkv[d..2 * d]);
            self.values[l].extend_from_slice(&qkv[2 * d..]);
            let (keys, values) = (&self.keys[l], &self.values[l]);
            let n = pos + 1;
            let mut y = vec![T::zero(); d];
            for hh in 0..heads {
                let q = &qkv[hh * hd..(hh + 1) * hd];
                let scores: Vec<T> = (0..n)
                    .map(|j| {
                        let k = &keys[j * d + hh * hd..j * d + (hh + 1) * hd];
                        q.iter().zip(k).map(|(&a, &b)| a * b).sum::<T>() * scale
                    })
                    .collect();
                let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
                let exps: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
                let sum: T = exps.iter().copied().sum();
                for (j, &e) in exps.iter().enumerate() {
                    let w = e / sum;
                    let v = &values[j * d + hh * hd..j * d + (hh + 1) * hd];
                    for (o, &vv) in y[hh * hd..(hh + 1) * hd].iter_mut().zip(v) {
                        *o = *o + w * vv;
                    }
                }
            }
            let proj = vec_mat(&y, params.get(&lay_l.w_proj), d, Some(params.get(&lay_l.b_proj)));
            x.iter_mut().zip(&proj).for_each(|(a, &b)| *a = *a + b);
            let (h2, _) = layernorm(&x, d, params.get(&lay_l.ln2_g), params.get(&lay_l.ln2_b));
            let fc: Vec<T> = vec_mat(&h2, params.get(&lay_l.w_fc), 4 * d, Some(params.get(&lay_l.b_fc)))
                .into_iter()
                .map(gelu)
                .collect();
            let out = vec_mat(&fc, params.get(&lay_l.w_out), d, Some(params.get(&lay_l.b_out)));
            x.iter_mut().zip(&out).for_each(|(a, &b)| *a = *a + b);
        }
        let (hf, _) = layernorm(&x, d, params.get(&lay.lnf_g), params.get(&lay.lnf_b));
        let logits: Vec<T> = wte
            .chunks_exact(d)
            .map(|row| row.iter().zip(&hf).map(|(&a, &b)| a * b).sum())
            .collect();
        self.window.push(token);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NumericalOverflow);
        }
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_params, ModelConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            context_len: 6,
            dropout: 0.0,
            vocab_size: 12,
            seed: 5,
        }
    }

    #[test]
    fn incremental_matches_batched() {
        let p = init_params::<f64>(&cfg()).unwrap();
        let toks = [3u32, 1, 4, 1, 5, 9];
        let full = forward(&p, &toks, None).unwrap();
        let mut s = KvSession::new(&p);
        for (t, &tok) in toks.iter().enumerate() {
            let l = s.step(&p, tok).unwrap();
            for (a, b) in l.iter().zip(&full[t * 12..(t + 1) * 12]) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sliding_window_uses_last_context() {
        let p = init_params::<f64>(&cfg()).unwrap();
        let toks = [3u32, 1, 4, 1, 5, 9, 2, 6];
        let mut s = KvSession::new(&p);
        let mut last = Vec::new();
        for &t in &toks {
            last = s.step(&p, t).unwrap();
        }
        assert_eq!(s.window(), &toks[2..]);
        let full = forward(&p, &toks[2..], None).unwrap();
        for (a, b) in last.iter().zip(&full[5 * 12..]) {
            assert!((a - b).abs() < 1e-10);
        }
        let mut s2 = KvSession::new(&p);
        let primed = s2.prime(&p, &toks).unwrap();
        assert_eq!(primed, last);
    }
}
