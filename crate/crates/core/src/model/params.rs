use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError, Scalar};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerLayout {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub w_qkv: Range<usize>,
    pub b_qkv: Range<usize>,
    pub w_proj: Range<usize>,
    pub b_proj: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w_fc: Range<usize>,
    pub b_fc: Range<usize>,
    pub w_out: Range<usize>,
    pub b_out: Range<usize>,
}

/// Kind of a parameter tensor; decides its initialisation and weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Weight,
    Gain,
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    pub range: Range<usize>,
    pub kind: SegmentKind,
}

impl Segment {
    /// Only matrices (embeddings and projections) are weight-decayed.
    pub fn decays(&self) -> bool {
        self.kind == SegmentKind::Weight
    }
}

/// Offsets of every tensor inside the flat parameter buffer, in storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub wte: Range<usize>,
    pub wpe: Range<usize>,
    pub layers: Vec<LayerLayout>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub segments: Vec<Segment>,
    pub total: usize,
}

struct Builder {
    offset: usize,
    segments: Vec<Segment>,
}

impl Builder {
    fn take(&mut self, name: String, len: usize, kind: SegmentKind) -> Range<usize> {
        let r = self.offset..self.offset + len;
        self.offset += len;
        self.segments.push(Segment {
            name,
            range: r.clone(),
            kind,
        });
        r
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        use SegmentKind::*;
        let d = cfg.d_model;
        let mut b = Builder {
            offset: 0,
            segments: Vec::new(),
        };
        let wte = b.take("wte".into(), cfg.vocab_size * d, Weight);
        let wpe = b.take("wpe".into(), cfg.context_len * d, Weight);
        let layers = (0..cfg.n_layers)
            .map(|l| LayerLayout {
                ln1_g: b.take(format!("h{l}.ln1.g"), d, Gain),
                ln1_b: b.take(format!("h{l}.ln1.b"), d, Bias),
                w_qkv: b.take(format!("h{l}.attn.w_qkv"), d * 3 * d, Weight),
                b_qkv: b.take(format!("h{l}.attn.b_qkv"), 3 * d, Bias),
                w_proj: b.take(format!("h{l}.attn.w_proj"), d * d, Weight),
                b_proj: b.take(format!("h{l}.attn.b_proj"), d, Bias),
                ln2_g: b.take(format!("h{l}.ln2.g"), d, Gain),
                ln2_b: b.take(format!("h{l}.ln2.b"), d, Bias),
                w_fc: b.take(format!("h{l}.mlp.w_fc"), d * 4 * d, Weight),
                b_fc: b.take(format!("h{l}.mlp.b_fc"), 4 * d, Bias),
                w_out: b.take(format!("h{l}.mlp.w_out"), 4 * d * d, Weight),
                b_out: b.take(format!("h{l}.mlp.b_out"), d, Bias),
            })
            .collect();
        let lnf_g = b.take("lnf.g".into(), d, Gain);
        let lnf_b = b.take("lnf.b".into(), d, Bias);
        Layout {
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
            total: b.offset,
            segments: b.segments,
        }
    }
}

/// Model parameters in one flat buffer described by [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub data: Vec<T>,
}

impl<T: Scalar> Params<T> {
    pub fn from_data(config: ModelConfig, data: Vec<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if data.len() != layout.total {
            return Err(ModelError::Shape(format!(
                "expected {} parameters, got {}",
                layout.total,
                data.len()
            )));
        }
        Ok(Params { config, layout, data })
    }

    pub fn zeros_like(&self) -> Vec<T> {
        vec![T::zero(); self.data.len()]
    }

    pub fn get(&self, r: &Range<usize>) -> &[T] {
        &self.data[r.clone()]
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Weights drawn from N(0, 0.02²) with a generator seeded by `config.seed`;
/// normalisation gains 1, biases 0.
pub fn init_params<T: Scalar>(config: &ModelConfig) -> Result<Params<T>, ModelError> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut data = vec![T::zero(); layout.total];
    for seg in &layout.segments {
        let fill = &mut data[seg.range.clone()];
        match seg.kind {
            SegmentKind::Weight => fill.iter_mut().for_each(|v| *v = T::of(normal.sample(&mut rng))),
            SegmentKind::Gain => fill.iter_mut().for_each(|v| *v = T::one()),
            SegmentKind::Bias => {}
        }
    }
    Ok(Params {
        config: config.clone(),
        layout,
        data,
    })
}
