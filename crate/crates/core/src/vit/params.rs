use rand::Rng;

use super::config::ModelConfig;
use super::patch::posemb_sincos_2d;
use crate::error::{Error, Result};
use crate::merger::MergerParams;
use crate::numcore::{Real, Tensor};

/// Walks every parameter tensor in a fixed order under slash-separated paths.
pub trait ParamVisitor<T: Real> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>));

    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |k, t| out.push((k, t)));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |k, t| out.push((k, t)));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    /// All parameters concatenated in visiting order.
    fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    fn load_flat(&mut self, flat: &[T]) -> Result<()> {
        let total = self.num_params();
        if flat.len() != total {
            return Err(Error::shape("load_flat", &[total], &[flat.len()]));
        }
        let mut at = 0;
        self.visit_mut("", &mut |_, t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        });
        Ok(())
    }

    fn zero(&mut self) {
        self.visit_mut("", &mut |_, t| t.fill(T::zero()));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Real> LayerNormParams<T> {
    /// Unit gain, zero shift.
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::full(&[dim], T::one()),
            beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gamma: Tensor::zeros(&[dim]),
            beta: Tensor::zeros(&[dim]),
        }
    }

    fn visit_with<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}_gamma"), &self.gamma);
        f(format!("{prefix}_beta"), &self.beta);
    }

    fn visit_with_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'a mut Tensor<T>),
    ) {
        f(format!("{prefix}_gamma"), &mut self.gamma);
        f(format!("{prefix}_beta"), &mut self.beta);
    }
}

/// Multi-head self-attention projections. Weights are stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub num_heads: usize,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
}

impl<T: Real> AttentionParams<T> {
    pub fn init(dim: usize, num_heads: usize, rng: &mut impl Rng) -> Self {
        let mut w = || Tensor::trunc_normal(&[dim, dim], 0.02, rng);
        let (wq, wk, wv, wo) = (w(), w(), w(), w());
        Self {
            num_heads,
            wq,
            bq: Tensor::zeros(&[dim]),
            wk,
            bk: Tensor::zeros(&[dim]),
            wv,
            bv: Tensor::zeros(&[dim]),
            wo,
            bo: Tensor::zeros(&[dim]),
        }
    }

    pub fn zeros(dim: usize, num_heads: usize) -> Self {
        let w = || Tensor::zeros(&[dim, dim]);
        Self {
            num_heads,
            wq: w(),
            bq: Tensor::zeros(&[dim]),
            wk: w(),
            bk: Tensor::zeros(&[dim]),
            wv: w(),
            bv: Tensor::zeros(&[dim]),
            wo: w(),
            bo: Tensor::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }
}

impl<T: Real> ParamVisitor<T> for AttentionParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (name, t) in [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
        ] {
            f(format!("{prefix}{name}"), t);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        for (name, t) in [
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
        ] {
            f(format!("{prefix}{name}"), t);
        }
    }
}

/// Two-layer GELU MLP, `D -> mlp_dim -> D`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Real> MlpParams<T> {
    pub fn init(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: Tensor::trunc_normal(&[dim, hidden], 0.02, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::trunc_normal(&[hidden, dim], 0.02, rng),
            b2: Tensor::zeros(&[dim]),
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[dim, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, dim]),
            b2: Tensor::zeros(&[dim]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlockParams<T> {
    pub ln1: LayerNormParams<T>,
    pub attn: AttentionParams<T>,
    pub ln2: LayerNormParams<T>,
    pub mlp: MlpParams<T>,
}

impl<T: Real> EncoderBlockParams<T> {
    pub fn init(dim: usize, num_heads: usize, mlp_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNormParams::new(dim),
            attn: AttentionParams::init(dim, num_heads, rng),
            ln2: LayerNormParams::new(dim),
            mlp: MlpParams::init(dim, mlp_dim, rng),
        }
    }

    /// All-zero parameters (also used as a gradient accumulator).
    pub fn zeros(dim: usize, num_heads: usize, mlp_dim: usize) -> Self {
        Self {
            ln1: LayerNormParams::zeros(dim),
            attn: AttentionParams::zeros(dim, num_heads),
            ln2: LayerNormParams::zeros(dim),
            mlp: MlpParams::zeros(dim, mlp_dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.attn.dim()
    }
}

impl<T: Real> ParamVisitor<T> for EncoderBlockParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.ln1.visit_with(&format!("{prefix}ln1"), f);
        self.attn.visit(&format!("{prefix}attn/"), f);
        self.ln2.visit_with(&format!("{prefix}ln2"), f);
        f(format!("{prefix}mlp/w1"), &self.mlp.w1);
        f(format!("{prefix}mlp/b1"), &self.mlp.b1);
        f(format!("{prefix}mlp/w2"), &self.mlp.w2);
        f(format!("{prefix}mlp/b2"), &self.mlp.b2);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        self.ln1.visit_with_mut(&format!("{prefix}ln1"), f);
        self.attn.visit_mut(&format!("{prefix}attn/"), f);
        self.ln2.visit_with_mut(&format!("{prefix}ln2"), f);
        f(format!("{prefix}mlp/w1"), &mut self.mlp.w1);
        f(format!("{prefix}mlp/b1"), &mut self.mlp.b1);
        f(format!("{prefix}mlp/w2"), &mut self.mlp.w2);
        f(format!("{prefix}mlp/b2"), &mut self.mlp.b2);
    }
}

/// Every learned tensor of a (merger-)ViT.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    /// `patch_dim x D` patch projection.
    pub embed_w: Tensor<T>,
    pub embed_b: Tensor<T>,
    /// `(cls + grid²) x D`; row 0 belongs to the cls token when present.
    pub posemb: Tensor<T>,
    pub cls: Option<Tensor<T>>,
    pub blocks: Vec<EncoderBlockParams<T>>,
    pub merger: Option<MergerParams<T>>,
    pub head_ln: LayerNormParams<T>,
    /// `D x num_classes` classifier.
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        // Lecun-normal for the patch projection so content and position start at similar scales.
        let embed_std = 1.0 / (config.patch_dim() as f64).sqrt();
        let embed_w = Tensor::trunc_normal(&[config.patch_dim(), d], embed_std, rng);
        // Sin-cos start for the grid rows, small noise for the cls row.
        let mut posemb = Tensor::randn(&[config.input_tokens(), d], 0.02, rng);
        if let Ok(table) = posemb_sincos_2d::<T>(config.grid(), d) {
            let lead = config.cls_tokens();
            for (dst, &v) in posemb.data_mut()[lead * d..].iter_mut().zip(table.data()) {
                *dst = v;
            }
        }
        let cls = config.use_cls_token.then(|| Tensor::zeros(&[1, d]));
        let blocks = (0..config.depth)
            .map(|_| EncoderBlockParams::init(d, config.num_heads, config.mlp_dim, rng))
            .collect();
        let merger = config
            .merger
            .map(|m| MergerParams::init(d, m.output_tokens, rng));
        let head_w = Tensor::trunc_normal(&[d, config.num_classes], 0.02, rng);
        Ok(Self {
            embed_w,
            embed_b: Tensor::zeros(&[d]),
            posemb,
            cls,
            blocks,
            merger,
            head_ln: LayerNormParams::new(d),
            head_w,
            head_b: Tensor::zeros(&[config.num_classes]),
        })
    }

    /// Same structure, all zeros. Used to accumulate gradients.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let ln = |p: &LayerNormParams<T>| LayerNormParams {
            gamma: p.gamma.cast(),
            beta: p.beta.cast(),
        };
        ModelParams {
            embed_w: self.embed_w.cast(),
            embed_b: self.embed_b.cast(),
            posemb: self.posemb.cast(),
            cls: self.cls.as_ref().map(Tensor::cast),
            blocks: self
                .blocks
                .iter()
                .map(|b| EncoderBlockParams {
                    ln1: ln(&b.ln1),
                    attn: AttentionParams {
                        num_heads: b.attn.num_heads,
                        wq: b.attn.wq.cast(),
                        bq: b.attn.bq.cast(),
                        wk: b.attn.wk.cast(),
                        bk: b.attn.bk.cast(),
                        wv: b.attn.wv.cast(),
                        bv: b.attn.bv.cast(),
                        wo: b.attn.wo.cast(),
                        bo: b.attn.bo.cast(),
                    },
                    ln2: ln(&b.ln2),
                    mlp: MlpParams {
                        w1: b.mlp.w1.cast(),
                        b1: b.mlp.b1.cast(),
                        w2: b.mlp.w2.cast(),
                        b2: b.mlp.b2.cast(),
                    },
                })
                .collect(),
            merger: self.merger.as_ref().map(|m| MergerParams {
                w: m.w.cast(),
                ln: ln(&m.ln),
            }),
            head_ln: ln(&self.head_ln),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }
}

impl<T: Real> ParamVisitor<T> for ModelParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}embed/W"), &self.embed_w);
        f(format!("{prefix}embed/b"), &self.embed_b);
        f(format!("{prefix}posemb"), &self.posemb);
        if let Some(c) = &self.cls {
            f(format!("{prefix}cls"), c);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}blocks/{i}/"), f);
        }
        if let Some(m) = &self.merger {
            m.visit(&format!("{prefix}merger/"), f);
        }
        self.head_ln.visit_with(&format!("{prefix}head/ln"), f);
        f(format!("{prefix}head/W"), &self.head_w);
        f(format!("{prefix}head/b"), &self.head_b);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        f(format!("{prefix}embed/W"), &mut self.embed_w);
        f(format!("{prefix}embed/b"), &mut self.embed_b);
        f(format!("{prefix}posemb"), &mut self.posemb);
        if let Some(c) = &mut self.cls {
            f(format!("{prefix}cls"), c);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}blocks/{i}/"), f);
        }
        if let Some(m) = &mut self.merger {
            m.visit_mut(&format!("{prefix}merger/"), f);
        }
        self.head_ln.visit_with_mut(&format!("{prefix}head/ln"), f);
        f(format!("{prefix}head/W"), &mut self.head_w);
        f(format!("{prefix}head/b"), &mut self.head_b);
    }
}
