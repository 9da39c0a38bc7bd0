use super::block::{encoder_block_backward, encoder_block_batch, BlockCache};
use super::config::{ModelConfig, Pooling};
use super::params::ModelParams;
use super::patch::{patchify_into, resize_posemb};
use crate::error::{Error, Result};
use crate::merger::{merge_batch, merge_batch_backward, MergeCache};
use crate::numcore::{
    bias_grad_rows, gemm, layer_norm, layer_norm_backward, linear, LayerNormCache, MatRef, Real,
    Tensor, LN_EPS,
};

/// A configured model and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

/// Everything the backward pass needs, plus a trace of the token counts.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    batch: usize,
    patches: Tensor<T>,
    posemb_resized: bool,
    input_tokens: usize,
    blocks: Vec<BlockCache<T>>,
    tokens_per_block: Vec<usize>,
    merger: Option<MergeCache<T>>,
    head_ln: LayerNormCache<T>,
    final_tokens: usize,
    pooling: Pooling,
    pooled: Tensor<T>,
    all_finite: bool,
}

impl<T: Real> ForwardCache<T> {
    /// Token count entering each block.
    pub fn tokens_per_block(&self) -> &[usize] {
        &self.tokens_per_block
    }

    /// Tokens seen by the classifier head.
    pub fn final_tokens(&self) -> usize {
        self.final_tokens
    }

    pub fn input_tokens(&self) -> usize {
        self.input_tokens
    }

    /// True when every intermediate activation was finite.
    pub fn all_finite(&self) -> bool {
        self.all_finite
    }

    pub fn blocks(&self) -> &[BlockCache<T>] {
        &self.blocks
    }

    pub fn merger(&self) -> Option<&MergeCache<T>> {
        self.merger.as_ref()
    }
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        if params.blocks.len() != config.depth
            || params.merger.is_some() != config.merger.is_some()
            || params.posemb.cols() != config.hidden_dim
        {
            return Err(Error::config("parameters do not match the model configuration"));
        }
        Ok(Self { config, params })
    }

    pub fn init(config: ModelConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        let params = ModelParams::init(&config, rng)?;
        Ok(Self { config, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Re-targets the model to a new input resolution, resizing the
    /// positional embeddings so the new grid trains like the original.
    pub fn adapt_to_image_size(&mut self, image_size: usize) -> Result<()> {
        let mut config = self.config.clone();
        config.image_size = image_size;
        config.validate()?;
        self.params.posemb =
            resize_posemb(&self.params.posemb, config.use_cls_token, config.grid())?;
        self.config = config;
        Ok(())
    }

    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_cached(images).map(|(logits, _)| logits)
    }

    /// Forward pass over `[batch, H, W, C]` images, returning `[batch, classes]` logits.
    pub fn forward_cached(&self, images: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let cfg = &self.config;
        let p = &self.params;
        let (batch, h, w, c) = match *images.shape() {
            [b, h, w, c] => (b, h, w, c),
            _ => return Err(Error::config(format!("expected [B,H,W,C] images, got {:?}", images.shape()))),
        };
        let ps = cfg.patch_size;
        if c != cfg.channels || h != w || h % ps != 0 || batch == 0 {
            return Err(Error::config(format!(
                "images {h}x{w}x{c} incompatible with patch size {ps} and {} channels",
                cfg.channels
            )));
        }
        let grid = h / ps;
        let np = grid * grid;
        let lead = cfg.cls_tokens();
        let t0 = np + lead;
        let d = cfg.hidden_dim;

        let mut patch_data = Vec::with_capacity(images.len());
        for img in images.data().chunks(h * w * c) {
            patchify_into(img, h, w, c, ps, &mut patch_data);
        }
        let patches = Tensor::new(vec![batch * np, cfg.patch_dim()], patch_data)?;
        let mut embedded = Tensor::zeros(&[batch * np, d]);
        linear(patches.data(), batch * np, &p.embed_w, &p.embed_b, embedded.data_mut());

        let resized_storage;
        let posemb_resized = p.posemb.rows() != t0;
        let posemb = if posemb_resized {
            resized_storage = resize_posemb(&p.posemb, cfg.use_cls_token, grid)?;
            &resized_storage
        } else {
            &p.posemb
        };

        let mut x = Tensor::zeros(&[batch * t0, d]);
        for b in 0..batch {
            if let Some(cls) = &p.cls {
                let row = x.row_mut(b * t0);
                for j in 0..d {
                    row[j] = cls.data()[j] + posemb.at(0, j);
                }
            }
            for i in 0..np {
                let src = embedded.row(b * np + i);
                let pe = posemb.row(lead + i);
                let dst = x.row_mut(b * t0 + lead + i);
                for j in 0..d {
                    dst[j] = src[j] + pe[j];
                }
            }
        }

        let mut all_finite = x.is_finite();
        let mut tokens = t0;
        let mut blocks = Vec::with_capacity(cfg.depth);
        let mut tokens_per_block = Vec::with_capacity(cfg.depth);
        let mut merger_cache = None;
        for (l, bp) in p.blocks.iter().enumerate() {
            tokens_per_block.push(tokens);
            let (y, cache) = encoder_block_batch(&x, batch, tokens, bp)?;
            blocks.push(cache);
            x = y;
            all_finite &= x.is_finite();
            if let (Some(mc), Some(mp)) = (&cfg.merger, &p.merger) {
                if l + 1 == mc.placement {
                    let keep_cls = cfg.use_cls_token && mc.preserve_cls;
                    let (y, cache) = merge_batch(&x, batch, tokens, mp, keep_cls)?;
                    tokens = mc.output_tokens + usize::from(keep_cls);
                    merger_cache = Some(cache);
                    x = y;
                    all_finite &= x.is_finite();
                }
            }
        }

        let (normed, head_ln) = layer_norm(&x, &p.head_ln.gamma, &p.head_ln.beta, T::lit(LN_EPS))?;
        let pooling = cfg.pooling();
        let mut pooled = Tensor::zeros(&[batch, d]);
        for b in 0..batch {
            let dst = pooled.row_mut(b);
            match pooling {
                Pooling::Cls => dst.copy_from_slice(normed.row(b * tokens)),
                Pooling::Mean => {
                    let inv = T::one() / T::lit(tokens as f64);
                    for r in 0..tokens {
                        for (o, &v) in dst.iter_mut().zip(normed.row(b * tokens + r)) {
                            *o += v * inv;
                        }
                    }
                }
            }
        }
        let mut logits = Tensor::zeros(&[batch, cfg.num_classes]);
        linear(pooled.data(), batch, &p.head_w, &p.head_b, logits.data_mut());
        all_finite &= logits.is_finite();
        logits.ensure_finite("model forward")?;

        Ok((
            logits,
            ForwardCache {
                batch,
                patches,
                posemb_resized,
                input_tokens: t0,
                blocks,
                tokens_per_block,
                merger: merger_cache,
                head_ln,
                final_tokens: tokens,
                pooling,
                pooled,
                all_finite,
            },
        ))
    }

    /// Gradients of the loss w.r.t. every parameter, given `dlogits`.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &Tensor<T>) -> Result<ModelParams<T>> {
        if cache.posemb_resized {
            return Err(Error::config(
                "backward through resized positional embeddings; call adapt_to_image_size first",
            ));
        }
        let cfg = &self.config;
        let p = &self.params;
        let batch = cache.batch;
        let d = cfg.hidden_dim;
        if dlogits.shape() != [batch, cfg.num_classes] {
            return Err(Error::shape("backward", dlogits.shape(), &[batch, cfg.num_classes]));
        }
        let mut g = p.zeros_like();

        gemm(T::one(), cache.pooled.mat().t(), dlogits.mat(), T::one(), g.head_w.mat_mut());
        bias_grad_rows(dlogits.data(), g.head_b.data_mut());
        let mut dpooled = Tensor::zeros(&[batch, d]);
        gemm(T::one(), dlogits.mat(), p.head_w.mat().t(), T::zero(), dpooled.mat_mut());

        let tokens = cache.final_tokens;
        let mut dnormed = Tensor::zeros(&[batch * tokens, d]);
        for b in 0..batch {
            match cache.pooling {
                Pooling::Cls => dnormed.row_mut(b * tokens).copy_from_slice(dpooled.row(b)),
                Pooling::Mean => {
                    let inv = T::one() / T::lit(tokens as f64);
                    for r in 0..tokens {
                        for (o, &v) in dnormed.row_mut(b * tokens + r).iter_mut().zip(dpooled.row(b)) {
                            *o = v * inv;
                        }
                    }
                }
            }
        }
        let (mut dx, dg, db) = layer_norm_backward(&cache.head_ln, &p.head_ln.gamma, &dnormed)?;
        g.head_ln.gamma.add_assign(&dg)?;
        g.head_ln.beta.add_assign(&db)?;

        for l in (0..cfg.depth).rev() {
            if let (Some(mc), Some(mp), Some(mcache)) = (&cfg.merger, &p.merger, &cache.merger) {
                if l + 1 == mc.placement {
                    let gm = g.merger.as_mut().expect("merger gradient slot");
                    dx = merge_batch_backward(mcache, mp, &dx, gm)?;
                }
            }
            dx = encoder_block_backward(&cache.blocks[l], &p.blocks[l], &dx, &mut g.blocks[l])?;
        }

        let t0 = cache.input_tokens;
        let lead = cfg.cls_tokens();
        let np = t0 - lead;
        let mut dembedded = Tensor::zeros(&[batch * np, d]);
        for b in 0..batch {
            for r in 0..t0 {
                let src = dx.row(b * t0 + r);
                for (o, &v) in g.posemb.row_mut(r).iter_mut().zip(src) {
                    *o += v;
                }
            }
            if let Some(gc) = &mut g.cls {
                for (o, &v) in gc.data_mut().iter_mut().zip(dx.row(b * t0)) {
                    *o += v;
                }
            }
            for i in 0..np {
                dembedded.row_mut(b * np + i).copy_from_slice(dx.row(b * t0 + lead + i));
            }
        }
        let pd = cfg.patch_dim();
        gemm(
            T::one(),
            MatRef::new(cache.patches.data(), batch * np, pd).t(),
            dembedded.mat(),
            T::one(),
            g.embed_w.mat_mut(),
        );
        bias_grad_rows(dembedded.data(), g.embed_b.data_mut());
        Ok(g)
    }
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (b, c) = (logits.rows(), logits.cols());
    if labels.len() != b {
        return Err(Error::shape("cross_entropy", logits.shape(), &[labels.len()]));
    }
    let mut grad = logits.clone();
    let mut loss = T::zero();
    let inv_b = T::one() / T::lit(b as f64);
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::config(format!("label {y} out of range for {c} classes")));
        }
        let row = grad.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        loss += sum.ln() - (logits.at(r, y) - max);
        for v in row.iter_mut() {
            *v = *v / sum * inv_b;
        }
        row[y] -= inv_b;
    }
    Ok((loss * inv_b, grad))
}

/// Fraction of rows whose arg-max matches the label.
pub fn accuracy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| {
            let row = logits.row(r);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(std::cmp::Ordering::Equal))
                .unwrap_or(0);
            best == y
        })
        .count();
    correct as f64 / labels.len().max(1) as f64
}
