//! Closed-form forward-pass FLOPs and parameter counts for any [`ModelConfig`].
//!
//! Conventions: a multiply-add is 2 FLOPs; softmax, layer norm and GELU are
//! charged per element with the constants in [`flop_constants`]. Bias adds,
//! residual adds and positional-embedding adds are not charged. The same
//! constants drive the instrumented kernels, so the closed form can be checked
//! against an actual forward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merger::MergerConfig;
use crate::numcore::flop_constants as fc;
use crate::vit::ModelConfig;

/// FLOPs of one pre-norm encoder block over `tokens` tokens.
pub fn block_flops(tokens: u64, dim: u64, mlp_dim: u64, heads: u64) -> u64 {
    let (n, d, m) = (tokens, dim, mlp_dim);
    let projections = 4 * 2 * n * d * d;
    let attention = 2 * 2 * n * n * d;
    let mlp = 2 * 2 * n * d * m;
    let softmax = heads * n * n * (fc::SOFTMAX_PER_ELEM + fc::ATTN_SCALE_PER_ELEM);
    let norms = 2 * n * d * fc::LAYER_NORM_PER_ELEM;
    let gelu = n * m * fc::GELU_PER_ELEM;
    projections + attention + mlp + softmax + norms + gelu
}

/// FLOPs of the merger on `tokens` mergeable tokens: layer norm, score
/// projection, per-token softmax and the weighted sum.
pub fn merger_flops(tokens: u64, dim: u64, output_tokens: u64) -> u64 {
    let (n, d, m) = (tokens, dim, output_tokens);
    n * d * fc::LAYER_NORM_PER_ELEM + 2 * n * d * m + n * m * fc::SOFTMAX_PER_ELEM + 2 * m * n * d
}

/// Per-segment forward cost of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub variant: String,
    pub flops_embedding: u64,
    pub flops_blocks_pre_merge: u64,
    pub flops_merger: u64,
    pub flops_blocks_post_merge: u64,
    pub flops_head: u64,
    pub flops_forward: u64,
    pub params_total: u64,
    /// `flops_forward` over that of the reference backbone.
    pub ratio_vs_backbone: f64,
}

fn forward_flops(c: &ModelConfig) -> (u64, u64, u64, u64, u64) {
    let d = c.hidden_dim as u64;
    let np = c.num_patches() as u64;
    let embedding = 2 * np * c.patch_dim() as u64 * d;
    let block = |n: usize| block_flops(n as u64, d, c.mlp_dim as u64, c.num_heads as u64);
    let tokens = c.input_tokens();
    let (pre, merger, post, final_tokens) = match (&c.merger, c.merged_tokens()) {
        (Some(m), Some(after)) => {
            let mergeable = tokens - usize::from(c.use_cls_token && m.preserve_cls);
            (
                m.placement as u64 * block(tokens),
                merger_flops(mergeable as u64, d, m.output_tokens as u64),
                (c.depth - m.placement) as u64 * block(after),
                after,
            )
        }
        _ => (c.depth as u64 * block(tokens), 0, 0, tokens),
    };
    let head = final_tokens as u64 * d * fc::LAYER_NORM_PER_ELEM + 2 * d * c.num_classes as u64;
    (embedding, pre, merger, post, head)
}

/// Exact parameter count of [`crate::vit::ModelParams`] for `c`.
pub fn param_count(c: &ModelConfig) -> u64 {
    let d = c.hidden_dim as u64;
    let m = c.mlp_dim as u64;
    let embed = c.patch_dim() as u64 * d + d;
    let posemb = c.input_tokens() as u64 * d;
    let cls = if c.use_cls_token { d } else { 0 };
    let block = 2 * d + (4 * d * d + 4 * d) + 2 * d + (d * m + m + m * d + d);
    let merger = c.merger.map_or(0, |mc| d * mc.output_tokens as u64 + 2 * d);
    let head = 2 * d + d * c.num_classes as u64 + c.num_classes as u64;
    embed + posemb + cls + c.depth as u64 * block + merger + head
}

/// Cost of `config` with the ratio taken against `backbone`.
pub fn model_cost_vs(name: &str, config: &ModelConfig, backbone: &ModelConfig) -> Result<CostReport> {
    config.validate()?;
    backbone.validate()?;
    let (e, pre, mg, post, h) = forward_flops(config);
    let total = e + pre + mg + post + h;
    let (be, bpre, bmg, bpost, bh) = forward_flops(backbone);
    let base = be + bpre + bmg + bpost + bh;
    Ok(CostReport {
        variant: name.to_string(),
        flops_embedding: e,
        flops_blocks_pre_merge: pre,
        flops_merger: mg,
        flops_blocks_post_merge: post,
        flops_head: h,
        flops_forward: total,
        params_total: param_count(config),
        ratio_vs_backbone: total as f64 / base as f64,
    })
}

/// Cost of `config`; the backbone is the same network without a merger.
pub fn model_cost(config: &ModelConfig) -> Result<CostReport> {
    model_cost_vs("", config, &config.clone().with_merger(None))
}

/// A named network from the catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: &'static str,
    pub config: ModelConfig,
    /// Catalog name of the network the ratio is reported against.
    pub reference: &'static str,
}

impl Variant {
    pub fn cost(&self) -> Result<CostReport> {
        let reference = find_variant(self.reference)?;
        model_cost_vs(self.name, &self.config, &reference.config)
    }
}

/// JFT label-space size used for the catalog heads.
pub const CATALOG_CLASSES: usize = 18291;

fn vit(image: usize, patch: usize, dim: usize, depth: usize, heads: usize, mlp: usize) -> ModelConfig {
    ModelConfig {
        image_size: image,
        patch_size: patch,
        channels: 3,
        hidden_dim: dim,
        depth,
        num_heads: heads,
        mlp_dim: mlp,
        num_classes: CATALOG_CLASSES,
        use_cls_token: true,
        merger: None,
        pooling: None,
    }
}

const BACKBONES: [(&str, usize, usize, usize, usize, usize, usize); 7] = [
    ("S/32", 224, 32, 512, 8, 8, 2048),
    ("B/32", 224, 32, 768, 12, 12, 3072),
    ("B/16", 224, 16, 768, 12, 12, 3072),
    ("L/32", 224, 32, 1024, 24, 16, 4096),
    ("L/16", 224, 16, 1024, 24, 16, 4096),
    ("H/14", 224, 14, 1280, 32, 16, 5120),
    // 224 is not a multiple of 11: a 20x20 grid covers 220x220 of the input.
    ("H/11", 220, 11, 1280, 32, 16, 5120),
];

const MERGED: [(&str, &str, &str); 7] = [
    ("Merger-S/32", "S/32", "S/32"),
    ("Merger-B/32", "B/32", "B/32"),
    ("Merger-B/16", "B/16", "B/16"),
    ("Merger-L/32", "L/32", "L/32"),
    ("Merger-L/16", "L/16", "L/16"),
    ("Merger-H/14", "H/14", "H/14"),
    // compared against ViT-H/14, its closest standard counterpart
    ("Merger-H/11", "H/11", "H/14"),
];

/// Output tokens of every catalog merger.
pub const CATALOG_MERGED_TOKENS: usize = 8;

/// All named variants: backbones first, then their mid-network merger versions.
pub fn catalog() -> Vec<Variant> {
    let mut out: Vec<Variant> = BACKBONES
        .iter()
        .map(|&(name, img, p, d, l, h, m)| Variant {
            name,
            config: vit(img, p, d, l, h, m),
            reference: name,
        })
        .collect();
    for (name, base, reference) in MERGED {
        let backbone = out.iter().find(|v| v.name == base).expect("backbone in catalog");
        let depth = backbone.config.depth;
        let config = backbone
            .config
            .clone()
            .with_merger(Some(MergerConfig::new(depth / 2, CATALOG_MERGED_TOKENS)));
        out.push(Variant {
            name,
            config,
            reference,
        });
    }
    out
}

pub fn variant_names() -> Vec<&'static str> {
    catalog().into_iter().map(|v| v.name).collect()
}

/// Looks up a variant by name; `ViT-` prefixes are accepted.
pub fn find_variant(name: &str) -> Result<Variant> {
    let key = name.strip_prefix("ViT-").unwrap_or(name);
    let key = key.replace("Merger ViT-", "Merger-").replace("Merger-ViT-", "Merger-");
    catalog()
        .into_iter()
        .find(|v| v.name == key)
        .ok_or_else(|| {
            Error::Usage(format!(
                "unknown variant `{name}`; valid names: {}",
                variant_names().join(", ")
            ))
        })
}

/// One row of a compute/accuracy trade-off table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub name: String,
    pub flops: u64,
    pub params: u64,
    pub metric: Option<f64>,
    /// Set when metrics were supplied: no other row has both fewer-or-equal
    /// FLOPs and a higher-or-equal metric with at least one strict.
    pub on_frontier: Option<bool>,
}

/// Rows sorted by forward FLOPs. With `metrics` (one per config, higher is
/// better) each row is flagged as on or off the Pareto frontier.
pub fn pareto_table(configs: &[(String, ModelConfig)], metrics: Option<&[f64]>) -> Result<Vec<ParetoRow>> {
    if configs.is_empty() {
        return Err(Error::Usage("pareto_table needs at least one configuration".into()));
    }
    if let Some(m) = metrics {
        if m.len() != configs.len() {
            return Err(Error::Usage(format!(
                "{} metrics for {} configurations",
                m.len(),
                configs.len()
            )));
        }
    }
    let mut rows = configs
        .iter()
        .enumerate()
        .map(|(i, (name, cfg))| {
            let cost = model_cost(cfg)?;
            Ok(ParetoRow {
                name: name.clone(),
                flops: cost.flops_forward,
                params: cost.params_total,
                metric: metrics.map(|m| m[i]),
                on_frontier: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.flops.cmp(&b.flops).then_with(|| a.name.cmp(&b.name)));
    if metrics.is_some() {
        let snapshot: Vec<(u64, f64)> = rows.iter().map(|r| (r.flops, r.metric.unwrap_or(f64::NAN))).collect();
        for (i, row) in rows.iter_mut().enumerate() {
            let (f, m) = snapshot[i];
            let dominated = snapshot.iter().enumerate().any(|(j, &(fj, mj))| {
                j != i && fj <= f && mj >= m && (fj < f || mj > m)
            });
            row.on_frontier = Some(!dominated);
        }
    }
    Ok(rows)
}
