use super::config::{ConvLayout, ModelConfig};
use crate::error::{shape_err, Error, Result};
use crate::nn::{
    join, BoundConvBlock, BoundLinear, BoundMhsa, ConvBlock, Initializer, Linear, MhsaBlock, Parameterized,
};
use crate::tensor::{Graph, Tensor, Var};

const CLS_INIT_STD: f64 = 0.02;

/// Everything one attention group owns: its conv branch (or patch
/// embedding), its CLS token and its attention stack.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupBranch {
    pub conv: Vec<ConvBlock>,
    pub patch: Option<Linear>,
    pub cls: Option<Tensor>,
    pub attn: Vec<MhsaBlock>,
}

pub(crate) struct BoundGroup {
    pub(crate) conv: Vec<BoundConvBlock>,
    pub(crate) patch: Option<BoundLinear>,
    pub(crate) cls: Option<Var>,
    pub(crate) attn: Vec<BoundMhsa>,
}

impl GroupBranch {
    fn new(cfg: &ModelConfig, init: &mut Initializer) -> Result<Self> {
        let d = cfg.embedding_dim;
        let mut conv = Vec::new();
        let mut patch = None;
        if cfg.ablate_conv {
            let patch_dim = cfg.in_channels * cfg.patch_size * cfg.patch_size;
            patch = Some(Linear::new(init, patch_dim, d));
        } else if cfg.conv_layout == ConvLayout::Branched {
            let mut in_c = cfg.in_channels;
            for (b, &pool) in cfg.pool_windows.iter().enumerate() {
                let k = cfg.branch_kernels(b);
                conv.push(ConvBlock::new(init, in_c, k, pool)?);
                in_c = k;
            }
        }
        let (cls, attn) = if cfg.ablate_attn {
            (None, Vec::new())
        } else {
            let cls = init.normal(&[1, d], CLS_INIT_STD);
            let attn = if cfg.shared_attention {
                Vec::new()
            } else {
                (0..cfg.attn_depth)
                    .map(|_| MhsaBlock::new(init, d, cfg.num_heads))
                    .collect::<Result<_>>()?
            };
            (Some(cls), attn)
        };
        Ok(Self { conv, patch, cls, attn })
    }

    pub(crate) fn bind(&self, g: &mut Graph) -> BoundGroup {
        BoundGroup {
            conv: self.conv.iter().map(|b| b.bind(g)).collect(),
            patch: self.patch.as_ref().map(|p| p.bind(g)),
            cls: self.cls.as_ref().map(|c| g.param(c)),
            attn: self.attn.iter().map(|b| b.bind(g)).collect(),
        }
    }
}

impl Parameterized for GroupBranch {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.conv.params(&join(prefix, "conv"), out);
        if let Some(p) = &self.patch {
            p.params(&join(prefix, "patch"), out);
        }
        if let Some(c) = &self.cls {
            out.push((join(prefix, "cls"), c));
        }
        self.attn.params(&join(prefix, "attn"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.conv.params_mut(&join(prefix, "conv"), out);
        if let Some(p) = &mut self.patch {
            p.params_mut(&join(prefix, "patch"), out);
        }
        if let Some(c) = &mut self.cls {
            out.push((join(prefix, "cls"), c));
        }
        self.attn.params_mut(&join(prefix, "attn"), out);
    }
}

/// Per-image values shared by every group evaluated on one graph.
pub(crate) struct ImageInputs {
    image: Var,
    patches: Option<Var>,
    dense_tokens: Option<Var>,
}

pub(crate) fn check_image(cfg: &ModelConfig, x: &Tensor) -> Result<()> {
    let [h, w] = cfg.input_size;
    if x.shape() != [cfg.in_channels, h, w] {
        return Err(Error::Config(format!(
            "image shape {:?} does not match configured input {:?}",
            x.shape(),
            [cfg.in_channels, h, w]
        )));
    }
    Ok(())
}

pub(crate) fn prepare_image(
    cfg: &ModelConfig,
    g: &mut Graph,
    x: &Tensor,
    backbone: &[BoundConvBlock],
) -> Result<ImageInputs> {
    check_image(cfg, x)?;
    let image = g.constant(x.clone());
    let patches = if cfg.ablate_conv {
        Some(g.patchify(image, cfg.patch_size)?)
    } else {
        None
    };
    let dense_tokens = if !cfg.ablate_conv && cfg.conv_layout == ConvLayout::Dense {
        let mut y = image;
        for b in backbone {
            y = b.apply(g, y)?;
        }
        let (k, h, w) = (g.shape(y)[0], g.shape(y)[1], g.shape(y)[2]);
        Some(g.reshape(y, &[k, h * w])?)
    } else {
        None
    };
    Ok(ImageInputs {
        image,
        patches,
        dense_tokens,
    })
}

/// Token matrix `[N, d]` of one group.
pub(crate) fn group_tokens(
    cfg: &ModelConfig,
    g: &mut Graph,
    inputs: &ImageInputs,
    group: usize,
    bound: &BoundGroup,
) -> Result<Var> {
    let n = cfg.tokens_per_group();
    let (lo, hi) = (group * n, (group + 1) * n);
    if let Some(patches) = inputs.patches {
        let rows = g.slice_rows(patches, lo, hi)?;
        let proj = bound
            .patch
            .as_ref()
            .ok_or_else(|| Error::Config("patch embedding missing for ablated conv".into()))?;
        return proj.apply(g, rows);
    }
    if let Some(tokens) = inputs.dense_tokens {
        return g.slice_rows(tokens, lo, hi);
    }
    let mut y = inputs.image;
    for b in &bound.conv {
        y = b.apply(g, y)?;
    }
    let (k, h, w) = (g.shape(y)[0], g.shape(y)[1], g.shape(y)[2]);
    g.reshape(y, &[k, h * w])
}

/// Runs the attention stack over `[CLS; tokens]` and returns the CLS row,
/// or the token mean when attention is ablated.
pub(crate) fn group_summary(g: &mut Graph, cls: Option<Var>, tokens: Option<Var>, attn: &[BoundMhsa]) -> Result<Var> {
    let Some(cls) = cls else {
        let tokens = tokens.ok_or_else(|| Error::Usage("group has neither CLS nor tokens".into()))?;
        return g.mean_rows(tokens);
    };
    let mut seq = match tokens {
        Some(t) => g.concat_rows(&[cls, t])?,
        None => cls,
    };
    for block in attn {
        seq = block.apply(g, seq)?;
    }
    if g.shape(seq)[0] == 1 {
        Ok(seq)
    } else {
        g.slice_rows(seq, 0, 1)
    }
}

/// Mean of the per-group summaries (summed in the given order), then the
/// linear head. Returns logits of shape `[1, classes]`.
pub(crate) fn aggregate_graph(g: &mut Graph, summaries: &[Var], head: &BoundLinear) -> Result<Var> {
    if summaries.is_empty() {
        return Err(Error::Usage("aggregation needs at least one CLS token".into()));
    }
    let stacked = g.concat_rows(summaries)?;
    let mean = g.mean_rows(stacked)?;
    head.apply(g, mean)
}

/// One attention group before attention: its token slice and CLS token.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGroup {
    pub index: usize,
    /// `[N, d]`; `None` for a CLS-only group.
    pub tokens: Option<Tensor>,
    /// `[1, d]`; `None` when attention is ablated.
    pub cls: Option<Tensor>,
}

impl AttentionGroup {
    pub fn num_tokens(&self) -> usize {
        self.tokens.as_ref().map_or(0, |t| t.shape()[0])
    }

    /// Length of the sequence the attention stack sees.
    pub fn sequence_len(&self) -> usize {
        self.num_tokens() + usize::from(self.cls.is_some())
    }
}

/// Splits `[M, d]` into `k_g` contiguous, equally sized row blocks.
pub fn partition_groups(embeddings: &Tensor, k_g: usize) -> Result<Vec<Tensor>> {
    let (m, d) = match *embeddings.shape() {
        [m, d] => (m, d),
        _ => return shape_err("partition_groups", embeddings.shape(), &[0, 0]),
    };
    if k_g == 0 || m % k_g != 0 {
        return Err(Error::Config(format!(
            "{m} embeddings cannot be split into {k_g} equal attention groups"
        )));
    }
    let n = m / k_g;
    (0..k_g)
        .map(|g| Tensor::new(vec![n, d], embeddings.data()[g * n * d..(g + 1) * n * d].to_vec()))
        .collect()
}

/// Final summary vector `[d]` of one group.
pub fn group_forward(group: &AttentionGroup, attn: &[MhsaBlock]) -> Result<Tensor> {
    let mut g = Graph::new();
    let cls = group.cls.as_ref().map(|c| g.constant(c.clone()));
    let tokens = group.tokens.as_ref().map(|t| g.constant(t.clone()));
    let bound: Vec<BoundMhsa> = attn.iter().map(|b| b.bind(&mut g)).collect();
    let out = group_summary(&mut g, cls, tokens, &bound)?;
    let v = g.value(out);
    v.clone().reshape(&[v.numel()])
}

/// Mean over CLS vectors (each `[d]` or `[1, d]`) followed by `head`.
pub fn aggregate_predict(cls_tokens: &[Tensor], head: &Linear) -> Result<Tensor> {
    if cls_tokens.is_empty() {
        return Err(Error::Usage("aggregation needs at least one CLS token".into()));
    }
    let mut g = Graph::new();
    let vars = cls_tokens
        .iter()
        .map(|c| {
            let row = c.clone().reshape(&[1, c.numel()])?;
            Ok(g.constant(row))
        })
        .collect::<Result<Vec<_>>>()?;
    let bound = head.bind(&mut g);
    let logits = aggregate_graph(&mut g, &vars, &bound)?;
    let v = g.value(logits);
    v.clone().reshape(&[v.numel()])
}

#[derive(Clone, Debug, PartialEq)]
pub struct HsvitModel {
    config: ModelConfig,
    /// Populated only for [`ConvLayout::Dense`].
    pub backbone: Vec<ConvBlock>,
    /// Populated only when attention is shared across groups.
    pub shared_attn: Vec<MhsaBlock>,
    pub groups: Vec<GroupBranch>,
    pub head: Linear,
}

/// A recorded single-process forward pass, kept for its backward.
pub struct ForwardPass {
    graph: Graph,
    logits: Var,
}

impl ForwardPass {
    /// Logits as `[num_classes]`.
    pub fn logits(&self) -> Tensor {
        let v = self.graph.value(self.logits);
        v.clone().reshape(&[v.numel()]).expect("numel preserved")
    }

    /// Backpropagates `dloss/dlogits` and adds parameter gradients to `model`.
    pub fn backward(mut self, model: &mut HsvitModel, dlogits: &Tensor) -> Result<()> {
        let seed = dlogits.clone().reshape(self.graph.shape(self.logits))?;
        self.graph.backward_with(&[(self.logits, &seed)])?;
        self.graph
            .accumulate_params(model.named_params_mut().into_iter().map(|(_, t)| t))
    }
}

impl HsvitModel {
    /// Builds a model with every parameter drawn from `seed`, in parameter
    /// order, so the result is a pure function of `(config, seed)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(seed);
        let d = config.embedding_dim;
        let mut backbone = Vec::new();
        if !config.ablate_conv && config.conv_layout == ConvLayout::Dense {
            let mut in_c = config.in_channels;
            for (b, &pool) in config.pool_windows.iter().enumerate() {
                let k = config.kernels_per_block[b];
                backbone.push(ConvBlock::new(&mut init, in_c, k, pool)?);
                in_c = k;
            }
        }
        let shared_attn = if config.shared_attention && !config.ablate_attn {
            (0..config.attn_depth)
                .map(|_| MhsaBlock::new(&mut init, d, config.num_heads))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let groups = (0..config.num_attention_groups)
            .map(|_| GroupBranch::new(&config, &mut init))
            .collect::<Result<_>>()?;
        let head = Linear::new(&mut init, d, config.num_classes);
        Ok(Self {
            config,
            backbone,
            shared_attn,
            groups,
            head,
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        backbone: Vec<ConvBlock>,
        shared_attn: Vec<MhsaBlock>,
        groups: Vec<GroupBranch>,
        head: Linear,
    ) -> Self {
        Self {
            config,
            backbone,
            shared_attn,
            groups,
            head,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Attention blocks applied to group `g`.
    pub fn group_attn(&self, g: usize) -> &[MhsaBlock] {
        if self.config.shared_attention {
            &self.shared_attn
        } else {
            &self.groups[g].attn
        }
    }

    /// Image-level embeddings `[M, d]`: row `i` is the flattened final
    /// feature map of kernel `i` (or the projection of patch `i` when the
    /// conv stack is ablated).
    pub fn embed_image(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let backbone: Vec<BoundConvBlock> = self.backbone.iter().map(|b| b.bind(&mut g)).collect();
        let inputs = prepare_image(&self.config, &mut g, x, &backbone)?;
        let mut parts = Vec::with_capacity(self.groups.len());
        for (i, group) in self.groups.iter().enumerate() {
            let bound = group.bind(&mut g);
            parts.push(group_tokens(&self.config, &mut g, &inputs, i, &bound)?);
        }
        let all = g.concat_rows(&parts)?;
        Ok(g.value(all).clone())
    }

    /// Partitions embeddings and attaches each group's CLS token.
    pub fn attention_groups(&self, embeddings: &Tensor) -> Result<Vec<AttentionGroup>> {
        let parts = partition_groups(embeddings, self.config.num_attention_groups)?;
        Ok(parts
            .into_iter()
            .enumerate()
            .map(|(index, tokens)| AttentionGroup {
                index,
                tokens: Some(tokens),
                cls: self.groups[index].cls.as_ref().map(|c| {
                    let mut c = c.clone();
                    c.clear_grad();
                    c
                }),
            })
            .collect())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_pass(x)?.logits())
    }

    /// Records the full pipeline on one graph: embed, partition, per-group
    /// attention, mean-pool and head.
    pub fn forward_pass(&self, x: &Tensor) -> Result<ForwardPass> {
        let mut g = Graph::new();
        let backbone: Vec<BoundConvBlock> = self.backbone.iter().map(|b| b.bind(&mut g)).collect();
        let shared: Vec<BoundMhsa> = self.shared_attn.iter().map(|b| b.bind(&mut g)).collect();
        let inputs = prepare_image(&self.config, &mut g, x, &backbone)?;
        let mut summaries = Vec::with_capacity(self.groups.len());
        for (i, group) in self.groups.iter().enumerate() {
            let bound = group.bind(&mut g);
            let tokens = group_tokens(&self.config, &mut g, &inputs, i, &bound)?;
            let attn = if self.config.shared_attention {
                &shared
            } else {
                &bound.attn
            };
            summaries.push(group_summary(&mut g, bound.cls, Some(tokens), attn)?);
        }
        let head = self.head.bind(&mut g);
        let logits = aggregate_graph(&mut g, &summaries, &head)?;
        Ok(ForwardPass { graph: g, logits })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.params("", &mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.params_mut("", &mut out);
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.clear_grad();
        }
    }
}

impl Parameterized for HsvitModel {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.backbone.params(&join(prefix, "conv"), out);
        self.shared_attn.params(&join(prefix, "attn"), out);
        self.groups.params(&join(prefix, "group"), out);
        self.head.params(&join(prefix, "head"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.backbone.params_mut(&join(prefix, "conv"), out);
        self.shared_attn.params_mut(&join(prefix, "attn"), out);
        self.groups.params_mut(&join(prefix, "group"), out);
        self.head.params_mut(&join(prefix, "head"), out);
    }
}
