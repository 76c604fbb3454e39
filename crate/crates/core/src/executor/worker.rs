use super::message::{MessageKind, WorkerMessage};
use super::plan::WorkerSpec;
use crate::error::{Error, Result};
use crate::model::{aggregate_graph, group_summary, group_tokens, prepare_image, GroupBranch, ModelConfig};
use crate::nn::{join, AdamW, BoundConvBlock, BoundMhsa, ConvBlock, Linear, MhsaBlock, Parameterized};
use crate::tensor::{Graph, Tensor, Var};

struct Pending {
    step: u32,
    graph: Graph,
    summaries: Vec<Var>,
}

/// One simulated device: its groups' conv branches, CLS tokens and
/// attention stacks, plus an optimizer over exactly those parameters.
pub(crate) struct Worker {
    pub(crate) spec: WorkerSpec,
    config: ModelConfig,
    pub(crate) backbone: Vec<ConvBlock>,
    pub(crate) shared_attn: Vec<MhsaBlock>,
    pub(crate) groups: Vec<GroupBranch>,
    pub(crate) optimizer: AdamW,
    pending: Option<Pending>,
}

impl Worker {
    pub(crate) fn new(
        spec: WorkerSpec,
        config: ModelConfig,
        backbone: Vec<ConvBlock>,
        shared_attn: Vec<MhsaBlock>,
        groups: Vec<GroupBranch>,
        optimizer: AdamW,
    ) -> Self {
        Self {
            spec,
            config,
            backbone,
            shared_attn,
            groups,
            optimizer,
            pending: None,
        }
    }

    pub(crate) fn id(&self) -> u16 {
        self.spec.worker_id as u16
    }

    /// Computes this worker's CLS tokens for one image. With `record`, the
    /// graph is kept for the matching gradient message.
    pub(crate) fn forward(&mut self, x: &Tensor, step: u32, record: bool) -> Result<WorkerMessage> {
        let mut g = Graph::new();
        let backbone: Vec<BoundConvBlock> = self.backbone.iter().map(|b| b.bind(&mut g)).collect();
        let shared: Vec<BoundMhsa> = self.shared_attn.iter().map(|b| b.bind(&mut g)).collect();
        let inputs = prepare_image(&self.config, &mut g, x, &backbone)?;
        let mut summaries = Vec::with_capacity(self.groups.len());
        let mut payload = Vec::with_capacity(self.groups.len());
        for (local, group) in self.groups.iter().enumerate() {
            let index = self.spec.owned_groups.start + local;
            let bound = group.bind(&mut g);
            let tokens = group_tokens(&self.config, &mut g, &inputs, index, &bound)?;
            let attn = if self.config.shared_attention {
                &shared
            } else {
                &bound.attn
            };
            let s = group_summary(&mut g, bound.cls, Some(tokens), attn)?;
            payload.push((index as u16, g.value(s).data().to_vec()));
            summaries.push(s);
        }
        self.pending = record.then_some(Pending {
            step,
            graph: g,
            summaries,
        });
        Ok(WorkerMessage {
            kind: MessageKind::ClsForward,
            source: self.id(),
            step,
            payload,
        })
    }

    /// Backpropagates the CLS gradients in `msg` through the recorded graph
    /// and adds the result to this worker's parameter gradients.
    pub(crate) fn backward(&mut self, msg: &WorkerMessage) -> Result<()> {
        if msg.kind != MessageKind::ClsGrad {
            return Err(Error::Protocol(format!(
                "worker {} expected a CLS gradient, got {:?}",
                self.spec.worker_id, msg.kind
            )));
        }
        let pending = match self.pending.take() {
            Some(p) if p.step == msg.step => p,
            Some(p) => {
                return Err(Error::Protocol(format!(
                    "worker {} got gradients for step {} while holding step {}",
                    self.spec.worker_id, msg.step, p.step
                )))
            }
            None => {
                return Err(Error::Protocol(format!(
                    "worker {} got gradients for step {} without a matching forward",
                    self.spec.worker_id, msg.step
                )))
            }
        };
        let expected: Vec<u16> = self.spec.owned_groups.clone().map(|g| g as u16).collect();
        let got: Vec<u16> = msg.payload.iter().map(|(g, _)| *g).collect();
        if got != expected {
            return Err(Error::Protocol(format!(
                "worker {} owns groups {expected:?} but received gradients for {got:?}",
                self.spec.worker_id
            )));
        }
        let mut graph = pending.graph;
        let seeds = msg
            .payload
            .iter()
            .map(|(_, v)| Tensor::new(vec![1, v.len()], v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let pairs: Vec<(Var, &Tensor)> = pending.summaries.iter().copied().zip(seeds.iter()).collect();
        graph.backward_with(&pairs)?;
        graph.accumulate_params(self.named_params_mut().into_iter().map(|(_, t)| t))
    }

    pub(crate) fn clear_pending(&mut self) {
        self.pending = None;
    }

    pub(crate) fn optimizer_step(&mut self, lr: f64) -> Result<()> {
        let mut params = Vec::new();
        self.backbone.params_mut("conv", &mut params);
        self.shared_attn.params_mut("attn", &mut params);
        let start = self.spec.owned_groups.start;
        for (local, group) in self.groups.iter_mut().enumerate() {
            group.params_mut(&format!("group.{}", start + local), &mut params);
        }
        self.optimizer.lr = lr;
        self.optimizer.step(params.into_iter().map(|(_, t)| t))
    }

    pub(crate) fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.params("", &mut out);
        out
    }

    pub(crate) fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.params_mut("", &mut out);
        out
    }
}

/// Parameter names match the full model's, with global group indices.
impl Parameterized for Worker {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.backbone.params(&join(prefix, "conv"), out);
        self.shared_attn.params(&join(prefix, "attn"), out);
        for (local, group) in self.groups.iter().enumerate() {
            let index = self.spec.owned_groups.start + local;
            group.params(&join(prefix, &format!("group.{index}")), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.backbone.params_mut(&join(prefix, "conv"), out);
        self.shared_attn.params_mut(&join(prefix, "attn"), out);
        let start = self.spec.owned_groups.start;
        for (local, group) in self.groups.iter_mut().enumerate() {
            group.params_mut(&join(prefix, &format!("group.{}", start + local)), out);
        }
    }
}

struct AggPending {
    step: u32,
    graph: Graph,
    /// Leaf vars of each worker's CLS tokens, in worker order.
    cls: Vec<Vec<(u16, Var)>>,
    logits: Var,
}

/// The head, living on worker 0.
pub(crate) struct Aggregator {
    pub(crate) head: Linear,
    pub(crate) optimizer: AdamW,
    pending: Option<AggPending>,
}

impl Aggregator {
    pub(crate) fn new(head: Linear, optimizer: AdamW) -> Self {
        Self {
            head,
            optimizer,
            pending: None,
        }
    }

    /// Checks that `msgs` hold exactly one CLS_FORWARD per worker for
    /// `step`, each covering that worker's groups, and sorts them by worker.
    pub(crate) fn validate(specs: &[WorkerSpec], step: u32, msgs: &mut [WorkerMessage]) -> Result<()> {
        msgs.sort_by_key(|m| m.source);
        for (i, pair) in msgs.windows(2).enumerate() {
            if pair[0].source == pair[1].source {
                return Err(Error::Protocol(format!(
                    "duplicate CLS_FORWARD from worker {} at step {step} (message {})",
                    pair[0].source,
                    i + 1
                )));
            }
        }
        for spec in specs {
            let Some(msg) = msgs.iter().find(|m| m.source as usize == spec.worker_id) else {
                return Err(Error::Protocol(format!(
                    "missing CLS_FORWARD from worker {} at step {step}",
                    spec.worker_id
                )));
            };
            if msg.kind != MessageKind::ClsForward || msg.step != step {
                return Err(Error::Protocol(format!(
                    "worker {} sent {:?} for step {}, expected CLS_FORWARD for step {step}",
                    spec.worker_id, msg.kind, msg.step
                )));
            }
            let groups: Vec<usize> = msg.payload.iter().map(|(g, _)| *g as usize).collect();
            if groups != spec.owned_groups.clone().collect::<Vec<_>>() {
                return Err(Error::Protocol(format!(
                    "worker {} sent groups {groups:?} but owns {:?}",
                    spec.worker_id, spec.owned_groups
                )));
            }
        }
        if msgs.len() != specs.len() {
            return Err(Error::Protocol(format!(
                "{} CLS_FORWARD messages from unknown workers at step {step}",
                msgs.len() - specs.len()
            )));
        }
        Ok(())
    }

    /// Mean-pools the CLS tokens in worker order and applies the head.
    /// Returns logits `[num_classes]`.
    pub(crate) fn aggregate(&mut self, step: u32, msgs: &[WorkerMessage]) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut cls = Vec::with_capacity(msgs.len());
        let mut rows = Vec::new();
        for msg in msgs {
            let vars = msg
                .payload
                .iter()
                .map(|(group, v)| Ok((*group, g.leaf(Tensor::new(vec![1, v.len()], v.clone())?, true))))
                .collect::<Result<Vec<_>>>()?;
            rows.extend(vars.iter().map(|&(_, v)| v));
            cls.push(vars);
        }
        let head = self.head.bind(&mut g);
        let logits = aggregate_graph(&mut g, &rows, &head)?;
        let out = g.value(logits).clone();
        self.pending = Some(AggPending {
            step,
            graph: g,
            cls,
            logits,
        });
        out.reshape(&[self.head.out_features()])
    }

    /// Backpropagates `dlogits` into the head and returns one CLS_GRAD
    /// message per worker, in worker order.
    pub(crate) fn backward(&mut self, dlogits: &Tensor) -> Result<Vec<WorkerMessage>> {
        let pending = self
            .pending
            .take()
            .ok_or_else(|| Error::Protocol("aggregator backward without a matching forward".into()))?;
        let mut graph = pending.graph;
        let seed = dlogits.clone().reshape(graph.shape(pending.logits))?;
        graph.backward_with(&[(pending.logits, &seed)])?;
        graph.accumulate_params([&mut self.head.weight, &mut self.head.bias])?;
        let mut out = Vec::with_capacity(pending.cls.len());
        for vars in &pending.cls {
            let payload = vars
                .iter()
                .map(|&(group, v)| {
                    let grad = graph
                        .grad(v)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; graph.value(v).numel()]);
                    (group, grad)
                })
                .collect();
            out.push(WorkerMessage {
                kind: MessageKind::ClsGrad,
                source: 0,
                step: pending.step,
                payload,
            });
        }
        Ok(out)
    }

    pub(crate) fn clear_pending(&mut self) {
        self.pending = None;
    }

    pub(crate) fn optimizer_step(&mut self, lr: f64) -> Result<()> {
        self.optimizer.lr = lr;
        self.optimizer.step([&mut self.head.weight, &mut self.head.bias])
    }
}
