use std::collections::{HashMap, VecDeque};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use super::message::{MessageKind, WorkerMessage, ENTRY_HEADER_BYTES, HEADER_BYTES};
use super::plan::{plan_partition, ExecutionMode, WorkerSpec};
use super::worker::{Aggregator, Worker};
use crate::error::{Error, Result};
use crate::model::{check_image, HsvitModel, ModelConfig};
use crate::nn::AdamW;
use crate::tensor::{ops, Tensor};

/// Bytes put on the bus, counted at the sender. Loopback traffic from
/// worker 0 to the aggregator is included.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrafficStats {
    pub forward_messages: usize,
    pub grad_messages: usize,
    /// Message and entry headers.
    pub header_bytes: usize,
    /// CLS values only.
    pub payload_bytes: usize,
}

impl TrafficStats {
    pub fn total_bytes(&self) -> usize {
        self.header_bytes + self.payload_bytes
    }

    pub fn messages(&self) -> usize {
        self.forward_messages + self.grad_messages
    }

    fn record(&mut self, msg: &WorkerMessage) {
        match msg.kind {
            MessageKind::ClsForward => self.forward_messages += 1,
            MessageKind::ClsGrad => self.grad_messages += 1,
            MessageKind::Control => {}
        }
        let values: usize = msg.payload.iter().map(|(_, v)| v.len()).sum();
        self.payload_bytes += 8 * values;
        self.header_bytes += HEADER_BYTES + ENTRY_HEADER_BYTES * msg.payload.len();
    }

    fn merge(&mut self, other: &TrafficStats) {
        self.forward_messages += other.forward_messages;
        self.grad_messages += other.grad_messages;
        self.header_bytes += other.header_bytes;
        self.payload_bytes += other.payload_bytes;
    }
}

/// Simulated transport faults, each applied to the next CLS_FORWARD sent
/// by the named worker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    DropForward { worker: usize },
    DuplicateForward { worker: usize },
}

impl Fault {
    fn worker(&self) -> usize {
        match *self {
            Fault::DropForward { worker } | Fault::DuplicateForward { worker } => worker,
        }
    }

    fn copies(fault: Option<Fault>) -> usize {
        match fault {
            None => 1,
            Some(Fault::DropForward { .. }) => 0,
            Some(Fault::DuplicateForward { .. }) => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Copy)]
enum Target<'a> {
    /// Forward only; nothing is kept.
    Infer,
    /// Forward, keeping graphs for a later [`Cluster::backward`].
    Record,
    /// Cross-entropy at the aggregator, gradients scaled by `scale`.
    Train { labels: &'a [usize], scale: f64 },
}

impl Target<'_> {
    fn keeps_graph(&self) -> bool {
        !matches!(self, Target::Infer)
    }

    fn trains(&self) -> bool {
        matches!(self, Target::Train { .. })
    }
}

#[derive(Default)]
struct Outcome {
    logits: Vec<Tensor>,
    losses: Vec<f64>,
}

/// Aggregator-side handling of one exchange once its messages are in.
fn finish_exchange(
    aggregator: &mut Aggregator,
    specs: &[WorkerSpec],
    step: u32,
    mut msgs: Vec<WorkerMessage>,
    target: Target<'_>,
    index: usize,
    out: &mut Outcome,
) -> Result<Vec<WorkerMessage>> {
    Aggregator::validate(specs, step, &mut msgs)?;
    let logits = aggregator.aggregate(step, &msgs)?;
    let grads = match target {
        Target::Train { labels, scale } => {
            let (loss, mut dlogits) = ops::softmax_cross_entropy(&logits, labels[index])?;
            dlogits.data_mut().iter_mut().for_each(|v| *v *= scale);
            out.losses.push(loss);
            aggregator.backward(&dlogits)?
        }
        Target::Record => Vec::new(),
        Target::Infer => {
            aggregator.clear_pending();
            Vec::new()
        }
    };
    out.logits.push(logits);
    Ok(grads)
}

/// `K` simulated devices holding disjoint slices of one HSViT model.
///
/// Only CLS tokens (forward) and their gradients (backward) move between
/// workers; parameters and optimizer state never leave their owner.
pub struct Cluster {
    config: ModelConfig,
    specs: Vec<WorkerSpec>,
    mode: ExecutionMode,
    workers: Vec<Worker>,
    aggregator: Aggregator,
    step: u32,
    timeout: Duration,
    traffic: TrafficStats,
    faults: Vec<Fault>,
}

impl Cluster {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

    /// Splits `model` over `k` workers. Every optimizer starts from `optimizer`.
    pub fn new(model: HsvitModel, k: usize, mode: ExecutionMode, optimizer: AdamW) -> Result<Self> {
        let specs = plan_partition(model.config(), k)?;
        let HsvitModel {
            backbone,
            shared_attn,
            groups,
            head,
            ..
        } = model.clone();
        let config = model.config().clone();
        let mut groups = groups.into_iter();
        let mut backbone = Some(backbone);
        let mut shared_attn = Some(shared_attn);
        let workers = specs
            .iter()
            .map(|spec| {
                let owned = groups.by_ref().take(spec.owned_groups.len()).collect();
                // Only a single worker may carry these; plan_partition enforces it.
                let bb = if spec.is_aggregator {
                    backbone.take().unwrap_or_default()
                } else {
                    Vec::new()
                };
                let sa = if spec.is_aggregator {
                    shared_attn.take().unwrap_or_default()
                } else {
                    Vec::new()
                };
                Worker::new(spec.clone(), config.clone(), bb, sa, owned, optimizer.clone())
            })
            .collect();
        let mut cluster = Self {
            config,
            specs,
            mode,
            workers,
            aggregator: Aggregator::new(head, optimizer),
            step: 0,
            timeout: Self::DEFAULT_TIMEOUT,
            traffic: TrafficStats::default(),
            faults: Vec::new(),
        };
        cluster.zero_grads();
        Ok(cluster)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[WorkerSpec] {
        &self.specs
    }

    pub fn num_workers(&self) -> usize {
        self.specs.len()
    }

    pub fn mode(&self) -> ExecutionMode {
        self.mode
    }

    /// How long a receiver waits for a message in concurrent mode.
    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    pub fn traffic(&self) -> TrafficStats {
        self.traffic
    }

    pub fn reset_traffic(&mut self) {
        self.traffic = TrafficStats::default();
    }

    pub fn inject_fault(&mut self, fault: Fault) {
        self.faults.push(fault);
    }

    /// Parameter paths held by each worker; the aggregator's head is
    /// listed under worker 0.
    pub fn param_paths(&self) -> Vec<Vec<String>> {
        self.workers
            .iter()
            .map(|w| {
                let mut names: Vec<String> = w.named_params().into_iter().map(|(n, _)| n).collect();
                if w.spec.is_aggregator {
                    names.extend(["head.weight".to_string(), "head.bias".to_string()]);
                }
                names
            })
            .collect()
    }

    /// Reassembles the full model from the workers' current parameters.
    pub fn to_model(&self) -> HsvitModel {
        let mut groups = Vec::with_capacity(self.config.num_attention_groups);
        let mut backbone = Vec::new();
        let mut shared = Vec::new();
        for w in &self.workers {
            groups.extend(w.groups.iter().cloned());
            backbone.extend(w.backbone.iter().cloned());
            shared.extend(w.shared_attn.iter().cloned());
        }
        HsvitModel::from_parts(
            self.config.clone(),
            backbone,
            shared,
            groups,
            self.aggregator.head.clone(),
        )
    }

    pub fn zero_grads(&mut self) {
        for w in &mut self.workers {
            for (_, p) in w.named_params_mut() {
                p.clear_grad();
            }
        }
        self.aggregator.head.weight.clear_grad();
        self.aggregator.head.bias.clear_grad();
    }

    /// Distributed forward of one image. The graphs are kept so that a
    /// following [`Cluster::backward`] can run.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut out = self.run(std::slice::from_ref(x), Target::Record)?;
        Ok(out.logits.pop().expect("one image in, one logit vector out"))
    }

    /// Distributed backward for the last [`Cluster::forward`]: the head
    /// gradient is computed on worker 0, which then sends each worker the
    /// gradients of its CLS tokens.
    pub fn backward(&mut self, dlogits: &Tensor) -> Result<()> {
        let grads = self.aggregator.backward(dlogits)?;
        let dim = self.config.embedding_dim;
        let mut encoded = Vec::with_capacity(grads.len());
        for msg in &grads {
            self.traffic.record(msg);
            encoded.push(msg.encode());
        }
        match self.mode {
            ExecutionMode::SequentialSim => {
                for (w, bytes) in self.workers.iter_mut().zip(&encoded) {
                    w.backward(&WorkerMessage::decode(bytes, dim)?)?;
                }
                Ok(())
            }
            ExecutionMode::Concurrent => std::thread::scope(|s| {
                let handles: Vec<_> = self
                    .workers
                    .iter_mut()
                    .zip(encoded)
                    .map(|(w, bytes)| s.spawn(move || w.backward(&WorkerMessage::decode(&bytes, dim)?)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("worker thread panicked"))
                    .collect::<Result<Vec<()>>>()
                    .map(|_| ())
            }),
        }
    }

    /// Logits for every image, without keeping any graph.
    pub fn predict(&mut self, images: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(self.run(images, Target::Infer)?.logits)
    }

    /// One optimizer step on a mini-batch: mean cross-entropy, one CLS
    /// exchange per image, then a local AdamW update on every worker.
    pub fn train_step(&mut self, images: &[Tensor], labels: &[usize], lr: f64) -> Result<StepMetrics> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::Usage(format!(
                "batch has {} images and {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.num_classes) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {} classes",
                self.config.num_classes
            )));
        }
        let first_step = self.step as usize;
        self.zero_grads();
        let b = images.len() as f64;
        let out = self.run(images, Target::Train { labels, scale: 1.0 / b })?;
        let loss = out.losses.iter().sum::<f64>() / b;
        let correct = out
            .logits
            .iter()
            .zip(labels)
            .filter(|(l, &y)| ops::argmax(l.data()) == y)
            .count();
        if !loss.is_finite() {
            let (worker, param) = self.first_non_finite(true).unwrap_or((0, "loss".to_string()));
            return Err(Error::NonFinite {
                step: first_step,
                worker,
                param,
            });
        }
        for w in &mut self.workers {
            w.optimizer_step(lr)?;
        }
        self.aggregator.optimizer_step(lr)?;
        if let Some((worker, param)) = self.first_non_finite(false) {
            return Err(Error::NonFinite {
                step: first_step,
                worker,
                param,
            });
        }
        Ok(StepMetrics {
            loss,
            accuracy: correct as f64 / b,
        })
    }

    /// First `(worker, path)` whose gradient (or value) is not finite.
    fn first_non_finite(&self, grads: bool) -> Option<(usize, String)> {
        let bad = |t: &Tensor| {
            if grads {
                t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite()))
            } else {
                !t.all_finite()
            }
        };
        for w in &self.workers {
            if let Some((name, _)) = w.named_params().into_iter().find(|(_, t)| bad(t)) {
                return Some((w.spec.worker_id, name));
            }
        }
        let head = &self.aggregator.head;
        if bad(&head.weight) {
            return Some((0, "head.weight".into()));
        }
        if bad(&head.bias) {
            return Some((0, "head.bias".into()));
        }
        None
    }

    fn run(&mut self, images: &[Tensor], target: Target<'_>) -> Result<Outcome> {
        for x in images {
            check_image(&self.config, x)?;
        }
        for w in &mut self.workers {
            w.clear_pending();
        }
        self.aggregator.clear_pending();
        let steps: Vec<u32> = (0..images.len())
            .map(|_| {
                let s = self.step;
                self.step = self.step.wrapping_add(1);
                s
            })
            .collect();
        match self.mode {
            ExecutionMode::SequentialSim => self.run_sequential(images, &steps, target),
            ExecutionMode::Concurrent => self.run_concurrent(images, &steps, target),
        }
    }

    fn take_fault(&mut self, worker: usize) -> Option<Fault> {
        let pos = self.faults.iter().position(|f| f.worker() == worker)?;
        Some(self.faults.remove(pos))
    }

    fn run_sequential(&mut self, images: &[Tensor], steps: &[u32], target: Target<'_>) -> Result<Outcome> {
        let dim = self.config.embedding_dim;
        let mut out = Outcome::default();
        for (i, (x, &step)) in images.iter().zip(steps).enumerate() {
            let mut bus: VecDeque<Vec<u8>> = VecDeque::new();
            for w in 0..self.workers.len() {
                let msg = self.workers[w].forward(x, step, target.keeps_graph())?;
                let fault = self.take_fault(w);
                for _ in 0..Fault::copies(fault) {
                    self.traffic.record(&msg);
                    bus.push_back(msg.encode());
                }
            }
            let msgs = bus
                .drain(..)
                .map(|b| WorkerMessage::decode(&b, dim))
                .collect::<Result<Vec<_>>>()?;
            let grads = finish_exchange(&mut self.aggregator, &self.specs, step, msgs, target, i, &mut out)?;
            for (w, msg) in self.workers.iter_mut().zip(&grads) {
                self.traffic.record(msg);
                w.backward(&WorkerMessage::decode(&msg.encode(), dim)?)?;
            }
        }
        Ok(out)
    }

    fn run_concurrent(&mut self, images: &[Tensor], steps: &[u32], target: Target<'_>) -> Result<Outcome> {
        let dim = self.config.embedding_dim;
        let timeout = self.timeout;
        let faults: Vec<Option<Fault>> = (0..self.workers.len()).map(|w| self.take_fault(w)).collect();
        let Cluster {
            workers,
            aggregator,
            specs,
            traffic,
            ..
        } = self;
        let specs: &[WorkerSpec] = specs;
        std::thread::scope(|s| {
            let (to_agg, agg_rx) = mpsc::channel::<Vec<u8>>();
            let mut inboxes = Vec::with_capacity(workers.len());
            let mut handles = Vec::with_capacity(workers.len());
            for (worker, fault) in workers.iter_mut().zip(faults) {
                let (tx, rx) = mpsc::channel::<Vec<u8>>();
                inboxes.push(tx);
                let to_agg = to_agg.clone();
                handles
                    .push(s.spawn(move || worker_loop(worker, images, steps, target, fault, to_agg, rx, timeout, dim)));
            }
            drop(to_agg);
            let agg = aggregator_loop(aggregator, specs, steps, target, &agg_rx, inboxes, timeout, dim);
            let worker_results: Vec<Result<TrafficStats>> = handles
                .into_iter()
                .map(|h| h.join().expect("worker thread panicked"))
                .collect();
            let (outcome, agg_traffic) = match agg {
                Ok(v) => v,
                Err(AggFailure::Disconnected(e)) => {
                    return Err(worker_results.into_iter().find_map(|r| r.err()).unwrap_or(e))
                }
                Err(AggFailure::Error(e)) => return Err(e),
            };
            if agg_rx.try_recv().is_ok() {
                return Err(Error::Protocol(
                    "unexpected CLS_FORWARD after the final step (duplicate message)".into(),
                ));
            }
            traffic.merge(&agg_traffic);
            for r in worker_results {
                traffic.merge(&r?);
            }
            Ok(outcome)
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn worker_loop(
    worker: &mut Worker,
    images: &[Tensor],
    steps: &[u32],
    target: Target<'_>,
    mut fault: Option<Fault>,
    to_agg: Sender<Vec<u8>>,
    inbox: Receiver<Vec<u8>>,
    timeout: Duration,
    dim: usize,
) -> Result<TrafficStats> {
    let mut stats = TrafficStats::default();
    let id = worker.spec.worker_id;
    for (x, &step) in images.iter().zip(steps) {
        let msg = worker.forward(x, step, target.keeps_graph())?;
        for _ in 0..Fault::copies(fault.take()) {
            stats.record(&msg);
            to_agg
                .send(msg.encode())
                .map_err(|_| Error::Protocol(format!("aggregator hung up before step {step}")))?;
        }
        if target.trains() {
            let bytes = match inbox.recv_timeout(timeout) {
                Ok(b) => b,
                Err(RecvTimeoutError::Timeout) => return Err(Error::Timeout { worker: id, step }),
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::Protocol(format!(
                        "aggregator hung up while worker {id} waited for step {step}"
                    )))
                }
            };
            worker.backward(&WorkerMessage::decode(&bytes, dim)?)?;
        }
    }
    Ok(stats)
}

enum AggFailure {
    /// Every worker hung up; a worker error is the better diagnosis.
    Disconnected(Error),
    Error(Error),
}

impl From<Error> for AggFailure {
    fn from(e: Error) -> Self {
        AggFailure::Error(e)
    }
}

#[allow(clippy::too_many_arguments)]
fn aggregator_loop(
    aggregator: &mut Aggregator,
    specs: &[WorkerSpec],
    steps: &[u32],
    target: Target<'_>,
    rx: &Receiver<Vec<u8>>,
    inboxes: Vec<Sender<Vec<u8>>>,
    timeout: Duration,
    dim: usize,
) -> std::result::Result<(Outcome, TrafficStats), AggFailure> {
    let mut out = Outcome::default();
    let mut stats = TrafficStats::default();
    // Without training, workers run ahead, so later steps can arrive early.
    let mut buckets: HashMap<u32, Vec<WorkerMessage>> = HashMap::new();
    for (i, &step) in steps.iter().enumerate() {
        while buckets.get(&step).map_or(0, Vec::len) < specs.len() {
            let msg = match rx.recv_timeout(timeout) {
                Ok(bytes) => WorkerMessage::decode(&bytes, dim)?,
                Err(RecvTimeoutError::Timeout) => {
                    let have = buckets.get(&step).map_or(&[][..], Vec::as_slice);
                    let missing = specs
                        .iter()
                        .map(|s| s.worker_id)
                        .find(|&w| !have.iter().any(|m| m.source as usize == w))
                        .unwrap_or(0);
                    return Err(Error::Timeout { worker: missing, step }.into());
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(AggFailure::Disconnected(Error::Protocol(format!(
                        "workers hung up before step {step} completed"
                    ))))
                }
            };
            if !steps[i..].contains(&msg.step) {
                return Err(Error::Protocol(format!(
                    "CLS_FORWARD from worker {} for unexpected step {} while at step {step}",
                    msg.source, msg.step
                ))
                .into());
            }
            let bucket = buckets.entry(msg.step).or_default();
            if bucket.iter().any(|m| m.source == msg.source) {
                return Err(Error::Protocol(format!(
                    "duplicate CLS_FORWARD from worker {} at step {}",
                    msg.source, msg.step
                ))
                .into());
            }
            bucket.push(msg);
        }
        let msgs = buckets.remove(&step).expect("bucket filled");
        let grads = finish_exchange(aggregator, specs, step, msgs, target, i, &mut out)?;
        for (tx, msg) in inboxes.iter().zip(&grads) {
            stats.record(msg);
            tx.send(msg.encode())
                .map_err(|_| Error::Protocol(format!("worker {} hung up at step {step}", msg.source)))?;
        }
    }
    Ok((out, stats))
}
