//! Acceptance suite. Prints one PASS or FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hsvit::analytics::{
    itr_hsvit, itr_hsvit_schedule, itr_mp, itr_pp, measured_itr, simulate_timeline, CostModel, Strategy,
};
use hsvit::data::make_synthetic;
use hsvit::executor::{Cluster, ExecutionMode, ENTRY_HEADER_BYTES, HEADER_BYTES};
use hsvit::model::{HsvitModel, ModelConfig, Variant};
use hsvit::nn::AdamW;
use hsvit::tensor::ops;
use hsvit::train::{evaluate_model, train_on, DataConfig, OptimizerConfig, RunConfig};
use hsvit::{Graph, Result, Tensor, Var};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

const FD_STEP: f64 = 1e-5;

/// Worst relative error over entries whose absolute error exceeds 1e-8,
/// the number of entries below that floor (where a step-1e-5 central
/// difference is noise), and the number failing both bounds.
#[derive(Clone, Copy, Default)]
struct FdStats {
    worst_rel: f64,
    entries: usize,
    floored: usize,
    failures: usize,
}

impl FdStats {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = if abs == 0.0 {
            0.0
        } else {
            abs / analytic.abs().max(numeric.abs())
        };
        self.entries += 1;
        if abs < 1e-8 {
            self.floored += 1;
            return;
        }
        self.worst_rel = self.worst_rel.max(rel);
        self.failures += usize::from(rel >= 1e-4);
    }

    fn merge(&mut self, other: FdStats) {
        self.worst_rel = self.worst_rel.max(other.worst_rel);
        self.entries += other.entries;
        self.floored += other.floored;
        self.failures += other.failures;
    }
}

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Checks every input entry of `build` against central differences of
/// `sum(r * out)` for a random `r`.
fn check_op(inputs: &[Tensor], build: &Build, rng: &mut ChaCha8Rng) -> Result<FdStats> {
    let eval = |xs: &[Tensor]| -> Result<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).clone())
    };
    let shape = eval(inputs)?.shape().to_vec();
    let r = random(&shape, rng);
    let weighted = |out: &Tensor| out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>();

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    g.backward_with(&[(out, &r)])?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| g.grad(v).map_or_else(|| vec![0.0; x.numel()], <[f64]>::to_vec))
        .collect();

    let mut stats = FdStats::default();
    let mut xs = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (e, &a) in grads.iter().enumerate() {
            let orig = xs[i].data()[e];
            xs[i].data_mut()[e] = orig + FD_STEP;
            let up = weighted(&eval(&xs)?);
            xs[i].data_mut()[e] = orig - FD_STEP;
            let down = weighted(&eval(&xs)?);
            xs[i].data_mut()[e] = orig;
            stats.record(a, (up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(stats)
}

fn gradient_suite() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut inputs = ChaCha8Rng::seed_from_u64(2);
    let mut rnd = |shape: &[usize]| random(shape, &mut inputs);
    let cases: Vec<(&str, Vec<Tensor>, Box<Build>)> = vec![
        (
            "conv2d",
            vec![rnd(&[2, 5, 5]), rnd(&[3, 2, 3, 3]), rnd(&[3])],
            Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 1, 1)),
        ),
        (
            "conv2d_strided",
            vec![rnd(&[1, 7, 7]), rnd(&[2, 1, 3, 3]), rnd(&[2])],
            Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 2, 0)),
        ),
        (
            "maxpool2d",
            vec![rnd(&[2, 4, 6])],
            Box::new(|g, v| g.maxpool2d(v[0], 2, 2)),
        ),
        ("relu", vec![rnd(&[4, 5])], Box::new(|g, v| Ok(g.relu(v[0])))),
        (
            "matmul",
            vec![rnd(&[3, 4]), rnd(&[4, 2])],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        (
            "add_row",
            vec![rnd(&[3, 5]), rnd(&[5])],
            Box::new(|g, v| g.add_row(v[0], v[1])),
        ),
        (
            "add",
            vec![rnd(&[2, 3]), rnd(&[2, 3])],
            Box::new(|g, v| g.add(v[0], v[1])),
        ),
        (
            "mul",
            vec![rnd(&[3, 3]), rnd(&[3, 3])],
            Box::new(|g, v| g.mul(v[0], v[1])),
        ),
        ("scale", vec![rnd(&[2, 4])], Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        ("transpose", vec![rnd(&[3, 5])], Box::new(|g, v| g.transpose(v[0]))),
        ("softmax", vec![rnd(&[3, 4])], Box::new(|g, v| Ok(g.softmax(v[0])))),
        ("reshape", vec![rnd(&[2, 6])], Box::new(|g, v| g.reshape(v[0], &[3, 4]))),
        (
            "slice_cols",
            vec![rnd(&[3, 6])],
            Box::new(|g, v| g.slice_cols(v[0], 1, 4)),
        ),
        (
            "slice_rows",
            vec![rnd(&[5, 2])],
            Box::new(|g, v| g.slice_rows(v[0], 2, 5)),
        ),
        (
            "concat_cols",
            vec![rnd(&[2, 3]), rnd(&[2, 1])],
            Box::new(|g, v| g.concat_cols(&[v[0], v[1], v[0]])),
        ),
        (
            "concat_rows",
            vec![rnd(&[1, 4]), rnd(&[3, 4])],
            Box::new(|g, v| g.concat_rows(&[v[1], v[0]])),
        ),
        ("mean_rows", vec![rnd(&[4, 3])], Box::new(|g, v| g.mean_rows(v[0]))),
        ("sum", vec![rnd(&[3, 2])], Box::new(|g, v| Ok(g.sum(v[0])))),
        (
            "layer_norm",
            vec![rnd(&[3, 5]), rnd(&[5]), rnd(&[5])],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        ("patchify", vec![rnd(&[2, 4, 4])], Box::new(|g, v| g.patchify(v[0], 2))),
    ];

    let mut op_stats = FdStats::default();
    let mut worst_op = "";
    for (name, inputs, build) in &cases {
        let stats = check_op(inputs, build.as_ref(), &mut rng)?;
        if stats.worst_rel >= op_stats.worst_rel {
            worst_op = name;
        }
        op_stats.merge(stats);
    }

    // Softmax cross-entropy is computed outside the graph.
    let logits = random(&[5], &mut rng);
    let (_, analytic) = ops::softmax_cross_entropy(&logits, 3)?;
    let mut ce = FdStats::default();
    for e in 0..5 {
        let mut up = logits.clone();
        up.data_mut()[e] += FD_STEP;
        let mut down = logits.clone();
        down.data_mut()[e] -= FD_STEP;
        let numeric =
            (ops::softmax_cross_entropy(&up, 3)?.0 - ops::softmax_cross_entropy(&down, 3)?.0) / (2.0 * FD_STEP);
        ce.record(analytic.data()[e], numeric);
    }

    // End to end: cross-entropy of the tiny model, every parameter entry.
    let cfg = ModelConfig::tiny(3);
    let mut model = HsvitModel::new(cfg.clone(), 5)?;
    let x = random(&[1, 8, 8], &mut rng);
    let label = 1;
    let loss = |m: &HsvitModel| -> Result<f64> { Ok(ops::softmax_cross_entropy(&m.forward(&x)?, label)?.0) };
    let pass = model.forward_pass(&x)?;
    let (_, dlogits) = ops::softmax_cross_entropy(&pass.logits(), label)?;
    pass.backward(&mut model, &dlogits)?;
    let analytic: Vec<Vec<f64>> = model
        .named_params()
        .into_iter()
        .map(|(_, t)| t.grad().map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    let mut end_to_end = FdStats::default();
    for (pi, grads) in analytic.iter().enumerate() {
        for (e, &a) in grads.iter().enumerate() {
            let orig = model.named_params()[pi].1.data()[e];
            model.named_params_mut()[pi].1.data_mut()[e] = orig + FD_STEP;
            let up = loss(&model)?;
            model.named_params_mut()[pi].1.data_mut()[e] = orig - FD_STEP;
            let down = loss(&model)?;
            model.named_params_mut()[pi].1.data_mut()[e] = orig;
            end_to_end.record(a, (up - down) / (2.0 * FD_STEP));
        }
    }

    let failures = op_stats.failures + ce.failures + end_to_end.failures;
    Ok(outcome(
        failures == 0,
        format!(
            "{} graph ops over {} entries (worst relative error {:.1e}, {worst_op}), cross-entropy {:.1e}, \
             tiny model all {} parameters {:.1e}; {} entries under the 1e-8 absolute floor, \
             {failures} out of tolerance",
            cases.len(),
            op_stats.entries,
            op_stats.worst_rel,
            ce.worst_rel,
            end_to_end.entries,
            end_to_end.worst_rel,
            op_stats.floored + ce.floored + end_to_end.floored
        ),
    ))
}

fn shape_ladder() -> Result<Outcome> {
    let table: [(Variant, usize, &[usize]); 9] = [
        (Variant::C2A2, 32, &[16, 8]),
        (Variant::C2A2, 64, &[16, 8]),
        (Variant::C2A2, 128, &[32, 8]),
        (Variant::C3A4, 32, &[16, 16, 8]),
        (Variant::C3A4, 64, &[32, 16, 8]),
        (Variant::C3A4, 128, &[32, 16, 8]),
        (Variant::C4A8, 32, &[16, 16, 8, 8]),
        (Variant::C4A8, 64, &[32, 16, 8, 8]),
        (Variant::C4A8, 128, &[64, 32, 16, 8]),
    ];
    let mut cells = 0;
    let mut mismatches = Vec::new();
    for (variant, input, extents) in table {
        let ladder = ModelConfig::preset(variant, input, 10)?.shape_ladder()?;
        let got: Vec<(usize, usize)> = ladder.blocks.iter().map(|&(_, h, w)| (h, w)).collect();
        let want: Vec<(usize, usize)> = extents.iter().map(|&e| (e, e)).collect();
        if got != want || ladder.embedding_dim != 64 {
            mismatches.push(format!("{variant}@{input}: {got:?} emb {}", ladder.embedding_dim));
        }
        cells += 1;
    }

    // Cross-check the ladder with a real forward pass through one preset.
    let cfg = ModelConfig::preset(Variant::C2A2, 32, 10)?;
    let model = HsvitModel::new(cfg.clone(), 0)?;
    let emb = model.embed_image(&Tensor::zeros(&[3, 32, 32]))?;
    if emb.shape() != [128, 64] {
        mismatches.push(format!("C2A2@32 embeddings {:?}", emb.shape()));
    }
    Ok(outcome(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("{cells} variant x input cells reproduce the expected extents, embedding 64")
        } else {
            mismatches.join("; ")
        },
    ))
}

fn equivalence_config() -> ModelConfig {
    let mut cfg = ModelConfig::tiny(3);
    cfg.kernels_per_block = vec![8, 16];
    cfg.num_attention_groups = 8;
    cfg
}

fn distributed_equivalence() -> Result<Outcome> {
    let cfg = equivalence_config();
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = HsvitModel::new(cfg.clone(), 9)?;
    let xs: Vec<Tensor> = (0..8).map(|_| random(&[1, 8, 8], &mut rng)).collect();
    let labels: Vec<usize> = (0..8).map(|i| i % 3).collect();
    let dlogits = random(&[3], &mut rng);
    let optimizer = || AdamW::new(0.01, 0.01);

    struct Run {
        logits: Vec<Tensor>,
        grads: Vec<Vec<f64>>,
        losses: Vec<f64>,
        trained: HsvitModel,
    }
    let run = |k: usize, mode: ExecutionMode| -> Result<Run> {
        let mut c = Cluster::new(model.clone(), k, mode, optimizer())?;
        let logits = c.predict(&xs)?;
        c.forward(&xs[0])?;
        c.backward(&dlogits)?;
        let grads = c
            .to_model()
            .named_params()
            .into_iter()
            .map(|(_, t)| t.grad().map(<[f64]>::to_vec).unwrap_or_default())
            .collect();
        let mut c = Cluster::new(model.clone(), k, mode, optimizer())?;
        let mut losses = Vec::new();
        for s in 0..10 {
            let at = (s % 2) * 4;
            losses.push(c.train_step(&xs[at..at + 4], &labels[at..at + 4], 0.01)?.loss);
        }
        Ok(Run {
            logits,
            grads,
            losses,
            trained: c.to_model(),
        })
    };

    let base = run(1, ExecutionMode::SequentialSim)?;
    let mut worst = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut runs = 0;
    for k in [1, 2, 4, 8] {
        for mode in [ExecutionMode::SequentialSim, ExecutionMode::Concurrent] {
            let r = run(k, mode)?;
            for (a, b) in r.logits.iter().zip(&base.logits) {
                worst.0 = worst.0.max(a.max_abs_diff(b)?);
            }
            for (a, b) in r.grads.iter().zip(&base.grads) {
                for (p, q) in a.iter().zip(b) {
                    worst.1 = worst.1.max((p - q).abs());
                }
            }
            for (a, b) in r.losses.iter().zip(&base.losses) {
                worst.2 = worst.2.max((a - b).abs());
            }
            for ((_, a), (_, b)) in r.trained.named_params().iter().zip(base.trained.named_params()) {
                worst.3 = worst.3.max(a.max_abs_diff(b)?);
            }
            runs += 1;
        }
    }
    // The K=1 reference itself must agree with the single-process model.
    for (x, l) in xs.iter().zip(&base.logits) {
        worst.0 = worst.0.max(model.forward(x)?.max_abs_diff(l)?);
    }
    let pass = worst.0 < 1e-9 && worst.1 < 1e-9 && worst.3 < 1e-9 && worst.2 < 1e-6;
    Ok(outcome(
        pass,
        format!(
            "K in {{1,2,4,8}} x 2 modes ({runs} runs): logits {:.1e}, grads {:.1e}, params after 10 steps {:.1e}, loss {:.1e}",
            worst.0, worst.1, worst.3, worst.2
        ),
    ))
}

fn itr_closed_forms() -> Result<Outcome> {
    let exact_mp = itr_mp(&CostModel::layered(4, 1.3, 2.1)) == 3.0;
    let exact_pp = itr_pp(&CostModel::pipelined(4, 4, 1.3, 2.1)) == 0.75;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let models = 300;
    let mut matched = [0usize; 3];
    let mut hsvit_trivial = 0;
    let mut schedule_matched = 0;
    let mut worst_hsvit: f64 = 0.0;
    for _ in 0..models {
        let k = rng.gen_range(1..=16);
        let s = rng.gen_range(1..=16);
        let mp = CostModel::layered(k, rng.gen_range(0.1..5.0), rng.gen_range(0.1..5.0));
        let pp = CostModel::pipelined(k, s, rng.gen_range(0.1..5.0), rng.gen_range(0.1..5.0));
        let hs = CostModel::hsvit(
            k,
            rng.gen_range(0.1..5.0),
            rng.gen_range(0.1..5.0),
            rng.gen_range(0.1..5.0),
            rng.gen_range(0.1..5.0),
        );
        let mp_measured = measured_itr(&simulate_timeline(Strategy::Mp, &mp)?)?;
        let pp_measured = measured_itr(&simulate_timeline(Strategy::Pp, &pp)?)?;
        let hs_measured = measured_itr(&simulate_timeline(Strategy::Hsvit, &hs)?)?;
        matched[0] += usize::from((mp_measured - itr_mp(&mp)).abs() < 1e-12);
        matched[1] += usize::from((pp_measured - itr_pp(&pp)).abs() < 1e-12);
        let eq = itr_hsvit(&hs)?;
        if (hs_measured - eq).abs() < 1e-12 {
            matched[2] += 1;
            hsvit_trivial += usize::from(k == 2);
        } else {
            worst_hsvit = worst_hsvit.max((hs_measured - eq).abs());
        }
        schedule_matched += usize::from((hs_measured - itr_hsvit_schedule(&hs)?).abs() < 1e-12);
    }
    let pass = exact_mp && exact_pp && matched.iter().all(|&m| m == models);
    Ok(outcome(
        pass,
        format!(
            "itr_mp(4)=3 {exact_mp}, itr_pp(4,4)=0.75 {exact_pp}; {models} random models: MP {}/{models}, PP {}/{models}, \
             HSViT {}/{models} (all at K=2: {}; worst gap {worst_hsvit:.3}); the simulated HSViT schedule matches \
             (K-1) times the HSViT closed form in {schedule_matched}/{models}",
            matched[0],
            matched[1],
            matched[2],
            hsvit_trivial == matched[2],
        ),
    ))
}

fn monotonic_scalability() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sweeps = 500;
    let mut violations = 0;
    let mut measured_grows = 0;
    for _ in 0..sweeps {
        let costs: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.01..10.0));
        let at = |k| CostModel::hsvit(k, costs[0], costs[1], costs[2], costs[3]);
        let values: Vec<f64> = (1..=16).map(|k| itr_hsvit(&at(k))).collect::<Result<_>>()?;
        violations += values.windows(2).filter(|w| w[1] > w[0]).count();
        let m2 = measured_itr(&simulate_timeline(Strategy::Hsvit, &at(2))?)?;
        let m16 = measured_itr(&simulate_timeline(Strategy::Hsvit, &at(16))?)?;
        measured_grows += usize::from(m16 > m2);
    }
    Ok(outcome(
        violations == 0,
        format!(
            "{sweeps} positive cost sweeps over K=1..16, {violations} increases; \
             measured ITR on the simulated schedule grows from K=2 to K=16 in {measured_grows}/{sweeps}"
        ),
    ))
}

/// A model of about 14k parameters on 3x32x32 inputs.
fn smoke_config(classes: usize) -> ModelConfig {
    let mut cfg = ModelConfig::tiny(classes);
    cfg.input_size = [32, 32];
    cfg.in_channels = 3;
    cfg.kernels_per_block = vec![16, 32];
    cfg.pool_windows = vec![4, 2];
    cfg.num_attention_groups = 4;
    cfg.embedding_dim = 16;
    cfg.attn_depth = 2;
    cfg.num_heads = 2;
    cfg.patch_size = 8;
    cfg
}

fn smoke_run(model: ModelConfig, classes: usize, seed: u64, out: &std::path::Path) -> RunConfig {
    RunConfig {
        seed,
        epochs: 20,
        batch_size: 16,
        workers: 1,
        mode: ExecutionMode::SequentialSim,
        output_dir: out.to_path_buf(),
        optimizer: OptimizerConfig::default(),
        model,
        data: DataConfig::Synthetic {
            num_classes: classes,
            samples: 500,
            size: 32,
            seed: 100,
        },
    }
}

fn training_smoke() -> Result<Outcome> {
    let cfg = smoke_config(2);
    cfg.validate()?;
    let params = cfg.param_count();
    let tmp = tempfile::tempdir()?;
    let mut reports = Vec::new();
    let mut csvs = Vec::new();
    for rep in 0..2 {
        let run = smoke_run(cfg.clone(), 2, 7, &tmp.path().join(format!("run{rep}")));
        let data = run.data.load()?;
        reports.push(train_on(&run, &data)?);
        csvs.push(fs::read(run.output_dir.join("metrics.csv"))?);
    }
    let first = &reports[0];
    let reached = first
        .epochs
        .iter()
        .find(|e| e.epoch > 0 && e.accuracy >= 0.9)
        .map(|e| e.epoch);
    let deterministic = csvs[0] == csvs[1] && reports[0].checkpoint_hash == reports[1].checkpoint_hash;
    Ok(outcome(
        params <= 50_000 && first.final_accuracy >= 0.9 && deterministic,
        format!(
            "{params} params, 500 samples, final train accuracy {:.3} (epoch accuracy first >= 0.9 at {}), \
             repeat run byte-identical: {deterministic}",
            first.final_accuracy,
            reached.map_or("never".to_string(), |e| e.to_string())
        ),
    ))
}

fn ablation_direction() -> Result<Outcome> {
    let tmp = tempfile::tempdir()?;
    let held_out = make_synthetic(4, 400, 32, 999)?;
    let mut acc = Vec::new();
    for (name, ablate_conv, ablate_attn) in [
        ("full", false, false),
        ("conv-only", false, true),
        ("attention-only", true, false),
    ] {
        let mut cfg = smoke_config(4);
        cfg.ablate_conv = ablate_conv;
        cfg.ablate_attn = ablate_attn;
        cfg.validate()?;
        let run = smoke_run(cfg, 4, 11, &tmp.path().join(name));
        let data = run.data.load()?;
        let report = train_on(&run, &data)?;
        let (model, _) = hsvit::checkpoint::load(&report.checkpoint_dir)?;
        acc.push((
            name,
            evaluate_model(&model, &held_out, 1, ExecutionMode::SequentialSim)?,
        ));
    }
    let (full, conv, attn) = (acc[0].1, acc[1].1, acc[2].1);
    let detail = acc
        .iter()
        .map(|(n, a)| format!("{n} {a:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(outcome(
        full >= conv && conv >= attn,
        format!("held-out accuracy after 20 epochs: {detail}"),
    ))
}

fn communication_minimality() -> Result<Outcome> {
    let cfg = ModelConfig::preset(Variant::C2A2, 32, 10)?;
    let (kg, d) = (cfg.num_attention_groups, cfg.embedding_dim);
    let model = HsvitModel::new(cfg, 13)?;
    let x = random(&[3, 32, 32], &mut ChaCha8Rng::seed_from_u64(6));
    let payload = 2 * kg * d * 8;
    let mut lines = Vec::new();
    let mut pass = true;
    for k in [1, 2, 4, 8, 16] {
        let mut c = Cluster::new(model.clone(), k, ExecutionMode::Concurrent, AdamW::default())?;
        c.train_step(std::slice::from_ref(&x), &[4], 1e-3)?;
        let t = c.traffic();
        let headers = 2 * k * HEADER_BYTES + 2 * kg * ENTRY_HEADER_BYTES;
        pass &= t.payload_bytes == payload && t.header_bytes == headers && t.total_bytes() == payload + headers;
        lines.push(format!("K={k} {}+{}", t.payload_bytes, t.header_bytes));
    }
    Ok(outcome(
        pass,
        format!(
            "C2A2@32, payload must be {payload} bytes per step: {}",
            lines.join(", ")
        ),
    ))
}

type Criterion = (&'static str, fn() -> Result<Outcome>);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("gradient suite", gradient_suite),
        ("shape ladder", shape_ladder),
        ("distributed equivalence", distributed_equivalence),
        ("ITR closed forms", itr_closed_forms),
        ("monotonic scalability", monotonic_scalability),
        ("training smoke", training_smoke),
        ("ablation direction", ablation_direction),
        ("communication minimality", communication_minimality),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = run();
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match result {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failures += usize::from(!pass);
        println!(
            "{} criterion {}: {name} [{secs:.1}s] {detail}",
            if pass { "PASS" } else { "FAIL" },
            i + 1
        );
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
