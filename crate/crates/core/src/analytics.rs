//! Idle-time ratios (ITR) of model parallelism, pipeline parallelism and
//! HSViT, both in closed form and measured on simulated GPU timelines.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Per-GPU operation times. `t_f`/`t_b` apply to MP and PP (per layer, or
/// per layer and microbatch for PP); the `*_sub` and `*_agg` times apply to
/// HSViT submodules and the aggregation on GPU 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostModel {
    pub t_f: f64,
    pub t_b: f64,
    pub k: usize,
    pub s: usize,
    pub t_f_sub: f64,
    pub t_b_sub: f64,
    pub t_f_agg: f64,
    pub t_b_agg: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            t_f: 1.0,
            t_b: 1.0,
            k: 1,
            s: 1,
            t_f_sub: 1.0,
            t_b_sub: 1.0,
            t_f_agg: 0.0,
            t_b_agg: 0.0,
        }
    }
}

impl CostModel {
    pub fn layered(k: usize, t_f: f64, t_b: f64) -> Self {
        Self {
            k,
            t_f,
            t_b,
            ..Self::default()
        }
    }

    pub fn pipelined(k: usize, s: usize, t_f: f64, t_b: f64) -> Self {
        Self {
            k,
            s,
            t_f,
            t_b,
            ..Self::default()
        }
    }

    pub fn hsvit(k: usize, t_f_sub: f64, t_b_sub: f64, t_f_agg: f64, t_b_agg: f64) -> Self {
        Self {
            k,
            t_f_sub,
            t_b_sub,
            t_f_agg,
            t_b_agg,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.s == 0 {
            return Err(Error::Config(format!("K={} and S={} must be positive", self.k, self.s)));
        }
        let times = [
            ("t_f", self.t_f),
            ("t_b", self.t_b),
            ("t_f_sub", self.t_f_sub),
            ("t_b_sub", self.t_b_sub),
            ("t_f_agg", self.t_f_agg),
            ("t_b_agg", self.t_b_agg),
        ];
        if let Some((name, v)) = times.iter().find(|(_, v)| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("{name} = {v} must be finite and non-negative")));
        }
        Ok(())
    }
}

/// Model parallelism: `K - 1`.
pub fn itr_mp(cost: &CostModel) -> f64 {
    cost.k as f64 - 1.0
}

/// Pipeline parallelism with `S` microbatches: `(K - 1) / S`.
pub fn itr_pp(cost: &CostModel) -> f64 {
    (cost.k as f64 - 1.0) / cost.s as f64
}

/// HSViT: `(T_f_agg + T_b_agg) / (K T_f_sub + T_f_agg + T_b_agg + K T_b_sub)`.
pub fn itr_hsvit(cost: &CostModel) -> Result<f64> {
    cost.validate()?;
    let k = cost.k as f64;
    let agg = cost.t_f_agg + cost.t_b_agg;
    let denom = cost.t_f_sub * k + cost.t_f_agg + cost.t_b_agg + cost.t_b_sub * k;
    if denom == 0.0 {
        return Err(Error::Config("all HSViT costs are zero; the ratio is undefined".into()));
    }
    Ok(agg / denom)
}

/// Idle ratio implied by the HSViT schedule itself: while GPU 0 runs the
/// aggregation, the other `K - 1` GPUs wait.
pub fn itr_hsvit_schedule(cost: &CostModel) -> Result<f64> {
    let eq = itr_hsvit(cost)?;
    Ok((cost.k as f64 - 1.0) * eq)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Mp,
    Pp,
    Hsvit,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mp" => Ok(Strategy::Mp),
            "pp" => Ok(Strategy::Pp),
            "hsvit" => Ok(Strategy::Hsvit),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?}; use mp, pp or hsvit"
            ))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Mp => "mp",
            Strategy::Pp => "pp",
            Strategy::Hsvit => "hsvit",
        })
    }
}

/// The closed form for `strategy`.
pub fn closed_form_itr(strategy: Strategy, cost: &CostModel) -> Result<f64> {
    cost.validate()?;
    match strategy {
        Strategy::Mp => Ok(itr_mp(cost)),
        Strategy::Pp => Ok(itr_pp(cost)),
        Strategy::Hsvit => itr_hsvit(cost),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Forward,
    Backward,
    Idle,
}

impl CellKind {
    fn as_str(self) -> &'static str {
        match self {
            CellKind::Forward => "forward",
            CellKind::Backward => "backward",
            CellKind::Idle => "idle",
        }
    }

    fn glyph(self) -> char {
        match self {
            CellKind::Forward => 'F',
            CellKind::Backward => 'B',
            CellKind::Idle => '.',
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub start: f64,
    pub duration: f64,
    pub kind: CellKind,
    /// e.g. `F1,0` (layer 1, microbatch 0) or `Fagg`.
    pub tag: String,
}

/// Per-GPU cell sequences covering `[0, makespan]` without gaps.
#[derive(Clone, Debug, PartialEq)]
pub struct Timeline {
    lanes: Vec<Vec<Cell>>,
    makespan: f64,
}

impl Timeline {
    pub fn lanes(&self) -> &[Vec<Cell>] {
        &self.lanes
    }

    pub fn num_gpus(&self) -> usize {
        self.lanes.len()
    }

    pub fn makespan(&self) -> f64 {
        self.makespan
    }

    fn total(&self, pred: impl Fn(CellKind) -> bool) -> f64 {
        self.lanes
            .iter()
            .flatten()
            .filter(|c| pred(c.kind))
            .map(|c| c.duration)
            .sum()
    }

    pub fn busy_time(&self) -> f64 {
        self.total(|k| k != CellKind::Idle)
    }

    pub fn idle_time(&self) -> f64 {
        self.total(|k| k == CellKind::Idle)
    }

    pub fn lane_busy(&self, gpu: usize) -> f64 {
        self.lanes[gpu]
            .iter()
            .filter(|c| c.kind != CellKind::Idle)
            .map(|c| c.duration)
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("gpu,start,duration,kind,tag\n");
        for (gpu, lane) in self.lanes.iter().enumerate() {
            for c in lane {
                writeln!(out, "{gpu},{},{},{},{}", c.start, c.duration, c.kind.as_str(), c.tag)
                    .expect("writing to a String");
            }
        }
        out
    }

    /// One row per GPU, `width` columns spanning the makespan; `F`, `B`
    /// and `.` for forward, backward and idle.
    pub fn render_text(&self, width: usize) -> String {
        let mut out = String::new();
        let width = width.max(1);
        for (gpu, lane) in self.lanes.iter().enumerate() {
            let row: String = (0..width)
                .map(|col| {
                    let t = (col as f64 + 0.5) * self.makespan / width as f64;
                    lane.iter()
                        .find(|c| t >= c.start && t < c.start + c.duration)
                        .map_or(' ', |c| c.kind.glyph())
                })
                .collect();
            writeln!(out, "GPU{gpu:<2} |{row}|").expect("writing to a String");
        }
        out
    }
}

/// A unit of work bound to one GPU that may start once `deps` finish and
/// the GPU has finished its previously listed task.
struct Task {
    gpu: usize,
    duration: f64,
    kind: CellKind,
    tag: String,
    deps: Vec<usize>,
}

fn schedule(num_gpus: usize, tasks: Vec<Task>) -> Timeline {
    let mut end = vec![0.0f64; tasks.len()];
    let mut free = vec![0.0f64; num_gpus];
    let mut lanes: Vec<Vec<Cell>> = vec![Vec::new(); num_gpus];
    for (i, task) in tasks.into_iter().enumerate() {
        let ready = task.deps.iter().map(|&d| end[d]).fold(free[task.gpu], f64::max);
        if ready > free[task.gpu] {
            lanes[task.gpu].push(Cell {
                start: free[task.gpu],
                duration: ready - free[task.gpu],
                kind: CellKind::Idle,
                tag: String::new(),
            });
        }
        end[i] = ready + task.duration;
        free[task.gpu] = end[i];
        lanes[task.gpu].push(Cell {
            start: ready,
            duration: task.duration,
            kind: task.kind,
            tag: task.tag,
        });
    }
    let makespan = free.iter().copied().fold(0.0, f64::max);
    for (gpu, lane) in lanes.iter_mut().enumerate() {
        if makespan > free[gpu] {
            lane.push(Cell {
                start: free[gpu],
                duration: makespan - free[gpu],
                kind: CellKind::Idle,
                tag: String::new(),
            });
        }
    }
    Timeline { lanes, makespan }
}

/// Uniform per-GPU times, as the closed forms assume.
pub fn simulate_timeline(strategy: Strategy, cost: &CostModel) -> Result<Timeline> {
    simulate_timeline_scaled(strategy, cost, &vec![1.0; cost.k])
}

/// Like [`simulate_timeline`], with every task on GPU `i` stretched by
/// `speed[i]`. Non-uniform runs do not satisfy the closed forms.
pub fn simulate_timeline_scaled(strategy: Strategy, cost: &CostModel, speed: &[f64]) -> Result<Timeline> {
    cost.validate()?;
    if speed.len() != cost.k || speed.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Config(format!(
            "need {} finite non-negative per-GPU factors, got {speed:?}",
            cost.k
        )));
    }
    let k = cost.k;
    let mut tasks: Vec<Task> = Vec::new();
    let push = |tasks: &mut Vec<Task>, gpu: usize, base: f64, kind: CellKind, tag: String, deps: Vec<usize>| {
        tasks.push(Task {
            gpu,
            duration: base * speed[gpu],
            kind,
            tag,
            deps,
        });
        tasks.len() - 1
    };
    match strategy {
        Strategy::Mp => {
            let mut prev = Vec::new();
            for gpu in 0..k {
                let id = push(&mut tasks, gpu, cost.t_f, CellKind::Forward, format!("F{gpu}"), prev);
                prev = vec![id];
            }
            for gpu in (0..k).rev() {
                let id = push(&mut tasks, gpu, cost.t_b, CellKind::Backward, format!("B{gpu}"), prev);
                prev = vec![id];
            }
        }
        Strategy::Pp => {
            // All forwards, then all backwards; microbatch j of layer i
            // waits for microbatch j of the neighbouring layer.
            let s = cost.s;
            let mut fwd = vec![vec![0; s]; k];
            for gpu in 0..k {
                for j in 0..s {
                    let deps = if gpu == 0 { vec![] } else { vec![fwd[gpu - 1][j]] };
                    fwd[gpu][j] = push(
                        &mut tasks,
                        gpu,
                        cost.t_f,
                        CellKind::Forward,
                        format!("F{gpu},{j}"),
                        deps,
                    );
                }
            }
            let mut bwd = vec![vec![0; s]; k];
            for gpu in (0..k).rev() {
                for j in 0..s {
                    let deps = if gpu == k - 1 {
                        vec![fwd[gpu][s - 1]]
                    } else {
                        vec![bwd[gpu + 1][j]]
                    };
                    bwd[gpu][j] = push(
                        &mut tasks,
                        gpu,
                        cost.t_b,
                        CellKind::Backward,
                        format!("B{gpu},{j}"),
                        deps,
                    );
                }
            }
        }
        Strategy::Hsvit => {
            let fwd: Vec<usize> = (0..k)
                .map(|gpu| {
                    push(
                        &mut tasks,
                        gpu,
                        cost.t_f_sub,
                        CellKind::Forward,
                        format!("F{gpu}"),
                        vec![],
                    )
                })
                .collect();
            let f_agg = push(&mut tasks, 0, cost.t_f_agg, CellKind::Forward, "Fagg".into(), fwd);
            let b_agg = push(
                &mut tasks,
                0,
                cost.t_b_agg,
                CellKind::Backward,
                "Bagg".into(),
                vec![f_agg],
            );
            for gpu in 0..k {
                push(
                    &mut tasks,
                    gpu,
                    cost.t_b_sub,
                    CellKind::Backward,
                    format!("B{gpu}"),
                    vec![b_agg],
                );
            }
        }
    }
    // Zero-length tasks carry no information and would only clutter the grid.
    let mut timeline = schedule(k, tasks);
    for lane in &mut timeline.lanes {
        lane.retain(|c| c.duration > 0.0);
    }
    Ok(timeline)
}

/// Total idle time over total busy time.
pub fn measured_itr(timeline: &Timeline) -> Result<f64> {
    let busy = timeline.busy_time();
    if busy <= 0.0 {
        return Err(Error::Usage("timeline has no busy time; ITR is undefined".into()));
    }
    Ok(timeline.idle_time() / busy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, Strategy as _};

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1.0)
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(itr_mp(&CostModel::layered(4, 1.0, 1.0)), 3.0);
        assert_eq!(itr_mp(&CostModel::layered(1, 1.0, 1.0)), 0.0);
        assert_eq!(itr_mp(&CostModel::layered(8, 1.0, 1.0)), 7.0);
        assert_eq!(itr_pp(&CostModel::pipelined(4, 4, 1.0, 1.0)), 0.75);
        assert_eq!(itr_pp(&CostModel::pipelined(1, 7, 1.0, 1.0)), 0.0);
        assert_eq!(itr_pp(&CostModel::pipelined(4, 1, 1.0, 1.0)), 3.0);
        let c = CostModel::hsvit(4, 1.0, 2.0, 0.1, 0.1);
        assert!((itr_hsvit(&c).unwrap() - 0.2 / 12.2).abs() < 1e-15);
        assert!((itr_hsvit(&c).unwrap() - 0.016393).abs() < 1e-6);
        assert_eq!(itr_hsvit(&CostModel::hsvit(4, 1.0, 2.0, 0.0, 0.0)).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_costs_are_rejected() {
        assert!(itr_hsvit(&CostModel::hsvit(3, 0.0, 0.0, 0.0, 0.0)).is_err());
        assert!(CostModel::hsvit(0, 1.0, 1.0, 1.0, 1.0).validate().is_err());
        assert!(CostModel::layered(2, -1.0, 1.0).validate().is_err());
        assert!(CostModel::layered(2, f64::NAN, 1.0).validate().is_err());
        let empty = simulate_timeline(Strategy::Mp, &CostModel::layered(3, 0.0, 0.0)).unwrap();
        assert!(measured_itr(&empty).is_err());
    }

    #[test]
    fn mp_two_gpus_by_cell_count() {
        let t = simulate_timeline(Strategy::Mp, &CostModel::layered(2, 1.0, 1.0)).unwrap();
        assert_eq!(t.makespan(), 4.0);
        assert_eq!(t.lane_busy(0), 2.0);
        assert_eq!(t.lane_busy(1), 2.0);
        assert_eq!(measured_itr(&t).unwrap(), 1.0);
        assert_eq!(t.render_text(4), "GPU0  |F..B|\nGPU1  |.FB.|\n");
    }

    #[test]
    fn pp_four_by_four() {
        let t = simulate_timeline(Strategy::Pp, &CostModel::pipelined(4, 4, 1.0, 1.0)).unwrap();
        assert_eq!(t.makespan(), 14.0);
        assert_eq!(measured_itr(&t).unwrap(), 0.75);
    }

    #[test]
    fn hsvit_without_aggregation_never_idles() {
        let t = simulate_timeline(Strategy::Hsvit, &CostModel::hsvit(5, 1.0, 2.0, 0.0, 0.0)).unwrap();
        assert_eq!(t.idle_time(), 0.0);
        assert_eq!(measured_itr(&t).unwrap(), 0.0);
    }

    #[test]
    fn hsvit_schedule_idles_every_gpu_but_one_during_aggregation() {
        let c = CostModel::hsvit(4, 1.0, 2.0, 0.1, 0.1);
        let t = simulate_timeline(Strategy::Hsvit, &c).unwrap();
        assert!(close(t.idle_time(), 3.0 * 0.2));
        assert!(close(measured_itr(&t).unwrap(), itr_hsvit_schedule(&c).unwrap()));
        let two = CostModel::hsvit(2, 1.0, 2.0, 0.1, 0.1);
        let t2 = simulate_timeline(Strategy::Hsvit, &two).unwrap();
        assert!(close(measured_itr(&t2).unwrap(), itr_hsvit(&two).unwrap()));
    }

    #[test]
    fn csv_has_stable_schema() {
        let t = simulate_timeline(Strategy::Hsvit, &CostModel::hsvit(2, 1.0, 1.0, 0.5, 0.5)).unwrap();
        let csv = t.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("gpu,start,duration,kind,tag"));
        assert!(csv.contains("0,1,0.5,forward,Fagg"));
        assert!(csv.contains("1,1,1,idle,"));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [Strategy::Mp, Strategy::Pp, Strategy::Hsvit] {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
        assert!("dp".parse::<Strategy>().is_err());
    }

    #[test]
    fn non_uniform_speeds_change_the_picture() {
        // Model parallelism idles K - 1 times its busy time at any speeds.
        let c = CostModel::pipelined(3, 3, 1.0, 1.0);
        let mp = simulate_timeline_scaled(Strategy::Mp, &c, &[1.0, 2.0, 1.0]).unwrap();
        assert_eq!(mp.makespan(), 8.0);
        assert!(close(measured_itr(&mp).unwrap(), itr_mp(&c)));
        let pp = simulate_timeline_scaled(Strategy::Pp, &c, &[1.0, 2.0, 1.0]).unwrap();
        assert!(!close(measured_itr(&pp).unwrap(), itr_pp(&c)));
        assert!(simulate_timeline_scaled(Strategy::Mp, &c, &[1.0]).is_err());
    }

    fn cost_strategy() -> impl proptest::strategy::Strategy<Value = CostModel> {
        (
            1usize..=16,
            1usize..=16,
            0.01f64..10.0,
            0.01f64..10.0,
            0.01f64..10.0,
            0.01f64..10.0,
            0.0f64..5.0,
            0.0f64..5.0,
        )
            .prop_map(|(k, s, t_f, t_b, fs, bs, fa, ba)| CostModel {
                t_f,
                t_b,
                k,
                s,
                t_f_sub: fs,
                t_b_sub: bs,
                t_f_agg: fa,
                t_b_agg: ba,
            })
    }

    proptest! {
        #[test]
        fn mp_and_pp_timelines_match_closed_forms(c in cost_strategy()) {
            let mp = simulate_timeline(Strategy::Mp, &c).unwrap();
            prop_assert!(close(measured_itr(&mp).unwrap(), itr_mp(&c)));
            let pp = simulate_timeline(Strategy::Pp, &c).unwrap();
            prop_assert!(close(measured_itr(&pp).unwrap(), itr_pp(&c)));
        }

        #[test]
        fn hsvit_timeline_matches_its_schedule_form(c in cost_strategy()) {
            let t = simulate_timeline(Strategy::Hsvit, &c).unwrap();
            prop_assert!(close(measured_itr(&t).unwrap(), itr_hsvit_schedule(&c).unwrap()));
        }

        #[test]
        fn timelines_conserve_time(c in cost_strategy()) {
            for strategy in [Strategy::Mp, Strategy::Pp, Strategy::Hsvit] {
                let t = simulate_timeline(strategy, &c).unwrap();
                for lane in t.lanes() {
                    let sum: f64 = lane.iter().map(|c| c.duration).sum();
                    prop_assert!((sum - t.makespan()).abs() <= 1e-9 * t.makespan().max(1.0));
                    for pair in lane.windows(2) {
                        prop_assert!((pair[0].start + pair[0].duration - pair[1].start).abs() <= 1e-9);
                    }
                }
                let total = t.busy_time() + t.idle_time();
                prop_assert!((total - t.num_gpus() as f64 * t.makespan()).abs() <= 1e-9 * total.max(1.0));
            }
        }

        #[test]
        fn one_stage_pipeline_is_model_parallelism(k in 1usize..64) {
            prop_assert_eq!(itr_pp(&CostModel::pipelined(k, 1, 1.0, 1.0)), itr_mp(&CostModel::layered(k, 1.0, 1.0)));
        }

        #[test]
        fn hsvit_ratio_does_not_grow_with_k(c in cost_strategy()) {
            let mut wider = c;
            wider.k = c.k * 2;
            prop_assert!(itr_hsvit(&wider).unwrap() <= itr_hsvit(&c).unwrap());
        }
    }
}
