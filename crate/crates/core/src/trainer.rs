//! Curriculum-staged multi-task optimization.
//!
//! Tasks join the model in order of difficulty: stage 1 trains task 1 alone,
//! stage 2 adds task 2, stage 3 adds task 3. Each step concatenates the
//! active tasks' patch batches along the batch axis, runs the shared
//! backbone once, splits the features at the concatenation offsets, and
//! routes qualifying easier-task patches into harder tasks' losses (at
//! least 40% complete tumor to join task 2, at least 50% core to join
//! task 3). The step loss is the sum of the active tasks' losses.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::backbone::{OmNet, ParamId};
use crate::error::{OmError, Result};
use crate::sampler::{
    extract_labels, extract_patch, remap_labels, sample_patches, transfer_predicate, LabelVolume,
    Volume,
};
use crate::tensor::{element_count, Graph, SgdMomentum, Tensor, Var};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CurriculumSchedule {
    /// Epochs per curriculum stage.
    pub stage_epochs: [usize; 3],
    pub lr0: f32,
    /// The learning rate halves after every this many epochs.
    pub lr_halving_period: usize,
    pub momentum: f32,
    pub batch_per_task: usize,
    /// Optional early stage exit once the newest task's loss stops
    /// improving for this many steps.
    pub plateau_patience: Option<usize>,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        CurriculumSchedule {
            stage_epochs: [1, 1, 18],
            lr0: 1e-3,
            lr_halving_period: 4,
            momentum: 0.99,
            batch_per_task: 20,
            plateau_patience: None,
        }
    }
}

impl CurriculumSchedule {
    pub fn learning_rate(&self, epoch: usize) -> f32 {
        self.lr0 / 2f32.powi((epoch / self.lr_halving_period) as i32)
    }
}

/// One presampled training patch with its five-class labels.
#[derive(Debug, Clone)]
pub struct PatchSample {
    pub intensities: Tensor,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct TaskDataset {
    pub samples: Vec<PatchSample>,
}

#[derive(Debug, Clone)]
pub struct TrainDatasets {
    pub tasks: [TaskDataset; 3],
    pub patch_extents: [usize; 3],
}

/// Patch counts at full scale; a desk-scale factor shrinks them.
pub const FULL_SCALE_PATCHES: [usize; 3] = [400_000, 400_000, 200_000];

/// Normalize volumes and presample per-task patch banks. Counts are the
/// full-scale numbers multiplied by `desk_scale` (at least one patch per
/// non-empty task region).
pub fn build_datasets(
    cases: &[(Volume, LabelVolume)],
    patch_extents: [usize; 3],
    desk_scale: f64,
    seed: u64,
) -> Result<TrainDatasets> {
    if cases.is_empty() {
        return Err(OmError::Config("no training cases".into()));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let normalized: Vec<(Volume, LabelVolume)> = cases
        .iter()
        .map(|(v, l)| Ok((crate::sampler::normalize(v)?, l.clone())))
        .collect::<Result<_>>()?;
    let mut tasks: [TaskDataset; 3] = Default::default();
    for task in 0..3 {
        let want = ((FULL_SCALE_PATCHES[task] as f64 * desk_scale).round() as usize).max(1);
        let per_case = want.div_ceil(normalized.len());
        let mut samples = Vec::with_capacity(want);
        'outer: for (vol, labels) in &normalized {
            let specs = sample_patches(vol, labels, task, per_case, patch_extents, &mut rng)?;
            for spec in specs {
                samples.push(PatchSample {
                    intensities: extract_patch(vol, &spec),
                    labels: extract_labels(labels, &spec),
                });
                if samples.len() == want {
                    break 'outer;
                }
            }
        }
        tasks[task].samples = samples;
    }
    Ok(TrainDatasets { tasks, patch_extents })
}

/// How a step's concatenated batch is laid out and which patches also feed
/// harder tasks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub active_tasks: Vec<usize>,
    pub per_task_counts: Vec<usize>,
    /// Concatenation offsets; splitting uses the same positions.
    pub offsets: Vec<usize>,
    /// Global batch indices of task-1 patches that also feed task 2.
    pub transfers_to_task2: Vec<usize>,
    /// Global batch indices (task-1 and task-2 segments) feeding task 3.
    pub transfers_to_task3: Vec<usize>,
}

/// Decide the batch layout and data transfers from the drawn patches.
pub fn assemble_batch(per_task: &[Vec<&PatchSample>], active_tasks: &[usize]) -> BatchPlan {
    let per_task_counts: Vec<usize> = per_task.iter().map(|v| v.len()).collect();
    let mut offsets = vec![0usize];
    for c in &per_task_counts {
        offsets.push(offsets.last().unwrap() + c);
    }
    let mut transfers_to_task2 = Vec::new();
    let mut transfers_to_task3 = Vec::new();
    for (slot, &task) in active_tasks.iter().enumerate() {
        for (j, sample) in per_task[slot].iter().enumerate() {
            let global = offsets[slot] + j;
            if task == 0 && active_tasks.contains(&1) && transfer_predicate(&sample.labels, 1) {
                transfers_to_task2.push(global);
            }
            if task <= 1 && active_tasks.contains(&2) && transfer_predicate(&sample.labels, 2) {
                transfers_to_task3.push(global);
            }
        }
    }
    BatchPlan {
        active_tasks: active_tasks.to_vec(),
        per_task_counts,
        offsets,
        transfers_to_task2,
        transfers_to_task3,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub stage: usize,
    pub epoch: usize,
    pub lr: f32,
    pub task_losses: [Option<f32>; 3],
    /// Patches contributing to each task's loss this step (own + transfers).
    pub task_patches: [usize; 3],
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,stage,epoch,lr,loss1,loss2,loss3,patches1,patches2,patches3\n");
        for r in &self.rows {
            let fmt = |o: Option<f32>| o.map(|v| format!("{v:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{:.8},{},{},{},{},{},{}\n",
                r.step,
                r.stage + 1,
                r.epoch,
                r.lr,
                fmt(r.task_losses[0]),
                fmt(r.task_losses[1]),
                fmt(r.task_losses[2]),
                r.task_patches[0],
                r.task_patches[1],
                r.task_patches[2],
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub seed: u64,
    /// Re-check every transfer against a brute-force voxel count.
    pub verify_transfers: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { seed: 0, verify_transfers: false }
    }
}

/// Cyclic shuffled sampler over a patch bank.
struct BankCursor {
    order: Vec<usize>,
    next: usize,
}

impl BankCursor {
    fn new(len: usize, rng: &mut StdRng) -> BankCursor {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        BankCursor { order, next: 0 }
    }

    fn draw(&mut self, count: usize, rng: &mut StdRng) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            if self.next == self.order.len() {
                self.order.shuffle(rng);
                self.next = 0;
            }
            out.push(self.order[self.next]);
            self.next += 1;
        }
        out
    }
}

fn brute_force_fraction(labels: &[u8], core: bool) -> f64 {
    let mut hits = 0usize;
    for &l in labels {
        let is_hit = if core {
            l == 3 || l == 4
        } else {
            l == 2 || l == 3 || l == 4
        };
        if is_hit {
            hits += 1;
        }
    }
    hits as f64 / labels.len() as f64
}

fn verify_plan(plan: &BatchPlan, flat: &[&PatchSample]) -> Result<()> {
    for &g in &plan.transfers_to_task2 {
        if brute_force_fraction(&flat[g].labels, false) < 0.4 {
            return Err(OmError::Internal(format!(
                "transfer to task 2 violates its threshold at batch index {g}"
            )));
        }
    }
    for &g in &plan.transfers_to_task3 {
        if brute_force_fraction(&flat[g].labels, true) < 0.5 {
            return Err(OmError::Internal(format!(
                "transfer to task 3 violates its threshold at batch index {g}"
            )));
        }
    }
    Ok(())
}

struct Optimizer {
    sgd: SgdMomentum,
}

impl Optimizer {
    fn new(model: &OmNet, momentum: f32) -> Optimizer {
        let lens: Vec<usize> = model
            .params
            .entries()
            .iter()
            .map(|e| e.tensor.len())
            .collect();
        Optimizer { sgd: SgdMomentum::new(&lens, momentum) }
    }

    fn apply(&mut self, model: &mut OmNet, g: &Graph, vars: &[Var], lr: f32) {
        for (i, &var) in vars.iter().enumerate() {
            if let Some(grad) = g.grad(var) {
                let grad = grad.to_vec();
                self.sgd
                    .step(i, model.params.tensor_mut(ParamId(i)).data_mut(), &grad, lr);
            }
        }
    }
}

/// One optimization step over the active tasks. Returns per-task losses and
/// patch counts.
#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut OmNet,
    optimizer: &mut Optimizer,
    datasets: &TrainDatasets,
    cursors: &mut [BankCursor; 3],
    active_tasks: &[usize],
    schedule: &CurriculumSchedule,
    lr: f32,
    rng: &mut StdRng,
    verify: bool,
    transfers_enabled: bool,
) -> Result<([Option<f32>; 3], [usize; 3])> {
    // draw this step's patches, in task order
    let mut drawn: Vec<Vec<&PatchSample>> = Vec::with_capacity(active_tasks.len());
    for &task in active_tasks {
        let bank = &datasets.tasks[task].samples;
        if bank.is_empty() {
            return Err(OmError::Config(format!(
                "task {} is active but its dataset is empty",
                task + 1
            )));
        }
        let idx = cursors[task].draw(schedule.batch_per_task, rng);
        drawn.push(idx.into_iter().map(|i| &bank[i]).collect());
    }
    let mut plan = assemble_batch(&drawn, active_tasks);
    if !transfers_enabled {
        plan.transfers_to_task2.clear();
        plan.transfers_to_task3.clear();
    }
    let flat: Vec<&PatchSample> = drawn.iter().flatten().copied().collect();
    if verify {
        verify_plan(&plan, &flat)?;
    }

    // concatenated input batch
    let [pw, ph, pl] = datasets.patch_extents;
    let modalities = flat[0].intensities.shape()[3];
    let sample_len = element_count(flat[0].intensities.shape());
    let mut data = Vec::with_capacity(sample_len * flat.len());
    for s in &flat {
        data.extend_from_slice(s.intensities.data());
    }
    let input = Tensor::new(&[pw, ph, pl, modalities, flat.len()], data)?;

    let mut g = Graph::new();
    let bind = model.params.bind(&mut g);
    let x = g.input(input);
    let feats = model.forward_features(&mut g, &bind, x)?;

    let mut task_losses = [None; 3];
    let mut task_patches = [0usize; 3];
    let mut total: Option<Var> = None;
    for (slot, &task) in active_tasks.iter().enumerate() {
        let own = g.slice_batch(feats, plan.offsets[slot], plan.per_task_counts[slot])?;
        let transfers: &[usize] = match task {
            1 => &plan.transfers_to_task2,
            2 => &plan.transfers_to_task3,
            _ => &[],
        };
        let task_feats = if transfers.is_empty() {
            own
        } else {
            let extra = g.gather_batch(feats, transfers)?;
            g.concat_batch(&[own, extra])?
        };
        let mut labels: Vec<u8> = Vec::new();
        for s in &drawn[slot] {
            labels.extend(remap_labels(&s.labels, task));
        }
        for &gidx in transfers {
            labels.extend(remap_labels(&flat[gidx].labels, task));
        }
        let logits = model.forward_task(&mut g, &bind, task_feats, task, None)?;
        let loss = g.softmax_with_loss(logits, &labels)?;
        task_losses[task] = Some(g.value(loss).data()[0]);
        task_patches[task] = plan.per_task_counts[slot] + transfers.len();
        total = Some(match total {
            None => loss,
            Some(t) => g.residual_add(t, loss)?,
        });
    }
    let total = total.expect("at least one active task");
    g.backward(total)?;
    optimizer.apply(model, &g, bind.vars(), lr);
    Ok((task_losses, task_patches))
}

fn run_stages(
    model: &mut OmNet,
    datasets: &TrainDatasets,
    schedule: &CurriculumSchedule,
    stages: &[(Vec<usize>, usize)], // (active tasks, epochs)
    opts: &TrainOptions,
    transfers_enabled: bool,
) -> Result<TrainTrace> {
    let mut rng = StdRng::seed_from_u64(opts.seed);
    let mut cursors = [
        BankCursor::new(datasets.tasks[0].samples.len(), &mut rng),
        BankCursor::new(datasets.tasks[1].samples.len(), &mut rng),
        BankCursor::new(datasets.tasks[2].samples.len(), &mut rng),
    ];
    let steps_per_epoch = (datasets.tasks[0].samples.len() / schedule.batch_per_task).max(1);
    let mut optimizer = Optimizer::new(model, schedule.momentum);
    let mut trace = TrainTrace::default();
    let mut step = 0usize;
    let mut epoch = 0usize;
    for (stage_idx, (active, epochs)) in stages.iter().enumerate() {
        let newest = *active.last().unwrap();
        let mut best_loss = f32::INFINITY;
        let mut since_best = 0usize;
        'stage: for _ in 0..*epochs {
            let lr = schedule.learning_rate(epoch);
            for _ in 0..steps_per_epoch {
                let (losses, patches) = train_step(
                    model,
                    &mut optimizer,
                    datasets,
                    &mut cursors,
                    active,
                    schedule,
                    lr,
                    &mut rng,
                    opts.verify_transfers,
                    transfers_enabled,
                )?;
                trace.rows.push(TraceRow {
                    step,
                    stage: stage_idx,
                    epoch,
                    lr,
                    task_losses: losses,
                    task_patches: patches,
                });
                step += 1;
                if let Some(patience) = schedule.plateau_patience {
                    let current = losses[newest].unwrap_or(f32::INFINITY);
                    if current < best_loss - 1e-4 {
                        best_loss = current;
                        since_best = 0;
                    } else {
                        since_best += 1;
                        if since_best >= patience {
                            break 'stage;
                        }
                    }
                }
            }
            epoch += 1;
        }
    }
    Ok(trace)
}

/// Staged curriculum: stage k trains tasks 1..k, transfers included.
pub fn train_curriculum(
    model: &mut OmNet,
    datasets: &TrainDatasets,
    schedule: &CurriculumSchedule,
    opts: &TrainOptions,
) -> Result<TrainTrace> {
    let stages = vec![
        (vec![0], schedule.stage_epochs[0]),
        (vec![0, 1], schedule.stage_epochs[1]),
        (vec![0, 1, 2], schedule.stage_epochs[2]),
    ];
    run_stages(model, datasets, schedule, &stages, opts, true)
}

/// Single-stage training of all three tasks for the schedule's total epoch
/// budget; `with_transfers` distinguishes the plain joint model from the
/// joint-plus-data-transfer ablation.
pub fn train_joint(
    model: &mut OmNet,
    datasets: &TrainDatasets,
    schedule: &CurriculumSchedule,
    with_transfers: bool,
    opts: &TrainOptions,
) -> Result<TrainTrace> {
    let total: usize = schedule.stage_epochs.iter().sum();
    let stages = vec![(vec![0, 1, 2], total)];
    run_stages(model, datasets, schedule, &stages, opts, with_transfers)
}

/// Three independently seeded and independently trained cascade networks,
/// one per task, each on its own data only.
pub fn train_mc_baseline(
    base_config: &crate::backbone::NetworkConfig,
    datasets: &TrainDatasets,
    schedule: &CurriculumSchedule,
    opts: &TrainOptions,
) -> Result<([OmNet; 3], Vec<TrainTrace>)> {
    let total_epochs: usize = schedule.stage_epochs.iter().sum();
    let mut models = Vec::new();
    let mut traces = Vec::new();
    for task in 0..3 {
        let mut cfg = base_config.clone();
        cfg.seed = base_config.seed.wrapping_add(task as u64 + 1);
        let mut model = OmNet::build_single(&cfg, task)?;
        let stages = vec![(vec![task], total_epochs)];
        let mc_opts = TrainOptions {
            seed: opts.seed.wrapping_add(task as u64 + 1),
            ..opts.clone()
        };
        let trace = run_stages(&mut model, datasets, schedule, &stages, &mc_opts, false)?;
        models.push(model);
        traces.push(trace);
    }
    let [a, b, c]: [OmNet; 3] = models.try_into().map_err(|_| OmError::Internal("mc build".into()))?;
    Ok(([a, b, c], traces))
}
