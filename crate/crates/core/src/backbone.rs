//! Shared encoder-decoder backbone with three task-specific heads.
//!
//! The backbone is a residual encoder-decoder: per level a conv-relu-conv
//! residual block, strided convolution down; the decoder mirrors with
//! transposed convolutions and long additive skips, ending at full
//! resolution with `base_channels` feature maps. Each task owns an
//! independent 3x3x3 convolution plus a classification layer; nothing else
//! is task-specific.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{OmError, Result};
use crate::tensor::{element_count, Graph, Tensor, Var};

/// Which channel-attention variant the heads carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    #[default]
    None,
    /// Cross-task guided attention on heads 2 and 3.
    Cga,
    /// Squeeze-and-excitation before every classifier.
    Se,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Patch extents `[W, H, L]`.
    pub input_patch: [usize; 3],
    /// Input modalities (FLAIR, T1, T1c, T2).
    pub modalities: usize,
    /// Feature width at full resolution; doubles per encoder level.
    pub base_channels: usize,
    /// Encoder levels (depth - 1 downsamplings).
    pub depth: usize,
    /// Classes per task.
    pub num_classes_per_task: [usize; 3],
    pub attention: AttentionKind,
    /// SE bottleneck reduction ratio.
    pub se_reduction: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    /// Desk-scale defaults, small enough to train on a CPU.
    fn default() -> Self {
        NetworkConfig {
            input_patch: [32, 32, 16],
            modalities: 4,
            base_channels: 8,
            depth: 3,
            num_classes_per_task: [5, 5, 2],
            attention: AttentionKind::None,
            se_reduction: 4,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    /// Full-width configuration (32 feature channels at the head).
    pub fn paper_scale() -> Self {
        NetworkConfig {
            base_channels: 32,
            se_reduction: 16,
            ..NetworkConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(OmError::Config("depth must be >= 1".into()));
        }
        let div = 1usize << (self.depth - 1);
        for (axis, &e) in self.input_patch.iter().enumerate() {
            if e % div != 0 || e == 0 {
                return Err(OmError::Config(format!(
                    "input extent {} on axis {} not divisible by 2^(depth-1) = {}",
                    e, axis, div
                )));
            }
        }
        if self.num_classes_per_task != [5, 5, 2] {
            return Err(OmError::Config(format!(
                "cascade semantics require (5, 5, 2) classes per task, got {:?}",
                self.num_classes_per_task
            )));
        }
        if self.modalities == 0 || self.base_channels == 0 {
            return Err(OmError::Config("modalities/base_channels must be > 0".into()));
        }
        if self.attention == AttentionKind::Se && self.se_reduction > self.base_channels {
            return Err(OmError::Config(format!(
                "se_reduction {} exceeds channel count {}",
                self.se_reduction, self.base_channels
            )));
        }
        Ok(())
    }
}

/// Index into a model's parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
}

/// Named trainable parameters of one model, in creation order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|e| e.name == name)
            .map(|e| &mut e.tensor)
    }

    fn add(&mut self, name: String, tensor: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name,
            tensor: tensor.with_grad(),
        });
        ParamId(self.entries.len() - 1)
    }

    /// Total count of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Insert every parameter into a graph; the returned binding maps
    /// `ParamId` to graph variables.
    pub fn bind(&self, g: &mut Graph) -> ParamBinding {
        ParamBinding {
            vars: self.entries.iter().map(|e| g.param(&e.tensor)).collect(),
        }
    }
}

/// Per-graph mapping from parameter ids to graph variables.
pub struct ParamBinding {
    vars: Vec<Var>,
}

impl ParamBinding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// One (de)convolution layer: weight + bias parameters and geometry.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub transposed: bool,
}

impl ConvLayer {
    pub fn forward(&self, g: &mut Graph, bind: &ParamBinding, x: Var) -> Result<Var> {
        let (w, b) = (bind.var(self.w), bind.var(self.b));
        if self.transposed {
            g.deconv3d(x, w, b, self.stride, self.pad)
        } else {
            g.conv3d(x, w, b, self.stride, self.pad)
        }
    }
}

/// conv-relu-conv plus identity skip, relu after the join.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
}

impl ResBlock {
    pub fn forward(&self, g: &mut Graph, bind: &ParamBinding, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, bind, x)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, bind, h)?;
        let joined = g.residual_add(h, x)?;
        Ok(g.relu(joined))
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub stem: ConvLayer,
    pub enc_blocks: Vec<ResBlock>,
    pub downs: Vec<ConvLayer>,
    pub ups: Vec<ConvLayer>,
    pub dec_blocks: Vec<ResBlock>,
}

impl Backbone {
    /// Dense features at input resolution with `base_channels` channels.
    pub fn forward(&self, g: &mut Graph, bind: &ParamBinding, x: Var) -> Result<Var> {
        let h = self.stem.forward(g, bind, x)?;
        let mut h = g.relu(h);
        let mut skips = Vec::new();
        let levels = self.downs.len();
        for lvl in 0..levels {
            h = self.enc_blocks[lvl].forward(g, bind, h)?;
            skips.push(h);
            h = self.downs[lvl].forward(g, bind, h)?;
            h = g.relu(h);
        }
        h = self.enc_blocks[levels].forward(g, bind, h)?;
        for lvl in (0..levels).rev() {
            h = self.ups[lvl].forward(g, bind, h)?;
            h = g.relu(h);
            h = g.residual_add(h, skips[lvl])?;
            h = self.dec_blocks[lvl].forward(g, bind, h)?;
        }
        Ok(h)
    }
}

/// Task-specific layers: an independent convolution and a classifier,
/// optionally wrapped in channel attention.
#[derive(Debug, Clone)]
pub struct TaskHead {
    pub task: usize,
    pub task_conv: ConvLayer,
    pub kind: HeadKind,
}

#[derive(Debug, Clone)]
pub enum HeadKind {
    Plain {
        classifier: ConvLayer,
    },
    Se {
        fc1_w: ParamId,
        fc1_b: ParamId,
        fc2_w: ParamId,
        fc2_b: ParamId,
        classifier: ConvLayer,
    },
    /// Cross-task guided attention: the preceding task's detached
    /// probabilities drive channel recalibration and score fusion.
    Cga {
        cls_focus: ConvLayer,
        cls_rest: ConvLayer,
        cls_final: ConvLayer,
        /// Class indices of the guiding task whose probability mass forms
        /// the "focus" category (tumor for head 2, core for head 3).
        focus_classes: Vec<usize>,
    },
}

/// A backbone plus one head per task it serves.
#[derive(Debug, Clone)]
pub struct OmNet {
    pub config: NetworkConfig,
    pub params: ParamSet,
    pub backbone: Backbone,
    pub heads: Vec<TaskHead>,
}

struct Builder {
    params: ParamSet,
    rng: StdRng,
}

impl Builder {
    fn conv(
        &mut self,
        name: &str,
        k: [usize; 3],
        cin: usize,
        cout: usize,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> ConvLayer {
        let wshape = [k[0], k[1], k[2], cin, cout];
        let fan_in = (k[0] * k[1] * k[2] * cin) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let n = element_count(&wshape);
        let data: Vec<f32> = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        let w = self
            .params
            .add(format!("{name}.w"), Tensor::new(&wshape, data).unwrap());
        let b = self.params.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        ConvLayer { w, b, stride, pad, transposed: false }
    }

    fn deconv(&mut self, name: &str, k: [usize; 3], cin: usize, cout: usize) -> ConvLayer {
        let mut layer = self.conv(name, k, cin, cout, [2, 2, 2], [0, 0, 0]);
        layer.transposed = true;
        layer
    }

    fn res_block(&mut self, name: &str, ch: usize) -> ResBlock {
        ResBlock {
            conv1: self.conv(&format!("{name}.conv1"), [3; 3], ch, ch, [1; 3], [1; 3]),
            conv2: self.conv(&format!("{name}.conv2"), [3; 3], ch, ch, [1; 3], [1; 3]),
        }
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let bound = (6.0 / cols as f32).sqrt();
        let data: Vec<f32> = (0..rows * cols)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        self.params
            .add(name.to_string(), Tensor::new(&[rows, cols], data).unwrap())
    }
}

impl OmNet {
    /// Build the multi-task network: shared backbone plus heads for every
    /// task in `tasks` (0-based task indices).
    pub fn build_with_tasks(config: &NetworkConfig, tasks: &[usize]) -> Result<OmNet> {
        config.validate()?;
        if tasks.is_empty() || tasks.iter().any(|&t| t > 2) {
            return Err(OmError::Config(format!("invalid task set {:?}", tasks)));
        }
        let mut b = Builder {
            params: ParamSet::default(),
            rng: StdRng::seed_from_u64(config.seed),
        };
        let base = config.base_channels;
        let levels = config.depth - 1;

        let stem = b.conv("backbone.stem", [3; 3], config.modalities, base, [1; 3], [1; 3]);
        let mut enc_blocks = Vec::new();
        let mut downs = Vec::new();
        for lvl in 0..levels {
            let ch = base << lvl;
            enc_blocks.push(b.res_block(&format!("backbone.enc{lvl}"), ch));
            downs.push(b.conv(
                &format!("backbone.down{lvl}"),
                [3; 3],
                ch,
                ch * 2,
                [2; 3],
                [1; 3],
            ));
        }
        enc_blocks.push(b.res_block("backbone.bottleneck", base << levels));
        let mut ups = Vec::new();
        let mut dec_blocks = Vec::new();
        for lvl in 0..levels {
            let ch = base << lvl;
            ups.push(b.deconv(&format!("backbone.up{lvl}"), [2; 3], ch * 2, ch));
            dec_blocks.push(b.res_block(&format!("backbone.dec{lvl}"), ch));
        }
        let backbone = Backbone { stem, enc_blocks, downs, ups, dec_blocks };

        let mut heads = Vec::new();
        for &task in tasks {
            let classes = config.num_classes_per_task[task];
            let name = format!("head{}", task + 1);
            let task_conv =
                b.conv(&format!("{name}.task_conv"), [3; 3], base, base, [1; 3], [1; 3]);
            let kind = match config.attention {
                AttentionKind::Cga if task > 0 => HeadKind::Cga {
                    cls_focus: b.conv(&format!("{name}.cls_focus"), [1; 3], base, classes, [1; 3], [0; 3]),
                    cls_rest: b.conv(&format!("{name}.cls_rest"), [1; 3], base, classes, [1; 3], [0; 3]),
                    cls_final: b.conv(&format!("{name}.cls_final"), [1; 3], classes, classes, [1; 3], [0; 3]),
                    // head 2 is guided by task 1 (tumor vs rest),
                    // head 3 by task 2 (core vs rest)
                    focus_classes: if task == 1 { vec![2, 3, 4] } else { vec![3, 4] },
                },
                AttentionKind::Se => {
                    let mid = (base / config.se_reduction).max(1);
                    HeadKind::Se {
                        fc1_w: b.matrix(&format!("{name}.se_fc1.w"), mid, base),
                        fc1_b: b.params.add(format!("{name}.se_fc1.b"), Tensor::zeros(&[mid])),
                        fc2_w: b.matrix(&format!("{name}.se_fc2.w"), base, mid),
                        fc2_b: b.params.add(format!("{name}.se_fc2.b"), Tensor::zeros(&[base])),
                        classifier: b.conv(&format!("{name}.cls"), [1; 3], base, classes, [1; 3], [0; 3]),
                    }
                }
                _ => HeadKind::Plain {
                    classifier: b.conv(&format!("{name}.cls"), [1; 3], base, classes, [1; 3], [0; 3]),
                },
            };
            heads.push(TaskHead { task, task_conv, kind });
        }
        Ok(OmNet {
            config: config.clone(),
            params: b.params,
            backbone,
            heads,
        })
    }

    /// Full three-task network.
    pub fn build(config: &NetworkConfig) -> Result<OmNet> {
        OmNet::build_with_tasks(config, &[0, 1, 2])
    }

    /// One network of a model cascade: shared-architecture backbone with a
    /// single task head. Cascade networks never carry attention.
    pub fn build_single(config: &NetworkConfig, task: usize) -> Result<OmNet> {
        let cfg = NetworkConfig {
            attention: AttentionKind::None,
            ..config.clone()
        };
        OmNet::build_with_tasks(&cfg, &[task])
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count_parameters()
    }

    /// Trainable scalars in one head's task-specific layers.
    pub fn count_head_parameters(&self, task: usize) -> usize {
        let prefix = format!("head{}.", task + 1);
        self.params
            .entries()
            .iter()
            .filter(|e| e.name.starts_with(&prefix))
            .map(|e| e.tensor.len())
            .sum()
    }

    fn head_index(&self, task: usize) -> Result<usize> {
        self.heads
            .iter()
            .position(|h| h.task == task)
            .ok_or_else(|| OmError::Config(format!("model has no head for task {}", task + 1)))
    }

    /// Backbone features for an input patch (4D) or batch (5D).
    pub fn forward_features(&self, g: &mut Graph, bind: &ParamBinding, x: Var) -> Result<Var> {
        self.backbone.forward(g, bind, x)
    }

    /// Per-voxel logits of one task head over shared features.
    ///
    /// Guided heads run their cross-task forward flow on the same features:
    /// head 2 passes them through head 1, head 3 through head 2 (which in
    /// turn consults head 1). `cached_prev_logits` short-circuits that chain
    /// when the caller has already computed the preceding task's logits on
    /// these features, as in one-pass inference.
    pub fn forward_task(
        &self,
        g: &mut Graph,
        bind: &ParamBinding,
        features: Var,
        task: usize,
        cached_prev_logits: Option<Var>,
    ) -> Result<Var> {
        let head = &self.heads[self.head_index(task)?];
        let f = head.task_conv.forward(g, bind, features)?;
        let f = g.relu(f);
        match &head.kind {
            HeadKind::Plain { classifier } => classifier.forward(g, bind, f),
            HeadKind::Se { fc1_w, fc1_b, fc2_w, fc2_b, classifier } => {
                let gates = crate::attention::se_gates(
                    g,
                    f,
                    bind.var(*fc1_w),
                    bind.var(*fc1_b),
                    bind.var(*fc2_w),
                    bind.var(*fc2_b),
                )?;
                let scaled = g.scale_channels(f, gates)?;
                classifier.forward(g, bind, scaled)
            }
            HeadKind::Cga { cls_focus, cls_rest, cls_final, focus_classes } => {
                let prev = match cached_prev_logits {
                    Some(v) => v,
                    None => self.forward_task(g, bind, features, task - 1, None)?,
                };
                let guidance = crate::attention::GuidanceProbs::from_logits(
                    g,
                    prev,
                    focus_classes.clone(),
                )?;
                crate::attention::cga_head(
                    g,
                    bind,
                    f,
                    &guidance,
                    cls_focus,
                    cls_rest,
                    cls_final,
                )
            }
        }
    }

    /// One-pass outputs of every head on a shared feature tensor, feeding
    /// each guided head the logits its predecessor just produced.
    pub fn forward_all_tasks(
        &self,
        g: &mut Graph,
        bind: &ParamBinding,
        features: Var,
    ) -> Result<Vec<Var>> {
        let mut outputs: Vec<Var> = Vec::new();
        for head in &self.heads {
            let prev = outputs.last().copied();
            let logits = self.forward_task(g, bind, features, head.task, prev)?;
            outputs.push(logits);
        }
        Ok(outputs)
    }
}
