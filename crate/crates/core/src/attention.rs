//! Channel attention: cross-task guided attention (CGA) and a
//! squeeze-and-excitation baseline.
//!
//! CGA recalibrates the current task's feature channels from the preceding
//! task's class probabilities. The probabilities are detached, so guidance
//! flows forward only and every task back-propagates independently. Two
//! complementary classifier branches score the recalibrated features; their
//! score maps are merged voxel-wise by the category probabilities and passed
//! through a final pointwise classifier.

use crate::backbone::{ConvLayer, ParamBinding};
use crate::error::{OmError, Result};
use crate::tensor::{Graph, Var};

/// Detached class probabilities of the guiding task plus their two category
/// marginals (focus = tumor for head 2, core for head 3).
#[derive(Debug)]
pub struct GuidanceProbs {
    pub probs: Var,
    pub p_focus: Var,
    pub p_rest: Var,
    pub focus_classes: Vec<usize>,
}

impl GuidanceProbs {
    /// Detach the guiding task's logits, convert to probabilities, and split
    /// the probability mass into focus/rest marginals.
    pub fn from_logits(g: &mut Graph, logits: Var, focus_classes: Vec<usize>) -> Result<Self> {
        let stopped = g.detach(logits);
        let probs = g.softmax_channels(stopped)?;
        GuidanceProbs::from_probs(g, probs, focus_classes)
    }

    /// Wrap pre-computed (already detached) probabilities.
    pub fn from_probs(g: &mut Graph, probs: Var, focus_classes: Vec<usize>) -> Result<Self> {
        let (p_focus, p_rest) = category_marginals(g, probs, &focus_classes)?;
        Ok(GuidanceProbs { probs, p_focus, p_rest, focus_classes })
    }
}

/// Sum the class probabilities of `class_set` and of its complement into two
/// one-channel volumes. The set must be a non-empty proper subset.
pub fn category_marginals(g: &mut Graph, probs: Var, class_set: &[usize]) -> Result<(Var, Var)> {
    let channels = g.value(probs).as_volume()?.channels;
    let mut seen = vec![false; channels];
    for &c in class_set {
        if c >= channels {
            return Err(OmError::InvalidArgument {
                op: "category_marginals",
                msg: format!("class {c} out of range for {channels} classes"),
            });
        }
        seen[c] = true;
    }
    let rest: Vec<usize> = (0..channels).filter(|&c| !seen[c]).collect();
    if class_set.is_empty() || rest.is_empty() {
        return Err(OmError::InvalidArgument {
            op: "category_marginals",
            msg: format!(
                "class set {:?} must be a non-empty proper subset of 0..{channels}",
                class_set
            ),
        });
    }
    let p_focus = g.sum_channels(probs, class_set)?;
    let p_rest = g.sum_channels(probs, &rest)?;
    Ok((p_focus, p_rest))
}

/// Per-category channel importance, one column per batch sample; each column
/// sums to one.
#[derive(Debug)]
pub struct ChannelImportance {
    pub focus: Var,
    pub rest: Var,
}

/// Category-specific channel importance: probability-weighted channel sums,
/// L1-normalized. Differentiable through the features; the probabilities
/// arrive detached.
pub fn csci(g: &mut Graph, features: Var, p_focus: Var, p_rest: Var) -> Result<ChannelImportance> {
    let raw_focus = g.channel_weighted_sum(features, p_focus)?;
    let focus = g.l1_normalize(raw_focus).map_err(degenerate("focus"))?;
    let raw_rest = g.channel_weighted_sum(features, p_rest)?;
    let rest = g.l1_normalize(raw_rest).map_err(degenerate("rest"))?;
    Ok(ChannelImportance { focus, rest })
}

fn degenerate(which: &'static str) -> impl Fn(OmError) -> OmError {
    move |e| match e {
        OmError::DegenerateGuidance(_) => OmError::DegenerateGuidance(format!(
            "csci: {which} channel-importance denominator is zero (dead feature map)"
        )),
        other => other,
    }
}

/// Complementary segmentation: recalibrate the features once per category,
/// classify each branch, merge the score maps by the category probabilities,
/// and classify the merged map.
#[allow(clippy::too_many_arguments)]
pub fn compseg(
    g: &mut Graph,
    bind: &ParamBinding,
    features: Var,
    importance: &ChannelImportance,
    guidance: &GuidanceProbs,
    cls_focus: &ConvLayer,
    cls_rest: &ConvLayer,
    cls_final: &ConvLayer,
) -> Result<Var> {
    let u_focus = g.scale_channels(features, importance.focus)?;
    let u_rest = g.scale_channels(features, importance.rest)?;
    let s_focus = cls_focus.forward(g, bind, u_focus)?;
    let s_rest = cls_rest.forward(g, bind, u_rest)?;
    let merged = g.prob_weighted_merge(s_focus, s_rest, guidance.p_focus, guidance.p_rest)?;
    cls_final.forward(g, bind, merged)
}

/// The full CGA module over one head's features: CSCI then CompSeg.
pub fn cga_head(
    g: &mut Graph,
    bind: &ParamBinding,
    features: Var,
    guidance: &GuidanceProbs,
    cls_focus: &ConvLayer,
    cls_rest: &ConvLayer,
    cls_final: &ConvLayer,
) -> Result<Var> {
    let importance = csci(g, features, guidance.p_focus, guidance.p_rest)?;
    compseg(
        g, bind, features, &importance, guidance, cls_focus, cls_rest, cls_final,
    )
}

/// Squeeze-and-excitation gate vector: globally pooled channel descriptor
/// through a bottleneck MLP and sigmoid. Returns `[C,N]` gates in (0,1).
pub fn se_gates(
    g: &mut Graph,
    features: Var,
    fc1_w: Var,
    fc1_b: Var,
    fc2_w: Var,
    fc2_b: Var,
) -> Result<Var> {
    let pooled = g.global_avg_pool(features)?;
    let z = g.matmul(fc1_w, pooled)?;
    let z = g.bias_add(z, fc1_b)?;
    let z = g.relu(z);
    let z = g.matmul(fc2_w, z)?;
    let z = g.bias_add(z, fc2_b)?;
    Ok(g.sigmoid(z))
}

/// SE block: gate and rescale the feature channels.
pub fn se_block(
    g: &mut Graph,
    features: Var,
    fc1_w: Var,
    fc1_b: Var,
    fc2_w: Var,
    fc2_b: Var,
) -> Result<Var> {
    let gates = se_gates(g, features, fc1_w, fc1_b, fc2_w, fc2_b)?;
    g.scale_channels(features, gates)
}
