//! Objective terms: WGAN critic with input-gradient penalty, all-class
//! softmax classifier, visual pivot alignment, and the semantic-relationship
//! band penalty with its seen/unseen aggregate forms.
//!
//! Each loss exists twice: a value-level function with the full contract
//! checks (used directly by oracles and evaluation) and node-level builders
//! that assemble the same quantity on a tape for training.

use rand::Rng;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::data::{ClassId, SemanticTable};
use crate::error::{Error, Result};
use crate::models::{DiscriminatorNet, DiscriminatorNodes};
use crate::similarity::{cosine_sim, ClassCentroids, NeighborIndex};

/// Weights of the combined objective plus the band half-width.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_vp: f64,
    pub lambda_sr: f64,
    pub lambda_gp: f64,
    pub epsilon: f64,
    /// Constraint-violation penalty multiplier; kept at 1.
    pub penalty_p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_c: 0.01,
            lambda_vp: 1.0,
            lambda_sr: 1.0,
            lambda_gp: 10.0,
            epsilon: 0.1,
            penalty_p: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_c", self.lambda_c),
            ("lambda_vp", self.lambda_vp),
            ("lambda_sr", self.lambda_sr),
            ("lambda_gp", self.lambda_gp),
            ("epsilon", self.epsilon),
            ("penalty_p", self.penalty_p),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------
// Band penalty
// ---------------------------------------------------------------------

/// Squared-hinge band penalty: zero iff x_sim lies in
/// [t_sim - epsilon, t_sim + epsilon], smooth at the band edges.
pub fn sr_pair_penalty(x_sim: f64, t_sim: f64, epsilon: f64, p: f64) -> f64 {
    let upper = (x_sim - (t_sim + epsilon)).max(0.0);
    let lower = ((t_sim - epsilon) - x_sim).max(0.0);
    p * (upper * upper + lower * lower)
}

/// Tape version of the band penalty with fixed semantic similarity target.
pub fn sr_pair_penalty_node(
    tape: &mut Tape,
    x_sim: NodeId,
    t_sim: f64,
    epsilon: f64,
) -> Result<NodeId> {
    let hi = tape.scalar(t_sim + epsilon);
    let lo = tape.scalar(t_sim - epsilon);
    let over = tape.sub(x_sim, hi)?;
    let over_h = tape.hinge(over);
    let over_sq = tape.mul(over_h, over_h)?;
    let under = tape.sub(lo, x_sim)?;
    let under_h = tape.hinge(under);
    let under_sq = tape.mul(under_h, under_h)?;
    tape.add(over_sq, under_sq)
}

/// Cosine similarity of two single-row nodes as a 1x1 node.
pub fn cosine_node(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    let prod = tape.mul(a, b)?;
    let dot = tape.sum_cols(prod);
    let na = tape.row_norms(a);
    let nb = tape.row_norms(b);
    let denom = tape.mul(na, nb)?;
    tape.div(dot, denom)
}

// ---------------------------------------------------------------------
// Visual pivot
// ---------------------------------------------------------------------

/// Mean over classes of the L2 distance between real and generated
/// centroids. Both sides must cover exactly the same classes.
pub fn visual_pivot_loss(real: &ClassCentroids, gen: &ClassCentroids) -> Result<f64> {
    let mut real_ids = real.class_ids().to_vec();
    let mut gen_ids = gen.class_ids().to_vec();
    real_ids.sort();
    gen_ids.sort();
    if real_ids != gen_ids {
        return Err(Error::InvalidArgument(format!(
            "centroid class sets differ: {real_ids:?} vs {gen_ids:?}"
        )));
    }
    if real_ids.is_empty() {
        return Err(Error::InvalidArgument("no classes to pivot on".into()));
    }
    let mut total = 0.0;
    for &c in real.class_ids() {
        let r = real.get(c).expect("validated");
        let g = gen.get(c).expect("validated");
        let sq: f64 = r.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum();
        total += sq.sqrt();
    }
    Ok(total / real_ids.len() as f64)
}

// ---------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------

/// Mean softmax cross-entropy of logits against 1-based labels.
pub fn cross_entropy_mean(logits: &Tensor, labels: &[ClassId]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let node = cross_entropy_node(&mut tape, l, labels, logits.cols())?;
    tape.scalar_value(node)
}

/// Tape version: per-sample fused cross-entropy, then the batch mean.
pub fn cross_entropy_node(
    tape: &mut Tape,
    logits: NodeId,
    labels: &[ClassId],
    class_count: usize,
) -> Result<NodeId> {
    let mut zero_based = Vec::with_capacity(labels.len());
    for &l in labels {
        if l.0 == 0 || l.index() >= class_count {
            return Err(Error::InvalidArgument(format!(
                "label {l} outside 1..={class_count}"
            )));
        }
        zero_based.push(l.index());
    }
    let per_sample = tape.softmax_xent(logits, &zero_based)?;
    Ok(tape.mean_all(per_sample))
}

/// Classifier loss of the discriminator's logit head on a feature batch.
pub fn classifier_loss(d: &DiscriminatorNet, x: &Tensor, labels: &[ClassId]) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::InvalidArgument("empty classifier batch".into()));
    }
    if x.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "classifier_loss",
            detail: format!("{} rows vs {} labels", x.rows(), labels.len()),
        });
    }
    let mut tape = Tape::new();
    let nodes = d.mount(&mut tape, false);
    let xn = tape.constant(x);
    let (_, logits) = d.forward(&mut tape, &nodes, xn)?;
    let loss = cross_entropy_node(&mut tape, logits, labels, d.classifier.out_dim())?;
    tape.scalar_value(loss)
}

// ---------------------------------------------------------------------
// Critic with gradient penalty
// ---------------------------------------------------------------------

/// Penalty samples: real rows, generated rows, and per-sample random
/// interpolates between them.
pub fn make_gp_samples<R: Rng>(real: &Tensor, fake: &Tensor, rng: &mut R) -> Result<Tensor> {
    if real.shape() != fake.shape() {
        return Err(Error::ShapeMismatch {
            op: "make_gp_samples",
            detail: format!("{:?} vs {:?}", real.shape(), fake.shape()),
        });
    }
    let (m, v) = real.shape();
    let mut interp = Vec::with_capacity(m * v);
    for i in 0..m {
        let alpha: f64 = rng.gen();
        for j in 0..v {
            interp.push(alpha * real.get(i, j) + (1.0 - alpha) * fake.get(i, j));
        }
    }
    let interp = Tensor::new(m, v, interp)?;
    Tensor::vstack(&[real, fake, &interp])
}

/// Mean (|grad_x D(x)| - 1)^2 over the penalty batch, as a tape node. The
/// input gradient is itself a graph tensor, so this node can be
/// differentiated with respect to the discriminator parameters.
pub fn gradient_penalty_node(
    tape: &mut Tape,
    d: &DiscriminatorNet,
    nodes: &DiscriminatorNodes,
    gp_input: NodeId,
) -> Result<NodeId> {
    let (critic, _) = d.forward(tape, nodes, gp_input)?;
    let total = tape.sum_all(critic);
    let grads = tape.input_gradient(total, gp_input)?;
    let norms = tape.row_norms(grads);
    let (m, _) = tape.shape(norms);
    let ones = tape.constant(&Tensor::new(m, 1, vec![1.0; m])?);
    let pen = tape.squared_error(norms, ones)?;
    Ok(tape.mean_all(pen))
}

/// Signed critic objective E[D(real)] - E[D(fake)] - lambda_gp * GP.
/// The discriminator ascends this value; its update minimizes the negation,
/// while the generator part is just -E[D(fake)].
pub fn critic_loss(
    d: &DiscriminatorNet,
    real_x: &Tensor,
    fake_x: &Tensor,
    gp_samples: &Tensor,
    lambda_gp: f64,
) -> Result<f64> {
    if real_x.rows() == 0 || fake_x.rows() == 0 || gp_samples.rows() == 0 {
        return Err(Error::InvalidArgument("empty critic batch".into()));
    }
    let mut tape = Tape::new();
    let nodes = d.mount(&mut tape, false);
    let rn = tape.constant(real_x);
    let fnode = tape.constant(fake_x);
    let gp_in = tape.leaf(gp_samples, true);
    let (critic_real, _) = d.forward(&mut tape, &nodes, rn)?;
    let (critic_fake, _) = d.forward(&mut tape, &nodes, fnode)?;
    let mean_real = tape.mean_all(critic_real);
    let mean_fake = tape.mean_all(critic_fake);
    let gp = gradient_penalty_node(&mut tape, d, &nodes, gp_in)?;
    let signed = tape.combine(&[(1.0, mean_real), (-1.0, mean_fake), (-lambda_gp, gp)])?;
    tape.scalar_value(signed)
}

// ---------------------------------------------------------------------
// Semantic-relationship losses
// ---------------------------------------------------------------------

fn sr_loss(
    gen: &ClassCentroids,
    anchors: &ClassCentroids,
    semantics: &SemanticTable,
    index: &NeighborIndex,
    epsilon: f64,
) -> Result<f64> {
    if gen.class_ids().is_empty() {
        return Err(Error::InvalidArgument("no query centroids".into()));
    }
    let mut total = 0.0;
    for &ci in gen.class_ids() {
        let neighbors = index.neighbors(ci).ok_or_else(|| {
            Error::InvalidArgument(format!("class {ci} missing from the neighbor index"))
        })?;
        let mu_gen = gen.get(ci).expect("own class id");
        let t_i = semantics.vector(ci)?;
        for nb in neighbors {
            let mu_anchor = anchors.get(nb.class_id).ok_or_else(|| {
                Error::InvalidArgument(format!("missing centroid for class {}", nb.class_id))
            })?;
            let x_sim = cosine_sim(mu_anchor, mu_gen)?;
            let t_sim = cosine_sim(semantics.vector(nb.class_id)?, t_i)?;
            total += sr_pair_penalty(x_sim, t_sim, epsilon, 1.0);
        }
    }
    Ok(total / gen.class_ids().len() as f64)
}

/// Seen-class band loss: generated seen centroids against real seen
/// centroids of the top semantic neighbors (self excluded by the index).
pub fn sr_loss_seen(
    gen_centroids: &ClassCentroids,
    real_centroids: &ClassCentroids,
    semantics: &SemanticTable,
    index: &NeighborIndex,
    epsilon: f64,
) -> Result<f64> {
    sr_loss(gen_centroids, real_centroids, semantics, index, epsilon)
}

/// Unseen-class band loss: generated unseen centroids against REAL seen
/// centroids; the index must have been built with the seen pool.
pub fn sr_loss_unseen(
    gen_unseen_centroids: &ClassCentroids,
    real_seen_centroids: &ClassCentroids,
    semantics: &SemanticTable,
    index: &NeighborIndex,
    epsilon: f64,
) -> Result<f64> {
    sr_loss(
        gen_unseen_centroids,
        real_seen_centroids,
        semantics,
        index,
        epsilon,
    )
}

// ---------------------------------------------------------------------
// Combined generator objective
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenPhase {
    Seen,
    Unseen,
}

/// Component values entering the generator update.
#[derive(Debug, Clone, Copy, Default)]
pub struct GenLossComponents {
    /// -E[D(fake)]; only present in the seen phase.
    pub adversarial: f64,
    pub classifier: f64,
    pub visual_pivot: f64,
    pub sr: f64,
}

/// Weighted sum of the generator's loss components. The unseen phase has no
/// critic and no pivot term (no real features exist for those classes).
pub fn generator_total_loss(
    components: &GenLossComponents,
    weights: &LossWeights,
    phase: GenPhase,
) -> Result<f64> {
    let named: &[(&str, f64, f64)] = match phase {
        GenPhase::Seen => &[
            ("adversarial", 1.0, components.adversarial),
            ("classifier", weights.lambda_c, components.classifier),
            ("visual_pivot", weights.lambda_vp, components.visual_pivot),
            ("sr", weights.lambda_sr, components.sr),
        ],
        GenPhase::Unseen => &[
            ("classifier", weights.lambda_c, components.classifier),
            ("sr", weights.lambda_sr, components.sr),
        ],
    };
    let mut total = 0.0;
    for &(name, w, v) in named {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("generator loss component '{name}'"),
            });
        }
        total += w * v;
    }
    Ok(total)
}
