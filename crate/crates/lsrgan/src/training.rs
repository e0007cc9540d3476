//! Two-phase adversarial training.
//!
//! Each epoch runs ceil(n_train/m) seen-phase steps and then
//! ceil(C_u * m_g / m) unseen-phase steps. A seen step performs N_d joint
//! discriminator updates (negated critic objective plus weighted classifier
//! loss) followed by one generator update on the combined objective; an
//! unseen step performs N_c classifier-head-only updates on generated
//! unseen features followed by one generator update on classifier and
//! unseen band losses. No real visual features exist for unseen classes and
//! none are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{AdamConfig, NodeId, ParamGroup, Tape, Tensor};
use crate::data::{
    sample_minibatch, ClassId, FeatureDataset, MiniBatch, Phase, SemanticMode, SemanticTable,
};
use crate::error::{Error, Result};
use crate::losses::{
    cosine_node, cross_entropy_node, gradient_penalty_node, make_gp_samples, sr_pair_penalty_node,
    LossWeights,
};
use crate::metrics::{
    classifier_scores, gzsl_metrics, seen_unseen_auc, zsl_accuracy, GzslResult, ZslPredictor,
};
use crate::models::{
    init_model, DiscriminatorNodes, GeneratorNodes, LsrGanModel, ModelConfig, NoiseSpec,
    OutputActivation,
};
use crate::similarity::{build_neighbor_index, class_means, ClassCentroids, NeighborIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Adversarial game plus classifier only.
    S1,
    /// S1 plus the visual pivot term.
    S2,
    /// Full model.
    S3,
    /// Full model without the denoiser (tfidf mode only).
    S4,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::S1 => "S1",
            Ablation::S2 => "S2",
            Ablation::S3 => "S3",
            Ablation::S4 => "S4",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S1" | "s1" => Ok(Ablation::S1),
            "S2" | "s2" => Ok(Ablation::S2),
            "S3" | "s3" => Ok(Ablation::S3),
            "S4" | "s4" => Ok(Ablation::S4),
            other => Err(Error::Config(format!(
                "unknown ablation '{other}' (expected S1..S4)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationChoice {
    /// attributes -> relu, tfidf -> tanh.
    Auto,
    Relu,
    Tanh,
}

impl ActivationChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            ActivationChoice::Auto => "auto",
            ActivationChoice::Relu => "relu",
            ActivationChoice::Tanh => "tanh",
        }
    }
}

impl std::str::FromStr for ActivationChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(ActivationChoice::Auto),
            "relu" => Ok(ActivationChoice::Relu),
            "tanh" => Ok(ActivationChoice::Tanh),
            other => Err(Error::Config(format!(
                "unknown output activation '{other}' (expected auto|relu|tanh)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Seen-phase discriminator iterations per generator step.
    pub critic_iters: usize,
    /// Unseen-phase classifier iterations per generator step (1 or 2).
    pub unseen_iters: usize,
    pub weights: LossWeights,
    /// Semantic neighbors per query class.
    pub n_c: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Generated samples per class for centroid estimation during training.
    pub m_g: usize,
    /// Generated samples per class for nearest-centroid evaluation.
    pub m_eval: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub mode: SemanticMode,
    pub output_activation: ActivationChoice,
    pub noise_dim: usize,
    pub hidden_dim: usize,
    pub denoiser_dim: usize,
    pub leaky_slope: f64,
    /// Metric evaluation cadence in epochs; 0 disables in-training eval.
    pub eval_every: usize,
    /// Unseen classes visited per generator step by the band loss;
    /// defaults to spreading all unseen classes over one epoch.
    pub sr_unseen_slice: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            critic_iters: 5,
            unseen_iters: 1,
            weights: LossWeights::default(),
            n_c: 5,
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            m_g: 32,
            m_eval: 60,
            seed: 7,
            ablation: Ablation::S3,
            mode: SemanticMode::Attributes,
            output_activation: ActivationChoice::Auto,
            noise_dim: 100,
            hidden_dim: 4096,
            denoiser_dim: 1024,
            leaky_slope: 0.2,
            eval_every: 1,
            sr_unseen_slice: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.m_g == 0 || self.m_eval == 0 {
            return Err(Error::Config(
                "epochs, batch_size, m_g and m_eval must be positive".into(),
            ));
        }
        if self.critic_iters == 0 {
            return Err(Error::Config("critic_iters must be at least 1".into()));
        }
        if !(self.unseen_iters == 1 || self.unseen_iters == 2) {
            return Err(Error::Config("unseen_iters must be 1 or 2".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.n_c == 0 {
            return Err(Error::Config("n_c must be at least 1".into()));
        }
        if self.ablation == Ablation::S4 && self.mode != SemanticMode::Tfidf {
            return Err(Error::Config(
                "ablation S4 removes the denoiser and only applies in tfidf mode".into(),
            ));
        }
        self.weights.validate()
    }

    /// Loss weights with the ablation switches applied.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        match self.ablation {
            Ablation::S1 => {
                w.lambda_vp = 0.0;
                w.lambda_sr = 0.0;
            }
            Ablation::S2 => {
                w.lambda_sr = 0.0;
            }
            Ablation::S3 | Ablation::S4 => {}
        }
        w
    }

    pub fn uses_denoiser(&self) -> bool {
        self.mode == SemanticMode::Tfidf && self.ablation != Ablation::S4
    }

    pub fn resolved_activation(&self) -> OutputActivation {
        match self.output_activation {
            ActivationChoice::Relu => OutputActivation::Relu,
            ActivationChoice::Tanh => OutputActivation::Tanh,
            ActivationChoice::Auto => match self.mode {
                SemanticMode::Attributes => OutputActivation::Relu,
                SemanticMode::Tfidf => OutputActivation::Tanh,
            },
        }
    }

    pub fn model_config(
        &self,
        dataset: &FeatureDataset,
        semantics: &SemanticTable,
    ) -> ModelConfig {
        ModelConfig {
            noise_dim: self.noise_dim,
            hidden_dim: self.hidden_dim,
            visual_dim: dataset.visual_dim(),
            semantic_dim: semantics.dim(),
            class_count: dataset.class_count(),
            denoiser_dim: self.uses_denoiser().then_some(self.denoiser_dim),
            output_activation: self.resolved_activation(),
            leaky_slope: self.leaky_slope,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: 1e-8,
        }
    }
}

/// Per-epoch loss means and metric snapshot.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub critic_objective: f64,
    pub gen_adversarial: f64,
    pub classifier_seen: f64,
    pub visual_pivot: f64,
    pub sr_seen: f64,
    pub classifier_unseen: f64,
    pub sr_unseen: f64,
    pub zsl_top1: f64,
    pub gzsl_unseen: f64,
    pub gzsl_seen: f64,
    pub gzsl_harmonic: f64,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainTrace {
    /// CSV with one row per epoch. `header_comment` lines are prefixed with
    /// '#'; the auc column appears only when any record carries one.
    pub fn to_csv(&self, header_comment: &str) -> String {
        let mut out: String = header_comment
            .lines()
            .map(|l| format!("# {l}\n"))
            .collect();
        let with_auc = self.records.iter().any(|r| r.auc.is_some());
        out.push_str(
            "epoch,critic_objective,gen_adversarial,classifier_seen,visual_pivot,sr_seen,\
             classifier_unseen,sr_unseen,zsl_top1,gzsl_unseen,gzsl_seen,gzsl_harmonic",
        );
        if with_auc {
            out.push_str(",auc");
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.critic_objective,
                r.gen_adversarial,
                r.classifier_seen,
                r.visual_pivot,
                r.sr_seen,
                r.classifier_unseen,
                r.sr_unseen,
                r.zsl_top1,
                r.gzsl_unseen,
                r.gzsl_seen,
                r.gzsl_harmonic
            ));
            if with_auc {
                match r.auc {
                    Some(v) => out.push_str(&format!(",{v}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainStats {
    pub critic_updates: u64,
    pub gen_updates_seen: u64,
    pub classifier_updates_unseen: u64,
    pub gen_updates_unseen: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct SeenStepLosses {
    pub critic_objective: f64,
    pub adversarial: f64,
    pub classifier: f64,
    pub visual_pivot: f64,
    pub sr: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct UnseenStepLosses {
    pub classifier_head: f64,
    pub gen_classifier: f64,
    pub sr: f64,
}

/// Value and generator-gradient norm of one weighted loss component.
#[derive(Debug, Clone)]
pub struct ComponentProbe {
    pub name: &'static str,
    pub value: f64,
    pub grad_norm: f64,
}

pub struct TrainOutcome {
    pub model: LsrGanModel,
    pub best_model: LsrGanModel,
    pub best_epoch: usize,
    pub best_harmonic: f64,
    pub trace: TrainTrace,
    pub stats: TrainStats,
}

fn ensure_finite(value: f64, context: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
        })
    }
}

// canonical parameter orders; the classifier head occupies D slots 4 and 5
const D_CLASSIFIER_SLOTS: [usize; 2] = [4, 5];

fn mount_disc_params(
    tape: &mut Tape,
    model: &LsrGanModel,
    trainable: bool,
) -> (DiscriminatorNodes, Vec<NodeId>) {
    let nodes = model.discriminator.mount(tape, trainable);
    let ids = vec![
        nodes.hidden.weight,
        nodes.hidden.bias,
        nodes.critic.weight,
        nodes.critic.bias,
        nodes.classifier.weight,
        nodes.classifier.bias,
    ];
    (nodes, ids)
}

fn disc_tensors_mut(model: &mut LsrGanModel) -> Vec<&mut Tensor> {
    let d = &mut model.discriminator;
    vec![
        &mut d.hidden.weight,
        &mut d.hidden.bias,
        &mut d.critic.weight,
        &mut d.critic.bias,
        &mut d.classifier.weight,
        &mut d.classifier.bias,
    ]
}

struct GenMount {
    gen: GeneratorNodes,
    denoiser: Option<crate::models::DenseNodes>,
    param_ids: Vec<NodeId>,
}

fn mount_gen_params(tape: &mut Tape, model: &LsrGanModel, trainable: bool) -> GenMount {
    let mut param_ids = Vec::new();
    let denoiser = model.denoiser.as_ref().map(|d| {
        let n = d.mount(tape, trainable);
        param_ids.push(n.weight);
        param_ids.push(n.bias);
        n
    });
    let gen = model.generator.mount(tape, trainable);
    param_ids.extend([
        gen.input.weight,
        gen.input.bias,
        gen.output.weight,
        gen.output.bias,
    ]);
    GenMount {
        gen,
        denoiser,
        param_ids,
    }
}

fn gen_tensors_mut(model: &mut LsrGanModel) -> Vec<&mut Tensor> {
    let mut out = Vec::new();
    if let Some(d) = &mut model.denoiser {
        out.push(&mut d.layer.weight);
        out.push(&mut d.layer.bias);
    }
    let g = &mut model.generator;
    out.push(&mut g.input.weight);
    out.push(&mut g.input.bias);
    out.push(&mut g.output.weight);
    out.push(&mut g.output.bias);
    out
}

pub struct Trainer {
    config: TrainConfig,
    weights: LossWeights,
    model: LsrGanModel,
    opt_g: ParamGroup,
    opt_d: ParamGroup,
    rng: ChaCha12Rng,
    noise: NoiseSpec,
    real_seen_centroids: ClassCentroids,
    /// Semantic table the band loss reads similarities from (denoised
    /// snapshot in tfidf mode, refreshed every epoch).
    sr_table: SemanticTable,
    index: NeighborIndex,
    unseen_cursor: usize,
    sr_slice: usize,
    pub stats: TrainStats,
}

impl Trainer {
    pub fn new(
        dataset: &FeatureDataset,
        semantics: &SemanticTable,
        config: &TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if config.mode != semantics.mode() {
            return Err(Error::Config(format!(
                "config mode {} does not match semantic table mode {}",
                config.mode.as_str(),
                semantics.mode().as_str()
            )));
        }
        let model = init_model(&config.model_config(dataset, semantics), config.seed)?;
        let real_seen_centroids = class_means(
            &dataset.train().features,
            &dataset.train().labels,
            dataset.seen_classes(),
        )?;
        let mut opt_g_lens = Vec::new();
        if let Some(d) = &model.denoiser {
            opt_g_lens.extend([d.layer.weight.len(), d.layer.bias.len()]);
        }
        opt_g_lens.extend([
            model.generator.input.weight.len(),
            model.generator.input.bias.len(),
            model.generator.output.weight.len(),
            model.generator.output.bias.len(),
        ]);
        let disc = &model.discriminator;
        let opt_d_lens = vec![
            disc.hidden.weight.len(),
            disc.hidden.bias.len(),
            disc.critic.weight.len(),
            disc.critic.bias.len(),
            disc.classifier.weight.len(),
            disc.classifier.bias.len(),
        ];
        let unseen_steps = unseen_steps_per_epoch(dataset, config);
        let c_u = dataset.unseen_classes().len();
        let sr_slice = config
            .sr_unseen_slice
            .unwrap_or_else(|| c_u.div_ceil(unseen_steps))
            .clamp(1, c_u);
        let mut trainer = Trainer {
            weights: config.effective_weights(),
            opt_g: ParamGroup::new(config.adam(), &opt_g_lens),
            opt_d: ParamGroup::new(config.adam(), &opt_d_lens),
            rng: ChaCha12Rng::seed_from_u64(config.seed),
            noise: NoiseSpec {
                dim: config.noise_dim,
            },
            model,
            real_seen_centroids,
            sr_table: semantics.clone(),
            index: build_neighbor_index(
                semantics,
                &all_classes(dataset),
                dataset.seen_classes(),
                config.n_c,
            )?,
            unseen_cursor: 0,
            sr_slice,
            stats: TrainStats::default(),
            config: config.clone(),
        };
        if trainer.model.denoiser.is_some() {
            trainer.refresh_similarity(dataset, semantics)?;
        }
        Ok(trainer)
    }

    pub fn model(&self) -> &LsrGanModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Rebuilds the band-loss similarity table and neighbor index. In
    /// attribute mode (or without a denoiser) the raw table is kept; with a
    /// denoiser the similarities follow its current output, so the index is
    /// refreshed at every epoch boundary.
    pub fn refresh_similarity(
        &mut self,
        dataset: &FeatureDataset,
        semantics: &SemanticTable,
    ) -> Result<()> {
        self.sr_table = match &self.model.denoiser {
            Some(d) => SemanticTable::new(semantics.mode(), d.denoise(semantics.matrix())?)?,
            None => semantics.clone(),
        };
        self.index = build_neighbor_index(
            &self.sr_table,
            &all_classes(dataset),
            dataset.seen_classes(),
            self.config.n_c,
        )?;
        Ok(())
    }

    /// Conditioning node for raw semantic rows: denoiser forward when the
    /// model has one (trainable on demand), otherwise a constant leaf.
    fn condition_node(
        &self,
        tape: &mut Tape,
        mount: &GenMount,
        t_raw: &Tensor,
    ) -> Result<NodeId> {
        let raw = tape.constant(t_raw);
        match (&self.model.denoiser, &mount.denoiser) {
            (Some(d), Some(nodes)) => d.forward(tape, nodes, raw),
            _ => Ok(raw),
        }
    }

    /// One seen-phase step: `critic_iters` discriminator updates, then one
    /// generator update on the full weighted objective.
    pub fn seen_phase_step(
        &mut self,
        dataset: &FeatureDataset,
        semantics: &SemanticTable,
    ) -> Result<SeenStepLosses> {
        let m = self.config.batch_size;
        let mut critic_mean = 0.0;

        for _ in 0..self.config.critic_iters {
            let MiniBatch::Seen(batch) =
                sample_minibatch(dataset, Phase::Seen, m, &mut self.rng)?
            else {
                unreachable!("seen phase sampling")
            };
            let t_rows = semantics.rows_for(&batch.labels)?;
            let cond = self.model.condition(&t_rows)?;
            let z = self.noise.sample(m, &mut self.rng);
            let fake = self.model.generator.generate(&z, &cond)?;
            let gp_samples = make_gp_samples(&batch.features, &fake, &mut self.rng)?;

            let mut tape = Tape::new();
            let (d_nodes, d_ids) = mount_disc_params(&mut tape, &self.model, true);
            let real_leaf = tape.constant(&batch.features);
            let fake_leaf = tape.constant(&fake);
            let gp_leaf = tape.leaf(&gp_samples, true);
            let (critic_real, logits_real) =
                self.model
                    .discriminator
                    .forward(&mut tape, &d_nodes, real_leaf)?;
            let (critic_fake, logits_fake) =
                self.model
                    .discriminator
                    .forward(&mut tape, &d_nodes, fake_leaf)?;
            let mean_real = tape.mean_all(critic_real);
            let mean_fake = tape.mean_all(critic_fake);
            let gp = gradient_penalty_node(&mut tape, &self.model.discriminator, &d_nodes, gp_leaf)?;
            let signed = tape.combine(&[
                (1.0, mean_real),
                (-1.0, mean_fake),
                (-self.weights.lambda_gp, gp),
            ])?;
            let c = self.model.discriminator.classifier.out_dim();
            let ce_real = cross_entropy_node(&mut tape, logits_real, &batch.labels, c)?;
            let ce_fake = cross_entropy_node(&mut tape, logits_fake, &batch.labels, c)?;
            let classifier = tape.combine(&[(0.5, ce_real), (0.5, ce_fake)])?;
            let loss_d =
                tape.combine(&[(-1.0, signed), (self.weights.lambda_c, classifier)])?;

            let signed_value = ensure_finite(tape.scalar_value(signed)?, "critic objective")?;
            ensure_finite(tape.scalar_value(classifier)?, "discriminator classifier loss")?;
            critic_mean += signed_value;

            let grads = tape.grad(loss_d, &d_ids)?;
            let grad_tensors: Vec<Tensor> =
                grads.iter().map(|&g| tape.value_tensor(g)).collect();
            for (i, (tensor, grad)) in disc_tensors_mut(&mut self.model)
                .into_iter()
                .zip(&grad_tensors)
                .enumerate()
            {
                self.opt_d.step(i, tensor, grad)?;
            }
            self.stats.critic_updates += 1;
        }
        critic_mean /= self.config.critic_iters as f64;

        // generator update
        let MiniBatch::Seen(batch) = sample_minibatch(dataset, Phase::Seen, m, &mut self.rng)?
        else {
            unreachable!("seen phase sampling")
        };
        let losses = self.generator_update_seen(&batch.labels, semantics)?;
        Ok(SeenStepLosses {
            critic_objective: critic_mean,
            ..losses
        })
    }

    fn generator_update_seen(
        &mut self,
        labels: &[ClassId],
        semantics: &SemanticTable,
    ) -> Result<SeenStepLosses> {
        let m = labels.len();
        let z = self.noise.sample(m, &mut self.rng);
        let t_rows = semantics.rows_for(labels)?;

        let mut scheduled: Vec<ClassId> = labels.to_vec();
        scheduled.sort();
        scheduled.dedup();
        let gen_counts: Vec<(ClassId, Tensor)> = scheduled
            .iter()
            .map(|&c| (c, self.noise.sample(self.config.m_g, &mut self.rng)))
            .collect();

        let mut tape = Tape::new();
        let mount = mount_gen_params(&mut tape, &self.model, true);
        let (d_nodes, _) = mount_disc_params(&mut tape, &self.model, false);

        let z_leaf = tape.constant(&z);
        let cond = self.condition_node(&mut tape, &mount, &t_rows)?;
        let fake = self
            .model
            .generator
            .forward(&mut tape, &mount.gen, z_leaf, cond)?;
        let (critic_fake, logits_fake) =
            self.model.discriminator.forward(&mut tape, &d_nodes, fake)?;
        let mean_fake = tape.mean_all(critic_fake);
        let adversarial = tape.scale(mean_fake, -1.0);
        let c = self.model.discriminator.classifier.out_dim();
        let classifier = cross_entropy_node(&mut tape, logits_fake, labels, c)?;

        let mut terms = vec![(1.0, adversarial), (self.weights.lambda_c, classifier)];
        let mut vp_value = 0.0;
        let mut sr_value = 0.0;
        let need_centroids = self.weights.lambda_vp > 0.0 || self.weights.lambda_sr > 0.0;
        if need_centroids {
            let mut vp_terms = Vec::new();
            let mut sr_terms = Vec::new();
            for (class, z_c) in &gen_counts {
                let t_row = Tensor::row_vector(semantics.vector(*class)?.to_vec());
                let z_node = tape.constant(z_c);
                let cond_c = self.condition_node(&mut tape, &mount, &t_row)?;
                let fake_c = self
                    .model
                    .generator
                    .forward(&mut tape, &mount.gen, z_node, cond_c)?;
                let centroid = tape.mean_rows(fake_c);
                if self.weights.lambda_vp > 0.0 {
                    let real = Tensor::row_vector(
                        self.real_seen_centroids
                            .get(*class)
                            .expect("seen class has a centroid")
                            .to_vec(),
                    );
                    let real_leaf = tape.constant(&real);
                    let diff = tape.sub(real_leaf, centroid)?;
                    vp_terms.push(tape.row_norms(diff));
                }
                if self.weights.lambda_sr > 0.0 {
                    sr_terms.push(self.sr_class_term(&mut tape, *class, centroid)?);
                }
            }
            let k = gen_counts.len() as f64;
            if !vp_terms.is_empty() {
                let parts: Vec<(f64, NodeId)> =
                    vp_terms.iter().map(|&n| (1.0 / k, n)).collect();
                let vp = tape.combine(&parts)?;
                vp_value = ensure_finite(tape.scalar_value(vp)?, "visual pivot loss")?;
                terms.push((self.weights.lambda_vp, vp));
            }
            if !sr_terms.is_empty() {
                let parts: Vec<(f64, NodeId)> =
                    sr_terms.iter().map(|&n| (1.0 / k, n)).collect();
                let sr = tape.combine(&parts)?;
                sr_value = ensure_finite(tape.scalar_value(sr)?, "seen band loss")?;
                terms.push((self.weights.lambda_sr, sr));
            }
        }
        let total = tape.combine(&terms)?;
        let adv_value = ensure_finite(tape.scalar_value(adversarial)?, "adversarial loss")?;
        let cls_value = ensure_finite(tape.scalar_value(classifier)?, "generator classifier loss")?;

        self.apply_generator_grads(&mut tape, total, &mount)?;
        self.stats.gen_updates_seen += 1;
        Ok(SeenStepLosses {
            critic_objective: 0.0,
            adversarial: adv_value,
            classifier: cls_value,
            visual_pivot: vp_value,
            sr: sr_value,
        })
    }

    /// Band term of one query class against its indexed neighbors, anchored
    /// on real seen centroids.
    fn sr_class_term(
        &self,
        tape: &mut Tape,
        class: ClassId,
        gen_centroid: NodeId,
    ) -> Result<NodeId> {
        let neighbors = self
            .index
            .neighbors(class)
            .ok_or_else(|| Error::InvalidArgument(format!("class {class} not in index")))?;
        let mut terms = Vec::with_capacity(neighbors.len());
        for nb in neighbors {
            let anchor = Tensor::row_vector(
                self.real_seen_centroids
                    .get(nb.class_id)
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!("missing centroid for {}", nb.class_id))
                    })?
                    .to_vec(),
            );
            let anchor_leaf = tape.constant(&anchor);
            let x_sim = cosine_node(tape, anchor_leaf, gen_centroid)?;
            let pen = sr_pair_penalty_node(tape, x_sim, nb.similarity, self.weights.epsilon)?;
            terms.push((1.0, pen));
        }
        tape.combine(&terms)
    }

    fn apply_generator_grads(
        &mut self,
        tape: &mut Tape,
        total: NodeId,
        mount: &GenMount,
    ) -> Result<()> {
        let grads = tape.grad(total, &mount.param_ids)?;
        let grad_tensors: Vec<Tensor> = grads.iter().map(|&g| tape.value_tensor(g)).collect();
        for (i, (tensor, grad)) in gen_tensors_mut(&mut self.model)
            .into_iter()
            .zip(&grad_tensors)
            .enumerate()
        {
            self.opt_g.step(i, tensor, grad)?;
        }
        Ok(())
    }

    /// One unseen-phase step: `unseen_iters` classifier-head updates on
    /// generated unseen features, then one generator update on the
    /// classifier and unseen band losses. Critic head and shared layer stay
    /// frozen throughout.
    pub fn unseen_phase_step(
        &mut self,
        dataset: &FeatureDataset,
        semantics: &SemanticTable,
    ) -> Result<UnseenStepLosses> {
        let m = self.config.batch_size;
        let mut head_mean = 0.0;
        for _ in 0..self.config.unseen_iters {
            let MiniBatch::Unseen(batch) =
                sample_minibatch(dataset, Phase::Unseen, m, &mut self.rng)?
            else {
                unreachable!("unseen phase sampling")
            };
            let t_rows = semantics.rows_for(&batch.labels)?;
            let cond = self.model.condition(&t_rows)?;
            let z = self.noise.sample(m, &mut self.rng);
            let fake = self.model.generator.generate(&z, &cond)?;

            let mut tape = Tape::new();
            let d_nodes = self.model.discriminator.mount_classifier_only(&mut tape);
            let fake_leaf = tape.constant(&fake);
            let (_, logits) = self
                .model
                .discriminator
                .forward(&mut tape, &d_nodes, fake_leaf)?;
            let c = self.model.discriminator.classifier.out_dim();
            let loss = cross_entropy_node(&mut tape, logits, &batch.labels, c)?;
            head_mean += ensure_finite(tape.scalar_value(loss)?, "unseen classifier loss")?;

            let head_ids = [d_nodes.classifier.weight, d_nodes.classifier.bias];
            let grads = tape.grad(loss, &head_ids)?;
            let grad_tensors: Vec<Tensor> =
                grads.iter().map(|&g| tape.value_tensor(g)).collect();
            let mut tensors = disc_tensors_mut(&mut self.model);
            for (slot, grad) in D_CLASSIFIER_SLOTS.iter().zip(&grad_tensors) {
                self.opt_d.step(*slot, tensors[*slot], grad)?;
            }
            self.stats.classifier_updates_unseen += 1;
        }
        head_mean /= self.config.unseen_iters as f64;

        // generator update
        let MiniBatch::Unseen(batch) =
            sample_minibatch(dataset, Phase::Unseen, m, &mut self.rng)?
        else {
            unreachable!("unseen phase sampling")
        };
        let z = self.noise.sample(m, &mut self.rng);
        let t_rows = semantics.rows_for(&batch.labels)?;

        // round-robin slice of unseen classes for the band loss
        let unseen = dataset.unseen_classes();
        let slice: Vec<ClassId> = (0..self.sr_slice.min(unseen.len()))
            .map(|k| unseen[(self.unseen_cursor + k) % unseen.len()])
            .collect();
        self.unseen_cursor = (self.unseen_cursor + slice.len()) % unseen.len();
        let slice_noise: Vec<(ClassId, Tensor)> = slice
            .iter()
            .map(|&c| (c, self.noise.sample(self.config.m_g, &mut self.rng)))
            .collect();

        let mut tape = Tape::new();
        let mount = mount_gen_params(&mut tape, &self.model, true);
        let (d_nodes, _) = mount_disc_params(&mut tape, &self.model, false);
        let z_leaf = tape.constant(&z);
        let cond = self.condition_node(&mut tape, &mount, &t_rows)?;
        let fake = self
            .model
            .generator
            .forward(&mut tape, &mount.gen, z_leaf, cond)?;
        let (_, logits) = self.model.discriminator.forward(&mut tape, &d_nodes, fake)?;
        let c = self.model.discriminator.classifier.out_dim();
        let classifier = cross_entropy_node(&mut tape, logits, &batch.labels, c)?;
        let mut terms = vec![(self.weights.lambda_c, classifier)];

        let mut sr_value = 0.0;
        if self.weights.lambda_sr > 0.0 {
            let mut sr_terms = Vec::new();
            for (class, z_c) in &slice_noise {
                let t_row = Tensor::row_vector(semantics.vector(*class)?.to_vec());
                let z_node = tape.constant(z_c);
                let cond_c = self.condition_node(&mut tape, &mount, &t_row)?;
                let fake_c = self
                    .model
                    .generator
                    .forward(&mut tape, &mount.gen, z_node, cond_c)?;
                let centroid = tape.mean_rows(fake_c);
                sr_terms.push(self.sr_class_term(&mut tape, *class, centroid)?);
            }
            if !sr_terms.is_empty() {
                let k = slice_noise.len() as f64;
                let parts: Vec<(f64, NodeId)> =
                    sr_terms.iter().map(|&n| (1.0 / k, n)).collect();
                let sr = tape.combine(&parts)?;
                sr_value = ensure_finite(tape.scalar_value(sr)?, "unseen band loss")?;
                terms.push((self.weights.lambda_sr, sr));
            }
        }
        let total = tape.combine(&terms)?;
        let cls_value = ensure_finite(tape.scalar_value(classifier)?, "generator classifier loss")?;
        self.apply_generator_grads(&mut tape, total, &mount)?;
        self.stats.gen_updates_unseen += 1;
        Ok(UnseenStepLosses {
            classifier_head: head_mean,
            gen_classifier: cls_value,
            sr: sr_value,
        })
    }

    /// Value and generator-gradient norm of each weighted seen-phase
    /// component, each built in isolation on a fresh tape. A zero loss
    /// weight yields an exactly zero gradient norm.
    pub fn probe_seen_components(
        &mut self,
        dataset: &FeatureDataset,
        semantics: &SemanticTable,
    ) -> Result<Vec<ComponentProbe>> {
        let m = self.config.batch_size;
        let MiniBatch::Seen(batch) = sample_minibatch(dataset, Phase::Seen, m, &mut self.rng)?
        else {
            unreachable!("seen phase sampling")
        };
        let z = self.noise.sample(m, &mut self.rng);
        let t_rows = semantics.rows_for(&batch.labels)?;
        let mut scheduled: Vec<ClassId> = batch.labels.clone();
        scheduled.sort();
        scheduled.dedup();
        let class_noise: Vec<(ClassId, Tensor)> = scheduled
            .iter()
            .map(|&c| (c, self.noise.sample(self.config.m_g, &mut self.rng)))
            .collect();

        let mut probes = Vec::new();
        for name in ["adversarial", "classifier", "visual_pivot", "sr"] {
            let mut tape = Tape::new();
            let mount = mount_gen_params(&mut tape, &self.model, true);
            let (d_nodes, _) = mount_disc_params(&mut tape, &self.model, false);
            let weighted: NodeId = match name {
                "adversarial" => {
                    let z_leaf = tape.constant(&z);
                    let cond = self.condition_node(&mut tape, &mount, &t_rows)?;
                    let fake =
                        self.model
                            .generator
                            .forward(&mut tape, &mount.gen, z_leaf, cond)?;
                    let (critic, _) =
                        self.model.discriminator.forward(&mut tape, &d_nodes, fake)?;
                    let mean = tape.mean_all(critic);
                    tape.scale(mean, -1.0)
                }
                "classifier" => {
                    let z_leaf = tape.constant(&z);
                    let cond = self.condition_node(&mut tape, &mount, &t_rows)?;
                    let fake =
                        self.model
                            .generator
                            .forward(&mut tape, &mount.gen, z_leaf, cond)?;
                    let (_, logits) =
                        self.model.discriminator.forward(&mut tape, &d_nodes, fake)?;
                    let c = self.model.discriminator.classifier.out_dim();
                    let ce = cross_entropy_node(&mut tape, logits, &batch.labels, c)?;
                    tape.scale(ce, self.weights.lambda_c)
                }
                "visual_pivot" | "sr" => {
                    let mut terms = Vec::new();
                    for (class, z_c) in &class_noise {
                        let t_row = Tensor::row_vector(semantics.vector(*class)?.to_vec());
                        let z_node = tape.constant(z_c);
                        let cond_c = self.condition_node(&mut tape, &mount, &t_row)?;
                        let fake_c = self.model.generator.forward(
                            &mut tape, &mount.gen, z_node, cond_c,
                        )?;
                        let centroid = tape.mean_rows(fake_c);
                        if name == "visual_pivot" {
                            let real = Tensor::row_vector(
                                self.real_seen_centroids.get(*class).unwrap().to_vec(),
                            );
                            let real_leaf = tape.constant(&real);
                            let diff = tape.sub(real_leaf, centroid)?;
                            terms.push((1.0 / class_noise.len() as f64, tape.row_norms(diff)));
                        } else {
                            let t = self.sr_class_term(&mut tape, *class, centroid)?;
                            terms.push((1.0 / class_noise.len() as f64, t));
                        }
                    }
                    let raw = tape.combine(&terms)?;
                    let w = if name == "visual_pivot" {
                        self.weights.lambda_vp
                    } else {
                        self.weights.lambda_sr
                    };
                    tape.scale(raw, w)
                }
                _ => unreachable!(),
            };
            let value = tape.scalar_value(weighted)?;
            let grads = tape.grad(weighted, &mount.param_ids)?;
            let norm_sq: f64 = grads
                .iter()
                .flat_map(|&g| tape.values(g).iter().copied())
                .map(|v| v * v)
                .sum();
            probes.push(ComponentProbe {
                name,
                value,
                grad_norm: norm_sq.sqrt(),
            });
        }
        Ok(probes)
    }

    fn evaluate(
        &mut self,
        dataset: &FeatureDataset,
        semantics: &SemanticTable,
    ) -> Result<(f64, GzslResult, Option<f64>)> {
        let seen_scores = classifier_scores(&self.model.discriminator, dataset.test_seen())?;
        let unseen_scores = classifier_scores(&self.model.discriminator, dataset.test_unseen())?;
        let gzsl = gzsl_metrics(&seen_scores, &unseen_scores)?;
        let predictor = match self.config.mode {
            SemanticMode::Attributes => ZslPredictor::Classifier,
            SemanticMode::Tfidf => ZslPredictor::NearestCentroid,
        };
        let zsl = zsl_accuracy(
            &self.model,
            dataset,
            semantics,
            predictor,
            self.config.m_eval,
            &mut self.rng,
        )?;
        let auc = match self.config.mode {
            SemanticMode::Tfidf => Some(
                seen_unseen_auc(&seen_scores, &unseen_scores, dataset.seen_classes())?.auc,
            ),
            SemanticMode::Attributes => None,
        };
        Ok((zsl, gzsl, auc))
    }
}

fn all_classes(dataset: &FeatureDataset) -> Vec<ClassId> {
    dataset
        .seen_classes()
        .iter()
        .chain(dataset.unseen_classes())
        .copied()
        .collect()
}

fn seen_steps_per_epoch(dataset: &FeatureDataset, config: &TrainConfig) -> usize {
    dataset.train().len().div_ceil(config.batch_size).max(1)
}

fn unseen_steps_per_epoch(dataset: &FeatureDataset, config: &TrainConfig) -> usize {
    (dataset.unseen_classes().len() * config.m_g)
        .div_ceil(config.batch_size)
        .max(1)
}

/// Runs the full two-phase optimization, evaluating metrics per epoch and
/// tracking the checkpoint with the best GZSL harmonic mean.
pub fn fit(
    dataset: &FeatureDataset,
    semantics: &SemanticTable,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(dataset, semantics, config)?;
    let seen_steps = seen_steps_per_epoch(dataset, config);
    let unseen_steps = unseen_steps_per_epoch(dataset, config);
    let mut trace = TrainTrace::default();
    let mut best_model = trainer.model.clone();
    let mut best_epoch = 0usize;
    let mut best_h = f64::NEG_INFINITY;

    for epoch in 1..=config.epochs {
        if trainer.model.denoiser.is_some() {
            trainer.refresh_similarity(dataset, semantics)?;
        }
        let mut seen_acc = [0.0; 5];
        for _ in 0..seen_steps {
            let l = trainer.seen_phase_step(dataset, semantics)?;
            seen_acc[0] += l.critic_objective;
            seen_acc[1] += l.adversarial;
            seen_acc[2] += l.classifier;
            seen_acc[3] += l.visual_pivot;
            seen_acc[4] += l.sr;
        }
        let mut unseen_acc = [0.0; 3];
        for _ in 0..unseen_steps {
            let l = trainer.unseen_phase_step(dataset, semantics)?;
            unseen_acc[0] += l.classifier_head;
            unseen_acc[1] += l.gen_classifier;
            unseen_acc[2] += l.sr;
        }
        trainer.model.step += 1;

        let (zsl, gzsl, auc) = if config.eval_every > 0
            && (epoch % config.eval_every == 0 || epoch == config.epochs)
        {
            let (z, g, a) = trainer.evaluate(dataset, semantics)?;
            (z, g, a)
        } else {
            (
                0.0,
                GzslResult {
                    unseen: 0.0,
                    seen: 0.0,
                    harmonic: 0.0,
                },
                None,
            )
        };
        let record = EpochRecord {
            epoch,
            critic_objective: seen_acc[0] / seen_steps as f64,
            gen_adversarial: seen_acc[1] / seen_steps as f64,
            classifier_seen: seen_acc[2] / seen_steps as f64,
            visual_pivot: seen_acc[3] / seen_steps as f64,
            sr_seen: seen_acc[4] / seen_steps as f64,
            classifier_unseen: unseen_acc[0] / unseen_steps as f64,
            sr_unseen: unseen_acc[2] / unseen_steps as f64,
            zsl_top1: zsl,
            gzsl_unseen: gzsl.unseen,
            gzsl_seen: gzsl.seen,
            gzsl_harmonic: gzsl.harmonic,
            auc,
        };
        if gzsl.harmonic > best_h {
            best_h = gzsl.harmonic;
            best_epoch = epoch;
            best_model = trainer.model.clone();
        }
        trace.records.push(record);
    }
    Ok(TrainOutcome {
        model: trainer.model.clone(),
        best_model,
        best_epoch,
        best_harmonic: best_h.max(0.0),
        trace,
        stats: trainer.stats,
    })
}
