//! Command implementations behind the `lsrgan` binary: dataset synthesis,
//! training, evaluation and parameter sweeps.
//!
//! Run configuration is a flat `key=value` text file (unknown keys are
//! rejected); explicit command-line settings override file values. Every
//! output file starts with a config-echo comment block.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::data::{
    load_dataset, make_synthetic, save_dataset, save_latents, FeatureDataset, SemanticMode,
    SemanticTable, SynthSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{
    avg_confidence, classifier_scores, gzsl_metrics, seen_unseen_auc, zsl_accuracy, ZslPredictor,
};
use crate::models::{load_checkpoint, save_checkpoint, LsrGanModel};
use crate::training::{fit, TrainConfig};

// ---------------------------------------------------------------------
// Flat key=value configuration schema
// ---------------------------------------------------------------------

/// Applies one configuration pair to the train/synth settings.
pub fn apply_key(train: &mut TrainConfig, synth: &mut SynthSpec, key: &str, value: &str) -> Result<()> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value
            .parse::<T>()
            .map_err(|_| Error::Config(format!("cannot parse '{value}' for key '{key}'")))
    }
    match key {
        "epochs" => train.epochs = num(key, value)?,
        "batch_size" => train.batch_size = num(key, value)?,
        "critic_iters" => train.critic_iters = num(key, value)?,
        "unseen_iters" => train.unseen_iters = num(key, value)?,
        "lambda_c" => train.weights.lambda_c = num(key, value)?,
        "lambda_vp" => train.weights.lambda_vp = num(key, value)?,
        "lambda_sr" => train.weights.lambda_sr = num(key, value)?,
        "lambda_gp" => train.weights.lambda_gp = num(key, value)?,
        "epsilon" => train.weights.epsilon = num(key, value)?,
        "penalty_p" => train.weights.penalty_p = num(key, value)?,
        "n_c" => train.n_c = num(key, value)?,
        "learning_rate" => train.learning_rate = num(key, value)?,
        "beta1" => train.beta1 = num(key, value)?,
        "beta2" => train.beta2 = num(key, value)?,
        "m_g" => train.m_g = num(key, value)?,
        "m_eval" => train.m_eval = num(key, value)?,
        "seed" => train.seed = num(key, value)?,
        "ablation" => train.ablation = value.parse()?,
        "mode" => train.mode = value.parse()?,
        "output_activation" => train.output_activation = value.parse()?,
        "noise_dim" => train.noise_dim = num(key, value)?,
        "hidden_dim" => train.hidden_dim = num(key, value)?,
        "denoiser_dim" => train.denoiser_dim = num(key, value)?,
        "leaky_slope" => train.leaky_slope = num(key, value)?,
        "eval_every" => train.eval_every = num(key, value)?,
        "sr_unseen_slice" => {
            train.sr_unseen_slice = if value == "auto" {
                None
            } else {
                Some(num(key, value)?)
            }
        }
        "synth_latent_dim" => synth.latent_dim = num(key, value)?,
        "synth_seen_classes" => synth.seen_classes = num(key, value)?,
        "synth_unseen_classes" => synth.unseen_classes = num(key, value)?,
        "synth_visual_dim" => synth.visual_dim = num(key, value)?,
        "synth_semantic_dim" => synth.semantic_dim = num(key, value)?,
        "synth_samples_per_class" => synth.samples_per_class = num(key, value)?,
        "synth_sigma_x" => synth.sigma_x = num(key, value)?,
        "synth_sigma_t" => synth.sigma_t = num(key, value)?,
        "synth_visual_scale" => synth.visual_scale = num(key, value)?,
        "synth_holdout_fraction" => synth.holdout_fraction = num(key, value)?,
        "synth_seed" => synth.seed = num(key, value)?,
        other => return Err(Error::Config(format!("unknown config key '{other}'"))),
    }
    Ok(())
}

/// Full key=value echo of the effective settings, one per line.
pub fn config_echo(train: &TrainConfig, synth: &SynthSpec) -> String {
    let slice = train
        .sr_unseen_slice
        .map(|v| v.to_string())
        .unwrap_or_else(|| "auto".into());
    format!(
        "epochs={}\nbatch_size={}\ncritic_iters={}\nunseen_iters={}\n\
         lambda_c={}\nlambda_vp={}\nlambda_sr={}\nlambda_gp={}\nepsilon={}\npenalty_p={}\n\
         n_c={}\nlearning_rate={}\nbeta1={}\nbeta2={}\nm_g={}\nm_eval={}\nseed={}\n\
         ablation={}\nmode={}\noutput_activation={}\nnoise_dim={}\nhidden_dim={}\n\
         denoiser_dim={}\nleaky_slope={}\neval_every={}\nsr_unseen_slice={}\n\
         synth_latent_dim={}\nsynth_seen_classes={}\nsynth_unseen_classes={}\n\
         synth_visual_dim={}\nsynth_semantic_dim={}\nsynth_samples_per_class={}\n\
         synth_sigma_x={}\nsynth_sigma_t={}\nsynth_visual_scale={}\n\
         synth_holdout_fraction={}\nsynth_seed={}",
        train.epochs,
        train.batch_size,
        train.critic_iters,
        train.unseen_iters,
        train.weights.lambda_c,
        train.weights.lambda_vp,
        train.weights.lambda_sr,
        train.weights.lambda_gp,
        train.weights.epsilon,
        train.weights.penalty_p,
        train.n_c,
        train.learning_rate,
        train.beta1,
        train.beta2,
        train.m_g,
        train.m_eval,
        train.seed,
        train.ablation.as_str(),
        train.mode.as_str(),
        train.output_activation.as_str(),
        train.noise_dim,
        train.hidden_dim,
        train.denoiser_dim,
        train.leaky_slope,
        train.eval_every,
        slice,
        synth.latent_dim,
        synth.seen_classes,
        synth.unseen_classes,
        synth.visual_dim,
        synth.semantic_dim,
        synth.samples_per_class,
        synth.sigma_x,
        synth.sigma_t,
        synth.visual_scale,
        synth.holdout_fraction,
        synth.seed,
    )
}

/// Parses a config file into the given settings (later lines win).
pub fn apply_config_file(
    train: &mut TrainConfig,
    synth: &mut SynthSpec,
    path: &Path,
) -> Result<()> {
    let text = fs::read_to_string(path)?;
    for (lineno, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (key, value) = body.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{}:{}: expected key=value, got '{body}'",
                path.display(),
                lineno + 1
            ))
        })?;
        apply_key(train, synth, key.trim(), value.trim()).map_err(|e| {
            Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
    }
    Ok(())
}

/// Applies repeatable `--set key=value` pairs.
pub fn apply_overrides(
    train: &mut TrainConfig,
    synth: &mut SynthSpec,
    pairs: &[String],
) -> Result<()> {
    for pair in pairs {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{pair}'")))?;
        apply_key(train, synth, key.trim(), value.trim())?;
    }
    Ok(())
}

/// Validates LSRGAN_THREADS when set. All computation currently runs on one
/// thread, so any positive cap is already honored.
pub fn thread_cap() -> Result<usize> {
    match std::env::var("LSRGAN_THREADS") {
        Ok(v) => {
            let n: usize = v
                .parse()
                .map_err(|_| Error::Config(format!("LSRGAN_THREADS must be a positive integer, got '{v}'")))?;
            if n == 0 {
                return Err(Error::Config("LSRGAN_THREADS must be at least 1".into()));
            }
            Ok(n)
        }
        Err(_) => Ok(1),
    }
}

fn write_with_echo(path: &Path, echo: &str, body: &str) -> Result<()> {
    let mut text: String = echo.lines().map(|l| format!("# {l}\n")).collect();
    text.push_str(body);
    fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------

/// Writes the synthetic dataset files plus the ground-truth latents.
pub fn cmd_synth(synth: &SynthSpec, train: &TrainConfig, out_dir: &Path) -> Result<()> {
    let echo = config_echo(train, synth);
    let out = make_synthetic(synth)?;
    save_dataset(out_dir, &out.dataset, &out.semantics, &echo)?;
    save_latents(out_dir, &out.latents, &echo)?;
    println!(
        "wrote synthetic dataset to {} ({})",
        out_dir.display(),
        out.dataset.summary(&out.semantics)
    );
    Ok(())
}

fn load_dir(data_dir: &Path, mode: SemanticMode) -> Result<(FeatureDataset, SemanticTable)> {
    load_dataset(
        &data_dir.join("visual.txt"),
        &data_dir.join("semantic.txt"),
        &data_dir.join("split.txt"),
        mode,
    )
}

/// Trains on a dataset directory; writes the best-harmonic checkpoint and
/// the per-epoch trace CSV.
pub fn cmd_train(
    data_dir: &Path,
    train: &TrainConfig,
    synth: &SynthSpec,
    out_dir: &Path,
) -> Result<()> {
    train.validate()?;
    let (dataset, semantics) = load_dir(data_dir, train.mode)?;
    println!("loaded {}", dataset.summary(&semantics));
    let echo = config_echo(train, synth);
    let outcome = fit(&dataset, &semantics, train)?;
    fs::create_dir_all(out_dir)?;
    save_checkpoint(&out_dir.join("checkpoint.bin"), &outcome.best_model, &echo)?;
    fs::write(
        out_dir.join("trace.csv"),
        outcome.trace.to_csv(&echo),
    )?;
    let last = outcome.trace.records.last().expect("at least one epoch");
    println!(
        "trained {} epochs; best H {:.4} at epoch {}; final ZSL {:.4} H {:.4}",
        train.epochs, outcome.best_harmonic, outcome.best_epoch, last.zsl_top1, last.gzsl_harmonic
    );
    Ok(())
}

/// Metric selection for `cmd_eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Zsl,
    Gzsl,
    Auc,
    Confidence,
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zsl" => Ok(MetricKind::Zsl),
            "gzsl" => Ok(MetricKind::Gzsl),
            "auc" => Ok(MetricKind::Auc),
            "confidence" => Ok(MetricKind::Confidence),
            other => Err(Error::Config(format!(
                "unknown metric '{other}' (expected zsl|gzsl|auc|confidence)"
            ))),
        }
    }
}

fn checkpoint_config(echo: &str) -> Result<(TrainConfig, SynthSpec)> {
    let mut train = TrainConfig::default();
    let mut synth = SynthSpec::default();
    for line in echo.lines() {
        if let Some((key, value)) = line.split_once('=') {
            apply_key(&mut train, &mut synth, key.trim(), value.trim())?;
        }
    }
    Ok((train, synth))
}

fn validate_model_against(model: &LsrGanModel, dataset: &FeatureDataset, table: &SemanticTable) -> Result<()> {
    if model.config.visual_dim != dataset.visual_dim()
        || model.config.class_count != dataset.class_count()
        || model.config.semantic_dim != table.dim()
    {
        return Err(Error::data(
            "checkpoint",
            None,
            format!(
                "model dims (V={}, C={}, L={}) do not match dataset (V={}, C={}, L={})",
                model.config.visual_dim,
                model.config.class_count,
                model.config.semantic_dim,
                dataset.visual_dim(),
                dataset.class_count(),
                table.dim()
            ),
        ));
    }
    Ok(())
}

/// Evaluates a checkpoint; writes one report file per requested metric and
/// a plain-text summary.
pub fn cmd_eval(
    checkpoint: &Path,
    data_dir: &Path,
    metrics: &[MetricKind],
    seed_override: Option<u64>,
    out_dir: &Path,
) -> Result<()> {
    let (model, echo) = load_checkpoint(checkpoint)?;
    let (train, _) = checkpoint_config(&echo)?;
    let (dataset, semantics) = load_dir(data_dir, train.mode)?;
    validate_model_against(&model, &dataset, &semantics)?;
    fs::create_dir_all(out_dir)?;
    let seed = seed_override.unwrap_or(train.seed);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut summary = String::new();

    let seen_scores = classifier_scores(&model.discriminator, dataset.test_seen())?;
    let unseen_scores = classifier_scores(&model.discriminator, dataset.test_unseen())?;

    for metric in metrics {
        match metric {
            MetricKind::Zsl => {
                let predictor = match train.mode {
                    SemanticMode::Attributes => ZslPredictor::Classifier,
                    SemanticMode::Tfidf => ZslPredictor::NearestCentroid,
                };
                let acc = zsl_accuracy(
                    &model,
                    &dataset,
                    &semantics,
                    predictor,
                    train.m_eval,
                    &mut rng,
                )?;
                write_with_echo(&out_dir.join("zsl.csv"), &echo, &format!("top1\n{acc}\n"))?;
                summary.push_str(&format!("zsl top1: {acc:.4}\n"));
            }
            MetricKind::Gzsl => {
                let g = gzsl_metrics(&seen_scores, &unseen_scores)?;
                write_with_echo(
                    &out_dir.join("gzsl.csv"),
                    &echo,
                    &format!("u,s,h\n{},{},{}\n", g.unseen, g.seen, g.harmonic),
                )?;
                summary.push_str(&format!(
                    "gzsl: U {:.4} S {:.4} H {:.4}\n",
                    g.unseen, g.seen, g.harmonic
                ));
            }
            MetricKind::Auc => {
                let res = seen_unseen_auc(&seen_scores, &unseen_scores, dataset.seen_classes())?;
                write_with_echo(&out_dir.join("auc.csv"), &echo, &format!("auc\n{}\n", res.auc))?;
                let mut curve = String::from("s,u\n");
                for (s, u) in &res.curve {
                    curve.push_str(&format!("{s},{u}\n"));
                }
                write_with_echo(&out_dir.join("auc_curve.csv"), &echo, &curve)?;
                summary.push_str(&format!(
                    "seen-unseen auc: {:.4}{}\n",
                    res.auc,
                    if res.degenerate { " (degenerate sweep)" } else { "" }
                ));
            }
            MetricKind::Confidence => {
                let report = avg_confidence(&seen_scores, &unseen_scores)?;
                write_with_echo(
                    &out_dir.join("confidence.csv"),
                    &echo,
                    &format!(
                        "seen_mean,unseen_mean\n{},{}\n",
                        report.seen_mean, report.unseen_mean
                    ),
                )?;
                let mut top3 = String::from("class,guess1,prob1,guess2,prob2,guess3,prob3\n");
                for c in &report.per_class {
                    top3.push_str(&c.class_id.to_string());
                    for (g, p) in &c.top3 {
                        top3.push_str(&format!(",{g},{p}"));
                    }
                    top3.push('\n');
                }
                write_with_echo(&out_dir.join("confidence_top3.csv"), &echo, &top3)?;
                summary.push_str(&format!(
                    "confidence: seen {:.4} unseen {:.4}\n",
                    report.seen_mean, report.unseen_mean
                ));
            }
        }
    }
    write_with_echo(&out_dir.join("summary.txt"), &echo, &summary)?;
    print!("{summary}");
    Ok(())
}

/// Sweep parameter selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Epsilon,
    LambdaSr,
    NC,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" => Ok(SweepParam::Epsilon),
            "lambda_sr" => Ok(SweepParam::LambdaSr),
            "n_c" => Ok(SweepParam::NC),
            other => Err(Error::Config(format!(
                "unknown sweep parameter '{other}' (expected epsilon|lambda_sr|n_c)"
            ))),
        }
    }
}

/// Trains once per requested value and records the best checkpoint metrics
/// in sweep.csv (one row per value).
pub fn cmd_sweep(
    data_dir: &Path,
    base: &TrainConfig,
    synth: &SynthSpec,
    param: SweepParam,
    values: &[f64],
    out_dir: &Path,
) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let (dataset, semantics) = load_dir(data_dir, base.mode)?;
    fs::create_dir_all(out_dir)?;
    let mut rows = String::from("value,zsl_top1,gzsl_u,gzsl_s,gzsl_h\n");
    for &value in values {
        let mut cfg = base.clone();
        match param {
            SweepParam::Epsilon => {
                if value < 0.0 {
                    return Err(Error::Config(format!("epsilon must be >= 0, got {value}")));
                }
                cfg.weights.epsilon = value;
            }
            SweepParam::LambdaSr => {
                if value < 0.0 {
                    return Err(Error::Config(format!("lambda_sr must be >= 0, got {value}")));
                }
                cfg.weights.lambda_sr = value;
            }
            SweepParam::NC => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!(
                        "n_c sweep values must be positive integers, got {value}"
                    )));
                }
                cfg.n_c = value as usize;
            }
        }
        cfg.validate()?;
        let outcome = fit(&dataset, &semantics, &cfg)?;
        let best = outcome
            .trace
            .records
            .iter()
            .find(|r| r.epoch == outcome.best_epoch)
            .or_else(|| outcome.trace.records.last())
            .expect("trace has records");
        rows.push_str(&format!(
            "{},{},{},{},{}\n",
            value, best.zsl_top1, best.gzsl_unseen, best.gzsl_seen, best.gzsl_harmonic
        ));
        println!(
            "{} = {}: ZSL {:.4} H {:.4}",
            match param {
                SweepParam::Epsilon => "epsilon",
                SweepParam::LambdaSr => "lambda_sr",
                SweepParam::NC => "n_c",
            },
            value,
            best.zsl_top1,
            best.gzsl_harmonic
        );
    }
    write_with_echo(&out_dir.join("sweep.csv"), &config_echo(base, synth), &rows)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips_through_apply_key() {
        let mut train = TrainConfig {
            epochs: 3,
            hidden_dim: 33,
            sr_unseen_slice: Some(2),
            ..TrainConfig::default()
        };
        train.weights.epsilon = 0.321;
        let synth = SynthSpec {
            sigma_x: 0.125,
            seed: 99,
            ..SynthSpec::default()
        };
        let echo = config_echo(&train, &synth);
        let mut train2 = TrainConfig::default();
        let mut synth2 = SynthSpec::default();
        for line in echo.lines() {
            let (k, v) = line.split_once('=').unwrap();
            apply_key(&mut train2, &mut synth2, k, v).unwrap();
        }
        assert_eq!(config_echo(&train2, &synth2), echo);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut train = TrainConfig::default();
        let mut synth = SynthSpec::default();
        let err = apply_key(&mut train, &mut synth, "bogus", "1").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn config_file_parsing_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "epochs=4\n# comment line\nnot a pair\n").unwrap();
        let mut train = TrainConfig::default();
        let mut synth = SynthSpec::default();
        let err = apply_config_file(&mut train, &mut synth, &path).unwrap_err();
        assert!(err.to_string().contains(":3:"), "{err}");
        assert_eq!(train.epochs, 4);
    }

    #[test]
    fn set_override_wins_over_defaults() {
        let mut train = TrainConfig::default();
        let mut synth = SynthSpec::default();
        apply_overrides(
            &mut train,
            &mut synth,
            &["epochs=9".into(), "synth_sigma_x=0".into()],
        )
        .unwrap();
        assert_eq!(train.epochs, 9);
        assert_eq!(synth.sigma_x, 0.0);
    }
}
