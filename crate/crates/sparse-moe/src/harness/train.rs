//! The training loop, evaluation, and artifact writing.
//!
//! Every step builds a fresh tape: register parameters, forward, one
//! backward sweep, one optimizer update. The loss is the task cross-entropy
//! plus the two balance penalties in noisy mode, or cross-entropy plus the
//! importance penalty in batchwise mode, where load balance is enforced by
//! the mask itself and the inference thresholds learn by their own descent
//! rule after each step.

use crate::balance::{cv_squared_node, importance_loss, importance_vec, load_node, BalanceReport};
use crate::batchwise::{batchwise_m, threshold_step};
use crate::error::{Error, Result};
use crate::harness::checkpoint;
use crate::harness::config::{GatingMode, ToyLmConfig};
use crate::harness::corpus::Corpus;
use crate::harness::metrics::{write_csv, TrainRecord};
use crate::harness::model::{forward, register, ForwardOutput, ModelParams, Phase};
use crate::kernel::{Matrix, Tape};
use crate::optim::{Adam, AdamConfig, LrSchedule};
use std::path::{Path, PathBuf};

/// Everything `train` leaves behind.
pub struct TrainArtifacts {
    pub records: Vec<TrainRecord>,
    pub final_record: TrainRecord,
    pub params: ModelParams,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub report_path: PathBuf,
}

/// Threshold learning rate for batchwise mode, matching the fitting rule's
/// scale in the batchwise module.
const THRESHOLD_LR: f64 = 0.01;

fn load_corpus(cfg: &ToyLmConfig) -> Result<Corpus> {
    Corpus::load(
        &cfg.corpus,
        cfg.vocab_size,
        cfg.corpus.stream_seed(cfg.seed),
        cfg.train_tokens,
        cfg.eval_tokens,
    )
}

/// Mean eval-split perplexity: exp of the average per-token cross-entropy
/// over `eval_batches` deterministic batches, noise and dropout off.
pub fn evaluate(cfg: &ToyLmConfig, params: &ModelParams, corpus: &Corpus) -> Result<f64> {
    let mut total_ce = 0.0;
    for i in 0..cfg.eval_batches {
        let batch = corpus.eval_batch(cfg.context_len, cfg.batch_size, i)?;
        let mut tape = Tape::new();
        let nodes = register(params, &mut tape)?;
        let out = forward(&mut tape, &nodes, cfg, &params.thresholds, &batch, Phase::Eval)?;
        let ce = tape.softmax_xent(out.logits, &batch.targets)?;
        total_ce += tape.value(ce).at(0, 0);
    }
    Ok((total_ce / cfg.eval_batches as f64).exp())
}

/// Load a checkpoint and measure perplexity, optionally on a different text
/// file instead of the corpus recorded in the checkpoint.
pub fn evaluate_checkpoint(path: &Path, data: Option<&Path>) -> Result<f64> {
    let (mut cfg, entries) = checkpoint::load(path)?;
    if let Some(file) = data {
        cfg.corpus = crate::harness::config::CorpusSource::File {
            file: file.to_path_buf(),
        };
        cfg.validate()?;
    }
    let params = ModelParams::from_named(&cfg, entries)?;
    let corpus = load_corpus(&cfg)?;
    evaluate(&cfg, &params, &corpus)
}

/// Balance statistics of one training batch's realized gates.
fn balance_report(tape: &Tape, cfg: &ToyLmConfig, fwd: &ForwardOutput, load_vec: &[f64]) -> Result<BalanceReport> {
    let importance = importance_vec(tape.value(fwd.gates))?;
    let load = match cfg.gating_mode {
        GatingMode::NoisyTopk => load_vec.to_vec(),
        GatingMode::Batchwise => {
            let mask = &fwd
                .batchwise
                .as_ref()
                .expect("batchwise output present in batchwise mode")
                .mask;
            mask.col_sums().data().to_vec()
        }
    };
    Ok(BalanceReport::new(importance, load))
}

pub fn train(cfg: &ToyLmConfig, out_dir: &Path) -> Result<TrainArtifacts> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let corpus = load_corpus(cfg)?;
    let mut params = ModelParams::init(cfg)?;
    let mut adam_cfg = AdamConfig::new(LrSchedule::new(cfg.base_lr, cfg.warmup_steps)?);
    adam_cfg.factored = cfg.factored_adam;
    let mut adam = Adam::new(adam_cfg)?;

    let mut records = Vec::new();
    let mut row_evals: u64 = 0;
    for step in 1..=cfg.steps as u64 {
        let batch = corpus.train_batch(cfg.context_len, cfg.batch_size, cfg.seed, step)?;
        let mut tape = Tape::new();
        let nodes = register(&params, &mut tape)?;
        let fwd = forward(
            &mut tape,
            &nodes,
            cfg,
            &params.thresholds,
            &batch,
            Phase::Train { step },
        )?;
        let xent = tape.softmax_xent(fwd.logits, &batch.targets)?;
        let mut terms = vec![xent];
        let mut load_values = Vec::new();
        match cfg.gating_mode {
            GatingMode::NoisyTopk => {
                terms.push(importance_loss(&mut tape, fwd.gates, cfg.w_importance)?);
                let gate = fwd
                    .gate_result
                    .as_ref()
                    .expect("noisy gate result present in noisy mode");
                let load = load_node(&mut tape, gate)?;
                load_values = tape.value(load).data().to_vec();
                let cv2 = cv_squared_node(&mut tape, load)?;
                terms.push(tape.scale(cv2, cfg.w_load));
            }
            GatingMode::Batchwise => {
                terms.push(importance_loss(&mut tape, fwd.gates, cfg.w_importance)?);
            }
        }
        let loss = tape.add_n(&terms)?;
        let loss_value = tape.value(loss).at(0, 0);
        if !loss_value.is_finite() {
            return Err(Error::Diverged {
                step: step as usize,
                loss: loss_value,
            });
        }

        let mut grads = tape.backward(loss)?;
        let grad_mats: Vec<Matrix> = nodes
            .named_order()
            .into_iter()
            .map(|id| {
                grads.take(id).unwrap_or_else(|| {
                    let (r, c) = tape.shape(id);
                    Matrix::zeros(r, c)
                })
            })
            .collect();
        let mut values = params.collect();
        let lr = adam.step(&mut values, &grad_mats)?;
        params.restore(values)?;

        if cfg.gating_mode == GatingMode::Batchwise {
            let bw = fwd.batchwise.as_ref().expect("batchwise output");
            let (m, _) = batchwise_m(cfg.k, cfg.batch_size, cfg.n_experts);
            threshold_step(
                tape.value(bw.dense),
                &mut params.thresholds,
                m,
                THRESHOLD_LR,
            )?;
        }

        row_evals += fwd.expert_rows as u64;
        if step % cfg.metrics_every as u64 == 0 || step == cfg.steps as u64 {
            let report = balance_report(&tape, cfg, &fwd, &load_values)?;
            let eval_perplexity = evaluate(cfg, &params, &corpus)?;
            records.push(TrainRecord {
                step: step as usize,
                train_loss: loss_value,
                eval_perplexity,
                cv_importance: report.cv_importance,
                cv_load: report.cv_load,
                max_over_mean_load: report.max_over_mean_load,
                lr,
                expert_row_evals: row_evals,
            });
        }
    }

    let checkpoint_path = out_dir.join("checkpoint.bin");
    let thresholds_matrix;
    let mut named: Vec<(String, &Matrix)> = params
        .named()
        .into_iter()
        .map(|(n, m)| (n, m))
        .collect();
    if cfg.gating_mode == GatingMode::Batchwise {
        thresholds_matrix =
            Matrix::from_vec(1, params.thresholds.len(), params.thresholds.clone())?;
        named.push(("thresholds".to_string(), &thresholds_matrix));
    }
    checkpoint::save(&checkpoint_path, cfg, &named)?;

    let metrics_path = out_dir.join("metrics.csv");
    write_csv(&metrics_path, &records)?;

    let report_path = out_dir.join("report.txt");
    std::fs::write(&report_path, params.report(cfg).render())?;

    let final_record = *records.last().expect("steps >= 1 leaves at least one record");
    Ok(TrainArtifacts {
        records,
        final_record,
        params,
        checkpoint_path,
        metrics_path,
        report_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::tests::tiny;
    use crate::harness::config::CorpusSource;

    #[test]
    fn training_runs_and_writes_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.steps = 4;
        cfg.metrics_every = 2;
        let out = train(&cfg, dir.path()).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.final_record.step, 4);
        assert_eq!(
            out.final_record.expert_row_evals,
            (cfg.k * cfg.batch_size * 4) as u64
        );
        assert!(out.final_record.train_loss.is_finite());
        assert!(out.checkpoint_path.exists());
        assert!(out.metrics_path.exists());
        let report = std::fs::read_to_string(&out.report_path).unwrap();
        assert!(report.contains("parameters.moe"));
        let csv = std::fs::read_to_string(&out.metrics_path).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn fixed_seed_reproduces_metrics_exactly() {
        let mut cfg = tiny();
        cfg.steps = 3;
        cfg.metrics_every = 1;
        cfg.dropout_prob = 0.1;
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = train(&cfg, d1.path()).unwrap();
        let b = train(&cfg, d2.path()).unwrap();
        let csv_a = std::fs::read_to_string(&a.metrics_path).unwrap();
        let csv_b = std::fs::read_to_string(&b.metrics_path).unwrap();
        assert_eq!(csv_a, csv_b);
        let mut cfg_other = cfg;
        cfg_other.seed = 99;
        let d3 = tempfile::tempdir().unwrap();
        let c = train(&cfg_other, d3.path()).unwrap();
        assert_ne!(
            csv_a,
            std::fs::read_to_string(&c.metrics_path).unwrap()
        );
    }

    #[test]
    fn checkpoint_evaluation_reproduces_the_reported_perplexity() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.steps = 3;
        let out = train(&cfg, dir.path()).unwrap();
        let ppl = evaluate_checkpoint(&out.checkpoint_path, None).unwrap();
        assert_eq!(ppl, out.final_record.eval_perplexity);
    }

    #[test]
    fn zero_model_predicts_uniformly() {
        let cfg = tiny();
        let mut params = ModelParams::init(&cfg).unwrap();
        params.embed = Matrix::zeros(cfg.vocab_size, cfg.model_dim);
        params.w_enc = Matrix::zeros(cfg.context_len * cfg.model_dim, cfg.model_dim);
        params.w_out = Matrix::zeros(cfg.model_dim, cfg.vocab_size);
        let corpus = load_corpus(&cfg).unwrap();
        let ppl = evaluate(&cfg, &params, &corpus).unwrap();
        assert!(
            (ppl - cfg.vocab_size as f64).abs() < 1e-6,
            "uniform perplexity {ppl}"
        );
    }

    #[test]
    fn recompute_flag_is_numerically_inert_but_drops_retention() {
        let mut cfg = tiny();
        cfg.steps = 3;
        cfg.metrics_every = 1;
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let retain = train(&cfg, d1.path()).unwrap();
        cfg.recompute_expert_activations = true;
        let recompute = train(&cfg, d2.path()).unwrap();
        assert_eq!(
            std::fs::read_to_string(&retain.metrics_path).unwrap(),
            std::fs::read_to_string(&recompute.metrics_path).unwrap()
        );
        // Checkpoint bytes differ only in the config echo; the trained
        // parameters must be bit-identical.
        let (_, a) = checkpoint::load(&retain.checkpoint_path).unwrap();
        let (_, b) = checkpoint::load(&recompute.checkpoint_path).unwrap();
        assert_eq!(a.len(), b.len());
        for ((na, ma), (nb, mb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(ma.data(), mb.data(), "parameter {na} diverged");
        }
        // Retention counters differ: one tape per mode proves the flag bites.
        let params = ModelParams::init(&cfg).unwrap();
        let corpus = load_corpus(&cfg).unwrap();
        let batch = corpus.train_batch(cfg.context_len, cfg.batch_size, cfg.seed, 1).unwrap();
        let count_retained = |recompute: bool| {
            let mut c = cfg.clone();
            c.recompute_expert_activations = recompute;
            let mut tape = Tape::new();
            let nodes = register(&params, &mut tape).unwrap();
            forward(&mut tape, &nodes, &c, &params.thresholds, &batch, Phase::Train { step: 1 })
                .unwrap();
            tape.retained_hidden()
        };
        assert_eq!(count_retained(true), 0);
        assert!(count_retained(false) > 0);
    }

    #[test]
    fn batchwise_training_learns_thresholds_and_checkpoints_them() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.gating_mode = GatingMode::Batchwise;
        cfg.steps = 12;
        cfg.metrics_every = 6;
        let out = train(&cfg, dir.path()).unwrap();
        assert!(out.params.thresholds.iter().any(|&t| t != 0.0));
        // Batchwise load is exactly balanced by construction.
        assert_eq!(out.final_record.cv_load, 0.0);
        assert_eq!(out.final_record.max_over_mean_load, 1.0);
        let ppl = evaluate_checkpoint(&out.checkpoint_path, None).unwrap();
        assert_eq!(ppl, out.final_record.eval_perplexity);
    }

    #[test]
    fn evaluating_on_an_override_file_works() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.steps = 2;
        let out = train(&cfg, dir.path()).unwrap();
        let text_path = dir.path().join("other.txt");
        std::fs::write(&text_path, "alpha beta gamma delta epsilon zeta eta theta ".repeat(30))
            .unwrap();
        let ppl = evaluate_checkpoint(&out.checkpoint_path, Some(&text_path)).unwrap();
        assert!(ppl.is_finite() && ppl > 1.0);
    }

    #[test]
    fn file_corpus_trains_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let text_path = dir.path().join("corpus.txt");
        std::fs::write(
            &text_path,
            "one two three four five six seven eight nine ten ".repeat(60),
        )
        .unwrap();
        let mut cfg = tiny();
        cfg.corpus = CorpusSource::File { file: text_path };
        cfg.steps = 2;
        let out = train(&cfg, dir.path()).unwrap();
        assert!(out.final_record.train_loss.is_finite());
    }
}
