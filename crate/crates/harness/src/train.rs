//! Teacher fine-tuning and student distillation loops.
//!
//! A run is a pure function of its [`ExperimentConfig`] (including the seed),
//! the dataset it generates, and for distillation the teacher parameters.
//! Per-example work inside a batch runs on the rayon pool, but results are
//! reduced sequentially in batch order, so the thread count never changes a
//! single bit of the outcome.

use std::time::Instant;

use ckd_core::baselines::{baseline_objective, check_compatibility, ObjectiveKind, Projection};
use ckd_core::distill::{align_layers, logit_kd_loss, DistillConfig, LayerAlignment, LossBreakdown};
use ckd_core::model::{backward, encoder_forward, forward, Example, LayerStates, ParamSet, StateGrads, Structure};
use ckd_core::optim::BertAdam;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, TrainConfig};
use crate::error::{HarnessError, Result};
use crate::record::{fingerprint, Metrics, RunKind, RunRecord, StepRecord, RUN_SCHEMA};
use crate::task::{generate_task, Dataset};

const DROPOUT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ParamSet,
    pub record: RunRecord,
}

/// Fraction of `examples` whose arg-max logit is the label.
pub fn evaluate(params: &ParamSet, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<bool> = examples
        .par_iter()
        .map(|ex| -> Result<bool> {
            let s = encoder_forward(&ex.tokens, params)?;
            Ok(argmax(s.logits.as_slice().expect("contiguous logits")) == ex.label)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / examples.len() as f64)
}

fn argmax(z: &[f64]) -> usize {
    z.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Evaluation-mode teacher states for every example, without the activation
/// trace that only backward needs.
pub fn teacher_states(teacher: &ParamSet, examples: &[Example]) -> Result<Vec<LayerStates>> {
    Ok(examples
        .par_iter()
        .map(|ex| {
            let s = encoder_forward(&ex.tokens, teacher)?;
            Ok(LayerStates::from_parts(s.reps, s.attn, s.values, s.logits, s.mask))
        })
        .collect::<ckd_core::Result<_>>()?)
}

/// Per-example loss and gradients.
struct ExampleGrad {
    losses: LossBreakdown,
    aux: Option<f64>,
    params: ParamSet,
    projection: Option<Array2<f64>>,
}

fn dropout_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DROPOUT_SALT);
    rng.set_stream(stream);
    rng
}

/// Shared mini-batch loop. `example` gets the current parameters, the index
/// of the example in the training set, and a dropout generator.
fn run_loop<F>(
    params: &mut ParamSet,
    mut projection: Option<&mut Projection>,
    train: &[Example],
    tc: &TrainConfig,
    seed: u64,
    example: F,
) -> Result<Vec<StepRecord>>
where
    F: Fn(&ParamSet, Option<&Projection>, usize, &mut ChaCha8Rng) -> Result<ExampleGrad> + Sync,
{
    let total_steps = tc.steps(train.len());
    let mut optim = BertAdam::new(tc.optim(total_steps), params.num_params())?;
    let mut proj_optim = match &projection {
        Some(p) => Some(BertAdam::new(tc.optim(total_steps), p.w.len())?),
        None => None,
    };
    let mut shuffle = ChaCha8Rng::seed_from_u64(seed);
    shuffle.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut steps = Vec::with_capacity(total_steps);

    for _ in 0..tc.epochs {
        order.shuffle(&mut shuffle);
        for batch in order.chunks(tc.batch_size) {
            let step = steps.len();
            let cur: &ParamSet = params;
            let proj: Option<&Projection> = projection.as_deref();
            let per: Vec<ExampleGrad> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &idx)| {
                    let mut rng = dropout_rng(seed, (step * tc.batch_size + slot) as u64);
                    example(cur, proj, idx, &mut rng)
                })
                .collect::<Result<_>>()?;

            let scale = 1.0 / batch.len() as f64;
            let mut losses = LossBreakdown::default();
            let mut aux = None::<f64>;
            let mut grad = ParamSet::zeros(&params.config);
            let mut pgrad = None::<Array2<f64>>;
            for g in &per {
                losses.add_scaled(&g.losses, scale);
                if let Some(a) = g.aux {
                    *aux.get_or_insert(0.0) += scale * a;
                }
                grad.add_scaled(&g.params, scale);
                if let Some(p) = &g.projection {
                    let acc = pgrad.get_or_insert_with(|| Array2::zeros(p.dim()));
                    acc.scaled_add(scale, p);
                }
            }
            if !losses.total.is_finite() {
                return Err(HarnessError::Diverged(format!(
                    "step {step}: L_total = {} (L_logit = {})",
                    losses.total, losses.logit
                )));
            }
            let lr = optim.current_lr();
            optim.step(params, &grad)?;
            if let (Some(p), Some(o), Some(g)) = (projection.as_deref_mut(), proj_optim.as_mut(), &pgrad) {
                let flat = p.w.as_slice_mut().expect("contiguous projection");
                o.step_flat(flat, g.as_slice().expect("contiguous gradient"), true)?;
            }
            steps.push(StepRecord { step, lr, losses, aux });
        }
    }
    Ok(steps)
}

fn metrics(params: &ParamSet, data: &Dataset, steps: &[StepRecord]) -> Result<Metrics> {
    Ok(Metrics {
        dev_accuracy: evaluate(params, &data.dev)?,
        test_accuracy: evaluate(params, &data.test)?,
        final_train_loss: steps.last().map_or(0.0, |s| s.losses.total),
    })
}

fn init_params(config: &ckd_core::model::ModelConfig, std: f64, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ParamSet::init(config, std, &mut rng))
}

/// Fine-tunes a teacher on the hard labels with cross-entropy.
pub fn train_teacher(cfg: &ExperimentConfig, data: &Dataset) -> Result<TrainedModel> {
    cfg.validate()?;
    let start = Instant::now();
    let tc = &cfg.teacher_train;
    let mut params = init_params(&cfg.teacher_config(), tc.init_std, cfg.seed)?;
    let structure = Structure::full(&params.config);
    let train = &data.train;
    let steps = run_loop(&mut params, None, train, tc, cfg.seed, |p, _, idx, rng| {
        let ex = &train[idx];
        let dropout = (p.config.dropout > 0.0).then_some(rng as &mut dyn rand::RngCore);
        let states = forward(&ex.tokens, p, &structure, dropout)?;
        let ce = logit_kd_loss(&states.logits, &states.logits, ex.label, 0.0, 1.0)?;
        let mut up = StateGrads::new();
        up.add_logits(ce.grad);
        let g = backward(p, &states, &up)?;
        Ok(ExampleGrad {
            losses: LossBreakdown {
                total: ce.loss,
                logit: ce.loss,
                ..Default::default()
            },
            aux: None,
            params: g.params,
            projection: None,
        })
    })?;
    let metrics = metrics(&params, data, &steps)?;
    let record = RunRecord {
        schema: RUN_SCHEMA.into(),
        kind: RunKind::Teacher,
        seed: cfg.seed,
        config: cfg.clone(),
        objective: None,
        teacher_fingerprint: None,
        steps,
        metrics,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(TrainedModel { params, record })
}

/// Layer map used by every layer-wise objective.
pub fn default_alignment(teacher_layers: usize, student_layers: usize) -> Result<LayerAlignment> {
    Ok(align_layers(teacher_layers, student_layers)?)
}

/// Distills a freshly initialised student with `cfg.objective`.
///
/// Architectures the objective cannot handle are refused before any
/// training step.
pub fn distill(teacher: &ParamSet, cfg: &ExperimentConfig, data: &Dataset) -> Result<TrainedModel> {
    refuse_incompatible(teacher, cfg)?;
    let cache = teacher_states(teacher, &data.train)?;
    distill_cached(teacher, &cache, cfg, data)
}

/// [`distill`] with teacher states for `data.train` computed ahead of time.
pub fn distill_cached(
    teacher: &ParamSet,
    cache: &[LayerStates],
    cfg: &ExperimentConfig,
    data: &Dataset,
) -> Result<TrainedModel> {
    cfg.validate()?;
    refuse_incompatible(teacher, cfg)?;
    let student = init_params(&cfg.student_config(), cfg.student_train.init_std, cfg.seed)?;
    distill_from(teacher, cache, student, cfg, data)
}

fn refuse_incompatible(teacher: &ParamSet, cfg: &ExperimentConfig) -> Result<()> {
    let v = check_compatibility(&teacher.config, &cfg.student_config(), cfg.objective);
    if v.is_empty() {
        Ok(())
    } else {
        Err(ckd_core::Error::ConstraintViolation(v).into())
    }
}

/// Distills starting from the given student parameters.
pub fn distill_from(
    teacher: &ParamSet,
    cache: &[LayerStates],
    mut student: ParamSet,
    cfg: &ExperimentConfig,
    data: &Dataset,
) -> Result<TrainedModel> {
    let v = check_compatibility(&teacher.config, &student.config, cfg.objective);
    if !v.is_empty() {
        return Err(ckd_core::Error::ConstraintViolation(v).into());
    }
    if cache.len() != data.train.len() {
        return crate::error::config_err(format!(
            "{} cached teacher states for {} training examples",
            cache.len(),
            data.train.len()
        ));
    }
    let start = Instant::now();
    let kind = cfg.objective;
    let dc: &DistillConfig = &cfg.distill;
    dc.validate()?;
    let alignment = default_alignment(teacher.config.num_layers, student.config.num_layers)?;
    let mut projection = (kind == ObjectiveKind::Tinybert)
        .then(|| Projection::identity_padded(teacher.config.embed_dim(), student.config.embed_dim()));
    let structure = Structure::full(&student.config);
    let train = &data.train;
    let baseline = !matches!(kind, ObjectiveKind::Ckd | ObjectiveKind::LogitOnly);

    let steps = run_loop(
        &mut student,
        projection.as_mut(),
        train,
        &cfg.student_train,
        cfg.seed,
        |p, proj, idx, rng| {
            let ex = &train[idx];
            let dropout = (p.config.dropout > 0.0).then_some(rng as &mut dyn rand::RngCore);
            let s = forward(&ex.tokens, p, &structure, dropout)?;
            let obj = baseline_objective(kind, &s, &cache[idx], ex.label, &alignment, dc, proj)?;
            let g = backward(p, &s, &obj.grads)?;
            Ok(ExampleGrad {
                losses: obj.breakdown,
                aux: baseline.then_some(obj.aux),
                params: g.params,
                projection: obj.projection_grad,
            })
        },
    )?;
    let metrics = metrics(&student, data, &steps)?;
    let record = RunRecord {
        schema: RUN_SCHEMA.into(),
        kind: RunKind::Distill,
        seed: cfg.seed,
        config: cfg.clone(),
        objective: Some(kind),
        teacher_fingerprint: Some(fingerprint(teacher)),
        steps,
        metrics,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(TrainedModel {
        params: student,
        record,
    })
}

/// Re-runs a record from its config and seed. Distillation records need the
/// teacher they were produced with; its fingerprint is checked.
pub fn reproduce(record: &RunRecord, teacher: Option<&ParamSet>) -> Result<TrainedModel> {
    let data = generate_task(&record.config.task)?;
    let mut cfg = record.config.clone();
    cfg.seed = record.seed;
    match record.kind {
        RunKind::Teacher => train_teacher(&cfg, &data),
        RunKind::Distill => {
            let Some(teacher) = teacher else {
                return crate::error::config_err("reproducing a distillation run needs its teacher");
            };
            let fp = fingerprint(teacher);
            if record.teacher_fingerprint.as_deref() != Some(fp.as_str()) {
                return crate::error::config_err(format!(
                    "teacher fingerprint {fp} does not match the record's {:?}",
                    record.teacher_fingerprint
                ));
            }
            if let Some(kind) = record.objective {
                cfg.objective = kind;
            }
            distill(teacher, &cfg, &data)
        }
    }
}
