//! The joint training loop: classification, adversarial alignment,
//! target entropy and dynamic-margin triplet terms summed into one
//! objective and minimized with momentum SGD.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, Batch, Dataset};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{
    batch_mean_margins, cross_entropy_logits, domain_loss_logits, dynamic_margins,
    entropy_loss_logits, total_loss, triplet_loss, LossBreakdown, MarginTable,
};
use crate::networks::{
    forward_mlp, forward_mlp_logits, init_params, Architecture, ModelParams, ModelVars,
    NetworkSpec, Part,
};
use crate::seeds;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "scale")]
pub enum ReversalSchedule {
    /// Fixed reversal coefficient.
    Constant(f64),
    /// `2 / (1 + exp(-10 p)) - 1` over training progress `p`.
    DannRamp,
}

impl ReversalSchedule {
    pub fn scale(&self, progress: f64) -> f64 {
        match *self {
            ReversalSchedule::Constant(s) => s,
            ReversalSchedule::DannRamp => 2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    /// Mean second peak within each pseudo-label group.
    PerGroup,
    /// One margin from the mean second peak over the whole target batch.
    BatchMean,
    /// `alpha0` for every class, ignoring predictions.
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub alpha0: f64,
    /// Margin coefficient; `None` means the class count.
    pub mu: Option<f64>,
    pub batch_size: usize,
    pub momentum: f64,
    pub base_lr: f64,
    pub head_lr_multiplier: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub reversal: ReversalSchedule,
    pub margin_mode: MarginMode,
    pub enable_domain: bool,
    pub enable_triplet: bool,
    pub enable_entropy: bool,
    pub arch: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.08,
            lambda: 0.1,
            alpha0: 5.0,
            mu: None,
            batch_size: 32,
            momentum: 0.9,
            base_lr: 0.01,
            head_lr_multiplier: 10.0,
            max_iters: 2000,
            seed: 0,
            reversal: ReversalSchedule::Constant(1.0),
            margin_mode: MarginMode::PerGroup,
            enable_domain: true,
            enable_triplet: true,
            enable_entropy: true,
            arch: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64, enabled: bool| {
            if enabled && !(v > 0.0 && v.is_finite()) {
                Err(Error::usage(format!("{} must be > 0, got {}", name, v)))
            } else if !(v >= 0.0) || !v.is_finite() {
                Err(Error::usage(format!("{} must be >= 0, got {}", name, v)))
            } else {
                Ok(())
            }
        };
        positive("gamma", self.gamma, false)?;
        positive("lambda", self.lambda, false)?;
        positive("alpha0", self.alpha0, self.enable_triplet)?;
        if let Some(mu) = self.mu {
            positive("mu", mu, false)?;
        }
        positive("base_lr", self.base_lr, true)?;
        positive("head_lr_multiplier", self.head_lr_multiplier, true)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::usage(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::usage("max_iters must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::usage("batch_size must be >= 1"));
        }
        if let ReversalSchedule::Constant(s) = self.reversal {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::usage(format!(
                    "reversal scale must be >= 0, got {}",
                    s
                )));
            }
        }
        Ok(())
    }

    pub fn mu_for(&self, classes: usize) -> f64 {
        self.mu.unwrap_or(classes as f64)
    }

    /// Source-only supervision: every auxiliary term switched off.
    pub fn source_only(&self) -> Self {
        TrainConfig {
            enable_domain: false,
            enable_triplet: false,
            enable_entropy: false,
            ..self.clone()
        }
    }
}

/// `base_lr / (1 + 10 p)^0.75`.
pub fn lr_schedule(base_lr: f64, progress: f64) -> f64 {
    base_lr / (1.0 + 10.0 * progress).powf(0.75)
}

/// `velocity <- momentum * velocity + grad`, `param <- param - lr * velocity`.
pub fn sgd_momentum(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::shape(
            "sgd_momentum",
            format!(
                "param {:?}, grad {:?}, velocity {:?}",
                param.shape(),
                grad.shape(),
                velocity.shape()
            ),
        ));
    }
    for ((p, g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub velocities: Vec<Tensor>,
    pub iteration: usize,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let velocities = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        TrainState {
            params,
            velocities,
            iteration: 0,
        }
    }
}

/// Stages of one iteration, in the order they run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    ClassLoss,
    TargetPredictions,
    DomainLoss,
    EntropyLoss,
    Margins,
    TripletLoss,
    TotalLoss,
    Update,
}

/// The objective for one batch, built on a graph.
pub struct Objective {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub margins: Option<MarginTable>,
}

fn needs_target(cfg: &TrainConfig) -> bool {
    cfg.enable_domain || cfg.enable_entropy || cfg.enable_triplet
}

/// Builds the total loss for `batch` on `g`. `progress` drives the
/// reversal schedule. When `frozen_margins` is given it replaces the
/// margins computed from the target predictions.
pub fn build_objective(
    g: &mut Graph,
    vars: &ModelVars,
    batch: &Batch,
    cfg: &TrainConfig,
    progress: f64,
    frozen_margins: Option<&MarginTable>,
    trace: &mut dyn FnMut(Stage),
) -> Result<Objective> {
    let x_s = g.constant(batch.source_x.clone())?;
    let f_s = forward_mlp(g, &vars.extractor, x_s)?;
    let logits_s = forward_mlp(g, &vars.classifier, f_s)?;
    let classes = g.value(logits_s).cols();
    let l_class = cross_entropy_logits(g, logits_s, &batch.source_y)?;
    trace(Stage::ClassLoss);

    let mut target = None;
    if needs_target(cfg) {
        let x_t = g.constant(batch.target_x.clone())?;
        let f_t = forward_mlp(g, &vars.extractor, x_t)?;
        let logits_t = forward_mlp(g, &vars.classifier, f_t)?;
        trace(Stage::TargetPredictions);
        target = Some((f_t, logits_t));
    }

    let mut l_domain = None;
    if cfg.enable_domain {
        let (f_t, _) = target.expect("target computed");
        let scale = cfg.reversal.scale(progress);
        let r_s = g.grad_reverse(f_s, scale)?;
        let r_t = g.grad_reverse(f_t, scale)?;
        let z_s = forward_mlp_logits(g, &vars.discriminator, r_s)?;
        let z_t = forward_mlp_logits(g, &vars.discriminator, r_t)?;
        l_domain = Some(domain_loss_logits(g, z_s, z_t)?);
        trace(Stage::DomainLoss);
    }

    let mut l_entropy = None;
    if cfg.enable_entropy {
        let (_, logits_t) = target.expect("target computed");
        l_entropy = Some(entropy_loss_logits(g, logits_t)?);
        trace(Stage::EntropyLoss);
    }

    let mut l_triplet = None;
    let mut margins = None;
    if cfg.enable_triplet {
        let (_, logits_t) = target.expect("target computed");
        // prediction values only; no gradient path through the margins
        let probs = crate::graph::softmax_rows(g.value(logits_t));
        let table = match frozen_margins {
            Some(m) => m.clone(),
            None => compute_margins(&probs, cfg, classes)?,
        };
        trace(Stage::Margins);
        let m_s = forward_mlp(g, &vars.metric, f_s)?;
        l_triplet = Some(triplet_loss(g, m_s, &batch.source_y, &table)?);
        margins = Some(table);
        trace(Stage::TripletLoss);
    }

    let value = |g: &Graph, v: Option<Var>| v.map_or(Ok(0.0), |v| g.scalar(v));
    let breakdown = total_loss(
        g.scalar(l_class)?,
        value(g, l_domain)?,
        value(g, l_triplet)?,
        value(g, l_entropy)?,
        cfg.gamma,
        cfg.lambda,
    );
    for (name, v) in [
        ("l_class", breakdown.l_class),
        ("l_domain", breakdown.l_domain),
        ("l_triplet", breakdown.l_triplet),
        ("l_entropy", breakdown.l_entropy),
        ("total", breakdown.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
    }

    let mut total = l_class;
    if let Some(ld) = l_domain {
        total = g.add(total, ld)?;
    }
    if let Some(lt) = l_triplet {
        let w = g.mul_scalar(lt, cfg.gamma)?;
        total = g.add(total, w)?;
    }
    if let Some(le) = l_entropy {
        let w = g.mul_scalar(le, cfg.lambda)?;
        total = g.add(total, w)?;
    }
    trace(Stage::TotalLoss);
    debug_assert_eq!(g.scalar(total)?, breakdown.total);

    Ok(Objective {
        total,
        breakdown,
        margins,
    })
}

fn compute_margins(probs: &Tensor, cfg: &TrainConfig, classes: usize) -> Result<MarginTable> {
    let mu = cfg.mu_for(classes);
    match cfg.margin_mode {
        MarginMode::PerGroup => dynamic_margins(probs, cfg.alpha0, mu, classes),
        MarginMode::BatchMean => batch_mean_margins(probs, cfg.alpha0, mu, classes),
        MarginMode::Constant => Ok(MarginTable::constant(classes, cfg.alpha0)),
    }
}

/// Result of one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    pub margins: Option<MarginTable>,
}

pub fn train_step(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig) -> Result<StepOutcome> {
    train_step_traced(state, batch, cfg, &mut |_| {})
}

/// [`train_step`] reporting each stage as it runs.
pub fn train_step_traced(
    state: &mut TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
    trace: &mut dyn FnMut(Stage),
) -> Result<StepOutcome> {
    let progress = (state.iteration as f64 / cfg.max_iters as f64).min(1.0);
    let mut g = Graph::new();
    let vars = state.params.bind(&mut g)?;
    let obj = build_objective(&mut g, &vars, batch, cfg, progress, None, trace)?;
    g.backward(obj.total)?;

    let lr = lr_schedule(cfg.base_lr, progress);
    let parts = state.params.parts();
    let grads = vars.grads(&g);
    for (((param, vel), grad), part) in state
        .params
        .tensors_mut()
        .into_iter()
        .zip(state.velocities.iter_mut())
        .zip(&grads)
        .zip(parts)
    {
        grad.ensure_finite("gradient")?;
        let lr = match part {
            Part::Extractor => lr,
            _ => lr * cfg.head_lr_multiplier,
        };
        sgd_momentum(param, grad, vel, lr, cfg.momentum)?;
    }
    state.iteration += 1;
    trace(Stage::Update);
    Ok(StepOutcome {
        breakdown: obj.breakdown,
        margins: obj.margins,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: usize,
    pub loss: LossBreakdown,
    pub margins: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iter: usize,
    pub source_acc: f64,
    /// Absent when the target carries no labels.
    pub target_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl MetricsLog {
    /// `iter,l_class,l_domain,l_triplet,l_entropy,total`
    pub fn write_losses_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "iter,l_class,l_domain,l_triplet,l_entropy,total")?;
        for r in &self.steps {
            let l = &r.loss;
            writeln!(
                w,
                "{},{:?},{:?},{:?},{:?},{:?}",
                r.iter, l.l_class, l.l_domain, l.l_triplet, l.l_entropy, l.total
            )?;
        }
        Ok(())
    }

    /// `iter,source_acc,target_acc`; an unlabeled target leaves the last
    /// field empty.
    pub fn write_evals_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "iter,source_acc,target_acc")?;
        for r in &self.evals {
            let t = r.target_acc.map_or(String::new(), |a| format!("{:?}", a));
            writeln!(w, "{},{:?},{}", r.iter, r.source_acc, t)?;
        }
        Ok(())
    }

    pub fn final_target_acc(&self) -> Option<f64> {
        self.evals.last().and_then(|e| e.target_acc)
    }
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn evaluate_accuracy(params: &ModelParams, ds: &Dataset) -> Result<f64> {
    let labels = ds.labels()?;
    if ds.is_empty() {
        return Err(Error::usage("cannot evaluate on an empty dataset"));
    }
    let pred = params.predict(&ds.features)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Runs exactly `cfg.max_iters` steps, evaluating every `eval_every`
/// steps (never when 0). Target labels are only read for evaluation.
pub fn fit(
    cfg: &TrainConfig,
    source: &Dataset,
    target: &Dataset,
    eval_every: usize,
) -> Result<(ModelParams, MetricsLog)> {
    cfg.validate()?;
    let classes = source.class_count;
    if target.class_count != 0 && target.class_count != classes {
        return Err(Error::Data(format!(
            "source has {} classes but target has {}",
            classes, target.class_count
        )));
    }
    let spec = NetworkSpec::new(source.dim(), classes, &cfg.arch)?;
    let params = init_params(&spec, seeds::derive(cfg.seed, seeds::INIT))?;
    let mut state = TrainState::new(params);
    let batches = batch_iter(
        source,
        target,
        cfg.batch_size,
        seeds::derive(cfg.seed, seeds::BATCHES),
    )?;
    let mut log = MetricsLog::default();

    for batch in batches.take(cfg.max_iters) {
        let out = train_step(&mut state, &batch, cfg)?;
        let iter = state.iteration;
        log.steps.push(StepRecord {
            iter,
            loss: out.breakdown,
            margins: out.margins.map(|m| m.alpha),
        });
        if eval_every > 0 && iter % eval_every == 0 {
            log.evals.push(EvalRecord {
                iter,
                source_acc: evaluate_accuracy(&state.params, source)?,
                target_acc: match target.labels {
                    Some(_) => Some(evaluate_accuracy(&state.params, target)?),
                    None => None,
                },
            });
        }
    }
    Ok((state.params, log))
}
