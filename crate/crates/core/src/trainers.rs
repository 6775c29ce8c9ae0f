//! Training pipelines: SelfCon pre-training, CE warmup, co-divide epochs,
//! the contrastive semi-supervised trainer, label correction, and a plain
//! cross-entropy baseline.
//!
//! Every routine draws randomness from generators derived from
//! [`TrainConfig::seed`], so a run is a pure function of its data and config.

use std::io::Write;

use crate::contrastive::{augment, make_view_batch, self_con_loss, sup_con_loss, AugmentSpec, Strength};
use crate::data::TrainData;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, auc, consistency_metric};
use crate::models::{Architecture, BoundModel, DuoModel, ModelTriple, Trainable};
use crate::noise::{fit_gmm_1d, make_partition, per_sample_losses, Partition};
use crate::rng::{self, Rng};
use crate::ssl::{average_prediction, co_refine, guess_labels, semi_loss, SemiBatch, SslHyper};
use crate::tensor::{Graph, Sgd, Tensor, Var};

/// Which contrastive term accompanies the semi-supervised loss in phase 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// No contrastive term; the projection head is frozen.
    Bare,
    /// SupCon on the clean batch plus SelfCon on the noisy batch.
    Cssl,
    /// SelfCon on the clean batch.
    SelfCon,
    /// SupCon on the clean batch.
    SupCon,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Bare => "bare",
            Mode::Cssl => "cssl",
            Mode::SelfCon => "self",
            Mode::SupCon => "sup",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bare" => Ok(Mode::Bare),
            "cssl" => Ok(Mode::Cssl),
            "self" => Ok(Mode::SelfCon),
            "sup" => Ok(Mode::SupCon),
            other => Err(Error::Parameter(format!("unknown mode '{other}'"))),
        }
    }
}

/// Step decay: `initial` until `drop_epoch`, then `initial · drop_factor`.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    /// `None` drops at half of the phase-2 epochs.
    pub drop_epoch: Option<usize>,
    pub drop_factor: f64,
}

impl LrSchedule {
    /// Learning rate for 1-based `epoch` out of `total`.
    pub fn at(&self, epoch: usize, total: usize) -> f64 {
        let drop = self.drop_epoch.unwrap_or(total / 2);
        if epoch > drop {
            self.initial * self.drop_factor
        } else {
            self.initial
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// SelfCon pre-training steps; 0 skips pre-training.
    pub pretrain_steps: usize,
    pub warmup_epochs: usize,
    pub epochs: usize,
    /// Iterations per phase-2 epoch; 0 means `ceil(N / batch_size)`.
    pub iters_per_epoch: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_cl: f64,
    pub lambda_sup: f64,
    pub lambda_self: f64,
    /// Pre-training temperature.
    pub tau1: f64,
    /// SelfCon temperature.
    pub tau2: f64,
    /// SupCon temperature.
    pub tau3: f64,
    pub mode: Mode,
    pub ssl: SslHyper,
    pub aug: AugmentSpec,
    pub gmm_threshold: f64,
    pub label_correction: bool,
    /// Classifier epochs of the frozen-encoder relabeling pass.
    pub correction_epochs: usize,
    /// Neighbours sampled by the consistency estimator.
    pub consistency_neighbors: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_steps: 300,
            warmup_epochs: 5,
            epochs: 30,
            iters_per_epoch: 0,
            batch_size: 64,
            lr: LrSchedule {
                initial: 0.02,
                drop_epoch: None,
                drop_factor: 0.1,
            },
            momentum: 0.9,
            weight_decay: 5e-4,
            lambda_cl: 1.0,
            lambda_sup: 1.0,
            lambda_self: 1.0,
            tau1: 0.5,
            tau2: 0.5,
            tau3: 0.07,
            mode: Mode::SupCon,
            ssl: SslHyper::default(),
            aug: AugmentSpec::default(),
            gmm_threshold: 0.5,
            label_correction: false,
            correction_epochs: 10,
            consistency_neighbors: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates_ok = self.lr.initial > 0.0
            && self.lr.drop_factor > 0.0
            && self.tau1 > 0.0
            && self.tau2 > 0.0
            && self.tau3 > 0.0
            && self.lambda_cl >= 0.0
            && self.lambda_sup >= 0.0
            && self.lambda_self >= 0.0
            && (0.0..=1.0).contains(&self.gmm_threshold);
        if !rates_ok {
            return Err(Error::Parameter("learning rate, temperatures and weights must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        if self.consistency_neighbors == 0 {
            return Err(Error::Parameter("consistency_neighbors must be at least 1".into()));
        }
        Sgd::new(self.lr.initial, self.momentum, self.weight_decay)?;
        self.ssl.validate()?;
        self.aug.validate()
    }

    fn sgd(&self) -> Result<Sgd> {
        Sgd::new(self.lr.initial, self.momentum, self.weight_decay)
    }

    fn iters(&self, n: usize) -> usize {
        if self.iters_per_epoch > 0 {
            self.iters_per_epoch
        } else {
            n.div_ceil(self.batch_size).max(1)
        }
    }

    /// Fixed generator for the consistency estimator so successive
    /// evaluations see the same neighbourhood.
    fn consistency_rng(&self) -> Rng {
        rng::seeded(self.seed ^ 0x5eed_c0de_0000_0005)
    }
}

/// One row of a run's metrics table. Missing values are `NaN`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lx: f64,
    pub lu: f64,
    pub lreg: f64,
    pub lcl: f64,
    pub test_acc_a: f64,
    pub test_acc_b: f64,
    pub test_acc_ensemble: f64,
    pub partition_auc: f64,
    pub consistency: f64,
}

pub const RUN_RECORD_HEADER: [&str; 10] = [
    "epoch",
    "Lx",
    "Lu",
    "Lreg",
    "Lcl",
    "testAccA",
    "testAccB",
    "testAccEnsemble",
    "partitionAUC",
    "consistencyMetric",
];

/// Per-epoch metrics plus best/last accuracy.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<EpochRow>,
    pub best_acc: f64,
    pub last_acc: f64,
    /// Ensemble accuracy right after warmup (or pre-training for CSSL).
    pub warmup_acc: f64,
    /// Consistency metric right after warmup.
    pub warmup_consistency: f64,
}

impl RunRecord {
    pub fn push(&mut self, row: EpochRow) {
        if self.rows.is_empty() || row.test_acc_ensemble > self.best_acc {
            self.best_acc = row.test_acc_ensemble;
        }
        self.last_acc = row.test_acc_ensemble;
        self.rows.push(row);
    }

    pub fn row(&self, epoch: usize) -> Option<&EpochRow> {
        self.rows.iter().find(|r| r.epoch == epoch)
    }

    /// Writes the metrics table with [`RUN_RECORD_HEADER`]. Floats use the
    /// shortest representation that round-trips.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(RUN_RECORD_HEADER)?;
        for r in &self.rows {
            let vals = [
                r.lx,
                r.lu,
                r.lreg,
                r.lcl,
                r.test_acc_a,
                r.test_acc_b,
                r.test_acc_ensemble,
                r.partition_auc,
                r.consistency,
            ];
            let mut rec = vec![r.epoch.to_string()];
            rec.extend(vals.iter().map(|v| format!("{v}")));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Parses a table written by [`RunRecord::write_csv`].
    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header: Vec<String> = rd.headers()?.iter().map(String::from).collect();
        if header != RUN_RECORD_HEADER {
            return Err(Error::Contract(format!("unexpected metrics header {header:?}")));
        }
        let mut rec = RunRecord::default();
        for (line, row) in rd.records().enumerate() {
            let row = row?;
            let num = |k: usize| -> Result<f64> {
                row[k]
                    .parse::<f64>()
                    .map_err(|e| Error::Contract(format!("row {line}, column {}: {e}", RUN_RECORD_HEADER[k])))
            };
            let epoch = row[0]
                .parse::<usize>()
                .map_err(|e| Error::Contract(format!("row {line}: epoch: {e}")))?;
            rec.push(EpochRow {
                epoch,
                lx: num(1)?,
                lu: num(2)?,
                lreg: num(3)?,
                lcl: num(4)?,
                test_acc_a: num(5)?,
                test_acc_b: num(6)?,
                test_acc_ensemble: num(7)?,
                partition_auc: num(8)?,
                consistency: num(9)?,
            });
        }
        Ok(rec)
    }
}

/// What the contrastive term of one phase-2 step was computed from.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveInputs<'a> {
    /// Training indices fed to the clean-set term.
    pub clean: &'a [usize],
    /// Training indices fed to the noisy-set SelfCon term (mode `cssl`).
    pub noisy: Option<&'a [usize]>,
}

/// Instrumentation hooks for phase 2. All methods default to no-ops.
pub trait Observer {
    /// Called once per net and epoch with the partition net `net` trains on
    /// and the peer whose losses produced it.
    fn on_partition(&mut self, _epoch: usize, _net: usize, _peer: &ModelTriple, _partition: &Partition) {}

    /// Called before each step whose loss has a contrastive term.
    fn on_contrastive(&mut self, _epoch: usize, _net: usize, _inputs: ContrastiveInputs<'_>, _partition: &Partition) {}

    /// Called after net `net` takes an optimizer step.
    fn on_step(&mut self, _epoch: usize, _net: usize, _duo: &DuoModel) {}
}

pub struct NoObserver;

impl Observer for NoObserver {}

/// Reshuffling batch sampler over a fixed index pool.
struct Cycler {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(pool: Vec<usize>) -> Self {
        Self {
            pool,
            order: Vec::new(),
            pos: 0,
        }
    }

    /// `min(b, |pool|)` distinct indices.
    fn next(&mut self, b: usize, rng: &mut Rng) -> Vec<usize> {
        let b = b.min(self.pool.len());
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.pos >= self.order.len() {
                self.order = rng::permutation(rng, self.pool.len())
                    .into_iter()
                    .map(|k| self.pool[k])
                    .collect();
                self.pos = 0;
            }
            let i = self.order[self.pos];
            self.pos += 1;
            if !out.contains(&i) {
                out.push(i);
            }
        }
        out
    }
}

fn mean_or_nan(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn check_finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Degenerate(format!("{what} became non-finite")))
    }
}

fn backward_step(g: &mut Graph, loss: Var, model: &mut ModelTriple, bound: &BoundModel, sgd: &mut Sgd) -> Result<f64> {
    let value = check_finite("training loss", g.scalar_value(loss))?;
    let grads = g.backward(loss)?;
    model.apply_gradients(bound, &grads, sgd)?;
    Ok(value)
}

/// SelfCon pre-training of `F` and `Proj` on label-free batches. Returns the
/// model and the per-step loss curve.
pub fn pretrain_selfcon(x: &Tensor, m: &ModelTriple, cfg: &TrainConfig) -> Result<(ModelTriple, Vec<f64>)> {
    let mut model = m.clone();
    let mut curve = Vec::with_capacity(cfg.pretrain_steps);
    if cfg.pretrain_steps == 0 {
        return Ok((model, curve));
    }
    if x.rows() < 2 {
        return Err(Error::Degenerate("pre-training needs at least two samples".into()));
    }
    let mut rng = rng::seeded(cfg.seed ^ 0x0070_7265_7472_6169);
    let mut sgd = cfg.sgd()?;
    let mut batches = Cycler::new((0..x.rows()).collect());
    for _ in 0..cfg.pretrain_steps {
        let idx = batches.next(cfg.batch_size.max(2), &mut rng);
        let xb = x.select_rows(&idx);
        let mut g = Graph::new();
        let bound = model.bind(&mut g, Trainable::FEAT_PROJ);
        let views = make_view_batch(&mut g, &bound, &xb, None, &cfg.aug, Strength::Strong, &mut rng)?;
        let loss = self_con_loss(&mut g, &views, cfg.tau1)?;
        curve.push(backward_step(&mut g, loss, &mut model, &bound, &mut sgd)?);
    }
    Ok((model, curve))
}

/// One CE epoch over all of `data` with weak augmentation. Returns the mean
/// batch loss.
fn ce_epoch(
    model: &mut ModelTriple,
    x: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    trainable: Trainable,
    sgd: &mut Sgd,
    rng: &mut Rng,
) -> Result<f64> {
    let n = x.rows();
    let c = model.arch().num_classes;
    let order = rng::permutation(rng, n);
    let mut losses = Vec::new();
    for chunk in order.chunks(cfg.batch_size) {
        let xb = augment(&x.select_rows(chunk), &cfg.aug, Strength::Weak, rng)?;
        let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, trainable);
        let xv = g.constant(xb);
        let r = bound.features(&mut g, xv)?;
        let logits = bound.logits(&mut g, r)?;
        let loss = g.softmax_cross_entropy(logits, &Tensor::one_hot(&yb, c)?)?;
        losses.push(backward_step(&mut g, loss, model, &bound, sgd)?);
    }
    Ok(mean_or_nan(&losses))
}

/// Trains both nets independently with CE on every (noisy) label.
pub fn warmup(data: &TrainData, duo: &DuoModel, cfg: &TrainConfig) -> Result<DuoModel> {
    let mut sgds = [cfg.sgd()?, cfg.sgd()?];
    warmup_with(data, duo, cfg, &mut sgds).map(|(d, _)| d)
}

fn warmup_with(data: &TrainData, duo: &DuoModel, cfg: &TrainConfig, sgds: &mut [Sgd; 2]) -> Result<(DuoModel, f64)> {
    let mut duo = duo.clone();
    let mut losses = Vec::new();
    for (j, sgd) in sgds.iter_mut().enumerate() {
        let mut rng = rng::seeded(cfg.seed ^ (0x7761_726d_0000_0000 + j as u64));
        sgd.lr = cfg.lr.initial;
        for _ in 0..cfg.warmup_epochs {
            losses.push(ce_epoch(duo.net_mut(j), &data.x, &data.labels, cfg, Trainable::FEAT_CLS, sgd, &mut rng)?);
        }
    }
    Ok((duo, mean_or_nan(&losses)))
}

/// Clean/noisy split of the training set from `peer`'s losses. A flat loss
/// profile makes everything clean; an empty clean set is refilled with the
/// lowest-loss 10%.
pub fn co_divide(peer: &ModelTriple, data: &TrainData, threshold: f64) -> Result<Partition> {
    let losses = per_sample_losses(peer, &data.x, &data.labels)?;
    let gmm = match fit_gmm_1d(&losses) {
        Ok(g) => g,
        Err(Error::Degenerate(msg)) => {
            log::debug!("co-divide fallback to all-clean: {msg}");
            return Ok(Partition::all_clean(losses.len()));
        }
        Err(e) => return Err(e),
    };
    let p = make_partition(&gmm, &losses, threshold);
    if !p.clean_idx.is_empty() {
        return Ok(p);
    }
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    let k = (losses.len() as f64 * 0.1).ceil() as usize;
    let lowered = order[..k.max(1)]
        .iter()
        .map(|&i| p.clean_prob[i])
        .fold(f64::INFINITY, f64::min);
    log::debug!("empty clean set; threshold lowered to {lowered}");
    Ok(Partition::from_probs(p.clean_prob, lowered))
}

/// Test accuracies of both nets and their ensemble.
fn evaluate(duo: &DuoModel, data: &TrainData) -> Result<(f64, f64, f64)> {
    let pa = duo.net_a.predict_proba(&data.test_x)?;
    let pb = duo.net_b.predict_proba(&data.test_x)?;
    let ens = duo.ensemble_proba(&data.test_x)?;
    Ok((
        accuracy(&pa, &data.test_labels)?,
        accuracy(&pb, &data.test_labels)?,
        accuracy(&ens, &data.test_labels)?,
    ))
}

fn partition_auc(data: &TrainData, parts: &[&Partition]) -> f64 {
    let Some(audit) = &data.audit else {
        return f64::NAN;
    };
    let clean: Vec<bool> = audit.corrupted(&data.labels).iter().map(|&f| !f).collect();
    let aucs: Vec<f64> = parts.iter().map(|p| auc(&p.clean_prob, &clean)).collect();
    mean_or_nan(&aucs)
}

/// Mutable phase-2 state: both nets, their optimizers, and the epoch RNG.
pub struct CodimState {
    pub duo: DuoModel,
    sgds: [Sgd; 2],
    rng: Rng,
}

impl CodimState {
    pub fn new(duo: DuoModel, cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            duo,
            sgds: [cfg.sgd()?, cfg.sgd()?],
            rng: rng::seeded(cfg.seed ^ 0x636f_6469_6d00_0000),
        })
    }
}

struct StepLosses {
    lx: f64,
    lu: Option<f64>,
    lreg: f64,
    lcl: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
fn codim_step(
    state: &mut CodimState,
    j: usize,
    data: &TrainData,
    part: &Partition,
    labeled: &[usize],
    unlabeled: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
    epoch_frac: f64,
    observer: &mut dyn Observer,
) -> Result<StepLosses> {
    let c = data.num_classes;
    let hyper = &cfg.ssl;
    let rng = &mut state.rng;

    let xl = data.x.select_rows(labeled);
    let yl: Vec<usize> = labeled.iter().map(|&i| data.labels[i]).collect();
    let w: Vec<f64> = labeled.iter().map(|&i| part.clean_prob[i]).collect();
    let own = average_prediction(state.duo.net(j), &xl, &cfg.aug, hyper.num_augs, rng)?;
    let targets_l = co_refine(&w, &Tensor::one_hot(&yl, c)?, &own, hyper.sharpen_t)?;

    let unl = if unlabeled.is_empty() {
        None
    } else {
        let xu = data.x.select_rows(unlabeled);
        let (a, b) = (&state.duo.net_a, &state.duo.net_b);
        let guessed = guess_labels(&[a, b], &xu, &cfg.aug, hyper, rng)?;
        Some((xu, guessed))
    };

    // M strong views of each batch, targets repeated per view.
    let strong_copies = |x: &Tensor, rng: &mut Rng| -> Result<Tensor> {
        let views = (0..hyper.num_augs)
            .map(|_| augment(x, &cfg.aug, Strength::Strong, rng))
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat_rows(&views.iter().collect::<Vec<_>>())
    };
    let repeat = |t: &Tensor| Tensor::concat_rows(&vec![t; hyper.num_augs]);
    let mix_xl = strong_copies(&xl, rng)?;
    let mix_pl = repeat(&targets_l)?;
    let mix_u = match &unl {
        Some((xu, pu)) => Some((strong_copies(xu, rng)?, repeat(pu)?)),
        None => None,
    };
    let batch = SemiBatch::mix(
        &mix_xl,
        &mix_pl,
        mix_u.as_ref().map(|(x, p)| (x, p)),
        hyper.mixup_alpha,
        rng,
    )?;

    let trainable = if cfg.mode == Mode::Bare {
        Trainable::FEAT_CLS
    } else {
        Trainable::ALL
    };
    let model = state.duo.net(j).clone();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, trainable);
    let semi = semi_loss(&mut g, &bound, &batch, hyper, epoch_frac)?;

    let mut cl_terms = Vec::new();
    if cfg.mode != Mode::Bare && labeled.len() >= 2 {
        let noisy = (cfg.mode == Mode::Cssl && unlabeled.len() >= 2).then_some(unlabeled);
        observer.on_contrastive(epoch, j, ContrastiveInputs { clean: labeled, noisy }, part);
        let views = make_view_batch(&mut g, &bound, &xl, Some(&yl), &cfg.aug, Strength::Strong, rng)?;
        cl_terms.push(match cfg.mode {
            Mode::SelfCon => self_con_loss(&mut g, &views, cfg.tau2)?,
            _ => sup_con_loss(&mut g, &views, cfg.tau3)?,
        });
        if let Some(noisy) = noisy {
            let xn = data.x.select_rows(noisy);
            let nv = make_view_batch(&mut g, &bound, &xn, None, &cfg.aug, Strength::Strong, rng)?;
            cl_terms.push(self_con_loss(&mut g, &nv, cfg.tau2)?);
        }
    }
    let mut total = semi.total;
    let mut lcl = None;
    if !cl_terms.is_empty() {
        let mut sum = cl_terms[0];
        for &t in &cl_terms[1..] {
            sum = g.add(sum, t)?;
        }
        lcl = Some(g.scalar_value(sum));
        let weighted = g.scale(sum, cfg.lambda_cl);
        total = g.add(total, weighted)?;
    }
    let out = StepLosses {
        lx: g.scalar_value(semi.lx),
        lu: semi.lu.map(|v| g.scalar_value(v)),
        lreg: g.scalar_value(semi.lreg),
        lcl,
    };
    let mut model = model;
    backward_step(&mut g, total, &mut model, &bound, &mut state.sgds[j])?;
    *state.duo.net_mut(j) = model;
    observer.on_step(epoch, j, &state.duo);
    Ok(out)
}

/// One phase-2 epoch (1-based `epoch`): co-divide, then for each net in turn
/// `itersPerEpoch` semi-supervised steps on its peer's partition.
pub fn codim_epoch(
    state: &mut CodimState,
    data: &TrainData,
    cfg: &TrainConfig,
    epoch: usize,
    observer: &mut dyn Observer,
) -> Result<EpochRow> {
    let lr = cfg.lr.at(epoch, cfg.epochs);
    let parts = [
        co_divide(&state.duo.net_b, data, cfg.gmm_threshold)?,
        co_divide(&state.duo.net_a, data, cfg.gmm_threshold)?,
    ];
    for (j, p) in parts.iter().enumerate() {
        observer.on_partition(epoch, j, state.duo.net(1 - j), p);
    }
    let auc_value = partition_auc(data, &[&parts[0], &parts[1]]);

    let iters = cfg.iters(data.len());
    let (mut lx, mut lu, mut lreg, mut lcl) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (j, part) in parts.iter().enumerate() {
        state.sgds[j].lr = lr;
        let mut clean = Cycler::new(part.clean_idx.clone());
        let mut noisy = Cycler::new(part.noisy_idx.clone());
        for it in 0..iters {
            let frac = (epoch - 1) as f64 + it as f64 / iters as f64;
            let labeled = clean.next(cfg.batch_size, &mut state.rng);
            let unlabeled = noisy.next(cfg.batch_size, &mut state.rng);
            let s = codim_step(state, j, data, part, &labeled, &unlabeled, cfg, epoch, frac, observer)?;
            lx.push(s.lx);
            lreg.push(s.lreg);
            lu.extend(s.lu);
            lcl.extend(s.lcl);
        }
    }
    let (acc_a, acc_b, acc_e) = evaluate(&state.duo, data)?;
    let consistency = consistency_metric(
        &state.duo.net_a,
        &data.test_x,
        &cfg.aug,
        cfg.consistency_neighbors,
        &mut cfg.consistency_rng(),
    )?;
    Ok(EpochRow {
        epoch,
        lx: mean_or_nan(&lx),
        lu: mean_or_nan(&lu),
        lreg: mean_or_nan(&lreg),
        lcl: if cfg.mode == Mode::Bare { 0.0 } else { mean_or_nan(&lcl) },
        test_acc_a: acc_a,
        test_acc_b: acc_b,
        test_acc_ensemble: acc_e,
        partition_auc: auc_value,
        consistency,
    })
}

/// Everything a noisy-label run produces.
#[derive(Clone, Debug)]
pub struct CodimOutcome {
    pub duo: DuoModel,
    pub record: RunRecord,
    /// Labels trained on in phase 2 (differs from the input after correction).
    pub labels: Vec<usize>,
    pub pretrain_curve: Vec<f64>,
}

/// Fresh model for `data` with the default architecture.
pub fn initial_model(data: &TrainData, seed: u64) -> Result<ModelTriple> {
    ModelTriple::new(Architecture::default_for(data.dim(), data.num_classes), seed)
}

/// Full noisy-label pipeline: pre-training, optional label correction,
/// duo initialisation, warmup, and `epochs` co-divide epochs.
pub fn train_codim(data: &TrainData, cfg: &TrainConfig, observer: &mut dyn Observer) -> Result<CodimOutcome> {
    cfg.validate()?;
    let init = initial_model(data, cfg.seed)?;
    let (base, curve) = pretrain_selfcon(&data.x, &init, cfg)?;
    let mut out = train_codim_from(data, &base, cfg, observer)?;
    out.pretrain_curve = curve;
    Ok(out)
}

/// [`train_codim`] starting from an already pre-trained model.
pub fn train_codim_from(
    data: &TrainData,
    base: &ModelTriple,
    cfg: &TrainConfig,
    observer: &mut dyn Observer,
) -> Result<CodimOutcome> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::Degenerate("training set needs at least two samples".into()));
    }
    let mut data = data.clone();
    let mut base = base.clone();
    if cfg.label_correction {
        let (relabeled, m) = label_correction(&data, &base, cfg)?;
        data = relabeled;
        base = m;
    }
    let mut init_rng = rng::seeded(cfg.seed ^ 0x6475_6f00_0000_0000);
    let duo = DuoModel::from_pretrained(&base, &mut init_rng);
    let mut sgds = [cfg.sgd()?, cfg.sgd()?];
    let (duo, _) = warmup_with(&data, &duo, cfg, &mut sgds)?;

    let mut record = RunRecord::default();
    let (_, _, acc) = evaluate(&duo, &data)?;
    record.warmup_acc = acc;
    record.warmup_consistency = consistency_metric(
        &duo.net_a,
        &data.test_x,
        &cfg.aug,
        cfg.consistency_neighbors,
        &mut cfg.consistency_rng(),
    )?;

    let mut state = CodimState::new(duo, cfg)?;
    state.sgds = sgds;
    for epoch in 1..=cfg.epochs {
        let row = codim_epoch(&mut state, &data, cfg, epoch, observer)?;
        log::info!(
            "epoch {epoch}: acc {:.4} auc {:.4} Lx {:.4}",
            row.test_acc_ensemble,
            row.partition_auc,
            row.lx
        );
        record.push(row);
    }
    Ok(CodimOutcome {
        duo: state.duo,
        record,
        labels: data.labels,
        pretrain_curve: Vec::new(),
    })
}

/// Cross-entropy baseline: one net, no pre-training, trained on every noisy
/// label for `warmupEpochs + epochs` epochs with the phase-2 schedule.
pub fn train_ce_baseline(data: &TrainData, cfg: &TrainConfig) -> Result<(ModelTriple, RunRecord)> {
    cfg.validate()?;
    let mut model = initial_model(data, cfg.seed)?;
    let mut sgd = cfg.sgd()?;
    let mut rng = rng::seeded(cfg.seed ^ 0x6365_0000_0000_0000);
    let mut record = RunRecord::default();
    let total = cfg.warmup_epochs + cfg.epochs;
    for epoch in 1..=total {
        sgd.lr = if epoch <= cfg.warmup_epochs {
            cfg.lr.initial
        } else {
            cfg.lr.at(epoch - cfg.warmup_epochs, cfg.epochs)
        };
        let loss = ce_epoch(&mut model, &data.x, &data.labels, cfg, Trainable::FEAT_CLS, &mut sgd, &mut rng)?;
        let acc = accuracy(&model.predict_proba(&data.test_x)?, &data.test_labels)?;
        let consistency = consistency_metric(
            &model,
            &data.test_x,
            &cfg.aug,
            cfg.consistency_neighbors,
            &mut cfg.consistency_rng(),
        )?;
        if epoch == cfg.warmup_epochs {
            record.warmup_acc = acc;
            record.warmup_consistency = consistency;
        }
        record.push(EpochRow {
            epoch,
            lx: loss,
            lu: f64::NAN,
            lreg: f64::NAN,
            lcl: f64::NAN,
            test_acc_a: acc,
            test_acc_b: f64::NAN,
            test_acc_ensemble: acc,
            partition_auc: f64::NAN,
            consistency,
        });
    }
    Ok((model, record))
}

/// Relabels the training set with a classifier trained on frozen features.
///
/// A fresh classifier is fitted with CE on the given labels for
/// `correction_epochs` under the step-decay schedule, every label is replaced by its argmax, and the
/// returned model carries a re-randomised classifier with the encoder
/// untouched.
pub fn label_correction(data: &TrainData, m: &ModelTriple, cfg: &TrainConfig) -> Result<(TrainData, ModelTriple)> {
    let mut rng = rng::seeded(cfg.seed ^ 0x6669_7800_0000_0000);
    let mut model = m.reinit_classifier(&mut rng);
    let mut sgd = cfg.sgd()?;
    let plain = TrainConfig {
        aug: AugmentSpec::neutral(),
        ..cfg.clone()
    };
    for epoch in 1..=cfg.correction_epochs {
        sgd.lr = cfg.lr.at(epoch, cfg.correction_epochs);
        ce_epoch(&mut model, &data.x, &data.labels, &plain, Trainable::CLS, &mut sgd, &mut rng)?;
    }
    let labels = model.forward_logits(&data.x)?.argmax_rows();
    let fresh = m.reinit_classifier(&mut rng);
    Ok((data.with_labels(labels), fresh))
}

/// Labeled/unlabeled split for semi-supervised training.
#[derive(Clone, Debug)]
pub struct SslSplit {
    pub labeled_x: Tensor,
    pub labeled_y: Vec<usize>,
    pub unlabeled_x: Tensor,
    pub test_x: Tensor,
    pub test_labels: Vec<usize>,
    pub num_classes: usize,
}

impl SslSplit {
    /// Keeps `round(ratio · n_c)` labels of every class `c` (at least one
    /// when the class is present), chosen at random.
    pub fn stratified(data: &TrainData, ratio: f64, seed: u64) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::Parameter(format!("labeled ratio {ratio} outside (0,1]")));
        }
        let mut rng = rng::seeded(seed);
        let mut keep = vec![false; data.len()];
        for c in 0..data.num_classes {
            let mut members: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            let perm = rng::permutation(&mut rng, members.len());
            members = perm.into_iter().map(|k| members[k]).collect();
            let k = ((ratio * members.len() as f64).round() as usize).max(1);
            members[..k].iter().for_each(|&i| keep[i] = true);
        }
        let lab: Vec<usize> = (0..data.len()).filter(|&i| keep[i]).collect();
        let unl: Vec<usize> = (0..data.len()).filter(|&i| !keep[i]).collect();
        Ok(Self {
            labeled_x: data.x.select_rows(&lab),
            labeled_y: lab.iter().map(|&i| data.labels[i]).collect(),
            unlabeled_x: data.x.select_rows(&unl),
            test_x: data.test_x.clone(),
            test_labels: data.test_labels.clone(),
            num_classes: data.num_classes,
        })
    }

    fn all_x(&self) -> Result<Tensor> {
        if self.unlabeled_x.rows() == 0 {
            return Ok(self.labeled_x.clone());
        }
        Tensor::concat_rows(&[&self.labeled_x, &self.unlabeled_x])
    }
}

/// Single-network contrastive semi-supervised training: SelfCon
/// pre-training on all inputs, then `epochs × itersPerEpoch` steps of
/// `L_semi + λ_sup·SupCon(labeled) + λ_self·SelfCon(unlabeled)`. With both
/// weights at zero this is plain MixMatch-style SSL.
pub fn train_cssl(split: &SslSplit, cfg: &TrainConfig) -> Result<(ModelTriple, RunRecord)> {
    cfg.validate()?;
    if split.labeled_x.rows() == 0 {
        return Err(Error::Degenerate("no labeled samples".into()));
    }
    let arch = Architecture::default_for(split.labeled_x.cols(), split.num_classes);
    let init = ModelTriple::new(arch, cfg.seed)?;
    let (pre, _) = pretrain_selfcon(&split.all_x()?, &init, cfg)?;
    let mut rng = rng::seeded(cfg.seed ^ 0x6373_736c_0000_0000);
    let mut model = pre.reinit_classifier(&mut rng);
    let mut sgd = cfg.sgd()?;
    let contrastive = cfg.lambda_sup > 0.0 || cfg.lambda_self > 0.0;
    let trainable = if contrastive { Trainable::ALL } else { Trainable::FEAT_CLS };
    let hyper = &cfg.ssl;
    let c = split.num_classes;

    let mut record = RunRecord::default();
    let test_acc = |m: &ModelTriple| -> Result<f64> { accuracy(&m.predict_proba(&split.test_x)?, &split.test_labels) };
    record.warmup_acc = test_acc(&model)?;
    record.warmup_consistency = f64::NAN;

    let n_total = split.labeled_x.rows() + split.unlabeled_x.rows();
    let iters = cfg.iters(n_total);
    let mut lab = Cycler::new((0..split.labeled_x.rows()).collect());
    let mut unl = Cycler::new((0..split.unlabeled_x.rows()).collect());
    for epoch in 1..=cfg.epochs {
        sgd.lr = cfg.lr.at(epoch, cfg.epochs);
        let (mut lx, mut lu, mut lreg, mut lcl) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..iters {
            let li = lab.next(cfg.batch_size, &mut rng);
            let ui = unl.next(cfg.batch_size, &mut rng);
            let xl = split.labeled_x.select_rows(&li);
            let yl: Vec<usize> = li.iter().map(|&i| split.labeled_y[i]).collect();
            let pl = Tensor::one_hot(&yl, c)?;
            let xu = (!ui.is_empty()).then(|| split.unlabeled_x.select_rows(&ui));
            let pu = match &xu {
                Some(xu) => Some(guess_labels(&[&model], xu, &cfg.aug, hyper, &mut rng)?),
                None => None,
            };
            let copies = |x: &Tensor, rng: &mut Rng| -> Result<Tensor> {
                let v = (0..hyper.num_augs)
                    .map(|_| augment(x, &cfg.aug, Strength::Strong, rng))
                    .collect::<Result<Vec<_>>>()?;
                Tensor::concat_rows(&v.iter().collect::<Vec<_>>())
            };
            let mxl = copies(&xl, &mut rng)?;
            let mpl = Tensor::concat_rows(&vec![&pl; hyper.num_augs])?;
            let mu = match (&xu, &pu) {
                (Some(x), Some(p)) => Some((copies(x, &mut rng)?, Tensor::concat_rows(&vec![p; hyper.num_augs])?)),
                _ => None,
            };
            let batch = SemiBatch::mix(&mxl, &mpl, mu.as_ref().map(|(x, p)| (x, p)), hyper.mixup_alpha, &mut rng)?;

            let mut g = Graph::new();
            let bound = model.bind(&mut g, trainable);
            let semi = semi_loss(&mut g, &bound, &batch, hyper, (epoch - 1) as f64)?;
            let mut total = semi.total;
            let mut cl = 0.0;
            if cfg.lambda_sup > 0.0 && li.len() >= 2 {
                let v = make_view_batch(&mut g, &bound, &xl, Some(&yl), &cfg.aug, Strength::Strong, &mut rng)?;
                let l = sup_con_loss(&mut g, &v, cfg.tau3)?;
                let w = g.scale(l, cfg.lambda_sup);
                cl += g.scalar_value(w);
                total = g.add(total, w)?;
            }
            if let (true, Some(xu)) = (cfg.lambda_self > 0.0, &xu) {
                if xu.rows() >= 2 {
                    let v = make_view_batch(&mut g, &bound, xu, None, &cfg.aug, Strength::Strong, &mut rng)?;
                    let l = self_con_loss(&mut g, &v, cfg.tau2)?;
                    let w = g.scale(l, cfg.lambda_self);
                    cl += g.scalar_value(w);
                    total = g.add(total, w)?;
                }
            }
            lx.push(g.scalar_value(semi.lx));
            lreg.push(g.scalar_value(semi.lreg));
            lu.extend(semi.lu.map(|v| g.scalar_value(v)));
            lcl.push(cl);
            backward_step(&mut g, total, &mut model, &bound, &mut sgd)?;
        }
        let acc = test_acc(&model)?;
        let consistency = consistency_metric(
            &model,
            &split.test_x,
            &cfg.aug,
            cfg.consistency_neighbors,
            &mut cfg.consistency_rng(),
        )?;
        record.push(EpochRow {
            epoch,
            lx: mean_or_nan(&lx),
            lu: mean_or_nan(&lu),
            lreg: mean_or_nan(&lreg),
            lcl: mean_or_nan(&lcl),
            test_acc_a: acc,
            test_acc_b: f64::NAN,
            test_acc_ensemble: acc,
            partition_auc: f64::NAN,
            consistency,
        });
    }
    Ok((model, record))
}
