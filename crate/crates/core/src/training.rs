//! Final objective, optimizer and training loop.
//!
//! The objective for one mini-batch is
//! `L_grc + lambda1 * L_mse + lambda2 * L_crit`: the group-aware contrastive
//! loss on the embeddings, the MSE of every sample through the expert of its
//! ground-truth group, and the group classification loss (soft labels, CE or
//! logit-adjusted CE). At inference the classifier picks the expert.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{grc_loss_and_grad, EmbeddingBatch, DEFAULT_TEMPERATURE, NORM_EPS};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::grouping::{group_counts, lds_sample_weights, GroupingScheme};
use crate::linalg::{argmax, norm, Matrix};
use crate::model::{
    backward, classify, encode, encode_row, regress, Architecture, ExpertGrad, ModelParams, Part,
    Upstream,
};
use crate::softlabel::{Criterion, GroupLoss, SoftLabelCodec};

/// Which objective to optimize.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Contrastive encoder, group classifier and one expert per group.
    Decomposed,
    /// Plain MSE through a single regressor over the whole label range.
    Vanilla,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub y_min: f64,
    pub y_max: f64,
    pub num_groups: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub temperature: f64,
    pub beta: f64,
    pub criterion: Criterion,
    pub la_tau: f64,
    pub use_lds: bool,
    pub lds_radius: usize,
    pub lds_sigma: f64,
    pub lds_intra_bins: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Decomposed,
            y_min: 0.0,
            y_max: 100.0,
            num_groups: 20,
            hidden_dims: vec![64, 64],
            embed_dim: 16,
            lambda1: 0.5,
            lambda2: 1.0,
            temperature: DEFAULT_TEMPERATURE,
            beta: 1.0,
            criterion: Criterion::Soft,
            la_tau: 1.0,
            use_lds: false,
            lds_radius: 2,
            lds_sigma: 2.0,
            lds_intra_bins: 1,
            learning_rate: 1e-3,
            epochs: 60,
            stage2_epochs: 0,
            batch_size: 128,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The vanilla baseline for this configuration: same encoder and data,
    /// a single regressor trained with MSE only.
    pub fn vanilla(&self) -> Self {
        TrainConfig {
            mode: Mode::Vanilla,
            lambda2: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.scheme()?;
        let non_neg = [("lambda1", self.lambda1), ("lambda2", self.lambda2)];
        for (name, v) in non_neg {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        let positive = [
            ("temperature", self.temperature),
            ("beta", self.beta),
            ("learning_rate", self.learning_rate),
            ("lds_sigma", self.lds_sigma),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        if !self.la_tau.is_finite() {
            return bad("la_tau must be finite".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.lds_intra_bins == 0 {
            return bad("lds_intra_bins must be >= 1".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(a.eps > 0.0) || !(a.weight_decay >= 0.0) {
            return bad("adam eps must be > 0 and weight_decay >= 0".into());
        }
        self.architecture(1).map(|_| ())
    }

    pub fn scheme(&self) -> Result<GroupingScheme> {
        GroupingScheme::new(self.y_min, self.y_max, self.num_groups)
    }

    pub fn architecture(&self, input_dim: usize) -> Result<Architecture> {
        let experts = match self.mode {
            Mode::Decomposed => self.num_groups,
            Mode::Vanilla => 1,
        };
        Architecture::new(input_dim, self.hidden_dims.clone(), self.embed_dim, experts)
    }
}

/// Trained parameters together with what is needed to interpret them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub params: ModelParams,
    pub scheme: GroupingScheme,
    pub mode: Mode,
}

impl Model {
    pub fn init(config: &TrainConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        let arch = config.architecture(input_dim)?;
        Ok(Model {
            params: ModelParams::init(&arch, config.seed),
            scheme: config.scheme()?,
            mode: config.mode,
        })
    }

    /// Label interval owned by expert `g` as (center, half-width).
    pub fn expert_frame(&self, g: usize) -> (f64, f64) {
        match self.mode {
            Mode::Decomposed => (self.scheme.midpoint(g), self.scheme.width() / 2.0),
            Mode::Vanilla => (
                (self.scheme.y_min() + self.scheme.y_max()) / 2.0,
                self.scheme.range() / 2.0,
            ),
        }
    }

    /// Expert that ground-truth group `g` trains.
    pub fn expert_for(&self, g: usize) -> usize {
        match self.mode {
            Mode::Decomposed => g,
            Mode::Vanilla => 0,
        }
    }

    fn to_label(&self, expert: usize, out: f64) -> f64 {
        let (c, h) = self.expert_frame(expert);
        c + h * out
    }

    fn to_target(&self, expert: usize, y: f64) -> f64 {
        let (c, h) = self.expert_frame(expert);
        (y - c) / h
    }

    /// Classifier-routed prediction: `(group, label)`.
    pub fn predict(&self, x: &[f64]) -> Result<(usize, f64)> {
        let z = encode_row(&self.params, x)?;
        match self.mode {
            Mode::Decomposed => {
                let logits = self.params.classifier.forward_row(&z);
                let g = argmax(&logits);
                Ok((g, self.to_label(g, regress(&self.params, &z, g)?)))
            }
            Mode::Vanilla => {
                let y = self.to_label(0, regress(&self.params, &z, 0)?);
                Ok((self.scheme.group_of_clamped(y), y))
            }
        }
    }

    /// Prediction through the expert of a given (true) group.
    pub fn predict_gt_guided(&self, x: &[f64], g: usize) -> Result<f64> {
        if g >= self.scheme.num_groups() {
            return Err(Error::InvalidGroup {
                group: g,
                num_groups: self.scheme.num_groups(),
            });
        }
        let z = encode_row(&self.params, x)?;
        let e = self.expert_for(g);
        Ok(self.to_label(e, regress(&self.params, &z, e)?))
    }
}

/// Result of [`multi_expert_mse`].
#[derive(Clone, Debug, PartialEq)]
pub struct MseOutcome {
    pub value: f64,
    pub grads: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoutedPrediction {
    pub pred: f64,
    pub target: f64,
    pub group: usize,
    pub weight: f64,
}

/// `sum_g sum_{y in g} w (y - y_hat)^2 / B`, with `d/d y_hat`.
pub fn multi_expert_mse(items: &[RoutedPrediction]) -> MseOutcome {
    let b = items.len().max(1) as f64;
    let groups = items.iter().map(|p| p.group + 1).max().unwrap_or(0);
    let mut per_group = vec![0.0; groups];
    let mut grads = Vec::with_capacity(items.len());
    for p in items {
        let r = p.target - p.pred;
        per_group[p.group] += p.weight * r * r;
        grads.push(-2.0 * p.weight * r / b);
    }
    MseOutcome {
        value: per_group.iter().sum::<f64>() / b,
        grads,
    }
}

/// One mini-batch with precomputed groups, expert targets and weights.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Matrix,
    pub labels: Vec<f64>,
    pub groups: Vec<usize>,
    pub weights: Vec<f64>,
}

impl Batch {
    pub fn new(x: Matrix, labels: Vec<f64>, scheme: &GroupingScheme) -> Result<Self> {
        let groups = labels
            .iter()
            .map(|&y| scheme.group_of(y))
            .collect::<Result<Vec<_>>>()?;
        let weights = vec![1.0; labels.len()];
        Ok(Batch {
            x,
            labels,
            groups,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub grc: f64,
    pub mse: f64,
    pub crit: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub components: LossComponents,
    pub grads: ModelParams,
    /// Ground-truth-routed predictions in label units.
    pub preds: Vec<f64>,
    /// Expert each sample was routed to.
    pub routes: Vec<usize>,
}

/// Which terms of the objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Everything trains.
    Joint,
    /// Encoder frozen; the contrastive term is constant and dropped.
    Heads,
}

/// Objective value, its components and the gradient for every parameter.
pub fn final_loss(
    model: &Model,
    batch: &Batch,
    config: &TrainConfig,
    group_loss: &GroupLoss,
    stage: Stage,
) -> Result<BatchOutcome> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("final_loss batch"));
    }
    let b = batch.len();
    let (z, cache) = encode(&model.params, &batch.x)?;

    let mut comps = LossComponents::default();
    let mut dz = None;
    let mut dlogits = None;

    if model.mode == Mode::Decomposed {
        if stage == Stage::Joint {
            let (l, g) = contrastive_term(&z, &batch.groups, config.temperature)?;
            comps.grc = l;
            dz = Some(g);
        }
        if config.lambda2 > 0.0 {
            let logits = classify(&model.params, &z)?;
            let mut dl = Matrix::zeros(b, logits.cols());
            let mut sum = 0.0;
            for i in 0..b {
                let r = group_loss.loss(logits.row(i), batch.groups[i])?;
                sum += r.value;
                for (d, g) in dl.row_mut(i).iter_mut().zip(&r.grad_logits) {
                    *d = config.lambda2 * g / b as f64;
                }
            }
            comps.crit = sum / b as f64;
            dlogits = Some(dl);
        }
    }

    let mse_weight = match model.mode {
        Mode::Decomposed => config.lambda1,
        Mode::Vanilla => 1.0,
    };
    let routes: Vec<usize> = batch.groups.iter().map(|&g| model.expert_for(g)).collect();
    let items = (0..b)
        .map(|i| {
            Ok(RoutedPrediction {
                pred: regress(&model.params, z.row(i), routes[i])?,
                target: model.to_target(routes[i], batch.labels[i]),
                group: routes[i],
                weight: batch.weights[i],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mse = multi_expert_mse(&items);
    comps.mse = mse.value;
    let expert_grads: Vec<ExpertGrad> = (0..b)
        .map(|i| ExpertGrad {
            row: i,
            group: routes[i],
            grad: mse_weight * mse.grads[i],
        })
        .collect();

    comps.total = comps.grc + mse_weight * comps.mse + config.lambda2 * comps.crit;
    if model.mode == Mode::Vanilla {
        comps.total = comps.mse;
    }

    let grads = backward(
        &model.params,
        &cache,
        &Upstream {
            z: dz.as_ref(),
            logits: dlogits.as_ref(),
            experts: &expert_grads,
        },
    )?;
    let preds = items
        .iter()
        .zip(&routes)
        .map(|(p, &e)| model.to_label(e, p.pred))
        .collect();
    Ok(BatchOutcome {
        components: comps,
        grads: grads.params,
        preds,
        routes,
    })
}

/// Contrastive loss over the rows with a usable direction. A row whose
/// embedding collapsed to zero (every rectifier off) has no cosine similarity,
/// so it sits out of this term for the batch.
fn contrastive_term(z: &Matrix, groups: &[usize], temperature: f64) -> Result<(f64, Matrix)> {
    let keep: Vec<usize> = (0..z.rows()).filter(|&i| norm(z.row(i)) > NORM_EPS).collect();
    if keep.len() == z.rows() {
        return grc_loss_and_grad(&EmbeddingBatch::new(z, groups, temperature)?);
    }
    let sub = z.select_rows(&keep);
    let sub_groups: Vec<usize> = keep.iter().map(|&i| groups[i]).collect();
    let (l, g) = grc_loss_and_grad(&EmbeddingBatch::new(&sub, &sub_groups, temperature)?)?;
    let mut full = Matrix::zeros(z.rows(), z.cols());
    for (r, &i) in keep.iter().enumerate() {
        full.row_mut(i).copy_from_slice(g.row(r));
    }
    Ok((l, full))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// Bias-corrected Adam with L2 weight decay folded into the gradient.
/// Tensors for which `trainable` is false are left untouched.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut ModelParams,
    grads: &ModelParams,
    lr: f64,
    adam: &AdamConfig,
    trainable: impl Fn(Part) -> bool,
) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.m) || !params.same_shape(&state.v) {
        return Err(Error::ShapeMismatch("adam state, parameters and gradients differ".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - adam.beta1.powi(t);
    let c2 = 1.0 - adam.beta2.powi(t);
    let g_all = grads.tensors();
    let m_all = state.m.tensors_mut();
    let v_all = state.v.tensors_mut();
    for ((((part, p), (_, g)), (_, m)), (_, v)) in
        params.tensors_mut().into_iter().zip(g_all).zip(m_all).zip(v_all)
    {
        if !trainable(part) {
            continue;
        }
        for i in 0..p.len() {
            let gi = g[i] + adam.weight_decay * p[i];
            m[i] = adam.beta1 * m[i] + (1.0 - adam.beta1) * gi;
            v[i] = adam.beta2 * v[i] + (1.0 - adam.beta2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + adam.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_grc: f64,
    pub l_mse: f64,
    pub l_soft: f64,
    pub l_final: f64,
    pub train_mae: f64,
    pub val_mae_cls: f64,
    pub val_mae_gt: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

pub const HISTORY_HEADER: &str = "epoch,l_grc,l_mse,l_soft,l_final,train_mae,val_mae_cls,val_mae_gt";

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.epoch, r.l_grc, r.l_mse, r.l_soft, r.l_final, r.train_mae, r.val_mae_cls, r.val_mae_gt
            ));
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Everything derived from the training set once before the loop.
struct Prepared {
    groups: Vec<usize>,
    weights: Vec<f64>,
    group_loss: GroupLoss,
}

fn prepare(config: &TrainConfig, scheme: &GroupingScheme, train: &Dataset) -> Result<Prepared> {
    let groups = train
        .labels
        .iter()
        .map(|&y| scheme.group_of(y))
        .collect::<Result<Vec<_>>>()?;
    let weights = if config.use_lds {
        lds_sample_weights(
            &train.labels,
            scheme,
            config.lds_intra_bins,
            config.lds_radius,
            config.lds_sigma,
        )?
    } else {
        vec![1.0; train.len()]
    };
    let codec = SoftLabelCodec::new(scheme.num_groups(), config.beta)?;
    let counts = group_counts(&train.labels, scheme)?;
    let group_loss = GroupLoss::new(config.criterion, &codec, &counts.counts, config.la_tau)?;
    Ok(Prepared {
        groups,
        weights,
        group_loss,
    })
}

fn gather(train: &Dataset, prep: &Prepared, idx: &[usize]) -> Batch {
    Batch {
        x: train.features.select_rows(idx),
        labels: idx.iter().map(|&i| train.labels[i]).collect(),
        groups: idx.iter().map(|&i| prep.groups[i]).collect(),
        weights: idx.iter().map(|&i| prep.weights[i]).collect(),
    }
}

/// Mean objective over the training set, split into fixed consecutive
/// batches of `config.batch_size`.
pub fn evaluate_objective(model: &Model, config: &TrainConfig, train: &Dataset) -> Result<LossComponents> {
    let prep = prepare(config, &model.scheme, train)?;
    let idx: Vec<usize> = (0..train.len()).collect();
    let mut acc = LossComponents::default();
    for chunk in idx.chunks(config.batch_size) {
        let out = final_loss(model, &gather(train, &prep, chunk), config, &prep.group_loss, Stage::Joint)?;
        accumulate(&mut acc, &out.components, chunk.len());
    }
    Ok(scale(acc, 1.0 / train.len() as f64))
}

fn accumulate(acc: &mut LossComponents, c: &LossComponents, n: usize) {
    let n = n as f64;
    acc.grc += n * c.grc;
    acc.mse += n * c.mse;
    acc.crit += n * c.crit;
    acc.total += n * c.total;
}

fn scale(c: LossComponents, s: f64) -> LossComponents {
    LossComponents {
        grc: c.grc * s,
        mse: c.mse * s,
        crit: c.crit * s,
        total: c.total * s,
    }
}

/// Mean absolute error of classifier-routed and ground-truth-routed
/// predictions.
pub fn routed_maes(model: &Model, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut cls = 0.0;
    let mut gt = 0.0;
    for (x, &y) in data.features.iter_rows().zip(&data.labels) {
        let g = model.scheme.group_of(y)?;
        cls += (model.predict(x)?.1 - y).abs();
        gt += (model.predict_gt_guided(x, g)? - y).abs();
    }
    let n = data.len() as f64;
    Ok((cls / n, gt / n))
}

pub struct TrainOutput {
    pub model: Model,
    pub history: TrainHistory,
}

/// Mini-batch training. Joint epochs optimize the full objective; the
/// following `stage2_epochs` freeze the encoder and train the heads only.
pub fn train(config: &TrainConfig, train_set: &Dataset, val_set: &Dataset) -> Result<TrainOutput> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = Model::init(config, train_set.feature_dim())?;
    if !val_set.is_empty() && val_set.feature_dim() != train_set.feature_dim() {
        return Err(Error::ShapeMismatch("train and validation feature widths differ".into()));
    }
    let prep = prepare(config, &model.scheme, train_set)?;
    let mut adam = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed_0f0f_f5e7));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();

    let stages = std::iter::repeat_n(Stage::Joint, config.epochs)
        .chain(std::iter::repeat_n(Stage::Heads, config.stage2_epochs));
    for (epoch, stage) in stages.enumerate() {
        order.shuffle(&mut rng);
        let mut acc = LossComponents::default();
        let mut abs_err = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = gather(train_set, &prep, chunk);
            let out = final_loss(&model, &batch, config, &prep.group_loss, stage)?;
            accumulate(&mut acc, &out.components, chunk.len());
            abs_err += out
                .preds
                .iter()
                .zip(&batch.labels)
                .map(|(p, y)| (p - y).abs())
                .sum::<f64>();
            adam_step(
                &mut adam,
                &mut model.params,
                &out.grads,
                config.learning_rate,
                &config.adam,
                |part| stage == Stage::Joint || part != Part::Encoder,
            )?;
        }
        let n = train_set.len() as f64;
        let c = scale(acc, 1.0 / n);
        let (val_cls, val_gt) = routed_maes(&model, val_set)?;
        history.records.push(EpochRecord {
            epoch: epoch + 1,
            l_grc: c.grc,
            l_mse: c.mse,
            l_soft: c.crit,
            l_final: c.total,
            train_mae: abs_err / n,
            val_mae_cls: val_cls,
            val_mae_gt: val_gt,
        });
    }
    Ok(TrainOutput { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, SynthConfig};
    use crate::model::Dense;
    use rand::Rng;

    fn tiny_data(seed: u64, n: usize) -> (Dataset, Dataset) {
        let s = generate(&SynthConfig {
            n_train: n,
            n_val: 40,
            n_test: 0,
            feature_dim: 3,
            num_fourier: 3,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        (s.train, s.val)
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            num_groups: 3,
            hidden_dims: vec![5],
            embed_dim: 4,
            batch_size: 4,
            epochs: 3,
            seed: 17,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mse_examples() {
        let p = |pred, target, group| RoutedPrediction { pred, target, group, weight: 1.0 };
        assert_eq!(multi_expert_mse(&[p(2.0, 2.0, 0), p(-1.0, -1.0, 1)]).value, 0.0);
        let r = multi_expert_mse(&[p(1.0, 3.0, 0)]);
        assert_eq!(r.value, 4.0);
        assert_eq!(r.grads, vec![-4.0]);
        let a = multi_expert_mse(&[p(1.0, 2.0, 0)]).value;
        let b = multi_expert_mse(&[p(0.0, 3.0, 1)]).value;
        assert_eq!(multi_expert_mse(&[p(1.0, 2.0, 0), p(0.0, 3.0, 1)]).value, (a + b) / 2.0);
        let w = multi_expert_mse(&[RoutedPrediction { weight: 2.5, ..p(1.0, 3.0, 0) }]);
        assert_eq!(w.value, 10.0);
        assert_eq!(w.grads, vec![-10.0]);
    }

    #[test]
    fn zero_lambdas_leave_only_contrastive() {
        let (train, _) = tiny_data(1, 8);
        let config = TrainConfig { lambda1: 0.0, lambda2: 0.0, ..tiny_config() };
        let model = Model::init(&config, 3).unwrap();
        let batch = Batch::new(train.features.clone(), train.labels.clone(), &model.scheme).unwrap();
        let gl = GroupLoss::Ce;
        let out = final_loss(&model, &batch, &config, &gl, Stage::Joint).unwrap();
        assert_eq!(out.components.total, out.components.grc);
        assert!(out.components.grc > 0.0);
    }

    #[test]
    fn pair_batch_has_no_contrastive_term() {
        let (train, _) = tiny_data(2, 2);
        let config = tiny_config();
        let model = Model::init(&config, 3).unwrap();
        let batch = Batch::new(train.features.clone(), train.labels.clone(), &model.scheme).unwrap();
        let codec = SoftLabelCodec::new(3, 1.0).unwrap();
        let gl = GroupLoss::new(Criterion::Soft, &codec, &[1, 1, 1], 1.0).unwrap();
        let c = final_loss(&model, &batch, &config, &gl, Stage::Joint).unwrap().components;
        assert_eq!(c.grc, 0.0);
        assert_eq!(c.total, config.lambda1 * c.mse + config.lambda2 * c.crit);
        assert!(c.total > config.lambda1 * c.mse);
    }

    #[test]
    fn training_routes_by_ground_truth() {
        let config = tiny_config();
        let mut model = Model::init(&config, 3).unwrap();
        // classifier always votes for group 0
        model.params.classifier = Dense::zeros(4, 3);
        model.params.classifier.bias = vec![5.0, 0.0, 0.0];
        let x = Matrix::from_rows(&[vec![0.1, 0.2, 0.3], vec![0.3, -0.2, 0.5]]).unwrap();
        let batch = Batch::new(x.clone(), vec![90.0, 95.0], &model.scheme).unwrap();
        let out = final_loss(&model, &batch, &config, &GroupLoss::Ce, Stage::Joint).unwrap();
        assert_eq!(out.routes, vec![2, 2]);
        assert!(out.grads.experts[0].bias[0] == 0.0 && out.grads.experts[1].bias[0] == 0.0);
        assert!(out.grads.experts[2].bias[0] != 0.0);
        for row in x.iter_rows() {
            assert_eq!(model.predict(row).unwrap().0, 0);
        }
    }

    #[test]
    fn collapsed_embeddings_skip_the_contrastive_term() {
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (l, g) = contrastive_term(&z, &[0, 1, 0, 1], 1.0).unwrap();
        let kept = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let expect = grc_loss_and_grad(&EmbeddingBatch::new(&kept, &[0, 0, 1], 1.0).unwrap()).unwrap();
        assert_eq!(l, expect.0);
        assert_eq!(g.row(1), &[0.0, 0.0]);
        assert_eq!(g.row(3), expect.1.row(2));
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let params = crate::model::init_params(1, 2, &[], 2, 2).unwrap();
        let adam = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut grads = params.zeros_like();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (_, t) in grads.tensors_mut() {
            t.iter_mut().for_each(|g| *g = rng.gen_range(-2.0..2.0));
        }
        let mut p = params.clone();
        let mut st = AdamState::new(&p);
        adam_step(&mut st, &mut p, &grads, 0.01, &adam, |_| true).unwrap();
        assert_eq!(st.step, 1);
        for (((_, a), (_, b)), (_, g)) in p.tensors().iter().zip(params.tensors()).zip(grads.tensors()) {
            for i in 0..a.len() {
                let step = (b[i] - a[i]).abs();
                let exact = 0.01 * g[i].abs() / (g[i].abs() + adam.eps);
                assert!((step - exact).abs() < 1e-15);
                assert!((step - 0.01).abs() < 1e-8);
            }
        }

        let mut q = params.clone();
        let mut st = AdamState::new(&q);
        adam_step(&mut st, &mut q, &params.zeros_like(), 0.01, &adam, |_| true).unwrap();
        assert_eq!(q, params);

        let mut a = params.clone();
        let mut b = params.clone();
        let (mut sa, mut sb) = (AdamState::new(&a), AdamState::new(&b));
        let wd = AdamConfig::default();
        for _ in 0..3 {
            adam_step(&mut sa, &mut a, &grads, 0.01, &wd, |_| true).unwrap();
            adam_step(&mut sb, &mut b, &grads, 0.01, &wd, |_| true).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(sa, sb);

        let other = crate::model::init_params(1, 3, &[], 2, 2).unwrap();
        assert!(adam_step(&mut sa, &mut a, &other, 0.01, &wd, |_| true).is_err());
    }

    #[test]
    fn frozen_parts_do_not_move() {
        let params = crate::model::init_params(1, 2, &[3], 2, 2).unwrap();
        let mut grads = params.zeros_like();
        for (_, t) in grads.tensors_mut() {
            t.iter_mut().for_each(|g| *g = 0.3);
        }
        let mut p = params.clone();
        let mut st = AdamState::new(&p);
        adam_step(&mut st, &mut p, &grads, 0.01, &AdamConfig::default(), |part| part != Part::Encoder).unwrap();
        assert_eq!(p.encoder, params.encoder);
        assert_ne!(p.classifier, params.classifier);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (train, val) = tiny_data(3, 20);
        let config = TrainConfig { epochs: 0, stage2_epochs: 0, ..tiny_config() };
        let out = train_fn(&config, &train, &val);
        assert!(out.history.records.is_empty());
        assert_eq!(out.model, Model::init(&config, 3).unwrap());
    }

    fn train_fn(c: &TrainConfig, t: &Dataset, v: &Dataset) -> TrainOutput {
        train(c, t, v).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_records_history() {
        let (train_set, val) = tiny_data(4, 30);
        let config = TrainConfig { stage2_epochs: 2, ..tiny_config() };
        let a = train_fn(&config, &train_set, &val);
        let b = train_fn(&config, &train_set, &val);
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.records.len(), 5);
        assert!(a.history.records[4].l_grc == 0.0);
        let csv = a.history.to_csv();
        assert!(csv.starts_with(HISTORY_HEADER));
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn stage_two_keeps_encoder_fixed() {
        let (train_set, val) = tiny_data(5, 30);
        let joint = TrainConfig { epochs: 2, ..tiny_config() };
        let both = TrainConfig { stage2_epochs: 3, ..joint.clone() };
        let a = train_fn(&joint, &train_set, &val);
        let b = train_fn(&both, &train_set, &val);
        assert_eq!(a.model.params.encoder, b.model.params.encoder);
        assert_ne!(a.model.params.experts, b.model.params.experts);
    }

    #[test]
    fn invalid_inputs_rejected() {
        let (train_set, val) = tiny_data(6, 10);
        let bad = TrainConfig { batch_size: 1, ..tiny_config() };
        assert!(matches!(train(&bad, &train_set, &val), Err(Error::Config(_))));
        let bad = TrainConfig { num_groups: 1, ..tiny_config() };
        assert!(matches!(train(&bad, &train_set, &val), Err(Error::InvalidGroups(1))));
        assert!(matches!(train(&tiny_config(), &Dataset::empty(3), &val), Err(Error::EmptyDataset)));
    }

    #[test]
    fn predict_routes_through_argmax() {
        let config = tiny_config();
        let mut model = Model::init(&config, 3).unwrap();
        model.params.classifier = Dense::zeros(4, 3);
        model.params.classifier.bias = vec![0.0, 1.0, 2.0];
        for (g, e) in model.params.experts.iter_mut().enumerate() {
            *e = Dense::zeros(4, 1);
            e.bias[0] = g as f64 * 0.1;
        }
        let x = [0.5, -0.5, 0.25];
        let (g, y) = model.predict(&x).unwrap();
        assert_eq!(g, 2);
        let (c, h) = model.expert_frame(2);
        assert_eq!(y, c + h * 0.2);
        assert_eq!(model.predict_gt_guided(&x, 2).unwrap(), y);
        assert_ne!(model.predict_gt_guided(&x, 1).unwrap(), y);
        model.params.experts[0].bias[0] = 42.0;
        assert_eq!(model.predict(&x).unwrap().1, y);

        model.params.classifier.bias = vec![1.0, 1.0, 0.0];
        assert_eq!(model.predict(&x).unwrap().0, 0);
        assert!(model.predict_gt_guided(&x, 3).is_err());
    }

    #[test]
    fn vanilla_uses_one_expert() {
        let (train_set, val) = tiny_data(7, 20);
        let config = TrainConfig { epochs: 2, ..tiny_config() }.vanilla();
        let out = train_fn(&config, &train_set, &val);
        assert_eq!(out.model.params.experts.len(), 1);
        let r = out.history.last().unwrap();
        assert_eq!(r.val_mae_cls, r.val_mae_gt);
        assert_eq!(r.l_grc, 0.0);
        assert_eq!(r.l_final, r.l_mse);
    }
}
