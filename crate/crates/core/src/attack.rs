//! Adversarial lightness attack.
//!
//! The attack optimizes the slopes of a piecewise lightness curve (see
//! [`crate::filter`]) so that the re-rendered image is misclassified. Only
//! the `L` channel moves; `a` and `b` stay fixed. Each iteration filters the
//! original lightness, rebuilds RGB, keeps the 8-bit image if it already
//! fools the model, and takes a normalized gradient step
//! `theta <- theta - alpha * g / |g|` on the margin loss plus the optional
//! slope-magnitude regularizer.
//!
//! Four switches select the ablation variants: scene-adaptive lightness
//! range, slope-magnitude regularizer, non-monotonic slopes, and random
//! initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colorspace::{lab_to_srgb_unit_with_deriv, rgb_to_lab, unit_rgb_to_image, LabImage, RgbImage};
use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::eval::lightness_stats;
use crate::filter::{scene_range, FilterParams, LightnessRange};
use crate::model::{Logits, Model};

/// Lower bound applied to every slope when monotonicity is enforced.
pub const MONOTONE_FLOOR: f64 = 1e-3;

/// How the lightness range constraint is realized; echoed into reports.
pub const RANGE_MODE: &str = "affine-remap";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub segments: usize,
    pub iterations: usize,
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    pub init_lo: f64,
    pub init_hi: f64,
    pub use_range_constraint: bool,
    pub use_dist_constraint: bool,
    pub non_monotonic: bool,
    pub random_init: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            segments: 64,
            iterations: 100,
            alpha: 0.5,
            beta: 0.3,
            kappa: 0.2,
            init_lo: -0.2,
            init_hi: 0.8,
            use_range_constraint: true,
            use_dist_constraint: true,
            non_monotonic: true,
            random_init: true,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.segments == 0 {
            return bad("segments must be >= 1");
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be > 0");
        }
        if !(self.beta >= 0.0) || !(self.kappa >= 0.0) {
            return bad("beta and kappa must be >= 0");
        }
        if !(self.init_lo < self.init_hi) {
            return bad("init_lo must be < init_hi");
        }
        Ok(())
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        let s = variant.switches();
        Self {
            use_range_constraint: s.range,
            use_dist_constraint: s.dist,
            non_monotonic: s.non_monotonic,
            random_init: s.random_init,
            ..self.clone()
        }
    }

    pub fn switches(&self) -> Switches {
        Switches {
            range: self.use_range_constraint,
            dist: self.use_dist_constraint,
            non_monotonic: self.non_monotonic,
            random_init: self.random_init,
        }
    }

    fn effective_beta(&self) -> f64 {
        if self.use_dist_constraint {
            self.beta
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Switches {
    pub range: bool,
    pub dist: bool,
    pub non_monotonic: bool,
    pub random_init: bool,
}

/// The eight ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Ala0,
    Ala1,
    Ala2,
    Ala3,
    Ala4,
    Ala5,
    Ala6,
    Ala7,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Ala0,
        Variant::Ala1,
        Variant::Ala2,
        Variant::Ala3,
        Variant::Ala4,
        Variant::Ala5,
        Variant::Ala6,
        Variant::Ala7,
    ];

    pub fn switches(&self) -> Switches {
        let (range, dist, non_monotonic, random_init) = match self {
            Variant::Ala0 => (false, false, false, false),
            Variant::Ala1 => (true, false, false, false),
            Variant::Ala2 => (false, true, false, false),
            Variant::Ala3 => (false, false, true, false),
            Variant::Ala4 => (false, false, false, true),
            Variant::Ala5 => (true, true, false, false),
            Variant::Ala6 => (false, false, true, true),
            Variant::Ala7 => (true, true, true, true),
        };
        Switches {
            range,
            dist,
            non_monotonic,
            random_init,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Ala0 => "ala0",
            Variant::Ala1 => "ala1",
            Variant::Ala2 => "ala2",
            Variant::Ala3 => "ala3",
            Variant::Ala4 => "ala4",
            Variant::Ala5 => "ala5",
            Variant::Ala6 => "ala6",
            Variant::Ala7 => "ala7",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant {s:?} (expected ala0..ala7)")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn runner_up(logits: &[f64], label: usize) -> usize {
    let mut best: Option<usize> = None;
    for (i, &v) in logits.iter().enumerate() {
        if i == label {
            continue;
        }
        if best.is_none_or(|b| v > logits[b]) {
            best = Some(i);
        }
    }
    best.expect("at least two classes")
}

/// Margin loss `max(Z_label - max_{i != label} Z_i, -kappa)`.
pub fn cw_loss(logits: &Logits, label: usize, kappa: f64) -> Result<f64> {
    cw_loss_with_grad(logits, label, kappa).map(|(l, _)| l)
}

/// Margin loss and its gradient with respect to the logits (zero when the
/// `-kappa` floor is active).
pub fn cw_loss_with_grad(logits: &Logits, label: usize, kappa: f64) -> Result<(f64, Vec<f64>)> {
    let z = logits.values();
    if z.len() < 2 {
        return Err(Error::SingleClass);
    }
    if label >= z.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: z.len(),
        });
    }
    let rival = runner_up(z, label);
    let margin = z[label] - z[rival];
    let mut grad = vec![0.0; z.len()];
    if margin > -kappa {
        grad[label] = 1.0;
        grad[rival] = -1.0;
        Ok((margin, grad))
    } else {
        Ok((-kappa, grad))
    }
}

/// `-(1/T) * sum |theta_t|`.
pub fn dist_regularizer(params: &FilterParams) -> f64 {
    let theta = params.theta();
    -theta.iter().map(|t| t.abs()).sum::<f64>() / theta.len() as f64
}

/// Subgradient of [`dist_regularizer`]: `-sign(theta_t) / T`, zero at zero.
pub fn dist_regularizer_grad(params: &FilterParams) -> Vec<f64> {
    let t = params.segments() as f64;
    params
        .theta()
        .iter()
        .map(|&v| if v > 0.0 { -1.0 / t } else if v < 0.0 { 1.0 / t } else { 0.0 })
        .collect()
}

fn draw_params(config: &AttackConfig, rng: &mut ChaCha8Rng) -> FilterParams {
    let mut params = if config.random_init {
        let theta = (0..config.segments)
            .map(|_| rng.gen_range(config.init_lo..config.init_hi))
            .collect();
        FilterParams::new(theta).expect("segments >= 1")
    } else {
        FilterParams::identity(config.segments)
    };
    if !config.non_monotonic {
        project_monotone(&mut params);
    }
    params
}

fn project_monotone(params: &mut FilterParams) {
    for t in params.theta_mut() {
        *t = t.max(MONOTONE_FLOOR);
    }
}

fn attack_rng(config: &AttackConfig, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    rng
}

/// Initial slopes: uniform in `[init_lo, init_hi)` when `random_init`, else
/// all ones. Raw draws are returned as-is; the attack loop additionally
/// floors them when monotonicity is enforced.
pub fn init_params(config: &AttackConfig) -> FilterParams {
    let mut rng = attack_rng(config, 0);
    if config.random_init {
        let theta = (0..config.segments)
            .map(|_| rng.gen_range(config.init_lo..config.init_hi))
            .collect();
        FilterParams::new(theta).expect("segments >= 1")
    } else {
        FilterParams::identity(config.segments)
    }
}

/// Lightness range the filter is confined to for this image.
pub fn attack_range(lab: &LabImage, config: &AttackConfig) -> Result<LightnessRange> {
    if config.use_range_constraint {
        scene_range(&lab.l)
    } else {
        Ok(LightnessRange::FULL)
    }
}

/// Filtered image in continuous RGB plus everything needed for the gradient.
struct Rendered {
    unit_rgb: Vec<f64>,
    /// `d rgb / d L` per pixel and channel, interleaved like `unit_rgb`.
    drgb_dl: Vec<f64>,
}

fn render(lab: &LabImage, lightness: &[f64]) -> Rendered {
    let n = lab.pixel_count();
    let mut unit_rgb = Vec::with_capacity(3 * n);
    let mut drgb_dl = Vec::with_capacity(3 * n);
    for i in 0..n {
        let (rgb, d) = lab_to_srgb_unit_with_deriv(lightness[i], lab.a[i], lab.b[i]);
        unit_rgb.extend_from_slice(&rgb);
        drgb_dl.extend_from_slice(&d);
    }
    Rendered { unit_rgb, drgb_dl }
}

struct Step {
    loss: f64,
    grad: Vec<f64>,
    quantized: RgbImage,
}

fn evaluate(
    model: &Model,
    lab: &LabImage,
    params: &FilterParams,
    range: LightnessRange,
    config: &AttackConfig,
    label: usize,
) -> Result<Step> {
    let filter = params.prepare()?;
    let lightness = filter.apply_channel(&lab.l, range);
    let rendered = render(lab, &lightness);
    let mut margin = 0.0;
    let (_, grad_rgb) = model.forward_with_input_gradient(&rendered.unit_rgb, |z| {
        let (loss, g) = cw_loss_with_grad(z, label, config.kappa)?;
        margin = loss;
        Ok(g)
    })?;
    let upstream: Vec<f64> = grad_rgb
        .chunks_exact(3)
        .zip(rendered.drgb_dl.chunks_exact(3))
        .map(|(g, d)| g[0] * d[0] + g[1] * d[1] + g[2] * d[2])
        .collect();
    let mut grad = filter.channel_vjp(&lab.l, range, &upstream);
    let beta = config.effective_beta();
    let mut loss = margin;
    if beta > 0.0 {
        loss += beta * dist_regularizer(params);
        for (g, r) in grad.iter_mut().zip(dist_regularizer_grad(params)) {
            *g += beta * r;
        }
    }
    Ok(Step {
        loss,
        grad,
        quantized: unit_rgb_to_image(lab.width, lab.height, &rendered.unit_rgb),
    })
}

/// Objective `L_cw + beta * L_R` and its gradient with respect to the slopes,
/// computed on the continuous (unquantized) rendering. The regularizer term is
/// present only when `use_dist_constraint` is set.
pub fn total_gradient(
    model: &Model,
    lab: &LabImage,
    params: &FilterParams,
    config: &AttackConfig,
    label: usize,
) -> Result<(f64, Vec<f64>)> {
    let range = attack_range(lab, config)?;
    let step = evaluate(model, lab, params, range, config, label)?;
    Ok((step.loss, step.grad))
}

/// `theta - alpha * g / |g|_2`; unchanged when `g` is zero.
pub fn normalized_step(theta: &mut [f64], grad: &[f64], alpha: f64) -> bool {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return false;
    }
    for (t, g) in theta.iter_mut().zip(grad) {
        *t -= alpha * g / norm;
    }
    true
}

/// Outcome of attacking one image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub label: usize,
    pub success: bool,
    /// 1-based iteration at which the image was first misclassified.
    pub first_success_iter: Option<usize>,
    /// 1-based iteration that produced the kept adversarial image.
    pub last_success_iter: Option<usize>,
    /// Slopes after the final update.
    pub final_theta: FilterParams,
    /// Slopes that produced the kept adversarial image.
    pub adversarial_theta: Option<FilterParams>,
    /// Objective per iteration; `NaN` (null in JSON) where the slopes were
    /// degenerate and had to be redrawn.
    pub loss_trace: Vec<f64>,
    pub pred_before: usize,
    pub pred_after: usize,
    /// `pred_before == label`; attacks on misclassified inputs still run.
    pub correctly_classified: bool,
    /// Mean |dL| between the clean image and [`output`](Self::output).
    pub mean_abs_delta_l: f64,
    pub var_l_before: f64,
    pub var_l_after: f64,
    pub frac_saturated: f64,
    /// `[lo, hi]` the filter was confined to, when the range constraint is on.
    pub lightness_range: Option<[f64; 2]>,
    pub range_mode: Option<&'static str>,
    pub redraws: usize,
    #[serde(skip)]
    pub adversarial: Option<RgbImage>,
    /// The 8-bit rendering of the last iteration.
    #[serde(skip)]
    pub last_iterate: RgbImage,
}

impl AttackReport {
    /// The adversarial image when the attack succeeded, otherwise the last
    /// iterate (which the model still classifies correctly).
    pub fn output(&self) -> &RgbImage {
        self.adversarial.as_ref().unwrap_or(&self.last_iterate)
    }

    pub fn iterations_run(&self) -> usize {
        self.loss_trace.len()
    }
}

pub fn run_attack(model: &Model, img: &RgbImage, label: usize, config: &AttackConfig) -> Result<AttackReport> {
    run_attack_stream(model, img, label, config, 0)
}

/// [`run_attack`] with an explicit random stream, so batch items draw
/// independent initializations from one seed.
pub fn run_attack_stream(
    model: &Model,
    img: &RgbImage,
    label: usize,
    config: &AttackConfig,
    stream: u64,
) -> Result<AttackReport> {
    config.validate()?;
    if label >= model.classes() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: model.classes(),
        });
    }
    if model.classes() < 2 {
        return Err(Error::SingleClass);
    }
    let pred_before = model.predict(img)?;
    let lab = rgb_to_lab(img);
    let range = attack_range(&lab, config)?;
    let mut rng = attack_rng(config, stream);
    let mut params = draw_params(config, &mut rng);

    let mut loss_trace = Vec::with_capacity(config.iterations);
    let mut adversarial = None;
    let mut adversarial_theta = None;
    let mut first_success_iter = None;
    let mut last_success_iter = None;
    let mut last_iterate = None;
    let mut last_pred = pred_before;
    let mut redraws = 0;

    for iter in 1..=config.iterations {
        let step = match evaluate(model, &lab, &params, range, config, label) {
            Ok(step) => step,
            Err(Error::DegenerateFilter { .. }) => {
                params = draw_params(config, &mut rng);
                redraws += 1;
                loss_trace.push(f64::NAN);
                continue;
            }
            Err(e) => return Err(e),
        };
        let pred = model.predict(&step.quantized)?;
        if pred != label {
            adversarial = Some(step.quantized.clone());
            adversarial_theta = Some(params.clone());
            first_success_iter.get_or_insert(iter);
            last_success_iter = Some(iter);
        }
        last_pred = pred;
        last_iterate = Some(step.quantized);
        loss_trace.push(step.loss);

        normalized_step(params.theta_mut(), &step.grad, config.alpha);
        if !config.non_monotonic {
            project_monotone(&mut params);
        }
    }

    // every iteration degenerate: fall back to the clean image
    let last_iterate = last_iterate.unwrap_or_else(|| img.clone());
    let success = adversarial.is_some();
    let pred_after = if success {
        model.predict(adversarial.as_ref().unwrap())?
    } else {
        last_pred
    };
    let output = adversarial.as_ref().unwrap_or(&last_iterate);
    let stats = lightness_stats(&lab, &rgb_to_lab(output))?;
    Ok(AttackReport {
        label,
        success,
        first_success_iter,
        last_success_iter,
        final_theta: params,
        adversarial_theta,
        loss_trace,
        pred_before,
        pred_after,
        correctly_classified: pred_before == label,
        mean_abs_delta_l: stats.mean_abs_delta_l,
        var_l_before: stats.var_before,
        var_l_after: stats.var_after,
        frac_saturated: stats.frac_saturated,
        lightness_range: config.use_range_constraint.then(|| [range.lo(), range.hi()]),
        range_mode: config.use_range_constraint.then_some(RANGE_MODE),
        redraws,
        adversarial,
        last_iterate,
    })
}

/// One attacked image within a batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchItem {
    /// Position in the input dataset.
    pub index: usize,
    pub id: String,
    #[serde(flatten)]
    pub report: AttackReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub total: usize,
    /// Images the model classified correctly before the attack.
    pub attacked: usize,
    pub successes: usize,
    /// `successes / attacked`; `None` for the 0/0 case.
    pub success_rate: Option<f64>,
    pub mean_first_success_iter: Option<f64>,
    /// Averages over successful attacks.
    pub mean_abs_delta_l: Option<f64>,
    pub mean_var_change: Option<f64>,
    pub mean_frac_saturated: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    pub items: Vec<BatchItem>,
    /// Indices skipped because the model already misclassified them.
    pub skipped: Vec<usize>,
    pub summary: BatchSummary,
}

impl BatchResult {
    pub fn reports(&self) -> impl Iterator<Item = &AttackReport> {
        self.items.iter().map(|i| &i.report)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn summarize(total: usize, items: &[BatchItem]) -> BatchSummary {
    let wins = || items.iter().map(|i| &i.report).filter(|r| r.success);
    let successes = wins().count();
    BatchSummary {
        total,
        attacked: items.len(),
        successes,
        success_rate: (!items.is_empty()).then(|| successes as f64 / items.len() as f64),
        mean_first_success_iter: mean(wins().filter_map(|r| r.first_success_iter).map(|v| v as f64)),
        mean_abs_delta_l: mean(wins().map(|r| r.mean_abs_delta_l)),
        mean_var_change: mean(wins().map(|r| r.var_l_after - r.var_l_before)),
        mean_frac_saturated: mean(wins().map(|r| r.frac_saturated)),
    }
}

/// Attack every image the model classifies correctly. `workers = 0` uses
/// the global thread pool. Output order follows the input order.
pub fn run_batch(model: &Model, data: &[LabeledImage], config: &AttackConfig, workers: usize) -> Result<BatchResult> {
    config.validate()?;
    let job = || -> Result<Vec<(usize, Option<AttackReport>)>> {
        data.par_iter()
            .enumerate()
            .map(|(index, item)| {
                if model.predict(&item.image)? != item.label {
                    return Ok((index, None));
                }
                let report = run_attack_stream(model, &item.image, item.label, config, index as u64)?;
                Ok((index, Some(report)))
            })
            .collect()
    };
    let outcomes = if workers == 0 {
        job()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?
            .install(job)?
    };
    let mut items = Vec::new();
    let mut skipped = Vec::new();
    for (index, report) in outcomes {
        match report {
            Some(report) => items.push(BatchItem {
                index,
                id: data[index].id.clone(),
                report,
            }),
            None => skipped.push(index),
        }
    }
    let summary = summarize(data.len(), &items);
    Ok(BatchResult { items, skipped, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    #[test]
    fn published_defaults() {
        let c = AttackConfig::default();
        assert_eq!((c.segments, c.iterations), (64, 100));
        assert_eq!((c.alpha, c.beta, c.kappa), (0.5, 0.3, 0.2));
        assert_eq!((c.init_lo, c.init_hi), (-0.2, 0.8));
        assert_eq!(c.switches(), Variant::Ala7.switches());
    }

    #[test]
    fn config_validation() {
        let ok = AttackConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            AttackConfig { segments: 0, ..ok.clone() },
            AttackConfig { iterations: 0, ..ok.clone() },
            AttackConfig { alpha: 0.0, ..ok.clone() },
            AttackConfig { beta: -1.0, ..ok.clone() },
            AttackConfig { kappa: -0.1, ..ok.clone() },
            AttackConfig { init_lo: 0.8, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn variant_switch_table() {
        let row = |v: Variant| {
            let s = v.switches();
            (s.range, s.dist, s.non_monotonic, s.random_init)
        };
        assert_eq!(row(Variant::Ala0), (false, false, false, false));
        assert_eq!(row(Variant::Ala1), (true, false, false, false));
        assert_eq!(row(Variant::Ala2), (false, true, false, false));
        assert_eq!(row(Variant::Ala3), (false, false, true, false));
        assert_eq!(row(Variant::Ala4), (false, false, false, true));
        assert_eq!(row(Variant::Ala5), (true, true, false, false));
        assert_eq!(row(Variant::Ala6), (false, false, true, true));
        assert_eq!(row(Variant::Ala7), (true, true, true, true));
        assert_eq!("ALA6".parse::<Variant>().unwrap(), Variant::Ala6);
        assert!("ala8".parse::<Variant>().is_err());
    }

    #[test]
    fn cw_loss_examples() {
        assert_eq!(cw_loss(&Logits(vec![2.0, 1.0]), 0, 0.2).unwrap(), 1.0);
        assert_eq!(cw_loss(&Logits(vec![0.5, 2.0]), 0, 0.2).unwrap(), -0.2);
        assert_eq!(cw_loss(&Logits(vec![1.0, 1.0, 0.0]), 0, 0.0).unwrap(), 0.0);
        assert!(matches!(cw_loss(&Logits(vec![1.0]), 0, 0.2), Err(Error::SingleClass)));
        assert!(cw_loss(&Logits(vec![1.0, 2.0]), 2, 0.2).is_err());
    }

    #[test]
    fn cw_gradient_points_at_runner_up() {
        let (_, g) = cw_loss_with_grad(&Logits(vec![3.0, 1.0, 2.0]), 0, 0.2).unwrap();
        assert_eq!(g, vec![1.0, 0.0, -1.0]);
        let (_, g) = cw_loss_with_grad(&Logits(vec![0.0, 1.0, 2.0]), 0, 0.2).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn regularizer_examples() {
        assert_eq!(dist_regularizer(&FilterParams::identity(64)), -1.0);
        assert_eq!(dist_regularizer(&FilterParams::new(vec![0.0; 8]).unwrap()), 0.0);
        let p = FilterParams::new(vec![2.0, -1.0]).unwrap();
        assert_eq!(dist_regularizer(&p), -1.5);
        assert_eq!(dist_regularizer_grad(&p), vec![-0.5, 0.5]);
        assert_eq!(dist_regularizer_grad(&FilterParams::new(vec![0.0]).unwrap()), vec![0.0]);
    }

    #[test]
    fn init_examples() {
        let off = AttackConfig {
            random_init: false,
            ..Default::default()
        };
        assert_eq!(init_params(&off), FilterParams::identity(64));
        let on = AttackConfig::default();
        let p = init_params(&on);
        assert_eq!(p.segments(), 64);
        assert!(p.theta().iter().all(|&t| (-0.2..=0.8).contains(&t)));
        assert_eq!(init_params(&on), p);
        assert_ne!(init_params(&AttackConfig { seed: 1, ..on }), p);
    }

    #[test]
    fn update_arithmetic() {
        let mut theta = vec![1.0, 1.0];
        assert!(normalized_step(&mut theta, &[3.0, 4.0], 0.5));
        assert!((theta[0] - 0.7).abs() < 1e-15 && (theta[1] - 0.6).abs() < 1e-15);
        let mut same = vec![1.0, 2.0];
        assert!(!normalized_step(&mut same, &[0.0, 0.0], 0.5));
        assert_eq!(same, vec![1.0, 2.0]);
    }

    fn gray_ramp(size: usize) -> RgbImage {
        let data = (0..size * size)
            .flat_map(|i| {
                let v = (40 + (i * 170) / (size * size)) as u8;
                [v, v / 2 + 30, 255 - v]
            })
            .collect();
        RgbImage::new(size, size, data).unwrap()
    }

    #[test]
    fn zero_model_gives_zero_gradient() {
        let model = Model::zeros(Architecture::Conv, 16, 16, 4).unwrap();
        let lab = rgb_to_lab(&gray_ramp(16));
        let cfg = AttackConfig {
            beta: 0.0,
            ..Default::default()
        };
        let (loss, g) = total_gradient(&model, &lab, &FilterParams::identity(64), &cfg, 0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn regularizer_only_when_margin_is_floored() {
        // label 0 is far below class 1, so the margin sits at -kappa
        let mut model = Model::zeros(Architecture::Conv, 16, 16, 3).unwrap();
        model.set_output_bias(&[0.0, 5.0, 0.0]).unwrap();
        let lab = rgb_to_lab(&gray_ramp(16));
        let cfg = AttackConfig::default();
        let theta = vec![0.5, -0.25, 1.0, 0.0, 2.0];
        let p = FilterParams::new(theta.clone()).unwrap();
        let (loss, g) = total_gradient(&model, &lab, &p, &AttackConfig { segments: 5, ..cfg.clone() }, 0).unwrap();
        assert!((loss - (-0.2 + 0.3 * dist_regularizer(&p))).abs() < 1e-15);
        for (gi, t) in g.iter().zip(&theta) {
            let expected = if *t > 0.0 {
                -0.3 / 5.0
            } else if *t < 0.0 {
                0.3 / 5.0
            } else {
                0.0
            };
            assert!((gi - expected).abs() < 1e-15, "{g:?}");
        }
    }

    #[test]
    fn stalled_single_iteration_fails_and_keeps_theta() {
        // constant logits favouring the true label: zero margin gradient
        let mut model = Model::zeros(Architecture::Conv, 16, 16, 3).unwrap();
        model.set_output_bias(&[1.0, 0.0, 0.0]).unwrap();
        let cfg = AttackConfig {
            iterations: 1,
            random_init: false,
            use_dist_constraint: false,
            ..Default::default()
        };
        let r = run_attack(&model, &gray_ramp(16), 0, &cfg).unwrap();
        assert!(!r.success && r.adversarial.is_none() && r.first_success_iter.is_none());
        assert_eq!(r.final_theta, FilterParams::identity(64));
        assert_eq!(r.loss_trace.len(), 1);
        assert_eq!(r.pred_after, 0);
    }

    #[test]
    fn monotone_mode_floors_slopes() {
        let model = Model::new(Architecture::Conv, 16, 16, 3, 5).unwrap();
        let img = gray_ramp(16);
        let label = model.predict(&img).unwrap();
        let cfg = AttackConfig {
            iterations: 15,
            non_monotonic: false,
            ..Default::default()
        };
        let r = run_attack(&model, &img, label, &cfg).unwrap();
        assert!(r.final_theta.theta().iter().all(|&t| t >= MONOTONE_FLOOR));
        assert_eq!(r.loss_trace.len(), 15);
    }

    #[test]
    fn report_invariants() {
        let model = Model::new(Architecture::Conv, 16, 16, 3, 6).unwrap();
        let img = gray_ramp(16);
        let label = model.predict(&img).unwrap();
        let r = run_attack(&model, &img, label, &AttackConfig { iterations: 30, ..Default::default() }).unwrap();
        assert_eq!(r.success, r.adversarial.is_some());
        assert_eq!(r.success, r.first_success_iter.is_some());
        assert!(r.correctly_classified);
        if let Some(adv) = &r.adversarial {
            assert_eq!(model.predict(adv).unwrap(), r.pred_after);
            assert_ne!(r.pred_after, label);
        }
        let range = r.lightness_range.unwrap();
        assert!(range[0] < range[1]);
    }

    #[test]
    fn batch_edge_cases() {
        let model = Model::new(Architecture::Conv, 16, 16, 3, 7).unwrap();
        let cfg = AttackConfig { iterations: 5, ..Default::default() };
        let empty = run_batch(&model, &[], &cfg, 1).unwrap();
        assert!(empty.items.is_empty());
        assert_eq!(empty.summary.success_rate, None);
        assert_eq!((empty.summary.successes, empty.summary.attacked), (0, 0));

        let img = gray_ramp(16);
        let pred = model.predict(&img).unwrap();
        let wrong = LabeledImage { image: img.clone(), label: (pred + 1) % 3, id: "w".into() };
        let r = run_batch(&model, &[wrong], &cfg, 1).unwrap();
        assert!(r.items.is_empty());
        assert_eq!(r.skipped, vec![0]);

        let right = LabeledImage { image: img.clone(), label: pred, id: "r".into() };
        let batch = run_batch(&model, &[right], &cfg, 2).unwrap();
        let single = run_attack(&model, &img, pred, &cfg).unwrap();
        assert_eq!(batch.items[0].report, single);
    }
}
