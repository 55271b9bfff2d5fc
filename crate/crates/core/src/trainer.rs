//! Natural (N) and adversarial (A) training on raw images X or masked
//! images X_FG, plus the comparative evaluation that produces the
//! four-cell robustness table.
//!
//! Reproducibility contract: identical `TrainConfig` (seed included) and
//! manifest give bit-identical checkpoints. One master generator seeded
//! from the config drives, in order, model initialization, every epoch's
//! shuffle, and (adversarial mode) one attack seed per batch.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attack::{argmax, pgd_attack, AttackConfig};
use crate::autodiff::{self, GradRequest, Gradients};
use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::model::Model;
use crate::optim::{sgd_step, MomentumState};
use crate::tensor::Tensor;
use crate::transforms::apply_mask;

pub const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Natural,
    Adversarial,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Natural => "natural",
            TrainMode::Adversarial => "adversarial",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "natural" => Ok(TrainMode::Natural),
            "adversarial" => Ok(TrainMode::Adversarial),
            _ => Err(Error::invalid_param("mode", format!("`{s}` (natural|adversarial)"))),
        }
    }
}

/// What the model sees: raw images X, or foreground-masked images X_FG
/// (off-mask pixels exactly zero, adversarial perturbations restricted to
/// the mask).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    Raw,
    Masked,
}

impl InputMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            InputMode::Raw => "raw",
            InputMode::Masked => "masked",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(InputMode::Raw),
            "masked" => Ok(InputMode::Masked),
            _ => Err(Error::invalid_param("input_mode", format!("`{s}` (raw|masked)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub input_mode: InputMode,
    /// Attack used to build training batches in adversarial mode. The
    /// configured seed is ignored there: each batch draws a fresh attack
    /// seed from the master generator.
    pub attack: AttackConfig,
    /// Adversarial mode: epoch `e` (1-based) trains at budget
    /// `epsilon * min(1, e / epsilon_ramp_epochs)`, step size scaled the
    /// same way. A full-strength attack on a fresh random model flips
    /// nearly every batch, and training against that moving target can sink
    /// the feature stack into a dead state it never leaves; ramping the
    /// budget lets the model become competent first. 0 disables the ramp;
    /// natural mode ignores it.
    pub epsilon_ramp_epochs: usize,
}

impl TrainConfig {
    pub fn natural(input_mode: InputMode, seed: u64) -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            seed,
            mode: TrainMode::Natural,
            input_mode,
            attack: AttackConfig::default(),
            epsilon_ramp_epochs: 0,
        }
    }

    pub fn adversarial(input_mode: InputMode, seed: u64) -> Self {
        TrainConfig {
            epochs: 60,
            mode: TrainMode::Adversarial,
            attack: AttackConfig::training(seed),
            epsilon_ramp_epochs: 5,
            ..TrainConfig::natural(input_mode, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid_param("batch_size", "0 (need >= 1)"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::invalid_param("lr", format!("{}", self.lr)));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::invalid_param("momentum", format!("{}", self.momentum)));
        }
        if self.mode == TrainMode::Adversarial {
            self.attack.validate()?;
        }
        Ok(())
    }
}

/// Loss and accuracy over one epoch, measured on the tensors that actually
/// entered the gradient step (adversarial examples in adversarial mode).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

struct Loaded {
    chw: Vec<Vec<f64>>,
    labels: Vec<usize>,
    masks: Vec<Mask>,
    input_shape: [usize; 3],
}

impl Loaded {
    fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>, Vec<Mask>)> {
        let [c, h, w] = self.input_shape;
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        let mut masks = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.chw[i]);
            labels.push(self.labels[i]);
            if !self.masks.is_empty() {
                masks.push(self.masks[i].clone());
            }
        }
        let x = Tensor::new(&[indices.len(), c, h, w], data)?;
        Ok((x, labels, masks))
    }
}

/// Reads every record into memory, applying the mask in X_FG mode. Masks
/// are kept (for attack restriction) only in X_FG mode.
fn load_records(manifest: &DatasetManifest, input_mode: InputMode) -> Result<Loaded> {
    if manifest.is_empty() {
        return Err(Error::Invalid("manifest has no records".into()));
    }
    let mut chw = Vec::with_capacity(manifest.len());
    let mut labels = Vec::with_capacity(manifest.len());
    let mut masks = Vec::new();
    let mut input_shape = None;
    for (i, record) in manifest.records.iter().enumerate() {
        let img = Image::read_netpbm(&manifest.image_path(record))?;
        let shape = [img.channels(), img.height(), img.width()];
        let expected = *input_shape.get_or_insert(shape);
        if shape != expected {
            return Err(Error::shape(
                format!("record {i}"),
                format!("{expected:?}"),
                format!("{shape:?}"),
            ));
        }
        let img = match input_mode {
            InputMode::Raw => img,
            InputMode::Masked => {
                let Some(mask_path) = manifest.mask_path(record) else {
                    return Err(Error::Invalid(format!(
                        "record {i} ({}) has no mask but input mode is masked",
                        record.image
                    )));
                };
                let mask = Mask::read_pgm(&mask_path)?;
                let out = apply_mask(&img, &mask)?;
                masks.push(mask);
                out
            }
        };
        chw.push(img.to_chw());
        labels.push(record.label);
    }
    Ok(Loaded {
        chw,
        labels,
        masks,
        input_shape: input_shape.expect("nonempty manifest"),
    })
}

/// Parameter gradients are rescaled to this global L2 norm when they exceed
/// it. Early batches (adversarial ones especially) can spike hard enough to
/// knock the whole feature stack into dead-ReLU territory, after which the
/// network predicts one class forever; the bound is generous and inert once
/// training is healthy.
const GRAD_CLIP_NORM: f64 = 5.0;

fn clip_gradients(grads: &mut Gradients) {
    let mut sq = 0.0;
    for (gw, gb) in grads.layers.iter().flatten() {
        sq += gw.data().iter().map(|g| g * g).sum::<f64>();
        sq += gb.data().iter().map(|g| g * g).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > GRAD_CLIP_NORM {
        let scale = GRAD_CLIP_NORM / norm;
        for (gw, gb) in grads.layers.iter_mut().flatten() {
            for g in gw.data_mut().iter_mut().chain(gb.data_mut().iter_mut()) {
                *g *= scale;
            }
        }
    }
}

/// Fraction of the attack budget in force during `epoch` (0-based).
fn ramp_scale(epoch: usize, ramp_epochs: usize) -> f64 {
    if ramp_epochs == 0 {
        1.0
    } else {
        ((epoch + 1) as f64 / ramp_epochs as f64).min(1.0)
    }
}

/// Trains a fresh SmallVGG on the manifest. Model width, shuffle order, and
/// per-batch attack seeds all derive from `cfg.seed`; the returned log has
/// one entry per epoch. Gradients are clipped to a global norm of
/// [`GRAD_CLIP_NORM`] before every step.
pub fn train(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<(Model, Vec<EpochStats>)> {
    cfg.validate()?;
    let classes = manifest.label_names.len();
    if classes < 2 {
        return Err(Error::invalid_param(
            "manifest",
            format!("{classes} label names (training needs >= 2 classes)"),
        ));
    }
    let data = load_records(manifest, cfg.input_mode)?;
    let n = data.labels.len();

    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::small_vgg(data.input_shape, classes, master.random())?;
    let mut state = MomentumState::new(&model);
    let mut log = Vec::with_capacity(cfg.epochs);

    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let scale = ramp_scale(epoch, cfg.epsilon_ramp_epochs);
        order.shuffle(&mut master);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch_indices in order.chunks(cfg.batch_size) {
            let (x, labels, batch_masks) = data.batch(batch_indices)?;
            let x = match cfg.mode {
                TrainMode::Natural => x,
                TrainMode::Adversarial => {
                    let attack = AttackConfig {
                        seed: master.random(),
                        epsilon: cfg.attack.epsilon * scale,
                        step_size: cfg.attack.step_size * scale,
                        ..cfg.attack.clone()
                    };
                    let mask_arg = (cfg.input_mode == InputMode::Masked).then_some(&batch_masks[..]);
                    pgd_attack(&model, &x, &labels, &attack, mask_arg)?.adversarial
                }
            };
            let (loss, logits, mut grads) =
                autodiff::run(&model, &x, &labels, GradRequest { params: true, input: false })?;
            loss_sum += loss * batch_indices.len() as f64;
            for (row, &label) in logits.data().chunks(classes).zip(&labels) {
                if argmax(row) == label {
                    correct += 1;
                }
            }
            clip_gradients(&mut grads);
            sgd_step(&mut model, &grads, cfg.lr, cfg.momentum, &mut state)?;
        }
        log.push(EpochStats {
            loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
        });
    }
    Ok((model, log))
}

/// Accuracy of `model` over the full manifest: always natural accuracy, and
/// additionally accuracy under `attack` when one is given (perturbations
/// restricted to the mask in X_FG mode). Counts are exact integers.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub input_mode: InputMode,
    pub attack: Option<AttackConfig>,
    pub samples: usize,
    pub natural_correct: usize,
    pub pgd_correct: Option<usize>,
}

impl EvalReport {
    pub fn natural_accuracy(&self) -> f64 {
        self.natural_correct as f64 / self.samples as f64
    }

    pub fn pgd_accuracy(&self) -> Option<f64> {
        self.pgd_correct.map(|c| c as f64 / self.samples as f64)
    }
}

pub fn evaluate(
    model: &Model,
    manifest: &DatasetManifest,
    attack: Option<&AttackConfig>,
    input_mode: InputMode,
) -> Result<EvalReport> {
    if let Some(cfg) = attack {
        cfg.validate()?;
    }
    let data = load_records(manifest, input_mode)?;
    let n = data.labels.len();
    for (i, &label) in data.labels.iter().enumerate() {
        if label >= model.classes() {
            return Err(Error::Invalid(format!(
                "record {i}: label {label} out of range for a {}-class model",
                model.classes()
            )));
        }
    }

    let order: Vec<usize> = (0..n).collect();
    let mut natural_correct = 0usize;
    let mut pgd_correct = attack.map(|_| 0usize);
    for batch_indices in order.chunks(EVAL_BATCH) {
        let (x, labels, batch_masks) = data.batch(batch_indices)?;
        let logits = model.forward(&x)?;
        for (row, &label) in logits.data().chunks(model.classes()).zip(&labels) {
            if argmax(row) == label {
                natural_correct += 1;
            }
        }
        if let (Some(cfg), Some(correct)) = (attack, pgd_correct.as_mut()) {
            let mask_arg = (input_mode == InputMode::Masked).then_some(&batch_masks[..]);
            let adv = pgd_attack(model, &x, &labels, cfg, mask_arg)?;
            let logits = model.forward(&adv.adversarial)?;
            for (row, &label) in logits.data().chunks(model.classes()).zip(&labels) {
                if argmax(row) == label {
                    *correct += 1;
                }
            }
        }
    }
    Ok(EvalReport {
        input_mode,
        attack: attack.cloned(),
        samples: n,
        natural_correct,
        pgd_correct,
    })
}

/// Report file: `MBREPORT 1` then one `key=value` per line, fixed order.
pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let mut out = String::from("MBREPORT 1\n");
    out.push_str(&format!("input_mode={}\n", report.input_mode.as_str()));
    out.push_str(&format!("samples={}\n", report.samples));
    out.push_str(&format!("natural_correct={}\n", report.natural_correct));
    match (&report.attack, report.pgd_correct) {
        (Some(cfg), Some(pgd)) => {
            out.push_str(&format!("pgd_correct={pgd}\n"));
            out.push_str(&format!("epsilon={}\n", cfg.epsilon));
            out.push_str(&format!("step_size={}\n", cfg.step_size));
            out.push_str(&format!("steps={}\n", cfg.steps));
            out.push_str(&format!("random_start={}\n", cfg.random_start));
            out.push_str(&format!("attack_seed={}\n", cfg.seed));
        }
        (None, None) => {}
        _ => {
            return Err(Error::Invalid(
                "report must carry an attack config iff it carries a PGD count".into(),
            ));
        }
    }
    if report.natural_correct > report.samples
        || report.pgd_correct.is_some_and(|c| c > report.samples)
        || report.samples == 0
    {
        return Err(Error::Invalid("report counts are inconsistent".into()));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, magic) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty file"))?;
    if magic != "MBREPORT 1" {
        return Err(Error::parse(path, 1, format!("bad magic `{magic}`, expected `MBREPORT 1`")));
    }

    let mut input_mode = None;
    let mut samples = None;
    let mut natural_correct = None;
    let mut pgd_correct = None;
    let mut epsilon = None;
    let mut step_size = None;
    let mut steps = None;
    let mut random_start = None;
    let mut attack_seed = None;
    for (idx, line) in lines {
        let line_no = idx + 1;
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::parse(path, line_no, format!("expected key=value, got `{line}`")));
        };
        let bad = |what: &str| Error::parse(path, line_no, format!("bad {what} `{value}`"));
        match key {
            "input_mode" => input_mode = Some(InputMode::parse(value)?),
            "samples" => samples = Some(value.parse::<usize>().map_err(|_| bad("count"))?),
            "natural_correct" => {
                natural_correct = Some(value.parse::<usize>().map_err(|_| bad("count"))?)
            }
            "pgd_correct" => pgd_correct = Some(value.parse::<usize>().map_err(|_| bad("count"))?),
            "epsilon" => epsilon = Some(value.parse::<f64>().map_err(|_| bad("number"))?),
            "step_size" => step_size = Some(value.parse::<f64>().map_err(|_| bad("number"))?),
            "steps" => steps = Some(value.parse::<usize>().map_err(|_| bad("count"))?),
            "random_start" => {
                random_start = Some(value.parse::<bool>().map_err(|_| bad("bool"))?)
            }
            "attack_seed" => attack_seed = Some(value.parse::<u64>().map_err(|_| bad("seed"))?),
            _ => return Err(Error::parse(path, line_no, format!("unknown key `{key}`"))),
        }
    }

    let missing = |what: &str| Error::parse(path, 0, format!("missing key `{what}`"));
    let samples = samples.ok_or_else(|| missing("samples"))?;
    let natural_correct = natural_correct.ok_or_else(|| missing("natural_correct"))?;
    let input_mode = input_mode.ok_or_else(|| missing("input_mode"))?;
    let attack = match (epsilon, step_size, steps, random_start, attack_seed, pgd_correct) {
        (Some(epsilon), Some(step_size), Some(steps), Some(random_start), Some(seed), Some(_)) => {
            Some(AttackConfig { epsilon, step_size, steps, random_start, seed })
        }
        (None, None, None, None, None, None) => None,
        _ => {
            return Err(Error::parse(
                path,
                0,
                "attack keys (epsilon, step_size, steps, random_start, attack_seed, pgd_correct) \
                 must appear together or not at all",
            ));
        }
    };
    if samples == 0 || natural_correct > samples || pgd_correct.is_some_and(|c| c > samples) {
        return Err(Error::parse(path, 0, "counts are inconsistent"));
    }
    Ok(EvalReport { input_mode, attack, samples, natural_correct, pgd_correct })
}

/// Percentage in basis points (hundredths of a percent), rounded half away
/// from zero; all table arithmetic happens on these integers so the printed
/// deltas always match the printed percentages.
fn pct_bp(correct: usize, samples: usize) -> i64 {
    (correct as f64 / samples as f64 * 10000.0).round() as i64
}

fn fmt_pct(bp: i64) -> String {
    format!("{}.{:02}", bp / 100, bp % 100)
}

fn fmt_delta(bp: i64) -> String {
    match bp {
        0 => "0.00".to_string(),
        b if b > 0 => format!("+{}", fmt_pct(b)),
        b => format!("-{}", fmt_pct(-b)),
    }
}

/// Renders the four-cell comparison: accuracy rows for {X, X_FG} x {N, A}
/// and delta rows (X_FG - X) per training mode. Percentages are rounded to
/// two decimals first; deltas are differences of the rounded values.
pub fn compare_table(
    x_n: &EvalReport,
    x_a: &EvalReport,
    fg_n: &EvalReport,
    fg_a: &EvalReport,
) -> String {
    let cell = |r: &EvalReport| {
        (
            pct_bp(r.natural_correct, r.samples),
            r.pgd_correct.map(|c| pct_bp(c, r.samples)),
        )
    };
    let row = |data: &str, training: &str, nat: String, pgd: String| {
        format!("{data:<5}  {training:<8}  {nat:>7}  {pgd:>7}\n")
    };
    let acc_row = |data: &str, training: &str, r: &EvalReport| {
        let (nat, pgd) = cell(r);
        row(data, training, fmt_pct(nat), pgd.map_or_else(|| "-".to_string(), fmt_pct))
    };
    let delta_row = |training: &str, x: &EvalReport, fg: &EvalReport| {
        let (x_nat, x_pgd) = cell(x);
        let (fg_nat, fg_pgd) = cell(fg);
        let pgd = match (x_pgd, fg_pgd) {
            (Some(a), Some(b)) => fmt_delta(b - a),
            _ => "-".to_string(),
        };
        row("delta", training, fmt_delta(fg_nat - x_nat), pgd)
    };

    let mut out = row("data", "training", "natural".to_string(), "pgd".to_string());
    out.push_str(&acc_row("X", "N", x_n));
    out.push_str(&acc_row("X", "A", x_a));
    out.push_str(&acc_row("X_FG", "N", fg_n));
    out.push_str(&acc_row("X_FG", "A", fg_a));
    out.push_str(&delta_row("N", x_n, fg_n));
    out.push_str(&delta_row("A", x_a, fg_a));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_generate, SynthConfig};
    use crate::model::Layer;

    fn report(input_mode: InputMode, samples: usize, nat: usize, pgd: Option<usize>) -> EvalReport {
        EvalReport {
            input_mode,
            attack: pgd.map(|_| AttackConfig::default()),
            samples,
            natural_correct: nat,
            pgd_correct: pgd,
        }
    }

    #[test]
    fn compare_table_reproduces_the_published_deltas() {
        // Adversarially trained rows: 61.51/30.80 vs 72.92/53.62.
        let x_n = report(InputMode::Raw, 10000, 7946, Some(228));
        let x_a = report(InputMode::Raw, 10000, 6151, Some(3080));
        let fg_n = report(InputMode::Masked, 10000, 7765, Some(2197));
        let fg_a = report(InputMode::Masked, 10000, 7292, Some(5362));
        let table = compare_table(&x_n, &x_a, &fg_n, &fg_a);

        assert!(table.contains("61.51"), "{table}");
        assert!(table.contains("30.80"), "{table}");
        assert!(table.contains("72.92"), "{table}");
        assert!(table.contains("53.62"), "{table}");
        let delta_a = table.lines().last().unwrap();
        assert!(delta_a.contains("+11.41") && delta_a.contains("+22.82"), "{table}");
    }

    #[test]
    fn compare_table_zero_and_sign_handling() {
        // 98.04/18.69 vs 98.04/38.38 -> deltas 0.00 and +19.69.
        let x_n = report(InputMode::Raw, 10000, 9804, Some(1869));
        let fg_n = report(InputMode::Masked, 10000, 9804, Some(3838));
        let x_a = report(InputMode::Raw, 10000, 9000, Some(5000));
        let fg_a = report(InputMode::Masked, 10000, 8000, Some(5000));
        let table = compare_table(&x_n, &x_a, &fg_n, &fg_a);

        let delta_n = table.lines().nth(5).unwrap();
        assert!(delta_n.starts_with("delta  N"), "{table}");
        assert!(delta_n.contains("0.00") && delta_n.contains("+19.69"), "{table}");
        assert!(!delta_n.contains("+0.00"), "{table}");
        let delta_a = table.lines().nth(6).unwrap();
        assert!(delta_a.contains("-10.00") && delta_a.contains("0.00"), "{table}");

        let same = compare_table(&x_n, &x_n, &x_n, &x_n);
        for line in same.lines().skip(5) {
            assert!(line.contains("0.00") && !line.contains('+') && !line.contains('-'), "{same}");
        }
    }

    #[test]
    fn compare_table_renders_missing_pgd_as_dash() {
        let natural_only = report(InputMode::Raw, 100, 90, None);
        let table = compare_table(&natural_only, &natural_only, &natural_only, &natural_only);
        assert!(table.contains("90.00"));
        for line in table.lines().skip(1) {
            assert!(line.trim_end().ends_with('-'), "{table}");
        }
    }

    #[test]
    fn report_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let with_attack = EvalReport {
            input_mode: InputMode::Masked,
            attack: Some(AttackConfig::training(7)),
            samples: 400,
            natural_correct: 361,
            pgd_correct: Some(129),
        };
        let path = dir.path().join("fg_a.report");
        write_report(&with_attack, &path).unwrap();
        assert_eq!(read_report(&path).unwrap(), with_attack);

        let natural_only = report(InputMode::Raw, 50, 49, None);
        let path2 = dir.path().join("x_n.report");
        write_report(&natural_only, &path2).unwrap();
        assert_eq!(read_report(&path2).unwrap(), natural_only);

        // The file is plain key=value text.
        let text = fs::read_to_string(&path2).unwrap();
        assert_eq!(text, "MBREPORT 1\ninput_mode=raw\nsamples=50\nnatural_correct=49\n");
    }

    #[test]
    fn report_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r");

        fs::write(&path, "MBREPORT 2\n").unwrap();
        assert!(read_report(&path).unwrap_err().to_string().contains("magic"));

        fs::write(&path, "MBREPORT 1\ninput_mode=raw\nsamples=10\nnatural_correct=3\nbogus=1\n")
            .unwrap();
        let msg = read_report(&path).unwrap_err().to_string();
        assert!(msg.contains(":5:") && msg.contains("bogus"), "{msg}");

        fs::write(&path, "MBREPORT 1\ninput_mode=raw\nsamples=10\n").unwrap();
        assert!(read_report(&path).unwrap_err().to_string().contains("natural_correct"));

        // pgd count without the attack echo is rejected both ways.
        fs::write(
            &path,
            "MBREPORT 1\ninput_mode=raw\nsamples=10\nnatural_correct=3\npgd_correct=1\n",
        )
        .unwrap();
        assert!(read_report(&path).is_err());
        let bad = EvalReport { pgd_correct: Some(1), ..report(InputMode::Raw, 10, 3, None) };
        assert!(write_report(&bad, &path).is_err());

        fs::write(&path, "MBREPORT 1\ninput_mode=raw\nsamples=10\nnatural_correct=11\n").unwrap();
        assert!(read_report(&path).unwrap_err().to_string().contains("inconsistent"));
    }

    fn tiny_set(dir: &Path, n: usize, side: usize, seed: u64) -> DatasetManifest {
        let cfg = SynthConfig { n_samples: n, side, seed, ..SynthConfig::default() };
        synth_generate(&cfg, dir).unwrap().0
    }

    fn quick_cfg(mode: TrainMode, input_mode: InputMode, seed: u64) -> TrainConfig {
        let mut cfg = match mode {
            TrainMode::Natural => TrainConfig::natural(input_mode, seed),
            TrainMode::Adversarial => TrainConfig::adversarial(input_mode, seed),
        };
        cfg.epochs = 2;
        cfg.batch_size = 8;
        cfg.attack.steps = 3;
        cfg
    }

    fn save_bytes(model: &Model, dir: &Path, name: &str) -> Vec<u8> {
        let path = dir.join(name);
        model.save(&path).unwrap();
        fs::read(&path).unwrap()
    }

    #[test]
    fn zero_epochs_and_zero_lr_leave_the_initialized_model_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_set(&dir.path().join("data"), 16, 8, 0);

        let mut cfg = quick_cfg(TrainMode::Natural, InputMode::Raw, 11);
        cfg.epochs = 0;
        let (untrained, log) = train(&manifest, &cfg).unwrap();
        assert!(log.is_empty());

        let mut cfg_zero_lr = quick_cfg(TrainMode::Natural, InputMode::Raw, 11);
        cfg_zero_lr.epochs = 3;
        cfg_zero_lr.lr = 0.0;
        let (frozen, log) = train(&manifest, &cfg_zero_lr).unwrap();
        assert_eq!(log.len(), 3);

        // Same seed => same initialization; zero lr => identical checkpoint.
        assert_eq!(
            save_bytes(&untrained, dir.path(), "a.mbnet"),
            save_bytes(&frozen, dir.path(), "b.mbnet"),
        );
    }

    #[test]
    fn adversarial_masked_training_is_bit_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_set(&dir.path().join("data"), 16, 8, 1);
        let cfg = quick_cfg(TrainMode::Adversarial, InputMode::Masked, 3);

        let (model_a, log_a) = train(&manifest, &cfg).unwrap();
        let (model_b, log_b) = train(&manifest, &cfg).unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(
            save_bytes(&model_a, dir.path(), "a.mbnet"),
            save_bytes(&model_b, dir.path(), "b.mbnet"),
        );

        let (model_c, _) = train(&manifest, &TrainConfig { seed: 4, ..cfg.clone() }).unwrap();
        assert_ne!(
            save_bytes(&model_a, dir.path(), "a.mbnet"),
            save_bytes(&model_c, dir.path(), "c.mbnet"),
        );
    }

    #[test]
    fn ramp_scale_schedule() {
        for epoch in 0..10 {
            assert_eq!(ramp_scale(epoch, 0), 1.0);
        }
        let four: Vec<f64> = (0..6).map(|e| ramp_scale(e, 4)).collect();
        assert_eq!(four, [0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
        assert_eq!(ramp_scale(0, 1), 1.0);
    }

    #[test]
    fn epsilon_ramp_changes_adversarial_training_only() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_set(&dir.path().join("data"), 16, 8, 6);

        // Same seed, different schedules: the adversarial batches differ, so
        // the checkpoints must differ.
        let ramped = quick_cfg(TrainMode::Adversarial, InputMode::Raw, 8);
        let flat = TrainConfig { epsilon_ramp_epochs: 0, ..ramped.clone() };
        assert_eq!(ramped.epsilon_ramp_epochs, 5);
        let (model_r, _) = train(&manifest, &ramped).unwrap();
        let (model_f, _) = train(&manifest, &flat).unwrap();
        assert_ne!(
            save_bytes(&model_r, dir.path(), "r.mbnet"),
            save_bytes(&model_f, dir.path(), "f.mbnet"),
        );

        // Natural mode ignores the schedule entirely.
        let nat = quick_cfg(TrainMode::Natural, InputMode::Raw, 8);
        let nat_ramped = TrainConfig { epsilon_ramp_epochs: 3, ..nat.clone() };
        let (model_n, _) = train(&manifest, &nat).unwrap();
        let (model_nr, _) = train(&manifest, &nat_ramped).unwrap();
        assert_eq!(
            save_bytes(&model_n, dir.path(), "n.mbnet"),
            save_bytes(&model_nr, dir.path(), "nr.mbnet"),
        );
    }

    #[test]
    fn masked_mode_requires_masks() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = tiny_set(&dir.path().join("data"), 8, 8, 2);
        manifest.records[3].mask = None;

        let cfg = quick_cfg(TrainMode::Natural, InputMode::Masked, 0);
        let msg = train(&manifest, &cfg).unwrap_err().to_string();
        assert!(msg.contains("record 3") && msg.contains("mask"), "{msg}");

        let model = Model::small_vgg([3, 8, 8], 2, 0).unwrap();
        assert!(evaluate(&model, &manifest, None, InputMode::Masked).is_err());
        assert!(evaluate(&model, &manifest, None, InputMode::Raw).is_ok());
    }

    #[test]
    fn empty_manifest_and_bad_config_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_set(&dir.path().join("data"), 8, 8, 2);
        let empty = DatasetManifest {
            root: dir.path().to_path_buf(),
            label_names: vec!["a".into(), "b".into()],
            records: vec![],
        };
        let cfg = quick_cfg(TrainMode::Natural, InputMode::Raw, 0);
        assert!(train(&empty, &cfg).is_err());
        let model = Model::small_vgg([3, 8, 8], 2, 0).unwrap();
        assert!(evaluate(&model, &empty, None, InputMode::Raw).is_err());

        for bad in [
            TrainConfig { batch_size: 0, ..cfg.clone() },
            TrainConfig { lr: -0.1, ..cfg.clone() },
            TrainConfig { lr: f64::NAN, ..cfg.clone() },
            TrainConfig { momentum: 1.0, ..cfg.clone() },
        ] {
            assert!(train(&manifest, &bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn constant_logit_model_scores_the_first_class() {
        let dir = tempfile::tempdir().unwrap();
        // Hand-rolled single-class manifest over tiny flat images.
        for i in 0..3 {
            let img = Image::new(4, 4, 3, vec![0.5; 48]).unwrap();
            img.write_netpbm(&dir.path().join(format!("img{i}.ppm"))).unwrap();
        }
        let manifest = DatasetManifest {
            root: dir.path().to_path_buf(),
            label_names: vec!["only".into()],
            records: (0..3)
                .map(|i| crate::dataset::Record {
                    image: format!("img{i}.ppm"),
                    mask: None,
                    label: 0,
                })
                .collect(),
        };
        let zero_dense = Layer::Dense {
            input: 48,
            output: 2,
            weight: Tensor::zeros(&[2, 48]).unwrap(),
            bias: Tensor::zeros(&[2]).unwrap(),
        };
        let model = Model::new(vec![zero_dense], [3, 4, 4], 2).unwrap();
        let rep = evaluate(&model, &manifest, None, InputMode::Raw).unwrap();
        assert_eq!(rep.natural_correct, 3);
        assert_eq!(rep.natural_accuracy(), 1.0);
        assert_eq!(rep.pgd_correct, None);
    }

    #[test]
    fn zero_epsilon_attack_equals_no_attack_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_set(&dir.path().join("data"), 12, 8, 5);
        let model = Model::small_vgg([3, 8, 8], 2, 9).unwrap();

        let none = evaluate(&model, &manifest, None, InputMode::Raw).unwrap();
        let zero = AttackConfig { epsilon: 0.0, ..AttackConfig::default() };
        let eps0 = evaluate(&model, &manifest, Some(&zero), InputMode::Raw).unwrap();

        assert_eq!(none.natural_correct, eps0.natural_correct);
        assert_eq!(eps0.pgd_correct, Some(eps0.natural_correct));
        assert_eq!(none.pgd_correct, None);
        assert_eq!(none.samples, 12);
    }

    // The one expensive test in this module: the recorded training oracle
    // (200 synthetic samples, 2 classes, natural mode, seed 5 -> >= 99%
    // train accuracy within 30 epochs) plus the degradation direction under
    // the default PGD adversary.
    #[test]
    fn natural_training_oracle_and_pgd_degradation() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_set(&dir.path().join("data"), 200, 32, 5);
        let cfg = TrainConfig::natural(InputMode::Raw, 5);
        let (model, log) = train(&manifest, &cfg).unwrap();

        assert_eq!(log.len(), 30);
        assert!(log.iter().all(|e| e.loss.is_finite()));
        assert!(log.last().unwrap().loss < log.first().unwrap().loss, "{log:?}");

        let attacked = evaluate(&model, &manifest, Some(&AttackConfig::default()), InputMode::Raw)
            .unwrap();
        let natural_acc = attacked.natural_accuracy();
        let pgd_acc = attacked.pgd_accuracy().unwrap();
        assert!(natural_acc >= 0.99, "train accuracy {natural_acc}");
        assert!(pgd_acc < natural_acc, "PGD {pgd_acc} vs natural {natural_acc}");
    }
}
