//! Procedural datasets with a controllable spurious color cue, a small
//! corruption suite, and test-stream scenarios.
//!
//! Each image carries a core signal (a bar grating whose orientation is set
//! by the class) and a spurious signal (a tint on one of two color
//! channels). The tint agrees with the label with probability `p_corr`,
//! which is high on the source splits and low on the target split.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{RngStream, Tensor};

/// Period of the bar grating in pixels.
const BAR_PERIOD: f64 = 14.0;
/// Largest intensity added inside a bar. Each image draws its own contrast
/// uniformly below this, so faint gratings leave the tint as the easier cue.
const BAR_CONTRAST: f64 = 0.6;
/// Background intensity before tinting.
const BACKGROUND: f64 = 0.3;
/// Intensity added to the tinted channel.
const TINT: f64 = 0.3;
/// Standard deviation of the additive pixel noise.
const PIXEL_NOISE: f64 = 0.1;
/// Maximum orientation jitter in radians.
const ANGLE_JITTER: f64 = 0.12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpuriousDatasetConfig {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub p_corr_train: f64,
    pub p_corr_test: f64,
    pub label_noise: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SpuriousDatasetConfig {
    fn default() -> Self {
        SpuriousDatasetConfig {
            num_classes: 2,
            height: 28,
            width: 28,
            channels: 3,
            p_corr_train: 0.9,
            p_corr_test: 0.1,
            label_noise: 0.05,
            n_train: 2048,
            n_val: 512,
            n_test: 4096,
            seed: 0,
        }
    }
}

impl SpuriousDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0,1], got {p}")))
            }
        };
        prob("p_corr_train", self.p_corr_train)?;
        prob("p_corr_test", self.p_corr_test)?;
        prob("label_noise", self.label_noise)?;
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.channels < 2 {
            return Err(Error::Config("need at least two channels for the color cue".into()));
        }
        if self.height < 2 || self.width < 2 {
            return Err(Error::Config("images must be at least 2x2".into()));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config("split sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn num_groups(&self) -> usize {
        2 * self.num_classes
    }
}

/// Images with labels, spurious attributes and group ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub attrs: Vec<usize>,
    pub groups: Vec<usize>,
}

/// Borrowed view of one example.
#[derive(Clone, Copy, Debug)]
pub struct LabeledExample<'a> {
    pub image: &'a [f64],
    pub label: usize,
    pub attr: usize,
    pub group: usize,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn example(&self, i: usize) -> LabeledExample<'_> {
        let stride: usize = self.image_shape().iter().product();
        LabeledExample {
            image: &self.images.data()[i * stride..(i + 1) * stride],
            label: self.labels[i],
            attr: self.attrs[i],
            group: self.groups[i],
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Split> {
        Ok(Split {
            images: self.images.select_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            attrs: idx.iter().map(|&i| self.attrs[i]).collect(),
            groups: idx.iter().map(|&i| self.groups[i]).collect(),
        })
    }
}

/// Group id for a (label, binary attribute) pair.
pub fn group_id(label: usize, attr: usize) -> usize {
    label * 2 + attr
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub source_train: Split,
    pub source_val: Split,
    pub target_test: Split,
}

/// Generates the three splits. Pure in `config`.
pub fn gen_spurious_dataset(config: &SpuriousDatasetConfig) -> Result<DatasetSplits> {
    config.validate()?;
    let root = RngStream::new(config.seed).split("dataset");
    Ok(DatasetSplits {
        source_train: gen_split(config, config.n_train, config.p_corr_train, root.split("train")),
        source_val: gen_split(config, config.n_val, config.p_corr_train, root.split("val")),
        target_test: gen_split(config, config.n_test, config.p_corr_test, root.split("test")),
    })
}

fn gen_split(cfg: &SpuriousDatasetConfig, n: usize, p_corr: f64, mut rng: RngStream) -> Split {
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    let mut attrs = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for i in 0..n {
        // Balanced classes in a fixed interleaving; stream order is shuffled later.
        let core = i % cfg.num_classes;
        let label = if rng.bernoulli(cfg.label_noise) {
            let other = rng.below(cfg.num_classes - 1);
            if other >= core {
                other + 1
            } else {
                other
            }
        } else {
            core
        };
        let aligned = label % 2;
        let attr = if rng.bernoulli(p_corr) { aligned } else { 1 - aligned };

        let theta = core as f64 * PI / cfg.num_classes as f64
            + ANGLE_JITTER * (2.0 * rng.uniform() - 1.0);
        let (ct, st) = (theta.cos(), theta.sin());
        let phase = rng.uniform() * BAR_PERIOD;
        let contrast = BAR_CONTRAST * rng.uniform();
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let mut shape = vec![0.0; h * w];
        for r in 0..h {
            for q in 0..w {
                // Coordinate across the bars; bars run along direction theta.
                let t = -(q as f64 - cx) * st + (r as f64 - cy) * ct + phase;
                let frac = t.rem_euclid(BAR_PERIOD) / BAR_PERIOD;
                shape[r * w + q] = if frac < 0.5 { contrast } else { 0.0 };
            }
        }
        for ch in 0..c {
            let tint = if ch == attr { TINT } else { 0.0 };
            for s in &shape {
                let v = BACKGROUND + s + tint + PIXEL_NOISE * rng.gaussian();
                data.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(label);
        attrs.push(attr);
        groups.push(group_id(label, attr));
    }
    Split {
        images: Tensor::new(vec![n, c, h, w], data).expect("consistent split shape"),
        labels,
        attrs,
        groups,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    Contrast,
    BoxBlur,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::Contrast,
        CorruptionKind::BoxBlur,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::BoxBlur => "box_blur",
        }
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption kind `{s}`")))
    }
}

const GAUSSIAN_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
const IMPULSE_FRACTION: [f64; 5] = [0.01, 0.03, 0.06, 0.10, 0.17];
const CONTRAST_FACTOR: [f64; 5] = [0.75, 0.6, 0.45, 0.3, 0.2];
const BLUR_KERNEL: [usize; 5] = [3, 3, 5, 5, 7];

/// Applies a corruption to a `(B,C,H,W)` batch with values in `[0,1]`.
pub fn corrupt(
    batch: &Tensor,
    kind: CorruptionKind,
    severity: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    if !(1..=5).contains(&severity) {
        return Err(Error::Config(format!("severity must be 1..=5, got {severity}")));
    }
    let s = severity - 1;
    let mut out = match kind {
        CorruptionKind::GaussianNoise => {
            let mut out = batch.clone();
            for v in out.data_mut() {
                *v += GAUSSIAN_SIGMA[s] * rng.gaussian();
            }
            out
        }
        CorruptionKind::ImpulseNoise => {
            let mut out = batch.clone();
            for v in out.data_mut() {
                if rng.bernoulli(IMPULSE_FRACTION[s]) {
                    *v = if rng.bernoulli(0.5) { 1.0 } else { 0.0 };
                }
            }
            out
        }
        CorruptionKind::Contrast => {
            let f = CONTRAST_FACTOR[s];
            batch.map(|v| (v - 0.5) * f + 0.5)
        }
        CorruptionKind::BoxBlur => box_blur(batch, BLUR_KERNEL[s])?,
    };
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

/// Adds N(0, sigma) noise without clipping; used to check the noise scale.
pub fn gaussian_noise_unclipped(batch: &Tensor, severity: usize, rng: &mut RngStream) -> Result<Tensor> {
    if !(1..=5).contains(&severity) {
        return Err(Error::Config(format!("severity must be 1..=5, got {severity}")));
    }
    let mut out = batch.clone();
    for v in out.data_mut() {
        *v += GAUSSIAN_SIGMA[severity - 1] * rng.gaussian();
    }
    Ok(out)
}

/// Normalized k x k box filter with clamp-to-edge borders.
fn box_blur(batch: &Tensor, k: usize) -> Result<Tensor> {
    let (_, _, h, w) = batch.dims4("box_blur")?;
    let r = (k / 2) as isize;
    let norm = (k * k) as f64;
    let mut out = batch.clone();
    for (src, dst) in batch.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for dy in -r..=r {
                    let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -r..=r {
                        let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                        acc += src[yy * w + xx];
                    }
                }
                dst[y as usize * w + x as usize] = acc / norm;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Mild,
    ImbalancedLabel,
    MixedShift,
}

impl ScenarioKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioKind::Mild => "mild",
            ScenarioKind::ImbalancedLabel => "imbalanced_label",
            ScenarioKind::MixedShift => "mixed_shift",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mild" => Ok(ScenarioKind::Mild),
            "imbalanced_label" => Ok(ScenarioKind::ImbalancedLabel),
            "mixed_shift" => Ok(ScenarioKind::MixedShift),
            _ => Err(Error::Config(format!("unknown scenario `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamScenario {
    pub kind: ScenarioKind,
    pub batch_size: usize,
    /// Corruptions drawn from for `mixed_shift`.
    pub corruptions: Vec<CorruptionKind>,
    pub severity: usize,
}

impl Default for StreamScenario {
    fn default() -> Self {
        StreamScenario {
            kind: ScenarioKind::Mild,
            batch_size: 64,
            corruptions: CorruptionKind::ALL.to_vec(),
            severity: 3,
        }
    }
}

impl StreamScenario {
    pub fn of_kind(kind: ScenarioKind) -> Self {
        StreamScenario {
            kind,
            ..Default::default()
        }
    }
}

/// One test batch with its ground truth and position in the test split.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
    pub indices: Vec<usize>,
    pub corruption: Option<CorruptionKind>,
}

/// Orders the test split into batches according to the scenario.
///
/// A trailing remainder of a single example is merged into the previous
/// batch so that every batch has at least two samples.
pub fn make_stream(test: &Split, scenario: &StreamScenario, seed: u64) -> Result<Vec<StreamBatch>> {
    if scenario.batch_size < 2 {
        return Err(Error::Config(format!(
            "batch size must be at least 2, got {}",
            scenario.batch_size
        )));
    }
    if test.len() < 2 {
        return Err(Error::Config("test split needs at least two examples".into()));
    }
    let root = RngStream::new(seed).split("stream");
    let mut order_rng = root.split("order");
    let order: Vec<usize> = match scenario.kind {
        ScenarioKind::Mild | ScenarioKind::MixedShift => order_rng.permutation(test.len()),
        ScenarioKind::ImbalancedLabel => {
            let num_labels = test.labels.iter().max().map_or(0, |m| m + 1);
            let mut blocks: Vec<Vec<usize>> = vec![Vec::new(); num_labels];
            for (i, &y) in test.labels.iter().enumerate() {
                blocks[y].push(i);
            }
            let block_order = order_rng.permutation(num_labels);
            let mut order = Vec::with_capacity(test.len());
            for b in block_order {
                let mut block = std::mem::take(&mut blocks[b]);
                order_rng.shuffle(&mut block);
                order.extend(block);
            }
            order
        }
    };

    let mut chunks: Vec<Vec<usize>> = order
        .chunks(scenario.batch_size)
        .map(|c| c.to_vec())
        .collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
        let tail = chunks.pop().unwrap();
        chunks.last_mut().unwrap().extend(tail);
    }

    if scenario.kind == ScenarioKind::MixedShift && scenario.corruptions.is_empty() {
        return Err(Error::Config("mixed_shift needs at least one corruption".into()));
    }
    let corrupt_root = root.split("corrupt");
    chunks
        .into_iter()
        .enumerate()
        .map(|(bi, idx)| {
            let sub = test.subset(&idx)?;
            let (images, corruption) = if scenario.kind == ScenarioKind::MixedShift {
                let mut rng = corrupt_root.split_index(bi as u64);
                let kind = scenario.corruptions[rng.below(scenario.corruptions.len())];
                (corrupt(&sub.images, kind, scenario.severity, &mut rng)?, Some(kind))
            } else {
                (sub.images, None)
            };
            Ok(StreamBatch {
                images,
                labels: sub.labels,
                groups: sub.groups,
                indices: idx,
                corruption,
            })
        })
        .collect()
}

/// On-disk form of one split: config echo plus every example.
#[derive(Serialize, Deserialize)]
pub struct SplitDump {
    pub config_echo: SpuriousDatasetConfig,
    pub examples: Vec<ExampleDump>,
}

#[derive(Serialize, Deserialize)]
pub struct ExampleDump {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub y: usize,
    pub a: usize,
    pub g: usize,
}

pub fn dump_split(config: &SpuriousDatasetConfig, split: &Split) -> SplitDump {
    SplitDump {
        config_echo: config.clone(),
        examples: (0..split.len())
            .map(|i| {
                let ex = split.example(i);
                ExampleDump {
                    shape: split.image_shape().to_vec(),
                    values: ex.image.to_vec(),
                    y: ex.label,
                    a: ex.attr,
                    g: ex.group,
                }
            })
            .collect(),
    }
}

/// Writes `<dir>/<name>.json` for each of the three splits.
pub fn write_dataset_dump(
    config: &SpuriousDatasetConfig,
    splits: &DatasetSplits,
    dir: &std::path::Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, split) in [
        ("source_train", &splits.source_train),
        ("source_val", &splits.source_val),
        ("target_test", &splits.target_test),
    ] {
        let path = dir.join(format!("{name}.json"));
        let text = serde_json::to_string(&dump_split(config, split))
            .map_err(|e| Error::Malformed(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SpuriousDatasetConfig {
        SpuriousDatasetConfig {
            n_train: 200,
            n_val: 50,
            n_test: 130,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn forced_correlation() {
        let cfg = SpuriousDatasetConfig {
            p_corr_train: 1.0,
            label_noise: 0.0,
            ..small()
        };
        let s = gen_spurious_dataset(&cfg).unwrap();
        for (y, a) in s.source_train.labels.iter().zip(&s.source_train.attrs) {
            assert_eq!(y, a);
        }
    }

    #[test]
    fn split_sizes_honored() {
        let s = gen_spurious_dataset(&small()).unwrap();
        assert_eq!(s.source_train.len(), 200);
        assert_eq!(s.source_val.len(), 50);
        assert_eq!(s.target_test.len(), 130);
        assert_eq!(s.target_test.images.shape(), &[130, 3, 28, 28]);
    }

    #[test]
    fn generation_is_pure() {
        assert_eq!(gen_spurious_dataset(&small()).unwrap(), gen_spurious_dataset(&small()).unwrap());
    }

    #[test]
    fn groups_partition_and_are_nonempty() {
        let s = gen_spurious_dataset(&SpuriousDatasetConfig::default()).unwrap();
        for split in [&s.source_train, &s.source_val, &s.target_test] {
            let mut counts = [0usize; 4];
            for (i, &g) in split.groups.iter().enumerate() {
                assert_eq!(g, group_id(split.labels[i], split.attrs[i]));
                counts[g] += 1;
            }
            assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
        }
    }

    #[test]
    fn pixels_in_unit_range() {
        let s = gen_spurious_dataset(&small()).unwrap();
        assert!(s.source_train.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn invalid_probability_rejected() {
        let cfg = SpuriousDatasetConfig {
            p_corr_test: 1.5,
            ..small()
        };
        assert!(matches!(gen_spurious_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn contrast_fixed_point() {
        let img = Tensor::full(&[1, 3, 8, 8], 0.5);
        let out = corrupt(&img, CorruptionKind::Contrast, 5, &mut RngStream::new(0)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn blur_keeps_constant_image() {
        let img = Tensor::full(&[2, 3, 9, 9], 0.37);
        for sev in 1..=5 {
            let out = corrupt(&img, CorruptionKind::BoxBlur, sev, &mut RngStream::new(0)).unwrap();
            assert!(out.max_abs_diff(&img) < 1e-15);
        }
    }

    #[test]
    fn gaussian_noise_scale() {
        let img = Tensor::full(&[1, 1, 100, 100], 0.5);
        let mut rng = RngStream::new(9).split("noise");
        let out = gaussian_noise_unclipped(&img, 1, &mut rng).unwrap();
        let d: Vec<f64> = out.data().iter().map(|v| v - 0.5).collect();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!((0.037..=0.043).contains(&sd), "{sd}");
    }

    #[test]
    fn corruption_stays_in_range() {
        let s = gen_spurious_dataset(&small()).unwrap();
        let batch = s.target_test.images.select_rows(&[0, 1, 2, 3]).unwrap();
        let mut rng = RngStream::new(1);
        for kind in CorruptionKind::ALL {
            for sev in 1..=5 {
                let out = corrupt(&batch, kind, sev, &mut rng).unwrap();
                assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn bad_severity_and_kind() {
        let img = Tensor::full(&[1, 1, 4, 4], 0.5);
        assert!(corrupt(&img, CorruptionKind::Contrast, 0, &mut RngStream::new(0)).is_err());
        assert!(corrupt(&img, CorruptionKind::Contrast, 6, &mut RngStream::new(0)).is_err());
        assert!("fog".parse::<CorruptionKind>().is_err());
    }

    #[test]
    fn stream_covers_every_example_once() {
        let s = gen_spurious_dataset(&small()).unwrap();
        for kind in [ScenarioKind::Mild, ScenarioKind::ImbalancedLabel, ScenarioKind::MixedShift] {
            let stream = make_stream(&s.target_test, &StreamScenario::of_kind(kind), 4).unwrap();
            let mut seen: Vec<usize> = stream.iter().flat_map(|b| b.indices.clone()).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..s.target_test.len()).collect::<Vec<_>>());
            assert!(stream.iter().all(|b| b.labels.len() >= 2));
        }
    }

    #[test]
    fn imbalanced_label_has_few_transitions() {
        let s = gen_spurious_dataset(&small()).unwrap();
        let stream = make_stream(
            &s.target_test,
            &StreamScenario::of_kind(ScenarioKind::ImbalancedLabel),
            8,
        )
        .unwrap();
        let labels: Vec<usize> = stream.iter().flat_map(|b| b.labels.clone()).collect();
        let transitions = labels.windows(2).filter(|w| w[0] != w[1]).count();
        assert!(transitions <= 1, "{transitions}");
    }

    #[test]
    fn stream_is_deterministic() {
        let s = gen_spurious_dataset(&small()).unwrap();
        let sc = StreamScenario::of_kind(ScenarioKind::MixedShift);
        assert_eq!(make_stream(&s.target_test, &sc, 5).unwrap(), make_stream(&s.target_test, &sc, 5).unwrap());
    }

    #[test]
    fn tiny_batch_rejected() {
        let s = gen_spurious_dataset(&small()).unwrap();
        let sc = StreamScenario {
            batch_size: 1,
            ..Default::default()
        };
        assert!(matches!(make_stream(&s.target_test, &sc, 0), Err(Error::Config(_))));
    }

    #[test]
    fn remainder_of_one_is_merged() {
        let s = gen_spurious_dataset(&small()).unwrap();
        let sub = s.target_test.subset(&(0..129).collect::<Vec<_>>()).unwrap();
        let stream = make_stream(&sub, &StreamScenario::default(), 1).unwrap();
        assert_eq!(stream.len(), 2);
        assert_eq!(stream[1].labels.len(), 65);
    }
}
