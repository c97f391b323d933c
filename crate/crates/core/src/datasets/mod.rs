//! Digit ingestion and multi-domain colored splits.
//!
//! Domains differ only by a multiplicative foreground palette, so every
//! colored sample keeps its grayscale glyph intact and labels never depend on
//! the domain.

mod dump;
pub mod glyphs;
pub mod idx;

pub use dump::{read_dump, write_dump, DUMP_MAGIC, DUMP_VERSION, OOD_MARKER};
pub use glyphs::{synthetic_digits, GlyphStyle};
pub use idx::load_idx;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const CHANNELS: usize = 3;
/// Flattened length of a colored image.
pub const COLOR_PIXELS: usize = CHANNELS * IMAGE_PIXELS;

/// Grayscale digits with labels in `0..=9`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDigitSet {
    /// `[N × 28 × 28]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<u8>,
}

impl RawDigitSet {
    pub fn new(images: Tensor, labels: Vec<u8>) -> Result<Self> {
        if images.rank() != 3 || images.shape()[1] != IMAGE_SIDE || images.shape()[2] != IMAGE_SIDE
        {
            return Err(Error::shape(
                "raw digits",
                images.shape(),
                &[0, IMAGE_SIDE, IMAGE_SIDE],
            ));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format("pixel outside [0, 1]".into()));
        }
        Ok(RawDigitSet { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images.data()[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }
}

/// One domain: a foreground palette applied multiplicatively to the glyph.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: u8,
    pub palette: [f64; 3],
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.palette.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config(format!(
                "domain {} palette {:?} outside [0,1]^3",
                self.domain_id, self.palette
            )));
        }
        if self.palette.iter().all(|&c| c == 0.0) {
            return Err(Error::Config(format!(
                "domain {} has a black palette",
                self.domain_id
            )));
        }
        Ok(())
    }
}

/// Class label of a colored sample: an index into the ID classes, or the OOD marker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Id(usize),
    Ood,
}

impl Label {
    pub fn id(self) -> Option<usize> {
        match self {
            Label::Id(k) => Some(k),
            Label::Ood => None,
        }
    }

    pub fn is_ood(self) -> bool {
        matches!(self, Label::Ood)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColoredSample {
    /// `[3 × 28 × 28]` in `[0, 1]`.
    pub image: Tensor,
    pub label: Label,
    pub domain_id: u8,
}

/// `channel c = gray · palette[c]`.
pub fn colorize(gray: &[f64], palette: [f64; 3]) -> Tensor {
    debug_assert_eq!(gray.len(), IMAGE_PIXELS);
    let mut data = Vec::with_capacity(CHANNELS * gray.len());
    for c in palette {
        data.extend(gray.iter().map(|&g| g * c));
    }
    Tensor::new(vec![CHANNELS, IMAGE_SIDE, IMAGE_SIDE], data).expect("colorize shape")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_domains: Vec<DomainSpec>,
    pub test_domain: DomainSpec,
    /// Digits seen in training; their order defines class indices.
    pub id_classes: Vec<u8>,
    pub ood_classes: Vec<u8>,
    pub train_cap: usize,
    /// Held-out ID samples in training domains, used for model selection.
    #[serde(default)]
    pub val_cap: usize,
    pub test_cap: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.id_classes.is_empty() {
            return Err(Error::Config("id_classes is empty".into()));
        }
        if self.train_domains.is_empty() {
            return Err(Error::Config(
                "at least one training domain is required".into(),
            ));
        }
        for d in self
            .train_domains
            .iter()
            .chain(std::iter::once(&self.test_domain))
        {
            d.validate()?;
        }
        let mut seen = [false; 10];
        for &c in self.id_classes.iter().chain(&self.ood_classes) {
            if c > 9 {
                return Err(Error::Config(format!("class {c} outside 0..=9")));
            }
            if seen[c as usize] {
                return Err(Error::Config(format!(
                    "class {c} listed twice or in both id_classes and ood_classes"
                )));
            }
            seen[c as usize] = true;
        }
        if self.train_cap == 0 || self.test_cap == 0 {
            return Err(Error::Config(
                "train_cap and test_cap must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.id_classes.len()
    }

    pub fn class_of(&self, digit: u8) -> Option<Label> {
        if let Some(k) = self.id_classes.iter().position(|&c| c == digit) {
            Some(Label::Id(k))
        } else if self.ood_classes.contains(&digit) {
            Some(Label::Ood)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<ColoredSample>,
    pub val: Vec<ColoredSample>,
    pub test: Vec<ColoredSample>,
}

/// Builds train/val/test splits.
///
/// The test split is drawn first, uniformly from all ID and OOD samples, so
/// its OOD share tracks the raw class frequencies. Train and val take the
/// remaining ID samples. Train and val samples get a training domain drawn
/// per sample; every test sample gets the test domain.
pub fn make_split(raw: &RawDigitSet, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let root = RngStream::new(spec.seed);
    let order = root.child("order").permutation(raw.len());
    let mut domains = root.child("domains");

    let mut used = vec![false; raw.len()];
    let mut test = Vec::new();
    for &i in &order {
        if test.len() == spec.test_cap {
            break;
        }
        if let Some(label) = spec.class_of(raw.labels[i]) {
            used[i] = true;
            test.push(ColoredSample {
                image: colorize(raw.image(i), spec.test_domain.palette),
                label,
                domain_id: spec.test_domain.domain_id,
            });
        }
    }

    let mut train = Vec::new();
    let mut val = Vec::new();
    for &i in &order {
        if used[i] {
            continue;
        }
        let Some(label @ Label::Id(_)) = spec.class_of(raw.labels[i]) else {
            continue;
        };
        let target = if train.len() < spec.train_cap {
            &mut train
        } else if val.len() < spec.val_cap {
            &mut val
        } else {
            break;
        };
        let d = spec.train_domains[domains.below(spec.train_domains.len())];
        target.push(ColoredSample {
            image: colorize(raw.image(i), d.palette),
            label,
            domain_id: d.domain_id,
        });
    }

    if train.is_empty() {
        return Err(Error::Config("split produced no training samples".into()));
    }
    assert!(
        train.iter().chain(&val).all(|s| !s.label.is_ood()),
        "OOD sample leaked into training data"
    );
    Ok(Split { train, val, test })
}

/// One OOD class set together with a trial index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OodSelection {
    pub classes: Vec<u8>,
    pub trial: usize,
}

/// Default width of the contiguous digit blocks designated OOD.
pub const OOD_BLOCK: usize = 3;

/// Contiguous OOD blocks taken from the top digit downwards (`{7,8,9}`,
/// `{4,5,6}`, …) until their union covers `min_fraction` of the classes,
/// each repeated for `trials_per_selection` trials.
pub fn enumerate_ood_selections(
    num_classes: usize,
    min_fraction: f64,
    trials_per_selection: usize,
) -> Result<Vec<OodSelection>> {
    if !(0.0..=1.0).contains(&min_fraction) {
        return Err(Error::Config(format!(
            "min_fraction {min_fraction} outside [0, 1]"
        )));
    }
    let needed = (min_fraction * num_classes as f64).ceil() as usize;
    let mut sets: Vec<Vec<u8>> = Vec::new();
    let mut covered = 0;
    let mut top = num_classes;
    while covered < needed && top > 0 {
        let lo = top.saturating_sub(OOD_BLOCK);
        let block: Vec<u8> = (lo..top).map(|c| c as u8).collect();
        covered += block.len();
        sets.push(block);
        top = lo;
    }
    Ok(schedule(&sets, trials_per_selection))
}

/// Pairs each explicit OOD set with trial indices `0..trials_per_selection`.
pub fn schedule(sets: &[Vec<u8>], trials_per_selection: usize) -> Vec<OodSelection> {
    sets.iter()
        .flat_map(|s| {
            (0..trials_per_selection).map(move |trial| OodSelection {
                classes: s.clone(),
                trial,
            })
        })
        .collect()
}

/// Fraction of `0..num_classes` appearing in at least one selection.
pub fn coverage(selections: &[OodSelection], num_classes: usize) -> f64 {
    let mut seen = vec![false; num_classes];
    for s in selections {
        for &c in &s.classes {
            if (c as usize) < num_classes {
                seen[c as usize] = true;
            }
        }
    }
    seen.iter().filter(|&&b| b).count() as f64 / num_classes as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(n: usize) -> RawDigitSet {
        synthetic_digits(n, 77, &GlyphStyle::default()).unwrap()
    }

    fn rgb() -> Vec<DomainSpec> {
        vec![
            DomainSpec {
                domain_id: 0,
                palette: [1.0, 0.0, 0.0],
            },
            DomainSpec {
                domain_id: 1,
                palette: [0.0, 1.0, 0.0],
            },
            DomainSpec {
                domain_id: 2,
                palette: [0.0, 0.0, 1.0],
            },
        ]
    }

    fn spec(seed: u64) -> SplitSpec {
        SplitSpec {
            train_domains: rgb(),
            test_domain: DomainSpec {
                domain_id: 3,
                palette: [1.0, 0.0, 1.0],
            },
            id_classes: (0..7).collect(),
            ood_classes: vec![7, 8, 9],
            train_cap: 300,
            val_cap: 50,
            test_cap: 200,
            seed,
        }
    }

    #[test]
    fn colorize_red_pixel() {
        let mut g = vec![0.0; IMAGE_PIXELS];
        g[10] = 0.8;
        let c = colorize(&g, [1.0, 0.0, 0.0]);
        assert_eq!(c.data()[10], 0.8);
        assert_eq!(c.data()[IMAGE_PIXELS + 10], 0.0);
        assert_eq!(c.data()[2 * IMAGE_PIXELS + 10], 0.0);
    }

    #[test]
    fn colorize_black_stays_black() {
        let c = colorize(&[0.0; IMAGE_PIXELS], [0.3, 0.9, 0.1]);
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grayscale_recovered_from_any_palette() {
        let set = raw(5);
        for palette in [
            [1.0, 0.0, 0.0],
            [0.5, 0.5, 0.0],
            [0.2, 0.7, 0.35],
            [0.25, 0.0, 1.0],
        ] {
            let pmax = palette.iter().cloned().fold(0.0, f64::max);
            for i in 0..set.len() {
                let c = colorize(set.image(i), palette);
                for p in 0..IMAGE_PIXELS {
                    let m = (0..3)
                        .map(|ch| c.data()[ch * IMAGE_PIXELS + p])
                        .fold(0.0, f64::max);
                    assert!((m / pmax - set.image(i)[p]).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn split_excludes_ood_from_training() {
        let s = make_split(&raw(800), &spec(1)).unwrap();
        assert!(s
            .train
            .iter()
            .all(|x| matches!(x.label, Label::Id(k) if k < 7)));
        assert!(s.val.iter().all(|x| !x.label.is_ood()));
        assert!(s.test.iter().any(|x| x.label.is_ood()));
        assert!(s.test.iter().all(|x| x.domain_id == 3));
        assert!(s.train.iter().all(|x| x.domain_id < 3));
        assert_eq!(s.train.len(), 300);
        assert_eq!(s.test.len(), 200);
    }

    #[test]
    fn split_is_deterministic() {
        let r = raw(600);
        assert_eq!(
            make_split(&r, &spec(5)).unwrap(),
            make_split(&r, &spec(5)).unwrap()
        );
        assert_ne!(
            make_split(&r, &spec(5)).unwrap(),
            make_split(&r, &spec(6)).unwrap()
        );
    }

    #[test]
    fn test_ood_fraction_tracks_raw_frequency() {
        let r = raw(6000);
        let mut sp = spec(2);
        sp.test_cap = 3000;
        sp.train_cap = 1000;
        let s = make_split(&r, &sp).unwrap();
        let raw_frac = r.labels.iter().filter(|&&l| l >= 7).count() as f64 / r.len() as f64;
        let test_frac =
            s.test.iter().filter(|x| x.label.is_ood()).count() as f64 / s.test.len() as f64;
        // binomial sd at n=3000 is ~0.008
        assert!(
            (raw_frac - test_frac).abs() < 0.03,
            "{raw_frac} vs {test_frac}"
        );
    }

    #[test]
    fn empty_id_classes_is_config_error() {
        let mut sp = spec(0);
        sp.id_classes.clear();
        assert!(matches!(make_split(&raw(50), &sp), Err(Error::Config(_))));
    }

    #[test]
    fn overlapping_classes_rejected() {
        let mut sp = spec(0);
        sp.ood_classes.push(3);
        assert!(sp.validate().is_err());
    }

    #[test]
    fn black_palette_rejected() {
        let d = DomainSpec {
            domain_id: 0,
            palette: [0.0; 3],
        };
        assert!(d.validate().is_err());
    }

    #[test]
    fn selection_schedule_covers_half() {
        let sel = enumerate_ood_selections(10, 0.5, 3).unwrap();
        assert!(coverage(&sel, 10) >= 0.5);
        assert_eq!(sel[0].classes, vec![7, 8, 9]);
        assert_eq!(sel[3].classes, vec![4, 5, 6]);
        assert_eq!(sel.len(), 6);
        for set in [vec![7u8, 8, 9], vec![4, 5, 6]] {
            let trials: Vec<usize> = sel
                .iter()
                .filter(|s| s.classes == set)
                .map(|s| s.trial)
                .collect();
            assert_eq!(trials, vec![0, 1, 2]);
        }
    }

    #[test]
    fn selection_edge_cases() {
        assert!(enumerate_ood_selections(10, 0.0, 3).unwrap().is_empty());
        assert!(matches!(
            enumerate_ood_selections(10, 1.5, 3),
            Err(Error::Config(_))
        ));
        let all = enumerate_ood_selections(10, 1.0, 1).unwrap();
        assert_eq!(coverage(&all, 10), 1.0);
    }
}
