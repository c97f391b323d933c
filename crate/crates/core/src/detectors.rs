//! Post-hoc OOD detectors. Every score is oriented so that higher means more OOD.

use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::{log_sum_exp, softmax};
use crate::objective::energy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Energy,
    Msp,
    /// Class-conditional Gaussian density over `g`'s features.
    #[serde(rename = "ddu")]
    GaussianDensity,
    /// Reserved slot; no solver is provided.
    Ocsvm,
}

impl DetectorKind {
    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Energy => "energy",
            DetectorKind::Msp => "msp",
            DetectorKind::GaussianDensity => "ddu",
            DetectorKind::Ocsvm => "ocsvm",
        }
    }

    pub fn needs_fit(self) -> bool {
        matches!(self, DetectorKind::GaussianDensity | DetectorKind::Ocsvm)
    }
}

impl std::fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "energy" => Ok(DetectorKind::Energy),
            "msp" => Ok(DetectorKind::Msp),
            "ddu" | "gaussian" | "gaussian_density" => Ok(DetectorKind::GaussianDensity),
            "ocsvm" => Ok(DetectorKind::Ocsvm),
            other => Err(Error::Config(format!("unknown detector '{other}'"))),
        }
    }
}

/// Energy score: `−T·logsumexp(z/T)`.
pub fn energy_score(logits: &[f64], temperature: f64) -> f64 {
    energy(logits, temperature)
}

/// `1 − max softmax`, in `[0, 1 − 1/K]`.
pub fn msp_score(logits: &[f64]) -> f64 {
    1.0 - softmax(logits).into_iter().fold(0.0, f64::max)
}

/// Class-conditional Gaussians with a shared covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianClassDensity {
    pub means: Vec<Vec<f64>>,
    /// Row-major `r × r`, ridge included.
    pub covariance: Vec<f64>,
    pub ridge: f64,
    pub priors: Vec<f64>,
    /// Lower-triangular Cholesky factor of `covariance`.
    pub cholesky: Vec<f64>,
    log_det: f64,
}

fn cholesky(a: &[f64], r: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; r * r];
    for i in 0..r {
        for j in 0..=i {
            let mut s = a[i * r + j];
            for k in 0..j {
                s -= l[i * r + k] * l[j * r + k];
            }
            if i == j {
                if s.is_nan() || s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * r + i] = s.sqrt();
            } else {
                l[i * r + j] = s / l[j * r + j];
            }
        }
    }
    Some(l)
}

impl GaussianClassDensity {
    /// Builds the model from explicit means, covariance (ridge already added), and priors.
    pub fn from_parts(
        means: Vec<Vec<f64>>,
        covariance: Vec<f64>,
        priors: Vec<f64>,
        ridge: f64,
    ) -> Result<Self> {
        let r = means.first().map(Vec::len).unwrap_or(0);
        if r == 0 || covariance.len() != r * r || priors.len() != means.len() {
            return Err(Error::shape(
                "gaussian density",
                &[means.len(), r],
                &[covariance.len(), priors.len()],
            ));
        }
        let chol = cholesky(&covariance, r).ok_or_else(|| {
            Error::Numeric(format!(
                "feature covariance is singular with ridge {ridge:e}; increase the ridge"
            ))
        })?;
        let log_det = 2.0 * (0..r).map(|i| chol[i * r + i].ln()).sum::<f64>();
        Ok(GaussianClassDensity {
            means,
            covariance,
            ridge,
            priors,
            cholesky: chol,
            log_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// `log N(x; μ_k, Σ)` for class `k`.
    pub fn class_log_density(&self, k: usize, x: &[f64]) -> f64 {
        let r = self.dim();
        let l = &self.cholesky;
        // forward substitution L y = x − μ
        let mut y = vec![0.0; r];
        for i in 0..r {
            let mut s = x[i] - self.means[k][i];
            for j in 0..i {
                s -= l[i * r + j] * y[j];
            }
            y[i] = s / l[i * r + i];
        }
        let maha: f64 = y.iter().map(|v| v * v).sum();
        -0.5 * (r as f64 * (2.0 * std::f64::consts::PI).ln() + self.log_det + maha)
    }

    /// `−log Σ_k π_k N(x; μ_k, Σ)`.
    pub fn score(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.means.len())
            .map(|k| self.priors[k].ln() + self.class_log_density(k, x))
            .collect();
        -log_sum_exp(&terms)
    }
}

/// Fits per-class means, the pooled within-class covariance plus `ridge·I`, and class frequencies.
pub fn fit_gaussian_density(
    features: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    ridge: f64,
) -> Result<GaussianClassDensity> {
    if features.len() != labels.len() {
        return Err(Error::Consistency(format!(
            "{} feature rows but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let r = features
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Contract("no features to fit".into()))?;
    let mut counts = vec![0usize; num_classes];
    let mut means = vec![vec![0.0; r]; num_classes];
    for (f, &y) in features.iter().zip(labels) {
        if y >= num_classes {
            return Err(Error::Index {
                index: y,
                len: num_classes,
            });
        }
        if f.len() != r {
            return Err(Error::shape("fit_gaussian_density", &[r], &[f.len()]));
        }
        counts[y] += 1;
        for (m, v) in means[y].iter_mut().zip(f) {
            *m += v;
        }
    }
    if let Some(k) = counts.iter().position(|&c| c < 2) {
        return Err(Error::Contract(format!(
            "class {k} has {} samples; at least 2 are required",
            counts[k]
        )));
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c as f64);
    }
    let n = features.len() as f64;
    let mut cov = vec![0.0; r * r];
    let mut centred = vec![0.0; r];
    for (f, &y) in features.iter().zip(labels) {
        for i in 0..r {
            centred[i] = f[i] - means[y][i];
        }
        for i in 0..r {
            let ci = centred[i];
            if ci == 0.0 {
                continue;
            }
            for j in 0..=i {
                cov[i * r + j] += ci * centred[j];
            }
        }
    }
    for i in 0..r {
        for j in 0..=i {
            let v = cov[i * r + j] / n;
            cov[i * r + j] = v;
            cov[j * r + i] = v;
        }
        cov[i * r + i] += ridge;
    }
    let priors = counts.iter().map(|&c| c as f64 / n).collect();
    GaussianClassDensity::from_parts(means, cov, priors, ridge)
}

/// A ready-to-score detector.
#[derive(Clone, Debug, PartialEq)]
pub enum Detector {
    Energy { temperature: f64 },
    Msp,
    GaussianDensity(GaussianClassDensity),
}

/// Training-set features used to fit density detectors.
pub struct FitData<'a> {
    pub features: &'a [Vec<f64>],
    pub labels: &'a [usize],
    pub num_classes: usize,
    pub ridge: f64,
}

impl Detector {
    pub fn build(
        kind: DetectorKind,
        temperature: f64,
        fit: Option<&FitData<'_>>,
    ) -> Result<Detector> {
        match kind {
            DetectorKind::Energy => Ok(Detector::Energy { temperature }),
            DetectorKind::Msp => Ok(Detector::Msp),
            DetectorKind::GaussianDensity => {
                let fit = fit.ok_or_else(|| {
                    Error::Contract("the ddu detector needs training features to fit".into())
                })?;
                Ok(Detector::GaussianDensity(fit_gaussian_density(
                    fit.features,
                    fit.labels,
                    fit.num_classes,
                    fit.ridge,
                )?))
            }
            DetectorKind::Ocsvm => Err(Error::Unsupported(
                "the ocsvm detector has no solver".into(),
            )),
        }
    }

    pub fn kind(&self) -> DetectorKind {
        match self {
            Detector::Energy { .. } => DetectorKind::Energy,
            Detector::Msp => DetectorKind::Msp,
            Detector::GaussianDensity(_) => DetectorKind::GaussianDensity,
        }
    }

    /// Fitted state; logit-only detectors have none.
    pub fn fitted(&self) -> Result<&GaussianClassDensity> {
        match self {
            Detector::GaussianDensity(g) => Ok(g),
            other => Err(Error::Contract(format!(
                "the {} detector has no fitted state",
                other.kind()
            ))),
        }
    }

    pub fn score(&self, features: &[f64], logits: &[f64]) -> f64 {
        match self {
            Detector::Energy { temperature } => energy_score(logits, *temperature),
            Detector::Msp => msp_score(logits),
            Detector::GaussianDensity(g) => g.score(features),
        }
    }
}

/// Per-sample features and logits, decoupled from the network that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDump {
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Class index, or `-1` for OOD.
    pub labels: Vec<i32>,
    pub features: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
}

impl FeatureDump {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[n u32][r u32][K u32]`, then per sample `[label i32][r × f64][K × f64]`, all LE.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("writing feature dump", e);
        for v in [
            self.len() as u32,
            self.feature_dim as u32,
            self.num_classes as u32,
        ] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for i in 0..self.len() {
            if self.features[i].len() != self.feature_dim
                || self.logits[i].len() != self.num_classes
            {
                return Err(Error::shape(
                    "feature dump",
                    &[self.feature_dim, self.num_classes],
                    &[self.features[i].len(), self.logits[i].len()],
                ));
            }
            w.write_all(&self.labels[i].to_le_bytes()).map_err(io)?;
            for v in self.features[i].iter().chain(&self.logits[i]) {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::io("reading feature dump", e))?;
        if bytes.len() < 12 {
            return Err(Error::Length {
                what: "feature dump header".into(),
                expected: 12,
                actual: bytes.len(),
            });
        }
        let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (n, rdim, k) = (u(0), u(4), u(8));
        let record = 4 + 8 * (rdim + k);
        let expected = 12 + n * record;
        if bytes.len() != expected {
            return Err(Error::Length {
                what: "feature dump".into(),
                expected,
                actual: bytes.len(),
            });
        }
        let mut dump = FeatureDump {
            feature_dim: rdim,
            num_classes: k,
            labels: Vec::with_capacity(n),
            features: Vec::with_capacity(n),
            logits: Vec::with_capacity(n),
        };
        for rec in bytes[12..].chunks_exact(record) {
            dump.labels
                .push(i32::from_le_bytes(rec[..4].try_into().unwrap()));
            let vals: Vec<f64> = rec[4..]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            dump.features.push(vals[..rdim].to_vec());
            dump.logits.push(vals[rdim..].to_vec());
        }
        Ok(dump)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use std::f64::consts::PI;

    #[test]
    fn energy_score_cases() {
        assert!((energy_score(&[0.0, 0.0], 1.0) + 2f64.ln()).abs() < 1e-12);
        // a sample trained to energy −7 scores below γ = −5
        assert!(energy_score(&[7.0 - 1e-9], 1.0) < -5.0);
        // K = 1: energy is −z, so ranking by energy equals ranking by −max-logit
        let mut rng = RngStream::new(0);
        let zs: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
        let mut by_energy: Vec<usize> = (0..20).collect();
        by_energy
            .sort_by(|&a, &b| energy_score(&[zs[a]], 1.0).total_cmp(&energy_score(&[zs[b]], 1.0)));
        let mut by_logit: Vec<usize> = (0..20).collect();
        by_logit.sort_by(|&a, &b| (-zs[a]).total_cmp(&-zs[b]));
        assert_eq!(by_energy, by_logit);
    }

    #[test]
    fn msp_cases() {
        assert!((msp_score(&[0.0, 0.0]) - 0.5).abs() < 1e-15);
        assert!(msp_score(&[100.0, 0.0]) < 1e-40);
        let mut rng = RngStream::new(1);
        for _ in 0..100 {
            let z: Vec<f64> = (0..4).map(|_| 2.0 * rng.normal()).collect();
            let c = 30.0 * rng.normal();
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            assert!((msp_score(&z) - msp_score(&shifted)).abs() <= 1e-12);
            assert!(msp_score(&z) <= 0.75 + 1e-15);
        }
    }

    #[test]
    fn gaussian_single_class_mean() {
        let g = fit_gaussian_density(&[vec![0.0, 0.0], vec![2.0, 2.0]], &[0, 0], 1, 1e-3).unwrap();
        assert_eq!(g.means[0], vec![1.0, 1.0]);
        assert!((g.priors.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn identical_features_give_ridge_covariance() {
        let feats = vec![vec![0.5, -1.0, 2.0]; 4];
        let g = fit_gaussian_density(&feats, &[0, 0, 0, 0], 1, 1e-3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1e-3 } else { 0.0 };
                assert_eq!(g.covariance[i * 3 + j], expect);
            }
        }
    }

    #[test]
    fn two_blob_means_match_direct_average() {
        let mut rng = RngStream::new(3);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let k = i % 2;
            let c = if k == 0 { -3.0 } else { 4.0 };
            feats.push(vec![c + rng.normal(), 2.0 * c + rng.normal(), rng.normal()]);
            labels.push(k);
        }
        let g = fit_gaussian_density(&feats, &labels, 2, 1e-3).unwrap();
        for k in 0..2 {
            for d in 0..3 {
                let (s, n) = feats
                    .iter()
                    .zip(&labels)
                    .filter(|(_, &y)| y == k)
                    .fold((0.0, 0), |(s, n), (f, _)| (s + f[d], n + 1));
                assert!((g.means[k][d] - s / n as f64).abs() <= 1e-9);
            }
        }
        // covariance symmetric
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(g.covariance[i * 3 + j], g.covariance[j * 3 + i]);
            }
        }
    }

    #[test]
    fn standard_normal_at_mode() {
        let g = GaussianClassDensity::from_parts(
            vec![vec![0.0, 0.0]],
            vec![1.0, 0.0, 0.0, 1.0],
            vec![1.0],
            0.0,
        )
        .unwrap();
        assert!((g.score(&[0.0, 0.0]) - (2.0 * PI).ln()).abs() <= 1e-9);
    }

    #[test]
    fn isotropic_score_is_half_squared_distance_plus_constant() {
        let g = GaussianClassDensity::from_parts(
            vec![vec![1.0, -2.0, 0.5]],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            vec![1.0],
            0.0,
        )
        .unwrap();
        let mut rng = RngStream::new(4);
        let c = 1.5 * (2.0 * PI).ln();
        let mut last = f64::NEG_INFINITY;
        for step in 0..20 {
            // monotone along a ray from the mean
            let t = step as f64 * 0.3;
            let x = [1.0 + 0.6 * t, -2.0 - 0.8 * t, 0.5];
            let s = g.score(&x);
            assert!(s > last);
            last = s;
            let y: Vec<f64> = (0..3).map(|_| 3.0 * rng.normal()).collect();
            let d2 = (y[0] - 1.0).powi(2) + (y[1] + 2.0).powi(2) + (y[2] - 0.5).powi(2);
            assert!((g.score(&y) - (0.5 * d2 + c)).abs() <= 1e-9);
        }
    }

    #[test]
    fn mixture_matches_direct_summation() {
        // three components, full shared covariance
        let cov = vec![2.0, 0.3, -0.2, 0.3, 1.0, 0.1, -0.2, 0.1, 0.5];
        let means = vec![
            vec![0.0, 0.0, 0.0],
            vec![1.0, 2.0, -1.0],
            vec![-2.0, 0.5, 1.0],
        ];
        let priors = vec![0.5, 0.3, 0.2];
        let g = GaussianClassDensity::from_parts(means.clone(), cov.clone(), priors.clone(), 0.0)
            .unwrap();

        // oracle: explicit inverse via cofactors and determinant
        let a = &cov;
        let det = a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
            + a[2] * (a[3] * a[7] - a[4] * a[6]);
        let inv = [
            (a[4] * a[8] - a[5] * a[7]) / det,
            (a[2] * a[7] - a[1] * a[8]) / det,
            (a[1] * a[5] - a[2] * a[4]) / det,
            (a[5] * a[6] - a[3] * a[8]) / det,
            (a[0] * a[8] - a[2] * a[6]) / det,
            (a[2] * a[3] - a[0] * a[5]) / det,
            (a[3] * a[7] - a[4] * a[6]) / det,
            (a[1] * a[6] - a[0] * a[7]) / det,
            (a[0] * a[4] - a[1] * a[3]) / det,
        ];
        let mut rng = RngStream::new(5);
        for _ in 0..50 {
            let x: Vec<f64> = (0..3).map(|_| 2.0 * rng.normal()).collect();
            let mut total = 0.0;
            for k in 0..3 {
                let d: Vec<f64> = (0..3).map(|i| x[i] - means[k][i]).collect();
                let mut q = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        q += d[i] * inv[i * 3 + j] * d[j];
                    }
                }
                total += priors[k] * (-0.5 * q).exp() / ((2.0 * PI).powi(3) * det).sqrt();
            }
            assert!((g.score(&x) + total.ln()).abs() <= 1e-9);
        }
    }

    #[test]
    fn singular_covariance_advises_larger_ridge() {
        let feats = vec![
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![2.0, 0.0],
            vec![2.0, 0.0],
        ];
        let err = fit_gaussian_density(&feats, &[0, 0, 1, 1], 2, 0.0).unwrap_err();
        assert!(err.to_string().contains("ridge"), "{err}");
    }

    #[test]
    fn under_populated_class_rejected() {
        let feats = vec![vec![1.0], vec![2.0], vec![3.0]];
        assert!(fit_gaussian_density(&feats, &[0, 0, 1], 2, 1e-3).is_err());
    }

    #[test]
    fn logit_detectors_have_no_fitted_state() {
        assert!(Detector::build(DetectorKind::Energy, 1.0, None)
            .unwrap()
            .fitted()
            .is_err());
        assert!(Detector::build(DetectorKind::Msp, 1.0, None)
            .unwrap()
            .fitted()
            .is_err());
        assert!(matches!(
            Detector::build(DetectorKind::GaussianDensity, 1.0, None),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            Detector::build(DetectorKind::Ocsvm, 1.0, None),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn kinds_parse_from_cli_names() {
        let kinds: Vec<DetectorKind> = "energy,msp,ddu"
            .split(',')
            .map(|s| s.parse().unwrap())
            .collect();
        assert_eq!(
            kinds,
            vec![
                DetectorKind::Energy,
                DetectorKind::Msp,
                DetectorKind::GaussianDensity
            ]
        );
        assert!("mahalanobis".parse::<DetectorKind>().is_err());
    }

    #[test]
    fn feature_dump_layout_and_round_trip() {
        let dump = FeatureDump {
            feature_dim: 2,
            num_classes: 3,
            labels: vec![1, -1],
            features: vec![vec![0.5, -1.0], vec![2.0, 3.0]],
            logits: vec![vec![1.0, 2.0, 3.0], vec![0.0, 0.0, -1.0]],
        };
        let mut buf = Vec::new();
        dump.write(&mut buf).unwrap();
        assert_eq!(buf.len(), 12 + 2 * (4 + 8 * 5));
        assert_eq!(&buf[..4], &2u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1i32.to_le_bytes());
        assert_eq!(&buf[16..24], &0.5f64.to_le_bytes());
        assert_eq!(FeatureDump::read(&buf[..]).unwrap(), dump);
        assert!(FeatureDump::read(&buf[..buf.len() - 1]).is_err());
    }
}
