use crate::datasets::{colorize, CHANNELS, IMAGE_PIXELS, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::generator::{clamp_unit, Generator, SemanticCode, VariationCode};
use crate::numerics::{RngStream, Tensor};

/// Exact inverse of multiplicative colorization.
///
/// `s` is the per-pixel channel maximum (the grayscale glyph when the palette
/// peaks at 1), `v` is the mean foreground color scaled so its largest
/// component is 1. Decoding re-applies `v` as a palette.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleGenerator;

fn check_image(x: &Tensor) -> Result<()> {
    if x.len() != CHANNELS * IMAGE_PIXELS {
        return Err(Error::shape(
            "oracle generator",
            x.shape(),
            &[CHANNELS, IMAGE_SIDE, IMAGE_SIDE],
        ));
    }
    Ok(())
}

impl OracleGenerator {
    /// Grayscale glyph given the palette that produced `x`.
    pub fn encode_semantic_with_palette(
        &self,
        x: &Tensor,
        palette: [f64; 3],
    ) -> Result<SemanticCode> {
        let peak = palette.iter().cloned().fold(0.0, f64::max);
        if peak <= 0.0 {
            return Err(Error::Degenerate(
                "palette has no positive component".into(),
            ));
        }
        let s = self.encode_semantic(x)?;
        Ok(SemanticCode(s.0.map(|v| v / peak)))
    }
}

/// `|z|` scaled to a unit maximum; `None` when `z` is all zeros.
pub(crate) fn palette_from_normal(z: [f64; 3]) -> Option<[f64; 3]> {
    let a = z.map(f64::abs);
    let m = a.iter().cloned().fold(0.0, f64::max);
    (m > 0.0).then(|| a.map(|c| c / m))
}

impl Generator for OracleGenerator {
    fn encode_semantic(&self, x: &Tensor) -> Result<SemanticCode> {
        check_image(x)?;
        let d = x.data();
        let s = (0..IMAGE_PIXELS)
            .map(|p| d[p].max(d[IMAGE_PIXELS + p]).max(d[2 * IMAGE_PIXELS + p]))
            .collect();
        Ok(SemanticCode(Tensor::new(vec![IMAGE_PIXELS], s)?))
    }

    fn encode_variation(&self, x: &Tensor) -> Result<VariationCode> {
        check_image(x)?;
        let d = x.data();
        let mut sum = [0.0; 3];
        let mut count = 0usize;
        for p in 0..IMAGE_PIXELS {
            let px = [d[p], d[IMAGE_PIXELS + p], d[2 * IMAGE_PIXELS + p]];
            if px.iter().any(|&c| c > 0.0) {
                count += 1;
                for c in 0..3 {
                    sum[c] += px[c];
                }
            }
        }
        if count == 0 {
            return Err(Error::Degenerate(
                "variation code of an all-black image".into(),
            ));
        }
        let mean = sum.map(|s| s / count as f64);
        let palette = palette_from_normal(mean).expect("foreground has positive mean");
        Ok(VariationCode(Tensor::vector(palette.to_vec())))
    }

    fn decode(&self, s: &SemanticCode, v: &VariationCode) -> Result<Tensor> {
        if s.0.len() != IMAGE_PIXELS || v.0.len() != CHANNELS {
            return Err(Error::shape("oracle decode", s.0.shape(), v.0.shape()));
        }
        let vd = v.0.data();
        Ok(clamp_unit(colorize(s.0.data(), [vd[0], vd[1], vd[2]])))
    }

    fn sample_variation(&self, rng: &mut RngStream) -> VariationCode {
        loop {
            let z = [rng.normal(), rng.normal(), rng.normal()];
            if let Some(p) = palette_from_normal(z) {
                return VariationCode(Tensor::vector(p.to_vec()));
            }
        }
    }
}
