//! Raw sample dumps.
//!
//! Layout: `"OSDGDATA"`, version `u32` LE, count `u32` LE, then per sample
//! `[label u8][domain u8][3×28×28 f32 LE]`. OOD samples carry label 255.

use std::io::{Read, Write};

use crate::datasets::{ColoredSample, Label, CHANNELS, COLOR_PIXELS, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DUMP_MAGIC: &[u8; 8] = b"OSDGDATA";
pub const DUMP_VERSION: u32 = 1;
pub const OOD_MARKER: u8 = 255;

pub fn write_dump<W: Write>(mut w: W, samples: &[ColoredSample]) -> Result<()> {
    let io = |e| Error::io("writing dataset dump", e);
    w.write_all(DUMP_MAGIC).map_err(io)?;
    w.write_all(&DUMP_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(samples.len() as u32).to_le_bytes())
        .map_err(io)?;
    let mut buf = Vec::with_capacity(2 + 4 * COLOR_PIXELS);
    for s in samples {
        let label = match s.label {
            Label::Id(k) if k < OOD_MARKER as usize => k as u8,
            Label::Id(k) => {
                return Err(Error::Format(format!(
                    "class index {k} does not fit a u8 label"
                )))
            }
            Label::Ood => OOD_MARKER,
        };
        if s.image.len() != COLOR_PIXELS {
            return Err(Error::shape(
                "dump",
                s.image.shape(),
                &[CHANNELS, IMAGE_SIDE, IMAGE_SIDE],
            ));
        }
        buf.clear();
        buf.push(label);
        buf.push(s.domain_id);
        for &v in s.image.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_dump<R: Read>(mut r: R) -> Result<Vec<ColoredSample>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io("reading dataset dump", e))?;
    if bytes.len() < 16 || &bytes[..8] != DUMP_MAGIC {
        return Err(Error::Format("not an OSDGDATA dump".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != DUMP_VERSION {
        return Err(Error::Format(format!("unsupported dump version {version}")));
    }
    let n = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let record = 2 + 4 * COLOR_PIXELS;
    let expected = 16 + n * record;
    if bytes.len() != expected {
        return Err(Error::Length {
            what: "dataset dump".into(),
            expected,
            actual: bytes.len(),
        });
    }
    let mut out = Vec::with_capacity(n);
    for rec in bytes[16..].chunks_exact(record) {
        let label = if rec[0] == OOD_MARKER {
            Label::Ood
        } else {
            Label::Id(rec[0] as usize)
        };
        let data = rec[2..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push(ColoredSample {
            image: Tensor::new(vec![CHANNELS, IMAGE_SIDE, IMAGE_SIDE], data)?,
            label,
            domain_id: rec[1],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{colorize, IMAGE_PIXELS};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn dump_round_trips_f32_values(
            gray in proptest::collection::vec(0.0f32..=1.0, IMAGE_PIXELS),
            label in prop_oneof![Just(None), (0usize..10).prop_map(Some)],
            domain in 0u8..8,
        ) {
            let gray: Vec<f64> = gray.into_iter().map(f64::from).collect();
            let s = ColoredSample {
                image: colorize(&gray, [1.0, 0.5, 0.25]),
                label: label.map(Label::Id).unwrap_or(Label::Ood),
                domain_id: domain,
            };
            let mut buf = Vec::new();
            write_dump(&mut buf, std::slice::from_ref(&s)).unwrap();
            prop_assert_eq!(buf.len(), 16 + 2 + 4 * COLOR_PIXELS);
            let back = read_dump(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(back[0].label, s.label);
            prop_assert_eq!(back[0].domain_id, domain);
            for (a, b) in back[0].image.data().iter().zip(s.image.data()) {
                prop_assert_eq!(*a, (*b as f32) as f64);
            }
        }
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_dump(&mut buf, &[]).unwrap();
        assert_eq!(&buf[..8], b"OSDGDATA");
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &0u32.to_le_bytes());
    }

    #[test]
    fn truncated_dump_rejected() {
        let s = ColoredSample {
            image: colorize(&[0.5; IMAGE_PIXELS], [1.0, 0.0, 0.0]),
            label: Label::Id(2),
            domain_id: 0,
        };
        let mut buf = Vec::new();
        write_dump(&mut buf, &[s]).unwrap();
        buf.pop();
        assert!(matches!(read_dump(&buf[..]), Err(Error::Length { .. })));
    }
}
