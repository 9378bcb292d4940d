//! Binary model files.
//!
//! One model: `"CNMF" | version | feature | colorspace | 0 | d, channels,
//! o_res_blocks, c_res_blocks, k_first, alphabet (u32 each) | param count
//! (u64) | params (f64) | digest(8)`, little-endian, parameters in layer
//! declaration order (weights then bias). A bundle is `"CNMB" | version |
//! colorspace | 4 × length (u64) | 4 model files | digest(8)`. Digests are
//! the first 8 bytes of SHA-256 over everything before them.

use sha2::{Digest, Sha256};

use super::{ColorModel, FeatureId, ModelBundle, ModelConfig, OccupancyModel};
use crate::colorspace;
use crate::error::{Error, Result};
use crate::sparsenn::Network;

pub const MODEL_MAGIC: &[u8; 4] = b"CNMF";
pub const BUNDLE_MAGIC: &[u8; 4] = b"CNMB";
const VERSION: u8 = 1;

pub(crate) fn digest(bytes: &[u8]) -> [u8; 8] {
    let h = Sha256::digest(bytes);
    h[..8].try_into().expect("8 bytes")
}

fn seal(mut bytes: Vec<u8>) -> Vec<u8> {
    let d = digest(&bytes);
    bytes.extend_from_slice(&d);
    bytes
}

fn unseal(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 8 {
        return Err(Error::parse(0, "model file shorter than its digest"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if digest(body) != tail {
        return Err(Error::parse(body.len() as u64, "model digest mismatch"));
    }
    Ok(body)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::parse(self.pos as u64, "model file truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn write_model(feature: FeatureId, cs: u8, cfg: &ModelConfig, alphabet: usize, net: &Network) -> Vec<u8> {
    let mut b = Vec::with_capacity(48 + net.num_params() * 8);
    b.extend_from_slice(MODEL_MAGIC);
    b.extend_from_slice(&[VERSION, feature.index() as u8, cs, 0]);
    for v in [cfg.d, cfg.channels, cfg.o_res_blocks, cfg.c_res_blocks, cfg.k_first, alphabet] {
        b.extend_from_slice(&(v as u32).to_le_bytes());
    }
    b.extend_from_slice(&(net.num_params() as u64).to_le_bytes());
    for p in net.params() {
        for v in &p.value {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    seal(b)
}

enum Model {
    Occupancy(OccupancyModel),
    Color(ColorModel),
}

fn read_model(bytes: &[u8]) -> Result<Model> {
    let body = unseal(bytes)?;
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(Error::parse(0, "not a model file"));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::parse(4, format!("unsupported model version {version}")));
    }
    let feature = FeatureId::new(r.u8()?).map_err(|e| Error::parse(5, e.to_string()))?;
    let cs = colorspace::by_id(r.u8()?).map_err(|e| Error::parse(6, e.to_string()))?;
    r.u8()?;
    let mut f = [0usize; 6];
    for v in &mut f {
        *v = r.u32()? as usize;
    }
    let cfg = ModelConfig {
        d: f[0],
        channels: f[1],
        o_res_blocks: f[2],
        c_res_blocks: f[3],
        k_first: f[4],
    };
    cfg.validate().map_err(|e| Error::parse(8, e.to_string()))?;
    let (mut model, net_alphabet) = match feature.channel() {
        None => (Model::Occupancy(OccupancyModel::new(cfg)?), 2),
        Some(_) => {
            let m = ColorModel::new(cfg, feature, cs)?;
            let k = m.alphabet;
            (Model::Color(m), k)
        }
    };
    if f[5] != net_alphabet {
        return Err(Error::parse(28, format!("alphabet {} does not match feature ({net_alphabet})", f[5])));
    }
    let net = match &mut model {
        Model::Occupancy(m) => &mut m.net,
        Model::Color(m) => &mut m.net,
    };
    let count = r.u64()?;
    if count != net.num_params() as u64 {
        return Err(Error::parse(32, format!("{count} parameters, architecture has {}", net.num_params())));
    }
    for p in net.params_mut() {
        for v in &mut p.value {
            *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::parse(r.pos as u64 - 8, "non-finite parameter"));
            }
        }
    }
    if r.pos != body.len() {
        return Err(Error::parse(r.pos as u64, "trailing bytes in model file"));
    }
    Ok(model)
}

pub fn write_bundle(b: &ModelBundle) -> Vec<u8> {
    let cs = b.colorspace.id();
    let cfg = b.config();
    let mut files = vec![write_model(FeatureId::OCCUPANCY, cs, &cfg, 2, &b.occupancy.net)];
    for m in &b.colors {
        files.push(write_model(m.feature, cs, &cfg, m.alphabet, &m.net));
    }
    let mut out = Vec::new();
    out.extend_from_slice(BUNDLE_MAGIC);
    out.extend_from_slice(&[VERSION, cs]);
    for f in &files {
        out.extend_from_slice(&(f.len() as u64).to_le_bytes());
    }
    for f in &files {
        out.extend_from_slice(f);
    }
    seal(out)
}

pub fn read_bundle(bytes: &[u8]) -> Result<ModelBundle> {
    let body = unseal(bytes)?;
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != BUNDLE_MAGIC {
        return Err(Error::parse(0, "not a model bundle"));
    }
    if r.u8()? != VERSION {
        return Err(Error::parse(4, "unsupported bundle version"));
    }
    let cs = colorspace::by_id(r.u8()?).map_err(|e| Error::parse(5, e.to_string()))?;
    let mut lens = [0u64; 4];
    for l in &mut lens {
        *l = r.u64()?;
    }
    let mut occupancy = None;
    let mut colors: [Option<ColorModel>; 3] = Default::default();
    for (slot, &len) in lens.iter().enumerate() {
        let start = r.pos;
        let chunk = r.take(usize::try_from(len).unwrap_or(usize::MAX))?;
        let model = read_model(chunk).map_err(|e| match e {
            Error::Parse { offset, message } => Error::parse(start as u64 + offset, message),
            other => other,
        })?;
        match (slot, model) {
            (0, Model::Occupancy(m)) => occupancy = Some(m),
            (s @ 1..=3, Model::Color(m)) if m.feature.index() == s && m.colorspace_id == cs.id() => {
                colors[s - 1] = Some(m)
            }
            _ => return Err(Error::parse(start as u64, format!("unexpected model in bundle slot {slot}"))),
        }
    }
    if r.pos != body.len() {
        return Err(Error::parse(r.pos as u64, "trailing bytes in bundle"));
    }
    let occupancy = occupancy.expect("slot 0 filled");
    let colors = colors.map(|m| m.expect("color slots filled"));
    if colors.iter().any(|m| m.cfg != occupancy.cfg) {
        return Err(Error::parse(0, "models in bundle disagree on configuration"));
    }
    Ok(ModelBundle {
        colorspace: cs,
        occupancy,
        colors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colorspace::{Rgb, YCoCg};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn perturbed(cs: &'static dyn crate::colorspace::ColorTransform) -> ModelBundle {
        let mut b = ModelBundle::new(ModelConfig::small(8), cs, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in b.colors[2].net.params_mut() {
            p.value.iter_mut().for_each(|v| *v += rng.gen_range(-1.0..1.0));
        }
        b
    }

    #[test]
    fn bundle_round_trip() {
        for cs in [&Rgb as &'static dyn crate::colorspace::ColorTransform, &YCoCg] {
            let b = perturbed(cs);
            let bytes = b.to_bytes();
            let back = ModelBundle::from_bytes(&bytes).unwrap();
            assert_eq!(back, b);
            assert_eq!(back.checksum(), b.checksum());
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn checksum_tracks_parameters() {
        let a = ModelBundle::new(ModelConfig::small(8), &Rgb, 1).unwrap();
        let mut b = a.clone();
        assert_eq!(a.checksum(), b.checksum());
        b.occupancy.net.layers[0].weight.value[0] += 1e-12;
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = perturbed(&Rgb).to_bytes();
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(ModelBundle::from_bytes(&flipped), Err(Error::Parse { .. })));
        assert!(ModelBundle::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(ModelBundle::from_bytes(b"CNMB").is_err());
    }

    #[test]
    fn file_layout() {
        let b = ModelBundle::new(ModelConfig::small(8), &YCoCg, 1).unwrap();
        let bytes = b.to_bytes();
        assert_eq!(&bytes[..4], BUNDLE_MAGIC);
        assert_eq!(bytes[5], 1);
        let first = 4 + 2 + 32;
        assert_eq!(&bytes[first..first + 4], MODEL_MAGIC);
        let occ_len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        assert_eq!(occ_len, 40 + 8 * b.occupancy.net.num_params() + 8);
    }
}
