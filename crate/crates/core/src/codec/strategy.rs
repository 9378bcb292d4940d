//! How the decoder obtains each symbol's distribution.

use crate::error::{Error, Result};
use crate::models::{ColorModel, ColorSession, OccupancyModel, OccupancySession, PointMaps};
use crate::pcloud::{from_raster_index, VoxelCoord};

/// Sequential probability source for one feature stream of one block.
/// `probs` must be called for every position before `push`.
pub trait SymbolSource {
    fn probs(&mut self) -> Result<Vec<f64>>;
    fn push(&mut self, symbol: usize) -> Result<()>;
}

pub trait DecodeStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    fn occupancy<'a>(&self, model: &'a OccupancyModel) -> Result<Box<dyn SymbolSource + 'a>>;

    /// `features` holds final values in the columns before this channel.
    fn color<'a>(
        &self,
        model: &'a ColorModel,
        maps: &'a PointMaps,
        features: &[u16],
    ) -> Result<Box<dyn SymbolSource + 'a>>;
}

/// Cached activations, one new row per symbol.
pub struct Incremental;

/// A full network pass per symbol over everything decoded so far.
pub struct Reforward;

impl SymbolSource for OccupancySession<'_> {
    fn probs(&mut self) -> Result<Vec<f64>> {
        OccupancySession::probs(self)
    }

    fn push(&mut self, symbol: usize) -> Result<()> {
        OccupancySession::push(self, symbol == 1);
        Ok(())
    }
}

impl SymbolSource for ColorSession<'_> {
    fn probs(&mut self) -> Result<Vec<f64>> {
        ColorSession::probs(self)
    }

    fn push(&mut self, symbol: usize) -> Result<()> {
        ColorSession::push(self, symbol as u16);
        Ok(())
    }
}

impl DecodeStrategy for Incremental {
    fn name(&self) -> &'static str {
        "incremental"
    }

    fn occupancy<'a>(&self, model: &'a OccupancyModel) -> Result<Box<dyn SymbolSource + 'a>> {
        Ok(Box::new(model.session()?))
    }

    fn color<'a>(
        &self,
        model: &'a ColorModel,
        maps: &'a PointMaps,
        features: &[u16],
    ) -> Result<Box<dyn SymbolSource + 'a>> {
        Ok(Box::new(model.session(maps, features, 3)?))
    }
}

struct ReforwardOccupancy<'a> {
    model: &'a OccupancyModel,
    coords: Vec<VoxelCoord>,
    next: usize,
}

impl SymbolSource for ReforwardOccupancy<'_> {
    fn probs(&mut self) -> Result<Vec<f64>> {
        let i = self.next;
        let p = self.model.forward(&self.coords)?;
        p.get(2 * i..2 * i + 2)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::Range("occupancy stream already complete".into()))
    }

    fn push(&mut self, symbol: usize) -> Result<()> {
        if symbol == 1 {
            self.coords.push(from_raster_index(self.next as u64, self.model.cfg.d as u64));
        }
        self.next += 1;
        Ok(())
    }
}

struct ReforwardColor<'a> {
    model: &'a ColorModel,
    maps: &'a PointMaps,
    features: Vec<u16>,
    next: usize,
}

impl SymbolSource for ReforwardColor<'_> {
    fn probs(&mut self) -> Result<Vec<f64>> {
        let k = self.model.alphabet;
        let i = self.next;
        let p = self.model.forward_with(self.maps, &self.features, 3)?;
        p.get(k * i..k * (i + 1))
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::Range("color stream already complete".into()))
    }

    fn push(&mut self, symbol: usize) -> Result<()> {
        self.features[3 * self.next + self.model.channel()] = symbol as u16;
        self.next += 1;
        Ok(())
    }
}

impl DecodeStrategy for Reforward {
    fn name(&self) -> &'static str {
        "reforward"
    }

    fn occupancy<'a>(&self, model: &'a OccupancyModel) -> Result<Box<dyn SymbolSource + 'a>> {
        Ok(Box::new(ReforwardOccupancy {
            model,
            coords: Vec::new(),
            next: 0,
        }))
    }

    fn color<'a>(
        &self,
        model: &'a ColorModel,
        maps: &'a PointMaps,
        features: &[u16],
    ) -> Result<Box<dyn SymbolSource + 'a>> {
        let mut features = features.to_vec();
        let ch = model.channel();
        for r in features.chunks_mut(3) {
            r[ch..].iter_mut().for_each(|v| *v = 0);
        }
        Ok(Box::new(ReforwardColor {
            model,
            maps,
            features,
            next: 0,
        }))
    }
}

pub const DEFAULT_STRATEGY: &str = "incremental";

pub fn strategies() -> [&'static dyn DecodeStrategy; 2] {
    [&Incremental, &Reforward]
}

pub fn strategy_by_name(name: &str) -> Result<&'static dyn DecodeStrategy> {
    strategies()
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| Error::Config(format!("unknown decode strategy {name:?}")))
}
