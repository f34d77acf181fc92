//! Modality adaptation encoders: predict the other modality's features
//! from the raw input of the available one.

use rand_chacha::ChaCha8Rng;

use crate::backbone::{Encoder, EncoderCache, EncoderConfig, ModalInput, Modality, RadarEncoder, TcnEncoder};
use crate::error::{Error, Result};
use crate::nn::layers::Vol;
use crate::nn::{Mat, Module, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// IMU input, radar-side features out.
    I2R,
    /// Radar input, IMU-side features out.
    R2I,
}

impl Direction {
    pub fn source(self) -> Modality {
        match self {
            Direction::I2R => Modality::Imu,
            Direction::R2I => Modality::Radar,
        }
    }

    pub fn target(self) -> Modality {
        self.source().other()
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::I2R => "i2r",
            Direction::R2I => "r2i",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaeConfig {
    pub direction: Direction,
    /// Same architecture as the source modality's encoder.
    pub encoder: EncoderConfig,
}

impl MaeConfig {
    pub fn new(direction: Direction, encoder: EncoderConfig) -> Result<Self> {
        if encoder.modality() != direction.source() {
            return Err(Error::config(
                format!("mae.{}", direction.name()),
                format!("needs a {} encoder architecture", direction.source()),
            ));
        }
        Ok(MaeConfig { direction, encoder })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mae<T> {
    pub direction: Direction,
    pub encoder: Encoder<T>,
}

impl<T: Scalar> Mae<T> {
    /// Freshly initialised; never copied from the source encoder.
    pub fn new(cfg: &MaeConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Mae {
            direction: cfg.direction,
            encoder: Encoder::new(&cfg.encoder, rng)?,
        })
    }

    pub fn forward(&self, x: &ModalInput<T>) -> Result<(Mat<T>, EncoderCache<T>)> {
        self.encoder.forward(x)
    }

    pub fn backward(&self, cache: &EncoderCache<T>, dy: &Mat<T>, grad: Option<&mut Mae<T>>) {
        self.encoder.backward(cache, dy, grad.map(|g| &mut g.encoder));
    }
}

impl<T: Scalar> Module<T> for Mae<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.encoder.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.encoder.visit_mut(prefix, f);
    }
}

fn expect_direction<T>(mae: &Mae<T>, d: Direction) -> Result<()> {
    if mae.direction != d {
        return Err(Error::InvalidArgument(format!(
            "expected a {} adaptation encoder, got {}",
            d.name(),
            mae.direction.name()
        )));
    }
    Ok(())
}

/// Radar-side features reconstructed from IMU input.
pub fn mae_i2r_forward<T: Scalar>(x: &Mat<T>, params: &Mae<T>) -> Result<Mat<T>> {
    expect_direction(params, Direction::I2R)?;
    Ok(params.forward(&ModalInput::Imu(x.clone()))?.0)
}

/// IMU-side features reconstructed from radar input.
pub fn mae_r2i_forward<T: Scalar>(x: &Vol<T>, params: &Mae<T>) -> Result<Mat<T>> {
    expect_direction(params, Direction::R2I)?;
    match &params.encoder {
        Encoder::Radar(e) => Ok(e.forward(x)?.0),
        Encoder::Tcn(_) => Err(Error::InvalidArgument("r2i encoder must be a radar architecture".into())),
    }
}

impl<T: Scalar> From<TcnEncoder<T>> for Mae<T> {
    fn from(e: TcnEncoder<T>) -> Self {
        Mae { direction: Direction::I2R, encoder: Encoder::Tcn(e) }
    }
}

impl<T: Scalar> From<RadarEncoder<T>> for Mae<T> {
    fn from(e: RadarEncoder<T>) -> Self {
        Mae { direction: Direction::R2I, encoder: Encoder::Radar(e) }
    }
}
