//! Binary checkpoint of the noise predictor.
//!
//! `"FLME" | version u16 | dim u32 | classes u32 | hidden u32 | time_dim u32 |
//! steps u32 | ᾱ f64 × (steps + 1) | param_count u64 | params f64 × param_count`,
//! little-endian.

use std::fs;
use std::path::Path;

use super::wire::{to_u32, Reader, Writer};
use crate::diffusion::{EpsNet, EpsNetConfig};
use crate::error::{Error, Result};

pub const EPSNET_MAGIC: &[u8; 4] = b"FLME";
pub const EPSNET_VERSION: u16 = 1;

pub fn encode_epsnet(net: &EpsNet) -> Result<Vec<u8>> {
    let cfg = net.config();
    let mut w = Writer::default();
    w.bytes(EPSNET_MAGIC);
    w.u16(EPSNET_VERSION);
    w.u32(to_u32(net.dim(), "dim")?);
    w.u32(to_u32(net.num_classes(), "classes")?);
    w.u32(to_u32(cfg.hidden, "hidden")?);
    w.u32(to_u32(cfg.time_dim, "time dim")?);
    w.u32(to_u32(net.steps(), "steps")?);
    w.f64s(net.alpha_bars());
    w.u64(net.params().len() as u64);
    w.f64s(net.params());
    Ok(w.buf)
}

pub fn decode_epsnet(bytes: &[u8]) -> Result<EpsNet> {
    let mut r = Reader::new(bytes);
    r.magic(EPSNET_MAGIC)?;
    r.version(EPSNET_VERSION)?;
    let dim = r.usize32()?;
    let classes = r.usize32()?;
    let cfg = EpsNetConfig {
        hidden: r.usize32()?,
        time_dim: r.usize32()?,
    };
    let steps = r.usize32()?;
    let alpha_bar = r.f64s(steps + 1)?;
    let n = r.u64()? as usize;
    let params = r.f64s(n)?;
    r.finish()?;
    EpsNet::from_params(dim, classes, &cfg, alpha_bar, params).map_err(|e| match e {
        Error::Shape(m) => Error::LengthMismatch(m),
        e => e,
    })
}

pub fn save_epsnet(net: &EpsNet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_epsnet(net)?)?;
    Ok(())
}

pub fn load_epsnet(path: impl AsRef<Path>) -> Result<EpsNet> {
    decode_epsnet(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::NoiseSchedule;
    use crate::rng::seeded;

    #[test]
    fn round_trip() {
        let sched = NoiseSchedule::linear(12, 1e-3, 0.05, 0.0).unwrap();
        let net = EpsNet::new(
            6,
            3,
            &EpsNetConfig {
                hidden: 5,
                time_dim: 4,
            },
            &sched,
            &mut seeded(1),
        )
        .unwrap();
        let bytes = encode_epsnet(&net).unwrap();
        let back = decode_epsnet(&bytes).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.alpha_bars(), sched.alpha_bars());
        assert_eq!(encode_epsnet(&back).unwrap(), bytes);
        assert!(decode_epsnet(&bytes[..bytes.len() - 8]).is_err());
    }
}
