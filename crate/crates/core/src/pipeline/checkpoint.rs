//! Versioned little-endian model checkpoints.
//!
//! ```text
//! "LSTC" | u32 version=1 | u32 stage | u32 d | u32 c | u32 K | u32 M | u32 d_k
//! u8 attn_scale | f64 threshold | u32 radius_s | u8 include_center
//! u32 block_count
//! per block: u32 rows | u32 cols | rows*cols f64, row-major
//! ```
//!
//! Blocks follow parameter declaration order: the short-term branch, then
//! the long-term branch.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{ModelState, Stage};
use crate::binio::{to_u32, Reader, Writer};
use crate::error::{Error, Result};
use crate::feature_bank::WindowSpec;
use crate::long_term::{LongTermConfig, LongTermParams};
use crate::short_term::ShortTermParams;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LSTC";
pub const CHECKPOINT_VERSION: u32 = 1;

impl ModelState {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = self.long.config();
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(self.stage.number());
        w.u32(to_u32(self.d(), "d")?);
        w.u32(to_u32(self.classes(), "classes")?);
        w.u32(to_u32(cfg.k, "K")?);
        w.u32(to_u32(cfg.m, "M")?);
        w.u32(to_u32(cfg.d_k, "d_k")?);
        w.u8(self.short.attn_scale as u8);
        w.f64(self.threshold);
        w.u32(to_u32(self.window.radius_s as usize, "radius_s")?);
        w.u8(self.window.include_center as u8);
        let params = self.named_params();
        w.u32(to_u32(params.len(), "block count")?);
        for (name, p) in params {
            w.u32(to_u32(p.value.rows(), &name)?);
            w.u32(to_u32(p.value.cols(), &name)?);
            w.matrix_data(&p.value);
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(at, format!("unsupported checkpoint version {version}")));
        }
        let at = r.offset();
        let stage = Stage::from_number(r.u32("stage")?).map_err(|e| Error::format(at, e.to_string()))?;
        let mut dims = [0usize; 5];
        for (slot, what) in dims.iter_mut().zip(["d", "classes", "K", "M", "d_k"]) {
            let at = r.offset();
            *slot = r.u32(what)? as usize;
            if *slot == 0 {
                return Err(Error::format(at, format!("{what} must be >= 1")));
            }
        }
        let [d, c, k, m, d_k] = dims;
        let attn_scale = flag(&mut r, "attn_scale")?;
        let at = r.offset();
        let threshold = r.f64("threshold")?;
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::format(at, format!("threshold {threshold} outside (0, 1)")));
        }
        let radius_s = r.u32("radius_s")? as u64;
        let include_center = flag(&mut r, "include_center")?;
        // refuse headers whose parameters could not fit in the file before allocating
        let room = (bytes.len() / 8) as u128;
        let (d_, c_, k_, m_, dk_) = (d as u128, c as u128, k as u128, m as u128, d_k as u128);
        if d_ * d_ > room || d_ * c_ > room || k_ * m_ * d_ * dk_ > room {
            return Err(Error::format(12, format!("dims d={d} c={c} K={k} M={m} d_k={d_k} exceed file size")));
        }

        let mut model = ModelState {
            stage,
            short: ShortTermParams::zeros(d, c, attn_scale),
            long: LongTermParams::new(d, c, LongTermConfig { k, m, d_k }, &mut ChaCha8Rng::seed_from_u64(0))?,
            threshold,
            window: WindowSpec { radius_s, include_center },
        };
        let at = r.offset();
        let count = r.u32("block count")? as usize;
        let expected = model.named_params().len();
        if count != expected {
            return Err(Error::format(at, format!("{count} parameter blocks, expected {expected}")));
        }
        for (name, p) in model.named_params_mut() {
            let at = r.offset();
            let rows = r.u32(&name)? as usize;
            let cols = r.u32(&name)? as usize;
            if (rows, cols) != p.value.shape() {
                return Err(Error::format(
                    at,
                    format!("block {name} is {rows}x{cols}, expected {:?}", p.value.shape()),
                ));
            }
            p.value = r.matrix(rows, cols, &name)?;
        }
        r.finish()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ModelState::from_bytes(&std::fs::read(path)?)
    }
}

fn flag(r: &mut Reader<'_>, what: &str) -> Result<bool> {
    let at = r.offset();
    match r.u8(what)? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(Error::format(at, format!("{what} flag must be 0 or 1, got {v}"))),
    }
}
