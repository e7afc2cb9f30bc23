use std::path::Path;

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How file-path images are turned into patch tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchGridSpec {
    pub height: u32,
    pub width: u32,
    pub patch: u32,
}

impl Default for PatchGridSpec {
    fn default() -> Self {
        // 3:1 aspect, like 384×128 person crops.
        Self {
            height: 48,
            width: 16,
            patch: 8,
        }
    }
}

impl PatchGridSpec {
    pub fn patches(&self) -> usize {
        ((self.height / self.patch) * (self.width / self.patch)) as usize
    }

    pub fn patch_dim(&self) -> usize {
        (self.patch * self.patch * 3) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} is not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        Ok(())
    }
}

/// Decodes an image, resizes it, optionally mirrors it horizontally, and
/// returns row-major patches (`patches × patch_dim`) with RGB values in
/// `[0, 1]`.
pub fn load_patch_grid(path: &Path, spec: &PatchGridSpec, flip: bool) -> Result<Vec<f64>> {
    spec.validate()?;
    let img = image::open(path).map_err(|e| Error::Input {
        id: path.display().to_string(),
        message: format!("cannot decode image: {e}"),
    })?;
    let mut rgb = img
        .resize_exact(spec.width, spec.height, FilterType::Triangle)
        .to_rgb8();
    if flip {
        image::imageops::flip_horizontal_in_place(&mut rgb);
    }
    let p = spec.patch;
    let mut out = Vec::with_capacity(spec.patches() * spec.patch_dim());
    for py in 0..spec.height / p {
        for px in 0..spec.width / p {
            for y in 0..p {
                for x in 0..p {
                    let pixel = rgb.get_pixel(px * p + x, py * p + y);
                    out.extend(pixel.0.iter().map(|&c| f64::from(c) / 255.0));
                }
            }
        }
    }
    Ok(out)
}
