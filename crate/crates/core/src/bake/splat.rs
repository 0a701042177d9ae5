use std::path::Path;

use serde::{Deserialize, Serialize};

use super::to_u8;
use crate::error::{Error, Result};

/// Viewing direction: the camera sits on this side of the object looking inward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplatAxis {
    #[serde(rename = "+x")]
    PosX,
    #[serde(rename = "-x")]
    NegX,
    #[serde(rename = "+y")]
    PosY,
    #[serde(rename = "-y")]
    NegY,
    #[serde(rename = "+z")]
    PosZ,
    #[serde(rename = "-z")]
    NegZ,
}

impl std::str::FromStr for SplatAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "+x" | "x" => SplatAxis::PosX,
            "-x" => SplatAxis::NegX,
            "+y" | "y" => SplatAxis::PosY,
            "-y" => SplatAxis::NegY,
            "+z" | "z" => SplatAxis::PosZ,
            "-z" => SplatAxis::NegZ,
            _ => return Err(Error::InvalidArgument(format!("unknown axis '{s}'"))),
        })
    }
}

impl SplatAxis {
    /// `(image right, image up, depth toward camera)` for a point.
    fn project(self, p: [f64; 3]) -> (f64, f64, f64) {
        let [x, y, z] = p;
        match self {
            SplatAxis::PosZ => (x, y, z),
            SplatAxis::NegZ => (-x, y, -z),
            SplatAxis::PosX => (-z, y, x),
            SplatAxis::NegX => (z, y, -x),
            SplatAxis::PosY => (x, -z, y),
            SplatAxis::NegY => (x, z, -y),
        }
    }
}

/// Square image with transparent background.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatImage {
    pub size: usize,
    pub pixels: Vec<Option<[f64; 3]>>,
}

impl SplatImage {
    pub fn get(&self, x: usize, y: usize) -> Option<[f64; 3]> {
        self.pixels[y * self.size + x]
    }

    pub fn opaque_count(&self) -> usize {
        self.pixels.iter().filter(|p| p.is_some()).count()
    }

    pub fn to_rgba8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|p| match p {
                Some(c) => [to_u8(c[0]), to_u8(c[1]), to_u8(c[2]), 255],
                None => [0, 0, 0, 0],
            })
            .collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let s = self.size as u32;
        image::save_buffer(path, &self.to_rgba8(), s, s, image::ColorType::Rgba8)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

/// Orthographic, z-buffered nearest-point splat of normalized points onto a `size²` image.
///
/// The unit cube `[-0.5, 0.5]³` maps onto the full image; row 0 is the top.
pub fn splat_render(points: &[[f64; 3]], colors: &[[f64; 3]], axis: SplatAxis, size: usize) -> Result<SplatImage> {
    if points.is_empty() || size == 0 {
        return Err(Error::InvalidArgument("splat needs points and a positive size".into()));
    }
    if points.len() != colors.len() {
        return Err(Error::Shape(format!("{} points but {} colors", points.len(), colors.len())));
    }
    let mut depth = vec![f64::NEG_INFINITY; size * size];
    let mut pixels = vec![None; size * size];
    let s = size as f64;
    for (p, c) in points.iter().zip(colors) {
        let (u, v, d) = axis.project(*p);
        let x = ((u + 0.5) * s).floor();
        let y = ((0.5 - v) * s).floor();
        if x < 0.0 || y < 0.0 || x >= s || y >= s {
            continue;
        }
        let i = y as usize * size + x as usize;
        if d > depth[i] {
            depth[i] = d;
            pixels[i] = Some(*c);
        }
    }
    Ok(SplatImage { size, pixels })
}
