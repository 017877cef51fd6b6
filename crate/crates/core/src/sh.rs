//! Real spherical harmonics up to degree 3 and the latitude-longitude light probe.

use std::f64::consts::PI;
use std::path::Path;

use avatar_tensor::geometry::{norm3, Vec3};

use crate::error::{Error, Result};
use crate::image::Image;

pub const SH_COEFFS: usize = 16;
pub const PROBE_ROWS: usize = 32;
pub const PROBE_COLS: usize = 64;
pub const PROBE_TEXELS: usize = PROBE_ROWS * PROBE_COLS;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2A: f64 = 1.092_548_430_592_079_2;
const C2B: f64 = 0.315_391_565_252_520_05;
const C2C: f64 = 0.546_274_215_296_039_6;
const C3A: f64 = 0.590_043_589_926_643_5;
const C3B: f64 = 2.890_611_442_640_554;
const C3C: f64 = 0.457_045_799_464_465_8;
const C3D: f64 = 0.373_176_332_590_115_4;
const C3E: f64 = 1.445_305_721_320_277;

/// Basis values for a unit vector, ordered by degree `l` then `m = -l..=l`.
///
/// The polynomials assume `|d| = 1`; callers normalize first.
pub fn sh_basis_unit(d: Vec3) -> [f64; SH_COEFFS] {
    let [x, y, z] = d;
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        C0,
        C1 * y,
        C1 * z,
        C1 * x,
        C2A * x * y,
        C2A * y * z,
        C2B * (3.0 * zz - 1.0),
        C2A * x * z,
        C2C * (xx - yy),
        C3A * y * (3.0 * xx - yy),
        C3B * x * y * z,
        C3C * y * (5.0 * zz - 1.0),
        C3D * z * (5.0 * zz - 3.0),
        C3C * x * (5.0 * zz - 1.0),
        C3E * z * (xx - yy),
        C3A * x * (xx - 3.0 * yy),
    ]
}

/// Partial derivatives of [`sh_basis_unit`] with respect to `(x, y, z)`,
/// treating the polynomials as functions on all of ℝ³.
pub fn sh_basis_jacobian(d: Vec3) -> [[f64; 3]; SH_COEFFS] {
    let [x, y, z] = d;
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        [0.0, 0.0, 0.0],
        [0.0, C1, 0.0],
        [0.0, 0.0, C1],
        [C1, 0.0, 0.0],
        [C2A * y, C2A * x, 0.0],
        [0.0, C2A * z, C2A * y],
        [0.0, 0.0, C2B * 6.0 * z],
        [C2A * z, 0.0, C2A * x],
        [C2C * 2.0 * x, -C2C * 2.0 * y, 0.0],
        [C3A * 6.0 * x * y, C3A * (3.0 * xx - 3.0 * yy), 0.0],
        [C3B * y * z, C3B * x * z, C3B * x * y],
        [0.0, C3C * (5.0 * zz - 1.0), C3C * 10.0 * y * z],
        [0.0, 0.0, C3D * (15.0 * zz - 3.0)],
        [C3C * (5.0 * zz - 1.0), 0.0, C3C * 10.0 * x * z],
        [C3E * 2.0 * x * z, -C3E * 2.0 * y * z, C3E * (xx - yy)],
        [C3A * (3.0 * xx - 3.0 * yy), -C3A * 6.0 * x * y, 0.0],
    ]
}

/// Basis values for any nonzero direction.
pub fn sh_basis(direction: Vec3) -> Result<[f64; SH_COEFFS]> {
    let n = norm3(direction);
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::invalid(format!("sh_basis needs a nonzero direction, got {direction:?}")));
    }
    Ok(sh_basis_unit(direction.map(|c| c / n)))
}

pub fn sh_reconstruct(coeffs: &[f64; SH_COEFFS], direction: Vec3) -> Result<f64> {
    let y = sh_basis(direction)?;
    Ok(coeffs.iter().zip(&y).map(|(c, b)| c * b).sum())
}

/// Polar angle bounds of probe row `i`; row 0 touches +z.
fn row_theta(i: usize) -> (f64, f64) {
    let h = PI / PROBE_ROWS as f64;
    (i as f64 * h, (i + 1) as f64 * h)
}

/// Unit direction through the center of texel `(i, j)`.
pub fn texel_direction(i: usize, j: usize) -> Vec3 {
    let theta = (i as f64 + 0.5) * PI / PROBE_ROWS as f64;
    let phi = -PI + (j as f64 + 0.5) * 2.0 * PI / PROBE_COLS as f64;
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    [st * cp, st * sp, ct]
}

/// Exact solid angle of a texel in row `i`: the longitude slice of a
/// latitude band, `Δφ (cos θ_top − cos θ_bottom)`.
pub fn texel_solid_angle(i: usize) -> f64 {
    let (t0, t1) = row_theta(i);
    2.0 * PI / PROBE_COLS as f64 * (t0.cos() - t1.cos())
}

/// Texel `(row, col)` hit by a direction under `θ = acos(z)`, `φ = atan2(y, x)`.
pub fn direction_texel(d: Vec3) -> (usize, usize) {
    let n = norm3(d);
    let z = if n > 0.0 { (d[2] / n).clamp(-1.0, 1.0) } else { 1.0 };
    let theta = z.acos();
    let phi = d[1].atan2(d[0]);
    let i = ((theta / PI * PROBE_ROWS as f64).floor() as usize).min(PROBE_ROWS - 1);
    let j = (((phi + PI) / (2.0 * PI) * PROBE_COLS as f64).floor() as usize).min(PROBE_COLS - 1);
    (i, j)
}

#[derive(Clone, Copy, Debug)]
pub struct ProbeDirection {
    pub direction: Vec3,
    pub solid_angle: f64,
}

/// Texel directions and solid angles in row-major texel order.
pub fn probe_directions() -> Vec<ProbeDirection> {
    let mut out = Vec::with_capacity(PROBE_TEXELS);
    for i in 0..PROBE_ROWS {
        let solid_angle = texel_solid_angle(i);
        for j in 0..PROBE_COLS {
            out.push(ProbeDirection { direction: texel_direction(i, j), solid_angle });
        }
    }
    out
}

/// Latitude-longitude radiance grid, 32 × 64 texels, RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvLightProbe {
    radiance: Vec<[f64; 3]>,
}

impl EnvLightProbe {
    pub fn new(radiance: Vec<[f64; 3]>) -> Result<Self> {
        if radiance.len() != PROBE_TEXELS {
            return Err(Error::invalid(format!(
                "probe needs {PROBE_TEXELS} texels, got {}",
                radiance.len()
            )));
        }
        if radiance.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("probe radiance must be finite and non-negative"));
        }
        Ok(Self { radiance })
    }

    pub fn constant(rgb: [f64; 3]) -> Self {
        Self::new(vec![rgb; PROBE_TEXELS]).expect("constant probe")
    }

    /// Builds a probe by evaluating `f` at every texel center.
    pub fn from_fn(mut f: impl FnMut(Vec3) -> [f64; 3]) -> Result<Self> {
        let mut radiance = Vec::with_capacity(PROBE_TEXELS);
        for i in 0..PROBE_ROWS {
            for j in 0..PROBE_COLS {
                radiance.push(f(texel_direction(i, j)));
            }
        }
        Self::new(radiance)
    }

    pub fn radiance(&self) -> &[[f64; 3]] {
        &self.radiance
    }

    pub fn texel(&self, i: usize, j: usize) -> [f64; 3] {
        self.radiance[i * PROBE_COLS + j]
    }

    pub fn set_texel(&mut self, i: usize, j: usize, rgb: [f64; 3]) {
        self.radiance[i * PROBE_COLS + j] = rgb;
    }

    /// Nearest-texel lookup.
    pub fn sample(&self, direction: Vec3) -> [f64; 3] {
        let (i, j) = direction_texel(direction);
        self.texel(i, j)
    }

    pub fn max_radiance(&self) -> f64 {
        self.radiance.iter().flatten().fold(0.0, |m, &v| m.max(v))
    }

    /// Radiance as an `H=32 × W=64` RGB image.
    pub fn to_image(&self) -> Image {
        let data = self.radiance.iter().flatten().copied().collect();
        Image::new(PROBE_COLS, PROBE_ROWS, 3, data).expect("probe image")
    }

    pub fn from_image(img: &Image) -> Result<Self> {
        if img.width() != PROBE_COLS || img.height() != PROBE_ROWS || img.channels() != 3 {
            return Err(Error::invalid(format!(
                "probe image must be {PROBE_COLS}x{PROBE_ROWS} RGB, got {}x{}x{}",
                img.width(),
                img.height(),
                img.channels()
            )));
        }
        Self::new(img.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    /// Writes the probe as PFM plus a `.txt` sidecar describing the mapping.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::image::write_pfm(path, &self.to_image())?;
        let sidecar = path.with_extension("txt");
        let text = format!(
            "mapping = latlong\nrows = {PROBE_ROWS}\ncols = {PROBE_COLS}\n\
             theta = acos(z), row 0 at +z\nphi = atan2(y, x), col 0 at -pi\n"
        );
        std::fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = crate::image::read_pfm(path)?;
        let sidecar = path.with_extension("txt");
        if let Ok(text) = std::fs::read_to_string(&sidecar) {
            if !text.lines().any(|l| l.trim() == "mapping = latlong") {
                return Err(Error::format(&sidecar, "unsupported probe mapping"));
            }
        }
        Self::from_image(&img).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dc_and_linear_terms() {
        let y = sh_basis([0.0, 0.0, 1.0]).unwrap();
        assert!((y[0] - 0.282_094_79).abs() < 1e-8);
        assert!((y[2] - 0.488_602_51).abs() < 1e-8);
    }

    #[test]
    fn jacobian_matches_differences() {
        let d = [0.3, -0.5, 0.7];
        let jac = sh_basis_jacobian(d);
        for axis in 0..3 {
            let mut p = d;
            let mut m = d;
            p[axis] += 1e-6;
            m[axis] -= 1e-6;
            let (yp, ym) = (sh_basis_unit(p), sh_basis_unit(m));
            for k in 0..SH_COEFFS {
                let num = (yp[k] - ym[k]) / 2e-6;
                assert!((num - jac[k][axis]).abs() < 1e-8, "{k} {axis}");
            }
        }
    }

    #[test]
    fn texel_round_trip() {
        for i in 0..PROBE_ROWS {
            for j in 0..PROBE_COLS {
                assert_eq!(direction_texel(texel_direction(i, j)), (i, j));
            }
        }
    }
}
