//! Differentiable perspective splatting.
//!
//! Gaussians are projected with the EWA approximation, sorted by camera
//! depth (ties broken by storage index) and alpha-composited front to back
//! per pixel. There is no tile binning; every pixel walks the depth-sorted
//! list of splats whose 3σ box covers it.

mod raster;

use serde::{Deserialize, Serialize};

use crate::diffeng::{Graph, Var};
use crate::gaussians::{activate_vars, ActivatedVars, Camera, GaussianCloud, Mat3};
use crate::image::Image;
use crate::{Error, Result};

pub use raster::threshold_pixels;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub background: [f64; 3],
    /// Points with camera-space z at or below this are culled.
    pub near: f64,
    /// Added to the diagonal of every projected covariance (px²).
    pub dilation: f64,
    /// Splat support radius in standard deviations.
    pub truncation_sigma: f64,
    pub alpha_max: f64,
    pub alpha_min: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            near: 0.01,
            dilation: 0.3,
            truncation_sigma: 3.0,
            alpha_max: 0.99,
            alpha_min: 1.0 / 255.0,
        }
    }
}

impl RenderSettings {
    pub fn with_background(background: [f64; 3]) -> Self {
        Self {
            background,
            ..Self::default()
        }
    }
}

/// Projected splat geometry in pixel space.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    pub mean2d: [f64; 2],
    pub cov2d: [[f64; 2]; 2],
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub rgb: Image,
    /// Accumulated opacity, `H × W`.
    pub alpha: Vec<f64>,
    /// Opacity-normalized expected depth, `H × W`; zero where nothing was hit.
    pub depth: Vec<f64>,
}

/// Perspective projection of a 3D Gaussian. Returns `None` when the center
/// is at or behind the near plane.
pub fn project(position: [f64; 3], cov3d: &Mat3, cam: &Camera, settings: &RenderSettings) -> Option<Splat2D> {
    let geo = raster::project_geometry(position, cov3d, cam, settings)?;
    Some(Splat2D {
        mean2d: geo.mean2d,
        cov2d: geo.cov2d,
        depth: geo.cam_point[2],
        color: [0.0; 3],
        opacity: 0.0,
    })
}

/// Front-to-back compositing of depth-sorted splats at one pixel coordinate.
pub fn composite_pixel(
    splats: &[Splat2D],
    pixel: [f64; 2],
    background: [f64; 3],
    settings: &RenderSettings,
) -> Result<[f64; 3]> {
    let mut prepared = Vec::with_capacity(splats.len());
    for s in splats {
        let conic = raster::invert_cov2d(&s.cov2d)?;
        prepared.push(raster::PixelSplat {
            mean2d: s.mean2d,
            conic,
            opacity: s.opacity,
            color: s.color.map(|c| c.clamp(0.0, 1.0)),
            depth: s.depth,
        });
    }
    let settings = RenderSettings {
        background,
        ..settings.clone()
    };
    Ok(raster::composite(prepared.iter(), pixel, &settings).rgb)
}

/// Renders a cloud; the result is bit-identical to the value recorded by
/// [`render_vars`] for the same inputs.
pub fn render(cloud: &GaussianCloud, cam: &Camera, settings: &RenderSettings) -> Result<RenderedImage> {
    let mut graph = Graph::new();
    let vars = cloud.to_vars(&mut graph, false);
    let activated = activate_vars(&mut graph, &vars)?;
    let (_, image) = render_vars(&mut graph, &activated, cam, settings)?;
    Ok(image)
}

/// Records the rasterizer on `graph`. The returned var is the `H × W × 3`
/// RGB image.
pub fn render_vars(
    graph: &mut Graph,
    cloud: &ActivatedVars,
    cam: &Camera,
    settings: &RenderSettings,
) -> Result<(Var, RenderedImage)> {
    cam.validate()?;
    let inputs = [
        cloud.positions,
        cloud.scales,
        cloud.rotations,
        cloud.opacities,
        cloud.sh_coeffs,
    ];
    let values: Vec<_> = inputs.iter().map(|v| graph.value(*v)).collect();
    let (op, rendered) = raster::Rasterize::forward(
        values[0],
        values[1],
        values[2],
        values[3],
        values[4],
        cloud.sh_degree,
        cam,
        settings,
    )?;
    let rgb = rendered.rgb.to_tensor();
    let var = graph.custom(op, &inputs, rgb);
    Ok((var, rendered))
}

pub(crate) fn check_positive_definite(cov: &[[f64; 2]; 2]) -> Result<f64> {
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    if !(det > 0.0 && cov[0][0] > 0.0) || (cov[0][1] - cov[1][0]).abs() > 1e-9 * cov[0][0].abs().max(1.0) {
        return Err(Error::NotPositiveDefinite { det });
    }
    Ok(det)
}
