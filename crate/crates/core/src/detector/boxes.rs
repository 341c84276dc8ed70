use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Feature stride of the anchor grid.
pub const ANCHOR_STRIDE: usize = 8;

/// Largest log-scale change a decoded delta may apply.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// A reference box centred on a feature cell. `aspect` is height over width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub center: (f64, f64),
    pub scale: f64,
    pub aspect: f64,
}

impl Anchor {
    /// Box with area `scale^2` and `h / w = aspect`.
    pub fn to_box(&self) -> BBox {
        let w = self.scale / self.aspect.sqrt();
        let h = self.scale * self.aspect.sqrt();
        let (cx, cy) = self.center;
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }
}

/// Anchors over the stride-8 cell centres of an `(H, W)` image, row-major over cells,
/// then scales, then aspects.
pub fn generate_anchors(image_hw: (usize, usize), scales: &[f64], aspects: &[f64]) -> Vec<Anchor> {
    let gh = image_hw.0.div_ceil(ANCHOR_STRIDE);
    let gw = image_hw.1.div_ceil(ANCHOR_STRIDE);
    let s = ANCHOR_STRIDE as f64;
    let mut out = Vec::with_capacity(gh * gw * scales.len() * aspects.len());
    for y in 0..gh {
        for x in 0..gw {
            for &scale in scales {
                for &aspect in aspects {
                    out.push(Anchor {
                        center: ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s),
                        scale,
                        aspect,
                    });
                }
            }
        }
    }
    out
}

/// Box-delta parameterization `(dx, dy, dw, dh)` with per-component weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCoder {
    pub weights: [f64; 4],
}

impl BoxCoder {
    pub const UNIT: BoxCoder = BoxCoder { weights: [1.0; 4] };
    /// Weights used by the second-stage refinement head.
    pub const REFINE: BoxCoder = BoxCoder {
        weights: [10.0, 10.0, 5.0, 5.0],
    };

    pub fn encode(&self, anchor: &BBox, target: &BBox) -> [f64; 4] {
        let (aw, ah) = (anchor.width(), anchor.height());
        let (acx, acy) = anchor.center();
        let (tw, th) = (target.width(), target.height());
        let (tcx, tcy) = target.center();
        let [wx, wy, ww, wh] = self.weights;
        [
            wx * (tcx - acx) / aw,
            wy * (tcy - acy) / ah,
            ww * (tw / aw).ln(),
            wh * (th / ah).ln(),
        ]
    }

    /// Inverse of [`BoxCoder::encode`]; scale deltas are clamped to [`MAX_LOG_SCALE`].
    pub fn decode(&self, anchor: &BBox, d: [f64; 4]) -> BBox {
        let (aw, ah) = (anchor.width(), anchor.height());
        let (acx, acy) = anchor.center();
        let [wx, wy, ww, wh] = self.weights;
        let cx = acx + d[0] / wx * aw;
        let cy = acy + d[1] / wy * ah;
        let w = aw * (d[2] / ww).min(MAX_LOG_SCALE).exp();
        let h = ah * (d[3] / wh).min(MAX_LOG_SCALE).exp();
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }
}

fn check_dims(b: &BBox, what: &str) -> Result<()> {
    if b.width() > 0.0 && b.height() > 0.0 && b.is_valid() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{what} must have positive width and height, got {:?}",
            b.to_array()
        )))
    }
}

/// `(dx, dy, dw, dh) = ((x - xa) / wa, (y - ya) / ha, ln(w / wa), ln(h / ha))`.
pub fn encode_box_delta(anchor: &BBox, target: &BBox) -> Result<[f64; 4]> {
    check_dims(anchor, "anchor")?;
    check_dims(target, "target box")?;
    Ok(BoxCoder::UNIT.encode(anchor, target))
}

/// Inverse of [`encode_box_delta`].
pub fn decode_box_delta(anchor: &BBox, delta: [f64; 4]) -> Result<BBox> {
    check_dims(anchor, "anchor")?;
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("box delta must be finite"));
    }
    let (aw, ah) = (anchor.width(), anchor.height());
    let (acx, acy) = anchor.center();
    let (cx, cy) = (acx + delta[0] * aw, acy + delta[1] * ah);
    let (w, h) = (aw * delta[2].exp(), ah * delta[3].exp());
    Ok(BBox::new(
        cx - 0.5 * w,
        cy - 0.5 * h,
        cx + 0.5 * w,
        cy + 0.5 * h,
    ))
}
