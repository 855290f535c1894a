//! Canonical evidence boxes and the overlap measures built on them.
//!
//! All boxes are stored as corner coordinates normalised to the unit square,
//! origin top-left. Model output in any supported convention is clamped into
//! the page and rejected as [`CanonicalBox::Degenerate`] when nothing with
//! positive area survives.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::PageSize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid box [{0}, {1}, {2}, {3}]: need 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1")]
pub struct InvalidBox(pub f64, pub f64, pub f64, pub f64);

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, InvalidBox> {
        let ok = [x0, y0, x1, y1].iter().all(|v| v.is_finite())
            && 0.0 <= x0
            && x0 < x1
            && x1 <= 1.0
            && 0.0 <= y0
            && y0 < y1
            && y1 <= 1.0;
        if ok {
            Ok(Self { x0, y0, x1, y1 })
        } else {
            Err(InvalidBox(x0, y0, x1, y1))
        }
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }
    pub fn y0(&self) -> f64 {
        self.y0
    }
    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Back to pixel corners on `page`.
    pub fn to_pixels(&self, page: PageSize) -> [f64; 4] {
        let w = f64::from(page.width);
        let h = f64::from(page.height);
        [self.x0 * w, self.y0 * h, self.x1 * w, self.y1 * h]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = InvalidBox;

    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.corners()
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "BBox({}, {}, {}, {})",
            self.x0, self.y0, self.x1, self.y1
        )
    }
}

/// How a model (or annotation tool) expresses box coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// Absolute pixels on the source page.
    Pixels,
    /// Already in [0, 1].
    UnitInterval,
    /// Integers in [0, 1000], as emitted by several open-weight VLMs.
    Thousandths,
}

impl Convention {
    /// Upper bound of a coordinate along each axis.
    fn extent(self, page: PageSize) -> (f64, f64) {
        match self {
            Convention::Pixels => (f64::from(page.width), f64::from(page.height)),
            Convention::UnitInterval => (1.0, 1.0),
            Convention::Thousandths => (1000.0, 1000.0),
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Convention::Pixels => "absolute pixel coordinates on the page image",
            Convention::UnitInterval => "fractions of the page width and height in [0, 1]",
            Convention::Thousandths => {
                "integers in [0, 1000] giving thousandths of the page width and height"
            }
        }
    }
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Convention::Pixels => "pixels",
            Convention::UnitInterval => "unit_interval",
            Convention::Thousandths => "thousandths",
        })
    }
}

/// A convention together with the page it refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoordConvention {
    pub tag: Convention,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub page: Option<PageSize>,
}

impl CoordConvention {
    pub fn new(tag: Convention) -> Self {
        Self { tag, page: None }
    }

    pub fn pixels(page: PageSize) -> Self {
        Self {
            tag: Convention::Pixels,
            page: Some(page),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CanonicalBox {
    Valid(BBox),
    Degenerate,
}

impl CanonicalBox {
    pub fn valid(self) -> Option<BBox> {
        match self {
            CanonicalBox::Valid(b) => Some(b),
            CanonicalBox::Degenerate => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("non-finite coordinate in {0:?}")]
pub struct NonFiniteCoordinate(pub [f64; 4]);

/// Normalises a raw quadruple. `page` is used for the pixel convention
/// unless `conv` carries its own page.
pub fn to_canonical(
    raw: [f64; 4],
    conv: CoordConvention,
    page: PageSize,
) -> Result<CanonicalBox, NonFiniteCoordinate> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(NonFiniteCoordinate(raw));
    }
    let page = conv.page.unwrap_or(page);
    let (sx, sy) = conv.tag.extent(page);
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    let c = [
        clamp(raw[0] / sx),
        clamp(raw[1] / sy),
        clamp(raw[2] / sx),
        clamp(raw[3] / sy),
    ];
    Ok(match BBox::new(c[0], c[1], c[2], c[3]) {
        Ok(b) => CanonicalBox::Valid(b),
        Err(_) => CanonicalBox::Degenerate,
    })
}

/// True when any coordinate lies outside the range the convention allows,
/// which usually means the declared convention is wrong.
pub fn exceeds_declared_range(raw: [f64; 4], conv: CoordConvention, page: PageSize) -> bool {
    let page = conv.page.unwrap_or(page);
    let (sx, sy) = conv.tag.extent(page);
    let limits = [sx, sy, sx, sy];
    raw.iter()
        .zip(limits)
        .any(|(v, max)| !v.is_finite() || *v < 0.0 || *v > max)
}

fn union_area(a: &BBox, b: &BBox, inter: f64) -> f64 {
    // (larger) + (smaller - intersection): symmetric in a and b, and never
    // below either area under floating-point rounding.
    let (aa, ab) = (a.area(), b.area());
    aa.max(ab) + (aa.min(ab) - inter)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    (inter / union_area(a, b, inter)).min(1.0)
}

/// Intersection over the prediction's own area.
pub fn iop(pred: &BBox, gt: &BBox) -> f64 {
    let inter = pred.intersection_area(gt);
    if inter == 0.0 {
        return 0.0;
    }
    (inter / pred.area()).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMatch {
    pub index: Option<usize>,
    pub iou: f64,
    pub iop: f64,
}

impl RegionMatch {
    pub const NONE: RegionMatch = RegionMatch {
        index: None,
        iou: 0.0,
        iop: 0.0,
    };
}

/// Region with the highest IoU against `pred`; ties go to the lowest index.
pub fn best_match(pred: &BBox, regions: &[BBox]) -> RegionMatch {
    let mut best = RegionMatch::NONE;
    for (i, region) in regions.iter().enumerate() {
        let v = iou(pred, region);
        if best.index.is_none() || v > best.iou {
            best = RegionMatch {
                index: Some(i),
                iou: v,
                iop: iop(pred, region),
            };
        }
    }
    best
}
