//! Instance discovery: 8-connected foreground components and border-color segmentation.

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn side(&self) -> usize {
        self.width().max(self.height())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMask {
    /// Full-frame binary mask (0 or 1).
    pub mask: Raster,
    pub bbox: BoundingBox,
    pub area: usize,
}

impl InstanceMask {
    /// Builds an instance from a full-frame mask, thresholding at 0.5.
    pub fn from_mask(m: &Raster) -> Result<Self> {
        let (h, w) = (m.height(), m.width());
        let mut bbox = BoundingBox { x0: w, y0: h, x1: 0, y1: 0 };
        let mut area = 0;
        let mask = Raster::from_fn(1, h, w, |_, y, x| {
            if m.get(0, y, x) > 0.5 {
                area += 1;
                bbox = BoundingBox { x0: bbox.x0.min(x), y0: bbox.y0.min(y), x1: bbox.x1.max(x + 1), y1: bbox.y1.max(y + 1) };
                1.0
            } else {
                0.0
            }
        });
        if area == 0 {
            return Err(Error::invalid("instance mask is empty"));
        }
        Ok(Self { mask, bbox, area })
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// 8-connected components of `foreground > 0.5`, dropping those smaller than
/// `min_area`, largest first (ties broken by first pixel in scan order).
pub fn connected_components(foreground: &Raster, min_area: usize) -> Result<Vec<InstanceMask>> {
    let (h, w) = (foreground.height(), foreground.width());
    let fg = |y: usize, x: usize| foreground.get(0, y, x) > 0.5;
    const NONE: usize = usize::MAX;
    let mut label = vec![NONE; h * w];
    let mut parent: Vec<usize> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !fg(y, x) {
                continue;
            }
            let mut neighbors = [NONE; 4];
            if x > 0 {
                neighbors[0] = label[y * w + x - 1];
            }
            if y > 0 {
                neighbors[1] = label[(y - 1) * w + x];
                if x > 0 {
                    neighbors[2] = label[(y - 1) * w + x - 1];
                }
                if x + 1 < w {
                    neighbors[3] = label[(y - 1) * w + x + 1];
                }
            }
            let own = match neighbors.iter().copied().filter(|l| *l != NONE).min() {
                Some(l) => l,
                None => {
                    parent.push(parent.len());
                    parent.len() - 1
                }
            };
            for n in neighbors.into_iter().filter(|l| *l != NONE) {
                let (a, b) = (find(&mut parent, own), find(&mut parent, n));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
            label[y * w + x] = own;
        }
    }

    // Resolve roots and gather pixels per component in scan order.
    let mut slot = vec![NONE; parent.len()];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for (i, l) in label.iter().enumerate() {
        if *l == NONE {
            continue;
        }
        let root = find(&mut parent, *l);
        if slot[root] == NONE {
            slot[root] = comps.len();
            comps.push(Vec::new());
        }
        comps[slot[root]].push(i);
    }
    comps.retain(|c| c.len() >= min_area.max(1));
    comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    if comps.is_empty() {
        return Err(Error::invalid(format!("no foreground component has at least {min_area} pixels")));
    }
    Ok(comps
        .into_iter()
        .map(|pixels| {
            let mut mask = Raster::zeros(1, h, w);
            let mut bbox = BoundingBox { x0: w, y0: h, x1: 0, y1: 0 };
            for &i in &pixels {
                let (y, x) = (i / w, i % w);
                mask.set(0, y, x, 1.0);
                bbox = BoundingBox { x0: bbox.x0.min(x), y0: bbox.y0.min(y), x1: bbox.x1.max(x + 1), y1: bbox.y1.max(y + 1) };
            }
            InstanceMask { mask, bbox, area: pixels.len() }
        })
        .collect())
}

/// Default minimum component size: 0.1% of the image.
pub fn default_min_area(height: usize, width: usize) -> usize {
    (height * width).div_ceil(1000)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Foreground where the RGB distance to the median border color exceeds `threshold`.
pub fn foreground_from_border(rgb: &Raster, threshold: f64) -> Result<Raster> {
    let (h, w) = (rgb.height(), rgb.width());
    if rgb.channels() != 3 || h < 2 || w < 2 {
        return Err(Error::invalid("border segmentation needs an RGB image of at least 2x2"));
    }
    let border: Vec<(usize, usize)> = (0..w)
        .flat_map(|x| [(0, x), (h - 1, x)])
        .chain((1..h - 1).flat_map(|y| [(y, 0), (y, w - 1)]))
        .collect();
    let bg: [f64; 3] = std::array::from_fn(|c| median(border.iter().map(|&(y, x)| rgb.get(c, y, x)).collect()));
    Ok(Raster::from_fn(1, h, w, |_, y, x| {
        let d2: f64 = (0..3).map(|c| (rgb.get(c, y, x) - bg[c]).powi(2)).sum();
        if d2.sqrt() > threshold {
            1.0
        } else {
            0.0
        }
    }))
}
