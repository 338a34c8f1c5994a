//! Region-proposal geometry: anchors on multi-scale feature grids, IoU,
//! greedy non-maximum suppression and bilinear crop-and-resize.
//!
//! Grid cells and anchor slots are 1-based throughout. Within a layer a
//! proposal at cell `(h, w)` with anchor slot `r` carries the flat index
//! `(r - 1)·H·W + (w - 1)·H + h`.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Axis-aligned box in canvas pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Self {
        Self::new(
            cx - width / 2.0,
            cy - height / 2.0,
            cx + width / 2.0,
            cy + height / 2.0,
        )
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    /// Clamp to the `[0, width] × [0, height]` canvas.
    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }
}

/// Ratio given as `height : width`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AspectRatio {
    pub height: f64,
    pub width: f64,
}

impl AspectRatio {
    pub const fn new(height: f64, width: f64) -> Self {
        Self { height, width }
    }
}

impl std::fmt::Display for AspectRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.height, self.width)
    }
}

impl std::str::FromStr for AspectRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("aspect ratio `{s}` must be height:width"));
        let (h, w) = s.trim().split_once(':').ok_or_else(bad)?;
        let h: f64 = h.trim().parse().map_err(|_| bad())?;
        let w: f64 = w.trim().parse().map_err(|_| bad())?;
        Ok(Self::new(h, w))
    }
}

/// Anchor side lengths and aspect ratios. Slot `r` enumerates sizes in the
/// outer loop and ratios in the inner loop.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSpec {
    pub sizes: Vec<f64>,
    pub ratios: Vec<AspectRatio>,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            sizes: vec![32.0, 48.0, 96.0],
            ratios: vec![
                AspectRatio::new(1.0, 1.0),
                AspectRatio::new(2.0, 3.0),
                AspectRatio::new(3.0, 2.0),
            ],
        }
    }
}

impl AnchorSpec {
    /// Anchors per grid cell.
    pub fn per_cell(&self) -> usize {
        self.sizes.len() * self.ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.ratios.is_empty() {
            return Err(Error::Config("anchor spec needs at least one size and ratio".into()));
        }
        if self.sizes.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("anchor sizes must be positive".into()));
        }
        if self
            .ratios
            .iter()
            .any(|r| !(r.height > 0.0) || !(r.width > 0.0))
        {
            return Err(Error::Config("anchor ratio components must be positive".into()));
        }
        Ok(())
    }

    /// `(height, width)` of anchor slot `r` (1-based). Area is `size²`.
    pub fn slot_extent(&self, r: usize) -> (f64, f64) {
        let r0 = r - 1;
        let size = self.sizes[r0 / self.ratios.len()];
        let ratio = self.ratios[r0 % self.ratios.len()];
        let k = (ratio.height / ratio.width).sqrt();
        (size * k, size / k)
    }
}

/// A feature map's spatial layout relative to the input canvas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureGrid {
    pub layer_id: usize,
    pub height: usize,
    pub width: usize,
    pub stride: f64,
    pub offset: f64,
}

impl FeatureGrid {
    pub fn new(layer_id: usize, height: usize, width: usize, input_size: usize) -> Self {
        let stride = input_size as f64 / height as f64;
        Self {
            layer_id,
            height,
            width,
            stride,
            offset: stride / 2.0,
        }
    }

    /// The three default grids: 7×7, 4×4 and 2×2 over a 224 canvas.
    pub fn defaults(input_size: usize) -> Vec<FeatureGrid> {
        [7usize, 4, 2]
            .iter()
            .enumerate()
            .map(|(i, &n)| FeatureGrid::new(i + 1, n, n, input_size))
            .collect()
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

/// Flat index `c` of a 1-based `(h, w, r)` triple on an `H × W` grid.
#[inline]
pub fn flat_index(h: usize, w: usize, r: usize, height: usize, width: usize) -> usize {
    (r - 1) * (height * width) + (w - 1) * height + h
}

/// Pixel centre of the receptive field of cell `(h, w)`.
pub fn receptive_center(grid: &FeatureGrid, h: usize, w: usize) -> Result<(f64, f64)> {
    if h < 1 || h > grid.height || w < 1 || w > grid.width {
        return Err(Error::Index(format!(
            "cell ({h}, {w}) outside {}×{} grid",
            grid.height, grid.width
        )));
    }
    Ok((
        (w as f64 - 1.0) * grid.stride + grid.offset,
        (h as f64 - 1.0) * grid.stride + grid.offset,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BoundingBox,
    pub score: f64,
    pub layer_id: usize,
    /// 1-based `(h, w, r)`.
    pub grid_index: (usize, usize, usize),
    /// 1-based, within the layer.
    pub flat_index: usize,
}

/// Ordered proposals, grouped by layer and ordered by flat index within
/// each layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProposalSet {
    pub proposals: Vec<Proposal>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Proposal> {
        self.proposals.iter()
    }

    pub fn layer(&self, layer_id: usize) -> ProposalSet {
        ProposalSet {
            proposals: self
                .proposals
                .iter()
                .filter(|p| p.layer_id == layer_id)
                .cloned()
                .collect(),
        }
    }

    pub fn count_in_layer(&self, layer_id: usize) -> usize {
        self.proposals.iter().filter(|p| p.layer_id == layer_id).count()
    }

    /// Debug dump, one row per proposal:
    /// `layer_id,h,w,r,x_min,y_min,x_max,y_max,score`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer_id,h,w,r,x_min,y_min,x_max,y_max,score\n");
        for p in &self.proposals {
            let (h, w, r) = p.grid_index;
            let b = p.bbox;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                p.layer_id, h, w, r, b.x_min, b.y_min, b.x_max, b.y_max, p.score
            );
        }
        out
    }
}

impl FromIterator<Proposal> for ProposalSet {
    fn from_iter<I: IntoIterator<Item = Proposal>>(iter: I) -> Self {
        Self {
            proposals: iter.into_iter().collect(),
        }
    }
}

/// Enumerate one anchor per `(cell, size, ratio)` on every grid.
pub fn generate_anchors(
    grids: &[FeatureGrid],
    spec: &AnchorSpec,
    input_size: usize,
    clip: bool,
) -> Result<ProposalSet> {
    if grids.is_empty() {
        return Err(Error::Config("no feature grids given".into()));
    }
    spec.validate()?;
    let canvas = input_size as f64;
    let slots = spec.per_cell();
    let mut proposals = Vec::with_capacity(grids.iter().map(|g| g.cells() * slots).sum());
    for grid in grids {
        for r in 1..=slots {
            let (bh, bw) = spec.slot_extent(r);
            for w in 1..=grid.width {
                for h in 1..=grid.height {
                    let (cx, cy) = receptive_center(grid, h, w)?;
                    let mut bbox = BoundingBox::from_center(cx, cy, bw, bh);
                    if clip {
                        bbox = bbox.clip(canvas, canvas);
                    }
                    proposals.push(Proposal {
                        bbox,
                        score: 0.0,
                        layer_id: grid.layer_id,
                        grid_index: (h, w, r),
                        flat_index: flat_index(h, w, r, grid.height, grid.width),
                    });
                }
            }
        }
    }
    Ok(ProposalSet { proposals })
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

/// Greedy descending-score suppression. Equal scores keep input order.
pub fn nms(props: &ProposalSet, iou_threshold: f64, keep: usize) -> ProposalSet {
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        props.proposals[b]
            .score
            .partial_cmp(&props.proposals[a].score)
            .unwrap_or(Ordering::Equal)
    });
    let mut kept: Vec<&Proposal> = Vec::with_capacity(keep);
    for i in order {
        if kept.len() >= keep {
            break;
        }
        let cand = &props.proposals[i];
        if kept
            .iter()
            .all(|k| iou(&k.bbox, &cand.bbox) <= iou_threshold)
        {
            kept.push(cand);
        }
    }
    kept.into_iter().cloned().collect()
}

/// Bilinear crop of `bbox` resampled to `out_size × out_size`.
///
/// Sampling is corner-aligned: the first and last output samples land on
/// the first and last pixel centres covered by the box.
pub fn crop_resize(image: &Tensor3, bbox: &BoundingBox, out_size: usize) -> Result<Tensor3> {
    let b = bbox.clip(image.width as f64, image.height as f64);
    if !b.is_valid() {
        return Err(Error::DegenerateBox(format!(
            "({}, {}, {}, {}) has no area inside the {}×{} image",
            bbox.x_min, bbox.y_min, bbox.x_max, bbox.y_max, image.width, image.height
        )));
    }
    let xs = sample_positions(b.x_min, b.x_max, out_size, image.width);
    let ys = sample_positions(b.y_min, b.y_max, out_size, image.height);
    let mut out = Tensor3::zeros(image.channels, out_size, out_size);
    let plane_out = out_size * out_size;
    for c in 0..image.channels {
        let src = image.plane(c);
        let dst = &mut out.data[c * plane_out..(c + 1) * plane_out];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let row0 = &src[y0 * image.width..(y0 + 1) * image.width];
            let row1 = &src[y1 * image.width..(y1 + 1) * image.width];
            let drow = &mut dst[oy * out_size..(oy + 1) * out_size];
            for (d, &(x0, x1, fx)) in drow.iter_mut().zip(&xs) {
                let top = row0[x0] + (row0[x1] - row0[x0]) * fx;
                let bot = row1[x0] + (row1[x1] - row1[x0]) * fx;
                *d = top + (bot - top) * fy;
            }
        }
    }
    Ok(out)
}

/// Source taps `(lo, hi, frac)` for each output sample along one axis.
fn sample_positions(lo: f64, hi: f64, n: usize, extent: usize) -> Vec<(usize, usize, f64)> {
    let first = lo;
    let last = (hi - 1.0).max(lo);
    let max_idx = (extent - 1) as f64;
    (0..n)
        .map(|i| {
            let t = if n > 1 {
                i as f64 / (n - 1) as f64
            } else {
                0.5
            };
            let pos = (first + (last - first) * t).clamp(0.0, max_idx);
            let p0 = pos.floor();
            let i0 = p0 as usize;
            let i1 = (i0 + 1).min(extent - 1);
            (i0, i1, pos - p0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn receptive_center_examples() {
        let g7 = FeatureGrid::new(1, 7, 7, 224);
        assert_eq!(receptive_center(&g7, 1, 1).unwrap(), (16.0, 16.0));
        assert_eq!(receptive_center(&g7, 4, 4).unwrap(), (112.0, 112.0));
        let g2 = FeatureGrid::new(3, 2, 2, 224);
        // (x, y) with h = 2 (row), w = 1 (column)
        assert_eq!(receptive_center(&g2, 2, 1).unwrap(), (56.0, 168.0));
        assert!(matches!(receptive_center(&g7, 0, 1), Err(Error::Index(_))));
        assert!(matches!(receptive_center(&g7, 1, 8), Err(Error::Index(_))));
    }

    #[test]
    fn default_anchor_counts() {
        let set = generate_anchors(&FeatureGrid::defaults(224), &AnchorSpec::default(), 224, true)
            .unwrap();
        assert_eq!(set.len(), 621);
        assert_eq!(set.count_in_layer(1), 441);
        assert_eq!(set.count_in_layer(2), 144);
        assert_eq!(set.count_in_layer(3), 36);
    }

    #[test]
    fn single_cell_single_anchor() {
        let grid = FeatureGrid::new(1, 1, 1, 224);
        let spec = AnchorSpec {
            sizes: vec![50.0],
            ratios: vec![AspectRatio::new(1.0, 1.0)],
        };
        let set = generate_anchors(&[grid], &spec, 224, true).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.proposals[0].bbox.center(), (112.0, 112.0));
        assert_eq!(set.proposals[0].flat_index, 1);
    }

    #[test]
    fn corner_anchor_is_clipped() {
        let set = generate_anchors(&FeatureGrid::defaults(224), &AnchorSpec::default(), 224, true)
            .unwrap();
        let first = &set.proposals[0];
        assert_eq!(first.grid_index, (1, 1, 1));
        assert_eq!(first.bbox, BoundingBox::new(0.0, 0.0, 32.0, 32.0));
        // 96-pixel anchor at the same cell reaches past the top-left corner.
        let big = set
            .iter()
            .find(|p| p.layer_id == 1 && p.grid_index == (1, 1, 7))
            .unwrap();
        assert_eq!(big.bbox, BoundingBox::new(0.0, 0.0, 64.0, 64.0));
    }

    #[test]
    fn ratio_preserves_area() {
        let spec = AnchorSpec::default();
        for r in 1..=spec.per_cell() {
            let (h, w) = spec.slot_extent(r);
            let size = spec.sizes[(r - 1) / 3];
            assert!((h * w - size * size).abs() < 1e-9);
        }
        // 2:3 (height:width) is wider than tall
        let (h, w) = spec.slot_extent(2);
        assert!(h < w);
        assert!((h / w - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn flat_index_matches_enumeration_order() {
        let set = generate_anchors(&FeatureGrid::defaults(224), &AnchorSpec::default(), 224, true)
            .unwrap();
        for layer in 1..=3 {
            let l = set.layer(layer);
            for (i, p) in l.iter().enumerate() {
                assert_eq!(p.flat_index, i + 1);
            }
        }
    }

    #[test]
    fn iou_examples() {
        let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BoundingBox::new(5.0, 0.0, 15.0, 10.0);
        let c = BoundingBox::new(20.0, 20.0, 30.0, 30.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &c), 0.0);
        assert!((iou(&a, &b) - 50.0 / 150.0).abs() < 1e-12);
        // touching edges do not overlap
        let d = BoundingBox::new(10.0, 0.0, 20.0, 10.0);
        assert_eq!(iou(&a, &d), 0.0);
    }

    fn prop(b: BoundingBox, score: f64, idx: usize) -> Proposal {
        Proposal {
            bbox: b,
            score,
            layer_id: 1,
            grid_index: (idx, 1, 1),
            flat_index: idx,
        }
    }

    #[test]
    fn nms_examples() {
        let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        let set: ProposalSet = vec![prop(b, 0.8, 1), prop(b, 0.9, 2)].into_iter().collect();
        let out = nms(&set, 0.5, 10);
        assert_eq!(out.len(), 1);
        assert_eq!(out.proposals[0].score, 0.9);
        assert_eq!(out.proposals[0].flat_index, 2);

        let disjoint: ProposalSet = (0..5)
            .map(|i| {
                let x = i as f64 * 20.0;
                prop(BoundingBox::new(x, 0.0, x + 10.0, 10.0), i as f64, i + 1)
            })
            .collect();
        assert_eq!(nms(&disjoint, 0.0, 10).len(), 5);
        let top3 = nms(&disjoint, 0.0, 3);
        let scores: Vec<f64> = top3.iter().map(|p| p.score).collect();
        assert_eq!(scores, vec![4.0, 3.0, 2.0]);

        assert!(nms(&ProposalSet::default(), 0.5, 3).is_empty());
    }

    #[test]
    fn crop_full_canvas_is_identity() {
        let mut img = Tensor3::zeros(3, 16, 16);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 37) % 101) as f64 / 101.0;
        }
        let out = crop_resize(&img, &BoundingBox::new(0.0, 0.0, 16.0, 16.0), 16).unwrap();
        for (a, b) in img.data.iter().zip(&out.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn crop_constant_image() {
        let img = Tensor3::filled(3, 20, 20, 0.7);
        let out = crop_resize(&img, &BoundingBox::new(3.2, 4.5, 11.0, 17.9), 9).unwrap();
        assert!(out.data.iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn crop_checkerboard_upsample() {
        // 2×2 checkerboard [[0, 1], [1, 0]] upsampled to 4×4. Corner-aligned
        // samples sit at t ∈ {0, 1/3, 2/3, 1}, so the value is x(1-y) + y(1-x).
        let img = Tensor3::from_vec(1, 2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let out = crop_resize(&img, &BoundingBox::new(0.0, 0.0, 2.0, 2.0), 4).unwrap();
        let expected = [
            [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0],
            [1.0 / 3.0, 4.0 / 9.0, 5.0 / 9.0, 2.0 / 3.0],
            [2.0 / 3.0, 5.0 / 9.0, 4.0 / 9.0, 1.0 / 3.0],
            [1.0, 2.0 / 3.0, 1.0 / 3.0, 0.0],
        ];
        for (y, row) in expected.iter().enumerate() {
            for (x, e) in row.iter().enumerate() {
                assert!((out.get(0, y, x) - e).abs() < 1e-12, "({y},{x})");
            }
        }
    }

    #[test]
    fn crop_degenerate_box() {
        let img = Tensor3::zeros(3, 8, 8);
        let err = crop_resize(&img, &BoundingBox::new(10.0, 10.0, 12.0, 12.0), 4).unwrap_err();
        assert!(matches!(err, Error::DegenerateBox(_)));
    }

    #[test]
    fn csv_dump_header() {
        let set = generate_anchors(&[FeatureGrid::new(1, 1, 1, 32)], &AnchorSpec::default(), 32, true)
            .unwrap();
        let csv = set.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "layer_id,h,w,r,x_min,y_min,x_max,y_max,score");
        assert_eq!(lines.count(), 9);
    }
}
