//! Per-segment depth statistics, order-preserving depth edits and
//! dataset-level depth distributions.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::types::{snap_depth, validate_pair, DepthMap, LabelSet, SegmentationMap};

/// Mean depth of every label present in `seg`.
pub fn segment_mean_depth(depth: &DepthMap, seg: &SegmentationMap) -> Result<BTreeMap<usize, f64>> {
    validate_pair(seg, depth)?;
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (&l, &d) in seg.labels().iter().zip(depth.values()) {
        let e = acc.entry(l as usize).or_insert((0.0, 0));
        e.0 += d as f64;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect())
}

fn ranking(means: &BTreeMap<usize, f64>) -> Vec<usize> {
    let mut labels: Vec<usize> = means.keys().copied().collect();
    // BTreeMap keys are already in id order, so a stable sort breaks ties by id.
    labels.sort_by(|a, b| means[a].total_cmp(&means[b]));
    labels
}

/// Present labels ordered near to far by mean depth, ties broken by label id.
pub fn depth_order_valid(depth: &DepthMap, seg: &SegmentationMap) -> Result<Vec<usize>> {
    Ok(ranking(&segment_mean_depth(depth, seg)?))
}

/// Add `delta` to the depth of every `label` pixel, clamp to `[0, 1]`, and
/// accept the result only if the near-to-far label ranking is unchanged.
///
/// `delta` is snapped to the depth grid first, so an unclamped shift by
/// `+δ` followed by `-δ` restores the input exactly.
pub fn shift_segment_depth(depth: &DepthMap, seg: &SegmentationMap, label: usize, delta: f64) -> Result<DepthMap> {
    if !delta.is_finite() {
        return Err(Error::NonFiniteValue { index: 0 });
    }
    let before = depth_order_valid(depth, seg)?;
    if !before.contains(&label) {
        return Err(Error::LabelAbsent(label));
    }
    let dq = snap_depth(delta.clamp(-2.0, 2.0));
    let values: Vec<f32> = seg
        .labels()
        .iter()
        .zip(depth.values())
        .map(|(&l, &v)| if l as usize == label { (v + dq).clamp(0.0, 1.0) } else { v })
        .collect();
    let edited = DepthMap::new(depth.height(), depth.width(), values)?;
    let after = depth_order_valid(&edited, seg)?;
    if after != before {
        let pos: BTreeMap<usize, usize> = after.iter().enumerate().map(|(i, &l)| (l, i)).collect();
        let mut flipped = None;
        'outer: for (i, &a) in before.iter().enumerate() {
            for &b in &before[i + 1..] {
                if pos[&a] > pos[&b] {
                    flipped = Some((a, b));
                    if a == label || b == label {
                        break 'outer;
                    }
                }
            }
        }
        let (nearer, farther) = flipped.expect("rankings differ, so some pair flipped");
        return Err(Error::OrderViolation { nearer, farther });
    }
    Ok(edited)
}

/// Per-label histograms of per-image mean depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthDistribution {
    pub label_set: LabelSet,
    pub bins: usize,
    /// `counts[label][bin]`.
    pub counts: Vec<Vec<u64>>,
    /// Per-image mean depths that went into `counts`, per label.
    pub samples: Vec<Vec<f64>>,
}

impl DepthDistribution {
    pub fn bin_of(&self, v: f64) -> usize {
        ((v * self.bins as f64) as usize).min(self.bins - 1)
    }

    pub fn total(&self, label: usize) -> u64 {
        self.counts[label].iter().sum()
    }

    pub fn median(&self, label: usize) -> Option<f64> {
        let mut s = self.samples[label].clone();
        if s.is_empty() {
            return None;
        }
        s.sort_by(f64::total_cmp);
        let n = s.len();
        Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
    }

    /// Rows `label,bin_lo,bin_hi,count`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["label", "bin_lo", "bin_hi", "count"]).map_err(io)?;
        for (l, counts) in self.counts.iter().enumerate() {
            let name = self.label_set.name(l).unwrap_or("?");
            for (b, c) in counts.iter().enumerate() {
                let lo = b as f64 / self.bins as f64;
                let hi = (b + 1) as f64 / self.bins as f64;
                w.write_record([name.to_string(), format!("{lo:.4}"), format!("{hi:.4}"), c.to_string()])
                    .map_err(io)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// A line chart of the normalised histograms, one colour per label, as RGB PNG bytes.
    pub fn plot_png(&self, width: usize, height: usize) -> Vec<u8> {
        const COLOURS: [[u8; 3]; 7] = [
            [60, 140, 230],
            [110, 110, 130],
            [20, 110, 40],
            [120, 200, 60],
            [150, 100, 50],
            [40, 60, 170],
            [200, 60, 60],
        ];
        let (w, h) = (width.max(32), height.max(32));
        let margin = 8;
        let mut px = vec![255u8; w * h * 3];
        let mut put = |x: usize, y: usize, c: [u8; 3]| {
            if x < w && y < h {
                px[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&c);
            }
        };
        for x in margin..w - margin {
            put(x, h - margin, [0, 0, 0]);
        }
        for y in margin..=h - margin {
            put(margin, y, [0, 0, 0]);
        }
        let plot_w = (w - 2 * margin) as f64;
        let plot_h = (h - 2 * margin) as f64;
        for (l, counts) in self.counts.iter().enumerate() {
            let total = counts.iter().sum::<u64>();
            if total == 0 {
                continue;
            }
            let peak = *counts.iter().max().unwrap_or(&1) as f64 / total as f64;
            let point = |b: usize| {
                let x = margin as f64 + (b as f64 + 0.5) / self.bins as f64 * plot_w;
                let y = (h - margin) as f64 - counts[b] as f64 / total as f64 / peak.max(1e-12) * plot_h;
                (x, y)
            };
            let colour = COLOURS[l % COLOURS.len()];
            for b in 0..self.bins.saturating_sub(1) {
                let (x0, y0) = point(b);
                let (x1, y1) = point(b + 1);
                let steps = ((x1 - x0).abs().max((y1 - y0).abs()) as usize).max(1);
                for s in 0..=steps {
                    let t = s as f64 / steps as f64;
                    put((x0 + t * (x1 - x0)) as usize, (y0 + t * (y1 - y0)) as usize, colour);
                }
            }
        }
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().expect("in-memory PNG header");
            writer.write_image_data(&px).expect("in-memory PNG data");
        }
        out
    }
}

/// Histogram, per label, of the per-image mean depth over `pairs`. Images
/// lacking a label do not contribute to that label.
pub fn depth_distribution<'a>(
    pairs: impl IntoIterator<Item = (&'a SegmentationMap, &'a DepthMap)>,
    label_set: &LabelSet,
    bins: usize,
) -> Result<DepthDistribution> {
    if bins == 0 {
        return Err(Error::InvalidConfig("histogram needs at least one bin".into()));
    }
    let mut dist = DepthDistribution {
        label_set: label_set.clone(),
        bins,
        counts: vec![vec![0; bins]; label_set.len()],
        samples: vec![Vec::new(); label_set.len()],
    };
    let mut any = false;
    for (seg, depth) in pairs {
        any = true;
        for (l, m) in segment_mean_depth(depth, seg)? {
            if l >= label_set.len() {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    num_labels: label_set.len(),
                });
            }
            let b = dist.bin_of(m);
            dist.counts[l][b] += 1;
            dist.samples[l].push(m);
        }
    }
    if !any {
        return Err(Error::EmptyDataset);
    }
    Ok(dist)
}

/// Wasserstein-1 distance between two histograms over `[0, 1]` with equal
/// bins, treating each bin's mass as sitting at its centre. `None` if either
/// is empty.
pub fn histogram_w1(a: &[u64], b: &[u64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let (ta, tb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    if ta == 0.0 || tb == 0.0 {
        return None;
    }
    let width = 1.0 / a.len() as f64;
    let (mut ca, mut cb, mut w1) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ca += *x as f64 / ta;
        cb += *y as f64 / tb;
        w1 += (ca - cb).abs() * width;
    }
    Some(w1)
}
