use std::collections::{BTreeMap, VecDeque};

use ndarray::Array2;

use super::SuperpixelMap;
use crate::data::RgbImage;
use crate::error::{Error, Result};

pub const SLIC_ITERATIONS: usize = 10;

fn srgb_to_linear(v: f64) -> f64 {
    let v = v / 255.0;
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// sRGB (D65) to CIELAB.
pub fn rgb_to_lab(px: [u8; 3]) -> [f64; 3] {
    let [r, g, b] = px.map(|v| srgb_to_linear(v as f64));
    let x = (0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b) / 0.950_47;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175 * b;
    let z = (0.019_333_9 * r + 0.119_192 * g + 0.950_304_1 * b) / 1.088_83;
    let f = |t: f64| {
        if t > (6.0f64 / 29.0).powi(3) {
            t.cbrt()
        } else {
            t / (3.0 * (6.0f64 / 29.0).powi(2)) + 4.0 / 29.0
        }
    };
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

#[derive(Clone, Copy)]
struct Centre {
    lab: [f64; 3],
    row: f64,
    col: f64,
}

/// Grid-seeded k-means in joint (Lab, position) space followed by a
/// connectivity pass. `compactness` weighs spatial distance against colour.
pub fn slic_superpixels(image: &RgbImage, n_segments: usize, compactness: f64) -> Result<SuperpixelMap> {
    let (h, w, _) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::EmptyInput);
    }
    if n_segments == 0 || n_segments > h * w {
        return Err(Error::TooManySegments {
            requested: n_segments,
            pixels: h * w,
        });
    }
    if !(compactness.is_finite() && compactness >= 0.0) {
        return Err(Error::ConfigInvalid(format!("compactness {compactness} must be >= 0")));
    }
    let lab = Array2::from_shape_fn((h, w), |(r, c)| {
        rgb_to_lab([image[[r, c, 0]], image[[r, c, 1]], image[[r, c, 2]]])
    });

    let ny = ((n_segments as f64 * h as f64 / w as f64).sqrt().round() as usize).clamp(1, h);
    let nx = ((n_segments as f64 / ny as f64).round() as usize).clamp(1, w);
    let step = ((h * w) as f64 / (ny * nx) as f64).sqrt();
    let mut centres = Vec::with_capacity(ny * nx);
    for i in 0..ny {
        for j in 0..nx {
            let row = (i as f64 + 0.5) * h as f64 / ny as f64;
            let col = (j as f64 + 0.5) * w as f64 / nx as f64;
            let (r, c) = ((row as usize).min(h - 1), (col as usize).min(w - 1));
            centres.push(Centre {
                lab: lab[[r, c]],
                row,
                col,
            });
        }
    }

    let spatial_w = (compactness / step).powi(2);
    let radius = (2.0 * step).ceil() as i64;
    let mut labels = Array2::<usize>::zeros((h, w));
    let mut dist = Array2::<f64>::from_elem((h, w), f64::INFINITY);
    for _ in 0..SLIC_ITERATIONS {
        dist.fill(f64::INFINITY);
        for (k, ctr) in centres.iter().enumerate() {
            let (cr, cc) = (ctr.row.round() as i64, ctr.col.round() as i64);
            let r0 = (cr - radius).max(0) as usize;
            let r1 = ((cr + radius) as usize).min(h - 1);
            let c0 = (cc - radius).max(0) as usize;
            let c1 = ((cc + radius) as usize).min(w - 1);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let p = lab[[r, c]];
                    let dc = (0..3).map(|i| (p[i] - ctr.lab[i]).powi(2)).sum::<f64>();
                    let ds = (r as f64 - ctr.row).powi(2) + (c as f64 - ctr.col).powi(2);
                    let d = dc + ds * spatial_w;
                    if d < dist[[r, c]] {
                        dist[[r, c]] = d;
                        labels[[r, c]] = k;
                    }
                }
            }
        }
        // any pixel outside every search window goes to the spatially nearest centre
        for r in 0..h {
            for c in 0..w {
                if dist[[r, c]].is_infinite() {
                    labels[[r, c]] = nearest_centre(&centres, r, c);
                }
            }
        }
        let mut acc = vec![([0.0; 3], 0.0, 0.0, 0usize); centres.len()];
        for ((r, c), &k) in labels.indexed_iter() {
            let a = &mut acc[k];
            for i in 0..3 {
                a.0[i] += lab[[r, c]][i];
            }
            a.1 += r as f64;
            a.2 += c as f64;
            a.3 += 1;
        }
        for (ctr, a) in centres.iter_mut().zip(&acc) {
            if a.3 > 0 {
                let n = a.3 as f64;
                ctr.lab = a.0.map(|v| v / n);
                ctr.row = a.1 / n;
                ctr.col = a.2 / n;
            }
        }
    }
    Ok(enforce_connectivity(&labels))
}

fn nearest_centre(centres: &[Centre], r: usize, c: usize) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (k, ctr) in centres.iter().enumerate() {
        let d = (r as f64 - ctr.row).powi(2) + (c as f64 - ctr.col).powi(2);
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

const NEIGHBOURS: [(i64, i64); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// 4-connected components of equal labels, numbered in raster order of
/// their first pixel. Returns the component map and each component's size.
pub(crate) fn components(labels: &Array2<usize>) -> (Array2<usize>, Vec<usize>) {
    let (h, w) = labels.dim();
    let mut comp = Array2::from_elem((h, w), usize::MAX);
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if comp[[r, c]] != usize::MAX {
                continue;
            }
            let id = sizes.len();
            let lab = labels[[r, c]];
            comp[[r, c]] = id;
            queue.push_back((r, c));
            let mut n = 0;
            while let Some((y, x)) = queue.pop_front() {
                n += 1;
                for (dy, dx) in NEIGHBOURS {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if comp[[ny, nx]] == usize::MAX && labels[[ny, nx]] == lab {
                        comp[[ny, nx]] = id;
                        queue.push_back((ny, nx));
                    }
                }
            }
            sizes.push(n);
        }
    }
    (comp, sizes)
}

/// Keeps the largest component of every label; smaller fragments join the
/// already-resolved neighbour they share the longest boundary with (lowest
/// id on ties). Labels are then renumbered in raster order.
pub(crate) fn enforce_connectivity(labels: &Array2<usize>) -> SuperpixelMap {
    let (h, w) = labels.dim();
    let (comp, sizes) = components(labels);
    let n = sizes.len();
    let mut comp_label = vec![0usize; n];
    for ((r, c), &k) in comp.indexed_iter() {
        comp_label[k] = labels[[r, c]];
    }
    // largest component per label wins; raster-first on ties
    let mut keeper: BTreeMap<usize, usize> = BTreeMap::new();
    for k in 0..n {
        let e = keeper.entry(comp_label[k]).or_insert(k);
        if sizes[k] > sizes[*e] {
            *e = k;
        }
    }
    // owner[k] = component whose region k ends up in
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for &k in keeper.values() {
        owner[k] = Some(k);
    }
    let mut boundary: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); n];
    for r in 0..h {
        for c in 0..w {
            let a = comp[[r, c]];
            for (nr, nc) in [(r + 1, c), (r, c + 1)] {
                if nr < h && nc < w {
                    let b = comp[[nr, nc]];
                    if a != b {
                        *boundary[a].entry(b).or_default() += 1;
                        *boundary[b].entry(a).or_default() += 1;
                    }
                }
            }
        }
    }
    loop {
        let mut changed = false;
        let mut pending = false;
        for k in 0..n {
            if owner[k].is_some() {
                continue;
            }
            let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
            for (&nb, &len) in &boundary[k] {
                if let Some(o) = owner[nb] {
                    *votes.entry(o).or_default() += len;
                }
            }
            match votes.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) {
                Some((&o, _)) => {
                    owner[k] = Some(o);
                    changed = true;
                }
                None => pending = true,
            }
        }
        if !pending {
            break;
        }
        assert!(changed, "fragments always reach a kept component");
    }
    let mut relabel: Vec<Option<usize>> = vec![None; n];
    let mut count = 0;
    let mut out = Array2::zeros((h, w));
    for ((r, c), &k) in comp.indexed_iter() {
        let o = owner[k].expect("resolved");
        let id = *relabel[o].get_or_insert_with(|| {
            count += 1;
            count - 1
        });
        out[[r, c]] = id;
    }
    SuperpixelMap { labels: out, count }
}
