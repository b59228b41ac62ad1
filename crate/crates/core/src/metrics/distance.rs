use crate::engine::LabelMap;

/// Foreground pixels of `mask` (row-major `h×w`) with at least one
/// background 4-neighbour; the frame border counts as background.
pub fn surface_extract(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !mask[(y - 1) * w + x]
                || !mask[(y + 1) * w + x]
                || !mask[y * w + x - 1]
                || !mask[y * w + x + 1];
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// Stand-in for "no point" in the distance transform.
const FAR: f64 = 1e20;

/// Squared Euclidean distance transform of one row or column (lower
/// envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..f.len() {
        let s = loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * (q - p)) as f64;
            if s <= z[k] {
                k -= 1;
            } else {
                break s;
            }
        };
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from every pixel to the nearest of `points`.
fn squared_distance_field(points: &[(usize, usize)], h: usize, w: usize) -> Vec<f64> {
    let mut grid = vec![FAR; h * w];
    for &(y, x) in points {
        grid[y * w + x] = 0.0;
    }
    let n = h.max(w);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Linear-interpolation percentile (`q` in `[0, 1]`) of sorted values.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Whether a distance came from two nonempty surfaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceFlag {
    Valid,
    /// One surface empty: reported as the image diagonal.
    OneEmpty,
    /// Both empty: reported as 0.
    BothEmpty,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceDistance {
    pub hd95: f64,
    pub asd: f64,
    pub flag: DistanceFlag,
}

/// Pooled directed nearest-neighbour distances between two surfaces.
fn pooled_distances(a: &[(usize, usize)], b: &[(usize, usize)], h: usize, w: usize) -> Vec<f64> {
    let fa = squared_distance_field(a, h, w);
    let fb = squared_distance_field(b, h, w);
    let mut d: Vec<f64> = a
        .iter()
        .map(|&(y, x)| fb[y * w + x].sqrt())
        .chain(b.iter().map(|&(y, x)| fa[y * w + x].sqrt()))
        .collect();
    d.sort_by(f64::total_cmp);
    d
}

/// HD95 and ASD of two surfaces in an `h×w` frame, with sentinels for
/// empty surfaces.
pub fn distance_pair(a: &[(usize, usize)], b: &[(usize, usize)], h: usize, w: usize) -> SurfaceDistance {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => SurfaceDistance {
            hd95: 0.0,
            asd: 0.0,
            flag: DistanceFlag::BothEmpty,
        },
        (true, false) | (false, true) => {
            let diag = ((h * h + w * w) as f64).sqrt();
            SurfaceDistance {
                hd95: diag,
                asd: diag,
                flag: DistanceFlag::OneEmpty,
            }
        }
        (false, false) => {
            let d = pooled_distances(a, b, h, w);
            SurfaceDistance {
                hd95: percentile(&d, 0.95),
                asd: d.iter().sum::<f64>() / d.len() as f64,
                flag: DistanceFlag::Valid,
            }
        }
    }
}

pub fn hd95(a: &[(usize, usize)], b: &[(usize, usize)], h: usize, w: usize) -> f64 {
    distance_pair(a, b, h, w).hd95
}

pub fn asd(a: &[(usize, usize)], b: &[(usize, usize)], h: usize, w: usize) -> f64 {
    distance_pair(a, b, h, w).asd
}

/// Surface distances of class `class` between two label maps.
pub(crate) fn class_distance(pred: &LabelMap, gt: &LabelMap, class: u8) -> SurfaceDistance {
    let (h, w) = (gt.height, gt.width);
    let sa = surface_extract(&pred.indicator(class), h, w);
    let sb = surface_extract(&gt.indicator(class), h, w);
    distance_pair(&sa, &sb, h, w)
}
