//! SLIC superpixels over the full spectrum and the superpixel pooling /
//! uppooling perturbation built on them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube::HsiCube;
use crate::error::{Error, Result};

pub const DEFAULT_COMPACTNESS: f64 = 0.1;
pub const DEFAULT_MAX_ITERS: usize = 10;

/// Dense per-pixel segment ids in `[0, count)`, each id used at least once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLabels {
    height: usize,
    width: usize,
    labels: Vec<usize>,
    count: usize,
}

impl SegmentLabels {
    /// Validates density: ids must cover `[0, max+1)` without gaps.
    pub fn new(height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::Dimensions(format!(
                "labels {height}x{width} needs {} entries, got {}",
                height * width,
                labels.len()
            )));
        }
        let count = labels.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; count];
        for &l in &labels {
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Dimensions(format!("segment id {missing} is empty")));
        }
        Ok(Self {
            height,
            width,
            labels,
            count,
        })
    }

    /// Every pixel in its own segment.
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: (0..height * width).collect(),
            count: height * width,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Number of segments `m`.
    pub fn count(&self) -> usize {
        self.count
    }

    /// Pixel indices of every segment, each list ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count];
        for (p, &l) in self.labels.iter().enumerate() {
            out[l].push(p);
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.count];
        for &l in &self.labels {
            out[l] += 1;
        }
        out
    }
}

/// `m` pooled spectra, row-major `m x bands`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentFeatures {
    pub count: usize,
    pub bands: usize,
    pub values: Vec<f64>,
}

impl SegmentFeatures {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.bands..(i + 1) * self.bands]
    }
}

#[derive(Debug, Clone)]
struct Center {
    row: f64,
    col: f64,
    spectrum: Vec<f64>,
}

/// Grid of `rows x cols` seeds with `rows * cols` close to `target`, leaning
/// toward more columns when the count does not factor evenly.
fn seed_grid(h: usize, w: usize, target: usize) -> (usize, usize) {
    let cols = ((target as f64 * w as f64 / h as f64).sqrt().ceil() as usize).clamp(1, w);
    let rows = ((target as f64 / cols as f64).round() as usize).clamp(1, h);
    (rows, cols)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// SLIC segmentation of `cube`.
///
/// Seeds start on a regular grid; each pixel joins the center minimising
/// `d_spectral + (compactness / s) * d_spatial` among centers within `s` rows
/// and columns (`s = sqrt(h*w/target)`), ties going to the lower center index.
/// After `max_iters` rounds, 4-connected fragments smaller than `s^2 / 4` are
/// merged into their largest neighbour and ids are relabelled densely in
/// row-major order of first appearance. Output does not depend on the size of
/// the rayon pool.
pub fn slic_segment(
    cube: &HsiCube,
    target_segments: usize,
    compactness: f64,
    max_iters: usize,
) -> Result<SegmentLabels> {
    let (h, w, c) = (cube.height(), cube.width(), cube.bands());
    let n = h * w;
    if target_segments == 0 || target_segments > n {
        return Err(Error::Config(format!(
            "target_segments {target_segments} outside [1, {n}]"
        )));
    }
    if !(compactness > 0.0 && compactness.is_finite()) {
        return Err(Error::Config(format!("compactness {compactness} must be > 0")));
    }
    let step = (n as f64 / target_segments as f64).sqrt();
    let spatial_weight = compactness / step;

    let (rows, cols) = seed_grid(h, w, target_segments);
    let row_step = h as f64 / rows as f64;
    let col_step = w as f64 / cols as f64;
    let mut centers: Vec<Center> = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let row = (i as f64 + 0.5) * row_step - 0.5;
            let col = (j as f64 + 0.5) * col_step - 0.5;
            let p = (row.round() as usize).min(h - 1) * w + (col.round() as usize).min(w - 1);
            centers.push(Center {
                row,
                col,
                spectrum: cube.spectrum(p).to_vec(),
            });
        }
    }

    let assign = |centers: &[Center]| -> Vec<usize> {
        (0..n)
            .into_par_iter()
            .map(|p| {
                let (y, x) = ((p / w) as f64, (p % w) as f64);
                let spec = cube.spectrum(p);
                let mut best = (f64::INFINITY, usize::MAX);
                let mut nearest = (f64::INFINITY, 0);
                for (k, ctr) in centers.iter().enumerate() {
                    let (dy, dx) = (y - ctr.row, x - ctr.col);
                    let d_spatial = (dy * dy + dx * dx).sqrt();
                    if d_spatial < nearest.0 {
                        nearest = (d_spatial, k);
                    }
                    if dy.abs() > step || dx.abs() > step {
                        continue;
                    }
                    let d = euclid(spec, &ctr.spectrum) + spatial_weight * d_spatial;
                    if d < best.0 {
                        best = (d, k);
                    }
                }
                // outside every search window: fall back to the spatially nearest seed
                if best.1 == usize::MAX {
                    nearest.1
                } else {
                    best.1
                }
            })
            .collect()
    };

    let mut labels = assign(&centers);
    for _ in 0..max_iters {
        let mut sums = vec![(0.0, 0.0, vec![0.0; c], 0usize); centers.len()];
        for (p, &k) in labels.iter().enumerate() {
            let s = &mut sums[k];
            s.0 += (p / w) as f64;
            s.1 += (p % w) as f64;
            for (acc, v) in s.2.iter_mut().zip(cube.spectrum(p)) {
                *acc += v;
            }
            s.3 += 1;
        }
        for (ctr, (sr, sc, spec, cnt)) in centers.iter_mut().zip(sums) {
            if cnt == 0 {
                continue;
            }
            let inv = 1.0 / cnt as f64;
            ctr.row = sr * inv;
            ctr.col = sc * inv;
            ctr.spectrum = spec.into_iter().map(|v| v * inv).collect();
        }
        let next = assign(&centers);
        if next == labels {
            break;
        }
        labels = next;
    }

    let min_size = ((step * step) / 4.0).max(1.0);
    Ok(merge_fragments(h, w, &labels, min_size))
}

/// Splits `labels` into 4-connected components, absorbs components smaller
/// than `min_size` into their largest neighbour and relabels densely.
fn merge_fragments(h: usize, w: usize, labels: &[usize], min_size: f64) -> SegmentLabels {
    let n = h * w;
    let mut comp = vec![usize::MAX; n];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        comp[start] = id;
        stack.push(start);
        let mut size = 0;
        while let Some(p) = stack.pop() {
            size += 1;
            for q in neighbours(p, h, w) {
                if comp[q] == usize::MAX && labels[q] == labels[start] {
                    comp[q] = id;
                    stack.push(q);
                }
            }
        }
        sizes.push(size);
    }

    // union-find style parent links so merges compose
    let mut parent: Vec<usize> = (0..sizes.len()).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }

    loop {
        let mut changed = false;
        for id in 0..sizes.len() {
            if root(&mut parent, id) != id || (sizes[id] as f64) >= min_size {
                continue;
            }
            let mut best: Option<usize> = None;
            for p in 0..n {
                if root(&mut parent, comp[p]) != id {
                    continue;
                }
                for q in neighbours(p, h, w) {
                    let other = root(&mut parent, comp[q]);
                    if other == id {
                        continue;
                    }
                    best = match best {
                        Some(b) if sizes[b] > sizes[other] || (sizes[b] == sizes[other] && b < other) => {
                            Some(b)
                        }
                        _ => Some(other),
                    };
                }
            }
            if let Some(target) = best {
                parent[id] = target;
                sizes[target] += sizes[id];
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut dense = vec![usize::MAX; sizes.len()];
    let mut next = 0;
    let mut out = vec![0; n];
    for p in 0..n {
        let r = root(&mut parent, comp[p]);
        if dense[r] == usize::MAX {
            dense[r] = next;
            next += 1;
        }
        out[p] = dense[r];
    }
    SegmentLabels {
        height: h,
        width: w,
        labels: out,
        count: next,
    }
}

fn neighbours(p: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (p / w, p % w);
    [
        (y > 0).then(|| p - w),
        (x > 0).then(|| p - 1),
        (x + 1 < w).then(|| p + 1),
        (y + 1 < h).then(|| p + w),
    ]
    .into_iter()
    .flatten()
}

/// Mean spectrum of every segment, summed in ascending pixel order.
pub fn pool(cube: &HsiCube, labels: &SegmentLabels) -> Result<SegmentFeatures> {
    check_dims(cube, labels)?;
    let c = cube.bands();
    let mut values = vec![0.0; labels.count() * c];
    let mut counts = vec![0usize; labels.count()];
    for (p, &l) in labels.labels().iter().enumerate() {
        counts[l] += 1;
        for (acc, v) in values[l * c..(l + 1) * c].iter_mut().zip(cube.spectrum(p)) {
            *acc += v;
        }
    }
    for (row, &cnt) in values.chunks_exact_mut(c).zip(&counts) {
        let inv = 1.0 / cnt as f64;
        for v in row {
            *v *= inv;
        }
    }
    Ok(SegmentFeatures {
        count: labels.count(),
        bands: c,
        values,
    })
}

/// Broadcasts each segment's vector back onto its pixels.
pub fn uppool(features: &SegmentFeatures, labels: &SegmentLabels) -> Result<HsiCube> {
    if features.count != labels.count() {
        return Err(Error::Shape {
            op: "uppool",
            detail: format!(
                "{} feature rows for {} segments",
                features.count,
                labels.count()
            ),
        });
    }
    let data = labels
        .labels()
        .iter()
        .flat_map(|&l| features.row(l).iter().copied())
        .collect();
    HsiCube::new(labels.height(), labels.width(), features.bands, data)
}

/// Flat gather indices that realise [`uppool`] on a `count x bands` tensor.
pub fn uppool_indices(labels: &SegmentLabels, bands: usize) -> Vec<usize> {
    labels
        .labels()
        .iter()
        .flat_map(|&l| (0..bands).map(move |b| l * bands + b))
        .collect()
}

fn check_dims(cube: &HsiCube, labels: &SegmentLabels) -> Result<()> {
    if cube.spatial_dims() != (labels.height(), labels.width()) {
        return Err(Error::Dimensions(format!(
            "cube is {}x{}, labels are {}x{}",
            cube.height(),
            cube.width(),
            labels.height(),
            labels.width()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cube(h: usize, w: usize, c: usize, seed: u64) -> HsiCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HsiCube::new(h, w, c, (0..h * w * c).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn uniform_cube_tiles_spatially() {
        let cube = HsiCube::new(4, 4, 1, vec![0.5; 16]).unwrap();
        let seg = slic_segment(&cube, 4, DEFAULT_COMPACTNESS, DEFAULT_MAX_ITERS).unwrap();
        #[rustfmt::skip]
        let expected = vec![
            0, 0, 1, 1,
            0, 0, 1, 1,
            2, 2, 3, 3,
            2, 2, 3, 3,
        ];
        assert_eq!(seg.labels(), expected.as_slice());
    }

    #[test]
    fn step_edge_splits_halves() {
        let data: Vec<f64> = (0..16).map(|p| if p % 4 < 2 { 0.0 } else { 1.0 }).collect();
        let cube = HsiCube::new(4, 4, 1, data).unwrap();
        let seg = slic_segment(&cube, 2, DEFAULT_COMPACTNESS, DEFAULT_MAX_ITERS).unwrap();
        assert_eq!(seg.count(), 2);
        for p in 0..16 {
            assert_eq!(seg.labels()[p], usize::from(p % 4 >= 2));
        }
    }

    #[test]
    fn random_cube_segment_count() {
        let cube = random_cube(16, 16, 3, 11);
        let seg = slic_segment(&cube, 10, DEFAULT_COMPACTNESS, DEFAULT_MAX_ITERS).unwrap();
        assert!((5..=15).contains(&seg.count()), "m = {}", seg.count());
        assert!(seg.sizes().iter().all(|&s| s > 0));
    }

    #[test]
    fn deterministic_across_pools() {
        let cube = random_cube(24, 20, 5, 3);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| slic_segment(&cube, 12, 0.5, 10).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn pool_means() {
        let cube = HsiCube::new(1, 3, 1, vec![1.0, 3.0, 6.0]).unwrap();
        let labels = SegmentLabels::new(1, 3, vec![0, 0, 1]).unwrap();
        let f = pool(&cube, &labels).unwrap();
        assert_eq!(f.values, vec![2.0, 6.0]);

        let three = SegmentLabels::new(1, 3, vec![0, 0, 0]).unwrap();
        let cube = HsiCube::new(1, 3, 1, vec![1.0, 2.0, 6.0]).unwrap();
        assert_eq!(pool(&cube, &three).unwrap().values, vec![3.0]);
    }

    #[test]
    fn uppool_broadcasts() {
        let labels = SegmentLabels::new(2, 2, vec![0; 4]).unwrap();
        let f = SegmentFeatures {
            count: 1,
            bands: 1,
            values: vec![7.0],
        };
        assert_eq!(uppool(&f, &labels).unwrap().data(), &[7.0; 4]);
    }

    #[test]
    fn anomaly_wrapped_in_block() {
        let mut data = vec![0.0; 25];
        data[12] = 25.0;
        let cube = HsiCube::new(5, 5, 1, data).unwrap();
        let labels = SegmentLabels::new(5, 5, vec![0; 25]).unwrap();
        let u = uppool(&pool(&cube, &labels).unwrap(), &labels).unwrap();
        assert!(u.data().iter().all(|&v| v == 1.0));
        assert_eq!((cube.data()[12] - u.data()[12]).abs(), 24.0);
        assert_eq!((cube.data()[0] - u.data()[0]).abs(), 1.0);
    }

    #[test]
    fn labels_reject_gaps() {
        assert!(SegmentLabels::new(1, 2, vec![0, 2]).is_err());
    }

    #[test]
    fn bad_target_rejected() {
        let cube = random_cube(2, 2, 1, 0);
        assert!(slic_segment(&cube, 0, 0.1, 1).is_err());
        assert!(slic_segment(&cube, 5, 0.1, 1).is_err());
        assert!(slic_segment(&cube, 2, 0.0, 1).is_err());
    }
}
