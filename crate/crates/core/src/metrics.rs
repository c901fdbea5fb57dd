//! IoU, surface extraction, exact Euclidean distance transform and HD95.

use crate::error::{Error, Result};
use crate::volume::{coords, linear_index, voxel_count, Dims, Field, Mask3D};

/// Boundary voxels of a mask, in increasing linear-index order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SurfaceVoxelSet {
    pub dims: Dims,
    pub indices: Vec<usize>,
}

impl SurfaceVoxelSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn to_mask(&self) -> Mask3D {
        let mut m = Mask3D::zeros(self.dims);
        for &i in &self.indices {
            m.set(i, true);
        }
        m
    }
}

/// `|pred ∩ gt| / |pred ∪ gt|`, 1 when both are empty.
pub fn iou(pred: &Mask3D, gt: &Mask3D) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!("iou: {:?} vs {:?}", pred.dims(), gt.dims())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        inter += (a & b) as usize;
        union += (a | b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground voxels with at least one 6-neighbor that is background or
/// outside the volume.
pub fn extract_surface(m: &Mask3D) -> Result<SurfaceVoxelSet> {
    if m.count() == 0 {
        return Err(Error::EmptyMask("surface of an empty mask".into()));
    }
    let dims = m.dims();
    let [h, w, d] = dims;
    let inside = |i: usize, j: usize, k: usize| m.get(linear_index(dims, i, j, k));
    let mut indices = Vec::new();
    for idx in (0..m.len()).filter(|&v| m.get(v)) {
        let [i, j, k] = coords(dims, idx);
        let interior = i > 0
            && i + 1 < h
            && j > 0
            && j + 1 < w
            && k > 0
            && k + 1 < d
            && inside(i - 1, j, k)
            && inside(i + 1, j, k)
            && inside(i, j - 1, k)
            && inside(i, j + 1, k)
            && inside(i, j, k - 1)
            && inside(i, j, k + 1);
        if !interior {
            indices.push(idx);
        }
    }
    Ok(SurfaceVoxelSet { dims, indices })
}

/// Lower envelope of parabolas `w (q - p)^2 + f[p]` over the finite entries
/// of `f`, written to `out`; all-infinite input yields all-infinite output.
fn envelope_1d(f: &[f64], w: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let key = |p: usize| f[p] + w * (p * p) as f64;
    for q in (0..f.len()).filter(|&q| f[q].is_finite()) {
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = (key(q) - key(p)) / (2.0 * w * (q - p) as f64);
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while j + 1 < v.len() && z[j + 1] < q as f64 {
            j += 1;
        }
        let p = v[j];
        let dq = q as f64 - p as f64;
        *o = w * dq * dq + f[p];
    }
}

/// Exact Euclidean distance (mm) from every voxel to the nearest voxel of `m`.
pub fn distance_transform(m: &Mask3D, spacing: [f32; 3]) -> Result<Field<f32>> {
    if m.count() == 0 {
        return Err(Error::EmptyMask("distance transform of an empty mask".into()));
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::invalid(format!("spacing must be positive, got {spacing:?}")));
    }
    let dims = m.dims();
    let mut g: Vec<f64> = m.data().iter().map(|&b| if b == 1 { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let len = dims[axis];
        let w = (spacing[axis] as f64).powi(2);
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        let stride = strides[axis];
        // every voxel whose coordinate along `axis` is zero starts a line
        for start in (0..voxel_count(dims)).filter(|&idx| coords(dims, idx)[axis] == 0) {
            for (t, x) in line.iter_mut().enumerate() {
                *x = g[start + t * stride];
            }
            envelope_1d(&line, w, &mut out, &mut v, &mut z);
            for (t, &x) in out.iter().enumerate() {
                g[start + t * stride] = x;
            }
        }
    }
    Field::new(dims, g.into_iter().map(|d| d.sqrt() as f32).collect())
}

/// Nearest-rank percentile: the `ceil(q n)`-th smallest value.
pub fn nearest_rank(values: &mut [f32], q: f64) -> Option<f32> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f32::total_cmp);
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    Some(values[rank - 1])
}

fn directed_p95(from: &SurfaceVoxelSet, to: &SurfaceVoxelSet, spacing: [f32; 3]) -> Result<f32> {
    let dt = distance_transform(&to.to_mask(), spacing)?;
    let mut d: Vec<f32> = from.indices.iter().map(|&i| dt.get(i)).collect();
    Ok(nearest_rank(&mut d, 0.95).unwrap_or(0.0))
}

/// Symmetric 95th-percentile surface distance in mm.
pub fn hd95(pred: &Mask3D, gt: &Mask3D, spacing: [f32; 3]) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!("hd95: {:?} vs {:?}", pred.dims(), gt.dims())));
    }
    if pred.count() == 0 || gt.count() == 0 {
        return Err(Error::EmptyMask("hd95 is undefined for an empty mask".into()));
    }
    let a = extract_surface(pred)?;
    let b = extract_surface(gt)?;
    Ok(directed_p95(&a, &b, spacing)?.max(directed_p95(&b, &a, spacing)?) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_dt(m: &Mask3D, s: [f32; 3]) -> Vec<f32> {
        let dims = m.dims();
        let seeds: Vec<[usize; 3]> = (0..m.len()).filter(|&i| m.get(i)).map(|i| coords(dims, i)).collect();
        (0..m.len())
            .map(|i| {
                let c = coords(dims, i);
                let best = seeds
                    .iter()
                    .map(|p| {
                        (0..3)
                            .map(|a| ((c[a] as f64 - p[a] as f64) * s[a] as f64).powi(2))
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min);
                best.sqrt() as f32
            })
            .collect()
    }

    fn cube(dims: Dims, lo: [usize; 3], side: usize) -> Mask3D {
        Mask3D::from_fn(dims, |i| {
            let c = coords(dims, i);
            (0..3).all(|a| c[a] >= lo[a] && c[a] < lo[a] + side)
        })
    }

    #[test]
    fn iou_examples() {
        let a = Mask3D::new([1, 1, 4], vec![1, 1, 0, 0]).unwrap();
        let b = Mask3D::new([1, 1, 4], vec![0, 1, 1, 0]).unwrap();
        let c = Mask3D::new([1, 1, 4], vec![0, 0, 1, 1]).unwrap();
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &c).unwrap(), 0.0);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let z = Mask3D::zeros([2, 2, 2]);
        assert_eq!(iou(&z, &z).unwrap(), 1.0);
        assert!(iou(&a, &z).is_err());
    }

    #[test]
    fn surface_examples() {
        let dims = [5, 5, 5];
        let single = cube(dims, [2, 2, 2], 1);
        assert_eq!(extract_surface(&single).unwrap().indices, vec![linear_index(dims, 2, 2, 2)]);
        let c = cube(dims, [1, 1, 1], 3);
        let s = extract_surface(&c).unwrap();
        assert_eq!(s.len(), 26);
        assert!(!s.indices.contains(&linear_index(dims, 2, 2, 2)));
        let full = Mask3D::ones([4, 4, 4]);
        assert_eq!(extract_surface(&full).unwrap().len(), 64 - 8);
        assert!(matches!(extract_surface(&Mask3D::zeros(dims)), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn distance_examples() {
        let dims = [6, 6, 2];
        let mut m = Mask3D::zeros(dims);
        m.set(0, true);
        let dt = distance_transform(&m, [1.0; 3]).unwrap();
        assert_eq!(dt.get(0), 0.0);
        assert_eq!(dt.get(linear_index(dims, 3, 4, 0)), 5.0);
        let dt = distance_transform(&m, [2.0, 1.0, 1.0]).unwrap();
        assert_eq!(dt.get(linear_index(dims, 1, 0, 0)), 2.0);
        assert!(distance_transform(&Mask3D::zeros(dims), [1.0; 3]).is_err());
    }

    #[test]
    fn hd95_examples() {
        let dims = [10, 8, 8];
        let a = cube(dims, [2, 2, 2], 4);
        let b = cube(dims, [3, 2, 2], 4);
        assert_eq!(hd95(&a, &a, [1.0; 3]).unwrap(), 0.0);
        assert_eq!(hd95(&a, &b, [1.0; 3]).unwrap(), 1.0);
        assert_eq!(hd95(&a, &b, [2.0, 1.0, 1.0]).unwrap(), 2.0);
        assert!(matches!(hd95(&a, &Mask3D::zeros(dims), [1.0; 3]), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn nearest_rank_picks_ceil() {
        let mut v: Vec<f32> = (1..=20).map(|x| x as f32).collect();
        assert_eq!(nearest_rank(&mut v, 0.95), Some(19.0));
        let mut v: Vec<f32> = (1..=21).map(|x| x as f32).collect();
        assert_eq!(nearest_rank(&mut v, 0.95), Some(20.0));
        assert_eq!(nearest_rank(&mut [], 0.95), None);
    }

    fn mask_strategy() -> impl Strategy<Value = Mask3D> {
        (1usize..7, 1usize..7, 1usize..7).prop_flat_map(|(h, w, d)| {
            proptest::collection::vec(proptest::bool::weighted(0.2), h * w * d).prop_filter_map("nonempty", move |bits| {
                let m = Mask3D::from_fn([h, w, d], |i| bits[i]);
                (m.count() > 0).then_some(m)
            })
        })
    }

    proptest! {
        #[test]
        fn distance_matches_brute_force(m in mask_strategy(), s in proptest::array::uniform3(0.3f32..3.0)) {
            let dt = distance_transform(&m, s).unwrap();
            let want = brute_dt(&m, s);
            prop_assert_eq!(dt.data(), want.as_slice());
        }

        #[test]
        fn hd95_symmetric_and_scales(a in mask_strategy(), seed in any::<u64>(), k in 0.5f32..4.0) {
            let dims = a.dims();
            let mut r = crate::rng::stream(seed, &[]);
            let b = Mask3D::from_fn(dims, |_| rand::Rng::random_bool(&mut r, 0.3));
            prop_assume!(b.count() > 0);
            let s = [1.0f32, 1.5, 0.5];
            let ab = hd95(&a, &b, s).unwrap();
            prop_assert_eq!(ab, hd95(&b, &a, s).unwrap());
            let scaled = hd95(&a, &b, [k * s[0], k * s[1], k * s[2]]).unwrap();
            prop_assert!((scaled - k as f64 * ab).abs() <= 1e-5 * (1.0 + scaled.abs()));
        }

        #[test]
        fn iou_bounded_and_symmetric(a in mask_strategy(), seed in any::<u64>()) {
            let mut r = crate::rng::stream(seed, &[]);
            let b = Mask3D::from_fn(a.dims(), |_| rand::Rng::random_bool(&mut r, 0.5));
            let x = iou(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(x, iou(&b, &a).unwrap());
        }

        #[test]
        fn surface_voxels_touch_background(m in mask_strategy()) {
            let dims = m.dims();
            let s = extract_surface(&m).unwrap();
            for &idx in &s.indices {
                prop_assert!(m.get(idx));
            }
            // every foreground voxel not listed has all six neighbours inside
            for idx in (0..m.len()).filter(|&i| m.get(i) && !s.indices.contains(&i)) {
                let c = coords(dims, idx);
                prop_assert!((0..3).all(|a| c[a] > 0 && c[a] + 1 < dims[a]));
            }
            prop_assert!(s.indices.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
