//! Nearest-neighbor label propagation from labeled to unlabeled volumes:
//! surface-band sampling, embedding similarity maps, ensemble pseudo-labels and
//! the matching and entropy-minimization losses.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{masked_cross_entropy, LossGrad};
use crate::metrics::distance_transform;
use crate::real::Real;
use crate::rng;
use crate::volume::{FeatureMap, Field, Mask3D, ProbMap};

/// Norms below this make a cosine similarity zero.
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    #[default]
    Cosine,
    Euclidean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reducer {
    #[default]
    Mean,
    Max,
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Kernel::Cosine),
            "euclidean" => Ok(Kernel::Euclidean),
            _ => Err(Error::invalid(format!("unknown kernel {s:?} (cosine | euclidean)"))),
        }
    }
}

impl FromStr for Reducer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reducer::Mean),
            "max" => Ok(Reducer::Max),
            _ => Err(Error::invalid(format!("unknown reducer {s:?} (mean | max)"))),
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kernel::Cosine => "cosine",
            Kernel::Euclidean => "euclidean",
        })
    }
}

impl fmt::Display for Reducer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reducer::Mean => "mean",
            Reducer::Max => "max",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelChoice {
    pub kernel: Kernel,
    pub reducer: Reducer,
}

impl KernelChoice {
    pub const ALL: [KernelChoice; 4] = [
        KernelChoice { kernel: Kernel::Cosine, reducer: Reducer::Mean },
        KernelChoice { kernel: Kernel::Cosine, reducer: Reducer::Max },
        KernelChoice { kernel: Kernel::Euclidean, reducer: Reducer::Mean },
        KernelChoice { kernel: Kernel::Euclidean, reducer: Reducer::Max },
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    Object,
    Background,
}

/// `k` feature vectors gathered at labeled voxels, stored embedding-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet<T = f32> {
    channels: usize,
    polarity: Polarity,
    indices: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> EmbeddingSet<T> {
    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn polarity(&self) -> Polarity {
        self.polarity
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Embedding `j`, a vector of `channels` values.
    pub fn column(&self, j: usize) -> &[T] {
        &self.data[j * self.channels..(j + 1) * self.channels]
    }

    /// Writes every column back to its source voxel of `f`.
    pub fn scatter_into(&self, f: &mut FeatureMap<T>) -> Result<()> {
        if f.channels() != self.channels {
            return Err(Error::shape("scatter: channel mismatch"));
        }
        let n = f.voxels();
        for (j, &idx) in self.indices.iter().enumerate() {
            if idx >= n {
                return Err(Error::Index(format!("voxel {idx} out of {n}")));
            }
            for c in 0..self.channels {
                f.data_mut()[c * n + idx] = self.data[j * self.channels + c];
            }
        }
        Ok(())
    }
}

fn band_candidates(y: &Mask3D, band: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    let ones = y.count();
    if ones == 0 || ones == y.len() {
        return Err(Error::NoSurface(format!("mask has {ones} of {} voxels set", y.len())));
    }
    let to_background = distance_transform(&y.complement(), [1.0; 3])?;
    let to_object = distance_transform(y, [1.0; 3])?;
    let object = (0..y.len())
        .filter(|&v| y.get(v) && to_background.get(v) as f64 <= band)
        .collect();
    let background = (0..y.len())
        .filter(|&v| !y.get(v) && to_object.get(v) as f64 <= band)
        .collect();
    Ok((object, background))
}

fn draw<R: Rng + ?Sized>(candidates: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    if candidates.len() >= k {
        sample(rng, candidates.len(), k).into_iter().map(|i| candidates[i]).collect()
    } else {
        (0..k).map(|_| candidates[rng.random_range(0..candidates.len())]).collect()
    }
}

/// Draws `k` object voxels within `band` of the background and `k` background
/// voxels within `band` of the object (Euclidean voxel distance).
pub fn surface_band_sample<R: Rng + ?Sized>(
    y: &Mask3D,
    k: usize,
    band: f64,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if k == 0 {
        return Err(Error::invalid("sample count k must be >= 1"));
    }
    if !(band >= 1.0) {
        return Err(Error::invalid(format!("band must be >= 1 voxel, got {band}")));
    }
    let (object, background) = band_candidates(y, band)?;
    let obj = draw(&object, k, rng);
    let bg = draw(&background, k, rng);
    Ok((obj, bg))
}

/// Column `j` of the result is `f[:, indices[j]]`.
pub fn gather_embeddings<T: Real>(f: &FeatureMap<T>, indices: &[usize], polarity: Polarity) -> Result<EmbeddingSet<T>> {
    if indices.is_empty() {
        return Err(Error::invalid("cannot gather zero embeddings"));
    }
    let (c, n) = (f.channels(), f.voxels());
    let mut data = Vec::with_capacity(c * indices.len());
    for &idx in indices {
        if idx >= n {
            return Err(Error::Index(format!("voxel {idx} out of {n}")));
        }
        data.extend((0..c).map(|ch| f.data()[ch * n + idx]));
    }
    Ok(EmbeddingSet {
        channels: c,
        polarity,
        indices: indices.to_vec(),
        data,
    })
}

fn norm<T: Real>(x: &[T]) -> T {
    x.iter().fold(T::zero(), |a, &v| a + v * v).sqrt()
}

/// Norm of every voxel embedding of a channel-major feature buffer.
fn voxel_norms<T: Real>(f: &[T], c: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for ch in 0..c {
        for (a, &x) in out.iter_mut().zip(&f[ch * n..(ch + 1) * n]) {
            *a += x * x;
        }
    }
    out.iter_mut().for_each(|a| *a = a.sqrt());
    out
}

/// Kernel values between labeled embedding `p` (norm `pn`) and every voxel
/// embedding of `f` (norms `qn`), written to `out`.
fn score_row<T: Real>(kernel: Kernel, p: &[T], pn: T, f: &[T], qn: &[T], out: &mut [T]) {
    let n = out.len();
    out.fill(T::zero());
    match kernel {
        Kernel::Cosine => {
            for (ch, &pc) in p.iter().enumerate() {
                for (o, &x) in out.iter_mut().zip(&f[ch * n..(ch + 1) * n]) {
                    *o += pc * x;
                }
            }
            let guard = T::lit(NORM_GUARD);
            for (o, &q) in out.iter_mut().zip(qn) {
                *o = if pn < guard || q < guard { T::zero() } else { *o / (pn * q) };
            }
        }
        Kernel::Euclidean => {
            for (ch, &pc) in p.iter().enumerate() {
                for (o, &x) in out.iter_mut().zip(&f[ch * n..(ch + 1) * n]) {
                    let d = pc - x;
                    *o += d * d;
                }
            }
            for o in out.iter_mut() {
                *o = T::one() / (T::one() + o.sqrt());
            }
        }
    }
}

/// Adds `scale[v] * d score(p, q_v) / d q_v` to `g` for every voxel `v` with
/// `active[v]`; `s` holds the scores from [`score_row`].
#[allow(clippy::too_many_arguments)]
fn score_grad_row<T: Real>(kernel: Kernel, p: &[T], pn: T, f: &[T], qn: &[T], s: &[T], scale: &[T], active: &[bool], g: &mut [T]) {
    let n = qn.len();
    // per-voxel coefficients: d score / d q = a * p - b * q
    let mut a = vec![T::zero(); n];
    let mut b = vec![T::zero(); n];
    let mut live = active.to_vec();
    match kernel {
        Kernel::Cosine => {
            let guard = T::lit(NORM_GUARD);
            if pn < guard {
                return;
            }
            for v in 0..n {
                live[v] &= qn[v] >= guard;
                a[v] = scale[v] / (pn * qn[v]);
                b[v] = scale[v] * s[v] / (qn[v] * qn[v]);
            }
        }
        Kernel::Euclidean => {
            let mut r = vec![T::zero(); n];
            for (ch, &pc) in p.iter().enumerate() {
                for (acc, &x) in r.iter_mut().zip(&f[ch * n..(ch + 1) * n]) {
                    let d = pc - x;
                    *acc += d * d;
                }
            }
            for v in 0..n {
                let rv = r[v].sqrt();
                live[v] &= rv != T::zero();
                if live[v] {
                    let c = -scale[v] / ((T::one() + rv) * (T::one() + rv) * rv);
                    // c * (q - p) = (-c) * p - (-c) * q
                    a[v] = -c;
                    b[v] = -c;
                }
            }
        }
    }
    for (ch, &pc) in p.iter().enumerate() {
        let gc = &mut g[ch * n..(ch + 1) * n];
        let fc = &f[ch * n..(ch + 1) * n];
        for v in 0..n {
            if live[v] {
                gc[v] += a[v] * pc - b[v] * fc[v];
            }
        }
    }
}

fn check_channels<T: Real>(embset: &EmbeddingSet<T>, f_u: &FeatureMap<T>) -> Result<()> {
    if embset.channels != f_u.channels() {
        return Err(Error::shape(format!(
            "embeddings have {} channels, features have {}",
            embset.channels,
            f_u.channels()
        )));
    }
    Ok(())
}

/// Per-voxel kernel scores against every labeled embedding, reduced over the
/// embeddings by mean or max.
pub fn dense_similarity<T: Real>(embset: &EmbeddingSet<T>, f_u: &FeatureMap<T>, choice: KernelChoice) -> Result<Field<T>> {
    check_channels(embset, f_u)?;
    let (c, n, k) = (f_u.channels(), f_u.voxels(), embset.k());
    let qn = voxel_norms(f_u.data(), c, n);
    let mut row = vec![T::zero(); n];
    let mut out = match choice.reducer {
        Reducer::Mean => vec![T::zero(); n],
        Reducer::Max => vec![T::neg_infinity(); n],
    };
    for j in 0..k {
        let p = embset.column(j);
        score_row(choice.kernel, p, norm(p), f_u.data(), &qn, &mut row);
        match choice.reducer {
            Reducer::Mean => out.iter_mut().zip(&row).for_each(|(a, &s)| *a += s),
            Reducer::Max => out.iter_mut().zip(&row).for_each(|(a, &s)| {
                if s > *a {
                    *a = s;
                }
            }),
        }
    }
    if choice.reducer == Reducer::Mean {
        let kk = T::lit(k as f64);
        out.iter_mut().for_each(|a| *a /= kk);
    }
    Field::new(f_u.dims(), out)
}

/// Accumulates `d_sim`-weighted gradients of [`dense_similarity`] with respect
/// to `f_u` into `d_f`. Under the max reducer the gradient follows the first
/// maximizing embedding.
pub fn dense_similarity_backward<T: Real>(
    embset: &EmbeddingSet<T>,
    f_u: &FeatureMap<T>,
    choice: KernelChoice,
    d_sim: &[T],
    d_f: &mut [T],
) -> Result<()> {
    check_channels(embset, f_u)?;
    let (c, n, k) = (f_u.channels(), f_u.voxels(), embset.k());
    if d_sim.len() != n || d_f.len() != c * n {
        return Err(Error::shape("similarity cotangent does not match features"));
    }
    let f = f_u.data();
    let qn = voxel_norms(f, c, n);
    let active: Vec<bool> = d_sim.iter().map(|&d| d != T::zero()).collect();
    let mut g = vec![T::zero(); c * n];
    let mut row = vec![T::zero(); n];
    match choice.reducer {
        Reducer::Mean => {
            let kk = T::lit(k as f64);
            let scale: Vec<T> = d_sim.iter().map(|&d| d / kk).collect();
            for j in 0..k {
                let p = embset.column(j);
                let pn = norm(p);
                score_row(choice.kernel, p, pn, f, &qn, &mut row);
                score_grad_row(choice.kernel, p, pn, f, &qn, &row, &scale, &active, &mut g);
            }
        }
        Reducer::Max => {
            let mut best = vec![0usize; n];
            let mut best_score = vec![T::neg_infinity(); n];
            for j in 0..k {
                let p = embset.column(j);
                score_row(choice.kernel, p, norm(p), f, &qn, &mut row);
                for v in 0..n {
                    if row[v] > best_score[v] {
                        best[v] = j;
                        best_score[v] = row[v];
                    }
                }
            }
            let mut chosen = vec![false; n];
            for j in 0..k {
                for v in 0..n {
                    chosen[v] = active[v] && best[v] == j;
                }
                if chosen.iter().any(|&b| b) {
                    let p = embset.column(j);
                    score_grad_row(choice.kernel, p, norm(p), f, &qn, &best_score, d_sim, &chosen, &mut g);
                }
            }
        }
    }
    for ch in 0..c {
        for v in (0..n).filter(|&v| active[v]) {
            d_f[ch * n + v] += g[ch * n + v];
        }
    }
    Ok(())
}

/// Averaged object and background similarity maps plus the embeddings of each
/// ensemble member.
#[derive(Clone, Debug)]
pub struct SimilarityEnsemble<T = f32> {
    pub k_plus: Field<T>,
    pub k_minus: Field<T>,
    pub runs: Vec<(EmbeddingSet<T>, EmbeddingSet<T>)>,
}

/// Mean of the per-run similarity maps, accumulated in run order.
pub fn ensemble_from_embeddings<T: Real>(
    runs: Vec<(EmbeddingSet<T>, EmbeddingSet<T>)>,
    f_u: &FeatureMap<T>,
    choice: KernelChoice,
) -> Result<SimilarityEnsemble<T>> {
    if runs.is_empty() {
        return Err(Error::invalid("ensemble size l must be >= 1"));
    }
    let n = f_u.voxels();
    let mut plus = vec![T::zero(); n];
    let mut minus = vec![T::zero(); n];
    for (obj, bg) in &runs {
        for (a, b) in plus.iter_mut().zip(dense_similarity(obj, f_u, choice)?.data()) {
            *a += *b;
        }
        for (a, b) in minus.iter_mut().zip(dense_similarity(bg, f_u, choice)?.data()) {
            *a += *b;
        }
    }
    let inv = T::one() / T::lit(runs.len() as f64);
    plus.iter_mut().chain(minus.iter_mut()).for_each(|x| *x *= inv);
    Ok(SimilarityEnsemble {
        k_plus: Field::new(f_u.dims(), plus)?,
        k_minus: Field::new(f_u.dims(), minus)?,
        runs,
    })
}

/// Samples `l` independent surface-band embedding sets from the labeled
/// features `f_l` and averages their similarity maps over `f_u`.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_similarity<T: Real, R: RngCore + ?Sized>(
    y: &Mask3D,
    f_l: &FeatureMap<T>,
    f_u: &FeatureMap<T>,
    k: usize,
    l: usize,
    band: f64,
    choice: KernelChoice,
    rng: &mut R,
) -> Result<SimilarityEnsemble<T>> {
    if l == 0 {
        return Err(Error::invalid("ensemble size l must be >= 1"));
    }
    if y.dims() != f_l.dims() {
        return Err(Error::shape("labeled mask and features disagree on dims"));
    }
    if k == 0 {
        return Err(Error::invalid("sample count k must be >= 1"));
    }
    if !(band >= 1.0) {
        return Err(Error::invalid(format!("band must be >= 1 voxel, got {band}")));
    }
    let (object, background) = band_candidates(y, band)?;
    let base = rng.next_u64();
    let runs = (0..l)
        .map(|r| {
            let mut s = rng::stream(base, &[r as u64]);
            let obj = draw(&object, k, &mut s);
            let bg = draw(&background, k, &mut s);
            Ok((
                gather_embeddings(f_l, &obj, Polarity::Object)?,
                gather_embeddings(f_l, &bg, Polarity::Background)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    ensemble_from_embeddings(runs, f_u, choice)
}

/// Gradient with respect to `f_u` of a loss with cotangents `d_plus`,
/// `d_minus` on the averaged maps.
pub fn ensemble_backward<T: Real>(
    ens: &SimilarityEnsemble<T>,
    f_u: &FeatureMap<T>,
    choice: KernelChoice,
    d_plus: &[T],
    d_minus: &[T],
) -> Result<FeatureMap<T>> {
    let inv = T::one() / T::lit(ens.runs.len() as f64);
    let dp: Vec<T> = d_plus.iter().map(|&x| x * inv).collect();
    let dm: Vec<T> = d_minus.iter().map(|&x| x * inv).collect();
    let mut d_f = vec![T::zero(); f_u.data().len()];
    for (obj, bg) in &ens.runs {
        dense_similarity_backward(obj, f_u, choice, &dp, &mut d_f)?;
        dense_similarity_backward(bg, f_u, choice, &dm, &mut d_f)?;
    }
    FeatureMap::new(f_u.channels(), f_u.dims(), d_f)
}

/// 1 where the object similarity strictly exceeds the background similarity.
pub fn pseudo_label_nn<T: Real>(k_plus: &Field<T>, k_minus: &Field<T>) -> Result<Mask3D> {
    if k_plus.dims() != k_minus.dims() {
        return Err(Error::shape("similarity maps disagree on dims"));
    }
    Ok(Mask3D::from_fn(k_plus.dims(), |v| k_plus.get(v) > k_minus.get(v)))
}

/// Mean cross-entropy of the student against the neighbor pseudo-labels over
/// the unreliable voxels.
pub fn loss_nn<T: Real>(y_nn: &Mask3D, student_probs: &ProbMap<T>, unreliable: &Mask3D) -> Result<LossGrad<T>> {
    masked_cross_entropy(y_nn, student_probs, Some(unreliable))
}

/// Entropy-minimization loss and its gradients with respect to both maps.
#[derive(Clone, Debug)]
pub struct EntropyMinLoss<T = f32> {
    pub value: T,
    pub d_plus: Vec<T>,
    pub d_minus: Vec<T>,
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Binary entropy of `softmax(K+, K-)`, averaged over the voxels of `scope`
/// (all voxels when `None`); zero on an empty scope.
pub fn loss_entropy_min<T: Real>(k_plus: &Field<T>, k_minus: &Field<T>, scope: Option<&Mask3D>) -> Result<EntropyMinLoss<T>> {
    let dims = k_plus.dims();
    if k_minus.dims() != dims || scope.is_some_and(|m| m.dims() != dims) {
        return Err(Error::shape("similarity maps and scope disagree on dims"));
    }
    let n = k_plus.data().len();
    let selected = |v: usize| scope.is_none_or(|m| m.get(v));
    let count = (0..n).filter(|&v| selected(v)).count();
    let mut d_plus = vec![T::zero(); n];
    let mut d_minus = vec![T::zero(); n];
    if count == 0 {
        return Ok(EntropyMinLoss { value: T::zero(), d_plus, d_minus });
    }
    let inv = T::one() / T::lit(count as f64);
    let mut sum = T::zero();
    for v in (0..n).filter(|&v| selected(v)) {
        let d = k_plus.get(v) - k_minus.get(v);
        let p = T::one() / (T::one() + (-d).exp());
        let q = T::one() - p;
        // -p ln p - q ln q with ln p = -softplus(-d), ln q = -softplus(d)
        sum += p * softplus(-d) + q * softplus(d);
        let g = -d * p * q * inv;
        d_plus[v] = g;
        d_minus[v] = -g;
    }
    Ok(EntropyMinLoss { value: sum * inv, d_plus, d_minus })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{coords, linear_index};
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;
    const COS_MEAN: KernelChoice = KernelChoice { kernel: Kernel::Cosine, reducer: Reducer::Mean };
    const COS_MAX: KernelChoice = KernelChoice { kernel: Kernel::Cosine, reducer: Reducer::Max };

    fn cube(dims: [usize; 3], lo: usize, side: usize) -> Mask3D {
        Mask3D::from_fn(dims, |i| coords(dims, i).iter().all(|&c| c >= lo && c < lo + side))
    }

    fn field(v: Vec<f64>) -> Field<f64> {
        let n = v.len();
        Field::new([1, 1, n], v).unwrap()
    }

    #[test]
    fn band_sampling_examples() {
        let dims = [6, 6, 6];
        let mut y = Mask3D::zeros(dims);
        let only = linear_index(dims, 3, 2, 4);
        y.set(only, true);
        let (obj, bg) = surface_band_sample(&y, 1, 2.0, &mut rng::stream(1, &[])).unwrap();
        assert_eq!(obj, vec![only]);
        assert_eq!(bg.len(), 1);

        let dims = [8, 8, 8];
        let c = cube(dims, 2, 3);
        let center = linear_index(dims, 3, 3, 3);
        let (object, _) = band_candidates(&c, 1.0).unwrap();
        assert_eq!(object.len(), 26);
        assert!(!object.contains(&center));
        for seed in 0..20 {
            let (obj, bg) = surface_band_sample(&c, 5, 1.0, &mut rng::stream(seed, &[])).unwrap();
            assert!(obj.iter().all(|&v| c.get(v) && v != center));
            assert!(bg.iter().all(|&v| !c.get(v)));
            let mut uniq = obj.clone();
            uniq.sort();
            uniq.dedup();
            assert_eq!(uniq.len(), 5, "drawn without replacement");
        }
        assert!(matches!(
            surface_band_sample(&Mask3D::ones(dims), 1, 2.0, &mut rng::stream(0, &[])),
            Err(Error::NoSurface(_))
        ));
        assert!(matches!(
            surface_band_sample(&Mask3D::zeros(dims), 1, 2.0, &mut rng::stream(0, &[])),
            Err(Error::NoSurface(_))
        ));
    }

    #[test]
    fn band_sampling_deterministic() {
        let c = cube([8, 8, 8], 2, 4);
        let a = surface_band_sample(&c, 16, 2.0, &mut rng::stream(4, &[])).unwrap();
        let b = surface_band_sample(&c, 16, 2.0, &mut rng::stream(4, &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gather_examples() {
        let dims = [2, 2, 2];
        let f = FeatureMap::new(3, dims, vec![2.5f64; 24]).unwrap();
        let e = gather_embeddings(&f, &[0, 5, 7], Polarity::Object).unwrap();
        for j in 0..3 {
            assert_eq!(e.column(j), &[2.5, 2.5, 2.5]);
        }
        assert!(matches!(gather_embeddings(&f, &[8], Polarity::Object), Err(Error::Index(_))));

        // one-hot channel per voxel
        let mut onehot = vec![0.0f64; 64];
        for v in 0..8 {
            onehot[v * 8 + v] = 1.0;
        }
        let f = FeatureMap::new(8, dims, onehot).unwrap();
        let e = gather_embeddings(&f, &[1, 4, 6], Polarity::Background).unwrap();
        for (j, &v) in [1usize, 4, 6].iter().enumerate() {
            let col = e.column(j);
            assert_eq!(col.iter().sum::<f64>(), 1.0);
            assert_eq!(col[v], 1.0);
        }

        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.5).collect();
        let f = FeatureMap::new(3, dims, data).unwrap();
        let e = gather_embeddings(&f, &[2, 3, 6], Polarity::Object).unwrap();
        let mut back = FeatureMap::zeros(3, dims);
        e.scatter_into(&mut back).unwrap();
        for &v in &[2usize, 3, 6] {
            assert_eq!(back.voxel(v), f.voxel(v));
        }
    }

    #[test]
    fn similarity_examples() {
        let dims = [1, 1, 1];
        let voxel = FeatureMap::new(2, dims, vec![1.0f64, 0.0]).unwrap();
        let same = EmbeddingSet { channels: 2, polarity: Polarity::Object, indices: vec![0, 0], data: vec![1.0, 0.0, 1.0, 0.0] };
        for choice in [COS_MEAN, COS_MAX] {
            assert!((dense_similarity(&same, &voxel, choice).unwrap().get(0) - 1.0).abs() < 1e-15);
        }
        let ortho = EmbeddingSet { channels: 2, polarity: Polarity::Object, indices: vec![0], data: vec![0.0, 1.0] };
        assert_eq!(dense_similarity(&ortho, &voxel, COS_MEAN).unwrap().get(0), 0.0);
        let two = EmbeddingSet { channels: 2, polarity: Polarity::Object, indices: vec![0, 0], data: vec![1.0, 0.0, 0.0, 1.0] };
        assert_eq!(dense_similarity(&two, &voxel, COS_MEAN).unwrap().get(0), 0.5);
        assert_eq!(dense_similarity(&two, &voxel, COS_MAX).unwrap().get(0), 1.0);
        let bad = FeatureMap::new(3, dims, vec![1.0f64, 0.0, 0.0]).unwrap();
        assert!(matches!(dense_similarity(&two, &bad, COS_MEAN), Err(Error::Shape(_))));
        // zero-norm guard
        let zero = FeatureMap::new(2, dims, vec![0.0f64, 0.0]).unwrap();
        assert_eq!(dense_similarity(&two, &zero, COS_MEAN).unwrap().get(0), 0.0);
        let euc = KernelChoice { kernel: Kernel::Euclidean, reducer: Reducer::Mean };
        assert_eq!(dense_similarity(&same, &voxel, euc).unwrap().get(0), 1.0);
    }

    fn wavy_features(c: usize, dims: [usize; 3], phase: f64) -> FeatureMap<f64> {
        let n: usize = dims.iter().product();
        FeatureMap::new(c, dims, (0..c * n).map(|i| (i as f64 * 0.71 + phase).sin()).collect()).unwrap()
    }

    #[test]
    fn ensemble_examples() {
        let dims = [6, 6, 6];
        let y = cube(dims, 1, 3);
        let f_l = wavy_features(3, dims, 0.0);
        let f_u = wavy_features(3, dims, 1.3);
        let single = ensemble_similarity(&y, &f_l, &f_u, 4, 1, 2.0, COS_MEAN, &mut rng::stream(8, &[])).unwrap();
        let (obj, bg) = &single.runs[0];
        assert_eq!(single.k_plus, dense_similarity(obj, &f_u, COS_MEAN).unwrap());
        assert_eq!(single.k_minus, dense_similarity(bg, &f_u, COS_MEAN).unwrap());

        let repeated = ensemble_from_embeddings(vec![single.runs[0].clone(); 3], &f_u, COS_MEAN).unwrap();
        for (a, b) in repeated.k_plus.data().iter().zip(single.k_plus.data()) {
            assert!((a - b).abs() < 1e-15);
        }

        // two runs whose maps are 0.2 and 0.6 at the voxel
        let q = FeatureMap::new(2, [1, 1, 1], vec![1.0f64, 0.0]).unwrap();
        let euc = KernelChoice { kernel: Kernel::Euclidean, reducer: Reducer::Mean };
        let at = |r: f64| EmbeddingSet { channels: 2, polarity: Polarity::Object, indices: vec![0], data: vec![1.0 + r, 0.0] };
        let runs = vec![(at(4.0), at(4.0)), (at(2.0 / 3.0), at(2.0 / 3.0))];
        let e = ensemble_from_embeddings(runs, &q, euc).unwrap();
        assert!((e.k_plus.get(0) - 0.4).abs() < 1e-12);
        assert!(ensemble_similarity(&y, &f_l, &f_u, 4, 0, 2.0, COS_MEAN, &mut rng::stream(8, &[])).is_err());
    }

    #[test]
    fn pseudo_label_examples() {
        let y = pseudo_label_nn(&field(vec![0.9, 0.5, 0.1]), &field(vec![0.1, 0.5, 0.2])).unwrap();
        assert_eq!(y.data(), &[1, 0, 0]);
        assert!(pseudo_label_nn(&field(vec![0.9]), &field(vec![0.1, 0.2])).is_err());
    }

    /// Voxel-by-voxel brute force: score every labeled embedding of every run.
    #[test]
    fn pseudo_labels_match_brute_force_on_small_grid() {
        let dims = [4, 4, 4];
        let y = cube(dims, 1, 2);
        let f_l = wavy_features(3, dims, 0.4);
        let f_u = wavy_features(3, dims, 2.0);
        for choice in KernelChoice::ALL {
            let e = ensemble_similarity(&y, &f_l, &f_u, 3, 2, 2.0, choice, &mut rng::stream(3, &[])).unwrap();
            let got = pseudo_label_nn(&e.k_plus, &e.k_minus).unwrap();
            for v in 0..64 {
                let q = f_u.voxel(v);
                let mut totals = [0.0; 2];
                for (obj, bg) in &e.runs {
                    for (t, set) in [obj, bg].into_iter().enumerate() {
                        let s: Vec<f64> = set
                            .indices()
                            .iter()
                            .map(|&i| {
                                let p = f_l.voxel(i);
                                match choice.kernel {
                                    Kernel::Cosine => {
                                        let dot: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
                                        dot / (p.iter().map(|a| a * a).sum::<f64>().sqrt() * q.iter().map(|a| a * a).sum::<f64>().sqrt())
                                    }
                                    Kernel::Euclidean => 1.0 / (1.0 + p.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()),
                                }
                            })
                            .collect();
                        totals[t] += match choice.reducer {
                            Reducer::Mean => s.iter().sum::<f64>() / s.len() as f64,
                            Reducer::Max => s.iter().cloned().fold(f64::MIN, f64::max),
                        };
                    }
                }
                assert_eq!(got.get(v), totals[0] > totals[1], "{choice:?} voxel {v}");
            }
        }
    }

    #[test]
    fn loss_nn_examples() {
        let dims = [1, 1, 2];
        let half = ProbMap::uniform(dims, 0.5f64);
        assert_eq!(loss_nn(&Mask3D::ones(dims), &half, &Mask3D::zeros(dims)).unwrap().value, 0.0);
        let sure = ProbMap::uniform(dims, 1.0f64);
        assert_eq!(loss_nn(&Mask3D::ones(dims), &sure, &Mask3D::ones(dims)).unwrap().value, 0.0);
        let p = ProbMap::uniform(dims, 0.75f64);
        let one = Mask3D::new(dims, vec![1, 0]).unwrap();
        let l = loss_nn(&Mask3D::zeros(dims), &p, &one).unwrap().value;
        assert!((l - 1.3863).abs() < 1e-4);
        assert!((l + 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_min_examples() {
        let l = loss_entropy_min(&field(vec![0.3; 4]), &field(vec![0.3; 4]), None).unwrap();
        assert!((l.value - LN2).abs() < 1e-12);
        let l = loss_entropy_min(&field(vec![1.0]), &field(vec![0.0]), None).unwrap();
        let p = std::f64::consts::E / (std::f64::consts::E + 1.0);
        assert!((p - 0.7311).abs() < 1e-4);
        assert!((l.value - 0.5822).abs() < 1e-4);
        let l = loss_entropy_min(&field(vec![800.0]), &field(vec![0.0]), None).unwrap();
        assert!(l.value.abs() < 1e-12 && l.value.is_finite());
        let empty = Mask3D::zeros([1, 1, 1]);
        assert_eq!(loss_entropy_min(&field(vec![1.0]), &field(vec![0.0]), Some(&empty)).unwrap().value, 0.0);
    }

    fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn entropy_min_gradient_wrt_features_matches_fd() {
        let dims = [4, 4, 4];
        let y = cube(dims, 1, 2);
        let f_l = wavy_features(3, dims, 0.4);
        let f_u = wavy_features(3, dims, 2.0);
        for choice in KernelChoice::ALL {
            let e = ensemble_similarity(&y, &f_l, &f_u, 3, 2, 2.0, choice, &mut rng::stream(3, &[])).unwrap();
            let l = loss_entropy_min(&e.k_plus, &e.k_minus, None).unwrap();
            let g = ensemble_backward(&e, &f_u, choice, &l.d_plus, &l.d_minus).unwrap();
            let value = |f: &FeatureMap<f64>| {
                let r = ensemble_from_embeddings(e.runs.clone(), f, choice).unwrap();
                loss_entropy_min(&r.k_plus, &r.k_minus, None).unwrap().value
            };
            let h = 1e-6;
            for i in 0..f_u.data().len() {
                let mut a = f_u.clone();
                a.data_mut()[i] += h;
                let mut b = f_u.clone();
                b.data_mut()[i] -= h;
                let fd = (value(&a) - value(&b)) / (2.0 * h);
                let an = g.data()[i];
                assert!(relative_error(an, fd) < 1e-4 || (an - fd).abs() < 1e-9, "{choice:?} [{i}] {an} vs {fd}");
            }
        }
    }

    proptest! {
        #[test]
        fn cosine_invariant_to_column_scale(v in proptest::collection::vec(-2.0f64..2.0, 6), q in proptest::collection::vec(-2.0f64..2.0, 6), a in 0.01f64..50.0) {
            let f = FeatureMap::new(2, [1, 1, 3], q).unwrap();
            let e = EmbeddingSet { channels: 2, polarity: Polarity::Object, indices: vec![0, 1, 2], data: v.clone() };
            let mut scaled = v;
            scaled[2] *= a;
            scaled[3] *= a;
            let es = EmbeddingSet { data: scaled, ..e.clone() };
            for choice in [COS_MEAN, COS_MAX] {
                let x = dense_similarity(&e, &f, choice).unwrap();
                let y = dense_similarity(&es, &f, choice).unwrap();
                for (p, r) in x.data().iter().zip(y.data()) {
                    prop_assert!((p - r).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn similarity_ranges(v in proptest::collection::vec(-2.0f64..2.0, 8), q in proptest::collection::vec(-2.0f64..2.0, 6)) {
            let f = FeatureMap::new(2, [1, 1, 3], q).unwrap();
            let e = EmbeddingSet { channels: 2, polarity: Polarity::Object, indices: vec![0; 4], data: v };
            for choice in KernelChoice::ALL {
                let s = dense_similarity(&e, &f, choice).unwrap();
                for &x in s.data() {
                    match choice.kernel {
                        Kernel::Cosine => prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&x)),
                        Kernel::Euclidean => prop_assert!(x > 0.0 && x <= 1.0),
                    }
                }
            }
        }

        #[test]
        fn labels_invariant_to_common_shift(kp in proptest::collection::vec(-1.0f64..1.0, 8), km in proptest::collection::vec(-1.0f64..1.0, 8), shift in -4i32..4) {
            let c = shift as f64 * 0.25;
            let a = pseudo_label_nn(&field(kp.clone()), &field(km.clone())).unwrap();
            let b = pseudo_label_nn(
                &field(kp.iter().map(|x| x + c).collect()),
                &field(km.iter().map(|x| x + c).collect()),
            ).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn entropy_min_bounded(kp in proptest::collection::vec(-50.0f64..50.0, 8), km in proptest::collection::vec(-50.0f64..50.0, 8)) {
            let l = loss_entropy_min(&field(kp), &field(km), None).unwrap().value;
            prop_assert!((0.0..=LN2 + 1e-15).contains(&l));
        }

        #[test]
        fn entropy_min_gradient_wrt_maps(kp in proptest::collection::vec(-3.0f64..3.0, 5), km in proptest::collection::vec(-3.0f64..3.0, 5)) {
            let l = loss_entropy_min(&field(kp.clone()), &field(km.clone()), None).unwrap();
            let h = 1e-6;
            for i in 0..5 {
                let mut a = kp.clone();
                a[i] += h;
                let mut b = kp.clone();
                b[i] -= h;
                let fd = (loss_entropy_min(&field(a), &field(km.clone()), None).unwrap().value
                    - loss_entropy_min(&field(b), &field(km.clone()), None).unwrap().value) / (2.0 * h);
                prop_assert!((fd - l.d_plus[i]).abs() < 1e-8);
                prop_assert_eq!(l.d_minus[i], -l.d_plus[i]);
            }
        }
    }
}
