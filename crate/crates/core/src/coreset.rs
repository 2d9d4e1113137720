//! Memory bank construction, greedy k-center subsampling, exact nearest
//! neighbor search and Voronoi assignment of the embedding coreset to the
//! distribution coreset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, shape, Error, Result};
use crate::features::FeatureMap;
use crate::tensorio::Tensor;

/// Row-major set of equal-length `f32` vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorSet {
    dim: usize,
    data: Vec<f32>,
}

impl VectorSet {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("vector dimension must be positive"));
        }
        if data.len() % dim != 0 {
            return Err(shape(format!(
                "{} values do not split into vectors of length {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let dim = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or(Error::EmptySet)?;
        let mut data = Vec::with_capacity(dim * rows.len());
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(shape(format!("row of length {} in a {dim}-d set", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, data)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            dim: self.dim,
            data,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.dim], self.data.clone()).expect("consistent dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.dims() {
            [_, d] => Self::new(d, t.data().to_vec()),
            _ => Err(shape(format!("expected an (N, D) tensor, got {:?}", t.dims()))),
        }
    }
}

/// Squared Euclidean distance accumulated in `f64`.
#[inline]
pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Where a bank vector came from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Provenance {
    pub image: u32,
    pub y: u32,
    pub x: u32,
}

/// Every position vector of every training feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub vectors: VectorSet,
    pub provenance: Vec<Provenance>,
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

pub fn build_memory_bank(maps: &[FeatureMap]) -> Result<MemoryBank> {
    let first = maps.first().ok_or(Error::EmptyTrainingSet)?;
    let dim = first.channels();
    let mut data = Vec::new();
    let mut provenance = Vec::new();
    for (i, m) in maps.iter().enumerate() {
        if m.channels() != dim {
            return Err(shape(format!(
                "feature map {i} has {} channels, expected {dim}",
                m.channels()
            )));
        }
        data.extend(m.position_major());
        for y in 0..m.height() {
            for x in 0..m.width() {
                provenance.push(Provenance {
                    image: i as u32,
                    y: y as u32,
                    x: x as u32,
                });
            }
        }
    }
    if provenance.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    Ok(MemoryBank {
        vectors: VectorSet::new(dim, data)?,
        provenance,
    })
}

/// Index of the first greedy pick for a set of `n` vectors.
pub fn first_center(n: usize, seed: u64) -> usize {
    ChaCha8Rng::seed_from_u64(seed).random_range(0..n)
}

/// Seeded Gaussian projection of every vector down to `out_dim` dimensions.
pub fn random_projection(set: &VectorSet, out_dim: usize, seed: u64) -> Result<VectorSet> {
    if out_dim == 0 {
        return Err(invalid("projection dimension must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_9e37_79b9_7f4a);
    let scale = 1.0 / (out_dim as f64).sqrt();
    let weights: Vec<f64> = (0..set.dim() * out_dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect();
    let mut data = Vec::with_capacity(set.len() * out_dim);
    for row in set.rows() {
        for k in 0..out_dim {
            let w = &weights[k * set.dim()..(k + 1) * set.dim()];
            let v: f64 = row.iter().zip(w).map(|(&a, &b)| a as f64 * b).sum();
            data.push(v as f32);
        }
    }
    VectorSet::new(out_dim, data)
}

/// Greedy k-center selection. The first index comes from [`first_center`];
/// each further pick maximizes the distance to the already selected set,
/// lowest index on ties. With `projection_dim`, distances are measured in a
/// seeded random projection of the set.
pub fn kcenter_greedy(
    set: &VectorSet,
    target: usize,
    seed: u64,
    projection_dim: Option<usize>,
) -> Result<Vec<usize>> {
    let n = set.len();
    if target == 0 || target > n {
        return Err(invalid(format!(
            "target count {target} outside 1..={n}"
        )));
    }
    let projected;
    let space = match projection_dim {
        Some(k) => {
            projected = random_projection(set, k, seed)?;
            &projected
        }
        None => set,
    };
    let mut selected = Vec::with_capacity(target);
    let mut min_dist = vec![f64::INFINITY; n];
    let mut next = first_center(n, seed);
    loop {
        selected.push(next);
        if selected.len() == target {
            break;
        }
        let center = space.row(next);
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, md) in min_dist.iter_mut().enumerate() {
            let d = sq_dist(space.row(i), center);
            if d < *md {
                *md = d;
            }
            if *md > best.0 {
                best = (*md, i);
            }
        }
        next = best.1;
    }
    Ok(selected)
}

/// Largest distance from any vector of `set` to its nearest selected one.
pub fn coverage_radius(set: &VectorSet, selected: &[usize]) -> f64 {
    set.rows()
        .map(|r| {
            selected
                .iter()
                .map(|&s| sq_dist(r, set.row(s)))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
        .sqrt()
}

/// Exact nearest neighbor `(index, distance)`, lowest index on ties.
pub fn nearest(query: &[f32], set: &VectorSet) -> Result<(usize, f64)> {
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    if query.len() != set.dim() {
        return Err(shape(format!(
            "query of length {} against {}-d set",
            query.len(),
            set.dim()
        )));
    }
    Ok(nearest_unchecked(query, set))
}

pub(crate) fn nearest_unchecked(query: &[f32], set: &VectorSet) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, r) in set.rows().enumerate() {
        let d = sq_dist(query, r);
        if d < best.1 {
            best = (i, d);
        }
    }
    (best.0, best.1.sqrt())
}

/// Subset of the memory bank used for distance evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCoreset {
    pub bank_indices: Vec<usize>,
    pub vectors: VectorSet,
    pub provenance: Vec<Provenance>,
}

impl EmbeddingCoreset {
    pub fn from_bank(bank: &MemoryBank, bank_indices: Vec<usize>) -> Result<Self> {
        check_index_subset(&bank_indices, bank.len(), "memory bank")?;
        Ok(Self {
            vectors: bank.vectors.subset(&bank_indices),
            provenance: bank_indices.iter().map(|&i| bank.provenance[i]).collect(),
            bank_indices,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Subset of the embedding coreset serving as the support of the prior.
///
/// `members[k]` is the embedding-coreset index of element `k`;
/// `voronoi[i]` is the element whose cell holds embedding vector `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionCoreset {
    pub members: Vec<usize>,
    pub voronoi: Vec<usize>,
    pub vectors: VectorSet,
}

impl DistributionCoreset {
    pub fn new(c_emb: &EmbeddingCoreset, members: Vec<usize>) -> Result<Self> {
        let voronoi = assign_voronoi(&c_emb.vectors, &members)?;
        Ok(Self {
            vectors: c_emb.vectors.subset(&members),
            members,
            voronoi,
        })
    }

    /// Rebuilds from stored parts, checking they are mutually consistent.
    pub fn from_parts(c_emb: &EmbeddingCoreset, members: Vec<usize>, voronoi: Vec<usize>) -> Result<Self> {
        check_index_subset(&members, c_emb.len(), "embedding coreset")?;
        if voronoi.len() != c_emb.len() {
            return Err(shape("voronoi map length differs from embedding coreset"));
        }
        if voronoi.iter().any(|&v| v >= members.len()) {
            return Err(invalid("voronoi entry out of range"));
        }
        if members.iter().enumerate().any(|(k, &m)| voronoi[m] != k) {
            return Err(invalid("a distribution coreset center is outside its own cell"));
        }
        Ok(Self {
            vectors: c_emb.vectors.subset(&members),
            members,
            voronoi,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Embedding-coreset indices grouped by cell.
    pub fn cells(&self) -> Vec<Vec<usize>> {
        let mut cells = vec![Vec::new(); self.members.len()];
        for (i, &c) in self.voronoi.iter().enumerate() {
            cells[c].push(i);
        }
        cells
    }
}

fn check_index_subset(indices: &[usize], n: usize, what: &str) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut seen = vec![false; n];
    for &i in indices {
        if i >= n {
            return Err(invalid(format!("index {i} outside {what} of size {n}")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(invalid(format!("index {i} repeated in {what} subset")));
        }
    }
    Ok(())
}

/// Maps every vector of `c_emb` to the nearest element of the subset given by
/// `members` (positions into `c_emb`). Centers always map to themselves.
pub fn assign_voronoi(c_emb: &VectorSet, members: &[usize]) -> Result<Vec<usize>> {
    check_index_subset(members, c_emb.len(), "embedding coreset")?;
    let centers = c_emb.subset(members);
    let mut voronoi: Vec<usize> = c_emb
        .rows()
        .map(|r| nearest_unchecked(r, &centers).0)
        .collect();
    for (k, &m) in members.iter().enumerate() {
        voronoi[m] = k;
    }
    Ok(voronoi)
}
