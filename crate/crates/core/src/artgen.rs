//! Artificial image-token maps built from category words alone.
//!
//! A sample draws a coarse `u × v` grid of category indices (u, v uniform in
//! `1..=S`), then upscales it to the backbone resolution `H × W` with
//! nearest-neighbor indexing. The upscaled map is both the token map fed to the
//! encoder and the segmentation target.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{mix_seed, seed_rng};
use crate::scalar::Scalar;
use crate::vocab::{EmbeddingMatrix, SegCategorySet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArtificialGridSpec {
    /// Largest side of the coarse grid.
    pub s: usize,
    pub h: usize,
    pub w: usize,
}

impl ArtificialGridSpec {
    pub fn new(s: usize, h: usize, w: usize) -> Result<Self> {
        if s == 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "grid spec needs S, H, W >= 1 (got {s}, {h}, {w})"
            )));
        }
        Ok(ArtificialGridSpec { s, h, w })
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridSample {
    pub u: usize,
    pub v: usize,
    pub coarse: Array2<u32>,
    /// `H × W` upscale of `coarse`.
    pub map: Array2<u32>,
    pub seed: u64,
}

/// `out[i][j] = coarse[i·u/H][j·v/W]` (integer floor division).
pub fn nn_upscale<E: Copy>(coarse: ArrayView2<'_, E>, h: usize, w: usize) -> Result<Array2<E>> {
    let (u, v) = coarse.dim();
    if u == 0 || v == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "nearest-neighbor upscale of {u}x{v} to {h}x{w}: sizes must be positive"
        )));
    }
    Ok(Array2::from_shape_fn((h, w), |(i, j)| coarse[[i * u / h, j * v / w]]))
}

/// Draws one artificial sample from its own seed.
pub fn sample_grid(spec: &ArtificialGridSpec, m: usize, seed: u64) -> Result<GridSample> {
    if m == 0 {
        return Err(Error::invalid("sampling needs at least one category"));
    }
    let mut rng = seed_rng(seed);
    let (u, v, coarse) = draw_coarse(spec, &mut rng, |r| r.random_range(0..m as u32));
    let map = nn_upscale(coarse.view(), spec.h, spec.w)?;
    Ok(GridSample {
        u,
        v,
        coarse,
        map,
        seed,
    })
}

/// Sample `index` of the stream rooted at `base_seed`.
pub fn sample_stream(spec: &ArtificialGridSpec, m: usize, base_seed: u64, index: u64) -> Result<GridSample> {
    sample_grid(spec, m, mix_seed(base_seed, index))
}

fn draw_coarse<R: Rng, E>(
    spec: &ArtificialGridSpec,
    rng: &mut R,
    mut cell: impl FnMut(&mut R) -> E,
) -> (usize, usize, Array2<E>) {
    // rand's bounded sampling is rejection based (widening multiply), hence unbiased.
    let u = rng.random_range(1..=spec.s);
    let v = rng.random_range(1..=spec.s);
    let cells: Vec<E> = (0..u * v).map(|_| cell(rng)).collect();
    let coarse = Array2::from_shape_vec((u, v), cells).expect("u*v cells");
    (u, v, coarse)
}

/// Coarse category index → fine categories (as embedding row ids).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryHierarchy {
    mapping: Vec<Vec<u32>>,
}

impl CategoryHierarchy {
    pub fn new(mapping: Vec<Vec<u32>>) -> Result<Self> {
        if mapping.is_empty() {
            return Err(Error::invalid("hierarchy has no coarse categories"));
        }
        if let Some(i) = mapping.iter().position(Vec::is_empty) {
            return Err(Error::invalid(format!("coarse category {i} has no fine categories")));
        }
        Ok(CategoryHierarchy { mapping })
    }

    pub fn coarse_count(&self) -> usize {
        self.mapping.len()
    }

    pub fn fine(&self, coarse: usize) -> &[u32] {
        &self.mapping[coarse]
    }

    /// Checks every fine id against the embedding row count.
    pub fn validate_rows(&self, rows: usize) -> Result<()> {
        for (c, fine) in self.mapping.iter().enumerate() {
            if let Some(&bad) = fine.iter().find(|&&f| f as usize >= rows) {
                return Err(Error::invalid(format!(
                    "coarse category {c}: fine id {bad} is not an embedding row"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HierarchicalSample {
    pub u: usize,
    pub v: usize,
    /// Coarse category per cell of the `u × v` grid.
    pub coarse_targets: Array2<u32>,
    /// Fine embedding row per cell of the `u × v` grid.
    pub coarse_tokens: Array2<u32>,
    /// `H × W` upscaled targets (coarse indices).
    pub targets: Array2<u32>,
    /// `H × W` upscaled token rows (fine ids).
    pub tokens: Array2<u32>,
    pub seed: u64,
}

/// Each cell draws a coarse category, then one of its fine words.
pub fn hierarchical_sample(
    spec: &ArtificialGridSpec,
    hierarchy: &CategoryHierarchy,
    seed: u64,
) -> Result<HierarchicalSample> {
    let mut rng = seed_rng(seed);
    let (u, v, cells) = draw_coarse(spec, &mut rng, |r| {
        let coarse = r.random_range(0..hierarchy.coarse_count());
        let fine = hierarchy.fine(coarse);
        (coarse as u32, fine[r.random_range(0..fine.len())])
    });
    let coarse_targets = cells.mapv(|(c, _)| c);
    let coarse_tokens = cells.mapv(|(_, f)| f);
    let targets = nn_upscale(coarse_targets.view(), spec.h, spec.w)?;
    let tokens = nn_upscale(coarse_tokens.view(), spec.h, spec.w)?;
    Ok(HierarchicalSample {
        u,
        v,
        coarse_targets,
        coarse_tokens,
        targets,
        tokens,
        seed,
    })
}

/// Embedding-row id per position (row-major flatten of the map).
pub fn token_rows(map: &Array2<u32>, cats: &SegCategorySet) -> Result<Vec<u32>> {
    map.iter()
        .map(|&c| {
            cats.merged_ids
                .get(c as usize)
                .copied()
                .ok_or_else(|| Error::invalid(format!("category index {c} out of range for {} categories", cats.len())))
        })
        .collect()
}

/// Artificial token embeddings `(H·W) × D` and targets `H·W`, both row-major.
/// The targets are the map itself.
pub fn to_training_pair<T: Scalar>(
    sample: &GridSample,
    embedding: &EmbeddingMatrix<T>,
    cats: &SegCategorySet,
) -> Result<(Array2<T>, Vec<u32>)> {
    let rows = token_rows(&sample.map, cats)?;
    let tokens = embedding.lookup(&rows)?;
    Ok((tokens, sample.map.iter().copied().collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_rng as rng_for;
    use crate::vocab::{register_categories, Vocabulary};

    fn brute_upscale(coarse: &Array2<u32>, h: usize, w: usize) -> Array2<u32> {
        let (u, v) = coarse.dim();
        let mut out = Array2::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                let si = ((i * u) as f64 / h as f64).floor() as usize;
                let sj = ((j * v) as f64 / w as f64).floor() as usize;
                out[[i, j]] = coarse[[si, sj]];
            }
        }
        out
    }

    #[test]
    fn upscale_matches_formula_exhaustively() {
        for u in 1..=8 {
            for v in 1..=8 {
                let coarse = Array2::from_shape_fn((u, v), |(i, j)| (i * v + j) as u32);
                for h in 1..=8 {
                    for w in 1..=8 {
                        let got = nn_upscale(coarse.view(), h, w).unwrap();
                        assert_eq!(got, brute_upscale(&coarse, h, w), "{u}x{v} -> {h}x{w}");
                    }
                }
            }
        }
    }

    #[test]
    fn upscale_special_cases() {
        let one = Array2::from_elem((1, 1), 5u32);
        assert!(nn_upscale(one.view(), 3, 4).unwrap().iter().all(|&x| x == 5));
        let g = Array2::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as u32);
        assert_eq!(nn_upscale(g.view(), 3, 5).unwrap(), g);
        let two = Array2::from_shape_vec((2, 2), vec![0u32, 1, 2, 3]).unwrap();
        let four = nn_upscale(two.view(), 4, 4).unwrap();
        assert_eq!(
            four,
            Array2::from_shape_vec((4, 4), vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]).unwrap()
        );
        let empty = Array2::<u32>::zeros((0, 2));
        assert!(nn_upscale(empty.view(), 2, 2).is_err());
        assert!(nn_upscale(two.view(), 0, 2).is_err());
    }

    #[test]
    fn upscale_regions_are_rectangles() {
        for u in 1..=8 {
            for v in 1..=8 {
                let coarse = Array2::from_shape_fn((u, v), |(i, j)| (i * v + j) as u32);
                for h in 1..=8 {
                    for w in 1..=8 {
                        let map = nn_upscale(coarse.view(), h, w).unwrap();
                        for cell in 0..(u * v) as u32 {
                            let hits: Vec<(usize, usize)> =
                                map.indexed_iter().filter(|(_, &x)| x == cell).map(|(p, _)| p).collect();
                            if hits.is_empty() {
                                continue;
                            }
                            let r0 = hits.iter().map(|p| p.0).min().unwrap();
                            let r1 = hits.iter().map(|p| p.0).max().unwrap();
                            let c0 = hits.iter().map(|p| p.1).min().unwrap();
                            let c1 = hits.iter().map(|p| p.1).max().unwrap();
                            assert_eq!(hits.len(), (r1 - r0 + 1) * (c1 - c0 + 1));
                            let (rh, rw) = (r1 - r0 + 1, c1 - c0 + 1);
                            assert!(rh + 1 >= h.div_ceil(u) && rh <= h.div_ceil(u) + 1);
                            assert!(rw + 1 >= w.div_ceil(v) && rw <= w.div_ceil(v) + 1);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn forced_sizes() {
        let spec = ArtificialGridSpec::new(1, 5, 7).unwrap();
        let s = sample_grid(&spec, 4, 9).unwrap();
        assert_eq!((s.u, s.v), (1, 1));
        let c = s.map[[0, 0]];
        assert!(s.map.iter().all(|&x| x == c));

        let spec = ArtificialGridSpec::new(6, 8, 8).unwrap();
        for seed in 0..50 {
            let s = sample_grid(&spec, 1, seed).unwrap();
            assert!(s.map.iter().all(|&x| x == 0));
        }
        assert!(sample_grid(&spec, 0, 1).is_err());
        assert!(ArtificialGridSpec::new(0, 1, 1).is_err());
    }

    #[test]
    fn sample_invariants_and_determinism() {
        let spec = ArtificialGridSpec::new(5, 6, 9).unwrap();
        for i in 0..200 {
            let a = sample_stream(&spec, 7, 42, i).unwrap();
            assert_eq!(a, sample_stream(&spec, 7, 42, i).unwrap());
            assert!((1..=5).contains(&a.u) && (1..=5).contains(&a.v));
            assert_eq!(a.map, nn_upscale(a.coarse.view(), 6, 9).unwrap());
            assert!(a.map.iter().all(|x| a.coarse.iter().any(|c| c == x)));
            assert!(a.coarse.iter().all(|&c| c < 7));
        }
    }

    #[test]
    fn hierarchy_singleton_and_membership() {
        let spec = ArtificialGridSpec::new(4, 4, 4).unwrap();
        let h = CategoryHierarchy::new(vec![vec![7]]).unwrap();
        let s = hierarchical_sample(&spec, &h, 1).unwrap();
        assert!(s.tokens.iter().all(|&f| f == 7));
        assert!(s.targets.iter().all(|&c| c == 0));

        let h = CategoryHierarchy::new(vec![vec![1, 2, 3], vec![4], vec![5, 6]]).unwrap();
        let mut cells = 0;
        let mut seed = 0;
        while cells < 10_000 {
            let s = hierarchical_sample(&spec, &h, seed).unwrap();
            for (c, f) in s.coarse_targets.iter().zip(s.coarse_tokens.iter()) {
                assert!(h.fine(*c as usize).contains(f));
                cells += 1;
            }
            seed += 1;
        }
        assert!(CategoryHierarchy::new(vec![vec![]]).is_err());
        assert!(CategoryHierarchy::new(vec![]).is_err());
        assert!(h.validate_rows(6).is_err());
        assert!(h.validate_rows(7).is_ok());
    }

    #[test]
    fn training_pair_lookup() {
        let vocab = Vocabulary::builtin();
        let mut e = EmbeddingMatrix::<f32>::init(vocab.len(), 5, 0.02, &mut rng_for(2));
        let cats = register_categories(&["giraffe", "grass", "sky"], &vocab, &mut e).unwrap();
        let spec = ArtificialGridSpec::new(4, 4, 4).unwrap();
        let sample = sample_grid(&spec, 3, 17).unwrap();
        let (tokens, targets) = to_training_pair(&sample, &e, &cats).unwrap();
        assert_eq!((tokens.dim(), targets.len()), ((16, 5), 16));
        for (k, &t) in targets.iter().enumerate() {
            let c = sample.map[[k / 4, k % 4]];
            assert_eq!(t, c);
            assert_eq!(tokens.row(k), e.row(cats.merged_ids[c as usize]));
        }

        let spec = ArtificialGridSpec::new(1, 1, 1).unwrap();
        let s = sample_grid(&spec, 1, 0).unwrap();
        let (tokens, targets) = to_training_pair(&s, &e, &cats).unwrap();
        assert_eq!((tokens.nrows(), targets.len()), (1, 1));
        assert_eq!(tokens.row(0), e.row(cats.merged_ids[0]));

        let bad = GridSample {
            map: Array2::from_elem((1, 1), 9),
            ..s
        };
        assert!(to_training_pair(&bad, &e, &cats).is_err());
    }
}
