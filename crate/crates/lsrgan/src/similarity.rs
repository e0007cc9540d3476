//! Cosine similarity, class centroids and top-n_c semantic neighbor search.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, BTreeMap};

use crate::autodiff::Tensor;
use crate::data::{ClassId, SemanticTable};
use crate::error::{Error, Result};

/// Cosine similarity of two nonzero vectors, in [-1, 1].
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_sim",
            detail: format!("{} vs {}", a.len(), b.len()),
        });
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument(
            "cosine similarity is undefined for a zero vector".into(),
        ));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Per-class mean feature vectors.
#[derive(Debug, Clone)]
pub struct ClassCentroids {
    class_ids: Vec<ClassId>,
    centroids: Tensor,
}

impl ClassCentroids {
    pub fn new(class_ids: Vec<ClassId>, centroids: Tensor) -> Result<Self> {
        if class_ids.len() != centroids.rows() {
            return Err(Error::ShapeMismatch {
                op: "class_centroids",
                detail: format!("{} ids vs {} rows", class_ids.len(), centroids.rows()),
            });
        }
        Ok(ClassCentroids {
            class_ids,
            centroids,
        })
    }

    pub fn class_ids(&self) -> &[ClassId] {
        &self.class_ids
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn get(&self, class: ClassId) -> Option<&[f64]> {
        self.class_ids
            .iter()
            .position(|&c| c == class)
            .map(|i| self.centroids.row(i))
    }

    pub fn matrix(&self) -> &Tensor {
        &self.centroids
    }
}

/// Arithmetic mean of the feature rows of each listed class.
/// Accumulates in sample order, so the result is bit-identical to a plain
/// per-class sum-then-divide.
pub fn class_means(
    features: &Tensor,
    labels: &[ClassId],
    class_list: &[ClassId],
) -> Result<ClassCentroids> {
    if features.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "class_means",
            detail: format!("{} rows vs {} labels", features.rows(), labels.len()),
        });
    }
    let dim = features.cols();
    let mut sums: BTreeMap<ClassId, (Vec<f64>, usize)> = class_list
        .iter()
        .map(|&c| (c, (vec![0.0; dim], 0)))
        .collect();
    for (i, &label) in labels.iter().enumerate() {
        if let Some((acc, count)) = sums.get_mut(&label) {
            for (a, &v) in acc.iter_mut().zip(features.row(i)) {
                *a += v;
            }
            *count += 1;
        }
    }
    let mut rows = Vec::with_capacity(class_list.len());
    for &c in class_list {
        let (acc, count) = &sums[&c];
        if *count == 0 {
            return Err(Error::InvalidArgument(format!(
                "class {c} has no samples; cannot form a centroid"
            )));
        }
        rows.push(acc.iter().map(|v| v / *count as f64).collect::<Vec<_>>());
    }
    ClassCentroids::new(class_list.to_vec(), Tensor::from_rows(&rows)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub class_id: ClassId,
    pub similarity: f64,
}

/// For each query class, the pool classes with the highest semantic
/// similarity, sorted descending (ties broken by lower class id).
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    n_c: usize,
    entries: BTreeMap<ClassId, Vec<Neighbor>>,
}

impl NeighborIndex {
    pub fn n_c(&self) -> usize {
        self.n_c
    }

    pub fn neighbors(&self, query: ClassId) -> Option<&[Neighbor]> {
        self.entries.get(&query).map(|v| v.as_slice())
    }

    pub fn queries(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.entries.keys().copied()
    }
}

/// Heap entry ordered so the weakest candidate (lowest similarity, ties by
/// higher class id) is the minimum.
#[derive(Debug, PartialEq)]
struct HeapEntry {
    sim: f64,
    class_id: ClassId,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.sim
            .total_cmp(&other.sim)
            .then_with(|| other.class_id.cmp(&self.class_id))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Selects the top-n_c most similar pool classes for every query class,
/// keeping a bounded min-heap per query (O(n log n_c) per class). A seen
/// query that appears in the pool never lists itself. When n_c exceeds the
/// pool a warning is logged and the pool size is used.
pub fn build_neighbor_index(
    table: &SemanticTable,
    queries: &[ClassId],
    pool: &[ClassId],
    n_c: usize,
) -> Result<NeighborIndex> {
    if n_c == 0 {
        return Err(Error::InvalidArgument("n_c must be at least 1".into()));
    }
    if pool.is_empty() {
        return Err(Error::InvalidArgument("neighbor pool is empty".into()));
    }
    let effective = if n_c > pool.len() {
        log::warn!(
            "n_c={} exceeds pool size {}; clamping to the pool size",
            n_c,
            pool.len()
        );
        pool.len()
    } else {
        n_c
    };
    let mut entries = BTreeMap::new();
    for &q in queries {
        let qv = table.vector(q)?;
        let mut heap: BinaryHeap<Reverse<HeapEntry>> = BinaryHeap::with_capacity(effective + 1);
        for &p in pool {
            if p == q {
                continue;
            }
            let sim = cosine_sim(qv, table.vector(p)?)?;
            let entry = HeapEntry { sim, class_id: p };
            if heap.len() < effective {
                heap.push(Reverse(entry));
            } else if let Some(Reverse(worst)) = heap.peek() {
                if entry > *worst {
                    heap.pop();
                    heap.push(Reverse(entry));
                }
            }
        }
        let mut selected: Vec<Neighbor> = heap
            .into_iter()
            .map(|Reverse(e)| Neighbor {
                class_id: e.class_id,
                similarity: e.sim,
            })
            .collect();
        selected.sort_by(|a, b| {
            b.similarity
                .total_cmp(&a.similarity)
                .then_with(|| a.class_id.cmp(&b.class_id))
        });
        entries.insert(q, selected);
    }
    Ok(NeighborIndex {
        n_c: effective,
        entries,
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    pearson(&ra, &rb)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SemanticMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn table_from_rows(rows: &[Vec<f64>]) -> SemanticTable {
        SemanticTable::new(SemanticMode::Attributes, Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn cosine_identity_and_orthogonality() {
        let v = [0.3, -1.2, 4.0];
        assert!((cosine_sim(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-12);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn cosine_hand_value() {
        let got = cosine_sim(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((got - 0.707_106_78).abs() < 1e-8);
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 2.0]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn cosine_scale_invariance(
            a in proptest::collection::vec(-1.0f64..1.0, 6),
            b in proptest::collection::vec(-1.0f64..1.0, 6),
            alpha in 0.01f64..100.0,
        ) {
            proptest::prop_assume!(a.iter().any(|&v| v != 0.0));
            proptest::prop_assume!(b.iter().any(|&v| v != 0.0));
            let scaled: Vec<f64> = a.iter().map(|x| x * alpha).collect();
            let c1 = cosine_sim(&a, &b).unwrap();
            let c2 = cosine_sim(&scaled, &b).unwrap();
            proptest::prop_assert!((c1 - c2).abs() < 1e-12);
            proptest::prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c1));
        }
    }

    #[test]
    fn class_means_basics() {
        let feats = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 2.0], vec![5.0, -1.0]]).unwrap();
        let labels = vec![ClassId(1), ClassId(1), ClassId(2)];
        let means = class_means(&feats, &labels, &[ClassId(1), ClassId(2)]).unwrap();
        assert_eq!(means.get(ClassId(1)).unwrap(), &[1.0, 1.0]);
        // single sample: centroid equals the sample
        assert_eq!(means.get(ClassId(2)).unwrap(), &[5.0, -1.0]);
    }

    #[test]
    fn class_means_match_brute_force_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let labels: Vec<ClassId> = (0..20).map(|_| ClassId(rng.gen_range(1..=3))).collect();
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let feats = Tensor::from_rows(&rows).unwrap();
        let classes = [ClassId(1), ClassId(2), ClassId(3)];
        let means = class_means(&feats, &labels, &classes).unwrap();
        for &c in &classes {
            let member_rows: Vec<&Vec<f64>> = labels
                .iter()
                .zip(&rows)
                .filter(|(l, _)| **l == c)
                .map(|(_, r)| r)
                .collect();
            for j in 0..5 {
                let sum: f64 = member_rows.iter().map(|r| r[j]).sum();
                let expect = sum / member_rows.len() as f64;
                assert_eq!(means.get(c).unwrap()[j].to_bits(), expect.to_bits());
            }
        }
    }

    #[test]
    fn class_means_reject_empty_class() {
        let feats = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let err = class_means(&feats, &[ClassId(1)], &[ClassId(1), ClassId(9)]).unwrap_err();
        assert!(err.to_string().contains('9'));
    }

    #[test]
    fn neighbor_index_hand_case() {
        // pool semantics [1,0], [0,1], [0.9,0.1]; query [1,0]; n_c = 2.
        let table = table_from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.9, 0.1],
            vec![1.0, 0.0],
        ]);
        let pool = [ClassId(1), ClassId(2), ClassId(3)];
        let idx = build_neighbor_index(&table, &[ClassId(4)], &pool, 2).unwrap();
        let ns = idx.neighbors(ClassId(4)).unwrap();
        assert_eq!(ns.len(), 2);
        assert_eq!(ns[0].class_id, ClassId(1));
        assert!((ns[0].similarity - 1.0).abs() < 1e-12);
        assert_eq!(ns[1].class_id, ClassId(3));
    }

    #[test]
    fn seen_query_excludes_itself_and_full_pool_case() {
        let table = table_from_rows(&[vec![1.0, 0.1], vec![0.2, 1.0], vec![0.5, 0.5]]);
        let pool = [ClassId(1), ClassId(2), ClassId(3)];
        let idx = build_neighbor_index(&table, &pool, &pool, 3).unwrap();
        for &q in &pool {
            let ns = idx.neighbors(q).unwrap();
            assert_eq!(ns.len(), 2, "self must be excluded");
            assert!(ns.iter().all(|n| n.class_id != q));
            assert!(ns[0].similarity >= ns[1].similarity);
        }
    }

    #[test]
    fn heap_selection_matches_full_sort() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..30 {
            let rows: Vec<Vec<f64>> = (0..50)
                .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0) + 0.01).collect())
                .collect();
            let table = table_from_rows(&rows);
            let pool: Vec<ClassId> = (1..=50).map(ClassId).collect();
            let idx = build_neighbor_index(&table, &pool, &pool, 5).unwrap();
            for &q in &pool {
                let mut all: Vec<Neighbor> = pool
                    .iter()
                    .filter(|&&p| p != q)
                    .map(|&p| Neighbor {
                        class_id: p,
                        similarity: cosine_sim(table.vector(q).unwrap(), table.vector(p).unwrap())
                            .unwrap(),
                    })
                    .collect();
                all.sort_by(|a, b| {
                    b.similarity
                        .total_cmp(&a.similarity)
                        .then_with(|| a.class_id.cmp(&b.class_id))
                });
                let expect: Vec<ClassId> = all[..5].iter().map(|n| n.class_id).collect();
                let got: Vec<ClassId> = idx
                    .neighbors(q)
                    .unwrap()
                    .iter()
                    .map(|n| n.class_id)
                    .collect();
                assert_eq!(got, expect);
            }
        }
    }

    #[test]
    fn index_invariant_under_per_class_rescaling() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0) + 0.02).collect())
            .collect();
        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let alpha = rng.gen_range(0.1..10.0);
                r.iter().map(|v| v * alpha).collect()
            })
            .collect();
        let pool: Vec<ClassId> = (1..=10).map(ClassId).collect();
        let i1 = build_neighbor_index(&table_from_rows(&rows), &pool, &pool, 3).unwrap();
        let i2 = build_neighbor_index(&table_from_rows(&scaled), &pool, &pool, 3).unwrap();
        for &q in &pool {
            let a: Vec<ClassId> = i1.neighbors(q).unwrap().iter().map(|n| n.class_id).collect();
            let b: Vec<ClassId> = i2.neighbors(q).unwrap().iter().map(|n| n.class_id).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn n_c_larger_than_pool_clamps() {
        let table = table_from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let idx = build_neighbor_index(
            &table,
            &[ClassId(1)],
            &[ClassId(1), ClassId(2)],
            10,
        )
        .unwrap();
        assert_eq!(idx.n_c(), 2);
        assert_eq!(idx.neighbors(ClassId(1)).unwrap().len(), 1);
    }

    #[test]
    fn spearman_monotone_and_reversed() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [10.0, 20.0, 25.0, 90.0];
        assert!((spearman(&a, &b) - 1.0).abs() < 1e-12);
        let c = [4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&a, &c) + 1.0).abs() < 1e-12);
    }
}
