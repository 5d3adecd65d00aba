//! The memory bank and its read, write, and triplet-separation operations.
//!
//! Read path (differentiable, recorded on a [`Graph`]): each feature row is
//! cosine-matched against every item, the similarities are softmaxed into
//! addressing weights, and the feature is refined by the weighted sum of
//! all items scaled by the trainable scalar `gamma` on a residual branch.
//!
//! Write path (plain arithmetic, training only): each item is updated from
//! the features whose argmax item it is, with softmax update weights over
//! all features renormalized by the in-set maximum, then L2-renormalized.
//! Memory items are non-gradient state by default; gradients stop at the
//! bank unless it is constructed with `trainable_items`.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{l2_norm, Graph, NORM_EPS};
use crate::tensor::Tensor;

/// Bank of `K` prototype vectors plus the read scale `gamma`.
pub struct MemoryBank {
    items: Tensor,
    gamma: Tensor,
    trainable_items: bool,
}

impl MemoryBank {
    /// Random bank: `k` rows drawn from an isotropic standard normal and
    /// unit-normalized. `k < 2` is rejected here so the triplet loss always
    /// has a first and second most similar item.
    pub fn new(
        k: usize,
        c: usize,
        gamma0: f64,
        trainable_items: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<MemoryBank> {
        if k < 2 {
            return Err(Error::InvalidArgument {
                op: "memory_bank",
                msg: format!("need at least 2 memory items, got {k}"),
            });
        }
        if c == 0 {
            return Err(Error::InvalidArgument {
                op: "memory_bank",
                msg: "channel dimension must be >= 1".into(),
            });
        }
        let mut data = vec![0.0; k * c];
        for row in data.chunks_mut(c) {
            loop {
                for v in row.iter_mut() {
                    *v = StandardNormal.sample(rng);
                }
                let norm = l2_norm(row);
                if norm >= NORM_EPS {
                    row.iter_mut().for_each(|v| *v /= norm);
                    break;
                }
            }
        }
        MemoryBank::from_parts(data, k, c, gamma0, trainable_items)
    }

    /// Rebuild a bank from serialized state. Item rows are taken as stored.
    pub fn from_parts(
        items: Vec<f64>,
        k: usize,
        c: usize,
        gamma: f64,
        trainable_items: bool,
    ) -> Result<MemoryBank> {
        if k < 2 {
            return Err(Error::InvalidArgument {
                op: "memory_bank",
                msg: format!("need at least 2 memory items, got {k}"),
            });
        }
        if items.len() != k * c {
            return Err(Error::InvalidArgument {
                op: "memory_bank",
                msg: format!("expected {k}×{c} item values, got {}", items.len()),
            });
        }
        let items = if trainable_items {
            Tensor::param([k, c], items)
        } else {
            Tensor::new([k, c], items)
        };
        Ok(MemoryBank {
            items,
            gamma: Tensor::param([1], vec![gamma]),
            trainable_items,
        })
    }

    /// Build a bank around existing tensors (checkpoint restore, gradient
    /// checks). Items are trainable iff the tensor tracks gradients.
    pub fn from_tensors(items: Tensor, gamma: Tensor) -> Result<MemoryBank> {
        if items.shape().len() != 2 || items.shape()[0] < 2 {
            return Err(Error::InvalidArgument {
                op: "memory_bank",
                msg: format!("items must be K×C with K >= 2, got {:?}", items.shape()),
            });
        }
        if !gamma.is_scalar() {
            return Err(Error::InvalidArgument {
                op: "memory_bank",
                msg: format!("gamma must be a scalar, got {:?}", gamma.shape()),
            });
        }
        let trainable_items = items.requires_grad();
        Ok(MemoryBank {
            items,
            gamma,
            trainable_items,
        })
    }

    pub fn k(&self) -> usize {
        self.items.shape()[0]
    }

    pub fn c(&self) -> usize {
        self.items.shape()[1]
    }

    pub fn items(&self) -> &Tensor {
        &self.items
    }

    pub fn items_mut(&mut self) -> &mut Tensor {
        &mut self.items
    }

    pub fn gamma(&self) -> &Tensor {
        &self.gamma
    }

    pub fn gamma_mut(&mut self) -> &mut Tensor {
        &mut self.gamma
    }

    pub fn gamma_value(&self) -> f64 {
        self.gamma.item()
    }

    pub fn trainable_items(&self) -> bool {
        self.trainable_items
    }

    /// Update items from a batch of detached features: argmax partition,
    /// max-renormalized softmax update weights, weighted sum, then L2
    /// renormalization. Items whose partition set is empty are unchanged.
    /// Training-phase only by contract; evaluation must not call this.
    pub fn write(&mut self, features: &FeatureMatrix) -> Result<()> {
        let (k, c) = (self.k(), self.c());
        if features.c() != c {
            return Err(Error::ShapeMismatch {
                op: "write",
                lhs: vec![features.n(), features.c()],
                rhs: vec![k, c],
            });
        }
        let sims = cosine_similarities(features, self.items.data(), k)?;
        let part = partition(&sims, features.n(), k);
        let upd = update_weights_from_similarities(&sims, features.n(), k, &part);

        let mut new_items = self.items.data().to_vec();
        for j in 0..k {
            if part.sets[j].is_empty() {
                continue;
            }
            let row = &mut new_items[j * c..(j + 1) * c];
            for (&i, &w) in part.sets[j].iter().zip(&upd.weights[j]) {
                let f = features.row(i);
                for (r, &fv) in row.iter_mut().zip(f) {
                    *r += w * fv;
                }
            }
            let norm = l2_norm(row);
            if norm < NORM_EPS {
                return Err(Error::DegenerateVector {
                    op: "write",
                    row: j,
                    eps: NORM_EPS,
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        self.items = if self.trainable_items {
            Tensor::param([k, c], new_items)
        } else {
            Tensor::new([k, c], new_items)
        };
        Ok(())
    }
}

/// Feature map flattened to one feature vector per spatial position,
/// remembering the originating `C×H×W` shape. Participates in the graph.
pub struct FlatFeatures {
    tensor: Tensor,
    origin: (usize, usize, usize),
}

impl FlatFeatures {
    /// Flatten `C×H×W` into `N×C` with `N = H·W`, on the graph.
    pub fn from_map(g: &mut Graph, map: &Tensor) -> Result<FlatFeatures> {
        if map.shape().len() != 3 {
            return Err(Error::InvalidArgument {
                op: "flat_features",
                msg: format!("expected C×H×W, got {:?}", map.shape()),
            });
        }
        let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
        let as_rows = g.reshape(map, [c, h * w])?;
        let tensor = g.transpose(&as_rows)?;
        Ok(FlatFeatures {
            tensor,
            origin: (c, h, w),
        })
    }

    /// Wrap an existing `N×C` matrix (origin degenerates to `C×N×1`).
    pub fn from_matrix(tensor: Tensor) -> Result<FlatFeatures> {
        if tensor.shape().len() != 2 {
            return Err(Error::InvalidArgument {
                op: "flat_features",
                msg: format!("expected N×C, got {:?}", tensor.shape()),
            });
        }
        let (n, c) = (tensor.shape()[0], tensor.shape()[1]);
        Ok(FlatFeatures {
            tensor,
            origin: (c, n, 1),
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn n(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn c(&self) -> usize {
        self.tensor.shape()[1]
    }

    /// Inverse of [`FlatFeatures::from_map`] for a same-shape `N×C` tensor.
    pub fn unflatten(&self, g: &mut Graph, rows: &Tensor) -> Result<Tensor> {
        let (c, h, w) = self.origin;
        let t = g.transpose(rows)?;
        g.reshape(&t, [c, h, w])
    }

    /// Copy out of the graph for the write path.
    pub fn detach(&self) -> FeatureMatrix {
        FeatureMatrix {
            data: self.tensor.data().to_vec(),
            n: self.n(),
            c: self.c(),
        }
    }
}

/// Detached `N×C` feature rows; the write path operates on these.
#[derive(Clone)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    n: usize,
    c: usize,
}

impl FeatureMatrix {
    pub fn new(data: Vec<f64>, n: usize, c: usize) -> Result<FeatureMatrix> {
        if data.len() != n * c || n == 0 || c == 0 {
            return Err(Error::InvalidArgument {
                op: "feature_matrix",
                msg: format!("{n}×{c} does not describe {} values", data.len()),
            });
        }
        Ok(FeatureMatrix { data, n, c })
    }

    /// Pool several feature matrices row-wise (batch pooling for write).
    pub fn concat(parts: &[FeatureMatrix]) -> Result<FeatureMatrix> {
        let c = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument {
                op: "feature_matrix",
                msg: "cannot pool an empty list".into(),
            })?
            .c;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.c != c {
                return Err(Error::ShapeMismatch {
                    op: "feature_matrix",
                    lhs: vec![parts[0].n, c],
                    rhs: vec![p.n, p.c],
                });
            }
            data.extend_from_slice(&p.data);
            n += p.n;
        }
        FeatureMatrix::new(data, n, c)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.c..(i + 1) * self.c]
    }
}

/// Similarities and row-stochastic addressing weights, both `N×K`.
#[derive(Debug)]
pub struct Addressing {
    pub similarities: Tensor,
    pub weights: Tensor,
}

/// Cosine similarities of every feature against every item, softmaxed per
/// feature into addressing weights. Rows of either side with norm below
/// the guard are rejected, identifying the offending row.
pub fn address(g: &mut Graph, features: &FlatFeatures, bank: &MemoryBank) -> Result<Addressing> {
    if features.c() != bank.c() {
        return Err(Error::ShapeMismatch {
            op: "address",
            lhs: vec![features.n(), features.c()],
            rhs: vec![bank.k(), bank.c()],
        });
    }
    let fhat = g.l2_normalize(features.tensor()).map_err(|e| relabel(e, "address(feature)"))?;
    let mhat = g.l2_normalize(bank.items()).map_err(|e| relabel(e, "address(item)"))?;
    let similarities = g.matmul_nt(&fhat, &mhat)?;
    let weights = g.softmax(&similarities)?;
    Ok(Addressing {
        similarities,
        weights,
    })
}

fn relabel(e: Error, op: &'static str) -> Error {
    match e {
        Error::DegenerateVector { row, eps, .. } => Error::DegenerateVector { op, row, eps },
        other => other,
    }
}

/// Result of the read operation.
pub struct ReadOutput {
    /// `G = F + gamma·F̃`, same `N×C` layout as the input features.
    pub refined: Tensor,
    /// The weighted item sums `F̃`.
    pub retrieved: Tensor,
    pub addressing: Addressing,
}

/// Refine features by the weighted sum of all memory items on a
/// gamma-scaled residual branch. Differentiable w.r.t. features, items
/// (when the bank is trainable), and gamma.
pub fn read(g: &mut Graph, features: &FlatFeatures, bank: &MemoryBank) -> Result<ReadOutput> {
    let addressing = address(g, features, bank)?;
    let retrieved = g.matmul(&addressing.weights, bank.items())?;
    let scaled = g.scalar_mul(bank.gamma(), &retrieved)?;
    let refined = g.add(features.tensor(), &scaled)?;
    Ok(ReadOutput {
        refined,
        retrieved,
        addressing,
    })
}

/// Index sets `A_j`: feature `i` belongs to set `j` iff item `j` has its
/// highest similarity. The sets partition `0..N`.
pub struct WritePartition {
    pub sets: Vec<Vec<usize>>,
}

/// Per-feature argmax over `N×K` similarities; ties go to the smallest
/// item index.
pub fn partition(similarities: &[f64], n: usize, k: usize) -> WritePartition {
    assert_eq!(similarities.len(), n * k);
    let mut sets = vec![Vec::new(); k];
    for i in 0..n {
        let row = &similarities[i * k..(i + 1) * k];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        sets[best].push(i);
    }
    WritePartition { sets }
}

/// Renormalized update weights, aligned with `WritePartition::sets`:
/// `weights[j][t]` belongs to feature `sets[j][t]`. In every nonempty set
/// the maximum weight is exactly 1.
pub struct UpdateWeights {
    pub weights: Vec<Vec<f64>>,
}

/// Update weights from features and items: cosine similarities, softmax
/// per item over all `N` features, then division by the in-set maximum.
pub fn update_weights(
    features: &FeatureMatrix,
    bank: &MemoryBank,
    part: &WritePartition,
) -> Result<UpdateWeights> {
    let sims = cosine_similarities(features, bank.items().data(), bank.k())?;
    Ok(update_weights_from_similarities(
        &sims,
        features.n(),
        bank.k(),
        part,
    ))
}

/// Same computation starting from an explicit `N×K` similarity matrix.
pub fn update_weights_from_similarities(
    similarities: &[f64],
    n: usize,
    k: usize,
    part: &WritePartition,
) -> UpdateWeights {
    assert_eq!(similarities.len(), n * k);
    // v_{j,i}: softmax over all N features, per item j (max-subtracted).
    let mut v = vec![0.0; k * n];
    for j in 0..k {
        let mut max = f64::NEG_INFINITY;
        for i in 0..n {
            max = max.max(similarities[i * k + j]);
        }
        let mut sum = 0.0;
        for i in 0..n {
            let e = (similarities[i * k + j] - max).exp();
            v[j * n + i] = e;
            sum += e;
        }
        for i in 0..n {
            v[j * n + i] /= sum;
        }
    }
    let weights = part
        .sets
        .iter()
        .enumerate()
        .map(|(j, set)| {
            if set.is_empty() {
                return Vec::new();
            }
            let vmax = set
                .iter()
                .map(|&i| v[j * n + i])
                .fold(f64::NEG_INFINITY, f64::max);
            set.iter().map(|&i| v[j * n + i] / vmax).collect()
        })
        .collect();
    UpdateWeights { weights }
}

/// Plain `N×K` cosine similarity matrix for the write path, clamped into
/// `[-1, 1]`. Degenerate rows on either side are hard errors.
pub fn cosine_similarities(features: &FeatureMatrix, items: &[f64], k: usize) -> Result<Vec<f64>> {
    let (n, c) = (features.n(), features.c());
    debug_assert_eq!(items.len(), k * c);
    let mut item_norms = vec![0.0; k];
    for (j, norm) in item_norms.iter_mut().enumerate() {
        *norm = l2_norm(&items[j * c..(j + 1) * c]);
        if *norm < NORM_EPS {
            return Err(Error::DegenerateVector {
                op: "cosine(item)",
                row: j,
                eps: NORM_EPS,
            });
        }
    }
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let f = features.row(i);
        let fnorm = l2_norm(f);
        if fnorm < NORM_EPS {
            return Err(Error::DegenerateVector {
                op: "cosine(feature)",
                row: i,
                eps: NORM_EPS,
            });
        }
        for j in 0..k {
            let m = &items[j * c..(j + 1) * c];
            let dot: f64 = f.iter().zip(m).map(|(a, b)| a * b).sum();
            out[i * k + j] = (dot / (fnorm * item_norms[j])).clamp(-1.0, 1.0);
        }
    }
    Ok(out)
}

/// First and second most similar item per feature from the addressing
/// weights; ties resolved toward the smaller index, so `q != p` always.
pub fn top_two_items(weights: &[f64], n: usize, k: usize) -> (Vec<usize>, Vec<usize>) {
    assert!(k >= 2);
    let mut p = vec![0; n];
    let mut q = vec![0; n];
    for i in 0..n {
        let row = &weights[i * k..(i + 1) * k];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        let mut second = if best == 0 { 1 } else { 0 };
        for (j, &v) in row.iter().enumerate() {
            if j != best && j != second && v > row[second] {
                second = j;
            }
        }
        p[i] = best;
        q[i] = second;
    }
    (p, q)
}

/// Triplet hinge with explicit anchor item indices:
/// `Σ_i max(‖f_i − m_{p_i}‖ − ‖f_i − m_{q_i}‖ + alpha, 0)`.
pub fn triplet_loss_with_pairs(
    g: &mut Graph,
    features: &FlatFeatures,
    bank: &MemoryBank,
    p: &[usize],
    q: &[usize],
    alpha: f64,
) -> Result<Tensor> {
    let mp = g.gather_rows(bank.items(), p)?;
    let mq = g.gather_rows(bank.items(), q)?;
    let dp = row_distances(g, features.tensor(), &mp)?;
    let dq = row_distances(g, features.tensor(), &mq)?;
    let gap = g.sub(&dp, &dq)?;
    let shifted = g.add_scalar(&gap, alpha);
    let hinge = g.relu(&shifted);
    Ok(g.sum_all(&hinge))
}

/// Triplet loss over the two most-addressed items per feature. Pushes each
/// feature toward its best item and away from the runner-up by at least
/// the margin `alpha`. Differentiable w.r.t. the features (and the items
/// when the bank is trainable); the item selection itself is discrete.
pub fn triplet_loss(
    g: &mut Graph,
    features: &FlatFeatures,
    bank: &MemoryBank,
    addressing: &Addressing,
    alpha: f64,
) -> Result<Tensor> {
    let (n, k) = (features.n(), bank.k());
    let (p, q) = top_two_items(addressing.weights.data(), n, k);
    triplet_loss_with_pairs(g, features, bank, &p, &q, alpha)
}

/// Row-wise Euclidean distance between two `N×C` tensors.
fn row_distances(g: &mut Graph, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = g.sub(a, b)?;
    let sq = g.mul(&d, &d)?;
    let sums = g.sum_last_axis(&sq)?;
    g.sqrt(&sums)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamTag};
    use approx::assert_relative_eq;

    fn bank_from(items: &[f64], k: usize, c: usize, gamma: f64) -> MemoryBank {
        MemoryBank::from_parts(items.to_vec(), k, c, gamma, false).unwrap()
    }

    fn feats(g: &mut Graph, data: &[f64], n: usize, c: usize) -> FlatFeatures {
        let _ = g;
        FlatFeatures::from_matrix(Tensor::param([n, c], data.to_vec())).unwrap()
    }

    // Eqs. 1–2 hand oracle: f=(1,0), m1=(1,0), m2=(0,1)
    #[test]
    fn address_hand_example() {
        let mut g = Graph::new();
        let bank = bank_from(&[1.0, 0.0, 0.0, 1.0], 2, 2, 0.1);
        let f = feats(&mut g, &[1.0, 0.0], 1, 2);
        let addr = address(&mut g, &f, &bank).unwrap();
        assert_eq!(addr.similarities.data(), &[1.0, 0.0]);
        let w = addr.weights.data();
        let e = std::f64::consts::E;
        assert_relative_eq!(w[0], e / (e + 1.0), epsilon = 1e-12);
        assert_relative_eq!(w[1], 1.0 / (e + 1.0), epsilon = 1e-12);
        // frozen to 4 decimals
        assert!((w[0] - 0.7311).abs() < 5e-5);
        assert!((w[1] - 0.2689).abs() < 5e-5);
    }

    // Eqs. 3–4 composed with the address example, gamma = 0.1
    #[test]
    fn read_hand_example() {
        let mut g = Graph::new();
        let bank = bank_from(&[1.0, 0.0, 0.0, 1.0], 2, 2, 0.1);
        let f = feats(&mut g, &[1.0, 0.0], 1, 2);
        let out = read(&mut g, &f, &bank).unwrap();
        let ft = out.retrieved.data();
        assert!((ft[0] - 0.7311).abs() < 5e-5);
        assert!((ft[1] - 0.2689).abs() < 5e-5);
        let gdata = out.refined.data();
        assert!((gdata[0] - 1.0731).abs() < 5e-5);
        assert!((gdata[1] - 0.0269).abs() < 5e-5);
    }

    #[test]
    fn read_with_zero_gamma_is_identity() {
        let mut g = Graph::new();
        let bank = bank_from(&[1.0, 0.0, 0.0, 1.0], 2, 2, 0.0);
        let f = feats(&mut g, &[0.3, -0.7, 2.0, 1.0], 2, 2);
        let out = read(&mut g, &f, &bank).unwrap();
        assert_eq!(out.refined.data(), f.tensor().data());
    }

    #[test]
    fn single_item_read_degenerates_to_that_item() {
        // K = 1 cannot form a bank (triplet needs two items); the math it
        // would compute is checked directly: softmax over one column is 1,
        // so every retrieved row equals the lone item.
        let mut g = Graph::new();
        let ones = Tensor::new([3, 1], vec![1.0; 3]);
        let item = Tensor::new([1, 2], vec![0.6, 0.8]);
        let retrieved = g.matmul(&ones, &item).unwrap();
        for row in retrieved.data().chunks(2) {
            assert_eq!(row, &[0.6, 0.8]);
        }
        assert!(MemoryBank::from_parts(vec![1.0, 0.0], 1, 2, 0.1, false).is_err());
    }

    #[test]
    fn addressing_is_scale_invariant() {
        let items = [0.8, 0.6, -0.6, 0.8, 0.0, 1.0];
        let base = [0.4, -0.9, 1.5, 0.2];
        let mut g = Graph::new();
        let bank = bank_from(&items, 3, 2, 0.1);
        let f1 = feats(&mut g, &base, 2, 2);
        let a1 = address(&mut g, &f1, &bank).unwrap();

        // a power-of-two scale is exact in floating point
        let scaled: Vec<f64> = base.iter().map(|v| v * 4.0).collect();
        let f2 = feats(&mut g, &scaled, 2, 2);
        let a2 = address(&mut g, &f2, &bank).unwrap();
        assert_eq!(a1.weights.data(), a2.weights.data());

        // a general positive scale agrees to fp tolerance
        let scaled: Vec<f64> = base.iter().map(|v| v * 3.7).collect();
        let f3 = feats(&mut g, &scaled, 2, 2);
        let a3 = address(&mut g, &f3, &bank).unwrap();
        for (x, y) in a1.weights.data().iter().zip(a3.weights.data()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn identical_items_give_uniform_weights() {
        let mut g = Graph::new();
        let bank = bank_from(&[0.6, 0.8, 0.6, 0.8, 0.6, 0.8, 0.6, 0.8], 4, 2, 0.1);
        let f = feats(&mut g, &[1.0, -0.5], 1, 2);
        let addr = address(&mut g, &f, &bank).unwrap();
        for &w in addr.weights.data() {
            assert_relative_eq!(w, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn address_rejects_zero_feature_row() {
        let mut g = Graph::new();
        let bank = bank_from(&[1.0, 0.0, 0.0, 1.0], 2, 2, 0.1);
        let f = feats(&mut g, &[1.0, 1.0, 0.0, 0.0], 2, 2);
        match address(&mut g, &f, &bank) {
            Err(Error::DegenerateVector { op, row, .. }) => {
                assert_eq!(op, "address(feature)");
                assert_eq!(row, 1);
            }
            other => panic!("expected degenerate row error, got {other:?}"),
        }
    }

    #[test]
    fn partition_examples() {
        // clear argmax
        let p = partition(&[0.9, 0.1], 1, 2);
        assert_eq!(p.sets, vec![vec![0], vec![]]);
        // all-equal row goes to the lowest index
        let p = partition(&[0.4, 0.4, 0.4], 1, 3);
        assert_eq!(p.sets, vec![vec![0], vec![], vec![]]);
    }

    #[test]
    fn partition_matches_bruteforce_on_random_matrix() {
        let mut rng = stream(99, StreamTag::GradCheck);
        use rand::Rng;
        let (n, k) = (20, 4);
        let s: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let part = partition(&s, n, k);

        // independent per-row max scan
        let mut seen = vec![false; n];
        for i in 0..n {
            let row = &s[i * k..(i + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            assert!(part.sets[best].contains(&i));
            assert!(!seen[i]);
            seen[i] = true;
        }
        let total: usize = part.sets.iter().map(Vec::len).sum();
        assert_eq!(total, n);
    }

    // Eqs. 6–8 on a hand-built 3×2 similarity matrix; expected values
    // computed independently by evaluating the equations step by step.
    #[test]
    fn update_weights_hand_oracle() {
        // s'_{j,i} rows: j0 = [0.9, 0.1, 0.8], j1 = [0.2, 0.7, 0.3]
        // stored N×K: feature i row = [s_{i,0}, s_{i,1}]
        let s = [0.9, 0.2, 0.1, 0.7, 0.8, 0.3];
        let part = partition(&s, 3, 2);
        assert_eq!(part.sets, vec![vec![0, 2], vec![1]]);
        let upd = update_weights_from_similarities(&s, 3, 2, &part);
        // v_{0,·} = softmax([0.9, 0.1, 0.8]) = [0.42478, 0.19087, 0.38436]
        // max over A_0 = v_{0,0} → weights [1, 0.38436/0.42478]
        assert_eq!(upd.weights[0][0], 1.0);
        assert_relative_eq!(upd.weights[0][1], 0.9048374180359595, epsilon = 1e-12);
        assert_eq!(upd.weights[1], vec![1.0]);
    }

    #[test]
    fn singleton_set_weight_is_exactly_one() {
        let s = [0.3, -0.2, -0.5, 0.9];
        let part = partition(&s, 2, 2);
        assert_eq!(part.sets, vec![vec![0], vec![1]]);
        let upd = update_weights_from_similarities(&s, 2, 2, &part);
        assert_eq!(upd.weights[0], vec![1.0]);
        assert_eq!(upd.weights[1], vec![1.0]);
    }

    #[test]
    fn equal_features_share_unit_weight() {
        // features 0 and 2 identical → equal v → both renormalize to 1
        let f = FeatureMatrix::new(vec![2.0, 0.0, 0.0, 1.0, 2.0, 0.0], 3, 2).unwrap();
        let bank = bank_from(&[1.0, 0.0, 0.0, 1.0], 2, 2, 0.1);
        let sims = cosine_similarities(&f, bank.items().data(), 2).unwrap();
        let part = partition(&sims, 3, 2);
        assert_eq!(part.sets[0], vec![0, 2]);
        let upd = update_weights_from_similarities(&sims, 3, 2, &part);
        assert_eq!(upd.weights[0], vec![1.0, 1.0]);
    }

    // Eqs. 5–9 hand oracle: N=1, K=2, f=(2,0), m1=(1,0), m2=(0,1)
    #[test]
    fn write_hand_example() {
        let mut bank = bank_from(&[1.0, 0.0, 0.0, 1.0], 2, 2, 0.1);
        let f = FeatureMatrix::new(vec![2.0, 0.0], 1, 2).unwrap();
        bank.write(&f).unwrap();
        let items = bank.items().data();
        assert_relative_eq!(items[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(items[1], 0.0, epsilon = 1e-12);
        // untouched item: empty partition set
        assert_eq!(&items[2..4], &[0.0, 1.0]);
    }

    #[test]
    fn write_is_idempotent_on_parallel_features() {
        // A_j = {i} with f_i = c·m_j keeps m_j fixed (h of a positive
        // multiple of a unit vector)
        let m = [0.6, 0.8, -0.8, 0.6];
        let mut bank = bank_from(&m, 2, 2, 0.1);
        let f = FeatureMatrix::new(vec![1.8, 2.4], 1, 2).unwrap(); // 3·m1
        bank.write(&f).unwrap();
        let items = bank.items().data();
        assert_relative_eq!(items[0], 0.6, epsilon = 1e-12);
        assert_relative_eq!(items[1], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn write_leaves_unit_rows() {
        use rand::Rng;
        let mut rng = stream(5, StreamTag::BankInit);
        let mut bank = MemoryBank::new(5, 4, 0.1, false, &mut rng).unwrap();
        let data: Vec<f64> = (0..12 * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let f = FeatureMatrix::new(data, 12, 4).unwrap();
        bank.write(&f).unwrap();
        for j in 0..5 {
            let row = &bank.items().data()[j * 4..(j + 1) * 4];
            assert!((l2_norm(row) - 1.0).abs() < 1e-9, "row {j} not unit");
        }
    }

    // Eq. 11 hand distances
    #[test]
    fn triplet_zero_when_anchor_matches_best_item() {
        // f=(1,0), p=m1=(1,0), q=m2=(0,1): max(0 − √2 + 1, 0) = 0
        let mut g = Graph::new();
        let bank = bank_from(&[1.0, 0.0, 0.0, 1.0], 2, 2, 0.1);
        let f = feats(&mut g, &[1.0, 0.0], 1, 2);
        let addr = address(&mut g, &f, &bank).unwrap();
        let loss = triplet_loss(&mut g, &f, &bank, &addr, 1.0).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn triplet_hinge_active_with_constructed_pairs() {
        // explicit pairs p=(0.6,0.8), q=(1,0) for f=(1,0):
        // term = ‖f−p‖ − 0 + 1 = √0.8 + 1 ≈ 1.8944
        let mut g = Graph::new();
        let bank = bank_from(&[0.6, 0.8, 1.0, 0.0], 2, 2, 0.1);
        let f = feats(&mut g, &[1.0, 0.0], 1, 2);
        let loss = triplet_loss_with_pairs(&mut g, &f, &bank, &[0], &[1], 1.0).unwrap();
        assert!((loss.item() - 1.8944).abs() < 5e-5);
    }

    #[test]
    fn triplet_zero_margin_boundary() {
        // equidistant items, alpha = 0 → hinge sits exactly at 0
        let mut g = Graph::new();
        let bank = bank_from(&[0.0, 1.0, 0.0, -1.0], 2, 2, 0.1);
        let f = feats(&mut g, &[1.0, 0.0], 1, 2);
        let addr = address(&mut g, &f, &bank).unwrap();
        // cosines tie at 0 → p = item 0, q = item 1 by the smallest-index rule
        let (p, q) = top_two_items(addr.weights.data(), 1, 2);
        assert_eq!((p[0], q[0]), (0, 1));
        let loss = triplet_loss(&mut g, &f, &bank, &addr, 0.0).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn weight_contrast_is_bounded_by_e_squared() {
        use rand::Rng;
        let mut rng = stream(11, StreamTag::BankInit);
        let bank = MemoryBank::new(6, 3, 0.1, false, &mut rng).unwrap();
        let data: Vec<f64> = (0..8 * 3).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut g = Graph::new();
        let f = feats(&mut g, &data, 8, 3);
        let addr = address(&mut g, &f, &bank).unwrap();
        let bound = std::f64::consts::E.powi(2) * (1.0 + 1e-12);
        for row in addr.weights.data().chunks(6) {
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            let min = row.iter().cloned().fold(f64::MAX, f64::min);
            assert!(max / min <= bound);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }
}
