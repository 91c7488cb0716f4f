//! Binary selection vectors, index sets and selection matrices.
//!
//! A gate `s ∈ {0,1}^d` is the diagonal of a pseudo-selection matrix
//! `S = diag(s)` (d×d). Deleting the zero columns of `S` gives the actual
//! selection matrix `Ŝ` (d×nnz). Index sets are always ascending, so sliced
//! weights keep the original coordinate order.

use crate::error::{DispError, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Binary selection vector, optionally carrying the latent logits it was
/// derived from.
#[derive(Clone, Debug, PartialEq)]
pub struct GateVector {
    bits: Vec<bool>,
    logits: Option<Vec<f64>>,
}

impl GateVector {
    pub fn new(bits: Vec<bool>) -> Self {
        GateVector { bits, logits: None }
    }

    pub fn ones(dim: usize) -> Self {
        Self::new(vec![true; dim])
    }

    pub fn zeros(dim: usize) -> Self {
        Self::new(vec![false; dim])
    }

    pub fn from_index_set(ind: &IndexSet) -> Self {
        let mut bits = vec![false; ind.dim()];
        for &j in ind.as_slice() {
            bits[j] = true;
        }
        Self::new(bits)
    }

    /// Reads bits from a 0/1 slice; any value ≥ 0.5 counts as one.
    pub fn from_values<T: Real>(values: &[T]) -> Self {
        Self::new(values.iter().map(|&v| v >= T::from_f64(0.5).unwrap()).collect())
    }

    pub fn with_logits(mut self, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != self.bits.len() {
            return Err(DispError::dim("gate logits", &[self.bits.len()], &[logits.len()]));
        }
        self.logits = Some(logits);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.bits.len()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn logits(&self) -> Option<&[f64]> {
        self.logits.as_deref()
    }

    pub fn get(&self, j: usize) -> bool {
        self.bits[j]
    }

    pub fn set(&mut self, j: usize, on: bool) {
        self.bits[j] = on;
    }

    pub fn nnz(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_index_set(&self) -> IndexSet {
        IndexSet {
            dim: self.bits.len(),
            indices: (0..self.bits.len()).filter(|&j| self.bits[j]).collect(),
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            self.bits
                .iter()
                .map(|&b| if b { T::one() } else { T::zero() })
                .collect(),
        )
    }

    /// Bitwise AND: the diagonal of `diag(self)·diag(other)`.
    pub fn and(&self, other: &GateVector) -> Result<GateVector> {
        if self.dim() != other.dim() {
            return Err(DispError::dim("gate and", &[self.dim()], &[other.dim()]));
        }
        Ok(Self::new(
            self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect(),
        ))
    }
}

/// Strictly increasing set of coordinates in `[0, dim)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IndexSet {
    dim: usize,
    indices: Vec<usize>,
}

impl IndexSet {
    pub fn new(dim: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DispError::contract("index set must be strictly increasing"));
        }
        if let Some(&last) = indices.last() {
            if last >= dim {
                return Err(DispError::contract(format!(
                    "index {last} out of range for width {dim}"
                )));
            }
        }
        Ok(IndexSet { dim, indices })
    }

    pub fn full(dim: usize) -> Self {
        IndexSet {
            dim,
            indices: (0..dim).collect(),
        }
    }

    pub fn empty(dim: usize) -> Self {
        IndexSet {
            dim,
            indices: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }

    pub fn contains(&self, j: usize) -> bool {
        self.indices.binary_search(&j).is_ok()
    }

    pub fn is_subset_of(&self, other: &IndexSet) -> bool {
        self.indices.iter().all(|&j| other.contains(j))
    }

    pub fn intersection_len(&self, other: &IndexSet) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < self.indices.len() && j < other.indices.len() {
            match self.indices[i].cmp(&other.indices[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionKind {
    /// d×d diagonal 0/1 matrix.
    Pseudo,
    /// d×nnz matrix with one 1 per column, columns in ascending row order.
    Actual,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionMatrix {
    pub kind: SelectionKind,
    pub gate: GateVector,
}

impl SelectionMatrix {
    pub fn pseudo(gate: GateVector) -> Self {
        SelectionMatrix {
            kind: SelectionKind::Pseudo,
            gate,
        }
    }

    pub fn actual(gate: GateVector) -> Self {
        SelectionMatrix {
            kind: SelectionKind::Actual,
            gate,
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        match self.kind {
            SelectionKind::Pseudo => [self.gate.dim(), self.gate.dim()],
            SelectionKind::Actual => [self.gate.dim(), self.gate.nnz()],
        }
    }

    pub fn to_dense<T: Real>(&self) -> Tensor<T> {
        let d = self.gate.dim();
        match self.kind {
            SelectionKind::Pseudo => Tensor::from_fn(&[d, d], |i| {
                let (r, c) = (i / d, i % d);
                if r == c && self.gate.get(r) {
                    T::one()
                } else {
                    T::zero()
                }
            }),
            SelectionKind::Actual => {
                let ind = self.gate.to_index_set();
                let n = ind.len();
                let mut t = Tensor::zeros(&[d, n]);
                for (c, &r) in ind.as_slice().iter().enumerate() {
                    t.data_mut()[r * n + c] = T::one();
                }
                t
            }
        }
    }

    /// Product of two pseudo-selection matrices, itself a pseudo-selection
    /// matrix with the AND of both gates.
    pub fn compose(&self, other: &SelectionMatrix) -> Result<SelectionMatrix> {
        if self.kind != SelectionKind::Pseudo || other.kind != SelectionKind::Pseudo {
            return Err(DispError::contract("only pseudo-selection matrices compose in place"));
        }
        Ok(SelectionMatrix::pseudo(self.gate.and(&other.gate)?))
    }
}

/// Residual-adapter width bound `nnz(S_lᵀ S_{l+1}) ≤ min(nnz(S_l), nnz(S_{l+1}))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NnzBoundReport {
    pub nnz_product: usize,
    pub min_nnz: usize,
    pub holds: bool,
    /// One index set contains the other.
    pub equality_condition_holds: bool,
}

pub fn compose_nnz_bound_check(s_l: &GateVector, s_next: &GateVector) -> Result<NnzBoundReport> {
    if s_l.dim() != s_next.dim() {
        return Err(DispError::contract(format!(
            "gate widths differ: {} vs {}",
            s_l.dim(),
            s_next.dim()
        )));
    }
    let (a, b) = (s_l.to_index_set(), s_next.to_index_set());
    let nnz_product = a.intersection_len(&b);
    let min_nnz = a.len().min(b.len());
    Ok(NnzBoundReport {
        nnz_product,
        min_nnz,
        holds: nnz_product <= min_nnz,
        equality_condition_holds: a.is_subset_of(&b) || b.is_subset_of(&a),
    })
}

/// `Ŝ_rowᵀ · W · Ŝ_col`: the rows and columns of `w` kept by the gates, in order.
pub fn slice_weight<T: Real>(
    w: &Tensor<T>,
    rows: Option<&IndexSet>,
    cols: Option<&IndexSet>,
) -> Result<Tensor<T>> {
    let s = w.shape();
    if s.len() != 2 {
        return Err(DispError::contract(format!("slice_weight expects a matrix, got {s:?}")));
    }
    let (d1, d2) = (s[0], s[1]);
    if let Some(r) = rows {
        if r.dim() != d1 {
            return Err(DispError::contract(format!(
                "row gate width {} does not match weight rows {d1}",
                r.dim()
            )));
        }
    }
    if let Some(c) = cols {
        if c.dim() != d2 {
            return Err(DispError::contract(format!(
                "column gate width {} does not match weight columns {d2}",
                c.dim()
            )));
        }
    }
    let full_rows;
    let rows = match rows {
        Some(r) => r.as_slice(),
        None => {
            full_rows = (0..d1).collect::<Vec<_>>();
            &full_rows
        }
    };
    let full_cols;
    let cols = match cols {
        Some(c) => c.as_slice(),
        None => {
            full_cols = (0..d2).collect::<Vec<_>>();
            &full_cols
        }
    };
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &r in rows {
        out.extend(cols.iter().map(|&c| w.data()[r * d2 + c]));
    }
    Tensor::new(vec![rows.len(), cols.len()], out)
}

/// Gathers the columns of `x` listed in `ind` (differentiable).
pub fn index_select<T: Real>(g: &Graph<T>, x: Var, ind: &IndexSet) -> Result<Var> {
    let d = *g.shape(x).last().unwrap_or(&0);
    if ind.dim() != d {
        return Err(DispError::contract(format!(
            "index set width {} does not match tensor width {d}",
            ind.dim()
        )));
    }
    g.index_select(x, ind.as_slice())
}

/// Adds the columns of `b` into `a` at the positions listed in `ind` (differentiable).
pub fn index_add<T: Real>(g: &Graph<T>, a: Var, b: Var, ind: &IndexSet) -> Result<Var> {
    let d = *g.shape(a).last().unwrap_or(&0);
    if ind.dim() != d {
        return Err(DispError::contract(format!(
            "index set width {} does not match tensor width {d}",
            ind.dim()
        )));
    }
    g.index_add(a, b, ind.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, stream_rng, Stream};
    use proptest::prelude::*;
    use rand::Rng;

    fn gate(bits: &[u8]) -> GateVector {
        GateVector::new(bits.iter().map(|&b| b == 1).collect())
    }

    fn dense_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let g = Graph::new();
        let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
        g.value(g.matmul(a, b).unwrap())
    }

    fn transpose(t: &Tensor<f64>) -> Tensor<f64> {
        let (r, c) = (t.shape()[0], t.shape()[1]);
        Tensor::from_fn(&[c, r], |i| t.data()[(i % r) * c + i / r])
    }

    fn count_nonzero(t: &Tensor<f64>) -> usize {
        t.data().iter().filter(|&&v| v != 0.0).count()
    }

    #[test]
    fn index_set_examples() {
        assert_eq!(gate(&[1, 0, 1]).to_index_set().as_slice(), &[0, 2]);
        assert_eq!(GateVector::ones(4).to_index_set().as_slice(), &[0, 1, 2, 3]);
        assert!(GateVector::zeros(4).to_index_set().is_empty());
        assert!(IndexSet::new(4, vec![2, 1]).is_err());
        assert!(IndexSet::new(4, vec![1, 1]).is_err());
        assert!(IndexSet::new(4, vec![4]).is_err());
    }

    #[test]
    fn index_select_matches_actual_selection_product() {
        let mut rng = stream_rng(11, Stream::Verification, 0);
        for _ in 0..20 {
            let x: Tensor<f64> = normal_tensor(&mut rng, &[3, 9], 1.0);
            let s = GateVector::new((0..9).map(|_| rng.gen_bool(0.5)).collect());
            let g = Graph::new();
            let xv = g.constant(x.clone());
            let sel = g.value(index_select(&g, xv, &s.to_index_set()).unwrap());
            let dense = dense_matmul(&x, &SelectionMatrix::actual(s).to_dense());
            assert_eq!(sel, dense);
        }
    }

    #[test]
    fn index_add_matches_dense_scatter() {
        let mut rng = stream_rng(12, Stream::Verification, 0);
        for _ in 0..20 {
            let s = GateVector::new((0..7).map(|_| rng.gen_bool(0.5)).collect());
            let ind = s.to_index_set();
            let a: Tensor<f64> = normal_tensor(&mut rng, &[2, 7], 1.0);
            let b: Tensor<f64> = normal_tensor(&mut rng, &[2, ind.len()], 1.0);
            let g = Graph::new();
            let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
            let got = g.value(index_add(&g, av, bv, &ind).unwrap());
            let scatter = dense_matmul(&b, &transpose(&SelectionMatrix::actual(s).to_dense()));
            let expect = Tensor::from_fn(&[2, 7], |i| a.data()[i] + scatter.data()[i]);
            assert!(got.max_abs_diff(&expect).unwrap() <= 1e-15);
        }
    }

    #[test]
    fn index_ops_check_widths() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 4]));
        assert!(index_select(&g, x, &IndexSet::full(5)).is_err());
        let b = g.constant(Tensor::zeros(&[1, 2]));
        assert!(index_add(&g, x, b, &IndexSet::new(5, vec![0, 1]).unwrap()).is_err());
    }

    #[test]
    fn nnz_bound_examples() {
        let r = compose_nnz_bound_check(&gate(&[1, 1, 0, 0]), &gate(&[0, 1, 1, 0])).unwrap();
        assert_eq!((r.nnz_product, r.min_nnz, r.holds), (1, 2, true));
        assert!(!r.equality_condition_holds);
        let r = compose_nnz_bound_check(&GateVector::ones(8), &GateVector::ones(8)).unwrap();
        assert_eq!((r.nnz_product, r.min_nnz), (8, 8));
        assert!(r.equality_condition_holds);
        assert!(compose_nnz_bound_check(&GateVector::ones(3), &GateVector::ones(4)).is_err());
    }

    #[test]
    fn nnz_bound_exhaustive_d8_against_dense_products() {
        let d = 8;
        let gates: Vec<GateVector> = (0u32..256)
            .map(|m| GateVector::new((0..d).map(|j| (m >> j) & 1 == 1).collect()))
            .collect();
        let dense: Vec<Tensor<f64>> = gates
            .iter()
            .map(|g| SelectionMatrix::pseudo(g.clone()).to_dense())
            .collect();
        for (i, a) in gates.iter().enumerate() {
            for (j, b) in gates.iter().enumerate() {
                let r = compose_nnz_bound_check(a, b).unwrap();
                let oracle = count_nonzero(&dense_matmul(&transpose(&dense[i]), &dense[j]));
                assert_eq!(r.nnz_product, oracle);
                assert!(r.holds);
                assert_eq!(r.nnz_product == r.min_nnz, r.equality_condition_holds);
            }
        }
    }

    #[test]
    fn slice_weight_examples() {
        let w = Tensor::from_fn(&[3, 3], |i| i as f64);
        let s = slice_weight(&w, Some(&gate(&[1, 0, 1]).to_index_set()), None).unwrap();
        assert_eq!(s.shape(), &[2, 3]);
        assert_eq!(s.data(), &[0., 1., 2., 6., 7., 8.]);
        let full = IndexSet::full(3);
        assert_eq!(slice_weight(&w, Some(&full), Some(&full)).unwrap(), w);
        assert!(slice_weight(&w, Some(&IndexSet::full(4)), None).is_err());
    }

    #[test]
    fn slice_weight_matches_dense_selection_products() {
        let mut rng = stream_rng(13, Stream::Verification, 0);
        for _ in 0..20 {
            let w: Tensor<f64> = normal_tensor(&mut rng, &[6, 5], 1.0);
            let r = GateVector::new((0..6).map(|_| rng.gen_bool(0.5)).collect());
            let c = GateVector::new((0..5).map(|_| rng.gen_bool(0.5)).collect());
            let got = slice_weight(&w, Some(&r.to_index_set()), Some(&c.to_index_set())).unwrap();
            let rt = transpose(&SelectionMatrix::actual(r).to_dense());
            let expect = dense_matmul(&dense_matmul(&rt, &w), &SelectionMatrix::actual(c).to_dense());
            assert_eq!(got, expect);
        }
    }

    fn arb_gate(d: usize) -> impl Strategy<Value = GateVector> {
        proptest::collection::vec(any::<bool>(), d).prop_map(GateVector::new)
    }

    proptest! {
        #[test]
        fn masking_equals_select_then_scatter(s in arb_gate(7), seed in 0u64..1000) {
            let mut rng = stream_rng(seed, Stream::Verification, 1);
            let x: Tensor<f64> = normal_tensor(&mut rng, &[2, 7], 1.0);
            let masked = dense_matmul(&x, &SelectionMatrix::pseudo(s.clone()).to_dense());
            let g = Graph::new();
            let xv = g.constant(x);
            let ind = s.to_index_set();
            let sel = index_select(&g, xv, &ind).unwrap();
            let zeros = g.constant(Tensor::zeros(&[2, 7]));
            let back = g.value(index_add(&g, zeros, sel, &ind).unwrap());
            prop_assert_eq!(masked, back);
        }

        #[test]
        fn selection_matrix_identities(s in arb_gate(6)) {
            let p = SelectionMatrix::pseudo(s.clone()).to_dense::<f64>();
            prop_assert_eq!(dense_matmul(&p, &p), p.clone());
            let a = SelectionMatrix::actual(s.clone()).to_dense::<f64>();
            prop_assert_eq!(dense_matmul(&a, &transpose(&a)), p);
            let n = s.nnz();
            let eye = Tensor::from_fn(&[n, n], |i| if i / n.max(1) == i % n.max(1) { 1.0 } else { 0.0 });
            prop_assert_eq!(dense_matmul(&transpose(&a), &a), eye);
        }

        #[test]
        fn pseudo_composition_is_and(a in arb_gate(5), b in arb_gate(5)) {
            let c = SelectionMatrix::pseudo(a.clone()).compose(&SelectionMatrix::pseudo(b.clone())).unwrap();
            let dense = dense_matmul(
                &SelectionMatrix::pseudo(a).to_dense(),
                &SelectionMatrix::pseudo(b).to_dense(),
            );
            prop_assert_eq!(c.to_dense::<f64>(), dense);
        }

        #[test]
        fn nnz_bound_random_pairs(d in prop::sample::select(vec![4usize, 8, 16]), seed in any::<u64>()) {
            let mut rng = stream_rng(seed, Stream::Verification, 2);
            let a = GateVector::new((0..d).map(|_| rng.gen_bool(0.5)).collect());
            let b = GateVector::new((0..d).map(|_| rng.gen_bool(0.5)).collect());
            let r = compose_nnz_bound_check(&a, &b).unwrap();
            prop_assert!(r.holds);
            prop_assert_eq!(r.nnz_product == r.min_nnz, r.equality_condition_holds);
        }
    }
}
