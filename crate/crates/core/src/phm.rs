//! Parameterized hypercomplex multiplication (PHM) layers.
//!
//! A PHM layer is an affine map `y = W x + b` whose weight is assembled as a
//! sum of Kronecker products, `W = Σᵢ Aᵢ ⊗ Bᵢ`, with `n` small `n×n` matrices
//! `Aᵢ` and `n` blocks `Bᵢ` of shape `(m/n)×(d/n)`. The `Aᵢ` live in a
//! [`SharedAPool`] so several layers can reference the same set.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{self, NewParam, ParamGroup, ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Above this many weight entries the forward pass uses the blocked route.
pub const MATERIALIZE_LIMIT: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhmPath {
    Materialized,
    Blocked,
}

#[derive(Clone, Debug)]
pub struct APoolEntry {
    pub name: String,
    pub n: usize,
    pub ids: Vec<ParamId>,
    refs: usize,
}

impl APoolEntry {
    pub fn refs(&self) -> usize {
        self.refs
    }
}

/// Sets of `Aᵢ` matrices that may be referenced by several PHM layers.
#[derive(Clone, Debug, Default)]
pub struct SharedAPool {
    entries: Vec<APoolEntry>,
}

impl SharedAPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a fresh set of `n` matrices `Aᵢ ~ N(0, (1/n)²)`.
    pub fn create<T: Scalar, R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore<T>,
        name: &str,
        n: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<usize> {
        if n == 0 {
            return Err(Error::Config("PHM factor n must be positive".into()));
        }
        let ids = (0..n)
            .map(|i| {
                store.add(
                    NewParam {
                        path: &format!("phm/{name}/A.{i}"),
                        kind: ParamKind::Weight,
                        group,
                        component: "A",
                    },
                    params::normal(&[n, n], 1.0 / n as f64, rng),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        self.entries.push(APoolEntry {
            name: name.to_string(),
            n,
            ids,
            refs: 0,
        });
        Ok(self.entries.len() - 1)
    }

    /// Registers a set built from given matrices (tests, checkpoints).
    pub fn insert<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        name: &str,
        matrices: Vec<Tensor<T>>,
        group: ParamGroup,
    ) -> Result<usize> {
        let n = matrices.len();
        if n == 0 {
            return Err(Error::Config("PHM factor n must be positive".into()));
        }
        let mut ids = Vec::with_capacity(n);
        for (i, a) in matrices.into_iter().enumerate() {
            if a.shape() != [n, n] {
                return Err(Error::Dimension {
                    op: "phm A",
                    lhs: vec![n, n],
                    rhs: a.shape().to_vec(),
                });
            }
            ids.push(store.add(
                NewParam {
                    path: &format!("phm/{name}/A.{i}"),
                    kind: ParamKind::Weight,
                    group,
                    component: "A",
                },
                a,
            )?);
        }
        self.entries.push(APoolEntry {
            name: name.to_string(),
            n,
            ids,
            refs: 0,
        });
        Ok(self.entries.len() - 1)
    }

    fn acquire(&mut self, index: usize) -> Result<&APoolEntry> {
        let len = self.entries.len();
        let e = self.entries.get_mut(index).ok_or(Error::Index {
            what: "A pool",
            index,
            len,
        })?;
        e.refs += 1;
        Ok(e)
    }

    pub fn entries(&self) -> &[APoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Scalars held by the pool, each set counted once.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.n.pow(3)).sum()
    }
}

/// Where a new PHM layer's weights are registered.
pub struct PhmSpec<'a> {
    pub name: &'a str,
    pub n: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub num_biases: usize,
    pub group: ParamGroup,
    pub component: &'a str,
}

#[derive(Clone, Debug)]
pub struct PhmLinear {
    pub n: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pool: usize,
    a: Vec<ParamId>,
    b: Vec<ParamId>,
    bias: Vec<ParamId>,
}

fn check_divisible(n: usize, m: usize, d: usize) -> Result<()> {
    if n == 0 || !m.is_multiple_of(n) || !d.is_multiple_of(n) {
        return Err(Error::Config(format!(
            "PHM factor n={n} must divide out_dim m={m} and in_dim d={d}"
        )));
    }
    Ok(())
}

impl PhmLinear {
    /// Registers `Bᵢ` and biases, referencing A set `pool_index` of `pool`.
    ///
    /// `Bᵢ ~ U(±√(6/(d/n + m/n)))`, biases start at zero.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        pool: &mut SharedAPool,
        pool_index: usize,
        spec: PhmSpec<'_>,
        rng: &mut R,
    ) -> Result<Self> {
        let PhmSpec {
            name: _,
            n,
            in_dim: d,
            out_dim: m,
            ..
        } = spec;
        check_divisible(n, m, d)?;
        let (r, s) = (m / n, d / n);
        let blocks = (0..n)
            .map(|_| params::glorot_uniform(&[r, s], s, r, rng))
            .collect();
        let biases = (0..spec.num_biases).map(|_| Tensor::zeros(&[m])).collect();
        Self::with_values(store, pool, pool_index, spec, blocks, biases)
    }

    /// Same as [`PhmLinear::new`] but with explicit `Bᵢ` and bias values.
    pub fn with_values<T: Scalar>(
        store: &mut ParamStore<T>,
        pool: &mut SharedAPool,
        pool_index: usize,
        spec: PhmSpec<'_>,
        blocks: Vec<Tensor<T>>,
        biases: Vec<Tensor<T>>,
    ) -> Result<Self> {
        let PhmSpec {
            name,
            n,
            in_dim: d,
            out_dim: m,
            num_biases,
            group,
            component,
        } = spec;
        check_divisible(n, m, d)?;
        if blocks.len() != n || biases.len() != num_biases {
            return Err(Error::Config(format!(
                "PHM layer {name}: expected {n} blocks and {num_biases} biases"
            )));
        }
        let entry = pool.acquire(pool_index)?;
        if entry.n != n {
            return Err(Error::Config(format!(
                "A pool {} has n={}, layer {name} wants n={n}",
                entry.name, entry.n
            )));
        }
        let a = entry.ids.clone();
        let mut b = Vec::with_capacity(n);
        for (i, blk) in blocks.into_iter().enumerate() {
            if blk.shape() != [m / n, d / n] {
                return Err(Error::Dimension {
                    op: "phm B",
                    lhs: vec![m / n, d / n],
                    rhs: blk.shape().to_vec(),
                });
            }
            b.push(store.add(
                NewParam {
                    path: &format!("phm/{name}/B.{i}"),
                    kind: ParamKind::Weight,
                    group,
                    component,
                },
                blk,
            )?);
        }
        let mut bias = Vec::with_capacity(num_biases);
        for (j, bv) in biases.into_iter().enumerate() {
            if bv.shape() != [m] {
                return Err(Error::Dimension {
                    op: "phm bias",
                    lhs: vec![m],
                    rhs: bv.shape().to_vec(),
                });
            }
            bias.push(store.add(
                NewParam {
                    path: &format!("phm/{name}/bias.{j}"),
                    kind: ParamKind::Bias,
                    group,
                    component,
                },
                bv,
            )?);
        }
        Ok(Self {
            n,
            in_dim: d,
            out_dim: m,
            pool: pool_index,
            a,
            b,
            bias,
        })
    }

    pub fn pool_index(&self) -> usize {
        self.pool
    }

    pub fn a_ids(&self) -> &[ParamId] {
        &self.a
    }

    pub fn b_ids(&self) -> &[ParamId] {
        &self.b
    }

    pub fn bias_ids(&self) -> &[ParamId] {
        &self.bias
    }

    pub fn num_biases(&self) -> usize {
        self.bias.len()
    }

    /// `Bᵢ` entries plus all biases; the shared `Aᵢ` are not included.
    pub fn owned_param_count(&self) -> usize {
        self.out_dim * self.in_dim / self.n + self.bias.len() * self.out_dim
    }

    /// Explicit `Σᵢ Aᵢ ⊗ Bᵢ`.
    pub fn materialize_weight<T: Scalar>(&self, store: &ParamStore<T>) -> Result<Tensor<T>> {
        let mut w = Tensor::zeros(&[self.out_dim, self.in_dim]);
        for (&a, &b) in self.a.iter().zip(&self.b) {
            w = w.add(&store.value(a).kron(store.value(b))?)?;
        }
        Ok(w)
    }

    fn bias_var<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, index: usize) -> Result<Option<Var>> {
        if self.bias.is_empty() && index == 0 {
            return Ok(None);
        }
        let id = *self.bias.get(index).ok_or(Error::Index {
            what: "PHM bias",
            index,
            len: self.bias.len(),
        })?;
        Ok(Some(tape.param(store, id)))
    }

    /// `y = (Σᵢ Aᵢ⊗Bᵢ)·x + bias[bias_index]` for a vector `x` of length `in_dim`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        bias_index: usize,
    ) -> Result<Var> {
        let path = if self.out_dim * self.in_dim <= MATERIALIZE_LIMIT {
            PhmPath::Materialized
        } else {
            PhmPath::Blocked
        };
        self.forward_with(tape, store, x, bias_index, path)
    }

    pub fn forward_with<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        bias_index: usize,
        path: PhmPath,
    ) -> Result<Var> {
        if tape.value(x).numel() != self.in_dim {
            return Err(Error::Dimension {
                op: "phm_forward",
                lhs: vec![self.in_dim],
                rhs: tape.shape(x).to_vec(),
            });
        }
        let bias = self.bias_var(tape, store, bias_index)?;
        let (n, m, d) = (self.n, self.out_dim, self.in_dim);
        let y = match path {
            PhmPath::Materialized => {
                let w = self.weight_var(tape, store)?;
                let col = tape.reshape(x, &[d, 1])?;
                let y = tape.matmul(w, col)?;
                tape.reshape(y, &[m])?
            }
            PhmPath::Blocked => {
                // Row-major x split into n chunks of d/n: output chunk i is
                // Σⱼ A[i,j]·(B xⱼ), i.e. A · (X Bᵀ) with X the n×(d/n) chunks.
                let xm = tape.reshape(x, &[n, d / n])?;
                let mut acc: Option<Var> = None;
                for (&a, &b) in self.a.iter().zip(&self.b) {
                    let av = tape.param(store, a);
                    let bv = tape.param(store, b);
                    let bt = tape.transpose(bv)?;
                    let xb = tape.matmul(xm, bt)?;
                    let term = tape.matmul(av, xb)?;
                    acc = Some(match acc {
                        None => term,
                        Some(s) => tape.add(s, term)?,
                    });
                }
                let y = acc.expect("n >= 1");
                tape.reshape(y, &[m])?
            }
        };
        match bias {
            Some(b) => tape.add(y, b),
            None => Ok(y),
        }
    }

    /// `Σᵢ kron(Aᵢ, Bᵢ)` recorded on the tape.
    pub fn weight_var<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (&a, &b) in self.a.iter().zip(&self.b) {
            let av = tape.param(store, a);
            let bv = tape.param(store, b);
            let k = tape.kron(av, bv)?;
            acc = Some(match acc {
                None => k,
                Some(s) => tape.add(s, k)?,
            });
        }
        acc.ok_or_else(|| Error::Config("PHM layer without terms".into()))
    }
}

/// Trainable scalars of one PHM layer: `n³` when it owns its A set, plus
/// `(m·d)/n` for the blocks, plus `num_biases·m`.
pub fn phm_param_count(n: usize, m: usize, d: usize, own_a: bool, num_biases: usize) -> Result<u64> {
    check_divisible(n, m, d)?;
    let (n, m, d, nb) = (n as u64, m as u64, d as u64, num_biases as u64);
    let a = if own_a { n.pow(3) } else { 0 };
    Ok(a + m * d / n + nb * m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec<'a>(name: &'a str, n: usize, d: usize, m: usize, nb: usize) -> PhmSpec<'a> {
        PhmSpec {
            name,
            n,
            in_dim: d,
            out_dim: m,
            num_biases: nb,
            group: ParamGroup::Generator,
            component: "W",
        }
    }

    #[test]
    fn hand_example_two_by_two() {
        let mut store = ParamStore::<f64>::new();
        let mut pool = SharedAPool::new();
        let a = vec![
            Tensor::identity(2),
            Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap(),
        ];
        let p = pool.insert(&mut store, "p", a, ParamGroup::Generator).unwrap();
        let layer = PhmLinear::with_values(
            &mut store,
            &mut pool,
            p,
            spec("l", 2, 2, 2, 1),
            vec![Tensor::scalar(2.0).reshaped(&[1, 1]).unwrap(), Tensor::scalar(3.0).reshaped(&[1, 1]).unwrap()],
            vec![Tensor::zeros(&[2])],
        )
        .unwrap();
        let w = layer.materialize_weight(&store).unwrap();
        assert_eq!(w.data(), &[2.0, 3.0, 3.0, 2.0]);
        for path in [PhmPath::Materialized, PhmPath::Blocked] {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::vector(vec![1.0, 1.0]));
            let y = layer.forward_with(&mut tape, &store, x, 0, path).unwrap();
            assert_eq!(tape.value(y).data(), &[5.0, 5.0]);
        }
    }

    #[test]
    fn n_one_is_dense() {
        let mut store = ParamStore::<f64>::new();
        let mut pool = SharedAPool::new();
        let p = pool
            .insert(&mut store, "p", vec![Tensor::scalar(1.0).reshaped(&[1, 1]).unwrap()], ParamGroup::Generator)
            .unwrap();
        let b = Tensor::from_rows(&[&[1.0, -2.0, 0.5], &[3.0, 0.25, -1.0]]).unwrap();
        let bias = Tensor::vector(vec![0.1, -0.2]);
        let layer = PhmLinear::with_values(&mut store, &mut pool, p, spec("l", 1, 3, 2, 1), vec![b.clone()], vec![bias.clone()])
            .unwrap();
        assert_eq!(layer.materialize_weight(&store).unwrap(), b);
        let mut tape = Tape::new();
        let xv = vec![0.3, -0.7, 2.0];
        let x = tape.constant(Tensor::vector(xv.clone()));
        let y = layer.forward(&mut tape, &store, x, 0).unwrap();
        let expect: Vec<f64> = (0..2)
            .map(|i| (0..3).map(|j| b.at2(i, j) * xv[j]).sum::<f64>() + bias.data()[i])
            .collect();
        assert_eq!(tape.value(y).data(), expect.as_slice());
    }

    #[test]
    fn zero_blocks_give_zero_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let mut pool = SharedAPool::new();
        let p = pool.create(&mut store, "p", 2, ParamGroup::Generator, &mut rng).unwrap();
        let layer = PhmLinear::with_values(
            &mut store,
            &mut pool,
            p,
            spec("l", 2, 4, 4, 0),
            vec![Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2])],
            vec![],
        )
        .unwrap();
        let w = layer.materialize_weight(&store).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn materialized_weight_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let mut pool = SharedAPool::new();
        let p = pool.create(&mut store, "p", 2, ParamGroup::Generator, &mut rng).unwrap();
        let layer = PhmLinear::new(&mut store, &mut pool, p, spec("l", 2, 4, 4, 0), &mut rng).unwrap();
        let w = layer.materialize_weight(&store).unwrap();
        assert_eq!(w.shape(), &[4, 4]);
        let x = Tensor::<f64>::from_f64_slice(&[4, 1], &[0.1, 0.9, -1.3, 2.0]).unwrap();
        let y = Tensor::<f64>::from_f64_slice(&[4, 1], &[-0.4, 0.2, 0.7, -0.5]).unwrap();
        let lhs = w.matmul(&x.add(&y).unwrap()).unwrap();
        let rhs = w.matmul(&x).unwrap().add(&w.matmul(&y).unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn param_count_examples() {
        assert_eq!(phm_param_count(16, 256, 1024, true, 0).unwrap(), 20480);
        assert_eq!(phm_param_count(1, 8, 8, true, 1).unwrap(), 73);
        assert_eq!(phm_param_count(16, 16, 1024, false, 1).unwrap(), 1040);
        assert!(matches!(phm_param_count(3, 8, 9, true, 0), Err(Error::Config(_))));
    }

    #[test]
    fn bias_index_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let mut pool = SharedAPool::new();
        let p = pool.create(&mut store, "p", 2, ParamGroup::Generator, &mut rng).unwrap();
        let layer = PhmLinear::new(&mut store, &mut pool, p, spec("l", 2, 4, 4, 3), &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4]));
        assert!(layer.forward(&mut tape, &store, x, 2).is_ok());
        assert!(matches!(layer.forward(&mut tape, &store, x, 3), Err(Error::Index { .. })));
    }

    #[test]
    fn shared_pool_counts_once_and_propagates_mutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let mut pool = SharedAPool::new();
        let p = pool.create(&mut store, "p", 2, ParamGroup::Generator, &mut rng).unwrap();
        let l1 = PhmLinear::new(&mut store, &mut pool, p, spec("l1", 2, 4, 2, 1), &mut rng).unwrap();
        let l2 = PhmLinear::new(&mut store, &mut pool, p, spec("l2", 2, 2, 6, 1), &mut rng).unwrap();
        assert_eq!(pool.entries()[p].refs(), 2);
        assert_eq!(pool.param_count(), 8);
        let before = (l1.materialize_weight(&store).unwrap(), l2.materialize_weight(&store).unwrap());
        let a0 = l1.a_ids()[0];
        store.value_mut(a0).data_mut()[0] += 1.0;
        assert_ne!(l1.materialize_weight(&store).unwrap(), before.0);
        assert_ne!(l2.materialize_weight(&store).unwrap(), before.1);
    }
}
