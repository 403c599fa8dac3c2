//! Central finite-difference checks of the analytic gradients, and the
//! factored-versus-materialized PHM equivalence check.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::generator::{ArchVariant, Depth, Flavor, GeneratorConfig, InputSource, Nonlinearity, PromptGenerator, SentenceEncoder, Sharing};
use crate::nn::{Backbone, ClassifierHead, ForwardCtx, HeadMode, Target, TransformerConfig, LN_EPS};
use crate::params::{self, ParamGroup, ParamId, ParamStore};
use crate::phm::{PhmLinear, PhmPath, PhmSpec, SharedAPool};
use crate::tensor::{Tape, Tensor, Var};

/// Step of the central difference `(f(x+h) − f(x−h)) / 2h`.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error. Central differences of an O(1)
/// loss carry about `ε·|f|/h ≈ 1e-11` of rounding noise, which on an entry
/// whose true gradient is exactly zero (a key bias under softmax, say) would
/// otherwise show up as a relative error near 1e-4.
pub const REL_FLOOR: f64 = 1e-5;
/// Entries probed per parameter or input tensor.
const PROBES_PER_TENSOR: usize = 6;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCase {
    pub name: String,
    pub seed: u64,
    pub entries: usize,
    pub worst_rel: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub cases: Vec<GradCase>,
}

impl GradReport {
    /// Worst relative error per case name over all seeds.
    pub fn by_name(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for c in &self.cases {
            let e = out.entry(c.name.clone()).or_insert(0.0f64);
            *e = e.max(c.worst_rel);
        }
        out
    }

    pub fn worst(&self) -> f64 {
        self.cases.iter().map(|c| c.worst_rel).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() <= GRAD_TOLERANCE
    }
}

/// A differentiable function of the store's parameters and some input
/// tensors, reduced to a scalar by a fixed random projection.
trait Probe {
    fn output(&self, tape: &mut Tape<f64>, store: &ParamStore<f64>, inputs: &[Var]) -> Result<Var>;
}

impl<F> Probe for F
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    fn output(&self, tape: &mut Tape<f64>, store: &ParamStore<f64>, inputs: &[Var]) -> Result<Var> {
        self(tape, store, inputs)
    }
}

struct Checker<'a> {
    name: String,
    seed: u64,
    store: ParamStore<f64>,
    inputs: Vec<Tensor<f64>>,
    probe: &'a dyn Probe,
    projection: Vec<f64>,
}

impl<'a> Checker<'a> {
    fn new(
        name: impl Into<String>,
        seed: u64,
        store: ParamStore<f64>,
        inputs: Vec<Tensor<f64>>,
        probe: &'a dyn Probe,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut c = Self {
            name: name.into(),
            seed,
            store,
            inputs,
            probe,
            projection: Vec::new(),
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = c.inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = c.probe.output(&mut tape, &c.store, &vars)?;
        c.projection = (0..tape.value(out).numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Ok(c)
    }

    fn scalar(&self, tape: &mut Tape<f64>, inputs: &[Var]) -> Result<Var> {
        let out = self.probe.output(tape, &self.store, inputs)?;
        let weighted = tape.mul_const(out, self.projection.clone())?;
        Ok(tape.sum(weighted))
    }

    fn value(&self) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let s = self.scalar(&mut tape, &vars)?;
        Ok(tape.value(s).data()[0])
    }

    fn numeric(&mut self, mut poke: impl FnMut(&mut Self, f64)) -> Result<f64> {
        poke(self, FD_STEP);
        let plus = self.value();
        poke(self, -2.0 * FD_STEP);
        let minus = self.value();
        poke(self, FD_STEP);
        Ok((plus? - minus?) / (2.0 * FD_STEP))
    }

    fn run(mut self, rng: &mut ChaCha8Rng) -> Result<GradCase> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let s = self.scalar(&mut tape, &vars)?;
        tape.backward(s)?;
        let param_grads: BTreeMap<ParamId, Tensor<f64>> = tape.param_grads().into_iter().collect();
        let input_grads: Vec<Option<Tensor<f64>>> = vars.iter().map(|&v| tape.grad(v)).collect();

        let mut worst = 0.0f64;
        let mut entries = 0;
        let ids: Vec<ParamId> = self.store.trainable_ids();
        for id in ids {
            let n = self.store.value(id).numel();
            for k in probe_indices(n, rng) {
                let analytic = param_grads.get(&id).map_or(0.0, |g| g.data()[k]);
                let numeric = self.numeric(|c, dx| c.store.value_mut(id).data_mut()[k] += dx)?;
                worst = worst.max(relative_error(analytic, numeric));
                entries += 1;
            }
        }
        for i in 0..self.inputs.len() {
            let n = self.inputs[i].numel();
            for k in probe_indices(n, rng) {
                let analytic = input_grads[i].as_ref().map_or(0.0, |g| g.data()[k]);
                let numeric = self.numeric(|c, dx| c.inputs[i].data_mut()[k] += dx)?;
                worst = worst.max(relative_error(analytic, numeric));
                entries += 1;
            }
        }
        Ok(GradCase {
            name: self.name,
            seed: self.seed,
            entries,
            worst_rel: worst,
        })
    }
}

fn probe_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= PROBES_PER_TENSOR {
        (0..n).collect()
    } else {
        rand::seq::index::sample(rng, n, PROBES_PER_TENSOR).into_vec()
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    params::normal(shape, 1.0, rng)
}

fn phm_cases(seed: u64, rng: &mut ChaCha8Rng, out: &mut Vec<GradCase>) -> Result<()> {
    let n = *[1usize, 2, 4].choose(rng).expect("nonempty");
    let d = n * rng.random_range(1..=4);
    let m = n * rng.random_range(1..=4);
    let num_biases = rng.random_range(1..=2);
    let bias_index = rng.random_range(0..num_biases);
    let mut store = ParamStore::new();
    let mut pool = SharedAPool::new();
    let p = pool.create(&mut store, "a", n, ParamGroup::Generator, rng)?;
    let spec = PhmSpec {
        name: "l",
        n,
        in_dim: d,
        out_dim: m,
        num_biases,
        group: ParamGroup::Generator,
        component: "W",
    };
    let layer = PhmLinear::new(&mut store, &mut pool, p, spec, rng)?;
    for &b in layer.bias_ids() {
        store.set_value(b, random(&[m], rng))?;
    }
    for (path, label) in [(PhmPath::Materialized, "materialized"), (PhmPath::Blocked, "blocked")] {
        let f = |tape: &mut Tape<f64>, store: &ParamStore<f64>, x: &[Var]| layer.forward_with(tape, store, x[0], bias_index, path);
        let x = random(&[d], rng);
        out.push(Checker::new(format!("phm-layer/{label}"), seed, store.clone(), vec![x], &f, rng)?.run(rng)?);
    }
    Ok(())
}

const ARCHS: [(ArchVariant, &str); 4] = [
    (ArchVariant::Plain, "plain"),
    (ArchVariant::Residual, "residual"),
    (ArchVariant::LayerNorm, "layer-norm"),
    (ArchVariant::ResidualLayerNorm, "residual-layer-norm"),
];

fn generator_cases(seed: u64, rng: &mut ChaCha8Rng, out: &mut Vec<GradCase>) -> Result<()> {
    let layers = 2;
    let d = 4;
    let nonlinearity = [Nonlinearity::Tanh, Nonlinearity::Relu, Nonlinearity::Gelu][seed as usize % 3];
    let sharing = [Sharing::S, Sharing::M, Sharing::L][(seed as usize / 3) % 3];
    let depth = if seed.is_multiple_of(2) { Depth::Multi } else { Depth::Single };
    for (flavor, fname) in [(Flavor::Dnn, "dnn"), (Flavor::Phm { n: 2 }, "phm")] {
        for (arch, aname) in ARCHS {
            // Odd seeds feed a 6-wide word-vector rep so residual variants
            // exercise their projection onto the model width.
            let encoder = if seed % 2 == 1 {
                SentenceEncoder::BagOfVectors { dim: 6 }
            } else {
                SentenceEncoder::BackboneCls
            };
            let config = GeneratorConfig {
                flavor,
                prompt_len: 2,
                hidden: 4,
                model_dim: d,
                depth,
                sharing,
                input_source: InputSource::Layer0,
                encoder,
                arch,
                nonlinearity,
            };
            let enc = config.enc_dim();
            let mut store = ParamStore::new();
            let generator = PromptGenerator::new(&mut store, config, layers, rng)?;
            let ids: Vec<ParamId> = store.trainable_ids();
            for id in ids {
                let shape = store.value(id).shape().to_vec();
                let noisy = store.value(id).add(&params::normal(&shape, 0.3, rng))?;
                store.set_value(id, noisy)?;
            }
            let layer = if depth == Depth::Multi { rng.random_range(0..layers) } else { 0 };
            let f = |tape: &mut Tape<f64>, store: &ParamStore<f64>, x: &[Var]| generator.generate(tape, store, x[0], layer);
            let rep = random(&[enc], rng);
            let name = format!("generator/{fname}/{aname}");
            out.push(Checker::new(name, seed, store, vec![rep], &f, rng)?.run(rng)?);
        }
    }
    Ok(())
}

fn attention_case(seed: u64, rng: &mut ChaCha8Rng, out: &mut Vec<GradCase>) -> Result<()> {
    let cfg = TransformerConfig {
        num_layers: 1,
        hidden: 4,
        heads: 2,
        ffn_inner: 8,
        vocab_size: 10,
        max_seq: 8,
        dropout_rate: 0.0,
    };
    let mut store = ParamStore::new();
    let backbone = Backbone::new(&mut store, cfg, rng)?;
    let seq = 4;
    let mask: Option<Vec<bool>> = (seed % 2 == 1).then(|| (0..seq).map(|i| i == seq - 1).collect());
    let f = |tape: &mut Tape<f64>, store: &ParamStore<f64>, x: &[Var]| {
        Ok(backbone.layer(tape, store, 0, x[0], mask.as_deref(), &mut ForwardCtx::eval())?.output)
    };
    let h = random(&[seq, 4], rng);
    out.push(Checker::new("attention-block", seed, store, vec![h], &f, rng)?.run(rng)?);
    Ok(())
}

fn layer_norm_case(seed: u64, rng: &mut ChaCha8Rng, out: &mut Vec<GradCase>) -> Result<()> {
    let f = |tape: &mut Tape<f64>, _: &ParamStore<f64>, x: &[Var]| tape.layer_norm(x[0], x[1], x[2], LN_EPS);
    let inputs = vec![random(&[3, 5], rng), random(&[5], rng), random(&[5], rng)];
    out.push(Checker::new("layer-norm", seed, ParamStore::new(), inputs, &f, rng)?.run(rng)?);
    Ok(())
}

fn classifier_cases(seed: u64, rng: &mut ChaCha8Rng, out: &mut Vec<GradCase>) -> Result<()> {
    let d = 5;
    for (mode, target, name) in [
        (HeadMode::Classification { num_labels: 3 }, Target::Class(seed as usize % 3), "classifier-loss/cross-entropy"),
        (HeadMode::Regression, Target::Real(0.4), "classifier-loss/squared-error"),
    ] {
        let mut store = ParamStore::new();
        let head = ClassifierHead::new(&mut store, d, mode, rng)?;
        let f = |tape: &mut Tape<f64>, store: &ParamStore<f64>, x: &[Var]| {
            let o = head.classify(tape, store, x[0])?;
            head.loss(tape, o, target)
        };
        let h = random(&[d], rng);
        out.push(Checker::new(name, seed, store, vec![h], &f, rng)?.run(rng)?);
    }
    Ok(())
}

/// Composite of the remaining tape operations.
fn tensor_ops_case(seed: u64, rng: &mut ChaCha8Rng, out: &mut Vec<GradCase>) -> Result<()> {
    let f = |tape: &mut Tape<f64>, _: &ParamStore<f64>, x: &[Var]| {
        let xw = tape.matmul(x[0], x[1])?;
        let t = tape.tanh(xw);
        let y = tape.softmax(t, 1)?;
        let k = tape.kron(x[2], x[3])?;
        let xk = tape.matmul(x[0], k)?;
        let z = tape.gelu(xk);
        let both = tape.concat_cols(&[y, z])?;
        let tr = tape.transpose(both)?;
        let rows = tape.gather_rows(tr, &[0, 3, 3, 6])?;
        let lp = tape.log_softmax(rows)?;
        let top = tape.slice_rows(lp, 1, 2)?;
        let m = tape.mul(top, top)?;
        Ok(tape.mean(m))
    };
    let inputs = vec![random(&[3, 4], rng), random(&[4, 3], rng), random(&[2, 2], rng), random(&[2, 2], rng)];
    out.push(Checker::new("tensor-ops", seed, ParamStore::new(), inputs, &f, rng)?.run(rng)?);
    Ok(())
}

/// Every case for one seed.
pub fn check_seed(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    tensor_ops_case(seed, &mut rng, &mut out)?;
    layer_norm_case(seed, &mut rng, &mut out)?;
    attention_case(seed, &mut rng, &mut out)?;
    phm_cases(seed, &mut rng, &mut out)?;
    generator_cases(seed, &mut rng, &mut out)?;
    classifier_cases(seed, &mut rng, &mut out)?;
    Ok(out)
}

/// The full suite over `seeds` in 64-bit precision.
pub fn run_suite(seeds: impl IntoIterator<Item = u64>) -> Result<GradReport> {
    let mut cases = Vec::new();
    for s in seeds {
        cases.extend(check_seed(s)?);
    }
    Ok(GradReport { cases })
}

/// Largest accepted elementwise gap between the factored and the
/// materialized PHM forward.
pub const ORACLE_TOLERANCE: f64 = 1e-10;
pub const ORACLE_FACTORS: [usize; 5] = [1, 2, 4, 8, 16];
pub const ORACLE_MAX_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCase {
    pub n: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub max_abs_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub cases: Vec<OracleCase>,
}

impl OracleReport {
    pub fn worst(&self) -> f64 {
        self.cases.iter().map(|c| c.max_abs_diff).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() <= ORACLE_TOLERANCE
    }
}

/// Compares the blocked PHM forward `A·(X Bᵀ)` and the taped materialized
/// route against `W·x + b` with `W = Σᵢ Aᵢ⊗Bᵢ` built outside the tape, over
/// `count` random configurations with `n ∈ {1,2,4,8,16}` and `m, d ≤ 64`.
pub fn oracle_check(count: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(count);
    for _ in 0..count {
        let n = *ORACLE_FACTORS.choose(&mut rng).expect("nonempty");
        let d = n * rng.random_range(1..=ORACLE_MAX_DIM / n);
        let m = n * rng.random_range(1..=ORACLE_MAX_DIM / n);
        let mut store = ParamStore::<f64>::new();
        let mut pool = SharedAPool::new();
        let p = pool.create(&mut store, "a", n, ParamGroup::Generator, &mut rng)?;
        let spec = PhmSpec {
            name: "l",
            n,
            in_dim: d,
            out_dim: m,
            num_biases: 1,
            group: ParamGroup::Generator,
            component: "W",
        };
        let layer = PhmLinear::new(&mut store, &mut pool, p, spec, &mut rng)?;
        let bias = random(&[m], &mut rng);
        store.set_value(layer.bias_ids()[0], bias.clone())?;
        let x = random(&[d], &mut rng);
        let w = layer.materialize_weight(&store)?;
        let reference = w.matmul(&x.reshaped(&[d, 1])?)?.reshaped(&[m])?.add(&bias)?;
        let mut diff = 0.0f64;
        for path in [PhmPath::Blocked, PhmPath::Materialized] {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = layer.forward_with(&mut tape, &store, xv, 0, path)?;
            diff = diff.max(tape.value(y).max_abs_diff(&reference));
        }
        cases.push(OracleCase {
            n,
            in_dim: d,
            out_dim: m,
            max_abs_diff: diff,
        });
    }
    Ok(OracleReport { cases })
}
