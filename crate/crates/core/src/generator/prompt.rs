//! The bottleneck generator `G`: down-projection, nonlinearity,
//! up-projection to `t·d`, reshaped into `t` prompt rows.

use rand::Rng;

use super::config::{ArchVariant, Flavor, GeneratorConfig, Nonlinearity, Sharing};
use super::projection::{DenseLinear, Projection};
use crate::error::{Error, Result};
use crate::nn::LN_EPS;
use crate::params::{NewParam, ParamGroup, ParamId, ParamKind, ParamStore};
use crate::phm::{PhmLinear, PhmSpec, SharedAPool};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// One (down, up) pair. M-sharing keeps several up biases in one set.
#[derive(Clone, Debug)]
pub struct GeneratorSet {
    pub down: Projection,
    pub up: Projection,
}

#[derive(Clone, Copy, Debug)]
struct NormParams {
    gain: ParamId,
    shift: ParamId,
}

#[derive(Clone, Debug)]
pub struct PromptGenerator {
    pub config: GeneratorConfig,
    pub num_layers: usize,
    pub sets: Vec<GeneratorSet>,
    pub pool: SharedAPool,
    /// `enc_dim → d` map used by the residual variants when the widths differ.
    residual_map: Option<DenseLinear>,
    /// Normalization of generated rows (`LayerNorm`, `ResidualLayerNorm`).
    row_norm: Option<NormParams>,
    /// `ResidualLayerNorm` only: norm of the rep and of the final sum.
    rep_norm: Option<NormParams>,
    out_norm: Option<NormParams>,
}

fn norm_params<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<NormParams> {
    let mut add = |suffix: &str, value: Tensor<T>| {
        store.add(
            NewParam {
                path: &format!("gen/{name}.{suffix}"),
                kind: ParamKind::Norm,
                group: ParamGroup::Generator,
                component: "arch",
            },
            value,
        )
    };
    Ok(NormParams {
        gain: add("gain", Tensor::full(&[d], T::one()))?,
        shift: add("shift", Tensor::zeros(&[d]))?,
    })
}

fn phm_spec<'a>(name: &'a str, n: usize, (in_dim, out_dim): (usize, usize), num_biases: usize, component: &'a str) -> PhmSpec<'a> {
    PhmSpec {
        name,
        n,
        in_dim,
        out_dim,
        num_biases,
        group: ParamGroup::Generator,
        component,
    }
}

impl PromptGenerator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: GeneratorConfig,
        num_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(num_layers)?;
        let (t, m, d, enc) = (config.prompt_len, config.hidden, config.model_dim, config.enc_dim());
        let up_biases = config.up_biases(num_layers);
        let mut pool = SharedAPool::new();
        let mut sets = Vec::new();
        for s in 0..config.num_sets(num_layers) {
            let set = match config.flavor {
                Flavor::Dnn => GeneratorSet {
                    down: Projection::Dense(DenseLinear::new(store, &format!("gen/{s}/down"), (enc, m), 1, "W1", rng)?),
                    up: Projection::Dense(DenseLinear::new(
                        store,
                        &format!("gen/{s}/up"),
                        (m, t * d),
                        up_biases,
                        "W2",
                        rng,
                    )?),
                },
                Flavor::Phm { n } => {
                    let (pd, pu) = if config.a_pools_per_set() == 1 {
                        let p = pool.create(store, &format!("gen{s}.a"), n, ParamGroup::Generator, rng)?;
                        (p, p)
                    } else {
                        let pd = pool.create(store, &format!("gen{s}.a_down"), n, ParamGroup::Generator, rng)?;
                        let pu = pool.create(store, &format!("gen{s}.a_up"), n, ParamGroup::Generator, rng)?;
                        (pd, pu)
                    };
                    let down_name = format!("gen{s}.down");
                    let up_name = format!("gen{s}.up");
                    let down_spec = phm_spec(&down_name, n, (enc, m), 1, "W1");
                    let up_spec = phm_spec(&up_name, n, (m, t * d), up_biases, "W2");
                    GeneratorSet {
                        down: Projection::Phm(PhmLinear::new(store, &mut pool, pd, down_spec, rng)?),
                        up: Projection::Phm(PhmLinear::new(store, &mut pool, pu, up_spec, rng)?),
                    }
                }
            };
            sets.push(set);
        }
        let residual = matches!(config.arch, ArchVariant::Residual | ArchVariant::ResidualLayerNorm);
        let residual_map = if residual && enc != d {
            Some(DenseLinear::new(store, "gen/residual", (enc, d), 1, "arch", rng)?)
        } else {
            None
        };
        let (row_norm, rep_norm, out_norm) = match config.arch {
            ArchVariant::Plain | ArchVariant::Residual => (None, None, None),
            ArchVariant::LayerNorm => (Some(norm_params(store, "row_norm", d)?), None, None),
            ArchVariant::ResidualLayerNorm => (
                Some(norm_params(store, "row_norm", d)?),
                Some(norm_params(store, "rep_norm", d)?),
                Some(norm_params(store, "out_norm", d)?),
            ),
        };
        Ok(Self {
            config,
            num_layers,
            sets,
            pool,
            residual_map,
            row_norm,
            rep_norm,
            out_norm,
        })
    }

    /// `(set, up-bias)` used when generating for `layer`.
    fn route(&self, layer: usize) -> Result<(usize, usize)> {
        let limit = if self.config.is_multi() { self.num_layers } else { 1 };
        if layer >= limit {
            return Err(Error::Index {
                what: "generator layer",
                index: layer,
                len: limit,
            });
        }
        Ok(match (self.config.is_multi(), self.config.sharing) {
            (false, _) | (true, Sharing::S) => (0, 0),
            (true, Sharing::M) => (0, layer),
            (true, Sharing::L) => (layer, 0),
        })
    }

    /// Prompt rows `[t×d]` for sentence representation `rep` at `layer`.
    pub fn generate<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, rep: Var, layer: usize) -> Result<Var> {
        let (set, up_bias) = self.route(layer)?;
        let set = &self.sets[set];
        let (t, d) = (self.config.prompt_len, self.config.model_dim);
        let h = set.down.forward(tape, store, rep, 0)?;
        let h = match self.config.nonlinearity {
            Nonlinearity::Tanh => tape.tanh(h),
            Nonlinearity::Relu => tape.relu(h),
            Nonlinearity::Gelu => tape.gelu(h),
        };
        let y = set.up.forward(tape, store, h, up_bias)?;
        let rows = tape.reshape(y, &[t, d])?;
        let eps = T::from_f64(LN_EPS);
        let norm = |tape: &mut Tape<T>, x: Var, p: NormParams| -> Result<Var> {
            let g = tape.param(store, p.gain);
            let s = tape.param(store, p.shift);
            tape.layer_norm(x, g, s, eps)
        };
        match self.config.arch {
            ArchVariant::Plain => Ok(rows),
            ArchVariant::LayerNorm => norm(tape, rows, self.row_norm.expect("row norm")),
            ArchVariant::Residual => {
                let r = self.residual_input(tape, store, rep)?;
                tape.add_row(rows, r)
            }
            ArchVariant::ResidualLayerNorm => {
                let r = self.residual_input(tape, store, rep)?;
                let r = tape.reshape(r, &[1, d])?;
                let r = norm(tape, r, self.rep_norm.expect("rep norm"))?;
                let r = tape.reshape(r, &[d])?;
                let rows = norm(tape, rows, self.row_norm.expect("row norm"))?;
                let sum = tape.add_row(rows, r)?;
                norm(tape, sum, self.out_norm.expect("out norm"))
            }
        }
    }

    fn residual_input<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, rep: Var) -> Result<Var> {
        match &self.residual_map {
            Some(map) => map.forward(tape, store, rep, 0),
            None => Ok(rep),
        }
    }

    /// Sets every down and up weight (dense matrices or PHM `Bᵢ`) to zero.
    /// The generated prompt then equals the selected up bias for any input.
    pub fn zero_weights<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for set in &self.sets {
            for id in set.down.weight_ids().into_iter().chain(set.up.weight_ids()) {
                store.value_mut(id).data_mut().fill(T::zero());
            }
        }
    }

    /// Up bias parameter used at `layer`.
    pub fn up_bias_id(&self, layer: usize) -> Result<ParamId> {
        let (set, b) = self.route(layer)?;
        Ok(self.sets[set].up.bias_ids()[b])
    }

    /// All parameters owned by the generator, in registration order.
    pub fn param_ids<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        store
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::Generator)
            .map(|(id, _)| id)
            .collect()
    }
}

/// Trainable scalars of a dense generator, biases included.
///
/// `sharing: None` is the single-layer generator `m(d_enc+1) + t·d(m+1)`.
/// Multi-layer variants use `num_layers` layers: S equals the single
/// count, M adds one `t·d` up bias per layer on top of shared weights, L
/// repeats the single generator per layer.
pub fn dnn_generator_param_count(
    m: usize,
    d_enc: usize,
    t: usize,
    d: usize,
    sharing: Option<Sharing>,
    num_layers: usize,
) -> u64 {
    let (m, de, td, nl) = (m as u64, d_enc as u64, (t * d) as u64, num_layers as u64);
    let single = m * (de + 1) + td * (m + 1);
    match sharing {
        None | Some(Sharing::S) => single,
        Some(Sharing::M) => m * de + m + m * td + td * nl,
        Some(Sharing::L) => single * nl,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::config::{Depth, InputSource, SentenceEncoder};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(flavor: Flavor, depth: Depth, sharing: Sharing) -> GeneratorConfig {
        GeneratorConfig {
            flavor,
            prompt_len: 3,
            hidden: 4,
            model_dim: 8,
            depth,
            sharing,
            input_source: InputSource::Layer0,
            encoder: SentenceEncoder::BackboneCls,
            arch: ArchVariant::Plain,
            nonlinearity: Nonlinearity::Tanh,
        }
    }

    fn run(g: &PromptGenerator, store: &ParamStore<f64>, rep: &[f64], layer: usize) -> Tensor<f64> {
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::vector(rep.to_vec()));
        let out = g.generate(&mut tape, store, r, layer).unwrap();
        tape.value(out).clone()
    }

    fn rep(seed: u64, d: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn dnn_count_formula() {
        assert_eq!(dnn_generator_param_count(256, 1024, 5, 1024, None, 1), 1_578_240);
        assert_eq!(dnn_generator_param_count(16, 1024, 5, 1024, Some(Sharing::M), 24), 221_200);
        assert_eq!(dnn_generator_param_count(1, 1, 1, 1, None, 1), 4);
        for (depth, sharing, layers) in [
            (Depth::Single, Sharing::S, 1),
            (Depth::Multi, Sharing::S, 3),
            (Depth::Multi, Sharing::M, 3),
            (Depth::Multi, Sharing::L, 3),
        ] {
            let mut store = ParamStore::<f64>::new();
            PromptGenerator::new(&mut store, cfg(Flavor::Dnn, depth, sharing), layers, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap();
            let s = (depth == Depth::Multi).then_some(sharing);
            assert_eq!(trainable(&store) as u64, dnn_generator_param_count(4, 8, 3, 8, s, layers));
        }
    }

    #[test]
    fn dnn_hand_example() {
        let mut c = cfg(Flavor::Dnn, Depth::Single, Sharing::S);
        c.prompt_len = 1;
        c.hidden = 1;
        c.model_dim = 2;
        let mut store = ParamStore::<f64>::new();
        let g = PromptGenerator::new(&mut store, c, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (Projection::Dense(down), Projection::Dense(up)) = (&g.sets[0].down, &g.sets[0].up) else {
            panic!("dense expected")
        };
        store.set_value(down.weight, Tensor::from_rows(&[&[1.0, 0.0]]).unwrap()).unwrap();
        store.set_value(up.weight, Tensor::from_rows(&[&[1.0], &[2.0]]).unwrap()).unwrap();
        let out = run(&g, &store, &[0.5, 9.0], 0);
        assert_eq!(out.shape(), &[1, 2]);
        assert!((out.data()[0] - 0.46211716).abs() < 1e-8);
        assert!((out.data()[1] - 0.92423431).abs() < 1e-8);
    }

    #[test]
    fn zero_weights_degenerate_to_bias() {
        for flavor in [Flavor::Dnn, Flavor::Phm { n: 2 }] {
            let mut store = ParamStore::<f64>::new();
            let g = PromptGenerator::new(&mut store, cfg(flavor, Depth::Single, Sharing::S), 1, &mut ChaCha8Rng::seed_from_u64(1))
                .unwrap();
            g.zero_weights(&mut store);
            let b = g.up_bias_id(0).unwrap();
            let beta = Tensor::from_fn(&[24], |i| (i as f64) * 0.1 - 1.0);
            store.set_value(b, beta.clone()).unwrap();
            for seed in 0..5 {
                let out = run(&g, &store, &rep(seed, 8), 0);
                assert_eq!(out, beta.reshaped(&[3, 8]).unwrap());
            }
        }
    }

    #[test]
    fn instance_dependent() {
        let mut store = ParamStore::<f64>::new();
        let g = PromptGenerator::new(
            &mut store,
            cfg(Flavor::Phm { n: 2 }, Depth::Single, Sharing::S),
            1,
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        for k in 0..50 {
            let a = run(&g, &store, &rep(2 * k, 8), 0);
            let b = run(&g, &store, &rep(2 * k + 1, 8), 0);
            let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!(diff > 1e-8);
        }
    }

    #[test]
    fn phm_n1_matches_dnn() {
        let mut ds = ParamStore::<f64>::new();
        let dnn = PromptGenerator::new(&mut ds, cfg(Flavor::Dnn, Depth::Single, Sharing::S), 1, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        let mut ps = ParamStore::<f64>::new();
        let phm = PromptGenerator::new(
            &mut ps,
            cfg(Flavor::Phm { n: 1 }, Depth::Single, Sharing::S),
            1,
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        let a = phm.pool.entries()[0].ids[0];
        ps.set_value(a, Tensor::full(&[1, 1], 1.0)).unwrap();
        for (ds_set, ps_set) in dnn.sets.iter().zip(&phm.sets) {
            for (src, dst) in [(&ds_set.down, &ps_set.down), (&ds_set.up, &ps_set.up)] {
                for (s, t) in src.weight_ids().into_iter().zip(dst.weight_ids()) {
                    ps.set_value(t, ds.value(s).clone()).unwrap();
                }
                for (s, t) in src.bias_ids().into_iter().zip(dst.bias_ids()) {
                    ps.set_value(t, Tensor::from_fn(&[ds.value(s).numel()], |i| 0.01 * i as f64)).unwrap();
                    ds.set_value(s, Tensor::from_fn(&[ds.value(s).numel()], |i| 0.01 * i as f64)).unwrap();
                }
            }
        }
        let r = rep(9, 8);
        let x = run(&dnn, &ds, &r, 0);
        let y = run(&phm, &ps, &r, 0);
        assert!(x.max_abs_diff(&y) < 1e-10);
    }

    fn trainable(store: &ParamStore<f64>) -> usize {
        store.iter().map(|(_, p)| p.value().numel()).sum()
    }

    #[test]
    fn sharing_counts_ordered() {
        for flavor in [Flavor::Dnn, Flavor::Phm { n: 2 }] {
            let counts: Vec<usize> = [Sharing::S, Sharing::M, Sharing::L]
                .into_iter()
                .map(|s| {
                    let mut store = ParamStore::<f64>::new();
                    PromptGenerator::new(&mut store, cfg(flavor, Depth::Multi, s), 3, &mut ChaCha8Rng::seed_from_u64(0))
                        .unwrap();
                    trainable(&store)
                })
                .collect();
            assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
        }
    }

    #[test]
    fn s_is_layer_invariant_and_m_is_not() {
        let r = rep(5, 8);
        let mut store = ParamStore::<f64>::new();
        let s = PromptGenerator::new(&mut store, cfg(Flavor::Phm { n: 2 }, Depth::Multi, Sharing::S), 3, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let l0 = run(&s, &store, &r, 0);
        assert_eq!(run(&s, &store, &r, 1), l0);
        assert_eq!(run(&s, &store, &r, 2), l0);

        let mut store = ParamStore::<f64>::new();
        let m = PromptGenerator::new(&mut store, cfg(Flavor::Phm { n: 2 }, Depth::Multi, Sharing::M), 3, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        for l in 0..3 {
            let b = m.up_bias_id(l).unwrap();
            store.set_value(b, Tensor::full(&[24], l as f64)).unwrap();
        }
        let outs: Vec<_> = (0..3).map(|l| run(&m, &store, &r, l)).collect();
        assert_ne!(outs[0], outs[1]);
        assert_ne!(outs[1], outs[2]);
    }

    #[test]
    fn layer_index_checked() {
        let mut store = ParamStore::<f64>::new();
        let g = PromptGenerator::new(&mut store, cfg(Flavor::Dnn, Depth::Single, Sharing::S), 4, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::zeros(&[8]));
        assert!(matches!(g.generate(&mut tape, &store, r, 1), Err(Error::Index { .. })));
        let mut store = ParamStore::<f64>::new();
        let g = PromptGenerator::new(&mut store, cfg(Flavor::Dnn, Depth::Multi, Sharing::M), 4, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::zeros(&[8]));
        assert!(g.generate(&mut tape, &store, r, 3).is_ok());
        assert!(g.generate(&mut tape, &store, r, 4).is_err());
    }

    #[test]
    fn arch_variants_shapes_and_norms() {
        for arch in [ArchVariant::Residual, ArchVariant::LayerNorm, ArchVariant::ResidualLayerNorm] {
            for enc in [SentenceEncoder::BackboneCls, SentenceEncoder::BagOfVectors { dim: 6 }] {
                let mut c = cfg(Flavor::Phm { n: 2 }, Depth::Single, Sharing::S);
                c.arch = arch;
                c.encoder = enc;
                let mut store = ParamStore::<f64>::new();
                let g = PromptGenerator::new(&mut store, c.clone(), 1, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
                let out = run(&g, &store, &rep(1, c.enc_dim()), 0);
                assert_eq!(out.shape(), &[3, 8]);
                if arch != ArchVariant::Residual {
                    for r in 0..3 {
                        let mean: f64 = out.row(r).iter().sum::<f64>() / 8.0;
                        assert!(mean.abs() < 1e-9);
                    }
                }
            }
        }
    }
}
