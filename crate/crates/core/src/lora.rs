//! Low-rank adapters: `y = x·Wᵀ + b + (α/r)·(x·Aᵀ)·Bᵀ` with `W` frozen.
//!
//! `A` (`r×in`) starts as N(0, 0.02²) and `B` (`out×r`) as zeros, so a freshly
//! attached adapter leaves the host map's output bit-identical. Adapter
//! tensors are stored as `<host>.lora.A` / `<host>.lora.B`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{normal_tensor, LinearMap};
use crate::params::{ParamGroup, ParamId, ParameterStore};
use crate::tensor::{Graph, Tensor, Var};

pub const LORA_A_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub a: ParamId,
    pub b: ParamId,
    pub host: String,
}

impl LoraAdapter {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Number of adapter parameters, `r·(in + out)`.
    pub fn param_count(&self, in_dim: usize, out_dim: usize) -> usize {
        self.rank * (in_dim + out_dim)
    }

    pub(crate) fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let a = g.param(self.a);
        let b = g.param(self.b);
        let h = g.matmul_bt(x, a)?;
        let d = g.matmul_bt(h, b)?;
        g.scale(d, self.scaling())
    }
}

impl LinearMap {
    /// Attaches a rank-`rank` adapter and freezes the base weight. The
    /// adapter's tensors go into `group` and are left trainable.
    pub fn attach_lora(
        &mut self,
        store: &mut ParameterStore,
        rank: usize,
        alpha: f64,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Result<&LoraAdapter> {
        if self.lora.is_some() {
            return Err(Error::Config(format!(
                "`{}` already has a LoRA adapter",
                self.name
            )));
        }
        if rank == 0 || rank > self.in_dim.min(self.out_dim) {
            return Err(Error::Config(format!(
                "LoRA rank {rank} invalid for `{}` ({}→{})",
                self.name, self.in_dim, self.out_dim
            )));
        }
        let a = store.insert(
            format!("{}.lora.A", self.name),
            normal_tensor(rng, &[rank, self.in_dim], LORA_A_STD),
            group,
        )?;
        let b = store.insert(
            format!("{}.lora.B", self.name),
            Tensor::zeros(&[self.out_dim, rank]),
            group,
        )?;
        store.set_trainable(self.weight, false);
        store.set_trainable(a, true);
        store.set_trainable(b, true);
        Ok(self.lora.insert(LoraAdapter {
            rank,
            alpha,
            a,
            b,
            host: self.name.clone(),
        }))
    }

    /// Folds the adapter into the base weight, `W ← W + (α/r)·B·A`, and
    /// removes the adapter tensors from the store.
    pub fn merge_lora(&mut self, store: &mut ParameterStore) -> Result<()> {
        let adapter = self.lora.take().ok_or_else(|| {
            Error::Config(format!("`{}` has no LoRA adapter to merge", self.name))
        })?;
        let delta = dense_delta(store, &adapter)?;
        let mut w = store.value(self.weight).clone();
        for (wv, dv) in w.data_mut().iter_mut().zip(delta.data()) {
            *wv += dv;
        }
        store.set_value(self.weight, w)?;
        store.remove(adapter.a);
        store.remove(adapter.b);
        Ok(())
    }
}

/// `(α/r)·B·A` as a dense `out×in` tensor.
pub fn dense_delta(store: &ParameterStore, adapter: &LoraAdapter) -> Result<Tensor> {
    let mut g = Graph::with_store(store);
    let a = g.param(adapter.a);
    let b = g.param(adapter.b);
    let ba = g.matmul(b, a)?;
    let d = g.scale(ba, adapter.scaling())?;
    Ok(g.value(d).clone())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::normal_tensor;
    use crate::tensor::{grad_check, GradCheckOptions};

    fn setup(in_dim: usize, out_dim: usize) -> (ParameterStore, LinearMap, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParameterStore::new();
        let lin = LinearMap::new(
            &mut store,
            "host",
            in_dim,
            out_dim,
            true,
            ParamGroup::DecoderBase,
            &mut rng,
        )
        .unwrap();
        let bias = normal_tensor(&mut rng, &[out_dim], 0.5);
        store.set_value(lin.bias.unwrap(), bias).unwrap();
        store.set_trainable(lin.weight, true);
        store.set_trainable(lin.bias.unwrap(), true);
        (store, lin, rng)
    }

    #[test]
    fn fresh_attach_is_bit_identical() {
        let (mut store, mut lin, mut rng) = setup(5, 3);
        let x = normal_tensor(&mut rng, &[4, 5], 1.0);
        let before = lin.apply(&store, &x).unwrap();
        lin.attach_lora(&mut store, 2, 8.0, ParamGroup::LlmLora, &mut rng)
            .unwrap();
        let after = lin.apply(&store, &x).unwrap();
        assert_eq!(before.data(), after.data());
        assert!(!store.is_trainable(lin.weight));
        assert_eq!(store.id("host.lora.A"), Some(lin.lora.as_ref().unwrap().a));
    }

    #[test]
    fn double_attach_and_rank_errors() {
        let (mut store, mut lin, mut rng) = setup(5, 3);
        assert!(lin
            .attach_lora(&mut store, 4, 8.0, ParamGroup::LlmLora, &mut rng)
            .is_err());
        lin.attach_lora(&mut store, 3, 8.0, ParamGroup::LlmLora, &mut rng)
            .unwrap();
        assert!(matches!(
            lin.attach_lora(&mut store, 2, 8.0, ParamGroup::LlmLora, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn full_rank_adapter_reproduces_a_chosen_shift() {
        // in = out = r = 3, A = I, B = Δ·(r/α): output shifts by x·Δᵀ.
        let (mut store, mut lin, mut rng) = setup(3, 3);
        let x = normal_tensor(&mut rng, &[2, 3], 1.0);
        let base = lin.apply(&store, &x).unwrap();
        let (r, alpha) = (3usize, 6.0);
        let adapter = lin
            .attach_lora(&mut store, r, alpha, ParamGroup::LlmLora, &mut rng)
            .unwrap()
            .clone();
        let delta = normal_tensor(&mut rng, &[3, 3], 1.0);
        store.set_value(adapter.a, Tensor::identity(3)).unwrap();
        let b = Tensor::matrix(
            3,
            3,
            delta.data().iter().map(|v| v * r as f64 / alpha).collect(),
        )
        .unwrap();
        store.set_value(adapter.b, b).unwrap();
        let out = lin.apply(&store, &x).unwrap();
        for i in 0..2 {
            for o in 0..3 {
                let shift: f64 = (0..3).map(|k| x.at(i, k) * delta.at(o, k)).sum();
                assert!((out.at(i, o) - base.at(i, o) - shift).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adapter_path_matches_dense_weight_oracle() {
        let (mut store, mut lin, mut rng) = setup(5, 3);
        let (r, alpha) = (2usize, 8.0);
        let adapter = lin
            .attach_lora(&mut store, r, alpha, ParamGroup::LlmLora, &mut rng)
            .unwrap()
            .clone();
        store
            .set_value(adapter.a, normal_tensor(&mut rng, &[2, 5], 1.0))
            .unwrap();
        store
            .set_value(adapter.b, normal_tensor(&mut rng, &[3, 2], 1.0))
            .unwrap();

        // dense oracle: W + (α/r)·B·A, computed entry by entry
        let w = store.value(lin.weight);
        let a = store.value(adapter.a);
        let b = store.value(adapter.b);
        let bias = store.value(lin.bias.unwrap());
        let x = normal_tensor(&mut rng, &[4, 5], 1.0);
        let out = lin.apply(&store, &x).unwrap();
        for i in 0..4 {
            for o in 0..3 {
                let mut y = bias.data()[o];
                for k in 0..5 {
                    let eff = w.at(o, k)
                        + alpha / r as f64 * (0..r).map(|j| b.at(o, j) * a.at(j, k)).sum::<f64>();
                    y += x.at(i, k) * eff;
                }
                assert!((out.at(i, o) - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn merge_semantics() {
        let (mut store, mut lin, mut rng) = setup(5, 3);
        let w0 = store.value(lin.weight).clone();
        lin.attach_lora(&mut store, 2, 8.0, ParamGroup::LlmLora, &mut rng)
            .unwrap();
        lin.merge_lora(&mut store).unwrap();
        assert_eq!(
            store.value(lin.weight).data(),
            w0.data(),
            "B = 0 merge must not move W"
        );
        assert!(store.id("host.lora.A").is_none());
        assert!(matches!(lin.merge_lora(&mut store), Err(Error::Config(_))));

        let adapter = lin
            .attach_lora(&mut store, 2, 8.0, ParamGroup::LlmLora, &mut rng)
            .unwrap()
            .clone();
        store
            .set_value(adapter.b, normal_tensor(&mut rng, &[3, 2], 1.0))
            .unwrap();
        let xs: Vec<Tensor> = (0..10)
            .map(|_| normal_tensor(&mut rng, &[3, 5], 1.0))
            .collect();
        let via_adapter: Vec<Tensor> = xs.iter().map(|x| lin.apply(&store, x).unwrap()).collect();
        lin.merge_lora(&mut store).unwrap();
        for (x, y) in xs.iter().zip(&via_adapter) {
            assert!(lin.apply(&store, x).unwrap().max_abs_diff(y) < 1e-10);
        }
    }

    #[test]
    fn adapter_is_smaller_than_dense_below_break_even_rank() {
        let (mut store, mut lin, mut rng) = setup(32, 32);
        let adapter = lin
            .attach_lora(&mut store, 4, 8.0, ParamGroup::LlmLora, &mut rng)
            .unwrap();
        assert_eq!(adapter.param_count(32, 32), 256);
        assert!(adapter.param_count(32, 32) < 32 * 32);
    }

    #[test]
    fn gradients_reach_both_factors() {
        let (mut store, mut lin, mut rng) = setup(5, 3);
        let adapter = lin
            .attach_lora(&mut store, 2, 8.0, ParamGroup::LlmLora, &mut rng)
            .unwrap()
            .clone();
        store
            .set_value(adapter.b, normal_tensor(&mut rng, &[3, 2], 0.5))
            .unwrap();
        let x = normal_tensor(&mut rng, &[4, 5], 1.0);
        let report = grad_check(
            &mut store,
            |g| {
                let xv = g.constant(x.clone());
                let y = lin.forward(g, xv)?;
                let s = g.sigmoid(y)?;
                g.cross_entropy(s, &[0, 2, 1, 1], &[true; 4])
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.entries.len(), 3, "bias, A and B are trainable");
        assert!(report.max_rel_error() < 1e-6, "{}", report.max_rel_error());
    }
}
