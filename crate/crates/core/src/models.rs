//! Likelihood models: projection + shared network regression, and factor
//! analysis with a standard normal latent prior.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{ParamId, ParamStore, Tape, Var};
use crate::error::{DpmsError, Result};

/// Hidden width added by each dense-concat layer.
pub const GROWTH_RATE: usize = 10;
/// Number of dense-concat hidden layers.
pub const HIDDEN_LAYERS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// in × out
    pub weight: ParamId,
    /// 1 × out
    pub bias: ParamId,
}

/// Network whose hidden layers append `ReLU(h·W + b)` to their input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedNet {
    pub input_scale: f64,
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<DenseLayer>,
    pub output: DenseLayer,
}

impl SharedNet {
    /// Registers blocks `<name>.h<i>.w/b` and `<name>.out.w/b` with entries
    /// drawn from `U[-√(1/d_i), √(1/d_i)]`, `d_i` the layer's input width.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        input_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let a = (1.0 / fan_in as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..=a))
        };
        let mut hidden = Vec::with_capacity(HIDDEN_LAYERS);
        let mut width = input_dim;
        for i in 0..HIDDEN_LAYERS {
            let w = uniform(width, GROWTH_RATE, width);
            let b = uniform(1, GROWTH_RATE, width);
            hidden.push(DenseLayer {
                weight: store.add(format!("{name}.h{i}.w"), w)?,
                bias: store.add(format!("{name}.h{i}.b"), b)?,
            });
            width += GROWTH_RATE;
        }
        let w = uniform(width, output_dim, width);
        let b = uniform(1, output_dim, width);
        let output = DenseLayer {
            weight: store.add(format!("{name}.out.w"), w)?,
            bias: store.add(format!("{name}.out.b"), b)?,
        };
        Ok(Self {
            input_scale,
            input_dim,
            output_dim,
            hidden,
            output,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.hidden
            .iter()
            .chain(std::iter::once(&self.output))
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    /// n×k inputs → n×c outputs.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Var {
        let n = tape.shape(input).0;
        let mut h = tape.scale(input, self.input_scale);
        for layer in &self.hidden {
            let w = tape.param(store, layer.weight);
            let b = tape.param(store, layer.bias);
            let z = tape.matmul(h, w);
            let bb = tape.broadcast_rows(b, n);
            let z = tape.add(z, bb);
            let a = tape.relu(z);
            h = tape.concat_cols(&[h, a]);
        }
        let w = tape.param(store, self.output.weight);
        let b = tape.param(store, self.output.bias);
        let z = tape.matmul(h, w);
        let bb = tape.broadcast_rows(b, n);
        tape.add(z, bb)
    }

    /// Plain evaluation of [`forward`](Self::forward).
    pub fn predict(&self, store: &ParamStore, input: &Array2<f64>) -> Result<Array2<f64>> {
        if input.ncols() != self.input_dim {
            return Err(DpmsError::shape("network input", &[input.nrows(), self.input_dim], &[input.nrows(), input.ncols()]));
        }
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, store, x);
        Ok(tape.value(y).clone())
    }
}

fn check(context: &str, tape: &Tape, v: Var, expected: (usize, usize)) -> Result<()> {
    let actual = tape.shape(v);
    if actual != expected {
        return Err(DpmsError::shape(context, &[expected.0, expected.1], &[actual.0, actual.1]));
    }
    Ok(())
}

/// `Σ log N(Y | f(X·ω), ν²)` with `ν` a 1×c row of per-channel noise
/// standard deviations. `net = None` uses the identity map (linear model).
pub fn regression_log_lik(
    tape: &mut Tape,
    store: &ParamStore,
    net: Option<&SharedNet>,
    x: Var,
    y: Var,
    omega: Var,
    nu: Var,
) -> Result<Var> {
    let (n, dx) = tape.shape(x);
    let k = tape.shape(omega).1;
    check("projection weights", tape, omega, (dx, k))?;
    let c = tape.shape(y).1;
    check("targets", tape, y, (n, c))?;
    check("noise std", tape, nu, (1, c))?;
    let l = tape.matmul(x, omega);
    let pred = match net {
        Some(net) => {
            if net.input_dim != k || net.output_dim != c {
                return Err(DpmsError::shape("network", &[k, c], &[net.input_dim, net.output_dim]));
            }
            net.forward(tape, store, l)
        }
        None => {
            if k != c {
                return Err(DpmsError::shape("linear model output", &[n, c], &[n, k]));
            }
            l
        }
    };
    let sd = tape.broadcast_rows(nu, n);
    let lp = tape.normal_log_prob(y, pred, sd);
    Ok(tape.sum(lp))
}

/// `Σ log N(X | Z·Λᵀ + ηᵀ, diag(ν²))` for X n×d_x, Z n×d_z, Λ d_x×d_z and
/// η, ν as d_x×1 columns.
pub fn fa_log_lik(tape: &mut Tape, x: Var, z: Var, lambda: Var, eta: Var, nu: Var) -> Result<Var> {
    let (n, dx) = tape.shape(x);
    let dz = tape.shape(lambda).1;
    check("loadings", tape, lambda, (dx, dz))?;
    check("latents", tape, z, (n, dz))?;
    check("offsets", tape, eta, (dx, 1))?;
    check("noise std", tape, nu, (dx, 1))?;
    let eta_row = tape.transpose(eta);
    let mean = tape.broadcast_rows(eta_row, n);
    let mean = if dz > 0 {
        let zl = tape.matmul_nt(z, lambda);
        tape.add(zl, mean)
    } else {
        mean
    };
    let nu_row = tape.transpose(nu);
    let sd = tape.broadcast_rows(nu_row, n);
    let lp = tape.normal_log_prob(x, mean, sd);
    Ok(tape.sum(lp))
}

/// `Σ log N(Z | 0, I)`.
pub fn latent_prior_log_prob(tape: &mut Tape, z: Var) -> Var {
    let zero = tape.constant(Array2::zeros(tape.shape(z)));
    let one = tape.constant(Array2::ones(tape.shape(z)));
    let lp = tape.normal_log_prob(z, zero, one);
    tape.sum(lp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::LN_2PI;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(store: &mut ParamStore, scale: f64) -> SharedNet {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        SharedNet::new(store, "f", 1, 1, scale, &mut rng).unwrap()
    }

    #[test]
    fn hidden_widths_grow_by_rate() {
        let mut store = ParamStore::new();
        let f = net(&mut store, 1.0);
        assert_eq!(store.values(f.hidden[0].weight).dim(), (1, 10));
        assert_eq!(store.values(f.hidden[1].weight).dim(), (11, 10));
        assert_eq!(store.values(f.output.weight).dim(), (21, 1));
        let bound = (1.0f64 / 11.0).sqrt();
        assert!(store.values(f.hidden[1].weight).iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn zero_weights_give_output_bias() {
        let mut store = ParamStore::new();
        let f = net(&mut store, 1.0);
        for id in f.ids() {
            store.values_mut(id).fill(0.0);
        }
        store.set_values(f.output.bias, array![[0.7]]).unwrap();
        let y = f.predict(&store, &array![[1.0], [-3.0]]).unwrap();
        assert_eq!(y, array![[0.7], [0.7]]);
    }

    #[test]
    fn one_sigma_residual() {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.constant(array![[1.0, 2.0]]);
        let w = tape.constant(array![[0.5], [0.25]]);
        let y = tape.constant(array![[1.0 + 0.3]]);
        let nu = tape.constant(array![[0.3]]);
        let ll = regression_log_lik(&mut tape, &store, None, x, y, w, nu).unwrap();
        let expected = -0.5 * LN_2PI - 0.3f64.ln() - 0.5;
        assert!((tape.scalar_value(ll) - expected).abs() < 1e-14);
    }

    #[test]
    fn standard_latent_prior() {
        let mut tape = Tape::new();
        let z = tape.constant(array![[0.0, 0.0], [1.0, 1.0]]);
        let lp = latent_prior_log_prob(&mut tape, z);
        assert!((tape.scalar_value(lp) - (-2.0 * LN_2PI - 1.0)).abs() < 1e-14);
    }
}
