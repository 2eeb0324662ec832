//! Small feedforward networks, the bounded-output clip `Γ_γ`, a reverse-mode
//! tape and Adam.
//!
//! All tensors live in a [`ParamStore`]; networks only hold [`ParamId`]s into
//! it. Batches are row-major: one row per path.

mod adam;
mod tape;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::{Adam, AdamConfig};
pub use tape::{Gradients, NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tensor {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lower_bound: Option<f64>,
}

/// Flat collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
    lower_bounds: Vec<Option<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        self.lower_bounds.push(None);
        ParamId(self.tensors.len() - 1)
    }

    /// Adds a tensor that is clamped from below after every optimizer step.
    pub fn add_bounded(
        &mut self,
        name: impl Into<String>,
        value: Array2<f64>,
        lower: f64,
    ) -> ParamId {
        let id = self.add(name, value);
        self.lower_bounds[id.0] = Some(lower);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lower_bound(&self, id: ParamId) -> Option<f64> {
        self.lower_bounds[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Serializable form: names, shapes and flat row-major values.
    pub fn to_json(&self) -> serde_json::Value {
        let tensors: Vec<Tensor> = self
            .ids()
            .map(|id| {
                let t = self.get(id);
                Tensor {
                    name: self.names[id.0].clone(),
                    rows: t.nrows(),
                    cols: t.ncols(),
                    values: t.iter().copied().collect(),
                    lower_bound: self.lower_bounds[id.0],
                }
            })
            .collect();
        serde_json::to_value(tensors).expect("tensors serialize")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let tensors: Vec<Tensor> = serde_json::from_value(value.clone())
            .map_err(|e| Error::parse("checkpoint", "tensors", e))?;
        let mut store = ParamStore::new();
        for t in tensors {
            let arr = Array2::from_shape_vec((t.rows, t.cols), t.values)
                .map_err(|e| Error::parse("checkpoint", t.name.clone(), e))?;
            if arr.iter().any(|x| !x.is_finite()) {
                return Err(Error::parse("checkpoint", t.name, "non-finite value"));
            }
            let id = store.add(t.name, arr);
            store.lower_bounds[id.0] = t.lower_bound;
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: &mut Array2<f64>) {
        match self {
            Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => x.mapv_inplace(tanh),
        }
    }
}

/// `tanh` through `exp`; about twice as fast as `f64::tanh` and within a few
/// ulps of it.
pub fn tanh(x: f64) -> f64 {
    let a = x.abs();
    let y = if a < 0.0625 {
        let x2 = x * x;
        // Taylor series up to x^11
        a * (1.0
            + x2 * (-1.0 / 3.0
                + x2 * (2.0 / 15.0
                    + x2 * (-17.0 / 315.0 + x2 * (62.0 / 2835.0 + x2 * (-1382.0 / 155_925.0))))))
    } else if a > 19.0 {
        1.0
    } else {
        let e = (-2.0 * a).exp();
        (1.0 - e) / (1.0 + e)
    };
    y.copysign(x)
}

/// Inverted dropout mask: entries `0` or `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rate: f64,
    rng: &mut R,
) -> Array2<f64> {
    let keep = 1.0 / (1.0 - rate);
    let cut = (rate * 4_294_967_296.0) as u64;
    Array2::from_shape_simple_fn((rows, cols), || {
        if u64::from(rng.next_u32()) < cut {
            0.0
        } else {
            keep
        }
    })
}

/// `x · min(1, γ / |x|₂)`.
pub fn gamma_clip(x: &[f64], gamma: f64) -> Vec<f64> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n <= gamma {
        x.to_vec()
    } else {
        x.iter().map(|v| v * gamma / n).collect()
    }
}

/// Row-wise [`gamma_clip`].
pub fn gamma_clip_rows(x: &mut Array2<f64>, gamma: f64) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > gamma {
            let s = gamma / n;
            row.mapv_inplace(|v| v * s);
        }
    }
}

fn affine(x: &ArrayView2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += b;
    y
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layer {
    pub w: ParamId,
    pub b: ParamId,
}

/// Affine → activation (→ dropout) → … → affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    activation: Activation,
    sizes: Vec<usize>,
}

impl Mlp {
    /// Glorot-uniform weights and zero biases. `sizes` lists the input width,
    /// hidden widths and output width.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        sizes: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = Array2::from_shape_simple_fn((fan_in, fan_out), || {
                    rng.random_range(-limit..limit)
                });
                Layer {
                    w: store.add(format!("{prefix}.{i}.weight"), weights),
                    b: store.add(format!("{prefix}.{i}.bias"), Array2::zeros((1, fan_out))),
                }
            })
            .collect();
        Ok(Self {
            layers,
            activation,
            sizes: sizes.to_vec(),
        })
    }

    /// Rebuilds the descriptor for parameters already present in `store`
    /// (in the order [`Mlp::new`] registers them, starting at `first`).
    pub fn from_store(
        store: &ParamStore,
        first: usize,
        sizes: &[usize],
        activation: Activation,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, w) in sizes.windows(2).enumerate() {
            let wid = ParamId(first + 2 * i);
            let bid = ParamId(first + 2 * i + 1);
            if bid.0 >= store.len()
                || store.get(wid).dim() != (w[0], w[1])
                || store.get(bid).dim() != (1, w[1])
            {
                return Err(Error::invalid(format!(
                    "stored parameters do not match layer {i} of {sizes:?}"
                )));
            }
            layers.push(Layer { w: wid, b: bid });
        }
        Ok(Self {
            layers,
            activation,
            sizes: sizes.to_vec(),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().expect("nonempty")
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_width() {
            return Err(Error::invalid(format!(
                "network expects {} inputs, got {cols}",
                self.input_width()
            )));
        }
        Ok(())
    }

    /// Batched forward pass. Dropout is applied to hidden activations when
    /// `dropout` is given.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        x: ArrayView2<f64>,
        mut dropout: Option<(f64, &mut R)>,
    ) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let mut h = affine(&x, store.get(self.layers[0].w), store.get(self.layers[0].b));
        for layer in &self.layers[1..] {
            self.activation.apply(&mut h);
            if let Some((rate, rng)) = dropout.as_mut() {
                if *rate > 0.0 {
                    h *= &dropout_mask(h.nrows(), h.ncols(), *rate, *rng);
                }
            }
            h = affine(&h.view(), store.get(layer.w), store.get(layer.b));
        }
        Ok(h)
    }

    pub fn forward_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        x: NodeId,
        mut dropout: Option<(f64, &mut R)>,
    ) -> Result<NodeId> {
        self.check_input(tape.value(x).ncols())?;
        let mut h = tape.linear(x, self.layers[0].w, self.layers[0].b);
        for layer in &self.layers[1..] {
            h = tape.activation(h, self.activation);
            if let Some((rate, rng)) = dropout.as_mut() {
                if *rate > 0.0 {
                    h = tape.dropout(h, *rate, *rng);
                }
            }
            h = tape.linear(h, layer.w, layer.b);
        }
        Ok(h)
    }
}

/// `Γ_γ ∘ mlp` with a trainable radius `γ`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundedNet {
    pub inner: Mlp,
    pub gamma: ParamId,
}

/// Smallest admissible clip radius.
pub const GAMMA_MIN: f64 = 1e-6;

impl BoundedNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        sizes: &[usize],
        activation: Activation,
        gamma_init: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(gamma_init > 0.0 && gamma_init.is_finite()) {
            return Err(Error::invalid("gamma must be positive"));
        }
        let inner = Mlp::new(store, prefix, sizes, activation, rng)?;
        let gamma = store.add_bounded(
            format!("{prefix}.gamma"),
            Array2::from_elem((1, 1), gamma_init),
            GAMMA_MIN,
        );
        Ok(Self { inner, gamma })
    }

    pub fn gamma(&self, store: &ParamStore) -> f64 {
        store.get(self.gamma)[[0, 0]]
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        x: ArrayView2<f64>,
        dropout: Option<(f64, &mut R)>,
    ) -> Result<Array2<f64>> {
        let mut y = self.inner.forward(store, x, dropout)?;
        gamma_clip_rows(&mut y, self.gamma(store));
        Ok(y)
    }

    pub fn forward_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        x: NodeId,
        dropout: Option<(f64, &mut R)>,
    ) -> Result<NodeId> {
        let y = self.inner.forward_tape(tape, x, dropout)?;
        Ok(tape.gamma_clip(y, self.gamma))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type NoRng = ChaCha8Rng;

    #[test]
    fn tanh_matches_std() {
        let mut worst: f64 = 0.0;
        for i in -4000..=4000 {
            let x = i as f64 * 0.00537 + 1e-9;
            let (a, b) = (tanh(x), x.tanh());
            worst = worst.max((a - b).abs() / b.abs());
        }
        assert!(worst < 5e-15, "{worst:e}");
        assert_eq!(tanh(0.0), 0.0);
        assert_eq!(tanh(40.0), 1.0);
        assert_eq!(tanh(-40.0), -1.0);
    }

    #[test]
    fn clip_examples() {
        assert_eq!(gamma_clip(&[0.3, 0.4], 1.0), vec![0.3, 0.4]);
        let y = gamma_clip(&[3.0, 4.0], 1.0);
        assert!((y[0] - 0.6).abs() < 1e-15 && (y[1] - 0.8).abs() < 1e-15);
        assert_eq!(gamma_clip(&[0.0, 0.0], 1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&mut store, "g", &[3, 5, 2], Activation::Tanh, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).fill(0.0);
        }
        let y = net
            .forward::<NoRng>(&store, array![[1.0, -2.0, 3.0]].view(), None)
            .unwrap();
        assert_eq!(y, Array2::<f64>::zeros((1, 2)));
    }

    #[test]
    fn identity_layer() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&mut store, "id", &[2, 2], Activation::Relu, &mut rng).unwrap();
        *store.get_mut(net.layers()[0].w) = Array2::eye(2);
        let x = array![[-1.5, 2.0]];
        assert_eq!(net.forward::<NoRng>(&store, x.view(), None).unwrap(), x);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&mut store, "g", &[3, 4, 1], Activation::Relu, &mut rng).unwrap();
        assert!(net
            .forward::<NoRng>(&store, array![[1.0, 2.0]].view(), None)
            .is_err());
    }

    #[test]
    fn dropout_is_seeded() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&mut store, "g", &[3, 50, 2], Activation::Relu, &mut rng).unwrap();
        let x = array![[1.0, -2.0, 3.0], [0.5, 0.1, -0.2]];
        let run = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            net.forward(&store, x.view(), Some((0.1, &mut r))).unwrap()
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), run(5));
        assert_eq!(
            net.forward::<NoRng>(&store, x.view(), None).unwrap(),
            net.forward::<NoRng>(&store, x.view(), None).unwrap()
        );
    }

    #[test]
    fn store_json_round_trip() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        BoundedNet::new(
            &mut store,
            "f",
            &[4, 7, 3],
            Activation::Tanh,
            100.0,
            &mut rng,
        )
        .unwrap();
        let text = serde_json::to_string(&store.to_json()).unwrap();
        let back = ParamStore::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, store);
    }
}
