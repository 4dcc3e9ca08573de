use crate::error::Result;
use crate::numerics::{init, ParamId, ParamKind, ParamStore, Session, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    /// Xavier-uniform weight, zero bias. `init_key` selects the random
    /// stream, so layers sharing a key start from identical weights.
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        init_key: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let weight = store.insert(
            format!("{name}.weight"),
            init::xavier_uniform(seed, &format!("{init_key}.weight"), fan_in, fan_out),
            ParamKind::Dense,
        )?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]), ParamKind::Dense)?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        sess.affine(x, self.weight, self.bias)
    }
}

/// ReLU hidden stack with a scalar logit head.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub head: Dense,
}

pub struct MlpOutput {
    /// Post-activation output of every hidden layer.
    pub hiddens: Vec<Var>,
    /// `[B × 1]`.
    pub logit: Var,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, input: usize, hidden: &[usize]) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut fan_in = input;
        for (l, &w) in hidden.iter().enumerate() {
            let key = format!("{name}.layer{}", l + 1);
            layers.push(Dense::new(store, seed, &key, &key, fan_in, w)?);
            fan_in = w;
        }
        let key = format!("{name}.head");
        let head = Dense::new(store, seed, &key, &key, fan_in, 1)?;
        Ok(Self { layers, head })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<MlpOutput> {
        let got = sess.tape.value(x).dims2()?.1;
        if got != self.input_width() {
            return Err(crate::SamlError::Config(format!(
                "MLP expects input width {}, got {got}",
                self.input_width()
            )));
        }
        let mut hiddens = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            let z = layer.forward(sess, h)?;
            h = sess.tape.relu(z);
            hiddens.push(h);
        }
        let logit = self.head.forward(sess, h)?;
        Ok(MlpOutput { hiddens, logit })
    }
}
