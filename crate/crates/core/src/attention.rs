//! Position attention (§ soft attention): an N×N spatial attention map
//! over flattened voxel positions, applied at the network bottleneck.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::tensorad::{Binding, ParamStore, Real, Tape, TensorRef};

pub const DEFAULT_POSITION_CAP: usize = 4096;

/// Position-attention weights: 1×1×1 convolutions W_B, W_C (Cin → C′) and
/// W_D (Cin → Cin), no biases so a zero W_D makes the module an exact
/// identity.
#[derive(Debug, Clone)]
pub struct PositionAttention {
    prefix: String,
    cin: usize,
    cap: usize,
}

impl PositionAttention {
    pub fn new(prefix: impl Into<String>, cin: usize) -> PositionAttention {
        PositionAttention {
            prefix: prefix.into(),
            cin,
            cap: DEFAULT_POSITION_CAP,
        }
    }

    pub fn with_cap(mut self, cap: usize) -> PositionAttention {
        self.cap = cap;
        self
    }

    /// C′ = max(1, Cin/8).
    pub fn cprime(&self) -> usize {
        (self.cin / 8).max(1)
    }

    pub fn cin(&self) -> usize {
        self.cin
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}{}", self.prefix, suffix)
    }

    /// Registers the three weight tensors. W_B and W_C start random, W_D
    /// starts zero so the module begins as an identity.
    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        let cp = self.cprime();
        let bound = (1.0 / self.cin as f64).sqrt();
        for key in ["wb", "wc"] {
            let data: Vec<T> = (0..cp * self.cin)
                .map(|_| T::cast_from(rng.gen_range(-bound..bound)))
                .collect();
            store.register(&self.name(key), &[cp, self.cin, 1, 1, 1], data)?;
        }
        store.register(
            &self.name("wd"),
            &[self.cin, self.cin, 1, 1, 1],
            vec![T::zero(); self.cin * self.cin],
        )?;
        Ok(())
    }

    fn check_input<T: Real>(&self, tape: &Tape<T>, a: TensorRef) -> Result<usize> {
        let shape = tape.shape(a);
        if shape.len() != 4 {
            return Err(CoreError::argument(format!(
                "position attention expects a rank-4 (C, D, H, W) input, got rank {}",
                shape.len()
            )));
        }
        if shape[0] != self.cin {
            return Err(CoreError::argument(format!(
                "input has {} channels, module built for {}",
                shape[0], self.cin
            )));
        }
        let n = shape[1] * shape[2] * shape[3];
        if n > self.cap {
            return Err(CoreError::Resource(format!(
                "attention over N = {} positions exceeds the cap of {}",
                n, self.cap
            )));
        }
        Ok(n)
    }

    /// S = rowsoftmax(Cᵀ·B) given explicit weight tensors.
    pub fn attention_map_with<T: Real>(
        &self,
        tape: &mut Tape<T>,
        a: TensorRef,
        wb: TensorRef,
        wc: TensorRef,
    ) -> Result<TensorRef> {
        let n = self.check_input(tape, a)?;
        let cp = self.cprime();
        let b = tape.conv3(a, wb, None, 1, 0)?;
        let b = tape.reshape(b, &[cp, n])?;
        let c = tape.conv3(a, wc, None, 1, 0)?;
        let c = tape.reshape(c, &[cp, n])?;
        let ct = tape.transpose(c, &[1, 0])?;
        let logits = tape.matmul(ct, b)?;
        tape.softmax(logits, 1)
    }

    /// E = reshape(D_feat·Sᵀ) + A given explicit weight tensors.
    pub fn forward_with<T: Real>(
        &self,
        tape: &mut Tape<T>,
        a: TensorRef,
        wb: TensorRef,
        wc: TensorRef,
        wd: TensorRef,
    ) -> Result<TensorRef> {
        let n = self.check_input(tape, a)?;
        let shape = tape.shape(a).to_vec();
        let s = self.attention_map_with(tape, a, wb, wc)?;
        let d = tape.conv3(a, wd, None, 1, 0)?;
        let d = tape.reshape(d, &[self.cin, n])?;
        let st = tape.transpose(s, &[1, 0])?;
        let out = tape.matmul(d, st)?;
        let e = tape.reshape(out, &shape)?;
        tape.add(e, a)
    }

    /// Forward pass with weights bound from the store.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        binding: &mut Binding,
        a: TensorRef,
    ) -> Result<TensorRef> {
        let wb = store.bind(tape, binding, &self.name("wb"))?;
        let wc = store.bind(tape, binding, &self.name("wc"))?;
        let wd = store.bind(tape, binding, &self.name("wd"))?;
        self.forward_with(tape, a, wb, wc, wd)
    }

    /// The N×N attention map with weights bound from the store, exposed
    /// for inspection.
    pub fn attention_map<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        binding: &mut Binding,
        a: TensorRef,
    ) -> Result<TensorRef> {
        let wb = store.bind(tape, binding, &self.name("wb"))?;
        let wc = store.bind(tape, binding, &self.name("wc"))?;
        self.attention_map_with(tape, a, wb, wc)
    }

    pub fn param_names(&self) -> [String; 3] {
        [self.name("wb"), self.name("wc"), self.name("wd")]
    }
}
