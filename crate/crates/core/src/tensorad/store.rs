use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::tape::{Real, Tape, TensorRef};
use crate::error::{CoreError, Result};

/// SGD with momentum, weight decay and polynomial learning-rate decay:
/// `lr(step) = lr0 * (1 - step/total_steps)^power`.
#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub total_steps: usize,
}

impl SgdConfig {
    pub fn new(total_steps: usize) -> SgdConfig {
        SgdConfig {
            lr0: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            power: 0.9,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(CoreError::argument("lr0 must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CoreError::argument("momentum must be in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(CoreError::argument("weight_decay must be >= 0"));
        }
        if self.total_steps == 0 {
            return Err(CoreError::argument("total_steps must be >= 1"));
        }
        Ok(())
    }

    pub fn lr(&self, step: usize) -> f64 {
        let frac = (step as f64 / self.total_steps as f64).min(1.0);
        self.lr0 * (1.0 - frac).powf(self.power)
    }
}

#[derive(Debug, Clone)]
struct Param<T: Real> {
    name: String,
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Vec<T>,
    momentum: Vec<T>,
}

/// Links tape nodes back to the parameters they were bound from, so one
/// forward/backward pass can deposit gradients into the store.
#[derive(Debug, Default)]
pub struct Binding {
    pairs: Vec<(usize, TensorRef)>,
}

impl Binding {
    pub fn new() -> Binding {
        Binding::default()
    }
}

/// Named parameter tensors with gradient and momentum buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> ParamStore<T> {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, shape: &[usize], data: Vec<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(CoreError::argument(format!(
                "parameter {:?} already registered",
                name
            )));
        }
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(CoreError::argument(format!(
                "parameter {:?}: shape {:?} vs data length {}",
                name,
                shape,
                data.len()
            )));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            grad: vec![T::zero(); n],
            momentum: vec![T::zero(); n],
        });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn shape(&self, name: &str) -> Result<&[usize]> {
        self.lookup(name).map(|p| p.shape.as_slice())
    }

    pub fn data(&self, name: &str) -> Result<&[T]> {
        self.lookup(name).map(|p| p.data.as_slice())
    }

    pub fn set_data(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        let i = self.lookup_idx(name)?;
        if data.len() != self.params[i].data.len() {
            return Err(CoreError::argument("set_data: length mismatch"));
        }
        self.params[i].data = data;
        Ok(())
    }

    fn lookup(&self, name: &str) -> Result<&Param<T>> {
        self.lookup_idx(name).map(|i| &self.params[i])
    }

    fn lookup_idx(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| CoreError::argument(format!("unknown parameter {:?}", name)))
    }

    /// Records the parameter as a differentiable leaf on `tape` and
    /// remembers the node so gradients can flow back.
    pub fn bind(&self, tape: &mut Tape<T>, binding: &mut Binding, name: &str) -> Result<TensorRef> {
        let i = self.lookup_idx(name)?;
        let p = &self.params[i];
        let t = tape.var(&p.shape, p.data.clone())?;
        binding.pairs.push((i, t));
        Ok(t)
    }

    /// Adds the tape's gradients for every bound parameter into the store.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, binding: &Binding) {
        for &(i, t) in &binding.pairs {
            let g = tape.grad(t);
            for (dst, &src) in self.params[i].grad.iter_mut().zip(g) {
                *dst += src;
            }
        }
    }

    /// Adds a gradient contribution directly; used by optimizers that
    /// compute analytic gradients outside a tape.
    pub fn add_grad(&mut self, name: &str, grad: &[T]) -> Result<()> {
        let i = self.lookup_idx(name)?;
        if grad.len() != self.params[i].grad.len() {
            return Err(CoreError::argument("add_grad: length mismatch"));
        }
        for (dst, &src) in self.params[i].grad.iter_mut().zip(grad) {
            *dst += src;
        }
        Ok(())
    }

    /// One SGD update: `v <- momentum*v + grad + weight_decay*param`,
    /// `param <- param - lr(step)*v`, then gradients are cleared.
    pub fn sgd_step(&mut self, cfg: &SgdConfig, step: usize) -> Result<()> {
        cfg.validate()?;
        let lr = T::cast_from(cfg.lr(step));
        let mu = T::cast_from(cfg.momentum);
        let wd = T::cast_from(cfg.weight_decay);
        for p in &mut self.params {
            for j in 0..p.data.len() {
                let v = mu * p.momentum[j] + p.grad[j] + wd * p.data[j];
                p.momentum[j] = v;
                p.data[j] = p.data[j] - lr * v;
                p.grad[j] = T::zero();
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Writes the MPAR checkpoint: magic "MPAR", version, count, then per
    /// parameter name, rank, extents and f32 data.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(b"MPAR")?;
        f.write_u32::<LittleEndian>(1)?;
        f.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for p in &self.params {
            let name = p.name.as_bytes();
            f.write_u16::<LittleEndian>(name.len() as u16)?;
            f.write_all(name)?;
            f.write_u32::<LittleEndian>(p.shape.len() as u32)?;
            for &e in &p.shape {
                f.write_u32::<LittleEndian>(e as u32)?;
            }
            for &v in &p.data {
                f.write_f32::<LittleEndian>(v.cast_f64() as f32)?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ParamStore<T>> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| CoreError::format(0, "file shorter than MPAR header"))?;
        if &magic != b"MPAR" {
            return Err(CoreError::format(
                0,
                format!("bad magic {:?}, expected \"MPAR\"", magic),
            ));
        }
        let version = r
            .read_u32::<LittleEndian>()
            .map_err(|_| CoreError::format(4, "truncated header"))?;
        if version != 1 {
            return Err(CoreError::format(4, format!("unsupported version {}", version)));
        }
        let count = r
            .read_u32::<LittleEndian>()
            .map_err(|_| CoreError::format(8, "truncated header"))?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = r
                .read_u16::<LittleEndian>()
                .map_err(|_| CoreError::format(0, "truncated parameter record"))?
                as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)
                .map_err(|_| CoreError::format(0, "truncated parameter name"))?;
            let name = String::from_utf8(name)
                .map_err(|_| CoreError::format(0, "parameter name is not utf-8"))?;
            let rank = r
                .read_u32::<LittleEndian>()
                .map_err(|_| CoreError::format(0, "truncated parameter rank"))?
                as usize;
            let mut shape = vec![0usize; rank];
            for e in shape.iter_mut() {
                *e = r
                    .read_u32::<LittleEndian>()
                    .map_err(|_| CoreError::format(0, "truncated parameter extents"))?
                    as usize;
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(T::cast_from(
                    r.read_f32::<LittleEndian>()
                        .map_err(|_| CoreError::format(0, "truncated parameter data"))?
                        as f64,
                ));
            }
            store.register(&name, &shape, data)?;
        }
        Ok(store)
    }
}
