use std::collections::HashMap;
use std::rc::Rc;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, OptState, Real, Tape, Tensor, Var};

/// Named learnable tensors in creation order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: Rc<HashMap<String, usize>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), index: Rc::default() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        Rc::make_mut(&mut self.index).insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    /// He-uniform convolution weight `[cout, cin, k, k]` scaled by `gain`, zero bias.
    pub fn add_conv(&mut self, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize, gain: f64) {
        let fan_in = (cin * k * k) as f64;
        let bound = gain * (6.0 / fan_in).sqrt();
        let w = (0..cout * cin * k * k).map(|_| T::from_f64c(rng.gen_range(-bound..bound))).collect();
        self.insert(format!("{name}.w"), Tensor::new(vec![cout, cin, k, k], w).expect("shape"));
        self.insert(format!("{name}.b"), Tensor::zeros(vec![cout]));
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Names alongside mutable tensors, for optimizer updates.
    pub fn split_mut(&mut self) -> (&[String], &mut [Tensor<T>]) {
        (&self.names, &mut self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).copied().map(move |i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar weights.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Puts every parameter on `tape`, as gradient leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound { vars, index: Rc::clone(&self.index) }
    }

    pub fn opt_state(&self) -> OptState<T> {
        OptState::new(&self.tensors)
    }
}

/// Parameters placed on one tape.
pub struct Bound<'t, T: Real> {
    vars: Vec<Var<'t, T>>,
    index: Rc<HashMap<String, usize>>,
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::contract("params", format!("no parameter named {name}")))
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    /// Gradients in store order; parameters off the loss path get zeros.
    pub fn grads(&self, g: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|&v| g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    }
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CONR";
pub const OPTIMIZER_MAGIC: [u8; 4] = *b"CONA";
pub const CHECKPOINT_VERSION: u8 = 1;

fn write_records<W: Write>(w: &mut W, records: &[(&str, &Tensor<f32>)]) -> Result<()> {
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                offset: self.bytes.len() as u64,
                needed: (n - (self.bytes.len() - self.pos)) as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != magic {
            return Err(Error::BadMagic { expected: magic, found });
        }
        let v = self.take(1)?[0];
        if v != CHECKPOINT_VERSION {
            return Err(Error::BadVersion { expected: CHECKPOINT_VERSION, found: v });
        }
        Ok(())
    }

    fn records(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let at = self.pos as u64;
            let len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| Error::Parse { offset: at + 4, detail: "parameter name is not UTF-8".into() })?
                .to_string();
            let rank = self.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(self.u32()? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|&n| n > 0).ok_or_else(|| {
                Error::Parse { offset: at, detail: format!("record {name} has invalid shape {shape:?}") }
            })?;
            let raw = self.take(numel.checked_mul(4).ok_or_else(|| Error::Parse {
                offset: at,
                detail: format!("record {name} is too large"),
            })?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            out.push((name, Tensor::new(shape, data)?));
        }
        if self.pos != self.bytes.len() {
            return Err(Error::Parse { offset: self.pos as u64, detail: "trailing bytes".into() });
        }
        Ok(out)
    }
}

fn assign<T: Real>(store: &mut ParamStore<T>, records: Vec<(String, Tensor<f32>)>, what: &str) -> Result<()> {
    let mut seen = vec![false; store.len()];
    for (name, t) in records {
        let Some(&i) = store.index.get(&name) else {
            return Err(Error::Checkpoint(format!("{what} holds unexpected parameter {name}")));
        };
        if store.tensors[i].shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: expected shape {:?}, found {:?}",
                store.tensors[i].shape(),
                t.shape()
            )));
        }
        store.tensors[i] = t.cast();
        seen[i] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Checkpoint(format!("{what} is missing parameter {}", store.names[i])));
    }
    Ok(())
}

pub fn encode_checkpoint<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let cast: Vec<Tensor<f32>> = store.tensors.iter().map(Tensor::cast).collect();
    let records: Vec<(&str, &Tensor<f32>)> = store.names.iter().map(String::as_str).zip(&cast).collect();
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    write_records(&mut out, &records).expect("writing to memory");
    out
}

/// Overwrites every parameter of `store` from checkpoint bytes; the set of
/// names and shapes must match exactly.
pub fn decode_checkpoint<T: Real>(bytes: &[u8], store: &mut ParamStore<T>) -> Result<()> {
    let mut c = Cursor { bytes, pos: 0 };
    c.header(CHECKPOINT_MAGIC)?;
    let records = c.records()?;
    let mut staged = store.clone();
    assign(&mut staged, records, "checkpoint")?;
    *store = staged;
    Ok(())
}

pub fn save_checkpoint<T: Real>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(store))?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>, store: &mut ParamStore<T>) -> Result<()> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes, store)
}

pub fn encode_opt_state<T: Real>(store: &ParamStore<T>, state: &OptState<T>) -> Vec<u8> {
    let mut cast = Vec::new();
    let mut names = Vec::new();
    for (i, n) in store.names.iter().enumerate() {
        names.push(format!("{n}.m"));
        cast.push(state.first[i].cast::<f32>());
        names.push(format!("{n}.v"));
        cast.push(state.second[i].cast::<f32>());
    }
    let records: Vec<(&str, &Tensor<f32>)> = names.iter().map(String::as_str).zip(&cast).collect();
    let mut out = Vec::new();
    out.extend_from_slice(&OPTIMIZER_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&state.step.to_le_bytes());
    write_records(&mut out, &records).expect("writing to memory");
    out
}

pub fn decode_opt_state<T: Real>(bytes: &[u8], store: &ParamStore<T>) -> Result<OptState<T>> {
    let mut c = Cursor { bytes, pos: 0 };
    c.header(OPTIMIZER_MAGIC)?;
    let step = c.u64()?;
    let records = c.records()?;
    let mut first = ParamStore::<T>::new();
    let mut second = ParamStore::<T>::new();
    for (n, t) in store.names.iter().zip(&store.tensors) {
        first.insert(format!("{n}.m"), Tensor::zeros(t.shape().to_vec()));
        second.insert(format!("{n}.v"), Tensor::zeros(t.shape().to_vec()));
    }
    let (m, v): (Vec<_>, Vec<_>) = records.into_iter().partition(|(n, _)| n.ends_with(".m"));
    assign(&mut first, m, "optimizer state")?;
    assign(&mut second, v, "optimizer state")?;
    Ok(OptState { step, first: first.tensors, second: second.tensors })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn store() -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        s.add_conv(&mut rng, "a", 2, 3, 3, 1.0);
        s.add_conv(&mut rng, "b", 3, 1, 1, 1.0);
        s
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let s = store();
        let bytes = encode_checkpoint(&s);
        assert_eq!(&bytes[..5], b"CONR\x01");
        let mut other = store();
        for t in other.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        decode_checkpoint(&bytes, &mut other).unwrap();
        assert_eq!(other, s);
        assert_eq!(encode_checkpoint(&other), bytes);
    }

    #[test]
    fn mismatches_are_named() {
        let s = store();
        let bytes = encode_checkpoint(&s);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut wider = ParamStore::<f32>::new();
        wider.add_conv(&mut rng, "a", 2, 4, 3, 1.0);
        wider.add_conv(&mut rng, "b", 4, 1, 1, 1.0);
        let err = decode_checkpoint(&bytes, &mut wider).unwrap_err().to_string();
        assert!(err.contains("a.w"), "{err}");
        let mut more = store();
        more.insert("c.w", Tensor::zeros(vec![1]));
        let err = decode_checkpoint(&bytes, &mut more).unwrap_err().to_string();
        assert!(err.contains("missing parameter c.w"), "{err}");
        assert!(matches!(decode_checkpoint(&bytes[..20], &mut store()), Err(Error::Truncated { .. })));
    }

    #[test]
    fn optimizer_state_round_trip() {
        let s = store();
        let mut st = s.opt_state();
        st.step = 7;
        st.first[0].data_mut()[3] = 0.25;
        st.second[1].data_mut()[0] = 2.0;
        let bytes = encode_opt_state(&s, &st);
        assert_eq!(&bytes[..4], b"CONA");
        assert_eq!(decode_opt_state(&bytes, &s).unwrap(), st);
    }
}
