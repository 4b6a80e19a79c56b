//! Named parameter storage with gradient accumulators and AdamW moments.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::graph::{Graph, Var};
use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    entries: Vec<Param<T>>,
    step: u64,
}

/// Parameter total and its 32-bit storage footprint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub params: usize,
    pub bytes: usize,
}

impl ParamCount {
    pub fn mib(&self) -> f64 {
        self.bytes as f64 / (1u64 << 20) as f64
    }
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new(), step: 0 }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|p| p.name == name) {
            return Err(Error::Schema(format!("duplicate parameter name {name}")));
        }
        let zeros = Tensor::zeros(value.shape());
        self.entries.push(Param { name, grad: zeros.clone(), m: zeros.clone(), v: zeros, value });
        Ok(())
    }

    /// Weight matrix drawn from `Normal(0, std)`.
    pub fn push_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Contract(e.to_string()))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(normal.sample(rng))).collect();
        self.push(name, Tensor::from_vec(shape, data)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.iter_mut().find(|p| p.name == name)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn param_count(&self, filter: impl Fn(&str) -> bool) -> ParamCount {
        let params = self.entries.iter().filter(|p| filter(&p.name)).map(|p| p.value.len()).sum();
        ParamCount { params, bytes: params * 4 }
    }

    pub fn total(&self) -> usize {
        self.param_count(|_| true).params
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.grad.fill(T::zero());
        }
    }

    /// Places every parameter on the tape as a leaf, in entry order.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.entries.iter().map(|p| graph.leaf(p.value.clone(), trainable)).collect()
    }

    /// Adds tape gradients for `vars` (as returned by [`ParamSet::bind`]).
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, vars: &[Var]) -> Result<()> {
        if vars.len() != self.entries.len() {
            return Err(Error::usage("bound variables do not match this parameter set"));
        }
        for (p, &v) in self.entries.iter_mut().zip(vars) {
            if let Some(g) = graph.grad(v) {
                p.grad.add_assign(g);
            }
        }
        Ok(())
    }

    /// Overwrites values from `other`, keeping gradients and optimizer state.
    pub fn copy_values_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        check_compatible(self, other)?;
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            dst.value.data_mut().copy_from_slice(src.value.data());
        }
        Ok(())
    }

    /// Same names and shapes, values only.
    pub fn values_only(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for p in &self.entries {
            out.push(p.name.clone(), p.value.clone()).expect("names already unique");
        }
        out
    }

    /// Entries whose names pass `filter`, values only.
    pub fn subset(&self, filter: impl Fn(&str) -> bool) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for p in self.entries.iter().filter(|p| filter(&p.name)) {
            out.push(p.name.clone(), p.value.clone()).expect("names already unique");
        }
        out
    }

    /// Concatenates two disjoint sets, values only.
    pub fn merged(&self, other: &ParamSet<T>) -> Result<ParamSet<T>> {
        let mut out = self.values_only();
        for p in &other.entries {
            out.push(p.name.clone(), p.value.clone())?;
        }
        Ok(out)
    }

    /// SHA-256 over names, shapes and little-endian value bytes.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in &self.entries {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_f64().unwrap().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for p in &self.entries {
            out.push(p.name.clone(), p.value.cast()).expect("names already unique");
        }
        out
    }
}

pub(crate) fn check_compatible<T: Float>(a: &ParamSet<T>, b: &ParamSet<T>) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Schema(format!("{} vs {} parameters", a.len(), b.len())));
    }
    for (x, y) in a.entries.iter().zip(&b.entries) {
        if x.name != y.name || x.value.shape() != y.value.shape() {
            return Err(Error::Schema(format!(
                "parameter {} {:?} vs {} {:?}",
                x.name,
                x.value.shape(),
                y.name,
                y.value.shape()
            )));
        }
    }
    Ok(())
}

/// Adam with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW { lr, weight_decay, ..Default::default() }
    }

    /// One update from the accumulated gradients. Gradients are left in place.
    pub fn step<T: Float>(&self, params: &mut ParamSet<T>) {
        params.step += 1;
        let t = params.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let decay = T::lit(1.0 - self.lr * self.weight_decay);
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
        for p in &mut params.entries {
            let value = p.value.data_mut();
            let (m, v) = (p.m.data_mut(), p.v.data_mut());
            for (i, &g) in p.grad.data().iter().enumerate() {
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] = value[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FSDT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes parameter values; optimizer state is not stored.
pub fn save_checkpoint(params: &ParamSet<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<ParamSet<f32>> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format("bad checkpoint magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format("parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r.f32s(n)?;
        params.push(name, Tensor::from_vec(&shape, data)?)?;
    }
    if !r.is_done() {
        return Err(Error::format("trailing bytes after checkpoint"));
    }
    Ok(params)
}

/// Little-endian cursor that reports truncation as a format error.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format("length overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64, g: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::scalar(v)).unwrap();
        ps.get_mut("w").unwrap().grad = Tensor::scalar(g);
        ps
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut ps = scalar_set(1.0, 1.0);
        AdamW { lr: 0.1, weight_decay: 0.0, ..Default::default() }.step(&mut ps);
        let v = ps.get("w").unwrap().value.item();
        assert!((v - 0.9).abs() < 1e-7, "{v}");
        assert_eq!(ps.step(), 1);
    }

    #[test]
    fn adamw_zero_grad_without_decay_is_noop() {
        let mut ps = scalar_set(0.37, 0.0);
        AdamW { lr: 0.1, weight_decay: 0.0, ..Default::default() }.step(&mut ps);
        assert_eq!(ps.get("w").unwrap().value.item(), 0.37);
    }

    #[test]
    fn adamw_zero_grad_applies_pure_decay() {
        let mut ps = scalar_set(2.0, 0.0);
        AdamW { lr: 0.1, weight_decay: 0.01, ..Default::default() }.step(&mut ps);
        let v = ps.get("w").unwrap().value.item();
        assert!((v - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-12);
    }

    /// Plain Adam written out independently, compared state by state.
    #[test]
    fn adamw_without_decay_reduces_to_adam() {
        let grads = [0.3, -1.2, 0.05];
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let mut ps = scalar_set(0.5, 0.0);
        let (mut theta, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            ps.get_mut("w").unwrap().grad = Tensor::scalar(g);
            AdamW { lr, weight_decay: 0.0, ..Default::default() }.step(&mut ps);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let k = (t + 1) as i32;
            theta -= lr * (m / (1.0 - b1.powi(k))) / ((v / (1.0 - b2.powi(k))).sqrt() + eps);
            let p = ps.get("w").unwrap();
            assert!((p.value.item() - theta).abs() < 1e-15);
            assert!((p.m.item() - m).abs() < 1e-15);
            assert!((p.v.item() - v).abs() < 1e-15);
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::<f32>::new();
        ps.push("a", Tensor::zeros(&[2])).unwrap();
        assert!(ps.push("a", Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut ps = ParamSet::<f32>::new();
        ps.push("embed.w", Tensor::from_vec(&[2, 3], vec![1.5, -0.0, 3.25, f32::MIN_POSITIVE, 7.0, -2.0]).unwrap())
            .unwrap();
        ps.push("decoder.b", Tensor::from_vec(&[1], vec![0.1]).unwrap()).unwrap();
        let bytes = save_checkpoint(&ps);
        let back = load_checkpoint(&bytes).unwrap();
        assert_eq!(save_checkpoint(&back), bytes);
        assert_eq!(back.get("embed.w").unwrap().value.shape(), &[2, 3]);
    }

    #[test]
    fn empty_checkpoint_is_valid() {
        let bytes = save_checkpoint(&ParamSet::new());
        assert_eq!(bytes.len(), 12);
        assert!(load_checkpoint(&bytes).unwrap().is_empty());
    }

    #[test]
    fn truncated_or_foreign_checkpoint_rejected() {
        let mut ps = ParamSet::<f32>::new();
        ps.push("x", Tensor::zeros(&[4])).unwrap();
        let bytes = save_checkpoint(&ps);
        for cut in [0, 3, 11, bytes.len() - 1] {
            assert!(matches!(load_checkpoint(&bytes[..cut]), Err(Error::Format(_))));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(load_checkpoint(&bad).is_err());
        let mut bad = bytes;
        bad[4] = 9;
        assert!(load_checkpoint(&bad).is_err());
    }
}
