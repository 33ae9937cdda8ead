//! A small differentiable core: named parameters, perceptron stacks with a
//! recorded tape for reverse-mode gradients, window feature gathering over
//! sparse states, optimizers, and the binary checkpoint format.
//!
//! Checkpoint layout (`CGCA1`): the five magic bytes, then for every entry in
//! name order: `u32` name length, name bytes (UTF-8), `u32` rank, `rank` x
//! `u32` dims, then `prod(dims)` `f32` values. All integers and floats are
//! little-endian. The file ends after the last entry.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{Coord, SparseState};

const CHECKPOINT_MAGIC: &[u8; 5] = b"CGCA1";

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
}

/// Named trainable arrays with gradient buffers.
///
/// Every mutation of parameter values bumps [`ParamStore::version`], which
/// lets a tape detect that it was recorded against different weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
    version: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> Result<()> {
        let n: usize = shape.iter().product();
        if values.len() != n {
            return Err(Error::ShapeMismatch {
                context: format!("parameter {name}"),
                expected: format!("{n} values"),
                got: format!("{}", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("parameter {name} has non-finite values")));
        }
        self.entries.insert(
            name.to_string(),
            Param {
                shape,
                values,
                grads: vec![0.0; n],
            },
        );
        self.version += 1;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn values(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.get(name)?.values)
    }

    pub fn grads(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.get(name)?.grads)
    }

    pub fn grads_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        self.entries
            .get_mut(name)
            .map(|p| p.grads.as_mut_slice())
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn values_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        self.version += 1;
        self.entries
            .get_mut(name)
            .map(|p| p.values.as_mut_slice())
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.values.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grads.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in self.entries.values_mut() {
            p.grads.iter_mut().for_each(|g| *g *= s);
        }
    }

    /// All values concatenated in name order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.entries.values().flat_map(|p| p.values.iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.entries.values().flat_map(|p| p.grads.iter().copied()).collect()
    }

    /// Read or write one scalar by flat index (name order).
    pub fn flat_get(&self, mut idx: usize) -> f64 {
        for p in self.entries.values() {
            if idx < p.values.len() {
                return p.values[idx];
            }
            idx -= p.values.len();
        }
        panic!("flat index out of range");
    }

    pub fn flat_set(&mut self, mut idx: usize, v: f64) {
        self.version += 1;
        for p in self.entries.values_mut() {
            if idx < p.values.len() {
                p.values[idx] = v;
                return;
            }
            idx -= p.values.len();
        }
        panic!("flat index out of range");
    }

    pub fn flat_grad(&self, mut idx: usize) -> f64 {
        for p in self.entries.values() {
            if idx < p.grads.len() {
                return p.grads[idx];
            }
            idx -= p.grads.len();
        }
        panic!("flat index out of range");
    }

    /// Merge another store's entries (names must not collide).
    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        for (name, p) in other.entries {
            if self.entries.contains_key(&name) {
                return Err(Error::Config(format!("duplicate parameter {name}")));
            }
            self.entries.insert(name, p);
        }
        self.version += 1;
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(5 + self.num_values() * 4);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        for (name, p) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for d in &p.shape {
                buf.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &p.values {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        if buf.len() < 5 || &buf[..5] != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "bad checkpoint magic"));
        }
        let mut pos = 5;
        let truncated = || Error::format(path, "truncated checkpoint");
        let read_u32 = |pos: &mut usize| -> Result<u32> {
            let b = buf.get(*pos..*pos + 4).ok_or_else(truncated)?;
            *pos += 4;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        };
        let mut store = ParamStore::new();
        while pos < buf.len() {
            let n = read_u32(&mut pos)? as usize;
            let name_bytes = buf.get(pos..pos + n).ok_or_else(truncated)?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?
                .to_string();
            pos += n;
            let rank = read_u32(&mut pos)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut pos)? as usize);
            }
            let count: usize = shape.iter().product();
            let bytes = buf.get(pos..pos + 4 * count).ok_or_else(truncated)?;
            let values = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            pos += 4 * count;
            store.insert(&name, shape, values)?;
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    None,
}

impl Activation {
    fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => z.mapv(|v| v.max(0.0)),
            Activation::Tanh => z.mapv(f64::tanh),
            Activation::Sigmoid => z.mapv(sigmoid),
            Activation::None => z.clone(),
        }
    }

    /// Multiply `g` in place by the activation derivative, given the
    /// pre-activation `z` and output `a`.
    fn backprop(self, g: &mut Array2<f64>, z: &Array2<f64>, a: &Array2<f64>) {
        match self {
            Activation::Relu => ndarray::Zip::from(g).and(z).for_each(|g, &z| {
                if z <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Tanh => ndarray::Zip::from(g).and(a).for_each(|g, &a| *g *= 1.0 - a * a),
            Activation::Sigmoid => {
                ndarray::Zip::from(g).and(a).for_each(|g, &a| *g *= a * (1.0 - a))
            }
            Activation::None => {}
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Layer widths, hidden activation and the number of residual blocks.
///
/// The stack is: linear `widths[0] -> widths[1]`, then `residual_blocks`
/// blocks `h + W2 act(W1 act(h) + b1) + b2` at width `widths[1]`, then
/// `act -> linear` for each remaining width. The output is not squashed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub residual_blocks: usize,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation, residual_blocks: usize) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|w| *w == 0) {
            return Err(Error::Config(format!("invalid mlp widths {widths:?}")));
        }
        Ok(MlpSpec {
            widths,
            activation,
            residual_blocks,
        })
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

/// Row-sparse input made of fixed-width dense blocks: entry `e` of row `r`
/// places `values[e*block..(e+1)*block]` at columns
/// `col_start[e]..col_start[e]+block`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    pub n_cols: usize,
    pub block: usize,
    pub row_ptr: Vec<usize>,
    pub col_start: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseRows {
    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_rows(), self.n_cols));
        for r in 0..self.n_rows() {
            for e in self.row_ptr[r]..self.row_ptr[r + 1] {
                let cs = self.col_start[e];
                for j in 0..self.block {
                    out[[r, cs + j]] = self.values[e * self.block + j];
                }
            }
        }
        out
    }
}

pub enum MlpInput {
    Dense(Array2<f64>),
    Sparse(SparseRows),
}

impl MlpInput {
    fn rows(&self) -> usize {
        match self {
            MlpInput::Dense(a) => a.nrows(),
            MlpInput::Sparse(s) => s.n_rows(),
        }
    }

    fn cols(&self) -> usize {
        match self {
            MlpInput::Dense(a) => a.ncols(),
            MlpInput::Sparse(s) => s.n_cols,
        }
    }
}

struct BlockRecord {
    z: Array2<f64>,
    a1: Array2<f64>,
    u: Array2<f64>,
    a2: Array2<f64>,
}

struct LayerRecord {
    z: Array2<f64>,
    a: Array2<f64>,
}

/// Everything the backward pass needs from one forward pass.
pub struct MlpTape {
    version: u64,
    input: MlpInput,
    blocks: Vec<BlockRecord>,
    layers: Vec<LayerRecord>,
}

/// A perceptron stack whose weights live in a [`ParamStore`] under `prefix`.
#[derive(Debug, Clone)]
pub struct Mlp {
    prefix: String,
    spec: MlpSpec,
}

impl Mlp {
    pub fn new(prefix: &str, spec: MlpSpec) -> Self {
        Mlp {
            prefix: prefix.to_string(),
            spec,
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    fn lin(&self, l: usize) -> (String, String) {
        (format!("{}.{l}.w", self.prefix), format!("{}.{l}.b", self.prefix))
    }

    fn res(&self, b: usize) -> [String; 4] {
        [
            format!("{}.res{b}.w1", self.prefix),
            format!("{}.res{b}.b1", self.prefix),
            format!("{}.res{b}.w2", self.prefix),
            format!("{}.res{b}.b2", self.prefix),
        ]
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let mut add = |store: &mut ParamStore, w: &str, b: &str, fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let vals = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-a..a))
                .collect();
            store.insert(w, vec![fan_out, fan_in], vals)?;
            store.insert(b, vec![fan_out], vec![0.0; fan_out])
        };
        let w = &self.spec.widths;
        let (w0, b0) = self.lin(0);
        add(store, &w0, &b0, w[0], w[1])?;
        for blk in 0..self.spec.residual_blocks {
            let [w1, b1, w2, b2] = self.res(blk);
            add(store, &w1, &b1, w[1], w[1])?;
            add(store, &w2, &b2, w[1], w[1])?;
        }
        for l in 1..w.len() - 1 {
            let (wl, bl) = self.lin(l);
            add(store, &wl, &bl, w[l], w[l + 1])?;
        }
        Ok(())
    }

    /// Zero all weights and biases of this stack.
    pub fn init_zero(&self, store: &mut ParamStore) -> Result<()> {
        let w = &self.spec.widths;
        let add = |store: &mut ParamStore, wn: &str, bn: &str, i: usize, o: usize| {
            store.insert(wn, vec![o, i], vec![0.0; o * i])?;
            store.insert(bn, vec![o], vec![0.0; o])
        };
        let (w0, b0) = self.lin(0);
        add(store, &w0, &b0, w[0], w[1])?;
        for blk in 0..self.spec.residual_blocks {
            let [w1, b1, w2, b2] = self.res(blk);
            add(store, &w1, &b1, w[1], w[1])?;
            add(store, &w2, &b2, w[1], w[1])?;
        }
        for l in 1..w.len() - 1 {
            let (wl, bl) = self.lin(l);
            add(store, &wl, &bl, w[l], w[l + 1])?;
        }
        Ok(())
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for l in 0..self.spec.widths.len() - 1 {
            let (w, b) = self.lin(l);
            v.push(w);
            v.push(b);
        }
        for blk in 0..self.spec.residual_blocks {
            v.extend(self.res(blk));
        }
        v.sort();
        v
    }

    fn weight<'a>(&self, store: &'a ParamStore, name: &str) -> Result<ArrayView2<'a, f64>> {
        let p = store.get(name)?;
        if p.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                context: name.to_string(),
                expected: "rank 2".into(),
                got: format!("{:?}", p.shape),
            });
        }
        Ok(ArrayView2::from_shape((p.shape[0], p.shape[1]), &p.values).expect("shape checked"))
    }

    fn linear(&self, store: &ParamStore, w: &str, b: &str, x: &Array2<f64>) -> Result<Array2<f64>> {
        let wv = self.weight(store, w)?;
        if wv.ncols() != x.ncols() {
            return Err(Error::ShapeMismatch {
                context: w.to_string(),
                expected: format!("{} input columns", wv.ncols()),
                got: format!("{}", x.ncols()),
            });
        }
        let bv = store.values(b)?;
        let mut y = x.dot(&wv.t());
        y += &ArrayView2::from_shape((1, bv.len()), bv).expect("bias row");
        Ok(y)
    }

    fn sparse_linear(&self, store: &ParamStore, w: &str, b: &str, x: &SparseRows) -> Result<Array2<f64>> {
        let wv = self.weight(store, w)?;
        if wv.ncols() != x.n_cols {
            return Err(Error::ShapeMismatch {
                context: w.to_string(),
                expected: format!("{} input columns", wv.ncols()),
                got: format!("{}", x.n_cols),
            });
        }
        let wraw = store.values(w)?;
        let bv = store.values(b)?;
        let (n_out, n_in) = (wv.nrows(), wv.ncols());
        let mut y = Array2::zeros((x.n_rows(), n_out));
        for (r, mut row) in y.axis_iter_mut(Axis(0)).enumerate() {
            let row = row.as_slice_mut().expect("contiguous");
            row.copy_from_slice(bv);
            for e in x.row_ptr[r]..x.row_ptr[r + 1] {
                let cs = x.col_start[e];
                let v = &x.values[e * x.block..(e + 1) * x.block];
                for (o, out) in row.iter_mut().enumerate() {
                    let wrow = &wraw[o * n_in + cs..o * n_in + cs + x.block];
                    *out += wrow.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        Ok(y)
    }

    /// Run the stack on a batch (one sample per row).
    pub fn forward(&self, store: &ParamStore, input: MlpInput) -> Result<(Array2<f64>, MlpTape)> {
        if input.cols() != self.spec.input_width() {
            return Err(Error::ShapeMismatch {
                context: format!("{} input", self.prefix),
                expected: format!("{} columns", self.spec.input_width()),
                got: format!("{}", input.cols()),
            });
        }
        let act = self.spec.activation;
        let (w0, b0) = self.lin(0);
        let mut z = match &input {
            MlpInput::Dense(x) => self.linear(store, &w0, &b0, x)?,
            MlpInput::Sparse(x) => self.sparse_linear(store, &w0, &b0, x)?,
        };
        let mut blocks = Vec::with_capacity(self.spec.residual_blocks);
        for blk in 0..self.spec.residual_blocks {
            let [w1, b1, w2, b2] = self.res(blk);
            let a1 = act.apply(&z);
            let u = self.linear(store, &w1, &b1, &a1)?;
            let a2 = act.apply(&u);
            let delta = self.linear(store, &w2, &b2, &a2)?;
            let next = &z + &delta;
            blocks.push(BlockRecord { z, a1, u, a2 });
            z = next;
        }
        let mut layers = Vec::new();
        for l in 1..self.spec.widths.len() - 1 {
            let (wl, bl) = self.lin(l);
            let a = act.apply(&z);
            let next = self.linear(store, &wl, &bl, &a)?;
            layers.push(LayerRecord { z, a });
            z = next;
        }
        Ok((
            z,
            MlpTape {
                version: store.version(),
                input,
                blocks,
                layers,
            },
        ))
    }

    fn accumulate_linear(
        &self,
        store: &mut ParamStore,
        w: &str,
        b: &str,
        x: &Array2<f64>,
        g: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        let dw = g.t().dot(x);
        let db = g.sum_axis(Axis(0));
        add_into(store.grads_mut(w)?, dw.as_slice().expect("standard layout"));
        add_into(store.grads_mut(b)?, db.as_slice().expect("standard layout"));
        let wv = self.weight(store, w)?;
        Ok(g.dot(&wv))
    }

    /// Accumulate parameter gradients for `grad_out = dL/d(output)` and
    /// return `dL/d(input)` (`None` for sparse inputs, which are treated as
    /// constants).
    pub fn backward(
        &self,
        store: &mut ParamStore,
        tape: &MlpTape,
        grad_out: &Array2<f64>,
    ) -> Result<Option<Array2<f64>>> {
        if tape.version != store.version() {
            return Err(Error::StaleTape);
        }
        if grad_out.nrows() != tape.input.rows() || grad_out.ncols() != self.spec.output_width() {
            return Err(Error::ShapeMismatch {
                context: format!("{} output gradient", self.prefix),
                expected: format!("{}x{}", tape.input.rows(), self.spec.output_width()),
                got: format!("{}x{}", grad_out.nrows(), grad_out.ncols()),
            });
        }
        let act = self.spec.activation;
        let mut g = grad_out.clone();
        for l in (1..self.spec.widths.len() - 1).rev() {
            let rec = &tape.layers[l - 1];
            let (wl, bl) = self.lin(l);
            g = self.accumulate_linear(store, &wl, &bl, &rec.a, &g)?;
            act.backprop(&mut g, &rec.z, &rec.a);
        }
        for blk in (0..self.spec.residual_blocks).rev() {
            let rec = &tape.blocks[blk];
            let [w1, b1, w2, b2] = self.res(blk);
            let mut gu = self.accumulate_linear(store, &w2, &b2, &rec.a2, &g)?;
            act.backprop(&mut gu, &rec.u, &rec.a2);
            let mut gz = self.accumulate_linear(store, &w1, &b1, &rec.a1, &gu)?;
            act.backprop(&mut gz, &rec.z, &rec.a1);
            g += &gz;
        }
        let (w0, b0) = self.lin(0);
        match &tape.input {
            MlpInput::Dense(x) => Ok(Some(self.accumulate_linear(store, &w0, &b0, x, &g)?)),
            MlpInput::Sparse(x) => {
                let n_in = x.n_cols;
                let db = g.sum_axis(Axis(0));
                add_into(store.grads_mut(&b0)?, db.as_slice().expect("standard layout"));
                let dw = store.grads_mut(&w0)?;
                for r in 0..x.n_rows() {
                    let grow = g.row(r);
                    for e in x.row_ptr[r]..x.row_ptr[r + 1] {
                        let cs = x.col_start[e];
                        let v = &x.values[e * x.block..(e + 1) * x.block];
                        for (o, &go) in grow.iter().enumerate() {
                            if go == 0.0 {
                                continue;
                            }
                            let drow = &mut dw[o * n_in + cs..o * n_in + cs + x.block];
                            for (d, vv) in drow.iter_mut().zip(v) {
                                *d += go * vv;
                            }
                        }
                    }
                }
                Ok(None)
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Per-cell feature block: `[occupancy, code]`, or `[occupancy, cond code,
/// state code]` when a conditioning state is given (occupancy is the union).
pub fn feature_block_width(latent_dim: usize, conditioned: bool) -> usize {
    if conditioned {
        1 + 2 * latent_dim
    } else {
        1 + latent_dim
    }
}

fn write_block(state: &SparseState, cond: Option<&SparseState>, c: Coord, out: &mut [f64]) -> bool {
    let k = state.latent_dim();
    let zs = state.get(c);
    match cond {
        None => match zs {
            Some(z) => {
                out[0] = 1.0;
                out[1..1 + k].copy_from_slice(z);
                true
            }
            None => false,
        },
        Some(cs) => {
            let zc = cs.get(c);
            if zs.is_none() && zc.is_none() {
                return false;
            }
            out[0] = 1.0;
            match zc {
                Some(z) => out[1..1 + k].copy_from_slice(z),
                None => out[1..1 + k].iter_mut().for_each(|v| *v = 0.0),
            }
            match zs {
                Some(z) => out[1 + k..1 + 2 * k].copy_from_slice(z),
                None => out[1 + k..1 + 2 * k].iter_mut().for_each(|v| *v = 0.0),
            }
            true
        }
    }
}

/// Dense window features around `center`: one block per offset in `window`
/// (as given, normally lexicographic), zeros for empty cells.
pub fn gather_features(
    state: &SparseState,
    cond: Option<&SparseState>,
    center: Coord,
    window: &[Coord],
) -> Vec<f64> {
    let b = feature_block_width(state.latent_dim(), cond.is_some());
    let mut out = vec![0.0; window.len() * b];
    for (n, d) in window.iter().enumerate() {
        write_block(state, cond, center.offset(*d), &mut out[n * b..(n + 1) * b]);
    }
    out
}

/// Same features as [`gather_features`] for many centers at once, keeping
/// only non-empty blocks.
pub fn gather_sparse(
    state: &SparseState,
    cond: Option<&SparseState>,
    centers: &[Coord],
    window: &[Coord],
) -> SparseRows {
    let b = feature_block_width(state.latent_dim(), cond.is_some());
    let mut rows = SparseRows {
        n_cols: window.len() * b,
        block: b,
        row_ptr: Vec::with_capacity(centers.len() + 1),
        col_start: Vec::new(),
        values: Vec::new(),
    };
    rows.row_ptr.push(0);
    let mut scratch = vec![0.0; b];
    for &c in centers {
        for (n, d) in window.iter().enumerate() {
            if write_block(state, cond, c.offset(*d), &mut scratch) {
                rows.col_start.push(n * b);
                rows.values.extend_from_slice(&scratch);
            }
        }
        rows.row_ptr.push(rows.col_start.len());
    }
    rows
}

pub fn sgd_step(store: &mut ParamStore, lr: f64) -> Result<()> {
    check_grads(store)?;
    store.version += 1;
    for p in store.entries.values_mut() {
        for (v, g) in p.values.iter_mut().zip(p.grads.iter_mut()) {
            *v -= lr * *g;
            *g = 0.0;
        }
    }
    Ok(())
}

fn check_grads(store: &ParamStore) -> Result<()> {
    for (name, p) in &store.entries {
        if p.grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    Ok(())
}

/// Adam with bias correction. Moments are keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        check_grads(store)?;
        self.step += 1;
        store.version += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in store.entries.iter_mut() {
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; p.values.len()], vec![0.0; p.values.len()]));
            for n in 0..p.values.len() {
                let g = p.grads[n];
                m[n] = self.beta1 * m[n] + (1.0 - self.beta1) * g;
                v[n] = self.beta2 * v[n] + (1.0 - self.beta2) * g * g;
                let mh = m[n] / bc1;
                let vh = v[n] / bc2;
                p.values[n] -= lr * mh / (vh.sqrt() + self.eps);
                p.grads[n] = 0.0;
            }
        }
        Ok(())
    }
}

/// `adam.step(store, lr)` under the free-function name used elsewhere.
pub fn adam_step(store: &mut ParamStore, adam: &mut Adam, lr: f64) -> Result<()> {
    adam.step(store, lr)
}

pub fn to_array2(rows: usize, cols: usize, data: Vec<f64>) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), data).expect("row-major buffer of rows*cols")
}

pub fn row_vector(v: &[f64]) -> Array2<f64> {
    to_array2(1, v.len(), v.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Straight-line scalar re-evaluation of a stack, independent of ndarray.
    fn scalar_eval(store: &ParamStore, mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let act = |v: f64| match mlp.spec.activation {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            Activation::None => v,
        };
        let lin = |w: &str, b: &str, x: &[f64]| -> Vec<f64> {
            let p = store.get(w).unwrap();
            let bias = store.values(b).unwrap();
            (0..p.shape[0])
                .map(|o| {
                    let mut s = bias[o];
                    for i in 0..p.shape[1] {
                        s += p.values[o * p.shape[1] + i] * x[i];
                    }
                    s
                })
                .collect()
        };
        let (w0, b0) = mlp.lin(0);
        let mut h = lin(&w0, &b0, x);
        for blk in 0..mlp.spec.residual_blocks {
            let [w1, b1, w2, b2] = mlp.res(blk);
            let a: Vec<f64> = h.iter().map(|v| act(*v)).collect();
            let u: Vec<f64> = lin(&w1, &b1, &a).into_iter().map(act).collect();
            let d = lin(&w2, &b2, &u);
            h = h.iter().zip(&d).map(|(a, b)| a + b).collect();
        }
        for l in 1..mlp.spec.widths.len() - 1 {
            let (wl, bl) = mlp.lin(l);
            let a: Vec<f64> = h.iter().map(|v| act(*v)).collect();
            h = lin(&wl, &bl, &a);
        }
        h
    }

    fn random_input(r: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        to_array2(n, d, (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn zero_and_identity_linear() {
        let mlp = Mlp::new("m", MlpSpec::new(vec![3, 3], Activation::None, 0).unwrap());
        let mut store = ParamStore::new();
        mlp.init_zero(&mut store).unwrap();
        let x = random_input(&mut rng(1), 4, 3);
        let (y, _) = mlp.forward(&store, MlpInput::Dense(x.clone())).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
        let w = store.values_mut("m.0.w").unwrap();
        w[0] = 1.0;
        w[4] = 1.0;
        w[8] = 1.0;
        let (y, _) = mlp.forward(&store, MlpInput::Dense(x.clone())).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        for (widths, blocks, act) in [
            (vec![5, 7, 3], 0, Activation::Relu),
            (vec![4, 6, 6, 2], 2, Activation::Tanh),
            (vec![3, 5, 1], 1, Activation::Sigmoid),
        ] {
            let mlp = Mlp::new("n", MlpSpec::new(widths.clone(), act, blocks).unwrap());
            let mut store = ParamStore::new();
            let mut r = rng(42);
            mlp.init(&mut store, &mut r).unwrap();
            for name in mlp.param_names() {
                if name.ends_with('b') || name.ends_with("b1") || name.ends_with("b2") {
                    for v in store.values_mut(&name).unwrap() {
                        *v = r.random_range(-0.5..0.5);
                    }
                }
            }
            let x = random_input(&mut r, 6, widths[0]);
            let (y, _) = mlp.forward(&store, MlpInput::Dense(x.clone())).unwrap();
            for row in 0..6 {
                let want = scalar_eval(&store, &mlp, x.row(row).as_slice().unwrap());
                for (a, b) in y.row(row).iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mlp = Mlp::new("m", MlpSpec::new(vec![3, 2], Activation::None, 0).unwrap());
        let mut store = ParamStore::new();
        mlp.init_zero(&mut store).unwrap();
        let x = to_array2(1, 4, vec![0.0; 4]);
        assert!(matches!(
            mlp.forward(&store, MlpInput::Dense(x)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn linear_weight_grad_is_outer_product() {
        // loss = sum(W x + b) for a 2x2 layer: dW[o][i] = sum over batch of x[i].
        let mlp = Mlp::new("m", MlpSpec::new(vec![2, 2], Activation::None, 0).unwrap());
        let mut store = ParamStore::new();
        mlp.init(&mut store, &mut rng(0)).unwrap();
        let x = to_array2(1, 2, vec![3.0, -2.0]);
        let (y, tape) = mlp.forward(&store, MlpInput::Dense(x)).unwrap();
        let ones = Array2::ones(y.raw_dim());
        let gin = mlp.backward(&mut store, &tape, &ones).unwrap().unwrap();
        assert_eq!(store.grads("m.0.w").unwrap(), &[3.0, -2.0, 3.0, -2.0]);
        assert_eq!(store.grads("m.0.b").unwrap(), &[1.0, 1.0]);
        let w = store.values("m.0.w").unwrap();
        assert!((gin[[0, 0]] - (w[0] + w[2])).abs() < 1e-15);
        assert!((gin[[0, 1]] - (w[1] + w[3])).abs() < 1e-15);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let mlp = Mlp::new("m", MlpSpec::new(vec![3, 4, 2], Activation::Tanh, 1).unwrap());
        let mut store = ParamStore::new();
        mlp.init(&mut store, &mut rng(9)).unwrap();
        let x = random_input(&mut rng(2), 3, 3);
        let (y, tape) = mlp.forward(&store, MlpInput::Dense(x)).unwrap();
        mlp.backward(&mut store, &tape, &Array2::zeros(y.raw_dim())).unwrap();
        assert!(store.flat_grads().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mlp = Mlp::new("m", MlpSpec::new(vec![2, 2], Activation::None, 0).unwrap());
        let mut store = ParamStore::new();
        mlp.init(&mut store, &mut rng(0)).unwrap();
        let (y, tape) = mlp
            .forward(&store, MlpInput::Dense(to_array2(1, 2, vec![1.0, 1.0])))
            .unwrap();
        store.values_mut("m.0.b").unwrap()[0] = 0.5;
        assert!(matches!(
            mlp.backward(&mut store, &tape, &Array2::ones(y.raw_dim())),
            Err(Error::StaleTape)
        ));
    }

    /// Weighted-sum loss so every output contributes a distinct gradient.
    fn weighted_loss(y: &Array2<f64>, w: &Array2<f64>) -> f64 {
        (y * w).sum()
    }

    #[test]
    fn gradients_match_central_differences() {
        for seed in 0..5u64 {
            for (widths, blocks, act) in [
                (vec![4, 6, 3], 0, Activation::Tanh),
                (vec![3, 5, 5, 2], 2, Activation::Sigmoid),
                (vec![4, 8, 2], 1, Activation::Relu),
            ] {
                let mlp = Mlp::new("g", MlpSpec::new(widths.clone(), act, blocks).unwrap());
                let mut store = ParamStore::new();
                let mut r = rng(100 + seed);
                mlp.init(&mut store, &mut r).unwrap();
                let x = random_input(&mut r, 3, widths[0]);
                let wout = random_input(&mut r, 3, *widths.last().unwrap());
                let (y, tape) = mlp.forward(&store, MlpInput::Dense(x.clone())).unwrap();
                let gin = mlp.backward(&mut store, &tape, &wout).unwrap().unwrap();
                let _ = weighted_loss(&y, &wout);
                let h = 1e-5;
                for idx in 0..store.num_values() {
                    let v0 = store.flat_get(idx);
                    let analytic = store.flat_grad(idx);
                    let mut probe = store.clone();
                    probe.flat_set(idx, v0 + h);
                    let lp = weighted_loss(&mlp.forward(&probe, MlpInput::Dense(x.clone())).unwrap().0, &wout);
                    probe.flat_set(idx, v0 - h);
                    let lm = weighted_loss(&mlp.forward(&probe, MlpInput::Dense(x.clone())).unwrap().0, &wout);
                    let fd = (lp - lm) / (2.0 * h);
                    let err = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
                    assert!(err < 1e-4, "param {idx}: fd {fd} analytic {analytic}");
                }
                for (r_, c_) in [(0, 0), (2, widths[0] - 1)] {
                    let mut xp = x.clone();
                    xp[[r_, c_]] += h;
                    let lp = weighted_loss(&mlp.forward(&store, MlpInput::Dense(xp.clone())).unwrap().0, &wout);
                    xp[[r_, c_]] -= 2.0 * h;
                    let lm = weighted_loss(&mlp.forward(&store, MlpInput::Dense(xp)).unwrap().0, &wout);
                    let fd = (lp - lm) / (2.0 * h);
                    let a = gin[[r_, c_]];
                    assert!((fd - a).abs() / fd.abs().max(a.abs()).max(1e-6) < 1e-4);
                }
            }
        }
    }

    fn random_state(r: &mut ChaCha8Rng, k: usize, n: usize) -> SparseState {
        let mut cells = std::collections::BTreeMap::new();
        for _ in 0..n {
            let c = Coord::new(r.random_range(0..6), r.random_range(0..6), r.random_range(0..6));
            cells.insert(c, (0..k).map(|_| r.random_range(-1.0..1.0)).collect());
        }
        SparseState::from_map(cells, k, 8, 0.25).unwrap()
    }

    #[test]
    fn gather_examples() {
        let window = crate::grid::NeighborhoodSpec::new(2, crate::grid::Metric::Linf)
            .unwrap()
            .offsets();
        let empty = SparseState::empty(3, 8, 0.25);
        let f = gather_features(&empty, None, Coord::new(4, 4, 4), &window);
        assert_eq!(f.len(), 125 * 4);
        assert!(f.iter().all(|v| *v == 0.0));
        let one = SparseState::from_coords([Coord::new(4, 4, 4)], 3, 8, 0.25).unwrap();
        let f = gather_features(&one, None, Coord::new(4, 4, 4), &window);
        let center_slot = window.iter().position(|d| *d == Coord::default()).unwrap();
        assert_eq!(f.iter().filter(|v| **v != 0.0).count(), 1);
        assert_eq!(f[center_slot * 4], 1.0);
    }

    #[test]
    fn gather_matches_lookup_oracle_and_sparse_form() {
        let window = crate::grid::NeighborhoodSpec::new(2, crate::grid::Metric::Linf)
            .unwrap()
            .offsets();
        let mut r = rng(5);
        let k = 2;
        let s = random_state(&mut r, k, 40);
        let cond = random_state(&mut r, k, 20);
        let centers: Vec<Coord> = (0..10)
            .map(|_| Coord::new(r.random_range(0..8), r.random_range(0..8), r.random_range(0..8)))
            .collect();
        for cnd in [None, Some(&cond)] {
            let sparse = gather_sparse(&s, cnd, &centers, &window).to_dense();
            for (row, c) in centers.iter().enumerate() {
                let f = gather_features(&s, cnd, *c, &window);
                let b = feature_block_width(k, cnd.is_some());
                for (n, d) in window.iter().enumerate() {
                    let cell = c.offset(*d);
                    let block = &f[n * b..(n + 1) * b];
                    let zs = s.get(cell);
                    let zc = cnd.and_then(|x| x.get(cell));
                    let occ = zs.is_some() || zc.is_some();
                    assert_eq!(block[0], if occ { 1.0 } else { 0.0 });
                    match cnd {
                        None => assert_eq!(&block[1..], zs.unwrap_or(&[0.0, 0.0])),
                        Some(_) => {
                            assert_eq!(&block[1..1 + k], zc.unwrap_or(&[0.0, 0.0]));
                            assert_eq!(&block[1 + k..], zs.unwrap_or(&[0.0, 0.0]));
                        }
                    }
                }
                assert_eq!(sparse.row(row).as_slice().unwrap(), &f[..]);
            }
        }
    }

    #[test]
    fn sparse_forward_and_backward_match_dense() {
        let window = crate::grid::NeighborhoodSpec::new(1, crate::grid::Metric::Linf)
            .unwrap()
            .offsets();
        let mut r = rng(8);
        let s = random_state(&mut r, 2, 60);
        let centers: Vec<Coord> = s.coords().iter().take(12).copied().collect();
        let sp = gather_sparse(&s, None, &centers, &window);
        let dense = sp.to_dense();
        let mlp = Mlp::new("k", MlpSpec::new(vec![sp.n_cols, 8, 3], Activation::Relu, 0).unwrap());
        let mut a = ParamStore::new();
        mlp.init(&mut a, &mut r).unwrap();
        let mut b = a.clone();
        let (ya, ta) = mlp.forward(&a, MlpInput::Sparse(sp)).unwrap();
        let (yb, tb) = mlp.forward(&b, MlpInput::Dense(dense)).unwrap();
        for (x, y) in ya.iter().zip(yb.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        let g = random_input(&mut r, ya.nrows(), 3);
        mlp.backward(&mut a, &ta, &g).unwrap();
        mlp.backward(&mut b, &tb, &g).unwrap();
        for (x, y) in a.flat_grads().iter().zip(b.flat_grads()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_examples() {
        let mut store = ParamStore::new();
        store.insert("w", vec![1], vec![1.0]).unwrap();
        sgd_step(&mut store, 0.1).unwrap();
        assert_eq!(store.values("w").unwrap(), &[1.0]);
        // f(w) = w^2, grad 2w
        store.grads_mut("w").unwrap()[0] = 2.0;
        sgd_step(&mut store, 0.1).unwrap();
        assert!((store.values("w").unwrap()[0] - 0.8).abs() < 1e-15);
        assert_eq!(store.grads("w").unwrap(), &[0.0]);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        for g in [1e-2, 0.37, 10.0, -1e4] {
            let mut store = ParamStore::new();
            store.insert("w", vec![1], vec![0.25]).unwrap();
            store.grads_mut("w").unwrap()[0] = g;
            let mut adam = Adam::default();
            adam.step(&mut store, 5e-4).unwrap();
            let dw = (store.values("w").unwrap()[0] - 0.25).abs();
            assert!((dw - 5e-4).abs() < 1e-9, "g={g}: {dw}");
        }
        let mut store = ParamStore::new();
        store.insert("w", vec![2], vec![0.5, -0.5]).unwrap();
        let mut adam = Adam::default();
        adam.step(&mut store, 1e-3).unwrap();
        assert_eq!(store.values("w").unwrap(), &[0.5, -0.5]);
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut store = ParamStore::new();
        store.insert("a", vec![1], vec![1.0]).unwrap();
        store.insert("b", vec![1], vec![2.0]).unwrap();
        store.grads_mut("a").unwrap()[0] = 1.0;
        store.grads_mut("b").unwrap()[0] = f64::NAN;
        let err = sgd_step(&mut store, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "b"));
        assert_eq!(store.values("a").unwrap(), &[1.0]);
        let mut adam = Adam::default();
        assert!(matches!(adam.step(&mut store, 0.1), Err(Error::NonFiniteGradient(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mlp = Mlp::new("m", MlpSpec::new(vec![3, 4, 2], Activation::Relu, 1).unwrap());
        let mut store = ParamStore::new();
        mlp.init(&mut store, &mut rng(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        store.save_checkpoint(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..5], b"CGCA1");
        let back = ParamStore::load_checkpoint(&p).unwrap();
        for (name, param) in store.iter() {
            let b = back.get(name).unwrap();
            assert_eq!(b.shape, param.shape);
            for (x, y) in b.values.iter().zip(&param.values) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        std::fs::write(&p, b"CGCA2rest").unwrap();
        assert!(matches!(ParamStore::load_checkpoint(&p), Err(Error::Format { .. })));
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(ParamStore::load_checkpoint(&p), Err(Error::Format { .. })));
    }
}
