//! The coordinate network: linear Fourier embedding followed by a tanh MLP
//! with a linear 4-output head (u, v, w, p).
//!
//! Physics residuals need exact input derivatives up to second order and
//! parameter gradients of losses built from them. The architecture is fixed
//! and small, so instead of a general autodiff framework the network
//! propagates a per-point jet of channels
//!
//! ```text
//! [value | d/dx d/dy d/dz | d2/dxx d2/dyy d2/dzz (d2/dxy d2/dxz d2/dyz)]
//! ```
//!
//! through every layer in one fused pass (tanh derivatives are closed form),
//! and parameter gradients are obtained by reverse accumulation over that
//! pass. Channels are interleaved per neuron so the affine kernels reduce to
//! dense FMA loops over a compile-time channel count. Everything is f64;
//! the third-order checks below are not representable in f32.

use rand::Rng;
use std::f64::consts::TAU;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::seeds;
use crate::Vec3;

/// Symmetric 3x3 slot order used for second derivatives.
pub const HESS_SLOTS: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)];

pub const OUTPUTS: usize = 4;

/// How much of the jet a pass propagates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivLevel {
    /// Field values only.
    Value,
    /// Values and first input derivatives.
    Grad,
    /// Values, first derivatives and the diagonal second derivatives
    /// (enough for Laplacians; the training hot path).
    HessDiag,
    /// Full symmetric second derivatives.
    HessFull,
}

impl DerivLevel {
    /// Interleaved channel count (padded to keep blocks vector friendly).
    pub const fn channels(self) -> usize {
        match self {
            DerivLevel::Value => 1,
            DerivLevel::Grad => 4,
            DerivLevel::HessDiag => 8,
            DerivLevel::HessFull => 12,
        }
    }

    const fn hess_slots(self) -> usize {
        match self {
            DerivLevel::HessDiag => 3,
            DerivLevel::HessFull => 6,
            _ => 0,
        }
    }
}

/// How the scalar frequencies map onto the three input axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrequencyLayout {
    /// Row k applies frequency f_k to axis k mod 3 (default).
    CyclingAxes,
    /// First third of the rows on x, second on y, last on z.
    AxisBlocks,
}

impl FrequencyLayout {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cycling-axes" => Ok(FrequencyLayout::CyclingAxes),
            "axis-blocks" => Ok(FrequencyLayout::AxisBlocks),
            other => Err(Error::Config(format!(
                "unknown fourier layout `{other}` (expected cycling-axes or axis-blocks)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FrequencyLayout::CyclingAxes => "cycling-axes",
            FrequencyLayout::AxisBlocks => "axis-blocks",
        }
    }
}

/// Deterministic linear Fourier map gamma(x) = [sin(2 pi B x), cos(2 pi B x)].
///
/// Each row of B carries one scalar frequency on one axis; frequencies are
/// linearly spaced over [f_min, f_max] for uniform spectral coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierEmbedding {
    pub m: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub layout: FrequencyLayout,
    freqs: Vec<f64>,
    axes: Vec<usize>,
}

impl FourierEmbedding {
    pub fn linear(m: usize, f_min: f64, f_max: f64, layout: FrequencyLayout) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("fourier embedding needs m >= 1".into()));
        }
        if !(f_min.is_finite() && f_max.is_finite()) || f_max < f_min || f_min <= 0.0 {
            return Err(Error::Config(format!(
                "invalid fourier frequency range [{f_min}, {f_max}]"
            )));
        }
        let freqs: Vec<f64> = if m == 1 {
            vec![f_min]
        } else {
            (0..m)
                .map(|k| f_min + (f_max - f_min) * k as f64 / (m - 1) as f64)
                .collect()
        };
        let axes: Vec<usize> = (0..m)
            .map(|k| match layout {
                FrequencyLayout::CyclingAxes => k % 3,
                FrequencyLayout::AxisBlocks => (3 * k) / m,
            })
            .collect();
        Ok(FourierEmbedding {
            m,
            f_min,
            f_max,
            layout,
            freqs,
            axes,
        })
    }

    /// Default profile: 30 frequencies in [1, 2.5], embedding dimension 60.
    pub fn default_linear() -> Self {
        FourierEmbedding::linear(30, 1.0, 2.5, FrequencyLayout::CyclingAxes).unwrap()
    }

    pub fn output_dim(&self) -> usize {
        2 * self.m
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.freqs
    }

    pub fn axis_of(&self, row: usize) -> usize {
        self.axes[row]
    }

    /// Plain embedding vector (sin block then cos block).
    pub fn embed(&self, x: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; 2 * self.m];
        for k in 0..self.m {
            let (s, c) = (TAU * self.freqs[k] * x[self.axes[k]]).sin_cos();
            out[k] = s;
            out[self.m + k] = c;
        }
        out
    }

    /// Fill the interleaved jet block (2m neurons x CH channels). Each row
    /// depends on a single coordinate, so its Jacobian has one column and
    /// its Hessian one diagonal entry.
    fn embed_jet(&self, x: &Vec3, level: DerivLevel, out: &mut [f64]) {
        let ch = level.channels();
        out.fill(0.0);
        for k in 0..self.m {
            let axis = self.axes[k];
            let d = TAU * self.freqs[k];
            let (s, c) = (d * x[axis]).sin_cos();
            let sb = &mut out[k * ch..(k + 1) * ch];
            sb[0] = s;
            if ch >= 4 {
                sb[1 + axis] = d * c;
            }
            if ch >= 8 {
                sb[4 + axis] = -d * d * s;
            }
            let cb = &mut out[(self.m + k) * ch..(self.m + k + 1) * ch];
            cb[0] = c;
            if ch >= 4 {
                cb[1 + axis] = -d * s;
            }
            if ch >= 8 {
                cb[4 + axis] = -d * d * c;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerSpec {
    n_in: usize,
    n_out: usize,
    w_off: usize,
    b_off: usize,
}

/// The coordinate network f(x) = (u, v, w, p).
#[derive(Debug, Clone, PartialEq)]
pub struct FieldModel {
    pub embedding: FourierEmbedding,
    pub width: usize,
    pub depth: usize,
    params: Vec<f64>,
    layers: Vec<LayerSpec>,
}

impl FieldModel {
    /// Build the layer layout with zeroed parameters.
    pub fn zeroed(embedding: FourierEmbedding, width: usize, depth: usize) -> Result<Self> {
        if depth > 0 && width == 0 {
            return Err(Error::Config("model width must be >= 1".into()));
        }
        let mut layers = Vec::with_capacity(depth + 1);
        let mut offset = 0;
        let mut n_in = embedding.output_dim();
        for _ in 0..depth {
            let spec = LayerSpec {
                n_in,
                n_out: width,
                w_off: offset,
                b_off: offset + n_in * width,
            };
            offset = spec.b_off + width;
            layers.push(spec);
            n_in = width;
        }
        let out_spec = LayerSpec {
            n_in,
            n_out: OUTPUTS,
            w_off: offset,
            b_off: offset + n_in * OUTPUTS,
        };
        offset = out_spec.b_off + OUTPUTS;
        layers.push(out_spec);
        Ok(FieldModel {
            embedding,
            width,
            depth,
            params: vec![0.0; offset],
            layers,
        })
    }

    /// Glorot-uniform initialization (biases zero), deterministic per seed.
    pub fn glorot(embedding: FourierEmbedding, width: usize, depth: usize, seed: u64) -> Result<Self> {
        let mut model = FieldModel::zeroed(embedding, width, depth)?;
        let mut rng = seeds::rng(seed);
        for spec in model.layers.clone() {
            let a = (6.0 / (spec.n_in + spec.n_out) as f64).sqrt();
            for w in &mut model.params[spec.w_off..spec.w_off + spec.n_in * spec.n_out] {
                *w = rng.gen_range(-a..a);
            }
        }
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.params.iter().all(|p| p.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric("model parameters contain non-finite values".into()))
        }
    }

    fn layer_w(&self, spec: &LayerSpec) -> &[f64] {
        &self.params[spec.w_off..spec.w_off + spec.n_in * spec.n_out]
    }

    fn layer_b(&self, spec: &LayerSpec) -> &[f64] {
        &self.params[spec.b_off..spec.b_off + spec.n_out]
    }

    /// Gradient slice boundaries of the output head, handy for tests.
    pub fn output_head_offsets(&self) -> (usize, usize, usize) {
        let spec = self.layers[self.depth];
        (spec.w_off, spec.b_off, spec.n_in)
    }

    fn max_units(&self) -> usize {
        self.embedding.output_dim().max(self.width).max(OUTPUTS)
    }

    // ------------------------------------------------------------------
    // Evaluation
    // ------------------------------------------------------------------

    /// Field values at a point. Allocates a transient workspace; hot loops
    /// should hold a [`Workspace`] and call [`FieldModel::jet`].
    pub fn eval(&self, x: &Vec3) -> ([f64; 3], f64) {
        let mut ws = Workspace::new(self, DerivLevel::Value);
        let jet = self.jet(x, &mut ws);
        (jet.u, jet.p)
    }

    /// Batched evaluation; numerically identical to per-point `eval`.
    pub fn eval_batch(&self, xs: &[Vec3]) -> Vec<([f64; 3], f64)> {
        let mut ws = Workspace::new(self, DerivLevel::Value);
        xs.iter()
            .map(|x| {
                let jet = self.jet(x, &mut ws);
                (jet.u, jet.p)
            })
            .collect()
    }

    /// Fused forward pass at the workspace's derivative level. The
    /// workspace keeps the per-layer traces needed by [`FieldModel::backward`].
    pub fn jet(&self, x: &Vec3, ws: &mut Workspace) -> FieldJet {
        assert_eq!(ws.n_params, self.params.len(), "workspace built for another model");
        let level = ws.level;
        let ch = level.channels();
        self.embedding.embed_jet(x, level, &mut ws.emb);
        for (k, spec) in self.layers[..self.depth].iter().enumerate() {
            // The borrow checker cannot see that emb/post[k-1] and pre/post[k]
            // are disjoint, so move the blocks out for the call.
            let mut pre = std::mem::take(&mut ws.pre[k]);
            let mut post = std::mem::take(&mut ws.post[k]);
            {
                let input: &[f64] = if k == 0 { &ws.emb } else { &ws.post[k - 1] };
                affine_forward_dispatch(
                    level,
                    self.layer_w(spec),
                    self.layer_b(spec),
                    spec.n_in,
                    spec.n_out,
                    input,
                    &mut pre,
                );
            }
            tanh_forward_dispatch(level, spec.n_out, &pre, &mut post);
            ws.pre[k] = pre;
            ws.post[k] = post;
        }
        let out_spec = &self.layers[self.depth];
        let mut out = std::mem::take(&mut ws.out);
        {
            let input: &[f64] = if self.depth == 0 { &ws.emb } else { &ws.post[self.depth - 1] };
            affine_forward_dispatch(
                level,
                self.layer_w(out_spec),
                self.layer_b(out_spec),
                out_spec.n_in,
                out_spec.n_out,
                input,
                &mut out,
            );
        }
        ws.out = out;
        FieldJet::from_block(&ws.out, ch, level)
    }

    /// Reverse accumulation of parameter gradients for a loss whose adjoint
    /// with respect to the jet outputs is `adj`. Must be called with the
    /// workspace exactly as filled by the matching [`FieldModel::jet`] call.
    /// Gradients are accumulated (+=) into `grad`.
    pub fn backward(&self, ws: &mut Workspace, adj: &OutputAdjoint, grad: &mut [f64]) {
        assert_eq!(grad.len(), self.params.len(), "gradient buffer size mismatch");
        let level = ws.level;
        let ch = level.channels();
        ws.adj_out.fill(0.0);
        for i in 0..OUTPUTS {
            let blk = &mut ws.adj_out[i * ch..(i + 1) * ch];
            blk[0] = adj.val[i];
            if ch >= 4 {
                blk[1] = adj.jac[i][0];
                blk[2] = adj.jac[i][1];
                blk[3] = adj.jac[i][2];
            }
            for s in 0..level.hess_slots() {
                blk[4 + s] = adj.hess[i][s];
            }
        }
        let out_spec = self.layers[self.depth];
        {
            let input: &[f64] = if self.depth == 0 { &ws.emb } else { &ws.post[self.depth - 1] };
            ws.adj_a[..out_spec.n_in * ch].fill(0.0);
            let (wg, bg) = split_grad(grad, &out_spec);
            affine_backward_dispatch(
                level,
                self.layer_w(&out_spec),
                out_spec.n_in,
                out_spec.n_out,
                input,
                &ws.adj_out,
                &mut ws.adj_a[..out_spec.n_in * ch],
                wg,
                bg,
            );
        }
        for k in (0..self.depth).rev() {
            let spec = self.layers[k];
            // adj_a holds the adjoint of this layer's post block.
            tanh_backward_dispatch(
                level,
                spec.n_out,
                &ws.pre[k],
                &ws.post[k],
                &ws.adj_a[..spec.n_out * ch],
                &mut ws.adj_b[..spec.n_out * ch],
            );
            let input: &[f64] = if k == 0 { &ws.emb } else { &ws.post[k - 1] };
            ws.adj_c[..spec.n_in * ch].fill(0.0);
            let (wg, bg) = split_grad(grad, &spec);
            affine_backward_dispatch(
                level,
                self.layer_w(&spec),
                spec.n_in,
                spec.n_out,
                input,
                &ws.adj_b[..spec.n_out * ch],
                &mut ws.adj_c[..spec.n_in * ch],
                wg,
                bg,
            );
            std::mem::swap(&mut ws.adj_a, &mut ws.adj_c);
        }
        // The embedding has no parameters; its input adjoint is dropped.
    }

    // ------------------------------------------------------------------
    // Checkpoints
    // ------------------------------------------------------------------

    /// Write the versioned text checkpoint. Floats carry 17 digits after
    /// the mantissa's leading digit, which round-trips f64 exactly.
    pub fn save_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "musa-ckpt v1")?;
        writeln!(w, "width {}", self.width)?;
        writeln!(w, "depth {}", self.depth)?;
        writeln!(w, "inputs 3")?;
        writeln!(w, "outputs {OUTPUTS}")?;
        writeln!(w, "activation tanh")?;
        writeln!(w, "embedding linear-fourier")?;
        writeln!(w, "embedding_m {}", self.embedding.m)?;
        writeln!(w, "embedding_fmin {:.17e}", self.embedding.f_min)?;
        writeln!(w, "embedding_fmax {:.17e}", self.embedding.f_max)?;
        writeln!(w, "embedding_layout {}", self.embedding.layout.name())?;
        write!(w, "frequencies")?;
        for f in &self.embedding.freqs {
            write!(w, " {f:.17e}")?;
        }
        writeln!(w)?;
        for (idx, spec) in self.layers.iter().enumerate() {
            writeln!(w, "layer {idx} dense {} {}", spec.n_out, spec.n_in)?;
            let wts = self.layer_w(spec);
            for row in 0..spec.n_out {
                let r = &wts[row * spec.n_in..(row + 1) * spec.n_in];
                let mut line = String::with_capacity(r.len() * 26 + 1);
                line.push('w');
                for v in r {
                    line.push(' ');
                    line.push_str(&format!("{v:.17e}"));
                }
                writeln!(w, "{line}")?;
            }
            let mut line = String::from("b");
            for v in self.layer_b(spec) {
                line.push(' ');
                line.push_str(&format!("{v:.17e}"));
            }
            writeln!(w, "{line}")?;
        }
        writeln!(w, "end")?;
        Ok(())
    }

    pub fn save_to(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save_checkpoint(&mut f)
    }

    pub fn load_checkpoint<R: BufRead>(r: R) -> Result<FieldModel> {
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Parse("checkpoint truncated".into()))?
                .map_err(Error::from)
        };
        let header = next()?;
        if header.trim() != "musa-ckpt v1" {
            return Err(Error::Parse(format!(
                "bad checkpoint header `{header}` (expected `musa-ckpt v1`)"
            )));
        }
        let mut width = None;
        let mut depth = None;
        let mut m = None;
        let mut fmin = None;
        let mut fmax = None;
        let mut layout = None;
        let mut freqs: Option<Vec<f64>> = None;
        let mut line;
        loop {
            line = next()?;
            let mut it = line.split_whitespace();
            let key = it.next().unwrap_or("");
            match key {
                "width" => width = Some(parse_usize(it.next(), "width")?),
                "depth" => depth = Some(parse_usize(it.next(), "depth")?),
                "inputs" | "outputs" | "activation" | "embedding" => {}
                "embedding_m" => m = Some(parse_usize(it.next(), "embedding_m")?),
                "embedding_fmin" => fmin = Some(parse_f64(it.next(), "embedding_fmin")?),
                "embedding_fmax" => fmax = Some(parse_f64(it.next(), "embedding_fmax")?),
                "embedding_layout" => {
                    layout = Some(
                        FrequencyLayout::parse(it.next().unwrap_or(""))
                            .map_err(|_| Error::Parse("bad embedding_layout in checkpoint".into()))?,
                    )
                }
                "frequencies" => {
                    let fs: std::result::Result<Vec<f64>, _> = it.map(|t| t.parse::<f64>()).collect();
                    freqs = Some(fs.map_err(|e| Error::Parse(format!("bad frequency: {e}")))?);
                }
                "layer" => break,
                other => return Err(Error::Parse(format!("unexpected checkpoint field `{other}`"))),
            }
        }
        let width = width.ok_or_else(|| Error::Parse("checkpoint missing width".into()))?;
        let depth = depth.ok_or_else(|| Error::Parse("checkpoint missing depth".into()))?;
        let m = m.ok_or_else(|| Error::Parse("checkpoint missing embedding_m".into()))?;
        let embedding = FourierEmbedding::linear(
            m,
            fmin.ok_or_else(|| Error::Parse("checkpoint missing embedding_fmin".into()))?,
            fmax.ok_or_else(|| Error::Parse("checkpoint missing embedding_fmax".into()))?,
            layout.ok_or_else(|| Error::Parse("checkpoint missing embedding_layout".into()))?,
        )
        .map_err(|e| Error::Parse(format!("invalid embedding in checkpoint: {e}")))?;
        if let Some(fs) = freqs {
            if fs.len() != m {
                return Err(Error::Parse("frequency list length mismatch".into()));
            }
            for (a, b) in fs.iter().zip(embedding.freqs.iter()) {
                if a != b {
                    return Err(Error::Parse(
                        "frequency list inconsistent with linspace parameters".into(),
                    ));
                }
            }
        }
        let mut model = FieldModel::zeroed(embedding, width, depth)
            .map_err(|e| Error::Parse(format!("invalid architecture in checkpoint: {e}")))?;
        // `line` holds the first `layer` line.
        for idx in 0..model.layers.len() {
            let spec = model.layers[idx];
            let mut it = line.split_whitespace();
            let tag = (it.next(), it.next(), it.next(), it.next(), it.next());
            match tag {
                (Some("layer"), Some(i), Some("dense"), Some(no), Some(ni)) => {
                    let i: usize = i.parse().map_err(|_| Error::Parse("bad layer index".into()))?;
                    let no: usize = no.parse().map_err(|_| Error::Parse("bad layer size".into()))?;
                    let ni: usize = ni.parse().map_err(|_| Error::Parse("bad layer size".into()))?;
                    if i != idx || no != spec.n_out || ni != spec.n_in {
                        return Err(Error::Parse(format!(
                            "layer {idx} shape mismatch: file says {no}x{ni}, architecture {}x{}",
                            spec.n_out, spec.n_in
                        )));
                    }
                }
                _ => return Err(Error::Parse(format!("malformed layer line `{line}`"))),
            }
            for row in 0..spec.n_out {
                let wline = next()?;
                let mut it = wline.split_whitespace();
                if it.next() != Some("w") {
                    return Err(Error::Parse(format!("expected weight row, got `{wline}`")));
                }
                for j in 0..spec.n_in {
                    let tok = it
                        .next()
                        .ok_or_else(|| Error::Parse(format!("weight row {row} too short at {j}")))?;
                    model.params[spec.w_off + row * spec.n_in + j] =
                        tok.parse().map_err(|e| Error::Parse(format!("bad weight: {e}")))?;
                }
                if it.next().is_some() {
                    return Err(Error::Parse(format!("weight row {row} too long")));
                }
            }
            let bline = next()?;
            let mut it = bline.split_whitespace();
            if it.next() != Some("b") {
                return Err(Error::Parse(format!("expected bias row, got `{bline}`")));
            }
            for j in 0..spec.n_out {
                let tok = it
                    .next()
                    .ok_or_else(|| Error::Parse(format!("bias row too short at {j}")))?;
                model.params[spec.b_off + j] =
                    tok.parse().map_err(|e| Error::Parse(format!("bad bias: {e}")))?;
            }
            if idx + 1 < model.layers.len() {
                line = next()?;
            }
        }
        let end = next()?;
        if end.trim() != "end" {
            return Err(Error::Parse("checkpoint missing end marker".into()));
        }
        Ok(model)
    }

    pub fn load_from(path: &Path) -> Result<FieldModel> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        FieldModel::load_checkpoint(f)
    }
}

fn parse_usize(tok: Option<&str>, what: &str) -> Result<usize> {
    tok.ok_or_else(|| Error::Parse(format!("missing {what}")))?
        .parse()
        .map_err(|e| Error::Parse(format!("bad {what}: {e}")))
}

fn parse_f64(tok: Option<&str>, what: &str) -> Result<f64> {
    tok.ok_or_else(|| Error::Parse(format!("missing {what}")))?
        .parse()
        .map_err(|e| Error::Parse(format!("bad {what}: {e}")))
}

fn split_grad<'a>(grad: &'a mut [f64], spec: &LayerSpec) -> (&'a mut [f64], &'a mut [f64]) {
    let (_, rest) = grad.split_at_mut(spec.w_off);
    let (wg, rest) = rest.split_at_mut(spec.n_in * spec.n_out);
    let (bg, _) = rest.split_at_mut(spec.n_out);
    (wg, bg)
}

/// Jet outputs at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldJet {
    pub u: [f64; 3],
    pub p: f64,
    /// grad_u[i][j] = d u_i / d x_j (zero below `Grad` level).
    pub grad_u: [[f64; 3]; 3],
    pub grad_p: [f64; 3],
    /// hess_u[i] in slot order xx, yy, zz, xy, xz, yz (off-diagonal slots
    /// zero at `HessDiag` level).
    pub hess_u: [[f64; 6]; 3],
}

impl FieldJet {
    pub fn zero() -> FieldJet {
        FieldJet {
            u: [0.0; 3],
            p: 0.0,
            grad_u: [[0.0; 3]; 3],
            grad_p: [0.0; 3],
            hess_u: [[0.0; 6]; 3],
        }
    }

    fn from_block(block: &[f64], ch: usize, level: DerivLevel) -> FieldJet {
        let mut jet = FieldJet::zero();
        for i in 0..OUTPUTS {
            let blk = &block[i * ch..(i + 1) * ch];
            if i < 3 {
                jet.u[i] = blk[0];
            } else {
                jet.p = blk[0];
            }
            if ch >= 4 {
                for d in 0..3 {
                    if i < 3 {
                        jet.grad_u[i][d] = blk[1 + d];
                    } else {
                        jet.grad_p[d] = blk[1 + d];
                    }
                }
            }
            if i < 3 {
                for s in 0..level.hess_slots() {
                    jet.hess_u[i][s] = blk[4 + s];
                }
            }
        }
        jet
    }

    /// Expand the stored slots of velocity component `i` into a symmetric
    /// matrix.
    pub fn hessian_matrix(&self, i: usize) -> [[f64; 3]; 3] {
        let h = &self.hess_u[i];
        [[h[0], h[3], h[4]], [h[3], h[1], h[5]], [h[4], h[5], h[2]]]
    }

    pub fn laplacian_u(&self) -> [f64; 3] {
        [
            self.hess_u[0][0] + self.hess_u[0][1] + self.hess_u[0][2],
            self.hess_u[1][0] + self.hess_u[1][1] + self.hess_u[1][2],
            self.hess_u[2][0] + self.hess_u[2][1] + self.hess_u[2][2],
        ]
    }
}

/// Adjoint of a scalar loss with respect to the jet outputs of one point.
/// Slot order matches [`FieldJet`]; row 3 (pressure) of `hess` is unused by
/// the physics losses but kept for uniformity.
#[derive(Debug, Clone, Copy, Default)]
pub struct OutputAdjoint {
    pub val: [f64; 4],
    pub jac: [[f64; 3]; 4],
    pub hess: [[f64; 6]; 4],
}

/// Reusable per-thread buffers for one (model, level) pair.
#[derive(Debug, Clone)]
pub struct Workspace {
    level: DerivLevel,
    n_params: usize,
    emb: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    out: Vec<f64>,
    adj_out: Vec<f64>,
    adj_a: Vec<f64>,
    adj_b: Vec<f64>,
    adj_c: Vec<f64>,
}

impl Workspace {
    pub fn new(model: &FieldModel, level: DerivLevel) -> Workspace {
        let ch = level.channels();
        let width_block = model.max_units() * ch;
        Workspace {
            level,
            n_params: model.params.len(),
            emb: vec![0.0; model.embedding.output_dim() * ch],
            pre: (0..model.depth).map(|_| vec![0.0; model.width * ch]).collect(),
            post: (0..model.depth).map(|_| vec![0.0; model.width * ch]).collect(),
            out: vec![0.0; OUTPUTS * ch],
            adj_out: vec![0.0; OUTPUTS * ch],
            adj_a: vec![0.0; width_block],
            adj_b: vec![0.0; width_block],
            adj_c: vec![0.0; width_block],
        }
    }

    pub fn level(&self) -> DerivLevel {
        self.level
    }
}

// ----------------------------------------------------------------------
// Kernels
// ----------------------------------------------------------------------

#[inline]
fn affine_forward<const CH: usize>(
    w: &[f64],
    b: &[f64],
    n_in: usize,
    n_out: usize,
    inp: &[f64],
    out: &mut [f64],
) {
    debug_assert_eq!(w.len(), n_in * n_out);
    debug_assert!(inp.len() >= n_in * CH && out.len() >= n_out * CH);
    for i in 0..n_out {
        let row = &w[i * n_in..(i + 1) * n_in];
        let mut acc = [0.0f64; CH];
        for (j, &wij) in row.iter().enumerate() {
            let blk = &inp[j * CH..j * CH + CH];
            for c in 0..CH {
                acc[c] += wij * blk[c];
            }
        }
        acc[0] += b[i];
        out[i * CH..i * CH + CH].copy_from_slice(&acc);
    }
}

/// Fused transposed matvec (input adjoint) and parameter-gradient update.
#[inline]
#[allow(clippy::too_many_arguments)]
fn affine_backward<const CH: usize>(
    w: &[f64],
    n_in: usize,
    n_out: usize,
    inp: &[f64],
    out_adj: &[f64],
    inp_adj: &mut [f64],
    w_grad: &mut [f64],
    b_grad: &mut [f64],
) {
    for i in 0..n_out {
        let oa: [f64; CH] = out_adj[i * CH..i * CH + CH].try_into().unwrap();
        b_grad[i] += oa[0];
        let row_w = &w[i * n_in..(i + 1) * n_in];
        let row_g = &mut w_grad[i * n_in..(i + 1) * n_in];
        for j in 0..n_in {
            let ib = &inp[j * CH..j * CH + CH];
            let ia = &mut inp_adj[j * CH..j * CH + CH];
            let wij = row_w[j];
            let mut dot = 0.0;
            for c in 0..CH {
                dot += oa[c] * ib[c];
                ia[c] += wij * oa[c];
            }
            row_g[j] += dot;
        }
    }
}

fn affine_forward_dispatch(
    level: DerivLevel,
    w: &[f64],
    b: &[f64],
    n_in: usize,
    n_out: usize,
    inp: &[f64],
    out: &mut [f64],
) {
    match level {
        DerivLevel::Value => affine_forward::<1>(w, b, n_in, n_out, inp, out),
        DerivLevel::Grad => affine_forward::<4>(w, b, n_in, n_out, inp, out),
        DerivLevel::HessDiag => affine_forward::<8>(w, b, n_in, n_out, inp, out),
        DerivLevel::HessFull => affine_forward::<12>(w, b, n_in, n_out, inp, out),
    }
}

#[allow(clippy::too_many_arguments)]
fn affine_backward_dispatch(
    level: DerivLevel,
    w: &[f64],
    n_in: usize,
    n_out: usize,
    inp: &[f64],
    out_adj: &[f64],
    inp_adj: &mut [f64],
    w_grad: &mut [f64],
    b_grad: &mut [f64],
) {
    match level {
        DerivLevel::Value => affine_backward::<1>(w, n_in, n_out, inp, out_adj, inp_adj, w_grad, b_grad),
        DerivLevel::Grad => affine_backward::<4>(w, n_in, n_out, inp, out_adj, inp_adj, w_grad, b_grad),
        DerivLevel::HessDiag => affine_backward::<8>(w, n_in, n_out, inp, out_adj, inp_adj, w_grad, b_grad),
        DerivLevel::HessFull => affine_backward::<12>(w, n_in, n_out, inp, out_adj, inp_adj, w_grad, b_grad),
    }
}

/// tanh jet transform. With t = tanh(z):
/// sigma'   = 1 - t^2
/// sigma''  = -2 t sigma'
/// sigma''' = (6 t^2 - 2) sigma'
/// First derivatives map as sigma' a, second as sigma'' a_a a_b + sigma' c.
fn tanh_forward_dispatch(level: DerivLevel, n: usize, pre: &[f64], post: &mut [f64]) {
    match level {
        DerivLevel::Value => {
            for i in 0..n {
                post[i] = pre[i].tanh();
            }
        }
        DerivLevel::Grad => {
            const CH: usize = 4;
            for i in 0..n {
                let z = &pre[i * CH..(i + 1) * CH];
                let h = &mut post[i * CH..(i + 1) * CH];
                let t = z[0].tanh();
                let s1 = 1.0 - t * t;
                h[0] = t;
                for d in 0..3 {
                    h[1 + d] = s1 * z[1 + d];
                }
            }
        }
        DerivLevel::HessDiag => {
            const CH: usize = 8;
            for i in 0..n {
                let z = &pre[i * CH..(i + 1) * CH];
                let h = &mut post[i * CH..(i + 1) * CH];
                let t = z[0].tanh();
                let s1 = 1.0 - t * t;
                let s2 = -2.0 * t * s1;
                h[0] = t;
                for d in 0..3 {
                    let a = z[1 + d];
                    h[1 + d] = s1 * a;
                    h[4 + d] = s2 * a * a + s1 * z[4 + d];
                }
                h[7] = 0.0;
            }
        }
        DerivLevel::HessFull => {
            const CH: usize = 12;
            for i in 0..n {
                let z = &pre[i * CH..(i + 1) * CH];
                let h = &mut post[i * CH..(i + 1) * CH];
                let t = z[0].tanh();
                let s1 = 1.0 - t * t;
                let s2 = -2.0 * t * s1;
                h[0] = t;
                let a = [z[1], z[2], z[3]];
                for d in 0..3 {
                    h[1 + d] = s1 * a[d];
                }
                for (s, (d0, d1)) in HESS_SLOTS.iter().enumerate() {
                    h[4 + s] = s2 * a[*d0] * a[*d1] + s1 * z[4 + s];
                }
                h[10] = 0.0;
                h[11] = 0.0;
            }
        }
    }
}

fn tanh_backward_dispatch(
    level: DerivLevel,
    n: usize,
    pre: &[f64],
    post: &[f64],
    post_adj: &[f64],
    pre_adj: &mut [f64],
) {
    match level {
        DerivLevel::Value => {
            for i in 0..n {
                let t = post[i];
                pre_adj[i] = (1.0 - t * t) * post_adj[i];
            }
        }
        DerivLevel::Grad => {
            const CH: usize = 4;
            for i in 0..n {
                let z = &pre[i * CH..(i + 1) * CH];
                let t = post[i * CH];
                let pa = &post_adj[i * CH..(i + 1) * CH];
                let za = &mut pre_adj[i * CH..(i + 1) * CH];
                let s1 = 1.0 - t * t;
                let s2 = -2.0 * t * s1;
                let mut z0 = s1 * pa[0];
                for d in 0..3 {
                    z0 += s2 * z[1 + d] * pa[1 + d];
                    za[1 + d] = s1 * pa[1 + d];
                }
                za[0] = z0;
            }
        }
        DerivLevel::HessDiag => {
            const CH: usize = 8;
            for i in 0..n {
                let z = &pre[i * CH..(i + 1) * CH];
                let t = post[i * CH];
                let pa = &post_adj[i * CH..(i + 1) * CH];
                let za = &mut pre_adj[i * CH..(i + 1) * CH];
                let s1 = 1.0 - t * t;
                let s2 = -2.0 * t * s1;
                let s3 = (6.0 * t * t - 2.0) * s1;
                let mut z0 = s1 * pa[0];
                for d in 0..3 {
                    let a = z[1 + d];
                    z0 += s2 * a * pa[1 + d];
                    z0 += (s3 * a * a + s2 * z[4 + d]) * pa[4 + d];
                    za[1 + d] = s1 * pa[1 + d] + s2 * 2.0 * a * pa[4 + d];
                    za[4 + d] = s1 * pa[4 + d];
                }
                za[0] = z0;
                za[7] = 0.0;
            }
        }
        DerivLevel::HessFull => {
            const CH: usize = 12;
            for i in 0..n {
                let z = &pre[i * CH..(i + 1) * CH];
                let t = post[i * CH];
                let pa = &post_adj[i * CH..(i + 1) * CH];
                let za = &mut pre_adj[i * CH..(i + 1) * CH];
                let s1 = 1.0 - t * t;
                let s2 = -2.0 * t * s1;
                let s3 = (6.0 * t * t - 2.0) * s1;
                let a = [z[1], z[2], z[3]];
                let mut z0 = s1 * pa[0];
                let mut aj = [0.0f64; 3];
                for d in 0..3 {
                    z0 += s2 * a[d] * pa[1 + d];
                    aj[d] = s1 * pa[1 + d];
                }
                for (s, (d0, d1)) in HESS_SLOTS.iter().enumerate() {
                    let ps = pa[4 + s];
                    z0 += (s3 * a[*d0] * a[*d1] + s2 * z[4 + s]) * ps;
                    aj[*d0] += s2 * a[*d1] * ps;
                    aj[*d1] += s2 * a[*d0] * ps;
                    za[4 + s] = s1 * ps;
                }
                za[0] = z0;
                za[1] = aj[0];
                za[2] = aj[1];
                za[3] = aj[2];
                za[10] = 0.0;
                za[11] = 0.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn small_model(seed: u64) -> FieldModel {
        let emb = FourierEmbedding::linear(4, 1.0, 2.0, FrequencyLayout::CyclingAxes).unwrap();
        FieldModel::glorot(emb, 8, 2, seed).unwrap()
    }

    #[test]
    fn embedding_at_origin() {
        let emb = FourierEmbedding::default_linear();
        let gamma = emb.embed(&Vec3::zeros());
        for k in 0..30 {
            assert_eq!(gamma[k], 0.0);
            assert_eq!(gamma[30 + k], 1.0);
        }
    }

    #[test]
    fn embedding_identity_sums_to_m() {
        let emb = FourierEmbedding::default_linear();
        let mut rng = seeds::rng(1);
        for _ in 0..50 {
            let x = Vec3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let g = emb.embed(&x);
            let mut total = 0.0;
            for k in 0..emb.m {
                let pair = g[k] * g[k] + g[emb.m + k] * g[emb.m + k];
                assert!((pair - 1.0).abs() < 1e-12);
                total += pair;
            }
            assert!((total - emb.m as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_frequencies_are_linspace() {
        let emb = FourierEmbedding::default_linear();
        for k in 0..30 {
            let expected = 1.0 + 1.5 * k as f64 / 29.0;
            assert_relative_eq!(emb.frequencies()[k], expected, epsilon = 1e-15);
            assert_eq!(emb.axis_of(k), k % 3);
        }
    }

    #[test]
    fn zero_weights_return_bias() {
        let emb = FourierEmbedding::linear(2, 1.0, 2.0, FrequencyLayout::CyclingAxes).unwrap();
        let mut model = FieldModel::zeroed(emb, 5, 2).unwrap();
        let n = model.param_count();
        model.params_mut()[n - 4..].copy_from_slice(&[0.5, -1.0, 2.0, 3.5]);
        for x in [Vec3::zeros(), Vec3::new(1.0, -2.0, 0.3)] {
            let (u, p) = model.eval(&x);
            assert_eq!(u, [0.5, -1.0, 2.0]);
            assert_eq!(p, 3.5);
        }
        let mut ws = Workspace::new(&model, DerivLevel::HessFull);
        let jet = model.jet(&Vec3::new(0.2, 0.1, 0.7), &mut ws);
        assert_eq!(jet.grad_u, [[0.0; 3]; 3]);
        assert_eq!(jet.hess_u, [[0.0; 6]; 3]);
    }

    #[test]
    fn batch_matches_single_eval() {
        let model = small_model(3);
        let mut rng = seeds::rng(4);
        let xs: Vec<Vec3> = (0..32)
            .map(|_| Vec3::new(rng.gen_range(0.0..5.0), rng.gen(), rng.gen()))
            .collect();
        let batch = model.eval_batch(&xs);
        for (x, b) in xs.iter().zip(batch.iter()) {
            let single = model.eval(x);
            assert_eq!(single.0, b.0);
            assert_eq!(single.1, b.1);
        }
    }

    /// Straightforward nested-loop evaluation, written independently of the
    /// jet kernels.
    fn naive_forward(model: &FieldModel, x: &Vec3) -> Vec<f64> {
        let mut act = model.embedding.embed(x);
        let mut offset = 0usize;
        for layer in 0..model.depth + 1 {
            let n_in = act.len();
            let n_out = if layer < model.depth { model.width } else { OUTPUTS };
            let w = &model.params()[offset..offset + n_in * n_out];
            let b = &model.params()[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let mut next = vec![0.0; n_out];
            for i in 0..n_out {
                let mut z = b[i];
                for j in 0..n_in {
                    z += w[i * n_in + j] * act[j];
                }
                next[i] = if layer < model.depth { z.tanh() } else { z };
            }
            act = next;
        }
        act
    }

    #[test]
    fn forward_agrees_with_naive_reimplementation() {
        let model = small_model(5);
        let mut rng = seeds::rng(6);
        for _ in 0..20 {
            let x = Vec3::new(rng.gen_range(0.0..5.0), rng.gen(), rng.gen());
            let naive = naive_forward(&model, &x);
            let (u, p) = model.eval(&x);
            for i in 0..3 {
                assert!((u[i] - naive[i]).abs() < 1e-10);
            }
            assert!((p - naive[3]).abs() < 1e-10);
        }
    }

    #[test]
    fn single_frequency_probe_jacobian() {
        // Depth 0: output = W gamma(x) + b with gamma = [sin(2 pi f x), cos(2 pi f x)].
        let emb = FourierEmbedding::linear(1, 1.5, 1.5, FrequencyLayout::CyclingAxes).unwrap();
        let mut model = FieldModel::zeroed(emb, 0, 0).unwrap();
        // u0 = 2 sin(2 pi f x) - 0.5 cos(2 pi f x).
        model.params_mut()[0] = 2.0;
        model.params_mut()[1] = -0.5;
        let f = 1.5;
        let mut ws = Workspace::new(&model, DerivLevel::HessFull);
        for x0 in [0.0, 0.3, -1.2] {
            let x = Vec3::new(x0, 7.0, -3.0);
            let jet = model.jet(&x, &mut ws);
            let arg = TAU * f * x0;
            let expect_v = 2.0 * arg.sin() - 0.5 * arg.cos();
            let expect_dx = TAU * f * (2.0 * arg.cos() + 0.5 * arg.sin());
            let expect_dxx = -(TAU * f).powi(2) * expect_v;
            assert_relative_eq!(jet.u[0], expect_v, epsilon = 1e-12);
            assert_relative_eq!(jet.grad_u[0][0], expect_dx, epsilon = 1e-11);
            assert_relative_eq!(jet.hess_u[0][0], expect_dxx, epsilon = 1e-10);
            assert_eq!(jet.grad_u[0][1], 0.0);
            assert_eq!(jet.grad_u[0][2], 0.0);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let model = small_model(7);
        let mut ws = Workspace::new(&model, DerivLevel::Grad);
        let mut rng = seeds::rng(8);
        let h = 1e-5;
        for _ in 0..100 {
            let x = Vec3::new(rng.gen_range(0.0..5.0), rng.gen(), rng.gen());
            let jet = model.jet(&x, &mut ws);
            for d in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[d] += h;
                xm[d] -= h;
                let fp = model.eval(&xp);
                let fm = model.eval(&xm);
                for i in 0..4 {
                    let vp = if i < 3 { fp.0[i] } else { fp.1 };
                    let vm = if i < 3 { fm.0[i] } else { fm.1 };
                    let fd = (vp - vm) / (2.0 * h);
                    let analytic = if i < 3 { jet.grad_u[i][d] } else { jet.grad_p[d] };
                    let scale = analytic.abs().max(1.0);
                    assert!(
                        (analytic - fd).abs() / scale < 1e-5,
                        "output {i} axis {d}: {analytic} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn hessians_match_finite_differences() {
        let model = small_model(9);
        let mut ws = Workspace::new(&model, DerivLevel::HessFull);
        let mut rng = seeds::rng(10);
        let h = 1e-3;
        let comp = |v: ([f64; 3], f64), i: usize| if i < 3 { v.0[i] } else { v.1 };
        for _ in 0..50 {
            let x = Vec3::new(rng.gen_range(0.0..5.0), rng.gen(), rng.gen());
            let jet = model.jet(&x, &mut ws);
            for i in 0..3 {
                let hm = jet.hessian_matrix(i);
                for d in 0..3 {
                    let mut xp = x;
                    let mut xm = x;
                    xp[d] += h;
                    xm[d] -= h;
                    let fd = (comp(model.eval(&xp), i) - 2.0 * comp(model.eval(&x), i)
                        + comp(model.eval(&xm), i))
                        / (h * h);
                    let scale = hm[d][d].abs().max(1.0);
                    assert!(
                        (hm[d][d] - fd).abs() / scale < 1e-3,
                        "comp {i} d2/dx{d}2: {} vs fd {fd}",
                        hm[d][d]
                    );
                }
                for (a, b) in [(0, 1), (0, 2), (1, 2)] {
                    let mut xpp = x;
                    let mut xpm = x;
                    let mut xmp = x;
                    let mut xmm = x;
                    xpp[a] += h;
                    xpp[b] += h;
                    xpm[a] += h;
                    xpm[b] -= h;
                    xmp[a] -= h;
                    xmp[b] += h;
                    xmm[a] -= h;
                    xmm[b] -= h;
                    let fd = (comp(model.eval(&xpp), i) - comp(model.eval(&xpm), i)
                        - comp(model.eval(&xmp), i)
                        + comp(model.eval(&xmm), i))
                        / (4.0 * h * h);
                    let scale = hm[a][b].abs().max(1.0);
                    assert!(
                        (hm[a][b] - fd).abs() / scale < 1e-3,
                        "comp {i} mixed ({a},{b}): {} vs fd {fd}",
                        hm[a][b]
                    );
                }
            }
        }
    }

    /// Independent directional second-order jet: scalar Taylor arithmetic
    /// along one direction. Shares no code with the channel kernels.
    fn directional_jet(model: &FieldModel, x: &Vec3, e: &Vec3) -> Vec<(f64, f64, f64)> {
        let emb = &model.embedding;
        let mut jets: Vec<(f64, f64, f64)> = Vec::with_capacity(emb.output_dim());
        for k in 0..emb.m {
            let d = TAU * emb.frequencies()[k];
            let arg = d * x[emb.axis_of(k)];
            let da = d * e[emb.axis_of(k)];
            let (s, c) = arg.sin_cos();
            jets.push((s, c * da, -s * da * da));
        }
        for k in 0..emb.m {
            let d = TAU * emb.frequencies()[k];
            let arg = d * x[emb.axis_of(k)];
            let da = d * e[emb.axis_of(k)];
            let (s, c) = arg.sin_cos();
            jets.push((c, -s * da, -c * da * da));
        }
        let mut offset = 0usize;
        for layer in 0..model.depth + 1 {
            let n_in = jets.len();
            let n_out = if layer < model.depth { model.width } else { OUTPUTS };
            let w = &model.params()[offset..offset + n_in * n_out];
            let b = &model.params()[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let mut next = Vec::with_capacity(n_out);
            for i in 0..n_out {
                let mut z = (b[i], 0.0, 0.0);
                for j in 0..n_in {
                    let wij = w[i * n_in + j];
                    z.0 += wij * jets[j].0;
                    z.1 += wij * jets[j].1;
                    z.2 += wij * jets[j].2;
                }
                if layer < model.depth {
                    let t = z.0.tanh();
                    let s1 = 1.0 - t * t;
                    let s2 = -2.0 * t * s1;
                    next.push((t, s1 * z.1, s2 * z.1 * z.1 + s1 * z.2));
                } else {
                    next.push(z);
                }
            }
            jets = next;
        }
        jets
    }

    #[test]
    fn laplacian_matches_independent_directional_jets() {
        let model = small_model(11);
        let mut ws = Workspace::new(&model, DerivLevel::HessFull);
        let mut rng = seeds::rng(12);
        for _ in 0..25 {
            let x = Vec3::new(rng.gen_range(0.0..5.0), rng.gen(), rng.gen());
            let jet = model.jet(&x, &mut ws);
            let lap = jet.laplacian_u();
            for i in 0..3 {
                let mut indep = 0.0;
                for d in 0..3 {
                    let mut e = Vec3::zeros();
                    e[d] = 1.0;
                    indep += directional_jet(&model, &x, &e)[i].2;
                }
                assert!(
                    (lap[i] - indep).abs() < 1e-10 * lap[i].abs().max(1.0),
                    "laplacian comp {i}: {} vs independent {indep}",
                    lap[i]
                );
            }
            // A random oblique direction exercises the off-diagonal slots:
            // e' H e must match the directional second derivative.
            let e = Vec3::new(0.36, -0.48, 0.8);
            let dir = directional_jet(&model, &x, &e);
            for i in 0..3 {
                let hm = jet.hessian_matrix(i);
                let mut quad = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        quad += e[a] * hm[a][b] * e[b];
                    }
                }
                assert!(
                    (quad - dir[i].2).abs() < 1e-10 * dir[i].2.abs().max(1.0),
                    "directional second derivative comp {i}"
                );
            }
        }
    }

    #[test]
    fn hessdiag_level_matches_full_diagonal() {
        let model = small_model(13);
        let mut full = Workspace::new(&model, DerivLevel::HessFull);
        let mut diag = Workspace::new(&model, DerivLevel::HessDiag);
        let x = Vec3::new(1.3, 0.4, 0.9);
        let jf = model.jet(&x, &mut full);
        let jd = model.jet(&x, &mut diag);
        assert_eq!(jf.u, jd.u);
        assert_eq!(jf.grad_u, jd.grad_u);
        for i in 0..3 {
            for s in 0..3 {
                assert_eq!(jf.hess_u[i][s], jd.hess_u[i][s]);
            }
            for s in 3..6 {
                assert_eq!(jd.hess_u[i][s], 0.0);
            }
        }
    }

    #[test]
    fn gradient_of_velocity_loss_ignores_pressure_head() {
        let model = small_model(14);
        let mut ws = Workspace::new(&model, DerivLevel::Value);
        let x = Vec3::new(2.0, 0.5, 0.5);
        let jet = model.jet(&x, &mut ws);
        let mut adj = OutputAdjoint::default();
        for i in 0..3 {
            adj.val[i] = 2.0 * jet.u[i];
        }
        let mut grad = vec![0.0; model.param_count()];
        model.backward(&mut ws, &adj, &mut grad);
        let (w_off, b_off, n_in) = model.output_head_offsets();
        let p_row = &grad[w_off + 3 * n_in..w_off + 4 * n_in];
        assert!(p_row.iter().all(|g| *g == 0.0));
        assert_eq!(grad[b_off + 3], 0.0);
        let u_row = &grad[w_off..w_off + n_in];
        assert!(u_row.iter().any(|g| *g != 0.0));
    }

    #[test]
    fn quadratic_probe_gradient_is_analytic() {
        // Depth 0: f = W gamma(x) + b, loss = |f|^2, so dL/dW = 2 f gamma'.
        let emb = FourierEmbedding::linear(2, 1.0, 2.0, FrequencyLayout::CyclingAxes).unwrap();
        let mut model = FieldModel::zeroed(emb, 0, 0).unwrap();
        let mut rng = seeds::rng(15);
        for p in model.params_mut() {
            *p = rng.gen_range(-1.0..1.0);
        }
        let x = Vec3::new(0.7, -0.2, 0.4);
        let gamma = model.embedding.embed(&x);
        let mut ws = Workspace::new(&model, DerivLevel::Value);
        let jet = model.jet(&x, &mut ws);
        let f = [jet.u[0], jet.u[1], jet.u[2], jet.p];
        let mut adj = OutputAdjoint::default();
        for i in 0..4 {
            adj.val[i] = 2.0 * f[i];
        }
        let mut grad = vec![0.0; model.param_count()];
        model.backward(&mut ws, &adj, &mut grad);
        let n_in = model.embedding.output_dim();
        for i in 0..4 {
            for j in 0..n_in {
                assert_relative_eq!(grad[i * n_in + j], 2.0 * f[i] * gamma[j], epsilon = 1e-12);
            }
            assert_relative_eq!(grad[4 * n_in + i], 2.0 * f[i], epsilon = 1e-12);
        }
    }

    /// A loss that touches values, first and second derivatives (diagonal
    /// and mixed), evaluated with the production jet/backward pair.
    fn probe_loss_and_grad(model: &FieldModel, pts: &[Vec3], mut grad: Option<&mut [f64]>) -> f64 {
        let mut ws = Workspace::new(model, DerivLevel::HessFull);
        let mut total = 0.0;
        for x in pts {
            let jet = model.jet(x, &mut ws);
            let div = jet.grad_u[0][0] + jet.grad_u[1][1] + jet.grad_u[2][2];
            let lap = jet.laplacian_u();
            let mixed = jet.hess_u[0][3] + 0.5 * jet.hess_u[1][4] - jet.hess_u[2][5];
            total += div * div
                + lap.iter().map(|l| l * l).sum::<f64>()
                + jet.u.iter().map(|u| u * u).sum::<f64>()
                + jet.p * jet.p
                + mixed * mixed
                + jet.grad_p[1] * jet.grad_p[1];
            if let Some(g) = grad.as_deref_mut() {
                let mut adj = OutputAdjoint::default();
                for i in 0..3 {
                    adj.val[i] = 2.0 * jet.u[i];
                    adj.jac[i][i] = 2.0 * div;
                    for s in 0..3 {
                        adj.hess[i][s] += 2.0 * lap[i];
                    }
                }
                adj.hess[0][3] += 2.0 * mixed;
                adj.hess[1][4] += 0.5 * 2.0 * mixed;
                adj.hess[2][5] += -2.0 * mixed;
                adj.val[3] = 2.0 * jet.p;
                adj.jac[3][1] = 2.0 * jet.grad_p[1];
                model.backward(&mut ws, &adj, g);
            }
        }
        total
    }

    #[test]
    fn parameter_gradient_matches_directional_fd() {
        let emb = FourierEmbedding::linear(6, 1.0, 2.5, FrequencyLayout::CyclingAxes).unwrap();
        let model = FieldModel::glorot(emb, 16, 2, 16).unwrap();
        let mut rng = seeds::rng(17);
        let pts: Vec<Vec3> = (0..5)
            .map(|_| Vec3::new(rng.gen_range(0.0..5.0), rng.gen(), rng.gen()))
            .collect();
        let mut grad = vec![0.0; model.param_count()];
        probe_loss_and_grad(&model, &pts, Some(&mut grad));
        let eps = 1e-6;
        for trial in 0..10 {
            let mut dir: Vec<f64> = (0..model.param_count())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
            dir.iter_mut().for_each(|d| *d /= norm);
            let mut mp = model.clone();
            let mut mm = model.clone();
            for i in 0..dir.len() {
                mp.params_mut()[i] += eps * dir[i];
                mm.params_mut()[i] -= eps * dir[i];
            }
            let fd = (probe_loss_and_grad(&mp, &pts, None) - probe_loss_and_grad(&mm, &pts, None))
                / (2.0 * eps);
            let analytic: f64 = grad.iter().zip(dir.iter()).map(|(g, d)| g * d).sum();
            assert!(
                (fd - analytic).abs() / analytic.abs().max(1e-8) < 1e-4,
                "trial {trial}: fd {fd} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn glorot_variance_is_on_target() {
        let emb = FourierEmbedding::default_linear();
        for seed in 0..10u64 {
            let model = FieldModel::glorot(emb.clone(), 64, 3, seed).unwrap();
            for spec in &model.layers {
                let w = model.layer_w(spec);
                let mean = w.iter().sum::<f64>() / w.len() as f64;
                let var = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / w.len() as f64;
                let target = 2.0 / (spec.n_in + spec.n_out) as f64;
                assert!(
                    (var - target).abs() < 0.2 * target,
                    "seed {seed}: variance {var} vs target {target}"
                );
                assert!(model.layer_b(spec).iter().all(|b| *b == 0.0));
            }
        }
    }

    #[test]
    fn parameter_count_formula() {
        let emb = FourierEmbedding::default_linear();
        let model = FieldModel::zeroed(emb, 256, 5).unwrap();
        assert_eq!(model.param_count(), 279_812);
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let model = small_model(18);
        let mut buf = Vec::new();
        model.save_checkpoint(&mut buf).unwrap();
        let loaded = FieldModel::load_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(model.params(), loaded.params());
        assert_eq!(model.embedding, loaded.embedding);
        let x = Vec3::new(0.4, 0.6, 0.1);
        assert_eq!(model.eval(&x), loaded.eval(&x));
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let model = small_model(19);
        let mut buf = Vec::new();
        model.save_checkpoint(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let bad = text.replace("musa-ckpt v1", "musa-ckpt v7");
        assert!(matches!(
            FieldModel::load_checkpoint(bad.as_bytes()),
            Err(Error::Parse(_))
        ));
        let truncated = &text[..text.len() / 2];
        assert!(FieldModel::load_checkpoint(truncated.as_bytes()).is_err());
    }
}
