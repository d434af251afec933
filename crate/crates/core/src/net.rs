//! The row-scoring network: a per-row CNN feature extractor, per-problem
//! feature centering on the two context rows, dropout, and a linear head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::problem::{matrixize, matrixize_columns, ProblemView, RowMatrix, CONTEXT_ROWS, ROWS};
use crate::synth::Raster;
use crate::tensor::{Float, Graph, Result, Tensor, TensorError, Var};

/// Width of the per-row feature vector.
pub const FEATURE_DIM: usize = 64;
/// Channels of the three conv layers.
const CHANNELS: [usize; 4] = [3, 16, 32, 64];
const KERNEL: usize = 3;

/// Architecture switches that change the forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub dropout: Float,
    /// Subtract the context-row centroid from every row feature.
    pub decentralize: bool,
    /// Add column-matrixed logits to row-matrixed logits.
    pub fuse_columns: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { dropout: 0.5, decentralize: true, fuse_columns: false }
    }
}

/// Learnable tensors, in checkpoint order.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub tensors: Vec<Tensor>,
}

pub const PARAM_NAMES: [&str; 8] = [
    "extractor.conv1.weight",
    "extractor.conv1.bias",
    "extractor.conv2.weight",
    "extractor.conv2.bias",
    "extractor.conv3.weight",
    "extractor.conv3.bias",
    "head.weight",
    "head.bias",
];

pub fn param_shapes() -> Vec<Vec<usize>> {
    let mut shapes = Vec::new();
    for l in 0..3 {
        shapes.push(vec![CHANNELS[l + 1], CHANNELS[l], KERNEL, KERNEL]);
        shapes.push(vec![CHANNELS[l + 1]]);
    }
    shapes.push(vec![FEATURE_DIM, 1]);
    shapes.push(vec![1]);
    shapes
}

#[derive(Clone, Debug, PartialEq)]
pub struct NcdModel {
    pub params: Parameters,
    pub config: ModelConfig,
}

/// Parameters bound into one graph.
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub vars: [Var; 8],
}

impl ParamVars {
    fn conv(&self, layer: usize) -> (Var, Var) {
        (self.vars[2 * layer], self.vars[2 * layer + 1])
    }

    pub fn head(&self) -> (Var, Var) {
        (self.vars[6], self.vars[7])
    }
}

impl NcdModel {
    /// He-uniform conv kernels, small uniform head weights, zero biases.
    pub fn init(seed: u64, config: ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = param_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let n: usize = shape.iter().product();
                let bound = match i {
                    0 | 2 | 4 => (6.0 / (shape[1] * KERNEL * KERNEL) as f64).sqrt(),
                    6 => 1.0 / (FEATURE_DIM as f64).sqrt(),
                    _ => 0.0,
                };
                let data = (0..n).map(|_| if bound == 0.0 { 0.0 } else { rng.gen_range(-bound..bound) as Float }).collect();
                Tensor::new(shape, data).expect("parameter shapes are consistent")
            })
            .collect();
        Self { params: Parameters { tensors }, config }
    }

    /// Insert the parameters into a graph as leaves.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        let vars: Vec<Var> = self.params.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect();
        ParamVars { vars: vars.try_into().expect("eight parameter tensors") }
    }

    pub fn head_weight(&self) -> &Tensor {
        &self.params.tensors[6]
    }

    pub fn head_bias(&self) -> Float {
        self.params.tensors[7].data()[0]
    }

    /// Row images `[M,3,H,W]` → features `[M,D]`.
    pub fn extract(&self, g: &mut Graph, p: &ParamVars, images: Var) -> Result<Var> {
        let mut x = images;
        for layer in 0..3 {
            let (k, b) = p.conv(layer);
            x = g.conv2d(x, k, b, 1, 0)?;
            x = g.relu(x)?;
            x = if layer < 2 { g.avg_pool2(x)? } else { g.global_avg_pool(x)? };
        }
        Ok(x)
    }

    /// Features of unique rows → logits `[I,10]` for the given instances.
    ///
    /// `masks`, when given, is a `[I·10, D]` dropout mask applied to the
    /// (centered) features before the head.
    pub fn score_instances(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        features: Var,
        instances: &[[usize; ROWS]],
        masks: Option<&Tensor>,
    ) -> Result<Var> {
        let order: Vec<usize> = instances.iter().flatten().copied().collect();
        let mut x = g.gather(features, &order)?;
        if self.config.decentralize {
            x = g.center_on_anchors(x, ROWS, CONTEXT_ROWS)?;
        }
        if let Some(mask) = masks {
            x = g.dropout_with_mask(x, mask)?;
        }
        let (w, b) = p.head();
        let logits = g.affine(x, w, b)?;
        g.reshape(logits, &[instances.len(), ROWS])
    }
}

/// Normalized pixel: background 0, darkest ink near 1.
#[inline]
fn ink(p: u8) -> Float {
    Float::from(255 - p) / 255.0
}

/// Accumulates three-panel row images for one extraction pass.
#[derive(Clone, Debug)]
pub struct RowBank {
    side: usize,
    data: Vec<Float>,
    count: usize,
}

impl RowBank {
    pub fn new(panel_size: u16) -> Self {
        Self { side: usize::from(panel_size), data: Vec::new(), count: 0 }
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Append one row (panels stacked as channels); returns its index.
    pub fn push(&mut self, row: [&Raster; 3]) -> Result<usize> {
        for panel in row {
            if usize::from(panel.size) != self.side || panel.pixels.len() != self.side * self.side {
                return Err(TensorError::Shape {
                    op: "row_bank",
                    detail: format!("panel of size {} in a bank of size {}", panel.size, self.side),
                });
            }
            self.data.extend(panel.pixels.iter().map(|&p| ink(p)));
        }
        self.count += 1;
        Ok(self.count - 1)
    }

    /// Append all ten rows of a matrixed problem.
    pub fn push_matrix(&mut self, panels: &[&Raster], matrix: &RowMatrix) -> Result<[usize; ROWS]> {
        let mut ids = [0; ROWS];
        for (id, row) in ids.iter_mut().zip(&matrix.rows) {
            *id = self.push([panels[row[0]], panels[row[1]], panels[row[2]]])?;
        }
        Ok(ids)
    }

    pub fn into_tensor(self) -> Result<Tensor> {
        Tensor::new(vec![self.count, 3, self.side, self.side], self.data)
    }
}

/// Raw, centroid, and centered features of the ten rows of one problem.
#[derive(Clone, Debug, PartialEq)]
pub struct RowFeatures {
    pub raw: Tensor,
    pub centered: Tensor,
    pub centroid: Vec<Float>,
}

/// Features of ten row images `[10,3,H,W]` → `[10,D]`.
pub fn extract_features(model: &NcdModel, rows: &Tensor) -> Result<Tensor> {
    if rows.shape().len() != 4 || rows.shape()[1] != 3 {
        return Err(TensorError::Shape { op: "extract_features", detail: format!("expected [R,3,H,W], got {:?}", rows.shape()) });
    }
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let x = g.constant(rows.clone());
    let f = model.extract(&mut g, &p, x)?;
    Ok(g.value(f).clone())
}

/// Subtract the mean of rows 1–2 from all ten rows.
pub fn decentralize(raw: &Tensor) -> Result<RowFeatures> {
    if raw.shape().len() != 2 || raw.shape()[0] != ROWS {
        return Err(TensorError::Shape { op: "decentralize", detail: format!("expected [10,D], got {:?}", raw.shape()) });
    }
    let mut g = Graph::new();
    let x = g.constant(raw.clone());
    let c = g.center_on_anchors(x, ROWS, CONTEXT_ROWS)?;
    let centered = g.value(c).clone();
    let d = raw.shape()[1];
    let centroid = (0..d).map(|i| (raw.data()[i] + raw.data()[d + i]) * 0.5).collect();
    Ok(RowFeatures { raw: raw.clone(), centered, centroid })
}

/// Ten logits `w·g + b`, with dropout on the features when training.
/// Uses raw features when the model does not decentralize.
pub fn score_rows<R: Rng + ?Sized>(model: &NcdModel, features: &RowFeatures, rng: &mut R, training: bool) -> Result<[Float; ROWS]> {
    let src = if model.config.decentralize { &features.centered } else { &features.raw };
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let x = g.constant(src.clone());
    let x = g.dropout(x, model.config.dropout, rng, training)?;
    let (w, b) = p.head();
    let logits = g.affine(x, w, b)?;
    let mut out = [0.0; ROWS];
    out.copy_from_slice(g.value(logits).data());
    Ok(out)
}

/// Inference logits for many problems; dropout off. Adds column-matrixed
/// logits when the model fuses columns.
pub fn batch_logits(model: &NcdModel, problems: &[ProblemView<'_>]) -> crate::Result<Vec<[Float; ROWS]>> {
    let Some(first) = problems.first() else { return Ok(Vec::new()) };
    let size = first.panels().first().map_or(0, |p| p.size);
    let mut bank = RowBank::new(size);
    let mut instances = Vec::with_capacity(problems.len() * 2);
    for view in problems {
        let panels = view.panel_refs();
        let rows = matrixize(view.problem_id(), panels.len())?;
        instances.push(bank.push_matrix(&panels, &rows)?);
        if model.config.fuse_columns {
            let cols = matrixize_columns(view.problem_id(), panels.len())?;
            instances.push(bank.push_matrix(&panels, &cols)?);
        }
    }
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let images = g.constant(bank.into_tensor()?);
    let feats = model.extract(&mut g, &p, images)?;
    let logits = model.score_instances(&mut g, &p, feats, &instances, None)?;
    let data = g.value(logits).data();
    let per = if model.config.fuse_columns { 2 } else { 1 };
    Ok((0..problems.len())
        .map(|i| {
            let mut out = [0.0; ROWS];
            for v in 0..per {
                let base = (i * per + v) * ROWS;
                for (o, l) in out.iter_mut().zip(&data[base..base + ROWS]) {
                    *o += l;
                }
            }
            out
        })
        .collect())
}

/// Logits of one problem; dropout off.
pub fn problem_logits(model: &NcdModel, problem: ProblemView<'_>) -> crate::Result<[Float; ROWS]> {
    Ok(batch_logits(model, &[problem])?[0])
}

/// Row-matrixed logits plus column-matrixed logits (row logits alone when
/// the model does not fuse columns).
pub fn fuse_row_column(model: &NcdModel, problem: ProblemView<'_>) -> crate::Result<[Float; ROWS]> {
    problem_logits(model, problem)
}
