//! Embedding-space denoisers: a plain denoising autoencoder and the deep
//! stacked variant whose later blocks see both the previous estimate and
//! the residual between the noisy input and that estimate.

use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, EmbeddingPair, PairBatch};
use crate::error::{shape_err, Error, Result};
use crate::nnet::{
    self, init_network_with, mse, mse_grad, Activation, DenseLayer, Gradients, LayerSpec, Network,
    TrainConfig, TrainHistory, Trainable,
};
use crate::rng;
use crate::tensor::{Matrix, Vector};

pub const DEFAULT_DIM: usize = 512;
pub const DEFAULT_HIDDEN: usize = 1024;
pub const DEFAULT_BLOCKS: usize = 2;

/// Slot order of the input to every block after the first.
pub const CONCAT_ORDER: [&str; 2] = ["previous_output", "residual"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Dae,
    Stacked,
}

impl Architecture {
    pub fn tag(self) -> &'static str {
        match self {
            Architecture::Dae => "dae",
            Architecture::Stacked => "stacked",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dae" => Ok(Architecture::Dae),
            "stacked" => Ok(Architecture::Stacked),
            other => Err(Error::Format(format!("unknown architecture `{other}`"))),
        }
    }
}

/// `dim → hidden (tanh) → dim (linear)`.
pub fn build_dae(dim: usize, hidden: usize, seed: u64) -> Result<Network> {
    init_network_with(&dae_layout(dim, hidden), &mut rng::seeded(seed))
}

fn dae_layout(dim: usize, hidden: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::new(dim, hidden, Activation::Tanh),
        LayerSpec::new(hidden, dim, Activation::Linear),
    ]
}

fn refinement_layout(dim: usize, hidden: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::new(2 * dim, hidden, Activation::Tanh),
        LayerSpec::new(hidden, hidden, Activation::Tanh),
        LayerSpec::new(hidden, dim, Activation::Linear),
    ]
}

/// Deep stacked denoising autoencoder.
///
/// Block 0 maps the noisy input `y` to a first estimate `x₀`. Every later
/// block `i` receives `[xᵢ₋₁ ; y − xᵢ₋₁]` and produces `xᵢ`. All blocks are
/// trained jointly through the shared loss on the last output.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedDaeModel {
    blocks: Vec<Network>,
    dim: usize,
}

/// Outputs of every block and the residuals fed forward.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedIntermediates {
    /// `x` estimate after each block.
    pub outputs: Vec<Vector>,
    /// `y − x_prev` as seen by blocks 1.., in order.
    pub residuals: Vec<Vector>,
}

impl StackedIntermediates {
    pub fn x1(&self) -> &Vector {
        &self.outputs[0]
    }

    pub fn z(&self) -> &Vector {
        &self.residuals[0]
    }
}

/// Two blocks: `(dim→hidden tanh, hidden→dim linear)` then
/// `(2·dim→hidden tanh, hidden→hidden tanh, hidden→dim linear)`.
pub fn build_stacked(dim: usize, hidden: usize, seed: u64) -> Result<StackedDaeModel> {
    build_stacked_blocks(dim, hidden, DEFAULT_BLOCKS, seed)
}

pub fn build_stacked_blocks(
    dim: usize,
    hidden: usize,
    blocks: usize,
    seed: u64,
) -> Result<StackedDaeModel> {
    if dim == 0 || hidden == 0 {
        return shape_err("dim and hidden must be positive");
    }
    if blocks < 2 {
        return Err(Error::Config(format!(
            "a stacked model needs at least 2 blocks, got {blocks}"
        )));
    }
    let mut rng = rng::seeded(seed);
    let mut nets = vec![init_network_with(&dae_layout(dim, hidden), &mut rng)?];
    for _ in 1..blocks {
        let mut net = init_network_with(&refinement_layout(dim, hidden), &mut rng)?;
        init_passthrough(&mut net, dim);
        nets.push(net);
    }
    StackedDaeModel::new(nets)
}

/// Gain of the previous-output path through a fresh refinement block.
pub const PASSTHROUGH_GAIN: f64 = 0.1;
/// Factor applied to the random part of a fresh refinement block's weights.
pub const REFINEMENT_INIT_SCALE: f64 = 0.01;

/// Starts a refinement block close to copying `x_prev` to its output: the
/// first `min(dim, hidden)` coordinates run through both tanh layers in
/// their linear range (gain `PASSTHROUGH_GAIN`) and are scaled back up by
/// the output layer, on top of down-scaled random weights.
fn init_passthrough(net: &mut Network, dim: usize) {
    let gains = [PASSTHROUGH_GAIN, 1.0, 1.0 / PASSTHROUGH_GAIN];
    for (layer, gain) in net.layers_mut().iter_mut().zip(gains) {
        let cols = layer.weights.cols();
        let n = dim.min(layer.weights.rows()).min(cols);
        let w = layer.weights.as_mut_slice();
        w.iter_mut().for_each(|v| *v *= REFINEMENT_INIT_SCALE);
        for j in 0..n {
            w[j * cols + j] += gain;
        }
    }
}

impl StackedDaeModel {
    pub fn new(blocks: Vec<Network>) -> Result<Self> {
        let Some(first) = blocks.first() else {
            return shape_err("stacked model needs blocks");
        };
        let dim = first.in_dim();
        if first.out_dim() != dim {
            return shape_err(format!(
                "first block must map {dim} → {dim}, maps {} → {}",
                first.in_dim(),
                first.out_dim()
            ));
        }
        for (i, b) in blocks.iter().enumerate().skip(1) {
            if b.in_dim() != 2 * dim || b.out_dim() != dim {
                return shape_err(format!(
                    "block {i} must map {} → {dim}, maps {} → {}",
                    2 * dim,
                    b.in_dim(),
                    b.out_dim()
                ));
            }
        }
        Ok(StackedDaeModel { blocks, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[Network] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Network] {
        &mut self.blocks
    }

    pub fn block1(&self) -> &Network {
        &self.blocks[0]
    }

    pub fn block2(&self) -> &Network {
        &self.blocks[1]
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(Network::param_count).sum()
    }

    fn check_dim(&self, cols: usize) -> Result<()> {
        if cols != self.dim {
            return shape_err(format!(
                "stacked model expects dim {}, got {cols}",
                self.dim
            ));
        }
        Ok(())
    }

    /// Batched forward; returns every block's input, cache and output.
    fn forward_all(&self, y: &Matrix) -> Result<Vec<(Matrix, nnet::ForwardCache)>> {
        self.check_dim(y.cols())?;
        let mut passes = Vec::with_capacity(self.blocks.len());
        let (mut x, cache) = self.blocks[0].forward_batch(y)?;
        passes.push((x.clone(), cache));
        for block in &self.blocks[1..] {
            let input = concat_with_residual(&x, y);
            let (out, cache) = block.forward_batch(&input)?;
            passes.push((out.clone(), cache));
            x = out;
        }
        Ok(passes)
    }
}

/// Row-wise `[x ; y − x]`.
fn concat_with_residual(x: &Matrix, y: &Matrix) -> Matrix {
    let (n, d) = x.shape();
    let mut out = Matrix::zeros(n, 2 * d);
    for r in 0..n {
        let (xr, yr) = (x.row(r), y.row(r));
        let dst = out.row_mut(r);
        dst[..d].copy_from_slice(xr);
        for ((z, yi), xi) in dst[d..].iter_mut().zip(yr).zip(xr) {
            *z = yi - xi;
        }
    }
    out
}

/// Runs the stacked model on one noisy vector.
pub fn stacked_forward(
    model: &StackedDaeModel,
    y: &[f64],
) -> Result<(Vector, StackedIntermediates)> {
    let ym = Matrix::stack_rows(y.len(), [y])?;
    let passes = model.forward_all(&ym)?;
    let outputs: Vec<Vector> = passes
        .iter()
        .map(|(out, _)| Vector(out.as_slice().to_vec()))
        .collect();
    let residuals = outputs[..outputs.len() - 1]
        .iter()
        .map(|x| Vector(y.iter().zip(x.iter()).map(|(a, b)| a - b).collect()))
        .collect();
    let x_hat = outputs.last().expect("at least one block").clone();
    Ok((x_hat, StackedIntermediates { outputs, residuals }))
}

impl Trainable for StackedDaeModel {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        self.check_dim(inputs.cols())?;
        let mut x = self.blocks[0].predict(inputs)?;
        for block in &self.blocks[1..] {
            x = block.predict(&concat_with_residual(&x, inputs))?;
        }
        Ok(x)
    }

    fn loss_gradient(&self, inputs: &Matrix, targets: &Matrix) -> Result<(Gradients, f64)> {
        let passes = self.forward_all(inputs)?;
        let out = &passes.last().expect("at least one block").0;
        let loss = mse(out, targets)?;
        let mut grad = mse_grad(out, targets)?;
        let d = self.dim;
        let mut per_block: Vec<Gradients> = Vec::with_capacity(self.blocks.len());
        for (block, (_, cache)) in self.blocks.iter().zip(&passes).skip(1).rev() {
            let (g, g_in) = block.backward(cache, &grad)?;
            per_block.push(g);
            // x_prev enters through slot 1 directly and through slot 2 as −x_prev.
            let mut g_prev = Matrix::zeros(g_in.rows(), d);
            for r in 0..g_in.rows() {
                let src = g_in.row(r);
                for (j, v) in g_prev.row_mut(r).iter_mut().enumerate() {
                    *v = src[j] - src[d + j];
                }
            }
            grad = g_prev;
        }
        let (g0, _) = self.blocks[0].backward(&passes[0].1, &grad)?;
        per_block.push(g0);
        per_block.reverse();
        Ok((per_block.into_iter().flatten().collect(), loss))
    }

    fn dense_layers(&self) -> Vec<&DenseLayer> {
        self.blocks.iter().flat_map(|b| b.layers()).collect()
    }

    fn dense_layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.layers_mut().iter_mut())
            .collect()
    }
}

/// Affine normalization applied around the network: inputs and targets are
/// mapped to `(v − mean) / scale`, outputs mapped back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub mean: Vector,
    pub scale: f64,
}

impl InputScaling {
    pub fn identity(dim: usize) -> Self {
        InputScaling {
            mean: Vector::zeros(dim),
            scale: 1.0,
        }
    }

    /// Mean of the rows and RMS of the centered entries.
    pub fn fit(rows: &Matrix) -> Result<Self> {
        let (n, d) = rows.shape();
        if n == 0 {
            return Err(Error::EmptyInput("cannot fit scaling on no data".into()));
        }
        let mut mean = Vector::zeros(d);
        for r in rows.row_iter() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut ss = 0.0;
        for r in rows.row_iter() {
            ss += r
                .iter()
                .zip(mean.iter())
                .map(|(v, m)| (v - m) * (v - m))
                .sum::<f64>();
        }
        let rms = (ss / (n * d) as f64).sqrt();
        let scale = if rms > 0.0 && rms.is_finite() {
            rms
        } else {
            1.0
        };
        Ok(InputScaling { mean, scale })
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.mean.iter().all(|&m| m == 0.0)
    }

    pub fn forward(&self, m: &Matrix) -> Matrix {
        if self.is_identity() {
            return m.clone();
        }
        let mut out = m.clone();
        for r in 0..out.rows() {
            for (v, mu) in out.row_mut(r).iter_mut().zip(self.mean.iter()) {
                *v = (*v - mu) / self.scale;
            }
        }
        out
    }

    pub fn inverse(&self, m: &Matrix) -> Matrix {
        if self.is_identity() {
            return m.clone();
        }
        let mut out = m.clone();
        for r in 0..out.rows() {
            for (v, mu) in out.row_mut(r).iter_mut().zip(self.mean.iter()) {
                *v = *v * self.scale + mu;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DenoiserVariant {
    Plain(Network),
    Stacked(StackedDaeModel),
}

impl DenoiserVariant {
    pub fn architecture(&self) -> Architecture {
        match self {
            DenoiserVariant::Plain(_) => Architecture::Dae,
            DenoiserVariant::Stacked(_) => Architecture::Stacked,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DenoiserVariant::Plain(n) => n.in_dim(),
            DenoiserVariant::Stacked(s) => s.dim(),
        }
    }

    fn trainable(&self) -> &dyn Trainable {
        match self {
            DenoiserVariant::Plain(n) => n,
            DenoiserVariant::Stacked(s) => s,
        }
    }

    fn trainable_mut(&mut self) -> &mut dyn Trainable {
        match self {
            DenoiserVariant::Plain(n) => n,
            DenoiserVariant::Stacked(s) => s,
        }
    }
}

/// A trained denoiser ready to be applied before scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub variant: DenoiserVariant,
    pub scaling: InputScaling,
}

impl DenoiserModel {
    pub fn new(variant: DenoiserVariant, scaling: InputScaling) -> Result<Self> {
        let dim = variant.dim();
        if let DenoiserVariant::Plain(n) = &variant {
            if n.out_dim() != dim {
                return shape_err(format!(
                    "plain denoiser maps {} → {}; dims must match",
                    n.in_dim(),
                    n.out_dim()
                ));
            }
        }
        if scaling.mean.dim() != dim {
            return shape_err(format!(
                "scaling mean has dim {}, model dim {dim}",
                scaling.mean.dim()
            ));
        }
        Ok(DenoiserModel { variant, scaling })
    }

    pub fn dim(&self) -> usize {
        self.variant.dim()
    }

    pub fn architecture(&self) -> Architecture {
        self.variant.architecture()
    }

    /// Denoises one sample per row.
    pub fn apply(&self, noisy: &Matrix) -> Result<Matrix> {
        if noisy.cols() != self.dim() {
            return shape_err(format!(
                "denoiser expects dim {}, got {}",
                self.dim(),
                noisy.cols()
            ));
        }
        let out = self
            .variant
            .trainable()
            .predict(&self.scaling.forward(noisy))?;
        Ok(self.scaling.inverse(&out))
    }
}

/// Trains `variant` on noisy→clean pairs; input scaling is fitted on the
/// noisy training inputs and applied to inputs and targets alike.
pub fn train_denoiser(
    variant: DenoiserVariant,
    pairs: &[EmbeddingPair],
    dev_pairs: &[EmbeddingPair],
    config: &TrainConfig,
) -> Result<(DenoiserModel, TrainHistory)> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no training pairs".into()));
    }
    let dim = variant.dim();
    let train = PairBatch::from_pairs(pairs, dim)?;
    let scaling = InputScaling::fit(&train.inputs)?;
    train_denoiser_scaled(
        variant,
        scaling,
        &train,
        &PairBatch::from_pairs(dev_pairs, dim)?,
        config,
    )
}

/// As [`train_denoiser`] with a caller-chosen scaling.
pub fn train_denoiser_scaled(
    mut variant: DenoiserVariant,
    scaling: InputScaling,
    train: &PairBatch,
    dev: &PairBatch,
    config: &TrainConfig,
) -> Result<(DenoiserModel, TrainHistory)> {
    let scale = |b: &PairBatch| PairBatch {
        inputs: scaling.forward(&b.inputs),
        targets: scaling.forward(&b.targets),
    };
    let train_s = scale(train);
    let dev_s = scale(dev);
    log::info!(
        "training {} denoiser on {} pairs ({} dev)",
        variant.architecture().tag(),
        train.len(),
        dev.len()
    );
    let history = nnet::train_model(variant.trainable_mut(), &train_s, Some(&dev_s), config)?;
    Ok((DenoiserModel::new(variant, scaling)?, history))
}

const APPLY_CHUNK: usize = 4096;

/// Applies the denoiser to every embedding, preserving keys and order.
pub fn denoise(model: &DenoiserModel, embeddings: &[Embedding]) -> Result<Vec<Embedding>> {
    if let Some(bad) = embeddings.iter().find(|e| e.dim() != model.dim()) {
        return shape_err(format!(
            "embedding `{}` has dim {}, denoiser expects {}",
            bad.key,
            bad.dim(),
            model.dim()
        ));
    }
    let mut out = Vec::with_capacity(embeddings.len());
    for chunk in embeddings.chunks(APPLY_CHUNK) {
        let m = Matrix::stack_rows(model.dim(), chunk.iter().map(|e| &e.vector[..]))?;
        let d = model.apply(&m)?;
        out.extend(
            chunk
                .iter()
                .zip(d.row_iter())
                .map(|(e, r)| Embedding::new(e.key.clone(), r.to_vec())),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{init_network, Trainable};
    use crate::testutil::{max_fd_error, random_matrix};

    fn identity_linear(dim: usize) -> Network {
        Network::new(vec![DenseLayer::new(
            Matrix::identity(dim),
            Vector::zeros(dim),
            Activation::Linear,
        )
        .unwrap()])
        .unwrap()
    }

    #[test]
    fn dae_shapes() {
        let net = build_dae(DEFAULT_DIM, DEFAULT_HIDDEN, 0).unwrap();
        let specs = net.specs();
        assert_eq!(specs[0], LayerSpec::new(512, 1024, Activation::Tanh));
        assert_eq!(specs[1], LayerSpec::new(1024, 512, Activation::Linear));

        let small = build_dae(4, 8, 1).unwrap();
        assert_eq!(small.forward(&[0.1, 0.2, 0.3, 0.4]).unwrap().0.dim(), 4);
        assert_eq!(small, build_dae(4, 8, 1).unwrap());
    }

    #[test]
    fn stacked_shapes() {
        let m = build_stacked(DEFAULT_DIM, DEFAULT_HIDDEN, 0).unwrap();
        assert_eq!(m.block2().in_dim(), 1024);
        assert_eq!(m.block2().layers().len(), 3);
        assert_eq!(
            m.block2().specs()[1],
            LayerSpec::new(1024, 1024, Activation::Tanh)
        );
        let expected = (512 * 1024 + 1024 + 1024 * 512 + 512)
            + (1024 * 1024 + 1024 + 1024 * 1024 + 1024 + 1024 * 512 + 512);
        assert_eq!(m.param_count(), expected);

        let tiny = build_stacked(3, 5, 0).unwrap();
        assert_eq!(tiny.block2().in_dim(), 6);
        assert_eq!(build_stacked_blocks(3, 5, 4, 0).unwrap().blocks().len(), 4);
        assert!(build_stacked_blocks(3, 5, 1, 0).is_err());
    }

    #[test]
    fn identity_first_block_gives_zero_residual() {
        let block2 = init_network(&refinement_layout(3, 4), 5).unwrap();
        let model = StackedDaeModel::new(vec![identity_linear(3), block2.clone()]).unwrap();
        let y = [0.5, -1.0, 2.0];
        let (x_hat, inter) = stacked_forward(&model, &y).unwrap();
        assert_eq!(&inter.x1()[..], &y);
        assert!(inter.z().iter().all(|&v| v == 0.0));
        let direct = block2.forward(&[0.5, -1.0, 2.0, 0.0, 0.0, 0.0]).unwrap().0;
        assert_eq!(x_hat, direct);
    }

    #[test]
    fn zero_input_propagates() {
        let model = build_stacked(4, 6, 2).unwrap();
        let (x_hat, inter) = stacked_forward(&model, &[0.0; 4]).unwrap();
        assert!(inter.x1().iter().all(|&v| v == 0.0));
        assert!(inter.z().iter().all(|&v| v == 0.0));
        assert!(x_hat.iter().all(|&v| v == 0.0));
    }

    /// Composition oracle written with explicit loops, independent of the
    /// batched matrix path.
    fn layer_oracle(l: &DenseLayer, x: &[f64]) -> Vec<f64> {
        (0..l.out_dim())
            .map(|i| {
                let mut z = l.bias[i];
                for (j, xj) in x.iter().enumerate() {
                    z += l.weights[(i, j)] * xj;
                }
                match l.activation {
                    Activation::Linear => z,
                    Activation::Tanh => z.tanh(),
                }
            })
            .collect()
    }

    fn net_oracle(n: &Network, x: &[f64]) -> Vec<f64> {
        n.layers()
            .iter()
            .fold(x.to_vec(), |a, l| layer_oracle(l, &a))
    }

    #[test]
    fn stacked_forward_matches_composition_oracle() {
        let mut rng = rng::seeded(17);
        let mut model = build_stacked(3, 5, 3).unwrap();
        for b in model.blocks_mut() {
            for l in b.layers_mut() {
                for v in l.bias.iter_mut() {
                    *v = 0.2 * rng::normal(&mut rng);
                }
            }
        }
        for _ in 0..10 {
            let y: Vec<f64> = (0..3).map(|_| rng::normal(&mut rng)).collect();
            let x1 = net_oracle(model.block1(), &y);
            let z: Vec<f64> = y.iter().zip(&x1).map(|(a, b)| a - b).collect();
            let input: Vec<f64> = x1.iter().chain(&z).copied().collect();
            let want = net_oracle(model.block2(), &input);
            let (got, inter) = stacked_forward(&model, &y).unwrap();
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12);
            }
            for (g, w) in inter.z().iter().zip(&z) {
                assert!((g - w).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn residual_norm_equals_first_block_error() {
        let model = build_stacked(4, 6, 8).unwrap();
        let x = [0.3, -0.7, 1.1, 0.05];
        let (_, inter) = stacked_forward(&model, &x).unwrap();
        let recon = net_oracle(model.block1(), &x);
        let err: f64 = x
            .iter()
            .zip(&recon)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((inter.z().norm() - err).abs() < 1e-12);
    }

    #[test]
    fn stacked_gradient_matches_finite_differences() {
        let mut rng = rng::seeded(23);
        let mut model = build_stacked(3, 5, 4).unwrap();
        for b in model.blocks_mut() {
            for l in b.layers_mut() {
                for v in l.bias.iter_mut() {
                    *v = 0.2 * rng::normal(&mut rng);
                }
            }
        }
        let y = random_matrix(&mut rng, 5, 3, 1.0);
        let x = random_matrix(&mut rng, 5, 3, 1.0);
        assert!(max_fd_error(&model, &y, &x) <= 1e-4);

        let three = build_stacked_blocks(3, 4, 3, 9).unwrap();
        assert!(max_fd_error(&three, &y, &x) <= 1e-4);
    }

    #[test]
    fn residual_path_contributes_to_first_block_gradient() {
        // With the residual slot's weights zeroed, block1 gradients change.
        let mut rng = rng::seeded(2);
        let model = build_stacked(3, 5, 6).unwrap();
        let y = random_matrix(&mut rng, 4, 3, 1.0);
        let x = random_matrix(&mut rng, 4, 3, 1.0);
        let mut cut = model.clone();
        let w = &mut cut.blocks_mut()[1].layers_mut()[0].weights;
        for r in 0..w.rows() {
            for c in 3..6 {
                w[(r, c)] = 0.0;
            }
        }
        let (g_full, _) = model.loss_gradient(&y, &x).unwrap();
        let (g_cut, _) = cut.loss_gradient(&y, &x).unwrap();
        assert_ne!(g_full[0].d_weights, g_cut[0].d_weights);
    }

    fn pair_fixture(n: usize, dim: usize, noise: f64, seed: u64) -> Vec<EmbeddingPair> {
        let mut rng = rng::seeded(seed);
        (0..n)
            .map(|i| {
                let clean: Vec<f64> = (0..dim).map(|_| rng::normal(&mut rng)).collect();
                let noisy: Vec<f64> = clean
                    .iter()
                    .map(|c| c + noise * rng::normal(&mut rng))
                    .collect();
                EmbeddingPair::new(format!("u{i}"), noisy, clean).unwrap()
            })
            .collect()
    }

    #[test]
    fn plain_dae_learns_reconstruction() {
        let pairs = pair_fixture(300, 4, 0.0, 1);
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 16,
            seed: 1,
            ..TrainConfig::default()
        };
        let variant = DenoiserVariant::Plain(build_dae(4, 16, 3).unwrap());
        let (_, hist) = train_denoiser(variant, &pairs[..250], &pairs[250..], &cfg).unwrap();
        let first = hist.epochs[0].dev.unwrap();
        assert!(hist.final_dev.unwrap() < first);
    }

    #[test]
    fn zero_epochs_rejected() {
        let pairs = pair_fixture(10, 3, 0.1, 1);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let variant = DenoiserVariant::Stacked(build_stacked(3, 4, 0).unwrap());
        assert!(matches!(
            train_denoiser(variant, &pairs, &[], &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn joint_training_moves_first_block() {
        let pairs = pair_fixture(64, 3, 0.3, 4);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let init = build_stacked(3, 6, 5).unwrap();
        let (model, _) =
            train_denoiser(DenoiserVariant::Stacked(init.clone()), &pairs, &[], &cfg).unwrap();
        let DenoiserVariant::Stacked(trained) = &model.variant else {
            panic!("variant changed");
        };
        assert_ne!(trained.block1(), init.block1());
        assert_ne!(trained.block2(), init.block2());
    }

    #[test]
    fn denoise_fixtures() {
        let id = DenoiserModel::new(
            DenoiserVariant::Plain(identity_linear(3)),
            InputScaling::identity(3),
        )
        .unwrap();
        assert!(denoise(&id, &[]).unwrap().is_empty());
        let set = vec![
            Embedding::new("b", vec![1.0, 2.0, 3.0]),
            Embedding::new("a", vec![-0.5, 0.0, 7.25]),
        ];
        assert_eq!(denoise(&id, &set).unwrap(), set);

        let bad = vec![set[0].clone(), Embedding::new("short", vec![1.0])];
        let err = denoise(&id, &bad).unwrap_err();
        assert!(err.to_string().contains("short"));
    }

    #[test]
    fn denoise_is_pure() {
        let pairs = pair_fixture(32, 4, 0.2, 8);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let (model, _) = train_denoiser(
            DenoiserVariant::Stacked(build_stacked(4, 6, 1).unwrap()),
            &pairs,
            &[],
            &cfg,
        )
        .unwrap();
        let set: Vec<Embedding> = pairs
            .iter()
            .map(|p| Embedding::new(p.key.clone(), p.noisy.clone()))
            .collect();
        let a = denoise(&model, &set).unwrap();
        let b = denoise(&model, &set).unwrap();
        let bits = |v: &[Embedding]| {
            v.iter()
                .flat_map(|e| e.vector.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
        assert!(a.iter().zip(&set).all(|(x, y)| x.key == y.key));
    }

    #[test]
    fn scaling_round_trip() {
        let mut rng = rng::seeded(3);
        let m = random_matrix(&mut rng, 20, 5, 3.0);
        let s = InputScaling::fit(&m).unwrap();
        let normed = s.forward(&m);
        let mean: f64 = normed.as_slice().iter().sum::<f64>() / 100.0;
        assert!(mean.abs() < 1e-12);
        let back = s.inverse(&normed);
        assert!(back.sub(&m).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn model_rejects_inconsistent_dims() {
        let err = DenoiserModel::new(
            DenoiserVariant::Plain(build_dae(3, 4, 0).unwrap()),
            InputScaling::identity(4),
        );
        assert!(matches!(err, Err(Error::Shape(_))));
        let block2 = init_network(&refinement_layout(4, 4), 0).unwrap();
        assert!(StackedDaeModel::new(vec![identity_linear(3), block2]).is_err());
    }

    #[test]
    fn stacked_dim_mismatch() {
        let m = build_stacked(3, 4, 0).unwrap();
        assert!(matches!(
            stacked_forward(&m, &[1.0, 2.0]),
            Err(Error::Shape(_))
        ));
        assert_eq!(m.input_dim(), 3);
    }

    #[test]
    fn fresh_refinement_block_roughly_copies_previous_output() {
        let m = build_stacked(8, 16, 3).unwrap();
        let mut r = rng::seeded(1);
        let y: Vec<f64> = (0..8).map(|_| rng::normal(&mut r)).collect();
        let (out, mids) = stacked_forward(&m, &y).unwrap();
        let x1 = mids.x1();
        let err = out
            .iter()
            .zip(x1.iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err < 0.5 * x1.norm(), "err {err} vs |x1| {}", x1.norm());
    }
}
