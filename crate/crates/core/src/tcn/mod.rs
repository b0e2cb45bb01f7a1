//! A small temporal convolutional network with hand-written backprop.
//!
//! Every level is a residual block of two causal dilated convolutions
//! (dilation `2^level`), each followed by ReLU and inverted dropout, with a
//! 1x1 convolution on the skip path when channel counts differ. A linear
//! head reads the last time step of the final block. Weight normalization
//! is not used.
//!
//! All parameters live in one flat vector; [`Layout`] records where each
//! tensor sits. Convolution weights are stored `out x in x kernel`.

mod conv;
mod train;

use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub use conv::causal_conv;
pub use train::{compute_gradients, train, Gradients, TrainReport};

pub const DEFAULT_WINDOW: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcnConfig {
    pub kernel_size: usize,
    pub hidden_sizes: Vec<usize>,
    pub num_levels: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Input steps per sample.
    pub window: usize,
}

impl Default for TcnConfig {
    fn default() -> Self {
        TcnConfig {
            kernel_size: 2,
            hidden_sizes: vec![64, 128],
            num_levels: 2,
            dropout: 0.0,
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 16,
            seed: 0,
            window: DEFAULT_WINDOW,
        }
    }
}

impl TcnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.kernel_size < 2 {
            return bad("tcn.kernel_size must be at least 2");
        }
        if self.num_levels < 1 || self.hidden_sizes.len() != self.num_levels {
            return bad("tcn.hidden_sizes must list one size per level (num_levels >= 1)");
        }
        if self.hidden_sizes.contains(&0) {
            return bad("tcn.hidden_sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("tcn.dropout must be in [0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("tcn.learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("tcn.batch_size must be positive");
        }
        if self.window == 0 {
            return bad("tcn.window must be positive");
        }
        Ok(())
    }

    /// `1 + sum_l 2 (k - 1) 2^l`.
    pub fn receptive_field(&self) -> usize {
        1 + (0..self.num_levels)
            .map(|l| 2 * (self.kernel_size - 1) * (1 << l))
            .sum::<usize>()
    }
}

/// Offsets of one residual block's tensors in the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelLayout {
    pub in_channels: usize,
    pub out_channels: usize,
    pub dilation: usize,
    pub conv1_weight: Range<usize>,
    pub conv1_bias: Range<usize>,
    pub conv2_weight: Range<usize>,
    pub conv2_bias: Range<usize>,
    pub downsample: Option<(Range<usize>, Range<usize>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub levels: Vec<LevelLayout>,
    pub head_weight: Range<usize>,
    pub head_bias: Range<usize>,
    pub len: usize,
}

impl Layout {
    pub fn new(config: &TcnConfig, input_channels: usize) -> Self {
        let mut cursor = 0;
        let mut take = |n: usize| {
            let r = cursor..cursor + n;
            cursor += n;
            r
        };
        let k = config.kernel_size;
        let mut levels = Vec::with_capacity(config.num_levels);
        let mut in_ch = input_channels;
        for (l, &out_ch) in config.hidden_sizes.iter().enumerate() {
            let conv1_weight = take(out_ch * in_ch * k);
            let conv1_bias = take(out_ch);
            let conv2_weight = take(out_ch * out_ch * k);
            let conv2_bias = take(out_ch);
            let downsample = (in_ch != out_ch).then(|| (take(out_ch * in_ch), take(out_ch)));
            levels.push(LevelLayout {
                in_channels: in_ch,
                out_channels: out_ch,
                dilation: 1 << l,
                conv1_weight,
                conv1_bias,
                conv2_weight,
                conv2_bias,
                downsample,
            });
            in_ch = out_ch;
        }
        let head_weight = take(in_ch);
        let head_bias = take(1);
        Layout {
            levels,
            head_weight,
            head_bias,
            len: cursor,
        }
    }
}

/// Borrowed view of one level's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LevelParams<'a> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    pub conv1_weight: &'a [f64],
    pub conv1_bias: &'a [f64],
    pub conv2_weight: &'a [f64],
    pub conv2_bias: &'a [f64],
    pub downsample: Option<(&'a [f64], &'a [f64])>,
}

/// Inverted-dropout multipliers for the two stages of one block, each
/// `steps x out_channels`.
#[derive(Debug, Clone)]
pub struct DropoutMasks {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TcnModel {
    config: TcnConfig,
    input_channels: usize,
    layout: Layout,
    params: Vec<f64>,
}

impl PartialEq for TcnModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.input_channels == other.input_channels
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl TcnModel {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn new(config: TcnConfig, input_channels: usize) -> Result<Self> {
        config.validate()?;
        if input_channels == 0 {
            return Err(Error::InvalidParameter("input_channels must be positive".into()));
        }
        let layout = Layout::new(&config, input_channels);
        let mut params = vec![0.0; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let k = config.kernel_size;
        let mut fill = |range: &Range<usize>, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[range.clone()] {
                *p = rng.random_range(-bound..bound);
            }
        };
        for lvl in &layout.levels {
            fill(&lvl.conv1_weight, lvl.in_channels * k);
            fill(&lvl.conv2_weight, lvl.out_channels * k);
            if let Some((w, _)) = &lvl.downsample {
                fill(w, lvl.in_channels);
            }
        }
        let last = layout.levels.last().map_or(input_channels, |l| l.out_channels);
        fill(&layout.head_weight.clone(), last);
        Ok(TcnModel {
            config,
            input_channels,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &TcnConfig {
        &self.config
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn level(&self, l: usize) -> LevelParams<'_> {
        let lvl = &self.layout.levels[l];
        let p = &self.params;
        LevelParams {
            in_channels: lvl.in_channels,
            out_channels: lvl.out_channels,
            kernel_size: self.config.kernel_size,
            dilation: lvl.dilation,
            conv1_weight: &p[lvl.conv1_weight.clone()],
            conv1_bias: &p[lvl.conv1_bias.clone()],
            conv2_weight: &p[lvl.conv2_weight.clone()],
            conv2_bias: &p[lvl.conv2_bias.clone()],
            downsample: lvl
                .downsample
                .as_ref()
                .map(|(w, b)| (&p[w.clone()], &p[b.clone()])),
        }
    }

    fn check_window(&self, window: &Matrix) -> Result<()> {
        if window.rows() != self.config.window || window.cols() != self.input_channels {
            return Err(Error::ShapeMismatch(format!(
                "window is {}x{}, model expects {}x{}",
                window.rows(),
                window.cols(),
                self.config.window,
                self.input_channels
            )));
        }
        Ok(())
    }

    /// Prediction in evaluation mode (no dropout).
    pub fn forward(&self, window: &Matrix) -> Result<f64> {
        self.check_window(window)?;
        Ok(conv::forward_cached(self, window, None).0)
    }

    pub fn predict(&self, windows: &[Matrix]) -> Result<Vec<f64>> {
        windows.iter().map(|w| self.forward(w)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = self.to_json()?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            input_channels: self.input_channels,
            params: self.params.clone(),
        };
        if !self.params.iter().all(|p| p.is_finite()) {
            return Err(Error::Checkpoint("parameters are not finite".into()));
        }
        Ok(serde_json::to_string(&ckpt)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let mut model = TcnModel::new(ckpt.config, ckpt.input_channels)?;
        if ckpt.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters, layout needs {}",
                ckpt.params.len(),
                model.params.len()
            )));
        }
        model.params = ckpt.params;
        Ok(model)
    }
}

const CHECKPOINT_FORMAT: &str = "blcast-tcn";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: TcnConfig,
    input_channels: usize,
    params: Vec<f64>,
}

/// One residual block in evaluation mode, or with the given dropout masks.
pub fn residual_block(input: &Matrix, level: &LevelParams<'_>, masks: Option<&DropoutMasks>) -> Result<Matrix> {
    if input.cols() != level.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "block expects {} channels, got {}",
            level.in_channels,
            input.cols()
        )));
    }
    if level.in_channels != level.out_channels && level.downsample.is_none() {
        return Err(Error::ShapeMismatch("channel change without 1x1 convolution".into()));
    }
    let steps = input.rows();
    if let Some(m) = masks {
        let n = steps * level.out_channels;
        if m.first.len() != n || m.second.len() != n {
            return Err(Error::ShapeMismatch("dropout mask size".into()));
        }
    }
    let cache = conv::block_forward(input.as_slice(), steps, level, masks);
    Matrix::from_vec(steps, level.out_channels, cache.output)
}

/// Supervised samples: each input is `window x channels` and its target
/// is the first channel one step after the window.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WindowDataset {
    pub inputs: Vec<Matrix>,
    pub targets: Vec<f64>,
    pub window: usize,
}

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Windows whose label index falls in `labels`. Channel 0 supplies the
/// label; windows may start before `labels.start`.
pub fn make_windows_for_labels(channels: &[&[f64]], window: usize, labels: Range<usize>) -> Result<WindowDataset> {
    let n = channels.first().map_or(0, |c| c.len());
    if channels.iter().any(|c| c.len() != n) {
        return Err(Error::ShapeMismatch("channels differ in length".into()));
    }
    if window == 0 || n <= window {
        return Err(Error::TooShort {
            needed: window + 1,
            got: n,
        });
    }
    let start = labels.start.max(window);
    let end = labels.end.min(n);
    let c = channels.len();
    let mut ds = WindowDataset {
        window,
        ..Default::default()
    };
    for t in start..end {
        let mut data = Vec::with_capacity(window * c);
        for s in t - window..t {
            data.extend(channels.iter().map(|ch| ch[s]));
        }
        ds.inputs.push(Matrix::from_vec(window, c, data)?);
        ds.targets.push(channels[0][t]);
    }
    Ok(ds)
}

pub fn make_windows(channels: &[&[f64]], window: usize) -> Result<WindowDataset> {
    let n = channels.first().map_or(0, |c| c.len());
    make_windows_for_labels(channels, window, 0..n)
}
