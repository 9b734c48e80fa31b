use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" | "cifar" => Ok(DatasetKind::Cifar10),
            other => Err(Error::Config(format!("unknown dataset {other:?}"))),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The two model families compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    /// Encoder trunk, mean head and classifier; trained on cross-entropy only.
    #[serde(rename = "cnn_classif")]
    CnnClassif,
    /// Full Beta-VAE (encoder, both posterior heads, decoder) plus classifier.
    #[serde(rename = "beta_vae_classif")]
    BetaVaeClassif,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::CnnClassif => "cnn_classif",
            ModelKind::BetaVaeClassif => "beta_vae_classif",
        }
    }

    pub fn is_vae(self) -> bool {
        matches!(self, ModelKind::BetaVaeClassif)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" | "cnn_classif" => Ok(ModelKind::CnnClassif),
            "bvae" | "beta_vae_classif" => Ok(ModelKind::BetaVaeClassif),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Square-kernel convolution layer geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub const fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvLayer {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    fn conv_out(&self, size: usize) -> Option<usize> {
        let padded = size + 2 * self.padding;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }

    fn deconv_out(&self, size: usize) -> Option<usize> {
        ((size - 1) * self.stride + self.kernel)
            .checked_sub(2 * self.padding)
            .filter(|&v| v > 0)
    }
}

/// One parameter tensor of an architecture, before initialization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub prunable: bool,
}

/// Convolutional encoder / deconvolutional decoder / MLP classifier topology.
///
/// The encoder is `convs → flatten → fc(hidden) → {mu, logvar}(latent)`, all
/// ReLU except the posterior heads. The decoder is `fc(seed) → reshape →
/// deconvs`, ReLU between layers and a sigmoid on the final logits. The
/// classifier is `fc1(classifier_hidden) → ReLU → fc2(classes)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub dataset: DatasetKind,
    /// `[channels, height, width]` of one input image.
    pub input: [usize; 3],
    pub encoder_convs: Vec<ConvLayer>,
    pub hidden: usize,
    pub latent: usize,
    /// Shape the decoder's dense layer is reshaped to before the deconvolutions.
    pub decoder_seed: [usize; 3],
    pub decoder_deconvs: Vec<ConvLayer>,
    pub classifier_hidden: usize,
    pub classes: usize,
    /// Declared parameter total; every model kind must land within ±15%.
    pub target_params: usize,
}

impl ArchSpec {
    /// 1×28×28 input, conv 8/16, hidden 80, latent 16; 66 218 parameters as
    /// a CNN classifier and 75 339 as a Beta-VAE classifier.
    pub fn mnist() -> Self {
        ArchSpec {
            dataset: DatasetKind::Mnist,
            input: [1, 28, 28],
            encoder_convs: vec![ConvLayer::new(1, 8, 3, 2, 1), ConvLayer::new(8, 16, 3, 2, 1)],
            hidden: 80,
            latent: 16,
            decoder_seed: [8, 7, 7],
            decoder_deconvs: vec![ConvLayer::new(8, 8, 4, 2, 1), ConvLayer::new(8, 1, 4, 2, 1)],
            classifier_hidden: 32,
            classes: 10,
            target_params: 69_000,
        }
    }

    /// 3×32×32 input, conv 32/64/128, hidden 300, latent 64; about 2.57M
    /// parameters as a CNN classifier and 2.89M as a Beta-VAE classifier.
    pub fn cifar10() -> Self {
        ArchSpec {
            dataset: DatasetKind::Cifar10,
            input: [3, 32, 32],
            encoder_convs: vec![
                ConvLayer::new(3, 32, 3, 2, 1),
                ConvLayer::new(32, 64, 3, 2, 1),
                ConvLayer::new(64, 128, 3, 1, 1),
            ],
            hidden: 300,
            latent: 64,
            decoder_seed: [64, 8, 8],
            decoder_deconvs: vec![ConvLayer::new(64, 32, 4, 2, 1), ConvLayer::new(32, 3, 4, 2, 1)],
            classifier_hidden: 32,
            classes: 10,
            target_params: 2_900_000,
        }
    }

    pub fn for_dataset(dataset: DatasetKind) -> Self {
        match dataset {
            DatasetKind::Mnist => Self::mnist(),
            DatasetKind::Cifar10 => Self::cifar10(),
        }
    }

    pub fn with_latent(mut self, latent: usize) -> Self {
        self.latent = latent;
        self
    }

    pub fn image_len(&self) -> usize {
        self.input.iter().product()
    }

    /// `[channels, h, w]` after the encoder convolutions.
    pub fn encoder_output(&self) -> Result<[usize; 3]> {
        let [mut c, mut h, mut w] = self.input;
        for (i, layer) in self.encoder_convs.iter().enumerate() {
            if layer.in_channels != c || layer.stride == 0 {
                return Err(Error::Config(format!("encoder conv {i} expects {} channels, got {c}", layer.in_channels)));
            }
            h = layer
                .conv_out(h)
                .ok_or_else(|| Error::Config(format!("encoder conv {i} collapses height {h}")))?;
            w = layer
                .conv_out(w)
                .ok_or_else(|| Error::Config(format!("encoder conv {i} collapses width {w}")))?;
            c = layer.out_channels;
        }
        Ok([c, h, w])
    }

    pub fn encoder_flat(&self) -> Result<usize> {
        Ok(self.encoder_output()?.iter().product())
    }

    /// Checks that the decoder reproduces the input shape.
    pub fn validate(&self) -> Result<()> {
        self.encoder_output()?;
        let [mut c, mut h, mut w] = self.decoder_seed;
        for (i, layer) in self.decoder_deconvs.iter().enumerate() {
            if layer.in_channels != c || layer.stride == 0 {
                return Err(Error::Config(format!("decoder deconv {i} expects {} channels, got {c}", layer.in_channels)));
            }
            h = layer.deconv_out(h).ok_or_else(|| Error::Config(format!("decoder deconv {i} is empty")))?;
            w = layer.deconv_out(w).ok_or_else(|| Error::Config(format!("decoder deconv {i} is empty")))?;
            c = layer.out_channels;
        }
        if [c, h, w] != self.input {
            return Err(Error::Config(format!(
                "decoder produces {:?}, input is {:?}",
                [c, h, w],
                self.input
            )));
        }
        if self.latent == 0 || self.hidden == 0 || self.classifier_hidden == 0 || self.classes < 2 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Ordered parameter list for `kind`. Kernels are prunable, biases are not.
    pub fn param_layout(&self, kind: ModelKind) -> Result<Vec<ParamSpec>> {
        self.validate()?;
        let mut out = Vec::new();
        let dense = |out: &mut Vec<ParamSpec>, name: &str, d: usize, k: usize| {
            out.push(ParamSpec {
                name: format!("{name}.kernel"),
                shape: vec![d, k],
                fan_in: d,
                prunable: true,
            });
            out.push(ParamSpec {
                name: format!("{name}.bias"),
                shape: vec![k],
                fan_in: d,
                prunable: false,
            });
        };
        for (i, l) in self.encoder_convs.iter().enumerate() {
            let fan_in = l.in_channels * l.kernel * l.kernel;
            out.push(ParamSpec {
                name: format!("encoder.conv{}.kernel", i + 1),
                shape: vec![l.out_channels, l.in_channels, l.kernel, l.kernel],
                fan_in,
                prunable: true,
            });
            out.push(ParamSpec {
                name: format!("encoder.conv{}.bias", i + 1),
                shape: vec![l.out_channels],
                fan_in,
                prunable: false,
            });
        }
        dense(&mut out, "encoder.fc", self.encoder_flat()?, self.hidden);
        dense(&mut out, "encoder.mu", self.hidden, self.latent);
        if kind.is_vae() {
            dense(&mut out, "encoder.logvar", self.hidden, self.latent);
            dense(&mut out, "decoder.fc", self.latent, self.decoder_seed.iter().product());
            for (i, l) in self.decoder_deconvs.iter().enumerate() {
                let fan_in = l.in_channels * l.kernel * l.kernel;
                out.push(ParamSpec {
                    name: format!("decoder.deconv{}.kernel", i + 1),
                    shape: vec![l.in_channels, l.out_channels, l.kernel, l.kernel],
                    fan_in,
                    prunable: true,
                });
                out.push(ParamSpec {
                    name: format!("decoder.deconv{}.bias", i + 1),
                    shape: vec![l.out_channels],
                    fan_in,
                    prunable: false,
                });
            }
        }
        dense(&mut out, "classifier.fc1", self.latent, self.classifier_hidden);
        dense(&mut out, "classifier.fc2", self.classifier_hidden, self.classes);
        Ok(out)
    }

    pub fn param_count(&self, kind: ModelKind) -> Result<usize> {
        Ok(self
            .param_layout(kind)?
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum())
    }

    /// Whether `count` is within ±15% of [`ArchSpec::target_params`].
    pub fn within_target(&self, count: usize) -> bool {
        let t = self.target_params as f64;
        let c = count as f64;
        c >= 0.85 * t && c <= 1.15 * t
    }
}
