use rand::Rng;

use crate::data::{FeatureVector, FEATURE_COUNT};
use crate::diffnet::{BnMode, LayerParams, Module, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const RESIDUAL_CHANNELS: usize = 8;
pub const RESIDUAL_COLS: usize = 22;

/// Two 1-D convolutions: `1×1×28 → 4×1×25 → 8×1×22`.
///
/// The first convolution is followed by LeakyReLU and batchnorm; the second
/// is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub conv1: LayerParams,
    pub bn1: LayerParams,
    pub conv2: LayerParams,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(prefix: &str, rng: &mut R) -> Self {
        let mut conv1 = LayerParams::conv1d(format!("{prefix}.conv1"), 1, 4, 4, 1);
        let bn1 = LayerParams::batchnorm(format!("{prefix}.bn1"), 4);
        let mut conv2 = LayerParams::conv1d(format!("{prefix}.conv2"), 4, 8, 4, 1);
        conv1.init_uniform(rng);
        conv2.init_uniform(rng);
        Encoder { conv1, bn1, conv2 }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mode: BnMode, slope: f64) -> Result<Var> {
        expect_item(tape, x, &[1, 1, FEATURE_COUNT], "encoder input")?;
        let h = tape.layer(x, &self.conv1)?;
        expect_item(tape, h, &[4, 1, 25], "encoder conv1")?;
        let h = tape.leaky_relu(h, slope)?;
        let h = tape.batchnorm(h, &self.bn1, mode)?;
        let h = tape.layer(h, &self.conv2)?;
        expect_item(
            tape,
            h,
            &[RESIDUAL_CHANNELS, 1, RESIDUAL_COLS],
            "encoder conv2",
        )?;
        Ok(h)
    }

    fn layers(&self) -> Vec<&LayerParams> {
        vec![&self.conv1, &self.bn1, &self.conv2]
    }

    fn layers_mut(&mut self) -> Vec<&mut LayerParams> {
        vec![&mut self.conv1, &mut self.bn1, &mut self.conv2]
    }
}

/// Two transposed 1-D convolutions `8×1×22 → 8×1×25 → 1×1×28`, each with
/// LeakyReLU and batchnorm, closed by tanh.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub convt1: LayerParams,
    pub bn1: LayerParams,
    pub convt2: LayerParams,
    pub bn2: LayerParams,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(prefix: &str, rng: &mut R) -> Self {
        let mut convt1 = LayerParams::conv_transpose1d(format!("{prefix}.convt1"), 8, 8, 4, 1);
        let bn1 = LayerParams::batchnorm(format!("{prefix}.bn1"), 8);
        let mut convt2 = LayerParams::conv_transpose1d(format!("{prefix}.convt2"), 8, 1, 4, 1);
        let bn2 = LayerParams::batchnorm(format!("{prefix}.bn2"), 1);
        convt1.init_uniform(rng);
        convt2.init_uniform(rng);
        Decoder {
            convt1,
            bn1,
            convt2,
            bn2,
        }
    }

    pub fn forward(&self, tape: &mut Tape, h: Var, mode: BnMode, slope: f64) -> Result<Var> {
        let x = tape.layer(h, &self.convt1)?;
        expect_item(tape, x, &[8, 1, 25], "decoder convt1")?;
        let x = tape.leaky_relu(x, slope)?;
        let x = tape.batchnorm(x, &self.bn1, mode)?;
        let x = tape.layer(x, &self.convt2)?;
        expect_item(tape, x, &[1, 1, FEATURE_COUNT], "decoder convt2")?;
        let x = tape.leaky_relu(x, slope)?;
        let x = tape.batchnorm(x, &self.bn2, mode)?;
        tape.tanh(x)
    }

    fn layers(&self) -> Vec<&LayerParams> {
        vec![&self.convt1, &self.bn1, &self.convt2, &self.bn2]
    }

    fn layers_mut(&mut self) -> Vec<&mut LayerParams> {
        vec![
            &mut self.convt1,
            &mut self.bn1,
            &mut self.convt2,
            &mut self.bn2,
        ]
    }
}

/// One GAN: generator encoder/decoder, discriminator encoder and scoring head.
#[derive(Debug, Clone, PartialEq)]
pub struct GanModel {
    pub prefix: String,
    pub ge: Encoder,
    pub gd: Decoder,
    pub de: Encoder,
    pub d_head: LayerParams,
    pub slope: f64,
}

/// Values of one GAN pass over a batch, all on the same tape.
#[derive(Debug, Clone, Copy)]
pub struct GanVars {
    pub h_ge: Var,
    pub x_gd: Var,
    pub h_de: Var,
    pub y: Var,
}

/// Single-sample GAN pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GanForwardTrace {
    /// `8×1×22` generator-encoder features of the input.
    pub h_ge: Tensor,
    /// `1×1×28` reconstruction.
    pub x_gd: Tensor,
    /// `8×1×22` discriminator-encoder features of the reconstruction.
    pub h_de: Tensor,
    /// `h_de − h_ge`.
    pub y: Tensor,
    pub d_real: f64,
    pub d_fake: f64,
}

impl GanModel {
    pub fn new<R: Rng + ?Sized>(prefix: &str, slope: f64, rng: &mut R) -> Self {
        let ge = Encoder::new(&format!("{prefix}.ge"), rng);
        let gd = Decoder::new(&format!("{prefix}.gd"), rng);
        let de = Encoder::new(&format!("{prefix}.de"), rng);
        let mut d_head = LayerParams::fully_connected(
            format!("{prefix}.d_head"),
            RESIDUAL_CHANNELS * RESIDUAL_COLS,
            1,
        );
        d_head.init_uniform(rng);
        GanModel {
            prefix: prefix.to_string(),
            ge,
            gd,
            de,
            d_head,
            slope,
        }
    }

    /// Reconstruction `G(x) = GD(GE(x))`, returning `(h_ge, x_gd)`.
    pub fn generate(&self, tape: &mut Tape, x: Var, mode: BnMode) -> Result<(Var, Var)> {
        let h_ge = self.ge.forward(tape, x, mode, self.slope)?;
        let x_gd = self.gd.forward(tape, h_ge, mode, self.slope)?;
        Ok((h_ge, x_gd))
    }

    pub fn discriminator_features(&self, tape: &mut Tape, x: Var, mode: BnMode) -> Result<Var> {
        self.de.forward(tape, x, mode, self.slope)
    }

    /// Pre-sigmoid discriminator score from discriminator-encoder features.
    pub fn score_logit(&self, tape: &mut Tape, h_de: Var) -> Result<Var> {
        tape.layer(h_de, &self.d_head)
    }

    /// Full chain `y = DE(GD(GE(x))) − GE(x)`.
    pub fn forward_vars(&self, tape: &mut Tape, x: Var, mode: BnMode) -> Result<GanVars> {
        let (h_ge, x_gd) = self.generate(tape, x, mode)?;
        let h_de = self.discriminator_features(tape, x_gd, mode)?;
        let y = tape.sub(h_de, h_ge)?;
        Ok(GanVars {
            h_ge,
            x_gd,
            h_de,
            y,
        })
    }

    pub fn is_generator_param(&self, name: &str) -> bool {
        name.starts_with(&format!("{}.ge.", self.prefix))
            || name.starts_with(&format!("{}.gd.", self.prefix))
    }

    pub fn is_discriminator_param(&self, name: &str) -> bool {
        name.starts_with(&format!("{}.de.", self.prefix))
            || name.starts_with(&format!("{}.d_head.", self.prefix))
    }

    pub fn generator_layers_mut(&mut self) -> Vec<&mut LayerParams> {
        let mut v = self.ge.layers_mut();
        v.extend(self.gd.layers_mut());
        v
    }

    pub fn discriminator_layers_mut(&mut self) -> Vec<&mut LayerParams> {
        let mut v = self.de.layers_mut();
        v.push(&mut self.d_head);
        v
    }
}

impl Module for GanModel {
    fn layers(&self) -> Vec<&LayerParams> {
        let mut v = self.ge.layers();
        v.extend(self.gd.layers());
        v.extend(self.de.layers());
        v.push(&self.d_head);
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut LayerParams> {
        let mut v = self.ge.layers_mut();
        v.extend(self.gd.layers_mut());
        v.extend(self.de.layers_mut());
        v.push(&mut self.d_head);
        v
    }
}

/// Plain convolutional stand-in for a GAN branch, same output shape as `GE`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainBranch {
    pub prefix: String,
    pub encoder: Encoder,
    pub slope: f64,
}

/// One of the two parallel feature extractors.
#[derive(Debug, Clone, PartialEq)]
pub enum Branch {
    Gan(GanModel),
    Plain(PlainBranch),
}

impl Branch {
    pub fn plain<R: Rng + ?Sized>(prefix: &str, slope: f64, rng: &mut R) -> Self {
        Branch::Plain(PlainBranch {
            prefix: prefix.to_string(),
            encoder: Encoder::new(&format!("{prefix}.enc"), rng),
            slope,
        })
    }

    /// The `8×1×22` branch output: the feature residual for a GAN, the
    /// encoder output for a plain branch.
    pub fn residual(&self, tape: &mut Tape, x: Var, mode: BnMode) -> Result<Var> {
        let y = match self {
            Branch::Gan(g) => g.forward_vars(tape, x, mode)?.y,
            Branch::Plain(p) => p.encoder.forward(tape, x, mode, p.slope)?,
        };
        expect_item(
            tape,
            y,
            &[RESIDUAL_CHANNELS, 1, RESIDUAL_COLS],
            "branch output",
        )?;
        Ok(y)
    }

    pub fn gan(&self) -> Option<&GanModel> {
        match self {
            Branch::Gan(g) => Some(g),
            Branch::Plain(_) => None,
        }
    }

    pub fn gan_mut(&mut self) -> Option<&mut GanModel> {
        match self {
            Branch::Gan(g) => Some(g),
            Branch::Plain(_) => None,
        }
    }

    pub fn prefix(&self) -> &str {
        match self {
            Branch::Gan(g) => &g.prefix,
            Branch::Plain(p) => &p.prefix,
        }
    }
}

impl Module for Branch {
    fn layers(&self) -> Vec<&LayerParams> {
        match self {
            Branch::Gan(g) => g.layers(),
            Branch::Plain(p) => p.encoder.layers(),
        }
    }

    fn layers_mut(&mut self) -> Vec<&mut LayerParams> {
        match self {
            Branch::Gan(g) => g.layers_mut(),
            Branch::Plain(p) => p.encoder.layers_mut(),
        }
    }
}

pub(crate) fn expect_item(tape: &Tape, v: Var, item: &[usize], what: &'static str) -> Result<()> {
    let s = tape.value(v).shape();
    if s.len() != item.len() + 1 || &s[1..] != item {
        return Err(Error::shape(
            what,
            format!("[batch, {item:?}]"),
            format!("{s:?}"),
        ));
    }
    Ok(())
}

/// Packs feature vectors into a `[n, 1, 1, 28]` batch, rejecting non-finite input.
pub fn batch_tensor(xs: &[FeatureVector]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(xs.len() * FEATURE_COUNT);
    for (i, x) in xs.iter().enumerate() {
        if let Some(k) = x.0.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "sample {i} has a non-finite value at feature {k}"
            )));
        }
        data.extend_from_slice(&x.0);
    }
    Tensor::new(&[xs.len(), 1, 1, FEATURE_COUNT], data)
}

fn item(t: &Tensor) -> Result<Tensor> {
    t.reshape(&t.shape()[1..])
}

/// Single-sample GAN pass in eval mode.
pub fn gan_forward(gan: &GanModel, x: &FeatureVector) -> Result<GanForwardTrace> {
    let mut tape = Tape::new();
    let input = tape.constant(batch_tensor(std::slice::from_ref(x))?);
    let vars = gan.forward_vars(&mut tape, input, BnMode::Eval)?;
    let h_real = gan.discriminator_features(&mut tape, input, BnMode::Eval)?;
    let real = gan.score_logit(&mut tape, h_real)?;
    let fake = gan.score_logit(&mut tape, vars.h_de)?;
    let d_real = tape.sigmoid(real)?;
    let d_fake = tape.sigmoid(fake)?;
    Ok(GanForwardTrace {
        h_ge: item(tape.value(vars.h_ge))?,
        x_gd: item(tape.value(vars.x_gd))?,
        h_de: item(tape.value(vars.h_de))?,
        y: item(tape.value(vars.y))?,
        d_real: tape.value(d_real).item(),
        d_fake: tape.value(d_fake).item(),
    })
}
