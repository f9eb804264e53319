use rand::Rng;

use super::gan::{batch_tensor, expect_item, Branch, GanModel, RESIDUAL_CHANNELS, RESIDUAL_COLS};
use crate::data::FeatureVector;
use crate::diffnet::{
    concat_rows_value, BnMode, LayerParams, Module, Tape, Tensor, Var, DEFAULT_LEAKY_SLOPE,
};
use crate::error::{Error, Result};

/// Conv2d stage rows and columns after a `(1, 4)` kernel over `8×2×22`.
pub const STAGE_CHANNELS: usize = 4;
pub const STAGE_ROWS: usize = 2;
pub const STAGE_COLS: usize = 19;
/// Length of the flattened conv2d stage output.
pub const STAGE_LEN: usize = STAGE_CHANNELS * STAGE_ROWS * STAGE_COLS;
pub const DEFAULT_FC1_WIDTH: usize = 16;

/// Where the two parallel branches come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrontKind {
    Gan,
    /// Plain convolutional encoders of the same output shape (ablation).
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchConfig {
    pub front: FrontKind,
    pub leaky_slope: f64,
    /// Width of the first fully-connected layer of the transfer classifier.
    pub fc1_width: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            front: FrontKind::Gan,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            fc1_width: DEFAULT_FC1_WIDTH,
        }
    }
}

/// Batchnorm modes for the branch front end and the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Modes {
    pub branches: BnMode,
    pub head: BnMode,
}

impl Modes {
    pub const EVAL: Modes = Modes {
        branches: BnMode::Eval,
        head: BnMode::Eval,
    };
}

/// Conv2d + LeakyReLU + batchnorm: `8×2×22 → 4×2×19`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage {
    pub conv: LayerParams,
    pub bn: LayerParams,
    pub slope: f64,
}

impl ConvStage {
    pub fn new<R: Rng + ?Sized>(prefix: &str, slope: f64, rng: &mut R) -> Self {
        let mut conv = LayerParams::conv2d(
            format!("{prefix}.conv"),
            RESIDUAL_CHANNELS,
            STAGE_CHANNELS,
            (1, 4),
            (1, 1),
        );
        conv.init_uniform(rng);
        ConvStage {
            conv,
            bn: LayerParams::batchnorm(format!("{prefix}.bn"), STAGE_CHANNELS),
            slope,
        }
    }

    /// Returns the flattened stage output, `[n, 1, 1, 152]`.
    pub fn forward(&self, tape: &mut Tape, f: Var, mode: BnMode) -> Result<Var> {
        expect_item(
            tape,
            f,
            &[RESIDUAL_CHANNELS, 2, RESIDUAL_COLS],
            "conv stage input",
        )?;
        let h = tape.layer(f, &self.conv)?;
        expect_item(
            tape,
            h,
            &[STAGE_CHANNELS, STAGE_ROWS, STAGE_COLS],
            "conv stage",
        )?;
        let h = tape.leaky_relu(h, self.slope)?;
        let h = tape.batchnorm(h, &self.bn, mode)?;
        tape.flatten(h)
    }

    fn layers(&self) -> Vec<&LayerParams> {
        vec![&self.conv, &self.bn]
    }

    fn layers_mut(&mut self) -> Vec<&mut LayerParams> {
        vec![&mut self.conv, &mut self.bn]
    }
}

/// Fully-connected classifier: hidden layers with LeakyReLU, then an output
/// layer of width 2 and softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Fnn {
    pub hidden: Vec<LayerParams>,
    pub out: LayerParams,
    pub slope: f64,
}

impl Fnn {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        inputs: usize,
        hidden: &[usize],
        slope: f64,
        rng: &mut R,
    ) -> Self {
        let mut width = inputs;
        let mut layers = Vec::new();
        for (i, &h) in hidden.iter().enumerate() {
            let mut l = LayerParams::fully_connected(format!("{prefix}.fc{}", i + 1), width, h);
            l.init_uniform(rng);
            layers.push(l);
            width = h;
        }
        let mut out =
            LayerParams::fully_connected(format!("{prefix}.fc{}", hidden.len() + 1), width, 2);
        out.init_uniform(rng);
        Fnn {
            hidden: layers,
            out,
            slope,
        }
    }

    /// Returns `(fc1, probabilities)`, where `fc1` is the activation of the
    /// first hidden layer (the logits when there is none).
    pub fn forward(&self, tape: &mut Tape, d: Var) -> Result<(Var, Var)> {
        let mut h = d;
        let mut fc1 = None;
        for layer in &self.hidden {
            h = tape.layer(h, layer)?;
            h = tape.leaky_relu(h, self.slope)?;
            fc1.get_or_insert(h);
        }
        let logits = tape.layer(h, &self.out)?;
        let probs = tape.softmax(logits)?;
        Ok((fc1.unwrap_or(logits), probs))
    }

    fn layers(&self) -> Vec<&LayerParams> {
        self.hidden
            .iter()
            .chain(std::iter::once(&self.out))
            .collect()
    }

    fn layers_mut(&mut self) -> Vec<&mut LayerParams> {
        self.hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.out))
            .collect()
    }
}

/// Places `y_n` in row 0 and `y_ic` in row 1 of every channel: two
/// `8×1×22` tensors become one `8×2×22` tensor.
pub fn concatenate(y_n: &Tensor, y_ic: &Tensor) -> Result<Tensor> {
    let expected = [RESIDUAL_CHANNELS, 1, RESIDUAL_COLS];
    for t in [y_n, y_ic] {
        if t.shape() != expected {
            return Err(Error::shape(
                "concatenate",
                format!("{expected:?}"),
                format!("{:?}", t.shape()),
            ));
        }
    }
    let batched = |t: &Tensor| t.reshape(&[1, RESIDUAL_CHANNELS, 1, RESIDUAL_COLS]);
    let f = concat_rows_value(&batched(y_n)?, &batched(y_ic)?)?;
    f.reshape(&[RESIDUAL_CHANNELS, 2, RESIDUAL_COLS])
}

fn branches<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> (Branch, Branch) {
    match arch.front {
        FrontKind::Gan => (
            Branch::Gan(GanModel::new("gan_normal", arch.leaky_slope, rng)),
            Branch::Gan(GanModel::new("gan_icing", arch.leaky_slope, rng)),
        ),
        FrontKind::Plain => (
            Branch::plain("cnn_normal", arch.leaky_slope, rng),
            Branch::plain("cnn_icing", arch.leaky_slope, rng),
        ),
    }
}

fn front_kind(b: &Branch) -> FrontKind {
    match b {
        Branch::Gan(_) => FrontKind::Gan,
        Branch::Plain(_) => FrontKind::Plain,
    }
}

fn dual_features(
    normal: &Branch,
    icing: &Branch,
    tape: &mut Tape,
    x: Var,
    mode: BnMode,
) -> Result<Var> {
    let y_n = normal.residual(tape, x, mode)?;
    let y_ic = icing.residual(tape, x, mode)?;
    tape.concat_rows(y_n, y_ic)
}

/// Batched evaluation in chunks, so intermediate values stay small.
fn chunked<T>(
    xs: &[FeatureVector],
    mut f: impl FnMut(&mut Tape, Var) -> Result<Vec<T>>,
) -> Result<Vec<T>> {
    const CHUNK: usize = 512;
    let mut out = Vec::with_capacity(xs.len());
    for part in xs.chunks(CHUNK) {
        let mut tape = Tape::new();
        let x = tape.constant(batch_tensor(part)?);
        out.extend(f(&mut tape, x)?);
    }
    Ok(out)
}

fn pairs(t: &Tensor) -> Vec<[f64; 2]> {
    t.data().chunks(2).map(|c| [c[0], c[1]]).collect()
}

/// Two parallel branches, concatenation, conv2d stage and a 2-way FC + softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct PgancModel {
    pub normal: Branch,
    pub icing: Branch,
    pub conv: ConvStage,
    pub fc: LayerParams,
}

impl PgancModel {
    pub fn new<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Self {
        let (normal, icing) = branches(arch, rng);
        let conv = ConvStage::new("classifier", arch.leaky_slope, rng);
        let mut fc = LayerParams::fully_connected("classifier.fc", STAGE_LEN, 2);
        fc.init_uniform(rng);
        PgancModel {
            normal,
            icing,
            conv,
            fc,
        }
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            front: front_kind(&self.normal),
            leaky_slope: self.conv.slope,
            fc1_width: 0,
        }
    }

    /// The concatenated `[n, 8, 2, 22]` branch outputs.
    pub fn features(&self, tape: &mut Tape, x: Var, mode: BnMode) -> Result<Var> {
        dual_features(&self.normal, &self.icing, tape, x, mode)
    }

    /// Classifier head on concatenated features; returns `[n, 1, 1, 2]` probabilities.
    pub fn classify(&self, tape: &mut Tape, f: Var, mode: BnMode) -> Result<Var> {
        let d = self.conv.forward(tape, f, mode)?;
        let logits = tape.layer(d, &self.fc)?;
        tape.softmax(logits)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, modes: Modes) -> Result<Var> {
        let f = self.features(tape, x, modes.branches)?;
        self.classify(tape, f, modes.head)
    }

    /// Eval-mode probabilities `[normal, icing]` per sample.
    pub fn predict(&self, xs: &[FeatureVector]) -> Result<Vec<[f64; 2]>> {
        chunked(xs, |tape, x| {
            let p = self.forward(tape, x, Modes::EVAL)?;
            Ok(pairs(tape.value(p)))
        })
    }

    pub fn is_classifier_param(name: &str) -> bool {
        name.starts_with("classifier.")
    }
}

impl Module for PgancModel {
    fn layers(&self) -> Vec<&LayerParams> {
        let mut v = self.normal.layers();
        v.extend(self.icing.layers());
        v.extend(self.conv.layers());
        v.push(&self.fc);
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut LayerParams> {
        let mut v = self.normal.layers_mut();
        v.extend(self.icing.layers_mut());
        v.extend(self.conv.layers_mut());
        v.push(&mut self.fc);
        v
    }
}

/// Parameter partition of the transfer model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Branch (GAN or plain) feature extractor.
    BranchFeatures,
    /// Conv2d feature extractor.
    CnnFeatures,
    /// Fully-connected classifier.
    Classifier,
}

/// Values of a transfer-model pass.
#[derive(Debug, Clone, Copy)]
pub struct PgantVars {
    /// Flattened conv-stage output, `[n, 1, 1, 152]`.
    pub d: Var,
    /// First fully-connected activation.
    pub fc1: Var,
    pub probs: Var,
}

/// Parallel branches, conv2d feature extractor and fully-connected classifier;
/// the domain critic works on `D` and `FC1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PgantModel {
    pub normal: Branch,
    pub icing: Branch,
    pub cnn_fe: ConvStage,
    pub fnn: Fnn,
}

impl PgantModel {
    pub fn new<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Self {
        let (normal, icing) = branches(arch, rng);
        let cnn_fe = ConvStage::new("cnn_fe", arch.leaky_slope, rng);
        let hidden: Vec<usize> = if arch.fc1_width > 0 {
            vec![arch.fc1_width]
        } else {
            vec![]
        };
        let fnn = Fnn::new("fnn", STAGE_LEN, &hidden, arch.leaky_slope, rng);
        PgantModel {
            normal,
            icing,
            cnn_fe,
            fnn,
        }
    }

    /// Builds a transfer model on top of already trained branches.
    pub fn from_branches<R: Rng + ?Sized>(
        normal: Branch,
        icing: Branch,
        arch: &ArchConfig,
        rng: &mut R,
    ) -> Self {
        let mut m = PgantModel::new(arch, rng);
        m.normal = normal;
        m.icing = icing;
        m
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            front: front_kind(&self.normal),
            leaky_slope: self.cnn_fe.slope,
            fc1_width: self.fnn.hidden.first().map_or(0, |l| l.hyper.filters),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, modes: Modes) -> Result<PgantVars> {
        let f = dual_features(&self.normal, &self.icing, tape, x, modes.branches)?;
        let d = self.cnn_fe.forward(tape, f, modes.head)?;
        let (fc1, probs) = self.fnn.forward(tape, d)?;
        Ok(PgantVars { d, fc1, probs })
    }

    /// Eval-mode `(Y, D, FC1)` per sample.
    pub fn predict_full(
        &self,
        xs: &[FeatureVector],
    ) -> Result<Vec<([f64; 2], Vec<f64>, Vec<f64>)>> {
        chunked(xs, |tape, x| {
            let v = self.forward(tape, x, Modes::EVAL)?;
            let (dv, fv) = (tape.value(v.d), tape.value(v.fc1));
            let (dl, fl) = (dv.per_item(), fv.per_item());
            Ok(pairs(tape.value(v.probs))
                .into_iter()
                .enumerate()
                .map(|(i, y)| {
                    (
                        y,
                        dv.data()[i * dl..(i + 1) * dl].to_vec(),
                        fv.data()[i * fl..(i + 1) * fl].to_vec(),
                    )
                })
                .collect())
        })
    }

    pub fn predict(&self, xs: &[FeatureVector]) -> Result<Vec<[f64; 2]>> {
        chunked(xs, |tape, x| {
            let v = self.forward(tape, x, Modes::EVAL)?;
            Ok(pairs(tape.value(v.probs)))
        })
    }

    pub fn group_of(name: &str) -> ParamGroup {
        if name.starts_with("fnn.") {
            ParamGroup::Classifier
        } else if name.starts_with("cnn_fe.") {
            ParamGroup::CnnFeatures
        } else {
            ParamGroup::BranchFeatures
        }
    }
}

impl Module for PgantModel {
    fn layers(&self) -> Vec<&LayerParams> {
        let mut v = self.normal.layers();
        v.extend(self.icing.layers());
        v.extend(self.cnn_fe.layers());
        v.extend(self.fnn.layers());
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut LayerParams> {
        let mut v = self.normal.layers_mut();
        v.extend(self.icing.layers_mut());
        v.extend(self.cnn_fe.layers_mut());
        v.extend(self.fnn.layers_mut());
        v
    }
}

/// Eval-mode class probabilities `[normal, icing]` for one sample.
pub fn pganc_forward(model: &PgancModel, x: &FeatureVector) -> Result<[f64; 2]> {
    Ok(model.predict(std::slice::from_ref(x))?[0])
}

/// Eval-mode `(Y, D, FC1)` for one sample.
pub fn pgant_forward(
    model: &PgantModel,
    x: &FeatureVector,
) -> Result<([f64; 2], Vec<f64>, Vec<f64>)> {
    Ok(model.predict_full(std::slice::from_ref(x))?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::gan::gan_forward;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(seed: u64) -> FeatureVector {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut v = [0.0; 28];
        for a in &mut v {
            *a = r.gen_range(-1.0..1.0);
        }
        FeatureVector(v)
    }

    #[test]
    fn concatenate_places_rows() {
        let ones = Tensor::full(&[8, 1, 22], 1.0);
        let zeros = Tensor::zeros(&[8, 1, 22]);
        let f = concatenate(&ones, &zeros).unwrap();
        assert_eq!(f.shape(), &[8, 2, 22]);
        for c in 0..8 {
            assert!(f.data()[c * 44..c * 44 + 22].iter().all(|v| *v == 1.0));
            assert!(f.data()[c * 44 + 22..c * 44 + 44].iter().all(|v| *v == 0.0));
        }
        assert!(concatenate(&Tensor::zeros(&[8, 1, 21]), &zeros).is_err());
    }

    #[test]
    fn pganc_output_is_distribution() {
        let m = PgancModel::new(&ArchConfig::default(), &mut ChaCha8Rng::seed_from_u64(4));
        for s in 0..5 {
            let y = pganc_forward(&m, &sample(s)).unwrap();
            assert!((y[0] + y[1] - 1.0).abs() <= 1e-12);
            assert!(y.iter().all(|p| (0.0..=1.0).contains(p)));
            assert_eq!(y, pganc_forward(&m, &sample(s)).unwrap());
        }
    }

    #[test]
    fn pganc_matches_manual_composition() {
        let m = PgancModel::new(&ArchConfig::default(), &mut ChaCha8Rng::seed_from_u64(5));
        let x = sample(11);
        let y_n = gan_forward(m.normal.gan().unwrap(), &x).unwrap().y;
        let y_ic = gan_forward(m.icing.gan().unwrap(), &x).unwrap().y;
        let f = concatenate(&y_n, &y_ic).unwrap();
        let mut tape = Tape::new();
        let fv = tape.constant(f.reshape(&[1, 8, 2, 22]).unwrap());
        let p = m.classify(&mut tape, fv, BnMode::Eval).unwrap();
        let manual = tape.value(p).data().to_vec();
        let direct = pganc_forward(&m, &x).unwrap();
        assert_eq!(manual, direct.to_vec());
    }

    #[test]
    fn pgant_shapes() {
        let m = PgantModel::new(&ArchConfig::default(), &mut ChaCha8Rng::seed_from_u64(6));
        let (y, d, fc1) = pgant_forward(&m, &sample(1)).unwrap();
        assert_eq!(d.len(), 152);
        assert_eq!(fc1.len(), 16);
        assert!((y[0] + y[1] - 1.0).abs() <= 1e-12);
        assert_eq!((y, d, fc1), pgant_forward(&m, &sample(1)).unwrap());
    }

    #[test]
    fn pgant_with_pganc_head_matches_pganc() {
        let pganc = PgancModel::new(&ArchConfig::default(), &mut ChaCha8Rng::seed_from_u64(7));
        let mut pgant = PgantModel::new(&ArchConfig::default(), &mut ChaCha8Rng::seed_from_u64(8));
        pgant.normal = pganc.normal.clone();
        pgant.icing = pganc.icing.clone();
        pgant.cnn_fe.conv.weight = pganc.conv.conv.weight.clone();
        pgant.cnn_fe.conv.bias = pganc.conv.conv.bias.clone();
        pgant.cnn_fe.bn.weight = pganc.conv.bn.weight.clone();
        pgant.cnn_fe.bn.bias = pganc.conv.bn.bias.clone();
        pgant.cnn_fe.bn.running = pganc.conv.bn.running.clone();
        pgant.fnn = Fnn {
            hidden: vec![],
            out: pganc.fc.clone(),
            slope: pganc.conv.slope,
        };
        for s in 0..3 {
            let x = sample(100 + s);
            assert_eq!(
                pgant_forward(&pgant, &x).unwrap().0,
                pganc_forward(&pganc, &x).unwrap()
            );
        }
    }

    #[test]
    fn param_groups() {
        assert_eq!(
            PgantModel::group_of("fnn.fc1.weight"),
            ParamGroup::Classifier
        );
        assert_eq!(
            PgantModel::group_of("cnn_fe.bn.bias"),
            ParamGroup::CnnFeatures
        );
        assert_eq!(
            PgantModel::group_of("gan_icing.de.conv1.weight"),
            ParamGroup::BranchFeatures
        );
    }

    #[test]
    fn plain_front_has_matching_shapes() {
        let arch = ArchConfig {
            front: FrontKind::Plain,
            ..ArchConfig::default()
        };
        let m = PgancModel::new(&arch, &mut ChaCha8Rng::seed_from_u64(1));
        let y = pganc_forward(&m, &sample(2)).unwrap();
        assert!((y[0] + y[1] - 1.0).abs() <= 1e-12);
        assert_eq!(m.arch().front, FrontKind::Plain);
    }

    #[test]
    fn layers_validate() {
        let m = PgantModel::new(&ArchConfig::default(), &mut ChaCha8Rng::seed_from_u64(1));
        m.validate().unwrap();
        let names: Vec<_> = m.layers().iter().map(|l| l.name.clone()).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
    }
}
