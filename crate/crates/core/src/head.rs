//! Classification head: a valid 1-D convolution over the patch rows with
//! per-filter max pooling, an affine projection of the message vector, and
//! a fully connected classifier over their concatenation.
//!
//! Forward and backward passes are written out by hand; every gradient is
//! checked against central finite differences in the test suite.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encode::{EncodedCommit, DEFAULT_WINDOW};
use crate::scalar::{cast, sigmoid, softplus};
use crate::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("max pooling over an empty feature map")]
    EmptyPool,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("the model has no {0} branch")]
    MissingBranch(&'static str),
    #[error("invalid head config: {0}")]
    Config(String),
}

/// Which input branches feed the fusion vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMask {
    #[default]
    Full,
    CodeOnly,
    MessageOnly,
}

impl InputMask {
    pub fn uses_code(self) -> bool {
        self != InputMask::MessageOnly
    }

    pub fn uses_message(self) -> bool {
        self != InputMask::CodeOnly
    }
}

/// Final classifier shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierForm {
    /// `sigmoid(w_out . relu(W_hid z + b_hid) + b_out)`
    #[default]
    TwoLayer,
    /// `sigmoid(relu(w . z + b))`; scores never fall below 0.5.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Patches per commit, `|C|`.
    pub window: usize,
    /// Convolution window `k`, in patches.
    pub window_size: usize,
    /// Filter count `K`.
    pub num_filters: usize,
    /// Width `h` of the message projection.
    pub hidden_dim: usize,
    /// Width of the classifier's hidden layer (two-layer form only).
    pub fusion_dim: usize,
    /// Backbone embedding width `d`.
    pub embedding_dim: usize,
    /// Dropout rate on the fused vector during training.
    pub dropout: f64,
    pub classifier: ClassifierForm,
    /// Branches present in the model.
    pub branches: InputMask,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            window: DEFAULT_WINDOW,
            window_size: 2,
            num_filters: 64,
            hidden_dim: 64,
            fusion_dim: 64,
            embedding_dim: 768,
            dropout: 0.2,
            classifier: ClassifierForm::TwoLayer,
            branches: InputMask::Full,
        }
    }
}

impl HeadConfig {
    pub fn with_embedding_dim(mut self, d: usize) -> Self {
        self.embedding_dim = d;
        self
    }

    pub fn validate(&self) -> Result<(), HeadError> {
        let positive = [
            ("window", self.window),
            ("window_size", self.window_size),
            ("num_filters", self.num_filters),
            ("hidden_dim", self.hidden_dim),
            ("fusion_dim", self.fusion_dim),
            ("embedding_dim", self.embedding_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(HeadError::Config(format!("{name} must be positive")));
        }
        if self.window_size > self.window {
            return Err(HeadError::Config(format!(
                "window_size {} exceeds the patch window {}",
                self.window_size, self.window
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(HeadError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Length of the fused vector `z`.
    pub fn fused_dim(&self) -> usize {
        let code = if self.branches.uses_code() { self.num_filters } else { 0 };
        let msg = if self.branches.uses_message() { self.hidden_dim } else { 0 };
        code + msg
    }

    /// Conv positions per filter, `|C| - k + 1`.
    pub fn conv_positions(&self) -> usize {
        self.window + 1 - self.window_size
    }

    /// Closed-form parameter count of the head.
    pub fn parameter_count(&self) -> usize {
        let (k, kk, d, h, hf) = (
            self.window_size,
            self.num_filters,
            self.embedding_dim,
            self.hidden_dim,
            self.fusion_dim,
        );
        let code = if self.branches.uses_code() { kk * k * d + kk } else { 0 };
        let msg = if self.branches.uses_message() { d * h + h } else { 0 };
        let z = self.fused_dim();
        let classifier = match self.classifier {
            ClassifierForm::TwoLayer => z * hf + hf + hf + 1,
            ClassifierForm::Literal => z + 1,
        };
        code + msg + classifier
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBranch<F> {
    /// `K x k x d`
    pub filters: Array3<F>,
    pub bias: Array1<F>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageBranch<F> {
    /// `h x d`
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Classifier<F> {
    TwoLayer {
        hidden_weight: Array2<F>,
        hidden_bias: Array1<F>,
        out_weight: Array1<F>,
        /// length 1
        out_bias: Array1<F>,
    },
    Literal {
        weight: Array1<F>,
        /// length 1
        bias: Array1<F>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams<F> {
    pub code: Option<ConvBranch<F>>,
    pub message: Option<MessageBranch<F>>,
    pub classifier: Classifier<F>,
}

fn uniform<F: Scalar, D: ndarray::Dimension, Sh: ndarray::ShapeBuilder<Dim = D>>(
    shape: Sh,
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> ndarray::Array<F, D> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    ndarray::Array::from_shape_simple_fn(shape, || cast(rng.gen_range(-bound..bound)))
}

impl<F: Scalar> HeadParams<F> {
    /// Fan-in scaled uniform weights, zero biases.
    pub fn init(cfg: &HeadConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, kk, d, h, hf) = (
            cfg.window_size,
            cfg.num_filters,
            cfg.embedding_dim,
            cfg.hidden_dim,
            cfg.fusion_dim,
        );
        let code = cfg.branches.uses_code().then(|| ConvBranch {
            filters: uniform((kk, k, d), k * d, &mut rng),
            bias: Array1::zeros(kk),
        });
        let message = cfg.branches.uses_message().then(|| MessageBranch {
            weight: uniform((h, d), d, &mut rng),
            bias: Array1::zeros(h),
        });
        let z = cfg.fused_dim();
        let classifier = match cfg.classifier {
            ClassifierForm::TwoLayer => Classifier::TwoLayer {
                hidden_weight: uniform((hf, z), z, &mut rng),
                hidden_bias: Array1::zeros(hf),
                out_weight: uniform(hf, hf, &mut rng),
                out_bias: Array1::zeros(1),
            },
            ClassifierForm::Literal => Classifier::Literal {
                weight: uniform(z, z, &mut rng),
                bias: Array1::zeros(1),
            },
        };
        HeadParams {
            code,
            message,
            classifier,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_tensor_mut(|_, t| t.fill(F::zero()));
        out
    }

    /// Visits every parameter tensor in a fixed order.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&'static str, &[F])) {
        if let Some(c) = &self.code {
            f("filters", c.filters.as_slice().expect("standard layout"));
            f("filter_bias", c.bias.as_slice().expect("standard layout"));
        }
        if let Some(m) = &self.message {
            f("message_weight", m.weight.as_slice().expect("standard layout"));
            f("message_bias", m.bias.as_slice().expect("standard layout"));
        }
        match &self.classifier {
            Classifier::TwoLayer {
                hidden_weight,
                hidden_bias,
                out_weight,
                out_bias,
            } => {
                f("hidden_weight", hidden_weight.as_slice().expect("standard layout"));
                f("hidden_bias", hidden_bias.as_slice().expect("standard layout"));
                f("out_weight", out_weight.as_slice().expect("standard layout"));
                f("out_bias", out_bias.as_slice().expect("standard layout"));
            }
            Classifier::Literal { weight, bias } => {
                f("classifier_weight", weight.as_slice().expect("standard layout"));
                f("classifier_bias", bias.as_slice().expect("standard layout"));
            }
        }
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&'static str, &mut [F])) {
        if let Some(c) = &mut self.code {
            f("filters", c.filters.as_slice_mut().expect("standard layout"));
            f("filter_bias", c.bias.as_slice_mut().expect("standard layout"));
        }
        if let Some(m) = &mut self.message {
            f("message_weight", m.weight.as_slice_mut().expect("standard layout"));
            f("message_bias", m.bias.as_slice_mut().expect("standard layout"));
        }
        match &mut self.classifier {
            Classifier::TwoLayer {
                hidden_weight,
                hidden_bias,
                out_weight,
                out_bias,
            } => {
                f("hidden_weight", hidden_weight.as_slice_mut().expect("standard layout"));
                f("hidden_bias", hidden_bias.as_slice_mut().expect("standard layout"));
                f("out_weight", out_weight.as_slice_mut().expect("standard layout"));
                f("out_bias", out_bias.as_slice_mut().expect("standard layout"));
            }
            Classifier::Literal { weight, bias } => {
                f("classifier_weight", weight.as_slice_mut().expect("standard layout"));
                f("classifier_bias", bias.as_slice_mut().expect("standard layout"));
            }
        }
    }

    /// Pairs up tensors of two same-shaped parameter sets.
    pub fn zip_tensors_mut(&mut self, other: &Self, mut f: impl FnMut(&mut [F], &[F])) {
        let mut theirs: Vec<Vec<F>> = Vec::new();
        other.for_each_tensor(|_, t| theirs.push(t.to_vec()));
        let mut it = theirs.iter();
        self.for_each_tensor_mut(|_, mine| {
            let other = it.next().expect("parameter sets differ in structure");
            f(mine, other)
        });
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, t| n += t.len());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(|_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }

    pub fn squared_norm(&self) -> F {
        let mut acc = F::zero();
        self.for_each_tensor(|_, t| acc += t.iter().map(|v| *v * *v).sum::<F>());
        acc
    }

    pub fn scale(&mut self, factor: F) {
        self.for_each_tensor_mut(|_, t| t.iter_mut().for_each(|v| *v *= factor));
    }

    /// The same head with one input branch structurally removed: the
    /// dropped branch's parameters disappear and the classifier keeps only
    /// the columns that read the surviving branch.
    pub fn restrict(&self, cfg: &HeadConfig, mask: InputMask) -> Result<Self, HeadError> {
        if mask.uses_code() && self.code.is_none() {
            return Err(HeadError::MissingBranch("code"));
        }
        if mask.uses_message() && self.message.is_none() {
            return Err(HeadError::MissingBranch("message"));
        }
        let code_cols = if self.code.is_some() { cfg.num_filters } else { 0 };
        let keep: Vec<usize> = (0..cfg.fused_dim())
            .filter(|&i| if i < code_cols { mask.uses_code() } else { mask.uses_message() })
            .collect();
        let classifier = match &self.classifier {
            Classifier::TwoLayer {
                hidden_weight,
                hidden_bias,
                out_weight,
                out_bias,
            } => Classifier::TwoLayer {
                hidden_weight: hidden_weight.select(Axis(1), &keep),
                hidden_bias: hidden_bias.clone(),
                out_weight: out_weight.clone(),
                out_bias: out_bias.clone(),
            },
            Classifier::Literal { weight, bias } => Classifier::Literal {
                weight: weight.select(Axis(0), &keep),
                bias: bias.clone(),
            },
        };
        Ok(HeadParams {
            code: if mask.uses_code() { self.code.clone() } else { None },
            message: if mask.uses_message() { self.message.clone() } else { None },
            classifier,
        })
    }

    /// Checks tensor shapes against `cfg`.
    pub fn check_shapes(&self, cfg: &HeadConfig) -> Result<(), HeadError> {
        let expect = |what: &str, got: &[usize], want: &[usize]| {
            if got == want {
                Ok(())
            } else {
                Err(HeadError::Shape(format!("{what} is {got:?}, expected {want:?}")))
            }
        };
        match (&self.code, cfg.branches.uses_code()) {
            (Some(c), true) => {
                expect(
                    "filters",
                    c.filters.shape(),
                    &[cfg.num_filters, cfg.window_size, cfg.embedding_dim],
                )?;
                expect("filter bias", c.bias.shape(), &[cfg.num_filters])?;
            }
            (None, false) => {}
            _ => return Err(HeadError::Shape("code branch presence disagrees with config".into())),
        }
        match (&self.message, cfg.branches.uses_message()) {
            (Some(m), true) => {
                expect("message weight", m.weight.shape(), &[cfg.hidden_dim, cfg.embedding_dim])?;
                expect("message bias", m.bias.shape(), &[cfg.hidden_dim])?;
            }
            (None, false) => {}
            _ => {
                return Err(HeadError::Shape(
                    "message branch presence disagrees with config".into(),
                ))
            }
        }
        let z = cfg.fused_dim();
        match (&self.classifier, cfg.classifier) {
            (
                Classifier::TwoLayer {
                    hidden_weight,
                    hidden_bias,
                    out_weight,
                    out_bias,
                },
                ClassifierForm::TwoLayer,
            ) => {
                expect("hidden weight", hidden_weight.shape(), &[cfg.fusion_dim, z])?;
                expect("hidden bias", hidden_bias.shape(), &[cfg.fusion_dim])?;
                expect("out weight", out_weight.shape(), &[cfg.fusion_dim])?;
                expect("out bias", out_bias.shape(), &[1])
            }
            (Classifier::Literal { weight, bias }, ClassifierForm::Literal) => {
                expect("classifier weight", weight.shape(), &[z])?;
                expect("classifier bias", bias.shape(), &[1])
            }
            _ => Err(HeadError::Shape("classifier form disagrees with config".into())),
        }
    }
}

/// Valid convolution of every filter over windows of `k` consecutive patch
/// rows, then ReLU. Returns `K x (|C| - k + 1)`.
pub fn conv_features<F: Scalar>(
    code: ArrayView2<F>,
    branch: &ConvBranch<F>,
) -> Result<Array2<F>, HeadError> {
    let mut x = conv_preactivation(code, branch)?;
    x.mapv_inplace(|v| v.max(F::zero()));
    Ok(x)
}

fn conv_preactivation<F: Scalar>(
    code: ArrayView2<F>,
    branch: &ConvBranch<F>,
) -> Result<Array2<F>, HeadError> {
    let (kk, k, d) = branch.filters.dim();
    let (rows, width) = code.dim();
    if width != d {
        return Err(HeadError::Shape(format!(
            "patch rows have width {width}, filters expect {d}"
        )));
    }
    if rows < k {
        return Err(HeadError::Shape(format!(
            "{rows} patch rows cannot fill a window of {k}"
        )));
    }
    if branch.bias.len() != kk {
        return Err(HeadError::Shape("filter bias length differs from filter count".into()));
    }
    let positions = rows - k + 1;
    let mut out = Array2::zeros((kk, positions));
    for j in 0..kk {
        let filter = branch.filters.index_axis(Axis(0), j);
        for i in 0..positions {
            let window = code.slice(s![i..i + k, ..]);
            let dot: F = filter.iter().zip(window.iter()).map(|(a, b)| *a * *b).sum();
            out[[j, i]] = dot + branch.bias[j];
        }
    }
    Ok(out)
}

fn argmax_rows<F: Scalar>(x: ArrayView2<F>) -> Result<Vec<usize>, HeadError> {
    if x.ncols() == 0 || x.nrows() == 0 {
        return Err(HeadError::EmptyPool);
    }
    Ok(x
        .rows()
        .into_iter()
        .map(|row| {
            // first maximal position wins ties
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

/// Per-filter maximum over positions.
pub fn max_pool<F: Scalar>(x: ArrayView2<F>) -> Result<Array1<F>, HeadError> {
    let idx = argmax_rows(x)?;
    Ok(idx.iter().enumerate().map(|(j, &i)| x[[j, i]]).collect())
}

/// Affine projection of the message vector; no activation.
pub fn message_features<F: Scalar>(
    message: ArrayView1<F>,
    branch: &MessageBranch<F>,
) -> Result<Array1<F>, HeadError> {
    if branch.weight.ncols() != message.len() {
        return Err(HeadError::Shape(format!(
            "message vector has length {}, projection expects {}",
            message.len(),
            branch.weight.ncols()
        )));
    }
    Ok(branch.weight.dot(&message) + &branch.bias)
}

fn concat<F: Scalar>(code: Option<&Array1<F>>, message: Option<&Array1<F>>) -> Array1<F> {
    code.into_iter()
        .chain(message)
        .flat_map(|v| v.iter().copied())
        .collect()
}

struct ClassifierPass<F> {
    pre: Array1<F>,
    hidden: Array1<F>,
    logit: F,
}

fn classify<F: Scalar>(z: ArrayView1<F>, classifier: &Classifier<F>) -> Result<ClassifierPass<F>, HeadError> {
    match classifier {
        Classifier::TwoLayer {
            hidden_weight,
            hidden_bias,
            out_weight,
            out_bias,
        } => {
            if hidden_weight.ncols() != z.len() {
                return Err(HeadError::Shape(format!(
                    "fused vector has length {}, classifier expects {}",
                    z.len(),
                    hidden_weight.ncols()
                )));
            }
            let pre = hidden_weight.dot(&z) + hidden_bias;
            let hidden = pre.mapv(|v| v.max(F::zero()));
            let logit = out_weight.dot(&hidden) + out_bias[0];
            Ok(ClassifierPass { pre, hidden, logit })
        }
        Classifier::Literal { weight, bias } => {
            if weight.len() != z.len() {
                return Err(HeadError::Shape(format!(
                    "fused vector has length {}, classifier expects {}",
                    z.len(),
                    weight.len()
                )));
            }
            let a = weight.dot(&z) + bias[0];
            Ok(ClassifierPass {
                pre: Array1::from_elem(1, a),
                hidden: Array1::zeros(0),
                logit: a.max(F::zero()),
            })
        }
    }
}

/// Concatenates the branch features and maps them to a defect probability.
pub fn fuse_and_classify<F: Scalar>(
    code_features: Option<&Array1<F>>,
    message_features: Option<&Array1<F>>,
    classifier: &Classifier<F>,
) -> Result<F, HeadError> {
    let z = concat(code_features, message_features);
    let pass = classify(z.view(), classifier)?;
    if !pass.logit.is_finite() {
        return Err(HeadError::NonFinite("classifier logit"));
    }
    Ok(sigmoid(pass.logit))
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct HeadTrace<F> {
    conv_pre: Option<Array2<F>>,
    argmax: Vec<usize>,
    /// Fused vector after dropout.
    fused: Array1<F>,
    /// Inverted-dropout multipliers, when dropout was applied.
    dropout: Option<Array1<F>>,
    classifier_pre: Array1<F>,
    classifier_hidden: Array1<F>,
    pub logit: F,
    pub score: F,
    mask: InputMask,
}

impl<F: Scalar> HeadTrace<F> {
    /// Distance from this pass to the nearest non-differentiable point: the
    /// smallest |pre-activation| of any ReLU, or the smallest gap between a
    /// pooled maximum and its runner-up.
    pub fn kink_margin(&self) -> F {
        let mut m = F::infinity();
        if let Some(pre) = &self.conv_pre {
            for v in pre.iter() {
                m = m.min(v.abs());
            }
            for row in pre.rows() {
                let mut top = F::neg_infinity();
                let mut second = F::neg_infinity();
                for v in row.iter().map(|v| v.max(F::zero())) {
                    if v > top {
                        second = top;
                        top = v;
                    } else if v > second {
                        second = v;
                    }
                }
                if top > F::zero() && second.is_finite() {
                    m = m.min(top - second);
                }
            }
        }
        for v in self.classifier_pre.iter() {
            m = m.min(v.abs());
        }
        m
    }
}

/// Full forward pass over one encoded commit. `dropout` carries the rate and
/// RNG for training-mode passes.
pub fn head_forward<F: Scalar>(
    params: &HeadParams<F>,
    encoded: &EncodedCommit<F>,
    mask: InputMask,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<HeadTrace<F>, HeadError> {
    if mask.uses_code() && params.code.is_none() {
        return Err(HeadError::MissingBranch("code"));
    }
    if mask.uses_message() && params.message.is_none() {
        return Err(HeadError::MissingBranch("message"));
    }
    let (conv_pre, argmax, zc) = if mask.uses_code() {
        let branch = params.code.as_ref().expect("checked above");
        let pre = conv_preactivation(encoded.code.view(), branch)?;
        let x = pre.mapv(|v| v.max(F::zero()));
        let idx = argmax_rows(x.view())?;
        let zc: Array1<F> = idx.iter().enumerate().map(|(j, &i)| x[[j, i]]).collect();
        (Some(pre), idx, Some(zc))
    } else {
        (None, Vec::new(), None)
    };
    let zm = if mask.uses_message() {
        Some(message_features(encoded.message.view(), params.message.as_ref().expect("checked above"))?)
    } else {
        None
    };
    let mut fused = concat(zc.as_ref(), zm.as_ref());
    let dropout = match dropout {
        Some((rate, rng)) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let multipliers: Array1<F> = (0..fused.len())
                .map(|_| if rng.gen::<f64>() < keep { cast(1.0 / keep) } else { F::zero() })
                .collect();
            fused = &fused * &multipliers;
            Some(multipliers)
        }
        _ => None,
    };
    let classifier = restricted_classifier(params, mask)?;
    let pass = classify(fused.view(), &classifier)?;
    if !pass.logit.is_finite() {
        return Err(HeadError::NonFinite("classifier logit"));
    }
    Ok(HeadTrace {
        conv_pre,
        argmax,
        fused,
        dropout,
        classifier_pre: pass.pre,
        classifier_hidden: pass.hidden,
        logit: pass.logit,
        score: sigmoid(pass.logit),
        mask,
    })
}

// classifier seen by `mask`: columns of absent inputs are dropped
fn restricted_classifier<F: Scalar>(
    params: &HeadParams<F>,
    mask: InputMask,
) -> Result<std::borrow::Cow<'_, Classifier<F>>, HeadError> {
    let present = InputMask::from_branches(params.code.is_some(), params.message.is_some());
    if present == mask {
        return Ok(std::borrow::Cow::Borrowed(&params.classifier));
    }
    let code_cols = params.code.as_ref().map_or(0, |c| c.bias.len());
    let msg_cols = params.message.as_ref().map_or(0, |m| m.bias.len());
    let keep: Vec<usize> = (0..code_cols + msg_cols)
        .filter(|&i| if i < code_cols { mask.uses_code() } else { mask.uses_message() })
        .collect();
    Ok(std::borrow::Cow::Owned(match &params.classifier {
        Classifier::TwoLayer {
            hidden_weight,
            hidden_bias,
            out_weight,
            out_bias,
        } => Classifier::TwoLayer {
            hidden_weight: hidden_weight.select(Axis(1), &keep),
            hidden_bias: hidden_bias.clone(),
            out_weight: out_weight.clone(),
            out_bias: out_bias.clone(),
        },
        Classifier::Literal { weight, bias } => Classifier::Literal {
            weight: weight.select(Axis(0), &keep),
            bias: bias.clone(),
        },
    }))
}

impl InputMask {
    fn from_branches(code: bool, message: bool) -> InputMask {
        match (code, message) {
            (true, false) => InputMask::CodeOnly,
            (false, true) => InputMask::MessageOnly,
            _ => InputMask::Full,
        }
    }
}

/// Binary cross-entropy of a score given as a logit, optionally weighting
/// the positive class.
pub fn bce_with_logit<F: Scalar>(logit: F, target: F, positive_weight: F) -> F {
    let w = if target > F::zero() { positive_weight } else { F::one() };
    w * (softplus(logit) - target * logit)
}

/// `d bce / d logit`.
pub fn bce_logit_grad<F: Scalar>(logit: F, target: F, positive_weight: F) -> F {
    let w = if target > F::zero() { positive_weight } else { F::one() };
    w * (sigmoid(logit) - target)
}

/// Backpropagates `d loss / d logit` through the head, accumulating
/// parameter gradients into `grads` and returning input gradients.
pub fn head_backward<F: Scalar>(
    params: &HeadParams<F>,
    encoded: &EncodedCommit<F>,
    trace: &HeadTrace<F>,
    grad_logit: F,
    grads: &mut HeadParams<F>,
) -> (Array2<F>, Array1<F>) {
    let mask = trace.mask;
    let present = InputMask::from_branches(params.code.is_some(), params.message.is_some());
    let code_cols = params.code.as_ref().map_or(0, |c| c.bias.len());
    let msg_cols = params.message.as_ref().map_or(0, |m| m.bias.len());
    // classifier columns that saw the fused vector
    let cols: Vec<usize> = (0..code_cols + msg_cols)
        .filter(|&i| if i < code_cols { mask.uses_code() } else { mask.uses_message() })
        .collect();
    debug_assert!(present == mask || cols.len() == trace.fused.len());

    let mut grad_fused = Array1::zeros(trace.fused.len());
    match (&params.classifier, &mut grads.classifier) {
        (
            Classifier::TwoLayer {
                hidden_weight,
                out_weight,
                ..
            },
            Classifier::TwoLayer {
                hidden_weight: g_hw,
                hidden_bias: g_hb,
                out_weight: g_ow,
                out_bias: g_ob,
            },
        ) => {
            g_ob[0] += grad_logit;
            g_ow.scaled_add(grad_logit, &trace.classifier_hidden);
            for (r, pre) in trace.classifier_pre.iter().enumerate() {
                if *pre <= F::zero() {
                    continue;
                }
                let g = grad_logit * out_weight[r];
                g_hb[r] += g;
                for (c, &col) in cols.iter().enumerate() {
                    g_hw[[r, col]] += g * trace.fused[c];
                    grad_fused[c] += g * hidden_weight[[r, col]];
                }
            }
        }
        (Classifier::Literal { weight, .. }, Classifier::Literal { weight: g_w, bias: g_b }) => {
            if trace.classifier_pre[0] > F::zero() {
                g_b[0] += grad_logit;
                for (c, &col) in cols.iter().enumerate() {
                    g_w[col] += grad_logit * trace.fused[c];
                    grad_fused[c] += grad_logit * weight[col];
                }
            }
        }
        _ => unreachable!("gradient buffer mirrors parameter structure"),
    }
    if let Some(mult) = &trace.dropout {
        grad_fused = grad_fused * mult;
    }

    let mut grad_code = Array2::zeros(encoded.code.dim());
    let mut grad_message = Array1::zeros(encoded.message.len());
    let mut offset = 0;
    if mask.uses_code() {
        let branch = params.code.as_ref().expect("forward checked branches");
        let g_branch = grads.code.as_mut().expect("gradient buffer mirrors parameters");
        let pre = trace.conv_pre.as_ref().expect("code branch ran");
        let k = branch.filters.dim().1;
        for (j, &i) in trace.argmax.iter().enumerate() {
            let g = grad_fused[offset + j];
            if pre[[j, i]] <= F::zero() || g == F::zero() {
                continue;
            }
            g_branch.bias[j] += g;
            for r in 0..k {
                for c in 0..encoded.code.ncols() {
                    g_branch.filters[[j, r, c]] += g * encoded.code[[i + r, c]];
                    grad_code[[i + r, c]] += g * branch.filters[[j, r, c]];
                }
            }
        }
        offset += branch.bias.len();
    }
    if mask.uses_message() {
        let branch = params.message.as_ref().expect("forward checked branches");
        let g_branch = grads.message.as_mut().expect("gradient buffer mirrors parameters");
        let g_zm = grad_fused.slice(s![offset..]);
        g_branch.bias += &g_zm;
        for (r, g) in g_zm.iter().enumerate() {
            if *g == F::zero() {
                continue;
            }
            let mut row = g_branch.weight.row_mut(r);
            row.scaled_add(*g, &encoded.message);
            grad_message.scaled_add(*g, &branch.weight.row(r));
        }
    }
    (grad_code, grad_message)
}
