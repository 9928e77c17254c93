//! Parameter-efficient fine-tuning methods.
//!
//! Every method except full fine-tuning freezes the backbone and trains the
//! classification head plus a small increment attached to the query and
//! value projections of each encoder block:
//!
//! | method        | trained besides the head              | ΔW per site            |
//! |---------------|---------------------------------------|------------------------|
//! | linear probe  | nothing                               | none                   |
//! | BitFit        | query/value biases                    | none                   |
//! | LoRA, LoRA+   | `A ∈ R^{r×q}`, `B ∈ R^{p×r}`          | `(α/r)·B A`            |
//! | KronA, KronA+ | `A ∈ R^{r1×r2}`, `B ∈ R^{p/r1×q/r2}`  | `s·(A ⊗ B)`            |
//! | LoKr          | `C ∈ R^{up×uq}`, `A ∈ R^{r×vq}`, `B ∈ R^{vp×r}` | `γ·(C ⊗ B A)` |
//!
//! The "+" variants share the layout of their base method; they differ
//! only in the learning rate given to `B` (see [`crate::optim`]).
//!
//! `B` is the zero-initialized factor in every method, so a freshly attached
//! adapter leaves the model output unchanged.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, VitModel};
use crate::nn::Param;
use crate::tensor::{gemm, kron, kron_rows_backward, kron_rows_forward, mm, MatRef, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    LinearProbe,
    BitFit,
    Lora,
    LoraPlus,
    Krona,
    KronaPlus,
    Lokr,
    Full,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::LinearProbe,
        Method::BitFit,
        Method::Lora,
        Method::LoraPlus,
        Method::Krona,
        Method::KronaPlus,
        Method::Lokr,
        Method::Full,
    ];

    /// The seven parameter-efficient methods, without full fine-tuning.
    pub const PEFT: [Method; 7] = [
        Method::LinearProbe,
        Method::BitFit,
        Method::Lora,
        Method::LoraPlus,
        Method::Lokr,
        Method::Krona,
        Method::KronaPlus,
    ];

    /// Method byte in checkpoint headers. Full-model files use 255.
    pub fn id(self) -> u8 {
        match self {
            Method::LinearProbe => 0,
            Method::BitFit => 1,
            Method::Lora => 2,
            Method::LoraPlus => 3,
            Method::Krona => 4,
            Method::KronaPlus => 5,
            Method::Lokr => 6,
            Method::Full => FULL_MODEL_ID,
        }
    }

    pub fn from_id(id: u8) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.id() == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::LinearProbe => "lp",
            Method::BitFit => "bitfit",
            Method::Lora => "lora",
            Method::LoraPlus => "lora+",
            Method::Krona => "krona",
            Method::KronaPlus => "krona+",
            Method::Lokr => "lokr",
            Method::Full => "fft",
        }
    }

    /// Whether `B` factors train at `λ·η`.
    pub fn is_plus(self) -> bool {
        matches!(self, Method::LoraPlus | Method::KronaPlus)
    }

    /// The method whose adapter layout this one uses.
    pub fn layout(self) -> Method {
        match self {
            Method::LoraPlus => Method::Lora,
            Method::KronaPlus => Method::Krona,
            m => m,
        }
    }

    pub fn has_delta(self) -> bool {
        matches!(self.layout(), Method::Lora | Method::Krona | Method::Lokr)
    }

    /// Trainability of a parameter of the given kind under this method.
    pub fn trains(self, kind: ParamKind) -> bool {
        match (self, kind) {
            (_, ParamKind::Head) => true,
            (Method::Full, _) => true,
            (Method::BitFit, ParamKind::QueryBias | ParamKind::ValueBias) => true,
            (_, ParamKind::AdapterA | ParamKind::AdapterB | ParamKind::AdapterC) => true,
            _ => false,
        }
    }
}

pub const FULL_MODEL_ID: u8 = 255;

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "lp" | "linear-probe" | "linear_probe" => Method::LinearProbe,
            "bitfit" => Method::BitFit,
            "lora" => Method::Lora,
            "lora+" | "lora-plus" | "loraplus" => Method::LoraPlus,
            "krona" => Method::Krona,
            "krona+" | "krona-plus" | "kronaplus" => Method::KronaPlus,
            "lokr" => Method::Lokr,
            "fft" | "full" => Method::Full,
            other => return Err(Error::Config(format!("unknown method `{other}`"))),
        })
    }
}

/// Role of a parameter, used for freezing and optimizer grouping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Base,
    QueryBias,
    ValueBias,
    Head,
    AdapterA,
    AdapterB,
    AdapterC,
}

impl ParamKind {
    pub fn is_adapter(self) -> bool {
        matches!(self, ParamKind::AdapterA | ParamKind::AdapterB | ParamKind::AdapterC)
    }
}

/// Method choice plus every hyperparameter the adapters need.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSpec {
    pub method: Method,
    pub rank: usize,
    pub alpha: f64,
    /// Shape of the KronA left factor; `None` resolves to `(d/2, 2)`.
    pub krona_shape: Option<(usize, usize)>,
    pub krona_scale: f64,
    pub lokr_factor: usize,
    pub lokr_rank: usize,
    pub lokr_scale: f64,
    pub lambda: f64,
    pub init_std: f64,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        AdapterSpec {
            method: Method::Lora,
            rank: 4,
            alpha: 4.0,
            krona_shape: None,
            krona_scale: 1.0,
            lokr_factor: 8,
            lokr_rank: 8,
            lokr_scale: 1.0,
            lambda: 1.0,
            init_std: 0.02,
        }
    }
}

/// Factor shapes of one adapter site.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SiteShapes {
    LowRank { a: [usize; 2], b: [usize; 2] },
    Kron { a: [usize; 2], b: [usize; 2] },
    LowRankKron { a: [usize; 2], b: [usize; 2], c: [usize; 2] },
}

impl SiteShapes {
    pub fn factors(&self) -> Vec<(&'static str, ParamKind, [usize; 2])> {
        match *self {
            SiteShapes::LowRank { a, b } | SiteShapes::Kron { a, b } => {
                vec![("A", ParamKind::AdapterA, a), ("B", ParamKind::AdapterB, b)]
            }
            SiteShapes::LowRankKron { a, b, c } => vec![
                ("A", ParamKind::AdapterA, a),
                ("B", ParamKind::AdapterB, b),
                ("C", ParamKind::AdapterC, c),
            ],
        }
    }

    pub fn param_count(&self) -> usize {
        self.factors().iter().map(|(_, _, s)| s[0] * s[1]).sum()
    }
}

impl AdapterSpec {
    pub fn new(method: Method) -> Self {
        AdapterSpec {
            method,
            ..Default::default()
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
            }
        };
        if self.rank == 0 || self.lokr_rank == 0 || self.lokr_factor == 0 {
            return Err(Error::Config("ranks and the LoKr factor must be at least 1".into()));
        }
        positive("alpha", self.alpha)?;
        positive("krona_scale", self.krona_scale)?;
        positive("lokr_scale", self.lokr_scale)?;
        positive("init_std", self.init_std)?;
        if !(self.lambda.is_finite() && self.lambda >= 1.0) {
            return Err(Error::Config(format!("lambda must be >= 1, got {}", self.lambda)));
        }
        if let Some((r1, r2)) = self.krona_shape {
            if r1 == 0 || r2 == 0 {
                return Err(Error::Config("KronA factor dimensions must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn lora_scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn resolved_krona_shape(&self, d: usize) -> (usize, usize) {
        self.krona_shape.unwrap_or((d / 2, 2))
    }

    /// Factor shapes for a `p × q` target weight, or `None` for methods
    /// without a weight increment.
    pub fn site_shapes(&self, p: usize, q: usize) -> Result<Option<SiteShapes>> {
        Ok(match self.method.layout() {
            Method::Lora => Some(SiteShapes::LowRank {
                a: [self.rank, q],
                b: [p, self.rank],
            }),
            Method::Krona => {
                let (r1, r2) = self.resolved_krona_shape(p);
                if r1 == 0 || r2 == 0 || p % r1 != 0 || q % r2 != 0 {
                    return Err(Error::Config(format!(
                        "KronA factor ({r1},{r2}) does not tile a {p}x{q} weight"
                    )));
                }
                Some(SiteShapes::Kron {
                    a: [r1, r2],
                    b: [p / r1, q / r2],
                })
            }
            Method::Lokr => {
                let (up, vp, uq, vq) = lokr_factorize(p, q, self.lokr_factor);
                Some(SiteShapes::LowRankKron {
                    a: [self.lokr_rank, vq],
                    b: [vp, self.lokr_rank],
                    c: [up, uq],
                })
            }
            _ => None,
        })
    }

    /// Canonical `key = value` text stored in checkpoint headers.
    pub fn to_canonical(&self) -> String {
        let krona = match self.krona_shape {
            Some((r1, r2)) => format!("{r1}x{r2}"),
            None => "auto".to_string(),
        };
        format!(
            "method = {}\nrank = {}\nalpha = {}\nkrona_shape = {}\nkrona_scale = {}\nlokr_factor = {}\nlokr_rank = {}\nlokr_scale = {}\nlambda = {}\ninit_std = {}\n",
            self.method,
            self.rank,
            self.alpha,
            krona,
            self.krona_scale,
            self.lokr_factor,
            self.lokr_rank,
            self.lokr_scale,
            self.lambda,
            self.init_std
        )
    }

    /// Sets one field from its text key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &dyn fmt::Display| Error::Config(format!("{key} = {value}: {e}"));
        match key {
            "method" => self.method = value.parse()?,
            "rank" => self.rank = value.parse().map_err(|e| bad(&e))?,
            "alpha" => self.alpha = value.parse().map_err(|e| bad(&e))?,
            "krona_shape" => {
                self.krona_shape = if value == "auto" {
                    None
                } else {
                    let (a, b) = value
                        .split_once(['x', ','])
                        .ok_or_else(|| bad(&"expected RxC"))?;
                    Some((
                        a.trim().parse().map_err(|e| bad(&e))?,
                        b.trim().parse().map_err(|e| bad(&e))?,
                    ))
                }
            }
            "krona_scale" => self.krona_scale = value.parse().map_err(|e| bad(&e))?,
            "lokr_factor" => self.lokr_factor = value.parse().map_err(|e| bad(&e))?,
            "lokr_rank" => self.lokr_rank = value.parse().map_err(|e| bad(&e))?,
            "lokr_scale" => self.lokr_scale = value.parse().map_err(|e| bad(&e))?,
            "lambda" => self.lambda = value.parse().map_err(|e| bad(&e))?,
            "init_std" => self.init_std = value.parse().map_err(|e| bad(&e))?,
            _ => return Err(Error::Config(format!("unknown adapter key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_canonical(text: &str) -> Result<Self> {
        let mut spec = AdapterSpec::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed spec line `{line}`")))?;
            spec.set(k.trim(), v.trim())?;
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Block sizes for LoKr: `u` is the largest divisor of the dimension not
/// exceeding `min(f, √dim)`, and `v = dim / u`. Returns `(u_p, v_p, u_q, v_q)`.
pub fn lokr_factorize(p: usize, q: usize, f: usize) -> (usize, usize, usize, usize) {
    let split = |n: usize| {
        let mut u = 1;
        for cand in 1..=f.min(n) {
            if cand * cand > n {
                break;
            }
            if n % cand == 0 {
                u = cand;
            }
        }
        (u, n / u)
    };
    let (up, vp) = split(p);
    let (uq, vq) = split(q);
    (up, vp, uq, vq)
}

/// Trainable increment on one projection.
#[derive(Clone, Debug)]
pub enum SiteAdapter<T: Scalar> {
    /// `(α/r)·B A`
    LowRank { a: Param<T>, b: Param<T>, scale: T },
    /// `s·(A ⊗ B)`
    Kron { a: Param<T>, b: Param<T>, scale: T },
    /// `γ·(C ⊗ B A)`
    LowRankKron { c: Param<T>, a: Param<T>, b: Param<T>, scale: T },
}

#[derive(Clone, Debug)]
pub enum SiteCache<T: Scalar> {
    LowRank { h: Vec<T> },
    Kron { z: Vec<T> },
    LowRankKron { right: Tensor<T>, z: Vec<T> },
}

fn scale_in_place<T: Scalar>(v: &mut [T], s: T) {
    if s != T::one() {
        v.iter_mut().for_each(|x| *x = *x * s);
    }
}

impl<T: Scalar> SiteAdapter<T> {
    /// Builds the adapter for `shapes`, drawing the non-zero factors from
    /// `N(0, init_std²)`.
    pub fn init(spec: &AdapterSpec, shapes: &SiteShapes, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, spec.init_std).expect("validated std");
        let mut gauss = |s: [usize; 2]| Param::new(Tensor::from_fn(&s, |_| T::lit(normal.sample(rng))));
        let zeros = |s: [usize; 2]| Param::new(Tensor::zeros(&s));
        match *shapes {
            SiteShapes::LowRank { a, b } => SiteAdapter::LowRank {
                a: gauss(a),
                b: zeros(b),
                scale: T::lit(spec.lora_scale()),
            },
            SiteShapes::Kron { a, b } => SiteAdapter::Kron {
                a: gauss(a),
                b: zeros(b),
                scale: T::lit(spec.krona_scale),
            },
            SiteShapes::LowRankKron { a, b, c } => {
                let c = gauss(c);
                SiteAdapter::LowRankKron {
                    c,
                    a: gauss(a),
                    b: zeros(b),
                    scale: T::lit(spec.lokr_scale),
                }
            }
        }
    }

    pub fn shapes(&self) -> SiteShapes {
        let s = |p: &Param<T>| [p.value.shape()[0], p.value.shape()[1]];
        match self {
            SiteAdapter::LowRank { a, b, .. } => SiteShapes::LowRank { a: s(a), b: s(b) },
            SiteAdapter::Kron { a, b, .. } => SiteShapes::Kron { a: s(a), b: s(b) },
            SiteAdapter::LowRankKron { c, a, b, .. } => SiteShapes::LowRankKron {
                a: s(a),
                b: s(b),
                c: s(c),
            },
        }
    }

    /// Output and input widths `(p, q)` of the target weight.
    pub fn target_shape(&self) -> (usize, usize) {
        match self {
            SiteAdapter::LowRank { a, b, .. } => (b.value.rows(), a.value.cols()),
            SiteAdapter::Kron { a, b, .. } => (
                a.value.rows() * b.value.rows(),
                a.value.cols() * b.value.cols(),
            ),
            SiteAdapter::LowRankKron { c, a, b, .. } => (
                c.value.rows() * b.value.rows(),
                c.value.cols() * a.value.cols(),
            ),
        }
    }

    /// Factors in record order with their names and kinds.
    pub fn factors(&self) -> Vec<(&'static str, ParamKind, &Param<T>)> {
        match self {
            SiteAdapter::LowRank { a, b, .. } | SiteAdapter::Kron { a, b, .. } => {
                vec![("A", ParamKind::AdapterA, a), ("B", ParamKind::AdapterB, b)]
            }
            SiteAdapter::LowRankKron { c, a, b, .. } => vec![
                ("A", ParamKind::AdapterA, a),
                ("B", ParamKind::AdapterB, b),
                ("C", ParamKind::AdapterC, c),
            ],
        }
    }

    pub fn factors_mut(&mut self) -> Vec<(&'static str, ParamKind, &mut Param<T>)> {
        match self {
            SiteAdapter::LowRank { a, b, .. } | SiteAdapter::Kron { a, b, .. } => {
                vec![("A", ParamKind::AdapterA, a), ("B", ParamKind::AdapterB, b)]
            }
            SiteAdapter::LowRankKron { c, a, b, .. } => vec![
                ("A", ParamKind::AdapterA, a),
                ("B", ParamKind::AdapterB, b),
                ("C", ParamKind::AdapterC, c),
            ],
        }
    }

    /// ΔW·x for each of `rows` inputs, computed from the factors.
    pub(crate) fn forward_rows(&self, x: &[T], rows: usize) -> Result<(Vec<T>, SiteCache<T>)> {
        let (_, q) = self.target_shape();
        if x.len() != rows * q {
            return Err(Error::shape(
                "adapter_forward",
                format!("{} values for {rows} rows of width {q}", x.len()),
            ));
        }
        Ok(match self {
            SiteAdapter::LowRank { a, b, scale } => {
                let h = mm(MatRef::new(x, rows, q), a.value.mat().t());
                let mut y = mm(MatRef::new(&h, rows, a.value.rows()), b.value.mat().t());
                scale_in_place(&mut y, *scale);
                (y, SiteCache::LowRank { h })
            }
            SiteAdapter::Kron { a, b, scale } => {
                let (mut y, z) = kron_rows_forward(&a.value, &b.value, x, rows);
                scale_in_place(&mut y, *scale);
                (y, SiteCache::Kron { z })
            }
            SiteAdapter::LowRankKron { c, a, b, scale } => {
                let right = b.value.matmul(&a.value)?;
                let (mut y, z) = kron_rows_forward(&c.value, &right, x, rows);
                scale_in_place(&mut y, *scale);
                (y, SiteCache::LowRankKron { right, z })
            }
        })
    }

    /// Accumulates factor gradients and returns `d loss / d x`.
    pub(crate) fn backward_rows(&mut self, cache: &SiteCache<T>, x: &[T], dy: &[T], rows: usize) -> Vec<T> {
        match (self, cache) {
            (SiteAdapter::LowRank { a, b, scale }, SiteCache::LowRank { h }) => {
                let r = a.value.rows();
                let (p, q) = (b.value.rows(), a.value.cols());
                let dym = MatRef::new(dy, rows, p);
                // dB = s·dYᵀ h, dH = s·dY B, dA = dHᵀ x, dX = dH A
                if b.trainable {
                    gemm(*scale, dym.t(), MatRef::new(h, rows, r), T::one(), b.grad.data_mut());
                }
                let mut dh = mm(dym, b.value.mat());
                scale_in_place(&mut dh, *scale);
                let dhm = MatRef::new(&dh, rows, r);
                if a.trainable {
                    gemm(T::one(), dhm.t(), MatRef::new(x, rows, q), T::one(), a.grad.data_mut());
                }
                mm(dhm, a.value.mat())
            }
            (SiteAdapter::Kron { a, b, scale }, SiteCache::Kron { z }) => {
                let (mut da, mut db, mut dx) = kron_rows_backward(&a.value, &b.value, x, z, dy, rows);
                scale_in_place(&mut da, *scale);
                scale_in_place(&mut db, *scale);
                scale_in_place(&mut dx, *scale);
                a.accumulate(&da);
                b.accumulate(&db);
                dx
            }
            (SiteAdapter::LowRankKron { c, a, b, scale }, SiteCache::LowRankKron { right, z }) => {
                let (mut dc, mut dright, mut dx) = kron_rows_backward(&c.value, right, x, z, dy, rows);
                scale_in_place(&mut dc, *scale);
                scale_in_place(&mut dright, *scale);
                scale_in_place(&mut dx, *scale);
                c.accumulate(&dc);
                let dm = MatRef::new(&dright, right.rows(), right.cols());
                // right = B A: dB = dR Aᵀ, dA = Bᵀ dR
                if b.trainable {
                    gemm(T::one(), dm, a.value.mat().t(), T::one(), b.grad.data_mut());
                }
                if a.trainable {
                    gemm(T::one(), b.value.mat().t(), dm, T::one(), a.grad.data_mut());
                }
                dx
            }
            _ => unreachable!("adapter cache variant does not match adapter"),
        }
    }

    /// Materialized `p × q` weight increment.
    pub fn delta_weight(&self) -> Result<Tensor<T>> {
        match self {
            SiteAdapter::LowRank { a, b, scale } => Ok(b.value.matmul(&a.value)?.scale(*scale)),
            SiteAdapter::Kron { a, b, scale } => Ok(kron(&a.value, &b.value)?.scale(*scale)),
            SiteAdapter::LowRankKron { c, a, b, scale } => {
                Ok(kron(&c.value, &b.value.matmul(&a.value)?)?.scale(*scale))
            }
        }
    }

    /// Single-vector form of the forward delta.
    pub fn forward_delta(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (p, _) = self.target_shape();
        let (y, _) = self.forward_rows(x.data(), 1)?;
        Tensor::new(&[p], y)
    }
}

/// One entry in the parameter inventory of a configured model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub trainable: bool,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The full parameter inventory of `config` with `spec` attached, derived
/// from shapes alone. Matches [`VitModel::param_infos`] entry for entry.
pub fn inventory(config: &ModelConfig, spec: &AdapterSpec) -> Result<Vec<ParamInfo>> {
    spec.validate()?;
    config.validate()?;
    let d = config.embed_dim;
    let site = spec.site_shapes(d, d)?;
    let mut out = Vec::new();
    for (name, shape, kind) in config.base_layout() {
        out.push(ParamInfo {
            trainable: spec.method.trains(kind),
            name,
            shape,
            kind,
        });
        // Site factors follow the bias of their projection.
        if let Some(shapes) = &site {
            let last = &out.last().unwrap().name;
            let proj = if last.ends_with("attn.q.bias") {
                Some("q")
            } else if last.ends_with("attn.v.bias") {
                Some("v")
            } else {
                None
            };
            if let Some(proj) = proj {
                let layer = last.split('.').next().unwrap().to_string();
                for (fname, kind, s) in shapes.factors() {
                    out.push(ParamInfo {
                        name: format!("{layer}.{proj}.{fname}"),
                        shape: s.to_vec(),
                        kind,
                        trainable: true,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Number of trainable scalars for `spec` on `config`.
pub fn count_trainable_params(config: &ModelConfig, spec: &AdapterSpec) -> Result<usize> {
    Ok(inventory(config, spec)?
        .iter()
        .filter(|p| p.trainable)
        .map(ParamInfo::len)
        .sum())
}

/// Bytes needed to persist the trainable increment at 4 bytes per scalar.
pub fn adapter_storage_bytes(config: &ModelConfig, spec: &AdapterSpec, include_head: bool) -> Result<usize> {
    Ok(inventory(config, spec)?
        .iter()
        .filter(|p| p.trainable && (include_head || p.kind != ParamKind::Head))
        .map(ParamInfo::len)
        .sum::<usize>()
        * 4)
}

pub fn bytes_to_mb(bytes: usize) -> f64 {
    bytes as f64 / 1e6
}

pub fn bytes_to_mib(bytes: usize) -> f64 {
    bytes as f64 / (1024.0 * 1024.0)
}

/// Attaches `spec` to every encoder block's query and value projections and
/// sets trainability for the method. Factor initialization draws from a
/// generator seeded with `seed`.
pub fn attach<T: Scalar>(model: &mut VitModel<T>, spec: &AdapterSpec, seed: u64) -> Result<()> {
    spec.validate()?;
    if model.adapter_spec().is_some() {
        return Err(Error::Config("adapters are already attached to this model".into()));
    }
    if model.is_fused() {
        return Err(Error::Config("cannot attach adapters to a fused model".into()));
    }
    let d = model.config().embed_dim;
    let site = spec.site_shapes(d, d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if let Some(shapes) = &site {
        for block in model.blocks_mut() {
            block.attn.q_adapter = Some(SiteAdapter::init(spec, shapes, &mut rng));
            block.attn.v_adapter = Some(SiteAdapter::init(spec, shapes, &mut rng));
        }
    }
    model.set_trainability(spec.method);
    model.set_adapter_spec(Some(spec.clone()));
    Ok(())
}

/// Folds every site's ΔW into its base weight and removes the adapters.
/// The forward function is unchanged up to rounding.
pub fn fuse<T: Scalar>(model: &mut VitModel<T>) -> Result<()> {
    if model.is_fused() {
        return Err(Error::Config("adapters were already fused into this model".into()));
    }
    let spec = model
        .adapter_spec()
        .cloned()
        .ok_or_else(|| Error::Config("no adapters attached".into()))?;
    match spec.method {
        Method::LinearProbe | Method::Full => {
            return Err(Error::Config(format!(
                "method {} has no weight increment to fuse",
                spec.method
            )))
        }
        _ => {}
    }
    for block in model.blocks_mut() {
        let attn = &mut block.attn;
        if let Some(site) = attn.q_adapter.take() {
            attn.q_proj.weight.value.add_assign(&site.delta_weight()?)?;
        }
        if let Some(site) = attn.v_adapter.take() {
            attn.v_proj.weight.value.add_assign(&site.delta_weight()?)?;
        }
    }
    model.mark_fused();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_site(spec: &AdapterSpec, p: usize, q: usize, rng: &mut ChaCha8Rng) -> SiteAdapter<f64> {
        let shapes = spec.site_shapes(p, q).unwrap().unwrap();
        let mut site = SiteAdapter::<f64>::init(spec, &shapes, rng);
        for (_, _, p) in site.factors_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        site
    }

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(&[n], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn lokr_factorize_examples() {
        assert_eq!(lokr_factorize(768, 768, 8), (8, 96, 8, 96));
        assert_eq!(lokr_factorize(7, 7, 8), (1, 7, 1, 7));
        assert_eq!(lokr_factorize(36, 36, 5), (4, 9, 4, 9));
        assert_eq!(lokr_factorize(1, 12, 3), (1, 1, 3, 4));
    }

    #[test]
    fn zero_b_gives_zero_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for method in [Method::Lora, Method::Krona, Method::Lokr] {
            let spec = AdapterSpec {
                krona_shape: Some((2, 2)),
                lokr_factor: 2,
                lokr_rank: 2,
                rank: 2,
                ..AdapterSpec::new(method)
            };
            let shapes = spec.site_shapes(8, 8).unwrap().unwrap();
            let site = SiteAdapter::<f64>::init(&spec, &shapes, &mut rng);
            let y = site.forward_delta(&random_vec(8, &mut rng)).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.0), "{method}");
            assert_eq!(site.delta_weight().unwrap().max_abs(), 0.0);
        }
    }

    #[test]
    fn lora_unit_scale_is_plain_product() {
        let spec = AdapterSpec::default();
        assert_eq!(spec.lora_scale(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let site = random_site(&AdapterSpec { rank: 2, alpha: 2.0, ..spec }, 4, 4, &mut rng);
        let x = random_vec(4, &mut rng);
        let SiteAdapter::LowRank { a, b, .. } = &site else { panic!() };
        let want = b.value.matmul(&a.value.matmul(&x).unwrap()).unwrap();
        let got = site.forward_delta(&x).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-6 * want.max_abs());
    }

    #[test]
    fn lora_matches_materialized() {
        let spec = AdapterSpec { rank: 2, alpha: 3.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let site = random_site(&spec, 4, 4, &mut rng);
        let x = random_vec(4, &mut rng);
        let SiteAdapter::LowRank { a, b, .. } = &site else { panic!() };
        // (α/r)·(BA)x
        let want = b.value.matmul(&a.value).unwrap().scale(1.5).matmul(&x).unwrap();
        assert!(site.forward_delta(&x).unwrap().max_abs_diff(&want).unwrap() <= 1e-6 * want.max_abs());
    }

    #[test]
    fn krona_matches_materialized() {
        let spec = AdapterSpec {
            krona_shape: Some((2, 2)),
            ..AdapterSpec::new(Method::Krona)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let site = random_site(&spec, 6, 6, &mut rng);
        let SiteAdapter::Kron { a, b, .. } = &site else { panic!() };
        assert_eq!(b.value.shape(), &[3, 3]);
        let x = random_vec(6, &mut rng);
        let want = kron(&a.value, &b.value).unwrap().matmul(&x).unwrap();
        assert!(site.forward_delta(&x).unwrap().max_abs_diff(&want).unwrap() <= 1e-6 * want.max_abs());
    }

    #[test]
    fn lokr_degenerate_scalar_block() {
        // p = q = 7 forces u = 1, so C is 1×1.
        let spec = AdapterSpec {
            lokr_rank: 2,
            ..AdapterSpec::new(Method::Lokr)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut site = random_site(&spec, 7, 7, &mut rng);
        let SiteAdapter::LowRankKron { c, a, b, .. } = &mut site else { panic!() };
        assert_eq!(c.value.shape(), &[1, 1]);
        c.value.data_mut()[0] = 1.0;
        let ba = b.value.matmul(&a.value).unwrap();
        let x = random_vec(7, &mut rng);
        let want = ba.matmul(&x).unwrap();
        assert!(site.forward_delta(&x).unwrap().max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn lokr_matches_materialized() {
        let spec = AdapterSpec {
            lokr_factor: 3,
            lokr_rank: 2,
            lokr_scale: 0.7,
            ..AdapterSpec::new(Method::Lokr)
        };
        let shapes = spec.site_shapes(12, 12).unwrap().unwrap();
        assert_eq!(
            shapes,
            SiteShapes::LowRankKron { a: [2, 4], b: [4, 2], c: [3, 3] }
        );
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let site = random_site(&spec, 12, 12, &mut rng);
        let SiteAdapter::LowRankKron { c, a, b, .. } = &site else { panic!() };
        let x = random_vec(12, &mut rng);
        let dw = kron(&c.value, &b.value.matmul(&a.value).unwrap()).unwrap().scale(0.7);
        let want = dw.matmul(&x).unwrap();
        assert!(site.forward_delta(&x).unwrap().max_abs_diff(&want).unwrap() <= 1e-6 * want.max_abs());
    }

    #[test]
    fn site_backward_matches_finite_differences() {
        use crate::gradcheck::{central_difference, rel_err};
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let specs = [
            AdapterSpec { rank: 2, alpha: 3.0, ..AdapterSpec::new(Method::Lora) },
            AdapterSpec { krona_shape: Some((3, 2)), krona_scale: 0.5, ..AdapterSpec::new(Method::Krona) },
            AdapterSpec { lokr_factor: 3, lokr_rank: 2, lokr_scale: 1.3, ..AdapterSpec::new(Method::Lokr) },
        ];
        for spec in specs {
            let mut site = random_site(&spec, 6, 12, &mut rng);
            let rows = 3;
            let x: Vec<f64> = (0..rows * 12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..rows * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let objective = |s: &SiteAdapter<f64>, xv: &[f64]| -> f64 {
                let (y, _) = s.forward_rows(xv, rows).unwrap();
                y.iter().zip(&w).map(|(a, b)| a * b).sum()
            };
            let base = site.clone();
            let (_, cache) = site.forward_rows(&x, rows).unwrap();
            let dx = site.backward_rows(&cache, &x, &w, rows);
            let numeric = central_difference(&x, 1e-5, |xv| objective(&base, xv));
            for (a, n) in dx.iter().zip(&numeric) {
                assert!(rel_err(*a, *n) <= 1e-6, "{:?} dx {a} vs {n}", spec.method);
            }
            for (idx, (name, _, p)) in site.factors().into_iter().enumerate() {
                let numeric = central_difference(base.factors()[idx].2.value.data(), 1e-5, |pv| {
                    let mut s = base.clone();
                    s.factors_mut()[idx].2.value.data_mut().copy_from_slice(pv);
                    objective(&s, &x)
                });
                for (a, n) in p.grad.data().iter().zip(&numeric) {
                    assert!(rel_err(*a, *n) <= 1e-6, "{:?} d{name} {a} vs {n}", spec.method);
                }
            }
        }
    }

    #[test]
    fn krona_shape_must_tile() {
        let spec = AdapterSpec {
            krona_shape: Some((5, 2)),
            ..AdapterSpec::new(Method::Krona)
        };
        assert!(matches!(spec.site_shapes(768, 768), Err(Error::Config(_))));
    }

    #[test]
    fn spec_canonical_round_trip() {
        let spec = AdapterSpec {
            method: Method::KronaPlus,
            krona_shape: Some((24, 32)),
            lambda: 8.0,
            ..Default::default()
        };
        assert_eq!(AdapterSpec::from_canonical(&spec.to_canonical()).unwrap(), spec);
        assert!(AdapterSpec::from_canonical("bogus = 1").is_err());
    }

    #[test]
    fn lambda_below_one_rejected() {
        assert!(AdapterSpec::new(Method::LoraPlus).with_lambda(0.5).validate().is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(Method::from_id(m.id()), Some(m));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn lokr_blocks_multiply_back(p in 1usize..5000, q in 1usize..5000, f in 1usize..65) {
                let (up, vp, uq, vq) = lokr_factorize(p, q, f);
                prop_assert_eq!(up * vp, p);
                prop_assert_eq!(uq * vq, q);
                prop_assert!(up <= f && up * up <= p);
            }
        }
    }
}
