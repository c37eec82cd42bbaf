//! Kernel-level quantization of one conv layer and the adaptive codebook
//! sizing search run layer by layer over a model.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::io::Write;
use std::process::Command;

use crate::clustering::{kmeans, point_key, Algorithm, Clustering, KMeansOptions, PointSet};
use crate::error::{Error, Result};
use crate::kernel::{from_assignments, to_kernel_matrix, KernelMatrix};
use crate::tensor::{ModelArchive, WeightTensor};

/// Side length of the kernels that are quantized at kernel level.
pub const KERNEL_SIDE: usize = 3;
/// Smallest codebook the search will probe.
pub const MIN_PROBE_SIZE: usize = 2;

/// `k` representative kernels plus the entry index of every kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelCodebook {
    omega_sq: usize,
    entries: Vec<f32>,
    assignment: Vec<u32>,
    appearance: Vec<u64>,
}

impl KernelCodebook {
    pub fn new(omega_sq: usize, entries: Vec<f32>, assignment: Vec<u32>) -> Result<Self> {
        if omega_sq == 0 || entries.is_empty() || !entries.len().is_multiple_of(omega_sq) {
            return Err(Error::Shape(format!(
                "{} entry values do not form a non-empty codebook of {omega_sq}-D entries",
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite codebook value".into()));
        }
        let k = entries.len() / omega_sq;
        let mut appearance = vec![0u64; k];
        for (position, &a) in assignment.iter().enumerate() {
            match appearance.get_mut(a as usize) {
                Some(z) => *z += 1,
                None => {
                    return Err(Error::IndexOutOfRange {
                        layer: String::new(),
                        position,
                        value: a as u64,
                        limit: k as u64,
                    })
                }
            }
        }
        Ok(KernelCodebook {
            omega_sq,
            entries,
            assignment,
            appearance,
        })
    }

    pub fn omega_sq(&self) -> usize {
        self.omega_sq
    }

    /// Number of entries.
    pub fn k(&self) -> usize {
        self.entries.len() / self.omega_sq
    }

    /// Number of kernels mapped through the codebook.
    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn entry(&self, i: usize) -> &[f32] {
        &self.entries[i * self.omega_sq..(i + 1) * self.omega_sq]
    }

    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    /// How many kernels use each entry.
    pub fn appearance(&self) -> &[u64] {
        &self.appearance
    }

    /// Same assignment with new entry values.
    pub fn with_entries(&self, entries: Vec<f32>) -> Result<Self> {
        if entries.len() != self.entries.len() {
            return Err(Error::Shape(format!(
                "replacement codebook has {} values, expected {}",
                entries.len(),
                self.entries.len()
            )));
        }
        Self::new(self.omega_sq, entries, self.assignment.clone())
    }

    /// Sorts entries lexicographically and remaps the assignment, so equal
    /// entry sets always serialize identically.
    pub fn canonical(self) -> Self {
        let d = self.omega_sq;
        let mut order: Vec<usize> = (0..self.k()).collect();
        order.sort_by(|&a, &b| lex_cmp(self.entry(a), self.entry(b)));
        let mut remap = vec![0u32; order.len()];
        let mut entries = Vec::with_capacity(self.entries.len());
        let mut appearance = Vec::with_capacity(order.len());
        for (new, &old) in order.iter().enumerate() {
            remap[old] = new as u32;
            entries.extend_from_slice(&self.entries[old * d..(old + 1) * d]);
            appearance.push(self.appearance[old]);
        }
        let assignment = self.assignment.iter().map(|&a| remap[a as usize]).collect();
        KernelCodebook {
            omega_sq: d,
            entries,
            assignment,
            appearance,
        }
    }
}

fn lex_cmp(a: &[f32], b: &[f32]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Clustering controls for kernel quantization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizeOptions {
    pub seed: u64,
    pub kmeans: KMeansOptions,
    pub algorithm: Algorithm,
}

impl Default for QuantizeOptions {
    fn default() -> Self {
        QuantizeOptions {
            seed: 0,
            kmeans: KMeansOptions::default(),
            algorithm: Algorithm::Yinyang,
        }
    }
}

/// Seed for one clustering run, a function of the run seed, the layer and
/// the codebook size only.
pub fn derive_seed(base: u64, layer_index: usize, size: usize) -> u64 {
    let mut s = splitmix(base ^ 0x4b51_5f53_4545_4421);
    s = splitmix(s ^ layer_index as u64);
    splitmix(s ^ size as u64)
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Number of distinct kernels in the layer.
pub fn distinct_kernels(km: &KernelMatrix) -> usize {
    let d = km.omega_sq();
    km.columns()
        .chunks_exact(d)
        .map(|c| {
            let p: Vec<f64> = c.iter().map(|&v| f64::from(v)).collect();
            point_key(&p)
        })
        .collect::<HashSet<_>>()
        .len()
}

/// Runs k-means over the kernels with `k` clamped to the distinct-kernel count.
pub fn cluster_kernels(km: &KernelMatrix, k: usize, opts: &QuantizeOptions) -> Result<Clustering> {
    if km.n() == 0 {
        return Err(Error::InvalidArgument(format!(
            "layer '{}' is empty",
            km.name()
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("codebook size must be >= 1".into()));
    }
    let k = k.min(distinct_kernels(km));
    let ps = PointSet::from_f32(km.omega_sq(), km.columns())?;
    kmeans(&ps, k, opts.seed, &opts.kmeans, opts.algorithm)
}

/// Quantizes a layer's kernels to a `k`-entry codebook (entries sorted).
pub fn quantize_layer(
    km: &KernelMatrix,
    k: usize,
    opts: &QuantizeOptions,
) -> Result<KernelCodebook> {
    let c = cluster_kernels(km, k, opts)?;
    codebook_from_clustering(&c)
}

pub(crate) fn codebook_from_clustering(c: &Clustering) -> Result<KernelCodebook> {
    let entries = c.centroids.iter().map(|&v| v as f32).collect();
    Ok(KernelCodebook::new(c.dim, entries, c.assignment.clone())?.canonical())
}

/// Accuracy the search must beat: `a_base − (a_ori − a_base)·r`.
pub fn target_accuracy(a_ori: f64, a_base: f64, r: f64) -> f64 {
    a_base - (a_ori - a_base) * r
}

/// Parameters of the codebook-size search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    /// Initial codebook size as a fraction of the kernel count.
    pub alpha: f64,
    /// Slack multiplier on the accuracy drop at the initial size.
    pub r: f64,
    pub max_iter: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            alpha: 0.5,
            r: 0.75,
            max_iter: 8,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be in (0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.r.is_finite() && self.r >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "r must be >= 0, got {}",
                self.r
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be >= 1".into()));
        }
        Ok(())
    }

    /// `floor(alpha · n)`, at least [`MIN_PROBE_SIZE`] and at most `n`.
    pub fn initial_size(&self, n: usize) -> usize {
        let raw = (self.alpha * n as f64).floor() as usize;
        raw.max(MIN_PROBE_SIZE).min(n)
    }
}

/// One evaluated codebook size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub size: usize,
    pub accuracy: f64,
    pub passed: bool,
}

/// Bounds and probe log of a finished search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchState {
    pub n_init: usize,
    pub n_curr: usize,
    pub b_upper: usize,
    pub b_lower: usize,
    pub a_ori: f64,
    pub a_base: f64,
    pub a_target: f64,
    pub probes: Vec<Probe>,
}

impl SearchState {
    /// Smallest probed size whose accuracy beat the target.
    pub fn best_passing(&self) -> Option<usize> {
        self.probes
            .iter()
            .filter(|p| p.passed)
            .map(|p| p.size)
            .min()
    }

    /// Size of the returned codebook.
    pub fn selected_size(&self) -> usize {
        self.best_passing().unwrap_or(self.n_init)
    }
}

/// Bisects `(0, n_init]` for the smallest size whose accuracy exceeds
/// `target`, calling `probe` once per tested size.
///
/// Midpoints are floored and raised to [`MIN_PROBE_SIZE`]; the search stops
/// after `max_iter` probes or when the next midpoint would not shrink the
/// interval. Accuracy equal to the target counts as a failure.
pub fn bisect_sizes(
    n_init: usize,
    target: f64,
    max_iter: usize,
    mut probe: impl FnMut(usize) -> Result<f64>,
) -> Result<SearchState> {
    let mut state = SearchState {
        n_init,
        n_curr: n_init,
        b_upper: n_init,
        b_lower: 0,
        a_ori: f64::NAN,
        a_base: f64::NAN,
        a_target: target,
        probes: Vec::new(),
    };
    for _ in 0..max_iter {
        let mid = ((state.b_upper + state.b_lower) / 2).max(MIN_PROBE_SIZE);
        if mid >= state.b_upper || mid <= state.b_lower {
            break;
        }
        state.n_curr = mid;
        let accuracy = probe(mid)?;
        let passed = accuracy > target;
        log::debug!(
            "probe size {mid}: accuracy {accuracy:.6} (target {target:.6}, passed {passed})"
        );
        state.probes.push(Probe {
            size: mid,
            accuracy,
            passed,
        });
        if passed {
            state.b_upper = mid;
        } else {
            state.b_lower = mid;
        }
    }
    Ok(state)
}

/// Scores a candidate model; higher is better, within `[0, 1]`.
pub trait Evaluator {
    fn evaluate(&mut self, model: &ModelArchive) -> Result<f64>;
}

impl<F> Evaluator for F
where
    F: FnMut(&ModelArchive) -> Result<f64>,
{
    fn evaluate(&mut self, model: &ModelArchive) -> Result<f64> {
        self(model)
    }
}

fn checked_accuracy(value: f64) -> Result<f64> {
    if value.is_finite() && (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(Error::Evaluator(format!("accuracy {value} outside [0, 1]")))
    }
}

/// Reconstruction-based stand-in for validation accuracy:
/// `1 − mean over layers of ‖W − Ŵ‖² / ‖W‖²`, clamped to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ProxyEvaluator {
    reference: ModelArchive,
}

impl ProxyEvaluator {
    pub fn new(reference: ModelArchive) -> Self {
        ProxyEvaluator { reference }
    }
}

impl Evaluator for ProxyEvaluator {
    fn evaluate(&mut self, model: &ModelArchive) -> Result<f64> {
        if self.reference.is_empty() {
            return Ok(1.0);
        }
        let mut total = 0.0;
        for original in self.reference.layers() {
            let candidate = model
                .get(original.name())
                .ok_or_else(|| Error::UnknownLayer(original.name().to_owned()))?;
            if candidate.dims() != original.dims() {
                return Err(Error::Shape(format!(
                    "layer '{}' changed shape",
                    original.name()
                )));
            }
            let mut diff = 0.0f64;
            let mut norm = 0.0f64;
            for (&w, &v) in original.data().iter().zip(candidate.data()) {
                let (w, v) = (f64::from(w), f64::from(v));
                diff += (w - v) * (w - v);
                norm += w * w;
            }
            total += if norm > 0.0 {
                diff / norm
            } else if diff > 0.0 {
                1.0
            } else {
                0.0
            };
        }
        Ok((1.0 - total / self.reference.len() as f64).clamp(0.0, 1.0))
    }
}

/// Runs an external program on a KQT dump of the candidate model and reads
/// one decimal accuracy from its standard output.
#[derive(Debug, Clone)]
pub struct CommandEvaluator {
    program: String,
    args: Vec<String>,
}

impl CommandEvaluator {
    /// Splits `command` on whitespace; the model path is appended last.
    pub fn new(command: &str) -> Result<Self> {
        let mut parts = command.split_whitespace().map(str::to_owned);
        let program = parts
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty evaluator command".into()))?;
        Ok(CommandEvaluator {
            program,
            args: parts.collect(),
        })
    }
}

impl Evaluator for CommandEvaluator {
    fn evaluate(&mut self, model: &ModelArchive) -> Result<f64> {
        let mut file = tempfile::Builder::new().suffix(".kqt").tempfile()?;
        file.write_all(&model.to_bytes()?)?;
        file.flush()?;
        let output = Command::new(&self.program)
            .args(&self.args)
            .arg(file.path())
            .output()
            .map_err(|e| Error::Evaluator(format!("cannot run '{}': {e}", self.program)))?;
        if !output.status.success() {
            return Err(Error::Evaluator(format!(
                "'{}' exited with {}: {}",
                self.program,
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        let text = String::from_utf8_lossy(&output.stdout);
        let value: f64 = text.trim().parse().map_err(|_| {
            Error::Evaluator(format!(
                "'{}' printed {:?}, expected one decimal accuracy",
                self.program,
                text.trim()
            ))
        })?;
        checked_accuracy(value)
    }
}

fn evaluate(eval: &mut dyn Evaluator, model: &ModelArchive) -> Result<f64> {
    checked_accuracy(eval.evaluate(model)?)
}

/// Model with layer `index` rebuilt from `codebook`.
fn with_quantized_layer(
    model: &ModelArchive,
    index: usize,
    km: &KernelMatrix,
    codebook: &KernelCodebook,
) -> Result<ModelArchive> {
    let recovered = from_assignments(km.name(), codebook, km.shape())?;
    let mut out = model.clone();
    out.replace(index, recovered)?;
    Ok(out)
}

/// Sizes the codebook of conv layer `layer_index` of `model`.
///
/// Accuracy is measured with the layer at full precision and at the
/// initial size, which fixes the target; then [`bisect_sizes`] runs with
/// every probe re-clustering the original kernels. The codebook of the
/// smallest passing probe is returned, or the initial one if none passed.
pub fn binary_search_codebook(
    model: &ModelArchive,
    layer_index: usize,
    cfg: &SearchConfig,
    eval: &mut dyn Evaluator,
    opts: &QuantizeOptions,
) -> Result<(KernelCodebook, SearchState)> {
    cfg.validate()?;
    let layer = model
        .layers()
        .get(layer_index)
        .ok_or_else(|| Error::InvalidArgument(format!("no layer at index {layer_index}")))?;
    let km = to_kernel_matrix(layer)?;
    let n_init = cfg.initial_size(km.n());

    let quantize_at = |size: usize| {
        let o = QuantizeOptions {
            seed: derive_seed(opts.seed, layer_index, size),
            ..*opts
        };
        quantize_layer(&km, size, &o)
    };

    let a_ori = evaluate(eval, model)?;
    let initial = quantize_at(n_init)?;
    let a_base = evaluate(
        eval,
        &with_quantized_layer(model, layer_index, &km, &initial)?,
    )?;
    let a_target = target_accuracy(a_ori, a_base, cfg.r);
    log::info!(
        "layer '{}': n = {}, N_init = {n_init}, A_ori = {a_ori:.6}, A_base = {a_base:.6}, A_target = {a_target:.6}",
        km.name(),
        km.n()
    );

    let mut best: Option<(usize, KernelCodebook)> = None;
    let mut state = bisect_sizes(n_init, a_target, cfg.max_iter, |size| {
        let cb = quantize_at(size)?;
        let acc = evaluate(eval, &with_quantized_layer(model, layer_index, &km, &cb)?)?;
        if acc > a_target && best.as_ref().is_none_or(|(s, _)| size < *s) {
            best = Some((size, cb));
        }
        Ok(acc)
    })?;
    state.a_ori = a_ori;
    state.a_base = a_base;

    let codebook = match best {
        Some((_, cb)) => cb,
        None => initial,
    };
    Ok((codebook, state))
}

/// True for the conv layers that get kernel-level quantization.
pub fn is_kernel_layer(t: &WeightTensor) -> bool {
    t.square_kernel() == Some(KERNEL_SIDE)
}

/// Called after each layer is quantized, with the model as it stands.
pub trait LayerHook {
    fn layer_done(&mut self, layer_index: usize, model: &ModelArchive) -> Result<()>;
}

impl<F> LayerHook for F
where
    F: FnMut(usize, &ModelArchive) -> Result<()>,
{
    fn layer_done(&mut self, layer_index: usize, model: &ModelArchive) -> Result<()> {
        self(layer_index, model)
    }
}

/// Hook that does nothing.
pub struct NoHook;

impl LayerHook for NoHook {
    fn layer_done(&mut self, _: usize, _: &ModelArchive) -> Result<()> {
        Ok(())
    }
}

/// Search outcome for one kernel-quantized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSearch {
    pub layer_index: usize,
    pub codebook: KernelCodebook,
    pub state: SearchState,
}

/// Result of [`quantize_model`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelQuantization {
    pub layers: Vec<LayerSearch>,
    /// Input model with every kernel-quantized layer replaced by its
    /// recovered weights.
    pub model: ModelArchive,
}

/// Quantizes every 3×3 conv layer in order. Each search sees the model with
/// all earlier layers already replaced by their recovered weights.
pub fn quantize_model(
    model: &ModelArchive,
    cfg: &SearchConfig,
    eval: &mut dyn Evaluator,
    opts: &QuantizeOptions,
    hook: &mut dyn LayerHook,
) -> Result<ModelQuantization> {
    cfg.validate()?;
    let targets: Vec<usize> = model
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, t)| is_kernel_layer(t))
        .map(|(i, _)| i)
        .collect();
    if targets.is_empty() {
        return Err(Error::InvalidArgument(
            "model has no 3x3 convolution layer to quantize".into(),
        ));
    }
    let mut current = model.clone();
    let mut layers = Vec::with_capacity(targets.len());
    for index in targets {
        let (codebook, state) = binary_search_codebook(&current, index, cfg, eval, opts)?;
        let km = to_kernel_matrix(&current.layers()[index])?;
        current = with_quantized_layer(&current, index, &km, &codebook)?;
        log::info!(
            "layer '{}': codebook size {} after {} probes",
            km.name(),
            codebook.k(),
            state.probes.len()
        );
        hook.layer_done(index, &current)?;
        layers.push(LayerSearch {
            layer_index: index,
            codebook,
            state,
        });
    }
    Ok(ModelQuantization {
        layers,
        model: current,
    })
}
