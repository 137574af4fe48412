//! Run configuration: one TOML document covering every subcommand.
//!
//! Precedence is defaults, then the `--config` file, then each `--set
//! key=value` override in order, then `--seed`. Unknown keys are
//! rejected by name at every level. `--set` keys are dotted paths
//! (`draft.l_d=8`); a bare key that names exactly one leaf anywhere in
//! the tree (`l_d=8`) is accepted as shorthand, and an ambiguous bare
//! key lists its candidates.

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};
use speckit_core::baselm::BaseLMConfig;
use speckit_core::specformer::SpecFormerConfig;
use speckit_core::training::TrainConfig;
use std::path::Path;

fn d_layers() -> usize { 4 }
fn d_width() -> usize { 64 }
fn d_heads() -> usize { 4 }
fn d_ff() -> usize { 256 }
fn d_vocab() -> usize { 64 }
fn d_max_seq() -> usize { 256 }
fn d_rope() -> f64 { 10000.0 }
fn d_eps() -> f64 { 1e-6 }
fn d_l_d() -> usize { 4 }

/// Base-model section, mirroring `BaseLMConfig` with desk defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseSection {
    pub layers: usize,
    pub d_h: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub rope_base: f64,
    pub eps: f64,
}

impl Default for BaseSection {
    fn default() -> Self {
        BaseSection {
            layers: d_layers(),
            d_h: d_width(),
            n_heads: d_heads(),
            d_ff: d_ff(),
            vocab: d_vocab(),
            max_seq: d_max_seq(),
            rope_base: d_rope(),
            eps: d_eps(),
        }
    }
}

impl BaseSection {
    pub fn to_config(&self) -> BaseLMConfig {
        BaseLMConfig {
            layers: self.layers,
            d_h: self.d_h,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab: self.vocab,
            max_seq: self.max_seq,
            rope_base: self.rope_base,
            eps: self.eps,
        }
    }
}

/// Draft-model section, mirroring `SpecFormerConfig`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DraftSection {
    pub d_h: usize,
    pub l_d: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub eps: f64,
    pub rope_base: f64,
}

impl Default for DraftSection {
    fn default() -> Self {
        DraftSection {
            d_h: d_width(),
            l_d: d_l_d(),
            n_heads: d_heads(),
            d_ff: d_ff(),
            eps: d_eps(),
            rope_base: d_rope(),
        }
    }
}

impl DraftSection {
    pub fn to_config(&self) -> SpecFormerConfig {
        SpecFormerConfig {
            d_h: self.d_h,
            l_d: self.l_d,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            eps: self.eps,
            rope_base: self.rope_base,
        }
    }
}

/// Optimization section, mirroring `TrainConfig` minus its seed: all
/// randomness flows from the invocation's root seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub grad_accum: usize,
    pub epochs: usize,
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            batch_size: t.batch_size,
            grad_accum: t.grad_accum,
            epochs: t.epochs,
            max_lr: t.max_lr,
            min_lr: t.min_lr,
            warmup_frac: t.warmup_frac,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            weight_decay: t.weight_decay,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            grad_accum: self.grad_accum,
            epochs: self.epochs,
            max_lr: self.max_lr,
            min_lr: self.min_lr,
            warmup_frac: self.warmup_frac,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            weight_decay: self.weight_decay,
            seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// `cycle`, `affine`, or `markov`.
    pub kind: String,
    pub period: usize,
    pub mul: usize,
    pub add: usize,
    pub fanout: usize,
    pub size: usize,
    pub seq_len: usize,
    pub vocab: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            kind: "cycle".into(),
            period: 8,
            mul: 5,
            add: 3,
            fanout: 4,
            size: 64,
            seq_len: 24,
            vocab: d_vocab(),
        }
    }
}

impl CorpusSection {
    pub fn to_kind(&self) -> anyhow::Result<speckit_core::corpus::CorpusKind> {
        use speckit_core::corpus::CorpusKind;
        match self.kind.as_str() {
            "cycle" => Ok(CorpusKind::Cycle { period: self.period }),
            "affine" => Ok(CorpusKind::Affine { mul: self.mul, add: self.add }),
            "markov" => Ok(CorpusKind::Markov { fanout: self.fanout }),
            other => bail!("corpus.kind: unknown kind `{other}`, expected cycle, affine, or markov"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub prompt_count: usize,
    pub prompt_len: usize,
    pub max_len: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        DistillSection { prompt_count: 16, prompt_len: 8, max_len: 40 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    /// Explicit prompt tokens; when empty, `prompt_len` tokens are
    /// drawn from the run seed instead.
    pub prompt: Vec<usize>,
    pub prompt_len: usize,
    pub max_tokens: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection { prompt: Vec::new(), prompt_len: 8, max_tokens: 64 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    /// Number of independent prompts (one table row each).
    pub seeds: usize,
    pub prompt_len: usize,
    pub max_tokens: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection { seeds: 10, prompt_len: 8, max_tokens: 64 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RooflineSection {
    /// Base-model parameter count for the what-if analysis.
    pub model_params: f64,
    pub bytes_per_param: f64,
    /// Hypothetical draft width/FFN for the overhead factor.
    pub draft_d_h: usize,
    pub draft_d_ff: usize,
    pub draft_l_d: usize,
    /// Acceptance and budget driving the gain/budget pair.
    pub a: f64,
    pub k: usize,
    pub batch_size: usize,
    /// Tokens-in-flight sweep upper bound for the curve data.
    pub max_tokens: usize,
}

impl Default for RooflineSection {
    fn default() -> Self {
        RooflineSection {
            model_params: 7e9,
            bytes_per_param: 2.0,
            draft_d_h: 4096,
            draft_d_ff: 11008,
            draft_l_d: 4,
            a: 1.81,
            k: 4,
            batch_size: 1,
            max_tokens: 320,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub seeds: usize,
    pub tolerance: f64,
    pub step: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection { seeds: 3, tolerance: 1e-3, step: 1e-5 }
    }
}

/// The whole run configuration.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub base: BaseSection,
    pub draft: DraftSection,
    pub train: TrainSection,
    pub corpus: CorpusSection,
    pub distill: DistillSection,
    pub decode: DecodeSection,
    pub bench: BenchSection,
    pub roofline: RooflineSection,
    pub gradcheck: GradcheckSection,
}

impl RunConfig {
    /// Validates every section up front, naming the offending key.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.base.to_config().validate().context("[base]")?;
        self.draft.to_config().validate().context("[draft]")?;
        self.train.to_config(self.seed).validate().context("[train]")?;
        self.corpus.to_kind()?;
        for (name, v) in [
            ("corpus.size", self.corpus.size),
            ("corpus.seq_len", self.corpus.seq_len),
            ("corpus.vocab", self.corpus.vocab),
            ("distill.prompt_count", self.distill.prompt_count),
            ("distill.prompt_len", self.distill.prompt_len),
            ("distill.max_len", self.distill.max_len),
            ("decode.max_tokens", self.decode.max_tokens),
            ("bench.seeds", self.bench.seeds),
            ("bench.prompt_len", self.bench.prompt_len),
            ("bench.max_tokens", self.bench.max_tokens),
            ("roofline.draft_l_d", self.roofline.draft_l_d),
            ("roofline.k", self.roofline.k),
            ("roofline.batch_size", self.roofline.batch_size),
            ("roofline.max_tokens", self.roofline.max_tokens),
            ("gradcheck.seeds", self.gradcheck.seeds),
        ] {
            if v == 0 {
                bail!("{name}: must be >= 1");
            }
        }
        if self.decode.prompt.is_empty() && self.decode.prompt_len == 0 {
            bail!("decode.prompt_len: must be >= 1 when decode.prompt is empty");
        }
        for (name, v) in [
            ("roofline.model_params", self.roofline.model_params),
            ("roofline.bytes_per_param", self.roofline.bytes_per_param),
            ("roofline.a", self.roofline.a),
            ("gradcheck.tolerance", self.gradcheck.tolerance),
            ("gradcheck.step", self.gradcheck.step),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                bail!("{name}: must be a positive finite number, got {v}");
            }
        }
        if self.roofline.k < self.roofline.draft_l_d {
            bail!("roofline.k: budget k must be >= draft_l_d");
        }
        Ok(())
    }

    /// Canonical serialized form; the report digest hashes this.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Loads defaults, the optional file, then `--set` overrides, then
/// `--seed`, and validates the result.
pub fn parse_config(
    path: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
) -> anyhow::Result<RunConfig> {
    let mut cfg: RunConfig = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| anyhow!("reading config {}: {e}", p.display()))?;
            toml::from_str(&text).map_err(|e| anyhow!("config {}: {e}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if !sets.is_empty() {
        let mut tree = toml::Value::try_from(&cfg).expect("config serializes");
        for s in sets {
            apply_set(&mut tree, s)?;
        }
        cfg = tree.try_into().map_err(|e| anyhow!("after --set overrides: {e}"))?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Applies one `key=value` override to the config tree.
fn apply_set(tree: &mut toml::Value, spec: &str) -> anyhow::Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("--set `{spec}`: expected key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        bail!("--set `{spec}`: empty key");
    }
    let path = resolve_key(tree, key)?;
    let slot = lookup_mut(tree, &path);
    let parsed = parse_value(raw)
        .ok_or_else(|| anyhow!("--set {key}: `{raw}` is not a valid TOML value"))?;
    let coerced = match (&*slot, parsed) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    if variant_name(slot) != variant_name(&coerced) {
        bail!(
            "--set {key}: expected a {} value, got `{raw}`",
            variant_name(slot)
        );
    }
    *slot = coerced;
    Ok(())
}

/// Resolves a `--set` key to a full path: exact dotted paths win, then
/// a bare key may match a unique leaf by final segment.
fn resolve_key(tree: &toml::Value, key: &str) -> anyhow::Result<Vec<String>> {
    let as_path: Vec<String> = key.split('.').map(str::to_owned).collect();
    if lookup(tree, &as_path).is_some() {
        return Ok(as_path);
    }
    if as_path.len() == 1 {
        let mut hits = Vec::new();
        collect_leaves(tree, &mut Vec::new(), &mut |path, _| {
            if path.last().map(String::as_str) == Some(key) {
                hits.push(path.to_vec());
            }
        });
        match hits.len() {
            1 => return Ok(hits.remove(0)),
            0 => {}
            _ => {
                let names: Vec<String> = hits.iter().map(|p| p.join(".")).collect();
                bail!("--set {key}: ambiguous key, candidates: {}", names.join(", "));
            }
        }
    }
    bail!("--set {key}: unknown config key")
}

fn lookup<'a>(tree: &'a toml::Value, path: &[String]) -> Option<&'a toml::Value> {
    let mut cur = tree;
    for seg in path {
        cur = cur.as_table()?.get(seg)?;
    }
    if cur.is_table() {
        None // only leaves are assignable
    } else {
        Some(cur)
    }
}

fn lookup_mut<'a>(tree: &'a mut toml::Value, path: &[String]) -> &'a mut toml::Value {
    let mut cur = tree;
    for seg in path {
        cur = cur
            .as_table_mut()
            .expect("resolved path")
            .get_mut(seg)
            .expect("resolved path");
    }
    cur
}

fn collect_leaves(
    tree: &toml::Value,
    path: &mut Vec<String>,
    f: &mut impl FnMut(&[String], &toml::Value),
) {
    match tree.as_table() {
        Some(table) => {
            for (k, v) in table {
                path.push(k.clone());
                collect_leaves(v, path, f);
                path.pop();
            }
        }
        None => f(path, tree),
    }
}

fn parse_value(raw: &str) -> Option<toml::Value> {
    let doc = format!("v = {raw}");
    if let Ok(toml::Value::Table(mut t)) = doc.parse::<toml::Value>() {
        return t.remove("v");
    }
    // Bare words fall back to strings (`--set corpus.kind=markov`).
    let doc = format!("v = \"{}\"", raw.replace('"', ""));
    if let Ok(toml::Value::Table(mut t)) = doc.parse::<toml::Value>() {
        return t.remove("v");
    }
    None
}

fn variant_name(v: &toml::Value) -> &'static str {
    match v {
        toml::Value::String(_) => "string",
        toml::Value::Integer(_) => "integer",
        toml::Value::Float(_) => "float",
        toml::Value::Boolean(_) => "boolean",
        toml::Value::Datetime(_) => "datetime",
        toml::Value::Array(_) => "array",
        toml::Value::Table(_) => "table",
    }
}
