//! Layered configuration.
//!
//! Values resolve in this order, later layers winning:
//! built-in defaults, the active preset, the config file, `--override`
//! flags (and the shorthand flags such as `--seed`), then `NPGRID_*`
//! environment variables. Every key is declared in [`SCHEMA`]; anything else
//! is an error that names the layer it came from.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use npgrid::models::{ConvBackboneConfig, MlpConfig, ModelConfig, ModelKind};
use npgrid::tasks::TaskShape;
use npgrid::training::{DataSpec, TrainConfig};
use toml::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Str,
    Bool,
    IntList,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Int => "integer",
            Kind::Float => "number",
            Kind::Str => "string",
            Kind::Bool => "boolean",
            Kind::IntList => "list of integers",
        }
    }
}

pub struct Key {
    pub name: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    pub doc: &'static str,
}

macro_rules! key {
    ($name:literal, $kind:ident, $default:literal, $doc:literal) => {
        Key {
            name: $name,
            kind: Kind::$kind,
            default: $default,
            doc: $doc,
        }
    };
}

/// Every accepted key, its type, default (TOML syntax) and meaning.
pub const SCHEMA: &[Key] = &[
    key!(
        "run.preset",
        Str,
        "\"desk\"",
        "settings bundle applied under the file: desk or paper"
    ),
    key!("run.seed", Int, "0", "root of every random stream"),
    key!("run.threads", Int, "1", "worker threads (results do not depend on it)"),
    key!(
        "run.checkpoint",
        Str,
        "\"\"",
        "checkpoint to read; empty means <out>/checkpoint.gbcn"
    ),
    key!("model.kind", Str, "\"gbconp\"", "cnp, np, convcnp or gbconp"),
    key!("model.widths", IntList, "[64, 64]", "hidden widths of every MLP"),
    key!("model.r_dim", Int, "64", "deterministic representation size (cnp, np)"),
    key!("model.d_z", Int, "128", "latent dimension (np, gbconp)"),
    key!("model.conv_depth", Int, "4", "convolution layers (convcnp, gbconp)"),
    key!("model.conv_channels", Int, "32", "channels per convolution layer"),
    key!("model.kernel_size", Int, "5", "odd convolution kernel width"),
    key!("model.points_per_unit", Int, "32", "grid resolution"),
    key!("model.margin", Float, "0.1", "grid padding beyond the data extent"),
    key!(
        "model.sigma_floor",
        Float,
        "0.001",
        "lower bound on every predicted scale"
    ),
    key!("data.source", Str, "\"rbf\"", "rbf, periodic, matern32 or csv:<path>"),
    key!("data.n_points", Int, "100", "points per task"),
    key!("data.min_context", Int, "1", "smallest context set"),
    key!("data.max_context", Int, "50", "largest context set"),
    key!(
        "data.tasks_file",
        Str,
        "\"\"",
        "task file from gen-data used instead of synthesized test tasks"
    ),
    key!("train.epochs", Int, "20", "passes, each over fresh tasks"),
    key!("train.tasks_per_epoch", Int, "2000", "tasks per epoch"),
    key!("train.batch_size", Int, "16", "tasks per Adam step"),
    key!("train.learning_rate", Float, "0.001", "Adam step size, in [0, 1)"),
    key!("train.n_z", Int, "1", "latent samples per task in the ELBO"),
    key!(
        "train.val_n_z",
        Int,
        "16",
        "latent samples for the per-epoch validation score"
    ),
    key!("train.val_tasks", Int, "100", "validation tasks"),
    key!(
        "train.log_wall_time",
        Bool,
        "true",
        "record wall_seconds in metrics.jsonl (false writes 0)"
    ),
    key!("eval.tasks", Int, "500", "held-out tasks scored by eval"),
    key!("eval.n_z", Int, "64", "latent samples per task for eval"),
    key!("probe.epsilons", IntList, "[1, 5, 25, 50]", "context sizes probed"),
    key!("probe.tasks", Int, "200", "held-out tasks per probe"),
    key!("manipulate.task_id", Int, "0", "held-out task to condition on"),
    key!("manipulate.dims", IntList, "[0, 1]", "the two latent coordinates swept"),
    key!("manipulate.steps", Int, "7", "sweep points per coordinate"),
    key!("manipulate.pct_lo", Float, "5.0", "lowest percentile swept"),
    key!("manipulate.pct_hi", Float, "95.0", "highest percentile swept"),
    key!("manipulate.relax", Float, "40.0", "multiplier on the latent scale"),
    key!("bands.task_id", Int, "0", "held-out task to condition on"),
    key!("bands.n_z", Int, "10", "latent samples, one band each"),
    key!("gen.count", Int, "100", "tasks written by gen-data"),
    key!(
        "gen.split",
        Str,
        "\"test\"",
        "stream the tasks come from: train, valid or test"
    ),
];

/// Named bundles sitting between the defaults and the config file.
pub const PRESETS: &[(&str, &[(&str, &str)])] = &[
    (
        "desk",
        &[
            ("train.epochs", "20"),
            ("train.tasks_per_epoch", "2000"),
            ("train.val_tasks", "100"),
            ("eval.tasks", "500"),
        ],
    ),
    (
        "paper",
        &[
            ("train.epochs", "100"),
            ("train.tasks_per_epoch", "50000"),
            ("train.val_tasks", "10000"),
            ("eval.tasks", "5000"),
        ],
    ),
];

pub const ENV_PREFIX: &str = "NPGRID_";

/// Where a value came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    Preset(String),
    File(PathBuf),
    Override,
    Env(String),
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Default => f.write_str("default"),
            Source::Preset(p) => write!(f, "preset `{p}`"),
            Source::File(p) => write!(f, "config file {}", p.display()),
            Source::Override => f.write_str("override"),
            Source::Env(v) => write!(f, "environment {v}"),
        }
    }
}

/// A configuration problem; always a usage error.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::error::Error for ConfigError {}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

fn schema_key(name: &str) -> Option<&'static Key> {
    SCHEMA.iter().find(|k| k.name == name)
}

fn parse_literal(raw: &str) -> Option<Value> {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
}

/// Checks `value` against the schema type of `key`, coercing integers to
/// floats where a number is expected.
fn typed(key: &Key, value: Value, source: &Source) -> Result<Value, ConfigError> {
    let ok = match (key.kind, &value) {
        (Kind::Int, Value::Integer(i)) => *i >= 0,
        (Kind::Float, Value::Float(_)) => true,
        (Kind::Float, Value::Integer(i)) => return Ok(Value::Float(*i as f64)),
        (Kind::Str, Value::String(_)) | (Kind::Bool, Value::Boolean(_)) => true,
        (Kind::IntList, Value::Array(a)) => a.iter().all(|v| matches!(v, Value::Integer(i) if *i >= 0)),
        _ => false,
    };
    if ok {
        Ok(value)
    } else {
        err(format!(
            "`{}` from {source}: expected a non-negative {}, got {value}",
            key.name,
            key.kind.name()
        ))
    }
}

/// A `key = value` string from the command line or the environment. String
/// keys take the raw text when it is not a quoted TOML string.
fn typed_raw(key: &Key, raw: &str, source: &Source) -> Result<Value, ConfigError> {
    let value = match (key.kind, parse_literal(raw)) {
        (Kind::Str, Some(v @ Value::String(_))) => v,
        (Kind::Str, _) => Value::String(raw.to_string()),
        (_, Some(v)) => v,
        (_, None) => return err(format!("`{}` from {source}: cannot parse `{raw}`", key.name)),
    };
    typed(key, value, source)
}

/// Flattens a parsed file into dotted keys.
fn flatten(table: toml::Table, path: &Path) -> Result<Vec<(String, Value)>, ConfigError> {
    let mut out = Vec::new();
    for (section, v) in table {
        match v {
            Value::Table(t) => {
                for (k, v) in t {
                    if let Value::Table(_) = v {
                        return err(format!(
                            "{}: nested table `{section}.{k}` is not supported",
                            path.display()
                        ));
                    }
                    out.push((format!("{section}.{k}"), v));
                }
            }
            other => out.push((section, other)),
        }
    }
    Ok(out)
}

/// Environment key for a schema key: `train.epochs` → `NPGRID_TRAIN_EPOCHS`;
/// `run.*` keys also answer to the short form (`NPGRID_SEED`).
fn env_names(key: &str) -> Vec<String> {
    let long = format!("{ENV_PREFIX}{}", key.replace('.', "_").to_ascii_uppercase());
    match key.strip_prefix("run.") {
        Some(short) => vec![long, format!("{ENV_PREFIX}{}", short.to_ascii_uppercase())],
        None => vec![long],
    }
}

/// The fully resolved key/value table.
#[derive(Clone, Debug)]
pub struct Resolved {
    values: BTreeMap<&'static str, (Value, Source)>,
}

/// Resolves all layers. `env` is passed in (normally `std::env::vars()`)
/// so tests can supply their own.
pub fn parse_config(
    path: Option<&Path>,
    overrides: &[String],
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<Resolved, ConfigError> {
    let file_layer = match path {
        None => Vec::new(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?;
            let table: toml::Table =
                toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {}", p.display(), e.message())))?;
            let src = Source::File(p.to_path_buf());
            flatten(table, p)?
                .into_iter()
                .map(|(k, v)| {
                    let key = schema_key(&k).ok_or_else(|| ConfigError(format!("unknown key `{k}` in {src}")))?;
                    Ok((key, typed(key, v, &src)?, src.clone()))
                })
                .collect::<Result<Vec<_>, ConfigError>>()?
        }
    };
    let mut override_layer = Vec::new();
    for o in overrides {
        let Some((k, raw)) = o.split_once('=') else {
            return err(format!("override `{o}` is not of the form key=value"));
        };
        let k = k.trim();
        let key = schema_key(k).ok_or_else(|| ConfigError(format!("unknown key `{k}` in override")))?;
        override_layer.push((key, typed_raw(key, raw.trim(), &Source::Override)?, Source::Override));
    }
    let mut env_layer = Vec::new();
    let mut env: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    env.sort();
    for (var, raw) in env {
        let src = Source::Env(var.clone());
        let key = SCHEMA
            .iter()
            .find(|k| env_names(k.name).contains(&var))
            .ok_or_else(|| ConfigError(format!("unknown key in {src}")))?;
        env_layer.push((key, typed_raw(key, &raw, &src)?, src));
    }

    let mut values: BTreeMap<&'static str, (Value, Source)> = SCHEMA
        .iter()
        .map(|k| {
            let v = parse_literal(k.default).expect("schema defaults are valid TOML");
            (
                k.name,
                (
                    typed(k, v, &Source::Default).expect("schema defaults are well typed"),
                    Source::Default,
                ),
            )
        })
        .collect();
    let mut upper = file_layer.iter().chain(&override_layer).chain(&env_layer);
    let preset = upper
        .rfind(|(k, _, _)| k.name == "run.preset")
        .map(|(_, v, _)| v.as_str().unwrap_or_default().to_string())
        .unwrap_or_else(|| "desk".into());
    let Some((_, entries)) = PRESETS.iter().find(|(n, _)| *n == preset) else {
        let names: Vec<_> = PRESETS.iter().map(|(n, _)| *n).collect();
        return err(format!("unknown preset `{preset}` (known: {})", names.join(", ")));
    };
    let src = Source::Preset(preset.clone());
    for (k, raw) in entries.iter() {
        let key = schema_key(k).expect("preset keys are in the schema");
        values.insert(key.name, (typed_raw(key, raw, &src)?, src.clone()));
    }
    for (key, v, src) in file_layer.into_iter().chain(override_layer).chain(env_layer) {
        values.insert(key.name, (v, src));
    }
    Ok(Resolved { values })
}

impl Resolved {
    fn get(&self, key: &str) -> &Value {
        &self
            .values
            .get(key)
            .unwrap_or_else(|| panic!("`{key}` is not in the schema"))
            .0
    }

    pub fn source(&self, key: &str) -> &Source {
        &self.values[key].1
    }

    pub fn int(&self, key: &str) -> usize {
        self.get(key).as_integer().expect("typed integer") as usize
    }

    pub fn float(&self, key: &str) -> f64 {
        self.get(key).as_float().expect("typed float")
    }

    pub fn string(&self, key: &str) -> &str {
        self.get(key).as_str().expect("typed string")
    }

    pub fn bool(&self, key: &str) -> bool {
        self.get(key).as_bool().expect("typed bool")
    }

    pub fn ints(&self, key: &str) -> Vec<usize> {
        let a = self.get(key).as_array().expect("typed list");
        a.iter()
            .map(|v| v.as_integer().expect("typed integer") as usize)
            .collect()
    }

    pub fn preset(&self) -> &str {
        self.string("run.preset")
    }

    /// `(key, value, source)` for every key, in key order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &Value, &Source)> {
        self.values.iter().map(|(k, (v, s))| (*k, v, s))
    }

    fn parsed<T: std::str::FromStr<Err = String>>(&self, key: &str) -> Result<T, ConfigError> {
        self.string(key)
            .parse()
            .map_err(|e| ConfigError(format!("`{key}` from {}: {e}", self.source(key))))
    }

    pub fn data(&self) -> Result<DataSpec, ConfigError> {
        self.parsed("data.source")
    }

    pub fn task_shape(&self) -> TaskShape {
        TaskShape {
            n_points: self.int("data.n_points"),
            min_context: self.int("data.min_context"),
            max_context: self.int("data.max_context"),
        }
    }

    pub fn model(&self) -> Result<ModelConfig, ConfigError> {
        let kind: ModelKind = self.parsed("model.kind")?;
        Ok(ModelConfig {
            kind,
            mlp: MlpConfig {
                widths: self.ints("model.widths"),
            },
            r_dim: self.int("model.r_dim"),
            d_z: self.int("model.d_z"),
            conv: ConvBackboneConfig {
                depth: self.int("model.conv_depth"),
                channels: self.int("model.conv_channels"),
                kernel_size: self.int("model.kernel_size"),
            },
            points_per_unit: self.int("model.points_per_unit"),
            margin: self.float("model.margin"),
            sigma_floor: self.float("model.sigma_floor"),
        })
    }

    pub fn seed(&self) -> u64 {
        self.int("run.seed") as u64
    }

    pub fn threads(&self) -> usize {
        self.int("run.threads")
    }

    pub fn train(&self) -> Result<TrainConfig, ConfigError> {
        let cfg = TrainConfig {
            model: self.model()?,
            data: self.data()?,
            task_shape: self.task_shape(),
            epochs: self.int("train.epochs"),
            tasks_per_epoch: self.int("train.tasks_per_epoch"),
            batch_size: self.int("train.batch_size"),
            learning_rate: self.float("train.learning_rate"),
            n_z_train: self.int("train.n_z"),
            n_z_val: self.int("train.val_n_z"),
            val_tasks: self.int("train.val_tasks"),
            seed: self.seed(),
            threads: self.threads(),
        };
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }
}

/// Text block listing every key, for `--help`.
pub fn keys_help() -> String {
    let mut s = String::from("Configuration keys (file sections, --override key=value, or NPGRID_<SECTION>_<KEY>):\n");
    for k in SCHEMA {
        s.push_str(&format!(
            "  {:<24} {:<16} default {:<14} {}\n",
            k.name,
            k.kind.name(),
            k.default,
            k.doc
        ));
    }
    s.push_str("\nPresets: ");
    let names: Vec<_> = PRESETS.iter().map(|(n, _)| *n).collect();
    s.push_str(&names.join(", "));
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn none() -> Vec<(String, String)> {
        Vec::new()
    }

    fn file(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, text).unwrap();
        (dir, path)
    }

    #[test]
    fn empty_file_gives_defaults() {
        let (_d, p) = file("");
        let r = parse_config(Some(&p), &[], none()).unwrap();
        for k in SCHEMA {
            let v = r.get(k.name);
            assert_eq!(
                typed(k, parse_literal(k.default).unwrap(), &Source::Default).unwrap(),
                *v,
                "{}",
                k.name
            );
        }
        assert_eq!(r.preset(), "desk");
        assert_eq!(r.model().unwrap(), ModelConfig::new(ModelKind::GbConp));
    }

    #[test]
    fn override_beats_file() {
        let (_d, p) = file("[train]\nlearning_rate = 0.01\n");
        let r = parse_config(Some(&p), &["train.learning_rate=0.001".into()], none()).unwrap();
        assert_eq!(r.float("train.learning_rate"), 0.001);
        assert_eq!(*r.source("train.learning_rate"), Source::Override);
        let r = parse_config(Some(&p), &[], none()).unwrap();
        assert_eq!(r.float("train.learning_rate"), 0.01);
    }

    #[test]
    fn environment_is_the_top_layer() {
        let r = parse_config(None, &[], vec![("NPGRID_SEED".into(), "7".into())]).unwrap();
        assert_eq!(r.seed(), 7);
        let r = parse_config(
            None,
            &["run.seed=3".into()],
            vec![("NPGRID_RUN_SEED".into(), "9".into())],
        )
        .unwrap();
        assert_eq!(r.seed(), 9);
        let r = parse_config(None, &[], vec![("NPGRID_TRAIN_EPOCHS".into(), "3".into())]).unwrap();
        assert_eq!(r.int("train.epochs"), 3);
        let r = parse_config(None, &[], vec![("HOME".into(), "/x".into())]).unwrap();
        assert_eq!(r.seed(), 0);
    }

    #[test]
    fn unknown_keys_name_their_layer() {
        let (_d, p) = file("[train]\nepohcs = 3\n");
        let e = parse_config(Some(&p), &[], none()).unwrap_err().0;
        assert!(e.contains("train.epohcs") && e.contains("config file"), "{e}");
        let e = parse_config(None, &["model.depth=2".into()], none()).unwrap_err().0;
        assert!(e.contains("model.depth") && e.contains("override"), "{e}");
        let e = parse_config(None, &[], vec![("NPGRID_NOPE".into(), "1".into())])
            .unwrap_err()
            .0;
        assert!(e.contains("NPGRID_NOPE"), "{e}");
    }

    #[test]
    fn type_mismatches_name_key_and_layer() {
        let (_d, p) = file("[train]\nepochs = \"many\"\n");
        let e = parse_config(Some(&p), &[], none()).unwrap_err().0;
        assert!(e.contains("train.epochs") && e.contains("config file"), "{e}");
        let e = parse_config(None, &["run.seed=-1".into()], none()).unwrap_err().0;
        assert!(e.contains("run.seed"), "{e}");
        let e = parse_config(None, &["model.widths=[1, 2.5]".into()], none())
            .unwrap_err()
            .0;
        assert!(e.contains("model.widths"), "{e}");
        assert!(parse_config(None, &["train.epochs".into()], none()).is_err());
    }

    #[test]
    fn presets_sit_under_the_file() {
        let r = parse_config(None, &["run.preset=paper".into()], none()).unwrap();
        assert_eq!(r.int("train.tasks_per_epoch"), 50_000);
        assert_eq!(r.int("train.epochs"), 100);
        assert!(matches!(r.source("train.epochs"), Source::Preset(_)));
        let (_d, p) = file("[run]\npreset = \"paper\"\n[train]\nepochs = 2\n");
        let r = parse_config(Some(&p), &[], none()).unwrap();
        assert_eq!((r.int("train.epochs"), r.int("eval.tasks")), (2, 5000));
        assert!(parse_config(None, &["run.preset=huge".into()], none()).is_err());
    }

    #[test]
    fn strings_need_no_quotes_on_the_command_line() {
        let r = parse_config(
            None,
            &["data.source=csv:/tmp/a.csv".into(), "model.kind=np".into()],
            none(),
        )
        .unwrap();
        assert_eq!(r.data().unwrap(), DataSpec::Csv("/tmp/a.csv".into()));
        assert_eq!(r.model().unwrap().kind, ModelKind::Np);
        let r = parse_config(None, &["model.margin=1".into()], none()).unwrap();
        assert_eq!(r.float("model.margin"), 1.0);
    }

    #[test]
    fn training_validation_surfaces() {
        let r = parse_config(None, &["train.epochs=0".into()], none()).unwrap();
        assert!(r.train().unwrap_err().0.contains("epochs"));
        let r = parse_config(None, &["model.kind=transformer".into()], none()).unwrap();
        assert!(r.train().is_err());
    }

    #[test]
    fn help_lists_every_key() {
        let h = keys_help();
        for k in SCHEMA {
            assert!(h.contains(k.name));
        }
    }
}
