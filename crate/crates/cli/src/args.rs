use std::path::PathBuf;
use std::str::FromStr;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use fusedkv::cache_sharing::Strategy;
use fusedkv::costmodel::Method;
use fusedkv::model::{AdamW, InitScheme, LrSchedule, ModelConfig, Precision, Task, TrainConfig};
use fusedkv::verify::Suite;
use serde::Serialize;

use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "fusedkv",
    version,
    about = "Cross-layer KV cache sharing laboratory: training, invariant suites and cost sweeps",
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model on a synthetic task and write its loss and gradient-norm reports.
    Train(TrainCmd),
    /// Run invariant suites; exits 3 naming every failing check.
    Verify(VerifyCmd),
    /// Sweep the analytic cost model over methods, sequence lengths and devices.
    Cost(CostCmd),
    /// Write the learned fusion weights as a target × source matrix.
    Heatmap(HeatmapCmd),
    /// Time cached decoding against full recomputation and check they agree.
    DecodeBench(DecodeCmd),
    /// Train several strategies under one config and merge their reports.
    Compare(CompareCmd),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Verify(_) => "verify",
            Command::Cost(_) => "cost",
            Command::Heatmap(_) => "heatmap",
            Command::DecodeBench(_) => "decode-bench",
            Command::Compare(_) => "compare",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Directory for reports and the manifest.
    #[arg(long, env = "FUSEDKV_OUT_DIR", default_value = "fusedkv-out")]
    pub out_dir: PathBuf,

    /// Report format; JSON mirrors the CSV columns.
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,

    /// Plain `key=value` file of flags for this command. Flags given on the
    /// command line take precedence.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 8 layers, d_model 64, 8 heads, vocab 64, context 128.
    Desk,
    /// 4 layers, d_model 16, 4 heads, vocab 16, context 64.
    Toy,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Base shape that the other model flags override.
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub q_heads: Option<usize>,
    #[arg(long)]
    pub kv_heads: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub max_seq: Option<usize>,
    /// Last storage layer of the FusedKV family and the CLA/YOCO split.
    #[arg(long)]
    pub middle: Option<usize>,
    /// `normal` or `equivalent` (FusedKV only).
    #[arg(long)]
    pub init: Option<InitScheme>,
    #[arg(long)]
    pub init_std: Option<f64>,
    #[arg(long)]
    pub rope_base: Option<f64>,
    /// `f64` or `f32`.
    #[arg(long)]
    pub precision: Option<Precision>,
}

impl ModelArgs {
    pub fn resolve(&self, strategy: Strategy) -> Result<ModelConfig> {
        let mut cfg = match self.preset {
            Preset::Desk => ModelConfig::desk(strategy),
            Preset::Toy => ModelConfig::toy(strategy),
        };
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut cfg.num_layers, self.layers);
        set(&mut cfg.d_model, self.d_model);
        set(&mut cfg.q_heads, self.q_heads);
        set(&mut cfg.kv_heads, self.kv_heads);
        set(&mut cfg.ffn_dim, self.ffn_dim);
        set(&mut cfg.vocab, self.vocab);
        set(&mut cfg.max_seq, self.max_seq);
        match self.middle {
            Some(m) => cfg.middle = m,
            None => cfg.middle = cfg.num_layers / 2,
        }
        cfg.init = self.init.unwrap_or(cfg.init);
        cfg.init_std = self.init_std.unwrap_or(cfg.init_std);
        cfg.rope_base = self.rope_base.unwrap_or(cfg.rope_base);
        cfg.precision = self.precision.unwrap_or(cfg.precision);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// `copy`, `induction` or `char-corpus`.
    #[arg(long, default_value = "copy")]
    pub task: Task,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    /// Seeds both the weight init and the data stream.
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Tokens per training example.
    #[arg(long, default_value_t = 17)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = Schedule::Constant)]
    pub schedule: Schedule,
    #[arg(long, default_value_t = 0)]
    pub warmup_steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    #[arg(long, default_value_t = 1.0)]
    pub grad_clip: f64,
    /// Gradient norms are recorded every this many steps.
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
}

impl TrainArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CliError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(CliError::Config(format!("gradient clip {} must be nonnegative", self.grad_clip)));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(CliError::Config("batch size and log interval must be positive".into()));
        }
        Ok(TrainConfig {
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            seed: self.seed,
            log_every: self.log_every,
            optimizer: AdamW {
                lr: self.lr,
                weight_decay: self.weight_decay,
                grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
                schedule: match self.schedule {
                    Schedule::Constant => LrSchedule::Constant,
                    Schedule::Cosine => LrSchedule::Cosine,
                },
                warmup_steps: self.warmup_steps,
                ..AdamW::default()
            },
            ..TrainConfig::new(self.task, self.steps)
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainCmd {
    #[arg(long, default_value = "vanilla")]
    pub strategy: Strategy,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Also save the trained weights as `model.ckpt`.
    #[arg(long)]
    pub checkpoint: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

/// `all` or one suite name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteSel {
    All,
    One(Suite),
}

impl FromStr for SuiteSel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(SuiteSel::All);
        }
        s.parse().map(SuiteSel::One).map_err(|_| {
            let names: Vec<&str> = Suite::ALL.iter().map(|s| s.name()).collect();
            format!("unknown suite {s:?}; expected all, {}", names.join(", "))
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct VerifyCmd {
    #[arg(long, default_value = "all")]
    pub suite: SuiteSel,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

/// Sequence lengths: `a..b` doubles from `a` up to `b`, `a,b,c` lists them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLens(pub Vec<u64>);

impl FromStr for SeqLens {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let num = |x: &str| -> std::result::Result<u64, String> {
            match x.trim().parse::<u64>() {
                Ok(n) if n > 0 => Ok(n),
                _ => Err(format!("{x:?} is not a positive length")),
            }
        };
        if let Some((a, b)) = s.split_once("..") {
            let (a, b) = (num(a)?, num(b)?);
            if a > b {
                return Err(format!("empty range {s}"));
            }
            let mut out = Vec::new();
            let mut n = a;
            while n <= b {
                out.push(n);
                n = n.checked_mul(2).ok_or("range overflows")?;
            }
            return Ok(SeqLens(out));
        }
        s.split(',').map(num).collect::<std::result::Result<_, _>>().map(SeqLens)
    }
}

#[derive(Debug, Clone, Args)]
pub struct CostCmd {
    /// Comma-separated methods: MHA (or GQA), YOCO, FusedKV-Lite, FusedKV.
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', default_value = "MHA,YOCO,FusedKV-Lite,FusedKV")]
    pub methods: Vec<Method>,
    /// Prefill lengths, `a..b` doubling or a comma list.
    #[arg(long = "seq-lens", visible_alias = "S", default_value = "2048..32768")]
    pub seq_lens: SeqLens,
    #[arg(long, default_value_t = 24)]
    pub layers: u64,
    #[arg(long, default_value_t = 128)]
    pub head_dim: u64,
    #[arg(long, default_value_t = 16)]
    pub q_heads: u64,
    #[arg(long, default_value_t = 16)]
    pub kv_heads: u64,
    /// Context length of the costed decode step; defaults to each prefill length.
    #[arg(long)]
    pub decode_pos: Option<u64>,
    #[arg(long, default_value_t = 2)]
    pub bytes_per_elem: u64,
    /// Comma-separated device presets (h20, a100, h100) or key=value profile files.
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', default_value = "h20")]
    pub devices: Vec<String>,
    /// Weight bytes streamed per step; defaults to the toy model's parameter bytes.
    #[arg(long)]
    pub weight_bytes: Option<f64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct HeatmapCmd {
    #[arg(long, default_value = "dense-fusion")]
    pub strategy: Strategy,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct DecodeCmd {
    /// Comma-separated strategies; defaults to the whole catalog.
    #[arg(long, action = ArgAction::Set, value_delimiter = ',')]
    pub strategies: Vec<Strategy>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 32)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 16)]
    pub new_tokens: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CompareCmd {
    /// Comma-separated strategies, at least two.
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', required = true)]
    pub strategies: Vec<Strategy>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seq_len_ranges_double() {
        assert_eq!("2048..32768".parse::<SeqLens>().unwrap().0, vec![2048, 4096, 8192, 16384, 32768]);
        assert_eq!("3..10".parse::<SeqLens>().unwrap().0, vec![3, 6]);
        assert_eq!("5,7".parse::<SeqLens>().unwrap().0, vec![5, 7]);
        assert_eq!("9".parse::<SeqLens>().unwrap().0, vec![9]);
        assert!("10..3".parse::<SeqLens>().is_err());
        assert!("0,4".parse::<SeqLens>().is_err());
    }

    #[test]
    fn suite_selection() {
        assert_eq!("ALL".parse::<SuiteSel>().unwrap(), SuiteSel::All);
        assert_eq!("rope".parse::<SuiteSel>().unwrap(), SuiteSel::One(Suite::Rope));
        assert!("nope".parse::<SuiteSel>().is_err());
    }

    #[test]
    fn middle_defaults_to_half_depth() {
        let cli = Cli::try_parse_from(["fusedkv", "train", "--seed", "1", "--layers", "6", "--strategy", "fusedkv"]).unwrap();
        let Command::Train(cmd) = cli.command else { panic!() };
        assert_eq!(cmd.model.resolve(cmd.strategy).unwrap().middle, 3);
    }

    #[test]
    fn last_flag_wins() {
        let cli = Cli::try_parse_from(["fusedkv", "cost", "--methods", "mha", "--methods", "fusedkv,yoco"]).unwrap();
        let Command::Cost(cmd) = cli.command else { panic!() };
        assert_eq!(cmd.methods, vec![Method::FusedKv, Method::Yoco]);
    }
}
