//! Command-line surface: argument parsing and dispatch to the library.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gnnformer::embed::{PeMode, SceneInput, Variant};
use gnnformer::gradcheck;
use gnnformer::interpret::{importance_map, render_overlay};
use gnnformer::metrics::EvalReport;
use gnnformer::scene::dataset::{read_jsonl, Dataset};
use gnnformer::scene::{Scene, SceneParams};
use gnnformer::seq2seq::AttentionRecord;
use gnnformer::tensor::{checkpoint, Tape};
use gnnformer::train::{
    run_ablation_suite, run_sweep, strip_eos, train, Bundle, Experiment, SweepParam, TrainConfig,
};
use gnnformer::{DType, Error, Model, Scalar};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "gnnformer", version, about = "Cell-graph Transformer report generation on synthetic scenes")]
pub struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/val/test JSONL splits and vocab.json.
    GenData(GenDataArgs),
    /// Train one model and write best.ckpt, its metadata and log.jsonl.
    Train(TrainArgs),
    /// Score a checkpoint on a JSONL split and write metrics JSON.
    Eval(EvalArgs),
    /// Train every variant over several seeds and write a results table.
    Ablate(AblateArgs),
    /// Vary one hyperparameter and report validation BLEU-4.
    Sweep(SweepArgs),
    /// Write an importance overlay SVG and its JSON sidecar for one scene.
    Visualize(VisualizeArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DTypeArg {
    F32,
    F64,
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::F32 => DType::F32,
            DTypeArg::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 512)]
    pub train: usize,
    #[arg(long, default_value_t = 128)]
    pub val: usize,
    #[arg(long, default_value_t = 128)]
    pub test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256.0)]
    pub width: f64,
    #[arg(long, default_value_t = 256.0)]
    pub height: f64,
    #[arg(long, default_value_t = 30)]
    pub min_cells: usize,
    #[arg(long, default_value_t = 120)]
    pub max_cells: usize,
}

impl GenDataArgs {
    pub fn scene_params(&self) -> SceneParams {
        SceneParams {
            width: self.width,
            height: self.height,
            min_cells: self.min_cells,
            max_cells: self.max_cells,
        }
    }
}

/// Training hyperparameters; unset flags fall back to `--config` or the defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// JSON file with a full or partial training config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model variant: full, no-gnn, no-graph, no-global or frozen-encoder.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Neighbours per cell in the kNN graph.
    #[arg(long)]
    pub k: Option<usize>,
    /// Weight on normalized coordinates in the kNN embedding.
    #[arg(long)]
    pub coord_weight: Option<f64>,
    /// Number of GIN layers.
    #[arg(long)]
    pub gnn_layers: Option<usize>,
    #[arg(long)]
    pub enc_layers: Option<usize>,
    #[arg(long)]
    pub dec_layers: Option<usize>,
    /// Attention heads; must divide d_model.
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Feed-forward width; 0 means 4 × d_model.
    #[arg(long)]
    pub ff_dim: Option<usize>,
    #[arg(long)]
    pub encoder_width: Option<usize>,
    /// Cell position embedding: sine, learned or none.
    #[arg(long)]
    pub pe_mode: Option<PeMode>,
    /// Include the input layer in the learned sum over GNN layers.
    #[arg(long)]
    pub agg_include_input: bool,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Optimizer steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Validation rounds without improvement before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Steps between validation rounds.
    #[arg(long)]
    pub val_every: Option<usize>,
    /// Global gradient-norm clip.
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Maximum generated report length.
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl TrainFlags {
    pub fn to_config(&self) -> Result<TrainConfig, Error> {
        let mut c = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::DataMissing(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
            }
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f.clone() { c.$f = v; } )* };
        }
        set!(
            variant, k, coord_weight, gnn_layers, enc_layers, dec_layers, heads, d_model, ff_dim,
            encoder_width, pe_mode, dropout, lr, batch_size, max_steps, patience, val_every, clip_norm,
            max_len, seed
        );
        if self.agg_include_input {
            c.agg_include_input = true;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory with train/val/test JSONL and vocab.json.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = DTypeArg::F32)]
    pub dtype: DTypeArg,
    /// Write each training scene's cell graph as JSON into this directory.
    #[arg(long)]
    pub dump_graphs: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL split to score.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Beam width; 1 is greedy decoding.
    #[arg(long, default_value_t = 1)]
    pub beam: usize,
    /// Write the generated reports as JSONL.
    #[arg(long)]
    pub reports: Option<PathBuf>,
    /// Write per-scene attention matrices as JSON into this directory.
    #[arg(long)]
    pub record_attention: Option<PathBuf>,
    /// Defaults to the checkpoint's own precision.
    #[arg(long, value_enum)]
    pub dtype: Option<DTypeArg>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    pub seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_values_t = Variant::ALL.to_vec())]
    pub variants: Vec<Variant>,
    #[arg(long, value_enum, default_value_t = DTypeArg::F32)]
    pub dtype: DTypeArg,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// One of k, gnn_layers, enc_layers, dec_layers, pe_mode, encoder_width.
    #[arg(long)]
    pub param: SweepParam,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    #[arg(long, value_enum, default_value_t = DTypeArg::F32)]
    pub dtype: DTypeArg,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL split containing the scene.
    #[arg(long)]
    pub data: PathBuf,
    /// Scene id.
    #[arg(long)]
    pub scene: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Token index in the generated report; defaults to the conclusion keyword.
    #[arg(long)]
    pub token_pos: Option<usize>,
    #[arg(long, value_enum)]
    pub dtype: Option<DTypeArg>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the per-check results as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_numerical() {
            EXIT_NUMERIC
        } else if e.is_data_error() {
            EXIT_DATA
        } else if matches!(e, Error::InvalidConfig(_) | Error::InvalidParams(_)) {
            EXIT_USAGE
        } else {
            EXIT_OTHER
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_DATA,
        message: format!("{}: {e}", path.display()),
    }
}

fn write(path: &Path, text: &str) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn mkdir(path: &Path) -> Outcome {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn checkpoint_dtype(path: &Path) -> Result<DType, Error> {
    let bytes = fs::read(path).map_err(|e| Error::DataMissing(format!("{}: {e}", path.display())))?;
    Ok(checkpoint::read_header(&bytes)?.dtype)
}

pub fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => match a.dtype {
            DTypeArg::F32 => train_cmd::<f32>(&a),
            DTypeArg::F64 => train_cmd::<f64>(&a),
        },
        Command::Eval(a) => {
            let dtype = match a.dtype {
                Some(d) => d.into(),
                None => checkpoint_dtype(&a.checkpoint)?,
            };
            match dtype {
                DType::F32 => eval_cmd::<f32>(&a),
                DType::F64 => eval_cmd::<f64>(&a),
            }
        }
        Command::Ablate(a) => match a.dtype {
            DTypeArg::F32 => ablate_cmd::<f32>(&a),
            DTypeArg::F64 => ablate_cmd::<f64>(&a),
        },
        Command::Sweep(a) => match a.dtype {
            DTypeArg::F32 => sweep_cmd::<f32>(&a),
            DTypeArg::F64 => sweep_cmd::<f64>(&a),
        },
        Command::Visualize(a) => {
            let dtype = match a.dtype {
                Some(d) => d.into(),
                None => checkpoint_dtype(&a.checkpoint)?,
            };
            match dtype {
                DType::F32 => visualize_cmd::<f32>(&a),
                DType::F64 => visualize_cmd::<f64>(&a),
            }
        }
        Command::Gradcheck(a) => gradcheck_cmd(&a),
    }
}

fn gen_data(a: &GenDataArgs) -> Outcome {
    let params = a.scene_params();
    params.validate()?;
    let ds = Dataset::generate(a.train, a.val, a.test, a.seed, &params)?;
    ds.write_dir(&a.out)?;
    log::info!("wrote {} / {} / {} scenes to {}", a.train, a.val, a.test, a.out.display());
    Ok(())
}

fn train_cmd<T: Scalar>(a: &TrainArgs) -> Outcome {
    let config = a.flags.to_config()?;
    let ds = Dataset::read_dir(&a.data)?;
    let exp = Experiment::new(&ds, config.k, config.coord_weight)?;
    if let Some(dir) = &a.dump_graphs {
        mkdir(dir)?;
        for scene in &ds.train {
            let g = exp.builder.build(scene)?;
            write(&dir.join(format!("train-{}.json", scene.id)), &g.to_json().map_err(Error::from)?)?;
        }
    }
    mkdir(&a.out)?;
    let outcome = train::<T>(&config, &exp, Some(&a.out))?;
    log::info!(
        "best val BLEU-4 {:.4} at step {} of {}",
        outcome.best_val_bleu4,
        outcome.best_step,
        outcome.steps
    );
    Ok(())
}

fn load_split(path: &Path) -> Result<Vec<Scene>, Error> {
    read_jsonl(path)
}

fn eval_cmd<T: Scalar>(a: &EvalArgs) -> Outcome {
    if a.beam == 0 {
        return Err(Error::InvalidConfig("--beam must be at least 1".into()).into());
    }
    let (bundle, model) = Bundle::load::<T>(&a.checkpoint)?;
    let scenes = load_split(&a.data)?;
    let builder = bundle.graph_builder();
    let max_len = bundle.train.max_len;
    if let Some(dir) = &a.record_attention {
        mkdir(dir)?;
    }
    let mut hyps = Vec::with_capacity(scenes.len());
    let mut refs = Vec::with_capacity(scenes.len());
    let mut lines = String::new();
    for scene in &scenes {
        let input = SceneInput::new(scene, &builder)?;
        let ids = if a.beam == 1 {
            model.generate(&input, max_len)?
        } else {
            model.beam_search(&input, a.beam, max_len)?
        };
        if let Some(dir) = &a.record_attention {
            let record = attention_record(&model, &input, &ids)?;
            write(&dir.join(format!("scene-{}.json", scene.id)), &json(&record))?;
        }
        let words = bundle.vocab.decode(&ids);
        lines.push_str(&serde_json::to_string(&serde_json::json!({"id": scene.id, "report": words})).map_err(Error::from)?);
        lines.push('\n');
        hyps.push(words);
        refs.push(scene.reports.iter().map(|r| strip_eos(r)).collect());
    }
    let report = EvalReport::compute(&hyps, &refs);
    write(&a.out, &json(&report))?;
    if let Some(path) = &a.reports {
        write(path, &lines)?;
    }
    log::info!("BLEU-4 {:.2}, macro-F1 {:.2} over {} scenes", report.bleu4, report.macro_f1, report.n);
    Ok(())
}

/// Attention of a teacher-forced pass over the generated report.
fn attention_record<T: Scalar>(model: &Model<T>, input: &SceneInput, ids: &[usize]) -> Result<AttentionRecord, Error> {
    let mut prefix = vec![gnnformer::scene::BOS];
    prefix.extend_from_slice(ids);
    let mut tape = Tape::new();
    model.decode_logits(&mut tape, input, &prefix)?;
    Ok(AttentionRecord::from_tape(&tape))
}

fn ablate_cmd<T: Scalar>(a: &AblateArgs) -> Outcome {
    let base = a.flags.to_config()?;
    let ds = Dataset::read_dir(&a.data)?;
    mkdir(&a.out)?;
    let table = run_ablation_suite::<T>(&ds, &base, &a.seeds, &a.variants, Some(&a.out))?;
    write(&a.out.join("ablation.json"), &json(&table))?;
    write(&a.out.join("ablation.md"), &table.to_markdown())?;
    Ok(())
}

fn sweep_cmd<T: Scalar>(a: &SweepArgs) -> Outcome {
    let base = a.flags.to_config()?;
    let ds = Dataset::read_dir(&a.data)?;
    mkdir(&a.out)?;
    let table = run_sweep::<T>(a.param, &a.values, &ds, &base, Some(&a.out))?;
    write(&a.out.join("sweep.json"), &json(&table))?;
    write(&a.out.join("sweep.md"), &table.to_markdown())?;
    Ok(())
}

fn visualize_cmd<T: Scalar>(a: &VisualizeArgs) -> Outcome {
    let (bundle, model) = Bundle::load::<T>(&a.checkpoint)?;
    let scenes = load_split(&a.data)?;
    let scene = scenes
        .iter()
        .find(|s| s.id == a.scene)
        .ok_or_else(|| Error::DataMissing(format!("scene {} not in {}", a.scene, a.data.display())))?;
    let input = SceneInput::new(scene, &bundle.graph_builder())?;
    let (map, words) = importance_map(&model, scene, &input, &bundle.vocab, a.token_pos)?;
    render_overlay(scene, &map, &a.out)?;
    log::info!("report: {}", words.join(" "));
    log::info!("scored token {:?} at position {}", map.token, map.target_pos);
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Outcome {
    let results = gradcheck::run_suite(a.seed)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<28} {:>10.3e} < {:.0e}  {status}", r.name, r.max_rel_err, r.tolerance);
        failed += usize::from(!r.passed());
    }
    if let Some(path) = &a.out {
        write(path, &json(&results))?;
    }
    if failed > 0 {
        return Err(Failure {
            code: EXIT_NUMERIC,
            message: format!("{failed} of {} gradient checks exceeded tolerance", results.len()),
        });
    }
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
