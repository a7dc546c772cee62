use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dan::config::RunConfig;
use dan::metrics::{self, DEFAULT_BUCKETS};
use dan::model::Recognizer;
use dan::synth::{self, GlyphFont, RenderOpts};
use dan::train::{self, Perturbation, Trainer, DEFAULT_CROPS};
use dan::DanError;

#[derive(Parser, Debug)]
#[command(name = "dan", version, about = "Decoupled attention text recognizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset of PGM images and a label index.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        min_len: usize,
        #[arg(long, default_value_t = 12)]
        max_len: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        height: usize,
        #[arg(long, default_value = synth::DEFAULT_ALPHABET)]
        alphabet: String,
    },
    /// Train a model described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Training set directory (overrides `train_data`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Validation set directory (overrides `val_data`).
        #[arg(long)]
        val: Option<PathBuf>,
        /// Output directory (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop once this many epochs are complete (overrides `epochs`).
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides `seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// CSV report path.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum)]
        perturb: Vec<PerturbKind>,
        #[arg(long, default_value_t = 0.1)]
        pad_frac: f64,
        #[arg(long, default_value_t = 0.2)]
        stretch_frac: f64,
        /// Also report multi-crop voting.
        #[arg(long)]
        crop_vote: bool,
        /// Crop strategies as `top,bottom` percentages of the height, separated
        /// by `;` (default `0,0;5,0;0,5;10,0;0,10;10,10`).
        #[arg(long)]
        crops: Option<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Attention misalignment per length bucket, optionally against a second model.
    Diagnose {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated bucket edges, e.g. `0,30,40,50,60,70`.
        #[arg(long)]
        buckets: Option<String>,
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Decode one image and write per-step attention heatmaps.
    ExportAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PerturbKind {
    Pad,
    Stretch,
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn exit_code(e: &DanError) -> u8 {
    match e {
        DanError::Config(_) | DanError::Data(_) | DanError::Vocab(_) | DanError::Checkpoint(_) | DanError::Io(_) => {
            EXIT_DATA
        }
        DanError::Shape(_) | DanError::Graph(_) => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn parse_crops(s: &str) -> dan::Result<Vec<(usize, usize)>> {
    let bad = || DanError::Config(format!("bad crop list {s:?}, expected e.g. 0,0;10,10"));
    s.split(';')
        .map(|pair| {
            let (t, b) = pair.split_once(',').ok_or_else(bad)?;
            let t: usize = t.trim().parse().map_err(|_| bad())?;
            let b: usize = b.trim().parse().map_err(|_| bad())?;
            if t + b >= 100 {
                return Err(bad());
            }
            Ok((t, b))
        })
        .collect()
}

fn load_model(path: &Path) -> dan::Result<Recognizer> {
    Ok(Recognizer::load_checkpoint(path)?.0)
}

fn run(cmd: Command) -> dan::Result<()> {
    match cmd {
        Command::GenData {
            n,
            min_len,
            max_len,
            noise,
            seed,
            out,
            height,
            alphabet,
        } => {
            let opts = RenderOpts {
                height,
                noise_sigma: noise,
                ..RenderOpts::default()
            };
            let samples = synth::generate_dataset(n, (min_len, max_len), &alphabet, &GlyphFont::default(), &opts, seed)?;
            synth::save_dataset(&out, &samples)?;
            println!("wrote {} samples to {}", samples.len(), out.display());
        }
        Command::Train {
            config,
            data,
            val,
            out,
            resume,
            epochs,
            seed,
        } => {
            let mut run = RunConfig::load(&config)?;
            if let Some(s) = seed {
                run.seed = s;
            }
            if let Some(d) = data {
                run.train_data = d;
            }
            if let Some(v) = val {
                run.val_data = v;
            }
            if let Some(o) = out {
                run.out_dir = o;
            }
            let mut trainer = if resume {
                let t = Trainer::resume(&run.out_dir.join(train::CHECKPOINT_FILE))?;
                if t.run.model != run.model || t.run.seed != run.seed {
                    return Err(DanError::Config("checkpoint model or seed differs from the config".into()));
                }
                t
            } else {
                Trainer::new(&run)?
            };
            trainer.run.epochs = epochs.unwrap_or(run.epochs);
            let train_set = synth::load_dataset(&run.train_data)?;
            trainer.model.check_labels(&train_set.iter().map(|s| s.label.as_str()).collect::<Vec<_>>())?;
            let val_set = if run.val_data.as_os_str().is_empty() {
                Vec::new()
            } else {
                synth::load_dataset(&run.val_data)?
            };
            trainer.fit(&train_set, &val_set, &run.out_dir)?;
            if let Some(m) = trainer.history.last() {
                println!("{}\n{}", train::METRICS_HEADER, m.csv_row());
            }
        }
        Command::Eval {
            ckpt,
            data,
            report,
            perturb,
            pad_frac,
            stretch_frac,
            crop_vote,
            crops,
            seed,
        } => {
            let model = load_model(&ckpt)?;
            let samples = synth::load_dataset(&data)?;
            let perturbations: Vec<Perturbation> = perturb
                .iter()
                .map(|p| match p {
                    PerturbKind::Pad => Perturbation::Pad(pad_frac),
                    PerturbKind::Stretch => Perturbation::Stretch(stretch_frac),
                })
                .collect();
            let strategies = match crops {
                Some(c) => parse_crops(&c)?,
                None => DEFAULT_CROPS.to_vec(),
            };
            let crops = crop_vote.then_some(&strategies[..]);
            let rows = train::eval_rows(&model, &samples, &perturbations, crops, seed)?;
            let csv = train::report_csv(&rows);
            fs::write(&report, &csv)?;
            print!("{csv}");
        }
        Command::Diagnose {
            ckpt,
            data,
            buckets,
            compare,
            out_dir,
        } => {
            let buckets = match buckets {
                Some(b) => metrics::parse_buckets(&b)
                    .ok_or_else(|| DanError::Config(format!("bad bucket list {b:?}")))?,
                None => DEFAULT_BUCKETS.to_vec(),
            };
            let samples = synth::load_dataset(&data)?;
            let a = train::evaluate(&load_model(&ckpt)?, &samples)?;
            fs::create_dir_all(&out_dir)?;
            let mm = a.misalignment(&buckets);
            fs::write(out_dir.join("misalignment.csv"), mm.to_csv())?;
            print!("{}", mm.to_csv());
            if let Some(other) = compare {
                let b = train::evaluate(&load_model(&other)?, &samples)?;
                fs::write(out_dir.join("misalignment_compare.csv"), b.misalignment(&buckets).to_csv())?;
                let csv = train::compare_csv(&a, &b, &buckets);
                fs::write(out_dir.join("compare.csv"), &csv)?;
                print!("{csv}");
            }
        }
        Command::ExportAttn { ckpt, image, out_dir } => {
            let model = load_model(&ckpt)?;
            let img = train::fit_image(&model, &synth::read_pgm(&image)?)?;
            let out = model.decode(&img)?;
            let files = dan::export::export_attention(&out, &out_dir)?;
            println!("decoded {:?}; wrote {} files to {}", out.text, files.len(), out_dir.display());
        }
    }
    Ok(())
}
