use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mobseg_core::community::{detect_communities, DetectionConfig};
use mobseg_core::data::io::{load_any, load_city_dataset, save_snapshot, write_dir};
use mobseg_core::data::CityDataset;
use mobseg_core::model::train::{run_protocol, train, Prepared, TrainConfig};
use mobseg_core::model::{GroupModelSet, Variant};
use mobseg_core::segregation::{rank_cbgs, DEFAULT_K_BRIDGE};
use mobseg_core::synth::{generate_city, SynthConfig};
use mobseg_core::whatif::{apply_intervention, Intervention, WhatIfConfig, DEFAULT_SHAP_SAMPLES};
use mobseg_core::Error;
use serde_json::json;

#[derive(Parser)]
#[command(name = "mobseg", version, about = "Mobility-based segregation analysis")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate raw CSV/GeoJSON inputs and write a dataset snapshot.
    Ingest {
        #[arg(long)]
        flows: PathBuf,
        #[arg(long)]
        demo: PathBuf,
        #[arg(long)]
        poi: PathBuf,
        #[arg(long)]
        geo: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic city as a directory of input files.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 400)]
        cbgs: usize,
        #[arg(long, default_value_t = 2)]
        groups: usize,
        /// Segregation strength in [0, 1].
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        homophily: Option<f64>,
        /// Start from the crafted benchmark city instead (cbgs/groups ignored).
        #[arg(long)]
        crafted: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect mobility communities.
    Communities {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        attr: Option<String>,
        #[arg(long, default_value_t = 0.0)]
        wmin: f64,
        #[arg(long, default_value_t = 10)]
        max: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Rank a community's CBGs by segregation and bridging.
    Rank {
        #[arg(long)]
        dataset: PathBuf,
        /// Community id, or `others`.
        #[arg(long)]
        community: String,
        #[arg(long, default_value_t = DEFAULT_K_BRIDGE)]
        k_bridge: usize,
        #[arg(long)]
        attr: Option<String>,
        #[arg(long, default_value_t = 0.0)]
        wmin: f64,
        #[arg(long, default_value_t = 10)]
        max: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one variant and write its checkpoint.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        attr: Option<String>,
        #[arg(long, default_value = "dg+s+v")]
        variant: Variant,
        #[arg(long, default_value_t = mobseg_core::model::train::DEFAULT_EPOCHS)]
        epochs: usize,
        /// Protocol runs; more than one also prints mean test metrics.
        #[arg(long, default_value_t = 1)]
        runs: usize,
        #[arg(long, default_value_t = mobseg_core::model::train::DEFAULT_K_DEST)]
        k_dest: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "model.json")]
        out: PathBuf,
    },
    /// Run the full protocol and write the metric tables.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "g,dg,dg+s,dg+v,dg+s+v")]
        variants: Vec<Variant>,
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
        #[arg(long, default_value = "deciles.csv")]
        deciles: PathBuf,
        #[arg(long)]
        attr: Option<String>,
        #[arg(long, default_value_t = mobseg_core::model::train::DEFAULT_EPOCHS)]
        epochs: usize,
        #[arg(long, default_value_t = mobseg_core::model::train::DEFAULT_RUNS)]
        runs: usize,
        #[arg(long, default_value_t = mobseg_core::model::train::DEFAULT_K_DEST)]
        k_dest: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Apply a POI intervention to one CBG and report the change in segregation.
    Whatif {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        target: String,
        /// `poi_type=value`; repeatable.
        #[arg(long = "set", value_parser = parse_kv)]
        set: Vec<(String, f64)>,
        /// Trained checkpoint; without one, the variant is trained first.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        attr: Option<String>,
        #[arg(long, default_value = "dg+s+v")]
        variant: Variant,
        #[arg(long, default_value_t = mobseg_core::model::train::DEFAULT_EPOCHS)]
        epochs: usize,
        #[arg(long, default_value_t = mobseg_core::model::train::DEFAULT_K_DEST)]
        k_dest: usize,
        #[arg(long, default_value_t = DEFAULT_K_BRIDGE)]
        k_bridge: usize,
        #[arg(long, default_value_t = DEFAULT_SHAP_SAMPLES)]
        shap_samples: usize,
        #[arg(long)]
        expert: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Datasets to load at start-up (directory or snapshot).
        #[arg(long)]
        dataset: Vec<PathBuf>,
        /// Checkpoints to install for the last dataset.
        #[arg(long)]
        model: Vec<PathBuf>,
    },
}

fn parse_kv(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    let v: f64 = v.trim().parse().map_err(|_| format!("`{v}` is not a number"))?;
    Ok((k.trim().to_string(), v))
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    Other(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type Res<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn print(v: serde_json::Value) -> Res<()> {
    let s = serde_json::to_string_pretty(&v).map_err(|e| Error::Serde(e.to_string()))?;
    match writeln!(std::io::stdout().lock(), "{s}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(io_err(Path::new("<stdout>"))(e).into()),
        _ => Ok(()),
    }
}

fn default_attr(d: &CityDataset, attr: Option<String>) -> Res<String> {
    match attr {
        Some(a) => {
            d.attribute(&a)?;
            Ok(a)
        }
        None => d
            .attributes()
            .first()
            .map(|a| a.name.clone())
            .ok_or_else(|| CliError::Core(Error::UnknownAttribute("<none>".into()))),
    }
}

fn write_csv(path: &Path, f: impl FnOnce(BufWriter<File>) -> mobseg_core::Result<()>) -> Res<()> {
    let file = File::create(path).map_err(io_err(path))?;
    f(BufWriter::new(file))?;
    Ok(())
}

fn run(cmd: Cmd) -> Res<()> {
    match cmd {
        Cmd::Ingest {
            flows,
            demo,
            poi,
            geo,
            out,
        } => {
            let d = load_city_dataset(&flows, &demo, &poi, geo.as_deref())?;
            save_snapshot(&d, &out)?;
            print(json!({
                "out": out,
                "hash": d.content_hash(),
                "summary": d.validation_summary(),
            }))
        }
        Cmd::Synth {
            seed,
            cbgs,
            groups,
            lambda,
            homophily,
            crafted,
            out,
        } => {
            let mut cfg = if crafted {
                SynthConfig::crafted(seed)
            } else {
                SynthConfig::new(seed, cbgs, groups)
            };
            if let Some(l) = lambda {
                cfg.lambda = l;
            }
            if let Some(h) = homophily {
                cfg.homophily = h;
            }
            let (d, truth) = generate_city(&cfg)?;
            write_dir(&d, &out)?;
            let truth_path = out.join("ground_truth.json");
            let json = serde_json::to_vec(&truth).map_err(|e| Error::Serde(e.to_string()))?;
            std::fs::write(&truth_path, json).map_err(io_err(&truth_path))?;
            print(json!({
                "out": out,
                "hash": d.content_hash(),
                "cbgs": d.len(),
                "edges": d.flows().edge_count(),
            }))
        }
        Cmd::Communities {
            dataset,
            attr,
            wmin,
            max,
            seed,
        } => {
            let d = load_any(&dataset)?;
            let cfg = DetectionConfig {
                w_min: wmin,
                max_communities: max,
                seed,
                ..DetectionConfig::default()
            };
            cfg.validate()?;
            let p = detect_communities(d.flows(), &cfg)?;
            let attr = default_attr(&d, attr)?;
            let theta = d.group_proportions(&attr)?;
            print(json!({
                "attribute": attr,
                "groups": d.attribute(&attr)?.groups,
                "partition": p,
                "signatures": mobseg_core::views::community_signatures(&p, &theta),
            }))
        }
        Cmd::Rank {
            dataset,
            community,
            k_bridge,
            attr,
            wmin,
            max,
            seed,
        } => {
            let d = load_any(&dataset)?;
            let cfg = DetectionConfig {
                w_min: wmin,
                max_communities: max,
                seed,
                ..DetectionConfig::default()
            };
            cfg.validate()?;
            if k_bridge == 0 {
                return Err(Error::InvalidConfig("k_bridge must be at least 1".into()).into());
            }
            let p = detect_communities(d.flows(), &cfg)?;
            let id = if community == "others" {
                p.others_id()
            } else {
                community
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("`{community}` is not a community id")))?
            };
            if id >= p.communities.len() && id != p.others_id() {
                return Err(Error::InvalidConfig(format!("no community {id}")).into());
            }
            let attr = default_attr(&d, attr)?;
            let theta = d.group_proportions(&attr)?;
            let ranking = rank_cbgs(&d, &theta, &p.member_indices(id), k_bridge)?;
            print(json!({"community": id, "attribute": attr, "k_bridge": k_bridge, "ranking": ranking}))
        }
        Cmd::Train {
            dataset,
            attr,
            variant,
            epochs,
            runs,
            k_dest,
            seed,
            out,
        } => {
            let d = load_any(&dataset)?;
            let mut cfg = TrainConfig::new(default_attr(&d, attr)?, vec![variant]);
            cfg.epochs = epochs;
            cfg.runs = runs;
            cfg.k_dest = k_dest;
            cfg.seed = seed;
            let r = run_protocol(&d, &cfg, &mut |p| {
                eprintln!(
                    "run {}/{} {} net {} epoch {}/{}",
                    p.run + 1,
                    p.runs,
                    p.variant,
                    p.net,
                    p.epoch + 1,
                    p.epochs
                )
            })?;
            let model = r.models.into_iter().next().ok_or_else(|| CliError::Other("no model".into()))?;
            let json = model.to_json()?;
            std::fs::write(&out, json).map_err(io_err(&out))?;
            print(json!({"out": out, "variant": variant, "test_means": r.report.means}))
        }
        Cmd::Evaluate {
            dataset,
            variants,
            out,
            deciles,
            attr,
            epochs,
            runs,
            k_dest,
            seed,
        } => {
            let d = load_any(&dataset)?;
            let mut cfg = TrainConfig::new(default_attr(&d, attr)?, variants);
            cfg.epochs = epochs;
            cfg.runs = runs;
            cfg.k_dest = k_dest;
            cfg.seed = seed;
            let r = run_protocol(&d, &cfg, &mut |_| {})?;
            write_csv(&out, |w| r.report.write_metrics_csv(w))?;
            write_csv(&deciles, |w| r.report.write_deciles_csv(w))?;
            for m in &r.report.means {
                eprintln!("{:<7} cpc {:.4} jsd {:.4}", m.variant, m.scores.cpc, m.scores.jsd);
            }
            Ok(())
        }
        Cmd::Whatif {
            dataset,
            target,
            set,
            model,
            attr,
            variant,
            epochs,
            k_dest,
            k_bridge,
            shap_samples,
            expert,
            seed,
        } => {
            let d = load_any(&dataset)?;
            d.require_index(&target)?;
            let m = match model {
                Some(p) => {
                    let s = std::fs::read_to_string(&p).map_err(io_err(&p))?;
                    GroupModelSet::from_json(&s)?
                }
                None => {
                    let mut cfg = TrainConfig::new(default_attr(&d, attr)?, vec![variant]);
                    cfg.epochs = epochs;
                    cfg.k_dest = k_dest;
                    cfg.seed = seed;
                    train(&d, &cfg, variant)?
                }
            };
            let prep = Prepared::new(&d, &m.attribute, m.k_dest)?;
            let iv = Intervention {
                target,
                deltas: set.into_iter().collect(),
                expert,
            };
            let cfg = WhatIfConfig {
                k_bridge,
                seed,
                shap_samples,
            };
            let r = apply_intervention(&m, &prep, &iv, &cfg)?;
            print(json!(r))
        }
        Cmd::Serve { config, dataset, model } => {
            let cfg = mobseg_service::ServiceConfig::load(config.as_deref())?;
            let state = mobseg_service::AppState::new(cfg);
            let mut last = None;
            for p in &dataset {
                last = Some(state.add_dataset(load_any(p)?)?);
            }
            for p in &model {
                let id = last
                    .as_deref()
                    .ok_or_else(|| CliError::Other("--model needs a --dataset".into()))?;
                let s = std::fs::read_to_string(p).map_err(io_err(p))?;
                state.add_model(id, GroupModelSet::from_json(&s)?);
            }
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Other(e.to_string()))?;
            rt.block_on(mobseg_service::serve(state))
                .map_err(|e| CliError::Other(e.to_string()))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Core(e)) => {
            eprintln!("error [{}]: {e}", e.kind());
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
        Err(CliError::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::FAILURE
        }
    }
}
