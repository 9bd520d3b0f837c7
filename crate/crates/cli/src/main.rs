mod args;
mod train;

use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use args::{BatchAction, Cli, Command, RoleArg, UserAction};
use clap::Parser;
use gigaslide_api::pipeline::{self, IngestOptions};
use gigaslide_api::reports::{self, ReportFilters};
use gigaslide_api::AppState;
use gigaslide_core::pyramid::max_level_for;
use gigaslide_core::semisup::{Hyper, ModelFile};
use gigaslide_core::Config;
use gigaslide_store::{Role, Store};

fn open_store(cfg: &Config) -> Result<Store> {
    if let Some(dir) = cfg.db_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Store::open(&cfg.db_path, cfg.classes.clone()).with_context(|| format!("opening {}", cfg.db_path.display()))
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = cli.global.resolve()?;
    match cli.command {
        Command::Ingest {
            image,
            name,
            scan_mag,
            target_mag,
            force,
        } => {
            let store = open_store(&cfg)?;
            let opts = IngestOptions {
                scan_magnification: scan_mag,
                target_magnification: target_mag.unwrap_or(scan_mag),
                force,
            };
            let record = pipeline::ingest_file(&store, &cfg, &image, &name, opts)?;
            let grid = pipeline::slide_grid(&record)?;
            println!(
                "ingested {}: {}x{} working px, scale factor {}, {} levels, {}/{} patches kept",
                record.name,
                record.width,
                record.height,
                record.scale_factor,
                max_level_for(record.width, record.height) + 1,
                grid.kept.len(),
                grid.positions.len()
            );
        }
        Command::Predict {
            slide,
            model,
            predictions,
            save_predictions,
        } => {
            let store = open_store(&cfg)?;
            let record = store.slide(&slide)?;
            let preds = match (model, predictions) {
                (Some(m), None) => {
                    let text = std::fs::read_to_string(&m).with_context(|| format!("reading {}", m.display()))?;
                    let model: ModelFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", m.display()))?;
                    pipeline::predict_with_model(&cfg, &record, &model)?
                }
                (None, Some(p)) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    pipeline::parse_predictions(&text, Some(&slide))?
                }
                _ => unreachable!("clap enforces exactly one source"),
            };
            if let Some(out) = save_predictions {
                write_output(Some(&out), &pipeline::format_predictions(&preds))?;
            }
            let outcome = pipeline::run_predictions(&store, &cfg, &slide, &preds)?;
            println!(
                "slide {}: {} predictions, {} regions, {} proposals created",
                outcome.slide,
                outcome.predictions,
                outcome.polygons,
                outcome.proposal_ids.len()
            );
        }
        Command::Train {
            labeled,
            unlabeled,
            test,
            out,
            seed,
            epochs,
            learning_rate,
            batch_size,
        } => {
            let hyper = Hyper {
                learning_rate,
                epochs,
                batch_size,
                seed,
            };
            let s = train::train_from_manifests(&labeled, &unlabeled, test.as_deref(), &hyper)?;
            write_output(Some(&out), &serde_json::to_string_pretty(&s.model)?)?;
            println!("labeled: {}, unlabeled: {}, evaluated: {}", s.labeled, s.unlabeled, s.evaluated_on);
            println!("teacher accuracy: {:.4}", s.teacher_accuracy);
            println!("student accuracy: {:.4}", s.student_accuracy);
            println!("model written to {}", out.display());
        }
        Command::Batch { action } => {
            let store = open_store(&cfg)?;
            match action {
                BatchAction::Create { name, slides, dense } => {
                    let b = store.create_batch(&name, &slides, dense)?;
                    println!("created batch {} with {} slides, dense={}", b.name, b.slide_names.len(), b.dense);
                }
                BatchAction::Assign { name, users } => {
                    let b = store.assign_users(&name, &users)?;
                    println!("batch {} assigned to {}", b.name, b.assigned_users.join(","));
                }
                BatchAction::List => {
                    for b in store.batches()? {
                        println!(
                            "{}\tdense={}\tslides={}\tusers={}",
                            b.name,
                            b.dense,
                            b.slide_names.len(),
                            b.assigned_users.join(",")
                        );
                    }
                }
            }
        }
        Command::Report {
            kind,
            output,
            batch,
            annotator,
            group_by,
        } => {
            let store = open_store(&cfg)?;
            let filters = ReportFilters {
                batch,
                annotator,
                group_by,
            };
            let report = reports::build_report(&store, &kind, &filters, cfg.session_cap_ms())?;
            write_output(output.as_deref(), &serde_json::to_string_pretty(&report)?)?;
        }
        Command::Serve => {
            let store = Arc::new(open_store(&cfg)?);
            let port = cfg.port;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(("0.0.0.0", port))
                    .await
                    .with_context(|| format!("cannot listen on port {port}"))?;
                gigaslide_api::serve(listener, AppState::new(store, cfg)).await?;
                Ok::<_, anyhow::Error>(())
            })?;
        }
        Command::User { action } => {
            let store = open_store(&cfg)?;
            match action {
                UserAction::Add { name, role } => {
                    let role = match role {
                        RoleArg::Expert => Role::Expert,
                        RoleArg::Annotator => Role::Annotator,
                    };
                    let u = store.add_user(&name, role)?;
                    println!("{}", u.token);
                }
                UserAction::List => {
                    for u in store.users()? {
                        println!("{}\t{}\t{}", u.name, u.role, u.token);
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
