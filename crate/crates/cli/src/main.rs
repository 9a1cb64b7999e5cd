use clap::{Args, Parser, Subcommand};
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use trajgeom::archive::{load_items, Cohort};
use trajgeom::calib::{difficulties_from_table, loo_recalibration, FitConfig, ResponseMatrix};
use trajgeom::geometry::{
    geometry_for_cohort, rows_from_table, CohortGeometryOptions, CohortGeometryRow,
};
use trajgeom::lencorr::BootstrapSpec;
use trajgeom::pipeline::{
    behavior_stage, calibrate, lencorr_stage, probe_stage, run_pipeline, segment_table,
    strat_stage, write_table, PipelineConfig, Plan, PlotKind, ScaleSource, StageTables,
    StratInputs,
};
use trajgeom::synth::{synth_cohort, SynthSpec};
use trajgeom::{emit_plot_data, Error, ItemMeta, Result, ResultTable};

/// Length-corrected trajectory geometry.
#[derive(Parser)]
#[command(name = "trajgeom", version)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; all cores by default.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct CohortArg {
    /// Cohort root; overrides the configured one.
    #[arg(long)]
    cohort: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct Upstream {
    #[command(flatten)]
    cohort: CohortArg,
    /// Geometry table; `<out>/geometry.csv` by default.
    #[arg(long)]
    geometry: Option<PathBuf>,
    /// Difficulty table with item_id and b; `<out>/difficulty.csv` by default.
    #[arg(long)]
    difficulty: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort to --out.
    Synth {
        /// Spec file (TOML); the reversal preset otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// reversal or null.
        #[arg(long, default_value = "reversal")]
        preset: String,
        #[arg(long)]
        items: Option<usize>,
    },
    /// Boundary detection for every trace.
    Segment(CohortArg),
    /// Per-trajectory geometry.
    Geometry {
        #[command(flatten)]
        cohort: CohortArg,
        /// Leading fraction of each segment.
        #[arg(long, default_value_t = 1.0)]
        prefix: f64,
    },
    /// Difficulty calibration from the response matrix.
    Calib {
        #[command(flatten)]
        cohort: CohortArg,
        /// Also refit with each model left out.
        #[arg(long)]
        loo: bool,
    },
    /// Length-model fits and residuals.
    Correct(Upstream),
    /// Raw and corrected couplings with summaries.
    Couple(Upstream),
    /// Difficulty probes over layers and positions.
    Probe(Upstream),
    /// Behavior rates, judge agreement and mediation.
    Behave(Upstream),
    /// Stratified, prefix, null and run-count analyses.
    Strat(Upstream),
    /// Full pipeline into a report bundle.
    Report(CohortArg),
    /// Plot-ready table from a report bundle.
    Plot {
        /// dumbbell, prefix, heatmap, residual_scatter or stripe.
        kind: String,
        /// Bundle directory; --out by default.
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
}

struct Ctx {
    config: PipelineConfig,
    plan: Plan,
    hash: String,
}

impl Ctx {
    fn new(cli: &Cli, cohort: &CohortArg) -> Result<Self> {
        let mut config = match &cli.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = cli.seed {
            config.seed = s;
        }
        if let Some(o) = &cli.out {
            config.out = o.clone();
        }
        if let Some(c) = &cohort.cohort {
            config.cohort = c.clone();
        }
        let plan = config.validate()?;
        let hash = config.hash();
        fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
        Ok(Self { config, plan, hash })
    }

    fn write(&self, name: &str, t: ResultTable) -> Result<()> {
        write_table(&self.config.out, name, t, &self.hash)?;
        println!("{}", self.config.out.join(name).display());
        Ok(())
    }

    fn write_stage(&self, st: StageTables) -> Result<()> {
        for (name, t) in st.tables {
            self.write(&name, t)?;
        }
        for e in &st.errors {
            eprintln!("warning: {e}");
        }
        Ok(())
    }

    fn cohort(&self) -> Result<(Cohort, Vec<ItemMeta>)> {
        Ok((
            Cohort::open(&self.config.cohort)?,
            load_items(&self.config.cohort)?,
        ))
    }

    fn upstream(
        &self,
        up: &Upstream,
    ) -> Result<(
        Vec<CohortGeometryRow>,
        std::collections::BTreeMap<String, f64>,
    )> {
        let or = |p: &Option<PathBuf>, name: &str| {
            p.clone().unwrap_or_else(|| self.config.out.join(name))
        };
        let g = or(&up.geometry, "geometry.csv");
        let d = or(&up.difficulty, "difficulty.csv");
        for p in [&g, &d] {
            if !p.is_file() {
                return Err(Error::MissingStage(format!(
                    "{} (run the earlier stage first)",
                    p.display()
                )));
            }
        }
        Ok((
            rows_from_table(&ResultTable::read(&g)?)?,
            difficulties_from_table(&ResultTable::read(&d)?)?,
        ))
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("--jobs: {e}")))?;
    }
    match &cli.command {
        Command::Synth {
            spec,
            preset,
            items,
        } => {
            let mut s = match spec {
                Some(p) => {
                    SynthSpec::from_toml(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?
                }
                None => match preset.as_str() {
                    "reversal" => SynthSpec::reversal(0),
                    "null" => SynthSpec::null(0),
                    p => return Err(Error::InvalidArgument(format!("unknown preset {p:?}"))),
                },
            };
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            if let Some(n) = items {
                s.n_items = *n;
            }
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("cohort"));
            let truths = synth_cohort(&s, &out)?;
            println!("{} items written to {}", truths.len(), out.display());
        }
        Command::Segment(c) => {
            let ctx = Ctx::new(&cli, c)?;
            let (cohort, items) = ctx.cohort()?;
            ctx.write(
                "segment.csv",
                segment_table(&cohort, &items, ctx.plan.variant)?,
            )?;
        }
        Command::Geometry { cohort: c, prefix } => {
            let ctx = Ctx::new(&cli, c)?;
            let (cohort, items) = ctx.cohort()?;
            if !(*prefix > 0.0 && *prefix <= 1.0) {
                return Err(Error::InvalidArgument("--prefix must lie in (0, 1]".into()));
            }
            let opts = CohortGeometryOptions {
                variant: ctx.plan.variant,
                prefix_fraction: *prefix,
                ..Default::default()
            };
            let g = geometry_for_cohort(&cohort, &items, &opts)?;
            let ex = &g.exclusions;
            eprintln!(
                "excluded: directness {}, curvature {}, twonn {}, pca90 {}, errors {}",
                ex.directness, ex.curvature, ex.twonn, ex.pca90, ex.errors
            );
            ctx.write("geometry.csv", g.to_table())?;
        }
        Command::Calib { cohort: c, loo } => {
            let ctx = Ctx::new(&cli, c)?;
            let items = load_items(&ctx.config.cohort)?;
            let cal = calibrate(&ctx.config, ctx.plan.scale, &items)?;
            ctx.write("difficulty.csv", cal.difficulty)?;
            if let Some(t) = cal.abilities {
                ctx.write("abilities.csv", t)?;
            }
            if let Some(t) = cal.validation {
                ctx.write("difficulty_validation.csv", t)?;
            }
            if *loo && ctx.plan.scale != ScaleSource::External {
                let m = ResponseMatrix::read_csv(
                    &ctx.config.cohort.join(trajgeom::archive::RESPONSES_FILE),
                )?;
                let fit = FitConfig {
                    seed: ctx.config.seed,
                    ..ctx.config.calib
                };
                ctx.write("difficulty_loo.csv", loo_recalibration(&m, &fit)?)?;
            }
        }
        Command::Correct(up) | Command::Couple(up) => {
            let ctx = Ctx::new(&cli, &up.cohort)?;
            let (cohort, items) = ctx.cohort()?;
            let (rows, diffs) = ctx.upstream(up)?;
            let roles = cohort
                .manifest
                .models
                .iter()
                .map(|m| (m.id.clone(), m.role.as_str().to_string()))
                .collect();
            let domains = items
                .iter()
                .map(|m| (m.item_id.clone(), m.domain.clone()))
                .collect();
            let spec = BootstrapSpec {
                n_boot: ctx.config.n_boot,
                seed: ctx.config.seed,
            };
            let lc = lencorr_stage(
                &rows,
                &diffs,
                &roles,
                &domains,
                &ctx.plan.metrics,
                ctx.plan.family,
                &spec,
            )?;
            for e in &lc.errors {
                eprintln!("warning: {e}");
            }
            if matches!(cli.command, Command::Correct(_)) {
                ctx.write("residuals.csv", lc.residuals)?;
                ctx.write("length_models.csv", lc.length_models)?;
            } else {
                ctx.write("couplings.csv", lc.couplings)?;
                ctx.write("couplings_by_model.csv", lc.by_model)?;
                ctx.write("summary.csv", lc.summary)?;
            }
        }
        Command::Probe(up) | Command::Behave(up) | Command::Strat(up) => {
            let ctx = Ctx::new(&cli, &up.cohort)?;
            let (cohort, items) = ctx.cohort()?;
            let (rows, diffs) = ctx.upstream(up)?;
            let input = StratInputs {
                cohort: &cohort,
                items: &items,
                rows: &rows,
                difficulties: &diffs,
            };
            let st = match cli.command {
                Command::Probe(_) => probe_stage(&ctx.config, &ctx.plan, &input)?,
                Command::Behave(_) => behavior_stage(&ctx.config, &ctx.plan, &input)?,
                _ => strat_stage(&ctx.config, &ctx.plan, &input)?,
            };
            ctx.write_stage(st)?;
        }
        Command::Report(c) => {
            let ctx = Ctx::new(&cli, c)?;
            let bundle = run_pipeline(&ctx.config)?;
            for s in &bundle.provenance.stages {
                println!("{:<9} {}", s.stage, s.status);
                for m in &s.messages {
                    eprintln!("  {}: {m}", s.stage);
                }
            }
            println!("bundle: {}", bundle.dir.display());
        }
        Command::Plot { kind, bundle } => {
            let kind: PlotKind = kind.parse()?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("report"));
            let dir = bundle.clone().unwrap_or_else(|| out.clone());
            let t = emit_plot_data(&dir, kind)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let path = out.join(format!("plot_{kind}.csv"));
            let hash = t.provenance.config_hash.clone();
            write_table(&out, &format!("plot_{kind}.csv"), t, &hash)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => 2,
        e if e.is_numeric() => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
