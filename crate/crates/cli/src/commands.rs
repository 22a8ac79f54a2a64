//! Command implementations: orchestration, file layout, manifests.

use std::path::{Path, PathBuf};
use std::time::Instant;

use hamst::diagnostics::{
    chain_summary, corr_experiment, lagged_correlation_curve, stationarity_detect, CorrConfig,
    CorrGenerator,
};
use hamst::geometry::Location;
use hamst::inference::{
    run_mcmc, sa_eta3_mle, Chain, Eta3Mode, McmcSettings, PriorConfig, SaSchedule,
};
use hamst::io::{
    self, format_f64, LocationTable, RunManifest,
};
use hamst::model::StDataset;
use hamst::predict::{
    interval_summary, interval_summary_latent, predict_multi_step, reconstruct_locations,
};
use hamst::simulate::{gen_gp_mixture3, gen_gqn_mixture, simulate_hamiltonian, SimConfig};
use hamst::{Error, Result};

use crate::config::{self, parse_config, ResolvedEta3, RunConfig};

pub struct Context {
    pub config: RunConfig,
    pub config_hash: String,
    pub out_dir: PathBuf,
    pub config_dir: PathBuf,
}

impl Context {
    pub fn load(config_path: &Path, out_override: Option<PathBuf>) -> Result<Context> {
        let bytes = std::fs::read(config_path)
            .map_err(|e| Error::io(config_path.display().to_string(), e))?;
        let config_hash = io::fnv1a_hex(&bytes);
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Domain("config file is not UTF-8".into()))?;
        let config = parse_config(&text)?;
        let out_dir = out_override
            .or_else(|| config.output_dir.clone())
            .or_else(|| {
                std::env::var_os("HAMST_OUTPUT_ROOT").map(|root| PathBuf::from(root).join("run"))
            })
            .unwrap_or_else(|| PathBuf::from("hamst-out"));
        std::fs::create_dir_all(&out_dir)
            .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
        let config_dir = config_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Context {
            config,
            config_hash,
            out_dir,
            config_dir,
        })
    }

    /// Paths inside the config are resolved relative to the config file.
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.config_dir.join(p)
        }
    }

    fn manifest(&self, command: &str, started: Instant, details: serde_json::Value) -> RunManifest {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash: self.config_hash.clone(),
            seed: self.config.seed,
            wall_time_s: started.elapsed().as_secs_f64(),
            details: Some(details),
        }
    }

    /// Effective mass scaling: explicit [data] value, else the sea-surface
    /// preset's 0.25, else 1.
    fn scale_c(&self) -> f64 {
        if let Some(d) = &self.config.data {
            if let Some(c) = d.scale_c {
                return c;
            }
        }
        let preset_sea = self
            .config
            .priors
            .as_ref()
            .and_then(|p| p.preset)
            .map(|p| p == config::PriorPreset::SeaSurface)
            .unwrap_or(false);
        if preset_sea {
            config::SEA_SURFACE_SCALE_C
        } else {
            1.0
        }
    }

    fn load_dataset(&self) -> Result<(LocationTable, StDataset)> {
        let section = self
            .config
            .data
            .as_ref()
            .ok_or_else(|| Error::Domain("config needs a [data] section".into()))?;
        let table = io::read_locations(&self.resolve(&section.locations), self.scale_c())?;
        let y = io::read_matrix(&self.resolve(&section.y), &table.ids)?;
        let x = section
            .x
            .as_ref()
            .map(|p| io::read_matrix(&self.resolve(p), &table.ids))
            .transpose()?;
        let data = StDataset::new(table.locs.clone(), y, x, 1.0)?;
        Ok((table, data))
    }
}

fn default_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("s{i}")).collect()
}

pub fn cmd_generate(ctx: &Context, generator: &str) -> Result<()> {
    let started = Instant::now();
    let gen_cfg = ctx
        .config
        .generate
        .as_ref()
        .ok_or_else(|| Error::Domain("config needs a [generate] section".into()))?;
    let seed = ctx.config.seed;
    let (data, details) = match generator {
        "hamiltonian" => {
            let params = gen_cfg
                .params
                .as_ref()
                .ok_or_else(|| {
                    Error::Domain("[generate.params] required for the hamiltonian generator".into())
                })?
                .to_params()?;
            let sim = SimConfig {
                n: gen_cfg.n,
                t_steps: gen_cfg.t_steps,
                seed,
                params,
                dt: gen_cfg.dt,
                domain: gen_cfg.domain.to_domain()?,
                scale_c: gen_cfg.scale_c,
            };
            let data = simulate_hamiltonian(&sim)?;
            (data, serde_json::json!({ "generator": "hamiltonian", "config": sim }))
        }
        "gp3" => {
            let c = gen_cfg.gp3.clone().unwrap_or(config::Gp3Section {
                b0: None,
                sigma2_eps: None,
                a: None,
                kappa: None,
                sigma2: None,
                mix_p: None,
                smoothness: None,
            });
            let c = c.to_config();
            let data = gen_gp_mixture3(gen_cfg.n, gen_cfg.t_steps, &c, seed)?;
            (data, serde_json::json!({ "generator": "gp3", "config": c }))
        }
        "gqn" => {
            let c = gen_cfg
                .gqn
                .clone()
                .map(|s| s.to_config())
                .unwrap_or_default();
            let data = gen_gqn_mixture(gen_cfg.n, gen_cfg.t_steps, &c, seed)?;
            (data, serde_json::json!({ "generator": "gqn", "config": c }))
        }
        other => return Err(Error::Domain(format!("unknown generator {other}"))),
    };

    let ids = default_ids(data.n_locs());
    let table = LocationTable {
        ids: ids.clone(),
        locs: data.locs.clone(),
    };
    io::write_locations(&ctx.out_dir.join("locations.csv"), &table)?;
    io::write_matrix(&ctx.out_dir.join("y.csv"), &ids, &data.y)?;
    if let Some(x) = &data.x {
        io::write_matrix(&ctx.out_dir.join("x.csv"), &ids, x)?;
    }
    io::write_manifest(
        &ctx.out_dir.join("manifest.json"),
        &ctx.manifest("generate", started, details),
    )?;
    println!(
        "wrote {} locations x {} time rows to {}",
        data.n_locs(),
        data.y.nrows(),
        ctx.out_dir.display()
    );
    Ok(())
}

fn resolve_priors_and_sa(ctx: &Context, data: &StDataset) -> Result<(PriorConfig, Option<f64>)> {
    let (mut priors, auto) = ctx
        .config
        .priors
        .clone()
        .unwrap_or(config::PriorsSection {
            preset: None,
            sd_alpha_star: None,
            sd_beta_star: None,
            ig_v: None,
            ig_theta: None,
            ig_p: None,
            mu_eta1: None,
            mu_eta2: None,
            mu_eta3: None,
            eta3: None,
        })
        .resolve();
    let mut sa_value = None;
    if auto == ResolvedEta3::FixedAuto {
        let schedule: SaSchedule = ctx
            .config
            .sa
            .clone()
            .map(|s| s.to_schedule(ctx.config.seed))
            .unwrap_or(SaSchedule {
                seed: ctx.config.seed,
                ..Default::default()
            });
        let mle = sa_eta3_mle(data, &schedule)?;
        priors.eta3_mode = Eta3Mode::Fixed(mle);
        sa_value = Some(mle);
    }
    Ok((priors, sa_value))
}

fn mcmc_settings(ctx: &Context) -> Result<McmcSettings> {
    match &ctx.config.mcmc {
        Some(s) => s.to_settings(ctx.config.seed),
        None => {
            let s = McmcSettings {
                seed: ctx.config.seed,
                ..Default::default()
            };
            s.validate()?;
            Ok(s)
        }
    }
}

pub fn cmd_fit(ctx: &Context) -> Result<()> {
    let started = Instant::now();
    let (table, data) = ctx.load_dataset()?;
    let (priors, sa_value) = resolve_priors_and_sa(ctx, &data)?;
    let settings = mcmc_settings(ctx)?;

    let chain = match run_mcmc(&data, &priors, &settings) {
        Ok(c) => c,
        Err(Error::Mcmc {
            sweep,
            snapshot,
            source,
        }) => {
            let snap_path = ctx.out_dir.join("state_snapshot.json");
            std::fs::write(&snap_path, snapshot)
                .map_err(|e| Error::io(snap_path.display().to_string(), e))?;
            eprintln!("state snapshot written to {}", snap_path.display());
            return Err(Error::Mcmc {
                sweep,
                snapshot: snap_path.display().to_string(),
                source,
            });
        }
        Err(e) => return Err(e),
    };

    io::write_chain_csv(&ctx.out_dir.join("chain.csv"), &chain)?;
    if settings.store_latent {
        io::write_latent_bin(&ctx.out_dir.join("latent.bin"), &chain)?;
    }
    write_summary_csv(&ctx.out_dir.join("chain_summary.csv"), &chain)?;
    // persist what prediction needs
    io::write_locations(&ctx.out_dir.join("locations.csv"), &table)?;
    io::write_matrix(&ctx.out_dir.join("y.csv"), &table.ids, &data.y)?;

    let details = serde_json::json!({
        "acceptance": chain.acceptance,
        "eta3_mle": sa_value,
        "eta3_mode": priors.eta3_mode,
        "retained_draws": chain.draws.len(),
        "jitter_events": chain.manifest.jitter_events,
        "numeric_rejections": chain.manifest.numeric_rejections,
        "scale_c": ctx.scale_c(),
    });
    io::write_manifest(
        &ctx.out_dir.join("manifest.json"),
        &ctx.manifest("fit", started, details),
    )?;
    println!(
        "retained {} draws; acceptance beta*={:.2} alpha*={:.2}",
        chain.draws.len(),
        chain.acceptance.beta_star,
        chain.acceptance.alpha_star
    );
    Ok(())
}

fn write_summary_csv(path: &Path, chain: &Chain) -> Result<()> {
    let rows = chain_summary(chain)?;
    let mut out = String::from("parameter,mean,sd,mcse,acceptance\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.name,
            format_f64(r.mean),
            format_f64(r.sd),
            format_f64(r.mcse),
            format_f64(r.acceptance)
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn cmd_predict(ctx: &Context) -> Result<()> {
    let started = Instant::now();
    let section = ctx
        .config
        .predict
        .as_ref()
        .ok_or_else(|| Error::Domain("config needs a [predict] section".into()))?;
    let chain_dir = ctx.resolve(&section.chain_dir);

    let scale_c = ctx.scale_c();
    let table = io::read_locations(&chain_dir.join("locations.csv"), scale_c)?;
    let y = io::read_matrix(&chain_dir.join("y.csv"), &table.ids)?;
    let data = StDataset::new(table.locs.clone(), y, None, 1.0)?;

    let params = io::read_chain_csv(&chain_dir.join("chain.csv"))?;
    let latent_path = chain_dir.join("latent.bin");
    if !latent_path.exists() {
        return Err(Error::Usage(format!(
            "{} is missing; refit with store_latent = true to enable prediction",
            latent_path.display()
        )));
    }
    let latent = io::read_latent_bin(&latent_path)?;
    let draws = io::assemble_chain_draws(params, Some(latent))?;
    let n_draws = draws.len();
    let chain = Chain {
        draws,
        acceptance: hamst::inference::AcceptanceRates {
            beta_star: f64::NAN,
            alpha_star: f64::NAN,
            eta1_star: f64::NAN,
            eta2_star: f64::NAN,
            eta3_star: None,
        },
        manifest: hamst::inference::ChainManifest {
            seed: ctx.config.seed,
            iterations: 0,
            burn_in: 0,
            thin: 1,
            adapt: false,
            store_latent: true,
            acceptance: hamst::inference::AcceptanceRates {
                beta_star: f64::NAN,
                alpha_star: f64::NAN,
                eta1_star: f64::NAN,
                eta2_star: f64::NAN,
                eta3_star: None,
            },
            jitter_events: 0,
            numeric_rejections: 0,
            wall_time_s: 0.0,
        },
    };

    let samples = predict_multi_step(&chain, &data, section.horizon, ctx.config.seed)?;
    io::write_predictive_long(&ctx.out_dir.join("predictive_y.csv"), &table.ids, &samples, "y")?;
    io::write_predictive_long(&ctx.out_dir.join("predictive_x.csv"), &table.ids, &samples, "x")?;
    io::write_interval_csv(
        &ctx.out_dir.join("intervals_y.csv"),
        &table.ids,
        &interval_summary(&samples, section.level)?,
    )?;
    io::write_interval_csv(
        &ctx.out_dir.join("intervals_x.csv"),
        &table.ids,
        &interval_summary_latent(&samples, section.level)?,
    )?;

    let mut reconstructed_sites = 0usize;
    if let Some(rec_path) = &section.reconstruct {
        let new_table = io::read_locations(&ctx.resolve(rec_path), scale_c)?;
        let new_points: Vec<Location> = new_table.locs.points().to_vec();
        let (priors, _) = resolve_priors_and_sa(ctx, &data)?;
        let settings = mcmc_settings(ctx)?;
        let rec = reconstruct_locations(&data, &new_points, &priors, &settings)?;
        io::write_predictive_long(
            &ctx.out_dir.join("reconstruction_y.csv"),
            &new_table.ids,
            &rec,
            "y",
        )?;
        io::write_interval_csv(
            &ctx.out_dir.join("reconstruction_intervals_y.csv"),
            &new_table.ids,
            &interval_summary(&rec, section.level)?,
        )?;
        reconstructed_sites = new_points.len();
    }

    let details = serde_json::json!({
        "horizon": section.horizon,
        "level": section.level,
        "chain_draws": n_draws,
        "reconstructed_sites": reconstructed_sites,
        "reconstruction_conditional": "within-time partitioned Gaussian (approximation)",
    });
    io::write_manifest(
        &ctx.out_dir.join("manifest.json"),
        &ctx.manifest("predict", started, details),
    )?;
    println!(
        "predicted {} horizons from {} draws{}",
        section.horizon,
        n_draws,
        if reconstructed_sites > 0 {
            format!("; reconstructed {reconstructed_sites} sites")
        } else {
            String::new()
        }
    );
    Ok(())
}

pub fn cmd_diagnose(ctx: &Context, kind: &str) -> Result<()> {
    let started = Instant::now();
    let section = ctx
        .config
        .diagnose
        .as_ref()
        .ok_or_else(|| Error::Domain("config needs a [diagnose] section".into()))?;
    let details = match kind {
        "corr-experiment" => {
            let c = section
                .corr
                .as_ref()
                .ok_or_else(|| Error::Domain("config needs [diagnose.corr]".into()))?;
            let mut cfg = CorrConfig::reference_setting();
            if let Some(n) = c.n {
                cfg.n = n;
            }
            if let Some(t) = c.t_steps {
                cfg.t_steps = t;
            }
            if let Some(p) = &c.params {
                cfg.params = p.to_params()?;
            }
            cfg.scale_c = c.scale_c;
            let mut mins = serde_json::Map::new();
            for g in [
                CorrGenerator::Hamiltonian,
                CorrGenerator::SeGp,
                CorrGenerator::Matern32Gp,
                CorrGenerator::Matern52Gp,
            ] {
                let s = corr_experiment(g, c.replicates, &cfg, ctx.config.seed)?;
                let path = ctx.out_dir.join(format!("corr_{}.csv", s.generator));
                write_square_matrix_csv(&path, &s.corr)?;
                mins.insert(
                    s.generator.clone(),
                    serde_json::json!(s.min_off_diagonal()),
                );
            }
            serde_json::json!({ "replicates": c.replicates, "min_off_diagonal": mins })
        }
        "lag-curve" => {
            let c = section
                .lag
                .as_ref()
                .ok_or_else(|| Error::Domain("config needs [diagnose.lag]".into()))?;
            let (_, data) = ctx.load_dataset()?;
            let bins = lagged_correlation_curve(&data, c.space_bins, c.max_time_lag, c.min_pairs)?;
            let mut out = String::from("space_lo,space_hi,time_lag,estimate,count\n");
            for b in &bins {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    format_f64(b.space_lo),
                    format_f64(b.space_hi),
                    b.time_lag,
                    b.estimate.map(format_f64).unwrap_or_default(),
                    b.count
                ));
            }
            let path = ctx.out_dir.join("lag_curve.csv");
            std::fs::write(&path, out).map_err(|e| Error::io(path.display().to_string(), e))?;
            serde_json::json!({ "bins": bins.len() })
        }
        "stationarity" => {
            let c = section
                .stationarity
                .as_ref()
                .ok_or_else(|| Error::Domain("config needs [diagnose.stationarity]".into()))?;
            let (_, data) = ctx.load_dataset()?;
            let rep = stationarity_detect(&data, c.c0, (c.prior_a, c.prior_b))?;
            let mut out = String::from("region,distance,threshold,posterior_mean\n");
            for j in 0..rep.distances.len() {
                out.push_str(&format!(
                    "{j},{},{},{}\n",
                    format_f64(rep.distances[j]),
                    format_f64(rep.thresholds[j]),
                    format_f64(rep.posterior_means[j])
                ));
            }
            let path = ctx.out_dir.join("stationarity.csv");
            std::fs::write(&path, out).map_err(|e| Error::io(path.display().to_string(), e))?;
            let verdict_path = ctx.out_dir.join("stationarity.json");
            let blob = serde_json::to_string_pretty(&rep)
                .map_err(|e| Error::Usage(format!("verdict serialization failed: {e}")))?;
            std::fs::write(&verdict_path, blob)
                .map_err(|e| Error::io(verdict_path.display().to_string(), e))?;
            serde_json::json!({ "verdict": rep.verdict, "degenerate": rep.degenerate })
        }
        other => return Err(Error::Domain(format!("unknown diagnostic {other}"))),
    };
    io::write_manifest(
        &ctx.out_dir.join("manifest.json"),
        &ctx.manifest(&format!("diagnose {kind}"), started, details),
    )?;
    println!("diagnostic outputs in {}", ctx.out_dir.display());
    Ok(())
}

fn write_square_matrix_csv(path: &Path, m: &nalgebra::DMatrix<f64>) -> Result<()> {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format_f64(m[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

