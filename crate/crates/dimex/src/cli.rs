//! Command-line surface: simulate scenarios, learn an expansion, predict at
//! new sites, cross-validate the penalty grid, and run the warping baseline.
//!
//! Every flag can also come from a `key=value` config file (`--config`);
//! explicit flags win. The output directory defaults to `$DIMEX_OUT_DIR`,
//! then the current directory. All randomness flows from the single `--seed`:
//! scenario generation uses it directly, the expansion solver uses seed+1,
//! cross-validation fold shuffling uses seed+2.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};
use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::expansion::{learn_expansion, ExpansionConfig, ExpansionSolution, PenaltyNorm};
use crate::geo::{expand, expand_zero, pairwise_distances, Locations};
use crate::predict::{cross_validate, predict_new_sites, CvConfig};
use crate::sim::scenario::{generate, Scenario};
use crate::tps::{map_latent, LatentMap, Smoothing};
use crate::variogram::{bin_dispersions, empirical_dispersion, Observations};
use crate::warp::{detect_folding, warp_mds};

/// Version tag written into every run_config.json.
pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Parser)]
#[command(name = "dimex", version, about = "Nonstationary spatial fields via learned latent dimensions")]
pub struct Cli {
    /// key=value defaults file; explicit flags take precedence
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $DIMEX_OUT_DIR, else ".")
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Top-level seed; stages derive their own seeds from it
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate locations and observations for a named scenario
    Simulate {
        /// One of: ellipsoid, stationary, cities
        #[arg(long)]
        scenario: Option<String>,
        /// Number of sites
        #[arg(long)]
        s: Option<usize>,
        /// Number of replicates
        #[arg(long)]
        n: Option<usize>,
    },
    /// Learn latent dimensions and the spline map at fixed penalties
    Expand {
        #[arg(long)]
        locations: Option<PathBuf>,
        #[arg(long)]
        observations: Option<PathBuf>,
        /// Group-lasso weight on latent columns
        #[arg(long)]
        lambda1: Option<f64>,
        /// Spline smoothing weight
        #[arg(long)]
        lambda2: Option<f64>,
        /// Maximum number of latent dimensions
        #[arg(long)]
        pmax: Option<usize>,
        #[arg(long)]
        max_iters: Option<usize>,
        /// Treat lambda2 as a raw value instead of scale-normalized units
        #[arg(long)]
        raw_lambda2: bool,
        /// Penalize per-column absolute sums instead of Euclidean norms
        #[arg(long)]
        l1_penalty: bool,
    },
    /// Krige replicate-mean values at new sites through a fitted map
    Predict {
        #[arg(long)]
        locations: Option<PathBuf>,
        #[arg(long)]
        observations: Option<PathBuf>,
        /// Solution JSON from `expand`
        #[arg(long)]
        solution: Option<PathBuf>,
        /// Map JSON from `expand`
        #[arg(long)]
        map: Option<PathBuf>,
        /// CSV of target sites (same schema as locations)
        #[arg(long)]
        targets: Option<PathBuf>,
        /// Estimate an unknown constant mean instead of assuming zero
        #[arg(long)]
        ordinary: bool,
    },
    /// Leave-k-out cross-validation over a (lambda1, lambda2) grid
    Cv {
        #[arg(long)]
        locations: Option<PathBuf>,
        #[arg(long)]
        observations: Option<PathBuf>,
        /// Comma-separated lambda1 grid
        #[arg(long)]
        lambda1: Option<String>,
        /// Comma-separated lambda2 grid
        #[arg(long)]
        lambda2: Option<String>,
        #[arg(long)]
        pmax: Option<usize>,
        /// Sites left out per fold
        #[arg(long)]
        k: Option<usize>,
        /// Worker threads for grid cells
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        raw_lambda2: bool,
    },
    /// Same-dimension warping baseline with folding detection
    Baseline {
        #[arg(long)]
        locations: Option<PathBuf>,
        #[arg(long)]
        observations: Option<PathBuf>,
        /// Warp-map smoothing weight
        #[arg(long)]
        lambda_iw: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        /// Folding-scan grid resolution per axis
        #[arg(long)]
        resolution: Option<usize>,
    },
}

/// key=value pairs loaded from --config; blank lines and '#' comments allowed.
fn load_config_file(path: Option<&PathBuf>) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    let Some(path) = path else {
        return Ok(map);
    };
    let text = std::fs::read_to_string(path)?;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::validation(format!(
                "config line {} is not key=value: '{line}'",
                lineno + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

struct Resolver {
    file: BTreeMap<String, String>,
    /// Final values actually used, echoed into run_config.json.
    echo: BTreeMap<String, String>,
}

impl Resolver {
    fn get<T: FromStr + ToString>(
        &mut self,
        flag: Option<T>,
        key: &str,
        default: T,
    ) -> Result<T> {
        let v = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(raw) => raw.parse::<T>().map_err(|_| {
                    Error::validation(format!("config value for '{key}' is invalid: '{raw}'"))
                })?,
                None => default,
            },
        };
        self.echo.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    fn get_path(&mut self, flag: Option<PathBuf>, key: &str) -> Result<PathBuf> {
        let v = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(raw) => PathBuf::from(raw),
                None => {
                    return Err(Error::validation(format!(
                        "missing required input: --{key} (or '{key}' in the config file)"
                    )))
                }
            },
        };
        self.echo.insert(key.to_string(), v.display().to_string());
        Ok(v)
    }

    fn get_bool(&mut self, flag: bool, key: &str) -> Result<bool> {
        let v = if flag {
            true
        } else {
            match self.file.get(key) {
                Some(raw) => raw.parse::<bool>().map_err(|_| {
                    Error::validation(format!("config value for '{key}' is invalid: '{raw}'"))
                })?,
                None => false,
            }
        };
        self.echo.insert(key.to_string(), v.to_string());
        Ok(v)
    }
}

fn parse_f64_list(raw: &str, key: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|_| Error::validation(format!("bad value in --{key}: '{tok}'")))
        })
        .collect()
}

#[derive(serde::Serialize)]
struct RunConfigEcho<'a> {
    format_version: &'a str,
    command: &'a str,
    params: &'a BTreeMap<String, String>,
}

fn write_run_config(out: &Path, command: &str, params: &BTreeMap<String, String>) -> Result<()> {
    let echo = RunConfigEcho {
        format_version: FORMAT_VERSION,
        command,
        params,
    };
    let s = serde_json::to_string_pretty(&echo)?;
    std::fs::write(out.join("run_config.json"), s + "\n")?;
    Ok(())
}

fn load_inputs(locations: &Path, observations: &Path) -> Result<(Locations, Observations)> {
    let x = Locations::read_csv(locations)?;
    let obs = Observations::read_csv(observations)?;
    Ok((x, obs))
}

fn replicate_means(x: &Locations, obs: &Observations) -> Result<DVector<f64>> {
    let values = obs.aligned_to(x.site_ids())?;
    let mut means = DVector::zeros(x.n_sites());
    for i in 0..x.n_sites() {
        let mut sum = 0.0;
        let mut n = 0usize;
        for r in 0..values.ncols() {
            let v = values[(i, r)];
            if v.is_finite() {
                sum += v;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::validation(format!(
                "site '{}' has no observed values",
                x.site_ids()[i]
            )));
        }
        means[i] = sum / n as f64;
    }
    Ok(means)
}

fn write_predictions_csv(
    path: &Path,
    x_new: &Locations,
    preds: &DVector<f64>,
    vars: &DVector<f64>,
) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["site_id", "x1", "x2", "pred", "var"])?;
    for i in 0..x_new.n_sites() {
        wtr.write_record([
            x_new.site_ids()[i].clone(),
            format!("{}", x_new.coords()[(i, 0)]),
            format!("{}", x_new.coords()[(i, 1)]),
            format!("{}", preds[i]),
            format!("{}", vars[i]),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

const VARIOGRAM_BINS: usize = 15;

/// Run a parsed invocation; errors carry the process exit class.
pub fn run(cli: Cli) -> Result<()> {
    let file = load_config_file(cli.config.as_ref())?;
    let mut r = Resolver {
        file,
        echo: BTreeMap::new(),
    };
    let out = match cli.out {
        Some(p) => p,
        None => match r.file.get("out") {
            Some(raw) => PathBuf::from(raw),
            None => std::env::var_os("DIMEX_OUT_DIR")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(".")),
        },
    };
    std::fs::create_dir_all(&out)?;
    r.echo.insert("out".into(), out.display().to_string());
    let seed = r.get(cli.seed, "seed", 0u64)?;

    match cli.command {
        Command::Simulate { scenario, s, n } => {
            let scenario_name = r.get(scenario, "scenario", "ellipsoid".to_string())?;
            let which: Scenario = scenario_name.parse()?;
            let s = r.get(s, "s", 100usize)?;
            let n = r.get(n, "n", 1000usize)?;
            let (x, obs) = generate(which, s, n, seed)?;
            x.write_csv(&out.join("locations.csv"))?;
            obs.write_csv(&out.join("observations.csv"))?;
            write_run_config(&out, "simulate", &r.echo)?;
        }
        Command::Expand {
            locations,
            observations,
            lambda1,
            lambda2,
            pmax,
            max_iters,
            raw_lambda2,
            l1_penalty,
        } => {
            let loc_path = r.get_path(locations, "locations")?;
            let obs_path = r.get_path(observations, "observations")?;
            let lambda1 = r.get(lambda1, "lambda1", 1.0)?;
            let lambda2 = r.get(lambda2, "lambda2", 1e-4)?;
            let pmax = r.get(pmax, "pmax", 3usize)?;
            let max_iters = r.get(max_iters, "max_iters", 400usize)?;
            let raw_lambda2 = r.get_bool(raw_lambda2, "raw_lambda2")?;
            let l1_penalty = r.get_bool(l1_penalty, "l1_penalty")?;

            let (x, obs) = load_inputs(&loc_path, &obs_path)?;
            let disp = empirical_dispersion(&obs.aligned_to(x.site_ids())?)?;

            let mut cfg = ExpansionConfig::new(pmax, lambda1);
            cfg.max_iters = max_iters;
            cfg.seed = seed.wrapping_add(1);
            if l1_penalty {
                cfg.penalty = PenaltyNorm::L1Columns;
            }
            let solution = learn_expansion(&x, &disp, &cfg)?;
            let smoothing = if raw_lambda2 {
                Smoothing::Raw(lambda2)
            } else {
                Smoothing::Normalized(lambda2)
            };
            let map = map_latent(&x, &solution, smoothing)?;

            solution.write_json(&out.join("solution.json"))?;
            map.write_json(&out.join("map.json"))?;
            let before = pairwise_distances(&expand_zero(x.clone()))?;
            bin_dispersions(&disp, &before, VARIOGRAM_BINS)?
                .write_csv(&out.join("variogram_before.csv"))?;
            let after = pairwise_distances(&expand(x.clone(), solution.z_matrix())?)?;
            bin_dispersions(&disp, &after, VARIOGRAM_BINS)?
                .write_csv(&out.join("variogram_after.csv"))?;
            map.write_grid_csv(&x, 40, &out.join("latent_grid.csv"))?;
            write_run_config(&out, "expand", &r.echo)?;
        }
        Command::Predict {
            locations,
            observations,
            solution,
            map,
            targets,
            ordinary,
        } => {
            let loc_path = r.get_path(locations, "locations")?;
            let obs_path = r.get_path(observations, "observations")?;
            let sol_path = r.get_path(solution, "solution")?;
            let map_path = r.get_path(map, "map")?;
            let targets_path = r.get_path(targets, "targets")?;
            let ordinary = r.get_bool(ordinary, "ordinary")?;

            let (x, obs) = load_inputs(&loc_path, &obs_path)?;
            let solution = ExpansionSolution::read_json(&sol_path)?;
            let map = LatentMap::read_json(&map_path)?;
            let x_new = Locations::read_csv(&targets_path)?;
            let y = replicate_means(&x, &obs)?;
            let result = if ordinary {
                let z_train = map.latent_at(x.coords())?;
                let train = expand(x.clone(), z_train)?;
                let z_new = map.latent_at(x_new.coords())?;
                let tgt = expand(x_new.clone(), z_new)?;
                crate::predict::krige_with_mean(&train, &y, &solution.phi, &tgt, true)?
            } else {
                predict_new_sites(&x, &y, &solution, &map, x_new.coords())?
            };
            write_predictions_csv(
                &out.join("predictions.csv"),
                &x_new,
                &result.predictions,
                &result.variances,
            )?;
            write_run_config(&out, "predict", &r.echo)?;
        }
        Command::Cv {
            locations,
            observations,
            lambda1,
            lambda2,
            pmax,
            k,
            jobs,
            max_iters,
            raw_lambda2,
        } => {
            let loc_path = r.get_path(locations, "locations")?;
            let obs_path = r.get_path(observations, "observations")?;
            let k = r.get(k, "k", 5usize)?;
            let mut cfg = CvConfig::default_grid(k, seed.wrapping_add(2));
            let raw1 = r.get(lambda1, "lambda1", String::new())?;
            if !raw1.is_empty() {
                cfg.lambda1_values = parse_f64_list(&raw1, "lambda1")?;
            }
            let raw2 = r.get(lambda2, "lambda2", String::new())?;
            if !raw2.is_empty() {
                cfg.lambda2_values = parse_f64_list(&raw2, "lambda2")?;
            }
            cfg.p_max = r.get(pmax, "pmax", cfg.p_max)?;
            cfg.jobs = r.get(jobs, "jobs", 1usize)?;
            cfg.max_iters = r.get(max_iters, "max_iters", cfg.max_iters)?;
            cfg.normalized_lambda2 = !r.get_bool(raw_lambda2, "raw_lambda2")?;

            let (x, obs) = load_inputs(&loc_path, &obs_path)?;
            let grid = cross_validate(&x, &obs, &cfg)?;
            grid.write_csv(&out.join("cv.csv"))?;
            grid.write_summary_json(&out.join("cv_summary.json"))?;
            write_run_config(&out, "cv", &r.echo)?;
        }
        Command::Baseline {
            locations,
            observations,
            lambda_iw,
            iters,
            resolution,
        } => {
            let loc_path = r.get_path(locations, "locations")?;
            let obs_path = r.get_path(observations, "observations")?;
            let lambda_iw = r.get(lambda_iw, "lambda_iw", 1e-4)?;
            let iters = r.get(iters, "iters", 200usize)?;
            let resolution = r.get(resolution, "resolution", 50usize)?;

            let (x, obs) = load_inputs(&loc_path, &obs_path)?;
            let disp = empirical_dispersion(&obs.aligned_to(x.site_ids())?)?;
            // lambda_iw shares the scale-normalized units used for lambda2
            let raw_iw = Smoothing::Normalized(lambda_iw).resolve(x.coords())?;
            let model = warp_mds(&x, &disp, raw_iw, None, iters)?;
            let report = detect_folding(&model, resolution)?;
            model.write_csv(x.site_ids(), &out.join("warp.csv"))?;
            report.write_json(&out.join("folding.json"))?;
            write_run_config(&out, "baseline", &r.echo)?;
        }
    }
    Ok(())
}
