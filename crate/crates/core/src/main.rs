use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dre::enhancement::{f_disturbance, find_pivotal, local_modify, pivotal_indices, verify_certificate, PivotalMode};
use dre::environment::{write_snapshot, EnvironmentField, ModelKind, ModelSpec};
use dre::experiments::{
    estimate_beta, scan_critical, slab_scan, write_beta_csv, ExperimentGeometry, Manifest, ModelFamily, QRule,
    ScanMethod,
};
use dre::lattice::{LatticeBox, Point, VdLattice};
use dre::reachability::Search;
use dre::terrace::{extract_terrace, write_ply, Extraction};
use dre::validate::{run_suite, Suite};

/// Degenerate random environments: clusters, terraces, pivotal sites and scans.
#[derive(Parser, Debug)]
#[command(name = "dre", version)]
struct Cli {
    /// Base seed for every random draw.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
enum Command {
    /// Sample an environment and write its Ω_1 bitmask.
    Simulate(ModelArgs),
    /// Extract the terrace of a forward cluster.
    Terrace {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum)]
        export: Export,
        /// Source site; defaults to the origin.
        #[arg(long, num_args = 1.., allow_negative_numbers = true)]
        x: Option<Vec<i32>>,
    },
    /// List pivotal sites on `[-N, N]^d` with target offset `M`.
    Pivotal {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long = "N", default_value_t = 10)]
        big_n: i32,
        #[arg(long = "M", default_value_t = 5)]
        m: i32,
        /// JSON report path; defaults to `<out>/pivotal.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the local modification at a pivotal site off `V_d`.
    Modify {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long = "N", default_value_t = 10)]
        big_n: i32,
        #[arg(long = "M", default_value_t = 9)]
        m: i32,
        #[arg(long, default_value_t = 8)]
        n: i32,
        /// Pivotal site; defaults to the first pivotal site off `V_d`.
        #[arg(long, num_args = 1.., allow_negative_numbers = true)]
        u: Option<Vec<i32>>,
        /// Recheck the certificate from scratch.
        #[arg(long)]
        verify: bool,
    },
    /// Estimate the blocking probability on a grid of p.
    Beta {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long = "N", default_value_t = 24)]
        big_n: i32,
        #[arg(long = "M", default_value_t = 8)]
        m: i32,
        /// `p0:p1:step`, inclusive.
        #[arg(long)]
        grid: String,
        #[arg(long, value_enum, default_value_t = QRule::Equal)]
        q_rule: QRule,
        #[arg(long, default_value_t = 1000)]
        trials: u64,
    },
    /// Bisect for the p where the blocking probability crosses 1/2.
    ScanPc {
        #[arg(long, default_value = "half", value_parser = parse_model)]
        model: ModelKind,
        #[arg(long, default_value_t = 2)]
        d: usize,
        /// `a,b`
        #[arg(long, default_value = "0.05,0.95", value_parser = parse_pair)]
        bracket: (f64, f64),
        #[arg(long, default_value_t = 0.005)]
        tol: f64,
        #[arg(long, value_enum, default_value_t = QRule::Equal)]
        q_rule: QRule,
        #[arg(long = "N", default_value_t = 24)]
        big_n: i32,
        #[arg(long = "M", default_value_t = 8)]
        m: i32,
        #[arg(long, default_value_t = 2000)]
        trials: u64,
    },
    /// Compare the slab crossing with the d and d+1 crossings.
    SlabScan {
        #[arg(long, default_value_t = 2)]
        d: usize,
        #[arg(long, default_value = "0.05:0.95:0.01")]
        grid: String,
        #[arg(long = "N", default_value_t = 24)]
        big_n: i32,
        #[arg(long = "M", default_value_t = 8)]
        m: i32,
        #[arg(long, default_value_t = 2000)]
        trials: u64,
    },
    /// Run a randomized validation suite.
    Validate {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long, default_value_t = 1000)]
        cases: u64,
    },
}

#[derive(Args, Debug, Clone, Serialize)]
struct ModelArgs {
    /// orthant, half, disturbed or slab.
    #[arg(long, default_value = "half", value_parser = parse_model)]
    model: ModelKind,
    #[arg(long, default_value_t = 2)]
    d: usize,
    #[arg(long, default_value_t = 0.5)]
    p: f64,
    /// Defaults to p.
    #[arg(long)]
    q: Option<f64>,
    /// Half-width N of the box `[-N, N]^d`.
    #[arg(long = "box", default_value_t = 10)]
    half_width: i32,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Export {
    Csv,
    Ply,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: dre::Error| e.to_string())
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected a,b")?;
    let a: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((a, b))
}

impl ModelArgs {
    fn spec(&self) -> anyhow::Result<ModelSpec> {
        Ok(ModelSpec::new(self.model, self.d, self.p, self.q.unwrap_or(self.p))?)
    }

    /// `[-N, N]^d`, times `{1, 2}` for the slab.
    fn region(&self, n: i32) -> anyhow::Result<LatticeBox> {
        let mut lo = vec![-n; self.d];
        let mut hi = vec![n; self.d];
        if self.model == ModelKind::Slab {
            lo.push(1);
            hi.push(2);
        }
        Ok(LatticeBox::new(Point::new(lo), Point::new(hi))?)
    }

    fn origin(&self) -> Point {
        let mut c = vec![0; self.d];
        if self.model == ModelKind::Slab {
            c.push(1);
        }
        Point::new(c)
    }

    fn env(&self, n: i32, seed: u64) -> anyhow::Result<(EnvironmentField, LatticeBox)> {
        let r = self.region(n)?;
        Ok((EnvironmentField::new(self.spec()?, r.clone(), seed)?, r))
    }
}

struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn create(&mut self, name: &str) -> anyhow::Result<BufWriter<File>> {
        let path = self.dir.join(name);
        self.files.push(name.to_string());
        Ok(BufWriter::new(
            File::create(&path).with_context(|| format!("creating {}", path.display()))?,
        ))
    }

    fn json(&mut self, name: &str, v: &impl Serialize) -> anyhow::Result<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, v)?;
        writeln!(w)?;
        Ok(())
    }

    fn manifest(self, command: &str, config: &impl Serialize) -> anyhow::Result<()> {
        let m = Manifest::new(command, config, self.files)?;
        fs::write(self.dir.join("manifest.json"), m.to_json()? + "\n")?;
        Ok(())
    }
}

#[derive(Serialize)]
struct RunConfig<'a> {
    seed: u64,
    #[serde(flatten)]
    command: &'a Command,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let mut out = Outputs::new(&cli.out)?;
    let seed = cli.seed;
    let name = match &cli.command {
        Command::Simulate(model) => {
            let (env, r) = model.env(model.half_width, seed)?;
            write_snapshot(&env, &r, out.create("environment.bin")?)?;
            let cfg = env.configuration(&r)?;
            let o = r.index(&model.origin()).context("origin outside the box")?;
            let cluster = Search::new().cluster(&cfg, o);
            let summary = serde_json::json!({
                "model": model.model,
                "sites": r.len(),
                "omega1": cfg.omega1().count(),
                "cluster_of_origin": cluster.count(),
                "cluster_fills_box": cluster.is_full(),
            });
            println!("{summary}");
            out.json("simulate.json", &summary)?;
            "simulate"
        }
        Command::Terrace { model, export, x } => {
            let (env, r) = model.env(model.half_width, seed)?;
            let x = x.clone().map(Point::new).unwrap_or_else(|| model.origin());
            let cfg = env.configuration(&r)?;
            let e = extract_terrace(&cfg, &r, &x)?;
            match export {
                Export::Csv => {
                    let mut w = out.create("terrace.csv")?;
                    match &e {
                        Extraction::Terrace(t) => t.write_csv(&mut w)?,
                        Extraction::FillsBox => {
                            let cols: Vec<String> = (1..=r.dim()).map(|i| format!("x{i}")).collect();
                            writeln!(w, "{}", cols.join(","))?;
                        }
                    }
                }
                Export::Ply => write_ply(&e, out.create("terrace.ply")?)?,
            }
            match &e {
                Extraction::Terrace(t) => println!("terrace with {} sites", t.len()),
                Extraction::FillsBox => println!("cluster fills the box"),
            }
            "terrace"
        }
        Command::Pivotal { model, big_n, m, report } => {
            let (env, r) = model.env(*big_n, seed)?;
            let cfg = env.configuration(&r)?;
            let rep = find_pivotal(&cfg, *m, PivotalMode::Fast)?;
            println!("{} pivotal sites ({} on V_d, {} off)", rep.total(), rep.on_vd.len(), rep.off_vd.len());
            match report {
                Some(path) => {
                    let mut w = BufWriter::new(File::create(path)?);
                    serde_json::to_writer_pretty(&mut w, &rep)?;
                    out.files.push(path.display().to_string());
                }
                None => out.json("pivotal.json", &rep)?,
            }
            "pivotal"
        }
        Command::Modify { model, big_n, m, n, u, verify } => {
            let (env, r) = model.env(*big_n, seed)?;
            let cfg = env.configuration(&r)?;
            let u = match u {
                Some(c) => Point::new(c.clone()),
                None => {
                    let vd = VdLattice::new(r.dim())?;
                    let piv = pivotal_indices(&cfg, *m, PivotalMode::Fast)?;
                    match piv.into_iter().map(|i| r.point(i)).find(|p| !vd.contains(p)) {
                        Some(p) => p,
                        None => bail!("no pivotal site off V_d for this seed"),
                    }
                }
            };
            let cert = local_modify(&cfg, *m, &u, *n)?;
            println!("u = {}, u_bar = {}, case {:?}, {} site changes", cert.u, cert.u_bar, cert.case, cert.diffs.len());
            out.json("certificate.json", &cert)?;
            if *verify {
                let v = verify_certificate(&cfg, &cert)?;
                println!("verification {}", if v.passed() { "passed" } else { "FAILED" });
                out.json("verification.json", &v)?;
                if !v.passed() {
                    out.manifest("modify", &RunConfig { seed, command: &cli.command })?;
                    bail!("certificate verification failed");
                }
            }
            "modify"
        }
        Command::Beta { model, big_n, m, grid, q_rule, trials } => {
            let ScanMethod::Grid(ps) = ScanMethod::parse_grid(grid)? else { unreachable!() };
            let geom = ExperimentGeometry::new(model.d, *big_n, *m, *trials, seed)?;
            let mut records = Vec::new();
            for p in ps {
                let q = match q_rule {
                    QRule::Equal => model.q.unwrap_or(p),
                    QRule::F => f_disturbance(p, model.d)?,
                };
                let rec = estimate_beta(&ModelSpec::new(model.model, model.d, p, q)?, &geom)?;
                println!("p={p} q={q} beta={:.4} se={:.4}", rec.value, rec.se);
                records.push(rec);
            }
            write_beta_csv(&records, out.create("beta.csv")?)?;
            "beta"
        }
        Command::ScanPc { model, d, bracket, tol, q_rule, big_n, m, trials } => {
            let family = ModelFamily::new(*model, *d, *q_rule)?;
            let geom = ExperimentGeometry::new(*d, *big_n, *m, *trials, seed)?;
            let method = ScanMethod::Bisection {
                lo: bracket.0,
                hi: bracket.1,
                tol: *tol,
            };
            let rep = scan_critical(&family, &geom, &method)?;
            println!("{family}: p_c ≈ {:.4} (95% CI {:.4}..{:.4})", rep.estimate, rep.ci.0, rep.ci.1);
            rep.write_csv(out.create("curve.csv")?)?;
            out.json("crossing.json", &rep)?;
            "scan-pc"
        }
        Command::SlabScan { d, grid, big_n, m, trials } => {
            let ScanMethod::Grid(ps) = ScanMethod::parse_grid(grid)? else { unreachable!() };
            let geom = ExperimentGeometry::new(*d, *big_n, *m, *trials, seed)?;
            let rep = slab_scan(*d, &geom, &ps)?;
            for (label, c) in [("lower", &rep.lower), ("slab", &rep.slab), ("upper", &rep.upper)] {
                println!("{label} ({}): {:.4} (95% CI {:.4}..{:.4})", c.family, c.estimate, c.ci.0, c.ci.1);
                c.write_csv(out.create(&format!("curve_{label}.csv"))?)?;
            }
            println!("sandwich {}", if rep.sandwich_ok { "holds" } else { "FAILS" });
            out.json("slab_scan.json", &rep)?;
            "slab-scan"
        }
        Command::Validate { suite, cases } => {
            let rep = run_suite(*suite, *cases, seed)?;
            for c in &rep.checks {
                println!("{:<28} {:>9} checked {:>4} violations", c.name, c.checked, c.violations);
            }
            out.json("validate.json", &rep)?;
            if !rep.passed() {
                out.manifest("validate", &RunConfig { seed, command: &cli.command })?;
                bail!("validation suite {suite:?} failed");
            }
            "validate"
        }
    };
    out.manifest(name, &RunConfig { seed, command: &cli.command })
}
