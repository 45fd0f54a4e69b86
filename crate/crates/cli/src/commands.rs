use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;
use shufdp::accountant::{solve_sigma_with, AccountantConfig, Budget, MechanismSpec};
use shufdp::audit::run_audit;
use shufdp::dataset::load_source;
use shufdp::lognormal::{fw_approx, mc_sum_cdf};
use shufdp::nn::{Label, Loss, Model, ModelConfig, ParamSet, Sample};
use shufdp::permute::{invariant_groups, shuffle_bench as bench};
use shufdp::rng::{stream, Stream};
use shufdp::tensor::Matrix;
use shufdp::toyexp::{grid_density, toy_distances, GridSpec};
use shufdp::trainer::{train as run_train, write_jsonl, TrainConfig};

use crate::manifest::{manifest_path_for, write_atomic, Recorder};
use crate::{
    merge_config, AuditArgs, AuditCmd, BenchCmd, CliError, CliResult, CurveCmd, HeatmapCmd, InvarianceCmd,
    LognormalCmd, MechArgs, SigmaCmd, ToyCmd, TrainCmd,
};

fn required<T>(v: Option<T>, flag: &str) -> CliResult<T> {
    v.ok_or_else(|| CliError::Usage(format!("missing required value --{flag} (flag or config key)")))
}

/// Fully resolved mechanism flags.
#[derive(Debug, Clone, Copy, Serialize)]
struct Mech {
    delta: f64,
    c: f64,
    c_prime: f64,
    d: u64,
    p: f64,
    steps: u64,
}

impl Mech {
    fn resolve(m: &MechArgs) -> CliResult<Self> {
        Ok(Self {
            delta: required(m.delta, "delta")?,
            c: required(m.c, "c")?,
            c_prime: required(m.c_prime, "c-prime")?,
            d: required(m.d, "d")?,
            p: required(m.p, "p")?,
            steps: required(m.steps, "steps")?,
        })
    }

    fn solve(&self, eps: f64, d: u64, shuffled: bool) -> CliResult<shufdp::accountant::SigmaSolution> {
        let spec = MechanismSpec { sigma: 1.0, c: self.c, c_prime: self.c_prime, d, p: self.p, steps: self.steps };
        let total = Budget::new(eps, self.delta)?;
        Ok(solve_sigma_with(total, &spec, shuffled, &AccountantConfig::default())?)
    }
}

fn out_path(explicit: Option<PathBuf>, out_dir: &Path, default_name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| out_dir.join(default_name))
}

/// Writes CSV rows atomically and records the artifact and its manifest.
fn write_csv<R: Serialize>(path: &Path, rows: &[R], mut rec: Recorder) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    write_atomic(path, &bytes)?;
    rec.output(path);
    rec.finish(&manifest_path_for(path))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize, mut rec: Recorder) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(std::io::Error::other)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    rec.output(path);
    rec.finish(&manifest_path_for(path))?;
    Ok(())
}

pub fn sigma(cmd: SigmaCmd, _out_dir: &Path) -> CliResult<()> {
    #[derive(Serialize, serde::Deserialize, Default)]
    #[serde(default)]
    struct Flags {
        #[serde(flatten)]
        mech: MechArgs,
        unshuffled: bool,
    }
    let flags = merge_config(&Flags { mech: cmd.mech, unshuffled: cmd.unshuffled }, cmd.config.as_deref())?;
    let eps = required(flags.mech.eps, "eps")?;
    let mech = Mech::resolve(&flags.mech)?;
    let mut rec = Recorder::new("sigma");
    rec.config(&flags);
    let sol = mech.solve(eps, mech.d, !flags.unshuffled)?;
    rec.mark("solve");
    println!("{}", sol.sigma);
    if let Some(out) = cmd.out {
        write_json(&out, &sol, rec)?;
    }
    Ok(())
}

pub fn curve(cmd: CurveCmd, out_dir: &Path) -> CliResult<()> {
    #[derive(Serialize)]
    struct Row {
        epsilon: f64,
        sigma_shuffled: f64,
        sigma_unshuffled: f64,
    }
    let flags = merge_config(&cmd.mech, cmd.config.as_deref())?;
    let mech = Mech::resolve(&flags)?;
    let mut rec = Recorder::new("curve");
    rec.config(&serde_json::json!({ "mechanism": mech, "eps_list": cmd.eps_list }));
    let mut rows = Vec::with_capacity(cmd.eps_list.len());
    for &eps in &cmd.eps_list {
        let row = Row {
            epsilon: eps,
            sigma_shuffled: mech.solve(eps, mech.d, true)?.sigma,
            sigma_unshuffled: mech.solve(eps, mech.d, false)?.sigma,
        };
        println!("{},{},{}", row.epsilon, row.sigma_shuffled, row.sigma_unshuffled);
        rows.push(row);
    }
    rec.mark("solve");
    write_csv(&out_path(cmd.out, out_dir, "curve.csv"), &rows, rec)
}

fn parse_count(s: &str) -> CliResult<u64> {
    let v: f64 = s.trim().parse().map_err(|_| CliError::Usage(format!("not a number: {s:?}")))?;
    if !(v >= 1.0 && v.fract() == 0.0 && v < 1.9e19) {
        return Err(CliError::Usage(format!("d must be a positive integer, got {s:?}")));
    }
    Ok(v as u64)
}

pub fn heatmap(cmd: HeatmapCmd, out_dir: &Path) -> CliResult<()> {
    #[derive(Serialize)]
    struct Row {
        d: u64,
        epsilon: f64,
        sigma: f64,
    }
    let mut flags = cmd.mech.clone();
    flags.d = Some(flags.d.unwrap_or(1));
    let flags = merge_config(&flags, cmd.config.as_deref())?;
    let mech = Mech::resolve(&flags)?;
    let ds = cmd.d_list.iter().map(|s| parse_count(s)).collect::<CliResult<Vec<_>>>()?;
    let mut rec = Recorder::new("heatmap");
    rec.config(&serde_json::json!({ "mechanism": mech, "d_list": ds, "eps_list": cmd.eps_list }));
    let mut rows = Vec::new();
    for &d in &ds {
        for &eps in &cmd.eps_list {
            let sigma = mech.solve(eps, d, d > 1)?.sigma;
            rows.push(Row { d, epsilon: eps, sigma });
        }
    }
    rec.mark("solve");
    let path = out_path(cmd.out, out_dir, "heatmap.csv");
    write_csv(&path, &rows, rec)?;
    println!("{} cells written to {}", rows.len(), path.display());
    Ok(())
}

pub fn train(cmd: TrainCmd, out_dir: &Path) -> CliResult<()> {
    let mut cfg = TrainConfig::load(&cmd.config)?;
    if let Some(seed) = cmd.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = cmd.steps {
        cfg.steps = steps;
    }
    if cmd.no_shuffle {
        cfg.shuffle = false;
    }
    let dir = cmd.out.unwrap_or_else(|| out_dir.join("train"));
    std::fs::create_dir_all(&dir)?;
    let mut rec = Recorder::new("train");
    rec.config(&serde_json::json!({ "train": cfg, "data": cmd.data }));
    rec.seed(cfg.seed);

    let data: Vec<Sample<f64>> = load_source(&cmd.data, cfg.model.input_dim)?;
    rec.mark("load");
    let outcome = run_train::<f64, _>(&cfg, &data)?;
    rec.mark("train");

    let weights = dir.join("weights.bin");
    let mut buf = Vec::new();
    outcome.model.write_weights(&mut buf)?;
    write_atomic(&weights, &buf)?;
    rec.output(&weights);

    let steps = dir.join("steps.jsonl");
    {
        let f = BufWriter::new(File::create(&steps)?);
        write_jsonl(&outcome.records, f)?;
    }
    rec.output(&steps);

    let summary = dir.join("summary.json");
    let mut bytes = serde_json::to_vec_pretty(&outcome.summary).map_err(std::io::Error::other)?;
    bytes.push(b'\n');
    write_atomic(&summary, &bytes)?;
    rec.output(&summary);
    rec.finish(&dir.join("manifest.json"))?;

    let s = &outcome.summary;
    println!(
        "path={:?} sigma_used={} d={} final_loss={:.6} final_accuracy={:.4}",
        s.path, s.sigma_used, s.d, s.final_loss, s.final_accuracy
    );
    Ok(())
}

pub fn audit(cmd: AuditCmd, out_dir: &Path) -> CliResult<()> {
    let a: AuditArgs = merge_config(&cmd.args, cmd.config.as_deref())?;
    let sigma = required(a.sigma, "sigma")?;
    let c = required(a.c, "c")?;
    let c_prime = required(a.c_prime, "c-prime")?;
    let d = required(a.d, "d")?;
    let trials = a.trials.unwrap_or(10_000);
    let delta = a.delta.unwrap_or(1e-5);
    let reps = a.bootstrap.unwrap_or(200);
    let seed = a.seed.unwrap_or(0);
    let shuffle = !a.no_shuffle;
    let mut rec = Recorder::new("audit");
    rec.config(&serde_json::json!({
        "sigma": sigma, "c": c, "c_prime": c_prime, "d": d, "trials": trials,
        "delta": delta, "bootstrap": reps, "shuffle": shuffle,
    }));
    rec.seed(seed);
    let spec = MechanismSpec::single(sigma, c, c_prime, d);
    let report = run_audit(&spec, delta, trials, shuffle, reps, seed)?;
    rec.mark("audit");
    println!(
        "eps_empirical={:.4} ci=[{:.4}, {:.4}] eps_theoretical={:.4} alpha={:.4} beta={:.4} clamped={}",
        report.outcome.eps_empirical,
        report.ci_low,
        report.ci_high,
        report.eps_theoretical,
        report.outcome.alpha,
        report.outcome.beta,
        report.outcome.clamped
    );
    write_json(&out_path(cmd.out, out_dir, "audit.json"), &report, rec)
}

pub fn lognormal_compare(cmd: LognormalCmd, out_dir: &Path) -> CliResult<()> {
    #[derive(Serialize)]
    struct Row {
        x: f64,
        cdf_fw: f64,
        cdf_mc: f64,
    }
    if cmd.d == 0 || cmd.points == 0 {
        return Err(shufdp::Error::Domain("d and points must be >= 1".into()).into());
    }
    let mut rec = Recorder::new("lognormal-compare");
    rec.config(&serde_json::json!({ "d": cmd.d, "sigma": cmd.sigma, "draws": cmd.draws, "points": cmd.points }));
    rec.seed(cmd.seed);
    let mus = vec![0.0; cmd.d];
    let sigma2 = cmd.sigma * cmd.sigma;
    let fw = fw_approx(&mus, sigma2)?;
    let samples = mc_sum_cdf(&mus, sigma2, cmd.draws, cmd.seed)?;
    rec.mark("sample");
    let n = samples.len();
    let rows: Vec<Row> = (0..cmd.points)
        .map(|k| {
            let idx = (((k as f64 + 0.5) / cmd.points as f64) * n as f64) as usize;
            let idx = idx.min(n - 1);
            let x = samples[idx];
            Row { x, cdf_fw: fw.cdf(x), cdf_mc: (idx + 1) as f64 / n as f64 }
        })
        .collect();
    // exact sup distance over every sample, not just the printed points
    let ks = samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = fw.cdf(x);
            (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
        })
        .fold(0.0, f64::max);
    println!("ks={ks:.6} mu_y={} sigma2_y={}", fw.mu_y, fw.sigma2_y);
    write_csv(&out_path(cmd.out, out_dir, "lognormal_compare.csv"), &rows, rec)
}

pub fn toy_distance(cmd: ToyCmd, out_dir: &Path) -> CliResult<()> {
    #[derive(Serialize)]
    struct Row {
        x: f64,
        y: f64,
        plain_c1: f64,
        plain_c2: f64,
        shuffled_c1: f64,
        shuffled_c2: f64,
    }
    if cmd.c1.len() != 2 || cmd.c2.len() != 2 {
        return Err(CliError::Usage("--c1 and --c2 take two comma-separated values".into()));
    }
    let grid = GridSpec::new(cmd.lo, cmd.hi, cmd.grid)?;
    let mut rec = Recorder::new("toy-distance");
    rec.config(&serde_json::json!({ "c1": cmd.c1, "c2": cmd.c2, "sigma": cmd.sigma, "grid": grid }));
    let dist = toy_distances(&cmd.c1, &cmd.c2, cmd.sigma, &grid)?;
    let dens = [
        grid_density(&cmd.c1, cmd.sigma, &grid, false)?,
        grid_density(&cmd.c2, cmd.sigma, &grid, false)?,
        grid_density(&cmd.c1, cmd.sigma, &grid, true)?,
        grid_density(&cmd.c2, cmd.sigma, &grid, true)?,
    ];
    rec.mark("densities");
    let m = grid.points_per_axis;
    let rows: Vec<Row> = (0..m * m)
        .map(|k| Row {
            x: grid.coord(k % m),
            y: grid.coord(k / m),
            plain_c1: dens[0][k],
            plain_c2: dens[1][k],
            shuffled_c1: dens[2][k],
            shuffled_c2: dens[3][k],
        })
        .collect();
    println!("unshuffled={:.6} shuffled={:.6} ratio={:.6}", dist.unshuffled, dist.shuffled, dist.ratio);
    write_csv(&out_path(cmd.out, out_dir, "toy_distance.csv"), &rows, rec)
}

pub fn invariance_check(cmd: InvarianceCmd) -> CliResult<()> {
    let mut config = ModelConfig::load(&cmd.config)?;
    config.seed = cmd.seed;
    let model: Model<f64> = config.build()?;
    let groups = invariant_groups(&model);
    let mut rng = stream(cmd.seed, Stream::Permutation);
    let mut data_rng = stream(cmd.seed, Stream::Data);
    let (mut fwd, mut bwd) = (0.0f64, 0.0f64);
    let out_dim = config.output_dim();
    for _ in 0..cmd.trials.max(1) {
        let x = Matrix::from_fn(cmd.seq.max(1), config.input_dim, |_, _| data_rng.random_range(-1.0..1.0));
        let target = (0..out_dim).map(|_| data_rng.random_range(-1.0..1.0)).collect();
        let sample = Sample { x, label: Label::Target(target) };

        let mut permuted = model.clone();
        let (_, mut expected) = model.gradient(&sample, Loss::SquaredError)?;
        for g in &groups {
            let p = g.sample(&mut rng)?;
            p.apply(&mut permuted.blocks[g.block])?;
            p.apply(&mut expected.blocks[g.block])?;
        }
        let a = model.logits(&sample.x)?;
        let b = permuted.logits(&sample.x)?;
        fwd = a.iter().zip(&b).map(|(u, v)| (u - v).abs()).fold(fwd, f64::max);
        let (_, got) = permuted.gradient(&sample, Loss::SquaredError)?;
        bwd = got.flatten().iter().zip(expected.flatten()).map(|(u, v)| (u - v).abs()).fold(bwd, f64::max);
    }
    println!("groups={} params={}", groups.len(), model.num_params());
    println!("max_forward_deviation={fwd:e}");
    println!("max_backward_deviation={bwd:e}");
    Ok(())
}

pub fn shuffle_bench(cmd: BenchCmd, out_dir: &Path) -> CliResult<()> {
    let mut rec = Recorder::new("shuffle-bench");
    rec.config(&serde_json::json!({ "n": cmd.n, "reps": cmd.reps, "precision": cmd.precision, "verify": !cmd.no_verify }));
    rec.seed(cmd.seed);
    let report = if cmd.precision == "f32" {
        bench::<f32>(cmd.n, cmd.reps, cmd.seed, !cmd.no_verify)?
    } else {
        bench::<f64>(cmd.n, cmd.reps, cmd.seed, !cmd.no_verify)?
    };
    rec.mark("bench");
    println!(
        "n={} reps={} median_ms={:.2} min_ms={:.2} max_ms={:.2} is_permutation={}",
        report.n, report.reps, report.median_ms, report.min_ms, report.max_ms, report.is_permutation
    );
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    println!("note: timings depend on memory bandwidth; this host reports {threads} logical CPUs");
    write_json(&out_path(cmd.out, out_dir, "shuffle_bench.json"), &report, rec)
}
