//! Command-line harness: plan validation, oracle verification, cost tables,
//! gradient checks, micro-benchmarks, and the toy distillation run.
//!
//! Exit codes: 0 success, 2 config/plan error, 3 verification failure,
//! 4 numeric error.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};

use t3_core::attn::{full_attention_forward, AttnWeights, ModelDims};
use t3_core::config::{Dtype, RunConfig};
use t3_core::cost::{cost_reports, macs_full, macs_t3, token_count, LatentSpec};
use t3_core::error::T3Error;
use t3_core::gradcheck::{check_full_attention, check_t3};
use t3_core::grid::{
    build_layer_schedule, membership, validate_tiling, GridDims, LayerBlueprint, LayerSchedule,
    StrideSpec,
};
use t3_core::retrofit::{
    distill_toy, transform, ComputePlan, DistillSettings, Model,
};
use t3_core::t3::{masked_attention_oracle, t3_forward, T3Layer};
use t3_core::tensor::{matmul, Rng, Scalar, Tensor};

const EXIT_CONFIG: i32 = 2;
const EXIT_VERIFY: i32 = 3;
const EXIT_NUMERIC: i32 = 4;

#[derive(Parser)]
#[command(name = "t3", version, about = "Multi-scale windowed attention workbench")]
struct Cli {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    dtype: Option<Dtype>,

    /// Worker threads for kernel-internal parallelism (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// CSV output path for commands that emit tables.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print and validate the per-layer scale plans.
    Plan,
    /// Run the oracle-equivalence and tiling property suite.
    Verify {
        /// Test hook: corrupt one block index to demonstrate detection.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Emit the parameter/MACs table for the configured resolutions.
    Cost,
    /// Measure wall-clock forward time, full vs windowed.
    Bench,
    /// Compare analytic gradients against central finite differences.
    Gradcheck,
    /// Toy teacher-student distillation between computation modes.
    Distill,
}

fn main() {
    let cli = Cli::parse();
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .ok();
    }
    let mut config = match &cli.config {
        Some(path) => match RunConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                std::process::exit(EXIT_CONFIG);
            }
        },
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dtype) = cli.dtype {
        config.dtype = dtype;
    }

    let code = match run(&cli, &config) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                T3Error::Numeric(_) | T3Error::Training { .. } => EXIT_NUMERIC,
                _ => EXIT_CONFIG,
            }
        }
    };
    std::process::exit(code);
}

fn run(cli: &Cli, config: &RunConfig) -> Result<i32, T3Error> {
    match &cli.command {
        Command::Plan => cmd_plan(config),
        Command::Verify { inject_fault } => cmd_verify(cli, config, *inject_fault),
        Command::Cost => cmd_cost(cli, config),
        Command::Bench => cmd_bench(cli, config),
        Command::Gradcheck => cmd_gradcheck(config),
        Command::Distill => cmd_distill(cli, config),
    }
}

fn write_csv(path: &Option<PathBuf>, contents: &str) -> Result<(), T3Error> {
    if let Some(path) = path {
        let mut f = std::fs::File::create(path)?;
        f.write_all(contents.as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_plan(config: &RunConfig) -> Result<i32, T3Error> {
    let grid = config.grid_dims()?;
    let schedule = config.schedule()?;
    let l = grid.len() as u128;
    let c = config.model.channels as u128;
    println!(
        "grid ({}, {}, {})  L = {}  depth = {}  group of {}",
        grid.t,
        grid.h,
        grid.w,
        grid.len(),
        schedule.depth,
        schedule.group_size
    );
    let mut all_ok = true;
    for (slot, cfg) in schedule.group.iter().enumerate() {
        let window = cfg.window();
        let mut attn_macs = 0u128;
        println!(
            "layer slot {slot} (layers {slot}, {}, ...)  window ({}, {}, {})  L_b = {}  axis_preserving = {:?}",
            slot + schedule.group_size,
            window.m_t,
            window.m_h,
            window.m_w,
            window.len(),
            cfg.axis_preserving
        );
        for plan in &cfg.scales {
            let verdict = match validate_tiling(plan, grid) {
                None => "ok".to_string(),
                Some(v) => {
                    all_ok = false;
                    format!("VIOLATION {v:?}")
                }
            };
            attn_macs += 2 * l * plan.block_len() as u128 * c;
            println!(
                "  scale {}: stride ({}, {}, {})  blocks {}x{}x{} = {}  tiling {}",
                plan.scale_index,
                plan.stride.t,
                plan.stride.h,
                plan.stride.w,
                plan.block_counts[0],
                plan.block_counts[1],
                plan.block_counts[2],
                plan.block_count(),
                verdict
            );
        }
        println!("  attn MACs per layer: {attn_macs}");
    }
    Ok(if all_ok { 0 } else { EXIT_VERIFY })
}

struct SuiteResult {
    failures: usize,
}

impl SuiteResult {
    fn check(&mut self, name: &str, ok: bool, detail: String) {
        if ok {
            println!("PASS  {name}");
        } else {
            self.failures += 1;
            println!("FAIL  {name}: {detail}");
        }
    }
}

fn verify_suite<T: Scalar>(
    config: &RunConfig,
    grid: GridDims,
    schedule: &LayerSchedule,
    tol: f64,
) -> Result<i32, T3Error> {
    let dims = ModelDims::new(
        config.model.channels,
        config.model.heads,
        config.model.ffn_width,
        config.model.depth,
    )?;
    let mut rng = Rng::new(config.seed);
    let weights = AttnWeights::<T>::random(dims.channels, &mut rng);
    let x: Tensor<T> = rng.uniform_tensor(vec![grid.len(), dims.channels], -1.0, 1.0);
    let mut suite = SuiteResult { failures: 0 };

    // tiling and membership properties for every scheduled config
    for (slot, cfg) in schedule.group.iter().enumerate() {
        let mut ok = true;
        let mut detail = String::new();
        for plan in &cfg.scales {
            if let Some(v) = validate_tiling(plan, grid) {
                ok = false;
                detail = format!("scale {}: {v:?}", plan.scale_index);
            }
        }
        suite.check(&format!("tiling slot {slot}"), ok, detail);

        let s = cfg.scale_count();
        let mut ok = true;
        let mut detail = String::new();
        'outer: for t in 0..grid.t {
            for h in 0..grid.h {
                for w in 0..grid.w {
                    let omega = membership(grid, cfg, (t, h, w))?;
                    if omega.len() != s {
                        ok = false;
                        detail = format!("voxel ({t},{h},{w}) has |Ω| = {}", omega.len());
                        break 'outer;
                    }
                }
            }
        }
        suite.check(&format!("membership slot {slot}"), ok, detail);
        let z = cfg.normalization();
        suite.check(
            &format!("normalization slot {slot}"),
            (z - 1.0).abs() < 1e-9,
            format!("Z = {z}"),
        );
    }

    // degenerate reductions
    {
        let bp = LayerBlueprint {
            window: [grid.t, grid.h, grid.w],
            scales: 1,
            strides: StrideSpec::Named("boundary".into()),
            axis_preserving: Default::default(),
            scale_weights: None,
        };
        let cfg = bp.resolve(grid)?;
        let layer = T3Layer::new(weights.clone(), cfg, dims, grid)?;
        let t3 = t3_forward(&x, &layer)?;
        let full = full_attention_forward(&x, &weights, &dims)?;
        let diff = t3.max_abs_diff(&full);
        suite.check(
            "degenerate full-window equals full attention",
            diff <= tol,
            format!("max abs diff {diff}"),
        );

        let unit = LayerBlueprint {
            window: [1, 1, 1],
            scales: 2,
            strides: StrideSpec::Named("boundary".into()),
            axis_preserving: Default::default(),
            scale_weights: None,
        };
        let cfg = unit.resolve(grid)?;
        let layer = T3Layer::new(weights.clone(), cfg, dims, grid)?;
        let t3 = t3_forward(&x, &layer)?;
        let linear = matmul(&matmul(&x, &weights.w_v)?, &weights.w_o)?;
        let diff = t3.max_abs_diff(&linear);
        suite.check(
            "degenerate unit-window equals W_V->W_O linear map",
            diff <= tol,
            format!("max abs diff {diff}"),
        );
    }

    // masked-oracle equivalence per scheduled slot
    for (slot, cfg) in schedule.group.iter().enumerate() {
        let layer = T3Layer::new(weights.clone(), cfg.clone(), dims, grid)?;
        let out = t3_forward(&x, &layer)?;
        let oracle = masked_attention_oracle(&x, &layer)?;
        let diff = out.max_abs_diff(&oracle);
        suite.check(
            &format!("masked oracle slot {slot}"),
            diff <= tol,
            format!("max abs diff {diff}"),
        );
    }

    println!(
        "{}",
        if suite.failures == 0 {
            "verify: all checks passed".to_string()
        } else {
            format!("verify: {} check(s) failed", suite.failures)
        }
    );
    Ok(if suite.failures == 0 { 0 } else { EXIT_VERIFY })
}

fn cmd_verify(_cli: &Cli, config: &RunConfig, inject_fault: bool) -> Result<i32, T3Error> {
    let grid = config.grid_dims()?;
    if grid.len() > 512 {
        return Err(T3Error::Config(format!(
            "verify requires L <= 512 (masked oracle materializes LxL); got L = {}",
            grid.len()
        )));
    }
    let mut schedule = config.schedule()?;
    if inject_fault {
        // flip one membership index so the suite has something to find
        let plan = &mut schedule.group[0].scales[0];
        plan.blocks[0][0] = plan.blocks.last().unwrap()[0];
    }
    match config.dtype {
        Dtype::F32 => verify_suite::<f32>(config, grid, &schedule, 1e-5),
        Dtype::F64 => verify_suite::<f64>(config, grid, &schedule, 1e-10),
    }
}

fn fmt_units(v: u128) -> String {
    let v = v as f64;
    if v >= 1e12 {
        format!("{:.1}T", v / 1e12)
    } else if v >= 1e9 {
        format!("{:.1}G", v / 1e9)
    } else if v >= 1e6 {
        format!("{:.1}M", v / 1e6)
    } else {
        format!("{v:.0}")
    }
}

fn cmd_cost(cli: &Cli, config: &RunConfig) -> Result<i32, T3Error> {
    let dims = ModelDims::new(
        config.model.channels,
        config.model.heads,
        config.model.ffn_width,
        config.model.depth,
    )?;
    let mut csv = String::from(
        "schema=1,resolution,mode,L,rest,qkv,o,ffn,attn,total,speedup_attn\n",
    );
    println!(
        "{:<12} {:<5} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "resolution", "mode", "L", "Rest", "QKV", "O", "FFN", "Attn", "All"
    );
    for res in &config.cost.resolutions {
        let spec = LatentSpec::new(res.height, res.width, res.frames);
        let (grid, l) = token_count(&spec)?;
        let bp = LayerBlueprint {
            window: res.window,
            scales: 2,
            strides: StrideSpec::Named("boundary".into()),
            axis_preserving: Default::default(),
            scale_weights: None,
        };
        let schedule = build_layer_schedule(dims.depth, &[bp], grid)?;
        let (full, t3) = cost_reports(l, &schedule, grid, &dims, res.rest_params, res.rest_macs)?;
        for report in [&full, &t3] {
            let mode = match report.mode {
                t3_core::cost::Mode::Full => "full",
                t3_core::cost::Mode::T3 => "t3",
            };
            let m = &report.macs;
            println!(
                "{:<12} {:<5} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}  x{:.1}",
                res.name,
                mode,
                l,
                fmt_units(m.rest),
                fmt_units(m.proj_qkv),
                fmt_units(m.proj_o),
                fmt_units(m.ffn),
                fmt_units(m.attn),
                fmt_units(m.total),
                report.speedup_attn
            );
            csv.push_str(&format!(
                "1,{},{},{},{},{},{},{},{},{},{:.3}\n",
                res.name, mode, l, m.rest, m.proj_qkv, m.proj_o, m.ffn, m.attn, m.total,
                report.speedup_attn
            ));
        }
        let p = &full.params;
        println!(
            "{:<12} param {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
            res.name,
            "",
            fmt_units(p.rest),
            fmt_units(p.proj_qkv),
            fmt_units(p.proj_o),
            fmt_units(p.ffn),
            "0",
            fmt_units(p.total)
        );
    }
    write_csv(&cli.out, &csv)?;
    Ok(0)
}

fn median(times: &mut [f64]) -> f64 {
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times[times.len() / 2]
}

fn cmd_bench(cli: &Cli, config: &RunConfig) -> Result<i32, T3Error> {
    let [gt, gh, gw] = config.bench.grid;
    let grid = GridDims::new(gt, gh, gw)?;
    let dims = ModelDims::new(
        config.model.channels,
        config.model.heads,
        config.model.ffn_width,
        1,
    )?;
    let l = grid.len();
    let runs = config.bench.runs.max(1);
    let mut rng = Rng::new(config.seed);
    let weights = AttnWeights::<f32>::random(dims.channels, &mut rng);
    let x: Tensor<f32> = rng.uniform_tensor(vec![l, dims.channels], -1.0, 1.0);

    let bp = LayerBlueprint {
        window: config.bench.window,
        scales: 2,
        strides: StrideSpec::Named("boundary".into()),
        axis_preserving: Default::default(),
        scale_weights: None,
    };
    let cfg = bp.resolve(grid)?;
    let layer = T3Layer::new(weights.clone(), cfg.clone(), dims, grid)?;

    let mut t3_times: Vec<f64> = (0..runs)
        .map(|_| {
            let t0 = Instant::now();
            t3_forward(&x, &layer).map(|_| t0.elapsed().as_secs_f64())
        })
        .collect::<Result<_, _>>()?;
    let t3_median = median(&mut t3_times);

    let full_median = if l <= config.bench.full_cap {
        let mut times: Vec<f64> = (0..runs)
            .map(|_| {
                let t0 = Instant::now();
                full_attention_forward(&x, &weights, &dims).map(|_| t0.elapsed().as_secs_f64())
            })
            .collect::<Result<_, _>>()?;
        Some(median(&mut times))
    } else {
        println!(
            "full attention skipped: L = {l} exceeds cap {}",
            config.bench.full_cap
        );
        None
    };

    let schedule = build_layer_schedule(1, &[bp], grid)?;
    let analytic_full = macs_full(l, &dims, 0);
    let analytic_t3 = macs_t3(&schedule, grid, &dims, 0)?;
    let macs_ratio = analytic_full.attn as f64 / analytic_t3.attn as f64;

    println!("L = {l}  C = {}  L_b = {}  S = {}", dims.channels, cfg.window().len(), cfg.scale_count());
    println!("t3 median over {runs} runs: {:.4}s", t3_median);
    if let Some(f) = full_median {
        let speedup = f / t3_median;
        println!("full median over {runs} runs: {f:.4}s");
        println!("achieved speedup x{speedup:.2}  (analytic attn MACs ratio x{macs_ratio:.2})");
        if l < 512 {
            println!("note: L < 512 is overhead-dominated; speedup may be < 1");
        }
    }
    let csv = format!(
        "schema=1,L,C,L_b,S,runs,t3_median_s,full_median_s,macs_ratio,machine\nbench,{l},{},{},{},{runs},{:.6},{},{:.3},{}\n",
        dims.channels,
        cfg.window().len(),
        cfg.scale_count(),
        t3_median,
        full_median.map_or("skipped".into(), |f| format!("{f:.6}")),
        macs_ratio,
        std::env::consts::ARCH
    );
    write_csv(&cli.out, &csv)?;
    Ok(0)
}

fn cmd_gradcheck(config: &RunConfig) -> Result<i32, T3Error> {
    // f64 is mandatory here; f32 cannot reach the 1e-6 tolerance
    let tol = 1e-6;
    let dims = ModelDims::new(8, 2, 32, 1)?;
    let full = check_full_attention(6, dims, config.seed, 1e-5)?;
    println!(
        "full attention: max rel error {:.3e} at {} ({} entries)",
        full.max_rel_error, full.worst_param, full.checked
    );

    let grid = GridDims::new(2, 2, 4)?;
    let bp = LayerBlueprint {
        window: [1, 2, 2],
        scales: 2,
        strides: StrideSpec::Named("boundary".into()),
        axis_preserving: Default::default(),
        scale_weights: None,
    };
    let cfg = bp.resolve(grid)?;
    let t3_dims = ModelDims::new(4, 2, 16, 1)?;
    let t3 = check_t3(grid, &cfg, t3_dims, config.seed + 1, 1e-5)?;
    println!(
        "windowed: max rel error {:.3e} at {} ({} entries)",
        t3.max_rel_error, t3.worst_param, t3.checked
    );

    if full.max_rel_error <= tol && t3.max_rel_error <= tol {
        println!("gradcheck passed (tolerance {tol:.0e})");
        Ok(0)
    } else {
        let worst = if full.max_rel_error > t3.max_rel_error {
            &full.worst_param
        } else {
            &t3.worst_param
        };
        println!("gradcheck FAILED: worst parameter {worst}");
        Ok(EXIT_VERIFY)
    }
}

fn cmd_distill(cli: &Cli, config: &RunConfig) -> Result<i32, T3Error> {
    let grid = config.grid_dims()?;
    let dims = ModelDims::new(
        config.model.channels,
        config.model.heads,
        config.model.ffn_width,
        config.model.depth,
    )?;
    let schedule = config.schedule()?;
    let mut rng = Rng::new(config.seed);
    let layers: Vec<AttnWeights<f64>> = (0..dims.depth)
        .map(|_| AttnWeights::random(dims.channels, &mut rng))
        .collect();

    let (teacher, mut student): (Model<f64>, Model<f64>) = if config.distill.reverse {
        (
            transform(layers.clone(), dims, grid, ComputePlan::Windowed(schedule))?,
            transform(layers, dims, grid, ComputePlan::Full)?,
        )
    } else {
        (
            transform(layers.clone(), dims, grid, ComputePlan::Full)?,
            transform(layers, dims, grid, ComputePlan::Windowed(schedule))?,
        )
    };

    let settings = DistillSettings {
        steps: config.distill.steps,
        learning_rate: config.distill.learning_rate,
        seed: config.seed,
        pool: config.distill.pool,
    };
    let state = distill_toy(&teacher, &mut student, &settings)?;
    let direction = if config.distill.reverse {
        "t3 -> full"
    } else {
        "full -> t3"
    };
    println!(
        "distill {direction}: {} steps, lr {}, initial MSE {:.6e}, final MSE {:.6e} (ratio {:.4})",
        state.steps,
        state.learning_rate,
        state.initial_eval,
        state.final_eval,
        state.final_eval / state.initial_eval
    );

    let mut csv = String::from("schema=1,step,train_mse\n");
    for (i, loss) in state.loss_history.iter().enumerate() {
        csv.push_str(&format!("loss,{i},{loss:.9e}\n"));
    }
    write_csv(&cli.out, &csv)?;
    Ok(0)
}
