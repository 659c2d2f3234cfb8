//! Calibration harness for the bundled easy recipe: a 50x50 eight-year
//! dataset with two of six variables coupled and doubled base inflation,
//! sized so the quantization-bottleneck model trains in minutes.
//!
//! Synthesizes the dataset, trains the model, and checks the targets the
//! recipe must meet: model validation driver F1 at least ten points above
//! the naive baseline, predicted-driver rate on uncoupled variables under
//! one percent, and a strictly lower F1 when the driver penalty is ablated.
//! Run with `--toml PATH` to dump the recipe instead, `--steps N` to
//! override the step count, `--skip-ablation` to check only the main run.

use anyhow::Result;
use stdc::baselines::naive_predict;
use stdc::cube::compute_climatology;
use stdc::events::EventSpec;
use stdc::grid::BitGrid;
use stdc::metrics::{evaluate_drivers, Region};
use stdc::lfq::Lambdas;
use stdc::model::{Hyper, MicroModel, ModelCfg, ModelData};
use stdc::signal::{BaseSpec, NoiseSpec};
use stdc::synth::{
    synthesize_dataset, CouplingSpec, GenConfig, GridSpec, SplitSpec, SynthesisReport,
    VariableSpec,
};

/// Six-variable recipe on a 50x50 grid over 8 years, 2 variables coupled,
/// kb doubled relative to the reference recipe. Uncoupled variables keep
/// ks = 0 so nothing ties them to the extremes.
fn easy_config() -> GenConfig {
    let var = |name: &str,
               units: &str,
               base: BaseSpec,
               noise: NoiseSpec,
               k: (f64, f64, f64),
               coupled: bool,
               delta: Option<i8>,
               random_events: Vec<EventSpec>| VariableSpec {
        name: name.into(),
        units: units.into(),
        base,
        noise,
        kb: k.0,
        kn: k.1,
        ks: k.2,
        coupled: Some(coupled),
        delta,
        lead: None,
        lag: None,
        random_events,
    };
    let cube = |n| EventSpec::Cube { n, sx: 12, sy: 12, sz: 10 };
    let walk = |n| EventSpec::RandomWalk { n, s: 60 };
    let local = |n| EventSpec::Local { n, sz: 10 };
    let gauss = |n| EventSpec::Gaussian { n, sx: 12, sy: 12, sz: 10 };
    let onset = |n| EventSpec::Onset { n, sx: 10, sy: 10, os: 0.96 };

    GenConfig {
        name: "easy".into(),
        seed: 21,
        grid: GridSpec { lat: 50, lon: 50, years: 8, weeks_per_year: 52, invalid_margin: 1 },
        splits: SplitSpec { train_years: 6, val_years: 1, test_years: 1 },
        coupling: CouplingSpec { coupled_count: 2, lead_max: 5, lag_max: 2 },
        extreme_events: vec![cube(75), walk(100), local(375), gauss(100), onset(5)],
        variables: vec![
            var(
                "albedo",
                "%",
                BaseSpec::Sine { shift: 20.0, amp: 5.0, n_osc: 8.0, lat_grad: false },
                NoiseSpec::White { meu: 0.0, sigma: 0.01 },
                (0.60, 0.20, 0.0),
                false,
                None,
                vec![cube(12), walk(28), local(50), gauss(12)],
            ),
            var(
                "t2m",
                "K",
                BaseSpec::Sine { shift: 283.0, amp: 10.0, n_osc: 8.0, lat_grad: true },
                NoiseSpec::Red { meu: 0.0, sigma: 0.90, rho: 0.9, spatial_len: 2.0 },
                (0.02, 0.01, 0.0),
                false,
                None,
                vec![onset(1), walk(25), local(20), gauss(14)],
            ),
            var(
                "tcc",
                "%",
                BaseSpec::Cosine { shift: 60.0, amp: 15.0, n_osc: 8.0, lat_grad: false },
                NoiseSpec::Laplace { meu: 0.0, sigma: 0.70, lambda: 1.0 },
                (0.06, 0.08, 0.0),
                false,
                None,
                vec![cube(12), walk(28), local(50), gauss(12)],
            ),
            var(
                "tp",
                "mm",
                BaseSpec::Sine { shift: 2.0, amp: 0.5, n_osc: 8.0, lat_grad: false },
                NoiseSpec::White { meu: 0.0, sigma: 0.03 },
                (0.14, 0.20, 0.50),
                true,
                Some(-1),
                vec![cube(2), walk(6), local(10), gauss(2)],
            ),
            var(
                "rh",
                "%",
                BaseSpec::Cosine { shift: 70.0, amp: 10.0, n_osc: 8.0, lat_grad: false },
                NoiseSpec::Laplace { meu: 0.0, sigma: 0.70, lambda: 1.0 },
                (0.12, 0.06, 0.0),
                false,
                None,
                vec![onset(1), walk(25), local(20), gauss(14)],
            ),
            var(
                "vsw",
                "m3 m-3",
                BaseSpec::Sine { shift: 0.3, amp: 0.05, n_osc: 8.0, lat_grad: false },
                NoiseSpec::White { meu: 0.0, sigma: 0.007 },
                (0.20, 0.10, 0.50),
                true,
                Some(1),
                vec![cube(2), walk(6), local(10), gauss(2)],
            ),
        ],
        dependent: vec![],
    }
}

/// Fraction (percent) of valid split voxels predicted as drivers on the
/// uncoupled variables.
fn uncoupled_rate(
    drivers: &[BitGrid],
    report: &SynthesisReport,
    region: &Region,
) -> f64 {
    let plane = (region.dims.lat * region.dims.lon) as u64;
    let mut hits = 0u64;
    let mut total = 0u64;
    let valid_pixels: u64 = region.valid.iter().filter(|v| **v == 1).count() as u64;
    for (v, var) in report.variables.iter().enumerate() {
        if var.coupled {
            continue;
        }
        for t in region.weeks.clone() {
            for p in 0..plane as usize {
                if region.valid[p] == 1 && drivers[v].get(t * plane as usize + p) {
                    hits += 1;
                }
            }
        }
        total += valid_pixels * (region.weeks.end - region.weeks.start) as u64;
    }
    100.0 * hits as f64 / total.max(1) as f64
}

fn main() -> Result<()> {
    let mut args: Vec<String> = std::env::args().collect();
    let mut cfg = easy_config();
    let mut hyper = Hyper { steps: 1500, seed: 21, ..Default::default() };
    let mut run_ablation = true;
    if let Some(i) = args.iter().position(|a| a == "--seed") {
        cfg.seed = args[i + 1].parse()?;
        args.drain(i..i + 2);
    }
    if let Some(i) = args.iter().position(|a| a == "--steps") {
        hyper.steps = args[i + 1].parse()?;
        args.drain(i..i + 2);
    }
    if let Some(i) = args.iter().position(|a| a == "--lambda-driver") {
        hyper.lambdas.driver = args[i + 1].parse()?;
        args.drain(i..i + 2);
    }
    if let Some(i) = args.iter().position(|a| a == "--lambdas") {
        let parts: Vec<f64> =
            args[i + 1].split(',').map(str::parse).collect::<Result<_, _>>()?;
        anyhow::ensure!(parts.len() == 4, "--lambdas wants commit,ent,div,driver");
        hyper.lambdas =
            Lambdas { commit: parts[0], ent: parts[1], div: parts[2], driver: parts[3] };
        args.drain(i..i + 2);
    }
    if let Some(i) = args.iter().position(|a| a == "--lr") {
        hyper.lr = args[i + 1].parse()?;
        args.drain(i..i + 2);
    }
    if let Some(i) = args.iter().position(|a| a == "--tile") {
        hyper.tile = args[i + 1].parse()?;
        args.drain(i..i + 2);
    }
    if let Some(i) = args.iter().position(|a| a == "--batch") {
        hyper.batch = args[i + 1].parse()?;
        args.drain(i..i + 2);
    }
    if let Some(i) = args.iter().position(|a| a == "--ramp") {
        hyper.driver_ramp_frac = args[i + 1].parse()?;
        args.drain(i..i + 2);
    }
    if let Some(i) = args.iter().position(|a| a == "--fix") {
        hyper.fix_every = args[i + 1].parse()?;
        args.drain(i..i + 2);
    }
    if let Some(i) = args.iter().position(|a| a == "--floor") {
        hyper.driver_floor = args[i + 1].parse()?;
        args.drain(i..i + 2);
    }
    if let Some(i) = args.iter().position(|a| a == "--skip-ablation") {
        run_ablation = false;
        args.drain(i..i + 1);
    }
    if args.len() == 3 && args[1] == "--toml" {
        std::fs::write(&args[2], cfg.to_toml_string()?)?;
        println!("wrote {}", args[2]);
        return Ok(());
    }

    let start = std::time::Instant::now();
    let synth = synthesize_dataset(&cfg)?;
    println!("synthesized in {:.1}s", start.elapsed().as_secs_f64());
    let r = &synth.report;
    println!(
        "extreme% {:.3} correlated% {:.3} random% {:.3}",
        r.ratios.extreme_pct, r.ratios.correlated_pct, r.ratios.random_pct
    );
    for v in &r.variables {
        println!(
            "  {:6} coupled={} delta={:+} lead={} lag={} driver%={:.3} random%={:.3}",
            v.name, v.coupled, v.delta, v.lead, v.lag, v.driver_pct, v.random_pct
        );
    }

    let dims = cfg.dims3();
    let ranges = cfg.week_ranges();
    let region = Region::new(dims, &synth.cube.valid, ranges.val.clone());
    let naive = naive_predict(&synth.masks.extremes, r.vars);
    let naive_counts = evaluate_drivers(&naive, &synth.masks.drivers, &region);
    let naive_f1 = naive_counts.micro.scores().f1;
    println!("naive val F1 {naive_f1:.2}");

    let clim = compute_climatology(&synth.cube, 0..cfg.splits.train_years)?;
    let data = ModelData::prepare(&synth.cube, &synth.masks.extremes, &clim)?;

    let t_train = std::time::Instant::now();
    let mut model = MicroModel::init(ModelCfg::new(r.vars), hyper.seed);
    let report = model.train(&data, ranges.train.clone(), &hyper)?;
    println!("trained {} steps in {:.1}s", hyper.steps, t_train.elapsed().as_secs_f64());
    for (i, h) in report.history.iter().enumerate() {
        if i % 150 == 0 || i + 1 == report.history.len() {
            println!(
                "  step {i:4}  total {:8.3}  extreme {:.3}  commit {:.3}  ent {:.3} div {:.3}  driver {:.4}",
                h.total, h.extreme, h.commit, h.ent, h.div, h.driver
            );
        }
    }

    let t_inf = std::time::Instant::now();
    let inf = model.infer(&data, ranges.val.clone())?;
    println!("inference in {:.1}s", t_inf.elapsed().as_secs_f64());
    let model_counts = evaluate_drivers(&inf.drivers, &synth.masks.drivers, &region);
    let model_f1 = model_counts.micro.scores().f1;
    let rate = uncoupled_rate(&inf.drivers, r, &region);
    for (v, var) in r.variables.iter().enumerate() {
        let n = &naive_counts.per_var[v];
        let m = &model_counts.per_var[v];
        println!(
            "  {:6} naive tp {:6} fp {:6} fn {:6} f1 {:6.2} | model tp {:6} fp {:6} fn {:6} f1 {:6.2}",
            var.name,
            n.tp,
            n.fp,
            n.fneg,
            n.scores().f1,
            m.tp,
            m.fp,
            m.fneg,
            m.scores().f1
        );
    }
    println!("model val F1 {model_f1:.2} (naive + {:.2})", model_f1 - naive_f1);
    println!("uncoupled predicted-driver rate {rate:.4}%");

    // Where do the surviving code bits live? Tally predictions by zone.
    let plane = dims.plane();
    for (v, var) in r.variables.iter().enumerate() {
        // [extreme run, driver fringe, random event, clean] x [zone size, predicted]
        let mut zone = [[0u64; 2]; 4];
        for t in ranges.val.clone() {
            for p in 0..plane {
                if synth.cube.valid[p] == 0 {
                    continue;
                }
                let i = t * plane + p;
                let z = if synth.masks.extremes[i] != 0 {
                    0
                } else if synth.masks.drivers[v].get(i) {
                    1
                } else if synth.masks.random[v].get(i) {
                    2
                } else {
                    3
                };
                zone[z][0] += 1;
                zone[z][1] += u64::from(inf.drivers[v].get(i));
            }
        }
        println!(
            "  {:6} q!=0 by zone: run {}/{} fringe {}/{} random {}/{} clean {}/{}",
            var.name,
            zone[0][1],
            zone[0][0],
            zone[1][1],
            zone[1][0],
            zone[2][1],
            zone[2][0],
            zone[3][1],
            zone[3][0]
        );
    }

    let mut ok = true;
    let gate = |label: &str, cond: bool| {
        println!("{} {label}", if cond { "PASS" } else { "FAIL" });
        cond
    };
    ok &= gate("model F1 >= naive F1 + 10", model_f1 >= naive_f1 + 10.0);
    ok &= gate("uncoupled rate < 1%", rate < 1.0);

    if run_ablation {
        let mut ablated = hyper.clone();
        ablated.lambdas.driver = 0.0;
        let t_abl = std::time::Instant::now();
        let mut model0 = MicroModel::init(ModelCfg::new(r.vars), ablated.seed);
        model0.train(&data, ranges.train.clone(), &ablated)?;
        let inf0 = model0.infer(&data, ranges.val.clone())?;
        let f1_0 =
            evaluate_drivers(&inf0.drivers, &synth.masks.drivers, &region).micro.scores().f1;
        println!(
            "ablation (no driver penalty) F1 {f1_0:.2} in {:.1}s",
            t_abl.elapsed().as_secs_f64()
        );
        ok &= gate("ablated F1 strictly lower", f1_0 < model_f1);
    }

    println!("{}", if ok { "ALL TARGETS PASS" } else { "CALIBRATION NEEDED" });
    Ok(())
}
