//! Calibration harness for the bundled reference recipe.
//!
//! Synthesizes the full-scale six-variable dataset, prints the anomaly
//! densities and the naive-detector driver F1 on the validation and test
//! years, and checks each against the recipe's target window. Run with
//! `--toml PATH` to dump the recipe as TOML instead of synthesizing.

use anyhow::Result;
use stdc::baselines::naive_predict;
use stdc::events::EventSpec;
use stdc::metrics::{evaluate_drivers, Region};
use stdc::signal::{BaseSpec, NoiseSpec};
use stdc::synth::{
    synthesize_dataset, CouplingSpec, GenConfig, GridSpec, SplitSpec, VariableSpec,
};

/// Six-variable reference recipe on the 200x200 grid over 46 years.
fn reference_config() -> GenConfig {
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
        lead: if coupled { Some(7) } else { None },
        lag: if coupled { Some(3) } else { None },
        random_events,
    };
    let cube = |n| EventSpec::Cube { n, sx: 35, sy: 35, sz: 25 };
    let walk = |n| EventSpec::RandomWalk { n, s: 125 };
    let local = |n| EventSpec::Local { n, sz: 17 };
    let gauss = |n| EventSpec::Gaussian { n, sx: 35, sy: 35, sz: 25 };
    let onset = |n| EventSpec::Onset { n, sx: 17, sy: 17, os: 0.98 };

    GenConfig {
        name: "synthetic_cerra".into(),
        seed: 7,
        grid: GridSpec { lat: 200, lon: 200, years: 46, weeks_per_year: 52, invalid_margin: 0 },
        splits: SplitSpec { train_years: 34, val_years: 6, test_years: 6 },
        coupling: CouplingSpec { coupled_count: 4, lead_max: 9, lag_max: 4 },
        extreme_events: vec![
            EventSpec::Cube { n: 200, sx: 35, sy: 35, sz: 25 },
            EventSpec::RandomWalk { n: 1100, s: 125 },
            EventSpec::Local { n: 2600, sz: 17 },
            EventSpec::Gaussian { n: 340, sx: 35, sy: 35, sz: 25 },
            EventSpec::Onset { n: 25, sx: 17, sy: 17, os: 0.98 },
        ],
        variables: vec![
            var(
                "albedo",
                "%",
                BaseSpec::Sine { shift: 20.0, amp: 5.0, n_osc: 46.0, lat_grad: false },
                NoiseSpec::White { meu: 0.0, sigma: 0.01 },
                (0.30, 0.20, 0.50),
                false,
                None,
                vec![cube(320), walk(3000), local(4000), gauss(300)],
            ),
            var(
                "t2m",
                "K",
                BaseSpec::Sine { shift: 283.0, amp: 10.0, n_osc: 46.0, lat_grad: true },
                NoiseSpec::Red { meu: 0.0, sigma: 0.90, rho: 0.9, spatial_len: 2.0 },
                (0.01, 0.01, 0.50),
                true,
                Some(1),
                vec![onset(18), walk(1800), local(160), gauss(350)],
            ),
            var(
                "tcc",
                "%",
                BaseSpec::Cosine { shift: 60.0, amp: 15.0, n_osc: 46.0, lat_grad: false },
                NoiseSpec::Laplace { meu: 0.0, sigma: 0.70, lambda: 1.0 },
                (0.03, 0.08, 0.50),
                true,
                Some(-1),
                vec![cube(300), walk(2000), local(2800), gauss(290)],
            ),
            var(
                "tp",
                "mm",
                BaseSpec::Sine { shift: 2.0, amp: 1.0, n_osc: 46.0, lat_grad: false },
                NoiseSpec::White { meu: 0.0, sigma: 0.04 },
                (0.07, 0.20, 0.50),
                true,
                Some(-1),
                vec![cube(320), walk(3000), local(4000), gauss(300)],
            ),
            var(
                "rh",
                "%",
                BaseSpec::Cosine { shift: 70.0, amp: 10.0, n_osc: 46.0, lat_grad: false },
                NoiseSpec::Cauchy { meu: 0.0, sigma: 0.7 },
                (0.06, 0.06, 0.50),
                false,
                None,
                vec![onset(18), walk(1800), local(160), gauss(350)],
            ),
            var(
                "vsw",
                "m3 m-3",
                BaseSpec::Sine { shift: 0.3, amp: 0.05, n_osc: 46.0, lat_grad: false },
                NoiseSpec::White { meu: 0.0, sigma: 0.017 },
                (0.10, 0.10, 0.50),
                true,
                Some(-1),
                vec![cube(300), walk(2000), local(2800), gauss(290)],
            ),
        ],
        dependent: vec![],
    }
}

fn check(label: &str, value: f64, lo: f64, hi: f64) -> bool {
    let ok = value >= lo && value <= hi;
    println!(
        "{} {label}: {value:.3} (target {lo:.2}..{hi:.2})",
        if ok { "PASS" } else { "FAIL" }
    );
    ok
}

fn main() -> Result<()> {
    let mut args: Vec<String> = std::env::args().collect();
    let mut cfg = reference_config();
    if let Some(i) = args.iter().position(|a| a == "--seed") {
        cfg.seed = args[i + 1].parse()?;
        args.drain(i..i + 2);
    }
    if args.len() == 4 && args[1] == "--pins" {
        let (lead, lag) = (args[2].parse()?, args[3].parse()?);
        for v in &mut cfg.variables {
            if v.coupled == Some(true) {
                v.lead = Some(lead);
                v.lag = Some(lag);
            }
        }
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
        "grid {}x{}x{} vars {} valid {}",
        r.t, r.lat, r.lon, r.vars, r.valid_pixels
    );
    for v in &r.variables {
        println!(
            "  {:6} coupled={} delta={:+} lead={} lag={} driver%={:.3} random%={:.3}",
            v.name, v.coupled, v.delta, v.lead, v.lag, v.driver_pct, v.random_pct
        );
    }

    let dims = cfg.dims3();
    let pred = naive_predict(&synth.masks.extremes, r.vars);
    let ranges = cfg.week_ranges();
    let mut all_ok = true;
    all_ok &= check("extreme%", r.ratios.extreme_pct, 0.76, 1.56);
    all_ok &= check("correlated%", r.ratios.correlated_pct, 1.29, 2.09);
    all_ok &= check("random%", r.ratios.random_pct, 0.92, 1.72);
    for (split, lo, hi) in [("val", 41.93, 53.93), ("test", 45.24, 57.24)] {
        let region = Region::new(dims, &synth.cube.valid, ranges.get(split).unwrap());
        let counts = evaluate_drivers(&pred, &synth.masks.drivers, &region);
        let f1 = counts.micro.scores().f1;
        all_ok &= check(&format!("naive F1 {split}"), f1, lo, hi);
    }
    println!("{}", if all_ok { "ALL WINDOWS PASS" } else { "CALIBRATION NEEDED" });
    Ok(())
}
