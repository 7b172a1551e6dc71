//! Desk-scale 1D Burgers run: greedy training from the four corners, then
//! `e_max` on a 3x3 test grid.
//!
//! ```text
//! cargo run --release --example desk_burgers1d -- [strong|weakTypeI|weakTypeII] [epochs]
//! ```

use std::time::Instant;

use wglasdi::data::{DataSource, ParamSpace};
use wglasdi::fom::{FomProblem, Grid, TimeGrid};
use wglasdi::latentdi::LibrarySpec;
use wglasdi::net::NetSpec;
use wglasdi::par::Execution;
use wglasdi::rom::{heatmap, TestGrid};
use wglasdi::trainer::{greedy_loop, LossMode, TrainConfig};

fn main() -> wglasdi::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mode = match args.get(1).map(String::as_str) {
        Some("strong") => LossMode::Strong,
        Some("weakTypeII") => LossMode::WeakTypeII,
        _ => LossMode::WeakTypeI,
    };
    let epochs = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5000);
    let hidden = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(100);
    let lr = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let problem = FomProblem::burgers1d();
    let source = DataSource {
        space: ParamSpace::for_problem(&problem, 9)?,
        problem,
        grid: Grid::line(-3.0, 3.0, 201)?,
        time: TimeGrid::new(1.0, 100)?,
        noise_level: 0.1,
        seed: 7,
    };
    let initial_idx = if std::env::var("UNIFORM").is_ok() {
        source.space.uniform_subgrid(3)?
    } else {
        source.space.corners()
    };
    let initial = source.assemble(&initial_idx, Execution::Parallel)?;
    let mut config = TrainConfig {
        mode,
        epochs,
        budget: 9,
        update_every: epochs / 10,
        execution: Execution::Parallel,
        ..TrainConfig::default()
    };
    config.adam.lr = lr;
    let env = |k: &str| std::env::var(k).ok().and_then(|v| v.parse::<usize>().ok());
    config.test_functions.support_steps = env("SUPPORT");
    config.test_functions.stride = env("STRIDE");
    if let Some(n) = env("SEED") {
        config.seed = n as u64;
    }
    if let Some(n) = env("UPDATE") {
        config.update_every = n;
    }
    if mode == LossMode::Strong {
        config.beta3 = 0.0;
    }
    let spec = NetSpec::new(vec![201, hidden, 5])?;
    let t = Instant::now();
    let trainer = greedy_loop(source.clone(), initial, &spec, LibrarySpec::new(1)?, config)?;
    println!("trained in {:.1}s", t.elapsed().as_secs_f64());
    for r in trainer.state.history.iter().step_by((epochs / 10).max(1)) {
        println!(
            "{:6} {:.4e} ae {:.3e} z {:.3e} u {:.3e}",
            r.epoch, r.parts.total, r.parts.ae, r.parts.zdot, r.parts.udot
        );
    }
    for e in &trainer.state.trace {
        println!(
            "event {} epoch {} mu {:?} ind {:.4e}",
            e.event, e.epoch, e.mu, e.indicator
        );
    }
    let model = trainer.model()?;
    let grid = TestGrid {
        axis1: vec![1, 4, 7],
        axis2: vec![1, 4, 7],
    };
    let refs = grid
        .flat_indices(&source.space)?
        .iter()
        .map(|&i| Ok(source.entry(i)?.clean))
        .collect::<wglasdi::Result<Vec<_>>>()?;
    let h = heatmap(&model, &source.space, &grid, &refs, Execution::Parallel)?;
    println!("{}", h.to_csv("a\\w"));
    println!("max {:.4} mean {:.4}", h.max(), h.mean());
    if std::env::var("FULL").is_ok() {
        let full = TestGrid::full(&source.space);
        let refs = full
            .flat_indices(&source.space)?
            .iter()
            .map(|&i| Ok(source.entry(i)?.clean))
            .collect::<wglasdi::Result<Vec<_>>>()?;
        let hf = heatmap(&model, &source.space, &full, &refs, Execution::Parallel)?;
        println!("full-grid max {:.4} mean {:.4}", hf.max(), hf.mean());
    }
    if std::env::var("DIAG").is_ok() {
        use wglasdi::rom::max_relative_error;
        for (k, &i) in grid.flat_indices(&source.space)?.iter().enumerate() {
            let mu = source.space.point(i)?;
            let clean = &refs[k];
            let z = model.encoder.eval(clean.view())?;
            let ae = max_relative_error(clean.view(), model.decoder.eval(z.view())?.view())?;
            let zr = model.predict_latent(&mu, clean.row(0).as_slice().unwrap())?;
            let dz = (&zr - &z).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            let zs = z.mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            println!(
                "mu {:?} ae-only {:.4} latent max|dz| {:.3e} (|z| {:.3e}) xi {:?}",
                mu,
                ae,
                dz,
                zs,
                model.coeffs_at(&mu)?.row(1)
            );
        }
    }
    Ok(())
}
