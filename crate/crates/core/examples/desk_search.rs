//! Runs a small search on the denoise-only procedural corpus and scores the
//! result on held-out images.
//!
//! Usage: desk_search STEPS PATCH LAMBDA1 LAMBDA2 [SEED]

use cirnas_core::degrade::{procedural_corpus, ActiveTypes};
use cirnas_core::eval::{build_test_set, eval_grid, EvalGrid, IdentityModel};
use cirnas_core::trainer::{run_search, RunOutputs, TrainingData};
use cirnas_core::{ModulationModel, Resolution, SearchState, SliceMode, TrainConfig};

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt().with_env_filter("info").init();
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = TrainConfig::desk();
    cfg.total_iterations = args[1].parse()?;
    cfg.patch_size = args[2].parse()?;
    cfg.lambda1 = args[3].parse()?;
    cfg.lambda2 = args[4].parse()?;
    cfg.seed = args.get(5).map(|s| s.parse()).transpose()?.unwrap_or(0);
    cfg.data.active_types = ActiveTypes::DENOISE;
    cfg.consensus_forward = std::env::var("CF").is_ok();
    cfg.warmup_iterations = std::env::var("WARMUP").map(|v| v.parse().unwrap()).unwrap_or(0);
    let data = TrainingData::from_config(&cfg)?;
    let start = std::time::Instant::now();
    let out = run_search(SearchState::new(cfg)?, &data, &RunOutputs::default())?;
    println!("trained in {:?}; last {:?}", start.elapsed(), out.metrics.last());

    let model = ModulationModel::from_search(&out.state, SliceMode::Full)?;
    let grid = EvalGrid::standard();
    let held_out: Vec<_> = procedural_corpus(8, 0xe7a1)
        .into_iter()
        .enumerate()
        .map(|(i, img)| (format!("img{i}"), img))
        .collect();
    let test = build_test_set(&held_out, &grid.test_degradations(ActiveTypes::DENOISE), 7)?;
    let base = eval_grid(&IdentityModel, &grid, &test)?;
    let report = eval_grid(&model, &grid, &test)?;
    let x = cirnas_core::Tensor::zeros([1, 3, 256, 256]);
    let cost = model.run(&x, &grid.tasks())?.report;
    println!(
        "identity {:.2} dB, model {:.2} dB, prefix {}, amortized {:.1} MFLOPs at {}",
        base.mean_best_psnr,
        report.mean_best_psnr,
        model.prefix_len(),
        cost.flops_amortized(27)? / 1e6,
        Resolution::new(256, 256)
    );
    Ok(())
}
