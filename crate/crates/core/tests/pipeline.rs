use terracost::cost::{build_cost_grid, plan, Objective};
use terracost::eval::{ablate_and_evaluate, baseline_expected_time, evaluate, AblationSpec, Variable};
use terracost::nn::{load_model, save_model, train, ModelSpec, StageSpec, TrainConfig};
use terracost::patch::{build_dataset, load_dataset, save_dataset, DatasetParams, Plane, Rect, Split};
use terracost::synth::{coverage_tours, generate_environment, simulate_run, OracleConfig, OraclePredictor};

fn small_spec(side: usize) -> ModelSpec {
    ModelSpec {
        input_side: side,
        planes: Plane::ALL.to_vec(),
        stem_channels: 4,
        stem_stride: 2,
        stages: vec![StageSpec { channels: 4, blocks: 1 }, StageSpec { channels: 8, blocks: 1 }],
    }
}

#[test]
fn synthetic_pipeline_end_to_end() {
    let env = generate_environment(16.0, 16.0, 0.05, 7, 0.5, 22.5, 21).unwrap();
    let cfg = OracleConfig { current_noise: 0.0, ..OracleConfig::default() };
    let tours = coverage_tours(&env, 4, 8, 0.75, 5).unwrap();
    let logs: Vec<_> = tours.iter().map(|t| simulate_run(&env, &cfg, t).unwrap()).collect();
    let params = DatasetParams {
        val_region: Some(Rect { min_x: 0.0, min_y: 0.0, max_x: 4.0, max_y: 16.0 }),
        seed: 9,
        ..DatasetParams::default()
    };
    let (ds, stats) = build_dataset(&env, &logs, &params).unwrap();
    assert_eq!(ds.side, 40);
    assert!(ds.samples.len() > 100, "{stats:?}");
    for split in [Split::Train, Split::Test, Split::Val] {
        assert!(ds.count(split) > 0, "{split:?}");
    }

    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path().join("d.tcpd")).unwrap();
    // The file keeps patch values and labels but not the source segment.
    let mut stripped = ds.clone();
    stripped.samples.iter_mut().for_each(|s| s.patch.segment = None);
    assert_eq!(load_dataset(dir.path().join("d.tcpd")).unwrap(), stripped);

    // The oracle read off the patch tracks the log-derived labels closely
    // on noiseless data.
    let oracle = OraclePredictor { cfg: cfg.clone(), num_classes: env.num_classes(), resolution: 0.05 };
    let r = evaluate(&oracle, &ds, Split::Test, 1.0).unwrap();
    assert!(r.mape(Variable::W) < 5.0, "{}", r.mape(Variable::W));
    assert!(r.mape(Variable::V) < 5.0, "{}", r.mape(Variable::V));

    let model = train(&ds, &small_spec(ds.side), &TrainConfig { epochs: 1, ..TrainConfig::default() }).unwrap();
    save_model(&model, dir.path().join("m.tcnn")).unwrap();
    let back = load_model(dir.path().join("m.tcnn")).unwrap();
    let a = evaluate(&model, &ds, Split::Val, 1.0).unwrap();
    assert_eq!(a, evaluate(&back, &ds, Split::Val, 1.0).unwrap());
    let all = AblationSpec::new(&Plane::ALL, 3).unwrap();
    assert_eq!(ablate_and_evaluate(&model, &ds, Split::Val, &all, 1.0).unwrap(), a);
    let noisy = AblationSpec::new(&[Plane::Ortho, Plane::Class], 3).unwrap();
    assert_eq!(
        ablate_and_evaluate(&model, &ds, Split::Val, &noisy, 1.0).unwrap(),
        ablate_and_evaluate(&model, &ds, Split::Val, &noisy, 1.0).unwrap()
    );
    let base = baseline_expected_time(&ds, Split::Val, 1.0, 1.0).unwrap();
    assert_eq!(base.all().unwrap().count, ds.count(Split::Val));

    let grid = build_cost_grid(&env, &oracle, 1.0).unwrap();
    let (x0, y0, x1, y1) = env.extent();
    let time = plan(&grid, (x0 + 3.0, y0 + 3.0), (x1 - 3.0, y1 - 3.0), Objective::Time).unwrap();
    let energy = plan(&grid, (x0 + 3.0, y0 + 3.0), (x1 - 3.0, y1 - 3.0), Objective::Energy).unwrap();
    assert!(time.cost.traversal_time <= energy.cost.traversal_time);
    assert!(energy.cost.energy <= time.cost.energy);
}
