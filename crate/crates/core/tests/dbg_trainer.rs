use semarflow_core::data::{generate_dataset_in_memory, SceneGenParams};
use semarflow_core::model::{FlowNet, ModelConfig};
use semarflow_core::trainer::{TrainConfig, Trainer};

#[test]
#[ignore]
fn dbg_schedule_phases() {
    let model = FlowNet::<f32>::new(ModelConfig { seed: 2, ..ModelConfig::default() }).unwrap();
    let mut cfg = TrainConfig {
        iterations: 8,
        batch_size: 1,
        seed: 3,
        validate_every_frac: 1.0,
        ..TrainConfig::default()
    };
    cfg.schedule.measure_switch_frac = 0.25;
    cfg.schedule.pass2_start_frac = 0.25;
    cfg.schedule.pass3_start_frac = 0.5;
    let mut trainer = Trainer::new(model, cfg).unwrap();
    let data = generate_dataset_in_memory(3, 64, 64, 2, &SceneGenParams::default()).unwrap();
    let h = trainer.fit(&data, &[], None, |s| {
        println!(
            "it {} total {:.5} ph {:.5} ar {:.6} aug {:.6} p3 {}",
            s.iteration, s.total, s.photometric, s.ar, s.aug, s.pass3_ran
        );
    })
    .unwrap();
    let _ = h;
}
