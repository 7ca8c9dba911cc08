use xil_core::data::{Split, SyntheticBiasSpec};
use xil_core::explain::{bla_attach, bla_deletion_effect, bla_finetune};
use xil_core::orchestrator::{train_baseline, DataSpec, SteeringConfig};
use xil_core::trainer::{TrainConfig, TrainItem, Trainable};

/// Dropping the selected locations should move predictions more than
/// dropping everything else.
#[test]
fn deleting_selected_locations_matters_more_on_average() {
    let mut cfg = SteeringConfig::default();
    cfg.train.epochs = 4;
    cfg.train.learning_rate = 1e-3;
    cfg.model.channels = [2, 4, 4, 4];
    let data = DataSpec::Synthetic(SyntheticBiasSpec::new(32, 30, 1.0, 4)).load().unwrap();
    let (model, _) = train_baseline(&cfg, &data).unwrap();

    let train: Vec<TrainItem> = data.split(Split::Train).into_iter().map(TrainItem::plain).collect();
    let tc = TrainConfig { epochs: 30, learning_rate: 1e-2, trainable: Trainable::Attention, ..TrainConfig::default() };
    let (model, _) = bla_finetune(bla_attach(model).unwrap(), &train, &tc).unwrap();

    let (mut inside, mut outside, mut n) = (0.0, 0.0, 0);
    for s in data.split(Split::Test) {
        let e = bla_deletion_effect(&model, &s.image).unwrap();
        if e.selected > 0 {
            inside += e.inside;
            outside += e.outside;
            n += 1;
        }
    }
    assert!(n > 0, "no test image selected any location");
    assert!(inside / n as f64 > outside / n as f64, "inside {inside} outside {outside} over {n}");
}
