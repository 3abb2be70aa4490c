//! Temporary tuning harness (run manually with --ignored --nocapture).

use molora::model::{content_accuracy, forced_routing_loss, BaseInit, Model, ModelConfig, PretrainSpec};
use molora::synth;
use molora::train::{stage1_specialize, stage2_route, TrainPlan};
use molora::analysis::{alignment_accuracy, confusion, trace_model, DominanceMode};
use molora::synth::TrainExample;
use std::time::Instant;

const VOCAB: usize = 33;

fn cfg() -> ModelConfig {
    ModelConfig {
        vocab_size: VOCAB,
        d: 32,
        n_layers: 2,
        n_heads: 4,
        max_seq: 32,
        move_rank: 8,
        move_alpha: 8.0,
        n_experts: 5,
        seed: 42,
        ..ModelConfig::default()
    }
}

#[test]
#[ignore]
fn pretrain_quality() {
    let t0 = Instant::now();
    let cfg = cfg();
    let spec = PretrainSpec { records: 2000, len_range: (4, 9), steps: 3000, batch_size: 8, lr: 3e-3, seed: 11 };
    let model = Model::build(&cfg, &BaseInit::Pretrained(spec)).unwrap();
    println!("pretrain took {:?}", t0.elapsed());
    // held-out neutral data
    let heldout = synth::neutral_examples(999, 200, VOCAB, (4, 9)).unwrap();
    let (acc, _) = content_accuracy(&model, &heldout).unwrap();
    println!("neutral held-out content accuracy: {acc:.4}");
}

#[test]
#[ignore]
fn two_stage_pipeline() {
    let t0 = Instant::now();
    let cfg = cfg();
    let spec = PretrainSpec { records: 2000, len_range: (4, 9), steps: 3000, batch_size: 8, lr: 3e-3, seed: 11 };
    let mut model = Model::build(&cfg, &BaseInit::Pretrained(spec)).unwrap();
    println!("pretrain: {:?}", t0.elapsed());

    let corpus = synth::generate_corpus(7, 2000, VOCAB, (4, 9)).unwrap();
    let (train, _dev, test) = synth::split(&corpus, (0.8, 0.1, 0.1), 5).unwrap();
    let train_ex = synth::encode_manifest(&train);
    let test_ex = synth::encode_manifest(&test);

    let t1 = Instant::now();
    let plan1 = TrainPlan { epochs: 16, batch_size: 4, lr: 3e-3, ..TrainPlan::stage1(21) };
    stage1_specialize(&mut model, &train_ex, &plan1).unwrap();
    println!("stage1: {:?}", t1.elapsed());

    // forced-routing loss matrix on held-out
    for m in 0..5 {
        let subset: Vec<&TrainExample> = test_ex.iter().filter(|e| e.manifold.map(|x| x.index()) == Some(m)).collect();
        let mut row = Vec::new();
        for e in 0..5 {
            row.push(forced_routing_loss(&model, &subset, e).unwrap());
        }
        let min_idx = row.iter().enumerate().min_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
        println!("manifold {m}: losses {row:?} min at {min_idx}");
    }

    let t2 = Instant::now();
    let plan2 = TrainPlan { epochs: 3, batch_size: 4, lr: 3e-3, ..TrainPlan::stage2(22) };
    stage2_route(&mut model, &train_ex, &plan2).unwrap();
    println!("stage2: {:?}", t2.elapsed());

    let traces = trace_model(&model, &test_ex).unwrap();
    let cm = confusion(&traces, DominanceMode::MeanWeight).unwrap();
    println!("confusion: {:?}", cm.counts);
    println!("alignment accuracy: {:.4}", alignment_accuracy(&cm).unwrap());
    let (acc, _) = content_accuracy(&model, &test_ex).unwrap();
    println!("expressive held-out content accuracy: {acc:.4}");
    println!("total: {:?}", t0.elapsed());
}

#[test]
#[ignore]
fn sweep_behaviour() {
    let cfg = ModelConfig { n_experts: 1, ..cfg() };
    let corpus = synth::generate_corpus(7, 2000, VOCAB, (4, 9)).unwrap();
    let (train, _dev, test) = synth::split(&corpus, (0.8, 0.1, 0.1), 5).unwrap();
    let test_ex = synth::encode_manifest(&test);

    let spec = PretrainSpec { records: 2000, len_range: (4, 9), steps: 3000, batch_size: 8, lr: 3e-3, seed: 11 };
    let t0 = Instant::now();
    let pretrained = Model::build(&cfg, &BaseInit::Pretrained(spec)).unwrap();
    println!("pretrain: {:?}", t0.elapsed());
    let random = Model::build(&cfg, &BaseInit::Random).unwrap();

    for init_name in ["pretrained", "random"] {
        for fraction in [0.01, 0.05, 0.25, 1.0] {
            let sub = synth::subset_by_scale(&train, fraction, 3).unwrap();
            let sub_ex = synth::encode_manifest(&sub);
            let mut m = if init_name == "pretrained" { pretrained.clone() } else { random.clone() };
            let t = Instant::now();
            molora::train::finetune_single(&mut m, &sub_ex, 1200, 4, 1e-3, 77).unwrap();
            let (acc, _) = content_accuracy(&m, &test_ex).unwrap();
            println!("{init_name} f={fraction}: acc={acc:.4} ({} records, {:?})", sub.records.len(), t.elapsed());
        }
    }
}

#[test]
#[ignore]
fn expert_capacity_probe() {
    let corpus = synth::generate_corpus(7, 2000, VOCAB, (4, 9)).unwrap();
    let (train, _dev, test) = synth::split(&corpus, (0.8, 0.1, 0.1), 5).unwrap();
    let train_ex = synth::encode_manifest(&train);
    let test_ex = synth::encode_manifest(&test);
    let sub_train: Vec<TrainExample> = train_ex.iter().filter(|e| e.manifold.map(|m| m.index()) == Some(0)).cloned().collect();
    let sub_test: Vec<&TrainExample> = test_ex.iter().filter(|e| e.manifold.map(|m| m.index()) == Some(0)).collect();

    for (rank, lr, epochs) in [(8usize, 1e-3, 4usize), (8, 3e-3, 16), (16, 3e-3, 16), (32, 3e-3, 16), (32, 1e-2, 16), (24, 1e-2, 24)] {
        let c = ModelConfig { move_rank: rank, move_alpha: rank as f64, ..cfg() };
        let spec = PretrainSpec { records: 2000, len_range: (4, 9), steps: 3000, batch_size: 8, lr: 3e-3, seed: 11 };
        let mut model = Model::build(&c, &BaseInit::Pretrained(spec)).unwrap();
        let t = Instant::now();
        let plan = TrainPlan { epochs, batch_size: 4, lr, ..TrainPlan::stage1(21) };
        // train only expert 0 by giving it just manifold-0 data: use finetune-style loop
        let log = molora::train::finetune_single(&mut model, &sub_train, epochs * sub_train.len() / 4, 4, lr, 99).unwrap();
        let _ = plan;
        let final_loss = log.last().unwrap().loss;
        let held = forced_routing_loss(&model, &sub_test, 0).unwrap();
        println!("r={rank} lr={lr} epochs={epochs}: final train loss {final_loss:.3}, held-out forced loss {held:.3} ({:?})", t.elapsed());
    }
}
