use proptest::prelude::*;

use super::*;
use crate::data::{synth_dataset, SynthSpec};
use crate::losses::ClassWeight;
use crate::nn::{OpKind, Relaxation};

fn tiny_config() -> SupernetConfig {
    SupernetConfig {
        num_cells: 1,
        nodes_per_cell: 2,
        init_channels: 4,
        input_channels: 3,
        input_side: 8,
        embed_dim: 8,
        stem_multiplier: 1,
        ops: OpKind::ALL.to_vec(),
    }
}

fn genotype() -> Genotype {
    let cell = vec![
        (0, 2, OpKind::SepConv3x3),
        (1, 2, OpKind::SkipConnect),
        (0, 3, OpKind::AvgPool3x3),
        (2, 3, OpKind::DilConv3x3),
    ];
    Genotype {
        relaxation: Relaxation::Sigmoid,
        threshold: Some(0.75),
        normal: cell.clone(),
        reduce: cell,
    }
}

fn data(counts: Vec<usize>, seed: u64) -> Dataset {
    synth_dataset(&SynthSpec {
        counts,
        side: 8,
        channels: 3,
        seed,
    })
}

fn headed(classes: usize, seed: u64) -> Network<f32> {
    let mut net = Network::from_genotype(&tiny_config(), &genotype(), seed).unwrap();
    net.attach_head(classes).unwrap();
    net
}

fn quick(mode: LossMode) -> FinetuneConfig {
    FinetuneConfig {
        epochs: 3,
        batch_size: 8,
        loss_mode: mode,
        lr0: 0.05,
        seed: 5,
        ..FinetuneConfig::default()
    }
}

#[test]
fn loss_modes_round_trip_through_names() {
    for mode in LossMode::ALL {
        assert_eq!(mode.name().parse::<LossMode>().unwrap(), mode);
        let json = serde_json::to_string(&mode).unwrap();
        assert_eq!(json, format!("\"{}\"", mode.name()));
    }
    assert!("CE+FL".parse::<LossMode>().is_err());
    assert_eq!(serde_json::from_str::<FinetuneConfig>("{}").unwrap(), FinetuneConfig::default());
}

#[test]
fn perfect_and_constant_predictors() {
    let truth: Vec<usize> = (0..40).map(|i| i % 4).collect();
    let m = Metrics::from_predictions(&truth, &truth, 4, 7).unwrap();
    assert_eq!(m.top1_error, 0.0);
    assert_eq!(m.per_class_recall, vec![1.0; 4]);
    assert_eq!(m.param_count, 7);

    let constant = vec![2; 40];
    let m = Metrics::from_predictions(&constant, &truth, 4, 0).unwrap();
    assert_eq!(m.accuracy, 25.0);
    assert_eq!(m.accuracy, 100.0 - m.top1_error);
    assert_eq!(m.per_class_recall, vec![0.0, 0.0, 1.0, 0.0]);

    assert!(matches!(Metrics::from_predictions(&[4], &[0], 4, 0), Err(Error::Data(_))));
    assert!(Metrics::from_predictions(&[], &[], 4, 0).is_err());
}

proptest! {
    #[test]
    fn confusion_rows_count_each_class(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..200),
    ) {
        let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = Metrics::from_predictions(&pred, &truth, 5, 0).unwrap();
        for c in 0..5 {
            let n = truth.iter().filter(|&&t| t == c).count();
            prop_assert_eq!(m.confusion[c].iter().sum::<usize>(), n);
        }
        let hits = pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
        prop_assert!((m.accuracy - 100.0 * hits as f64 / truth.len() as f64).abs() < 1e-12);
        prop_assert!((m.accuracy + m.top1_error - 100.0).abs() < 1e-12);
    }
}

#[test]
fn confusion_csv_layout() {
    let m = Metrics::from_predictions(&[0, 1, 1], &[0, 0, 1], 2, 0).unwrap();
    let mut buf = Vec::new();
    m.write_confusion_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "true\\predicted,0,1\n0,1,1\n1,0,1\n");
}

#[test]
fn neutral_losses_give_bitwise_cross_entropy_gradients() {
    let train = data(vec![6, 3, 2], 1);
    let net = headed(3, 2).cast::<f64>();
    let images = train.image_batch::<f64>(&[0, 2, 4, 6, 8, 10]);
    let labels: Vec<usize> = [0, 2, 4, 6, 8, 10].iter().map(|&i| train.labels()[i]).collect();
    let neutral = ImbalancePriors::from_counts(&train.class_counts(), 0.0).unwrap();
    let flat = FocalParams {
        gamma: 0.0,
        alpha_t: ClassWeight::Uniform(1.0),
    };
    let ce = step_gradients(&net, images.clone(), &labels, LossMode::Ce, &neutral, &flat).unwrap();
    for mode in [LossMode::CeLa, LossMode::Fl, LossMode::FlLa] {
        let other = step_gradients(&net, images.clone(), &labels, mode, &neutral, &flat).unwrap();
        assert_eq!(other.loss.to_bits(), ce.loss.to_bits(), "{mode}");
        for ((ia, ga), (ib, gb)) in ce.grads.iter().zip(&other.grads) {
            assert_eq!(ia, ib);
            let same = ga.data().iter().zip(gb.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "{mode}: {}", net.params().name(*ia));
        }
    }
    // With the paper's γ and τ the surfaces differ.
    let priors = ImbalancePriors::from_counts(&train.class_counts(), 1.0).unwrap();
    let fl = step_gradients(&net, images, &labels, LossMode::FlLa, &priors, &FocalParams::default()).unwrap();
    assert_ne!(fl.grads[0].1, ce.grads[0].1);
}

/// Multinomial logistic regression on raw pixels, full-batch gradient
/// descent. Training accuracy in percent.
fn logistic_fit_accuracy(ds: &Dataset) -> f64 {
    let (c, h, w) = ds.image_shape();
    let d = c * h * w;
    let l = ds.class_count();
    let x = ds.images().data();
    let y = ds.labels();
    let n = y.len();
    let mut wts = vec![0.0f64; l * (d + 1)];
    for _ in 0..300 {
        let mut grad = vec![0.0f64; wts.len()];
        for i in 0..n {
            let xi = &x[i * d..(i + 1) * d];
            let mut z: Vec<f64> = (0..l)
                .map(|k| wts[k * (d + 1) + d] + xi.iter().zip(&wts[k * (d + 1)..]).map(|(&a, b)| a as f64 * b).sum::<f64>())
                .collect();
            let max = z.iter().cloned().fold(f64::MIN, f64::max);
            let s: f64 = z.iter_mut().map(|v| { *v = (*v - max).exp(); *v }).sum();
            for k in 0..l {
                let r = z[k] / s - if k == y[i] { 1.0 } else { 0.0 };
                for j in 0..d {
                    grad[k * (d + 1) + j] += r * xi[j] as f64;
                }
                grad[k * (d + 1) + d] += r;
            }
        }
        for (wv, g) in wts.iter_mut().zip(&grad) {
            *wv -= 0.5 * g / n as f64;
        }
    }
    let mut correct = 0;
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        let score = |k: usize| wts[k * (d + 1) + d] + xi.iter().zip(&wts[k * (d + 1)..]).map(|(&a, b)| a as f64 * b).sum::<f64>();
        let best = (0..l).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap();
        correct += (best == y[i]) as usize;
    }
    100.0 * correct as f64 / n as f64
}

#[test]
fn cross_entropy_learns_the_balanced_synthetic_set() {
    let train = data(vec![24; 4], 3);
    assert!(logistic_fit_accuracy(&train) > 90.0, "oracle fit failed");
    let config = FinetuneConfig {
        epochs: 15,
        ..quick(LossMode::Ce)
    };
    let (net, history) = finetune(headed(4, 1), &train, &config).unwrap();
    let last = history.epochs.last().unwrap();
    assert!(last.train_accuracy > 90.0, "{:?}", history.epochs);
    assert!(evaluate(&net, &train).unwrap().accuracy > 90.0);
}

#[test]
fn finetune_is_deterministic_and_modes_share_the_data_stream() {
    let train = data(vec![12, 6, 3], 4);
    let (a, ha) = finetune(headed(3, 1), &train, &quick(LossMode::FlLa)).unwrap();
    let (b, hb) = finetune(headed(3, 1), &train, &quick(LossMode::FlLa)).unwrap();
    assert_eq!(a.params().checksum(), b.params().checksum());
    assert_eq!(ha.data_checksum, hb.data_checksum);
    let losses = |h: &FinetuneHistory| h.epochs.iter().map(|e| e.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&ha), losses(&hb));
    let (c, hc) = finetune(headed(3, 1), &train, &quick(LossMode::Ce)).unwrap();
    assert_eq!(hc.data_checksum, ha.data_checksum);
    assert_ne!(c.params().checksum(), a.params().checksum());
}

#[test]
fn early_stopping_respects_patience_and_the_epoch_cap() {
    let train = data(vec![8, 8], 5);
    let stalled = FinetuneConfig {
        epochs: 10,
        patience: 2,
        min_delta: 1e3,
        ..quick(LossMode::Ce)
    };
    let (_, h) = finetune(headed(2, 0), &train, &stalled).unwrap();
    // Epoch 0 sets the best loss; epochs 1 and 2 fail to beat it by 1e3.
    assert_eq!(h.epochs.len(), 3);
    assert!(h.stopped_early);
    let capped = FinetuneConfig {
        epochs: 2,
        ..quick(LossMode::Ce)
    };
    let (_, h) = finetune(headed(2, 0), &train, &capped).unwrap();
    assert_eq!(h.epochs.len(), 2);
    assert!(!h.stopped_early);
}

#[test]
fn finetune_rejects_missing_heads_and_empty_classes() {
    let train = data(vec![4, 0, 4], 6);
    let net = Network::<f32>::from_genotype(&tiny_config(), &genotype(), 0).unwrap();
    assert!(matches!(finetune(net, &train, &quick(LossMode::Ce)), Err(Error::Structural(_))));
    assert!(matches!(
        finetune(headed(3, 0), &train, &quick(LossMode::Ce)),
        Err(Error::InvalidPrior(_))
    ));
    assert!(matches!(
        finetune(headed(2, 0), &train, &quick(LossMode::Ce)),
        Err(Error::Structural(_))
    ));
}

#[test]
fn fine_tuning_resets_running_statistics() {
    let train = data(vec![8, 8], 7);
    let mut net = headed(2, 0);
    let rv = net.params().id("stem.bn.running_var").unwrap();
    for v in net.params_mut().get_mut(rv).data_mut() {
        *v = 1e6;
    }
    let (tuned, _) = finetune(net, &train, &quick(LossMode::Ce)).unwrap();
    assert!(tuned.params().get(rv).data().iter().all(|&v| v < 10.0));
}

#[test]
fn evaluation_is_pure_and_checks_class_range() {
    let test = data(vec![5, 5, 5], 8);
    let net = headed(3, 0);
    let a = evaluate(&net, &test).unwrap();
    assert_eq!(a, evaluate(&net, &test).unwrap());
    assert_eq!(a.confusion.iter().map(|r| r.iter().sum::<usize>()).collect::<Vec<_>>(), vec![5, 5, 5]);
    assert_eq!(a.param_count, net.count_parameters());
    assert!(matches!(evaluate(&headed(2, 0), &test), Err(Error::Data(_))));
}

#[test]
fn transfer_reshapes_the_head_and_adapts_inputs() {
    let source = headed(3, 0);
    let gray = synth_dataset(&SynthSpec {
        counts: vec![12, 3],
        side: 16,
        channels: 1,
        seed: 9,
    });
    let test = synth_dataset(&SynthSpec {
        counts: vec![5, 5],
        side: 16,
        channels: 1,
        seed: 10,
    });
    let out = transfer(&tiny_config(), &genotype(), source.params(), &gray, &test, &quick(LossMode::FlLa)).unwrap();
    assert_eq!(out.network.num_classes(), Some(2));
    let head = out.network.params().id("head.weight").unwrap();
    assert_eq!(out.network.params().get(head).shape(), &[2, 8]);
    assert_eq!(out.metrics.per_class_recall.len(), 2);
    assert!(out.metrics.is_finite());

    // Trunk weights come from the source, not from the seed.
    let fresh = prepare_network(&tiny_config(), &genotype(), source.params(), 2, 99).unwrap();
    let stem = fresh.params().id("stem.conv.weight").unwrap();
    assert_eq!(fresh.params().get(stem), source.params().by_name("stem.conv.weight").unwrap());
}

#[test]
fn restore_brings_the_head_back() {
    let net = headed(3, 4);
    let back = restore_network(&tiny_config(), &genotype(), net.params()).unwrap();
    assert_eq!(back.num_classes(), Some(3));
    assert_eq!(back.params().checksum(), net.params().checksum());
    let x = Tensor::from_vec(&[2, 3, 8, 8], (0..384).map(|i| (i % 17) as f32 / 17.0).collect());
    assert_eq!(back.predict(&x).unwrap(), net.predict(&x).unwrap());
}

#[test]
fn ablation_table_keeps_failed_cells() {
    let train = data(vec![10, 5, 3], 11);
    let test = data(vec![4, 4, 4], 12);
    let weights = Network::<f32>::from_genotype(&tiny_config(), &genotype(), 0).unwrap();
    let base = FinetuneConfig {
        epochs: 1,
        // One weight for three classes: only the focal rows reject it.
        focal: FocalParams {
            gamma: 2.0,
            alpha_t: ClassWeight::PerClass(vec![1.0]),
        },
        ..quick(LossMode::Ce)
    };
    let table = run_ablation(&tiny_config(), &genotype(), weights.params(), &train, &test, &base, &[0, 1]).unwrap();
    assert_eq!(table.rarest_class, 2);
    assert_eq!(table.rows.len(), 4);
    let ce = table.row(LossMode::Ce).unwrap();
    assert!(ce.runs.iter().all(|r| r.metrics.is_some()));
    assert_eq!(ce.runs[0].data_checksum, table.row(LossMode::CeLa).unwrap().runs[0].data_checksum);
    assert!(table.row(LossMode::Fl).unwrap().runs.iter().all(|r| r.error.is_some()));
    let md = table.to_markdown();
    let lines: Vec<&str> = md.lines().collect();
    assert_eq!(lines[0], "| Method | Error |");
    assert_eq!(lines.len(), 6);
    assert!(lines[2].starts_with("| CE | "));
    assert!(lines[3].starts_with("| CE + Logit adj. | "));
    assert_eq!(lines[4], "| FL | failed |");
    assert_eq!(lines[5], "| FL + Logit adj. | failed |");
}

#[test]
fn median_of_even_and_odd_counts() {
    assert_eq!(median(vec![]), None);
    assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
    assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
}
