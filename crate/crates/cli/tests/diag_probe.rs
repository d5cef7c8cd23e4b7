use axial_cli::config::RunConfig;
use axial_cli::pipeline::{member_train_config, network_spec};
use axial_core::aggregate::{score_study, Ensemble};
use axial_core::eval::roc;
use axial_core::net::train;
use axial_core::phantom::{generate_corpus, PhantomSpec};
use axial_core::taxonomy::{any_significant, significant_max, Taxonomy};

#[test]
#[ignore]
fn diag_learning_curve() {
    let tax = Taxonomy::desk_default();
    let cfg = RunConfig::default();
    let mut spec = PhantomSpec::desk_default(&tax).with_seed(900);
    spec.oversample_positive = Some(0.75);
    // significant traits strong and common, lower tier sparse and mild
    for t in tax.traits() {
        if t.significant {
            spec.trait_probs[t.id] = 0.22;
            spec.severity_range[t.id] = (0.75, 1.0);
        } else {
            spec.trait_probs[t.id] = 0.04;
            spec.severity_range[t.id] = (0.4, 1.0);
        }
    }
    spec.cooccurrence.clear();
    let (studies, _) = generate_corpus(&spec, &tax, 660).unwrap();
    let (train_s, rest) = studies.split_at(500);
    let (val_s, test_s) = rest.split_at(60);

    let mut tc = member_train_config(&cfg, 0);
    tc.epochs = 14;
    tc.patience = 14;
    let nspec = network_spec(&cfg, &tax);
    let t0 = std::time::Instant::now();
    let out = train(&nspec, &tc, &tax, train_s, val_s, None, |_, log| {
        println!(
            "epoch {:>2} lr {:.5} train {:.4} val {:.4} val_auc {:?} [{:.0}s]",
            log.epoch,
            log.lr,
            log.train_loss,
            log.val_loss,
            log.val_auc_significant,
            t0.elapsed().as_secs_f64()
        );
    })
    .unwrap();
    println!("best epoch {}", out.best.epoch);

    let ens = Ensemble::from_checkpoints(&nspec, &[out.best], tax.digest()).unwrap();
    let per_slice: Vec<Vec<_>> = test_s
        .iter()
        .map(|s| score_study(&ens, &s.volume).unwrap().0)
        .collect();
    let scored: Vec<_> = test_s
        .iter()
        .map(|s| score_study(&ens, &s.volume).unwrap().1)
        .collect();

    // mean predicted probability for lesion vs clean slices, per trait
    let ich = tax.by_name("intracranial_hemorrhage").unwrap().id;
    let n = test_s[0].volume.slices.len();
    let central = n / 4..n - n / 4;
    let mut buckets: [Vec<f32>; 4] = Default::default(); // [pos, neg-central, neg-edge, all]
    for (si, s) in test_s.iter().enumerate() {
        for z in 0..n {
            let p = per_slice[si][z].get(ich);
            buckets[3].push(p);
            if s.slice_labels[z].get(ich) != 0.0 {
                buckets[0].push(p);
            } else if central.contains(&z) {
                buckets[1].push(p);
            } else {
                buckets[2].push(p);
            }
        }
    }
    let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len().max(1) as f32;
    println!(
        "ICH score means: lesion-slices {:.4} ({}), clean-central {:.4} ({}), clean-edge {:.4} ({})",
        mean(&buckets[0]),
        buckets[0].len(),
        mean(&buckets[1]),
        buckets[1].len(),
        mean(&buckets[2]),
        buckets[2].len(),
    );

    for t in tax.traits() {
        let scores: Vec<f64> = scored.iter().map(|s| s.get(t.id) as f64).collect();
        let labels: Vec<bool> = test_s
            .iter()
            .map(|s| s.study_labels.get(t.id) != 0.0)
            .collect();
        let n_pos = labels.iter().filter(|&&l| l).count();
        let mut ss = Vec::new();
        let mut sl = Vec::new();
        for (si, s) in test_s.iter().enumerate() {
            for (z, sc) in per_slice[si].iter().enumerate() {
                ss.push(sc.get(t.id) as f64);
                sl.push(s.slice_labels[z].get(t.id) != 0.0);
            }
        }
        let slice_auc = roc(&ss, &sl).map(|c| c.auc).unwrap_or(f64::NAN);
        match roc(&scores, &labels) {
            Ok(c) => println!(
                "{:<26} study-AUC {:.3}  slice-AUC {:.3} (pos {n_pos})",
                t.name, c.auc, slice_auc
            ),
            Err(_) => println!("{:<26} single-class (pos {n_pos})", t.name),
        }
    }
    let comp: Vec<f64> = scored
        .iter()
        .map(|s| significant_max(s, &tax) as f64)
        .collect();
    let lab: Vec<bool> = test_s
        .iter()
        .map(|s| any_significant(&s.study_labels, &tax))
        .collect();
    println!("COMPOSITE study-AUC {:.3}", roc(&comp, &lab).unwrap().auc);
}
