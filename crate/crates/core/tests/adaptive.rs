use ckd_core::adaptive::{
    accumulate_gradients, active_parameters, depth_selection, estimate_importance, evaluate_terms,
    rewire, subnet_forward, train_adaptive_width, width_depth_terms, width_terms, AdaptiveConfig,
    AdaptiveObjective, ImportanceScores, SubnetSpec,
};
use ckd_core::distill::{align_layers, logit_kd_loss};
use ckd_core::gradcheck::{gradcheck_params, DEFAULT_EPS};
use ckd_core::model::{encoder_forward, Example, ModelConfig, ParamSet, TokenSequence};
use ckd_core::optim::OptimConfig;
use ckd_core::Error;
use ndarray::s;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(layers: usize, d: usize, heads: usize, ffn: usize) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        hidden_dim: d,
        num_heads: heads,
        ffn_dim: ffn,
        vocab_size: 10,
        max_seq_len: 8,
        num_classes: 2,
        dropout: 0.0,
    }
}

fn model(c: &ModelConfig, seed: u64) -> ParamSet {
    ParamSet::init(c, 0.5, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn dataset(count: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.random_range(3..=6);
            let mut ids = vec![1];
            ids.extend((1..n).map(|_| rng.random_range(2..10)));
            let label = usize::from(ids.iter().filter(|&&t| t >= 6).count() % 2 == 1);
            let mut mask = vec![true; n];
            ids.resize(6, 0);
            mask.resize(6, false);
            Example {
                tokens: TokenSequence::new(ids, mask).unwrap(),
                label,
            }
        })
        .collect()
}

fn dev_loss(p: &ParamSet, data: &[Example]) -> f64 {
    data.iter()
        .map(|ex| {
            let z = encoder_forward(&ex.tokens, p).unwrap().logits;
            logit_kd_loss(&z, &z, ex.label, 0.0, 1.0).unwrap().loss
        })
        .sum()
}

fn kill_head(p: &mut ParamSet, layer: usize, head: usize) {
    let dk = p.config.head_dim();
    p.layers[layer]
        .wo
        .slice_mut(s![.., head * dk..(head + 1) * dk])
        .fill(0.0);
}

#[test]
fn dead_head_has_zero_importance() {
    let c = config(2, 8, 2, 16);
    let mut p = model(&c, 1);
    kill_head(&mut p, 1, 0);
    let scores = estimate_importance(&p, &dataset(12, 2), 4).unwrap();
    assert_eq!(scores.heads[1][0], 0.0);
    assert!(scores.heads[1][1] > 0.0);
    assert!(scores.heads.iter().flatten().chain(scores.neurons.iter().flatten()).all(|s| *s >= 0.0));
}

#[test]
fn duplicated_heads_score_equally() {
    let c = config(1, 8, 2, 16);
    let mut p = model(&c, 3);
    let l = &mut p.layers[0];
    for m in [&mut l.wq, &mut l.wk, &mut l.wv] {
        let top = m.slice(s![0..4, ..]).to_owned();
        m.slice_mut(s![4..8, ..]).assign(&top);
    }
    for b in [&mut l.bq, &mut l.bk, &mut l.bv] {
        let top = b.slice(s![0..4]).to_owned();
        b.slice_mut(s![4..8]).assign(&top);
    }
    let left = l.wo.slice(s![.., 0..4]).to_owned();
    l.wo.slice_mut(s![.., 4..8]).assign(&left);
    let scores = estimate_importance(&p, &dataset(10, 4), 5).unwrap();
    assert!((scores.heads[0][0] - scores.heads[0][1]).abs() < 1e-9, "{:?}", scores.heads);
}

#[test]
fn importance_ranking_matches_leave_one_out() {
    let c = config(1, 8, 2, 16);
    let data = dataset(16, 5);
    for seed in 0..4 {
        let mut p = model(&c, 10 + seed);
        // make the heads clearly unequal
        let weak = (seed % 2) as usize;
        p.layers[0]
            .wo
            .slice_mut(s![.., weak * 4..weak * 4 + 4])
            .mapv_inplace(|x| x * 0.05);
        let scores = estimate_importance(&p, &data, data.len()).unwrap();
        let base = dev_loss(&p, &data);
        let loo: Vec<f64> = (0..2)
            .map(|h| {
                let mut q = p.clone();
                kill_head(&mut q, 0, h);
                (dev_loss(&q, &data) - base).abs()
            })
            .collect();
        let taylor = &scores.heads[0];
        assert_eq!(taylor[0] > taylor[1], loo[0] > loo[1], "{taylor:?} vs {loo:?}");
        assert!(taylor[weak] < taylor[1 - weak]);
    }
}

fn random_scores(c: &ModelConfig, seed: u64) -> ImportanceScores {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImportanceScores {
        heads: (0..c.num_layers).map(|_| (0..c.num_heads).map(|_| rng.random()).collect()).collect(),
        neurons: (0..c.num_layers).map(|_| (0..c.ffn_dim).map(|_| rng.random()).collect()).collect(),
    }
}

#[test]
fn rewire_preserves_full_network_logits() {
    let c = config(2, 16, 4, 24);
    let p = model(&c, 6);
    let r = rewire(&p, &random_scores(&c, 7)).unwrap();
    assert_ne!(r, p);
    for ex in dataset(20, 8) {
        let a = encoder_forward(&ex.tokens, &p).unwrap().logits;
        let b = encoder_forward(&ex.tokens, &r).unwrap().logits;
        let diff = (&a - &b).mapv(f64::abs).fold(0.0, |m: f64, &x| m.max(x));
        assert!(diff < 1e-9, "{diff}");
    }
}

#[test]
fn sorted_scores_leave_model_bit_identical() {
    let c = config(2, 8, 2, 6);
    let p = model(&c, 9);
    let sorted = ImportanceScores {
        heads: vec![vec![2.0, 1.0]; 2],
        neurons: vec![vec![6.0, 5.0, 5.0, 3.0, 1.0, 0.0]; 2],
    };
    assert_eq!(rewire(&p, &sorted).unwrap(), p);
}

#[test]
fn half_width_after_rewire_keeps_top_heads() {
    let c = config(2, 16, 4, 8);
    let p = model(&c, 11);
    let scores = random_scores(&c, 12);
    let r = rewire(&p, &scores).unwrap();
    let dk = c.head_dim();
    for l in 0..2 {
        let mut top: Vec<usize> = (0..4).collect();
        top.sort_by(|&a, &b| scores.heads[l][b].partial_cmp(&scores.heads[l][a]).unwrap());
        let mut kept: Vec<usize> = top[..2].to_vec();
        kept.sort();
        // retained rewired heads, matched back to original heads by their wq rows
        let mut found: Vec<usize> = (0..2)
            .map(|p_idx| {
                let rows = r.layers[l].wq.slice(s![p_idx * dk..(p_idx + 1) * dk, ..]);
                (0..4)
                    .find(|&o| p.layers[l].wq.slice(s![o * dk..(o + 1) * dk, ..]) == rows)
                    .unwrap()
            })
            .collect();
        found.sort();
        assert_eq!(found, kept);
    }
}

#[test]
fn full_subnet_is_bit_identical_to_encoder() {
    let c = config(3, 8, 2, 16);
    let p = model(&c, 13);
    for ex in dataset(5, 14) {
        let a = encoder_forward(&ex.tokens, &p).unwrap();
        let b = subnet_forward(&p, SubnetSpec::full(), &ex.tokens).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.reps, b.reps);
    }
}

#[test]
fn dropping_zero_heads_and_neurons_keeps_logits() {
    let c = config(2, 16, 4, 8);
    let mut p = model(&c, 15);
    for l in 0..2 {
        for h in 2..4 {
            kill_head(&mut p, l, h);
        }
        p.layers[l].w2.slice_mut(s![.., 4..]).fill(0.0);
    }
    let half = SubnetSpec::new(0.5, 1.0).unwrap();
    for ex in dataset(6, 16) {
        let a = encoder_forward(&ex.tokens, &p).unwrap().logits;
        let b = subnet_forward(&p, half, &ex.tokens).unwrap().logits;
        assert!((&a - &b).mapv(f64::abs).sum() < 1e-12);
    }
}

#[test]
fn half_depth_selects_aligned_layers() {
    let c = config(4, 8, 2, 8);
    let s = SubnetSpec::new(1.0, 0.5).unwrap().structure(&c).unwrap();
    let kept: Vec<usize> = s.layers.iter().map(|w| w.index + 1).collect();
    let aligned: Vec<usize> = align_layers(4, 2).unwrap().teacher_indices().skip(1).collect();
    assert_eq!(kept, aligned);
    assert_eq!(depth_selection(4, 2).unwrap(), kept);
    let p = model(&c, 17);
    let states = subnet_forward(&p, SubnetSpec::new(1.0, 0.5).unwrap(), &dataset(1, 1)[0].tokens).unwrap();
    assert_eq!(states.depth(), 2);
}

#[test]
fn narrower_subnets_use_nested_parameters() {
    let c = config(4, 16, 4, 32);
    let sets: Vec<_> = [0.25, 0.5, 0.75, 1.0]
        .iter()
        .map(|&w| active_parameters(&c, &SubnetSpec::new(w, 1.0).unwrap().structure(&c).unwrap()))
        .collect();
    for w in sets.windows(2) {
        assert!(w[0].is_subset(&w[1]) && w[0].len() < w[1].len());
    }
    let p = model(&c, 1);
    assert_eq!(sets[3].len(), p.num_params());
    let shallow = active_parameters(&c, &SubnetSpec::new(0.5, 0.5).unwrap().structure(&c).unwrap());
    assert!(shallow.is_subset(&sets[1]) && shallow.len() < sets[1].len());
}

fn quiet_config() -> AdaptiveConfig {
    let mut cfg = AdaptiveConfig::default();
    cfg.distill.delta = 2;
    cfg
}

#[test]
fn self_distillation_at_full_width_has_zero_ckd_terms() {
    let c = config(2, 8, 2, 16);
    let p = model(&c, 18);
    let data = dataset(6, 19);
    let terms = width_terms(&c, &c, &[1.0]).unwrap();
    let cfg = quiet_config();
    let losses = evaluate_terms(&p, &p, &terms, &data, &cfg).unwrap();
    let b = losses[0];
    assert_eq!((b.wr_pair, b.wr_triple, b.ltr_pair, b.ltr_triple), (0.0, 0.0, 0.0, 0.0));
    let floor: f64 = data
        .iter()
        .map(|ex| {
            let z = encoder_forward(&ex.tokens, &p).unwrap().logits;
            logit_kd_loss(&z, &z, ex.label, 1.0, cfg.distill.temperature).unwrap().loss
        })
        .sum::<f64>()
        / data.len() as f64;
    assert!((b.total - floor).abs() < 1e-12);
}

fn assert_sum_of_terms(total: &ParamSet, parts: &[ParamSet]) {
    let mut sum = ParamSet::zeros(&total.config);
    for p in parts {
        sum.add_scaled(p, 1.0);
    }
    let mut diff = total.clone();
    diff.add_scaled(&sum, -1.0);
    assert!(diff.max_abs() <= 1e-10, "{}", diff.max_abs());
}

#[test]
fn width_gradients_accumulate_term_by_term() {
    let tc = config(2, 16, 2, 32);
    let sc = config(2, 16, 4, 32);
    let (t, s) = (model(&tc, 20), model(&sc, 21));
    let batch = dataset(3, 22);
    let cfg = quiet_config();
    let both = accumulate_gradients(&t, &s, &width_terms(&tc, &sc, &[1.0, 0.5]).unwrap(), &batch, &cfg).unwrap();
    let singles: Vec<ParamSet> = [1.0, 0.5]
        .iter()
        .map(|&w| {
            accumulate_gradients(&t, &s, &width_terms(&tc, &sc, &[w]).unwrap(), &batch, &cfg)
                .unwrap()
                .total
        })
        .collect();
    assert_sum_of_terms(&both.total, &singles);
    assert!(singles[1].max_abs() > 0.0);
}

#[test]
fn width_depth_grid_has_four_terms_that_sum() {
    let c = config(4, 8, 2, 16);
    let (tw, s) = (model(&c, 23), model(&c, 24));
    let batch = dataset(2, 25);
    let cfg = quiet_config();
    let terms = width_depth_terms(&c, &[1.0, 0.5], &[1.0, 0.5]).unwrap();
    assert_eq!(terms.len(), 4);
    let all = accumulate_gradients(&tw, &s, &terms, &batch, &cfg).unwrap();
    let singles: Vec<ParamSet> = terms
        .iter()
        .map(|t| accumulate_gradients(&tw, &s, std::slice::from_ref(t), &batch, &cfg).unwrap().total)
        .collect();
    assert_sum_of_terms(&all.total, &singles);
    assert_eq!(terms[1].alignment.pairs, vec![(0, 0), (1, 2), (2, 4)]);
}

#[test]
fn unit_depth_list_reduces_to_width_terms() {
    let c = config(3, 8, 2, 16);
    let p = model(&c, 26);
    let terms = width_depth_terms(&c, &[1.0, 0.5], &[1.0]).unwrap();
    for t in &terms {
        assert_eq!(t.alignment, align_layers(3, 3).unwrap());
        assert_eq!(t.teacher, t.student);
    }
    let losses = evaluate_terms(&p, &p, &terms, &dataset(4, 27), &quiet_config()).unwrap();
    assert_eq!(losses[0].wr_pair + losses[0].ltr_pair + losses[0].wr_triple, 0.0);
}

#[test]
fn empty_lists_and_sets_are_usage_errors() {
    let c = config(1, 8, 2, 8);
    let p = model(&c, 1);
    assert!(matches!(width_terms(&c, &c, &[]), Err(Error::Usage(_))));
    assert!(matches!(estimate_importance(&p, &[], 4), Err(Error::Usage(_))));
    assert!(matches!(
        train_adaptive_width(&p, p.clone(), &[], &dataset(2, 1), &quiet_config()),
        Err(Error::Usage(_))
    ));
    let bad = ImportanceScores {
        heads: vec![vec![1.0]],
        neurons: vec![vec![1.0; 8]],
    };
    assert!(matches!(rewire(&p, &bad), Err(Error::Usage(_))));
}

#[test]
fn dynabert_objective_gradient_matches_finite_differences() {
    let c = config(2, 8, 2, 8);
    let (t, s) = (model(&c, 30), model(&c, 31));
    let batch = dataset(2, 32);
    let cfg = AdaptiveConfig {
        objective: AdaptiveObjective::Dynabert,
        ..quiet_config()
    };
    let terms = width_terms(&c, &c, &[0.5]).unwrap();
    let g = accumulate_gradients(&t, &s, &terms, &batch, &cfg).unwrap();
    let report = gradcheck_params(
        &s,
        |p| evaluate_terms(&t, p, &terms, &batch, &cfg).unwrap()[0].total,
        &g.total,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn short_width_training_lowers_every_width_loss() {
    let c = config(2, 16, 2, 32);
    let teacher = model(&c, 40);
    let student = model(&c, 41);
    let data = dataset(24, 42);
    let cfg = AdaptiveConfig {
        optim: OptimConfig {
            lr: 5e-3,
            ..Default::default()
        },
        steps: 40,
        batch_size: 6,
        seed: 3,
        ..quiet_config()
    };
    let terms = width_terms(&c, &c, &[1.0, 0.5]).unwrap();
    let before = evaluate_terms(&teacher, &student, &terms, &data, &cfg).unwrap();
    let run = train_adaptive_width(&teacher, student, &[1.0, 0.5], &data, &cfg).unwrap();
    let after = evaluate_terms(&teacher, &run.student, &terms, &data, &cfg).unwrap();
    for (b, a) in before.iter().zip(&after) {
        assert!(a.total < b.total, "{} !< {}", a.total, b.total);
    }
    assert_eq!(run.history.len(), 40);
    let again = train_adaptive_width(&teacher, model(&c, 41), &[1.0, 0.5], &data, &cfg).unwrap();
    assert_eq!(again.student, run.student);
}
