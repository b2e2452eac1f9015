use akv_core::attention::{attend, causal_attention, ROW_SUM_TOLERANCE};
use akv_core::matrix::{softmax_rows, DenseMatrix};
use akv_core::policy::{
    apply_policy, cache_memory_cost, feasible_set, retained_indices, update_cumulative_scores, Atom,
    CompressionPolicy, FeasibleSpec, PolicyContext, PolicyParams, RetainedSet,
};
use akv_core::profiler::{
    masked_cosine, recovery_ratio, row_masks, select_policy, tv_distance_row, ProfilerConfig,
    RowScope,
};
use akv_core::{AttentionMap, TokenAnnotation, TokenClass};
use proptest::prelude::*;

fn class_strategy() -> impl Strategy<Value = TokenClass> {
    prop_oneof![
        1 => Just(TokenClass::Special),
        2 => Just(TokenClass::Punctuation),
        7 => Just(TokenClass::Other),
    ]
}

fn annotations(classes: &[TokenClass]) -> Vec<TokenAnnotation> {
    classes
        .iter()
        .enumerate()
        .map(|(position, &class)| TokenAnnotation {
            position,
            token_id: position as u32,
            class,
        })
        .collect()
}

prop_compose! {
    fn ratio()(k in 1u32..=20) -> f64 { k as f64 / 20.0 }
}

prop_compose! {
    fn params()(r_l in ratio(), r_f in ratio()) -> PolicyParams {
        PolicyParams::new(r_l, r_f).unwrap()
    }
}

prop_compose! {
    fn context()(n in 1usize..40)
        (classes in prop::collection::vec(class_strategy(), n),
         scores in prop::collection::vec(0.0f64..3.0, n),
         prompt_len in 1..=n) -> PolicyContext {
        PolicyContext::new(annotations(&classes), prompt_len, scores).unwrap()
    }
}

fn atom_strategy() -> impl Strategy<Value = Atom> {
    prop_oneof![
        Just(Atom::Special),
        Just(Atom::Punct),
        Just(Atom::Local),
        Just(Atom::Frequent),
        Just(Atom::Full),
    ]
}

prop_compose! {
    fn policy()(atoms in prop::collection::btree_set(atom_strategy(), 1..4), p in params()) -> CompressionPolicy {
        if atoms.contains(&Atom::Full) {
            CompressionPolicy::full()
        } else {
            CompressionPolicy::new(atoms, p).unwrap()
        }
    }
}

prop_compose! {
    fn logits()(n in 1usize..16, d in 1usize..6)
        (q in prop::collection::vec(-4.0f64..4.0, n * d),
         k in prop::collection::vec(-4.0f64..4.0, n * d),
         v in prop::collection::vec(-4.0f64..4.0, n * d),
         n in Just(n), d in Just(d)) -> (DenseMatrix, DenseMatrix, DenseMatrix, usize) {
        (
            DenseMatrix::new(n, d, q).unwrap(),
            DenseMatrix::new(n, d, k).unwrap(),
            DenseMatrix::new(n, d, v).unwrap(),
            d,
        )
    }
}

prop_compose! {
    fn attention_map()((q, k, v, d) in logits(), sharp in 0.1f64..4.0) -> AttentionMap {
        let scaled = DenseMatrix::new(q.rows(), d, q.data().iter().map(|x| x * sharp).collect()).unwrap();
        causal_attention(&scaled, &k, &v, d).unwrap().0
    }
}

proptest! {
    #[test]
    fn attention_maps_are_causal_stochastic((q, k, v, d) in logits()) {
        let (a, out) = causal_attention(&q, &k, &v, d).unwrap();
        for i in 0..a.len() {
            let s: f64 = a.matrix().row(i).iter().sum();
            prop_assert!((s - 1.0).abs() <= ROW_SUM_TOLERANCE);
            for j in 0..a.len() {
                prop_assert!(a.get(i, j) >= 0.0);
                if j > i {
                    prop_assert_eq!(a.get(i, j), 0.0);
                }
            }
            // out = A·V
            for c in 0..d {
                let want: f64 = (0..=i).map(|j| a.get(i, j) * v.get(j, c)).sum();
                prop_assert!((out.get(i, c) - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn attend_matches_causal_row((q, k, v, d) in logits()) {
        let (a, out) = causal_attention(&q, &k, &v, d).unwrap();
        let i = a.len() - 1;
        let (row, o) = attend(q.row(i), &k, &v, d).unwrap();
        prop_assert_eq!(row.as_slice(), a.row(i));
        prop_assert_eq!(o.as_slice(), out.row(i));
    }

    #[test]
    fn softmax_shift_invariant(row in prop::collection::vec(-50.0f64..50.0, 1..20), shift in -500.0f64..500.0) {
        let m = DenseMatrix::new(1, row.len(), row.clone()).unwrap();
        let shifted = DenseMatrix::new(1, row.len(), row.iter().map(|x| x + shift).collect()).unwrap();
        let a = softmax_rows(&m, None).unwrap();
        let b = softmax_rows(&shifted, None).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn retained_sets_are_sorted_and_bounded(p in policy(), ctx in context()) {
        let r = retained_indices(&p, &ctx);
        prop_assert!(r.as_slice().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(r.iter().all(|i| i < ctx.current_len()));
        prop_assert!(r.is_subset(&retained_indices(&CompressionPolicy::full(), &ctx)));
    }

    #[test]
    fn union_is_setwise(a in policy(), b in policy(), ctx in context()) {
        let ra = retained_indices(&a, &ctx);
        // the union takes its ratios from the left operand, so compare under
        // a shared parameter set
        let b_same = CompressionPolicy::new(b.atoms(), a.params()).unwrap();
        let rb_same = retained_indices(&b_same, &ctx);
        let u = a.union(&b_same);
        prop_assert_eq!(retained_indices(&u, &ctx), ra.union(&rb_same));
        prop_assert_eq!(retained_indices(&b_same.union(&a), &ctx), retained_indices(&u, &ctx));
        prop_assert_eq!(retained_indices(&a.union(&a), &ctx), ra.clone());
        prop_assert!(cache_memory_cost(&u, &ctx) >= ra.len().max(rb_same.len()));
    }

    #[test]
    fn atom_budgets_exact(p in params(), ctx in context()) {
        let n = ctx.current_len();
        let f = retained_indices(&CompressionPolicy::atomic(Atom::Frequent, p), &ctx);
        prop_assert_eq!(f.len(), ((p.r_f * n as f64 - 1e-9).ceil() as usize).clamp(1, n));
        let l = retained_indices(&CompressionPolicy::atomic(Atom::Local, p), &ctx);
        let w = ((p.r_l * ctx.prompt_len() as f64 - 1e-9).ceil() as usize).max(1);
        prop_assert_eq!(l.len(), w.min(n));
        prop_assert_eq!(l.last(), Some(n - 1));
    }

    #[test]
    fn family_nested(p in params(), ctx in context(), drop in prop::option::of(prop_oneof![
        Just(Atom::Special), Just(Atom::Punct), Just(Atom::Frequent), Just(Atom::Local)])) {
        let spec = match drop {
            Some(a) => FeasibleSpec::dropping(a).unwrap(),
            None => FeasibleSpec::default(),
        };
        let fam = feasible_set(p, &spec);
        prop_assert!(fam.last().unwrap().is_full());
        let sets: Vec<_> = fam.iter().map(|q| retained_indices(q, &ctx)).collect();
        for w in sets.windows(2) {
            prop_assert!(w[0].is_subset(&w[1]));
        }
    }

    #[test]
    fn apply_then_expand(rows in 1usize..12, cols in 1usize..4, seed in any::<u64>()) {
        let data: Vec<f64> = (0..rows * cols).map(|i| ((seed ^ i as u64) % 97) as f64 - 48.0).collect();
        let k = DenseMatrix::new(rows, cols, data.clone()).unwrap();
        let v = DenseMatrix::new(rows, cols, data.iter().map(|x| x * 0.5).collect()).unwrap();
        let keep: RetainedSet = (0..rows).filter(|i| (seed >> (i % 64)) & 1 == 1).collect();
        let c = apply_policy(&k, &v, &keep).unwrap();
        for (r, &pos) in c.positions.iter().enumerate() {
            prop_assert_eq!(c.keys.row(r), k.row(pos));
            prop_assert_eq!(c.values.row(r), v.row(pos));
        }
        prop_assert_eq!(c.positions.as_slice(), keep.as_slice());
    }

    #[test]
    fn cumulative_update_conserves(ctx in context(), w in prop::collection::vec(0.01f64..1.0, 40)) {
        let n = ctx.current_len();
        let row: Vec<f64> = w[..n].iter().map(|x| x / w[..n].iter().sum::<f64>()).collect();
        let before: f64 = ctx.cumulative_scores().iter().sum();
        let next = update_cumulative_scores(
            &ctx,
            &row,
            &RetainedSet::all(n),
            TokenAnnotation { position: n, token_id: 1, class: TokenClass::Other },
        )
        .unwrap();
        let after: f64 = next.cumulative_scores().iter().sum();
        prop_assert!((after - before - 1.0).abs() < 1e-9);
        prop_assert_eq!(next.current_len(), n + 1);
        prop_assert_eq!(next.cumulative_scores()[n], 0.0);
    }

    #[test]
    fn tv_identity(p in prop::collection::vec(0.0f64..1.0, 1..30), keep_seed in any::<u64>()) {
        let total: f64 = p.iter().sum();
        prop_assume!(total > 0.0);
        let p: Vec<f64> = p.iter().map(|x| x / total).collect();
        let r: RetainedSet = (0..p.len()).filter(|i| (keep_seed >> (i % 64)) & 1 == 1).collect();
        let mass: f64 = r.iter().map(|j| p[j]).sum();
        prop_assert!((tv_distance_row(&p, &r) - (1.0 - mass)).abs() <= 1e-9);
    }

    #[test]
    fn recovery_monotone_in_superset(a in attention_map(), s1 in any::<u64>(), s2 in any::<u64>()) {
        let n = a.len();
        let small: RetainedSet = (0..n).filter(|i| (s1 >> (i % 64)) & 1 == 1).collect();
        let extra: RetainedSet = (0..n).filter(|i| (s2 >> (i % 64)) & 1 == 1).collect();
        let big = small.union(&extra);
        let (r_small, r_big) = (recovery_ratio(&a, &small), recovery_ratio(&a, &big));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&r_small));
        prop_assert!(r_big >= r_small - 1e-15);
        let masks = |r: &RetainedSet| (0..n).map(|i| (i, r.clone())).collect::<Vec<_>>();
        prop_assert!(masked_cosine(&a, &masks(&big)) >= masked_cosine(&a, &masks(&small)) - 1e-15);
        prop_assert_eq!(masked_cosine(&a, &masks(&RetainedSet::all(n))), 1.0);
    }

    #[test]
    fn fixed_scope_recovery_matches_ratio(a in attention_map(), classes in prop::collection::vec(class_strategy(), 16), p in policy()) {
        let n = a.len();
        let ctx = PolicyContext::new(annotations(&classes[..n]), n, a.column_sums()).unwrap();
        let masks = row_masks(&a, &p, &ctx, RowScope::FixedSet).unwrap();
        let r = retained_indices(&p, &ctx);
        let via_masks: f64 = masks.iter().map(|(i, m)| m.iter().filter(|j| j <= i).map(|j| a.get(*i, j)).sum::<f64>()).sum::<f64>() / n as f64;
        prop_assert!((via_masks - recovery_ratio(&a, &r)).abs() < 1e-12);
    }

    #[test]
    fn threshold_monotone(a in attention_map(), classes in prop::collection::vec(class_strategy(), 16), p in params(), t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
        let n = a.len();
        let ctx = PolicyContext::new(annotations(&classes[..n]), n, a.column_sums()).unwrap();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let fam = feasible_set(p, &FeasibleSpec::default());
        let at = |t| select_policy(&a, &ctx, &ProfilerConfig::with_threshold(t, p).unwrap()).unwrap();
        let (s_lo, s_hi) = (at(lo), at(hi));
        let idx = |q: &CompressionPolicy| fam.iter().position(|f| f == q).unwrap();
        prop_assert!(idx(&s_lo.policy) <= idx(&s_hi.policy));
        prop_assert!(s_lo.cost_tokens <= s_hi.cost_tokens);
        prop_assert!(s_hi.recovery >= hi);
    }

    #[test]
    fn policy_grammar_round_trips(p in policy()) {
        let s = p.to_string();
        let back: CompressionPolicy = s.parse().unwrap();
        prop_assert_eq!(back.to_string(), s);
        prop_assert_eq!(back.atoms().collect::<Vec<_>>(), p.atoms().collect::<Vec<_>>());
    }
}
