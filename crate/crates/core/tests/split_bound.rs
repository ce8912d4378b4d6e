use gazesal::data::{grouped_split_ids, DEFAULT_FRACTIONS};

/// Every multiset of patient-group sizes 1..=4 over 3..=12 patients.
fn compositions(patients: usize) -> Vec<Vec<usize>> {
    fn go(left: usize, min: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        for k in min..=4 {
            cur.push(k);
            go(left - 1, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(patients, 1, &mut Vec::new(), &mut out);
    out
}

#[test]
fn greedy_split_stays_within_largest_group_for_every_small_corpus() {
    let mut corpora = 0;
    for patients in 3..=12 {
        for sizes in compositions(patients) {
            let items: Vec<(String, String)> = sizes
                .iter()
                .enumerate()
                .flat_map(|(p, &k)| (0..k).map(move |j| (format!("i{p}_{j}"), format!("p{p}"))))
                .collect();
            let refs: Vec<(&str, &str)> = items.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
            let largest = *sizes.iter().max().unwrap() as f64;
            for seed in 0..3 {
                let plan = grouped_split_ids(&refs, DEFAULT_FRACTIONS, seed).unwrap();
                let mut total = 0;
                for (s, ids) in plan.lists().into_iter().enumerate() {
                    total += ids.len();
                    let target = DEFAULT_FRACTIONS[s] * items.len() as f64;
                    assert!((ids.len() as f64 - target).abs() <= largest, "{sizes:?} seed {seed} split {s}: {} vs {target}", ids.len());
                }
                assert_eq!(total, items.len());
            }
            corpora += 1;
        }
    }
    assert_eq!(corpora, (3..=12).map(|n| (n + 1) * (n + 2) * (n + 3) / 6).sum::<usize>());
}
