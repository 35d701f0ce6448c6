use proptest::prelude::*;
use qcn_core::numerics::Tensor;
use qcn_core::qcn::{
    build_input_capsules, build_query, distance_one_hot, extract_context_features, LinearMap,
    QcnParams, SentenceEmbedding,
};
use qcn_core::routing::{CapsuleLayerParams, QueryGuidedRouting};
use qcn_testkit::{self as oracle, Matrix};

fn sentence(rows: &Matrix, distance: usize) -> SentenceEmbedding {
    SentenceEmbedding {
        token_ids: (0..rows.len()).collect(),
        embeddings: Tensor::from_rows(rows).unwrap(),
        distance,
    }
}

fn linear(w: &Matrix, b: &[f64]) -> LinearMap {
    LinearMap {
        weight: Tensor::from_rows(w).unwrap(),
        bias: Some(Tensor::vector(b.to_vec()).unwrap()),
    }
}

struct Setup {
    d: usize,
    k: usize,
    m: usize,
    dc: usize,
    d_model: usize,
    gw: Matrix,
    gb: Vec<f64>,
    fw: Matrix,
    fb: Vec<f64>,
    route: Vec<Matrix>,
    pw: Matrix,
    pb: Vec<f64>,
    r: usize,
}

impl Setup {
    fn new(seed: u64, d: usize, k: usize, m: usize, dc: usize, d_model: usize) -> Self {
        let mut rng = oracle::rng(seed);
        Self {
            d,
            k,
            m,
            dc,
            d_model,
            gw: oracle::random_matrix(&mut rng, d, dc),
            gb: oracle::uniform(&mut rng, dc, -0.5, 0.5),
            fw: oracle::random_matrix(&mut rng, d + k, dc),
            fb: oracle::uniform(&mut rng, dc, -0.5, 0.5),
            route: (0..m)
                .map(|_| oracle::random_matrix(&mut rng, dc, dc))
                .collect(),
            pw: oracle::random_matrix(&mut rng, dc, d_model),
            pb: oracle::uniform(&mut rng, d_model, -0.5, 0.5),
            r: 3,
        }
    }

    fn params(&self) -> QcnParams {
        let data = self.route.iter().flatten().flatten().copied().collect();
        QcnParams {
            query_map: linear(&self.gw, &self.gb),
            capsule_map: linear(&self.fw, &self.fb),
            routing: CapsuleLayerParams::new(
                Tensor::new(vec![self.m, self.dc, self.dc], data).unwrap(),
                self.r,
            )
            .unwrap(),
            projection: linear(&self.pw, &self.pb),
            window: self.k,
        }
    }

    /// Loop-level composition of query, input capsules, routing and projection.
    fn oracle_features(&self, current: &Matrix, history: &[(Matrix, usize)]) -> Matrix {
        let mut sum = vec![0.0; self.d];
        for row in current {
            for (s, x) in sum.iter_mut().zip(row) {
                *s += x;
            }
        }
        let q = oracle::affine(&vec![sum], &self.gw, &self.gb).remove(0);
        let mut out = vec![vec![0.0; self.d_model]; self.k * self.m];
        for (rows, dist) in history {
            let x: Matrix = rows
                .iter()
                .map(|r| {
                    let mut r = r.clone();
                    r.extend((1..=self.k).map(|s| if s == *dist { 1.0 } else { 0.0 }));
                    r
                })
                .collect();
            let u = oracle::affine(&x, &self.fw, &self.fb);
            let it = oracle::route_query_guided(&u, &q, &self.route, self.r, false);
            let v = &it.last().unwrap().outputs;
            let proj = oracle::affine(v, &self.pw, &self.pb);
            for (j, row) in proj.into_iter().enumerate() {
                out[(dist - 1) * self.m + j] = row;
            }
        }
        out
    }
}

fn strategy() -> QueryGuidedRouting {
    QueryGuidedRouting {
        zero_guidance: false,
    }
}

#[test]
fn query_of_identity_map_is_embedding_sum() {
    let s = sentence(&vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0);
    assert_eq!(
        build_query(&s, &LinearMap::identity(2)).unwrap(),
        vec![1.0, 1.0]
    );
}

#[test]
fn query_rejects_history_or_empty_sentence() {
    let s = sentence(&vec![vec![1.0, 0.0]], 1);
    assert!(build_query(&s, &LinearMap::identity(2)).is_err());
    let empty = SentenceEmbedding {
        token_ids: vec![],
        embeddings: Tensor::zeros(&[0, 2]),
        distance: 0,
    };
    assert!(build_query(&empty, &LinearMap::identity(2)).is_err());
}

#[test]
fn one_hot_slots() {
    assert_eq!(distance_one_hot(1, 3).unwrap(), vec![1.0, 0.0, 0.0]);
    assert_eq!(distance_one_hot(3, 3).unwrap(), vec![0.0, 0.0, 1.0]);
    assert!(distance_one_hot(0, 3).is_err());
    assert!(distance_one_hot(4, 3).is_err());
}

#[test]
fn input_capsule_of_identity_map_appends_one_hot() {
    let s = sentence(&vec![vec![0.5, -0.5]], 2);
    let caps = build_input_capsules(&s, 2, &LinearMap::identity(4)).unwrap();
    assert_eq!(caps.capsules.to_rows(), vec![vec![0.5, -0.5, 0.0, 1.0]]);
    assert_eq!(caps.distance, 2);
    let far = sentence(&vec![vec![0.5, -0.5]], 3);
    assert!(build_input_capsules(&far, 2, &LinearMap::identity(4)).is_err());
}

#[test]
fn empty_history_gives_zero_features() {
    let st = Setup::new(1, 8, 3, 4, 8, 8);
    let cur = sentence(&oracle::random_matrix(&mut oracle::rng(2), 3, 8), 0);
    let (feats, traces) = extract_context_features(&cur, &[], &st.params(), &strategy()).unwrap();
    assert_eq!(feats.features.shape(), &[12, 8]);
    assert!(feats.features.data().iter().all(|&x| x == 0.0));
    assert!(traces.is_empty());
}

#[test]
fn missing_history_slots_stay_zero() {
    let st = Setup::new(3, 8, 3, 4, 8, 8);
    let mut rng = oracle::rng(4);
    let cur = oracle::random_matrix(&mut rng, 3, 8);
    let h1 = oracle::random_matrix(&mut rng, 2, 8);
    let (feats, traces) = extract_context_features(
        &sentence(&cur, 0),
        &[sentence(&h1, 1)],
        &st.params(),
        &strategy(),
    )
    .unwrap();
    let rows = feats.features.to_rows();
    assert_eq!(rows.len(), 12);
    assert!(rows[..4].iter().flatten().any(|&x| x != 0.0));
    assert!(rows[4..].iter().flatten().all(|&x| x == 0.0));
    assert_eq!(&feats.origin[..4], &[Some(1); 4]);
    assert!(feats.origin[4..].iter().all(Option::is_none));
    assert_eq!(traces.len(), 1);
}

#[test]
fn history_order_and_window_checked() {
    let st = Setup::new(5, 4, 2, 2, 4, 4);
    let mut rng = oracle::rng(6);
    let cur = sentence(&oracle::random_matrix(&mut rng, 2, 4), 0);
    let h = |k| sentence(&oracle::random_matrix(&mut oracle::rng(k as u64), 2, 4), k);
    let p = st.params();
    assert!(extract_context_features(&cur, &[h(2), h(1)], &p, &strategy()).is_err());
    assert!(extract_context_features(&cur, &[h(1), h(2), h(3)], &p, &strategy()).is_err());
}

#[test]
fn composed_oracle_matches() {
    let st = Setup::new(7, 4, 2, 3, 4, 5);
    let mut rng = oracle::rng(8);
    let cur = oracle::random_matrix(&mut rng, 3, 4);
    let h1 = oracle::random_matrix(&mut rng, 4, 4);
    let h2 = oracle::random_matrix(&mut rng, 2, 4);
    let (feats, traces) = extract_context_features(
        &sentence(&cur, 0),
        &[sentence(&h1, 1), sentence(&h2, 2)],
        &st.params(),
        &strategy(),
    )
    .unwrap();
    let want = st.oracle_features(&cur, &[(h1, 1), (h2, 2)]);
    assert!(oracle::max_abs_diff(&feats.features.to_rows(), &want) <= 1e-12);
    assert_eq!(traces.len(), 2);
    assert_eq!(traces[0].iterations[0].alpha.len(), 4);
    assert_eq!(traces[1].iterations[0].alpha.len(), 2);
}

#[test]
fn history_sentences_do_not_leak() {
    // changing the distance-2 sentence must leave the distance-1 rows alone
    let st = Setup::new(9, 4, 2, 2, 4, 4);
    let mut rng = oracle::rng(10);
    let cur = sentence(&oracle::random_matrix(&mut rng, 3, 4), 0);
    let h1 = sentence(&oracle::random_matrix(&mut rng, 3, 4), 1);
    let a = sentence(&oracle::random_matrix(&mut rng, 2, 4), 2);
    let b = sentence(&oracle::random_matrix(&mut rng, 5, 4), 2);
    let p = st.params();
    let (fa, _) = extract_context_features(&cur, &[h1.clone(), a], &p, &strategy()).unwrap();
    let (fb, _) = extract_context_features(&cur, &[h1.clone(), b], &p, &strategy()).unwrap();
    let (f1, _) = extract_context_features(&cur, &[h1], &p, &strategy()).unwrap();
    let (ra, rb, r1) = (
        fa.features.to_rows(),
        fb.features.to_rows(),
        f1.features.to_rows(),
    );
    assert_eq!(ra[..2], rb[..2]);
    assert!(oracle::max_abs_diff(&ra[..2].to_vec(), &r1[..2].to_vec()) <= 1e-12);
    assert_ne!(ra[2..], rb[2..]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn query_is_permutation_invariant(seed in 0u64..1000, n in 1usize..6, shift in 0usize..6) {
        let mut rng = oracle::rng(seed);
        let rows = oracle::random_matrix(&mut rng, n, 3);
        let map = LinearMap {
            weight: Tensor::from_rows(&oracle::random_matrix(&mut rng, 3, 4)).unwrap(),
            bias: None,
        };
        let mut rotated = rows.clone();
        rotated.rotate_left(shift % n);
        let a = build_query(&sentence(&rows, 0), &map).unwrap();
        let b = build_query(&sentence(&rotated, 0), &map).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn features_match_oracle(seed in 0u64..1000, n1 in 1usize..5, n2 in 1usize..5, both in any::<bool>()) {
        let st = Setup::new(seed, 3, 2, 2, 3, 4);
        let mut rng = oracle::rng(seed + 1);
        let cur = oracle::random_matrix(&mut rng, 2, 3);
        let mut hist = vec![(oracle::random_matrix(&mut rng, n1, 3), 1)];
        if both {
            hist.push((oracle::random_matrix(&mut rng, n2, 3), 2));
        }
        let sents: Vec<_> = hist.iter().map(|(r, k)| sentence(r, *k)).collect();
        let (feats, _) = extract_context_features(&sentence(&cur, 0), &sents, &st.params(), &strategy()).unwrap();
        let want = st.oracle_features(&cur, &hist);
        prop_assert!(oracle::max_abs_diff(&feats.features.to_rows(), &want) <= 1e-12);
    }
}
