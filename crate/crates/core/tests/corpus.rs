//! The synthetic corpus carries linearly decodable speaker and language.

use laspa_core::synthcorpus::{generate_corpus, CorpusSpec, Utterance};

/// Solves the ridge-regularized normal equations by Gaussian elimination.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().partial_cmp(&a[j][c].abs()).unwrap()).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in 0..n {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in 0..n {
                    a[r][k] -= f * a[c][k];
                }
                for k in 0..b[r].len() {
                    b[r][k] -= f * b[c][k];
                }
            }
        }
    }
    (0..n).map(|r| b[r].iter().map(|v| v / a[r][r]).collect()).collect()
}

/// One-vs-rest least-squares classifier fit on `train`, accuracy on `test`.
fn least_squares_accuracy(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)], classes: usize) -> f64 {
    let d = train[0].0.len() + 1;
    let aug = |x: &[f64]| x.iter().copied().chain([1.0]).collect::<Vec<_>>();
    let mut xtx = vec![vec![0.0; d]; d];
    let mut xty = vec![vec![0.0; classes]; d];
    for (x, y) in train {
        let xa = aug(x);
        for i in 0..d {
            for j in 0..d {
                xtx[i][j] += xa[i] * xa[j];
            }
            xty[i][*y] += xa[i];
        }
    }
    for (i, row) in xtx.iter_mut().enumerate() {
        row[i] += 1e-6;
    }
    let w = solve(xtx, xty);
    let hits = test
        .iter()
        .filter(|(x, y)| {
            let xa = aug(x);
            let score = |c: usize| (0..d).map(|i| xa[i] * w[i][c]).sum::<f64>();
            (0..classes).max_by(|&a, &b| score(a).partial_cmp(&score(b)).unwrap()).unwrap() == *y
        })
        .count();
    hits as f64 / test.len() as f64
}

fn split(corpus: &[Utterance], label: impl Fn(&Utterance) -> usize) -> (Vec<(Vec<f64>, usize)>, Vec<(Vec<f64>, usize)>) {
    let rows: Vec<(usize, (Vec<f64>, usize))> =
        corpus.iter().enumerate().map(|(i, u)| (i, (u.mel.mean_frame(), label(u)))).collect();
    let (tr, te): (Vec<_>, Vec<_>) = rows.into_iter().partition(|(i, _)| i % 2 == 0);
    (tr.into_iter().map(|r| r.1).collect(), te.into_iter().map(|r| r.1).collect())
}

#[test]
fn speaker_and_language_are_linearly_decodable() {
    let spec = CorpusSpec::default();
    let corpus = generate_corpus(&spec).unwrap();
    let (tr, te) = split(&corpus, |u| u.speaker_id);
    let spk = least_squares_accuracy(&tr, &te, spec.n_speakers);
    let (tr, te) = split(&corpus, |u| u.language_id);
    let lng = least_squares_accuracy(&tr, &te, spec.n_languages);
    assert!(spk > 0.9, "speaker accuracy {spk}");
    assert!(lng > 0.9, "language accuracy {lng}");
}
