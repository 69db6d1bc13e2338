use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AstError, Sample};

/// Train / validation / test partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Stratified three-way split. Each class is shuffled with `seed` and cut
/// by largest-remainder rounding of `ratios`; every part of every class gets
/// at least one sample. Parts keep the input order of their samples.
pub fn split(samples: &[Sample], ratios: [f64; 3], seed: u64) -> Result<Split, AstError> {
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(AstError::Split(format!(
            "ratios must be positive, got {ratios:?}"
        )));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(AstError::Split(format!(
            "ratios must sum to 1, got {total}"
        )));
    }
    let classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in samples.iter().enumerate() {
        by_class[s.label].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut part_of = vec![0usize; samples.len()];
    for (label, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < ratios.len() {
            return Err(AstError::Split(format!(
                "class {label} has {} samples, fewer than the {} split parts",
                members.len(),
                ratios.len()
            )));
        }
        members.shuffle(&mut rng);
        let counts = allocate(members.len(), &ratios);
        let mut it = members.iter();
        for (part, &count) in counts.iter().enumerate() {
            for &i in it.by_ref().take(count) {
                part_of[i] = part;
            }
        }
    }

    let mut out = Split {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (i, s) in samples.iter().enumerate() {
        let dest = match part_of[i] {
            0 => &mut out.train,
            1 => &mut out.validation,
            _ => &mut out.test,
        };
        dest.push(s.clone());
    }
    Ok(out)
}

fn allocate(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    for k in 0..3 {
        if counts[k] == 0 {
            let donor = (0..3)
                .max_by_key(|&j| (counts[j], std::cmp::Reverse(j)))
                .expect("three parts");
            counts[donor] -= 1;
            counts[k] = 1;
        }
    }
    counts
}
